//! Flat `key=value` run configuration.
//!
//! ```text
//! # model
//! bands=4
//! width=32
//! blocks=5
//! kernel=5
//! variant=evolved
//! ratio=4
//! heads=1
//! seed=0
//! # optimization
//! lr=3e-4
//! betas=0.9,0.999
//! eps=1e-8
//! weight_decay=0.1
//! alpha=0.1
//! batch=32
//! steps=1000
//! # auto, or a comma-separated list of step indices
//! decay_steps=auto
//! decay_factor=0.1
//! checkpoint_every=100
//! workers=1
//! # optional paths
//! data=
//! out=
//! ```
//!
//! Unknown keys are rejected; missing keys keep the defaults above.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::parse_key_values;
use crate::error::{Error, Result};
use crate::model::LFormerConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: LFormerConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn parse_value<V: std::str::FromStr>(key: &str, raw: &str) -> Result<V> {
    raw.parse().map_err(|_| Error::Parse { location: format!("config:{key}"), msg: format!("invalid value {raw:?}") })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text, "config")?;
        let mut cfg = RunConfig::default();
        for (key, raw) in &kv {
            let raw = raw.as_str();
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            match key.as_str() {
                "bands" => m.bands = parse_value(key, raw)?,
                "width" => m.width = parse_value(key, raw)?,
                "blocks" => m.blocks = parse_value(key, raw)?,
                "kernel" => m.kernel = parse_value(key, raw)?,
                "variant" => m.variant = raw.parse()?,
                "ratio" => m.ratio = parse_value(key, raw)?,
                "heads" => m.heads = parse_value(key, raw)?,
                "seed" => {
                    m.seed = parse_value(key, raw)?;
                    t.seed = m.seed;
                }
                "lr" => t.lr = parse_value(key, raw)?,
                "betas" => {
                    let parts: Vec<&str> = raw.split(',').map(str::trim).collect();
                    let [b1, b2] = parts[..] else {
                        return Err(Error::Parse {
                            location: "config:betas".into(),
                            msg: "expected two comma-separated values".into(),
                        });
                    };
                    t.beta1 = parse_value(key, b1)?;
                    t.beta2 = parse_value(key, b2)?;
                }
                "eps" => t.eps = parse_value(key, raw)?,
                "weight_decay" => t.weight_decay = parse_value(key, raw)?,
                "alpha" => t.alpha = parse_value(key, raw)?,
                "batch" => t.batch = parse_value(key, raw)?,
                "steps" => t.steps = parse_value(key, raw)?,
                "decay_steps" => {
                    t.decay_steps = if raw == "auto" {
                        None
                    } else {
                        Some(
                            raw.split(',')
                                .map(str::trim)
                                .filter(|s| !s.is_empty())
                                .map(|s| parse_value(key, s))
                                .collect::<Result<_>>()?,
                        )
                    }
                }
                "decay_factor" => t.decay_factor = parse_value(key, raw)?,
                "checkpoint_every" => t.checkpoint_every = parse_value(key, raw)?,
                "workers" => t.workers = parse_value(key, raw)?,
                "data" => cfg.data = (!raw.is_empty()).then(|| PathBuf::from(raw)),
                "out" => cfg.out = (!raw.is_empty()).then(|| PathBuf::from(raw)),
                other => {
                    return Err(Error::Config(format!("unknown key {other:?}")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Serializes every key, so `parse(to_text())` is the identity.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k}={v}").unwrap();
        kv("bands", m.bands.to_string());
        kv("width", m.width.to_string());
        kv("blocks", m.blocks.to_string());
        kv("kernel", m.kernel.to_string());
        kv("variant", m.variant.to_string());
        kv("ratio", m.ratio.to_string());
        kv("heads", m.heads.to_string());
        kv("seed", m.seed.to_string());
        kv("lr", format!("{:e}", t.lr));
        kv("betas", format!("{},{}", t.beta1, t.beta2));
        kv("eps", format!("{:e}", t.eps));
        kv("weight_decay", t.weight_decay.to_string());
        kv("alpha", t.alpha.to_string());
        kv("batch", t.batch.to_string());
        kv("steps", t.steps.to_string());
        kv(
            "decay_steps",
            match &t.decay_steps {
                None => "auto".into(),
                Some(v) => v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
            },
        );
        kv("decay_factor", t.decay_factor.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("workers", t.workers.to_string());
        kv("data", self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        kv("out", self.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default());
        s
    }
}
