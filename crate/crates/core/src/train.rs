//! AdamW optimization, the step schedule, deterministic batching and
//! checkpoint I/O.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{load_tensor, parse_key_values, save_tensor, Sample};
use crate::error::{Error, Result};
use crate::model::{LFormerConfig, LFormerModel, Variant};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Optimizer and loop settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub batch: usize,
    pub steps: usize,
    /// Steps at which the learning rate is multiplied by `decay_factor`;
    /// `None` places milestones at 3/8 and 5/8 of `steps`.
    pub decay_steps: Option<Vec<usize>>,
    pub decay_factor: f64,
    pub checkpoint_every: usize,
    pub workers: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
            alpha: 0.1,
            batch: 32,
            steps: 1000,
            decay_steps: None,
            decay_factor: 0.1,
            checkpoint_every: 100,
            workers: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite nonnegative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be nonnegative");
        }
        if self.alpha.is_nan() || self.alpha < 0.0 {
            return bad("alpha must be nonnegative");
        }
        if self.batch == 0 {
            return bad("batch must be at least 1");
        }
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1");
        }
        Ok(())
    }

    pub fn milestones(&self) -> Vec<usize> {
        match &self.decay_steps {
            Some(v) => v.clone(),
            None => vec![self.steps * 3 / 8, self.steps * 5 / 8],
        }
    }

    /// Learning rate used for the update at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestones().iter().filter(|&&m| m > 0 && step >= m).count();
        self.lr * self.decay_factor.powi(passed as i32)
    }
}

/// Adam with decoupled weight decay:
/// `p -= lr * wd * p; p -= lr * m_hat / (sqrt(v_hat) + eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || params.len() != self.m.len() {
            return Err(Error::invalid("adamw", "gradient list does not match the parameter store"));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (((p, g), m), v) in params.tensors_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", p.shape(), g.shape()));
            }
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((pv, &gv), mv), vv) in it {
                let gf = gv.to_f64_lossy();
                let mf = b1 * mv.to_f64_lossy() + (1.0 - b1) * gf;
                let vf = b2 * vv.to_f64_lossy() + (1.0 - b2) * gf * gf;
                let mut x = pv.to_f64_lossy();
                x -= lr * self.weight_decay * x;
                x -= lr * (mf / c1) / ((vf / c2).sqrt() + self.eps);
                *mv = T::from_f64_lossy(mf);
                *vv = T::from_f64_lossy(vf);
                *pv = T::from_f64_lossy(x);
            }
        }
        Ok(())
    }
}

/// Sample indices for 0-based `step`: consecutive slices of an endless
/// sequence of per-epoch permutations, each seeded by `(seed, epoch)`.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut cache: Option<(usize, Vec<usize>)> = None;
    (step * batch..(step + 1) * batch)
        .map(|pos| {
            let epoch = pos / n;
            if cache.as_ref().map(|c| c.0) != Some(epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407));
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng);
                cache = Some((epoch, perm));
            }
            cache.as_ref().unwrap().1[pos % n]
        })
        .collect()
}

/// One optimization step on `batch`: per-sample gradients are computed in
/// parallel on the current rayon pool, then summed in batch order so the
/// result does not depend on the worker count. Returns the mean loss.
pub fn train_step<T: Scalar>(
    model: &mut LFormerModel<T>,
    batch: &[&Sample<T>],
    opt: &mut AdamW<T>,
    lr: f64,
    alpha: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step", "empty batch"));
    }
    let per_sample: Vec<(f64, Vec<Tensor<T>>)> =
        batch.par_iter().map(|s| model.loss_and_grads(s, alpha, false)).collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grads: Vec<Tensor<T>> = per_sample[0].1.iter().map(|g| Tensor::zeros(g.shape())).collect();
    for (l, gs) in &per_sample {
        loss += l;
        for (acc, g) in grads.iter_mut().zip(gs) {
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    let inv = T::from_f64_lossy(1.0 / n);
    for g in &mut grads {
        for v in g.data_mut() {
            *v *= inv;
        }
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite { op: "gradient" });
    }
    opt.update(model.params_mut(), &grads, lr)?;
    Ok(loss)
}

/// Mean loss over `samples` without updating anything.
pub fn evaluate_loss<T: Scalar>(model: &LFormerModel<T>, samples: &[Sample<T>], alpha: f64) -> Result<f64> {
    let losses: Vec<f64> = samples.par_iter().map(|s| model.loss_forward(s, alpha)).collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Model, optimizer state and position of a training run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: LFormerModel<T>,
    pub opt: AdamW<T>,
    pub step: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(model: LFormerModel<T>, cfg: &TrainConfig) -> Self {
        let opt = AdamW::new(model.params(), cfg);
        TrainState { model, opt, step: 0 }
    }

    /// Runs steps until `cfg.steps` (or `stop_at`, if smaller), calling
    /// `on_step(step, loss, state)` after each update with the number of
    /// completed steps.
    pub fn run(
        &mut self,
        samples: &[Sample<T>],
        cfg: &TrainConfig,
        stop_at: Option<usize>,
        mut on_step: impl FnMut(usize, f64, &Self) -> Result<()>,
    ) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::invalid("train", "no training samples"));
        }
        let end = stop_at.map_or(cfg.steps, |s| s.min(cfg.steps));
        while self.step < end {
            let idx = batch_indices(cfg.seed, self.step, cfg.batch, samples.len());
            let batch: Vec<&Sample<T>> = idx.iter().map(|&i| &samples[i]).collect();
            let lr = cfg.lr_at(self.step);
            let loss = train_step(&mut self.model, &batch, &mut self.opt, lr, cfg.alpha)?;
            self.step += 1;
            on_step(self.step, loss, self)?;
        }
        Ok(())
    }
}

// ── checkpoints ─────────────────────────────────────────────────────────

pub fn config_to_pairs(c: &LFormerConfig) -> Vec<(&'static str, String)> {
    vec![
        ("bands", c.bands.to_string()),
        ("width", c.width.to_string()),
        ("blocks", c.blocks.to_string()),
        ("kernel", c.kernel.to_string()),
        ("variant", c.variant.to_string()),
        ("ratio", c.ratio.to_string()),
        ("heads", c.heads.to_string()),
        ("seed", c.seed.to_string()),
    ]
}

fn parse_num<N: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str, location: &str) -> Result<N> {
    let raw = kv
        .get(key)
        .ok_or_else(|| Error::Parse { location: location.to_string(), msg: format!("missing key {key}") })?;
    raw.parse()
        .map_err(|_| Error::Parse { location: location.to_string(), msg: format!("invalid value {raw:?} for {key}") })
}

pub const CHECKPOINT_MANIFEST: &str = "manifest.txt";

fn file_name(name: &str) -> String {
    format!("{name}.lftk")
}

/// Writes `dir/manifest.txt`, one `.lftk` per parameter under `dir/params`
/// and, when given, the optimizer moments under `dir/adam`.
pub fn save_checkpoint<T: Scalar>(
    dir: impl AsRef<Path>,
    model: &LFormerModel<T>,
    state: Option<(&AdamW<T>, usize)>,
) -> Result<()> {
    let dir = dir.as_ref();
    let pdir = dir.join("params");
    fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
    let mut text = String::new();
    for (k, v) in config_to_pairs(model.config()) {
        writeln!(text, "model.{k}={v}").unwrap();
    }
    for (name, t) in model.params().iter() {
        save_tensor(pdir.join(file_name(name)), t)?;
        writeln!(text, "param.{name}=params/{}", file_name(name)).unwrap();
    }
    if let Some((opt, step)) = state {
        let adir = dir.join("adam");
        fs::create_dir_all(&adir).map_err(|e| Error::io(&adir, e))?;
        writeln!(text, "train.step={step}").unwrap();
        writeln!(text, "adam.step={}", opt.step).unwrap();
        for (i, (name, _)) in model.params().iter().enumerate() {
            save_tensor(adir.join(format!("m.{}", file_name(name))), &opt.m[i])?;
            save_tensor(adir.join(format!("v.{}", file_name(name))), &opt.v[i])?;
        }
        writeln!(text, "adam.beta1={:e}", opt.beta1).unwrap();
        writeln!(text, "adam.beta2={:e}", opt.beta2).unwrap();
        writeln!(text, "adam.eps={:e}", opt.eps).unwrap();
        writeln!(text, "adam.weight_decay={:e}", opt.weight_decay).unwrap();
    }
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_config(dir: impl AsRef<Path>) -> Result<LFormerConfig> {
    let path = dir.as_ref().join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    config_from_manifest(&parse_key_values(&text, "checkpoint manifest")?)
}

fn config_from_manifest(kv: &BTreeMap<String, String>) -> Result<LFormerConfig> {
    let loc = "checkpoint manifest";
    let cfg = LFormerConfig {
        bands: parse_num(kv, "model.bands", loc)?,
        width: parse_num(kv, "model.width", loc)?,
        blocks: parse_num(kv, "model.blocks", loc)?,
        kernel: parse_num(kv, "model.kernel", loc)?,
        variant: kv.get("model.variant").map(|s| s.parse::<Variant>()).transpose()?.unwrap_or(Variant::Evolved),
        ratio: parse_num(kv, "model.ratio", loc)?,
        heads: parse_num(kv, "model.heads", loc)?,
        seed: parse_num(kv, "model.seed", loc)?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// A loaded model and, when present, its optimizer state and step.
pub type Checkpoint<T> = (LFormerModel<T>, Option<(AdamW<T>, usize)>);

/// Loads a model and, if present, the optimizer state and step count.
pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let dir = dir.as_ref();
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let kv = parse_key_values(&text, "checkpoint manifest")?;
    let mut model = LFormerModel::<T>::build(config_from_manifest(&kv)?)?;
    let ids: Vec<_> = model.params().ids().collect();
    for &id in &ids {
        let name = model.params().name(id).to_string();
        let rel = kv
            .get(&format!("param.{name}"))
            .ok_or_else(|| Error::Missing { what: "parameter", detail: name.clone() })?;
        let t: Tensor<T> = load_tensor(dir.join(rel))?;
        if t.shape() != model.params().get(id).shape() {
            return Err(Error::shape("load_checkpoint", t.shape(), model.params().get(id).shape()));
        }
        *model.params_mut().get_mut(id) = t;
    }
    if !kv.contains_key("train.step") {
        return Ok((model, None));
    }
    let loc = "checkpoint manifest";
    let mut opt = AdamW {
        beta1: parse_num(&kv, "adam.beta1", loc)?,
        beta2: parse_num(&kv, "adam.beta2", loc)?,
        eps: parse_num(&kv, "adam.eps", loc)?,
        weight_decay: parse_num(&kv, "adam.weight_decay", loc)?,
        step: parse_num(&kv, "adam.step", loc)?,
        m: Vec::new(),
        v: Vec::new(),
    };
    for &id in &ids {
        let name = model.params().name(id);
        opt.m.push(load_tensor(dir.join("adam").join(format!("m.{}", file_name(name))))?);
        opt.v.push(load_tensor(dir.join("adam").join(format!("v.{}", file_name(name))))?);
    }
    let step = parse_num(&kv, "train.step", loc)?;
    Ok((model, Some((opt, step))))
}
