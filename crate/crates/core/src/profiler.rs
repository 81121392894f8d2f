//! Analytic parameter / FLOP / memory accounting, forward timing and
//! attention-similarity analysis.
//!
//! FLOP convention: one multiply-accumulate is 2 FLOPs, a `k x k` conv over
//! `H x W` costs `2 HW k^2 Cin Cout` (bias adds are free), a matmul costs
//! `2 m k n`, softmax costs 5 per element and the row convolution of a
//! `T x T` map costs `2 T^2 k`. ReLU, Sobel, reshapes and residual adds are
//! not counted. Every attention map is `T x T` with `T = HW`, so the cost of
//! all variants — the evolved one included — grows with `T^2`, not `T`.

use std::fmt::Write as _;
use std::time::Instant;

use crate::attention::attention_cosine_similarity;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{ForwardTrace, LFormerConfig, LFormerModel, Variant};
use crate::tensor::{DType, Scalar, Tensor};

pub fn count_params<T: Scalar>(model: &LFormerModel<T>) -> usize {
    model.num_params()
}

fn conv_params(k: usize, cin: usize, cout: usize) -> usize {
    k * k * cin * cout + cout
}

fn projection_params(cin: usize, d: usize) -> usize {
    conv_params(3, cin, d) + conv_params(3, d, d)
}

/// Closed-form parameter count of [`LFormerModel::build`].
pub fn analytic_params(cfg: &LFormerConfig) -> usize {
    let (c, d) = (cfg.bands, cfg.width);
    let stem = projection_params(1, d) + projection_params(c, d) + projection_params(c + 1, d);
    let per_block = projection_params(2 * d, d)
        + conv_params(1, 2 * d, d)
        + match cfg.variant {
            Variant::Evolved => cfg.heads * cfg.kernel,
            Variant::Recompute => 3 * conv_params(1, d, d),
            Variant::Shared => 0,
        };
    stem + (cfg.blocks - 1) * per_block + conv_params(3, 2 * d, c)
}

/// FLOPs by operation family; same families as the runtime tape tally.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub conv2d: u64,
    pub matmul: u64,
    pub softmax: u64,
    pub conv1d: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.conv2d + self.matmul + self.softmax + self.conv1d
    }
}

/// Analytic forward FLOPs at an `h x w` input.
pub fn count_flops(cfg: &LFormerConfig, h: usize, w: usize) -> FlopBreakdown {
    let t = (h * w) as u64;
    let (c, d, heads, k) = (cfg.bands as u64, cfg.width as u64, cfg.heads as u64, cfg.kernel as u64);
    let conv = |kk: u64, cin: u64, cout: u64| 2 * t * kk * kk * cin * cout;
    let proj = |cin: u64| conv(3, cin, d) + conv(3, d, d);
    // Q K^T and A V summed over heads: 2 T^2 d each
    let attend = 2 * t * t * d;

    let mut f = FlopBreakdown {
        conv2d: proj(1) + proj(c) + proj(c + 1) + conv(3, 2 * d, c),
        matmul: 2 * attend,
        softmax: 5 * t * t * heads,
        conv1d: 0,
    };
    let blocks = cfg.blocks as u64 - 1;
    f.conv2d += blocks * (proj(2 * d) + conv(1, 2 * d, d));
    f.matmul += blocks * attend;
    match cfg.variant {
        Variant::Evolved => {
            f.conv1d += blocks * 2 * t * t * k * heads;
            f.softmax += blocks * 5 * t * t * heads;
        }
        Variant::Recompute => {
            f.conv2d += blocks * 3 * conv(1, d, d);
            f.matmul += blocks * attend;
            f.softmax += blocks * 5 * t * t * heads;
        }
        Variant::Shared => {}
    }
    f
}

/// Analytic peak of live activation bytes during inference, taken as the
/// largest stage of the forward schedule:
///
/// * cross-attention: inputs, `F_P`, `F_M`, logits, `A_1`, `F_1^g`;
/// * each later block: inputs, the previous map, the new map and its
///   pre-softmax scores (plus `Q`, `K`, `V` for recompute), `F^g`, `F^d`,
///   their concatenation, `V` and the new `F^g`, with `A_1` retained for the
///   shared variant.
///
/// Parameters are not included.
pub fn peak_bytes(cfg: &LFormerConfig, h: usize, w: usize, dtype: DType) -> u64 {
    let t = (h * w) as u64;
    let (c, d, heads) = (cfg.bands as u64, cfg.width as u64, cfg.heads as u64);
    let maps = t * t * heads;
    let inputs = t * (c + 1);
    let cross = inputs + 2 * t * d + 2 * maps + t * d;
    let block_features = 2 * t * d + 2 * t * d + t * d + t * d;
    let block = match cfg.variant {
        Variant::Evolved => inputs + 3 * maps + block_features,
        Variant::Shared => inputs + maps + block_features,
        Variant::Recompute => inputs + 2 * maps + 3 * t * d + block_features,
    };
    let elems = if cfg.blocks > 1 { cross.max(block) } else { cross };
    elems * dtype.size_of() as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchStats {
    pub runs_ms: Vec<f64>,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub min_ms: f64,
    pub median_ms: f64,
}

impl BenchStats {
    pub fn from_runs(runs_ms: Vec<f64>) -> Self {
        let n = runs_ms.len() as f64;
        let mean = runs_ms.iter().sum::<f64>() / n;
        let var = runs_ms.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mut sorted = runs_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if sorted.len() % 2 == 1 {
            sorted[sorted.len() / 2]
        } else {
            0.5 * (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2])
        };
        BenchStats { mean_ms: mean, std_ms: var.sqrt(), min_ms: sorted[0], median_ms: median, runs_ms }
    }
}

/// Times `n_runs` forward passes after `n_warm` untimed ones, with the
/// finite-value guards disabled.
pub fn bench_forward<T: Scalar>(
    model: &LFormerModel<T>,
    sample: &Sample<T>,
    n_warm: usize,
    n_runs: usize,
) -> Result<BenchStats> {
    if n_runs < 3 {
        return Err(Error::invalid("bench_forward", "at least 3 timed runs required"));
    }
    for _ in 0..n_warm {
        model.forward_checked(&sample.ms_up, &sample.pan, false)?;
    }
    let mut runs = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let start = Instant::now();
        let out = model.forward_checked(&sample.ms_up, &sample.pan, false)?;
        runs.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    Ok(BenchStats::from_runs(runs))
}

/// Symmetric matrix of cosine similarities between attention maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        let s: f64 = (0..self.n)
            .flat_map(|i| (0..self.n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .sum();
        s / (self.n * (self.n - 1)) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("map");
        for j in 0..self.n {
            write!(out, ",A{}", j + 1).unwrap();
        }
        out.push('\n');
        for i in 0..self.n {
            write!(out, "A{}", i + 1).unwrap();
            for j in 0..self.n {
                write!(out, ",{:.6}", self.get(i, j)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Pairwise cosine similarity of the per-block attention maps (all heads of
/// a block flattened together).
pub fn similarity_report<T: Scalar>(trace: &ForwardTrace<T>) -> Result<SimilarityMatrix> {
    let n = trace.attention.len();
    if n < 2 {
        return Err(Error::invalid("similarity_report", "at least two attention maps required"));
    }
    let flat: Vec<Tensor<T>> = trace
        .attention
        .iter()
        .map(|heads| {
            let data: Vec<T> = heads.iter().flat_map(|a| a.data().iter().copied()).collect();
            let len = data.len();
            Tensor::new(&[len], data)
        })
        .collect::<Result<_>>()?;
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in i + 1..n {
            let s = attention_cosine_similarity(&flat[i], &flat[j])?;
            values[i * n + j] = s;
            values[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix { n, values })
}

/// Quality numbers reported next to a profile row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualitySummary {
    pub sam: f64,
    pub ergas: f64,
    pub q2n: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileReport {
    pub variant: Variant,
    pub params: usize,
    pub flops: u64,
    pub timing: Option<BenchStats>,
    pub peak_bytes: u64,
    pub quality: Option<QualitySummary>,
}

/// One row per requested variant at identical `(c, d, N, k, H, W)`; timing
/// and quality columns are left empty.
pub fn compare_variants(cfg: &LFormerConfig, h: usize, w: usize, variants: &[Variant]) -> Result<Vec<ProfileReport>> {
    variants
        .iter()
        .map(|&v| {
            let c = cfg.with_variant(v);
            c.validate()?;
            Ok(ProfileReport {
                variant: v,
                params: analytic_params(&c),
                flops: count_flops(&c, h, w).total(),
                timing: None,
                peak_bytes: peak_bytes(&c, h, w, DType::F32),
                quality: None,
            })
        })
        .collect()
}

pub const PROFILE_HEADER: &str = "variant,SAM,ERGAS,Q2n,PSNR,params,flops,fwd_ms_mean,fwd_ms_std,peak_bytes";

/// CSV with quality columns first, in the order SAM, ERGAS, Q2n, PSNR,
/// followed by cost columns; absent values are empty cells.
pub fn profile_csv(rows: &[ProfileReport]) -> String {
    let mut out = format!("{PROFILE_HEADER}\n");
    for r in rows {
        let q = match &r.quality {
            Some(q) => format!("{:.6},{:.6},{:.6},{:.6}", q.sam, q.ergas, q.q2n, q.psnr),
            None => ",,,".to_string(),
        };
        let t = match &r.timing {
            Some(t) => format!("{:.4},{:.4}", t.mean_ms, t.std_ms),
            None => ",".to_string(),
        };
        writeln!(out, "{},{q},{},{},{t},{}", r.variant, r.params, r.flops, r.peak_bytes).unwrap();
    }
    out
}
