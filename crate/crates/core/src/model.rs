//! The LFormer network: dual-branch projections, one cross-attention, `N - 1`
//! evolved (or recomputed, or shared) attention blocks with value updates and
//! feature-integration blocks, and a residual reconstruction head.

use std::fmt;
use std::str::FromStr;

use crate::attention::{multi_head_attention, QkvProjection};
use crate::autograd::{Tape, Var};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::fusion_loss_var;
use crate::nn::{sobel, Conv2dLayer, Initializer, ParamId, ParamStore, ParamVars, ProjectionBlock};
use crate::tensor::{Scalar, Tensor};

/// How blocks `2..=N` obtain their attention maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// `A_{i+1} = softmax_rows(A_i * k_i)`.
    Evolved,
    /// Fresh QKV projections and attention over `V_{i+1}` in every block.
    Recompute,
    /// `A_{i+1} = A_1`.
    Shared,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Evolved, Variant::Recompute, Variant::Shared];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Evolved => "evolved",
            Variant::Recompute => "recompute",
            Variant::Shared => "shared",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "evolved" => Ok(Variant::Evolved),
            "recompute" => Ok(Variant::Recompute),
            "shared" => Ok(Variant::Shared),
            other => Err(Error::Config(format!("unknown variant {other:?} (expected evolved, recompute or shared)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LFormerConfig {
    pub bands: usize,
    pub width: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub variant: Variant,
    pub ratio: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for LFormerConfig {
    fn default() -> Self {
        LFormerConfig {
            bands: 4,
            width: 32,
            blocks: 5,
            kernel: 5,
            variant: Variant::Evolved,
            ratio: 4,
            heads: 1,
            seed: 0,
        }
    }
}

impl LFormerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.bands == 0 {
            return fail("bands must be at least 1".into());
        }
        if self.width == 0 {
            return fail("width must be at least 1".into());
        }
        if self.blocks == 0 {
            return fail("blocks must be at least 1".into());
        }
        if self.kernel.is_multiple_of(2) {
            return fail(format!("evolution kernel size must be odd, got {}", self.kernel));
        }
        if self.ratio == 0 {
            return fail("ratio must be at least 1".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return fail(format!("width {} is not divisible into {} heads", self.width, self.heads));
        }
        Ok(())
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }
}

/// Parameters of one evolution block (`i = 1..N-1`).
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    /// `Cat(F_g, F_d) -> conv3x3 -> ReLU -> conv3x3`.
    pub fib: ProjectionBlock,
    /// 1x1 conv on `Cat(F_g, F_d)` producing the next value.
    pub value: Conv2dLayer,
    /// `heads x k` evolution kernels (evolved variant only).
    pub evolve: Option<ParamId>,
    /// Per-block attention projections (recompute variant only).
    pub qkv: Option<QkvProjection>,
}

/// Values recorded by [`LFormerModel::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    /// `attention[i][h]`: map of block `i + 1`, head `h`, `T x T`.
    pub attention: Vec<Vec<Tensor<T>>>,
    /// Global features `F_1^g .. F_N^g`, each `H x W x d`.
    pub global: Vec<Tensor<T>>,
    /// Detail features `F_0^d .. F_{N-1}^d`, each `H x W x d`.
    pub detail: Vec<Tensor<T>>,
    pub output: Tensor<T>,
}

/// Tape handles for the same quantities as [`ForwardTrace`].
#[derive(Debug, Clone)]
pub struct TapeTrace {
    pub attention: Vec<Vec<Var>>,
    pub global: Vec<Var>,
    pub detail: Vec<Var>,
    pub output: Var,
}

// Independent initializer streams so variants built from one seed share
// every common parameter.
const KERNEL_STREAM: u64 = 0x6b65_726e_656c;
const QKV_STREAM: u64 = 0x0071_6b76;

#[derive(Debug, Clone)]
pub struct LFormerModel<T> {
    config: LFormerConfig,
    params: ParamStore<T>,
    proj_pan: ProjectionBlock,
    proj_ms: ProjectionBlock,
    proj_detail: ProjectionBlock,
    blocks: Vec<BlockParams>,
    /// Zero-initialized 3x3 conv over `Cat(F_N^g, F_{N-1}^d)`. Attention
    /// maps of the toy sizes are close to uniform, so `F_N^g` alone carries
    /// almost no spatial structure; the latest detail features give the
    /// head a direct view of it.
    head: Conv2dLayer,
}

impl<T: Scalar> LFormerModel<T> {
    pub fn build(config: LFormerConfig) -> Result<Self> {
        config.validate()?;
        let (c, d, k) = (config.bands, config.width, config.kernel);
        let mut store = ParamStore::new();
        let mut init = Initializer::new(config.seed);
        let mut kernel_init = Initializer::new(config.seed ^ KERNEL_STREAM);
        let mut qkv_init = Initializer::new(config.seed ^ QKV_STREAM);

        let proj_pan = ProjectionBlock::new(&mut store, &mut init, "proj_pan", 1, d);
        let proj_ms = ProjectionBlock::new(&mut store, &mut init, "proj_ms", c, d);
        let proj_detail = ProjectionBlock::new(&mut store, &mut init, "proj_detail", c + 1, d);
        let mut blocks = Vec::with_capacity(config.blocks - 1);
        for i in 1..config.blocks {
            let fib = ProjectionBlock::new(&mut store, &mut init, &format!("block{i}.fib"), 2 * d, d);
            let value = Conv2dLayer::new(&mut store, &mut init, &format!("block{i}.value"), 1, 2 * d, d);
            let evolve = (config.variant == Variant::Evolved).then(|| {
                let kernel = kernel_init.uniform(&[config.heads, k], k);
                store.add(format!("block{i}.evolve"), kernel)
            });
            let qkv = (config.variant == Variant::Recompute)
                .then(|| QkvProjection::new(&mut store, &mut qkv_init, &format!("block{i}.qkv"), d));
            blocks.push(BlockParams { fib, value, evolve, qkv });
        }
        let head = Conv2dLayer::zeroed(&mut store, "head", 3, 2 * d, c);
        Ok(LFormerModel { config, params: store, proj_pan, proj_ms, proj_detail, blocks, head })
    }

    /// Same weights under another variant: parameters present in both are
    /// copied, variant-specific ones come from the usual initialization.
    pub fn with_variant(&self, variant: Variant) -> Result<Self> {
        let mut other = Self::build(self.config.with_variant(variant))?;
        for id in other.params.ids().collect::<Vec<_>>() {
            if let Some(src) = self.params.find(other.params.name(id)) {
                *other.params.get_mut(id) = self.params.get(src).clone();
            }
        }
        Ok(other)
    }

    pub fn config(&self) -> &LFormerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn blocks(&self) -> &[BlockParams] {
        &self.blocks
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Scalar>(&self) -> LFormerModel<U> {
        LFormerModel {
            config: self.config,
            params: self.params.cast(),
            proj_pan: self.proj_pan,
            proj_ms: self.proj_ms,
            proj_detail: self.proj_detail,
            blocks: self.blocks.clone(),
            head: self.head,
        }
    }

    /// Feature integration of block `block` (0-based): fuses `F_i^g` with
    /// `F_{i-1}^d`, both `H x W x d`.
    pub fn fib_forward(
        &self,
        tape: &mut Tape<T>,
        p: &ParamVars,
        block: usize,
        global: Var,
        detail: Var,
    ) -> Result<Var> {
        let (sg, sd) = (tape.shape(global), tape.shape(detail));
        let d = self.config.width;
        if sg.len() != 3 || sg != sd || sg[2] != d {
            return Err(Error::shape("fib", sg, sd));
        }
        let cat = tape.concat(&[global, detail], 2)?;
        self.blocks[block].fib.forward(tape, p, cat)
    }

    /// Builds the full forward graph on `tape`.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, p: &ParamVars, ms_up: Var, pan: Var) -> Result<TapeTrace> {
        let (h, w) = self.check_inputs(tape.shape(ms_up), tape.shape(pan))?;
        let (t, d, heads) = (h * w, self.config.width, self.config.heads);

        let fp = self.proj_pan.forward(tape, p, pan)?;
        let fm = self.proj_ms.forward(tape, p, ms_up)?;
        let fp = tape.reshape(fp, &[t, d])?;
        let fm = tape.reshape(fm, &[t, d])?;
        let (g1, a1) = multi_head_attention(tape, fp, fm, fm, heads)?;

        let edges = {
            let m = sobel(tape.value(ms_up))?;
            let pe = sobel(tape.value(pan))?;
            let mut planes: Vec<Tensor<T>> = (0..self.config.bands).map(|b| m.channel(b)).collect::<Result<_>>()?;
            planes.push(pe);
            tape.constant(Tensor::stack_channels(&planes)?)
        };
        let d0 = self.proj_detail.forward(tape, p, edges)?;

        let mut global = vec![tape.reshape(g1, &[h, w, d])?];
        let mut detail = vec![d0];
        let mut attention = vec![a1.clone()];
        for (i, block) in self.blocks.iter().enumerate() {
            let g = *global.last().unwrap();
            let fd = self.fib_forward(tape, p, i, g, *detail.last().unwrap())?;
            let cat = tape.concat(&[g, fd], 2)?;
            let v = block.value.forward(tape, p, cat)?;
            let v = tape.reshape(v, &[t, d])?;
            let prev = attention.last().unwrap().clone();
            let (next_g, maps) = match self.config.variant {
                Variant::Evolved => {
                    let kernels = p.get(block.evolve.expect("evolved block has kernels"));
                    let mut maps = Vec::with_capacity(heads);
                    for (hh, &a) in prev.iter().enumerate() {
                        let k = tape.slice(kernels, 0, hh, hh + 1)?;
                        let mixed = tape.conv1d_rows(a, k)?;
                        maps.push(tape.softmax(mixed, 1)?);
                    }
                    (apply_maps(tape, &maps, v)?, maps)
                }
                Variant::Shared => (apply_maps(tape, &a1, v)?, a1.clone()),
                Variant::Recompute => {
                    let qkv = block.qkv.expect("recompute block has projections");
                    let (q, k, vv) = qkv.forward(tape, p, v)?;
                    multi_head_attention(tape, q, k, vv, heads)?
                }
            };
            global.push(tape.reshape(next_g, &[h, w, d])?);
            detail.push(fd);
            attention.push(maps);
        }
        let fused = tape.concat(&[*global.last().unwrap(), *detail.last().unwrap()], 2)?;
        let rec = self.head.forward(tape, p, fused)?;
        let output = tape.add(rec, ms_up)?;
        Ok(TapeTrace { attention, global, detail, output })
    }

    fn check_inputs(&self, ms_up: &[usize], pan: &[usize]) -> Result<(usize, usize)> {
        match (ms_up, pan) {
            (&[h, w, c], &[ph, pw, 1]) if (h, w) == (ph, pw) && c == self.config.bands => Ok((h, w)),
            _ => Err(Error::shape("lformer forward", ms_up, pan)),
        }
    }

    /// Inference forward returning the fused image and all intermediates.
    pub fn forward(&self, ms_up: &Tensor<T>, pan: &Tensor<T>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        self.forward_checked(ms_up, pan, cfg!(debug_assertions))
    }

    /// As [`Self::forward`] with an explicit choice of NaN/Inf guards.
    pub fn forward_checked(
        &self,
        ms_up: &Tensor<T>,
        pan: &Tensor<T>,
        check_finite: bool,
    ) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let mut tape = Tape::new();
        tape.set_check_finite(check_finite);
        let p = self.params.register_frozen(&mut tape);
        let m = tape.constant(ms_up.clone());
        let pv = tape.constant(pan.clone());
        let tr = self.forward_on_tape(&mut tape, &p, m, pv)?;
        let get = |v: &Var| tape.value(*v).clone();
        let trace = ForwardTrace {
            attention: tr.attention.iter().map(|hs| hs.iter().map(get).collect()).collect(),
            global: tr.global.iter().map(get).collect(),
            detail: tr.detail.iter().map(get).collect(),
            output: get(&tr.output),
        };
        Ok((trace.output.clone(), trace))
    }

    /// Fused output only, without keeping intermediates.
    pub fn predict(&self, ms_up: &Tensor<T>, pan: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(ms_up, pan)?.0)
    }

    /// `L1(H_s, GT) + alpha (1 - SSIM(H_s, GT))`.
    pub fn loss_forward(&self, sample: &Sample<T>, alpha: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.params.register_frozen(&mut tape);
        let loss = self.loss_on_tape(&mut tape, &p, sample, alpha)?;
        Ok(tape.value(loss).item().to_f64_lossy())
    }

    pub fn loss_on_tape(&self, tape: &mut Tape<T>, p: &ParamVars, sample: &Sample<T>, alpha: f64) -> Result<Var> {
        let gt = sample.gt.as_ref().ok_or_else(|| Error::Missing {
            what: "ground truth",
            detail: format!("sample {} has no GT", sample.id),
        })?;
        let m = tape.constant(sample.ms_up.clone());
        let pv = tape.constant(sample.pan.clone());
        let g = tape.constant(gt.clone());
        let out = self.forward_on_tape(tape, p, m, pv)?.output;
        fusion_loss_var(tape, out, g, alpha)
    }

    /// Loss and gradients for every parameter, in store order.
    pub fn loss_and_grads(&self, sample: &Sample<T>, alpha: f64, check_finite: bool) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        tape.set_check_finite(check_finite);
        let p = self.params.register(&mut tape);
        let loss = self.loss_on_tape(&mut tape, &p, sample, alpha)?;
        let value = tape.value(loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        tape.backward(loss)?;
        let grads =
            p.as_slice().iter().map(|&v| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)))).collect();
        Ok((value, grads))
    }
}

/// `F = Cat_h(A_h V_h)` with `V` split evenly over the heads.
fn apply_maps<T: Scalar>(tape: &mut Tape<T>, maps: &[Var], v: Var) -> Result<Var> {
    if maps.len() == 1 {
        return tape.matmul(maps[0], v);
    }
    let hd = tape.shape(v)[1] / maps.len();
    let mut outs = Vec::with_capacity(maps.len());
    for (h, &a) in maps.iter().enumerate() {
        let vh = tape.slice(v, 1, h * hd, (h + 1) * hd)?;
        outs.push(tape.matmul(a, vh)?);
    }
    tape.concat(&outs, 1)
}
