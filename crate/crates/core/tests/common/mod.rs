//! Shared test helpers: central finite differences and naive-loop metric
//! oracles. The oracles deliberately avoid integral images, separable
//! filters and the Cayley–Dickson recursion used by the library.
#![allow(dead_code, clippy::needless_range_loop)]

use lformer::attention::{evolve_attention, multi_head_attention, scaled_dot_attention};
use lformer::data::Sample;
use lformer::metrics::{fusion_loss_var, l1_loss_var, ssim_var};
use lformer::{LFormerModel, Result, Tape, Tensor, Var};
use num_complex::Complex64;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Random sign, magnitude in `[0.1, 1)`: keeps `relu`/`abs` off their kink.
pub fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `|a - b| <= tol * max(1, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

// ── finite differences ──────────────────────────────────────────────────

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    /// Indices of inputs that are differentiated (others are constants).
    pub wrt: Vec<usize>,
    pub build: Build,
}

fn objective(
    inputs: &[Tensor<f64>],
    wrt: &[usize],
    build: &Build,
    proj: Option<&Tensor<f64>>,
) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    tape.set_check_finite(true);
    let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| tape.leaf(t.clone(), wrt.contains(&i))).collect();
    let out = build(&mut tape, &vars)?;
    let root = match proj {
        Some(r) => {
            let r = tape.constant(r.clone());
            let m = tape.mul(out, r)?;
            tape.sum(m)?
        }
        None => out,
    };
    Ok((tape, vars, root))
}

/// Largest relative error between backprop and central differences of
/// `sum(op(inputs) * R)`, with `R` a fixed random projection so every
/// output element contributes with a distinct weight.
pub fn grad_check(case: &OpCase, seed: u64) -> Result<f64> {
    let (probe, _, out) = objective(&case.inputs, &case.wrt, &case.build, None)?;
    let mut r = rng(seed);
    let proj = uniform(&mut r, probe.shape(out), -1.0, 1.0);

    let (mut tape, vars, root) = objective(&case.inputs, &case.wrt, &case.build, Some(&proj))?;
    tape.backward(root)?;
    let f = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let (t, _, root) = objective(inputs, &case.wrt, &case.build, Some(&proj))?;
        Ok(t.value(root).item())
    };
    let mut worst = 0.0f64;
    for &i in &case.wrt {
        let analytic = tape.grad(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape()));
        for j in 0..case.inputs[i].numel() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (f(&plus)? - f(&minus)?) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    let wrt = (0..inputs.len()).collect();
    OpCase { name, inputs, wrt, build: Box::new(build) }
}

/// One case per differentiable tape operation plus the composites built
/// from them.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let r = &mut r;
    let gw = lformer::metrics::gaussian_window(3, 1.0);
    let mut cases = vec![
        case("matmul", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0)], |t, v| {
            t.matmul(v[0], v[1])
        }),
        case("transpose", vec![uniform(r, &[3, 5], -1.0, 1.0)], |t, v| t.transpose(v[0])),
        case("softmax_rows", vec![uniform(r, &[4, 6], -2.0, 2.0)], |t, v| t.softmax(v[0], 1)),
        case("softmax_cols", vec![uniform(r, &[4, 6], -2.0, 2.0)], |t, v| t.softmax(v[0], 0)),
        case(
            "conv2d_3x3_bias",
            vec![uniform(r, &[5, 6, 2], -1.0, 1.0), uniform(r, &[3, 3, 2, 3], -1.0, 1.0), uniform(r, &[3], -1.0, 1.0)],
            |t, v| t.conv2d(v[0], v[1], Some(v[2])),
        ),
        case("conv2d_1x1", vec![uniform(r, &[4, 4, 3], -1.0, 1.0), uniform(r, &[1, 1, 3, 2], -1.0, 1.0)], |t, v| {
            t.conv2d(v[0], v[1], None)
        }),
        case("conv2d_5x3", vec![uniform(r, &[6, 5, 1], -1.0, 1.0), uniform(r, &[5, 3, 1, 2], -1.0, 1.0)], |t, v| {
            t.conv2d(v[0], v[1], None)
        }),
        case("conv1d_rows", vec![uniform(r, &[4, 7], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)], |t, v| {
            t.conv1d_rows(v[0], v[1])
        }),
        case("conv1d_rows_1xk", vec![uniform(r, &[3, 6], -1.0, 1.0), uniform(r, &[1, 3], -1.0, 1.0)], |t, v| {
            t.conv1d_rows(v[0], v[1])
        }),
        case("filter_valid", vec![uniform(r, &[6, 5, 2], -1.0, 1.0)], move |t, v| t.filter_valid(v[0], &gw)),
        case("add", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |t, v| t.add(v[0], v[1])),
        case("sub", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |t, v| t.sub(v[0], v[1])),
        case("mul", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)], |t, v| t.mul(v[0], v[1])),
        case("div", vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], 0.5, 2.0)], |t, v| t.div(v[0], v[1])),
        case("scale", vec![uniform(r, &[2, 5], -1.0, 1.0)], |t, v| t.scale(v[0], -1.7)),
        case("add_scalar", vec![uniform(r, &[2, 5], -1.0, 1.0)], |t, v| t.add_scalar(v[0], 0.3)),
        case("relu", vec![off_kink(r, &[3, 5])], |t, v| t.relu(v[0])),
        case("abs", vec![off_kink(r, &[3, 5])], |t, v| t.abs(v[0])),
        case("sqrt", vec![uniform(r, &[3, 5], 0.5, 2.0)], |t, v| t.sqrt(v[0])),
        case("sum", vec![uniform(r, &[3, 5], -1.0, 1.0)], |t, v| t.sum(v[0])),
        case("mean", vec![uniform(r, &[3, 5], -1.0, 1.0)], |t, v| t.mean(v[0])),
        case("concat_axis0", vec![uniform(r, &[2, 3], -1.0, 1.0), uniform(r, &[4, 3], -1.0, 1.0)], |t, v| {
            t.concat(&[v[0], v[1]], 0)
        }),
        case("concat_axis2", vec![uniform(r, &[2, 3, 1], -1.0, 1.0), uniform(r, &[2, 3, 2], -1.0, 1.0)], |t, v| {
            t.concat(&[v[0], v[1]], 2)
        }),
        case("slice", vec![uniform(r, &[4, 6], -1.0, 1.0)], |t, v| t.slice(v[0], 1, 2, 5)),
        case("reshape", vec![uniform(r, &[2, 3, 4], -1.0, 1.0)], |t, v| t.reshape(v[0], &[6, 4])),
        case(
            "scaled_dot_attention",
            vec![uniform(r, &[5, 3], -1.0, 1.0), uniform(r, &[5, 3], -1.0, 1.0), uniform(r, &[5, 2], -1.0, 1.0)],
            |t, v| Ok(scaled_dot_attention(t, v[0], v[1], v[2])?.0),
        ),
        case(
            "multi_head_attention",
            vec![uniform(r, &[6, 4], -1.0, 1.0), uniform(r, &[6, 4], -1.0, 1.0), uniform(r, &[6, 4], -1.0, 1.0)],
            |t, v| Ok(multi_head_attention(t, v[0], v[1], v[2], 2)?.0),
        ),
        case("evolve_attention", vec![uniform(r, &[5, 5], 0.0, 1.0), uniform(r, &[3], -1.0, 1.0)], |t, v| {
            evolve_attention(t, v[0], v[1])
        }),
        case("l1_loss", vec![uniform(r, &[3, 3, 2], 0.0, 1.0), uniform(r, &[3, 3, 2], 0.0, 1.0)], |t, v| {
            l1_loss_var(t, v[0], v[1])
        }),
        case("ssim", vec![uniform(r, &[12, 13, 2], 0.0, 1.0), uniform(r, &[12, 13, 2], 0.0, 1.0)], |t, v| {
            ssim_var(t, v[0], v[1])
        }),
        case("fusion_loss", vec![uniform(r, &[12, 12, 1], 0.0, 1.0), uniform(r, &[12, 12, 1], 0.0, 1.0)], |t, v| {
            fusion_loss_var(t, v[0], v[1], 0.1)
        }),
        case(
            "conv_relu_softmax_mean",
            vec![uniform(r, &[4, 4, 2], -1.0, 1.0), uniform(r, &[3, 3, 2, 3], -1.0, 1.0), uniform(r, &[3], -0.5, 0.5)],
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]))?;
                let y = t.relu(y)?;
                let y = t.reshape(y, &[16, 3])?;
                let y = t.softmax(y, 1)?;
                t.mean(y)
            },
        ),
    ];
    // the L1 kink sits at x == y; move the pair apart
    for c in &mut cases {
        if c.name == "l1_loss" || c.name == "fusion_loss" {
            let y = c.inputs[1].clone();
            let mut flip = rng(seed ^ 0x11);
            let shifted = y.data().iter().map(|v| v + if flip.gen_bool(0.5) { 0.2 } else { -0.2 }).collect();
            c.inputs[0] = Tensor::new(y.shape(), shifted).unwrap();
        }
    }
    cases
}

/// A model whose zero-initialized head is replaced by random weights, so
/// every parameter receives a nonzero gradient.
pub fn with_random_head(mut model: LFormerModel<f64>, seed: u64) -> LFormerModel<f64> {
    let mut r = rng(seed);
    for name in ["head.weight", "head.bias"] {
        let id = model.params().find(name).expect("head parameter");
        for v in model.params_mut().get_mut(id).data_mut() {
            *v = r.gen_range(-0.1..0.1);
        }
    }
    model
}

/// Random reduced-resolution sample with arbitrary (not Wald-consistent)
/// inputs, for gradient checks on images too small for the simulator.
pub fn random_sample(seed: u64, size: usize, bands: usize) -> Sample<f64> {
    let mut r = rng(seed);
    let low = (size / 4).max(1);
    Sample {
        id: format!("rand{seed}"),
        gt: Some(uniform(&mut r, &[size, size, bands], 0.0, 1.0)),
        pan: uniform(&mut r, &[size, size, 1], 0.0, 1.0),
        ms: uniform(&mut r, &[low, low, bands], 0.0, 1.0),
        ms_up: uniform(&mut r, &[size, size, bands], 0.0, 1.0),
    }
}

/// End-to-end loss gradient check over a random `fraction` of all scalar
/// parameters. Returns `(max relative error, number checked)`.
pub fn model_grad_check(
    model: &LFormerModel<f64>,
    sample: &Sample<f64>,
    alpha: f64,
    fraction: f64,
    seed: u64,
) -> Result<(f64, usize)> {
    let (_, grads) = model.loss_and_grads(sample, alpha, true)?;
    let ids: Vec<_> = model.params().ids().collect();
    let flat: Vec<(usize, usize)> =
        ids.iter().enumerate().flat_map(|(p, &id)| (0..model.params().get(id).numel()).map(move |j| (p, j))).collect();
    let n = ((flat.len() as f64 * fraction).ceil() as usize).max(1);
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for k in index::sample(&mut r, flat.len(), n) {
        let (p, j) = flat[k];
        let id = ids[p];
        let orig = model.params().get(id).data()[j];
        probe.params_mut().get_mut(id).data_mut()[j] = orig + FD_STEP;
        let up = probe.loss_forward(sample, alpha)?;
        probe.params_mut().get_mut(id).data_mut()[j] = orig - FD_STEP;
        let down = probe.loss_forward(sample, alpha)?;
        probe.params_mut().get_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grads[p].data()[j], numeric));
    }
    Ok((worst, n))
}

// ── naive metric oracles ────────────────────────────────────────────────

fn dims(t: &Tensor<f64>) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], if s.len() == 3 { s[2] } else { 1 })
}

fn px(t: &Tensor<f64>, i: usize, j: usize, b: usize) -> f64 {
    let (_, w, c) = dims(t);
    t.data()[(i * w + j) * c + b]
}

pub fn sam_oracle(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let (h, w, c) = dims(x);
    let mut total = 0.0;
    for i in 0..h {
        for j in 0..w {
            let dot: f64 = (0..c).map(|b| px(x, i, j, b) * px(y, i, j, b)).sum();
            let nx: f64 = (0..c).map(|b| px(x, i, j, b).powi(2)).sum::<f64>().sqrt();
            let ny: f64 = (0..c).map(|b| px(y, i, j, b).powi(2)).sum::<f64>().sqrt();
            if nx > 0.0 && ny > 0.0 {
                total += (dot / nx / ny).clamp(-1.0, 1.0).acos() * 180.0 / std::f64::consts::PI;
            }
        }
    }
    total / (h * w) as f64
}

pub fn ergas_oracle(x: &Tensor<f64>, y: &Tensor<f64>, ratio: usize) -> f64 {
    let (h, w, c) = dims(x);
    let n = (h * w) as f64;
    let mut acc = 0.0;
    for b in 0..c {
        let mut mse = 0.0;
        let mut mean = 0.0;
        for i in 0..h {
            for j in 0..w {
                mse += (px(x, i, j, b) - px(y, i, j, b)).powi(2) / n;
                mean += px(y, i, j, b) / n;
            }
        }
        acc += mse.sqrt().powi(2) / mean.powi(2);
    }
    100.0 / ratio as f64 * (acc / c as f64).sqrt()
}

pub fn psnr_oracle(x: &Tensor<f64>, y: &Tensor<f64>, peak: f64) -> f64 {
    let (h, w, c) = dims(x);
    let mut mse = 0.0;
    for i in 0..h {
        for j in 0..w {
            for b in 0..c {
                mse += (px(x, i, j, b) - px(y, i, j, b)).powi(2);
            }
        }
    }
    mse /= (h * w * c) as f64;
    10.0 * (peak * peak / mse).log10()
}

/// Direct 2-D Gaussian-weighted SSIM over every valid 11x11 window.
pub fn ssim_oracle(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let (h, w, c) = dims(x);
    let n = 11;
    let mut g = vec![vec![0.0; n]; n];
    let mut total_w = 0.0;
    for (a, row) in g.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let (da, db) = (a as f64 - 5.0, b as f64 - 5.0);
            *v = (-(da * da + db * db) / (2.0 * 1.5 * 1.5)).exp();
            total_w += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..c {
        for i in 0..=h - n {
            for j in 0..=w - n {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..n {
                    for d in 0..n {
                        let wt = g[a][d] / total_w;
                        mx += wt * px(x, i + a, j + d, b);
                        my += wt * px(y, i + a, j + d, b);
                    }
                }
                for a in 0..n {
                    for d in 0..n {
                        let wt = g[a][d] / total_w;
                        let (dx, dy) = (px(x, i + a, j + d, b) - mx, px(y, i + a, j + d, b) - my);
                        sxx += wt * dx * dx;
                        syy += wt * dy * dy;
                        sxy += wt * dx * dy;
                    }
                }
                total += (2.0 * mx * my + c1) * (2.0 * sxy + c2) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

/// Window statistics with two-pass (centered) moments.
fn q_window(x: &Tensor<f64>, bx: usize, y: &Tensor<f64>, by: usize, i: usize, j: usize, n: usize) -> Option<f64> {
    let cnt = (n * n) as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for a in 0..n {
        for d in 0..n {
            mx += px(x, i + a, j + d, bx);
            my += px(y, i + a, j + d, by);
        }
    }
    mx /= cnt;
    my /= cnt;
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for a in 0..n {
        for d in 0..n {
            let (dx, dy) = (px(x, i + a, j + d, bx) - mx, px(y, i + a, j + d, by) - my);
            vx += dx * dx;
            vy += dy * dy;
            cxy += dx * dy;
        }
    }
    let (vx, vy, cxy) = (vx / cnt, vy / cnt, cxy / cnt);
    let den = (vx + vy) * (mx * mx + my * my);
    (den != 0.0).then(|| 4.0 * cxy * mx * my / den)
}

/// Mean Q over all sliding windows, for band `bx` of `x` against band `by`
/// of `y`.
pub fn q_band_oracle(x: &Tensor<f64>, bx: usize, y: &Tensor<f64>, by: usize, n: usize) -> f64 {
    let (h, w, _) = dims(x);
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..=h - n {
        for j in 0..=w - n {
            if let Some(q) = q_window(x, bx, y, by, i, j, n) {
                total += q;
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn q_oracle(x: &Tensor<f64>, y: &Tensor<f64>, n: usize) -> f64 {
    q_band_oracle(x, 0, y, 0, n)
}

/// Hamilton quaternion product, components `[1, i, j, k]`.
pub fn hamilton(p: [f64; 4], q: [f64; 4]) -> [f64; 4] {
    let [a1, b1, c1, d1] = p;
    let [a2, b2, c2, d2] = q;
    [
        a1 * a2 - b1 * b2 - c1 * c2 - d1 * d2,
        a1 * b2 + b1 * a2 + c1 * d2 - d1 * c2,
        a1 * c2 - b1 * d2 + c1 * a2 + d1 * b2,
        a1 * d2 + b1 * c2 - c1 * b2 + d1 * a2,
    ]
}

fn q2n_from(cov: &[f64], mx: &[f64], my: &[f64], ex2: f64, ey2: f64) -> Option<f64> {
    let mx2: f64 = mx.iter().map(|v| v * v).sum();
    let my2: f64 = my.iter().map(|v| v * v).sum();
    let den = (ex2 - mx2 + ey2 - my2) * (mx2 + my2);
    if den == 0.0 {
        return None;
    }
    let modulus = cov.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = mx.iter().zip(my).map(|(a, b)| a * b).sum();
    let sign = if cov[0] * dot < 0.0 { -1.0 } else { 1.0 };
    Some(sign * 4.0 * modulus * mx2.sqrt() * my2.sqrt() / den)
}

/// Q2n for 1, 2 (complex numbers) or 3–4 bands (quaternions, zero padded).
pub fn q2n_oracle(x: &Tensor<f64>, y: &Tensor<f64>, n: usize) -> f64 {
    let (h, w, c) = dims(x);
    assert!(c <= 4, "oracle supports up to four bands");
    let cnt = (n * n) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for i in 0..=h - n {
        for j in 0..=w - n {
            let mut ex2 = 0.0;
            let mut ey2 = 0.0;
            let q = match c {
                1 => q_window(x, 0, y, 0, i, j, n),
                2 => {
                    let (mut mz, mut my, mut mp) = (Complex64::default(), Complex64::default(), Complex64::default());
                    for a in 0..n {
                        for d in 0..n {
                            let z = Complex64::new(px(x, i + a, j + d, 0), px(x, i + a, j + d, 1));
                            let v = Complex64::new(px(y, i + a, j + d, 0), px(y, i + a, j + d, 1));
                            mz += z / cnt;
                            my += v / cnt;
                            mp += z * v.conj() / cnt;
                            ex2 += z.norm_sqr() / cnt;
                            ey2 += v.norm_sqr() / cnt;
                        }
                    }
                    let cov = mp - mz * my.conj();
                    q2n_from(&[cov.re, cov.im], &[mz.re, mz.im], &[my.re, my.im], ex2, ey2)
                }
                _ => {
                    let quat = |t: &Tensor<f64>, a: usize, d: usize| -> [f64; 4] {
                        std::array::from_fn(|b| if b < c { px(t, i + a, j + d, b) } else { 0.0 })
                    };
                    let conj = |q: [f64; 4]| [q[0], -q[1], -q[2], -q[3]];
                    let (mut mz, mut my, mut mp) = ([0.0; 4], [0.0; 4], [0.0; 4]);
                    for a in 0..n {
                        for d in 0..n {
                            let (z, v) = (quat(x, a, d), quat(y, a, d));
                            let prod = hamilton(z, conj(v));
                            for b in 0..4 {
                                mz[b] += z[b] / cnt;
                                my[b] += v[b] / cnt;
                                mp[b] += prod[b] / cnt;
                            }
                            ex2 += z.iter().map(|v| v * v).sum::<f64>() / cnt;
                            ey2 += v.iter().map(|v| v * v).sum::<f64>() / cnt;
                        }
                    }
                    let mm = hamilton(mz, conj(my));
                    let cov: Vec<f64> = (0..4).map(|b| mp[b] - mm[b]).collect();
                    q2n_from(&cov, &mz, &my, ex2, ey2)
                }
            };
            if let Some(q) = q {
                total += q;
                count += 1;
            }
        }
    }
    total / count as f64
}

pub fn d_lambda_oracle(fused: &Tensor<f64>, ms: &Tensor<f64>, window: usize) -> f64 {
    let c = dims(fused).2;
    let low = window / (dims(fused).0 / dims(ms).0);
    let mut acc = 0.0;
    let mut pairs = 0;
    for i in 0..c {
        for j in 0..c {
            if i != j {
                acc += (q_band_oracle(fused, i, fused, j, window) - q_band_oracle(ms, i, ms, j, low)).abs();
                pairs += 1;
            }
        }
    }
    acc / pairs as f64
}

pub fn d_s_oracle(
    fused: &Tensor<f64>,
    ms: &Tensor<f64>,
    pan: &Tensor<f64>,
    pan_low: &Tensor<f64>,
    window: usize,
) -> f64 {
    let c = dims(fused).2;
    let low = window / (dims(fused).0 / dims(ms).0);
    (0..c).map(|b| (q_band_oracle(fused, b, pan, 0, window) - q_band_oracle(ms, b, pan_low, 0, low)).abs()).sum::<f64>()
        / c as f64
}

fn related_pair(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> (Tensor<f64>, Tensor<f64>) {
    let y = uniform(r, &[h, w, c], 0.05, 1.0);
    let noise = uniform(r, &[h, w, c], -0.2, 0.2);
    let gain = r.gen_range(0.5..1.2);
    let x = Tensor::from_fn(&[h, w, c], |i| (gain * y.data()[i] + noise.data()[i]).clamp(0.0, 1.0));
    (x, y)
}

fn bands(t: &Tensor<f64>, n: usize) -> Tensor<f64> {
    let planes: Vec<_> = (0..n).map(|b| t.channel(b).unwrap()).collect();
    Tensor::stack_channels(&planes).unwrap()
}

/// Worst normalized difference `|lib - oracle| / max(1, |oracle|)` of every
/// metric over `trials` random inputs.
pub fn metric_oracle_errors(trials: usize, seed: u64) -> Vec<(&'static str, f64)> {
    use lformer::metrics as m;
    let mut r = rng(seed);
    let mut worst: Vec<(&'static str, f64)> =
        ["SAM", "ERGAS", "PSNR", "SSIM", "q_index", "q2n(c=1)", "q2n(c=2)", "q2n(c=4)", "D_lambda", "D_s", "HQNR"]
            .iter()
            .map(|&n| (n, 0.0))
            .collect();
    let mut note = |name: &str, lib: f64, oracle: f64| {
        let e = (lib - oracle).abs() / oracle.abs().max(1.0);
        let slot = worst.iter_mut().find(|(n, _)| *n == name).unwrap();
        slot.1 = if e.is_nan() { f64::INFINITY } else { slot.1.max(e) };
    };
    for _ in 0..trials {
        let (h, w) = (r.gen_range(12..=24), r.gen_range(12..=24));
        let (x, y) = related_pair(&mut r, h, w, 4);
        let c = r.gen_range(1..=4);
        let (xc, yc) = (bands(&x, c), bands(&y, c));
        let ratio = [2, 4][r.gen_range(0..2)];
        note("SAM", m::sam(&xc, &yc).unwrap(), sam_oracle(&xc, &yc));
        note("ERGAS", m::ergas(&xc, &yc, ratio).unwrap(), ergas_oracle(&xc, &yc, ratio));
        note("PSNR", m::psnr(&xc, &yc, 1.0).unwrap(), psnr_oracle(&xc, &yc, 1.0));
        note("SSIM", m::ssim(&xc, &yc).unwrap(), ssim_oracle(&xc, &yc));

        let win = r.gen_range(2..=h.min(w));
        let (x1, y1) = (bands(&x, 1), bands(&y, 1));
        note("q_index", m::q_index(&x1, &y1, win).unwrap(), q_oracle(&x1, &y1, win));
        for (name, n) in [("q2n(c=1)", 1), ("q2n(c=2)", 2), ("q2n(c=4)", 4)] {
            let (xn, yn) = (bands(&x, n), bands(&y, n));
            note(name, m::q2n(&xn, &yn, win).unwrap(), q2n_oracle(&xn, &yn, win));
        }

        // no-reference indices on a consistent (fused, MS, PAN) triple
        let size = 32;
        let ratio = [2, 4][r.gen_range(0..2)];
        let window = [8, 16][r.gen_range(0..2)];
        let (fused, _) = related_pair(&mut r, size, size, 4);
        let ms = uniform(&mut r, &[size / ratio, size / ratio, 4], 0.05, 1.0);
        let pan = lformer::data::pan_from_gt(&fused, &[0.4, 0.3, 0.2, 0.1]).unwrap();
        let pan = Tensor::from_fn(pan.shape(), |i| pan.data()[i] + r.gen_range(-0.05..0.05));
        let pan_low = lformer::data::degrade_ms(&pan, ratio).unwrap();
        let dl = m::d_lambda(&fused, &ms, window).unwrap();
        let ds = m::d_s(&fused, &ms, &pan, &pan_low, window).unwrap();
        let (dlo, dso) = (d_lambda_oracle(&fused, &ms, window), d_s_oracle(&fused, &ms, &pan, &pan_low, window));
        note("D_lambda", dl, dlo);
        note("D_s", ds, dso);
        note("HQNR", m::hqnr(dl, ds), (1.0 - dlo) * (1.0 - dso));
    }
    worst
}
