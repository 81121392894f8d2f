//! Training losses and reduced/full-resolution quality indices.
//!
//! Images are `H x W x C` tensors with values nominally in `[0, 1]`. All
//! statistics are accumulated in `f64` regardless of the tensor dtype.
//! Sliding-window indices use stride 1 and skip incomplete border windows.

use std::fmt::Write as _;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_RANGE: f64 = 1.0;
pub const Q_WINDOW: usize = 32;

fn check_same(op: &'static str, x: &[usize], y: &[usize]) -> Result<()> {
    if x != y {
        return Err(Error::shape(op, x, y));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_same("l1_loss", x.shape(), y.shape())?;
    let s: f64 = x.data().iter().zip(y.data()).map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs()).sum();
    Ok(s / x.numel() as f64)
}

pub fn l1_loss_var<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    let d = tape.sub(x, y)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Normalized `size x size` Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Tensor<f64> {
    let g = gaussian_1d(size, sigma);
    Tensor::from_fn(&[size, size], |i| g[i / size] * g[i % size])
}

fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn ssim_constants() -> (f64, f64) {
    ((SSIM_K1 * SSIM_RANGE).powi(2), (SSIM_K2 * SSIM_RANGE).powi(2))
}

fn check_ssim_size(metric: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    let (h, w, c) = match *shape {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::invalid(metric, format!("H x W x C input required, got {shape:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::WindowTooLarge { metric, size: (h, w), window: SSIM_WINDOW });
    }
    Ok((h, w, c))
}

/// Mean SSIM over bands (11x11 Gaussian window, sigma 1.5, valid region).
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_same("ssim", x.shape(), y.shape())?;
    let (h, w, c) = check_ssim_size("ssim", x.shape())?;
    let g = gaussian_1d(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = ssim_constants();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let xs: Vec<f64> = (0..h * w).map(|p| x.data()[p * c + ch].to_f64_lossy()).collect();
        let ys: Vec<f64> = (0..h * w).map(|p| y.data()[p * c + ch].to_f64_lossy()).collect();
        let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = blur_separable(&xs, h, w, &g);
        let my = blur_separable(&ys, h, w, &g);
        let mxx = blur_separable(&prod(&xs, &xs), h, w, &g);
        let myy = blur_separable(&prod(&ys, &ys), h, w, &g);
        let mxy = blur_separable(&prod(&xs, &ys), h, w, &g);
        for i in 0..oh * ow {
            let (ux, uy) = (mx[i], my[i]);
            let sxx = mxx[i] - ux * ux;
            let syy = myy[i] - uy * uy;
            let sxy = mxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sxx + syy + c2));
        }
    }
    Ok(total / (oh * ow * c) as f64)
}

/// Valid-region separable correlation of an `h x w` plane.
fn blur_separable(src: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let ow = w - k + 1;
    let oh = h - k + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|j| g[j] * src[y * w + x + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Differentiable mean SSIM, same definition as [`ssim`].
pub fn ssim_var<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var) -> Result<Var> {
    check_same("ssim", tape.shape(x), tape.shape(y))?;
    check_ssim_size("ssim", tape.shape(x))?;
    let window: Tensor<T> = gaussian_window(SSIM_WINDOW, SSIM_SIGMA).cast();
    let (c1, c2) = ssim_constants();
    let (c1, c2) = (T::from_f64_lossy(c1), T::from_f64_lossy(c2));
    let two = T::from_f64_lossy(2.0);

    let mx = tape.filter_valid(x, &window)?;
    let my = tape.filter_valid(y, &window)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let mxx = tape.filter_valid(xx, &window)?;
    let myy = tape.filter_valid(yy, &window)?;
    let mxy = tape.filter_valid(xy, &window)?;

    let mx2 = tape.mul(mx, mx)?;
    let my2 = tape.mul(my, my)?;
    let mxmy = tape.mul(mx, my)?;
    let sxx = tape.sub(mxx, mx2)?;
    let syy = tape.sub(myy, my2)?;
    let sxy = tape.sub(mxy, mxmy)?;

    let l_num = tape.scale(mxmy, two)?;
    let l_num = tape.add_scalar(l_num, c1)?;
    let c_num = tape.scale(sxy, two)?;
    let c_num = tape.add_scalar(c_num, c2)?;
    let l_den = tape.add(mx2, my2)?;
    let l_den = tape.add_scalar(l_den, c1)?;
    let c_den = tape.add(sxx, syy)?;
    let c_den = tape.add_scalar(c_den, c2)?;
    let num = tape.mul(l_num, c_num)?;
    let den = tape.mul(l_den, c_den)?;
    let map = tape.div(num, den)?;
    tape.mean(map)
}

/// `L1(x, y) + alpha * (1 - SSIM(x, y))` on the tape.
pub fn fusion_loss_var<T: Scalar>(tape: &mut Tape<T>, x: Var, y: Var, alpha: f64) -> Result<Var> {
    let l1 = l1_loss_var(tape, x, y)?;
    if alpha == 0.0 {
        return Ok(l1);
    }
    let s = ssim_var(tape, x, y)?;
    let s = tape.scale(s, T::from_f64_lossy(-alpha))?;
    let s = tape.add_scalar(s, T::from_f64_lossy(alpha))?;
    tape.add(l1, s)
}

/// `L1(x, y) + alpha * (1 - SSIM(x, y))` computed directly.
pub fn fusion_loss<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, alpha: f64) -> Result<f64> {
    let l1 = l1_loss(x, y)?;
    if alpha == 0.0 {
        return Ok(l1);
    }
    Ok(l1 + alpha * (1.0 - ssim(x, y)?))
}

/// Mean spectral angle in degrees. Pixels where either spectrum is the zero
/// vector contribute an angle of 0.
pub fn sam<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_same("sam", x.shape(), y.shape())?;
    let (h, w, c) = x.hwc()?;
    let mut total = 0.0;
    for (px, py) in x.data().chunks(c).zip(y.data().chunks(c)) {
        let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
        for (&a, &b) in px.iter().zip(py) {
            let (a, b) = (a.to_f64_lossy(), b.to_f64_lossy());
            dot += a * b;
            nx += a * a;
            ny += b * b;
        }
        if nx > 0.0 && ny > 0.0 {
            total += (dot / (nx * ny).sqrt()).clamp(-1.0, 1.0).acos();
        }
    }
    Ok((total / (h * w) as f64).to_degrees())
}

/// ERGAS with `y` as the reference image.
pub fn ergas<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, ratio: usize) -> Result<f64> {
    check_same("ergas", x.shape(), y.shape())?;
    if ratio == 0 {
        return Err(Error::invalid("ergas", "ratio must be positive"));
    }
    let (h, w, c) = x.hwc()?;
    let n = (h * w) as f64;
    let mut acc = 0.0;
    for b in 0..c {
        let (mut se, mut mean) = (0.0, 0.0);
        for p in 0..h * w {
            let (xv, yv) = (x.data()[p * c + b].to_f64_lossy(), y.data()[p * c + b].to_f64_lossy());
            se += (xv - yv).powi(2);
            mean += yv;
        }
        mean /= n;
        if mean == 0.0 {
            return Err(Error::Degenerate { metric: "ergas", msg: format!("reference band {b} has zero mean") });
        }
        acc += (se / n) / (mean * mean);
    }
    Ok(100.0 / ratio as f64 * (acc / c as f64).sqrt())
}

/// `10 log10(peak^2 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    check_same("psnr", x.shape(), y.shape())?;
    let mse: f64 =
        x.data().iter().zip(y.data()).map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2)).sum::<f64>()
            / x.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Summed-area table with a zero border: `(h + 1) x (w + 1)`.
struct Integral {
    w1: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(plane: &[f64], h: usize, w: usize) -> Self {
        let w1 = w + 1;
        let mut sums = vec![0.0; (h + 1) * w1];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += plane[y * w + x];
                sums[(y + 1) * w1 + x + 1] = sums[y * w1 + x + 1] + row;
            }
        }
        Integral { w1, sums }
    }

    fn window(&self, y: usize, x: usize, n: usize) -> f64 {
        let s = &self.sums;
        let w1 = self.w1;
        s[(y + n) * w1 + x + n] - s[y * w1 + x + n] - s[(y + n) * w1 + x] + s[y * w1 + x]
    }
}

fn plane_of<T: Scalar>(t: &Tensor<T>, metric: &'static str) -> Result<(usize, usize, Vec<f64>)> {
    let (h, w) = match *t.shape() {
        [h, w] | [h, w, 1] => (h, w),
        _ => return Err(Error::invalid(metric, format!("single-band image required, got {:?}", t.shape()))),
    };
    Ok((h, w, t.data().iter().map(|v| v.to_f64_lossy()).collect()))
}

fn check_window(metric: &'static str, h: usize, w: usize, window: usize) -> Result<()> {
    if window == 0 || window > h || window > w {
        return Err(Error::WindowTooLarge { metric, size: (h, w), window });
    }
    Ok(())
}

/// Universal image quality index averaged over all `window x window`
/// positions; windows with a zero denominator are skipped.
pub fn q_index<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, window: usize) -> Result<f64> {
    check_same("q_index", x.shape(), y.shape())?;
    let (h, w, xs) = plane_of(x, "q_index")?;
    let (_, _, ys) = plane_of(y, "q_index")?;
    check_window("q_index", h, w, window)?;
    q_index_planes(&xs, &ys, h, w, window)
}

fn q_index_planes(xs: &[f64], ys: &[f64], h: usize, w: usize, window: usize) -> Result<f64> {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
    let ix = Integral::new(xs, h, w);
    let iy = Integral::new(ys, h, w);
    let ixx = Integral::new(&sq(xs, xs), h, w);
    let iyy = Integral::new(&sq(ys, ys), h, w);
    let ixy = Integral::new(&sq(xs, ys), h, w);
    let n = (window * window) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for y in 0..=h - window {
        for x in 0..=w - window {
            let mx = ix.window(y, x, window) / n;
            let my = iy.window(y, x, window) / n;
            let vx = ixx.window(y, x, window) / n - mx * mx;
            let vy = iyy.window(y, x, window) / n - my * my;
            let cxy = ixy.window(y, x, window) / n - mx * my;
            let den = (vx + vy) * (mx * mx + my * my);
            if den == 0.0 {
                continue;
            }
            total += 4.0 * cxy * mx * my / den;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate { metric: "q_index", msg: "every window has a zero denominator".into() });
    }
    Ok(total / count as f64)
}

/// Cayley–Dickson product of two hypercomplex numbers of equal power-of-two
/// dimension: `(a, b)(c, d) = (ac - d* b, d a + b c*)`.
pub fn cayley_dickson_mul(x: &[f64], y: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), y.len());
    let n = x.len();
    if n == 1 {
        return vec![x[0] * y[0]];
    }
    let h = n / 2;
    let (a, b) = x.split_at(h);
    let (c, d) = y.split_at(h);
    let dc = cayley_dickson_conj(d);
    let cc = cayley_dickson_conj(c);
    let ac = cayley_dickson_mul(a, c);
    let db = cayley_dickson_mul(&dc, b);
    let da = cayley_dickson_mul(d, a);
    let bc = cayley_dickson_mul(b, &cc);
    let mut out = Vec::with_capacity(n);
    out.extend(ac.iter().zip(&db).map(|(p, q)| p - q));
    out.extend(da.iter().zip(&bc).map(|(p, q)| p + q));
    out
}

/// Hypercomplex conjugate: real part kept, all imaginary parts negated.
pub fn cayley_dickson_conj(x: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = x.iter().map(|v| -v).collect();
    out[0] = x[0];
    out
}

/// Hypercomplex quality index Q2n.
///
/// Bands are zero-padded to the next power of two and every pixel is read as
/// a hypercomplex number `z`. Per window, with `cov = E[z ŷ*] - E[z] E[ŷ]*`,
///
/// `q = 4 |cov| |E[z]| |E[ŷ]| / ((var_z + var_ŷ)(|E[z]|^2 + |E[ŷ]|^2))`,
///
/// signed by `sign(Re(cov) * <E[z], E[ŷ]>)` so that one band reduces exactly
/// to [`q_index`]. Degenerate windows are skipped; the result is the mean
/// over windows.
pub fn q2n<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, window: usize) -> Result<f64> {
    check_same("q2n", x.shape(), y.shape())?;
    let (h, w, c) = x.hwc()?;
    check_window("q2n", h, w, window)?;
    let dim = c.next_power_of_two();
    let px = h * w;
    let comp = |t: &Tensor<T>, b: usize| -> Vec<f64> {
        if b < c {
            (0..px).map(|p| t.data()[p * c + b].to_f64_lossy()).collect()
        } else {
            vec![0.0; px]
        }
    };
    let xs: Vec<Vec<f64>> = (0..dim).map(|b| comp(x, b)).collect();
    let ys: Vec<Vec<f64>> = (0..dim).map(|b| comp(y, b)).collect();

    // per-pixel z * conj(y), |z|^2, |y|^2
    let mut prod = vec![vec![0.0; px]; dim];
    let mut nx = vec![0.0; px];
    let mut ny = vec![0.0; px];
    let mut zx = vec![0.0; dim];
    let mut zy = vec![0.0; dim];
    for p in 0..px {
        for b in 0..dim {
            zx[b] = xs[b][p];
            zy[b] = ys[b][p];
        }
        let m = cayley_dickson_mul(&zx, &cayley_dickson_conj(&zy));
        for b in 0..dim {
            prod[b][p] = m[b];
        }
        nx[p] = zx.iter().map(|v| v * v).sum();
        ny[p] = zy.iter().map(|v| v * v).sum();
    }
    let ix: Vec<Integral> = xs.iter().map(|p| Integral::new(p, h, w)).collect();
    let iy: Vec<Integral> = ys.iter().map(|p| Integral::new(p, h, w)).collect();
    let ip: Vec<Integral> = prod.iter().map(|p| Integral::new(p, h, w)).collect();
    let inx = Integral::new(&nx, h, w);
    let iny = Integral::new(&ny, h, w);

    let n = (window * window) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    let mut mx = vec![0.0; dim];
    let mut my = vec![0.0; dim];
    for wy in 0..=h - window {
        for wx in 0..=w - window {
            for b in 0..dim {
                mx[b] = ix[b].window(wy, wx, window) / n;
                my[b] = iy[b].window(wy, wx, window) / n;
            }
            let mean_prod = cayley_dickson_mul(&mx, &cayley_dickson_conj(&my));
            let cov: Vec<f64> = (0..dim).map(|b| ip[b].window(wy, wx, window) / n - mean_prod[b]).collect();
            let mx2: f64 = mx.iter().map(|v| v * v).sum();
            let my2: f64 = my.iter().map(|v| v * v).sum();
            let vx = inx.window(wy, wx, window) / n - mx2;
            let vy = iny.window(wy, wx, window) / n - my2;
            let den = (vx + vy) * (mx2 + my2);
            if den == 0.0 {
                continue;
            }
            let cov_mod = cov.iter().map(|v| v * v).sum::<f64>().sqrt();
            let mean_dot: f64 = mx.iter().zip(&my).map(|(a, b)| a * b).sum();
            let sign = if cov[0] * mean_dot < 0.0 { -1.0 } else { 1.0 };
            total += sign * 4.0 * cov_mod * mx2.sqrt() * my2.sqrt() / den;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Degenerate { metric: "q2n", msg: "every window has a zero denominator".into() });
    }
    Ok(total / count as f64)
}

fn band_planes<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize, Vec<Vec<f64>>)> {
    let (h, w, c) = t.hwc()?;
    let planes = (0..c).map(|b| (0..h * w).map(|p| t.data()[p * c + b].to_f64_lossy()).collect()).collect();
    Ok((h, w, planes))
}

/// Window used on the low-resolution side of the no-reference indices:
/// `window / ratio`, where `ratio` is the integer scale between the images.
fn low_res_window(metric: &'static str, high: usize, low: usize, window: usize) -> Result<usize> {
    if low == 0 || !high.is_multiple_of(low) {
        return Err(Error::invalid(metric, format!("size {high} is not an integer multiple of {low}")));
    }
    let lw = window / (high / low);
    if lw == 0 {
        return Err(Error::invalid(metric, format!("window {window} too small for ratio {}", high / low)));
    }
    Ok(lw)
}

/// Spectral distortion: mean over ordered band pairs of
/// `|Q(F_i, F_j) - Q(M_i, M_j)|`.
pub fn d_lambda<T: Scalar>(fused: &Tensor<T>, ms_lowres: &Tensor<T>, window: usize) -> Result<f64> {
    let (fh, fw, fp) = band_planes(fused)?;
    let (mh, mw, mp) = band_planes(ms_lowres)?;
    let c = fp.len();
    if c != mp.len() {
        return Err(Error::shape("d_lambda", fused.shape(), ms_lowres.shape()));
    }
    if c < 2 {
        return Err(Error::invalid("d_lambda", "at least two bands required"));
    }
    check_window("d_lambda", fh, fw, window)?;
    let lw = low_res_window("d_lambda", fh, mh, window)?;
    check_window("d_lambda", mh, mw, lw)?;
    let mut acc = 0.0;
    for i in 0..c {
        for j in i + 1..c {
            let qf = q_index_planes(&fp[i], &fp[j], fh, fw, window)?;
            let qm = q_index_planes(&mp[i], &mp[j], mh, mw, lw)?;
            acc += 2.0 * (qf - qm).abs();
        }
    }
    Ok(acc / (c * (c - 1)) as f64)
}

/// Spatial distortion: mean over bands of `|Q(F_i, P) - Q(M_i, P_low)|`.
pub fn d_s<T: Scalar>(
    fused: &Tensor<T>,
    ms_lowres: &Tensor<T>,
    pan: &Tensor<T>,
    pan_degraded: &Tensor<T>,
    window: usize,
) -> Result<f64> {
    let (fh, fw, fp) = band_planes(fused)?;
    let (mh, mw, mp) = band_planes(ms_lowres)?;
    let (ph, pw, pp) = plane_of(pan, "d_s")?;
    let (lh, lw_, lp) = plane_of(pan_degraded, "d_s")?;
    if fp.len() != mp.len() || (ph, pw) != (fh, fw) || (lh, lw_) != (mh, mw) {
        return Err(Error::shape("d_s", fused.shape(), ms_lowres.shape()));
    }
    check_window("d_s", fh, fw, window)?;
    let lw = low_res_window("d_s", fh, mh, window)?;
    check_window("d_s", mh, mw, lw)?;
    let mut acc = 0.0;
    for i in 0..fp.len() {
        let qh = q_index_planes(&fp[i], &pp, fh, fw, window)?;
        let ql = q_index_planes(&mp[i], &lp, mh, mw, lw)?;
        acc += (qh - ql).abs();
    }
    Ok(acc / fp.len() as f64)
}

pub fn hqnr(d_lambda: f64, d_s: f64) -> f64 {
    (1.0 - d_lambda) * (1.0 - d_s)
}

// ── reporting ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Sam,
    Ergas,
    Psnr,
    Ssim,
    Q2n,
    DLambda,
    DS,
    Hqnr,
}

impl Metric {
    pub const ALL: [Metric; 8] = [
        Metric::Sam,
        Metric::Ergas,
        Metric::Psnr,
        Metric::Ssim,
        Metric::Q2n,
        Metric::DLambda,
        Metric::DS,
        Metric::Hqnr,
    ];
    pub const REDUCED: [Metric; 5] = [Metric::Sam, Metric::Ergas, Metric::Q2n, Metric::Psnr, Metric::Ssim];
    pub const FULL: [Metric; 3] = [Metric::DLambda, Metric::DS, Metric::Hqnr];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Sam => "SAM",
            Metric::Ergas => "ERGAS",
            Metric::Psnr => "PSNR",
            Metric::Ssim => "SSIM",
            Metric::Q2n => "Q2n",
            Metric::DLambda => "D_lambda",
            Metric::DS => "D_s",
            Metric::Hqnr => "HQNR",
        }
    }
}

/// Per-image metric values.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub values: Vec<(Metric, f64)>,
}

impl MetricRow {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.values.iter().find(|(k, _)| *k == m).map(|&(_, v)| v)
    }
}

/// Reduced-resolution metrics of `fused` against `gt`.
pub fn reduced_metrics<T: Scalar>(
    id: &str,
    fused: &Tensor<T>,
    gt: &Tensor<T>,
    ratio: usize,
    q_window: usize,
) -> Result<MetricRow> {
    let (h, w, _) = gt.hwc()?;
    let qw = q_window.min(h).min(w);
    Ok(MetricRow {
        id: id.to_string(),
        values: vec![
            (Metric::Sam, sam(fused, gt)?),
            (Metric::Ergas, ergas(fused, gt, ratio)?),
            (Metric::Q2n, q2n(fused, gt, qw)?),
            (Metric::Psnr, psnr(fused, gt, 1.0)?),
            (Metric::Ssim, ssim(fused, gt)?),
        ],
    })
}

/// Full-resolution (no reference) metrics.
pub fn full_metrics<T: Scalar>(
    id: &str,
    fused: &Tensor<T>,
    ms_lowres: &Tensor<T>,
    pan: &Tensor<T>,
    pan_degraded: &Tensor<T>,
    q_window: usize,
) -> Result<MetricRow> {
    let dl = d_lambda(fused, ms_lowres, q_window)?;
    let ds = d_s(fused, ms_lowres, pan, pan_degraded, q_window)?;
    Ok(MetricRow {
        id: id.to_string(),
        values: vec![(Metric::DLambda, dl), (Metric::DS, ds), (Metric::Hqnr, hqnr(dl, ds))],
    })
}

/// Rows for one split plus mean and standard deviation aggregates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn metrics(&self) -> Vec<Metric> {
        Metric::ALL.into_iter().filter(|m| self.rows.iter().any(|r| r.get(*m).is_some())).collect()
    }

    /// Mean and population standard deviation of one column. A column whose
    /// values are all identical (including infinities) has zero spread.
    pub fn aggregate(&self, m: Metric) -> (f64, f64) {
        let vals: Vec<f64> = self.rows.iter().filter_map(|r| r.get(m)).collect();
        if vals.is_empty() {
            return (f64::NAN, f64::NAN);
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        if vals.iter().all(|&v| v == vals[0]) {
            return (vals[0], 0.0);
        }
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Header, one row per image, then `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let cols = self.metrics();
        let mut out = String::from("id");
        for m in &cols {
            write!(out, ",{}", m.name()).unwrap();
        }
        out.push('\n');
        let fmt = |v: Option<f64>| match v {
            Some(v) if v.is_infinite() && v > 0.0 => "inf".to_string(),
            Some(v) => format!("{v:.6}"),
            None => String::new(),
        };
        for r in &self.rows {
            out.push_str(&r.id);
            for m in &cols {
                write!(out, ",{}", fmt(r.get(*m))).unwrap();
            }
            out.push('\n');
        }
        let aggs: Vec<(f64, f64)> = cols.iter().map(|m| self.aggregate(*m)).collect();
        out.push_str("mean");
        for (mean, _) in &aggs {
            write!(out, ",{}", fmt(Some(*mean))).unwrap();
        }
        out.push_str("\nstd");
        for (_, std) in &aggs {
            write!(out, ",{}", fmt(Some(*std))).unwrap();
        }
        out.push('\n');
        out
    }
}
