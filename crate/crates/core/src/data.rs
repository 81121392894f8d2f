//! Synthetic scenes, Wald-protocol degradation, bicubic upsampling, the
//! `.lftk` tensor container and the on-disk dataset layout.
//!
//! Container layout (little-endian):
//!
//! | bytes        | field                          |
//! |--------------|--------------------------------|
//! | 4            | magic `LFTK`                   |
//! | 4            | version `u32` = 1              |
//! | 4            | dtype `u32` (0 = f32, 1 = f64) |
//! | 4            | ndim `u32`                     |
//! | 8 · ndim     | dims `u64`                     |
//! | numel · size | row-major payload              |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"LFTK";
pub const VERSION: u32 = 1;
pub const HEADER_FIXED: usize = 16;

// ── container ───────────────────────────────────────────────────────────

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_FIXED + 8 * t.rank() + t.numel() * T::DTYPE.size_of());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.code().to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Parsed container header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub dtype: DType,
    pub shape: Vec<usize>,
}

fn truncated(expected: usize, found: usize) -> Error {
    Error::Truncated { expected: expected as u64, found: found as u64 }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Validates the header and returns it with the payload offset.
pub fn decode_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 4 {
        return Err(truncated(HEADER_FIXED, bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes.len() < HEADER_FIXED {
        return Err(truncated(HEADER_FIXED, bytes.len()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = DType::from_code(u32_at(bytes, 8))?;
    let ndim = u32_at(bytes, 12) as usize;
    let dims_end = HEADER_FIXED + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(truncated(dims_end, bytes.len()));
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| u64::from_le_bytes(bytes[HEADER_FIXED + 8 * i..HEADER_FIXED + 8 * i + 8].try_into().unwrap()) as usize)
        .collect();
    Ok((Header { dtype, shape }, dims_end))
}

pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (header, offset) = decode_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::DTypeMismatch { expected: T::DTYPE.name(), found: header.dtype.name() });
    }
    let numel: usize = header.shape.iter().product();
    let size = T::DTYPE.size_of();
    let expected = offset + numel * size;
    if bytes.len() != expected {
        return Err(truncated(expected, bytes.len()));
    }
    let data = bytes[offset..].chunks_exact(size).map(T::read_le).collect();
    Tensor::new(&header.shape, data)
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

/// Loads a container of either dtype and converts it to `T`.
pub fn load_tensor_as<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match decode_header(&bytes)?.0.dtype {
        DType::F32 => Ok(decode_tensor::<f32>(&bytes)?.cast()),
        DType::F64 => Ok(decode_tensor::<f64>(&bytes)?.cast()),
    }
}

// ── scene simulation ────────────────────────────────────────────────────

/// Random smooth multispectral scene with values in `[0, 1]`.
///
/// The scene is a background level plus two linear ramps and a set of
/// rotated anisotropic Gaussian blobs. Each component draws one luminance
/// amplitude shared by all bands and a per-band spectral factor close to 1,
/// which keeps the bands strongly correlated as in real imagery.
pub fn gen_scene(seed: u64, h: usize, w: usize, c: usize) -> Result<Tensor<f64>> {
    if h < 16 || w < 16 || c == 0 {
        return Err(Error::invalid("gen_scene", format!("scene {h}x{w}x{c} too small (minimum 16x16x1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spectrum = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..c).map(|_| rng.gen_range(0.6..1.0)).collect() };
    let mut planes = vec![0.0f64; h * w * c];
    let (hf, wf) = (h as f64, w as f64);

    let base = rng.gen_range(0.15..0.35);
    let base_s = spectrum(&mut rng);
    for p in 0..h * w {
        for b in 0..c {
            planes[p * c + b] = base * base_s[b];
        }
    }

    for _ in 0..2 {
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = rng.gen_range(-0.2..0.2);
        let s = spectrum(&mut rng);
        let (dx, dy) = (theta.cos(), theta.sin());
        for y in 0..h {
            for x in 0..w {
                let t = (x as f64 / wf - 0.5) * dx + (y as f64 / hf - 0.5) * dy;
                for b in 0..c {
                    planes[(y * w + x) * c + b] += amp * t * s[b];
                }
            }
        }
    }

    let blobs = rng.gen_range(8..16);
    let max_sigma = hf.min(wf) / 4.0;
    for _ in 0..blobs {
        let (cy, cx) = (rng.gen_range(0.0..hf), rng.gen_range(0.0..wf));
        let sa = rng.gen_range(0.8..max_sigma);
        let sb = rng.gen_range(0.8..max_sigma);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let amp = rng.gen_range(-0.35..0.6);
        let s = spectrum(&mut rng);
        let (ct, st) = (theta.cos(), theta.sin());
        for y in 0..h {
            for x in 0..w {
                let (ry, rx) = (y as f64 - cy, x as f64 - cx);
                let u = ct * rx + st * ry;
                let v = -st * rx + ct * ry;
                let g = amp * (-0.5 * (u * u / (sa * sa) + v * v / (sb * sb))).exp();
                for b in 0..c {
                    planes[(y * w + x) * c + b] += g * s[b];
                }
            }
        }
    }
    for v in &mut planes {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(&[h, w, c], planes)
}

/// Pixelwise weighted band sum; weights must be a point of the simplex.
pub fn pan_from_gt<T: Scalar>(gt: &Tensor<T>, weights: &[f64]) -> Result<Tensor<T>> {
    let (h, w, c) = gt.hwc()?;
    if weights.len() != c {
        return Err(Error::shape("pan_from_gt", gt.shape(), &[weights.len()]));
    }
    if weights.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("pan_from_gt", "weights must be nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid("pan_from_gt", format!("weights sum to {total}, expected 1")));
    }
    let data = gt
        .data()
        .chunks(c)
        .map(|px| T::from_f64_lossy(px.iter().zip(weights).map(|(&v, &k)| v.to_f64_lossy() * k).sum()))
        .collect();
    Tensor::new(&[h, w, 1], data)
}

pub fn uniform_weights(c: usize) -> Vec<f64> {
    vec![1.0 / c as f64; c]
}

/// Separable Gaussian with `sigma = r / 2` and radius `2r`, normalized.
pub fn mtf_kernel(r: usize) -> Vec<f64> {
    let sigma = r as f64 / 2.0;
    let radius = 2 * r as isize;
    let raw: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Per-band Gaussian blur; taps falling outside the image are dropped and
/// the remaining weights renormalized.
pub fn gaussian_blur<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (h, w, c) = x.hwc()?;
    if r == 0 {
        return Err(Error::invalid("gaussian_blur", "ratio must be positive"));
    }
    let k = mtf_kernel(r);
    let radius = (k.len() / 2) as isize;
    let src: Vec<f64> = x.data().iter().map(|v| v.to_f64_lossy()).collect();
    let pass = |src: &[f64], along_x: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let (pos, len) = if along_x { (xx, w) } else { (y, h) };
                for b in 0..c {
                    let (mut acc, mut norm) = (0.0, 0.0);
                    for (t, &kv) in k.iter().enumerate() {
                        let q = pos as isize + t as isize - radius;
                        if q < 0 || q >= len as isize {
                            continue;
                        }
                        let q = q as usize;
                        let idx = if along_x { (y * w + q) * c + b } else { (q * w + xx) * c + b };
                        acc += kv * src[idx];
                        norm += kv;
                    }
                    out[(y * w + xx) * c + b] = acc / norm;
                }
            }
        }
        out
    };
    let blurred = pass(&pass(&src, true), false);
    Tensor::new(&[h, w, c], blurred.into_iter().map(T::from_f64_lossy).collect())
}

/// Blur then keep every `r`-th pixel starting at the top-left.
pub fn degrade_ms<T: Scalar>(gt: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (h, w, c) = gt.hwc()?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::invalid("degrade_ms", format!("{h}x{w} is not divisible by ratio {r}")));
    }
    let blurred = gaussian_blur(gt, r)?;
    let (oh, ow) = (h / r, w / r);
    let mut out = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            let at = ((y * r) * w + x * r) * c;
            out.extend_from_slice(&blurred.data()[at..at + c]);
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Separable bicubic upsampling by an integer factor. Output pixel `i`
/// samples source coordinate `i / r`, matching top-left decimation; taps
/// beyond the border are clamped to the edge.
pub fn upsample_bicubic<T: Scalar>(ms: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (h, w, c) = ms.hwc()?;
    if r == 0 {
        return Err(Error::invalid("upsample_bicubic", "ratio must be positive"));
    }
    if r == 1 {
        return Ok(ms.clone());
    }
    // taps[i] = four (source index, weight) pairs for output coordinate i
    let taps = |n: usize| -> Vec<[(usize, f64); 4]> {
        (0..n * r)
            .map(|i| {
                let s = i as f64 / r as f64;
                let base = s.floor() as isize;
                let frac = s - base as f64;
                std::array::from_fn(|t| {
                    let off = t as isize - 1;
                    let idx = (base + off).clamp(0, n as isize - 1) as usize;
                    (idx, cubic_weight(frac - off as f64))
                })
            })
            .collect()
    };
    let (ty, tx) = (taps(h), taps(w));
    let src: Vec<f64> = ms.data().iter().map(|v| v.to_f64_lossy()).collect();
    let (oh, ow) = (h * r, w * r);
    let mut rows = vec![0.0; h * ow * c];
    for y in 0..h {
        for (x, tap) in tx.iter().enumerate() {
            for b in 0..c {
                rows[(y * ow + x) * c + b] = tap.iter().map(|&(q, k)| k * src[(y * w + q) * c + b]).sum();
            }
        }
    }
    let mut out = Vec::with_capacity(oh * ow * c);
    for tap in &ty {
        for x in 0..ow {
            for b in 0..c {
                let v: f64 = tap.iter().map(|&(q, k)| k * rows[(q * ow + x) * c + b]).sum();
                out.push(T::from_f64_lossy(v));
            }
        }
    }
    Tensor::new(&[oh, ow, c], out)
}

// ── samples and datasets ────────────────────────────────────────────────

/// One training/evaluation sample. Full-resolution samples carry no GT.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub gt: Option<Tensor<T>>,
    pub pan: Tensor<T>,
    pub ms: Tensor<T>,
    pub ms_up: Tensor<T>,
}

impl<T: Scalar> Sample<T> {
    /// Reduced-resolution sample derived from a ground-truth scene.
    pub fn from_gt(id: impl Into<String>, gt: Tensor<T>, ratio: usize) -> Result<Self> {
        let (_, _, c) = gt.hwc()?;
        let pan = pan_from_gt(&gt, &uniform_weights(c))?;
        let ms = degrade_ms(&gt, ratio)?;
        let ms_up = upsample_bicubic(&ms, ratio)?;
        Ok(Sample { id: id.into(), gt: Some(gt), pan, ms, ms_up })
    }

    /// Full-resolution sample: the scene only provides PAN and the degraded
    /// MS; no reference is kept.
    pub fn full_from_scene(id: impl Into<String>, scene: Tensor<T>, ratio: usize) -> Result<Self> {
        let mut s = Self::from_gt(id, scene, ratio)?;
        s.gt = None;
        Ok(s)
    }

    pub fn ratio(&self) -> usize {
        self.pan.shape()[0] / self.ms.shape()[0]
    }

    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        Sample {
            id: self.id.clone(),
            gt: self.gt.as_ref().map(|t| t.cast()),
            pan: self.pan.cast(),
            ms: self.ms.cast(),
            ms_up: self.ms_up.cast(),
        }
    }
}

/// Per-sample seed, independent of generation order.
pub fn derive_seed(seed: u64, split: &str, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for b in split.bytes() {
        z = (z ^ b as u64).wrapping_mul(0x100_0000_01B3);
    }
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Full-resolution (no GT) test scenes at twice the reduced size.
    pub test_full: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub ratio: usize,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.ratio >= 1
            && self.bands >= 1
            && self.height >= 16
            && self.width >= 16
            && self.height.is_multiple_of(self.ratio)
            && self.width.is_multiple_of(self.ratio);
        if !ok {
            return Err(Error::invalid(
                "build_dataset",
                format!(
                    "size {}x{} with {} bands and ratio {} is invalid (need >= 16 and divisible by ratio)",
                    self.height, self.width, self.bands, self.ratio
                ),
            ));
        }
        Ok(())
    }
}

pub const SPLITS: [&str; 4] = ["train", "val", "test", "test_full"];

/// Contents of `manifest.txt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub ratio: usize,
    pub bands: usize,
    pub height: usize,
    pub width: usize,
    pub splits: BTreeMap<String, Vec<String>>,
}

impl DatasetManifest {
    pub fn ids(&self, split: &str) -> Result<&[String]> {
        self.splits
            .get(split)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Missing { what: "split", detail: split.to_string() })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "seed={}", self.seed).unwrap();
        writeln!(out, "ratio={}", self.ratio).unwrap();
        writeln!(out, "bands={}", self.bands).unwrap();
        writeln!(out, "height={}", self.height).unwrap();
        writeln!(out, "width={}", self.width).unwrap();
        for (name, ids) in &self.splits {
            writeln!(out, "split.{name}.count={}", ids.len()).unwrap();
            writeln!(out, "split.{name}.ids={}", ids.join(",")).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text, "manifest.txt")?;
        let get = |k: &str| -> Result<&str> {
            kv.get(k)
                .map(|s| s.as_str())
                .ok_or_else(|| Error::Parse { location: "manifest.txt".into(), msg: format!("missing key {k}") })
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?.parse().map_err(|_| Error::Parse {
                location: format!("manifest.txt:{k}"),
                msg: "expected an unsigned integer".into(),
            })
        };
        let mut splits = BTreeMap::new();
        for (k, v) in &kv {
            let Some(name) = k.strip_prefix("split.").and_then(|s| s.strip_suffix(".ids")) else {
                continue;
            };
            let ids: Vec<String> = v.split(',').filter(|s| !s.is_empty()).map(String::from).collect();
            if num(&format!("split.{name}.count"))? as usize != ids.len() {
                return Err(Error::Parse {
                    location: format!("manifest.txt:split.{name}"),
                    msg: "count does not match id list".into(),
                });
            }
            splits.insert(name.to_string(), ids);
        }
        Ok(DatasetManifest {
            seed: num("seed")?,
            ratio: num("ratio")? as usize,
            bands: num("bands")? as usize,
            height: num("height")? as usize,
            width: num("width")? as usize,
            splits,
        })
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let path = root.as_ref().join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped and
/// duplicate keys rejected.
pub fn parse_key_values(text: &str, source: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let location = format!("{source}:{}", n + 1);
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            location: location.clone(),
            msg: format!("expected key=value, got {line:?}"),
        })?;
        if map.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Parse { location, msg: format!("duplicate key {}", k.trim()) });
        }
    }
    Ok(map)
}

fn sample_dir(root: &Path, split: &str, id: &str) -> PathBuf {
    root.join(split).join(id)
}

pub fn save_sample<T: Scalar>(dir: impl AsRef<Path>, s: &Sample<T>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if let Some(gt) = &s.gt {
        save_tensor(dir.join("gt.lftk"), gt)?;
    }
    save_tensor(dir.join("pan.lftk"), &s.pan)?;
    save_tensor(dir.join("ms.lftk"), &s.ms)?;
    save_tensor(dir.join("ms_up.lftk"), &s.ms_up)
}

pub fn load_sample<T: Scalar>(root: impl AsRef<Path>, split: &str, id: &str) -> Result<Sample<T>> {
    let dir = sample_dir(root.as_ref(), split, id);
    if !dir.is_dir() {
        return Err(Error::Missing { what: "sample", detail: dir.display().to_string() });
    }
    let gt_path = dir.join("gt.lftk");
    let gt = if gt_path.exists() { Some(load_tensor_as(&gt_path)?) } else { None };
    Ok(Sample {
        id: id.to_string(),
        gt,
        pan: load_tensor_as(dir.join("pan.lftk"))?,
        ms: load_tensor_as(dir.join("ms.lftk"))?,
        ms_up: load_tensor_as(dir.join("ms_up.lftk"))?,
    })
}

pub fn load_split<T: Scalar>(root: impl AsRef<Path>, split: &str) -> Result<Vec<Sample<T>>> {
    let root = root.as_ref();
    let manifest = DatasetManifest::load(root)?;
    manifest.ids(split)?.iter().map(|id| load_sample(root, split, id)).collect()
}

/// Generates one sample of `split`; reduced splits are `H x W`, the
/// full-resolution split works on a `2H x 2W` scene.
pub fn make_sample(spec: &DatasetSpec, split: &str, index: usize) -> Result<Sample<f32>> {
    let seed = derive_seed(spec.seed, split, index);
    let id = format!("{split}_{index:04}");
    if split == "test_full" {
        let scene = gen_scene(seed, 2 * spec.height, 2 * spec.width, spec.bands)?;
        Ok(Sample::full_from_scene(id, scene, spec.ratio)?.cast())
    } else {
        let gt = gen_scene(seed, spec.height, spec.width, spec.bands)?;
        Ok(Sample::from_gt(id, gt, spec.ratio)?.cast())
    }
}

/// Generates every split in parallel and writes files plus `manifest.txt`.
/// Refuses to write into an existing non-empty directory.
pub fn build_dataset(root: impl AsRef<Path>, spec: &DatasetSpec) -> Result<DatasetManifest> {
    let root = root.as_ref();
    spec.validate()?;
    if root.exists() {
        let mut entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        if entries.next().is_some() {
            return Err(Error::OutputNotEmpty(root.to_path_buf()));
        }
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let counts = [spec.train, spec.val, spec.test, spec.test_full];
    let mut splits = BTreeMap::new();
    for (split, &n) in SPLITS.iter().zip(&counts) {
        if n == 0 && *split == "test_full" {
            continue;
        }
        let ids: Vec<String> = (0..n)
            .into_par_iter()
            .map(|i| {
                let s = make_sample(spec, split, i)?;
                save_sample(sample_dir(root, split, &s.id), &s)?;
                Ok(s.id)
            })
            .collect::<Result<_>>()?;
        splits.insert(split.to_string(), ids);
    }
    let manifest = DatasetManifest {
        seed: spec.seed,
        ratio: spec.ratio,
        bands: spec.bands,
        height: spec.height,
        width: spec.width,
        splits,
    };
    let path = root.join("manifest.txt");
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

// ── PPM export ──────────────────────────────────────────────────────────

/// Binary PPM (P6) of a 1- or 3-band image. Values are clamped to `[0, 1]`
/// unless `normalize` stretches the image's own min..max onto that range.
pub fn encode_ppm<T: Scalar>(img: &Tensor<T>, normalize: bool) -> Result<Vec<u8>> {
    let (h, w, c) = img.hwc()?;
    if c != 1 && c != 3 {
        return Err(Error::invalid("encode_ppm", format!("1 or 3 bands required, got {c}")));
    }
    let (lo, hi) = if normalize {
        let (a, b) = img.min_max();
        (a.to_f64_lossy(), b.to_f64_lossy())
    } else {
        (0.0, 1.0)
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for px in img.data().chunks(c) {
        for k in 0..3 {
            let v = (px[k % c].to_f64_lossy() - lo) / span;
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn save_ppm<T: Scalar>(path: impl AsRef<Path>, img: &Tensor<T>, normalize: bool) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img, normalize)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_size_and_errors() {
        let t = Tensor::<f32>::zeros(&[64, 64, 4]);
        let bytes = encode_tensor(&t);
        assert_eq!(bytes.len(), HEADER_FIXED + 3 * 8 + 65536);
        assert_eq!(decode_tensor::<f32>(&bytes).unwrap(), t);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor::<f32>(&bad), Err(Error::BadMagic(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_tensor::<f32>(&bad), Err(Error::UnsupportedVersion(2))));
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(matches!(decode_tensor::<f32>(&bad), Err(Error::UnknownDType(7))));
        assert!(matches!(decode_tensor::<f32>(&bytes[..100]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_tensor::<f64>(&bytes), Err(Error::DTypeMismatch { .. })));
    }

    #[test]
    fn scene_is_deterministic_and_bounded() {
        let a = gen_scene(7, 32, 32, 4).unwrap();
        assert_eq!(a, gen_scene(7, 32, 32, 4).unwrap());
        assert_ne!(a, gen_scene(8, 32, 32, 4).unwrap());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(gen_scene(0, 8, 32, 4).is_err());
    }

    #[test]
    fn pan_examples() {
        let gt = gen_scene(1, 16, 16, 1).unwrap();
        assert_eq!(pan_from_gt(&gt, &[1.0]).unwrap(), gt);
        let band = gen_scene(2, 16, 16, 1).unwrap();
        let same = Tensor::stack_channels(&[band.clone(), band.clone(), band.clone(), band.clone()]).unwrap();
        let pan = pan_from_gt(&same, &uniform_weights(4)).unwrap();
        assert!(pan.max_abs_diff(&band) < 1e-15);
        assert!(pan_from_gt(&same, &[0.5, 0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn degrade_constant_and_shape() {
        let t = Tensor::<f64>::full(&[16, 16, 2], 0.4);
        let d = degrade_ms(&t, 4).unwrap();
        assert_eq!(d.shape(), &[4, 4, 2]);
        assert!(d.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        assert!(degrade_ms(&t, 3).is_err());
        let up = upsample_bicubic(&d, 4).unwrap();
        assert!(up.max_abs_diff(&t) < 1e-14);
    }

    #[test]
    fn cubic_kernel_properties() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
        for i in 0..10 {
            let f = i as f64 / 10.0;
            let s: f64 = (-1..=2).map(|o| cubic_weight(f - o as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let mut splits = BTreeMap::new();
        splits.insert("train".to_string(), vec!["train_0000".to_string(), "train_0001".to_string()]);
        splits.insert("test".to_string(), vec![]);
        let m = DatasetManifest { seed: 3, ratio: 4, bands: 4, height: 32, width: 32, splits };
        assert_eq!(DatasetManifest::parse(&m.to_text()).unwrap(), m);
        assert!(parse_key_values("a=1\na=2", "x").is_err());
        assert!(parse_key_values("novalue", "x").is_err());
    }

    #[test]
    fn ppm_header_and_scaling() {
        let img = Tensor::<f64>::new(&[1, 2, 1], vec![0.0, 1.0]).unwrap();
        let ppm = encode_ppm(&img, false).unwrap();
        assert!(ppm.starts_with(b"P6\n2 1\n255\n"));
        assert_eq!(&ppm[ppm.len() - 6..], &[0, 0, 0, 255, 255, 255]);
        let flat = Tensor::<f64>::full(&[2, 2, 3], 0.3);
        assert!(encode_ppm(&flat, true).unwrap().ends_with(&[0; 12]));
        assert!(encode_ppm(&Tensor::<f64>::zeros(&[2, 2, 4]), false).is_err());
    }
}
