//! Parameter storage and the reusable convolutional blocks of the network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Puts every parameter on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars(self.entries.iter().map(|(_, t)| tape.param(t.clone())).collect())
    }

    /// Puts every parameter on `tape` as a constant (inference only).
    pub fn register_frozen(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars(self.entries.iter().map(|(_, t)| tape.constant(t.clone())).collect())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }
}

/// Tape handles for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamVars(Vec<Var>);

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn as_slice(&self) -> &[Var] {
        &self.0
    }
}

/// Seeded fan-in uniform initializer: weights ~ U(-sqrt(6/fan_in), sqrt(6/fan_in)).
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn bound(fan_in: usize) -> f64 {
        (6.0 / fan_in as f64).sqrt()
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let b = Self::bound(fan_in);
        Tensor::from_fn(shape, |_| T::from_f64_lossy(self.rng.gen_range(-b..b)))
    }
}

/// Convolution weights plus bias; stride 1, same padding.
#[derive(Debug, Clone, Copy)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2dLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
    ) -> Self {
        let w = init.uniform(&[kernel, kernel, cin, cout], kernel * kernel * cin);
        Self::with_weight(store, name, kernel, cin, cout, w)
    }

    /// All-zero weights and bias.
    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, kernel: usize, cin: usize, cout: usize) -> Self {
        Self::with_weight(store, name, kernel, cin, cout, Tensor::zeros(&[kernel, kernel, cin, cout]))
    }

    fn with_weight<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        w: Tensor<T>,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Conv2dLayer { weight, bias, kernel, cin, cout }
    }

    pub fn num_params(&self) -> usize {
        self.kernel * self.kernel * self.cin * self.cout + self.cout
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamVars, x: Var) -> Result<Var> {
        tape.conv2d(x, p.get(self.weight), Some(p.get(self.bias)))
    }
}

/// `conv3x3(Cin -> d) -> ReLU -> conv3x3(d -> d)`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionBlock {
    pub first: Conv2dLayer,
    pub second: Conv2dLayer,
}

impl ProjectionBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        name: &str,
        cin: usize,
        width: usize,
    ) -> Self {
        ProjectionBlock {
            first: Conv2dLayer::new(store, init, &format!("{name}.0"), 3, cin, width),
            second: Conv2dLayer::new(store, init, &format!("{name}.1"), 3, width, width),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.first.cin
    }

    pub fn width(&self) -> usize {
        self.second.cout
    }

    pub fn num_params(&self) -> usize {
        self.first.num_params() + self.second.num_params()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let cin = *tape.shape(x).last().unwrap_or(&0);
        if cin != self.in_channels() {
            return Err(Error::shape("projection", tape.shape(x), &[self.in_channels()]));
        }
        let h = self.first.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        self.second.forward(tape, p, h)
    }
}

/// `x + conv3x3(ReLU(conv3x3(x)))`, channel-preserving.
#[derive(Debug, Clone, Copy)]
pub struct ResidualConvBlock {
    pub first: Conv2dLayer,
    pub second: Conv2dLayer,
}

impl ResidualConvBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Initializer, name: &str, channels: usize) -> Self {
        ResidualConvBlock {
            first: Conv2dLayer::new(store, init, &format!("{name}.0"), 3, channels, channels),
            second: Conv2dLayer::new(store, init, &format!("{name}.1"), 3, channels, channels),
        }
    }

    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        ResidualConvBlock {
            first: Conv2dLayer::zeroed(store, &format!("{name}.0"), 3, channels, channels),
            second: Conv2dLayer::zeroed(store, &format!("{name}.1"), 3, channels, channels),
        }
    }

    pub fn num_params(&self) -> usize {
        self.first.num_params() + self.second.num_params()
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, p, x)?;
        let h = tape.relu(h)?;
        let h = self.second.forward(tape, p, h)?;
        tape.add(x, h)
    }
}

pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Per-channel Sobel gradient magnitude `sqrt(gx^2 + gy^2)` with edge
/// replication at the borders, so constant images map to exactly zero.
pub fn sobel<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = x.hwc()?;
    let data = x.data();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let two = T::from_f64_lossy(2.0);
    let mut out = vec![T::zero(); h * w * c];
    for y in 0..h {
        let rows = [clamp(y as isize - 1, h), y, clamp(y as isize + 1, h)];
        for xx in 0..w {
            let cols = [clamp(xx as isize - 1, w), xx, clamp(xx as isize + 1, w)];
            for ch in 0..c {
                let at = |r: usize, q: usize| data[(rows[r] * w + cols[q]) * c + ch];
                // differences first so flat regions give exactly zero
                let sx = (at(0, 2) - at(0, 0)) + two * (at(1, 2) - at(1, 0)) + (at(2, 2) - at(2, 0));
                let sy = (at(2, 0) - at(0, 0)) + two * (at(2, 1) - at(0, 1)) + (at(2, 2) - at(0, 2));
                out[(y * w + xx) * c + ch] = (sx * sx + sy * sy).sqrt();
            }
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// `H x W x C -> HW x C`, row-major pixel order.
pub fn flatten_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = x.hwc()?;
    x.reshape(&[h * w, c])
}

/// Inverse of [`flatten_tokens`].
pub fn unflatten_tokens<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    match *x.shape() {
        [t, c] if t == h * w => x.reshape(&[h, w, c]),
        _ => Err(Error::shape("unflatten_tokens", x.shape(), &[h, w])),
    }
}

/// Tape counterpart of [`flatten_tokens`].
pub fn flatten_var<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (h, w, c) = tape.value(x).hwc()?;
    tape.reshape(x, &[h * w, c])
}
