//! Siamese CNN: a shared-weight feature extractor, Euclidean feature distance,
//! contrastive loss, hand-written backpropagation, Adam / SGD and the training
//! loop.
//!
//! The network is generic over the scalar type so that training can run in
//! `f32` while gradient checks run in `f64`. Convolutions are lowered to GEMM
//! through im2col.

use std::fmt::Debug;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::raster::{augment, GrayPatch, Label, PatchPair};
use crate::{Error, Result};

pub trait Real:
    Copy
    + Send
    + Sync
    + Default
    + Debug
    + PartialOrd
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;

    /// C = A B + beta C with arbitrary strides (see `matrixmultiply`).
    ///
    /// # Safety
    /// The pointers and strides must describe valid m x k, k x n and m x n
    /// matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    const ZERO: f32 = 0.0;
    const ONE: f32 = 1.0;
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sqrt(self) -> f32 {
        f32::sqrt(self)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const ZERO: f64 = 0.0;
    const ONE: f64 = 1.0;
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major C (m x n) = op(A) op(B) + beta C. A transposed means it is stored
/// k x m, B transposed means it is stored n x k.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, beta: T, c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assert above keeps every access inside the slices.
    unsafe { T::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1) }
}

// ---------------------------------------------------------------- layer ops

/// Zero-padded im2col for a `k x k` kernel with "same" output size.
/// Output is (c*k*k) x (h*w).
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let hw = h * w;
    let mut cols = vec![T::ZERO; c * k * k * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &x[ci * hw + sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[xo] = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let pad = k / 2;
    let hw = h * w;
    let mut x = vec![T::ZERO; c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            x[ci * hw + sy as usize * w + sx as usize] += row[y * w + xo];
                        }
                    }
                }
            }
        }
    }
    x
}

/// "Same" convolution, weights `o x (c*k*k)`. Returns output (o x h*w) and the
/// im2col buffer for the backward pass.
pub fn conv_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize, weights: &[T], bias: &[T], k: usize) -> (Vec<T>, Vec<T>) {
    let o = bias.len();
    let cols = im2col(x, c, h, w, k);
    let hw = h * w;
    let mut out = vec![T::ZERO; o * hw];
    gemm(o, c * k * k, hw, weights, false, &cols, false, T::ZERO, &mut out);
    for (oc, row) in out.chunks_exact_mut(hw).enumerate() {
        let b = bias[oc];
        row.iter_mut().for_each(|v| *v += b);
    }
    (out, cols)
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    d_out: &[T],
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    weights: &[T],
    k: usize,
    d_weights: &mut [T],
    d_bias: &mut [T],
    need_input: bool,
) -> Option<Vec<T>> {
    let o = d_bias.len();
    let hw = h * w;
    let ckk = c * k * k;
    gemm(o, hw, ckk, d_out, false, cols, true, T::ONE, d_weights);
    for (oc, row) in d_out.chunks_exact(hw).enumerate() {
        d_bias[oc] += row.iter().copied().sum::<T>();
    }
    need_input.then(|| {
        let mut d_cols = vec![T::ZERO; ckk * hw];
        gemm(ckk, o, hw, weights, true, d_out, false, T::ZERO, &mut d_cols);
        col2im(&d_cols, c, h, w, k)
    })
}

pub fn relu_forward<T: Real>(x: &mut [T]) {
    x.iter_mut().for_each(|v| {
        if *v < T::ZERO {
            *v = T::ZERO
        }
    });
}

/// Masks `grad` by the ReLU output `y`.
pub fn relu_backward<T: Real>(y: &[T], grad: &mut [T]) {
    for (g, &v) in grad.iter_mut().zip(y) {
        if !(v > T::ZERO) {
            *g = T::ZERO;
        }
    }
}

/// 2x2 max pooling with floor. Returns output and the flat input index of each
/// maximum (first maximum wins ties).
pub fn maxpool_forward<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * ph * pw);
    let mut arg = Vec::with_capacity(c * ph * pw);
    for ci in 0..c {
        for y in 0..ph {
            for xo in 0..pw {
                let mut best = ci * h * w + 2 * y * w + 2 * xo;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ci * h * w + (2 * y + dy) * w + 2 * xo + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: Real>(d_out: &[T], arg: &[u32], input_len: usize) -> Vec<T> {
    let mut d = vec![T::ZERO; input_len];
    for (&g, &i) in d_out.iter().zip(arg) {
        d[i as usize] += g;
    }
    d
}

/// y = W x + b with W stored `out x in`.
pub fn fc_forward<T: Real>(x: &[T], weights: &[T], bias: &[T]) -> Vec<T> {
    let mut y = bias.to_vec();
    gemm(bias.len(), x.len(), 1, weights, false, x, false, T::ONE, &mut y);
    y
}

pub fn fc_backward<T: Real>(d_y: &[T], x: &[T], weights: &[T], d_weights: &mut [T], d_bias: &mut [T], need_input: bool) -> Option<Vec<T>> {
    gemm(d_y.len(), 1, x.len(), d_y, false, x, false, T::ONE, d_weights);
    for (b, &g) in d_bias.iter_mut().zip(d_y) {
        *b += g;
    }
    need_input.then(|| {
        let mut d_x = vec![T::ZERO; x.len()];
        gemm(x.len(), d_y.len(), 1, weights, true, d_y, false, T::ZERO, &mut d_x);
        d_x
    })
}

// ---------------------------------------------------------------- network

/// Layer sizes of one branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    /// Square input edge in pixels.
    pub input: usize,
    pub conv_channels: Vec<usize>,
    /// Odd kernel edge; padding is `kernel / 2`.
    pub kernel: usize,
    /// Fully connected widths; the last one is the feature dimension.
    pub fc: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture { input: 100, conv_channels: vec![8, 16, 32], kernel: 5, fc: vec![256, 64, 5] }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(Error::Config(format!("sicnn kernel must be odd, got {}", self.kernel)));
        }
        if self.conv_channels.is_empty() || self.fc.is_empty() || self.conv_channels.iter().chain(&self.fc).any(|&n| n == 0) {
            return Err(Error::Config("sicnn layer widths must be non-empty and positive".into()));
        }
        if self.input >> self.conv_channels.len() == 0 {
            return Err(Error::Config(format!(
                "sicnn input {} is too small for {} pooling stages",
                self.input,
                self.conv_channels.len()
            )));
        }
        Ok(())
    }

    /// Spatial edge after the last pooling stage.
    pub fn final_spatial(&self) -> usize {
        self.conv_channels.iter().fold(self.input, |s, _| s / 2)
    }

    pub fn flat_len(&self) -> usize {
        let s = self.final_spatial();
        self.conv_channels.last().copied().unwrap_or(1) * s * s
    }

    pub fn feature_dim(&self) -> usize {
        *self.fc.last().unwrap()
    }

    fn layer_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        let mut c = 1;
        for &o in &self.conv_channels {
            shapes.push(vec![o, c, self.kernel, self.kernel]);
            c = o;
        }
        let mut n = self.flat_len();
        for &o in &self.fc {
            shapes.push(vec![o, n]);
            n = o;
        }
        shapes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![T::ZERO; n] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// Conv: (out, in, k, k); fully connected: (out, in).
    pub weights: Tensor<T>,
    pub bias: Vec<T>,
}

/// Parameters of one branch; both branches share them. Also used as the
/// gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T = f32> {
    pub arch: Architecture,
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> NetworkParams<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        let layers = arch
            .layer_shapes()
            .into_iter()
            .map(|s| {
                let o = s[0];
                Layer { weights: Tensor::zeros(s), bias: vec![T::ZERO; o] }
            })
            .collect();
        NetworkParams { arch: arch.clone(), layers }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.data.len() + l.bias.len()).sum()
    }

    /// Visits every parameter in a fixed order.
    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.layers.iter().flat_map(|l| l.weights.data.iter().chain(l.bias.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.layers.iter_mut().flat_map(|l| l.weights.data.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, &b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.values_mut().for_each(|v| *v = *v * s);
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.to_f64().is_finite())
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            arch: self.arch.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weights: Tensor {
                        shape: l.weights.shape.clone(),
                        data: l.weights.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                    },
                    bias: l.bias.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Fan-in scaled uniform init: weights ~ U(-a, a) with a = sqrt(6 / fan_in),
/// so the standard deviation is sqrt(2 / fan_in). Biases are zero.
pub fn init_params<T: Real>(arch: &Architecture, seed: u64) -> Result<NetworkParams<T>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = NetworkParams::zeros(arch);
    for l in &mut p.layers {
        let fan_in: usize = l.weights.shape[1..].iter().product();
        let a = (6.0 / fan_in as f64).sqrt();
        for w in &mut l.weights.data {
            *w = T::from_f64(rng.gen_range(-a..a));
        }
    }
    Ok(p)
}

struct ConvTrace<T> {
    cols: Vec<T>,
    /// Post-ReLU activation before pooling.
    act: Vec<T>,
    arg: Vec<u32>,
    c: usize,
    hw: usize,
}

/// Activations kept for backpropagation.
pub struct Trace<T> {
    conv: Vec<ConvTrace<T>>,
    /// Input of each fully connected layer.
    fc_in: Vec<Vec<T>>,
    /// Post-ReLU outputs of the hidden fully connected layers.
    fc_act: Vec<Vec<T>>,
    pub output: Vec<T>,
}

fn check_patch(arch: &Architecture, patch: &GrayPatch) -> Result<()> {
    if patch.size != arch.input || patch.pixels.len() != arch.input * arch.input {
        return Err(Error::Shape {
            expected: format!("{0}x{0} patch", arch.input),
            got: format!("{0}x{0} patch", patch.size),
        });
    }
    Ok(())
}

fn scaled_pixels<T: Real>(patch: &GrayPatch) -> Vec<T> {
    patch.pixels.iter().map(|&v| T::from_f64(v as f64 / 255.0)).collect()
}

/// Branch forward pass on a `[0, 1]`-scaled single-channel image.
pub fn forward_trace<T: Real>(p: &NetworkParams<T>, input: &[T]) -> Trace<T> {
    let arch = &p.arch;
    let nconv = arch.conv_channels.len();
    let (mut x, mut c, mut s) = (input.to_vec(), 1usize, arch.input);
    let mut conv = Vec::with_capacity(nconv);
    for l in &p.layers[..nconv] {
        let (mut act, cols) = conv_forward(&x, c, s, s, &l.weights.data, &l.bias, arch.kernel);
        relu_forward(&mut act);
        let o = l.bias.len();
        let (pooled, arg) = maxpool_forward(&act, o, s, s);
        conv.push(ConvTrace { cols, act, arg, c, hw: s });
        x = pooled;
        c = o;
        s /= 2;
    }
    let mut fc_in = Vec::new();
    let mut fc_act = Vec::new();
    let nfc = arch.fc.len();
    for (i, l) in p.layers[nconv..].iter().enumerate() {
        let mut y = fc_forward(&x, &l.weights.data, &l.bias);
        fc_in.push(std::mem::take(&mut x));
        if i + 1 < nfc {
            relu_forward(&mut y);
            fc_act.push(y.clone());
        }
        x = y;
    }
    Trace { conv, fc_in, fc_act, output: x }
}

/// Feature vector of one patch.
pub fn forward<T: Real>(p: &NetworkParams<T>, patch: &GrayPatch) -> Result<Vec<T>> {
    check_patch(&p.arch, patch)?;
    Ok(forward_trace(p, &scaled_pixels(patch)).output)
}

/// Accumulates the parameter gradient for `d_output` into `grad`.
pub fn backward<T: Real>(p: &NetworkParams<T>, trace: &Trace<T>, d_output: &[T], grad: &mut NetworkParams<T>) {
    let arch = &p.arch;
    let nconv = arch.conv_channels.len();
    let nfc = arch.fc.len();
    let mut d = d_output.to_vec();
    for i in (0..nfc).rev() {
        let li = nconv + i;
        if i + 1 < nfc {
            relu_backward(&trace.fc_act[i], &mut d);
        }
        let g = &mut grad.layers[li];
        d = fc_backward(&d, &trace.fc_in[i], &p.layers[li].weights.data, &mut g.weights.data, &mut g.bias, true).unwrap();
    }
    for i in (0..nconv).rev() {
        let t = &trace.conv[i];
        let mut d_act = maxpool_backward(&d, &t.arg, t.act.len());
        relu_backward(&t.act, &mut d_act);
        let g = &mut grad.layers[i];
        match conv_backward(
            &d_act,
            &t.cols,
            t.c,
            t.hw,
            t.hw,
            &p.layers[i].weights.data,
            arch.kernel,
            &mut g.weights.data,
            &mut g.bias,
            i > 0,
        ) {
            Some(dx) => d = dx,
            None => break,
        }
    }
}

/// Euclidean distance between feature vectors.
pub fn distance<T: Real>(fx: &[T], fy: &[T]) -> T {
    fx.iter().zip(fy).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt()
}

/// (1 - l) D^2 + l max(0, m - D)^2, with l = 1 for changed pairs.
pub fn contrastive_loss<T: Real>(d: T, label: Label, m: T) -> T {
    match label {
        Label::Unchanged => d * d,
        Label::Changed => {
            let r = if m > d { m - d } else { T::ZERO };
            r * r
        }
    }
}

/// Gradient of the loss with respect to `fx` (the one for `fy` is its
/// negation). At D = 0 the changed-pair gradient is taken as 0.
pub fn loss_grad_features<T: Real>(fx: &[T], fy: &[T], label: Label, m: T) -> Vec<T> {
    let diff: Vec<T> = fx.iter().zip(fy).map(|(&a, &b)| a - b).collect();
    match label {
        Label::Unchanged => diff.into_iter().map(|v| T::from_f64(2.0) * v).collect(),
        Label::Changed => {
            let d = distance(fx, fy);
            if !(d < m) || !(d > T::ZERO) {
                return vec![T::ZERO; diff.len()];
            }
            let s = -(T::from_f64(2.0) * (m - d)) / d;
            diff.into_iter().map(|v| s * v).collect()
        }
    }
}

/// Loss and parameter gradient of one labeled pair through both branches.
pub fn gradients<T: Real>(p: &NetworkParams<T>, pair: &PatchPair, m: T) -> Result<(T, NetworkParams<T>)> {
    let label = pair.label.ok_or_else(|| Error::Data(format!("pair at tile {:?} is unlabeled", pair.tile)))?;
    check_patch(&p.arch, &pair.a)?;
    check_patch(&p.arch, &pair.b)?;
    let ta = forward_trace(p, &scaled_pixels(&pair.a));
    let tb = forward_trace(p, &scaled_pixels(&pair.b));
    let d = distance(&ta.output, &tb.output);
    let loss = contrastive_loss(d, label, m);
    let gx = loss_grad_features(&ta.output, &tb.output, label, m);
    let gy: Vec<T> = gx.iter().map(|&v| -v).collect();
    let mut grad = NetworkParams::zeros(&p.arch);
    backward(p, &ta, &gx, &mut grad);
    backward(p, &tb, &gy, &mut grad);
    Ok((loss, grad))
}

/// Summed loss and gradient over `pairs`. Per-pair gradients are computed in
/// parallel and reduced in index order, so the result does not depend on the
/// thread count.
pub fn batch_gradients<T: Real>(p: &NetworkParams<T>, pairs: &[&PatchPair], m: T) -> Result<(T, NetworkParams<T>)> {
    let chunk = rayon::current_num_threads().max(1) * 2;
    let mut total = NetworkParams::zeros(&p.arch);
    let mut loss = T::ZERO;
    for group in pairs.chunks(chunk) {
        let parts: Vec<Result<(T, NetworkParams<T>)>> = group.par_iter().map(|pair| gradients(p, pair, m)).collect();
        for part in parts {
            let (l, g) = part?;
            loss += l;
            total.add_assign(&g);
        }
    }
    Ok((loss, total))
}

// ---------------------------------------------------------------- training

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub margin: f64,
    pub seed: u64,
    pub decision_threshold: f64,
    pub optimizer: OptimizerKind,
    /// Share of each class held out for validation.
    pub validation_fraction: f64,
    /// Add the five flips / rotations of every changed training pair.
    pub augment_changed: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 1e-4,
            epochs: 10,
            margin: 1.0,
            seed: 0,
            decision_threshold: 0.5,
            optimizer: OptimizerKind::Adam,
            validation_fraction: 0.1,
            augment_changed: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("train.batch_size and train.epochs must be > 0".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.margin > 0.0) {
            return Err(Error::Config("train.learning_rate and train.margin must be > 0".into()));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < self.margin) {
            return Err(Error::Config(format!(
                "train.decision_threshold must lie in (0, margin = {}), got {}",
                self.margin, self.decision_threshold
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "train.validation_fraction must lie in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

pub struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    lr: f64,
}

impl<T: Real> Adam<T> {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(n: usize, lr: f64) -> Self {
        Adam { m: vec![T::ZERO; n], v: vec![T::ZERO; n], t: 0, lr }
    }

    pub fn step(&mut self, p: &mut NetworkParams<T>, g: &NetworkParams<T>) {
        self.t += 1;
        let (b1, b2) = (T::from_f64(Self::B1), T::from_f64(Self::B2));
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let step = T::from_f64(self.lr / c1);
        let c2s = T::from_f64(c2.sqrt());
        let eps = T::from_f64(Self::EPS);
        for (((w, &gi), m), v) in p.values_mut().zip(g.values()).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::ONE - b1) * gi;
            *v = b2 * *v + (T::ONE - b2) * gi * gi;
            *w = *w - step * *m / (v.sqrt() / c2s + eps);
        }
    }
}

fn sgd_step<T: Real>(p: &mut NetworkParams<T>, g: &NetworkParams<T>, lr: f64) {
    let lr = T::from_f64(lr);
    for (w, &gi) in p.values_mut().zip(g.values()) {
        *w = *w - lr * gi;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    /// Set on the last iteration of each epoch.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Share of validation pairs with |D - l| < 0.5.
    pub val_accuracy: f64,
    /// Share of validation pairs classified correctly by the decision
    /// threshold.
    pub val_threshold_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best threshold accuracy on the
    /// validation split (latest wins ties).
    pub params: NetworkParams<f32>,
    pub history: Vec<HistoryRow>,
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
}

/// Holds out `fraction` of each class (at least one pair of each class when
/// possible) with a seeded shuffle.
pub fn split_validation<'a>(pairs: &'a [PatchPair], fraction: f64, seed: u64) -> (Vec<&'a PatchPair>, Vec<&'a PatchPair>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0001);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for label in [Label::Unchanged, Label::Changed] {
        let mut idx: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].label == Some(label)).collect();
        idx.shuffle(&mut rng);
        let mut n_val = (fraction * idx.len() as f64).round() as usize;
        if fraction > 0.0 && idx.len() >= 2 {
            n_val = n_val.clamp(1, idx.len() - 1);
        }
        for (k, &i) in idx.iter().enumerate() {
            if k < n_val {
                val.push(i);
            } else {
                train.push(i);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train.into_iter().map(|i| &pairs[i]).collect(), val.into_iter().map(|i| &pairs[i]).collect())
}

/// (share with |D - l| < 0.5, share correct under `threshold`).
pub fn validation_accuracy<T: Real>(p: &NetworkParams<T>, pairs: &[&PatchPair], threshold: f64) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let ds: Vec<Result<f64>> = pairs.par_iter().map(|pair| pair_distance(p, pair)).collect();
    let (mut ok, mut ok_thr) = (0usize, 0usize);
    for (d, pair) in ds.into_iter().zip(pairs) {
        let d = d?;
        let l = pair.label.map(Label::value).unwrap_or(0.0);
        if (d - l).abs() < 0.5 {
            ok += 1;
        }
        if (d >= threshold) == (l == 1.0) {
            ok_thr += 1;
        }
    }
    let n = pairs.len() as f64;
    Ok((ok as f64 / n, ok_thr as f64 / n))
}

pub fn pair_distance<T: Real>(p: &NetworkParams<T>, pair: &PatchPair) -> Result<f64> {
    let fx = forward(p, &pair.a)?;
    let fy = forward(p, &pair.b)?;
    Ok(distance(&fx, &fy).to_f64())
}

/// Trains from scratch. See [`TrainConfig`] for the split and augmentation.
pub fn train(dataset: &[PatchPair], arch: &Architecture, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(dataset, arch, cfg, |_| {})
}

pub fn train_with_progress(
    dataset: &[PatchPair],
    arch: &Architecture,
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    arch.validate()?;
    if let Some(bad) = dataset.iter().find(|p| !p.valid || p.label.is_none()) {
        return Err(Error::Data(format!("training pair at tile {:?} is invalid or unlabeled", bad.tile)));
    }
    let has = |l| dataset.iter().any(|p| p.label == Some(l));
    if !has(Label::Changed) || !has(Label::Unchanged) {
        return Err(Error::Data("training set must contain both changed and unchanged pairs".into()));
    }
    let (train_refs, val) = split_validation(dataset, cfg.validation_fraction, cfg.seed);
    let mut train_set: Vec<PatchPair> = Vec::new();
    for p in train_refs {
        train_set.push(p.clone());
        if cfg.augment_changed && p.label == Some(Label::Changed) {
            train_set.extend(augment(p));
        }
    }

    let mut params: NetworkParams<f32> = init_params(arch, cfg.seed)?;
    let mut adam = Adam::new(params.num_params(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    let margin = cfg.margin as f32;
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, NetworkParams<f32>)> = None;
    let mut epochs = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut iteration = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&PatchPair> = batch.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grad) = batch_gradients(&params, &refs, margin)?;
            let n = refs.len() as f32;
            let mean_loss = (loss / n) as f64;
            if !mean_loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at iteration {}", iteration + 1)));
            }
            grad.scale(1.0 / n);
            match cfg.optimizer {
                OptimizerKind::Adam => adam.step(&mut params, &grad),
                OptimizerKind::Sgd => sgd_step(&mut params, &grad, cfg.learning_rate),
            }
            if !params.is_finite() {
                return Err(Error::Numeric(format!("non-finite parameters after iteration {}", iteration + 1)));
            }
            iteration += 1;
            history.push(HistoryRow { iteration, epoch, loss: mean_loss, val_accuracy: None });
        }
        let (acc, acc_thr) =
            if val.is_empty() { (0.0, 0.0) } else { validation_accuracy(&params, &val, cfg.decision_threshold)? };
        if let Some(last) = history.last_mut() {
            last.val_accuracy = Some(acc);
        }
        let rows = history.iter().filter(|r| r.epoch == epoch);
        let (sum, n) = rows.fold((0.0, 0usize), |(s, n), r| (s + r.loss, n + 1));
        let summary = EpochSummary { epoch, mean_loss: sum / n.max(1) as f64, val_accuracy: acc, val_threshold_accuracy: acc_thr };
        progress(&summary);
        epochs.push(summary);
        if best.as_ref().map_or(true, |(b, _, _)| acc_thr >= *b) {
            best = Some((acc_thr, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.unwrap();
    Ok(TrainOutcome { params, history, epochs, best_epoch })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Changed,
    Unchanged,
    Invalid,
}

/// Thresholds the feature distance; invalid pairs are never scored.
pub fn classify<T: Real>(p: &NetworkParams<T>, pair: &PatchPair, threshold: f64) -> Result<(Decision, Option<f64>)> {
    if !pair.valid {
        return Ok((Decision::Invalid, None));
    }
    let d = pair_distance(p, pair)?;
    Ok((if d >= threshold { Decision::Changed } else { Decision::Unchanged }, Some(d)))
}

// ---------------------------------------------------------------- files

const MAGIC: &[u8; 4] = b"SCNN";
const VERSION: u32 = 1;

/// Little-endian: magic, version, layer count, then per layer the dimension
/// count, dims, f32 weights and f32 biases.
pub fn save_model<T: Real>(path: &Path, p: &NetworkParams<T>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(p.layers.len() as u32).to_le_bytes());
    for l in &p.layers {
        buf.extend_from_slice(&(l.weights.shape.len() as u32).to_le_bytes());
        for &d in &l.weights.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in l.weights.data.iter().chain(&l.bias) {
            buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads a model; the input edge is not stored and must be supplied.
pub fn load_model(path: &Path, input: usize) -> Result<NetworkParams<f32>> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Model(format!("{}: {msg}", path.display()));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_of = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap());
    let version = u32_of(take(4)?);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n_layers = u32_of(take(4)?) as usize;
    let mut shapes = Vec::new();
    let mut layers = Vec::new();
    for _ in 0..n_layers {
        let ndim = u32_of(take(4)?) as usize;
        if ndim != 2 && ndim != 4 {
            return Err(bad(&format!("layer with {ndim} dims")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32_of(take(4)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(n + shape[0]);
        for _ in 0..n + shape[0] {
            vals.push(f32::from_le_bytes(take(4)?.try_into().unwrap()));
        }
        let bias = vals.split_off(n);
        shapes.push(shape.clone());
        layers.push(Layer { weights: Tensor { shape, data: vals }, bias });
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let conv: Vec<&Vec<usize>> = shapes.iter().take_while(|s| s.len() == 4).collect();
    let fc: Vec<usize> = shapes[conv.len()..].iter().map(|s| s[0]).collect();
    if conv.is_empty() || fc.is_empty() || shapes[conv.len()..].iter().any(|s| s.len() != 2) {
        return Err(bad("expected conv layers followed by fully connected layers"));
    }
    let arch = Architecture {
        input,
        conv_channels: conv.iter().map(|s| s[0]).collect(),
        kernel: conv[0][2],
        fc,
    };
    arch.validate()?;
    if arch.layer_shapes() != shapes {
        return Err(Error::Model(format!(
            "{}: layer shapes do not fit a {input}x{input} input (expected {:?})",
            path.display(),
            arch.layer_shapes()
        )));
    }
    let p = NetworkParams { arch, layers };
    if !p.is_finite() {
        return Err(bad("non-finite weights"));
    }
    Ok(p)
}

pub const HISTORY_HEADER: &str = "iteration,epoch,loss,val_accuracy";

pub fn save_history(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut text = format!("{HISTORY_HEADER}\n");
    for r in history {
        let acc = r.val_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
        text.push_str(&format!("{},{},{:.8},{}\n", r.iteration, r.epoch, r.loss, acc));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let err = || Error::Parse { path: path.to_path_buf(), line: i + 1, msg: format!("bad history row {line:?}") };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(err());
        }
        out.push(HistoryRow {
            iteration: f[0].parse().map_err(|_| err())?,
            epoch: f[1].parse().map_err(|_| err())?,
            loss: f[2].parse().map_err(|_| err())?,
            val_accuracy: if f[3].is_empty() { None } else { Some(f[3].parse().map_err(|_| err())?) },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn small_arch() -> Architecture {
        Architecture { input: 16, conv_channels: vec![2, 3, 4], kernel: 5, fc: vec![8, 6, 5] }
    }

    fn random_patch(size: usize, rng: &mut ChaCha8Rng) -> GrayPatch {
        GrayPatch::new(size, (0..size * size).map(|_| rng.gen()).collect(), vec![false; size * size], (0, 0)).unwrap()
    }

    fn random_params(arch: &Architecture, seed: u64) -> NetworkParams<f64> {
        let mut p: NetworkParams<f64> = init_params(arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
        for l in &mut p.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
        }
        p
    }

    // Straight-line reference: direct loops, no im2col, no GEMM.
    fn naive_forward(p: &NetworkParams<f64>, patch: &GrayPatch) -> Vec<f64> {
        let arch = &p.arch;
        let k = arch.kernel as isize;
        let pad = k / 2;
        let mut s = arch.input;
        let mut c = 1;
        let mut x: Vec<f64> = patch.pixels.iter().map(|&v| v as f64 / 255.0).collect();
        for (li, &o) in arch.conv_channels.iter().enumerate() {
            let w = &p.layers[li].weights.data;
            let mut y = vec![0.0; o * s * s];
            for oc in 0..o {
                for r in 0..s as isize {
                    for col in 0..s as isize {
                        let mut acc = p.layers[li].bias[oc];
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (sr, sc) = (r + ky - pad, col + kx - pad);
                                    if sr >= 0 && sc >= 0 && sr < s as isize && sc < s as isize {
                                        let wi = ((oc * c + ic) * k as usize + ky as usize) * k as usize + kx as usize;
                                        acc += w[wi] * x[ic * s * s + sr as usize * s + sc as usize];
                                    }
                                }
                            }
                        }
                        y[oc * s * s + r as usize * s + col as usize] = acc.max(0.0);
                    }
                }
            }
            let h = s / 2;
            let mut pooled = vec![0.0; o * h * h];
            for oc in 0..o {
                for r in 0..h {
                    for col in 0..h {
                        let at = |dr: usize, dc: usize| y[oc * s * s + (2 * r + dr) * s + 2 * col + dc];
                        pooled[oc * h * h + r * h + col] = at(0, 0).max(at(0, 1)).max(at(1, 0)).max(at(1, 1));
                    }
                }
            }
            x = pooled;
            s = h;
            c = o;
        }
        let nconv = arch.conv_channels.len();
        for (i, &o) in arch.fc.iter().enumerate() {
            let l = &p.layers[nconv + i];
            let mut y = vec![0.0; o];
            for r in 0..o {
                y[r] = l.bias[r] + (0..x.len()).map(|j| l.weights.data[r * x.len() + j] * x[j]).sum::<f64>();
                if i + 1 < arch.fc.len() {
                    y[r] = y[r].max(0.0);
                }
            }
            x = y;
        }
        x
    }

    #[test]
    fn forward_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for arch in [small_arch(), Architecture { input: 30, ..Architecture::default() }] {
            let p = random_params(&arch, 11);
            let patch = random_patch(arch.input, &mut rng);
            let fast = forward(&p, &patch).unwrap();
            let slow = naive_forward(&p, &patch);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-12), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn default_architecture_shapes() {
        let a = Architecture::default();
        assert_eq!(a.final_spatial(), 12);
        assert_eq!(a.flat_len(), 4608);
        let p: NetworkParams<f32> = init_params(&a, 0).unwrap();
        let patch = GrayPatch::uniform(100, 90);
        assert_eq!(forward(&p, &patch).unwrap().len(), 5);
        assert!(matches!(forward(&p, &GrayPatch::uniform(64, 0)), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_patch_with_zero_biases_gives_zero_features() {
        let p: NetworkParams<f64> = init_params(&small_arch(), 5).unwrap();
        assert!(forward(&p, &GrayPatch::uniform(16, 0)).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_seeded() {
        let a = Architecture::default();
        let p1: NetworkParams<f32> = init_params(&a, 9).unwrap();
        assert_eq!(p1, init_params(&a, 9).unwrap());
        assert_ne!(p1, init_params(&a, 10).unwrap());
        assert!(p1.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_std_follows_fan_in() {
        let a = Architecture::default();
        for li in 0..6 {
            let mut sq = 0.0;
            let mut n = 0usize;
            let mut fan_in = 0;
            for seed in 0..10 {
                let p: NetworkParams<f64> = init_params(&a, seed).unwrap();
                let l = &p.layers[li];
                fan_in = l.weights.shape[1..].iter().product::<usize>();
                sq += l.weights.data.iter().map(|w| w * w).sum::<f64>();
                n += l.weights.data.len();
            }
            let std = (sq / n as f64).sqrt();
            let target = (2.0 / fan_in as f64).sqrt();
            assert!((std / target - 1.0).abs() < 0.2, "layer {li}: {std} vs {target}");
        }
    }

    #[test]
    fn shared_weights_give_identical_branches() {
        let p: NetworkParams<f32> = init_params(&small_arch(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_patch(16, &mut rng);
        let pair = PatchPair { a: x.clone(), b: x.clone(), tile: (0, 0), tile_xy: (0.0, 0.0), label: None, valid: true };
        let fa = forward(&p, &pair.a).unwrap();
        let fb = forward(&p, &pair.b).unwrap();
        assert_eq!(fa.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), fb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(pair_distance(&p, &pair).unwrap(), 0.0);
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(&[1.0f64, 2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0, 5.0]), 0.0);
        assert!((distance(&[1.0f64, 0.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0, 0.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn loss_examples() {
        assert!((contrastive_loss(0.3f64, Label::Unchanged, 1.0) - 0.09).abs() < 1e-15);
        assert_eq!(contrastive_loss(1.2, Label::Changed, 1.0), 0.0);
        assert!((contrastive_loss(0.4f64, Label::Changed, 1.0) - 0.36).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn distance_matches_sum_of_squares(a in proptest::collection::vec(-10.0f64..10.0, 5), b in proptest::collection::vec(-10.0f64..10.0, 5)) {
            let oracle = (0..5).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt();
            prop_assert!((distance(&a, &b) - oracle).abs() <= 1e-12 * oracle.max(1.0));
            prop_assert_eq!(distance(&a, &b), distance(&b, &a));
        }

        #[test]
        fn distance_triangle_inequality(a in proptest::collection::vec(-10.0f64..10.0, 5), b in proptest::collection::vec(-10.0f64..10.0, 5), c in proptest::collection::vec(-10.0f64..10.0, 5)) {
            prop_assert!(distance(&a, &c) <= distance(&a, &b) + distance(&b, &c) + 1e-12);
        }

        #[test]
        fn loss_is_nonnegative_with_exact_zero_set(d in 0.0f64..3.0, changed: bool, m in 0.01f64..3.0) {
            let l = if changed { Label::Changed } else { Label::Unchanged };
            let v = contrastive_loss(d, l, m);
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v == 0.0, (!changed && d == 0.0) || (changed && d >= m));
        }
    }

    /// Central differences of a scalar function of a vector.
    fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = x[i];
                x[i] = orig + h;
                let up = f(&x);
                x[i] = orig - h;
                let down = f(&x);
                x[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    // Below 1e-4 in magnitude the central difference itself is mostly
    // cancellation noise, so the error is taken relative to that floor.
    fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], what: &str) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            assert!(rel_err(a, n) < 1e-4, "{what}[{i}]: analytic {a} vs numeric {n}");
        }
    }

    fn rand_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (c, h, w, k, o) = (2, 6, 5, 3, 3);
        let x = rand_vec(c * h * w, &mut rng);
        let wt = rand_vec(o * c * k * k, &mut rng);
        let b = rand_vec(o, &mut rng);
        let probe = rand_vec(o * h * w, &mut rng);
        let obj = |x: &[f64], wt: &[f64], b: &[f64]| {
            conv_forward(x, c, h, w, wt, b, k).0.iter().zip(&probe).map(|(a, p)| a * p).sum::<f64>()
        };
        let (_, cols) = conv_forward(&x, c, h, w, &wt, &b, k);
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; o];
        let dx = conv_backward(&probe, &cols, c, h, w, &wt, k, &mut dw, &mut db, true).unwrap();
        assert_close(&dx, &numeric_grad(&x, 1e-4, |v| obj(v, &wt, &b)), "conv dx");
        assert_close(&dw, &numeric_grad(&wt, 1e-4, |v| obj(&x, v, &b)), "conv dw");
        assert_close(&db, &numeric_grad(&b, 1e-4, |v| obj(&x, &wt, v)), "conv db");
    }

    #[test]
    fn fc_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let (n, o) = (7, 4);
        let x = rand_vec(n, &mut rng);
        let wt = rand_vec(o * n, &mut rng);
        let b = rand_vec(o, &mut rng);
        let probe = rand_vec(o, &mut rng);
        let obj = |x: &[f64], wt: &[f64], b: &[f64]| fc_forward(x, wt, b).iter().zip(&probe).map(|(a, p)| a * p).sum::<f64>();
        let mut dw = vec![0.0; wt.len()];
        let mut db = vec![0.0; o];
        let dx = fc_backward(&probe, &x, &wt, &mut dw, &mut db, true).unwrap();
        assert_close(&dx, &numeric_grad(&x, 1e-4, |v| obj(v, &wt, &b)), "fc dx");
        assert_close(&dw, &numeric_grad(&wt, 1e-4, |v| obj(&x, v, &b)), "fc dw");
        assert_close(&db, &numeric_grad(&b, 1e-4, |v| obj(&x, &wt, v)), "fc db");
    }

    #[test]
    fn relu_and_pool_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (c, h, w) = (2, 5, 6);
        let x = rand_vec(c * h * w, &mut rng);
        let probe = rand_vec(c * (h / 2) * (w / 2), &mut rng);
        let pool_obj = |x: &[f64]| maxpool_forward(x, c, h, w).0.iter().zip(&probe).map(|(a, p)| a * p).sum::<f64>();
        let (_, arg) = maxpool_forward(&x, c, h, w);
        assert_close(&maxpool_backward(&probe, &arg, x.len()), &numeric_grad(&x, 1e-4, pool_obj), "pool");

        let probe2 = rand_vec(x.len(), &mut rng);
        let relu_obj = |x: &[f64]| {
            let mut y = x.to_vec();
            relu_forward(&mut y);
            y.iter().zip(&probe2).map(|(a, p)| a * p).sum::<f64>()
        };
        let mut y = x.clone();
        relu_forward(&mut y);
        let mut g = probe2.clone();
        relu_backward(&y, &mut g);
        assert_close(&g, &numeric_grad(&x, 1e-4, relu_obj), "relu");
    }

    #[test]
    fn distance_and_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for label in [Label::Unchanged, Label::Changed] {
            let fx = rand_vec(5, &mut rng).iter().map(|v| v * 0.2).collect::<Vec<_>>();
            let fy = rand_vec(5, &mut rng).iter().map(|v| v * 0.2).collect::<Vec<_>>();
            let m = 1.0;
            assert!(distance(&fx, &fy) < m);
            let g = loss_grad_features(&fx, &fy, label, m);
            let num = numeric_grad(&fx, 1e-4, |v| contrastive_loss(distance(v, &fy), label, m));
            assert_close(&g, &num, "loss/distance");
        }
    }

    /// Distance of a forward pass from the nearest non-differentiable point:
    /// the smallest |pre-activation| of any ReLU and the smallest gap between
    /// the two largest values of any pooling window.
    fn kink_margin(p: &NetworkParams<f64>, patch: &GrayPatch) -> f64 {
        let arch = &p.arch;
        let nconv = arch.conv_channels.len();
        let mut margin = f64::INFINITY;
        let (mut x, mut c, mut s) = (scaled_pixels::<f64>(patch), 1, arch.input);
        for l in &p.layers[..nconv] {
            let (mut act, _) = conv_forward(&x, c, s, s, &l.weights.data, &l.bias, arch.kernel);
            margin = act.iter().fold(margin, |m, v| m.min(v.abs()));
            relu_forward(&mut act);
            let o = l.bias.len();
            for ci in 0..o {
                for y in 0..s / 2 {
                    for xo in 0..s / 2 {
                        let mut w: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                            .iter()
                            .map(|&(dy, dx)| act[ci * s * s + (2 * y + dy) * s + 2 * xo + dx])
                            .collect();
                        w.sort_by(|a, b| b.total_cmp(a));
                        if w[0] > 0.0 {
                            margin = margin.min(w[0] - w[1]);
                        }
                    }
                }
            }
            x = maxpool_forward(&act, o, s, s).0;
            c = o;
            s /= 2;
        }
        for (i, l) in p.layers[nconv..].iter().enumerate() {
            let mut y = fc_forward(&x, &l.weights.data, &l.bias);
            if i + 1 < arch.fc.len() {
                margin = y.iter().fold(margin, |m, v| m.min(v.abs()));
                relu_forward(&mut y);
            }
            x = y;
        }
        margin
    }

    /// Random patch whose forward pass stays at least 1e-3 away from every
    /// kink, so a 1e-4 step cannot cross one.
    fn smooth_patch(p: &NetworkParams<f64>, rng: &mut ChaCha8Rng) -> GrayPatch {
        loop {
            let patch = random_patch(p.arch.input, rng);
            if kink_margin(p, &patch) > 1e-3 {
                return patch;
            }
        }
    }

    /// Every parameter of a 16x16 network, both labels.
    pub(crate) fn gradient_check_max_rel_err(seed: u64) -> f64 {
        let arch = small_arch();
        let p = random_params(&arch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
        let mut worst: f64 = 0.0;
        for label in [Label::Unchanged, Label::Changed] {
            let pair = PatchPair {
                a: smooth_patch(&p, &mut rng),
                b: smooth_patch(&p, &mut rng),
                tile: (0, 0),
                tile_xy: (0.0, 0.0),
                label: Some(label),
                valid: true,
            };
            // large margin keeps the changed pair in the active region
            let m = 10.0 + pair_distance(&p, &pair).unwrap();
            let (_, g) = gradients(&p, &pair, m).unwrap();
            let analytic: Vec<f64> = g.values().copied().collect();
            let flat: Vec<f64> = p.values().copied().collect();
            let rebuild = |v: &[f64]| {
                let mut q = p.clone();
                q.values_mut().zip(v).for_each(|(a, &b)| *a = b);
                q
            };
            let num = numeric_grad(&flat, 1e-4, |v| {
                let q = rebuild(v);
                let d = pair_distance(&q, &pair).unwrap();
                contrastive_loss(d, label, m)
            });
            for (&a, &n) in analytic.iter().zip(&num) {
                worst = worst.max(rel_err(a, n));
            }
        }
        worst
    }

    #[test]
    fn network_gradients_match_finite_differences() {
        for seed in 0..5 {
            let e = gradient_check_max_rel_err(seed);
            assert!(e < 1e-4, "seed {seed}: max relative error {e}");
        }
    }

    fn pair_of(a: GrayPatch, b: GrayPatch, label: Label) -> PatchPair {
        PatchPair { a, b, tile: (0, 0), tile_xy: (0.0, 0.0), label: Some(label), valid: true }
    }

    #[test]
    fn satisfied_margin_has_zero_gradient() {
        let p = random_params(&small_arch(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pair = pair_of(random_patch(16, &mut rng), random_patch(16, &mut rng), Label::Changed);
        let d = pair_distance(&p, &pair).unwrap();
        let (loss, g) = gradients(&p, &pair, d * 0.5).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.values().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_pair_doubles_gradient() {
        let p = random_params(&small_arch(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pair = pair_of(random_patch(16, &mut rng), random_patch(16, &mut rng), Label::Unchanged);
        let (_, one) = batch_gradients(&p, &[&pair], 1.0).unwrap();
        let (_, two) = batch_gradients(&p, &[&pair, &pair], 1.0).unwrap();
        for (a, b) in one.values().zip(two.values()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn unlabeled_pair_is_rejected() {
        let p = random_params(&small_arch(), 6);
        let mut pair = pair_of(GrayPatch::uniform(16, 1), GrayPatch::uniform(16, 2), Label::Changed);
        pair.label = None;
        assert!(matches!(gradients(&p, &pair, 1.0), Err(Error::Data(_))));
    }

    /// Flat ground against a 10 m box at a random spot.
    pub(crate) fn separable_pairs(n: usize, size: usize, seed: u64) -> Vec<PatchPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flat = |rng: &mut ChaCha8Rng| {
            let base: u8 = rng.gen_range(40..50);
            GrayPatch::new(size, (0..size * size).map(|_| base + rng.gen_range(0..3)).collect(), vec![false; size * size], (0, 0)).unwrap()
        };
        (0..n)
            .map(|i| {
                let a = flat(&mut rng);
                if i % 2 == 0 {
                    let b = flat(&mut rng);
                    pair_of(a, b, Label::Unchanged)
                } else {
                    let mut b = flat(&mut rng);
                    let (r0, c0) = (rng.gen_range(0..size / 2), rng.gen_range(0..size / 2));
                    for r in r0..r0 + size / 2 {
                        for c in c0..c0 + size / 2 {
                            b.pixels[r * size + c] = 128;
                        }
                    }
                    pair_of(a, b, Label::Changed)
                }
            })
            .collect()
    }

    #[test]
    fn separable_pairs_are_learned_within_three_epochs() {
        let data = separable_pairs(200, 100, 1);
        let cfg = TrainConfig { batch_size: 16, learning_rate: 1e-3, epochs: 3, seed: 2, augment_changed: false, validation_fraction: 0.2, ..Default::default() };
        let out = train(&data, &Architecture::default(), &cfg).unwrap();
        assert_eq!(out.epochs.len(), 3);
        assert_eq!(out.history.iter().filter(|r| r.val_accuracy.is_some()).count(), 3);
        let accs: Vec<f64> = out.epochs.iter().map(|e| e.val_threshold_accuracy).collect();
        assert!(accs.contains(&1.0), "validation accuracies {accs:?}");
        assert_eq!(out.epochs[out.best_epoch - 1].val_threshold_accuracy, 1.0);
    }

    #[test]
    fn seeded_training_is_reproducible() {
        let data = separable_pairs(40, 16, 3);
        let cfg = TrainConfig { batch_size: 8, epochs: 2, seed: 5, ..Default::default() };
        let a = train(&data, &small_arch(), &cfg).unwrap();
        let b = train(&data, &small_arch(), &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn single_class_dataset_is_rejected() {
        let data: Vec<PatchPair> = separable_pairs(10, 16, 3).into_iter().filter(|p| p.label == Some(Label::Changed)).collect();
        assert!(matches!(train(&data, &small_arch(), &TrainConfig::default()), Err(Error::Data(_))));
    }

    #[test]
    fn classify_thresholds_and_skips_invalid() {
        let p: NetworkParams<f32> = init_params(&small_arch(), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pair = pair_of(random_patch(16, &mut rng), random_patch(16, &mut rng), Label::Changed);
        let d = pair_distance(&p, &pair).unwrap();
        assert_eq!(classify(&p, &pair, d * 0.9).unwrap().0, Decision::Changed);
        assert_eq!(classify(&p, &pair, d * 1.1).unwrap().0, Decision::Unchanged);
        let swapped = PatchPair { a: pair.b.clone(), b: pair.a.clone(), ..pair.clone() };
        assert_eq!(classify(&p, &swapped, d * 0.9).unwrap(), classify(&p, &pair, d * 0.9).unwrap());
        pair.valid = false;
        assert_eq!(classify(&p, &pair, 0.5).unwrap(), (Decision::Invalid, None));
    }

    #[test]
    fn model_and_history_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let arch = Architecture::default();
        let p: NetworkParams<f32> = init_params(&arch, 4).unwrap();
        let path = dir.path().join("m.scnn");
        save_model(&path, &p).unwrap();
        assert_eq!(load_model(&path, 100).unwrap(), p);
        assert!(matches!(load_model(&path, 64), Err(Error::Model(_))));
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_model(&path, 100), Err(Error::Model(_))));

        let h = vec![
            HistoryRow { iteration: 1, epoch: 1, loss: 0.5, val_accuracy: None },
            HistoryRow { iteration: 2, epoch: 1, loss: 0.25, val_accuracy: Some(0.75) },
        ];
        let hp = dir.path().join("h.csv");
        save_history(&hp, &h).unwrap();
        assert!(fs::read_to_string(&hp).unwrap().starts_with(HISTORY_HEADER));
        assert_eq!(load_history(&hp).unwrap(), h);
    }
}
