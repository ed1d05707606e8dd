//! Actor-critic network: conv1d LiDAR encoder with a keypoint tail, state
//! encoder, fusion block and three heads, with hand-written backward pass.
//!
//! Activations are stored feature-major, `[features, batch]` row-major, and
//! conv feature maps as `[channels, batch * length]`.

use std::fmt::Debug;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{LearnError, Result};

pub const N_FRAMES: usize = 4;
pub const LIDAR_LEN: usize = 512;
pub const STATE_DIM: usize = 16;
pub const EMBED: usize = 128;
pub const ACTION_DIM: usize = 2;
const CONV_CHANNELS: [usize; 6] = [N_FRAMES, 32, 64, 64, 128, 128];
const KERNEL: usize = 3;
const LN_EPS: f64 = 1e-5;
pub const POLICY_HIDDEN: usize = 256;
pub const CRITIC_HIDDEN: usize = 512;

/// Floating-point type the network runs in.
pub trait Scalar: num_traits::Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    const DTYPE: &'static str;
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;

    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n` views.
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

    fn to_le(data: &[Self], out: &mut Vec<u8>);
    fn from_le(bytes: &[u8]) -> Vec<Self>;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
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
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn to_le(data: &[Self], out: &mut Vec<u8>) {
        data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    fn from_le(bytes: &[u8]) -> Vec<Self> {
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
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
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
    fn to_le(data: &[Self], out: &mut Vec<u8>) {
        data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    fn from_le(bytes: &[u8]) -> Vec<Self> {
        bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    }
}

/// `c = op(a) · op(b)` (or `+=` with `acc`), all row-major. `op(a)` is
/// `m×k`; with `ta` the stored matrix is `k×m`. Same for `b`.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], ta: bool, b: &[T], tb: bool, c: &mut [T], acc: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if acc { T::one() } else { T::zero() };
    // SAFETY: the assertion above bounds every accessed element.
    unsafe { T::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1) }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn silu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// In place: `g *= silu'(pre)`.
fn silu_backward<T: Scalar>(pre: &[T], g: &mut [T]) {
    for (g, &x) in g.iter_mut().zip(pre) {
        let s = sigmoid(x);
        *g = *g * s * (T::one() + x * (T::one() - s));
    }
}

/// What follows the last convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderTail {
    #[default]
    SpatialSoftmax,
    AvgPool,
    Flatten,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub tail: EncoderTail,
    pub layer_norm: bool,
    pub keypoints: usize,
    pub temperature: f64,
    pub init_log_std: f64,
    pub policy_gain: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            tail: EncoderTail::SpatialSoftmax,
            layer_norm: true,
            keypoints: 4,
            temperature: 1.0,
            init_log_std: -1.0,
            policy_gain: 0.01,
        }
    }
}

impl NetworkConfig {
    fn conv_out_len(&self) -> usize {
        LIDAR_LEN >> 5
    }

    fn tail_features(&self) -> usize {
        let c = CONV_CHANNELS[5];
        match self.tail {
            EncoderTail::SpatialSoftmax | EncoderTail::AvgPool => c * self.keypoints,
            EncoderTail::Flatten => c * self.conv_out_len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.keypoints == 0 || self.conv_out_len() % self.keypoints != 0 {
            return Err(LearnError::Shape(format!(
                "conv output length {} is not divisible by {} keypoints",
                self.conv_out_len(),
                self.keypoints
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(LearnError::Config("spatial softmax temperature must be positive".into()));
        }
        Ok(())
    }
}

/// One parameterised layer: a weight tensor and a bias (or LayerNorm
/// scale and shift) stored contiguously in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub weight_shape: Vec<usize>,
    pub bias_len: usize,
    pub offset: usize,
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        self.weight_shape.iter().product()
    }

    pub fn count(&self) -> usize {
        self.weight_len() + self.bias_len
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.weight_len()
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let s = self.offset + self.weight_len();
        s..s + self.bias_len
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum L {
    Conv(usize),
    LidarLinear,
    State1,
    State2,
    Norm,
    Fusion,
    Critic1,
    Critic2,
    Policy1,
    Policy2,
    LogStd1,
    LogStd2,
}

fn build_layout(cfg: &NetworkConfig) -> (Vec<LayerSpec>, Vec<L>) {
    let mut specs = Vec::new();
    let mut kinds = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>, bias: usize, kind: L| {
        let spec = LayerSpec { name, weight_shape: shape, bias_len: bias, offset };
        offset += spec.count();
        specs.push(spec);
        kinds.push(kind);
    };
    for i in 0..5 {
        let (cin, cout) = (CONV_CHANNELS[i], CONV_CHANNELS[i + 1]);
        push(format!("lidar_encoder.conv{}", i + 1), vec![cout, cin, KERNEL], cout, L::Conv(i));
    }
    push("lidar_encoder.linear".into(), vec![EMBED, cfg.tail_features()], EMBED, L::LidarLinear);
    push("state_encoder.linear1".into(), vec![EMBED, STATE_DIM], EMBED, L::State1);
    push("state_encoder.linear2".into(), vec![EMBED, EMBED], EMBED, L::State2);
    if cfg.layer_norm {
        push("fusion_block.layer_norm".into(), vec![2 * EMBED], 2 * EMBED, L::Norm);
    }
    push("fusion_block.linear".into(), vec![EMBED, 2 * EMBED], EMBED, L::Fusion);
    push("critic_head.linear1".into(), vec![CRITIC_HIDDEN, EMBED], CRITIC_HIDDEN, L::Critic1);
    push("critic_head.linear2".into(), vec![1, CRITIC_HIDDEN], 1, L::Critic2);
    push("policy_head.linear1".into(), vec![POLICY_HIDDEN, EMBED], POLICY_HIDDEN, L::Policy1);
    push("policy_head.linear2".into(), vec![ACTION_DIM, POLICY_HIDDEN], ACTION_DIM, L::Policy2);
    push("log_std_head.linear1".into(), vec![POLICY_HIDDEN, EMBED], POLICY_HIDDEN, L::LogStd1);
    push("log_std_head.linear2".into(), vec![ACTION_DIM, POLICY_HIDDEN], ACTION_DIM, L::LogStd2);
    (specs, kinds)
}

/// Network inputs, sample-major: `lidar` is `batch × (4·512)` with frames
/// oldest first, `state` is `batch × 16`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub lidar: Vec<T>,
    pub state: Vec<T>,
    pub size: usize,
}

impl<T: Scalar> Batch<T> {
    pub fn new(lidar: Vec<T>, state: Vec<T>) -> Result<Self> {
        let size = state.len() / STATE_DIM;
        if state.len() != size * STATE_DIM || lidar.len() != size * N_FRAMES * LIDAR_LEN {
            return Err(LearnError::Shape(format!(
                "batch needs lidar {}×{} and state {}×{}, got {} and {} values",
                size,
                N_FRAMES * LIDAR_LEN,
                size,
                STATE_DIM,
                lidar.len(),
                state.len()
            )));
        }
        Ok(Self { lidar, state, size })
    }

    /// Builds a batch from raw `4 × 1081` range frames per sample.
    pub fn from_raw(raw_frames: &[Vec<Vec<f64>>], state: &[[f64; STATE_DIM]], max_range: f64) -> Result<Self> {
        let mut lidar = Vec::with_capacity(raw_frames.len() * N_FRAMES * LIDAR_LEN);
        for frames in raw_frames {
            if frames.len() != N_FRAMES {
                return Err(LearnError::Shape(format!("expected {N_FRAMES} frames, got {}", frames.len())));
            }
            for f in frames {
                let p = arpo_core::env::preprocess_lidar(f, max_range)?;
                lidar.extend(p.into_iter().map(T::of));
            }
        }
        let state = state.iter().flat_map(|s| s.iter().map(|&v| T::of(v))).collect();
        Self::new(lidar, state)
    }
}

/// Per-sample network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Output<T> {
    /// `[2, batch]`.
    pub residual_mu: Vec<T>,
    /// `[2, batch]`.
    pub log_sigma: Vec<T>,
    /// `[batch]`.
    pub value: Vec<T>,
}

impl<T: Scalar> Output<T> {
    pub fn mu(&self, i: usize, batch: usize) -> [f64; 2] {
        [self.residual_mu[i].f64(), self.residual_mu[batch + i].f64()]
    }

    pub fn log_sigma(&self, i: usize, batch: usize) -> [f64; 2] {
        [self.log_sigma[i].f64(), self.log_sigma[batch + i].f64()]
    }
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub batch: usize,
    pub out: Output<T>,
    x0: Vec<T>,
    state_in: Vec<T>,
    cols: Vec<Vec<T>>,
    conv_pre: Vec<Vec<T>>,
    /// Softmax weights over the last feature map (spatial softmax tail).
    probs: Vec<T>,
    tail: Vec<T>,
    s_pre: Vec<T>,
    s_post: Vec<T>,
    concat: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    normed: Vec<T>,
    fused: Vec<T>,
    heads_pre: [Vec<T>; 3],
    heads_post: [Vec<T>; 3],
}

/// Gradients of a scalar objective with respect to the three outputs, in
/// the same layout as [`Output`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad<T> {
    pub residual_mu: Vec<T>,
    pub log_sigma: Vec<T>,
    pub value: Vec<T>,
}

impl<T: Scalar> OutputGrad<T> {
    pub fn zeros(batch: usize) -> Self {
        Self {
            residual_mu: vec![T::zero(); ACTION_DIM * batch],
            log_sigma: vec![T::zero(); ACTION_DIM * batch],
            value: vec![T::zero(); batch],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub cfg: NetworkConfig,
    pub params: Vec<T>,
    layers: Vec<LayerSpec>,
    kinds: Vec<L>,
}

fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Vec<f64> {
    let (r, c) = if rows < cols { (cols, rows) } else { (rows, cols) };
    let g = DMatrix::<f64>::from_fn(r, c, |_, _| rng.sample(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let rmat = qr.r();
    for j in 0..c {
        if rmat[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let q = if rows < cols { q.transpose() } else { q };
    (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).map(|(i, j)| gain * q[(i, j)]).collect()
}

impl<T: Scalar> Network<T> {
    /// Orthogonal initialisation: gain √2 for hidden layers, `policy_gain`
    /// on the residual and log-std outputs, 1 on the critic output, zero
    /// biases except the log-std output bias.
    pub fn new<R: Rng + ?Sized>(cfg: NetworkConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (layers, kinds) = build_layout(&cfg);
        let total = layers.iter().map(LayerSpec::count).sum();
        let mut params = vec![T::zero(); total];
        for (spec, kind) in layers.iter().zip(&kinds) {
            if *kind == L::Norm {
                params[spec.weight_range()].iter_mut().for_each(|v| *v = T::one());
                continue;
            }
            let rows = spec.weight_shape[0];
            let cols = spec.weight_len() / rows;
            let gain = match kind {
                L::Policy2 | L::LogStd2 => cfg.policy_gain,
                L::Critic2 => 1.0,
                _ => std::f64::consts::SQRT_2,
            };
            for (p, w) in params[spec.weight_range()].iter_mut().zip(orthogonal(rows, cols, gain, rng)) {
                *p = T::of(w);
            }
            if *kind == L::LogStd2 {
                params[spec.bias_range()].iter_mut().for_each(|v| *v = T::of(cfg.init_log_std));
            }
        }
        Ok(Self { cfg, params, layers, kinds })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    fn spec(&self, kind: L) -> &LayerSpec {
        let i = self.kinds.iter().position(|k| *k == kind).expect("layer present in layout");
        &self.layers[i]
    }

    fn wb(&self, kind: L) -> (&[T], &[T]) {
        let s = self.spec(kind);
        (&self.params[s.weight_range()], &self.params[s.bias_range()])
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            cfg: self.cfg,
            params: self.params.iter().map(|v| U::of(v.f64())).collect(),
            layers: self.layers.clone(),
            kinds: self.kinds.clone(),
        }
    }

    fn linear(&self, kind: L, x: &[T], batch: usize) -> Vec<T> {
        let (w, b) = self.wb(kind);
        let out = b.len();
        let inp = w.len() / out;
        let mut y = vec![T::zero(); out * batch];
        for (row, &bv) in y.chunks_exact_mut(batch).zip(b) {
            row.iter_mut().for_each(|v| *v = bv);
        }
        gemm(out, inp, batch, w, false, x, false, &mut y, true);
        y
    }

    /// Accumulates weight and bias gradients and returns `dx` if requested.
    fn linear_backward(&self, kind: L, x: &[T], dy: &[T], batch: usize, grads: &mut [T], want_dx: bool) -> Vec<T> {
        let spec = self.spec(kind);
        let out = spec.bias_len;
        let inp = spec.weight_len() / out;
        gemm(out, batch, inp, dy, false, x, true, &mut grads[spec.weight_range()], true);
        for (g, row) in grads[spec.bias_range()].iter_mut().zip(dy.chunks_exact(batch)) {
            *g = *g + row.iter().copied().sum();
        }
        if !want_dx {
            return Vec::new();
        }
        let mut dx = vec![T::zero(); inp * batch];
        gemm(inp, out, batch, &self.params[spec.weight_range()], true, dy, false, &mut dx, false);
        dx
    }

    fn conv(&self, i: usize, x: &[T], batch: usize) -> (Vec<T>, Vec<T>) {
        let (cin, cout) = (CONV_CHANNELS[i], CONV_CHANNELS[i + 1]);
        let lin = LIDAR_LEN >> i;
        let lout = lin / 2;
        let n = batch * lout;
        let mut cols = vec![T::zero(); cin * KERNEL * n];
        for ci in 0..cin {
            let src = &x[ci * batch * lin..(ci + 1) * batch * lin];
            for k in 0..KERNEL {
                let row = &mut cols[(ci * KERNEL + k) * n..(ci * KERNEL + k + 1) * n];
                for b in 0..batch {
                    let s = &src[b * lin..(b + 1) * lin];
                    let d = &mut row[b * lout..(b + 1) * lout];
                    for (lo, v) in d.iter_mut().enumerate() {
                        let idx = 2 * lo + k;
                        if idx >= 1 && idx - 1 < lin {
                            *v = s[idx - 1];
                        }
                    }
                }
            }
        }
        let (w, bias) = self.wb(L::Conv(i));
        let mut y = vec![T::zero(); cout * n];
        for (row, &bv) in y.chunks_exact_mut(n).zip(bias) {
            row.iter_mut().for_each(|v| *v = bv);
        }
        gemm(cout, cin * KERNEL, n, w, false, &cols, false, &mut y, true);
        (cols, y)
    }

    fn conv_backward(&self, i: usize, cols: &[T], dy: &[T], batch: usize, grads: &mut [T]) -> Option<Vec<T>> {
        let (cin, cout) = (CONV_CHANNELS[i], CONV_CHANNELS[i + 1]);
        let lin = LIDAR_LEN >> i;
        let lout = lin / 2;
        let n = batch * lout;
        let spec = self.spec(L::Conv(i));
        gemm(cout, n, cin * KERNEL, dy, false, cols, true, &mut grads[spec.weight_range()], true);
        for (g, row) in grads[spec.bias_range()].iter_mut().zip(dy.chunks_exact(n)) {
            *g = *g + row.iter().copied().sum();
        }
        if i == 0 {
            return None;
        }
        let mut dcols = vec![T::zero(); cin * KERNEL * n];
        gemm(cin * KERNEL, cout, n, &self.params[spec.weight_range()], true, dy, false, &mut dcols, false);
        let mut dx = vec![T::zero(); cin * batch * lin];
        for ci in 0..cin {
            let dst = &mut dx[ci * batch * lin..(ci + 1) * batch * lin];
            for k in 0..KERNEL {
                let row = &dcols[(ci * KERNEL + k) * n..(ci * KERNEL + k + 1) * n];
                for b in 0..batch {
                    let d = &mut dst[b * lin..(b + 1) * lin];
                    for (lo, &g) in row[b * lout..(b + 1) * lout].iter().enumerate() {
                        let idx = 2 * lo + k;
                        if idx >= 1 && idx - 1 < lin {
                            d[idx - 1] = d[idx - 1] + g;
                        }
                    }
                }
            }
        }
        Some(dx)
    }

    /// Keypoint grid of one segment, linearly spaced in [-1, 1].
    fn grid(seg: usize) -> Vec<f64> {
        if seg == 1 {
            return vec![0.0];
        }
        (0..seg).map(|i| -1.0 + 2.0 * i as f64 / (seg - 1) as f64).collect()
    }

    /// Returns tail features `[F, batch]` and the softmax weights.
    fn tail(&self, fm: &[T], batch: usize) -> (Vec<T>, Vec<T>) {
        let c = CONV_CHANNELS[5];
        let len = self.cfg.conv_out_len();
        let kp = self.cfg.keypoints;
        let seg = len / kp;
        match self.cfg.tail {
            EncoderTail::Flatten => {
                let mut out = vec![T::zero(); c * len * batch];
                for ch in 0..c {
                    for b in 0..batch {
                        for l in 0..len {
                            out[(ch * len + l) * batch + b] = fm[ch * batch * len + b * len + l];
                        }
                    }
                }
                (out, Vec::new())
            }
            EncoderTail::AvgPool => {
                let mut out = vec![T::zero(); c * kp * batch];
                let inv = T::of(1.0 / seg as f64);
                for ch in 0..c {
                    for b in 0..batch {
                        for k in 0..kp {
                            let s = &fm[ch * batch * len + b * len + k * seg..][..seg];
                            out[(ch * kp + k) * batch + b] = s.iter().copied().sum::<T>() * inv;
                        }
                    }
                }
                (out, Vec::new())
            }
            EncoderTail::SpatialSoftmax => {
                let xi: Vec<T> = Self::grid(seg).into_iter().map(T::of).collect();
                let inv_t = T::of(1.0 / self.cfg.temperature);
                let mut out = vec![T::zero(); c * kp * batch];
                let mut probs = vec![T::zero(); fm.len()];
                for ch in 0..c {
                    for b in 0..batch {
                        for k in 0..kp {
                            let base = ch * batch * len + b * len + k * seg;
                            let s = &fm[base..base + seg];
                            let m = s.iter().copied().fold(T::neg_infinity(), T::max);
                            let p = &mut probs[base..base + seg];
                            let mut z = T::zero();
                            for (pi, &v) in p.iter_mut().zip(s) {
                                *pi = ((v - m) * inv_t).exp();
                                z = z + *pi;
                            }
                            let mut e = T::zero();
                            for (pi, &x) in p.iter_mut().zip(&xi) {
                                *pi = *pi / z;
                                e = e + *pi * x;
                            }
                            out[(ch * kp + k) * batch + b] = e;
                        }
                    }
                }
                (out, probs)
            }
        }
    }

    fn tail_backward(&self, fwd: &Forward<T>, dtail: &[T], batch: usize) -> Vec<T> {
        let c = CONV_CHANNELS[5];
        let len = self.cfg.conv_out_len();
        let kp = self.cfg.keypoints;
        let seg = len / kp;
        let mut dfm = vec![T::zero(); c * batch * len];
        match self.cfg.tail {
            EncoderTail::Flatten => {
                for ch in 0..c {
                    for b in 0..batch {
                        for l in 0..len {
                            dfm[ch * batch * len + b * len + l] = dtail[(ch * len + l) * batch + b];
                        }
                    }
                }
            }
            EncoderTail::AvgPool => {
                let inv = T::of(1.0 / seg as f64);
                for ch in 0..c {
                    for b in 0..batch {
                        for k in 0..kp {
                            let g = dtail[(ch * kp + k) * batch + b] * inv;
                            dfm[ch * batch * len + b * len + k * seg..][..seg].iter_mut().for_each(|v| *v = g);
                        }
                    }
                }
            }
            EncoderTail::SpatialSoftmax => {
                let xi: Vec<T> = Self::grid(seg).into_iter().map(T::of).collect();
                let inv_t = T::of(1.0 / self.cfg.temperature);
                for ch in 0..c {
                    for b in 0..batch {
                        for k in 0..kp {
                            let idx = (ch * kp + k) * batch + b;
                            let g = dtail[idx];
                            let e = fwd.tail[idx];
                            let base = ch * batch * len + b * len + k * seg;
                            for j in 0..seg {
                                dfm[base + j] = fwd.probs[base + j] * (xi[j] - e) * g * inv_t;
                            }
                        }
                    }
                }
            }
        }
        dfm
    }

    pub fn forward(&self, input: &Batch<T>) -> Forward<T> {
        let batch = input.size;
        // [4, batch * 512].
        let mut x0 = vec![T::zero(); N_FRAMES * batch * LIDAR_LEN];
        for b in 0..batch {
            for f in 0..N_FRAMES {
                let src = &input.lidar[(b * N_FRAMES + f) * LIDAR_LEN..][..LIDAR_LEN];
                x0[f * batch * LIDAR_LEN + b * LIDAR_LEN..][..LIDAR_LEN].copy_from_slice(src);
            }
        }
        let mut cols = Vec::with_capacity(5);
        let mut conv_pre = Vec::with_capacity(5);
        let mut conv_post = Vec::with_capacity(4);
        for i in 0..5 {
            let x = if i == 0 { &x0 } else { &conv_post[i - 1] };
            let (c, pre) = self.conv(i, x, batch);
            cols.push(c);
            if i < 4 {
                conv_post.push(silu(&pre));
            }
            conv_pre.push(pre);
        }
        let (tail, probs) = self.tail(&conv_pre[4], batch);
        let lidar_emb = self.linear(L::LidarLinear, &tail, batch);

        let mut state_in = vec![T::zero(); STATE_DIM * batch];
        for b in 0..batch {
            for j in 0..STATE_DIM {
                state_in[j * batch + b] = input.state[b * STATE_DIM + j];
            }
        }
        let s_pre = self.linear(L::State1, &state_in, batch);
        let s_post = silu(&s_pre);
        let state_emb = self.linear(L::State2, &s_post, batch);

        let mut concat = lidar_emb;
        concat.extend_from_slice(&state_emb);
        let width = 2 * EMBED;
        let (xhat, inv_std, normed) = if self.cfg.layer_norm {
            let (gamma, beta) = self.wb(L::Norm);
            let mut xhat = vec![T::zero(); width * batch];
            let mut normed = vec![T::zero(); width * batch];
            let mut inv_std = vec![T::zero(); batch];
            let n = T::of(width as f64);
            for b in 0..batch {
                let mean = (0..width).map(|j| concat[j * batch + b]).sum::<T>() / n;
                let var = (0..width).map(|j| (concat[j * batch + b] - mean).powi(2)).sum::<T>() / n;
                let is = T::one() / (var + T::of(LN_EPS)).sqrt();
                inv_std[b] = is;
                for j in 0..width {
                    let h = (concat[j * batch + b] - mean) * is;
                    xhat[j * batch + b] = h;
                    normed[j * batch + b] = h * gamma[j] + beta[j];
                }
            }
            (xhat, inv_std, normed)
        } else {
            (Vec::new(), Vec::new(), concat.clone())
        };
        let fused = self.linear(L::Fusion, &normed, batch);

        let heads = [(L::Policy1, L::Policy2), (L::LogStd1, L::LogStd2), (L::Critic1, L::Critic2)];
        let mut heads_pre: [Vec<T>; 3] = Default::default();
        let mut heads_post: [Vec<T>; 3] = Default::default();
        let mut outs: [Vec<T>; 3] = Default::default();
        for (h, (l1, l2)) in heads.into_iter().enumerate() {
            heads_pre[h] = self.linear(l1, &fused, batch);
            heads_post[h] = silu(&heads_pre[h]);
            outs[h] = self.linear(l2, &heads_post[h], batch);
        }
        let [residual_mu, log_sigma, value] = outs;
        Forward {
            batch,
            out: Output { residual_mu, log_sigma, value },
            x0,
            state_in,
            cols,
            conv_pre,
            probs,
            tail,
            s_pre,
            s_post,
            concat,
            xhat,
            inv_std,
            normed,
            fused,
            heads_pre,
            heads_post,
        }
    }

    /// Accumulates the parameter gradient of `Σ dL/d(output) · output` into
    /// `grads`.
    pub fn backward(&self, fwd: &Forward<T>, dout: &OutputGrad<T>, grads: &mut [T]) -> Result<()> {
        let batch = fwd.batch;
        if grads.len() != self.params.len()
            || dout.residual_mu.len() != ACTION_DIM * batch
            || dout.log_sigma.len() != ACTION_DIM * batch
            || dout.value.len() != batch
        {
            return Err(LearnError::Shape("gradient buffers do not match the forward pass".into()));
        }
        let heads = [(L::Policy1, L::Policy2), (L::LogStd1, L::LogStd2), (L::Critic1, L::Critic2)];
        let douts = [&dout.residual_mu, &dout.log_sigma, &dout.value];
        let mut dfused = vec![T::zero(); EMBED * batch];
        for (h, (l1, l2)) in heads.into_iter().enumerate() {
            if douts[h].iter().all(|v| v.is_zero()) {
                continue;
            }
            let mut dh = self.linear_backward(l2, &fwd.heads_post[h], douts[h], batch, grads, true);
            silu_backward(&fwd.heads_pre[h], &mut dh);
            let dx = self.linear_backward(l1, &fwd.fused, &dh, batch, grads, true);
            dfused.iter_mut().zip(dx).for_each(|(a, b)| *a = *a + b);
        }
        let dnormed = self.linear_backward(L::Fusion, &fwd.normed, &dfused, batch, grads, true);
        let width = 2 * EMBED;
        let dconcat = if self.cfg.layer_norm {
            let spec = self.spec(L::Norm).clone();
            let gamma = &self.params[spec.weight_range()];
            let mut dgamma = vec![T::zero(); width];
            let mut dbeta = vec![T::zero(); width];
            let mut dx = vec![T::zero(); width * batch];
            let n = T::of(width as f64);
            for b in 0..batch {
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for j in 0..width {
                    let i = j * batch + b;
                    let g = dnormed[i];
                    dgamma[j] = dgamma[j] + g * fwd.xhat[i];
                    dbeta[j] = dbeta[j] + g;
                    let gx = g * gamma[j];
                    sum_g = sum_g + gx;
                    sum_gx = sum_gx + gx * fwd.xhat[i];
                }
                for j in 0..width {
                    let i = j * batch + b;
                    let gx = dnormed[i] * gamma[j];
                    dx[i] = fwd.inv_std[b] * (gx - sum_g / n - fwd.xhat[i] * sum_gx / n);
                }
            }
            for (g, d) in grads[spec.weight_range()].iter_mut().zip(dgamma) {
                *g = *g + d;
            }
            for (g, d) in grads[spec.bias_range()].iter_mut().zip(dbeta) {
                *g = *g + d;
            }
            dx
        } else {
            dnormed
        };
        let (dlidar, dstate) = dconcat.split_at(EMBED * batch);

        let mut ds = self.linear_backward(L::State2, &fwd.s_post, dstate, batch, grads, true);
        silu_backward(&fwd.s_pre, &mut ds);
        self.linear_backward(L::State1, &fwd.state_in, &ds, batch, grads, false);

        let dtail = self.linear_backward(L::LidarLinear, &fwd.tail, dlidar, batch, grads, true);
        let mut dy = self.tail_backward(fwd, &dtail, batch);
        for i in (0..5).rev() {
            if i < 4 {
                silu_backward(&fwd.conv_pre[i], &mut dy);
            }
            match self.conv_backward(i, &fwd.cols[i], &dy, batch, grads) {
                Some(dx) => dy = dx,
                None => break,
            }
        }
        let _ = &fwd.x0;
        Ok(())
    }

    /// Keypoints of the tail for inspection, `[C·K, batch]`.
    pub fn tail_features<'a>(&self, fwd: &'a Forward<T>) -> &'a [T] {
        &fwd.tail
    }

    /// Layer-norm input of a forward pass, `[256, batch]`.
    pub fn fusion_input<'a>(&self, fwd: &'a Forward<T>) -> &'a [T] {
        &fwd.concat
    }

    /// Normalized (pre scale/shift) fusion features, `[256, batch]`.
    pub fn normalized<'a>(&self, fwd: &'a Forward<T>) -> &'a [T] {
        &fwd.xhat
    }

    /// Shapes `[channels, length]` of the five conv outputs.
    pub fn conv_shapes(&self, fwd: &Forward<T>) -> Vec<[usize; 2]> {
        (0..5).map(|i| [CONV_CHANNELS[i + 1], fwd.conv_pre[i].len() / (CONV_CHANNELS[i + 1] * fwd.batch)]).collect()
    }
}

const MAGIC: &[u8; 8] = b"ARPOCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    network: NetworkConfig,
    tensors: Vec<TensorHeader>,
    meta: serde_json::Value,
}

/// Checkpoint file: magic, little-endian header length, JSON header, then
/// the tensors' little-endian data in header order. Besides the network
/// weights (`<layer>.weight`, `<layer>.bias`) it may carry extra named
/// arrays such as optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub network: Network<T>,
    pub extra: Vec<(String, Vec<T>)>,
    pub meta: serde_json::Value,
}

fn tensor_names(spec: &LayerSpec) -> [(String, Vec<usize>, std::ops::Range<usize>); 2] {
    [
        (format!("{}.weight", spec.name), spec.weight_shape.clone(), spec.weight_range()),
        (format!("{}.bias", spec.name), vec![spec.bias_len], spec.bias_range()),
    ]
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let net = &self.network;
        let mut tensors = Vec::new();
        let mut data = Vec::with_capacity((net.params.len() + self.extra.iter().map(|e| e.1.len()).sum::<usize>()) * 8);
        for spec in net.layers() {
            for (name, shape, range) in tensor_names(spec) {
                tensors.push(TensorHeader { name, shape, dtype: T::DTYPE.into() });
                T::to_le(&net.params[range], &mut data);
            }
        }
        for (name, v) in &self.extra {
            tensors.push(TensorHeader { name: name.clone(), shape: vec![v.len()], dtype: T::DTYPE.into() });
            T::to_le(v, &mut data);
        }
        let header = Header { format_version: FORMAT_VERSION, network: net.cfg, tensors, meta: self.meta.clone() };
        let json = serde_json::to_vec(&header).map_err(|e| LearnError::Checkpoint(e.to_string()))?;
        let io = |e: std::io::Error| LearnError::Io { path: path.display().to_string(), source: e };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp).map_err(io)?);
        f.write_all(MAGIC).map_err(io)?;
        f.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        f.write_all(&json).map_err(io)?;
        f.write_all(&data).map_err(io)?;
        f.into_inner().map_err(|e| io(e.into_error()))?.sync_all().map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e: std::io::Error| LearnError::Io { path: path.display().to_string(), source: e };
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
        let bad = |m: String| LearnError::Checkpoint(format!("{}: {m}", path.display()));
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        f.read_exact(&mut len).map_err(io)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        f.read_exact(&mut json).map_err(io)?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("bad header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(bad(format!("format version {} (expected {FORMAT_VERSION})", header.format_version)));
        }
        let mut network = Network::<T>::new(header.network, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        let mut expected: Vec<(String, Vec<usize>, std::ops::Range<usize>)> =
            network.layers().iter().flat_map(tensor_names).collect();
        expected.reverse();
        let mut extra = Vec::new();
        let width = std::mem::size_of::<T>();
        for t in header.tensors {
            if t.dtype != T::DTYPE {
                return Err(bad(format!("tensor {} has dtype {}, expected {}", t.name, t.dtype, T::DTYPE)));
            }
            let n: usize = t.shape.iter().product();
            let mut bytes = vec![0u8; n * width];
            f.read_exact(&mut bytes).map_err(io)?;
            let values = T::from_le(&bytes);
            match expected.last() {
                Some((name, shape, range)) if *name == t.name => {
                    if *shape != t.shape {
                        return Err(bad(format!("layer {} has shape {:?}, expected {:?}", t.name, t.shape, shape)));
                    }
                    network.params[range.clone()].copy_from_slice(&values);
                    expected.pop();
                }
                Some((name, _, _)) if !t.name.contains(':') && network.layers().iter().any(|l| t.name.starts_with(&l.name)) => {
                    return Err(bad(format!("layer {} out of order, expected {name}", t.name)));
                }
                _ => extra.push((t.name, values)),
            }
        }
        if let Some((name, _, _)) = expected.last() {
            return Err(bad(format!("missing layer {name}")));
        }
        Ok(Self { network, extra, meta: header.meta })
    }
}
