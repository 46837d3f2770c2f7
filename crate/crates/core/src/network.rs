//! The conditioned generator MLP.
//!
//! Points are positionally encoded and concatenated with the shape code to
//! feed a softplus trunk producing the feature vector `V`. A linear head
//! reads the signed distance from `V`; a two-layer head reads the color from
//! `V`, the encoded view direction and the color code.
//!
//! Parameters live in one flat `f64` buffer. Layer `l` with shape
//! `rows x cols` owns `rows * cols` row-major weights followed by `rows`
//! biases. Layers are ordered: trunk layers, distance head, color hidden
//! layer, color output layer.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::tape::sigmoid;
use crate::autodiff::{round_to_f32, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::rng::{stream, Rng};
use crate::sdf::SdfField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Width of the trunk (dimension of `V`).
    pub hidden: usize,
    pub trunk_layers: usize,
    pub color_hidden: usize,
    /// Frequencies for point encoding.
    pub pe_x: usize,
    /// Frequencies for direction encoding.
    pub pe_d: usize,
    pub z_shape: usize,
    pub z_color: usize,
    /// Sharpness of the trunk's softplus activations.
    pub softplus_beta: f64,
    /// Radius of the sphere the untrained network approximates.
    pub init_radius: f64,
    /// Initial standard deviation of the shape code's contribution to each
    /// first-layer unit (for a standard-normal code).
    pub init_code_scale: f64,
    /// Same, for the sin/cos part of the point encoding.
    pub init_encoding_scale: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            trunk_layers: 4,
            color_hidden: 128,
            pe_x: 10,
            pe_d: 4,
            z_shape: 128,
            z_color: 128,
            softplus_beta: 100.0,
            init_radius: 0.5,
            init_code_scale: 0.05,
            init_encoding_scale: 0.0,
        }
    }
}

impl NetConfig {
    /// A narrow configuration for tests and quick experiments.
    pub fn small() -> Self {
        Self {
            hidden: 32,
            trunk_layers: 3,
            color_hidden: 16,
            pe_x: 4,
            pe_d: 2,
            z_shape: 16,
            z_color: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("network: {m}")));
        if self.hidden == 0 || self.trunk_layers == 0 || self.color_hidden == 0 {
            return bad("layer sizes must be positive");
        }
        if !(self.softplus_beta > 0.0 && self.softplus_beta.is_finite()) {
            return bad("softplus_beta must be positive");
        }
        if !(self.init_radius > 0.0) {
            return bad("init_radius must be positive");
        }
        if !(self.init_code_scale >= 0.0 && self.init_encoding_scale >= 0.0) {
            return bad("init scales must be non-negative");
        }
        Ok(())
    }

    pub fn enc_x(&self) -> usize {
        encoded_dim(self.pe_x)
    }

    pub fn enc_d(&self) -> usize {
        encoded_dim(self.pe_d)
    }

    /// `(rows, cols)` of every layer in parameter order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let h = self.hidden;
        let mut dims = vec![(h, self.enc_x() + self.z_shape)];
        dims.extend(std::iter::repeat_n((h, h), self.trunk_layers - 1));
        dims.push((1, h));
        dims.push((self.color_hidden, h + self.enc_d() + self.z_color));
        dims.push((3, self.color_hidden));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(r, c)| r * (c + 1)).sum()
    }
}

pub fn encoded_dim(l: usize) -> usize {
    3 + 6 * l
}

/// `(p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p))`.
pub fn encode(p: Vec3, l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_dim(l));
    out.extend_from_slice(&p.to_array());
    for k in 0..l {
        let f = (1u64 << k) as f64 * PI;
        out.extend(p.to_array().iter().map(|v| (f * v).sin()));
        out.extend(p.to_array().iter().map(|v| (f * v).cos()));
    }
    out
}

/// Encodes a batch as the columns of an `encoded_dim(l) x n` tensor.
fn encode_batch(points: &[Vec3], l: usize) -> Tensor {
    let n = points.len();
    let mut t = Tensor::zeros(encoded_dim(l), n);
    for (j, p) in points.iter().enumerate() {
        for (i, v) in encode(*p, l).into_iter().enumerate() {
            t.data[i * n + j] = v;
        }
    }
    t
}

/// Derivatives of the encoding with respect to x, y and z, as three column
/// blocks of an `encoded_dim(l) x 3n` tensor.
fn encode_jacobian(points: &[Vec3], l: usize) -> Tensor {
    let n = points.len();
    let cols = 3 * n;
    let mut t = Tensor::zeros(encoded_dim(l), cols);
    for (j, p) in points.iter().enumerate() {
        let p = p.to_array();
        for axis in 0..3 {
            let col = axis * n + j;
            t.data[axis * cols + col] = 1.0;
            for k in 0..l {
                let f = (1u64 << k) as f64 * PI;
                let base = 3 + 6 * k;
                t.data[(base + axis) * cols + col] = f * (f * p[axis]).cos();
                t.data[(base + 3 + axis) * cols + col] = -f * (f * p[axis]).sin();
            }
        }
    }
    t
}

/// Latent code conditioning the geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCode(pub Vec<f64>);

/// Latent code conditioning the appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorCode(pub Vec<f64>);

fn normal_vec(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

impl ShapeCode {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn sample(dim: usize, rng: &mut Rng) -> Self {
        Self(normal_vec(dim, rng))
    }
}

impl ColorCode {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn sample(dim: usize, rng: &mut Rng) -> Self {
        Self(normal_vec(dim, rng))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorNetwork {
    config: NetConfig,
    dims: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Per-layer weight and bias leaves registered on a tape.
#[derive(Debug, Clone)]
pub struct TapedParams {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

/// Taped outputs of a generator forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TapedOutput {
    /// `1 x n` signed distances.
    pub sdf: Var,
    /// `3 x n` colors, when directions were supplied.
    pub color: Option<Var>,
}

impl GeneratorNetwork {
    /// Geometrically initialized network: before training the distance head
    /// approximates `|x| - init_radius`.
    ///
    /// The first layer's coordinate weights are unit directions spread evenly
    /// over the sphere (a randomly rotated Fibonacci lattice), so the summed
    /// rectified projections are nearly proportional to `|x|` in every
    /// direction. Deeper trunk layers start close to the identity and the
    /// distance head averages the units. Code and encoding inputs get small
    /// Gaussian weights whose contribution to a first-layer unit has standard
    /// deviation `init_code_scale` (resp. `init_encoding_scale`).
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut net = Self::from_params(config.clone(), vec![0.0; config.param_count()])?;
        let mut rng = stream(seed, &[0x6e6e_6574]);
        let c = &config;
        let (h, ex) = (c.hidden, c.enc_x());
        let rot = random_rotation(&mut rng);
        let enc_std = if c.pe_x > 0 {
            c.init_encoding_scale / ((ex - 3) as f64).sqrt()
        } else {
            0.0
        };
        let code_std = if c.z_shape > 0 {
            c.init_code_scale / (c.z_shape as f64).sqrt()
        } else {
            0.0
        };
        let cols0 = net.dims[0].1;
        let w0 = net.weight_mut(0);
        for r in 0..h {
            let u = fibonacci_direction(r, h);
            let u = [rot[0].dot(u), rot[1].dot(u), rot[2].dot(u)];
            w0[r * cols0..r * cols0 + 3].copy_from_slice(&u);
            for col in 3..cols0 {
                let std = if col < ex { enc_std } else { code_std };
                let x: f64 = StandardNormal.sample(&mut rng);
                w0[r * cols0 + col] = std * x;
            }
        }
        let jitter = Normal::new(0.0, 0.01 / (h as f64).sqrt()).expect("finite std");
        for l in 1..c.trunk_layers {
            let w = net.weight_mut(l);
            for r in 0..h {
                for col in 0..h {
                    let x = jitter.sample(&mut rng);
                    w[r * h + col] = x + if r == col { 1.0 } else { 0.0 };
                }
            }
        }
        // A rectified projection onto a uniform direction averages |x| / 4.
        let head = c.trunk_layers;
        for w in net.weight_mut(head) {
            *w = 4.0 / h as f64;
        }
        net.bias_mut(head)[0] = -c.init_radius;
        for l in [head + 1, head + 2] {
            let cols = net.dims[l].1;
            let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("finite std");
            for w in net.weight_mut(l) {
                *w = normal.sample(&mut rng);
            }
        }
        // Cancel the softplus offset so the zero level sits at init_radius.
        let shell: Vec<Vec3> = (0..64)
            .map(|i| fibonacci_direction(i, 64) * c.init_radius)
            .collect();
        let (s, _) = net.eval_sdf(&shell, &ShapeCode::zeros(c.z_shape));
        net.bias_mut(head)[0] -= s.iter().sum::<f64>() / s.len() as f64;
        round_to_f32(&mut net.params);
        Ok(net)
    }

    pub fn from_params(config: NetConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        if params.len() != config.param_count() {
            return Err(Error::InvalidConfig(format!(
                "network expects {} parameters, got {}",
                config.param_count(),
                params.len()
            )));
        }
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &(r, c) in &dims {
            offsets.push(off);
            off += r * (c + 1);
        }
        Ok(Self {
            config,
            dims,
            offsets,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layer_dims(&self) -> &[(usize, usize)] {
        &self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.params.len(), "parameter count mismatch");
        self.params.copy_from_slice(params);
    }

    fn weight(&self, l: usize) -> &[f64] {
        let (r, c) = self.dims[l];
        &self.params[self.offsets[l]..self.offsets[l] + r * c]
    }

    fn bias(&self, l: usize) -> &[f64] {
        let (r, c) = self.dims[l];
        let o = self.offsets[l] + r * c;
        &self.params[o..o + r]
    }

    fn weight_mut(&mut self, l: usize) -> &mut [f64] {
        let (r, c) = self.dims[l];
        let o = self.offsets[l];
        &mut self.params[o..o + r * c]
    }

    fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let (r, c) = self.dims[l];
        let o = self.offsets[l] + r * c;
        &mut self.params[o..o + r]
    }

    fn weight_tensor(&self, l: usize) -> Tensor {
        let (r, c) = self.dims[l];
        Tensor::from_vec(r, c, self.weight(l).to_vec())
    }

    /// Weights of layer `l` restricted to columns `start..start + len`.
    fn weight_cols(&self, l: usize, start: usize, len: usize) -> Tensor {
        let (r, c) = self.dims[l];
        let w = self.weight(l);
        let mut t = Tensor::zeros(r, len);
        for i in 0..r {
            t.data[i * len..(i + 1) * len].copy_from_slice(&w[i * c + start..i * c + start + len]);
        }
        t
    }

    /// `W[:, start..start+code.len()] * code + b`, the effective bias of a
    /// layer whose trailing inputs are a per-batch constant code.
    fn folded_bias(&self, l: usize, start: usize, code: &[f64]) -> Vec<f64> {
        let (r, c) = self.dims[l];
        let w = self.weight(l);
        let b = self.bias(l);
        (0..r)
            .map(|i| {
                let row = &w[i * c + start..i * c + start + code.len()];
                b[i] + row.iter().zip(code).map(|(a, z)| a * z).sum::<f64>()
            })
            .collect()
    }

    fn check_codes(&self, zs: Option<&ShapeCode>, zc: Option<&ColorCode>) {
        if let Some(z) = zs {
            assert_eq!(z.0.len(), self.config.z_shape, "shape code dimension mismatch");
        }
        if let Some(z) = zc {
            assert_eq!(z.0.len(), self.config.z_color, "color code dimension mismatch");
        }
    }

    /// Trunk pre-activations of every layer and the feature tensor `V`.
    fn trunk(&self, points: &[Vec3], zs: &ShapeCode) -> (Vec<Tensor>, Tensor) {
        self.check_codes(Some(zs), None);
        let c = &self.config;
        let n = points.len();
        let enc = encode_batch(points, c.pe_x);
        let ex = c.enc_x();
        let mut pres = Vec::with_capacity(c.trunk_layers);
        let mut h = Tensor::zeros(0, n);
        for l in 0..c.trunk_layers {
            let rows = self.dims[l].0;
            let mut pre = Tensor::zeros(rows, n);
            let bias = if l == 0 {
                gemm_into(&self.weight_cols(0, 0, ex), &enc, &mut pre);
                self.folded_bias(0, ex, &zs.0)
            } else {
                gemm_into(&self.weight_tensor(l), &h, &mut pre);
                self.bias(l).to_vec()
            };
            add_bias(&mut pre, &bias);
            h = pre.map(|x| crate::autodiff::tape::softplus(x, c.softplus_beta));
            pres.push(pre);
        }
        (pres, h)
    }

    /// Signed distances and feature vectors (`hidden x n`) for a batch.
    pub fn eval_sdf(&self, points: &[Vec3], zs: &ShapeCode) -> (Vec<f64>, Tensor) {
        let (_, v) = self.trunk(points, zs);
        let s = self.sdf_head(&v);
        (s, v)
    }

    fn sdf_head(&self, v: &Tensor) -> Vec<f64> {
        let head = self.config.trunk_layers;
        let mut s = Tensor::zeros(1, v.cols);
        gemm_into(&self.weight_tensor(head), v, &mut s);
        let b = self.bias(head)[0];
        s.data.iter().map(|x| x + b).collect()
    }

    /// Colors (`3 x n`) from features, unit view directions and a color code.
    pub fn eval_color(&self, v: &Tensor, dirs: &[Vec3], zc: &ColorCode) -> Tensor {
        self.check_codes(None, Some(zc));
        let c = &self.config;
        let n = dirs.len();
        assert_eq!(v.cols, n, "feature and direction counts differ");
        let l = c.trunk_layers + 1;
        let (h, ed) = (c.hidden, c.enc_d());
        let encd = encode_batch(dirs, c.pe_d);
        let mut pre = Tensor::zeros(c.color_hidden, n);
        gemm_into(&self.weight_cols(l, 0, h), v, &mut pre);
        crate::autodiff::tensor::gemm(&self.weight_cols(l, h, ed), false, &encd, false, &mut pre, 1.0);
        add_bias(&mut pre, &self.folded_bias(l, h + ed, &zc.0));
        let hid = pre.map(|x| x.max(0.0));
        let mut out = Tensor::zeros(3, n);
        gemm_into(&self.weight_tensor(l + 1), &hid, &mut out);
        add_bias(&mut out, self.bias(l + 1));
        out.map(sigmoid)
    }

    /// Spatial gradients of the signed distance, by a hand-written reverse
    /// sweep through the trunk.
    pub fn eval_sdf_grad(&self, points: &[Vec3], zs: &ShapeCode) -> Vec<Vec3> {
        let c = &self.config;
        let n = points.len();
        let (pres, _) = self.trunk(points, zs);
        let beta = c.softplus_beta;
        let head = c.trunk_layers;
        let ws = self.weight(head);
        // g = ds/dh for the last trunk layer, then pulled back through pre.
        let last = &pres[head - 1];
        let mut g = Tensor::zeros(last.rows, n);
        for r in 0..last.rows {
            for j in 0..n {
                g.data[r * n + j] = ws[r] * sigmoid(beta * last.data[r * n + j]);
            }
        }
        for l in (1..head).rev() {
            let mut prev = Tensor::zeros(self.dims[l].1, n);
            crate::autodiff::tensor::gemm(&self.weight_tensor(l), true, &g, false, &mut prev, 0.0);
            let pre = &pres[l - 1];
            for (x, p) in prev.data.iter_mut().zip(&pre.data) {
                *x *= sigmoid(beta * p);
            }
            g = prev;
        }
        let ex = c.enc_x();
        let mut genc = Tensor::zeros(ex, n);
        crate::autodiff::tensor::gemm(&self.weight_cols(0, 0, ex), true, &g, false, &mut genc, 0.0);
        points
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let p = p.to_array();
                let mut out = [0.0; 3];
                for (axis, o) in out.iter_mut().enumerate() {
                    *o = genc.data[axis * n + j];
                    for k in 0..c.pe_x {
                        let f = (1u64 << k) as f64 * PI;
                        let base = 3 + 6 * k;
                        *o += genc.data[(base + axis) * n + j] * f * (f * p[axis]).cos();
                        *o -= genc.data[(base + 3 + axis) * n + j] * f * (f * p[axis]).sin();
                    }
                }
                Vec3::from(out)
            })
            .collect()
    }

    /// Signed distance and feature vector at one point.
    pub fn forward_sdf(&self, x: Vec3, zs: &ShapeCode) -> (f64, Vec<f64>) {
        let (s, v) = self.eval_sdf(&[x], zs);
        (s[0], v.data)
    }

    /// Color from one feature vector and view direction.
    pub fn forward_color(&self, v: &[f64], d: Vec3, zc: &ColorCode) -> [f64; 3] {
        let v = Tensor::column(v.to_vec());
        let c = self.eval_color(&v, &[d], zc);
        [c.data[0], c.data[1], c.data[2]]
    }

    /// Spatial gradient of the signed distance at `x`, obtained by recording
    /// the encoding and trunk on a tape with `x` as a leaf.
    pub fn grad_x(&self, x: Vec3, zs: &ShapeCode) -> Vec3 {
        let mut tape = Tape::new();
        let p = self.register(&mut tape, false);
        let xv = tape.param(Tensor::column(x.to_array().to_vec()));
        let mut parts = vec![xv];
        for k in 0..self.config.pe_x {
            let f = (1u64 << k) as f64 * PI;
            let sx = tape.scale(xv, f);
            parts.push(tape.sin(sx));
            parts.push(tape.cos(sx));
        }
        let enc = tape.concat_rows(&parts);
        let v = self.trunk_taped(&mut tape, &p, enc, zs);
        let s = self.sdf_head_taped(&mut tape, &p, v);
        let g = tape.backward(s).get(xv);
        Vec3::new(g.data[0], g.data[1], g.data[2])
    }

    /// Registers every layer's weights and biases as tape leaves.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> TapedParams {
        let mut weights = Vec::with_capacity(self.dims.len());
        let mut biases = Vec::with_capacity(self.dims.len());
        for l in 0..self.dims.len() {
            let w = self.weight_tensor(l);
            let b = Tensor::column(self.bias(l).to_vec());
            if trainable {
                weights.push(tape.param(w));
                biases.push(tape.param(b));
            } else {
                weights.push(tape.constant(w));
                biases.push(tape.constant(b));
            }
        }
        TapedParams { weights, biases }
    }

    /// Flattens per-layer gradients into the parameter layout.
    pub fn gather_grads(&self, p: &TapedParams, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.params.len());
        for l in 0..self.dims.len() {
            out.extend_from_slice(&grads.get(p.weights[l]).data);
            out.extend_from_slice(&grads.get(p.biases[l]).data);
        }
        out
    }

    fn trunk_pre_taped(&self, tape: &mut Tape, p: &TapedParams, enc: Var, zs: &ShapeCode) -> Vec<Var> {
        self.check_codes(Some(zs), None);
        let c = &self.config;
        let ex = c.enc_x();
        let beta = c.softplus_beta;
        let w0 = p.weights[0];
        let wx = tape.slice_cols(w0, 0, ex);
        let wz = tape.slice_cols(w0, ex, c.z_shape);
        let z = tape.constant(Tensor::column(zs.0.clone()));
        let bz = tape.matmul(wz, z);
        let b0 = tape.add(bz, p.biases[0]);
        let m = tape.matmul(wx, enc);
        let mut pre = tape.add_bias(m, b0);
        let mut pres = vec![pre];
        for l in 1..c.trunk_layers {
            let h = tape.softplus(pre, beta);
            let m = tape.matmul(p.weights[l], h);
            pre = tape.add_bias(m, p.biases[l]);
            pres.push(pre);
        }
        pres
    }

    fn trunk_taped(&self, tape: &mut Tape, p: &TapedParams, enc: Var, zs: &ShapeCode) -> Var {
        let pres = self.trunk_pre_taped(tape, p, enc, zs);
        tape.softplus(*pres.last().expect("at least one trunk layer"), self.config.softplus_beta)
    }

    fn sdf_head_taped(&self, tape: &mut Tape, p: &TapedParams, v: Var) -> Var {
        let head = self.config.trunk_layers;
        let m = tape.matmul(p.weights[head], v);
        tape.add_bias(m, p.biases[head])
    }

    /// Records the full forward pass. Colors are produced only when `dirs`
    /// is given.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        p: &TapedParams,
        points: &[Vec3],
        dirs: Option<&[Vec3]>,
        zs: &ShapeCode,
        zc: &ColorCode,
    ) -> TapedOutput {
        let c = &self.config;
        let enc = tape.constant(encode_batch(points, c.pe_x));
        let v = self.trunk_taped(tape, p, enc, zs);
        let sdf = self.sdf_head_taped(tape, p, v);
        let color = dirs.map(|dirs| {
            assert_eq!(dirs.len(), points.len(), "direction and point counts differ");
            self.check_codes(None, Some(zc));
            let l = c.trunk_layers + 1;
            let (h, ed) = (c.hidden, c.enc_d());
            let wc = p.weights[l];
            let wv = tape.slice_cols(wc, 0, h);
            let wd = tape.slice_cols(wc, h, ed);
            let wz = tape.slice_cols(wc, h + ed, c.z_color);
            let z = tape.constant(Tensor::column(zc.0.clone()));
            let bz = tape.matmul(wz, z);
            let b = tape.add(bz, p.biases[l]);
            let encd = tape.constant(encode_batch(dirs, c.pe_d));
            let a = tape.matmul(wv, v);
            let d = tape.matmul(wd, encd);
            let pre = tape.add(a, d);
            let pre = tape.add_bias(pre, b);
            let hid = tape.relu(pre);
            let m = tape.matmul(p.weights[l + 1], hid);
            let o = tape.add_bias(m, p.biases[l + 1]);
            tape.sigmoid(o)
        });
        TapedOutput { sdf, color }
    }

    /// Records spatial gradients of the signed distance (`3 x n`) as a
    /// differentiable function of the parameters, by propagating tangents
    /// for the three coordinate directions through the trunk.
    pub fn sdf_grad_taped(&self, tape: &mut Tape, p: &TapedParams, points: &[Vec3], zs: &ShapeCode) -> Var {
        let c = &self.config;
        let n = points.len();
        let ex = c.enc_x();
        let beta = c.softplus_beta;
        let enc = tape.constant(encode_batch(points, c.pe_x));
        let pres = self.trunk_pre_taped(tape, p, enc, zs);
        let jac = tape.constant(encode_jacobian(points, c.pe_x));
        let wx = tape.slice_cols(p.weights[0], 0, ex);
        let mut t = tape.matmul(wx, jac);
        for (l, &pre) in pres.iter().enumerate() {
            if l > 0 {
                t = tape.matmul(p.weights[l], t);
            }
            let sp = tape.scale(pre, beta);
            let d = tape.sigmoid(sp);
            let d = tape.tile_cols(d, 3);
            t = tape.mul(d, t);
        }
        let g = tape.matmul(p.weights[c.trunk_layers], t);
        tape.reshape(g, 3, n)
    }
}

/// The `i`-th of `n` points of a Fibonacci lattice on the unit sphere.
fn fibonacci_direction(i: usize, n: usize) -> Vec3 {
    let golden = PI * (3.0 - 5f64.sqrt());
    let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
    let rho = (1.0 - z * z).max(0.0).sqrt();
    let phi = golden * i as f64;
    Vec3::new(rho * phi.cos(), rho * phi.sin(), z)
}

/// Rows of a uniformly random rotation matrix.
fn random_rotation(rng: &mut Rng) -> [Vec3; 3] {
    let mut gauss = || -> Vec3 {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(&mut *rng));
        Vec3::from(v)
    };
    let a = gauss().normalized();
    let b = gauss();
    let b = (b - a * a.dot(b)).normalized();
    [a, b, a.cross(b)]
}

fn gemm_into(a: &Tensor, b: &Tensor, out: &mut Tensor) {
    crate::autodiff::tensor::gemm(a, false, b, false, out, 0.0);
}

fn add_bias(t: &mut Tensor, b: &[f64]) {
    let n = t.cols;
    for (r, &bb) in b.iter().enumerate() {
        for v in &mut t.data[r * n..(r + 1) * n] {
            *v += bb;
        }
    }
}

/// A generator bound to fixed codes, usable wherever an [`SdfField`] is.
#[derive(Debug, Clone, Copy)]
pub struct NeuralField<'a> {
    pub net: &'a GeneratorNetwork,
    pub shape: &'a ShapeCode,
    pub color: &'a ColorCode,
}

impl<'a> NeuralField<'a> {
    pub fn new(net: &'a GeneratorNetwork, shape: &'a ShapeCode, color: &'a ColorCode) -> Self {
        Self { net, shape, color }
    }
}

impl SdfField for NeuralField<'_> {
    fn distance_batch(&self, points: &[Vec3], out: &mut [f64]) {
        let s = self.net.sdf_head(&self.net.trunk(points, self.shape).1);
        out.copy_from_slice(&s);
    }

    fn shade_batch(&self, points: &[Vec3], dirs: &[Vec3], dist: &mut [f64], rgb: &mut [[f64; 3]]) {
        let (s, v) = self.net.eval_sdf(points, self.shape);
        dist.copy_from_slice(&s);
        let c = self.net.eval_color(&v, dirs, self.color);
        let n = points.len();
        for (j, o) in rgb.iter_mut().enumerate() {
            *o = [c.data[j], c.data[n + j], c.data[2 * n + j]];
        }
    }

    fn gradient(&self, p: Vec3) -> Vec3 {
        self.net.eval_sdf_grad(&[p], self.shape)[0]
    }

    fn gradient_batch(&self, points: &[Vec3]) -> Vec<Vec3> {
        self.net.eval_sdf_grad(points, self.shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{directional_check, finite_diff_check};
    use rand::Rng as _;

    fn random_point(rng: &mut Rng, r: f64) -> Vec3 {
        Vec3::new(
            rng.random_range(-r..r),
            rng.random_range(-r..r),
            rng.random_range(-r..r),
        )
    }

    fn small_net(seed: u64) -> GeneratorNetwork {
        let mut net = GeneratorNetwork::new(NetConfig::small(), seed).unwrap();
        // Make the encoded and color inputs matter so every path is tested.
        let mut rng = stream(seed, &[9]);
        for p in net.params_mut() {
            *p += rng.random_range(-0.05..0.05);
        }
        net
    }

    #[test]
    fn encoding_examples() {
        assert_eq!(encoded_dim(10), 63);
        let e = encode(Vec3::ZERO, 10);
        assert_eq!(e.len(), 63);
        for k in 0..10 {
            assert!(e[3 + 6 * k..6 + 6 * k].iter().all(|&v| v == 0.0));
            assert!(e[6 + 6 * k..9 + 6 * k].iter().all(|&v| v == 1.0));
        }
        let p = Vec3::new(0.1, -0.2, 0.3);
        assert_eq!(encode(p, 0), vec![0.1, -0.2, 0.3]);
    }

    #[test]
    fn layer_layout_counts() {
        let c = NetConfig::default();
        let dims = c.layer_dims();
        assert_eq!(dims.len(), 7);
        assert_eq!(dims[0], (256, 63 + 128));
        assert_eq!(dims[4], (1, 256));
        assert_eq!(dims[5], (128, 256 + 27 + 128));
        assert_eq!(dims[6], (3, 128));
        let net = GeneratorNetwork::new(c.clone(), 0).unwrap();
        assert_eq!(net.params().len(), c.param_count());
        assert!(GeneratorNetwork::from_params(c, vec![0.0; 3]).is_err());
    }

    #[test]
    fn geometric_init_approximates_sphere() {
        let net = GeneratorNetwork::new(NetConfig::default(), 3).unwrap();
        let mut rng = stream(4, &[]);
        let zs = ShapeCode::sample(128, &mut rng);
        let pts: Vec<Vec3> = (0..1000)
            .map(|_| {
                let v: Vec3 = random_point(&mut rng, 1.0);
                v.normalized() * 0.5
            })
            .collect();
        let (s, v) = net.eval_sdf(&pts, &zs);
        assert_eq!(v.rows, 256);
        let worst = s.iter().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(worst < 0.1, "worst shell error {worst}");
        let g = net.grad_x(Vec3::new(0.9, 0.0, 0.0), &zs);
        assert!(g.angle_to(Vec3::X).to_degrees() < 15.0, "{g:?}");
    }

    #[test]
    fn codes_change_the_field_and_calls_repeat() {
        let net = GeneratorNetwork::new(NetConfig::default(), 3).unwrap();
        let mut rng = stream(5, &[]);
        let a = ShapeCode::sample(128, &mut rng);
        let b = ShapeCode::sample(128, &mut rng);
        let pts: Vec<Vec3> = (0..10).map(|_| random_point(&mut rng, 0.8)).collect();
        let (sa, va) = net.eval_sdf(&pts, &a);
        let (sb, _) = net.eval_sdf(&pts, &b);
        assert!(sa.iter().zip(&sb).any(|(x, y)| x != y));
        let (sa2, va2) = net.eval_sdf(&pts, &a);
        assert_eq!(sa, sa2);
        assert_eq!(va, va2);
    }

    #[test]
    fn colors_are_bounded_and_view_dependent() {
        let net = small_net(1);
        let mut rng = stream(6, &[]);
        let zs = ShapeCode::sample(16, &mut rng);
        let zc = ColorCode::sample(8, &mut rng);
        let pts: Vec<Vec3> = (0..10_000).map(|_| random_point(&mut rng, 3.0)).collect();
        let dirs: Vec<Vec3> = (0..10_000)
            .map(|_| random_point(&mut rng, 1.0).normalized())
            .collect();
        let (_, v) = net.eval_sdf(&pts, &zs);
        let c = net.eval_color(&v, &dirs, &zc);
        assert!(c.data.iter().all(|x| (0.0..=1.0).contains(x)));
        let (_, v1) = net.forward_sdf(pts[0], &zs);
        let c1 = net.forward_color(&v1, Vec3::X, &zc);
        let c2 = net.forward_color(&v1, Vec3::Z, &zc);
        assert_ne!(c1, c2);
        assert_eq!(c1, net.forward_color(&v1, Vec3::X, &zc));
    }

    #[test]
    fn taped_forward_matches_fast_path() {
        let net = small_net(2);
        let mut rng = stream(7, &[]);
        let zs = ShapeCode::sample(16, &mut rng);
        let zc = ColorCode::sample(8, &mut rng);
        let pts: Vec<Vec3> = (0..20).map(|_| random_point(&mut rng, 1.0)).collect();
        let dirs: Vec<Vec3> = (0..20).map(|_| random_point(&mut rng, 1.0).normalized()).collect();
        let (s, v) = net.eval_sdf(&pts, &zs);
        let c = net.eval_color(&v, &dirs, &zc);
        let mut tape = Tape::new();
        let p = net.register(&mut tape, true);
        let out = net.forward_taped(&mut tape, &p, &pts, Some(&dirs), &zs, &zc);
        for (a, b) in tape.value(out.sdf).data.iter().zip(&s) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in tape.value(out.color.unwrap()).data.iter().zip(&c.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_gradients_agree_across_methods() {
        let net = small_net(3);
        let mut rng = stream(8, &[]);
        for _ in 0..100 {
            let zs = ShapeCode::sample(16, &mut rng);
            let x = random_point(&mut rng, 1.0);
            let rev = net.grad_x(x, &zs);
            let fast = net.eval_sdf_grad(&[x], &zs)[0];
            let f = |q: &[f64]| net.forward_sdf(Vec3::new(q[0], q[1], q[2]), &zs).0;
            let err = finite_diff_check(f, &rev.to_array(), &x.to_array(), 1e-6);
            assert!(err < 1e-4, "grad_x vs finite differences: {err}");
            assert!((rev - fast).norm() < 1e-10 * rev.norm().max(1.0));
            let mut tape = Tape::new();
            let p = net.register(&mut tape, false);
            let g = net.sdf_grad_taped(&mut tape, &p, &[x], &zs);
            let tv = &tape.value(g).data;
            assert!((Vec3::new(tv[0], tv[1], tv[2]) - rev).norm() < 1e-10 * rev.norm().max(1.0));
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let net = small_net(4);
        let mut rng = stream(9, &[]);
        let zs = ShapeCode::sample(16, &mut rng);
        let zc = ColorCode::sample(8, &mut rng);
        let pts: Vec<Vec3> = (0..6).map(|_| random_point(&mut rng, 0.9)).collect();
        let dirs: Vec<Vec3> = (0..6).map(|_| random_point(&mut rng, 1.0).normalized()).collect();
        // Loss mixing distance, color and the tangent-mode spatial gradient.
        let loss = |n: &GeneratorNetwork, tape: &mut Tape, p: &TapedParams| {
            let out = n.forward_taped(tape, p, &pts, Some(&dirs), &zs, &zc);
            let s2 = tape.square(out.sdf);
            let a = tape.sum(s2);
            let b = tape.sum(out.color.unwrap());
            let g = n.sdf_grad_taped(tape, p, &pts, &zs);
            let nrm = tape.column_norm(g);
            let e = tape.add_scalar(nrm, -1.0);
            let e = tape.square(e);
            let e = tape.sum(e);
            let ab = tape.add(a, b);
            tape.add(ab, e)
        };
        let mut tape = Tape::new();
        let p = net.register(&mut tape, true);
        let l = loss(&net, &mut tape, &p);
        let grad = net.gather_grads(&p, &tape.backward(l));
        let f = |q: &[f64]| {
            let n = GeneratorNetwork::from_params(net.config().clone(), q.to_vec()).unwrap();
            let mut tape = Tape::new();
            let p = n.register(&mut tape, false);
            let l = loss(&n, &mut tape, &p);
            tape.scalar(l)
        };
        for k in 0..20 {
            let mut r = stream(10, &[k]);
            let dir: Vec<f64> = (0..grad.len()).map(|_| StandardNormal.sample(&mut r)).collect();
            let err = directional_check(f, &grad, net.params(), &dir, 1e-6);
            assert!(err < 1e-4, "probe {k}: {err}");
        }
    }
}
