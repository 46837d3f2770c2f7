//! A small progressive image critic.
//!
//! Images live on the tape as `3 x (B * H * W)` tensors: one row per
//! channel, images side by side, pixels row-major inside each image. The
//! network is a 1x1 "from RGB" projection, a stack of stride-2 3x3
//! convolutions down to at most 4x4, a global mean pool and a linear head.
//! Growing to a higher resolution prepends one convolution and a fresh
//! projection; the deeper blocks and the head are kept.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use crate::autodiff::tape::GATHER_ZERO;
use crate::autodiff::{round_to_f32, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

const LEAK: f64 = 0.2;

/// Dense layer parameters, `rows x cols` weights followed by `rows` biases.
#[derive(Debug, Clone, PartialEq)]
struct Layer {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Layer {
    fn random(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut data: Vec<f64> = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        data.extend(std::iter::repeat_n(0.0, rows));
        round_to_f32(&mut data);
        Self { rows, cols, data }
    }

    fn weight(&self) -> Tensor {
        Tensor::from_vec(self.rows, self.cols, self.data[..self.rows * self.cols].to_vec())
    }

    fn bias(&self) -> Tensor {
        Tensor::column(self.data[self.rows * self.cols..].to_vec())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    resolution: usize,
    channels: usize,
    /// From-RGB projection, convolutions (input side first), head.
    layers: Vec<Layer>,
}

/// Discriminator parameters registered on a tape.
#[derive(Debug, Clone)]
pub struct DiscParams {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

/// Number of stride-2 blocks that take `resolution` down to at most 4.
fn block_count(resolution: usize) -> usize {
    let mut r = resolution;
    let mut n = 0;
    while r > 4 {
        r = r.div_ceil(2);
        n += 1;
    }
    n.max(1)
}

/// Gather index for a padded stride-2 3x3 convolution over a batch.
/// Rows of the result are `(channel, ky, kx)`, columns `(image, oy, ox)`.
fn conv_index(channels: usize, batch: usize, h: usize) -> (Arc<Vec<u32>>, usize) {
    let ho = h.div_ceil(2);
    let (p_in, p_out) = (h * h, ho * ho);
    let cols = batch * p_out;
    let mut index = vec![GATHER_ZERO; channels * 9 * cols];
    for c in 0..channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = c * 9 + ky * 3 + kx;
                for b in 0..batch {
                    for oy in 0..ho {
                        for ox in 0..ho {
                            let y = (2 * oy + ky) as isize - 1;
                            let x = (2 * ox + kx) as isize - 1;
                            if y < 0 || x < 0 || y >= h as isize || x >= h as isize {
                                continue;
                            }
                            let src = c * batch * p_in + b * p_in + y as usize * h + x as usize;
                            index[row * cols + b * p_out + oy * ho + ox] = src as u32;
                        }
                    }
                }
            }
        }
    }
    (Arc::new(index), ho)
}

/// `(B * P) x B` matrix averaging each image's `P` pixel columns.
fn pool_matrix(batch: usize, pixels: usize) -> Tensor {
    let mut t = Tensor::zeros(batch * pixels, batch);
    for b in 0..batch {
        for p in 0..pixels {
            t.set(b * pixels + p, b, 1.0 / pixels as f64);
        }
    }
    t
}

/// Everything the input-gradient graph needs from a forward pass.
struct Trace {
    score: Var,
    /// Leaky-ReLU slopes of every layer's pre-activation.
    masks: Vec<Tensor>,
    /// Gather index, input side length, for each convolution.
    convs: Vec<(Arc<Vec<u32>>, usize)>,
    pool: Tensor,
}

impl Discriminator {
    pub fn new(resolution: usize, channels: usize, rng: &mut Rng) -> Result<Self> {
        if resolution < 4 || channels == 0 {
            return Err(Error::InvalidConfig(format!(
                "discriminator needs resolution >= 4 and channels >= 1 (got {resolution}, {channels})"
            )));
        }
        let mut layers = vec![Self::from_rgb(channels, rng)];
        for _ in 0..block_count(resolution) {
            layers.push(Self::conv(channels, rng));
        }
        layers.push(Layer::random(1, channels, (1.0 / channels as f64).sqrt(), rng));
        Ok(Self {
            resolution,
            channels,
            layers,
        })
    }

    /// Rebuilds a critic from checkpointed layer shapes and values.
    pub fn from_layers(resolution: usize, dims: &[(usize, usize)], params: &[f64]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(format!("discriminator layers: {msg}"));
        if dims.len() != block_count(resolution) + 2 {
            return Err(bad("layer count does not match the resolution"));
        }
        let channels = dims[0].0;
        let expected: Vec<(usize, usize)> = std::iter::once((channels, 3))
            .chain(std::iter::repeat_n((channels, 9 * channels), dims.len() - 2))
            .chain(std::iter::once((1, channels)))
            .collect();
        if dims != expected.as_slice() {
            return Err(bad("unexpected layer shapes"));
        }
        let total: usize = dims.iter().map(|&(r, c)| r * (c + 1)).sum();
        if params.len() != total {
            return Err(bad("parameter count mismatch"));
        }
        let mut layers = Vec::new();
        let mut off = 0;
        for &(rows, cols) in dims {
            let n = rows * (cols + 1);
            layers.push(Layer {
                rows,
                cols,
                data: params[off..off + n].to_vec(),
            });
            off += n;
        }
        Ok(Self {
            resolution,
            channels,
            layers,
        })
    }

    fn from_rgb(channels: usize, rng: &mut Rng) -> Layer {
        Layer::random(channels, 3, (2.0 / 3.0f64).sqrt(), rng)
    }

    fn conv(channels: usize, rng: &mut Rng) -> Layer {
        Layer::random(channels, 9 * channels, (2.0 / (9 * channels) as f64).sqrt(), rng)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Adapts the critic to a higher resolution by prepending stride-2
    /// blocks with a fresh projection. Returns the number of parameters of
    /// the removed projection and of the new leading layers, so optimizer
    /// moments can be remapped: the old layers after the projection keep
    /// their values and sit at the end of the new parameter vector.
    pub fn grow(&mut self, resolution: usize, rng: &mut Rng) -> Result<(usize, usize)> {
        if resolution < self.resolution {
            return Err(Error::InvalidConfig(format!(
                "discriminator cannot shrink from {} to {resolution}",
                self.resolution
            )));
        }
        let added = block_count(resolution) - block_count(self.resolution);
        let removed = self.layers[0].data.len();
        let mut front = vec![Self::from_rgb(self.channels, rng)];
        for _ in 0..added {
            front.push(Self::conv(self.channels, rng));
        }
        let new_len: usize = front.iter().map(|l| l.data.len()).sum();
        if added == 0 {
            // Same depth: keep the projection too.
            self.resolution = resolution;
            return Ok((0, 0));
        }
        self.layers.splice(0..1, front);
        self.resolution = resolution;
        Ok((removed, new_len))
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.rows, l.cols)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.data.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.data.iter().copied()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count(), "discriminator parameter count mismatch");
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.data.len();
            l.data.copy_from_slice(&params[off..off + n]);
            off += n;
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> DiscParams {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in &self.layers {
            let (w, b) = (l.weight(), l.bias());
            if trainable {
                weights.push(tape.param(w));
                biases.push(tape.param(b));
            } else {
                weights.push(tape.constant(w));
                biases.push(tape.constant(b));
            }
        }
        DiscParams { weights, biases }
    }

    /// Flattens tape gradients into the parameter layout.
    pub fn gather_grads(&self, p: &DiscParams, grads: &crate::autodiff::Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in p.weights.iter().zip(&p.biases) {
            out.extend_from_slice(&grads.get(*w).data);
            out.extend_from_slice(&grads.get(*b).data);
        }
        out
    }

    fn check_input(&self, tape: &Tape, images: Var, batch: usize) {
        let (rows, cols) = tape.value(images).shape();
        let px = self.resolution * self.resolution;
        assert!(
            rows == 3 && batch > 0 && cols == batch * px,
            "discriminator expects 3 x {batch}*{px} images at resolution {}, got {rows} x {cols}",
            self.resolution
        );
    }

    fn trace(&self, tape: &mut Tape, p: &DiscParams, images: Var, batch: usize) -> Trace {
        self.check_input(tape, images, batch);
        let slope = |t: &Tensor| t.map(|x| if x > 0.0 { 1.0 } else { LEAK });
        let mut masks = Vec::new();
        let mut convs = Vec::new();
        let m = tape.matmul(p.weights[0], images);
        let pre = tape.add_bias(m, p.biases[0]);
        masks.push(slope(tape.value(pre)));
        let mut x = tape.leaky_relu(pre, LEAK);
        let mut h = self.resolution;
        let n_conv = self.layers.len() - 2;
        for l in 1..=n_conv {
            let (index, ho) = conv_index(self.channels, batch, h);
            let cols = tape.gather(x, index.clone(), 9 * self.channels, batch * ho * ho);
            let m = tape.matmul(p.weights[l], cols);
            let pre = tape.add_bias(m, p.biases[l]);
            masks.push(slope(tape.value(pre)));
            x = tape.leaky_relu(pre, LEAK);
            convs.push((index, h));
            h = ho;
        }
        let pool = pool_matrix(batch, h * h);
        let pool_v = tape.constant(pool.clone());
        let pooled = tape.matmul(x, pool_v);
        let head = self.layers.len() - 1;
        let m = tape.matmul(p.weights[head], pooled);
        let score = tape.add_bias(m, p.biases[head]);
        Trace {
            score,
            masks,
            convs,
            pool,
        }
    }

    /// Scores, `1 x batch`.
    pub fn forward_taped(&self, tape: &mut Tape, p: &DiscParams, images: Var, batch: usize) -> Var {
        self.trace(tape, p, images, batch).score
    }

    /// Scores plus the R1 penalty `mean_b |d D(I_b) / d I_b|^2`, both
    /// differentiable in the parameters.
    ///
    /// The input gradient is written out as an explicit reverse pass built
    /// from ordinary tape ops (transposed weights, fixed activation slopes,
    /// scatter as the adjoint of the convolution gather), so the ordinary
    /// backward sweep differentiates the penalty a second time.
    pub fn r1_taped(&self, tape: &mut Tape, p: &DiscParams, images: Var, batch: usize) -> (Var, Var) {
        let tr = self.trace(tape, p, images, batch);
        let head = self.layers.len() - 1;
        let wt = tape.transpose(p.weights[head]);
        let ones = tape.constant(Tensor::from_vec(1, batch, vec![1.0; batch]));
        let g_pooled = tape.matmul(wt, ones);
        let pool_t = tape.constant(tr.pool.transpose());
        let mut g = tape.matmul(g_pooled, pool_t);
        for (k, (index, h)) in tr.convs.iter().enumerate().rev() {
            let l = k + 1;
            let mask = tape.constant(tr.masks[l].clone());
            let g_pre = tape.mul(g, mask);
            let wt = tape.transpose(p.weights[l]);
            let g_cols = tape.matmul(wt, g_pre);
            g = tape.scatter_add(g_cols, index.clone(), self.channels, batch * h * h);
        }
        let mask = tape.constant(tr.masks[0].clone());
        let g_pre = tape.mul(g, mask);
        let wt = tape.transpose(p.weights[0]);
        let g_img = tape.matmul(wt, g_pre);
        let sq = tape.square(g_img);
        let total = tape.sum(sq);
        let penalty = tape.scale(total, 1.0 / batch as f64);
        (tr.score, penalty)
    }

    /// Score of a single `3 x (H * W)` image.
    pub fn score(&self, image: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let p = self.register(&mut tape, false);
        let x = tape.constant(image.clone());
        let s = self.forward_taped(&mut tape, &p, x, 1);
        tape.scalar(s)
    }

    /// `d D / d I` for a single image, via the explicit reverse pass.
    pub fn input_gradient(&self, image: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = self.register(&mut tape, false);
        let x = tape.param(image.clone());
        let s = self.forward_taped(&mut tape, &p, x, 1);
        tape.backward(s).get(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_differences, directional_check};
    use crate::rng::stream;
    use rand::Rng as _;

    fn random_images(res: usize, batch: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, &[1]);
        let n = 3 * batch * res * res;
        Tensor::from_vec(3, batch * res * res, (0..n).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn block_counts_reach_four_or_less() {
        assert_eq!(block_count(16), 2);
        assert_eq!(block_count(32), 3);
        assert_eq!(block_count(48), 4);
        assert_eq!(block_count(4), 1);
    }

    #[test]
    fn batched_scores_equal_single_scores() {
        let d = Discriminator::new(8, 4, &mut stream(3, &[])).unwrap();
        let imgs = random_images(8, 3, 5);
        let mut tape = Tape::new();
        let p = d.register(&mut tape, false);
        let x = tape.constant(imgs.clone());
        let s = d.forward_taped(&mut tape, &p, x, 3);
        for b in 0..3 {
            let single: Vec<f64> = (0..3)
                .flat_map(|c| imgs.data[c * 192 + b * 64..c * 192 + (b + 1) * 64].to_vec())
                .collect();
            let one = d.score(&Tensor::from_vec(3, 64, single));
            assert!((tape.value(s).data[b] - one).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let d = Discriminator::new(4, 6, &mut stream(11, &[])).unwrap();
        let img = random_images(4, 1, 2);
        let g = d.input_gradient(&img);
        let fd = central_differences(
            |x| d.score(&Tensor::from_vec(3, 16, x.to_vec())),
            &img.data,
            1e-6,
        );
        for (a, b) in g.data.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
        // The explicit reverse graph gives the same vector.
        let mut tape = Tape::new();
        let p = d.register(&mut tape, false);
        let x = tape.constant(img.clone());
        let (_, pen) = d.r1_taped(&mut tape, &p, x, 1);
        let sq: f64 = fd.iter().map(|v| v * v).sum();
        assert!((tape.scalar(pen) - sq).abs() < 1e-3 * sq.max(1e-12));
    }

    #[test]
    fn r1_parameter_gradient_matches_finite_differences() {
        let d = Discriminator::new(8, 3, &mut stream(4, &[])).unwrap();
        let imgs = random_images(8, 2, 9);
        let eval = |params: &[f64]| {
            let mut d2 = d.clone();
            d2.set_params(params);
            let mut tape = Tape::new();
            let p = d2.register(&mut tape, false);
            let x = tape.constant(imgs.clone());
            let (_, pen) = d2.r1_taped(&mut tape, &p, x, 2);
            tape.scalar(pen)
        };
        let mut tape = Tape::new();
        let p = d.register(&mut tape, true);
        let x = tape.constant(imgs.clone());
        let (_, pen) = d.r1_taped(&mut tape, &p, x, 2);
        let grads = tape.backward(pen);
        let g = d.gather_grads(&p, &grads);
        let mut rng = stream(1, &[]);
        let dir: Vec<f64> = (0..g.len()).map(|_| rng.random::<f64>() - 0.5).collect();
        let err = directional_check(eval, &g, &d.params(), &dir, 1e-5);
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn growing_keeps_deep_layers() {
        let mut rng = stream(8, &[]);
        let mut d = Discriminator::new(16, 4, &mut rng).unwrap();
        let before = d.params();
        let head_len = d.layers[1..].iter().map(|l| l.data.len()).sum::<usize>();
        let (removed, added) = d.grow(32, &mut rng).unwrap();
        assert_eq!(removed, 4 * 4);
        let after = d.params();
        assert_eq!(after.len(), before.len() - removed + added);
        assert_eq!(&after[added..], &before[before.len() - head_len..]);
        assert_eq!(d.layer_dims().len(), block_count(32) + 2);
        let img = random_images(32, 1, 1);
        assert!(d.score(&img).is_finite());
        let rebuilt = Discriminator::from_layers(32, &d.layer_dims(), &after).unwrap();
        assert_eq!(rebuilt, d);
    }
}
