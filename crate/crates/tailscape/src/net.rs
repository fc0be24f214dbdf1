//! Small dense feedforward classifier with exact analytic gradients.
//!
//! The model is a tanh MLP encoder followed by a linear classifier head.
//! All parameters live in one flat `Vec<f64>` laid out per layer (weights
//! row-major, then biases), encoder segment first, classifier segment last.
//! Batch gradient reductions use a fixed pairwise tree so results are
//! bitwise identical regardless of thread count.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};

/// Fixed leaf size of the pairwise reduction tree. Changing it changes the
/// bit pattern of every reduction, so it is part of the determinism contract.
const REDUCE_LEAF: usize = 16;

/// Network shape: tanh hidden layers (the encoder) plus a linear head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Result<Self> {
        let arch = Self { input_dim, hidden, classes };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.classes == 0 {
            return Err(Error::InvalidArgument("input_dim and classes must be >= 1".into()));
        }
        if self.hidden.is_empty() {
            return Err(Error::InvalidArgument("at least one hidden layer required".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument("hidden widths must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    in_dim: usize,
    out_dim: usize,
    w_off: usize,
    b_off: usize,
}

/// The network: owns the layout of the flat parameter vector, not the
/// parameters themselves. Parameter vectors are plain `Vec<f64>` of length
/// [`Network::param_count`].
#[derive(Debug, Clone)]
pub struct Network {
    arch: Architecture,
    layers: Vec<LayerShape>,
    param_count: usize,
    encoder_len: usize,
}

impl Network {
    pub fn new(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut layers = Vec::with_capacity(arch.hidden.len() + 1);
        let mut off = 0usize;
        let mut in_dim = arch.input_dim;
        for &h in &arch.hidden {
            layers.push(LayerShape { in_dim, out_dim: h, w_off: off, b_off: off + in_dim * h });
            off += in_dim * h + h;
            in_dim = h;
        }
        let encoder_len = off;
        layers.push(LayerShape {
            in_dim,
            out_dim: arch.classes,
            w_off: off,
            b_off: off + in_dim * arch.classes,
        });
        off += in_dim * arch.classes + arch.classes;
        Ok(Self { arch, layers, param_count: off, encoder_len })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    /// Dimension `d` of the flat parameter vector.
    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Boundary index between encoder and classifier segments.
    pub fn encoder_len(&self) -> usize {
        self.encoder_len
    }

    /// Width of the encoder output (the feature space).
    pub fn feature_dim(&self) -> usize {
        *self.arch.hidden.last().expect("architecture has hidden layers")
    }

    /// Encoder segment view of a full parameter vector.
    pub fn encoder_part<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[..self.encoder_len]
    }

    /// Overwrite the encoder segment of `theta` with `enc`.
    pub fn set_encoder_part(&self, theta: &mut [f64], enc: &[f64]) -> Result<()> {
        if enc.len() != self.encoder_len {
            return Err(Error::DimensionMismatch { expected: self.encoder_len, got: enc.len() });
        }
        theta[..self.encoder_len].copy_from_slice(enc);
        Ok(())
    }

    /// Per-layer (weights, biases) parameter ranges, in layout order.
    /// Used for filter-normalized landscape directions.
    pub fn param_blocks(&self) -> Vec<Range<usize>> {
        let mut blocks = Vec::with_capacity(self.layers.len() * 2);
        for l in &self.layers {
            blocks.push(l.w_off..l.b_off);
            blocks.push(l.b_off..l.b_off + l.out_dim);
        }
        blocks
    }

    /// Split a flat vector into per-layer (weights, biases) views.
    pub fn layer_views<'a>(&self, theta: &'a [f64]) -> Result<Vec<(&'a [f64], &'a [f64])>> {
        self.check_theta(theta)?;
        Ok(self
            .layers
            .iter()
            .map(|l| (&theta[l.w_off..l.b_off], &theta[l.b_off..l.b_off + l.out_dim]))
            .collect())
    }

    /// Rebuild a flat vector from per-layer (weights, biases) arrays.
    pub fn flatten_layers(&self, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<f64>> {
        if layers.len() != self.layers.len() {
            return Err(Error::DimensionMismatch {
                expected: self.layers.len(),
                got: layers.len(),
            });
        }
        let mut theta = vec![0.0; self.param_count];
        for (shape, (w, b)) in self.layers.iter().zip(layers) {
            if w.len() != shape.in_dim * shape.out_dim || b.len() != shape.out_dim {
                return Err(Error::DimensionMismatch {
                    expected: shape.in_dim * shape.out_dim,
                    got: w.len(),
                });
            }
            theta[shape.w_off..shape.b_off].copy_from_slice(w);
            theta[shape.b_off..shape.b_off + shape.out_dim].copy_from_slice(b);
        }
        Ok(theta)
    }

    /// Seeded init: weights uniform in +-sqrt(6 / (fan_in + fan_out)),
    /// biases zero.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; self.param_count];
        for l in &self.layers {
            let bound = (6.0 / (l.in_dim + l.out_dim) as f64).sqrt();
            for w in &mut theta[l.w_off..l.b_off] {
                *w = bound * (2.0 * rng.gen::<f64>() - 1.0);
            }
        }
        theta
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.param_count {
            return Err(Error::DimensionMismatch { expected: self.param_count, got: theta.len() });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Forward pass: returns (encoder features, logits).
    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_theta(theta)?;
        self.check_input(x)?;
        let acts = self.forward_acts(theta, x);
        let n = acts.len();
        let features = acts[n - 2].clone();
        let logits = acts[n - 1].clone();
        Ok((features, logits))
    }

    /// All activations: [hidden_1, .., hidden_H, logits].
    fn forward_acts(&self, theta: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut input = x;
        for (i, l) in self.layers.iter().enumerate() {
            let last = i + 1 == self.layers.len();
            let mut out = vec![0.0; l.out_dim];
            for o in 0..l.out_dim {
                let row = &theta[l.w_off + o * l.in_dim..l.w_off + (o + 1) * l.in_dim];
                let mut z = theta[l.b_off + o];
                for (w, v) in row.iter().zip(input) {
                    z += w * v;
                }
                out[o] = if last { z } else { z.tanh() };
            }
            acts.push(out);
            input = acts.last().expect("just pushed").as_slice();
        }
        acts
    }

    /// Stable softmax cross-entropy of `logits` against label `y`.
    fn cross_entropy(logits: &[f64], y: usize) -> (f64, Vec<f64>) {
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
        let lse = m + sum.ln();
        let loss = lse - logits[y];
        let mut dlogits: Vec<f64> = logits.iter().map(|&l| (l - lse).exp()).collect();
        dlogits[y] -= 1.0;
        (loss, dlogits)
    }

    /// Accumulate `scale * grad(sample)` into `grad` and return `scale * ce`.
    fn accumulate_sample(
        &self,
        theta: &[f64],
        sample: &Sample,
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let acts = self.forward_acts(theta, &sample.features);
        let logits = acts.last().expect("logits");
        let (ce, mut delta) = Self::cross_entropy(logits, sample.label);
        for d in &mut delta {
            *d *= scale;
        }
        // Backprop layer by layer; delta holds dL/dz of the current layer.
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input: &[f64] = if i == 0 { &sample.features } else { &acts[i - 1] };
            for o in 0..l.out_dim {
                let d = delta[o];
                grad[l.b_off + o] += d;
                let row = &mut grad[l.w_off + o * l.in_dim..l.w_off + (o + 1) * l.in_dim];
                for (g, v) in row.iter_mut().zip(input) {
                    *g += d * v;
                }
            }
            if i > 0 {
                let mut prev = vec![0.0; l.in_dim];
                for o in 0..l.out_dim {
                    let d = delta[o];
                    let row = &theta[l.w_off + o * l.in_dim..l.w_off + (o + 1) * l.in_dim];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                let a = &acts[i - 1];
                for (p, &ai) in prev.iter_mut().zip(a) {
                    *p *= 1.0 - ai * ai;
                }
                delta = prev;
            }
        }
        scale * ce
    }

    /// Pairwise-tree reduction of weighted per-sample losses and gradients.
    /// The tree shape depends only on the batch length, so single- and
    /// multi-threaded execution produce identical bits.
    fn reduce_tree(
        &self,
        theta: &[f64],
        batch: &[&Sample],
        weights: Option<&[f64]>,
        lo: usize,
        hi: usize,
    ) -> (f64, Vec<f64>) {
        if hi - lo <= REDUCE_LEAF {
            let mut grad = vec![0.0; self.param_count];
            let mut loss = 0.0;
            for i in lo..hi {
                let w = weights.map_or(1.0, |ws| ws[i]);
                if w == 0.0 {
                    continue;
                }
                loss += self.accumulate_sample(theta, batch[i], w, &mut grad);
            }
            (loss, grad)
        } else {
            let mid = lo + (hi - lo) / 2;
            let (left, right) = rayon::join(
                || self.reduce_tree(theta, batch, weights, lo, mid),
                || self.reduce_tree(theta, batch, weights, mid, hi),
            );
            let (loss_l, mut grad_l) = left;
            let (loss_r, grad_r) = right;
            for (a, b) in grad_l.iter_mut().zip(&grad_r) {
                *a += b;
            }
            (loss_l + loss_r, grad_l)
        }
    }

    /// Weighted mean softmax cross-entropy and its exact analytic gradient.
    ///
    /// `weights` defaults to all ones; they must be non-negative and not all
    /// zero. Loss and gradient are normalized by the weight total, so
    /// duplicating every sample leaves both unchanged.
    pub fn loss_and_grad(
        &self,
        theta: &[f64],
        batch: &[&Sample],
        weights: Option<&[f64]>,
    ) -> Result<(f64, Vec<f64>)> {
        self.check_theta(theta)?;
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for s in batch {
            self.check_input(&s.features)?;
        }
        let total_w = match weights {
            Some(ws) => {
                if ws.len() != batch.len() {
                    return Err(Error::DimensionMismatch {
                        expected: batch.len(),
                        got: ws.len(),
                    });
                }
                if ws.iter().any(|&w| !w.is_finite() || w < 0.0) {
                    return Err(Error::InvalidArgument(
                        "sample weights must be finite and >= 0".into(),
                    ));
                }
                let t: f64 = ws.iter().sum();
                if t == 0.0 {
                    return Err(Error::AllZeroWeights);
                }
                t
            }
            None => batch.len() as f64,
        };
        let (loss_sum, mut grad) = self.reduce_tree(theta, batch, weights, 0, batch.len());
        for g in &mut grad {
            *g /= total_w;
        }
        Ok((loss_sum / total_w, grad))
    }

    /// Unweighted mean loss only (no gradient); used by landscape probes.
    pub fn loss(&self, theta: &[f64], batch: &[&Sample]) -> Result<f64> {
        self.check_theta(theta)?;
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut sum = 0.0;
        for s in batch {
            self.check_input(&s.features)?;
            let acts = self.forward_acts(theta, &s.features);
            sum += Self::cross_entropy(acts.last().expect("logits"), s.label).0;
        }
        Ok(sum / batch.len() as f64)
    }

    /// Mean gradient of each class present in the batch.
    ///
    /// The count-weighted average of the returned gradients reconstructs the
    /// unweighted full-batch gradient.
    pub fn per_class_grads(
        &self,
        theta: &[f64],
        batch: &[&Sample],
    ) -> Result<BTreeMap<usize, Vec<f64>>> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut by_class: BTreeMap<usize, Vec<&Sample>> = BTreeMap::new();
        for s in batch {
            by_class.entry(s.label).or_default().push(s);
        }
        let mut grads = BTreeMap::new();
        for (class, subset) in by_class {
            let (_, g) = self.loss_and_grad(theta, &subset, None)?;
            grads.insert(class, g);
        }
        Ok(grads)
    }
}

// ── Checkpoint format ───────────────────────────────────────────────────────
//
// magic "TSCP", version u32, input_dim u32, hidden_count u32, hidden dims
// u32 each, classes u32, value count u64, then little-endian f64 payload.
// The same container stores parameter vectors and Fisher diagonals.

const MAGIC: &[u8; 4] = b"TSCP";
const VERSION: u32 = 1;

/// Write a flat vector with its architecture header.
pub fn write_param_file(path: &Path, arch: &Architecture, values: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + values.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(arch.input_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(arch.hidden.len() as u32).to_le_bytes());
    for &h in &arch.hidden {
        buf.extend_from_slice(&(h as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(arch.classes as u32).to_le_bytes());
    buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Read a vector written by [`write_param_file`].
pub fn read_param_file(path: &Path) -> Result<(Architecture, Vec<f64>)> {
    let malformed = |reason: &str| Error::MalformedFile {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(malformed("truncated"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(malformed("bad magic"));
    }
    let read_u32 =
        |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    if read_u32(take(4)?) != VERSION as usize {
        return Err(malformed("unsupported version"));
    }
    let input_dim = read_u32(take(4)?);
    let hidden_count = read_u32(take(4)?);
    let mut hidden = Vec::with_capacity(hidden_count);
    for _ in 0..hidden_count {
        hidden.push(read_u32(take(4)?));
    }
    let classes = read_u32(take(4)?);
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        values.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
    }
    if pos != bytes.len() {
        return Err(malformed("trailing bytes"));
    }
    let arch = Architecture::new(input_dim, hidden, classes)?;
    Ok((arch, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample(features: Vec<f64>, label: usize) -> Sample {
        Sample { features, label }
    }

    fn tiny_net() -> Network {
        Network::new(Architecture::new(2, vec![3], 2).unwrap()).unwrap()
    }

    fn random_batch(net: &Network, n: usize, seed: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let features =
                    (0..net.arch().input_dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                let label = rng.gen_range(0..net.arch().classes);
                sample(features, label)
            })
            .collect()
    }

    /// Central finite differences of the batch loss; the independent oracle
    /// for every analytic gradient in this module.
    fn fd_grad(net: &Network, theta: &[f64], batch: &[&Sample], step: f64) -> Vec<f64> {
        let mut g = vec![0.0; theta.len()];
        let mut t = theta.to_vec();
        for i in 0..theta.len() {
            t[i] = theta[i] + step;
            let up = net.loss(&t, batch).unwrap();
            t[i] = theta[i] - step;
            let down = net.loss(&t, batch).unwrap();
            t[i] = theta[i];
            g[i] = (up - down) / (2.0 * step);
        }
        g
    }

    /// Coordinate-wise relative error with an absolute floor at the FD
    /// noise level: differences below 1e-9 count as zero.
    pub(crate) fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                let diff = (x - y).abs();
                if diff <= 1e-9 {
                    0.0
                } else {
                    diff / x.abs().max(y.abs())
                }
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let net = tiny_net();
        let theta = vec![0.0; net.param_count()];
        let (_, logits) = net.forward(&theta, &[0.3, -0.7]).unwrap();
        assert_eq!(logits, vec![0.0, 0.0]);
    }

    #[test]
    fn forward_matches_hand_matrix_multiply() {
        // 2 -> 2 (tanh) -> 2 (linear) with hand-set weights.
        let net = Network::new(Architecture::new(2, vec![2], 2).unwrap()).unwrap();
        let w1 = vec![1.0, 0.5, -0.25, 2.0];
        let b1 = vec![0.1, -0.2];
        let w2 = vec![0.3, -1.0, 0.7, 0.4];
        let b2 = vec![0.05, -0.05];
        let theta = net.flatten_layers(&[(w1, b1), (w2, b2)]).unwrap();
        let x = [0.6, -0.4];
        let h0 = (1.0 * 0.6 + 0.5 * -0.4 + 0.1_f64).tanh();
        let h1 = (-0.25 * 0.6 + 2.0 * -0.4 + -0.2_f64).tanh();
        let expect = [
            0.3 * h0 + -1.0 * h1 + 0.05,
            0.7 * h0 + 0.4 * h1 + -0.05,
        ];
        let (features, logits) = net.forward(&theta, &x).unwrap();
        assert_relative_eq!(features[0], h0, max_relative = 1e-15);
        assert_relative_eq!(features[1], h1, max_relative = 1e-15);
        assert_relative_eq!(logits[0], expect[0], max_relative = 1e-15);
        assert_relative_eq!(logits[1], expect[1], max_relative = 1e-15);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = tiny_net();
        let theta = net.init_params(3);
        let x = [0.2, 0.9];
        let a = net.forward(&theta, &x).unwrap();
        let b = net.forward(&theta, &x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn equal_logits_give_ln2_loss() {
        let net = tiny_net();
        let theta = vec![0.0; net.param_count()];
        let batch = [sample(vec![1.0, -1.0], 0)];
        let refs: Vec<&Sample> = batch.iter().collect();
        let (loss, _) = net.loss_and_grad(&theta, &refs, None).unwrap();
        assert_relative_eq!(loss, 2.0_f64.ln(), max_relative = 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = tiny_net();
        let theta = net.init_params(11);
        let batch = random_batch(&net, 5, 4);
        let refs: Vec<&Sample> = batch.iter().collect();
        let (_, analytic) = net.loss_and_grad(&theta, &refs, None).unwrap();
        let numeric = fd_grad(&net, &theta, &refs, 1e-5);
        assert!(max_rel_err(&analytic, &numeric) <= 1e-6);
    }

    #[test]
    fn duplicating_batch_preserves_loss_and_grad() {
        let net = tiny_net();
        let theta = net.init_params(5);
        let batch = random_batch(&net, 7, 9);
        let refs: Vec<&Sample> = batch.iter().collect();
        let doubled: Vec<&Sample> = refs.iter().chain(refs.iter()).copied().collect();
        let (l1, g1) = net.loss_and_grad(&theta, &refs, None).unwrap();
        let (l2, g2) = net.loss_and_grad(&theta, &doubled, None).unwrap();
        assert_relative_eq!(l1, l2, max_relative = 1e-12);
        assert!(max_rel_err(&g1, &g2) <= 1e-12);
    }

    #[test]
    fn weighted_loss_respects_weights() {
        let net = tiny_net();
        let theta = net.init_params(2);
        let batch = random_batch(&net, 3, 2);
        let refs: Vec<&Sample> = batch.iter().collect();
        // Weight pattern (2, 0, 0) equals the single-sample loss.
        let (weighted, _) =
            net.loss_and_grad(&theta, &refs, Some(&[2.0, 0.0, 0.0])).unwrap();
        let (single, _) = net.loss_and_grad(&theta, &refs[..1], None).unwrap();
        assert_relative_eq!(weighted, single, max_relative = 1e-14);
    }

    #[test]
    fn rejects_bad_batches() {
        let net = tiny_net();
        let theta = net.init_params(1);
        assert!(matches!(net.loss_and_grad(&theta, &[], None), Err(Error::EmptyBatch)));
        let batch = random_batch(&net, 2, 3);
        let refs: Vec<&Sample> = batch.iter().collect();
        assert!(matches!(
            net.loss_and_grad(&theta, &refs, Some(&[0.0, 0.0])),
            Err(Error::AllZeroWeights)
        ));
        assert!(net.loss_and_grad(&theta, &refs, Some(&[1.0, -1.0])).is_err());
        let bad = [sample(vec![1.0], 0)];
        let bad_refs: Vec<&Sample> = bad.iter().collect();
        assert!(net.loss_and_grad(&theta, &bad_refs, None).is_err());
    }

    #[test]
    fn single_class_batch_grad_equals_class_grad() {
        let net = tiny_net();
        let theta = net.init_params(8);
        let mut batch = random_batch(&net, 4, 1);
        for s in &mut batch {
            s.label = 1;
        }
        let refs: Vec<&Sample> = batch.iter().collect();
        let (_, batch_grad) = net.loss_and_grad(&theta, &refs, None).unwrap();
        let per_class = net.per_class_grads(&theta, &refs).unwrap();
        assert_eq!(per_class.len(), 1);
        assert_eq!(per_class[&1], batch_grad);
    }

    #[test]
    fn two_equal_classes_mean_is_batch_grad() {
        let net = tiny_net();
        let theta = net.init_params(6);
        let mut batch = random_batch(&net, 6, 5);
        for (i, s) in batch.iter_mut().enumerate() {
            s.label = i % 2;
        }
        let refs: Vec<&Sample> = batch.iter().collect();
        let (_, batch_grad) = net.loss_and_grad(&theta, &refs, None).unwrap();
        let per_class = net.per_class_grads(&theta, &refs).unwrap();
        let mean: Vec<f64> = (0..batch_grad.len())
            .map(|i| (per_class[&0][i] + per_class[&1][i]) / 2.0)
            .collect();
        assert!(max_rel_err(&mean, &batch_grad) <= 1e-12);
    }

    #[test]
    fn per_class_reconstruction_identity() {
        // Counts (4, 2, 1) over 3 labels.
        let net = Network::new(Architecture::new(2, vec![3], 3).unwrap()).unwrap();
        let theta = net.init_params(4);
        let mut batch = random_batch(&net, 7, 6);
        let labels = [0, 0, 0, 0, 1, 1, 2];
        for (s, &l) in batch.iter_mut().zip(&labels) {
            s.label = l;
        }
        let refs: Vec<&Sample> = batch.iter().collect();
        // Independent oracle: plain sequential summation over samples.
        let mut direct = vec![0.0; net.param_count()];
        for s in &refs {
            let (_, g) = net.loss_and_grad(&theta, &[s], None).unwrap();
            for (d, v) in direct.iter_mut().zip(&g) {
                *d += v / refs.len() as f64;
            }
        }
        let per_class = net.per_class_grads(&theta, &refs).unwrap();
        let counts = [(0usize, 4.0), (1, 2.0), (2, 1.0)];
        let mut recon = vec![0.0; net.param_count()];
        for (class, n) in counts {
            for (r, v) in recon.iter_mut().zip(&per_class[&class]) {
                *r += n / 7.0 * v;
            }
        }
        let (_, batch_grad) = net.loss_and_grad(&theta, &refs, None).unwrap();
        assert!(max_rel_err(&recon, &batch_grad) <= 1e-12);
        assert!(max_rel_err(&recon, &direct) <= 1e-12);
    }

    #[test]
    fn layer_roundtrip_is_identity() {
        let net = Network::new(Architecture::new(3, vec![4, 2], 3).unwrap()).unwrap();
        let theta = net.init_params(42);
        let views = net.layer_views(&theta).unwrap();
        let owned: Vec<(Vec<f64>, Vec<f64>)> =
            views.iter().map(|(w, b)| (w.to_vec(), b.to_vec())).collect();
        let rebuilt = net.flatten_layers(&owned).unwrap();
        assert_eq!(theta, rebuilt);
    }

    #[test]
    fn encoder_boundary_covers_hidden_layers() {
        let net = Network::new(Architecture::new(2, vec![32, 32], 10).unwrap()).unwrap();
        assert_eq!(net.param_count(), 2 * 32 + 32 + 32 * 32 + 32 + 32 * 10 + 10);
        assert_eq!(net.encoder_len(), 2 * 32 + 32 + 32 * 32 + 32);
        assert_eq!(net.feature_dim(), 32);
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let net = Network::new(Architecture::new(2, vec![5], 3).unwrap()).unwrap();
        let theta = net.init_params(9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        write_param_file(&path, net.arch(), &theta).unwrap();
        let (arch, values) = read_param_file(&path).unwrap();
        assert_eq!(&arch, net.arch());
        assert_eq!(values, theta);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(read_param_file(&path).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(20))]

            // Spec invariant: analytic gradient tracks central differences
            // over random (theta, batch) draws.
            #[test]
            fn gradient_check_random_draws(seed in 0u64..1000) {
                let net = tiny_net();
                let theta = net.init_params(seed);
                let batch = random_batch(&net, 4, seed.wrapping_add(1));
                let refs: Vec<&Sample> = batch.iter().collect();
                let (_, analytic) = net.loss_and_grad(&theta, &refs, None).unwrap();
                let numeric = fd_grad(&net, &theta, &refs, 1e-5);
                prop_assert!(max_rel_err(&analytic, &numeric) <= 1e-6);
            }

            // Gradients stay finite on finite inputs.
            #[test]
            fn gradients_are_finite(seed in 0u64..1000) {
                let net = tiny_net();
                let theta = net.init_params(seed);
                let batch = random_batch(&net, 8, seed);
                let refs: Vec<&Sample> = batch.iter().collect();
                let (loss, grad) = net.loss_and_grad(&theta, &refs, None).unwrap();
                prop_assert!(loss.is_finite());
                prop_assert!(grad.iter().all(|g| g.is_finite()));
            }
        }
    }
}
