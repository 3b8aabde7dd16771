//! Dense ReLU encoders producing unit-norm embeddings, and the cosine
//! classifier whose weight matrix is shared between the partner and main
//! paths during logit alignment.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, Var};
use crate::binio::{put_f32s, put_u32, to_u32, Reader};
use crate::error::{dim_err, PalError, Result};
use crate::numeric::{l2_normalize_in_place, L2_EPS};
use crate::tensor::{matmul, matmul_nt, Tensor};

const ENCODER_MAGIC: &[u8; 4] = b"PALW";
const CLASSIFIER_MAGIC: &[u8; 4] = b"PALC";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(input_dim: usize, seed: u64) -> Self {
        Self { input_dim, hidden_dims: vec![64, 64], embed_dim: 32, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(PalError::Parameter("encoder dims must be positive".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(PalError::Parameter("encoder needs at least one hidden layer".into()));
        }
        if self.embed_dim < 2 {
            return Err(PalError::Parameter(format!("embed_dim must be >= 2, got {}", self.embed_dim)));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.embed_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Linear {
    /// `in x out`
    weight: Tensor,
    /// `1 x out`
    bias: Tensor,
}

/// MLP with ReLU hidden layers whose output is L2-normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    layers: Vec<Linear>,
    config: EncoderConfig,
    frozen: bool,
}

/// Graph handles produced by one [`Encoder::forward`] call.
#[derive(Clone, Debug)]
pub struct EncoderPass {
    /// `m x embed_dim`, unit rows.
    pub embeddings: Var,
    params: Vec<Var>,
}

impl Encoder {
    /// Glorot-uniform weights, zero biases, drawn from `config.seed`.
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
                Linear {
                    weight: Tensor::matrix(fan_in, fan_out, w).expect("dims").with_grad(),
                    bias: Tensor::zeros(1, fan_out).with_grad(),
                }
            })
            .collect();
        Ok(Self { layers, config, frozen: false })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Stops all parameters from tracking gradients.
    pub fn freeze(&mut self) {
        self.frozen = true;
        for p in self.params_mut() {
            p.set_requires_grad(false);
        }
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
        for p in self.params_mut() {
            p.set_requires_grad(true);
        }
    }

    pub fn frozen(mut self) -> Self {
        self.freeze();
        self
    }

    /// Parameters in declaration order: per layer, weight then bias.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_params(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    /// Records the encoder on `g` for an `m x input_dim` input node.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<EncoderPass> {
        let (_, cols) = g.shape(x);
        if cols != self.config.input_dim {
            return Err(dim_err(
                "embed",
                format!("input has {cols} columns, encoder expects {}", self.config.input_dim),
            ));
        }
        let mut h = x;
        let mut params = Vec::with_capacity(self.layers.len() * 2);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = g.input(&layer.weight);
            let b = g.input(&layer.bias);
            params.extend([w, b]);
            let z = g.matmul(h, w)?;
            h = g.add_row(z, b)?;
            if i < last {
                h = g.relu(h);
            }
        }
        let embeddings = g.l2_normalize_rows(h, L2_EPS);
        Ok(EncoderPass { embeddings, params })
    }

    /// Gradient-free embedding of one input vector.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.embed_batch(x, 1)
    }

    /// Gradient-free embedding of `rows` stacked inputs; bitwise identical to
    /// the graph path.
    pub fn embed_batch(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        if x.len() != rows * self.config.input_dim {
            return Err(dim_err(
                "embed",
                format!("{} values for {rows} rows of dim {}", x.len(), self.config.input_dim),
            ));
        }
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (k, n) = layer.weight.rows_cols();
            h = matmul(&h, layer.weight.values(), rows, k, n);
            let bias = layer.bias.values();
            for row in h.chunks_exact_mut(n) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v += b;
                    if i < last {
                        *v = v.max(0.0);
                    }
                }
            }
        }
        for row in h.chunks_exact_mut(self.config.embed_dim) {
            l2_normalize_in_place(row, L2_EPS);
        }
        Ok(h)
    }

    /// Moves gradients from `grads` into the parameter tensors.
    pub fn absorb_grads(&mut self, pass: &EncoderPass, grads: &mut Gradients) {
        let vars = pass.params.clone();
        for (p, v) in self.params_mut().zip(vars) {
            match grads.take(v) {
                Some(gr) if p.requires_grad() => p.set_grad(gr).expect("graph keeps shapes"),
                _ => p.clear_grad(),
            }
        }
    }

    /// Rounds every parameter to f32 so the in-memory model equals its
    /// checkpoint.
    pub fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            for v in p.values_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.num_params() * 4);
        out.extend_from_slice(ENCODER_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, to_u32(self.layers.len(), "layer count")?);
        for l in &self.layers {
            let (i, o) = l.weight.rows_cols();
            put_u32(&mut out, to_u32(i, "layer input dim")?);
            put_u32(&mut out, to_u32(o, "layer output dim")?);
        }
        for p in self.params() {
            put_f32s(&mut out, p.values());
        }
        Ok(out)
    }

    /// Parses a checkpoint; the loaded encoder is trainable.
    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(ENCODER_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(PalError::Format { offset: at, msg: format!("unsupported version {version}") });
        }
        let at = r.offset();
        let n_layers = r.u32("layer count")? as usize;
        if n_layers < 2 {
            return Err(PalError::Format { offset: at, msg: format!("need >= 2 layers, got {n_layers}") });
        }
        let mut dims = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let at = r.offset();
            let din = r.u32("layer input dim")? as usize;
            let dout = r.u32("layer output dim")? as usize;
            if din == 0 || dout == 0 {
                return Err(PalError::Format { offset: at, msg: format!("layer {i} has a zero dim") });
            }
            if let Some(&(_, prev_out)) = dims.last() {
                if prev_out != din {
                    return Err(PalError::Format {
                        offset: at,
                        msg: format!("layer {i} input {din} does not match previous output {prev_out}"),
                    });
                }
            }
            dims.push((din, dout));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for &(din, dout) in &dims {
            let w = r.f32s(din * dout, "weights")?;
            let b = r.f32s(dout, "bias")?;
            layers.push(Linear {
                weight: Tensor::matrix(din, dout, w)?.with_grad(),
                bias: Tensor::matrix(1, dout, b)?.with_grad(),
            });
        }
        r.finish()?;
        let config = EncoderConfig {
            input_dim: dims[0].0,
            hidden_dims: dims[..n_layers - 1].iter().map(|d| d.1).collect(),
            embed_dim: dims[n_layers - 1].1,
            seed: 0,
        };
        config.validate()?;
        Ok(Self { layers, config, frozen: false })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the checkpoint bytes, hex encoded.
    pub fn fingerprint(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Cosine-similarity classifier: `logits(c) = s * <z, w_c>` with unit rows `w_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineClassifier {
    /// `classes x dim`
    weights: Tensor,
    scale: f64,
}

/// Graph handles for one classifier instantiation. Every logit computed
/// through the same pass reads the same weight node.
#[derive(Clone, Copy, Debug)]
pub struct ClassifierPass {
    pub weights: Var,
    normalized: Var,
    scale: f64,
}

impl ClassifierPass {
    /// Wraps a `classes x dim` weight node already on `g`.
    pub fn from_var(g: &mut Graph, weights: Var, scale: f64) -> Self {
        let normalized = g.l2_normalize_rows(weights, L2_EPS);
        Self { weights, normalized, scale }
    }

    /// `m x classes` logits for `m x dim` unit embeddings.
    pub fn logits(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let sims = g.matmul_nt(z, self.normalized)?;
        Ok(g.scale(sims, self.scale))
    }

    /// Logits from the same weights without recording anything on the graph.
    pub fn logits_detached(&self, g: &Graph, z: &[f64], rows: usize) -> Result<Vec<f64>> {
        let (classes, dim) = g.shape(self.normalized);
        if z.len() != rows * dim {
            return Err(dim_err("cosine_logits", format!("{} values for {rows} rows of dim {dim}", z.len())));
        }
        let sims = matmul_nt(z, g.value(self.normalized), rows, dim, classes);
        Ok(sims.into_iter().map(|s| s * self.scale).collect())
    }
}

impl CosineClassifier {
    pub fn new(classes: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(PalError::Parameter("classifier needs classes and dim > 0".into()));
        }
        if !(scale > 0.0) {
            return Err(PalError::Parameter(format!("cosine scale must be > 0, got {scale}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..classes * dim).map(|_| rng.sample(StandardNormal)).collect();
        let mut clf = Self { weights: Tensor::matrix(classes, dim, w)?.with_grad(), scale };
        clf.renormalize();
        Ok(clf)
    }

    pub fn from_weights(weights: Tensor, scale: f64) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(dim_err("classifier", "weights must be a matrix"));
        }
        let mut clf = Self { weights: weights.with_grad(), scale };
        clf.renormalize();
        Ok(clf)
    }

    pub fn classes(&self) -> usize {
        self.weights.rows_cols().0
    }

    pub fn dim(&self) -> usize {
        self.weights.rows_cols().1
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    /// Rescales each weight row to unit length.
    pub fn renormalize(&mut self) {
        let d = self.dim();
        for row in self.weights.values_mut().chunks_exact_mut(d) {
            l2_normalize_in_place(row, L2_EPS);
        }
    }

    pub fn forward(&self, g: &mut Graph) -> ClassifierPass {
        let weights = g.input(&self.weights);
        ClassifierPass::from_var(g, weights, self.scale)
    }

    pub fn absorb_grads(&mut self, pass: &ClassifierPass, grads: &mut Gradients) {
        match grads.take(pass.weights) {
            Some(gr) if self.weights.requires_grad() => self.weights.set_grad(gr).expect("shape"),
            _ => self.weights.clear_grad(),
        }
    }

    /// Gradient-free logits for one unit embedding.
    pub fn cosine_logits(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.cosine_logits_batch(z, 1)
    }

    pub fn cosine_logits_batch(&self, z: &[f64], rows: usize) -> Result<Vec<f64>> {
        if z.len() != rows * self.dim() {
            return Err(dim_err("cosine_logits", format!("{} values for {rows} rows of dim {}", z.len(), self.dim())));
        }
        let mut w = self.weights.values().to_vec();
        for row in w.chunks_exact_mut(self.dim()) {
            l2_normalize_in_place(row, L2_EPS);
        }
        let sims = matmul_nt(z, &w, rows, self.dim(), self.classes());
        Ok(sims.into_iter().map(|s| s * self.scale).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CLASSIFIER_MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, to_u32(self.classes(), "classes")?);
        put_u32(&mut out, to_u32(self.dim(), "dim")?);
        put_f32s(&mut out, &[self.scale]);
        put_f32s(&mut out, self.weights.values());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CLASSIFIER_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(PalError::Format { offset: at, msg: format!("unsupported version {version}") });
        }
        let classes = r.u32("classes")? as usize;
        let dim = r.u32("dim")? as usize;
        let scale = r.f32s(1, "scale")?[0];
        let w = r.f32s(classes * dim, "weights")?;
        r.finish()?;
        Self::from_weights(Tensor::matrix(classes, dim, w)?, scale)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::pairwise_dot;
    use approx::assert_abs_diff_eq;

    fn enc(seed: u64) -> Encoder {
        Encoder::new(EncoderConfig { input_dim: 5, hidden_dims: vec![8, 6], embed_dim: 4, seed }).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::new(4, 0);
        c.embed_dim = 1;
        assert!(Encoder::new(c.clone()).is_err());
        c.embed_dim = 2;
        c.hidden_dims.clear();
        assert!(Encoder::new(c).is_err());
    }

    #[test]
    fn embed_is_deterministic_and_unit() {
        let e = enc(3);
        let x = [0.3, -1.0, 2.0, 0.5, 0.1];
        let a = e.embed(&x).unwrap();
        let b = enc(3).embed(&x).unwrap();
        assert_eq!(a, b);
        assert_abs_diff_eq!(pairwise_dot(&a, &a).sqrt(), 1.0, epsilon = 1e-6);
        assert!(e.embed(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn graph_and_plain_paths_agree_bitwise() {
        let e = enc(11);
        let x: Vec<f64> = (0..15).map(|i| (i as f64 * 0.71).sin()).collect();
        let mut g = Graph::new();
        let xv = g.constant(3, 5, x.clone()).unwrap();
        let pass = e.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(pass.embeddings), e.embed_batch(&x, 3).unwrap().as_slice());
    }

    #[test]
    fn frozen_encoder_gets_no_gradient() {
        let e = enc(1).frozen();
        let mut g = Graph::new();
        let x = g.parameter(1, 5, vec![0.2, 0.1, -0.4, 1.0, 0.3]).unwrap();
        let pass = e.forward(&mut g, x).unwrap();
        let s = g.sum(pass.embeddings);
        let mut grads = g.backward(s).unwrap();
        let mut e2 = e.clone();
        e2.absorb_grads(&pass, &mut grads);
        assert!(e2.params().all(|p| p.grad().is_none()));
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn checkpoint_round_trip_after_rounding() {
        let mut e = enc(5);
        e.round_to_f32();
        let bytes = e.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PALW");
        let back = Encoder::from_bytes(&bytes).unwrap();
        let x = [1.0, 0.0, -1.0, 0.5, 0.25];
        assert_eq!(back.embed(&x).unwrap(), e.embed(&x).unwrap());
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let e = enc(5);
        let mut bytes = e.to_bytes().unwrap();
        assert!(matches!(Encoder::from_bytes(&bytes[..bytes.len() - 3]), Err(PalError::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(Encoder::from_bytes(&bytes), Err(PalError::Format { offset: 0, .. })));
    }

    #[test]
    fn cosine_logit_examples() {
        let w = Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let clf = CosineClassifier::from_weights(w, 10.0).unwrap();
        assert_eq!(clf.cosine_logits(&[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 10.0, 0.0]);

        let w = Tensor::matrix(2, 4, vec![1., 0., 0., 0., 0., 1., 0., 0.]).unwrap();
        let clf = CosineClassifier::from_weights(w, 10.0).unwrap();
        assert_eq!(clf.cosine_logits(&[0.0, 0.0, 0.6, 0.8]).unwrap(), vec![0.0, 0.0]);

        // <z, w> = 0.5
        let w = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let clf = CosineClassifier::from_weights(w, 10.0).unwrap();
        let z = [0.5, 0.75f64.sqrt()];
        assert_abs_diff_eq!(clf.cosine_logits(&z).unwrap()[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn classifier_rows_unit_and_logits_bounded() {
        let clf = CosineClassifier::new(7, 4, 10.0, 9).unwrap();
        for r in clf.weights().values().chunks(4) {
            assert_abs_diff_eq!(pairwise_dot(r, r), 1.0, epsilon = 1e-12);
        }
        let z = crate::numeric::l2_normalize(&[0.3, -0.2, 0.9, 0.1], L2_EPS);
        assert!(clf.cosine_logits(&z).unwrap().iter().all(|l| l.abs() <= 10.0 + 1e-12));
    }

    #[test]
    fn classifier_round_trip() {
        let clf = CosineClassifier::new(3, 4, 10.0, 1).unwrap();
        let back = CosineClassifier::from_bytes(&clf.to_bytes().unwrap()).unwrap();
        assert_eq!(back.classes(), 3);
        assert_eq!(back.scale(), 10.0);
        for (a, b) in back.weights().values().iter().zip(clf.weights().values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
