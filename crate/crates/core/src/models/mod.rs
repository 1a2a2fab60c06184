//! MLP encoder and the three projection-head variants.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Spec(format!("encoder widths must be ≥ 1: {self:?}")));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Identity,
    Linear,
    Nonlinear,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Hidden width of the nonlinear head; defaults to `input_dim`.
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Per-feature standardization (running statistics) of the linear head's
    /// input, or after the first nonlinear-head layer.
    #[serde(default)]
    pub standardize: bool,
}

impl HeadSpec {
    pub fn identity(d: usize) -> Self {
        Self { kind: HeadKind::Identity, input_dim: d, output_dim: d, hidden: None, standardize: false }
    }

    pub fn linear(d: usize, m: usize) -> Self {
        Self { kind: HeadKind::Linear, input_dim: d, output_dim: m, hidden: None, standardize: false }
    }

    pub fn nonlinear(d: usize, hidden: usize, m: usize) -> Self {
        Self {
            kind: HeadKind::Nonlinear,
            input_dim: d,
            output_dim: m,
            hidden: Some(hidden),
            standardize: false,
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.hidden.unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Spec("head widths must be ≥ 1".into()));
        }
        match self.kind {
            HeadKind::Identity if self.output_dim != self.input_dim => Err(Error::Spec(format!(
                "identity head needs m = d, got m={} d={}",
                self.output_dim, self.input_dim
            ))),
            HeadKind::Identity if self.standardize => {
                Err(Error::Spec("identity head cannot standardize".into()))
            }
            HeadKind::Nonlinear if self.hidden_width() == 0 => {
                Err(Error::Spec("nonlinear head hidden width must be ≥ 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Affine layer `y = x·Wᵀ + b` with `W` stored as `out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Dense {
    fn glorot(rng: &mut rng::Rng, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-s..s)).collect();
        Dense {
            weight: Tensor::from_rows(fan_out, fan_in, data).expect("glorot shape"),
            bias: bias.then(|| Tensor::zeros(vec![fan_out])),
        }
    }
}

/// Running per-feature mean and variance; applied without affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Standardizer {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    fn new(width: usize) -> Self {
        Self { mean: vec![0.0; width], var: vec![1.0; width] }
    }

    fn inv_std(&self) -> Vec<f64> {
        self.var.iter().map(|v| 1.0 / (v + Self::EPS).sqrt()).collect()
    }

    fn update(&mut self, h: &Tensor) {
        let (n, c) = (h.rows(), h.cols());
        if n < 2 {
            return;
        }
        for j in 0..c {
            let mean = (0..n).map(|i| h.get(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (h.get(i, j) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            self.mean[j] += Self::MOMENTUM * (mean - self.mean[j]);
            self.var[j] += Self::MOMENTUM * (var - self.var[j]);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadParams {
    Identity,
    Linear { weight: Tensor, standardizer: Option<Standardizer> },
    Nonlinear { first: Dense, last: Dense, standardizer: Option<Standardizer> },
}

impl HeadParams {
    pub fn standardizer(&self) -> Option<&Standardizer> {
        match self {
            Self::Identity => None,
            Self::Linear { standardizer, .. } | Self::Nonlinear { standardizer, .. } => standardizer.as_ref(),
        }
    }

    pub fn standardizer_mut(&mut self) -> Option<&mut Standardizer> {
        match self {
            Self::Identity => None,
            Self::Linear { standardizer, .. } | Self::Nonlinear { standardizer, .. } => standardizer.as_mut(),
        }
    }
}

/// Encoder parameters θ and head parameters φ together with their specs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub encoder_spec: EncoderSpec,
    pub head_spec: HeadSpec,
    pub encoder: Vec<Dense>,
    pub head: HeadParams,
}

pub fn init_model(enc: EncoderSpec, head: HeadSpec, seed: u64) -> Result<ModelState> {
    enc.validate()?;
    head.validate()?;
    if head.input_dim != enc.output_dim {
        return Err(Error::Spec(format!(
            "head input {} does not match representation dim {}",
            head.input_dim, enc.output_dim
        )));
    }
    let mut rng = rng::seeded(seed);
    let encoder = enc
        .widths()
        .windows(2)
        .map(|w| Dense::glorot(&mut rng, w[0], w[1], true))
        .collect();
    let head_params = match head.kind {
        HeadKind::Identity => HeadParams::Identity,
        HeadKind::Linear => HeadParams::Linear {
            weight: Dense::glorot(&mut rng, head.input_dim, head.output_dim, false).weight,
            standardizer: head.standardize.then(|| Standardizer::new(head.input_dim)),
        },
        HeadKind::Nonlinear => {
            let h = head.hidden_width();
            HeadParams::Nonlinear {
                first: Dense::glorot(&mut rng, head.input_dim, h, true),
                last: Dense::glorot(&mut rng, h, head.output_dim, true),
                standardizer: head.standardize.then(|| Standardizer::new(h)),
            }
        }
    };
    Ok(ModelState { encoder_spec: enc, head_spec: head, encoder, head: head_params })
}

impl ModelState {
    /// Trainable tensors in canonical order: encoder `(W, b)` pairs, then head
    /// parameters.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.encoder {
            out.push(&layer.weight);
            out.extend(layer.bias.as_ref());
        }
        match &self.head {
            HeadParams::Identity => {}
            HeadParams::Linear { weight, .. } => out.push(weight),
            HeadParams::Nonlinear { first, last, .. } => {
                for l in [first, last] {
                    out.push(&l.weight);
                    out.extend(l.bias.as_ref());
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.encoder {
            out.push(&mut layer.weight);
            out.extend(layer.bias.as_mut());
        }
        match &mut self.head {
            HeadParams::Identity => {}
            HeadParams::Linear { weight, .. } => out.push(weight),
            HeadParams::Nonlinear { first, last, .. } => {
                for l in [first, last] {
                    out.push(&mut l.weight);
                    out.extend(l.bias.as_mut());
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn encoder_param_count(&self) -> usize {
        self.encoder
            .iter()
            .map(|l| l.weight.len() + l.bias.as_ref().map_or(0, Tensor::len))
            .sum()
    }

    /// Position of the regularized head matrix within [`ModelState::params`].
    pub fn regularized_index(&self) -> Option<usize> {
        let enc = self.encoder.iter().map(|l| 1 + usize::from(l.bias.is_some())).sum::<usize>();
        match &self.head {
            HeadParams::Identity => None,
            HeadParams::Linear { .. } => Some(enc),
            HeadParams::Nonlinear { first, .. } => Some(enc + 1 + usize::from(first.bias.is_some())),
        }
    }

    /// The matrix SparseHead penalizes: `W` for a linear head, the last
    /// layer's weights for a nonlinear head.
    pub fn regularized_matrix(&self) -> Result<&Tensor> {
        match &self.head {
            HeadParams::Identity => {
                Err(Error::Unsupported("identity head has no regularized matrix".into()))
            }
            HeadParams::Linear { weight, .. } => Ok(weight),
            HeadParams::Nonlinear { last, .. } => Ok(&last.weight),
        }
    }

    pub fn regularized_matrix_mut(&mut self) -> Result<&mut Tensor> {
        match &mut self.head {
            HeadParams::Identity => {
                Err(Error::Unsupported("identity head has no regularized matrix".into()))
            }
            HeadParams::Linear { weight, .. } => Ok(weight),
            HeadParams::Nonlinear { last, .. } => Ok(&mut last.weight),
        }
    }

    /// Records every parameter on `tape` as a gradient leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundModel<'_, 't> {
        let vars = self
            .params()
            .into_iter()
            .map(|p| tape.leaf(p.clone().with_grad()))
            .collect();
        BoundModel { model: self, tape, vars }
    }

    /// Records every parameter on `tape` as a constant.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> BoundModel<'_, 't> {
        let vars = self.params().into_iter().map(|p| tape.constant(p.clone())).collect();
        BoundModel { model: self, tape, vars }
    }

    /// Representation batch `f_θ(x)` without gradient tracking.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        Ok(bound.encode(tape.constant(x.clone()))?.value())
    }

    /// Embedding batch `h_φ(r)` without gradient tracking.
    pub fn project(&self, r: &Tensor) -> Result<Tensor> {
        if let HeadParams::Identity = self.head {
            check_cols(r, self.head_spec.input_dim)?;
            return Ok(r.clone());
        }
        let tape = Tape::new();
        let bound = self.bind_frozen(&tape);
        Ok(bound.project(tape.constant(r.clone()))?.value())
    }

    /// Folds the batch statistics of the standardized head activations into
    /// the running standardizer; no-op when standardization is off.
    pub fn update_standardizer(&mut self, r: &Tensor) -> Result<()> {
        if let HeadParams::Linear { standardizer: Some(st), .. } = &mut self.head {
            st.update(r);
        }
        if let HeadParams::Nonlinear { first, standardizer: Some(st), .. } = &mut self.head {
            let mut h = r.matmul(&first.weight.transpose()?)?;
            if let Some(b) = &first.bias {
                let c = h.cols();
                for (i, v) in h.data_mut().iter_mut().enumerate() {
                    *v += b.data()[i % c];
                }
            }
            st.update(&h);
        }
        Ok(())
    }

    /// Fingerprint of the encoder parameters.
    pub fn encoder_checksum(&self) -> u64 {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for layer in &self.encoder {
            for v in layer.weight.data().iter().chain(layer.bias.iter().flat_map(|b| b.data())) {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

fn check_cols(x: &Tensor, expected: usize) -> Result<()> {
    let (_, c) = x.dims2()?;
    if c != expected {
        return Err(Error::Dimension(format!("expected {expected} columns, got {c}")));
    }
    Ok(())
}

/// A model whose parameters live on a tape for one forward/backward pass.
pub struct BoundModel<'m, 't> {
    model: &'m ModelState,
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'m, 't> BoundModel<'m, 't> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn model(&self) -> &'m ModelState {
        self.model
    }

    pub fn regularized_var(&self) -> Option<Var<'t>> {
        self.model.regularized_index().map(|i| self.vars[i])
    }

    /// Gradients of every bound parameter, in canonical order.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| vec![0.0; v.value().len()]))
            .collect()
    }

    fn dense(&self, x: Var<'t>, w: usize, b: Option<usize>) -> Result<Var<'t>> {
        let y = x.matmul(self.vars[w].t()?)?;
        match b {
            Some(b) => y.add(self.vars[b]),
            None => Ok(y),
        }
    }

    pub fn encode(&self, x: Var<'t>) -> Result<Var<'t>> {
        check_cols(&x.value(), self.model.encoder_spec.input_dim)?;
        let mut h = x;
        let mut idx = 0;
        let last = self.model.encoder.len() - 1;
        for (li, layer) in self.model.encoder.iter().enumerate() {
            let b = layer.bias.as_ref().map(|_| idx + 1);
            h = self.dense(h, idx, b)?;
            idx += 1 + usize::from(b.is_some());
            if li < last {
                h = match self.model.encoder_spec.activation {
                    Activation::Relu => h.relu()?,
                };
            }
        }
        Ok(h)
    }

    fn standardize(&self, h: Var<'t>, st: &Standardizer) -> Result<Var<'t>> {
        let mean = self.tape.constant(Tensor::vector(st.mean.clone()));
        let inv = self.tape.constant(Tensor::vector(st.inv_std()));
        h.sub(mean)?.mul(inv)
    }

    pub fn project(&self, r: Var<'t>) -> Result<Var<'t>> {
        check_cols(&r.value(), self.model.head_spec.input_dim)?;
        let base = self.model.encoder.iter().map(|l| 1 + usize::from(l.bias.is_some())).sum();
        match &self.model.head {
            HeadParams::Identity => Ok(r),
            HeadParams::Linear { standardizer, .. } => {
                let r = match standardizer {
                    Some(st) => self.standardize(r, st)?,
                    None => r,
                };
                self.dense(r, base, None)
            }
            HeadParams::Nonlinear { first, last, standardizer } => {
                let b1 = first.bias.as_ref().map(|_| base + 1);
                let w2 = base + 1 + usize::from(b1.is_some());
                let b2 = last.bias.as_ref().map(|_| w2 + 1);
                let mut h = self.dense(r, base, b1)?;
                if let Some(st) = standardizer {
                    h = self.standardize(h, st)?;
                }
                self.dense(h.relu()?, w2, b2)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(x: usize, hidden: &[usize], d: usize) -> EncoderSpec {
        EncoderSpec { input_dim: x, hidden: hidden.to_vec(), output_dim: d, activation: Activation::Relu }
    }

    #[test]
    fn determinism_and_seed_sensitivity() {
        let a = init_model(enc(8, &[16], 4), HeadSpec::linear(4, 3), 0).unwrap();
        let b = init_model(enc(8, &[16], 4), HeadSpec::linear(4, 3), 0).unwrap();
        let c = init_model(enc(8, &[16], 4), HeadSpec::linear(4, 3), 1).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.encoder[0].weight, c.encoder[0].weight);
    }

    #[test]
    fn encoder_parameter_count() {
        let m = init_model(enc(8, &[16], 4), HeadSpec::identity(4), 0).unwrap();
        assert_eq!(m.encoder_param_count(), 212);
        assert_eq!(m.param_count(), 212);
    }

    #[test]
    fn glorot_bounds_and_zero_bias() {
        let m = init_model(enc(8, &[16], 4), HeadSpec::identity(4), 3).unwrap();
        let s = (6.0f64 / 24.0).sqrt();
        assert!(m.encoder[0].weight.data().iter().all(|w| w.abs() <= s));
        assert!(m.encoder[0].bias.as_ref().unwrap().data().iter().all(|b| *b == 0.0));
    }

    #[test]
    fn identity_head_requires_matching_dims() {
        let bad = HeadSpec { kind: HeadKind::Identity, input_dim: 4, output_dim: 3, hidden: None, standardize: false };
        assert!(matches!(init_model(enc(8, &[], 4), bad, 0), Err(Error::Spec(_))));
    }

    #[test]
    fn zero_hidden_encoder_is_affine() {
        let mut m = init_model(enc(3, &[], 2), HeadSpec::identity(2), 5).unwrap();
        m.encoder[0].bias = Some(Tensor::vector(vec![0.5, -1.0]));
        let x = Tensor::matrix(&[&[1.0, 2.0, 3.0], &[-1.0, 0.0, 4.0]]).unwrap();
        let r = m.encode(&x).unwrap();
        let w = &m.encoder[0].weight;
        for i in 0..2 {
            for j in 0..2 {
                let expect: f64 = (0..3).map(|p| x.get(i, p) * w.get(j, p)).sum::<f64>()
                    + m.encoder[0].bias.as_ref().unwrap().data()[j];
                assert!((r.get(i, j) - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn empty_batch_passes_through() {
        let m = init_model(enc(3, &[5], 2), HeadSpec::nonlinear(2, 4, 2), 0).unwrap();
        let x = Tensor::from_rows(0, 3, vec![]).unwrap();
        let r = m.encode(&x).unwrap();
        assert_eq!(r.shape(), &[0, 2]);
        assert_eq!(m.project(&r).unwrap().shape(), &[0, 2]);
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let m = init_model(enc(3, &[], 2), HeadSpec::identity(2), 0).unwrap();
        let x = Tensor::zeros(vec![2, 4]);
        assert!(matches!(m.encode(&x), Err(Error::Dimension(_))));
        assert!(matches!(m.project(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn identity_and_scaled_linear_heads() {
        let r = Tensor::matrix(&[&[0.1, -2.0], &[3.5, 1e-9]]).unwrap();
        let id = init_model(enc(3, &[], 2), HeadSpec::identity(2), 0).unwrap();
        assert_eq!(id.project(&r).unwrap(), r);

        let mut lin = init_model(enc(3, &[], 2), HeadSpec::linear(2, 2), 0).unwrap();
        *lin.regularized_matrix_mut().unwrap() = Tensor::matrix(&[&[2.0, 0.0], &[0.0, 2.0]]).unwrap();
        let z = lin.project(&r).unwrap();
        for (a, b) in z.data().iter().zip(r.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn regularized_matrix_selection() {
        let id = init_model(enc(3, &[], 2), HeadSpec::identity(2), 0).unwrap();
        assert!(matches!(id.regularized_matrix(), Err(Error::Unsupported(_))));
        assert_eq!(id.regularized_index(), None);

        let lin = init_model(enc(3, &[], 2), HeadSpec::linear(2, 5), 0).unwrap();
        assert_eq!(lin.regularized_matrix().unwrap().shape(), &[5, 2]);
        assert_eq!(lin.params()[lin.regularized_index().unwrap()].shape(), &[5, 2]);

        let mut nl = init_model(enc(3, &[], 2), HeadSpec::nonlinear(2, 7, 5), 0).unwrap();
        assert_eq!(nl.regularized_matrix().unwrap().shape(), &[5, 7]);
        let idx = nl.regularized_index().unwrap();
        assert_eq!(nl.params()[idx].shape(), &[5, 7]);

        nl.regularized_matrix_mut().unwrap().data_mut()[0] = 42.0;
        assert_eq!(nl.regularized_matrix().unwrap().data()[0], 42.0);
    }

    #[test]
    fn standardizer_updates_running_stats() {
        let mut spec = HeadSpec::nonlinear(2, 3, 2);
        spec.standardize = true;
        let mut m = init_model(enc(2, &[], 2), spec, 0).unwrap();
        let r = Tensor::matrix(&[&[1.0, 2.0], &[3.0, -1.0], &[0.0, 0.5]]).unwrap();
        let before = m.project(&r).unwrap();
        m.update_standardizer(&r).unwrap();
        let HeadParams::Nonlinear { standardizer: Some(st), .. } = &m.head else { panic!() };
        assert!(st.mean.iter().any(|v| *v != 0.0));
        assert_ne!(m.project(&r).unwrap(), before);
    }
}
