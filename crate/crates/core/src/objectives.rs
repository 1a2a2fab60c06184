//! InfoNCE over paired views and the column-wise L2,1 head penalty.

use serde::{Deserialize, Serialize};

use crate::autodiff::{column_norms, Tape, Tensor, Var, MIN_ROW_NORM};
use crate::error::{Error, Result};
use crate::models::BoundModel;

/// Embeddings of `N` samples under two augmentations, interleaved so that rows
/// `2i` and `2i+1` are the views of sample `i`.
#[derive(Clone, Copy, Debug)]
pub struct ContrastiveBatch<'t> {
    z: Var<'t>,
    tau: f64,
}

impl<'t> ContrastiveBatch<'t> {
    pub fn new(z: Var<'t>, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let value = z.value();
        let (rows, _) = value.dims2()?;
        if rows % 2 != 0 || rows == 0 {
            return Err(Error::Contract(format!("need an even, nonzero row count, got {rows}")));
        }
        for i in 0..rows {
            let norm = value.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= MIN_ROW_NORM {
                return Err(Error::Degenerate(format!("embedding row {i} has norm {norm:e}")));
            }
        }
        Ok(Self { z, tau })
    }

    pub fn embeddings(&self) -> Var<'t> {
        self.z
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn anchors(&self) -> usize {
        self.z.shape()[0]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    /// λ·‖W‖₂,₁ is added to the loss and differentiated.
    #[default]
    Penalty,
    /// The optimizer applies the block soft-threshold after each step.
    Proximal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityConfig {
    pub lambda: f64,
    #[serde(default)]
    pub mode: SparsityMode,
    #[serde(default = "default_zero_threshold")]
    pub zero_threshold: f64,
}

fn default_zero_threshold() -> f64 {
    1e-8
}

impl Default for SparsityConfig {
    fn default() -> Self {
        Self { lambda: 1e-4, mode: SparsityMode::Penalty, zero_threshold: default_zero_threshold() }
    }
}

impl SparsityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(self.zero_threshold >= 0.0) {
            return Err(Error::Config("zero_threshold must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Summed InfoNCE: every row is an anchor once, its partner row is the
/// positive, and the denominator runs over all rows except the anchor itself
/// (the positive included).
pub fn infonce<'t>(batch: &ContrastiveBatch<'t>) -> Result<Var<'t>> {
    let z = batch.z;
    let tape = z.tape();
    let n = batch.anchors();
    let mut off_diag = vec![1.0; n * n];
    let mut positive = vec![0.0; n * n];
    for i in 0..n {
        off_diag[i * n + i] = 0.0;
        positive[i * n + (i ^ 1)] = 1.0;
    }
    let off_diag = tape.constant(Tensor::from_rows(n, n, off_diag)?);
    let positive = tape.constant(Tensor::from_rows(n, n, positive)?);

    let logits = z.cosine_matrix()?.scale(1.0 / batch.tau)?;
    let log_denominators = logits.exp()?.mul(off_diag)?.sum_rows()?.log()?.sum()?;
    let positives = logits.mul(positive)?.sum()?;
    log_denominators.sub(positives)
}

/// InfoNCE value of an interleaved embedding matrix, without gradients.
pub fn infonce_value(z: &Tensor, tau: f64) -> Result<f64> {
    let tape = Tape::new();
    let batch = ContrastiveBatch::new(tape.constant(z.clone()), tau)?;
    Ok(infonce(&batch)?.item())
}

/// Σⱼ ‖W₍:,ⱼ₎‖₂.
pub fn l21_norm(w: &Tensor) -> Result<f64> {
    let (r, c) = w.dims2()?;
    Ok(column_norms(w.data(), r, c).iter().sum())
}

/// Indices of columns whose Euclidean norm exceeds `threshold`.
pub fn column_support(w: &Tensor, threshold: f64) -> Result<Vec<usize>> {
    if !(threshold >= 0.0) {
        return Err(Error::Parameter(format!("threshold must be ≥ 0, got {threshold}")));
    }
    let (r, c) = w.dims2()?;
    Ok(column_norms(w.data(), r, c)
        .into_iter()
        .enumerate()
        .filter_map(|(j, n)| (n > threshold).then_some(j))
        .collect())
}

/// Tape outputs of the combined objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'t> {
    pub total: Var<'t>,
    pub infonce: Var<'t>,
    /// λ·‖W‖₂,₁, absent for identity heads.
    pub regularizer: Option<Var<'t>>,
}

/// `infonce + λ·l21(regularized_matrix)` in penalty mode.
pub fn total_loss<'t>(
    batch: &ContrastiveBatch<'t>,
    model: &BoundModel<'_, 't>,
    cfg: &SparsityConfig,
) -> Result<LossTerms<'t>> {
    cfg.validate()?;
    if cfg.mode != SparsityMode::Penalty {
        return Err(Error::Config(
            "total_loss is for penalty mode; proximal mode regularizes in the optimizer".into(),
        ));
    }
    let nce = infonce(batch)?;
    match model.regularized_var() {
        None if cfg.lambda > 0.0 => Err(Error::Config(
            "identity head has no matrix to regularize; set lambda = 0".into(),
        )),
        None => Ok(LossTerms { total: nce, infonce: nce, regularizer: None }),
        Some(_) if cfg.lambda == 0.0 => Ok(LossTerms { total: nce, infonce: nce, regularizer: None }),
        Some(w) => {
            let reg = w.l21()?.scale(cfg.lambda)?;
            Ok(LossTerms { total: nce.add(reg)?, infonce: nce, regularizer: Some(reg) })
        }
    }
}
