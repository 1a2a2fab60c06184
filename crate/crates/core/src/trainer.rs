//! Contrastive training loop and periodic spectral diagnostics.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{minmax_stats, MinMaxStats, SpectrumReport};
use crate::autodiff::{Tape, Tensor};
use crate::datagen::{make_views, AugmentationRule, ImageLayout, SyntheticWorld, ViewSource};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::models::{init_model, EncoderSpec, HeadSpec, ModelState};
use crate::objectives::{column_support, infonce, l21_norm, total_loss, ContrastiveBatch, SparsityConfig, SparsityMode};
use crate::optimizer::{prox_l21_in_place, AdamConfig, AdamState};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub sparsity: SparsityConfig,
    pub adam: AdamConfig,
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
    pub augmentation: AugmentationRule,
    #[serde(default)]
    pub seed: u64,
    /// Diagnostics cadence; defaults to `max(steps/20, 1)`.
    #[serde(default)]
    pub diag_every: Option<usize>,
    /// Rows of the training set used for diagnostics.
    #[serde(default = "default_diag_samples")]
    pub diag_samples: usize,
    /// Anchors used for the embedding min-max statistic (0 disables it).
    #[serde(default)]
    pub diag_minmax_anchors: usize,
}

fn default_tau() -> f64 {
    0.5
}
fn default_diag_samples() -> usize {
    512
}

impl TrainConfig {
    pub fn new(encoder: EncoderSpec, head: HeadSpec, augmentation: AugmentationRule) -> Self {
        Self {
            batch_size: 64,
            steps: 1000,
            tau: default_tau(),
            sparsity: SparsityConfig::default(),
            adam: AdamConfig::new(1e-3),
            encoder,
            head,
            augmentation,
            seed: 0,
            diag_every: None,
            diag_samples: default_diag_samples(),
            diag_minmax_anchors: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be ≥ 2, got {}", self.batch_size)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be ≥ 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.adam.lr)));
        }
        if self.diag_every == Some(0) {
            return Err(Error::Config("diag_every must be ≥ 1".into()));
        }
        self.sparsity.validate()?;
        self.augmentation.validate()?;
        self.encoder.validate()?;
        self.head.validate()
    }

    pub fn diag_cadence(&self) -> usize {
        self.diag_every.unwrap_or((self.steps / 20).max(1))
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Training examples together with the view-generation mechanism they admit.
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    /// Latents of a synthetic world. With `supports`, each mini-batch draws one
    /// support and keeps exactly those latent coordinates shared across views.
    Synthetic { world: &'a SyntheticWorld, latents: &'a Tensor, supports: Option<&'a [Vec<usize>]> },
    Features { x: &'a Tensor, layout: Option<ImageLayout> },
}

impl TrainData<'_> {
    pub fn len(&self) -> usize {
        match self {
            TrainData::Synthetic { latents, .. } => latents.rows(),
            TrainData::Features { x, .. } => x.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Observations of the first `n` rows.
    pub fn observations(&self, n: usize) -> Result<Tensor> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        match self {
            TrainData::Synthetic { world, latents, .. } => world.decode(&latents.select_rows(&idx)),
            TrainData::Features { x, .. } => Ok(x.select_rows(&idx)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub infonce: f64,
    /// λ·‖W‖₂,₁ of the regularized matrix (after the step's prox, in proximal mode).
    pub regularizer: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    pub loss_infonce: f64,
    pub loss_reg: f64,
    pub active_cols: Option<usize>,
    pub erank_r: usize,
    pub erank_z: usize,
    pub erank_entropy_r: f64,
    pub erank_entropy_z: f64,
    pub minmax_z: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    /// One entry per executed step.
    pub losses: Vec<StepLoss>,
    pub snapshots: Vec<Snapshot>,
    pub wall_clock_secs: f64,
}

#[derive(Serialize)]
struct JsonlLine<'a> {
    step: usize,
    loss_infonce: f64,
    loss_infonce_per_anchor: f64,
    loss_reg: f64,
    active_cols: Option<usize>,
    erank_r: usize,
    erank_z: usize,
    erank_entropy_r: f64,
    erank_entropy_z: f64,
    minmax_z: Option<f64>,
    config_hash: &'a str,
}

impl RunRecord {
    /// One JSON object per snapshot. Wall-clock time is left out so reruns
    /// are byte-identical.
    pub fn write_jsonl<W: Write>(&self, mut w: W, anchors: usize) -> Result<()> {
        for s in &self.snapshots {
            let line = JsonlLine {
                step: s.step,
                loss_infonce: s.loss_infonce,
                loss_infonce_per_anchor: s.loss_infonce / anchors.max(1) as f64,
                loss_reg: s.loss_reg,
                active_cols: s.active_cols,
                erank_r: s.erank_r,
                erank_z: s.erank_z,
                erank_entropy_r: s.erank_entropy_r,
                erank_entropy_z: s.erank_entropy_z,
                minmax_z: s.minmax_z,
                config_hash: &self.config_hash,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn final_snapshot(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    pub spectrum: SpectrumReport,
    pub minmax_z: Option<MinMaxStats>,
    pub minmax_r: Option<MinMaxStats>,
}

/// Spectra of `R = f(x)` and `Z = h(R)` over `eval`, plus min-max ratios over
/// the first `minmax_anchors` rows (skipped when 0).
pub fn snapshot_diagnostics(model: &ModelState, eval: &Tensor, minmax_anchors: usize, exec: Exec) -> Result<Diagnostics> {
    if eval.rows() == 0 {
        return Err(Error::InsufficientData("diagnostics need a nonempty eval set".into()));
    }
    let r = model.encode(eval)?;
    let z = model.project(&r)?;
    let spectrum = SpectrumReport::compute(&r, &z)?;
    let (minmax_z, minmax_r) = if minmax_anchors > 0 {
        (Some(minmax_stats(&z, minmax_anchors, exec)?), Some(minmax_stats(&r, minmax_anchors, exec)?))
    } else {
        (None, None)
    };
    Ok(Diagnostics { spectrum, minmax_z, minmax_r })
}

/// Count of regularized-matrix columns with norm above the zero threshold.
pub fn active_columns(model: &ModelState, threshold: f64) -> Option<usize> {
    model
        .regularized_matrix()
        .ok()
        .map(|w| column_support(w, threshold).expect("regularized matrix is 2-D").len())
}

struct Batcher {
    order: Vec<usize>,
    pos: usize,
    size: usize,
}

impl Batcher {
    fn next(&mut self, rng: &mut rng::Rng) -> Vec<usize> {
        if self.pos + self.size > self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let b = self.order[self.pos..self.pos + self.size].to_vec();
        self.pos += self.size;
        b
    }
}

/// Row `2i` is the first view of sample `i`, row `2i+1` its second view.
fn interleave(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = a.dims2()?;
    let mut out = Vec::with_capacity(2 * n * d);
    for i in 0..n {
        out.extend_from_slice(a.row(i));
        out.extend_from_slice(b.row(i));
    }
    Tensor::from_rows(2 * n, d, out)
}

pub fn train(config: &TrainConfig, data: TrainData<'_>) -> Result<(ModelState, RunRecord)> {
    config.validate()?;
    if data.len() < config.batch_size {
        return Err(Error::InsufficientData(format!(
            "dataset has {} rows, batch_size is {}",
            data.len(),
            config.batch_size
        )));
    }
    if let TrainData::Synthetic { world, .. } = data {
        if world.obs_dim() != config.encoder.input_dim {
            return Err(Error::Config(format!(
                "encoder input {} does not match world observation dim {}",
                config.encoder.input_dim,
                world.obs_dim()
            )));
        }
    }
    let mut model = init_model(config.encoder.clone(), config.head.clone(), config.seed)?;
    let lambda = config.sparsity.lambda;
    let proximal = config.sparsity.mode == SparsityMode::Proximal;
    let reg_index = model.regularized_index();
    if reg_index.is_none() && lambda > 0.0 {
        return Err(Error::Config("identity head has no matrix to regularize; set lambda = 0".into()));
    }
    let eta = config.adam.lr * lambda;
    // the prox already shrinks the regularized matrix
    let decay: Vec<bool> = (0..model.params().len())
        .map(|i| !(proximal && eta > 0.0 && Some(i) == reg_index))
        .collect();
    let mut adam = AdamState::new(config.adam, &model.params());
    let mut data_rng = rng::derived(config.seed, 1);
    let mut batcher = Batcher { order: (0..data.len()).collect(), pos: usize::MAX / 2, size: config.batch_size };
    let diag_set = data.observations(config.diag_samples)?;
    let cadence = config.diag_cadence();

    let mut record = RunRecord { config_hash: config.hash(), ..RunRecord::default() };
    let start = Instant::now();
    let divergence = |record: &RunRecord, step: usize, reason: String| Error::Divergence {
        step,
        reason,
        record: Box::new(record.clone()),
    };

    for step in 1..=config.steps {
        let idx = batcher.next(&mut data_rng);
        let views = match data {
            TrainData::Synthetic { world, latents, supports } => {
                let s = latents.select_rows(&idx);
                let keep = supports.map(|sup| &sup[data_rng.random_range(0..sup.len())][..]);
                make_views(ViewSource::Latent { world, latents: &s, keep }, &config.augmentation, &mut data_rng)?
            }
            TrainData::Features { x, layout } => {
                let xb = x.select_rows(&idx);
                make_views(ViewSource::Features { x: &xb, layout }, &config.augmentation, &mut data_rng)?
            }
        };
        let xb = interleave(&views.x1, &views.x2)?;
        if model.head_spec.standardize {
            let r = model.encode(&xb)?;
            model.update_standardizer(&r)?;
        }

        let (nce_value, grads) = {
            let tape = Tape::new();
            let bound = model.bind(&tape);
            let r = bound.encode(tape.constant(xb))?;
            let z = bound.project(r)?;
            let batch = ContrastiveBatch::new(z, config.tau)?;
            let (total, nce) = if proximal {
                let nce = infonce(&batch)?;
                (nce, nce)
            } else {
                let terms = total_loss(&batch, &bound, &config.sparsity)?;
                (terms.total, terms.infonce)
            };
            let v = total.item();
            if !v.is_finite() {
                return Err(divergence(&record, step, format!("loss is {v}")));
            }
            tape.backward(total)?;
            (nce.item(), bound.grads())
        };

        let mut params = model.params_mut();
        adam.step(&mut params, &grads, &decay).map_err(|e| match e {
            Error::Divergence { reason, .. } => divergence(&record, step, reason),
            other => other,
        })?;
        if proximal && eta > 0.0 {
            prox_l21_in_place(model.regularized_matrix_mut()?, eta)?;
        }

        let reg = match model.regularized_matrix() {
            Ok(w) if lambda > 0.0 => lambda * l21_norm(w)?,
            _ => 0.0,
        };
        record.losses.push(StepLoss { infonce: nce_value, regularizer: reg });

        if step % cadence == 0 || step == config.steps {
            let diag = snapshot_diagnostics(&model, &diag_set, config.diag_minmax_anchors, Exec::default())?;
            record.snapshots.push(Snapshot {
                step,
                loss_infonce: nce_value,
                loss_reg: reg,
                active_cols: active_columns(&model, config.sparsity.zero_threshold),
                erank_r: diag.spectrum.erank_r.count,
                erank_z: diag.spectrum.erank_z.count,
                erank_entropy_r: diag.spectrum.erank_r.entropy,
                erank_entropy_z: diag.spectrum.erank_z.entropy,
                minmax_z: diag.minmax_z.map(|m| m.mean),
            });
        }
    }
    record.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok((model, record))
}
