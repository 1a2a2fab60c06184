//! Oracles and experiment fixtures shared by the integration and acceptance
//! targets.
#![allow(dead_code)]

use sparsehead::analysis::minmax_stats;
use sparsehead::autodiff::{Tape, Tensor};
use sparsehead::datagen::{sample_world, AugmentationRule, Mixing, SyntheticWorld, WorldConfig};
use sparsehead::evaluation::Metric;
use sparsehead::exec::Exec;
use sparsehead::models::{EncoderSpec, HeadSpec, ModelState};
use sparsehead::objectives::{total_loss, ContrastiveBatch, SparsityConfig, SparsityMode};
use sparsehead::rng;
use sparsehead::Result;
use sparsehead::trainer::{active_columns, snapshot_diagnostics, train, TrainConfig, TrainData};

/// Double-loop InfoNCE: each row is an anchor, its partner `i^1` the positive,
/// every other row in the denominator.
pub fn infonce_oracle(z: &Tensor, tau: f64) -> f64 {
    let n = z.rows();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut loss = 0.0;
    for i in 0..n {
        let pos = (cos(z.row(i), z.row(i ^ 1)) / tau).exp();
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (cos(z.row(i), z.row(j)) / tau).exp();
            }
        }
        loss -= (pos / denom).ln();
    }
    loss
}

/// Exhaustive kNN: rank every training row, then count votes.
pub fn knn_oracle(train: &Tensor, labels: &[u16], test: &Tensor, k: usize, metric: Metric) -> Vec<u16> {
    let sim = |a: &[f64], b: &[f64]| -> f64 {
        match metric {
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                dot / (na * nb)
            }
            Metric::Euclidean => -a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt(),
        }
    };
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    (0..test.rows())
        .map(|q| {
            let mut ranked: Vec<(f64, usize)> = (0..train.rows()).map(|i| (sim(test.row(q), train.row(i)), i)).collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![(0usize, 0.0f64); classes];
            for &(s, i) in &ranked[..k] {
                let c = labels[i] as usize;
                votes[c].0 += 1;
                votes[c].1 += s;
            }
            let mut best = 0;
            for c in 1..classes {
                let (n, s) = votes[c];
                let (bn, bs) = votes[best];
                if n > bn || (n == bn && s > bs) {
                    best = c;
                }
            }
            best as u16
        })
        .collect()
}

/// Loss of `model` on a fixed interleaved batch, as a plain value.
pub fn penalty_loss(model: &ModelState, x: &Tensor, lambda: f64) -> Result<f64> {
    let cfg = SparsityConfig { lambda, mode: SparsityMode::Penalty, zero_threshold: 1e-8 };
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let z = bound.project(bound.encode(tape.constant(x.clone()))?)?;
    let batch = ContrastiveBatch::new(z, 0.5)?;
    Ok(total_loss(&batch, &bound, &cfg)?.total.item())
}

/// Autodiff gradient of [`penalty_loss`] for every parameter, in canonical order.
pub fn penalty_grads(model: &ModelState, x: &Tensor, lambda: f64) -> Result<Vec<Vec<f64>>> {
    let cfg = SparsityConfig { lambda, mode: SparsityMode::Penalty, zero_threshold: 1e-8 };
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let z = bound.project(bound.encode(tape.constant(x.clone()))?)?;
    let batch = ContrastiveBatch::new(z, 0.5)?;
    let loss = total_loss(&batch, &bound, &cfg)?;
    tape.backward(loss.total)?;
    Ok(bound.grads())
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn gaussian_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_rows(rows, cols, rng::gaussian_vec(&mut r, rows * cols)).unwrap()
}

/// 8 subject + 8 nuisance latents through a tanh decoder into 32 dims, with
/// 4 classes read off the subject latents.
pub fn collapse_world(seed: u64) -> SyntheticWorld {
    let cfg = WorldConfig {
        n_subject: 8,
        n_nuisance: 8,
        obs_dim: 32,
        mixing: Mixing::Mlp { hidden: 64 },
        n_classes: 4,
        shuffle_features: false,
    };
    sample_world(&cfg, seed).unwrap()
}

/// Encoder `32→32→32` with ReLU, Adam at lr 3e-3, 2000 steps of batch 64.
pub fn collapse_config(head: HeadSpec, seed: u64) -> TrainConfig {
    let enc = EncoderSpec { input_dim: 32, hidden: vec![32], output_dim: 32, activation: Default::default() };
    let mut cfg = TrainConfig::new(enc, head, AugmentationRule::latent(1.0));
    cfg.steps = 2000;
    cfg.adam.lr = 3e-3;
    cfg.seed = seed;
    cfg.sparsity = SparsityConfig { lambda: 0.0, mode: SparsityMode::Proximal, zero_threshold: 1e-8 };
    cfg.diag_every = Some(500);
    cfg
}

/// Post-training measurements on fresh samples of the world.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub seed: u64,
    pub lambda: f64,
    pub erank_r: usize,
    pub erank_z: usize,
    pub entropy_r: f64,
    pub entropy_z: f64,
    pub active_cols: Option<usize>,
    /// Active columns at each logged snapshot.
    pub active_trace: Vec<Option<usize>>,
    pub minmax_z: f64,
    pub model: ModelState,
}

pub fn run_collapse(world: &SyntheticWorld, cfg: &TrainConfig) -> RunSummary {
    let train_set = world.sample_dataset(4096, cfg.seed + 100).unwrap();
    let latents = train_set.latents.as_ref().unwrap();
    let (model, record) = train(cfg, TrainData::Synthetic { world, latents, supports: None }).unwrap();
    let eval = world.sample_dataset(2000, cfg.seed + 999).unwrap();
    let d = snapshot_diagnostics(&model, &eval.features, 0, Exec::Sequential).unwrap();
    let z = model.project(&model.encode(&eval.features).unwrap()).unwrap();
    let minmax_z = minmax_stats(&z, 200, Exec::Sequential).unwrap().mean;
    RunSummary {
        seed: cfg.seed,
        lambda: cfg.sparsity.lambda,
        erank_r: d.spectrum.erank_r.count,
        erank_z: d.spectrum.erank_z.count,
        entropy_r: d.spectrum.erank_r.entropy,
        entropy_z: d.spectrum.erank_z.entropy,
        active_cols: active_columns(&model, cfg.sparsity.zero_threshold),
        active_trace: record.snapshots.iter().map(|s| s.active_cols).collect(),
        minmax_z,
        model,
    }
}
