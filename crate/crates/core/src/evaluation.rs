//! Linear probe and kNN evaluation on frozen representations.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_iters")]
    pub iters: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    /// Z-score features with training-set statistics before fitting.
    #[serde(default)]
    pub standardize: bool,
}

fn default_iters() -> usize {
    500
}
fn default_lr() -> f64 {
    0.1
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { iters: default_iters(), lr: default_lr(), seed: 0, standardize: false }
    }
}

/// Multinomial logistic regression on fixed features.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel {
    /// `classes × d`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    /// Mean cross-entropy before each iteration, then after the last.
    pub trace: Vec<f64>,
    /// Per-feature `(mean, std)` applied before the linear map.
    pub scaler: Option<(Vec<f64>, Vec<f64>)>,
}

impl ProbeModel {
    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    fn prepare(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != self.dim() {
            return Err(Error::Dimension(format!("features have dim {d}, probe expects {}", self.dim())));
        }
        Ok(match &self.scaler {
            Some((mean, std)) => apply_scaler(x, mean, std),
            None => x.clone(),
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<u16>> {
        let x = self.prepare(x)?;
        let logits = logits(&x, &self.weight, &self.bias)?;
        let k = self.classes();
        Ok(logits
            .chunks_exact(k)
            .map(|row| {
                let mut best = 0;
                for c in 1..k {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best as u16
            })
            .collect())
    }
}

fn apply_scaler(x: &Tensor, mean: &[f64], std: &[f64]) -> Tensor {
    let d = mean.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| (v - mean[i % d]) / std[i % d])
        .collect();
    Tensor::from_rows(x.rows(), d, data).expect("shape")
}

fn logits(x: &Tensor, w: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let mut out = x.matmul(&w.transpose()?)?.into_data();
    let k = b.len();
    for (i, v) in out.iter_mut().enumerate() {
        *v += b[i % k];
    }
    Ok(out)
}

/// Softmax probabilities in place; returns the mean cross-entropy.
fn softmax_xent(logits: &mut [f64], labels: &[u16], k: usize) -> f64 {
    let mut loss = 0.0;
    for (row, &y) in logits.chunks_exact_mut(k).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
        loss -= row[y as usize].max(f64::MIN_POSITIVE).ln();
    }
    loss / labels.len() as f64
}

fn check_labels(x: &Tensor, labels: &[u16], n_classes: usize) -> Result<usize> {
    let (n, _) = x.dims2()?;
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::InsufficientData("empty feature set".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
        return Err(Error::Parameter(format!("label {bad} out of range for {n_classes} classes")));
    }
    Ok(n)
}

pub fn train_probe(x: &Tensor, labels: &[u16], n_classes: usize, cfg: &ProbeConfig) -> Result<ProbeModel> {
    let n = check_labels(x, labels, n_classes)?;
    let d = x.cols();
    if n < n_classes {
        return Err(Error::InsufficientData(format!("{n} samples for {n_classes} classes")));
    }
    let first = labels[0];
    if n_classes < 2 || labels.iter().all(|&l| l == first) {
        return Err(Error::DegenerateTask("probe needs at least two distinct classes".into()));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::Config(format!("probe lr must be > 0, got {}", cfg.lr)));
    }

    let scaler = cfg.standardize.then(|| {
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for i in 0..n {
            x.row(i).iter().enumerate().for_each(|(j, v)| mean[j] += v / n as f64);
        }
        for i in 0..n {
            x.row(i).iter().enumerate().for_each(|(j, v)| var[j] += (v - mean[j]).powi(2) / n as f64);
        }
        let std: Vec<f64> = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        (mean, std)
    });
    let xs = match &scaler {
        Some((m, s)) => apply_scaler(x, m, s),
        None => x.clone(),
    };

    let k = n_classes;
    let mut r = rng::seeded(cfg.seed);
    let init: Vec<f64> = rng::gaussian_vec(&mut r, k * d).into_iter().map(|v| 1e-3 * v).collect();
    let mut w = Tensor::from_rows(k, d, init)?;
    let mut b = vec![0.0; k];
    let mut trace = Vec::with_capacity(cfg.iters + 1);

    for it in 0..=cfg.iters {
        let mut p = logits(&xs, &w, &b)?;
        let loss = softmax_xent(&mut p, labels, k);
        if !loss.is_finite() {
            return Err(Error::NonFinite("probe loss"));
        }
        trace.push(loss);
        if it == cfg.iters {
            break;
        }
        // dL/dlogits = (p − onehot)/n
        for (row, &y) in p.chunks_exact_mut(k).zip(labels) {
            row[y as usize] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n as f64);
        }
        let g = Tensor::from_rows(n, k, p)?;
        let gw = g.transpose()?.matmul(&xs)?;
        for (wv, gv) in w.data_mut().iter_mut().zip(gw.data()) {
            *wv -= cfg.lr * gv;
        }
        for c in 0..k {
            let gb: f64 = (0..n).map(|i| g.get(i, c)).sum();
            b[c] -= cfg.lr * gb;
        }
    }
    Ok(ProbeModel { weight: w, bias: b, trace, scaler })
}

pub fn eval_probe(model: &ProbeModel, x: &Tensor, labels: &[u16]) -> Result<f64> {
    check_labels(x, labels, model.classes())?;
    Ok(accuracy(&model.predict(x)?, labels))
}

pub fn accuracy(pred: &[u16], labels: &[u16]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

/// Majority vote among the `k` most similar training rows. Neighbors tied on
/// similarity are taken in training order; vote ties go to the larger summed
/// similarity, then the lower class index. Euclidean similarity is `−distance`.
pub fn knn_classify(
    train: &Tensor,
    train_labels: &[u16],
    test: &Tensor,
    k: usize,
    metric: Metric,
    exec: Exec,
) -> Result<Vec<u16>> {
    let (n, d) = train.dims2()?;
    let (_, dt) = test.dims2()?;
    if train_labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} training rows", train_labels.len())));
    }
    if d != dt {
        return Err(Error::Dimension(format!("train dim {d} vs test dim {dt}")));
    }
    if k == 0 || k > n {
        return Err(Error::Parameter(format!("k must be in 1..={n}, got {k}")));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let train_norms: Vec<f64> = (0..n).map(|i| norm(train.row(i))).collect();
    if metric == Metric::Cosine && train_norms.contains(&0.0) {
        return Err(Error::Degenerate("zero training vector under cosine metric".into()));
    }
    let classes = train_labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);

    let out = exec.map_range(test.rows(), |q| -> Result<u16> {
        let qv = test.row(q);
        let qn = norm(qv);
        if metric == Metric::Cosine && qn == 0.0 {
            return Err(Error::Degenerate(format!("zero test vector {q} under cosine metric")));
        }
        let mut sims: Vec<(f64, usize)> = (0..n)
            .map(|i| {
                let t = train.row(i);
                let s = match metric {
                    Metric::Cosine => t.iter().zip(qv).map(|(a, b)| a * b).sum::<f64>() / (train_norms[i] * qn),
                    Metric::Euclidean => -t.iter().zip(qv).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                };
                (s, i)
            })
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; classes];
        let mut mass = vec![0.0; classes];
        for &(s, i) in &sims[..k] {
            let c = train_labels[i] as usize;
            votes[c] += 1;
            mass[c] += s;
        }
        let mut best = 0;
        for c in 1..classes {
            if votes[c] > votes[best] || (votes[c] == votes[best] && mass[c] > mass[best]) {
                best = c;
            }
        }
        Ok(best as u16)
    });
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn separable() -> (Tensor, Vec<u16>) {
        let xs: Vec<f64> = (0..40).map(|i| if i < 20 { -1.0 - i as f64 * 0.1 } else { 1.0 + i as f64 * 0.1 }).collect();
        let labels = (0..40).map(|i| u16::from(i >= 20)).collect();
        (Tensor::from_rows(40, 1, xs).unwrap(), labels)
    }

    #[test]
    fn separable_probe_is_perfect() {
        let (x, y) = separable();
        let m = train_probe(&x, &y, 2, &ProbeConfig::default()).unwrap();
        assert_eq!(eval_probe(&m, &x, &y).unwrap(), 1.0);
        assert!(m.trace.last().unwrap() <= &m.trace[0]);
        for w in m.trace[10..].windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn probe_errors() {
        let (x, _) = separable();
        let same = vec![1u16; 40];
        assert!(matches!(train_probe(&x, &same, 2, &ProbeConfig::default()), Err(Error::DegenerateTask(_))));
        let (x, y) = separable();
        let m = train_probe(&x, &y, 2, &ProbeConfig::default()).unwrap();
        let empty = Tensor::from_rows(0, 1, vec![]).unwrap();
        assert!(eval_probe(&m, &empty, &[]).is_err());
        let wide = Tensor::from_rows(1, 2, vec![0.0, 1.0]).unwrap();
        assert!(matches!(eval_probe(&m, &wide, &[0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn probe_is_deterministic() {
        let (x, y) = separable();
        let cfg = ProbeConfig { standardize: true, seed: 4, ..ProbeConfig::default() };
        assert_eq!(train_probe(&x, &y, 2, &cfg).unwrap(), train_probe(&x, &y, 2, &cfg).unwrap());
    }

    #[test]
    fn knn_majority_and_exact_match() {
        let train = Tensor::matrix(&[&[1.0, 0.0], &[1.0, 0.1], &[1.0, 0.2], &[1.0, -0.1], &[1.0, -0.2], &[-1.0, 0.0]]).unwrap();
        let labels = [0u16, 0, 0, 1, 1, 2];
        let q = Tensor::matrix(&[&[1.0, 0.0]]).unwrap();
        assert_eq!(knn_classify(&train, &labels, &q, 5, Metric::Cosine, Exec::Sequential).unwrap(), vec![0]);
        let q = Tensor::matrix(&[&[-1.0, 0.0]]).unwrap();
        assert_eq!(knn_classify(&train, &labels, &q, 1, Metric::Cosine, Exec::Sequential).unwrap(), vec![2]);
        assert!(matches!(knn_classify(&train, &labels, &q, 7, Metric::Cosine, Exec::Sequential), Err(Error::Parameter(_))));
    }

    #[test]
    fn vote_tie_uses_similarity_then_class() {
        let train = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let q = Tensor::matrix(&[&[1.0, 0.5]]).unwrap();
        assert_eq!(knn_classify(&train, &[1, 0], &q, 2, Metric::Cosine, Exec::Sequential).unwrap(), vec![1]);
        let q = Tensor::matrix(&[&[1.0, 1.0]]).unwrap();
        assert_eq!(knn_classify(&train, &[1, 0], &q, 2, Metric::Cosine, Exec::Sequential).unwrap(), vec![0]);
    }
}
