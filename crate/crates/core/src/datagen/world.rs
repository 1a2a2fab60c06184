use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::analysis::symmetric_evd;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

pub const MAX_CONDITION: f64 = 100.0;
const MAX_RESAMPLES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Mixing {
    /// Random Gaussian `X×d*` matrix with condition number below 100.
    Linear,
    /// `x = A₂·tanh(A₁·s)` with a hidden layer of the given width.
    Mlp { hidden: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_subject: usize,
    pub n_nuisance: usize,
    pub obs_dim: usize,
    #[serde(default = "default_mixing")]
    pub mixing: Mixing,
    /// Classes of the downstream labeling; 0 leaves samples unlabeled.
    #[serde(default)]
    pub n_classes: usize,
    /// Shuffle which latent coordinates are subject features.
    #[serde(default)]
    pub shuffle_features: bool,
}

fn default_mixing() -> Mixing {
    Mixing::Linear
}

impl WorldConfig {
    pub fn latent_dim(&self) -> usize {
        self.n_subject + self.n_nuisance
    }
}

/// Ground-truth generative process: unit-Gaussian latents `s ∈ R^{d*}` pushed
/// through a mixing `g` to observations `x = g(s)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub seed: u64,
    /// Linear mixing (`X×d*`) or the MLP's first layer (`hidden×d*`).
    pub mixing: Tensor,
    /// MLP second layer (`X×hidden`).
    pub mixing_out: Option<Tensor>,
    /// `(gᵀg)⁻¹gᵀ` for linear mixing.
    pub inverse: Option<Tensor>,
    pub condition: Option<f64>,
    pub subject: Vec<usize>,
    pub nuisance: Vec<usize>,
    /// Class scores are `subject latents · label_headᵀ`.
    pub label_head: Option<Tensor>,
}

/// Singular values of `a` (descending), from the eigenvalues of `aᵀa`.
pub(crate) fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let gram = a.transpose()?.matmul(a)?;
    Ok(symmetric_evd(&gram)?.values.into_iter().map(|v| v.max(0.0).sqrt()).collect())
}

fn gaussian_matrix(rng: &mut rng::Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = rng::gaussian_vec(rng, rows * cols).into_iter().map(|v| v * scale).collect();
    Tensor::from_rows(rows, cols, data).expect("shape")
}

fn pseudo_inverse(g: &Tensor) -> Result<Tensor> {
    let gram = g.transpose()?.matmul(g)?;
    let evd = symmetric_evd(&gram)?;
    let n = evd.values.len();
    let mut inv = vec![0.0; n * n];
    for (k, &lam) in evd.values.iter().enumerate() {
        if lam <= 0.0 {
            return Err(Error::Numeric("mixing matrix is singular".into()));
        }
        for i in 0..n {
            for j in 0..n {
                inv[i * n + j] += evd.vectors.get(i, k) * evd.vectors.get(j, k) / lam;
            }
        }
    }
    Tensor::from_rows(n, n, inv)?.matmul(&g.transpose()?)
}

pub fn sample_world(config: &WorldConfig, seed: u64) -> Result<SyntheticWorld> {
    let d = config.latent_dim();
    if d == 0 || config.obs_dim == 0 {
        return Err(Error::Spec("latent and observation dims must be ≥ 1".into()));
    }
    if config.n_classes == 1 {
        return Err(Error::Spec("n_classes must be 0 (unlabeled) or ≥ 2".into()));
    }
    let mut rng = rng::seeded(seed);
    let (mixing, mixing_out, inverse, condition) = match config.mixing {
        Mixing::Linear => {
            if d > config.obs_dim {
                return Err(Error::Spec(format!(
                    "linear mixing needs d* ≤ X, got d*={d} X={}",
                    config.obs_dim
                )));
            }
            let scale = 1.0 / (config.obs_dim as f64).sqrt();
            let mut attempt = 0;
            loop {
                let g = gaussian_matrix(&mut rng, config.obs_dim, d, scale);
                let sv = singular_values(&g)?;
                let cond = sv[0] / sv[d - 1];
                if cond.is_finite() && cond < MAX_CONDITION {
                    let inv = pseudo_inverse(&g)?;
                    break (g, None, Some(inv), Some(cond));
                }
                attempt += 1;
                if attempt == MAX_RESAMPLES {
                    return Err(Error::Numeric("could not draw a well-conditioned mixing".into()));
                }
            }
        }
        Mixing::Mlp { hidden } => {
            if hidden == 0 {
                return Err(Error::Spec("MLP mixing needs hidden ≥ 1".into()));
            }
            let a1 = gaussian_matrix(&mut rng, hidden, d, 1.0 / (d as f64).sqrt());
            let a2 = gaussian_matrix(&mut rng, config.obs_dim, hidden, 1.0 / (hidden as f64).sqrt());
            (a1, Some(a2), None, None)
        }
    };

    let mut features: Vec<usize> = (0..d).collect();
    if config.shuffle_features {
        features.shuffle(&mut rng);
    }
    let mut subject = features[..config.n_subject].to_vec();
    let mut nuisance = features[config.n_subject..].to_vec();
    subject.sort_unstable();
    nuisance.sort_unstable();

    let label_head = (config.n_classes >= 2 && config.n_subject > 0)
        .then(|| gaussian_matrix(&mut rng, config.n_classes, config.n_subject, 1.0));

    Ok(SyntheticWorld {
        config: config.clone(),
        seed,
        mixing,
        mixing_out,
        inverse,
        condition,
        subject,
        nuisance,
        label_head,
    })
}

impl SyntheticWorld {
    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim
    }

    /// Observations for a batch of latents (`n×d*` → `n×X`).
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, d) = latents.dims2()?;
        if d != self.latent_dim() {
            return Err(Error::Dimension(format!("latents have {d} dims, world has {}", self.latent_dim())));
        }
        let h = latents.matmul(&self.mixing.transpose()?)?;
        match &self.mixing_out {
            None => Ok(h),
            Some(out) => {
                let mut h = h;
                h.data_mut().iter_mut().for_each(|v| *v = v.tanh());
                h.matmul(&out.transpose()?)
            }
        }
    }

    /// `g⁻¹(x)` for linear mixing.
    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        let inv = self
            .inverse
            .as_ref()
            .ok_or_else(|| Error::Unsupported("MLP mixing has no closed-form inverse".into()))?;
        x.matmul(&inv.transpose()?)
    }

    pub fn sample_latents(&self, n: usize, rng: &mut rng::Rng) -> Tensor {
        let d = self.latent_dim();
        Tensor::from_rows(n, d, rng::gaussian_vec(rng, n * d)).expect("shape")
    }

    pub fn labels(&self, latents: &Tensor) -> Option<Vec<u16>> {
        let head = self.label_head.as_ref()?;
        let k = head.rows();
        Some(
            (0..latents.rows())
                .map(|i| {
                    let s = latents.row(i);
                    let score = |c: usize| -> f64 {
                        self.subject.iter().enumerate().map(|(p, &j)| head.get(c, p) * s[j]).sum()
                    };
                    (0..k).map(|c| (c, score(c))).fold((0, f64::NEG_INFINITY), |best, cur| {
                        if cur.1 > best.1 { cur } else { best }
                    }).0 as u16
                })
                .collect(),
        )
    }

    /// `n` samples with latents kept alongside the observations.
    pub fn sample_dataset(&self, n: usize, seed: u64) -> Result<Dataset> {
        let mut rng = rng::seeded(seed);
        let latents = self.sample_latents(n, &mut rng);
        let x = self.decode(&latents)?;
        Ok(Dataset {
            features: x,
            labels: self.labels(&latents),
            n_classes: self.config.n_classes,
            latents: Some(latents),
            layout: None,
        })
    }
}
