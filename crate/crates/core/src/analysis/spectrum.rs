use std::io::Write;

use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_ERANK_EPS: f64 = 1e-6;
pub const LOG_FLOOR: f64 = 1e-12;
const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;
const SYMMETRY_TOL: f64 = 1e-8;

/// Sample covariance of the rows of `v`, normalized by `n − 1`.
pub fn covariance(v: &Tensor) -> Result<Tensor> {
    let (n, d) = v.dims2()?;
    if n < 2 {
        return Err(Error::InsufficientData(format!("covariance needs ≥ 2 rows, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, x) in mean.iter_mut().zip(v.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut c = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for i in 0..n {
        for (k, (x, m)) in v.row(i).iter().zip(&mean).enumerate() {
            centered[k] = x - m;
        }
        for a in 0..d {
            let ca = centered[a];
            if ca == 0.0 {
                continue;
            }
            for b in a..d {
                c[a * d + b] += ca * centered[b];
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let val = c[a * d + b] / denom;
            c[a * d + b] = val;
            c[b * d + a] = val;
        }
    }
    Tensor::from_rows(d, d, c)
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct Evd {
    /// Sorted descending.
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector for `values[i]`.
    pub vectors: Tensor,
    pub sweeps: usize,
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius norm drops below
/// `1e-10·max(1, ‖C‖_F)`.
pub fn symmetric_evd(c: &Tensor) -> Result<Evd> {
    let (n, n2) = c.dims2()?;
    if n != n2 {
        return Err(Error::Contract(format!("EVD needs a square matrix, got {n}×{n2}")));
    }
    let scale = c.data().iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
    for i in 0..n {
        for j in i + 1..n {
            if (c.get(i, j) - c.get(j, i)).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Contract(format!("matrix not symmetric at ({i},{j})")));
            }
        }
    }
    let mut a: Vec<f64> = c.data().to_vec();
    // symmetrize exactly so rotations stay consistent
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = avg;
            a[j * n + i] = avg;
        }
    }
    let mut v = Tensor::identity(n).into_data();
    let tol = JACOBI_TOL * c.frobenius().max(1.0);
    let off_norm = |a: &[f64]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off_norm(&a) >= tol {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Numeric(format!(
                "Jacobi EVD did not converge in {JACOBI_MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cs = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * cs;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = cs * akp - sn * akq;
                    a[k * n + q] = sn * akp + cs * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = cs * apk - sn * aqk;
                    a[q * n + k] = sn * apk + cs * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = cs * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + cs * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + col] = v[k * n + src];
        }
    }
    Ok(Evd { values, vectors: Tensor::from_rows(n, n, vectors)?, sweeps })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EffectiveRank {
    /// Eigenvalues above `ε_rel·σ₁`.
    pub count: usize,
    /// exp of the spectral entropy over positive eigenvalues.
    pub entropy: f64,
}

pub fn effective_rank(sigma: &[f64], eps_rel: f64) -> Result<EffectiveRank> {
    if sigma.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::Contract("spectrum must be sorted descending".into()));
    }
    let top = sigma.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return Ok(EffectiveRank { count: 0, entropy: 0.0 });
    }
    let count = sigma.iter().filter(|&&s| s > eps_rel * top).count();
    let total: f64 = sigma.iter().filter(|&&s| s > 0.0).sum();
    let h: f64 = sigma
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(EffectiveRank { count, entropy: h.exp() })
}

pub fn log10_spectrum(sigma: &[f64]) -> Vec<f64> {
    sigma.iter().map(|s| (s.max(0.0) + LOG_FLOOR).log10()).collect()
}

/// Covariance spectra of representations R and embeddings Z.
#[derive(Clone, Debug)]
pub struct SpectrumReport {
    pub c_r: Tensor,
    pub c_z: Tensor,
    pub sigma_r: Vec<f64>,
    pub sigma_z: Vec<f64>,
    pub erank_r: EffectiveRank,
    pub erank_z: EffectiveRank,
    pub log10_sigma_r: Vec<f64>,
    pub log10_sigma_z: Vec<f64>,
}

impl SpectrumReport {
    pub fn compute(r: &Tensor, z: &Tensor) -> Result<Self> {
        let c_r = covariance(r)?;
        let c_z = covariance(z)?;
        let sigma_r = symmetric_evd(&c_r)?.values;
        let sigma_z = symmetric_evd(&c_z)?.values;
        Ok(Self {
            erank_r: effective_rank(&sigma_r, DEFAULT_ERANK_EPS)?,
            erank_z: effective_rank(&sigma_z, DEFAULT_ERANK_EPS)?,
            log10_sigma_r: log10_spectrum(&sigma_r),
            log10_sigma_z: log10_spectrum(&sigma_z),
            c_r,
            c_z,
            sigma_r,
            sigma_z,
        })
    }

    /// `index,sigma_r,log10_sigma_r,sigma_z,log10_sigma_z`; the shorter
    /// spectrum is padded with empty fields.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record(["index", "sigma_r", "log10_sigma_r", "sigma_z", "log10_sigma_z"])
            .map_err(csv_err)?;
        let rows = self.sigma_r.len().max(self.sigma_z.len());
        let cell = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for i in 0..rows {
            out.write_record([
                i.to_string(),
                cell(self.sigma_r.get(i)),
                cell(self.log10_sigma_r.get(i)),
                cell(self.sigma_z.get(i)),
                cell(self.log10_sigma_z.get(i)),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn covariance_examples() {
        let v = Tensor::matrix(&[&[1.0, 0.0], &[-1.0, 0.0]]).unwrap();
        assert_eq!(covariance(&v).unwrap().data(), &[2.0, 0.0, 0.0, 0.0]);
        let constant = Tensor::matrix(&[&[3.0, -1.0], &[3.0, -1.0], &[3.0, -1.0]]).unwrap();
        assert!(covariance(&constant).unwrap().data().iter().all(|x| *x == 0.0));
        assert!(matches!(
            covariance(&Tensor::matrix(&[&[1.0]]).unwrap()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn evd_small_cases() {
        let d = Tensor::matrix(&[&[1.0, 0.0], &[0.0, 2.0]]).unwrap();
        assert_eq!(symmetric_evd(&d).unwrap().values, vec![2.0, 1.0]);
        let c = Tensor::matrix(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap();
        let evd = symmetric_evd(&c).unwrap();
        assert_abs_diff_eq!(evd.values[0], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(evd.values[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn evd_rejects_asymmetric() {
        let c = Tensor::matrix(&[&[2.0, 1.0], &[0.0, 2.0]]).unwrap();
        assert!(matches!(symmetric_evd(&c), Err(Error::Contract(_))));
    }

    #[test]
    fn effective_rank_examples() {
        assert_eq!(effective_rank(&[1.0, 1e-3, 1e-9], 1e-6).unwrap().count, 2);
        assert_abs_diff_eq!(effective_rank(&[1.0; 4], 1e-6).unwrap().entropy, 4.0, epsilon = 1e-12);
        let e = effective_rank(&[2.0, 1.0], 1e-6).unwrap().entropy;
        let p = [2.0 / 3.0, 1.0 / 3.0f64];
        assert_abs_diff_eq!(e, (-(p[0] * p[0].ln()) - p[1] * p[1].ln()).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(e, 1.8899, epsilon = 1e-4);
        assert_eq!(effective_rank(&[0.0, 0.0], 1e-6).unwrap(), EffectiveRank { count: 0, entropy: 0.0 });
    }

    #[test]
    fn csv_pads_shorter_spectrum() {
        let r = Tensor::matrix(&[&[1.0, 0.0, 2.0], &[0.0, 1.0, 0.0], &[2.0, 2.0, 1.0]]).unwrap();
        let z = Tensor::matrix(&[&[1.0], &[3.0], &[0.0]]).unwrap();
        let rep = SpectrumReport::compute(&r, &z).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "index,sigma_r,log10_sigma_r,sigma_z,log10_sigma_z");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].ends_with(",,"));
    }
}
