use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::rng;

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(δmax − δmin)/δmin` over Euclidean distances from `anchor` to `others`.
pub fn minmax_ratio<'a, I>(anchor: &[f64], others: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    let mut seen = 0usize;
    for o in others {
        if o.len() != anchor.len() {
            return Err(Error::Dimension(format!(
                "point of dim {} vs anchor dim {}",
                o.len(),
                anchor.len()
            )));
        }
        let d = euclid(anchor, o);
        lo = lo.min(d);
        hi = hi.max(d);
        seen += 1;
    }
    if seen == 0 {
        return Err(Error::Parameter("minmax_ratio needs at least one other point".into()));
    }
    if lo <= 0.0 {
        return Err(Error::Degenerate("a point coincides with the anchor".into()));
    }
    Ok((hi - lo) / lo)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConcentrationPoint {
    pub dim: usize,
    pub mean: f64,
    /// Per-trial ratios, in trial order.
    pub trials: Vec<f64>,
}

/// Mean min-max ratio of `n` i.i.d. standard-Gaussian points around a
/// Gaussian anchor, for each dimension in `dims`. Trial `t` at dimension `d`
/// draws from the stream `(seed + t, d)`, so results do not depend on `exec`.
pub fn concentration_curve(
    dims: &[usize],
    n: usize,
    trials: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<ConcentrationPoint>> {
    if n < 2 {
        return Err(Error::Parameter(format!("need n ≥ 2 points, got {n}")));
    }
    if trials == 0 {
        return Err(Error::Parameter("need at least one trial".into()));
    }
    if dims.windows(2).any(|w| w[0] >= w[1]) || dims.contains(&0) {
        return Err(Error::Parameter("dims must be positive and strictly ascending".into()));
    }
    let jobs: Vec<(usize, usize)> = dims
        .iter()
        .flat_map(|&d| (0..trials).map(move |t| (d, t)))
        .collect();
    let ratios = exec.map(&jobs, |&(d, t)| {
        let mut rng = rng::derived(seed.wrapping_add(t as u64), d as u64);
        let anchor = rng::gaussian_vec(&mut rng, d);
        let points = rng::gaussian_vec(&mut rng, n * d);
        minmax_ratio(&anchor, points.chunks_exact(d))
    });
    let ratios = ratios.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(dims
        .iter()
        .zip(ratios.chunks_exact(trials))
        .map(|(&dim, chunk)| ConcentrationPoint {
            dim,
            mean: chunk.iter().sum::<f64>() / trials as f64,
            trials: chunk.to_vec(),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MinMaxStats {
    pub anchors: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

/// Min-max ratios using each of the first `max_anchors` rows as anchor against
/// all remaining rows.
pub fn minmax_stats(points: &Tensor, max_anchors: usize, exec: Exec) -> Result<MinMaxStats> {
    let (n, _) = points.dims2()?;
    if n < 2 {
        return Err(Error::InsufficientData("min-max stats need ≥ 2 points".into()));
    }
    let k = max_anchors.min(n).max(1);
    let ratios = exec.map_range(k, |i| {
        minmax_ratio(points.row(i), (0..n).filter(|&j| j != i).map(|j| points.row(j)))
    });
    let mut ratios = ratios.into_iter().collect::<Result<Vec<_>>>()?;
    ratios.sort_by(f64::total_cmp);
    let mean = ratios.iter().sum::<f64>() / k as f64;
    let median = if k % 2 == 1 {
        ratios[k / 2]
    } else {
        0.5 * (ratios[k / 2 - 1] + ratios[k / 2])
    };
    Ok(MinMaxStats { anchors: k, mean, median, min: ratios[0], max: ratios[k - 1] })
}
