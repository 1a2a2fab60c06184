use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const ZERO_VARIANCE: f64 = 1e-24;

/// Learned-vs-ground-truth correlation structure under the best one-to-one
/// matching of dimensions.
#[derive(Clone, Debug, Serialize)]
pub struct AlignmentReport {
    /// |Pearson r|, learned dims × ground-truth dims, row-major.
    pub correlation: Vec<Vec<f64>>,
    /// `(learned, ground_truth)` pairs, sorted by learned index.
    pub assignment: Vec<(usize, usize)>,
    /// |r| of each matched pair, in `assignment` order.
    pub matched: Vec<f64>,
    pub mcc: f64,
    /// Regression slope of each matched learned dim on its ground-truth dim.
    pub scale: Vec<f64>,
    pub zero_variance_learned: Vec<usize>,
    pub zero_variance_gt: Vec<usize>,
}

struct Columns {
    centered: Vec<Vec<f64>>,
    norms: Vec<f64>,
    zero: Vec<usize>,
}

fn columns(t: &Tensor) -> Result<Columns> {
    let (n, d) = t.dims2()?;
    let mut centered = Vec::with_capacity(d);
    let mut norms = Vec::with_capacity(d);
    let mut zero = Vec::new();
    for j in 0..d {
        let col: Vec<f64> = (0..n).map(|i| t.get(i, j)).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let c: Vec<f64> = col.into_iter().map(|x| x - mean).collect();
        let ss: f64 = c.iter().map(|x| x * x).sum();
        if ss / n as f64 <= ZERO_VARIANCE {
            zero.push(j);
        }
        norms.push(ss.sqrt());
        centered.push(c);
    }
    Ok(Columns { centered, norms, zero })
}

/// Mean correlation coefficient between `learned` and `gt` after an exact
/// maximum-weight bipartite matching on |Pearson r|.
pub fn gte_alignment(learned: &Tensor, gt: &Tensor) -> Result<AlignmentReport> {
    let (n, d) = learned.dims2()?;
    let (n2, dg) = gt.dims2()?;
    if n != n2 {
        return Err(Error::Dimension(format!("{n} learned rows vs {n2} ground-truth rows")));
    }
    if n < 10 {
        return Err(Error::InsufficientData(format!("alignment needs ≥ 10 samples, got {n}")));
    }
    let lc = columns(learned)?;
    let gc = columns(gt)?;
    let mut corr = vec![vec![0.0; dg]; d];
    let mut signed = vec![vec![0.0; dg]; d];
    for i in 0..d {
        if lc.zero.contains(&i) {
            continue;
        }
        for j in 0..dg {
            if gc.zero.contains(&j) {
                continue;
            }
            let dot: f64 = lc.centered[i].iter().zip(&gc.centered[j]).map(|(a, b)| a * b).sum();
            let r = (dot / (lc.norms[i] * gc.norms[j])).clamp(-1.0, 1.0);
            signed[i][j] = dot;
            corr[i][j] = r.abs();
        }
    }

    let assignment = max_weight_assignment(&corr);
    let matched: Vec<f64> = assignment.iter().map(|&(i, j)| corr[i][j]).collect();
    let mcc = if matched.is_empty() { 0.0 } else { matched.iter().sum::<f64>() / matched.len() as f64 };
    let scale = assignment
        .iter()
        .map(|&(i, j)| {
            let var = gc.norms[j] * gc.norms[j];
            if var > 0.0 { signed[i][j] / var } else { 0.0 }
        })
        .collect();
    Ok(AlignmentReport {
        correlation: corr,
        assignment,
        matched,
        mcc,
        scale,
        zero_variance_learned: lc.zero,
        zero_variance_gt: gc.zero,
    })
}

/// Maximum-weight matching of size `min(rows, cols)`; returns `(row, col)`
/// pairs sorted by row.
pub fn max_weight_assignment(weights: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let top = weights.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    if rows <= cols {
        let cost: Vec<Vec<f64>> = weights.iter().map(|r| r.iter().map(|w| top - w).collect()).collect();
        let mut pairs: Vec<(usize, usize)> = hungarian(&cost).into_iter().enumerate().collect();
        pairs.sort_unstable();
        pairs
    } else {
        let cost: Vec<Vec<f64>> = (0..cols)
            .map(|j| (0..rows).map(|i| top - weights[i][j]).collect())
            .collect();
        let mut pairs: Vec<(usize, usize)> =
            hungarian(&cost).into_iter().enumerate().map(|(j, i)| (i, j)).collect();
        pairs.sort_unstable();
        pairs
    }
}

/// Minimum-cost assignment for an `n×m` cost matrix with `n ≤ m`, via the
/// shortest-augmenting-path Hungarian method with potentials. Returns the
/// column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    assert!(n <= m, "hungarian needs rows ≤ cols");
    // 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}
