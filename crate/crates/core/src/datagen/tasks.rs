use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng as _;
use serde::Serialize;

use super::world::singular_values;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

pub const MAX_SUPPORT_RESAMPLES: usize = 10_000;
pub const MIN_SINGULAR_VALUE: f64 = 1e-6;

/// A downstream task: the features it uses and a head that reads exactly them.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    /// Sorted feature indices.
    pub support: Vec<usize>,
    /// `k×d`, columns nonzero exactly on `support`.
    pub head: Tensor,
    pub batch: Vec<usize>,
}

/// For every feature `j`, the supports that exclude `j` must jointly cover
/// every other feature.
pub fn nontrivial_coverage(d: usize, supports: &[Vec<usize>]) -> Vec<bool> {
    (0..d)
        .map(|j| {
            let mut covered = vec![false; d];
            for s in supports.iter().filter(|s| !s.contains(&j)) {
                for &k in s {
                    if k < d {
                        covered[k] = true;
                    }
                }
            }
            (0..d).all(|k| k == j || covered[k])
        })
        .collect()
}

pub fn sample_task_supports(
    d: usize,
    tasks: usize,
    min_size: usize,
    max_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if min_size == 0 || min_size > max_size || max_size >= d {
        return Err(Error::Parameter(format!(
            "support sizes need 1 ≤ min ≤ max < d, got min={min_size} max={max_size} d={d}"
        )));
    }
    if tasks == 0 {
        return Err(Error::Parameter("need at least one task".into()));
    }
    let mut rng = rng::seeded(seed);
    for _ in 0..MAX_SUPPORT_RESAMPLES {
        let supports: Vec<Vec<usize>> = (0..tasks)
            .map(|_| {
                let size = rng.random_range(min_size..=max_size);
                let mut s = index::sample(&mut rng, d, size).into_vec();
                s.sort_unstable();
                s
            })
            .collect();
        if nontrivial_coverage(d, &supports).iter().all(|&ok| ok) {
            return Ok(supports);
        }
    }
    Err(Error::AssumptionInfeasible(format!(
        "no {tasks} supports of size {min_size}..={max_size} over {d} features met coverage after \
         {MAX_SUPPORT_RESAMPLES} draws"
    )))
}

/// Gaussian heads of `rows` outputs over each support.
pub fn sample_tasks(d: usize, supports: &[Vec<usize>], rows: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    let mut rng = rng::seeded(seed);
    supports
        .iter()
        .map(|s| {
            if s.iter().any(|&j| j >= d) {
                return Err(Error::Parameter(format!("support {s:?} exceeds d={d}")));
            }
            let mut head = vec![0.0; rows * d];
            for r in 0..rows {
                for &j in s {
                    head[r * d + j] = rng::gaussian(&mut rng);
                }
            }
            Ok(TaskSpec { support: s.clone(), head: Tensor::from_rows(rows, d, head)?, batch: Vec::new() })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SupportVariance {
    pub support: Vec<usize>,
    pub tasks: usize,
    /// Smallest singular value of the stacked `W_{:S}` rows.
    pub min_singular: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AssumptionReport {
    /// No task, or no features.
    pub vacuous: bool,
    /// Every head is zero off its support and `|S| < d`.
    pub sparse: bool,
    pub coverage: Vec<bool>,
    pub coverage_pass: bool,
    /// Singular-value proxy for intra-support variance, one entry per distinct support.
    pub variance: Vec<SupportVariance>,
    pub variance_pass: bool,
    pub pass: bool,
}

pub fn check_assumptions(supports: &[Vec<usize>], heads: &[Tensor]) -> AssumptionReport {
    let d = heads
        .first()
        .map(|h| h.cols())
        .unwrap_or_else(|| supports.iter().flatten().map(|&j| j + 1).max().unwrap_or(0));
    let vacuous = supports.is_empty() || d == 0;
    let pairs = supports.len() == heads.len();

    let sparse = pairs
        && supports.iter().zip(heads).all(|(s, h)| {
            s.len() < d
                && h.cols() == d
                && (0..d).all(|j| s.contains(&j) || (0..h.rows()).all(|r| h.get(r, j) == 0.0))
        });

    let coverage = nontrivial_coverage(d, supports);
    let coverage_pass = !vacuous && coverage.iter().all(|&c| c);

    let mut groups: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
    for (t, s) in supports.iter().enumerate() {
        let mut key = s.clone();
        key.sort_unstable();
        groups.entry(key).or_default().push(t);
    }
    let variance: Vec<SupportVariance> = groups
        .into_iter()
        .map(|(support, members)| {
            let min_singular = if pairs { stacked_min_singular(&support, &members, heads) } else { 0.0 };
            SupportVariance {
                tasks: members.len(),
                pass: min_singular > MIN_SINGULAR_VALUE,
                support,
                min_singular,
            }
        })
        .collect();
    let variance_pass = !vacuous && pairs && variance.iter().all(|v| v.pass);

    AssumptionReport {
        vacuous,
        sparse,
        pass: !vacuous && sparse && coverage_pass && variance_pass,
        coverage,
        coverage_pass,
        variance,
        variance_pass,
    }
}

fn stacked_min_singular(support: &[usize], members: &[usize], heads: &[Tensor]) -> f64 {
    if support.is_empty() {
        return 0.0;
    }
    let mut rows = Vec::new();
    for &t in members {
        let h = &heads[t];
        if support.iter().any(|&j| j >= h.cols()) {
            return 0.0;
        }
        for r in 0..h.rows() {
            rows.extend(support.iter().map(|&j| h.get(r, j)));
        }
    }
    let n = rows.len() / support.len();
    if n < support.len() {
        return 0.0;
    }
    Tensor::from_rows(n, support.len(), rows)
        .and_then(|m| singular_values(&m))
        .ok()
        .and_then(|sv| sv.last().copied())
        .unwrap_or(0.0)
}
