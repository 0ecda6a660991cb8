use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{add_one_p, percentile_ci, PairMatrix};
use crate::error::{Error, Result};
use crate::rng::{stream_seed, SplitMix64};

/// Fewest complete pairs accepted by `corr` and `partial_region`.
pub const MIN_PAIRS: usize = 5;
/// Fewest countries accepted by `mantel_spearman`.
pub const MIN_MANTEL_COUNTRIES: usize = 4;

const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrMethod {
    Pearson,
    Spearman,
    PartialRegion,
    MantelSpearman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrOptions {
    pub n_boot: usize,
    pub n_perm: usize,
    pub seed: u64,
}

impl Default for CorrOptions {
    fn default() -> Self {
        Self {
            n_boot: 10_000,
            n_perm: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrResult {
    pub method: CorrMethod,
    pub estimate: f64,
    /// Percentile bootstrap 95% interval.
    pub ci_low: f64,
    pub ci_high: f64,
    /// Two-sided permutation p-value.
    pub p: f64,
    pub p_adj: Option<f64>,
    /// Complete pairs used (country pairs for the Mantel test).
    pub n: usize,
    pub n_boot: usize,
    pub n_perm: usize,
    pub seed: u64,
}

/// Pearson correlation; NaN when either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Ranks starting at 1, ties sharing their average rank.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

fn complete_cases(x: &[Option<f64>], y: &[Option<f64>]) -> Result<Vec<usize>> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "paired inputs differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let keep: Vec<usize> = (0..x.len())
        .filter(|&i| matches!((x[i], y[i]), (Some(a), Some(b)) if a.is_finite() && b.is_finite()))
        .collect();
    if keep.len() < MIN_PAIRS {
        return Err(Error::InsufficientData(format!(
            "{} complete pairs; need at least {MIN_PAIRS}",
            keep.len()
        )));
    }
    Ok(keep)
}

/// Estimate, bootstrap interval over resampled pairs and permutation p.
fn paired(
    x: &[f64],
    y: &[f64],
    f: fn(&[f64], &[f64]) -> f64,
    method: CorrMethod,
    opts: &CorrOptions,
) -> Result<CorrResult> {
    let estimate = f(x, y);
    if !estimate.is_finite() {
        return Err(Error::InsufficientData(
            "correlation undefined: a variable has zero variance".into(),
        ));
    }
    let n = x.len();
    let boot_seed = stream_seed(opts.seed, "bootstrap");
    let boots: Vec<f64> = (0..opts.n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = SplitMix64::for_index(boot_seed, b as u64);
            let (mut xb, mut yb) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for _ in 0..n {
                let i = rng.below(n as u64) as usize;
                xb.push(x[i]);
                yb.push(y[i]);
            }
            f(&xb, &yb)
        })
        .collect();
    let (ci_low, ci_high) = percentile_ci(boots, estimate);
    let perm_seed = stream_seed(opts.seed, "permutation");
    let exceed = (0..opts.n_perm)
        .into_par_iter()
        .filter(|&i| {
            let mut yp = y.to_vec();
            SplitMix64::for_index(perm_seed, i as u64).shuffle(&mut yp);
            f(x, &yp).abs() >= estimate.abs() - TIE_TOL
        })
        .count();
    Ok(CorrResult {
        method,
        estimate,
        ci_low,
        ci_high,
        p: add_one_p(exceed, opts.n_perm),
        p_adj: None,
        n,
        n_boot: opts.n_boot,
        n_perm: opts.n_perm,
        seed: opts.seed,
    })
}

/// Pearson or Spearman correlation over pairwise-complete observations.
pub fn corr(
    x: &[Option<f64>],
    y: &[Option<f64>],
    method: CorrMethod,
    opts: &CorrOptions,
) -> Result<CorrResult> {
    let f: fn(&[f64], &[f64]) -> f64 = match method {
        CorrMethod::Pearson => pearson,
        CorrMethod::Spearman => spearman,
        other => {
            return Err(Error::InvalidArgument(format!(
                "corr supports pearson and spearman, not {other:?}"
            )))
        }
    };
    let keep = complete_cases(x, y)?;
    let xs: Vec<f64> = keep.iter().map(|&i| x[i].unwrap()).collect();
    let ys: Vec<f64> = keep.iter().map(|&i| y[i].unwrap()).collect();
    paired(&xs, &ys, f, method, opts)
}

/// Pearson correlation after subtracting each region's mean from both
/// variables (means over the complete cases).
pub fn partial_region(
    x: &[Option<f64>],
    y: &[Option<f64>],
    regions: &[String],
    opts: &CorrOptions,
) -> Result<CorrResult> {
    if regions.len() != x.len() {
        return Err(Error::InvalidArgument(format!(
            "{} regions for {} observations",
            regions.len(),
            x.len()
        )));
    }
    let keep = complete_cases(x, y)?;
    let mut sums: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for &i in &keep {
        let e = sums.entry(&regions[i]).or_insert((0.0, 0.0, 0));
        e.0 += x[i].unwrap();
        e.1 += y[i].unwrap();
        e.2 += 1;
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for &i in &keep {
        let (sx, sy, c) = sums[regions[i].as_str()];
        xs.push(x[i].unwrap() - sx / c as f64);
        ys.push(y[i].unwrap() - sy / c as f64);
    }
    paired(&xs, &ys, pearson, CorrMethod::PartialRegion, opts)
}

/// Spearman correlation of the upper triangles of two country matrices,
/// skipping pairs where either entry is not finite.
///
/// p comes from joint row/column permutations of `m2`; the interval from
/// resampling countries with replacement (pairs of a country with its own
/// copy are dropped).
pub fn mantel_spearman(
    m1: &PairMatrix,
    m2: &PairMatrix,
    opts: &CorrOptions,
) -> Result<CorrResult> {
    let n = m1.len();
    if n < MIN_MANTEL_COUNTRIES {
        return Err(Error::InsufficientData(format!(
            "{n} countries; the Mantel test needs at least {MIN_MANTEL_COUNTRIES}"
        )));
    }
    if m2.len() != n {
        return Err(Error::InvalidArgument(format!(
            "matrices cover {} and {} countries",
            n,
            m2.len()
        )));
    }
    let m2 = m2.reordered(&m1.labels)?;
    let tri = |order: &[usize]| -> (Vec<f64>, Vec<f64>) {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for i in 0..n {
            for j in i + 1..n {
                let (u, v) = (m1.get(i, j), m2.get(order[i], order[j]));
                if u.is_finite() && v.is_finite() {
                    a.push(u);
                    b.push(v);
                }
            }
        }
        (a, b)
    };
    let identity: Vec<usize> = (0..n).collect();
    let (a, b) = tri(&identity);
    if a.len() < MIN_PAIRS {
        return Err(Error::InsufficientData(format!(
            "{} complete country pairs; need at least {MIN_PAIRS}",
            a.len()
        )));
    }
    let estimate = spearman(&a, &b);
    if !estimate.is_finite() {
        return Err(Error::InsufficientData(
            "Mantel correlation undefined: a matrix is constant".into(),
        ));
    }
    let perm_seed = stream_seed(opts.seed, "permutation");
    let exceed = (0..opts.n_perm)
        .into_par_iter()
        .filter(|&i| {
            let mut order = identity.clone();
            SplitMix64::for_index(perm_seed, i as u64).shuffle(&mut order);
            let (pa, pb) = tri(&order);
            spearman(&pa, &pb).abs() >= estimate.abs() - TIE_TOL
        })
        .count();
    let boot_seed = stream_seed(opts.seed, "bootstrap");
    let boots: Vec<f64> = (0..opts.n_boot)
        .into_par_iter()
        .map(|bi| {
            let mut rng = SplitMix64::for_index(boot_seed, bi as u64);
            let pick: Vec<usize> = (0..n).map(|_| rng.below(n as u64) as usize).collect();
            let (mut xa, mut xb) = (Vec::new(), Vec::new());
            for s in 0..n {
                for t in s + 1..n {
                    let (i, j) = (pick[s], pick[t]);
                    if i == j {
                        continue;
                    }
                    let (u, v) = (m1.get(i, j), m2.get(i, j));
                    if u.is_finite() && v.is_finite() {
                        xa.push(u);
                        xb.push(v);
                    }
                }
            }
            if xa.len() < 3 {
                f64::NAN
            } else {
                spearman(&xa, &xb)
            }
        })
        .collect();
    let (ci_low, ci_high) = percentile_ci(boots, estimate);
    Ok(CorrResult {
        method: CorrMethod::MantelSpearman,
        estimate,
        ci_low,
        ci_high,
        p: add_one_p(exceed, opts.n_perm),
        p_adj: None,
        n: a.len(),
        n_boot: opts.n_boot,
        n_perm: opts.n_perm,
        seed: opts.seed,
    })
}

/// Benjamini-Hochberg step-up adjustment, returned in input order.
pub fn bh_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let i = order[rank];
        running = running.min(p[i] * m as f64 / (rank + 1) as f64);
        out[i] = running.min(1.0);
    }
    out
}
