use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Distribution, SongDistribution};
use crate::density::Kind;
use crate::error::{Error, Result};

/// Base-2 Jensen-Shannon divergence of two probability vectors.
///
/// Terms are accumulated per bin and divided by the midpoint mass, so equal
/// inputs give exactly 0 and disjoint supports exactly 1.
pub fn jsd_probs(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut mass = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if m <= 0.0 {
            continue;
        }
        mass += m;
        if a != b {
            let term = |x: f64| if x > 0.0 { 0.5 * x * (x / m).log2() } else { 0.0 };
            // A single commutative sum keeps the result exactly symmetric.
            acc += term(a) + term(b);
        }
    }
    if mass <= 0.0 {
        return 0.0;
    }
    (acc / mass).clamp(0.0, 1.0)
}

pub fn jsd(p: &Distribution, q: &Distribution) -> Result<f64> {
    if p.kind != q.kind || p.probs.len() != q.probs.len() {
        return Err(Error::GridMismatch(format!(
            "cannot compare {} ({}) with {} ({})",
            p.kind,
            p.probs.len(),
            q.kind,
            q.probs.len()
        )));
    }
    Ok(jsd_probs(&p.probs, &q.probs))
}

/// Uniform-weight mean distribution of a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryProfile {
    pub country: String,
    pub kind: Kind,
    pub mean: Distribution,
    pub n_songs: usize,
}

/// Groups songs by `key` (sorted) and averages each group's probabilities.
pub fn group_means<F>(songs: &[SongDistribution], key: F) -> Result<Vec<CountryProfile>>
where
    F: Fn(&SongDistribution) -> String,
{
    let mut groups: BTreeMap<String, Vec<&SongDistribution>> = BTreeMap::new();
    for s in songs {
        groups.entry(key(s)).or_default().push(s);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (name, members) in groups {
        let kind = members[0].dist.kind;
        let n = members[0].dist.probs.len();
        let mut acc = vec![0.0; n];
        for m in &members {
            if m.dist.kind != kind || m.dist.probs.len() != n {
                return Err(Error::GridMismatch(format!("mixed kinds in group {name}")));
            }
            acc.iter_mut().zip(&m.dist.probs).for_each(|(a, p)| *a += p);
        }
        let k = members.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        out.push(CountryProfile {
            country: name,
            kind,
            mean: Distribution { kind, probs: acc },
            n_songs: members.len(),
        });
    }
    Ok(out)
}

/// Labelled symmetric matrix with a zero diagonal, stored densely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMatrix {
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

impl PairMatrix {
    pub fn zeros(labels: Vec<String>) -> Self {
        let n = labels.len();
        Self {
            labels,
            values: vec![0.0; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let n = self.len();
        self.values[i * n + j] = v;
        self.values[j * n + i] = v;
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Entries `(i, j, value)` with `i < j`, row-major.
    pub fn upper(&self) -> Vec<(usize, usize, f64)> {
        let n = self.len();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, self.get(i, j)))
            .collect()
    }

    /// Same matrix with rows and columns in the order of `labels`.
    pub fn reordered(&self, labels: &[String]) -> Result<Self> {
        let idx: Vec<usize> = labels
            .iter()
            .map(|l| {
                self.index_of(l)
                    .ok_or_else(|| Error::InvalidArgument(format!("matrix has no entry for {l}")))
            })
            .collect::<Result<_>>()?;
        let mut out = Self::zeros(labels.to_vec());
        for a in 0..idx.len() {
            for b in a + 1..idx.len() {
                out.set(a, b, self.get(idx[a], idx[b]));
            }
        }
        Ok(out)
    }

    /// Long-format CSV `a,b,value` over the upper triangle.
    pub fn to_csv(&self, value_name: &str) -> String {
        let mut out = format!("a,b,{value_name}\n");
        for (i, j, v) in self.upper() {
            out.push_str(&format!("{},{},{v}\n", self.labels[i], self.labels[j]));
        }
        out
    }
}

/// JSD between every pair of profiles, in profile order.
pub fn country_pairwise_jsd(profiles: &[CountryProfile]) -> Result<PairMatrix> {
    let mut m = PairMatrix::zeros(profiles.iter().map(|p| p.country.clone()).collect());
    for i in 0..profiles.len() {
        for j in i + 1..profiles.len() {
            m.set(i, j, jsd(&profiles[i].mean, &profiles[j].mean)?);
        }
    }
    Ok(m)
}
