use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::divergence::jsd_probs;
use super::{median, SongDistribution};
use crate::density::Kind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityIndex {
    pub country: String,
    pub kind: Kind,
    pub n_songs: usize,
    /// Median JSD over all song pairs of the country.
    pub raw_median_jsd: f64,
    /// Min-max scaled across countries; all zero when every raw value is equal.
    pub normalized: f64,
}

/// Within-country diversity, one entry per country in sorted order.
pub fn diversity(songs: &[SongDistribution]) -> Result<Vec<DiversityIndex>> {
    let mut by_country: BTreeMap<&str, Vec<&SongDistribution>> = BTreeMap::new();
    for s in songs {
        by_country.entry(&s.country).or_default().push(s);
    }
    let mut out = Vec::with_capacity(by_country.len());
    for (country, members) in by_country {
        if members.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "{country} has {} song(s); diversity needs at least 2",
                members.len()
            )));
        }
        let kind = members[0].dist.kind;
        if members.iter().any(|m| m.dist.kind != kind) {
            return Err(Error::GridMismatch(format!("mixed kinds in {country}")));
        }
        let n = members.len();
        let pairs: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|i| {
                let members = &members;
                (i + 1..n).map(move |j| jsd_probs(&members[i].dist.probs, &members[j].dist.probs))
            })
            .collect();
        out.push(DiversityIndex {
            country: country.to_string(),
            kind,
            n_songs: n,
            raw_median_jsd: median(&pairs),
            normalized: 0.0,
        });
    }
    let lo = out.iter().map(|d| d.raw_median_jsd).fold(f64::INFINITY, f64::min);
    let hi = out.iter().map(|d| d.raw_median_jsd).fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for d in &mut out {
            d.normalized = (d.raw_median_jsd - lo) / (hi - lo);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::stats::Distribution;

    fn song(id: usize, country: &str, probs: Vec<f64>) -> SongDistribution {
        SongDistribution {
            song_id: format!("{country}{id}"),
            country: country.into(),
            region: "R".into(),
            dist: Distribution::new(Kind::Rhythm, probs).unwrap(),
        }
    }

    fn bump(rng: &mut SplitMix64, centre: usize) -> Vec<f64> {
        let mut v = vec![0.0; 1001];
        let c = centre + rng.below(6) as usize;
        for k in 0..8 {
            v[c + k] = 1.0 + rng.next_f64();
        }
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    }

    #[test]
    fn identical_songs_have_zero_diversity() {
        let mut v = vec![0.0; 1001];
        v[400] = 1.0;
        let mut rng = SplitMix64::new(1);
        let mut songs: Vec<_> = (0..10).map(|i| song(i, "A", v.clone())).collect();
        songs.extend((0..10).map(|i| song(i, "B", bump(&mut rng, 300))));
        let d = diversity(&songs).unwrap();
        assert_eq!(d[0].raw_median_jsd, 0.0);
        assert_eq!(d[0].normalized, 0.0);
        assert_eq!(d[1].normalized, 1.0);
    }

    #[test]
    fn mixture_country_is_more_diverse() {
        let mut rng = SplitMix64::new(2);
        let mut songs = Vec::new();
        for i in 0..100 {
            songs.push(song(i, "MIX", bump(&mut rng, if i % 2 == 0 { 300 } else { 600 })));
            songs.push(song(i, "ONE", bump(&mut rng, 300)));
        }
        let d = diversity(&songs).unwrap();
        assert_eq!(d[0].country, "MIX");
        assert!(d[0].raw_median_jsd > d[1].raw_median_jsd);
        assert_eq!((d[0].normalized, d[1].normalized), (1.0, 0.0));
    }

    #[test]
    fn equal_countries_normalize_to_zero() {
        let mut v = vec![0.0; 1001];
        v[400] = 1.0;
        let songs: Vec<_> = (0..6).map(|i| song(i, if i < 3 { "A" } else { "B" }, v.clone())).collect();
        assert!(diversity(&songs).unwrap().iter().all(|d| d.normalized == 0.0));
    }

    #[test]
    fn single_song_country_is_rejected() {
        let mut v = vec![0.0; 1001];
        v[400] = 1.0;
        assert!(diversity(&[song(0, "A", v)]).is_err());
    }
}
