//! Feature compositions and the corpus statistics used to derive bucketed
//! features.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DOMAIN: usize = 0;
pub const LABEL: usize = 1;
pub const FREQUENCY: usize = 2;
pub const POSITION: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub size: usize,
}

/// The m features attached to every token. The last two are derived:
/// frequency by mass quantiles of a reference corpus, position by
/// equal-width buckets over `[0, T)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub features: Vec<FeatureDef>,
    pub seq_len: usize,
}

impl FeatureSpec {
    pub fn new(domains: usize, labels: usize, freq_buckets: usize, pos_buckets: usize, seq_len: usize) -> Result<Self> {
        let spec = Self {
            features: vec![
                FeatureDef { name: "domain".into(), size: domains },
                FeatureDef { name: "label".into(), size: labels },
                FeatureDef { name: "frequency".into(), size: freq_buckets },
                FeatureDef { name: "position".into(), size: pos_buckets },
            ],
            seq_len,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != 4 {
            return Err(Error::Config(format!("expected 4 features, got {}", self.features.len())));
        }
        if let Some(f) = self.features.iter().find(|f| f.size < 2) {
            return Err(Error::Config(format!("feature {} needs at least 2 labels", f.name)));
        }
        if self.pos_buckets() > self.seq_len {
            return Err(Error::Config(format!("{} position buckets exceed length {}", self.pos_buckets(), self.seq_len)));
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.features.len()
    }

    pub fn size(&self, feature: usize) -> usize {
        self.features[feature].size
    }

    pub fn freq_buckets(&self) -> usize {
        self.features[FREQUENCY].size
    }

    pub fn pos_buckets(&self) -> usize {
        self.features[POSITION].size
    }

    pub fn num_compositions(&self) -> usize {
        self.features.iter().map(|f| f.size).product()
    }

    pub fn position_bucket(&self, position: usize) -> usize {
        position * self.pos_buckets() / self.seq_len
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }
}

/// `(y_1, .., y_m)`; ordered lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureComposition(pub Vec<usize>);

impl FeatureComposition {
    /// Mixed-radix index in `0..spec.num_compositions()`.
    pub fn index(&self, spec: &FeatureSpec) -> usize {
        self.0.iter().zip(&spec.features).fold(0, |acc, (&y, f)| acc * f.size + y)
    }

    pub fn from_index(mut idx: usize, spec: &FeatureSpec) -> Self {
        let mut ys = vec![0; spec.m()];
        for (y, f) in ys.iter_mut().zip(&spec.features).rev() {
            *y = idx % f.size;
            idx /= f.size;
        }
        Self(ys)
    }

    pub fn check(&self, spec: &FeatureSpec) -> Result<()> {
        if self.0.len() != spec.m() || self.0.iter().zip(&spec.features).any(|(&y, f)| y >= f.size) {
            return Err(Error::Contract(format!("composition {:?} outside the feature spec", self.0)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token: usize,
    pub position: usize,
    pub composition: FeatureComposition,
    pub task: usize,
}

/// Frequency bucketing frozen from a reference corpus.
///
/// Reference tokens are sorted by relative frequency; a token falls in
/// bucket `ceil(n * F) - 1` where `F` is the inclusive cumulative mass up to
/// it. Other frequencies take the bucket of the most frequent reference token
/// not above them, or bucket 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBuckets {
    pub n: usize,
    /// `(relative frequency, bucket)`, ascending in both.
    steps: Vec<(f64, usize)>,
}

impl FrequencyBuckets {
    pub fn from_counts(counts: &BTreeMap<usize, u64>, n: usize) -> Result<Self> {
        let total: u64 = counts.values().sum();
        if total == 0 || n == 0 {
            return Err(Error::DegenerateData("empty reference corpus for frequency buckets".into()));
        }
        let mut freqs: Vec<(f64, usize)> = counts.iter().map(|(&t, &c)| (c as f64 / total as f64, t)).collect();
        freqs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut steps: Vec<(f64, usize)> = Vec::with_capacity(freqs.len());
        let mut cum = 0.0;
        for (f, _) in freqs {
            cum += f;
            let b = ((n as f64 * cum - 1e-9).ceil() as usize).clamp(1, n) - 1;
            match steps.last_mut() {
                // equal frequencies share the higher bucket
                Some(last) if last.0 == f => last.1 = last.1.max(b),
                _ => steps.push((f, b)),
            }
        }
        Ok(Self { n, steps })
    }

    pub fn bucket(&self, freq: f64) -> usize {
        match self.steps.partition_point(|&(f, _)| f <= freq) {
            0 => 0,
            i => self.steps[i - 1].1,
        }
    }
}

/// Per-token content frequencies of one corpus plus the frozen bucketing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub counts: BTreeMap<usize, u64>,
    pub total: u64,
    pub buckets: FrequencyBuckets,
}

impl CorpusStats {
    pub fn new(counts: BTreeMap<usize, u64>, buckets: FrequencyBuckets) -> Self {
        let total = counts.values().sum();
        Self { counts, total, buckets }
    }

    pub fn frequency(&self, token: usize) -> f64 {
        match self.counts.get(&token) {
            Some(&c) if self.total > 0 => c as f64 / self.total as f64,
            _ => 0.0,
        }
    }

    pub fn frequency_bucket(&self, token: usize) -> usize {
        if self.frequency(token) == 0.0 {
            return 0;
        }
        self.buckets.bucket(self.frequency(token))
    }
}

/// Ground-truth domain and label plus derived frequency and position buckets.
pub fn composition_of(
    token: usize,
    position: usize,
    domain: usize,
    label: usize,
    spec: &FeatureSpec,
    stats: Option<&CorpusStats>,
) -> Result<FeatureComposition> {
    let stats = stats.ok_or_else(|| Error::State("corpus statistics required for frequency buckets".into()))?;
    if position >= spec.seq_len {
        return Err(Error::Index(format!("position {position} outside length {}", spec.seq_len)));
    }
    let c = FeatureComposition(vec![domain, label, stats.frequency_bucket(token), spec.position_bucket(position)]);
    c.check(spec)?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> FeatureSpec {
        FeatureSpec::new(3, 3, 4, 4, 64).unwrap()
    }

    #[test]
    fn position_zero_is_bucket_zero() {
        let s = spec();
        assert_eq!(s.position_bucket(0), 0);
        assert_eq!(s.position_bucket(15), 0);
        assert_eq!(s.position_bucket(16), 1);
        assert_eq!(s.position_bucket(63), 3);
    }

    #[test]
    fn index_round_trip() {
        let s = spec();
        assert_eq!(s.num_compositions(), 144);
        for i in 0..144 {
            let c = FeatureComposition::from_index(i, &s);
            c.check(&s).unwrap();
            assert_eq!(c.index(&s), i);
        }
    }

    #[test]
    fn most_frequent_token_is_top_bucket() {
        let counts: BTreeMap<usize, u64> = [(0, 900), (1, 50), (2, 30), (3, 20)].into_iter().collect();
        let b = FrequencyBuckets::from_counts(&counts, 4).unwrap();
        let stats = CorpusStats::new(counts, b);
        assert_eq!(stats.frequency_bucket(0), 3);
        assert_eq!(stats.frequency_bucket(3), 0);
        assert_eq!(stats.frequency_bucket(99), 0);
    }

    #[test]
    fn tiered_masses_give_clean_buckets() {
        // tiers of 1, 2, 4, 8 tokens with equal mass per tier
        let mut counts = BTreeMap::new();
        let mut tok = 0;
        for (size, each) in [(1, 800), (2, 400), (4, 200), (8, 100)] {
            for _ in 0..size {
                counts.insert(tok, each);
                tok += 1;
            }
        }
        let b = FrequencyBuckets::from_counts(&counts, 4).unwrap();
        let stats = CorpusStats::new(counts, b);
        let got: Vec<usize> = (0..15).map(|t| stats.frequency_bucket(t)).collect();
        assert_eq!(got, vec![3, 2, 2, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn missing_stats_is_a_state_error() {
        assert!(matches!(composition_of(1, 0, 0, 0, &spec(), None), Err(Error::State(_))));
    }
}
