//! Uniform (US) and size-balanced (SS) epoch sampling.
//!
//! SS boosts the minority size group inside each class: small-infection COVID
//! scans and large-infection CAP scans. A draw first picks one of the four
//! groups with probability proportional to its weight, then a member of that
//! group uniformly. Both strategies produce epochs as long as the training set.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::SamplingGroup;
use crate::error::{Error, Result};
use crate::registry::Registry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub n_covid_small: usize,
    pub n_covid_large: usize,
    pub n_cap_small: usize,
    pub n_cap_large: usize,
}

impl GroupCounts {
    pub fn from_groups(groups: &[SamplingGroup]) -> Self {
        let mut c = [0usize; 4];
        for g in groups {
            c[g.index()] += 1;
        }
        GroupCounts {
            n_covid_small: c[0],
            n_covid_large: c[1],
            n_cap_small: c[2],
            n_cap_large: c[3],
        }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.n_covid_small, self.n_covid_large, self.n_cap_small, self.n_cap_large]
    }

    pub fn total(&self) -> usize {
        self.as_array().iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerProbabilities {
    /// In `SamplingGroup::ALL` order.
    pub weights: [f64; 4],
    pub w_sum: f64,
    pub probabilities: [f64; 4],
}

/// Weights `[N_cl / N_cs, 1, 1, N_caps / N_capl]`, normalized by their sum.
pub fn size_balanced_probabilities(counts: &GroupCounts) -> Result<SamplerProbabilities> {
    for (g, n) in SamplingGroup::ALL.iter().zip(counts.as_array()) {
        if n == 0 {
            return Err(Error::EmptySamplingGroup(g.name().to_string()));
        }
    }
    let weights = [
        counts.n_covid_large as f64 / counts.n_covid_small as f64,
        1.0,
        1.0,
        counts.n_cap_small as f64 / counts.n_cap_large as f64,
    ];
    let w_sum: f64 = weights.iter().sum();
    Ok(SamplerProbabilities {
        weights,
        w_sum,
        probabilities: weights.map(|w| w / w_sum),
    })
}

/// Seeded uniform permutation of `0..n`.
pub fn uniform_epoch(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("cannot sample an epoch from an empty set"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx)
}

/// One two-stage draw. `groups[g]` lists the sample indices of group `g`.
pub fn draw_size_balanced(groups: &[Vec<usize>; 4], probs: &SamplerProbabilities, rng: &mut impl Rng) -> Result<usize> {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut chosen = None;
    for (g, p) in probs.probabilities.iter().enumerate() {
        if *p <= 0.0 {
            continue;
        }
        acc += p;
        chosen = Some(g);
        if u < acc {
            break;
        }
    }
    let g = chosen.ok_or_else(|| Error::invalid("all group probabilities are zero"))?;
    let members = &groups[g];
    if members.is_empty() {
        return Err(Error::EmptySamplingGroup(SamplingGroup::ALL[g].name().to_string()));
    }
    Ok(members[rng.gen_range(0..members.len())])
}

/// An epoch-level sampling strategy.
pub trait EpochSampler: Send + Sync {
    fn name(&self) -> &'static str;

    /// Training-set indices visited in one epoch, `groups.len()` of them.
    fn epoch(&self, groups: &[SamplingGroup], seed: u64) -> Result<Vec<usize>>;
}

pub struct UniformSampler;

impl EpochSampler for UniformSampler {
    fn name(&self) -> &'static str {
        "US"
    }

    fn epoch(&self, groups: &[SamplingGroup], seed: u64) -> Result<Vec<usize>> {
        uniform_epoch(groups.len(), seed)
    }
}

pub struct SizeBalancedSampler;

impl EpochSampler for SizeBalancedSampler {
    fn name(&self) -> &'static str {
        "SS"
    }

    fn epoch(&self, groups: &[SamplingGroup], seed: u64) -> Result<Vec<usize>> {
        let probs = size_balanced_probabilities(&GroupCounts::from_groups(groups)).map_err(|e| match e {
            Error::EmptySamplingGroup(g) => Error::EmptySamplingGroup(format!("{g}; use the US strategy for this split")),
            other => other,
        })?;
        let mut members: [Vec<usize>; 4] = Default::default();
        for (i, g) in groups.iter().enumerate() {
            members[g.index()].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..groups.len()).map(|_| draw_size_balanced(&members, &probs, &mut rng)).collect()
    }
}

/// Registry holding `US` and `SS`.
pub fn sampler_registry() -> Registry<dyn EpochSampler> {
    let mut r: Registry<dyn EpochSampler> = Registry::new("sampling strategy");
    r.register("US", || Box::new(UniformSampler));
    r.register("SS", || Box::new(SizeBalancedSampler));
    r
}

/// Realized fraction of draws per group, in `SamplingGroup::ALL` order.
pub fn group_frequencies(indices: &[usize], groups: &[SamplingGroup]) -> [f64; 4] {
    let mut f = [0.0; 4];
    for &i in indices {
        f[groups[i].index()] += 1.0;
    }
    let n = indices.len().max(1) as f64;
    f.map(|v| v / n)
}
