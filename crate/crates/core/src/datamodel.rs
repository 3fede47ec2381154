//! Labelled observations, their segmentation into the four `(u, s)`
//! subgroups, and the representation-bias predicate.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One record: a scalar feature with an unprotected attribute `u` and a
/// protected attribute `s`, both binary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelledDatum {
    pub x: f64,
    pub u: u8,
    pub s: u8,
}

impl LabelledDatum {
    pub fn new(x: f64, u: u8, s: u8) -> Self {
        Self { x, u, s }
    }

    pub fn key(&self) -> SubgroupKey {
        SubgroupKey::new(self.u, self.s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubgroupKey {
    pub u: u8,
    pub s: u8,
}

impl SubgroupKey {
    /// The four keys in `(0,0), (0,1), (1,0), (1,1)` order.
    pub const ALL: [SubgroupKey; 4] = [
        SubgroupKey { u: 0, s: 0 },
        SubgroupKey { u: 0, s: 1 },
        SubgroupKey { u: 1, s: 0 },
        SubgroupKey { u: 1, s: 1 },
    ];

    pub fn new(u: u8, s: u8) -> Self {
        debug_assert!(u <= 1 && s <= 1);
        Self { u, s }
    }

    /// Position in [`SubgroupKey::ALL`].
    pub fn index(self) -> usize {
        2 * self.u as usize + self.s as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }
}

impl fmt::Display for SubgroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(u={}, s={})", self.u, self.s)
    }
}

/// Features split by subgroup, each subgroup in arrival order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResearchDataset {
    groups: [Vec<f64>; 4],
}

impl ResearchDataset {
    pub fn from_groups(groups: [Vec<f64>; 4]) -> Result<Self> {
        for g in &groups {
            if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFiniteFeature { index, value });
            }
        }
        Ok(Self { groups })
    }

    pub fn features(&self, key: SubgroupKey) -> &[f64] {
        &self.groups[key.index()]
    }

    pub fn count(&self, key: SubgroupKey) -> usize {
        self.groups[key.index()].len()
    }

    pub fn counts(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.groups[i].len())
    }

    pub fn n(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.n() == 0
    }

    pub fn push(&mut self, key: SubgroupKey, x: f64) {
        self.groups[key.index()].push(x);
    }

    /// Appends every subgroup of `other` after the corresponding subgroup of `self`.
    pub fn merge(mut self, other: &ResearchDataset) -> Self {
        for (mine, theirs) in self.groups.iter_mut().zip(other.groups.iter()) {
            mine.extend_from_slice(theirs);
        }
        self
    }

    /// Same segmentation with every feature replaced by `f(key, x)`.
    pub fn map<F>(&self, mut f: F) -> Self
    where
        F: FnMut(SubgroupKey, f64) -> f64,
    {
        let mut groups: [Vec<f64>; 4] = Default::default();
        for key in SubgroupKey::ALL {
            groups[key.index()] = self.features(key).iter().map(|&x| f(key, x)).collect();
        }
        Self { groups }
    }

    /// Flattens back to labelled records, subgroup by subgroup.
    pub fn to_labelled(&self) -> Vec<LabelledDatum> {
        SubgroupKey::ALL
            .iter()
            .flat_map(|&k| self.features(k).iter().map(move |&x| LabelledDatum::new(x, k.u, k.s)))
            .collect()
    }
}

/// Splits records into the four subgroups, preserving arrival order.
pub fn segment(data: &[LabelledDatum]) -> Result<ResearchDataset> {
    let mut out = ResearchDataset::default();
    for (index, d) in data.iter().enumerate() {
        if d.u > 1 || d.s > 1 {
            return Err(Error::InvalidAttribute { index, u: d.u, s: d.s });
        }
        if !d.x.is_finite() {
            return Err(Error::NonFiniteFeature { index, value: d.x });
        }
        out.push(d.key(), d.x);
    }
    Ok(out)
}

/// Subgroup probabilities `p_{u,s}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeWeights {
    p: [f64; 4],
}

impl AttributeWeights {
    pub const TOLERANCE: f64 = 1e-12;

    pub fn new(p: [f64; 4]) -> Result<Self> {
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config(format!("subgroup weights must be nonnegative: {p:?}")));
        }
        let total: f64 = p.iter().sum();
        if (total - 1.0).abs() > Self::TOLERANCE {
            return Err(Error::Config(format!("subgroup weights sum to {total}, not 1")));
        }
        Ok(Self { p })
    }

    /// Weights with `Pr[U=0] = pr_u0` and `Pr[s|u] = 0.5` for both groups.
    pub fn balanced_within_u(pr_u0: f64) -> Result<Self> {
        let h0 = 0.5 * pr_u0;
        let h1 = 0.5 * (1.0 - pr_u0);
        Self::new([h0, h0, h1, h1])
    }

    pub fn get(&self, key: SubgroupKey) -> f64 {
        self.p[key.index()]
    }

    pub fn as_array(&self) -> [f64; 4] {
        self.p
    }

    pub fn pr_u(&self, u: u8) -> f64 {
        self.p[2 * u as usize] + self.p[2 * u as usize + 1]
    }

    /// `Pr[s|u]`, or `None` when group `u` has zero probability.
    pub fn pr_s_given_u(&self, key: SubgroupKey) -> Option<f64> {
        let pu = self.pr_u(key.u);
        (pu > 0.0).then(|| self.get(key) / pu)
    }
}

/// `p_{u,s} = n_{u,s} / n`.
pub fn empirical_weights(data: &ResearchDataset) -> Result<AttributeWeights> {
    let n = data.n();
    if n == 0 {
        return Err(Error::UndefinedWeights);
    }
    let counts = data.counts();
    let mut p = counts.map(|c| c as f64 / n as f64);
    // Put the rounding residue on the largest entry so the sum is exact.
    let residue = 1.0 - p.iter().sum::<f64>();
    let (imax, _) = counts.iter().enumerate().max_by_key(|(_, &c)| c).unwrap();
    p[imax] += residue;
    AttributeWeights::new(p)
}

/// True when the subgroup's expected share `p_{u,s} n` of `n` data falls
/// short of the number of samples it needs.
pub fn has_representation_bias(
    key: SubgroupKey,
    weights: &AttributeWeights,
    n: usize,
    stopping_number: usize,
) -> bool {
    weights.get(key) * (n as f64) < stopping_number as f64
}
