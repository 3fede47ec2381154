//! Quantile-matching repair of the sample it was fitted on.
//!
//! A datum's mid-rank within its own subgroup is mapped through both
//! empirical quantile functions of its `u` group, and the two values are
//! averaged. Only members of the fitted sample can be repaired.

use serde::{Deserialize, Serialize};

use crate::datamodel::{LabelledDatum, ResearchDataset, SubgroupKey};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileRepairModel {
    sorted: [Vec<f64>; 4],
}

pub fn fit_geometric(data: &ResearchDataset) -> Result<QuantileRepairModel> {
    let mut sorted: [Vec<f64>; 4] = Default::default();
    for k in SubgroupKey::ALL {
        if data.count(k) == 0 {
            return Err(Error::EmptySubgroup(k));
        }
        let mut v = data.features(k).to_vec();
        v.sort_by(f64::total_cmp);
        sorted[k.index()] = v;
    }
    Ok(QuantileRepairModel { sorted })
}

impl QuantileRepairModel {
    pub fn sorted(&self, key: SubgroupKey) -> &[f64] {
        &self.sorted[key.index()]
    }

    pub(crate) fn check(&self) -> Result<()> {
        for v in &self.sorted {
            if v.is_empty() || v.windows(2).any(|w| !(w[0] <= w[1])) {
                return Err(Error::Snapshot("quantile arrays must be nonempty and sorted".into()));
            }
        }
        Ok(())
    }

    /// `(#{< x} + #{<= x})` within the subgroup, i.e. twice the mid-rank count.
    fn rank_count(&self, key: SubgroupKey, x: f64) -> Result<usize> {
        let v = self.sorted(key);
        let less = v.partition_point(|&y| y < x);
        let leq = v.partition_point(|&y| y <= x);
        if leq == less {
            return Err(Error::OffSampleUnsupported { x, key });
        }
        Ok(less + leq)
    }

    /// Mid-rank of `x` in its subgroup, in `(0, 1)`.
    pub fn rank(&self, key: SubgroupKey, x: f64) -> Result<f64> {
        let c = self.rank_count(key, x)?;
        Ok(c as f64 / (2 * self.sorted(key).len()) as f64)
    }

    pub fn repair(&self, datum: &LabelledDatum) -> Result<f64> {
        let key = datum.key();
        let c = self.rank_count(key, datum.x)?;
        let n = self.sorted(key).len();
        let q = |s: u8| {
            let v = self.sorted(SubgroupKey::new(key.u, s));
            // h = r·m − 1/2, evaluated from the counts so equal sizes stay exact.
            let h = (c * v.len()) as f64 / (2 * n) as f64 - 0.5;
            quantile(v, h)
        };
        Ok(0.5 * q(0) + 0.5 * q(1))
    }
}

/// Linear interpolation between order statistics at 0-based position `h`,
/// clamped to the sample range.
fn quantile(sorted: &[f64], h: f64) -> f64 {
    let last = sorted.len() - 1;
    if h <= 0.0 {
        return sorted[0];
    }
    if h >= last as f64 {
        return sorted[last];
    }
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

pub fn repair_geometric(model: &QuantileRepairModel, datum: &LabelledDatum) -> Result<f64> {
    model.repair(datum)
}

/// Repairs every member of a dataset, keeping its segmentation.
pub fn repair_geometric_dataset(model: &QuantileRepairModel, data: &ResearchDataset) -> Result<ResearchDataset> {
    let mut groups: [Vec<f64>; 4] = Default::default();
    for k in SubgroupKey::ALL {
        groups[k.index()] = data
            .features(k)
            .iter()
            .map(|&x| model.repair(&LabelledDatum::new(x, k.u, k.s)))
            .collect::<Result<_>>()?;
    }
    ResearchDataset::from_groups(groups)
}
