//! Versioned JSON snapshots of fitted repair models.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{has_representation_bias, AttributeWeights, SubgroupKey};
use crate::error::{Error, Result};
use crate::geometric::QuantileRepairModel;
use crate::rng::RNG_NAME;
use crate::stopping::SubgroupLearner;
use crate::transport::{centroids_from_learner, RepairModel};

pub const SNAPSHOT_VERSION: u32 = 1;

/// Stopping numbers of four quenched learners and the subgroups that a
/// sample of `total = Σ n̂` drawn with the model weights would under-serve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingReport {
    pub stopping_numbers: [usize; 4],
    pub total: usize,
    pub smoothed_kld: [f64; 4],
    pub representation_bias: [bool; 4],
}

impl StoppingReport {
    pub fn new(learners: &[SubgroupLearner; 4], weights: &AttributeWeights) -> Result<Self> {
        let mut stopping_numbers = [0; 4];
        for (n, l) in stopping_numbers.iter_mut().zip(learners) {
            *n = l.stopping_number()?;
        }
        let total = stopping_numbers.iter().sum();
        let representation_bias =
            SubgroupKey::ALL.map(|k| has_representation_bias(k, weights, total, stopping_numbers[k.index()]));
        Ok(Self { stopping_numbers, total, smoothed_kld: learners.each_ref().map(|l| l.smoothed_kld()), representation_bias })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum SnapshotModel {
    Transport { learners: Box<[SubgroupLearner; 4]>, stopping: StoppingReport, model: RepairModel },
    Geometric { model: QuantileRepairModel },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema_version: u32,
    pub rng: String,
    #[serde(flatten)]
    pub model: SnapshotModel,
}

impl Snapshot {
    /// Repair model of four quenched learners, with its stopping report.
    pub fn transport(learners: [SubgroupLearner; 4], weights: AttributeWeights) -> Result<Self> {
        let stopping = StoppingReport::new(&learners, &weights)?;
        let model = RepairModel::fit(&learners, weights)?;
        Ok(Self::wrap(SnapshotModel::Transport { learners: Box::new(learners), stopping, model }))
    }

    pub fn geometric(model: QuantileRepairModel) -> Self {
        Self::wrap(SnapshotModel::Geometric { model })
    }

    fn wrap(model: SnapshotModel) -> Self {
        Self { schema_version: SNAPSHOT_VERSION, rng: RNG_NAME.to_string(), model }
    }

    fn check(&self) -> Result<()> {
        if self.schema_version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!(
                "schema version {} is not supported (expected {SNAPSHOT_VERSION})",
                self.schema_version
            )));
        }
        match &self.model {
            SnapshotModel::Transport { learners, stopping, model } => {
                model.check()?;
                if *stopping != StoppingReport::new(learners, model.weights())? {
                    return Err(Error::Snapshot("stopping report does not match the learners".into()));
                }
                for k in SubgroupKey::ALL {
                    let g = model.group(k.u).ok_or(Error::UnfittedGroup { u: k.u })?;
                    let q = if k.s == 0 { &g.source } else { &g.target };
                    if *q != centroids_from_learner(&learners[k.index()])? {
                        return Err(Error::Snapshot(format!("centroids of {k} do not match its learner")));
                    }
                }
                Ok(())
            }
            SnapshotModel::Geometric { model } => model.check(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snap: Snapshot = serde_json::from_str(text)?;
        snap.check()?;
        Ok(snap)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
