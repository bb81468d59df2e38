//! Synthetic prediction logs with exact per-group confusion counts, used as
//! test oracles for the fairness evaluator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::PredictionRecord;
use crate::rng;
use crate::taxonomy::{Attribute, DemographicTaxonomy};

/// Target rates for one lattice cell. `count_pos` rows get `y_true = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub gender: String,
    pub race: String,
    pub age_bin: String,
    pub count_pos: usize,
    pub count_neg: usize,
    pub tpr: f64,
    pub fpr: f64,
}

impl GroupRates {
    /// `(tp, fn, fp, tn)` after rounding the rates to whole records
    /// (half away from zero).
    pub fn realized(&self) -> (usize, usize, usize, usize) {
        let tp = (self.tpr * self.count_pos as f64).round() as usize;
        let fp = (self.fpr * self.count_neg as f64).round() as usize;
        (tp, self.count_pos - tp, fp, self.count_neg - fp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub groups: Vec<GroupRates>,
}

impl SynthSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Emits a log realizing each group's rounded confusion counts exactly. Rows
/// are shuffled with `seed` and then numbered `syn000001`, `syn000002`, ...
pub fn synthesize_predictions(
    spec: &SynthSpec,
    taxonomy: &DemographicTaxonomy,
    seed: u64,
) -> Result<Vec<PredictionRecord>> {
    let mut rows = Vec::new();
    for (i, g) in spec.groups.iter().enumerate() {
        for (name, rate) in [("tpr", g.tpr), ("fpr", g.fpr)] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::InvalidSpec(format!("group {i}: {name} {rate} outside [0, 1]")));
            }
        }
        for (attribute, label) in [
            (Attribute::Gender, &g.gender),
            (Attribute::Race, &g.race),
            (Attribute::Age, &g.age_bin),
        ] {
            if !taxonomy.contains(attribute, label) {
                return Err(Error::UnknownSubgroup {
                    row: None,
                    attribute,
                    label: label.clone(),
                });
            }
        }
        let (tp, fn_, fp, tn) = g.realized();
        for (y_true, y_pred, n) in [(1, 1, tp), (1, 0, fn_), (0, 1, fp), (0, 0, tn)] {
            rows.extend((0..n).map(|_| PredictionRecord {
                id: String::new(),
                gender: g.gender.clone(),
                race: g.race.clone(),
                age_bin: g.age_bin.clone(),
                y_true,
                y_pred,
                score: None,
            }));
        }
    }
    rng::shuffle(&mut rng::stream(seed, 0), &mut rows);
    for (i, row) in rows.iter_mut().enumerate() {
        row.id = format!("syn{:06}", i + 1);
    }
    Ok(rows)
}
