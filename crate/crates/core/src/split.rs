//! Per-cell stratified train/validation/test split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::manifest::{FaceRecord, Manifest, Split};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Result<Self> {
        let fractions = [train, val, test];
        if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::InvalidSplit(format!(
                "fractions must be non-negative, got {fractions:?}"
            )));
        }
        let sum: f64 = fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(format!("fractions sum to {sum}, not 1")));
        }
        Ok(Self { train, val, test, seed })
    }

    pub fn fractions(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitOutcome {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
    pub warnings: Vec<Warning>,
}

/// Largest-remainder apportionment of `n` items over `fractions`. Ties in the
/// fractional part go to train, then val, then test.
pub fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let exact = fractions.map(|f| f * n as f64);
    // tolerate representation error such as 0.7 * 20 = 13.999...
    let mut counts = exact.map(|x| ((x + 1e-9).floor() as usize).min(n));
    let mut assigned: usize = counts.iter().sum();
    while assigned > n {
        let i = (0..3).rev().find(|&i| counts[i] > 0).expect("over-assigned");
        counts[i] -= 1;
        assigned -= 1;
    }
    let mut order = [0usize, 1, 2];
    let remainder = |i: usize| exact[i] - counts[i] as f64;
    order.sort_by(|&a, &b| remainder(b).total_cmp(&remainder(a)).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Splits every lattice cell independently: seeded shuffle within the cell,
/// then cut by [`apportion`]. Each output keeps the input record order.
pub fn stratified_split(manifest: &Manifest, spec: &SplitSpec) -> Result<SplitOutcome> {
    let spec = SplitSpec::new(spec.train, spec.val, spec.test, spec.seed)?;
    let taxonomy = manifest.taxonomy();
    let cells = manifest.cell_indices();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); taxonomy.lattice_size()];
    for (record, &cell) in cells.iter().enumerate() {
        members[cell].push(record);
    }

    let mut assignment = vec![Split::Train; manifest.len()];
    let mut warnings = Vec::new();
    for (cell, group) in members.iter().enumerate() {
        if group.is_empty() {
            continue;
        }
        let mut order = group.clone();
        rng::shuffle(&mut rng::stream(spec.seed, cell as u64), &mut order);
        let counts = apportion(order.len(), spec.fractions());
        let [n_train, n_val, _] = counts;
        for (pos, &record) in order.iter().enumerate() {
            assignment[record] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        let starved: Vec<&str> = [(Split::Val, spec.val, counts[1]), (Split::Test, spec.test, counts[2])]
            .iter()
            .filter(|(_, f, c)| *f > 0.0 && *c == 0)
            .map(|(s, _, _)| s.as_str())
            .collect();
        if !starved.is_empty() {
            warnings.push(Warning::new(
                "SMALL_CELL",
                format!(
                    "cell {} has {} records; empty {}",
                    taxonomy.cell_at(cell),
                    group.len(),
                    starved.join(",")
                ),
            ));
        }
    }

    let mut parts: [Vec<FaceRecord>; 3] = Default::default();
    for (record, split) in manifest.records().iter().zip(assignment) {
        let slot = match split {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        parts[slot].push(FaceRecord {
            split: Some(split),
            ..record.clone()
        });
    }
    let [train, val, test] = parts;
    let name = manifest.name();
    Ok(SplitOutcome {
        train: Manifest::new(format!("{name}.train"), taxonomy.clone(), train)?,
        val: Manifest::new(format!("{name}.val"), taxonomy.clone(), val)?,
        test: Manifest::new(format!("{name}.test"), taxonomy.clone(), test)?,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::cell_counts;
    use crate::taxonomy::DemographicTaxonomy;
    use proptest::prelude::*;
    use std::collections::HashSet;

    const FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(20, FRACTIONS), [14, 3, 3]);
        // 4.9 / 1.05 / 1.05
        assert_eq!(apportion(7, FRACTIONS), [5, 1, 1]);
        assert_eq!(apportion(9, [1.0, 0.0, 0.0]), [9, 0, 0]);
        assert_eq!(apportion(0, FRACTIONS), [0, 0, 0]);
        // 0.7 / 0.15 / 0.15: train takes the single record
        assert_eq!(apportion(1, FRACTIONS), [1, 0, 0]);
        // 1.4 / 0.3 / 0.3: remainder .4 beats .3
        assert_eq!(apportion(2, FRACTIONS), [2, 0, 0]);
        // 2.1 / .45 / .45: val wins the tie over test
        assert_eq!(apportion(3, FRACTIONS), [2, 1, 0]);
    }

    #[test]
    fn invalid_fractions() {
        assert!(SplitSpec::new(0.7, 0.2, 0.2, 1).is_err());
        assert!(SplitSpec::new(1.2, -0.1, -0.1, 1).is_err());
        assert!(SplitSpec::new(0.7, 0.15, 0.15, 1).is_ok());
    }

    fn manifest(n_per_cell: &[usize]) -> Manifest {
        let t = DemographicTaxonomy::table1();
        let mut records = Vec::new();
        for (cell, &n) in n_per_cell.iter().enumerate() {
            let key = t.cell_at(cell * 7);
            for _ in 0..n {
                records.push(FaceRecord {
                    id: format!("r{}", records.len()),
                    source: "s".into(),
                    gender: key.gender.clone(),
                    race: key.race.clone(),
                    age_years: None,
                    age_bin: key.age_bin.clone(),
                    split: None,
                    augmented_from: None,
                });
            }
        }
        Manifest::new("m", t, records).unwrap()
    }

    #[test]
    fn cell_of_twenty() {
        let out = stratified_split(&manifest(&[20]), &SplitSpec::default()).unwrap();
        assert_eq!((out.train.len(), out.val.len(), out.test.len()), (14, 3, 3));
        assert!(out.train.records().iter().all(|r| r.split == Some(Split::Train)));
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn degenerate_fractions() {
        let spec = SplitSpec::new(1.0, 0.0, 0.0, 3).unwrap();
        let out = stratified_split(&manifest(&[5, 9, 1]), &spec).unwrap();
        assert_eq!(out.train.len(), 15);
        assert!(out.val.is_empty() && out.test.is_empty());
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn small_cells_warn() {
        let out = stratified_split(&manifest(&[2]), &SplitSpec::default()).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert_eq!(out.warnings[0].code, "SMALL_CELL");
    }

    proptest! {
        #[test]
        fn partitions_and_tracks_targets(
            sizes in proptest::collection::vec(0usize..60, 1..12),
            seed in any::<u64>(),
        ) {
            let m = manifest(&sizes);
            let out = stratified_split(&m, &SplitSpec { seed, ..SplitSpec::default() }).unwrap();
            let ids: Vec<&str> = [&out.train, &out.val, &out.test]
                .iter()
                .flat_map(|p| p.records().iter().map(|r| r.id.as_str()))
                .collect();
            let unique: HashSet<&str> = ids.iter().copied().collect();
            prop_assert_eq!(ids.len(), m.len());
            prop_assert_eq!(unique.len(), m.len());

            let input = cell_counts(&m);
            let parts = [cell_counts(&out.train), cell_counts(&out.val), cell_counts(&out.test)];
            for (cell, &n) in input.dense().iter().enumerate() {
                for (part, f) in parts.iter().zip(FRACTIONS) {
                    prop_assert!((part.dense()[cell] as f64 - f * n as f64).abs() < 1.0);
                }
            }
        }
    }
}
