//! Dataset-quality indicators over the demographic lattice.
//!
//! * Inclusivity `R`: mean over attributes of observed/expected subgroups.
//! * Group Representation Share: cell count divided by N.
//! * Diversity `D`: smallest share over largest share.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{cell_counts, CellCounts, Manifest};
use crate::taxonomy::{Attribute, GroupKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeCoverage {
    pub attribute: Attribute,
    pub observed: usize,
    pub expected: usize,
    pub ratio: f64,
    pub missing_subgroups: Vec<String>,
}

/// Which cells enter the Diversity min/max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiversityConvention {
    /// Only cells with at least one record. Absent cells are reported through
    /// Inclusivity and `missing_cells` instead.
    #[default]
    Observed,
    /// Every lattice cell; any empty cell forces `D = 0`.
    AllCells,
}

impl fmt::Display for DiversityConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DiversityConvention::Observed => "observed",
            DiversityConvention::AllCells => "all-cells",
        })
    }
}

impl FromStr for DiversityConvention {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "observed" => Ok(Self::Observed),
            "all-cells" => Ok(Self::AllCells),
            other => Err(format!("unknown diversity convention {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inclusivity {
    #[serde(rename = "R")]
    pub r: f64,
    pub per_attribute: Vec<AttributeCoverage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    #[serde(rename = "D")]
    pub d: f64,
    pub convention: DiversityConvention,
    pub min_cell: GroupKey,
    pub max_cell: GroupKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellShare {
    #[serde(flatten)]
    pub cell: GroupKey,
    pub count: usize,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub n: usize,
    pub inclusivity: Inclusivity,
    pub diversity: Diversity,
    pub grs: Vec<CellShare>,
    pub missing_cells: Vec<GroupKey>,
}

/// Inclusivity `R` and per-attribute coverage. A subgroup is observed when at
/// least one record carries it.
pub fn inclusivity(manifest: &Manifest) -> Inclusivity {
    let taxonomy = manifest.taxonomy();
    let per_attribute: Vec<AttributeCoverage> = Attribute::ALL
        .iter()
        .map(|&attribute| {
            let labels = taxonomy.subgroups(attribute);
            let mut seen = vec![false; labels.len()];
            for record in manifest.records() {
                let label = match attribute {
                    Attribute::Gender => &record.gender,
                    Attribute::Race => &record.race,
                    Attribute::Age => &record.age_bin,
                };
                if let Some(i) = taxonomy.index_of(attribute, label) {
                    seen[i] = true;
                }
            }
            let observed = seen.iter().filter(|&&s| s).count();
            let expected = labels.len();
            AttributeCoverage {
                attribute,
                observed,
                expected,
                ratio: observed as f64 / expected as f64,
                missing_subgroups: labels
                    .iter()
                    .zip(&seen)
                    .filter(|(_, &s)| !s)
                    .map(|(l, _)| l.to_string())
                    .collect(),
            }
        })
        .collect();
    let r = per_attribute.iter().map(|c| c.ratio).sum::<f64>() / per_attribute.len() as f64;
    Inclusivity { r, per_attribute }
}

/// Share of N held by each non-empty cell, in taxonomy order.
pub fn group_representation_shares(manifest: &Manifest) -> Result<Vec<CellShare>> {
    shares_from_counts(&cell_counts(manifest))
}

fn shares_from_counts(counts: &CellCounts) -> Result<Vec<CellShare>> {
    let n = counts.total();
    if n == 0 {
        return Err(Error::EmptyManifest);
    }
    Ok(counts
        .nonzero()
        .map(|(cell, count)| CellShare {
            cell,
            count,
            share: count as f64 / n as f64,
        })
        .collect())
}

pub fn diversity(manifest: &Manifest, convention: DiversityConvention) -> Result<Diversity> {
    diversity_from_counts(&cell_counts(manifest), convention)
}

/// Diversity over a dense count vector. Ties resolve to the first cell in
/// taxonomy order.
pub(crate) fn diversity_from_counts(counts: &CellCounts, convention: DiversityConvention) -> Result<Diversity> {
    if counts.total() == 0 {
        return Err(Error::EmptyManifest);
    }
    let eligible = counts
        .dense()
        .iter()
        .enumerate()
        .filter(|(_, &c)| convention == DiversityConvention::AllCells || c > 0);
    let mut min: Option<(usize, usize)> = None;
    let mut max: Option<(usize, usize)> = None;
    for (i, &c) in eligible {
        if min.is_none_or(|(_, m)| c < m) {
            min = Some((i, c));
        }
        if max.is_none_or(|(_, m)| c > m) {
            max = Some((i, c));
        }
    }
    let (min_i, min_c) = min.expect("non-empty lattice");
    let (max_i, max_c) = max.expect("non-empty lattice");
    let taxonomy = counts.taxonomy();
    Ok(Diversity {
        // (min/N)/(max/N) reduces to min/max
        d: min_c as f64 / max_c as f64,
        convention,
        min_cell: taxonomy.cell_at(min_i),
        max_cell: taxonomy.cell_at(max_i),
    })
}

/// Lattice cells with zero records, in taxonomy order.
pub fn missing_cells(manifest: &Manifest) -> Vec<GroupKey> {
    let counts = cell_counts(manifest);
    counts
        .dense()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| counts.taxonomy().cell_at(i))
        .collect()
}

pub fn audit(manifest: &Manifest, convention: DiversityConvention) -> Result<AuditReport> {
    let counts = cell_counts(manifest);
    let grs = shares_from_counts(&counts)?;
    let diversity = diversity_from_counts(&counts, convention)?;
    Ok(AuditReport {
        n: manifest.len(),
        inclusivity: inclusivity(manifest),
        diversity,
        grs,
        missing_cells: missing_cells(manifest),
    })
}

impl AuditReport {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("audit report serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
