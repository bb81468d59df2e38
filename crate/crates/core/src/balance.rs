//! Balancing plans: merge source manifests and equalize per-cell counts by
//! undersampling large cells and reusing records of small cells through
//! augmentation multipliers.
//!
//! A plan is symbolic. An augmented record is a copy that points at its real
//! source id through `augmented_from`; materializing pixels is left to the
//! training harness.

use serde::{Deserialize, Serialize};

use crate::audit::{diversity_from_counts, DiversityConvention};
use crate::error::{Error, Result, Warning};
use crate::manifest::{cell_counts, merge_manifests, CellCounts, FaceRecord, Manifest};
use crate::rng;
use crate::taxonomy::{DemographicTaxonomy, GroupKey};

/// How the per-cell target count is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum QuotaMode {
    Fixed {
        target: usize,
    },
    MinNonzero,
    /// Lower median of the non-empty merged cell counts.
    #[default]
    Median,
    /// Largest target that leaves no non-empty cell short.
    MaxFillable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuotaPolicy {
    #[serde(flatten)]
    pub mode: QuotaMode,
    /// Each real record may appear at most this many times in the output.
    pub max_augment_factor: usize,
    pub allow_undersample: bool,
}

impl Default for QuotaPolicy {
    fn default() -> Self {
        Self {
            mode: QuotaMode::Median,
            max_augment_factor: 3,
            allow_undersample: true,
        }
    }
}

impl QuotaPolicy {
    pub fn new(mode: QuotaMode, max_augment_factor: usize, allow_undersample: bool) -> Result<Self> {
        let policy = Self {
            mode,
            max_augment_factor,
            allow_undersample,
        };
        policy.validate()?;
        Ok(policy)
    }

    fn validate(&self) -> Result<()> {
        if self.max_augment_factor < 1 {
            return Err(Error::InvalidPolicy("max_augment_factor must be at least 1".into()));
        }
        if let QuotaMode::Fixed { target: 0 } = self.mode {
            return Err(Error::InvalidPolicy("fixed target must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    KeepAll,
    UndersampleTo {
        n: usize,
    },
    /// `multipliers[j]` is the number of times the j-th real record (in seeded
    /// shuffle order) appears in the output, counting the original.
    Augment {
        base: usize,
        multipliers: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellAction {
    pub cell: GroupKey,
    pub available: usize,
    pub quota: usize,
    pub action: Action,
    pub resulting: usize,
    pub shortfall: usize,
}

/// Identity of a source manifest a plan was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceIdentity {
    pub name: String,
    pub records: usize,
    pub checksum: String,
}

impl SourceIdentity {
    pub fn of(manifest: &Manifest) -> Self {
        Self {
            name: manifest.name().to_string(),
            records: manifest.len(),
            checksum: manifest.checksum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancePlan {
    pub policy: QuotaPolicy,
    pub seed: u64,
    pub sources: Vec<SourceIdentity>,
    pub taxonomy: DemographicTaxonomy,
    /// One entry per lattice cell, in taxonomy order.
    pub actions: Vec<CellAction>,
    #[serde(rename = "projected_D")]
    pub projected_d: f64,
}

impl BalancePlan {
    pub fn resulting_counts(&self) -> Vec<usize> {
        self.actions.iter().map(|a| a.resulting).collect()
    }

    pub fn total_shortfall(&self) -> usize {
        self.actions.iter().map(|a| a.shortfall).sum()
    }

    /// One `SHORTFALL` warning per non-empty cell that cannot reach its quota,
    /// and a single `EMPTY_CELLS` summary for cells with no records at all.
    pub fn warnings(&self) -> Vec<Warning> {
        let mut warnings: Vec<Warning> = self
            .actions
            .iter()
            .filter(|a| a.shortfall > 0 && a.available > 0)
            .map(|a| {
                Warning::new(
                    "SHORTFALL",
                    format!(
                        "cell {} available {} quota {} short {}",
                        a.cell, a.available, a.quota, a.shortfall
                    ),
                )
            })
            .collect();
        let empty: Vec<&CellAction> = self.actions.iter().filter(|a| a.available == 0).collect();
        if let Some(first) = empty.first() {
            warnings.push(Warning::new(
                "EMPTY_CELLS",
                format!(
                    "{} cells have no records and stay empty (quota {}, short {})",
                    empty.len(),
                    first.quota,
                    empty.iter().map(|a| a.shortfall).sum::<usize>()
                ),
            ));
        }
        warnings
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.policy.validate()?;
        Ok(plan)
    }
}

pub fn resolve_quota(sources: &[Manifest], policy: &QuotaPolicy) -> Result<usize> {
    policy.validate()?;
    let merged = merge_manifests(sources)?;
    quota_from_counts(&cell_counts(&merged), policy)
}

fn quota_from_counts(counts: &CellCounts, policy: &QuotaPolicy) -> Result<usize> {
    let mut nonzero: Vec<usize> = counts.dense().iter().copied().filter(|&c| c > 0).collect();
    if nonzero.is_empty() {
        return Err(Error::EmptyLattice);
    }
    nonzero.sort_unstable();
    Ok(match policy.mode {
        QuotaMode::Fixed { target } => target,
        QuotaMode::MinNonzero => nonzero[0],
        QuotaMode::Median => nonzero[(nonzero.len() - 1) / 2],
        QuotaMode::MaxFillable => nonzero[0] * policy.max_augment_factor,
    })
}

/// `target` uses spread over `base` records as evenly as possible, larger
/// multipliers first.
fn even_multipliers(target: usize, base: usize) -> Vec<usize> {
    let (q, r) = (target / base, target % base);
    (0..base).map(|j| if j < r { q + 1 } else { q }).collect()
}

fn plan_cell(cell: GroupKey, available: usize, quota: usize, policy: &QuotaPolicy) -> CellAction {
    let (action, resulting) = if available == 0 {
        (Action::KeepAll, 0)
    } else if available >= quota {
        if available > quota && policy.allow_undersample {
            (Action::UndersampleTo { n: quota }, quota)
        } else {
            (Action::KeepAll, available)
        }
    } else {
        let reachable = quota.min(available * policy.max_augment_factor);
        if reachable == available {
            (Action::KeepAll, available)
        } else {
            (
                Action::Augment {
                    base: available,
                    multipliers: even_multipliers(reachable, available),
                },
                reachable,
            )
        }
    };
    CellAction {
        cell,
        available,
        quota,
        action,
        resulting,
        shortfall: quota.saturating_sub(resulting),
    }
}

pub fn build_plan(sources: &[Manifest], policy: QuotaPolicy, seed: u64) -> Result<BalancePlan> {
    policy.validate()?;
    let merged = merge_manifests(sources)?;
    let counts = cell_counts(&merged);
    let quota = quota_from_counts(&counts, &policy)?;
    let taxonomy = merged.taxonomy().clone();
    let actions: Vec<CellAction> = counts
        .dense()
        .iter()
        .enumerate()
        .map(|(i, &available)| plan_cell(taxonomy.cell_at(i), available, quota, &policy))
        .collect();
    let projected = counts_like(&counts, actions.iter().map(|a| a.resulting).collect());
    let projected_d = diversity_from_counts(&projected, DiversityConvention::Observed)?.d;
    Ok(BalancePlan {
        policy,
        seed,
        sources: sources.iter().map(SourceIdentity::of).collect(),
        taxonomy,
        actions,
        projected_d,
    })
}

fn counts_like(template: &CellCounts, dense: Vec<usize>) -> CellCounts {
    CellCounts::from_dense(template.taxonomy().clone(), dense)
}

/// Realizes `plan` over `sources`. The sources must be the ones the plan was
/// built from (same count, record totals, checksums and taxonomy).
///
/// Output keeps the merged record order; augmented copies follow their real
/// record and get ids `<real id>~aug<k>`.
pub fn apply_plan(plan: &BalancePlan, sources: &[Manifest]) -> Result<Manifest> {
    if sources.len() != plan.sources.len() {
        return Err(Error::SourceMismatch(format!(
            "plan expects {} sources, got {}",
            plan.sources.len(),
            sources.len()
        )));
    }
    let mut renamed = Vec::with_capacity(sources.len());
    for (source, expected) in sources.iter().zip(&plan.sources) {
        if source.taxonomy() != &plan.taxonomy {
            return Err(Error::SourceMismatch(format!(
                "{} uses a different taxonomy",
                source.name()
            )));
        }
        if source.len() != expected.records || source.checksum() != expected.checksum {
            return Err(Error::SourceMismatch(format!(
                "{} does not match plan source {} ({} records, checksum {})",
                source.name(),
                expected.name,
                expected.records,
                expected.checksum
            )));
        }
        renamed.push(source.clone().with_name(expected.name.clone()));
    }
    let merged = merge_manifests(&renamed)?;
    let taxonomy = merged.taxonomy();
    if plan.actions.len() != taxonomy.lattice_size() {
        return Err(Error::SourceMismatch("plan does not cover the lattice".into()));
    }

    let cells = merged.cell_indices();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); taxonomy.lattice_size()];
    for (record, &cell) in cells.iter().enumerate() {
        members[cell].push(record);
    }

    let mut multiplicity = vec![1usize; merged.len()];
    for (cell, action) in plan.actions.iter().enumerate() {
        let group = &members[cell];
        if action.cell != taxonomy.cell_at(cell) || action.available != group.len() {
            return Err(Error::SourceMismatch(format!(
                "plan entry for {} is stale",
                action.cell
            )));
        }
        let mut order = group.clone();
        match &action.action {
            Action::KeepAll => continue,
            Action::UndersampleTo { n } => {
                rng::shuffle(&mut rng::stream(plan.seed, cell as u64), &mut order);
                for &dropped in &order[(*n).min(order.len())..] {
                    multiplicity[dropped] = 0;
                }
            }
            Action::Augment { base, multipliers } => {
                if *base != group.len() || multipliers.len() != group.len() {
                    return Err(Error::SourceMismatch(format!(
                        "augment schedule for {} is stale",
                        action.cell
                    )));
                }
                rng::shuffle(&mut rng::stream(plan.seed, cell as u64), &mut order);
                for (&record, &m) in order.iter().zip(multipliers) {
                    multiplicity[record] = m;
                }
            }
        }
    }

    let mut records = Vec::with_capacity(multiplicity.iter().sum());
    for (record, &m) in merged.records().iter().zip(&multiplicity) {
        if m == 0 {
            continue;
        }
        records.push(record.clone());
        for copy in 1..m {
            records.push(FaceRecord {
                id: format!("{}~aug{copy}", record.id),
                augmented_from: Some(record.id.clone()),
                ..record.clone()
            });
        }
    }
    Manifest::new("balanced", taxonomy.clone(), records)
}
