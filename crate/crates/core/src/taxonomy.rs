//! Demographic taxonomy: the expected subgroups per attribute and the age
//! binning scheme that together define the gender × race × age lattice.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One of the three audited demographic axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Gender,
    Race,
    Age,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Gender, Attribute::Race, Attribute::Age];

    pub fn as_str(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::Race => "race",
            Attribute::Age => "age",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gender" => Ok(Attribute::Gender),
            "race" => Ok(Attribute::Race),
            "age" | "age_bin" => Ok(Attribute::Age),
            other => Err(Error::InvalidGrouping(other.to_string())),
        }
    }
}

/// Inclusive age range `[min, max]` with a display label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeBin {
    pub label: String,
    pub min: u32,
    /// `u32::MAX` for an open-ended bin such as `70+`.
    pub max: u32,
}

impl AgeBin {
    pub fn new(label: impl Into<String>, min: u32, max: u32) -> Self {
        Self {
            label: label.into(),
            min,
            max,
        }
    }

    pub fn contains(&self, age: u32) -> bool {
        self.min <= age && age <= self.max
    }
}

/// A cell of the gender × race × age lattice.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub gender: String,
    pub race: String,
    pub age_bin: String,
}

impl GroupKey {
    pub fn new(gender: impl Into<String>, race: impl Into<String>, age_bin: impl Into<String>) -> Self {
        Self {
            gender: gender.into(),
            race: race.into(),
            age_bin: age_bin.into(),
        }
    }

    pub fn label(&self, attribute: Attribute) -> &str {
        match attribute {
            Attribute::Gender => &self.gender,
            Attribute::Race => &self.race,
            Attribute::Age => &self.age_bin,
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.gender, self.race, self.age_bin)
    }
}

/// The expected subgroup universe. Immutable once built; every constructor
/// validates the invariants (unique labels, non-empty attributes,
/// non-overlapping ascending age bins).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyDocument", into = "TaxonomyDocument")]
pub struct DemographicTaxonomy {
    gender: Vec<String>,
    race: Vec<String>,
    age_bins: Vec<AgeBin>,
    fallback: BTreeMap<Attribute, String>,
}

const TABLE1_RACES: [&str; 9] = [
    "White",
    "Black",
    "Southeast Asian",
    "East Asian",
    "Indian",
    "Hispanic",
    "Middle Eastern",
    "Mixed-race",
    "Other",
];

const GENDERS: [&str; 3] = ["Male", "Female", "Other"];

/// Wire form of a taxonomy document.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaxonomyDocument {
    gender: Vec<String>,
    race: Vec<String>,
    age_bins: Vec<AgeBinDocument>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    fallback: BTreeMap<Attribute, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgeBinDocument {
    label: String,
    min: u32,
    /// Omitted for open-ended bins.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max: Option<u32>,
}

impl DemographicTaxonomy {
    pub fn new(
        gender: Vec<String>,
        race: Vec<String>,
        mut age_bins: Vec<AgeBin>,
        fallback: BTreeMap<Attribute, String>,
    ) -> Result<Self> {
        check_labels(Attribute::Gender, &gender)?;
        check_labels(Attribute::Race, &race)?;
        let bin_labels: Vec<String> = age_bins.iter().map(|b| b.label.clone()).collect();
        check_labels(Attribute::Age, &bin_labels)?;
        for bin in &age_bins {
            if bin.min > bin.max {
                return Err(Error::InvalidTaxonomy(format!(
                    "age bin {:?} has min {} > max {}",
                    bin.label, bin.min, bin.max
                )));
            }
        }
        age_bins.sort_by_key(|b| (b.min, b.max));
        for pair in age_bins.windows(2) {
            if pair[1].min <= pair[0].max {
                return Err(Error::BinOverlap {
                    first: pair[0].label.clone(),
                    second: pair[1].label.clone(),
                });
            }
        }
        let taxonomy = Self {
            gender,
            race,
            age_bins,
            fallback,
        };
        for (&attribute, label) in &taxonomy.fallback {
            if attribute == Attribute::Age {
                return Err(Error::InvalidTaxonomy(
                    "fallback labels apply to gender and race only".into(),
                ));
            }
            if taxonomy.index_of(attribute, label).is_none() {
                return Err(Error::InvalidTaxonomy(format!(
                    "fallback {attribute} label {label:?} is not a subgroup"
                )));
            }
        }
        Ok(taxonomy)
    }

    /// The default lattice: 3 genders, 9 races, 10 age bins (270 cells).
    pub fn table1() -> Self {
        let bins = [
            (0, 2),
            (3, 7),
            (8, 15),
            (16, 20),
            (21, 30),
            (31, 40),
            (41, 50),
            (51, 60),
            (61, 70),
            (71, 100),
        ]
        .into_iter()
        .map(|(lo, hi)| AgeBin::new(format!("{lo}-{hi}"), lo, hi))
        .collect();
        Self::with_standard_subgroups(bins)
    }

    /// Decade bins used by the age fairness evaluation: 0-2, 3-9, 10-19, ..., 60-69, 70+.
    pub fn eval() -> Self {
        let mut bins = vec![AgeBin::new("0-2", 0, 2), AgeBin::new("3-9", 3, 9)];
        for decade in 1..7 {
            let lo = decade * 10;
            bins.push(AgeBin::new(format!("{lo}-{}", lo + 9), lo, lo + 9));
        }
        bins.push(AgeBin::new("70+", 70, u32::MAX));
        Self::with_standard_subgroups(bins)
    }

    fn with_standard_subgroups(age_bins: Vec<AgeBin>) -> Self {
        let fallback = BTreeMap::from([
            (Attribute::Gender, "Other".to_string()),
            (Attribute::Race, "Other".to_string()),
        ]);
        Self::new(
            GENDERS.iter().map(|s| s.to_string()).collect(),
            TABLE1_RACES.iter().map(|s| s.to_string()).collect(),
            age_bins,
            fallback,
        )
        .expect("built-in taxonomy is valid")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "table1" => Ok(Self::table1()),
            "eval" => Ok(Self::eval()),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    /// Parses a JSON taxonomy document.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: TaxonomyDocument = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line() as u64,
            column: e.column() as u64,
            message: e.to_string(),
        })?;
        Self::try_from(doc)
    }

    pub fn from_reader<R: Read>(mut reader: R) -> Result<Self> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("taxonomy serializes")
    }

    pub fn genders(&self) -> &[String] {
        &self.gender
    }

    pub fn races(&self) -> &[String] {
        &self.race
    }

    pub fn age_bins(&self) -> &[AgeBin] {
        &self.age_bins
    }

    pub fn fallback(&self, attribute: Attribute) -> Option<&str> {
        self.fallback.get(&attribute).map(String::as_str)
    }

    /// Labels of `attribute` in taxonomy order.
    pub fn subgroups(&self, attribute: Attribute) -> Vec<&str> {
        match attribute {
            Attribute::Gender => self.gender.iter().map(String::as_str).collect(),
            Attribute::Race => self.race.iter().map(String::as_str).collect(),
            Attribute::Age => self.age_bins.iter().map(|b| b.label.as_str()).collect(),
        }
    }

    pub fn subgroup_count(&self, attribute: Attribute) -> usize {
        match attribute {
            Attribute::Gender => self.gender.len(),
            Attribute::Race => self.race.len(),
            Attribute::Age => self.age_bins.len(),
        }
    }

    pub fn index_of(&self, attribute: Attribute, label: &str) -> Option<usize> {
        match attribute {
            Attribute::Gender => self.gender.iter().position(|g| g == label),
            Attribute::Race => self.race.iter().position(|r| r == label),
            Attribute::Age => self.age_bins.iter().position(|b| b.label == label),
        }
    }

    pub fn contains(&self, attribute: Attribute, label: &str) -> bool {
        self.index_of(attribute, label).is_some()
    }

    /// Label of the bin containing `age_years`.
    pub fn bin_age(&self, age_years: u32) -> Result<&str> {
        // bins are sorted and disjoint: first bin whose max reaches the age
        let idx = self.age_bins.partition_point(|b| b.max < age_years);
        match self.age_bins.get(idx) {
            Some(bin) if bin.contains(age_years) => Ok(&bin.label),
            _ => Err(Error::UnbinnableAge(age_years)),
        }
    }

    pub fn lattice_size(&self) -> usize {
        self.gender.len() * self.race.len() * self.age_bins.len()
    }

    /// Position of a cell in lattice order (gender, then race, then age bin).
    pub fn cell_index(&self, gender: &str, race: &str, age_bin: &str) -> Option<usize> {
        let g = self.index_of(Attribute::Gender, gender)?;
        let r = self.index_of(Attribute::Race, race)?;
        let a = self.index_of(Attribute::Age, age_bin)?;
        Some((g * self.race.len() + r) * self.age_bins.len() + a)
    }

    pub fn key_index(&self, key: &GroupKey) -> Option<usize> {
        self.cell_index(&key.gender, &key.race, &key.age_bin)
    }

    pub fn cell_at(&self, index: usize) -> GroupKey {
        let a = index % self.age_bins.len();
        let r = (index / self.age_bins.len()) % self.race.len();
        let g = index / (self.age_bins.len() * self.race.len());
        GroupKey::new(
            self.gender[g].clone(),
            self.race[r].clone(),
            self.age_bins[a].label.clone(),
        )
    }

    /// All lattice cells in taxonomy order.
    pub fn cells(&self) -> impl Iterator<Item = GroupKey> + '_ {
        (0..self.lattice_size()).map(|i| self.cell_at(i))
    }
}

impl TryFrom<TaxonomyDocument> for DemographicTaxonomy {
    type Error = Error;

    fn try_from(doc: TaxonomyDocument) -> Result<Self> {
        let bins = doc
            .age_bins
            .into_iter()
            .map(|b| AgeBin::new(b.label, b.min, b.max.unwrap_or(u32::MAX)))
            .collect();
        Self::new(doc.gender, doc.race, bins, doc.fallback)
    }
}

impl From<DemographicTaxonomy> for TaxonomyDocument {
    fn from(t: DemographicTaxonomy) -> Self {
        TaxonomyDocument {
            gender: t.gender,
            race: t.race,
            age_bins: t
                .age_bins
                .into_iter()
                .map(|b| AgeBinDocument {
                    label: b.label,
                    min: b.min,
                    max: (b.max != u32::MAX).then_some(b.max),
                })
                .collect(),
            fallback: t.fallback,
        }
    }
}

fn check_labels(attribute: Attribute, labels: &[String]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::InvalidTaxonomy(format!(
            "attribute {attribute} has no subgroups"
        )));
    }
    let mut seen = HashSet::new();
    for label in labels {
        if !seen.insert(label.as_str()) {
            return Err(Error::DuplicateSubgroup {
                attribute,
                label: label.clone(),
            });
        }
    }
    Ok(())
}
