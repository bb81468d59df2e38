//! Metadata manifests: one row per face image.
//!
//! CSV layout: `id,source,gender,race,age_years,age_bin,split` with an optional
//! eighth `augmented_from` column. Empty fields are absent.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, Warning};
use crate::taxonomy::{Attribute, DemographicTaxonomy, GroupKey};

pub const MANIFEST_HEADER: [&str; 7] = ["id", "source", "gender", "race", "age_years", "age_bin", "split"];
pub const LINEAGE_COLUMN: &str = "augmented_from";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// A validated manifest row. `age_bin` is always filled after ingestion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaceRecord {
    pub id: String,
    pub source: String,
    pub gender: String,
    pub race: String,
    pub age_years: Option<u32>,
    pub age_bin: String,
    pub split: Option<Split>,
    pub augmented_from: Option<String>,
}

impl FaceRecord {
    pub fn key(&self) -> GroupKey {
        GroupKey::new(&self.gender, &self.race, &self.age_bin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParseMode {
    #[default]
    Strict,
    /// Unknown gender/race labels are remapped to the taxonomy's fallback subgroup.
    Lenient,
}

/// A label replaced by the fallback subgroup during lenient parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Remap {
    pub row: u64,
    pub attribute: Attribute,
    pub from: String,
    pub to: String,
}

#[derive(Debug, Clone)]
pub struct ParsedManifest {
    pub manifest: Manifest,
    pub remaps: Vec<Remap>,
    pub warnings: Vec<Warning>,
}

/// A named set of records bound to a taxonomy. Ids are unique and every label
/// belongs to the taxonomy.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    name: String,
    taxonomy: DemographicTaxonomy,
    records: Vec<FaceRecord>,
}

impl Manifest {
    pub fn new(name: impl Into<String>, taxonomy: DemographicTaxonomy, records: Vec<FaceRecord>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(records.len());
        for (i, record) in records.iter().enumerate() {
            let row = i as u64 + 2;
            if !ids.insert(record.id.as_str()) {
                return Err(Error::DuplicateId {
                    row,
                    id: record.id.clone(),
                });
            }
            for (attribute, label) in [
                (Attribute::Gender, &record.gender),
                (Attribute::Race, &record.race),
                (Attribute::Age, &record.age_bin),
            ] {
                if !taxonomy.contains(attribute, label) {
                    return Err(Error::UnknownSubgroup {
                        row: Some(row),
                        attribute,
                        label: label.clone(),
                    });
                }
            }
        }
        Ok(Self {
            name: name.into(),
            taxonomy,
            records,
        })
    }

    pub fn empty(name: impl Into<String>, taxonomy: DemographicTaxonomy) -> Self {
        Self {
            name: name.into(),
            taxonomy,
            records: Vec::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn taxonomy(&self) -> &DemographicTaxonomy {
        &self.taxonomy
    }

    pub fn records(&self) -> &[FaceRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<FaceRecord> {
        self.records
    }

    /// Total sample size N.
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Lattice index of every record, in record order.
    pub(crate) fn cell_indices(&self) -> Vec<usize> {
        self.records
            .iter()
            .map(|r| {
                self.taxonomy
                    .cell_index(&r.gender, &r.race, &r.age_bin)
                    .expect("validated record")
            })
            .collect()
    }

    /// SHA-256 of the canonical eight-column CSV serialization.
    pub fn checksum(&self) -> String {
        let mut buf = Vec::new();
        write_manifest(&mut buf, self, true).expect("writing to memory");
        hex::encode(Sha256::digest(&buf))
    }
}

/// Per-cell record counts over the full lattice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellCounts {
    taxonomy: DemographicTaxonomy,
    counts: Vec<usize>,
}

impl CellCounts {
    pub(crate) fn from_dense(taxonomy: DemographicTaxonomy, counts: Vec<usize>) -> Self {
        debug_assert_eq!(counts.len(), taxonomy.lattice_size());
        Self { taxonomy, counts }
    }

    pub fn taxonomy(&self) -> &DemographicTaxonomy {
        &self.taxonomy
    }

    /// Dense counts indexed by lattice position.
    pub fn dense(&self) -> &[usize] {
        &self.counts
    }

    pub fn get(&self, key: &GroupKey) -> usize {
        self.taxonomy.key_index(key).map_or(0, |i| self.counts[i])
    }

    /// Cells with at least one record, in taxonomy order.
    pub fn nonzero(&self) -> impl Iterator<Item = (GroupKey, usize)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (self.taxonomy.cell_at(i), c))
    }

    pub fn observed_cells(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_map(&self) -> HashMap<GroupKey, usize> {
        self.nonzero().collect()
    }
}

pub fn cell_counts(manifest: &Manifest) -> CellCounts {
    let mut counts = vec![0usize; manifest.taxonomy.lattice_size()];
    for idx in manifest.cell_indices() {
        counts[idx] += 1;
    }
    CellCounts {
        taxonomy: manifest.taxonomy.clone(),
        counts,
    }
}

/// Reads a manifest CSV, validating every row against `taxonomy`.
pub fn parse_manifest<R: Read>(
    reader: R,
    name: impl Into<String>,
    taxonomy: &DemographicTaxonomy,
    mode: ParseMode,
) -> Result<ParsedManifest> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = csv.headers().map_err(Error::from_csv)?.clone();
    let has_lineage = check_header(&headers)?;

    let mut records = Vec::new();
    let mut remaps = Vec::new();
    let mut warnings = Vec::new();
    let mut ids: HashMap<String, u64> = HashMap::new();

    for row in csv.records() {
        let row = row.map_err(Error::from_csv)?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).filter(|s| !s.is_empty());

        let id = field(0).ok_or_else(|| Error::Parse {
            line,
            column: 1,
            message: "id is empty".into(),
        })?;
        if ids.insert(id.to_string(), line).is_some() {
            return Err(Error::DuplicateId {
                row: line,
                id: id.to_string(),
            });
        }

        let mut labels = [String::new(), String::new()];
        for (slot, (attribute, col)) in labels.iter_mut().zip([(Attribute::Gender, 2), (Attribute::Race, 3)]) {
            let raw = field(col).unwrap_or("");
            *slot = resolve_label(taxonomy, attribute, raw, line, mode, &mut remaps, &mut warnings)?;
        }
        let [gender, race] = labels;

        let age_years = match field(4) {
            Some(text) => Some(text.trim().parse::<u32>().map_err(|_| Error::Parse {
                line,
                column: 5,
                message: format!("age_years {text:?} is not a non-negative integer"),
            })?),
            None => None,
        };
        let declared_bin = field(5);
        if let Some(bin) = declared_bin {
            if !taxonomy.contains(Attribute::Age, bin) {
                return Err(Error::UnknownSubgroup {
                    row: Some(line),
                    attribute: Attribute::Age,
                    label: bin.to_string(),
                });
            }
        }
        let age_bin = match (age_years, declared_bin) {
            (Some(years), declared) => {
                let bin = taxonomy.bin_age(years).map_err(|_| Error::Parse {
                    line,
                    column: 5,
                    message: format!("age {years} is not covered by any age bin"),
                })?;
                if let Some(declared) = declared.filter(|&d| d != bin) {
                    warnings.push(Warning::new(
                        "AGE_CONFLICT",
                        format!("row {line}: age_years {years} falls in {bin}, not declared {declared}; using {bin}"),
                    ));
                }
                bin.to_string()
            }
            (None, Some(declared)) => declared.to_string(),
            (None, None) => return Err(Error::MissingAge { row: line }),
        };

        let split = match field(6) {
            Some(text) => Some(text.parse::<Split>().map_err(|message| Error::Parse {
                line,
                column: 7,
                message,
            })?),
            None => None,
        };
        let augmented_from = if has_lineage {
            field(7).map(str::to_string)
        } else {
            None
        };

        records.push(FaceRecord {
            id: id.to_string(),
            source: field(1).unwrap_or("").to_string(),
            gender,
            race,
            age_years,
            age_bin,
            split,
            augmented_from,
        });
    }

    Ok(ParsedManifest {
        manifest: Manifest {
            name: name.into(),
            taxonomy: taxonomy.clone(),
            records,
        },
        remaps,
        warnings,
    })
}

fn check_header(headers: &csv::StringRecord) -> Result<bool> {
    let found: Vec<&str> = headers.iter().collect();
    let expected_prefix = &found[..found.len().min(MANIFEST_HEADER.len())];
    let ok = match found.len() {
        7 => expected_prefix == MANIFEST_HEADER,
        8 => expected_prefix == MANIFEST_HEADER && found[7] == LINEAGE_COLUMN,
        _ => false,
    };
    if ok {
        Ok(found.len() == 8)
    } else {
        Err(Error::Parse {
            line: 1,
            column: 1,
            message: format!(
                "expected header `{}` (optionally followed by `{LINEAGE_COLUMN}`), got `{}`",
                MANIFEST_HEADER.join(","),
                found.join(",")
            ),
        })
    }
}

fn resolve_label(
    taxonomy: &DemographicTaxonomy,
    attribute: Attribute,
    raw: &str,
    line: u64,
    mode: ParseMode,
    remaps: &mut Vec<Remap>,
    warnings: &mut Vec<Warning>,
) -> Result<String> {
    if taxonomy.contains(attribute, raw) {
        return Ok(raw.to_string());
    }
    let unknown = || Error::UnknownSubgroup {
        row: Some(line),
        attribute,
        label: raw.to_string(),
    };
    match mode {
        ParseMode::Strict => Err(unknown()),
        ParseMode::Lenient => {
            let fallback = taxonomy.fallback(attribute).ok_or_else(unknown)?;
            warnings.push(Warning::new(
                "LABEL_REMAPPED",
                format!("row {line}: {attribute} {raw:?} -> {fallback:?}"),
            ));
            remaps.push(Remap {
                row: line,
                attribute,
                from: raw.to_string(),
                to: fallback.to_string(),
            });
            Ok(fallback.to_string())
        }
    }
}

/// Writes `manifest` as CSV. The `augmented_from` column is emitted when
/// `lineage` is set or any record carries lineage.
pub fn write_manifest<W: Write>(writer: W, manifest: &Manifest, lineage: bool) -> Result<()> {
    let lineage = lineage || manifest.records.iter().any(|r| r.augmented_from.is_some());
    let mut csv = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let mut header: Vec<&str> = MANIFEST_HEADER.to_vec();
    if lineage {
        header.push(LINEAGE_COLUMN);
    }
    csv.write_record(&header).map_err(Error::from_csv)?;
    for r in &manifest.records {
        let age = r.age_years.map(|a| a.to_string()).unwrap_or_default();
        let split = r.split.map(Split::as_str).unwrap_or("");
        let mut row = vec![
            r.id.as_str(),
            r.source.as_str(),
            r.gender.as_str(),
            r.race.as_str(),
            age.as_str(),
            r.age_bin.as_str(),
            split,
        ];
        if lineage {
            row.push(r.augmented_from.as_deref().unwrap_or(""));
        }
        csv.write_record(&row).map_err(Error::from_csv)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn manifest_to_string(manifest: &Manifest, lineage: bool) -> String {
    let mut buf = Vec::new();
    write_manifest(&mut buf, manifest, lineage).expect("writing to memory");
    String::from_utf8(buf).expect("csv output is utf-8")
}

/// Id prefixes for a list of manifests: the manifest name, with repeated
/// names suffixed `#2`, `#3`, ...
pub(crate) fn source_prefixes<'a, I>(names: I) -> Vec<String>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut seen: HashMap<&str, usize> = HashMap::new();
    names
        .into_iter()
        .map(|name| {
            let n = seen.entry(name).or_insert(0);
            *n += 1;
            if *n == 1 {
                name.to_string()
            } else {
                format!("{name}#{n}")
            }
        })
        .collect()
}

/// Concatenates manifests that share a taxonomy, prefixing ids with
/// `<manifest name>/` so that ids stay unique.
pub fn merge_manifests(manifests: &[Manifest]) -> Result<Manifest> {
    let first = manifests.first().ok_or(Error::EmptyManifest)?;
    if manifests.iter().any(|m| m.taxonomy != first.taxonomy) {
        return Err(Error::TaxonomyMismatch);
    }
    let prefixes = source_prefixes(manifests.iter().map(|m| m.name()));
    let records = manifests
        .iter()
        .zip(&prefixes)
        .flat_map(|(m, prefix)| {
            m.records.iter().map(move |r| FaceRecord {
                id: format!("{prefix}/{}", r.id),
                augmented_from: r.augmented_from.as_ref().map(|a| format!("{prefix}/{a}")),
                ..r.clone()
            })
        })
        .collect();
    let name = manifests.iter().map(Manifest::name).collect::<Vec<_>>().join("+");
    Manifest::new(name, first.taxonomy.clone(), records)
}
