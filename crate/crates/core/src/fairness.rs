//! Group fairness over classifier prediction logs.
//!
//! Labels are binary with `1` coding the female class and `0` the male class.
//! [`PositiveLabel`] chooses which class plays the role of `Ŷ = 1` in the
//! confusion tallies, the positive outcome ratio and Disparate Impact.
//! Per-class recall (`tpr_f`, `tpr_m`) does not depend on that choice.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Warning};
use crate::taxonomy::{Attribute, DemographicTaxonomy};

pub const PREDICTION_HEADER: [&str; 7] = ["id", "gender", "race", "age_bin", "y_true", "y_pred", "score"];
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Disparate Impact below this ratio is flagged (four-fifths rule).
pub const FOUR_FIFTHS: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositiveLabel {
    #[default]
    Female,
    Male,
}

impl PositiveLabel {
    /// Binary code of this class in a prediction log.
    pub fn code(self) -> u8 {
        match self {
            PositiveLabel::Female => 1,
            PositiveLabel::Male => 0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            PositiveLabel::Female => PositiveLabel::Male,
            PositiveLabel::Male => PositiveLabel::Female,
        }
    }
}

impl fmt::Display for PositiveLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PositiveLabel::Female => "female",
            PositiveLabel::Male => "male",
        })
    }
}

impl FromStr for PositiveLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "female" => Ok(PositiveLabel::Female),
            "male" => Ok(PositiveLabel::Male),
            other => Err(format!("positive label must be female or male, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub gender: String,
    pub race: String,
    pub age_bin: String,
    pub y_true: u8,
    pub y_pred: u8,
    pub score: Option<f64>,
}

impl PredictionRecord {
    pub fn label(&self, attribute: Attribute) -> &str {
        match attribute {
            Attribute::Gender => &self.gender,
            Attribute::Race => &self.race,
            Attribute::Age => &self.age_bin,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParsedPredictions {
    pub records: Vec<PredictionRecord>,
    pub warnings: Vec<Warning>,
}

/// Reads a prediction log. Rows whose score disagrees with `y_pred` at
/// `threshold` are kept and reported as `SCORE_MISMATCH` warnings.
pub fn parse_predictions<R: Read>(
    reader: R,
    taxonomy: &DemographicTaxonomy,
    threshold: f64,
) -> Result<ParsedPredictions> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = csv.headers().map_err(Error::from_csv)?.clone();
    if headers.iter().ne(PREDICTION_HEADER) {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: format!(
                "expected header `{}`, got `{}`",
                PREDICTION_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for row in csv.records() {
        let row = row.map_err(Error::from_csv)?;
        let line = row.position().map_or(0, |p| p.line());
        let get = |i: usize| row.get(i).unwrap_or("");

        for (attribute, col) in [(Attribute::Gender, 1), (Attribute::Race, 2), (Attribute::Age, 3)] {
            if !taxonomy.contains(attribute, get(col)) {
                return Err(Error::UnknownSubgroup {
                    row: Some(line),
                    attribute,
                    label: get(col).to_string(),
                });
            }
        }
        let binary = |col: usize, column: &'static str| match get(col).trim() {
            "0" => Ok(0u8),
            "1" => Ok(1u8),
            other => Err(Error::MalformedLabel {
                row: line,
                column,
                value: other.to_string(),
            }),
        };
        let y_true = binary(4, "y_true")?;
        let y_pred = binary(5, "y_pred")?;
        let score = match get(6).trim() {
            "" => None,
            text => {
                let s: f64 = text.parse().map_err(|_| Error::Parse {
                    line,
                    column: 7,
                    message: format!("score {text:?} is not a number"),
                })?;
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::Parse {
                        line,
                        column: 7,
                        message: format!("score {s} outside [0, 1]"),
                    });
                }
                Some(s)
            }
        };
        if let Some(s) = score {
            let implied = u8::from(s >= threshold);
            if implied != y_pred {
                warnings.push(Warning::new(
                    "SCORE_MISMATCH",
                    format!("row {line}: score {s} at threshold {threshold} implies y_pred {implied}, got {y_pred}"),
                ));
            }
        }
        records.push(PredictionRecord {
            id: get(0).to_string(),
            gender: get(1).to_string(),
            race: get(2).to_string(),
            age_bin: get(3).to_string(),
            y_true,
            y_pred,
            score,
        });
    }
    Ok(ParsedPredictions { records, warnings })
}

pub fn write_predictions<W: Write>(writer: W, records: &[PredictionRecord]) -> Result<()> {
    let mut csv = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    csv.write_record(PREDICTION_HEADER).map_err(Error::from_csv)?;
    for r in records {
        let score = r.score.map(|s| s.to_string()).unwrap_or_default();
        csv.write_record([
            r.id.as_str(),
            &r.gender,
            &r.race,
            &r.age_bin,
            if r.y_true == 1 { "1" } else { "0" },
            if r.y_pred == 1 { "1" } else { "0" },
            &score,
        ])
        .map_err(Error::from_csv)?;
    }
    csv.flush()?;
    Ok(())
}

/// Which sensitive attributes define a group, e.g. `race` or `race+gender`.
/// Group names join the labels with `+` in selector order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grouping(Vec<Attribute>);

impl Grouping {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        let mut seen = Vec::new();
        for &a in &attributes {
            if seen.contains(&a) {
                return Err(Error::InvalidGrouping(format!("{a} repeated")));
            }
            seen.push(a);
        }
        if attributes.is_empty() {
            return Err(Error::InvalidGrouping(String::new()));
        }
        Ok(Self(attributes))
    }

    pub fn single(attribute: Attribute) -> Self {
        Self(vec![attribute])
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.0
    }

    pub fn group_name(&self, record: &PredictionRecord) -> String {
        self.0.iter().map(|&a| record.label(a)).collect::<Vec<_>>().join("+")
    }

    fn sort_key(&self, taxonomy: &DemographicTaxonomy, record: &PredictionRecord) -> Vec<usize> {
        self.0
            .iter()
            .map(|&a| taxonomy.index_of(a, record.label(a)).unwrap_or(usize::MAX))
            .collect()
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|a| a.as_str()).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let attributes = s
            .split('+')
            .map(|part| part.trim().parse::<Attribute>())
            .collect::<Result<Vec<_>>>()
            .map_err(|_| Error::InvalidGrouping(s.to_string()))?;
        Self::new(attributes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Tally {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupConfusion {
    pub group: String,
    #[serde(flatten)]
    pub tally: Tally,
}

impl GroupConfusion {
    pub fn new(group: impl Into<String>, tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        Self {
            group: group.into(),
            tally: Tally { tp, fp, fn_, tn },
        }
    }

    pub fn total(&self) -> usize {
        let t = &self.tally;
        t.tp + t.fp + t.fn_ + t.tn
    }

    pub fn tpr(&self) -> Result<f64> {
        tpr(self)
    }

    /// Recall of the negative class, `tn / (tn + fp)`.
    pub fn tnr(&self) -> Result<f64> {
        ratio(self.tally.tn, self.tally.tn + self.tally.fp, || {
            format!("group {:?} has no negatives", self.group)
        })
    }

    pub fn fpr(&self) -> Result<f64> {
        ratio(self.tally.fp, self.tally.tn + self.tally.fp, || {
            format!("group {:?} has no negatives", self.group)
        })
    }

    pub fn por(&self) -> Result<f64> {
        positive_outcome_ratio(self)
    }

    pub fn accuracy(&self) -> Result<f64> {
        ratio(self.tally.tp + self.tally.tn, self.total(), || {
            format!("group {:?} is empty", self.group)
        })
    }

    /// Recall of the class coded `code` (1 = female, 0 = male) given the
    /// positive label the tally was built with.
    pub fn class_recall(&self, code: u8, positive: PositiveLabel) -> Result<f64> {
        if code == positive.code() {
            self.tpr()
        } else {
            self.tnr()
        }
    }
}

fn ratio(num: usize, den: usize, why: impl FnOnce() -> String) -> Result<f64> {
    if den == 0 {
        Err(Error::UndefinedRate(why()))
    } else {
        Ok(num as f64 / den as f64)
    }
}

/// `tp / (tp + fn)`.
pub fn tpr(conf: &GroupConfusion) -> Result<f64> {
    ratio(conf.tally.tp, conf.tally.tp + conf.tally.fn_, || {
        format!("group {:?} has no positives", conf.group)
    })
}

/// Predicted-positive rate `(tp + fp) / total`.
pub fn positive_outcome_ratio(conf: &GroupConfusion) -> Result<f64> {
    ratio(conf.tally.tp + conf.tally.fp, conf.total(), || {
        format!("group {:?} is empty", conf.group)
    })
}

/// Per-group confusion tallies, ordered by the taxonomy order of the grouping
/// attributes.
pub fn confusion_by_group(
    records: &[PredictionRecord],
    grouping: &Grouping,
    taxonomy: &DemographicTaxonomy,
    positive: PositiveLabel,
) -> Result<Vec<GroupConfusion>> {
    if records.is_empty() {
        return Err(Error::EmptyLog);
    }
    let pos = positive.code();
    let mut groups: Vec<(Vec<usize>, GroupConfusion)> = Vec::new();
    for r in records {
        let key = grouping.sort_key(taxonomy, r);
        let idx = match groups.binary_search_by(|(k, _)| k.cmp(&key)) {
            Ok(i) => i,
            Err(i) => {
                groups.insert(i, (key, GroupConfusion::new(grouping.group_name(r), 0, 0, 0, 0)));
                i
            }
        };
        let t = &mut groups[idx].1.tally;
        match (r.y_true == pos, r.y_pred == pos) {
            (true, true) => t.tp += 1,
            (false, true) => t.fp += 1,
            (true, false) => t.fn_ += 1,
            (false, false) => t.tn += 1,
        }
    }
    Ok(groups.into_iter().map(|(_, c)| c).collect())
}

/// `POR(g) / POR(reference)` for every group; the reference maps to exactly 1.
pub fn disparate_impact(table: &[GroupConfusion], reference: &str) -> Result<Vec<(String, f64)>> {
    let reference_conf = table
        .iter()
        .find(|c| c.group == reference)
        .ok_or_else(|| Error::UnknownReference(reference.to_string()))?;
    let reference_por = reference_conf.por()?;
    if reference_por == 0.0 {
        return Err(Error::DegenerateReference(reference.to_string()));
    }
    table
        .iter()
        .map(|c| {
            let di = if c.group == reference {
                1.0
            } else {
                c.por()? / reference_por
            };
            Ok((c.group.clone(), di))
        })
        .collect()
}

pub fn four_fifths_flags(di: &[(String, f64)]) -> Vec<(String, bool)> {
    di.iter().map(|(g, v)| (g.clone(), *v < FOUR_FIFTHS)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EqualizedOdds {
    /// Largest `|ln(acc_j / acc_k)|` over group pairs.
    pub epsilon: f64,
    /// `exp(epsilon)`: the largest accuracy ratio.
    pub ratio: f64,
    /// The maximizing pair, higher-accuracy group first.
    pub pair: (String, String),
}

/// Maximum absolute log-ratio of per-group accuracies. Ties keep the first
/// pair in group order.
pub fn equalized_odds_epsilon(table: &[GroupConfusion]) -> Result<EqualizedOdds> {
    let accuracies = table
        .iter()
        .map(|c| {
            let acc = c.accuracy()?;
            if acc == 0.0 {
                Err(Error::DegenerateAccuracy(c.group.clone()))
            } else {
                Ok(acc)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let first = table.first().ok_or(Error::EmptyLog)?;
    let mut best: Option<(f64, usize, usize)> = None;
    for j in 0..table.len() {
        for k in j + 1..table.len() {
            let e = (accuracies[j] / accuracies[k]).ln().abs();
            if best.is_none_or(|(b, _, _)| e > b) {
                best = Some((e, j, k));
            }
        }
    }
    let (epsilon, pair) = match best {
        Some((e, j, k)) => {
            let (hi, lo) = if accuracies[j] >= accuracies[k] { (j, k) } else { (k, j) };
            (e, (table[hi].group.clone(), table[lo].group.clone()))
        }
        None => (0.0, (first.group.clone(), first.group.clone())),
    };
    Ok(EqualizedOdds {
        epsilon,
        ratio: epsilon.exp(),
        pair,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TprGap {
    pub gap: f64,
    pub max_group: String,
    pub min_group: String,
    /// Groups without positives, left out of the max/min.
    pub excluded: Vec<String>,
}

/// `max TPR - min TPR` over groups with a defined TPR.
pub fn tpr_gap(table: &[GroupConfusion]) -> Result<TprGap> {
    let mut excluded = Vec::new();
    let mut max: Option<(f64, &str)> = None;
    let mut min: Option<(f64, &str)> = None;
    for c in table {
        match c.tpr() {
            Ok(v) => {
                if max.is_none_or(|(m, _)| v > m) {
                    max = Some((v, &c.group));
                }
                if min.is_none_or(|(m, _)| v < m) {
                    min = Some((v, &c.group));
                }
            }
            Err(_) => excluded.push(c.group.clone()),
        }
    }
    match (max, min) {
        (Some((hi, hi_g)), Some((lo, lo_g))) => Ok(TprGap {
            gap: hi - lo,
            max_group: hi_g.to_string(),
            min_group: lo_g.to_string(),
            excluded,
        }),
        _ => Err(Error::UndefinedRate("no group has a defined TPR".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub name: String,
    /// Recall on female faces.
    #[serde(default)]
    pub tpr_f: Option<f64>,
    /// Recall on male faces.
    #[serde(default)]
    pub tpr_m: Option<f64>,
    #[serde(default)]
    pub por: Option<f64>,
    #[serde(default)]
    pub di: Option<f64>,
    #[serde(default)]
    pub flagged: bool,
}

/// A group left out of one of the summary statistics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub name: String,
    pub metric: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub grouping: String,
    pub positive_label: PositiveLabel,
    pub reference: String,
    pub groups: Vec<GroupMetrics>,
    #[serde(default)]
    pub eo_epsilon: Option<f64>,
    #[serde(default)]
    pub eo_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eo_pair: Option<(String, String)>,
    /// Spread of positive-class TPR across groups.
    #[serde(default)]
    pub tpr_gap: Option<f64>,
    #[serde(default)]
    pub excluded: Vec<Exclusion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

impl FairnessReport {
    pub fn group(&self, name: &str) -> Option<&GroupMetrics> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Parses a report. Four-fifths flags are recomputed from the DI values.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut report: Self = serde_json::from_str(text)?;
        for g in &mut report.groups {
            g.flagged = g.di.is_some_and(|d| d < FOUR_FIFTHS);
        }
        Ok(report)
    }
}

/// Builds the full report for one grouping. Groups whose accuracy is zero are
/// left out of epsilon and groups without positives out of the TPR gap; both
/// are listed in `excluded`.
pub fn evaluate(
    records: &[PredictionRecord],
    taxonomy: &DemographicTaxonomy,
    grouping: &Grouping,
    reference: &str,
    positive: PositiveLabel,
) -> Result<FairnessReport> {
    let table = confusion_by_group(records, grouping, taxonomy, positive)?;
    let di = disparate_impact(&table, reference)?;
    let flags = four_fifths_flags(&di);

    let groups = table
        .iter()
        .zip(di.iter().zip(&flags))
        .map(|(c, ((_, d), (_, flagged)))| GroupMetrics {
            name: c.group.clone(),
            tpr_f: c.class_recall(1, positive).ok(),
            tpr_m: c.class_recall(0, positive).ok(),
            por: c.por().ok(),
            di: Some(*d),
            flagged: *flagged,
        })
        .collect();

    let mut excluded = Vec::new();
    let scorable: Vec<GroupConfusion> = table
        .iter()
        .filter(|c| {
            let ok = c.accuracy().is_ok_and(|a| a > 0.0);
            if !ok {
                excluded.push(Exclusion {
                    name: c.group.clone(),
                    metric: "eo_epsilon".into(),
                    reason: "zero accuracy".into(),
                });
            }
            ok
        })
        .cloned()
        .collect();
    let eo = if scorable.is_empty() {
        None
    } else {
        Some(equalized_odds_epsilon(&scorable)?)
    };
    let gap = tpr_gap(&table).ok();
    for c in table.iter().filter(|c| c.tpr().is_err()) {
        excluded.push(Exclusion {
            name: c.group.clone(),
            metric: "tpr_gap".into(),
            reason: format!("no {positive} ground truth"),
        });
    }

    let correct: usize = table.iter().map(|c| c.tally.tp + c.tally.tn).sum();
    Ok(FairnessReport {
        grouping: grouping.to_string(),
        positive_label: positive,
        reference: reference.to_string(),
        groups,
        eo_epsilon: eo.as_ref().map(|e| e.epsilon),
        eo_ratio: eo.as_ref().map(|e| e.ratio),
        eo_pair: eo.map(|e| e.pair),
        tpr_gap: gap.map(|g| g.gap),
        excluded,
        accuracy: Some(correct as f64 / records.len() as f64),
    })
}

/// Default reference group for a single-attribute grouping.
pub fn default_reference(grouping: &Grouping) -> Option<&'static str> {
    match grouping.attributes() {
        [Attribute::Race] => Some("White"),
        [Attribute::Age] => Some("20-29"),
        _ => None,
    }
}
