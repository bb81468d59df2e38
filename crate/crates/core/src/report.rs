//! Cross-dataset comparison of fairness reports and plot-ready data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audit::AuditReport;
use crate::error::{Error, Result};
use crate::fairness::FairnessReport;

/// A fairness report tagged with the dataset the model was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub dataset: String,
    pub report: FairnessReport,
}

impl DatasetReport {
    pub fn new(dataset: impl Into<String>, report: FairnessReport) -> Self {
        Self {
            dataset: dataset.into(),
            report,
        }
    }
}

/// Which per-class TPR columns feed a gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GapVariant {
    Female,
    Male,
    /// Both gender columns taken together.
    Pooled,
}

/// `max - min` of the selected TPR values over all groups that have them.
pub fn class_tpr_gap(report: &FairnessReport, variant: GapVariant) -> Result<f64> {
    let values: Vec<f64> = report
        .groups
        .iter()
        .flat_map(|g| match variant {
            GapVariant::Female => vec![g.tpr_f],
            GapVariant::Male => vec![g.tpr_m],
            GapVariant::Pooled => vec![g.tpr_f, g.tpr_m],
        })
        .flatten()
        .collect();
    if values.is_empty() {
        return Err(Error::UndefinedRate("report has no TPR values".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

/// Mean of `|di - 1|` over non-reference groups with a defined DI.
pub fn mean_di_distance(report: &FairnessReport) -> Result<f64> {
    let distances: Vec<f64> = report
        .groups
        .iter()
        .filter(|g| g.name != report.reference)
        .filter_map(|g| g.di)
        .map(|d| (d - 1.0).abs())
        .collect();
    if distances.is_empty() {
        return Err(Error::UndefinedRate("no non-reference group has a DI".into()));
    }
    Ok(distances.iter().sum::<f64>() / distances.len() as f64)
}

/// Improvements of a candidate over the best baseline, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadlineStats {
    pub candidate: String,
    /// Female-TPR gap reduction against the baseline with the smallest gap.
    pub max_tpr_gap_reduction_pct: f64,
    pub pooled_tpr_gap_reduction_pct: f64,
    pub di_improvement_pct: f64,
    pub gap_baseline: String,
    pub pooled_gap_baseline: String,
    pub di_baseline: String,
    pub tpr_gap_female: BTreeMap<String, f64>,
    pub tpr_gap_pooled: BTreeMap<String, f64>,
    pub mean_di_distance: BTreeMap<String, f64>,
}

fn check_compatible(reports: &[&DatasetReport]) -> Result<()> {
    let Some(first) = reports.first() else {
        return Err(Error::IncompatibleReports("no reports".into()));
    };
    for r in &reports[1..] {
        if r.report.grouping != first.report.grouping {
            return Err(Error::IncompatibleReports(format!(
                "{} groups by {} but {} groups by {}",
                first.dataset, first.report.grouping, r.dataset, r.report.grouping
            )));
        }
        if r.report.positive_label != first.report.positive_label {
            return Err(Error::IncompatibleReports(format!(
                "{} and {} use different positive labels",
                first.dataset, r.dataset
            )));
        }
    }
    Ok(())
}

/// Picks the baseline minimizing `metric`; ties keep the earlier baseline.
fn best_baseline<'a>(
    baselines: &[&'a DatasetReport],
    metric: impl Fn(&FairnessReport) -> Result<f64>,
) -> Result<(&'a str, f64)> {
    let mut best: Option<(&str, f64)> = None;
    for b in baselines {
        let v = metric(&b.report)?;
        if best.is_none_or(|(_, m)| v < m) {
            best = Some((&b.dataset, v));
        }
    }
    best.ok_or_else(|| Error::IncompatibleReports("no baseline reports".into()))
}

fn reduction_pct(candidate: f64, baseline: f64, what: &str) -> Result<f64> {
    if baseline == 0.0 {
        return Err(Error::UndefinedRate(format!("best baseline {what} is zero")));
    }
    Ok((1.0 - candidate / baseline) * 100.0)
}

pub fn headline_stats(candidate: &DatasetReport, baselines: &[DatasetReport]) -> Result<HeadlineStats> {
    let baselines: Vec<&DatasetReport> = baselines.iter().collect();
    let mut all = vec![candidate];
    all.extend(baselines.iter().copied());
    check_compatible(&all)?;

    let female = |r: &FairnessReport| class_tpr_gap(r, GapVariant::Female);
    let pooled = |r: &FairnessReport| class_tpr_gap(r, GapVariant::Pooled);
    let (gap_baseline, gap_best) = best_baseline(&baselines, female)?;
    let (pooled_baseline, pooled_best) = best_baseline(&baselines, pooled)?;
    let (di_baseline, di_best) = best_baseline(&baselines, mean_di_distance)?;

    let collect = |f: &dyn Fn(&FairnessReport) -> Result<f64>| -> Result<BTreeMap<String, f64>> {
        all.iter().map(|r| Ok((r.dataset.clone(), f(&r.report)?))).collect()
    };

    Ok(HeadlineStats {
        candidate: candidate.dataset.clone(),
        max_tpr_gap_reduction_pct: reduction_pct(female(&candidate.report)?, gap_best, "female TPR gap")?,
        pooled_tpr_gap_reduction_pct: reduction_pct(pooled(&candidate.report)?, pooled_best, "pooled TPR gap")?,
        di_improvement_pct: reduction_pct(mean_di_distance(&candidate.report)?, di_best, "DI distance")?,
        gap_baseline: gap_baseline.to_string(),
        pooled_gap_baseline: pooled_baseline.to_string(),
        di_baseline: di_baseline.to_string(),
        tpr_gap_female: collect(&female)?,
        tpr_gap_pooled: collect(&pooled)?,
        mean_di_distance: collect(&mean_di_distance)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub dataset: String,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "D")]
    pub d: f64,
}

/// Self-contained comparison: every derived number can be recomputed from the
/// embedded reports with [`ComparisonReport::verify`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub datasets: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub audit_rows: Vec<AuditRow>,
    pub reports: Vec<DatasetReport>,
    #[serde(default)]
    pub derived: Option<HeadlineStats>,
}

impl ComparisonReport {
    pub fn build(reports: Vec<DatasetReport>, candidate: Option<&str>) -> Result<Self> {
        let refs: Vec<&DatasetReport> = reports.iter().collect();
        check_compatible(&refs)?;
        check_overlap(&refs)?;
        let derived = match candidate {
            None => None,
            Some(name) => {
                let cand = reports.iter().find(|r| r.dataset == name).ok_or_else(|| {
                    Error::IncompatibleReports(format!("candidate {name:?} is not among the reports"))
                })?;
                let baselines: Vec<DatasetReport> = reports.iter().filter(|r| r.dataset != name).cloned().collect();
                Some(headline_stats(cand, &baselines)?)
            }
        };
        Ok(Self {
            datasets: reports.iter().map(|r| r.dataset.clone()).collect(),
            audit_rows: Vec::new(),
            reports,
            derived,
        })
    }

    pub fn with_audits(mut self, audits: &[(String, AuditReport)]) -> Self {
        self.audit_rows = audits
            .iter()
            .map(|(dataset, a)| AuditRow {
                dataset: dataset.clone(),
                r: a.inclusivity.r,
                d: a.diversity.d,
            })
            .collect();
        self
    }

    /// Recomputes the derived block from the embedded reports.
    pub fn verify(&self) -> Result<()> {
        let Some(derived) = &self.derived else {
            return Ok(());
        };
        let rebuilt = Self::build(self.reports.clone(), Some(&derived.candidate))?;
        if rebuilt.derived.as_ref() != Some(derived) {
            return Err(Error::VerificationFailed(format!(
                "headline statistics for {} do not follow from the reports",
                derived.candidate
            )));
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("comparison serializes")
    }
}

fn check_overlap(reports: &[&DatasetReport]) -> Result<()> {
    let first = reports[0];
    for r in &reports[1..] {
        let shared = r.report.groups.iter().any(|g| first.report.group(&g.name).is_some());
        if !shared {
            return Err(Error::IncompatibleReports(format!(
                "{} and {} have no group in common",
                first.dataset, r.dataset
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Markdown,
    Csv,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "json" => Ok(Format::Json),
            "markdown" | "md" => Ok(Format::Markdown),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format {other:?}")),
        }
    }
}

pub const MISSING: &str = "--";

fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |v| format!("{v:.3}"))
}

struct TableRow {
    group: String,
    metric: &'static str,
    cells: Vec<String>,
}

/// Comparison rows: reference group first, then the remaining groups in
/// order of first appearance; metrics TPR (F), TPR (M), [POR,] DI.
fn table_rows(reports: &[DatasetReport]) -> Vec<TableRow> {
    let reference = &reports[0].report.reference;
    let mut names: Vec<&str> = vec![reference.as_str()];
    for r in reports {
        for g in &r.report.groups {
            if !names.contains(&g.name.as_str()) {
                names.push(&g.name);
            }
        }
    }
    let with_por = reports.iter().any(|r| r.report.groups.iter().any(|g| g.por.is_some()));
    type Getter = fn(&crate::fairness::GroupMetrics) -> Option<f64>;
    let mut metrics: Vec<(&'static str, Getter)> = vec![("TPR (F)", |g| g.tpr_f), ("TPR (M)", |g| g.tpr_m)];
    if with_por {
        metrics.push(("POR", |g| g.por));
    }
    metrics.push(("DI", |g| g.di));

    let mut rows = Vec::new();
    for name in names {
        let label = if name == reference {
            format!("{name} (Ref)")
        } else {
            name.to_string()
        };
        for &(metric, get) in &metrics {
            rows.push(TableRow {
                group: label.clone(),
                metric,
                cells: reports
                    .iter()
                    .map(|r| fmt3(r.report.group(name).and_then(get)))
                    .collect(),
            });
        }
    }
    rows
}

/// Renders a comparison. Output is byte-stable for identical input.
pub fn emit_comparison(reports: &[DatasetReport], candidate: Option<&str>, format: Format) -> Result<String> {
    let comparison = ComparisonReport::build(reports.to_vec(), candidate)?;
    Ok(match format {
        Format::Json => comparison.to_json_string() + "\n",
        Format::Markdown => render_markdown(&comparison),
        Format::Csv => render_csv(&comparison)?,
    })
}

fn render_markdown(c: &ComparisonReport) -> String {
    let mut out = String::new();
    let header = if c.reports[0].report.grouping == "age" {
        "Age Group"
    } else {
        "Group"
    };
    let _ = writeln!(out, "| {header} | Metric | {} |", c.datasets.join(" | "));
    let _ = writeln!(out, "|---|---|{}", "---:|".repeat(c.datasets.len()));
    let mut previous = String::new();
    for row in table_rows(&c.reports) {
        let group = if row.group == previous { "" } else { row.group.as_str() };
        let _ = writeln!(out, "| {group} | {} | {} |", row.metric, row.cells.join(" | "));
        previous = row.group;
    }
    if let Some(d) = &c.derived {
        let _ = writeln!(out);
        let _ = writeln!(out, "Candidate: {}", d.candidate);
        let _ = writeln!(
            out,
            "- TPR gap reduction (female) vs {}: {:.1}%",
            d.gap_baseline, d.max_tpr_gap_reduction_pct
        );
        let _ = writeln!(
            out,
            "- TPR gap reduction (pooled) vs {}: {:.1}%",
            d.pooled_gap_baseline, d.pooled_tpr_gap_reduction_pct
        );
        let _ = writeln!(
            out,
            "- Mean DI distance improvement vs {}: {:.1}%",
            d.di_baseline, d.di_improvement_pct
        );
    }
    out
}

fn render_csv(c: &ComparisonReport) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let mut header = vec!["group".to_string(), "metric".to_string()];
    header.extend(c.datasets.iter().cloned());
    w.write_record(&header).map_err(Error::from_csv)?;
    for row in table_rows(&c.reports) {
        let mut record = vec![row.group, row.metric.to_string()];
        record.extend(row.cells);
        w.write_record(&record).map_err(Error::from_csv)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One long-format observation: `dataset,metric,value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub dataset: String,
    pub metric: String,
    pub value: f64,
}

impl PlotPoint {
    pub fn new(dataset: impl Into<String>, metric: impl Into<String>, value: f64) -> Self {
        Self {
            dataset: dataset.into(),
            metric: metric.into(),
            value,
        }
    }

    /// Inclusivity and Diversity of one audited dataset.
    pub fn from_audit(dataset: &str, audit: &AuditReport) -> [PlotPoint; 2] {
        [
            PlotPoint::new(dataset, "inclusivity", audit.inclusivity.r),
            PlotPoint::new(dataset, "diversity", audit.diversity.d),
        ]
    }
}

/// Sorted long-format CSV; values at full precision.
pub fn emit_plot_data(points: &[PlotPoint]) -> String {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| {
        (a.dataset.as_str(), a.metric.as_str())
            .cmp(&(b.dataset.as_str(), b.metric.as_str()))
            .then(a.value.total_cmp(&b.value))
    });
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(["dataset", "metric", "value"]).expect("in-memory write");
    for p in &sorted {
        w.write_record([p.dataset.as_str(), p.metric.as_str(), &p.value.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn parse_plot_data(text: &str) -> Result<Vec<PlotPoint>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from_csv)).collect()
}
