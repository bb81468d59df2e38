use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use faceaudit::audit::{audit, AuditReport, DiversityConvention};
use faceaudit::balance::{apply_plan, build_plan, BalancePlan, QuotaMode, QuotaPolicy};
use faceaudit::fairness::{
    default_reference, evaluate, parse_predictions, write_predictions, FairnessReport, Grouping, PositiveLabel,
    DEFAULT_THRESHOLD,
};
use faceaudit::manifest::{merge_manifests, parse_manifest, write_manifest};
use faceaudit::report::{emit_comparison, emit_plot_data, ComparisonReport, DatasetReport, Format, PlotPoint};
use faceaudit::split::{stratified_split, SplitSpec};
use faceaudit::synth::{synthesize_predictions, SynthSpec};
use faceaudit::{DemographicTaxonomy, Manifest, ParseMode, Warning};

const DEFAULT_SEED: u64 = 42;

/// Dataset audit, rebalancing and group-fairness evaluation over face metadata manifests.
#[derive(Debug, Parser)]
#[command(name = "faceaudit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Inclusivity, Diversity and per-cell representation of one or more manifests
    Audit(AuditArgs),
    /// Build a rebalancing plan over the merged sources
    Balance(BalanceArgs),
    /// Realize a rebalancing plan into a balanced manifest
    Apply(ApplyArgs),
    /// Stratified train/validation/test split
    Split(SplitArgs),
    /// Group fairness metrics from a prediction log
    Evaluate(EvaluateArgs),
    /// Side-by-side comparison of fairness reports
    Compare(CompareArgs),
    /// Synthetic prediction log with exact per-group rates
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct TaxonomyArg {
    /// Preset name (table1, eval) or path to a taxonomy JSON file
    #[arg(long, default_value = "table1")]
    taxonomy: String,
}

#[derive(Debug, Args)]
struct AuditArgs {
    /// Manifest CSV; several are merged before auditing
    #[arg(long, required = true, num_args = 1..)]
    manifest: Vec<PathBuf>,
    #[command(flatten)]
    taxonomy: TaxonomyArg,
    /// Map unknown gender/race labels to the taxonomy fallback instead of failing
    #[arg(long)]
    lenient: bool,
    /// Cells entering the Diversity min/max: observed or all-cells
    #[arg(long, default_value = "observed")]
    diversity_over: DiversityConvention,
    /// Audit report JSON (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Long-format dataset,metric,value CSV of R and D per manifest
    #[arg(long)]
    plot_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BalanceArgs {
    /// Source manifest CSVs, merged in the order given
    #[arg(long, required = true, num_args = 1..)]
    sources: Vec<PathBuf>,
    #[command(flatten)]
    taxonomy: TaxonomyArg,
    /// median, min, max-fillable, or a fixed per-cell count
    #[arg(long, default_value = "median")]
    quota: String,
    /// Maximum times a real record may appear, counting the original
    #[arg(long, default_value_t = 3)]
    max_augment: usize,
    /// Seed for the per-cell shuffles, recorded in the plan
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Keep every record of cells above the quota
    #[arg(long)]
    no_undersample: bool,
    /// Map unknown gender/race labels to the taxonomy fallback instead of failing
    #[arg(long)]
    lenient: bool,
    /// Plan JSON to write
    #[arg(long)]
    plan_out: PathBuf,
}

#[derive(Debug, Args)]
struct ApplyArgs {
    /// Plan JSON written by balance
    #[arg(long)]
    plan: PathBuf,
    /// The same sources, in the same order, the plan was built from
    #[arg(long, required = true, num_args = 1..)]
    sources: Vec<PathBuf>,
    /// Map unknown gender/race labels to the taxonomy fallback instead of failing
    #[arg(long)]
    lenient: bool,
    /// Balanced manifest CSV; the seed is recorded in <out>.meta.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Manifest CSV to split
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    taxonomy: TaxonomyArg,
    /// Training fraction
    #[arg(long, default_value_t = 0.70)]
    train: f64,
    /// Validation fraction
    #[arg(long, default_value_t = 0.15)]
    val: f64,
    /// Test fraction
    #[arg(long, default_value_t = 0.15)]
    test: f64,
    /// Seed for the per-cell shuffles
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Map unknown gender/race labels to the taxonomy fallback instead of failing
    #[arg(long)]
    lenient: bool,
    /// Writes <prefix>train.csv, <prefix>val.csv, <prefix>test.csv and <prefix>split.meta.json
    #[arg(long, default_value = "")]
    out_prefix: String,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Prediction log CSV (id,gender,race,age_bin,y_true,y_pred,score)
    #[arg(long)]
    predictions: PathBuf,
    #[command(flatten)]
    taxonomy: TaxonomyArg,
    /// Grouping attributes joined by '+', e.g. race, age, race+gender
    #[arg(long, default_value = "race")]
    group: String,
    /// Reference group; defaults to White for race and 20-29 for age
    #[arg(long)]
    reference: Option<String>,
    /// Class treated as the positive outcome: female or male
    #[arg(long, default_value_t = PositiveLabel::Female)]
    positive: PositiveLabel,
    /// Score threshold used to cross-check y_pred
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Fairness report JSON (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Fairness report JSON files, one column each
    #[arg(long, required = true, num_args = 1..)]
    reports: Vec<PathBuf>,
    /// Dataset names, one per report; file stems by default
    #[arg(long, num_args = 1..)]
    names: Vec<String>,
    /// Report (path or dataset name) whose improvement over the others is derived
    #[arg(long)]
    candidate: Option<String>,
    /// Audit reports, one per fairness report, for the R/D rows
    #[arg(long, num_args = 1..)]
    audits: Vec<PathBuf>,
    /// json, markdown or csv
    #[arg(long, default_value = "markdown")]
    format: Format,
    /// Output file (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Long-format dataset,metric,value CSV of accuracy and audit scores
    #[arg(long)]
    plot_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Group-rate spec JSON
    #[arg(long)]
    spec: PathBuf,
    #[command(flatten)]
    taxonomy: TaxonomyArg,
    /// Seed for the row shuffle
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Prediction log CSV; the seed is recorded in <out>.meta.json
    #[arg(long)]
    out: PathBuf,
}

/// Failures split by exit code: bad input data (1) or bad invocation (2).
enum Failure {
    Data(String),
    Usage(String),
}

impl From<faceaudit::Error> for Failure {
    fn from(e: faceaudit::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type Run = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Audit(a) => run_audit(a),
        Command::Balance(a) => run_balance(a),
        Command::Apply(a) => run_apply(a),
        Command::Split(a) => run_split(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Compare(a) => run_compare(a),
        Command::Synth(a) => run_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn warn(warnings: &[Warning]) {
    for w in warnings {
        eprintln!("{w}");
    }
}

fn in_file<T>(path: &Path, r: faceaudit::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Run {
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Run {
    match out {
        Some(path) => write_text(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn load_taxonomy(arg: &TaxonomyArg) -> Result<DemographicTaxonomy, Failure> {
    let path = Path::new(&arg.taxonomy);
    if path.is_file() {
        in_file(path, DemographicTaxonomy::from_reader(open(path)?))
    } else {
        Ok(DemographicTaxonomy::preset(&arg.taxonomy)?)
    }
}

fn load_manifest(path: &Path, taxonomy: &DemographicTaxonomy, lenient: bool) -> Result<Manifest, Failure> {
    let mode = if lenient { ParseMode::Lenient } else { ParseMode::Strict };
    let parsed = in_file(path, parse_manifest(open(path)?, stem(path), taxonomy, mode))?;
    warn(&parsed.warnings);
    Ok(parsed.manifest)
}

fn load_manifests(paths: &[PathBuf], taxonomy: &DemographicTaxonomy, lenient: bool) -> Result<Vec<Manifest>, Failure> {
    paths.iter().map(|p| load_manifest(p, taxonomy, lenient)).collect()
}

/// Sidecar recording the seed and inputs behind a CSV artifact.
fn write_meta(path: &Path, meta: serde_json::Value) -> Run {
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n";
    write_text(path, &text)
}

fn meta_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

fn run_audit(args: AuditArgs) -> Run {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let manifests = load_manifests(&args.manifest, &taxonomy, args.lenient)?;
    let mut audits: Vec<(String, AuditReport)> = Vec::new();
    for m in &manifests {
        audits.push((m.name().to_string(), audit(m, args.diversity_over)?));
    }
    let main = if manifests.len() == 1 {
        audits[0].1.clone()
    } else {
        let merged = merge_manifests(&manifests)?;
        let report = audit(&merged, args.diversity_over)?;
        audits.push((merged.name().to_string(), report.clone()));
        report
    };
    emit(args.out.as_deref(), &(main.to_json_string() + "\n"))?;
    if let Some(plot) = &args.plot_out {
        let points: Vec<PlotPoint> = audits
            .iter()
            .flat_map(|(name, a)| PlotPoint::from_audit(name, a))
            .collect();
        write_text(plot, &emit_plot_data(&points))?;
    }
    Ok(())
}

fn parse_quota(quota: &str) -> Result<QuotaMode, Failure> {
    match quota {
        "median" => Ok(QuotaMode::Median),
        "min" => Ok(QuotaMode::MinNonzero),
        "max-fillable" => Ok(QuotaMode::MaxFillable),
        n => n.parse().map(|target| QuotaMode::Fixed { target }).map_err(|_| {
            Failure::Usage(format!(
                "--quota expects median, min, max-fillable or a count, got {n:?}"
            ))
        }),
    }
}

fn run_balance(args: BalanceArgs) -> Run {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let sources = load_manifests(&args.sources, &taxonomy, args.lenient)?;
    let policy = QuotaPolicy::new(parse_quota(&args.quota)?, args.max_augment, !args.no_undersample)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let plan = build_plan(&sources, policy, args.seed)?;
    warn(&plan.warnings());
    write_text(&args.plan_out, &(plan.to_json_string() + "\n"))
}

fn run_apply(args: ApplyArgs) -> Run {
    let plan = in_file(&args.plan, BalancePlan::from_json_str(&read_text(&args.plan)?))?;
    let sources = load_manifests(&args.sources, &plan.taxonomy, args.lenient)?;
    let balanced = apply_plan(&plan, &sources)?;
    let mut w = create(&args.out)?;
    write_manifest(&mut w, &balanced, true)?;
    w.flush().map_err(faceaudit::Error::from)?;
    write_meta(
        &meta_path(&args.out),
        serde_json::json!({
            "seed": plan.seed,
            "records": balanced.len(),
            "checksum": balanced.checksum(),
            "plan": args.plan.display().to_string(),
        }),
    )
}

fn run_split(args: SplitArgs) -> Run {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let manifest = load_manifest(&args.manifest, &taxonomy, args.lenient)?;
    let spec = SplitSpec::new(args.train, args.val, args.test, args.seed).map_err(|e| Failure::Usage(e.to_string()))?;
    let out = stratified_split(&manifest, &spec)?;
    warn(&out.warnings);
    for (part, m) in [("train", &out.train), ("val", &out.val), ("test", &out.test)] {
        let path = PathBuf::from(format!("{}{part}.csv", args.out_prefix));
        let mut w = create(&path)?;
        write_manifest(&mut w, m, false)?;
        w.flush().map_err(faceaudit::Error::from)?;
    }
    write_meta(
        Path::new(&format!("{}split.meta.json", args.out_prefix)),
        serde_json::json!({
            "seed": spec.seed,
            "fractions": {"train": spec.train, "val": spec.val, "test": spec.test},
            "records": {"train": out.train.len(), "val": out.val.len(), "test": out.test.len()},
        }),
    )
}

fn run_evaluate(args: EvaluateArgs) -> Run {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let grouping: Grouping = args
        .group
        .parse()
        .map_err(|e: faceaudit::Error| Failure::Usage(e.to_string()))?;
    let reference = match args.reference.as_deref().or_else(|| default_reference(&grouping)) {
        Some(r) => r.to_string(),
        None => {
            return Err(Failure::Usage(format!(
                "--reference is required for grouping {grouping}"
            )))
        }
    };
    let parsed = in_file(
        &args.predictions,
        parse_predictions(open(&args.predictions)?, &taxonomy, args.threshold),
    )?;
    warn(&parsed.warnings);
    let report = evaluate(&parsed.records, &taxonomy, &grouping, &reference, args.positive)?;
    emit(args.out.as_deref(), &(report.to_json_string() + "\n"))
}

fn run_compare(args: CompareArgs) -> Run {
    if !args.names.is_empty() && args.names.len() != args.reports.len() {
        return Err(Failure::Usage("--names needs one name per report".into()));
    }
    if !args.audits.is_empty() && args.audits.len() != args.reports.len() {
        return Err(Failure::Usage("--audits needs one audit per report".into()));
    }
    let names: Vec<String> = if args.names.is_empty() {
        args.reports.iter().map(|p| stem(p)).collect()
    } else {
        args.names.clone()
    };
    let mut reports = Vec::new();
    for (path, name) in args.reports.iter().zip(&names) {
        let report = in_file(path, FairnessReport::from_json_str(&read_text(path)?))?;
        reports.push(DatasetReport::new(name.clone(), report));
    }
    let candidate = match &args.candidate {
        None => None,
        Some(c) => {
            let by_path = args.reports.iter().position(|p| p == Path::new(c));
            let index = by_path.or_else(|| names.iter().position(|n| n == c));
            match index {
                Some(i) => Some(names[i].clone()),
                None => return Err(Failure::Usage(format!("--candidate {c:?} is not one of the reports"))),
            }
        }
    };
    let mut audits = Vec::new();
    for (path, name) in args.audits.iter().zip(&names) {
        let a = in_file(path, AuditReport::from_json_str(&read_text(path)?))?;
        audits.push((name.clone(), a));
    }

    let text = if args.format == Format::Json {
        let comparison = ComparisonReport::build(reports.clone(), candidate.as_deref())?.with_audits(&audits);
        comparison.verify()?;
        comparison.to_json_string() + "\n"
    } else {
        emit_comparison(&reports, candidate.as_deref(), args.format)?
    };
    emit(args.out.as_deref(), &text)?;

    if let Some(plot) = &args.plot_out {
        let mut points: Vec<PlotPoint> = reports
            .iter()
            .filter_map(|r| r.report.accuracy.map(|a| PlotPoint::new(&r.dataset, "accuracy", a)))
            .collect();
        points.extend(audits.iter().flat_map(|(name, a)| PlotPoint::from_audit(name, a)));
        write_text(plot, &emit_plot_data(&points))?;
    }
    Ok(())
}

fn run_synth(args: SynthArgs) -> Run {
    let taxonomy = load_taxonomy(&args.taxonomy)?;
    let spec = in_file(&args.spec, SynthSpec::from_json_str(&read_text(&args.spec)?))?;
    let log = in_file(&args.spec, synthesize_predictions(&spec, &taxonomy, args.seed))?;
    let mut w = create(&args.out)?;
    write_predictions(&mut w, &log)?;
    w.flush().map_err(faceaudit::Error::from)?;
    write_meta(
        &meta_path(&args.out),
        serde_json::json!({
            "seed": args.seed,
            "records": log.len(),
            "spec": args.spec.display().to_string(),
        }),
    )
}
