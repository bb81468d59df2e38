//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run with `cargo test -p faceaudit-core --test acceptance`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use faceaudit::audit::{audit, DiversityConvention};
use faceaudit::balance::{apply_plan, build_plan, QuotaMode, QuotaPolicy};
use faceaudit::fairness::{confusion_by_group, evaluate, FairnessReport, Grouping, PositiveLabel};
use faceaudit::manifest::{cell_counts, manifest_to_string};
use faceaudit::report::{emit_comparison, headline_stats, mean_di_distance, DatasetReport, Format};
use faceaudit::split::{stratified_split, SplitSpec};
use faceaudit::synth::{synthesize_predictions, GroupRates, SynthSpec};
use faceaudit::taxonomy::AgeBin;
use faceaudit::{DemographicTaxonomy, FaceRecord, Manifest};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            name: "race_table_tpr_gap_reduction",
            budget: Duration::from_secs(1),
            run: race_table_tpr_gap_reduction,
        },
        Criterion {
            name: "race_table_di_headline",
            budget: Duration::from_secs(1),
            run: race_table_di_headline,
        },
        Criterion {
            name: "four_fifths_flags",
            budget: Duration::from_secs(1),
            run: four_fifths_flags,
        },
        Criterion {
            name: "audit_oracle_equivalence",
            budget: Duration::from_secs(30),
            run: audit_oracle_equivalence,
        },
        Criterion {
            name: "synth_evaluate_round_trip",
            budget: Duration::from_secs(30),
            run: synth_evaluate_round_trip,
        },
        Criterion {
            name: "balance_determinism_and_effect",
            budget: Duration::from_secs(30),
            run: balance_determinism,
        },
        Criterion {
            name: "stratified_split",
            budget: Duration::from_secs(30),
            run: stratified_split_criterion,
        },
        Criterion {
            name: "golden_comparison_tables",
            budget: Duration::from_secs(1),
            run: golden_tables,
        },
    ];

    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = result.and_then(|()| {
            if elapsed > c.budget {
                Err(format!("took {elapsed:?}, budget {:?}", c.budget))
            } else {
                Ok(())
            }
        });
        match result {
            Ok(()) => println!("PASS {} ({:.3}s)", c.name, elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("FAIL {} ({:.3}s): {why}", c.name, elapsed.as_secs_f64());
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- fixtures

fn fixture(name: &str) -> FairnessReport {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "tests", "fixtures", name].iter().collect();
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    FairnessReport::from_json_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

const DATASETS: [(&str, &str); 3] = [
    ("UTKFace", "utkface"),
    ("FairFace", "fairface"),
    ("BalancedFace", "balancedface"),
];

fn table(prefix: &str) -> Vec<DatasetReport> {
    DATASETS
        .iter()
        .map(|(name, file)| DatasetReport::new(*name, fixture(&format!("{prefix}_{file}.json"))))
        .collect()
}

fn within(actual: f64, expected: f64, tol: f64) -> bool {
    (actual - expected).abs() <= tol
}

fn race_table_tpr_gap_reduction() -> Outcome {
    let reports = table("race");
    let stats = headline_stats(&reports[2], &reports[..2]).map_err(|e| e.to_string())?;
    ensure!(
        within(stats.max_tpr_gap_reduction_pct, 54.4, 0.5),
        "female TPR gap reduction {:.2}% (expected 54.4 +/- 0.5)",
        stats.max_tpr_gap_reduction_pct
    );
    ensure!(
        within(stats.pooled_tpr_gap_reduction_pct, 51.3, 0.5),
        "pooled TPR gap reduction {:.2}% (expected 51.3 +/- 0.5)",
        stats.pooled_tpr_gap_reduction_pct
    );
    ensure!(
        stats.gap_baseline == "FairFace",
        "best gap baseline was {}",
        stats.gap_baseline
    );
    let gap = |d: &str| stats.tpr_gap_female[d];
    ensure!(
        within(gap("FairFace"), 0.195, 1e-12),
        "FairFace gap {}",
        gap("FairFace")
    );
    ensure!(
        within(gap("BalancedFace"), 0.089, 1e-12),
        "BalancedFace gap {}",
        gap("BalancedFace")
    );
    ensure!(stats.max_tpr_gap_reduction_pct > 50.0, "not over 50%");
    ensure!(stats.pooled_tpr_gap_reduction_pct > 50.0, "pooled not over 50%");
    Ok(())
}

fn race_table_di_headline() -> Outcome {
    let reports = table("race");
    let distance = |i: usize| mean_di_distance(&reports[i].report).map_err(|e| e.to_string());
    let ff = distance(1)?;
    let bf = distance(2)?;
    // exact up to the representation of the 3-decimal inputs
    ensure!(within(ff, 0.06125, 1e-15), "FairFace mean |DI-1| = {ff}");
    ensure!(within(bf, 0.02275, 1e-15), "BalancedFace mean |DI-1| = {bf}");
    let stats = headline_stats(&reports[2], &reports[..2]).map_err(|e| e.to_string())?;
    ensure!(
        within(stats.di_improvement_pct, 62.9, 0.5),
        "DI improvement {:.2}% (expected 62.9 +/- 0.5)",
        stats.di_improvement_pct
    );
    ensure!(
        stats.di_baseline == "FairFace",
        "best DI baseline was {}",
        stats.di_baseline
    );
    Ok(())
}

fn four_fifths_flags() -> Outcome {
    let expected: BTreeSet<String> = [
        "race UTKFace Black",
        "age UTKFace 60-69",
        "age FairFace 60-69",
        "age BalancedFace 60-69",
    ]
    .map(String::from)
    .into();
    let mut raised = BTreeSet::new();
    for prefix in ["race", "age"] {
        for r in table(prefix) {
            for g in r.report.groups.iter().filter(|g| g.flagged) {
                raised.insert(format!("{prefix} {} {}", r.dataset, g.name));
            }
        }
    }
    ensure!(raised == expected, "flags raised: {raised:?}");
    Ok(())
}

// ------------------------------------------------------------------- audit

fn small_taxonomy() -> DemographicTaxonomy {
    DemographicTaxonomy::new(
        vec!["Male".into(), "Female".into()],
        vec!["A".into(), "B".into(), "C".into()],
        vec![AgeBin::new("0-29", 0, 29), AgeBin::new("30+", 30, u32::MAX)],
        BTreeMap::new(),
    )
    .expect("valid taxonomy")
}

fn below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    (rng.next_u64() % n as u64) as usize
}

fn record(id: usize, source: &str, cell: &faceaudit::GroupKey) -> FaceRecord {
    FaceRecord {
        id: format!("r{id}"),
        source: source.into(),
        gender: cell.gender.clone(),
        race: cell.race.clone(),
        age_years: None,
        age_bin: cell.age_bin.clone(),
        split: None,
        augmented_from: None,
    }
}

/// Either uniform draws over a random subset of cells, or exactly equal
/// counts over a random subset (to exercise the D = 1 direction).
fn random_manifest(rng: &mut ChaCha8Rng, taxonomy: &DemographicTaxonomy) -> Manifest {
    let lattice = taxonomy.lattice_size();
    let k = 1 + below(rng, lattice);
    let mut cells: Vec<usize> = (0..lattice).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, below(rng, i + 1));
    }
    cells.truncate(k);
    let mut records = Vec::new();
    if rng.next_u32() & 1 == 0 {
        let n = 1 + below(rng, 1000);
        for _ in 0..n {
            let cell = taxonomy.cell_at(cells[below(rng, k)]);
            records.push(record(records.len(), "s", &cell));
        }
    } else {
        let per = 1 + below(rng, (1000 / k).max(1));
        for &c in &cells {
            let cell = taxonomy.cell_at(c);
            for _ in 0..per {
                records.push(record(records.len(), "s", &cell));
            }
        }
    }
    Manifest::new("random", taxonomy.clone(), records).expect("valid manifest")
}

fn audit_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_501);
    let taxonomies = [DemographicTaxonomy::table1(), small_taxonomy()];
    for trial in 0..500 {
        let taxonomy = &taxonomies[trial % 2];
        let m = random_manifest(&mut rng, taxonomy);
        let report = audit(&m, DiversityConvention::Observed).map_err(|e| e.to_string())?;

        let mut counts: HashMap<(&str, &str, &str), usize> = HashMap::new();
        let mut seen: [BTreeSet<&str>; 3] = Default::default();
        for r in m.records() {
            *counts.entry((&r.gender, &r.race, &r.age_bin)).or_default() += 1;
            seen[0].insert(&r.gender);
            seen[1].insert(&r.race);
            seen[2].insert(&r.age_bin);
        }
        let n = m.len() as f64;
        let expected_sizes = [
            taxonomy.genders().len(),
            taxonomy.races().len(),
            taxonomy.age_bins().len(),
        ];
        let r_brute = seen
            .iter()
            .zip(expected_sizes)
            .map(|(s, e)| s.len() as f64 / e as f64)
            .sum::<f64>()
            / 3.0;
        let max = *counts.values().max().unwrap() as f64;
        let min = *counts.values().min().unwrap() as f64;
        let d_brute = min / max;

        ensure!(
            within(report.inclusivity.r, r_brute, 1e-12),
            "trial {trial}: R {} vs {r_brute}",
            report.inclusivity.r
        );
        ensure!(
            within(report.diversity.d, d_brute, 1e-12),
            "trial {trial}: D {} vs {d_brute}",
            report.diversity.d
        );
        ensure!(
            report.grs.len() == counts.len(),
            "trial {trial}: {} GRS cells vs {}",
            report.grs.len(),
            counts.len()
        );
        for share in &report.grs {
            let c = counts[&(
                share.cell.gender.as_str(),
                share.cell.race.as_str(),
                share.cell.age_bin.as_str(),
            )];
            ensure!(share.count == c, "trial {trial}: count mismatch at {}", share.cell);
            ensure!(
                within(share.share, c as f64 / n, 1e-12),
                "trial {trial}: GRS mismatch at {}",
                share.cell
            );
        }

        let none_missing = seen.iter().zip(expected_sizes).all(|(s, e)| s.len() == e);
        ensure!(
            (report.inclusivity.r == 1.0) == none_missing,
            "trial {trial}: R = 1 iff no missing subgroup"
        );
        let all_equal = counts.values().all(|&c| c as f64 == max);
        ensure!(
            (report.diversity.d == 1.0) == all_equal,
            "trial {trial}: D = 1 iff equal observed cells"
        );
    }
    Ok(())
}

// ------------------------------------------------------------------- synth

fn synth_evaluate_round_trip() -> Outcome {
    let taxonomy = DemographicTaxonomy::table1();
    let grouping: Grouping = "gender+race+age".parse().map_err(|e: faceaudit::Error| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut checked_di = 0;
    for trial in 0..100 {
        let k = 2 + below(&mut rng, 8);
        let mut cells: Vec<usize> = (0..taxonomy.lattice_size()).collect();
        for i in (1..cells.len()).rev() {
            cells.swap(i, below(&mut rng, i + 1));
        }
        let groups: Vec<GroupRates> = cells[..k]
            .iter()
            .map(|&c| {
                let cell = taxonomy.cell_at(c);
                GroupRates {
                    gender: cell.gender,
                    race: cell.race,
                    age_bin: cell.age_bin,
                    count_pos: 1 + below(&mut rng, 200),
                    count_neg: 1 + below(&mut rng, 200),
                    tpr: below(&mut rng, 1001) as f64 / 1000.0,
                    fpr: below(&mut rng, 1001) as f64 / 1000.0,
                }
            })
            .collect();
        let spec = SynthSpec { groups };
        let log = synthesize_predictions(&spec, &taxonomy, trial).map_err(|e| e.to_string())?;
        let table = confusion_by_group(&log, &grouping, &taxonomy, PositiveLabel::Female).map_err(|e| e.to_string())?;

        // brute force straight from the rows
        let mut brute: BTreeMap<String, [usize; 4]> = BTreeMap::new();
        for r in &log {
            let name = grouping.group_name(r);
            let slot = match (r.y_true, r.y_pred) {
                (1, 1) => 0,
                (1, 0) => 1,
                (0, 1) => 2,
                _ => 3,
            };
            brute.entry(name).or_default()[slot] += 1;
        }

        for g in &spec.groups {
            let name = format!("{}+{}+{}", g.gender, g.race, g.age_bin);
            let (tp, fn_, fp, tn) = g.realized();
            let conf = table
                .iter()
                .find(|c| c.group == name)
                .ok_or(format!("trial {trial}: {name} missing"))?;
            ensure!(
                (conf.tally.tp, conf.tally.fn_, conf.tally.fp, conf.tally.tn) == (tp, fn_, fp, tn),
                "trial {trial}: {name} tally {:?}",
                conf.tally
            );
            let tpr = tp as f64 / (tp + fn_) as f64;
            let fpr = fp as f64 / (fp + tn) as f64;
            let por = (tp + fp) as f64 / (tp + fn_ + fp + tn) as f64;
            ensure!(conf.tpr().unwrap() == tpr, "trial {trial}: {name} TPR");
            ensure!(conf.fpr().unwrap() == fpr, "trial {trial}: {name} FPR");
            ensure!(conf.por().unwrap() == por, "trial {trial}: {name} POR");
        }

        let por = |t: &[usize; 4]| (t[0] + t[2]) as f64 / t.iter().sum::<usize>() as f64;
        let acc = |t: &[usize; 4]| (t[0] + t[3]) as f64 / t.iter().sum::<usize>() as f64;
        let reference = table[0].group.clone();
        let ref_por = por(&brute[&reference]);
        let report = evaluate(&log, &taxonomy, &grouping, &reference, PositiveLabel::Female);
        if ref_por == 0.0 {
            ensure!(report.is_err(), "trial {trial}: degenerate reference accepted");
            continue;
        }
        let report = report.map_err(|e| e.to_string())?;
        for g in &report.groups {
            let expected = if g.name == reference {
                1.0
            } else {
                por(&brute[&g.name]) / ref_por
            };
            ensure!(
                within(g.di.unwrap(), expected, 1e-12),
                "trial {trial}: DI of {}",
                g.name
            );
            checked_di += 1;
        }
        let accs: Vec<f64> = brute.values().map(acc).filter(|&a| a > 0.0).collect();
        let mut eps = 0.0f64;
        for a in &accs {
            for b in &accs {
                eps = eps.max((a / b).ln().abs());
            }
        }
        let got = report.eo_epsilon.unwrap_or(0.0);
        ensure!(within(got, eps, 1e-12), "trial {trial}: epsilon {got} vs {eps}");
    }
    ensure!(checked_di > 100, "only {checked_di} DI values checked");
    Ok(())
}

// ----------------------------------------------------------------- balance

fn balance_determinism() -> Outcome {
    let taxonomy = small_taxonomy();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..50u64 {
        let factor = 1 + below(&mut rng, 4);
        let target = 5 + below(&mut rng, 40);
        let lower = target.div_ceil(factor);
        let mut sources: Vec<Vec<FaceRecord>> = vec![Vec::new(); 2 + below(&mut rng, 2)];
        let mut next = 0;
        for c in 0..taxonomy.lattice_size() {
            if below(&mut rng, 4) == 0 {
                continue;
            }
            let cell = taxonomy.cell_at(c);
            let n = lower + below(&mut rng, 2 * target);
            for _ in 0..n {
                let s = below(&mut rng, sources.len());
                sources[s].push(record(next, &format!("src{s}"), &cell));
                next += 1;
            }
        }
        if next == 0 {
            continue;
        }
        let sources: Vec<Manifest> = sources
            .into_iter()
            .enumerate()
            .map(|(i, r)| Manifest::new(format!("src{i}"), taxonomy.clone(), r).unwrap())
            .collect();
        let policy = QuotaPolicy::new(QuotaMode::Fixed { target }, factor, true).map_err(|e| e.to_string())?;
        let plan = build_plan(&sources, policy, trial).map_err(|e| e.to_string())?;
        let out = apply_plan(&plan, &sources).map_err(|e| e.to_string())?;
        let again = apply_plan(&build_plan(&sources, policy, trial).unwrap(), &sources).unwrap();
        ensure!(
            manifest_to_string(&out, true) == manifest_to_string(&again, true),
            "trial {trial}: re-run not byte-identical"
        );
        let d = audit(&out, DiversityConvention::Observed)
            .map_err(|e| e.to_string())?
            .diversity
            .d;
        ensure!(d == 1.0, "trial {trial}: D = {d}");
        let counts = cell_counts(&out);
        ensure!(
            counts.nonzero().all(|(_, c)| c == target),
            "trial {trial}: a cell missed the target"
        );

        // multipliers per real record, zeros included for dropped records
        let mut uses: HashMap<String, usize> = HashMap::new();
        for r in out.records() {
            let real = r.augmented_from.clone().unwrap_or_else(|| r.id.clone());
            *uses.entry(real).or_default() += 1;
        }
        let merged = faceaudit::manifest::merge_manifests(&sources).unwrap();
        let mut per_cell: HashMap<faceaudit::GroupKey, Vec<usize>> = HashMap::new();
        for r in merged.records() {
            per_cell
                .entry(r.key())
                .or_default()
                .push(uses.get(&r.id).copied().unwrap_or(0));
        }
        for (cell, m) in per_cell {
            let spread = m.iter().max().unwrap() - m.iter().min().unwrap();
            ensure!(spread <= 1, "trial {trial}: multipliers in {cell} spread {spread}");
        }
    }
    Ok(())
}

// ------------------------------------------------------------------- split

fn stratified_split_criterion() -> Outcome {
    let taxonomy = small_taxonomy();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let spec = SplitSpec::default();
    for trial in 0..200 {
        let m = random_manifest(&mut rng, &taxonomy);
        let out = stratified_split(&m, &SplitSpec { seed: trial, ..spec }).map_err(|e| e.to_string())?;
        let mut ids: Vec<&str> = [&out.train, &out.val, &out.test]
            .iter()
            .flat_map(|p| p.records().iter().map(|r| r.id.as_str()))
            .collect();
        ids.sort_unstable();
        let mut input: Vec<&str> = m.records().iter().map(|r| r.id.as_str()).collect();
        input.sort_unstable();
        ensure!(ids == input, "trial {trial}: outputs do not partition the input");
        let whole = cell_counts(&m);
        let parts = [cell_counts(&out.train), cell_counts(&out.val), cell_counts(&out.test)];
        for (cell, &n) in whole.dense().iter().enumerate() {
            for (part, f) in parts.iter().zip(spec.fractions()) {
                let dev = (part.dense()[cell] as f64 - f * n as f64).abs();
                ensure!(dev < 1.0, "trial {trial}: cell {cell} deviates by {dev}");
            }
        }
    }
    let cell = taxonomy.cell_at(0);
    let twenty = Manifest::new(
        "twenty",
        taxonomy.clone(),
        (0..20).map(|i| record(i, "s", &cell)).collect(),
    )
    .unwrap();
    let out = stratified_split(&twenty, &spec).map_err(|e| e.to_string())?;
    let sizes = (out.train.len(), out.val.len(), out.test.len());
    ensure!(sizes == (14, 3, 3), "cell of 20 split {sizes:?}");
    Ok(())
}

// ----------------------------------------------------------------- goldens

const RACE_TABLE: &str = "\
group,metric,UTKFace,FairFace,BalancedFace
White (Ref),TPR (F),0.830,0.792,0.785
White (Ref),TPR (M),0.801,0.747,0.760
White (Ref),DI,1.000,1.000,1.000
Black,TPR (F),0.550,0.650,0.721
Black,TPR (M),0.925,0.758,0.735
Black,DI,0.751,0.887,0.952
East Asian,TPR (F),0.882,0.845,0.810
East Asian,TPR (M),0.701,0.682,0.741
East Asian,DI,1.045,1.066,1.020
Indian,TPR (F),0.760,0.755,0.773
Indian,TPR (M),0.890,0.761,0.780
Indian,DI,0.965,0.953,0.985
Southeast Asian,TPR (F),0.865,0.807,0.790
Southeast Asian,TPR (M),0.650,0.703,0.715
Southeast Asian,DI,1.031,1.019,1.008
";

const AGE_TABLE: &str = "\
group,metric,UTKFace,FairFace,BalancedFace
20-29 (Ref),TPR (F),0.891,0.838,0.819
20-29 (Ref),TPR (M),0.845,0.689,0.730
20-29 (Ref),DI,1.000,1.000,1.000
0-2,TPR (F),--,--,0.684
0-2,TPR (M),--,--,0.683
0-2,DI,--,--,0.835
3-9,TPR (F),0.850,0.833,0.802
3-9,TPR (M),0.650,0.524,0.548
3-9,DI,0.955,0.993,0.979
40-49,TPR (F),0.795,0.724,0.721
40-49,TPR (M),0.910,0.835,0.829
40-49,DI,0.882,0.864,0.880
60-69,TPR (F),0.680,0.579,0.632
60-69,TPR (M),0.935,0.884,0.855
60-69,DI,0.735,0.691,0.772
70+,TPR (F),--,--,0.724
70+,TPR (M),--,--,0.800
70+,DI,--,--,0.884
";

fn golden_tables() -> Outcome {
    for (prefix, expected) in [("race", RACE_TABLE), ("age", AGE_TABLE)] {
        let got = emit_comparison(&table(prefix), None, Format::Csv).map_err(|e| e.to_string())?;
        if got != expected {
            let diff: Vec<String> = got
                .lines()
                .zip(expected.lines())
                .filter(|(a, b)| a != b)
                .map(|(a, b)| format!("got {a:?} want {b:?}"))
                .collect();
            return Err(format!("{prefix}: {}", diff.join("; ")));
        }
        let md = emit_comparison(&table(prefix), Some("BalancedFace"), Format::Markdown).map_err(|e| e.to_string())?;
        ensure!(
            md.lines().filter(|l| l.starts_with('|')).count() == expected.lines().count() + 1,
            "{prefix}: markdown row count"
        );
    }
    Ok(())
}
