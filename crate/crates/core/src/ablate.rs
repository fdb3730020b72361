//! Ablation suites: fixed grids of model variants trained over several
//! seeds, summarized as mean±std tables and appended to the results ledger.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use crate::imi::ImiMode;
use crate::metrics::{append_ledger, ledger_row, EvalReport};
use crate::model::{BaselineMode, ModelConfig};
use crate::mutual::AttentionMode;
use crate::train::{train, TrainConfig};
use crate::{Error, Result};

/// The two fixed ablation grids.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Suite {
    /// Attention mode × decoder depth: {shared, independent, generic_lav}
    /// × N_dec ∈ {1..4}, twelve configurations.
    Table1,
    /// Component build-up: generic_lav, the plain mutual-attention model,
    /// +injection, +star-injection, and the full model with reconstruction.
    Table2,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Suite> {
        match s {
            "table1" => Ok(Suite::Table1),
            "table2" => Ok(Suite::Table2),
            _ => Err(Error::Config(format!("unknown suite '{s}' (expected table1 or table2)"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Suite::Table1 => "table1",
            Suite::Table2 => "table2",
        }
    }
}

/// The ordered (name, model) rows of a suite, derived from a base config.
/// Component toggles are applied on top of the base; every row of a suite
/// shares all remaining settings so the comparison isolates one factor.
pub fn suite_rows(suite: Suite, base: &ModelConfig) -> Vec<(String, ModelConfig)> {
    let mut rows = Vec::new();
    match suite {
        Suite::Table1 => {
            // Depth grid with injection and reconstruction off in every
            // row: generic_lav admits neither, and the factor under study
            // is the attention structure itself.
            for (mode, attention, baseline) in [
                ("shared", AttentionMode::Shared, BaselineMode::M3Att),
                ("independent", AttentionMode::Independent, BaselineMode::M3Att),
                ("generic_lav", AttentionMode::Shared, BaselineMode::GenericLav),
            ] {
                for n_dec in 1..=4 {
                    let cfg = ModelConfig {
                        attention,
                        baseline,
                        imi: ImiMode::Off,
                        lfr: false,
                        n_dec,
                        ..base.clone()
                    };
                    rows.push((format!("{mode}_n{n_dec}"), cfg));
                }
            }
        }
        Suite::Table2 => {
            let plain = ModelConfig {
                baseline: BaselineMode::M3Att,
                attention: AttentionMode::Shared,
                imi: ImiMode::Off,
                lfr: false,
                ..base.clone()
            };
            rows.push((
                "generic_lav".into(),
                ModelConfig { baseline: BaselineMode::GenericLav, ..plain.clone() },
            ));
            rows.push(("m3att".into(), plain.clone()));
            rows.push(("m3att+imi".into(), ModelConfig { imi: ImiMode::Full, ..plain.clone() }));
            rows.push(("m3att+imi_star".into(), ModelConfig { imi: ImiMode::Star, ..plain.clone() }));
            rows.push((
                "full".into(),
                ModelConfig { imi: ImiMode::Full, lfr: true, ..plain },
            ));
        }
    }
    rows
}

/// Outcome of one trained configuration at one seed.
pub struct RunResult {
    pub name: String,
    pub seed: u64,
    pub report: EvalReport,
    pub wall_seconds: f64,
}

pub struct SuiteOutcome {
    /// Row-major over (config, seed), in suite order.
    pub results: Vec<RunResult>,
    /// The rendered mean±std table (also written to `summary.txt`).
    pub summary: String,
    pub ledger_file: PathBuf,
    pub summary_file: PathBuf,
}

/// Per-row aggregate used by the summary table.
pub struct RowStats {
    pub name: String,
    pub mean_iou: f64,
    pub std_iou: f64,
    pub mean_pr05: f64,
}

/// Mean and population standard deviation of the per-seed IoU, plus mean
/// Pr@0.5, grouped by row name in first-appearance order.
pub fn row_stats(results: &[RunResult]) -> Vec<RowStats> {
    let mut order: Vec<&str> = Vec::new();
    for r in results {
        if !order.contains(&r.name.as_str()) {
            order.push(&r.name);
        }
    }
    order
        .iter()
        .map(|name| {
            let ious: Vec<f64> = results
                .iter()
                .filter(|r| r.name == *name)
                .map(|r| r.report.mean_iou)
                .collect();
            let prs: Vec<f64> = results
                .iter()
                .filter(|r| r.name == *name)
                .map(|r| r.report.precisions[0].1)
                .collect();
            let n = ious.len() as f64;
            let mean = ious.iter().sum::<f64>() / n;
            let var = ious.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            RowStats {
                name: name.to_string(),
                mean_iou: mean,
                std_iou: var.sqrt(),
                mean_pr05: prs.iter().sum::<f64>() / n,
            }
        })
        .collect()
}

fn render_summary(suite: Suite, seeds: u64, results: &[RunResult]) -> String {
    let mut out = String::new();
    writeln!(out, "# suite={} seeds={seeds}", suite.name()).unwrap();
    writeln!(out, "config\tmean_iou\tstd_iou\tpr@0.5").unwrap();
    for row in row_stats(results) {
        writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}",
            row.name, row.mean_iou, row.std_iou, row.mean_pr05
        )
        .unwrap();
    }
    out
}

/// Trains every suite row over seeds 1..=`seeds` and writes the ledger and
/// summary into the template's output directory. The template supplies the
/// base model plus all training settings; each run replaces the model
/// variant, both seeds, and the per-run output directory
/// (`<out>/<name>_s<seed>`). At most `threads` runs execute concurrently;
/// artifacts are written in suite order regardless.
pub fn run_suite(
    suite: Suite,
    template: &TrainConfig,
    seeds: u64,
    threads: usize,
    progress: &mut dyn FnMut(&str),
) -> Result<SuiteOutcome> {
    if seeds == 0 {
        return Err(Error::Config("seeds must be at least 1".into()));
    }
    let threads = threads.max(1);
    let out_root = template.out_dir.clone();
    fs::create_dir_all(&out_root).map_err(|e| Error::io(&out_root, e))?;

    let mut jobs: Vec<(String, TrainConfig)> = Vec::new();
    for (name, model) in suite_rows(suite, &template.model) {
        for seed in 1..=seeds {
            let mut cfg = template.clone();
            cfg.model = ModelConfig { seed, ..model.clone() };
            cfg.train_seed = seed;
            cfg.out_dir = out_root.join(format!("{name}_s{seed}"));
            jobs.push((name.clone(), cfg));
        }
    }

    let mut results: Vec<RunResult> = Vec::new();
    for chunk in jobs.chunks(threads) {
        let batch: Vec<Result<RunResult>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|(name, cfg)| {
                    scope.spawn(move || {
                        let start = Instant::now();
                        let outcome = train(cfg, &mut |_| {})?;
                        Ok(RunResult {
                            name: name.clone(),
                            seed: cfg.train_seed,
                            report: outcome.report,
                            wall_seconds: start.elapsed().as_secs_f64(),
                        })
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("suite worker panicked")).collect()
        });
        for r in batch {
            let r = r?;
            progress(&format!(
                "{} seed {}: iou {:.4} ({:.0}s)",
                r.name, r.seed, r.report.mean_iou, r.wall_seconds
            ));
            results.push(r);
        }
    }

    let ledger_file = out_root.join("results.tsv");
    for r in &results {
        append_ledger(
            &ledger_file,
            &ledger_row(suite.name(), &r.name, r.seed, &r.report, r.wall_seconds),
        )?;
    }
    let summary = render_summary(suite, seeds, &results);
    let summary_file = out_root.join("summary.txt");
    fs::write(&summary_file, &summary).map_err(|e| Error::io(&summary_file, e))?;

    Ok(SuiteOutcome { results, summary, ledger_file, summary_file })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_emits_twelve_configurations() {
        let rows = suite_rows(Suite::Table1, &ModelConfig::toy());
        assert_eq!(rows.len(), 12);
        let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names[0], "shared_n1");
        assert_eq!(names[3], "shared_n4");
        assert_eq!(names[4], "independent_n1");
        assert_eq!(names[11], "generic_lav_n4");
        for (name, cfg) in &rows {
            cfg.validate().unwrap();
            assert_eq!(cfg.imi, ImiMode::Off, "{name}");
            assert!(!cfg.lfr, "{name}");
            let depth: usize = name.rsplit('n').next().unwrap().parse().unwrap();
            assert_eq!(cfg.n_dec, depth, "{name}");
        }
        // Four of each structural mode.
        assert_eq!(rows.iter().filter(|(_, c)| c.baseline == BaselineMode::GenericLav).count(), 4);
        assert_eq!(
            rows.iter()
                .filter(|(_, c)| c.attention == AttentionMode::Independent
                    && c.baseline == BaselineMode::M3Att)
                .count(),
            4
        );
    }

    #[test]
    fn table2_emits_the_five_component_rows() {
        let rows = suite_rows(Suite::Table2, &ModelConfig::toy());
        let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["generic_lav", "m3att", "m3att+imi", "m3att+imi_star", "full"]);
        for (_, cfg) in &rows {
            cfg.validate().unwrap();
            assert_eq!(cfg.n_dec, ModelConfig::toy().n_dec);
        }
        assert_eq!(rows[0].1.baseline, BaselineMode::GenericLav);
        assert_eq!(rows[1].1.imi, ImiMode::Off);
        assert!(!rows[1].1.lfr);
        assert_eq!(rows[2].1.imi, ImiMode::Full);
        assert_eq!(rows[3].1.imi, ImiMode::Star);
        assert!(rows[4].1.lfr && rows[4].1.imi == ImiMode::Full);
    }

    #[test]
    fn row_stats_aggregate_over_seeds() {
        let fake = |name: &str, seed: u64, iou: f64, pr: f64| RunResult {
            name: name.into(),
            seed,
            report: EvalReport {
                n: 1,
                mean_iou: iou,
                precisions: [(0.5, pr), (0.6, 0.0), (0.7, 0.0), (0.8, 0.0), (0.9, 0.0)],
                per_sample: vec![iou],
            },
            wall_seconds: 0.0,
        };
        let results = vec![
            fake("a", 1, 0.5, 1.0),
            fake("a", 2, 0.7, 0.5),
            fake("b", 1, 0.25, 0.0),
        ];
        let stats = row_stats(&results);
        assert_eq!(stats.len(), 2);
        assert!((stats[0].mean_iou - 0.6).abs() < 1e-15);
        assert!((stats[0].std_iou - 0.1).abs() < 1e-15);
        assert!((stats[0].mean_pr05 - 0.75).abs() < 1e-15);
        assert_eq!(stats[1].name, "b");
        assert_eq!(stats[1].std_iou, 0.0);
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(Suite::parse("table3").is_err());
        assert_eq!(Suite::parse("table1").unwrap(), Suite::Table1);
        assert_eq!(Suite::parse("table2").unwrap().name(), "table2");
    }
}
