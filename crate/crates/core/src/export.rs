//! Run artifacts on disk.
//!
//! A run directory holds `report.json` (deterministic), `timings.json`
//! (wall clock) and CSV views derived from them. Every CSV opens with a
//! `# config: {...}` line echoing the attack configuration and seed, so the
//! files can be regenerated from the JSON alone, byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attack::{distribution_report, AttackReport, AttackRun, Census, PhaseTimings};
use crate::error::{BundleError, Result};

pub const REPORT_FILE: &str = "report.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const FLIPS_CSV: &str = "flips.csv";
pub const CENSUS_CSV: &str = "census.csv";
pub const DISTRIBUTION_CSV: &str = "distribution.csv";
pub const TIMINGS_CSV: &str = "timings.csv";
pub const TRANSFER_CSV: &str = "transfer.csv";
pub const SUMMARY_CSV: &str = "summary.csv";

/// Every CSV written per run, in write order.
pub const RUN_CSVS: [&str; 5] = [FLIPS_CSV, CENSUS_CSV, DISTRIBUTION_CSV, TIMINGS_CSV, TRANSFER_CSV];

/// Column lists, also printed by the CLI help.
pub const FLIPS_COLUMNS: &[&str] = &[
    "iteration", "tensor", "layer_index", "param_kind", "flat_index", "bit_position", "old_value", "new_value",
    "delta", "impact_score", "sneaky", "accuracy_after",
];
pub const CENSUS_COLUMNS: &[&str] = &[
    "rank", "tensor", "layer_index", "param_kind", "flat_index", "bit_position", "delta", "impact_score",
    "post_acc", "critical",
];
pub const DISTRIBUTION_COLUMNS: &[&str] = &["layer_index", "param_kind", "count"];
pub const TIMINGS_COLUMNS: &[&str] = &["phase", "name", "seconds", "share"];
pub const TRANSFER_COLUMNS: &[&str] = &["task", "pre_acc", "post_acc", "numerical_error"];
pub const SUMMARY_COLUMNS: &[&str] =
    &["seed", "pre_acc", "post_acc", "flips", "crit_1flip", "termination", "exit_code", "best"];

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BundleError + '_ {
    move |source| BundleError::Io { path: path.to_path_buf(), source }
}

/// Shortest round-trip decimal, with `nan`/`inf`/`-inf` spelled out.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else if v != 0.0 && (v.abs() < 1e-5 || v.abs() >= 1e16) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

#[derive(Serialize)]
struct Echo<'a, C: Serialize> {
    config: &'a C,
    seed: Option<u64>,
}

/// The leading comment line of every CSV.
pub fn config_line<C: Serialize>(config: &C, seed: Option<u64>) -> String {
    let json = serde_json::to_string(&Echo { config, seed }).expect("config serializes");
    format!("# config: {json}\n")
}

fn csv_bytes(header_line: &str, columns: &[&str], rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut out = header_line.as_bytes().to_vec();
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(columns).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    out.extend(w.into_inner().expect("in-memory flush"));
    out
}

pub fn flips_csv(report: &AttackReport) -> Vec<u8> {
    let rows = report
        .applied_flips
        .iter()
        .map(|f| {
            let c = &f.candidate;
            vec![
                f.iteration.to_string(),
                f.tensor.clone(),
                f.layer_index.to_string(),
                f.param_kind.clone(),
                c.weight.flat_index.to_string(),
                c.bit_position.to_string(),
                fmt_f64(c.old_value),
                fmt_f64(c.new_value),
                fmt_f64(c.delta),
                fmt_f64(c.impact_score),
                f.sneaky.to_string(),
                fmt_opt(f.accuracy_after),
            ]
        })
        .collect();
    csv_bytes(&config_line(&report.config, Some(report.seed)), FLIPS_COLUMNS, rows)
}

pub fn census_csv(report: &AttackReport) -> Vec<u8> {
    census_table(&config_line(&report.config, Some(report.seed)), &report.census)
}

pub fn census_table(header_line: &str, census: &Census) -> Vec<u8> {
    let rows = census
        .entries
        .iter()
        .map(|e| {
            vec![
                e.rank.to_string(),
                e.tensor.clone(),
                e.layer_index.to_string(),
                e.param_kind.clone(),
                e.flat_index.to_string(),
                e.bit_position.to_string(),
                fmt_f64(e.delta),
                fmt_f64(e.impact_score),
                fmt_opt(e.post_acc),
                e.critical.to_string(),
            ]
        })
        .collect();
    csv_bytes(header_line, CENSUS_COLUMNS, rows)
}

pub fn distribution_csv(report: &AttackReport) -> Vec<u8> {
    distribution_table(&config_line(&report.config, Some(report.seed)), &report.census)
}

pub fn distribution_table(header_line: &str, census: &Census) -> Vec<u8> {
    let rows = distribution_report(census)
        .into_iter()
        .map(|r| vec![r.layer_index.to_string(), r.param_kind, r.count.to_string()])
        .collect();
    csv_bytes(header_line, DISTRIBUTION_COLUMNS, rows)
}

pub fn timings_csv(report: &AttackReport, timings: &PhaseTimings) -> Vec<u8> {
    let total = timings.total();
    let rows = timings
        .rows()
        .iter()
        .map(|&(phase, name, secs)| {
            let share = if total > 0.0 { secs / total } else { 0.0 };
            vec![phase.to_string(), name.to_string(), format!("{secs:.6}"), format!("{share:.4}")]
        })
        .collect();
    csv_bytes(&config_line(&report.config, Some(report.seed)), TIMINGS_COLUMNS, rows)
}

pub fn transfer_csv(report: &AttackReport) -> Vec<u8> {
    let rows = report
        .transfer
        .iter()
        .map(|t| {
            vec![t.task.clone(), fmt_f64(t.pre_acc), fmt_opt(t.post_acc), t.numerical_error.clone().unwrap_or_default()]
        })
        .collect();
    csv_bytes(&config_line(&report.config, Some(report.seed)), TRANSFER_COLUMNS, rows)
}

/// One row per seed; `best` marks the run chosen by [`crate::attack::best_run`].
pub fn summary_csv(reports: &[AttackReport], best: Option<usize>) -> Vec<u8> {
    let rows = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                r.seed.to_string(),
                fmt_f64(r.pre_acc),
                fmt_f64(r.post_acc),
                r.flip_count().to_string(),
                r.census.display_count(),
                r.termination.as_str().to_string(),
                r.termination.exit_code().to_string(),
                (best == Some(i)).to_string(),
            ]
        })
        .collect();
    let config = reports.first().map(|r| &r.config);
    csv_bytes(&config_line(&config, None), SUMMARY_COLUMNS, rows)
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(&path, bytes).map_err(io_err(&path))
}

pub fn report_json(report: &AttackReport) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(report).expect("report serializes");
    bytes.push(b'\n');
    bytes
}

pub fn read_report(dir: &Path) -> Result<AttackReport> {
    let path = dir.join(REPORT_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_timings(dir: &Path) -> Result<PhaseTimings> {
    let path = dir.join(TIMINGS_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Writes `report.json` and `timings.json`, then derives the CSVs.
pub fn write_run(dir: &Path, report: &AttackReport, timings: &PhaseTimings) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(dir.join(REPORT_FILE), &report_json(report))?;
    let mut t = serde_json::to_vec_pretty(timings).expect("timings serialize");
    t.push(b'\n');
    write(dir.join(TIMINGS_FILE), &t)?;
    regenerate_csvs(dir)
}

pub fn write_attack_run(dir: &Path, run: &AttackRun) -> Result<()> {
    write_run(dir, &run.report, &run.timings)
}

/// Rebuilds every per-run CSV from the JSON files in `dir`.
pub fn regenerate_csvs(dir: &Path) -> Result<()> {
    let report = read_report(dir)?;
    let timings = read_timings(dir)?;
    write(dir.join(FLIPS_CSV), &flips_csv(&report))?;
    write(dir.join(CENSUS_CSV), &census_csv(&report))?;
    write(dir.join(DISTRIBUTION_CSV), &distribution_csv(&report))?;
    write(dir.join(TIMINGS_CSV), &timings_csv(&report, &timings))?;
    write(dir.join(TRANSFER_CSV), &transfer_csv(&report))?;
    Ok(())
}

pub fn write_summary(dir: &Path, reports: &[AttackReport], best: Option<usize>) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write(dir.join(SUMMARY_CSV), &summary_csv(reports, best))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_formatting() {
        assert_eq!(fmt_f64(0.1), "0.1");
        assert_eq!(fmt_f64(-2.0), "-2");
        assert_eq!(fmt_f64(6.25e-20), "6.25e-20");
        assert_eq!(fmt_f64(32768.0), "32768");
        assert_eq!(fmt_f64(f64::INFINITY), "inf");
        assert_eq!(fmt_f64(f64::NEG_INFINITY), "-inf");
        assert_eq!(fmt_f64(f64::NAN), "nan");
        assert_eq!(fmt_opt(None), "");
    }

    #[test]
    fn csv_starts_with_config_echo() {
        let bytes = csv_bytes(&config_line(&"cfg", Some(3)), &["a", "b"], vec![vec!["1".into(), "x,y".into()]]);
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text, "# config: {\"config\":\"cfg\",\"seed\":3}\na,b\n1,\"x,y\"\n");
    }
}
