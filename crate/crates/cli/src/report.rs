//! Merging run directories into seed tables and plot data.
//!
//! `fig1c.csv` holds mean and sample std per method and metric for error
//! bars; `fig4.csv` holds per-bin MAE bars. Rows follow the order in which
//! methods first appear in the given directories, so output is stable.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::{create_dir, seed_dir, write_out, CliError, SEEDS_CSV};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{0} is not a completed run directory (no seeds.csv)")]
    MissingRun(PathBuf),
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
}

const BAR_METRICS: [&str; 3] = ["depth_mae", "size_mae", "angle_mae"];

struct SeedRow {
    method: String,
    seed: u64,
    line: String,
    values: Vec<Option<f64>>,
}

struct Run {
    dir: PathBuf,
    header: Vec<String>,
    rows: Vec<SeedRow>,
}

fn malformed(path: &Path, message: impl Into<String>) -> ReportError {
    ReportError::Malformed { path: path.into(), message: message.into() }
}

fn parse_value(s: &str) -> Option<f64> {
    s.parse().ok()
}

fn read_run(dir: &Path) -> Result<Run, ReportError> {
    let path = dir.join(SEEDS_CSV);
    let text = std::fs::read_to_string(&path).map_err(|_| ReportError::MissingRun(dir.into()))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| malformed(&path, "empty file"))?
        .split(',')
        .map(str::to_owned)
        .collect();
    if header.len() < 3 || header[0] != "method" || header[1] != "seed" {
        return Err(malformed(&path, "unexpected header"));
    }
    let mut rows = Vec::new();
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != header.len() {
            return Err(malformed(&path, format!("row has {} columns, header {}", cols.len(), header.len())));
        }
        // Summary rows (mean, std, median) are recomputed from the seeds.
        let Ok(seed) = cols[1].parse::<u64>() else { continue };
        rows.push(SeedRow {
            method: cols[0].into(),
            seed,
            line: line.into(),
            values: cols.iter().map(|c| parse_value(c)).collect(),
        });
    }
    Ok(Run { dir: dir.into(), header, rows })
}

/// Mean, sample std and count; a single value reports std 0.
fn summarize(values: &[f64]) -> Option<(f64, f64, usize)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some((mean, std, n))
}

fn bar_row(s: &mut String, prefix: &str, values: &[f64]) {
    match summarize(values) {
        Some((mean, std, n)) => {
            let flag = if n == 1 { "single_sample" } else { "" };
            let _ = writeln!(s, "{prefix},{n},{mean:.6},{std:.6},{flag}");
        }
        None => {
            let _ = writeln!(s, "{prefix},0,NA,NA,no_data");
        }
    }
}

fn methods(runs: &[Run]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in runs {
        for row in &r.rows {
            if !out.contains(&row.method) {
                out.push(row.method.clone());
            }
        }
    }
    out
}

fn method_rows<'a>(runs: &'a [Run], method: &str) -> Vec<(&'a Run, &'a SeedRow)> {
    runs.iter()
        .flat_map(|r| r.rows.iter().map(move |row| (r, row)))
        .filter(|(_, row)| row.method == method)
        .collect()
}

/// `(attribute, bin) -> mae` rows of one seed's `mae_by_range.csv`.
fn read_mae(path: &Path) -> Result<Vec<(String, String, Option<f64>)>, ReportError> {
    let text = std::fs::read_to_string(path).map_err(|e| malformed(path, e.to_string()))?;
    let mut lines = text.lines();
    if lines.next() != Some("attribute,bin,count,mae") {
        return Err(malformed(path, "unexpected header"));
    }
    lines
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 4 {
                return Err(malformed(path, format!("bad row {l:?}")));
            }
            Ok((cols[0].to_owned(), cols[1].to_owned(), parse_value(cols[3])))
        })
        .collect()
}

/// Reads every run directory and writes `seeds.csv`, `fig1c.csv` and
/// `fig4.csv` to `out`. Identical inputs give identical bytes.
pub fn report(run_dirs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let runs: Vec<Run> = run_dirs.iter().map(|d| read_run(d)).collect::<Result<_, _>>()?;
    let header = runs[0].header.clone();
    if let Some(r) = runs.iter().find(|r| r.header != header) {
        return Err(malformed(&r.dir.join(SEEDS_CSV), "columns differ from the first run").into());
    }
    create_dir(out)?;
    let methods = methods(&runs);
    let rows_of = |m: &str| method_rows(&runs, m);

    let mut seeds = header.join(",");
    seeds.push('\n');
    for m in &methods {
        for (_, row) in rows_of(m) {
            seeds.push_str(&row.line);
            seeds.push('\n');
        }
    }
    write_out(&out.join(SEEDS_CSV), &seeds)?;

    let mut fig1c = String::from("method,metric,n,mean,std,flag\n");
    for m in &methods {
        for metric in BAR_METRICS {
            let col = header.iter().position(|h| h == metric);
            let values: Vec<f64> = match col {
                Some(c) => rows_of(m).into_iter().filter_map(|(_, row)| row.values[c]).collect(),
                None => Vec::new(),
            };
            bar_row(&mut fig1c, &format!("{m},{metric}"), &values);
        }
    }
    write_out(&out.join("fig1c.csv"), &fig1c)?;

    let mut fig4 = String::from("method,attribute,bin,n,mae_mean,mae_std,flag\n");
    for m in &methods {
        let mut cells: Vec<((String, String), Vec<f64>)> = Vec::new();
        for (run, row) in rows_of(m) {
            for (attr, bin, mae) in read_mae(&seed_dir(&run.dir, row.seed).join("mae_by_range.csv"))? {
                let key = (attr, bin);
                let idx = match cells.iter().position(|(k, _)| *k == key) {
                    Some(i) => i,
                    None => {
                        cells.push((key, Vec::new()));
                        cells.len() - 1
                    }
                };
                cells[idx].1.extend(mae);
            }
        }
        for ((attr, bin), values) in &cells {
            bar_row(&mut fig4, &format!("{m},{attr},{bin}"), values);
        }
    }
    write_out(&out.join("fig4.csv"), &fig4)?;
    Ok(())
}
