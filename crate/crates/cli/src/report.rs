//! `report`: summaries computed from result CSVs only.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::Utc;
use serde::{Deserialize, Serialize};

use ralab_core::analysis::{write_csv, CorrelationRow};
use ralab_core::learner::{read_stages_csv, StageRecord};
use ralab_core::retrainer::RetrainReport;

use crate::manifest::write_manifest;

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn source_name(dir: &Path) -> String {
    dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

#[derive(Debug, Serialize)]
pub struct CurveRow {
    pub source: String,
    pub acquisition: String,
    pub stage: usize,
    pub seeds: usize,
    pub labeled: f64,
    pub accuracy: f64,
    pub rob_pgd: Option<f64>,
    pub rob_square: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct FinalRow {
    pub source: String,
    pub acquisition: String,
    pub seeds: usize,
    pub labeled: f64,
    pub accuracy: f64,
    pub rob_pgd: Option<f64>,
    pub rob_square: Option<f64>,
}

#[derive(Default)]
struct Acc {
    labeled: Vec<f64>,
    accuracy: Vec<f64>,
    pgd: Vec<f64>,
    square: Vec<f64>,
}

impl Acc {
    fn add(&mut self, r: &StageRecord) {
        self.labeled.push(r.labeled as f64);
        self.accuracy.push(r.accuracy);
        self.pgd.extend(r.rob_pgd);
        self.square.extend(r.rob_square);
    }
}

/// Per-stage means over seeds (learning curves) and final-stage means.
pub fn curves(source: &str, records: &[StageRecord]) -> (Vec<CurveRow>, Vec<FinalRow>) {
    let mut by_stage: BTreeMap<(String, usize), Acc> = BTreeMap::new();
    let mut last: BTreeMap<(String, u64), &StageRecord> = BTreeMap::new();
    for r in records {
        let name = r.acquisition.name().to_string();
        by_stage.entry((name.clone(), r.stage)).or_default().add(r);
        let e = last.entry((name, r.seed)).or_insert(r);
        if r.stage >= e.stage {
            *e = r;
        }
    }
    let curve = by_stage
        .into_iter()
        .map(|((acquisition, stage), a)| CurveRow {
            source: source.to_string(),
            acquisition,
            stage,
            seeds: a.accuracy.len(),
            labeled: mean(&a.labeled).unwrap_or(0.0),
            accuracy: mean(&a.accuracy).unwrap_or(0.0),
            rob_pgd: mean(&a.pgd),
            rob_square: mean(&a.square),
        })
        .collect();
    let mut finals: BTreeMap<String, Acc> = BTreeMap::new();
    for ((name, _), r) in last {
        finals.entry(name).or_default().add(r);
    }
    let finals = finals
        .into_iter()
        .map(|(acquisition, a)| FinalRow {
            source: source.to_string(),
            acquisition,
            seeds: a.accuracy.len(),
            labeled: mean(&a.labeled).unwrap_or(0.0),
            accuracy: mean(&a.accuracy).unwrap_or(0.0),
            rob_pgd: mean(&a.pgd),
            rob_square: mean(&a.square),
        })
        .collect();
    (curve, finals)
}

#[derive(Debug, Deserialize)]
struct CorrelationIn {
    stage: usize,
    characteristic: String,
    r: Option<f64>,
}

/// Stage x characteristic grid of correlations (empty cells stay empty).
pub fn heatmap(rows: &[CorrelationRow]) -> Vec<Vec<String>> {
    let to_in: Vec<CorrelationIn> = rows
        .iter()
        .map(|r| CorrelationIn {
            stage: r.stage,
            characteristic: serde_json::to_value(r.characteristic).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default(),
            r: r.r,
        })
        .collect();
    grid(&to_in)
}

fn grid(rows: &[CorrelationIn]) -> Vec<Vec<String>> {
    let mut columns: Vec<String> = Vec::new();
    for r in rows {
        if !columns.contains(&r.characteristic) {
            columns.push(r.characteristic.clone());
        }
    }
    let mut cells: BTreeMap<usize, BTreeMap<&str, Option<f64>>> = BTreeMap::new();
    for r in rows {
        cells.entry(r.stage).or_default().insert(&r.characteristic, r.r);
    }
    let mut out = vec![std::iter::once("stage".to_string()).chain(columns.iter().cloned()).collect()];
    for (stage, row) in cells {
        let mut line = vec![stage.to_string()];
        for c in &columns {
            line.push(row.get(c.as_str()).copied().flatten().map_or_else(String::new, |v| v.to_string()));
        }
        out.push(line);
    }
    out
}

#[derive(Debug, Serialize)]
pub struct RetrainSummary {
    pub acquisition: String,
    pub fraction: f64,
    pub seeds: usize,
    pub baseline_accuracy: f64,
    pub accuracy: f64,
    pub baseline_rob_pgd: Option<f64>,
    pub rob_pgd: Option<f64>,
    pub delta_rob_pgd: Option<f64>,
}

pub fn retrain_summary(rows: &[RetrainReport]) -> Vec<RetrainSummary> {
    let mut groups: BTreeMap<(String, u64), Vec<&RetrainReport>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.acquisition.name().to_string(), (r.fraction * 1e6).round() as u64)).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let col = |f: &dyn Fn(&RetrainReport) -> Option<f64>| -> Option<f64> {
                let v: Vec<f64> = g.iter().filter_map(|r| f(r)).collect();
                mean(&v)
            };
            let base = col(&|r| r.baseline_rob_pgd);
            let after = col(&|r| r.rob_pgd);
            RetrainSummary {
                acquisition: g[0].acquisition.name().to_string(),
                fraction: g[0].fraction,
                seeds: g.len(),
                baseline_accuracy: col(&|r| Some(r.baseline_accuracy)).unwrap_or(0.0),
                accuracy: col(&|r| Some(r.accuracy)).unwrap_or(0.0),
                baseline_rob_pgd: base,
                rob_pgd: after,
                delta_rob_pgd: base.zip(after).map(|(b, a)| a - b),
            }
        })
        .collect()
}

pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<()> {
    let started = Utc::now();
    let (mut curve_rows, mut final_rows, mut heat, mut retrain) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for dir in inputs {
        let source = source_name(dir);
        let stages = dir.join("stages.csv");
        if stages.exists() {
            let records = read_stages_csv(&stages).with_context(|| format!("reading {}", stages.display()))?;
            let (c, f) = curves(&source, &records);
            curve_rows.extend(c);
            final_rows.extend(f);
        }
        let corr = dir.join("correlation.csv");
        if corr.exists() {
            let mut rdr = csv::Reader::from_path(&corr)?;
            let rows: Vec<CorrelationIn> = rdr.deserialize().collect::<Result<_, _>>()?;
            heat.push((source.clone(), grid(&rows)));
        }
        let rt = dir.join("retrain.csv");
        if rt.exists() {
            let mut rdr = csv::Reader::from_path(&rt)?;
            let rows: Vec<RetrainReport> = rdr.deserialize().collect::<Result<_, _>>()?;
            retrain.extend(rows);
        }
    }
    fs::create_dir_all(out)?;
    if !curve_rows.is_empty() {
        write_csv(&out.join("curves.csv"), &curve_rows)?;
        write_csv(&out.join("final.csv"), &final_rows)?;
        println!("{:<16} {:<16} {:>5} {:>9} {:>9} {:>9}", "source", "acquisition", "seeds", "accuracy", "rob_pgd", "rob_square");
        for f in &final_rows {
            let pct = |v: Option<f64>| v.map_or("-".into(), |x| format!("{:.2}", 100.0 * x));
            println!(
                "{:<16} {:<16} {:>5} {:>9.2} {:>9} {:>9}",
                f.source,
                f.acquisition,
                f.seeds,
                100.0 * f.accuracy,
                pct(f.rob_pgd),
                pct(f.rob_square)
            );
        }
    }
    for (source, g) in &heat {
        let name = if heat.len() == 1 { "heatmap.csv".to_string() } else { format!("heatmap_{source}.csv") };
        let mut w = csv::Writer::from_path(out.join(name))?;
        for line in g {
            w.write_record(line)?;
        }
        w.flush()?;
    }
    if !retrain.is_empty() {
        write_csv(&out.join("retrain_summary.csv"), &retrain_summary(&retrain))?;
    }
    write_manifest(out, "report", vec![], serde_json::json!({"inputs": inputs}), started)?;
    Ok(())
}
