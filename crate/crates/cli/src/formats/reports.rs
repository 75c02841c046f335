//! Audit and result files: training logs, vote audits, metric reports,
//! treatment specs, bounds, and plot series.

use std::path::Path;

use serde::Deserialize;

use ctp_core::causal_id::VoteAudit;
use ctp_core::eval::{MetricReport, SeriesTable};
use ctp_core::trainer::TrainLogRecord;
use ctp_core::treatment::TreatmentSpec;

use super::json::JsonWriter;
use crate::error::{CliError, CliResult};

/// Training log: one JSON object per line, one line per recorded step.
pub fn write_train_log(records: &[TrainLogRecord], path: &Path) -> CliResult<()> {
    let mut out = String::new();
    for r in records {
        let mut w = JsonWriter::new();
        w.begin_obj();
        w.key("step").usize(r.step);
        w.key("l_final").f64(r.l_final);
        w.key("l").f64(r.l_data);
        w.key("g").f64(r.sparse);
        w.key("h").f64(r.dag);
        w.key("alpha").f64(r.alpha);
        w.key("rho").f64(r.rho);
        w.end_obj();
        out.push_str(&w.finish());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CliError::io(path, e))
}

#[derive(Deserialize)]
struct TrainLogDe {
    step: usize,
    l_final: f64,
    l: f64,
    g: f64,
    h: f64,
    alpha: f64,
    rho: f64,
}

pub fn read_train_log(path: &Path) -> CliResult<Vec<TrainLogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: TrainLogDe = serde_json::from_str(line)
            .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        out.push(TrainLogRecord {
            step: r.step,
            l_final: r.l_final,
            l_data: r.l,
            sparse: r.g,
            dag: r.h,
            alpha: r.alpha,
            rho: r.rho,
        });
    }
    Ok(out)
}

/// Vote audit: per round, per entry, the connectivity values of every
/// voting model and the decisions taken.
pub fn write_vote_audit(audit: &VoteAudit, dim: usize, path: &Path) -> CliResult<()> {
    let mut w = JsonWriter::new();
    w.begin_obj();
    w.key("schema").str("ctp-vote-audit-v1");
    w.key("dim").usize(dim);
    w.key("rounds").begin_arr();
    for r in &audit.rounds {
        w.begin_obj();
        w.key("round").usize(r.round);
        w.key("attempts").usize(r.attempts);
        w.key("model_losses").f64_slice(&r.model_losses);
        w.key("connectivity").begin_arr();
        for mat in &r.connectivity {
            w.f64_slice(mat);
        }
        w.end_arr();
        w.key("decisions").begin_arr();
        for (i, j, present) in &r.decisions {
            w.begin_obj();
            w.key("cause").usize(*i);
            w.key("effect").usize(*j);
            w.key("present").bool(*present);
            w.end_obj();
        }
        w.end_arr();
        w.end_obj();
    }
    w.end_arr();
    w.key("fallback").begin_arr();
    for (i, j, present) in &audit.fallback {
        w.begin_obj();
        w.key("cause").usize(*i);
        w.key("effect").usize(*j);
        w.key("present").bool(*present);
        w.end_obj();
    }
    w.end_arr();
    w.end_obj();
    std::fs::write(path, w.finish()).map_err(|e| CliError::io(path, e))
}

/// Metric reports with their provenance context.
pub fn write_metric_reports(
    reports: &[MetricReport],
    dataset_digest: &str,
    model_digest: &str,
    seed: u64,
    path: &Path,
) -> CliResult<()> {
    let mut w = JsonWriter::new();
    w.begin_arr();
    for r in reports {
        w.begin_obj();
        w.key("metric").str(&r.name);
        w.key("split").str(&r.split);
        w.key("value").f64(r.value);
        w.key("dataset").str(dataset_digest);
        w.key("model").str(model_digest);
        w.key("seed").u64(seed);
        w.end_obj();
    }
    w.end_arr();
    std::fs::write(path, w.finish()).map_err(|e| CliError::io(path, e))
}

#[derive(Deserialize)]
pub struct MetricRowDe {
    pub metric: String,
    pub split: String,
    pub value: f64,
    pub dataset: String,
    pub model: String,
    pub seed: u64,
}

pub fn read_metric_reports(path: &Path) -> CliResult<Vec<MetricRowDe>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

/// Treatment spec file: feature by name or index, times and the pinned
/// value in raw units.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreatmentFile {
    pub feature: FeatureRef,
    pub time: f64,
    pub value: f64,
    pub observe_from: f64,
    pub observe_to: f64,
    pub num_points: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum FeatureRef {
    Index(usize),
    Name(String),
}

pub fn read_treatment_file(path: &Path) -> CliResult<TreatmentFile> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}

pub fn write_treatment_file(t: &TreatmentFile, path: &Path) -> CliResult<()> {
    let mut w = JsonWriter::new();
    w.begin_obj();
    match &t.feature {
        FeatureRef::Index(i) => w.key("feature").usize(*i),
        FeatureRef::Name(n) => w.key("feature").str(n),
    };
    w.key("time").f64(t.time);
    w.key("value").f64(t.value);
    w.key("observe_from").f64(t.observe_from);
    w.key("observe_to").f64(t.observe_to);
    w.key("num_points").usize(t.num_points);
    w.end_obj();
    std::fs::write(path, w.finish()).map_err(|e| CliError::io(path, e))
}

/// Per-sample bounds in raw units.
pub struct BoundsRecord {
    pub sample_id: u64,
    pub times: Vec<f64>,
    pub lo: Vec<Vec<f64>>,
    pub mean: Vec<Vec<f64>>,
    pub hi: Vec<Vec<f64>>,
    pub oracle: Option<Vec<Vec<f64>>>,
}

pub fn write_bounds(
    treatment: &TreatmentSpec,
    features: &[String],
    records: &[BoundsRecord],
    dataset_digest: &str,
    model_digest: &str,
    path: &Path,
) -> CliResult<()> {
    let mut w = JsonWriter::new();
    w.begin_obj();
    w.key("schema").str("ctp-bounds-v1");
    w.key("treatment").begin_obj();
    w.key("feature").usize(treatment.feature);
    w.key("t_start").f64(treatment.t_start);
    w.key("value_normalized").f64(treatment.value);
    w.key("observe_from").f64(treatment.observe_from);
    w.key("observe_to").f64(treatment.observe_to);
    w.key("n_points").usize(treatment.n_points);
    w.end_obj();
    w.key("features").begin_arr();
    for f in features {
        w.str(f);
    }
    w.end_arr();
    w.key("dataset").str(dataset_digest);
    w.key("model").str(model_digest);
    w.key("samples").begin_arr();
    for r in records {
        w.begin_obj();
        w.key("id").u64(r.sample_id);
        w.key("times").f64_slice(&r.times);
        let series = |w: &mut JsonWriter, rows: &Vec<Vec<f64>>| {
            w.begin_arr();
            for row in rows {
                w.f64_slice(row);
            }
            w.end_arr();
        };
        w.key("min");
        series(&mut w, &r.lo);
        w.key("mean");
        series(&mut w, &r.mean);
        w.key("max");
        series(&mut w, &r.hi);
        match &r.oracle {
            Some(o) => {
                w.key("oracle");
                series(&mut w, o);
            }
            None => {
                w.key("oracle").null();
            }
        }
        w.end_obj();
    }
    w.end_arr();
    w.end_obj();
    std::fs::write(path, w.finish()).map_err(|e| CliError::io(path, e))
}

#[derive(Deserialize)]
pub struct BoundsFileDe {
    pub schema: String,
    pub treatment: BoundsTreatmentDe,
    pub features: Vec<String>,
    pub dataset: String,
    pub model: String,
    pub samples: Vec<BoundsRecordDe>,
}

#[derive(Deserialize)]
pub struct BoundsTreatmentDe {
    pub feature: usize,
    pub t_start: f64,
    pub value_normalized: f64,
    pub observe_from: f64,
    pub observe_to: f64,
    pub n_points: usize,
}

#[derive(Deserialize)]
pub struct BoundsRecordDe {
    pub id: u64,
    pub times: Vec<f64>,
    pub min: Vec<Vec<f64>>,
    pub mean: Vec<Vec<f64>>,
    pub max: Vec<Vec<f64>>,
    pub oracle: Option<Vec<Vec<f64>>>,
}

pub fn read_bounds(path: &Path) -> CliResult<BoundsFileDe> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let de: BoundsFileDe = serde_json::from_str(&text)
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    if de.schema != "ctp-bounds-v1" {
        return Err(CliError::Schema(format!(
            "{}: unsupported schema {:?}",
            path.display(),
            de.schema
        )));
    }
    Ok(de)
}

/// Plot-ready series; JSON or CSV depending on the path extension.
pub fn write_series(table: &SeriesTable, path: &Path) -> CliResult<()> {
    let is_csv = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("csv"))
        .unwrap_or(false);
    let text = if is_csv {
        series_csv(table)
    } else {
        series_json(table)
    };
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn series_json(table: &SeriesTable) -> String {
    let mut w = JsonWriter::new();
    w.begin_obj();
    w.key("schema").str("ctp-series-v1");
    w.key("bounds_present")
        .bool(table.lo.is_some() && table.hi.is_some());
    w.key("times").f64_slice(&table.times);
    w.key("features").begin_arr();
    for f in &table.features {
        w.str(f);
    }
    w.end_arr();
    let rows = |w: &mut JsonWriter, data: &Vec<Vec<f64>>| {
        w.begin_arr();
        for row in data {
            w.f64_slice(row);
        }
        w.end_arr();
    };
    w.key("predicted");
    rows(&mut w, &table.predicted);
    match &table.oracle {
        Some(o) => {
            w.key("oracle");
            rows(&mut w, o);
        }
        None => {
            w.key("oracle").null();
        }
    }
    match (&table.lo, &table.hi) {
        (Some(lo), Some(hi)) => {
            w.key("min");
            rows(&mut w, lo);
            w.key("max");
            rows(&mut w, hi);
        }
        _ => {
            w.key("min").null();
            w.key("max").null();
        }
    }
    w.end_obj();
    w.finish()
}

fn series_csv(table: &SeriesTable) -> String {
    let mut out = String::from("t");
    let has_bounds = table.lo.is_some() && table.hi.is_some();
    for f in &table.features {
        out.push_str(&format!(",{f}_predicted"));
        if table.oracle.is_some() {
            out.push_str(&format!(",{f}_oracle"));
        }
        if has_bounds {
            out.push_str(&format!(",{f}_min,{f}_max"));
        }
    }
    out.push('\n');
    for (ti, &t) in table.times.iter().enumerate() {
        out.push_str(&format!("{t:.16e}"));
        for f in 0..table.features.len() {
            out.push_str(&format!(",{:.16e}", table.predicted[ti][f]));
            if let Some(o) = &table.oracle {
                out.push_str(&format!(",{:.16e}", o[ti][f]));
            }
            if has_bounds {
                out.push_str(&format!(
                    ",{:.16e},{:.16e}",
                    table.lo.as_ref().unwrap()[ti][f],
                    table.hi.as_ref().unwrap()[ti][f]
                ));
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Deserialize)]
pub struct SeriesFileDe {
    pub schema: String,
    pub bounds_present: bool,
    pub times: Vec<f64>,
    pub features: Vec<String>,
    pub predicted: Vec<Vec<f64>>,
    pub oracle: Option<Vec<Vec<f64>>>,
    pub min: Option<Vec<Vec<f64>>>,
    pub max: Option<Vec<Vec<f64>>>,
}

pub fn read_series(path: &Path) -> CliResult<SeriesFileDe> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))
}
