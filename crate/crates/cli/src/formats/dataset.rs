//! Dataset persistence: newline-delimited JSON with a header line, plus a
//! generic longitudinal CSV importer.
//!
//! The header carries feature metadata, normalization statistics, the
//! oracle adjacency (row-major, hidden-confounder slot included), the
//! generator fingerprint, and, for simulated data, the full generating
//! system so evaluation can rerun it. One sample per following line.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;

use ctp_core::dynsim::{
    Dataset, FeatureMeta, Fingerprint, NormStats, OdeSystemSpec, SystemId, TrajectorySample, Visit,
};

use super::json::JsonWriter;
use crate::error::{CliError, CliResult};

pub const DATASET_SCHEMA: &str = "ctp-dataset-v1";

pub fn write_dataset(data: &Dataset, path: &Path) -> CliResult<()> {
    let mut out = String::new();
    out.push_str(&header_line(data));
    out.push('\n');
    for s in &data.samples {
        out.push_str(&sample_line(s));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CliError::io(path, e))?;
    Ok(())
}

fn header_line(data: &Dataset) -> String {
    let mut w = JsonWriter::new();
    w.begin_obj();
    w.key("schema").str(DATASET_SCHEMA);
    w.key("features").begin_arr();
    for f in &data.features {
        w.begin_obj();
        w.key("name").str(&f.name);
        w.key("discrete").bool(f.discrete);
        w.end_obj();
    }
    w.end_arr();
    match &data.norm {
        Some(n) => {
            w.key("norm").begin_obj();
            w.key("mean").f64_slice(&n.mean);
            w.key("std").f64_slice(&n.std);
            w.end_obj();
        }
        None => {
            w.key("norm").null();
        }
    }
    match &data.oracle_adj {
        Some(adj) => {
            w.key("oracle_adj").u8_slice(adj);
        }
        None => {
            w.key("oracle_adj").null();
        }
    }
    w.key("time_scale").f64(data.time_scale);
    w.key("fingerprint").begin_obj();
    let fp = &data.fingerprint;
    w.key("system").str(&fp.system);
    w.key("seed").u64(fp.seed);
    w.key("n_samples").usize(fp.n_samples);
    w.key("init_noise").f64(fp.init_noise);
    w.key("obs_noise").f64(fp.obs_noise);
    w.key("missing_rate").f64(fp.missing_rate);
    match &fp.split {
        Some(s) => w.key("split").str(s),
        None => w.key("split").null(),
    };
    w.key("digest").str(&format!("{:016x}", fp.digest()));
    w.end_obj();
    match &data.system {
        Some(sys) => {
            w.key("system").begin_obj();
            w.key("id").str(sys.id.as_str());
            w.key("feature_names").begin_arr();
            for n in &sys.feature_names {
                w.str(n);
            }
            w.end_arr();
            w.key("params").begin_arr();
            for (name, v) in &sys.params {
                w.begin_arr().str(name).f64(*v).end_arr();
            }
            w.end_arr();
            w.key("adjacency").u8_slice(&sys.adjacency);
            w.key("init").f64_slice(&sys.init);
            w.key("t0").f64(sys.t0);
            w.key("hidden").begin_arr();
            for &h in &sys.hidden {
                w.usize(h);
            }
            w.end_arr();
            w.end_obj();
        }
        None => {
            w.key("system").null();
        }
    }
    w.end_obj();
    w.finish()
}

fn sample_line(s: &TrajectorySample) -> String {
    let mut w = JsonWriter::new();
    w.begin_obj();
    w.key("id").u64(s.id);
    w.key("n_input").usize(s.n_input);
    w.key("n_label").usize(s.n_label);
    match &s.oracle_init {
        Some(init) => {
            w.key("oracle_init").f64_slice(init);
        }
        None => {
            w.key("oracle_init").null();
        }
    }
    w.key("visits").begin_arr();
    for v in &s.visits {
        w.begin_obj();
        w.key("t").f64(v.t);
        w.key("values").f64_slice(&v.values);
        w.key("missing").u8_slice(&v.missing);
        w.end_obj();
    }
    w.end_arr();
    w.end_obj();
    w.finish()
}

#[derive(Deserialize)]
struct HeaderDe {
    schema: String,
    features: Vec<FeatureDe>,
    norm: Option<NormDe>,
    oracle_adj: Option<Vec<u8>>,
    time_scale: f64,
    fingerprint: FingerprintDe,
    system: Option<SystemDe>,
}

#[derive(Deserialize)]
struct FeatureDe {
    name: String,
    discrete: bool,
}

#[derive(Deserialize)]
struct NormDe {
    mean: Vec<f64>,
    std: Vec<f64>,
}

#[derive(Deserialize)]
struct FingerprintDe {
    system: String,
    seed: u64,
    n_samples: usize,
    init_noise: f64,
    obs_noise: f64,
    missing_rate: f64,
    split: Option<String>,
    #[allow(dead_code)]
    digest: Option<String>,
}

#[derive(Deserialize)]
struct SystemDe {
    id: String,
    feature_names: Vec<String>,
    params: Vec<(String, f64)>,
    adjacency: Vec<u8>,
    init: Vec<f64>,
    t0: f64,
    hidden: Vec<usize>,
}

#[derive(Deserialize)]
struct SampleDe {
    id: u64,
    n_input: usize,
    n_label: usize,
    oracle_init: Option<Vec<f64>>,
    visits: Vec<VisitDe>,
}

#[derive(Deserialize)]
struct VisitDe {
    t: f64,
    values: Vec<f64>,
    missing: Vec<u8>,
}

pub fn read_dataset(path: &Path) -> CliResult<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header_text = lines
        .next()
        .ok_or_else(|| CliError::Schema(format!("{}: empty dataset file", path.display())))?
        .map_err(|e| CliError::io(path, e))?;
    let header: HeaderDe = serde_json::from_str(&header_text)
        .map_err(|e| CliError::Schema(format!("{}: bad header: {e}", path.display())))?;
    if header.schema != DATASET_SCHEMA {
        return Err(CliError::Schema(format!(
            "{}: unsupported schema {:?}",
            path.display(),
            header.schema
        )));
    }
    let system = header
        .system
        .map(|s| -> CliResult<OdeSystemSpec> {
            let id = match s.id.as_str() {
                "hao" => SystemId::Hao,
                "zheng" => SystemId::Zheng,
                "mm" => SystemId::Mm,
                other => {
                    return Err(CliError::Schema(format!("unknown system id {other:?}")))
                }
            };
            Ok(OdeSystemSpec {
                id,
                feature_names: s.feature_names,
                params: s.params,
                adjacency: s.adjacency,
                init: s.init,
                t0: s.t0,
                hidden: s.hidden,
            })
        })
        .transpose()?;
    let mut samples = Vec::new();
    for line in lines {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SampleDe = serde_json::from_str(&line)
            .map_err(|e| CliError::Schema(format!("{}: bad sample line: {e}", path.display())))?;
        samples.push(TrajectorySample {
            id: s.id,
            visits: s
                .visits
                .into_iter()
                .map(|v| Visit {
                    t: v.t,
                    values: v.values,
                    missing: v.missing,
                })
                .collect(),
            n_input: s.n_input,
            n_label: s.n_label,
            oracle_init: s.oracle_init,
        });
    }
    let data = Dataset {
        samples,
        features: header
            .features
            .into_iter()
            .map(|f| FeatureMeta {
                name: f.name,
                discrete: f.discrete,
            })
            .collect(),
        norm: header.norm.map(|n| NormStats {
            mean: n.mean,
            std: n.std,
        }),
        oracle_adj: header.oracle_adj,
        system,
        fingerprint: Fingerprint {
            system: header.fingerprint.system,
            seed: header.fingerprint.seed,
            n_samples: header.fingerprint.n_samples,
            init_noise: header.fingerprint.init_noise,
            obs_noise: header.fingerprint.obs_noise,
            missing_rate: header.fingerprint.missing_rate,
            split: header.fingerprint.split,
        },
        time_scale: header.time_scale,
    };
    data.validate()
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    Ok(data)
}

/// Import long-format longitudinal CSV: `sample_id,time,feature,value`.
///
/// Missing observations are simply absent rows. Features whose observed
/// values are all 0/1 are treated as discrete. The first `input_fraction`
/// of each subject's visits become encoder input.
pub fn import_csv(path: &Path, input_fraction: f64) -> CliResult<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut rows: Vec<(String, f64, String, f64)> = Vec::new();
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if ln == 0 && t.to_ascii_lowercase().starts_with("sample_id") {
            continue; // header row
        }
        let parts: Vec<&str> = t.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(CliError::Schema(format!(
                "{}:{}: expected 4 columns, got {}",
                path.display(),
                ln + 1,
                parts.len()
            )));
        }
        let time: f64 = parts[1].parse().map_err(|_| {
            CliError::Schema(format!("{}:{}: bad time {:?}", path.display(), ln + 1, parts[1]))
        })?;
        let value: f64 = parts[3].parse().map_err(|_| {
            CliError::Schema(format!("{}:{}: bad value {:?}", path.display(), ln + 1, parts[3]))
        })?;
        rows.push((parts[0].to_string(), time, parts[2].to_string(), value));
    }
    if rows.is_empty() {
        return Err(CliError::Schema(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    let mut feature_names: Vec<String> = rows.iter().map(|r| r.2.clone()).collect();
    feature_names.sort();
    feature_names.dedup();
    let findex = |name: &str| feature_names.iter().position(|f| f == name).unwrap();

    let mut subject_ids: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    subject_ids.sort();
    subject_ids.dedup();

    let k = feature_names.len();
    let mut discrete = vec![true; k];
    for (_, _, f, v) in &rows {
        if *v != 0.0 && *v != 1.0 {
            discrete[findex(f)] = false;
        }
    }

    let mut samples = Vec::new();
    for (si, sid) in subject_ids.iter().enumerate() {
        let mut times: Vec<f64> = rows
            .iter()
            .filter(|r| &r.0 == sid)
            .map(|r| r.1)
            .collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        let mut visits: Vec<Visit> = times
            .iter()
            .map(|&t| Visit {
                t,
                values: vec![0.0; k],
                missing: vec![1; k],
            })
            .collect();
        for (rsid, t, f, v) in &rows {
            if rsid == sid {
                let vi = times.iter().position(|x| x == t).unwrap();
                let fi = findex(f);
                visits[vi].values[fi] = *v;
                visits[vi].missing[fi] = 0;
            }
        }
        let n_input = ((visits.len() as f64 * input_fraction).round() as usize)
            .clamp(1, visits.len().saturating_sub(1).max(1));
        let n_label = visits.len() - n_input;
        samples.push(TrajectorySample {
            id: si as u64,
            visits,
            n_input,
            n_label,
            oracle_init: None,
        });
    }
    let mean_interval = {
        let mut acc = 0.0;
        let mut n = 0usize;
        for s in &samples {
            for w in s.visits.windows(2) {
                acc += w[1].t - w[0].t;
                n += 1;
            }
        }
        if n == 0 {
            1.0
        } else {
            acc / n as f64
        }
    };
    let data = Dataset {
        fingerprint: Fingerprint {
            system: format!("csv:{}", path.display()),
            seed: 0,
            n_samples: samples.len(),
            init_noise: 0.0,
            obs_noise: 0.0,
            missing_rate: 0.0,
            split: None,
        },
        samples,
        features: feature_names
            .into_iter()
            .zip(discrete)
            .map(|(name, discrete)| FeatureMeta { name, discrete })
            .collect(),
        norm: None,
        oracle_adj: None,
        system: None,
        time_scale: if mean_interval > 0.0 { mean_interval } else { 1.0 },
    };
    data.validate()
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    Ok(data)
}

/// Write a small CSV sample of a dataset in importer format (round-trip
/// tooling and tests).
pub fn export_csv(data: &Dataset, path: &Path) -> CliResult<()> {
    let mut out = String::from("sample_id,time,feature,value\n");
    for s in &data.samples {
        for v in &s.visits {
            for (f, meta) in data.features.iter().enumerate() {
                if v.missing[f] == 0 {
                    out.push_str(&format!("s{},{:.17e},{},{:.17e}\n", s.id, v.t, meta.name, v.values[f]));
                }
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| CliError::io(path, e))?;
    Ok(())
}
