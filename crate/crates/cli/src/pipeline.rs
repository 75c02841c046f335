//! Pipeline stages behind the CLI subcommands.
//!
//! Every stage reads its upstream artifacts, verifies the fingerprint
//! chain back to the generator seed, runs the core computation, and writes
//! its own artifact plus provenance. All randomness derives from the
//! config's root seed through named substreams, so each stage is
//! independently reproducible.

use std::path::{Path, PathBuf};

use ctp_core::causal_id::{identify, mask_retrain};
use ctp_core::dynsim::{
    degrade, normalize, simulate_hao_with, simulate_mm, simulate_zheng, split_dataset, Dataset,
    Fingerprint,
};
use ctp_core::eval::{
    self, assemble_series, causal_metrics, inclusion_rate, oracle_treated_series,
    trajectory_metrics, treatment_metrics, MetricReport,
};
use ctp_core::model::{CausalMask, CtpModel};
use ctp_core::rng::Rng;
use ctp_core::trainer::{train, train_baseline, validation_data_loss, Baseline, TrainOutcome};
use ctp_core::treatment::{bounds, train_ensemble, Envelope, TreatmentSampler, TreatmentSpec};

use crate::error::{CliError, CliResult};
use crate::exec::ThreadPool;
use crate::formats::checkpoint::{
    read_checkpoint, read_ensemble, write_checkpoint, write_ensemble, Checkpoint, Provenance,
};
use crate::formats::config::{default_treatment, RunConfig, TreatmentBlock};
use crate::formats::dataset::{import_csv, read_dataset, write_dataset};
use crate::formats::reports::{
    read_bounds, read_treatment_file, write_bounds, write_metric_reports, write_series,
    write_train_log, write_vote_audit, BoundsRecord, FeatureRef,
};

/// Conventional artifact names inside a run directory.
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths {
            dir: dir.to_path_buf(),
        }
    }
    pub fn train_data(&self) -> PathBuf {
        self.dir.join("train.ndjson")
    }
    pub fn val_data(&self) -> PathBuf {
        self.dir.join("val.ndjson")
    }
    pub fn test_data(&self) -> PathBuf {
        self.dir.join("test.ndjson")
    }
    pub fn pilot(&self) -> PathBuf {
        self.dir.join("pilot.ckpt.json")
    }
    pub fn pilot_log(&self) -> PathBuf {
        self.dir.join("pilot.log.jsonl")
    }
    pub fn baseline(&self, b: Baseline) -> PathBuf {
        self.dir.join(format!("baseline-{}.ckpt.json", b.as_str()))
    }
    pub fn baseline_log(&self, b: Baseline) -> PathBuf {
        self.dir.join(format!("baseline-{}.log.jsonl", b.as_str()))
    }
    pub fn star(&self) -> PathBuf {
        self.dir.join("star.ckpt.json")
    }
    pub fn star_log(&self) -> PathBuf {
        self.dir.join("star.log.jsonl")
    }
    pub fn vote_audit(&self) -> PathBuf {
        self.dir.join("vote_audit.json")
    }
    pub fn ensemble(&self) -> PathBuf {
        self.dir.join("ensemble.json")
    }
    pub fn bounds(&self) -> PathBuf {
        self.dir.join("bounds.json")
    }
    pub fn series(&self) -> PathBuf {
        self.dir.join("series.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.json")
    }
}

/// Splits share every fingerprint field except the split tag; the family
/// digest identifies the generation run itself.
pub fn family_digest(fp: &Fingerprint) -> String {
    let mut f = fp.clone();
    f.split = None;
    format!("{:016x}", f.digest())
}

fn require(path: &Path, what: &str) -> CliResult<()> {
    if !path.exists() {
        return Err(CliError::Dependency(format!(
            "{what} not found at {} (run the upstream stage first)",
            path.display()
        )));
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Generate, degrade, split, normalize, and persist a dataset family.
pub fn stage_gen(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    ensure_dir(out)?;
    let paths = RunPaths::new(out);
    let d = &cfg.dataset;
    let total = d.total_samples();
    let raw = match d.system.as_str() {
        "hao" => simulate_hao_with(total, cfg.seed, d.init_noise)?,
        "zheng" => simulate_zheng(total, cfg.seed)?,
        "mm" => simulate_mm(d.n_nodes, total, cfg.seed)?,
        other => {
            return Err(CliError::Schema(format!(
                "unknown dataset system {other:?} (expected hao, zheng, or mm)"
            )))
        }
    };
    let mut rng = Rng::substream(cfg.seed, "gen.degrade", 0);
    let degraded = degrade(&raw, d.missing_rate, d.obs_noise, &mut rng)?;
    let (train_d, val_d, test_d) =
        split_dataset(&degraded, (d.n_train, d.n_val, d.n_test), cfg.seed)?;
    write_dataset(&train_d, &paths.train_data())?;
    write_dataset(&val_d, &paths.val_data())?;
    write_dataset(&test_d, &paths.test_data())?;
    println!(
        "gen: {} samples ({}/{}/{}) of {:?} -> {} (digest {})",
        total,
        d.n_train,
        d.n_val,
        d.n_test,
        d.system,
        out.display(),
        family_digest(&train_d.fingerprint)
    );
    Ok(())
}

/// Import a long-format CSV, split, normalize, and persist.
pub fn stage_import(cfg: &RunConfig, csv: &Path, out: &Path, input_fraction: f64) -> CliResult<()> {
    ensure_dir(out)?;
    let paths = RunPaths::new(out);
    let raw = import_csv(csv, input_fraction)?;
    let n = raw.samples.len();
    let n_val = (n / 8).max(1);
    let n_test = (n / 8).max(1);
    let n_train = n - n_val - n_test;
    let (train_d, val_d, test_d) = split_dataset(&raw, (n_train, n_val, n_test), cfg.seed)?;
    write_dataset(&train_d, &paths.train_data())?;
    write_dataset(&val_d, &paths.val_data())?;
    write_dataset(&test_d, &paths.test_data())?;
    println!(
        "import: {n} subjects ({n_train}/{n_val}/{n_test}) from {}",
        csv.display()
    );
    Ok(())
}

fn load_split(paths: &RunPaths, which: &str) -> CliResult<Dataset> {
    let p = match which {
        "train" => paths.train_data(),
        "val" => paths.val_data(),
        _ => paths.test_data(),
    };
    require(&p, &format!("{which} dataset"))?;
    read_dataset(&p)
}

fn provenance_for_train(
    stage: &str,
    cfg: &RunConfig,
    train_d: &Dataset,
    parent: Option<String>,
    out: &TrainOutcome,
) -> Provenance {
    let tail_len = (out.log.len() / 4).max(3).min(out.log.len().max(1));
    let val_tail: Vec<f64> = out
        .log
        .iter()
        .rev()
        .take(tail_len)
        .map(|r| r.l_data)
        .collect();
    Provenance {
        stage: stage.into(),
        root_seed: cfg.seed,
        dataset_digest: family_digest(&train_d.fingerprint),
        parent,
        val_seed: out.val_seed,
        val_loss: out.val_loss,
        val_tail,
    }
}

/// Train the pilot model (or a baseline ablation).
pub fn stage_train(cfg: &RunConfig, data_dir: &Path, out: &Path, baseline: Option<Baseline>) -> CliResult<()> {
    ensure_dir(out)?;
    let data_paths = RunPaths::new(data_dir);
    let out_paths = RunPaths::new(out);
    let train_d = load_split(&data_paths, "train")?;
    let val_d = load_split(&data_paths, "val")?;
    let model_cfg = cfg.model.build(&train_d);
    let train_cfg = cfg.trainer.build();
    let stream = baseline.map(|b| b.as_str()).unwrap_or("pilot");
    let mut rng = Rng::substream(cfg.seed, stream, 0);
    let outcome = match baseline {
        Some(b) => train_baseline(b, model_cfg.clone(), &train_d, &val_d, &train_cfg, &mut rng)?,
        None => {
            let mask = CausalMask::init(model_cfg.dim(), model_cfg.confounder_out);
            let model = CtpModel::init(model_cfg.clone(), &mut rng)?;
            train(model, &train_d, &val_d, &mask, &train_cfg, &mut rng)?
        }
    };
    let (ckpt_path, log_path, stage_name) = match baseline {
        Some(b) => (
            out_paths.baseline(b),
            out_paths.baseline_log(b),
            format!("baseline-{}", b.as_str()),
        ),
        None => (out_paths.pilot(), out_paths.pilot_log(), "pilot".into()),
    };
    write_train_log(&outcome.log, &log_path)?;
    let mask = CausalMask::init(outcome.model.cfg.dim(), outcome.model.cfg.confounder_out);
    let prov = provenance_for_train(&stage_name, cfg, &train_d, None, &outcome);
    println!(
        "{stage_name}: val loss {:.4}, dag penalty {:.3e} -> {}",
        outcome.val_loss,
        outcome.final_dag,
        ckpt_path.display()
    );
    write_checkpoint(
        &Checkpoint {
            model: outcome.model,
            mask,
            provenance: prov,
        },
        &ckpt_path,
    )
}

/// Vote a causal mask into certainty and retrain the reference model.
pub fn stage_identify(cfg: &RunConfig, data_dir: &Path, pilot_path: &Path, out: &Path, workers: usize) -> CliResult<()> {
    ensure_dir(out)?;
    let data_paths = RunPaths::new(data_dir);
    let out_paths = RunPaths::new(out);
    let train_d = load_split(&data_paths, "train")?;
    let val_d = load_split(&data_paths, "val")?;
    require(pilot_path, "pilot checkpoint")?;
    let pilot = read_checkpoint(pilot_path)?;
    let expected = family_digest(&train_d.fingerprint);
    if pilot.provenance.dataset_digest != expected {
        return Err(CliError::Stale(format!(
            "pilot checkpoint was trained on dataset {} but {} has digest {expected}",
            pilot.provenance.dataset_digest,
            data_dir.display()
        )));
    }
    let model_cfg = cfg.model.build(&train_d);
    let train_cfg = cfg.trainer.build();
    let vote = cfg.vote.build(&pilot.provenance.val_tail)?;
    let pool = ThreadPool::new(workers);
    let seed = Rng::substream(cfg.seed, "identify", 0).next_u64();
    let outcome = identify(&train_d, &val_d, &model_cfg, &train_cfg, &vote, seed, &pool)?;
    write_vote_audit(&outcome.audit, model_cfg.dim(), &out_paths.vote_audit())?;

    let retrain_seed = Rng::substream(cfg.seed, "retrain", 0).next_u64();
    let star = mask_retrain(&train_d, &val_d, &outcome.mask, &model_cfg, &train_cfg, retrain_seed)?;
    write_train_log(&star.log, &out_paths.star_log())?;
    let prov = provenance_for_train(
        "star",
        cfg,
        &train_d,
        Some(pilot.provenance.digest()),
        &star,
    );
    println!(
        "identify: {} rounds, mask decided; star val loss {:.4} -> {}",
        outcome.audit.rounds.len(),
        star.val_loss,
        out_paths.star().display()
    );
    write_checkpoint(
        &Checkpoint {
            model: star.model,
            mask: outcome.mask,
            provenance: prov,
        },
        &out_paths.star(),
    )
}

/// Train the min-max ensemble from the reference model.
pub fn stage_ensemble(cfg: &RunConfig, data_dir: &Path, star_path: &Path, out: &Path, workers: usize) -> CliResult<()> {
    ensure_dir(out)?;
    let data_paths = RunPaths::new(data_dir);
    let out_paths = RunPaths::new(out);
    let train_d = load_split(&data_paths, "train")?;
    require(star_path, "reference checkpoint")?;
    let star = read_checkpoint(star_path)?;
    let expected = family_digest(&train_d.fingerprint);
    if star.provenance.dataset_digest != expected {
        return Err(CliError::Stale(format!(
            "reference checkpoint dataset digest {} != {expected}",
            star.provenance.dataset_digest
        )));
    }
    let treatment = resolve_treatment_block(cfg, &train_d)?;
    let feature = feature_index(&train_d, &FeatureRef::Name(treatment.feature.clone()))?;
    let sampler = TreatmentSampler::from_dataset(&train_d, feature)?;
    let ens_cfg = cfg.ensemble.build();
    let pool = ThreadPool::new(workers);
    let seed = Rng::substream(cfg.seed, "ensemble", 0).next_u64();
    let members = train_ensemble(&train_d, &star.model, &star.mask, &ens_cfg, &sampler, seed, &pool)?;
    let prov = Provenance {
        stage: "ensemble".into(),
        root_seed: cfg.seed,
        dataset_digest: expected,
        parent: Some(star.provenance.digest()),
        val_seed: star.provenance.val_seed,
        val_loss: star.provenance.val_loss,
        val_tail: Vec::new(),
    };
    println!(
        "ensemble: {} members trained -> {}",
        members.len(),
        out_paths.ensemble().display()
    );
    write_ensemble(&members, &star.mask, &prov, &out_paths.ensemble())
}

fn resolve_treatment_block(cfg: &RunConfig, data: &Dataset) -> CliResult<TreatmentBlock> {
    if let Some(t) = &cfg.treatment {
        return Ok(t.clone());
    }
    default_treatment(&data.fingerprint.system).ok_or_else(|| {
        CliError::Schema(format!(
            "no treatment block configured and no default exists for system {:?}",
            data.fingerprint.system
        ))
    })
}

fn feature_index(data: &Dataset, fref: &FeatureRef) -> CliResult<usize> {
    match fref {
        FeatureRef::Index(i) => {
            if *i < data.n_features() {
                Ok(*i)
            } else {
                Err(CliError::Schema(format!(
                    "feature index {i} out of range ({} observed)",
                    data.n_features()
                )))
            }
        }
        FeatureRef::Name(n) => data
            .features
            .iter()
            .position(|f| &f.name == n)
            .ok_or_else(|| CliError::Schema(format!("unknown feature name {n:?}"))),
    }
}

/// Build the normalized treatment spec from a block and the dataset stats.
pub fn treatment_from_block(block: &TreatmentBlock, data: &Dataset) -> CliResult<TreatmentSpec> {
    let feature = feature_index(data, &FeatureRef::Name(block.feature.clone()))?;
    let stats = data
        .norm
        .as_ref()
        .ok_or_else(|| CliError::Schema("dataset is not normalized".into()))?;
    let spec = TreatmentSpec::from_raw_value(
        feature,
        block.value,
        stats,
        block.time,
        block.observe_from,
        block.observe_to,
        block.n_points,
    );
    spec.validate(data)?;
    Ok(spec)
}

/// Apply the configured do-intervention to every test sample and persist
/// the per-sample bounds plus a plot series for the first sample.
pub fn stage_treat(
    cfg: &RunConfig,
    data_dir: &Path,
    ensemble_path: &Path,
    treatment_file: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    ensure_dir(out)?;
    let data_paths = RunPaths::new(data_dir);
    let out_paths = RunPaths::new(out);
    let test_d = load_split(&data_paths, "test")?;
    require(ensemble_path, "ensemble")?;
    let ens = read_ensemble(ensemble_path)?;
    let expected = family_digest(&test_d.fingerprint);
    if ens.provenance.dataset_digest != expected {
        return Err(CliError::Stale(format!(
            "ensemble dataset digest {} != {expected}",
            ens.provenance.dataset_digest
        )));
    }
    let block = match treatment_file {
        Some(p) => {
            let t = read_treatment_file(p)?;
            let name = match t.feature {
                FeatureRef::Name(n) => n,
                FeatureRef::Index(i) => test_d.features[i].name.clone(),
            };
            TreatmentBlock {
                feature: name,
                time: t.time,
                value: t.value,
                observe_from: t.observe_from,
                observe_to: t.observe_to,
                n_points: t.num_points,
            }
        }
        None => resolve_treatment_block(cfg, &test_d)?,
    };
    let spec = treatment_from_block(&block, &test_d)?;
    let stats = test_d.norm.as_ref().expect("normalized by treatment_from_block");

    let mut records = Vec::with_capacity(test_d.samples.len());
    let mut first_series = None;
    for (si, sample) in test_d.samples.iter().enumerate() {
        let env = bounds(&ens.members, &ens.mask, &test_d, si, &spec)?;
        let oracle_norm = match test_d.system.is_some() && sample.oracle_init.is_some() {
            true => Some(oracle_treated_series(&test_d, si, &spec)?),
            false => None,
        };
        if si == 0 {
            first_series = Some(assemble_series(&test_d, &env, oracle_norm.as_deref())?);
        }
        let raw = env.denormalized(stats);
        let denorm = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .map(|(f, v)| v * stats.std[f] + stats.mean[f])
                        .collect()
                })
                .collect()
        };
        records.push(BoundsRecord {
            sample_id: sample.id,
            times: raw.times,
            lo: raw.lo,
            mean: raw.mean,
            hi: raw.hi,
            oracle: oracle_norm.map(|o| denorm(&o)),
        });
    }
    let feature_names: Vec<String> = test_d.features.iter().map(|f| f.name.clone()).collect();
    write_bounds(
        &spec,
        &feature_names,
        &records,
        &expected,
        &ens.provenance.digest(),
        &out_paths.bounds(),
    )?;
    if let Some(series) = first_series {
        write_series(&series, &out_paths.series())?;
    }
    println!(
        "treat: {} samples bounded over t in [{}, {}] -> {}",
        records.len(),
        spec.observe_from,
        spec.observe_to,
        out_paths.bounds().display()
    );
    Ok(())
}

/// All metrics for a run directory; writes the metric report file.
pub fn stage_eval(
    cfg: &RunConfig,
    data_dir: &Path,
    ckpt_path: &Path,
    pilot_path: Option<&Path>,
    bounds_path: Option<&Path>,
    out: &Path,
) -> CliResult<()> {
    ensure_dir(out)?;
    let data_paths = RunPaths::new(data_dir);
    let out_paths = RunPaths::new(out);
    let test_d = load_split(&data_paths, "test")?;
    require(ckpt_path, "checkpoint")?;
    let ckpt = read_checkpoint(ckpt_path)?;
    let expected = family_digest(&test_d.fingerprint);
    if ckpt.provenance.dataset_digest != expected {
        return Err(CliError::Stale(format!(
            "checkpoint dataset digest {} != {expected}",
            ckpt.provenance.dataset_digest
        )));
    }

    let mut reports = trajectory_metrics(
        core::slice::from_ref(&ckpt.model),
        &ckpt.mask,
        &test_d,
    )?;

    if let Some(adj) = &test_d.oracle_adj {
        let dim = ckpt.mask.dim;
        let mask_scores: Vec<f64> = ckpt.mask.m.iter().map(|&v| v as f64).collect();
        let cm = causal_metrics(&mask_scores, adj, dim, 0.5)?;
        reports.push(MetricReport {
            name: "causal_accuracy".into(),
            split: "mask".into(),
            value: cm.accuracy,
        });
        reports.push(MetricReport {
            name: "causal_f1".into(),
            split: "mask".into(),
            value: cm.f1,
        });
        if let Some(pp) = pilot_path {
            require(pp, "pilot checkpoint")?;
            let pilot = read_checkpoint(pp)?;
            let d = pilot.model.connectivity(&pilot.mask);
            let cm = causal_metrics(&d.values, adj, dim, cfg.vote.connectivity_threshold)?;
            for (name, value) in [
                ("causal_accuracy", cm.accuracy),
                ("causal_f1", cm.f1),
                ("causal_auc", cm.auc),
            ] {
                reports.push(MetricReport {
                    name: name.into(),
                    split: "raw".into(),
                    value,
                });
            }
        }
    }

    // The returned loss of a run is its plain validation data loss; the
    // frozen noise stream makes it exactly reproducible here.
    let val_d = load_split(&data_paths, "val")?;
    let recomputed =
        validation_data_loss(&ckpt.model, &val_d, &ckpt.mask, ckpt.provenance.val_seed)?;
    reports.push(MetricReport {
        name: "val_loss_delta".into(),
        split: "val".into(),
        value: (recomputed - ckpt.provenance.val_loss).abs(),
    });

    if let Some(bp) = bounds_path {
        require(bp, "bounds file")?;
        let bf = read_bounds(bp)?;
        if bf.dataset != expected {
            return Err(CliError::Stale(format!(
                "bounds dataset digest {} != {expected}",
                bf.dataset
            )));
        }
        let stats = test_d
            .norm
            .as_ref()
            .ok_or_else(|| CliError::Schema("dataset is not normalized".into()))?;
        let normalize_rows = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            rows.iter()
                .map(|r| {
                    r.iter()
                        .enumerate()
                        .map(|(f, v)| (v - stats.mean[f]) / stats.std[f])
                        .collect()
                })
                .collect()
        };
        let mut pred_all = Vec::new();
        let mut oracle_all = Vec::new();
        let mut times_all = Vec::new();
        let mut included = 0usize;
        let mut total = 0usize;
        for rec in &bf.samples {
            let Some(oracle) = &rec.oracle else { continue };
            let pred = normalize_rows(&rec.mean);
            let orac = normalize_rows(oracle);
            let env = Envelope {
                times: rec.times.clone(),
                lo: normalize_rows(&rec.min),
                mean: pred.clone(),
                hi: normalize_rows(&rec.max),
            };
            let rate = inclusion_rate(&env, &orac)?;
            let cells = orac.len() * orac.first().map(Vec::len).unwrap_or(0);
            included += (rate * cells as f64).round() as usize;
            total += cells;
            times_all.extend(rec.times.iter().copied());
            pred_all.extend(pred);
            oracle_all.extend(orac);
        }
        if total > 0 {
            let tm = treatment_metrics(&times_all, &pred_all, &oracle_all)?;
            for (split, value) in [("full", tm.full), ("near", tm.near), ("far", tm.far)] {
                reports.push(MetricReport {
                    name: "treatment_rmse".into(),
                    split: split.into(),
                    value,
                });
            }
            reports.push(MetricReport {
                name: "inclusion_rate".into(),
                split: "full".into(),
                value: included as f64 / total as f64,
            });
        }
    }

    write_metric_reports(
        &reports,
        &expected,
        &ckpt.provenance.digest(),
        cfg.seed,
        &out_paths.metrics(),
    )?;
    for r in &reports {
        println!("eval: {:<18} {:<12} {:.6}", r.name, r.split, r.value);
    }
    Ok(())
}

/// Aggregate metric files into one table on stdout.
pub fn stage_report(metric_files: &[PathBuf]) -> CliResult<()> {
    println!("{:<20} {:<12} {:>12}  source", "metric", "split", "value");
    for path in metric_files {
        require(path, "metric report")?;
        let rows = crate::formats::reports::read_metric_reports(path)?;
        for r in rows {
            println!(
                "{:<20} {:<12} {:>12.6}  {}",
                r.metric,
                r.split,
                r.value,
                path.display()
            );
        }
    }
    Ok(())
}

/// Reconstruct treatment splits once the near/far boundary is needed
/// downstream of the bounds file.
pub fn bounds_treatment_times(from: f64, to: f64, n: usize) -> Vec<f64> {
    TreatmentSpec {
        feature: 0,
        t_start: from,
        value: 0.0,
        observe_from: from,
        observe_to: to,
        n_points: n,
    }
    .observation_times()
}

/// Normalize-then-evaluate entry used by tests and dataset tooling.
pub fn normalize_standalone(data: &Dataset) -> CliResult<Dataset> {
    let (out, _) = normalize(data)?;
    Ok(out)
}

/// Shared access for integration tests: compute trajectory metrics for an
/// ensemble's mean prediction.
pub fn ensemble_trajectory_metrics(
    members: &[CtpModel],
    mask: &CausalMask,
    data: &Dataset,
) -> CliResult<Vec<MetricReport>> {
    Ok(eval::trajectory_metrics(members, mask, data)?)
}
