//! Model checkpoints and ensemble bundles.
//!
//! A checkpoint is a versioned JSON document holding the model config,
//! every weight array at 17 significant digits, the causal mask, and a
//! provenance record linking back through the dataset digest to the root
//! seed.

use std::path::Path;

use serde::Deserialize;

use ctp_core::model::{CausalMask, CtpConfig, CtpModel};
use ctp_core::params::ParamStore;
use ctp_core::tape::Buf;

use super::json::JsonWriter;
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_SCHEMA: &str = "ctp-checkpoint-v1";
pub const ENSEMBLE_SCHEMA: &str = "ctp-ensemble-v1";

/// Provenance chain entry embedded in every trained artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub stage: String,
    pub root_seed: u64,
    pub dataset_digest: String,
    pub parent: Option<String>,
    pub val_seed: u64,
    pub val_loss: f64,
    /// Tail of recorded validation data losses; the identify stage derives
    /// its model-quality threshold from the median.
    pub val_tail: Vec<f64>,
}

impl Provenance {
    pub fn digest(&self) -> String {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(self.stage.as_bytes());
        eat(&self.root_seed.to_le_bytes());
        eat(self.dataset_digest.as_bytes());
        if let Some(p) = &self.parent {
            eat(p.as_bytes());
        }
        eat(&self.val_seed.to_le_bytes());
        format!("{h:016x}")
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: CtpModel,
    pub mask: CausalMask,
    pub provenance: Provenance,
}

fn write_config(w: &mut JsonWriter, cfg: &CtpConfig) {
    w.begin_obj();
    w.key("n_observed").usize(cfg.n_observed);
    w.key("discrete").begin_arr();
    for &d in &cfg.discrete {
        w.bool(d);
    }
    w.end_arr();
    w.key("enc_hidden").usize(cfg.enc_hidden);
    w.key("deriv_hidden").begin_arr();
    for &h in &cfg.deriv_hidden {
        w.usize(h);
    }
    w.end_arr();
    w.key("substeps").usize(cfg.substeps);
    w.key("confounder_out").bool(cfg.confounder_out);
    w.key("gumbel_temperature").f64(cfg.gumbel_temperature);
    w.key("gumbel_hard").bool(cfg.gumbel_hard);
    w.key("kl_weight").f64(cfg.kl_weight);
    w.key("time_scale").f64(cfg.time_scale);
    w.key("linear_derivatives").bool(cfg.linear_derivatives);
    w.key("deriv_init_scale").f64(cfg.deriv_init_scale);
    w.end_obj();
}

fn write_mask(w: &mut JsonWriter, mask: &CausalMask) {
    w.begin_obj();
    w.key("dim").usize(mask.dim);
    w.key("m").u8_slice(&mask.m);
    w.key("undecided").u8_slice(&mask.undecided);
    w.end_obj();
}

fn write_weights(w: &mut JsonWriter, params: &ParamStore) {
    w.begin_arr();
    for (name, buf, trainable) in params.iter() {
        w.begin_obj();
        w.key("name").str(name);
        w.key("rows").usize(buf.rows);
        w.key("cols").usize(buf.cols);
        w.key("trainable").bool(trainable);
        w.key("data").f64_slice(&buf.data);
        w.end_obj();
    }
    w.end_arr();
}

fn write_provenance(w: &mut JsonWriter, p: &Provenance) {
    w.begin_obj();
    w.key("stage").str(&p.stage);
    w.key("root_seed").u64(p.root_seed);
    w.key("dataset_digest").str(&p.dataset_digest);
    match &p.parent {
        Some(x) => w.key("parent").str(x),
        None => w.key("parent").null(),
    };
    w.key("val_seed").u64(p.val_seed);
    w.key("val_loss").f64(p.val_loss);
    w.key("val_tail").f64_slice(&p.val_tail);
    w.key("digest").str(&p.digest());
    w.end_obj();
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: &Path) -> CliResult<()> {
    let mut w = JsonWriter::new();
    w.begin_obj();
    w.key("schema").str(CHECKPOINT_SCHEMA);
    w.key("config");
    write_config(&mut w, &ckpt.model.cfg);
    w.key("mask");
    write_mask(&mut w, &ckpt.mask);
    w.key("weights");
    write_weights(&mut w, &ckpt.model.params);
    w.key("provenance");
    write_provenance(&mut w, &ckpt.provenance);
    w.end_obj();
    std::fs::write(path, w.finish()).map_err(|e| CliError::io(path, e))
}

/// All ensemble members share one config and mask.
pub fn write_ensemble(
    members: &[CtpModel],
    mask: &CausalMask,
    provenance: &Provenance,
    path: &Path,
) -> CliResult<()> {
    let mut w = JsonWriter::new();
    w.begin_obj();
    w.key("schema").str(ENSEMBLE_SCHEMA);
    w.key("config");
    write_config(&mut w, &members[0].cfg);
    w.key("mask");
    write_mask(&mut w, mask);
    w.key("members").begin_arr();
    for m in members {
        w.begin_obj();
        w.key("weights");
        write_weights(&mut w, &m.params);
        w.end_obj();
    }
    w.end_arr();
    w.key("provenance");
    write_provenance(&mut w, provenance);
    w.end_obj();
    std::fs::write(path, w.finish()).map_err(|e| CliError::io(path, e))
}

#[derive(Deserialize)]
struct ConfigDe {
    n_observed: usize,
    discrete: Vec<bool>,
    enc_hidden: usize,
    deriv_hidden: Vec<usize>,
    substeps: usize,
    confounder_out: bool,
    gumbel_temperature: f64,
    gumbel_hard: bool,
    kl_weight: f64,
    time_scale: f64,
    linear_derivatives: bool,
    deriv_init_scale: f64,
}

impl ConfigDe {
    fn build(self) -> CtpConfig {
        let mut cfg = CtpConfig::new(self.n_observed);
        cfg.discrete = self.discrete;
        cfg.enc_hidden = self.enc_hidden;
        cfg.deriv_hidden = self.deriv_hidden;
        cfg.substeps = self.substeps;
        cfg.confounder_out = self.confounder_out;
        cfg.gumbel_temperature = self.gumbel_temperature;
        cfg.gumbel_hard = self.gumbel_hard;
        cfg.kl_weight = self.kl_weight;
        cfg.time_scale = self.time_scale;
        cfg.linear_derivatives = self.linear_derivatives;
        cfg.deriv_init_scale = self.deriv_init_scale;
        cfg
    }
}

#[derive(Deserialize)]
struct MaskDe {
    dim: usize,
    m: Vec<u8>,
    undecided: Vec<u8>,
}

impl MaskDe {
    fn build(self, path: &Path) -> CliResult<CausalMask> {
        if self.m.len() != self.dim * self.dim || self.undecided.len() != self.dim * self.dim {
            return Err(CliError::Schema(format!(
                "{}: mask shape mismatch",
                path.display()
            )));
        }
        Ok(CausalMask {
            dim: self.dim,
            m: self.m,
            undecided: self.undecided,
        })
    }
}

#[derive(Deserialize)]
struct WeightDe {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
    data: Vec<f64>,
}

fn build_params(weights: Vec<WeightDe>, path: &Path) -> CliResult<ParamStore> {
    let mut store = ParamStore::new();
    for w in weights {
        if w.data.len() != w.rows * w.cols {
            return Err(CliError::Schema(format!(
                "{}: weight {} data length mismatch",
                path.display(),
                w.name
            )));
        }
        store.add(&w.name, Buf::from_vec(w.rows, w.cols, w.data), w.trainable);
    }
    Ok(store)
}

#[derive(Deserialize)]
struct ProvenanceDe {
    stage: String,
    root_seed: u64,
    dataset_digest: String,
    parent: Option<String>,
    val_seed: u64,
    val_loss: f64,
    val_tail: Vec<f64>,
    digest: String,
}

impl ProvenanceDe {
    fn build(self, path: &Path) -> CliResult<Provenance> {
        let p = Provenance {
            stage: self.stage,
            root_seed: self.root_seed,
            dataset_digest: self.dataset_digest,
            parent: self.parent,
            val_seed: self.val_seed,
            val_loss: self.val_loss,
            val_tail: self.val_tail,
        };
        if p.digest() != self.digest {
            return Err(CliError::Stale(format!(
                "{}: provenance digest mismatch (recorded {}, computed {})",
                path.display(),
                self.digest,
                p.digest()
            )));
        }
        Ok(p)
    }
}

#[derive(Deserialize)]
struct CheckpointDe {
    schema: String,
    config: ConfigDe,
    mask: MaskDe,
    weights: Vec<WeightDe>,
    provenance: ProvenanceDe,
}

pub fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let de: CheckpointDe = serde_json::from_str(&text)
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    if de.schema != CHECKPOINT_SCHEMA {
        return Err(CliError::Schema(format!(
            "{}: unsupported schema {:?}",
            path.display(),
            de.schema
        )));
    }
    let cfg = de.config.build();
    let params = build_params(de.weights, path)?;
    let model = CtpModel::from_parts(cfg, params)
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    Ok(Checkpoint {
        model,
        mask: de.mask.build(path)?,
        provenance: de.provenance.build(path)?,
    })
}

#[derive(Deserialize)]
struct EnsembleMemberDe {
    weights: Vec<WeightDe>,
}

#[derive(Deserialize)]
struct EnsembleDe {
    schema: String,
    config: ConfigDe,
    mask: MaskDe,
    members: Vec<EnsembleMemberDe>,
    provenance: ProvenanceDe,
}

pub struct EnsembleFile {
    pub members: Vec<CtpModel>,
    pub mask: CausalMask,
    pub provenance: Provenance,
}

pub fn read_ensemble(path: &Path) -> CliResult<EnsembleFile> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let de: EnsembleDe = serde_json::from_str(&text)
        .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
    if de.schema != ENSEMBLE_SCHEMA {
        return Err(CliError::Schema(format!(
            "{}: unsupported schema {:?}",
            path.display(),
            de.schema
        )));
    }
    let cfg = de.config.build();
    let mut members = Vec::new();
    for m in de.members {
        let params = build_params(m.weights, path)?;
        members.push(
            CtpModel::from_parts(cfg.clone(), params)
                .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?,
        );
    }
    Ok(EnsembleFile {
        members,
        mask: de.mask.build(path)?,
        provenance: de.provenance.build(path)?,
    })
}
