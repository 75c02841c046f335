//! Longitudinal sample containers and dataset-level transforms.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CtpError;
use crate::rng::Rng;
use crate::Result;

use super::systems::OdeSystemSpec;

/// One visit: timestamp, observed values, missingness flags (1 = missing).
#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub t: f64,
    pub values: Vec<f64>,
    pub missing: Vec<u8>,
}

/// One subject's irregular visit sequence.
///
/// The first `n_input` visits are encoder input and reconstruction targets;
/// the remaining `n_label` are prediction-only targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub id: u64,
    pub visits: Vec<Visit>,
    pub n_input: usize,
    pub n_label: usize,
    /// Full generated state (including hidden features) at the initial time;
    /// present only for simulated data, never fed to models.
    pub oracle_init: Option<Vec<f64>>,
}

impl TrajectorySample {
    pub fn validate(&self) -> Result<()> {
        if self.n_input + self.n_label != self.visits.len() {
            return Err(CtpError::Input(format!(
                "sample {}: split {}+{} != {} visits",
                self.id,
                self.n_input,
                self.n_label,
                self.visits.len()
            )));
        }
        for w in self.visits.windows(2) {
            if w[1].t <= w[0].t {
                return Err(CtpError::Input(format!(
                    "sample {}: visit times not strictly increasing",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn times(&self) -> Vec<f64> {
        self.visits.iter().map(|v| v.t).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMeta {
    pub name: String,
    pub discrete: bool,
}

/// Per-feature standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Generator provenance carried by every dataset and checked down the
/// pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub system: String,
    pub seed: u64,
    pub n_samples: usize,
    pub init_noise: f64,
    pub obs_noise: f64,
    pub missing_rate: f64,
    pub split: Option<String>,
}

impl Fingerprint {
    /// Stable digest of the generator configuration.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        eat(self.system.as_bytes());
        eat(&self.seed.to_le_bytes());
        eat(&(self.n_samples as u64).to_le_bytes());
        eat(&self.init_noise.to_bits().to_le_bytes());
        eat(&self.obs_noise.to_bits().to_le_bytes());
        eat(&self.missing_rate.to_bits().to_le_bytes());
        if let Some(s) = &self.split {
            eat(s.as_bytes());
        }
        h
    }
}

/// A set of trajectory samples plus everything needed to interpret them:
/// feature metadata, normalization statistics, the oracle causal graph
/// restricted to observed features (plus the hidden-confounder slot), and
/// the generator spec for counterfactual reruns.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<TrajectorySample>,
    pub features: Vec<FeatureMeta>,
    pub norm: Option<NormStats>,
    /// `(K+1) x (K+1)` row-major 0/1 adjacency; row `K` is the confounder.
    pub oracle_adj: Option<Vec<u8>>,
    pub system: Option<OdeSystemSpec>,
    pub fingerprint: Fingerprint,
    /// Typical inter-visit interval; scales the time channel fed to encoders.
    pub time_scale: f64,
}

impl Dataset {
    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    /// Latent state dimension: observed features plus the confounder slot.
    pub fn dim(&self) -> usize {
        self.features.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            s.validate()?;
            for v in &s.visits {
                if v.values.len() != self.features.len() || v.missing.len() != self.features.len()
                {
                    return Err(CtpError::Input(format!(
                        "sample {}: value width mismatch",
                        s.id
                    )));
                }
            }
        }
        if let Some(adj) = &self.oracle_adj {
            let d = self.dim();
            if adj.len() != d * d {
                return Err(CtpError::Input(String::from("oracle adjacency shape")));
            }
        }
        Ok(())
    }

    /// Per-feature mean/std over non-missing entries.
    pub fn population_stats(&self) -> Result<NormStats> {
        let k = self.n_features();
        let mut sum = vec![0.0; k];
        let mut sumsq = vec![0.0; k];
        let mut count = vec![0usize; k];
        for s in &self.samples {
            for v in &s.visits {
                for f in 0..k {
                    if v.missing[f] == 0 {
                        sum[f] += v.values[f];
                        sumsq[f] += v.values[f] * v.values[f];
                        count[f] += 1;
                    }
                }
            }
        }
        let mut mean = vec![0.0; k];
        let mut std = vec![0.0; k];
        for f in 0..k {
            if count[f] < 2 {
                return Err(CtpError::Input(format!(
                    "feature {} has fewer than 2 non-missing observations",
                    self.features[f].name
                )));
            }
            mean[f] = sum[f] / count[f] as f64;
            let var = (sumsq[f] / count[f] as f64 - mean[f] * mean[f]).max(0.0);
            std[f] = crate::math::sqrt(var);
        }
        Ok(NormStats { mean, std })
    }

    /// Apply standardization in place with the given stats.
    /// Discrete features are left untouched.
    pub fn apply_norm(&mut self, stats: &NormStats) -> Result<()> {
        for (f, meta) in self.features.iter().enumerate() {
            if meta.discrete {
                continue;
            }
            if stats.std[f] < 1e-12 {
                return Err(CtpError::DegenerateFeature(meta.name.clone()));
            }
        }
        for s in &mut self.samples {
            for v in &mut s.visits {
                for (f, meta) in self.features.iter().enumerate() {
                    if !meta.discrete {
                        v.values[f] = (v.values[f] - stats.mean[f]) / stats.std[f];
                    }
                }
            }
        }
        self.norm = Some(stats.clone());
        Ok(())
    }

    /// Invert standardization, restoring raw units.
    pub fn denormalize(&mut self) {
        if let Some(stats) = self.norm.take() {
            for s in &mut self.samples {
                for v in &mut s.visits {
                    for (f, meta) in self.features.iter().enumerate() {
                        if !meta.discrete {
                            v.values[f] = v.values[f] * stats.std[f] + stats.mean[f];
                        }
                    }
                }
            }
        }
    }

    /// Group sample indices by (visit-times, split) signature so that each
    /// group can be processed as one batch with shared evaluation times.
    pub fn shape_groups(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<(Vec<u64>, usize, Vec<usize>)> = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            let key: Vec<u64> = s.visits.iter().map(|v| v.t.to_bits()).collect();
            match groups
                .iter_mut()
                .find(|(k, n, _)| *k == key && *n == s.n_input)
            {
                Some((_, _, idxs)) => idxs.push(i),
                None => groups.push((key, s.n_input, vec![i])),
            }
        }
        groups.into_iter().map(|(_, _, idxs)| idxs).collect()
    }
}

/// Flag observations missing at the given rate and perturb the survivors
/// with Gaussian noise scaled by each feature's population std.
pub fn degrade(
    dataset: &Dataset,
    missing_rate: f64,
    noise_std: f64,
    rng: &mut Rng,
) -> Result<Dataset> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(CtpError::Input(format!(
            "missing_rate {missing_rate} outside [0, 1)"
        )));
    }
    if noise_std < 0.0 {
        return Err(CtpError::Input(String::from("noise_std must be >= 0")));
    }
    let mut out = dataset.clone();
    let pop = if noise_std > 0.0 {
        Some(dataset.population_stats()?)
    } else {
        None
    };
    for s in &mut out.samples {
        for v in &mut s.visits {
            for f in 0..dataset.features.len() {
                if v.missing[f] != 0 {
                    continue;
                }
                if missing_rate > 0.0 && rng.uniform() < missing_rate {
                    v.missing[f] = 1;
                    v.values[f] = 0.0;
                    continue;
                }
                if let Some(pop) = &pop {
                    if !dataset.features[f].discrete {
                        v.values[f] += rng.normal() * noise_std * pop.std[f];
                    }
                }
            }
        }
    }
    out.fingerprint.obs_noise = noise_std;
    out.fingerprint.missing_rate = missing_rate;
    Ok(out)
}

/// Standardize continuous features to zero mean, unit variance over
/// non-missing entries; returns the stats used.
pub fn normalize(dataset: &Dataset) -> Result<(Dataset, NormStats)> {
    let stats = dataset.population_stats()?;
    let mut out = dataset.clone();
    out.apply_norm(&stats)?;
    Ok((out, stats))
}

/// Random disjoint train/val/test split. Normalization statistics are
/// computed on the training subset only and applied to all three.
pub fn split_dataset(
    dataset: &Dataset,
    sizes: (usize, usize, usize),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (ntr, nva, nte) = sizes;
    if ntr + nva + nte > dataset.samples.len() {
        return Err(CtpError::Input(format!(
            "split sizes {}+{}+{} exceed {} samples",
            ntr,
            nva,
            nte,
            dataset.samples.len()
        )));
    }
    if dataset.norm.is_some() {
        return Err(CtpError::Input(String::from(
            "split_dataset expects un-normalized data",
        )));
    }
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    let mut rng = Rng::substream(seed, "dynsim.split", 0);
    rng.shuffle(&mut order);

    let subset = |idxs: &[usize], tag: &str| -> Dataset {
        let mut d = Dataset {
            samples: idxs.iter().map(|&i| dataset.samples[i].clone()).collect(),
            features: dataset.features.clone(),
            norm: None,
            oracle_adj: dataset.oracle_adj.clone(),
            system: dataset.system.clone(),
            fingerprint: dataset.fingerprint.clone(),
            time_scale: dataset.time_scale,
        };
        d.fingerprint.split = Some(String::from(tag));
        d
    };
    let mut train = subset(&order[..ntr], "train");
    let mut val = subset(&order[ntr..ntr + nva], "val");
    let mut test = subset(&order[ntr + nva..ntr + nva + nte], "test");

    let stats = train.population_stats()?;
    train.apply_norm(&stats)?;
    val.apply_norm(&stats)?;
    test.apply_norm(&stats)?;
    Ok((train, val, test))
}
