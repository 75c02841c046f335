//! Metrics: trajectory RMSE/AUC by segment, causal-discovery scores,
//! treatment-effect errors against the clamped ground-truth system, bound
//! inclusion rates, and plot-ready series assembly.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::dynsim::{rk4_integrate, truth_substeps, Dataset, DoClamp};
use crate::error::CtpError;
use crate::math;
use crate::model::{BatchData, CausalMask, CtpModel, ForwardPass, InitMode};
use crate::rng::Rng;
use crate::treatment::{Envelope, TreatmentSpec};
use crate::Result;

/// One metric value with its segment tag.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub name: String,
    pub split: String,
    pub value: f64,
}

impl MetricReport {
    fn new(name: &str, split: &str, value: f64) -> Self {
        MetricReport {
            name: String::from(name),
            split: String::from(split),
            value,
        }
    }
}

/// Mean predictions of a model set at every visit of every sample.
///
/// Returns, per sample, a `visits x K` matrix of mapped observed
/// predictions averaged over the given models.
pub fn mean_predictions(
    models: &[CtpModel],
    mask: &CausalMask,
    data: &Dataset,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if models.is_empty() {
        return Err(CtpError::Input(String::from("no models to evaluate")));
    }
    let k = data.n_features();
    let mut out: Vec<Vec<Vec<f64>>> = data
        .samples
        .iter()
        .map(|s| vec![vec![0.0; k]; s.visits.len()])
        .collect();
    let scale = 1.0 / models.len() as f64;
    for model in models {
        for group in data.shape_groups() {
            // Chunked to keep tape sizes modest on big eval splits.
            for chunk in group.chunks(32) {
                let batch = BatchData::new(&model.cfg, data, chunk)?;
                let mut fp = ForwardPass::new(model);
                let (mu, sigma) = fp.encode(&batch)?;
                let mut rng = Rng::substream(0, "eval.traj", 0);
                let v0 = fp.initial_state(mu, sigma, InitMode::Mean, &mut rng);
                let states = fp.solve(v0, batch.t0(), &batch.times, mask, &mut rng, None)?;
                for (j, &node) in states.iter().enumerate() {
                    let buf = fp.tape.value(node);
                    for (bi, &si) in chunk.iter().enumerate() {
                        let mapped = model.map_state(
                            &buf.data[bi * buf.cols..bi * buf.cols + buf.cols],
                        );
                        for f in 0..k {
                            out[si][j][f] += scale * mapped[f];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// RMSE over non-missing continuous entries and macro-averaged AUC over
/// discrete features, each reported for the combined, reconstruction, and
/// prediction segments.
pub fn trajectory_metrics(
    models: &[CtpModel],
    mask: &CausalMask,
    data: &Dataset,
) -> Result<Vec<MetricReport>> {
    let preds = mean_predictions(models, mask, data)?;
    let k = data.n_features();
    let cfg = &models[0].cfg;
    let segments = ["combined", "reconstruct", "predict"];
    let mut reports = Vec::new();
    for seg in segments {
        let mut sq = 0.0;
        let mut n = 0usize;
        // per discrete feature: (score, label) pools
        let mut pools: Vec<Vec<(f64, bool)>> = vec![Vec::new(); k];
        for (si, s) in data.samples.iter().enumerate() {
            for (j, v) in s.visits.iter().enumerate() {
                let in_seg = match seg {
                    "reconstruct" => j < s.n_input,
                    "predict" => j >= s.n_input,
                    _ => true,
                };
                if !in_seg {
                    continue;
                }
                for f in 0..k {
                    if v.missing[f] == 1 {
                        continue;
                    }
                    let p = preds[si][j][f];
                    if cfg.discrete[f] {
                        pools[f].push((p, v.values[f] > 0.5));
                    } else {
                        let d = p - v.values[f];
                        sq += d * d;
                        n += 1;
                    }
                }
            }
        }
        if n > 0 {
            reports.push(MetricReport::new("rmse", seg, math::sqrt(sq / n as f64)));
        }
        let aucs: Vec<f64> = pools
            .iter()
            .filter(|pool| pool.iter().any(|(_, l)| *l) && pool.iter().any(|(_, l)| !*l))
            .map(|pool| {
                let pos: Vec<f64> = pool.iter().filter(|(_, l)| *l).map(|(s, _)| *s).collect();
                let neg: Vec<f64> = pool.iter().filter(|(_, l)| !*l).map(|(s, _)| *s).collect();
                rank_auc(&pos, &neg)
            })
            .collect();
        if !aucs.is_empty() {
            // Macro average; omitted entirely when no discrete feature has
            // both classes in the segment.
            let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
            reports.push(MetricReport::new("auc", seg, mean));
        }
    }
    Ok(reports)
}

/// Probability that a random positive outscores a random negative, ties
/// counted half.
pub fn rank_auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut score = 0.0;
    for p in pos {
        for n in neg {
            score += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    score / (pos.len() * neg.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CausalMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub auc: f64,
    pub scored_entries: usize,
}

/// Score an edge matrix against the oracle graph.
///
/// The diagonal and the structurally-forced confounder column are excluded:
/// they are fixed by construction and would inflate the scores. `scores`
/// may be a raw connectivity matrix or a 0/1 mask cast to reals.
pub fn causal_metrics(
    scores: &[f64],
    oracle: &[u8],
    dim: usize,
    threshold: f64,
) -> Result<CausalMetrics> {
    if scores.len() != dim * dim || oracle.len() != dim * dim {
        return Err(CtpError::Input(String::from(
            "causal metrics: shape mismatch",
        )));
    }
    let k = dim - 1;
    let mut tp = 0usize;
    let mut tn = 0usize;
    let mut fp = 0usize;
    let mut fnn = 0usize;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    let mut scored = 0usize;
    for i in 0..dim {
        for j in 0..dim {
            if i == j || (j == k && i < k) {
                continue; // diagonal and forced confounder column
            }
            scored += 1;
            let s = scores[i * dim + j];
            let predicted = s >= threshold;
            let actual = oracle[i * dim + j] != 0;
            match (predicted, actual) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fnn += 1,
            }
            if actual {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
    }
    let accuracy = (tp + tn) as f64 / scored as f64;
    let f1 = if 2 * tp + fp + fnn == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
    };
    Ok(CausalMetrics {
        accuracy,
        f1,
        auc: rank_auc(&pos, &neg),
        scored_entries: scored,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreatmentMetrics {
    pub full: f64,
    pub near: f64,
    pub far: f64,
}

/// RMSE between a predicted and an oracle treated series, split at the
/// arithmetic midpoint of the observation window.
pub fn treatment_metrics(
    times: &[f64],
    predicted: &[Vec<f64>],
    oracle: &[Vec<f64>],
) -> Result<TreatmentMetrics> {
    if times.len() != predicted.len() || times.len() != oracle.len() || times.is_empty() {
        return Err(CtpError::Input(String::from(
            "treatment metrics: misaligned series",
        )));
    }
    let mid = 0.5 * (times[0] + times[times.len() - 1]);
    let mut acc = [(0.0, 0usize); 3]; // full, near, far
    for (ti, &t) in times.iter().enumerate() {
        if predicted[ti].len() != oracle[ti].len() {
            return Err(CtpError::Input(String::from(
                "treatment metrics: feature width mismatch",
            )));
        }
        for (p, o) in predicted[ti].iter().zip(&oracle[ti]) {
            let d = (p - o) * (p - o);
            acc[0].0 += d;
            acc[0].1 += 1;
            let slot = if t <= mid { 1 } else { 2 };
            acc[slot].0 += d;
            acc[slot].1 += 1;
        }
    }
    let rmse = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { math::sqrt(s / n as f64) };
    Ok(TreatmentMetrics {
        full: rmse(acc[0]),
        near: rmse(acc[1]),
        far: rmse(acc[2]),
    })
}

/// Fraction of (feature, time) points where the oracle value lies inside
/// the envelope (inclusive).
pub fn inclusion_rate(env: &Envelope, oracle: &[Vec<f64>]) -> Result<f64> {
    if env.times.len() != oracle.len() {
        return Err(CtpError::Input(String::from(
            "inclusion rate: misaligned series",
        )));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (ti, row) in oracle.iter().enumerate() {
        for (f, &v) in row.iter().enumerate() {
            total += 1;
            if v >= env.lo[ti][f] && v <= env.hi[ti][f] {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return Err(CtpError::Input(String::from("inclusion rate: empty series")));
    }
    Ok(hits as f64 / total as f64)
}

/// Rerun the generating system for one sample under the treatment's clamp
/// and return the observed features at the observation times, normalized
/// with the dataset's statistics.
pub fn oracle_treated_series(
    data: &Dataset,
    sample_idx: usize,
    treatment: &TreatmentSpec,
) -> Result<Vec<Vec<f64>>> {
    oracle_series(data, sample_idx, &treatment.observation_times(), Some(treatment))
}

/// Ground-truth trajectory of one sample at arbitrary times, optionally
/// under a do-intervention, in normalized units.
pub fn oracle_series(
    data: &Dataset,
    sample_idx: usize,
    times: &[f64],
    treatment: Option<&TreatmentSpec>,
) -> Result<Vec<Vec<f64>>> {
    let system = data
        .system
        .as_ref()
        .ok_or_else(|| CtpError::Input(String::from("dataset carries no oracle system")))?;
    let stats = data
        .norm
        .as_ref()
        .ok_or_else(|| CtpError::Input(String::from("dataset is not normalized")))?;
    let sample = &data.samples[sample_idx];
    let init = sample
        .oracle_init
        .as_ref()
        .ok_or_else(|| CtpError::Input(String::from("sample carries no oracle initial state")))?;
    let observed = system.observed_indices();
    let clamp = treatment
        .map(|t| -> Result<DoClamp> {
            t.validate(data)?;
            Ok(DoClamp {
                feature: observed[t.feature],
                value: t.value * stats.std[t.feature] + stats.mean[t.feature],
                t_start: t.t_start,
            })
        })
        .transpose()?;
    let states = rk4_integrate(
        system,
        init,
        system.t0,
        times,
        truth_substeps(system.id),
        clamp,
    )?;
    Ok(states
        .iter()
        .map(|s| {
            observed
                .iter()
                .enumerate()
                .map(|(f, &fi)| (s[fi] - stats.mean[f]) / stats.std[f])
                .collect()
        })
        .collect())
}

/// Plot-ready series in raw units: per feature, the oracle (when
/// available), the point estimate, and the envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTable {
    pub times: Vec<f64>,
    pub features: Vec<String>,
    pub predicted: Vec<Vec<f64>>,
    pub oracle: Option<Vec<Vec<f64>>>,
    pub lo: Option<Vec<Vec<f64>>>,
    pub hi: Option<Vec<Vec<f64>>>,
}

/// Assemble the emission table from a (normalized) envelope plus optional
/// normalized oracle values, converting everything to raw units.
pub fn assemble_series(
    data: &Dataset,
    env: &Envelope,
    oracle_norm: Option<&[Vec<f64>]>,
) -> Result<SeriesTable> {
    let stats = data
        .norm
        .as_ref()
        .ok_or_else(|| CtpError::Input(String::from("dataset is not normalized")))?;
    let raw = env.denormalized(stats);
    let denorm_rows = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .map(|(f, v)| v * stats.std[f] + stats.mean[f])
                    .collect()
            })
            .collect()
    };
    Ok(SeriesTable {
        times: env.times.clone(),
        features: data.features.iter().map(|f| f.name.clone()).collect(),
        predicted: raw.mean,
        oracle: oracle_norm.map(denorm_rows),
        lo: Some(raw.lo),
        hi: Some(raw.hi),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_auc_separable_and_tied() {
        assert_eq!(rank_auc(&[0.9, 0.8], &[0.1]), 1.0);
        assert_eq!(rank_auc(&[0.5], &[0.5]), 0.5);
        assert_eq!(rank_auc(&[0.1], &[0.9]), 0.0);
    }

    #[test]
    fn rank_auc_random_scores_near_half() {
        let mut rng = Rng::new(3);
        let mut aucs = Vec::new();
        for _ in 0..100 {
            let pos: Vec<f64> = (0..25).map(|_| rng.uniform()).collect();
            let neg: Vec<f64> = (0..25).map(|_| rng.uniform()).collect();
            aucs.push(rank_auc(&pos, &neg));
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        assert!((mean - 0.5).abs() < 0.1, "mean auc {mean}");
    }

    #[test]
    fn causal_metrics_perfect_prediction() {
        let dim = 3;
        let oracle = vec![0u8, 1, 0, 0, 0, 0, 1, 0, 0];
        let scores: Vec<f64> = oracle.iter().map(|&v| v as f64).collect();
        let m = causal_metrics(&scores, &oracle, dim, 0.5).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.f1, 1.0);
        // dim^2 - diag - forced column (i<2, j=2): 9 - 3 - 2 = 4
        assert_eq!(m.scored_entries, 4);
    }

    #[test]
    fn causal_metrics_exclude_structural_zeros() {
        let dim = 3;
        // Put junk in the excluded cells; results must not move.
        let oracle = vec![0u8, 1, 1, 0, 0, 1, 1, 0, 0];
        let mut scores = vec![0.0; 9];
        scores[0 * 3 + 1] = 0.7;
        scores[2 * 3 + 0] = 0.9;
        let base = causal_metrics(&scores, &oracle, dim, 1e-4).unwrap();
        scores[0 * 3 + 0] = 5.0; // diagonal
        scores[0 * 3 + 2] = 5.0; // forced confounder column
        scores[1 * 3 + 2] = 5.0;
        let bumped = causal_metrics(&scores, &oracle, dim, 1e-4).unwrap();
        assert_eq!(base, bumped);
    }

    #[test]
    fn treatment_metrics_split_at_midpoint() {
        let times = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        let oracle: Vec<Vec<f64>> = times.iter().map(|_| vec![0.0, 0.0]).collect();
        let mut pred = oracle.clone();
        // identical series: zero everywhere
        let m = treatment_metrics(&times, &pred, &oracle).unwrap();
        assert_eq!((m.full, m.near, m.far), (0.0, 0.0, 0.0));
        // differ only after the midpoint (t = 2): near stays zero
        pred[3] = vec![1.0, 1.0];
        pred[4] = vec![1.0, 1.0];
        let m = treatment_metrics(&times, &pred, &oracle).unwrap();
        assert_eq!(m.near, 0.0);
        assert!(m.far > 0.0 && m.full > 0.0);
    }

    #[test]
    fn inclusion_rate_wide_and_degenerate() {
        let env = Envelope {
            times: vec![0.0, 1.0],
            lo: vec![vec![-1e12, -1e12], vec![-1e12, -1e12]],
            mean: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            hi: vec![vec![1e12, 1e12], vec![1e12, 1e12]],
        };
        let oracle = vec![vec![3.0, -7.0], vec![100.0, 0.4]];
        assert_eq!(inclusion_rate(&env, &oracle).unwrap(), 1.0);

        let tight = Envelope {
            times: vec![0.0, 1.0],
            lo: vec![vec![5.0, 5.0], vec![5.0, 5.0]],
            mean: vec![vec![5.0, 5.0], vec![5.0, 5.0]],
            hi: vec![vec![5.0, 5.0], vec![5.0, 5.0]],
        };
        assert_eq!(inclusion_rate(&tight, &oracle).unwrap(), 0.0);
    }

    #[test]
    fn inclusion_rate_monotone_under_widening() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let times: Vec<f64> = (0..4).map(|i| i as f64).collect();
            let lo: Vec<Vec<f64>> = times
                .iter()
                .map(|_| (0..3).map(|_| rng.normal()).collect())
                .collect();
            let hi: Vec<Vec<f64>> = lo
                .iter()
                .map(|r| r.iter().map(|v| v + rng.uniform()).collect())
                .collect();
            let wider_lo: Vec<Vec<f64>> = lo
                .iter()
                .map(|r| r.iter().map(|v| v - rng.uniform()).collect())
                .collect();
            let wider_hi: Vec<Vec<f64>> = hi
                .iter()
                .map(|r| r.iter().map(|v| v + rng.uniform()).collect())
                .collect();
            let oracle: Vec<Vec<f64>> = times
                .iter()
                .map(|_| (0..3).map(|_| rng.normal()).collect())
                .collect();
            let narrow = Envelope {
                times: times.clone(),
                lo: lo.clone(),
                mean: lo.clone(),
                hi: hi.clone(),
            };
            let wide = Envelope {
                times: times.clone(),
                lo: wider_lo,
                mean: lo,
                hi: wider_hi,
            };
            let a = inclusion_rate(&narrow, &oracle).unwrap();
            let b = inclusion_rate(&wide, &oracle).unwrap();
            assert!(b >= a, "widening decreased the rate: {a} -> {b}");
        }
    }
}
