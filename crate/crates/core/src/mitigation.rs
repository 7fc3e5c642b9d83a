//! Training-time memorization mitigation comparators.
//!
//! Two mechanisms are provided as hooks for the trainer: random word
//! addition, which inserts uniformly drawn vocabulary tokens into captions
//! before they are embedded, and threshold filtering, which estimates a
//! single-draw denoising-strength gap per sample and skips or re-embeds the
//! samples whose estimate exceeds a threshold.

use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::diffusion::{q_sample, NoisePredictor, NoiseSchedule};
use crate::linalg::norm2;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MitigationKind {
    #[default]
    None,
    Rwa,
    Threshold,
}

/// What to do with samples flagged by the threshold filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdAction {
    /// Drop flagged samples from the gradient batch.
    #[default]
    Skip,
    /// Re-embed the flagged samples' captions through random word addition.
    Reembed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MitigationConfig {
    pub kind: MitigationKind,
    /// Tokens inserted per triggered caption.
    pub rwa_insertions: usize,
    /// Probability that a caption is modified at all.
    pub rwa_prob: f64,
    /// Fixed threshold; when absent the threshold is recalibrated from a
    /// clean sample batch every `tau_refresh_every` steps.
    pub tau: Option<f64>,
    pub tau_percentile: f64,
    pub tau_refresh_every: usize,
    pub action: ThresholdAction,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        Self {
            kind: MitigationKind::None,
            rwa_insertions: 2,
            rwa_prob: 1.0,
            tau: None,
            tau_percentile: 0.9,
            tau_refresh_every: 100,
            action: ThresholdAction::Skip,
        }
    }
}

impl MitigationConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            MitigationKind::None => Ok(()),
            MitigationKind::Rwa => {
                if self.rwa_insertions < 1 {
                    return Err(Error::Config {
                        field: "mitigation.rwa_insertions",
                        reason: "must be >= 1".to_string(),
                    });
                }
                if !(0.0..=1.0).contains(&self.rwa_prob) {
                    return Err(Error::Config {
                        field: "mitigation.rwa_prob",
                        reason: "must be in [0, 1]".to_string(),
                    });
                }
                Ok(())
            }
            MitigationKind::Threshold => {
                if let Some(tau) = self.tau {
                    if !(tau > 0.0) {
                        return Err(Error::Config {
                            field: "mitigation.tau",
                            reason: "must be > 0".to_string(),
                        });
                    }
                } else {
                    if !(0.0..=1.0).contains(&self.tau_percentile) {
                        return Err(Error::Config {
                            field: "mitigation.tau_percentile",
                            reason: "must be in [0, 1]".to_string(),
                        });
                    }
                    if self.tau_refresh_every == 0 {
                        return Err(Error::Config {
                            field: "mitigation.tau_refresh_every",
                            reason: "must be >= 1".to_string(),
                        });
                    }
                }
                Ok(())
            }
        }
    }
}

/// Random word addition: with probability `prob`, insert `insertions`
/// uniformly drawn token ids at uniformly drawn positions. The original
/// caption is never modified; its tokens survive in order as a subsequence
/// of the returned caption.
pub fn rwa(
    caption: &[usize],
    vocab_size: usize,
    insertions: usize,
    prob: f64,
    rng: &mut Rng,
) -> Vec<usize> {
    let mut out = caption.to_vec();
    if vocab_size == 0 || !rng.flip(prob) {
        return out;
    }
    for _ in 0..insertions {
        let token = rng.below(vocab_size);
        let pos = rng.below(out.len() + 1);
        out.insert(pos, token);
    }
    out
}

/// One-draw denoising-strength estimate: noise the reference image once and
/// measure the prediction gap between the prompt and the empty prompt.
pub fn single_draw_estimate<M: NoisePredictor + ?Sized>(
    model: &M,
    x_ref: &[f64],
    prompt_emb: &[f64],
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> f64 {
    let t = 1 + rng.below(sched.t_count);
    let eps = rng.normal_vec(x_ref.len());
    let x_t = q_sample(x_ref, t, &eps, sched).expect("matching dims");
    let empty = alloc::vec![0.0; prompt_emb.len()];
    let with_prompt = model.predict(&x_t, t, prompt_emb);
    let without: Vec<f64> = model.predict(&x_t, t, &empty);
    let diff: Vec<f64> = with_prompt
        .iter()
        .zip(&without)
        .map(|(a, b)| a - b)
        .collect();
    norm2(&diff)
}

/// Partition of a batch by the threshold filter, as indices into the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdOutcome {
    pub kept: Vec<usize>,
    pub flagged: Vec<usize>,
    pub estimates: Vec<f64>,
}

/// Flag every sample whose single-draw estimate exceeds `tau`.
///
/// `batch` pairs each sample's reference image with its prompt embedding.
pub fn threshold_filter<M: NoisePredictor + ?Sized>(
    model: &M,
    batch: &[(&[f64], &[f64])],
    sched: &NoiseSchedule,
    tau: f64,
    seed: u64,
) -> ThresholdOutcome {
    let mut rng = Rng::new(seed);
    let mut kept = Vec::new();
    let mut flagged = Vec::new();
    let mut estimates = Vec::with_capacity(batch.len());
    for (i, (x_ref, prompt)) in batch.iter().enumerate() {
        let est = single_draw_estimate(model, x_ref, prompt, sched, &mut rng);
        estimates.push(est);
        if est > tau {
            flagged.push(i);
        } else {
            kept.push(i);
        }
    }
    ThresholdOutcome {
        kept,
        flagged,
        estimates,
    }
}

/// Empirical percentile of single-draw estimates over a calibration batch;
/// the automatic threshold.
pub fn calibrate_tau<M: NoisePredictor + ?Sized>(
    model: &M,
    calibration: &[(&[f64], &[f64])],
    sched: &NoiseSchedule,
    percentile: f64,
    seed: u64,
) -> Result<f64> {
    if calibration.is_empty() {
        return Err(Error::InvalidArgument(
            "tau calibration needs a nonempty batch".to_string(),
        ));
    }
    let outcome = threshold_filter(model, calibration, sched, f64::INFINITY, seed);
    let mut ests = outcome.estimates;
    ests.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((percentile * (ests.len() - 1) as f64) as usize).min(ests.len() - 1);
    Ok(ests[idx])
}
