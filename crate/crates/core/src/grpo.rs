//! Group-relative policy optimisation signals: advantages, clipped surrogates, KL penalty and
//! training-record export. No parameters are updated here.

use std::io::{BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::trajectory::CandidateSet;

/// Bound applied to log-ratios before exponentiation.
pub const LOG_RATIO_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GrpoError {
    #[error("group of size {0} cannot be normalised (need at least 2)")]
    DegenerateGroup(usize),
    #[error("invalid configuration: {0}")]
    ConfigError(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub std_floor: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            kl_beta: 0.0,
            std_floor: 1e-6,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(GrpoError::ConfigError(format!("clip_epsilon {} not in (0, 1)", self.clip_epsilon)));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(GrpoError::ConfigError(format!("kl_beta {} is negative", self.kl_beta)));
        }
        if !(self.std_floor > 0.0) {
            return Err(GrpoError::ConfigError(format!("std_floor {} must be positive", self.std_floor)));
        }
        Ok(())
    }
}

/// Rewards and per-token log-probabilities for one sampled group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub rewards: Vec<f64>,
    pub logprobs_new: Vec<Vec<f64>>,
    pub logprobs_old: Vec<Vec<f64>>,
    #[serde(default)]
    pub logprobs_ref: Option<Vec<Vec<f64>>>,
}

impl GroupSample {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let g = self.rewards.len();
        if self.logprobs_new.len() != g || self.logprobs_old.len() != g {
            return Err(GrpoError::ConfigError(format!(
                "{g} rewards but {} new / {} old log-prob sequences",
                self.logprobs_new.len(),
                self.logprobs_old.len()
            )));
        }
        if let Some(r) = &self.logprobs_ref {
            if r.len() != g {
                return Err(GrpoError::ConfigError(format!("{g} rewards but {} ref sequences", r.len())));
            }
        }
        for i in 0..g {
            let n = self.logprobs_new[i].len();
            let ref_len = self.logprobs_ref.as_ref().map(|r| r[i].len()).unwrap_or(n);
            if self.logprobs_old[i].len() != n || ref_len != n {
                return Err(GrpoError::ConfigError(format!("sample {i}: token counts differ")));
            }
        }
        Ok(())
    }
}

/// `(r − mean) / max(std, floor)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64], std_floor: f64) -> Result<Vec<f64>, GrpoError> {
    let g = rewards.len();
    if g < 2 {
        return Err(GrpoError::DegenerateGroup(g));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let denom = var.sqrt().max(std_floor);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

fn ratio(lp_new: f64, lp_old: f64) -> f64 {
    (lp_new - lp_old).clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP).exp()
}

fn clipped(rho: f64, advantage: f64, eps: f64) -> f64 {
    (rho * advantage).min(rho.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

pub fn token_surrogate(lp_new: f64, lp_old: f64, advantage: f64, eps: f64) -> f64 {
    clipped(ratio(lp_new, lp_old), advantage, eps)
}

/// k3 estimator of KL(policy ‖ ref) for one token.
pub fn kl_term(lp_policy: f64, lp_ref: f64) -> f64 {
    let d = (lp_ref - lp_policy).clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP);
    (d.exp() - d - 1.0).max(0.0)
}

/// Objective value for one group.
///
/// Token mode: `1/G Σ_i Σ_t surrogate(token)`, no KL. Sequence mode: `1/G Σ_i surrogate(Σ_t lp)`
/// minus `β · 1/G Σ_i Σ_t kl_term` when reference log-probabilities are present.
pub fn grpo_objective(group: &GroupSample, cfg: &GrpoConfig, token_level: bool) -> Result<f64, GrpoError> {
    cfg.validate()?;
    group.validate()?;
    let adv = group_advantages(&group.rewards, cfg.std_floor)?;
    let g = adv.len() as f64;
    let samples = group.logprobs_new.iter().zip(&group.logprobs_old).zip(&adv);
    if token_level {
        let total: f64 = samples
            .map(|((new, old), &a)| {
                new.iter()
                    .zip(old)
                    .map(|(&n, &o)| token_surrogate(n, o, a, cfg.clip_epsilon))
                    .sum::<f64>()
            })
            .sum();
        return Ok(total / g);
    }
    let surrogate: f64 = samples
        .map(|((new, old), &a)| {
            token_surrogate(new.iter().sum(), old.iter().sum(), a, cfg.clip_epsilon)
        })
        .sum::<f64>()
        / g;
    let kl = match &group.logprobs_ref {
        Some(reference) if cfg.kl_beta > 0.0 => {
            group
                .logprobs_new
                .iter()
                .zip(reference)
                .map(|(new, r)| new.iter().zip(r).map(|(&p, &q)| kl_term(p, q)).sum::<f64>())
                .sum::<f64>()
                / g
        }
        _ => 0.0,
    };
    Ok(surrogate - cfg.kl_beta * kl)
}

fn ser_f64<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::Error;
    if !x.is_finite() {
        return Err(S::Error::custom(format!("non-finite value {x}")));
    }
    let raw = serde_json::value::RawValue::from_string(format!("{x:.16e}")).map_err(S::Error::custom)?;
    raw.serialize(s)
}

fn de_f64<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    f64::deserialize(d)
}

/// One line of the trainer hand-off file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub task_id: String,
    pub transcript: String,
    #[serde(serialize_with = "ser_f64", deserialize_with = "de_f64")]
    pub reward: f64,
    #[serde(serialize_with = "ser_f64", deserialize_with = "de_f64")]
    pub advantage: f64,
    pub group_id: usize,
}

/// One record per candidate; `rewards[k]` and `advantages[k]` align with `sets[k].candidates`.
pub fn export_training_records(
    sets: &[CandidateSet],
    rewards: &[Vec<f64>],
    advantages: &[Vec<f64>],
) -> Result<Vec<TrainingRecord>, GrpoError> {
    if sets.len() != rewards.len() || sets.len() != advantages.len() {
        return Err(GrpoError::ConfigError("sets, rewards and advantages differ in length".into()));
    }
    let mut out = Vec::new();
    for (group_id, ((set, r), a)) in sets.iter().zip(rewards).zip(advantages).enumerate() {
        if r.len() != set.len() || a.len() != set.len() {
            return Err(GrpoError::ConfigError(format!("group {group_id} is misaligned")));
        }
        for ((t, &reward), &advantage) in set.candidates.iter().zip(r).zip(a) {
            out.push(TrainingRecord {
                task_id: set.task_id.clone(),
                transcript: t.render_transcript(),
                reward,
                advantage,
                group_id,
            });
        }
    }
    Ok(out)
}

pub fn write_training_records<W: Write>(mut w: W, records: &[TrainingRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_training_records<R: BufRead>(r: R) -> std::io::Result<Vec<TrainingRecord>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?).map_err(std::io::Error::other))
        .collect()
}
