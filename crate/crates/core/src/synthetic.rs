//! Synthetic featurized trajectories with a controllable convergence
//! pattern: wrong trajectories lock onto a distractor early, right ones
//! settle on the answer late.
//!
//! Each question has one "trap" distractor that most wrong trajectories pick,
//! so plain majority voting often fails where a verifier that recognises
//! early convergence does not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{normalize_distances, FeatureTrajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub questions: usize,
    pub per_question: usize,
    pub k: usize,
    pub min_states: usize,
    pub max_states: usize,
    /// Per-question probability of a correct trajectory is drawn from this range.
    pub correct_rate: (f64, f64),
    /// Share of wrong trajectories that pick the question's trap distractor.
    pub trap_share: f64,
    /// Progress window in which wrong trajectories converge.
    pub incorrect_converge: (f64, f64),
    /// Progress window in which correct trajectories converge.
    pub correct_converge: (f64, f64),
    /// Range of the target's raw distance after convergence (others sit near 3.2).
    pub settled_distance: (f64, f64),
    /// Multiplicative jitter on raw distances.
    pub noise: f64,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            questions: 200,
            per_question: 20,
            k: 4,
            min_states: 6,
            max_states: 14,
            correct_rate: (0.25, 0.65),
            trap_share: 0.8,
            incorrect_converge: (0.1, 0.4),
            correct_converge: (0.8, 1.0),
            settled_distance: (1.1, 2.4),
            noise: 0.35,
            seed: 0,
            id_prefix: "syn".into(),
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<()> {
        let ok_range = |(a, b): (f64, f64)| (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a <= b;
        if self.k < 2
            || self.min_states < 1
            || self.min_states > self.max_states
            || !ok_range(self.correct_rate)
            || !ok_range(self.incorrect_converge)
            || !ok_range(self.correct_converge)
            || !(0.0..=1.0).contains(&self.trap_share)
            || !(0.0..1.0).contains(&self.noise)
            || !(1.0..3.2).contains(&self.settled_distance.0)
            || !(self.settled_distance.0..3.2).contains(&self.settled_distance.1)
        {
            return Err(Error::Config(format!("invalid synthetic configuration {self:?}")));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        rng.gen_range(a..b)
    }
}

/// Raw distances for one trajectory converging on `target` at progress `tau`.
fn trajectory(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig, target: usize, tau: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = rng.gen_range(cfg.min_states..=cfg.max_states);
    // How sharply this trajectory commits once converged.
    let settled = rng.gen_range(cfg.settled_distance.0..=cfg.settled_distance.1);
    let mut raws = Vec::with_capacity(n);
    let mut perps = Vec::with_capacity(n);
    for i in 1..=n {
        let t = i as f64 / n as f64;
        let converged = t >= tau || i == n;
        // The final state always commits clearly so its argmin is the prediction.
        let settled = if i == n { 1.1 } else { settled };
        let row: Vec<f64> = (0..cfg.k)
            .map(|j| {
                let base = if j == target && converged {
                    settled
                } else if j == target {
                    // Slow drift toward the target before convergence.
                    3.0 - 0.3 * t / tau.max(1e-9)
                } else {
                    3.2
                };
                1.0 + (base - 1.0) * (1.0 + cfg.noise * rng.gen_range(-1.0..1.0))
            })
            .collect();
        raws.push(row);
        perps.push(1.5 + 3.0 * rng.gen::<f64>());
    }
    (raws, perps)
}

/// Trajectories grouped by question in slot order. Choice 0 is correct.
pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<FeatureTrajectory>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.questions * cfg.per_question);
    for q in 0..cfg.questions {
        let rate = uniform(&mut rng, cfg.correct_rate);
        let trap = rng.gen_range(1..cfg.k);
        let qid = format!("{}-{q:04}", cfg.id_prefix);
        for slot in 0..cfg.per_question {
            let correct = rng.gen::<f64>() < rate;
            let target = if correct {
                0
            } else if cfg.k == 2 || rng.gen::<f64>() < cfg.trap_share {
                trap
            } else {
                // Any distractor other than the trap.
                let others: Vec<usize> = (1..cfg.k).filter(|j| *j != trap).collect();
                others[rng.gen_range(0..others.len())]
            };
            let window = if correct { cfg.correct_converge } else { cfg.incorrect_converge };
            let tau = uniform(&mut rng, window);
            let (raws, perps) = trajectory(&mut rng, cfg, target, tau);
            let feats = raws
                .into_iter()
                .enumerate()
                .map(|(i, r)| normalize_distances(r, i))
                .collect::<Result<Vec<_>>>()?;
            out.push(FeatureTrajectory::from_parts(qid.clone(), slot, feats, perps, Some(target))?);
        }
    }
    Ok(out)
}
