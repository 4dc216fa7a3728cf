//! Executable check of the dominance result: under monotone refinement and a
//! threshold acceptance rule, the evidence-gated planner's mean step score is
//! never below that of the unrefined chain, and is strictly above it whenever
//! some unrefined step was imperfect and got improved or abstained.
//!
//! The simulator works on abstract step scores, not model output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("pair does not satisfy the strictness precondition")]
pub struct PreconditionUnmet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgoalStatus {
    KeptRefined,
    Abstained,
}

/// Successive scores of one subgoal under repeated refinement. The first
/// entry is the unrefined score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineTrajectory(pub Vec<f64>);

impl RefineTrajectory {
    pub fn initial(&self) -> f64 {
        self.0[0]
    }

    pub fn last(&self) -> f64 {
        *self.0.last().unwrap()
    }

    pub fn rounds(&self) -> usize {
        self.0.len() - 1
    }

    pub fn is_monotone(&self) -> bool {
        self.0.windows(2).all(|w| w[1] >= w[0])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimChain {
    /// Refined score for kept subgoals, pre-abstention score otherwise.
    pub subgoal_scores: Vec<f64>,
    pub status: Vec<SubgoalStatus>,
    pub trajectories: Vec<RefineTrajectory>,
}

impl SimChain {
    pub fn kept_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.subgoal_scores
            .iter()
            .zip(&self.status)
            .filter(|(_, s)| **s == SubgoalStatus::KeptRefined)
            .map(|(v, _)| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPair {
    pub threshold: f64,
    pub react: Vec<f64>,
    pub faithact: SimChain,
}

fn draw_initial(rng: &mut ChaCha8Rng, c: f64) -> f64 {
    // boundary values show up often enough to matter
    if rng.gen_bool(0.25) {
        [0.0, 1.0, c, 0.5][rng.gen_range(0..4)]
    } else {
        rng.gen_range(0.0..=1.0)
    }
}

/// Applies a random monotone refine operator to `initial`.
fn draw_trajectory(rng: &mut ChaCha8Rng, initial: f64) -> RefineTrajectory {
    let rounds = rng.gen_range(0..=3);
    // some subgoals are capped so refinement stalls below a target
    let cap = if rng.gen_bool(0.2) {
        rng.gen_range(initial..=1.0)
    } else {
        1.0
    };
    let mut scores = vec![initial];
    let mut s = initial;
    for _ in 0..rounds {
        if cap - s >= 1e-3 && rng.gen_bool(0.75) {
            let step = rng.gen_range(0.0..=1.0) * (cap - s);
            s = (s + step.max(1e-3)).min(cap);
        }
        scores.push(s);
    }
    RefineTrajectory(scores)
}

/// The acceptance rule: keep the refined score if it reaches `c`, otherwise
/// abstain and report the unrefined score.
pub fn apply_acceptance(traj: &RefineTrajectory, c: f64) -> (f64, SubgoalStatus) {
    if traj.last() >= c {
        (traj.last(), SubgoalStatus::KeptRefined)
    } else {
        (traj.initial(), SubgoalStatus::Abstained)
    }
}

pub fn simulate_pair(seed: u64, min_len: usize, max_len: usize, c: f64) -> SimPair {
    assert!((0.0..=1.0).contains(&c) && min_len >= 1 && min_len <= max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.gen_range(min_len..=max_len);
    let mut react = Vec::with_capacity(len);
    let mut scores = Vec::with_capacity(len);
    let mut status = Vec::with_capacity(len);
    let mut trajectories = Vec::with_capacity(len);
    for _ in 0..len {
        let initial = draw_initial(&mut rng, c);
        let traj = draw_trajectory(&mut rng, initial);
        let (score, st) = apply_acceptance(&traj, c);
        react.push(initial);
        scores.push(score);
        status.push(st);
        trajectories.push(traj);
    }
    SimPair {
        threshold: c,
        react,
        faithact: SimChain {
            subgoal_scores: scores,
            status,
            trajectories,
        },
    }
}

/// Checks the acceptance-rule and monotonicity preconditions of a pair.
pub fn check_preconditions(pair: &SimPair) -> Result<(), String> {
    let c = pair.threshold;
    let fa = &pair.faithact;
    for (g, ((&score, status), traj)) in fa
        .subgoal_scores
        .iter()
        .zip(&fa.status)
        .zip(&fa.trajectories)
        .enumerate()
    {
        if !traj.is_monotone() {
            return Err(format!("subgoal {g}: refinement is not monotone"));
        }
        if traj.initial() != pair.react[g] {
            return Err(format!(
                "subgoal {g}: trajectory does not start at the unrefined score"
            ));
        }
        match status {
            SubgoalStatus::KeptRefined if score < c || score != traj.last() => {
                return Err(format!("subgoal {g}: kept score {score} below {c}"))
            }
            SubgoalStatus::Abstained if score >= c || score != pair.react[g] => {
                return Err(format!(
                    "subgoal {g}: abstained score {score} not below {c}"
                ))
            }
            _ => {}
        }
    }
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DominanceOutcome {
    Holds,
    Violated,
    /// Every subgoal was abstained; there is no chain to compare.
    Vacuous,
}

pub fn check_dominance(pair: &SimPair) -> DominanceOutcome {
    let react = mean(pair.react.iter().copied()).expect("at least one subgoal");
    match mean(pair.faithact.kept_scores()) {
        None => DominanceOutcome::Vacuous,
        Some(kept) if kept >= react => DominanceOutcome::Holds,
        Some(_) => DominanceOutcome::Violated,
    }
}

/// True when some imperfect unrefined step was strictly improved or
/// abstained, and at least one subgoal was kept.
pub fn qualifies_for_strictness(pair: &SimPair) -> bool {
    let fa = &pair.faithact;
    let has_kept = fa.status.contains(&SubgoalStatus::KeptRefined);
    let improved = pair.react.iter().enumerate().any(|(g, &r)| {
        r < 1.0
            && match fa.status[g] {
                SubgoalStatus::Abstained => true,
                SubgoalStatus::KeptRefined => fa.subgoal_scores[g] > r,
            }
    });
    has_kept && improved
}

pub fn check_strictness(pair: &SimPair) -> Result<bool, PreconditionUnmet> {
    if !qualifies_for_strictness(pair) {
        return Err(PreconditionUnmet);
    }
    let react = mean(pair.react.iter().copied()).unwrap();
    let kept = mean(pair.faithact.kept_scores()).unwrap();
    Ok(kept > react)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaSummary {
    pub threshold: f64,
    pub trials: usize,
    pub violations: usize,
    pub vacuous: usize,
    pub qualifying: usize,
    pub strict_violations: usize,
    pub precondition_failures: usize,
}

fn draw_seed(seed: u64, c: f64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ c.to_bits().rotate_left(17) ^ stream.rotate_left(41) ^ index;
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub const CHAIN_LEN: (usize, usize) = (1, 10);

/// Runs `trials` dominance draws, then draws until `trials` pairs qualify
/// for the strictness check (giving up after 100x that many draws).
pub fn verify_lemma(trials: usize, seed: u64, c: f64) -> LemmaSummary {
    let (lo, hi) = CHAIN_LEN;
    let (violations, vacuous, bad_pre) = (0..trials as u64)
        .into_par_iter()
        .map(|i| {
            let pair = simulate_pair(draw_seed(seed, c, 0, i), lo, hi, c);
            if check_preconditions(&pair).is_err() {
                return (0, 0, 1);
            }
            match check_dominance(&pair) {
                DominanceOutcome::Holds => (0, 0, 0),
                DominanceOutcome::Violated => (1, 0, 0),
                DominanceOutcome::Vacuous => (0, 1, 0),
            }
        })
        .reduce(|| (0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));

    let mut qualifying = 0;
    let mut strict_violations = 0;
    let mut strict_bad_pre = 0;
    let mut next = 0u64;
    let budget = trials as u64 * 100;
    while qualifying < trials && next < budget {
        let batch: Vec<u64> = (next..(next + 4096).min(budget)).collect();
        next += batch.len() as u64;
        let results: Vec<Option<(bool, bool)>> = batch
            .par_iter()
            .map(|&i| {
                let pair = simulate_pair(draw_seed(seed, c, 1, i), lo, hi, c);
                let pre_ok = check_preconditions(&pair).is_ok();
                check_strictness(&pair).ok().map(|strict| (strict, pre_ok))
            })
            .collect();
        for (strict, pre_ok) in results.into_iter().flatten() {
            if qualifying == trials {
                break;
            }
            qualifying += 1;
            if !pre_ok {
                strict_bad_pre += 1;
            } else if !strict {
                strict_violations += 1;
            }
        }
    }

    LemmaSummary {
        threshold: c,
        trials,
        violations,
        vacuous,
        qualifying,
        strict_violations,
        precondition_failures: bad_pre + strict_bad_pre,
    }
}
