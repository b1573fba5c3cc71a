//! Classical priority dispatching rules and the greedy dispatch loop.

use crate::env::{Semantics, State};
use crate::instance::{Instance, OpId, Time};
use std::sync::Arc;
use std::time::{Duration, Instant};

/// Built-in priority rules. All scores are minimized; the max-style rules
/// are negated internally.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum RuleKind {
    /// Shortest processing time.
    Spt,
    /// Most work remaining.
    Mwkr,
    /// Minimum ratio of flow due date to most work remaining.
    FddMwkr,
    /// Most operations remaining.
    Mopnr,
    /// Uniform random eligible pick, deterministic in the seed.
    Random(u64),
}

impl RuleKind {
    pub fn name(&self) -> &'static str {
        match self {
            RuleKind::Spt => "spt",
            RuleKind::Mwkr => "mwkr",
            RuleKind::FddMwkr => "fdd-mwkr",
            RuleKind::Mopnr => "mopnr",
            RuleKind::Random(_) => "random",
        }
    }

    /// Parses a CLI rule name; `random` takes its seed separately.
    pub fn from_name(name: &str, seed: u64) -> Option<RuleKind> {
        match name {
            "spt" => Some(RuleKind::Spt),
            "mwkr" => Some(RuleKind::Mwkr),
            "fdd-mwkr" => Some(RuleKind::FddMwkr),
            "mopnr" => Some(RuleKind::Mopnr),
            "random" => Some(RuleKind::Random(seed)),
            _ => None,
        }
    }

    pub const BASELINES: [RuleKind; 4] =
        [RuleKind::Spt, RuleKind::Mwkr, RuleKind::FddMwkr, RuleKind::Mopnr];
}

fn work_remaining(inst: &Instance, op: OpId) -> Time {
    inst.proc_times[op.job][op.pos..].iter().sum()
}

fn flow_due_date(inst: &Instance, op: OpId) -> Time {
    inst.release[op.job] + inst.proc_times[op.job][..=op.pos].iter().sum::<Time>()
}

// SplitMix64; gives the Random rule a pure score per (seed, step, op).
fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Priority score of an eligible operation; lower wins.
pub fn priority(rule: RuleKind, state: &State, op: OpId) -> f64 {
    let inst = &state.inst;
    match rule {
        RuleKind::Spt => inst.proc(op) as f64,
        RuleKind::Mwkr => -(work_remaining(inst, op) as f64),
        RuleKind::FddMwkr => flow_due_date(inst, op) as f64 / work_remaining(inst, op) as f64,
        RuleKind::Mopnr => -((inst.ops_in_job(op.job) - op.pos) as f64),
        RuleKind::Random(seed) => {
            let h = mix(seed ^ mix(state.step_count() as u64) ^ mix((op.job as u64) << 32 | op.pos as u64));
            h as f64 / u64::MAX as f64
        }
    }
}

pub struct PdrResult {
    pub state: State,
    pub makespan: Time,
    pub wall_time: Duration,
}

/// Runs a rule through the environment to a complete schedule.
/// Ties break toward the lowest job index.
pub fn run_pdr(inst: Arc<Instance>, rule: RuleKind, semantics: Semantics) -> PdrResult {
    let started = Instant::now();
    let mut state = State::reset(inst, semantics);
    while !state.is_terminal() {
        let action = state
            .eligible_actions()
            .into_iter()
            .min_by(|&a, &b| {
                priority(rule, &state, a)
                    .partial_cmp(&priority(rule, &state, b))
                    .unwrap()
                    .then(a.job.cmp(&b.job))
            })
            .expect("non-terminal state has eligible actions");
        state.step(action).expect("eligible action dispatches");
    }
    let makespan = state.makespan().expect("terminal");
    PdrResult { state, makespan, wall_time: started.elapsed() }
}
