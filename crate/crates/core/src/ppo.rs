//! Proximal-policy training of the dispatching policy.
//!
//! Each iteration samples N trajectories with the frozen behaviour policy,
//! computes advantages as return-to-go minus the critic's estimate, then
//! maximizes `sum over steps of c_p * L_CLIP - c_v * L_VF + c_e * L_S`
//! with Adam, after which the behaviour policy is refreshed.

use crate::env::{Semantics, State};
use crate::instance::{generate_taillard, Instance, Time};
use crate::nn::{AdamState, Mode, NnError, Tape, Tensor};
use crate::policy::{Decision, GinPolicy, PolicyError, Select};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::rc::Rc;
use std::sync::Arc;
use std::time::Instant;

/// Training hyperparameters. The defaults reproduce the published setup.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of PPO iterations U.
    pub iterations: usize,
    /// Trajectories per iteration N.
    pub n_traj: usize,
    /// Discount factor.
    pub gamma: f64,
    /// Update epochs per iteration K.
    pub k_epochs: usize,
    /// Ratio clipping parameter.
    pub clip: f64,
    /// Policy, value, and entropy loss coefficients.
    pub c_p: f64,
    pub c_v: f64,
    pub c_e: f64,
    /// Adam learning rate.
    pub lr: f64,
    /// Training-instance shape and duration range.
    pub jobs: usize,
    pub machines: usize,
    pub lo: Time,
    pub hi: Time,
    /// Fixed held-out set: size and evaluation period (in iterations).
    pub validation_size: usize,
    pub validate_every: usize,
    /// Master seed; instance generation, sampling, and the validation
    /// set all derive from it.
    pub seed: u64,
    pub semantics: Semantics,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            n_traj: 4,
            gamma: 1.0,
            k_epochs: 1,
            clip: 0.2,
            c_p: 2.0,
            c_v: 1.0,
            c_e: 0.01,
            lr: 2e-5,
            jobs: 6,
            machines: 6,
            lo: 1,
            hi: 99,
            validation_size: 100,
            validate_every: 50,
            seed: 0,
            semantics: Semantics::Push,
        }
    }
}

impl TrainConfig {
    /// Applies one `key=value` override (the CLI's `--set` flag).
    pub fn apply_kv(&mut self, pair: &str) -> Result<(), String> {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got {pair:?}"))?;
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            v.parse().map_err(|e| format!("bad value for {key}: {e}"))
        }
        match key {
            "iterations" => self.iterations = p(key, value)?,
            "n_traj" => self.n_traj = p(key, value)?,
            "gamma" => self.gamma = p(key, value)?,
            "k_epochs" => self.k_epochs = p(key, value)?,
            "clip" => self.clip = p(key, value)?,
            "c_p" => self.c_p = p(key, value)?,
            "c_v" => self.c_v = p(key, value)?,
            "c_e" => self.c_e = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "jobs" => self.jobs = p(key, value)?,
            "machines" => self.machines = p(key, value)?,
            "lo" => self.lo = p(key, value)?,
            "hi" => self.hi = p(key, value)?,
            "validation_size" => self.validation_size = p(key, value)?,
            "validate_every" => self.validate_every = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "semantics" => self.semantics = value.parse()?,
            other => return Err(format!("unknown training key {other:?}")),
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PpoError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("training diverged at iteration {iteration}: {source}")]
    Diverged { iteration: usize, source: NnError },
}

struct StepRecord {
    features: Tensor,
    adjacency: Rc<Vec<Vec<usize>>>,
    mask: Rc<Vec<bool>>,
    action: usize,
    log_prob_old: f64,
    reward: f64,
    value_old: f64,
}

struct Trajectory {
    steps: Vec<StepRecord>,
    makespan: Time,
}

/// One row of the learning curve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub instances_seen: usize,
    /// Rolling mean makespan of the last 200 training episodes.
    pub train_makespan: f64,
    /// Mean greedy makespan on the validation set, when measured.
    pub validation_makespan: Option<f64>,
    pub loss_clip: f64,
    pub loss_value: f64,
    pub entropy: f64,
}

/// Everything `train` produces.
pub struct TrainResult {
    /// Parameters after the final iteration.
    pub policy: GinPolicy,
    /// Parameters of the iteration with the best validation makespan.
    pub best_policy: GinPolicy,
    pub best_validation: f64,
    pub curve: Vec<CurveRow>,
}

/// One evaluation row; `gap = (makespan - reference) / reference`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub instance_id: String,
    pub method: String,
    pub makespan: Time,
    pub gap: Option<f64>,
    pub time_ms: f64,
    pub semantics: Semantics,
}

/// Deterministic greedy rollout; returns the terminal state.
pub fn greedy_rollout(
    policy: &mut GinPolicy,
    inst: Arc<Instance>,
    semantics: Semantics,
) -> Result<State, PolicyError> {
    // greedy selection draws nothing from the RNG
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut state = State::reset(inst, semantics);
    while !state.is_terminal() {
        let d = policy.act(&state, Select::Greedy, &mut rng)?;
        state.step(d.op).expect("policy proposed an ineligible operation");
    }
    Ok(state)
}

/// Greedy evaluation over a set of instances.
pub fn evaluate_policy(
    policy: &mut GinPolicy,
    instances: &[Arc<Instance>],
    references: &[Option<Time>],
    semantics: Semantics,
) -> Result<Vec<EvalReport>, PolicyError> {
    assert_eq!(instances.len(), references.len());
    let mut out = Vec::with_capacity(instances.len());
    for (inst, reference) in instances.iter().zip(references) {
        let started = Instant::now();
        let terminal = greedy_rollout(policy, inst.clone(), semantics)?;
        let makespan = terminal.makespan().expect("terminal state");
        out.push(EvalReport {
            instance_id: inst.id.clone(),
            method: "learned".into(),
            makespan,
            gap: reference.map(|r| (makespan - r) as f64 / r as f64),
            time_ms: started.elapsed().as_secs_f64() * 1e3,
            semantics,
        });
    }
    Ok(out)
}

fn collect_trajectory(
    behaviour: &mut GinPolicy,
    inst: Arc<Instance>,
    semantics: Semantics,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory, PolicyError> {
    let mut state = State::reset(inst, semantics);
    let mut steps = Vec::with_capacity(state.inst.num_ops());
    while !state.is_terminal() {
        let (features, adjacency, mask) = behaviour.encode(&state);
        let d: Decision = behaviour.act(&state, Select::Sample, rng)?;
        let outcome = state.step(d.op).expect("sampled an ineligible operation");
        steps.push(StepRecord {
            features,
            adjacency,
            mask,
            action: d.flat,
            log_prob_old: d.log_prob,
            reward: outcome.reward as f64,
            value_old: d.value,
        });
    }
    Ok(Trajectory { steps, makespan: state.makespan().expect("terminal state") })
}

/// Discounted return-to-go minus the behaviour critic's estimate.
fn advantages_and_returns(traj: &Trajectory, gamma: f64) -> (Vec<f64>, Vec<f64>) {
    let mut returns = vec![0.0; traj.steps.len()];
    let mut acc = 0.0;
    for (t, step) in traj.steps.iter().enumerate().rev() {
        acc = step.reward + gamma * acc;
        returns[t] = acc;
    }
    let adv = returns
        .iter()
        .zip(&traj.steps)
        .map(|(&g, s)| g - s.value_old)
        .collect();
    (adv, returns)
}

struct LossParts {
    clip: f64,
    value: f64,
    entropy: f64,
}

/// Builds the summed PPO objective for a batch on one tape, backpropagates
/// its negation, and returns the component values.
fn ppo_update(
    policy: &mut GinPolicy,
    batch: &[Trajectory],
    cfg: &TrainConfig,
) -> Result<LossParts, NnError> {
    let mut tape = Tape::new();
    let mut total: Option<crate::nn::NodeId> = None;
    let mut parts = LossParts { clip: 0.0, value: 0.0, entropy: 0.0 };
    for traj in batch {
        let (advantages, returns) = advantages_and_returns(traj, cfg.gamma);
        for (t, step) in traj.steps.iter().enumerate() {
            let out = policy.forward(
                &mut tape,
                &step.features,
                step.adjacency.clone(),
                step.mask.clone(),
                Mode::Train,
            )?;
            let adv = tape.constant(Tensor::scalar(advantages[t]))?;
            let lp_new = tape.log_prob(out.dist, step.action)?;
            let lp_old = tape.constant(Tensor::scalar(step.log_prob_old))?;
            let log_ratio = tape.sub(lp_new, lp_old)?;
            let ratio = tape.exp(log_ratio)?;
            let unclipped = tape.mul(ratio, adv)?;
            let clipped_ratio = tape.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
            let clipped = tape.mul(clipped_ratio, adv)?;
            let l_clip = tape.min(unclipped, clipped)?;
            let target = tape.constant(Tensor::scalar(returns[t]))?;
            let err = tape.sub(out.value, target)?;
            let l_vf = tape.square(err)?;
            let l_s = tape.entropy(out.dist)?;
            parts.clip += tape.value(l_clip).item();
            parts.value += tape.value(l_vf).item();
            parts.entropy += tape.value(l_s).item();
            let a = tape.scale(l_clip, cfg.c_p)?;
            let b = tape.scale(l_vf, cfg.c_v)?;
            let c = tape.scale(l_s, cfg.c_e)?;
            let ab = tape.sub(a, b)?;
            let objective = tape.add(ab, c)?;
            total = Some(match total {
                None => objective,
                Some(acc) => tape.add(acc, objective)?,
            });
        }
    }
    if let Some(total) = total {
        let loss = tape.neg(total)?;
        tape.backward(loss, 1.0, &mut policy.params)?;
    }
    Ok(parts)
}

/// Runs the full training loop. `progress`, if given, is called with each
/// curve row as it is produced.
pub fn train(
    mut policy: GinPolicy,
    cfg: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(&CurveRow)>,
) -> Result<TrainResult, PpoError> {
    let validation = validation_set(cfg);
    let mut optimizer = AdamState::new(&policy.params, cfg.lr);
    let mut instance_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E3779B97F4A7C15));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xD1B54A32D192ED03));
    let mut recent: VecDeque<f64> = VecDeque::with_capacity(200);
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut best_validation = f64::INFINITY;
    let mut best_policy = policy.clone();
    let mut instances_seen = 0usize;

    for iteration in 1..=cfg.iterations {
        let mut behaviour = policy.clone();
        let mut batch = Vec::with_capacity(cfg.n_traj);
        for _ in 0..cfg.n_traj {
            use rand::Rng;
            let inst_seed: u64 = instance_rng.random();
            let inst = generate_taillard(cfg.jobs, cfg.machines, cfg.lo, cfg.hi, inst_seed)
                .into_shared();
            let traj = collect_trajectory(&mut behaviour, inst, cfg.semantics, &mut sample_rng)?;
            if recent.len() == 200 {
                recent.pop_front();
            }
            recent.push_back(traj.makespan as f64);
            instances_seen += 1;
            batch.push(traj);
        }

        let mut parts = LossParts { clip: 0.0, value: 0.0, entropy: 0.0 };
        for _ in 0..cfg.k_epochs {
            parts = ppo_update(&mut policy, &batch, cfg)
                .map_err(|source| PpoError::Diverged { iteration, source })?;
            optimizer
                .step(&mut policy.params)
                .map_err(|source| PpoError::Diverged { iteration, source })?;
        }

        let validation_makespan = if iteration % cfg.validate_every == 0
            || iteration == cfg.iterations
        {
            let mean = validation_mean(&mut policy, &validation, cfg.semantics)?;
            if mean < best_validation {
                best_validation = mean;
                best_policy = policy.clone();
            }
            Some(mean)
        } else {
            None
        };

        let row = CurveRow {
            iteration,
            instances_seen,
            train_makespan: recent.iter().sum::<f64>() / recent.len() as f64,
            validation_makespan,
            loss_clip: parts.clip,
            loss_value: parts.value,
            entropy: parts.entropy,
        };
        if let Some(f) = progress.as_deref_mut() {
            f(&row);
        }
        curve.push(row);
    }

    Ok(TrainResult { policy, best_policy, best_validation, curve })
}

/// The fixed held-out instances a config's seed defines.
pub fn validation_set(cfg: &TrainConfig) -> Vec<Arc<Instance>> {
    (0..cfg.validation_size)
        .map(|i| {
            let seed = cfg
                .seed
                .wrapping_mul(0x100000001B3)
                .wrapping_add(0x51AB1E5EED ^ i as u64);
            generate_taillard(cfg.jobs, cfg.machines, cfg.lo, cfg.hi, seed).into_shared()
        })
        .collect()
}

fn validation_mean(
    policy: &mut GinPolicy,
    instances: &[Arc<Instance>],
    semantics: Semantics,
) -> Result<f64, PolicyError> {
    let mut total = 0.0;
    for inst in instances {
        let s = greedy_rollout(policy, inst.clone(), semantics)?;
        total += s.makespan().expect("terminal") as f64;
    }
    Ok(total / instances.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyConfig;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            jobs: 3,
            machines: 3,
            validation_size: 4,
            validate_every: 1,
            ..Default::default()
        }
    }

    fn tiny_policy() -> GinPolicy {
        GinPolicy::new(
            PolicyConfig { hidden_gin: 8, embed_dim: 8, hidden_head: 4, ..Default::default() },
            1,
        )
    }

    #[test]
    fn returns_to_go_telescope_to_the_bound_improvement() {
        let mut behaviour = tiny_policy();
        let inst = generate_taillard(3, 3, 1, 99, 42).into_shared();
        let h0 = State::reset(inst.clone(), Semantics::Push).lower_bound();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = collect_trajectory(&mut behaviour, inst, Semantics::Push, &mut rng).unwrap();
        let (_, returns) = advantages_and_returns(&traj, 1.0);
        // with gamma = 1 the first return-to-go is the total reward, which
        // telescopes to H(s_0) - makespan
        assert_eq!(returns[0] as i64, h0 - traj.makespan);
    }

    #[test]
    fn advantages_subtract_the_critic_estimate() {
        let traj = Trajectory {
            steps: vec![
                StepRecord {
                    features: Tensor::zeros(&[1, 2]),
                    adjacency: Rc::new(vec![vec![]]),
                    mask: Rc::new(vec![true]),
                    action: 0,
                    log_prob_old: 0.0,
                    reward: -3.0,
                    value_old: 1.0,
                },
                StepRecord {
                    features: Tensor::zeros(&[1, 2]),
                    adjacency: Rc::new(vec![vec![]]),
                    mask: Rc::new(vec![true]),
                    action: 0,
                    log_prob_old: 0.0,
                    reward: 2.0,
                    value_old: -1.0,
                },
            ],
            makespan: 0,
        };
        let (adv, ret) = advantages_and_returns(&traj, 1.0);
        assert_eq!(ret, vec![-1.0, 2.0]);
        assert_eq!(adv, vec![-2.0, 3.0]);

        let (_, ret_discounted) = advantages_and_returns(&traj, 0.5);
        assert_eq!(ret_discounted, vec![-2.0, 2.0]);
    }

    #[test]
    fn identical_policies_give_unit_ratio_gradient_structure() {
        // when theta == theta_old the ratio is 1 everywhere, so the clip
        // objective equals the summed advantages exactly
        let mut behaviour = tiny_policy();
        let inst = generate_taillard(3, 3, 1, 99, 7).into_shared();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traj = collect_trajectory(&mut behaviour, inst, Semantics::Push, &mut rng).unwrap();
        let cfg = tiny_cfg();
        let expected: f64 = {
            let (adv, _) = advantages_and_returns(&traj, cfg.gamma);
            adv.iter().sum()
        };
        let mut policy = behaviour.clone();
        let parts = ppo_update(&mut policy, &[traj], &cfg).unwrap();
        // collection ran batch norm in training mode, so the forward pass
        // here sees the same batch statistics and the ratio is exactly 1
        assert!(
            (parts.clip - expected).abs() < 1e-6,
            "clip part {} vs summed advantages {expected}",
            parts.clip
        );
        assert!(policy.params.grads_populated());
    }

    #[test]
    fn short_training_run_is_reproducible_and_finite() {
        let cfg = tiny_cfg();
        let run = || {
            let r = train(tiny_policy(), &cfg, None).unwrap();
            (
                r.best_validation,
                r.curve
                    .iter()
                    .map(|c| (c.loss_clip, c.loss_value, c.entropy, c.train_makespan))
                    .collect::<Vec<_>>(),
            )
        };
        let (best_a, curve_a) = run();
        let (best_b, curve_b) = run();
        assert_eq!(best_a, best_b);
        assert_eq!(curve_a, curve_b);
        assert!(best_a.is_finite());
        for (lc, lv, ent, mk) in &curve_a {
            assert!(lc.is_finite() && lv.is_finite() && ent.is_finite() && mk.is_finite());
            assert!(*ent >= 0.0);
        }
    }

    #[test]
    fn curve_counts_instances_and_validates_on_schedule() {
        let cfg = TrainConfig { validate_every: 2, ..tiny_cfg() };
        let mut rows = Vec::new();
        let r = train(tiny_policy(), &cfg, Some(&mut |row: &CurveRow| rows.push(row.clone())))
            .unwrap();
        assert_eq!(r.curve.len(), 3);
        assert_eq!(rows.len(), 3);
        assert_eq!(r.curve[2].instances_seen, 3 * cfg.n_traj);
        assert!(r.curve[0].validation_makespan.is_none());
        assert!(r.curve[1].validation_makespan.is_some());
        // final iteration always validates
        assert!(r.curve[2].validation_makespan.is_some());
    }

    #[test]
    fn kv_overrides_parse() {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv("iterations=7").unwrap();
        cfg.apply_kv("lr=0.001").unwrap();
        cfg.apply_kv("semantics=no-push").unwrap();
        assert_eq!(cfg.iterations, 7);
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.semantics, Semantics::NoPush);
        assert!(cfg.apply_kv("bogus=1").is_err());
        assert!(cfg.apply_kv("no-equals").is_err());
    }

    #[test]
    fn evaluation_reports_makespans_and_gaps() {
        let mut policy = tiny_policy();
        let instances: Vec<_> = (0..2)
            .map(|i| generate_taillard(3, 3, 1, 99, 100 + i).into_shared())
            .collect();
        let refs = vec![Some(100), None];
        let reports =
            evaluate_policy(&mut policy, &instances, &refs, Semantics::Push).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].method, "learned");
        let gap = reports[0].gap.unwrap();
        assert!((gap - (reports[0].makespan - 100) as f64 / 100.0).abs() < 1e-12);
        assert!(reports[1].gap.is_none());
        assert!(reports[0].makespan > 0);
    }
}
