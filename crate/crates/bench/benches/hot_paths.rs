//! Benchmarks for the three hot paths: environment stepping, full rule
//! rollouts, and policy forward passes.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use jobshop_core::env::{Semantics, State};
use jobshop_core::instance::generate_taillard;
use jobshop_core::nn::Mode;
use jobshop_core::policy::{GinPolicy, PolicyConfig, Select};
use jobshop_core::rules::{run_pdr, RuleKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn bench_env_step(c: &mut Criterion) {
    let inst = generate_taillard(15, 15, 1, 99, 1).into_shared();
    c.bench_function("env/full_spt_rollout_15x15", |b| {
        b.iter_batched(
            || State::reset(inst.clone(), Semantics::Push),
            |mut state| {
                while !state.is_terminal() {
                    let a = state.eligible_actions()[0];
                    state.step(black_box(a)).unwrap();
                }
                state.makespan().unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_rules(c: &mut Criterion) {
    let inst = generate_taillard(15, 15, 1, 99, 2).into_shared();
    for rule in RuleKind::BASELINES {
        c.bench_function(&format!("rules/{}_15x15", rule.name()), |b| {
            b.iter(|| run_pdr(black_box(inst.clone()), rule, Semantics::Push).makespan)
        });
    }
}

fn bench_policy_forward(c: &mut Criterion) {
    let inst = generate_taillard(15, 15, 1, 99, 3).into_shared();
    let mut policy = GinPolicy::new(PolicyConfig::default(), 0);
    let state = State::reset(inst, Semantics::Push);
    let (features, adjacency, mask) = policy.encode(&state);
    c.bench_function("policy/forward_15x15", |b| {
        b.iter(|| {
            let mut tape = jobshop_core::nn::Tape::new();
            policy
                .forward(
                    &mut tape,
                    black_box(&features),
                    adjacency.clone(),
                    mask.clone(),
                    Mode::Eval,
                )
                .unwrap()
                .dist
        })
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    c.bench_function("policy/act_greedy_15x15_s0", |b| {
        b.iter(|| policy.act(black_box(&state), Select::Greedy, &mut rng).unwrap().flat)
    });
}

criterion_group!(benches, bench_env_step, bench_rules, bench_policy_forward);
criterion_main!(benches);
