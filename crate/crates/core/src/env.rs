//! The dispatching environment over the partial-schedule disjunctive graph.
//!
//! A `State` owns a partial schedule: which operations are placed, their
//! start times, the processing order on every machine, and a per-operation
//! completion lower bound. Dispatching an eligible operation inserts it into
//! its machine sequence and recomputes start times as longest-path values
//! over the partial DAG, so earlier placements may be pushed later (the
//! default `Push` semantics). `NoPush` only uses idle gaps the operation
//! fits into entirely.

use crate::instance::{Instance, OpId, Time};
use petgraph::algo::toposort;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// How a dispatched operation is placed on its machine.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Default)]
pub enum Semantics {
    /// Insert at the first idle point, pushing later operations back.
    #[default]
    Push,
    /// Insert only into idle gaps the operation fits into, else append.
    NoPush,
}

impl std::str::FromStr for Semantics {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "push" => Ok(Semantics::Push),
            "no-push" => Ok(Semantics::NoPush),
            other => Err(format!("unknown semantics {other:?} (expected push | no-push)")),
        }
    }
}

/// Graph encoding handed to the policy network.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Default)]
pub enum AdjacencyMode {
    /// Conjunctions plus already-directed disjunctions only.
    #[default]
    AddingArc,
    /// Additionally both directions of every undecided disjunction.
    RemovingArc,
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("action {0} is not eligible")]
    Ineligible(OpId),
    #[error("state is not terminal ({scheduled}/{total} operations scheduled)")]
    NotTerminal { scheduled: usize, total: usize },
    #[error("internal cycle detected in the partial schedule DAG")]
    Cycle,
}

/// Result of one dispatch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepOutcome {
    pub reward: Time,
    pub done: bool,
    pub h_before: Time,
    pub h_after: Time,
}

/// A partial schedule, indexed by each operation's flat id.
#[derive(Clone, Debug)]
pub struct State {
    pub inst: Arc<Instance>,
    pub semantics: Semantics,
    scheduled: Vec<bool>,
    start: Vec<Time>,
    clb: Vec<Time>,
    machine_seq: Vec<Vec<usize>>,
    /// Per job, position of the first unscheduled operation.
    next_pos: Vec<usize>,
    step: usize,
    offsets: Vec<usize>,
}

impl State {
    /// Initial state: nothing scheduled, bounds from job-internal prefix sums.
    pub fn reset(inst: Arc<Instance>, semantics: Semantics) -> State {
        let n = inst.num_ops();
        let offsets = inst.job_offsets();
        let mut state = State {
            semantics,
            scheduled: vec![false; n],
            start: vec![0; n],
            clb: vec![0; n],
            machine_seq: vec![Vec::new(); inst.num_machines],
            next_pos: vec![0; inst.num_jobs],
            step: 0,
            offsets,
            inst,
        };
        state.recompute_bounds();
        state
    }

    pub fn flat(&self, op: OpId) -> usize {
        self.offsets[op.job] + op.pos
    }

    pub fn is_scheduled(&self, op: OpId) -> bool {
        self.scheduled[self.flat(op)]
    }

    pub fn start_time(&self, op: OpId) -> Option<Time> {
        self.is_scheduled(op).then(|| self.start[self.flat(op)])
    }

    pub fn completion_bound(&self, op: OpId) -> Time {
        self.clb[self.flat(op)]
    }

    pub fn machine_sequence(&self, machine: usize) -> &[usize] {
        &self.machine_seq[machine]
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_terminal(&self) -> bool {
        self.step == self.inst.num_ops()
    }

    /// First unscheduled operation of every unfinished job, by job index.
    pub fn eligible_actions(&self) -> Vec<OpId> {
        (0..self.inst.num_jobs)
            .filter(|&job| self.next_pos[job] < self.inst.ops_in_job(job))
            .map(|job| OpId { job, pos: self.next_pos[job] })
            .collect()
    }

    /// Lower bound of the final makespan: max completion bound over all ops.
    pub fn lower_bound(&self) -> Time {
        self.clb.iter().copied().max().unwrap_or(0)
    }

    /// Earliest time the operation's job allows it to start.
    fn job_ready(&self, op: OpId) -> Time {
        if op.pos == 0 {
            self.inst.release[op.job]
        } else {
            let pred = OpId { job: op.job, pos: op.pos - 1 };
            self.start[self.flat(pred)] + self.inst.proc(pred)
        }
    }

    /// Dispatches an eligible operation and returns the reward
    /// `H(before) - H(after)`.
    pub fn step(&mut self, action: OpId) -> Result<StepOutcome, EnvError> {
        let eligible = action.job < self.inst.num_jobs
            && self.next_pos[action.job] == action.pos
            && action.pos < self.inst.ops_in_job(action.job);
        if !eligible {
            return Err(EnvError::Ineligible(action));
        }
        let h_before = self.lower_bound();
        let machine = self.inst.machine(action);
        let ready = self.job_ready(action);
        let proc = self.inst.proc(action);
        let flat = self.flat(action);

        let seq = &self.machine_seq[machine];
        let mut insert_at = seq.len();
        let mut prev_end = ready;
        for (i, &other) in seq.iter().enumerate() {
            let gap_start = prev_end.max(ready);
            let fits = match self.semantics {
                Semantics::Push => gap_start < self.start[other],
                Semantics::NoPush => gap_start + proc <= self.start[other],
            };
            if fits {
                insert_at = i;
                break;
            }
            prev_end = self.start[other] + self.inst.proc(self.inst.op_from_flat(other));
        }
        self.machine_seq[machine].insert(insert_at, flat);
        self.scheduled[flat] = true;
        self.next_pos[action.job] += 1;
        self.step += 1;

        self.recompute_starts()?;
        self.recompute_bounds();
        let h_after = self.lower_bound();
        Ok(StepOutcome {
            reward: h_before - h_after,
            done: self.is_terminal(),
            h_before,
            h_after,
        })
    }

    /// Longest-path start times over the partial DAG (job-predecessor and
    /// machine-predecessor arcs), in topological order.
    fn recompute_starts(&mut self) -> Result<(), EnvError> {
        let n = self.inst.num_ops();
        let mut indegree = vec![0usize; n];
        let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut scheduled_count = 0usize;
        for (flat, &is_scheduled) in self.scheduled.iter().enumerate() {
            if !is_scheduled {
                continue;
            }
            scheduled_count += 1;
            let op = self.inst.op_from_flat(flat);
            if op.pos > 0 {
                let pred = self.flat(OpId { job: op.job, pos: op.pos - 1 });
                debug_assert!(self.scheduled[pred]);
                succs[pred].push(flat);
                indegree[flat] += 1;
            }
        }
        for seq in &self.machine_seq {
            for pair in seq.windows(2) {
                succs[pair[0]].push(pair[1]);
                indegree[pair[1]] += 1;
            }
        }
        let mut queue: Vec<usize> = (0..n)
            .filter(|&f| self.scheduled[f] && indegree[f] == 0)
            .collect();
        let mut processed = 0usize;
        let mut earliest = vec![Time::MIN; n];
        for (f, e) in earliest.iter_mut().enumerate() {
            if self.scheduled[f] {
                let op = self.inst.op_from_flat(f);
                *e = if op.pos == 0 { self.inst.release[op.job] } else { 0 };
            }
        }
        while let Some(f) = queue.pop() {
            processed += 1;
            self.start[f] = earliest[f];
            let completion = earliest[f] + self.inst.proc(self.inst.op_from_flat(f));
            for &s in &succs[f] {
                earliest[s] = earliest[s].max(completion);
                indegree[s] -= 1;
                if indegree[s] == 0 {
                    queue.push(s);
                }
            }
        }
        if processed != scheduled_count {
            return Err(EnvError::Cycle);
        }
        Ok(())
    }

    /// Completion lower bounds: exact completions for scheduled ops, job
    /// prefix sums from the last scheduled operation onward otherwise.
    fn recompute_bounds(&mut self) {
        for job in 0..self.inst.num_jobs {
            let mut t = self.inst.release[job];
            for pos in 0..self.inst.ops_in_job(job) {
                let op = OpId { job, pos };
                let f = self.flat(op);
                t = if self.scheduled[f] {
                    self.start[f] + self.inst.proc(op)
                } else {
                    t + self.inst.proc(op)
                };
                self.clb[f] = t;
            }
        }
    }

    /// Makespan of a terminal state.
    pub fn makespan(&self) -> Result<Time, EnvError> {
        if !self.is_terminal() {
            return Err(EnvError::NotTerminal {
                scheduled: self.step,
                total: self.inst.num_ops(),
            });
        }
        Ok(self
            .inst
            .ops()
            .map(|op| self.start[self.flat(op)] + self.inst.proc(op))
            .max()
            .unwrap_or(0))
    }

    /// Independent makespan check: longest source-to-sink path of the
    /// completed disjunctive DAG with arcs weighted by the predecessor's
    /// processing time. Shares no code with the incremental start times.
    pub fn critical_path_makespan(&self) -> Result<Time, EnvError> {
        if !self.is_terminal() {
            return Err(EnvError::NotTerminal {
                scheduled: self.step,
                total: self.inst.num_ops(),
            });
        }
        let n = self.inst.num_ops();
        let mut graph = DiGraph::<(), Time>::new();
        let nodes: Vec<_> = (0..=n).map(|_| graph.add_node(())).collect();
        let source = nodes[n];
        for op in self.inst.ops() {
            let f = self.flat(op);
            if op.pos == 0 {
                graph.add_edge(source, nodes[f], self.inst.release[op.job]);
            } else {
                let pred = OpId { job: op.job, pos: op.pos - 1 };
                graph.add_edge(nodes[self.flat(pred)], nodes[f], self.inst.proc(pred));
            }
        }
        for seq in &self.machine_seq {
            for pair in seq.windows(2) {
                let pred = self.inst.op_from_flat(pair[0]);
                graph.add_edge(nodes[pair[0]], nodes[pair[1]], self.inst.proc(pred));
            }
        }
        let order = toposort(&graph, None).map_err(|_| EnvError::Cycle)?;
        let mut dist = vec![Time::MIN; graph.node_count()];
        dist[source.index()] = 0;
        for node in order {
            if dist[node.index()] == Time::MIN {
                continue;
            }
            for edge in graph.edges(node) {
                let target = petgraph::visit::EdgeRef::target(&edge).index();
                dist[target] = dist[target].max(dist[node.index()] + edge.weight());
            }
        }
        Ok(self
            .inst
            .ops()
            .map(|op| dist[self.flat(op)] + self.inst.proc(op))
            .max()
            .unwrap_or(0))
    }

    /// Raw per-operation features `(scheduled indicator, clb / scale)`.
    pub fn node_features(&self, scale: f64) -> Vec<[f64; 2]> {
        assert!(scale > 0.0, "feature scale must be positive");
        (0..self.inst.num_ops())
            .map(|f| [if self.scheduled[f] { 1.0 } else { 0.0 }, self.clb[f] as f64 / scale])
            .collect()
    }

    /// Incoming-neighbor lists over non-dummy operation nodes.
    ///
    /// Directed disjunctions are every ordered pair of scheduled operations
    /// sharing a machine (the processing order decides all of them at once);
    /// `RemovingArc` additionally keeps both directions of each undecided
    /// disjunction.
    pub fn adjacency(&self, mode: AdjacencyMode) -> Vec<Vec<usize>> {
        let n = self.inst.num_ops();
        let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n];
        for op in self.inst.ops() {
            if op.pos > 0 {
                let pred = OpId { job: op.job, pos: op.pos - 1 };
                incoming[self.flat(op)].push(self.flat(pred));
            }
        }
        for seq in &self.machine_seq {
            for (i, &earlier) in seq.iter().enumerate() {
                for &later in &seq[i + 1..] {
                    incoming[later].push(earlier);
                }
            }
        }
        if mode == AdjacencyMode::RemovingArc {
            let mut per_machine: Vec<Vec<usize>> = vec![Vec::new(); self.inst.num_machines];
            for op in self.inst.ops() {
                per_machine[self.inst.machine(op)].push(self.flat(op));
            }
            for ops in &per_machine {
                for (i, &a) in ops.iter().enumerate() {
                    for &b in &ops[i + 1..] {
                        if !(self.scheduled[a] && self.scheduled[b]) {
                            incoming[a].push(b);
                            incoming[b].push(a);
                        }
                    }
                }
            }
        }
        incoming
    }

    /// Feasibility violations of a terminal schedule, empty when valid.
    pub fn verify_schedule(&self) -> Vec<String> {
        let mut violations = Vec::new();
        if !self.is_terminal() {
            violations.push(format!(
                "not terminal: {}/{} operations scheduled",
                self.step,
                self.inst.num_ops()
            ));
            return violations;
        }
        for op in self.inst.ops() {
            let s = self.start[self.flat(op)];
            if s < 0 {
                violations.push(format!("negative start {s} for {op}"));
            }
            if op.pos == 0 {
                if s < self.inst.release[op.job] {
                    violations.push(format!("{op} starts before job release"));
                }
            } else {
                let pred = OpId { job: op.job, pos: op.pos - 1 };
                if s < self.start[self.flat(pred)] + self.inst.proc(pred) {
                    violations.push(format!("{op} overlaps its job predecessor"));
                }
            }
        }
        for (machine, seq) in self.machine_seq.iter().enumerate() {
            let mut ops: Vec<OpId> = self
                .inst
                .ops()
                .filter(|&op| self.inst.machine(op) == machine)
                .collect();
            if ops.len() != seq.len() {
                violations.push(format!("machine {machine} sequence is incomplete"));
            }
            ops.sort_by_key(|&op| self.start[self.flat(op)]);
            for pair in ops.windows(2) {
                let end = self.start[self.flat(pair[0])] + self.inst.proc(pair[0]);
                if end > self.start[self.flat(pair[1])] {
                    violations.push(format!(
                        "machine overlap between {} and {} on machine {machine}",
                        pair[0], pair[1]
                    ));
                }
            }
        }
        violations
    }

    /// Terminal schedule as serializable rows.
    pub fn to_schedule(&self) -> Result<Schedule, EnvError> {
        if !self.is_terminal() {
            return Err(EnvError::NotTerminal {
                scheduled: self.step,
                total: self.inst.num_ops(),
            });
        }
        Ok(Schedule {
            instance_id: self.inst.id.clone(),
            num_machines: self.inst.num_machines,
            makespan: self.makespan()?,
            entries: self
                .inst
                .ops()
                .map(|op| ScheduleEntry {
                    op,
                    machine: self.inst.machine(op),
                    start: self.start[self.flat(op)],
                    end: self.start[self.flat(op)] + self.inst.proc(op),
                })
                .collect(),
        })
    }

    #[cfg(test)]
    pub(crate) fn corrupt_start_for_test(&mut self, op: OpId, value: Time) {
        let f = self.flat(op);
        self.start[f] = value;
    }
}

/// A completed schedule in the JSON export shape.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Schedule {
    pub instance_id: String,
    pub num_machines: usize,
    pub makespan: Time,
    pub entries: Vec<ScheduleEntry>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub op: OpId,
    pub machine: usize,
    pub start: Time,
    pub end: Time,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::{generate_taillard, Instance};

    fn tiny() -> Arc<Instance> {
        Instance::new("TINY", 2, vec![vec![0, 1], vec![1, 0]], vec![vec![3, 2], vec![2, 4]])
            .unwrap()
            .into_shared()
    }

    fn op(job: usize, pos: usize) -> OpId {
        OpId { job, pos }
    }

    #[test]
    fn reset_bounds_tiny() {
        let s = State::reset(tiny(), Semantics::Push);
        assert_eq!(s.completion_bound(op(0, 0)), 3);
        assert_eq!(s.completion_bound(op(0, 1)), 5);
        assert_eq!(s.completion_bound(op(1, 0)), 2);
        assert_eq!(s.completion_bound(op(1, 1)), 6);
        assert_eq!(s.lower_bound(), 6);
    }

    #[test]
    fn reset_bounds_single_job() {
        let inst = Instance::new("", 2, vec![vec![0, 1]], vec![vec![5, 7]])
            .unwrap()
            .into_shared();
        let s = State::reset(inst, Semantics::Push);
        assert_eq!(s.completion_bound(op(0, 0)), 5);
        assert_eq!(s.completion_bound(op(0, 1)), 12);
    }

    #[test]
    fn reset_respects_release_times() {
        let mut inst =
            Instance::new("", 1, vec![vec![0], vec![0]], vec![vec![4], vec![6]]).unwrap();
        inst.release = vec![3, 0];
        let s = State::reset(inst.into_shared(), Semantics::Push);
        assert_eq!(s.completion_bound(op(0, 0)), 7);
        assert_eq!(s.completion_bound(op(1, 0)), 6);
    }

    #[test]
    fn eligibility_follows_job_order() {
        let mut s = State::reset(tiny(), Semantics::Push);
        assert_eq!(s.eligible_actions(), vec![op(0, 0), op(1, 0)]);
        s.step(op(1, 0)).unwrap();
        assert_eq!(s.eligible_actions(), vec![op(0, 0), op(1, 1)]);
    }

    #[test]
    fn terminal_state_has_no_actions() {
        let mut s = State::reset(tiny(), Semantics::Push);
        for &a in &[op(1, 0), op(0, 0), op(0, 1), op(1, 1)] {
            s.step(a).unwrap();
        }
        assert!(s.is_terminal());
        assert!(s.eligible_actions().is_empty());
    }

    #[test]
    fn ineligible_actions_are_rejected() {
        let mut s = State::reset(tiny(), Semantics::Push);
        assert!(matches!(s.step(op(0, 1)), Err(EnvError::Ineligible(_))));
        assert!(matches!(s.step(op(9, 0)), Err(EnvError::Ineligible(_))));
    }

    #[test]
    fn first_dispatch_on_tiny() {
        let mut s = State::reset(tiny(), Semantics::Push);
        let out = s.step(op(1, 0)).unwrap();
        assert_eq!(s.start_time(op(1, 0)), Some(0));
        assert_eq!(s.completion_bound(op(1, 0)), 2);
        assert_eq!(out.h_before, 6);
        assert_eq!(out.h_after, 6);
        assert_eq!(out.reward, 0);
    }

    /// A fitting idle gap is used without delaying the scheduled operation.
    #[test]
    fn push_insertion_uses_idle_gap() {
        let inst = Instance::new(
            "",
            2,
            vec![vec![1, 0], vec![0]],
            vec![vec![7, 5], vec![4]],
        )
        .unwrap()
        .into_shared();
        let mut s = State::reset(inst, Semantics::Push);
        s.step(op(0, 0)).unwrap();
        s.step(op(0, 1)).unwrap();
        assert_eq!(s.start_time(op(0, 1)), Some(7));
        s.step(op(1, 0)).unwrap();
        assert_eq!(s.start_time(op(1, 0)), Some(0));
        // Job predecessor still ends at 7, machine frees at 4: start stays 7.
        assert_eq!(s.start_time(op(0, 1)), Some(7));
        assert_eq!(s.machine_sequence(0), &[s.flat(op(1, 0)), s.flat(op(0, 1))]);
    }

    #[test]
    fn push_insertion_fig2_style_delay() {
        // One machine, job 0 scheduled at [6,10) behind its own release-like
        // predecessor; job 1 (ready 0, duration 9) inserts before it and
        // pushes its start 6 -> 9.
        let inst = Instance::new(
            "",
            2,
            vec![vec![1, 0], vec![0]],
            vec![vec![6, 4], vec![9]],
        )
        .unwrap()
        .into_shared();
        let mut s = State::reset(inst, Semantics::Push);
        s.step(op(0, 0)).unwrap();
        s.step(op(0, 1)).unwrap();
        assert_eq!(s.start_time(op(0, 1)), Some(6));
        s.step(op(1, 0)).unwrap();
        assert_eq!(s.start_time(op(1, 0)), Some(0));
        assert_eq!(s.start_time(op(0, 1)), Some(9));
    }

    #[test]
    fn no_push_requires_fitting_gap() {
        let inst = Instance::new(
            "",
            2,
            vec![vec![1, 0], vec![0]],
            vec![vec![6, 4], vec![9]],
        )
        .unwrap()
        .into_shared();
        let mut s = State::reset(inst, Semantics::NoPush);
        s.step(op(0, 0)).unwrap();
        s.step(op(0, 1)).unwrap();
        // The [0,6) gap does not fit 9 time units: append instead.
        s.step(op(1, 0)).unwrap();
        assert_eq!(s.start_time(op(1, 0)), Some(10));
        assert_eq!(s.start_time(op(0, 1)), Some(6));
    }

    fn spt_rollout(mut s: State) -> State {
        while !s.is_terminal() {
            let a = s
                .eligible_actions()
                .into_iter()
                .min_by_key(|&a| (s.inst.proc(a), a.job))
                .unwrap();
            s.step(a).unwrap();
        }
        s
    }

    #[test]
    fn tiny_spt_rollout_telescopes() {
        let s0 = State::reset(tiny(), Semantics::Push);
        let h0 = s0.lower_bound();
        let mut s = s0;
        let mut total_reward = 0;
        while !s.is_terminal() {
            let a = s
                .eligible_actions()
                .into_iter()
                .min_by_key(|&a| (s.inst.proc(a), a.job))
                .unwrap();
            total_reward += s.step(a).unwrap().reward;
        }
        assert_eq!(s.makespan().unwrap(), 7);
        assert_eq!(total_reward, h0 - 7);
        assert_eq!(total_reward, -1);
    }

    #[test]
    fn terminal_lower_bound_equals_makespan() {
        let s = spt_rollout(State::reset(tiny(), Semantics::Push));
        assert_eq!(s.lower_bound(), s.makespan().unwrap());
        assert_eq!(s.critical_path_makespan().unwrap(), s.makespan().unwrap());
    }

    #[test]
    fn single_op_instance() {
        let inst = Instance::new("", 1, vec![vec![0]], vec![vec![9]]).unwrap().into_shared();
        let mut s = State::reset(inst, Semantics::Push);
        s.step(op(0, 0)).unwrap();
        assert_eq!(s.lower_bound(), 9);
        assert_eq!(s.makespan().unwrap(), 9);
    }

    #[test]
    fn makespan_requires_terminal() {
        let s = State::reset(tiny(), Semantics::Push);
        assert!(matches!(s.makespan(), Err(EnvError::NotTerminal { .. })));
        assert!(matches!(s.critical_path_makespan(), Err(EnvError::NotTerminal { .. })));
    }

    #[test]
    fn node_features_scale() {
        let s = State::reset(tiny(), Semantics::Push);
        let feats = s.node_features(1000.0);
        assert_eq!(feats[0], [0.0, 0.003]);
        assert_eq!(feats[1], [0.0, 0.005]);
        assert_eq!(feats[2], [0.0, 0.002]);
        assert_eq!(feats[3], [0.0, 0.006]);
        let raw = s.node_features(1.0);
        assert_eq!(raw[3], [0.0, 6.0]);
        let mut s2 = State::reset(tiny(), Semantics::Push);
        s2.step(op(1, 0)).unwrap();
        assert_eq!(s2.node_features(1000.0)[2][0], 1.0);
    }

    #[test]
    fn adjacency_initial_tiny_is_conjunctions_only() {
        let s = State::reset(tiny(), Semantics::Push);
        let adj = s.adjacency(AdjacencyMode::AddingArc);
        assert_eq!(adj, vec![vec![], vec![0], vec![], vec![2]]);
        assert_eq!(adj.iter().map(Vec::len).sum::<usize>(), 2);
    }

    #[test]
    fn adjacency_removing_arc_counts_on_3x3() {
        // Fig. 1(a)-shaped instance: 3 jobs, 3 machines, each route a
        // permutation. 6 conjunctions + 2 * 3 machines * C(3,2) = 24 entries.
        let inst = generate_taillard(3, 3, 1, 9, 0).into_shared();
        let s = State::reset(inst, Semantics::Push);
        let removing = s.adjacency(AdjacencyMode::RemovingArc);
        assert_eq!(removing.iter().map(Vec::len).sum::<usize>(), 6 + 18);
        let adding = s.adjacency(AdjacencyMode::AddingArc);
        assert_eq!(adding.iter().map(Vec::len).sum::<usize>(), 6);
    }

    #[test]
    fn adjacency_modes_agree_at_terminal() {
        let s = spt_rollout(State::reset(generate_taillard(4, 3, 1, 9, 5).into_shared(), Semantics::Push));
        assert_eq!(s.adjacency(AdjacencyMode::AddingArc), s.adjacency(AdjacencyMode::RemovingArc));
    }

    #[test]
    fn verify_schedule_catches_corruption() {
        let mut s = spt_rollout(State::reset(tiny(), Semantics::Push));
        assert!(s.verify_schedule().is_empty());
        s.corrupt_start_for_test(op(0, 0), -1);
        let v = s.verify_schedule();
        assert!(v.iter().any(|m| m.contains("negative start")), "{v:?}");
        let mut s2 = spt_rollout(State::reset(tiny(), Semantics::Push));
        s2.corrupt_start_for_test(op(1, 0), 0);
        s2.corrupt_start_for_test(op(0, 1), 0); // overlaps O10 on machine 1
        let v2 = s2.verify_schedule();
        assert!(v2.iter().any(|m| m.contains("machine overlap")), "{v2:?}");
    }

    #[test]
    fn rollout_invariants_random_policy() {
        use rand::prelude::*;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for trial in 0..200 {
            let jobs = rng.random_range(1..=5);
            let machines = rng.random_range(1..=5);
            let inst = generate_taillard(jobs, machines, 1, 20, trial).into_shared();
            let mut s = State::reset(inst.clone(), if trial % 2 == 0 { Semantics::Push } else { Semantics::NoPush });
            let h0 = s.lower_bound();
            let mut total = 0;
            let mut steps = 0;
            let mut prev_h = h0;
            while !s.is_terminal() {
                let actions = s.eligible_actions();
                let a = actions[rng.random_range(0..actions.len())];
                let out = s.step(a).unwrap();
                assert!(out.reward <= 0, "monotone H violated");
                assert!(out.h_after >= prev_h);
                prev_h = out.h_after;
                total += out.reward;
                steps += 1;
            }
            assert_eq!(steps, inst.num_ops());
            let makespan = s.makespan().unwrap();
            assert_eq!(total, h0 - makespan, "telescoping failed on trial {trial}");
            assert_eq!(s.critical_path_makespan().unwrap(), makespan);
            assert!(s.verify_schedule().is_empty());
            // scheduled clb equals completion
            for op in inst.ops() {
                assert_eq!(
                    s.completion_bound(op),
                    s.start_time(op).unwrap() + inst.proc(op)
                );
            }
        }
    }
}
