//! Brute-force optimal makespan for tiny instances.
//!
//! Depth-first enumeration of active schedules via Giffler-Thompson
//! branching with incumbent pruning. The optimum is always an active
//! schedule, so the enumeration is exhaustive. Intended for test oracles
//! only; it shares no code with the dispatching environment.

use crate::instance::{Instance, Time};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Proof {
    Optimal,
    LimitHit,
}

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("node_limit must be positive")]
    BadLimit,
}

struct Search<'a> {
    inst: &'a Instance,
    next_pos: Vec<usize>,
    job_ready: Vec<Time>,
    mach_ready: Vec<Time>,
    /// Remaining processing time per job and per machine, for lower bounds.
    job_work: Vec<Time>,
    mach_work: Vec<Time>,
    remaining: usize,
    best: Time,
    nodes: u64,
    node_limit: u64,
    truncated: bool,
}

impl<'a> Search<'a> {
    fn lower_bound(&self, current_max: Time) -> Time {
        let job_lb = (0..self.inst.num_jobs)
            .map(|j| self.job_ready[j] + self.job_work[j])
            .max()
            .unwrap_or(0);
        let mach_lb = (0..self.inst.num_machines)
            .map(|m| self.mach_ready[m] + self.mach_work[m])
            .max()
            .unwrap_or(0);
        current_max.max(job_lb).max(mach_lb)
    }

    fn dfs(&mut self, current_max: Time) {
        if self.remaining == 0 {
            self.best = self.best.min(current_max);
            return;
        }
        if self.lower_bound(current_max) >= self.best {
            return;
        }
        if self.nodes >= self.node_limit {
            self.truncated = true;
            return;
        }
        self.nodes += 1;

        // Giffler-Thompson: find the eligible op with the earliest possible
        // completion; branch over eligible ops on its machine that could
        // start before that completion.
        let mut best_completion = Time::MAX;
        let mut conflict_machine = 0;
        for j in 0..self.inst.num_jobs {
            let pos = self.next_pos[j];
            if pos >= self.inst.ops_in_job(j) {
                continue;
            }
            let m = self.inst.routes[j][pos];
            let est = self.job_ready[j].max(self.mach_ready[m]);
            let ect = est + self.inst.proc_times[j][pos];
            if ect < best_completion {
                best_completion = ect;
                conflict_machine = m;
            }
        }
        let candidates: Vec<usize> = (0..self.inst.num_jobs)
            .filter(|&j| {
                let pos = self.next_pos[j];
                pos < self.inst.ops_in_job(j)
                    && self.inst.routes[j][pos] == conflict_machine
                    && self.job_ready[j].max(self.mach_ready[conflict_machine]) < best_completion
            })
            .collect();

        for j in candidates {
            let pos = self.next_pos[j];
            let m = conflict_machine;
            let p = self.inst.proc_times[j][pos];
            let start = self.job_ready[j].max(self.mach_ready[m]);
            let end = start + p;

            let saved = (self.job_ready[j], self.mach_ready[m]);
            self.next_pos[j] += 1;
            self.job_ready[j] = end;
            self.mach_ready[m] = end;
            self.job_work[j] -= p;
            self.mach_work[m] -= p;
            self.remaining -= 1;

            self.dfs(current_max.max(end));

            self.remaining += 1;
            self.mach_work[m] += p;
            self.job_work[j] += p;
            self.next_pos[j] -= 1;
            self.job_ready[j] = saved.0;
            self.mach_ready[m] = saved.1;
        }
    }
}

/// Optimal makespan, or the best incumbent when the node limit is hit.
pub fn optimal_makespan(inst: &Instance, node_limit: u64) -> Result<(Time, Proof), OracleError> {
    if node_limit == 0 {
        return Err(OracleError::BadLimit);
    }
    let mut mach_work = vec![0; inst.num_machines];
    for op in inst.ops() {
        mach_work[inst.machine(op)] += inst.proc(op);
    }
    let mut search = Search {
        inst,
        next_pos: vec![0; inst.num_jobs],
        job_ready: inst.release.clone(),
        mach_ready: vec![0; inst.num_machines],
        job_work: inst.proc_times.iter().map(|row| row.iter().sum()).collect(),
        mach_work,
        remaining: inst.num_ops(),
        best: Time::MAX,
        nodes: 0,
        node_limit,
        truncated: false,
    };
    search.dfs(0);
    let proof = if search.truncated { Proof::LimitHit } else { Proof::Optimal };
    Ok((search.best, proof))
}
