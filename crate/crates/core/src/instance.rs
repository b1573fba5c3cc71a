//! JSSP instances: domain types, text formats, and random generation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// Time unit used for processing times, start times and makespans.
pub type Time = i64;

/// An operation, identified by its job and its position within the job route.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub struct OpId {
    pub job: usize,
    pub pos: usize,
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "O{}.{}", self.job, self.pos)
    }
}

/// An immutable job-shop instance.
///
/// `routes[i][j]` is the machine of the j-th operation of job i and
/// `proc_times[i][j]` its duration. Jobs may have different numbers of
/// operations; Taillard-style instances have exactly `num_machines`
/// operations per job, each route a machine permutation.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Instance {
    pub id: String,
    pub num_jobs: usize,
    pub num_machines: usize,
    pub routes: Vec<Vec<usize>>,
    pub proc_times: Vec<Vec<Time>>,
    pub release: Vec<Time>,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        num_machines: usize,
        routes: Vec<Vec<usize>>,
        proc_times: Vec<Vec<Time>>,
    ) -> Result<Self, Vec<String>> {
        let num_jobs = routes.len();
        let inst = Instance {
            id: id.into(),
            num_jobs,
            num_machines,
            release: vec![0; num_jobs],
            routes,
            proc_times,
        };
        let errs = inst.validate();
        if errs.is_empty() {
            Ok(inst)
        } else {
            Err(errs)
        }
    }

    /// All invariant violations, empty when the instance is well formed.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.routes.len() != self.num_jobs || self.proc_times.len() != self.num_jobs {
            errs.push(format!(
                "dimension mismatch: {} routes, {} proc_time rows, num_jobs {}",
                self.routes.len(),
                self.proc_times.len(),
                self.num_jobs
            ));
            return errs;
        }
        if self.release.len() != self.num_jobs {
            errs.push("dimension mismatch: release length != num_jobs".into());
        }
        for (i, (route, times)) in self.routes.iter().zip(&self.proc_times).enumerate() {
            if route.len() != times.len() {
                errs.push(format!(
                    "dimension mismatch: job {i} has {} machines but {} durations",
                    route.len(),
                    times.len()
                ));
            }
            for (j, &m) in route.iter().enumerate() {
                if m >= self.num_machines {
                    errs.push(format!("machine id {m} out of range at job {i} op {j}"));
                }
            }
            for (j, &p) in times.iter().enumerate() {
                if p < 1 {
                    errs.push(format!("nonpositive duration {p} at job {i} op {j}"));
                }
            }
        }
        for (i, &r) in self.release.iter().enumerate() {
            if r < 0 {
                errs.push(format!("negative release time {r} for job {i}"));
            }
        }
        errs
    }

    pub fn num_ops(&self) -> usize {
        self.routes.iter().map(Vec::len).sum()
    }

    pub fn ops_in_job(&self, job: usize) -> usize {
        self.routes[job].len()
    }

    /// Flat array index of an operation (jobs laid out consecutively).
    pub fn flat(&self, op: OpId) -> usize {
        self.routes[..op.job].iter().map(Vec::len).sum::<usize>() + op.pos
    }

    pub fn op_from_flat(&self, mut flat: usize) -> OpId {
        for (job, route) in self.routes.iter().enumerate() {
            if flat < route.len() {
                return OpId { job, pos: flat };
            }
            flat -= route.len();
        }
        panic!("flat index out of range");
    }

    /// Flat index of each job's first operation (prefix offsets).
    pub fn job_offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.num_jobs);
        let mut acc = 0;
        for route in &self.routes {
            offs.push(acc);
            acc += route.len();
        }
        offs
    }

    pub fn machine(&self, op: OpId) -> usize {
        self.routes[op.job][op.pos]
    }

    pub fn proc(&self, op: OpId) -> Time {
        self.proc_times[op.job][op.pos]
    }

    pub fn ops(&self) -> impl Iterator<Item = OpId> + '_ {
        self.routes
            .iter()
            .enumerate()
            .flat_map(|(job, route)| (0..route.len()).map(move |pos| OpId { job, pos }))
    }

    /// Whether every job visits every machine exactly once.
    pub fn is_permutation_shop(&self) -> bool {
        self.routes.iter().all(|route| {
            let mut seen = vec![false; self.num_machines];
            route.len() == self.num_machines && route.iter().all(|&m| !std::mem::replace(&mut seen[m], true))
        })
    }

    pub fn into_shared(self) -> Arc<Instance> {
        Arc::new(self)
    }
}

/// Supported instance text formats.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum InstanceFormat {
    /// Header `num_jobs num_machines`, then one line per job of
    /// `machine_id proc_time` pairs, machine ids 0-based.
    Standard,
    /// Header, a processing-time matrix, then a machine-order matrix with
    /// 1-based machine ids.
    Taillard,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}, col {col}: expected integer, found {found:?}")]
    BadToken { line: usize, col: usize, found: String },
    #[error("line {line}, col {col}: unexpected end of input ({expected})")]
    UnexpectedEof { line: usize, col: usize, expected: String },
    #[error("line {line}, col {col}: {msg}")]
    Invalid { line: usize, col: usize, msg: String },
}

struct TokenScanner<'a> {
    tokens: std::vec::IntoIter<(usize, usize, &'a str)>,
    line: usize,
    col: usize,
}

impl<'a> TokenScanner<'a> {
    fn new(text: &'a str) -> Self {
        let mut tokens = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let mut col = 0;
            for tok in line.split_whitespace() {
                // byte offset is good enough for ASCII numeric files
                col = line[col..].find(tok).map(|o| o + col).unwrap_or(col);
                tokens.push((ln + 1, col + 1, tok));
                col += tok.len();
            }
        }
        TokenScanner {
            tokens: tokens.into_iter(),
            line: 1,
            col: 1,
        }
    }

    fn next_int(&mut self, expected: &str) -> Result<i64, ParseError> {
        match self.tokens.next() {
            Some((line, col, tok)) => {
                self.line = line;
                self.col = col;
                tok.parse().map_err(|_| ParseError::BadToken {
                    line,
                    col,
                    found: tok.to_string(),
                })
            }
            None => Err(ParseError::UnexpectedEof {
                line: self.line,
                col: self.col,
                expected: expected.to_string(),
            }),
        }
    }

    fn next_count(&mut self, expected: &str) -> Result<usize, ParseError> {
        let v = self.next_int(expected)?;
        if v < 0 {
            return Err(self.invalid(format!("{expected} must be nonnegative, got {v}")));
        }
        Ok(v as usize)
    }

    fn invalid(&self, msg: String) -> ParseError {
        ParseError::Invalid {
            line: self.line,
            col: self.col,
            msg,
        }
    }
}

/// Parses an instance from text in the declared format. Release times are 0.
pub fn parse_instance(text: &str, format: InstanceFormat) -> Result<Instance, ParseError> {
    let mut sc = TokenScanner::new(text);
    let num_jobs = sc.next_count("num_jobs")?;
    let num_machines = sc.next_count("num_machines")?;
    if num_jobs == 0 || num_machines == 0 {
        return Err(sc.invalid("num_jobs and num_machines must be positive".into()));
    }
    let (routes, proc_times) = match format {
        InstanceFormat::Standard => {
            let mut routes = Vec::with_capacity(num_jobs);
            let mut times = Vec::with_capacity(num_jobs);
            for _ in 0..num_jobs {
                let mut route = Vec::with_capacity(num_machines);
                let mut row = Vec::with_capacity(num_machines);
                for _ in 0..num_machines {
                    let m = sc.next_count("machine id")?;
                    if m >= num_machines {
                        return Err(sc.invalid(format!("machine id {m} out of range")));
                    }
                    let p = sc.next_int("processing time")?;
                    if p < 1 {
                        return Err(sc.invalid(format!("nonpositive duration {p}")));
                    }
                    route.push(m);
                    row.push(p);
                }
                routes.push(route);
                times.push(row);
            }
            (routes, times)
        }
        InstanceFormat::Taillard => {
            let mut times = Vec::with_capacity(num_jobs);
            for _ in 0..num_jobs {
                let mut row = Vec::with_capacity(num_machines);
                for _ in 0..num_machines {
                    let p = sc.next_int("processing time")?;
                    if p < 1 {
                        return Err(sc.invalid(format!("nonpositive duration {p}")));
                    }
                    row.push(p);
                }
                times.push(row);
            }
            let mut routes = Vec::with_capacity(num_jobs);
            for _ in 0..num_jobs {
                let mut route = Vec::with_capacity(num_machines);
                let mut seen = vec![false; num_machines];
                for _ in 0..num_machines {
                    let m = sc.next_count("machine id")?;
                    if m < 1 || m > num_machines {
                        return Err(sc.invalid(format!("machine id {m} out of range (1-based)")));
                    }
                    if std::mem::replace(&mut seen[m - 1], true) {
                        return Err(sc.invalid(format!("route not a permutation: machine {m} repeated")));
                    }
                    route.push(m - 1);
                }
                routes.push(route);
            }
            (routes, times)
        }
    };
    Instance::new("", num_machines, routes, proc_times)
        .map_err(|errs| sc.invalid(errs.join("; ")))
}

#[derive(Debug, thiserror::Error)]
pub enum WriteError {
    #[error("Taillard format requires every route to be a machine permutation (job {0} is not)")]
    NotPermutation(usize),
}

/// Renders an instance in the given format; `parse_instance` round-trips it.
pub fn write_instance(inst: &Instance, format: InstanceFormat) -> Result<String, WriteError> {
    let mut out = format!("{} {}\n", inst.num_jobs, inst.num_machines);
    match format {
        InstanceFormat::Standard => {
            for (route, times) in inst.routes.iter().zip(&inst.proc_times) {
                let row: Vec<String> = route
                    .iter()
                    .zip(times)
                    .map(|(m, p)| format!("{m} {p}"))
                    .collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        InstanceFormat::Taillard => {
            if !inst.is_permutation_shop() {
                let bad = inst
                    .routes
                    .iter()
                    .position(|r| {
                        let mut seen = vec![false; inst.num_machines];
                        r.len() != inst.num_machines
                            || r.iter().any(|&m| std::mem::replace(&mut seen[m], true))
                    })
                    .unwrap_or(0);
                return Err(WriteError::NotPermutation(bad));
            }
            for times in &inst.proc_times {
                let row: Vec<String> = times.iter().map(Time::to_string).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
            for route in &inst.routes {
                let row: Vec<String> = route.iter().map(|m| (m + 1).to_string()).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
    }
    Ok(out)
}

/// Taillard-style random instance: each route an independent uniform machine
/// permutation, durations uniform on `[lo, hi]`. Deterministic given the seed.
pub fn generate_taillard(
    num_jobs: usize,
    num_machines: usize,
    lo: Time,
    hi: Time,
    seed: u64,
) -> Instance {
    assert!(num_jobs >= 1 && num_machines >= 1, "dimensions must be positive");
    assert!(1 <= lo && lo <= hi, "need 1 <= lo <= hi");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut proc_times = Vec::with_capacity(num_jobs);
    let mut routes = Vec::with_capacity(num_jobs);
    for _ in 0..num_jobs {
        proc_times.push((0..num_machines).map(|_| rng.random_range(lo..=hi)).collect());
        let mut route: Vec<usize> = (0..num_machines).collect();
        route.shuffle(&mut rng);
        routes.push(route);
    }
    Instance {
        id: format!("gen-{num_jobs}x{num_machines}-s{seed}"),
        num_jobs,
        num_machines,
        routes,
        proc_times,
        release: vec![0; num_jobs],
    }
}

/// Minimal-standard linear congruential generator used by the published
/// Taillard benchmark suite (Bratley-Fox-Schrage form, modulus 2^31 - 1).
struct TaillardRng {
    seed: i64,
}

impl TaillardRng {
    fn new(seed: i64) -> Self {
        TaillardRng { seed }
    }

    /// Uniform integer in `[low, high]`, advancing the seed.
    fn unif(&mut self, low: i64, high: i64) -> i64 {
        const M: i64 = 2_147_483_647;
        const A: i64 = 16_807;
        const B: i64 = 127_773;
        const C: i64 = 2_836;
        let k = self.seed / B;
        self.seed = A * (self.seed % B) - k * C;
        if self.seed < 0 {
            self.seed += M;
        }
        let value = self.seed as f64 / M as f64;
        low + (value * (high - low + 1) as f64) as i64
    }
}

/// Regenerates a published Taillard benchmark instance from its two seeds:
/// durations first (row-major, uniform on 1..=99), then each job's machine
/// order as an identity permutation shuffled left to right.
pub fn taillard_benchmark_instance(
    id: impl Into<String>,
    num_jobs: usize,
    num_machines: usize,
    time_seed: i64,
    machine_seed: i64,
) -> Instance {
    let mut time_rng = TaillardRng::new(time_seed);
    let proc_times: Vec<Vec<Time>> = (0..num_jobs)
        .map(|_| (0..num_machines).map(|_| time_rng.unif(1, 99)).collect())
        .collect();
    let mut machine_rng = TaillardRng::new(machine_seed);
    let routes: Vec<Vec<usize>> = (0..num_jobs)
        .map(|_| {
            let mut route: Vec<usize> = (0..num_machines).collect();
            for j in 0..num_machines {
                let swap = machine_rng.unif(j as i64, num_machines as i64 - 1) as usize;
                route.swap(j, swap);
            }
            route
        })
        .collect();
    Instance {
        id: id.into(),
        num_jobs,
        num_machines,
        routes,
        proc_times,
        release: vec![0; num_jobs],
    }
}

/// `(time_seed, machine_seed, best_known_upper_bound)` for Ta01..Ta10 (15x15).
pub const TAILLARD_15X15: [(i64, i64, Time); 10] = [
    (840_612_802, 398_197_754, 1231),
    (1_314_640_371, 386_720_536, 1244),
    (1_227_221_349, 316_176_388, 1218),
    (342_269_428, 1_806_358_582, 1175),
    (1_603_221_416, 1_501_949_241, 1224),
    (1_357_584_978, 1_734_077_082, 1238),
    (44_531_661, 1_374_316_395, 1227),
    (302_545_136, 2_092_186_050, 1217),
    (1_153_780_144, 1_393_392_374, 1274),
    (73_896_786, 1_544_979_948, 1241),
];

/// The ten 15x15 Taillard benchmark instances Ta01..Ta10.
pub fn taillard_15x15_benchmark() -> Vec<Instance> {
    TAILLARD_15X15
        .iter()
        .enumerate()
        .map(|(i, &(ts, ms, _))| {
            taillard_benchmark_instance(format!("Ta{:02}", i + 1), 15, 15, ts, ms)
        })
        .collect()
}
