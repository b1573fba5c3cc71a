//! Command-line front end: instance generation, solving, training,
//! batch evaluation, the exact oracle, and Gantt-chart rendering.
//!
//! Exit codes: 0 success, 1 infeasible/failed verification, 2 usage or
//! I/O errors (clap uses 2 for bad flags on its own).

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use jobshop_core::env::{Schedule, Semantics, State};
use jobshop_core::instance::{
    generate_taillard, parse_instance, write_instance, Instance, InstanceFormat, Time,
};
use jobshop_core::oracle::{optimal_makespan, Proof};
use jobshop_core::policy::{GinPolicy, PolicyConfig};
use jobshop_core::ppo::{self, EvalReport, TrainConfig};
use jobshop_core::rules::{run_pdr, RuleKind};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

mod gantt;

/// Verification failures and other infeasibility: exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Infeasible(String);

#[derive(Parser)]
#[command(name = "jobshop", version, about = "Job-shop scheduling toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum FormatArg {
    Standard,
    Taillard,
}

impl From<FormatArg> for InstanceFormat {
    fn from(f: FormatArg) -> InstanceFormat {
        match f {
            FormatArg::Standard => InstanceFormat::Standard,
            FormatArg::Taillard => InstanceFormat::Taillard,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum SemanticsArg {
    Push,
    NoPush,
}

impl From<SemanticsArg> for Semantics {
    fn from(s: SemanticsArg) -> Semantics {
        match s {
            SemanticsArg::Push => Semantics::Push,
            SemanticsArg::NoPush => Semantics::NoPush,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate random instances plus a manifest file.
    Gen {
        #[arg(long, default_value_t = 6)]
        jobs: usize,
        #[arg(long, default_value_t = 6)]
        machines: usize,
        /// Duration range, inclusive.
        #[arg(long, default_value_t = 1)]
        lo: Time,
        #[arg(long, default_value_t = 99)]
        hi: Time,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Solve one instance with a dispatching rule or a trained policy.
    Solve {
        instance: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Standard)]
        format: FormatArg,
        /// spt | mwkr | fdd-mwkr | mopnr | random | learned
        #[arg(long)]
        method: String,
        /// Checkpoint path; required for --method learned.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Seed for the random rule.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = SemanticsArg::Push)]
        semantics: SemanticsArg,
        /// Where to write the schedule JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the policy; writes checkpoints and a learning-curve CSV.
    Train {
        /// JSON file with training settings (defaults apply when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// key=value overrides applied after --config.
        #[arg(long = "set")]
        sets: Vec<String>,
        /// Warm-start from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Seed for fresh parameter initialization.
        #[arg(long, default_value_t = 0)]
        policy_seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate methods over a manifest of instances; emits CSV.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Standard)]
        format: FormatArg,
        /// Comma-separated: spt,mwkr,fdd-mwkr,mopnr,random,learned:<ckpt>
        #[arg(long)]
        methods: String,
        /// Optional references file: lines of "instance_id value".
        #[arg(long)]
        refs: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = SemanticsArg::Push)]
        semantics: SemanticsArg,
        /// CSV output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact optimal makespan by branch and bound (small instances only).
    Oracle {
        instance: PathBuf,
        #[arg(long, value_enum, default_value_t = FormatArg::Standard)]
        format: FormatArg,
        #[arg(long, default_value_t = 10_000_000)]
        node_limit: u64,
        /// Attempt instances beyond the size guard anyway.
        #[arg(long)]
        force: bool,
    },
    /// Render a schedule JSON as an SVG Gantt chart.
    Gantt {
        schedule: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Infeasible>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen { jobs, machines, lo, hi, count, seed, out_dir } => {
            cmd_gen(jobs, machines, lo, hi, count, seed, &out_dir)
        }
        Cmd::Solve { instance, format, method, checkpoint, seed, semantics, out } => cmd_solve(
            &instance,
            format.into(),
            &method,
            checkpoint.as_deref(),
            seed,
            semantics.into(),
            out.as_deref(),
        ),
        Cmd::Train { config, sets, resume, policy_seed, out_dir } => {
            cmd_train(config.as_deref(), &sets, resume.as_deref(), policy_seed, &out_dir)
        }
        Cmd::Eval { manifest, format, methods, refs, seed, semantics, out } => cmd_eval(
            &manifest,
            format.into(),
            &methods,
            refs.as_deref(),
            seed,
            semantics.into(),
            out.as_deref(),
        ),
        Cmd::Oracle { instance, format, node_limit, force } => {
            cmd_oracle(&instance, format.into(), node_limit, force)
        }
        Cmd::Gantt { schedule, out } => cmd_gantt(&schedule, &out),
    }
}

fn cmd_gen(
    jobs: usize,
    machines: usize,
    lo: Time,
    hi: Time,
    count: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let mut manifest = String::new();
    for i in 0..count {
        let mut inst = generate_taillard(jobs, machines, lo, hi, seed.wrapping_add(i as u64));
        inst.id = format!("gen{jobs}x{machines}-s{seed}-{i:04}");
        let file = format!("{}.txt", inst.id);
        let body = write_instance(&inst, InstanceFormat::Standard)
            .expect("standard format never fails");
        std::fs::write(out_dir.join(&file), body)?;
        writeln!(manifest, "{} {}", inst.id, file).unwrap();
    }
    std::fs::write(out_dir.join("manifest.txt"), manifest)?;
    println!("wrote {count} instances and manifest.txt to {}", out_dir.display());
    Ok(())
}

fn load_instance(path: &Path, format: InstanceFormat) -> Result<Instance> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut inst = parse_instance(&text, format)
        .with_context(|| format!("parsing {}", path.display()))?;
    inst.id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(inst)
}

/// Runs one method on one instance; returns the terminal state and timing.
fn dispatch(
    inst: Arc<Instance>,
    method: &str,
    checkpoint: Option<&Path>,
    seed: u64,
    semantics: Semantics,
) -> Result<(State, f64)> {
    if method == "learned" {
        let path = checkpoint
            .ok_or_else(|| anyhow!("--method learned requires --checkpoint"))?;
        let mut policy = GinPolicy::load_checkpoint(path, None)
            .with_context(|| format!("loading checkpoint {}", path.display()))?;
        let started = Instant::now();
        let state = ppo::greedy_rollout(&mut policy, inst, semantics)?;
        Ok((state, started.elapsed().as_secs_f64() * 1e3))
    } else {
        let rule = RuleKind::from_name(method, seed)
            .ok_or_else(|| anyhow!("unknown method {method:?}"))?;
        let r = run_pdr(inst, rule, semantics);
        Ok((r.state, r.wall_time.as_secs_f64() * 1e3))
    }
}

fn cmd_solve(
    instance: &Path,
    format: InstanceFormat,
    method: &str,
    checkpoint: Option<&Path>,
    seed: u64,
    semantics: Semantics,
    out: Option<&Path>,
) -> Result<()> {
    let inst = load_instance(instance, format)?.into_shared();
    let (state, time_ms) = dispatch(inst.clone(), method, checkpoint, seed, semantics)?;
    let violations = state.verify_schedule();
    if !violations.is_empty() {
        return Err(Infeasible(format!(
            "schedule failed verification: {}",
            violations.join("; ")
        ))
        .into());
    }
    let schedule = state.to_schedule().expect("terminal state");
    if let Some(path) = out {
        std::fs::write(path, serde_json::to_string_pretty(&schedule)?)?;
    }
    println!(
        "{} {} makespan={} time_ms={:.3}",
        inst.id, method, schedule.makespan, time_ms
    );
    Ok(())
}

fn cmd_train(
    config: Option<&Path>,
    sets: &[String],
    resume: Option<&Path>,
    policy_seed: u64,
    out_dir: &Path,
) -> Result<()> {
    let mut cfg: TrainConfig = match config {
        Some(path) => serde_json::from_str(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?,
        )
        .with_context(|| format!("parsing {}", path.display()))?,
        None => TrainConfig::default(),
    };
    for pair in sets {
        cfg.apply_kv(pair).map_err(|e| anyhow!(e))?;
    }
    let policy = match resume {
        Some(path) => GinPolicy::load_checkpoint(path, None)
            .with_context(|| format!("loading checkpoint {}", path.display()))?,
        None => GinPolicy::new(PolicyConfig::default(), policy_seed),
    };
    std::fs::create_dir_all(out_dir)?;
    let curve_path = out_dir.join("curve.csv");
    let resuming = resume.is_some() && curve_path.exists();
    let mut curve = if resuming {
        // continue an interrupted run's curve instead of truncating it
        std::fs::OpenOptions::new().append(true).open(&curve_path)?
    } else {
        let mut f = std::fs::File::create(&curve_path)?;
        use std::io::Write;
        writeln!(
            f,
            "iteration,instances_seen,train_makespan,validation_makespan,loss_clip,loss_value,entropy"
        )?;
        f
    };
    let offset = if resuming { count_curve_rows(&curve_path)? } else { 0 };
    let mut on_row = |row: &ppo::CurveRow| {
        use std::io::Write;
        let val = row
            .validation_makespan
            .map(|v| format!("{v:.4}"))
            .unwrap_or_default();
        writeln!(
            curve,
            "{},{},{:.4},{},{:.6},{:.6},{:.6}",
            row.iteration + offset,
            row.instances_seen,
            row.train_makespan,
            val,
            row.loss_clip,
            row.loss_value,
            row.entropy
        )
        .expect("writing curve row");
    };
    let result = ppo::train(policy, &cfg, Some(&mut on_row))?;
    result.policy.save_checkpoint(&out_dir.join("checkpoint.json"))?;
    result.best_policy.save_checkpoint(&out_dir.join("best.json"))?;
    println!(
        "trained {} iterations; best validation makespan {:.4}",
        cfg.iterations, result.best_validation
    );
    Ok(())
}

fn count_curve_rows(path: &Path) -> Result<usize> {
    // exclude the header
    Ok(std::fs::read_to_string(path)?.lines().count().saturating_sub(1))
}

fn read_refs(path: &Path) -> Result<std::collections::HashMap<String, Time>> {
    let mut refs = std::collections::HashMap::new();
    for (lineno, line) in std::fs::read_to_string(path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let (id, value) = (it.next(), it.next());
        match (id, value) {
            (Some(id), Some(v)) => {
                let v: Time = v
                    .parse()
                    .with_context(|| format!("{}:{}: bad reference", path.display(), lineno + 1))?;
                refs.insert(id.to_string(), v);
            }
            _ => bail!("{}:{}: expected \"instance_id value\"", path.display(), lineno + 1),
        }
    }
    Ok(refs)
}

fn cmd_eval(
    manifest: &Path,
    format: InstanceFormat,
    methods: &str,
    refs: Option<&Path>,
    seed: u64,
    semantics: Semantics,
    out: Option<&Path>,
) -> Result<()> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut instances = Vec::new();
    for (lineno, line) in std::fs::read_to_string(manifest)
        .with_context(|| format!("reading {}", manifest.display()))?
        .lines()
        .enumerate()
    {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, file) = line
            .split_once(' ')
            .ok_or_else(|| anyhow!("{}:{}: expected \"id file\"", manifest.display(), lineno + 1))?;
        let mut inst = load_instance(&dir.join(file.trim()), format)?;
        inst.id = id.to_string();
        instances.push(inst.into_shared());
    }
    let references = match refs {
        Some(path) => read_refs(path)?,
        None => Default::default(),
    };

    let mut rows: Vec<EvalReport> = Vec::new();
    for method in methods.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        let (name, checkpoint) = match method.split_once(':') {
            Some(("learned", path)) => ("learned", Some(PathBuf::from(path))),
            None if method == "learned" => bail!("learned method needs learned:<checkpoint>"),
            None => (method, None),
            Some(_) => bail!("unknown method {method:?}"),
        };
        for inst in &instances {
            let (state, time_ms) =
                dispatch(inst.clone(), name, checkpoint.as_deref(), seed, semantics)?;
            let violations = state.verify_schedule();
            if !violations.is_empty() {
                return Err(Infeasible(format!(
                    "{} via {name}: {}",
                    inst.id,
                    violations.join("; ")
                ))
                .into());
            }
            let makespan = state.makespan().expect("terminal");
            rows.push(EvalReport {
                instance_id: inst.id.clone(),
                method: name.to_string(),
                makespan,
                gap: references
                    .get(&inst.id)
                    .map(|&r| (makespan - r) as f64 / r as f64),
                time_ms,
                semantics,
            });
        }
    }

    let mut csv = String::from("instance_id,method,makespan,gap,time_ms,semantics\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{},{:.3},{:?}",
            r.instance_id,
            r.method,
            r.makespan,
            r.gap.map(|g| format!("{g:.6}")).unwrap_or_default(),
            r.time_ms,
            r.semantics
        )
        .unwrap();
    }
    // per-method average rows, in first-appearance order
    let mut seen = Vec::new();
    for r in &rows {
        if !seen.contains(&r.method) {
            seen.push(r.method.clone());
        }
    }
    for method in seen {
        let selected: Vec<&EvalReport> = rows.iter().filter(|r| r.method == method).collect();
        let n = selected.len() as f64;
        let avg_mk = selected.iter().map(|r| r.makespan as f64).sum::<f64>() / n;
        let gaps: Vec<f64> = selected.iter().filter_map(|r| r.gap).collect();
        let avg_gap = if gaps.is_empty() {
            String::new()
        } else {
            format!("{:.6}", gaps.iter().sum::<f64>() / gaps.len() as f64)
        };
        let avg_time = selected.iter().map(|r| r.time_ms).sum::<f64>() / n;
        writeln!(
            csv,
            "AVERAGE,{method},{avg_mk:.4},{avg_gap},{avg_time:.3},{:?}",
            semantics
        )
        .unwrap();
    }
    match out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

/// Beyond this many operations the oracle's worst case is unreasonable.
const ORACLE_OP_GUARD: usize = 25;

fn cmd_oracle(instance: &Path, format: InstanceFormat, node_limit: u64, force: bool) -> Result<()> {
    let inst = load_instance(instance, format)?;
    if inst.num_ops() > ORACLE_OP_GUARD && !force {
        bail!(
            "instance has {} operations; the exact search is only sensible up to ~{ORACLE_OP_GUARD} \
             (pass --force to try anyway)",
            inst.num_ops()
        );
    }
    let (value, proof) = optimal_makespan(&inst, node_limit).map_err(|e| anyhow!(e))?;
    let label = match proof {
        Proof::Optimal => "optimal",
        Proof::LimitHit => "limit-hit (upper bound only)",
    };
    println!("{} {} {}", inst.id, value, label);
    Ok(())
}

fn cmd_gantt(schedule: &Path, out: &Path) -> Result<()> {
    let sched: Schedule = serde_json::from_str(
        &std::fs::read_to_string(schedule)
            .with_context(|| format!("reading {}", schedule.display()))?,
    )
    .with_context(|| format!("parsing {}", schedule.display()))?;
    std::fs::write(out, gantt::render(&sched))?;
    println!("wrote {}", out.display());
    Ok(())
}
