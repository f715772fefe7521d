use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Result};
use ehpc_core::oracle::{check_dominance, value_iterate, value_iterate_with_slack, GridSpec};
use ehpc_core::policies::{check_uniformization, PolicyKind};
use ehpc_core::rate::{awgn_rate, HALF_LOG2_E};
use ehpc_core::simulator::{
    check_semi_bernoulli, monte_carlo_with_params, renewal_series_lower_bound, MonteCarloConfig,
};
use ehpc_core::solver::{
    bounds_report, compute_params, epoch_stats, is_large_battery, large_battery_threshold,
    theta_bar, BoundsReport, EpochStats, PolicyParams,
};
use ehpc_core::scenario::load_scenario;
use ehpc_core::Scenario;
use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::record::{emit, sig12, RunRecord};
use crate::{Command, Format, GridArgs, McArgs, OutArgs, SweepParam};

/// Bad paths, unreadable or invalid scenarios and bad flag values; exit 2.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(InputError(msg.into()))
}

/// Returns whether every check passed.
pub fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Solve { scenarios, format } => solve(&scenarios, format),
        Command::Simulate {
            scenario,
            policy,
            mc,
            out,
        } => simulate(&scenario, policy, &mc, &out),
        Command::Oracle {
            scenario,
            grid,
            slack,
            format,
        } => oracle(&scenario, &grid, slack, format),
        Command::Verify {
            scenarios,
            mc,
            perturb_q,
            dominance_grid,
            uniform_blocks,
        } => verify(&scenarios, &mc, perturb_q, dominance_grid, uniform_blocks),
        Command::Sweep {
            scenario,
            param,
            values,
            policy,
            mc,
            oracle,
            grid,
            out,
        } => sweep(&scenario, param, &values, policy, &mc, oracle.then_some(&grid), &out),
    }
}

fn scenario_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| input(format!("cannot read {}: {e}", path.display())))?;
    let s = load_scenario(&text).map_err(|e| input(format!("{}: {e}", path.display())))?;
    if s.is_degenerate() {
        warn!("{}: every arrival is zero, all throughputs are 0", path.display());
    }
    Ok(s)
}

fn mc_config(mc: &McArgs) -> Result<MonteCarloConfig> {
    if mc.reps < 2 {
        return Err(input("reps ≥ 2 required for a standard error"));
    }
    if mc.blocks == 0 {
        return Err(input("blocks must be at least 1"));
    }
    Ok(MonteCarloConfig {
        n_blocks: mc.blocks,
        reps: mc.reps,
        base_seed: mc.seed,
        burn_in_blocks: mc.burn_in,
    })
}

fn grid_spec(g: &GridArgs) -> Result<GridSpec> {
    if !(g.tol > 0.0) {
        return Err(input("tol must be positive"));
    }
    if g.grid < 16 || g.actions < 2 {
        return Err(input("grid needs at least 16 battery and 2 action points"));
    }
    Ok(GridSpec {
        n_battery: g.grid,
        n_action: g.actions,
        vi_tolerance: g.tol,
        max_iterations: g.max_iter,
        ..Default::default()
    })
}

#[derive(Serialize)]
struct SolveReport {
    scenario_id: String,
    #[serde(rename = "T")]
    t: u32,
    #[serde(rename = "B")]
    b: f64,
    params: PolicyParams,
    epoch: Option<EpochStats>,
    large_battery: bool,
    large_battery_threshold: f64,
    bounds: BoundsReport,
}

fn solve(paths: &[PathBuf], format: Format) -> Result<bool> {
    let mut reports = Vec::with_capacity(paths.len());
    for path in paths {
        let s = load(path)?;
        let params = compute_params(&s);
        reports.push(SolveReport {
            scenario_id: scenario_id(path),
            t: s.block_len(),
            b: s.battery(),
            params,
            epoch: epoch_stats(&s, &params).ok(),
            large_battery: is_large_battery(&s),
            large_battery_threshold: large_battery_threshold(&s),
            bounds: bounds_report(&s),
        });
    }
    match format {
        Format::Json => {
            let text = if reports.len() == 1 {
                serde_json::to_string_pretty(&reports[0])?
            } else {
                serde_json::to_string_pretty(&reports)?
            };
            println!("{text}");
        }
        Format::Text => {
            for r in &reports {
                print_solve(r);
            }
        }
    }
    Ok(true)
}

fn print_solve(r: &SolveReport) {
    let p = &r.params;
    let b = &r.bounds;
    println!("scenario {} (T={}, B={})", r.scenario_id, r.t, sig12(r.b));
    println!("  E_c        {}", sig12(p.e_c));
    println!("  q          {}", sig12(p.q));
    println!("  p          {}", sig12(p.p));
    println!("  p'         {}", sig12(p.p_prime));
    println!("  mu_tilde   {}", sig12(p.mu_tilde));
    match &r.epoch {
        Some(e) => println!("  epoch      tau={} eps={}", sig12(e.tau), sig12(e.eps)),
        None => println!("  epoch      no regeneration (p = 0)"),
    }
    println!(
        "  large      {} (threshold {})",
        if r.large_battery { "yes" } else { "no" },
        sig12(r.large_battery_threshold)
    );
    println!("  theta_bar  {}", sig12(b.theta_bar));
    println!(
        "  throughput [{}, {}]",
        sig12(b.throughput_lower),
        sig12(b.throughput_upper)
    );
    println!(
        "  capacity   [{}, {}]",
        sig12(b.capacity_lower),
        sig12(b.capacity_upper)
    );
    if let Some(k) = &b.kkt {
        let status = match (k.passed(), k.trivial) {
            (true, true) => "pass (trivial certificate)",
            (true, false) => "pass",
            (false, _) => "FAIL",
        };
        println!("  kkt        {status}");
    }
}

fn run_record(
    id: String,
    s: &Scenario,
    kind: PolicyKind,
    cfg: &MonteCarloConfig,
    theta_vi: Option<f64>,
    timing: bool,
) -> Result<RunRecord> {
    let start = Instant::now();
    let params = compute_params(s);
    let r = monte_carlo_with_params(kind, s, &params, cfg)?;
    let th = theta_bar(s, &params);
    Ok(RunRecord {
        scenario_id: id,
        t: s.block_len(),
        b: s.battery(),
        policy: kind.as_str().to_string(),
        horizon_blocks: cfg.n_blocks,
        reps: cfg.reps,
        mean_bits: r.mean,
        stderr_bits: r.stderr,
        theta_bar: th,
        lower_bound: th - HALF_LOG2_E,
        theta_vi,
        wall_time_s: timing.then(|| start.elapsed().as_secs_f64()),
    })
}

fn simulate(path: &Path, kind: PolicyKind, mc: &McArgs, out: &OutArgs) -> Result<bool> {
    let s = load(path)?;
    let cfg = mc_config(mc)?;
    let rec = run_record(scenario_id(path), &s, kind, &cfg, None, out.timing)?;
    emit(&[rec], out.out.as_deref())?;
    Ok(true)
}

#[derive(Serialize)]
struct OracleReport {
    scenario_id: String,
    theta_vi: f64,
    iterations: usize,
    span: f64,
    delta_grid: Option<f64>,
    /// Grid the refinement started from, when `--slack` is given.
    coarse_grid: Option<GridSpec>,
    theta_bar: f64,
    lower_bound: f64,
    grid: GridSpec,
}

fn oracle(path: &Path, g: &GridArgs, slack: bool, format: Format) -> Result<bool> {
    let s = load(path)?;
    let grid = grid_spec(g)?;
    let (vi, delta) = if slack {
        let r = value_iterate_with_slack(&s, &grid)?;
        (r.fine, Some(r.delta_grid))
    } else {
        (value_iterate(&s, &grid)?, None)
    };
    let th = theta_bar(&s, &compute_params(&s));
    let report = OracleReport {
        scenario_id: scenario_id(path),
        theta_vi: vi.theta_vi,
        iterations: vi.iterations,
        span: vi.span,
        delta_grid: delta,
        coarse_grid: slack.then_some(grid),
        theta_bar: th,
        lower_bound: th - HALF_LOG2_E,
        grid: vi.grid,
    };
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
        Format::Text => {
            println!(
                "scenario {} grid {}x{}",
                report.scenario_id, report.grid.n_battery, report.grid.n_action
            );
            println!("  theta_vi    {}", sig12(report.theta_vi));
            println!("  iterations  {} (span {:.3e})", report.iterations, report.span);
            if let (Some(d), Some(c)) = (report.delta_grid, report.coarse_grid) {
                println!("  delta_grid  {d:.3e} (against {}x{})", c.n_battery, c.n_action);
            }
            println!(
                "  bounds      [{}, {}]",
                sig12(report.lower_bound),
                sig12(report.theta_bar)
            );
        }
    }
    Ok(true)
}

struct Check {
    name: &'static str,
    pass: bool,
    residual: f64,
    note: String,
}

fn check(name: &'static str, pass: bool, residual: f64, note: impl Into<String>) -> Check {
    Check {
        name,
        pass,
        residual,
        note: note.into(),
    }
}

fn verify_one(
    s: &Scenario,
    cfg: &MonteCarloConfig,
    perturb_q: f64,
    dominance_grid: usize,
    uniform_blocks: usize,
) -> Result<Vec<Check>> {
    let params = compute_params(s);
    let report = bounds_report(s);
    let mut out = Vec::new();

    let kkt = report.kkt.as_ref().expect("bounds_report attaches the certificate");
    let note = if kkt.trivial {
        "trivial certificate".to_string()
    } else if kkt.relaxed_lambda0 {
        "lambda0 >= 0 relaxed (no overflow mass)".to_string()
    } else {
        format!("lambda0 {}", sig12(kkt.lambda0))
    };
    out.push(check("kkt", kkt.passed(), kkt.max_residual(), note));

    let mut worst = f64::NEG_INFINITY;
    let mut pass = true;
    for n in [1, 2, 4, 8] {
        let d = check_dominance(s, &params, n, dominance_grid)?;
        worst = worst.max(d.max_violation);
        pass &= d.pass;
    }
    out.push(check("dominance", pass, worst, "N in {1,2,4,8}"));

    let u = check_uniformization(s, uniform_blocks, 0x756e_6966);
    let note = if s.block_len() == 1 {
        "no head slots".to_string()
    } else {
        format!("{} blocks", u.blocks)
    };
    out.push(check("uniformization", u.violations == 0, u.max_end_battery_diff, note));

    match epoch_stats(s, &params) {
        Ok(e) => {
            let r = (e.eps / e.tau - params.q * params.e_c).abs();
            out.push(check("epoch", r <= 1e-9, r, ""));
        }
        Err(_) => out.push(check("epoch", true, 0.0, "no regeneration, skipped")),
    }

    let mc = monte_carlo_with_params(PolicyKind::BlockFfp, s, &params, cfg)?;
    let mut th = report.theta_bar;
    let mut note = format!("mean {} stderr {:.2e}", sig12(mc.mean), mc.stderr);
    if perturb_q != 0.0 {
        // Swap the steady-state term for one built from the faulty fraction.
        let a = (params.p + s.t() * (1.0 - params.p)) / s.t();
        let q = (params.q - perturb_q).clamp(0.0, 1.0);
        th += a * (awgn_rate(q * params.e_c) - awgn_rate(params.q * params.e_c));
        note.push_str(&format!(", q perturbed to {}", sig12(q)));
    }
    let lo = th - HALF_LOG2_E - 3.0 * mc.stderr;
    let hi = th + 3.0 * mc.stderr;
    let miss = (lo - mc.mean).max(mc.mean - hi).max(0.0);
    out.push(check("sandwich", miss == 0.0, miss, note));

    if check_semi_bernoulli(s, params.e_c) {
        let v = renewal_series_lower_bound(s, &params)?;
        let miss = (v - report.theta_bar)
            .max(report.theta_bar - HALF_LOG2_E - v)
            .max(v - 3.0 * mc.stderr - mc.mean)
            .max(0.0);
        out.push(check("renewal", miss == 0.0, miss, format!("series {}", sig12(v))));
    }
    Ok(out)
}

fn verify(
    paths: &[PathBuf],
    mc: &McArgs,
    perturb_q: f64,
    dominance_grid: usize,
    uniform_blocks: usize,
) -> Result<bool> {
    let cfg = mc_config(mc)?;
    if dominance_grid < 3 {
        return Err(input("dominance grid needs at least 3 points"));
    }
    let mut all = true;
    for path in paths {
        let s = load(path)?;
        let id = scenario_id(path);
        for c in verify_one(&s, &cfg, perturb_q, dominance_grid, uniform_blocks)? {
            all &= c.pass;
            println!(
                "{id:<24} {:<15} {}  residual {:.3e}  {}",
                c.name,
                if c.pass { "PASS" } else { "FAIL" },
                c.residual,
                c.note
            );
        }
    }
    println!("{}", if all { "all checks passed" } else { "verification FAILED" });
    Ok(all)
}

fn sweep(
    path: &Path,
    param: SweepParam,
    values: &[String],
    kind: PolicyKind,
    mc: &McArgs,
    grid: Option<&GridArgs>,
    out: &OutArgs,
) -> Result<bool> {
    let base = load(path)?;
    let cfg = mc_config(mc)?;
    let grid = grid.map(grid_spec).transpose()?;
    let values: Vec<&str> = values
        .iter()
        .map(|v| v.trim())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(input("--values needs at least one value"));
    }
    let scenarios = values
        .iter()
        .map(|v| {
            let s = match param {
                SweepParam::B => {
                    let b: f64 = v.parse().map_err(|_| input(format!("bad capacity {v:?}")))?;
                    base.with_battery(b)
                }
                SweepParam::T => {
                    let t: u32 = v.parse().map_err(|_| input(format!("bad block length {v:?}")))?;
                    base.with_block_len(t)
                }
            };
            s.map_err(|e| input(format!("{v}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let id = scenario_id(path);
    let records = scenarios
        .par_iter()
        .map(|s| {
            let vi = match &grid {
                Some(g) => Some(value_iterate(s, g)?.theta_vi),
                None => None,
            };
            run_record(id.clone(), s, kind, &cfg, vi, out.timing)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| anyhow!("{e:#}"))?;
    emit(&records, out.out.as_deref())?;
    Ok(true)
}
