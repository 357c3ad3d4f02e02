//! Command-line front end: `spark`, `branch`, `scan` and `validate`.
//!
//! Exit codes are a stable contract: 0 success, 1 solver or check failure,
//! 2 no sparking voltage found, 64 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint_transversality::{
    adjoint_identity_check, apply_linearized, nullspace_triple, random_domain_state, smallest_singular_values,
    solve_adjoint_w, transversality_crosscheck, transversality_f, MAX_DENSE_NODES,
};
use crate::continuation::{trace_branch, Branch, BranchLimits, TerminationKind};
use crate::discretization::{weighted_inner, GridFunction, RadialGrid, DEFAULT_NODES};
use crate::electron_system::{
    auxiliary_u, auxiliary_u_derivatives, critical_gamma, solve_electron, sparking_voltage, SparkScan,
    DEFAULT_LAMBDA_MAX, DEFAULT_ROOT_TOL,
};
use crate::error::{Error, Result};
use crate::model::{g_fn, in_gamma_region, Parameters};
use crate::steady_state::{ion_consistency, jacobian, residual, State, DEFAULT_FIELD_FLOOR, DEFAULT_NEWTON_TOL};
use crate::validation::{fd_jacobian, richardson, shoot_electron};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_NO_SPARK: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

/// Environment variable capping the number of scan worker threads.
pub const THREADS_ENV: &str = "SPARK_BRANCH_THREADS";

pub const BRANCH_HEADER: &str = "s,lambda,sup_rho_i,sup_rho_e,min_field,norm_state,newton_iters,residual_norm";

/// Flat run configuration. Every key is optional; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub a: f64,
    pub b: f64,
    pub gamma: f64,
    pub k_e: f64,
    pub k_i: f64,
    pub grid_n: usize,
    pub root_tol: f64,
    pub lambda_max: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub max_steps: usize,
    pub sup_density_cap: f64,
    pub lambda_cap: f64,
    pub field_floor: f64,
    pub loop_eps: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let limits = BranchLimits::default();
        Self {
            a: 2.0,
            b: 3.0,
            gamma: 1.0,
            k_e: 1.0,
            k_i: 1.0,
            grid_n: DEFAULT_NODES,
            root_tol: DEFAULT_ROOT_TOL,
            lambda_max: DEFAULT_LAMBDA_MAX,
            newton_tol: DEFAULT_NEWTON_TOL,
            newton_max_iter: limits.newton_max_iter,
            max_steps: limits.max_steps,
            sup_density_cap: limits.sup_density_cap,
            lambda_cap: limits.lambda_cap,
            field_floor: DEFAULT_FIELD_FLOOR,
            loop_eps: limits.loop_eps,
            h_init: limits.h_init,
            h_min: limits.h_min,
            h_max: limits.h_max,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !value.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks everything that can be checked without solving. Tolerances
    /// only need to be positive; a loose one shows up as a failed check.
    pub fn validate(&self) -> Result<()> {
        self.parameters()?;
        RadialGrid::new(self.grid_n)?;
        self.limits().validate()?;
        for (name, v) in [("root_tol", self.root_tol), ("lambda_max", self.lambda_max)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn parameters(&self) -> Result<Parameters> {
        Parameters::new(self.a, self.b, self.gamma, self.k_e, self.k_i)
    }

    pub fn grid(&self) -> Result<RadialGrid> {
        RadialGrid::new(self.grid_n)
    }

    pub fn limits(&self) -> BranchLimits {
        BranchLimits {
            max_steps: self.max_steps,
            sup_density_cap: self.sup_density_cap,
            lambda_cap: self.lambda_cap,
            field_floor: self.field_floor,
            loop_eps: self.loop_eps,
            h_init: self.h_init,
            h_min: self.h_min,
            h_max: self.h_max,
            newton_tol: self.newton_tol,
            newton_max_iter: self.newton_max_iter,
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "spark-branch",
    version,
    about = "Sparking voltage and discharge branches for a radial Townsend model"
)]
pub struct Cli {
    /// JSON run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file; standard output when absent
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of grid nodes, overriding the configuration
    #[arg(long = "grid-n", global = true)]
    pub grid_n: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sparking voltage and the critical electron profile, as JSON
    Spark,
    /// Trace the bifurcating branch, as CSV
    Branch,
    /// Sparking voltage along one parameter axis, as CSV
    Scan {
        #[arg(long, value_enum)]
        axis: Axis,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long)]
        count: usize,
    },
    /// Run the oracle and invariant checks
    Validate {
        /// Print the check names without running them
        #[arg(long)]
        list: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Gamma,
    A,
    B,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Gamma => "gamma",
            Axis::A => "a",
            Axis::B => "b",
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Normal output goes to `out` unless `--out` names a file.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let mut cfg = match &cli.config {
        Some(path) => match RunConfig::load(path) {
            Ok(c) => c,
            Err(e) => return usage(err, &e),
        },
        None => RunConfig::default(),
    };
    if let Some(n) = cli.grid_n {
        cfg.grid_n = n;
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    if let Err(e) = cfg.validate() {
        return usage(err, &e);
    }
    match cli.command {
        Command::Spark => cmd_spark(&cfg, out, err),
        Command::Branch => cmd_branch(&cfg, out, err),
        Command::Scan { axis, from, to, count } => cmd_scan(&cfg, axis, from, to, count, out, err),
        Command::Validate { list } => {
            if list {
                for c in checks() {
                    let _ = writeln!(out, "{}", c.name);
                }
                EXIT_OK
            } else {
                cmd_validate(&cfg, out, err)
            }
        }
    }
}

fn usage(err: &mut dyn Write, e: &Error) -> i32 {
    let _ = writeln!(err, "error: {e}");
    EXIT_USAGE
}

fn failure(err: &mut dyn Write, e: &Error) -> i32 {
    let _ = writeln!(err, "error: {e}");
    match e {
        Error::NoSignChange { .. } => EXIT_NO_SPARK,
        Error::InvalidParameter(_) | Error::InvalidGrid(_) | Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Writes `text` to the configured file, or to `out`.
fn emit(cfg: &RunConfig, text: &str, out: &mut dyn Write) -> io::Result<()> {
    match &cfg.out {
        Some(path) => fs::write(path, text),
        None => {
            out.write_all(text.as_bytes())?;
            out.flush()
        }
    }
}

#[derive(Serialize)]
struct SparkReport<'a> {
    lambda_dagger: f64,
    bracket: [f64; 2],
    #[serde(rename = "residual_B")]
    residual_b: f64,
    in_gamma_region: bool,
    r: &'a [f64],
    u_dagger: &'a [f64],
}

pub fn cmd_spark(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let result = (|| {
        let p = cfg.parameters()?;
        let grid = cfg.grid()?;
        let spark = sparking_voltage(&p, cfg.lambda_max, &grid, cfg.root_tol)?;
        let report = SparkReport {
            lambda_dagger: spark.lambda_dagger,
            bracket: [spark.bracket.0, spark.bracket.1],
            residual_b: spark.residual_b,
            in_gamma_region: in_gamma_region(&p),
            r: grid.nodes(),
            u_dagger: &spark.u_dagger,
        };
        let mut text = serde_json::to_string_pretty(&report)?;
        text.push('\n');
        Ok::<_, Error>(text)
    })();
    match result {
        Ok(text) => match emit(cfg, &text, out) {
            Ok(()) => EXIT_OK,
            Err(e) => failure(err, &e.into()),
        },
        Err(e) => failure(err, &e),
    }
}

/// Shortest round-trip decimal, positional for moderate magnitudes and in
/// exponent form otherwise.
pub fn fmt_float(x: f64) -> String {
    let m = x.abs();
    if x == 0.0 || !x.is_finite() || (1e-4..1e15).contains(&m) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

/// Branch table with the termination comment as the last line.
pub fn branch_csv(branch: &Branch, grid: &RadialGrid) -> String {
    let mut s = String::with_capacity(96 * (branch.points.len() + 2));
    s.push_str(BRANCH_HEADER);
    s.push('\n');
    for pt in &branch.points {
        let d = &pt.diagnostics;
        let cols = [
            fmt_float(pt.s),
            fmt_float(pt.state.lambda),
            fmt_float(d.sup_rho_i),
            fmt_float(d.sup_rho_e),
            fmt_float(d.min_field),
            fmt_float(pt.state.profile_norm(grid)),
            d.newton_iters.to_string(),
            fmt_float(d.residual_norm),
        ];
        s.push_str(&cols.join(","));
        s.push('\n');
    }
    s.push_str(&format!("# termination={}\n", branch.termination.kind));
    s
}

pub fn cmd_branch(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let prepared = cfg.parameters().and_then(|p| Ok((p, cfg.grid()?)));
    let (p, grid) = match prepared {
        Ok(v) => v,
        Err(e) => return failure(err, &e),
    };
    let branch = match trace_branch(&p, &grid, &cfg.limits()) {
        Ok(b) => b,
        Err(e) => return failure(err, &e),
    };
    for w in &branch.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    let _ = writeln!(
        err,
        "termination: {} ({})",
        branch.termination.kind, branch.termination.evidence
    );
    if let Err(e) = emit(cfg, &branch_csv(&branch, &grid), out) {
        return failure(err, &e.into());
    }
    if branch.termination.kind == TerminationKind::NewtonFailure {
        EXIT_FAILURE
    } else {
        EXIT_OK
    }
}

/// One row of a parameter scan.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanRow {
    pub value: f64,
    pub lambda_dagger: f64,
    pub abs_f: f64,
    pub critical_gamma: f64,
    pub status: String,
}

fn scan_row(cfg: &RunConfig, axis: Axis, value: f64, grid: &RadialGrid) -> ScanRow {
    let mut c = cfg.clone();
    match axis {
        Axis::Gamma => c.gamma = value,
        Axis::A => c.a = value,
        Axis::B => c.b = value,
    }
    let eval = || -> Result<(f64, f64, f64)> {
        let p = c.parameters()?;
        let spark = sparking_voltage(&p, c.lambda_max, grid, c.root_tol)?;
        let w = solve_adjoint_w(spark.lambda_dagger, &p, grid)?;
        let f = transversality_f(spark.lambda_dagger, &spark.u_dagger, &w, &p, grid);
        let cg = critical_gamma(spark.lambda_dagger, &p, grid)?;
        Ok((spark.lambda_dagger, f.abs(), cg))
    };
    match eval() {
        Ok((l, f, cg)) => ScanRow {
            value,
            lambda_dagger: l,
            abs_f: f,
            critical_gamma: cg,
            status: "ok".into(),
        },
        Err(e) => ScanRow {
            value,
            lambda_dagger: f64::NAN,
            abs_f: f64::NAN,
            critical_gamma: f64::NAN,
            status: match e {
                Error::NoSignChange { .. } => "no_sign_change".into(),
                other => other.to_string().replace([',', '\n'], ";"),
            },
        },
    }
}

/// Evenly spaced samples of `[from, to]`, evaluated in parallel and
/// returned in axis order.
pub fn scan(cfg: &RunConfig, axis: Axis, from: f64, to: f64, count: usize) -> Result<Vec<ScanRow>> {
    if count == 0 || !(from.is_finite() && to.is_finite()) || from > to || (count > 1 && from == to) {
        return Err(Error::Config(format!(
            "empty scan range [{from}, {to}] with {count} samples"
        )));
    }
    let grid = cfg.grid()?;
    let values: Vec<f64> = (0..count)
        .map(|k| {
            if count == 1 {
                from
            } else {
                from + (to - from) * k as f64 / (count - 1) as f64
            }
        })
        .collect();
    let work = || {
        values
            .par_iter()
            .map(|&v| scan_row(cfg, axis, v, &grid))
            .collect::<Vec<_>>()
    };
    match thread_cap() {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            Ok(pool.install(work))
        }
        None => Ok(work()),
    }
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n: &usize| n > 0)
}

pub fn cmd_scan(
    cfg: &RunConfig,
    axis: Axis,
    from: f64,
    to: f64,
    count: usize,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let rows = match scan(cfg, axis, from, to, count) {
        Ok(r) => r,
        Err(e) => return failure(err, &e),
    };
    let mut s = format!("{},lambda_dagger,abs_F,critical_gamma,status\n", axis.name());
    for r in &rows {
        let cols = [
            fmt_float(r.value),
            fmt_float(r.lambda_dagger),
            fmt_float(r.abs_f),
            fmt_float(r.critical_gamma),
        ];
        s.push_str(&format!("{},{}\n", cols.join(","), r.status));
    }
    match emit(cfg, &s, out) {
        Ok(()) => EXIT_OK,
        Err(e) => failure(err, &e.into()),
    }
}

/// Result of one validation check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub measured: f64,
    pub bound: f64,
    pub pass: bool,
}

impl CheckOutcome {
    fn at_most(measured: f64, bound: f64) -> Self {
        Self {
            measured,
            bound,
            pass: measured <= bound,
        }
    }

    fn at_least(measured: f64, bound: f64) -> Self {
        Self {
            measured,
            bound,
            pass: measured >= bound,
        }
    }
}

pub struct CheckContext {
    pub params: Parameters,
    pub grid: RadialGrid,
    pub config: RunConfig,
}

pub struct Check {
    pub name: &'static str,
    /// How the measured value is compared with the bound.
    pub relation: &'static str,
    pub run: fn(&CheckContext) -> Result<CheckOutcome>,
}

fn spark_of(ctx: &CheckContext) -> Result<crate::electron_system::SparkingResult> {
    sparking_voltage(&ctx.params, ctx.config.lambda_max, &ctx.grid, ctx.config.root_tol)
}

fn delta_sq(grid: &RadialGrid) -> f64 {
    grid.delta() * grid.delta()
}

fn check_trivial_residual(ctx: &CheckContext) -> Result<CheckOutcome> {
    let worst = (1..=20)
        .map(|k| residual(&State::trivial(2.5 * k as f64, &ctx.grid), &ctx.params, &ctx.grid).max_abs())
        .fold(0.0, f64::max);
    Ok(CheckOutcome::at_most(worst, 0.0))
}

fn check_zero_voltage_b(ctx: &CheckContext) -> Result<CheckOutcome> {
    // u'(2) = 1 normalization halved gives the kernel 2 - 2/r
    let sol = solve_electron(1e-12, &ctx.params, &ctx.grid)?;
    Ok(CheckOutcome::at_most((0.5 * sol.b_value - 0.5).abs(), 1e-6))
}

fn check_gamma_region_sign(_ctx: &CheckContext) -> Result<CheckOutcome> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let a = rng.gen_range(0.1..5.0);
        let b = 4.0 * a / std::f64::consts::E * rng.gen_range(1.0001..3.0);
        let p = Parameters::with_unit_mobilities(a, b, 1.0)?;
        let ell = rng.gen_range(0.0..20.0);
        worst = worst.max(g_fn(ell, &p));
    }
    Ok(CheckOutcome {
        measured: worst,
        bound: 0.0,
        pass: worst < 0.0,
    })
}

fn check_auxiliary_u(ctx: &CheckContext) -> Result<CheckOutcome> {
    let mut worst: f64 = 0.0;
    let mut slope_ok = true;
    for lambda in [1.0, 5.0, 20.0, 60.0] {
        slope_ok &= (auxiliary_u_derivatives(lambda, 2.0).1 - 1.0).abs() <= 1e-12;
        for &r in &ctx.grid.nodes()[1..ctx.grid.last()] {
            let (u, du, ddu) = auxiliary_u_derivatives(lambda, r);
            worst = worst.max((ddu + 2.0 / r * du - lambda * lambda / r.powi(4) * u).abs());
        }
    }
    let bound = 5.0 * delta_sq(&ctx.grid);
    Ok(CheckOutcome {
        measured: worst,
        bound,
        pass: slope_ok && worst <= bound,
    })
}

fn check_auxiliary_discrete_order(ctx: &CheckContext) -> Result<CheckOutcome> {
    use crate::discretization::sturm_liouville_rows;
    let mut worst = f64::INFINITY;
    for lambda in [1.0, 5.0, 20.0] {
        let err = |g: &RadialGrid| -> Result<f64> {
            let q: Vec<f64> = g.nodes().iter().map(|r| -lambda * lambda / r.powi(4)).collect();
            let res = sturm_liouville_rows(g, &q)?.apply(&auxiliary_u(lambda, g));
            Ok(res.iter().fold(0.0, |m, v| m.max(v.abs())))
        };
        worst = worst.min((err(&ctx.grid)? / err(&ctx.grid.refined())?).log2());
    }
    Ok(CheckOutcome::at_least(worst, 1.8))
}

fn check_sparking_root(ctx: &CheckContext) -> Result<CheckOutcome> {
    let spark = spark_of(ctx)?;
    Ok(CheckOutcome::at_most(spark.residual_b.abs(), 1e-10))
}

fn check_electron_positivity(ctx: &CheckContext) -> Result<CheckOutcome> {
    let mut worst = f64::INFINITY;
    for l in SparkScan::with_lambda_max(ctx.config.lambda_max).points() {
        let u = solve_electron(l, &ctx.params, &ctx.grid)?.u;
        worst = worst.min(u[1..].iter().copied().fold(f64::INFINITY, f64::min));
    }
    Ok(CheckOutcome {
        measured: worst,
        bound: 0.0,
        pass: worst > 0.0,
    })
}

fn check_comparison(ctx: &CheckContext) -> Result<CheckOutcome> {
    let mut worst = f64::INFINITY;
    for lambda in [5.0, 20.0, 60.0] {
        let u = solve_electron(lambda, &ctx.params, &ctx.grid)?.u;
        let big = auxiliary_u(lambda, &ctx.grid);
        worst = worst.min(
            u.iter()
                .zip(big.iter())
                .map(|(a, b)| a - b)
                .fold(f64::INFINITY, f64::min),
        );
    }
    Ok(CheckOutcome::at_least(worst, 0.0))
}

fn check_null_vector(ctx: &CheckContext) -> Result<CheckOutcome> {
    let spark = spark_of(ctx)?;
    let t = nullspace_triple(spark.lambda_dagger, &spark.u_dagger, &ctx.params, &ctx.grid)?;
    let lt = apply_linearized(spark.lambda_dagger, &t.scaled_state(1.0), &ctx.params, &ctx.grid);
    Ok(CheckOutcome::at_most(lt.y_norm(&ctx.grid), 5.0 * delta_sq(&ctx.grid)))
}

fn dense_grid(ctx: &CheckContext) -> Result<RadialGrid> {
    RadialGrid::new(ctx.grid.len().min(MAX_DENSE_NODES))
}

fn check_sigma_1(ctx: &CheckContext) -> Result<CheckOutcome> {
    let g = dense_grid(ctx)?;
    let spark = sparking_voltage(&ctx.params, ctx.config.lambda_max, &g, ctx.config.root_tol)?;
    let (s1, _) = smallest_singular_values(spark.lambda_dagger, &ctx.params, &g)?;
    Ok(CheckOutcome::at_most(s1, 5.0 * delta_sq(&g)))
}

fn check_sigma_2(ctx: &CheckContext) -> Result<CheckOutcome> {
    let g = dense_grid(ctx)?;
    let spark = sparking_voltage(&ctx.params, ctx.config.lambda_max, &g, ctx.config.root_tol)?;
    let (_, s2) = smallest_singular_values(spark.lambda_dagger, &ctx.params, &g)?;
    Ok(CheckOutcome::at_least(s2, 0.01))
}

fn transversality_pair(ctx: &CheckContext) -> Result<(f64, f64)> {
    let spark = spark_of(ctx)?;
    let l = spark.lambda_dagger;
    let w = solve_adjoint_w(l, &ctx.params, &ctx.grid)?;
    let t = nullspace_triple(l, &spark.u_dagger, &ctx.params, &ctx.grid)?;
    Ok((
        transversality_f(l, &spark.u_dagger, &w, &ctx.params, &ctx.grid),
        transversality_crosscheck(l, &t, &w, &ctx.params, &ctx.grid),
    ))
}

fn check_transversality_agreement(ctx: &CheckContext) -> Result<CheckOutcome> {
    let (f, c) = transversality_pair(ctx)?;
    Ok(CheckOutcome::at_most((f - c).abs(), 5.0 * delta_sq(&ctx.grid)))
}

fn check_transversality_margin(ctx: &CheckContext) -> Result<CheckOutcome> {
    let (f, _) = transversality_pair(ctx)?;
    let bound = (10.0 * delta_sq(&ctx.grid)).max(1e-6);
    Ok(CheckOutcome {
        measured: f.abs(),
        bound,
        pass: f.abs() > bound,
    })
}

fn check_jacobian_fd(ctx: &CheckContext) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut s = random_domain_state(4.0, &ctx.grid, &mut rng);
    for f in [&mut s.rho_i, &mut s.r_e, &mut s.v] {
        *f = f.scaled(0.1);
    }
    let analytic = jacobian(&s, &ctx.params, &ctx.grid).to_dense();
    let fd = fd_jacobian(&s, &ctx.params, &ctx.grid, 1e-7);
    let n = analytic.ncols();
    let gap = (analytic.clone() - fd.columns(0, n)).amax();
    Ok(CheckOutcome::at_most(gap / analytic.amax(), 1e-6))
}

fn check_adjoint_order(ctx: &CheckContext) -> Result<CheckOutcome> {
    let l = spark_of(ctx)?.lambda_dagger;
    let worst = |g: &RadialGrid| {
        (0..10)
            .map(|seed| adjoint_identity_check(l, &ctx.params, g, seed))
            .fold(0.0, f64::max)
    };
    let order = (worst(&ctx.grid) / worst(&ctx.grid.refined())).log2();
    Ok(CheckOutcome::at_least(order, 1.9))
}

fn check_branch_start(ctx: &CheckContext) -> Result<CheckOutcome> {
    let limits = BranchLimits {
        max_steps: 20,
        ..ctx.config.limits()
    };
    let b = trace_branch(&ctx.params, &ctx.grid, &limits)?;
    if b.points.len() < 20 {
        return Ok(CheckOutcome {
            measured: f64::NAN,
            bound: limits.newton_tol,
            pass: false,
        });
    }
    let worst = b
        .points
        .iter()
        .map(|pt| pt.diagnostics.residual_norm)
        .fold(0.0, f64::max);
    let positive = b.points.iter().all(|pt| pt.diagnostics.positive);
    Ok(CheckOutcome {
        measured: worst,
        bound: limits.newton_tol,
        pass: positive && worst <= limits.newton_tol,
    })
}

fn check_ion_consistency(ctx: &CheckContext) -> Result<CheckOutcome> {
    let limits = BranchLimits {
        max_steps: 20,
        ..ctx.config.limits()
    };
    let b = trace_branch(&ctx.params, &ctx.grid, &limits)?;
    let worst = b
        .points
        .iter()
        .map(|pt| ion_consistency(&pt.state, &ctx.params, &ctx.grid))
        .fold(0.0, f64::max);
    Ok(CheckOutcome::at_most(worst, ctx.grid.delta()))
}

fn check_quadrature_order(_ctx: &CheckContext) -> Result<CheckOutcome> {
    // ∫₁² r² sin(r) cos(r) dr against its closed form
    let exact = {
        let f = |r: f64| -0.25 * r * r * (2.0 * r).cos() + 0.25 * r * (2.0 * r).sin() + 0.125 * (2.0 * r).cos();
        f(2.0) - f(1.0)
    };
    let study = richardson(
        |g: &RadialGrid| {
            let u = GridFunction::from_fn(g, f64::sin);
            let v = GridFunction::from_fn(g, f64::cos);
            Ok((weighted_inner(&u, &v, g)? - exact).abs())
        },
        &[33, 65, 129],
    )?;
    let order = study.min_order();
    Ok(CheckOutcome {
        measured: order,
        bound: 2.0,
        pass: (order - 2.0).abs() <= 0.2,
    })
}

fn check_shooting_order(ctx: &CheckContext) -> Result<CheckOutcome> {
    let gap = |g: &RadialGrid| -> Result<f64> {
        let u = solve_electron(5.0, &ctx.params, g)?.u;
        let s = shoot_electron(5.0, &ctx.params, g)?;
        Ok(u.iter()
            .zip(s.u_samples.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    };
    let order = (gap(&ctx.grid)? / gap(&ctx.grid.refined())?).log2();
    Ok(CheckOutcome::at_least(order, 1.8))
}

/// The validation suite in execution order.
pub fn checks() -> Vec<Check> {
    vec![
        Check {
            name: "trivial_residual",
            relation: "<=",
            run: check_trivial_residual,
        },
        Check {
            name: "zero_voltage_b",
            relation: "<=",
            run: check_zero_voltage_b,
        },
        Check {
            name: "gamma_region_g_negative",
            relation: "<",
            run: check_gamma_region_sign,
        },
        Check {
            name: "auxiliary_u_residual",
            relation: "<=",
            run: check_auxiliary_u,
        },
        Check {
            name: "auxiliary_u_discrete_order",
            relation: ">=",
            run: check_auxiliary_discrete_order,
        },
        Check {
            name: "sparking_root_residual",
            relation: "<=",
            run: check_sparking_root,
        },
        Check {
            name: "electron_positivity",
            relation: ">",
            run: check_electron_positivity,
        },
        Check {
            name: "comparison_u_minus_U",
            relation: ">=",
            run: check_comparison,
        },
        Check {
            name: "null_triple_residual",
            relation: "<=",
            run: check_null_vector,
        },
        Check {
            name: "sigma_1",
            relation: "<=",
            run: check_sigma_1,
        },
        Check {
            name: "sigma_2",
            relation: ">=",
            run: check_sigma_2,
        },
        Check {
            name: "transversality_agreement",
            relation: "<=",
            run: check_transversality_agreement,
        },
        Check {
            name: "transversality_margin",
            relation: ">",
            run: check_transversality_margin,
        },
        Check {
            name: "jacobian_vs_fd",
            relation: "<=",
            run: check_jacobian_fd,
        },
        Check {
            name: "adjoint_identity_order",
            relation: ">=",
            run: check_adjoint_order,
        },
        Check {
            name: "branch_start_residual",
            relation: "<=",
            run: check_branch_start,
        },
        Check {
            name: "ion_consistency",
            relation: "<=",
            run: check_ion_consistency,
        },
        Check {
            name: "quadrature_order",
            relation: "~",
            run: check_quadrature_order,
        },
        Check {
            name: "shooting_agreement_order",
            relation: ">=",
            run: check_shooting_order,
        },
    ]
}

pub fn cmd_validate(cfg: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let ctx = match cfg.parameters().and_then(|p| Ok((p, cfg.grid()?))) {
        Ok((params, grid)) => CheckContext {
            params,
            grid,
            config: cfg.clone(),
        },
        Err(e) => return failure(err, &e),
    };
    let mut table = format!("{:<28} {:>14} {:>4} {:>12}  result\n", "check", "measured", "", "bound");
    let mut failed = Vec::new();
    for c in checks() {
        let line = match (c.run)(&ctx) {
            Ok(o) => {
                if !o.pass {
                    failed.push(c.name);
                }
                let verdict = if o.pass { "PASS" } else { "FAIL" };
                format!(
                    "{:<28} {:>14.6e} {:>4} {:>12.4e}  {verdict}\n",
                    c.name, o.measured, c.relation, o.bound
                )
            }
            Err(e) => {
                failed.push(c.name);
                format!("{:<28} {:>14} {:>4} {:>12}  FAIL ({e})\n", c.name, "-", c.relation, "-")
            }
        };
        table.push_str(&line);
    }
    if let Err(e) = emit(cfg, &table, out) {
        return failure(err, &e.into());
    }
    if failed.is_empty() {
        EXIT_OK
    } else {
        let _ = writeln!(err, "failed checks: {}", failed.join(", "));
        EXIT_FAILURE
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn config_defaults_and_rejection() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let cfg = RunConfig::from_json(r#"{"a": 3, "b": 5, "grid_n": 129}"#).unwrap();
        assert_eq!((cfg.a, cfg.b, cfg.grid_n, cfg.gamma), (3.0, 5.0, 129, 1.0));
        assert!(matches!(RunConfig::from_json(r#"{"alpha": 1}"#), Err(Error::Config(_))));
        assert!(RunConfig::from_json(r#"{"a": -1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"grid_n": 4}"#).is_err());
        assert!(RunConfig::from_json(r#"{"h_init": 5}"#).is_err());
        assert!(RunConfig::from_json("[1, 2]").is_err());
        // loose tolerances are legal and surface as failed checks instead
        assert!(RunConfig::from_json(r#"{"root_tol": 10}"#).is_ok());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RunConfig {
            gamma: 2.0,
            out: Some("x.csv".into()),
            ..Default::default()
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn empty_scan_ranges() {
        let cfg = RunConfig {
            grid_n: 65,
            ..Default::default()
        };
        assert!(scan(&cfg, Axis::Gamma, 1.0, 2.0, 0).is_err());
        assert!(scan(&cfg, Axis::Gamma, 2.0, 1.0, 3).is_err());
        assert!(scan(&cfg, Axis::Gamma, 1.0, 1.0, 3).is_err());
        assert!(scan(&cfg, Axis::Gamma, f64::NAN, 1.0, 3).is_err());
        assert_eq!(scan(&cfg, Axis::Gamma, 1.0, 1.0, 1).unwrap().len(), 1);
    }

    #[test]
    fn scan_rows_stay_in_axis_order_and_record_failures() {
        let cfg = RunConfig {
            grid_n: 65,
            ..Default::default()
        };
        let rows = scan(&cfg, Axis::Gamma, 1e-6, 2.0, 5).unwrap();
        assert_eq!(rows[0].status, "no_sign_change");
        assert!(rows[0].lambda_dagger.is_nan());
        assert!(rows.windows(2).all(|w| w[0].value < w[1].value));
        for r in &rows[1..] {
            assert_eq!(r.status, "ok");
            assert!((r.critical_gamma - r.value).abs() <= 10.0 * cfg.root_tol, "{r:?}");
        }
        let bad = scan(&cfg, Axis::A, -1.0, 2.0, 2).unwrap();
        assert!(bad[0].status.contains("invalid parameter"));
        assert!(!bad[0].status.contains(','));
    }

    #[test]
    fn branch_table_layout() {
        let p = Parameters::with_unit_mobilities(2.0, 3.0, 1.0).unwrap();
        let g = RadialGrid::new(65).unwrap();
        let b = trace_branch(
            &p,
            &g,
            &BranchLimits {
                max_steps: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let csv = branch_csv(&b, &g);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], BRANCH_HEADER);
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "# termination=MaxSteps");
        assert!(csv.ends_with('\n'));
        let first: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(first.len(), 8);
        assert_eq!(first[0], 1e-3);
        assert!((first[1] - b.lambda_dagger).abs() < 1e-3);
    }

    #[test]
    fn list_does_not_run_checks() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(["spark-branch", "validate", "--list"], &mut out, &mut err);
        assert_eq!(code, EXIT_OK);
        let names: Vec<String> = String::from_utf8(out).unwrap().lines().map(String::from).collect();
        assert_eq!(names.len(), checks().len());
        assert!(names.iter().any(|n| n == "sparking_root_residual"));
    }

    #[test]
    fn usage_errors_exit_64() {
        let mut sink = Vec::new();
        let mut err = Vec::new();
        assert_eq!(run(["spark-branch"], &mut sink, &mut err), EXIT_USAGE);
        assert_eq!(
            run(["spark-branch", "spark", "--grid-n", "3"], &mut sink, &mut err),
            EXIT_USAGE
        );
        assert_eq!(
            run(
                [
                    "spark-branch",
                    "scan",
                    "--axis",
                    "c",
                    "--from",
                    "1",
                    "--to",
                    "2",
                    "--count",
                    "2"
                ],
                &mut sink,
                &mut err
            ),
            EXIT_USAGE
        );
        assert_eq!(run(["spark-branch", "--help"], &mut sink, &mut err), EXIT_OK);
    }

    proptest! {
        #[test]
        fn floats_round_trip(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let s = fmt_float(x);
            prop_assert_eq!(s.parse::<f64>().unwrap(), x);
            prop_assert!(s.len() <= 24, "{}", s);
        }
    }
}
