//! Command-line driver: deterministic experiment runs with manifest files.
//!
//! Exit codes: 0 success, 1 failed acceptance checks (--check) or runtime
//! failure, 2 invalid configuration or arguments.

mod config;
mod manifest;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use config::{Config, ConfigError, Schema};
use manifest::{fnv1a64, Manifest, ManifestWriter};

use roughham::core::Grid;
use roughham::harness::{
    run_convergence_study, run_domain_study, run_energy_study, sample_seed, table_kind_for,
    ConvergenceReport, ConvergenceStudy, DomainReport, DomainStudy, EnergyReport, EnergyStudy,
};
use roughham::integrators::{Method, SolverConfig, Tableau};
use roughham::modified::{
    CoefficientTable, ExtractionConfig, RecursionEngine, TableKind, TruncationRule,
};
use roughham::noise::{
    coarsen_path, fbm_increment_covariance, pairwise_sum, sample_fbm_path, truncate_path,
    DriverPath, NoiseSpec,
};
use roughham::systems::SystemSpec;

#[derive(Parser)]
#[command(
    name = "roughham",
    version,
    about = "Convergence, energy, and domain experiments for stochastic \
             geometric integrators and their truncated modified equations"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config: [section] headers with key = value lines
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory, created if missing
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the base seed ([study] seed)
    #[arg(long)]
    seed: Option<u64>,
    /// Override the Monte-Carlo sample count
    #[arg(long)]
    samples: Option<usize>,
    /// Worker threads (fallback: env ROUGHHAM_THREADS, then all cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Enforce acceptance bands; any violation exits 1
    #[arg(long)]
    check: bool,
    /// Override a config value as section.key=value (repeatable)
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Strong-error convergence study against truncated modified flows
    Convergence(Common),
    /// Long-time energy-error study on one shared path
    Energy(Common),
    /// Phase-plane domain transport and area study on one shared path
    Domain(Common),
    /// Audit closed coefficient tables against numerical extraction
    CoeffCheck(Common),
    /// Noise-layer diagnostics: covariance, clamping, coarsening
    NoiseCheck(Common),
    /// Sample one fractional Brownian driver path and write it as CSV
    SamplePath {
        /// Hurst index in (1/4, 1/2]
        #[arg(long)]
        hurst: f64,
        /// Number of grid steps
        #[arg(long)]
        steps: usize,
        /// Final time
        #[arg(long, default_value_t = 1.0)]
        t_end: f64,
        /// Number of noise components
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory, created if missing
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Convergence(c) => run_convergence_cmd(c),
        Cmd::Energy(c) => run_energy_cmd(c),
        Cmd::Domain(c) => run_domain_cmd(c),
        Cmd::CoeffCheck(c) => run_coeff_check_cmd(c),
        Cmd::NoiseCheck(c) => run_noise_check_cmd(c),
        Cmd::SamplePath {
            hurst,
            steps,
            t_end,
            dim,
            seed,
            out,
        } => run_sample_path_cmd(*hurst, *steps, *t_end, *dim, *seed, out.clone()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

struct Loaded {
    cfg: Config,
    config_file: Option<String>,
    config_hash: Option<String>,
}

/// Reads, overrides, and validates the config for one subcommand.
/// `samples_key` is where --samples lands, if the subcommand takes it.
fn load(common: &Common, schema: Schema, samples_key: Option<&str>) -> anyhow::Result<Loaded> {
    let (mut cfg, config_file, config_hash) = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            (
                Config::parse(&text)?,
                Some(p.display().to_string()),
                Some(format!("{:016x}", fnv1a64(text.as_bytes()))),
            )
        }
        None => (Config::empty(), None, None),
    };
    for s in &common.set {
        cfg.apply_set(s)?;
    }
    if let Some(seed) = common.seed {
        cfg.apply_set(&format!("study.seed={seed}"))?;
    }
    if let Some(n) = common.samples {
        match samples_key {
            Some(key) => cfg.apply_set(&format!("{key}={n}"))?,
            None => {
                return Err(
                    ConfigError::plain("--samples does not apply to this subcommand").into(),
                )
            }
        }
    }
    cfg.validate(schema)?;
    Ok(Loaded {
        cfg,
        config_file,
        config_hash,
    })
}

/// Applies --threads / ROUGHHAM_THREADS to the global rayon pool.
fn resolve_threads(common: &Common) -> anyhow::Result<usize> {
    let n = match common.threads {
        Some(n) => n,
        None => match std::env::var("ROUGHHAM_THREADS") {
            Ok(v) => v.parse().map_err(|_| {
                ConfigError::plain(format!("ROUGHHAM_THREADS must be a number, got '{v}'"))
            })?,
            Err(_) => 0,
        },
    };
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .ok();
    }
    Ok(rayon::current_num_threads())
}

fn begin_manifest(
    common: &Common,
    subcommand: &str,
    loaded: &Loaded,
    seed: u64,
    threads: usize,
) -> anyhow::Result<ManifestWriter> {
    ManifestWriter::begin(
        &common.out,
        Manifest {
            tool: "roughham",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.into(),
            config_file: loaded.config_file.clone(),
            config_hash: loaded.config_hash.clone(),
            effective_config: loaded.cfg.effective(),
            overrides: common.set.clone(),
            seed,
            threads,
            check: common.check,
            completed: false,
            wall_time_s: None,
        },
    )
}

fn parse_system(cfg: &Config) -> anyhow::Result<SystemSpec> {
    let name = cfg.require_str("study", "system")?;
    match name {
        "example1" => Ok(SystemSpec::Example1),
        "taylor-green" => Ok(SystemSpec::TaylorGreen {
            sigma: cfg.require_f64("system", "sigma")?,
        }),
        "kubo" => Ok(SystemSpec::Kubo {
            a: cfg.require_f64("system", "a")?,
            sigma: cfg.require_f64("system", "sigma")?,
        }),
        other => Err(ConfigError::plain(format!(
            "unknown system '{other}' (example1 | taylor-green | kubo)"
        ))
        .into()),
    }
}

fn parse_method(name: &str) -> anyhow::Result<Method> {
    match name {
        "midpoint" => Ok(Method::Midpoint),
        "erk2" => Ok(Method::Erk2),
        "spark-kubo" => Ok(Method::SparkKubo),
        _ => match name.strip_prefix("srk:") {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading tableau {path}"))?;
                Ok(Method::Srk(Tableau::parse(&text)?))
            }
            None => Err(ConfigError::plain(format!(
                "unknown method '{name}' (midpoint | erk2 | spark-kubo | srk:<tableau-file>)"
            ))
            .into()),
        },
    }
}

fn write_json(path: &std::path::Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// One check outcome; printing and the final exit verdict go through this.
struct Checks {
    enabled: bool,
    all_ok: bool,
}

impl Checks {
    fn new(enabled: bool) -> Self {
        Self {
            enabled,
            all_ok: true,
        }
    }

    fn require(&mut self, ok: bool, what: &str) {
        if !self.enabled {
            return;
        }
        if ok {
            println!("check ok: {what}");
        } else {
            println!("check FAILED: {what}");
            self.all_ok = false;
        }
    }
}

// ---------------------------------------------------------------- convergence

const CONVERGENCE_SCHEMA: Schema = &[
    ("study", &["system", "method", "seed", "samples"]),
    ("system", &["a", "sigma"]),
    (
        "convergence",
        &[
            "hursts",
            "step_exponents",
            "truncations",
            "t_end",
            "initial",
            "delta",
            "threshold_k",
            "sup_over_grid",
        ],
    ),
];

#[derive(Serialize)]
struct SlopeRow {
    hurst: f64,
    n_tilde: u32,
    slope: Option<f64>,
    /// Proven order: an upper bound on the error, so a lower bound on the
    /// fitted slope. Faster measured convergence never fails the check.
    expected: f64,
    band: f64,
    passes: Option<bool>,
}

#[derive(Serialize)]
struct ConvergenceArtifact<'a> {
    report: &'a ConvergenceReport,
    slopes: &'a [SlopeRow],
}

/// Band widths around the theoretical slope: the published bands at the
/// full 200-sample tier, a wider one for smoke-sized runs.
fn slope_band(samples: usize, n_tilde: u32) -> f64 {
    if samples >= 200 {
        if n_tilde <= 2 {
            0.15
        } else {
            0.2
        }
    } else {
        0.25
    }
}

fn run_convergence_cmd(common: &Common) -> anyhow::Result<bool> {
    let loaded = load(common, CONVERGENCE_SCHEMA, Some("study.samples"))?;
    let cfg = &loaded.cfg;
    let threads = resolve_threads(common)?;
    let sys = parse_system(cfg)?.build();
    let method = parse_method(cfg.require_str("study", "method")?)?;
    let kind = table_kind_for(&method).ok_or_else(|| {
        ConfigError::plain(format!(
            "method '{}' has no closed coefficient table to converge against",
            method.label()
        ))
    })?;
    let seed = cfg.u64_or("study", "seed", 0)?;
    let samples = cfg.require_usize("study", "samples")?;
    let hursts = cfg.require_list_f64("convergence", "hursts")?;
    let step_exponents = cfg.require_list_u32("convergence", "step_exponents")?;
    let t_end = cfg.require_f64("convergence", "t_end")?;
    let initial = cfg.require_list_f64("convergence", "initial")?;
    let delta = cfg.require_f64("convergence", "delta")?;
    let threshold_k = cfg.f64_or("convergence", "threshold_k", 4.0)?;
    let sup_over_grid = cfg.bool_or("convergence", "sup_over_grid", false)?;
    let table_cap = match kind {
        TableKind::SparkKubo => 3,
        _ => 4,
    };
    let truncations = cfg.require_str("convergence", "truncations")?;
    let rules: Vec<(TruncationRule, u32)> = if truncations.trim() == "auto" {
        vec![(
            TruncationRule::Auto {
                h0: 1.0,
                epsilon: 0.25,
            },
            table_cap,
        )]
    } else {
        cfg.require_list_u32("convergence", "truncations")?
            .into_iter()
            .map(|n| (TruncationRule::Fixed(n), n))
            .collect()
    };
    if rules.is_empty() {
        return Err(ConfigError::plain("convergence.truncations is empty").into());
    }

    let writer = begin_manifest(common, "convergence", &loaded, seed, threads)?;
    let mut report: Option<ConvergenceReport> = None;
    for (rule, order_cap) in rules {
        let study = ConvergenceStudy {
            method_label: method.label(),
            table: kind,
            order_cap,
            rule,
            hursts: hursts.clone(),
            step_exponents: step_exponents.clone(),
            t_end,
            initial: initial.clone(),
            delta,
            samples,
            base_seed: seed,
            threshold_k,
            sup_over_grid,
        };
        let part = run_convergence_study(&sys, &method, &study, &SolverConfig::default())?;
        match &mut report {
            Some(r) => r.merge(part),
            None => report = Some(part),
        }
    }
    let report = report.expect("at least one rule");

    let mut slopes = Vec::new();
    for (hurst, n_tilde) in report.curves() {
        let expected = if sys.is_additive() {
            n_tilde as f64 * hurst
        } else {
            (n_tilde + 1) as f64 * hurst - 1.0
        };
        let band = slope_band(samples, n_tilde);
        let slope = report.estimated_order(hurst, n_tilde).ok();
        let passes = slope.map(|s| s >= expected - band);
        slopes.push(SlopeRow {
            hurst,
            n_tilde,
            slope,
            expected,
            band,
            passes,
        });
    }

    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(common.out.join("report.csv"), csv)?;
    write_json(
        &common.out.join("report.json"),
        &ConvergenceArtifact {
            report: &report,
            slopes: &slopes,
        },
    )?;

    for row in &slopes {
        match row.slope {
            Some(s) => println!(
                "H={} n_tilde={}: slope {:.4}, proven order {:.4} (tolerance {:.2})",
                row.hurst, row.n_tilde, s, row.expected, row.band
            ),
            None => println!(
                "H={} n_tilde={}: too few points for a slope",
                row.hurst, row.n_tilde
            ),
        }
    }

    let mut checks = Checks::new(common.check);
    for row in &slopes {
        checks.require(
            row.passes == Some(true),
            &format!(
                "slope for H={} n_tilde={} at least {:.4}",
                row.hurst,
                row.n_tilde,
                row.expected - row.band
            ),
        );
    }
    // higher truncation must not be worse at any measured (H, h)
    let mut n_values: Vec<u32> = report.cells.iter().map(|c| c.n_tilde).collect();
    n_values.sort_unstable();
    n_values.dedup();
    if n_values.len() > 1 {
        let mut dominated = true;
        for w in n_values.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            for c in report.cells.iter().filter(|c| c.n_tilde == lo) {
                if let Some(d) = report
                    .cells
                    .iter()
                    .find(|d| d.n_tilde == hi && d.hurst == c.hurst && d.h == c.h)
                {
                    dominated &= d.rmse <= c.rmse;
                }
            }
        }
        checks.require(dominated, "rmse non-increasing in the truncation number");
    }

    writer.finish()?;
    Ok(checks.all_ok)
}

// ---------------------------------------------------------------- energy

const ENERGY_SCHEMA: Schema = &[
    ("study", &["system", "seed"]),
    ("system", &["a", "sigma"]),
    (
        "energy",
        &[
            "methods",
            "t_end",
            "n_steps",
            "hurst",
            "initial",
            "truncations",
            "delta",
            "include_exact",
        ],
    ),
];

fn run_energy_cmd(common: &Common) -> anyhow::Result<bool> {
    let loaded = load(common, ENERGY_SCHEMA, None)?;
    let cfg = &loaded.cfg;
    let threads = resolve_threads(common)?;
    let sys = parse_system(cfg)?.build();
    let methods = cfg
        .require_list_str("energy", "methods")?
        .iter()
        .map(|m| parse_method(m))
        .collect::<anyhow::Result<Vec<Method>>>()?;
    let seed = cfg.u64_or("study", "seed", 0)?;
    let study = EnergyStudy {
        t_end: cfg.require_f64("energy", "t_end")?,
        n_steps: cfg.require_usize("energy", "n_steps")?,
        hurst: cfg.require_f64("energy", "hurst")?,
        seed,
        initial: cfg.require_list_f64("energy", "initial")?,
        truncations: cfg.list_u32_or("energy", "truncations", &[])?,
        delta: cfg.f64("energy", "delta")?,
        include_exact: cfg.bool_or("energy", "include_exact", false)?,
    };

    let writer = begin_manifest(common, "energy", &loaded, seed, threads)?;
    let report = run_energy_study(&sys, &methods, &study, &SolverConfig::default())?;

    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(common.out.join("energy.csv"), csv)?;
    write_json(&common.out.join("energy.json"), &report)?;

    for s in &report.series {
        println!(
            "{}: time-averaged energy error {:.6e}, max {:.6e}",
            s.label, s.time_average, s.max
        );
    }

    let mut checks = Checks::new(common.check);
    energy_checks(&report, &mut checks);
    writer.finish()?;
    Ok(checks.all_ok)
}

fn energy_checks(report: &EnergyReport, checks: &mut Checks) {
    if let Some(mid) = report.series_by_label("midpoint") {
        checks.require(mid.max <= 1e-8, "midpoint max energy error <= 1e-8");
    }
    if let (Some(spark), Some(erk2)) = (
        report.series_by_label("spark-kubo"),
        report.series_by_label("erk2"),
    ) {
        checks.require(
            spark.time_average < erk2.time_average,
            "spark-kubo time-averaged energy error below erk2's",
        );
    }
}

// ---------------------------------------------------------------- domain

const DOMAIN_SCHEMA: Schema = &[
    ("study", &["system", "seed"]),
    ("system", &["a", "sigma"]),
    (
        "domain",
        &[
            "methods",
            "t_end",
            "n_steps",
            "hurst",
            "center",
            "radius",
            "n_vertices",
            "snapshot_steps",
            "truncations",
            "delta",
            "include_exact",
        ],
    ),
];

fn run_domain_cmd(common: &Common) -> anyhow::Result<bool> {
    let loaded = load(common, DOMAIN_SCHEMA, None)?;
    let cfg = &loaded.cfg;
    let threads = resolve_threads(common)?;
    let sys = parse_system(cfg)?.build();
    let methods = cfg
        .require_list_str("domain", "methods")?
        .iter()
        .map(|m| parse_method(m))
        .collect::<anyhow::Result<Vec<Method>>>()?;
    let center = cfg.require_list_f64("domain", "center")?;
    if center.len() != 2 {
        return Err(ConfigError::plain("domain.center must have two coordinates").into());
    }
    let seed = cfg.u64_or("study", "seed", 0)?;
    let study = DomainStudy {
        t_end: cfg.require_f64("domain", "t_end")?,
        n_steps: cfg.require_usize("domain", "n_steps")?,
        hurst: cfg.require_f64("domain", "hurst")?,
        seed,
        center: [center[0], center[1]],
        radius: cfg.require_f64("domain", "radius")?,
        n_vertices: cfg.require_usize("domain", "n_vertices")?,
        truncations: cfg.list_u32_or("domain", "truncations", &[])?,
        delta: cfg.f64("domain", "delta")?,
        include_exact: cfg.bool_or("domain", "include_exact", false)?,
        snapshot_steps: cfg.list_usize_or("domain", "snapshot_steps", &[])?,
    };

    let writer = begin_manifest(common, "domain", &loaded, seed, threads)?;
    let report = run_domain_study(&sys, &methods, &study, &SolverConfig::default())?;

    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    fs::write(common.out.join("domain.csv"), csv)?;
    write_json(&common.out.join("domain.json"), &report)?;

    let a0 = report.initial_area;
    for s in &report.series {
        let max_rel = s
            .area
            .iter()
            .map(|a| (a - a0).abs() / a0)
            .fold(0.0, f64::max);
        println!(
            "{}: initial area {:.6e}, max relative drift {:.3e}, final {:.6e}",
            s.label,
            a0,
            max_rel,
            s.area.last().unwrap()
        );
    }

    let mut checks = Checks::new(common.check);
    domain_checks(&report, &mut checks);
    writer.finish()?;
    Ok(checks.all_ok)
}

fn domain_checks(report: &DomainReport, checks: &mut Checks) {
    let a0 = report.initial_area;
    for s in &report.series {
        let max_rel = s
            .area
            .iter()
            .map(|a| (a - a0).abs() / a0)
            .fold(0.0, f64::max);
        match s.label.as_str() {
            "midpoint" | "spark-kubo" => checks.require(
                max_rel <= 1e-6,
                &format!("{} area constant to 1e-6 relative", s.label),
            ),
            "exact" => checks.require(max_rel <= 1e-9, "exact-flow area constant"),
            "erk2" => checks.require(
                s.area.windows(2).all(|w| w[1] > w[0]),
                "erk2 area strictly increasing",
            ),
            _ => {}
        }
    }
}

// ---------------------------------------------------------------- coeff-check

const COEFF_SCHEMA: Schema = &[
    ("study", &["system", "method", "seed"]),
    ("system", &["a", "sigma"]),
    ("coeff", &["points", "order_cap", "center", "spread"]),
];

fn run_coeff_check_cmd(common: &Common) -> anyhow::Result<bool> {
    let loaded = load(common, COEFF_SCHEMA, None)?;
    let cfg = &loaded.cfg;
    let threads = resolve_threads(common)?;
    let sys = parse_system(cfg)?.build();
    let method = parse_method(cfg.require_str("study", "method")?)?;
    let kind = table_kind_for(&method).ok_or_else(|| {
        ConfigError::plain(format!(
            "method '{}' has no closed coefficient table to audit",
            method.label()
        ))
    })?;
    let table_cap = match kind {
        TableKind::SparkKubo => 3,
        _ => 4,
    };
    let seed = cfg.u64_or("study", "seed", 0)?;
    let points = cfg.usize_or("coeff", "points", 10)?;
    let order_cap = cfg.u32_or("coeff", "order_cap", table_cap)?;
    let spread = cfg.f64_or("coeff", "spread", 0.5)?;
    let center = cfg.list_f64_or("coeff", "center", &vec![1.0; sys.dim()])?;
    if center.len() != sys.dim() {
        return Err(ConfigError::plain(format!(
            "coeff.center needs {} coordinates for system '{}'",
            sys.dim(),
            sys.label()
        ))
        .into());
    }

    let writer = begin_manifest(common, "coeff-check", &loaded, seed, threads)?;
    let table = CoefficientTable::new(&sys, kind, order_cap)?;
    let engine = RecursionEngine::from_method(&sys, &method, order_cap, ExtractionConfig::default())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Vec<f64>> = (0..points)
        .map(|_| {
            center
                .iter()
                .map(|c| c + spread * rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();

    let fmt_vec = |v: &[f64]| {
        v.iter()
            .map(|x| format!("{x:.16e}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut table_csv = String::from("alpha,y,f_value\n");
    let mut extracted_csv = String::from("alpha,y,f_value\n");
    let mut max_diff: f64 = 0.0;
    for y in &pts {
        for alpha in table.indices() {
            let from_table = table.eval_f(&alpha, y)?;
            let from_engine = engine.eval_f(&alpha, y)?;
            for (a, b) in from_table.iter().zip(&from_engine) {
                max_diff = max_diff.max((a - b).abs());
            }
            table_csv.push_str(&format!(
                "\"{alpha}\",{},{}\n",
                fmt_vec(y),
                fmt_vec(&from_table)
            ));
            extracted_csv.push_str(&format!(
                "\"{alpha}\",{},{}\n",
                fmt_vec(y),
                fmt_vec(&from_engine)
            ));
        }
    }
    fs::write(common.out.join("coefficients-table.csv"), table_csv)?;
    fs::write(common.out.join("coefficients-extracted.csv"), extracted_csv)?;
    write_json(
        &common.out.join("coeff-check.json"),
        &serde_json::json!({
            "system": sys.label(),
            "method": method.label(),
            "order_cap": order_cap,
            "points": points,
            "max_discrepancy": max_diff,
        }),
    )?;

    println!("max table-vs-extraction discrepancy: {max_diff:.3e}");
    let mut checks = Checks::new(common.check);
    checks.require(max_diff <= 1e-6, "table matches extraction within 1e-6");
    writer.finish()?;
    Ok(checks.all_ok)
}

// ---------------------------------------------------------------- noise-check

const NOISE_SCHEMA: Schema = &[
    ("study", &["seed"]),
    ("noise", &["hursts", "samples", "n_steps", "t_end"]),
];

#[derive(Serialize)]
struct NoiseHurstReport {
    hurst: f64,
    max_z: f64,
    rho_variation: f64,
}

#[derive(Serialize)]
struct NoiseArtifact {
    samples: usize,
    n_steps: usize,
    t_end: f64,
    seed: u64,
    per_hurst: Vec<NoiseHurstReport>,
    clamp_exact: bool,
    coarsen_exact: bool,
}

fn run_noise_check_cmd(common: &Common) -> anyhow::Result<bool> {
    let loaded = load(common, NOISE_SCHEMA, Some("noise.samples"))?;
    let cfg = &loaded.cfg;
    let threads = resolve_threads(common)?;
    let hursts = cfg.list_f64_or("noise", "hursts", &[0.3, 0.4, 0.5])?;
    let samples = cfg.usize_or("noise", "samples", 10_000)?;
    let n_steps = cfg.usize_or("noise", "n_steps", 8)?;
    let t_end = cfg.f64_or("noise", "t_end", 1.0)?;
    let seed = cfg.u64_or("study", "seed", 0)?;

    let writer = begin_manifest(common, "noise-check", &loaded, seed, threads)?;
    let grid = Grid::new(t_end, n_steps)?;
    let h = grid.h();

    use rayon::prelude::*;
    let mut per_hurst = Vec::new();
    for (ih, &hurst) in hursts.iter().enumerate() {
        let spec = NoiseSpec::new(hurst, 1)?;
        // per-sample products dX_i dX_j for all i <= j, reduced in order
        let n_pairs = n_steps * (n_steps + 1) / 2;
        let products: Vec<Vec<f64>> = (0..samples)
            .into_par_iter()
            .map(|s| -> roughham::Result<Vec<f64>> {
                let path =
                    sample_fbm_path(&spec, &grid, sample_seed(seed, ((ih as u64) << 32) | s as u64))?;
                let mut row = Vec::with_capacity(n_pairs);
                for i in 0..n_steps {
                    for j in i..n_steps {
                        row.push(path.increment(i, 1) * path.increment(j, 1));
                    }
                }
                Ok(row)
            })
            .collect::<roughham::Result<Vec<_>>>()?;
        let mut max_z: f64 = 0.0;
        let mut pair = 0;
        for i in 0..n_steps {
            for j in i..n_steps {
                let vals: Vec<f64> = products.iter().map(|r| r[pair]).collect();
                let mean = pairwise_sum(&vals) / samples as f64;
                let dev: Vec<f64> = vals.iter().map(|v| (v - mean) * (v - mean)).collect();
                let se = (pairwise_sum(&dev) / (samples as f64 - 1.0) / samples as f64).sqrt();
                let exact = fbm_increment_covariance(hurst, h, i, j);
                if se > 0.0 {
                    max_z = max_z.max((mean - exact).abs() / se);
                }
                pair += 1;
            }
        }
        let rho_variation = roughham::noise::rho_variation_diagnostic(&spec, &grid);
        println!("H={hurst}: covariance max |z| = {max_z:.3}, rho-variation = {rho_variation:.6}");
        per_hurst.push(NoiseHurstReport {
            hurst,
            max_z,
            rho_variation,
        });
    }

    // clamping is exact on constructed increments: values past the bound
    // land exactly on +/- bound, small ones are untouched, and the clamp
    // is idempotent bit for bit
    let clamp_grid = Grid::new(0.04, 4)?;
    let raw = DriverPath::from_increments(clamp_grid, 1, vec![0.5, -0.9, 1e-4, 0.2])?;
    let t = truncate_path(&raw, 4.0)?;
    let bound = t.a_h * clamp_grid.h().sqrt();
    let clamp_exact = t.path.increment(0, 1) == bound
        && t.path.increment(1, 1) == -bound
        && t.path.increment(2, 1) == 1e-4
        && t.path.increment(3, 1) == 0.2
        && truncate_path(&t.path, 4.0)?.path == t.path;

    // dyadic coarsening composes exactly and telescopes block sums
    let fine = sample_fbm_path(&NoiseSpec::new(hursts[0], 1)?, &Grid::new(1.0, 16)?, seed)?;
    let by4 = coarsen_path(&fine, 4)?;
    let mut coarsen_exact = coarsen_path(&coarsen_path(&fine, 2)?, 2)? == by4;
    for jstep in 0..4 {
        let block: Vec<f64> = (0..4).map(|b| fine.increment(4 * jstep + b, 1)).collect();
        coarsen_exact &= by4.increment(jstep, 1) == pairwise_sum(&block);
    }
    println!("clamp exact: {clamp_exact}; coarsening exact: {coarsen_exact}");

    let artifact = NoiseArtifact {
        samples,
        n_steps,
        t_end,
        seed,
        per_hurst,
        clamp_exact,
        coarsen_exact,
    };
    write_json(&common.out.join("noise-check.json"), &artifact)?;

    let mut checks = Checks::new(common.check);
    for r in &artifact.per_hurst {
        checks.require(
            r.max_z <= 3.0,
            &format!("H={} covariance within 3 standard errors", r.hurst),
        );
    }
    checks.require(artifact.clamp_exact, "increment clamp exact");
    checks.require(artifact.coarsen_exact, "coarsening telescopes exactly");
    writer.finish()?;
    Ok(checks.all_ok)
}

// ---------------------------------------------------------------- sample-path

fn run_sample_path_cmd(
    hurst: f64,
    steps: usize,
    t_end: f64,
    dim: usize,
    seed: u64,
    out: PathBuf,
) -> anyhow::Result<bool> {
    let spec = NoiseSpec::new(hurst, dim).map_err(|e| ConfigError::plain(e.to_string()))?;
    let grid = Grid::new(t_end, steps).map_err(|e| ConfigError::plain(e.to_string()))?;
    let writer = ManifestWriter::begin(
        &out,
        Manifest {
            tool: "roughham",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: "sample-path".into(),
            config_file: None,
            config_hash: None,
            effective_config: vec![
                format!("path.hurst={hurst}"),
                format!("path.steps={steps}"),
                format!("path.t_end={t_end}"),
                format!("path.dim={dim}"),
            ],
            overrides: vec![],
            seed,
            threads: 1,
            check: false,
            completed: false,
            wall_time_s: None,
        },
    )?;
    let path = sample_fbm_path(&spec, &grid, seed)?;
    let mut buf = Vec::new();
    path.write_csv(&mut buf)?;
    fs::write(out.join("path.csv"), buf)?;
    println!("wrote {} steps to path.csv", steps);
    writer.finish()?;
    Ok(true)
}
