//! The five subcommands. Each returns whether every scientific check passed;
//! operational problems are errors.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use particle_pde::analysis::{
    error_grid, norm_l2, norm_linf, run_mollified_sweep, verify_lemma_suite, EpsilonPolicy, ErrorRecord,
    LemmaOptions, MollifiedSweep, SweepBound,
};
use particle_pde::field::{lipschitz_family, Field, FnField, FourierField};
use particle_pde::geometry::{check_riemann_family, TaggedPartition};
use particle_pde::integral_evolution::{run_toy_study, StudyOptions};
use particle_pde::kernel::write_dump;
use particle_pde::pde_model::PdeModel;
use particle_pde::mollifier::Mollifier;
use particle_pde::particle::{integrate, reconstruct, sample_initial, IntegrateOptions, MollifiedSystem};
use particle_pde::quadrature::QuadratureGrid;
use particle_pde::reference::{
    burgers_from_fourier, exact_linear_mode, exact_transport, kdv_soliton, snapshot, KdvSoliton, ReferenceSolution,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{ExperimentConfig, InitialCondition};
use crate::report::{suffixed, write_errors, write_lemmas, write_riemann, write_summary, write_trajectory};
use crate::{CliError, Result};

/// Where a command writes.
#[derive(Debug, Clone, Default)]
pub struct Context {
    pub out_dir: PathBuf,
    pub dump_kernel: Option<PathBuf>,
}

impl Context {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: out_dir.into(), dump_kernel: None }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub summary: Vec<Value>,
    pub files: Vec<PathBuf>,
}

impl Outcome {
    pub fn exit_code(&self) -> u8 {
        if self.passed {
            0
        } else {
            2
        }
    }
}

const SCHEDULE_NOTE: &str =
    "scheduled runs are checked for error nonincreasing in N; the absolute level of the rate is not asserted because its constant is not computable from the model";

/// Model, initial datum and (when one is known) the exact solution.
struct PdeSetup {
    model: Arc<PdeModel>,
    y0: Arc<dyn Field>,
    lip_y0: f64,
    sup_y0: f64,
    reference: Option<Arc<dyn ReferenceSolution>>,
}

fn pde_setup(config: &ExperimentConfig) -> Result<PdeSetup> {
    let model = PdeModel::by_name(&config.model, &config.custom_coefficients)?.with_domain(config.domain.clone())?;
    let periodic = model.domain().is_periodic();
    let setup = match config.initial {
        InitialCondition::Sine { amplitude, frequency, phase, offset } => {
            let fourier = FourierField::sine(amplitude, frequency, phase, offset);
            let reference: Option<Arc<dyn ReferenceSolution>> = match model.name() {
                _ if !periodic => None,
                "transport" => Some(Arc::new(exact_transport(Arc::new(fourier.clone())))),
                "burgers" => Some(Arc::new(burgers_from_fourier(&fourier)?)),
                "heat" | "custom-linear" if offset == 0.0 => {
                    Some(Arc::new(exact_linear_mode(&model, amplitude, frequency, phase)?))
                }
                _ => None,
            };
            PdeSetup {
                lip_y0: config.lip_y0.unwrap_or_else(|| fourier.lipschitz_bound()),
                sup_y0: fourier.sup_bound(),
                y0: Arc::new(fourier),
                model: Arc::new(model),
                reference,
            }
        }
        InitialCondition::Soliton { speed, center } => {
            if model.name() != "kdv" {
                return Err(CliError::Setup(format!("a soliton datum needs the kdv model, not `{}`", model.name())));
            }
            let soliton = if periodic { kdv_soliton(speed, center)? } else { KdvSoliton::on_line(speed, center) };
            // max |d/dx (v/2) sech^2(sqrt(v) s / 2)| = v^{3/2} / (3 sqrt 3)
            let lip = speed.powf(1.5) / (3.0 * 3f64.sqrt());
            PdeSetup {
                y0: Arc::new(FnField::scalar(move |x| soliton.value(0.0, x[0]))),
                lip_y0: config.lip_y0.unwrap_or(lip),
                sup_y0: 0.5 * speed,
                model: Arc::new(model),
                reference: Some(Arc::new(soliton)),
            }
        }
    };
    Ok(setup)
}

fn per_axis(config: &ExperimentConfig) -> Result<Option<usize>> {
    config
        .quadrature_nodes
        .map(|m| QuadratureGrid::new(config.domain.clone(), m).map(|q| q.per_axis()))
        .transpose()
        .map_err(CliError::from)
}

fn policy_name(policy: &EpsilonPolicy) -> Value {
    match policy {
        EpsilonPolicy::Fixed(list) => json!({ "fixed": list }),
        EpsilonPolicy::Schedule { dim, order } => json!({ "schedule": { "n": dim, "p": order } }),
    }
}

/// One mollified trajectory at the first configured `N` and scale.
pub fn cmd_run(config: &ExperimentConfig, ctx: &Context) -> Result<Outcome> {
    let start = Instant::now();
    let setup = pde_setup(config)?;
    let particles = config.particles.as_ref().and_then(|n| n.first().copied()).unwrap_or(64);
    let &(_, epsilon) = config
        .epsilon
        .jobs(&[particles])
        .first()
        .ok_or_else(|| CliError::Setup("no smoothing scale configured".into()))?;
    let partition = Arc::new(TaggedPartition::uniform(config.domain.clone(), particles, config.tag_rule)?);
    let mollifier = Arc::new(Mollifier::new(config.domain.dim(), epsilon, setup.model.order() + 1)?);
    let quad = Arc::new(match per_axis(config)? {
        Some(p) => QuadratureGrid::with_per_axis(config.domain.clone(), p)?,
        None => QuadratureGrid::default_for(config.domain.clone(), particles, partition.per_axis())?,
    });
    let system = MollifiedSystem::new(
        setup.model.clone(),
        mollifier,
        partition.clone(),
        quad,
        config.kernel_update,
        config.kernel_strategy,
    )?;
    let initial = sample_initial(&partition, setup.y0.as_ref());
    let mut files = Vec::new();
    if let Some(path) = &ctx.dump_kernel {
        let kernel = system.kernel_at(0.0, initial.xi())?;
        let file = File::create(path).map_err(|source| CliError::Io { path: path.clone(), source })?;
        write_dump(&kernel, setup.model.name(), BufWriter::new(file))
            .map_err(|source| CliError::Io { path: path.clone(), source })?;
        files.push(path.clone());
    }
    let mut options = IntegrateOptions::new(config.t_final).with_samples(config.sample_times.clone());
    options.dt = config.dt;
    options.blowup_guard = config.blowup_guard;
    let trajectory = integrate(&system, &initial, &options)?;
    let trajectory_path = ctx.path(&config.outputs.trajectory);
    write_trajectory(&trajectory_path, &trajectory.snapshots)?;
    files.push(trajectory_path);

    let mut records = Vec::new();
    if let Some(reference) = &setup.reference {
        let grid = error_grid(&config.domain, particles)?;
        let elapsed = start.elapsed().as_secs_f64();
        for state in &trajectory.snapshots {
            let exact = snapshot(reference.as_ref(), state.t)?;
            let approx = reconstruct(state);
            records.push(ErrorRecord {
                particles,
                epsilon: Some(epsilon),
                t: state.t,
                err_l2: norm_l2(&approx, &exact, &grid),
                err_linf: norm_linf(&approx, &exact, &grid, Some(&partition)),
                runtime_seconds: elapsed,
                bound_rhs: None,
            });
        }
        let errors_path = ctx.path(&config.outputs.errors);
        write_errors(&errors_path, &records)?;
        files.push(errors_path);
    }
    let summary = vec![json!({
        "command": "run",
        "model": setup.model.name(),
        "domain": config.domain.name(),
        "N": particles,
        "epsilon": epsilon,
        "dt": trajectory.dt,
        "steps": trajectory.steps,
        "max_abs": trajectory.max_abs,
        "max_deviation": trajectory.max_deviation,
        "r": config.r,
        "within_ball": trajectory.max_deviation <= config.r,
        "reference": setup.reference.as_ref().map(|r| r.provenance().to_string()),
        "final_err_L2": records.last().map(|r| r.err_l2),
        "runtime_seconds": start.elapsed().as_secs_f64(),
    })];
    let summary_path = ctx.path(&config.outputs.summary);
    write_summary(&summary_path, &summary)?;
    files.push(summary_path);
    Ok(Outcome { passed: true, summary, files })
}

/// `(N, epsilon)` sweep of the mollified system against the exact solution.
pub fn cmd_sweep(config: &ExperimentConfig, ctx: &Context) -> Result<Outcome> {
    let start = Instant::now();
    let setup = pde_setup(config)?;
    let reference = setup.reference.clone().ok_or_else(|| {
        CliError::Setup(format!("no exact solution is available for `{}` with this initial datum", setup.model.name()))
    })?;
    let mut sweep = MollifiedSweep::new(setup.model.clone(), setup.y0.clone(), reference.as_ref());
    sweep.sweep = config.particles.clone().unwrap_or_else(|| vec![64, 128, 256]);
    sweep.epsilon = config.epsilon.clone();
    sweep.sample_times = config.sample_times.clone();
    sweep.dt = config.dt;
    sweep.tag_rule = config.tag_rule;
    sweep.update = config.kernel_update;
    sweep.strategy = config.kernel_strategy;
    sweep.quadrature_per_axis = per_axis(config)?;
    sweep.blowup_guard = config.blowup_guard;
    sweep.bound = config
        .abstract_constants
        .map(|constants| SweepBound { constants, lip_y0: setup.lip_y0, sup_y0: setup.sup_y0 });
    let report = run_mollified_sweep(&sweep)?;

    let errors_path = ctx.path(&config.outputs.errors);
    write_errors(&errors_path, &report.records)?;
    let schedule = config.epsilon.is_schedule();
    let monotone = report.nonincreasing_in_n();
    let violations = report.bound_violations();
    let passed = violations == 0 && (!schedule || monotone);
    let fits: Vec<Value> = report
        .fits
        .iter()
        .map(|f| json!({ "epsilon": f.epsilon, "t": f.t, "slope": f.fit.slope, "r_squared": f.fit.r_squared }))
        .collect();
    let deviations: Vec<Value> = report
        .deviations
        .iter()
        .map(|&(n, eps, dev)| json!({ "N": n, "epsilon": eps, "max_deviation": dev, "within_ball": dev <= config.r }))
        .collect();
    let mut line = json!({
        "command": "sweep",
        "model": setup.model.name(),
        "domain": config.domain.name(),
        "epsilon_policy": policy_name(&config.epsilon),
        "rows": report.records.len(),
        "fits": fits,
        "nonincreasing_in_N": monotone,
        "bound": if config.abstract_constants.is_some() { "abstract" } else { "omitted" },
        "bound_violations": violations,
        "deviations": deviations,
        "r": config.r,
        "passed": passed,
        "runtime_seconds": start.elapsed().as_secs_f64(),
    });
    if schedule {
        line["note"] = json!(SCHEDULE_NOTE);
    }
    let summary = vec![line];
    let summary_path = ctx.path(&config.outputs.summary);
    write_summary(&summary_path, &summary)?;
    Ok(Outcome { passed, summary, files: vec![errors_path, summary_path] })
}

pub fn cmd_verify_lemmas(config: &ExperimentConfig, ctx: &Context) -> Result<Outcome> {
    let start = Instant::now();
    let model = PdeModel::by_name(&config.model, &config.custom_coefficients)?;
    let options = LemmaOptions {
        epsilons: config.lemma_epsilons.clone(),
        quadrature_nodes: config.lemma_nodes,
        frozen_state: config.frozen_state,
        seed: config.seed,
        samples: config.lemma_samples,
        kernel_particles: config.kernel_particles,
    };
    let report = verify_lemma_suite(&model, &options)?;
    let lemmas_path = ctx.path(&config.outputs.lemmas);
    write_lemmas(&lemmas_path, &report)?;
    let failed: Vec<Value> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| json!({ "lemma": c.lemma, "epsilon": c.epsilon, "measured": c.measured, "threshold": c.threshold }))
        .collect();
    let passed = report.all_passed();
    let summary = vec![json!({
        "command": "verify-lemmas",
        "model": report.model,
        "checks": report.checks.len(),
        "failed": failed,
        "passed": passed,
        "runtime_seconds": start.elapsed().as_secs_f64(),
    })];
    let summary_path = ctx.path(&config.outputs.summary);
    write_summary(&summary_path, &summary)?;
    Ok(Outcome { passed, summary, files: vec![lemmas_path, summary_path] })
}

/// Graph-limit bound on the shipped toy systems, one error table per toy.
pub fn cmd_verify_bounds(config: &ExperimentConfig, ctx: &Context) -> Result<Outcome> {
    let sweep = config.particles.clone().unwrap_or_else(|| vec![16, 32, 64, 128, 256, 512]);
    let options = StudyOptions {
        r: config.r,
        dt: Some(config.dt.unwrap_or(0.01)),
        reference_grid: config.reference_grid,
        n0: config.n0,
        tag_rule: config.tag_rule,
    };
    let mut summary = Vec::new();
    let mut files = Vec::new();
    let mut passed = true;
    for &toy in &config.toys {
        let start = Instant::now();
        let report = run_toy_study(toy, &sweep, &config.sample_times, &options)?;
        let path = suffixed(&ctx.out_dir, &config.outputs.errors, toy.name());
        write_errors(&path, &report.records)?;
        files.push(path);
        passed &= report.violations.is_empty();
        let slopes: Vec<Value> = report
            .slopes
            .iter()
            .map(|(t, fit)| json!({ "t": t, "slope": fit.slope, "r_squared": fit.r_squared }))
            .collect();
        let worst = report.worst_violation().map(|v| json!({ "N": v.particles, "t": v.t, "error": v.error, "bound": v.bound }));
        let largest_deviation = report.deviations.iter().map(|d| d.1).fold(0.0, f64::max);
        summary.push(json!({
            "command": "verify-bounds",
            "system": toy.name(),
            "a1": report.constants.a1(),
            "a2": report.constants.a2(),
            "a3": report.constants.a3(),
            "rows": report.records.len(),
            "slopes": slopes,
            "violations": report.violations.len(),
            "worst_violation": worst,
            "n0": config.n0,
            "max_deviation": largest_deviation,
            "r": config.r,
            "within_ball": largest_deviation <= config.r,
            "runtime_seconds": start.elapsed().as_secs_f64(),
        }));
    }
    let summary_path = ctx.path(&config.outputs.summary);
    write_summary(&summary_path, &summary)?;
    files.push(summary_path);
    Ok(Outcome { passed, summary, files })
}

/// Riemann-sum error against the Lipschitz bound for a seeded function family.
pub fn cmd_riemann_check(config: &ExperimentConfig, ctx: &Context) -> Result<Outcome> {
    let start = Instant::now();
    let sweep = config.particles.clone().unwrap_or_else(|| (3..=10).map(|k| 1usize << k).collect());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let family = lipschitz_family(&mut rng, config.riemann_functions);
    let quad = match config.quadrature_nodes {
        Some(m) => QuadratureGrid::new(config.domain.clone(), m)?,
        None => {
            let n = config.domain.dim();
            let per_axis = ((1u32 << 16) as f64).powf(1.0 / n as f64).round() as usize;
            QuadratureGrid::with_per_axis(config.domain.clone(), per_axis)?
        }
    };
    let rows = check_riemann_family(&config.domain, &sweep, config.tag_rule, &family, &quad)?;
    let path = ctx.path(&config.outputs.riemann);
    write_riemann(&path, &rows)?;
    let violations: Vec<Value> = rows
        .iter()
        .filter(|r| !r.check.holds)
        .map(|r| json!({ "function": r.label, "N": r.particles, "lhs": r.check.lhs, "rhs": r.check.rhs }))
        .collect();
    let passed = violations.is_empty();
    let worst_ratio = rows.iter().map(|r| r.check.lhs / r.check.rhs).fold(0.0, f64::max);
    let summary = vec![json!({
        "command": "riemann-check",
        "domain": config.domain.name(),
        "functions": family.len(),
        "N": sweep,
        "checks": rows.len(),
        "violations": violations,
        "worst_ratio": worst_ratio,
        "passed": passed,
        "runtime_seconds": start.elapsed().as_secs_f64(),
    })];
    let summary_path = ctx.path(&config.outputs.summary);
    write_summary(&summary_path, &summary)?;
    Ok(Outcome { passed, summary, files: vec![path, summary_path] })
}

/// Reads back a whole output file, for comparisons.
pub fn read_output(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}
