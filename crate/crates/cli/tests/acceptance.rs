//! Acceptance run: one PASS/FAIL line per criterion, at its stated tolerance
//! and runtime budget. A red criterion is reported, not hidden; the process
//! exits nonzero on a red criterion only when `ACCEPTANCE_STRICT=1`.

use std::f64::consts::PI;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use particle_pde::analysis::{
    error_grid, fit_rate, norm_l2, run_mollified_sweep, EpsilonPolicy, MollifiedSweep, DISSIPATIVITY, INTERIOR,
    OPERATOR_CONVERGENCE, STABILITY, SYMMETRY,
};
use particle_pde::field::{Field, FourierField};
use particle_pde::geometry::{Domain, TagRule, TaggedPartition};
use particle_pde::kernel::{apply_discrete_operator, assemble_kernel, smoothed_operator_apply};
use particle_pde::pde_model::PdeModel;
use particle_pde::mollifier::Mollifier;
use particle_pde::particle::PiecewiseField;
use particle_pde::quadrature::QuadratureGrid;
use particle_pde::reference::{exact_transport, fine_grid_mollified, snapshot, FineGridOptions, ReferenceSolution};
use particle_pde_cli::commands::read_output;
use particle_pde_cli::{
    cmd_riemann_check, cmd_sweep, cmd_verify_bounds, cmd_verify_lemmas, parse_str, Context, ExperimentConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

struct Criterion {
    id: &'static str,
    title: &'static str,
    budget_seconds: f64,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: "1", title: "Riemann-sum bound", budget_seconds: 5.0, run: riemann_bound },
        Criterion { id: "2", title: "mollifier integrity", budget_seconds: 5.0, run: mollifier_integrity },
        Criterion { id: "3", title: "lemma suite on the circle, transport", budget_seconds: 60.0, run: lemma_suite },
        Criterion { id: "4", title: "kernel vs double convolution", budget_seconds: 60.0, run: kernel_oracle },
        Criterion { id: "5", title: "graph-limit bound on toy systems", budget_seconds: 300.0, run: graph_limit },
        Criterion { id: "6", title: "mollified equation vs exact transport", budget_seconds: 120.0, run: mollified_step },
        Criterion { id: "7a", title: "two-phase: N-rate at fixed epsilon", budget_seconds: 300.0, run: two_phase_n },
        Criterion { id: "7b", title: "two-phase: epsilon trend at N = 2048", budget_seconds: 300.0, run: two_phase_eps },
        Criterion { id: "8", title: "scheduled sweep", budget_seconds: 600.0, run: scheduled_sweep },
        Criterion { id: "9", title: "determinism of the graph-limit sweep", budget_seconds: 300.0, run: determinism },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    let mut errors = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == c.id) {
            continue;
        }
        let start = Instant::now();
        let result = (c.run)();
        let seconds = start.elapsed().as_secs_f64();
        let in_budget = seconds < c.budget_seconds;
        match result {
            Ok((passed, detail)) => {
                let ok = passed && in_budget;
                if !ok {
                    failures += 1;
                }
                let budget = if in_budget { String::new() } else { " over budget".to_string() };
                println!(
                    "{} criterion {} ({}): {detail} [{seconds:.1} s / {:.0} s{budget}]",
                    if ok { "PASS" } else { "FAIL" },
                    c.id,
                    c.title,
                    c.budget_seconds
                );
            }
            Err(e) => {
                errors += 1;
                println!("FAIL criterion {} ({}): error: {e} [{seconds:.1} s]", c.id, c.title);
            }
        }
    }
    println!("acceptance: {failures} criteria red, {errors} errored");
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if errors > 0 || (strict && failures > 0) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn sci(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.4e}")).collect::<Vec<_>>().join(", ")
}

fn config(text: &str) -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
    Ok(parse_str(text)?)
}

fn riemann_bound() -> Outcome {
    let dir = tempfile::tempdir()?;
    let mut violations = 0;
    let mut checks = 0;
    let mut worst: f64 = 0.0;
    for domain in ["circle", "interval"] {
        let cfg = config(&format!("domain = {domain}\nN = 8, 16, 32, 64, 128, 256, 512, 1024\nfunctions = 20\n"))?;
        let outcome = cmd_riemann_check(&cfg, &Context::new(dir.path()))?;
        let line = &outcome.summary[0];
        violations += line["violations"].as_array().map_or(usize::MAX, Vec::len);
        checks += line["checks"].as_u64().unwrap_or(0);
        worst = worst.max(line["worst_ratio"].as_f64().unwrap_or(f64::INFINITY));
    }
    Ok((violations == 0 && checks == 320, format!("{violations} violations in {checks} checks, worst lhs/rhs {worst:.3e}")))
}

/// Composite Simpson rule on `[a, b]` with `panels` (even) panels.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let interior: f64 = (1..panels).map(|k| f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 }).sum();
    (f(a) + f(b) + interior) * h / 3.0
}

/// Sixth-order central difference of order `k` from point values.
fn central_difference(f: &impl Fn(f64) -> f64, x: f64, h: f64, k: usize) -> f64 {
    let w: &[(f64, f64)] = match k {
        1 => &[(1.0, 45.0), (2.0, -9.0), (3.0, 1.0)],
        2 => &[(1.0, 270.0), (2.0, -27.0), (3.0, 2.0)],
        _ => &[(1.0, -488.0), (2.0, 338.0), (3.0, -72.0), (4.0, 7.0)],
    };
    match k {
        1 => w.iter().map(|&(j, c)| c * (f(x + j * h) - f(x - j * h))).sum::<f64>() / (60.0 * h),
        2 => (w.iter().map(|&(j, c)| c * (f(x + j * h) + f(x - j * h))).sum::<f64>() - 490.0 * f(x)) / (180.0 * h * h),
        _ => w.iter().map(|&(j, c)| c * (f(x + j * h) - f(x - j * h))).sum::<f64>() / (240.0 * h.powi(3)),
    }
}

fn mollifier_integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_mass: f64 = 0.0;
    let mut worst_derivative: f64 = 0.0;
    for eps in [0.2, 0.1, 0.05, 0.025] {
        let m = Mollifier::new(1, eps, 3)?;
        let mass = simpson(|x| m.eval_1d(x), -eps, eps, 20_000);
        worst_mass = worst_mass.max((mass - 1.0).abs());
        let values = |x: f64| m.eval_1d(x);
        for order in 1..=3 {
            let scale = (0..=4000)
                .map(|k| m.derivative_1d(order, -eps + 2.0 * eps * k as f64 / 4000.0).map(f64::abs))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .fold(0.0, f64::max);
            for _ in 0..50 {
                let x = rng.gen_range(-0.98 * eps..0.98 * eps);
                let analytic = m.derivative_1d(order, x)?;
                let numeric = central_difference(&values, x, eps * 1e-3, order);
                worst_derivative = worst_derivative.max((analytic - numeric).abs() / analytic.abs().max(scale));
            }
        }
    }
    Ok((
        worst_mass <= 1e-8 && worst_derivative <= 1e-6,
        format!("max |int eta - 1| = {worst_mass:.2e} (tol 1e-8), max relative derivative error {worst_derivative:.2e} (tol 1e-6)"),
    ))
}

fn lemma_suite() -> Outcome {
    let dir = tempfile::tempdir()?;
    let outcome = cmd_verify_lemmas(&config("model = transport\n")?, &Context::new(dir.path()))?;
    let text = String::from_utf8(read_output(&dir.path().join("lemmas.csv"))?)?;
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    let mut worst = std::collections::BTreeMap::<String, (f64, bool)>::new();
    for row in rows.records() {
        let row = row?;
        let measured: f64 = row[2].parse()?;
        let passed = &row[4] == "true";
        let entry = worst.entry(row[0].to_string()).or_insert((f64::NEG_INFINITY, true));
        entry.0 = entry.0.max(measured);
        entry.1 &= passed;
    }
    let pick = |name: &str| worst.get(name).copied().unwrap_or((f64::NAN, false));
    let (sym, interior, dissip, rate, stab) =
        (pick(SYMMETRY), pick(INTERIOR), pick(DISSIPATIVITY), pick(OPERATOR_CONVERGENCE), pick(STABILITY));
    let passed = sym.1 && sym.0 <= 1e-7 && interior.1 && stab.1 && dissip.1 && dissip.0 <= 1e-6 && rate.1 && rate.0 >= 0.9;
    Ok((
        passed && outcome.passed,
        format!(
            "(a) symmetry {:.1e} <= 1e-7, (b) interior ratio {:.3} <= 1 and stability {}, (c) dissipativity {:.1e} <= 1e-6, (d) eps-slope {:.3} >= 0.9; {} checks",
            sym.0,
            interior.0,
            if stab.1 { "holds" } else { "fails" },
            dissip.0,
            rate.0,
            outcome.summary[0]["checks"]
        ),
    ))
}

fn kernel_oracle() -> Outcome {
    let domain = Domain::circle();
    let partition = Arc::new(TaggedPartition::uniform(domain.clone(), 256, TagRule::Midpoint)?);
    let quad = QuadratureGrid::new(domain, 4096)?;
    let tags: Vec<f64> = partition.tags().map(|t| t[0]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let fields = [
        FourierField::sine(1.0, 1, 0.0, 0.0),
        FourierField::scalar_1d(0.2, &[(0.5, 2, 0.5 * PI), (0.25, 3, 0.3)]),
        FourierField::random_1d(&mut rng, 4, 4),
    ];
    let state = PiecewiseField::sample(partition.clone(), &FourierField::sine(0.2, 1, 0.0, 0.0));
    let mut worst: f64 = 0.0;
    for model in [PdeModel::transport(), PdeModel::burgers()] {
        let m = Mollifier::new(1, 0.1, model.order() + 1)?;
        let kernel = assemble_kernel(&model, &m, &partition, 0.0, &state, &quad)?;
        for g in &fields {
            let xi: Vec<f64> = tags.iter().map(|&x| g.eval(&[x])[0]).collect();
            let discrete = apply_discrete_operator(&kernel, &xi)?;
            let oracle = smoothed_operator_apply(&model, &m, &quad, 0.0, &state, g, Some(&tags))?;
            worst = worst.max(discrete.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    Ok((worst <= 1e-4, format!("max L-inf gap {worst:.2e} (tol 1e-4), transport and Burgers at state 0.2 sin(2 pi x)")))
}

fn graph_limit() -> Outcome {
    let dir = tempfile::tempdir()?;
    let outcome = cmd_verify_bounds(&graph_limit_config()?, &Context::new(dir.path()))?;
    let mut slopes = Vec::new();
    let mut violations = 0;
    let mut in_range = true;
    for line in &outcome.summary {
        violations += line["violations"].as_u64().unwrap_or(u64::MAX);
        for fit in line["slopes"].as_array().into_iter().flatten() {
            let slope = fit["slope"].as_f64().unwrap_or(f64::NAN);
            in_range &= (-1.3..=-0.7).contains(&slope);
            slopes.push(format!("{}@t={}: {slope:.3}", line["system"].as_str().unwrap_or("?"), fit["t"]));
        }
    }
    let rows: u64 = outcome.summary.iter().map(|l| l["rows"].as_u64().unwrap_or(0)).sum();
    Ok((
        violations == 0 && in_range && slopes.len() == 6 && rows == 36,
        format!("{violations} bound violations in {rows} rows; N-slopes [{}] in [-1.3, -0.7]", slopes.join(", ")),
    ))
}

fn graph_limit_config() -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
    config("toy = cos, rank-one\nN = 16, 32, 64, 128, 256, 512\nT = 1.0\nsample_times = 0.25, 0.5, 1.0\ndt = 0.01\n")
}

fn transport_sine() -> (Arc<PdeModel>, Arc<dyn Field>, Arc<dyn ReferenceSolution>) {
    let y0: Arc<dyn Field> = Arc::new(FourierField::sine(1.0, 1, 0.0, 0.0));
    (Arc::new(PdeModel::transport()), y0.clone(), Arc::new(exact_transport(y0)))
}

/// `|y_eps(t) - y(t)|_L2` with `y_eps` from a fine grid.
fn mollified_error(eps: f64, t: f64, grid: usize) -> Result<f64, Box<dyn std::error::Error>> {
    let (model, y0, exact) = transport_sine();
    let m = Arc::new(Mollifier::new(1, eps, 2)?);
    let fine = fine_grid_mollified(model, m, y0.as_ref(), &FineGridOptions::new(grid, t))?;
    let quad = error_grid(&Domain::circle(), grid)?;
    Ok(norm_l2(&snapshot(&fine, t)?, &snapshot(exact.as_ref(), t)?, &quad))
}

fn mollified_step() -> Outcome {
    let scales = [0.2, 0.1, 0.05];
    let errors = scales.iter().map(|&eps| mollified_error(eps, 0.5, 4096)).collect::<Result<Vec<_>, _>>()?;
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    let fit = fit_rate(&scales.iter().copied().zip(errors.iter().copied()).collect::<Vec<_>>())?;
    Ok((
        monotone && fit.slope >= 0.8,
        format!("errors [{}] at eps {scales:?}, eps-slope {:.3} (>= 0.8)", sci(&errors), fit.slope),
    ))
}

fn transport_sweep(sweep: Vec<usize>, epsilon: EpsilonPolicy, t: f64) -> Result<Vec<(usize, f64, f64)>, Box<dyn std::error::Error>> {
    let (model, y0, exact) = transport_sine();
    let mut setup = MollifiedSweep::new(model, y0, exact.as_ref());
    setup.sweep = sweep;
    setup.epsilon = epsilon;
    setup.sample_times = vec![t];
    let report = run_mollified_sweep(&setup)?;
    Ok(report.records.iter().map(|r| (r.particles, r.epsilon.unwrap_or(f64::NAN), r.err_l2)).collect())
}

fn two_phase_n() -> Outcome {
    let sweep = vec![64, 128, 256, 512, 1024];
    let rows = transport_sweep(sweep.clone(), EpsilonPolicy::Fixed(vec![0.1]), 0.5)?;
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.0 as f64, r.2)).collect();
    let fit = fit_rate(&pairs)?;
    let decreasing = rows.windows(2).all(|w| w[1].2 <= w[0].2);

    // Diagnostic: the same particles against the mollified solution y_eps.
    let (model, y0, _) = transport_sine();
    let m = Arc::new(Mollifier::new(1, 0.1, 2)?);
    let fine = fine_grid_mollified(model, m, y0.as_ref(), &FineGridOptions::new(8192, 0.5))?;
    let (model, y0, _) = transport_sine();
    let mut setup = MollifiedSweep::new(model, y0, &fine);
    setup.sweep = sweep;
    setup.epsilon = EpsilonPolicy::Fixed(vec![0.1]);
    setup.sample_times = vec![0.5];
    let particle_part = run_mollified_sweep(&setup)?;
    let particle_pairs: Vec<(f64, f64)> = particle_part.records.iter().map(|r| (r.particles as f64, r.err_l2)).collect();
    let particle_fit = fit_rate(&particle_pairs)?;
    let floor = mollified_error(0.1, 0.5, 8192)?;
    let errors: Vec<f64> = rows.iter().map(|r| r.2).collect();
    Ok((
        decreasing && fit.slope <= -0.7,
        format!(
            "|y^N - y| = [{}] for N = 64..1024, slope {:.3} (needs <= -0.7); floor |y_eps - y| = {floor:.4e}; diagnostic |y^N - y_eps| = [{}], slope {:.3}",
            sci(&errors),
            fit.slope,
            sci(&particle_pairs.iter().map(|p| p.1).collect::<Vec<_>>()),
            particle_fit.slope
        ),
    ))
}

fn two_phase_eps() -> Outcome {
    let rows = transport_sweep(vec![2048], EpsilonPolicy::Fixed(vec![0.05, 0.1, 0.2]), 0.5)?;
    // rows are in increasing epsilon; the error should grow with it
    let increasing = rows.windows(2).all(|w| w[1].2 > w[0].2);
    let errors: Vec<String> = rows.iter().map(|r| format!("({}, {:.4e})", r.1, r.2)).collect();
    Ok((increasing && rows.len() == 3, format!("N = 2048, (epsilon, |y^N - y|_L2) = {}", errors.join(", "))))
}

fn scheduled_sweep() -> Outcome {
    let dir = tempfile::tempdir()?;
    let mut details = Vec::new();
    let mut passed = true;
    for (name, extra) in [("transport", ""), ("burgers", "amplitude = 0.2\n")] {
        let cfg = config(&format!(
            "model = {name}\n{extra}N = 64, 256, 1024\nepsilon = schedule\nschedule_n = 1\nschedule_p = 1\nT = 0.25\n"
        ))?;
        let outcome = cmd_sweep(&cfg, &Context::new(dir.path().join(name)))?;
        let text = String::from_utf8(read_output(&dir.path().join(name).join("errors.csv"))?)?;
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut errors = Vec::new();
        for row in reader.records() {
            errors.push(row?[3].parse::<f64>()?);
        }
        let monotone = errors.len() == 3 && errors.windows(2).all(|w| w[1] <= w[0]);
        passed &= monotone && outcome.passed;
        details.push(format!("{name} err_L2 [{}]", sci(&errors)));
    }
    Ok((passed, format!("{}; nonincreasing in N = 64, 256, 1024 at t = 0.25", details.join("; "))))
}

fn csv_bytes(dir: &Path) -> Result<Vec<Vec<u8>>, Box<dyn std::error::Error>> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    Ok(files.iter().map(|p| read_output(p)).collect::<Result<Vec<_>, _>>()?)
}

fn determinism() -> Outcome {
    let first = tempfile::tempdir()?;
    let second = tempfile::tempdir()?;
    let cfg = graph_limit_config()?;
    cmd_verify_bounds(&cfg, &Context::new(first.path()))?;
    cmd_verify_bounds(&cfg, &Context::new(second.path()))?;
    let (a, b) = (csv_bytes(first.path())?, csv_bytes(second.path())?);
    let bytes: usize = a.iter().map(Vec::len).sum();
    Ok((!a.is_empty() && a == b, format!("{} CSV files, {bytes} bytes, identical: {}", a.len(), a == b)))
}
