//! Line-based `key = value` experiment configuration.
//!
//! ```text
//! # transport convergence study
//! model = transport
//! [particles]
//! N = 64, 128
//! [mollifier]
//! epsilon = 0.1
//! [integrator]
//! T = 0.5
//! ```
//!
//! Sections are optional; a key placed under a section must belong to it.
//! Unknown keys, repeated keys and out-of-range values are errors.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use particle_pde::analysis::{AbstractConstants, EpsilonPolicy};
use particle_pde::geometry::{Domain, TagRule};
use particle_pde::integral_evolution::ToySystem;
use particle_pde::particle::{KernelStrategy, KernelUpdate, DEFAULT_BLOWUP_GUARD};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` {message}")]
    Range { line: usize, key: String, message: String },
}

const SECTIONS: &[&str] = &["experiment", "particles", "mollifier", "integrator", "bounds", "lemmas", "riemann", "output"];

const KEYS: &[(&str, &str)] = &[
    ("model", "experiment"),
    ("domain", "experiment"),
    ("custom_coefficients", "experiment"),
    ("initial", "experiment"),
    ("amplitude", "experiment"),
    ("frequency", "experiment"),
    ("phase", "experiment"),
    ("offset", "experiment"),
    ("soliton_speed", "experiment"),
    ("soliton_center", "experiment"),
    ("seed", "experiment"),
    ("toy", "experiment"),
    ("N", "particles"),
    ("tag_rule", "particles"),
    ("kernel_update", "particles"),
    ("kernel_strategy", "particles"),
    ("blowup_guard", "particles"),
    ("epsilon", "mollifier"),
    ("schedule_n", "mollifier"),
    ("schedule_p", "mollifier"),
    ("quadrature_M", "mollifier"),
    ("dt", "integrator"),
    ("T", "integrator"),
    ("sample_times", "integrator"),
    ("r", "bounds"),
    ("lip_y0", "bounds"),
    ("n0", "bounds"),
    ("reference_grid", "bounds"),
    ("abstract_M", "bounds"),
    ("abstract_omega", "bounds"),
    ("abstract_C4", "bounds"),
    ("abstract_C7", "bounds"),
    ("abstract_C_A", "bounds"),
    ("abstract_solution_norm", "bounds"),
    ("abstract_chi_A", "bounds"),
    ("abstract_C_f", "bounds"),
    ("abstract_chi_f", "bounds"),
    ("lemma_epsilon", "lemmas"),
    ("lemma_nodes", "lemmas"),
    ("frozen_state", "lemmas"),
    ("lemma_samples", "lemmas"),
    ("kernel_particles", "lemmas"),
    ("functions", "riemann"),
    ("trajectory", "output"),
    ("errors", "output"),
    ("summary", "output"),
    ("lemmas", "output"),
    ("riemann", "output"),
];

/// Initial datum of a PDE experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialCondition {
    /// `offset + amplitude sin(2 pi frequency x + phase)`.
    Sine { amplitude: f64, frequency: i32, phase: f64, offset: f64 },
    Soliton { speed: f64, center: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputNames {
    pub trajectory: String,
    pub errors: String,
    pub summary: String,
    pub lemmas: String,
    pub riemann: String,
}

impl Default for OutputNames {
    fn default() -> Self {
        Self {
            trajectory: "trajectory.csv".into(),
            errors: "errors.csv".into(),
            summary: "summary.jsonl".into(),
            lemmas: "lemmas.csv".into(),
            riemann: "riemann.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: String,
    pub domain: Domain,
    pub custom_coefficients: Vec<f64>,
    pub initial: InitialCondition,
    pub seed: u64,
    pub toys: Vec<ToySystem>,
    /// `None` lets each command pick its own sweep.
    pub particles: Option<Vec<usize>>,
    pub tag_rule: TagRule,
    pub kernel_update: KernelUpdate,
    pub kernel_strategy: KernelStrategy,
    pub blowup_guard: f64,
    pub epsilon: EpsilonPolicy,
    /// Total quadrature nodes; the partition default if unset.
    pub quadrature_nodes: Option<usize>,
    /// `None` selects the automatic step.
    pub dt: Option<f64>,
    pub t_final: f64,
    pub sample_times: Vec<f64>,
    pub r: f64,
    pub lip_y0: Option<f64>,
    pub n0: usize,
    pub reference_grid: Option<usize>,
    pub abstract_constants: Option<AbstractConstants>,
    pub lemma_epsilons: Vec<f64>,
    pub lemma_nodes: usize,
    pub frozen_state: f64,
    pub lemma_samples: usize,
    pub kernel_particles: usize,
    pub riemann_functions: usize,
    pub outputs: OutputNames,
}

struct Entry {
    line: usize,
    value: String,
}

struct Entries(HashMap<&'static str, Entry>);

impl Entries {
    fn take(&mut self, key: &'static str) -> Option<Entry> {
        self.0.remove(key)
    }

    fn parsed<T: FromStr>(&mut self, key: &'static str) -> Result<Option<(usize, T)>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(entry) => entry
                .value
                .parse()
                .map(|v| Some((entry.line, v)))
                .map_err(|_| ConfigError::Parse { line: entry.line, message: format!("cannot parse `{}` for `{key}`", entry.value) }),
        }
    }

    fn list<T: FromStr>(&mut self, key: &'static str) -> Result<Option<(usize, Vec<T>)>, ConfigError> {
        match self.take(key) {
            None => Ok(None),
            Some(entry) => {
                let items = split_list(&entry.value)
                    .map(|item| {
                        item.parse().map_err(|_| ConfigError::Parse {
                            line: entry.line,
                            message: format!("cannot parse list entry `{item}` for `{key}`"),
                        })
                    })
                    .collect::<Result<Vec<T>, _>>()?;
                if items.is_empty() {
                    return Err(ConfigError::Range { line: entry.line, key: key.into(), message: "must not be empty".into() });
                }
                Ok(Some((entry.line, items)))
            }
        }
    }

    fn string(&mut self, key: &'static str) -> Option<(usize, String)> {
        self.take(key).map(|e| (e.line, e.value))
    }
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn range(line: usize, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Range { line, key: key.into(), message: message.into() }
}

fn positive(value: Option<(usize, f64)>, key: &str, default: f64) -> Result<f64, ConfigError> {
    match value {
        None => Ok(default),
        Some((line, v)) if !(v > 0.0 && v.is_finite()) => Err(range(line, key, format!("must be positive, got {v}"))),
        Some((_, v)) => Ok(v),
    }
}

fn parse_domain(line: usize, name: &str) -> Result<Domain, ConfigError> {
    match name {
        "circle" | "torus" | "torus1" => Ok(Domain::circle()),
        "interval" => Ok(Domain::unit_interval()),
        other => match other.strip_prefix("torus").and_then(|d| d.parse::<usize>().ok()) {
            Some(dim) if (1..=3).contains(&dim) => Ok(Domain::torus(dim)),
            _ => Err(range(line, "domain", format!("unknown domain `{other}`"))),
        },
    }
}

/// Reads and validates a configuration file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut entries = Entries(HashMap::new());
    let mut section: Option<String> = None;
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::Parse { line, message: format!("malformed section header `{content}`") })?
                .trim();
            if !SECTIONS.contains(&name) {
                return Err(ConfigError::Parse { line, message: format!("unknown section `{name}`") });
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| ConfigError::Parse { line, message: format!("expected `key = value`, got `{content}`") })?;
        let (key, value) = (key.trim(), value.trim());
        let &(known, home) = KEYS
            .iter()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| ConfigError::UnknownKey { line, key: key.to_string() })?;
        if section.as_deref().is_some_and(|s| s != home) {
            return Err(ConfigError::UnknownKey { line, key: format!("{}.{key}", section.as_deref().unwrap_or("")) });
        }
        if value.is_empty() {
            return Err(ConfigError::Parse { line, message: format!("`{key}` has no value") });
        }
        if let Some(previous) = entries.0.insert(known, Entry { line, value: value.to_string() }) {
            return Err(ConfigError::Parse { line, message: format!("`{key}` already set on line {}", previous.line) });
        }
    }
    build(entries)
}

fn build(mut e: Entries) -> Result<ExperimentConfig, ConfigError> {
    let model = e.string("model").map_or_else(|| "transport".to_string(), |(_, v)| v);
    let domain = match e.string("domain") {
        Some((line, name)) => parse_domain(line, &name)?,
        None => Domain::circle(),
    };
    let custom_coefficients = e.list::<f64>("custom_coefficients")?.map(|(_, v)| v).unwrap_or_default();

    let amplitude = e.parsed::<f64>("amplitude")?;
    let frequency = e.parsed::<i32>("frequency")?;
    let phase = e.parsed::<f64>("phase")?;
    let offset = e.parsed::<f64>("offset")?;
    let speed = e.parsed::<f64>("soliton_speed")?;
    let center = e.parsed::<f64>("soliton_center")?;
    let initial = match e.string("initial") {
        Some((_, kind)) if kind == "soliton" => {
            if let Some(&(l, _)) = amplitude.as_ref().or(offset.as_ref()).or(phase.as_ref()) {
                return Err(range(l, "initial", "sine parameters given for a soliton datum"));
            }
            InitialCondition::Soliton { speed: positive(speed, "soliton_speed", 16.0)?, center: center.map_or(0.5, |c| c.1) }
        }
        Some((line, kind)) if kind != "sine" => return Err(range(line, "initial", format!("unknown initial datum `{kind}`"))),
        _ => {
            if let Some((l, _)) = speed.or(center) {
                return Err(range(l, "soliton_speed", "soliton parameters given for a sine datum"));
            }
            let frequency = match frequency {
                Some((l, 0)) => return Err(range(l, "frequency", "must be nonzero")),
                Some((_, k)) => k,
                None => 1,
            };
            InitialCondition::Sine {
                amplitude: amplitude.map_or(1.0, |a| a.1),
                frequency,
                phase: phase.map_or(0.0, |p| p.1),
                offset: offset.map_or(0.0, |o| o.1),
            }
        }
    };
    let seed = e.parsed::<u64>("seed")?.map_or(7, |s| s.1);
    let toys = match e.list::<String>("toy")? {
        Some((line, names)) => names
            .iter()
            .map(|n| n.parse::<ToySystem>().map_err(|err| range(line, "toy", err.to_string())))
            .collect::<Result<_, _>>()?,
        None => vec![ToySystem::Cos, ToySystem::RankOne, ToySystem::SourceOnly],
    };

    let particles = match e.list::<usize>("N")? {
        Some((line, list)) if list.contains(&0) => return Err(range(line, "N", "entries must be positive")),
        Some((_, list)) => Some(list),
        None => None,
    };
    let tag_rule = match e.string("tag_rule") {
        Some((line, v)) => v.parse().map_err(|err: particle_pde::Error| range(line, "tag_rule", err.to_string()))?,
        None => TagRule::Midpoint,
    };
    let kernel_update = match e.string("kernel_update") {
        Some((line, v)) => v.parse().map_err(|err: particle_pde::Error| range(line, "kernel_update", err.to_string()))?,
        None => KernelUpdate::PerStage,
    };
    let kernel_strategy = match e.string("kernel_strategy") {
        Some((line, v)) => v.parse().map_err(|err: particle_pde::Error| range(line, "kernel_strategy", err.to_string()))?,
        None => KernelStrategy::Auto,
    };
    let blowup_guard = positive(e.parsed("blowup_guard")?, "blowup_guard", DEFAULT_BLOWUP_GUARD)?;

    let schedule_n = e.parsed::<usize>("schedule_n")?;
    let schedule_p = e.parsed::<usize>("schedule_p")?;
    let epsilon = match e.take("epsilon") {
        Some(entry) if entry.value == "schedule" => EpsilonPolicy::Schedule {
            dim: schedule_n.map_or(domain.dim(), |v| v.1),
            order: schedule_p.map_or(1, |v| v.1),
        },
        Some(entry) => {
            if let Some((l, _)) = schedule_n.or(schedule_p) {
                return Err(range(l, "schedule_n", "schedule parameters need `epsilon = schedule`"));
            }
            let list = split_list(&entry.value)
                .map(|item| {
                    item.parse::<f64>().map_err(|_| ConfigError::Parse {
                        line: entry.line,
                        message: format!("cannot parse `{item}` for `epsilon`"),
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            for &eps in &list {
                if !(eps > 0.0) {
                    return Err(range(entry.line, "epsilon", format!("entries must be positive, got {eps}")));
                }
                if domain.is_periodic() && eps >= 0.5 {
                    return Err(range(entry.line, "epsilon", format!("{eps} is not below 1/2 on the torus")));
                }
            }
            EpsilonPolicy::Fixed(list)
        }
        None => EpsilonPolicy::Fixed(vec![0.1]),
    };
    let quadrature_nodes = match e.parsed::<usize>("quadrature_M")? {
        Some((line, 0)) => return Err(range(line, "quadrature_M", "must be positive")),
        Some((_, m)) => Some(m),
        None => None,
    };

    let dt = match e.take("dt") {
        Some(entry) if entry.value == "auto" => None,
        Some(entry) => {
            let v: f64 = entry
                .value
                .parse()
                .map_err(|_| ConfigError::Parse { line: entry.line, message: format!("cannot parse `{}` for `dt`", entry.value) })?;
            if !(v > 0.0 && v.is_finite()) {
                return Err(range(entry.line, "dt", format!("must be positive, got {v}")));
            }
            Some(v)
        }
        None => None,
    };
    let t_final = positive(e.parsed("T")?, "T", 0.5)?;
    let sample_times = match e.list::<f64>("sample_times")? {
        Some((line, mut times)) => {
            if times.iter().any(|&t| !(t >= 0.0 && t <= t_final)) {
                return Err(range(line, "sample_times", format!("entries must lie in [0, T = {t_final}]")));
            }
            times.sort_by(f64::total_cmp);
            times.dedup();
            times
        }
        None => vec![t_final],
    };

    let r = positive(e.parsed("r")?, "r", 2.0)?;
    let lip_y0 = match e.parsed::<f64>("lip_y0")? {
        Some((line, v)) if !(v >= 0.0) => return Err(range(line, "lip_y0", "must be nonnegative")),
        other => other.map(|v| v.1),
    };
    let n0 = match e.parsed::<usize>("n0")? {
        Some((line, 0)) => return Err(range(line, "n0", "must be positive")),
        other => other.map_or(16, |v| v.1),
    };
    let reference_grid = e.parsed::<usize>("reference_grid")?.map(|v| v.1);

    let semigroup = e.parsed::<f64>("abstract_M")?;
    let omega = e.parsed::<f64>("abstract_omega")?;
    let c4 = e.parsed::<f64>("abstract_C4")?;
    let c7 = e.parsed::<f64>("abstract_C7")?;
    let optional = [
        e.parsed::<f64>("abstract_C_A")?,
        e.parsed::<f64>("abstract_solution_norm")?,
        e.parsed::<f64>("abstract_chi_A")?,
        e.parsed::<f64>("abstract_C_f")?,
        e.parsed::<f64>("abstract_chi_f")?,
    ];
    let abstract_constants = match (semigroup, omega, c4, c7) {
        (Some(m), Some(w), Some(c4), Some(c7)) => {
            if m.1 < 1.0 {
                return Err(range(m.0, "abstract_M", "semigroup bound must be at least 1"));
            }
            for (line, v) in [c4, c7].into_iter().chain(optional.iter().flatten().copied()) {
                if !(v >= 0.0) {
                    return Err(range(line, "abstract constant", format!("must be nonnegative, got {v}")));
                }
            }
            let value = |i: usize| optional[i].map_or(0.0, |v| v.1);
            Some(AbstractConstants {
                semigroup_bound: m.1,
                omega: w.1,
                c4: c4.1,
                c7: c7.1,
                r,
                c_a_operator: value(0),
                solution_norm: value(1),
                chi_a: value(2),
                c_f: value(3),
                chi_f: value(4),
                c_infinity: 1.0,
            })
        }
        (None, None, None, None) => {
            if let Some((line, _)) = optional.iter().flatten().next() {
                return Err(range(*line, "abstract constant", "needs abstract_M, abstract_omega, abstract_C4 and abstract_C7"));
            }
            None
        }
        (m, w, a, b) => {
            let line = [m, w, a, b].iter().flatten().map(|v| v.0).min().unwrap_or(0);
            return Err(range(line, "abstract_M", "abstract_M, abstract_omega, abstract_C4 and abstract_C7 go together"));
        }
    };

    let lemma_epsilons = match e.list::<f64>("lemma_epsilon")? {
        Some((line, list)) => {
            if list.iter().any(|&v| !(v > 0.0 && v < 0.5)) {
                return Err(range(line, "lemma_epsilon", "entries must lie in (0, 1/2)"));
            }
            if list.len() < 3 {
                return Err(range(line, "lemma_epsilon", "needs at least three scales for the rate fit"));
            }
            list
        }
        None => vec![0.2, 0.1, 0.05, 0.025],
    };
    let count = |e: &mut Entries, key: &'static str, default: usize| -> Result<usize, ConfigError> {
        match e.parsed::<usize>(key)? {
            Some((line, 0)) => Err(range(line, key, "must be positive")),
            Some((_, v)) => Ok(v),
            None => Ok(default),
        }
    };
    let lemma_nodes = count(&mut e, "lemma_nodes", 4096)?;
    let lemma_samples = count(&mut e, "lemma_samples", 10)?;
    let kernel_particles = count(&mut e, "kernel_particles", 256)?;
    let riemann_functions = count(&mut e, "functions", 20)?;
    let frozen_state = match e.parsed::<f64>("frozen_state")? {
        Some((line, v)) if !v.is_finite() => return Err(range(line, "frozen_state", "must be finite")),
        other => other.map_or(1.0, |v| v.1),
    };

    let mut outputs = OutputNames::default();
    for (key, slot) in [
        ("trajectory", &mut outputs.trajectory),
        ("errors", &mut outputs.errors),
        ("summary", &mut outputs.summary),
        ("lemmas", &mut outputs.lemmas),
        ("riemann", &mut outputs.riemann),
    ] {
        if let Some((line, name)) = e.string(key) {
            if name.contains('/') || name.contains('\\') {
                return Err(range(line, key, "must be a plain file name inside the output directory"));
            }
            *slot = name;
        }
    }
    debug_assert!(e.0.is_empty(), "every known key is consumed");

    Ok(ExperimentConfig {
        model,
        domain,
        custom_coefficients,
        initial,
        seed,
        toys,
        particles,
        tag_rule,
        kernel_update,
        kernel_strategy,
        blowup_guard,
        epsilon,
        quadrature_nodes,
        dt,
        t_final,
        sample_times,
        r,
        lip_y0,
        n0,
        reference_grid,
        abstract_constants,
        lemma_epsilons,
        lemma_nodes,
        frozen_state,
        lemma_samples,
        kernel_particles,
        riemann_functions,
        outputs,
    })
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        parse_str("").expect("the empty configuration is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_transport_config() {
        let config = parse_str("model = transport\nN = 64, 128\nepsilon = 0.1\nT = 0.5\n").unwrap();
        assert_eq!(config.model, "transport");
        assert_eq!(config.particles, Some(vec![64, 128]));
        assert_eq!(config.epsilon, EpsilonPolicy::Fixed(vec![0.1]));
        assert_eq!(config.t_final, 0.5);
        assert_eq!(config.sample_times, vec![0.5]);
    }

    #[test]
    fn sections_and_comments() {
        let text = "# study\n[experiment]\nmodel = burgers  # quasilinear\namplitude = 0.2\n\n[mollifier]\nepsilon = schedule\nschedule_p = 1\n[integrator]\nT = 0.25\ndt = auto\n";
        let config = parse_str(text).unwrap();
        assert_eq!(config.model, "burgers");
        assert_eq!(config.epsilon, EpsilonPolicy::Schedule { dim: 1, order: 1 });
        assert_eq!(config.dt, None);
        assert!(matches!(config.initial, InitialCondition::Sine { amplitude, .. } if amplitude == 0.2));
    }

    #[test]
    fn epsilon_at_least_half_on_torus() {
        let err = parse_str("model = transport\nepsilon = 0.1, 0.6\n").unwrap_err();
        assert!(matches!(err, ConfigError::Range { line: 2, ref key, .. } if key == "epsilon"), "{err}");
        assert!(parse_str("domain = interval\nepsilon = 0.6\n").is_ok());
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse_str("model = transport\n\nfoo = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 3, ref key } if key == "foo"), "{err}");
    }

    #[test]
    fn key_in_wrong_section() {
        let err = parse_str("[particles]\nepsilon = 0.1\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 2, .. }), "{err}");
    }

    #[test]
    fn zero_dt_is_a_range_error() {
        let err = parse_str("dt = 0\n").unwrap_err();
        assert!(matches!(err, ConfigError::Range { line: 1, ref key, .. } if key == "dt"), "{err}");
    }

    #[test]
    fn malformed_lines_and_duplicates() {
        assert!(matches!(parse_str("model transport\n"), Err(ConfigError::Parse { line: 1, .. })));
        assert!(matches!(parse_str("[nowhere]\n"), Err(ConfigError::Parse { line: 1, .. })));
        assert!(matches!(parse_str("N = 8\nN = 16\n"), Err(ConfigError::Parse { line: 2, .. })));
        assert!(matches!(parse_str("N = 8, x\n"), Err(ConfigError::Parse { line: 1, .. })));
        assert!(matches!(parse_str("N = 8, 0\n"), Err(ConfigError::Range { line: 1, .. })));
    }

    #[test]
    fn abstract_constants_all_or_nothing() {
        assert!(parse_str("abstract_M = 1\n").is_err());
        let config =
            parse_str("abstract_M = 1\nabstract_omega = 0\nabstract_C4 = 0.5\nabstract_C7 = 0\nr = 3\n").unwrap();
        let c = config.abstract_constants.unwrap();
        assert_eq!((c.semigroup_bound, c.c4, c.r, c.chi_f), (1.0, 0.5, 3.0, 0.0));
    }

    #[test]
    fn sample_times_within_horizon() {
        assert!(matches!(parse_str("T = 1\nsample_times = 0.5, 1.5\n"), Err(ConfigError::Range { line: 2, .. })));
        let config = parse_str("T = 1\nsample_times = 1.0, 0.25, 0.5\n").unwrap();
        assert_eq!(config.sample_times, vec![0.25, 0.5, 1.0]);
    }
}
