//! Particle systems for directly given bounded Lipschitz kernels: consensus
//! (Hegselmann-Krause style) couplings, the shipped toy systems and the
//! graph-limit convergence study.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::analysis::{verify_graph_limit_bound, GraphLimitReport, GraphLimitSetup};
use crate::error::{Error, Result};
use crate::field::{Field, FourierField, TentField};
use crate::geometry::{Domain, TagRule};
use crate::pde_model::SourceField;
use crate::particle::LipschitzKernelSystem;
use crate::reference::{fine_grid_lipschitz, rank_one_closed_form, FineGridOptions, ReferenceSolution};

/// Scalar interaction `sigma(x, x')`, either as the consensus coupling
/// `sigma_ij (xi_j - xi_i)` or as the pure kernel form `sigma_ij xi_j`.
pub fn hk_system(
    interaction: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    sup_sigma: f64,
    lip_sigma: f64,
    with_centering: bool,
) -> LipschitzKernelSystem {
    let name = if with_centering { "consensus" } else { "kernel" };
    LipschitzKernelSystem::stationary(name, 1, move |x, y, out| out[0] = interaction(x, y), sup_sigma, lip_sigma)
        .with_centering(with_centering)
}

/// `sigma(x, x') = cos(2 pi (x - x'))`.
pub fn cos_kernel_system() -> LipschitzKernelSystem {
    LipschitzKernelSystem::stationary("cos-kernel", 1, |x, y, out| out[0] = (2.0 * PI * (x[0] - y[0])).cos(), 1.0, 2.0 * PI)
}

/// `sigma = s0` everywhere.
pub fn rank_one_system(strength: f64) -> LipschitzKernelSystem {
    LipschitzKernelSystem::stationary("rank-one", 1, move |_, _, out| out[0] = strength, strength.abs(), 0.0)
}

/// Zero kernel with a constant source.
pub fn source_only_system(value: Vec<f64>) -> LipschitzKernelSystem {
    let d = value.len();
    LipschitzKernelSystem::stationary("source-only", d, |_, _, out| out.fill(0.0), 0.0, 0.0)
        .with_source(SourceField::constant(value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToySystem {
    Cos,
    RankOne,
    SourceOnly,
}

impl std::str::FromStr for ToySystem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cos" | "cos-kernel" => Ok(Self::Cos),
            "rank-one" => Ok(Self::RankOne),
            "source-only" => Ok(Self::SourceOnly),
            other => Err(Error::InvalidArgument(format!("unknown toy system `{other}`"))),
        }
    }
}

/// A toy system with its Lipschitz initial datum.
pub struct ToyCase {
    pub system: Arc<LipschitzKernelSystem>,
    pub y0: Arc<dyn Field>,
    pub lip_y0: f64,
    pub sup_y0: f64,
    /// Closed form when one is known; otherwise a fine grid is used.
    pub exact: Option<Arc<dyn ReferenceSolution>>,
}

impl ToySystem {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Cos => "cos-kernel",
            Self::RankOne => "rank-one",
            Self::SourceOnly => "source-only",
        }
    }

    pub fn case(&self) -> ToyCase {
        match self {
            Self::Cos => {
                let y0 = FourierField::sine(1.0, 1, 0.0, 0.0);
                ToyCase {
                    system: Arc::new(cos_kernel_system()),
                    lip_y0: y0.lipschitz_bound(),
                    sup_y0: 1.0,
                    y0: Arc::new(y0),
                    exact: None,
                }
            }
            Self::RankOne => {
                let tent = TentField { center: 0.5, height: 1.0, base: 0.0 };
                let y0: Arc<dyn Field> = Arc::new(tent);
                ToyCase {
                    system: Arc::new(rank_one_system(1.0)),
                    lip_y0: tent.lipschitz(),
                    sup_y0: tent.sup(),
                    exact: Some(Arc::new(rank_one_closed_form(y0.clone(), vec![tent.mean()], 1.0))),
                    y0,
                }
            }
            Self::SourceOnly => {
                let tent = TentField { center: 0.25, height: 1.0, base: -0.5 };
                let source = source_only_system(vec![1.0]);
                ToyCase {
                    system: Arc::new(source),
                    lip_y0: tent.lipschitz(),
                    sup_y0: tent.sup(),
                    y0: Arc::new(tent),
                    exact: Some(Arc::new(AffineReference { y0: Arc::new(tent), rate: vec![1.0] })),
                }
            }
        }
    }
}

/// `y0(x) + t f` for a constant source and zero kernel.
struct AffineReference {
    y0: Arc<dyn Field>,
    rate: Vec<f64>,
}

impl ReferenceSolution for AffineReference {
    fn dim(&self) -> usize {
        self.rate.len()
    }

    fn evaluate_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.y0.eval_into(x, out);
        out.iter_mut().zip(&self.rate).for_each(|(o, r)| *o += t * r);
        Ok(())
    }

    fn valid_until(&self) -> f64 {
        f64::INFINITY
    }

    fn provenance(&self) -> crate::reference::Provenance {
        crate::reference::Provenance::ExactFormula
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyOptions {
    pub r: f64,
    pub dt: Option<f64>,
    /// Fine-grid size when no closed form is supplied; at least `8 max N`.
    pub reference_grid: Option<usize>,
    pub n0: usize,
    pub tag_rule: TagRule,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self { r: 2.0, dt: Some(0.01), reference_grid: None, n0: 16, tag_rule: TagRule::Midpoint }
    }
}

/// Error table of `y^N` against the limit equation over an `N` sweep, with
/// the explicit bound attached to every row.
#[allow(clippy::too_many_arguments)]
pub fn run_graph_limit_study(
    system: Arc<LipschitzKernelSystem>,
    domain: &Domain,
    y0: Arc<dyn Field>,
    lip_y0: f64,
    sup_y0: f64,
    sweep: &[usize],
    sample_times: &[f64],
    options: &StudyOptions,
    exact: Option<&dyn ReferenceSolution>,
) -> Result<GraphLimitReport> {
    let largest = sweep.iter().copied().max().ok_or_else(|| Error::InvalidArgument("empty N sweep".into()))?;
    let t_final = sample_times.iter().copied().fold(0.0, f64::max);
    let fine;
    let reference: &dyn ReferenceSolution = match exact {
        Some(r) => r,
        None => {
            let grid = options.reference_grid.unwrap_or(4096.max(8 * largest));
            if grid < 8 * largest {
                return Err(Error::InvalidArgument(format!("reference grid {grid} is below 8 N = {}", 8 * largest)));
            }
            let mut fine_options = FineGridOptions::new(grid, t_final).with_samples(sample_times.to_vec());
            fine_options.dt = options.dt;
            fine = fine_grid_lipschitz(system.clone(), domain, y0.as_ref(), &fine_options)?;
            &fine
        }
    };
    let setup = GraphLimitSetup {
        system,
        domain: domain.clone(),
        y0,
        lip_y0,
        sup_y0,
        r: options.r,
        sweep: sweep.to_vec(),
        sample_times: sample_times.to_vec(),
        dt: options.dt,
        reference,
        n0: options.n0,
        tag_rule: options.tag_rule,
    };
    verify_graph_limit_bound(&setup)
}

/// Study of a shipped toy system on the circle.
pub fn run_toy_study(toy: ToySystem, sweep: &[usize], sample_times: &[f64], options: &StudyOptions) -> Result<GraphLimitReport> {
    let case = toy.case();
    run_graph_limit_study(
        case.system,
        &Domain::circle(),
        case.y0,
        case.lip_y0,
        case.sup_y0,
        sweep,
        sample_times,
        options,
        case.exact.as_deref(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::TaggedPartition;
    use crate::particle::{integrate, sample_initial, IntegrateOptions, LipschitzParticleSystem, ParticleState, ParticleSystem};

    fn circle(n: usize) -> Arc<TaggedPartition> {
        Arc::new(TaggedPartition::uniform(Domain::circle(), n, TagRule::Midpoint).unwrap())
    }

    #[test]
    fn two_particle_consensus_gap_decays() {
        let system = LipschitzParticleSystem::new(Arc::new(hk_system(|_, _| 1.0, 1.0, 0.0, true)), circle(2));
        let initial = ParticleState::new(0.0, system.partition().clone(), 1, vec![0.0, 1.0]).unwrap();
        let traj = integrate(&system, &initial, &IntegrateOptions::new(1.0).with_dt(0.01)).unwrap();
        let xi = traj.snapshots[0].xi();
        assert!(((xi[1] - xi[0]) - (-1.0f64).exp()).abs() < 1e-9);
        assert!((xi[0] + xi[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn consensus_variance_is_nonincreasing() {
        let system = LipschitzParticleSystem::new(
            Arc::new(hk_system(|x, y| 1.0 + 0.5 * (2.0 * PI * (x[0] - y[0])).cos(), 1.5, PI, true)),
            circle(64),
        );
        let initial = sample_initial(system.partition(), &FourierField::scalar_1d(0.0, &[(1.0, 1, 0.0), (0.4, 3, 1.0)]));
        let times: Vec<f64> = (1..=20).map(|k| k as f64 * 0.1).collect();
        let traj = integrate(&system, &initial, &IntegrateOptions::new(2.0).with_dt(0.01).with_samples(times)).unwrap();
        let variance = |xi: &[f64]| {
            let mean = xi.iter().sum::<f64>() / xi.len() as f64;
            xi.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        };
        let mut last = variance(initial.xi());
        for s in &traj.snapshots {
            let v = variance(s.xi());
            assert!(v <= last + 1e-14);
            last = v;
        }
    }

    #[test]
    fn zero_kernel_freezes_state() {
        let system = LipschitzParticleSystem::new(Arc::new(hk_system(|_, _| 0.0, 0.0, 0.0, true)), circle(8));
        let initial = sample_initial(system.partition(), &FourierField::sine(1.0, 1, 0.0, 0.0));
        let traj = integrate(&system, &initial, &IntegrateOptions::new(1.0).with_dt(0.1)).unwrap();
        assert_eq!(traj.snapshots[0].xi(), initial.xi());
    }

    #[test]
    fn pure_rank_one_matches_closed_form() {
        let case = ToySystem::RankOne.case();
        let partition = circle(32);
        let system = LipschitzParticleSystem::new(case.system.clone(), partition.clone());
        let initial = sample_initial(&partition, case.y0.as_ref());
        let traj = integrate(&system, &initial, &IntegrateOptions::new(1.0).with_dt(0.01)).unwrap();
        let mean = initial.xi().iter().sum::<f64>() / 32.0;
        for (i, v) in traj.snapshots[0].xi().iter().enumerate() {
            let expected = initial.xi()[i] + (1f64.exp() - 1.0) * mean;
            assert!((v - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn cos_fine_grid_matches_half_rate_growth() {
        // The cos kernel maps sin(2 pi x) to sin(2 pi x) / 2.
        let case = ToySystem::Cos.case();
        let options = FineGridOptions::new(1024, 1.0).with_dt(0.01);
        let fine = fine_grid_lipschitz(case.system, &Domain::circle(), case.y0.as_ref(), &options).unwrap();
        for x in [0.1, 0.3, 0.8] {
            let expected = 0.5f64.exp() * (2.0 * PI * x).sin();
            assert!((fine.evaluate(1.0, &[x]).unwrap()[0] - expected).abs() < 2e-5);
        }
    }

    #[test]
    fn study_rows_and_bounds() {
        let report = run_toy_study(ToySystem::RankOne, &[16, 32, 64], &[0.0, 0.5, 1.0], &StudyOptions::default()).unwrap();
        assert_eq!(report.records.len(), 9);
        assert!(report.violations.is_empty());
        for r in report.records.iter().filter(|r| r.t == 0.0) {
            // Initial sampling of the tent: half a cell times the slope.
            assert!(r.err_linf <= 2.0 / (2.0 * r.particles as f64) + 1e-9);
        }
        let source = run_toy_study(ToySystem::SourceOnly, &[16, 32, 64], &[0.5], &StudyOptions::default()).unwrap();
        for r in &source.records {
            assert!(r.err_linf <= 1.0 * 2.0 / r.particles as f64);
        }
    }
}
