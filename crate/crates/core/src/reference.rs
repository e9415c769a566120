//! Ground-truth solutions: closed forms, characteristics, and fine-grid
//! method-of-lines runs of the mollified and kernel equations.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{Field, FourierField};
use crate::geometry::{wrap_centered, Domain, TagRule, TaggedPartition};
use crate::pde_model::PdeModel;
use crate::mollifier::Mollifier;
use crate::particle::{
    integrate, reconstruct, sample_initial, IntegrateOptions, KernelStrategy, KernelUpdate, LipschitzKernelSystem,
    LipschitzParticleSystem, MollifiedSystem, ParticleSystem, PiecewiseField,
};
use crate::quadrature::QuadratureGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    ExactFormula,
    Characteristics,
    FineGrid,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ExactFormula => "exact-formula",
            Self::Characteristics => "characteristics",
            Self::FineGrid => "fine-grid",
        })
    }
}

pub trait ReferenceSolution: Send + Sync {
    fn dim(&self) -> usize;

    fn evaluate_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// Horizon beyond which `evaluate` refuses.
    fn valid_until(&self) -> f64;

    fn provenance(&self) -> Provenance;

    /// Fails when `t` is outside what the solution can answer.
    fn check_time(&self, t: f64) -> Result<()> {
        if t > self.valid_until() {
            return Err(Error::BeyondShock { t, valid_until: self.valid_until() });
        }
        Ok(())
    }

    fn evaluate(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.evaluate_into(t, x, &mut out)?;
        Ok(out)
    }
}

/// A reference frozen at one time, usable wherever a [`Field`] is.
pub struct Snapshot<'a> {
    reference: &'a dyn ReferenceSolution,
    t: f64,
}

/// Validates `t` once so that pointwise evaluation cannot fail afterwards.
pub fn snapshot(reference: &dyn ReferenceSolution, t: f64) -> Result<Snapshot<'_>> {
    reference.check_time(t)?;
    Ok(Snapshot { reference, t })
}

impl Field for Snapshot<'_> {
    fn dim(&self) -> usize {
        self.reference.dim()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        if self.reference.evaluate_into(self.t, x, out).is_err() {
            out.fill(f64::NAN);
        }
    }
}

/// `y(t, x) = y0((x - t) mod 1)` on the circle.
pub struct ExactTransport {
    y0: Arc<dyn Field>,
}

pub fn exact_transport(y0: Arc<dyn Field>) -> ExactTransport {
    ExactTransport { y0 }
}

impl ReferenceSolution for ExactTransport {
    fn dim(&self) -> usize {
        self.y0.dim()
    }

    fn evaluate_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let shifted = (x[0] - t).rem_euclid(1.0);
        self.y0.eval_into(&[shifted], out);
        Ok(())
    }

    fn valid_until(&self) -> f64 {
        f64::INFINITY
    }

    fn provenance(&self) -> Provenance {
        Provenance::ExactFormula
    }
}

/// Smooth inviscid Burgers solution `y = y0(xi)` with `x = xi + t y0(xi)`.
pub struct BurgersCharacteristics {
    y0: Arc<dyn Field>,
    sup: f64,
    valid_until: f64,
}

pub fn burgers_characteristics(y0: Arc<dyn Field>, y0_prime: Arc<dyn Field>) -> Result<BurgersCharacteristics> {
    if y0.dim() != 1 || y0_prime.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: y0.dim().max(y0_prime.dim()) });
    }
    let samples = 8192;
    let grid: Vec<f64> = (0..samples).map(|k| k as f64 / samples as f64).collect();
    let sup = grid.iter().map(|&x| y0.eval_scalar(&[x]).abs()).fold(0.0, f64::max);
    let (best, _) = grid
        .iter()
        .map(|&x| (x, y0_prime.eval_scalar(&[x])))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let slope = golden_section_min(|x| y0_prime.eval_scalar(&[x]), best - 1.0 / samples as f64, best + 1.0 / samples as f64);
    let valid_until = if slope < 0.0 { -1.0 / slope } else { f64::INFINITY };
    Ok(BurgersCharacteristics { y0, sup, valid_until })
}

fn golden_section_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - ratio * (hi - lo);
    let mut b = lo + ratio * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..100 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - ratio * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + ratio * (hi - lo);
            fb = f(b);
        }
    }
    fa.min(fb)
}

impl BurgersCharacteristics {
    /// Foot of the characteristic through `(t, x)`.
    pub fn foot(&self, t: f64, x: f64) -> Result<f64> {
        let residual = |xi: f64| xi + t * self.y0.eval_scalar(&[xi.rem_euclid(1.0)]) - x;
        let reach = t * self.sup * 1.01 + 1e-12;
        let (mut lo, mut hi) = (x - reach, x + reach);
        if residual(lo) > 0.0 || residual(hi) < 0.0 {
            return Err(Error::BisectionFailure { x });
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid == lo || mid == hi {
                break;
            }
            if residual(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

impl ReferenceSolution for BurgersCharacteristics {
    fn dim(&self) -> usize {
        1
    }

    fn evaluate_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_time(t)?;
        let foot = self.foot(t, x[0])?;
        out[0] = self.y0.eval_scalar(&[foot.rem_euclid(1.0)]);
        Ok(())
    }

    fn valid_until(&self) -> f64 {
        self.valid_until
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t >= self.valid_until {
            return Err(Error::BeyondShock { t, valid_until: self.valid_until });
        }
        Ok(())
    }

    fn provenance(&self) -> Provenance {
        Provenance::Characteristics
    }
}

pub const SOLITON_TAIL_LIMIT: f64 = 1e-10;

/// `(v/2) sech^2(sqrt(v) (x - x0 - v t) / 2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdvSoliton {
    speed: f64,
    center: f64,
    periodic: bool,
}

/// Soliton on the circle; refused when its value at the seam opposite the
/// crest exceeds [`SOLITON_TAIL_LIMIT`].
pub fn kdv_soliton(speed: f64, center: f64) -> Result<KdvSoliton> {
    if !(speed > 0.0) {
        return Err(Error::InvalidArgument(format!("soliton speed {speed} must be positive")));
    }
    let tail = 0.5 * speed * sech(0.25 * speed.sqrt()).powi(2);
    if tail >= SOLITON_TAIL_LIMIT {
        return Err(Error::TailTooFat { tail, limit: SOLITON_TAIL_LIMIT });
    }
    Ok(KdvSoliton { speed, center, periodic: true })
}

impl KdvSoliton {
    /// The same profile on the real line, with no seam condition.
    pub fn on_line(speed: f64, center: f64) -> Self {
        Self { speed, center, periodic: false }
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        let mut s = x - self.center - self.speed * t;
        if self.periodic {
            s = wrap_centered(s);
        }
        0.5 * self.speed * sech(0.5 * self.speed.sqrt() * s).powi(2)
    }
}

fn sech(x: f64) -> f64 {
    1.0 / x.cosh()
}

impl ReferenceSolution for KdvSoliton {
    fn dim(&self) -> usize {
        1
    }

    fn evaluate_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        out[0] = self.value(t, x[0]);
        Ok(())
    }

    fn valid_until(&self) -> f64 {
        f64::INFINITY
    }

    fn provenance(&self) -> Provenance {
        Provenance::ExactFormula
    }
}

/// Single Fourier mode under a scalar constant-coefficient linear model on
/// the circle: `a sin(theta)` evolves to `a e^{Re s t} sin(theta + Im s t)`
/// with `s` the symbol of the operator at the mode's frequency.
pub struct LinearMode {
    amplitude: f64,
    frequency: i32,
    phase: f64,
    growth: f64,
    drift: f64,
}

pub fn exact_linear_mode(model: &PdeModel, amplitude: f64, frequency: i32, phase: f64) -> Result<LinearMode> {
    if model.state_dim() != 1 || model.domain().dim() != 1 || !model.domain().is_periodic() {
        return Err(Error::Unsupported("single-mode solutions need a scalar model on the circle".into()));
    }
    if !model.source().is_zero() {
        return Err(Error::Unsupported("single-mode solutions need a zero source".into()));
    }
    let omega = 2.0 * std::f64::consts::PI * frequency as f64;
    let (mut growth, mut drift) = (0.0, 0.0);
    for c in model.coefficients() {
        let a = c.constant_matrix().ok_or(Error::NotConstantCoefficient)?[0];
        let k = c.order() as i32;
        // (i omega)^k = omega^k e^{i k pi / 2}
        let magnitude = a * omega.powi(k);
        match k.rem_euclid(4) {
            0 => growth += magnitude,
            1 => drift += magnitude,
            2 => growth -= magnitude,
            _ => drift -= magnitude,
        }
    }
    Ok(LinearMode { amplitude, frequency, phase, growth, drift })
}

impl ReferenceSolution for LinearMode {
    fn dim(&self) -> usize {
        1
    }

    fn evaluate_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let theta = 2.0 * std::f64::consts::PI * self.frequency as f64 * x[0] + self.phase + self.drift * t;
        out[0] = self.amplitude * (self.growth * t).exp() * theta.sin();
        Ok(())
    }

    fn valid_until(&self) -> f64 {
        f64::INFINITY
    }

    fn provenance(&self) -> Provenance {
        Provenance::ExactFormula
    }
}

/// Fine-grid run parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FineGridOptions {
    pub grid: usize,
    pub t_final: f64,
    pub sample_times: Vec<f64>,
    pub dt: Option<f64>,
    /// Quadrature nodes for non-profile kernels; default `4 * grid`.
    pub quadrature_nodes: Option<usize>,
}

impl FineGridOptions {
    pub fn new(grid: usize, t_final: f64) -> Self {
        Self { grid, t_final, sample_times: vec![t_final], dt: None, quadrature_nodes: None }
    }

    pub fn with_samples(mut self, times: Vec<f64>) -> Self {
        self.sample_times = times;
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = Some(dt);
        self
    }
}

/// Method-of-lines solution stored at its sample times.  In one dimension it
/// is read back by linear interpolation between grid points, otherwise by
/// cell lookup.
pub struct FineGridSolution {
    snapshots: Vec<(f64, PiecewiseField)>,
    t_final: f64,
    dt: f64,
}

impl FineGridSolution {
    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        self.snapshots.iter().map(|s| s.0)
    }

    pub fn field_at(&self, t: f64) -> Result<&PiecewiseField> {
        self.snapshots
            .iter()
            .find(|(s, _)| (s - t).abs() <= 1e-9 * (1.0 + t.abs()))
            .map(|(_, f)| f)
            .ok_or(Error::MissingSnapshot { t })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

fn interpolate_1d(field: &PiecewiseField, x: f64, out: &mut [f64]) {
    let partition = field.partition();
    let domain = partition.domain();
    let m = partition.len();
    let length = domain.lengths()[0];
    let s = x / length * m as f64 - 0.5;
    let base = s.floor();
    let w = s - base;
    let base = base as i64;
    let (lo, hi) = if domain.is_periodic() {
        ((base.rem_euclid(m as i64)) as usize, ((base + 1).rem_euclid(m as i64)) as usize)
    } else {
        let clamp = |k: i64| k.clamp(0, m as i64 - 1) as usize;
        (clamp(base), clamp(base + 1))
    };
    let (a, b) = (field.value(lo), field.value(hi));
    for (o, (p, q)) in out.iter_mut().zip(a.iter().zip(b)) {
        *o = (1.0 - w) * p + w * q;
    }
}

impl ReferenceSolution for FineGridSolution {
    fn dim(&self) -> usize {
        self.snapshots[0].1.dim()
    }

    fn evaluate_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let field = self.field_at(t)?;
        let uniform_midpoint = field.partition().tag_rule() == TagRule::Midpoint;
        if x.len() == 1 && uniform_midpoint {
            interpolate_1d(field, x[0], out);
        } else {
            field.eval_into(x, out);
        }
        Ok(())
    }

    fn valid_until(&self) -> f64 {
        self.t_final
    }

    fn check_time(&self, t: f64) -> Result<()> {
        self.field_at(t).map(|_| ())
    }

    fn provenance(&self) -> Provenance {
        Provenance::FineGrid
    }
}

fn run_fine<S: ParticleSystem>(system: &S, y0: &dyn Field, options: &FineGridOptions) -> Result<FineGridSolution> {
    let initial = sample_initial(system.partition(), y0);
    let mut integration = IntegrateOptions::new(options.t_final).with_samples(options.sample_times.clone());
    integration.dt = options.dt;
    let trajectory = integrate(system, &initial, &integration)?;
    let snapshots = trajectory.snapshots.iter().map(|s| (s.t, reconstruct(s))).collect();
    Ok(FineGridSolution { snapshots, t_final: options.t_final, dt: trajectory.dt })
}

fn fine_partition(domain: &Domain, grid: usize) -> Result<Arc<TaggedPartition>> {
    Ok(Arc::new(TaggedPartition::uniform(domain.clone(), grid, TagRule::Midpoint)?))
}

/// `y_eps`, the solution of the mollified equation, via `grid` particles.
pub fn fine_grid_mollified(
    model: Arc<PdeModel>,
    mollifier: Arc<Mollifier>,
    y0: &dyn Field,
    options: &FineGridOptions,
) -> Result<FineGridSolution> {
    let partition = fine_partition(model.domain(), options.grid)?;
    let nodes = options.quadrature_nodes.unwrap_or(4 * options.grid);
    let quad = Arc::new(QuadratureGrid::new(model.domain().clone(), nodes)?);
    let system = MollifiedSystem::new(model, mollifier, partition, quad, KernelUpdate::PerStage, KernelStrategy::Auto)?;
    run_fine(&system, y0, options)
}

/// Ground truth for the kernel equation with a directly given kernel.
pub fn fine_grid_lipschitz(
    system: Arc<LipschitzKernelSystem>,
    domain: &Domain,
    y0: &dyn Field,
    options: &FineGridOptions,
) -> Result<FineGridSolution> {
    let partition = fine_partition(domain, options.grid)?;
    run_fine(&LipschitzParticleSystem::new(system, partition), y0, options)
}

/// `y0 + (e^{s t} - 1) mean(y0)`, the solution for the constant kernel
/// `sigma = s` without centering or source.
pub struct RankOneSolution {
    y0: Arc<dyn Field>,
    mean: Vec<f64>,
    strength: f64,
}

pub fn rank_one_closed_form(y0: Arc<dyn Field>, mean: Vec<f64>, strength: f64) -> RankOneSolution {
    RankOneSolution { y0, mean, strength }
}

impl ReferenceSolution for RankOneSolution {
    fn dim(&self) -> usize {
        self.y0.dim()
    }

    fn evaluate_into(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.y0.eval_into(x, out);
        let factor = (self.strength * t).exp_m1();
        out.iter_mut().zip(&self.mean).for_each(|(o, m)| *o += factor * m);
        Ok(())
    }

    fn valid_until(&self) -> f64 {
        f64::INFINITY
    }

    fn provenance(&self) -> Provenance {
        Provenance::ExactFormula
    }
}

/// Convenience for pairing Burgers with a Fourier datum.
pub fn burgers_from_fourier(y0: &FourierField) -> Result<BurgersCharacteristics> {
    let prime = y0.derivative(&[1])?;
    burgers_characteristics(Arc::new(y0.clone()), Arc::new(prime))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ConstantField;

    #[test]
    fn transport_examples() {
        let r = exact_transport(Arc::new(FourierField::sine(1.0, 1, 0.0, 0.0)));
        assert!(r.evaluate(0.25, &[0.25]).unwrap()[0].abs() < 1e-15);
        for x in [0.1, 0.37, 0.9] {
            let y0 = (2.0 * std::f64::consts::PI * x).sin();
            assert!((r.evaluate(1.0, &[x]).unwrap()[0] - y0).abs() < 1e-12);
            assert!((r.evaluate(0.0, &[x]).unwrap()[0] - y0).abs() < 1e-15);
        }
    }

    #[test]
    fn burgers_constant_and_initial() {
        let c = burgers_characteristics(Arc::new(ConstantField(vec![0.7])), Arc::new(ConstantField(vec![0.0]))).unwrap();
        assert_eq!(c.valid_until(), f64::INFINITY);
        assert!((c.evaluate(3.0, &[0.4]).unwrap()[0] - 0.7).abs() < 1e-15);
        let y0 = FourierField::sine(0.2, 1, 0.0, 0.0);
        let b = burgers_from_fourier(&y0).unwrap();
        assert!((b.evaluate(0.0, &[0.3]).unwrap()[0] - y0.eval_scalar(&[0.3])).abs() < 1e-14);
    }

    #[test]
    fn burgers_shock_time_and_residual() {
        let y0 = FourierField::sine(0.2, 1, 0.0, 0.0);
        let b = burgers_from_fourier(&y0).unwrap();
        let shock = 1.0 / (0.4 * std::f64::consts::PI);
        assert!((b.valid_until() - shock).abs() < 1e-9);
        let t = 0.3;
        for k in 0..100 {
            let x = (k as f64 + 0.5) / 100.0;
            let y = b.evaluate(t, &[x]).unwrap()[0];
            let residual = y - y0.eval_scalar(&[(x - t * y).rem_euclid(1.0)]);
            assert!(residual.abs() <= 1e-10, "x {x} residual {residual}");
        }
        assert!(matches!(b.evaluate(0.8, &[0.5]), Err(Error::BeyondShock { .. })));
    }

    #[test]
    fn soliton_examples() {
        let s = kdv_soliton(5000.0, 0.3).unwrap();
        assert!((s.evaluate(0.0, &[0.3]).unwrap()[0] - 2500.0).abs() < 1e-9);
        let x = 0.42;
        let moved = s.evaluate(1e-4, &[x]).unwrap()[0];
        let back = s.evaluate(0.0, &[(x - 5000.0 * 1e-4).rem_euclid(1.0)]).unwrap()[0];
        assert!((moved - back).abs() < 1e-9 * 2500.0);
        assert!(matches!(kdv_soliton(16.0, 0.5), Err(Error::TailTooFat { .. })));
    }

    #[test]
    fn soliton_satisfies_kdv_on_the_line() {
        // Sixth-order central differences, h = 5e-3 in x and h / v in t.
        let s = KdvSoliton::on_line(16.0, 0.0);
        let h = 5e-3;
        let d1 = |f: &dyn Fn(f64) -> f64, x: f64, h: f64| {
            (-f(x - 3.0 * h) + 9.0 * f(x - 2.0 * h) - 45.0 * f(x - h) + 45.0 * f(x + h) - 9.0 * f(x + 2.0 * h)
                + f(x + 3.0 * h))
                / (60.0 * h)
        };
        let d3 = |f: &dyn Fn(f64) -> f64, x: f64| {
            (-7.0 * f(x - 4.0 * h) + 72.0 * f(x - 3.0 * h) - 338.0 * f(x - 2.0 * h) + 488.0 * f(x - h)
                - 488.0 * f(x + h)
                + 338.0 * f(x + 2.0 * h)
                - 72.0 * f(x + 3.0 * h)
                + 7.0 * f(x + 4.0 * h))
                / (240.0 * h.powi(3))
        };
        let t = 0.01;
        let mut worst: f64 = 0.0;
        for k in 0..200 {
            let x = -1.0 + k as f64 * 0.01 + 0.16;
            let space = |z: f64| s.value(t, z);
            let time = |tau: f64| s.value(tau, x);
            let residual = d1(&time, t, h / s.speed()) + d3(&space, x) + 6.0 * s.value(t, x) * d1(&space, x, h);
            worst = worst.max(residual.abs());
        }
        assert!(worst <= 1e-6, "residual {worst}");
    }

    #[test]
    fn linear_mode_matches_transport_and_airy() {
        let transport = exact_linear_mode(&PdeModel::transport(), 1.0, 1, 0.0).unwrap();
        let exact = exact_transport(Arc::new(FourierField::sine(1.0, 1, 0.0, 0.0)));
        for x in [0.1, 0.6] {
            let a = transport.evaluate(0.3, &[x]).unwrap()[0];
            let b = exact.evaluate(0.3, &[x]).unwrap()[0];
            assert!((a - b).abs() < 1e-12);
        }
        let heat = exact_linear_mode(&PdeModel::heat(), 1.0, 1, 0.0).unwrap();
        let decay = (-(2.0 * std::f64::consts::PI).powi(2) * 0.01).exp();
        assert!((heat.evaluate(0.01, &[0.25]).unwrap()[0] - decay).abs() < 1e-12);
    }

    #[test]
    fn fine_grid_zero_kernel_is_affine() {
        let system = Arc::new(
            LipschitzKernelSystem::stationary("zero", 1, |_, _, out| out[0] = 0.0, 0.0, 0.0)
                .with_source(crate::pde_model::SourceField::constant(vec![2.0])),
        );
        let y0 = FourierField::sine(1.0, 1, 0.0, 0.0);
        let options = FineGridOptions::new(256, 0.5).with_samples(vec![0.25, 0.5]).with_dt(0.05);
        let fine = fine_grid_lipschitz(system, &Domain::circle(), &y0, &options).unwrap();
        let slot = fine.field_at(0.25).unwrap();
        let tag = slot.partition().tag(7).to_vec();
        assert!((slot.value(7)[0] - (y0.eval_scalar(&tag) + 0.5)).abs() < 1e-14);
        assert!(matches!(fine.evaluate(0.1, &[0.2]), Err(Error::MissingSnapshot { .. })));
    }

    #[test]
    fn cos_kernel_keeps_constants() {
        let system = Arc::new(LipschitzKernelSystem::stationary(
            "cos",
            1,
            |x, y, out| out[0] = (2.0 * std::f64::consts::PI * (x[0] - y[0])).cos(),
            1.0,
            2.0 * std::f64::consts::PI,
        ));
        let options = FineGridOptions::new(512, 1.0).with_dt(0.01);
        let fine = fine_grid_lipschitz(system, &Domain::circle(), &ConstantField(vec![1.0]), &options).unwrap();
        let field = fine.field_at(1.0).unwrap();
        assert!(field.values().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn rank_one_fine_grid_matches_closed_form() {
        let s0 = 1.0;
        let system = Arc::new(LipschitzKernelSystem::stationary("rank-one", 1, move |_, _, out| out[0] = s0, s0, 0.0));
        let y0 = FourierField::scalar_1d(0.5, &[(1.0, 1, 0.0)]);
        let options = FineGridOptions::new(512, 1.0).with_dt(0.01);
        let fine = fine_grid_lipschitz(system, &Domain::circle(), &y0, &options).unwrap();
        let exact = rank_one_closed_form(Arc::new(y0), vec![0.5], s0);
        for x in [0.1, 0.5, 0.77] {
            let a = fine.evaluate(1.0, &[x]).unwrap()[0];
            let b = exact.evaluate(1.0, &[x]).unwrap()[0];
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}
