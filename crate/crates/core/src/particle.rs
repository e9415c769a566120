//! Finite particle systems on tagged partitions, their time integration and
//! piecewise-constant reconstruction.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::{Domain, TaggedPartition};
use crate::kernel::{
    apply_discrete_operator_into, assemble_fast_constant, assemble_kernel, coefficient_samples, ConvolutionProfile,
    FactoredOperator, KernelMatrix,
};
use crate::pde_model::{PdeModel, SourceField};
use crate::mollifier::Mollifier;
use crate::quadrature::QuadratureGrid;

/// `y^N(x) = sum_i xi_i 1_{Omega_i}(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseField {
    partition: Arc<TaggedPartition>,
    dim: usize,
    values: Vec<f64>,
}

impl PiecewiseField {
    pub fn new(partition: Arc<TaggedPartition>, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != partition.len() * dim {
            return Err(Error::DimensionMismatch { expected: partition.len() * dim, got: values.len() });
        }
        Ok(Self { partition, dim, values })
    }

    pub fn zeros(partition: Arc<TaggedPartition>, dim: usize) -> Self {
        let values = vec![0.0; partition.len() * dim];
        Self { partition, dim, values }
    }

    /// Samples `field` at every tag.
    pub fn sample(partition: Arc<TaggedPartition>, field: &dyn Field) -> Self {
        let dim = field.dim();
        let mut values = vec![0.0; partition.len() * dim];
        for (tag, slot) in partition.tags().zip(values.chunks_exact_mut(dim)) {
            field.eval_into(tag, slot);
        }
        Self { partition, dim, values }
    }

    pub fn partition(&self) -> &Arc<TaggedPartition> {
        &self.partition
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// `max_i |xi_i|`, which is the sup norm of the reconstruction.
    pub fn sup_norm(&self) -> f64 {
        self.values.chunks_exact(self.dim).map(euclid).fold(0.0, f64::max)
    }

    /// Exact `L^2` norm of the reconstruction.
    pub fn l2_norm(&self) -> f64 {
        let total: f64 = self.values.iter().map(|v| v * v).sum();
        (total * self.partition.cell_measure()).sqrt()
    }
}

fn euclid(v: &[f64]) -> f64 {
    if v.len() == 1 {
        v[0].abs()
    } else {
        v.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

impl Field for PiecewiseField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let cell = if x.len() == 1 { self.partition.cell_of_1d(x[0]) } else { self.partition.cell_of(x) };
        out.copy_from_slice(self.value(cell));
    }
}

/// Particle values `xi_i(t)` on a partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub t: f64,
    partition: Arc<TaggedPartition>,
    dim: usize,
    xi: Vec<f64>,
}

impl ParticleState {
    pub fn new(t: f64, partition: Arc<TaggedPartition>, dim: usize, xi: Vec<f64>) -> Result<Self> {
        if xi.len() != partition.len() * dim {
            return Err(Error::DimensionMismatch { expected: partition.len() * dim, got: xi.len() });
        }
        Ok(Self { t, partition, dim, xi })
    }

    pub fn partition(&self) -> &Arc<TaggedPartition> {
        &self.partition
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn xi(&self) -> &[f64] {
        &self.xi
    }

    pub fn max_abs(&self) -> f64 {
        self.xi.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `xi_i(0) = y0(x_i)`.
pub fn sample_initial(partition: &Arc<TaggedPartition>, y0: &dyn Field) -> ParticleState {
    let field = PiecewiseField::sample(partition.clone(), y0);
    ParticleState { t: 0.0, partition: partition.clone(), dim: field.dim, xi: field.values }
}

pub fn reconstruct(state: &ParticleState) -> PiecewiseField {
    PiecewiseField { partition: state.partition.clone(), dim: state.dim, values: state.xi.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelUpdate {
    #[default]
    PerStage,
    PerStep,
}

impl std::str::FromStr for KernelUpdate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_stage" => Ok(Self::PerStage),
            "per_step" => Ok(Self::PerStep),
            other => Err(Error::InvalidArgument(format!("unknown kernel update `{other}`"))),
        }
    }
}

/// `d xi / dt = F(t, xi)` split into a frozen operator and its application,
/// so the operator can be reused across Runge-Kutta stages.
pub trait ParticleSystem: Sync {
    type Operator: Send + Sync;

    fn partition(&self) -> &Arc<TaggedPartition>;

    fn state_dim(&self) -> usize;

    /// Assembles whatever depends on the current state.
    fn freeze(&self, t: f64, xi: &[f64]) -> Result<Self::Operator>;

    /// Writes the right-hand side at `(t, xi)` using a frozen operator.
    fn apply(&self, op: &Self::Operator, t: f64, xi: &[f64], out: &mut [f64]) -> Result<()>;

    /// Sup norm of the interaction kernel behind `op`, for step control.
    fn kernel_sup(&self, op: &Self::Operator) -> f64;

    fn kernel_update(&self) -> KernelUpdate {
        KernelUpdate::PerStage
    }
}

pub fn rhs<S: ParticleSystem>(system: &S, state: &ParticleState) -> Result<Vec<f64>> {
    let op = system.freeze(state.t, &state.xi)?;
    let mut out = vec![0.0; state.xi.len()];
    system.apply(&op, state.t, &state.xi, &mut out)?;
    Ok(out)
}

pub const DEFAULT_BLOWUP_GUARD: f64 = 1e6;

/// One classical Runge-Kutta step.
pub fn step_rk4<S: ParticleSystem>(system: &S, state: &ParticleState, dt: f64, guard: f64) -> Result<ParticleState> {
    if dt < 0.0 || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("time step {dt} must be nonnegative")));
    }
    if dt == 0.0 {
        return Ok(state.clone());
    }
    let t = state.t;
    let y = &state.xi;
    let len = y.len();
    let per_step = system.kernel_update() == KernelUpdate::PerStep;
    let first = system.freeze(t, y)?;
    let stage = |op: Option<&S::Operator>, time: f64, values: &[f64], out: &mut [f64]| -> Result<()> {
        match op {
            Some(op) => system.apply(op, time, values, out),
            None => {
                let fresh = system.freeze(time, values)?;
                system.apply(&fresh, time, values, out)
            }
        }
    };
    let reuse = if per_step { Some(&first) } else { None };
    let mut k1 = vec![0.0; len];
    system.apply(&first, t, y, &mut k1)?;
    let mut tmp: Vec<f64> = y.iter().zip(&k1).map(|(a, k)| a + 0.5 * dt * k).collect();
    let mut k2 = vec![0.0; len];
    stage(reuse, t + 0.5 * dt, &tmp, &mut k2)?;
    tmp.iter_mut().zip(y.iter().zip(&k2)).for_each(|(s, (a, k))| *s = a + 0.5 * dt * k);
    let mut k3 = vec![0.0; len];
    stage(reuse, t + 0.5 * dt, &tmp, &mut k3)?;
    tmp.iter_mut().zip(y.iter().zip(&k3)).for_each(|(s, (a, k))| *s = a + dt * k);
    let mut k4 = vec![0.0; len];
    stage(reuse, t + dt, &tmp, &mut k4)?;
    let next: Vec<f64> = (0..len).map(|i| y[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect();
    let magnitude = next.iter().fold(0.0f64, |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY });
    if magnitude > guard {
        return Err(Error::BlowUp { t: t + dt, magnitude });
    }
    Ok(ParticleState { t: t + dt, partition: state.partition.clone(), dim: state.dim, xi: next })
}

/// Advances the piecewise field form `y^N` by one step; identical
/// arithmetic to stepping the particle values and reconstructing.
pub fn step_field<S: ParticleSystem>(system: &S, field: &PiecewiseField, t: f64, dt: f64) -> Result<PiecewiseField> {
    let state = ParticleState { t, partition: field.partition.clone(), dim: field.dim, xi: field.values.clone() };
    Ok(reconstruct(&step_rk4(system, &state, dt, DEFAULT_BLOWUP_GUARD)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrateOptions {
    pub t_final: f64,
    /// Fixed step; `None` picks `min(1e-3, 0.5 / sup sigma)` refined to
    /// divide every output interval.
    pub dt: Option<f64>,
    /// Output times in `[0, t_final]`; empty means `[t_final]`.
    pub sample_times: Vec<f64>,
    pub blowup_guard: f64,
}

impl IntegrateOptions {
    pub fn new(t_final: f64) -> Self {
        Self { t_final, dt: None, sample_times: Vec::new(), blowup_guard: DEFAULT_BLOWUP_GUARD }
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = Some(dt);
        self
    }

    pub fn with_samples(mut self, times: Vec<f64>) -> Self {
        self.sample_times = times;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub snapshots: Vec<ParticleState>,
    pub dt: f64,
    pub steps: usize,
    /// `max_t max_i |xi_i(t) - xi_i(0)|`, the distance of `y^N(t)` from
    /// the sampled initial datum.
    pub max_deviation: f64,
    pub max_abs: f64,
}

impl Trajectory {
    pub fn at(&self, t: f64) -> Option<&ParticleState> {
        self.snapshots.iter().find(|s| (s.t - t).abs() <= 1e-9 * (1.0 + t.abs()))
    }
}

/// Largest `g` with every entry an integer multiple of `g` (to `1e-9`).
fn common_step(gaps: &[f64]) -> f64 {
    let tol = 1e-9;
    let mut g = 0.0f64;
    for &x in gaps.iter().filter(|x| **x > tol) {
        if g == 0.0 {
            g = x;
            continue;
        }
        let (mut a, mut b) = (g.max(x), g.min(x));
        while b > tol * a.max(1.0) {
            let r = a - b * (a / b).floor();
            let r = if (b - r) <= tol * a.max(1.0) { 0.0 } else { r };
            a = b;
            b = r;
        }
        g = a;
    }
    g
}

/// Fixed-step march with snapshots at the requested times.
pub fn integrate<S: ParticleSystem>(system: &S, initial: &ParticleState, options: &IntegrateOptions) -> Result<Trajectory> {
    if !(options.t_final > 0.0) {
        return Err(Error::InvalidArgument(format!("final time {} must be positive", options.t_final)));
    }
    let mut samples = if options.sample_times.is_empty() { vec![options.t_final] } else { options.sample_times.clone() };
    samples.sort_by(f64::total_cmp);
    samples.dedup();
    if samples.iter().any(|&t| t < 0.0 || t > options.t_final * (1.0 + 1e-12)) {
        return Err(Error::InvalidArgument("sample times must lie in [0, t_final]".into()));
    }
    let mut checkpoints = vec![initial.t];
    checkpoints.extend(samples.iter().copied().filter(|&t| t > initial.t + 1e-12));
    if *checkpoints.last().unwrap() < options.t_final - 1e-12 {
        checkpoints.push(options.t_final);
    }
    let gaps: Vec<f64> = checkpoints.windows(2).map(|w| w[1] - w[0]).collect();

    let dt = match options.dt {
        Some(dt) => {
            if !(dt > 0.0) {
                return Err(Error::InvalidArgument(format!("time step {dt} must be positive")));
            }
            dt
        }
        None => {
            let op = system.freeze(initial.t, &initial.xi)?;
            let sup = system.kernel_sup(&op);
            let cap = if sup > 0.0 { 1e-3f64.min(0.5 / sup) } else { 1e-3 };
            let unit = common_step(&gaps);
            if unit > 0.0 { unit / (unit / cap).ceil() } else { cap }
        }
    };
    let mut plan = Vec::with_capacity(gaps.len());
    for &gap in &gaps {
        let steps = (gap / dt).round();
        if (steps * dt - gap).abs() > 1e-9 * gap.max(1.0) {
            return Err(Error::StepMismatch { dt, interval: gap });
        }
        plan.push(steps as usize);
    }

    let mut snapshots = Vec::new();
    let wants = |t: f64| samples.iter().any(|&s| (s - t).abs() <= 1e-9 * (1.0 + t.abs()));
    if wants(initial.t) {
        snapshots.push(initial.clone());
    }
    let mut state = initial.clone();
    let mut max_deviation: f64 = 0.0;
    let mut max_abs = initial.max_abs();
    let mut total_steps = 0usize;
    for (segment, &steps) in plan.iter().enumerate() {
        let start = checkpoints[segment];
        for s in 0..steps {
            let mut next = step_rk4(system, &state, dt, options.blowup_guard)?;
            next.t = start + (s + 1) as f64 * dt;
            state = next;
            total_steps += 1;
            let deviation = state.xi.iter().zip(&initial.xi).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            max_deviation = max_deviation.max(deviation);
            max_abs = max_abs.max(state.max_abs());
        }
        state.t = checkpoints[segment + 1];
        if wants(state.t) {
            snapshots.push(state.clone());
        }
    }
    Ok(Trajectory { snapshots, dt, steps: total_steps, max_deviation, max_abs })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelStrategy {
    /// Profile table for constant coefficients on the circle, otherwise the
    /// factored form on aligned 1-D grids, otherwise dense assembly.
    #[default]
    Auto,
    Profile,
    Factored,
    Dense,
}

impl std::str::FromStr for KernelStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "profile" => Ok(Self::Profile),
            "factored" => Ok(Self::Factored),
            "dense" => Ok(Self::Dense),
            other => Err(Error::InvalidArgument(format!("unknown kernel strategy `{other}`"))),
        }
    }
}

enum Engine {
    Fixed(Arc<KernelMatrix>),
    Factored(FactoredOperator),
    Dense,
}

pub enum MollifiedOperator {
    Matrix(Arc<KernelMatrix>),
    Factored { coefficients: Vec<f64>, sup: f64 },
}

/// The mollified particle system
/// `xi_i' = (1/N) sum_j sigma_eps[t, y^N](x_i, x_j) xi_j + f[t, y^N](x_i)`.
pub struct MollifiedSystem {
    model: Arc<PdeModel>,
    mollifier: Arc<Mollifier>,
    partition: Arc<TaggedPartition>,
    quad: Arc<QuadratureGrid>,
    update: KernelUpdate,
    engine: Engine,
    observed_bound: AtomicU64,
}

impl fmt::Debug for MollifiedSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MollifiedSystem")
            .field("model", &self.model.name())
            .field("epsilon", &self.mollifier.epsilon())
            .field("particles", &self.partition.len())
            .field("nodes", &self.quad.len())
            .finish()
    }
}

impl MollifiedSystem {
    pub fn new(
        model: Arc<PdeModel>,
        mollifier: Arc<Mollifier>,
        partition: Arc<TaggedPartition>,
        quad: Arc<QuadratureGrid>,
        update: KernelUpdate,
        strategy: KernelStrategy,
    ) -> Result<Self> {
        let one_d = partition.dim() == 1;
        let aligned = one_d && quad.len().is_multiple_of(partition.len());
        let strategy = match strategy {
            KernelStrategy::Auto if model.is_constant_coefficient() && one_d && partition.domain().is_periodic() => {
                KernelStrategy::Profile
            }
            KernelStrategy::Auto if aligned => KernelStrategy::Factored,
            KernelStrategy::Auto => KernelStrategy::Dense,
            other => other,
        };
        let engine = match strategy {
            KernelStrategy::Profile => {
                let profile = ConvolutionProfile::new(&model, &mollifier)?;
                Engine::Fixed(Arc::new(assemble_fast_constant(&model, &mollifier, &partition, &profile)?))
            }
            KernelStrategy::Factored => Engine::Factored(FactoredOperator::new(&model, &mollifier, &partition, &quad)?),
            _ if model.is_constant_coefficient() => {
                let zero = PiecewiseField::zeros(partition.clone(), model.state_dim());
                Engine::Fixed(Arc::new(assemble_kernel(&model, &mollifier, &partition, 0.0, &zero, &quad)?))
            }
            _ => {
                quad.check_resolution(mollifier.epsilon())?;
                Engine::Dense
            }
        };
        if partition.domain().has_boundary() {
            log::info!("{} on {}: boundary effects unverified", model.name(), partition.domain().name());
        }
        Ok(Self { model, mollifier, partition, quad, update, engine, observed_bound: AtomicU64::new(0) })
    }

    /// System with the default quadrature grid and strategy.
    pub fn with_defaults(model: Arc<PdeModel>, epsilon: f64, partition: Arc<TaggedPartition>) -> Result<Self> {
        let mollifier = Arc::new(Mollifier::new(partition.dim(), epsilon, model.order() + 1)?);
        let quad = Arc::new(QuadratureGrid::default_for(
            partition.domain().clone(),
            partition.len(),
            partition.per_axis(),
        )?);
        Self::new(model, mollifier, partition, quad, KernelUpdate::PerStage, KernelStrategy::Auto)
    }

    pub fn model(&self) -> &PdeModel {
        &self.model
    }

    pub fn mollifier(&self) -> &Mollifier {
        &self.mollifier
    }

    pub fn quadrature(&self) -> &QuadratureGrid {
        &self.quad
    }

    /// Largest coefficient magnitude seen at quadrature nodes so far.
    pub fn observed_coefficient_bound(&self) -> f64 {
        f64::from_bits(self.observed_bound.load(Ordering::Relaxed))
    }

    fn record_bound(&self, coefficients: &[f64]) {
        let local = coefficients.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut current = self.observed_bound.load(Ordering::Relaxed);
        while local > f64::from_bits(current) {
            match self.observed_bound.compare_exchange_weak(current, local.to_bits(), Ordering::Relaxed, Ordering::Relaxed) {
                Ok(_) => break,
                Err(seen) => current = seen,
            }
        }
    }

    /// Explicit kernel at a state, whatever engine drives the dynamics.
    pub fn kernel_at(&self, t: f64, xi: &[f64]) -> Result<KernelMatrix> {
        let state = PiecewiseField::new(self.partition.clone(), self.model.state_dim(), xi.to_vec())?;
        match &self.engine {
            Engine::Fixed(k) => Ok((**k).clone()),
            Engine::Factored(f) => {
                let coefficients = coefficient_samples(&self.model, t, &state, &self.quad);
                f.materialize(&self.partition, self.mollifier.epsilon(), &coefficients)
            }
            Engine::Dense => assemble_kernel(&self.model, &self.mollifier, &self.partition, t, &state, &self.quad),
        }
    }
}

impl ParticleSystem for MollifiedSystem {
    type Operator = MollifiedOperator;

    fn partition(&self) -> &Arc<TaggedPartition> {
        &self.partition
    }

    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    fn freeze(&self, t: f64, xi: &[f64]) -> Result<MollifiedOperator> {
        match &self.engine {
            Engine::Fixed(k) => Ok(MollifiedOperator::Matrix(k.clone())),
            Engine::Factored(f) => {
                let state = PiecewiseField::new(self.partition.clone(), self.model.state_dim(), xi.to_vec())?;
                let coefficients = coefficient_samples(&self.model, t, &state, &self.quad);
                self.record_bound(&coefficients);
                let sup = f.sup_bound(&coefficients);
                Ok(MollifiedOperator::Factored { coefficients, sup })
            }
            Engine::Dense => {
                let state = PiecewiseField::new(self.partition.clone(), self.model.state_dim(), xi.to_vec())?;
                let k = assemble_kernel(&self.model, &self.mollifier, &self.partition, t, &state, &self.quad)?;
                Ok(MollifiedOperator::Matrix(Arc::new(k)))
            }
        }
    }

    fn apply(&self, op: &MollifiedOperator, t: f64, xi: &[f64], out: &mut [f64]) -> Result<()> {
        match (op, &self.engine) {
            (MollifiedOperator::Matrix(k), _) => apply_discrete_operator_into(k, xi, out)?,
            (MollifiedOperator::Factored { coefficients, .. }, Engine::Factored(f)) => f.apply(coefficients, xi, out)?,
            _ => return Err(Error::InvalidArgument("operator does not belong to this system".into())),
        }
        add_source(self.model.source(), &self.partition, self.model.state_dim(), t, xi, out)
    }

    fn kernel_sup(&self, op: &MollifiedOperator) -> f64 {
        match op {
            MollifiedOperator::Matrix(k) => k.sup_norm(),
            MollifiedOperator::Factored { sup, .. } => *sup,
        }
    }

    fn kernel_update(&self) -> KernelUpdate {
        self.update
    }
}

fn add_source(
    source: &SourceField,
    partition: &Arc<TaggedPartition>,
    d: usize,
    t: f64,
    xi: &[f64],
    out: &mut [f64],
) -> Result<()> {
    if source.is_zero() {
        return Ok(());
    }
    let state = PiecewiseField::new(partition.clone(), d, xi.to_vec())?;
    let mut f = vec![0.0; d];
    for (i, slot) in out.chunks_exact_mut(d).enumerate() {
        source.evaluate(t, &state, partition.tag(i), &mut f);
        slot.iter_mut().zip(&f).for_each(|(o, v)| *o += v);
    }
    Ok(())
}

pub type KernelFn = dyn Fn(f64, &dyn Field, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// A bounded Lipschitz kernel `sigma[t, z](x, x')` given directly.
#[derive(Clone)]
pub struct LipschitzKernelSystem {
    name: String,
    state_dim: usize,
    kernel: Arc<KernelFn>,
    state_dependent: bool,
    time_dependent: bool,
    source: SourceField,
    sup_sigma: f64,
    lip_sigma: f64,
    centering: bool,
}

impl fmt::Debug for LipschitzKernelSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LipschitzKernelSystem")
            .field("name", &self.name)
            .field("sup_sigma", &self.sup_sigma)
            .field("lip_sigma", &self.lip_sigma)
            .field("centering", &self.centering)
            .finish()
    }
}

impl LipschitzKernelSystem {
    /// A kernel that depends on neither time nor state.
    pub fn stationary(
        name: impl Into<String>,
        state_dim: usize,
        kernel: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        sup_sigma: f64,
        lip_sigma: f64,
    ) -> Self {
        Self {
            name: name.into(),
            state_dim,
            kernel: Arc::new(move |_, _, x, y, out| kernel(x, y, out)),
            state_dependent: false,
            time_dependent: false,
            source: SourceField::zero(),
            sup_sigma,
            lip_sigma,
            centering: false,
        }
    }

    /// A general kernel reading time and state.
    pub fn general(
        name: impl Into<String>,
        state_dim: usize,
        kernel: impl Fn(f64, &dyn Field, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        sup_sigma: f64,
        lip_sigma: f64,
    ) -> Self {
        Self {
            name: name.into(),
            state_dim,
            kernel: Arc::new(kernel),
            state_dependent: true,
            time_dependent: true,
            source: SourceField::zero(),
            sup_sigma,
            lip_sigma,
            centering: false,
        }
    }

    pub fn with_source(mut self, source: SourceField) -> Self {
        self.source = source;
        self
    }

    /// Subtracts the degree term `(1/N) sum_j sigma_ij xi_i`, giving the
    /// consensus coupling `sigma_ij (xi_j - xi_i)`.
    pub fn with_centering(mut self, centering: bool) -> Self {
        self.centering = centering;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn sup_sigma(&self) -> f64 {
        self.sup_sigma
    }

    pub fn lip_sigma(&self) -> f64 {
        self.lip_sigma
    }

    pub fn source(&self) -> &SourceField {
        &self.source
    }

    pub fn centering(&self) -> bool {
        self.centering
    }

    pub fn is_stationary(&self) -> bool {
        !self.state_dependent && !self.time_dependent
    }

    pub fn evaluate(&self, t: f64, state: &dyn Field, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.kernel)(t, state, x, y, out)
    }

    /// Checks the declared sup and Lipschitz bounds at random argument pairs.
    pub fn spot_check(&self, domain: &Domain, state: &dyn Field, samples: usize, rng: &mut impl Rng) -> Result<()> {
        let n = domain.dim();
        let dd = self.state_dim * self.state_dim;
        let draw = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
            domain.lengths().iter().map(|&l| rng.gen_range(0.0..l)).collect::<Vec<f64>>()
        };
        let (mut a, mut b) = (vec![0.0; dd], vec![0.0; dd]);
        for _ in 0..samples {
            let (x, y) = (draw(rng), draw(rng));
            let mut x2 = x.clone();
            let mut y2 = y.clone();
            for axis in 0..n {
                x2[axis] += rng.gen_range(-1e-3..1e-3);
                y2[axis] += rng.gen_range(-1e-3..1e-3);
                if !domain.is_periodic() {
                    x2[axis] = x2[axis].clamp(0.0, domain.lengths()[axis]);
                    y2[axis] = y2[axis].clamp(0.0, domain.lengths()[axis]);
                }
            }
            self.evaluate(0.0, state, &x, &y, &mut a);
            self.evaluate(0.0, state, &x2, &y2, &mut b);
            let sup = euclid(&a);
            if sup > self.sup_sigma * (1.0 + 1e-12) + 1e-14 {
                return Err(Error::InvalidArgument(format!("kernel value {sup} exceeds declared sup {}", self.sup_sigma)));
            }
            let diff: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p - q).collect();
            let gap = domain.distance(&x, &x2) + domain.distance(&y, &y2);
            if euclid(&diff) > self.lip_sigma * gap * (1.0 + 1e-9) + 1e-14 {
                return Err(Error::InvalidArgument(format!(
                    "kernel difference {} exceeds declared Lipschitz bound {} * {gap}",
                    euclid(&diff),
                    self.lip_sigma
                )));
            }
        }
        Ok(())
    }
}

/// A [`LipschitzKernelSystem`] sampled on a partition.
pub struct LipschitzParticleSystem {
    system: Arc<LipschitzKernelSystem>,
    partition: Arc<TaggedPartition>,
    cached: Option<Arc<KernelSamples>>,
}

/// Kernel samples `sigma(x_i, x_j)` and their row sums.
pub struct KernelSamples {
    blocks: Vec<f64>,
    row_sums: Vec<f64>,
    sup: f64,
}

impl LipschitzParticleSystem {
    pub fn new(system: Arc<LipschitzKernelSystem>, partition: Arc<TaggedPartition>) -> Self {
        let mut s = Self { system, partition, cached: None };
        if s.system.is_stationary() {
            let zero = PiecewiseField::zeros(s.partition.clone(), s.system.state_dim);
            s.cached = Some(Arc::new(s.sample(0.0, &zero)));
        }
        s
    }

    pub fn system(&self) -> &LipschitzKernelSystem {
        &self.system
    }

    fn sample(&self, t: f64, state: &dyn Field) -> KernelSamples {
        let n = self.partition.len();
        let d = self.system.state_dim;
        let dd = d * d;
        let mut blocks = vec![0.0; n * n * dd];
        blocks.par_chunks_mut(n * dd).enumerate().for_each(|(i, row)| {
            let xi = self.partition.tag(i);
            for (j, slot) in row.chunks_exact_mut(dd).enumerate() {
                self.system.evaluate(t, state, xi, self.partition.tag(j), slot);
            }
        });
        let mut row_sums = vec![0.0; n * dd];
        for i in 0..n {
            for j in 0..n {
                for c in 0..dd {
                    row_sums[i * dd + c] += blocks[(i * n + j) * dd + c];
                }
            }
        }
        let inv = 1.0 / n as f64;
        row_sums.iter_mut().for_each(|v| *v *= inv);
        let sup = blocks.chunks_exact(dd).map(euclid).fold(0.0, f64::max);
        KernelSamples { blocks, row_sums, sup }
    }
}

impl ParticleSystem for LipschitzParticleSystem {
    type Operator = Arc<KernelSamples>;

    fn partition(&self) -> &Arc<TaggedPartition> {
        &self.partition
    }

    fn state_dim(&self) -> usize {
        self.system.state_dim
    }

    fn freeze(&self, t: f64, xi: &[f64]) -> Result<Arc<KernelSamples>> {
        if let Some(k) = &self.cached {
            return Ok(k.clone());
        }
        let state = PiecewiseField::new(self.partition.clone(), self.system.state_dim, xi.to_vec())?;
        Ok(Arc::new(self.sample(t, &state)))
    }

    fn apply(&self, op: &Arc<KernelSamples>, t: f64, xi: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.partition.len();
        let d = self.system.state_dim;
        if xi.len() != n * d || out.len() != n * d {
            return Err(Error::DimensionMismatch { expected: n * d, got: xi.len() });
        }
        let dd = d * d;
        let inv = 1.0 / n as f64;
        let centering = self.system.centering;
        out.par_chunks_mut(d).enumerate().for_each(|(i, slot)| {
            slot.iter_mut().for_each(|v| *v = 0.0);
            let row = &op.blocks[i * n * dd..(i + 1) * n * dd];
            if d == 1 {
                slot[0] = row.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>() * inv;
                if centering {
                    slot[0] -= op.row_sums[i] * xi[i];
                }
                return;
            }
            for j in 0..n {
                let b = &row[j * dd..(j + 1) * dd];
                for r in 0..d {
                    slot[r] += (0..d).map(|c| b[r * d + c] * xi[j * d + c]).sum::<f64>() * inv;
                }
            }
            if centering {
                let s = &op.row_sums[i * dd..(i + 1) * dd];
                for r in 0..d {
                    slot[r] -= (0..d).map(|c| s[r * d + c] * xi[i * d + c]).sum::<f64>();
                }
            }
        });
        add_source(&self.system.source, &self.partition, d, t, xi, out)
    }

    fn kernel_sup(&self, op: &Arc<KernelSamples>) -> f64 {
        op.sup
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, FourierField};
    use crate::geometry::TagRule;

    fn circle(n: usize) -> Arc<TaggedPartition> {
        Arc::new(TaggedPartition::uniform(Domain::circle(), n, TagRule::Midpoint).unwrap())
    }

    #[test]
    fn sample_initial_sine() {
        let p = circle(4);
        let s = sample_initial(&p, &FourierField::sine(1.0, 1, 0.0, 0.0));
        let expected = [1, 3, 5, 7].map(|k| (k as f64 * std::f64::consts::PI / 4.0).sin());
        for (a, b) in s.xi().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn reconstruction_is_indicator_expansion() {
        let p = circle(4);
        let s = ParticleState::new(0.0, p.clone(), 1, vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let f = reconstruct(&s);
        assert_eq!(f.eval_scalar(&[0.3]), -2.0);
        assert_eq!(f.eval_scalar(p.tag(2)), 3.0);
        assert_eq!(f.sup_norm(), 3.0);
        let single = reconstruct(&ParticleState::new(0.0, circle(1), 1, vec![7.0]).unwrap());
        assert_eq!(single.eval_scalar(&[0.9]), 7.0);
    }

    #[test]
    fn source_only_is_affine_and_exact() {
        let system = LipschitzParticleSystem::new(
            Arc::new(
                LipschitzKernelSystem::stationary("zero", 2, |_, _, out| out.fill(0.0), 0.0, 0.0)
                    .with_source(SourceField::constant(vec![1.0, 2.0])),
            ),
            circle(8),
        );
        let initial = sample_initial(system.partition(), &ConstantField(vec![0.5, -1.0]));
        let r = rhs(&system, &initial).unwrap();
        assert!(r.chunks_exact(2).all(|c| c == [1.0, 2.0]));
        let traj = integrate(&system, &initial, &IntegrateOptions::new(1.0).with_dt(0.125)).unwrap();
        let last = traj.snapshots.last().unwrap();
        assert!(last.xi().chunks_exact(2).all(|c| (c[0] - 1.5).abs() < 1e-14 && (c[1] - 1.0).abs() < 1e-14));
    }

    #[test]
    fn zero_step_is_identity() {
        let system = MollifiedSystem::with_defaults(Arc::new(PdeModel::transport()), 0.1, circle(16)).unwrap();
        let s = sample_initial(system.partition(), &FourierField::sine(1.0, 1, 0.0, 0.0));
        assert_eq!(step_rk4(&system, &s, 0.0, DEFAULT_BLOWUP_GUARD).unwrap(), s);
    }

    #[test]
    fn transport_annihilates_constants_and_burgers_annihilates_zero() {
        let transport = MollifiedSystem::with_defaults(Arc::new(PdeModel::transport()), 0.1, circle(64)).unwrap();
        let s = sample_initial(transport.partition(), &ConstantField(vec![2.0]));
        assert!(rhs(&transport, &s).unwrap().iter().all(|v| v.abs() < 1e-9));
        let burgers = MollifiedSystem::with_defaults(Arc::new(PdeModel::burgers()), 0.1, circle(64)).unwrap();
        let z = sample_initial(burgers.partition(), &ConstantField(vec![0.0]));
        assert!(rhs(&burgers, &z).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn field_form_step_equals_particle_step() {
        let system = MollifiedSystem::with_defaults(Arc::new(PdeModel::burgers()), 0.2, circle(32)).unwrap();
        let s = sample_initial(system.partition(), &FourierField::sine(0.2, 1, 0.0, 0.0));
        let via_particles = reconstruct(&step_rk4(&system, &s, 1e-3, DEFAULT_BLOWUP_GUARD).unwrap());
        let via_field = step_field(&system, &reconstruct(&s), 0.0, 1e-3).unwrap();
        assert_eq!(via_particles, via_field);
    }

    #[test]
    fn per_step_cadence_stays_close_to_per_stage() {
        let model = Arc::new(PdeModel::burgers());
        let p = circle(32);
        let m = Arc::new(Mollifier::new(1, 0.2, 2).unwrap());
        let q = Arc::new(QuadratureGrid::new(Domain::circle(), 2048).unwrap());
        let stage =
            MollifiedSystem::new(model.clone(), m.clone(), p.clone(), q.clone(), KernelUpdate::PerStage, KernelStrategy::Auto)
                .unwrap();
        let step = MollifiedSystem::new(model, m, p, q, KernelUpdate::PerStep, KernelStrategy::Auto).unwrap();
        let s = sample_initial(stage.partition(), &FourierField::sine(0.2, 1, 0.0, 0.0));
        let opts = IntegrateOptions::new(0.1).with_dt(0.01);
        let a = integrate(&stage, &s, &opts).unwrap();
        let b = integrate(&step, &s, &opts).unwrap();
        let gap = a.snapshots[0].xi().iter().zip(b.snapshots[0].xi()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        assert!(gap > 0.0 && gap < 1e-4, "gap {gap}");
        let observed = stage.observed_coefficient_bound();
        assert!(observed > 0.19 && observed <= 0.2 * (1.0 + 1e-3), "observed {observed}");
    }

    #[test]
    fn step_must_divide_output_interval() {
        let system = MollifiedSystem::with_defaults(Arc::new(PdeModel::transport()), 0.1, circle(16)).unwrap();
        let s = sample_initial(system.partition(), &FourierField::sine(1.0, 1, 0.0, 0.0));
        let err = integrate(&system, &s, &IntegrateOptions::new(0.5).with_dt(0.3)).unwrap_err();
        assert!(matches!(err, Error::StepMismatch { .. }));
    }

    #[test]
    fn blow_up_is_reported() {
        let system = LipschitzParticleSystem::new(
            Arc::new(LipschitzKernelSystem::stationary("grow", 1, |_, _, out| out[0] = 1000.0, 1000.0, 0.0)),
            circle(4),
        );
        let s = sample_initial(system.partition(), &ConstantField(vec![1.0]));
        let err = integrate(&system, &s, &IntegrateOptions::new(1.0).with_dt(0.01)).unwrap_err();
        assert!(matches!(err, Error::BlowUp { .. }));
    }

    #[test]
    fn auto_step_divides_sample_gaps() {
        assert!((common_step(&[0.25, 0.25, 0.5]) - 0.25).abs() < 1e-12);
        assert!((common_step(&[0.3, 0.2]) - 0.1).abs() < 1e-9);
    }
}
