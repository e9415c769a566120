//! Quasilinear evolution equations `dy/dt = sum a_alpha[t, y] D^alpha y + f[t, y]`.

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::Domain;

pub type CoefficientFn = dyn Fn(f64, &dyn Field, &[f64], &mut [f64]) + Send + Sync;
pub type SourceFn = dyn Fn(f64, &dyn Field, &[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
pub enum CoefficientKind {
    /// A fixed `d x d` matrix, row-major.
    Constant(Vec<f64>),
    /// `scale * diag(z(x))`, the local quasilinear form of the built-ins.
    StateScaled(f64),
    /// Arbitrary access to the time, the full state and the point.
    Custom(Arc<CoefficientFn>),
}

impl fmt::Debug for CoefficientKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            Self::StateScaled(s) => f.debug_tuple("StateScaled").field(s).finish(),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// The coefficient `a_alpha[t, z](x)` of one derivative term.
#[derive(Debug)]
pub struct CoefficientField {
    alpha: Vec<usize>,
    kind: CoefficientKind,
    bound: Option<f64>,
    lip_state: Option<f64>,
    lip_x: Option<f64>,
    warned: AtomicBool,
}

impl Clone for CoefficientField {
    fn clone(&self) -> Self {
        Self {
            alpha: self.alpha.clone(),
            kind: self.kind.clone(),
            bound: self.bound,
            lip_state: self.lip_state,
            lip_x: self.lip_x,
            warned: AtomicBool::new(self.warned.load(Ordering::Relaxed)),
        }
    }
}

impl CoefficientField {
    pub fn constant(alpha: Vec<usize>, matrix: Vec<f64>) -> Self {
        let bound = matrix.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let d = (matrix.len() as f64).sqrt() as usize;
        let bound = if d > 1 { frobenius(&matrix) } else { bound };
        Self {
            alpha,
            kind: CoefficientKind::Constant(matrix),
            bound: Some(bound),
            lip_state: Some(0.0),
            lip_x: Some(0.0),
            warned: AtomicBool::new(false),
        }
    }

    pub fn state_scaled(alpha: Vec<usize>, scale: f64) -> Self {
        Self {
            alpha,
            kind: CoefficientKind::StateScaled(scale),
            bound: None,
            lip_state: Some(scale.abs()),
            lip_x: None,
            warned: AtomicBool::new(false),
        }
    }

    pub fn custom(
        alpha: Vec<usize>,
        f: impl Fn(f64, &dyn Field, &[f64], &mut [f64]) + Send + Sync + 'static,
        bound: Option<f64>,
    ) -> Self {
        Self {
            alpha,
            kind: CoefficientKind::Custom(Arc::new(f)),
            bound,
            lip_state: None,
            lip_x: None,
            warned: AtomicBool::new(false),
        }
    }

    pub fn alpha(&self) -> &[usize] {
        &self.alpha
    }

    pub fn order(&self) -> usize {
        self.alpha.iter().sum()
    }

    pub fn kind(&self) -> &CoefficientKind {
        &self.kind
    }

    pub fn declared_bound(&self) -> Option<f64> {
        self.bound
    }

    pub fn lipschitz_in_state(&self) -> Option<f64> {
        self.lip_state
    }

    pub fn lipschitz_in_x(&self) -> Option<f64> {
        self.lip_x
    }

    pub fn is_constant(&self) -> bool {
        matches!(self.kind, CoefficientKind::Constant(_))
    }

    pub fn constant_matrix(&self) -> Option<&[f64]> {
        match &self.kind {
            CoefficientKind::Constant(m) => Some(m),
            _ => None,
        }
    }

    /// Writes the `d x d` matrix `a_alpha[t, state](x)` into `out`.
    pub fn evaluate(&self, t: f64, state: &dyn Field, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            CoefficientKind::Constant(m) => out.copy_from_slice(m),
            CoefficientKind::StateScaled(scale) => {
                let d = state.dim();
                let mut z = [0.0f64; 8];
                let z = &mut z[..d];
                state.eval_into(x, z);
                out.iter_mut().for_each(|v| *v = 0.0);
                for c in 0..d {
                    out[c * d + c] = scale * z[c];
                }
            }
            CoefficientKind::Custom(f) => {
                f(t, state, x, out);
                if let Some(bound) = self.bound {
                    if frobenius(out) > bound * (1.0 + 1e-12) && !self.warned.swap(true, Ordering::Relaxed) {
                        log::warn!(
                            "coefficient of order {} exceeded its declared bound {bound} at x = {x:?}",
                            self.order()
                        );
                    }
                }
            }
        }
    }

    /// Bound of `|a_alpha|` given `sup |z|`.
    pub fn bound_for_state(&self, state_sup: f64) -> f64 {
        match &self.kind {
            CoefficientKind::StateScaled(scale) => scale.abs() * state_sup,
            _ => self.bound.unwrap_or(f64::INFINITY),
        }
    }
}

fn frobenius(m: &[f64]) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Clone)]
pub enum SourceKind {
    Zero,
    Constant(Vec<f64>),
    Custom(Arc<SourceFn>),
}

impl fmt::Debug for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => f.write_str("Zero"),
            Self::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            Self::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// The forcing `f[t, z](x)` with its declared sup and Lipschitz bounds.
#[derive(Debug, Clone)]
pub struct SourceField {
    kind: SourceKind,
    sup: f64,
    lip: f64,
}

impl SourceField {
    pub fn zero() -> Self {
        Self { kind: SourceKind::Zero, sup: 0.0, lip: 0.0 }
    }

    pub fn constant(value: Vec<f64>) -> Self {
        let sup = frobenius(&value);
        Self { kind: SourceKind::Constant(value), sup, lip: 0.0 }
    }

    pub fn custom(f: impl Fn(f64, &dyn Field, &[f64], &mut [f64]) + Send + Sync + 'static, sup: f64, lip: f64) -> Self {
        Self { kind: SourceKind::Custom(Arc::new(f)), sup, lip }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, SourceKind::Zero)
    }

    pub fn sup(&self) -> f64 {
        self.sup
    }

    pub fn lipschitz(&self) -> f64 {
        self.lip
    }

    pub fn evaluate(&self, t: f64, state: &dyn Field, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            SourceKind::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            SourceKind::Constant(c) => out.copy_from_slice(c),
            SourceKind::Custom(f) => f(t, state, x, out),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PdeModel {
    name: String,
    domain: Domain,
    state_dim: usize,
    order: usize,
    coefficients: Vec<CoefficientField>,
    source: SourceField,
}

impl PdeModel {
    pub fn new(
        name: impl Into<String>,
        domain: Domain,
        state_dim: usize,
        order: usize,
        coefficients: Vec<CoefficientField>,
        source: SourceField,
    ) -> Result<Self> {
        if state_dim == 0 || state_dim > 8 {
            return Err(Error::InvalidArgument(format!("state dimension {state_dim} outside 1..=8")));
        }
        if order == 0 {
            return Err(Error::InvalidArgument("operator order must be at least 1".into()));
        }
        for c in &coefficients {
            if c.alpha.len() != domain.dim() {
                return Err(Error::DimensionMismatch { expected: domain.dim(), got: c.alpha.len() });
            }
            if c.order() > order {
                return Err(Error::OrderTooHigh { requested: c.order(), max: order });
            }
            if let CoefficientKind::Constant(m) = &c.kind {
                if m.len() != state_dim * state_dim {
                    return Err(Error::DimensionMismatch { expected: state_dim * state_dim, got: m.len() });
                }
            }
        }
        Ok(Self { name: name.into(), domain, state_dim, order, coefficients, source })
    }

    /// `dy/dt + dy/dx = 0`, i.e. `A = -d/dx`.
    pub fn transport() -> Self {
        Self::new(
            "transport",
            Domain::circle(),
            1,
            1,
            vec![CoefficientField::constant(vec![1], vec![-1.0])],
            SourceField::zero(),
        )
        .expect("transport model is well formed")
    }

    /// `dy/dt + y dy/dx = 0`.
    pub fn burgers() -> Self {
        Self::new(
            "burgers",
            Domain::circle(),
            1,
            1,
            vec![CoefficientField::state_scaled(vec![1], -1.0)],
            SourceField::zero(),
        )
        .expect("burgers model is well formed")
    }

    /// `dy/dt + d^3 y/dx^3 + 6 y dy/dx = 0`.
    pub fn kdv() -> Self {
        Self::new(
            "kdv",
            Domain::circle(),
            1,
            3,
            vec![
                CoefficientField::state_scaled(vec![1], -6.0),
                CoefficientField::constant(vec![3], vec![-1.0]),
            ],
            SourceField::zero(),
        )
        .expect("kdv model is well formed")
    }

    /// `dy/dt = d^2 y/dx^2`.
    pub fn heat() -> Self {
        Self::new(
            "heat",
            Domain::circle(),
            1,
            2,
            vec![CoefficientField::constant(vec![2], vec![1.0])],
            SourceField::zero(),
        )
        .expect("heat model is well formed")
    }

    /// Scalar `dy/dt = sum_k a_k d^k y/dx^k` on the circle; `coefficients[k]`
    /// multiplies the `k`-th derivative.
    pub fn custom_linear(coefficients: &[f64]) -> Result<Self> {
        let order = coefficients.iter().rposition(|&c| c != 0.0).unwrap_or(0).max(1);
        let fields = coefficients
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(k, &c)| CoefficientField::constant(vec![k], vec![c]))
            .collect();
        Self::new("custom-linear", Domain::circle(), 1, order, fields, SourceField::zero())
    }

    /// Two uncoupled transport equations with speeds `speeds`.
    pub fn diagonal_transport(speeds: [f64; 2]) -> Self {
        Self::new(
            "diagonal-transport",
            Domain::circle(),
            2,
            1,
            vec![CoefficientField::constant(vec![1], vec![-speeds[0], 0.0, 0.0, -speeds[1]])],
            SourceField::zero(),
        )
        .expect("diagonal transport is well formed")
    }

    /// No derivative terms at all, only a constant source.
    pub fn source_only(value: Vec<f64>) -> Self {
        let d = value.len();
        Self::new("source-only", Domain::circle(), d, 1, Vec::new(), SourceField::constant(value))
            .expect("source-only model is well formed")
    }

    pub fn by_name(name: &str, custom: &[f64]) -> Result<Self> {
        match name {
            "transport" => Ok(Self::transport()),
            "burgers" => Ok(Self::burgers()),
            "kdv" => Ok(Self::kdv()),
            "heat" => Ok(Self::heat()),
            "custom-linear" => Self::custom_linear(custom),
            other => Err(Error::InvalidArgument(format!("unknown model `{other}`"))),
        }
    }

    pub fn with_domain(mut self, domain: Domain) -> Result<Self> {
        if domain.dim() != self.domain.dim() {
            return Err(Error::DimensionMismatch { expected: self.domain.dim(), got: domain.dim() });
        }
        self.domain = domain;
        Ok(self)
    }

    /// Constant-coefficient copy with every coefficient evaluated at
    /// `(t, state)` at one point of the domain; exact when `state` is
    /// spatially constant.
    pub fn frozen_at(&self, t: f64, state: &dyn Field) -> Result<PdeModel> {
        let d = self.state_dim;
        let point: Vec<f64> = self.domain.lengths().iter().map(|l| 0.5 * l).collect();
        let mut matrix = vec![0.0; d * d];
        let coefficients = self
            .coefficients
            .iter()
            .map(|c| {
                c.evaluate(t, state, &point, &mut matrix);
                CoefficientField::constant(c.alpha.clone(), matrix.clone())
            })
            .collect();
        PdeModel::new(format!("{}-frozen", self.name), self.domain.clone(), d, self.order, coefficients, self.source.clone())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn coefficients(&self) -> &[CoefficientField] {
        &self.coefficients
    }

    pub fn source(&self) -> &SourceField {
        &self.source
    }

    pub fn is_constant_coefficient(&self) -> bool {
        self.coefficients.iter().all(CoefficientField::is_constant)
    }

    /// The bound `C_a` for a state with `sup |z| = state_sup`.
    pub fn coefficient_bound(&self, state_sup: f64) -> f64 {
        self.coefficients.iter().map(|c| c.bound_for_state(state_sup)).fold(0.0, f64::max)
    }

    /// True when `A` is skew-adjoint on a torus: constant, odd-order terms
    /// with symmetric matrices.
    pub fn is_skew_on_torus(&self) -> bool {
        let d = self.state_dim;
        !self.coefficients.is_empty()
            && self.coefficients.iter().all(|c| match c.constant_matrix() {
                Some(m) => c.order() % 2 == 1 && (0..d).all(|i| (0..d).all(|j| m[i * d + j] == m[j * d + i])),
                None => false,
            })
    }

    /// Smallest `omega >= 0` with `<A g, g> <= omega |g|^2` for scalar
    /// constant-coefficient models on the circle, from the Fourier symbol.
    /// `None` when no such shift exists or the model is outside that class.
    pub fn dissipativity_shift(&self) -> Option<f64> {
        if self.state_dim != 1 || self.domain.dim() != 1 || !self.is_constant_coefficient() {
            return None;
        }
        let real_part = |xi: f64| -> f64 {
            self.coefficients
                .iter()
                .filter(|c| c.order() % 2 == 0)
                .map(|c| {
                    let k = c.order();
                    let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
                    sign * c.constant_matrix().unwrap()[0] * xi.powi(k as i32)
                })
                .sum()
        };
        let leading = self
            .coefficients
            .iter()
            .filter(|c| c.order() % 2 == 0 && c.order() > 0)
            .max_by_key(|c| c.order());
        if let Some(c) = leading {
            let k = c.order();
            let sign = if (k / 2) % 2 == 0 { 1.0 } else { -1.0 };
            if sign * c.constant_matrix().unwrap()[0] > 0.0 {
                return None;
            }
        }
        let omega = (0..=20_000).map(|i| real_part(i as f64 * 0.05)).fold(0.0, f64::max);
        Some(omega)
    }
}

/// `A[t, state] state (x) + f[t, state](x)` with exact derivatives.
pub fn apply_operator(model: &PdeModel, t: f64, state: &dyn Field, x: &[f64]) -> Result<Vec<f64>> {
    let d = model.state_dim();
    if state.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: state.dim() });
    }
    let mut out = vec![0.0; d];
    model.source().evaluate(t, state, x, &mut out);
    let mut matrix = vec![0.0; d * d];
    let mut derivative = vec![0.0; d];
    for c in model.coefficients() {
        state.derivative_into(c.alpha(), x, &mut derivative)?;
        c.evaluate(t, state, x, &mut matrix);
        for i in 0..d {
            for j in 0..d {
                out[i] += matrix[i * d + j] * derivative[j];
            }
        }
    }
    Ok(out)
}
