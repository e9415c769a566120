//! The radial bump `c exp(1/(|x|^2 - 1))`, its scalings and exact
//! derivatives, and Omega-restricted convolutions on quadrature grids.

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::field::{multi_indices, Field};
use crate::quadrature::{integrate_adaptive, QuadratureGrid};

/// Below this exponent `exp(q)` underflows relative to any polynomial factor.
const EXPONENT_FLOOR: f64 = -708.0;

#[derive(Debug, Clone, PartialEq)]
struct Term {
    coefficient: f64,
    q_power: i32,
    x_powers: Vec<i32>,
}

/// `D^alpha exp(q)` written as `P(q, x) exp(q)` with `q = 1/(|x|^2 - 1)`.
#[derive(Debug, Clone, PartialEq)]
struct BumpDerivative {
    terms: Vec<Term>,
}

impl BumpDerivative {
    fn identity(dim: usize) -> Self {
        Self { terms: vec![Term { coefficient: 1.0, q_power: 0, x_powers: vec![0; dim] }] }
    }

    /// Uses `d q / d x_k = -2 x_k q^2`.
    fn differentiate(&self, axis: usize) -> Self {
        let mut collected: BTreeMap<(i32, Vec<i32>), f64> = BTreeMap::new();
        let mut add = |coefficient: f64, q_power: i32, x_powers: Vec<i32>| {
            *collected.entry((q_power, x_powers)).or_insert(0.0) += coefficient;
        };
        for term in &self.terms {
            let beta = term.x_powers[axis];
            if beta > 0 {
                let mut powers = term.x_powers.clone();
                powers[axis] -= 1;
                add(term.coefficient * beta as f64, term.q_power, powers);
            }
            let mut raised = term.x_powers.clone();
            raised[axis] += 1;
            let a = term.q_power as f64;
            if term.q_power > 0 {
                add(-2.0 * a * term.coefficient, term.q_power + 1, raised.clone());
            }
            add(-2.0 * term.coefficient, term.q_power + 2, raised);
        }
        let terms = collected
            .into_iter()
            .filter(|(_, c)| *c != 0.0)
            .map(|((q_power, x_powers), coefficient)| Term { coefficient, q_power, x_powers })
            .collect();
        Self { terms }
    }

    fn eval(&self, q: f64, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| {
                let mut v = t.coefficient * q.powi(t.q_power);
                for (&xi, &b) in x.iter().zip(&t.x_powers) {
                    if b > 0 {
                        v *= xi.powi(b);
                    }
                }
                v
            })
            .sum()
    }
}

/// Surface area of the unit sphere in `R^n`.
pub fn unit_sphere_area(n: usize) -> f64 {
    match n {
        1 => 2.0,
        2 => 2.0 * std::f64::consts::PI,
        _ => 2.0 * std::f64::consts::PI * unit_sphere_area(n - 2) / (n - 2) as f64,
    }
}

fn bump(r2: f64) -> f64 {
    if r2 >= 1.0 {
        0.0
    } else {
        let q = 1.0 / (r2 - 1.0);
        if q < EXPONENT_FLOOR { 0.0 } else { q.exp() }
    }
}

/// `(c, C_eta)` for dimension `n`, computed once per process.
fn constants(n: usize) -> (f64, f64) {
    static CACHE: OnceLock<Mutex<BTreeMap<usize, (f64, f64)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    let mut guard = cache.lock().expect("mollifier constant cache poisoned");
    *guard.entry(n).or_insert_with(|| {
        let area = unit_sphere_area(n);
        let mass = area * integrate_adaptive(|r| r.powi(n as i32 - 1) * bump(r * r), 0.0, 1.0, 1e-13, 0.0);
        let moment = area * integrate_adaptive(|r| r.powi(n as i32) * bump(r * r), 0.0, 1.0, 1e-13, 0.0);
        (1.0 / mass, moment / mass)
    })
}

/// The scaled mollifier `eta_epsilon(x) = epsilon^{-n} eta(x / epsilon)`.
#[derive(Debug, Clone)]
pub struct Mollifier {
    dim: usize,
    epsilon: f64,
    normalization: f64,
    c_eta: f64,
    max_order: usize,
    derivatives: BTreeMap<Vec<usize>, BumpDerivative>,
}

impl Mollifier {
    pub fn new(dim: usize, epsilon: f64, max_order: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("mollifier dimension must be positive".into()));
        }
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::InvalidArgument(format!("epsilon = {epsilon} outside (0, 1]")));
        }
        let (normalization, c_eta) = constants(dim);
        let mut derivatives = BTreeMap::new();
        derivatives.insert(vec![0; dim], BumpDerivative::identity(dim));
        for order in 1..=max_order {
            for alpha in multi_indices(dim, order).into_iter().filter(|a| a.iter().sum::<usize>() == order) {
                let axis = alpha.iter().rposition(|&a| a > 0).unwrap();
                let mut parent = alpha.clone();
                parent[axis] -= 1;
                let next = derivatives[&parent].differentiate(axis);
                derivatives.insert(alpha, next);
            }
        }
        Ok(Self { dim, epsilon, normalization, c_eta, max_order, derivatives })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// The constant `c` making the unit bump a probability density.
    pub fn normalization(&self) -> f64 {
        self.normalization
    }

    /// First absolute moment `C_eta` of the unit bump.
    pub fn c_eta(&self) -> f64 {
        self.c_eta
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    /// `max eta_epsilon = eta_epsilon(0)`.
    pub fn peak(&self) -> f64 {
        self.normalization * (-1.0f64).exp() / self.epsilon.powi(self.dim as i32)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let inv = 1.0 / self.epsilon;
        let r2: f64 = x.iter().map(|v| (v * inv).powi(2)).sum();
        if r2 >= 1.0 {
            return 0.0;
        }
        self.normalization * inv.powi(self.dim as i32) * bump(r2)
    }

    #[inline]
    pub fn eval_1d(&self, x: f64) -> f64 {
        let u = x / self.epsilon;
        let r2 = u * u;
        if r2 >= 1.0 {
            return 0.0;
        }
        self.normalization / self.epsilon * bump(r2)
    }

    pub fn eval_derivative(&self, alpha: &[usize], x: &[f64]) -> Result<f64> {
        if alpha.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: alpha.len() });
        }
        let order: usize = alpha.iter().sum();
        if order > self.max_order {
            return Err(Error::OrderTooHigh { requested: order, max: self.max_order });
        }
        let inv = 1.0 / self.epsilon;
        let mut scaled = [0.0f64; 8];
        let mut heap;
        let u: &mut [f64] = if self.dim <= scaled.len() {
            &mut scaled[..self.dim]
        } else {
            heap = vec![0.0; self.dim];
            &mut heap
        };
        for (slot, v) in u.iter_mut().zip(x) {
            *slot = v * inv;
        }
        let r2: f64 = u.iter().map(|v| v * v).sum();
        if r2 >= 1.0 {
            return Ok(0.0);
        }
        let q = 1.0 / (r2 - 1.0);
        if q < EXPONENT_FLOOR {
            return Ok(0.0);
        }
        let poly = &self.derivatives[alpha];
        Ok(self.normalization * inv.powi((self.dim + order) as i32) * poly.eval(q, u) * q.exp())
    }

    /// `D^k eta_epsilon(x)` in one dimension.
    pub fn derivative_1d(&self, order: usize, x: f64) -> Result<f64> {
        self.eval_derivative(&[order], &[x])
    }

    /// `int |D^alpha eta_epsilon|`, by adaptive quadrature on the radius
    /// line in one dimension and on a fine box grid otherwise.
    pub fn derivative_l1_norm(&self, alpha: &[usize]) -> Result<f64> {
        let order: usize = alpha.iter().sum();
        if order > self.max_order {
            return Err(Error::OrderTooHigh { requested: order, max: self.max_order });
        }
        let eps = self.epsilon;
        if self.dim == 1 {
            let f = |x: f64| self.eval_derivative(alpha, &[x]).map(f64::abs).unwrap_or(0.0);
            return Ok(integrate_adaptive(f, -eps, eps, 1e-9, 1e-14));
        }
        let m = 200usize;
        let h = 2.0 * eps / m as f64;
        let mut total = 0.0;
        let mut point = vec![0.0; self.dim];
        let count = m.pow(self.dim as u32);
        for flat in 0..count {
            let mut rest = flat;
            for slot in point.iter_mut() {
                *slot = -eps + ((rest % m) as f64 + 0.5) * h;
                rest /= m;
            }
            total += self.eval_derivative(alpha, &point)?.abs();
        }
        Ok(total * h.powi(self.dim as i32))
    }

    fn check_domain(&self, quad: &QuadratureGrid) -> Result<()> {
        if quad.domain().dim() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: quad.domain().dim() });
        }
        if quad.domain().is_periodic() && self.epsilon >= 0.5 {
            return Err(Error::EpsilonTooLarge { epsilon: self.epsilon, limit: 0.5 });
        }
        quad.check_resolution(self.epsilon)
    }
}

/// `(eta_epsilon *_Omega g)(x)` by the composite midpoint rule on `quad`.
pub fn convolve_domain(m: &Mollifier, g: &dyn Field, x: &[f64], quad: &QuadratureGrid) -> Result<Vec<f64>> {
    m.check_domain(quad)?;
    let domain = quad.domain();
    let d = g.dim();
    let mut total = vec![0.0; d];
    let mut value = vec![0.0; d];
    let mut delta = vec![0.0; m.dim()];
    quad.for_each_in_window(x, m.epsilon(), |k| {
        let node = quad.node(k);
        domain.difference(x, node, &mut delta);
        let w = m.eval(&delta);
        if w != 0.0 {
            g.eval_into(node, &mut value);
            total.iter_mut().zip(&value).for_each(|(a, v)| *a += w * v);
        }
    });
    let weight = quad.weight();
    total.iter_mut().for_each(|a| *a *= weight);
    Ok(total)
}

/// Values of `(D^alpha eta_epsilon) *_Omega g` at the given points, where
/// `g` is known through its values at the nodes of `quad` (`M x d`,
/// row-major).
pub fn convolve_samples_at(
    m: &Mollifier,
    alpha: &[usize],
    quad: &QuadratureGrid,
    node_values: &[f64],
    d: usize,
    points: &[f64],
) -> Result<Vec<f64>> {
    m.check_domain(quad)?;
    if node_values.len() != quad.len() * d {
        return Err(Error::DimensionMismatch { expected: quad.len() * d, got: node_values.len() });
    }
    let n = m.dim();
    let domain = quad.domain();
    let count = points.len() / n;
    let mut out = vec![0.0; count * d];
    let mut delta = vec![0.0; n];
    for (p, slot) in points.chunks_exact(n).zip(out.chunks_exact_mut(d)) {
        let mut err = None;
        quad.for_each_in_window(p, m.epsilon(), |k| {
            domain.difference(p, quad.node(k), &mut delta);
            match m.eval_derivative(alpha, &delta) {
                Ok(w) if w != 0.0 => {
                    for c in 0..d {
                        slot[c] += w * node_values[k * d + c];
                    }
                }
                Ok(_) => {}
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        slot.iter_mut().for_each(|v| *v *= quad.weight());
    }
    Ok(out)
}

/// Values of `(D^alpha eta_epsilon) *_Omega g` at the nodes of `quad`.
///
/// On one-dimensional grids the kernel is tabulated once per offset, so the
/// cost is one multiply-add per node pair inside the support.
pub fn convolve_samples(
    m: &Mollifier,
    alpha: &[usize],
    quad: &QuadratureGrid,
    node_values: &[f64],
    d: usize,
) -> Result<Vec<f64>> {
    if m.dim() != 1 {
        let points: Vec<f64> = quad.nodes().flatten().copied().collect();
        return convolve_samples_at(m, alpha, quad, node_values, d, &points);
    }
    m.check_domain(quad)?;
    if node_values.len() != quad.len() * d {
        return Err(Error::DimensionMismatch { expected: quad.len() * d, got: node_values.len() });
    }
    let h = quad.spacing(0);
    let reach = (m.epsilon() / h).floor() as i64;
    let table: Vec<f64> = (-reach..=reach)
        .map(|o| m.eval_derivative(alpha, &[o as f64 * h]))
        .collect::<Result<_>>()?;
    let len = quad.len() as i64;
    let periodic = quad.domain().is_periodic();
    let weight = quad.weight();
    let mut out = vec![0.0; quad.len() * d];
    for k in 0..len {
        let slot = &mut out[k as usize * d..(k as usize + 1) * d];
        for (idx, &w) in table.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mut l = k - (idx as i64 - reach);
            if periodic {
                l = l.rem_euclid(len);
            } else if l < 0 || l >= len {
                continue;
            }
            let l = l as usize;
            for c in 0..d {
                slot[c] += w * node_values[l * d + c];
            }
        }
        slot.iter_mut().for_each(|v| *v *= weight);
    }
    Ok(out)
}

/// Samples a field at every node of `quad` (`M x d`, row-major).
pub fn sample_on_nodes(field: &dyn Field, quad: &QuadratureGrid) -> Vec<f64> {
    let d = field.dim();
    let mut out = vec![0.0; quad.len() * d];
    for (node, slot) in quad.nodes().zip(out.chunks_exact_mut(d)) {
        field.eval_into(node, slot);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{ConstantField, FourierField};
    use crate::geometry::Domain;

    #[test]
    fn peak_value_matches_normalization() {
        let m = Mollifier::new(1, 1.0, 4).unwrap();
        assert!((m.eval(&[0.0]) - m.normalization() * (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(m.eval(&[1.0]), 0.0);
    }

    #[test]
    fn one_dimensional_constants_by_simpson() {
        let eps = 0.25;
        let m = Mollifier::new(1, eps, 2).unwrap();
        let steps = 20_000;
        let h = 2.0 * eps / steps as f64;
        let (mut mass, mut moment) = (0.0, 0.0);
        for k in 0..=steps {
            let x = -eps + k as f64 * h;
            let w = if k == 0 || k == steps { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            mass += w * m.eval_1d(x);
            moment += w * x.abs() / eps * m.eval_1d(x);
        }
        mass *= h / 3.0;
        moment *= h / 3.0;
        assert!((mass - 1.0).abs() < 1e-10, "{mass}");
        assert!((moment - 0.33445399770997375).abs() < 1e-8, "{moment}");
        assert!((m.normalization() - 2.2522836210435817).abs() < 1e-12);
        assert!((m.c_eta() - 0.33445399770997375).abs() < 1e-12);
    }

    #[test]
    fn scaling_identity() {
        let unit = Mollifier::new(1, 1.0, 2).unwrap();
        let half = Mollifier::new(1, 0.5, 2).unwrap();
        assert!((half.eval(&[0.1]) - 2.0 * unit.eval(&[0.2])).abs() < 1e-14);
    }

    #[test]
    fn derivative_of_even_bump_vanishes_at_origin() {
        let m = Mollifier::new(1, 0.3, 4).unwrap();
        assert_eq!(m.derivative_1d(1, 0.0).unwrap(), 0.0);
        assert_eq!(m.derivative_1d(3, 0.0).unwrap(), 0.0);
        assert_eq!(m.derivative_1d(0, 0.1).unwrap(), m.eval_1d(0.1));
    }

    #[test]
    fn order_limit_enforced() {
        let m = Mollifier::new(1, 0.3, 2).unwrap();
        assert_eq!(m.derivative_1d(3, 0.0).unwrap_err(), Error::OrderTooHigh { requested: 3, max: 2 });
    }

    #[test]
    fn constants_preserved_on_circle() {
        let m = Mollifier::new(1, 0.1, 1).unwrap();
        let q = QuadratureGrid::new(Domain::circle(), 4096).unwrap();
        let v = convolve_domain(&m, &ConstantField(vec![3.0]), &[0.3], &q).unwrap();
        assert!((v[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn half_mass_at_interval_endpoint() {
        let m = Mollifier::new(1, 0.1, 1).unwrap();
        let q = QuadratureGrid::new(Domain::unit_interval(), 4096).unwrap();
        let v = convolve_domain(&m, &ConstantField(vec![1.0]), &[0.0], &q).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn too_coarse_and_too_wide_rejected() {
        let m = Mollifier::new(1, 0.01, 1).unwrap();
        let q = QuadratureGrid::new(Domain::circle(), 256).unwrap();
        assert!(matches!(
            convolve_domain(&m, &ConstantField(vec![1.0]), &[0.0], &q),
            Err(Error::QuadratureTooCoarse { .. })
        ));
        let wide = Mollifier::new(1, 0.6, 1).unwrap();
        assert!(matches!(
            convolve_domain(&wide, &ConstantField(vec![1.0]), &[0.0], &q),
            Err(Error::EpsilonTooLarge { .. })
        ));
    }

    #[test]
    fn tabulated_and_pointwise_convolutions_agree() {
        let m = Mollifier::new(1, 0.1, 2).unwrap();
        let q = QuadratureGrid::new(Domain::circle(), 1024).unwrap();
        let g = FourierField::scalar_1d(0.2, &[(1.0, 1, 0.3), (0.5, 3, 1.0)]);
        let values = sample_on_nodes(&g, &q);
        let fast = convolve_samples(&m, &[1], &q, &values, 1).unwrap();
        let points: Vec<f64> = q.nodes().flatten().copied().collect();
        let slow = convolve_samples_at(&m, &[1], &q, &values, 1, &points).unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn two_dimensional_derivatives_are_consistent() {
        let m = Mollifier::new(2, 0.5, 3).unwrap();
        let x = [0.1, -0.2];
        let h = 1e-5;
        let dx = (m.eval(&[x[0] + h, x[1]]) - m.eval(&[x[0] - h, x[1]])) / (2.0 * h);
        let analytic = m.eval_derivative(&[1, 0], &x).unwrap();
        assert!((dx - analytic).abs() < 1e-6 * (1.0 + analytic.abs()));
        let mixed_fd = (m.eval_derivative(&[1, 0], &[x[0], x[1] + h]).unwrap()
            - m.eval_derivative(&[1, 0], &[x[0], x[1] - h]).unwrap())
            / (2.0 * h);
        let mixed = m.eval_derivative(&[1, 1], &x).unwrap();
        assert!((mixed_fd - mixed).abs() < 1e-5 * (1.0 + mixed.abs()));
    }
}
