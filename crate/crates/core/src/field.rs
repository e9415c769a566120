//! Evaluable vector fields on a domain.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};

/// A `d`-vector valued function of a point.
pub trait Field: Send + Sync {
    fn dim(&self) -> usize;

    fn eval_into(&self, x: &[f64], out: &mut [f64]);

    /// Writes `D^alpha` of the field at `x`.
    fn derivative_into(&self, alpha: &[usize], _x: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(Error::DerivativeUnavailable { order: alpha.iter().sum() })
    }

    fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(x, &mut out);
        out
    }

    fn eval_scalar(&self, x: &[f64]) -> f64 {
        let mut out = [0.0; 8];
        let d = self.dim();
        if d <= out.len() {
            self.eval_into(x, &mut out[..d]);
            out[0]
        } else {
            self.eval(x)[0]
        }
    }
}

impl<F: Field + ?Sized> Field for Arc<F> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (**self).eval_into(x, out)
    }
    fn derivative_into(&self, alpha: &[usize], x: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).derivative_into(alpha, x, out)
    }
}

impl<F: Field + ?Sized> Field for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (**self).eval_into(x, out)
    }
    fn derivative_into(&self, alpha: &[usize], x: &[f64], out: &mut [f64]) -> Result<()> {
        (**self).derivative_into(alpha, x, out)
    }
}

type PointFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Closure-backed field without derivative information.
#[derive(Clone)]
pub struct FnField {
    dim: usize,
    f: Arc<PointFn>,
}

impl FnField {
    pub fn new(dim: usize, f: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { dim, f: Arc::new(f) }
    }

    pub fn scalar(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(1, move |x, out| out[0] = f(x))
    }
}

impl Field for FnField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        (self.f)(x, out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstantField(pub Vec<f64>);

impl Field for ConstantField {
    fn dim(&self) -> usize {
        self.0.len()
    }
    fn eval_into(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
    fn derivative_into(&self, alpha: &[usize], _x: &[f64], out: &mut [f64]) -> Result<()> {
        if alpha.iter().all(|&a| a == 0) {
            out.copy_from_slice(&self.0);
        } else {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(())
    }
}

/// One term `amplitude * sin(2 pi k.x + phase)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    pub amplitude: f64,
    pub wavevector: Vec<i32>,
    pub phase: f64,
}

/// Finite trigonometric sum per component; periodic with period one in
/// every axis, with exact derivatives of any order.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierField {
    space_dim: usize,
    offsets: Vec<f64>,
    modes: Vec<Vec<Mode>>,
}

impl FourierField {
    pub fn new(space_dim: usize, offsets: Vec<f64>, modes: Vec<Vec<Mode>>) -> Self {
        assert_eq!(offsets.len(), modes.len());
        assert!(modes.iter().flatten().all(|m| m.wavevector.len() == space_dim));
        Self { space_dim, offsets, modes }
    }

    /// `offset + amplitude * sin(2 pi k x + phase)` on a 1-D domain.
    pub fn sine(amplitude: f64, frequency: i32, phase: f64, offset: f64) -> Self {
        Self::new(1, vec![offset], vec![vec![Mode { amplitude, wavevector: vec![frequency], phase }]])
    }

    pub fn scalar_1d(offset: f64, terms: &[(f64, i32, f64)]) -> Self {
        let modes = terms
            .iter()
            .map(|&(amplitude, k, phase)| Mode { amplitude, wavevector: vec![k], phase })
            .collect();
        Self::new(1, vec![offset], vec![modes])
    }

    /// Random scalar trigonometric polynomial on a 1-D domain.
    pub fn random_1d(rng: &mut impl Rng, terms: usize, max_frequency: i32) -> Self {
        let list: Vec<(f64, i32, f64)> = (0..terms)
            .map(|_| {
                (rng.gen_range(-1.0..1.0), rng.gen_range(1..=max_frequency), rng.gen_range(0.0..2.0 * PI))
            })
            .collect();
        Self::scalar_1d(rng.gen_range(-0.5..0.5), &list)
    }

    pub fn space_dim(&self) -> usize {
        self.space_dim
    }

    /// The exact derivative `D^alpha g` as another trigonometric sum.
    pub fn derivative(&self, alpha: &[usize]) -> Result<FourierField> {
        if alpha.len() != self.space_dim {
            return Err(Error::DimensionMismatch { expected: self.space_dim, got: alpha.len() });
        }
        let order: usize = alpha.iter().sum();
        let modes = self
            .modes
            .iter()
            .map(|component| {
                component
                    .iter()
                    .map(|m| {
                        let factor: f64 = m
                            .wavevector
                            .iter()
                            .zip(alpha)
                            .map(|(&k, &a)| (2.0 * PI * k as f64).powi(a as i32))
                            .product();
                        Mode {
                            amplitude: m.amplitude * factor,
                            wavevector: m.wavevector.clone(),
                            phase: m.phase + order as f64 * 0.5 * PI,
                        }
                    })
                    .collect()
            })
            .collect();
        let offsets = if order == 0 { self.offsets.clone() } else { vec![0.0; self.offsets.len()] };
        Ok(FourierField::new(self.space_dim, offsets, modes))
    }

    /// Upper bound of `max |g|` over all components.
    pub fn sup_bound(&self) -> f64 {
        self.component_bounds(|_| 1.0, true)
    }

    /// Upper bound of the Euclidean Lipschitz constant of each component,
    /// maximised over components.
    pub fn lipschitz_bound(&self) -> f64 {
        self.component_bounds(|k| 2.0 * PI * norm(k), false)
    }

    /// `sum_{|alpha| <= order} max |D^alpha g|`, bounded mode by mode.
    pub fn sobolev_sup_norm(&self, order: usize) -> f64 {
        let n = self.space_dim;
        self.offsets
            .iter()
            .zip(&self.modes)
            .map(|(offset, modes)| {
                let mut total = offset.abs();
                for m in modes {
                    for alpha in multi_indices(n, order) {
                        let factor: f64 = alpha
                            .iter()
                            .zip(&m.wavevector)
                            .map(|(&a, &k)| (2.0 * PI * k as f64).abs().powi(a as i32))
                            .product();
                        total += m.amplitude.abs() * factor;
                    }
                }
                total
            })
            .fold(0.0, f64::max)
    }

    fn component_bounds(&self, weight: impl Fn(&[i32]) -> f64, with_offset: bool) -> f64 {
        self.offsets
            .iter()
            .zip(&self.modes)
            .map(|(offset, modes)| {
                let base = if with_offset { offset.abs() } else { 0.0 };
                base + modes.iter().map(|m| m.amplitude.abs() * weight(&m.wavevector)).sum::<f64>()
            })
            .fold(0.0, f64::max)
    }
}

fn norm(k: &[i32]) -> f64 {
    k.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
}

/// All multi-indices of length `n` with total order at most `order`.
pub fn multi_indices(n: usize, order: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = vec![0usize; n];
    fn rec(pos: usize, left: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if pos == current.len() {
            out.push(current.clone());
            return;
        }
        for a in 0..=left {
            current[pos] = a;
            rec(pos + 1, left - a, current, out);
        }
        current[pos] = 0;
    }
    rec(0, order, &mut current, &mut out);
    out
}

impl Field for FourierField {
    fn dim(&self) -> usize {
        self.offsets.len()
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        for (c, slot) in out.iter_mut().enumerate() {
            let mut v = self.offsets[c];
            for m in &self.modes[c] {
                let phase = 2.0 * PI * dot(&m.wavevector, x) + m.phase;
                v += m.amplitude * phase.sin();
            }
            *slot = v;
        }
    }

    fn derivative_into(&self, alpha: &[usize], x: &[f64], out: &mut [f64]) -> Result<()> {
        if alpha.len() != self.space_dim {
            return Err(Error::DimensionMismatch { expected: self.space_dim, got: alpha.len() });
        }
        let order: usize = alpha.iter().sum();
        for (c, slot) in out.iter_mut().enumerate() {
            let mut v = if order == 0 { self.offsets[c] } else { 0.0 };
            for m in &self.modes[c] {
                let factor: f64 = alpha
                    .iter()
                    .zip(&m.wavevector)
                    .map(|(&a, &k)| (2.0 * PI * k as f64).powi(a as i32))
                    .product();
                let phase = 2.0 * PI * dot(&m.wavevector, x) + m.phase + order as f64 * 0.5 * PI;
                v += m.amplitude * factor * phase.sin();
            }
            *slot = v;
        }
        Ok(())
    }
}

fn dot(k: &[i32], x: &[f64]) -> f64 {
    k.iter().zip(x).map(|(&a, &b)| a as f64 * b).sum()
}

/// Periodic tent `base + height * (1 - 2 d(x, center))` on the circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TentField {
    pub center: f64,
    pub height: f64,
    pub base: f64,
}

impl TentField {
    pub fn lipschitz(&self) -> f64 {
        2.0 * self.height.abs()
    }

    pub fn mean(&self) -> f64 {
        self.base + 0.5 * self.height
    }

    pub fn sup(&self) -> f64 {
        self.base.abs().max((self.base + self.height).abs())
    }
}

impl Field for TentField {
    fn dim(&self) -> usize {
        1
    }
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        let mut d = (x[0] - self.center).rem_euclid(1.0);
        d = d.min(1.0 - d);
        out[0] = self.base + self.height * (1.0 - 2.0 * d);
    }
}

/// Compactly supported hat `height * max(0, 1 - |x_0 - center| / half_width)`
/// in the first coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HatField {
    pub center: f64,
    pub half_width: f64,
    pub height: f64,
}

impl HatField {
    pub fn lipschitz(&self) -> f64 {
        self.height.abs() / self.half_width
    }
}

impl Field for HatField {
    fn dim(&self) -> usize {
        1
    }
    fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.height * (1.0 - (x[0] - self.center).abs() / self.half_width).max(0.0);
    }
}

/// Scalar test function with a certified Lipschitz constant.
#[derive(Clone)]
pub struct LipschitzSample {
    pub label: String,
    pub field: Arc<dyn Field>,
    pub lipschitz: f64,
}

/// Reproducible family of scalar functions of `x_0`: even members are sums of
/// at most five sine modes, odd members sums of at most five hats supported in
/// `[0, 1]` plus one sine mode. Every function is periodic with period one, so
/// the constants hold on the interval and on the circle alike.
pub fn lipschitz_family(rng: &mut impl Rng, count: usize) -> Vec<LipschitzSample> {
    (0..count)
        .map(|index| {
            let terms = rng.gen_range(1..=5usize);
            let modes: Vec<(f64, i32, f64)> = (0..if index % 2 == 0 { terms } else { 1 })
                .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(1..=6), rng.gen_range(0.0..2.0 * PI)))
                .collect();
            let waves = FourierField::scalar_1d(0.0, &modes);
            let mut lipschitz = waves.lipschitz_bound();
            if index % 2 == 0 {
                return LipschitzSample { label: format!("sines-{index}"), field: Arc::new(waves), lipschitz };
            }
            let hats: Vec<HatField> = (0..terms)
                .map(|_| {
                    let half_width = rng.gen_range(0.02..0.25);
                    let center = rng.gen_range(half_width..1.0 - half_width);
                    HatField { center, half_width, height: rng.gen_range(-1.0..1.0) }
                })
                .collect();
            lipschitz += hats.iter().map(HatField::lipschitz).sum::<f64>();
            let field = FnField::scalar(move |x| {
                let mut out = [0.0];
                waves.eval_into(&x[..1], &mut out);
                let mut hat = [0.0];
                hats.iter().fold(out[0], |acc, h| {
                    h.eval_into(x, &mut hat);
                    acc + hat[0]
                })
            });
            LipschitzSample { label: format!("hats-{index}"), field: Arc::new(field), lipschitz }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_derivatives_cycle() {
        let g = FourierField::sine(1.0, 1, 0.0, 0.0);
        let x = [0.1];
        let mut out = [0.0];
        g.derivative_into(&[1], &x, &mut out).unwrap();
        assert!((out[0] - 2.0 * PI * (2.0 * PI * 0.1).cos()).abs() < 1e-12);
        g.derivative_into(&[3], &x, &mut out).unwrap();
        assert!((out[0] + (2.0 * PI).powi(3) * (2.0 * PI * 0.1).cos()).abs() < 1e-9);
    }

    #[test]
    fn multi_index_count() {
        assert_eq!(multi_indices(1, 3).len(), 4);
        assert_eq!(multi_indices(2, 2).len(), 6);
    }

    #[test]
    fn tent_values() {
        let t = TentField { center: 0.0, height: 1.0, base: 0.0 };
        assert_eq!(t.eval_scalar(&[0.0]), 1.0);
        assert_eq!(t.eval_scalar(&[0.5]), 0.0);
        assert!((t.eval_scalar(&[0.75]) - 0.5).abs() < 1e-15);
    }
}
