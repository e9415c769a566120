//! Adaptive Gauss-Kronrod integration on intervals and the uniform
//! composite midpoint grid used for all domain integrals.

use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::Domain;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

/// One 7/15-point Gauss-Kronrod panel: (Kronrod estimate, error estimate).
pub fn gauss_kronrod_15(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for j in 0..7 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    (kronrod * half, ((kronrod - gauss) * half).abs())
}

/// Globally adaptive bisection driven by the Kronrod error estimate.
pub fn integrate_adaptive(f: impl Fn(f64) -> f64, a: f64, b: f64, rel_tol: f64, abs_tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let mut panels = vec![{
        let (v, e) = gauss_kronrod_15(&f, a, b);
        (a, b, v, e)
    }];
    for _ in 0..4000 {
        let total: f64 = panels.iter().map(|p| p.2).sum();
        let error: f64 = panels.iter().map(|p| p.3).sum();
        if error <= abs_tol.max(rel_tol * total.abs()) {
            break;
        }
        let worst = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .map(|(i, _)| i)
            .unwrap();
        let (lo, hi, _, _) = panels.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        let (v1, e1) = gauss_kronrod_15(&f, lo, mid);
        let (v2, e2) = gauss_kronrod_15(&f, mid, hi);
        panels.push((lo, mid, v1, e1));
        panels.push((mid, hi, v2, e2));
    }
    // Sum in a fixed order so the result does not depend on panel history.
    panels.sort_by(|x, y| x.0.total_cmp(&y.0));
    panels.iter().map(|p| p.2).sum()
}

/// Composite midpoint rule on `m^n` congruent boxes, all weights `1/M`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    domain: Domain,
    per_axis: usize,
    len: usize,
    nodes: Vec<f64>,
}

impl QuadratureGrid {
    pub fn with_per_axis(domain: Domain, per_axis: usize) -> Result<Self> {
        if per_axis == 0 {
            return Err(Error::InvalidArgument("quadrature needs at least one node".into()));
        }
        let n = domain.dim();
        let len = per_axis
            .checked_pow(n as u32)
            .ok_or_else(|| Error::InvalidArgument("quadrature grid too large".into()))?;
        let mut nodes = Vec::with_capacity(len * n);
        let mut index = vec![0usize; n];
        for flat in 0..len {
            let mut rest = flat;
            for slot in index.iter_mut().rev() {
                *slot = rest % per_axis;
                rest /= per_axis;
            }
            for (k, &ik) in index.iter().enumerate() {
                nodes.push((ik as f64 + 0.5) * domain.lengths()[k] / per_axis as f64);
            }
        }
        Ok(Self { domain, per_axis, len, nodes })
    }

    /// Grid with exactly `m` nodes; `m` must be a perfect `n`-th power.
    pub fn new(domain: Domain, m: usize) -> Result<Self> {
        let n = domain.dim();
        let per_axis = (m as f64).powf(1.0 / n as f64).round() as usize;
        if per_axis.checked_pow(n as u32) != Some(m) {
            return Err(Error::NonConformingN { n: m, dim: n });
        }
        Self::with_per_axis(domain, per_axis)
    }

    /// Default resolution for a partition of `n_cells` cells: at least
    /// `max(4096, 64 N)` nodes, and an integer number of nodes per cell side.
    pub fn default_for(domain: Domain, n_cells: usize, cells_per_axis: usize) -> Result<Self> {
        let n = domain.dim();
        let target = 4096usize.max(64 * n_cells);
        let mut per_axis = (target as f64).powf(1.0 / n as f64).ceil() as usize;
        per_axis = cells_per_axis * per_axis.div_ceil(cells_per_axis);
        Self::with_per_axis(domain, per_axis)
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn per_axis(&self) -> usize {
        self.per_axis
    }

    pub fn weight(&self) -> f64 {
        self.domain.measure() / self.len as f64
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.domain.lengths()[axis] / self.per_axis as f64
    }

    pub fn node(&self, k: usize) -> &[f64] {
        let n = self.domain.dim();
        &self.nodes[k * n..(k + 1) * n]
    }

    pub fn nodes(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.nodes.chunks_exact(self.domain.dim())
    }

    pub fn integrate(&self, f: &dyn Field) -> Vec<f64> {
        let d = f.dim();
        let mut total = vec![0.0; d];
        let mut v = vec![0.0; d];
        for x in self.nodes() {
            f.eval_into(x, &mut v);
            total.iter_mut().zip(&v).for_each(|(a, b)| *a += b);
        }
        let w = self.weight();
        total.iter_mut().for_each(|a| *a *= w);
        total
    }

    /// Midpoint-rule error bound for a Lipschitz integrand.
    pub fn lipschitz_error_bound(&self, lip: f64) -> f64 {
        let diam = self.domain.lengths().iter().map(|l| l * l).sum::<f64>().sqrt();
        0.5 * diam * lip / self.per_axis as f64
    }

    /// Requires at least eight nodes across a window of width `2 epsilon`.
    pub fn check_resolution(&self, epsilon: f64) -> Result<()> {
        for axis in 0..self.domain.dim() {
            let nodes_per_window = 2.0 * epsilon / self.spacing(axis);
            if nodes_per_window < 8.0 {
                return Err(Error::QuadratureTooCoarse { nodes_per_window, required: 8 });
            }
        }
        Ok(())
    }

    /// Unwrapped node index range `[lo, hi]` along `axis` whose nodes lie
    /// within `radius` of `center`.  On a torus callers reduce modulo `m`.
    pub fn axis_window(&self, axis: usize, center: f64, radius: f64) -> (i64, i64) {
        let h = self.spacing(axis);
        let lo = ((center - radius) / h - 0.5).ceil() as i64;
        let hi = ((center + radius) / h - 0.5).floor() as i64;
        if self.domain.is_periodic() {
            (lo, hi)
        } else {
            (lo.max(0), hi.min(self.per_axis as i64 - 1))
        }
    }

    /// Calls `visit(k)` for every node within sup-distance `radius` of `center`.
    pub fn for_each_in_window(&self, center: &[f64], radius: f64, mut visit: impl FnMut(usize)) {
        let n = self.domain.dim();
        let m = self.per_axis as i64;
        let ranges: Vec<(i64, i64)> = (0..n).map(|k| self.axis_window(k, center[k], radius)).collect();
        if ranges.iter().any(|(lo, hi)| lo > hi) {
            return;
        }
        let mut cursor: Vec<i64> = ranges.iter().map(|r| r.0).collect();
        loop {
            let mut flat = 0usize;
            for &c in &cursor {
                flat = flat * self.per_axis + c.rem_euclid(m) as usize;
            }
            visit(flat);
            let mut axis = n;
            loop {
                if axis == 0 {
                    return;
                }
                axis -= 1;
                if cursor[axis] < ranges[axis].1 {
                    cursor[axis] += 1;
                    break;
                }
                cursor[axis] = ranges[axis].0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FnField;

    #[test]
    fn kronrod_is_exact_on_polynomials() {
        let (v, _) = gauss_kronrod_15(&|x: f64| x.powi(20), -1.0, 1.0);
        assert!((v - 2.0 / 21.0).abs() < 1e-14);
        let (v, _) = gauss_kronrod_15(&|x: f64| 3.0 * x * x + 1.0, 0.0, 2.0);
        assert!((v - 10.0).abs() < 1e-13);
    }

    #[test]
    fn adaptive_handles_smooth_and_peaked() {
        let v = integrate_adaptive(f64::exp, 0.0, 1.0, 1e-13, 0.0);
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-13);
        let v = integrate_adaptive(|x| 1.0 / (1e-4 + x * x), -1.0, 1.0, 1e-12, 0.0);
        let exact = 2.0 * (1.0 / 1e-2) * (1.0f64 / 1e-2).atan();
        assert!((v - exact).abs() / exact < 1e-11);
    }

    #[test]
    fn grid_weights_and_integral() {
        let q = QuadratureGrid::new(Domain::circle(), 1000).unwrap();
        assert!((q.weight() * q.len() as f64 - 1.0).abs() < 1e-15);
        let s = FnField::scalar(|x| (2.0 * std::f64::consts::PI * x[0]).sin().powi(2));
        assert!((q.integrate(&s)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn torus_window_wraps() {
        let q = QuadratureGrid::new(Domain::circle(), 100).unwrap();
        let mut seen = Vec::new();
        q.for_each_in_window(&[0.0], 0.03, |k| seen.push(k));
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 97, 98, 99]);
        let interval = QuadratureGrid::new(Domain::unit_interval(), 100).unwrap();
        let mut seen = Vec::new();
        interval.for_each_in_window(&[0.0], 0.03, |k| seen.push(k));
        assert_eq!(seen, vec![0, 1, 2]);
    }

    #[test]
    fn coarse_grid_rejected() {
        let q = QuadratureGrid::new(Domain::circle(), 100).unwrap();
        assert!(matches!(q.check_resolution(0.03), Err(Error::QuadratureTooCoarse { required: 8, .. })));
        assert!(q.check_resolution(0.04).is_ok());
    }

    #[test]
    fn default_grid_is_aligned() {
        let q = QuadratureGrid::default_for(Domain::circle(), 100, 100).unwrap();
        assert_eq!(q.len(), 6400);
        let q = QuadratureGrid::default_for(Domain::circle(), 64, 64).unwrap();
        assert_eq!(q.len(), 4096);
    }
}
