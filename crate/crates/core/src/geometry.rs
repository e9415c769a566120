//! Domains of unit measure and uniform tagged partitions.

use crate::error::{Error, Result};
use crate::field::Field;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainKind {
    UnitInterval,
    Torus,
    Cuboid,
}

/// A domain of Lebesgue measure one: the unit interval, a flat torus of
/// period one, or an axis-aligned box whose side lengths multiply to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    kind: DomainKind,
    lengths: Vec<f64>,
}

impl Domain {
    pub fn unit_interval() -> Self {
        Self { kind: DomainKind::UnitInterval, lengths: vec![1.0] }
    }

    pub fn circle() -> Self {
        Self::torus(1)
    }

    pub fn torus(dim: usize) -> Self {
        assert!(dim >= 1, "torus dimension must be positive");
        Self { kind: DomainKind::Torus, lengths: vec![1.0; dim] }
    }

    pub fn cuboid(lengths: Vec<f64>) -> Result<Self> {
        if lengths.is_empty() || lengths.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidArgument("box side lengths must be positive".into()));
        }
        let volume: f64 = lengths.iter().product();
        if (volume - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("box volume {volume} is not 1")));
        }
        Ok(Self { kind: DomainKind::Cuboid, lengths })
    }

    pub fn kind(&self) -> DomainKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.lengths.len()
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn is_periodic(&self) -> bool {
        self.kind == DomainKind::Torus
    }

    pub fn has_boundary(&self) -> bool {
        !self.is_periodic()
    }

    pub fn measure(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn name(&self) -> String {
        match self.kind {
            DomainKind::UnitInterval => "interval".into(),
            DomainKind::Torus if self.dim() == 1 => "circle".into(),
            DomainKind::Torus => format!("torus{}", self.dim()),
            DomainKind::Cuboid => format!("box{}", self.dim()),
        }
    }

    /// Writes `a - b` into `out`, using the minimal image on a torus.
    pub fn difference(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        for k in 0..self.dim() {
            let mut delta = a[k] - b[k];
            if self.is_periodic() {
                delta = wrap_centered(delta);
            }
            out[k] = delta;
        }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut sum = 0.0;
        for k in 0..self.dim() {
            let mut delta = (a[k] - b[k]).abs();
            if self.is_periodic() {
                delta = delta.rem_euclid(1.0);
                delta = delta.min(1.0 - delta);
            }
            sum += delta * delta;
        }
        sum.sqrt()
    }

    /// Canonical representative of a point; wraps into `[0, 1)` on a torus.
    pub fn canonical(&self, x: &[f64], out: &mut [f64]) {
        for k in 0..self.dim() {
            out[k] = if self.is_periodic() { x[k].rem_euclid(1.0) } else { x[k] };
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        if self.is_periodic() {
            return x.iter().all(|v| v.is_finite());
        }
        x.iter().zip(&self.lengths).all(|(&v, &l)| (0.0..=l).contains(&v))
    }

    /// Euclidean distance from `x` to the boundary; infinite on a torus.
    pub fn distance_to_boundary(&self, x: &[f64]) -> f64 {
        if self.is_periodic() {
            return f64::INFINITY;
        }
        x.iter()
            .zip(&self.lengths)
            .map(|(&v, &l)| v.min(l - v).max(0.0))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Representative of `delta` modulo one in `(-1/2, 1/2]`.
pub fn wrap_centered(delta: f64) -> f64 {
    let mut r = delta.rem_euclid(1.0);
    if r > 0.5 {
        r -= 1.0;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TagRule {
    Left,
    #[default]
    Midpoint,
}

impl std::str::FromStr for TagRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Self::Left),
            "midpoint" => Ok(Self::Midpoint),
            other => Err(Error::InvalidArgument(format!("unknown tag rule `{other}`"))),
        }
    }
}

/// Uniform product partition of a domain into `N = m^n` congruent cells.
#[derive(Debug, Clone, PartialEq)]
pub struct TaggedPartition {
    domain: Domain,
    len: usize,
    per_axis: usize,
    rule: TagRule,
    tags: Vec<f64>,
}

impl TaggedPartition {
    pub fn uniform(domain: Domain, n: usize, rule: TagRule) -> Result<Self> {
        let dim = domain.dim();
        if n == 0 {
            return Err(Error::NonConformingN { n, dim });
        }
        let per_axis = integer_root(n, dim).ok_or(Error::NonConformingN { n, dim })?;
        let offset = match rule {
            TagRule::Left => 0.0,
            TagRule::Midpoint => 0.5,
        };
        let mut tags = Vec::with_capacity(n * dim);
        let mut index = vec![0usize; dim];
        for cell in 0..n {
            unravel(cell, per_axis, &mut index);
            for (k, &ik) in index.iter().enumerate() {
                let side = domain.lengths[k] / per_axis as f64;
                tags.push((ik as f64 + offset) * side);
            }
        }
        Ok(Self { domain, len: n, per_axis, rule, tags })
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

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn per_axis(&self) -> usize {
        self.per_axis
    }

    pub fn tag_rule(&self) -> TagRule {
        self.rule
    }

    pub fn tag(&self, i: usize) -> &[f64] {
        let n = self.dim();
        &self.tags[i * n..(i + 1) * n]
    }

    pub fn tags(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.tags.chunks_exact(self.dim())
    }

    /// Diameter exponent `gamma = 1/n`.
    pub fn gamma(&self) -> f64 {
        1.0 / self.dim() as f64
    }

    pub fn cell_measure(&self) -> f64 {
        self.domain.measure() / self.len as f64
    }

    /// Lower and upper corners of cell `i`.
    pub fn cell_bounds(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        let mut index = vec![0usize; self.dim()];
        unravel(i, self.per_axis, &mut index);
        let lower = index
            .iter()
            .zip(&self.domain.lengths)
            .map(|(&ik, &l)| ik as f64 * l / self.per_axis as f64)
            .collect::<Vec<_>>();
        let upper = index
            .iter()
            .zip(&self.domain.lengths)
            .map(|(&ik, &l)| (ik + 1) as f64 * l / self.per_axis as f64)
            .collect();
        (lower, upper)
    }

    /// Diameter of a cell in the domain metric (all cells are congruent).
    pub fn cell_diameter(&self) -> f64 {
        let m = self.per_axis as f64;
        self.domain
            .lengths
            .iter()
            .map(|&l| {
                let side = l / m;
                if self.domain.is_periodic() { side.min(0.5 * l) } else { side }
            })
            .map(|s| s * s)
            .sum::<f64>()
            .sqrt()
    }

    /// Constant `C_Omega` with `diam(cell) <= C_Omega / N^gamma`.
    pub fn c_omega(&self) -> f64 {
        self.domain.lengths.iter().map(|l| l * l).sum::<f64>().sqrt()
    }

    /// Index of the cell containing `x`; points on a shared face go to the
    /// lower-index cell.
    pub fn cell_of(&self, x: &[f64]) -> usize {
        let m = self.per_axis;
        let mut flat = 0usize;
        for (k, &l) in self.domain.lengths.iter().enumerate() {
            let mut v = x[k];
            if self.domain.is_periodic() {
                v = v.rem_euclid(l);
            }
            flat = flat * m + axis_index(v, l, m);
        }
        flat
    }

    /// Cell index for a 1-D coordinate; the hot path of reconstruction.
    #[inline]
    pub fn cell_of_1d(&self, x: f64) -> usize {
        let l = self.domain.lengths[0];
        let v = if self.domain.is_periodic() { x.rem_euclid(l) } else { x };
        axis_index(v, l, self.per_axis)
    }
}

/// Index of the half-open cell `[k h, (k + 1) h)` holding `v`, `h = l / m`,
/// with the last cell closed.  Compares against the same products used for
/// the tags so left tags land in their own cell.
fn axis_index(v: f64, l: f64, m: usize) -> usize {
    let side = l / m as f64;
    let mut idx = ((v / side).floor().max(0.0) as usize).min(m - 1);
    if idx + 1 < m && v >= (idx + 1) as f64 * side {
        idx += 1;
    } else if idx > 0 && v < idx as f64 * side {
        idx -= 1;
    }
    idx
}

fn unravel(mut flat: usize, m: usize, out: &mut [usize]) {
    for slot in out.iter_mut().rev() {
        *slot = flat % m;
        flat /= m;
    }
}

fn integer_root(n: usize, dim: usize) -> Option<usize> {
    let guess = (n as f64).powf(1.0 / dim as f64).round() as usize;
    (guess.saturating_sub(1)..=guess + 1).find(|&m| m > 0 && m.checked_pow(dim as u32) == Some(n))
}

/// The inner region `{x : d(x, boundary) >= epsilon}`.
#[derive(Debug, Clone)]
pub struct InteriorRegion {
    domain: Domain,
    epsilon: f64,
}

impl InteriorRegion {
    pub fn new(domain: Domain, epsilon: f64) -> Self {
        Self { domain, epsilon }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.domain.distance_to_boundary(x) >= self.epsilon
    }

    /// Measure of the boundary layer `Omega \ Omega_epsilon`.
    pub fn boundary_layer_measure(&self) -> f64 {
        if self.domain.is_periodic() {
            return 0.0;
        }
        let inner: f64 = self.domain.lengths.iter().map(|&l| (l - 2.0 * self.epsilon).max(0.0)).product();
        self.domain.measure() - inner
    }

    /// Ratio `nu(Omega \ Omega_epsilon) / epsilon^n` at this margin.
    pub fn c_boundary(&self) -> f64 {
        if self.domain.is_periodic() {
            return 0.0;
        }
        self.boundary_layer_measure() / self.epsilon.powi(self.domain.dim() as i32)
    }
}

/// `(1/N) sum_i f(x_i)`.
pub fn riemann_sum(partition: &TaggedPartition, f: &dyn Field) -> Vec<f64> {
    let d = f.dim();
    let mut total = vec![0.0; d];
    let mut value = vec![0.0; d];
    for x in partition.tags() {
        f.eval_into(x, &mut value);
        for (acc, v) in total.iter_mut().zip(&value) {
            *acc += v;
        }
    }
    let inv = 1.0 / partition.len() as f64;
    total.iter_mut().for_each(|v| *v *= inv);
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiemannCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub tolerance: f64,
    pub holds: bool,
}

/// Compares the Riemann sum of a Lipschitz field against its integral.
///
/// The caller vouches that `lip_f` is a Lipschitz constant of `f` in the
/// domain metric; the check is meaningless otherwise.
pub fn check_riemann_bound(
    partition: &TaggedPartition,
    f: &dyn Field,
    lip_f: f64,
    quad: &crate::quadrature::QuadratureGrid,
) -> RiemannCheck {
    let exact = quad.integrate(f);
    let approx = riemann_sum(partition, f);
    let lhs = exact.iter().zip(&approx).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let rhs = partition.c_omega() * lip_f / (partition.len() as f64).powf(partition.gamma());
    let tolerance = quad.lipschitz_error_bound(lip_f) + 1e-12;
    RiemannCheck { lhs, rhs, tolerance, holds: lhs <= rhs + tolerance }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiemannRow {
    pub label: String,
    pub particles: usize,
    pub check: RiemannCheck,
}

/// [`check_riemann_bound`] for every function of `family` and every `N`.
pub fn check_riemann_family(
    domain: &Domain,
    sweep: &[usize],
    rule: TagRule,
    family: &[crate::field::LipschitzSample],
    quad: &crate::quadrature::QuadratureGrid,
) -> Result<Vec<RiemannRow>> {
    let mut rows = Vec::with_capacity(sweep.len() * family.len());
    for &particles in sweep {
        let partition = TaggedPartition::uniform(domain.clone(), particles, rule)?;
        for sample in family {
            rows.push(RiemannRow {
                label: sample.label.clone(),
                particles,
                check: check_riemann_bound(&partition, sample.field.as_ref(), sample.lipschitz, quad),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FnField;

    #[test]
    fn interval_midpoint_four_cells() {
        let p = TaggedPartition::uniform(Domain::unit_interval(), 4, TagRule::Midpoint).unwrap();
        let tags: Vec<f64> = p.tags().map(|t| t[0]).collect();
        assert_eq!(tags, vec![0.125, 0.375, 0.625, 0.875]);
        assert_eq!(p.cell_bounds(1), (vec![0.25], vec![0.5]));
        assert_eq!(p.cell_of(&[0.5]), 2);
        assert_eq!(p.cell_of(&[0.49]), 1);
        assert_eq!(p.cell_of(&[1.0]), 3);
        assert_eq!(p.cell_of(&[0.0]), 0);
    }

    #[test]
    fn single_cell_circle() {
        let p = TaggedPartition::uniform(Domain::circle(), 1, TagRule::Left).unwrap();
        assert_eq!(p.tag(0), &[0.0]);
        assert!(p.cell_diameter() <= p.c_omega().min(0.5));
    }

    #[test]
    fn torus2_sixteen_cells() {
        let p = TaggedPartition::uniform(Domain::torus(2), 16, TagRule::Midpoint).unwrap();
        assert_eq!(p.per_axis(), 4);
        assert_eq!(p.gamma(), 0.5);
        let diam = (2.0f64).sqrt() / 4.0;
        assert!((p.cell_diameter() - diam).abs() < 1e-15);
        assert!((p.c_omega() - 2f64.sqrt()).abs() < 1e-15);
        assert!(p.cell_diameter() <= p.c_omega() / 4.0 + 1e-15);
        for i in 0..16 {
            assert_eq!(p.cell_of(p.tag(i)), i);
        }
    }

    #[test]
    fn nonconforming_n_rejected() {
        let err = TaggedPartition::uniform(Domain::torus(2), 15, TagRule::Midpoint).unwrap_err();
        assert_eq!(err, Error::NonConformingN { n: 15, dim: 2 });
    }

    #[test]
    fn riemann_sum_examples() {
        let p = TaggedPartition::uniform(Domain::unit_interval(), 4, TagRule::Midpoint).unwrap();
        let square = FnField::scalar(|x| x[0] * x[0]);
        let s = riemann_sum(&p, &square)[0];
        // (1/4) * (1 + 9 + 25 + 49) / 64
        assert!((s - 84.0 / 256.0).abs() < 1e-15);
        assert!((s - 1.0 / 3.0).abs() <= 2.0 / 4.0);

        let circle = TaggedPartition::uniform(Domain::circle(), 8, TagRule::Midpoint).unwrap();
        let sine = FnField::scalar(|x| (2.0 * std::f64::consts::PI * x[0]).sin());
        assert!(riemann_sum(&circle, &sine)[0].abs() < 1e-15);
    }

    #[test]
    fn torus_distance_wraps() {
        let d = Domain::circle();
        assert!((d.distance(&[0.05], &[0.95]) - 0.1).abs() < 1e-15);
        assert!((wrap_centered(0.7) + 0.3).abs() < 1e-15);
        assert_eq!(wrap_centered(0.5), 0.5);
    }

    #[test]
    fn interior_region_constants() {
        let interval = InteriorRegion::new(Domain::unit_interval(), 0.1);
        assert!((interval.boundary_layer_measure() - 0.2).abs() < 1e-15);
        assert!((interval.c_boundary() - 2.0).abs() < 1e-12);
        assert!(!interval.contains(&[0.05]));
        assert!(interval.contains(&[0.5]));
        let torus = InteriorRegion::new(Domain::circle(), 0.1);
        assert_eq!(torus.c_boundary(), 0.0);
        assert!(torus.contains(&[0.0]));
    }
}
