//! The double-mollified interaction kernel
//! `sigma(x, x') = sum_alpha int eta(x - x'') a_alpha(x'') D^alpha eta(x'' - x') dx''`
//! and the operators built from it.

use std::io::{self, Read, Write};
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

pub use crate::quadrature::QuadratureGrid;

use crate::error::{Error, Result};
use crate::field::Field;
use crate::geometry::TaggedPartition;
use crate::pde_model::PdeModel;
use crate::mollifier::{convolve_samples, convolve_samples_at, sample_on_nodes, Mollifier};
use crate::particle::PiecewiseField;
use crate::quadrature::integrate_adaptive;

#[derive(Debug, Clone, PartialEq)]
pub enum BlockStorage {
    /// `N x N` blocks, row-major, each block `d x d` row-major.
    Dense(Vec<f64>),
    /// Translation-invariant kernel on a uniform circle grid: block `(i, j)`
    /// is stored at offset `(i - j) mod N`.
    Circulant(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct KernelMatrix {
    partition: Arc<TaggedPartition>,
    epsilon: f64,
    state_dim: usize,
    storage: BlockStorage,
    sup_norm: f64,
    lip_estimate: f64,
}

impl KernelMatrix {
    fn from_storage(partition: Arc<TaggedPartition>, epsilon: f64, state_dim: usize, storage: BlockStorage) -> Self {
        let mut k = Self { partition, epsilon, state_dim, storage, sup_norm: 0.0, lip_estimate: 0.0 };
        k.sup_norm = k.compute_sup();
        k.lip_estimate = k.compute_lipschitz();
        k
    }

    /// Builds a kernel matrix from explicit dense blocks.
    pub fn from_dense(partition: Arc<TaggedPartition>, epsilon: f64, state_dim: usize, blocks: Vec<f64>) -> Result<Self> {
        let n = partition.len();
        if blocks.len() != n * n * state_dim * state_dim {
            return Err(Error::DimensionMismatch { expected: n * n * state_dim * state_dim, got: blocks.len() });
        }
        Ok(Self::from_storage(partition, epsilon, state_dim, BlockStorage::Dense(blocks)))
    }

    pub fn partition(&self) -> &Arc<TaggedPartition> {
        &self.partition
    }

    pub fn len(&self) -> usize {
        self.partition.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partition.is_empty()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn storage(&self) -> &BlockStorage {
        &self.storage
    }

    /// Largest block norm over all pairs of tags.
    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    /// Largest difference quotient over adjacent tag pairs in either slot.
    pub fn lip_estimate(&self) -> f64 {
        self.lip_estimate
    }

    pub fn block(&self, i: usize, j: usize) -> &[f64] {
        let dd = self.state_dim * self.state_dim;
        let n = self.len();
        let index = match &self.storage {
            BlockStorage::Dense(_) => i * n + j,
            BlockStorage::Circulant(_) => (i + n - j) % n,
        };
        let data = match &self.storage {
            BlockStorage::Dense(v) | BlockStorage::Circulant(v) => v,
        };
        &data[index * dd..(index + 1) * dd]
    }

    /// All blocks in row-major `(i, j)` order.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.len();
        let mut out = Vec::with_capacity(n * n * self.state_dim * self.state_dim);
        for i in 0..n {
            for j in 0..n {
                out.extend_from_slice(self.block(i, j));
            }
        }
        out
    }

    fn compute_sup(&self) -> f64 {
        let data = match &self.storage {
            BlockStorage::Dense(v) | BlockStorage::Circulant(v) => v,
        };
        data.chunks_exact(self.state_dim * self.state_dim).map(block_norm).fold(0.0, f64::max)
    }

    fn compute_lipschitz(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return 0.0;
        }
        let p = &self.partition;
        let domain = p.domain();
        let m = p.per_axis();
        let neighbour = |i: usize| -> Option<usize> {
            if (i + 1).is_multiple_of(m) {
                if domain.is_periodic() { Some(i + 1 - m) } else { None }
            } else {
                Some(i + 1)
            }
        };
        let mut best: f64 = 0.0;
        let dd = self.state_dim * self.state_dim;
        let mut diff = vec![0.0; dd];
        match &self.storage {
            BlockStorage::Circulant(v) => {
                let h = domain.distance(p.tag(0), p.tag(1));
                for o in 0..n {
                    let next = (o + 1) % n;
                    for c in 0..dd {
                        diff[c] = v[next * dd + c] - v[o * dd + c];
                    }
                    best = best.max(block_norm(&diff) / h);
                }
            }
            BlockStorage::Dense(_) => {
                for i in 0..n {
                    let Some(ni) = neighbour(i) else { continue };
                    let h = domain.distance(p.tag(i), p.tag(ni));
                    for j in 0..n {
                        let (a, b) = (self.block(i, j), self.block(ni, j));
                        let (c, e) = (self.block(j, i), self.block(j, ni));
                        for q in 0..dd {
                            diff[q] = b[q] - a[q];
                        }
                        best = best.max(block_norm(&diff) / h);
                        for q in 0..dd {
                            diff[q] = e[q] - c[q];
                        }
                        best = best.max(block_norm(&diff) / h);
                    }
                }
            }
        }
        best
    }
}

fn block_norm(b: &[f64]) -> f64 {
    if b.len() == 1 {
        b[0].abs()
    } else {
        b.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_setup(model: &PdeModel, m: &Mollifier, partition: &TaggedPartition, quad: &QuadratureGrid) -> Result<()> {
    let n = model.domain().dim();
    for got in [m.dim(), partition.dim(), quad.domain().dim()] {
        if got != n {
            return Err(Error::DimensionMismatch { expected: n, got });
        }
    }
    if quad.domain().is_periodic() && m.epsilon() >= 0.5 {
        return Err(Error::EpsilonTooLarge { epsilon: m.epsilon(), limit: 0.5 });
    }
    if model.order() > m.max_order() {
        return Err(Error::OrderTooHigh { requested: model.order(), max: m.max_order() });
    }
    quad.check_resolution(m.epsilon())
}

/// `a_alpha[t, state](x_k)` at every node, laid out `[term][node][d x d]`.
pub fn coefficient_samples(model: &PdeModel, t: f64, state: &dyn Field, quad: &QuadratureGrid) -> Vec<f64> {
    let dd = model.state_dim() * model.state_dim();
    let mut out = vec![0.0; model.coefficients().len() * quad.len() * dd];
    for (c, chunk) in model.coefficients().iter().zip(out.chunks_exact_mut(quad.len() * dd)) {
        if let Some(matrix) = c.constant_matrix() {
            chunk.chunks_exact_mut(dd).for_each(|slot| slot.copy_from_slice(matrix));
        } else {
            chunk.par_chunks_mut(dd).enumerate().for_each(|(k, slot)| c.evaluate(t, state, quad.node(k), slot));
        }
    }
    out
}

/// Dense quadrature assembly of every block.
pub fn assemble_kernel(
    model: &PdeModel,
    m: &Mollifier,
    partition: &Arc<TaggedPartition>,
    t: f64,
    state: &PiecewiseField,
    quad: &QuadratureGrid,
) -> Result<KernelMatrix> {
    check_setup(model, m, partition, quad)?;
    let d = model.state_dim();
    if state.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: state.dim() });
    }
    let dd = d * d;
    let n = partition.len();
    let eps = m.epsilon();
    let domain = quad.domain().clone();
    let coefficients = coefficient_samples(model, t, state, quad);
    let alphas: Vec<Vec<usize>> = model.coefficients().iter().map(|c| c.alpha().to_vec()).collect();
    let mlen = quad.len();
    let weight = quad.weight();
    let dim = domain.dim();

    let mut blocks = vec![0.0; n * n * dd];
    blocks.par_chunks_mut(n * dd).enumerate().try_for_each(|(i, row)| -> Result<()> {
        let xi = partition.tag(i);
        let mut delta = vec![0.0; dim];
        let mut window: Vec<(usize, f64)> = Vec::new();
        quad.for_each_in_window(xi, eps, |k| {
            domain.difference(xi, quad.node(k), &mut delta);
            let w = m.eval(&delta);
            if w != 0.0 {
                window.push((k, w));
            }
        });
        let mut acc = vec![0.0; dd];
        for j in 0..n {
            let xj = partition.tag(j);
            if domain.distance(xi, xj) >= 2.0 * eps {
                continue;
            }
            acc.iter_mut().for_each(|v| *v = 0.0);
            for &(k, w) in &window {
                let node = quad.node(k);
                domain.difference(node, xj, &mut delta);
                if delta.iter().map(|v| v * v).sum::<f64>() >= eps * eps {
                    continue;
                }
                for (term, alpha) in alphas.iter().enumerate() {
                    let dphi = m.eval_derivative(alpha, &delta)?;
                    if dphi == 0.0 {
                        continue;
                    }
                    let a = &coefficients[(term * mlen + k) * dd..(term * mlen + k + 1) * dd];
                    let scale = w * dphi;
                    acc.iter_mut().zip(a).for_each(|(s, v)| *s += scale * v);
                }
            }
            let slot = &mut row[j * dd..(j + 1) * dd];
            slot.iter_mut().zip(&acc).for_each(|(s, v)| *s = v * weight);
        }
        Ok(())
    })?;
    Ok(KernelMatrix::from_storage(partition.clone(), eps, d, BlockStorage::Dense(blocks)))
}

/// Tabulated `s -> sum_alpha a_alpha (eta * D^alpha eta)(s)` on
/// `[-2 epsilon, 2 epsilon]` for constant-coefficient models in one
/// dimension, with cubic Hermite interpolation.
#[derive(Debug, Clone)]
pub struct ConvolutionProfile {
    epsilon: f64,
    state_dim: usize,
    spacing: f64,
    /// Per term: the `d x d` coefficient, values and slopes on the grid.
    terms: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

const PROFILE_INTERVALS: usize = 1024;

impl ConvolutionProfile {
    pub fn new(model: &PdeModel, m: &Mollifier) -> Result<Self> {
        if !model.is_constant_coefficient() {
            return Err(Error::NotConstantCoefficient);
        }
        if model.domain().dim() != 1 || m.dim() != 1 {
            return Err(Error::Unsupported("convolution profiles are one-dimensional".into()));
        }
        if model.order() + 1 > m.max_order() {
            return Err(Error::OrderTooHigh { requested: model.order() + 1, max: m.max_order() });
        }
        let eps = m.epsilon();
        let spacing = 4.0 * eps / PROFILE_INTERVALS as f64;
        let mut terms = Vec::new();
        for c in model.coefficients() {
            let order = c.order();
            let scale = eps.powi(-(2 + order as i32));
            let mut values = Vec::with_capacity(PROFILE_INTERVALS + 1);
            let mut slopes = Vec::with_capacity(PROFILE_INTERVALS + 1);
            for step in 0..=PROFILE_INTERVALS {
                let s = -2.0 * eps + step as f64 * spacing;
                let lo = (-eps).max(s - eps);
                let hi = eps.min(s + eps);
                if lo >= hi {
                    values.push(0.0);
                    slopes.push(0.0);
                    continue;
                }
                let inner = |u: f64| m.derivative_1d(order, u).unwrap_or(0.0);
                let v = integrate_adaptive(|u| m.eval_1d(s - u) * inner(u), lo, hi, 1e-13, 1e-15 * scale);
                let dv = integrate_adaptive(
                    |u| m.derivative_1d(1, s - u).unwrap_or(0.0) * inner(u),
                    lo,
                    hi,
                    1e-13,
                    1e-15 * scale / eps,
                );
                values.push(v);
                slopes.push(dv);
            }
            values[0] = 0.0;
            values[PROFILE_INTERVALS] = 0.0;
            slopes[0] = 0.0;
            slopes[PROFILE_INTERVALS] = 0.0;
            symmetrize(&mut values, &mut slopes, order);
            terms.push((c.constant_matrix().unwrap().to_vec(), values, slopes));
        }
        Ok(Self { epsilon: eps, state_dim: model.state_dim(), spacing, terms })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Block value at separation `s` on the real line.
    pub fn eval_into(&self, s: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if s.abs() >= 2.0 * self.epsilon {
            return;
        }
        let pos = (s + 2.0 * self.epsilon) / self.spacing;
        let cell = (pos.floor() as usize).min(PROFILE_INTERVALS - 1);
        let tau = pos - cell as f64;
        let h = self.spacing;
        let (h00, h10, h01, h11) = (
            (1.0 + 2.0 * tau) * (1.0 - tau).powi(2),
            tau * (1.0 - tau).powi(2),
            tau * tau * (3.0 - 2.0 * tau),
            tau * tau * (tau - 1.0),
        );
        for (matrix, values, slopes) in &self.terms {
            let v = h00 * values[cell] + h10 * h * slopes[cell] + h01 * values[cell + 1] + h11 * h * slopes[cell + 1];
            out.iter_mut().zip(matrix).for_each(|(o, a)| *o += a * v);
        }
    }

    /// Block value for a separation on the circle, summing the periodic images.
    pub fn eval_periodic_into(&self, s: f64, out: &mut [f64]) {
        let mut tmp = vec![0.0; out.len()];
        out.iter_mut().for_each(|v| *v = 0.0);
        for shift in [-1.0, 0.0, 1.0] {
            let image = s + shift;
            if image.abs() < 2.0 * self.epsilon {
                self.eval_into(image, &mut tmp);
                out.iter_mut().zip(&tmp).for_each(|(o, v)| *o += v);
            }
        }
    }
}

/// Forces the exact parity `p(-s) = (-1)^order p(s)` on the symmetric grid.
fn symmetrize(values: &mut [f64], slopes: &mut [f64], order: usize) {
    let sign = if order.is_multiple_of(2) { 1.0 } else { -1.0 };
    let len = values.len();
    for i in 0..len / 2 {
        let j = len - 1 - i;
        let v = 0.5 * (values[i] + sign * values[j]);
        values[i] = v;
        values[j] = sign * v;
        let s = 0.5 * (slopes[i] - sign * slopes[j]);
        slopes[i] = s;
        slopes[j] = -sign * s;
    }
    let mid = len / 2;
    if sign < 0.0 {
        values[mid] = 0.0;
    } else {
        slopes[mid] = 0.0;
    }
}

/// Circulant kernel from a profile table on a uniform circle partition.
pub fn assemble_fast_constant(
    model: &PdeModel,
    m: &Mollifier,
    partition: &Arc<TaggedPartition>,
    profile: &ConvolutionProfile,
) -> Result<KernelMatrix> {
    if !model.is_constant_coefficient() {
        return Err(Error::NotConstantCoefficient);
    }
    if partition.dim() != 1 || !partition.domain().is_periodic() {
        return Err(Error::Unsupported("the profile path needs a uniform circle partition".into()));
    }
    if m.epsilon() >= 0.5 {
        return Err(Error::EpsilonTooLarge { epsilon: m.epsilon(), limit: 0.5 });
    }
    let d = profile.state_dim();
    let dd = d * d;
    let n = partition.len();
    let mut blocks = vec![0.0; n * dd];
    for (o, slot) in blocks.chunks_exact_mut(dd).enumerate() {
        let s = crate::geometry::wrap_centered(o as f64 / n as f64);
        profile.eval_periodic_into(s, slot);
    }
    Ok(KernelMatrix::from_storage(partition.clone(), m.epsilon(), d, BlockStorage::Circulant(blocks)))
}

/// `out_i = (1/N) sum_j sigma(x_i, x_j) values_j`.
pub fn apply_discrete_operator(k: &KernelMatrix, values: &[f64]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; values.len()];
    apply_discrete_operator_into(k, values, &mut out)?;
    Ok(out)
}

pub fn apply_discrete_operator_into(k: &KernelMatrix, values: &[f64], out: &mut [f64]) -> Result<()> {
    let n = k.len();
    let d = k.state_dim;
    if values.len() != n * d || out.len() != n * d {
        return Err(Error::DimensionMismatch { expected: n * d, got: values.len().min(out.len()) });
    }
    let inv = 1.0 / n as f64;
    match &k.storage {
        BlockStorage::Circulant(table) if d == 1 => {
            let support: Vec<(usize, f64)> = table.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
            out.par_iter_mut().enumerate().for_each(|(i, slot)| {
                let mut acc = 0.0;
                for &(o, w) in &support {
                    let j = if i >= o { i - o } else { i + n - o };
                    acc += w * values[j];
                }
                *slot = acc * inv;
            });
        }
        _ => {
            out.par_chunks_mut(d).enumerate().for_each(|(i, slot)| {
                slot.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..n {
                    let b = k.block(i, j);
                    if b.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let vj = &values[j * d..(j + 1) * d];
                    for r in 0..d {
                        slot[r] += b[r * d..(r + 1) * d].iter().zip(vj).map(|(a, v)| a * v).sum::<f64>();
                    }
                }
                slot.iter_mut().for_each(|v| *v *= inv);
            });
        }
    }
    Ok(())
}

/// Two-step factorisation `E diag(a) F` of the quadrature kernel on a
/// uniform 1-D grid whose node count is a multiple of the cell count.
///
/// The inner factor `F_kj = D^alpha eta(x_k - x_j) / N` and the outer factor
/// `E_ik = eta(x_i - x_k) / M` depend only on index offsets, so they are
/// tabulated once; applying the operator costs `O(N M epsilon)` per call
/// and never forms the `N x N` matrix.  On periodic grids where that is
/// more than a few FFTs of length `M`, both factors are applied as circular
/// convolutions instead.
#[derive(Debug, Clone)]
pub struct FactoredOperator {
    cells: usize,
    nodes: usize,
    ratio: usize,
    state_dim: usize,
    periodic: bool,
    offset_lo: i64,
    outer: Vec<f64>,
    inner: Vec<Vec<f64>>,
    derivative_l1: Vec<f64>,
    peak: f64,
    spectral: Option<Spectral>,
}

/// Spectra of the wrapped offset tables, scaled by the inverse transform
/// length.
#[derive(Clone)]
struct Spectral {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    inner: Vec<Vec<Complex<f64>>>,
    outer: Vec<Complex<f64>>,
}

impl std::fmt::Debug for Spectral {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Spectral").field("len", &self.outer.len()).field("terms", &self.inner.len()).finish()
    }
}

impl Spectral {
    fn new(nodes: usize, offset_lo: i64, outer: &[f64], inner: &[Vec<f64>]) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(nodes);
        let inverse = planner.plan_fft_inverse(nodes);
        let scale = 1.0 / nodes as f64;
        let spectrum = |table: &[f64], conjugate: bool| {
            let mut wrapped = vec![Complex::new(0.0, 0.0); nodes];
            for (idx, &w) in table.iter().enumerate() {
                wrapped[(offset_lo + idx as i64).rem_euclid(nodes as i64) as usize].re += w * scale;
            }
            forward.process(&mut wrapped);
            if conjugate {
                wrapped.iter_mut().for_each(|z| *z = z.conj());
            }
            wrapped
        };
        let inner = inner.iter().map(|t| spectrum(t, true)).collect();
        let outer = spectrum(outer, false);
        Self { forward, inverse, inner, outer }
    }

    fn worthwhile(cells: usize, nodes: usize, window: usize, terms: usize) -> bool {
        let direct = (cells * window * (terms + 1)) as f64;
        let transforms = (2 * terms + 3) as f64 * nodes as f64 * (nodes as f64).log2();
        direct > 4.0 * transforms
    }
}

impl FactoredOperator {
    pub fn new(model: &PdeModel, m: &Mollifier, partition: &TaggedPartition, quad: &QuadratureGrid) -> Result<Self> {
        check_setup(model, m, partition, quad)?;
        if partition.dim() != 1 {
            return Err(Error::Unsupported("factored kernels are one-dimensional".into()));
        }
        let cells = partition.len();
        let nodes = quad.len();
        if !nodes.is_multiple_of(cells) {
            return Err(Error::InvalidArgument(format!(
                "quadrature size {nodes} is not a multiple of the cell count {cells}"
            )));
        }
        let ratio = nodes / cells;
        let mf = nodes as f64;
        let shift = partition.tag(0)[0] * mf - 0.5;
        let reach = m.epsilon() * mf;
        let offset_lo = (-reach - shift).floor() as i64;
        let offset_hi = (reach - shift).ceil() as i64;
        let outer: Vec<f64> = (offset_lo..=offset_hi).map(|o| m.eval_1d((o as f64 + shift) / mf)).collect();
        let mut inner = Vec::new();
        let mut derivative_l1 = Vec::new();
        for c in model.coefficients() {
            let order = c.order();
            let table = (offset_lo..=offset_hi)
                .map(|o| m.derivative_1d(order, -(o as f64 + shift) / mf))
                .collect::<Result<Vec<_>>>()?;
            inner.push(table);
            derivative_l1.push(m.derivative_l1_norm(&[order])?);
        }
        let periodic = partition.domain().is_periodic();
        let spectral = (periodic && Spectral::worthwhile(cells, nodes, outer.len(), inner.len()))
            .then(|| Spectral::new(nodes, offset_lo, &outer, &inner));
        Ok(Self {
            cells,
            nodes,
            ratio,
            state_dim: model.state_dim(),
            periodic,
            offset_lo,
            outer,
            inner,
            derivative_l1,
            peak: m.peak(),
            spectral,
        })
    }

    /// Same operator without the FFT path.
    pub fn direct(mut self) -> Self {
        self.spectral = None;
        self
    }

    pub fn is_spectral(&self) -> bool {
        self.spectral.is_some()
    }

    /// Upper bound of the kernel's sup norm for coefficient samples `coeffs`
    /// (as produced by [`coefficient_samples`]).
    pub fn sup_bound(&self, coeffs: &[f64]) -> f64 {
        let dd = self.state_dim * self.state_dim;
        coeffs
            .chunks_exact(self.nodes * dd)
            .zip(&self.derivative_l1)
            .map(|(chunk, l1)| chunk.chunks_exact(dd).map(block_norm).fold(0.0, f64::max) * l1 * self.peak)
            .sum()
    }

    /// Writes `(1/N) sum_j sigma(x_i, x_j) xi_j` for every cell.
    pub fn apply(&self, coeffs: &[f64], xi: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.state_dim;
        let dd = d * d;
        if xi.len() != self.cells * d || out.len() != self.cells * d {
            return Err(Error::DimensionMismatch { expected: self.cells * d, got: xi.len() });
        }
        if coeffs.len() != self.inner.len() * self.nodes * dd {
            return Err(Error::DimensionMismatch { expected: self.inner.len() * self.nodes * dd, got: coeffs.len() });
        }
        match &self.spectral {
            Some(spectral) => self.apply_spectral(spectral, coeffs, xi, out),
            None => self.apply_direct(coeffs, xi, out),
        }
        Ok(())
    }

    fn apply_spectral(&self, spectral: &Spectral, coeffs: &[f64], xi: &[f64], out: &mut [f64]) {
        let d = self.state_dim;
        let dd = d * d;
        let nodes = self.nodes;
        let zero = Complex::new(0.0, 0.0);
        let inv_n = 1.0 / self.cells as f64;
        let mut scratch = vec![zero; spectral.forward.get_inplace_scratch_len().max(spectral.inverse.get_inplace_scratch_len())];
        let inv_m = 1.0 / nodes as f64;
        let input: Vec<Vec<Complex<f64>>> = (0..d)
            .map(|c| {
                let mut s = vec![zero; nodes];
                for j in 0..self.cells {
                    s[j * self.ratio].re = xi[j * d + c];
                }
                spectral.forward.process_with_scratch(&mut s, &mut scratch);
                s
            })
            .collect();
        let mut mid = vec![vec![zero; nodes]; d];
        let mut u = vec![zero; nodes];
        for (term, kernel) in spectral.inner.iter().enumerate() {
            for c in 0..d {
                u.iter_mut().zip(&input[c]).zip(kernel).for_each(|((u, s), k)| *u = s * k);
                spectral.inverse.process_with_scratch(&mut u, &mut scratch);
                let a = &coeffs[term * nodes * dd..(term + 1) * nodes * dd];
                for (row, mid_row) in mid.iter_mut().enumerate() {
                    for (k, slot) in mid_row.iter_mut().enumerate() {
                        slot.re += inv_n * a[k * dd + row * d + c] * u[k].re;
                    }
                }
            }
        }
        for (row, m) in mid.iter_mut().enumerate() {
            spectral.forward.process_with_scratch(m, &mut scratch);
            m.iter_mut().zip(&spectral.outer).for_each(|(z, k)| *z *= k);
            spectral.inverse.process_with_scratch(m, &mut scratch);
            for i in 0..self.cells {
                out[i * d + row] = m[i * self.ratio].re * inv_m;
            }
        }
    }

    fn apply_direct(&self, coeffs: &[f64], xi: &[f64], out: &mut [f64]) {
        let d = self.state_dim;
        let dd = d * d;
        let n = self.cells as i64;
        let r = self.ratio as i64;
        let mlen = self.nodes as i64;
        let lo = self.offset_lo;
        let hi = lo + self.outer.len() as i64 - 1;
        let inv_n = 1.0 / self.cells as f64;
        let inv_m = 1.0 / self.nodes as f64;

        let mut mid = vec![0.0; self.nodes * d];
        mid.par_chunks_mut(d).enumerate().for_each(|(k, slot)| {
            let k = k as i64;
            let j_lo = (k + lo).div_euclid(r) + i64::from((k + lo).rem_euclid(r) != 0);
            let j_hi = (k + hi).div_euclid(r);
            let mut u = [0.0f64; 8];
            for (term, table) in self.inner.iter().enumerate() {
                let u = &mut u[..d];
                u.iter_mut().for_each(|v| *v = 0.0);
                for j in j_lo..=j_hi {
                    let jj = if self.periodic {
                        j.rem_euclid(n)
                    } else if j < 0 || j >= n {
                        continue;
                    } else {
                        j
                    } as usize;
                    let w = table[(j * r - k - lo) as usize];
                    for c in 0..d {
                        u[c] += w * xi[jj * d + c];
                    }
                }
                let a = &coeffs[(term * self.nodes + k as usize) * dd..(term * self.nodes + k as usize + 1) * dd];
                for row in 0..d {
                    slot[row] += inv_n * (0..d).map(|c| a[row * d + c] * u[c]).sum::<f64>();
                }
            }
        });

        out.par_chunks_mut(d).enumerate().for_each(|(i, slot)| {
            slot.iter_mut().for_each(|v| *v = 0.0);
            let base = i as i64 * r;
            for (idx, &w) in self.outer.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let k = base - (lo + idx as i64);
                let kk = if self.periodic {
                    k.rem_euclid(mlen)
                } else if k < 0 || k >= mlen {
                    continue;
                } else {
                    k
                } as usize;
                for c in 0..d {
                    slot[c] += w * mid[kk * d + c];
                }
            }
            slot.iter_mut().for_each(|v| *v *= inv_m);
        });
    }

    /// Explicit blocks of the factored kernel, for inspection and dumps.
    pub fn materialize(&self, partition: &Arc<TaggedPartition>, epsilon: f64, coeffs: &[f64]) -> Result<KernelMatrix> {
        let d = self.state_dim;
        let n = self.cells;
        let mut blocks = vec![0.0; n * n * d * d];
        let mut unit = vec![0.0; n * d];
        let mut column = vec![0.0; n * d];
        for j in 0..n {
            for c in 0..d {
                unit.iter_mut().for_each(|v| *v = 0.0);
                unit[j * d + c] = n as f64;
                self.apply(coeffs, &unit, &mut column)?;
                for i in 0..n {
                    for row in 0..d {
                        blocks[((i * n + j) * d + row) * d + c] = column[i * d + row];
                    }
                }
            }
        }
        KernelMatrix::from_dense(partition.clone(), epsilon, d, blocks)
    }
}

/// `A_eps g = eta *_Omega A[t, state] (eta *_Omega g)` at the nodes of
/// `quad`, or at `points` when given.  The inner derivatives use the exact
/// derivatives of the mollifier.
pub fn smoothed_operator_apply(
    model: &PdeModel,
    m: &Mollifier,
    quad: &QuadratureGrid,
    t: f64,
    state: &dyn Field,
    g: &dyn Field,
    points: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let d = model.state_dim();
    if g.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: g.dim() });
    }
    if model.order() > m.max_order() {
        return Err(Error::OrderTooHigh { requested: model.order(), max: m.max_order() });
    }
    let dd = d * d;
    let samples = sample_on_nodes(g, quad);
    let coeffs = coefficient_samples(model, t, state, quad);
    let mut combined = vec![0.0; quad.len() * d];
    for (term, c) in model.coefficients().iter().enumerate() {
        let smoothed = convolve_samples(m, c.alpha(), quad, &samples, d)?;
        for k in 0..quad.len() {
            let a = &coeffs[(term * quad.len() + k) * dd..(term * quad.len() + k + 1) * dd];
            for row in 0..d {
                combined[k * d + row] += (0..d).map(|col| a[row * d + col] * smoothed[k * d + col]).sum::<f64>();
            }
        }
    }
    let zero = vec![0; m.dim()];
    match points {
        None => convolve_samples(m, &zero, quad, &combined, d),
        Some(p) => convolve_samples_at(m, &zero, quad, &combined, d, p),
    }
}

/// Writes a kernel as: `N` (u64), `d` (u64), `epsilon` (f64), model name
/// length (u64) and UTF-8 bytes, then all block entries row-major as f64,
/// everything little-endian.
pub fn write_dump(k: &KernelMatrix, model_name: &str, mut w: impl Write) -> io::Result<()> {
    w.write_all(&(k.len() as u64).to_le_bytes())?;
    w.write_all(&(k.state_dim as u64).to_le_bytes())?;
    w.write_all(&k.epsilon.to_le_bytes())?;
    w.write_all(&(model_name.len() as u64).to_le_bytes())?;
    w.write_all(model_name.as_bytes())?;
    for i in 0..k.len() {
        for j in 0..k.len() {
            for v in k.block(i, j) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelDump {
    pub n: usize,
    pub state_dim: usize,
    pub epsilon: f64,
    pub model_name: String,
    pub blocks: Vec<f64>,
}

pub fn read_dump(mut r: impl Read) -> io::Result<KernelDump> {
    let mut word = [0u8; 8];
    let mut next = |r: &mut dyn Read| -> io::Result<[u8; 8]> {
        r.read_exact(&mut word)?;
        Ok(word)
    };
    let n = u64::from_le_bytes(next(&mut r)?) as usize;
    let state_dim = u64::from_le_bytes(next(&mut r)?) as usize;
    let epsilon = f64::from_le_bytes(next(&mut r)?);
    let len = u64::from_le_bytes(next(&mut r)?) as usize;
    let mut name = vec![0u8; len];
    r.read_exact(&mut name)?;
    let model_name = String::from_utf8(name).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
    let count = n * n * state_dim * state_dim;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        blocks.push(f64::from_le_bytes(next(&mut r)?));
    }
    Ok(KernelDump { n, state_dim, epsilon, model_name, blocks })
}
