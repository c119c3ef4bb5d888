//! Graded tensor grids on the truncated half-space, fields and the basic
//! calculus on them: finite differences, weighted quadrature and parabolic
//! rescaling.
//!
//! The computational domain is
//!
//! ```text
//!     T^{n-1} × [0, x_max],    T = R / (Λ Z),
//! ```
//!
//! i.e. periodic tangential axes and a truncated vertical axis. The vertical
//! axis carries a graded mesh `x_i = x_max (i/M)^γ`, `i = 0..=M`, clustering
//! nodes at the degenerate boundary `x_n = 0` where the natural measures
//! `μ_σ = x_n^σ dx` concentrate their scale separation. Tangential axes are
//! uniform with `K` nodes and period `Λ`.
//!
//! Derivatives are polynomial-fitting finite differences (Fornberg weights)
//! on the actual node locations: interior stencils are centered, stencils
//! near `x_n = 0` and `x_n = x_max` shift one-sided. A stencil for the `k`-th
//! derivative with accuracy `a` uses `k + a` nodes vertically (formal order
//! `a`, exact on polynomials of degree `≤ k + a - 1`) and the symmetric
//! `2⌈k/2⌉ + a - 1` node stencil tangentially.
//!
//! Quadrature against `μ_σ` integrates `x_n^σ` times an interpolant of the
//! samples cell by cell in closed form, so the weight singularity at the
//! boundary is handled exactly and `∫_0^a x_n^σ dx_n` is reproduced to
//! rounding for every admissible `σ`.

use crate::error::{Error, Result};
use crate::geometry::rho;
use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

/// Maximum spatial dimension supported by the laboratory.
pub const MAX_DIM: usize = 3;

/// Choice of vertical measure `μ_σ = x_n^σ dx`, `σ > -1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightSpec {
    sigma: f64,
}

impl WeightSpec {
    /// Weight exponent for `μ_σ`; requires `σ > -1` so the measure is
    /// locally finite at the boundary.
    pub fn new(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma <= -1.0 {
            return Err(Error::InvalidParameter(format!(
                "weight exponent must be finite and > -1, got {sigma}"
            )));
        }
        Ok(WeightSpec { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// Subset of the domain over which to integrate.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    /// The whole truncated domain.
    Full,
    /// Vertical slab `lo ≤ x_n ≤ hi` (full tangential extent).
    VerticalSlab { lo: f64, hi: f64 },
    /// Quasimetric ball `ρ(center, ·) < radius` (node-indicator quadrature).
    Ball { center: Vec<f64>, radius: f64 },
}

/// Interpolant degree used by the cellwise-exact weighted quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureDegree {
    /// `x_n^σ` times the piecewise-linear interpolant (default).
    Linear,
    /// `x_n^σ` times a piecewise-cubic interpolant; used where smooth-field
    /// integrals need fourth-order accuracy.
    Cubic,
}

/// Outcome of [`Grid::rescale`]: the resampled field plus how many vertical
/// targets fell outside the grid and were clamped to `x_max`.
#[derive(Debug, Clone)]
pub struct RescaleOutcome {
    pub field: Field,
    pub clamped_nodes: usize,
}

type StencilKey = (usize, usize, usize); // (axis, derivative order, accuracy)

/// Per-node stencil table for one axis: `(window start, weights)` per node.
#[derive(Debug, Clone)]
struct AxisStencil {
    rows: Vec<(usize, Vec<f64>)>,
    /// For periodic axes the window start may be negative (wraps around).
    periodic_offsets: Option<Vec<isize>>,
}

/// Tensor grid on `T^{n-1} × [0, x_max]` with a graded vertical axis.
#[derive(Debug)]
pub struct Grid {
    n: usize,
    m_vertical: usize,
    x_max: f64,
    gamma: f64,
    k_tangential: usize,
    period: f64,
    vertical_nodes: Vec<f64>,
    stencils: Mutex<BTreeMap<StencilKey, Arc<AxisStencil>>>,
}

impl Grid {
    /// Build a grid.
    ///
    /// * `n` — spatial dimension, `1..=3`; axis `n-1` is vertical.
    /// * `m_vertical` — number of vertical cells `M ≥ 8`; nodes are
    ///   `x_i = x_max (i/M)^γ`, `i = 0..=M` (node 0 exactly on the boundary).
    /// * `k_tangential` — nodes per tangential axis (`≥ 4` when `n ≥ 2`).
    /// * `period` — tangential period `Λ > 0`.
    pub fn new(
        n: usize,
        m_vertical: usize,
        x_max: f64,
        gamma: f64,
        k_tangential: usize,
        period: f64,
    ) -> Result<Arc<Grid>> {
        if n == 0 || n > MAX_DIM {
            return Err(Error::InvalidParameter(format!(
                "dimension must be 1..={MAX_DIM}, got {n}"
            )));
        }
        if m_vertical < 8 {
            return Err(Error::InvalidParameter(format!(
                "need at least 8 vertical cells, got {m_vertical}"
            )));
        }
        if !(x_max > 0.0) || !x_max.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "vertical extent must be positive, got {x_max}"
            )));
        }
        if !(gamma >= 1.0) || !gamma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "grading exponent must be ≥ 1, got {gamma}"
            )));
        }
        if n > 1 && k_tangential < 4 {
            return Err(Error::InvalidParameter(format!(
                "need at least 4 tangential nodes, got {k_tangential}"
            )));
        }
        if n > 1 && (!(period > 0.0) || !period.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "tangential period must be positive, got {period}"
            )));
        }
        let m = m_vertical;
        let vertical_nodes: Vec<f64> = (0..=m)
            .map(|i| x_max * ((i as f64) / (m as f64)).powf(gamma))
            .collect();
        debug_assert!(vertical_nodes.windows(2).all(|w| w[1] > w[0]));
        Ok(Arc::new(Grid {
            n,
            m_vertical,
            x_max,
            gamma,
            k_tangential: if n > 1 { k_tangential } else { 1 },
            period: if n > 1 { period } else { 1.0 },
            vertical_nodes,
            stencils: Mutex::new(BTreeMap::new()),
        }))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn vertical_cells(&self) -> usize {
        self.m_vertical
    }

    pub fn vertical_nodes(&self) -> &[f64] {
        &self.vertical_nodes
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn grading(&self) -> f64 {
        self.gamma
    }

    pub fn tangential_nodes(&self) -> usize {
        self.k_tangential
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn tangential_spacing(&self) -> f64 {
        self.period / self.k_tangential as f64
    }

    /// Number of nodes along `axis` (tangential axes first, vertical last).
    pub fn axis_len(&self, axis: usize) -> usize {
        debug_assert!(axis < self.n);
        if axis + 1 == self.n {
            self.m_vertical + 1
        } else {
            self.k_tangential
        }
    }

    /// Total number of grid nodes.
    pub fn len(&self) -> usize {
        (0..self.n).map(|a| self.axis_len(a)).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Flat index of the node with per-axis indices `idx`.
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.n);
        let mut flat = 0;
        for (a, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.axis_len(a));
            flat = flat * self.axis_len(a) + i;
        }
        flat
    }

    /// Per-axis indices of the flat node index.
    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.n];
        for a in (0..self.n).rev() {
            let len = self.axis_len(a);
            idx[a] = flat % len;
            flat /= len;
        }
        idx
    }

    /// Coordinates of the node with per-axis indices `idx`.
    pub fn coords(&self, idx: &[usize]) -> Vec<f64> {
        debug_assert_eq!(idx.len(), self.n);
        let mut x = Vec::with_capacity(self.n);
        for (a, &i) in idx.iter().enumerate() {
            if a + 1 == self.n {
                x.push(self.vertical_nodes[i]);
            } else {
                x.push(i as f64 * self.tangential_spacing());
            }
        }
        x
    }

    /// Coordinates of the node with flat index `flat`.
    pub fn coords_flat(&self, flat: usize) -> Vec<f64> {
        self.coords(&self.multi_index(flat))
    }

    /// Vertical coordinate of the flat node index (cheap accessor).
    pub fn vertical_of_flat(&self, flat: usize) -> f64 {
        self.vertical_nodes[flat % (self.m_vertical + 1)]
    }

    pub(crate) fn check_same_grid(&self, f: &Field) -> Result<()> {
        if !std::ptr::eq(self, f.grid.as_ref()) && self.shape_signature() != f.grid.shape_signature()
        {
            return Err(Error::ShapeMismatch(
                "field belongs to a differently shaped grid".into(),
            ));
        }
        Ok(())
    }

    fn shape_signature(&self) -> (usize, usize, usize, u64, u64, u64) {
        (
            self.n,
            self.m_vertical,
            self.k_tangential,
            self.x_max.to_bits(),
            self.gamma.to_bits(),
            self.period.to_bits(),
        )
    }

    fn stencil(&self, axis: usize, k: usize, acc: usize) -> Arc<AxisStencil> {
        let key = (axis.min(1), k, acc); // all tangential axes share stencils
        let vertical = axis + 1 == self.n;
        let key = (if vertical { 1 } else { 0 }, key.1, key.2);
        let mut cache = self.stencils.lock().unwrap();
        if let Some(s) = cache.get(&key) {
            return Arc::clone(s);
        }
        let stencil = Arc::new(if vertical {
            self.build_vertical_stencil(k, acc)
        } else {
            self.build_tangential_stencil(k, acc)
        });
        cache.insert(key, Arc::clone(&stencil));
        stencil
    }

    fn build_vertical_stencil(&self, k: usize, acc: usize) -> AxisStencil {
        let nodes = &self.vertical_nodes;
        let len = nodes.len();
        let m = k + acc;
        assert!(m <= len, "vertical stencil of {m} nodes needs {m} grid nodes");
        let mut rows = Vec::with_capacity(len);
        for i in 0..len {
            let lo = i.saturating_sub((m - 1) / 2).min(len - m);
            let weights = fornberg_weights(nodes[i], &nodes[lo..lo + m], k);
            rows.push((lo, weights));
        }
        AxisStencil {
            rows,
            periodic_offsets: None,
        }
    }

    fn build_tangential_stencil(&self, k: usize, acc: usize) -> AxisStencil {
        let width = 2 * k.div_ceil(2) + 1 + (acc - 2); // odd, symmetric
        let half = (width - 1) / 2;
        let h = self.tangential_spacing();
        let nodes: Vec<f64> = (0..width).map(|j| (j as f64 - half as f64) * h).collect();
        let weights = fornberg_weights(0.0, &nodes, k);
        let offsets: Vec<isize> = (0..width).map(|j| j as isize - half as isize).collect();
        AxisStencil {
            rows: vec![(0, weights)],
            periodic_offsets: Some(offsets),
        }
    }

    /// Per-node vertical stencil rows `(window start, weights)` for the
    /// `k`-th derivative at formal accuracy `acc` — the same rows
    /// [`Grid::derivative_axis`] applies along the vertical axis. Exposed so
    /// matrix assemblies (weak forms, per-mode solvers) use bit-identical
    /// stencils to the pointwise derivative path.
    pub fn vertical_stencil_rows(&self, k: usize, acc: usize) -> Vec<(usize, Vec<f64>)> {
        let stencil = self.stencil(self.n - 1, k, acc);
        stencil.rows.clone()
    }

    /// Apply the `k`-th derivative along `axis` with formal accuracy `acc`.
    pub fn derivative_axis(&self, f: &Field, axis: usize, k: usize, acc: usize) -> Result<Field> {
        self.check_same_grid(f)?;
        if axis >= self.n {
            return Err(Error::InvalidParameter(format!(
                "axis {axis} out of range for dimension {}",
                self.n
            )));
        }
        if k == 0 {
            return Ok(f.clone());
        }
        let needed = if axis + 1 == self.n {
            k + acc
        } else {
            2 * k.div_ceil(2) + 1 + (acc - 2)
        };
        if needed > self.axis_len(axis) {
            return Err(Error::StencilTooWide {
                needed,
                available: self.axis_len(axis),
            });
        }
        let stencil = self.stencil(axis, k, acc);
        let mut out = Field::zeros(f.grid.clone());
        let axis_len = self.axis_len(axis);
        // Stride of one step along `axis` in the flat layout.
        let stride: usize = (axis + 1..self.n).map(|a| self.axis_len(a)).product();
        let outer: usize = (0..axis).map(|a| self.axis_len(a)).product();
        for o in 0..outer {
            for inner in 0..stride {
                let base = o * axis_len * stride + inner;
                for i in 0..axis_len {
                    let (lo, weights) = if stencil.rows.len() == 1 {
                        &stencil.rows[0]
                    } else {
                        &stencil.rows[i]
                    };
                    let mut acc_v = 0.0;
                    if let Some(offsets) = &stencil.periodic_offsets {
                        for (w, off) in weights.iter().zip(offsets) {
                            let j = (i as isize + off).rem_euclid(axis_len as isize) as usize;
                            acc_v += w * f.data[base + j * stride];
                        }
                    } else {
                        for (q, w) in weights.iter().enumerate() {
                            acc_v += w * f.data[base + (lo + q) * stride];
                        }
                    }
                    out.data[base + i * stride] = acc_v;
                }
            }
        }
        Ok(out)
    }

    /// Mixed spatial derivative `∂^α f` with per-axis orders `alpha`
    /// (tangential axes first, vertical last), formal accuracy `acc`.
    pub fn derivative_multi(&self, f: &Field, alpha: &[usize], acc: usize) -> Result<Field> {
        if alpha.len() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "multi-index of length {} on a grid of dimension {}",
                alpha.len(),
                self.n
            )));
        }
        let mut g = f.clone();
        for (axis, &k) in alpha.iter().enumerate() {
            if k > 0 {
                g = self.derivative_axis(&g, axis, k, acc)?;
            }
        }
        Ok(g)
    }

    /// Spatial derivative `∂^α f` at the default formal order 2.
    ///
    /// `l` is the time-derivative order and must be 0 here: a single field
    /// carries no time axis (trajectory types provide time differencing).
    /// Requires `|α| ≤ 4`.
    pub fn derivative(&self, f: &Field, l: usize, alpha: &[usize]) -> Result<Field> {
        if l != 0 {
            return Err(Error::InvalidParameter(
                "time derivatives require a trajectory, not a single field".into(),
            ));
        }
        let total: usize = alpha.iter().sum();
        if total > 4 {
            return Err(Error::InvalidParameter(format!(
                "derivative order |α| = {total} exceeds the supported 4"
            )));
        }
        self.derivative_multi(f, alpha, 2)
    }

    /// Per-node quadrature weights for `∫ · dμ_σ` over the whole domain,
    /// built from cellwise-exact integration of `x_n^σ` times the chosen
    /// interpolant. The weights include the tangential cell volume.
    pub fn measure_weights(&self, w: WeightSpec, degree: QuadratureDegree) -> Vec<f64> {
        let vertical = match degree {
            QuadratureDegree::Linear => vertical_weights_linear(&self.vertical_nodes, w.sigma),
            QuadratureDegree::Cubic => vertical_weights_cubic(&self.vertical_nodes, w.sigma),
        };
        let tang_cell = if self.n > 1 {
            self.tangential_spacing().powi(self.n as i32 - 1)
        } else {
            1.0
        };
        let nv = self.m_vertical + 1;
        let total = self.len();
        let mut out = vec![0.0; total];
        for (flat, slot) in out.iter_mut().enumerate() {
            *slot = vertical[flat % nv] * tang_cell;
        }
        out
    }

    /// Integrate `f` against `μ_σ` over `region` with the default linear
    /// interpolant.
    pub fn integrate(&self, f: &Field, w: WeightSpec, region: &Region) -> Result<f64> {
        self.integrate_with(f, w, region, QuadratureDegree::Linear)
    }

    /// Integrate `f` against `μ_σ` over `region` with a chosen interpolant
    /// degree. Slab bounds are clipped cell-exactly; balls restrict the node
    /// sum by the quasimetric indicator.
    pub fn integrate_with(
        &self,
        f: &Field,
        w: WeightSpec,
        region: &Region,
        degree: QuadratureDegree,
    ) -> Result<f64> {
        self.check_same_grid(f)?;
        match region {
            Region::Full => {
                let weights = self.measure_weights(w, degree);
                Ok(dot(&weights, &f.data))
            }
            Region::VerticalSlab { lo, hi } => {
                if !(lo <= hi) {
                    return Err(Error::InvalidParameter(format!(
                        "empty slab [{lo}, {hi}]"
                    )));
                }
                let vertical =
                    vertical_weights_linear_clipped(&self.vertical_nodes, w.sigma, *lo, *hi);
                let tang_cell = if self.n > 1 {
                    self.tangential_spacing().powi(self.n as i32 - 1)
                } else {
                    1.0
                };
                let nv = self.m_vertical + 1;
                let mut total = 0.0;
                for (flat, v) in f.data.iter().enumerate() {
                    total += v * vertical[flat % nv] * tang_cell;
                }
                Ok(total)
            }
            Region::Ball { center, radius } => {
                if center.len() != self.n {
                    return Err(Error::ShapeMismatch(format!(
                        "ball center of dimension {} on a grid of dimension {}",
                        center.len(),
                        self.n
                    )));
                }
                let weights = self.measure_weights(w, degree);
                let mut total = 0.0;
                for flat in 0..self.len() {
                    let x = self.coords_flat(flat);
                    if self.periodic_rho(center, &x) < *radius {
                        total += weights[flat] * f.data[flat];
                    }
                }
                Ok(total)
            }
        }
    }

    /// Quasimetric distance with tangential coordinates compared modulo the
    /// period (shortest representative).
    pub fn periodic_rho(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut bb = b.to_vec();
        for t in 0..self.n - 1 {
            let mut d = bb[t] - a[t];
            let period = self.period;
            d -= (d / period).round() * period;
            bb[t] = a[t] + d;
        }
        rho(a, &bb)
    }

    /// Multilinear interpolation of `f` at `point` (tangential wrap, vertical
    /// clamp). Returns the value and whether the vertical coordinate had to
    /// be clamped into `[0, x_max]`.
    pub fn interpolate(&self, f: &Field, point: &[f64]) -> (f64, bool) {
        debug_assert_eq!(point.len(), self.n);
        // Locate the cell and barycentric weight along each axis.
        let mut cell = [0usize; MAX_DIM];
        let mut frac = [0.0f64; MAX_DIM];
        let mut clamped = false;
        for a in 0..self.n {
            if a + 1 == self.n {
                let mut x = point[a];
                if x < 0.0 {
                    x = 0.0;
                    clamped = true;
                }
                if x > self.x_max {
                    x = self.x_max;
                    clamped = true;
                }
                let nodes = &self.vertical_nodes;
                // binary search for the cell containing x
                let mut loi = 0usize;
                let mut hii = nodes.len() - 1;
                while hii - loi > 1 {
                    let mid = (loi + hii) / 2;
                    if nodes[mid] <= x {
                        loi = mid;
                    } else {
                        hii = mid;
                    }
                }
                cell[a] = loi;
                frac[a] = (x - nodes[loi]) / (nodes[loi + 1] - nodes[loi]);
            } else {
                let h = self.tangential_spacing();
                let t = (point[a] / h).rem_euclid(self.k_tangential as f64);
                let i = (t.floor() as usize).min(self.k_tangential - 1);
                cell[a] = i;
                frac[a] = t - i as f64;
            }
        }
        // Accumulate over the 2^n cell corners.
        let mut value = 0.0;
        for corner in 0..(1usize << self.n) {
            let mut weight = 1.0;
            let mut idx = vec![0usize; self.n];
            for a in 0..self.n {
                let hi = (corner >> a) & 1 == 1;
                if hi {
                    weight *= frac[a];
                } else {
                    weight *= 1.0 - frac[a];
                }
                let mut i = cell[a] + if hi { 1 } else { 0 };
                if a + 1 != self.n {
                    i %= self.k_tangential;
                }
                idx[a] = i;
            }
            if weight != 0.0 {
                value += weight * f.data[self.flat_index(&idx)];
            }
        }
        (value, clamped)
    }

    /// Parabolic rescaling `f ↦ λ^w f(λ ·)` resampled onto this grid by
    /// multilinear interpolation. Vertical targets `λ x_n > x_max` are
    /// clamped and counted in the outcome.
    pub fn rescale(&self, f: &Field, lambda: f64, weight: i32) -> Result<RescaleOutcome> {
        self.check_same_grid(f)?;
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "scaling factor must be positive, got {lambda}"
            )));
        }
        let mut out = Field::zeros(f.grid.clone());
        let amp = lambda.powi(weight);
        let mut clamped_nodes = 0usize;
        for flat in 0..self.len() {
            let mut x = self.coords_flat(flat);
            for xi in x.iter_mut() {
                *xi *= lambda;
            }
            let (v, clamped) = self.interpolate(f, &x);
            if clamped {
                clamped_nodes += 1;
            }
            out.data[flat] = amp * v;
        }
        Ok(RescaleOutcome {
            field: out,
            clamped_nodes,
        })
    }
}

/// Scalar samples on a [`Grid`] in flat row-major layout (tangential axes
/// outermost, vertical axis innermost).
#[derive(Debug, Clone)]
pub struct Field {
    grid: Arc<Grid>,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: Arc<Grid>) -> Field {
        let len = grid.len();
        Field {
            grid,
            data: vec![0.0; len],
        }
    }

    /// Build a field by evaluating `f` at every node's coordinates.
    pub fn from_fn(grid: Arc<Grid>, mut f: impl FnMut(&[f64]) -> f64) -> Field {
        let len = grid.len();
        let mut data = Vec::with_capacity(len);
        for flat in 0..len {
            let x = grid.coords_flat(flat);
            data.push(f(&x));
        }
        Field { grid, data }
    }

    /// Wrap existing samples (length must match the grid).
    pub fn from_values(grid: Arc<Grid>, data: Vec<f64>) -> Result<Field> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples on a grid of {} nodes",
                data.len(),
                grid.len()
            )));
        }
        Ok(Field { grid, data })
    }

    /// The vertical coordinate as a field: `x ↦ x_n`.
    pub fn vertical_coordinate(grid: Arc<Grid>) -> Field {
        Field::from_fn(grid, |x| x[x.len() - 1])
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<f64> {
        self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Field) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    /// Pointwise product with another field.
    pub fn mul_field(&self, other: &Field) -> Field {
        debug_assert_eq!(self.data.len(), other.data.len());
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
        out
    }

    /// `self - other` as a new field.
    pub fn sub(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// `self + other` as a new field.
    pub fn add(&self, other: &Field) -> Field {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fornberg's algorithm: weights of the `k`-th derivative at `x0` for the
/// interpolating polynomial through `nodes` (arbitrary distinct locations).
pub fn fornberg_weights(x0: f64, nodes: &[f64], k: usize) -> Vec<f64> {
    let m = nodes.len();
    assert!(m > k, "need at least k+1 nodes for the k-th derivative");
    let mut c = vec![vec![0.0f64; k + 1]; m];
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    c[0][0] = 1.0;
    for i in 1..m {
        let mn = i.min(k);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for l in (1..=mn).rev() {
                    c[i][l] = c1 * (l as f64 * c[i - 1][l - 1] - c5 * c[i - 1][l]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for l in (1..=mn).rev() {
                c[j][l] = (c4 * c[j][l] - l as f64 * c[j][l - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[k]).collect()
}

/// `∫_a^b x^e dx` for `e > -1`, stable when `a = 0`.
fn power_integral(a: f64, b: f64, e: f64) -> f64 {
    debug_assert!(e > -1.0);
    let p = e + 1.0;
    (b.powf(p) - a.powf(p)) / p
}

/// Per-node weights of `∫ f x^σ dx` with piecewise-linear `f` on the given
/// (strictly increasing, nonnegative) nodes.
fn vertical_weights_linear(nodes: &[f64], sigma: f64) -> Vec<f64> {
    let mut w = vec![0.0; nodes.len()];
    for j in 0..nodes.len() - 1 {
        let (a, b) = (nodes[j], nodes[j + 1]);
        let h = b - a;
        let p1 = power_integral(a, b, sigma + 1.0);
        let p0 = power_integral(a, b, sigma);
        // f ≈ f_j (b - x)/h + f_{j+1} (x - a)/h on [a, b]
        w[j] += (b * p0 - p1) / h;
        w[j + 1] += (p1 - a * p0) / h;
    }
    w
}

/// Same as [`vertical_weights_linear`] but each cell is clipped to
/// `[lo, hi]` before integrating (cell-exact slab quadrature).
fn vertical_weights_linear_clipped(nodes: &[f64], sigma: f64, lo: f64, hi: f64) -> Vec<f64> {
    let mut w = vec![0.0; nodes.len()];
    for j in 0..nodes.len() - 1 {
        let (a, b) = (nodes[j], nodes[j + 1]);
        let (ca, cb) = (a.max(lo), b.min(hi));
        if ca >= cb {
            continue;
        }
        let h = b - a;
        let p1 = power_integral(ca, cb, sigma + 1.0);
        let p0 = power_integral(ca, cb, sigma);
        w[j] += (b * p0 - p1) / h;
        w[j + 1] += (p1 - a * p0) / h;
    }
    w
}

/// Per-node weights of `∫ f x^σ dx` with a piecewise-cubic interpolant: on
/// each cell the cubic through the four nearest nodes is integrated against
/// `x^σ` exactly. Falls back to the linear rule when fewer than four nodes
/// exist.
fn vertical_weights_cubic(nodes: &[f64], sigma: f64) -> Vec<f64> {
    let nn = nodes.len();
    if nn < 4 {
        return vertical_weights_linear(nodes, sigma);
    }
    let mut w = vec![0.0; nn];
    for j in 0..nn - 1 {
        let (a, b) = (nodes[j], nodes[j + 1]);
        let lo = j.saturating_sub(1).min(nn - 4);
        let support = [nodes[lo], nodes[lo + 1], nodes[lo + 2], nodes[lo + 3]];
        // Moments ∫_a^b x^σ x^t dx for t = 0..=3.
        let moments = [
            power_integral(a, b, sigma),
            power_integral(a, b, sigma + 1.0),
            power_integral(a, b, sigma + 2.0),
            power_integral(a, b, sigma + 3.0),
        ];
        for q in 0..4 {
            // Expand the Lagrange basis ℓ_q(x) = Π_{r≠q} (x - x_r)/(x_q - x_r)
            // into monomial coefficients.
            let mut coef = [1.0f64, 0.0, 0.0, 0.0]; // coefficient of x^t
            let mut denom = 1.0;
            let mut deg = 0usize;
            for r in 0..4 {
                if r == q {
                    continue;
                }
                denom *= support[q] - support[r];
                // multiply coef by (x - support[r])
                let mut next = [0.0f64; 4];
                for t in 0..=deg {
                    next[t + 1] += coef[t];
                    next[t] -= support[r] * coef[t];
                }
                deg += 1;
                coef = next;
            }
            let mut contrib = 0.0;
            for t in 0..4 {
                contrib += coef[t] * moments[t];
            }
            w[lo + q] += contrib / denom;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-12;

    fn grid1(m: usize) -> Arc<Grid> {
        Grid::new(1, m, 1.0, 2.0, 1, 1.0).unwrap()
    }

    #[test]
    fn vertical_nodes_follow_grading() {
        let g = Grid::new(1, 16, 2.0, 2.0, 1, 1.0).unwrap();
        assert_eq!(g.vertical_nodes().len(), 17);
        assert_eq!(g.vertical_nodes()[0], 0.0);
        assert!((g.vertical_nodes()[16] - 2.0).abs() < TOL);
        assert!((g.vertical_nodes()[8] - 2.0 * 0.25).abs() < TOL);
        assert!(g.vertical_nodes().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Grid::new(0, 16, 1.0, 2.0, 1, 1.0).is_err());
        assert!(Grid::new(4, 16, 1.0, 2.0, 4, 1.0).is_err());
        assert!(Grid::new(1, 4, 1.0, 2.0, 1, 1.0).is_err());
        assert!(Grid::new(1, 16, -1.0, 2.0, 1, 1.0).is_err());
        assert!(Grid::new(1, 16, 1.0, 0.5, 1, 1.0).is_err());
        assert!(Grid::new(2, 16, 1.0, 2.0, 2, 1.0).is_err());
        assert!(WeightSpec::new(-1.0).is_err());
        assert!(WeightSpec::new(-0.5).is_ok());
    }

    #[test]
    fn fornberg_reproduces_uniform_central_weights() {
        let w = fornberg_weights(0.0, &[-1.0, 0.0, 1.0], 2);
        assert!((w[0] - 1.0).abs() < TOL);
        assert!((w[1] + 2.0).abs() < TOL);
        assert!((w[2] - 1.0).abs() < TOL);
        let w1 = fornberg_weights(0.0, &[-1.0, 0.0, 1.0], 1);
        assert!((w1[0] + 0.5).abs() < TOL);
        assert!(w1[1].abs() < TOL);
        assert!((w1[2] - 0.5).abs() < TOL);
    }

    #[test]
    fn derivative_exact_on_low_polynomials() {
        // First derivative of x_n is exactly 1, second of x_n^2 exactly 2,
        // at every node of the graded mesh including both boundaries.
        let g = grid1(32);
        let x = Field::vertical_coordinate(g.clone());
        let dx = g.derivative(&x, 0, &[1]).unwrap();
        for v in dx.values() {
            assert!((v - 1.0).abs() < 1e-10);
        }
        let x2 = Field::from_fn(g.clone(), |x| x[0] * x[0]);
        let d2 = g.derivative(&x2, 0, &[2]).unwrap();
        for v in d2.values() {
            assert!((v - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn derivative_rejects_time_orders_and_wide_stencils() {
        let g = grid1(8);
        let x = Field::vertical_coordinate(g.clone());
        assert!(matches!(
            g.derivative(&x, 1, &[0]),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            g.derivative(&x, 0, &[5]),
            Err(Error::InvalidParameter(_))
        ));
        // 4th derivative with accuracy 6 needs 10 nodes; the axis has 9.
        assert!(matches!(
            g.derivative_multi(&x, &[4], 6),
            Err(Error::StencilTooWide { .. })
        ));
    }

    #[test]
    fn tangential_derivative_second_order_on_sine() {
        // err(K) / err(2K) ≈ 4 for the order-2 stencil.
        let errs: Vec<f64> = [16usize, 32, 64]
            .iter()
            .map(|&k| {
                let g = Grid::new(2, 8, 1.0, 2.0, k, 2.0 * std::f64::consts::PI).unwrap();
                let f = Field::from_fn(g.clone(), |x| x[0].sin());
                let d2 = g.derivative(&f, 0, &[2, 0]).unwrap();
                let exact = Field::from_fn(g.clone(), |x| -x[0].sin());
                d2.sub(&exact).max_abs()
            })
            .collect();
        let r1 = errs[0] / errs[1];
        let r2 = errs[1] / errs[2];
        assert!((3.2..=4.8).contains(&r1), "ratio {r1}");
        assert!((3.2..=4.8).contains(&r2), "ratio {r2}");
    }

    #[test]
    fn quadrature_exact_for_weight_times_linear() {
        // ∫_0^1 x^σ dx = 1/(σ+1) reproduced to near rounding for σ across
        // the admissible range, and ∫_0^1 x · x dx = 1/3 exactly.
        let g = grid1(64);
        let one = Field::from_fn(g.clone(), |_| 1.0);
        for sigma in [-0.5, 0.0, 1.0, 3.0, 5.0] {
            let v = g
                .integrate(&one, WeightSpec::new(sigma).unwrap(), &Region::Full)
                .unwrap();
            let exact = 1.0 / (sigma + 1.0);
            assert!(
                (v - exact).abs() <= 1e-6 * exact.abs(),
                "sigma={sigma}: {v} vs {exact}"
            );
        }
        let x = Field::vertical_coordinate(g.clone());
        let v = g
            .integrate(&x, WeightSpec::new(1.0).unwrap(), &Region::Full)
            .unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn quadrature_slab_region_clips_cells() {
        let g = Grid::new(1, 64, 2.0, 2.0, 1, 1.0).unwrap();
        let one = Field::from_fn(g.clone(), |_| 1.0);
        let v = g
            .integrate(
                &one,
                WeightSpec::new(0.0).unwrap(),
                &Region::VerticalSlab { lo: 0.25, hi: 1.75 },
            )
            .unwrap();
        assert!((v - 1.5).abs() < 1e-13, "{v}");
        // weight σ = 1 over [a, b]: (b² - a²)/2
        let v1 = g
            .integrate(
                &one,
                WeightSpec::new(1.0).unwrap(),
                &Region::VerticalSlab { lo: 0.5, hi: 1.5 },
            )
            .unwrap();
        assert!((v1 - 1.0).abs() < 1e-13, "{v1}");
    }

    #[test]
    fn cubic_quadrature_integrates_cubics_exactly() {
        let g = grid1(32);
        let f = Field::from_fn(g.clone(), |x| x[0].powi(3) - 2.0 * x[0] + 1.0);
        let v = g
            .integrate_with(
                &f,
                WeightSpec::new(1.0).unwrap(),
                &Region::Full,
                QuadratureDegree::Cubic,
            )
            .unwrap();
        // ∫_0^1 x (x³ - 2x + 1) dx = 1/5 - 2/3 + 1/2 = 1/30
        assert!((v - 1.0 / 30.0).abs() < 1e-13, "{v}");
    }

    #[test]
    fn tensor_quadrature_order_two_on_smooth_fields() {
        // ∫ over T × [0,1] of sin(2πx₁/Λ)² x_n³ dμ_0 = Λ/2 · 1/4. The
        // vertical cubic is not representable by the linear interpolant, so
        // the error is genuine and must shrink under refinement.
        let lambda = 2.0 * std::f64::consts::PI;
        let vals: Vec<f64> = [16usize, 32]
            .iter()
            .map(|&m| {
                let g = Grid::new(2, m, 1.0, 2.0, 4 * m, lambda).unwrap();
                let f = Field::from_fn(g.clone(), |x| x[0].sin().powi(2) * x[1].powi(3));
                g.integrate(&f, WeightSpec::new(0.0).unwrap(), &Region::Full)
                    .unwrap()
            })
            .collect();
        let exact = lambda / 8.0;
        let e0 = (vals[0] - exact).abs();
        let e1 = (vals[1] - exact).abs();
        assert!(e1 < 0.5 * e0, "errors {e0} -> {e1}");
        assert!(e1 < 1e-2);
    }

    #[test]
    fn rescale_identity_and_clamping() {
        let g = Grid::new(1, 32, 1.0, 2.0, 1, 1.0).unwrap();
        let f = Field::from_fn(g.clone(), |x| (1.0 - x[0]).powi(2));
        let out = g.rescale(&f, 1.0, -2).unwrap();
        assert_eq!(out.clamped_nodes, 0);
        assert!(out.field.sub(&f).max_abs() < TOL);
        // λ = 2 pushes the upper half of the nodes out of range.
        let out2 = g.rescale(&f, 2.0, 0).unwrap();
        assert!(out2.clamped_nodes > 0);
    }

    #[test]
    fn rescale_matches_analytic_sampling() {
        let g = Grid::new(1, 256, 1.0, 2.0, 1, 1.0).unwrap();
        let f = Field::from_fn(g.clone(), |x| (3.0 * x[0]).sin());
        let out = g.rescale(&f, 0.5, -1).unwrap();
        assert_eq!(out.clamped_nodes, 0);
        let exact = Field::from_fn(g.clone(), |x| 2.0 * (1.5 * x[0]).sin());
        // Multilinear interpolation error |f''| h²/8 ≈ 3.4e-5 near the top
        // of the graded grid, doubled by the λ^w = 2 prefactor.
        assert!(out.field.sub(&exact).max_abs() < 1.5e-4);
    }

    #[test]
    fn interpolation_wraps_tangentially() {
        let lambda = 2.0;
        let g = Grid::new(2, 8, 1.0, 2.0, 8, lambda).unwrap();
        let f = Field::from_fn(g.clone(), |x| (std::f64::consts::PI * x[0]).cos());
        let (a, _) = g.interpolate(&f, &[0.125, 0.5]);
        let (b, _) = g.interpolate(&f, &[0.125 + lambda, 0.5]);
        assert!((a - b).abs() < TOL);
    }

    #[test]
    fn flat_indexing_round_trips() {
        let g = Grid::new(3, 8, 1.0, 2.0, 4, 1.0).unwrap();
        for flat in 0..g.len() {
            let idx = g.multi_index(flat);
            assert_eq!(g.flat_index(&idx), flat);
        }
        assert_eq!(g.len(), 4 * 4 * 9);
    }
}
