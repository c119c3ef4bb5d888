//! Point-source experiments on the linear flow.
//!
//! A *kernel probe* releases a narrow normalized bump and records the
//! evolved field, so the late-time snapshot approximates one column of the
//! solution kernel. On top of a probe this module builds
//!
//! * intrinsically normalized envelope samples ([`KernelProbe::samples`]),
//! * a stretched-exponential envelope fit ([`fit_envelope`]),
//! * self-similar collapse and polynomial-domination diagnostics
//!   ([`collapse_correlation`], [`polynomial_decay_split`]),
//! * exterior decay ratios against the expected far-field envelope
//!   ([`exterior_decay_check`]),
//! * space-time `L^q` quadratures of weighted derivative kernels with
//!   their finiteness threshold ([`kernel_lq_norm`]).
//!
//! All normalizations use deterministic grid quadrature, so repeated runs
//! are bit-reproducible.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::evolution::{self, Scheme, Source, Trajectory};
use crate::grid::{Field, Grid, QuadratureDegree, WeightSpec};

/// Relative field accuracy the direct stepper is trusted to at the
/// resolutions used for probes. Envelope fits ignore samples below
/// `1e3 ×` this times the sample maximum; see [`KernelProbe::noise_floor`].
pub const TRUSTED_FIELD_ACCURACY: f64 = 1e-9;

/// One spatial node of a probe snapshot, in envelope form.
#[derive(Debug, Clone, Copy)]
pub struct EnvelopeSample {
    /// Flat node index on the probe grid.
    pub flat: usize,
    /// Intrinsic distance from the node to the source point.
    pub rho: f64,
    /// Vertical coordinate of the node.
    pub height: f64,
    /// Field value `u(t, x)` at the node.
    pub raw: f64,
    /// `|u(t,x)| · |B_R(x)|₁^{1/2} |B_R(y₀)|₁^{1/2} / y₀ₙ` with `R = t^{1/4}`:
    /// the size the kernel itself should have at this node, with the
    /// on-diagonal volume factors and the source height divided out.
    pub normalized: f64,
}

/// A point-source experiment: bump release, recorded run, and the
/// envelope samples of the final snapshot.
#[derive(Debug, Clone)]
pub struct KernelProbe {
    /// Center of the released bump.
    pub source: Vec<f64>,
    /// Bump radius (support is the ball of this Euclidean radius).
    pub width: f64,
    /// Time of the sampled snapshot (the final recorded time).
    pub time: f64,
    /// The full recorded run, snapshot 0 being the bump itself.
    pub trajectory: Trajectory,
    /// Envelope samples of the final snapshot, one per node.
    pub samples: Vec<EnvelopeSample>,
}

impl KernelProbe {
    pub fn grid(&self) -> &Arc<Grid> {
        self.trajectory.states[0].grid()
    }

    /// Final recorded field.
    pub fn final_field(&self) -> &Field {
        self.trajectory.states.last().expect("non-empty run")
    }

    /// Smallest normalized sample value the run can distinguish from
    /// discretization error: `1e3 × TRUSTED_FIELD_ACCURACY × max`.
    pub fn noise_floor(&self) -> f64 {
        let max = self
            .samples
            .iter()
            .fold(0.0f64, |m, s| m.max(s.normalized));
        1e3 * TRUSTED_FIELD_ACCURACY * max
    }

    /// Envelope samples of an arbitrary recorded snapshot, normalized with
    /// the ball radius `R = t_k^{1/4}` of that snapshot's time.
    pub fn samples_at(&self, snapshot: usize) -> Result<Vec<EnvelopeSample>> {
        let t = *self.trajectory.times.get(snapshot).ok_or_else(|| {
            Error::InvalidParameter(format!(
                "snapshot {snapshot} of {} requested",
                self.trajectory.times.len()
            ))
        })?;
        if !(t > 0.0) {
            return Err(Error::InvalidParameter(
                "the initial snapshot is the bump itself and has no envelope".into(),
            ));
        }
        let grid = self.grid().clone();
        let coords: Vec<Vec<f64>> = (0..grid.len()).map(|i| grid.coords_flat(i)).collect();
        let mu1 = grid.measure_weights(WeightSpec::new(1.0)?, QuadratureDegree::Linear);
        Ok(normalized_samples(
            &grid,
            &coords,
            &mu1,
            &self.trajectory.states[snapshot],
            t,
            &self.source,
        ))
    }

    /// `∫ u(t_k, x) x_n dx` for every recorded snapshot. The weak flow
    /// conserves this pairing exactly, so the series doubles as an
    /// end-to-end integrity check of the probe pipeline.
    pub fn pairing_series(&self) -> Vec<(f64, f64)> {
        let grid = self.grid();
        let mu1 = grid
            .measure_weights(WeightSpec::new(1.0).expect("σ=1 valid"), QuadratureDegree::Linear);
        self.trajectory
            .times
            .iter()
            .zip(&self.trajectory.states)
            .map(|(&t, u)| {
                let s: f64 = mu1.iter().zip(u.values()).map(|(w, v)| w * v).sum();
                (t, s)
            })
            .collect()
    }
}

/// Stretched-exponential envelope `ln v ≈ amplitude − rate · (ρ⁴/t)^exponent`
/// fitted to the samples of a probe above its noise floor.
#[derive(Debug, Clone, Copy)]
pub struct EnvelopeFit {
    /// Intercept of the log-envelope at `ρ = 0`.
    pub amplitude: f64,
    /// Decay rate multiplying the stretched distance; positive for a
    /// genuinely decaying kernel.
    pub rate: f64,
    /// Stretching exponent of `ρ⁴/t`, selected by grid search.
    pub exponent: f64,
    /// Coefficient of determination of the selected fit.
    pub r_squared: f64,
    /// Number of samples above the noise floor that entered the fit.
    pub used: usize,
}

/// Space-time `L^q` quadrature of a weighted derivative of a probe field,
/// reported together with the admissibility data of the underlying bound.
#[derive(Debug, Clone)]
pub struct KernelIntegrability {
    /// `‖x_n^{j+1} ∂^α u‖_{L^q((0,T]×H)} / y₀ₙ` over the recorded snapshots.
    pub value: f64,
    /// Integrability exponent of the quadrature.
    pub q: f64,
    /// Vertical weight order `j` (the quadrature itself uses `j + 1`; see
    /// [`kernel_lq_norm`]).
    pub vertical_weight: usize,
    /// Spatial derivative multi-index.
    pub order: Vec<usize>,
    /// Critical exponent `(n+2)/(n−j+|α|)`: the quadrature should stay
    /// bounded under refinement for `q` below it and grow for `q` above.
    pub threshold: f64,
    /// Whether `(j, α)` satisfies `2j ≤ |α| < j+2`, the range in which the
    /// threshold is meaningful.
    pub admissible: bool,
    /// `q < threshold`.
    pub expected_finite: bool,
}

// ---------------------------------------------------------------------------
// probes
// ---------------------------------------------------------------------------

fn bump_profile(r2: f64) -> f64 {
    let s = 1.0 - r2;
    if s <= 0.0 {
        0.0
    } else {
        s * s * s
    }
}

/// Euclidean distance squared with tangential wrap.
fn wrapped_dist2(grid: &Grid, x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let period = grid.period();
    let mut sq = 0.0;
    for axis in 0..n {
        let mut d = x[axis] - y[axis];
        if axis + 1 < n {
            d -= period * (d / period).round();
        }
        sq += d * d;
    }
    sq
}

/// Measure of the intrinsic ball `B_radius(center)` by grid quadrature of
/// the given per-node weights (deterministic counterpart of sampling-based
/// ball volumes; accurate to one boundary layer of cells).
fn ball_quadrature(
    grid: &Grid,
    coords: &[Vec<f64>],
    weights: &[f64],
    center: &[f64],
    radius: f64,
) -> f64 {
    let mut total = 0.0;
    for (x, w) in coords.iter().zip(weights) {
        if grid.periodic_rho(center, x) < radius {
            total += w;
        }
    }
    total
}

fn normalized_samples(
    grid: &Grid,
    coords: &[Vec<f64>],
    mu1: &[f64],
    u: &Field,
    t: f64,
    source: &[f64],
) -> Vec<EnvelopeSample> {
    let n = grid.dim();
    let radius = t.powf(0.25);
    let source_height = source[n - 1];
    let ball_source = ball_quadrature(grid, coords, mu1, source, radius);
    let vals = u.values();
    coords
        .iter()
        .enumerate()
        .map(|(flat, x)| {
            let ball_x = ball_quadrature(grid, coords, mu1, x, radius);
            let rho = grid.periodic_rho(x, source);
            EnvelopeSample {
                flat,
                rho,
                height: x[n - 1],
                raw: vals[flat],
                normalized: vals[flat].abs() * (ball_x * ball_source).sqrt() / source_height,
            }
        })
        .collect()
}

/// Release a compact bump of the given Euclidean `width` around `source`,
/// normalized to unit mass `∫ g dx = 1` in discrete quadrature, and record
/// the homogeneous flow up to `t_final` with step `tau` under the given
/// scheme.
///
/// Requirements: the source must sit at least one width above the boundary
/// (so the bump is supported in the domain and the normalization height is
/// positive), and the width must span at least three grid cells in every
/// direction at the source location — narrower bumps alias and the probe
/// is rejected as unresolved.
///
/// Use [`Scheme::ImplicitEuler`] for probes: the released bump is rough at
/// grid scale, and the midpoint rule's neutral treatment of stiff modes
/// lets that roughness ring through the whole run instead of damping out.
pub fn probe_kernel(
    grid: &Arc<Grid>,
    source: &[f64],
    width: f64,
    scheme: Scheme,
    t_final: f64,
    tau: f64,
    record_every: usize,
) -> Result<KernelProbe> {
    let n = grid.dim();
    if source.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "source point has {} coordinates on a {n}-dimensional grid",
            source.len()
        )));
    }
    if !(width > 0.0) || !width.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "bump width must be positive, got {width}"
        )));
    }
    let height = source[n - 1];
    if !(height >= width) || height > grid.x_max() - width {
        return Err(Error::InvalidParameter(format!(
            "bump of width {width} centered at height {height} leaves the domain"
        )));
    }
    // Resolution check: at least three cells across the bump radius, in the
    // vertical direction locally around the source and tangentially.
    let nodes = grid.vertical_nodes();
    let mut local = 0.0f64;
    for pair in nodes.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        if hi >= height - width && lo <= height + width {
            local = local.max(hi - lo);
        }
    }
    if n > 1 {
        local = local.max(grid.tangential_spacing());
    }
    if width < 3.0 * local {
        return Err(Error::InvalidParameter(format!(
            "bump of width {width} spans fewer than three cells (local spacing {local:.3e}); \
             the probe would be unresolved"
        )));
    }

    let mut g = Field::from_fn(grid.clone(), |x| {
        bump_profile(wrapped_dist2(grid, x, source) / (width * width))
    });
    let lebesgue = grid.measure_weights(WeightSpec::new(0.0)?, QuadratureDegree::Linear);
    let mass: f64 = lebesgue
        .iter()
        .zip(g.values())
        .map(|(w, v)| w * v)
        .sum();
    if !(mass > 0.0) {
        return Err(Error::Numerical(format!(
            "bump has nonpositive discrete mass {mass}; probe unresolved"
        )));
    }
    for v in g.values_mut() {
        *v /= mass;
    }

    let trajectory = evolution::solve_linear(
        grid,
        scheme,
        &g,
        Source::None,
        t_final,
        tau,
        record_every,
    )?;
    let time = *trajectory.times.last().expect("non-empty run");
    let coords: Vec<Vec<f64>> = (0..grid.len()).map(|i| grid.coords_flat(i)).collect();
    let mu1 = grid.measure_weights(WeightSpec::new(1.0)?, QuadratureDegree::Linear);
    let samples = normalized_samples(
        grid,
        &coords,
        &mu1,
        trajectory.states.last().expect("non-empty run"),
        time,
        source,
    );
    Ok(KernelProbe {
        source: source.to_vec(),
        width,
        time,
        trajectory,
        samples,
    })
}

// ---------------------------------------------------------------------------
// envelope fits and decay diagnostics
// ---------------------------------------------------------------------------

/// Least squares of `z ≈ a − b·w`; returns `(a, b, sse)`.
fn linear_fit(ws: &[f64], zs: &[f64]) -> (f64, f64, f64) {
    let m = ws.len() as f64;
    let wbar = ws.iter().sum::<f64>() / m;
    let zbar = zs.iter().sum::<f64>() / m;
    let mut sww = 0.0;
    let mut swz = 0.0;
    for (w, z) in ws.iter().zip(zs) {
        sww += (w - wbar) * (w - wbar);
        swz += (w - wbar) * (z - zbar);
    }
    // Degenerate abscissas (all samples at one stretched distance) fit a
    // constant.
    let slope = if sww > 0.0 { swz / sww } else { 0.0 };
    let intercept = zbar - slope * wbar;
    let mut sse = 0.0;
    for (w, z) in ws.iter().zip(zs) {
        let r = z - (intercept + slope * w);
        sse += r * r;
    }
    (intercept, -slope, sse)
}

/// Number of distance bins used to extract the upper envelope before
/// regression. The kernel changes sign, so individual samples dip to zero
/// at the crossings; the envelope is the per-bin maximum.
const ENVELOPE_BINS: usize = 40;

/// Per-bin maxima of `value` over equal-width bins of `abscissa`, restricted
/// to values above `floor`. Returns `(abscissa of the bin maximum, max)`.
fn upper_envelope(abscissa: &[f64], value: &[f64], floor: f64) -> Vec<(f64, f64)> {
    debug_assert_eq!(abscissa.len(), value.len());
    let hi = abscissa.iter().fold(0.0f64, |m, r| m.max(*r));
    if !(hi > 0.0) {
        return Vec::new();
    }
    let mut best: Vec<Option<(f64, f64)>> = vec![None; ENVELOPE_BINS];
    for (r, v) in abscissa.iter().zip(value) {
        if *v <= floor {
            continue;
        }
        let bin = ((r / hi * ENVELOPE_BINS as f64) as usize).min(ENVELOPE_BINS - 1);
        if best[bin].map_or(true, |(_, bv)| *v > bv) {
            best[bin] = Some((*r, *v));
        }
    }
    best.into_iter().flatten().collect()
}

/// Above-floor count and the binned upper envelope `(ρ, ln v)` of a probe.
fn fit_samples(probe: &KernelProbe) -> Result<(usize, Vec<f64>, Vec<f64>)> {
    let floor = probe.noise_floor();
    let above = probe
        .samples
        .iter()
        .filter(|s| s.normalized > floor)
        .count();
    if above < 20 {
        return Err(Error::Numerical(format!(
            "envelope regression needs at least 20 samples above the noise floor, got {above}"
        )));
    }
    let rhos: Vec<f64> = probe.samples.iter().map(|s| s.rho).collect();
    let vals: Vec<f64> = probe.samples.iter().map(|s| s.normalized).collect();
    let env = upper_envelope(&rhos, &vals, floor);
    let (r, z): (Vec<f64>, Vec<f64>) = env.into_iter().map(|(r, v)| (r, v.ln())).unzip();
    Ok((above, r, z))
}

/// Fit `ln(normalized) ≈ amplitude − rate·(ρ⁴/t)^exponent` to the probe's
/// upper envelope (per-distance-bin maxima of the above-floor samples; the
/// kernel oscillates, so pointwise values dip below the envelope at sign
/// changes). The stretching exponent is selected by grid search over
/// `[0.10, 0.60]` with one local refinement pass; `amplitude` and `rate`
/// are the exact least-squares optimum at the selected exponent.
pub fn fit_envelope(probe: &KernelProbe) -> Result<EnvelopeFit> {
    let (above, rhos, zs) = fit_samples(probe)?;
    let t = probe.time;
    let eval = |q: f64| -> (f64, f64, f64) {
        let ws: Vec<f64> = rhos.iter().map(|r| (r.powi(4) / t).powf(q)).collect();
        linear_fit(&ws, &zs)
    };
    let mut best = (0.0f64, f64::INFINITY, 0.0, 0.0); // (q, sse, a, b)
    let scan = |qs: &mut dyn Iterator<Item = f64>, best: &mut (f64, f64, f64, f64)| {
        for q in qs {
            let (a, b, sse) = eval(q);
            if sse < best.1 {
                *best = (q, sse, a, b);
            }
        }
    };
    scan(
        &mut (5..=30).map(|k| k as f64 * 0.02),
        &mut best,
    );
    let center = best.0;
    scan(
        &mut (-9..=9)
            .map(move |k| center + k as f64 * 0.002)
            .filter(|q| *q > 0.0),
        &mut best,
    );
    let (q, sse, a, b) = best;
    let zbar = zs.iter().sum::<f64>() / zs.len() as f64;
    let sstot: f64 = zs.iter().map(|z| (z - zbar) * (z - zbar)).sum();
    let r_squared = if sstot > 0.0 { 1.0 - sse / sstot } else { 1.0 };
    Ok(EnvelopeFit {
        amplitude: a,
        rate: b,
        exponent: q,
        r_squared,
        used: above,
    })
}

/// Correlation strength between `ln(normalized)` and `−(ρ⁴/t)^{1/3}`,
/// pooled over the upper envelopes of the given recorded snapshots (each
/// normalized with its own time). Values near `1` mean the snapshots
/// collapse onto one stretched-exponential profile of the scaling variable.
pub fn collapse_correlation(probe: &KernelProbe, snapshots: &[usize]) -> Result<f64> {
    let mut xs = Vec::new();
    let mut zs = Vec::new();
    for &k in snapshots {
        let samples = probe.samples_at(k)?;
        let max = samples.iter().fold(0.0f64, |m, s| m.max(s.normalized));
        let floor = 1e3 * TRUSTED_FIELD_ACCURACY * max;
        let t = probe.trajectory.times[k];
        let stretched: Vec<f64> = samples
            .iter()
            .map(|s| (s.rho.powi(4) / t).powf(1.0 / 3.0))
            .collect();
        let vals: Vec<f64> = samples.iter().map(|s| s.normalized).collect();
        for (x, v) in upper_envelope(&stretched, &vals, floor) {
            xs.push(x);
            zs.push(v.ln());
        }
    }
    if xs.len() < 3 {
        return Err(Error::Numerical(
            "collapse correlation needs at least 3 pooled samples".into(),
        ));
    }
    Ok(-pearson(&xs, &zs))
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let m = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / m;
    let ybar = ys.iter().sum::<f64>() / m;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - xbar) * (x - xbar);
        syy += (y - ybar) * (y - ybar);
        sxy += (x - xbar) * (y - ybar);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Super-polynomial decay indicator: the supremum over above-floor samples
/// of `normalized · (1 + ρ/t^{1/4})^exponent`, together with the scaled
/// distance `ρ/t^{1/4}` at which it is attained. A kernel with only
/// polynomial decay of order below `exponent` pushes the supremum to the
/// edge of the domain and the value grows as the domain widens; genuine
/// super-polynomial decay pins both in place, so the pair is stable under
/// domain enlargement.
pub fn polynomial_domination(probe: &KernelProbe, exponent: i32) -> Result<(f64, f64)> {
    if probe.samples.is_empty() {
        return Err(Error::Numerical("probe has no samples".into()));
    }
    let floor = probe.noise_floor();
    let scale = probe.time.powf(0.25);
    let mut sup = 0.0f64;
    let mut at = 0.0f64;
    for s in &probe.samples {
        if s.normalized <= floor {
            continue;
        }
        let amplified = s.normalized * (1.0 + s.rho / scale).powi(exponent);
        if amplified > sup {
            sup = amplified;
            at = s.rho / scale;
        }
    }
    Ok((sup, at))
}

/// Largest difference between the normalized envelopes of two probes of
/// the same source and horizon (typically different bump widths), relative
/// to their common maximum. Small values certify that the finite bump
/// width no longer matters at the sampled time. The comparison is
/// sup-relative rather than pointwise-relative because the kernel changes
/// sign: at a crossing both values are tiny and their ratio is meaningless.
pub fn width_consistency(a: &KernelProbe, b: &KernelProbe) -> Result<f64> {
    if !Arc::ptr_eq(a.grid(), b.grid()) {
        return Err(Error::ShapeMismatch(
            "width consistency needs both probes on one grid".into(),
        ));
    }
    if a.source != b.source || (a.time - b.time).abs() > 1e-12 * a.time.max(b.time) {
        return Err(Error::InvalidParameter(
            "width consistency compares probes of one source and one horizon".into(),
        ));
    }
    let scale = a
        .samples
        .iter()
        .zip(&b.samples)
        .fold(0.0f64, |m, (sa, sb)| m.max(sa.normalized).max(sb.normalized));
    if scale == 0.0 {
        return Ok(0.0);
    }
    let worst = a
        .samples
        .iter()
        .zip(&b.samples)
        .fold(0.0f64, |m, (sa, sb)| {
            m.max((sa.normalized - sb.normalized).abs())
        });
    Ok(worst / scale)
}

/// Maximum, over late times `t ∈ (T/2, T]` and nodes `x` of the unit ball
/// around `center`, of the weighted derivative `|x_n^j ∂^α u(t,x)|` divided
/// by the far-field envelope
/// `(1 + √y₀ₙ)^{2j−|α|} |B₁(y₀)|⁻¹ exp(−ρ(x, y₀)/(4·rate))`,
/// where `y₀` is the probe source and `rate` is an empirically fitted decay
/// rate (see [`fit_envelope`]). The probe source must lie outside the unit
/// ball around `center`, so the observation window is disjoint from the
/// released bump; bounded ratios certify exterior decay, and the ratio
/// decreases as the source moves farther away.
pub fn exterior_decay_check(
    probe: &KernelProbe,
    center: &[f64],
    j: usize,
    alpha: &[usize],
    rate: f64,
) -> Result<f64> {
    let grid = probe.grid().clone();
    let n = grid.dim();
    if center.len() != n || alpha.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "center/derivative of dimensions {}/{} on a {n}-dimensional grid",
            center.len(),
            alpha.len()
        )));
    }
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "decay rate must be positive, got {rate}"
        )));
    }
    let separation = grid.periodic_rho(&probe.source, center);
    if separation <= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "source at intrinsic distance {separation:.3} intersects the unit observation ball"
        )));
    }
    let order: usize = alpha.iter().sum();
    let coords: Vec<Vec<f64>> = (0..grid.len()).map(|i| grid.coords_flat(i)).collect();
    let lebesgue = grid.measure_weights(WeightSpec::new(0.0)?, QuadratureDegree::Linear);
    let ball_source = ball_quadrature(&grid, &coords, &lebesgue, &probe.source, 1.0);
    if !(ball_source > 0.0) {
        return Err(Error::Numerical(
            "unit ball around the source has empty grid quadrature".into(),
        ));
    }
    let height = probe.source[n - 1];
    let prefactor = (1.0 + height.sqrt()).powi(2 * j as i32 - order as i32) / ball_source;

    let t_final = *probe.trajectory.times.last().expect("non-empty run");
    let mut worst = 0.0f64;
    for (k, &t) in probe.trajectory.times.iter().enumerate() {
        if !(t > 0.5 * t_final) {
            continue;
        }
        let du = grid.derivative_multi(&probe.trajectory.states[k], alpha, 2)?;
        for (flat, x) in coords.iter().enumerate() {
            if grid.periodic_rho(x, center) >= 1.0 {
                continue;
            }
            let weighted = x[n - 1].powi(j as i32) * du.values()[flat];
            let envelope =
                prefactor * (-grid.periodic_rho(x, &probe.source) / (4.0 * rate)).exp();
            worst = worst.max(weighted.abs() / envelope);
        }
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// space-time integrability of derivative kernels
// ---------------------------------------------------------------------------

/// Space-time `L^q` quadrature of `x_n^{j+1} ∂^α u / y₀ₙ` over the recorded
/// snapshots of a probe (the initial bump excluded), by trapezoid in time
/// and plain Lebesgue quadrature in space.
///
/// The extra vertical power compared to the nominal weight `x_n^j` moves
/// the source-slot weight of the kernel symmetry `y_n⁻¹ K(t,x,y) =
/// x_n⁻¹ K(t,y,x)` onto the receiver side, so this quadrature shares its
/// finiteness threshold `q < (n+2)/(n−j+|α|)` with the weighted norm taken
/// over the source slot. Below the threshold the value stabilizes under
/// time-step refinement; above it the early-time contribution grows
/// without bound.
pub fn kernel_lq_norm(
    probe: &KernelProbe,
    j: usize,
    alpha: &[usize],
    q: f64,
) -> Result<KernelIntegrability> {
    let grid = probe.grid().clone();
    let n = grid.dim();
    if alpha.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "derivative of dimension {} on a {n}-dimensional grid",
            alpha.len()
        )));
    }
    if !(q >= 1.0) || !q.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "integrability exponent must satisfy q ≥ 1, got {q}"
        )));
    }
    let order: usize = alpha.iter().sum();
    let admissible = 2 * j <= order && order < j + 2;
    let denom = n as f64 - j as f64 + order as f64;
    let threshold = if denom > 0.0 {
        (n as f64 + 2.0) / denom
    } else {
        f64::INFINITY
    };

    let times = &probe.trajectory.times;
    if times.len() < 3 {
        return Err(Error::InvalidParameter(
            "integrability quadrature needs at least two recorded steps".into(),
        ));
    }
    let lebesgue = grid.measure_weights(WeightSpec::new(0.0)?, QuadratureDegree::Linear);
    let heights: Vec<f64> = (0..grid.len())
        .map(|flat| grid.coords_flat(flat)[n - 1].powi(j as i32 + 1))
        .collect();

    // ∫ |x^{j+1} ∂^α u|^q dx per snapshot, then trapezoid over (t_1, T].
    let mut spatial = Vec::with_capacity(times.len() - 1);
    for state in &probe.trajectory.states[1..] {
        let du = grid.derivative_multi(state, alpha, 2)?;
        let mut acc = 0.0;
        for ((w, h), v) in lebesgue.iter().zip(&heights).zip(du.values()) {
            acc += w * (h * v).abs().powf(q);
        }
        spatial.push(acc);
    }
    let mut total = 0.0;
    for k in 0..spatial.len() - 1 {
        let dt = times[k + 2] - times[k + 1];
        total += 0.5 * dt * (spatial[k] + spatial[k + 1]);
    }
    // Earliest recorded interval (0, t_1]: attribute the first snapshot's
    // integrand to its own interval so refinement genuinely probes smaller
    // times instead of silently discarding them.
    total += spatial[0] * (times[1] - times[0]);

    let height = probe.source[n - 1];
    Ok(KernelIntegrability {
        value: total.powf(1.0 / q) / height,
        q,
        vertical_weight: j,
        order: alpha.to_vec(),
        threshold,
        admissible,
        expected_finite: q < threshold,
    })
}

/// Relative gap of the weighted symmetry `K(t, x, y)/y_n = K(t, y, x)/x_n`
/// measured with two probes released at each other's source points: the
/// first probe is read at the second source and vice versa, each reading
/// divided by the height of its own source.
pub fn symmetry_gap(a: &KernelProbe, b: &KernelProbe) -> Result<f64> {
    if !Arc::ptr_eq(a.grid(), b.grid()) {
        return Err(Error::ShapeMismatch(
            "symmetry comparison needs both probes on one grid".into(),
        ));
    }
    if (a.time - b.time).abs() > 1e-12 * a.time.max(b.time) {
        return Err(Error::InvalidParameter(
            "symmetry comparison needs probes of one horizon".into(),
        ));
    }
    let grid = a.grid().clone();
    let read = |p: &KernelProbe, at: &[f64]| -> f64 {
        let (v, _) = grid.interpolate(p.final_field(), at);
        v
    };
    let n = grid.dim();
    let va = read(a, &b.source) / a.source[n - 1];
    let vb = read(b, &a.source) / b.source[n - 1];
    let scale = va.abs().max(vb.abs());
    if scale == 0.0 {
        return Ok(0.0);
    }
    Ok((va - vb).abs() / scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evolution::EnergyLedger;

    fn line_grid(m: usize) -> Arc<Grid> {
        Grid::new(1, m, 8.0, 2.0, 1, 1.0).unwrap()
    }

    fn wide_grid(m: usize) -> Arc<Grid> {
        Grid::new(1, m, 32.0, 2.0, 1, 1.0).unwrap()
    }

    fn boundary_probe(m: usize, t_final: f64, tau: f64, every: usize) -> KernelProbe {
        let grid = wide_grid(m);
        let width = 0.25;
        probe_kernel(&grid, &[width], width, Scheme::ImplicitEuler, t_final, tau, every).unwrap()
    }

    fn interior_probe(m: usize, t_final: f64, tau: f64, every: usize) -> KernelProbe {
        let grid = wide_grid(m);
        probe_kernel(&grid, &[4.0], 1.5, Scheme::ImplicitEuler, t_final, tau, every).unwrap()
    }

    /// Probe with hand-built samples and a zero run, for exercising the
    /// fitting machinery against exactly known envelopes.
    fn synthetic_probe(amplitude: f64, rate: f64, exponent: f64) -> KernelProbe {
        let grid = line_grid(64);
        let t = 0.5;
        let zero = Field::zeros(grid.clone());
        let trajectory = Trajectory {
            times: vec![0.0, t],
            states: vec![zero.clone(), zero],
            ledger: EnergyLedger::default(),
        };
        let source = vec![0.5];
        let samples = (0..grid.len())
            .map(|flat| {
                let x = grid.coords_flat(flat);
                let rho = grid.periodic_rho(&x, &source);
                let normalized =
                    (amplitude - rate * (rho.powi(4) / t).powf(exponent)).exp();
                EnvelopeSample {
                    flat,
                    rho,
                    height: x[0],
                    raw: 0.0,
                    normalized,
                }
            })
            .collect();
        KernelProbe {
            source,
            width: 0.25,
            time: t,
            trajectory,
            samples,
        }
    }

    #[test]
    fn bump_is_normalized_and_narrow_bumps_are_rejected() {
        let grid = line_grid(256);
        let probe = probe_kernel(&grid, &[4.0], 0.25, Scheme::ImplicitEuler, 0.01, 0.005, 1).unwrap();
        let lebesgue = grid
            .measure_weights(WeightSpec::new(0.0).unwrap(), QuadratureDegree::Linear);
        let mass: f64 = lebesgue
            .iter()
            .zip(probe.trajectory.states[0].values())
            .map(|(w, v)| w * v)
            .sum();
        assert!((mass - 1.0).abs() < 1e-12, "bump mass {mass}");

        // Near the far end the graded cells are ~2·x_max/M wide; a bump of
        // two cells there must be rejected.
        let spacing = 2.0 * 8.0 / 256.0;
        let err = probe_kernel(&grid, &[7.0], 2.0 * spacing, Scheme::ImplicitEuler, 0.01, 0.005, 1);
        assert!(err.is_err(), "two-cell bump accepted");
    }

    #[test]
    fn probe_is_linear_in_the_released_data() {
        let grid = line_grid(128);
        let t = 0.1;
        let tau = 0.01;
        let pa = probe_kernel(&grid, &[2.0], 0.5, Scheme::ImplicitEuler, t, tau, 1).unwrap();
        let pb = probe_kernel(&grid, &[5.0], 0.5, Scheme::ImplicitEuler, t, tau, 1).unwrap();
        // Release the sum of the two bumps directly.
        let mut g = pa.trajectory.states[0].clone();
        for (v, w) in g.values_mut().iter_mut().zip(pb.trajectory.states[0].values()) {
            *v += w;
        }
        let sum_run = evolution::solve_linear(
            &grid,
            Scheme::ImplicitEuler,
            &g,
            Source::None,
            t,
            tau,
            1,
        )
        .unwrap();
        let ua = pa.final_field().values();
        let ub = pb.final_field().values();
        let uab = sum_run.states.last().unwrap().values();
        let scale = uab.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let gap = uab
            .iter()
            .enumerate()
            .map(|(i, v)| (v - ua[i] - ub[i]).abs())
            .fold(0.0f64, f64::max);
        assert!(gap <= 1e-11 * scale, "linearity gap {gap:.3e} vs {scale:.3e}");
    }

    #[test]
    fn vertical_pairing_is_conserved_along_the_probe() {
        let probe = interior_probe(128, 0.2, 0.01, 4);
        let series = probe.pairing_series();
        let first = series[0].1;
        assert!(first > 0.0);
        for (t, m) in &series {
            assert!(
                (m - first).abs() <= 1e-10 * first.abs(),
                "pairing drifted to {m} from {first} at t={t}"
            );
        }
    }

    #[test]
    fn envelope_fit_recovers_a_synthetic_kernel() {
        let probe = synthetic_probe(1.3, 2.0, 1.0 / 3.0);
        let fit = fit_envelope(&probe).unwrap();
        assert!(
            (fit.exponent - 1.0 / 3.0).abs() <= 0.01,
            "exponent {} for synthetic 1/3",
            fit.exponent
        );
        assert!((fit.rate - 2.0).abs() <= 0.05, "rate {}", fit.rate);
        assert!((fit.amplitude - 1.3).abs() <= 0.05, "amplitude {}", fit.amplitude);
        assert!(fit.r_squared > 0.999, "r² {}", fit.r_squared);
    }

    #[test]
    fn fit_requires_enough_samples_above_the_floor() {
        let mut probe = synthetic_probe(1.0, 2.0, 1.0 / 3.0);
        probe.samples.truncate(10);
        let err = fit_envelope(&probe);
        assert!(err.is_err(), "fit accepted 10 samples");
    }

    #[test]
    fn measured_envelopes_are_stretched_exponentials() {
        for probe in [boundary_probe(256, 0.5, 2e-3, 5), interior_probe(256, 0.5, 2e-3, 5)] {
            let fit = fit_envelope(&probe).unwrap();
            assert!(
                fit.exponent >= 0.2 && fit.exponent <= 0.5,
                "stretching exponent {} outside [0.2, 0.5]",
                fit.exponent
            );
            assert!(fit.rate > 0.0, "nonpositive decay rate {}", fit.rate);
            assert!(fit.r_squared >= 0.9, "r² {}", fit.r_squared);
            assert!(fit.used >= 20);

            let last = probe.trajectory.times.len() - 1;
            let corr = collapse_correlation(&probe, &[last / 4, last / 2, last]).unwrap();
            assert!(corr >= 0.93, "collapse correlation {corr}");
        }
    }

    #[test]
    fn narrower_bumps_leave_the_envelope_unchanged() {
        let grid = wide_grid(256);
        let t = 0.5;
        let tau = 2e-3;
        let w = 0.25;
        let full = probe_kernel(&grid, &[w], w, Scheme::ImplicitEuler, t, tau, 5).unwrap();
        let half = probe_kernel(&grid, &[w], w / 2.0, Scheme::ImplicitEuler, t, tau, 5).unwrap();
        let gap = width_consistency(&full, &half).unwrap();
        assert!(gap <= 0.05, "boundary width gap {gap}");

        let full_i = probe_kernel(&grid, &[4.0], 1.5, Scheme::ImplicitEuler, t, tau, 5).unwrap();
        let half_i = probe_kernel(&grid, &[4.0], 0.75, Scheme::ImplicitEuler, t, tau, 5).unwrap();
        let gap_i = width_consistency(&full_i, &half_i).unwrap();
        assert!(gap_i <= 0.05, "interior width gap {gap_i}");
    }

    #[test]
    fn polynomial_amplification_stays_pinned_inside_the_domain() {
        let t = 0.5;
        let tau = 2e-3;
        let w = 0.25;
        // Same spacing density on a domain twice as wide: M ∝ √x_max.
        let p32 = probe_kernel(&wide_grid(256), &[w], w, Scheme::ImplicitEuler, t, tau, 5)
            .unwrap();
        let g64 = Grid::new(1, 362, 64.0, 2.0, 1, 1.0).unwrap();
        let p64 = probe_kernel(&g64, &[w], w, Scheme::ImplicitEuler, t, tau, 5).unwrap();
        let (sup32, at32) = polynomial_domination(&p32, 10).unwrap();
        let (sup64, at64) = polynomial_domination(&p64, 10).unwrap();
        let ratio = sup64 / sup32;
        assert!(
            (0.8..=1.25).contains(&ratio),
            "amplified supremum moved by {ratio} when the domain doubled"
        );
        // The supremum is attained well inside the sampled range, not at its
        // edge (a polynomial tail would push it to the far wall).
        let edge32 = p32.samples.iter().fold(0.0f64, |m, s| m.max(s.rho)) / t.powf(0.25);
        let edge64 = p64.samples.iter().fold(0.0f64, |m, s| m.max(s.rho)) / t.powf(0.25);
        assert!(at32 < 0.8 * edge32, "supremum at the domain edge: {at32} of {edge32}");
        assert!(at64 < 0.8 * edge64, "supremum at the domain edge: {at64} of {edge64}");
    }

    #[test]
    fn kernel_readings_commute_between_source_and_receiver() {
        let grid = wide_grid(256);
        let t = 0.5;
        let tau = 2e-3;
        let pa = probe_kernel(&grid, &[2.0], 0.6, Scheme::ImplicitEuler, t, tau, 50).unwrap();
        let pb = probe_kernel(&grid, &[5.0], 0.6, Scheme::ImplicitEuler, t, tau, 50).unwrap();
        let gap = symmetry_gap(&pa, &pb).unwrap();
        assert!(gap <= 0.01, "height-weighted symmetry gap {gap}");
    }

    #[test]
    fn far_sources_obey_the_exterior_envelope() {
        let probe = boundary_probe(256, 0.5, 2e-3, 10);
        let fit = fit_envelope(&probe).unwrap();
        let mut last = f64::INFINITY;
        for center in [10.0, 16.0, 24.0] {
            let ratio = exterior_decay_check(&probe, &[center], 0, &[1], fit.rate).unwrap();
            assert!(ratio > 0.0 && ratio <= 10.0, "exterior ratio {ratio} at {center}");
            assert!(
                ratio < last,
                "exterior ratio did not decrease with separation: {ratio} ≥ {last}"
            );
            last = ratio;
        }

        // A source inside the observation ball is rejected.
        let err = exterior_decay_check(&probe, &[0.5], 0, &[1], fit.rate);
        assert!(err.is_err(), "overlapping source accepted");

        // A null field has ratio exactly zero.
        let grid = wide_grid(64);
        let zero = Field::zeros(grid.clone());
        let null = KernelProbe {
            source: vec![16.0],
            width: 0.5,
            time: 1.0,
            trajectory: Trajectory {
                times: vec![0.0, 0.4, 0.7, 1.0],
                states: vec![zero.clone(), zero.clone(), zero.clone(), zero],
                ledger: EnergyLedger::default(),
            },
            samples: Vec::new(),
        };
        let ratio = exterior_decay_check(&null, &[0.5], 0, &[1], 1.0).unwrap();
        assert_eq!(ratio, 0.0);
    }

    #[test]
    fn derivative_kernels_integrate_below_the_critical_exponent_only() {
        // Boundary sources with width, height, and step tied to the grid:
        // each refinement level halves the regularization scale, so a
        // divergent quadrature keeps growing while a convergent one
        // stabilizes. For the first vertical derivative the threshold is
        // q = 3/2: q = 1 converges, q = 2 diverges.
        let mut v1 = Vec::new();
        let mut v2 = Vec::new();
        for m in [192usize, 256, 384] {
            let grid = wide_grid(m);
            let w = 160.0 * 32.0 / (m as f64 * m as f64);
            let tau = w * w / 8.0;
            let probe =
                probe_kernel(&grid, &[w], w, Scheme::ImplicitEuler, 0.05, tau, 1).unwrap();
            let i1 = kernel_lq_norm(&probe, 0, &[1], 1.0).unwrap();
            let i2 = kernel_lq_norm(&probe, 0, &[1], 2.0).unwrap();
            assert!((i1.threshold - 1.5).abs() < 1e-12);
            assert!(i1.admissible && i1.expected_finite);
            assert!(!i2.expected_finite);
            v1.push(i1.value);
            v2.push(i2.value);
        }
        // Divergent exponent: sustained growth at every level.
        assert!(
            v2[1] / v2[0] >= 1.3 && v2[2] / v2[1] >= 1.3,
            "q=2 quadrature not diverging: {v2:?}"
        );
        // Convergent exponent: increments shrink and the last step is small.
        let d1 = (v1[1] - v1[0]).abs() / v1[0];
        let d2 = (v1[2] - v1[1]).abs() / v1[1];
        assert!(d2 < d1, "q=1 increments not shrinking: {v1:?}");
        assert!(d2 <= 0.25, "q=1 quadrature still moving by {d2}: {v1:?}");

        // Admissibility bookkeeping.
        let probe = boundary_probe(192, 0.05, 1e-3, 4);
        let flagged = kernel_lq_norm(&probe, 1, &[3], 1.0).unwrap();
        assert!(!flagged.admissible, "j=1, |α|=3 accepted as admissible");
        assert!(kernel_lq_norm(&probe, 0, &[1], 0.5).is_err(), "q < 1 accepted");
    }

    #[test]
    fn field_at_a_distant_node_rises_then_falls() {
        let probe = boundary_probe(256, 0.5, 2e-3, 5);
        let grid = probe.grid().clone();
        let target = 4.0;
        let flat = (0..grid.len())
            .min_by(|&a, &b| {
                (grid.coords_flat(a)[0] - target)
                    .abs()
                    .total_cmp(&(grid.coords_flat(b)[0] - target).abs())
            })
            .unwrap();
        let series: Vec<f64> = probe
            .trajectory
            .states
            .iter()
            .map(|u| u.values()[flat].abs())
            .collect();
        let (argmax, &peak) = series
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert!(
            argmax > 0 && argmax < series.len() - 1,
            "arrival peak at the window edge (snapshot {argmax})"
        );
        assert!(peak > 5.0 * series[1], "no rise: peak {peak} vs {}", series[1]);
        assert!(
            peak > 1.2 * series[series.len() - 1],
            "no fall: peak {peak} vs {}",
            series[series.len() - 1]
        );
    }
}
