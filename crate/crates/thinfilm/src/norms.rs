//! Sampled evaluation of the anisotropic space-time functionals that control
//! the quasilinear problem: a Lipschitz seminorm for initial data, weighted
//! cylinder norms for solution trajectories ([`xp_norm`]) and for source
//! terms ([`yp_norm`]), a quadratic-boundedness probe for the nonlinearity,
//! and the film-side seminorm evaluated on the positivity set
//! ([`film_xp_seminorm`]).
//!
//! The suprema over cylinders are evaluated on explicit deterministic
//! sampling plans — dyadic radii crossed with a decimated set of grid-node
//! centers — so every reported value is a certified lower bound of the
//! underlying supremum. Enlarging a plan never decreases the reported value,
//! and all comparisons made by the verification suites put like-sampled
//! plans on both sides.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::evolution::{self, Trajectory};
use crate::geometry::{cz_indices, Ball, Cylinder, CzIndex};
use crate::grid::{Field, Grid, QuadratureDegree, WeightSpec};
use crate::hodograph::{self, FilmState};

/// Stencil accuracy for the derivative blocks and the gradient part; matches
/// the discretization order of the evolution stepper so that norm values and
/// solver output refine at the same rate.
const BLOCK_ACCURACY: usize = 2;

/// Deterministic sampling plan for cylinder suprema: a set of dyadic radii
/// crossed with a decimated set of grid-node centers, below a time horizon.
#[derive(Debug, Clone)]
pub struct SupSamplingPlan {
    grid: Arc<Grid>,
    radii: Vec<f64>,
    centers: Vec<usize>,
    horizon: f64,
}

impl SupSamplingPlan {
    /// Dyadic plan: radii `R_k = (T·2^{-k})^{1/4}` for `k = 1..=levels` and
    /// centers on the sublattice of nodes whose index along every axis is a
    /// multiple of `stride`.
    pub fn dyadic(
        grid: &Arc<Grid>,
        horizon: f64,
        levels: usize,
        stride: usize,
    ) -> Result<SupSamplingPlan> {
        if levels == 0 || stride == 0 {
            return Err(Error::InvalidParameter(
                "sampling plan needs levels ≥ 1 and stride ≥ 1".into(),
            ));
        }
        let radii = (1..=levels)
            .map(|k| (horizon * 0.5f64.powi(k as i32)).powf(0.25))
            .collect();
        let n = grid.dim();
        let counts: Vec<usize> = (0..n)
            .map(|a| (grid.axis_len(a) + stride - 1) / stride)
            .collect();
        let total: usize = counts.iter().product();
        let mut centers = Vec::with_capacity(total);
        let mut idx = vec![0usize; n];
        for mut c in 0..total {
            for a in (0..n).rev() {
                idx[a] = (c % counts[a]) * stride;
                c /= counts[a];
            }
            centers.push(grid.flat_index(&idx));
        }
        SupSamplingPlan::with_samples(grid, radii, centers, horizon)
    }

    /// Plan from explicit radii and center nodes; used to build paired
    /// sample sets (rescaling comparisons, monotonicity checks). Every
    /// radius must satisfy `0 < R⁴ < horizon`.
    pub fn with_samples(
        grid: &Arc<Grid>,
        radii: Vec<f64>,
        centers: Vec<usize>,
        horizon: f64,
    ) -> Result<SupSamplingPlan> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sampling horizon must be positive and finite, got {horizon}"
            )));
        }
        if radii.is_empty() || centers.is_empty() {
            return Err(Error::InvalidParameter(
                "sampling plan must contain at least one radius and one center".into(),
            ));
        }
        for &r in &radii {
            if !(r > 0.0) || !r.is_finite() || r.powi(4) >= horizon {
                return Err(Error::InvalidParameter(format!(
                    "sampled radius must satisfy 0 < R⁴ < {horizon}, got R = {r}"
                )));
            }
        }
        for &c in &centers {
            if c >= grid.len() {
                return Err(Error::InvalidParameter(format!(
                    "center node {c} outside a grid of {} nodes",
                    grid.len()
                )));
            }
        }
        Ok(SupSamplingPlan {
            grid: Arc::clone(grid),
            radii,
            centers,
            horizon,
        })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn centers(&self) -> &[usize] {
        &self.centers
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Length of the shortest sampled time window `(R⁴/2, R⁴]`.
    pub fn smallest_window(&self) -> f64 {
        self.radii
            .iter()
            .map(|r| 0.5 * r.powi(4))
            .fold(f64::INFINITY, f64::min)
    }

    /// Snapshot spacing that places at least four snapshots inside every
    /// sampled window; runs meant to be measured with this plan should
    /// record at least this densely.
    pub fn max_snapshot_spacing(&self) -> f64 {
        self.smallest_window() / 4.0
    }
}

/// One evaluated cylinder: the localized `L^p` value of every derivative
/// block, the same values after weighting and measure normalization, and
/// their sum.
#[derive(Debug, Clone)]
pub struct NormSample {
    pub cylinder: Cylinder,
    /// Localized `L^p` value per block (a single entry for source norms).
    pub lp_values: Vec<f64>,
    /// `|Q|^{-1/p} · weight · lp` per block.
    pub weighted: Vec<f64>,
    /// Sum of the weighted entries.
    pub total: f64,
}

/// Result of a sampled norm evaluation.
#[derive(Debug, Clone)]
pub struct NormReport {
    /// Gradient part plus the largest weighted cylinder sum.
    pub value: f64,
    /// `sup_t ‖∇u(t)‖_∞` (zero for source norms, which carry no such term).
    pub gradient_part: f64,
    /// Evaluated samples, radii outer and centers inner.
    pub samples: Vec<NormSample>,
    /// Samples dropped because their time window is not covered by the
    /// usable snapshot range.
    pub skipped: usize,
}

/// Anisotropic weight `R^{4l+|α|-1}(R+√x_n)^{|α|-2j-1}` of the derivative
/// block `index` on a cylinder of radius `radius` centered at height
/// `center_height`.
pub fn xp_block_weight(index: &CzIndex, radius: f64, center_height: f64) -> f64 {
    let alpha = index.alpha_abs() as i32;
    let l = index.l as i32;
    let j = index.j as i32;
    radius.powi(4 * l + alpha - 1) * (radius + center_height.sqrt()).powi(alpha - 2 * j - 1)
}

/// Source-norm weight `R³(R+√x_n)^{-1}` on the same cylinder geometry. For
/// `R ≤ 1` and `R + √x_n ≤ 1` it is dominated by every block weight of
/// [`xp_block_weight`], which is what makes source bounds transfer to
/// solution bounds cylinder by cylinder.
pub fn yp_weight(radius: f64, center_height: f64) -> f64 {
    radius.powi(3) / (radius + center_height.sqrt())
}

/// Largest pointwise gradient magnitude `‖∇g‖_{L^∞}` of a single field: the
/// homogeneous Lipschitz size of initial data.
pub fn lipschitz_seminorm(g: &Field) -> Result<f64> {
    evolution::gradient_sup(g, BLOCK_ACCURACY)
}

/// Euclidean distance with tangential axes wrapped to the nearest periodic
/// image.
fn wrapped_distance(period: f64, x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut sq = 0.0;
    for a in 0..n {
        let mut d = x[a] - y[a];
        if a + 1 != n {
            d -= period * (d / period).round();
        }
        sq += d * d;
    }
    sq.sqrt()
}

/// Intrinsic quasimetric `|x-y| / (√x_n + √y_n + √|x-y|)` with periodic
/// wrapping, the vertical scale taken from explicit per-point heights so the
/// same routine serves the half-space (height = `x_n`) and the film side
/// (height = `√h`).
fn wrapped_quasimetric(period: f64, x: &[f64], y: &[f64], hx: f64, hy: f64) -> f64 {
    let r = wrapped_distance(period, x, y);
    if r == 0.0 {
        0.0
    } else {
        r / (hx.max(0.0).sqrt() + hy.max(0.0).sqrt() + r.sqrt())
    }
}

/// Integral of the piecewise-linear interpolant of `(times, series)` over
/// `[t_lo, t_hi]`; `None` when the window is not covered by the nodes.
fn window_integral(times: &[f64], series: &[f64], t_lo: f64, t_hi: f64) -> Option<f64> {
    let nt = times.len();
    if nt < 2 || nt != series.len() || !(t_hi > t_lo) {
        return None;
    }
    let slack = 1e-12 * times[nt - 1].abs().max(1.0);
    if t_lo < times[0] - slack || t_hi > times[nt - 1] + slack {
        return None;
    }
    let lo = t_lo.max(times[0]);
    let hi = t_hi.min(times[nt - 1]);
    let mut acc = 0.0;
    for k in 0..nt - 1 {
        let (ta, tb) = (times[k], times[k + 1]);
        if tb <= lo || ta >= hi {
            continue;
        }
        let a = ta.max(lo);
        let b = tb.min(hi);
        if !(b > a) {
            continue;
        }
        let dt = tb - ta;
        let fa = series[k] + (series[k + 1] - series[k]) * ((a - ta) / dt);
        let fb = series[k] + (series[k + 1] - series[k]) * ((b - ta) / dt);
        acc += 0.5 * (fa + fb) * (b - a);
    }
    Some(acc)
}

/// Localized `L^p` value: spatial sums `Σ measure·|F|^p` over the listed
/// nodes per snapshot, integrated in time over `(t_lo, t_hi]` and taken to
/// the power `1/p`.
fn localized_lp(
    times: &[f64],
    snapshots: &[&[f64]],
    nodes: &[u32],
    measure: &[f64],
    p: f64,
    t_lo: f64,
    t_hi: f64,
) -> Option<f64> {
    let series: Vec<f64> = snapshots
        .iter()
        .map(|vals| {
            let mut s = 0.0;
            for &i in nodes {
                let v = vals[i as usize];
                s += measure[i as usize] * v.abs().powf(p);
            }
            s
        })
        .collect();
    window_integral(times, &series, t_lo, t_hi).map(|v| v.max(0.0).powf(1.0 / p))
}

/// Nonuniform second-order centered time differences of stored snapshots,
/// returned at the interior snapshot times.
fn time_derivative_fields(times: &[f64], states: &[Field]) -> (Vec<f64>, Vec<Field>) {
    let nt = times.len();
    let mut out_t = Vec::with_capacity(nt.saturating_sub(2));
    let mut out_f = Vec::with_capacity(nt.saturating_sub(2));
    for i in 1..nt.saturating_sub(1) {
        let dm = times[i] - times[i - 1];
        let dp = times[i + 1] - times[i];
        let mut f = states[i - 1].clone();
        f.scale(-dp / (dm * (dm + dp)));
        f.axpy((dp - dm) / (dm * dp), &states[i]);
        f.axpy(dm / (dp * (dm + dp)), &states[i + 1]);
        out_t.push(times[i]);
        out_f.push(f);
    }
    (out_t, out_f)
}

struct SampleGeometry {
    cylinder: Cylinder,
    nodes: Vec<u32>,
    /// `|Q|^{-1/p}` with `|Q| = (R⁴/2)·vol(B ∩ H)` (plain volume).
    qinv: f64,
}

/// Geometry of every covered plan sample; windows outside `[t_min, t_max]`
/// are dropped and counted.
fn build_samples(
    plan: &SupSamplingPlan,
    p: f64,
    coords: &[Vec<f64>],
    lebesgue: &[f64],
    t_min: f64,
    t_max: f64,
) -> (Vec<SampleGeometry>, usize) {
    let period = plan.grid.period();
    let slack = 1e-12 * t_max.abs().max(1.0);
    let mut out = Vec::new();
    let mut skipped = 0;
    for &r in &plan.radii {
        let t_hi = r.powi(4);
        let t_lo = 0.5 * t_hi;
        for &c in &plan.centers {
            if t_lo < t_min - slack || t_hi > t_max + slack {
                skipped += 1;
                continue;
            }
            let center = &coords[c];
            let hx = center[center.len() - 1];
            let mut nodes = Vec::new();
            let mut vol = 0.0;
            for (i, y) in coords.iter().enumerate() {
                if wrapped_quasimetric(period, center, y, hx, y[y.len() - 1]) < r {
                    nodes.push(i as u32);
                    vol += lebesgue[i];
                }
            }
            let ball = Ball {
                center: center.clone(),
                radius: r,
            };
            out.push(SampleGeometry {
                cylinder: Cylinder::initial_layer(ball),
                nodes,
                qinv: (t_lo * vol).powf(-1.0 / p),
            });
        }
    }
    (out, skipped)
}

fn validate_p(p: f64) -> Result<()> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "integrability exponent must satisfy 1 ≤ p < ∞, got {p}"
        )));
    }
    Ok(())
}

/// Sampled trajectory norm: `sup_t ‖∇u(t)‖_∞` plus, over the plan's
/// cylinders `Q = (R⁴/2, R⁴] × B_R(x)`, the normalized weighted block sum
///
/// ```text
///     |Q|^{-1/p} Σ R^{4l+|α|-1}(R+√x_n)^{|α|-2j-1} ‖∂_t^l ∂^α u‖_{L^p(Q, μ_{jp})},
/// ```
///
/// the sum running over the admissible derivative blocks of
/// [`cz_indices`]. Time derivatives are centered differences of the stored
/// snapshots, so the trajectory needs at least three of them; samples whose
/// window is not covered by the interior snapshot times are skipped and
/// counted in the report.
pub fn xp_norm_detailed(traj: &Trajectory, p: f64, plan: &SupSamplingPlan) -> Result<NormReport> {
    validate_p(p)?;
    let grid = &plan.grid;
    if traj.states.len() < 3 {
        return Err(Error::InvalidParameter(
            "trajectory norm needs at least three snapshots for time differencing".into(),
        ));
    }
    for s in &traj.states {
        grid.check_same_grid(s)?;
    }

    let n = grid.dim();
    let coords: Vec<Vec<f64>> = (0..grid.len()).map(|i| grid.coords_flat(i)).collect();
    let lebesgue = grid.measure_weights(WeightSpec::new(0.0)?, QuadratureDegree::Linear);
    let indices = cz_indices(n);
    let mut mu: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for idx in &indices {
        if !mu.contains_key(&idx.j) {
            let w = grid.measure_weights(WeightSpec::new(idx.j as f64 * p)?, QuadratureDegree::Linear);
            mu.insert(idx.j, w);
        }
    }

    let (dt_times, dt_fields) = time_derivative_fields(&traj.times, &traj.states);
    let (samples_geom, skipped) =
        build_samples(plan, p, &coords, &lebesgue, dt_times[0], dt_times[dt_times.len() - 1]);

    let mut gradient_part = 0.0f64;
    for s in &traj.states {
        gradient_part = gradient_part.max(evolution::gradient_sup(s, BLOCK_ACCURACY)?);
    }

    let mut lp_values = vec![vec![0.0; indices.len()]; samples_geom.len()];
    for (bi, idx) in indices.iter().enumerate() {
        let measure = &mu[&idx.j];
        let (times, views): (&[f64], Vec<&[f64]>) = if idx.l == 1 {
            (&dt_times, dt_fields.iter().map(|f| f.values()).collect())
        } else {
            let fields: Result<Vec<Field>> = traj
                .states
                .iter()
                .map(|u| grid.derivative_multi(u, &idx.alpha, BLOCK_ACCURACY))
                .collect();
            let fields = fields?;
            let views = fields.iter().map(|f| f.values().to_vec()).collect::<Vec<_>>();
            // hold the data, not the dropped fields
            for (si, s) in samples_geom.iter().enumerate() {
                let slices: Vec<&[f64]> = views.iter().map(|v| v.as_slice()).collect();
                lp_values[si][bi] = localized_lp(
                    &traj.times,
                    &slices,
                    &s.nodes,
                    measure,
                    p,
                    s.cylinder.t_lo,
                    s.cylinder.t_hi,
                )
                .expect("window coverage established while building samples");
            }
            continue;
        };
        for (si, s) in samples_geom.iter().enumerate() {
            lp_values[si][bi] = localized_lp(
                times,
                &views,
                &s.nodes,
                measure,
                p,
                s.cylinder.t_lo,
                s.cylinder.t_hi,
            )
            .expect("window coverage established while building samples");
        }
    }

    let mut samples = Vec::with_capacity(samples_geom.len());
    let mut best = 0.0f64;
    for (si, geom) in samples_geom.into_iter().enumerate() {
        let r = geom.cylinder.ball.radius;
        let xn = *geom.cylinder.ball.center.last().unwrap();
        let weighted: Vec<f64> = indices
            .iter()
            .zip(&lp_values[si])
            .map(|(idx, lp)| geom.qinv * xp_block_weight(idx, r, xn) * lp)
            .collect();
        let total: f64 = weighted.iter().sum();
        best = best.max(total);
        samples.push(NormSample {
            cylinder: geom.cylinder,
            lp_values: lp_values[si].clone(),
            weighted,
            total,
        });
    }

    Ok(NormReport {
        value: gradient_part + best,
        gradient_part,
        samples,
        skipped,
    })
}

/// Value-only variant of [`xp_norm_detailed`].
pub fn xp_norm(traj: &Trajectory, p: f64, plan: &SupSamplingPlan) -> Result<f64> {
    Ok(xp_norm_detailed(traj, p, plan)?.value)
}

/// Sampled source norm: over the plan's cylinders,
///
/// ```text
///     |Q|^{-1/p} R³ (R+√x_n)^{-1} ‖f‖_{L^p(Q)},
/// ```
///
/// for a source given by snapshots at the provided times. Samples whose
/// window is not covered by the snapshot range are skipped and counted.
pub fn yp_norm_detailed(
    times: &[f64],
    sources: &[Field],
    p: f64,
    plan: &SupSamplingPlan,
) -> Result<NormReport> {
    validate_p(p)?;
    if times.len() != sources.len() || times.len() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "source norm needs matching times and snapshots (≥ 2), got {} and {}",
            times.len(),
            sources.len()
        )));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter(
            "snapshot times must be strictly increasing".into(),
        ));
    }
    let grid = &plan.grid;
    for s in sources {
        grid.check_same_grid(s)?;
    }
    let coords: Vec<Vec<f64>> = (0..grid.len()).map(|i| grid.coords_flat(i)).collect();
    let lebesgue = grid.measure_weights(WeightSpec::new(0.0)?, QuadratureDegree::Linear);
    let (samples_geom, skipped) =
        build_samples(plan, p, &coords, &lebesgue, times[0], times[times.len() - 1]);
    let views: Vec<&[f64]> = sources.iter().map(|f| f.values()).collect();

    let mut samples = Vec::with_capacity(samples_geom.len());
    let mut best = 0.0f64;
    for geom in samples_geom {
        let r = geom.cylinder.ball.radius;
        let xn = *geom.cylinder.ball.center.last().unwrap();
        let lp = localized_lp(
            times,
            &views,
            &geom.nodes,
            &lebesgue,
            p,
            geom.cylinder.t_lo,
            geom.cylinder.t_hi,
        )
        .expect("window coverage established while building samples");
        let weighted = geom.qinv * yp_weight(r, xn) * lp;
        best = best.max(weighted);
        samples.push(NormSample {
            cylinder: geom.cylinder,
            lp_values: vec![lp],
            weighted: vec![weighted],
            total: weighted,
        });
    }
    Ok(NormReport {
        value: best,
        gradient_part: 0.0,
        samples,
        skipped,
    })
}

/// Value-only variant of [`yp_norm_detailed`].
pub fn yp_norm(times: &[f64], sources: &[Field], p: f64, plan: &SupSamplingPlan) -> Result<f64> {
    Ok(yp_norm_detailed(times, sources, p, plan)?.value)
}

/// Measured constants of the quadratic smallness estimate for the
/// nonlinearity.
#[derive(Debug, Clone, Copy)]
pub struct QuadraticBound {
    /// Numerator: source norm of the (difference of) nonlinearity images.
    pub numerator: f64,
    /// Denominator: `‖u‖²` for the plain form, `(‖u₁‖+‖u₂‖)·‖u₁−u₂‖` for the
    /// difference form.
    pub denominator: f64,
    pub ratio: f64,
}

/// `‖f∘u‖ / ‖u‖²`: the source norm of the snapshotwise nonlinearity against
/// the squared trajectory norm. Vanishing trajectories are rejected (the
/// ratio is undefined) and so are trajectories outside the smallness regime
/// `‖u‖ ≤ ½`, where the quadratic model stops being meaningful.
pub fn quadratic_bound_check(
    traj: &Trajectory,
    p: f64,
    plan: &SupSamplingPlan,
) -> Result<QuadraticBound> {
    let x = xp_norm(traj, p, plan)?;
    if x == 0.0 {
        return Err(Error::InvalidParameter(
            "quadratic ratio is undefined for a vanishing trajectory".into(),
        ));
    }
    if x > 0.5 {
        return Err(Error::InvalidParameter(format!(
            "trajectory norm {x:.3e} is outside the smallness regime ≤ 1/2"
        )));
    }
    let sources: Result<Vec<Field>> = traj
        .states
        .iter()
        .map(|u| hodograph::nonlinearity(u, BLOCK_ACCURACY))
        .collect();
    let y = yp_norm(&traj.times, &sources?, p, plan)?;
    Ok(QuadraticBound {
        numerator: y,
        denominator: x * x,
        ratio: y / (x * x),
    })
}

/// Difference form `‖f∘u₁ − f∘u₂‖ / ((‖u₁‖+‖u₂‖)·‖u₁−u₂‖)` of
/// [`quadratic_bound_check`]; with `u₂ = 0` it reduces to the plain ratio.
/// Requires both trajectories on the same snapshot times; identical or
/// vanishing pairs are rejected.
pub fn quadratic_difference_check(
    a: &Trajectory,
    b: &Trajectory,
    p: f64,
    plan: &SupSamplingPlan,
) -> Result<QuadraticBound> {
    if a.times.len() != b.times.len()
        || a.times
            .iter()
            .zip(&b.times)
            .any(|(s, t)| (s - t).abs() > 1e-12 * (1.0 + s.abs()))
    {
        return Err(Error::ShapeMismatch(
            "difference check needs two trajectories on the same snapshot times".into(),
        ));
    }
    let xa = xp_norm(a, p, plan)?;
    let xb = xp_norm(b, p, plan)?;
    if xa.max(xb) > 0.5 {
        return Err(Error::InvalidParameter(format!(
            "trajectory norms {xa:.3e}, {xb:.3e} are outside the smallness regime ≤ 1/2"
        )));
    }
    let diff_states: Vec<Field> = a
        .states
        .iter()
        .zip(&b.states)
        .map(|(ua, ub)| ua.sub(ub))
        .collect();
    let diff = Trajectory::from_snapshots(a.times.clone(), diff_states)?;
    let xd = xp_norm(&diff, p, plan)?;
    let denominator = (xa + xb) * xd;
    if denominator == 0.0 {
        return Err(Error::InvalidParameter(
            "difference ratio is undefined for identical or vanishing trajectories".into(),
        ));
    }
    let fd: Result<Vec<Field>> = a
        .states
        .iter()
        .zip(&b.states)
        .map(|(ua, ub)| {
            Ok(hodograph::nonlinearity(ua, BLOCK_ACCURACY)?
                .sub(&hodograph::nonlinearity(ub, BLOCK_ACCURACY)?))
        })
        .collect();
    let y = yp_norm(&a.times, &fd?, p, plan)?;
    Ok(QuadraticBound {
        numerator: y,
        denominator,
        ratio: y / denominator,
    })
}

/// One evaluated film-side cylinder.
#[derive(Debug, Clone)]
pub struct FilmNormSample {
    /// Window top `s = R⁴`.
    pub time: f64,
    pub center: Vec<f64>,
    pub radius: f64,
    /// Whether the ball reached nodes outside the positivity set; the
    /// integration is then clipped to the set.
    pub clipped: bool,
    pub lp_values: Vec<f64>,
    pub weighted: Vec<f64>,
    pub total: f64,
}

/// Report of a film-side seminorm evaluation.
#[derive(Debug, Clone)]
pub struct FilmSeminormReport {
    pub value: f64,
    pub samples: Vec<FilmNormSample>,
    /// Number of samples whose ball escaped the positivity set.
    pub clipped: usize,
    /// Samples dropped for lack of snapshot coverage of their window.
    pub skipped: usize,
}

/// Film-side analogue of the trajectory norm, evaluated directly on stored
/// film states: with `R = s^{1/4}` anchored at dyadic fractions of the final
/// snapshot time and centers decimated over the positivity set,
///
/// ```text
///     |Q_R(y)|^{-1/p} Σ R^{4l+|α|-1} (R + h(s,y)^{1/4})^{|α|-2j-1}
///                        ‖ (√h)^j ∂_s^l ∂^α √h ‖_{L^p(Q_R(y))},
/// ```
///
/// where the ball uses the intrinsic quasimetric with `√h` as the height,
/// derivatives of `√h` are one-sided-corrected differences restricted to the
/// positivity set, and `∂_s` is a centered difference of snapshots. Cylinders
/// reaching dry nodes are clipped to the positivity set and flagged; windows
/// without snapshot coverage are skipped and counted.
pub fn film_xp_seminorm_detailed(
    films: &[FilmState],
    p: f64,
    levels: usize,
    stride: usize,
) -> Result<FilmSeminormReport> {
    validate_p(p)?;
    if films.len() < 3 {
        return Err(Error::InvalidParameter(
            "film seminorm needs at least three snapshots for time differencing".into(),
        ));
    }
    if levels == 0 || stride == 0 {
        return Err(Error::InvalidParameter(
            "film seminorm needs levels ≥ 1 and stride ≥ 1".into(),
        ));
    }
    let g = Arc::clone(films[0].grid());
    for f in films {
        if !Arc::ptr_eq(f.grid(), &g) {
            return Err(Error::ShapeMismatch(
                "all film snapshots must live on the same grid".into(),
            ));
        }
    }
    let times: Vec<f64> = films.iter().map(|f| f.time).collect();
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter(
            "film snapshot times must be strictly increasing".into(),
        ));
    }
    let n = g.dim();
    let len = g.len();
    let cell = g.cell_volume();
    let lebesgue = vec![cell; len];
    let coords: Vec<Vec<f64>> = (0..len).map(|i| g.coords_flat(i)).collect();
    let indices = cz_indices(n);

    let sqrt_h: Vec<Vec<f64>> = films.iter().map(|f| f.sqrt_height()).collect();
    let masks: Vec<Vec<bool>> = films.iter().map(|f| f.positivity_mask()).collect();

    // Centered time differences of √h on nodes positive in all three
    // neighbouring snapshots.
    let nt = times.len();
    let mut dt_times = Vec::with_capacity(nt - 2);
    let mut dt_fields = Vec::with_capacity(nt - 2);
    for i in 1..nt - 1 {
        let dm = times[i] - times[i - 1];
        let dp = times[i + 1] - times[i];
        let (cm, c0, cp) = (
            -dp / (dm * (dm + dp)),
            (dp - dm) / (dm * dp),
            dm / (dp * (dm + dp)),
        );
        let mut f = vec![0.0; len];
        for k in 0..len {
            if masks[i - 1][k] && masks[i][k] && masks[i + 1][k] {
                f[k] = cm * sqrt_h[i - 1][k] + c0 * sqrt_h[i][k] + cp * sqrt_h[i + 1][k];
            }
        }
        dt_times.push(times[i]);
        dt_fields.push(f);
    }

    // Spatial blocks (√h)^j ∂^α √h per snapshot, per admissible (l = 0)
    // index: derivatives composed axis by axis inside the positivity set.
    let spatial_block = |snap: usize, idx: &CzIndex| -> Vec<f64> {
        let mask = &masks[snap];
        let mut field = sqrt_h[snap].clone();
        for (axis, &order) in idx.alpha.iter().enumerate() {
            let mut k = order;
            while k >= 2 {
                field = hodograph::film_axis_second(&g, &field, mask, axis);
                k -= 2;
            }
            if k == 1 {
                field = hodograph::film_axis_first(&g, &field, mask, axis);
            }
        }
        if idx.j > 0 {
            for (v, (sh, &inside)) in field.iter_mut().zip(sqrt_h[snap].iter().zip(mask)) {
                *v *= sh.powi(idx.j as i32);
                if !inside {
                    *v = 0.0;
                }
            }
        }
        field
    };

    // Decimated center lattice restricted to nodes positive in every
    // snapshot, so the height entering the weights is well defined.
    let counts: Vec<usize> = (0..n)
        .map(|a| {
            let axis_len = if a + 1 == n { g.vertical_len() } else { g.tangential_nodes() };
            (axis_len + stride - 1) / stride
        })
        .collect();
    let total: usize = counts.iter().product();
    let mut centers = Vec::new();
    let mut idx_buf = vec![0usize; n];
    for mut c in 0..total {
        for a in (0..n).rev() {
            idx_buf[a] = (c % counts[a]) * stride;
            c /= counts[a];
        }
        // flat index: tangential axes first, vertical last
        let mut flat = 0usize;
        for a in 0..n {
            let axis_len = if a + 1 == n { g.vertical_len() } else { g.tangential_nodes() };
            flat = flat * axis_len + idx_buf[a];
        }
        if masks.iter().all(|m| m[flat]) {
            centers.push(flat);
        }
    }

    let s_final = times[nt - 1];
    let mut report = FilmSeminormReport {
        value: 0.0,
        samples: Vec::new(),
        clipped: 0,
        skipped: 0,
    };
    let usable_lo = dt_times[0];
    let usable_hi = dt_times[dt_times.len() - 1];
    let slack = 1e-12 * s_final.abs().max(1.0);

    for k in 1..=levels {
        let s_top = s_final * 0.5f64.powi(k as i32);
        let r = s_top.powf(0.25);
        let t_lo = 0.5 * s_top;
        if t_lo < usable_lo - slack || s_top > usable_hi + slack {
            report.skipped += centers.len();
            continue;
        }
        // Snapshot whose time is nearest the window top provides the heights
        // for the ball geometry and the weights.
        let top = times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - s_top).abs().total_cmp(&(b.1 - s_top).abs()))
            .map(|(i, _)| i)
            .unwrap();
        let h_top = &films[top].h;
        let mask_top = &masks[top];

        for &c in &centers {
            let center = &coords[c];
            let mut nodes = Vec::new();
            let mut clipped = false;
            for (i, y) in coords.iter().enumerate() {
                let d = wrapped_quasimetric(
                    g.period(),
                    center,
                    y,
                    h_top[c].sqrt(),
                    h_top[i].sqrt(),
                );
                if d < r {
                    nodes.push(i as u32);
                    if !mask_top[i] {
                        clipped = true;
                    }
                }
            }
            let qinv = (t_lo * cell * nodes.len() as f64).powf(-1.0 / p);
            let mut lp_values = Vec::with_capacity(indices.len());
            let mut weighted = Vec::with_capacity(indices.len());
            let mut total_w = 0.0;
            let mut covered = true;
            for idx in &indices {
                let lp = if idx.l == 1 {
                    let views: Vec<&[f64]> = dt_fields.iter().map(|f| f.as_slice()).collect();
                    localized_lp(&dt_times, &views, &nodes, &lebesgue, p, t_lo, s_top)
                } else {
                    let fields: Vec<Vec<f64>> =
                        (0..nt).map(|snap| spatial_block(snap, idx)).collect();
                    let views: Vec<&[f64]> = fields.iter().map(|f| f.as_slice()).collect();
                    localized_lp(&times, &views, &nodes, &lebesgue, p, t_lo, s_top)
                };
                let lp = match lp {
                    Some(v) => v,
                    None => {
                        covered = false;
                        break;
                    }
                };
                let w = qinv * xp_block_weight(idx, r, sqrt_h[top][c]);
                lp_values.push(lp);
                weighted.push(w * lp);
                total_w += w * lp;
            }
            if !covered {
                report.skipped += 1;
                continue;
            }
            if clipped {
                report.clipped += 1;
            }
            report.value = report.value.max(total_w);
            report.samples.push(FilmNormSample {
                time: s_top,
                center: center.clone(),
                radius: r,
                clipped,
                lp_values,
                weighted,
                total: total_w,
            });
        }
    }
    Ok(report)
}

/// Value-only variant of [`film_xp_seminorm_detailed`].
pub fn film_xp_seminorm(films: &[FilmState], p: f64, levels: usize, stride: usize) -> Result<f64> {
    Ok(film_xp_seminorm_detailed(films, p, levels, stride)?.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hodograph::FilmGrid;

    fn grid_1d(m: usize, gamma: f64) -> Arc<Grid> {
        Grid::new(1, m, 8.0, gamma, 1, 1.0).unwrap()
    }

    fn synthetic_trajectory(
        grid: &Arc<Grid>,
        times: Vec<f64>,
        f: impl Fn(f64, &[f64]) -> f64,
    ) -> Trajectory {
        let states = times
            .iter()
            .map(|&t| Field::from_fn(Arc::clone(grid), |x| f(t, x)))
            .collect();
        Trajectory::from_snapshots(times, states).unwrap()
    }

    fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|k| a + (b - a) * k as f64 / (n - 1) as f64)
            .collect()
    }

    #[test]
    fn lipschitz_matches_closed_forms() {
        let g = grid_1d(64, 2.0);
        let vertical = Field::from_fn(Arc::clone(&g), |x| x[0]);
        assert!((lipschitz_seminorm(&vertical).unwrap() - 1.0).abs() < 1e-12);
        let constant = Field::from_fn(Arc::clone(&g), |_| 0.4);
        // graded-grid stencil weights annihilate constants to rounding only
        assert!(lipschitz_seminorm(&constant).unwrap() < 1e-12);

        let g2 = Grid::new(2, 32, 4.0, 2.0, 64, std::f64::consts::TAU).unwrap();
        let wave = Field::from_fn(Arc::clone(&g2), |x| 0.1 * x[0].sin());
        let measured = lipschitz_seminorm(&wave).unwrap();
        // central differences see 0.1·sin(Δ)/Δ at the crest
        assert!((measured - 0.1).abs() < 2e-4, "measured {measured}");
    }

    #[test]
    fn dyadic_plan_radii_stay_inside_horizon() {
        let g = grid_1d(32, 2.0);
        let plan = SupSamplingPlan::dyadic(&g, 0.75, 3, 8).unwrap();
        assert_eq!(plan.radii().len(), 3);
        for &r in plan.radii() {
            assert!(r.powi(4) > 0.0 && r.powi(4) < 0.75);
        }
        assert!(!plan.centers().is_empty());
        assert!((plan.smallest_window() - 0.75 / 16.0).abs() < 1e-15);
        assert!(plan.max_snapshot_spacing() > 0.0);
        assert!(SupSamplingPlan::dyadic(&g, -1.0, 3, 8).is_err());
        assert!(SupSamplingPlan::with_samples(&g, vec![1.0], vec![0], 1.0).is_err());
    }

    #[test]
    fn trajectory_norm_vanishes_only_for_affine_states() {
        let g = grid_1d(48, 2.0);
        let times = linspace(0.0, 0.4, 17);
        let plan = SupSamplingPlan::dyadic(&g, 0.4, 2, 8).unwrap();

        let zero = synthetic_trajectory(&g, times.clone(), |_, _| 0.0);
        assert_eq!(xp_norm(&zero, 4.0, &plan).unwrap(), 0.0);

        // every derivative block annihilates an affine profile; the graded
        // grid amplifies rounding by 1/h², hence the 1e-10 slack
        let affine = synthetic_trajectory(&g, times, |_, x| 0.3 * x[0]);
        let report = xp_norm_detailed(&affine, 4.0, &plan).unwrap();
        assert!((report.value - 0.3).abs() < 1e-10, "value {}", report.value);
        assert_eq!(report.skipped, 0);
        for s in &report.samples {
            assert!(s.total.abs() < 1e-10);
        }
    }

    #[test]
    fn short_trajectories_skip_uncovered_windows() {
        let g = grid_1d(48, 2.0);
        let times = linspace(0.0, 0.1, 9);
        let traj = synthetic_trajectory(&g, times, |t, x| 0.1 * (x[0] * (1.0 + t)).sin());
        // horizon 1.0 puts the largest window (1/4, 1/2] far past the run
        let plan = SupSamplingPlan::dyadic(&g, 1.0, 1, 16).unwrap();
        let report = xp_norm_detailed(&traj, 4.0, &plan).unwrap();
        assert!(report.samples.is_empty());
        assert_eq!(report.skipped, plan.centers().len());
        assert!((report.value - report.gradient_part).abs() < 1e-15);
    }

    #[test]
    fn constant_source_reproduces_window_geometry() {
        // f ≡ 1: the localized L^p mass cancels against |Q|^{-1/p} exactly,
        // leaving the weight R³/(R+√x_n); the sup sits at the boundary
        // center with the largest radius, R² = √(T/2).
        let g = grid_1d(64, 2.0);
        let times = linspace(0.0, 1.0, 33);
        let ones: Vec<Field> = times
            .iter()
            .map(|_| Field::from_fn(Arc::clone(&g), |_| 1.0))
            .collect();
        let plan = SupSamplingPlan::dyadic(&g, 1.0, 2, 16).unwrap();
        let value = yp_norm(&times, &ones, 4.0, &plan).unwrap();
        let expected = 0.5f64.sqrt();
        assert!((value - expected).abs() < 1e-12, "value {value}");

        // refinement in time leaves the value unchanged
        let times2 = linspace(0.0, 1.0, 129);
        let ones2: Vec<Field> = times2
            .iter()
            .map(|_| Field::from_fn(Arc::clone(&g), |_| 1.0))
            .collect();
        let value2 = yp_norm(&times2, &ones2, 4.0, &plan).unwrap();
        assert!((value2 - expected).abs() < 1e-12);

        let zeros: Vec<Field> = times.iter().map(|_| Field::zeros(Arc::clone(&g))).collect();
        assert_eq!(yp_norm(&times, &zeros, 4.0, &plan).unwrap(), 0.0);
    }

    #[test]
    fn norms_scale_like_one_power_of_lambda() {
        // u_λ(t,x) = u(λ⁴t, λx) sampled on paired plans: the trajectory norm
        // picks up one factor of λ up to the bounded distortion of the
        // cylinder geometry.
        let g = grid_1d(128, 1.0);
        let lambda = 2.0f64;
        let profile = |x: f64| x * x * (-x * x).exp();
        let src = synthetic_trajectory(&g, linspace(0.0, 1.0, 81), |t, x| {
            0.2 * profile(x[0]) * (-t).exp()
        });
        let img = synthetic_trajectory(&g, linspace(0.0, 1.0 / 16.0, 81), |t, x| {
            0.2 * profile(lambda * x[0]) * (-lambda.powi(4) * t).exp()
        });

        let src_centers: Vec<usize> = (0..=128).step_by(8).collect();
        let img_centers: Vec<usize> = src_centers.iter().map(|c| c / 2).collect();
        let src_radii: Vec<f64> = (1..=3)
            .map(|k| (1.0 * 0.5f64.powi(k)).powf(0.25))
            .collect();
        let img_radii: Vec<f64> = src_radii.iter().map(|r| r / lambda).collect();
        let src_plan = SupSamplingPlan::with_samples(&g, src_radii, src_centers, 1.0).unwrap();
        let img_plan =
            SupSamplingPlan::with_samples(&g, img_radii, img_centers, 1.0 / 16.0).unwrap();

        let x_src = xp_norm(&src, 4.0, &src_plan).unwrap();
        let x_img = xp_norm(&img, 4.0, &img_plan).unwrap();
        let ratio = x_img / x_src;
        assert!(
            ratio > lambda / 3.0 && ratio < 3.0 * lambda,
            "ratio {ratio}, expected near {lambda}"
        );
    }

    #[test]
    fn quadratic_ratio_is_scale_free() {
        let g = grid_1d(96, 2.0);
        let times = linspace(0.0, 0.5, 21);
        let plan = SupSamplingPlan::dyadic(&g, 0.5, 2, 12).unwrap();
        let shape = |t: f64, x: f64| x * x * (-x * x).exp() * (1.0 - 0.3 * t);

        let mut ratios = Vec::new();
        for eps in [1e-1, 1e-2, 1e-3] {
            let traj =
                synthetic_trajectory(&g, times.clone(), |t, x| eps * 0.05 * shape(t, x[0]));
            let probe = quadratic_bound_check(&traj, 4.0, &plan).unwrap();
            assert!(probe.ratio > 0.0);
            ratios.push(probe.ratio);
        }
        let (lo, hi) = ratios
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(l, h), &r| (l.min(r), h.max(r)));
        assert!(hi / lo < 2.0, "ratios {ratios:?}");

        let zero = synthetic_trajectory(&g, times.clone(), |_, _| 0.0);
        assert!(quadratic_bound_check(&zero, 4.0, &plan).is_err());

        // difference form against the zero trajectory reduces to the plain
        // ratio
        let traj = synthetic_trajectory(&g, times, |t, x| 0.005 * shape(t, x[0]));
        let plain = quadratic_bound_check(&traj, 4.0, &plan).unwrap();
        let diff = quadratic_difference_check(&traj, &zero, 4.0, &plan).unwrap();
        assert!((plain.ratio - diff.ratio).abs() <= 1e-12 * plain.ratio);
    }

    #[test]
    fn enlarging_a_plan_never_decreases_values() {
        let g = grid_1d(64, 2.0);
        let times = linspace(0.0, 1.0, 41);
        let traj = synthetic_trajectory(&g, times.clone(), |t, x| {
            0.05 * (x[0] * 1.7).sin() * (-x[0]).exp() * (1.0 + 0.5 * t)
        });
        let sources: Vec<Field> = traj.states.clone();

        let r1 = (0.5f64).powf(0.25);
        let r2 = (0.25f64).powf(0.25);
        let small = SupSamplingPlan::with_samples(&g, vec![r1], vec![0, 16], 1.0).unwrap();
        let large =
            SupSamplingPlan::with_samples(&g, vec![r1, r2], vec![0, 8, 16, 32], 1.0).unwrap();

        let x_small = xp_norm(&traj, 4.0, &small).unwrap();
        let x_large = xp_norm(&traj, 4.0, &large).unwrap();
        assert!(x_large >= x_small);

        let y_small = yp_norm(&times, &sources, 4.0, &small).unwrap();
        let y_large = yp_norm(&times, &sources, 4.0, &large).unwrap();
        assert!(y_large >= y_small);
    }

    #[test]
    fn source_weight_is_dominated_by_block_weights() {
        for n in 1..=2 {
            for idx in cz_indices(n) {
                for r in [0.05f64, 0.3, 0.7] {
                    for xn in [0.0f64, 0.0025, 0.04] {
                        if r + xn.sqrt() <= 1.0 {
                            let y = yp_weight(r, xn);
                            let x = xp_block_weight(&idx, r, xn);
                            assert!(
                                y <= x * (1.0 + 1e-12),
                                "n={n} idx={idx:?} r={r} xn={xn}: {y} > {x}"
                            );
                        }
                    }
                }
            }
        }
    }

    fn parabolic_film(
        grid: &Arc<crate::hodograph::FilmGrid>,
        a: f64,
        b: f64,
        t: f64,
    ) -> FilmState {
        let h: Vec<f64> = (0..grid.len())
            .map(|i| {
                let y = grid.coords_flat(i);
                let z = a * (y[y.len() - 1] - b);
                if z > 0.0 {
                    z * z
                } else {
                    0.0
                }
            })
            .collect();
        FilmState::new(Arc::clone(grid), h, t).unwrap()
    }

    #[test]
    fn film_seminorm_vanishes_for_parabolic_profiles() {
        // binary-exact grid spacing, times and profile parameters keep
        // √h exactly affine on the positivity set, so every block — the
        // time difference included — vanishes bit-exactly
        let g = FilmGrid::new(1, 128, -1.0, 7.0, 1, 1.0).unwrap();
        let times: Vec<f64> = (1..=10).map(|k| k as f64 * 0.0625).collect();
        for (a, b) in [(1.0, 0.0), (1.25, 0.5)] {
            let films: Vec<FilmState> =
                times.iter().map(|&t| parabolic_film(&g, a, b, t)).collect();
            let report = film_xp_seminorm_detailed(&films, 4.0, 1, 8).unwrap();
            assert!(!report.samples.is_empty());
            assert_eq!(report.value, 0.0, "a={a} b={b}");
        }

        let g2 = FilmGrid::new(2, 32, -1.0, 5.0, 8, 2.0).unwrap();
        let films: Vec<FilmState> = times
            .iter()
            .map(|&t| parabolic_film(&g2, 1.0, 0.0, t))
            .collect();
        assert_eq!(film_xp_seminorm(&films, 4.0, 1, 4).unwrap(), 0.0);
    }

    #[test]
    fn film_seminorm_flags_cylinders_leaving_the_wetted_region() {
        let g = FilmGrid::new(1, 96, -1.0, 7.0, 1, 1.0).unwrap();
        let times = linspace(0.1, 1.0, 10);
        let films: Vec<FilmState> = times
            .iter()
            .map(|&t| {
                let h: Vec<f64> = (0..g.len())
                    .map(|i| {
                        let y = g.coords_flat(i)[0];
                        let profile = y * (1.0 + 0.05 * (-((y - 1.0) * (y - 1.0))).exp());
                        if y > 0.0 {
                            profile * profile
                        } else {
                            0.0
                        }
                    })
                    .collect();
                FilmState::new(Arc::clone(&g), h, t).unwrap()
            })
            .collect();
        let report = film_xp_seminorm_detailed(&films, 4.0, 1, 4).unwrap();
        assert!(report.clipped > 0, "expected clipped cylinders near the contact line");
        assert!(report.value > 0.0);
    }
}
