//! Intrinsic geometry of the degenerate operator: the boundary-adapted
//! quasimetric, its balls and parabolic cylinders, the family of measures
//! `μ_σ = x_n^σ dx`, and the combinatorial bookkeeping (derivative index
//! table, Muckenhoupt weights, Vitali covers) used by the norm machinery.
//!
//! The working distance is the explicit quasimetric
//!
//! ```text
//!     ρ(x, y) = |x - y| / (√x_n + √y_n + √|x - y|),
//! ```
//!
//! comparable to the geodesic distance of the singular metric
//! `g_x(v, w) = v·w / x_n`. Its balls interpolate between Euclidean balls of
//! radius `R √x_n` deep inside the half-space and parabolically flattened
//! balls of vertical extent `∼ R²` at the boundary; the natural scaling
//! pairs a spatial ball of radius `R` with a time span `R⁴`.
//!
//! All Monte Carlo estimates are deterministic: they draw from a counter
//! seeded ChaCha stream and stratify the vertical coordinate, where the
//! measures `μ_σ` vary fastest.

use crate::error::{Error, Result};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Quasimetric `ρ(x, y) = |x - y| / (√x_n + √y_n + √|x - y|)` on the closed
/// half-space (last coordinate vertical, `≥ 0`). Returns 0 for coinciding
/// points.
pub fn rho(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut sq = 0.0;
    for (a, b) in x.iter().zip(y) {
        sq += (a - b) * (a - b);
    }
    if sq == 0.0 {
        return 0.0;
    }
    let e = sq.sqrt();
    let xn = x[x.len() - 1];
    let yn = y[y.len() - 1];
    debug_assert!(xn >= 0.0 && yn >= 0.0);
    e / (xn.sqrt() + yn.sqrt() + e.sqrt())
}

/// Parabolic distance `(|t - s| + ρ(x, y)⁴)^{1/4}` between space-time points.
pub fn parabolic_distance(t: f64, x: &[f64], s: f64, y: &[f64]) -> f64 {
    ((t - s).abs() + rho(x, y).powi(4)).powf(0.25)
}

/// Quasimetric ball `{ y : ρ(center, y) < radius }` in the half-space.
#[derive(Debug, Clone, PartialEq)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Ball> {
        if center.is_empty() || center.len() > crate::grid::MAX_DIM {
            return Err(Error::InvalidParameter(format!(
                "ball center must have dimension 1..=3, got {}",
                center.len()
            )));
        }
        let xn = center[center.len() - 1];
        if xn < 0.0 || !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "ball needs x_n ≥ 0 and radius > 0, got x_n = {xn}, radius = {radius}"
            )));
        }
        Ok(Ball { center, radius })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    fn vertical_center(&self) -> f64 {
        self.center[self.center.len() - 1]
    }

    /// Upper bound on the Euclidean distance from the center to any ball
    /// point: from `|x-y| < R(√x_n + √y_n + √|x-y|)` and `y_n ≤ x_n + |x-y|`
    /// one gets `|x-y| < (R + √(R² + 2R√x_n))²`.
    pub fn euclidean_reach(&self) -> f64 {
        let r = self.radius;
        let sx = self.vertical_center().sqrt();
        let s = r + (r * r + 2.0 * r * sx).sqrt();
        s * s
    }

    /// Whether the ball contains boundary points (`x_n = 0` is inside the
    /// ball iff `√x_n / 2 < R`).
    pub fn touches_boundary(&self) -> bool {
        self.vertical_center() < 4.0 * self.radius * self.radius
    }

    pub fn contains(&self, y: &[f64]) -> bool {
        rho(&self.center, y) < self.radius
    }

    /// Axis-aligned bounding box `(lo, hi)` clipped to the half-space.
    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        let e = self.euclidean_reach();
        let n = self.dim();
        let mut lo = Vec::with_capacity(n);
        let mut hi = Vec::with_capacity(n);
        for (a, &c) in self.center.iter().enumerate() {
            if a + 1 == n {
                lo.push((c - e).max(0.0));
                hi.push(c + e);
            } else {
                lo.push(c - e);
                hi.push(c + e);
            }
        }
        (lo, hi)
    }
}

/// Parabolic cylinder `(t_lo, t_hi] × B`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cylinder {
    pub t_lo: f64,
    pub t_hi: f64,
    pub ball: Ball,
}

impl Cylinder {
    /// Top-anchored cylinder `(t - R⁴, t] × B_R(x)`.
    pub fn top_anchored(t: f64, ball: Ball) -> Cylinder {
        let r4 = ball.radius.powi(4);
        Cylinder {
            t_lo: t - r4,
            t_hi: t,
            ball,
        }
    }

    /// Initial-layer cylinder `(R⁴/2, R⁴] × B_R(x)` used by the parabolic
    /// function spaces.
    pub fn initial_layer(ball: Ball) -> Cylinder {
        let r4 = ball.radius.powi(4);
        Cylinder {
            t_lo: 0.5 * r4,
            t_hi: r4,
            ball,
        }
    }

    pub fn contains(&self, s: f64, y: &[f64]) -> bool {
        s > self.t_lo && s <= self.t_hi && self.ball.contains(y)
    }

    /// Time extent of the cylinder.
    pub fn duration(&self) -> f64 {
        self.t_hi - self.t_lo
    }
}

/// Deterministic Monte Carlo estimate of `μ_σ(B) = ∫_B x_n^σ dx`.
///
/// Points are drawn from the bounding box with the vertical coordinate
/// stratified (one stratum per sample) so boundary balls — where `x_n^σ`
/// varies most — behave like a one-dimensional quadrature.
pub fn ball_measure(ball: &Ball, sigma: f64, samples: usize, seed: u64) -> Result<f64> {
    if sigma <= -1.0 {
        return Err(Error::InvalidParameter(format!(
            "measure exponent must be > -1, got {sigma}"
        )));
    }
    if samples == 0 {
        return Err(Error::InvalidParameter("need at least one sample".into()));
    }
    Ok(montecarlo_ball_integral(ball, &[sigma], samples, seed)[0])
}

/// Shared sampler: estimates `∫_B x_n^e dx` for every exponent in `exps`
/// from one stratified point cloud (errors correlate across exponents,
/// which benefits ratio statistics).
fn montecarlo_ball_integral(ball: &Ball, exps: &[f64], samples: usize, seed: u64) -> Vec<f64> {
    let (lo, hi) = ball.bounding_box();
    let n = ball.dim();
    let mut volume = 1.0;
    for a in 0..n {
        volume *= hi[a] - lo[a];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums = vec![0.0f64; exps.len()];
    let mut point = vec![0.0f64; n];
    let inv = 1.0 / samples as f64;
    for s in 0..samples {
        for a in 0..n - 1 {
            point[a] = rng.gen_range(lo[a]..hi[a]);
        }
        // stratified vertical coordinate
        let u: f64 = rng.gen();
        point[n - 1] = lo[n - 1] + (s as f64 + u) * inv * (hi[n - 1] - lo[n - 1]);
        if ball.contains(&point) {
            let xn = point[n - 1];
            for (acc, &e) in sums.iter_mut().zip(exps) {
                *acc += if e == 0.0 { 1.0 } else { xn.powf(e) };
            }
        }
    }
    sums.iter().map(|s| s * inv * volume).collect()
}

/// Scale factor `δ_{l,α}(r, x) = r^{-4l-|α|} (r + √x_n)^{-|α|}` normalizing
/// the derivative `∂_t^l ∂^α` of a kernel probe at observation scale `r`
/// and height `x_n`. `alpha_abs` is the total spatial order `|α|`.
pub fn delta_factor(l: usize, alpha_abs: usize, r: f64, x_n: f64) -> f64 {
    debug_assert!(r > 0.0 && x_n >= 0.0);
    r.powi(-(4 * l as i32 + alpha_abs as i32)) * (r + x_n.sqrt()).powi(-(alpha_abs as i32))
}

/// One entry of the derivative bookkeeping table: the weighted derivative
/// `x_n^j ∂_t^l ∂^α u` with `j = 2l + |α| - 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CzIndex {
    /// Vertical weight exponent `j = 2l + |α| - 2` (always a nonnegative
    /// integer for admissible entries).
    pub j: usize,
    /// Time-derivative order.
    pub l: usize,
    /// Spatial multi-index (length = dimension, vertical axis last).
    pub alpha: Vec<usize>,
}

impl CzIndex {
    pub fn alpha_abs(&self) -> usize {
        self.alpha.iter().sum()
    }
}

/// Enumerate the admissible weighted derivatives in dimension `n`: all
/// `(j, l, α)` with `j = 2l + |α| - 2 ≥ 0` and `2j ≤ |α|`. These are exactly
/// the four families `∂_t u`, `D² u`, `x_n D³ u`, `x_n² D⁴ u`; the list is
/// ordered by family and lexicographically within a family.
pub fn cz_indices(n: usize) -> Vec<CzIndex> {
    assert!((1..=crate::grid::MAX_DIM).contains(&n));
    let mut out = Vec::new();
    // time-derivative family
    out.push(CzIndex {
        j: 0,
        l: 1,
        alpha: vec![0; n],
    });
    // spatial families |α| = 2, 3, 4 with j = |α| - 2
    for total in 2..=4usize {
        for alpha in multi_indices(n, total) {
            out.push(CzIndex {
                j: total - 2,
                l: 0,
                alpha,
            });
        }
    }
    debug_assert!(out
        .iter()
        .all(|e| e.j + 2 == 2 * e.l + e.alpha_abs() && 2 * e.j <= e.alpha_abs()));
    out
}

/// All multi-indices of length `n` with total degree `total`, lexicographic.
fn multi_indices(n: usize, total: usize) -> Vec<Vec<usize>> {
    fn rec(n: usize, total: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if n == 1 {
            let mut full = prefix.clone();
            full.push(total);
            out.push(full);
            return;
        }
        for first in (0..=total).rev() {
            prefix.push(first);
            rec(n - 1, total - first, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(n, total, &mut Vec::new(), &mut out);
    out
}

/// Muckenhoupt `A_p` estimator for the power weight `ω = x_n^a` against the
/// reference measure `μ₁`:
///
/// ```text
///     max over the sample balls of
///         avg_B(ω dμ₁) · ( avg_B(ω^{-1/(p-1)} dμ₁) )^{p-1},
/// ```
///
/// with `avg_B(w dμ₁) = μ₁(B)^{-1} ∫_B w dμ₁`. Non-integrable averages on
/// balls touching the boundary are reported as `+∞` rather than sampled.
pub fn muckenhoupt_estimate(
    a: f64,
    p: f64,
    balls: &[Ball],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if !(p > 1.0) {
        return Err(Error::InvalidParameter(format!(
            "Muckenhoupt exponent requires p > 1, got {p}"
        )));
    }
    if balls.is_empty() {
        return Err(Error::InvalidParameter("need at least one ball".into()));
    }
    let dual = -a / (p - 1.0);
    let mut worst: f64 = 0.0;
    for (i, ball) in balls.iter().enumerate() {
        // Exponents of the three dx-integrals: μ₁(B), ∫ x^{a+1}, ∫ x^{dual+1}.
        if ball.touches_boundary() && (a + 1.0 <= -1.0 || dual + 1.0 <= -1.0) {
            return Ok(f64::INFINITY);
        }
        let vals = montecarlo_ball_integral(ball, &[1.0, a + 1.0, dual + 1.0], samples, seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mu1 = vals[0];
        if mu1 <= 0.0 {
            return Err(Error::Numerical(format!(
                "vanishing μ₁ mass on sample ball {i}"
            )));
        }
        let avg_w = vals[1] / mu1;
        let avg_dual = vals[2] / mu1;
        let product = avg_w * avg_dual.powf(p - 1.0);
        worst = worst.max(product);
    }
    Ok(worst)
}

/// Greedy Vitali-type cover of `ball` by balls of radius `r ≤ R`: centers are
/// chosen farthest-point-first from a dense deterministic sample cloud, so
/// each new center lies at quasidistance `≥ r` from all previous ones and the
/// `(1/3)`-shrinkings stay pairwise disjoint while the full-radius balls
/// cover the cloud.
pub fn vitali_cover(ball: &Ball, r: f64, seed: u64) -> Result<Vec<Ball>> {
    if !(r > 0.0) || r > ball.radius {
        return Err(Error::InvalidParameter(format!(
            "cover radius must satisfy 0 < r ≤ R, got r = {r}, R = {}",
            ball.radius
        )));
    }
    let cloud = sample_ball_points(ball, 8192, seed);
    let mut centers: Vec<Vec<f64>> = vec![ball.center.clone()];
    // distance of each cloud point to its nearest center so far
    let mut nearest: Vec<f64> = cloud.iter().map(|p| rho(&ball.center, p)).collect();
    let limit = 100_000;
    for _ in 0..limit {
        // deepest uncovered point
        let (mut arg, mut best) = (usize::MAX, r);
        for (i, &d) in nearest.iter().enumerate() {
            if d >= best {
                best = d;
                arg = i;
            }
        }
        if arg == usize::MAX {
            return Ok(centers
                .into_iter()
                .map(|c| Ball { center: c, radius: r })
                .collect());
        }
        let c = cloud[arg].clone();
        for (i, p) in cloud.iter().enumerate() {
            let d = rho(&c, p);
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
        centers.push(c);
    }
    Err(Error::Numerical(
        "Vitali cover did not close after 100000 balls".into(),
    ))
}

/// Deterministic cloud of `count` points inside `ball` (stratified vertical
/// rejection sampling).
pub fn sample_ball_points(ball: &Ball, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let (lo, hi) = ball.bounding_box();
    let n = ball.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let strata = count.max(1);
    let mut s = 0usize;
    while out.len() < count {
        let mut point = vec![0.0f64; n];
        for a in 0..n - 1 {
            point[a] = rng.gen_range(lo[a]..hi[a]);
        }
        let u: f64 = rng.gen();
        point[n - 1] =
            lo[n - 1] + ((s % strata) as f64 + u) / strata as f64 * (hi[n - 1] - lo[n - 1]);
        s += 1;
        if ball.contains(&point) {
            out.push(point);
        }
    }
    out
}

/// Empirical quasi-triangle constant of `ρ` in dimension `n`:
/// `max ρ(x, z) / (ρ(x, y) + ρ(y, z))` over seeded random triples in
/// `[0, 3]^n ∩ {x_n ≥ 0}`. Reported rather than asserted — the constant is
/// not pinned analytically.
pub fn measure_quasi_triangle(n: usize, samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|a| {
                if a + 1 == n {
                    rng.gen_range(0.0..3.0)
                } else {
                    rng.gen_range(-3.0..3.0)
                }
            })
            .collect()
    };
    for _ in 0..samples {
        let x = draw(&mut rng);
        let y = draw(&mut rng);
        let z = draw(&mut rng);
        let through = rho(&x, &y) + rho(&y, &z);
        if through > 1e-12 {
            worst = worst.max(rho(&x, &z) / through);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn rho_matches_hand_values() {
        assert_eq!(rho(&[0.7], &[0.7]), 0.0);
        // |4-1| / (2 + 1 + √3)
        let v = rho(&[4.0], &[1.0]);
        let exact = 3.0 / (3.0 + 3.0f64.sqrt());
        assert!((v - exact).abs() < 1e-15);
        // boundary pair: ρ((0,0),(Δ,0)) = √Δ for tangential separation Δ:
        // |Δ|/(0 + 0 + √Δ) = √Δ.
        let v2 = rho(&[0.0, 0.0], &[0.25, 0.0]);
        assert!((v2 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn parabolic_distance_reduces_to_quarter_root_in_time() {
        let x = [1.0, 0.5];
        let d = parabolic_distance(2.0, &x, 1.0, &x);
        assert!((d - 1.0).abs() < 1e-15);
        let d2 = parabolic_distance(1.0, &[0.0, 0.0], 1.0, &[0.25, 0.0]);
        assert!((d2 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn boundary_ball_measures_match_closed_forms() {
        // In n = 1 the unit ball at the boundary is [0, 4):
        // |B|₀ = 4 and |B|₁ = 8.
        let b = Ball::new(vec![0.0], 1.0).unwrap();
        let m0 = ball_measure(&b, 0.0, 40_000, 7).unwrap();
        let m1 = ball_measure(&b, 1.0, 40_000, 7).unwrap();
        assert!((m0 - 4.0).abs() < 0.04, "m0 = {m0}");
        assert!((m1 - 8.0).abs() < 0.08, "m1 = {m1}");
    }

    #[test]
    fn ball_measure_comparator_band() {
        // μ_σ(B_R(x)) ≍ R^n (R + √x_n)^{n+2σ}: the ratio stays in a fixed
        // two-sided band, and at the boundary (where both sides scale as a
        // pure power of R) it is independent of R up to sampling noise.
        for n in [1usize, 2] {
            for sigma in [0.0, 1.0, 3.0] {
                let mut boundary_ratios = Vec::new();
                for &radius in &[0.25, 0.5, 1.0] {
                    for &xn in &[0.0, 0.1, 1.0, 4.0] {
                        let mut c = vec![0.0; n];
                        c[n - 1] = xn;
                        let b = Ball::new(c, radius).unwrap();
                        let m = ball_measure(&b, sigma, 30_000, 11).unwrap();
                        let cmp = radius.powi(n as i32)
                            * (radius + xn.sqrt()).powf(n as f64 + 2.0 * sigma);
                        let ratio = m / cmp;
                        assert!(
                            (0.05..=1000.0).contains(&ratio),
                            "n={n} σ={sigma} R={radius} x={xn}: ratio {ratio}"
                        );
                        if xn == 0.0 {
                            boundary_ratios.push(ratio);
                        }
                    }
                }
                let lo = boundary_ratios.iter().cloned().fold(f64::MAX, f64::min);
                let hi = boundary_ratios.iter().cloned().fold(0.0f64, f64::max);
                assert!(
                    hi / lo < 1.25,
                    "n={n} σ={sigma}: boundary ratios not scale-stable: {boundary_ratios:?}"
                );
            }
        }
    }

    #[test]
    fn doubling_ratios_stay_bounded() {
        for n in [1usize, 2] {
            for sigma in [0.0, 1.0, 3.0] {
                let cap = 1.2 * 2f64.powf(2.0 * n as f64 + 2.0 * sigma);
                let mut worst: f64 = 0.0;
                for &radius in &[0.125, 0.25, 0.5, 1.0] {
                    for &xn in &[0.0, 0.05, 0.2, 1.0, 4.0] {
                        let mut c = vec![0.0; n];
                        c[n - 1] = xn;
                        let b = Ball::new(c.clone(), radius).unwrap();
                        let b2 = Ball::new(c, 2.0 * radius).unwrap();
                        let m = ball_measure(&b, sigma, 30_000, 3).unwrap();
                        let m2 = ball_measure(&b2, sigma, 30_000, 3).unwrap();
                        worst = worst.max(m2 / m);
                    }
                }
                assert!(worst <= cap, "n={n} σ={sigma}: doubling {worst} > {cap}");
                assert!(worst >= 2.0, "doubling ratio implausibly small: {worst}");
            }
        }
    }

    #[test]
    fn euclidean_sandwich_of_quasimetric_balls() {
        // Euclidean radius R(R+√x_n)/4 fits inside B_R(x); the ball fits in
        // Euclidean radius 4R(R+√x_n). (At the boundary B_R(0) = [0, 4R²).)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let xn: f64 = rng.gen_range(0.0..4.0);
            let r: f64 = rng.gen_range(0.05..1.5);
            let x = [rng.gen_range(-1.0..1.0), xn];
            let inner = 0.25 * r * (r + xn.sqrt());
            let outer = 4.0 * r * (r + xn.sqrt());
            for _ in 0..50 {
                let dir: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let (c, s) = (dir.cos(), dir.sin());
                let e: f64 = rng.gen_range(0.0..inner);
                let y = [x[0] + e * c, (x[1] + e * s).max(0.0)];
                assert!(
                    rho(&x, &y) < r,
                    "inner radius violated at x={x:?} y={y:?} r={r}"
                );
                let e2: f64 = rng.gen_range(0.0..3.0 * outer);
                let y2 = [x[0] + e2 * c, (x[1] + e2 * s).max(0.0)];
                if rho(&x, &y2) < r {
                    let dist = ((y2[0] - x[0]).powi(2) + (y2[1] - x[1]).powi(2)).sqrt();
                    assert!(dist < outer, "outer radius violated: {dist} vs {outer}");
                }
            }
        }
    }

    #[test]
    fn delta_factor_values() {
        assert_eq!(delta_factor(0, 0, 0.5, 2.0), 1.0);
        // l = 1, |α| = 0: r^{-4}
        assert!((delta_factor(1, 0, 0.5, 2.0) - 16.0).abs() < 1e-12);
        // l = 0, |α| = 2 at x_n = 0: r^{-2} · r^{-2}
        assert!((delta_factor(0, 2, 0.5, 0.0) - 16.0).abs() < 1e-12);
    }

    #[test]
    fn cz_index_table_dimension_counts() {
        let one = cz_indices(1);
        assert_eq!(one.len(), 4);
        assert_eq!(
            one,
            vec![
                CzIndex { j: 0, l: 1, alpha: vec![0] },
                CzIndex { j: 0, l: 0, alpha: vec![2] },
                CzIndex { j: 1, l: 0, alpha: vec![3] },
                CzIndex { j: 2, l: 0, alpha: vec![4] },
            ]
        );
        assert_eq!(cz_indices(2).len(), 13);
        // n = 3: 1 + 6 + 10 + 15
        assert_eq!(cz_indices(3).len(), 32);
        for n in 1..=3 {
            for e in cz_indices(n) {
                assert_eq!(e.j + 2, 2 * e.l + e.alpha_abs());
                assert!(2 * e.j <= e.alpha_abs());
            }
        }
    }

    #[test]
    fn muckenhoupt_constant_weight_is_one() {
        let balls = vec![
            Ball::new(vec![0.0], 0.5).unwrap(),
            Ball::new(vec![1.0], 0.25).unwrap(),
        ];
        let v = muckenhoupt_estimate(0.0, 2.0, &balls, 20_000, 13).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn muckenhoupt_admissible_weight_scale_invariant() {
        // ω = x_n: boundary balls of any radius give the same finite product
        // (4/3 in closed form for p = 2 in n = 1).
        let balls: Vec<Ball> = [0.1, 0.5, 1.0, 2.0]
            .iter()
            .map(|&r| Ball::new(vec![0.0], r).unwrap())
            .collect();
        let v = muckenhoupt_estimate(1.0, 2.0, &balls, 60_000, 17).unwrap();
        assert!((v - 4.0 / 3.0).abs() < 0.05, "{v}");
    }

    #[test]
    fn muckenhoupt_non_integrable_weight_flagged_infinite() {
        let balls = vec![Ball::new(vec![0.05], 0.5).unwrap()];
        // ω = x_n^{-4}: ∫ x^{-3} dx diverges on boundary balls.
        let v = muckenhoupt_estimate(-4.0, 2.0, &balls, 10_000, 19).unwrap();
        assert!(v.is_infinite());
    }

    #[test]
    fn vitali_cover_with_full_radius_is_single_ball() {
        let b = Ball::new(vec![0.3, 0.7], 0.4).unwrap();
        let cover = vitali_cover(&b, 0.4, 23).unwrap();
        assert_eq!(cover.len(), 1);
        assert_eq!(cover[0].center, b.center);
    }

    #[test]
    fn vitali_cover_covers_and_shrinkings_stay_disjoint() {
        let b = Ball::new(vec![0.0, 0.5], 1.0).unwrap();
        let r = 0.3;
        let cover = vitali_cover(&b, r, 29).unwrap();
        assert!(cover.len() > 1);
        // The construction cloud (regenerated with the same seed) is covered
        // exactly; an independent cloud is covered once the radius absorbs
        // the cloud resolution.
        let construction = sample_ball_points(&b, 8192, 29);
        for p in &construction {
            assert!(
                cover.iter().any(|c| c.contains(p)),
                "construction point {p:?} uncovered with {} balls",
                cover.len()
            );
        }
        let fresh = sample_ball_points(&b, 800, 31);
        for p in &fresh {
            assert!(
                cover
                    .iter()
                    .any(|c| rho(&c.center, p) < 1.5 * c.radius),
                "point {p:?} not within 1.5r of any of {} centers",
                cover.len()
            );
        }
        // centers are r-separated, so (1/3)-shrinkings cannot overlap unless
        // the quasi-triangle constant exceeded 3/2; verify by sampling.
        for i in 0..cover.len() {
            for j in i + 1..cover.len() {
                assert!(rho(&cover[i].center, &cover[j].center) >= r * (1.0 - 1e-12));
            }
        }
        for (i, small) in cover.iter().enumerate() {
            let shrunk = Ball::new(small.center.clone(), r / 3.0).unwrap();
            for p in sample_ball_points(&shrunk, 100, 37 + i as u64) {
                for (j, other) in cover.iter().enumerate() {
                    if i != j {
                        assert!(
                            rho(&other.center, &p) >= r / 3.0,
                            "shrinkings {i} and {j} overlap at {p:?}"
                        );
                    }
                }
            }
        }
        // summed μ₁ mass of the cover is controlled by the measured
        // doubling behavior of μ₁ (Vitali covering consequence).
        let total: f64 = cover
            .iter()
            .map(|c| ball_measure(c, 1.0, 8_000, 41).unwrap())
            .sum();
        let base = ball_measure(&b, 1.0, 40_000, 43).unwrap();
        let tripling = {
            let small = Ball::new(b.center.clone(), r / 3.0).unwrap();
            let big = Ball::new(b.center.clone(), r).unwrap();
            ball_measure(&big, 1.0, 20_000, 47).unwrap()
                / ball_measure(&small, 1.0, 20_000, 47).unwrap()
        };
        assert!(
            total <= 1.5 * tripling * base,
            "cover mass {total} vs tripling {tripling} × base {base}"
        );
    }

    #[test]
    fn quasi_triangle_constant_is_moderate() {
        for n in [1usize, 2, 3] {
            let c = measure_quasi_triangle(n, 20_000, 51);
            assert!(c >= 0.9, "n={n}: constant {c} suspiciously small");
            assert!(c <= 2.5, "n={n}: constant {c} larger than expected");
        }
    }

    proptest! {
        #[test]
        fn rho_symmetric_positive(
            x0 in -3.0f64..3.0, xn in 0.0f64..4.0,
            y0 in -3.0f64..3.0, yn in 0.0f64..4.0,
        ) {
            let x = [x0, xn];
            let y = [y0, yn];
            let a = rho(&x, &y);
            let b = rho(&y, &x);
            prop_assert!((a - b).abs() < 1e-14);
            if x != y {
                prop_assert!(a > 0.0);
            }
        }

        #[test]
        fn rho_dominated_by_euclidean_scaling(
            x0 in -2.0f64..2.0, xn in 0.0f64..4.0, e in 1e-6f64..4.0,
        ) {
            // ρ ≤ √|x - y| always (drop the height terms in the denominator).
            let x = [x0, xn];
            let y = [x0 + e, xn];
            prop_assert!(rho(&x, &y) <= e.sqrt() + 1e-12);
        }
    }
}
