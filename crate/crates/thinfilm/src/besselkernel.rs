//! One-dimensional resolvent kernels behind the first-order factorization.
//!
//! Freezing the tangential frequency reduces the factor operators to the
//! family of ordinary differential equations
//!
//! ```text
//!     z u'' + 2m u' - z u = w,      z ∈ (0, ∞),   2m ∈ {2, 3, 4},
//! ```
//!
//! whose fundamental systems are `z^{(1-2m)/2} I_ν(z)` and
//! `z^{(1-2m)/2} K_ν(z)` with `ν = m - 1/2 ∈ {1/2, 1, 3/2}`. The base case
//! `2m = 2` (ν = 1/2) is the one driving the Green-function construction:
//!
//! ```text
//!     ψ₁(z) = √(2/π) sinh(z)/z   (regular at 0, grows like e^z/z),
//!     ψ₂(z) = √(π/2) e^{-z}/z    (decays, singular like 1/z at 0),
//! ```
//!
//! with Wronskian `ψ₁ψ₂' - ψ₁'ψ₂ = -z^{-2}`. The variation-of-constants
//! kernel `k(z, y)` solves `u = ∫ k(·, y) w(y) dy`, and two Schur-type
//! integrals certify on which weighted sup scales the solution operator is
//! bounded; the companion transport kernel `k̃(z, y) = y z^{-2} 1_{z>y}`
//! has the closed-form bounds `1/(2-δ)` and `1/(1-δ)`.

use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.7978845608028654; // √(2/π)
const SQRT_PI_OVER_2: f64 = 1.2533141373155003; // √(π/2)

/// Order of the modified-Bessel fundamental pair: `ν = m - 1/2` for the
/// drift coefficient `2m` of the reduced equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BesselOrder {
    /// `ν = 1/2`, drift `2m = 2` — the base reduction.
    Half,
    /// `ν = 1`, drift `2m = 3` — appears after one differentiation.
    One,
    /// `ν = 3/2`, drift `2m = 4` — appears after two differentiations.
    ThreeHalves,
}

/// Fundamental pair `(ψ₁, ψ₂)` of `z u'' + 2m u' - z u = 0`.
#[derive(Debug, Clone, Copy)]
pub struct FundamentalPair {
    order: BesselOrder,
}

impl FundamentalPair {
    pub fn new(order: BesselOrder) -> FundamentalPair {
        FundamentalPair { order }
    }

    pub fn order(&self) -> BesselOrder {
        self.order
    }

    /// Drift coefficient `2m` of the reduced equation.
    pub fn drift(&self) -> f64 {
        match self.order {
            BesselOrder::Half => 2.0,
            BesselOrder::One => 3.0,
            BesselOrder::ThreeHalves => 4.0,
        }
    }

    /// Exponent `2m` with `|z^{2m} (ψ₁ψ₂' - ψ₁'ψ₂)| = 1`.
    pub fn wronskian_exponent(&self) -> i32 {
        match self.order {
            BesselOrder::Half => 2,
            BesselOrder::One => 3,
            BesselOrder::ThreeHalves => 4,
        }
    }

    /// Regular solution (finite at `z = 0`, exponentially growing).
    pub fn psi1(&self, z: f64) -> f64 {
        assert!(z >= 0.0, "psi1 needs z ≥ 0");
        match self.order {
            BesselOrder::Half => {
                // √(2/π) sinh(z)/z with a series fallback near 0.
                if z < 0.1 {
                    let z2 = z * z;
                    SQRT_2_OVER_PI
                        * (1.0
                            + z2 / 6.0
                            + z2 * z2 / 120.0
                            + z2 * z2 * z2 / 5040.0
                            + z2 * z2 * z2 * z2 / 362880.0)
                } else {
                    SQRT_2_OVER_PI * z.sinh() / z
                }
            }
            BesselOrder::One => {
                // I₁(z)/z = (1/2) Σ (z²/4)^k / (k!(k+1)!)
                if z == 0.0 {
                    0.5
                } else {
                    bessel_i(1, z) / z
                }
            }
            BesselOrder::ThreeHalves => {
                // √(2/π) (z cosh z - sinh z)/z³ = √(2/π) Σ 2k z^{2k-2}/(2k+1)!
                if z < 0.35 {
                    let z2 = z * z;
                    SQRT_2_OVER_PI
                        * (1.0 / 3.0
                            + z2 / 30.0
                            + z2 * z2 / 840.0
                            + z2 * z2 * z2 / 45360.0
                            + z2 * z2 * z2 * z2 / 3991680.0)
                } else {
                    SQRT_2_OVER_PI * (z * z.cosh() - z.sinh()) / (z * z * z)
                }
            }
        }
    }

    /// Derivative of [`FundamentalPair::psi1`].
    pub fn psi1_prime(&self, z: f64) -> f64 {
        assert!(z >= 0.0, "psi1_prime needs z ≥ 0");
        match self.order {
            BesselOrder::Half => {
                if z < 0.35 {
                    let z2 = z * z;
                    SQRT_2_OVER_PI
                        * z
                        * (1.0 / 3.0
                            + z2 / 30.0
                            + z2 * z2 / 840.0
                            + z2 * z2 * z2 / 45360.0
                            + z2 * z2 * z2 * z2 / 3991680.0)
                } else {
                    SQRT_2_OVER_PI * (z * z.cosh() - z.sinh()) / (z * z)
                }
            }
            BesselOrder::One => {
                // d/dz [I₁/z] = (z I₀ - 2 I₁)/z²; series fallback near 0.
                if z < 1e-3 {
                    // I₁/z = 1/2 + z²/16 + ...  ⇒ derivative = z/8 + O(z³)
                    z / 8.0
                } else {
                    (z * bessel_i(0, z) - 2.0 * bessel_i(1, z)) / (z * z)
                }
            }
            BesselOrder::ThreeHalves => {
                if z < 0.35 {
                    let z2 = z * z;
                    SQRT_2_OVER_PI
                        * z
                        * (1.0 / 15.0
                            + z2 / 210.0
                            + z2 * z2 / 7560.0
                            + z2 * z2 * z2 / 498960.0)
                } else {
                    SQRT_2_OVER_PI
                        * (z.sinh() / (z * z)
                            - 3.0 * (z * z.cosh() - z.sinh()) / (z * z * z * z))
                }
            }
        }
    }

    /// Decaying solution (singular at `z = 0`, `∼ e^{-z}`).
    pub fn psi2(&self, z: f64) -> f64 {
        assert!(z > 0.0, "psi2 needs z > 0");
        match self.order {
            BesselOrder::Half => SQRT_PI_OVER_2 * (-z).exp() / z,
            BesselOrder::One => bessel_k(1, z) / z,
            BesselOrder::ThreeHalves => SQRT_PI_OVER_2 * (-z).exp() * (z + 1.0) / (z * z * z),
        }
    }

    /// Derivative of [`FundamentalPair::psi2`].
    pub fn psi2_prime(&self, z: f64) -> f64 {
        assert!(z > 0.0, "psi2_prime needs z > 0");
        match self.order {
            BesselOrder::Half => -SQRT_PI_OVER_2 * (-z).exp() * (z + 1.0) / (z * z),
            BesselOrder::One => {
                // d/dz [K₁/z] = -(z K₀ + 2 K₁)/z²
                -(z * bessel_k(0, z) + 2.0 * bessel_k(1, z)) / (z * z)
            }
            BesselOrder::ThreeHalves => {
                -SQRT_PI_OVER_2 * (-z).exp() * (z * z + 3.0 * z + 3.0) / (z * z * z * z)
            }
        }
    }

    /// Wronskian `ψ₁ψ₂' - ψ₁'ψ₂` (equals `-z^{-2m}` in closed form).
    pub fn wronskian(&self, z: f64) -> f64 {
        self.psi1(z) * self.psi2_prime(z) - self.psi1_prime(z) * self.psi2(z)
    }
}

/// Base-case regular solution `ψ₁(z) = √(2/π) sinh(z)/z`.
pub fn psi1(z: f64) -> f64 {
    FundamentalPair::new(BesselOrder::Half).psi1(z)
}

/// Base-case decaying solution `ψ₂(z) = √(π/2) e^{-z}/z`.
pub fn psi2(z: f64) -> f64 {
    FundamentalPair::new(BesselOrder::Half).psi2(z)
}

/// Variation-of-constants kernel of the base equation: `u = ∫ k(·, y) w dy`
/// solves `z u'' + 2u' - z u = w`. Continuous across the diagonal:
///
/// ```text
///     k(z, y) = -y ψ₁(y) ψ₂(z)   for y ≤ z,
///     k(z, y) = -y ψ₁(z) ψ₂(y)   for y > z.
/// ```
pub fn kernel_k(z: f64, y: f64) -> f64 {
    assert!(z > 0.0 && y > 0.0, "kernel needs z, y > 0");
    if y <= z {
        -y * psi1(y) * psi2(z)
    } else {
        -y * psi1(z) * psi2(y)
    }
}

/// 16-point Gauss–Legendre nodes and weights on `[-1, 1]`.
const GL16_NODES: [f64; 16] = [
    -0.9894009349916499,
    -0.9445750230732326,
    -0.8656312023878318,
    -0.7554044083550030,
    -0.6178762444026438,
    -0.4580167776572274,
    -0.2816035507792589,
    -0.0950125098376374,
    0.0950125098376374,
    0.2816035507792589,
    0.4580167776572274,
    0.6178762444026438,
    0.7554044083550030,
    0.8656312023878318,
    0.9445750230732326,
    0.9894009349916499,
];
const GL16_WEIGHTS: [f64; 16] = [
    0.0271524594117541,
    0.0622535239386479,
    0.0951585116824928,
    0.1246289712555339,
    0.1495959888165767,
    0.1691565193950025,
    0.1826034150449236,
    0.1894506104550685,
    0.1894506104550685,
    0.1826034150449236,
    0.1691565193950025,
    0.1495959888165767,
    0.1246289712555339,
    0.0951585116824928,
    0.0622535239386479,
    0.0271524594117541,
];

/// Composite Gauss–Legendre quadrature of `f` on `[a, b]` with `panels`
/// uniform panels.
fn gauss_panels(a: f64, b: f64, panels: usize, mut f: impl FnMut(f64) -> f64) -> f64 {
    debug_assert!(b >= a);
    let h = (b - a) / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let lo = a + p as f64 * h;
        let mid = lo + 0.5 * h;
        let half = 0.5 * h;
        let mut acc = 0.0;
        for (x, w) in GL16_NODES.iter().zip(&GL16_WEIGHTS) {
            acc += w * f(mid + half * x);
        }
        total += acc * half;
    }
    total
}

/// Solve `z u'' + 2u' - z u = w` by quadrature against the kernel:
/// `u(z) = -ψ₂(z) ∫_0^z y ψ₁(y) w(y) dy - ψ₁(z) ∫_z^∞ y ψ₂(y) w(y) dy`,
/// evaluated at each requested `z`. The upper tail is truncated where
/// `y ψ₂(y) w(y)` is negligible for decaying sources.
pub fn solve_reduced(w: &dyn Fn(f64) -> f64, zs: &[f64]) -> Result<Vec<f64>> {
    if zs.iter().any(|&z| !(z > 0.0)) {
        return Err(Error::InvalidParameter(
            "evaluation points must be positive".into(),
        ));
    }
    let z_top = zs.iter().cloned().fold(0.0f64, f64::max);
    let tail_end = z_top + 45.0;
    let mut out = Vec::with_capacity(zs.len());
    for &z in zs {
        let inner = gauss_panels(0.0, z, 32, |y| y * psi1(y) * w(y));
        let outer = gauss_panels(z, tail_end, 64, |y| y * psi2(y) * w(y));
        out.push(-psi2(z) * inner - psi1(z) * outer);
    }
    Ok(out)
}

/// Schur-type bound integrals of the base kernel at weight exponent `j`:
///
/// * first:  `sup_z z^j ∫_0^∞ |k(z, y)| dy`
/// * second: `sup_y ∫_0^∞ z^j |k(z, y)| (z/y) dz`
///
/// Both are finite exactly for `j ∈ [0, 1]`; outside that window the sup
/// grows without bound as the evaluation grid extends (`z_max ↑`).
pub fn kernel_bound_integrals(j: f64, z_max: f64) -> Result<(f64, f64)> {
    if !(z_max > 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need z_max > 1, got {z_max}"
        )));
    }
    let grid = log_grid(1e-3, z_max, 160);
    let mut sup1: f64 = 0.0;
    for &z in &grid {
        let inner = gauss_panels(0.0, z, 24, |y| kernel_k(z, y).abs());
        let outer = gauss_panels(z, z + 45.0, 48, |y| kernel_k(z, y).abs());
        sup1 = sup1.max(z.powf(j) * (inner + outer));
    }
    let mut sup2: f64 = 0.0;
    for &y in &grid {
        let inner = gauss_panels(0.0, y, 24, |z| {
            if z == 0.0 {
                0.0
            } else {
                z.powf(j) * kernel_k(z, y).abs() * (z / y)
            }
        });
        let outer = gauss_panels(y, (y + 45.0).max(z_max + 45.0), 64, |z| {
            z.powf(j) * kernel_k(z, y).abs() * (z / y)
        });
        sup2 = sup2.max(inner + outer);
    }
    Ok((sup1, sup2))
}

/// Schur-type bound integrals of the transport kernel
/// `k̃(z, y) = y z^{-2} 1_{z>y}` at comparison weight `(z/y)^δ`:
///
/// * first:  `sup_z ∫ (z/y)^δ k̃ dy  = 1/(2-δ)` for `δ < 2`
/// * second: `sup_y ∫ (z/y)^δ k̃ dz  = 1/(1-δ)` for `δ < 1`
///
/// The numerical sups are taken over a log grid; the second integral is
/// computed in the substitution `z = y e^s`, where the integrand becomes
/// `e^{(δ-1)s}` and the truncation at `s_max` makes divergence for `δ ≥ 1`
/// visible as growth in `s_max`.
pub fn transport_bound_integrals(delta: f64, s_max: f64) -> Result<(f64, f64)> {
    if !(delta < 2.0) {
        return Err(Error::InvalidParameter(format!(
            "first transport integral needs δ < 2, got {delta}"
        )));
    }
    if !(s_max > 1.0) {
        return Err(Error::InvalidParameter(format!(
            "need s_max > 1, got {s_max}"
        )));
    }
    let grid = log_grid(1e-2, 1e2, 60);
    let mut sup1: f64 = 0.0;
    for &z in &grid {
        // ∫_0^z (z/y)^δ y z^{-2} dy = z^{δ-2} ∫_0^z y^{1-δ} dy
        let v = gauss_panels(0.0, z, 48, |y| {
            if y == 0.0 {
                0.0
            } else {
                (z / y).powf(delta) * y / (z * z)
            }
        });
        sup1 = sup1.max(v);
    }
    let mut sup2: f64 = 0.0;
    for &_y in &grid {
        // ∫_y^∞ (z/y)^δ y z^{-2} dz = ∫_0^∞ e^{(δ-1)s} ds  (z = y e^s),
        // independent of y.
        let v = gauss_panels(0.0, s_max, 48, |s| ((delta - 1.0) * s).exp());
        sup2 = sup2.max(v);
    }
    Ok((sup1, sup2))
}

fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (la, lb) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (la + (lb - la) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Modified Bessel function `I_ν(z)` for `ν ∈ {0, 1}` by the ascending
/// series (all terms positive — no cancellation) up to `z = 100`, and the
/// large-argument expansion beyond.
fn bessel_i(nu: usize, z: f64) -> f64 {
    debug_assert!(nu <= 1 && z >= 0.0);
    if z <= 100.0 {
        let q = 0.25 * z * z;
        let mut term = if nu == 0 { 1.0 } else { 0.5 * z };
        let mut sum = term;
        for k in 1..200 {
            let kf = k as f64;
            term *= q / (kf * (kf + nu as f64));
            sum += term;
            if term < sum * 1e-17 {
                break;
            }
        }
        sum
    } else {
        // I_ν(z) ~ e^z/√(2πz) Σ (-1)^k a_k(ν)/z^k
        let mu = 4.0 * (nu * nu) as f64;
        let mut sum = 1.0;
        let mut num = 1.0;
        for k in 1..=6u32 {
            num *= mu - (2.0 * k as f64 - 1.0).powi(2);
            let a_k = num / (factorial(k) * 8f64.powi(k as i32));
            sum += if k % 2 == 1 { -a_k } else { a_k } / z.powi(k as i32);
        }
        z.exp() / (2.0 * std::f64::consts::PI * z).sqrt() * sum
    }
}

/// Modified Bessel function `K_ν(z)` for `ν ∈ {0, 1}`: the logarithmic
/// ascending series near 0 and the integral representation
/// `K_ν(z) = ∫_0^∞ e^{-z cosh t} cosh(νt) dt` elsewhere (the trapezoid rule
/// converges to near machine precision on the doubly exponentially decaying
/// integrand).
fn bessel_k(nu: usize, z: f64) -> f64 {
    debug_assert!(nu <= 1 && z > 0.0);
    if z < 0.5 {
        let q = 0.25 * z * z;
        let lg = (0.5 * z).ln();
        if nu == 0 {
            // K₀ = -ln(z/2) I₀ + Σ ψ(k+1) q^k/(k!)²
            let mut term = 1.0;
            let mut psi = -EULER_GAMMA;
            let mut sum = psi;
            for k in 1..60 {
                let kf = k as f64;
                term *= q / (kf * kf);
                psi += 1.0 / kf;
                sum += term * psi;
                if term < 1e-18 {
                    break;
                }
            }
            -lg * bessel_i(0, z) + sum
        } else {
            // K₁ = 1/z + ln(z/2) I₁ - (z/4) Σ (ψ(k+1)+ψ(k+2)) q^k/(k!(k+1)!)
            let mut term = 1.0;
            let mut psi_a = -EULER_GAMMA;
            let mut psi_b = 1.0 - EULER_GAMMA;
            let mut sum = psi_a + psi_b;
            for k in 1..60 {
                let kf = k as f64;
                term *= q / (kf * (kf + 1.0));
                psi_a += 1.0 / kf;
                psi_b += 1.0 / (kf + 1.0);
                sum += term * (psi_a + psi_b);
                if term < 1e-18 {
                    break;
                }
            }
            1.0 / z + lg * bessel_i(1, z) - 0.25 * z * sum
        }
    } else {
        // Trapezoid rule with the t = 0 endpoint halved; stop once the
        // integrand underflows.
        let h: f64 = 0.05;
        let mut sum = 0.5 * (-z).exp();
        let mut t = h;
        loop {
            let c = t.cosh();
            if z * c > 745.0 {
                break;
            }
            sum += (-z * c).exp() * if nu == 0 { 1.0 } else { t.cosh() };
            t += h;
        }
        sum * h
    }
}

const EULER_GAMMA: f64 = 0.5772156649015329;

fn factorial(k: u32) -> f64 {
    (1..=k).map(|i| i as f64).product()
}
