//! Adaptive Gauss–Kronrod quadrature and a safeguarded scalar root finder.

use std::collections::BinaryHeap;
use std::cmp::Ordering;
use std::ops::{Add, Mul, Sub};

use crate::error::{LabError, Result};
use crate::geometry::Vec2;

// 15-point Kronrod abscissae on [0, 1) with the embedded 7-point Gauss rule
// at the odd positions (QUADPACK qk15 tables).
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

/// Values that can be integrated: scalars and planar vectors.
pub trait Integrand: Copy + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self> {
    fn zero() -> Self;
    fn magnitude(&self) -> f64;
}

impl Integrand for f64 {
    fn zero() -> Self {
        0.0
    }
    fn magnitude(&self) -> f64 {
        self.abs()
    }
}

impl Integrand for Vec2 {
    fn zero() -> Self {
        Vec2::ZERO
    }
    fn magnitude(&self) -> f64 {
        self.x.abs().max(self.y.abs())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Integral<T> {
    pub value: T,
    pub abs_error: f64,
    pub intervals: usize,
}

/// One G7/K15 panel: Kronrod estimate and |K15 - G7|.
fn gk15<T: Integrand, F: Fn(f64) -> T>(f: &F, a: f64, b: f64) -> (T, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (k, (&x, &w)) in XGK.iter().zip(&WGK).take(7).enumerate() {
        let pair = f(c - h * x) + f(c + h * x);
        kron = kron + pair * w;
        if k % 2 == 1 {
            gauss = gauss + pair * WG[k / 2];
        }
    }
    let kron = kron * h;
    let gauss = gauss * h;
    (kron, (kron - gauss).magnitude())
}

struct Panel<T> {
    a: f64,
    b: f64,
    value: T,
    error: f64,
}

impl<T> PartialEq for Panel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl<T> Eq for Panel<T> {}
impl<T> PartialOrd for Panel<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for Panel<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

const MAX_PANELS: usize = 4000;

/// Globally adaptive G7/K15 quadrature of `f` over `[a, b]`.
///
/// Bisects the panel with the largest error estimate until the summed
/// estimate drops below `abs_tol`, or the panel budget runs out (the
/// returned `abs_error` then exceeds `abs_tol`).
pub fn integrate<T: Integrand, F: Fn(f64) -> T>(f: F, a: f64, b: f64, abs_tol: f64) -> Integral<T> {
    if a == b {
        return Integral { value: T::zero(), abs_error: 0.0, intervals: 0 };
    }
    let (value, error) = gk15(&f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Panel { a, b, value, error });
    let mut total_err = error;
    while total_err > abs_tol && heap.len() < MAX_PANELS {
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if !(mid > worst.a.min(worst.b) && mid < worst.a.max(worst.b)) {
            // panel below floating-point resolution
            heap.push(worst);
            break;
        }
        let (lv, le) = gk15(&f, worst.a, mid);
        let (rv, re) = gk15(&f, mid, worst.b);
        total_err += le + re - worst.error;
        heap.push(Panel { a: worst.a, b: mid, value: lv, error: le });
        heap.push(Panel { a: mid, b: worst.b, value: rv, error: re });
    }
    let intervals = heap.len();
    let mut panels = heap.into_vec();
    // sum in a fixed order so results do not depend on heap layout
    panels.sort_by(|p, q| p.a.total_cmp(&q.a));
    let value = panels.iter().fold(T::zero(), |acc, p| acc + p.value);
    let abs_error = panels.iter().map(|p| p.error).sum();
    Integral { value, abs_error, intervals }
}

/// Solves `f(x) = 0` for an increasing `f` on `[lo, hi]`.
///
/// Newton steps from the bracket midpoint, falling back to bisection
/// whenever a step leaves the bracket. Requires `f(lo) <= 0 <= f(hi)`
/// up to `slack`; converges when the step or bracket falls below `tol`.
pub fn solve_increasing<F>(f: F, mut lo: f64, mut hi: f64, tol: f64, slack: f64) -> Result<f64>
where
    F: Fn(f64) -> (f64, f64),
{
    let (flo, _) = f(lo);
    let (fhi, _) = f(hi);
    if flo > slack || fhi < -slack {
        return Err(LabError::Internal(format!(
            "no sign change on [{lo}, {hi}]: f = ({flo:e}, {fhi:e})"
        )));
    }
    if flo >= 0.0 {
        return Ok(lo);
    }
    if fhi <= 0.0 {
        return Ok(hi);
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (fx, dfx) = f(x);
        if fx == 0.0 {
            return Ok(x);
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - fx / dfx;
        let next = if dfx > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if (next - x).abs() <= tol || hi - lo <= tol {
            return Ok(next);
        }
        x = next;
    }
    Err(LabError::Internal(format!("root finder stalled in [{lo}, {hi}]")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn polynomials_are_exact_on_one_panel() {
        let r = integrate(|x: f64| x.powi(6) - 2.0 * x * x + 1.0, -1.0, 2.0, 1e-12);
        let exact = (128.0 + 1.0) / 7.0 - 2.0 * (8.0 + 1.0) / 3.0 + 3.0;
        assert_abs_diff_eq!(r.value, exact, epsilon = 1e-12);
        assert_eq!(r.intervals, 1);
    }

    #[test]
    fn endpoint_singularity_converges() {
        // int_0^1 sqrt(x) dx = 2/3
        let r = integrate(f64::sqrt, 0.0, 1.0, 1e-12);
        assert_abs_diff_eq!(r.value, 2.0 / 3.0, epsilon = 1e-11);
    }

    #[test]
    fn vector_integrand() {
        let r = integrate(|t: f64| Vec2::new(t.cos(), t.sin()), 0.0, std::f64::consts::FRAC_PI_2, 1e-13);
        assert_abs_diff_eq!(r.value.x, 1.0, epsilon = 1e-13);
        assert_abs_diff_eq!(r.value.y, 1.0, epsilon = 1e-13);
    }

    #[test]
    fn reversed_limits_flip_sign() {
        let r = integrate(|x: f64| x.exp(), 1.0, 0.0, 1e-12);
        assert_abs_diff_eq!(r.value, 1.0 - std::f64::consts::E, epsilon = 1e-12);
    }

    #[test]
    fn root_of_cubic() {
        let x = solve_increasing(|s| (s * s * s + s - 1.0, 3.0 * s * s + 1.0), 0.0, 1.0, 1e-15, 0.0).unwrap();
        assert_abs_diff_eq!(x * x * x + x, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn missing_sign_change_is_reported() {
        assert!(solve_increasing(|s| (s + 1.0, 1.0), 0.0, 1.0, 1e-12, 0.0).is_err());
    }
}
