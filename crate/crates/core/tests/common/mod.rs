//! Reference routines shared by the integration tests. They avoid the
//! library's own quadrature and root finders on purpose.
#![allow(dead_code)]

use monge_lab::Vec2;

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton on `P_n`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let k = k as f64;
                let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

/// Composite Gauss-Legendre on `[lo, hi]` with `panels` equal panels.
pub fn gl_integrate<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, panels: usize, rule: &[(f64, f64)]) -> f64 {
    let h = (hi - lo) / panels as f64;
    let mut sum = 0.0;
    for p in 0..panels {
        let mid = lo + (p as f64 + 0.5) * h;
        for &(x, w) in rule {
            sum += w * f(mid + 0.5 * h * x);
        }
    }
    0.5 * h * sum
}

/// Integral over the triangle `(p0, p1, p2)` by the collapsed (Duffy) map
/// and a tensor Gauss rule on `cells x cells` sub-squares.
pub fn triangle_integrate<F: FnMut(Vec2) -> f64>(mut f: F, tri: [Vec2; 3], cells: usize, rule: &[(f64, f64)]) -> f64 {
    let [p0, p1, p2] = tri;
    let e1 = p1 - p0;
    let e2 = p2 - p0;
    let jac = (e1.x * e2.y - e1.y * e2.x).abs();
    let h = 1.0 / cells as f64;
    let mut sum = 0.0;
    for ci in 0..cells {
        for cj in 0..cells {
            for &(xu, wu) in rule {
                let u = (ci as f64 + 0.5 + 0.5 * xu) * h;
                for &(xv, wv) in rule {
                    let v = (cj as f64 + 0.5 + 0.5 * xv) * h;
                    // (u, v) in the unit square -> (u, (1 - u) v) in the simplex
                    let q = p0 + e1 * u + e2 * ((1.0 - u) * v);
                    sum += wu * wv * 0.25 * h * h * (1.0 - u) * f(q);
                }
            }
        }
    }
    sum * jac
}

/// Ray parameter through `(x, |y|)` by bisection on `s^3 + (2 + x) s = |y|`,
/// `a = s^2`, restricted to rays that reach abscissa `x`.
pub fn ray_param(x: f64, y: f64) -> f64 {
    let y = y.abs();
    let c = 2.0 + x;
    let mut lo = if c < 0.0 { (-c).sqrt().min(1.0) } else { 0.0 };
    let mut hi = 1.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid * mid * mid + c * mid < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = 0.5 * (lo + hi);
    s * s
}

/// Inverse of `y = (3 + a) sqrt(a)` by bisection.
pub fn a_at_edge(y: f64) -> f64 {
    ray_param(1.0, y)
}
