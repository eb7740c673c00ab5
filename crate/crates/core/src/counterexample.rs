//! Smooth positive densities on a triangle whose monotone Monge map is only
//! Hölder-2/3 at the interior point `(-2, 0)`.
//!
//! The upper triangle `ABC` is foliated by the segments
//! `l_a = { y = sqrt(a) (x + 2 + a), -2 - a <= x <= 1 }`, `a in [0, 1]`,
//! which are the transfer rays. Along `l_a` we use the coordinate
//! `t = x + 2 + a in [0, 3 + a]`. The source density is `f = 1` and the
//! target is `g = 1 + x/4 + eta(y)`, where `eta` balances the mass of every
//! sub-triangle `P_a C Q_a`. Everything is extended evenly across the x-axis
//! to the triangle `ABB'`.

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::geometry::Vec2;
use crate::quadrature::{integrate, solve_increasing};

/// Vertices of the construction.
#[derive(Debug, Clone, Copy)]
pub struct TriangleSpec;

impl TriangleSpec {
    pub const A: Vec2 = Vec2::new(-3.0, 0.0);
    pub const B: Vec2 = Vec2::new(1.0, 4.0);
    pub const C: Vec2 = Vec2::new(1.0, 0.0);
    pub const B_PRIME: Vec2 = Vec2::new(1.0, -4.0);
    /// Base point of the line integral defining the potential (on `l_1`).
    pub const P: Vec2 = Vec2::new(-2.0, 1.0);
    /// The point where the monotone map fails to be Lipschitz.
    pub const BLOWUP: Vec2 = Vec2::new(-2.0, 0.0);
    /// Area of `ABB'`.
    pub const AREA_ABB: f64 = 16.0;
}

const EDGE_TOL: f64 = 1e-12;
const ROOT_TOL: f64 = 1e-14;
const RAY_QUAD_TOL: f64 = 1e-14;

/// `(x, |y|)` lies in the closed triangle `ABC`.
pub fn in_upper_triangle(x: f64, y: f64) -> bool {
    let y = y.abs();
    x <= 1.0 + EDGE_TOL && y <= x + 3.0 + EDGE_TOL && x >= -3.0 - EDGE_TOL
}

/// Closed triangle `ABB'`.
pub fn in_domain(p: Vec2) -> bool {
    in_upper_triangle(p.x, p.y)
}

fn check_domain(x: f64, y: f64) -> Result<()> {
    if x.is_finite() && y.is_finite() && in_upper_triangle(x, y) {
        Ok(())
    } else {
        Err(LabError::Domain { x, y })
    }
}

/// Position on the transfer ray family: ray `a` and arclength-like
/// coordinate `t = x + 2 + a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RayCoord {
    pub a: f64,
    pub t: f64,
}

impl RayCoord {
    pub fn new(a: f64, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&a) || !(-EDGE_TOL..=3.0 + a + EDGE_TOL).contains(&t) {
            return Err(LabError::Input(format!("ray coordinate (a={a}, t={t}) out of range")));
        }
        Ok(Self { a, t: t.clamp(0.0, 3.0 + a) })
    }

    /// Cartesian point in the upper triangle.
    pub fn to_point(self) -> Vec2 {
        Vec2::new(self.t - 2.0 - self.a, self.a.sqrt() * self.t)
    }

    /// Cartesian point on the reflected ray when `lower` is set.
    pub fn to_point_signed(self, lower: bool) -> Vec2 {
        let p = self.to_point();
        if lower {
            Vec2::new(p.x, -p.y)
        } else {
            p
        }
    }
}

/// Inverse of `y = (3 + a) sqrt(a)`, i.e. the ray through `(1, y)`.
///
/// Evaluated from the Cardano form `a = h + 1/h - 2`, rewritten as
/// `(h - 1)^2 / h` with `h - 1 = z / (h^2 + h + 1)` so that small `|y|`
/// does not cancel.
pub fn a_of_y(y: f64) -> Result<f64> {
    if !(y.abs() <= 4.0 + EDGE_TOL) {
        return Err(LabError::Domain { x: 1.0, y });
    }
    let y2 = y * y;
    let z = (0.25 * y2 * y2 + y2).sqrt() + 0.5 * y2;
    let h = (1.0 + z).cbrt();
    let hm1 = z / (h * h + h + 1.0);
    let a = hm1 * hm1 / h;
    // one Newton polish on (3 + a) sqrt(a) = |y| in s = sqrt(a)
    let s = a.sqrt();
    if s > 0.0 {
        let r = s * s * s + 3.0 * s - y.abs();
        let s = s - r / (3.0 * s * s + 3.0);
        return Ok((s * s).min(1.0));
    }
    Ok(a.min(1.0))
}

/// `eta` as a function of the ray parameter through `(1, y)`.
pub fn eta_of_a(a: f64) -> f64 {
    let a1 = a + 1.0;
    a * (((10.0 * a + 41.0) * a + 54.0) * a + 27.0) / (54.0 * a1 * a1 * a1)
}

/// Density correction balancing `f` and `g` on every sub-triangle.
pub fn eta(y: f64) -> Result<f64> {
    Ok(eta_of_a(a_of_y(y)?))
}

/// Coefficients `(p, q)` of the linear ODE `eta' + (q/y) eta = y p`.
pub fn eta_ode_coeffs(a: f64) -> (f64, f64) {
    let a1 = a + 1.0;
    let q = (5.0 * a - 1.0) * (3.0 + a) / (3.0 * a1 * a1);
    let p = (27.0 + 135.0 * a + 70.0 * a * a) / (162.0 * a1 * a1 * a1 * (3.0 + a));
    (p, q)
}

/// Ray coordinates of a point of `ABB'`; the lower half uses the mirrored
/// family, so `a` depends on `|y|` only.
///
/// Solves `s^3 + (2 + x) s = |y|` for `s = sqrt(a)` on the part of `[0, 1]`
/// where the ray actually reaches abscissa `x`.
pub fn ray_of_point(x: f64, y: f64) -> Result<RayCoord> {
    check_domain(x, y)?;
    let y = y.abs();
    let c = 2.0 + x;
    let s_lo = (-c).max(0.0).sqrt().min(1.0);
    let cubic = |s: f64| (s * s * s + c * s - y, 3.0 * s * s + c);
    let s = solve_increasing(cubic, s_lo, 1.0, ROOT_TOL, 1e-12)?;
    let a = (s * s).clamp(0.0, 1.0);
    let t = (x + 2.0 + a).clamp(0.0, 3.0 + a);
    Ok(RayCoord { a, t })
}

/// Source and target densities `(f, g)` at a point of `ABB'`.
pub fn densities(x: f64, y: f64) -> Result<(f64, f64)> {
    check_domain(x, y)?;
    let y = y.abs().min(4.0);
    Ok((1.0, 1.0 + 0.25 * x + eta(y)?))
}

/// Target density restricted to ray `a`, as a function of `t`.
pub fn g_on_ray(a: f64, t: f64) -> f64 {
    0.5 + 0.25 * (t - a) + eta_of_a_along(a, t)
}

fn eta_of_a_along(a: f64, t: f64) -> f64 {
    // eta(sqrt(a) t); the clamp guards round-off at the corner B
    eta(a.sqrt() * t).unwrap_or_else(|_| eta_of_a(1.0))
}

/// Unit direction of the transfer ray through `(x, y)`, pointing away from
/// the target side. On the axis ray it is `(-1, 0)` by continuity.
pub fn ray_direction(x: f64, y: f64) -> Result<Vec2> {
    let ray = ray_of_point(x, y)?;
    let s = ray.a.sqrt();
    let sign = if y < 0.0 { -1.0 } else { 1.0 };
    let n = (1.0 + ray.a).sqrt();
    Ok(Vec2::new(-1.0 / n, -sign * s / n))
}

/// Kantorovich potential of the Monge problem on `ABB'`.
///
/// On the upper triangle this is the line integral of the ray direction
/// field from `P = (-2, 1)`; the field is curl-free, so `Du` equals the ray
/// direction and `u` drops with unit slope along every ray. The lower half
/// is the even reflection.
pub fn potential_u(x: f64, y: f64) -> Result<f64> {
    check_domain(x, y)?;
    let target = Vec2::new(x, y.abs());
    let delta = target - TriangleSpec::P;
    if delta.norm() == 0.0 {
        return Ok(0.0);
    }
    let field = |t: f64| {
        let q = TriangleSpec::P + delta * t;
        ray_direction(q.x, q.y).unwrap_or(Vec2::new(-1.0, 0.0))
    };
    let avg = integrate(field, 0.0, 1.0, RAY_QUAD_TOL).value;
    Ok(delta.dot(avg))
}

/// `int_0^t (s + 2a) ds`: source mass on ray `a` below `t`, up to the strip
/// width factor `1 / (2 sqrt(a))` shared with the target side.
pub fn ray_cdf_f(a: f64, t: f64) -> f64 {
    0.5 * t * t + 2.0 * a * t
}

/// `int_0^t (s + 2a) g_on_ray(a, s) ds`.
pub fn ray_cdf_g(a: f64, t: f64) -> f64 {
    let c0 = 0.5 - 0.25 * a;
    let poly = (c0 + 0.5 * a) * 0.5 * t * t + t * t * t / 12.0 + 2.0 * a * c0 * t;
    if a == 0.0 || t == 0.0 {
        return poly;
    }
    let corr = integrate(|r: f64| (r + 2.0 * a) * eta_of_a_along(a, r), 0.0, t, RAY_QUAD_TOL);
    poly + corr.value
}

/// Position `t'` on ray `a` carrying the same weighted mass of `g` as
/// `[0, t0]` carries of `f`: the monotone rearrangement along the ray.
pub fn monotone_ray_map(a: f64, t0: f64) -> Result<f64> {
    let ray = RayCoord::new(a, t0)?;
    let (a, t0) = (ray.a, ray.t);
    let len = 3.0 + a;
    if t0 == 0.0 {
        return Ok(0.0);
    }
    let target = ray_cdf_f(a, t0);
    let balance = |t: f64| (ray_cdf_g(a, t) - target, (t + 2.0 * a) * g_on_ray(a, t));
    let slack = 1e-9 * (1.0 + ray_cdf_f(a, len));
    let t = solve_increasing(balance, 0.0, len, 1e-13, slack)?;
    Ok(t.clamp(0.0, len))
}

/// The monotone optimal map of the construction, extended evenly to `ABB'`.
pub fn t0_map(x: f64, y: f64) -> Result<Vec2> {
    let ray = ray_of_point(x, y)?;
    let t_image = monotone_ray_map(ray.a, ray.t)?;
    Ok(RayCoord { a: ray.a, t: t_image }.to_point_signed(y < 0.0))
}

/// `(int f, int g)` over the sub-triangle `P_a C Q_a` by nested adaptive
/// quadrature (inner in `y` up to the ray, outer in `x`).
pub fn strip_mass_check(a: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&a) {
        return Err(LabError::Input(format!("ray parameter {a} outside [0, 1]")));
    }
    if a == 0.0 {
        return Ok((0.0, 0.0));
    }
    let s = a.sqrt();
    let top = |x: f64| s * (x + 2.0 + a);
    let tol = 1e-12;
    let lhs = integrate(
        |x: f64| integrate(|_y: f64| 1.0, 0.0, top(x), tol).value,
        -2.0 - a,
        1.0,
        tol,
    );
    let rhs = integrate(
        |x: f64| {
            integrate(|y: f64| 1.0 + 0.25 * x + eta(y).unwrap_or(f64::NAN), 0.0, top(x), tol).value
        },
        -2.0 - a,
        1.0,
        tol,
    );
    if !rhs.value.is_finite() {
        return Err(LabError::Internal(format!("strip integral for a={a} is not finite")));
    }
    Ok((lhs.value, rhs.value))
}
