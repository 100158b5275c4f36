//! Hyperbolic plane kernel in the Poincaré disk model.
//!
//! Ideal points are stored as angles on the unit circle, interior points as
//! disk coordinates. Horocycles are parameterized by a positive *size* `s`:
//! the Euclidean diameter of the horocycle in the upper half-plane chart that
//! sends its base point to `0` and the disk origin to `i`. Equivalently the
//! horocycle at `p` of size `s` is the level set `B_p = ln s` of the Busemann
//! function `B_p(z) = ln(|p - z|^2 / (1 - |z|^2))`, normalized to vanish at the
//! origin. With this convention the truncated length of the geodesic `[p, q]`
//! has the closed form `ln(|p - q|^2 / 4) - ln s_p - ln s_q`.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Comparison tolerance for all geometric predicates.
pub const EPS_GEO: f64 = 1e-12;

/// Conformal factor of the disk metric, `2 / (1 - |z|^2)`.
#[inline]
pub fn conformal_factor(z: C) -> f64 {
    2.0 / (1.0 - z.norm_sqr())
}

fn wrap_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU {
        0.0
    } else {
        t
    }
}

/// Unsigned angular separation of two angles, in `[0, π]`.
pub fn angular_distance(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b);
    d.min(TAU - d)
}

/// A point of the ideal boundary, stored as an angle in `[0, 2π)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BoundaryPoint {
    theta: f64,
}

impl BoundaryPoint {
    pub fn new(theta: f64) -> Self {
        Self {
            theta: wrap_angle(theta),
        }
    }

    /// Projects a nonzero complex number radially onto the circle.
    pub fn from_complex(z: C) -> Self {
        Self::new(z.arg())
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn to_complex(&self) -> C {
        C::from_polar(1.0, self.theta)
    }

    pub fn angular_distance(&self, other: &BoundaryPoint) -> f64 {
        angular_distance(self.theta, other.theta)
    }
}

impl PartialEq for BoundaryPoint {
    fn eq(&self, other: &Self) -> bool {
        self.angular_distance(other) < EPS_GEO
    }
}

/// A point strictly inside the unit disk.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteriorPoint {
    pub x: f64,
    pub y: f64,
}

impl InteriorPoint {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite()) || (x * x + y * y).sqrt() >= 1.0 - EPS_GEO {
            return Err(Error::NotInterior((x, y)));
        }
        Ok(Self { x, y })
    }

    pub fn from_complex(z: C) -> Result<Self> {
        Self::new(z.re, z.im)
    }

    pub fn origin() -> Self {
        Self { x: 0.0, y: 0.0 }
    }

    pub fn to_complex(&self) -> C {
        C::new(self.x, self.y)
    }
}

/// Hyperbolic distance between two interior points.
pub fn hyperbolic_distance(p: &InteriorPoint, q: &InteriorPoint) -> f64 {
    distance(p.to_complex(), q.to_complex())
}

/// Hyperbolic distance between raw disk coordinates.
///
/// Uses `sinh(d/2)^2 = |p-q|^2 / ((1-|p|^2)(1-|q|^2))`, which stays accurate
/// close to the ideal boundary where the `arcosh` form cancels badly.
pub fn distance(p: C, q: C) -> f64 {
    let num = (p - q).norm();
    let den = ((1.0 - p.norm_sqr()) * (1.0 - q.norm_sqr())).sqrt();
    2.0 * (num / den).asinh()
}

/// Point at hyperbolic distance `sigma` from `z1` along the geodesic toward `z2`.
pub fn geodesic_toward(z1: C, z2: C, sigma: f64) -> C {
    let u = (z2 - z1) / (C::new(1.0, 0.0) - z1.conj() * z2);
    let v = u / u.norm() * (sigma / 2.0).tanh();
    (v + z1) / (C::new(1.0, 0.0) + z1.conj() * v)
}

/// Unit tangent at `z` of the geodesic from `z` toward `w` (interior or ideal).
pub fn geodesic_direction(z: C, w: C) -> C {
    // translating z to the origin has a positive real derivative there
    let u = (w - z) / (C::new(1.0, 0.0) - z.conj() * w);
    u / u.norm()
}

/// Busemann function of the ideal point `p`, normalized to vanish at the origin.
/// It decreases at unit rate along any geodesic heading to `p`.
pub fn busemann(p: C, z: C) -> f64 {
    ((p - z).norm_sqr() / (1.0 - z.norm_sqr())).ln()
}

/// Signed distance from `z` to the horocycle of size `s` at `p`; negative inside the horodisk.
pub fn distance_to_horocycle(z: C, p: C, s: f64) -> f64 {
    busemann(p, z) - s.ln()
}

/// Euclidean circle realizing a horocycle in the disk.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Horocycle {
    pub center: C,
    pub radius: f64,
}

impl Horocycle {
    pub fn new(p: &BoundaryPoint, size: f64) -> Self {
        // closest point to the origin sits at signed distance -ln(size)
        let t = (-size.ln() / 2.0).tanh();
        let radius = (1.0 - t) / 2.0;
        Self {
            center: p.to_complex() * (1.0 - radius),
            radius,
        }
    }
}

/// Cross ratio `(d1-d3)(d2-d4) / ((d2-d3)(d1-d4))` of four ideal points.
pub fn cross_ratio(
    d1: &BoundaryPoint,
    d2: &BoundaryPoint,
    d3: &BoundaryPoint,
    d4: &BoundaryPoint,
) -> Result<f64> {
    let pts = [d1, d2, d3, d4];
    for i in 0..4 {
        for j in (i + 1)..4 {
            if pts[i] == pts[j] {
                return Err(Error::CoincidentPoints);
            }
        }
    }
    let [z1, z2, z3, z4] = pts.map(|p| p.to_complex());
    let cr = complex_cross_ratio(z1, z2, z3, z4);
    debug_assert!(cr.im.abs() < 1e-10 * cr.re.abs().max(1.0));
    Ok(cr.re)
}

/// The cross ratio on raw complex numbers, without the realness check.
pub fn complex_cross_ratio(z1: C, z2: C, z3: C, z4: C) -> C {
    (z1 - z3) * (z2 - z4) / ((z2 - z3) * (z1 - z4))
}

/// Truncated length of `[p, q]` outside the horocycles of sizes `sp`, `sq`.
/// Negative when the horocycles overlap, zero when they are tangent.
pub fn truncated_distance(p: &BoundaryPoint, q: &BoundaryPoint, sp: f64, sq: f64) -> Result<f64> {
    if p == q {
        return Err(Error::CoincidentPoints);
    }
    check_size(sp)?;
    check_size(sq)?;
    Ok(((p.to_complex() - q.to_complex()).norm_sqr() / 4.0).ln() - sp.ln() - sq.ln())
}

/// Truncated length in the upper half-plane between horocycles of Euclidean
/// diameters `sp`, `sq` based at the finite boundary coordinates `xp`, `xq`.
pub fn truncated_distance_half_plane(xp: f64, xq: f64, sp: f64, sq: f64) -> Result<f64> {
    if (xp - xq).abs() < EPS_GEO {
        return Err(Error::CoincidentPoints);
    }
    check_size(sp)?;
    check_size(sq)?;
    Ok(((xp - xq).powi(2) / (sp * sq)).ln())
}

fn check_size(s: f64) -> Result<()> {
    if s.is_finite() && s > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidDecoration(format!("horocycle size {s} is not positive")))
    }
}

/// Orientation-preserving or reversing Möbius transformation
/// `z -> (a w + b) / (c w + d)` with `w = z` or `w = conj(z)`, normalized to `ad - bc = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoebiusMap {
    a: C,
    b: C,
    c: C,
    d: C,
    conj: bool,
}

impl MoebiusMap {
    pub fn from_matrix(a: C, b: C, c: C, d: C, conj: bool) -> Self {
        let s = (a * d - b * c).sqrt();
        Self {
            a: a / s,
            b: b / s,
            c: c / s,
            d: d / s,
            conj,
        }
    }

    pub fn identity() -> Self {
        Self::from_matrix(C::new(1.0, 0.0), C::new(0.0, 0.0), C::new(0.0, 0.0), C::new(1.0, 0.0), false)
    }

    pub fn rotation(phi: f64) -> Self {
        let h = C::from_polar(1.0, phi / 2.0);
        Self::from_matrix(h, C::new(0.0, 0.0), C::new(0.0, 0.0), h.conj(), false)
    }

    /// Disk automorphism moving the origin to `p` along the diameter through `p`.
    pub fn translation_to(p: C) -> Self {
        Self::from_matrix(C::new(1.0, 0.0), p, p.conj(), C::new(1.0, 0.0), false)
    }

    /// Complex conjugation, the reflection across the real diameter.
    pub fn conjugation() -> Self {
        Self {
            conj: true,
            ..Self::identity()
        }
    }

    /// The Cayley transform `z -> i(1+z)/(1-z)` from the disk to the upper half-plane.
    pub fn cayley() -> Self {
        let i = C::new(0.0, 1.0);
        Self::from_matrix(i, i, C::new(-1.0, 0.0), C::new(1.0, 0.0), false)
    }

    /// Disk automorphism sending `-1 -> p`, `1 -> q` and `0 -> m`, where `m`
    /// lies on the geodesic `[p, q]`.
    pub fn frame(p: C, q: C, m: C) -> Self {
        let _ = p;
        let r = (q - m) / (C::new(1.0, 0.0) - q * m.conj());
        Self::from_matrix(r, m, m.conj() * r, C::new(1.0, 0.0), false)
    }

    /// Reflection across the geodesic with ideal endpoints `p`, `q`.
    pub fn reflection_across(p: &BoundaryPoint, q: &BoundaryPoint) -> Result<Self> {
        let g = Geodesic::new(*p, *q)?;
        let t = g.frame();
        Ok(t.compose(&Self::conjugation()).compose(&t.inverse()))
    }

    pub fn is_orientation_reversing(&self) -> bool {
        self.conj
    }

    pub fn apply(&self, z: C) -> C {
        let w = if self.conj { z.conj() } else { z };
        let den = self.c * w + self.d;
        if den.norm() == 0.0 {
            return C::new(f64::INFINITY, f64::INFINITY);
        }
        (self.a * w + self.b) / den
    }

    /// Image of an ideal point; meaningful for maps preserving the disk.
    pub fn apply_boundary(&self, p: &BoundaryPoint) -> BoundaryPoint {
        BoundaryPoint::from_complex(self.apply(p.to_complex()))
    }

    pub fn apply_interior(&self, p: &InteriorPoint) -> Result<InteriorPoint> {
        InteriorPoint::from_complex(self.apply(p.to_complex()))
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Self) -> Self {
        let (a2, b2, c2, d2) = if self.conj {
            (other.a.conj(), other.b.conj(), other.c.conj(), other.d.conj())
        } else {
            (other.a, other.b, other.c, other.d)
        };
        Self::from_matrix(
            self.a * a2 + self.b * c2,
            self.a * b2 + self.b * d2,
            self.c * a2 + self.d * c2,
            self.c * b2 + self.d * d2,
            self.conj ^ other.conj,
        )
    }

    pub fn inverse(&self) -> Self {
        // inverse matrix of a unimodular matrix
        let (a, b, c, d) = (self.d, -self.b, -self.c, self.a);
        if self.conj {
            Self::from_matrix(a.conj(), b.conj(), c.conj(), d.conj(), true)
        } else {
            Self::from_matrix(a, b, c, d, false)
        }
    }

    /// Size of the image horocycle when the horocycle of size `s` at `p` is
    /// transported by this disk isometry.
    pub fn push_forward_size(&self, p: &BoundaryPoint, s: f64) -> f64 {
        let mp = self.apply(p.to_complex());
        let mp = mp / mp.norm();
        s * busemann(mp, self.apply(C::new(0.0, 0.0))).exp()
    }
}

/// Complete geodesic given by its ideal endpoints, oriented from `p` to `q`.
#[derive(Clone, Copy, Debug)]
pub struct Geodesic {
    pub p: BoundaryPoint,
    pub q: BoundaryPoint,
}

impl Geodesic {
    pub fn new(p: BoundaryPoint, q: BoundaryPoint) -> Result<Self> {
        if p == q {
            return Err(Error::CoincidentPoints);
        }
        Ok(Self { p, q })
    }

    /// The geodesic through two distinct interior points, oriented from `z1` to `z2`.
    pub fn through(z1: C, z2: C) -> Result<Self> {
        let to0 = MoebiusMap::translation_to(z1).inverse();
        let w = to0.apply(z2);
        if w.norm() < EPS_GEO {
            return Err(Error::CoincidentPoints);
        }
        let dir = w / w.norm();
        let back = to0.inverse();
        Ok(Self {
            p: BoundaryPoint::from_complex(back.apply(-dir)),
            q: BoundaryPoint::from_complex(back.apply(dir)),
        })
    }

    /// Point of the geodesic closest to the origin.
    pub fn midpoint(&self) -> C {
        let (p, q) = (self.p.to_complex(), self.q.to_complex());
        (p + q) / (2.0 + (p - q).norm())
    }

    /// Automorphism taking the real diameter (oriented from -1 to 1) onto this geodesic.
    pub fn frame(&self) -> MoebiusMap {
        MoebiusMap::frame(self.p.to_complex(), self.q.to_complex(), self.midpoint())
    }

    /// Point at signed arclength `sigma` from the midpoint, positive towards `q`.
    pub fn point_at(&self, sigma: f64) -> C {
        self.frame().apply(C::new((sigma / 2.0).tanh(), 0.0))
    }

    /// Signed hyperbolic distance from `z`, positive on the left of `p -> q`.
    pub fn signed_distance(&self, z: C) -> f64 {
        let w = self.frame().inverse().apply(z);
        (2.0 * w.im / (1.0 - w.norm_sqr())).asinh()
    }

    pub fn distance_from(&self, z: C) -> f64 {
        self.signed_distance(z).abs()
    }

    /// Point where the geodesic leaves the horocycle of size `s` at its endpoint `p`
    /// (`at_start`) or `q`.
    pub fn horocycle_exit(&self, at_start: bool, s: f64) -> C {
        let m = self.midpoint();
        if at_start {
            let sigma = busemann(self.p.to_complex(), m) - s.ln();
            self.point_at(-sigma)
        } else {
            let sigma = busemann(self.q.to_complex(), m) - s.ln();
            self.point_at(sigma)
        }
    }

    /// Minimum of the Busemann function of `zeta` over the geodesic.
    pub fn busemann_min(&self, zeta: &BoundaryPoint) -> f64 {
        let (p, q, z) = (self.p.to_complex(), self.q.to_complex(), zeta.to_complex());
        ((z - p).norm() * (z - q).norm() / (p - q).norm()).ln()
    }
}

/// Which side of a directed geodesic `a0 -> a1` new vertices are placed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    /// The side of `a0 -> a1` not containing `o`.
    pub fn away_from(a0: &BoundaryPoint, a1: &BoundaryPoint, o: &InteriorPoint) -> Result<Self> {
        let g = Geodesic::new(*a0, *a1).map_err(|_| Error::DegenerateSide)?;
        Ok(if g.signed_distance(o.to_complex()) > 0.0 {
            Side::Right
        } else {
            Side::Left
        })
    }
}

/// Builds the regular ideal quadrilateral `P(b1, b2, a1, a0)` on the given side
/// of `[a0, a1]`, symmetric under the reflection across the geodesic through
/// `o` orthogonal to `[a0, a1]`. `b1` is adjacent to `a0`, `b2` to `a1`.
///
/// In the frame sending `a0, a1` to `-1, 1` and the foot of `o` to the origin,
/// the vertices are `b2 = e^{±iψ}` and `b1 = -conj(b2)` with `cos ψ = 1/3`,
/// which is the unique symmetric solution of cross ratio 2.
pub fn make_regular_quadrilateral(
    a0: &BoundaryPoint,
    a1: &BoundaryPoint,
    o: &InteriorPoint,
    side: Side,
) -> Result<(BoundaryPoint, BoundaryPoint)> {
    let frame = regular_quadrilateral_frame(a0, a1, o)?;
    let psi = (1.0f64 / 3.0).acos();
    let b2 = match side {
        Side::Left => C::from_polar(1.0, psi),
        Side::Right => C::from_polar(1.0, -psi),
    };
    let b1 = -b2.conj();
    Ok((
        BoundaryPoint::from_complex(frame.apply(b1)),
        BoundaryPoint::from_complex(frame.apply(b2)),
    ))
}

/// Frame sending `-1, 1` to `a0, a1` and the origin to the foot of `o` on `[a0, a1]`.
pub fn regular_quadrilateral_frame(
    a0: &BoundaryPoint,
    a1: &BoundaryPoint,
    o: &InteriorPoint,
) -> Result<MoebiusMap> {
    let g = Geodesic::new(*a0, *a1).map_err(|_| Error::DegenerateSide)?;
    let to_o = MoebiusMap::translation_to(o.to_complex());
    let centered = Geodesic {
        p: to_o.inverse().apply_boundary(a0),
        q: to_o.inverse().apply_boundary(a1),
    };
    let foot = to_o.apply(centered.midpoint());
    Ok(MoebiusMap::frame(g.p.to_complex(), g.q.to_complex(), foot))
}

/// Reflection across the geodesic through `o` orthogonal to `[a0, a1]`.
pub fn orthogonal_reflection(a0: &BoundaryPoint, a1: &BoundaryPoint, o: &InteriorPoint) -> Result<MoebiusMap> {
    let frame = regular_quadrilateral_frame(a0, a1, o)?;
    // z -> -conj(z) fixes the imaginary diameter
    let flip = MoebiusMap::from_matrix(
        C::new(0.0, 1.0),
        C::new(0.0, 0.0),
        C::new(0.0, 0.0),
        C::new(0.0, -1.0),
        true,
    );
    Ok(frame.compose(&flip).compose(&frame.inverse()))
}

/// Per-vertex horocycle sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoration {
    sizes: Vec<f64>,
}

impl Decoration {
    pub fn new(sizes: Vec<f64>) -> Result<Self> {
        for &s in &sizes {
            check_size(s)?;
        }
        Ok(Self { sizes })
    }

    /// All sizes equal to one: every horocycle passes through the origin.
    pub fn unit(n: usize) -> Self {
        Self { sizes: vec![1.0; n] }
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn sizes(&self) -> &[f64] {
        &self.sizes
    }

    pub fn size(&self, i: usize) -> Result<f64> {
        self.sizes.get(i).copied().ok_or(Error::MissingDecoration(i))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            sizes: self.sizes.iter().map(|s| s * c).collect(),
        }
    }

    /// First pair of overlapping (or tangent) horocycles, if any.
    pub fn first_overlap(&self, points: &[BoundaryPoint]) -> Option<(usize, usize)> {
        for i in 0..points.len() {
            for j in (i + 1)..points.len() {
                let (si, sj) = (self.sizes.get(i)?, self.sizes.get(j)?);
                match truncated_distance(&points[i], &points[j], *si, *sj) {
                    Ok(d) if d > 0.0 => {}
                    _ => return Some((i, j)),
                }
            }
        }
        None
    }

    pub fn is_disjoint(&self, points: &[BoundaryPoint]) -> bool {
        self.sizes.len() >= points.len() && self.first_overlap(points).is_none()
    }
}

/// Normalizes an angle difference into `(-π, π]`.
pub fn signed_angle(delta: f64) -> f64 {
    let d = wrap_angle(delta);
    if d > PI {
        d - TAU
    } else {
        d
    }
}
