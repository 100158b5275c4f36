//! Truncated domains `D(ℓ)` and their triangulation.
//!
//! `D(ℓ)` is the compact convex region bounded, for each ideal vertex `d_i`,
//! by the geodesic chord joining the two points where the sides at `d_i`
//! leave the horocycle of size `s_i · 2^-ℓ`, and by the truncated sides.
//! Boundary arcs are stored in traversal order: chord at vertex `i`, then side `i`.
//!
//! Meshes are straight-sided triangulations in disk coordinates. Target edge
//! lengths are hyperbolic and shrink inside the cusps so that every cusp is
//! crossed by a fixed number of elements.

use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::str::FromStr;

use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};
use spade::{ConstrainedDelaunayTriangulation, FloatTriangulation, Point2, PositionInTriangulation, Triangulation};

use crate::error::{Error, Result};
use crate::hypgeo::{
    conformal_factor, distance, geodesic_direction, geodesic_toward, Decoration, Geodesic, MoebiusMap,
};
use crate::polygon::{EdgeLabel, Orientation, ScherkPolygon};

/// Default cusp grading.
pub const DEFAULT_GRADING: f64 = 2.0;
/// Default hyperbolic target edge length.
pub const DEFAULT_H: f64 = 0.2;
/// Cusp cross-section width, per unit grading, below which elements shrink.
pub const CUSP_SCALE: f64 = 0.6;

/// Degree-5 seven-point rule on a triangle: `(l1, l2, weight)` in barycentric
/// coordinates of the second and third vertex, weights summing to one.
pub const QUAD7: [(f64, f64, f64); 7] = [
    (1.0 / 3.0, 1.0 / 3.0, 0.225),
    (0.470_142_064_105_115, 0.470_142_064_105_115, 0.132_394_152_788_506),
    (0.059_715_871_789_770, 0.470_142_064_105_115, 0.132_394_152_788_506),
    (0.470_142_064_105_115, 0.059_715_871_789_770, 0.132_394_152_788_506),
    (0.101_286_507_323_456, 0.101_286_507_323_456, 0.125_939_180_544_827),
    (0.797_426_985_353_087, 0.101_286_507_323_456, 0.125_939_180_544_827),
    (0.101_286_507_323_456, 0.797_426_985_353_087, 0.125_939_180_544_827),
];

/// Node and arc markers. Side indices count A-sides (resp. B-sides) in edge order;
/// chord indices are vertex indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Marker {
    Interior,
    A(usize),
    B(usize),
    Chord(usize),
    /// Generic Dirichlet boundary, used by structured test meshes.
    Fixed,
}

impl Marker {
    pub fn is_boundary(&self) -> bool {
        !matches!(self, Marker::Interior)
    }
}

impl std::fmt::Display for Marker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Marker::Interior => write!(f, "I"),
            Marker::A(i) => write!(f, "A{i}"),
            Marker::B(i) => write!(f, "B{i}"),
            Marker::Chord(i) => write!(f, "G{i}"),
            Marker::Fixed => write!(f, "F"),
        }
    }
}

impl FromStr for Marker {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("bad marker {s:?}"));
        let idx = |t: &str| t.parse::<usize>().map_err(|_| bad());
        match s.split_at(s.len().min(1)) {
            ("I", "") => Ok(Marker::Interior),
            ("F", "") => Ok(Marker::Fixed),
            ("A", t) => Ok(Marker::A(idx(t)?)),
            ("B", t) => Ok(Marker::B(idx(t)?)),
            ("G", t) => Ok(Marker::Chord(idx(t)?)),
            _ => Err(bad()),
        }
    }
}

/// Geodesic boundary segment of a truncated domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryArc {
    pub marker: Marker,
    pub start: C,
    pub end: C,
    /// Hyperbolic length.
    pub length: f64,
}

impl BoundaryArc {
    fn new(marker: Marker, start: C, end: C) -> Self {
        Self {
            marker,
            start,
            end,
            length: distance(start, end),
        }
    }

    pub fn point_at(&self, sigma: f64) -> C {
        geodesic_toward(self.start, self.end, sigma)
    }

    pub fn geodesic(&self) -> Geodesic {
        Geodesic::through(self.start, self.end).expect("arc endpoints are distinct")
    }

    /// Hyperbolic distance from `z` to the arc (segment, not full geodesic).
    pub fn distance_to(&self, z: C) -> f64 {
        let g = self.geodesic();
        let off = g.distance_from(z);
        // foot parameter along the arc from its start
        let frame = g.frame();
        let w = frame.inverse().apply(z);
        let ws = frame.inverse().apply(self.start);
        let foot = |w: C| -> f64 {
            let c = 2.0 * w.re / (1.0 + w.norm_sqr());
            let x = if c.abs() < 1e-300 { 0.0 } else { (1.0 - (1.0 - c * c).max(0.0).sqrt()) / c };
            2.0 * x.atanh()
        };
        let t = foot(w) - foot(ws);
        if t < 0.0 {
            distance(z, self.start)
        } else if t > self.length {
            distance(z, self.end)
        } else {
            off
        }
    }
}

/// Compact truncation `D(ℓ)` of an ideal polygon.
#[derive(Clone, Debug)]
pub struct TruncatedDomain {
    pub parent: ScherkPolygon,
    pub level: u32,
    pub base_decoration: Decoration,
    /// `base_decoration · 2^-level`.
    pub decoration: Decoration,
    pub arcs: Vec<BoundaryArc>,
    /// Inverse frames of the arc geodesics, for membership tests.
    frames: Vec<MoebiusMap>,
}

/// Sizes `min_j |p_i - p_j| / 4`, pairwise disjoint by construction.
pub fn default_decoration(g: &ScherkPolygon) -> Decoration {
    let z: Vec<C> = g.vertices().iter().map(|v| v.to_complex()).collect();
    let sizes = (0..z.len())
        .map(|i| {
            (0..z.len())
                .filter(|&j| j != i)
                .map(|j| (z[i] - z[j]).norm())
                .fold(f64::INFINITY, f64::min)
                / 4.0
        })
        .collect();
    Decoration::new(sizes).expect("distinct vertices give positive sizes")
}

/// Marker of side `i` of `g`.
pub fn side_marker(g: &ScherkPolygon, i: usize) -> Marker {
    let ordinal = g.sides(g.label(i)).iter().position(|&e| e == i).expect("edge carries its label");
    match g.label(i) {
        EdgeLabel::A => Marker::A(ordinal),
        EdgeLabel::B => Marker::B(ordinal),
    }
}

pub fn truncate(g: &ScherkPolygon, level: u32) -> Result<TruncatedDomain> {
    truncate_with(g, level, &default_decoration(g))
}

pub fn truncate_with(g: &ScherkPolygon, level: u32, base: &Decoration) -> Result<TruncatedDomain> {
    let n = g.len();
    if base.len() < n {
        return Err(Error::MissingDecoration(base.len()));
    }
    if let Some((i, j)) = base.first_overlap(g.vertices()) {
        return Err(Error::DecorationOverlap(i, j));
    }
    let dec = base.scaled(0.5f64.powi(level as i32));
    // side i from vertex i to i+1, cut by both horocycles
    let mut ends = Vec::with_capacity(n);
    for i in 0..n {
        let side = Geodesic::new(g.vertex(i), g.vertex(i + 1))?;
        ends.push((side.horocycle_exit(true, dec.size(i)?), side.horocycle_exit(false, dec.size((i + 1) % n)?)));
    }
    let mut arcs = Vec::with_capacity(2 * n);
    for i in 0..n {
        let prev = ends[(i + n - 1) % n].1;
        arcs.push(BoundaryArc::new(Marker::Chord(i), prev, ends[i].0));
        arcs.push(BoundaryArc::new(side_marker(g, i), ends[i].0, ends[i].1));
    }
    let frames = arcs.iter().map(|a| a.geodesic().frame().inverse()).collect();
    Ok(TruncatedDomain {
        parent: g.clone(),
        level,
        base_decoration: base.clone(),
        decoration: dec,
        arcs,
        frames,
    })
}

impl TruncatedDomain {
    fn interior_sign(&self) -> f64 {
        match self.parent.orientation() {
            Orientation::CounterClockwise => 1.0,
            Orientation::Clockwise => -1.0,
        }
    }

    /// Closed-domain membership with hyperbolic tolerance `eps`.
    pub fn contains_within(&self, z: C, eps: f64) -> bool {
        if !(z.norm() < 1.0) {
            return false;
        }
        let sign = self.interior_sign();
        self.frames.iter().all(|f| {
            let w = f.apply(z);
            sign * (2.0 * w.im / (1.0 - w.norm_sqr())).asinh() >= -eps
        })
    }

    pub fn contains(&self, z: C) -> bool {
        self.contains_within(z, crate::hypgeo::EPS_GEO)
    }

    pub fn arc(&self, marker: Marker) -> Option<&BoundaryArc> {
        self.arcs.iter().find(|a| a.marker == marker)
    }

    pub fn chords(&self) -> impl Iterator<Item = &BoundaryArc> {
        self.arcs.iter().filter(|a| matches!(a.marker, Marker::Chord(_)))
    }

    pub fn sides(&self) -> impl Iterator<Item = &BoundaryArc> {
        self.arcs.iter().filter(|a| matches!(a.marker, Marker::A(_) | Marker::B(_)))
    }

    pub fn perimeter(&self) -> f64 {
        self.arcs.iter().map(|a| a.length).sum()
    }

    /// Exact hyperbolic area: the ideal polygon minus the cusp triangles cut off by the chords.
    pub fn hyperbolic_area(&self) -> f64 {
        let n = self.parent.len();
        let mut area = (n as f64 - 2.0) * std::f64::consts::PI;
        for i in 0..n {
            let chord = &self.arcs[2 * i];
            let v = self.parent.vertex(i).to_complex();
            let angle = |p: C, q: C| {
                let (a, b) = (geodesic_direction(p, v), geodesic_direction(p, q));
                (a.conj() * b).arg().abs()
            };
            area -= std::f64::consts::PI - angle(chord.start, chord.end) - angle(chord.end, chord.start);
        }
        area
    }

    /// Local target edge length. Inside the cusp at vertex `v`, the horocyclic cross-section of width `w`
    /// is resolved by `CUSP_SCALE · grading / h` elements.
    pub fn size_at(&self, z: C, h: f64, grading: f64) -> f64 {
        let n = self.parent.len();
        let mut width = f64::INFINITY;
        for i in 0..n {
            let v = self.parent.vertex(i).to_complex();
            // chart sending v to infinity and the origin to i
            let chart = |w: C| C::new(0.0, 1.0) * (v + w) / (v - w);
            let xp = chart(self.parent.vertex(i + n - 1).to_complex()).re;
            let xn = chart(self.parent.vertex(i + 1).to_complex()).re;
            let y = chart(z).im;
            if y > 0.0 {
                width = width.min((xn - xp).abs() / y);
            }
        }
        h * (width / (CUSP_SCALE * grading)).min(1.0)
    }
}

/// Triangulation in disk coordinates with per-node boundary markers.
#[derive(Clone, Debug, PartialEq)]
pub struct TriMesh {
    pub nodes: Vec<C>,
    /// Counter-clockwise in disk coordinates.
    pub triangles: Vec<[usize; 3]>,
    pub markers: Vec<Marker>,
}

fn orient(a: C, b: C, c: C) -> f64 {
    let (u, v) = (b - a, c - a);
    u.re * v.im - u.im * v.re
}

fn min_euclidean_angle(a: C, b: C, c: C) -> f64 {
    let ang = |p: C, q: C, r: C| ((q - p).conj() * (r - p)).arg().abs();
    ang(a, b, c).min(ang(b, c, a)).min(ang(c, a, b))
}

fn circumcenter(a: C, b: C, c: C) -> C {
    let (u, v) = (b - a, c - a);
    let d = 2.0 * (u.re * v.im - u.im * v.re);
    let (nu, nv) = (u.norm_sqr(), v.norm_sqr());
    a + C::new((v.im * nu - u.im * nv) / d, (u.re * nv - v.re * nu) / d)
}

/// True if `z` sees some boundary segment near it under an angle above 120 degrees.
fn encroaches(cdt: &Cdt, points: &[C], nb: usize, z: C, radius: f64) -> bool {
    let cos_max = (120f64).to_radians().cos();
    cdt.get_vertices_in_circle(Point2::new(z.re, z.im), radius * radius).any(|v| {
        let i = v.fix().index();
        i < nb
            && [(i + nb - 1) % nb, (i + 1) % nb].iter().any(|&j| {
                let (a, b) = (points[i] - z, points[j] - z);
                (a.re * b.re + a.im * b.im) < cos_max * a.norm() * b.norm()
            })
    })
}

/// Places boundary nodes on one arc by equidistributing `1 / size`; returns interior nodes only.
fn arc_nodes(dom: &TruncatedDomain, arc: &BoundaryArc, h: f64, grading: f64) -> Vec<C> {
    let mut sig = vec![0.0];
    let mut cum = vec![0.0];
    let mut s = 0.0;
    while s < arc.length {
        let hl = dom.size_at(arc.point_at(s), h, grading);
        let ds = (0.1 * hl).min(arc.length - s).max(arc.length * 1e-7);
        let mid = dom.size_at(arc.point_at(s + 0.5 * ds), h, grading);
        s += ds;
        sig.push(s.min(arc.length));
        cum.push(cum.last().unwrap() + ds / mid);
    }
    let total = *cum.last().unwrap();
    let m = (total.round() as usize).max(2);
    let mut out = Vec::with_capacity(m - 1);
    let mut k = 0;
    for j in 1..m {
        let target = total * j as f64 / m as f64;
        while cum[k + 1] < target {
            k += 1;
        }
        let t = (target - cum[k]) / (cum[k + 1] - cum[k]);
        out.push(arc.point_at(sig[k] + t * (sig[k + 1] - sig[k])));
    }
    out
}

type Cdt = ConstrainedDelaunayTriangulation<Point2<f64>>;

fn build_cdt(points: &[C], nb: usize) -> Result<Cdt> {
    let verts = points.iter().map(|z| Point2::new(z.re, z.im)).collect();
    let edges = (0..nb).map(|i| [i, (i + 1) % nb]).collect();
    let cdt = Cdt::bulk_load_cdt(verts, edges).map_err(|e| Error::MeshFailure(format!("{e:?}")))?;
    if cdt.num_vertices() != points.len() {
        return Err(Error::MeshFailure("duplicate mesh vertices".into()));
    }
    Ok(cdt)
}

fn inner_triangles(cdt: &Cdt, inside: &dyn Fn(C) -> bool) -> Vec<[usize; 3]> {
    cdt.inner_faces()
        .filter_map(|f| {
            let v = f.vertices();
            let idx = [v[0].fix().index(), v[1].fix().index(), v[2].fix().index()];
            let p: Vec<C> = v.iter().map(|h| C::new(h.position().x, h.position().y)).collect();
            let centroid = (p[0] + p[1] + p[2]) / 3.0;
            inside(centroid).then(|| {
                if orient(p[0], p[1], p[2]) > 0.0 {
                    idx
                } else {
                    [idx[0], idx[2], idx[1]]
                }
            })
        })
        .collect()
}

/// Graded conforming triangulation of `dom` with hyperbolic target size `h`.
///
/// Domains carried onto themselves by the rotation taking each vertex to the next
/// are meshed on one sector and rotated, so the mesh shares the symmetry exactly.
pub fn triangulate(dom: &TruncatedDomain, h: f64, grading: f64) -> Result<TriMesh> {
    if !(h > 0.0 && h.is_finite()) || !(grading >= 1.0) {
        return Err(Error::MeshFailure(format!("need h > 0 and grading >= 1, got {h}, {grading}")));
    }
    if let Some(omega) = rotation_step(dom) {
        return triangulate_symmetric(dom, h, grading, omega);
    }
    let mut points = Vec::new();
    let mut markers = Vec::new();
    let n = dom.parent.len();
    for (k, arc) in dom.arcs.iter().enumerate() {
        // corners belong to the side that follows or precedes them
        points.push(arc.start);
        markers.push(match arc.marker {
            Marker::Chord(_) => dom.arcs[(k + 2 * n - 1) % (2 * n)].marker,
            m => m,
        });
        for z in arc_nodes(dom, arc, h, grading) {
            points.push(z);
            markers.push(arc.marker);
        }
    }
    let nb = points.len();
    let inside = |z: C| dom.contains(z);
    let (points, tris) = refine(dom, h, grading, points, nb, &inside)?;
    markers.resize(points.len(), Marker::Interior);
    let (nodes, triangles, markers) = compact(points, tris, markers, Marker::is_boundary);
    let mesh = TriMesh { nodes, triangles, markers };
    mesh.check()?;
    Ok(mesh)
}

/// Rotation `ω` with `ω d_i = d_{i+1}` for every vertex and equal decoration sizes, if any.
fn rotation_step(dom: &TruncatedDomain) -> Option<C> {
    let g = &dom.parent;
    let m = g.len();
    let z = |i: usize| g.vertex(i).to_complex();
    let omega = z(1) / z(0);
    let s0 = dom.decoration.size(0).ok()?;
    let same = (0..m).all(|i| {
        (z(i) * omega - z(i + 1)).norm() < 1e-12 && dom.decoration.size(i).is_ok_and(|s| (s - s0).abs() <= 1e-12 * s0)
    });
    same.then_some(omega)
}

/// Position of a sector node, which decides its index and marker in each copy.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Slot {
    Free,
    Center,
    /// `k`-th node on the leading ray; the last one is the chord midpoint.
    Lead(usize),
    Trail(usize),
    /// On the chord at vertex `j + offset` of copy `j`.
    Chord(usize),
    Side,
}

fn triangulate_symmetric(dom: &TruncatedDomain, h: f64, grading: f64, omega: C) -> Result<TriMesh> {
    let g = &dom.parent;
    let m = g.len();
    let (chord0, side0, chord1) = (&dom.arcs[0], &dom.arcs[1], &dom.arcs[2]);
    let c0 = chord0.point_at(0.5 * chord0.length);
    let c1 = c0 * omega;
    let spoke = BoundaryArc::new(Marker::Interior, C::new(0.0, 0.0), c0);
    let mut ray = arc_nodes(dom, &spoke, h, grading);
    ray.push(c0);
    let last = ray.len() - 1;
    // loop: center, leading ray, half chord, side, half chord, trailing ray
    let mut points = vec![C::new(0.0, 0.0)];
    let mut slots = vec![Slot::Center];
    for (k, &z) in ray.iter().enumerate() {
        points.push(z);
        slots.push(Slot::Lead(k));
    }
    for z in arc_nodes(dom, &BoundaryArc::new(chord0.marker, c0, chord0.end), h, grading) {
        points.push(z);
        slots.push(Slot::Chord(0));
    }
    points.push(side0.start);
    slots.push(Slot::Side);
    for z in arc_nodes(dom, side0, h, grading) {
        points.push(z);
        slots.push(Slot::Side);
    }
    points.push(side0.end);
    slots.push(Slot::Side);
    for z in arc_nodes(dom, &BoundaryArc::new(chord1.marker, chord1.start, c1), h, grading) {
        points.push(z);
        slots.push(Slot::Chord(1));
    }
    for (k, &z) in ray.iter().enumerate().rev() {
        points.push(if k == last { c1 } else { z * omega });
        slots.push(Slot::Trail(k));
    }
    let nb = points.len();
    let cross = |a: C, b: C| a.re * b.im - a.im * b.re;
    let turn = cross(c0, c1).signum();
    // strict, so slivers along the rounded spokes are excluded
    let margin = 1e-10 * c0.norm();
    let inside = |z: C| dom.contains(z) && turn * cross(c0, z) > margin * z.norm() && turn * cross(z, c1) > margin * z.norm();
    let (points, tris) = refine(dom, h, grading, points, nb, &inside)?;
    slots.resize(points.len(), Slot::Free);
    let (points, tris, slots) = compact(points, tris, slots, |_| false);

    let mut nodes = vec![C::new(0.0, 0.0)];
    let mut markers = vec![Marker::Interior];
    let spoke_marker = |j: usize, k: usize| if k == last { Marker::Chord(j % m) } else { Marker::Interior };
    // spokes[j][k]: global index of ray node k on the ray toward vertex j
    let mut spokes: Vec<Vec<usize>> = Vec::with_capacity(m);
    let mut turn_j = C::new(1.0, 0.0);
    let mut turns = Vec::with_capacity(m);
    for j in 0..m {
        turns.push(turn_j);
        spokes.push(
            ray.iter()
                .enumerate()
                .map(|(k, &z)| {
                    nodes.push(if j == 0 { z } else { z * turn_j });
                    markers.push(spoke_marker(j, k));
                    nodes.len() - 1
                })
                .collect(),
        );
        turn_j *= omega;
    }
    let mut triangles = Vec::with_capacity(m * tris.len());
    for j in 0..m {
        let map: Vec<usize> = points
            .iter()
            .zip(&slots)
            .map(|(&z, slot)| match *slot {
                Slot::Center => 0,
                Slot::Lead(k) => spokes[j][k],
                Slot::Trail(k) => spokes[(j + 1) % m][k],
                other => {
                    nodes.push(if j == 0 { z } else { z * turns[j] });
                    markers.push(match other {
                        Slot::Chord(offset) => Marker::Chord((j + offset) % m),
                        Slot::Side => side_marker(g, j),
                        _ => Marker::Interior,
                    });
                    nodes.len() - 1
                }
            })
            .collect();
        triangles.extend(tris.iter().map(|t| [map[t[0]], map[t[1]], map[t[2]]]));
    }
    let mesh = TriMesh { nodes, triangles, markers };
    mesh.check()?;
    Ok(mesh)
}

/// Delaunay refinement of the region enclosed by the first `nb` points, which form a closed loop.
fn refine(
    dom: &TruncatedDomain,
    h: f64,
    grading: f64,
    mut points: Vec<C>,
    nb: usize,
    inside: &dyn Fn(C) -> bool,
) -> Result<(Vec<C>, Vec<[usize; 3]>)> {
    let mut cdt = build_cdt(&points, nb)?;
    let size_e = |z: C| dom.size_at(z, h, grading) / conformal_factor(z);
    let max_vertices = 2_000_000;
    for _pass in 0..200 {
        let mut candidates: Vec<(C, C)> = Vec::new();
        for f in cdt.inner_faces() {
            let p: Vec<C> = f.vertices().iter().map(|v| C::new(v.position().x, v.position().y)).collect();
            let centroid = (p[0] + p[1] + p[2]) / 3.0;
            if !inside(centroid) {
                continue;
            }
            let longest = distance(p[0], p[1]).max(distance(p[1], p[2])).max(distance(p[2], p[0]));
            let target = dom.size_at(centroid, h, grading);
            let too_big = longest > target;
            let too_thin = min_euclidean_angle(p[0], p[1], p[2]) < 28f64.to_radians();
            if too_big || too_thin {
                candidates.push((circumcenter(p[0], p[1], p[2]), centroid));
            }
        }
        if candidates.is_empty() {
            break;
        }
        let mut inserted = 0;
        for (cc, centroid) in candidates {
            for (z, factor) in [(cc, 0.5), (centroid, 0.3)] {
                if !dom.contains_within(z, -1e-9) || !inside(z) {
                    continue;
                }
                let r = factor * size_e(z);
                let near = cdt.get_vertices_in_circle(Point2::new(z.re, z.im), r * r).next().is_some();
                if near || encroaches(&cdt, &points, nb, z, 1.5 * size_e(z)) {
                    continue;
                }
                if !matches!(cdt.locate(Point2::new(z.re, z.im)), PositionInTriangulation::OnFace(_)) {
                    continue;
                }
                cdt.insert(Point2::new(z.re, z.im)).map_err(|e| Error::MeshFailure(format!("{e:?}")))?;
                points.push(z);
                inserted += 1;
                break;
            }
        }
        if inserted == 0 {
            break;
        }
        if points.len() > max_vertices {
            return Err(Error::MeshFailure("vertex budget exhausted".into()));
        }
    }
    // spade keeps insertion order, so vertex indices equal positions in `points`
    let tris = inner_triangles(&cdt, inside);
    smooth(&mut points, &tris, nb, 4);
    let cdt = build_cdt(&points, nb)?;
    let tris = inner_triangles(&cdt, inside);
    Ok((points, tris))
}

/// Laplacian smoothing of non-boundary nodes, rejecting moves that lower the local minimum angle.
fn smooth(points: &mut [C], tris: &[[usize; 3]], nb: usize, iterations: usize) {
    let np = points.len();
    let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); np];
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); np];
    for (t, tri) in tris.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            nbrs[a].push(b);
            nbrs[b].push(a);
            incident[tri[k]].push(t);
        }
    }
    for list in nbrs.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    let local_min = |pts: &[C], v: usize| -> f64 {
        incident[v]
            .iter()
            .map(|&t| {
                let [a, b, c] = tris[t];
                if orient(pts[a], pts[b], pts[c]) <= 0.0 {
                    -1.0
                } else {
                    min_euclidean_angle(pts[a], pts[b], pts[c])
                }
            })
            .fold(f64::INFINITY, f64::min)
    };
    for _ in 0..iterations {
        for v in nb..np {
            if nbrs[v].is_empty() {
                continue;
            }
            let avg = nbrs[v].iter().map(|&u| points[u]).sum::<C>() / nbrs[v].len() as f64;
            let before = local_min(points, v);
            let old = points[v];
            points[v] = avg;
            if local_min(points, v) < before {
                points[v] = old;
            }
        }
    }
}

/// Drops unreferenced nodes, except those `keep` retains, and renumbers.
fn compact<T: Copy>(points: Vec<C>, tris: Vec<[usize; 3]>, tags: Vec<T>, keep: impl Fn(&T) -> bool) -> (Vec<C>, Vec<[usize; 3]>, Vec<T>) {
    let mut used = vec![false; points.len()];
    for t in &tris {
        for &i in t {
            used[i] = true;
        }
    }
    let mut map = vec![usize::MAX; points.len()];
    let mut nodes = Vec::new();
    let mut kept = Vec::new();
    for (i, &z) in points.iter().enumerate() {
        if keep(&tags[i]) || used[i] {
            map[i] = nodes.len();
            nodes.push(z);
            kept.push(tags[i]);
        }
    }
    let triangles = tris.iter().map(|t| [map[t[0]], map[t[1]], map[t[2]]]).collect();
    (nodes, triangles, kept)
}

/// Bucket-grid point location over a mesh.
#[derive(Clone, Debug)]
pub struct Locator<'a> {
    mesh: &'a TriMesh,
    lo: C,
    cell: f64,
    side: usize,
    buckets: Vec<Vec<u32>>,
}

impl<'a> Locator<'a> {
    pub fn new(mesh: &'a TriMesh) -> Self {
        let (mut lo, mut hi) = (C::new(f64::INFINITY, f64::INFINITY), C::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
        for z in &mesh.nodes {
            lo = C::new(lo.re.min(z.re), lo.im.min(z.im));
            hi = C::new(hi.re.max(z.re), hi.im.max(z.im));
        }
        let side = ((2.0 * (mesh.triangles.len() as f64).sqrt()).ceil() as usize).max(1);
        let cell = (hi.re - lo.re).max(hi.im - lo.im).max(1e-300) / side as f64;
        let mut buckets = vec![Vec::new(); side * side];
        let clampi = |v: f64| (v.max(0.0) as usize).min(side - 1);
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let p = tri.map(|i| mesh.nodes[i]);
            let (x0, x1) = (p.iter().map(|z| z.re).fold(f64::INFINITY, f64::min), p.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max));
            let (y0, y1) = (p.iter().map(|z| z.im).fold(f64::INFINITY, f64::min), p.iter().map(|z| z.im).fold(f64::NEG_INFINITY, f64::max));
            for j in clampi((y0 - lo.im) / cell)..=clampi((y1 - lo.im) / cell) {
                for i in clampi((x0 - lo.re) / cell)..=clampi((x1 - lo.re) / cell) {
                    buckets[j * side + i].push(t as u32);
                }
            }
        }
        Self { mesh, lo, cell, side, buckets }
    }

    /// Triangle containing `z` with barycentric coordinates, or `None` outside the mesh.
    pub fn locate(&self, z: C) -> Option<(usize, [f64; 3])> {
        let (i, j) = ((z.re - self.lo.re) / self.cell, (z.im - self.lo.im) / self.cell);
        let span = -1e-9..=self.side as f64 + 1e-9;
        if !(span.contains(&i) && span.contains(&j)) {
            return None;
        }
        let (i, j) = ((i.max(0.0) as usize).min(self.side - 1), (j.max(0.0) as usize).min(self.side - 1));
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for &t in &self.buckets[j * self.side + i] {
            let b = self.mesh.barycentric(t as usize, z);
            let worst = b[0].min(b[1]).min(b[2]);
            if worst >= 0.0 {
                return Some((t as usize, b));
            }
            if best.is_none_or(|(_, _, w)| worst > w) {
                best = Some((t as usize, b, worst));
            }
        }
        // points on shared edges may round to a tiny negative coordinate
        best.filter(|&(_, _, w)| w > -1e-12).map(|(t, b, _)| (t, b))
    }

    pub fn interpolate(&self, values: &[f64], z: C) -> Option<f64> {
        self.locate(z).map(|(t, b)| {
            let tri = self.mesh.triangles[t];
            b[0] * values[tri[0]] + b[1] * values[tri[1]] + b[2] * values[tri[2]]
        })
    }
}

/// Structured mesh of the half-plane rectangle `[x0, x1] × [y0, y1]`, mapped into the disk.
/// Cells are split along alternating diagonals; boundary nodes are marked `Fixed`.
pub fn half_plane_rectangle(x0: f64, x1: f64, y0: f64, y1: f64, nx: usize, ny: usize) -> Result<TriMesh> {
    if !(y0 > 0.0 && x1 > x0 && y1 > y0 && nx >= 1 && ny >= 1) {
        return Err(Error::MeshFailure("degenerate half-plane rectangle".into()));
    }
    let to_disk = MoebiusMap::cayley().inverse();
    let id = |i: usize, j: usize| j * (nx + 1) + i;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    let mut markers = Vec::with_capacity(nodes.capacity());
    for j in 0..=ny {
        for i in 0..=nx {
            let w = C::new(x0 + (x1 - x0) * i as f64 / nx as f64, y0 + (y1 - y0) * j as f64 / ny as f64);
            nodes.push(to_disk.apply(w));
            markers.push(if i == 0 || j == 0 || i == nx || j == ny { Marker::Fixed } else { Marker::Interior });
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            if (i + j) % 2 == 0 {
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            } else {
                triangles.push([a, b, d]);
                triangles.push([b, c, d]);
            }
        }
    }
    let mesh = TriMesh { nodes, triangles, markers };
    mesh.check()?;
    Ok(mesh)
}

/// Inverse of the Cayley transform, for evaluating half-plane data on disk nodes.
pub fn to_half_plane(z: C) -> C {
    MoebiusMap::cayley().apply(z)
}

impl TriMesh {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Orientation, index range and interior-ness of every node.
    pub fn check(&self) -> Result<()> {
        if self.triangles.is_empty() {
            return Err(Error::MeshFailure("empty mesh".into()));
        }
        if self.markers.len() != self.nodes.len() {
            return Err(Error::MeshFailure("marker count mismatch".into()));
        }
        if self.nodes.iter().any(|z| !(z.norm() < 1.0)) {
            return Err(Error::MeshFailure("node outside the disk".into()));
        }
        for t in &self.triangles {
            if t.iter().any(|&i| i >= self.nodes.len()) {
                return Err(Error::MeshFailure("triangle index out of range".into()));
            }
            if orient(self.nodes[t[0]], self.nodes[t[1]], self.nodes[t[2]]) <= 0.0 {
                return Err(Error::MeshFailure(format!("non-positive triangle {t:?} {:?}", t.map(|i| (self.nodes[i], self.markers[i])))));
            }
        }
        Ok(())
    }

    /// Edges used by one triangle only, oriented with the interior on the left.
    pub fn boundary_edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(3 * self.triangles.len());
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                edges.push((a.min(b), a.max(b), a, b));
            }
        }
        edges.sort_unstable();
        let mut out = Vec::new();
        let mut i = 0;
        while i < edges.len() {
            let mut j = i + 1;
            while j < edges.len() && edges[j].0 == edges[i].0 && edges[j].1 == edges[i].1 {
                j += 1;
            }
            if j - i == 1 {
                out.push((edges[i].2, edges[i].3));
            }
            i = j;
        }
        out
    }

    /// The boundary as a single counter-clockwise node cycle.
    pub fn boundary_loop(&self) -> Result<Vec<usize>> {
        let edges = self.boundary_edges();
        let mut next = vec![usize::MAX; self.nodes.len()];
        for &(a, b) in &edges {
            if next[a] != usize::MAX {
                return Err(Error::MeshFailure("boundary is not a simple cycle".into()));
            }
            next[a] = b;
        }
        let start = edges.iter().map(|e| e.0).min().ok_or_else(|| Error::MeshFailure("no boundary".into()))?;
        let mut cycle = vec![start];
        let mut cur = next[start];
        while cur != start {
            if cur == usize::MAX || cycle.len() > edges.len() {
                return Err(Error::MeshFailure("boundary is not a single cycle".into()));
            }
            cycle.push(cur);
            cur = next[cur];
        }
        if cycle.len() != edges.len() {
            return Err(Error::MeshFailure("boundary has several components".into()));
        }
        Ok(cycle)
    }

    /// Marker of the boundary edge `(a, b)`: the chord if either end is on one, else the shared side.
    pub fn edge_marker(&self, a: usize, b: usize) -> Marker {
        match (self.markers[a], self.markers[b]) {
            (m @ Marker::Chord(_), _) | (_, m @ Marker::Chord(_)) => m,
            (m, _) => m,
        }
    }

    pub fn is_boundary_node(&self, i: usize) -> bool {
        self.markers[i].is_boundary()
    }

    /// Barycentric coordinates of `z` in triangle `t`.
    pub fn barycentric(&self, t: usize, z: C) -> [f64; 3] {
        let [a, b, c] = self.triangles[t].map(|i| self.nodes[i]);
        let d = orient(a, b, c);
        let l1 = orient(a, z, c) / d;
        let l2 = orient(a, b, z) / d;
        [1.0 - l1 - l2, l1, l2]
    }

    /// Euclidean area of triangle `t` in disk coordinates.
    pub fn euclidean_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        0.5 * orient(self.nodes[a], self.nodes[b], self.nodes[c])
    }

    /// Hyperbolic angles of triangle `t` from its geodesic side lengths.
    pub fn hyperbolic_angles(&self, t: usize) -> [f64; 3] {
        let [a, b, c] = self.triangles[t].map(|i| self.nodes[i]);
        let (la, lb, lc) = (distance(b, c), distance(c, a), distance(a, b));
        let angle = |opp: f64, s1: f64, s2: f64| {
            // hyperbolic law of cosines
            let num = s1.cosh() * s2.cosh() - opp.cosh();
            (num / (s1.sinh() * s2.sinh())).clamp(-1.0, 1.0).acos()
        };
        [angle(la, lb, lc), angle(lb, lc, la), angle(lc, la, lb)]
    }

    pub fn min_hyperbolic_angle(&self) -> f64 {
        (0..self.triangles.len())
            .flat_map(|t| self.hyperbolic_angles(t))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_hyperbolic_diameter(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.nodes[i]);
                distance(a, b).max(distance(b, c)).max(distance(c, a))
            })
            .fold(0.0, f64::max)
    }

    /// Hyperbolic area of the straight-sided mesh, by 7-point quadrature of `λ²`.
    pub fn hyperbolic_area(&self) -> f64 {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.triangles[t].map(|i| self.nodes[i]);
                let area = self.euclidean_area(t);
                QUAD7
                    .iter()
                    .map(|&(l1, l2, w)| {
                        let z = a * (1.0 - l1 - l2) + b * l1 + c * l2;
                        w * conformal_factor(z).powi(2)
                    })
                    .sum::<f64>()
                    * area
            })
            .sum()
    }

    /// Text form: header, `x y marker` node lines, `i j k` triangle lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "scherk-mesh 1").unwrap();
        writeln!(s, "nodes {} triangles {}", self.nodes.len(), self.triangles.len()).unwrap();
        for (z, m) in self.nodes.iter().zip(&self.markers) {
            writeln!(s, "{:e} {:e} {}", z.re, z.im, m).unwrap();
        }
        for t in &self.triangles {
            writeln!(s, "{} {} {}", t[0], t[1], t[2]).unwrap();
        }
        s
    }

    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Parse("unexpected end of mesh file".into()))?
                .map_err(Error::from)
        };
        if next()?.trim() != "scherk-mesh 1" {
            return Err(Error::Parse("not a scherk-mesh 1 file".into()));
        }
        let counts = next()?;
        let f: Vec<&str> = counts.split_whitespace().collect();
        if f.len() != 4 || f[0] != "nodes" || f[2] != "triangles" {
            return Err(Error::Parse(format!("bad count line {counts:?}")));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Parse(format!("bad count {s:?}")));
        let (nn, nt) = (num(f[1])?, num(f[3])?);
        let mut nodes = Vec::with_capacity(nn);
        let mut markers = Vec::with_capacity(nn);
        for _ in 0..nn {
            let line = next()?;
            let p: Vec<&str> = line.split_whitespace().collect();
            if p.len() != 3 {
                return Err(Error::Parse(format!("bad node line {line:?}")));
            }
            let x = p[0].parse::<f64>().map_err(|_| Error::Parse(format!("bad coordinate {:?}", p[0])))?;
            let y = p[1].parse::<f64>().map_err(|_| Error::Parse(format!("bad coordinate {:?}", p[1])))?;
            nodes.push(C::new(x, y));
            markers.push(p[2].parse()?);
        }
        let mut triangles = Vec::with_capacity(nt);
        for _ in 0..nt {
            let line = next()?;
            let p: Vec<usize> = line.split_whitespace().map(num).collect::<Result<_>>()?;
            if p.len() != 3 {
                return Err(Error::Parse(format!("bad triangle line {line:?}")));
            }
            triangles.push([p[0], p[1], p[2]]);
        }
        let mesh = TriMesh { nodes, triangles, markers };
        mesh.check()?;
        Ok(mesh)
    }
}
