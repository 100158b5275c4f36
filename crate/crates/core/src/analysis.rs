//! Intrinsic geometry of a solved graph in `H × R`.
//!
//! The piecewise-linear graph is treated as a polyhedral surface: each edge is
//! the product-metric geodesic between its lifted endpoints, and each triangle
//! is flat with those edge lengths. Curvature then lives at vertices as angle
//! defects, and conformal moduli come from the cotangent Laplacian.
//!
//! Modulus convention: `M = 2π / E` for the Dirichlet energy `E` of the
//! potential equal to 0 on the inner loop and 1 on the outer loop, so the
//! round annulus `r < |z| < R` has `M = ln(R / r)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use num_complex::Complex64 as C;
use serde::{Deserialize, Serialize};
use sprs::{FillInReduction, SymmetryCheck, TriMat};
use sprs_ldl::Ldl;

use crate::error::{Error, Result};
use crate::hypgeo::{busemann, distance};
use crate::meshing::{Marker, TriMesh, TruncatedDomain};
use crate::solver::{FittedGeodesic, SequenceRun, Solution};

/// Flat-triangle metric on a triangle mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphMetric {
    pub num_nodes: usize,
    pub triangles: Vec<[usize; 3]>,
    /// `lengths[t][k]` is the length of the edge opposite corner `k`.
    pub lengths: Vec<[f64; 3]>,
    /// Nodes on the boundary of the underlying mesh.
    pub boundary: Vec<bool>,
}

/// Heron's formula in the stable ordering `a ≥ b ≥ c`.
fn heron(l: [f64; 3]) -> f64 {
    let mut s = l;
    s.sort_by(|x, y| y.total_cmp(x));
    let [a, b, c] = s;
    let p = (a + (b + c)) * (c - (a - b)) * (c + (a - b)) * (a + (b - c));
    0.25 * p.max(0.0).sqrt()
}

impl GraphMetric {
    /// Metric with the given length of every edge `(i, j)`.
    fn from_edges(mesh: &TriMesh, length: impl Fn(usize, usize) -> f64) -> Self {
        let lengths = mesh.triangles.iter().map(|t| [0, 1, 2].map(|k| length(t[(k + 1) % 3], t[(k + 2) % 3]))).collect();
        let mut boundary = vec![false; mesh.num_nodes()];
        for (a, b) in mesh.boundary_edges() {
            boundary[a] = true;
            boundary[b] = true;
        }
        Self { num_nodes: mesh.num_nodes(), triangles: mesh.triangles.clone(), lengths, boundary }
    }

    /// Euclidean metric of the mesh nodes, for reference domains.
    pub fn euclidean(mesh: &TriMesh) -> Self {
        Self::from_edges(mesh, |i, j| (mesh.nodes[i] - mesh.nodes[j]).norm())
    }

    /// Hyperbolic edge lengths of the base mesh.
    pub fn hyperbolic(mesh: &TriMesh) -> Self {
        Self::from_edges(mesh, |i, j| distance(mesh.nodes[i], mesh.nodes[j]))
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.lengths.iter_mut().for_each(|l| l.iter_mut().for_each(|x| *x *= c));
        out
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        heron(self.lengths[t])
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Corner angles of triangle `t` by the law of cosines.
    pub fn angles(&self, t: usize) -> [f64; 3] {
        let l = self.lengths[t];
        [0, 1, 2].map(|k| {
            let (a, b, c) = (l[k], l[(k + 1) % 3], l[(k + 2) % 3]);
            ((b * b + c * c - a * a) / (2.0 * b * c)).clamp(-1.0, 1.0).acos()
        })
    }

    /// Cotangent of each corner angle, `(b² + c² − a²) / 4A`.
    fn cotangents(&self, t: usize) -> [f64; 3] {
        let l = self.lengths[t];
        let area = self.triangle_area(t);
        [0, 1, 2].map(|k| {
            let (a, b, c) = (l[k], l[(k + 1) % 3], l[(k + 2) % 3]);
            (b * b + c * c - a * a) / (4.0 * area)
        })
    }

    /// Whether every triangle satisfies the strict triangle inequalities.
    pub fn is_valid(&self) -> bool {
        self.lengths.iter().all(|l| {
            let [a, b, c] = *l;
            a > 0.0 && b > 0.0 && c > 0.0 && a < b + c && b < a + c && c < a + b
        })
    }
}

/// Lifts every edge to the product-metric geodesic between `(z_i, u_i)` and `(z_j, u_j)`.
pub fn induced_metric(sol: &Solution) -> GraphMetric {
    let mesh = &*sol.mesh;
    GraphMetric::from_edges(mesh, |i, j| distance(mesh.nodes[i], mesh.nodes[j]).hypot(sol.u[i] - sol.u[j]))
}

/// Sum of angle defects `2π − Σθ` over interior vertices.
pub fn total_curvature(gm: &GraphMetric) -> f64 {
    let mut angle_sum = vec![0.0; gm.num_nodes];
    let mut touched = vec![false; gm.num_nodes];
    for (t, tri) in gm.triangles.iter().enumerate() {
        let ang = gm.angles(t);
        for k in 0..3 {
            angle_sum[tri[k]] += ang[k];
            touched[tri[k]] = true;
        }
    }
    (0..gm.num_nodes)
        .filter(|&v| touched[v] && !gm.boundary[v])
        .map(|v| 2.0 * std::f64::consts::PI - angle_sum[v])
        .sum()
}

/// Total curvature of one member of a cap sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureRow {
    pub n: u32,
    pub level: u32,
    pub nodes: usize,
    pub total_curvature: f64,
    /// Graph area in the induced metric.
    pub area: f64,
}

pub fn curvature_series(seq: &[SequenceRun]) -> Vec<CurvatureRow> {
    seq.iter()
        .map(|run| {
            let gm = induced_metric(&run.solution);
            CurvatureRow {
                n: run.n,
                level: run.level,
                nodes: run.solution.mesh.num_nodes(),
                total_curvature: total_curvature(&gm),
                area: gm.area(),
            }
        })
        .collect()
}

pub fn write_curvature_csv(rows: &[CurvatureRow], w: impl std::io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in rows {
        out.serialize(row).map_err(|e| Error::Io(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}

/// Annular submesh with its two boundary loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub triangles: Vec<usize>,
    pub inner: Vec<usize>,
    pub outer: Vec<usize>,
}

/// Closed loops formed by the boundary edges of a set of triangles, or `None` if a vertex is pinched.
fn boundary_loops(triangles: &[[usize; 3]], subset: &[usize]) -> Option<Vec<Vec<usize>>> {
    let mut count: BTreeMap<(usize, usize), i32> = BTreeMap::new();
    for &t in subset {
        let tri = triangles[t];
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            *count.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let mut next: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&(a, b), &c) in &count {
        if c == 1 {
            next.entry(a).or_default().push(b);
            next.entry(b).or_default().push(a);
        }
    }
    if next.values().any(|v| v.len() != 2) {
        return None;
    }
    let mut seen = BTreeSet::new();
    let mut loops = Vec::new();
    for &start in next.keys() {
        if seen.contains(&start) {
            continue;
        }
        let mut lp = vec![start];
        seen.insert(start);
        let (mut prev, mut cur) = (start, next[&start][0]);
        while cur != start {
            lp.push(cur);
            seen.insert(cur);
            let n = &next[&cur];
            let step = if n[0] == prev { n[1] } else { n[0] };
            prev = cur;
            cur = step;
        }
        loops.push(lp);
    }
    Some(loops)
}

impl RingSpec {
    /// Triangles whose mean vertex value lies in `[lo, hi)`; the inner loop is the one with smaller values.
    pub fn band(triangles: &[[usize; 3]], value: &[f64], lo: f64, hi: f64) -> Result<Self> {
        let subset: Vec<usize> = (0..triangles.len())
            .filter(|&t| {
                let m = triangles[t].iter().map(|&i| value[i]).sum::<f64>() / 3.0;
                m >= lo && m < hi
            })
            .collect();
        let loops = boundary_loops(triangles, &subset).ok_or_else(|| Error::NotAnAnnulus("pinched boundary".into()))?;
        let [a, b]: [Vec<usize>; 2] = loops
            .try_into()
            .map_err(|l: Vec<Vec<usize>>| Error::NotAnAnnulus(format!("{} boundary loops", l.len())))?;
        let mean = |lp: &[usize]| lp.iter().map(|&i| value[i]).sum::<f64>() / lp.len() as f64;
        let (inner, outer) = if mean(&a) <= mean(&b) { (a, b) } else { (b, a) };
        let ring = Self { triangles: subset, inner, outer };
        ring.validate(triangles)?;
        Ok(ring)
    }

    /// Connected, Euler characteristic zero, and bounded by exactly the two loops.
    pub fn validate(&self, triangles: &[[usize; 3]]) -> Result<()> {
        let bad = |m: &str| Err(Error::NotAnAnnulus(m.into()));
        if self.triangles.is_empty() || self.inner.len() < 3 || self.outer.len() < 3 {
            return bad("empty ring");
        }
        let inner: BTreeSet<usize> = self.inner.iter().copied().collect();
        if self.outer.iter().any(|v| inner.contains(v)) {
            return bad("loops intersect");
        }
        let Some(loops) = boundary_loops(triangles, &self.triangles) else {
            return bad("pinched boundary");
        };
        let as_set = |l: &[usize]| l.iter().copied().collect::<BTreeSet<usize>>();
        let mut found: Vec<BTreeSet<usize>> = loops.iter().map(|l| as_set(l)).collect();
        let mut want = vec![inner, as_set(&self.outer)];
        found.sort();
        want.sort();
        if found != want {
            return bad("loops are not the boundary of the submesh");
        }
        let mut vertices = BTreeSet::new();
        let mut edges = BTreeSet::new();
        let mut adj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let mut edge_owner: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for &t in &self.triangles {
            let tri = triangles[t];
            for k in 0..3 {
                vertices.insert(tri[k]);
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let e = (a.min(b), a.max(b));
                edges.insert(e);
                if let Some(&o) = edge_owner.get(&e) {
                    adj.entry(o).or_default().push(t);
                    adj.entry(t).or_default().push(o);
                } else {
                    edge_owner.insert(e, t);
                }
            }
        }
        if vertices.len() as i64 - edges.len() as i64 + self.triangles.len() as i64 != 0 {
            return bad("Euler characteristic is not zero");
        }
        let mut seen = BTreeSet::from([self.triangles[0]]);
        let mut stack = vec![self.triangles[0]];
        while let Some(t) = stack.pop() {
            for &s in adj.get(&t).into_iter().flatten() {
                if seen.insert(s) {
                    stack.push(s);
                }
            }
        }
        if seen.len() != self.triangles.len() {
            return bad("ring is disconnected");
        }
        Ok(())
    }
}

/// Triangle adjacency across shared edges.
fn triangle_neighbours(triangles: &[[usize; 3]]) -> Vec<Vec<usize>> {
    let mut owner: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut adj = vec![Vec::new(); triangles.len()];
    for (t, tri) in triangles.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            if let Some(o) = owner.insert((a.min(b), a.max(b)), t) {
                adj[o].push(t);
                adj[t].push(o);
            }
        }
    }
    adj
}

/// Topological disk around `seed` made of triangles with every vertex value below `rho`.
///
/// Holes are filled and pinched vertices absorbed until the boundary is one simple loop.
/// Fails if the disk reaches the boundary of the mesh.
pub fn sublevel_disk(gm: &GraphMetric, value: &[f64], seed: usize, rho: f64) -> Result<BTreeSet<usize>> {
    let adj = triangle_neighbours(&gm.triangles);
    let touches_boundary = |t: usize| gm.triangles[t].iter().any(|&v| gm.boundary[v]);
    let below = |t: usize| gm.triangles[t].iter().all(|&v| value[v] < rho);
    let start: Vec<usize> = (0..gm.triangles.len()).filter(|&t| gm.triangles[t].contains(&seed) && below(t)).collect();
    if start.is_empty() {
        return Err(Error::NotAnAnnulus(format!("no triangle around the seed lies below {rho}")));
    }
    let mut disk: BTreeSet<usize> = start.iter().copied().collect();
    let mut stack = start;
    while let Some(t) = stack.pop() {
        for &s in &adj[t] {
            if below(s) && disk.insert(s) {
                stack.push(s);
            }
        }
    }
    for _ in 0..64 {
        // fill complement components that never reach the mesh boundary
        let mut seen = disk.clone();
        for t0 in 0..gm.triangles.len() {
            if seen.contains(&t0) {
                continue;
            }
            let mut comp = vec![t0];
            seen.insert(t0);
            let mut open = false;
            let mut i = 0;
            while i < comp.len() {
                let t = comp[i];
                open |= touches_boundary(t);
                for &s in &adj[t] {
                    if seen.insert(s) {
                        comp.push(s);
                    }
                }
                i += 1;
            }
            if !open {
                disk.extend(comp);
            }
        }
        if disk.iter().any(|&t| touches_boundary(t)) {
            return Err(Error::NotAnAnnulus(format!("disk of radius {rho} reaches the mesh boundary")));
        }
        let subset: Vec<usize> = disk.iter().copied().collect();
        let mut degree: BTreeMap<usize, usize> = BTreeMap::new();
        let mut count: BTreeMap<(usize, usize), i32> = BTreeMap::new();
        for &t in &subset {
            let tri = gm.triangles[t];
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *count.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        for (&(a, b), &c) in &count {
            if c == 1 {
                *degree.entry(a).or_default() += 1;
                *degree.entry(b).or_default() += 1;
            }
        }
        let pinched: Vec<usize> = degree.iter().filter(|(_, &d)| d != 2).map(|(&v, _)| v).collect();
        if pinched.is_empty() {
            return Ok(disk);
        }
        for (t, tri) in gm.triangles.iter().enumerate() {
            if tri.iter().any(|v| pinched.contains(v)) {
                disk.insert(t);
            }
        }
    }
    Err(Error::NotAnAnnulus("could not regularize the disk boundary".into()))
}

impl RingSpec {
    /// `disk(hi) \ disk(lo)` for the sublevel disks of `value` around `seed`.
    pub fn between_disks(gm: &GraphMetric, value: &[f64], seed: usize, lo: f64, hi: f64) -> Result<Self> {
        let inner_disk = sublevel_disk(gm, value, seed, lo)?;
        let outer_disk = sublevel_disk(gm, value, seed, hi)?;
        if !inner_disk.is_subset(&outer_disk) {
            return Err(Error::NotAnAnnulus("inner disk is not nested in the outer disk".into()));
        }
        let subset: Vec<usize> = outer_disk.difference(&inner_disk).copied().collect();
        let inner_tris: Vec<usize> = inner_disk.into_iter().collect();
        let outer_tris: Vec<usize> = outer_disk.into_iter().collect();
        let single = |tris: &[usize]| -> Result<Vec<usize>> {
            let mut loops = boundary_loops(&gm.triangles, tris).ok_or_else(|| Error::NotAnAnnulus("pinched boundary".into()))?;
            match loops.len() {
                1 => Ok(loops.pop().unwrap_or_default()),
                k => Err(Error::NotAnAnnulus(format!("disk has {k} boundary loops"))),
            }
        };
        let ring = Self { triangles: subset, inner: single(&inner_tris)?, outer: single(&outer_tris)? };
        ring.validate(&gm.triangles)?;
        Ok(ring)
    }
}

/// Conformal modulus of `ring` in the metric `gm`.
pub fn ring_modulus(gm: &GraphMetric, ring: &RingSpec) -> Result<f64> {
    ring.validate(&gm.triangles)?;
    let mut fixed: BTreeMap<usize, f64> = ring.inner.iter().map(|&v| (v, 0.0)).collect();
    fixed.extend(ring.outer.iter().map(|&v| (v, 1.0)));
    let mut index = BTreeMap::new();
    for &t in &ring.triangles {
        for &v in &gm.triangles[t] {
            if !fixed.contains_key(&v) && !index.contains_key(&v) {
                index.insert(v, index.len());
            }
        }
    }
    // edge weights w_ij = (cot α + cot β) / 2
    let mut weight: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for &t in &ring.triangles {
        let tri = gm.triangles[t];
        let cot = gm.cotangents(t);
        for k in 0..3 {
            let (a, b) = (tri[(k + 1) % 3], tri[(k + 2) % 3]);
            *weight.entry((a.min(b), a.max(b))).or_default() += 0.5 * cot[k];
        }
    }
    let n = index.len();
    let mut value: BTreeMap<usize, f64> = fixed.clone();
    if n > 0 {
        let mut mat = TriMat::new((n, n));
        let mut rhs = vec![0.0; n];
        for (&(a, b), &w) in &weight {
            match (index.get(&a), index.get(&b)) {
                (Some(&i), Some(&j)) => {
                    mat.add_triplet(i, i, w);
                    mat.add_triplet(j, j, w);
                    mat.add_triplet(i, j, -w);
                    mat.add_triplet(j, i, -w);
                }
                (Some(&i), None) => {
                    mat.add_triplet(i, i, w);
                    rhs[i] += w * fixed[&b];
                }
                (None, Some(&j)) => {
                    mat.add_triplet(j, j, w);
                    rhs[j] += w * fixed[&a];
                }
                (None, None) => {}
            }
        }
        let csr = mat.to_csr::<usize>();
        let ldl = Ldl::new()
            .check_symmetry(SymmetryCheck::DontCheckSymmetry)
            .fill_in_reduction(FillInReduction::ReverseCuthillMcKee);
        let factor = ldl.numeric(csr.view()).map_err(|e| Error::SingularSystem(e.to_string()))?;
        let x: Vec<f64> = factor.solve(&rhs);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem("non-finite potential".into()));
        }
        value.extend(index.iter().map(|(&v, &i)| (v, x[i])));
    }
    let energy: f64 = weight.iter().map(|(&(a, b), &w)| w * (value[&a] - value[&b]).powi(2)).sum();
    if !(energy > 0.0) {
        return Err(Error::NotAnAnnulus("zero Dirichlet energy".into()));
    }
    Ok(2.0 * std::f64::consts::PI / energy)
}

/// Structured mesh of the round annulus `r < |z| < R`, log-polar so cells are nearly square.
pub fn flat_annulus(r: f64, big_r: f64, radial: usize, angular: usize) -> Result<TriMesh> {
    if !(0.0 < r && r < big_r) || radial == 0 || angular < 3 {
        return Err(Error::DomainError(format!("bad annulus {r} < {big_r} with {radial} x {angular} cells")));
    }
    let mut nodes = Vec::with_capacity((radial + 1) * angular);
    for i in 0..=radial {
        let rho = r * (big_r / r).powf(i as f64 / radial as f64);
        // stagger alternate rings for better angles
        let shift = if i % 2 == 1 { 0.5 } else { 0.0 };
        for j in 0..angular {
            nodes.push(C::from_polar(rho, 2.0 * std::f64::consts::PI * (j as f64 + shift) / angular as f64));
        }
    }
    let id = |i: usize, j: usize| i * angular + j % angular;
    let mut triangles = Vec::with_capacity(2 * radial * angular);
    for i in 0..radial {
        for j in 0..angular {
            let (a, b, c, d) = (id(i, j), id(i, j + 1), id(i + 1, j), id(i + 1, j + 1));
            if i % 2 == 0 {
                triangles.push([a, b, c]);
                triangles.push([b, d, c]);
            } else {
                triangles.push([a, d, c]);
                triangles.push([a, b, d]);
            }
        }
    }
    let markers = (0..nodes.len()).map(|k| if k < angular || k >= radial * angular { Marker::Fixed } else { Marker::Interior }).collect();
    Ok(TriMesh { nodes, triangles, markers })
}

/// Modulus of one ring of a nested family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingReport {
    pub inner_level: f64,
    pub outer_level: f64,
    pub modulus: f64,
    pub inner: Vec<usize>,
    pub outer: Vec<usize>,
}

/// Nested rings of a family of sublevel disks of `value` around its minimum.
pub fn nested_rings(gm: &GraphMetric, value: &[f64], levels: &[f64]) -> Result<Vec<RingReport>> {
    let seed = (0..gm.num_nodes).min_by(|&a, &b| value[a].total_cmp(&value[b])).ok_or_else(|| Error::NotAnAnnulus("empty mesh".into()))?;
    levels
        .windows(2)
        .map(|w| {
            let ring = RingSpec::between_disks(gm, value, seed, w[0], w[1])?;
            Ok(RingReport {
                inner_level: w[0],
                outer_level: w[1],
                modulus: ring_modulus(gm, &ring)?,
                inner: ring.inner,
                outer: ring.outer,
            })
        })
        .collect()
}

/// Exhaustion function `max(|u|, cusp depth)`, where the depth is measured into the base horocycles.
///
/// Both terms are lengths in `H × R`, so sublevel sets are height bands cut off in the cusps at the same scale.
pub fn height_exhaustion(sol: &Solution, dom: &TruncatedDomain) -> Result<Vec<f64>> {
    let n = dom.parent.len();
    let mut vertex = Vec::with_capacity(n);
    for i in 0..n {
        vertex.push((dom.parent.vertex(i).to_complex(), dom.base_decoration.size(i)?.ln()));
    }
    let mesh = &*sol.mesh;
    Ok((0..mesh.num_nodes())
        .map(|i| {
            let z = mesh.nodes[i];
            vertex.iter().map(|&(p, ls)| ls - busemann(p, z)).fold(sol.u[i].abs(), f64::max)
        })
        .collect())
}

/// Moduli of the rings between consecutive levels of [`height_exhaustion`].
pub fn height_rings(sol: &Solution, dom: &TruncatedDomain, levels: &[f64]) -> Result<Vec<RingReport>> {
    let value = height_exhaustion(sol, dom)?;
    nested_rings(&induced_metric(sol), &value, levels)
}

/// Layers of a static SVG rendering in disk coordinates.
#[derive(Clone, Debug, Default)]
pub struct SvgScene {
    parts: Vec<String>,
}

impl SvgScene {
    pub fn new() -> Self {
        Self::default()
    }

    fn point(z: C) -> (f64, f64) {
        (z.re, -z.im)
    }

    /// The unit circle and the mesh boundary, coloured by marker.
    pub fn domain(mut self, mesh: &TriMesh) -> Self {
        let mut s = String::from(r##"<circle cx="0" cy="0" r="1" fill="none" stroke="#999" stroke-width="0.003"/>"##);
        for (a, b) in mesh.boundary_edges() {
            let colour = match mesh.edge_marker(a, b) {
                Marker::A(_) => "#c0392b",
                Marker::B(_) => "#2471a3",
                Marker::Chord(_) => "#7d3c98",
                _ => "#333",
            };
            let ((x1, y1), (x2, y2)) = (Self::point(mesh.nodes[a]), Self::point(mesh.nodes[b]));
            let _ = write!(s, r##"<line x1="{x1:.6}" y1="{y1:.6}" x2="{x2:.6}" y2="{y2:.6}" stroke="{colour}" stroke-width="0.006"/>"##);
        }
        self.parts.push(s);
        self
    }

    /// Level sets of the piecewise-linear solution at each value in `levels`.
    pub fn level_sets(mut self, sol: &Solution, levels: &[f64]) -> Self {
        let mesh = &*sol.mesh;
        let mut s = String::new();
        for &c in levels {
            for tri in &mesh.triangles {
                let mut pts = Vec::new();
                for k in 0..3 {
                    let (i, j) = (tri[k], tri[(k + 1) % 3]);
                    let (ui, uj) = (sol.u[i], sol.u[j]);
                    if (ui - c) * (uj - c) < 0.0 {
                        let t = (c - ui) / (uj - ui);
                        pts.push(mesh.nodes[i] + (mesh.nodes[j] - mesh.nodes[i]) * t);
                    }
                }
                if let [p, q] = pts[..] {
                    let ((x1, y1), (x2, y2)) = (Self::point(p), Self::point(q));
                    let _ = write!(s, r##"<line x1="{x1:.6}" y1="{y1:.6}" x2="{x2:.6}" y2="{y2:.6}" stroke="#555" stroke-width="0.002"/>"##);
                }
            }
        }
        self.parts.push(s);
        self
    }

    /// Nodes drawn as small dots, for flagged divergence regions.
    pub fn nodes(mut self, mesh: &TriMesh, nodes: &[usize], colour: &str) -> Self {
        let mut s = String::new();
        for &i in nodes {
            let (x, y) = Self::point(mesh.nodes[i]);
            let _ = write!(s, r##"<circle cx="{x:.6}" cy="{y:.6}" r="0.004" fill="{colour}"/>"##);
        }
        self.parts.push(s);
        self
    }

    /// Fitted geodesics as circular arcs orthogonal to the unit circle.
    pub fn geodesics(mut self, geos: &[FittedGeodesic]) -> Self {
        let mut s = String::new();
        for g in geos {
            let (a, b) = (C::from_polar(1.0, g.endpoints.0), C::from_polar(1.0, g.endpoints.1));
            let ((x1, y1), (x2, y2)) = (Self::point(a), Self::point(b));
            let half = ((g.endpoints.1 - g.endpoints.0).rem_euclid(2.0 * std::f64::consts::PI)) / 2.0;
            let path = if (half - std::f64::consts::FRAC_PI_2).abs() < 1e-9 {
                format!("M {x1:.6} {y1:.6} L {x2:.6} {y2:.6}")
            } else {
                let radius = half.tan().abs();
                let sweep = if half < std::f64::consts::FRAC_PI_2 { 0 } else { 1 };
                format!("M {x1:.6} {y1:.6} A {radius:.6} {radius:.6} 0 0 {sweep} {x2:.6} {y2:.6}")
            };
            let _ = write!(s, r##"<path d="{path}" fill="none" stroke="#e67e22" stroke-width="0.006"/>"##);
        }
        self.parts.push(s);
        self
    }

    /// Node loops, for ring boundaries.
    pub fn loops(mut self, mesh: &TriMesh, loops: &[&[usize]]) -> Self {
        let mut s = String::new();
        for lp in loops {
            let pts: Vec<String> = lp
                .iter()
                .map(|&i| {
                    let (x, y) = Self::point(mesh.nodes[i]);
                    format!("{x:.6},{y:.6}")
                })
                .collect();
            let _ = write!(s, r##"<polygon points="{}" fill="none" stroke="#16a085" stroke-width="0.004"/>"##, pts.join(" "));
        }
        self.parts.push(s);
        self
    }

    pub fn render(&self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"-1.05 -1.05 2.1 2.1\" width=\"800\" height=\"800\">\n{}\n</svg>\n",
            self.parts.join("\n")
        )
    }
}
