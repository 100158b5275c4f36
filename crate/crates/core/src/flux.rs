//! Flux of the unit field `X = ∇u / W` across arcs and closed cycles.
//!
//! Orientation is frozen: the normal points to the right of the direction of
//! travel. Along the boundary of a counter-clockwise domain, and around a
//! counter-clockwise cycle, this is the outer normal. A side whose data tend to
//! `+∞` then carries flux tending to `+|α|`, a side whose data tend to `-∞`
//! carries flux tending to `-|α|`.
//!
//! In disk coordinates the hyperbolic flux density reduces to the Euclidean
//! one of `F = ∇u / W`, which is elementwise the quadrature mean `c1 · ∇u`.
//!
//! Marked arcs are integrated edge by edge with the gradient of the adjacent
//! triangle and `W` at the Gauss points, so `|F(α)| ≤ |α|` holds pointwise.
//! The consistent boundary flux, the energy derivative at each boundary node,
//! is kept alongside: it sums to zero over the whole boundary up to the
//! interior residual. Closed cycles are boundaries of unions of barycentric
//! dual cells, on which the line integral of `F` equals the negated interior
//! residual.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use num_complex::Complex64 as C;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypgeo::{conformal_factor, distance};
use crate::meshing::{Locator, Marker, TriMesh};
use crate::polygon::ScherkPolygon;
use crate::solver::{Discretization, SequenceRun, Solution};

/// Flux across one marked boundary arc.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArcFlux {
    pub marker: Marker,
    pub flux: f64,
    /// Hyperbolic length of the arc's boundary polyline of straight disk segments.
    pub length: f64,
}

/// Consistent outward flux at every node; zero up to the solver residual at interior nodes.
pub fn node_fluxes(sol: &Solution) -> Vec<f64> {
    sol.discretization().gradient(&sol.u)
}

/// Five-point Gauss-Legendre rule on `[0, 1]`: `(abscissa, weight)`.
const GAUSS5: [(f64, f64); 5] = [
    (0.046_910_077_030_668, 0.118_463_442_528_095),
    (0.230_765_344_947_158, 0.239_314_335_249_683),
    (0.5, 0.284_444_444_444_444),
    (0.769_234_655_052_842, 0.239_314_335_249_683),
    (0.953_089_922_969_332, 0.118_463_442_528_095),
];

/// `∫ ⟨X, ν⟩ ds` along the straight edge `a → b` for Euclidean gradient `g`, with `X` evaluated at the Gauss points.
fn edge_flux(g: C, a: C, b: C) -> f64 {
    let d = b - a;
    let normal = g.re * d.im - g.im * d.re;
    let g2 = g.norm_sqr();
    GAUSS5
        .iter()
        .map(|&(s, w)| {
            let lam = conformal_factor(a + d * s);
            w * normal / (1.0 + g2 / (lam * lam)).sqrt()
        })
        .sum()
}

/// Hyperbolic length of the straight segment `[a, b]` by the same quadrature as [`edge_flux`],
/// so that `|edge_flux| < segment_length` holds exactly up to rounding.
fn segment_length(a: C, b: C) -> f64 {
    let d = b - a;
    GAUSS5.iter().map(|&(s, w)| w * conformal_factor(a + d * s)).sum::<f64>() * d.norm()
}

/// Boundary edges oriented counter-clockwise with their triangle.
fn oriented_boundary_edges(mesh: &TriMesh) -> Vec<(usize, usize, usize)> {
    let mut owner = std::collections::HashMap::new();
    for (t, tri) in mesh.triangles.iter().enumerate() {
        for k in 0..3 {
            owner.insert((tri[k], tri[(k + 1) % 3]), t);
        }
    }
    mesh.boundary_edges()
        .into_iter()
        .map(|(a, b)| match owner.get(&(a, b)) {
            Some(&t) => (a, b, t),
            None => (b, a, owner[&(b, a)]),
        })
        .collect()
}

/// Fluxes across every marked arc of the boundary, in marker order, integrated
/// along the boundary edges with the outer normal.
pub fn arc_fluxes(sol: &Solution) -> Vec<ArcFlux> {
    let disc = sol.discretization();
    let mesh = &*sol.mesh;
    let mut acc: BTreeMap<Marker, (f64, f64)> = BTreeMap::new();
    for (a, b, t) in oriented_boundary_edges(mesh) {
        let e = acc.entry(mesh.edge_marker(a, b)).or_default();
        e.0 += edge_flux(disc.element_state(&sol.u, t).g, mesh.nodes[a], mesh.nodes[b]);
        e.1 += segment_length(mesh.nodes[a], mesh.nodes[b]);
    }
    acc.into_iter().map(|(marker, (flux, length))| ArcFlux { marker, flux, length }).collect()
}

/// Conservative arc fluxes: nodal consistent fluxes shared equally between the two
/// boundary edges at each node. Their total is the interior residual.
pub fn consistent_arc_fluxes(sol: &Solution) -> Vec<ArcFlux> {
    let r = node_fluxes(sol);
    let mesh = &*sol.mesh;
    let mut acc: BTreeMap<Marker, (f64, f64)> = BTreeMap::new();
    for (a, b) in mesh.boundary_edges() {
        let e = acc.entry(mesh.edge_marker(a, b)).or_default();
        e.0 += 0.5 * (r[a] + r[b]);
        e.1 += segment_length(mesh.nodes[a], mesh.nodes[b]);
    }
    acc.into_iter().map(|(marker, (flux, length))| ArcFlux { marker, flux, length }).collect()
}

/// Flux across the boundary arc carrying `marker`.
pub fn marked_flux(sol: &Solution, marker: Marker) -> Result<f64> {
    arc_fluxes(sol).into_iter().find(|a| a.marker == marker).map(|a| a.flux).ok_or(Error::ArcOutsideDomain)
}

/// Largest hyperbolic norm of `X` over all quadrature points; below one for any finite solution.
pub fn max_x(sol: &Solution) -> f64 {
    let disc = sol.discretization();
    (0..disc.num_elements()).map(|t| disc.element_max_x(&sol.u, t)).fold(0.0, f64::max)
}

/// Flux across a polyline of straight segments in disk coordinates, with `X`
/// constant on each triangle.
pub fn polyline_flux(sol: &Solution, pts: &[C]) -> Result<f64> {
    let disc = sol.discretization();
    let loc = Locator::new(&sol.mesh);
    let mut total = 0.0;
    for w in pts.windows(2) {
        // walk in a canonical direction so reversal negates exactly
        let forward = (w[0].re, w[0].im) <= (w[1].re, w[1].im);
        let (a, b) = if forward { (w[0], w[1]) } else { (w[1], w[0]) };
        let d = b - a;
        let normal = C::new(d.im, -d.re);
        let mut part = 0.0;
        for (t, t0, t1) in segment_pieces(&sol.mesh, &loc, a, b)? {
            let f = disc.element_flux(&sol.u, t);
            part += (t1 - t0) * (f.re * normal.re + f.im * normal.im);
        }
        total += if forward { part } else { -part };
    }
    Ok(total)
}

/// Splits the segment `a → b` into parameter intervals lying in single triangles.
fn segment_pieces(mesh: &TriMesh, loc: &Locator, a: C, b: C) -> Result<Vec<(usize, f64, f64)>> {
    let d = b - a;
    if d.norm() == 0.0 {
        return Ok(Vec::new());
    }
    let cross = |p: C, q: C| p.re * q.im - p.im * q.re;
    let mut pieces = Vec::new();
    let mut t = 0.0f64;
    while t < 1.0 {
        // probe a little ahead so a point on an edge picks the triangle the segment enters
        let probe = (t + 1e-9).min(1.0);
        let (tri, _) = loc.locate(a + d * probe).ok_or(Error::ArcOutsideDomain)?;
        let p = mesh.triangles[tri].map(|i| mesh.nodes[i]);
        let mut exit = 1.0f64;
        for k in 0..3 {
            let (u, v) = (p[k], p[(k + 1) % 3]);
            // signed side value along the segment: f0 + s f1, positive inside
            let f0 = cross(v - u, a - u);
            let f1 = cross(v - u, d);
            if f1 < 0.0 {
                let s = -f0 / f1;
                if s > t {
                    exit = exit.min(s);
                }
            }
        }
        let next = exit.max(t + 1e-12).min(1.0);
        pieces.push((tri, t, next));
        t = next;
    }
    Ok(pieces)
}

/// Boundary of a union of barycentric dual cells, as oriented segments inside single triangles.
#[derive(Clone, Debug, PartialEq)]
pub struct DualCycle {
    /// Triangle, start, end; the enclosed cells lie to the left.
    pub segments: Vec<(usize, C, C)>,
}

impl DualCycle {
    /// Dual boundary of the cells of `nodes`, which must all be interior.
    pub fn around(mesh: &TriMesh, nodes: &[usize]) -> Result<Self> {
        let mut inside = vec![false; mesh.num_nodes()];
        for &k in nodes {
            if k >= mesh.num_nodes() || mesh.markers[k].is_boundary() {
                return Err(Error::DomainError(format!("node {k} is not an interior node")));
            }
            inside[k] = true;
        }
        let mut segments = Vec::new();
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let p = tri.map(|i| mesh.nodes[i]);
            let centroid = (p[0] + p[1] + p[2]) / 3.0;
            for k in 0..3 {
                let (i, j) = (tri[k], tri[(k + 1) % 3]);
                if inside[i] == inside[j] {
                    continue;
                }
                let mid = (p[k] + p[(k + 1) % 3]) * 0.5;
                let own = if inside[i] { p[k] } else { p[(k + 1) % 3] };
                let d = mid - centroid;
                let right = C::new(d.im, -d.re);
                let toward_own = (own - mid).re * right.re + (own - mid).im * right.im > 0.0;
                segments.push(if toward_own { (t, mid, centroid) } else { (t, centroid, mid) });
            }
        }
        Ok(Self { segments })
    }

    pub fn hyperbolic_length(&self) -> f64 {
        self.segments.iter().map(|&(_, a, b)| distance(a, b)).sum()
    }

    /// Outward flux of `sol` across the cycle.
    pub fn flux(&self, sol: &Solution) -> f64 {
        let disc = sol.discretization();
        self.flux_with(&disc, &sol.u)
    }

    fn flux_with(&self, disc: &Discretization, u: &[f64]) -> f64 {
        self.segments
            .iter()
            .map(|&(t, a, b)| {
                let f = disc.element_flux(u, t);
                let d = b - a;
                f.re * d.im - f.im * d.re
            })
            .sum()
    }
}

fn adjacency(mesh: &TriMesh) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); mesh.num_nodes()];
    for tri in &mesh.triangles {
        for k in 0..3 {
            adj[tri[k]].push(tri[(k + 1) % 3]);
            adj[tri[(k + 1) % 3]].push(tri[k]);
        }
    }
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Largest number of cells in a random cycle.
pub const MAX_CYCLE_CELLS: usize = 60;

/// `count` cycles around random breadth-first clusters of interior nodes.
pub fn random_dual_cycles(mesh: &TriMesh, count: usize, seed: u64) -> Vec<DualCycle> {
    let interior: Vec<usize> = (0..mesh.num_nodes()).filter(|&i| !mesh.markers[i].is_boundary()).collect();
    if interior.is_empty() {
        return Vec::new();
    }
    let adj = adjacency(mesh);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let start = interior[rng.gen_range(0..interior.len())];
            let target = rng.gen_range(1..=MAX_CYCLE_CELLS);
            let mut seen = vec![false; mesh.num_nodes()];
            let mut cluster = Vec::new();
            let mut queue = VecDeque::from([start]);
            seen[start] = true;
            while let Some(k) = queue.pop_front() {
                if cluster.len() == target {
                    break;
                }
                cluster.push(k);
                for &j in &adj[k] {
                    if !seen[j] && !mesh.markers[j].is_boundary() {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
            DualCycle::around(mesh, &cluster).expect("clusters hold interior nodes only")
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationReport {
    pub cycles: usize,
    /// Largest `|F(cycle)| / |cycle|`.
    pub worst_ratio: f64,
    pub worst_flux: f64,
}

/// Flux through random closed cycles of `sol`.
pub fn conservation_check(sol: &Solution, count: usize, seed: u64) -> ConservationReport {
    let disc = sol.discretization();
    let mut report = ConservationReport { cycles: 0, worst_ratio: 0.0, worst_flux: 0.0 };
    for cycle in random_dual_cycles(&sol.mesh, count, seed) {
        let f = cycle.flux_with(&disc, &sol.u).abs();
        report.cycles += 1;
        report.worst_flux = report.worst_flux.max(f);
        report.worst_ratio = report.worst_ratio.max(f / cycle.hyperbolic_length());
    }
    report
}

/// Smallest slacks of the two monotonicity inequalities between the graphs of two solutions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    /// Triangles where the difference gradient is nonzero.
    pub active: usize,
    pub skipped: usize,
    /// `min ⟨X′ − X, η⟩ − ‖n′ − n‖² / 4`.
    pub min_slack_first: f64,
    /// `min ‖n′ − n‖² / 4 − |X′ − X|² / 4`.
    pub min_slack_second: f64,
    pub worst_triangle: Option<usize>,
}

impl MonotonicityReport {
    pub fn min_slack(&self) -> f64 {
        self.min_slack_first.min(self.min_slack_second)
    }
}

/// Gradients below this hyperbolic norm count as zero.
pub const REGULAR_POINT_TOL: f64 = 1e-9;

/// Slacks of `⟨X′ − X, η⟩ ≥ ‖n′ − n‖² / 4 ≥ |X′ − X|² / 4` for hyperbolic gradients `p`, `q`
/// in an orthonormal frame, with `X = p / W`, downward unit normal `n = (X, -1/W)` and `η` the direction of `q - p`.
pub fn monotonicity_slacks(p: C, q: C) -> (f64, f64) {
    let diff = q - p;
    let eta = diff / diff.norm();
    let (wp, wq) = ((1.0 + p.norm_sqr()).sqrt(), (1.0 + q.norm_sqr()).sqrt());
    let dx = q / wq - p / wp;
    let dn2 = dx.norm_sqr() + (1.0 / wp - 1.0 / wq).powi(2);
    (dx.re * eta.re + dx.im * eta.im - dn2 / 4.0, dn2 / 4.0 - dx.norm_sqr() / 4.0)
}

/// Evaluates both inequalities at each triangle centroid, in an orthonormal frame.
pub fn lemma_a1_check(w: &Solution, w2: &Solution) -> Result<MonotonicityReport> {
    if !(std::sync::Arc::ptr_eq(&w.mesh, &w2.mesh) || (w.mesh.nodes == w2.mesh.nodes && w.mesh.triangles == w2.mesh.triangles)) {
        return Err(Error::MeshMismatch);
    }
    let disc = w.discretization();
    let mesh = &*w.mesh;
    let mut report = MonotonicityReport {
        active: 0,
        skipped: 0,
        min_slack_first: f64::INFINITY,
        min_slack_second: f64::INFINITY,
        worst_triangle: None,
    };
    let mut worst = f64::INFINITY;
    for t in 0..disc.num_elements() {
        let centroid = mesh.triangles[t].iter().map(|&i| mesh.nodes[i]).sum::<C>() / 3.0;
        let lam = conformal_factor(centroid);
        let p = disc.element_state(&w.u, t).g / lam;
        let q = disc.element_state(&w2.u, t).g / lam;
        let diff = q - p;
        if diff.norm() <= REGULAR_POINT_TOL {
            report.skipped += 1;
            continue;
        }
        report.active += 1;
        let (first, second) = monotonicity_slacks(p, q);
        report.min_slack_first = report.min_slack_first.min(first);
        report.min_slack_second = report.min_slack_second.min(second);
        if first.min(second) < worst {
            worst = first.min(second);
            report.worst_triangle = Some(t);
        }
    }
    Ok(report)
}

/// Flux balance of one member of a cap sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub n: u32,
    pub level: u32,
    pub sum_a: f64,
    pub sum_b: f64,
    pub chord_total: f64,
    /// `|Σ F|` over the whole boundary.
    pub defect: f64,
    /// `|Σ F|` of the consistent fluxes, which only the solver residual separates from zero.
    pub consistent_defect: f64,
    pub perimeter: f64,
    /// Truncated side and chord lengths of `D(ℓ)`.
    pub a_length: f64,
    pub b_length: f64,
    pub chord_length: f64,
    /// `a_length - sum_a`.
    pub a_deficit: f64,
    /// `b_length + sum_b`.
    pub b_deficit: f64,
    pub arcs: Vec<AuditArc>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditArc {
    pub marker: Marker,
    pub flux: f64,
    /// Hyperbolic length of the boundary polyline, which bounds `|flux|`.
    pub polyline_length: f64,
    /// Length of the exact arc of `D(ℓ)`.
    pub truncated_length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalanceAudit {
    pub vertices: usize,
    pub rows: Vec<BalanceRow>,
}

/// One CSV record of a flux series.
#[derive(Serialize)]
struct SeriesRecord {
    n: u32,
    arc: String,
    flux: f64,
    truncated_length: f64,
    polyline_length: f64,
    /// `flux / polyline_length`, at most 1 in magnitude.
    ratio: f64,
}

impl BalanceAudit {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Series with columns `n, arc, flux, truncated_length`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            for arc in &row.arcs {
                out.serialize(SeriesRecord {
                    n: row.n,
                    arc: arc.marker.to_string(),
                    flux: arc.flux,
                    truncated_length: arc.truncated_length,
                    polyline_length: arc.polyline_length,
                    ratio: arc.flux / arc.polyline_length,
                })
                    .map_err(|e| Error::Io(e.to_string()))?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Side and chord flux totals of every run of a cap sequence over `g`.
pub fn balance_audit(g: &ScherkPolygon, seq: &[SequenceRun]) -> BalanceAudit {
    let rows = seq
        .iter()
        .map(|run| {
            let arcs: Vec<AuditArc> = arc_fluxes(&run.solution)
                .into_iter()
                .map(|a| AuditArc {
                    marker: a.marker,
                    flux: a.flux,
                    polyline_length: a.length,
                    truncated_length: run.domain.arc(a.marker).map_or(a.length, |arc| arc.length),
                })
                .collect();
            let total = |pick: fn(&Marker) -> bool| -> (f64, f64) {
                arcs.iter().filter(|a| pick(&a.marker)).fold((0.0, 0.0), |(f, l), a| (f + a.flux, l + a.truncated_length))
            };
            let (sum_a, a_length) = total(|m| matches!(m, Marker::A(_)));
            let (sum_b, b_length) = total(|m| matches!(m, Marker::B(_)));
            let (chord_total, chord_length) = total(|m| matches!(m, Marker::Chord(_)));
            BalanceRow {
                n: run.n,
                level: run.level,
                sum_a,
                sum_b,
                chord_total,
                defect: (sum_a + sum_b + chord_total).abs(),
                consistent_defect: consistent_arc_fluxes(&run.solution).iter().map(|a| a.flux).sum::<f64>().abs(),
                perimeter: run.domain.perimeter(),
                a_length,
                b_length,
                chord_length,
                a_deficit: a_length - sum_a,
                b_deficit: b_length + sum_b,
                arcs,
            }
        })
        .collect();
    BalanceAudit { vertices: g.len(), rows }
}
