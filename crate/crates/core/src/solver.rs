//! Minimal graphs over truncated domains by convex energy minimization.
//!
//! In disk coordinates the hyperbolic area of the graph of `u` in `H × R` is
//! `∫ √(λ⁴ + λ²|∇u|²) dx dy`, `λ = 2 / (1 − |z|²)`. With piecewise-linear `u`
//! the gradient `g` is constant per triangle and `λ` is integrated by a
//! seven-point rule, so each triangle contributes
//! `|T| Σ_q w_q λ_q² S_q` with `S_q = √(1 + |g|²/λ_q²)`.
//!
//! The Euler–Lagrange field is `F = g · mean_q(1/S_q)`, the Euclidean form of
//! `X = ∇u / W`; fluxes across Euclidean segments are `∫ F·ν ds`.

use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64 as C;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sprs::{CsMat, FillInReduction, SymmetryCheck};
use sprs_ldl::{Ldl, LdlNumeric};

use crate::error::{Error, Result};
use crate::hypgeo::{conformal_factor, distance, BoundaryPoint, Geodesic, InteriorPoint};
use crate::meshing::{to_half_plane, triangulate, truncate, Locator, Marker, TriMesh, TruncatedDomain, QUAD7};
use crate::polygon::{check_or_certify, ScherkPolygon};

/// Relative stopping tolerance on the gradient norm.
pub const TOL_SOLVE: f64 = 1e-10;
pub const MAX_NEWTON: usize = 200;
/// Triangles with a smaller hyperbolic angle are rejected.
pub const MIN_ANGLE_DEG: f64 = 1.0;

#[derive(Clone, Debug)]
struct Element {
    nodes: [usize; 3],
    area: f64,
    grad: [[f64; 2]; 3],
    lam2: [f64; 7],
}

/// Per-element quantities of a piecewise-linear function.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElementState {
    /// Euclidean gradient.
    pub g: C,
    /// `mean_q 1/S_q`.
    pub c1: f64,
    /// `mean_q 1/(λ_q² S_q³)`.
    pub c2: f64,
    /// `Σ_q w_q λ_q² S_q`, the area density.
    pub density: f64,
}

/// Geometry of a mesh prepared for repeated assembly.
#[derive(Clone, Debug)]
pub struct Discretization {
    elements: Vec<Element>,
    num_nodes: usize,
}

impl Discretization {
    pub fn new(mesh: &TriMesh) -> Result<Self> {
        mesh.check()?;
        let min_angle = MIN_ANGLE_DEG.to_radians();
        let elements = (0..mesh.num_triangles())
            .map(|t| {
                if mesh.hyperbolic_angles(t).iter().any(|&a| !(a >= min_angle)) {
                    return Err(Error::SingularSystem(format!("triangle {t} has a hyperbolic angle below {MIN_ANGLE_DEG} degree")));
                }
                let nodes = mesh.triangles[t];
                let p = nodes.map(|i| mesh.nodes[i]);
                let area = mesh.euclidean_area(t);
                let mut grad = [[0.0; 2]; 3];
                for k in 0..3 {
                    // gradient of the hat function: rotated opposite edge over twice the area
                    let e = p[(k + 2) % 3] - p[(k + 1) % 3];
                    grad[k] = [-e.im / (2.0 * area), e.re / (2.0 * area)];
                }
                let mut lam2 = [0.0; 7];
                for (q, &(l1, l2, _)) in QUAD7.iter().enumerate() {
                    lam2[q] = conformal_factor(p[0] * (1.0 - l1 - l2) + p[1] * l1 + p[2] * l2).powi(2);
                }
                Ok(Element { nodes, area, grad, lam2 })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { elements, num_nodes: mesh.num_nodes() })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    fn gradient_of(e: &Element, u: &[f64]) -> C {
        let mut g = C::new(0.0, 0.0);
        for k in 0..3 {
            g += C::new(e.grad[k][0], e.grad[k][1]) * u[e.nodes[k]];
        }
        g
    }

    fn state_of(e: &Element, u: &[f64]) -> ElementState {
        let g = Self::gradient_of(e, u);
        let g2 = g.norm_sqr();
        let (mut c1, mut c2, mut density) = (0.0, 0.0, 0.0);
        for (q, &(_, _, w)) in QUAD7.iter().enumerate() {
            let l2 = e.lam2[q];
            let s = (1.0 + g2 / l2).sqrt();
            c1 += w / s;
            c2 += w / (l2 * s * s * s);
            density += w * l2 * s;
        }
        ElementState { g, c1, c2, density }
    }

    pub fn element_state(&self, u: &[f64], t: usize) -> ElementState {
        Self::state_of(&self.elements[t], u)
    }

    /// Euclidean flux density vector `F` on triangle `t`.
    pub fn element_flux(&self, u: &[f64], t: usize) -> C {
        let s = self.element_state(u, t);
        s.g * s.c1
    }

    /// Largest hyperbolic norm of `X` over the quadrature points of triangle `t`.
    pub fn element_max_x(&self, u: &[f64], t: usize) -> f64 {
        let e = &self.elements[t];
        let g2 = Self::gradient_of(e, u).norm_sqr();
        e.lam2.iter().map(|&l2| (g2 / l2 / (1.0 + g2 / l2)).sqrt()).fold(0.0, f64::max)
    }

    pub fn energy(&self, u: &[f64]) -> f64 {
        let parts: Vec<f64> = self.elements.par_iter().map(|e| e.area * Self::state_of(e, u).density).collect();
        parts.iter().sum()
    }

    /// Derivative of the energy with respect to every nodal value.
    pub fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let local: Vec<[f64; 3]> = self
            .elements
            .par_iter()
            .map(|e| {
                let s = Self::state_of(e, u);
                let f = s.g * s.c1 * e.area;
                [0, 1, 2].map(|k| f.re * e.grad[k][0] + f.im * e.grad[k][1])
            })
            .collect();
        let mut r = vec![0.0; self.num_nodes];
        for (e, l) in self.elements.iter().zip(&local) {
            for k in 0..3 {
                r[e.nodes[k]] += l[k];
            }
        }
        r
    }

    /// Local Hessians; `linear` gives the conformal Laplacian.
    fn local_hessians(&self, u: &[f64], linear: bool) -> Vec<[[f64; 3]; 3]> {
        self.elements
            .par_iter()
            .map(|e| {
                let (g, c1, c2) = if linear {
                    (C::new(0.0, 0.0), 1.0, 0.0)
                } else {
                    let s = Self::state_of(e, u);
                    (s.g, s.c1, s.c2)
                };
                let gd = [0, 1, 2].map(|k| g.re * e.grad[k][0] + g.im * e.grad[k][1]);
                let mut h = [[0.0; 3]; 3];
                for j in 0..3 {
                    for k in 0..3 {
                        let dot = e.grad[j][0] * e.grad[k][0] + e.grad[j][1] * e.grad[k][1];
                        h[j][k] = e.area * (c1 * dot - c2 * gd[j] * gd[k]);
                    }
                }
                h
            })
            .collect()
    }
}

/// Sparse symmetric system over the free nodes with a fixed pattern.
struct FreeSystem {
    free: Vec<usize>,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    /// Data slot of each local pair, `usize::MAX` when a node is fixed.
    slots: Vec<[[usize; 3]; 3]>,
    factor: Option<LdlNumeric<f64, usize>>,
}

impl FreeSystem {
    fn new(disc: &Discretization, is_free: &[bool]) -> Self {
        let mut free_index = vec![usize::MAX; disc.num_nodes];
        let mut free = Vec::new();
        for (i, &f) in is_free.iter().enumerate() {
            if f {
                free_index[i] = free.len();
                free.push(i);
            }
        }
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); free.len()];
        for e in &disc.elements {
            for &a in &e.nodes {
                for &b in &e.nodes {
                    if free_index[a] != usize::MAX && free_index[b] != usize::MAX {
                        rows[free_index[a]].push(free_index[b]);
                    }
                }
            }
        }
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        for row in rows.iter_mut() {
            row.sort_unstable();
            row.dedup();
            indices.extend_from_slice(row);
            indptr.push(indices.len());
        }
        let slots = disc
            .elements
            .iter()
            .map(|e| {
                let mut s = [[usize::MAX; 3]; 3];
                for j in 0..3 {
                    for k in 0..3 {
                        let (a, b) = (free_index[e.nodes[j]], free_index[e.nodes[k]]);
                        if a != usize::MAX && b != usize::MAX {
                            let row = &indices[indptr[a]..indptr[a + 1]];
                            s[j][k] = indptr[a] + row.binary_search(&b).expect("pattern covers element pairs");
                        }
                    }
                }
                s
            })
            .collect();
        Self { free, indptr, indices, slots, factor: None }
    }

    fn matrix(&self, local: &[[[f64; 3]; 3]]) -> CsMat<f64> {
        let mut data = vec![0.0; self.indices.len()];
        for (h, s) in local.iter().zip(&self.slots) {
            for j in 0..3 {
                for k in 0..3 {
                    if s[j][k] != usize::MAX {
                        data[s[j][k]] += h[j][k];
                    }
                }
            }
        }
        let n = self.free.len();
        CsMat::new((n, n), self.indptr.clone(), self.indices.clone(), data)
    }

    fn solve(&mut self, local: &[[[f64; 3]; 3]], rhs: &[f64]) -> Result<Vec<f64>> {
        let m = self.matrix(local);
        let singular = |e: sprs::errors::LinalgError| Error::SingularSystem(e.to_string());
        match self.factor.as_mut() {
            Some(f) => f.update(m.view()).map_err(singular)?,
            None => {
                let ldl = Ldl::new()
                    .check_symmetry(SymmetryCheck::DontCheckSymmetry)
                    .fill_in_reduction(FillInReduction::ReverseCuthillMcKee);
                self.factor = Some(ldl.numeric(m.view()).map_err(singular)?);
            }
        }
        let f = self.factor.as_ref().expect("factor was just set");
        if f.d().iter().any(|&d| !(d > 0.0)) {
            return Err(Error::SingularSystem("stiffness matrix is not positive definite".into()));
        }
        let x: Vec<f64> = f.solve(&rhs.to_vec());
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularSystem("non-finite solve".into()));
        }
        Ok(x)
    }
}

/// Dirichlet data on the boundary nodes of a mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BoundaryData {
    /// `a` on every A-side, `b` on every B-side and on `Fixed` nodes.
    Caps { a: f64, b: f64 },
    /// One constant per side marker.
    PerMarker(Vec<(Marker, f64)>),
    /// Values for every node; interior entries are ignored.
    Nodal(Vec<f64>),
}

impl BoundaryData {
    pub fn zero() -> Self {
        BoundaryData::Caps { a: 0.0, b: 0.0 }
    }

    /// `+n` on A-sides and `-n` on B-sides.
    pub fn symmetric_caps(n: f64) -> Self {
        BoundaryData::Caps { a: n, b: -n }
    }

    /// `n` on A-sides and `0` on B-sides.
    pub fn one_sided_caps(n: f64) -> Self {
        BoundaryData::Caps { a: n, b: 0.0 }
    }

    fn side_value(&self, m: Marker) -> Result<f64> {
        let v = match self {
            BoundaryData::Caps { a, b } => match m {
                Marker::A(_) => *a,
                _ => *b,
            },
            BoundaryData::PerMarker(list) => list
                .iter()
                .find(|(k, _)| *k == m)
                .map(|&(_, v)| v)
                .ok_or_else(|| Error::BoundaryData(format!("no value for marker {m}")))?,
            BoundaryData::Nodal(_) => unreachable!("nodal data has no side values"),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::BoundaryData(format!("non-finite value on {m}")))
        }
    }

    /// Boundary values on every node (zero on interior nodes). Chord nodes interpolate
    /// linearly in hyperbolic arclength between the corner values of their chord.
    pub fn nodal_values(&self, mesh: &TriMesh) -> Result<Vec<f64>> {
        let n = mesh.num_nodes();
        if let BoundaryData::Nodal(v) = self {
            if v.len() != n {
                return Err(Error::BoundaryData(format!("expected {n} values, got {}", v.len())));
            }
            if let Some(i) = (0..n).find(|&i| mesh.markers[i].is_boundary() && !v[i].is_finite()) {
                return Err(Error::BoundaryData(format!("non-finite value at node {i}")));
            }
            return Ok((0..n).map(|i| if mesh.markers[i].is_boundary() { v[i] } else { 0.0 }).collect());
        }
        let mut out = vec![0.0; n];
        let lp = mesh.boundary_loop()?;
        let is_chord = |i: usize| matches!(mesh.markers[i], Marker::Chord(_));
        for &i in &lp {
            if mesh.markers[i].is_boundary() && !is_chord(i) {
                out[i] = self.side_value(mesh.markers[i])?;
            }
        }
        let m = lp.len();
        let Some(anchor) = (0..m).find(|&k| !is_chord(lp[k])) else {
            return Err(Error::BoundaryData("boundary has no side nodes".into()));
        };
        let mut k = 0;
        while k < m {
            let pos = (anchor + k) % m;
            if is_chord(lp[(pos + 1) % m]) {
                // run of chord nodes after the side node at `pos`
                let mut run = vec![lp[pos]];
                let mut q = (pos + 1) % m;
                while is_chord(lp[q]) {
                    run.push(lp[q]);
                    q = (q + 1) % m;
                }
                run.push(lp[q]);
                let mut s = vec![0.0];
                for w in run.windows(2) {
                    s.push(s.last().unwrap() + distance(mesh.nodes[w[0]], mesh.nodes[w[1]]));
                }
                let (v0, v1, total) = (out[run[0]], out[*run.last().unwrap()], *s.last().unwrap());
                for (j, &node) in run.iter().enumerate().take(run.len() - 1).skip(1) {
                    out[node] = v0 + (v1 - v0) * s[j] / total;
                }
                k += run.len() - 1;
            } else {
                k += 1;
            }
        }
        Ok(out)
    }
}

/// Converged discrete minimal graph.
#[derive(Clone, Debug)]
pub struct Solution {
    pub mesh: Arc<TriMesh>,
    pub u: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub energy: f64,
    /// Energy before each Newton step and after the last one.
    pub energy_trace: Vec<f64>,
}

impl Solution {
    pub fn discretization(&self) -> Discretization {
        Discretization::new(&self.mesh).expect("solved meshes are valid")
    }

    /// Value at `z` by linear interpolation, `None` outside the mesh.
    pub fn value_at(&self, z: C) -> Option<f64> {
        Locator::new(&self.mesh).interpolate(&self.u, z)
    }

    /// Amount by which interior values leave the range of the boundary values.
    pub fn max_principle_violation(&self) -> f64 {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (v, m) in self.u.iter().zip(&self.mesh.markers) {
            if m.is_boundary() {
                lo = lo.min(*v);
                hi = hi.max(*v);
            }
        }
        self.u
            .iter()
            .zip(&self.mesh.markers)
            .filter(|(_, m)| !m.is_boundary())
            .map(|(&v, _)| (v - hi).max(lo - v).max(0.0))
            .fold(0.0, f64::max)
    }

    /// Same solution shifted by `c`.
    pub fn shifted(&self, c: f64) -> Solution {
        let mut s = self.clone();
        s.u.iter_mut().for_each(|v| *v += c);
        s
    }

    /// Binary form: magic `SCHERKU1`, `u32` length and UTF-8 mesh reference, `u64` node count,
    /// `u64` iterations, `f64` residual, `f64` energy, then the nodal values; all little-endian.
    pub fn write_binary(&self, w: &mut impl Write, mesh_ref: &str) -> Result<()> {
        w.write_all(SOLUTION_MAGIC)?;
        w.write_all(&(mesh_ref.len() as u32).to_le_bytes())?;
        w.write_all(mesh_ref.as_bytes())?;
        w.write_all(&(self.u.len() as u64).to_le_bytes())?;
        w.write_all(&(self.iterations as u64).to_le_bytes())?;
        w.write_all(&self.residual.to_le_bytes())?;
        w.write_all(&self.energy.to_le_bytes())?;
        for v in &self.u {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

const SOLUTION_MAGIC: &[u8; 8] = b"SCHERKU1";

/// Contents of a solution file.
#[derive(Clone, Debug, PartialEq)]
pub struct SolutionFile {
    pub mesh_ref: String,
    pub iterations: usize,
    pub residual: f64,
    pub energy: f64,
    pub u: Vec<f64>,
}

pub fn read_solution(r: &mut impl Read) -> Result<SolutionFile> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SOLUTION_MAGIC {
        return Err(Error::Parse("not a solution file".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let mut name = vec![0u8; u32::from_le_bytes(b4) as usize];
    r.read_exact(&mut name)?;
    let mesh_ref = String::from_utf8(name).map_err(|e| Error::Parse(e.to_string()))?;
    let mut next = |r: &mut dyn Read| -> Result<[u8; 8]> {
        r.read_exact(&mut b8)?;
        Ok(b8)
    };
    let n = u64::from_le_bytes(next(r)?) as usize;
    let iterations = u64::from_le_bytes(next(r)?) as usize;
    let residual = f64::from_le_bytes(next(r)?);
    let energy = f64::from_le_bytes(next(r)?);
    let u = (0..n).map(|_| next(r).map(f64::from_le_bytes)).collect::<Result<_>>()?;
    Ok(SolutionFile { mesh_ref, iterations, residual, energy, u })
}

fn free_norm(r: &[f64], is_free: &[bool]) -> f64 {
    r.iter().zip(is_free).filter(|(_, &f)| f).map(|(v, _)| v * v).sum::<f64>().sqrt()
}

/// Relative gradient tolerance of intermediate continuation stages.
const STAGE_TOL: f64 = 1e-6;
/// Newton steps allowed per continuation stage before the data increment is halved.
const STAGE_ITERATIONS: usize = 60;
/// Relative energy change treated as summation roundoff by the line search.
pub const ROUNDOFF: f64 = 1e-12;

struct Newton<'a> {
    disc: &'a Discretization,
    sys: FreeSystem,
    is_free: Vec<bool>,
}

struct NewtonOutcome {
    iterations: usize,
    residual: f64,
    energy: f64,
    trace: Vec<f64>,
}

impl Newton<'_> {
    /// Damped Newton from `u` (boundary values already set) down to `tol · (1 + energy)`.
    fn run(&mut self, u: &mut Vec<f64>, tol: f64, max_iter: usize) -> Result<NewtonOutcome> {
        let disc = self.disc;
        let mut energy = disc.energy(u);
        let mut trace = vec![energy];
        let mut r = disc.gradient(u);
        let mut rn = free_norm(&r, &self.is_free);
        let mut iterations = 0;
        while rn > tol * (1.0 + energy.abs()) {
            if iterations == max_iter {
                return Err(Error::NonConvergence { iterations, residual: rn });
            }
            iterations += 1;
            let hess = disc.local_hessians(u, false);
            let rhs: Vec<f64> = self.sys.free.iter().map(|&i| -r[i]).collect();
            let dx = self.sys.solve(&hess, &rhs)?;
            let slope: f64 = -rhs.iter().zip(&dx).map(|(a, b)| a * b).sum::<f64>();
            let mut alpha = 1.0;
            let mut accepted = None;
            while alpha > 1e-12 {
                let mut trial = u.clone();
                for (k, &i) in self.sys.free.iter().enumerate() {
                    trial[i] += alpha * dx[k];
                }
                let e = disc.energy(&trial);
                if e <= energy + 1e-4 * alpha * slope {
                    accepted = Some((trial, e));
                    break;
                }
                // below roundoff of the energy, progress is judged by the gradient
                if e - energy <= ROUNDOFF * energy.abs().max(1.0) {
                    let rt = disc.gradient(&trial);
                    if free_norm(&rt, &self.is_free) < rn {
                        accepted = Some((trial, e));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some((trial, e)) = accepted else {
                return Err(Error::NonConvergence { iterations, residual: rn });
            };
            *u = trial;
            energy = e;
            trace.push(energy);
            r = disc.gradient(u);
            rn = free_norm(&r, &self.is_free);
        }
        Ok(NewtonOutcome { iterations, residual: rn, energy, trace })
    }

    /// Harmonic extension of the boundary values of `u`.
    fn harmonic(&mut self, u: &mut [f64]) -> Result<()> {
        if self.sys.free.is_empty() {
            return Ok(());
        }
        for &i in &self.sys.free {
            u[i] = 0.0;
        }
        let lap = self.disc.local_hessians(u, true);
        let mut r = vec![0.0; u.len()];
        for (e, h) in self.disc.elements.iter().zip(&lap) {
            for j in 0..3 {
                r[e.nodes[j]] += (0..3).map(|k| h[j][k] * u[e.nodes[k]]).sum::<f64>();
            }
        }
        let rhs: Vec<f64> = self.sys.free.iter().map(|&i| -r[i]).collect();
        let x = self.sys.solve(&lap, &rhs)?;
        for (k, &i) in self.sys.free.iter().enumerate() {
            u[i] = x[k];
        }
        // the Newton Hessian has the same pattern, so only the numeric factor is reused
        Ok(())
    }
}

/// Minimizes the discrete area with the given Dirichlet data.
pub fn solve(mesh: &TriMesh, bc: &BoundaryData) -> Result<Solution> {
    solve_shared(Arc::new(mesh.clone()), bc)
}

/// As [`solve`], sharing the mesh with the returned solution.
///
/// Large data are reached by continuation: the data are scaled by `t`, starting
/// where the data have hyperbolic slope at most one along the boundary and doubling `t`; the interior of each stage is predicted
/// by scaling the previous stage. Only the final stage is solved to `TOL_SOLVE`.
pub fn solve_shared(mesh: Arc<TriMesh>, bc: &BoundaryData) -> Result<Solution> {
    let disc = Discretization::new(&mesh)?;
    let boundary = bc.nodal_values(&mesh)?;
    let is_free: Vec<bool> = mesh.markers.iter().map(|m| !m.is_boundary()).collect();
    let sys = FreeSystem::new(&disc, &is_free);
    let mut newton = Newton { disc: &disc, sys, is_free };
    // steepest hyperbolic slope of the data along boundary edges
    let slope = mesh
        .boundary_edges()
        .iter()
        .map(|&(a, b)| (boundary[a] - boundary[b]).abs() / distance(mesh.nodes[a], mesh.nodes[b]))
        .fold(0.0f64, f64::max);
    let scaled = |t: f64, interior: Option<(&[f64], f64)>| -> Vec<f64> {
        boundary
            .iter()
            .enumerate()
            .map(|(i, &b)| match interior {
                Some((prev, ratio)) if !mesh.markers[i].is_boundary() => prev[i] * ratio,
                _ => b * t,
            })
            .collect()
    };
    let mut t = if slope > 1.0 { 1.0 / slope } else { 1.0 };
    let mut u = scaled(t, None);
    newton.harmonic(&mut u)?;
    let mut iterations = 0;
    let stage_tol = |t: f64| if t < 1.0 { STAGE_TOL } else { TOL_SOLVE };
    let first = newton.run(&mut u, stage_tol(t), MAX_NEWTON)?;
    iterations += first.iterations;
    let mut outcome = first;
    let mut step = t;
    while t < 1.0 {
        let next = (t + step).min(1.0);
        let mut trial = scaled(next, Some((&u, next / t)));
        let budget = if next < 1.0 { STAGE_ITERATIONS } else { MAX_NEWTON };
        match newton.run(&mut trial, stage_tol(next), budget) {
            Ok(o) => {
                iterations += o.iterations;
                outcome = o;
                u = trial;
                t = next;
                step *= 2.0;
            }
            Err(Error::NonConvergence { iterations: k, residual }) => {
                iterations += k;
                step *= 0.5;
                if step < 1e-3 * t {
                    return Err(Error::NonConvergence { iterations, residual });
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Solution {
        mesh,
        u,
        residual: outcome.residual,
        iterations,
        energy: outcome.energy,
        energy_trace: outcome.trace,
    })
}

/// Half-plane barrier `ln((√(x²+y²) + y) / x)` on the quadrant `x, y > 0`.
pub fn barrier_h(x: f64, y: f64) -> Result<f64> {
    if !(x > 0.0 && y > 0.0) {
        return Err(Error::DomainError(format!("barrier needs x > 0 and y > 0, got ({x}, {y})")));
    }
    Ok(((x.hypot(y) + y) / x).ln())
}

/// Gradient of the barrier.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BarrierGradient {
    /// Euclidean partial derivatives in half-plane coordinates.
    pub dx: f64,
    pub dy: f64,
    /// Norm in the half-plane metric `|dz| / y`.
    pub hyperbolic_norm: f64,
}

pub fn barrier_h_gradient(x: f64, y: f64) -> Result<BarrierGradient> {
    barrier_h(x, y)?;
    let r = x.hypot(y);
    Ok(BarrierGradient { dx: -y / (x * r), dy: 1.0 / r, hyperbolic_norm: y / x })
}

/// The barrier composed with the Cayley transform to the half-plane.
pub fn barrier_disk(z: C) -> Result<f64> {
    let w = to_half_plane(z);
    barrier_h(w.re, w.im)
}

/// Truncation level used for cap value `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelPolicy {
    /// `⌈log₂ n⌉ + 2`.
    Coupled,
    Fixed(u32),
}

impl LevelPolicy {
    pub fn level(&self, n: u32) -> u32 {
        match self {
            LevelPolicy::Coupled => n.max(1).next_power_of_two().trailing_zeros() + 2,
            LevelPolicy::Fixed(l) => *l,
        }
    }
}

/// Cap values of the approximating problems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CapVariant {
    /// `+n` on A-sides, `-n` on B-sides.
    Symmetric,
    /// `n` on A-sides, `0` on B-sides.
    OneSided,
}

impl CapVariant {
    pub fn data(&self, n: f64) -> BoundaryData {
        match self {
            CapVariant::Symmetric => BoundaryData::symmetric_caps(n),
            CapVariant::OneSided => BoundaryData::one_sided_caps(n),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceOptions {
    pub h: f64,
    pub grading: f64,
    pub levels: LevelPolicy,
    pub caps: CapVariant,
}

impl Default for SequenceOptions {
    fn default() -> Self {
        Self {
            h: crate::meshing::DEFAULT_H,
            grading: crate::meshing::DEFAULT_GRADING,
            levels: LevelPolicy::Coupled,
            caps: CapVariant::Symmetric,
        }
    }
}

/// One member of a cap sequence.
#[derive(Clone, Debug)]
pub struct SequenceRun {
    pub n: u32,
    pub level: u32,
    pub domain: Arc<TruncatedDomain>,
    /// Renormalized so that the value at the base point is zero.
    pub solution: Solution,
    /// Value at the base point before renormalization.
    pub anchor_value: f64,
}

/// Approximations `u_n` of the Scherk graph over an admissible polygon.
pub fn scherk_sequence(g: &ScherkPolygon, n_list: &[u32], base: &InteriorPoint, opts: &SequenceOptions) -> Result<Vec<SequenceRun>> {
    if !check_or_certify(g).is_admissible() {
        return Err(Error::NotAdmissible);
    }
    cap_sequence(g, n_list, base, opts)
}

/// As [`scherk_sequence`] without the admissibility gate, for studying divergence.
pub fn cap_sequence(g: &ScherkPolygon, n_list: &[u32], base: &InteriorPoint, opts: &SequenceOptions) -> Result<Vec<SequenceRun>> {
    if n_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::BoundaryData("n_list must be strictly increasing".into()));
    }
    let mut out = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let level = opts.levels.level(n);
        let domain = Arc::new(truncate(g, level)?);
        let mesh = Arc::new(triangulate(&domain, opts.h, opts.grading)?);
        let sol = solve_shared(mesh, &opts.caps.data(n as f64))?;
        let anchor_value = sol
            .value_at(base.to_complex())
            .ok_or_else(|| Error::DomainError("base point outside the truncated domain".into()))?;
        out.push(SequenceRun { n, level, domain, solution: sol.shifted(-anchor_value), anchor_value });
    }
    Ok(out)
}

/// Geodesic fitted to one component of a divergence-region boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedGeodesic {
    /// Endpoint angles on the circle at infinity.
    pub endpoints: (f64, f64),
    pub points: usize,
    /// Largest hyperbolic distance from a boundary sample to the geodesic.
    pub residual: f64,
}

impl FittedGeodesic {
    /// For each endpoint, the nearest polygon vertex and its angular distance.
    pub fn nearest_vertices(&self, g: &ScherkPolygon) -> [(usize, f64); 2] {
        [self.endpoints.0, self.endpoints.1].map(|t| {
            let p = BoundaryPoint::new(t);
            (0..g.len())
                .map(|i| (i, g.vertex(i).angular_distance(&p)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("polygons have vertices")
        })
    }

    /// The side of `g` this geodesic follows, if both endpoints are within `tol` of its ends.
    pub fn matched_side(&self, g: &ScherkPolygon, tol: f64) -> Option<usize> {
        let [(i, di), (j, dj)] = self.nearest_vertices(g);
        let n = g.len();
        if di > tol || dj > tol {
            return None;
        }
        if (i + 1) % n == j {
            Some(i)
        } else if (j + 1) % n == i {
            Some(j)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    /// In units of the cap increment between the last two runs.
    pub threshold: f64,
    /// Nodes of the last mesh whose relative growth exceeds the threshold.
    pub flagged: Vec<usize>,
    /// Largest relative growth `|u_n - u_m| / (n - m)`.
    pub max_growth: f64,
    pub geodesics: Vec<FittedGeodesic>,
}

impl DivergenceReport {
    pub fn is_empty(&self) -> bool {
        self.flagged.is_empty()
    }

    /// Fitted geodesics that are not sides of `g`.
    pub fn interior_geodesics<'a>(&'a self, g: &'a ScherkPolygon, tol: f64) -> impl Iterator<Item = &'a FittedGeodesic> + 'a {
        self.geodesics.iter().filter(move |f| f.matched_side(g, tol).is_none())
    }

    /// Whether two interior geodesics end at the same vertex of `g`.
    pub fn interior_share_vertex(&self, g: &ScherkPolygon, tol: f64) -> bool {
        let mut seen = std::collections::BTreeSet::new();
        for f in self.interior_geodesics(g, tol) {
            let [(i, _), (j, _)] = f.nearest_vertices(g);
            let mut ends = std::collections::BTreeSet::from([i, j]);
            if ends.iter().any(|v| seen.contains(v)) {
                return true;
            }
            seen.append(&mut ends);
        }
        false
    }
}

/// Relative growth separating a divergent sequence from a convergent one.
///
/// Comparison bounds the growth of a renormalized convergent sequence by one cap
/// increment plus the anchor drift; a side class that loses its infinite value grows by two.
pub const DEFAULT_DIVERGENCE_THRESHOLD: f64 = 1.5;

/// Boundary components with fewer samples are ignored.
const MIN_COMPONENT_POINTS: usize = 8;

/// Flags nodes whose renormalized value changes by more than `threshold` cap increments
/// between the last two members of `seq` and fits one geodesic to each component of the
/// flagged region's boundary.
///
/// Runs on a common truncation level compare nodewise. Otherwise nodes of the last mesh
/// outside the previous one are skipped, so new cusp regions never register as growth.
pub fn divergence_probe(seq: &[SequenceRun], threshold: f64) -> DivergenceReport {
    let empty = DivergenceReport { threshold, flagged: Vec::new(), max_growth: 0.0, geodesics: Vec::new() };
    let [.., prev, last] = seq else {
        return empty;
    };
    let step = last.n.abs_diff(prev.n).max(1) as f64;
    let (prev, last) = (&prev.solution, &last.solution);
    let mesh = &*last.mesh;
    // nodes outside the previous mesh have no growth
    let growth: Vec<Option<f64>> = if prev.mesh.nodes == mesh.nodes {
        last.u.iter().zip(&prev.u).map(|(a, b)| Some((a - b) / step)).collect()
    } else {
        let loc = Locator::new(&prev.mesh);
        mesh.nodes.iter().zip(&last.u).map(|(&z, &v)| loc.interpolate(&prev.u, z).map(|w| (v - w) / step)).collect()
    };
    let max_growth = growth.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let flag = |i: usize| growth[i].is_some_and(|g| g.abs() > threshold);
    let flagged: Vec<usize> = (0..mesh.num_nodes()).filter(|&i| flag(i)).collect();
    if flagged.is_empty() {
        return DivergenceReport { max_growth, ..empty };
    }
    // level-set crossings on edges between flagged and unflagged nodes, grouped through shared triangles
    let mut crossing: std::collections::HashMap<(usize, usize), usize> = Default::default();
    let mut points = Vec::new();
    let mut parent: Vec<usize> = Vec::new();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for tri in &mesh.triangles {
        let mut here = Vec::new();
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            let (Some(ga), Some(gb)) = (growth[a], growth[b]) else { continue };
            if flag(a) == flag(b) {
                continue;
            }
            let key = (a.min(b), a.max(b));
            let id = *crossing.entry(key).or_insert_with(|| {
                let (gf, gu, zf, zu) = if flag(a) { (ga, gb, mesh.nodes[a], mesh.nodes[b]) } else { (gb, ga, mesh.nodes[b], mesh.nodes[a]) };
                let level = threshold.copysign(gf);
                let t = ((level - gu) / (gf - gu)).clamp(0.0, 1.0);
                points.push(zu + (zf - zu) * t);
                parent.push(parent.len());
                points.len() - 1
            });
            here.push(id);
        }
        for w in here.windows(2) {
            let (ra, rb) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            parent[ra] = rb;
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<C>> = Default::default();
    for i in 0..points.len() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().push(points[i]);
    }
    let geodesics = groups
        .into_values()
        .filter(|pts| pts.len() >= MIN_COMPONENT_POINTS)
        .filter_map(|pts| fit_geodesic(&pts))
        .collect();
    DivergenceReport { threshold, flagged, max_growth, geodesics }
}

/// Least-squares geodesic through `pts`: the circle `c₀(|z|² + 1) = 2(a x + b y)` orthogonal to the unit circle.
pub fn fit_geodesic(pts: &[C]) -> Option<FittedGeodesic> {
    let mut m = nalgebra::Matrix3::<f64>::zeros();
    for z in pts {
        let row = nalgebra::Vector3::new(z.norm_sqr() + 1.0, -2.0 * z.re, -2.0 * z.im);
        m += row * row.transpose();
    }
    let eig = m.symmetric_eigen();
    let k = eig.eigenvalues.imin();
    let v = eig.eigenvectors.column(k);
    let (c0, a, b) = (v[0], v[1], v[2]);
    let ab = a.hypot(b);
    let endpoints = if c0.abs() <= 1e-12 * ab {
        let t = b.atan2(-a);
        (t, t + std::f64::consts::PI)
    } else {
        let c = C::new(a, b) / c0;
        if c.norm() <= 1.0 {
            return None;
        }
        let spread = (1.0 / c.norm()).acos();
        (c.arg() - spread, c.arg() + spread)
    };
    let (p, q) = (BoundaryPoint::new(endpoints.0), BoundaryPoint::new(endpoints.1));
    let geo = Geodesic::new(p, q).ok()?;
    let residual = pts.iter().map(|&z| geo.distance_from(z)).fold(0.0, f64::max);
    Some(FittedGeodesic { endpoints: (p.theta(), q.theta()), points: pts.len(), residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshing::{half_plane_rectangle, DEFAULT_GRADING};

    fn square_mesh(level: u32, h: f64) -> TriMesh {
        triangulate(&truncate(&ScherkPolygon::regular(4).unwrap(), level).unwrap(), h, DEFAULT_GRADING).unwrap()
    }

    #[test]
    fn barrier_values() {
        assert!((barrier_h(1.0, 1.0).unwrap() - (2f64.sqrt() + 1.0).ln()).abs() < 1e-15);
        assert!(barrier_h(0.0, 1.0).is_err());
        assert!(barrier_h(1.0, -1.0).is_err());
        let mut prev = 0.0;
        for k in 1..10 {
            let v = barrier_h(0.5f64.powi(k), 1.0).unwrap();
            assert!(v > prev);
            prev = v;
        }
        let mut prev = f64::INFINITY;
        for k in 1..10 {
            let v = barrier_h(1.0, 0.5f64.powi(k)).unwrap();
            assert!(v < prev && v > 0.0);
            prev = v;
        }
        assert!(barrier_h(1.0, 1e-9).unwrap() < 1e-8);
    }

    #[test]
    fn barrier_gradient_matches_differences() {
        for &(x, y) in &[(1.0, 1.0), (0.3, 2.0), (2.0, 0.1)] {
            let g = barrier_h_gradient(x, y).unwrap();
            let d = 1e-6;
            let fx = (barrier_h(x + d, y).unwrap() - barrier_h(x - d, y).unwrap()) / (2.0 * d);
            let fy = (barrier_h(x, y + d).unwrap() - barrier_h(x, y - d).unwrap()) / (2.0 * d);
            assert!((g.dx - fx).abs() < 1e-7 && (g.dy - fy).abs() < 1e-7);
            assert!((g.hyperbolic_norm - y * fx.hypot(fy)).abs() < 1e-6);
        }
    }

    #[test]
    fn barrier_solves_the_minimal_surface_equation() {
        // div(∇h / √(1 + y²|∇h|²)) by central differences of the flux
        let flux = |x: f64, y: f64| {
            let g = barrier_h_gradient(x, y).unwrap();
            let w = (1.0 + (y * g.dx).powi(2) + (y * g.dy).powi(2)).sqrt();
            (g.dx / w, g.dy / w)
        };
        let d = 1e-5;
        for &(x, y) in &[(1.0, 1.0), (0.4, 1.7), (1.5, 0.3)] {
            let div = (flux(x + d, y).0 - flux(x - d, y).0 + flux(x, y + d).1 - flux(x, y - d).1) / (2.0 * d);
            assert!(div.abs() < 1e-7, "{div}");
        }
    }

    #[test]
    fn gradient_matches_energy_differences() {
        let mesh = square_mesh(0, 0.5);
        let disc = Discretization::new(&mesh).unwrap();
        let u: Vec<f64> = mesh.nodes.iter().map(|z| 3.0 * z.re * z.im + z.re.sin()).collect();
        let g = disc.gradient(&u);
        for i in (0..mesh.num_nodes()).step_by(37) {
            let d = 1e-6;
            let (mut up, mut um) = (u.clone(), u.clone());
            up[i] += d;
            um[i] -= d;
            let fd = (disc.energy(&up) - disc.energy(&um)) / (2.0 * d);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + g[i].abs()), "{fd} vs {}", g[i]);
        }
    }

    #[test]
    fn zero_data_gives_flat_graph() {
        let mesh = square_mesh(1, 0.4);
        let s = solve(&mesh, &BoundaryData::zero()).unwrap();
        assert!(s.u.iter().all(|v| v.abs() < 1e-12));
        assert!((s.energy - mesh.hyperbolic_area()).abs() < 1e-10 * s.energy);
    }

    #[test]
    fn constant_data_gives_constant() {
        let mesh = square_mesh(0, 0.4);
        let s = solve(&mesh, &BoundaryData::Caps { a: 2.5, b: 2.5 }).unwrap();
        assert!(s.u.iter().all(|v| (v - 2.5).abs() < 1e-10));
    }

    #[test]
    fn caps_converge_with_energy_descent() {
        let mesh = square_mesh(2, 0.3);
        let s = solve(&mesh, &BoundaryData::symmetric_caps(4.0)).unwrap();
        assert!(s.residual <= TOL_SOLVE * (1.0 + s.energy));
        // increases are confined to the energy's roundoff
        for w in s.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + ROUNDOFF * w[0].abs().max(1.0));
        }
        assert!(s.max_principle_violation() < 1e-9);
        assert!(s.u.iter().all(|v| v.abs() <= 4.0 + 1e-9));
    }

    #[test]
    fn chord_values_interpolate_between_corners() {
        let mesh = square_mesh(0, 0.4);
        let v = BoundaryData::symmetric_caps(1.0).nodal_values(&mesh).unwrap();
        for (i, m) in mesh.markers.iter().enumerate() {
            match m {
                Marker::A(_) => assert_eq!(v[i], 1.0),
                Marker::B(_) => assert_eq!(v[i], -1.0),
                Marker::Chord(_) => assert!(v[i] > -1.0 && v[i] < 1.0),
                _ => assert_eq!(v[i], 0.0),
            }
        }
        let missing = BoundaryData::PerMarker(vec![(Marker::A(0), 1.0)]);
        assert!(matches!(missing.nodal_values(&mesh), Err(Error::BoundaryData(_))));
        assert!(BoundaryData::Nodal(vec![0.0; 3]).nodal_values(&mesh).is_err());
    }

    #[test]
    fn barrier_data_on_rectangle() {
        let err = |n| {
            let mesh = half_plane_rectangle(1.0, 2.0, 1.0, 2.0, n, n).unwrap();
            let exact: Vec<f64> = mesh.nodes.iter().map(|&z| barrier_disk(z).unwrap()).collect();
            let s = solve(&mesh, &BoundaryData::Nodal(exact.clone())).unwrap();
            s.u.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
        };
        let (coarse, fine) = (err(8), err(16));
        assert!(fine < 5e-4, "{fine}");
        assert!(coarse / fine > 3.0, "{coarse} {fine}");
    }

    #[test]
    fn degenerate_triangles_are_rejected() {
        let mesh = TriMesh {
            nodes: vec![C::new(0.0, 0.0), C::new(0.5, 0.0), C::new(0.25, 1e-4)],
            triangles: vec![[0, 1, 2]],
            markers: vec![Marker::Fixed; 3],
        };
        assert!(matches!(Discretization::new(&mesh), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn solution_file_round_trip() {
        let mesh = square_mesh(0, 0.5);
        let s = solve(&mesh, &BoundaryData::symmetric_caps(1.0)).unwrap();
        let mut buf = Vec::new();
        s.write_binary(&mut buf, "mesh.txt").unwrap();
        let back = read_solution(&mut &buf[..]).unwrap();
        assert_eq!(back.u, s.u);
        assert_eq!(back.mesh_ref, "mesh.txt");
        assert_eq!(back.iterations, s.iterations);
        assert!(read_solution(&mut &b"nonsense"[..]).is_err());
    }

    #[test]
    fn square_solutions_are_odd_under_quarter_turns() {
        let mesh = square_mesh(3, 0.15);
        let s = solve(&mesh, &BoundaryData::symmetric_caps(4.0)).unwrap();
        let o = s.value_at(C::new(0.0, 0.0)).unwrap();
        assert!(o.abs() < 5e-3, "{o}");
        let mut worst = 0.0f64;
        for (&z, &v) in mesh.nodes.iter().zip(&s.u) {
            if z.norm() > 0.3 {
                continue;
            }
            let w = s.value_at(z * C::i()).unwrap();
            worst = worst.max((w + v).abs());
        }
        assert!(worst < 5e-3, "{worst}");
    }

    #[test]
    fn ordered_data_give_ordered_solutions() {
        let mesh = square_mesh(2, 0.3);
        let low = solve(&mesh, &BoundaryData::symmetric_caps(1.0)).unwrap();
        let high = solve(&mesh, &BoundaryData::Caps { a: 2.0, b: -0.5 }).unwrap();
        assert!(low.u.iter().zip(&high.u).all(|(l, h)| l <= &(h + 1e-9)));
    }

    #[test]
    fn solves_are_bit_identical() {
        let mesh = square_mesh(2, 0.3);
        let a = solve(&mesh, &BoundaryData::symmetric_caps(3.0)).unwrap();
        let b = solve(&mesh, &BoundaryData::symmetric_caps(3.0)).unwrap();
        assert_eq!(a.u.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.u.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.energy.to_bits(), b.energy.to_bits());
    }

    #[test]
    fn fitted_geodesic_recovers_endpoints() {
        let geo = Geodesic::new(BoundaryPoint::new(0.3), BoundaryPoint::new(2.0)).unwrap();
        let pts: Vec<C> = (1..40).map(|k| geo.point_at((k as f64 - 20.0) / 5.0)).collect();
        let f = fit_geodesic(&pts).unwrap();
        let (a, b) = (f.endpoints.0.min(f.endpoints.1), f.endpoints.0.max(f.endpoints.1));
        assert!((a - 0.3).abs() < 1e-9 && (b - 2.0).abs() < 1e-9, "{a} {b}");
        assert!(f.residual < 1e-9);
        let diameter: Vec<C> = (-5..=5).map(|k| C::new(k as f64 * 0.15, k as f64 * 0.15)).collect();
        let f = fit_geodesic(&diameter).unwrap();
        let d = BoundaryPoint::new(f.endpoints.0).angular_distance(&BoundaryPoint::new(std::f64::consts::FRAC_PI_4));
        let e = BoundaryPoint::new(f.endpoints.0).angular_distance(&BoundaryPoint::new(5.0 * std::f64::consts::FRAC_PI_4));
        assert!(d.min(e) < 1e-9);
    }

    #[test]
    fn probe_separates_balanced_from_unbalanced() {
        let opts = SequenceOptions { h: 0.3, levels: LevelPolicy::Fixed(3), ..Default::default() };
        let base = InteriorPoint::origin();
        let sq = ScherkPolygon::regular(4).unwrap();
        let runs = scherk_sequence(&sq, &[4, 8], &base, &opts).unwrap();
        assert!(divergence_probe(&runs, DEFAULT_DIVERGENCE_THRESHOLD).is_empty());
        let pi = std::f64::consts::PI;
        let ub = ScherkPolygon::from_angles(&[0.5, pi / 2.0, pi, 1.5 * pi], crate::polygon::EdgeLabel::A).unwrap();
        assert!(matches!(scherk_sequence(&ub, &[4, 8], &base, &opts), Err(Error::NotAdmissible)));
        let runs = cap_sequence(&ub, &[4, 8], &base, &opts).unwrap();
        let rep = divergence_probe(&runs, DEFAULT_DIVERGENCE_THRESHOLD);
        assert!(!rep.is_empty() && !rep.geodesics.is_empty());
        for f in &rep.geodesics {
            assert!(f.nearest_vertices(&ub).iter().all(|&(_, d)| d < 0.05), "{f:?}");
        }
        assert!(!rep.interior_share_vertex(&ub, 0.05));
    }
}
