//! Domain extension by regular ideal quadrilaterals and the exhaustion driver.
//!
//! Every side `[d_i, d_{i+1}]` of a polygon receives a regular quadrilateral
//! `(d_i, b_s, b_e, d_{i+1})` on the far side from the base point `O`,
//! symmetric about the geodesic through `O` orthogonal to the side. The side
//! becomes the chain `d_i, b_s, b_e, d_{i+1}` with labels `L, L', L`, so the
//! alternation of labels survives and a `2k`-gon becomes a `6k`-gon.
//!
//! For a side with new vertices `b_s` (next to the start) and `b_e` (next to
//! the end), the margin of the attached quadrilateral in the child equals
//! `phi(start, b_s, b_e, end)` for whichever label the side carries.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypgeo::{make_regular_quadrilateral, regular_quadrilateral_frame, BoundaryPoint, Geodesic, InteriorPoint, Side};
use crate::polygon::{check_or_certify, phi, AdmissibilityReport, PolygonSpec, ScherkPolygon};

/// Smallest perturbation tried before giving up.
pub const TAU_MIN: f64 = 1e-6;

/// Moves `x` by `tau` radians toward `target` along the arc that avoids `avoid`.
fn move_toward(x: &BoundaryPoint, target: &BoundaryPoint, avoid: &BoundaryPoint, tau: f64) -> Result<BoundaryPoint> {
    let ccw = (target.theta() - x.theta()).rem_euclid(TAU);
    let off = (avoid.theta() - x.theta()).rem_euclid(TAU);
    // the counter-clockwise arc from x to target is the right one unless it contains `avoid`
    let (dir, gap) = if off > ccw { (1.0, ccw) } else { (-1.0, TAU - ccw) };
    if tau >= gap {
        return Err(Error::Overshoot);
    }
    Ok(BoundaryPoint::new(x.theta() + dir * tau))
}

/// Moves `b2` toward `a1` by `tau` radians, leaving `b1` fixed.
pub fn perturb_quadrilateral(
    a0: &BoundaryPoint,
    a1: &BoundaryPoint,
    b1: &BoundaryPoint,
    b2: &BoundaryPoint,
    tau: f64,
) -> Result<(BoundaryPoint, BoundaryPoint)> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::DomainError(format!("tau = {tau} must be a finite non-negative number")));
    }
    let _ = a0;
    Ok((*b1, move_toward(b2, a1, b1, tau)?))
}

/// The regular quadrilaterals of an unperturbed extension, one per side: `(b_s, b_e)`.
pub fn regular_attachments(d: &ScherkPolygon, o: &InteriorPoint) -> Result<Vec<(BoundaryPoint, BoundaryPoint)>> {
    (0..d.len())
        .map(|i| {
            let (s, e) = (d.vertex(i), d.vertex(i + 1));
            make_regular_quadrilateral(&s, &e, o, Side::away_from(&s, &e, o)?)
        })
        .collect()
}

/// Side `i` is perturbed at its end for even `i` and at its start for odd `i`,
/// so each pair `(2j, 2j+1)` moves toward their shared vertex `d_{2j+1}`.
fn perturb_side(d: &ScherkPolygon, i: usize, att: (BoundaryPoint, BoundaryPoint), tau: f64) -> Result<(BoundaryPoint, BoundaryPoint)> {
    let (s, e) = (d.vertex(i), d.vertex(i + 1));
    let (bs, be) = att;
    if i.is_multiple_of(2) {
        let (_, moved) = perturb_quadrilateral(&s, &e, &bs, &be, tau)?;
        Ok((bs, moved))
    } else {
        let (_, moved) = perturb_quadrilateral(&e, &s, &be, &bs, tau)?;
        Ok((moved, be))
    }
}

fn side_phi(d: &ScherkPolygon, i: usize, att: (BoundaryPoint, BoundaryPoint)) -> Result<f64> {
    phi(&d.vertex(i), &att.0, &att.1, &d.vertex(i + 1))
}

/// Per-side perturbations `tau_i ≤ tau` giving every attached quadrilateral the
/// same `phi`, which keeps `a(Γ) = b(Γ)` exact in the child.
fn equalized(d: &ScherkPolygon, base: &[(BoundaryPoint, BoundaryPoint)], tau: f64) -> Result<(Vec<(BoundaryPoint, BoundaryPoint)>, Vec<f64>, Vec<f64>)> {
    let n = d.len();
    let mut full = Vec::with_capacity(n);
    for (i, &att) in base.iter().enumerate() {
        full.push(side_phi(d, i, perturb_side(d, i, att, tau)?)?);
    }
    let target = full.iter().copied().fold(f64::INFINITY, f64::min);
    let mut atts = Vec::with_capacity(n);
    let mut taus = Vec::with_capacity(n);
    let mut phis = Vec::with_capacity(n);
    for (i, &att) in base.iter().enumerate() {
        let (mut lo, mut hi) = (0.0, tau);
        if full[i] > target {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if side_phi(d, i, perturb_side(d, i, att, mid)?)? < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= f64::EPSILON * tau {
                    break;
                }
            }
        }
        let a = perturb_side(d, i, att, hi)?;
        taus.push(hi);
        phis.push(side_phi(d, i, a)?);
        atts.push(a);
    }
    Ok((atts, taus, phis))
}

fn assemble(d: &ScherkPolygon, atts: &[(BoundaryPoint, BoundaryPoint)], sides: &[usize]) -> Result<ScherkPolygon> {
    let mut v = Vec::with_capacity(d.len() + 2 * sides.len());
    for i in 0..d.len() {
        v.push(d.vertex(i));
        if let Some(pos) = sides.iter().position(|&s| s == i) {
            v.push(atts[pos].0);
            v.push(atts[pos].1);
        }
    }
    // an inserted pair keeps label parity, so edge 0 keeps its label
    ScherkPolygon::new(v, d.first_edge())
}

/// Minimum hyperbolic distance from `o` to the side geodesics of `d`.
pub fn distance_to_boundary(d: &ScherkPolygon, o: &InteriorPoint) -> f64 {
    (0..d.len())
        .map(|i| {
            Geodesic::new(d.vertex(i), d.vertex(i + 1))
                .map(|g| g.distance_from(o.to_complex()))
                .unwrap_or(0.0)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Outward progress measured from one side.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SideStep {
    /// `min dist(O, new side) - dist(O, old side)` over the three replacing sides.
    pub point_step: f64,
    /// Same difference for the Busemann function of the ideal point behind `O`
    /// on the perpendicular from the side.
    pub horocyclic_step: f64,
}

/// Outward steps of the chain `s, b_s, b_e, e` replacing the side `[s, e]`.
pub fn side_step(s: &BoundaryPoint, e: &BoundaryPoint, bs: &BoundaryPoint, be: &BoundaryPoint, o: &InteriorPoint) -> Result<SideStep> {
    let old = Geodesic::new(*s, *e)?;
    let new = [Geodesic::new(*s, *bs)?, Geodesic::new(*bs, *be)?, Geodesic::new(*be, *e)?];
    let oz = o.to_complex();
    let d_old = old.distance_from(oz);
    let point_step = new.iter().map(|g| g.distance_from(oz)).fold(f64::INFINITY, f64::min) - d_old;
    // foot of o on the old side, then the axis through o
    let foot = regular_quadrilateral_frame(s, e, o)?.apply(num_complex::Complex64::new(0.0, 0.0));
    let zeta = Geodesic::through(foot, oz)
        .map_err(|_| Error::DomainError("base point lies on the side".into()))?
        .q;
    let b_old = old.busemann_min(&zeta);
    let horocyclic_step = new.iter().map(|g| g.busemann_min(&zeta)).fold(f64::INFINITY, f64::min) - b_old;
    Ok(SideStep {
        point_step,
        horocyclic_step,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtensionStep {
    pub parent: PolygonSpec,
    pub child: PolygonSpec,
    /// Perturbation bound actually used after backoff.
    pub tau: f64,
    pub requested_tau: f64,
    /// Per-side perturbations after equalizing `phi`; each at most `tau`.
    pub side_taus: Vec<f64>,
    pub phi_values: Vec<f64>,
    pub parent_distance: f64,
    pub child_distance: f64,
    /// `dist(O, ∂child) - dist(O, ∂parent)`.
    pub step_distance: f64,
    pub side_steps: Vec<SideStep>,
    pub report: AdmissibilityReport,
}

impl ExtensionStep {
    pub fn child_polygon(&self) -> ScherkPolygon {
        ScherkPolygon::from_spec(&self.child).expect("child was validated on construction")
    }

    pub fn min_horocyclic_step(&self) -> f64 {
        self.side_steps.iter().map(|s| s.horocyclic_step).fold(f64::INFINITY, f64::min)
    }
}

fn build_step(d: &ScherkPolygon, o: &InteriorPoint, base: &[(BoundaryPoint, BoundaryPoint)], tau: f64, requested: f64) -> Result<ExtensionStep> {
    let (atts, side_taus, phi_values) = if tau > 0.0 {
        equalized(d, base, tau)?
    } else {
        let phis = (0..d.len()).map(|i| side_phi(d, i, base[i])).collect::<Result<Vec<_>>>()?;
        (base.to_vec(), vec![0.0; d.len()], phis)
    };
    let all: Vec<usize> = (0..d.len()).collect();
    let child = assemble(d, &atts, &all)?;
    let side_steps = (0..d.len())
        .map(|i| side_step(&d.vertex(i), &d.vertex(i + 1), &atts[i].0, &atts[i].1, o))
        .collect::<Result<Vec<_>>>()?;
    let parent_distance = distance_to_boundary(d, o);
    let child_distance = distance_to_boundary(&child, o);
    Ok(ExtensionStep {
        parent: d.to_spec(),
        report: check_or_certify(&child),
        child: child.to_spec(),
        tau,
        requested_tau: requested,
        side_taus,
        phi_values,
        parent_distance,
        child_distance,
        step_distance: child_distance - parent_distance,
        side_steps,
    })
}

/// Attaches a perturbed regular quadrilateral to every side of `d`.
///
/// With `tau = 0` the unperturbed child is returned together with its report,
/// equality cases included. With `tau > 0` the perturbation is halved until the
/// child is admissible, down to [`TAU_MIN`].
pub fn extend_once(d: &ScherkPolygon, o: &InteriorPoint, tau: f64) -> Result<ExtensionStep> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::DomainError(format!("tau = {tau} must be a finite non-negative number")));
    }
    if !check_or_certify(d).is_admissible() {
        return Err(Error::NotAdmissibleParent);
    }
    let base = regular_attachments(d, o)?;
    if tau == 0.0 {
        return build_step(d, o, &base, 0.0, 0.0);
    }
    let mut t = tau;
    while t >= TAU_MIN {
        match build_step(d, o, &base, t, tau) {
            Ok(step) if step.report.is_admissible() => return Ok(step),
            Ok(_) | Err(Error::Overshoot) => t /= 2.0,
            Err(e) => return Err(e),
        }
    }
    Err(Error::NoAdmissibleTau(TAU_MIN))
}

/// Unperturbed quadrilaterals on the two adjacent sides `i` and `i+1` only.
pub fn attach_pair(d: &ScherkPolygon, o: &InteriorPoint, i: usize) -> Result<ScherkPolygon> {
    let n = d.len();
    let sides = [i % n, (i + 1) % n];
    let atts = regular_attachments(d, o)?;
    let chosen: Vec<_> = sides.iter().map(|&s| atts[s]).collect();
    let mut order: Vec<usize> = sides.to_vec();
    let mut ch = chosen;
    if order[0] > order[1] {
        order.swap(0, 1);
        ch.swap(0, 1);
    }
    assemble(d, &ch, &order)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExhaustionTrace {
    pub base_point: InteriorPoint,
    pub domains: Vec<PolygonSpec>,
    /// Requested `tau0 · 2^-n`.
    pub tau_schedule: Vec<f64>,
    /// Perturbations used after backoff.
    pub tau_used: Vec<f64>,
    /// `dist(O, ∂D_n)` for every domain.
    pub distances: Vec<f64>,
    pub steps: Vec<StepSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub vertex_count: usize,
    pub step_distance: f64,
    pub min_horocyclic_step: f64,
    pub min_phi: f64,
    pub min_margin: Option<f64>,
    pub admissible: bool,
}

impl ExhaustionTrace {
    pub fn strictly_increasing(&self) -> bool {
        self.distances.windows(2).all(|w| w[1] > w[0])
    }
}

/// Iterates [`extend_once`] with `tau_n = tau0 · 2^-n`.
pub fn exhaust(d0: &ScherkPolygon, o: &InteriorPoint, n_steps: usize, tau0: f64) -> Result<ExhaustionTrace> {
    if n_steps == 0 {
        return Err(Error::DomainError("n_steps must be at least 1".into()));
    }
    let mut d = d0.clone();
    let mut trace = ExhaustionTrace {
        base_point: *o,
        domains: vec![d.to_spec()],
        tau_schedule: Vec::new(),
        tau_used: Vec::new(),
        distances: vec![distance_to_boundary(&d, o)],
        steps: Vec::new(),
    };
    for n in 0..n_steps {
        let tau = tau0 * 0.5f64.powi(n as i32);
        let step = extend_once(&d, o, tau)?;
        d = step.child_polygon();
        trace.tau_schedule.push(tau);
        trace.tau_used.push(step.tau);
        trace.distances.push(step.child_distance);
        trace.steps.push(StepSummary {
            vertex_count: d.len(),
            step_distance: step.step_distance,
            min_horocyclic_step: step.min_horocyclic_step(),
            min_phi: step.phi_values.iter().copied().fold(f64::INFINITY, f64::min),
            min_margin: step.report.min_margin(),
            admissible: step.report.is_admissible(),
        });
        trace.domains.push(d.to_spec());
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypgeo::{truncated_distance, Decoration, MoebiusMap};
    use crate::polygon::{check_admissibility, quantities, InscribedPolygon, MarginKind, Verdict};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn square() -> ScherkPolygon {
        ScherkPolygon::regular(4).unwrap()
    }

    fn ln_1_sqrt2() -> f64 {
        (1.0 + 2f64.sqrt()).ln()
    }

    fn normalized() -> (BoundaryPoint, BoundaryPoint, BoundaryPoint, BoundaryPoint) {
        let (a0, a1) = (BoundaryPoint::new(PI), BoundaryPoint::new(0.0));
        let o = InteriorPoint::new(0.0, 0.3).unwrap();
        let (b1, b2) = make_regular_quadrilateral(&a0, &a1, &o, Side::away_from(&a0, &a1, &o).unwrap()).unwrap();
        (a0, a1, b1, b2)
    }

    #[test]
    fn perturbation_at_zero_is_identity() {
        let (a0, a1, b1, b2) = normalized();
        let (c1, c2) = perturb_quadrilateral(&a0, &a1, &b1, &b2, 0.0).unwrap();
        assert_eq!((c1, c2), (b1, b2));
        assert_abs_diff_eq!(phi(&a0, &c1, &c2, &a1).unwrap(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn phi_grows_with_tau() {
        let (a0, a1, b1, b2) = normalized();
        let mut last = 0.0;
        for k in 1..=20 {
            let tau = 0.005 * k as f64;
            let (c1, c2) = perturb_quadrilateral(&a0, &a1, &b1, &b2, tau).unwrap();
            assert!(c2.angular_distance(&b2) <= tau + 1e-15);
            assert!(c2.angular_distance(&a1) < b2.angular_distance(&a1));
            let v = phi(&a0, &c1, &c2, &a1).unwrap();
            assert!(v > last);
            last = v;
        }
        assert_eq!(perturb_quadrilateral(&a0, &a1, &b1, &b2, 2.0), Err(Error::Overshoot));
    }

    #[test]
    fn perturbed_margin_equals_phi() {
        let (a0, a1, b1, b2) = normalized();
        let (c1, c2) = perturb_quadrilateral(&a0, &a1, &b1, &b2, 0.05).unwrap();
        // quadrilateral a1, a0, b1, b2 in cyclic order; A on [a0, b1] and [b2, a1]
        let g = ScherkPolygon::new(vec![a0, c1, c2, a1], crate::polygon::EdgeLabel::A).unwrap();
        let dec = Decoration::new(vec![0.4, 0.2, 0.7, 1.3]).unwrap();
        let q = quantities(&g, &InscribedPolygon::full(&g), &dec).unwrap();
        // |∂E| - 2a(∂E) with [a0, a1] an interior edge of the surrounding polygon
        assert_abs_diff_eq!(q.perim - 2.0 * q.a, phi(&a0, &c1, &c2, &a1).unwrap(), epsilon = 1e-10);
        let l = |p: &BoundaryPoint, q: &BoundaryPoint, sp: f64, sq: f64| truncated_distance(p, q, sp, sq).unwrap();
        let direct = l(&a0, &a1, 0.4, 1.3) + l(&c1, &c2, 0.2, 0.7) - l(&a0, &c1, 0.4, 0.2) - l(&c2, &a1, 0.7, 1.3);
        assert_abs_diff_eq!(direct, phi(&a0, &c1, &c2, &a1).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn pair_attachment_has_four_equality_cases() {
        let o = InteriorPoint::origin();
        let d0 = attach_pair(&square(), &o, 0).unwrap();
        assert_eq!(d0.len(), 8);
        let r = check_admissibility(&d0).unwrap();
        assert!(r.balanced);
        assert_eq!(r.verdict(), Verdict::EqualityOnly);
        let mut sets: Vec<Vec<usize>> = r.violations.iter().map(|v| v.indices.clone()).collect();
        sets.sort();
        // E = {0,1,2,3}, E' = {3,4,5,6} and their complements
        assert_eq!(sets, vec![vec![0, 1, 2, 3], vec![0, 1, 2, 3, 6, 7], vec![0, 3, 4, 5, 6, 7], vec![3, 4, 5, 6]]);
        assert!(r.violations.iter().all(|v| v.margin.abs() <= 1e-10 && v.kind == MarginKind::Equality));
        assert!(r.min_margin_a.unwrap() >= -1e-10);
    }

    #[test]
    fn unperturbed_child_is_symmetric() {
        let o = InteriorPoint::origin();
        let step = extend_once(&square(), &o, 0.0).unwrap();
        let child = step.child_polygon();
        assert_eq!(child.len(), 12);
        assert_eq!(step.report.verdict(), Verdict::EqualityOnly);
        assert!(step.phi_values.iter().all(|p| p.abs() < 1e-10));
        let rot = MoebiusMap::rotation(FRAC_PI_2);
        for v in child.vertices() {
            let w = rot.apply_boundary(v);
            assert!(child.vertices().iter().any(|u| u.angular_distance(&w) < 1e-10));
        }
    }

    #[test]
    fn perturbed_child_is_admissible_and_balanced() {
        let o = InteriorPoint::origin();
        for tau in [0.1, 0.01, 0.001] {
            let step = extend_once(&square(), &o, tau).unwrap();
            assert!(step.report.is_admissible());
            assert!(step.report.balance.abs() < 1e-10);
            assert!(step.phi_values.iter().all(|&p| p > 0.0));
            let spread = step.phi_values.iter().fold(0f64, |m, p| m.max((p - step.phi_values[0]).abs()));
            assert!(spread < 1e-12);
            assert!(step.side_taus.iter().all(|&t| t <= step.tau));
            assert_eq!(step.child.vertices_rad.len(), 12);
        }
    }

    #[test]
    fn equalized_phi_keeps_asymmetric_children_balanced() {
        let d = ScherkPolygon::from_angles(&[0.0, 1.2, 2.9, 4.4], crate::polygon::EdgeLabel::A).unwrap();
        // balance d by moving its last vertex
        let f = |t: f64| crate::polygon::gamma_balance(&ScherkPolygon::from_angles(&[0.0, 1.2, 2.9, t], crate::polygon::EdgeLabel::A).unwrap());
        let (mut lo, mut hi) = (3.0, 6.2);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid).signum() == f(lo).signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let _ = d;
        let d = ScherkPolygon::from_angles(&[0.0, 1.2, 2.9, lo], crate::polygon::EdgeLabel::A).unwrap();
        let o = InteriorPoint::new(0.05, -0.1).unwrap();
        let step = extend_once(&d, &o, 0.02).unwrap();
        assert!(step.report.balance.abs() < 1e-10);
        assert!(step.report.is_admissible());
    }

    #[test]
    fn step_bound_in_the_tau_limit() {
        let o = InteriorPoint::origin();
        for tau in [0.0, 1e-3, 1e-5] {
            let step = if tau == 0.0 {
                extend_once(&square(), &o, 0.0).unwrap()
            } else {
                extend_once(&square(), &o, tau).unwrap()
            };
            for s in &step.side_steps {
                assert!((s.horocyclic_step - ln_1_sqrt2()).abs() < 1e-3);
                assert!(s.point_step >= ln_1_sqrt2());
            }
        }
    }

    #[test]
    fn exhaustion_from_square() {
        let o = InteriorPoint::origin();
        let trace = exhaust(&square(), &o, 3, 0.01).unwrap();
        let counts: Vec<usize> = trace.domains.iter().map(|d| d.vertices_rad.len()).collect();
        assert_eq!(counts, vec![4, 12, 36, 108]);
        assert!(trace.strictly_increasing());
        for (n, w) in trace.distances.windows(2).enumerate() {
            assert!(w[1] - w[0] >= 0.8, "step {n}: {}", w[1] - w[0]);
        }
        for (n, &d) in trace.distances.iter().enumerate().skip(1) {
            assert!(d > n as f64 * (ln_1_sqrt2() - 0.1));
        }
        assert!(trace.steps.iter().all(|s| s.admissible && s.min_phi > 0.0));
        // recheck each domain from its spec and verify nesting
        for pair in trace.domains.windows(2) {
            let (p, c) = (ScherkPolygon::from_spec(&pair[0]).unwrap(), ScherkPolygon::from_spec(&pair[1]).unwrap());
            assert!(crate::polygon::check_or_certify(&c).is_admissible());
            for i in 0..p.len() {
                assert!(p.vertex(i).angular_distance(&c.vertex(3 * i)) < 1e-15);
                let g = Geodesic::new(p.vertex(i), p.vertex(i + 1)).unwrap();
                let side_o = g.signed_distance(o.to_complex()).signum();
                for b in [c.vertex(3 * i + 1), c.vertex(3 * i + 2)] {
                    let inner = b.to_complex() * 0.999_999;
                    assert_eq!(g.signed_distance(inner).signum(), -side_o);
                }
            }
        }
    }

    #[test]
    fn inadmissible_parent_rejected() {
        let d = ScherkPolygon::from_angles(&[0.5, FRAC_PI_2, PI, 1.5 * PI], crate::polygon::EdgeLabel::A).unwrap();
        assert_eq!(extend_once(&d, &InteriorPoint::origin(), 0.01).err(), Some(Error::NotAdmissibleParent));
        assert!(extend_once(&square(), &InteriorPoint::origin(), -1.0).is_err());
    }
}
