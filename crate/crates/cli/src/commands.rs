//! One function per subcommand. Each returns the process exit code on success.

use std::path::Path;

use scherk::analysis::{curvature_series, height_rings, write_curvature_csv, SvgScene};
use scherk::extend::{exhaust, extend_once};
use scherk::flux::{balance_audit, conservation_check, ConservationReport};
use scherk::hypgeo::InteriorPoint;
use scherk::meshing::Marker;
use scherk::polygon::{check_or_certify, PolygonSpec, ScherkPolygon, Verdict};
use scherk::solver::{cap_sequence, divergence_probe, scherk_sequence, FittedGeodesic, SequenceOptions, SequenceRun, DEFAULT_DIVERGENCE_THRESHOLD};
use scherk::Result;
use serde::Serialize;

use crate::config::{json_with_config, Artifacts, RunConfig};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VIOLATIONS: u8 = 2;
pub const EXIT_EQUALITY_ONLY: u8 = 3;

/// Random interior cycles per solution in flux audits.
const AUDIT_CYCLES: usize = 20;

/// Modulus convention written into ring reports.
const MODULUS_CONVENTION: &str = "M = 2*pi / E for the potential 0 on the inner loop and 1 on the outer loop; the round annulus r < |z| < R has M = ln(R/r)";

pub fn load(path: &Path) -> Result<(ScherkPolygon, PolygonSpec)> {
    let g = ScherkPolygon::load(path)?;
    let spec = g.to_spec();
    Ok((g, spec))
}

pub fn check(config: &RunConfig, g: &ScherkPolygon, out: Option<&Path>) -> Result<u8> {
    let report = check_or_certify(g);
    #[derive(Serialize)]
    struct Body<'a> {
        verdict: Verdict,
        report: &'a scherk::polygon::AdmissibilityReport,
    }
    let body = Body { verdict: report.verdict(), report: &report };
    print!("{}", json_with_config(config, &body)?);
    if let Some(dir) = out {
        Artifacts::create(dir, config)?.json("check.json", &body)?;
    }
    Ok(match report.verdict() {
        Verdict::Admissible => EXIT_OK,
        Verdict::EqualityOnly => EXIT_EQUALITY_ONLY,
        Verdict::Violations | Verdict::Unbalanced => EXIT_VIOLATIONS,
    })
}

/// Admissible polygons go through the gated sequence; others are solved anyway so divergence can be studied.
fn sequence(g: &ScherkPolygon, n_list: &[u32], h: f64) -> Result<(bool, Vec<SequenceRun>)> {
    let opts = SequenceOptions { h, ..SequenceOptions::default() };
    let admissible = check_or_certify(g).is_admissible();
    let runs = if admissible {
        scherk_sequence(g, n_list, &InteriorPoint::origin(), &opts)?
    } else {
        cap_sequence(g, n_list, &InteriorPoint::origin(), &opts)?
    };
    Ok((admissible, runs))
}

fn level_values(n: u32) -> Vec<f64> {
    let n = n as f64;
    (-4..=4).map(|k| k as f64 * n / 5.0).collect()
}

fn polygon_geodesics(g: &ScherkPolygon) -> Vec<FittedGeodesic> {
    (0..g.len())
        .map(|i| FittedGeodesic { endpoints: (g.vertex(i).theta(), g.vertex(i + 1).theta()), points: 0, residual: 0.0 })
        .collect()
}

pub fn solve(art: &Artifacts, g: &ScherkPolygon, n_list: &[u32], h: f64) -> Result<u8> {
    let (admissible, runs) = sequence(g, n_list, h)?;
    #[derive(Serialize)]
    struct RunSummary {
        n: u32,
        level: u32,
        nodes: usize,
        triangles: usize,
        iterations: usize,
        residual: f64,
        energy: f64,
        anchor_value: f64,
        max_principle_violation: f64,
        solution_file: String,
    }
    let mut summaries = Vec::new();
    for run in &runs {
        let name = format!("u_n{}.bin", run.n);
        let mesh_ref = format!("{}#n={}", art.config().compact(), run.n);
        art.binary(&name, |buf| run.solution.write_binary(buf, &mesh_ref))?;
        let svg = SvgScene::new().domain(&run.solution.mesh).level_sets(&run.solution, &level_values(run.n)).render();
        art.svg(&format!("solution_n{}.svg", run.n), &svg)?;
        summaries.push(RunSummary {
            n: run.n,
            level: run.level,
            nodes: run.solution.mesh.num_nodes(),
            triangles: run.solution.mesh.triangles.len(),
            iterations: run.solution.iterations,
            residual: run.solution.residual,
            energy: run.solution.energy,
            anchor_value: run.anchor_value,
            max_principle_violation: run.solution.max_principle_violation(),
            solution_file: name,
        });
    }
    let divergence = (!admissible && runs.len() >= 2).then(|| divergence_probe(&runs, DEFAULT_DIVERGENCE_THRESHOLD));
    if let (Some(report), Some(last)) = (&divergence, runs.last()) {
        let svg = SvgScene::new()
            .domain(&last.solution.mesh)
            .nodes(&last.solution.mesh, &report.flagged, "#c0392b")
            .geodesics(&report.geodesics)
            .render();
        art.svg("divergence.svg", &svg)?;
    }
    #[derive(Serialize)]
    struct Body<'a> {
        admissible: bool,
        runs: &'a [RunSummary],
        divergence: Option<scherk::solver::DivergenceReport>,
    }
    art.json("solve.json", &Body { admissible, runs: &summaries, divergence })?;
    Ok(EXIT_OK)
}

pub fn flux(art: &Artifacts, g: &ScherkPolygon, n_list: &[u32], h: f64, seed: u64) -> Result<u8> {
    let (admissible, runs) = sequence(g, n_list, h)?;
    let audit = balance_audit(g, &runs);
    let conservation: Vec<ConservationReport> = runs.iter().map(|r| conservation_check(&r.solution, AUDIT_CYCLES, seed)).collect();
    #[derive(Serialize)]
    struct Body<'a> {
        admissible: bool,
        audit: &'a scherk::flux::BalanceAudit,
        conservation: &'a [ConservationReport],
    }
    art.json("flux.json", &Body { admissible, audit: &audit, conservation: &conservation })?;
    let mut arcs = Vec::new();
    audit.write_csv(&mut arcs)?;
    art.csv("flux_arcs.csv", &arcs)?;

    // one row per cap: the first A-side against its length
    let mut series = String::from("n,level,flux,polyline_length,truncated_length,ratio,defect,worst_cycle_ratio\n");
    for (row, cons) in audit.rows.iter().zip(&conservation) {
        if let Some(a) = row.arcs.iter().find(|a| a.marker == Marker::A(0)) {
            series.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                row.n,
                row.level,
                a.flux,
                a.polyline_length,
                a.truncated_length,
                a.flux / a.polyline_length,
                row.consistent_defect,
                cons.worst_ratio
            ));
        }
    }
    art.csv("flux_series.csv", series.as_bytes())?;
    Ok(EXIT_OK)
}

pub fn extend(art: &Artifacts, g: &ScherkPolygon, tau0: f64) -> Result<u8> {
    let step = extend_once(g, &InteriorPoint::origin(), tau0)?;
    art.json("extend.json", &step)?;
    let scene = SvgScene::new().geodesics(&polygon_geodesics(g)).geodesics(&polygon_geodesics(&step.child_polygon()));
    art.svg("extend.svg", &scene.render())?;
    Ok(EXIT_OK)
}

pub fn exhaust_cmd(art: &Artifacts, g: &ScherkPolygon, steps: usize, tau0: f64) -> Result<u8> {
    let trace = exhaust(g, &InteriorPoint::origin(), steps, tau0)?;
    #[derive(Serialize)]
    struct Body<'a> {
        strictly_increasing: bool,
        trace: &'a scherk::extend::ExhaustionTrace,
    }
    art.json("exhaust.json", &Body { strictly_increasing: trace.strictly_increasing(), trace: &trace })?;
    let mut scene = SvgScene::new();
    for spec in &trace.domains {
        scene = scene.geodesics(&polygon_geodesics(&ScherkPolygon::from_spec(spec)?));
    }
    art.svg("exhaust.svg", &scene.render())?;
    Ok(EXIT_OK)
}

pub fn modulus(art: &Artifacts, g: &ScherkPolygon, n_list: &[u32], h: f64, levels: &[f64]) -> Result<u8> {
    let (admissible, runs) = sequence(g, n_list, h)?;
    let last = runs.last().ok_or_else(|| scherk::Error::DomainError("empty n-list".into()))?;
    let rings = height_rings(&last.solution, &last.domain, levels)?;
    #[derive(Serialize)]
    struct Ring {
        inner_level: f64,
        outer_level: f64,
        modulus: f64,
        inner_loop_nodes: usize,
        outer_loop_nodes: usize,
    }
    #[derive(Serialize)]
    struct Body {
        convention: &'static str,
        admissible: bool,
        n: u32,
        level: u32,
        rings: Vec<Ring>,
    }
    let body = Body {
        convention: MODULUS_CONVENTION,
        admissible,
        n: last.n,
        level: last.level,
        rings: rings
            .iter()
            .map(|r| Ring {
                inner_level: r.inner_level,
                outer_level: r.outer_level,
                modulus: r.modulus,
                inner_loop_nodes: r.inner.len(),
                outer_loop_nodes: r.outer.len(),
            })
            .collect(),
    };
    art.json("rings.json", &body)?;
    let loops: Vec<&[usize]> = rings.iter().flat_map(|r| [r.inner.as_slice(), r.outer.as_slice()]).collect();
    art.svg("rings.svg", &SvgScene::new().domain(&last.solution.mesh).loops(&last.solution.mesh, &loops).render())?;
    let mut csv = Vec::new();
    write_curvature_csv(&curvature_series(&runs), &mut csv)?;
    art.csv("curvature.csv", &csv)?;
    Ok(EXIT_OK)
}
