//! Regression against a stored triangulation of the square at level 2, `h = 0.5`.

use std::io::BufReader;

use proptest::prelude::*;
use scherk::meshing::{triangulate, truncate, TriMesh, DEFAULT_GRADING};
use scherk::polygon::ScherkPolygon;

const GOLDEN: &str = include_str!("golden/square_level2_h0.5.mesh");

fn fresh() -> TriMesh {
    let dom = truncate(&ScherkPolygon::regular(4).unwrap(), 2).unwrap();
    triangulate(&dom, 0.5, DEFAULT_GRADING).unwrap()
}

#[test]
fn triangulation_matches_the_stored_mesh() {
    let golden = TriMesh::read(BufReader::new(GOLDEN.as_bytes())).unwrap();
    let mesh = fresh();
    assert_eq!(mesh.nodes.len(), golden.nodes.len());
    assert_eq!(mesh.triangles, golden.triangles);
    assert_eq!(mesh.markers, golden.markers);
    let drift = mesh.nodes.iter().zip(&golden.nodes).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    assert!(drift <= 1e-12, "node drift {drift:e}");
}

#[test]
fn text_format_round_trips() {
    let mesh = fresh();
    let back = TriMesh::read(BufReader::new(mesh.to_text().as_bytes())).unwrap();
    assert_eq!(back.triangles, mesh.triangles);
    assert_eq!(back.markers, mesh.markers);
    assert_eq!(back.nodes, mesh.nodes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Every triangle is counter-clockwise and every node lies in the open disk.
    #[test]
    fn triangulations_are_oriented(h in 0.25f64..0.8, level in 1u32..3) {
        let dom = truncate(&ScherkPolygon::regular(4).unwrap(), level).unwrap();
        let mesh = triangulate(&dom, h, DEFAULT_GRADING).unwrap();
        prop_assert!(mesh.nodes.iter().all(|z| z.norm() < 1.0));
        for t in &mesh.triangles {
            let (a, b, c) = (mesh.nodes[t[0]], mesh.nodes[t[1]], mesh.nodes[t[2]]);
            let area = (b - a).re * (c - a).im - (b - a).im * (c - a).re;
            prop_assert!(area > 0.0);
        }
    }
}
