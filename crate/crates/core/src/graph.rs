//! Scan-to-graph construction.
//!
//! Each slice of interest contributes one node per detector. A node carries
//! eight features: the left box then the right box, with `-1` in all four
//! slots of a missing box. Nodes of one slice form a clique (horizontal
//! edges); the same detector on consecutive slices is linked (vertical edges).

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleOutput;
use crate::error::{Error, Result};
use crate::soi::SliceSegment;
use crate::types::Side;

pub const NODE_FEATURES: usize = 8;
pub const ABSENT: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub slice: usize,
    pub model: usize,
    pub features: [f64; NODE_FEATURES],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    #[serde(rename = "H")]
    Horizontal,
    #[serde(rename = "V")]
    Vertical,
}

pub type Edge = (usize, usize, EdgeKind);

/// How box coordinates enter node features.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureScale {
    /// Raw pixel coordinates.
    #[default]
    Raw,
    /// x divided by image width, y by image height.
    ByImage { height: usize, width: usize },
}

impl FeatureScale {
    fn apply(self, coords: [f64; 4]) -> [f64; 4] {
        match self {
            FeatureScale::Raw => coords,
            FeatureScale::ByImage { height, width } => {
                let (h, w) = (height as f64, width as f64);
                [coords[0] / w, coords[1] / h, coords[2] / w, coords[3] / h]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGraph {
    pub scan_id: String,
    #[serde(default)]
    pub label: Option<bool>,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<Edge>,
}

impl ScanGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Undirected adjacency, each list ascending.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b, _) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn feature_rows(&self) -> Vec<[f64; NODE_FEATURES]> {
        self.nodes.iter().map(|n| n.features).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::validation(format!("graph {}", self.scan_id), m));
        if self.nodes.is_empty() {
            return fail("graph has no nodes".into());
        }
        let n = self.nodes.len();
        let mut seen = std::collections::BTreeSet::new();
        for &(a, b, _) in &self.edges {
            if a >= n || b >= n {
                return fail(format!("edge ({a}, {b}) references a missing node"));
            }
            if a == b {
                return fail(format!("self-edge on node {a}"));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return fail(format!("duplicate edge ({a}, {b})"));
            }
        }
        for node in &self.nodes {
            if node.features.iter().any(|v| !v.is_finite()) {
                return fail(format!(
                    "non-finite feature at slice {} model {}",
                    node.slice, node.model
                ));
            }
        }
        Ok(())
    }
}

/// Build the graph for one scan over `segment` with `k` detectors.
/// Nodes are ordered by (slice, model); edges are sorted.
pub fn build_graph(
    out: &EnsembleOutput,
    segment: SliceSegment,
    k: usize,
    scale: FeatureScale,
) -> Result<ScanGraph> {
    if k == 0 {
        return Err(Error::InvalidArgument("graph needs at least one model".into()));
    }
    if out.k != k {
        return Err(Error::InvalidInput(format!(
            "ensemble has {} models, graph asked for {k}",
            out.k
        )));
    }
    let n = segment.len();
    let index = |slice: usize, model: usize| (slice - segment.first) * k + model;

    let mut nodes: Vec<GraphNode> = segment
        .indices()
        .flat_map(|slice| {
            (0..k).map(move |model| GraphNode {
                slice,
                model,
                features: [ABSENT; NODE_FEATURES],
            })
        })
        .collect();
    for d in &out.detections {
        if !segment.contains(d.slice_index) {
            return Err(Error::InvalidInput(format!(
                "detection on slice {} lies outside segment {}..={}",
                d.slice_index, segment.first, segment.last
            )));
        }
        if d.model_id >= k {
            return Err(Error::InvalidInput(format!(
                "detection model {} not below k = {k}",
                d.model_id
            )));
        }
        let off = d.side.feature_offset();
        let node = &mut nodes[index(d.slice_index, d.model_id)];
        node.features[off..off + 4].copy_from_slice(&scale.apply(d.bbox.coords()));
    }

    let mut edges = Vec::with_capacity(n * k * (k - 1) / 2 + (n - 1) * k);
    for slice in segment.indices() {
        for a in 0..k {
            for b in a + 1..k {
                edges.push((index(slice, a), index(slice, b), EdgeKind::Horizontal));
            }
            if slice < segment.last {
                edges.push((index(slice, a), index(slice + 1, a), EdgeKind::Vertical));
            }
        }
    }
    edges.sort_unstable();

    Ok(ScanGraph {
        scan_id: out.scan_id.clone(),
        label: None,
        nodes,
        edges,
    })
}

/// Read a box back out of node features; `None` for the sentinel.
pub fn node_box(features: &[f64; NODE_FEATURES], side: Side) -> Option<[f64; 4]> {
    let off = side.feature_offset();
    let b: [f64; 4] = features[off..off + 4].try_into().expect("4 coords");
    (b[0] >= 0.0).then_some(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BoundingBox, DetectionRecord};
    use proptest::prelude::*;

    fn empty_output(k: usize, first: usize, last: usize) -> EnsembleOutput {
        EnsembleOutput::new("g", k, SliceSegment::new(first, last).unwrap(), &[]).unwrap()
    }

    fn is_connected(g: &ScanGraph) -> bool {
        let adj = g.neighbors();
        let mut seen = vec![false; g.num_nodes()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    #[test]
    fn three_slices_five_models() {
        let out = empty_output(5, 10, 12);
        let g = build_graph(&out, out.segment, 5, FeatureScale::Raw).unwrap();
        assert_eq!(g.num_nodes(), 15);
        assert_eq!(g.edges.len(), 40);
        g.validate().unwrap();
    }

    #[test]
    fn single_slice_two_models() {
        let out = empty_output(2, 0, 0);
        let g = build_graph(&out, out.segment, 2, FeatureScale::Raw).unwrap();
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.edges, vec![(0, 1, EdgeKind::Horizontal)]);
    }

    #[test]
    fn left_detection_encoding() {
        let det = DetectionRecord {
            scan_id: "g".into(),
            slice_index: 0,
            model_id: 1,
            side: Side::Left,
            bbox: BoundingBox::new(10.0, 20.0, 30.0, 40.0).unwrap(),
            score: 0.8,
        };
        let out = EnsembleOutput::new("g", 3, SliceSegment::new(0, 2).unwrap(), [&det]).unwrap();
        let g = build_graph(&out, out.segment, 3, FeatureScale::Raw).unwrap();
        assert_eq!(
            g.nodes[1].features,
            [10.0, 20.0, 30.0, 40.0, -1.0, -1.0, -1.0, -1.0]
        );
        assert_eq!(node_box(&g.nodes[1].features, Side::Right), None);
        assert!(g.nodes.iter().enumerate().all(|(i, n)| i == 1
            || n.features == [ABSENT; NODE_FEATURES]));

        let scaled = build_graph(
            &out,
            out.segment,
            3,
            FeatureScale::ByImage {
                height: 100,
                width: 50,
            },
        )
        .unwrap();
        assert_eq!(scaled.nodes[1].features[..4], [0.2, 0.2, 0.6, 0.4]);
    }

    #[test]
    fn empty_segment_is_impossible_and_mismatched_k_rejected() {
        let out = empty_output(3, 0, 2);
        assert!(build_graph(&out, out.segment, 4, FeatureScale::Raw).is_err());
    }

    #[test]
    fn dump_format_uses_letter_edge_kinds() {
        let out = empty_output(2, 0, 1);
        let g = build_graph(&out, out.segment, 2, FeatureScale::Raw).unwrap();
        let json = serde_json::to_value(&g).unwrap();
        assert_eq!(json["edges"][0], serde_json::json!([0, 1, "H"]));
        assert_eq!(json["edges"][1], serde_json::json!([0, 2, "V"]));
        assert_eq!(json["nodes"][3]["slice"], 1);
        assert_eq!(json["nodes"][3]["model"], 1);
        let back: ScanGraph = serde_json::from_value(json).unwrap();
        assert_eq!(back, g);
    }

    proptest! {
        #[test]
        fn counts_match_closed_form(n in 1usize..40, k in 2usize..8, first in 0usize..50) {
            let out = empty_output(k, first, first + n - 1);
            let g = build_graph(&out, out.segment, k, FeatureScale::Raw).unwrap();
            prop_assert_eq!(g.num_nodes(), n * k);
            let h = g.edges.iter().filter(|e| e.2 == EdgeKind::Horizontal).count();
            let v = g.edges.iter().filter(|e| e.2 == EdgeKind::Vertical).count();
            prop_assert_eq!(h, n * k * (k - 1) / 2);
            prop_assert_eq!(v, (n - 1) * k);
            prop_assert!(is_connected(&g));
            prop_assert!(g.validate().is_ok());
            let mut sorted = g.edges.clone();
            sorted.sort();
            prop_assert_eq!(sorted, g.edges);
        }
    }
}
