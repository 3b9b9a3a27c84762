//! Semantic graph model shared by scene graphs and text-graphs.
//!
//! Scene graphs come from 3DSSG-style annotations (objects with labels,
//! attributes and axis-aligned bounding boxes, plus relationship triples).
//! Text-graphs come from the extractors in [`crate::extract`] and never carry
//! bounding boxes.

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default edge distance threshold in meters.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 1.5;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed graph document: {0}")]
    MalformedDocument(String),
    #[error("relation references unknown object id {0}")]
    DanglingEdge(u32),
    #[error("invalid distance threshold {0}")]
    InvalidThreshold(f64),
    #[error("filter_edges requires a scene graph")]
    NotASceneGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GraphKind {
    Scene,
    Text,
}

/// Axis-aligned box in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BBox {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|i| self.min[i].is_finite() && self.max[i].is_finite() && self.min[i] <= self.max[i])
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }
}

/// Euclidean distance between the closest points of two boxes; 0 when they
/// touch or intersect.
pub fn bbox_distance(a: &BBox, b: &BBox) -> f64 {
    let mut sq = 0.0;
    for i in 0..3 {
        let gap = (b.min[i] - a.max[i]).max(a.min[i] - b.max[i]).max(0.0);
        sq += gap * gap;
    }
    sq.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub node_id: u32,
    pub label: String,
    pub attributes: Vec<String>,
    pub bbox: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GraphEdge {
    pub source: u32,
    pub target: u32,
    pub relation: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGraph {
    pub graph_id: String,
    pub kind: GraphKind,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

/// Lowercase and collapse internal whitespace.
pub fn normalize_label(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

impl SemanticGraph {
    /// Checks every structural invariant of the graph model.
    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: String| Err(GraphError::MalformedDocument(m));
        if self.nodes.is_empty() {
            return bad(format!("graph {} has no objects", self.graph_id));
        }
        let mut ids = HashSet::new();
        for n in &self.nodes {
            if !ids.insert(n.node_id) {
                return bad(format!("duplicate object id {}", n.node_id));
            }
            if n.label.is_empty() {
                return bad(format!("object {} has an empty label", n.node_id));
            }
            if n.attributes.iter().any(|a| a.is_empty()) {
                return bad(format!("object {} has an empty attribute", n.node_id));
            }
            match (&n.bbox, self.kind) {
                (Some(_), GraphKind::Text) => {
                    return bad(format!("text-graph object {} carries a bbox", n.node_id))
                }
                (Some(b), GraphKind::Scene) if !b.is_valid() => {
                    return bad(format!("object {} has an invalid bbox", n.node_id))
                }
                _ => {}
            }
        }
        let mut triples = HashSet::new();
        for e in &self.edges {
            for end in [e.source, e.target] {
                if !ids.contains(&end) {
                    return Err(GraphError::DanglingEdge(end));
                }
            }
            if e.source == e.target {
                return bad(format!("self-loop on object {}", e.source));
            }
            if e.relation.is_empty() {
                return bad("empty relation".into());
            }
            if !triples.insert(e) {
                return bad(format!(
                    "duplicate relation ({}, {}, {})",
                    e.source, e.relation, e.target
                ));
            }
        }
        Ok(())
    }

    pub fn node_index(&self) -> HashMap<u32, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.node_id, i)).collect()
    }

    pub fn node(&self, id: u32) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.node_id == id)
    }

    /// Canonical JSON rendering (pretty-printed, two-space indent).
    pub fn to_json(&self) -> String {
        let doc = GraphDocument {
            id: self.graph_id.clone(),
            objects: self
                .nodes
                .iter()
                .map(|n| ObjectDoc {
                    id: n.node_id,
                    label: n.label.clone(),
                    attributes: n.attributes.clone(),
                    bbox: n.bbox.map(|b| BBoxDoc { min: b.min, max: b.max }),
                })
                .collect(),
            relations: self
                .edges
                .iter()
                .map(|e| (e.source, e.relation.clone(), e.target))
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serialization is infallible")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BBoxDoc {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectDoc {
    id: u32,
    label: String,
    #[serde(default)]
    attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<BBoxDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphDocument {
    id: String,
    objects: Vec<ObjectDoc>,
    #[serde(default)]
    relations: Vec<(u32, String, u32)>,
}

/// Shared parser for both graph kinds. Normalizes strings and drops
/// duplicate relation triples.
pub(crate) fn parse_graph(bytes: &[u8], kind: GraphKind) -> Result<SemanticGraph, GraphError> {
    let doc: GraphDocument = serde_json::from_slice(bytes)
        .map_err(|e| GraphError::MalformedDocument(e.to_string()))?;
    let mut nodes = Vec::with_capacity(doc.objects.len());
    for o in doc.objects {
        if kind == GraphKind::Text && o.bbox.is_some() {
            return Err(GraphError::MalformedDocument(format!(
                "text-graph object {} carries a bbox",
                o.id
            )));
        }
        nodes.push(GraphNode {
            node_id: o.id,
            label: normalize_label(&o.label),
            attributes: o.attributes.iter().map(|a| normalize_label(a)).collect(),
            bbox: o.bbox.map(|b| BBox::new(b.min, b.max)),
        });
    }
    let ids: HashSet<u32> = nodes.iter().map(|n| n.node_id).collect();
    let mut seen = HashSet::new();
    let mut edges = Vec::with_capacity(doc.relations.len());
    for (src, rel, dst) in doc.relations {
        for end in [src, dst] {
            if !ids.contains(&end) {
                return Err(GraphError::DanglingEdge(end));
            }
        }
        let edge = GraphEdge { source: src, target: dst, relation: normalize_label(&rel) };
        if seen.insert(edge.clone()) {
            edges.push(edge);
        }
    }
    let g = SemanticGraph { graph_id: doc.id, kind, nodes, edges };
    g.validate()?;
    Ok(g)
}

/// Parses a scene-graph JSON document into a [`GraphKind::Scene`] graph.
pub fn parse_scene_graph(json_document: &[u8]) -> Result<SemanticGraph, GraphError> {
    parse_graph(json_document, GraphKind::Scene)
}

/// Result of [`filter_edges`]: the filtered graph plus how many edges were
/// dropped because an endpoint had no bounding box.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub graph: SemanticGraph,
    pub dropped_without_bbox: usize,
}

/// Keeps the edges whose endpoint boxes are within `tau` meters of each
/// other. Nodes are never removed.
pub fn filter_edges(g: &SemanticGraph, tau: f64) -> Result<FilterOutcome, GraphError> {
    if tau.is_nan() || tau < 0.0 {
        return Err(GraphError::InvalidThreshold(tau));
    }
    if g.kind != GraphKind::Scene {
        return Err(GraphError::NotASceneGraph);
    }
    let boxes: HashMap<u32, Option<BBox>> = g.nodes.iter().map(|n| (n.node_id, n.bbox)).collect();
    let mut dropped_without_bbox = 0;
    let edges = g
        .edges
        .iter()
        .filter(|e| match (boxes[&e.source], boxes[&e.target]) {
            (Some(a), Some(b)) => bbox_distance(&a, &b) <= tau,
            _ => {
                dropped_without_bbox += 1;
                false
            }
        })
        .cloned()
        .collect();
    if dropped_without_bbox > 0 {
        log::warn!(
            "graph {}: dropped {} edges with bbox-less endpoints",
            g.graph_id,
            dropped_without_bbox
        );
    }
    Ok(FilterOutcome {
        graph: SemanticGraph { edges, ..g.clone() },
        dropped_without_bbox,
    })
}

/// Label-level signature of a graph: multiset of (label, sorted attributes)
/// and multiset of (source label, relation, target label).
pub fn label_signature(g: &SemanticGraph) -> (Vec<(String, Vec<String>)>, Vec<(String, String, String)>) {
    let mut nodes: Vec<(String, Vec<String>)> = g
        .nodes
        .iter()
        .map(|n| {
            let attrs: BTreeSet<String> = n.attributes.iter().cloned().collect();
            (n.label.clone(), attrs.into_iter().collect())
        })
        .collect();
    nodes.sort();
    let labels: HashMap<u32, &str> = g.nodes.iter().map(|n| (n.node_id, n.label.as_str())).collect();
    let mut rels: Vec<(String, String, String)> = g
        .edges
        .iter()
        .map(|e| {
            (
                labels[&e.source].to_string(),
                e.relation.clone(),
                labels[&e.target].to_string(),
            )
        })
        .collect();
    rels.sort();
    (nodes, rels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box_at(x: f64, y: f64, z: f64) -> BBox {
        BBox::new([x, y, z], [x + 1.0, y + 1.0, z + 1.0])
    }

    #[test]
    fn minimal_document_parses() {
        let doc = br#"{"id":"s1","objects":[
            {"id":1,"label":"Lamp","attributes":["Red"],"bbox":{"min":[0,0,1],"max":[1,1,2]}},
            {"id":2,"label":"desk","attributes":[],"bbox":{"min":[0,0,0],"max":[1,1,1]}}],
            "relations":[[1,"On",2]]}"#;
        let g = parse_scene_graph(doc).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.nodes[0].label, "lamp");
        assert_eq!(g.nodes[0].attributes, vec!["red"]);
        assert_eq!(g.edges[0].relation, "on");
        assert_eq!(g.kind, GraphKind::Scene);
    }

    #[test]
    fn dangling_edge_is_rejected() {
        let doc = br#"{"id":"s","objects":[{"id":1,"label":"a"}],"relations":[[1,"on",99]]}"#;
        assert!(matches!(parse_scene_graph(doc), Err(GraphError::DanglingEdge(99))));
    }

    #[test]
    fn malformed_documents() {
        for doc in [
            &b"not json"[..],
            br#"{"id":"s","objects":[]}"#,
            br#"{"id":"s","objects":[{"id":1,"label":"  "}]}"#,
            br#"{"id":"s","objects":[{"id":1,"label":"a"},{"id":1,"label":"b"}]}"#,
            br#"{"id":"s","objects":[{"id":1,"label":"a"}],"relations":[[1,"on",1]]}"#,
            br#"{"id":"s","objects":[{"id":1,"label":"a","bbox":{"min":[1,0,0],"max":[0,1,1]}}]}"#,
        ] {
            assert!(
                matches!(parse_scene_graph(doc), Err(GraphError::MalformedDocument(_))),
                "{}",
                String::from_utf8_lossy(doc)
            );
        }
    }

    #[test]
    fn duplicate_triples_and_whitespace_are_normalized() {
        let doc = br#"{"id":"s","objects":[{"id":1,"label":"Coffee   Table"},{"id":2,"label":"rug"}],
            "relations":[[1,"on  top of",2],[1,"On Top Of",2]]}"#;
        let g = parse_scene_graph(doc).unwrap();
        assert_eq!(g.nodes[0].label, "coffee table");
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].relation, "on top of");
    }

    #[test]
    fn bbox_distance_examples() {
        let a = unit_box_at(0.0, 0.0, 0.0);
        assert_eq!(bbox_distance(&a, &a), 0.0);
        assert_eq!(bbox_distance(&a, &unit_box_at(3.0, 0.0, 0.0)), 2.0);
        let d = bbox_distance(&a, &unit_box_at(3.0, 4.0, 0.0));
        assert!((d - 13f64.sqrt()).abs() < 1e-12);
        // overlapping
        assert_eq!(bbox_distance(&a, &unit_box_at(0.5, 0.5, 0.5)), 0.0);
    }

    #[test]
    fn bbox_distance_matches_sampled_surface_points() {
        // closest-point brute force over a grid on both box surfaces
        let a = unit_box_at(0.0, 0.0, 0.0);
        let b = unit_box_at(3.0, 4.0, 0.0);
        let grid = |bx: &BBox| {
            let mut pts = Vec::new();
            let n = 10;
            for i in 0..=n {
                for j in 0..=n {
                    for k in 0..=n {
                        let t = |c: usize, s: usize| bx.min[c] + (bx.max[c] - bx.min[c]) * s as f64 / n as f64;
                        pts.push([t(0, i), t(1, j), t(2, k)]);
                    }
                }
            }
            pts
        };
        let (pa, pb) = (grid(&a), grid(&b));
        let mut best = f64::INFINITY;
        for p in &pa {
            for q in &pb {
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
                best = best.min(d);
            }
        }
        assert!((best - 3.6056).abs() < 1e-4);
        assert!((bbox_distance(&a, &b) - best).abs() < 1e-9);
    }

    fn scene_with_edge_at(offset: f64) -> SemanticGraph {
        SemanticGraph {
            graph_id: "g".into(),
            kind: GraphKind::Scene,
            nodes: vec![
                GraphNode { node_id: 0, label: "a".into(), attributes: vec![], bbox: Some(unit_box_at(0.0, 0.0, 0.0)) },
                GraphNode { node_id: 1, label: "b".into(), attributes: vec![], bbox: Some(unit_box_at(1.0 + offset, 0.0, 0.0)) },
                GraphNode { node_id: 2, label: "c".into(), attributes: vec![], bbox: None },
            ],
            edges: vec![
                GraphEdge { source: 0, target: 1, relation: "next to".into() },
                GraphEdge { source: 2, target: 0, relation: "on".into() },
            ],
        }
    }

    #[test]
    fn filter_removes_distant_and_bboxless_edges() {
        let g = scene_with_edge_at(2.0);
        let out = filter_edges(&g, DEFAULT_EDGE_THRESHOLD).unwrap();
        assert!(out.graph.edges.is_empty());
        assert_eq!(out.dropped_without_bbox, 1);
        assert_eq!(out.graph.nodes.len(), 3);

        let near = filter_edges(&scene_with_edge_at(1.5), 1.5).unwrap();
        assert_eq!(near.graph.edges.len(), 1);
    }

    #[test]
    fn infinite_threshold_keeps_every_edge_with_boxes() {
        let mut g = scene_with_edge_at(10.0);
        g.edges.truncate(1);
        let out = filter_edges(&g, f64::INFINITY).unwrap();
        assert_eq!(out.graph.edges, g.edges);
    }

    #[test]
    fn negative_threshold_and_text_graphs_rejected() {
        let g = scene_with_edge_at(0.0);
        assert!(matches!(filter_edges(&g, -0.1), Err(GraphError::InvalidThreshold(_))));
        let t = SemanticGraph { kind: GraphKind::Text, ..g };
        assert!(matches!(filter_edges(&t, 1.0), Err(GraphError::NotASceneGraph)));
    }
}
