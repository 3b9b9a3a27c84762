//! Deterministic lexicon-driven extractor.
//!
//! Sentences are split on `.`, `;`, `!` and `?`. Within a sentence the
//! earliest (then longest) relation phrase splits it into a subject and an
//! object noun phrase; a leading "there is"/"there are" with no relation
//! yields a lone node. In each noun phrase determiners are dropped, leading
//! lexicon adjectives become attributes and the remainder is the label.
//! Mentions with the same label within one description share a node.

use std::collections::HashSet;
use std::path::Path;

use super::{ExtractError, ExtractionResult, ExtractionSource};
use crate::graph::{GraphEdge, GraphKind, GraphNode, SemanticGraph};

const DEFAULT_RELATIONS: &str = include_str!("../../data/relations.txt");
const DEFAULT_ATTRIBUTES: &str = include_str!("../../data/attributes.txt");

const DETERMINERS: &[&str] = &["a", "an", "the", "some", "this", "that", "another"];
const COPULAS: &[&str] = &["is", "are", "sits", "stands", "placed", "located"];

#[derive(Debug, Clone)]
pub struct Lexicon {
    /// Tokenized relation phrases, sorted longest first.
    relations: Vec<Vec<String>>,
    attributes: HashSet<String>,
}

fn lexicon_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'))
}

impl Lexicon {
    pub fn from_strs(relations: &str, attributes: &str) -> Self {
        let mut rels: Vec<Vec<String>> = lexicon_lines(relations)
            .map(|l| l.split_whitespace().map(|w| w.to_lowercase()).collect())
            .collect();
        rels.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        rels.dedup();
        Self { relations: rels, attributes: lexicon_lines(attributes).map(|l| l.to_lowercase()).collect() }
    }

    pub fn load(relations: impl AsRef<Path>, attributes: impl AsRef<Path>) -> Result<Self, ExtractError> {
        Ok(Self::from_strs(&std::fs::read_to_string(relations)?, &std::fs::read_to_string(attributes)?))
    }

    pub fn is_attribute(&self, word: &str) -> bool {
        self.attributes.contains(word)
    }

    pub fn relations(&self) -> impl Iterator<Item = String> + '_ {
        self.relations.iter().map(|r| r.join(" "))
    }

    /// Longest relation starting at `pos`, as a token count.
    fn relation_at(&self, tokens: &[String], pos: usize) -> Option<usize> {
        self.relations
            .iter()
            .find(|r| tokens.len() >= pos + r.len() && tokens[pos..pos + r.len()] == r[..])
            .map(|r| r.len())
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::from_strs(DEFAULT_RELATIONS, DEFAULT_ATTRIBUTES)
    }
}

fn tokenize(sentence: &str) -> Vec<String> {
    sentence
        .split(|c: char| c.is_whitespace() || c == ',')
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
struct NounPhrase {
    label: String,
    attributes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RuleExtractor {
    lexicon: Lexicon,
}

impl Default for RuleExtractor {
    fn default() -> Self {
        Self::new(Lexicon::default())
    }
}

impl RuleExtractor {
    pub fn new(lexicon: Lexicon) -> Self {
        Self { lexicon }
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    fn noun_phrase(&self, tokens: &[String]) -> Option<NounPhrase> {
        let mut words: Vec<&str> = tokens.iter().map(String::as_str).collect();
        while words.last().is_some_and(|w| COPULAS.contains(w)) {
            words.pop();
        }
        let mut rest = words.into_iter().filter(|w| !DETERMINERS.contains(w)).peekable();
        let mut attributes = Vec::new();
        while let Some(w) = rest.peek() {
            if !self.lexicon.is_attribute(w) {
                break;
            }
            attributes.push(rest.next().unwrap().to_string());
        }
        let label = rest.collect::<Vec<_>>().join(" ");
        (!label.is_empty()).then_some(NounPhrase { label, attributes })
    }

    /// Extracts a text-graph with the given id.
    pub fn extract_with_id(&self, graph_id: &str, description: &str) -> Result<ExtractionResult, ExtractError> {
        if description.trim().is_empty() {
            return Err(ExtractError::EmptyDescription);
        }
        let mut nodes: Vec<GraphNode> = Vec::new();
        let mut edges: Vec<GraphEdge> = Vec::new();
        let intern = |np: NounPhrase, nodes: &mut Vec<GraphNode>| -> u32 {
            if let Some(n) = nodes.iter_mut().find(|n| n.label == np.label) {
                for a in np.attributes {
                    if !n.attributes.contains(&a) {
                        n.attributes.push(a);
                    }
                }
                return n.node_id;
            }
            let id = nodes.len() as u32;
            let mut attributes = Vec::new();
            for a in np.attributes {
                if !attributes.contains(&a) {
                    attributes.push(a);
                }
            }
            nodes.push(GraphNode { node_id: id, label: np.label, attributes, bbox: None });
            id
        };
        for sentence in description.split(['.', ';', '!', '?']) {
            let mut tokens = tokenize(sentence);
            let existential = tokens.len() >= 2 && tokens[0] == "there" && matches!(tokens[1].as_str(), "is" | "are");
            if existential {
                tokens.drain(..2);
            }
            let relation = (1..tokens.len()).find_map(|p| self.lexicon.relation_at(&tokens, p).map(|len| (p, len)));
            match relation {
                Some((p, len)) => {
                    let (subj, obj) = (self.noun_phrase(&tokens[..p]), self.noun_phrase(&tokens[p + len..]));
                    if let (Some(subj), Some(obj)) = (subj, obj) {
                        if subj.label == obj.label {
                            continue;
                        }
                        let s = intern(subj, &mut nodes);
                        let t = intern(obj, &mut nodes);
                        let edge = GraphEdge { source: s, target: t, relation: tokens[p..p + len].join(" ") };
                        if !edges.contains(&edge) {
                            edges.push(edge);
                        }
                    }
                }
                None if existential => {
                    if let Some(np) = self.noun_phrase(&tokens) {
                        intern(np, &mut nodes);
                    }
                }
                None => {}
            }
        }
        if nodes.is_empty() {
            return Err(ExtractError::EmptyGraph);
        }
        let graph = SemanticGraph { graph_id: graph_id.to_string(), kind: GraphKind::Text, nodes, edges };
        let raw_json = graph.to_json();
        Ok(ExtractionResult { graph, source: ExtractionSource::Rules, raw_json })
    }
}

/// Rule-based extraction with the bundled lexicons; the graph id is `"query"`.
pub fn extract_rules(description: &str) -> Result<ExtractionResult, ExtractError> {
    RuleExtractor::default().extract_with_id("query", description)
}
