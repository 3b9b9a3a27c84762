//! Natural-language description → text-graph.
//!
//! Two routes: an LLM behind the narrow [`llm::LlmClient`] interface, and a
//! deterministic rule-based extractor driven by relation/attribute lexicons.

pub mod llm;
pub mod rules;

use thiserror::Error;

use crate::graph::{parse_graph, GraphError, GraphKind, SemanticGraph};

pub use llm::{extract_llm, HttpLlmClient, LlmClient, LlmConfig, LlmError, PromptTemplate};
pub use rules::{extract_rules, Lexicon, RuleExtractor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractionSource {
    Llm,
    Rules,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionResult {
    pub graph: SemanticGraph,
    pub source: ExtractionSource,
    pub raw_json: String,
}

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("description is empty")]
    EmptyDescription,
    #[error("no objects could be extracted")]
    EmptyGraph,
    #[error("LLM endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("LLM response could not be parsed as a text-graph: {0}")]
    UnparsableResponse(String),
    #[error(transparent)]
    Lexicon(#[from] std::io::Error),
}

/// Parses a text-graph JSON document (same schema as scene graphs, without
/// bounding boxes).
pub fn parse_text_graph(json_document: &[u8]) -> Result<SemanticGraph, GraphError> {
    parse_graph(json_document, GraphKind::Text)
}
