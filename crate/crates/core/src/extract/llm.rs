//! LLM-backed extraction through an OpenAI-compatible chat-completions API.

use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use super::{ExtractError, ExtractionResult, ExtractionSource};
use crate::graph::{parse_graph, GraphError, GraphKind};

const DEFAULT_TEMPLATE: &str = include_str!("../../data/prompt_template.txt");

pub const DEFAULT_API_KEY_ENV: &str = "SG_LLM_API_KEY";

const REPAIR_PROMPT: &str = "Your previous reply could not be parsed. Reply again with only the JSON object, \
following the schema exactly, with no surrounding text.";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("bad response: {0}")]
    BadResponse(String),
}

/// One chat message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: &'static str,
    pub content: String,
}

/// The narrow interface extraction needs from a language model.
pub trait LlmClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError>;
}

/// System and user prompt sections; `{description}` in the user section is
/// replaced with the description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    /// Parses a template file with `[system]` and `[user]` section headers.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut system = None;
        let mut user = None;
        let mut current: Option<&mut Option<String>> = None;
        for line in text.lines() {
            match line.trim() {
                "[system]" => current = Some(&mut system),
                "[user]" => current = Some(&mut user),
                _ => {
                    if let Some(slot) = current.as_deref_mut() {
                        let s = slot.get_or_insert_with(String::new);
                        s.push_str(line);
                        s.push('\n');
                    }
                }
            }
        }
        match (system, user) {
            (Some(s), Some(u)) if u.contains("{description}") => {
                Ok(Self { system: s.trim().to_string(), user: u.trim().to_string() })
            }
            (_, Some(_)) => Err("[user] section must contain {description}".into()),
            _ => Err("template needs [system] and [user] sections".into()),
        }
    }

    pub fn render(&self, description: &str) -> Vec<ChatMessage> {
        vec![
            ChatMessage { role: "system", content: self.system.clone() },
            ChatMessage { role: "user", content: self.user.replace("{description}", description) },
        ]
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmConfig {
    /// Base URL; requests go to `<base_url>/chat/completions`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout: Duration,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout: Duration::from_secs(60),
        }
    }
}

pub struct HttpLlmClient {
    config: LlmConfig,
    agent: ureq::Agent,
}

impl HttpLlmClient {
    pub fn new(config: LlmConfig) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(config.timeout)).build().into();
        Self { config, agent }
    }
}

impl LlmClient for HttpLlmClient {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": messages.iter().map(|m| json!({"role": m.role, "content": m.content})).collect::<Vec<_>>(),
        });
        let mut req = self.agent.post(&url);
        if let Ok(key) = std::env::var(&self.config.api_key_env) {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| LlmError::Transport(e.to_string()))?;
        let v: Value = resp.body_mut().read_json().map_err(|e| LlmError::BadResponse(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| LlmError::BadResponse("missing choices[0].message.content".into()))
    }
}

/// Pulls the outermost JSON object out of a reply (tolerates code fences and
/// surrounding prose) and parses it as a text-graph.
fn parse_reply(reply: &str, graph_id: &str) -> Result<crate::graph::SemanticGraph, ExtractError> {
    let (start, end) = match (reply.find('{'), reply.rfind('}')) {
        (Some(s), Some(e)) if s < e => (s, e),
        _ => return Err(ExtractError::UnparsableResponse("no JSON object in reply".into())),
    };
    let mut v: Value = serde_json::from_str(&reply[start..=end])
        .map_err(|e| ExtractError::UnparsableResponse(e.to_string()))?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| ExtractError::UnparsableResponse("reply is not a JSON object".into()))?;
    obj.insert("id".into(), Value::String(graph_id.to_string()));
    obj.entry("relations").or_insert_with(|| json!([]));
    if obj.get("objects").and_then(Value::as_array).is_some_and(|a| a.is_empty()) {
        return Err(ExtractError::EmptyGraph);
    }
    let bytes = serde_json::to_vec(&v).expect("re-serializing a parsed value");
    parse_graph(&bytes, GraphKind::Text).map_err(|e| match e {
        GraphError::MalformedDocument(m) => ExtractError::UnparsableResponse(m),
        other => ExtractError::UnparsableResponse(other.to_string()),
    })
}

/// Sends the prompt, parses the JSON reply, and retries once with a repair
/// prompt if the first reply does not parse.
pub fn extract_llm(
    client: &dyn LlmClient,
    template: &PromptTemplate,
    graph_id: &str,
    description: &str,
) -> Result<ExtractionResult, ExtractError> {
    if description.trim().is_empty() {
        return Err(ExtractError::EmptyDescription);
    }
    let mut messages = template.render(description);
    let mut last_err = None;
    for attempt in 0..2 {
        let reply = client.complete(&messages).map_err(|e| match e {
            LlmError::Transport(m) => ExtractError::EndpointUnavailable(m),
            LlmError::BadResponse(m) => ExtractError::UnparsableResponse(m),
        })?;
        match parse_reply(&reply, graph_id) {
            Ok(graph) => {
                let raw_json = graph.to_json();
                return Ok(ExtractionResult { graph, source: ExtractionSource::Llm, raw_json });
            }
            Err(ExtractError::EmptyGraph) => return Err(ExtractError::EmptyGraph),
            Err(e) => {
                log::warn!("LLM reply attempt {attempt} unparsable: {e}");
                messages.push(ChatMessage { role: "assistant", content: reply });
                messages.push(ChatMessage { role: "user", content: REPAIR_PROMPT.into() });
                last_err = Some(e);
            }
        }
    }
    Err(last_err.expect("loop ran"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    struct Canned {
        replies: RefCell<Vec<String>>,
        seen: RefCell<Vec<Vec<ChatMessage>>>,
    }

    impl Canned {
        fn new(replies: &[&str]) -> Self {
            Self { replies: RefCell::new(replies.iter().rev().map(|s| s.to_string()).collect()), seen: RefCell::default() }
        }
    }

    impl LlmClient for Canned {
        fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
            self.seen.borrow_mut().push(messages.to_vec());
            self.replies.borrow_mut().pop().ok_or_else(|| LlmError::Transport("no more replies".into()))
        }
    }

    const CHAIR_REPLY: &str = r#"{"objects":[{"id":1,"label":"chair","attributes":["wooden"]},{"id":2,"label":"table","attributes":[]}],"relations":[[1,"next to",2]]}"#;

    #[test]
    fn parses_reply_into_text_graph() {
        let client = Canned::new(&[CHAIR_REPLY]);
        let r = extract_llm(&client, &PromptTemplate::default(), "q", "There is a wooden chair next to a table.").unwrap();
        assert_eq!(r.source, ExtractionSource::Llm);
        assert_eq!(r.graph.nodes[0].label, "chair");
        assert_eq!(r.graph.nodes[0].attributes, vec!["wooden"]);
        assert_eq!(r.graph.edges[0].relation, "next to");
        let prompt = &client.seen.borrow()[0];
        assert!(prompt[1].content.contains("There is a wooden chair next to a table."));
        assert!(prompt[0].content.contains("JSON"));
    }

    #[test]
    fn repairs_once_then_gives_up() {
        let client = Canned::new(&["Sure! Here are the objects: a chair.", CHAIR_REPLY]);
        let r = extract_llm(&client, &PromptTemplate::default(), "q", "a chair next to a table");
        assert!(r.is_ok());
        assert_eq!(client.seen.borrow()[1].len(), 4);

        let client = Canned::new(&["prose", "more prose"]);
        let r = extract_llm(&client, &PromptTemplate::default(), "q", "a chair next to a table");
        assert!(matches!(r, Err(ExtractError::UnparsableResponse(_))));
    }

    #[test]
    fn code_fenced_reply_and_empty_objects() {
        let fenced = format!("```json\n{CHAIR_REPLY}\n```");
        let client = Canned::new(&[&fenced]);
        assert!(extract_llm(&client, &PromptTemplate::default(), "q", "x").is_ok());
        let client = Canned::new(&[r#"{"objects":[],"relations":[]}"#]);
        assert!(matches!(
            extract_llm(&client, &PromptTemplate::default(), "q", "x"),
            Err(ExtractError::EmptyGraph)
        ));
    }

    #[test]
    fn empty_description_and_unreachable_endpoint() {
        let client = Canned::new(&[]);
        assert!(matches!(
            extract_llm(&client, &PromptTemplate::default(), "q", ""),
            Err(ExtractError::EmptyDescription)
        ));
        assert!(matches!(
            extract_llm(&client, &PromptTemplate::default(), "q", "a lamp"),
            Err(ExtractError::EndpointUnavailable(_))
        ));
    }

    #[test]
    fn template_parsing() {
        let t = PromptTemplate::parse("[system]\nbe terse\n[user]\nD: {description}\n").unwrap();
        assert_eq!(t.system, "be terse");
        assert_eq!(t.render("a sofa")[1].content, "D: a sofa");
        assert!(PromptTemplate::parse("[system]\nx\n").is_err());
        assert!(PromptTemplate::parse("[system]\nx\n[user]\nno placeholder\n").is_err());
    }

    #[test]
    fn http_client_speaks_chat_completions() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut content_length = 0;
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    content_length = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; content_length];
            reader.read_exact(&mut body).unwrap();
            let reply = json!({"choices": [{"message": {"role": "assistant", "content": CHAIR_REPLY}}]}).to_string();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            )
            .unwrap();
            (request_line, String::from_utf8(body).unwrap())
        });
        let client = HttpLlmClient::new(LlmConfig {
            base_url: format!("http://{addr}/v1"),
            model: "test-model".into(),
            api_key_env: "SG_TEST_UNSET_KEY".into(),
            timeout: Duration::from_secs(10),
        });
        let r = extract_llm(&client, &PromptTemplate::default(), "q", "There is a wooden chair next to a table.").unwrap();
        assert_eq!(r.graph.nodes.len(), 2);
        let (request_line, body) = server.join().unwrap();
        assert!(request_line.starts_with("POST /v1/chat/completions"));
        let body: Value = serde_json::from_str(&body).unwrap();
        assert_eq!(body["model"], "test-model");
        assert_eq!(body["messages"][0]["role"], "system");
    }

    #[test]
    fn refused_connection_is_endpoint_unavailable() {
        let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
        let client = HttpLlmClient::new(LlmConfig {
            base_url: format!("http://{addr}"),
            timeout: Duration::from_secs(5),
            ..Default::default()
        });
        assert!(matches!(
            extract_llm(&client, &PromptTemplate::default(), "q", "a lamp on a desk"),
            Err(ExtractError::EndpointUnavailable(_))
        ));
    }
}
