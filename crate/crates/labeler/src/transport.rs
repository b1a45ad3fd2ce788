use std::collections::HashMap;
use std::io::Read;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("request failed: {0}")]
    Request(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no mock response for article `{0}`")]
    MissingFixture(String),
}

/// Sends one prompt and returns the model's raw reply text.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, article_id: &str, prompt: &str) -> Result<String, TransportError>;
}

impl<F> ChatTransport for F
where
    F: Fn(&str, &str) -> Result<String, TransportError> + Send + Sync,
{
    fn complete(&self, article_id: &str, prompt: &str) -> Result<String, TransportError> {
        self(article_id, prompt)
    }
}

/// Replies from a fixed `article_id → response` table.
#[derive(Clone, Debug, Default)]
pub struct MockTransport {
    responses: HashMap<String, String>,
}

impl MockTransport {
    pub fn new(responses: HashMap<String, String>) -> Self {
        MockTransport { responses }
    }

    /// Reads a CSV with `article_id` and `response` (or `label`) columns.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, csv::Error> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let id = headers.iter().position(|h| h == "article_id").unwrap_or(0);
        let resp = headers
            .iter()
            .position(|h| h == "response" || h == "label")
            .unwrap_or(1);
        let mut responses = HashMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            responses.insert(
                rec.get(id).unwrap_or("").to_string(),
                rec.get(resp).unwrap_or("").to_string(),
            );
        }
        Ok(MockTransport { responses })
    }
}

impl ChatTransport for MockTransport {
    fn complete(&self, article_id: &str, _prompt: &str) -> Result<String, TransportError> {
        self.responses
            .get(article_id)
            .cloned()
            .ok_or_else(|| TransportError::MissingFixture(article_id.to_string()))
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [Message<'a>; 1],
    temperature: f64,
}

#[derive(Serialize)]
struct Message<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ReplyMessage,
}

#[derive(Deserialize)]
struct ReplyMessage {
    #[serde(default)]
    content: Option<String>,
}

/// OpenAI-compatible chat-completion client.
pub struct HttpTransport {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    temperature: f64,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(
        endpoint: &str,
        model: &str,
        temperature: f64,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::Request(e.to_string()))?;
        Ok(HttpTransport {
            client,
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            temperature,
            api_key,
        })
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, _article_id: &str, prompt: &str) -> Result<String, TransportError> {
        let body = ChatRequest {
            model: &self.model,
            messages: [Message {
                role: "user",
                content: prompt,
            }],
            temperature: self.temperature,
        };
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| TransportError::Request(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| TransportError::Request(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| TransportError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| TransportError::Malformed("no choices in response".into()))
    }
}
