use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::extract::SimilarityScorer;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("bad response: {0}")]
    Decode(String),
    #[error("reading image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no recorded output for item `{item_id}` template {template_id}")]
    Missing { item_id: String, template_id: u64 },
    #[error("{0}")]
    Other(String),
}

/// Everything a client may need to answer one prompt.
#[derive(Debug, Clone, Copy)]
pub struct QueryRequest<'a> {
    pub item_id: &'a str,
    pub template_id: u64,
    pub prompt: &'a str,
    pub image: Option<&'a Path>,
}

/// A model that turns a prompt (and optional image) into text.
pub trait ModelClient: Send + Sync {
    fn query(&self, request: &QueryRequest<'_>) -> Result<String, ClientError>;
}

impl<C: ModelClient + ?Sized> ModelClient for &C {
    fn query(&self, request: &QueryRequest<'_>) -> Result<String, ClientError> {
        (**self).query(request)
    }
}

impl<C: ModelClient + ?Sized> ModelClient for Box<C> {
    fn query(&self, request: &QueryRequest<'_>) -> Result<String, ClientError> {
        (**self).query(request)
    }
}

type Responder = dyn Fn(&QueryRequest<'_>) -> Result<String, ClientError> + Send + Sync;

/// Deterministic in-process client for tests and dry runs.
pub struct MockClient {
    respond: Box<Responder>,
    calls: AtomicUsize,
}

impl MockClient {
    pub fn from_fn<F>(f: F) -> Self
    where
        F: Fn(&QueryRequest<'_>) -> Result<String, ClientError> + Send + Sync + 'static,
    {
        MockClient {
            respond: Box::new(f),
            calls: AtomicUsize::new(0),
        }
    }

    /// Always answers `text`.
    pub fn constant(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::from_fn(move |_| Ok(text.clone()))
    }

    /// Fails every call.
    pub fn failing() -> Self {
        Self::from_fn(|_| Err(ClientError::Other("mock failure".into())))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl ModelClient for MockClient {
    fn query(&self, request: &QueryRequest<'_>) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        (self.respond)(request)
    }
}

/// One line of a raw-output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawOutput {
    pub item_id: String,
    pub template_id: u64,
    pub output: String,
}

/// Answers from a previously recorded raw-output file.
#[derive(Debug, Clone, Default)]
pub struct ReplayClient {
    outputs: HashMap<(String, u64), String>,
}

impl ReplayClient {
    pub fn new(records: impl IntoIterator<Item = RawOutput>) -> Self {
        ReplayClient {
            outputs: records
                .into_iter()
                .map(|r| ((r.item_id, r.template_id), r.output))
                .collect(),
        }
    }

    pub fn load(path: &Path) -> crate::error::Result<Self> {
        Ok(Self::new(super::read_raw_outputs(path)?))
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }
}

impl ModelClient for ReplayClient {
    fn query(&self, request: &QueryRequest<'_>) -> Result<String, ClientError> {
        self.outputs
            .get(&(request.item_id.to_owned(), request.template_id))
            .cloned()
            .ok_or_else(|| ClientError::Missing {
                item_id: request.item_id.to_owned(),
                template_id: request.template_id,
            })
    }
}

#[derive(Debug, Clone)]
pub struct HttpClientConfig {
    pub endpoint: String,
    pub timeout: Duration,
    /// Relative image paths are resolved against this directory.
    pub image_root: Option<PathBuf>,
}

impl HttpClientConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpClientConfig {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(60),
            image_root: None,
        }
    }
}

#[derive(Serialize)]
struct PromptBody<'a> {
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image: Option<String>,
}

#[derive(Deserialize)]
struct TextBody {
    text: String,
}

/// Remote model behind `POST {"prompt", "image"?} -> {"text"}`. Images are
/// sent base64 encoded.
pub struct HttpClient {
    config: HttpClientConfig,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(config: HttpClientConfig) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(HttpClient { config, http })
    }

    fn encode_image(&self, path: &Path) -> Result<String, ClientError> {
        let full = match &self.config.image_root {
            Some(root) if path.is_relative() => root.join(path),
            _ => path.to_path_buf(),
        };
        let bytes = std::fs::read(&full).map_err(|source| ClientError::Image {
            path: full.clone(),
            source,
        })?;
        Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
    }
}

fn post_json<B: Serialize, R: for<'de> Deserialize<'de>>(
    http: &reqwest::blocking::Client,
    endpoint: &str,
    body: &B,
) -> Result<R, ClientError> {
    let resp = http
        .post(endpoint)
        .json(body)
        .send()
        .map_err(|e| ClientError::Transport(e.to_string()))?;
    let status = resp.status();
    if !status.is_success() {
        let body = resp.text().unwrap_or_default();
        return Err(ClientError::Status {
            status: status.as_u16(),
            body,
        });
    }
    resp.json::<R>()
        .map_err(|e| ClientError::Decode(e.to_string()))
}

impl ModelClient for HttpClient {
    fn query(&self, request: &QueryRequest<'_>) -> Result<String, ClientError> {
        let image = request.image.map(|p| self.encode_image(p)).transpose()?;
        let body = PromptBody {
            prompt: request.prompt,
            image,
        };
        let reply: TextBody = post_json(&self.http, &self.config.endpoint, &body)?;
        Ok(reply.text)
    }
}

#[derive(Serialize)]
struct EmbedBody<'a> {
    texts: Vec<&'a str>,
}

#[derive(Deserialize)]
struct EmbedReply {
    embeddings: Vec<Vec<f64>>,
}

/// Similarity through an embeddings endpoint:
/// `POST {"texts": [...]} -> {"embeddings": [[...], ...]}`, one vector per
/// text. The first text is the model output, the rest are the choices.
pub struct EmbeddingScorer {
    endpoint: String,
    http: reqwest::blocking::Client,
}

impl EmbeddingScorer {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, ClientError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ClientError::Transport(e.to_string()))?;
        Ok(EmbeddingScorer {
            endpoint: endpoint.into(),
            http,
        })
    }
}

fn dense_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

impl SimilarityScorer for EmbeddingScorer {
    fn scores(&self, output: &str, choices: &[String]) -> Result<Vec<f64>, ClientError> {
        let texts = std::iter::once(output)
            .chain(choices.iter().map(String::as_str))
            .collect();
        let reply: EmbedReply = post_json(&self.http, &self.endpoint, &EmbedBody { texts })?;
        if reply.embeddings.len() != choices.len() + 1 {
            return Err(ClientError::Decode(format!(
                "expected {} embeddings, got {}",
                choices.len() + 1,
                reply.embeddings.len()
            )));
        }
        let (out, rest) = reply.embeddings.split_first().expect("nonempty");
        Ok(rest.iter().map(|e| dense_cosine(out, e)).collect())
    }
}
