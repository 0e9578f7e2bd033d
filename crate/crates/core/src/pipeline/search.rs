use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusIndex, Document};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("search provider `{provider}` failed: {message}")]
pub struct SearchError {
    pub provider: String,
    pub message: String,
}

/// Source of documents for a query, best first.
pub trait SearchProvider: Send + Sync {
    fn name(&self) -> &str;

    fn search(&self, query: &str, n: usize) -> Result<Vec<Document>, SearchError>;
}

impl<P: SearchProvider + ?Sized> SearchProvider for Arc<P> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn search(&self, query: &str, n: usize) -> Result<Vec<Document>, SearchError> {
        (**self).search(query, n)
    }
}

/// BM25 search over a local corpus index.
#[derive(Debug, Clone)]
pub struct LocalIndexProvider {
    index: Arc<CorpusIndex>,
}

impl LocalIndexProvider {
    pub fn new(index: Arc<CorpusIndex>) -> Self {
        Self { index }
    }

    pub fn index(&self) -> &CorpusIndex {
        &self.index
    }
}

impl SearchProvider for LocalIndexProvider {
    fn name(&self) -> &str {
        "local-index"
    }

    fn search(&self, query: &str, n: usize) -> Result<Vec<Document>, SearchError> {
        Ok(self
            .index
            .lexical_search(query, n)
            .into_iter()
            .filter_map(|hit| self.index.document(&hit.doc_id).cloned())
            .collect())
    }
}

/// Returns the same documents for every query.
#[derive(Debug, Clone, Default)]
pub struct StaticProvider {
    docs: Vec<Document>,
}

impl StaticProvider {
    pub fn new(docs: Vec<Document>) -> Self {
        Self { docs }
    }
}

impl SearchProvider for StaticProvider {
    fn name(&self) -> &str {
        "static"
    }

    fn search(&self, _query: &str, n: usize) -> Result<Vec<Document>, SearchError> {
        Ok(self.docs.iter().take(n).cloned().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteSearchConfig {
    pub endpoint: String,
    /// Environment variable holding a bearer token.
    pub auth_env: Option<String>,
    pub timeout_ms: u64,
}

impl Default for RemoteSearchConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            auth_env: Some("SEEKER_SEARCH_TOKEN".into()),
            timeout_ms: 10_000,
        }
    }
}

#[derive(Serialize)]
struct RemoteQuery<'a> {
    q: &'a str,
    n: usize,
}

#[derive(Deserialize)]
struct RemoteResponse {
    response: Vec<RemoteHit>,
}

#[derive(Deserialize)]
struct RemoteHit {
    #[serde(default)]
    url: String,
    #[serde(default)]
    title: String,
    #[serde(default)]
    content: String,
}

/// Search server speaking `POST {q, n}` → `{response: [{url, title, content}]}`.
pub struct RemoteSearchProvider {
    config: RemoteSearchConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl RemoteSearchProvider {
    pub fn new(config: RemoteSearchConfig) -> Self {
        let token = config.auth_env.as_deref().and_then(|v| std::env::var(v).ok());
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, token, agent }
    }

    fn fail(&self, message: impl ToString) -> SearchError {
        SearchError {
            provider: self.name().to_string(),
            message: message.to_string(),
        }
    }
}

impl SearchProvider for RemoteSearchProvider {
    fn name(&self) -> &str {
        "remote"
    }

    fn search(&self, query: &str, n: usize) -> Result<Vec<Document>, SearchError> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(RemoteQuery { q: query, n })
            .map_err(|e| self.fail(e))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| self.fail(e))?;
        if !(200..300).contains(&status) {
            return Err(self.fail(format!("status {status}: {body}")));
        }
        let parsed: RemoteResponse = serde_json::from_str(&body).map_err(|e| self.fail(e))?;
        Ok(parsed
            .response
            .into_iter()
            .enumerate()
            .map(|(i, h)| {
                let id = if h.url.is_empty() { format!("remote-{i}") } else { h.url.clone() };
                Document::new(id, h.url, h.title, h.content)
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn serve_once(status: &'static str, body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/search", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut req = vec![0; len];
            reader.read_exact(&mut req).unwrap();
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
            String::from_utf8(req).unwrap()
        });
        (url, handle)
    }

    #[test]
    fn remote_provider_round_trip() {
        let (url, handle) = serve_once(
            "200 OK",
            r#"{"response":[{"url":"https://www.a.org/x","title":"A","content":"Alpha text."},{"title":"B","content":"Beta."}]}"#,
        );
        let provider = RemoteSearchProvider::new(RemoteSearchConfig {
            endpoint: url,
            auth_env: None,
            ..Default::default()
        });
        let docs = provider.search("alpha", 7).unwrap();
        let sent: serde_json::Value = serde_json::from_str(&handle.join().unwrap()).unwrap();
        assert_eq!(sent, serde_json::json!({"q": "alpha", "n": 7}));
        assert_eq!(docs.len(), 2);
        assert_eq!((docs[0].id.as_str(), docs[0].domain.as_str()), ("https://www.a.org/x", "a.org"));
        assert_eq!(docs[1].id, "remote-1");
    }

    #[test]
    fn remote_provider_errors_carry_name() {
        let (url, handle) = serve_once("500 Internal Server Error", "down");
        let provider = RemoteSearchProvider::new(RemoteSearchConfig {
            endpoint: url,
            auth_env: None,
            ..Default::default()
        });
        let err = provider.search("q", 3).unwrap_err();
        handle.join().unwrap();
        assert_eq!(err.provider, "remote");
        assert!(err.message.contains("500"));
    }

    #[test]
    fn local_provider_matches_lexical_search() {
        let docs = vec![
            Document::new("a", "https://a.org", "A", "Cats purr softly. Dogs bark."),
            Document::new("b", "https://b.org", "B", "Cats and dogs play."),
            Document::new("c", "https://c.org", "C", "Fish swim."),
        ];
        let index = Arc::new(CorpusIndex::build(docs).unwrap());
        let provider = LocalIndexProvider::new(index.clone());
        let got: Vec<String> = provider.search("cats dogs", 5).unwrap().into_iter().map(|d| d.id).collect();
        let want: Vec<String> = index.lexical_search("cats dogs", 5).into_iter().map(|h| h.doc_id).collect();
        assert_eq!(got, want);
        assert!(provider.search("zebra", 5).unwrap().is_empty());
    }
}
