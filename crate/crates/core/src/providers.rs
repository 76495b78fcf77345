//! Blocking JSON-over-HTTP clients for the external provider slots.
//!
//! Each stage that can be delegated (rewriting, intent, embedding, generation,
//! product search) defines its own trait next to the stage; the HTTP-backed
//! implementations all go through [`JsonEndpoint`].

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("provider timed out after {0:?}")]
    Timeout(Duration),
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    #[error("provider returned an invalid reply: {0}")]
    InvalidReply(String),
}

#[derive(Debug, Clone)]
pub struct JsonEndpoint {
    url: String,
    timeout: Duration,
    agent: ureq::Agent,
}

impl JsonEndpoint {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self {
            url: url.into(),
            timeout,
            agent,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn post<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        body: &Req,
    ) -> Result<Resp, ProviderError> {
        let reply = self
            .agent
            .post(&self.url)
            .send_json(body)
            .map_err(|e| self.classify(e))?;
        reply.into_json().map_err(|e| self.classify_io(e))
    }

    pub fn get<Resp: DeserializeOwned>(
        &self,
        params: &[(&str, &str)],
    ) -> Result<Resp, ProviderError> {
        let mut req = self.agent.get(&self.url);
        for (k, v) in params {
            req = req.query(k, v);
        }
        let reply = req.call().map_err(|e| self.classify(e))?;
        reply.into_json().map_err(|e| self.classify_io(e))
    }

    fn classify(&self, e: ureq::Error) -> ProviderError {
        match e {
            ureq::Error::Status(code, _) => {
                ProviderError::Unavailable(format!("{} returned HTTP {code}", self.url))
            }
            ureq::Error::Transport(t) => {
                let msg = t.to_string();
                if is_timeout(&msg) {
                    ProviderError::Timeout(self.timeout)
                } else {
                    ProviderError::Unavailable(msg)
                }
            }
        }
    }

    fn classify_io(&self, e: std::io::Error) -> ProviderError {
        if e.kind() == std::io::ErrorKind::TimedOut || e.kind() == std::io::ErrorKind::WouldBlock {
            ProviderError::Timeout(self.timeout)
        } else {
            ProviderError::InvalidReply(e.to_string())
        }
    }
}

fn is_timeout(msg: &str) -> bool {
    let m = msg.to_ascii_lowercase();
    m.contains("timed out") || m.contains("timeout") || m.contains("would block")
}
