//! JSON-over-HTTP POST with retry, shared by the remote providers.

use std::time::Duration;

use serde::Serialize;
use serde::de::DeserializeOwned;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(250),
            max_backoff: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            ..Self::default()
        }
    }

    pub(crate) fn backoff(&self, attempt: u32) -> Duration {
        let factor = 2u32.saturating_pow(attempt);
        self.initial_backoff
            .saturating_mul(factor)
            .min(self.max_backoff)
    }
}

pub(crate) fn build_client(timeout: Duration) -> Result<reqwest::Client> {
    reqwest::Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| Error::Config(format!("http client: {e}")))
}

async fn post_once<B: Serialize + ?Sized, R: DeserializeOwned>(
    client: &reqwest::Client,
    url: &str,
    token: Option<&str>,
    body: &B,
) -> Result<R> {
    let mut req = client.post(url).json(body);
    if let Some(token) = token {
        req = req.bearer_auth(token);
    }
    let resp = req.send().await.map_err(map_reqwest)?;
    let status = resp.status();
    if status.as_u16() == 429 {
        return Err(Error::RateLimited);
    }
    if !status.is_success() {
        let message = resp.text().await.unwrap_or_default();
        return Err(Error::Upstream {
            status: Some(status.as_u16()),
            message,
        });
    }
    let bytes = resp.bytes().await.map_err(map_reqwest)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Upstream {
        status: Some(status.as_u16()),
        message: format!("undecodable response body: {e}"),
    })
}

/// POSTs `body`, retrying transient failures with exponential backoff.
pub(crate) async fn post_json<B: Serialize + ?Sized, R: DeserializeOwned>(
    client: &reqwest::Client,
    url: &str,
    token: Option<&str>,
    body: &B,
    retry: &RetryPolicy,
) -> Result<R> {
    let mut attempt = 0;
    loop {
        match post_once(client, url, token, body).await {
            Ok(r) => return Ok(r),
            Err(e) if e.is_transient() => {
                if attempt >= retry.max_retries {
                    return Err(Error::ExhaustedRetries {
                        attempts: attempt + 1,
                        last: Box::new(e),
                    });
                }
                tracing::debug!(url, attempt, error = %e, "retrying");
                tokio::time::sleep(retry.backoff(attempt)).await;
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn map_reqwest(e: reqwest::Error) -> Error {
    if e.is_timeout() {
        Error::Timeout
    } else {
        Error::Upstream {
            status: e.status().map(|s| s.as_u16()),
            message: e.to_string(),
        }
    }
}
