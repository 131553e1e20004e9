//! Async client for the search service.

use ck_core::api::{
    BatchQuery, BatchSearchRequest, BatchSearchResponse, ErrorBody, EvalRequest, EvalResponse, Health, Hit, IndexInfo,
    SearchRequest, SearchResponse,
};
use ck_core::trec::Run;
use reqwest::{Response, StatusCode};
use serde::de::DeserializeOwned;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("request failed: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("service answered {status}: {message}")]
    Api { status: StatusCode, message: String },
}

impl ClientError {
    /// True when the service rejected the request content (4xx).
    pub fn is_rejection(&self) -> bool {
        matches!(self, ClientError::Api { status, .. } if status.is_client_error())
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

async fn decode<T: DeserializeOwned>(resp: Response) -> Result<T> {
    let status = resp.status();
    if status.is_success() {
        return Ok(resp.json().await?);
    }
    let text = resp.text().await?;
    let message = serde_json::from_str::<ErrorBody>(&text).map_or(text, |e| e.error);
    Err(ClientError::Api { status, message })
}

impl Client {
    /// `base` like `http://127.0.0.1:8080`; a trailing slash is ignored.
    pub fn new(base: &str) -> Self {
        Self {
            base: base.trim_end_matches('/').to_string(),
            http: reqwest::Client::new(),
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn health(&self) -> Result<Health> {
        decode(self.http.get(self.url("/health")).send().await?).await
    }

    pub async fn index_info(&self) -> Result<IndexInfo> {
        decode(self.http.get(self.url("/index")).send().await?).await
    }

    pub async fn search(&self, query: &str, k: usize) -> Result<Vec<Hit>> {
        let req = SearchRequest {
            query: query.to_string(),
            k,
        };
        let resp: SearchResponse = decode(self.http.post(self.url("/search")).json(&req).send().await?).await?;
        Ok(resp.hits)
    }

    /// Runs `(qid, text)` queries in one request and returns them as a run.
    pub async fn search_batch(&self, queries: &[(String, String)], k: usize) -> Result<Run> {
        let req = BatchSearchRequest {
            queries: queries
                .iter()
                .map(|(qid, text)| BatchQuery {
                    qid: qid.clone(),
                    text: text.clone(),
                })
                .collect(),
            k,
        };
        let resp: BatchSearchResponse =
            decode(self.http.post(self.url("/search/batch")).json(&req).send().await?).await?;
        Ok(resp.into_run())
    }

    /// Evaluates TREC run text against `qrels` text, or against the
    /// service's own qrels when `None`.
    pub async fn eval(&self, run: &str, qrels: Option<&str>) -> Result<EvalResponse> {
        let req = EvalRequest {
            run: run.to_string(),
            qrels: qrels.map(str::to_string),
        };
        decode(self.http.post(self.url("/eval")).json(&req).send().await?).await
    }
}
