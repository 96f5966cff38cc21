//! HTTP front end for the node API, and a blocking client for the tools.

use std::io;
use std::net::TcpListener;
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use airchain_core::api::{Api, ApiRequest, Method, API_KEY_HEADER};
use airchain_core::ingest::{EndpointResponse, SubmitEndpoint};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::Router;

async fn route(State(api): State<Arc<Api>>, method: axum::http::Method, uri: Uri, headers: HeaderMap, body: Bytes) -> Response {
    let method = match method {
        axum::http::Method::GET => Method::Get,
        axum::http::Method::POST => Method::Post,
        axum::http::Method::DELETE => Method::Delete,
        _ => return StatusCode::METHOD_NOT_ALLOWED.into_response(),
    };
    let req = ApiRequest {
        method,
        target: uri.path_and_query().map(|p| p.as_str().to_string()).unwrap_or_else(|| "/".into()),
        api_key: headers.get(API_KEY_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string),
        body: body.to_vec(),
    };
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs() as i64).unwrap_or(0);
    let resp = api.handle(&req, now);
    let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, [(header::CONTENT_TYPE, "application/json")], resp.body).into_response()
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Serves `api` until SIGINT or SIGTERM, then calls `on_shutdown`.
pub fn serve(listener: TcpListener, api: Arc<Api>, on_shutdown: impl FnOnce()) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    let result = rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        let app = Router::new().fallback(route).with_state(api);
        axum::serve(listener, app).with_graceful_shutdown(shutdown_signal()).await
    });
    on_shutdown();
    result
}

/// Blocking client for a node's API.
pub struct Client {
    base: String,
    http: reqwest::blocking::Client,
}

impl Client {
    pub fn new(endpoint: &str) -> Result<Self, String> {
        let base = if endpoint.contains("://") { endpoint.to_string() } else { format!("http://{endpoint}") };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(10))
            .build()
            .map_err(|e| e.to_string())?;
        Ok(Self { base: base.trim_end_matches('/').to_string(), http })
    }

    fn url(&self, target: &str) -> String {
        format!("{}/{}", self.base, target.trim_start_matches('/'))
    }

    fn finish(resp: reqwest::Result<reqwest::blocking::Response>) -> Result<EndpointResponse, String> {
        let resp = resp.map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.bytes().map_err(|e| e.to_string())?.to_vec();
        Ok(EndpointResponse { status, body })
    }

    pub fn get(&self, target: &str) -> Result<EndpointResponse, String> {
        Self::finish(self.http.get(self.url(target)).send())
    }

    pub fn post(&self, target: &str, body: Vec<u8>, api_key: Option<&str>) -> Result<EndpointResponse, String> {
        let mut req = self.http.post(self.url(target)).body(body);
        if let Some(k) = api_key {
            req = req.header(API_KEY_HEADER, k);
        }
        Self::finish(req.send())
    }

    pub fn delete(&self, target: &str) -> Result<EndpointResponse, String> {
        Self::finish(self.http.delete(self.url(target)).send())
    }
}

impl SubmitEndpoint for Client {
    fn post_batches(&self, body: &[u8], api_key: &str) -> Result<EndpointResponse, String> {
        self.post("/batches", body.to_vec(), Some(api_key))
    }
}
