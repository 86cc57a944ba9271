//! HTTP bindings: tiny_http servers for the issuer and verifier, and ureq
//! based transports for clients and the issuer's admin channel.

use std::io::Read;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use tiny_http::{Header, Method, Request, Response, Server};

use crate::clock::Clock;
use crate::issuer::{Issuer, RotationOutcome};
use crate::transport::{IssuerTransport, RotationSink, TransportError, VerifierTransport};
use crate::verifier::Verifier;
use crate::wire::COLLECT_REQUEST_LEN;

pub struct HttpServer {
    addr: SocketAddr,
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
}

impl HttpServer {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers {
            let _ = w.join();
        }
    }

    /// Blocks until the worker threads exit.
    pub fn join(self) {
        for w in self.workers {
            let _ = w.join();
        }
    }
}

type Handler = dyn Fn(&Method, &str, &[u8]) -> (u16, Vec<u8>) + Send + Sync;

fn serve(bind: &str, workers: usize, handler: Arc<Handler>) -> std::io::Result<HttpServer> {
    let server = Arc::new(Server::http(bind).map_err(std::io::Error::other)?);
    let addr = server.server_addr().to_ip().ok_or_else(|| std::io::Error::other("not an IP listener"))?;
    let workers = (0..workers.max(1))
        .map(|_| {
            let server = server.clone();
            let handler = handler.clone();
            std::thread::spawn(move || {
                while let Ok(req) = server.recv() {
                    respond(req, &*handler);
                }
            })
        })
        .collect();
    Ok(HttpServer { addr, server, workers })
}

fn respond(mut req: Request, handler: &Handler) {
    let mut body = Vec::new();
    let limit = COLLECT_REQUEST_LEN as u64 + 1;
    let (status, out) = match req.as_reader().take(limit).read_to_end(&mut body) {
        Ok(_) => handler(req.method(), req.url(), &body),
        Err(_) => (400, Vec::new()),
    };
    let content_type = Header::from_bytes("Content-Type", "application/octet-stream").unwrap();
    let resp = Response::from_data(out).with_status_code(status).with_header(content_type);
    if let Err(e) = req.respond(resp) {
        log::debug!("client went away: {e}");
    }
}

pub fn serve_issuer(
    issuer: Arc<Issuer>,
    clock: Arc<dyn Clock>,
    bind: &str,
    workers: usize,
) -> std::io::Result<HttpServer> {
    serve(
        bind,
        workers,
        Arc::new(move |method, url, body| match (method, url) {
            (Method::Get, "/v1/group-keys") => (200, issuer.serve_group_keys()),
            (Method::Post, "/v1/join") => issuer.handle_join(body),
            (Method::Post, "/v1/admin/rotate") => match issuer.rotate_issuer_keys(clock.now()) {
                Ok(RotationOutcome::NotDue) => (200, b"not-due".to_vec()),
                Ok(RotationOutcome::Rotated { current_epoch, .. }) => {
                    (200, format!("rotated {current_epoch}").into_bytes())
                }
                Err(e) => (503, e.to_string().into_bytes()),
            },
            _ => (404, Vec::new()),
        }),
    )
}

pub fn serve_verifier(verifier: Arc<Verifier>, bind: &str, workers: usize) -> std::io::Result<HttpServer> {
    serve(
        bind,
        workers,
        Arc::new(move |method, url, body| match (method, url) {
            (Method::Post, "/v1/collect") => (200, verifier.handle_collect(body)),
            (Method::Post, "/v1/admin/epoch") => match verifier.handle_admin_epoch(body) {
                Ok(update) => (200, format!("{update:?}").into_bytes()),
                Err(e) => (400, e.to_string().into_bytes()),
            },
            _ => (404, Vec::new()),
        }),
    )
}

fn agent() -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build()
}

fn read_body(resp: ureq::Response) -> Result<Vec<u8>, TransportError> {
    let mut out = Vec::new();
    resp.into_reader()
        .take(COLLECT_REQUEST_LEN as u64 + 1)
        .read_to_end(&mut out)
        .map_err(|e| TransportError::Unreachable(e.to_string()))?;
    Ok(out)
}

/// Padded bodies carry their own status, so HTTP error codes still yield a body.
fn exchange(result: Result<ureq::Response, ureq::Error>) -> Result<(u16, Vec<u8>), TransportError> {
    match result {
        Ok(resp) => Ok((resp.status(), read_body(resp)?)),
        Err(ureq::Error::Status(code, resp)) => Ok((code, read_body(resp)?)),
        Err(e) => Err(TransportError::Unreachable(e.to_string())),
    }
}

pub struct HttpIssuer {
    base: String,
    agent: ureq::Agent,
}

impl HttpIssuer {
    pub fn new(base: &str) -> Self {
        Self { base: base.trim_end_matches('/').to_owned(), agent: agent() }
    }
}

impl IssuerTransport for HttpIssuer {
    fn group_keys(&self) -> Result<Vec<u8>, TransportError> {
        match exchange(self.agent.get(&format!("{}/v1/group-keys", self.base)).call())? {
            (200, body) => Ok(body),
            (code, _) => Err(TransportError::Protocol(format!("group keys: HTTP {code}"))),
        }
    }

    fn join(&self, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        Ok(exchange(self.agent.post(&format!("{}/v1/join", self.base)).send_bytes(body))?.1)
    }
}

pub struct HttpVerifier {
    base: String,
    agent: ureq::Agent,
}

impl HttpVerifier {
    pub fn new(base: &str) -> Self {
        Self { base: base.trim_end_matches('/').to_owned(), agent: agent() }
    }
}

impl VerifierTransport for HttpVerifier {
    fn collect(&self, body: &[u8]) -> Result<Vec<u8>, TransportError> {
        match exchange(self.agent.post(&format!("{}/v1/collect", self.base)).send_bytes(body))? {
            (200, body) => Ok(body),
            (code, _) => Err(TransportError::Protocol(format!("collect: HTTP {code}"))),
        }
    }
}

impl RotationSink for HttpVerifier {
    fn notify_epoch(&self, body: &[u8]) -> Result<(), TransportError> {
        match exchange(self.agent.post(&format!("{}/v1/admin/epoch", self.base)).send_bytes(body))? {
            (200, _) => Ok(()),
            (code, msg) => {
                Err(TransportError::Protocol(format!("epoch notice: HTTP {code}: {}", String::from_utf8_lossy(&msg))))
            }
        }
    }
}
