//! TLS-intercepting forward proxy that records every browser exchange as
//! an [`HttpFlow`].
//!
//! The proxy accepts plain HTTP requests and HTTPS CONNECT tunnels. For
//! allowlisted (or all, when no allowlist is set) hosts it terminates TLS
//! with a leaf certificate minted from the local root CA and relays
//! HTTP/1.1 exchanges, recording wire-size byte accounting per exchange.
//! Non-allowlisted CONNECT targets are tunneled opaquely and still
//! recorded as a single flow, so nothing silently drops out of totals.
//!
//! Completed exchanges are staged to the store immediately; stopping the
//! session commits the run record, which is when readers first see it.

mod ca;
mod http1;
mod relay;

pub use ca::{CaError, CertAuthority, MintedLeaf, CA_CERT_FILE, CA_KEY_FILE};

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::watch;
use tokio::task::{JoinHandle, JoinSet};

use crate::flow::{now_ms, ts_ms, FlowId, HttpFlow, JourneyRun, RunId};
use crate::store::{FlowStore, StoreError};

/// Store handle shared between the proxy and its owner.
pub type SharedStore = Arc<tokio::sync::Mutex<FlowStore>>;

pub fn shared_store(store: FlowStore) -> SharedStore {
    Arc::new(tokio::sync::Mutex::new(store))
}

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("proxy failed to start on {address}: {source}")]
    ProxyStartError {
        address: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Ca(#[from] CaError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid proxy configuration: {0}")]
    Config(String),
}

/// Capture proxy configuration.
#[derive(Debug, Clone)]
pub struct ProxyConfig {
    /// `host:port` to listen on; port 0 picks a free port.
    pub listen_address: String,
    /// Directory holding (or receiving) the root CA pair.
    pub ca_dir: PathBuf,
    /// Timeout for upstream connects and idle reads.
    pub upstream_timeout: Duration,
    /// Record request payload text on flows (needed for beacon analysis).
    pub record_bodies: bool,
    /// Host globs to intercept; empty intercepts everything. CONNECT
    /// targets outside the allowlist are tunneled opaquely instead.
    pub allowlist_hosts: Vec<String>,
    /// Labels stamped onto the session's run record.
    pub platform_id: String,
    pub journey_name: String,
    /// Extra PEM files trusted for upstream TLS, in addition to the
    /// bundled web-PKI roots (used to reach local test servers).
    pub extra_upstream_roots: Vec<PathBuf>,
}

impl ProxyConfig {
    pub fn new(listen_address: impl Into<String>, ca_dir: impl Into<PathBuf>) -> Self {
        Self {
            listen_address: listen_address.into(),
            ca_dir: ca_dir.into(),
            upstream_timeout: Duration::from_secs(30),
            record_bodies: false,
            allowlist_hosts: Vec::new(),
            platform_id: "unlabeled".to_string(),
            journey_name: "capture".to_string(),
            extra_upstream_roots: Vec::new(),
        }
    }

    pub fn with_labels(mut self, platform_id: &str, journey_name: &str) -> Self {
        self.platform_id = platform_id.to_string();
        self.journey_name = journey_name.to_string();
        self
    }
}

/// Something that reports network activity, used by network-idle waits.
pub trait NetworkActivity: Send + Sync {
    /// Instant the most recent flow started, if any traffic was seen.
    fn last_flow_started(&self) -> Option<tokio::time::Instant>;
}

pub(crate) struct SessionShared {
    pub(crate) config: ProxyConfig,
    pub(crate) run_id: RunId,
    session_started_utc: DateTime<Utc>,
    session_started: tokio::time::Instant,
    pub(crate) ca: CertAuthority,
    pub(crate) upstream_tls: tokio_rustls::TlsConnector,
    pub(crate) store: SharedStore,
    flow_seq: AtomicU64,
    flow_count: AtomicUsize,
    total_bytes: AtomicU64,
    last_flow_started: Mutex<Option<tokio::time::Instant>>,
    flow_ids: Mutex<Vec<FlowId>>,
    bounds: Mutex<(Option<DateTime<Utc>>, Option<DateTime<Utc>>)>,
    store_error: Mutex<Option<StoreError>>,
    incomplete: std::sync::atomic::AtomicBool,
}

impl SessionShared {
    /// Single monotonic clock mapped to UTC once at session start, so
    /// duration math is immune to wall-clock steps.
    pub(crate) fn now_utc(&self) -> DateTime<Utc> {
        let elapsed = self.session_started.elapsed();
        let millis = self.session_started_utc.timestamp_millis() + elapsed.as_millis() as i64;
        ts_ms(millis)
    }

    pub(crate) fn next_flow_id(&self) -> FlowId {
        let seq = self.flow_seq.fetch_add(1, Ordering::Relaxed);
        FlowId::new(format!("{}-{seq:05}", self.run_id))
    }

    pub(crate) fn note_exchange_started(&self) {
        *self.last_flow_started.lock().expect("activity lock") =
            Some(tokio::time::Instant::now());
    }

    /// Stages a completed (or truncated) flow and folds it into the
    /// session totals. Store failures are remembered and surfaced at stop.
    pub(crate) async fn record_flow(&self, flow: HttpFlow) {
        let staged = {
            let mut store = self.store.lock().await;
            store.stage_flow(&flow)
        };
        match staged {
            Ok(()) => {
                self.flow_count.fetch_add(1, Ordering::Relaxed);
                self.total_bytes.fetch_add(flow.total_bytes(), Ordering::Relaxed);
                let mut bounds = self.bounds.lock().expect("bounds lock");
                bounds.0 = Some(bounds.0.map_or(flow.started_at, |b| b.min(flow.started_at)));
                bounds.1 = Some(bounds.1.map_or(flow.completed_at, |b| b.max(flow.completed_at)));
                self.flow_ids.lock().expect("flow ids lock").push(flow.flow_id);
            }
            Err(e) => {
                let mut slot = self.store_error.lock().expect("store error lock");
                slot.get_or_insert(e);
            }
        }
    }
}

/// Live capture session handle.
pub struct CaptureSession {
    pub session_id: String,
    shared: Arc<SessionShared>,
    local_addr: SocketAddr,
    shutdown: watch::Sender<bool>,
    accept_task: JoinHandle<()>,
    pub started_at: DateTime<Utc>,
}

impl CaptureSession {
    /// Address the proxy actually bound (resolves port 0).
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn run_id(&self) -> &RunId {
        &self.shared.run_id
    }

    /// Number of flows recorded so far; monotonically nondecreasing.
    pub fn flow_count(&self) -> usize {
        self.shared.flow_count.load(Ordering::Relaxed)
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.shared.config
    }

    /// Root certificate PEM for browser trust installation.
    pub fn ca_cert_pem(&self) -> String {
        self.shared.ca.cert_pem().to_string()
    }

    /// Flags the session's run as an aborted partial; the flag lands on
    /// the run record committed at stop.
    pub fn mark_incomplete(&self) {
        self.shared.incomplete.store(true, Ordering::Relaxed);
    }
}

impl NetworkActivity for CaptureSession {
    fn last_flow_started(&self) -> Option<tokio::time::Instant> {
        *self.shared.last_flow_started.lock().expect("activity lock")
    }
}

/// Summary returned by [`stop_proxy`].
#[derive(Debug, Clone)]
pub struct CaptureSummary {
    pub run: JourneyRun,
    pub flow_count: usize,
    pub total_bytes: u64,
}

pub(crate) fn install_crypto_provider() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        let _ = rustls::crypto::ring::default_provider().install_default();
    });
}

fn upstream_tls_connector(config: &ProxyConfig) -> Result<tokio_rustls::TlsConnector, ProxyError> {
    let mut roots = rustls::RootCertStore::empty();
    roots.extend(webpki_roots::TLS_SERVER_ROOTS.iter().cloned());
    for path in &config.extra_upstream_roots {
        let pem = std::fs::read(path).map_err(|e| {
            ProxyError::Config(format!("cannot read upstream root {}: {e}", path.display()))
        })?;
        let mut reader = std::io::BufReader::new(pem.as_slice());
        for cert in rustls_pemfile::certs(&mut reader) {
            let cert = cert.map_err(|e| {
                ProxyError::Config(format!("bad certificate in {}: {e}", path.display()))
            })?;
            roots.add(cert).map_err(|e| {
                ProxyError::Config(format!("unusable root in {}: {e}", path.display()))
            })?;
        }
    }
    let mut tls = rustls::ClientConfig::builder()
        .with_root_certificates(roots)
        .with_no_client_auth();
    // HTTP/1.1 only: h2 would break per-exchange byte delimitation.
    tls.alpn_protocols = vec![b"http/1.1".to_vec()];
    Ok(tokio_rustls::TlsConnector::from(Arc::new(tls)))
}

/// Starts the proxy: binds the listener, loads or generates the CA, and
/// begins recording every completed exchange into the store under a fresh
/// run id.
pub async fn start_proxy(
    config: ProxyConfig,
    store: SharedStore,
) -> Result<CaptureSession, ProxyError> {
    install_crypto_provider();
    let ca = CertAuthority::load_or_generate(&config.ca_dir)?;
    let upstream_tls = upstream_tls_connector(&config)?;
    let listener = TcpListener::bind(&config.listen_address)
        .await
        .map_err(|source| ProxyError::ProxyStartError {
            address: config.listen_address.clone(),
            source,
        })?;
    let local_addr = listener
        .local_addr()
        .map_err(|source| ProxyError::ProxyStartError {
            address: config.listen_address.clone(),
            source,
        })?;

    let started_at = now_ms();
    let shared = Arc::new(SessionShared {
        run_id: RunId::random(),
        session_started_utc: started_at,
        session_started: tokio::time::Instant::now(),
        ca,
        upstream_tls,
        store,
        config,
        flow_seq: AtomicU64::new(0),
        flow_count: AtomicUsize::new(0),
        total_bytes: AtomicU64::new(0),
        last_flow_started: Mutex::new(None),
        flow_ids: Mutex::new(Vec::new()),
        bounds: Mutex::new((None, None)),
        store_error: Mutex::new(None),
        incomplete: std::sync::atomic::AtomicBool::new(false),
    });

    let (shutdown_tx, shutdown_rx) = watch::channel(false);
    let accept_shared = Arc::clone(&shared);
    let accept_task = tokio::spawn(async move {
        let mut connections = JoinSet::new();
        let mut shutdown = shutdown_rx.clone();
        loop {
            tokio::select! {
                accepted = listener.accept() => {
                    let Ok((stream, _peer)) = accepted else { continue };
                    let shared = Arc::clone(&accept_shared);
                    let shutdown = shutdown_rx.clone();
                    connections.spawn(relay::handle_connection(stream, shared, shutdown));
                }
                _ = shutdown.changed() => break,
            }
        }
        drop(listener);
        while connections.join_next().await.is_some() {}
    });

    Ok(CaptureSession {
        session_id: uuid::Uuid::new_v4().to_string(),
        shared,
        local_addr,
        shutdown: shutdown_tx,
        accept_task,
        started_at,
    })
}

/// Stops the session: in-flight exchanges complete or are recorded as
/// truncated, the listener closes, and the run commits to the store.
pub async fn stop_proxy(session: CaptureSession) -> Result<CaptureSummary, ProxyError> {
    let _ = session.shutdown.send(true);
    let _ = session.accept_task.await;
    let shared = session.shared;

    if let Some(e) = shared.store_error.lock().expect("store error lock").take() {
        return Err(ProxyError::Store(e));
    }

    let (first, last) = *shared.bounds.lock().expect("bounds lock");
    let started_at = first.unwrap_or(shared.session_started_utc);
    let ended_at = last.unwrap_or_else(|| shared.now_utc());
    let run = JourneyRun {
        run_id: shared.run_id.clone(),
        journey_name: shared.config.journey_name.clone(),
        platform_id: shared.config.platform_id.clone(),
        started_at,
        ended_at,
        flow_ids: shared.flow_ids.lock().expect("flow ids lock").clone(),
        incomplete: shared.incomplete.load(Ordering::Relaxed),
    };
    {
        let mut store = shared.store.lock().await;
        store.commit_run(&run)?;
    }
    Ok(CaptureSummary {
        flow_count: shared.flow_count.load(Ordering::Relaxed),
        total_bytes: shared.total_bytes.load(Ordering::Relaxed),
        run,
    })
}
