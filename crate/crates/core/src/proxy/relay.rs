//! Per-connection relaying and flow recording.

use std::pin::Pin;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll};

use chrono::{DateTime, Utc};
use rustls::pki_types::ServerName;
use tokio::io::{AsyncRead, AsyncWrite};
use tokio::net::TcpStream;
use tokio::sync::watch;
use tokio_rustls::LazyConfigAcceptor;

use crate::classify::glob::glob_match;
use crate::cookies::extract_cookies;
use crate::flow::{Cookie, FlowId, FlowUrl, HttpFlow};

use super::http1::{
    header, parse_request_head, parse_response_head, request_framing, response_framing,
    BodyFraming, HttpError, HttpStream, RequestHead,
};
use super::SessionShared;

/// Request payloads larger than this are relayed but not captured.
const MAX_CAPTURED_PAYLOAD: u64 = 1024 * 1024;

async fn wait_shutdown(rx: &mut watch::Receiver<bool>) {
    loop {
        if *rx.borrow_and_update() {
            return;
        }
        if rx.changed().await.is_err() {
            return;
        }
    }
}

/// `AsyncWrite` wrapper that counts bytes actually written, so truncated
/// exchanges still report what crossed the wire before the abort.
struct CountingWriter<'a, W> {
    inner: W,
    counter: &'a AtomicU64,
}

impl<'a, W> CountingWriter<'a, W> {
    fn new(inner: W, counter: &'a AtomicU64) -> Self {
        Self { inner, counter }
    }
}

impl<W: AsyncWrite + Unpin> AsyncWrite for CountingWriter<'_, W> {
    fn poll_write(
        mut self: Pin<&mut Self>,
        cx: &mut Context<'_>,
        buf: &[u8],
    ) -> Poll<std::io::Result<usize>> {
        let this = &mut *self;
        match Pin::new(&mut this.inner).poll_write(cx, buf) {
            Poll::Ready(Ok(n)) => {
                this.counter.fetch_add(n as u64, Ordering::Relaxed);
                Poll::Ready(Ok(n))
            }
            other => other,
        }
    }

    fn poll_flush(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<std::io::Result<()>> {
        Pin::new(&mut self.inner).poll_flush(cx)
    }

    fn poll_shutdown(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<std::io::Result<()>> {
        Pin::new(&mut self.inner).poll_shutdown(cx)
    }
}

/// `AsyncRead`/`AsyncWrite` adapter that replays buffered bytes before the
/// underlying stream (used when handing a parse buffer over to TLS).
struct PrefixedIo<T> {
    prefix: Vec<u8>,
    io: T,
}

impl<T: AsyncRead + Unpin> AsyncRead for PrefixedIo<T> {
    fn poll_read(
        mut self: Pin<&mut Self>,
        cx: &mut Context<'_>,
        buf: &mut tokio::io::ReadBuf<'_>,
    ) -> Poll<std::io::Result<()>> {
        if !self.prefix.is_empty() {
            let n = self.prefix.len().min(buf.remaining());
            let bytes: Vec<u8> = self.prefix.drain(..n).collect();
            buf.put_slice(&bytes);
            return Poll::Ready(Ok(()));
        }
        Pin::new(&mut self.io).poll_read(cx, buf)
    }
}

impl<T: AsyncWrite + Unpin> AsyncWrite for PrefixedIo<T> {
    fn poll_write(
        mut self: Pin<&mut Self>,
        cx: &mut Context<'_>,
        buf: &[u8],
    ) -> Poll<std::io::Result<usize>> {
        Pin::new(&mut self.io).poll_write(cx, buf)
    }

    fn poll_flush(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<std::io::Result<()>> {
        Pin::new(&mut self.io).poll_flush(cx)
    }

    fn poll_shutdown(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<std::io::Result<()>> {
        Pin::new(&mut self.io).poll_shutdown(cx)
    }
}

struct ExchangeMeta {
    method: String,
    url: FlowUrl,
    request_headers: Vec<(String, String)>,
    response_headers: Vec<(String, String)>,
    payload: Option<Vec<u8>>,
}

/// Accounting state of one in-flight exchange. Counters are atomics so a
/// shutdown can snapshot partial progress while the relay future is
/// cancelled.
struct Exchange {
    flow_id: FlowId,
    started_at: DateTime<Utc>,
    meta: Mutex<ExchangeMeta>,
    req_head_bytes: AtomicU64,
    req_body_bytes: AtomicU64,
    resp_head_bytes: AtomicU64,
    resp_body_bytes: AtomicU64,
    status: AtomicU32,
    /// Set once the request went upstream; unforwarded requests are never
    /// recorded (no phantom flows).
    forwarded: AtomicBool,
    finished: AtomicBool,
}

impl Exchange {
    fn new(shared: &SessionShared, method: String, url: FlowUrl, request_headers: Vec<(String, String)>) -> Arc<Self> {
        shared.note_exchange_started();
        Arc::new(Self {
            flow_id: shared.next_flow_id(),
            started_at: shared.now_utc(),
            meta: Mutex::new(ExchangeMeta {
                method,
                url,
                request_headers,
                response_headers: Vec::new(),
                payload: None,
            }),
            req_head_bytes: AtomicU64::new(0),
            req_body_bytes: AtomicU64::new(0),
            resp_head_bytes: AtomicU64::new(0),
            resp_body_bytes: AtomicU64::new(0),
            status: AtomicU32::new(0),
            forwarded: AtomicBool::new(false),
            finished: AtomicBool::new(false),
        })
    }

    async fn finish(&self, shared: &SessionShared, truncated: bool) {
        if !self.forwarded.load(Ordering::Relaxed) {
            return;
        }
        if self.finished.swap(true, Ordering::Relaxed) {
            return;
        }
        let (method, url, request_cookies, set_cookies, content_type, payload) = {
            let meta = self.meta.lock().expect("exchange meta lock");
            let (request_cookies, _) = extract_cookies(&meta.request_headers, false);
            let (_, set_cookies): (Vec<Cookie>, Vec<Cookie>) =
                extract_cookies(&meta.response_headers, false);
            let content_type = header(&meta.response_headers, "content-type").map(str::to_string);
            let payload = meta
                .payload
                .as_ref()
                .map(|bytes| String::from_utf8_lossy(bytes).into_owned());
            (
                meta.method.clone(),
                meta.url.clone(),
                request_cookies,
                set_cookies,
                content_type,
                payload,
            )
        };
        let flow = HttpFlow {
            flow_id: self.flow_id.clone(),
            run_id: shared.run_id.clone(),
            url,
            method,
            status: self.status.load(Ordering::Relaxed) as u16,
            request_header_bytes: self.req_head_bytes.load(Ordering::Relaxed),
            request_body_bytes: self.req_body_bytes.load(Ordering::Relaxed),
            response_header_bytes: self.resp_head_bytes.load(Ordering::Relaxed),
            response_body_bytes: self.resp_body_bytes.load(Ordering::Relaxed),
            size_is_estimated: truncated,
            content_type,
            request_cookies,
            set_cookies,
            request_payload: payload,
            started_at: self.started_at,
            completed_at: shared.now_utc(),
            category: None,
        };
        shared.record_flow(flow).await;
    }
}

enum ExchangeEnd {
    KeepAlive,
    Close,
}

pub(super) async fn handle_connection(
    stream: TcpStream,
    shared: Arc<SessionShared>,
    mut shutdown: watch::Receiver<bool>,
) {
    let mut client = HttpStream::new(stream);
    loop {
        let head_bytes = tokio::select! {
            head = client.read_head() => match head {
                Ok(Some(bytes)) => bytes,
                _ => return,
            },
            _ = wait_shutdown(&mut shutdown) => return,
        };
        let Ok(head) = parse_request_head(head_bytes) else {
            let _ = client.write_all(b"HTTP/1.1 400 Bad Request\r\n\r\n").await;
            return;
        };
        if head.method == "CONNECT" {
            handle_connect(client, head, shared, shutdown).await;
            return;
        }
        match handle_plain(&mut client, head, &shared, &mut shutdown).await {
            Some(ExchangeEnd::KeepAlive) => continue,
            _ => return,
        }
    }
}

/// Plain (non-CONNECT) proxy request: absolute-form target, rewritten to
/// origin-form upstream.
async fn handle_plain(
    client: &mut HttpStream<TcpStream>,
    head: RequestHead,
    shared: &Arc<SessionShared>,
    shutdown: &mut watch::Receiver<bool>,
) -> Option<ExchangeEnd> {
    let Some((url, authority)) = plain_target(&head) else {
        let _ = client.write_all(b"HTTP/1.1 400 Bad Request\r\n\r\n").await;
        return None;
    };
    let exchange = Exchange::new(shared, head.method.clone(), url.clone(), head.headers.clone());

    let connect = tokio::time::timeout(
        shared.config.upstream_timeout,
        TcpStream::connect(&authority),
    );
    let upstream = match connect.await {
        Ok(Ok(stream)) => stream,
        _ => {
            let _ = client.write_all(b"HTTP/1.1 502 Bad Gateway\r\n\r\n").await;
            return None;
        }
    };
    let mut upstream = HttpStream::new(upstream);
    let forwarded_head = rewrite_proxy_head(&head, &url);

    let outcome = tokio::select! {
        result = run_exchange(client, &mut upstream, &head, &forwarded_head, &exchange, shared.config.record_bodies) => result,
        _ = wait_shutdown(shutdown) => {
            exchange.finish(shared, true).await;
            return None;
        }
    };
    match outcome {
        Ok(end) => {
            exchange.finish(shared, false).await;
            Some(end)
        }
        Err(_) => {
            exchange.finish(shared, true).await;
            None
        }
    }
}

/// Resolves the request target of a plain proxy request into a URL and
/// the upstream authority. Accepts absolute-form (normal proxy requests)
/// and origin-form plus `Host` (transparent use).
fn plain_target(head: &RequestHead) -> Option<(FlowUrl, String)> {
    let (host, port, path_query) = if let Some(rest) = head.target.strip_prefix("http://") {
        let (authority, path_query) = match rest.find('/') {
            Some(idx) => (&rest[..idx], &rest[idx..]),
            None => (rest, "/"),
        };
        let (host, port) = split_host_port(authority, 80)?;
        (host, port, path_query.to_string())
    } else if head.target.starts_with('/') {
        let authority = header(&head.headers, "host")?;
        let (host, port) = split_host_port(authority, 80)?;
        (host, port, head.target.clone())
    } else {
        return None;
    };
    let (path, query) = match path_query.split_once('?') {
        Some((p, q)) => (p.to_string(), Some(q.to_string())),
        None => (path_query.clone(), None),
    };
    let url = FlowUrl {
        scheme: "http".to_string(),
        host: host.clone(),
        port: (port != 80).then_some(port),
        path,
        query,
    };
    Some((url, format!("{host}:{port}")))
}

fn split_host_port(authority: &str, default_port: u16) -> Option<(String, u16)> {
    if authority.is_empty() {
        return None;
    }
    // Bracketed IPv6 literal.
    if let Some(rest) = authority.strip_prefix('[') {
        let (host, tail) = rest.split_once(']')?;
        let port = match tail.strip_prefix(':') {
            Some(p) => p.parse().ok()?,
            None => default_port,
        };
        return Some((host.to_string(), port));
    }
    match authority.rsplit_once(':') {
        Some((host, port)) => Some((host.to_string(), port.parse().ok()?)),
        None => Some((authority.to_string(), default_port)),
    }
}

/// Serializes the head forwarded upstream: origin-form request line, hop
/// headers dropped, explicit close (the proxy does not pool upstreams).
/// These are the bytes request_header_bytes accounts for.
fn rewrite_proxy_head(head: &RequestHead, url: &FlowUrl) -> Vec<u8> {
    let mut target = url.path.clone();
    if let Some(q) = &url.query {
        target.push('?');
        target.push_str(q);
    }
    if target.is_empty() {
        target.push('/');
    }
    let mut out = format!("{} {} {}\r\n", head.method, target, head.version).into_bytes();
    for (name, value) in &head.headers {
        if name.eq_ignore_ascii_case("proxy-connection")
            || name.eq_ignore_ascii_case("connection")
            || name.eq_ignore_ascii_case("keep-alive")
        {
            continue;
        }
        out.extend_from_slice(format!("{name}: {value}\r\n").as_bytes());
    }
    out.extend_from_slice(b"Connection: close\r\n\r\n");
    out
}

/// Forwards one request/response pair and accounts its bytes.
async fn run_exchange<C, U>(
    client: &mut HttpStream<C>,
    upstream: &mut HttpStream<U>,
    req: &RequestHead,
    forwarded_head: &[u8],
    exchange: &Exchange,
    record_bodies: bool,
) -> Result<ExchangeEnd, HttpError>
where
    C: AsyncRead + AsyncWrite + Unpin,
    U: AsyncRead + AsyncWrite + Unpin,
{
    upstream.write_all(forwarded_head).await?;
    exchange
        .req_head_bytes
        .store(forwarded_head.len() as u64, Ordering::Relaxed);
    exchange.forwarded.store(true, Ordering::Relaxed);

    let req_framing = request_framing(req)?;
    let mut payload_buf = match req_framing {
        BodyFraming::ContentLength(n) if record_bodies && n <= MAX_CAPTURED_PAYLOAD => {
            Some(Vec::with_capacity(n as usize))
        }
        _ => None,
    };
    {
        let mut sink = CountingWriter::new(upstream.get_mut(), &exchange.req_body_bytes);
        match req_framing {
            BodyFraming::None => {}
            BodyFraming::ContentLength(n) => {
                client.copy_exact(n, &mut sink, payload_buf.as_mut()).await?;
            }
            BodyFraming::Chunked => {
                client.copy_chunked(&mut sink, None).await?;
            }
            BodyFraming::ToEof => {}
        }
    }
    if let Some(bytes) = payload_buf {
        exchange.meta.lock().expect("exchange meta lock").payload = Some(bytes);
    }

    let resp_head_bytes = upstream
        .read_head()
        .await?
        .ok_or(HttpError::UnexpectedEof)?;
    client.write_all(&resp_head_bytes).await?;
    exchange
        .resp_head_bytes
        .store(resp_head_bytes.len() as u64, Ordering::Relaxed);
    let resp = parse_response_head(resp_head_bytes)?;
    exchange
        .status
        .store(u32::from(resp.status), Ordering::Relaxed);
    exchange.meta.lock().expect("exchange meta lock").response_headers = resp.headers.clone();

    let resp_framing = response_framing(&req.method, &resp)?;
    {
        let mut sink = CountingWriter::new(client.get_mut(), &exchange.resp_body_bytes);
        match resp_framing {
            BodyFraming::None => {}
            BodyFraming::ContentLength(n) => {
                upstream.copy_exact(n, &mut sink, None).await?;
            }
            BodyFraming::Chunked => {
                upstream.copy_chunked(&mut sink, None).await?;
            }
            BodyFraming::ToEof => {
                upstream.copy_to_eof(&mut sink, None).await?;
            }
        }
    }

    let client_close = req.version.eq_ignore_ascii_case("HTTP/1.0")
        || header(&req.headers, "connection")
            .or_else(|| header(&req.headers, "proxy-connection"))
            .is_some_and(|c| c.to_ascii_lowercase().contains("close"));
    let resp_close = resp_framing == BodyFraming::ToEof
        || header(&resp.headers, "connection")
            .is_some_and(|c| c.to_ascii_lowercase().contains("close"));
    Ok(if client_close || resp_close {
        ExchangeEnd::Close
    } else {
        ExchangeEnd::KeepAlive
    })
}

/// CONNECT handling: TLS interception for allowlisted hosts, opaque
/// byte-counted tunneling otherwise.
async fn handle_connect(
    client: HttpStream<TcpStream>,
    head: RequestHead,
    shared: Arc<SessionShared>,
    mut shutdown: watch::Receiver<bool>,
) {
    let Some((host, port)) = split_host_port(&head.target, 443) else {
        let mut client = client;
        let _ = client.write_all(b"HTTP/1.1 400 Bad Request\r\n\r\n").await;
        return;
    };
    let intercept = shared.config.allowlist_hosts.is_empty()
        || shared
            .config
            .allowlist_hosts
            .iter()
            .any(|pattern| glob_match(&pattern.to_ascii_lowercase(), &host.to_ascii_lowercase()));
    if intercept {
        intercept_tunnel(client, host, port, shared, shutdown).await;
    } else {
        opaque_tunnel(client, host, port, &shared, &mut shutdown).await;
    }
}

async fn intercept_tunnel(
    mut client: HttpStream<TcpStream>,
    connect_host: String,
    port: u16,
    shared: Arc<SessionShared>,
    mut shutdown: watch::Receiver<bool>,
) {
    if client
        .write_all(b"HTTP/1.1 200 Connection Established\r\n\r\n")
        .await
        .is_err()
    {
        return;
    }
    let (tcp, leftover) = client.into_parts();
    let prefixed = PrefixedIo {
        prefix: leftover,
        io: tcp,
    };

    // Read the ClientHello first so the leaf can be minted for the SNI the
    // browser actually asked for; fall back to the CONNECT host.
    let acceptor = LazyConfigAcceptor::new(rustls::server::Acceptor::default(), prefixed);
    let start = tokio::select! {
        accepted = acceptor => match accepted {
            Ok(start) => start,
            Err(_) => return,
        },
        _ = wait_shutdown(&mut shutdown) => return,
    };
    let sni = start
        .client_hello()
        .server_name()
        .map(str::to_string)
        .unwrap_or_else(|| connect_host.clone());
    let Ok(leaf) = shared.ca.mint_leaf(&sni) else {
        return;
    };
    let Ok(client_tls) = start.into_stream(leaf.server_config).await else {
        return;
    };

    let server_name = match ServerName::try_from(connect_host.clone()) {
        Ok(name) => name,
        Err(_) => return,
    };
    let upstream_tls = {
        let connect = async {
            let tcp = TcpStream::connect((connect_host.as_str(), port)).await?;
            shared.upstream_tls.connect(server_name, tcp).await
        };
        match tokio::time::timeout(shared.config.upstream_timeout, connect).await {
            Ok(Ok(stream)) => stream,
            _ => return,
        }
    };

    let mut client = HttpStream::new(client_tls);
    let mut upstream = HttpStream::new(upstream_tls);
    loop {
        let head_bytes = tokio::select! {
            head = client.read_head() => match head {
                Ok(Some(bytes)) => bytes,
                _ => return,
            },
            _ = wait_shutdown(&mut shutdown) => return,
        };
        let Ok(req) = parse_request_head(head_bytes) else {
            return;
        };
        let (path, query) = match req.target.split_once('?') {
            Some((p, q)) => (p.to_string(), Some(q.to_string())),
            None => (req.target.clone(), None),
        };
        let url = FlowUrl {
            scheme: "https".to_string(),
            host: connect_host.clone(),
            port: (port != 443).then_some(port),
            path,
            query,
        };
        let exchange = Exchange::new(&shared, req.method.clone(), url, req.headers.clone());
        // Inside the tunnel the head is forwarded verbatim; its raw length
        // is the accounted header size.
        let outcome = tokio::select! {
            result = run_exchange(&mut client, &mut upstream, &req, &req.raw, &exchange, shared.config.record_bodies) => result,
            _ = wait_shutdown(&mut shutdown) => {
                exchange.finish(&shared, true).await;
                return;
            }
        };
        match outcome {
            Ok(ExchangeEnd::KeepAlive) => {
                exchange.finish(&shared, false).await;
            }
            Ok(ExchangeEnd::Close) => {
                exchange.finish(&shared, false).await;
                return;
            }
            Err(_) => {
                exchange.finish(&shared, true).await;
                return;
            }
        }
    }
}

/// Tunnels a non-intercepted CONNECT opaquely, recording one flow whose
/// body byte counts are the tunneled totals per direction.
async fn opaque_tunnel(
    mut client: HttpStream<TcpStream>,
    host: String,
    port: u16,
    shared: &Arc<SessionShared>,
    shutdown: &mut watch::Receiver<bool>,
) {
    let upstream = match tokio::time::timeout(
        shared.config.upstream_timeout,
        TcpStream::connect((host.as_str(), port)),
    )
    .await
    {
        Ok(Ok(stream)) => stream,
        _ => {
            let _ = client.write_all(b"HTTP/1.1 502 Bad Gateway\r\n\r\n").await;
            return;
        }
    };
    if client
        .write_all(b"HTTP/1.1 200 Connection Established\r\n\r\n")
        .await
        .is_err()
    {
        return;
    }

    let url = FlowUrl {
        scheme: "https".to_string(),
        host: host.clone(),
        port: (port != 443).then_some(port),
        path: String::new(),
        query: None,
    };
    let exchange = Exchange::new(shared, "CONNECT".to_string(), url, Vec::new());
    exchange.forwarded.store(true, Ordering::Relaxed);
    exchange.status.store(200, Ordering::Relaxed);

    let (client_io, leftover) = client.into_parts();
    let (mut client_read, client_write) = tokio::io::split(client_io);
    let (mut upstream_read, upstream_write) = tokio::io::split(upstream);
    let mut to_upstream = CountingWriter::new(upstream_write, &exchange.req_body_bytes);
    let mut to_client = CountingWriter::new(client_write, &exchange.resp_body_bytes);

    let relay = async {
        use tokio::io::AsyncWriteExt;
        if !leftover.is_empty() {
            let _ = to_upstream.write_all(&leftover).await;
        }
        let up = tokio::io::copy(&mut client_read, &mut to_upstream);
        let down = tokio::io::copy(&mut upstream_read, &mut to_client);
        let _ = tokio::join!(up, down);
    };
    tokio::select! {
        _ = relay => exchange.finish(shared, false).await,
        _ = wait_shutdown(shutdown) => exchange.finish(shared, true).await,
    }
}
