//! HTTP/1.1 head parsing and body framing over async streams.
//!
//! The proxy does its own minimal HTTP handling instead of a full client
//! stack because byte accounting must reflect exactly what crossed the
//! wire: heads are kept as raw byte blocks and bodies are relayed with
//! their framing (chunk sizes included in the transfer count).

use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

/// Upper bound on a head block; anything larger is rejected.
pub const MAX_HEAD_BYTES: usize = 64 * 1024;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("connection closed mid-message")]
    UnexpectedEof,
    #[error("head block exceeds {MAX_HEAD_BYTES} bytes")]
    HeadTooLarge,
    #[error("malformed head: {0}")]
    Malformed(String),
    #[error("invalid chunked framing: {0}")]
    BadChunk(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Byte stream with a parse buffer, so head reading and raw body relaying
/// can interleave without losing buffered bytes.
pub struct HttpStream<T> {
    io: T,
    buf: Vec<u8>,
}

impl<T: AsyncRead + AsyncWrite + Unpin> HttpStream<T> {
    pub fn new(io: T) -> Self {
        Self { io, buf: Vec::new() }
    }

    pub fn into_parts(self) -> (T, Vec<u8>) {
        (self.io, self.buf)
    }

    pub fn get_mut(&mut self) -> &mut T {
        &mut self.io
    }

    /// Reads one head block up to and including the blank line. Returns
    /// `None` on clean EOF before the first byte (idle connection close).
    pub async fn read_head(&mut self) -> Result<Option<Vec<u8>>, HttpError> {
        loop {
            if let Some(end) = find_head_end(&self.buf) {
                let head = self.buf.drain(..end).collect();
                return Ok(Some(head));
            }
            if self.buf.len() > MAX_HEAD_BYTES {
                return Err(HttpError::HeadTooLarge);
            }
            let mut chunk = [0u8; 4096];
            let n = self.io.read(&mut chunk).await?;
            if n == 0 {
                if self.buf.is_empty() {
                    return Ok(None);
                }
                return Err(HttpError::UnexpectedEof);
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }

    /// Copies exactly `len` body bytes into `sink`. Returns bytes copied,
    /// which is `len` unless EOF truncates the stream (reported as error
    /// after accounting in the caller via the partial count).
    pub async fn copy_exact<W: AsyncWrite + Unpin>(
        &mut self,
        len: u64,
        sink: &mut W,
        capture: Option<&mut Vec<u8>>,
    ) -> Result<u64, HttpError> {
        let mut remaining = len;
        let mut copied = 0u64;
        let mut capture = capture;
        while remaining > 0 {
            if self.buf.is_empty() {
                let mut chunk = vec![0u8; 16 * 1024];
                let n = self.io.read(&mut chunk).await?;
                if n == 0 {
                    return Err(HttpError::UnexpectedEof);
                }
                chunk.truncate(n);
                self.buf = chunk;
            }
            let take = usize::try_from(remaining.min(self.buf.len() as u64)).expect("bounded");
            let bytes: Vec<u8> = self.buf.drain(..take).collect();
            sink.write_all(&bytes).await?;
            if let Some(cap) = capture.as_deref_mut() {
                cap.extend_from_slice(&bytes);
            }
            copied += bytes.len() as u64;
            remaining -= bytes.len() as u64;
        }
        sink.flush().await?;
        Ok(copied)
    }

    /// Relays a chunked body including its framing until the final
    /// zero-size chunk and trailers. Returns total bytes relayed (framing
    /// included: that is what crossed the network).
    pub async fn copy_chunked<W: AsyncWrite + Unpin>(
        &mut self,
        sink: &mut W,
        capture: Option<&mut Vec<u8>>,
    ) -> Result<u64, HttpError> {
        let mut total = 0u64;
        let mut capture = capture;
        loop {
            let line = self.read_line().await?;
            let size_text = std::str::from_utf8(&line)
                .map_err(|_| HttpError::BadChunk("non-ascii chunk size".into()))?
                .trim_end_matches("\r\n");
            let size_field = size_text.split(';').next().unwrap_or("").trim();
            let size = u64::from_str_radix(size_field, 16)
                .map_err(|_| HttpError::BadChunk(format!("chunk size {size_field:?}")))?;
            sink.write_all(&line).await?;
            total += line.len() as u64;
            if size == 0 {
                // Trailer section: lines up to and including the blank one.
                loop {
                    let trailer = self.read_line().await?;
                    sink.write_all(&trailer).await?;
                    total += trailer.len() as u64;
                    if trailer == b"\r\n" || trailer == b"\n" {
                        break;
                    }
                }
                sink.flush().await?;
                return Ok(total);
            }
            total += self
                .copy_exact(size, sink, capture.as_deref_mut())
                .await?;
            let crlf = self.read_line().await?;
            if crlf != b"\r\n" && crlf != b"\n" {
                return Err(HttpError::BadChunk("missing chunk terminator".into()));
            }
            sink.write_all(&crlf).await?;
            total += crlf.len() as u64;
        }
    }

    /// Relays until EOF. Returns bytes copied.
    pub async fn copy_to_eof<W: AsyncWrite + Unpin>(
        &mut self,
        sink: &mut W,
        capture: Option<&mut Vec<u8>>,
    ) -> Result<u64, HttpError> {
        let mut total = 0u64;
        let mut capture = capture;
        if !self.buf.is_empty() {
            let bytes: Vec<u8> = std::mem::take(&mut self.buf);
            sink.write_all(&bytes).await?;
            if let Some(cap) = capture.as_deref_mut() {
                cap.extend_from_slice(&bytes);
            }
            total += bytes.len() as u64;
        }
        let mut chunk = [0u8; 16 * 1024];
        loop {
            let n = self.io.read(&mut chunk).await?;
            if n == 0 {
                sink.flush().await?;
                return Ok(total);
            }
            sink.write_all(&chunk[..n]).await?;
            if let Some(cap) = capture.as_deref_mut() {
                cap.extend_from_slice(&chunk[..n]);
            }
            total += n as u64;
        }
    }

    async fn read_line(&mut self) -> Result<Vec<u8>, HttpError> {
        loop {
            if let Some(pos) = self.buf.iter().position(|&b| b == b'\n') {
                return Ok(self.buf.drain(..=pos).collect());
            }
            if self.buf.len() > MAX_HEAD_BYTES {
                return Err(HttpError::BadChunk("oversized line".into()));
            }
            let mut chunk = [0u8; 1024];
            let n = self.io.read(&mut chunk).await?;
            if n == 0 {
                return Err(HttpError::UnexpectedEof);
            }
            self.buf.extend_from_slice(&chunk[..n]);
        }
    }

    pub async fn write_all(&mut self, bytes: &[u8]) -> Result<(), HttpError> {
        self.io.write_all(bytes).await?;
        self.io.flush().await?;
        Ok(())
    }
}

fn find_head_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4)
        .position(|w| w == b"\r\n\r\n")
        .map(|p| p + 4)
        .or_else(|| buf.windows(2).position(|w| w == b"\n\n").map(|p| p + 2))
}

#[derive(Debug, Clone)]
pub struct RequestHead {
    pub method: String,
    pub target: String,
    pub version: String,
    pub headers: Vec<(String, String)>,
    pub raw: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct ResponseHead {
    pub status: u16,
    pub headers: Vec<(String, String)>,
}

pub fn parse_request_head(raw: Vec<u8>) -> Result<RequestHead, HttpError> {
    let text = String::from_utf8_lossy(&raw);
    let mut lines = text.split_terminator('\n').map(|l| l.trim_end_matches('\r'));
    let request_line = lines.next().unwrap_or_default();
    let mut parts = request_line.split_ascii_whitespace();
    let method = parts
        .next()
        .ok_or_else(|| HttpError::Malformed("empty request line".into()))?
        .to_ascii_uppercase();
    let target = parts
        .next()
        .ok_or_else(|| HttpError::Malformed("request line lacks target".into()))?
        .to_string();
    let version = parts.next().unwrap_or("HTTP/1.1").to_string();
    let headers = parse_header_lines(lines);
    Ok(RequestHead {
        method,
        target,
        version,
        headers,
        raw,
    })
}

pub fn parse_response_head(raw: Vec<u8>) -> Result<ResponseHead, HttpError> {
    let text = String::from_utf8_lossy(&raw);
    let mut lines = text.split_terminator('\n').map(|l| l.trim_end_matches('\r'));
    let status_line = lines.next().unwrap_or_default();
    let mut parts = status_line.split_ascii_whitespace();
    let _version = parts.next();
    let status = parts
        .next()
        .and_then(|s| s.parse::<u16>().ok())
        .ok_or_else(|| HttpError::Malformed(format!("bad status line {status_line:?}")))?;
    let headers = parse_header_lines(lines);
    Ok(ResponseHead { status, headers })
}

fn parse_header_lines<'a>(lines: impl Iterator<Item = &'a str>) -> Vec<(String, String)> {
    lines
        .filter(|l| !l.is_empty())
        .filter_map(|line| {
            line.split_once(':')
                .map(|(name, value)| (name.trim().to_string(), value.trim().to_string()))
        })
        .collect()
}

pub fn header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

/// How a message body is delimited.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BodyFraming {
    None,
    ContentLength(u64),
    Chunked,
    /// Body runs to connection close (responses without explicit framing).
    ToEof,
}

pub fn request_framing(head: &RequestHead) -> Result<BodyFraming, HttpError> {
    if let Some(te) = header(&head.headers, "transfer-encoding") {
        if te.to_ascii_lowercase().contains("chunked") {
            return Ok(BodyFraming::Chunked);
        }
    }
    match header(&head.headers, "content-length") {
        Some(cl) => {
            let len = cl
                .trim()
                .parse::<u64>()
                .map_err(|_| HttpError::Malformed(format!("content-length {cl:?}")))?;
            Ok(if len == 0 {
                BodyFraming::None
            } else {
                BodyFraming::ContentLength(len)
            })
        }
        None => Ok(BodyFraming::None),
    }
}

pub fn response_framing(
    request_method: &str,
    head: &ResponseHead,
) -> Result<BodyFraming, HttpError> {
    if request_method == "HEAD"
        || (100..200).contains(&head.status)
        || head.status == 204
        || head.status == 304
    {
        return Ok(BodyFraming::None);
    }
    if let Some(te) = header(&head.headers, "transfer-encoding") {
        if te.to_ascii_lowercase().contains("chunked") {
            return Ok(BodyFraming::Chunked);
        }
    }
    match header(&head.headers, "content-length") {
        Some(cl) => {
            let len = cl
                .trim()
                .parse::<u64>()
                .map_err(|_| HttpError::Malformed(format!("content-length {cl:?}")))?;
            Ok(if len == 0 {
                BodyFraming::None
            } else {
                BodyFraming::ContentLength(len)
            })
        }
        None => Ok(BodyFraming::ToEof),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[tokio::test]
    async fn reads_head_and_body() {
        let wire = b"POST /p HTTP/1.1\r\nHost: h\r\nContent-Length: 5\r\n\r\nhello".to_vec();
        let (client, server) = tokio::io::duplex(1024);
        let mut stream = HttpStream::new(server);
        tokio::spawn(async move {
            let mut client = client;
            client.write_all(&wire).await.unwrap();
        });
        let head = stream.read_head().await.unwrap().unwrap();
        let parsed = parse_request_head(head).unwrap();
        assert_eq!(parsed.method, "POST");
        assert_eq!(parsed.target, "/p");
        assert_eq!(header(&parsed.headers, "HOST"), Some("h"));
        assert_eq!(request_framing(&parsed).unwrap(), BodyFraming::ContentLength(5));
        let mut sink = Vec::new();
        let copied = stream.copy_exact(5, &mut sink, None).await.unwrap();
        assert_eq!(copied, 5);
        assert_eq!(sink, b"hello");
    }

    #[tokio::test]
    async fn clean_eof_returns_none() {
        let (client, server) = tokio::io::duplex(64);
        drop(client);
        let mut stream = HttpStream::new(server);
        assert!(stream.read_head().await.unwrap().is_none());
    }

    #[tokio::test]
    async fn chunked_relay_counts_framing() {
        let body = b"4\r\nWiki\r\n5\r\npedia\r\n0\r\n\r\n".to_vec();
        let (client, server) = tokio::io::duplex(1024);
        let mut stream = HttpStream::new(server);
        tokio::spawn(async move {
            let mut client = client;
            client.write_all(&body).await.unwrap();
        });
        let mut sink = Vec::new();
        let mut payload = Vec::new();
        let total = stream.copy_chunked(&mut sink, Some(&mut payload)).await.unwrap();
        assert_eq!(total, 24, "framing bytes count toward transfer size");
        assert_eq!(sink, b"4\r\nWiki\r\n5\r\npedia\r\n0\r\n\r\n");
        assert_eq!(payload, b"Wikipedia");
    }

    #[test]
    fn response_framing_rules() {
        let head = |status: u16, headers: &str| {
            parse_response_head(format!("HTTP/1.1 {status} X\r\n{headers}\r\n").into_bytes())
                .unwrap()
        };
        assert_eq!(response_framing("HEAD", &head(200, "Content-Length: 10\r\n")).unwrap(), BodyFraming::None);
        assert_eq!(response_framing("GET", &head(204, "")).unwrap(), BodyFraming::None);
        assert_eq!(
            response_framing("GET", &head(200, "Content-Length: 10\r\n")).unwrap(),
            BodyFraming::ContentLength(10)
        );
        assert_eq!(
            response_framing("GET", &head(200, "Transfer-Encoding: chunked\r\n")).unwrap(),
            BodyFraming::Chunked
        );
        assert_eq!(response_framing("GET", &head(200, "")).unwrap(), BodyFraming::ToEof);
    }
}
