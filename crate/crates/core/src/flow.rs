//! Canonical flow and run data model shared by every other module.
//!
//! A [`HttpFlow`] is one request/response exchange with wire-size byte
//! accounting, cookie metadata, and millisecond timestamps. A
//! [`JourneyRun`] groups the flows captured during one scripted journey
//! execution.

use chrono::{DateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Identifier of a single captured exchange. Unique within a store.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlowId(String);

impl FlowId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn random() -> Self {
        Self(uuid::Uuid::new_v4().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for FlowId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Identifier of one journey execution.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RunId(String);

impl RunId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn random() -> Self {
        Self(uuid::Uuid::new_v4().to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for RunId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// The resource-usage category assigned to a flow.
///
/// Flows start out unclassified (`HttpFlow::category == None`) and are
/// assigned exactly one category by the classifier. Ambiguous traffic goes
/// to [`Category::Other`], never to tracking, so downstream overhead
/// figures stay lower bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    CoreNavigation,
    UserContent,
    SurveillanceTracking,
    Other,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::CoreNavigation,
        Category::UserContent,
        Category::SurveillanceTracking,
        Category::Other,
    ];

    /// Human-readable label used in rendered reports.
    pub fn label(self) -> &'static str {
        match self {
            Category::CoreNavigation => "Core & navigation",
            Category::UserContent => "User content",
            Category::SurveillanceTracking => "Surveillance & tracking",
            Category::Other => "Other",
        }
    }
}

/// `SameSite` cookie attribute values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SameSite {
    Strict,
    Lax,
    None,
}

/// One HTTP cookie as observed on the wire.
///
/// Values are redacted by default: only the byte length is kept, since a
/// store may hold live session tokens. `value` is populated only when the
/// capture configuration explicitly permits it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cookie {
    pub name: String,
    pub value_bytes: u64,
    pub value: Option<String>,
    pub domain: Option<String>,
    pub secure: bool,
    pub http_only: bool,
    pub same_site: Option<SameSite>,
}

impl Cookie {
    pub fn new(name: impl Into<String>, value_bytes: u64) -> Self {
        Self {
            name: name.into(),
            value_bytes,
            value: None,
            domain: None,
            secure: false,
            http_only: false,
            same_site: None,
        }
    }
}

/// Structured URL of a flow: scheme, host, optional port, path, query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowUrl {
    pub scheme: String,
    pub host: String,
    pub port: Option<u16>,
    pub path: String,
    pub query: Option<String>,
}

impl FlowUrl {
    pub fn parse(raw: &str) -> Result<Self, FlowError> {
        let parsed = url::Url::parse(raw).map_err(|e| FlowError::InvalidUrl {
            url: raw.to_string(),
            reason: e.to_string(),
        })?;
        let host = parsed
            .host_str()
            .ok_or_else(|| FlowError::InvalidUrl {
                url: raw.to_string(),
                reason: "missing host".to_string(),
            })?
            .to_string();
        Ok(Self {
            scheme: parsed.scheme().to_string(),
            host,
            port: parsed.port(),
            path: parsed.path().to_string(),
            query: parsed.query().map(str::to_string),
        })
    }

    /// Reassembles the full URL string.
    pub fn full(&self) -> String {
        let mut out = format!("{}://{}", self.scheme, self.host);
        if let Some(port) = self.port {
            out.push(':');
            out.push_str(&port.to_string());
        }
        out.push_str(&self.path);
        if let Some(q) = &self.query {
            out.push('?');
            out.push_str(q);
        }
        out
    }

    /// File extension of the last path segment: suffix after the final
    /// dot, lowercased, query string ignored. `None` when the segment has
    /// no dot or the suffix is empty.
    pub fn extension(&self) -> Option<String> {
        let segment = self.path.rsplit('/').next()?;
        let (stem, ext) = segment.rsplit_once('.')?;
        if stem.is_empty() || ext.is_empty() {
            return None;
        }
        Some(ext.to_ascii_lowercase())
    }
}

/// One request/response pair with byte accounting, cookies, and timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpFlow {
    pub flow_id: FlowId,
    pub run_id: RunId,
    pub url: FlowUrl,
    pub method: String,
    pub status: u16,
    pub request_header_bytes: u64,
    pub request_body_bytes: u64,
    pub response_header_bytes: u64,
    pub response_body_bytes: u64,
    /// True when any wire size was unavailable and a substitute was used.
    pub size_is_estimated: bool,
    pub content_type: Option<String>,
    pub request_cookies: Vec<Cookie>,
    pub set_cookies: Vec<Cookie>,
    /// Request payload text, kept only when the capture configuration
    /// records bodies. Needed for beacon detection on POST telemetry.
    pub request_payload: Option<String>,
    #[serde(with = "chrono::serde::ts_milliseconds")]
    pub started_at: DateTime<Utc>,
    #[serde(with = "chrono::serde::ts_milliseconds")]
    pub completed_at: DateTime<Utc>,
    /// `None` until the classifier runs; never reverts to `None`.
    pub category: Option<Category>,
}

impl HttpFlow {
    /// Sum of the four byte-count fields.
    pub fn total_bytes(&self) -> u64 {
        self.request_header_bytes
            + self.request_body_bytes
            + self.response_header_bytes
            + self.response_body_bytes
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.completed_at < self.started_at {
            return Err(FlowError::TimeOrder {
                flow_id: self.flow_id.clone(),
            });
        }
        for cookie in self.request_cookies.iter().chain(&self.set_cookies) {
            if cookie.name.is_empty() {
                return Err(FlowError::EmptyCookieName {
                    flow_id: self.flow_id.clone(),
                });
            }
        }
        Ok(())
    }
}

/// One timed execution of a journey and the flows it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JourneyRun {
    pub run_id: RunId,
    pub journey_name: String,
    pub platform_id: String,
    #[serde(with = "chrono::serde::ts_milliseconds")]
    pub started_at: DateTime<Utc>,
    #[serde(with = "chrono::serde::ts_milliseconds")]
    pub ended_at: DateTime<Utc>,
    pub flow_ids: Vec<FlowId>,
    /// Set when the journey aborted before completing all steps.
    #[serde(default)]
    pub incomplete: bool,
}

impl JourneyRun {
    /// Measured duration: first request started to last response completed.
    pub fn duration(&self) -> chrono::Duration {
        self.ended_at - self.started_at
    }

    pub fn duration_ms(&self) -> i64 {
        self.duration().num_milliseconds()
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.ended_at < self.started_at {
            return Err(FlowError::RunTimeOrder {
                run_id: self.run_id.clone(),
            });
        }
        Ok(())
    }
}

/// Current UTC time truncated to millisecond precision, the resolution the
/// stored record format round-trips exactly.
pub fn now_ms() -> DateTime<Utc> {
    let now = Utc::now();
    Utc.timestamp_millis_opt(now.timestamp_millis()).unwrap()
}

/// Millisecond-precision timestamp from epoch milliseconds.
pub fn ts_ms(millis: i64) -> DateTime<Utc> {
    Utc.timestamp_millis_opt(millis).unwrap()
}

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid url {url:?}: {reason}")]
    InvalidUrl { url: String, reason: String },
    #[error("flow {flow_id} completed before it started")]
    TimeOrder { flow_id: FlowId },
    #[error("run {run_id} ended before it started")]
    RunTimeOrder { run_id: RunId },
    #[error("flow {flow_id} carries a cookie with an empty name")]
    EmptyCookieName { flow_id: FlowId },
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_flow(run_id: &RunId, idx: u32) -> HttpFlow {
        HttpFlow {
            flow_id: FlowId::new(format!("{run_id}-{idx:04}")),
            run_id: run_id.clone(),
            url: FlowUrl::parse("https://example.org/api/v1/timelines/home?limit=20").unwrap(),
            method: "GET".to_string(),
            status: 200,
            request_header_bytes: 420,
            request_body_bytes: 0,
            response_header_bytes: 180,
            response_body_bytes: 5000,
            size_is_estimated: false,
            content_type: Some("application/json".to_string()),
            request_cookies: vec![Cookie::new("sid", 32)],
            set_cookies: vec![],
            request_payload: None,
            started_at: ts_ms(1_700_000_000_000 + i64::from(idx) * 10),
            completed_at: ts_ms(1_700_000_000_050 + i64::from(idx) * 10),
            category: None,
        }
    }

    #[test]
    fn total_bytes_is_sum_of_components() {
        let run_id = RunId::new("r1");
        let flow = sample_flow(&run_id, 0);
        assert_eq!(flow.total_bytes(), 420 + 180 + 5000);
    }

    #[test]
    fn url_extension_rules() {
        let u = |s: &str| FlowUrl::parse(s).unwrap();
        assert_eq!(u("https://h.example/a/pic.JPG?x=1.mp4").extension(), Some("jpg".into()));
        assert_eq!(u("https://h.example/a/archive.tar.gz").extension(), Some("gz".into()));
        assert_eq!(u("https://h.example/plain").extension(), None);
        assert_eq!(u("https://h.example/dir/.hidden").extension(), None);
        assert_eq!(u("https://h.example/trailing.").extension(), None);
        assert_eq!(u("https://h.example/").extension(), None);
    }

    #[test]
    fn url_round_trip() {
        let url = FlowUrl::parse("https://example.org:8443/p/q.json?a=1&b=2").unwrap();
        assert_eq!(url.full(), "https://example.org:8443/p/q.json?a=1&b=2");
        assert_eq!(url.port, Some(8443));
    }

    #[test]
    fn validate_rejects_reversed_timestamps() {
        let run_id = RunId::new("r1");
        let mut flow = sample_flow(&run_id, 0);
        flow.completed_at = flow.started_at - chrono::Duration::milliseconds(1);
        assert!(matches!(flow.validate(), Err(FlowError::TimeOrder { .. })));
    }

    #[test]
    fn run_duration_is_end_minus_start() {
        let run = JourneyRun {
            run_id: RunId::new("r1"),
            journey_name: "scroll".into(),
            platform_id: "x".into(),
            started_at: ts_ms(1_000),
            ended_at: ts_ms(361_000),
            flow_ids: vec![],
            incomplete: false,
        };
        assert_eq!(run.duration_ms(), 360_000);
    }

    #[test]
    fn category_serializes_snake_case() {
        let s = serde_json::to_string(&Category::SurveillanceTracking).unwrap();
        assert_eq!(s, "\"surveillance_tracking\"");
    }
}
