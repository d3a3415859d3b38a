//! HTTP Archive (HAR 1.2) ingestion.
//!
//! Turns recorded browser traffic into [`HttpFlow`] records so every
//! downstream analysis also works without live capture. Byte accounting is
//! lossless with respect to the documented size-fallback chain: a HAR size
//! of −1 means "unknown" and maps to `bodySize → content.size → 0`, with
//! `size_is_estimated` set whenever a substitute was used.

use chrono::{DateTime, Utc};
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cookies::extract_cookies;
use crate::flow::{ts_ms, FlowId, FlowUrl, HttpFlow, JourneyRun, RunId};

#[derive(Debug, Error)]
pub enum HarError {
    #[error("malformed HAR document at {path}: {detail}")]
    ParseError { path: String, detail: String },
    #[error("unsupported HAR version {0:?} (expected 1.x)")]
    UnsupportedVersion(String),
}

/// Parsed HAR document, kept close to the raw interchange shape.
#[derive(Debug)]
pub struct HarDocument {
    pub version: String,
    pub creator: String,
    pub entries: Vec<HarEntry>,
    digest: [u8; 32],
}

#[derive(Debug, Deserialize)]
struct RawHar {
    log: RawLog,
}

#[derive(Debug, Deserialize)]
struct RawLog {
    version: String,
    #[serde(default)]
    creator: Option<RawCreator>,
    #[serde(default)]
    entries: Vec<HarEntry>,
}

#[derive(Debug, Deserialize)]
struct RawCreator {
    #[serde(default)]
    name: String,
    #[serde(default)]
    version: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HarEntry {
    pub started_date_time: String,
    /// Total entry time in milliseconds; −1 when unknown.
    #[serde(default)]
    pub time: Option<f64>,
    pub request: HarRequest,
    pub response: HarResponse,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HarRequest {
    pub method: String,
    pub url: String,
    #[serde(default)]
    pub headers: Vec<HarHeader>,
    #[serde(default)]
    pub headers_size: Option<i64>,
    #[serde(default)]
    pub body_size: Option<i64>,
    #[serde(default)]
    pub post_data: Option<HarPostData>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HarResponse {
    #[serde(default)]
    pub status: u16,
    #[serde(default)]
    pub headers: Vec<HarHeader>,
    #[serde(default)]
    pub headers_size: Option<i64>,
    #[serde(default)]
    pub body_size: Option<i64>,
    #[serde(default)]
    pub content: Option<HarContent>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct HarHeader {
    pub name: String,
    pub value: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HarPostData {
    #[serde(default)]
    pub mime_type: Option<String>,
    #[serde(default)]
    pub text: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct HarContent {
    #[serde(default)]
    pub size: Option<i64>,
    #[serde(default)]
    pub mime_type: Option<String>,
}

impl HarDocument {
    /// Parses HAR 1.x bytes. Structural errors report the JSON path of the
    /// offending entry; non-1.x versions are rejected.
    pub fn parse(bytes: &[u8]) -> Result<Self, HarError> {
        let mut deserializer = serde_json::Deserializer::from_slice(bytes);
        let raw: RawHar =
            serde_path_to_error::deserialize(&mut deserializer).map_err(|e| HarError::ParseError {
                path: e.path().to_string(),
                detail: e.inner().to_string(),
            })?;
        if !raw.log.version.starts_with("1.") {
            return Err(HarError::UnsupportedVersion(raw.log.version));
        }
        let creator = raw
            .log
            .creator
            .map(|c| format!("{} {}", c.name, c.version).trim().to_string())
            .unwrap_or_default();
        Ok(Self {
            version: raw.log.version,
            creator,
            entries: raw.log.entries,
            digest: Sha256::digest(bytes).into(),
        })
    }
}

/// Parses a HAR document and converts it into one run plus its flows.
pub fn ingest(
    bytes: &[u8],
    platform_id: &str,
    journey_name: &str,
) -> Result<(JourneyRun, Vec<HttpFlow>), HarError> {
    let doc = HarDocument::parse(bytes)?;
    har_to_run(&doc, platform_id, journey_name)
}

/// Converts parsed entries into a [`JourneyRun`] and its [`HttpFlow`]s.
///
/// Entries are ordered by `startedDateTime` (ties keep file order); the
/// run spans the first request start to the last response completion. The
/// run id is a content digest, so re-ingesting the same document yields
/// identical records.
pub fn har_to_run(
    doc: &HarDocument,
    platform_id: &str,
    journey_name: &str,
) -> Result<(JourneyRun, Vec<HttpFlow>), HarError> {
    let run_id = derived_run_id(doc, platform_id, journey_name);

    let mut ordered: Vec<(usize, &HarEntry, DateTime<Utc>)> = Vec::with_capacity(doc.entries.len());
    for (idx, entry) in doc.entries.iter().enumerate() {
        let started = parse_started(&entry.started_date_time, idx)?;
        ordered.push((idx, entry, started));
    }
    ordered.sort_by(|a, b| a.2.cmp(&b.2).then(a.0.cmp(&b.0)));

    let mut flows = Vec::with_capacity(ordered.len());
    for (position, (idx, entry, started_at)) in ordered.iter().enumerate() {
        flows.push(entry_to_flow(entry, *idx, position, &run_id, *started_at)?);
    }

    let started_at = flows
        .iter()
        .map(|f| f.started_at)
        .min()
        .unwrap_or_else(|| ts_ms(0));
    let ended_at = flows
        .iter()
        .map(|f| f.completed_at)
        .max()
        .unwrap_or(started_at);
    let run = JourneyRun {
        run_id,
        journey_name: journey_name.to_string(),
        platform_id: platform_id.to_string(),
        started_at,
        ended_at,
        flow_ids: flows.iter().map(|f| f.flow_id.clone()).collect(),
        incomplete: false,
    };
    Ok((run, flows))
}

fn derived_run_id(doc: &HarDocument, platform_id: &str, journey_name: &str) -> RunId {
    let mut hasher = Sha256::new();
    hasher.update(doc.digest);
    hasher.update([0]);
    hasher.update(platform_id.as_bytes());
    hasher.update([0]);
    hasher.update(journey_name.as_bytes());
    let digest = hasher.finalize();
    RunId::new(format!("har-{}", hex::encode(&digest[..12])))
}

fn parse_started(raw: &str, idx: usize) -> Result<DateTime<Utc>, HarError> {
    let parsed = DateTime::parse_from_rfc3339(raw).map_err(|e| HarError::ParseError {
        path: format!("log.entries[{idx}].startedDateTime"),
        detail: e.to_string(),
    })?;
    Ok(ts_ms(parsed.with_timezone(&Utc).timestamp_millis()))
}

fn entry_to_flow(
    entry: &HarEntry,
    idx: usize,
    position: usize,
    run_id: &RunId,
    started_at: DateTime<Utc>,
) -> Result<HttpFlow, HarError> {
    let url = FlowUrl::parse(&entry.request.url).map_err(|e| HarError::ParseError {
        path: format!("log.entries[{idx}].request.url"),
        detail: e.to_string(),
    })?;

    let mut estimated = false;
    let request_header_bytes = size_or_zero(entry.request.headers_size, &mut estimated);
    let request_body_bytes = size_or_zero(entry.request.body_size, &mut estimated);
    let response_header_bytes = size_or_zero(entry.response.headers_size, &mut estimated);
    let response_body_bytes = response_body_size(&entry.response, &mut estimated);

    let req_headers = to_pairs(&entry.request.headers);
    let resp_headers = to_pairs(&entry.response.headers);
    let (request_cookies, _) = extract_cookies(&req_headers, false);
    let (_, set_cookies) = extract_cookies(&resp_headers, false);

    let content_type = entry
        .response
        .content
        .as_ref()
        .and_then(|c| c.mime_type.clone())
        .filter(|m| !m.is_empty())
        .or_else(|| header_value(&resp_headers, "content-type"));

    let completed_at = match entry.time {
        Some(t) if t >= 0.0 => started_at + chrono::Duration::milliseconds(t.round() as i64),
        _ => started_at,
    };

    Ok(HttpFlow {
        flow_id: FlowId::new(format!("{run_id}-{position:05}")),
        run_id: run_id.clone(),
        url,
        method: entry.request.method.to_ascii_uppercase(),
        status: entry.response.status,
        request_header_bytes,
        request_body_bytes,
        response_header_bytes,
        response_body_bytes,
        size_is_estimated: estimated,
        content_type,
        request_cookies,
        set_cookies,
        request_payload: entry.request.post_data.as_ref().and_then(|p| p.text.clone()),
        started_at,
        completed_at,
        category: None,
    })
}

fn size_or_zero(size: Option<i64>, estimated: &mut bool) -> u64 {
    match size {
        Some(s) if s >= 0 => s as u64,
        _ => {
            *estimated = true;
            0
        }
    }
}

fn response_body_size(response: &HarResponse, estimated: &mut bool) -> u64 {
    match response.body_size {
        Some(s) if s >= 0 => s as u64,
        _ => {
            *estimated = true;
            match response.content.as_ref().and_then(|c| c.size) {
                Some(s) if s >= 0 => s as u64,
                _ => 0,
            }
        }
    }
}

fn to_pairs(headers: &[HarHeader]) -> Vec<(String, String)> {
    headers
        .iter()
        .map(|h| (h.name.clone(), h.value.clone()))
        .collect()
}

fn header_value(headers: &[(String, String)], name: &str) -> Option<String> {
    headers
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_entry_har(request_extra: &str, response_extra: &str) -> String {
        format!(
            r#"{{
              "log": {{
                "version": "1.2",
                "creator": {{"name": "test", "version": "1"}},
                "entries": [
                  {{
                    "startedDateTime": "2025-03-01T12:00:00.000Z",
                    "time": 120.0,
                    "request": {{
                      "method": "GET",
                      "url": "https://example.org/feed",
                      "headers": [{{"name": "Cookie", "value": "a=1; b=22"}}]
                      {request_extra}
                    }},
                    "response": {{
                      "status": 200,
                      "headers": [{{"name": "Set-Cookie", "value": "sid=xyz; Secure; HttpOnly"}}]
                      {response_extra}
                    }}
                  }}
                ]
              }}
            }}"#
        )
    }

    #[test]
    fn sums_recorded_sizes() {
        let har = one_entry_har(
            r#", "headersSize": 200, "bodySize": 300"#,
            r#", "headersSize": 150, "bodySize": 1000"#,
        );
        let (_, flows) = ingest(har.as_bytes(), "x", "scroll").unwrap();
        assert_eq!(flows.len(), 1);
        assert_eq!(flows[0].total_bytes(), 1650);
        assert!(!flows[0].size_is_estimated);
    }

    #[test]
    fn negative_body_size_falls_back_to_content_size() {
        let har = one_entry_har(
            r#", "headersSize": 100, "bodySize": 0"#,
            r#", "headersSize": 100, "bodySize": -1, "content": {"size": 4096, "mimeType": "image/jpeg"}"#,
        );
        let (_, flows) = ingest(har.as_bytes(), "x", "scroll").unwrap();
        assert_eq!(flows[0].response_body_bytes, 4096);
        assert!(flows[0].size_is_estimated);
        assert_eq!(flows[0].content_type.as_deref(), Some("image/jpeg"));
    }

    #[test]
    fn empty_entries_produce_empty_zero_duration_run() {
        let har = r#"{"log": {"version": "1.2", "entries": []}}"#;
        let (run, flows) = ingest(har.as_bytes(), "x", "scroll").unwrap();
        assert!(flows.is_empty());
        assert_eq!(run.duration_ms(), 0);
    }

    #[test]
    fn cookies_extracted_from_headers() {
        let har = one_entry_har("", "");
        let (_, flows) = ingest(har.as_bytes(), "x", "scroll").unwrap();
        let flow = &flows[0];
        assert_eq!(flow.request_cookies.len(), 2);
        assert_eq!(flow.request_cookies[0].value_bytes, 1);
        assert_eq!(flow.request_cookies[1].value_bytes, 2);
        assert_eq!(flow.set_cookies.len(), 1);
        assert!(flow.set_cookies[0].secure && flow.set_cookies[0].http_only);
    }

    #[test]
    fn run_spans_first_start_to_last_completion() {
        let har = r#"{
          "log": {"version": "1.2", "entries": [
            {"startedDateTime": "2025-03-01T12:00:01.000Z", "time": 50.0,
             "request": {"method": "GET", "url": "https://e.org/b"}, "response": {"status": 200}},
            {"startedDateTime": "2025-03-01T12:00:00.000Z", "time": 2500.0,
             "request": {"method": "GET", "url": "https://e.org/a"}, "response": {"status": 200}}
          ]}
        }"#;
        let (run, flows) = ingest(har.as_bytes(), "x", "scroll").unwrap();
        // Sorted by start time, not file order.
        assert_eq!(flows[0].url.path, "/a");
        assert_eq!(run.duration_ms(), 2500);
    }

    #[test]
    fn malformed_document_reports_entry_path() {
        let har = r#"{"log": {"version": "1.2", "entries": [
            {"startedDateTime": "2025-03-01T12:00:00Z",
             "request": {"method": "GET"}, "response": {"status": 200}}
        ]}}"#;
        let err = ingest(har.as_bytes(), "x", "scroll").unwrap_err();
        match err {
            HarError::ParseError { path, .. } => {
                assert!(path.contains("log.entries[0].request"), "path was {path}");
            }
            other => panic!("expected ParseError, got {other}"),
        }
    }

    #[test]
    fn unsupported_version_rejected() {
        let har = r#"{"log": {"version": "2.0", "entries": []}}"#;
        assert!(matches!(
            ingest(har.as_bytes(), "x", "s").unwrap_err(),
            HarError::UnsupportedVersion(v) if v == "2.0"
        ));
    }

    #[test]
    fn ingestion_is_deterministic() {
        let har = one_entry_har(r#", "bodySize": 10"#, r#", "bodySize": 20"#);
        let a = ingest(har.as_bytes(), "x", "scroll").unwrap();
        let b = ingest(har.as_bytes(), "x", "scroll").unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn post_payload_is_retained() {
        let har = r#"{"log": {"version": "1.2", "entries": [
            {"startedDateTime": "2025-03-01T12:00:00Z", "time": 10.0,
             "request": {"method": "POST", "url": "https://e.org/i/api/1.1/graphql/user_flow.json",
                         "bodySize": 64,
                         "postData": {"mimeType": "application/json", "text": "{\"action\": \"impression\"}"}},
             "response": {"status": 200, "bodySize": 2}}
        ]}}"#;
        let (_, flows) = ingest(har.as_bytes(), "x", "scroll").unwrap();
        assert_eq!(
            flows[0].request_payload.as_deref(),
            Some("{\"action\": \"impression\"}")
        );
    }
}
