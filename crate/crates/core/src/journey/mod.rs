//! Declarative user journeys executed through the W3C WebDriver protocol.
//!
//! A journey is a data file (YAML or JSON), not code: a named sequence of
//! steps against one platform, repeatable N times. The engine drives a
//! real browser via a WebDriver server, with the capture proxy configured
//! into the browser session so every flow of the run is recorded.

mod runner;
mod webdriver;

pub use runner::{
    run_journey, scroll_feed, wait_network_idle, IdleWait, JourneyOptions, ScrollOutcome,
};
pub use webdriver::{DriverError, WebDriverClient};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JourneyError {
    #[error("invalid journey spec: {0}")]
    InvalidSpec(String),
    #[error("journey spec I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("step {step_index} ({step}) failed: {source}")]
    Step {
        step_index: usize,
        step: String,
        #[source]
        source: DriverError,
    },
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Proxy(#[from] crate::proxy::ProxyError),
}

/// Element selector: CSS, accessibility role + name, or visible text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Css { css: String },
    Role { role: String, name: String },
    Text { text: String },
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Target::Css { css } => write!(f, "css={css}"),
            Target::Role { role, name } => write!(f, "role={role}[{name}]"),
            Target::Text { text } => write!(f, "text={text}"),
        }
    }
}

/// Milliseconds, deserializable from a bare number or a `"500ms"` /
/// `"2s"` / `"5m"` string.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct DurationMs(pub u64);

impl DurationMs {
    pub fn as_duration(self) -> std::time::Duration {
        std::time::Duration::from_millis(self.0)
    }
}

impl<'de> Deserialize<'de> for DurationMs {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Millis(u64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Millis(ms) => Ok(DurationMs(ms)),
            Raw::Text(text) => parse_duration_ms(&text)
                .map(DurationMs)
                .ok_or_else(|| serde::de::Error::custom(format!("bad duration {text:?}"))),
        }
    }
}

fn parse_duration_ms(text: &str) -> Option<u64> {
    let text = text.trim();
    let split = text.find(|c: char| !c.is_ascii_digit() && c != '.')?;
    let (number, unit) = text.split_at(split);
    let value: f64 = number.parse().ok()?;
    let factor = match unit.trim() {
        "ms" => 1.0,
        "s" => 1000.0,
        "m" | "min" => 60_000.0,
        "h" => 3_600_000.0,
        _ => return None,
    };
    Some((value * factor).round() as u64)
}

/// One journey step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// Navigate to a URL. Every journey starts with one.
    Goto(String),
    Click(Target),
    TypeText {
        target: Target,
        text: String,
        /// Delay between keystrokes; encoded as pause metadata in the
        /// dispatched key actions.
        #[serde(default = "default_key_delay")]
        per_key_delay: DurationMs,
    },
    /// Issue scroll commands at `interval` until `duration` elapses (or
    /// for a fixed number of `steps`).
    Scroll {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        duration: Option<DurationMs>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        steps: Option<u32>,
        #[serde(default = "default_scroll_interval")]
        interval: DurationMs,
        /// Pixels per scroll command.
        #[serde(default = "default_scroll_step_px")]
        step_px: u32,
    },
    WaitFixed(DurationMs),
    WaitNetworkIdle {
        #[serde(default = "default_quiet_period")]
        quiet: DurationMs,
        #[serde(default = "default_idle_timeout")]
        timeout: DurationMs,
    },
    AssertVisible(Target),
}

fn default_key_delay() -> DurationMs {
    DurationMs(100)
}
fn default_scroll_interval() -> DurationMs {
    DurationMs(2000)
}
fn default_scroll_step_px() -> u32 {
    600
}
fn default_quiet_period() -> DurationMs {
    DurationMs(1000)
}
fn default_idle_timeout() -> DurationMs {
    DurationMs(30_000)
}

impl Step {
    pub fn kind(&self) -> &'static str {
        match self {
            Step::Goto(_) => "goto",
            Step::Click(_) => "click",
            Step::TypeText { .. } => "type_text",
            Step::Scroll { .. } => "scroll",
            Step::WaitFixed(_) => "wait_fixed",
            Step::WaitNetworkIdle { .. } => "wait_network_idle",
            Step::AssertVisible(_) => "assert_visible",
        }
    }
}

/// A declarative journey: named steps against one platform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JourneySpec {
    pub name: String,
    #[serde(rename = "platform")]
    pub platform_id: String,
    #[serde(default = "default_repeat")]
    pub repeat: u32,
    pub steps: Vec<Step>,
}

fn default_repeat() -> u32 {
    1
}

impl JourneySpec {
    pub fn load_str(text: &str) -> Result<Self, JourneyError> {
        // YAML is parsed into a generic tree first so steps read as plain
        // single-key maps (`- goto: url`) in both YAML and JSON inputs.
        let tree: serde_yaml::Value =
            serde_yaml::from_str(text).map_err(|e| JourneyError::InvalidSpec(e.to_string()))?;
        let json = serde_json::to_value(&tree)
            .map_err(|e| JourneyError::InvalidSpec(e.to_string()))?;
        let spec: JourneySpec = serde_json::from_value(json)
            .map_err(|e| JourneyError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load_file(path: impl AsRef<std::path::Path>) -> Result<Self, JourneyError> {
        let text = std::fs::read_to_string(path)?;
        Self::load_str(&text)
    }

    pub fn validate(&self) -> Result<(), JourneyError> {
        if self.steps.is_empty() {
            return Err(JourneyError::InvalidSpec("journey has no steps".into()));
        }
        if !matches!(self.steps[0], Step::Goto(_)) {
            return Err(JourneyError::InvalidSpec(
                "first step must be a goto".into(),
            ));
        }
        if self.repeat == 0 {
            return Err(JourneyError::InvalidSpec("repeat must be positive".into()));
        }
        for (idx, step) in self.steps.iter().enumerate() {
            match step {
                Step::TypeText { text, .. } if text.is_empty() => {
                    return Err(JourneyError::InvalidSpec(format!(
                        "step {idx}: type_text with empty text"
                    )));
                }
                Step::Scroll {
                    duration, steps, ..
                } => {
                    if duration.is_none() == steps.is_none() {
                        return Err(JourneyError::InvalidSpec(format!(
                            "step {idx}: scroll needs exactly one of duration or steps"
                        )));
                    }
                    if let Some(d) = duration {
                        if d.0 == 0 && steps.is_none() {
                            // Zero-duration scroll is legal: it issues no
                            // commands.
                        }
                    }
                }
                Step::WaitFixed(d) if d.0 == 0 => {
                    return Err(JourneyError::InvalidSpec(format!(
                        "step {idx}: wait_fixed duration must be positive"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
name: post-toot
platform: mastodon
repeat: 2
steps:
  - goto: https://mastodon.example/home
  - wait_fixed: 500
  - type_text:
      target: { css: "form.compose-form textarea" }
      text: "This is an automated test post that will be deleted in a few minutes."
      per_key_delay: 100
  - wait_fixed: 500
  - click: { role: button, name: Post }
  - wait_fixed: 500
  - click: { text: "This is an automated test post that will be deleted in a few minutes." }
  - wait_fixed: 1000
  - wait_network_idle: { quiet: 1s, timeout: 30s }
"#;

    #[test]
    fn parses_listing_shaped_spec() {
        let spec = JourneySpec::load_str(SAMPLE).unwrap();
        assert_eq!(spec.name, "post-toot");
        assert_eq!(spec.repeat, 2);
        assert_eq!(spec.steps.len(), 9);
        assert!(matches!(&spec.steps[0], Step::Goto(url) if url.ends_with("/home")));
        match &spec.steps[2] {
            Step::TypeText { per_key_delay, target, .. } => {
                assert_eq!(per_key_delay.0, 100);
                assert!(matches!(target, Target::Css { .. }));
            }
            other => panic!("expected type_text, got {other:?}"),
        }
        match &spec.steps[8] {
            Step::WaitNetworkIdle { quiet, timeout } => {
                assert_eq!(quiet.0, 1000);
                assert_eq!(timeout.0, 30_000);
            }
            other => panic!("expected wait_network_idle, got {other:?}"),
        }
    }

    #[test]
    fn duration_strings() {
        assert_eq!(parse_duration_ms("500ms"), Some(500));
        assert_eq!(parse_duration_ms("2s"), Some(2000));
        assert_eq!(parse_duration_ms("5m"), Some(300_000));
        assert_eq!(parse_duration_ms("1.5s"), Some(1500));
        assert_eq!(parse_duration_ms("xyz"), None);
    }

    #[test]
    fn first_step_must_be_goto() {
        let err = JourneySpec::load_str(
            "name: j\nplatform: x\nsteps:\n  - wait_fixed: 100\n",
        )
        .unwrap_err();
        assert!(matches!(err, JourneyError::InvalidSpec(_)));
    }

    #[test]
    fn scroll_needs_one_bound() {
        let err = JourneySpec::load_str(
            "name: j\nplatform: x\nsteps:\n  - goto: https://e.org\n  - scroll: { interval: 2s }\n",
        )
        .unwrap_err();
        assert!(matches!(err, JourneyError::InvalidSpec(_)));
        let ok = JourneySpec::load_str(
            "name: j\nplatform: x\nsteps:\n  - goto: https://e.org\n  - scroll: { duration: 5m, interval: 2s }\n",
        );
        assert!(ok.is_ok());
    }

    #[test]
    fn json_specs_also_parse() {
        let spec = JourneySpec::load_str(
            r#"{"name": "j", "platform": "x", "steps": [{"goto": "https://e.org"}]}"#,
        )
        .unwrap();
        assert_eq!(spec.repeat, 1);
    }
}
