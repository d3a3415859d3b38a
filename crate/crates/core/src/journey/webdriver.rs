//! Minimal W3C WebDriver wire-protocol client.
//!
//! Only the commands the journey engine needs: session lifecycle,
//! navigation, element lookup/interaction, key actions, and script
//! execution for scrolling.

use serde_json::{json, Value};
use thiserror::Error;

use super::Target;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error("driver transport: {0}")]
    Transport(String),
    #[error("driver protocol error {error:?}: {message}")]
    Protocol { error: String, message: String },
    #[error("no active session")]
    NoSession,
    #[error("malformed driver response: {0}")]
    BadResponse(String),
}

const ELEMENT_KEY: &str = "element-6066-11e4-a52e-4f735466cecf";

pub struct WebDriverClient {
    http: reqwest::Client,
    endpoint: String,
    session_id: Option<String>,
}

impl WebDriverClient {
    pub fn new(endpoint: &str) -> Self {
        Self {
            http: reqwest::Client::new(),
            endpoint: endpoint.trim_end_matches('/').to_string(),
            session_id: None,
        }
    }

    pub fn session_id(&self) -> Option<&str> {
        self.session_id.as_deref()
    }

    /// Opens a session. When a proxy address is given the browser is
    /// launched with it as both HTTP and TLS proxy.
    pub async fn new_session(
        &mut self,
        proxy_address: Option<&str>,
        accept_insecure_certs: bool,
    ) -> Result<String, DriverError> {
        let mut always_match = serde_json::Map::new();
        if let Some(address) = proxy_address {
            always_match.insert(
                "proxy".to_string(),
                json!({
                    "proxyType": "manual",
                    "httpProxy": address,
                    "sslProxy": address,
                }),
            );
        }
        if accept_insecure_certs {
            always_match.insert("acceptInsecureCerts".to_string(), json!(true));
        }
        let body = json!({"capabilities": {"alwaysMatch": Value::Object(always_match)}});
        let value = self.post("/session", &body).await?;
        let session_id = value
            .get("sessionId")
            .and_then(Value::as_str)
            .ok_or_else(|| DriverError::BadResponse("missing sessionId".into()))?
            .to_string();
        self.session_id = Some(session_id.clone());
        Ok(session_id)
    }

    pub async fn navigate(&self, url: &str) -> Result<(), DriverError> {
        let path = format!("/session/{}/url", self.require_session()?);
        self.post(&path, &json!({ "url": url })).await?;
        Ok(())
    }

    pub async fn find_element(&self, target: &Target) -> Result<String, DriverError> {
        let (using, value) = locator(target);
        let path = format!("/session/{}/element", self.require_session()?);
        let response = self
            .post(&path, &json!({ "using": using, "value": value }))
            .await?;
        response
            .get(ELEMENT_KEY)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| DriverError::BadResponse("missing element reference".into()))
    }

    pub async fn click(&self, element_id: &str) -> Result<(), DriverError> {
        let path = format!(
            "/session/{}/element/{element_id}/click",
            self.require_session()?
        );
        self.post(&path, &json!({})).await?;
        Ok(())
    }

    pub async fn is_displayed(&self, element_id: &str) -> Result<bool, DriverError> {
        let path = format!(
            "/session/{}/element/{element_id}/displayed",
            self.require_session()?
        );
        let value = self.get(&path).await?;
        Ok(value.as_bool().unwrap_or(false))
    }

    /// Dispatches key actions typing `text` with `per_key_delay_ms` pause
    /// metadata between keystrokes, the wire encoding of a delayed
    /// sequential type.
    pub async fn type_sequentially(
        &self,
        text: &str,
        per_key_delay_ms: u64,
    ) -> Result<(), DriverError> {
        let mut actions = Vec::new();
        let mut first = true;
        for ch in text.chars() {
            if !first && per_key_delay_ms > 0 {
                actions.push(json!({"type": "pause", "duration": per_key_delay_ms}));
            }
            first = false;
            let key = ch.to_string();
            actions.push(json!({"type": "keyDown", "value": key}));
            actions.push(json!({"type": "keyUp", "value": key}));
        }
        let body = json!({
            "actions": [{
                "type": "key",
                "id": "keyboard",
                "actions": actions,
            }]
        });
        let path = format!("/session/{}/actions", self.require_session()?);
        self.post(&path, &body).await?;
        Ok(())
    }

    pub async fn execute_script(&self, script: &str, args: Value) -> Result<Value, DriverError> {
        let path = format!("/session/{}/execute/sync", self.require_session()?);
        self.post(&path, &json!({ "script": script, "args": args }))
            .await
    }

    pub async fn delete_session(&mut self) -> Result<(), DriverError> {
        let session = self.require_session()?.to_string();
        let url = format!("{}/session/{session}", self.endpoint);
        let response = self
            .http
            .delete(&url)
            .send()
            .await
            .map_err(|e| DriverError::Transport(e.to_string()))?;
        self.session_id = None;
        Self::check(response).await?;
        Ok(())
    }

    fn require_session(&self) -> Result<&str, DriverError> {
        self.session_id.as_deref().ok_or(DriverError::NoSession)
    }

    async fn post(&self, path: &str, body: &Value) -> Result<Value, DriverError> {
        let url = format!("{}{path}", self.endpoint);
        let response = self
            .http
            .post(&url)
            .json(body)
            .send()
            .await
            .map_err(|e| DriverError::Transport(e.to_string()))?;
        Self::check(response).await
    }

    async fn get(&self, path: &str) -> Result<Value, DriverError> {
        let url = format!("{}{path}", self.endpoint);
        let response = self
            .http
            .get(&url)
            .send()
            .await
            .map_err(|e| DriverError::Transport(e.to_string()))?;
        Self::check(response).await
    }

    async fn check(response: reqwest::Response) -> Result<Value, DriverError> {
        let status = response.status();
        let body: Value = response
            .json()
            .await
            .map_err(|e| DriverError::BadResponse(e.to_string()))?;
        let value = body.get("value").cloned().unwrap_or(Value::Null);
        if !status.is_success() {
            let error = value
                .get("error")
                .and_then(Value::as_str)
                .unwrap_or("unknown")
                .to_string();
            let message = value
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            return Err(DriverError::Protocol { error, message });
        }
        Ok(value)
    }
}

/// Maps a target to a WebDriver locator strategy.
pub(super) fn locator(target: &Target) -> (&'static str, String) {
    match target {
        Target::Css { css } => ("css selector", css.clone()),
        Target::Role { role, name } => {
            let role_lit = xpath_literal(role);
            let name_lit = xpath_literal(name);
            (
                "xpath",
                format!(
                    "//*[self::{role} or @role={role_lit}]\
                     [@aria-label={name_lit} or @name={name_lit} or normalize-space(.)={name_lit}]"
                ),
            )
        }
        Target::Text { text } => {
            let lit = xpath_literal(text);
            ("xpath", format!("//*[normalize-space(text())={lit}]"))
        }
    }
}

/// Quotes a string as an XPath literal, falling back to concat() when it
/// contains both quote kinds.
fn xpath_literal(text: &str) -> String {
    if !text.contains('\'') {
        format!("'{text}'")
    } else if !text.contains('"') {
        format!("\"{text}\"")
    } else {
        let parts: Vec<String> = text
            .split('\'')
            .map(|part| format!("'{part}'"))
            .collect();
        format!("concat({})", parts.join(", \"'\", "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn locator_strategies() {
        let (using, value) = locator(&Target::Css { css: ".compose".into() });
        assert_eq!(using, "css selector");
        assert_eq!(value, ".compose");

        let (using, value) = locator(&Target::Role {
            role: "button".into(),
            name: "Post".into(),
        });
        assert_eq!(using, "xpath");
        assert!(value.contains("self::button"));
        assert!(value.contains("'Post'"));

        let (using, value) = locator(&Target::Text { text: "hello".into() });
        assert_eq!(using, "xpath");
        assert!(value.contains("normalize-space(text())='hello'"));
    }

    #[test]
    fn xpath_literals_handle_quotes() {
        assert_eq!(xpath_literal("plain"), "'plain'");
        assert_eq!(xpath_literal("it's"), "\"it's\"");
        assert_eq!(xpath_literal("a'b\"c"), "concat('a', \"'\", 'b\"c')");
    }
}
