//! Declarative flow classification.
//!
//! A [`Ruleset`] is a priority-ordered list of predicate rules mapping each
//! flow to exactly one [`Category`]. Rules are data (YAML or JSON), not
//! code: heuristics differ per platform and evolve with it, so they ship
//! as versioned, editable files. Anything no rule matches falls back to
//! `Other` — never to tracking — keeping overhead figures lower bounds.

pub(crate) mod glob;

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{Category, FlowId, HttpFlow, JourneyRun, RunId};
use glob::glob_match;

#[derive(Debug, Error)]
pub enum RulesetError {
    #[error("failed to parse ruleset: {0}")]
    Parse(String),
    #[error("rule {rule_id:?}: {reason}")]
    InvalidRule { rule_id: String, reason: String },
    #[error("duplicate rule id {0:?}")]
    DuplicateRuleId(String),
    #[error("unknown built-in ruleset {0:?}")]
    UnknownBuiltin(String),
    #[error("ruleset I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error("flow {flow_id} does not belong to run {run_id}")]
    ForeignFlow { flow_id: FlowId, run_id: RunId },
}

/// Key/value pattern matched against recorded request payloads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BodyKeyword {
    pub key: String,
    /// Accepted values; empty means "key present with any value".
    #[serde(default)]
    pub values: Vec<String>,
}

/// Conjunction of predicates; every present field must hold.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulePredicates {
    /// Glob on the URL host, case-insensitive.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
    /// Glob on the URL path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    /// Regex on the URL path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path_regex: Option<String>,
    /// HTTP method set (case-insensitive).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
    /// Content-type prefixes, e.g. `image/` or `text/html`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_type: Option<Vec<String>>,
    /// URL extensions (lowercase, no dot).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extensions: Option<Vec<String>>,
    /// Whether the request carries cookies.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub has_cookies: Option<bool>,
    /// Key/value pattern in the recorded request payload.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_keyword: Option<BodyKeyword>,
}

impl RulePredicates {
    fn is_empty(&self) -> bool {
        self.host.is_none()
            && self.path.is_none()
            && self.path_regex.is_none()
            && self.methods.is_none()
            && self.content_type.is_none()
            && self.extensions.is_none()
            && self.has_cookies.is_none()
            && self.body_keyword.is_none()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassificationRule {
    #[serde(rename = "id")]
    pub rule_id: String,
    /// Higher priority wins; ties resolve by declaration order.
    pub priority: i32,
    pub category: Category,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    #[serde(rename = "match")]
    pub predicates: RulePredicates,
}

/// Beacon pattern for telemetry-upload detection, matched against POST
/// payloads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BeaconPattern {
    pub id: String,
    pub key: String,
    #[serde(default)]
    pub values: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RulesetFile {
    name: String,
    version: String,
    #[serde(default = "default_category")]
    default_category: Category,
    rules: Vec<ClassificationRule>,
    #[serde(default)]
    beacon_patterns: Vec<BeaconPattern>,
}

fn default_category() -> Category {
    Category::Other
}

/// Compiled, immutable ruleset. Safe to share across threads.
#[derive(Debug)]
pub struct Ruleset {
    pub name: String,
    pub version: String,
    pub default_category: Category,
    rules: Vec<CompiledRule>,
    /// Indices into `rules`, sorted by (priority desc, declaration order).
    order: Vec<usize>,
    pub beacon_patterns: Vec<BeaconPattern>,
}

#[derive(Debug)]
struct CompiledRule {
    rule: ClassificationRule,
    path_regex: Option<Regex>,
    methods_upper: Option<Vec<String>>,
    content_type_lower: Option<Vec<String>>,
    extensions_lower: Option<Vec<String>>,
}

/// Result of classifying one flow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Classification {
    pub category: Category,
    /// Id of the winning rule; `None` when the default category applied.
    pub rule_id: Option<String>,
}

impl Ruleset {
    pub fn load_str(text: &str) -> Result<Self, RulesetError> {
        let file: RulesetFile =
            serde_yaml::from_str(text).map_err(|e| RulesetError::Parse(e.to_string()))?;
        Self::compile(file)
    }

    pub fn load_file(path: impl AsRef<std::path::Path>) -> Result<Self, RulesetError> {
        let text = std::fs::read_to_string(path)?;
        Self::load_str(&text)
    }

    /// Built-in rulesets shipped with the tool: `x-heuristic` and
    /// `mastodon-default`.
    pub fn builtin(name: &str) -> Result<Self, RulesetError> {
        match name {
            "x-heuristic" => Self::load_str(include_str!("../../rulesets/x-heuristic.yaml")),
            "mastodon-default" => {
                Self::load_str(include_str!("../../rulesets/mastodon-default.yaml"))
            }
            other => Err(RulesetError::UnknownBuiltin(other.to_string())),
        }
    }

    pub fn builtin_names() -> &'static [&'static str] {
        &["x-heuristic", "mastodon-default"]
    }

    /// Resolves `name_or_path` as a built-in name first, then as a file.
    pub fn resolve(name_or_path: &str) -> Result<Self, RulesetError> {
        match Self::builtin(name_or_path) {
            Ok(rs) => Ok(rs),
            Err(RulesetError::UnknownBuiltin(_)) => Self::load_file(name_or_path),
            Err(e) => Err(e),
        }
    }

    fn compile(file: RulesetFile) -> Result<Self, RulesetError> {
        let mut seen = std::collections::HashSet::new();
        let mut rules = Vec::with_capacity(file.rules.len());
        for rule in file.rules {
            if !seen.insert(rule.rule_id.clone()) {
                return Err(RulesetError::DuplicateRuleId(rule.rule_id));
            }
            if rule.predicates.is_empty() {
                return Err(RulesetError::InvalidRule {
                    rule_id: rule.rule_id,
                    reason: "rule has no predicates".to_string(),
                });
            }
            let path_regex = match &rule.predicates.path_regex {
                Some(pattern) => Some(Regex::new(pattern).map_err(|e| RulesetError::InvalidRule {
                    rule_id: rule.rule_id.clone(),
                    reason: format!("invalid path_regex: {e}"),
                })?),
                None => None,
            };
            let methods_upper = rule
                .predicates
                .methods
                .as_ref()
                .map(|m| m.iter().map(|s| s.to_ascii_uppercase()).collect());
            let content_type_lower = rule
                .predicates
                .content_type
                .as_ref()
                .map(|c| c.iter().map(|s| s.to_ascii_lowercase()).collect());
            let extensions_lower = rule
                .predicates
                .extensions
                .as_ref()
                .map(|e| e.iter().map(|s| s.to_ascii_lowercase()).collect());
            rules.push(CompiledRule {
                rule,
                path_regex,
                methods_upper,
                content_type_lower,
                extensions_lower,
            });
        }
        let mut order: Vec<usize> = (0..rules.len()).collect();
        order.sort_by(|&a, &b| {
            rules[b]
                .rule
                .priority
                .cmp(&rules[a].rule.priority)
                .then(a.cmp(&b))
        });
        Ok(Self {
            name: file.name,
            version: file.version,
            default_category: file.default_category,
            rules,
            order,
            beacon_patterns: file.beacon_patterns,
        })
    }

    /// Rules in evaluation order.
    pub fn rules_in_order(&self) -> impl Iterator<Item = &ClassificationRule> {
        self.order.iter().map(|&i| &self.rules[i].rule)
    }
}

/// Assigns a category to one flow: the first rule in the total order whose
/// predicates all hold wins; otherwise the ruleset's default. Pure, total
/// and deterministic.
pub fn classify_flow(flow: &HttpFlow, ruleset: &Ruleset) -> Classification {
    for &idx in &ruleset.order {
        let compiled = &ruleset.rules[idx];
        if rule_matches(compiled, flow) {
            return Classification {
                category: compiled.rule.category,
                rule_id: Some(compiled.rule.rule_id.clone()),
            };
        }
    }
    Classification {
        category: ruleset.default_category,
        rule_id: None,
    }
}

fn rule_matches(compiled: &CompiledRule, flow: &HttpFlow) -> bool {
    let p = &compiled.rule.predicates;
    if let Some(host_glob) = &p.host {
        if !glob_match(&host_glob.to_ascii_lowercase(), &flow.url.host.to_ascii_lowercase()) {
            return false;
        }
    }
    if let Some(path_glob) = &p.path {
        if !glob_match(path_glob, &flow.url.path) {
            return false;
        }
    }
    if let Some(regex) = &compiled.path_regex {
        if !regex.is_match(&flow.url.path) {
            return false;
        }
    }
    if let Some(methods) = &compiled.methods_upper {
        if !methods.iter().any(|m| m == &flow.method) {
            return false;
        }
    }
    if let Some(prefixes) = &compiled.content_type_lower {
        let Some(content_type) = &flow.content_type else {
            return false;
        };
        let ct = content_type.to_ascii_lowercase();
        if !prefixes.iter().any(|p| ct.starts_with(p.as_str())) {
            return false;
        }
    }
    if let Some(extensions) = &compiled.extensions_lower {
        let Some(ext) = flow.url.extension() else {
            return false;
        };
        if !extensions.iter().any(|e| *e == ext) {
            return false;
        }
    }
    if let Some(expected) = p.has_cookies {
        if flow.request_cookies.is_empty() != !expected {
            return false;
        }
    }
    if let Some(keyword) = &p.body_keyword {
        let Some(payload) = &flow.request_payload else {
            return false;
        };
        if payload_match(payload, &keyword.key, &keyword.values).is_none() {
            return false;
        }
    }
    true
}

/// Per-category byte and flow tallies for one run. The tallies partition
/// the run's total exactly: every flow counts once, in one category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunBreakdown {
    pub run_id: RunId,
    pub total_bytes: u64,
    pub total_flows: usize,
    pub categories: BTreeMap<Category, CategoryTally>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTally {
    pub bytes: u64,
    pub flows: usize,
}

impl RunBreakdown {
    pub fn tally(&self, category: Category) -> CategoryTally {
        self.categories.get(&category).copied().unwrap_or_default()
    }
}

/// Classifies every flow of a run and tallies bytes per category.
pub fn classify_run(
    run: &JourneyRun,
    flows: &[HttpFlow],
    ruleset: &Ruleset,
) -> Result<RunBreakdown, ClassifyError> {
    let mut categories: BTreeMap<Category, CategoryTally> = Category::ALL
        .iter()
        .map(|&c| (c, CategoryTally::default()))
        .collect();
    let mut total_bytes = 0u64;
    for flow in flows {
        if flow.run_id != run.run_id {
            return Err(ClassifyError::ForeignFlow {
                flow_id: flow.flow_id.clone(),
                run_id: run.run_id.clone(),
            });
        }
        let category = classify_flow(flow, ruleset).category;
        let tally = categories.entry(category).or_default();
        tally.bytes += flow.total_bytes();
        tally.flows += 1;
        total_bytes += flow.total_bytes();
    }
    Ok(RunBreakdown {
        run_id: run.run_id.clone(),
        total_bytes,
        total_flows: flows.len(),
        categories,
    })
}

/// Applies classifications to the flows in place. A flow's category is set
/// exactly once per classifier pass and never reverts to unclassified.
pub fn apply_categories(flows: &mut [HttpFlow], ruleset: &Ruleset) {
    for flow in flows {
        flow.category = Some(classify_flow(flow, ruleset).category);
    }
}

/// One beacon-flagged flow with the evidence that matched.
#[derive(Debug, Clone, Serialize)]
pub struct BeaconHit {
    pub flow_id: FlowId,
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BeaconScan {
    pub hits: Vec<BeaconHit>,
    /// Set when no scanned flow carried a recorded payload.
    pub note: Option<String>,
}

/// Flags POST flows whose recorded payloads match beacon key/value
/// patterns (telemetry uploads such as impression events). Flows without
/// recorded bodies are skipped; when none had bodies at all, the scan
/// carries an explanatory note instead of evidence.
pub fn detect_tracking_beacons(flows: &[HttpFlow], patterns: &[BeaconPattern]) -> BeaconScan {
    let mut hits = Vec::new();
    let mut saw_payload = false;
    for flow in flows {
        if flow.method != "POST" {
            continue;
        }
        let Some(payload) = &flow.request_payload else {
            continue;
        };
        saw_payload = true;
        let mut evidence = Vec::new();
        for pattern in patterns {
            if let Some(found) = payload_match(payload, &pattern.key, &pattern.values) {
                evidence.push(format!("{}: {found}", pattern.id));
            }
        }
        if !evidence.is_empty() {
            hits.push(BeaconHit {
                flow_id: flow.flow_id.clone(),
                evidence,
            });
        }
    }
    let note = if !flows.is_empty() && !saw_payload {
        Some("bodies not recorded".to_string())
    } else {
        None
    };
    BeaconScan { hits, note }
}

/// Looks for `key` with one of `values` in a payload. JSON payloads are
/// searched structurally (nested objects and arrays included); anything
/// else falls back to `key=value` / `"key":"value"` textual forms.
/// Returns the matched `key=value` evidence string.
fn payload_match(payload: &str, key: &str, values: &[String]) -> Option<String> {
    if let Ok(json) = serde_json::from_str::<serde_json::Value>(payload) {
        return json_search(&json, key, values);
    }
    textual_match(payload, key, values)
}

fn json_search(value: &serde_json::Value, key: &str, values: &[String]) -> Option<String> {
    match value {
        serde_json::Value::Object(map) => {
            for (k, v) in map {
                if k == key {
                    let rendered = match v {
                        serde_json::Value::String(s) => s.clone(),
                        other => other.to_string(),
                    };
                    if values.is_empty() || values.iter().any(|want| *want == rendered) {
                        return Some(format!("{key}={rendered}"));
                    }
                }
                if let Some(found) = json_search(v, key, values) {
                    return Some(found);
                }
            }
            None
        }
        serde_json::Value::Array(items) => {
            items.iter().find_map(|item| json_search(item, key, values))
        }
        _ => None,
    }
}

fn textual_match(payload: &str, key: &str, values: &[String]) -> Option<String> {
    if values.is_empty() {
        let form = format!("{key}=");
        let quoted = format!("\"{key}\"");
        if payload.contains(&form) || payload.contains(&quoted) {
            return Some(format!("{key}=<any>"));
        }
        return None;
    }
    for value in values {
        let candidates = [
            format!("{key}={value}"),
            format!("\"{key}\":\"{value}\""),
            format!("\"{key}\": \"{value}\""),
        ];
        if candidates.iter().any(|c| payload.contains(c.as_str())) {
            return Some(format!("{key}={value}"));
        }
    }
    None
}
