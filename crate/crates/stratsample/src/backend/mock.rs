//! Deterministic mock backends.
//!
//! [`ScriptedBackend`] replays fixture responses in order. [`CategoricalBackend`]
//! draws answers from a categorical table keyed by the request seed; tables
//! can be overridden per prompt via substring rules, residual mass (when the
//! table sums below 1) yields the literal answer `Invalid`, and an optional
//! property list lets the mock answer the stratification and estimation
//! prompts too, so the whole pipeline runs offline through the real parsers.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::{Backend, BackendError, CompletionRequest, CompletionResponse};
use crate::autostrat;
use crate::error::Error;
use crate::estimate;
use crate::strata::MAX_PROPERTIES;

/// Replays a fixed list of responses in order; exhausting them is an error.
pub struct ScriptedBackend {
    responses: Mutex<VecDeque<String>>,
    total: usize,
    calls: AtomicU64,
    model: String,
}

impl ScriptedBackend {
    pub fn new(responses: Vec<String>) -> Self {
        Self {
            total: responses.len(),
            responses: Mutex::new(responses.into()),
            calls: AtomicU64::new(0),
            model: "mock-scripted".into(),
        }
    }

    /// Loads a transcript file: a JSON array of response strings.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        let responses: Vec<String> = serde_json::from_str(&text)?;
        Ok(Self::new(responses))
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> usize {
        self.responses.lock().unwrap().len()
    }
}

impl Backend for ScriptedBackend {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, _request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let next = self.responses.lock().unwrap().pop_front();
        match next {
            Some(text) => Ok(CompletionResponse {
                text,
                token_logprobs: None,
            }),
            None => Err(BackendError::ScriptExhausted(self.total)),
        }
    }

    fn score_continuation(&self, _prompt: &str, _continuation: &str) -> Result<f64, BackendError> {
        Err(BackendError::ScoringUnsupported)
    }
}

/// Default probability assigned to continuations absent from a table, so KL
/// computations against mock scores stay finite.
pub const DEFAULT_SCORE_FLOOR: f64 = 1e-9;

/// An answer distribution. Entries are strictly positive and sum to at most
/// 1; any residual mass is drawn as the literal answer `Invalid`.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalTable {
    entries: Vec<(String, f64)>,
}

impl CategoricalTable {
    pub fn new(entries: Vec<(String, f64)>) -> Result<Self, Error> {
        let mut sum = 0.0;
        for (answer, p) in &entries {
            if p.is_nan() || *p <= 0.0 {
                return Err(Error::Config(format!(
                    "table entry {answer:?} has non-positive probability {p}"
                )));
            }
            sum += p;
        }
        if sum > 1.0 + 1e-9 {
            return Err(Error::Config(format!(
                "table probabilities sum to {sum}, expected at most 1"
            )));
        }
        Ok(Self { entries })
    }

    fn from_map(map: BTreeMap<String, f64>) -> Result<Self, Error> {
        Self::new(map.into_iter().collect())
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    fn draw(&self, seed: u64) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u: f64 = rng.random();
        let mut cumulative = 0.0;
        for (answer, p) in &self.entries {
            cumulative += p;
            if u < cumulative {
                return answer.clone();
            }
        }
        "Invalid".into()
    }

    fn lookup(&self, answer: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|(a, _)| a == answer)
            .map(|(_, p)| *p)
    }
}

/// Substring rule selecting a table for prompts that contain every listed
/// fragment. First matching rule wins; otherwise the default table applies.
#[derive(Debug, Clone)]
pub struct PromptRule {
    pub when_contains: Vec<String>,
    pub table: CategoricalTable,
}

impl PromptRule {
    fn matches(&self, text: &str) -> bool {
        self.when_contains.iter().all(|needle| text.contains(needle))
    }
}

/// A property the mock will propose during stratification, with the marginal
/// it will forecast for it.
#[derive(Debug, Clone, Deserialize)]
pub struct StageProperty {
    pub statement: String,
    pub p_true: f64,
}

pub struct CategoricalBackend {
    default_table: CategoricalTable,
    rules: Vec<PromptRule>,
    properties: Vec<StageProperty>,
    floor: f64,
    model: String,
    completions: AtomicU64,
    stage_completions: AtomicU64,
}

impl CategoricalBackend {
    pub fn new(default_table: CategoricalTable) -> Self {
        Self {
            default_table,
            rules: Vec::new(),
            properties: Vec::new(),
            floor: DEFAULT_SCORE_FLOOR,
            model: "mock-categorical".into(),
            completions: AtomicU64::new(0),
            stage_completions: AtomicU64::new(0),
        }
    }

    pub fn with_rule(mut self, rule: PromptRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn with_properties(mut self, properties: Vec<StageProperty>) -> Result<Self, Error> {
        validate_stage_properties(&properties)?;
        self.properties = properties;
        Ok(self)
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    /// Loads a table file: either a bare `{answer: probability}` object or
    /// the full form with `default`, `rules`, `properties`, `floor`, `model`.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, Error> {
        let text = std::fs::read_to_string(&path)?;
        let config: CategoricalConfigFile = match serde_json::from_str(&text) {
            Ok(config) => config,
            Err(_) => {
                let bare: BTreeMap<String, f64> = serde_json::from_str(&text)?;
                CategoricalConfigFile {
                    model: None,
                    floor: None,
                    default: bare,
                    rules: Vec::new(),
                    properties: Vec::new(),
                }
            }
        };
        let mut backend = CategoricalBackend::new(CategoricalTable::from_map(config.default)?);
        for rule in config.rules {
            backend = backend.with_rule(PromptRule {
                when_contains: rule.when_contains,
                table: CategoricalTable::from_map(rule.table)?,
            });
        }
        backend = backend.with_properties(config.properties)?;
        if let Some(floor) = config.floor {
            backend = backend.with_floor(floor);
        }
        if let Some(model) = config.model {
            backend = backend.with_model(model);
        }
        Ok(backend)
    }

    /// Completions served, including stage prompts.
    pub fn completions(&self) -> u64 {
        self.completions.load(Ordering::SeqCst)
    }

    /// Completions that answered stratification or estimation prompts.
    pub fn stage_completions(&self) -> u64 {
        self.stage_completions.load(Ordering::SeqCst)
    }

    fn table_for(&self, text: &str) -> &CategoricalTable {
        self.rules
            .iter()
            .find(|rule| rule.matches(text))
            .map(|rule| &rule.table)
            .unwrap_or(&self.default_table)
    }

    fn stage_response(&self, request: &CompletionRequest) -> Option<Result<String, BackendError>> {
        let system = request.system_text()?;
        if system == autostrat::SYSTEM_PROMPT {
            return Some(self.autostrat_response());
        }
        if system == estimate::FORECAST_SYSTEM_PROMPT {
            let user = request.last_user_text().unwrap_or_default();
            if user.starts_with(estimate::MARGINAL_USER_PREFIX) {
                return Some(self.marginal_response(user));
            }
            if user.starts_with(estimate::FINALIZE_USER_PREFIX) {
                return Some(self.finalize_response());
            }
        }
        None
    }

    fn require_properties(&self) -> Result<&[StageProperty], BackendError> {
        if self.properties.is_empty() {
            return Err(BackendError::InvalidRequest(
                "categorical mock received a stage prompt but has no properties configured"
                    .into(),
            ));
        }
        Ok(&self.properties)
    }

    fn autostrat_response(&self) -> Result<String, BackendError> {
        let properties = self.require_properties()?;
        let mut out = String::from("Working through the steps above.\n\n");
        out.push_str(autostrat::FINAL_LIST_HEADER);
        out.push_str(":\n");
        for (i, p) in properties.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", i + 1, p.statement));
        }
        Ok(out)
    }

    fn marginal_response(&self, user_text: &str) -> Result<String, BackendError> {
        let properties = self.require_properties()?;
        let property = properties
            .iter()
            .find(|p| user_text.contains(&format!("\"{}\"", p.statement)))
            .ok_or_else(|| {
                BackendError::InvalidRequest(
                    "marginal prompt does not mention a configured property".into(),
                )
            })?;
        Ok(format!(
            "Weighing the considerations on both sides, I settle on *{}*",
            property.p_true
        ))
    }

    fn finalize_response(&self) -> Result<String, BackendError> {
        let properties = self.require_properties()?;
        let mut out = String::from("None of the statements are redundant.\n\n");
        out.push_str(autostrat::FINAL_LIST_HEADER);
        out.push_str(":\n");
        for (i, p) in properties.iter().enumerate() {
            out.push_str(&format!("{}. {} :: {}\n", i + 1, p.statement, p.p_true));
        }
        Ok(out)
    }
}

fn validate_stage_properties(properties: &[StageProperty]) -> Result<(), Error> {
    if properties.len() > MAX_PROPERTIES {
        return Err(Error::Config(format!(
            "categorical mock configures {} stage properties, at most {MAX_PROPERTIES} allowed",
            properties.len()
        )));
    }
    for p in properties {
        if !(0.0..=1.0).contains(&p.p_true) {
            return Err(Error::Config(format!(
                "stage property {:?} has probability {} outside [0, 1]",
                p.statement, p.p_true
            )));
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct CategoricalConfigFile {
    #[serde(default)]
    model: Option<String>,
    #[serde(default)]
    floor: Option<f64>,
    default: BTreeMap<String, f64>,
    #[serde(default)]
    rules: Vec<RuleFile>,
    #[serde(default)]
    properties: Vec<StageProperty>,
}

#[derive(Deserialize)]
struct RuleFile {
    when_contains: Vec<String>,
    table: BTreeMap<String, f64>,
}

impl Backend for CategoricalBackend {
    fn model(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        self.completions.fetch_add(1, Ordering::SeqCst);
        if let Some(stage) = self.stage_response(request) {
            self.stage_completions.fetch_add(1, Ordering::SeqCst);
            return Ok(CompletionResponse {
                text: stage?,
                token_logprobs: None,
            });
        }
        let seed = request.seed.ok_or_else(|| {
            BackendError::InvalidRequest("categorical mock requires a request seed".into())
        })?;
        let text = self.table_for(&request.full_text()).draw(seed);
        Ok(CompletionResponse {
            text,
            token_logprobs: None,
        })
    }

    fn supports_scoring(&self) -> bool {
        true
    }

    fn score_continuation(&self, prompt: &str, continuation: &str) -> Result<f64, BackendError> {
        let continuation = continuation.trim();
        if continuation.is_empty() {
            return Ok(0.0);
        }
        let p = self
            .table_for(prompt)
            .lookup(continuation)
            .unwrap_or(self.floor);
        Ok(p.ln())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ChatMessage;

    fn request(text: &str, seed: u64) -> CompletionRequest {
        CompletionRequest::new("m", vec![ChatMessage::user(text)])
            .unwrap()
            .with_seed(seed)
    }

    fn table(entries: &[(&str, f64)]) -> CategoricalTable {
        CategoricalTable::new(
            entries
                .iter()
                .map(|(a, p)| (a.to_string(), *p))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn scripted_echoes_fixture_then_exhausts() {
        let backend = ScriptedBackend::new(vec!["Final List…".into()]);
        let response = backend.complete(&request("anything", 0)).unwrap();
        assert_eq!(response.text, "Final List…");
        match backend.complete(&request("anything", 0)) {
            Err(BackendError::ScriptExhausted(1)) => {}
            other => panic!("expected exhaustion, got {other:?}"),
        }
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn categorical_draw_is_seed_deterministic() {
        let backend = CategoricalBackend::new(table(&[("Erie", 0.9), ("Huron", 0.1)]));
        let first = backend.complete(&request("q", 1234)).unwrap().text;
        let second = backend.complete(&request("q", 1234)).unwrap().text;
        assert_eq!(first, second);
    }

    #[test]
    fn categorical_requires_seed() {
        let backend = CategoricalBackend::new(table(&[("Erie", 1.0)]));
        let request = CompletionRequest::new("m", vec![ChatMessage::user("q")]).unwrap();
        assert!(matches!(
            backend.complete(&request),
            Err(BackendError::InvalidRequest(_))
        ));
    }

    #[test]
    fn categorical_frequency_matches_table() {
        // Frequency-count oracle: 10,000 distinct seeds.
        let backend = CategoricalBackend::new(table(&[("Erie", 0.9), ("Huron", 0.1)]));
        let n = 10_000u32;
        let mut erie = 0u32;
        for seed in 0..n {
            if backend.complete(&request("q", seed.into())).unwrap().text == "Erie" {
                erie += 1;
            }
        }
        let freq = f64::from(erie) / f64::from(n);
        assert!((freq - 0.9).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn residual_mass_draws_invalid() {
        let backend = CategoricalBackend::new(table(&[("Erie", 0.5)]));
        let n = 10_000u32;
        let invalid = (0..n)
            .filter(|&seed| {
                backend.complete(&request("q", seed.into())).unwrap().text == "Invalid"
            })
            .count();
        let freq = invalid as f64 / f64::from(n);
        assert!((freq - 0.5).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn score_is_table_lookup_in_log_space() {
        let backend = CategoricalBackend::new(table(&[("A", 0.25)]));
        let got = backend.score_continuation("prompt", " A").unwrap();
        assert!((got - 0.25f64.ln()).abs() < 1e-12);
        assert!((got + 1.3863).abs() < 1e-3);
    }

    #[test]
    fn empty_continuation_scores_zero() {
        let backend = CategoricalBackend::new(table(&[("A", 0.25)]));
        assert_eq!(backend.score_continuation("prompt", "").unwrap(), 0.0);
    }

    #[test]
    fn unlisted_continuation_scores_the_floor() {
        let backend = CategoricalBackend::new(table(&[("A", 0.25)])).with_floor(1e-6);
        let got = backend.score_continuation("prompt", "B").unwrap();
        assert!((got - 1e-6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sum_of_log_scores_over_table_stays_subnormalized() {
        let backend =
            CategoricalBackend::new(table(&[("A", 0.3), ("B", 0.3), ("C", 0.4)]));
        let total: f64 = ["A", "B", "C"]
            .iter()
            .map(|a| backend.score_continuation("p", a).unwrap().exp())
            .sum();
        assert!(total <= 1.0 + 1e-9);
    }

    #[test]
    fn prompt_rules_override_default_table() {
        let backend = CategoricalBackend::new(table(&[("default", 1.0)])).with_rule(PromptRule {
            when_contains: vec!["east".into(), "north".into()],
            table: table(&[("special", 1.0)]),
        });
        assert_eq!(
            backend.complete(&request("east and north", 1)).unwrap().text,
            "special"
        );
        assert_eq!(
            backend.complete(&request("east only", 1)).unwrap().text,
            "default"
        );
    }

    #[test]
    fn table_rejects_oversubscribed_probabilities() {
        assert!(CategoricalTable::new(vec![("a".into(), 0.9), ("b".into(), 0.2)]).is_err());
        assert!(CategoricalTable::new(vec![("a".into(), 0.0)]).is_err());
    }
}
