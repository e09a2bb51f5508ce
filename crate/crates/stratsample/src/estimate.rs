//! Stage 2: forecast each property's marginal probability, then finalize a
//! deduplicated set of at most three properties and assemble the weighted
//! stratification.
//!
//! Binary True/False properties need no normalization step: the pair
//! (p, 1 − p) already sums to 1, so the forecast probability feeds
//! [`crate::strata::build_joint`] directly. [`crate::strata::normalize`]
//! exists for weights that do not, and is deliberately not wired in here.

use std::sync::LazyLock;

use log::warn;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, ChatMessage, CompletionRequest};
use crate::error::{Error, Result};
use crate::strata::{
    MarginalEstimate, PartitionProperty, WeightedStratification, MAX_PROPERTIES,
};

pub const FORECAST_SYSTEM_PROMPT: &str = "You are an expert superforecaster, familiar with the \
work of Tetlock and others.\nYour mission is to generate accurate predictions for forecasting \
questions.\nAggregate the information provided by the user. Make sure to give detailed reasoning.";

pub(crate) const MARGINAL_USER_PREFIX: &str = "I am tasked to estimate the probability";
pub(crate) const FINALIZE_USER_PREFIX: &str = "I'm playing a game";

fn marginal_user_message(user_request: &str, property: &PartitionProperty) -> String {
    format!(
        r#"{MARGINAL_USER_PREFIX} that a random solution to "{user_request}" has the following property "{statement}"

Instructions:
1. Provide at least 3 reasons why the answer might be no.
{{ Insert your thoughts }}
2. Provide at least 3 reasons why the answer might be yes.
{{ Insert your thoughts }}
3. Rate the strength of each of the reasons given in the last two responses. Think like a superforecaster (e.g. Nate Silver).
{{ Insert your rating of the strength of each reason }}
4. Aggregate your considerations.
{{ Insert your aggregated considerations }}
5. Output your answer (a number between 0 and 1) with an asterisk at the beginning and end of the decimal.
{{ Insert your answer }}"#,
        statement = property.statement,
    )
}

fn finalize_user_message(user_request: &str, candidates: &[MarginalEstimate]) -> String {
    let listing = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {} :: {}", i + 1, c.property().statement, c.p_true()))
        .collect::<Vec<_>>()
        .join("\n");
    format!(
        r#"{FINALIZE_USER_PREFIX} where my friend has been tasked to:
"{user_request}"
I have the following Y/N statements I can ask my friend. I have probabilities that I think it's true:
{listing}

Instructions:
1. For each Y/N statement, is it redundant with another statement?
Y/N statement: <description>
Is redundant? <Y/N: Explanation>
2. Are any of the probabilities inaccurate? If it's sufficiently accurate just report back the same value.
Y/N statement: <Description>
Is accurate? <Y/N: Explanation>
Probability: <Probability>
3. Pick at most three statements that are least redundant and pair well together. Prefer ones that are closest to 50% for most information.

Final List of True/False Properties:
1. <Y/N Properties> :: <Probability>
2. <Y/N Properties> :: <Probability>"#,
    )
}

static ASTERISK_DECIMAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\*\s*([0-9]+(?:\.[0-9]+)?|\.[0-9]+)\s*\*").unwrap());

/// Last asterisk-delimited decimal in the text, e.g. `*0.45*`.
pub fn parse_asterisk_decimal(raw: &str) -> Option<f64> {
    ASTERISK_DECIMAL
        .captures_iter(raw)
        .last()
        .and_then(|c| c[1].parse().ok())
}

/// Maps a parsed value into [0, 1]. Values barely above 1 are treated as
/// overshoot and clamped; values in (2, 100] are read as percentages.
fn adjust_probability(value: f64) -> f64 {
    if (0.0..=1.0).contains(&value) {
        return value;
    }
    let adjusted = if value > 2.0 && value <= 100.0 {
        value / 100.0
    } else {
        value.clamp(0.0, 1.0)
    };
    warn!("probability {value} outside [0, 1], using {adjusted}");
    adjusted
}

#[derive(Debug, Clone)]
pub struct MarginalResult {
    pub estimate: MarginalEstimate,
    pub raw_response: String,
}

/// Forecasts the marginal probability of one property. A response without an
/// asterisk-delimited decimal is retried once.
pub fn estimate_marginal(
    backend: &dyn Backend,
    user_request: &str,
    property: &PartitionProperty,
    temperature: f64,
) -> Result<MarginalResult> {
    if property.statement.trim().is_empty() {
        return Err(Error::InvalidInput("empty property statement".into()));
    }
    let messages = vec![
        ChatMessage::system(FORECAST_SYSTEM_PROMPT),
        ChatMessage::user(marginal_user_message(user_request, property)),
    ];
    let request = CompletionRequest::new(backend.model(), messages)?
        .with_temperature(temperature)?
        .with_seed(0);

    let mut last_response = String::new();
    for _ in 0..2 {
        let response = backend.complete(&request)?;
        if let Some(value) = parse_asterisk_decimal(&response.text) {
            let p_true = adjust_probability(value);
            return Ok(MarginalResult {
                estimate: MarginalEstimate::new(property.clone(), p_true)?,
                raw_response: response.text,
            });
        }
        last_response = response.text;
    }
    Err(Error::parse(
        "marginal estimation",
        format!(
            "no asterisk-delimited decimal in response for property {:?}: {:?}",
            property.id,
            truncate(&last_response, 120)
        ),
    ))
}

fn truncate(s: &str, limit: usize) -> &str {
    match s.char_indices().nth(limit) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}

/// Case-folded, punctuation-stripped form used to match statements the model
/// echoes back against the candidates it was given.
fn normalize_statement(statement: &str) -> String {
    statement
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

static LEADING_NUMBERING: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*\d+[.)]\s*").unwrap());

fn parse_finalize_lines(raw: &str) -> Vec<(String, f64)> {
    let lines: Vec<&str> = raw.lines().collect();
    let Some(header_at) = lines
        .iter()
        .rposition(|line| line.trim_start().starts_with(crate::autostrat::FINAL_LIST_HEADER))
    else {
        return Vec::new();
    };

    let mut parsed = Vec::new();
    for line in &lines[header_at + 1..] {
        if line.trim().is_empty() {
            if parsed.is_empty() {
                continue;
            }
            break;
        }
        let item = LEADING_NUMBERING.replace(line, "");
        let Some((statement, probability)) = item.rsplit_once("::") else {
            break;
        };
        let Ok(value) = probability.trim().parse::<f64>() else {
            break;
        };
        let statement = statement.trim();
        if statement.is_empty() {
            break;
        }
        parsed.push((statement.to_string(), adjust_probability(value)));
    }
    parsed
}

/// Asks the model to drop redundant candidates and re-rate the survivors,
/// then builds the stratification from at most three matched statements.
/// The probability returned here wins over the earlier marginal estimate.
pub fn finalize_stratification(
    backend: &dyn Backend,
    user_request: &str,
    candidates: &[MarginalEstimate],
    temperature: f64,
) -> Result<(WeightedStratification, String)> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no candidate properties".into()));
    }
    let messages = vec![
        ChatMessage::system(FORECAST_SYSTEM_PROMPT),
        ChatMessage::user(finalize_user_message(user_request, candidates)),
    ];
    let request = CompletionRequest::new(backend.model(), messages)?
        .with_temperature(temperature)?
        .with_seed(0);
    let response = backend.complete(&request)?;

    let parsed = parse_finalize_lines(&response.text);
    if parsed.is_empty() {
        return Err(Error::parse(
            "finalization",
            "no `<statement> :: <probability>` lines after the final-list header",
        ));
    }

    let mut marginals: Vec<MarginalEstimate> = Vec::new();
    let mut taken: Vec<String> = Vec::new();
    for (statement, probability) in parsed {
        if marginals.len() == MAX_PROPERTIES {
            break;
        }
        let key = normalize_statement(&statement);
        if taken.contains(&key) {
            continue;
        }
        let candidate = candidates
            .iter()
            .find(|c| normalize_statement(&c.property().statement) == key);
        match candidate {
            Some(c) => {
                marginals.push(MarginalEstimate::new(c.property().clone(), probability)?);
                taken.push(key);
            }
            None => warn!("finalized statement matches no candidate, dropped: {statement:?}"),
        }
    }
    if marginals.is_empty() {
        return Err(Error::parse(
            "finalization",
            "every finalized statement failed to match a candidate",
        ));
    }
    Ok((WeightedStratification::new(marginals)?, response.text))
}

/// One marginal-estimation attempt as recorded in the transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalAttempt {
    pub property_id: String,
    pub statement: String,
    pub raw_response: String,
    /// `None` when the response never parsed.
    pub p_true: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationTranscript {
    pub marginal_attempts: Vec<MarginalAttempt>,
    pub finalize_response: String,
    pub stratification: WeightedStratification,
}

#[derive(Debug, Clone, Copy)]
pub struct EstimationOptions {
    pub temperature: f64,
    /// Upper bound on concurrent marginal estimations. Order of results is
    /// deterministic either way; pair fan-out > 1 with a backend whose
    /// responses depend only on the prompt.
    pub fanout: usize,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            fanout: 1,
        }
    }
}

/// Runs stage 2 end to end: marginal estimation per property (tolerating
/// per-property failures), then one finalization call.
pub fn run_estimation(
    backend: &dyn Backend,
    user_request: &str,
    properties: &[PartitionProperty],
    options: EstimationOptions,
) -> Result<EstimationTranscript> {
    if properties.is_empty() {
        return Err(Error::InvalidInput("no properties to estimate".into()));
    }

    let fanout = options.fanout.max(1);
    let mut results: Vec<Option<Result<MarginalResult>>> = Vec::new();
    for chunk in properties.chunks(fanout) {
        let chunk_results = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|property| {
                    scope.spawn(move || {
                        estimate_marginal(backend, user_request, property, options.temperature)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("estimation thread panicked"))
                .collect::<Vec<_>>()
        });
        results.extend(chunk_results.into_iter().map(Some));
    }

    let mut attempts = Vec::with_capacity(properties.len());
    let mut candidates = Vec::new();
    let mut first_error = None;
    for (property, result) in properties.iter().zip(results) {
        match result.expect("one result per property") {
            Ok(marginal) => {
                attempts.push(MarginalAttempt {
                    property_id: property.id.clone(),
                    statement: property.statement.clone(),
                    raw_response: marginal.raw_response.clone(),
                    p_true: Some(marginal.estimate.p_true()),
                });
                candidates.push(marginal.estimate);
            }
            Err(err) => {
                warn!("marginal estimation failed for {:?}: {err}", property.id);
                attempts.push(MarginalAttempt {
                    property_id: property.id.clone(),
                    statement: property.statement.clone(),
                    raw_response: String::new(),
                    p_true: None,
                });
                if first_error.is_none() {
                    first_error = Some(err);
                }
            }
        }
    }
    if candidates.is_empty() {
        return Err(first_error.expect("at least one failure when no candidates"));
    }

    let (stratification, finalize_response) =
        finalize_stratification(backend, user_request, &candidates, options.temperature)?;
    Ok(EstimationTranscript {
        marginal_attempts: attempts,
        finalize_response,
        stratification,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autostrat::FINAL_LIST_HEADER;
    use crate::backend::ScriptedBackend;
    use crate::strata::PropertyOrigin;

    fn prop(statement: &str) -> PartitionProperty {
        PartitionProperty::new("p1", statement, PropertyOrigin::AutoStratified).unwrap()
    }

    fn candidate(statement: &str, p: f64) -> MarginalEstimate {
        MarginalEstimate::new(prop(statement), p).unwrap()
    }

    #[test]
    fn parses_trailing_asterisk_decimal() {
        let backend = ScriptedBackend::new(vec!["after much deliberation: *0.45*".into()]);
        let result = estimate_marginal(&backend, "req", &prop("east of the river"), 0.0).unwrap();
        assert_eq!(result.estimate.p_true(), 0.45);
    }

    #[test]
    fn last_asterisk_decimal_wins() {
        assert_eq!(parse_asterisk_decimal("*0.2* then revised to *0.6*"), Some(0.6));
    }

    #[test]
    fn overshoot_clamps_to_one() {
        let backend = ScriptedBackend::new(vec!["confidence *1.3*".into()]);
        let result = estimate_marginal(&backend, "req", &prop("s"), 0.0).unwrap();
        assert_eq!(result.estimate.p_true(), 1.0);
    }

    #[test]
    fn percentages_divide_down() {
        let backend = ScriptedBackend::new(vec!["roughly *45*".into()]);
        let result = estimate_marginal(&backend, "req", &prop("s"), 0.0).unwrap();
        assert_eq!(result.estimate.p_true(), 0.45);
    }

    #[test]
    fn missing_decimal_retries_once_then_errors() {
        let backend = ScriptedBackend::new(vec!["no number".into(), "still none".into()]);
        let err = estimate_marginal(&backend, "req", &prop("s"), 0.0).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert_eq!(backend.calls(), 2);
    }

    #[test]
    fn marginal_prompt_quotes_request_and_property() {
        let text = marginal_user_message("Name a US State", &prop("east of the river"));
        assert!(text.contains("\"Name a US State\""));
        assert!(text.contains("\"east of the river\""));
        assert!(text.contains("asterisk at the beginning and end"));
    }

    #[test]
    fn finalize_removes_redundant_and_builds_symmetric_joint() {
        let response = format!(
            "{FINAL_LIST_HEADER}:\n1. Statement A :: 0.5\n2. Statement B :: 0.5\n"
        );
        let backend = ScriptedBackend::new(vec![response]);
        let candidates = vec![
            candidate("Statement A", 0.5),
            candidate("Statement B", 0.5),
            candidate("It is not Statement A", 0.5),
        ];
        let (ws, _) = finalize_stratification(&backend, "req", &candidates, 0.0).unwrap();
        assert_eq!(ws.properties().len(), 2);
        for (_, p) in ws.joint().iter() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn finalize_caps_at_three_statements() {
        let response = format!(
            "{FINAL_LIST_HEADER}:\n1. A :: 0.5\n2. B :: 0.5\n3. C :: 0.5\n4. D :: 0.5\n"
        );
        let backend = ScriptedBackend::new(vec![response]);
        let candidates = vec![
            candidate("A", 0.5),
            candidate("B", 0.5),
            candidate("C", 0.5),
            candidate("D", 0.5),
        ];
        let (ws, _) = finalize_stratification(&backend, "req", &candidates, 0.0).unwrap();
        assert_eq!(ws.properties().len(), 3);
        let ids: Vec<_> = ws.properties().iter().map(|p| p.statement.as_str()).collect();
        assert_eq!(ids, vec!["A", "B", "C"]);
    }

    #[test]
    fn finalize_single_statement_joint_from_marginal() {
        let response = format!("{FINAL_LIST_HEADER}:\n1. A :: 0.7\n");
        let backend = ScriptedBackend::new(vec![response]);
        let candidates = vec![candidate("A", 0.5)];
        let (ws, _) = finalize_stratification(&backend, "req", &candidates, 0.0).unwrap();
        // The finalized probability wins over the earlier 0.5 estimate.
        assert_eq!(ws.marginals()[0].p_true(), 0.7);
        let joint = ws.joint();
        assert!((joint.prob(&crate::strata::Stratum::new(vec![true])).unwrap() - 0.7).abs() < 1e-12);
        assert!((joint.prob(&crate::strata::Stratum::new(vec![false])).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn finalize_matching_is_case_and_punctuation_insensitive() {
        let response = format!("{FINAL_LIST_HEADER}:\n1. the state is east of the river! :: 0.6\n");
        let backend = ScriptedBackend::new(vec![response]);
        let candidates = vec![candidate("The state is east of the river.", 0.5)];
        let (ws, _) = finalize_stratification(&backend, "req", &candidates, 0.0).unwrap();
        assert_eq!(
            ws.properties()[0].statement,
            "The state is east of the river."
        );
        assert_eq!(ws.marginals()[0].p_true(), 0.6);
    }

    #[test]
    fn finalize_errors_when_nothing_matches() {
        let response = format!("{FINAL_LIST_HEADER}:\n1. hallucinated statement :: 0.5\n");
        let backend = ScriptedBackend::new(vec![response]);
        let candidates = vec![candidate("A", 0.5)];
        assert!(matches!(
            finalize_stratification(&backend, "req", &candidates, 0.0),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn finalize_errors_on_zero_parsed_lines() {
        let backend = ScriptedBackend::new(vec!["prose without a header".into()]);
        let candidates = vec![candidate("A", 0.5)];
        assert!(matches!(
            finalize_stratification(&backend, "req", &candidates, 0.0),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn run_estimation_calls_each_property_then_finalize() {
        let statements = ["A", "B", "C", "D", "E"];
        let mut responses: Vec<String> =
            statements.iter().map(|_| "*0.5*".to_string()).collect();
        responses.push(format!("{FINAL_LIST_HEADER}:\n1. A :: 0.5\n2. B :: 0.5\n"));
        let backend = ScriptedBackend::new(responses);
        let properties: Vec<_> = statements
            .iter()
            .enumerate()
            .map(|(i, s)| {
                PartitionProperty::new(format!("p{i}"), *s, PropertyOrigin::AutoStratified)
                    .unwrap()
            })
            .collect();
        let transcript =
            run_estimation(&backend, "req", &properties, EstimationOptions::default()).unwrap();
        // 5 marginal calls then 1 finalize call.
        assert_eq!(backend.calls(), 6);
        assert_eq!(backend.remaining(), 0);
        assert_eq!(transcript.marginal_attempts.len(), 5);
        assert_eq!(transcript.stratification.properties().len(), 2);
    }

    #[test]
    fn run_estimation_tolerates_a_failing_property() {
        // Property A parses twice-failing; B succeeds; finalize picks B.
        let responses = vec![
            "nope".to_string(),
            "still nope".to_string(),
            "*0.4*".to_string(),
            format!("{FINAL_LIST_HEADER}:\n1. B :: 0.4\n"),
        ];
        let backend = ScriptedBackend::new(responses);
        let properties = vec![
            PartitionProperty::new("p1", "A", PropertyOrigin::AutoStratified).unwrap(),
            PartitionProperty::new("p2", "B", PropertyOrigin::AutoStratified).unwrap(),
        ];
        let transcript =
            run_estimation(&backend, "req", &properties, EstimationOptions::default()).unwrap();
        assert_eq!(transcript.marginal_attempts[0].p_true, None);
        assert_eq!(transcript.marginal_attempts[1].p_true, Some(0.4));
        assert_eq!(transcript.stratification.properties().len(), 1);
    }

    #[test]
    fn fanout_does_not_change_the_transcript() {
        use crate::backend::{CategoricalBackend, CategoricalTable, StageProperty};
        let statements = ["The answer is red.", "The answer is round.", "The answer is heavy."];
        let backend = CategoricalBackend::new(CategoricalTable::new(vec![]).unwrap())
            .with_properties(
                statements
                    .iter()
                    .enumerate()
                    .map(|(i, s)| StageProperty {
                        statement: s.to_string(),
                        p_true: 0.2 + 0.1 * i as f64,
                    })
                    .collect(),
            )
            .unwrap();
        let properties: Vec<_> = statements
            .iter()
            .enumerate()
            .map(|(i, s)| {
                PartitionProperty::new(format!("p{i}"), *s, PropertyOrigin::AutoStratified)
                    .unwrap()
            })
            .collect();
        let sequential = run_estimation(
            &backend,
            "req",
            &properties,
            EstimationOptions { temperature: 0.0, fanout: 1 },
        )
        .unwrap();
        let fanned = run_estimation(
            &backend,
            "req",
            &properties,
            EstimationOptions { temperature: 0.0, fanout: 3 },
        )
        .unwrap();
        assert_eq!(sequential, fanned);
        assert_eq!(sequential.stratification.properties().len(), 3);
    }

    #[test]
    fn run_estimation_aborts_when_every_marginal_fails() {
        let backend = ScriptedBackend::new(vec!["x".into(), "x".into()]);
        let properties = vec![prop("A")];
        assert!(run_estimation(&backend, "req", &properties, EstimationOptions::default())
            .is_err());
    }
}
