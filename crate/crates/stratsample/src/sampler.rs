//! Stage 3: probabilistic prompting. Draw a stratum from the joint
//! distribution, render the augmented prompt, sample an answer, and resample
//! on `Invalid` so approximation error in the stratification (e.g. a stratum
//! with no solutions) does not distort the prompt distribution.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autostrat::run_auto_stratification;
use crate::backend::{Backend, ChatMessage, CompletionRequest};
use crate::cache::{PipelineCache, PipelineCacheEntry};
use crate::error::Result;
use crate::estimate::{run_estimation, EstimationOptions};
use crate::strata::{sample_stratum, PartitionProperty, Stratum, WeightedStratification};

/// Fixed wording of the prompt augmentation. Frozen so that evaluations and
/// cached transcripts stay reproducible across runs.
pub const CONSTRAINT_PREAMBLE: &str =
    "Additionally, the answer must satisfy ALL of the following:";
pub const NEGATION_PREFIX: &str = "It is NOT the case that ";
pub const ANSWER_FORMAT_INSTRUCTION: &str = "Respond with only the answer itself. If no valid \
answer satisfies every condition, respond with the single word \"Invalid\".";

/// Answer that triggers a stratum redraw (compared case-insensitively).
pub const INVALID_MARKER: &str = "Invalid";

pub const DEFAULT_MAX_INVALID_RETRIES: u32 = 8;

/// One rendered constraint: the property stated affirmatively when its label
/// is true, negated otherwise.
pub fn render_condition_line(property: &PartitionProperty, label: bool) -> String {
    if label {
        format!("- {}", property.statement)
    } else {
        format!("- {NEGATION_PREFIX}{}", property.statement)
    }
}

/// Deterministic prompt for one stratum. With zero properties this is the
/// user request plus the answer-format instruction only.
pub fn render_prompt(
    user_request: &str,
    properties: &[PartitionProperty],
    stratum: &Stratum,
) -> Result<String> {
    if stratum.len() != properties.len() {
        return Err(crate::strata::CoreError::StratumLengthMismatch {
            got: stratum.len(),
            expected: properties.len(),
        }
        .into());
    }
    if properties.is_empty() {
        return Ok(format!("{user_request}\n\n{ANSWER_FORMAT_INSTRUCTION}"));
    }
    let conditions = properties
        .iter()
        .zip(stratum.labels())
        .map(|(property, &label)| render_condition_line(property, label))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(format!(
        "{user_request}\n\n{CONSTRAINT_PREAMBLE}\n{conditions}\n\n{ANSWER_FORMAT_INSTRUCTION}"
    ))
}

/// A distribution over concrete prompts: the user request plus the weighted
/// stratification that drives stratum draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilisticPrompt {
    pub user_request: String,
    pub stratification: WeightedStratification,
}

impl ProbabilisticPrompt {
    pub fn new(
        user_request: impl Into<String>,
        stratification: WeightedStratification,
    ) -> Result<Self> {
        stratification.validate()?;
        Ok(Self {
            user_request: user_request.into(),
            stratification,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub answer: String,
    /// Stratum the answer came from; `None` on the unaugmented fallback.
    pub stratum: Option<Stratum>,
    /// Invalid redraws consumed before this answer.
    pub attempts: u32,
    pub prompt_text: String,
    pub fell_back: bool,
}

fn complete_prompt<R: Rng + ?Sized>(
    backend: &dyn Backend,
    prompt_text: &str,
    temperature: f64,
    rng: &mut R,
) -> Result<String> {
    let request = CompletionRequest::new(backend.model(), vec![ChatMessage::user(prompt_text)])?
        .with_temperature(temperature)?
        .with_seed(rng.next_u64());
    Ok(backend.complete(&request)?.text)
}

/// Draws strata until the model produces a non-`Invalid` answer, redrawing at
/// most `max_invalid_retries` times; on exhaustion it falls back to the
/// unaugmented request. Over many calls the returned strata follow the joint
/// distribution restricted to strata the model ever answers.
pub fn sample_response<R: Rng + ?Sized>(
    backend: &dyn Backend,
    prompt: &ProbabilisticPrompt,
    temperature: f64,
    rng: &mut R,
    max_invalid_retries: u32,
) -> Result<SampleOutcome> {
    let properties = prompt.stratification.properties();
    for attempts in 0..=max_invalid_retries {
        let stratum = sample_stratum(prompt.stratification.joint(), rng);
        let prompt_text = render_prompt(&prompt.user_request, properties, &stratum)?;
        let answer = complete_prompt(backend, &prompt_text, temperature, rng)?;
        if !answer.trim().eq_ignore_ascii_case(INVALID_MARKER) {
            return Ok(SampleOutcome {
                answer,
                stratum: Some(stratum),
                attempts,
                prompt_text,
                fell_back: false,
            });
        }
    }
    warn!(
        "every stratum draw answered {INVALID_MARKER:?} after {max_invalid_retries} retries, \
         falling back to the unaugmented request"
    );
    let prompt_text = render_prompt(&prompt.user_request, &[], &Stratum::new(vec![]))?;
    let answer = complete_prompt(backend, &prompt_text, temperature, rng)?;
    Ok(SampleOutcome {
        answer,
        stratum: None,
        attempts: max_invalid_retries,
        prompt_text,
        fell_back: true,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineOptions {
    /// Temperature for the stratification and estimation calls. Answer
    /// sampling has its own temperature.
    pub stage_temperature: f64,
    pub max_invalid_retries: u32,
    /// Concurrent marginal estimations. Keep at 1 with scripted mocks,
    /// whose responses are order-sensitive.
    pub estimation_fanout: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            stage_temperature: 0.0,
            max_invalid_retries: DEFAULT_MAX_INVALID_RETRIES,
            estimation_fanout: 1,
        }
    }
}

/// Stage-1/2 output for a request, via the cache when possible. Returns the
/// stratification and whether it was a cache hit (a hit issues zero backend
/// calls).
pub fn prepare_stratification(
    backend: &dyn Backend,
    user_request: &str,
    cache: &PipelineCache,
    options: &PipelineOptions,
) -> Result<(WeightedStratification, bool)> {
    if let Some(entry) = cache.load(user_request, backend.model())? {
        return Ok((entry.estimation.stratification, true));
    }
    let autostrat = run_auto_stratification(backend, user_request, options.stage_temperature)?;
    let estimation = run_estimation(
        backend,
        user_request,
        &autostrat.properties,
        EstimationOptions {
            temperature: options.stage_temperature,
            fanout: options.estimation_fanout,
        },
    )?;
    let stratification = estimation.stratification.clone();
    let entry = PipelineCacheEntry::new(backend.model(), user_request, autostrat, estimation);
    cache.store(&entry)?;
    Ok((stratification, false))
}

/// Full pipeline for one sample: stages 1–2 through the cache, then one
/// probabilistically-prompted draw.
pub fn run_pipeline<R: Rng + ?Sized>(
    backend: &dyn Backend,
    user_request: &str,
    temperature: f64,
    rng: &mut R,
    cache: &PipelineCache,
    options: &PipelineOptions,
) -> Result<SampleOutcome> {
    let (stratification, _) = prepare_stratification(backend, user_request, cache, options)?;
    let prompt = ProbabilisticPrompt::new(user_request, stratification)?;
    sample_response(backend, &prompt, temperature, rng, options.max_invalid_retries)
}
