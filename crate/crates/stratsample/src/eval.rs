//! Diversity measurement: coverage recall / precision / F1 over resampled
//! transcripts, and KL divergence from the uniform answer distribution for
//! backends that can score forced continuations.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, ChatMessage, CompletionRequest};
use crate::cache::PipelineCache;
use crate::error::{Error, Result};
use crate::sampler::{
    prepare_stratification, render_prompt, sample_response, PipelineOptions, ProbabilisticPrompt,
};
use crate::strata::{Stratum, WeightedStratification};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerEntry {
    pub canonical: String,
    #[serde(default)]
    pub aliases: Vec<String>,
}

/// An underspecified question with its exhaustive set of valid answers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    pub domain: String,
    pub answers: Vec<AnswerEntry>,
}

impl QuestionRecord {
    /// Checks the record invariants: at least two answers (underspecified by
    /// construction) and no duplicate canonical/alias strings after
    /// normalization.
    pub fn validate(&self) -> Result<()> {
        if self.answers.len() < 2 {
            return Err(Error::dataset(
                format!("questions[{}].answers", self.id),
                format!("expected at least 2 answers, got {}", self.answers.len()),
            ));
        }
        let mut seen = BTreeSet::new();
        for (i, answer) in self.answers.iter().enumerate() {
            for (j, text) in std::iter::once(&answer.canonical)
                .chain(answer.aliases.iter())
                .enumerate()
            {
                let normalized = normalize_answer(text);
                if normalized.is_empty() {
                    return Err(Error::dataset(
                        format!("questions[{}].answers[{i}]", self.id),
                        format!("answer text {text:?} normalizes to nothing"),
                    ));
                }
                if !seen.insert(normalized.clone()) {
                    let field = if j == 0 { "canonical" } else { "aliases" };
                    return Err(Error::dataset(
                        format!("questions[{}].answers[{i}].{field}", self.id),
                        format!("duplicate answer text {text:?} after normalization"),
                    ));
                }
            }
        }
        Ok(())
    }
}

const LEADING_ARTICLES: [&str; 3] = ["the ", "a ", "an "];

/// Canonical form used for answer matching: case-folded, whitespace
/// collapsed, terminal punctuation stripped, one leading article stripped.
/// Qualifier words like "Lake" are not stripped here; records carry them as
/// aliases instead.
pub fn normalize_answer(raw: &str) -> String {
    let folded = raw.to_lowercase();
    let collapsed = folded.split_whitespace().collect::<Vec<_>>().join(" ");
    let stripped = collapsed.trim_end_matches(['.', ',', '!', '?', ';', ':']).trim_end();
    for article in LEADING_ARTICLES {
        if let Some(rest) = stripped.strip_prefix(article) {
            if !rest.is_empty() {
                return rest.to_string();
            }
        }
    }
    stripped.to_string()
}

/// Index of the answer entry whose canonical text or alias matches `raw`
/// after normalization. First match wins; no fuzzy matching.
pub fn match_answer(raw: &str, record: &QuestionRecord) -> Option<usize> {
    let normalized = normalize_answer(raw);
    record.answers.iter().position(|entry| {
        normalize_answer(&entry.canonical) == normalized
            || entry
                .aliases
                .iter()
                .any(|alias| normalize_answer(alias) == normalized)
    })
}

/// Raw answers from repeatedly sampling one question at one temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTranscript {
    pub question_id: String,
    pub temperature: f64,
    pub raw_answers: Vec<String>,
}

/// Unique valid answers observed, over all valid answers.
pub fn coverage_recall(transcript: &SampleTranscript, record: &QuestionRecord) -> f64 {
    let matched: BTreeSet<usize> = transcript
        .raw_answers
        .iter()
        .filter_map(|raw| match_answer(raw, record))
        .collect();
    matched.len() as f64 / record.answers.len() as f64
}

/// Matched attempts over all attempts.
pub fn precision(transcript: &SampleTranscript, record: &QuestionRecord) -> f64 {
    if transcript.raw_answers.is_empty() {
        return 0.0;
    }
    let matched = transcript
        .raw_answers
        .iter()
        .filter(|raw| match_answer(raw, record).is_some())
        .count();
    matched as f64 / transcript.raw_answers.len() as f64
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Probability per canonical answer plus the leftover `Invalid` mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseDistribution {
    probs: BTreeMap<String, f64>,
    invalid_mass: f64,
}

impl ResponseDistribution {
    pub fn new(probs: BTreeMap<String, f64>, invalid_mass: f64) -> Result<Self> {
        for (answer, p) in &probs {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::InvalidInput(format!(
                    "probability {p} for {answer:?} outside [0, 1]"
                )));
            }
        }
        if !(0.0..=1.0).contains(&invalid_mass) {
            return Err(Error::InvalidInput(format!(
                "invalid mass {invalid_mass} outside [0, 1]"
            )));
        }
        let total: f64 = probs.values().sum::<f64>() + invalid_mass;
        if (total - 1.0).abs() > crate::strata::PROB_SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "distribution sums to {total}, expected 1"
            )));
        }
        Ok(Self {
            probs,
            invalid_mass,
        })
    }

    /// Builds the distribution from per-answer probabilities, assigning the
    /// remaining density to the `Invalid` bucket. A total marginally above 1
    /// (scoring floors can overshoot) clamps the bucket at zero.
    fn from_answer_probs(probs: BTreeMap<String, f64>) -> Self {
        let total: f64 = probs.values().sum();
        if total > 1.0 + crate::strata::PROB_SUM_TOLERANCE {
            warn!("answer probabilities sum to {total} > 1; invalid mass clamped to 0");
        }
        Self {
            invalid_mass: (1.0 - total).max(0.0),
            probs,
        }
    }

    pub fn prob(&self, canonical: &str) -> f64 {
        self.probs.get(canonical).copied().unwrap_or(0.0)
    }

    pub fn probs(&self) -> &BTreeMap<String, f64> {
        &self.probs
    }

    pub fn invalid_mass(&self) -> f64 {
        self.invalid_mass
    }
}

/// Response distribution of a single prompt: each canonical answer scored as
/// a forced continuation (with a leading space), exponentiated.
pub fn baseline_distribution(
    backend: &dyn Backend,
    prompt: &str,
    record: &QuestionRecord,
) -> Result<ResponseDistribution> {
    if !backend.supports_scoring() {
        return Err(crate::backend::BackendError::ScoringUnsupported.into());
    }
    let mut probs = BTreeMap::new();
    for entry in &record.answers {
        let score = backend.score_continuation(prompt, &format!(" {}", entry.canonical))?;
        probs.insert(entry.canonical.clone(), score.exp());
    }
    Ok(ResponseDistribution::from_answer_probs(probs))
}

/// Mixture over strata: each answer's probability is the per-stratum
/// conditional weighted by the joint stratum probability.
pub fn simplestrat_distribution(
    backend: &dyn Backend,
    stratification: &WeightedStratification,
    user_request: &str,
    record: &QuestionRecord,
) -> Result<ResponseDistribution> {
    if !backend.supports_scoring() {
        return Err(crate::backend::BackendError::ScoringUnsupported.into());
    }
    let mut probs: BTreeMap<String, f64> = record
        .answers
        .iter()
        .map(|entry| (entry.canonical.clone(), 0.0))
        .collect();
    for (stratum, weight) in stratification.joint().iter() {
        if weight == 0.0 {
            continue;
        }
        let prompt = render_prompt(user_request, stratification.properties(), &stratum)?;
        for entry in &record.answers {
            let score = backend.score_continuation(&prompt, &format!(" {}", entry.canonical))?;
            *probs.get_mut(&entry.canonical).expect("inserted above") += weight * score.exp();
        }
    }
    Ok(ResponseDistribution::from_answer_probs(probs))
}

/// KL divergence in nats from the uniform distribution over the record's
/// valid answers to the response distribution:
/// `Σ (1/n) · ln((1/n) / p(s))`. Any unsupported valid answer makes it +∞.
pub fn kl_from_uniform(dist: &ResponseDistribution, record: &QuestionRecord) -> f64 {
    let n = record.answers.len() as f64;
    let uniform = 1.0 / n;
    let mut total = 0.0;
    for entry in &record.answers {
        let p = dist.prob(&entry.canonical);
        if p <= 0.0 {
            return f64::INFINITY;
        }
        total += uniform * (uniform / p).ln();
    }
    total.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    #[serde(rename = "simplestrat")]
    SimpleStrat,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::SimpleStrat => "simplestrat",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "baseline" => Ok(Method::Baseline),
            "simplestrat" => Ok(Method::SimpleStrat),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionMetrics {
    pub id: String,
    pub temperature: f64,
    pub method: Method,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// `None` when the backend cannot score continuations.
    pub kl_nats: Option<f64>,
    pub invalid_mass: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionFailure {
    pub id: String,
    pub temperature: Option<f64>,
    pub method: Method,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub temperature: f64,
    pub method: Method,
    pub question_count: usize,
    pub mean_recall: f64,
    pub mean_precision: f64,
    pub mean_f1: f64,
    /// Mean over questions with finite KL; `None` when none were scored.
    pub mean_kl_nats: Option<f64>,
    pub infinite_kl_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<QuestionMetrics>,
    pub aggregates: Vec<AggregateMetrics>,
    pub failures: Vec<QuestionFailure>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub temperatures: Vec<f64>,
    pub samples_per_question: usize,
    pub seed: u64,
    pub methods: Vec<Method>,
    pub concurrency: usize,
    pub pipeline: PipelineOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            temperatures: vec![0.7],
            samples_per_question: 100,
            seed: 0,
            methods: vec![Method::Baseline, Method::SimpleStrat],
            concurrency: 1,
            pipeline: PipelineOptions::default(),
        }
    }
}

fn sample_baseline<R: Rng + ?Sized>(
    backend: &dyn Backend,
    prompt: &str,
    temperature: f64,
    rng: &mut R,
) -> Result<String> {
    let request = CompletionRequest::new(backend.model(), vec![ChatMessage::user(prompt)])?
        .with_temperature(temperature)?
        .with_seed(rng.next_u64());
    Ok(backend.complete(&request)?.text)
}

struct QuestionOutcome {
    rows: Vec<QuestionMetrics>,
    failures: Vec<QuestionFailure>,
}

fn evaluate_question(
    backend: &dyn Backend,
    record: &QuestionRecord,
    question_index: usize,
    cache: &PipelineCache,
    options: &EvalOptions,
) -> QuestionOutcome {
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    // Per-question RNG so parallel execution cannot perturb draws.
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed ^ question_index as u64);
    let unaugmented =
        render_prompt(&record.question, &[], &Stratum::new(vec![])).expect("zero properties");

    for &method in &options.methods {
        let prompt = match method {
            Method::Baseline => None,
            Method::SimpleStrat => {
                match prepare_stratification(backend, &record.question, cache, &options.pipeline)
                {
                    Ok((stratification, _)) => {
                        match ProbabilisticPrompt::new(&record.question, stratification) {
                            Ok(p) => Some(p),
                            Err(err) => {
                                failures.push(QuestionFailure {
                                    id: record.id.clone(),
                                    temperature: None,
                                    method,
                                    message: err.to_string(),
                                });
                                continue;
                            }
                        }
                    }
                    Err(err) => {
                        failures.push(QuestionFailure {
                            id: record.id.clone(),
                            temperature: None,
                            method,
                            message: format!("stratification failed: {err}"),
                        });
                        continue;
                    }
                }
            }
        };

        // Distribution metrics are temperature-independent here; compute once.
        let distribution = if backend.supports_scoring() {
            let result = match (&method, &prompt) {
                (Method::Baseline, _) => baseline_distribution(backend, &unaugmented, record),
                (Method::SimpleStrat, Some(p)) => {
                    simplestrat_distribution(backend, &p.stratification, &record.question, record)
                }
                (Method::SimpleStrat, None) => unreachable!("prompt prepared above"),
            };
            match result {
                Ok(dist) => Some(dist),
                Err(err) => {
                    failures.push(QuestionFailure {
                        id: record.id.clone(),
                        temperature: None,
                        method,
                        message: format!("scoring failed: {err}"),
                    });
                    None
                }
            }
        } else {
            None
        };
        let kl = distribution.as_ref().map(|d| kl_from_uniform(d, record));
        let invalid_mass = distribution.as_ref().map(|d| d.invalid_mass());

        for &temperature in &options.temperatures {
            let mut raw_answers = Vec::with_capacity(options.samples_per_question);
            let mut sample_error = None;
            for _ in 0..options.samples_per_question {
                let drawn = match &prompt {
                    None => sample_baseline(backend, &unaugmented, temperature, &mut rng),
                    Some(p) => sample_response(
                        backend,
                        p,
                        temperature,
                        &mut rng,
                        options.pipeline.max_invalid_retries,
                    )
                    .map(|outcome| outcome.answer),
                };
                match drawn {
                    Ok(answer) => raw_answers.push(answer),
                    Err(err) => {
                        sample_error = Some(err);
                        break;
                    }
                }
            }
            if let Some(err) = sample_error {
                failures.push(QuestionFailure {
                    id: record.id.clone(),
                    temperature: Some(temperature),
                    method,
                    message: format!("sampling failed: {err}"),
                });
                continue;
            }
            let transcript = SampleTranscript {
                question_id: record.id.clone(),
                temperature,
                raw_answers,
            };
            let recall = coverage_recall(&transcript, record);
            let prec = precision(&transcript, record);
            rows.push(QuestionMetrics {
                id: record.id.clone(),
                temperature,
                method,
                recall,
                precision: prec,
                f1: f1(prec, recall),
                kl_nats: kl,
                invalid_mass,
            });
        }
    }
    QuestionOutcome { rows, failures }
}

/// Runs the full experiment loop: every question × temperature × method,
/// `samples_per_question` draws each, aggregated per (temperature, method).
/// Question-level failures are recorded and the run continues.
pub fn run_evaluation(
    backend: &dyn Backend,
    dataset: &[QuestionRecord],
    cache: &PipelineCache,
    options: &EvalOptions,
) -> Result<MetricsReport> {
    for record in dataset {
        record.validate()?;
    }
    if options.samples_per_question == 0 {
        return Err(Error::Config("samples_per_question must be at least 1".into()));
    }

    let outcomes: Vec<Option<QuestionOutcome>> = if options.concurrency <= 1 {
        dataset
            .iter()
            .enumerate()
            .map(|(i, record)| Some(evaluate_question(backend, record, i, cache, options)))
            .collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<QuestionOutcome>>> =
            Mutex::new((0..dataset.len()).map(|_| None).collect());
        std::thread::scope(|scope| {
            for _ in 0..options.concurrency.min(dataset.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= dataset.len() {
                        break;
                    }
                    let outcome = evaluate_question(backend, &dataset[i], i, cache, options);
                    slots.lock().unwrap()[i] = Some(outcome);
                });
            }
        });
        slots.into_inner().unwrap()
    };

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for outcome in outcomes.into_iter().flatten() {
        rows.extend(outcome.rows);
        failures.extend(outcome.failures);
    }

    let mut aggregates = Vec::new();
    for &temperature in &options.temperatures {
        for &method in &options.methods {
            let group: Vec<&QuestionMetrics> = rows
                .iter()
                .filter(|r| r.temperature == temperature && r.method == method)
                .collect();
            if group.is_empty() {
                continue;
            }
            let count = group.len() as f64;
            let finite_kls: Vec<f64> = group
                .iter()
                .filter_map(|r| r.kl_nats)
                .filter(|kl| kl.is_finite())
                .collect();
            let infinite_kl_count = group
                .iter()
                .filter_map(|r| r.kl_nats)
                .filter(|kl| kl.is_infinite())
                .count();
            aggregates.push(AggregateMetrics {
                temperature,
                method,
                question_count: group.len(),
                mean_recall: group.iter().map(|r| r.recall).sum::<f64>() / count,
                mean_precision: group.iter().map(|r| r.precision).sum::<f64>() / count,
                mean_f1: group.iter().map(|r| r.f1).sum::<f64>() / count,
                mean_kl_nats: if finite_kls.is_empty() {
                    None
                } else {
                    Some(finite_kls.iter().sum::<f64>() / finite_kls.len() as f64)
                },
                infinite_kl_count,
            });
        }
    }

    Ok(MetricsReport {
        rows,
        aggregates,
        failures,
    })
}

/// CSV form of the per-question rows: one row per question × temperature ×
/// method.
pub fn report_to_csv(report: &MetricsReport) -> Result<String> {
    #[derive(Serialize)]
    struct CsvRow<'a> {
        id: &'a str,
        temp: f64,
        method: &'a str,
        recall: f64,
        precision: f64,
        f1: f64,
        kl_nats: Option<f64>,
        invalid_mass: Option<f64>,
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in &report.rows {
        writer
            .serialize(CsvRow {
                id: &row.id,
                temp: row.temperature,
                method: row.method.as_str(),
                recall: row.recall,
                precision: row.precision,
                f1: row.f1,
                kl_nats: row.kl_nats,
                invalid_mass: row.invalid_mass,
            })
            .map_err(|e| Error::InvalidInput(format!("csv serialization: {e}")))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv flush: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidInput(format!("csv utf-8: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CategoricalBackend, CategoricalTable, PromptRule, StageProperty};
    use crate::sampler::render_condition_line;
    use crate::strata::{MarginalEstimate, PartitionProperty, PropertyOrigin};

    fn record(answers: &[&str]) -> QuestionRecord {
        QuestionRecord {
            id: "q1".into(),
            question: "Name one Great Lake in the United States.".into(),
            domain: "geography".into(),
            answers: answers
                .iter()
                .map(|a| AnswerEntry {
                    canonical: a.to_string(),
                    aliases: vec![format!("lake {a}")],
                })
                .collect(),
        }
    }

    fn great_lakes() -> QuestionRecord {
        record(&["Erie", "Michigan", "Superior", "Huron", "Ontario"])
    }

    fn transcript(answers: &[&str]) -> SampleTranscript {
        SampleTranscript {
            question_id: "q1".into(),
            temperature: 0.7,
            raw_answers: answers.iter().map(|a| a.to_string()).collect(),
        }
    }

    fn table(entries: &[(&str, f64)]) -> CategoricalTable {
        CategoricalTable::new(entries.iter().map(|(a, p)| (a.to_string(), *p)).collect())
            .unwrap()
    }

    fn dist(entries: &[(&str, f64)], invalid: f64) -> ResponseDistribution {
        ResponseDistribution::new(
            entries.iter().map(|(a, p)| (a.to_string(), *p)).collect(),
            invalid,
        )
        .unwrap()
    }

    #[test]
    fn normalization_folds_trims_and_strips() {
        assert_eq!(normalize_answer("  Lake Erie."), "lake erie");
        assert_eq!(normalize_answer("The Ohio"), "ohio");
        assert_eq!(normalize_answer("OHIO"), "ohio");
        assert_eq!(normalize_answer("An  Example  !?"), "example");
        assert_eq!(normalize_answer("a"), "a");
    }

    #[test]
    fn matching_uses_aliases_but_never_fuzz() {
        let record = great_lakes();
        assert_eq!(match_answer("Erie", &record), Some(0));
        assert_eq!(match_answer("Lake Erie", &record), Some(0));
        assert_eq!(match_answer("lake michigan-huron", &record), None);
        assert_eq!(match_answer("Superior", &record), Some(2));
    }

    #[test]
    fn recall_four_of_five_lakes() {
        let record = great_lakes();
        let mut answers = Vec::new();
        for _ in 0..25 {
            answers.extend(["Erie", "Michigan", "Superior", "Huron"]);
        }
        let transcript = transcript(&answers);
        assert_eq!(coverage_recall(&transcript, &record), 0.8);
        assert_eq!(precision(&transcript, &record), 1.0);
    }

    #[test]
    fn recall_extremes() {
        let record = great_lakes();
        let all = transcript(&["Erie", "Michigan", "Superior", "Huron", "Ontario"]);
        assert_eq!(coverage_recall(&all, &record), 1.0);
        let none = transcript(&["Mississippi"]);
        assert_eq!(coverage_recall(&none, &record), 0.0);
        assert_eq!(precision(&none, &record), 0.0);
    }

    #[test]
    fn f1_is_the_harmonic_mean() {
        // Hand computation: 2·1·0.8 / (1 + 0.8) = 1.6 / 1.8.
        assert!((f1(1.0, 0.8) - 1.6 / 1.8).abs() < 1e-12);
        assert_eq!(f1(0.0, 0.0), 0.0);
        assert_eq!(f1(1.0, 1.0), 1.0);
    }

    #[test]
    fn recall_times_answer_count_bounds_matched_attempts() {
        let record = great_lakes();
        let t = transcript(&["Erie", "Erie", "Huron", "junk", "Ontario"]);
        let matched = t
            .raw_answers
            .iter()
            .filter(|raw| match_answer(raw, &record).is_some())
            .count();
        let recall = coverage_recall(&t, &record);
        assert!(recall * record.answers.len() as f64 <= matched as f64 + 1e-12);
        assert!(recall <= 1.0 && precision(&t, &record) <= 1.0);
    }

    #[test]
    fn recall_is_monotone_in_sample_count() {
        let record = great_lakes();
        let answers = ["Erie", "Huron", "junk", "Michigan", "Superior", "Ontario"];
        let mut last = 0.0;
        for n in 1..=answers.len() {
            let t = transcript(&answers[..n]);
            let r = coverage_recall(&t, &record);
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn baseline_distribution_matches_mock_table() {
        let record = record(&["A", "B"]);
        let backend = CategoricalBackend::new(table(&[("A", 0.87), ("B", 0.13)]));
        let dist = baseline_distribution(&backend, "prompt", &record).unwrap();
        assert!((dist.prob("A") - 0.87).abs() < 1e-9);
        assert!((dist.prob("B") - 0.13).abs() < 1e-9);
        assert!(dist.invalid_mass().abs() < 1e-9);
    }

    #[test]
    fn baseline_distribution_remainder_goes_to_invalid() {
        let record = record(&["A", "B"]);
        let backend = CategoricalBackend::new(table(&[("A", 0.5)]));
        let dist = baseline_distribution(&backend, "prompt", &record).unwrap();
        assert!((dist.prob("A") - 0.5).abs() < 1e-9);
        assert!((dist.invalid_mass() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn scoring_unsupported_backends_error() {
        let record = record(&["A", "B"]);
        let backend = crate::backend::ScriptedBackend::new(vec![]);
        assert!(baseline_distribution(&backend, "prompt", &record).is_err());
    }

    fn two_stratum_setup(
        tt_table: CategoricalTable,
        ft_table: CategoricalTable,
    ) -> (WeightedStratification, CategoricalBackend) {
        let property = PartitionProperty::new(
            "p1",
            "The answer is in the first group.",
            PropertyOrigin::UserSupplied,
        )
        .unwrap();
        let ws = WeightedStratification::new(vec![
            MarginalEstimate::new(property.clone(), 0.7).unwrap(),
        ])
        .unwrap();
        let backend = CategoricalBackend::new(table(&[("unused", 1.0)]))
            .with_rule(PromptRule {
                when_contains: vec![render_condition_line(&property, true)],
                table: tt_table,
            })
            .with_rule(PromptRule {
                when_contains: vec![render_condition_line(&property, false)],
                table: ft_table,
            });
        (ws, backend)
    }

    #[test]
    fn mixture_of_point_masses() {
        let record = record(&["A", "B"]);
        let property = PartitionProperty::new("p1", "s", PropertyOrigin::UserSupplied).unwrap();
        let ws = WeightedStratification::new(vec![
            MarginalEstimate::new(property.clone(), 0.5).unwrap(),
        ])
        .unwrap();
        let backend = CategoricalBackend::new(table(&[("unused", 1.0)]))
            .with_rule(PromptRule {
                when_contains: vec![render_condition_line(&property, true)],
                table: table(&[("A", 1.0)]),
            })
            .with_rule(PromptRule {
                when_contains: vec![render_condition_line(&property, false)],
                table: table(&[("B", 1.0)]),
            })
            .with_floor(0.0f64.max(1e-300));
        let dist = simplestrat_distribution(&backend, &ws, "req", &record).unwrap();
        assert!((dist.prob("A") - 0.5).abs() < 1e-9);
        assert!((dist.prob("B") - 0.5).abs() < 1e-9);
    }

    #[test]
    fn weighted_sum_oracle() {
        // 0.7·{A:0.8, B:0.2} + 0.3·{A:0.2, B:0.8} = {A:0.62, B:0.38}.
        let record = record(&["A", "B"]);
        let (ws, backend) =
            two_stratum_setup(table(&[("A", 0.8), ("B", 0.2)]), table(&[("A", 0.2), ("B", 0.8)]));
        let dist = simplestrat_distribution(&backend, &ws, "req", &record).unwrap();
        assert!((dist.prob("A") - 0.62).abs() < 1e-9);
        assert!((dist.prob("B") - 0.38).abs() < 1e-9);
        assert!(dist.invalid_mass() < 1e-6);
    }

    #[test]
    fn degenerate_mixture_equals_baseline_on_that_prompt() {
        let record = record(&["A", "B"]);
        let property = PartitionProperty::new("p1", "s", PropertyOrigin::UserSupplied).unwrap();
        let ws = WeightedStratification::new(vec![
            MarginalEstimate::new(property.clone(), 1.0).unwrap(),
        ])
        .unwrap();
        let backend = CategoricalBackend::new(table(&[("A", 0.6), ("B", 0.4)]));
        let mixed = simplestrat_distribution(&backend, &ws, "req", &record).unwrap();
        let prompt = render_prompt("req", ws.properties(), &Stratum::new(vec![true])).unwrap();
        let direct = baseline_distribution(&backend, &prompt, &record).unwrap();
        assert!((mixed.prob("A") - direct.prob("A")).abs() < 1e-12);
        assert!((mixed.prob("B") - direct.prob("B")).abs() < 1e-12);
    }

    #[test]
    fn mixture_probs_are_convex_combinations() {
        let record = record(&["A", "B"]);
        let (ws, backend) =
            two_stratum_setup(table(&[("A", 0.9), ("B", 0.1)]), table(&[("A", 0.3), ("B", 0.6)]));
        let dist = simplestrat_distribution(&backend, &ws, "req", &record).unwrap();
        assert!(dist.prob("A") <= 0.9 && dist.prob("A") >= 0.3);
        assert!(dist.prob("B") <= 0.6 && dist.prob("B") >= 0.1);
    }

    #[test]
    fn kl_zero_iff_uniform() {
        let record = record(&["A", "B"]);
        let uniform = dist(&[("A", 0.5), ("B", 0.5)], 0.0);
        assert!(kl_from_uniform(&uniform, &record).abs() < 1e-12);
        let skewed = dist(&[("A", 0.6), ("B", 0.4)], 0.0);
        assert!(kl_from_uniform(&skewed, &record) > 0.0);
    }

    #[test]
    fn kl_direct_sum_evaluation() {
        // 0.5·ln(0.5/0.75) + 0.5·ln(0.5/0.25) ≈ 0.1438 nats.
        let record = record(&["A", "B"]);
        let d = dist(&[("A", 0.75), ("B", 0.25)], 0.0);
        let expected = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((kl_from_uniform(&d, &record) - expected).abs() < 1e-12);
        assert!((kl_from_uniform(&d, &record) - 0.1438).abs() < 1e-3);
    }

    #[test]
    fn kl_zero_support_is_infinite() {
        let record = record(&["A", "B"]);
        let d = dist(&[("A", 1.0)], 0.0);
        assert!(kl_from_uniform(&d, &record).is_infinite());
    }

    #[test]
    fn evaluation_is_deterministic_given_a_seed() {
        let dataset = vec![great_lakes()];
        let backend = CategoricalBackend::new(table(&[
            ("Erie", 0.5),
            ("Huron", 0.2),
            ("Michigan", 0.2),
            ("Superior", 0.1),
        ]))
        .with_properties(vec![StageProperty {
            statement: "The lake borders Canada.".into(),
            p_true: 0.5,
        }])
        .unwrap();
        let options = EvalOptions {
            samples_per_question: 30,
            ..EvalOptions::default()
        };
        let cache = PipelineCache::disabled();
        let a = run_evaluation(&backend, &dataset, &cache, &options).unwrap();
        let b = run_evaluation(&backend, &dataset, &cache, &options).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 2);
        assert!(a.failures.is_empty());
        assert_eq!(report_to_csv(&a).unwrap(), report_to_csv(&b).unwrap());
    }

    #[test]
    fn concurrency_does_not_change_results() {
        let mut dataset = Vec::new();
        for i in 0..4 {
            let mut r = great_lakes();
            r.id = format!("q{i}");
            dataset.push(r);
        }
        let backend = CategoricalBackend::new(table(&[("Erie", 0.9), ("Huron", 0.1)]))
            .with_properties(vec![StageProperty {
                statement: "The lake borders Canada.".into(),
                p_true: 0.5,
            }])
            .unwrap();
        let sequential = EvalOptions {
            samples_per_question: 10,
            methods: vec![Method::Baseline],
            ..EvalOptions::default()
        };
        let parallel = EvalOptions {
            concurrency: 4,
            ..sequential.clone()
        };
        let cache = PipelineCache::disabled();
        let a = run_evaluation(&backend, &dataset, &cache, &sequential).unwrap();
        let b = run_evaluation(&backend, &dataset, &cache, &parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validation_rejects_duplicate_aliases() {
        let mut r = record(&["A", "B"]);
        r.answers[1].aliases.push("lake a".into());
        assert!(r.validate().is_err());
        assert!(record(&["A", "B"]).validate().is_ok());
        let single = record(&["A"]);
        assert!(matches!(single.validate(), Err(Error::Dataset { .. })));
    }
}
