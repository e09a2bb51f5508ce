//! Command-line entry point: `stratify`, `sample`, `eval`, and `gen-dataset`
//! over a shared configuration surface. Precedence: flags > config file >
//! environment > defaults.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::backend::{Backend, BackendKind, HttpBackend, API_KEY_ENV};
use crate::cache::{PipelineCache, CACHE_DIR_ENV};
use crate::coverageqa::{
    load_dataset, recursive_search, to_question, to_records, write_dataset, KnowledgeBase,
    SearchConfig, DEFAULT_BLACKLIST,
};
use crate::error::{Error, Result};
use crate::eval::{run_evaluation, report_to_csv, EvalOptions, Method};
use crate::sampler::{
    prepare_stratification, sample_response, PipelineOptions, ProbabilisticPrompt,
    DEFAULT_MAX_INVALID_RETRIES,
};

const DEFAULT_BASE_URL: &str = "https://api.openai.com";
const DEFAULT_CACHE_DIR: &str = ".stratsample-cache";
const DEFAULT_CONFIG_FILE: &str = "stratsample.toml";

#[derive(Debug, Parser)]
#[command(
    name = "stratsample",
    version,
    about = "Stratified sampling for diverse language-model generations"
)]
pub struct Cli {
    #[command(flatten)]
    opts: GlobalOpts,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Default, Args)]
struct GlobalOpts {
    /// Backend kind: http, mock-scripted, or mock-categorical.
    #[arg(long, global = true, value_parser = ["http", "mock-scripted", "mock-categorical"])]
    backend: Option<String>,

    /// Base URL for the http backend.
    #[arg(long, global = true)]
    base_url: Option<String>,

    /// Model identifier for the http backend.
    #[arg(long, global = true)]
    model: Option<String>,

    /// Transcript file (JSON array of responses) for mock-scripted.
    #[arg(long, global = true)]
    script: Option<PathBuf>,

    /// Answer-distribution table file for mock-categorical.
    #[arg(long, global = true)]
    table: Option<PathBuf>,

    /// Enable forced-continuation scoring over http (needs /v1/completions).
    #[arg(long, global = true, action = ArgAction::SetTrue)]
    http_scoring: bool,

    /// Sampling temperature; repeat the flag to sweep.
    #[arg(long = "temperature", global = true, action = ArgAction::Append)]
    temperature: Vec<f64>,

    /// Samples per question for eval.
    #[arg(long, global = true)]
    samples: Option<usize>,

    /// Root seed; all randomness derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// Rerun stages 1–2 on every call and write nothing.
    #[arg(long, global = true, action = ArgAction::SetTrue)]
    no_cache: bool,

    /// Question-level fan-out for eval.
    #[arg(long, global = true)]
    concurrency: Option<usize>,

    /// Dataset JSON path for eval.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,

    #[arg(long, global = true)]
    out_json: Option<PathBuf>,

    #[arg(long, global = true)]
    out_csv: Option<PathBuf>,

    /// Comma-separated methods for eval: baseline,simplestrat.
    #[arg(long, global = true)]
    methods: Option<String>,

    /// Invalid redraws before falling back to the unaugmented request.
    #[arg(long, global = true)]
    max_invalid_retries: Option<u32>,

    /// Config file (TOML key/value); defaults to ./stratsample.toml when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run auto-stratification and estimation for a request and print the
    /// final properties with their probabilities.
    Stratify { request: String },

    /// Draw answers through the full pipeline, one line per sample with its
    /// stratum annotation.
    Sample {
        request: String,

        /// Number of samples to draw.
        #[arg(short = 'n', long = "count", default_value_t = 1)]
        count: u32,
    },

    /// Evaluate coverage and distributional diversity over a dataset.
    Eval,

    /// Generate a dataset from a knowledge-base TSV dump.
    GenDataset {
        /// Triple dump: one `item<TAB>property<TAB>value` per line.
        #[arg(long)]
        kb: PathBuf,

        /// Initial pairing, e.g. `instance of=country`.
        #[arg(long, value_name = "PROPERTY=VALUE")]
        seed_pair: String,

        /// Minimum answers per question.
        #[arg(long)]
        min: Option<usize>,

        /// Maximum answers per question.
        #[arg(long)]
        max: Option<usize>,

        /// Maximum constraints per question, seed included.
        #[arg(long)]
        max_depth: Option<usize>,

        /// Blacklist file, one property per line; overrides the built-in list.
        #[arg(long)]
        blacklist: Option<PathBuf>,

        #[arg(long, default_value = "generated")]
        domain: String,

        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,

        /// Skip natural-language phrasing (placeholder question text, no
        /// backend calls).
        #[arg(long, action = ArgAction::SetTrue)]
        no_text: bool,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    backend: Option<String>,
    base_url: Option<String>,
    model: Option<String>,
    script: Option<PathBuf>,
    table: Option<PathBuf>,
    http_scoring: Option<bool>,
    temperature: Option<Vec<f64>>,
    samples: Option<usize>,
    seed: Option<u64>,
    cache_dir: Option<PathBuf>,
    no_cache: Option<bool>,
    concurrency: Option<usize>,
    dataset: Option<PathBuf>,
    out_json: Option<PathBuf>,
    out_csv: Option<PathBuf>,
    methods: Option<String>,
    max_invalid_retries: Option<u32>,
}

impl ConfigFile {
    fn load(explicit: Option<&Path>) -> Result<Self> {
        let path = match explicit {
            Some(path) => path.to_path_buf(),
            None => {
                let default = PathBuf::from(DEFAULT_CONFIG_FILE);
                if !default.exists() {
                    return Ok(Self::default());
                }
                default
            }
        };
        let text = std::fs::read_to_string(&path)?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub http_scoring: bool,
    pub temperatures: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub cache_dir: PathBuf,
    pub cache_enabled: bool,
    pub concurrency: usize,
    pub dataset: Option<PathBuf>,
    pub out_json: Option<PathBuf>,
    pub out_csv: Option<PathBuf>,
    pub methods: Vec<Method>,
    pub max_invalid_retries: u32,
}

impl RunConfig {
    fn resolve(opts: &GlobalOpts) -> Result<Self> {
        let file = ConfigFile::load(opts.config.as_deref())?;

        let kind = opts
            .backend
            .clone()
            .or(file.backend)
            .unwrap_or_else(|| "http".into());
        let backend = match kind.as_str() {
            "http" => BackendKind::Http {
                base_url: opts
                    .base_url
                    .clone()
                    .or(file.base_url)
                    .unwrap_or_else(|| DEFAULT_BASE_URL.into()),
                model: opts
                    .model
                    .clone()
                    .or(file.model)
                    .ok_or_else(|| Error::Config("--model is required for the http backend".into()))?,
            },
            "mock-scripted" => BackendKind::MockScripted {
                path: opts.script.clone().or(file.script).ok_or_else(|| {
                    Error::Config("--script is required for the mock-scripted backend".into())
                })?,
            },
            "mock-categorical" => BackendKind::MockCategorical {
                path: opts.table.clone().or(file.table).ok_or_else(|| {
                    Error::Config("--table is required for the mock-categorical backend".into())
                })?,
            },
            other => return Err(Error::Config(format!("unknown backend kind {other:?}"))),
        };

        let temperatures = if !opts.temperature.is_empty() {
            opts.temperature.clone()
        } else {
            file.temperature.unwrap_or_else(|| vec![0.7])
        };
        let methods = opts
            .methods
            .clone()
            .or(file.methods)
            .map(|s| s.split(',').map(str::parse).collect::<Result<Vec<Method>>>())
            .transpose()?
            .unwrap_or_else(|| vec![Method::Baseline, Method::SimpleStrat]);
        let cache_dir = opts
            .cache_dir
            .clone()
            .or(file.cache_dir)
            .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_CACHE_DIR));

        let config = Self {
            backend,
            http_scoring: opts.http_scoring || file.http_scoring.unwrap_or(false),
            temperatures,
            samples: opts.samples.or(file.samples).unwrap_or(100),
            seed: opts.seed.or(file.seed).unwrap_or(0),
            cache_dir,
            cache_enabled: !(opts.no_cache || file.no_cache.unwrap_or(false)),
            concurrency: opts.concurrency.or(file.concurrency).unwrap_or(1),
            dataset: opts.dataset.clone().or(file.dataset),
            out_json: opts.out_json.clone().or(file.out_json),
            out_csv: opts.out_csv.clone().or(file.out_csv),
            methods,
            max_invalid_retries: opts
                .max_invalid_retries
                .or(file.max_invalid_retries)
                .unwrap_or(DEFAULT_MAX_INVALID_RETRIES),
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        for &t in &self.temperatures {
            if !(0.0..=2.0).contains(&t) {
                return Err(Error::Config(format!("temperature {t} outside [0, 2]")));
            }
        }
        if self.samples == 0 {
            return Err(Error::Config("samples must be at least 1".into()));
        }
        if self.concurrency == 0 {
            return Err(Error::Config("concurrency must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        Ok(())
    }

    pub fn cache(&self) -> PipelineCache {
        if self.cache_enabled {
            PipelineCache::new(&self.cache_dir)
        } else {
            PipelineCache::disabled()
        }
    }

    pub fn build_backend(&self) -> Result<Box<dyn Backend>> {
        match &self.backend {
            BackendKind::Http { base_url, model } => Ok(Box::new(
                HttpBackend::new(base_url, model, std::env::var(API_KEY_ENV).ok())
                    .with_scoring(self.http_scoring),
            )),
            other => other.build(),
        }
    }

    fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            stage_temperature: 0.0,
            max_invalid_retries: self.max_invalid_retries,
            estimation_fanout: 1,
        }
    }
}

/// Parses arguments from the process environment and runs the command.
/// Returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err @ (Error::Config(_) | Error::InvalidInput(_))) => {
            eprintln!("error: {err}");
            2
        }
        Err(err) => {
            eprintln!("error: {err}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<i32> {
    let config = RunConfig::resolve(&cli.opts)?;
    match cli.command {
        Command::Stratify { request } => cmd_stratify(&request, &config),
        Command::Sample { request, count } => cmd_sample(&request, count, &config),
        Command::Eval => cmd_eval(&config),
        Command::GenDataset {
            kb,
            seed_pair,
            min,
            max,
            max_depth,
            blacklist,
            domain,
            out,
            no_text,
        } => cmd_gen_dataset(
            &config, &kb, &seed_pair, min, max, max_depth, blacklist.as_deref(), &domain,
            out.as_deref(), no_text,
        ),
    }
}

fn cmd_stratify(request: &str, config: &RunConfig) -> Result<i32> {
    let backend = config.build_backend()?;
    let cache = config.cache();
    let (stratification, hit) = prepare_stratification(
        backend.as_ref(),
        request,
        &cache,
        &config.pipeline_options(),
    )?;
    if hit {
        eprintln!(
            "cache hit: {}",
            cache.path_for(request, backend.model()).display()
        );
    }
    for (i, marginal) in stratification.marginals().iter().enumerate() {
        println!(
            "{}. {} :: {}",
            i + 1,
            marginal.property().statement,
            marginal.p_true()
        );
    }
    Ok(0)
}

fn cmd_sample(request: &str, count: u32, config: &RunConfig) -> Result<i32> {
    let backend = config.build_backend()?;
    let cache = config.cache();
    let (stratification, hit) = prepare_stratification(
        backend.as_ref(),
        request,
        &cache,
        &config.pipeline_options(),
    )?;
    if hit {
        eprintln!(
            "cache hit: {}",
            cache.path_for(request, backend.model()).display()
        );
    }
    let prompt = ProbabilisticPrompt::new(request, stratification)?;
    let temperature = config.temperatures.first().copied().unwrap_or(0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for i in 0..count {
        let outcome = sample_response(
            backend.as_ref(),
            &prompt,
            temperature,
            &mut rng,
            config.max_invalid_retries,
        )?;
        match &outcome.stratum {
            Some(stratum) => println!("{}\tstratum={stratum}", outcome.answer),
            None => {
                eprintln!("note: sample {} fell back to the unaugmented request", i + 1);
                println!("{}\tstratum=fallback", outcome.answer);
            }
        }
    }
    Ok(0)
}

fn cmd_eval(config: &RunConfig) -> Result<i32> {
    let dataset_path = config
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("--dataset is required for eval".into()))?;
    let dataset = load_dataset(dataset_path)?;
    let backend = config.build_backend()?;
    let cache = config.cache();
    let options = EvalOptions {
        temperatures: config.temperatures.clone(),
        samples_per_question: config.samples,
        seed: config.seed,
        methods: config.methods.clone(),
        concurrency: config.concurrency,
        pipeline: config.pipeline_options(),
    };
    let report = run_evaluation(backend.as_ref(), &dataset, &cache, &options)?;

    if let Some(path) = &config.out_csv {
        std::fs::write(path, report_to_csv(&report)?)?;
    }
    if let Some(path) = &config.out_json {
        std::fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    for agg in &report.aggregates {
        let kl = match agg.mean_kl_nats {
            Some(v) => format!("{v:.4}"),
            None => "-".into(),
        };
        println!(
            "temp={} method={} recall={:.4} precision={:.4} f1={:.4} kl_nats={} questions={}",
            agg.temperature,
            agg.method,
            agg.mean_recall,
            agg.mean_precision,
            agg.mean_f1,
            kl,
            agg.question_count
        );
    }
    for failure in &report.failures {
        let temp = failure
            .temperature
            .map(|t| format!(" temp={t}"))
            .unwrap_or_default();
        eprintln!(
            "failure: question={} method={}{temp}: {}",
            failure.id, failure.method, failure.message
        );
    }
    Ok(if report.failures.is_empty() { 0 } else { 1 })
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_dataset(
    config: &RunConfig,
    kb_path: &Path,
    seed_pair: &str,
    min: Option<usize>,
    max: Option<usize>,
    max_depth: Option<usize>,
    blacklist_path: Option<&Path>,
    domain: &str,
    out: Option<&Path>,
    no_text: bool,
) -> Result<i32> {
    let kb = KnowledgeBase::load(kb_path)?;
    let (property, value) = seed_pair
        .split_once('=')
        .ok_or_else(|| Error::Config("--seed-pair must be PROPERTY=VALUE".into()))?;
    let blacklist: BTreeSet<String> = match blacklist_path {
        Some(path) => std::fs::read_to_string(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect(),
        None => DEFAULT_BLACKLIST.iter().map(|s| s.to_string()).collect(),
    };
    let defaults = SearchConfig::default();
    let search = SearchConfig {
        min_answers: min.unwrap_or(defaults.min_answers),
        max_answers: max.unwrap_or(defaults.max_answers),
        max_depth: max_depth.unwrap_or(defaults.max_depth),
        blacklist,
    };
    if search.min_answers < 2 || search.min_answers > search.max_answers {
        return Err(Error::Config(format!(
            "bounds --min {} --max {} are not a valid range (min must be at least 2)",
            search.min_answers, search.max_answers
        )));
    }

    let mut questions =
        recursive_search(&kb, (property.to_string(), value.to_string()), &search)?;
    if !no_text {
        let backend = config.build_backend()?;
        for question in &mut questions {
            question.question_text = Some(to_question(backend.as_ref(), &question.constraints)?);
        }
    }
    let records = to_records(&questions, domain);
    eprintln!("emitted {} question(s)", records.len());
    match out {
        Some(path) => write_dataset(&records, path)?,
        None => println!("{}", crate::coverageqa::dataset_json(&records)?),
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn http_backend_requires_a_model() {
        let opts = GlobalOpts {
            config: Some(PathBuf::from("/nonexistent/stratsample.toml")),
            ..GlobalOpts::default()
        };
        // Missing config file is an io error here; point at a real empty one.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "").unwrap();
        let opts = GlobalOpts {
            config: Some(path),
            ..opts
        };
        assert!(matches!(RunConfig::resolve(&opts), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(
            &path,
            "backend = \"http\"\nmodel = \"from-file\"\nsamples = 7\nseed = 3\n",
        )
        .unwrap();
        let opts = GlobalOpts {
            config: Some(path),
            model: Some("from-flag".into()),
            ..GlobalOpts::default()
        };
        let config = RunConfig::resolve(&opts).unwrap();
        assert_eq!(
            config.backend,
            BackendKind::Http {
                base_url: DEFAULT_BASE_URL.into(),
                model: "from-flag".into()
            }
        );
        assert_eq!(config.samples, 7);
        assert_eq!(config.seed, 3);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "modle = \"typo\"\n").unwrap();
        let opts = GlobalOpts {
            config: Some(path),
            ..GlobalOpts::default()
        };
        assert!(matches!(RunConfig::resolve(&opts), Err(Error::Config(_))));
    }

    #[test]
    fn temperatures_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "backend = \"mock-scripted\"\nscript = \"s.json\"\n").unwrap();
        let opts = GlobalOpts {
            config: Some(path),
            temperature: vec![2.5],
            ..GlobalOpts::default()
        };
        assert!(matches!(RunConfig::resolve(&opts), Err(Error::Config(_))));
    }

    #[test]
    fn methods_parse_from_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "backend = \"mock-scripted\"\nscript = \"s.json\"\n").unwrap();
        let opts = GlobalOpts {
            config: Some(path),
            methods: Some("baseline,simplestrat".into()),
            ..GlobalOpts::default()
        };
        let config = RunConfig::resolve(&opts).unwrap();
        assert_eq!(config.methods, vec![Method::Baseline, Method::SimpleStrat]);
    }
}
