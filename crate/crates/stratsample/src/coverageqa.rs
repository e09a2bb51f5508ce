//! Dataset construction from a local knowledge base: recursive constraint
//! search with answer-count bounds, a depth limit, and a property blacklist,
//! plus model-assisted phrasing of constraint sets as natural-language
//! questions.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, ChatMessage, CompletionRequest};
use crate::error::{Error, Result};
use crate::eval::{AnswerEntry, QuestionRecord};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Triple {
    pub item: String,
    pub property: String,
    pub value: String,
}

/// Item/property/value triples indexed both ways: (property, value) → items
/// and item → (property, value) pairs. Immutable after load.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    triple_count: usize,
    by_pair: BTreeMap<(String, String), BTreeSet<String>>,
    by_item: BTreeMap<String, BTreeSet<(String, String)>>,
}

impl KnowledgeBase {
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut kb = KnowledgeBase::default();
        let unique: BTreeSet<Triple> = triples.into_iter().collect();
        kb.triple_count = unique.len();
        for t in unique {
            kb.by_pair
                .entry((t.property.clone(), t.value.clone()))
                .or_default()
                .insert(t.item.clone());
            kb.by_item
                .entry(t.item)
                .or_default()
                .insert((t.property, t.value));
        }
        kb
    }

    /// Loads a TSV dump: one `item<TAB>property<TAB>value` triple per line.
    /// Blank lines are skipped; duplicate lines collapse.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut triples = Vec::new();
        for (index, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 || fields.iter().any(|f| f.trim().is_empty()) {
                return Err(Error::KbFormat {
                    path: path.to_path_buf(),
                    line: index + 1,
                    message: format!(
                        "expected `item<TAB>property<TAB>value`, got {} field(s)",
                        fields.len()
                    ),
                });
            }
            triples.push(Triple {
                item: fields[0].trim().to_string(),
                property: fields[1].trim().to_string(),
                value: fields[2].trim().to_string(),
            });
        }
        Ok(Self::from_triples(triples))
    }

    pub fn len(&self) -> usize {
        self.triple_count
    }

    pub fn is_empty(&self) -> bool {
        self.triple_count == 0
    }

    pub fn items(&self) -> impl Iterator<Item = &str> {
        self.by_item.keys().map(String::as_str)
    }

    pub fn items_with(&self, property: &str, value: &str) -> Option<&BTreeSet<String>> {
        self.by_pair
            .get(&(property.to_string(), value.to_string()))
    }

    pub fn pairs_of(&self, item: &str) -> impl Iterator<Item = &(String, String)> {
        self.by_item.get(item).into_iter().flatten()
    }
}

/// Ordered (property, value) constraints; the first pair is the seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pairs: Vec<(String, String)>,
}

impl ConstraintSet {
    pub fn seed(property: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            pairs: vec![(property.into(), value.into())],
        }
    }

    fn extended(&self, pair: (String, String)) -> Self {
        let mut pairs = self.pairs.clone();
        pairs.push(pair);
        Self { pairs }
    }

    pub fn contains(&self, pair: &(String, String)) -> bool {
        self.pairs.contains(pair)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    fn canonical(&self) -> BTreeSet<(String, String)> {
        self.pairs.iter().cloned().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedQuestion {
    pub constraints: ConstraintSet,
    pub answers: BTreeSet<String>,
    pub question_text: Option<String>,
}

/// Items satisfying every (property, value) constraint.
pub fn answer_set(kb: &KnowledgeBase, constraints: &ConstraintSet) -> Result<BTreeSet<String>> {
    if constraints.is_empty() {
        return Err(Error::InvalidInput("empty constraint set".into()));
    }
    let mut answers: Option<BTreeSet<String>> = None;
    for (property, value) in constraints.pairs() {
        let items = kb.items_with(property, value).cloned().unwrap_or_default();
        answers = Some(match answers {
            None => items,
            Some(current) => current.intersection(&items).cloned().collect(),
        });
        if answers.as_ref().is_some_and(BTreeSet::is_empty) {
            break;
        }
    }
    Ok(answers.unwrap_or_default())
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub min_answers: usize,
    pub max_answers: usize,
    /// Maximum number of constraints, the seed included.
    pub max_depth: usize,
    pub blacklist: BTreeSet<String>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            min_answers: 20,
            max_answers: 40,
            max_depth: 4,
            blacklist: BTreeSet::new(),
        }
    }
}

/// Depth-first search from the seed pairing, extending one non-blacklisted
/// (property, value) pair at a time. A node is emitted when its answer count
/// lands in `[min_answers, max_answers]`; a branch stops once the count
/// drops below `min_answers` (intersection only shrinks) or the depth limit
/// is reached. Results are deduplicated by answer set.
pub fn recursive_search(
    kb: &KnowledgeBase,
    seed: (String, String),
    config: &SearchConfig,
) -> Result<Vec<GeneratedQuestion>> {
    if config.blacklist.contains(&seed.0) {
        return Err(Error::BlacklistedSeed(seed.0));
    }
    let mut emitted = Vec::new();
    let mut seen_answer_sets: BTreeSet<BTreeSet<String>> = BTreeSet::new();
    let mut visited: BTreeSet<BTreeSet<(String, String)>> = BTreeSet::new();
    let root = ConstraintSet::seed(seed.0, seed.1);
    visited.insert(root.canonical());
    search_node(kb, root, config, &mut seen_answer_sets, &mut visited, &mut emitted)?;
    Ok(emitted)
}

fn search_node(
    kb: &KnowledgeBase,
    constraints: ConstraintSet,
    config: &SearchConfig,
    seen_answer_sets: &mut BTreeSet<BTreeSet<String>>,
    visited: &mut BTreeSet<BTreeSet<(String, String)>>,
    emitted: &mut Vec<GeneratedQuestion>,
) -> Result<()> {
    let answers = answer_set(kb, &constraints)?;
    if answers.len() < config.min_answers {
        return Ok(());
    }
    if answers.len() <= config.max_answers && seen_answer_sets.insert(answers.clone()) {
        emitted.push(GeneratedQuestion {
            constraints: constraints.clone(),
            answers: answers.clone(),
            question_text: None,
        });
    }
    if constraints.len() >= config.max_depth {
        return Ok(());
    }
    // Only pairs held by a current answer can tighten without emptying the
    // intersection.
    let candidates: BTreeSet<(String, String)> = answers
        .iter()
        .flat_map(|item| kb.pairs_of(item).cloned())
        .filter(|pair| !config.blacklist.contains(&pair.0) && !constraints.contains(pair))
        .collect();
    for pair in candidates {
        let next = constraints.extended(pair);
        if visited.insert(next.canonical()) {
            search_node(kb, next, config, seen_answer_sets, visited, emitted)?;
        }
    }
    Ok(())
}

/// Asks the backend to phrase a constraint list as one natural-language
/// question requesting a single example. Empty output is retried once.
pub fn to_question(backend: &dyn Backend, constraints: &ConstraintSet) -> Result<String> {
    if constraints.is_empty() {
        return Err(Error::InvalidInput("empty constraint set".into()));
    }
    let listing = constraints
        .pairs()
        .iter()
        .map(|(p, v)| format!("- {p}: {v}"))
        .collect::<Vec<_>>()
        .join("\n");
    let messages = vec![
        ChatMessage::system(
            "You are a helpful assistant that writes clear, natural-sounding questions.",
        ),
        ChatMessage::user(format!(
            "Rewrite the following constraints as a single natural-language question asking \
             for ONE example that satisfies all of them. Respond with only the question.\n\n\
             Constraints:\n{listing}"
        )),
    ];
    let request = CompletionRequest::new(backend.model(), messages)?.with_seed(0);
    for _ in 0..2 {
        let response = backend.complete(&request)?;
        if let Some(line) = response.text.lines().find(|l| !l.trim().is_empty()) {
            return Ok(line.trim().to_string());
        }
    }
    Err(Error::parse("question generation", "model returned empty output twice"))
}

/// Properties excluded from search by default: database-membership and
/// numeric properties plus high-ambiguity relations. Override with an
/// explicit blacklist file.
pub const DEFAULT_BLACKLIST: [&str; 8] = [
    "described by source",
    "on focus list of wikimedia project",
    "population",
    "area",
    "elevation above sea level",
    "coordinate location",
    "different from",
    "said to be the same as",
];

#[derive(Debug, Serialize, Deserialize)]
struct DatasetFile {
    questions: Vec<QuestionRecord>,
}

/// Serializes records as the dataset JSON schema
/// `{"questions":[{"id","question","domain","answers":[{"canonical","aliases":[…]}]}]}`.
pub fn dataset_json(records: &[QuestionRecord]) -> Result<String> {
    for record in records {
        if record.answers.is_empty() {
            return Err(Error::dataset(
                format!("questions[{}].answers", record.id),
                "cannot write a question with no answers",
            ));
        }
        record.validate()?;
    }
    let file = DatasetFile {
        questions: records.to_vec(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn write_dataset(records: &[QuestionRecord], path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dataset_json(records)?)?;
    Ok(())
}

/// Loads and validates a dataset file; `load(write(x)) = x`.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<QuestionRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let file: DatasetFile = serde_json::from_str(&text).map_err(|e| {
        Error::dataset(path.display().to_string(), e.to_string())
    })?;
    for record in &file.questions {
        record.validate()?;
    }
    Ok(file.questions)
}

/// Converts search output into question records; KB items become canonical
/// answers with no aliases.
pub fn to_records(questions: &[GeneratedQuestion], domain: &str) -> Vec<QuestionRecord> {
    questions
        .iter()
        .enumerate()
        .map(|(i, q)| QuestionRecord {
            id: format!("q{:03}", i + 1),
            question: q
                .question_text
                .clone()
                .unwrap_or_else(|| format!("Name an item satisfying: {:?}", q.constraints.pairs())),
            domain: domain.to_string(),
            answers: q
                .answers
                .iter()
                .map(|item| AnswerEntry {
                    canonical: item.clone(),
                    aliases: vec![],
                })
                .collect(),
        })
        .collect()
}
