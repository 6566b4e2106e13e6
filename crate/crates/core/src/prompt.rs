//! Synonym pools and prompt construction.
//!
//! Each class carries an ordered pool of candidate class-name tokens; a
//! prompt template renders every candidate (ground-truth name first) into
//! the prompt set the text encoder scores.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Ordered candidate class names for one class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymPool {
    pub class_index: usize,
    pub ground_truth_name: String,
    pub synonyms: Vec<String>,
    pub corpus_tag: String,
}

impl SynonymPool {
    /// Number of synonyms (the candidate set has `m + 1` entries).
    pub fn m(&self) -> usize {
        self.synonyms.len()
    }

    /// Candidate name at position `j`: 0 is the ground truth, `j ≥ 1` the
    /// `j`-th synonym.
    pub fn name_at(&self, j: usize) -> Option<&str> {
        if j == 0 {
            Some(&self.ground_truth_name)
        } else {
            self.synonyms.get(j - 1).map(|s| s.as_str())
        }
    }
}

/// Fixed context wrapped around a class name, e.g. `"A photo of " + name + "."`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub context_prefix: String,
    pub terminator: String,
}

impl PromptTemplate {
    pub fn new(context_prefix: impl Into<String>, terminator: impl Into<String>) -> Self {
        PromptTemplate {
            context_prefix: context_prefix.into(),
            terminator: terminator.into(),
        }
    }

    pub fn render(&self, class_name: &str) -> String {
        format!("{}{}{}", self.context_prefix, class_name, self.terminator)
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::new("A photo of ", ".")
    }
}

/// The rendered candidate prompts for one class; index 0 is always the
/// ground-truth prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub class_index: usize,
    pub prompts: Vec<String>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

#[derive(Debug, Deserialize)]
struct PoolFileEntry {
    class: String,
    class_index: i64,
    synonyms: Vec<String>,
    #[serde(default)]
    corpus: String,
}

fn ingest_err(context: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Ingest {
        context: context.into(),
        message: message.into(),
    }
}

/// Parse a synonym file: a UTF-8 JSON array of
/// `{"class", "class_index", "synonyms", "corpus"}` objects.
///
/// Entry order in the file is preserved inside each pool; the returned map
/// is keyed by class index.
pub fn parse_pools(text: &str) -> Result<BTreeMap<usize, SynonymPool>> {
    let entries: Vec<PoolFileEntry> = serde_json::from_str(text).map_err(|e| {
        ingest_err(
            format!("line {}, column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    if entries.is_empty() {
        return Err(ingest_err("file", "no class entries"));
    }
    let mut pools = BTreeMap::new();
    let mut seen_names: BTreeMap<String, usize> = BTreeMap::new();
    for (pos, entry) in entries.into_iter().enumerate() {
        let context = format!("entry {} (class {:?})", pos, entry.class);
        if entry.class.trim().is_empty() {
            return Err(ingest_err(context, "empty class name"));
        }
        if entry.class_index < 0 {
            return Err(ingest_err(context, "negative class_index"));
        }
        let class_index = entry.class_index as usize;
        if let Some(prev) = seen_names.insert(entry.class.clone(), pos) {
            return Err(ingest_err(
                context,
                format!("duplicate class name (first at entry {prev})"),
            ));
        }
        for (j, syn) in entry.synonyms.iter().enumerate() {
            if syn.trim().is_empty() {
                return Err(ingest_err(context.clone(), format!("empty synonym {j}")));
            }
            if syn == &entry.class {
                return Err(ingest_err(
                    context.clone(),
                    format!("synonym {j} repeats the ground-truth name"),
                ));
            }
            if entry.synonyms[..j].contains(syn) {
                return Err(ingest_err(
                    context.clone(),
                    format!("duplicate synonym {syn:?}"),
                ));
            }
        }
        let pool = SynonymPool {
            class_index,
            ground_truth_name: entry.class,
            synonyms: entry.synonyms,
            corpus_tag: entry.corpus,
        };
        if pools.insert(class_index, pool).is_some() {
            return Err(ingest_err(
                context,
                format!("duplicate class_index {class_index}"),
            ));
        }
    }
    Ok(pools)
}

/// Load and validate a synonym file from disk.
pub fn load_pools(path: &Path) -> Result<BTreeMap<usize, SynonymPool>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ingest_err(path.display().to_string(), e.to_string()))?;
    parse_pools(&text)
}

/// Check pools against the dataset's class list: every class must have a
/// pool whose ground-truth name matches.
pub fn validate_pools_against(
    pools: &BTreeMap<usize, SynonymPool>,
    class_names: &[String],
) -> Result<()> {
    for (k, name) in class_names.iter().enumerate() {
        match pools.get(&k) {
            None => {
                return Err(ingest_err(
                    format!("class {k}"),
                    format!("no pool for dataset class {name:?}"),
                ))
            }
            Some(pool) if &pool.ground_truth_name != name => {
                return Err(ingest_err(
                    format!("class {k}"),
                    format!(
                        "unknown class name: pool says {:?}, dataset says {name:?}",
                        pool.ground_truth_name
                    ),
                ))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Render the `m + 1` candidate prompts for one pool.
pub fn build_prompt_set(pool: &SynonymPool, template: &PromptTemplate) -> PromptSet {
    let mut prompts = Vec::with_capacity(pool.m() + 1);
    prompts.push(template.render(&pool.ground_truth_name));
    for syn in &pool.synonyms {
        prompts.push(template.render(syn));
    }
    PromptSet {
        class_index: pool.class_index,
        prompts,
    }
}

/// Keep only the first `min(m, m_max)` synonyms, preserving order.
pub fn truncate_pool(pool: &SynonymPool, m_max: i64) -> Result<SynonymPool> {
    if m_max < 0 {
        return Err(Error::argument(format!("negative pool truncation {m_max}")));
    }
    let keep = (m_max as usize).min(pool.m());
    Ok(SynonymPool {
        class_index: pool.class_index,
        ground_truth_name: pool.ground_truth_name.clone(),
        synonyms: pool.synonyms[..keep].to_vec(),
        corpus_tag: pool.corpus_tag.clone(),
    })
}
