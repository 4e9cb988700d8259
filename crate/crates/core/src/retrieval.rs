//! "More like this" template retrieval.
//!
//! Query text is reduced to its most distinctive terms by tf-idf, and the
//! stored templates are ranked by BM25 against those terms. Adding a
//! template only updates the inverted index; there is no model to retrain.
//!
//! idf(t)      = ln(1 + (N - df + 0.5) / (df + 0.5))
//! BM25(t, d)  = idf(t) * tf * (k1 + 1) / (tf + k1 * (1 - b + b * |d| / avgdl))

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::document::tokenize;

/// Fixed English stopword list applied before query term selection.
pub const STOPWORDS: [&str; 50] = [
    "a", "an", "and", "are", "as", "at", "be", "but", "by", "for", "from", "has", "have", "he",
    "her", "his", "if", "in", "into", "is", "it", "its", "not", "of", "on", "or", "our", "she",
    "so", "such", "that", "the", "their", "then", "there", "these", "they", "this", "to", "was",
    "we", "were", "which", "who", "will", "with", "would", "you", "your", "shall",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MltParams {
    pub k1: f64,
    pub b: f64,
    pub max_terms: usize,
    pub min_term_freq: u32,
    pub min_doc_freq: usize,
}

impl Default for MltParams {
    fn default() -> Self {
        Self {
            k1: 1.2,
            b: 0.75,
            max_terms: 25,
            min_term_freq: 1,
            min_doc_freq: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IndexError {
    #[error("template `{0}` is already indexed")]
    DuplicateId(String),
    #[error("unknown template `{0}`")]
    UnknownId(String),
    #[error("the template index is empty")]
    EmptyIndex,
    #[error("template `{0}` has no sample text")]
    EmptySample(String),
    #[error("failed to read template library: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateRecord {
    pub id: String,
    pub name: String,
    pub sample_text: String,
    pub cicero_text: String,
    pub concerto_text: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// Corpus statistics and postings.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct IndexStats {
    pub doc_count: usize,
    pub doc_frequencies: BTreeMap<String, usize>,
    pub avg_doc_len: f64,
    /// term -> doc id -> term frequency
    pub postings: BTreeMap<String, BTreeMap<String, u32>>,
}

/// Lowercased alphanumeric tokens of `text`, in order. Punctuation and
/// brace tokens are not terms.
pub fn terms(text: &str) -> Vec<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| t.surface.chars().any(char::is_alphanumeric))
        .map(|t| t.surface.to_lowercase())
        .collect()
}

pub fn is_stopword(term: &str) -> bool {
    STOPWORDS.contains(&term)
}

pub fn idf(doc_count: usize, doc_freq: usize) -> f64 {
    let n = doc_count as f64;
    let df = doc_freq as f64;
    (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
}

/// In-memory inverted index over template sample texts.
#[derive(Debug, Clone, Default)]
pub struct TemplateIndex {
    params: MltParams,
    records: BTreeMap<String, TemplateRecord>,
    doc_lens: BTreeMap<String, usize>,
    total_len: usize,
    stats: IndexStats,
}

impl TemplateIndex {
    pub fn new(params: MltParams) -> Self {
        Self {
            params,
            ..Self::default()
        }
    }

    pub fn params(&self) -> &MltParams {
        &self.params
    }

    pub fn stats(&self) -> &IndexStats {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&TemplateRecord> {
        self.records.get(id)
    }

    /// Records in id order.
    pub fn records(&self) -> impl Iterator<Item = &TemplateRecord> {
        self.records.values()
    }

    pub fn index_template(&mut self, record: TemplateRecord) -> Result<(), IndexError> {
        if self.records.contains_key(&record.id) {
            return Err(IndexError::DuplicateId(record.id));
        }
        if record.sample_text.trim().is_empty() {
            return Err(IndexError::EmptySample(record.id));
        }
        let doc_terms = terms(&record.sample_text);
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for term in &doc_terms {
            *counts.entry(term.clone()).or_default() += 1;
        }
        for (term, tf) in counts {
            self.stats
                .postings
                .entry(term.clone())
                .or_default()
                .insert(record.id.clone(), tf);
            *self.stats.doc_frequencies.entry(term).or_default() += 1;
        }
        self.doc_lens.insert(record.id.clone(), doc_terms.len());
        self.total_len += doc_terms.len();
        self.records.insert(record.id.clone(), record);
        self.refresh_totals();
        Ok(())
    }

    /// Replaces an existing record, or indexes a new one.
    pub fn reindex_template(&mut self, record: TemplateRecord) -> Result<(), IndexError> {
        if self.records.contains_key(&record.id) {
            self.remove_template(&record.id)?;
        }
        self.index_template(record)
    }

    pub fn remove_template(&mut self, id: &str) -> Result<TemplateRecord, IndexError> {
        let record = self
            .records
            .remove(id)
            .ok_or_else(|| IndexError::UnknownId(id.to_string()))?;
        let mut emptied = Vec::new();
        for (term, docs) in self.stats.postings.iter_mut() {
            if docs.remove(id).is_some() {
                let df = self.stats.doc_frequencies.get_mut(term).expect("df tracks postings");
                *df -= 1;
                if docs.is_empty() {
                    emptied.push(term.clone());
                }
            }
        }
        for term in emptied {
            self.stats.postings.remove(&term);
            self.stats.doc_frequencies.remove(&term);
        }
        self.total_len -= self.doc_lens.remove(id).unwrap_or(0);
        self.refresh_totals();
        Ok(record)
    }

    fn refresh_totals(&mut self) {
        self.stats.doc_count = self.records.len();
        self.stats.avg_doc_len = if self.records.is_empty() {
            0.0
        } else {
            self.total_len as f64 / self.records.len() as f64
        };
    }

    fn doc_freq(&self, term: &str) -> usize {
        self.stats.doc_frequencies.get(term).copied().unwrap_or(0)
    }

    /// The most distinctive terms of `text`, scored tf * idf, best first.
    /// Ties are broken by the term itself.
    pub fn select_query_terms(&self, text: &str, max_terms: usize) -> Result<Vec<(String, f64)>, IndexError> {
        if self.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        let mut tf: HashMap<String, u32> = HashMap::new();
        for term in terms(text) {
            if !is_stopword(&term) {
                *tf.entry(term).or_default() += 1;
            }
        }
        let n = self.stats.doc_count;
        let mut scored: Vec<(String, f64)> = tf
            .into_iter()
            .filter(|(term, count)| {
                *count >= self.params.min_term_freq && self.doc_freq(term) >= self.params.min_doc_freq
            })
            .map(|(term, count)| {
                let score = f64::from(count) * idf(n, self.doc_freq(&term));
                (term, score)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(max_terms);
        Ok(scored)
    }

    /// BM25 contribution of one term to one document.
    pub fn bm25(&self, term: &str, doc_id: &str) -> f64 {
        let Some(&tf) = self.stats.postings.get(term).and_then(|p| p.get(doc_id)) else {
            return 0.0;
        };
        let tf = f64::from(tf);
        let dl = self.doc_lens.get(doc_id).copied().unwrap_or(0) as f64;
        let MltParams { k1, b, .. } = self.params;
        let norm = 1.0 - b + b * dl / self.stats.avg_doc_len;
        idf(self.stats.doc_count, self.doc_freq(term)) * tf * (k1 + 1.0) / (tf + k1 * norm)
    }

    /// Templates most similar to `text`, best first. Zero scores are
    /// dropped; ties go to the smaller id.
    pub fn more_like_this(&self, text: &str, top_n: usize) -> Result<Vec<(&TemplateRecord, f64)>, IndexError> {
        let selected = self.select_query_terms(text, self.params.max_terms)?;
        let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
        // score in a fixed term order so sums are reproducible
        let mut query_terms: Vec<&str> = selected.iter().map(|(t, _)| t.as_str()).collect();
        query_terms.sort_unstable();
        for term in query_terms {
            if let Some(docs) = self.stats.postings.get(term) {
                for doc_id in docs.keys() {
                    *scores.entry(doc_id.as_str()).or_default() += self.bm25(term, doc_id);
                }
            }
        }
        let mut ranked: Vec<(&TemplateRecord, f64)> = scores
            .into_iter()
            .filter(|(_, score)| *score > 0.0)
            .map(|(id, score)| (&self.records[id], score))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.id.cmp(&b.0.id)));
        ranked.truncate(top_n);
        Ok(ranked)
    }
}

const SAMPLE_FILE: &str = "sample.txt";
const CICERO_FILE: &str = "template.cicero";
const MODEL_FILE: &str = "model.cto";
const METADATA_FILE: &str = "metadata.json";

fn io_err(path: &Path, e: impl std::fmt::Display) -> IndexError {
    IndexError::Io(format!("{}: {e}", path.display()))
}

/// Reads one template directory. The directory name is the template id and
/// `metadata.json` may carry a `name`.
pub fn read_template_dir(dir: &Path) -> Result<TemplateRecord, IndexError> {
    let id = dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| io_err(dir, "template directory has no usable name"))?
        .to_string();
    let read = |file: &str| {
        let path = dir.join(file);
        fs::read_to_string(&path).map_err(|e| io_err(&path, e))
    };
    let metadata: BTreeMap<String, String> = match dir.join(METADATA_FILE) {
        path if path.exists() => {
            serde_json::from_str(&read(METADATA_FILE)?).map_err(|e| io_err(&path, e))?
        }
        _ => BTreeMap::new(),
    };
    Ok(TemplateRecord {
        name: metadata.get("name").cloned().unwrap_or_else(|| id.clone()),
        id,
        sample_text: read(SAMPLE_FILE)?,
        cicero_text: read(CICERO_FILE)?,
        concerto_text: read(MODEL_FILE)?,
        metadata,
    })
}

/// Writes a record as `<library>/<id>/`.
pub fn write_template_dir(library: &Path, record: &TemplateRecord) -> Result<(), IndexError> {
    let dir = library.join(&record.id);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut metadata = record.metadata.clone();
    metadata.insert("name".into(), record.name.clone());
    let metadata = serde_json::to_string_pretty(&metadata).expect("string map serializes");
    for (file, contents) in [
        (SAMPLE_FILE, record.sample_text.as_str()),
        (CICERO_FILE, record.cicero_text.as_str()),
        (MODEL_FILE, record.concerto_text.as_str()),
        (METADATA_FILE, metadata.as_str()),
    ] {
        let path = dir.join(file);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Builds an index from a library directory with one subdirectory per
/// template. A missing directory yields an empty index.
pub fn load_library(library: &Path, params: MltParams) -> Result<TemplateIndex, IndexError> {
    let mut index = TemplateIndex::new(params);
    if !library.exists() {
        return Ok(index);
    }
    let mut dirs: Vec<_> = fs::read_dir(library)
        .map_err(|e| io_err(library, e))?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        index.index_template(read_template_dir(&dir)?)?;
    }
    Ok(index)
}
