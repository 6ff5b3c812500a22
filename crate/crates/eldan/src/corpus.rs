//! Corpus model and I/O: encounters, their documents, code labels, and the
//! operations that slice a corpus into training material.
//!
//! A corpus lives in two files: a JSONL body (one encounter per line) and a
//! JSON manifest carrying `feature_dim` and the code vocabulary. Parsing is
//! strict — every structural rule is checked up front with the offending line
//! number, because a silent off-by-one in a sparse feature index would
//! otherwise surface as a subtly wrong model much later.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing;

/// Index into the sparse feature space; valid when `< feature_dim`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureId(pub u32);

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// A label code symbol (e.g. a procedure code). Non-empty by construction
/// when it comes out of the parser.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CodeId(String);

impl CodeId {
    pub fn new(s: impl Into<String>) -> Self {
        CodeId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Sparse bag-of-features document: entries sorted by feature id, ids
/// distinct, values finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseDocVector {
    pub doc_id: String,
    pub entries: Vec<(FeatureId, f64)>,
}

/// One encounter: a non-empty bag of documents sharing a set of codes.
/// `doc_codes`, when present, records which documents carry which of the
/// encounter's codes — the ground truth the attention evaluation scores
/// against.
#[derive(Clone, Debug, PartialEq)]
pub struct Encounter {
    pub encounter_id: String,
    pub documents: Vec<SparseDocVector>,
    pub codes: BTreeSet<CodeId>,
    pub doc_codes: Option<Vec<BTreeSet<CodeId>>>,
}

impl Encounter {
    pub fn has_code(&self, code: &CodeId) -> bool {
        self.codes.contains(code)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub feature_dim: usize,
    pub code_vocab: BTreeSet<CodeId>,
    pub encounters: Vec<Encounter>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.encounters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encounters.is_empty()
    }

    /// Encounters labelled with `code`, in corpus order.
    pub fn encounters_with<'a>(&'a self, code: &'a CodeId) -> impl Iterator<Item = &'a Encounter> {
        self.encounters.iter().filter(move |e| e.has_code(code))
    }

    /// Re-runs the parser's structural checks on an in-memory corpus. The
    /// "line" in any error is the 1-based encounter index.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        for (i, enc) in self.encounters.iter().enumerate() {
            let line = i + 1;
            if !seen.insert(enc.encounter_id.clone()) {
                return Err(CorpusError::DuplicateEncounterId { line, id: enc.encounter_id.clone() });
            }
            validate_encounter(enc, self.feature_dim, &self.code_vocab, line)?;
        }
        Ok(())
    }
}

/// Sidecar metadata for a corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub feature_dim: usize,
    pub code_vocab: Vec<CodeId>,
}

impl Manifest {
    pub fn for_corpus(corpus: &Corpus) -> Self {
        Manifest {
            feature_dim: corpus.feature_dim,
            code_vocab: corpus.code_vocab.iter().cloned().collect(),
        }
    }

    pub fn to_json(&self) -> String {
        // Vocabulary is kept sorted so the file is byte-stable.
        let mut sorted = self.clone();
        sorted.code_vocab.sort();
        serde_json::to_string_pretty(&sorted).expect("manifest serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, CorpusError> {
        let m: Manifest =
            serde_json::from_str(s).map_err(|e| CorpusError::Json { line: 1, message: e.to_string() })?;
        if m.feature_dim == 0 {
            return Err(CorpusError::ZeroFeatureDim);
        }
        for code in &m.code_vocab {
            if code.as_str().is_empty() {
                return Err(CorpusError::EmptyCodeSymbol { line: 1 });
            }
        }
        Ok(m)
    }
}

/// Binary label for one-vs-all training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    /// Output class index: positives are class 1, negatives class 0.
    pub fn class_index(self) -> usize {
        match self {
            Label::Positive => 1,
            Label::Negative => 0,
        }
    }

    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        matches!(self, Label::Positive)
    }
}

/// A corpus flattened against one target code.
#[derive(Clone, Debug)]
pub struct BinaryLabeledSet {
    pub target: CodeId,
    pub feature_dim: usize,
    pub items: Vec<(Encounter, Label)>,
}

impl BinaryLabeledSet {
    pub fn n_positive(&self) -> usize {
        self.items.iter().filter(|(_, l)| l.is_positive()).count()
    }

    pub fn n_negative(&self) -> usize {
        self.items.len() - self.n_positive()
    }
}

/// Per-code corpus statistics, ranked most-frequent first.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeStat {
    pub code: CodeId,
    pub n_encounters: usize,
    pub prevalence: f64,
    /// Mean document count over the encounters carrying the code.
    pub mean_docs: f64,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error reading corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: invalid JSON: {message}")]
    Json { line: usize, message: String },
    #[error("manifest feature_dim must be positive")]
    ZeroFeatureDim,
    #[error("line {line}: encounter id is empty")]
    EmptyEncounterId { line: usize },
    #[error("line {line}: duplicate encounter id {id:?}")]
    DuplicateEncounterId { line: usize, id: String },
    #[error("line {line}: encounter {id:?} has no documents")]
    NoDocuments { line: usize, id: String },
    #[error("line {line}: encounter {encounter:?} contains a document with an empty doc id")]
    EmptyDocId { line: usize, encounter: String },
    #[error("line {line}: duplicate doc id {doc_id:?} in encounter {encounter:?}")]
    DuplicateDocId { line: usize, doc_id: String, encounter: String },
    #[error("line {line}: doc {doc_id:?}: feature {feature} is out of range for feature_dim {feature_dim}")]
    FeatureOutOfRange { line: usize, doc_id: String, feature: u32, feature_dim: usize },
    #[error("line {line}: doc {doc_id:?}: feature ids must be strictly ascending (saw {prev} then {next})")]
    UnsortedFeatures { line: usize, doc_id: String, prev: u32, next: u32 },
    #[error("line {line}: doc {doc_id:?}: feature {feature} has a non-finite value")]
    NonFiniteValue { line: usize, doc_id: String, feature: u32 },
    #[error("line {line}: empty code symbol")]
    EmptyCodeSymbol { line: usize },
    #[error("line {line}: code {code:?} is not in the manifest vocabulary")]
    UnknownCode { line: usize, code: String },
    #[error("line {line}: doc_codes has {got} entries but the encounter has {expected} documents")]
    DocCodesLength { line: usize, expected: usize, got: usize },
    #[error("line {line}: doc_codes lists {code:?}, which is not among the encounter's codes")]
    DocCodeNotInEncounter { line: usize, code: String },
    #[error("corpus has no encounters")]
    Empty,
    #[error("split ratios must be non-negative and sum to 1 (got {train}, {dev}, {test})")]
    BadRatios { train: f64, dev: f64, test: f64 },
    #[error("code {code:?} is not in the corpus vocabulary")]
    UnknownTargetCode { code: String },
}

/// Wire form of one JSONL line.
#[derive(Serialize, Deserialize)]
struct EncounterRecord {
    encounter_id: String,
    documents: Vec<DocRecord>,
    codes: Vec<CodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    doc_codes: Option<Vec<Vec<CodeId>>>,
}

#[derive(Serialize, Deserialize)]
struct DocRecord {
    doc_id: String,
    features: Vec<(FeatureId, f64)>,
}

fn validate_encounter(
    enc: &Encounter,
    feature_dim: usize,
    vocab: &BTreeSet<CodeId>,
    line: usize,
) -> Result<(), CorpusError> {
    if enc.encounter_id.is_empty() {
        return Err(CorpusError::EmptyEncounterId { line });
    }
    if enc.documents.is_empty() {
        return Err(CorpusError::NoDocuments { line, id: enc.encounter_id.clone() });
    }
    let mut doc_ids = HashSet::new();
    for doc in &enc.documents {
        if doc.doc_id.is_empty() {
            return Err(CorpusError::EmptyDocId { line, encounter: enc.encounter_id.clone() });
        }
        if !doc_ids.insert(doc.doc_id.as_str()) {
            return Err(CorpusError::DuplicateDocId {
                line,
                doc_id: doc.doc_id.clone(),
                encounter: enc.encounter_id.clone(),
            });
        }
        let mut prev: Option<u32> = None;
        for &(FeatureId(f), v) in &doc.entries {
            if let Some(p) = prev {
                if f <= p {
                    return Err(CorpusError::UnsortedFeatures {
                        line,
                        doc_id: doc.doc_id.clone(),
                        prev: p,
                        next: f,
                    });
                }
            }
            prev = Some(f);
            if f as usize >= feature_dim {
                return Err(CorpusError::FeatureOutOfRange {
                    line,
                    doc_id: doc.doc_id.clone(),
                    feature: f,
                    feature_dim,
                });
            }
            if !v.is_finite() {
                return Err(CorpusError::NonFiniteValue { line, doc_id: doc.doc_id.clone(), feature: f });
            }
        }
    }
    for code in &enc.codes {
        if code.as_str().is_empty() {
            return Err(CorpusError::EmptyCodeSymbol { line });
        }
        if !vocab.contains(code) {
            return Err(CorpusError::UnknownCode { line, code: code.as_str().to_string() });
        }
    }
    if let Some(dc) = &enc.doc_codes {
        if dc.len() != enc.documents.len() {
            return Err(CorpusError::DocCodesLength {
                line,
                expected: enc.documents.len(),
                got: dc.len(),
            });
        }
        for set in dc {
            for code in set {
                if !enc.codes.contains(code) {
                    return Err(CorpusError::DocCodeNotInEncounter {
                        line,
                        code: code.as_str().to_string(),
                    });
                }
            }
        }
    }
    Ok(())
}

/// Parses a JSONL corpus body against its manifest. Blank lines are skipped;
/// every reported error carries the 1-based line number.
pub fn parse_corpus<R: BufRead>(reader: R, manifest: &Manifest) -> Result<Corpus, CorpusError> {
    let vocab: BTreeSet<CodeId> = manifest.code_vocab.iter().cloned().collect();
    if manifest.feature_dim == 0 {
        return Err(CorpusError::ZeroFeatureDim);
    }
    let mut encounters = Vec::new();
    let mut seen_ids = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EncounterRecord = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Json { line: line_no, message: e.to_string() })?;
        let enc = Encounter {
            encounter_id: rec.encounter_id,
            documents: rec
                .documents
                .into_iter()
                .map(|d| SparseDocVector { doc_id: d.doc_id, entries: d.features })
                .collect(),
            codes: rec.codes.into_iter().collect(),
            doc_codes: rec.doc_codes.map(|dc| dc.into_iter().map(|set| set.into_iter().collect()).collect()),
        };
        if !seen_ids.insert(enc.encounter_id.clone()) {
            return Err(CorpusError::DuplicateEncounterId { line: line_no, id: enc.encounter_id });
        }
        validate_encounter(&enc, manifest.feature_dim, &vocab, line_no)?;
        encounters.push(enc);
    }
    if encounters.is_empty() {
        return Err(CorpusError::Empty);
    }
    Ok(Corpus { feature_dim: manifest.feature_dim, code_vocab: vocab, encounters })
}

/// Writes the corpus body as JSONL. Code sets serialize in sorted order, so
/// writing is deterministic and `parse_corpus` round-trips it byte-for-byte.
pub fn serialize_corpus<W: Write>(corpus: &Corpus, mut writer: W) -> std::io::Result<()> {
    for enc in &corpus.encounters {
        let rec = EncounterRecord {
            encounter_id: enc.encounter_id.clone(),
            documents: enc
                .documents
                .iter()
                .map(|d| DocRecord { doc_id: d.doc_id.clone(), features: d.entries.clone() })
                .collect(),
            codes: enc.codes.iter().cloned().collect(),
            doc_codes: enc
                .doc_codes
                .as_ref()
                .map(|dc| dc.iter().map(|set| set.iter().cloned().collect()).collect()),
        };
        serde_json::to_writer(&mut writer, &rec).map_err(std::io::Error::other)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

/// Splits by hashing `(seed, encounter_id)` to a point in [0, 1) and cutting
/// at the cumulative ratio boundaries. An encounter's destination therefore
/// depends only on its id and the seed — growing the corpus never moves
/// existing encounters between splits.
pub fn split_corpus(
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Corpus, Corpus, Corpus), CorpusError> {
    let (rt, rd, rs) = ratios;
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    if !(rt >= 0.0 && rd >= 0.0 && rs >= 0.0) || (rt + rd + rs - 1.0).abs() > 1e-9 {
        return Err(CorpusError::BadRatios { train: rt, dev: rd, test: rs });
    }
    let mut parts = (Vec::new(), Vec::new(), Vec::new());
    for enc in &corpus.encounters {
        let x = hashing::unit_interval(hashing::hash_seeded_str(seed, &enc.encounter_id));
        if x < rt {
            parts.0.push(enc.clone());
        } else if x < rt + rd {
            parts.1.push(enc.clone());
        } else {
            parts.2.push(enc.clone());
        }
    }
    let wrap = |encounters: Vec<Encounter>| Corpus {
        feature_dim: corpus.feature_dim,
        code_vocab: corpus.code_vocab.clone(),
        encounters,
    };
    Ok((wrap(parts.0), wrap(parts.1), wrap(parts.2)))
}

/// Flattens the corpus against one code: every encounter becomes a labelled
/// item, positive iff it carries the code.
pub fn binarize(corpus: &Corpus, code: &CodeId) -> Result<BinaryLabeledSet, CorpusError> {
    if !corpus.code_vocab.contains(code) {
        return Err(CorpusError::UnknownTargetCode { code: code.as_str().to_string() });
    }
    let items = corpus
        .encounters
        .iter()
        .map(|e| (e.clone(), Label::from_bool(e.has_code(code))))
        .collect();
    Ok(BinaryLabeledSet { target: code.clone(), feature_dim: corpus.feature_dim, items })
}

/// Counts carriers for every vocabulary code and ranks the result most
/// frequent first (ties broken by code symbol, ascending) — the order the
/// training sweep walks.
pub fn code_stats(corpus: &Corpus) -> Vec<CodeStat> {
    let total = corpus.len() as f64;
    let mut stats: Vec<CodeStat> = corpus
        .code_vocab
        .iter()
        .map(|code| {
            let mut n = 0usize;
            let mut docs = 0usize;
            for enc in corpus.encounters.iter().filter(|e| e.has_code(code)) {
                n += 1;
                docs += enc.documents.len();
            }
            CodeStat {
                code: code.clone(),
                n_encounters: n,
                prevalence: if total > 0.0 { n as f64 / total } else { 0.0 },
                mean_docs: if n > 0 { docs as f64 / n as f64 } else { 0.0 },
            }
        })
        .collect();
    stats.sort_by(|a, b| b.n_encounters.cmp(&a.n_encounters).then_with(|| a.code.cmp(&b.code)));
    stats
}
