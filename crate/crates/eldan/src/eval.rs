//! Evaluation: encounter-level F1, attention-driven source-document
//! selection, document-level F1 against per-document annotations, the
//! uniform-random chance baseline, one-sample significance tests, and the
//! TSV report tables.
//!
//! Document-level scores are always computed on the *restricted* view of a
//! corpus: only encounters that carry the target code are inspected, and
//! true/false positives are pooled across those encounters before any ratio
//! is taken (micro-aggregation). A code that appears in no encounter yields
//! a report with `n_enc == 0`; such reports are "undefined" and render as
//! `-` in tables rather than pretending to be a zero score.

use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::corpus::{BinaryLabeledSet, CodeId, Corpus, Encounter};
use crate::model::{predict, ModelError, ModelParams};

/// Precision/recall/F1 with the raw counts they came from.
///
/// `n_enc`, `n_doc` and `n_source` describe the evaluated population:
/// encounters inspected, documents inside them, and ground-truth positives.
/// For encounter-level reports the "documents" are still counted so the two
/// report flavours stay comparable side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct PRFReport {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_enc: usize,
    pub n_doc: usize,
    pub n_source: usize,
}

impl PRFReport {
    /// Derives the ratios from raw counts. Zero denominators give zero
    /// precision/recall, and F1 is zero whenever precision + recall is.
    pub fn from_counts(
        true_pos: usize,
        false_pos: usize,
        false_neg: usize,
        n_enc: usize,
        n_doc: usize,
        n_source: usize,
    ) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(true_pos, true_pos + false_pos);
        let recall = ratio(true_pos, true_pos + false_neg);
        // Harmonic mean of precision and recall, evaluated in counts form
        // (2tp / (2tp + fp + fn)) so the result is the correctly rounded
        // rational rather than a ratio of two already-rounded ratios.
        let f1 = ratio(2 * true_pos, 2 * true_pos + false_pos + false_neg);
        PRFReport {
            true_pos,
            false_pos,
            false_neg,
            precision,
            recall,
            f1,
            n_enc,
            n_doc,
            n_source,
        }
    }

    /// An undefined report: the restriction matched no encounters, so no
    /// score exists. Rendered as `-` by the table writers.
    pub fn undefined() -> Self {
        PRFReport::from_counts(0, 0, 0, 0, 0, 0)
    }

    /// False when the restriction matched no encounters at all.
    pub fn is_defined(&self) -> bool {
        self.n_enc > 0
    }
}

/// Distribution of document-level F1 under uniform-random attention.
#[derive(Clone, Debug, PartialEq)]
pub struct ChanceReport {
    pub runs: usize,
    pub mean_f1: f64,
    /// Sample standard deviation (n − 1 denominator).
    pub std_f1: f64,
    /// One F1 per run, in run order.
    pub f1_runs: Vec<f64>,
    /// Number of restricted encounters the runs were scored on.
    pub n_enc: usize,
}

impl ChanceReport {
    pub fn is_defined(&self) -> bool {
        self.n_enc > 0
    }
}

/// One-sample t-test of a model score against a chance distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Significance {
    pub t: f64,
    pub p: f64,
    /// True iff p < 0.05 *and* the model actually beats the chance mean.
    pub significant: bool,
}

/// One line of an attention dump: the weights a model assigned to each
/// document of an encounter, plus the indices it selected as sources.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionRecord {
    pub encounter_id: String,
    pub code: String,
    pub attention: Vec<f64>,
    pub selected: Vec<usize>,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    EmptySet,
    #[error("model was trained for code {model}, but evaluation requested code {requested}")]
    WrongTarget { model: String, requested: String },
    #[error("encounter {encounter_id} lacks per-document code annotations")]
    MissingDocAnnotations { encounter_id: String },
    #[error("chance baseline needs at least 2 runs, got {runs}")]
    TooFewRuns { runs: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Encounter-level precision/recall/F1 of a binary classifier over a
/// labeled set. The positive class is the scored one.
pub fn encounter_f1(params: &ModelParams, set: &BinaryLabeledSet) -> Result<PRFReport, EvalError> {
    if set.items.is_empty() {
        return Err(EvalError::EmptySet);
    }
    params.check_feature_dim(set.feature_dim)?;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    let mut n_doc = 0usize;
    for (enc, label) in &set.items {
        n_doc += enc.documents.len();
        let predicted = predict(enc, params)?.predicted().is_positive();
        match (predicted, label.is_positive()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => {}
        }
    }
    Ok(PRFReport::from_counts(
        tp,
        fp,
        fneg,
        set.items.len(),
        n_doc,
        set.n_positive(),
    ))
}

/// Indices of the documents whose attention weight strictly exceeds half
/// the maximum weight. The argmax document always qualifies, so the result
/// is never empty; the rule only compares weights to each other, so any
/// positive rescaling of `a` selects the same set.
pub fn select_source_docs(a: &[f64]) -> Vec<usize> {
    assert!(!a.is_empty(), "cannot select source documents from an empty attention vector");
    let max = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let threshold = 0.5 * max;
    (0..a.len()).filter(|&j| a[j] > threshold).collect()
}

/// Ground-truth source-document indices for `code` within one encounter.
fn truth_indices(enc: &Encounter, code: &CodeId) -> Result<Vec<usize>, EvalError> {
    let doc_codes = enc
        .doc_codes
        .as_ref()
        .ok_or_else(|| EvalError::MissingDocAnnotations {
            encounter_id: enc.encounter_id.clone(),
        })?;
    Ok((0..doc_codes.len())
        .filter(|&j| doc_codes[j].contains(code))
        .collect())
}

/// Shared document-level scorer: restricts `annotated` to encounters that
/// carry `code`, asks `score` for one weight per document, applies the
/// selection rule, and micro-aggregates counts across encounters. Both the
/// model evaluation and the chance baseline go through here so they are
/// scored identically.
fn document_f1_with_scores<F>(
    annotated: &Corpus,
    code: &CodeId,
    mut score: F,
) -> Result<PRFReport, EvalError>
where
    F: FnMut(&Encounter) -> Result<Vec<f64>, EvalError>,
{
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    let (mut n_enc, mut n_doc, mut n_source) = (0usize, 0usize, 0usize);
    for enc in annotated.encounters_with(code) {
        let truth = truth_indices(enc, code)?;
        let scores = score(enc)?;
        debug_assert_eq!(scores.len(), enc.documents.len());
        let selected = select_source_docs(&scores);
        for &j in &selected {
            if truth.contains(&j) {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        fneg += truth.iter().filter(|j| !selected.contains(j)).count();
        n_enc += 1;
        n_doc += enc.documents.len();
        n_source += truth.len();
    }
    if n_enc == 0 {
        return Ok(PRFReport::undefined());
    }
    Ok(PRFReport::from_counts(tp, fp, fneg, n_enc, n_doc, n_source))
}

/// Document-level F1 of a trained model's attention against per-document
/// annotations, restricted to encounters that carry `code`. The model is
/// applied as-is — no retraining or tuning on the annotated data.
pub fn document_f1(
    params: &ModelParams,
    annotated: &Corpus,
    code: &CodeId,
) -> Result<PRFReport, EvalError> {
    params.check_feature_dim(annotated.feature_dim)?;
    if let Some(target) = &params.target {
        if target != code {
            return Err(EvalError::WrongTarget {
                model: target.as_str().to_owned(),
                requested: code.as_str().to_owned(),
            });
        }
    }
    document_f1_with_scores(annotated, code, |enc| {
        Ok(predict(enc, params)?.attention)
    })
}

/// Attention dump for every encounter that carries `code`: one record per
/// restricted encounter with the model's weights and selected indices, in
/// corpus order. This is the raw material behind [`document_f1`]; an
/// external script can re-derive the report from it.
pub fn attention_records(
    params: &ModelParams,
    annotated: &Corpus,
    code: &CodeId,
) -> Result<Vec<AttentionRecord>, EvalError> {
    params.check_feature_dim(annotated.feature_dim)?;
    let mut records = Vec::new();
    for enc in annotated.encounters_with(code) {
        let attention = predict(enc, params)?.attention;
        let selected = select_source_docs(&attention);
        records.push(AttentionRecord {
            encounter_id: enc.encounter_id.clone(),
            code: code.as_str().to_owned(),
            attention,
            selected,
        });
    }
    Ok(records)
}

/// Writes attention records as JSON Lines: one object per record.
pub fn write_attention_jsonl<W: Write>(
    records: &[AttentionRecord],
    mut out: W,
) -> std::io::Result<()> {
    for rec in records {
        let line = serde_json::to_string(rec).expect("attention records always serialize");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Document-level F1 when attention is replaced by iid Uniform(0,1) scores,
/// repeated `runs` times. Run `r` draws from an RNG stream derived from
/// `(seed, r)`, so the report is deterministic and independent of how runs
/// are scheduled. The scores are left unnormalized: the selection rule is
/// invariant under positive rescaling, so normalizing could not change it.
pub fn chance_document_f1(
    annotated: &Corpus,
    code: &CodeId,
    runs: usize,
    seed: u64,
) -> Result<ChanceReport, EvalError> {
    chance_document_f1_parallel(annotated, code, runs, seed, 1)
}

/// Same as [`chance_document_f1`] but distributing runs over `threads`
/// worker threads. Because each run's RNG stream depends only on the run
/// index, the result is bitwise identical for every thread count.
pub fn chance_document_f1_parallel(
    annotated: &Corpus,
    code: &CodeId,
    runs: usize,
    seed: u64,
    threads: usize,
) -> Result<ChanceReport, EvalError> {
    if runs < 2 {
        return Err(EvalError::TooFewRuns { runs });
    }
    let n_enc = annotated.encounters_with(code).count();
    if n_enc == 0 {
        return Ok(ChanceReport {
            runs,
            mean_f1: 0.0,
            std_f1: 0.0,
            f1_runs: Vec::new(),
            n_enc: 0,
        });
    }

    let one_run = |run: usize| -> Result<f64, EvalError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(run as u64);
        let report = document_f1_with_scores(annotated, code, |enc| {
            Ok((0..enc.documents.len()).map(|_| rng.gen::<f64>()).collect())
        })?;
        Ok(report.f1)
    };

    let f1_runs = if threads <= 1 {
        let mut out = Vec::with_capacity(runs);
        for run in 0..runs {
            out.push(one_run(run)?);
        }
        out
    } else {
        let chunk = runs.div_ceil(threads);
        let one_run = &one_run;
        let mut results: Vec<Result<Vec<f64>, EvalError>> = Vec::new();
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for start in (0..runs).step_by(chunk) {
                let end = (start + chunk).min(runs);
                handles.push(scope.spawn(move || (start..end).map(one_run).collect()));
            }
            for handle in handles {
                results.push(handle.join().expect("chance-run worker panicked"));
            }
        });
        let mut out = Vec::with_capacity(runs);
        for r in results {
            out.extend(r?);
        }
        out
    };

    let n = f1_runs.len() as f64;
    let mean = f1_runs.iter().sum::<f64>() / n;
    let var = f1_runs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    Ok(ChanceReport {
        runs,
        mean_f1: mean,
        std_f1: var.sqrt(),
        f1_runs,
        n_enc,
    })
}

/// One-sample t-test of `model_f1` against the chance distribution,
/// one-sided with H1 "the model exceeds chance".
pub fn significance(chance: &ChanceReport, model_f1: f64) -> Significance {
    significance_tailed(chance, model_f1, false)
}

/// Like [`significance`] but optionally two-sided. The statistic is
/// t = (mean − model) / (std / √runs) with runs − 1 degrees of freedom; the
/// one-sided p-value is the left tail, so beating chance drives p toward 0.
/// Degenerate chance distributions (std = 0) give p = 1 when the model sits
/// exactly on the mean and p = 0 otherwise.
pub fn significance_tailed(chance: &ChanceReport, model_f1: f64, two_sided: bool) -> Significance {
    let n = chance.runs as f64;
    let mean = chance.mean_f1;
    let std = chance.std_f1;
    let (t, p) = if std == 0.0 {
        if model_f1 == mean {
            (0.0, 1.0)
        } else if mean > model_f1 {
            (f64::INFINITY, 0.0)
        } else {
            (f64::NEG_INFINITY, 0.0)
        }
    } else {
        let t = (mean - model_f1) / (std / n.sqrt());
        let dist = StudentsT::new(0.0, 1.0, n - 1.0)
            .expect("runs >= 2 gives at least one degree of freedom");
        let left = dist.cdf(t);
        let p = if two_sided {
            (2.0 * left.min(1.0 - left)).min(1.0)
        } else {
            left
        };
        (t, p)
    };
    Significance {
        t,
        p,
        significant: p < 0.05 && model_f1 > mean,
    }
}

/// Everything the per-code summary table needs for one code, in ranking
/// order. Missing scores (a variant that failed to train, or an undefined
/// report) are `None` and render as `-`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeSummaryRow {
    pub code: CodeId,
    /// Average number of documents in the encounters carrying the code.
    pub mean_docs: f64,
    /// Fraction of all encounters carrying the code, in [0, 1].
    pub prevalence: f64,
    pub f1_eldn: Option<f64>,
    pub f1_eldan: Option<f64>,
    pub f1_transfer: Option<f64>,
}

/// The two summary tables as TSV text.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTables {
    /// Per-code scores plus an `Average` footer row.
    pub per_code: String,
    /// Macro averages over consecutive groups of codes.
    pub grouped: String,
}

fn fmt_pct(fraction: f64) -> String {
    format!("{:.2}%", fraction * 100.0)
}

/// Scores are reported on a 0–100 scale with two decimals.
fn fmt_score(score: Option<f64>) -> String {
    match score {
        Some(s) => format!("{:.2}", s * 100.0),
        None => "-".to_owned(),
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let collected: Vec<f64> = values.collect();
    if collected.is_empty() {
        None
    } else {
        Some(collected.iter().sum::<f64>() / collected.len() as f64)
    }
}

/// 1 → "1st", 2 → "2nd", 11 → "11th", 21 → "21st", …
fn ordinal(n: usize) -> String {
    let suffix = match (n % 10, n % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{n}{suffix}")
}

/// Renders the two summary tables. `rows` must already be ranked by
/// prevalence, most frequent first; the grouped table macro-averages each
/// consecutive block of `group_size` codes and appends the transfer-minus-
/// plain delta per block. Scores missing from a block are skipped by the
/// macro average; a block with no scores at all renders `-`.
pub fn report_tables(rows: &[CodeSummaryRow], group_size: usize) -> ReportTables {
    assert!(group_size > 0, "group size must be at least 1");

    let mut per_code = String::from("CPT Codes\t#Docs\tPrevalence\tELDN\tELDAN\tELDAN+transfer\n");
    for row in rows {
        let _ = writeln!(
            per_code,
            "{}\t{:.2}\t{}\t{}\t{}\t{}",
            row.code,
            row.mean_docs,
            fmt_pct(row.prevalence),
            fmt_score(row.f1_eldn),
            fmt_score(row.f1_eldan),
            fmt_score(row.f1_transfer),
        );
    }
    if !rows.is_empty() {
        let docs = mean_of(rows.iter().map(|r| r.mean_docs)).unwrap_or(0.0);
        let _ = writeln!(
            per_code,
            "Average\t{:.2}\t\t{}\t{}\t{}",
            docs,
            fmt_score(mean_of(rows.iter().filter_map(|r| r.f1_eldn))),
            fmt_score(mean_of(rows.iter().filter_map(|r| r.f1_eldan))),
            fmt_score(mean_of(rows.iter().filter_map(|r| r.f1_transfer))),
        );
    }

    let mut grouped = String::from("Average\tPrevalence\tELDN\tELDAN\tELDAN+transfer\tΔELDAN\n");
    for (g, block) in rows.chunks(group_size).enumerate() {
        let start = g * group_size + 1;
        let end = g * group_size + block.len();
        let prevalence = block.iter().map(|r| r.prevalence).sum::<f64>() / block.len() as f64;
        let eldan = mean_of(block.iter().filter_map(|r| r.f1_eldan));
        let transfer = mean_of(block.iter().filter_map(|r| r.f1_transfer));
        let delta = match (transfer, eldan) {
            (Some(t), Some(p)) => Some(t - p),
            _ => None,
        };
        let _ = writeln!(
            grouped,
            "{} to {}\t{}\t{}\t{}\t{}\t{}",
            ordinal(start),
            ordinal(end),
            fmt_pct(prevalence),
            fmt_score(mean_of(block.iter().filter_map(|r| r.f1_eldn))),
            fmt_score(eldan),
            fmt_score(transfer),
            // The delta is already on the 0–100 scale difference, so reuse
            // the score formatter on the raw fraction difference.
            fmt_score(delta),
        );
    }

    ReportTables { per_code, grouped }
}

/// One row of the source-document table: attention-based document F1 next
/// to its chance baseline for the same code.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceDocRow {
    pub code: CodeId,
    pub attention: PRFReport,
    pub chance: ChanceReport,
}

/// Renders the source-document comparison table (counts, attention F1,
/// chance mean F1, and their difference), all scores on the 0–100 scale.
pub fn source_doc_table(rows: &[SourceDocRow]) -> String {
    let mut out = String::from("CPT Codes\t#enc\t#doc\t#source\tAttention\tChance\tDiff\n");
    for row in rows {
        let attention = row.attention.is_defined().then_some(row.attention.f1);
        let chance = row.chance.is_defined().then_some(row.chance.mean_f1);
        let diff = match (attention, chance) {
            (Some(a), Some(c)) => Some(a - c),
            _ => None,
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            row.code,
            row.attention.n_enc,
            row.attention.n_doc,
            row.attention.n_source,
            fmt_score(attention),
            fmt_score(chance),
            fmt_score(diff),
        );
    }
    out
}
