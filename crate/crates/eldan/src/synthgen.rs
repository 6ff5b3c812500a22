//! Synthetic corpus generation with planted ground truth.
//!
//! Real encounter data with document-level code annotations is scarce, so the
//! evaluation protocol runs on corpora built here: every document gets a
//! Zipf-distributed bag of background features, and each code plants a few
//! "source documents" per positive encounter by injecting features from a
//! code-specific signal set. Those plants are recorded in `doc_codes`, which
//! is what lets the attention evaluation ask "did the model look at the
//! documents that actually carry the code?" A configurable leak probability
//! scatters individual signal features into non-source documents as noise.
//!
//! Generation is a pure function of (config, seed): iteration orders are
//! fixed, every random draw comes from one seeded stream, and the output
//! serializes byte-identically across runs and platforms.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CodeId, Corpus, Encounter, FeatureId, SparseDocVector};

/// One code to plant: its prevalence, its signal feature set, and how many
/// documents of a positive encounter carry the signal.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodeSpec {
    pub code: CodeId,
    pub prevalence: f64,
    pub signal_features: Vec<u32>,
    pub n_source_docs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_encounters: usize,
    pub feature_dim: usize,
    /// Distribution of documents per encounter as (doc_count, weight) bins.
    #[serde(default = "default_histogram")]
    pub docs_histogram: Vec<(usize, f64)>,
    pub codes: Vec<CodeSpec>,
    /// Zipf exponent for background feature popularity.
    #[serde(default = "default_zipf_s")]
    pub background_zipf_s: f64,
    pub background_features_per_doc: usize,
    /// Probability that any given signal feature leaks into any given
    /// non-source document.
    #[serde(default)]
    pub signal_leak_prob: f64,
    /// Signal features injected into each source document.
    pub signal_strength: usize,
}

fn default_zipf_s() -> f64 {
    1.1
}

/// Documents-per-encounter observations behind `default_histogram`: a heavy
/// right tail where single-document encounters dominate but a sixth of
/// encounters have four or more documents.
pub const DOC_COUNT_OBSERVATIONS: [(usize, u64); 16] = [
    (1, 145518),
    (2, 113706),
    (3, 72580),
    (4, 45864),
    (5, 28364),
    (6, 17935),
    (7, 12242),
    (8, 8274),
    (9, 5648),
    (10, 3989),
    (11, 2863),
    (12, 2190),
    (13, 1663),
    (14, 1217),
    (15, 997),
    (16, 816),
];

/// The bundled 16-bin documents-per-encounter shape, renormalized to sum 1.
pub fn default_histogram() -> Vec<(usize, f64)> {
    let total: u64 = DOC_COUNT_OBSERVATIONS.iter().map(|(_, c)| c).sum();
    DOC_COUNT_OBSERVATIONS
        .iter()
        .map(|&(m, c)| (m, c as f64 / total as f64))
        .collect()
}

#[derive(Debug, Error)]
pub enum GenError {
    #[error("config is not valid JSON: {0}")]
    Json(String),
    #[error("n_encounters must be positive")]
    NoEncounters,
    #[error("feature_dim must be positive")]
    NoFeatures,
    #[error("docs histogram must be non-empty with nonnegative finite weights, not all zero")]
    BadHistogram,
    #[error("docs histogram contains a bin with doc_count 0")]
    ZeroDocCount,
    #[error("duplicate code {code:?} in config")]
    DuplicateCode { code: String },
    #[error("code {code:?}: prevalence {prevalence} is outside (0, 1)")]
    BadPrevalence { code: String, prevalence: f64 },
    #[error("code {code:?}: signal feature set is empty")]
    EmptySignal { code: String },
    #[error("code {code:?}: duplicate signal feature {feature}")]
    DuplicateSignal { code: String, feature: u32 },
    #[error("code {code:?}: signal feature {feature} is out of range for feature_dim {feature_dim}")]
    SignalOutOfRange { code: String, feature: u32, feature_dim: usize },
    #[error("codes {first:?} and {second:?} share signal feature {feature}")]
    OverlappingSignals { first: String, second: String, feature: u32 },
    #[error("code {code:?}: n_source_docs must be positive")]
    NoSourceDocs { code: String },
    #[error("background_zipf_s must be positive and finite")]
    BadZipf,
    #[error("background_features_per_doc must be between 1 and feature_dim")]
    BadBackgroundCount,
    #[error("signal_leak_prob must be in [0, 1)")]
    BadLeak,
    #[error("signal_strength must be positive")]
    NoSignalStrength,
}

impl GenConfig {
    pub fn from_json(s: &str) -> Result<Self, GenError> {
        let cfg: GenConfig = serde_json::from_str(s).map_err(|e| GenError::Json(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.n_encounters == 0 {
            return Err(GenError::NoEncounters);
        }
        if self.feature_dim == 0 {
            return Err(GenError::NoFeatures);
        }
        if self.docs_histogram.is_empty()
            || self.docs_histogram.iter().any(|(_, w)| !w.is_finite() || *w < 0.0)
            || self.docs_histogram.iter().map(|(_, w)| w).sum::<f64>() <= 0.0
        {
            return Err(GenError::BadHistogram);
        }
        if self.docs_histogram.iter().any(|(m, _)| *m == 0) {
            return Err(GenError::ZeroDocCount);
        }
        let mut claimed: std::collections::BTreeMap<u32, &CodeId> = Default::default();
        let mut seen_codes = BTreeSet::new();
        for spec in &self.codes {
            let code = spec.code.as_str().to_string();
            if !seen_codes.insert(&spec.code) {
                return Err(GenError::DuplicateCode { code });
            }
            if !(spec.prevalence > 0.0 && spec.prevalence < 1.0) {
                return Err(GenError::BadPrevalence { code, prevalence: spec.prevalence });
            }
            if spec.signal_features.is_empty() {
                return Err(GenError::EmptySignal { code });
            }
            if spec.n_source_docs == 0 {
                return Err(GenError::NoSourceDocs { code });
            }
            let mut within = BTreeSet::new();
            for &f in &spec.signal_features {
                if f as usize >= self.feature_dim {
                    return Err(GenError::SignalOutOfRange {
                        code,
                        feature: f,
                        feature_dim: self.feature_dim,
                    });
                }
                if !within.insert(f) {
                    return Err(GenError::DuplicateSignal { code, feature: f });
                }
                if let Some(other) = claimed.get(&f) {
                    return Err(GenError::OverlappingSignals {
                        first: other.as_str().to_string(),
                        second: code,
                        feature: f,
                    });
                }
            }
            for &f in &spec.signal_features {
                claimed.insert(f, &spec.code);
            }
        }
        if !(self.background_zipf_s > 0.0 && self.background_zipf_s.is_finite()) {
            return Err(GenError::BadZipf);
        }
        if self.background_features_per_doc == 0 || self.background_features_per_doc > self.feature_dim {
            return Err(GenError::BadBackgroundCount);
        }
        if !(0.0..1.0).contains(&self.signal_leak_prob) {
            return Err(GenError::BadLeak);
        }
        if self.signal_strength == 0 {
            return Err(GenError::NoSignalStrength);
        }
        Ok(())
    }
}

/// Codes whose expected positive count rounds below one — the config is
/// usable (training will just skip the code if it draws zero positives), but
/// the caller should hear about it.
pub fn prevalence_warnings(config: &GenConfig) -> Vec<String> {
    config
        .codes
        .iter()
        .filter(|c| (config.n_encounters as f64) * c.prevalence < 1.0)
        .map(|c| {
            format!(
                "code {}: expected positives {:.2} < 1 at n_encounters = {} — the corpus may contain none",
                c.code,
                config.n_encounters as f64 * c.prevalence,
                config.n_encounters
            )
        })
        .collect()
}

/// Inverse-CDF sampler over a fixed cumulative weight table.
struct CumulativeSampler {
    cum: Vec<f64>,
}

impl CumulativeSampler {
    fn new(weights: impl Iterator<Item = f64>) -> Self {
        let mut cum: Vec<f64> = weights
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        let total = *cum.last().expect("sampler needs at least one weight");
        for c in &mut cum {
            *c /= total;
        }
        CumulativeSampler { cum }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        let x: f64 = rng.gen();
        // partition_point gives the first bin whose cumulative mass exceeds x;
        // the min() guards the last bin against cumulative rounding short of 1.
        self.cum.partition_point(|c| *c <= x).min(self.cum.len() - 1)
    }
}

/// `count` distinct indices from `0..n`, drawn by partial Fisher–Yates.
fn sample_distinct(rng: &mut ChaCha8Rng, n: usize, count: usize) -> Vec<usize> {
    debug_assert!(count <= n);
    let mut idx: Vec<usize> = (0..n).collect();
    for t in 0..count {
        let pick = t + rng.gen_range(0..n - t);
        idx.swap(t, pick);
    }
    idx.truncate(count);
    idx
}

/// Builds a corpus with planted source documents. Deterministic in
/// (config, seed); see the module docs for the plant/leak mechanics.
pub fn generate(config: &GenConfig, seed: u64) -> Result<Corpus, GenError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let doc_counts: Vec<usize> = config.docs_histogram.iter().map(|(m, _)| *m).collect();
    let hist = CumulativeSampler::new(config.docs_histogram.iter().map(|(_, w)| *w));
    // Zipf popularity over feature ids: feature k gets weight (k+1)^-s.
    let zipf = CumulativeSampler::new(
        (0..config.feature_dim).map(|k| ((k + 1) as f64).powf(-config.background_zipf_s)),
    );

    let mut encounters = Vec::with_capacity(config.n_encounters);
    for i in 0..config.n_encounters {
        let encounter_id = format!("enc-{i:06}");
        let m = doc_counts[hist.draw(&mut rng)];

        let mut doc_features: Vec<BTreeSet<u32>> = (0..m)
            .map(|_| {
                let mut feats = BTreeSet::new();
                while feats.len() < config.background_features_per_doc {
                    feats.insert(zipf.draw(&mut rng) as u32);
                }
                feats
            })
            .collect();
        let mut doc_codes: Vec<BTreeSet<CodeId>> = vec![BTreeSet::new(); m];
        let mut codes = BTreeSet::new();

        for spec in &config.codes {
            let positive = rng.gen::<f64>() < spec.prevalence;
            let mut is_source = vec![false; m];
            if positive {
                codes.insert(spec.code.clone());
                for j in sample_distinct(&mut rng, m, spec.n_source_docs.min(m)) {
                    is_source[j] = true;
                    let injected: Vec<u32> = if spec.signal_features.len() <= config.signal_strength {
                        spec.signal_features.clone()
                    } else {
                        sample_distinct(&mut rng, spec.signal_features.len(), config.signal_strength)
                            .into_iter()
                            .map(|s| spec.signal_features[s])
                            .collect()
                    };
                    doc_features[j].extend(injected);
                    doc_codes[j].insert(spec.code.clone());
                }
            }
            if config.signal_leak_prob > 0.0 {
                for (j, feats) in doc_features.iter_mut().enumerate() {
                    if is_source[j] {
                        continue;
                    }
                    for &f in &spec.signal_features {
                        if rng.gen::<f64>() < config.signal_leak_prob {
                            feats.insert(f);
                        }
                    }
                }
            }
        }

        let documents = doc_features
            .into_iter()
            .enumerate()
            .map(|(j, feats)| SparseDocVector {
                doc_id: format!("{encounter_id}-doc-{j:02}"),
                entries: feats.into_iter().map(|f| (FeatureId(f), 1.0)).collect(),
            })
            .collect();
        encounters.push(Encounter {
            encounter_id,
            documents,
            codes,
            doc_codes: Some(doc_codes),
        });
    }

    Ok(Corpus {
        feature_dim: config.feature_dim,
        code_vocab: config.codes.iter().map(|c| c.code.clone()).collect(),
        encounters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::serialize_corpus;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn one_code_config(prevalence: f64) -> GenConfig {
        GenConfig {
            n_encounters: 100,
            feature_dim: 50,
            docs_histogram: vec![(1, 0.4), (2, 0.4), (3, 0.2)],
            codes: vec![CodeSpec {
                code: CodeId::new("C1"),
                prevalence,
                signal_features: vec![45, 46, 47],
                n_source_docs: 1,
            }],
            background_zipf_s: 1.1,
            background_features_per_doc: 5,
            signal_leak_prob: 0.0,
            signal_strength: 3,
        }
    }

    #[test]
    fn positives_land_in_the_binomial_envelope() {
        let corpus = generate(&one_code_config(0.5), 7).unwrap();
        let positives = corpus.encounters.iter().filter(|e| !e.codes.is_empty()).count();
        // ±3σ around 50 for Binomial(100, 0.5); deterministic once frozen.
        let bound = 3.0 * (100.0f64 * 0.25).sqrt();
        assert!(
            (positives as f64 - 50.0).abs() <= bound,
            "positives = {positives}, expected 50 ± {bound:.1}"
        );
    }

    #[test]
    fn no_leak_single_source_plants_exactly_one_annotated_doc() {
        let corpus = generate(&one_code_config(0.5), 11).unwrap();
        let code = CodeId::new("C1");
        let signal: BTreeSet<u32> = [45, 46, 47].into();
        for enc in corpus.encounters.iter().filter(|e| e.has_code(&code)) {
            let dc = enc.doc_codes.as_ref().expect("generator always annotates");
            let sources: Vec<usize> = (0..enc.documents.len()).filter(|&j| dc[j].contains(&code)).collect();
            assert_eq!(sources.len(), 1, "{}: want exactly one source doc", enc.encounter_id);
            let doc = &enc.documents[sources[0]];
            let present: BTreeSet<u32> = doc.entries.iter().map(|(f, _)| f.0).collect();
            assert!(
                signal.is_subset(&present),
                "{}: source doc is missing injected signal features",
                enc.encounter_id
            );
        }
    }

    #[test]
    fn degenerate_histogram_pins_document_count() {
        let mut cfg = one_code_config(0.3);
        cfg.docs_histogram = vec![(1, 1.0)];
        let corpus = generate(&cfg, 3).unwrap();
        assert!(corpus.encounters.iter().all(|e| e.documents.len() == 1));
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let cfg = one_code_config(0.4);
        let mut a = Vec::new();
        serialize_corpus(&generate(&cfg, 42).unwrap(), &mut a).unwrap();
        let mut b = Vec::new();
        serialize_corpus(&generate(&cfg, 42).unwrap(), &mut b).unwrap();
        assert_eq!(a, b, "same seed must produce byte-identical corpora");
        let mut c = Vec::new();
        serialize_corpus(&generate(&cfg, 43).unwrap(), &mut c).unwrap();
        assert_ne!(a, c, "different seeds must differ");
    }

    #[test]
    fn annotations_are_consistent_with_labels() {
        let mut cfg = one_code_config(0.5);
        cfg.codes.push(CodeSpec {
            code: CodeId::new("C2"),
            prevalence: 0.3,
            signal_features: vec![40, 41],
            n_source_docs: 2,
        });
        cfg.signal_leak_prob = 0.1;
        let corpus = generate(&cfg, 19).unwrap();
        corpus.validate().expect("generated corpora must pass corpus validation");
        for enc in &corpus.encounters {
            let dc = enc.doc_codes.as_ref().unwrap();
            let mut seen = BTreeSet::new();
            for set in dc {
                assert!(set.is_subset(&enc.codes), "doc_codes must stay within the encounter's codes");
                seen.extend(set.iter().cloned());
            }
            assert_eq!(seen, enc.codes, "every carried code must have at least one source document");
        }
    }

    #[test]
    fn generated_corpus_parses_under_its_own_manifest() {
        let corpus = generate(&one_code_config(0.5), 23).unwrap();
        let manifest = crate::corpus::Manifest::for_corpus(&corpus);
        let mut buf = Vec::new();
        serialize_corpus(&corpus, &mut buf).unwrap();
        let reparsed = crate::corpus::parse_corpus(buf.as_slice(), &manifest).unwrap();
        assert_eq!(reparsed, corpus);
    }

    #[test]
    fn default_histogram_matches_the_bundled_observations() {
        assert_eq!(DOC_COUNT_OBSERVATIONS[0], (1, 145518));
        assert_eq!(DOC_COUNT_OBSERVATIONS[15], (16, 816));
        let hist = default_histogram();
        assert_eq!(hist.len(), 16);
        let sum: f64 = hist.iter().map(|(_, w)| w).sum();
        assert!((sum - 1.0).abs() < 1e-12, "weights must renormalize to 1, got {sum}");
        // Renormalization must preserve the shape: weight ratio equals count ratio.
        let ratio = hist[0].1 / hist[15].1;
        assert!((ratio - 145518.0 / 816.0).abs() < 1e-9);
    }

    #[test]
    fn document_counts_converge_to_the_histogram() {
        let mut cfg = one_code_config(0.01);
        cfg.n_encounters = 10_000;
        cfg.docs_histogram = default_histogram();
        let corpus = generate(&cfg, 2024).unwrap();

        let mut observed = [0usize; 16];
        for enc in &corpus.encounters {
            observed[enc.documents.len() - 1] += 1;
        }
        let stat: f64 = cfg
            .docs_histogram
            .iter()
            .enumerate()
            .map(|(i, (_, w))| {
                let expected = 10_000.0 * w;
                let diff = observed[i] as f64 - expected;
                diff * diff / expected
            })
            .sum();
        let p = 1.0 - ChiSquared::new(15.0).unwrap().cdf(stat);
        assert!(p > 0.001, "chi-square stat {stat:.1} (p = {p:.5}) — sampler does not match histogram");
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let base = one_code_config(0.5);

        let mut c = base.clone();
        c.codes[0].prevalence = 1.0;
        assert!(matches!(c.validate(), Err(GenError::BadPrevalence { .. })));

        let mut c = base.clone();
        c.codes.push(CodeSpec {
            code: CodeId::new("C2"),
            prevalence: 0.2,
            signal_features: vec![47, 48],
            n_source_docs: 1,
        });
        assert!(
            matches!(c.validate(), Err(GenError::OverlappingSignals { feature: 47, .. })),
            "signal sets must be pairwise disjoint"
        );

        let mut c = base.clone();
        c.codes[0].signal_features = vec![50];
        assert!(matches!(c.validate(), Err(GenError::SignalOutOfRange { feature: 50, .. })));

        let mut c = base.clone();
        c.signal_leak_prob = 1.0;
        assert!(matches!(c.validate(), Err(GenError::BadLeak)));

        let mut c = base.clone();
        c.docs_histogram = vec![(1, 0.0), (2, 0.0)];
        assert!(matches!(c.validate(), Err(GenError::BadHistogram)));

        let mut c = base.clone();
        c.background_features_per_doc = 51;
        assert!(matches!(c.validate(), Err(GenError::BadBackgroundCount)));
    }

    #[test]
    fn low_prevalence_warns_instead_of_failing() {
        let mut cfg = one_code_config(0.001);
        cfg.n_encounters = 100; // expected positives = 0.1
        assert!(cfg.validate().is_ok(), "low prevalence is a warning, not an error");
        let warnings = prevalence_warnings(&cfg);
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("C1"), "warning must name the code: {}", warnings[0]);
        assert!(generate(&cfg, 1).is_ok());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = one_code_config(0.25);
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back = GenConfig::from_json(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&cfg).unwrap());

        // Omitted optional fields pick up defaults.
        let minimal = r#"{
            "n_encounters": 10,
            "feature_dim": 20,
            "codes": [{"code": "X", "prevalence": 0.5, "signal_features": [19], "n_source_docs": 1}],
            "background_features_per_doc": 3,
            "signal_strength": 1
        }"#;
        let cfg = GenConfig::from_json(minimal).unwrap();
        assert_eq!(cfg.docs_histogram.len(), 16, "histogram defaults to the bundled shape");
        assert_eq!(cfg.background_zipf_s, 1.1);
        assert_eq!(cfg.signal_leak_prob, 0.0);
    }
}
