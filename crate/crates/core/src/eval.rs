//! Phrase retrieval recall, corpus BLEU, human agreement and the rate of
//! generated captions copied from training data.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PhraseId, PhraseTag, PhraseVocabulary};
use crate::generator::PhraseSelection;

pub const DEFAULT_MAX_NGRAM: usize = 4;
pub const HUMAN_AGREEMENT_MIN_REFERENCES: usize = 5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image {0:?} has predictions but no ground truth")]
    MissingGroundTruth(String),
    #[error("no candidates to score")]
    NoCandidates,
    #[error("{candidates} candidates but {references} reference sets")]
    CountMismatch {
        candidates: usize,
        references: usize,
    },
    #[error("candidate {0} has no reference")]
    NoReference(usize),
    #[error(
        "image {image:?} has {found} references, at least {HUMAN_AGREEMENT_MIN_REFERENCES} needed"
    )]
    TooFewReferences { image: String, found: usize },
    #[error("n-gram order must be at least 1")]
    InvalidOrder,
    #[error("phrase id {0} not in vocabulary")]
    UnknownPhrase(PhraseId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeRecall {
    pub retrieved: usize,
    pub total: usize,
    pub recall: f64,
}

impl TypeRecall {
    fn finish(retrieved: usize, total: usize) -> TypeRecall {
        TypeRecall {
            retrieved,
            total,
            recall: if total == 0 {
                0.0
            } else {
                retrieved as f64 / total as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub np: TypeRecall,
    pub vp: TypeRecall,
    pub pp: TypeRecall,
    /// Count-weighted over all types.
    pub overall: TypeRecall,
    /// Unweighted mean over types that have ground truth.
    pub macro_recall: f64,
    pub images: usize,
}

/// Fraction of each image's ground-truth phrases found in its selection,
/// summed over the images that have predictions.
pub fn phrase_recall(
    predictions: &BTreeMap<String, PhraseSelection>,
    ground_truth: &BTreeMap<String, BTreeSet<PhraseId>>,
    vocab: &PhraseVocabulary,
) -> Result<RecallReport, EvalError> {
    let mut retrieved: HashMap<PhraseTag, usize> = HashMap::new();
    let mut total: HashMap<PhraseTag, usize> = HashMap::new();
    for (image, selection) in predictions {
        let truth = ground_truth
            .get(image)
            .ok_or_else(|| EvalError::MissingGroundTruth(image.clone()))?;
        let predicted: HashSet<PhraseId> = selection.ids().collect();
        for &id in truth {
            let tag = vocab.get(id).ok_or(EvalError::UnknownPhrase(id))?.tag;
            *total.entry(tag).or_insert(0) += 1;
            if predicted.contains(&id) {
                *retrieved.entry(tag).or_insert(0) += 1;
            }
        }
    }
    let per = |tag| {
        TypeRecall::finish(
            retrieved.get(&tag).copied().unwrap_or(0),
            total.get(&tag).copied().unwrap_or(0),
        )
    };
    let (np, vp, pp) = (per(PhraseTag::NP), per(PhraseTag::VP), per(PhraseTag::PP));
    let overall = TypeRecall::finish(
        np.retrieved + vp.retrieved + pp.retrieved,
        np.total + vp.total + pp.total,
    );
    let present: Vec<f64> = [np, vp, pp]
        .iter()
        .filter(|t| t.total > 0)
        .map(|t| t.recall)
        .collect();
    let macro_recall = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(RecallReport {
        np,
        vp,
        pp,
        overall,
        macro_recall,
        images: predictions.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// `scores[k - 1]` is B-k.
    pub scores: Vec<f64>,
    /// Clipped n-gram precision per order.
    pub precisions: Vec<f64>,
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub brevity_penalty: f64,
    pub candidate_length: usize,
    pub reference_length: usize,
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU with uniform weights and no smoothing.
///
/// Texts are split on whitespace. Clipped n-gram matches and candidate
/// n-gram totals are summed over the corpus before the geometric mean. The
/// effective reference length of a candidate is the closest reference
/// length, ties going to the shorter one.
pub fn corpus_bleu(
    candidates: &[String],
    references: &[Vec<String>],
    max_n: usize,
) -> Result<BleuReport, EvalError> {
    if max_n == 0 {
        return Err(EvalError::InvalidOrder);
    }
    if candidates.is_empty() {
        return Err(EvalError::NoCandidates);
    }
    if candidates.len() != references.len() {
        return Err(EvalError::CountMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (i, (cand, refs)) in candidates.iter().zip(references).enumerate() {
        if refs.is_empty() {
            return Err(EvalError::NoReference(i));
        }
        let c: Vec<&str> = cand.split_whitespace().collect();
        let rs: Vec<Vec<&str>> = refs
            .iter()
            .map(|r| r.split_whitespace().collect())
            .collect();
        cand_len += c.len();
        ref_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&len| (len.abs_diff(c.len()), len))
            .expect("at least one reference");
        for n in 1..=max_n {
            let cand_counts = ngram_counts(&c, n);
            let mut max_ref: HashMap<&[&str], u64> = HashMap::new();
            for r in &rs {
                for (gram, count) in ngram_counts(r, n) {
                    let e = max_ref.entry(gram).or_insert(0);
                    *e = (*e).max(count);
                }
            }
            for (gram, count) in &cand_counts {
                matches[n - 1] += (*count).min(max_ref.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1) as u64;
        }
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if cand_len == 0 {
        0.0
    } else if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut scores = Vec::with_capacity(max_n);
    let mut log_sum = 0.0;
    let mut zero = false;
    for (k, &p) in precisions.iter().enumerate() {
        if p == 0.0 {
            zero = true;
        } else {
            log_sum += p.ln();
        }
        scores.push(if zero {
            0.0
        } else {
            // clamp rounding noise in exp(mean(ln 1)) style cases
            (brevity_penalty * (log_sum / (k + 1) as f64).exp()).min(1.0)
        });
    }
    Ok(BleuReport {
        scores,
        precisions,
        matches,
        totals,
        brevity_penalty,
        candidate_length: cand_len,
        reference_length: ref_len,
    })
}

/// BLEU of each image's first human caption against its remaining ones.
pub fn human_agreement(
    references: &BTreeMap<String, Vec<String>>,
    max_n: usize,
) -> Result<BleuReport, EvalError> {
    let mut cands = Vec::with_capacity(references.len());
    let mut refs = Vec::with_capacity(references.len());
    for (image, texts) in references {
        if texts.len() < HUMAN_AGREEMENT_MIN_REFERENCES {
            return Err(EvalError::TooFewReferences {
                image: image.clone(),
                found: texts.len(),
            });
        }
        cands.push(texts[0].clone());
        refs.push(texts[1..].to_vec());
    }
    corpus_bleu(&cands, &refs, max_n)
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fraction of generated captions that occur verbatim (after whitespace
/// normalization) among the training captions. Zero for no captions.
pub fn novelty_rate<S: AsRef<str>, T: AsRef<str>>(generated: &[S], training: &[T]) -> f64 {
    if generated.is_empty() {
        return 0.0;
    }
    let known: HashSet<String> = training.iter().map(|t| normalize(t.as_ref())).collect();
    let copied = generated
        .iter()
        .filter(|g| known.contains(&normalize(g.as_ref())))
        .count();
    copied as f64 / generated.len() as f64
}
