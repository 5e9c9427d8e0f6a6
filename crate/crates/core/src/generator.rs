//! Sentence generation from predicted phrases.
//!
//! Sentences follow the chunk grammar `NP ((VP|PP) NP)* .` with two to four
//! noun phrases, use each selected phrase at most once, and only take trigram
//! transitions above a probability threshold. Candidates are then re-ranked
//! by their mean image/phrase score.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bilinear::{BilinearError, BilinearModel};
use crate::corpus::{PhraseId, PhraseTag, PhraseVocabulary};
use crate::langmodel::{Context, LmTag, Symbol, TrigramModel, START_CONTEXT};

pub const MIN_NOUN_PHRASES: usize = 2;
pub const MAX_NOUN_PHRASES: usize = 4;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("selection caps must be at least 1 per phrase type")]
    InvalidCaps,
    #[error("beam width must be at least 1")]
    InvalidBeamWidth,
    #[error("probability threshold must lie in [0, 1), got {0}")]
    InvalidThreshold(f64),
    #[error("model covers {model} phrases but the vocabulary has {vocab}")]
    VocabularySize { model: usize, vocab: usize },
    #[error("no sentences to rank")]
    NoSentences,
    #[error("cannot render an empty sentence")]
    EmptySentence,
    #[error("phrase id {0} not in vocabulary")]
    UnknownPhrase(PhraseId),
    #[error(transparent)]
    Model(#[from] BilinearError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionCaps {
    pub np: usize,
    pub vp: usize,
    pub pp: usize,
}

impl Default for SelectionCaps {
    fn default() -> Self {
        SelectionCaps {
            np: 20,
            vp: 5,
            pp: 5,
        }
    }
}

impl SelectionCaps {
    fn cap(&self, tag: PhraseTag) -> usize {
        match tag {
            PhraseTag::NP => self.np,
            PhraseTag::VP => self.vp,
            PhraseTag::PP => self.pp,
        }
    }
}

/// Top-scored phrases per type for one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhraseSelection {
    pub np: Vec<PhraseId>,
    pub vp: Vec<PhraseId>,
    pub pp: Vec<PhraseId>,
    pub scores: BTreeMap<PhraseId, f64>,
}

impl PhraseSelection {
    pub fn of_type(&self, tag: PhraseTag) -> &[PhraseId] {
        match tag {
            PhraseTag::NP => &self.np,
            PhraseTag::VP => &self.vp,
            PhraseTag::PP => &self.pp,
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = PhraseId> + '_ {
        self.np.iter().chain(&self.vp).chain(&self.pp).copied()
    }

    pub fn len(&self) -> usize {
        self.np.len() + self.vp.len() + self.pp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-type top-k phrases by bilinear score; ties go to the lower id.
pub fn predict_phrases(
    model: &BilinearModel,
    vocab: &PhraseVocabulary,
    z: &[f64],
    caps: &SelectionCaps,
) -> Result<PhraseSelection, GeneratorError> {
    if caps.np == 0 || caps.vp == 0 || caps.pp == 0 {
        return Err(GeneratorError::InvalidCaps);
    }
    model.check_fingerprint(&vocab.fingerprint())?;
    if model.num_phrases() != vocab.len() {
        return Err(GeneratorError::VocabularySize {
            model: model.num_phrases(),
            vocab: vocab.len(),
        });
    }
    let scores = model.score_all(z)?;
    let mut selection = PhraseSelection::default();
    for tag in PhraseTag::ALL {
        let mut ids: Vec<PhraseId> = vocab.ids().filter(|&id| vocab.tag(id) == tag).collect();
        ids.sort_by(|a, b| {
            scores[b.index()]
                .total_cmp(&scores[a.index()])
                .then(a.cmp(b))
        });
        ids.truncate(caps.cap(tag));
        for &id in &ids {
            selection.scores.insert(id, scores[id.index()]);
        }
        match tag {
            PhraseTag::NP => selection.np = ids,
            PhraseTag::VP => selection.vp = ids,
            PhraseTag::PP => selection.pp = ids,
        }
    }
    Ok(selection)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Transitions need probability strictly above this value.
    pub prob_threshold: f64,
    /// Upper bound on the number of completed sentences kept.
    pub max_sentences: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 100,
            prob_threshold: 0.01,
            max_sentences: 1000,
        }
    }
}

/// Position in the sentence automaton.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeState {
    ExpectNp,
    AfterNp,
    Complete,
}

#[derive(Debug, Clone)]
struct Hypothesis {
    phrases: Vec<PhraseId>,
    tags: Vec<LmTag>,
    context: Context,
    used: HashSet<PhraseId>,
    np_count: usize,
    log_prob: f64,
    state: DecodeState,
}

impl Hypothesis {
    fn start() -> Hypothesis {
        Hypothesis {
            phrases: Vec::new(),
            tags: Vec::new(),
            context: START_CONTEXT,
            used: HashSet::new(),
            np_count: 0,
            log_prob: 0.0,
            state: DecodeState::ExpectNp,
        }
    }

    fn allowed_tags(&self) -> Vec<LmTag> {
        let room = self.np_count < MAX_NOUN_PHRASES;
        let mut tags = Vec::with_capacity(3);
        match self.state {
            DecodeState::ExpectNp if room => tags.push(LmTag::NP),
            DecodeState::AfterNp => {
                if room {
                    tags.extend([LmTag::VP, LmTag::PP]);
                }
                if self.np_count >= MIN_NOUN_PHRASES {
                    tags.push(LmTag::End);
                }
            }
            _ => {}
        }
        tags
    }

    fn extend(&self, symbol: Symbol, tag: LmTag, probability: f64) -> Hypothesis {
        let mut next = self.clone();
        next.context = (self.context.1, symbol);
        next.log_prob += probability.ln();
        next.tags.push(tag);
        if let Symbol::Phrase(id) = symbol {
            next.phrases.push(id);
            next.used.insert(id);
        }
        next.state = match tag {
            LmTag::NP => {
                next.np_count += 1;
                DecodeState::AfterNp
            }
            LmTag::VP | LmTag::PP => DecodeState::ExpectNp,
            LmTag::End => DecodeState::Complete,
        };
        next
    }
}

/// A completed sentence from the decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub phrases: Vec<PhraseId>,
    /// Step tags including the terminal END.
    pub tags: Vec<LmTag>,
    pub log_prob: f64,
}

/// Beam search over the constrained phrase grammar.
///
/// Each round expands every live hypothesis, sorts all expansions by
/// cumulative log probability (stable, so construction order breaks ties)
/// and keeps the best `beam_width`; kept hypotheses that reached END are
/// moved to the output. Returns completed sentences, most probable first.
pub fn decode(
    selection: &PhraseSelection,
    lm: &TrigramModel,
    config: &DecodeConfig,
) -> Result<Vec<Candidate>, GeneratorError> {
    if config.beam_width == 0 {
        return Err(GeneratorError::InvalidBeamWidth);
    }
    if !(0.0..1.0).contains(&config.prob_threshold) {
        return Err(GeneratorError::InvalidThreshold(config.prob_threshold));
    }
    let selected: HashSet<PhraseId> = selection.ids().collect();
    let mut beam = vec![Hypothesis::start()];
    let mut completed: Vec<Hypothesis> = Vec::new();
    while !beam.is_empty() {
        let mut expansions = Vec::new();
        for hyp in &beam {
            let allowed = hyp.allowed_tags();
            if allowed.is_empty() {
                continue;
            }
            for t in lm.transitions_from(&hyp.context, &allowed) {
                if t.probability <= config.prob_threshold {
                    continue;
                }
                if let Symbol::Phrase(id) = t.symbol {
                    if !selected.contains(&id) || hyp.used.contains(&id) {
                        continue;
                    }
                }
                expansions.push(hyp.extend(t.symbol, t.tag, t.probability));
            }
        }
        expansions.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
        expansions.truncate(config.beam_width);
        let (done, live): (Vec<_>, Vec<_>) = expansions
            .into_iter()
            .partition(|h| h.state == DecodeState::Complete);
        completed.extend(done);
        beam = live;
    }
    completed.sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob));
    completed.truncate(config.max_sentences);
    Ok(completed
        .into_iter()
        .map(|h| Candidate {
            phrases: h.phrases,
            tags: h.tags,
            log_prob: h.log_prob,
        })
        .collect())
}

/// Checks a tag sequence against `NP ((VP|PP) NP){1,3} .`.
pub fn is_grammatical(tags: &[LmTag]) -> bool {
    let Some((&LmTag::End, body)) = tags.split_last() else {
        return false;
    };
    let nps = body.len().div_ceil(2);
    body.len() % 2 == 1
        && (MIN_NOUN_PHRASES..=MAX_NOUN_PHRASES).contains(&nps)
        && body.iter().enumerate().all(|(i, t)| {
            if i % 2 == 0 {
                *t == LmTag::NP
            } else {
                matches!(t, LmTag::VP | LmTag::PP)
            }
        })
}

/// Phrase words joined by single spaces, then " .".
pub fn render(phrases: &[PhraseId], vocab: &PhraseVocabulary) -> Result<String, GeneratorError> {
    if phrases.is_empty() {
        return Err(GeneratorError::EmptySentence);
    }
    let mut words: Vec<&str> = Vec::new();
    for &id in phrases {
        let p = vocab.get(id).ok_or(GeneratorError::UnknownPhrase(id))?;
        words.extend(p.words.iter().map(String::as_str));
    }
    words.push(".");
    Ok(words.join(" "))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSentence {
    pub phrases: Vec<PhraseId>,
    pub log_prob: f64,
    /// Mean bilinear score of the sentence's phrases for the image.
    pub match_score: f64,
    pub text: String,
}

/// Orders candidates by mean phrase score (then log probability, then text).
/// The first element is the chosen caption.
pub fn rerank(
    model: &BilinearModel,
    z: &[f64],
    vocab: &PhraseVocabulary,
    candidates: &[Candidate],
) -> Result<Vec<GeneratedSentence>, GeneratorError> {
    if candidates.is_empty() {
        return Err(GeneratorError::NoSentences);
    }
    let scores = model.score_all(z)?;
    let mut ranked = candidates
        .iter()
        .map(|c| {
            let text = render(&c.phrases, vocab)?;
            let mut total = 0.0;
            for id in &c.phrases {
                total += scores
                    .get(id.index())
                    .ok_or(GeneratorError::UnknownPhrase(*id))?;
            }
            Ok(GeneratedSentence {
                phrases: c.phrases.clone(),
                log_prob: c.log_prob,
                match_score: total / c.phrases.len() as f64,
                text,
            })
        })
        .collect::<Result<Vec<_>, GeneratorError>>()?;
    sort_ranking(&mut ranked);
    Ok(ranked)
}

pub(crate) fn sort_ranking(ranked: &mut [GeneratedSentence]) {
    ranked.sort_by(|a, b| {
        b.match_score
            .total_cmp(&a.match_score)
            .then(b.log_prob.total_cmp(&a.log_prob))
            .then_with(|| a.text.cmp(&b.text))
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, ChunkedSentence};
    use crate::langmodel::{estimate, PhraseSequence};
    use crate::matrix::Matrix;

    const A: PhraseId = PhraseId(0);
    const B: PhraseId = PhraseId(1);
    const C: PhraseId = PhraseId(2);
    const D: PhraseId = PhraseId(3);

    fn toy_lm() -> TrigramModel {
        use PhraseTag::*;
        let abc = PhraseSequence::from_phrases([(A, NP), (B, VP), (C, NP)]);
        let adc = PhraseSequence::from_phrases([(A, NP), (D, PP), (C, NP)]);
        estimate(&[abc.clone(), abc, adc]).unwrap()
    }

    fn selection(np: &[PhraseId], vp: &[PhraseId], pp: &[PhraseId]) -> PhraseSelection {
        PhraseSelection {
            np: np.to_vec(),
            vp: vp.to_vec(),
            pp: pp.to_vec(),
            scores: BTreeMap::new(),
        }
    }

    #[test]
    fn decodes_toy_sentence() {
        let out = decode(
            &selection(&[A, C], &[B], &[]),
            &toy_lm(),
            &DecodeConfig::default(),
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].phrases, vec![A, B, C]);
        assert!((out[0].log_prob - (2.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!(is_grammatical(&out[0].tags));
    }

    #[test]
    fn single_np_yields_nothing() {
        let out = decode(
            &selection(&[A], &[B], &[D]),
            &toy_lm(),
            &DecodeConfig::default(),
        )
        .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn threshold_removes_rare_transition() {
        use PhraseTag::*;
        // after (START, A): VP B 199 times, PP D once -> P(D) = 0.005
        let mut seqs = vec![PhraseSequence::from_phrases([(A, NP), (B, VP), (C, NP)]); 199];
        seqs.push(PhraseSequence::from_phrases([(A, NP), (D, PP), (C, NP)]));
        let lm = estimate(&seqs).unwrap();
        let out = decode(
            &selection(&[A, C], &[B], &[D]),
            &lm,
            &DecodeConfig::default(),
        )
        .unwrap();
        assert!(!out.is_empty());
        assert!(out.iter().all(|c| !c.phrases.contains(&D)));
        let loose = DecodeConfig {
            prob_threshold: 0.001,
            ..DecodeConfig::default()
        };
        let out = decode(&selection(&[A, C], &[B], &[D]), &lm, &loose).unwrap();
        assert!(out.iter().any(|c| c.phrases.contains(&D)));
    }

    #[test]
    fn decode_rejects_bad_config() {
        let s = selection(&[A], &[], &[]);
        let lm = toy_lm();
        let zero = DecodeConfig {
            beam_width: 0,
            ..DecodeConfig::default()
        };
        assert!(matches!(
            decode(&s, &lm, &zero),
            Err(GeneratorError::InvalidBeamWidth)
        ));
        let one = DecodeConfig {
            prob_threshold: 1.0,
            ..DecodeConfig::default()
        };
        assert!(matches!(
            decode(&s, &lm, &one),
            Err(GeneratorError::InvalidThreshold(_))
        ));
    }

    #[test]
    fn grammar_checker() {
        use LmTag::*;
        assert!(is_grammatical(&[NP, VP, NP, End]));
        assert!(is_grammatical(&[NP, VP, NP, PP, NP, VP, NP, End]));
        assert!(!is_grammatical(&[NP, End]));
        assert!(!is_grammatical(&[NP, VP, NP, PP, NP, VP, NP, PP, NP, End]));
        assert!(!is_grammatical(&[NP, NP, End]));
        assert!(!is_grammatical(&[NP, VP, End]));
        assert!(!is_grammatical(&[VP, NP, VP, NP, End]));
        assert!(!is_grammatical(&[NP, VP, NP]));
        assert!(!is_grammatical(&[]));
    }

    fn toy_vocab() -> PhraseVocabulary {
        let s = ChunkedSentence::new(
            "i",
            "s",
            ["a", "man", "riding", "a", "skateboard", "on", "grass"]
                .iter()
                .map(|t| t.to_string())
                .collect(),
            &["B-NP", "I-NP", "B-VP", "B-NP", "I-NP", "B-PP", "B-NP"],
        )
        .unwrap();
        build_vocabulary(&[s], 1).unwrap()
    }

    fn id_of(vocab: &PhraseVocabulary, text: &str) -> PhraseId {
        vocab.iter().find(|(_, p)| p.text() == text).unwrap().0
    }

    #[test]
    fn renders_text() {
        let vocab = toy_vocab();
        let ids = [
            id_of(&vocab, "a man"),
            id_of(&vocab, "riding"),
            id_of(&vocab, "a skateboard"),
        ];
        assert_eq!(render(&ids, &vocab).unwrap(), "a man riding a skateboard .");
        assert!(matches!(
            render(&[], &vocab),
            Err(GeneratorError::EmptySentence)
        ));
    }

    // U = diag-ish so scores equal U entries with V = [1], z = [1]
    fn scoring_model(vocab: &PhraseVocabulary, scores: &[f64]) -> BilinearModel {
        let u = Matrix::from_column_major(1, scores.len(), scores.to_vec());
        BilinearModel::new(
            u,
            Matrix::from_column_major(1, 1, vec![1.0]),
            vocab.fingerprint(),
        )
        .unwrap()
    }

    #[test]
    fn predicts_top_k_with_id_ties() {
        let vocab = toy_vocab();
        // ids are ordered NP..., VP..., PP...: 3 NPs, 1 VP, 1 PP
        let model = scoring_model(&vocab, &[1.0, 5.0, 3.0, 0.0, 0.0]);
        let caps = SelectionCaps {
            np: 2,
            vp: 5,
            pp: 5,
        };
        let sel = predict_phrases(&model, &vocab, &[1.0], &caps).unwrap();
        assert_eq!(sel.np, vec![PhraseId(1), PhraseId(2)]);
        assert_eq!(sel.vp.len(), 1);
        assert_eq!(sel.scores[&PhraseId(1)], 5.0);

        let tied = scoring_model(&vocab, &[2.0, 2.0, 2.0, 0.0, 0.0]);
        let sel = predict_phrases(&tied, &vocab, &[1.0], &caps).unwrap();
        assert_eq!(sel.np, vec![PhraseId(0), PhraseId(1)]);

        let bad_caps = SelectionCaps { np: 0, ..caps };
        assert!(matches!(
            predict_phrases(&model, &vocab, &[1.0], &bad_caps),
            Err(GeneratorError::InvalidCaps)
        ));

        let foreign =
            BilinearModel::new(model.phrases().clone(), model.projection().clone(), [0; 32])
                .unwrap();
        assert!(matches!(
            predict_phrases(&foreign, &vocab, &[1.0], &caps),
            Err(GeneratorError::Model(BilinearError::FingerprintMismatch))
        ));
    }

    #[test]
    fn rerank_orders_by_mean_score() {
        let vocab = toy_vocab();
        let model = scoring_model(&vocab, &[2.0, 4.0, 0.0, 3.0, 1.0]);
        let c1 = Candidate {
            phrases: vec![PhraseId(0), PhraseId(1)],
            tags: vec![],
            log_prob: -5.0,
        };
        let c2 = Candidate {
            phrases: vec![PhraseId(2), PhraseId(4), PhraseId(1)],
            tags: vec![],
            log_prob: -0.1,
        };
        let ranked = rerank(&model, &[1.0], &vocab, &[c2.clone(), c1.clone()]).unwrap();
        assert_eq!(ranked[0].match_score, 3.0);
        assert_eq!(ranked[0].phrases, c1.phrases);
        assert!((ranked[1].match_score - 5.0 / 3.0).abs() < 1e-15);

        let single = rerank(&model, &[1.0], &vocab, std::slice::from_ref(&c2)).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].phrases, c2.phrases);
        assert_eq!(single[0].log_prob, c2.log_prob);

        assert!(matches!(
            rerank(&model, &[1.0], &vocab, &[]),
            Err(GeneratorError::NoSentences)
        ));
    }

    #[test]
    fn rerank_tie_breaks() {
        let mut v = vec![
            GeneratedSentence {
                phrases: vec![],
                log_prob: -1.0,
                match_score: 1.0,
                text: "b".into(),
            },
            GeneratedSentence {
                phrases: vec![],
                log_prob: -0.5,
                match_score: 1.0,
                text: "c".into(),
            },
            GeneratedSentence {
                phrases: vec![],
                log_prob: -1.0,
                match_score: 1.0,
                text: "a".into(),
            },
        ];
        sort_ranking(&mut v);
        let order: Vec<&str> = v.iter().map(|s| s.text.as_str()).collect();
        assert_eq!(order, vec!["c", "a", "b"]);
    }
}
