//! Unsmoothed phrase trigram model factorized through chunk tags:
//! `P(c | ctx) = P(c | t, ctx) * P(t | ctx)` with `ctx` the two previous
//! phrases. Counts are kept as integers; probabilities are count ratios.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_rational::Ratio;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::corpus::{ChunkedSentence, PhraseId, PhraseTag, PhraseVocabulary};

pub const LM_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("no training sequences")]
    NoSequences,
    #[error("invalid phrase sequence: {0}")]
    InvalidSequence(String),
    #[error("phrase {phrase} seen with tags {first} and {second}")]
    TagConflict {
        phrase: PhraseId,
        first: LmTag,
        second: LmTag,
    },
    #[error("language model file: {0}")]
    Format(String),
    #[error("language model was estimated for a different phrase vocabulary")]
    FingerprintMismatch,
}

/// A position in a phrase sequence. `Start` only appears as context padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Symbol {
    Start,
    Phrase(PhraseId),
    End,
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::Start => f.write_str("<s>"),
            Symbol::Phrase(id) => write!(f, "{id}"),
            Symbol::End => f.write_str("."),
        }
    }
}

impl Serialize for Symbol {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Symbol::Phrase(id) => s.serialize_u32(id.0),
            Symbol::Start => s.serialize_str("<s>"),
            Symbol::End => s.serialize_str("."),
        }
    }
}

impl<'de> Deserialize<'de> for Symbol {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Id(u32),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Id(id) => Ok(Symbol::Phrase(PhraseId(id))),
            Raw::Name(n) if n == "<s>" => Ok(Symbol::Start),
            Raw::Name(n) if n == "." => Ok(Symbol::End),
            Raw::Name(n) => Err(D::Error::custom(format!("unknown symbol {n:?}"))),
        }
    }
}

/// Tag of a predicted step: one of the phrase types, or the sentence end.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LmTag {
    NP,
    VP,
    PP,
    #[serde(rename = ".")]
    End,
}

impl From<PhraseTag> for LmTag {
    fn from(t: PhraseTag) -> Self {
        match t {
            PhraseTag::NP => LmTag::NP,
            PhraseTag::VP => LmTag::VP,
            PhraseTag::PP => LmTag::PP,
        }
    }
}

impl fmt::Display for LmTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LmTag::NP => "NP",
            LmTag::VP => "VP",
            LmTag::PP => "PP",
            LmTag::End => ".",
        })
    }
}

/// The two preceding symbols.
pub type Context = (Symbol, Symbol);

pub const START_CONTEXT: Context = (Symbol::Start, Symbol::Start);

/// A training or candidate sentence: tagged phrases followed by one END.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhraseSequence {
    steps: Vec<(Symbol, LmTag)>,
}

impl PhraseSequence {
    /// Validates an explicit step list: END exactly once, last; no START;
    /// END symbol iff END tag.
    pub fn new(steps: Vec<(Symbol, LmTag)>) -> Result<PhraseSequence, LmError> {
        let last = steps
            .len()
            .checked_sub(1)
            .ok_or_else(|| LmError::InvalidSequence("empty sequence".into()))?;
        for (i, &(sym, tag)) in steps.iter().enumerate() {
            match sym {
                Symbol::Start => {
                    return Err(LmError::InvalidSequence(format!("START at position {i}")))
                }
                Symbol::End if i != last => {
                    return Err(LmError::InvalidSequence(format!("END at position {i}")))
                }
                Symbol::Phrase(_) if i == last => {
                    return Err(LmError::InvalidSequence("missing terminal END".into()))
                }
                _ => {}
            }
            if (sym == Symbol::End) != (tag == LmTag::End) {
                return Err(LmError::InvalidSequence(format!(
                    "symbol {sym} carries tag {tag} at position {i}"
                )));
            }
        }
        Ok(PhraseSequence { steps })
    }

    /// Appends END to a list of tagged phrases.
    pub fn from_phrases<I>(phrases: I) -> PhraseSequence
    where
        I: IntoIterator<Item = (PhraseId, PhraseTag)>,
    {
        let mut steps: Vec<(Symbol, LmTag)> = phrases
            .into_iter()
            .map(|(id, t)| (Symbol::Phrase(id), t.into()))
            .collect();
        steps.push((Symbol::End, LmTag::End));
        PhraseSequence { steps }
    }

    pub fn steps(&self) -> &[(Symbol, LmTag)] {
        &self.steps
    }

    /// Each step paired with its two-symbol context.
    pub fn transitions(&self) -> impl Iterator<Item = (Context, Symbol, LmTag)> + '_ {
        let mut ctx = START_CONTEXT;
        self.steps.iter().map(move |&(sym, tag)| {
            let here = ctx;
            ctx = (ctx.1, sym);
            (here, sym, tag)
        })
    }
}

/// In-vocabulary phrase sequences of a caption corpus. Out-of-vocabulary
/// phrases are removed and the sequence closes up around them; sentences
/// left without any phrase are skipped.
pub fn sequences_from_corpus(
    corpus: &[ChunkedSentence],
    vocab: &PhraseVocabulary,
) -> Vec<PhraseSequence> {
    corpus
        .iter()
        .filter_map(|s| {
            let ids = vocab.sentence_ids(s);
            if ids.is_empty() {
                None
            } else {
                Some(PhraseSequence::from_phrases(
                    ids.into_iter().map(|id| (id, vocab.tag(id))),
                ))
            }
        })
        .collect()
}

/// One possible continuation of a context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub symbol: Symbol,
    pub tag: LmTag,
    pub probability: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    tags: BTreeMap<LmTag, u64>,
    next: BTreeMap<Symbol, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrigramModel {
    contexts: BTreeMap<Context, ContextCounts>,
    symbol_tags: BTreeMap<Symbol, LmTag>,
    vocab_fingerprint: Option<[u8; 32]>,
}

fn ratio(num: u64, den: u64) -> Ratio<u64> {
    if den == 0 {
        Ratio::new_raw(0, 1)
    } else {
        Ratio::new(num, den)
    }
}

fn ratio_f64(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl TrigramModel {
    fn empty() -> TrigramModel {
        TrigramModel {
            contexts: BTreeMap::new(),
            symbol_tags: BTreeMap::new(),
            vocab_fingerprint: None,
        }
    }

    fn add(&mut self, ctx: Context, sym: Symbol, tag: LmTag, count: u64) -> Result<(), LmError> {
        match self.symbol_tags.get(&sym) {
            Some(&seen) if seen != tag => {
                let phrase = match sym {
                    Symbol::Phrase(id) => id,
                    _ => return Err(LmError::InvalidSequence(format!("{sym} tagged {tag}"))),
                };
                return Err(LmError::TagConflict {
                    phrase,
                    first: seen,
                    second: tag,
                });
            }
            Some(_) => {}
            None => {
                self.symbol_tags.insert(sym, tag);
            }
        }
        let entry = self.contexts.entry(ctx).or_default();
        entry.total += count;
        *entry.tags.entry(tag).or_insert(0) += count;
        *entry.next.entry(sym).or_insert(0) += count;
        Ok(())
    }

    pub fn with_fingerprint(mut self, fingerprint: [u8; 32]) -> TrigramModel {
        self.vocab_fingerprint = Some(fingerprint);
        self
    }

    pub fn vocab_fingerprint(&self) -> Option<&[u8; 32]> {
        self.vocab_fingerprint.as_ref()
    }

    pub fn check_fingerprint(&self, expected: &[u8; 32]) -> Result<(), LmError> {
        match &self.vocab_fingerprint {
            Some(fp) if fp != expected => Err(LmError::FingerprintMismatch),
            _ => Ok(()),
        }
    }

    pub fn contexts(&self) -> impl Iterator<Item = &Context> {
        self.contexts.keys()
    }

    /// Tag a symbol was observed with.
    pub fn symbol_tag(&self, sym: Symbol) -> Option<LmTag> {
        self.symbol_tags.get(&sym).copied()
    }

    pub fn context_count(&self, ctx: &Context) -> u64 {
        self.contexts.get(ctx).map_or(0, |c| c.total)
    }

    pub fn tag_count(&self, ctx: &Context, tag: LmTag) -> u64 {
        self.contexts
            .get(ctx)
            .and_then(|c| c.tags.get(&tag))
            .copied()
            .unwrap_or(0)
    }

    pub fn trigram_count(&self, ctx: &Context, sym: Symbol) -> u64 {
        self.contexts
            .get(ctx)
            .and_then(|c| c.next.get(&sym))
            .copied()
            .unwrap_or(0)
    }

    /// `P(t | ctx)` as an exact ratio; zero for unseen events.
    pub fn tag_probability(&self, ctx: &Context, tag: LmTag) -> Ratio<u64> {
        ratio(self.tag_count(ctx, tag), self.context_count(ctx))
    }

    /// `P(c | t, ctx)` as an exact ratio; zero for unseen events or when `c`
    /// does not carry tag `t`.
    pub fn phrase_probability(&self, ctx: &Context, tag: LmTag, sym: Symbol) -> Ratio<u64> {
        if self.symbol_tag(sym) != Some(tag) {
            return Ratio::new_raw(0, 1);
        }
        ratio(self.trigram_count(ctx, sym), self.tag_count(ctx, tag))
    }

    /// `P(c | t, ctx) * P(t | ctx)` in floating point, with `t` the tag of `c`.
    pub fn transition_probability(&self, ctx: &Context, sym: Symbol) -> f64 {
        let Some(tag) = self.symbol_tag(sym) else {
            return 0.0;
        };
        let tag_count = self.tag_count(ctx, tag);
        ratio_f64(self.trigram_count(ctx, sym), tag_count)
            * ratio_f64(tag_count, self.context_count(ctx))
    }

    /// Continuations of `ctx` with nonzero probability whose tag is allowed,
    /// most probable first (ties by symbol order).
    pub fn transitions_from(&self, ctx: &Context, allowed: &[LmTag]) -> Vec<Transition> {
        let Some(counts) = self.contexts.get(ctx) else {
            return Vec::new();
        };
        let mut out: Vec<Transition> = counts
            .next
            .keys()
            .filter_map(|&symbol| {
                let tag = self.symbol_tags[&symbol];
                if !allowed.contains(&tag) {
                    return None;
                }
                let probability = self.transition_probability(ctx, symbol);
                (probability > 0.0).then_some(Transition {
                    symbol,
                    tag,
                    probability,
                })
            })
            .collect();
        out.sort_by(|a, b| {
            b.probability
                .total_cmp(&a.probability)
                .then(a.symbol.cmp(&b.symbol))
        });
        out
    }

    /// Sum of log transition probabilities including the END step;
    /// `-inf` as soon as one factor is zero.
    pub fn sequence_log_prob(&self, seq: &PhraseSequence) -> f64 {
        let mut total = 0.0;
        for (ctx, sym, tag) in seq.transitions() {
            if self.symbol_tag(sym) != Some(tag) {
                return f64::NEG_INFINITY;
            }
            let p = self.transition_probability(&ctx, sym);
            if p == 0.0 {
                return f64::NEG_INFINITY;
            }
            total += p.ln();
        }
        total
    }

    pub fn to_json(&self) -> serde_json::Value {
        let events = self
            .contexts
            .iter()
            .flat_map(|(&context, counts)| {
                counts.next.iter().map(move |(&next, &count)| LmEvent {
                    context: [context.0, context.1],
                    next,
                    tag: self.symbol_tags[&next],
                    count,
                })
            })
            .collect();
        let file = LmFile {
            version: LM_FORMAT_VERSION,
            vocab_fingerprint: self.vocab_fingerprint.map(hex::encode),
            events,
        };
        serde_json::to_value(file).expect("language model serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<TrigramModel, LmError> {
        let file: LmFile =
            serde_json::from_value(value).map_err(|e| LmError::Format(e.to_string()))?;
        if file.version != LM_FORMAT_VERSION {
            return Err(LmError::Format(format!(
                "unsupported version {}",
                file.version
            )));
        }
        let mut model = TrigramModel::empty();
        if let Some(hex_fp) = file.vocab_fingerprint {
            let bytes = hex::decode(&hex_fp).map_err(|e| LmError::Format(e.to_string()))?;
            let fp: [u8; 32] = bytes
                .try_into()
                .map_err(|_| LmError::Format("fingerprint must be 32 bytes".into()))?;
            model.vocab_fingerprint = Some(fp);
        }
        let mut seen = BTreeSet::new();
        for e in file.events {
            let ctx = (e.context[0], e.context[1]);
            if e.count == 0 {
                return Err(LmError::Format("zero count event".into()));
            }
            if e.next == Symbol::Start || (e.next == Symbol::End) != (e.tag == LmTag::End) {
                return Err(LmError::Format(format!(
                    "bad event {} tagged {}",
                    e.next, e.tag
                )));
            }
            if !seen.insert((ctx, e.next)) {
                return Err(LmError::Format(format!("duplicate event after {ctx:?}")));
            }
            model.add(ctx, e.next, e.tag, e.count)?;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct LmEvent {
    context: [Symbol; 2],
    next: Symbol,
    tag: LmTag,
    count: u64,
}

#[derive(Serialize, Deserialize)]
struct LmFile {
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab_fingerprint: Option<String>,
    events: Vec<LmEvent>,
}

/// Counts every trigram event (START-padded, END included).
pub fn estimate(sequences: &[PhraseSequence]) -> Result<TrigramModel, LmError> {
    if sequences.is_empty() {
        return Err(LmError::NoSequences);
    }
    let mut model = TrigramModel::empty();
    for seq in sequences {
        for (ctx, sym, tag) in seq.transitions() {
            model.add(ctx, sym, tag, 1)?;
        }
    }
    Ok(model)
}
