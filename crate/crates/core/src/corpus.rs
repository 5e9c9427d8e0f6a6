//! Chunk-annotated caption ingestion, phrase extraction, the thresholded
//! phrase vocabulary and corpus syntax statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default minimum corpus count for a phrase to enter the vocabulary.
pub const DEFAULT_VOCAB_THRESHOLD: u64 = 10;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: {tokens} tokens but {tags} tags")]
    LengthMismatch {
        line: usize,
        tokens: usize,
        tags: usize,
    },
    #[error("line {line}: invalid chunk tag {tag:?} at position {position}")]
    InvalidTag {
        line: usize,
        position: usize,
        tag: String,
    },
    #[error("line {line}: tag {tag:?} at position {position} does not continue a chunk of the same type")]
    IobViolation {
        line: usize,
        position: usize,
        tag: String,
    },
    #[error("unknown image id {0:?}")]
    UnknownImage(String),
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The three phrase types that make up a caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PhraseTag {
    NP,
    VP,
    PP,
}

impl PhraseTag {
    pub const ALL: [PhraseTag; 3] = [PhraseTag::NP, PhraseTag::VP, PhraseTag::PP];

    pub fn as_str(self) -> &'static str {
        match self {
            PhraseTag::NP => "NP",
            PhraseTag::VP => "VP",
            PhraseTag::PP => "PP",
        }
    }
}

impl fmt::Display for PhraseTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PhraseTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "NP" => Ok(PhraseTag::NP),
            "VP" => Ok(PhraseTag::VP),
            "PP" => Ok(PhraseTag::PP),
            other => Err(format!("unknown phrase tag {other:?}")),
        }
    }
}

/// Chunk type of an IOB label. Types outside NP/VP/PP/ADVP are kept so the
/// span structure is preserved, but never become phrases.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ChunkType {
    NP,
    VP,
    PP,
    ADVP,
    Other(String),
}

impl ChunkType {
    fn parse(s: &str) -> ChunkType {
        match s {
            "NP" => ChunkType::NP,
            "VP" => ChunkType::VP,
            "PP" => ChunkType::PP,
            "ADVP" => ChunkType::ADVP,
            other => ChunkType::Other(other.to_string()),
        }
    }

    fn phrase_tag(&self) -> Option<PhraseTag> {
        match self {
            ChunkType::NP => Some(PhraseTag::NP),
            ChunkType::VP => Some(PhraseTag::VP),
            ChunkType::PP => Some(PhraseTag::PP),
            _ => None,
        }
    }
}

/// One IOB2 label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChunkLabel {
    Begin(ChunkType),
    Inside(ChunkType),
    Outside,
}

impl ChunkLabel {
    pub fn parse(s: &str) -> Option<ChunkLabel> {
        if s == "O" {
            return Some(ChunkLabel::Outside);
        }
        let (prefix, kind) = s.split_once('-')?;
        if kind.is_empty() {
            return None;
        }
        match prefix {
            "B" => Some(ChunkLabel::Begin(ChunkType::parse(kind))),
            "I" => Some(ChunkLabel::Inside(ChunkType::parse(kind))),
            _ => None,
        }
    }
}

/// A tokenized caption with one chunk label per token.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkedSentence {
    pub image_id: String,
    pub sentence_id: String,
    pub tokens: Vec<String>,
    pub tags: Vec<ChunkLabel>,
}

impl ChunkedSentence {
    /// Builds a sentence from raw tag strings, validating the IOB2 invariants.
    /// Tokens are lowercased.
    pub fn new(
        image_id: impl Into<String>,
        sentence_id: impl Into<String>,
        tokens: Vec<String>,
        tags: &[&str],
    ) -> Result<ChunkedSentence, CorpusError> {
        let owned: Vec<String> = tags.iter().map(|t| t.to_string()).collect();
        build_sentence(0, image_id.into(), sentence_id.into(), tokens, owned)
    }

    /// Tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    fn ends_with_period(&self) -> bool {
        matches!(
            (self.tokens.last(), self.tags.last()),
            (Some(tok), Some(ChunkLabel::Outside)) if tok == "."
        )
    }
}

#[derive(Deserialize)]
struct CaptionRecord {
    image_id: String,
    sentence_id: String,
    tokens: Vec<String>,
    tags: Vec<String>,
}

fn build_sentence(
    line: usize,
    image_id: String,
    sentence_id: String,
    tokens: Vec<String>,
    tags: Vec<String>,
) -> Result<ChunkedSentence, CorpusError> {
    if tokens.len() != tags.len() {
        return Err(CorpusError::LengthMismatch {
            line,
            tokens: tokens.len(),
            tags: tags.len(),
        });
    }
    let mut labels = Vec::with_capacity(tags.len());
    for (position, raw) in tags.into_iter().enumerate() {
        let label = ChunkLabel::parse(&raw).ok_or_else(|| CorpusError::InvalidTag {
            line,
            position,
            tag: raw.clone(),
        })?;
        if let ChunkLabel::Inside(kind) = &label {
            let continues = match labels.last() {
                Some(ChunkLabel::Begin(prev)) | Some(ChunkLabel::Inside(prev)) => prev == kind,
                _ => false,
            };
            if !continues {
                return Err(CorpusError::IobViolation {
                    line,
                    position,
                    tag: raw,
                });
            }
        }
        labels.push(label);
    }
    Ok(ChunkedSentence {
        image_id,
        sentence_id,
        tokens: tokens.into_iter().map(|t| t.to_lowercase()).collect(),
        tags: labels,
    })
}

/// Reads a JSON Lines caption file. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_captions<R: BufRead>(source: R) -> Result<Vec<ChunkedSentence>, CorpusError> {
    let mut sentences = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CaptionRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        sentences.push(build_sentence(
            line_no,
            record.image_id,
            record.sentence_id,
            record.tokens,
            record.tags,
        )?);
    }
    Ok(sentences)
}

/// A typed token sequence; the atomic caption constituent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Phrase {
    pub words: Vec<String>,
    pub tag: PhraseTag,
}

impl Phrase {
    pub fn new<S: AsRef<str>>(tag: PhraseTag, words: &[S]) -> Phrase {
        Phrase {
            words: words.iter().map(|w| w.as_ref().to_lowercase()).collect(),
            tag,
        }
    }

    /// Lowercase words joined by spaces, then `|` and the tag.
    pub fn canonical_key(&self) -> String {
        format!("{}|{}", self.text(), self.tag)
    }

    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

impl PartialEq for Phrase {
    fn eq(&self, other: &Self) -> bool {
        self.canonical_key() == other.canonical_key()
    }
}

impl Eq for Phrase {}

impl std::hash::Hash for Phrase {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.canonical_key().hash(state)
    }
}

#[derive(Debug, Clone)]
struct Span {
    kind: ChunkType,
    start: usize,
    end: usize,
}

fn chunk_spans(s: &ChunkedSentence) -> Vec<Span> {
    let mut spans: Vec<Span> = Vec::new();
    let mut open = false;
    for (i, label) in s.tags.iter().enumerate() {
        match label {
            ChunkLabel::Begin(kind) => {
                spans.push(Span {
                    kind: kind.clone(),
                    start: i,
                    end: i + 1,
                });
                open = true;
            }
            ChunkLabel::Inside(_) if open => {
                if let Some(last) = spans.last_mut() {
                    last.end = i + 1;
                }
            }
            // IOB violations are rejected at construction
            ChunkLabel::Inside(_) => {}
            ChunkLabel::Outside => open = false,
        }
    }
    spans
}

/// Merges each run of contiguous ADVP spans into the VP directly after it,
/// or failing that the VP directly before it. Unattached runs are dropped.
fn merge_adverbs(spans: Vec<Span>) -> Vec<Span> {
    let mut out: Vec<Span> = Vec::with_capacity(spans.len());
    let mut i = 0;
    while i < spans.len() {
        if spans[i].kind != ChunkType::ADVP {
            out.push(spans[i].clone());
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < spans.len()
            && spans[j + 1].kind == ChunkType::ADVP
            && spans[j + 1].start == spans[j].end
        {
            j += 1;
        }
        let (run_start, run_end) = (spans[i].start, spans[j].end);
        match spans.get(j + 1) {
            Some(next) if next.kind == ChunkType::VP && next.start == run_end => {
                out.push(Span {
                    kind: ChunkType::VP,
                    start: run_start,
                    end: next.end,
                });
                i = j + 2;
                continue;
            }
            _ => {
                if let Some(prev) = out.last_mut() {
                    if prev.kind == ChunkType::VP && prev.end == run_start {
                        prev.end = run_end;
                    }
                }
            }
        }
        i = j + 1;
    }
    out
}

/// Splits a sentence into its NP/VP/PP phrases in sentence order.
pub fn extract_phrases(s: &ChunkedSentence) -> Vec<Phrase> {
    merge_adverbs(chunk_spans(s))
        .into_iter()
        .filter_map(|span| {
            let tag = span.kind.phrase_tag()?;
            Some(Phrase {
                words: s.tokens[span.start..span.end].to_vec(),
                tag,
            })
        })
        .collect()
}

/// Phrase index into a [`PhraseVocabulary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhraseId(pub u32);

impl PhraseId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for PhraseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-type phrase counts, as in a "phrases per type" summary table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeTotals {
    pub np: usize,
    pub vp: usize,
    pub pp: usize,
    pub total: usize,
}

/// Frequency-thresholded phrase set with dense ids.
///
/// Ids are assigned by (tag, canonical key) order, so they depend only on
/// which phrases pass the threshold, not on corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseVocabulary {
    phrases: Vec<Phrase>,
    counts: Vec<u64>,
    index: HashMap<String, PhraseId>,
    threshold: u64,
}

#[derive(Serialize, Deserialize)]
struct VocabularyEntry {
    tag: PhraseTag,
    words: Vec<String>,
    count: u64,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    threshold: u64,
    totals: TypeTotals,
    phrases: Vec<VocabularyEntry>,
}

impl PhraseVocabulary {
    fn from_counted(mut entries: Vec<(Phrase, u64)>, threshold: u64) -> PhraseVocabulary {
        entries.sort_by(|a, b| {
            a.0.tag
                .cmp(&b.0.tag)
                .then_with(|| a.0.canonical_key().cmp(&b.0.canonical_key()))
        });
        let mut index = HashMap::with_capacity(entries.len());
        let mut phrases = Vec::with_capacity(entries.len());
        let mut counts = Vec::with_capacity(entries.len());
        for (i, (phrase, count)) in entries.into_iter().enumerate() {
            index.insert(phrase.canonical_key(), PhraseId(i as u32));
            phrases.push(phrase);
            counts.push(count);
        }
        PhraseVocabulary {
            phrases,
            counts,
            index,
            threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    pub fn phrase(&self, id: PhraseId) -> &Phrase {
        &self.phrases[id.index()]
    }

    pub fn get(&self, id: PhraseId) -> Option<&Phrase> {
        self.phrases.get(id.index())
    }

    pub fn count(&self, id: PhraseId) -> u64 {
        self.counts[id.index()]
    }

    pub fn tag(&self, id: PhraseId) -> PhraseTag {
        self.phrases[id.index()].tag
    }

    pub fn lookup(&self, phrase: &Phrase) -> Option<PhraseId> {
        self.index.get(&phrase.canonical_key()).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = PhraseId> {
        (0..self.phrases.len() as u32).map(PhraseId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (PhraseId, &Phrase)> {
        self.phrases
            .iter()
            .enumerate()
            .map(|(i, p)| (PhraseId(i as u32), p))
    }

    pub fn totals(&self) -> TypeTotals {
        let mut t = TypeTotals::default();
        for p in &self.phrases {
            match p.tag {
                PhraseTag::NP => t.np += 1,
                PhraseTag::VP => t.vp += 1,
                PhraseTag::PP => t.pp += 1,
            }
        }
        t.total = self.phrases.len();
        t
    }

    /// SHA-256 over the ordered phrase list; binds models to this vocabulary.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for p in &self.phrases {
            hasher.update(p.canonical_key().as_bytes());
            hasher.update(b"\n");
        }
        hasher.finalize().into()
    }

    /// Phrase ids of one sentence, with out-of-vocabulary phrases removed.
    pub fn sentence_ids(&self, s: &ChunkedSentence) -> Vec<PhraseId> {
        extract_phrases(s)
            .iter()
            .filter_map(|p| self.lookup(p))
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        let file = VocabularyFile {
            threshold: self.threshold,
            totals: self.totals(),
            phrases: self
                .phrases
                .iter()
                .zip(&self.counts)
                .map(|(p, &count)| VocabularyEntry {
                    tag: p.tag,
                    words: p.words.clone(),
                    count,
                })
                .collect(),
        };
        serde_json::to_value(file).expect("vocabulary serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<PhraseVocabulary, CorpusError> {
        let file: VocabularyFile =
            serde_json::from_value(value).map_err(|e| CorpusError::Vocabulary(e.to_string()))?;
        let mut seen = BTreeSet::new();
        let mut entries = Vec::with_capacity(file.phrases.len());
        for e in file.phrases {
            if e.words.is_empty() {
                return Err(CorpusError::Vocabulary("phrase with no words".into()));
            }
            if e.count < file.threshold {
                return Err(CorpusError::Vocabulary(format!(
                    "phrase {:?} has count {} below threshold {}",
                    e.words.join(" "),
                    e.count,
                    file.threshold
                )));
            }
            let phrase = Phrase::new(e.tag, &e.words);
            if !seen.insert(phrase.canonical_key()) {
                return Err(CorpusError::Vocabulary(format!(
                    "duplicate phrase {:?}",
                    phrase.canonical_key()
                )));
            }
            entries.push((phrase, e.count));
        }
        Ok(PhraseVocabulary::from_counted(entries, file.threshold))
    }
}

/// Counts phrase occurrences over the corpus and keeps those seen at least
/// `threshold` times.
pub fn build_vocabulary(
    corpus: &[ChunkedSentence],
    threshold: u64,
) -> Result<PhraseVocabulary, CorpusError> {
    if threshold == 0 {
        return Err(CorpusError::Vocabulary(
            "threshold must be at least 1".into(),
        ));
    }
    let mut counts: HashMap<Phrase, u64> = HashMap::new();
    for s in corpus {
        for p in extract_phrases(s) {
            *counts.entry(p).or_insert(0) += 1;
        }
    }
    let kept = counts
        .into_iter()
        .filter(|(_, c)| *c >= threshold)
        .collect();
    Ok(PhraseVocabulary::from_counted(kept, threshold))
}

/// One sentence structure (tag pattern) with its rank statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceStructure {
    pub pattern: Vec<PhraseTag>,
    pub count: u64,
    pub frequency: f64,
    pub cumulative: f64,
}

impl SentenceStructure {
    pub fn pattern_string(&self) -> String {
        self.pattern
            .iter()
            .map(|t| t.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntaxStats {
    pub sentences: usize,
    pub terminated_sentences: usize,
    /// `np_histogram[k]` = number of sentences with exactly k noun phrases.
    pub np_histogram: Vec<u64>,
    pub vp_histogram: Vec<u64>,
    pub pp_histogram: Vec<u64>,
    /// Sorted by descending count, then pattern. Sentences without any
    /// phrase have no structure and are left out.
    pub structures: Vec<SentenceStructure>,
}

fn bump(hist: &mut Vec<u64>, k: usize) {
    if hist.len() <= k {
        hist.resize(k + 1, 0);
    }
    hist[k] += 1;
}

pub fn syntax_stats(corpus: &[ChunkedSentence]) -> SyntaxStats {
    let mut np = Vec::new();
    let mut vp = Vec::new();
    let mut pp = Vec::new();
    let mut patterns: BTreeMap<Vec<PhraseTag>, u64> = BTreeMap::new();
    let mut terminated = 0;
    for s in corpus {
        let phrases = extract_phrases(s);
        let count_of = |tag| phrases.iter().filter(|p| p.tag == tag).count();
        bump(&mut np, count_of(PhraseTag::NP));
        bump(&mut vp, count_of(PhraseTag::VP));
        bump(&mut pp, count_of(PhraseTag::PP));
        if s.ends_with_period() {
            terminated += 1;
        }
        if !phrases.is_empty() {
            *patterns
                .entry(phrases.iter().map(|p| p.tag).collect())
                .or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(Vec<PhraseTag>, u64)> = patterns.into_iter().collect();
    // BTreeMap order makes the tie-break on pattern stable
    ranked.sort_by_key(|r| std::cmp::Reverse(r.1));
    let total: u64 = ranked.iter().map(|(_, c)| c).sum();
    let mut running = 0u64;
    let structures = ranked
        .into_iter()
        .map(|(pattern, count)| {
            running += count;
            SentenceStructure {
                pattern,
                count,
                frequency: count as f64 / total as f64,
                cumulative: running as f64 / total as f64,
            }
        })
        .collect();
    SyntaxStats {
        sentences: corpus.len(),
        terminated_sentences: terminated,
        np_histogram: np,
        vp_histogram: vp,
        pp_histogram: pp,
        structures,
    }
}

/// Union of the in-vocabulary phrases over all sentences of one image.
pub fn ground_truth_phrases(
    image_id: &str,
    corpus: &[ChunkedSentence],
    vocab: &PhraseVocabulary,
) -> Result<BTreeSet<PhraseId>, CorpusError> {
    let mut found = false;
    let mut ids = BTreeSet::new();
    for s in corpus.iter().filter(|s| s.image_id == image_id) {
        found = true;
        ids.extend(vocab.sentence_ids(s));
    }
    if found {
        Ok(ids)
    } else {
        Err(CorpusError::UnknownImage(image_id.to_string()))
    }
}

/// [`ground_truth_phrases`] for every image in the corpus at once.
pub fn ground_truth_by_image(
    corpus: &[ChunkedSentence],
    vocab: &PhraseVocabulary,
) -> BTreeMap<String, BTreeSet<PhraseId>> {
    let mut out: BTreeMap<String, BTreeSet<PhraseId>> = BTreeMap::new();
    for s in corpus {
        out.entry(s.image_id.clone())
            .or_default()
            .extend(vocab.sentence_ids(s));
    }
    out
}

/// Caption texts grouped per image, in corpus order.
pub fn references_by_image(corpus: &[ChunkedSentence]) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for s in corpus {
        out.entry(s.image_id.clone()).or_default().push(s.text());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sentence(tokens: &[&str], tags: &[&str]) -> ChunkedSentence {
        ChunkedSentence::new(
            "img",
            "s",
            tokens.iter().map(|t| t.to_string()).collect(),
            tags,
        )
        .unwrap()
    }

    fn texts(phrases: &[Phrase]) -> Vec<String> {
        phrases
            .iter()
            .map(|p| format!("{} {}", p.tag, p.text()))
            .collect()
    }

    #[test]
    fn parses_one_record() {
        let src = r#"{"image_id":"1","sentence_id":"1a","tokens":["A","Man","."],"tags":["B-NP","I-NP","O"]}"#;
        let out = parse_captions(src.as_bytes()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].tokens, vec!["a", "man", "."]);
        assert_eq!(out[0].tokens.len(), out[0].tags.len());
    }

    #[test]
    fn length_mismatch_names_line() {
        let src = concat!(
            r#"{"image_id":"1","sentence_id":"a","tokens":["a"],"tags":["B-NP"]}"#,
            "\n",
            r#"{"image_id":"1","sentence_id":"b","tokens":["a","b","c","d","e"],"tags":["B-NP","I-NP","O","O"]}"#
        );
        match parse_captions(src.as_bytes()) {
            Err(CorpusError::LengthMismatch { line, tokens, tags }) => {
                assert_eq!((line, tokens, tags), (2, 5, 4));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        assert!(parse_captions("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_iob() {
        let src = r#"{"image_id":"1","sentence_id":"a","tokens":["a","b"],"tags":["B-NP","I-VP"]}"#;
        assert!(matches!(
            parse_captions(src.as_bytes()),
            Err(CorpusError::IobViolation {
                line: 1,
                position: 1,
                ..
            })
        ));
        let src = r#"{"image_id":"1","sentence_id":"a","tokens":["a"],"tags":["I-NP"]}"#;
        assert!(matches!(
            parse_captions(src.as_bytes()),
            Err(CorpusError::IobViolation { .. })
        ));
        let src = r#"{"image_id":"1","sentence_id":"a","tokens":["a"],"tags":["X-NP"]}"#;
        assert!(matches!(
            parse_captions(src.as_bytes()),
            Err(CorpusError::InvalidTag { .. })
        ));
        assert!(matches!(
            parse_captions("{not json".as_bytes()),
            Err(CorpusError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn extracts_skateboard_sentence() {
        let s = sentence(
            &[
                "a",
                "man",
                "riding",
                "a",
                "skateboard",
                "up",
                "a",
                "wooden",
                "ramp",
                ".",
            ],
            &[
                "B-NP", "I-NP", "B-VP", "B-NP", "I-NP", "B-PP", "B-NP", "I-NP", "I-NP", "O",
            ],
        );
        assert_eq!(
            texts(&extract_phrases(&s)),
            vec![
                "NP a man",
                "VP riding",
                "NP a skateboard",
                "PP up",
                "NP a wooden ramp"
            ]
        );
    }

    #[test]
    fn adverb_merges_into_following_vp() {
        let s = sentence(&["quickly", "runs"], &["B-ADVP", "B-VP"]);
        assert_eq!(texts(&extract_phrases(&s)), vec!["VP quickly runs"]);
    }

    #[test]
    fn adverb_merges_into_preceding_vp() {
        let s = sentence(
            &["a", "dog", "runs", "quickly", "."],
            &["B-NP", "I-NP", "B-VP", "B-ADVP", "O"],
        );
        assert_eq!(
            texts(&extract_phrases(&s)),
            vec!["NP a dog", "VP runs quickly"]
        );
    }

    #[test]
    fn adverb_between_vps_prefers_following() {
        let s = sentence(&["sits", "then", "runs"], &["B-VP", "B-ADVP", "B-VP"]);
        assert_eq!(texts(&extract_phrases(&s)), vec!["VP sits", "VP then runs"]);
    }

    #[test]
    fn adverb_run_merges_whole() {
        let s = sentence(&["runs", "very", "fast"], &["B-VP", "B-ADVP", "B-ADVP"]);
        assert_eq!(texts(&extract_phrases(&s)), vec!["VP runs very fast"]);
    }

    #[test]
    fn isolated_adverb_and_other_chunks_dropped() {
        let s = sentence(
            &["outside", ",", "a", "dog", "that", "is", "happy"],
            &["B-ADVP", "O", "B-NP", "I-NP", "B-SBAR", "B-VP", "B-ADJP"],
        );
        assert_eq!(texts(&extract_phrases(&s)), vec!["NP a dog", "VP is"]);
        // adverb separated from the VP by an O token is not adjacent
        let s = sentence(&["runs", ",", "quickly"], &["B-VP", "O", "B-ADVP"]);
        assert_eq!(texts(&extract_phrases(&s)), vec!["VP runs"]);
    }

    #[test]
    fn all_outside_is_empty() {
        let s = sentence(&["hello", "."], &["O", "O"]);
        assert!(extract_phrases(&s).is_empty());
    }

    fn repeated(phrase_tokens: &[(&[&str], &[&str])], times: &[usize]) -> Vec<ChunkedSentence> {
        let mut out = Vec::new();
        for ((tokens, tags), &n) in phrase_tokens.iter().zip(times) {
            for _ in 0..n {
                out.push(sentence(tokens, tags));
            }
        }
        out
    }

    #[test]
    fn threshold_boundary() {
        let corpus = repeated(
            &[
                (&["a", "dog"], &["B-NP", "I-NP"]),
                (&["a", "cat"], &["B-NP", "I-NP"]),
            ],
            &[10, 9],
        );
        let vocab = build_vocabulary(&corpus, 10).unwrap();
        assert_eq!(vocab.len(), 1);
        assert!(vocab
            .lookup(&Phrase::new(PhraseTag::NP, &["a", "dog"]))
            .is_some());
        assert!(vocab
            .lookup(&Phrase::new(PhraseTag::NP, &["a", "cat"]))
            .is_none());
        let all = build_vocabulary(&corpus, 1).unwrap();
        assert_eq!(all.len(), 2);
        assert!(build_vocabulary(&[], 10).unwrap().is_empty());
        assert!(build_vocabulary(&corpus, 0).is_err());
    }

    #[test]
    fn totals_and_json_round_trip() {
        let corpus = vec![
            sentence(
                &["a", "dog", "runs", "on", "grass"],
                &["B-NP", "I-NP", "B-VP", "B-PP", "B-NP"],
            ),
            sentence(&["a", "dog", "sits"], &["B-NP", "I-NP", "B-VP"]),
        ];
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        assert_eq!(
            vocab.totals(),
            TypeTotals {
                np: 2,
                vp: 2,
                pp: 1,
                total: 5
            }
        );
        let back = PhraseVocabulary::from_json(vocab.to_json()).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.fingerprint(), vocab.fingerprint());
    }

    #[test]
    fn stats_ranked_structures() {
        let nvn = (
            &["a", "dog", "eats", "food"][..],
            &["B-NP", "I-NP", "B-VP", "B-NP"][..],
        );
        let npn = (
            &["a", "dog", "in", "water"][..],
            &["B-NP", "I-NP", "B-PP", "B-NP"][..],
        );
        let corpus = repeated(&[nvn, npn], &[2, 1]);
        let stats = syntax_stats(&corpus);
        assert_eq!(stats.structures[0].pattern_string(), "NP VP NP");
        assert!((stats.structures[0].frequency - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(stats.structures[1].cumulative, 1.0);
        assert_eq!(stats.np_histogram, vec![0, 0, 3]);
        assert_eq!(stats.vp_histogram, vec![1, 2]);

        let single = syntax_stats(&corpus[..1]);
        assert_eq!(single.structures.len(), 1);
        assert_eq!(single.structures[0].frequency, 1.0);

        let empty = syntax_stats(&[]);
        assert!(empty.np_histogram.is_empty() && empty.structures.is_empty());
    }

    #[test]
    fn ground_truth_union() {
        let mut a = sentence(&["a", "man", "runs"], &["B-NP", "I-NP", "B-VP"]);
        let mut b = sentence(
            &["a", "man", "on", "grass"],
            &["B-NP", "I-NP", "B-PP", "B-NP"],
        );
        let mut other = sentence(&["a", "cat"], &["B-NP", "I-NP"]);
        a.image_id = "x".into();
        b.image_id = "x".into();
        other.image_id = "y".into();
        let corpus = vec![a, b, other];
        let vocab = build_vocabulary(&corpus, 1).unwrap();
        let gt = ground_truth_phrases("x", &corpus, &vocab).unwrap();
        assert_eq!(gt.len(), 4);
        assert!(matches!(
            ground_truth_phrases("nope", &corpus, &vocab),
            Err(CorpusError::UnknownImage(_))
        ));
        // out-of-vocabulary phrases contribute nothing
        let strict = build_vocabulary(&corpus, 2).unwrap();
        let gt = ground_truth_phrases("y", &corpus, &strict).unwrap();
        assert!(gt.is_empty());
        assert_eq!(ground_truth_by_image(&corpus, &vocab)["x"].len(), 4);
    }

    fn arb_sentence() -> impl Strategy<Value = ChunkedSentence> {
        let kinds = prop::sample::select(vec!["NP", "VP", "PP", "ADVP", "O", "SBAR"]);
        prop::collection::vec((kinds, 1usize..4), 0..8).prop_map(|chunks| {
            let mut tokens = Vec::new();
            let mut tags = Vec::new();
            for (ci, (kind, len)) in chunks.into_iter().enumerate() {
                for k in 0..len {
                    tokens.push(format!("w{ci}_{k}"));
                    tags.push(if kind == "O" {
                        "O".to_string()
                    } else if k == 0 {
                        format!("B-{kind}")
                    } else {
                        format!("I-{kind}")
                    });
                }
            }
            let tag_refs: Vec<&str> = tags.iter().map(|s| s.as_str()).collect();
            ChunkedSentence::new("i", "s", tokens, &tag_refs).unwrap()
        })
    }

    proptest! {
        #[test]
        fn phrases_are_an_ordered_subsequence(s in arb_sentence()) {
            let words: Vec<String> = extract_phrases(&s).into_iter().flat_map(|p| p.words).collect();
            // every phrase word appears in the sentence, in order
            let mut it = s.tokens.iter();
            for w in &words {
                prop_assert!(it.any(|t| t == w));
            }
        }

        #[test]
        fn higher_threshold_is_subset(corpus in prop::collection::vec(arb_sentence(), 0..12), t1 in 1u64..4, extra in 0u64..3) {
            let low = build_vocabulary(&corpus, t1).unwrap();
            let high = build_vocabulary(&corpus, t1 + extra).unwrap();
            for (_, p) in high.iter() {
                prop_assert!(low.lookup(p).is_some());
            }
        }

        #[test]
        fn cumulative_is_monotone(corpus in prop::collection::vec(arb_sentence(), 1..12)) {
            let stats = syntax_stats(&corpus);
            let mut prev = 0.0;
            for s in &stats.structures {
                prop_assert!(s.cumulative >= prev);
                prev = s.cumulative;
            }
            if !stats.structures.is_empty() {
                prop_assert!((prev - 1.0).abs() <= 1e-12);
            }
        }
    }
}
