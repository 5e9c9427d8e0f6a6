//! Pre-trained word vectors and phrase vectors composed by averaging.

use std::collections::HashMap;
use std::io::BufRead;

use rand::Rng;
use thiserror::Error;

use crate::corpus::{Phrase, PhraseId, PhraseVocabulary};
use crate::matrix::Matrix;
use crate::rng::{stream_rng, Stream};

/// Half-width of the uniform range used for phrases with no known word.
pub const FALLBACK_INIT_RANGE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding file has no entries")]
    NoEntries,
    #[error("line {line}: expected {expected} values, found {found}")]
    Dimension {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate word {word:?}")]
    DuplicateWord { line: usize, word: String },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    entries: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.entries.get(word).map(|v| v.as_slice())
    }

    pub fn from_entries<I, S>(dim: usize, entries: I) -> Result<EmbeddingTable, EmbeddingError>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut map = HashMap::new();
        for (i, (word, v)) in entries.into_iter().enumerate() {
            let word = word.into();
            if v.len() != dim {
                return Err(EmbeddingError::Dimension {
                    line: i + 1,
                    expected: dim,
                    found: v.len(),
                });
            }
            if map.insert(word.clone(), v).is_some() {
                return Err(EmbeddingError::DuplicateWord { line: i + 1, word });
            }
        }
        if map.is_empty() {
            return Err(EmbeddingError::NoEntries);
        }
        Ok(EmbeddingTable { dim, entries: map })
    }
}

/// Reads `word v1 v2 ... vm` lines; `m` is fixed by the first line.
pub fn load_embeddings<R: BufRead>(source: R) -> Result<EmbeddingTable, EmbeddingError> {
    let mut dim = None;
    let mut entries = HashMap::new();
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let word = fields
            .next()
            .expect("nonblank line has a field")
            .to_string();
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| EmbeddingError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(EmbeddingError::Malformed {
                line: line_no,
                message: format!("non-finite value {bad}"),
            });
        }
        let expected = *dim.get_or_insert(values.len());
        if expected == 0 {
            return Err(EmbeddingError::Malformed {
                line: line_no,
                message: "word without a vector".into(),
            });
        }
        if values.len() != expected {
            return Err(EmbeddingError::Dimension {
                line: line_no,
                expected,
                found: values.len(),
            });
        }
        if entries.contains_key(&word) {
            return Err(EmbeddingError::DuplicateWord {
                line: line_no,
                word,
            });
        }
        entries.insert(word, values);
    }
    match dim {
        Some(dim) => Ok(EmbeddingTable { dim, entries }),
        None => Err(EmbeddingError::NoEntries),
    }
}

/// Mean of the vectors of the phrase's words that are in the table.
/// `None` when no word is covered.
pub fn phrase_vector(phrase: &Phrase, table: &EmbeddingTable) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; table.dim()];
    let mut covered = 0usize;
    for v in phrase.words.iter().filter_map(|w| table.get(w)) {
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
        covered += 1;
    }
    if covered == 0 {
        return None;
    }
    let k = covered as f64;
    sum.iter_mut().for_each(|s| *s /= k);
    Some(sum)
}

/// Initial phrase matrix: one averaged column per vocabulary entry.
#[derive(Debug, Clone)]
pub struct PhraseMatrix {
    pub matrix: Matrix,
    /// Phrases with no covered word; their columns are seeded random.
    pub fallback: Vec<PhraseId>,
}

pub fn init_phrase_matrix(
    vocab: &PhraseVocabulary,
    table: &EmbeddingTable,
    seed: u64,
) -> PhraseMatrix {
    let mut rng = stream_rng(seed, Stream::PhraseInit);
    let mut matrix = Matrix::zeros(table.dim(), vocab.len());
    let mut fallback = Vec::new();
    for (id, phrase) in vocab.iter() {
        let column = matrix.column_mut(id.index());
        match phrase_vector(phrase, table) {
            Some(v) => column.copy_from_slice(&v),
            None => {
                for x in column.iter_mut() {
                    *x = rng.gen_range(-FALLBACK_INIT_RANGE..FALLBACK_INIT_RANGE);
                }
                fallback.push(id);
            }
        }
    }
    PhraseMatrix { matrix, fallback }
}
