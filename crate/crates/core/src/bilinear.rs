//! Low-rank bilinear image/phrase metric `f(c, i) = u_c^T V z_i`.
//!
//! `U` (m x |C|) holds one column per phrase, `V` (m x n) projects image
//! features into the phrase space. Training minimizes the negative-sampling
//! logistic loss with per-example SGD.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Read, Write};

use rand::seq::index;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PhraseId;
use crate::matrix::{dot, norm, Matrix};
use crate::rng::{stream_rng, Stream};

pub const DEFAULT_LEARNING_RATE: f64 = 0.00025;
pub const DEFAULT_NEGATIVES: usize = 15;
pub const DEFAULT_EPOCHS: usize = 10;

const MODEL_MAGIC: &[u8; 8] = b"PHRCAPBM";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BilinearError {
    #[error("feature vector has length {found}, model expects {expected}")]
    FeatureDimension { expected: usize, found: usize },
    #[error("phrase matrix has {phrase_rows} rows but projection has {projection_rows}")]
    RankMismatch {
        phrase_rows: usize,
        projection_rows: usize,
    },
    #[error("phrase id {0} out of range")]
    PhraseOutOfRange(PhraseId),
    #[error("no negative phrases given")]
    NoNegatives,
    #[error("positive phrase {0} also listed as a negative")]
    PositiveAmongNegatives(PhraseId),
    #[error("image {0:?} has no features")]
    MissingFeatures(String),
    #[error("image {0:?} has no positive phrases")]
    NoPositives(String),
    #[error("image {0:?} leaves no phrase to sample negatives from")]
    NoNegativeCandidates(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("k must be positive and below the vocabulary size ({vocab}), got {k}")]
    InvalidNeighborCount { k: usize, vocab: usize },
    #[error("non-finite model parameter")]
    NonFinite,
    #[error("not a model file (bad magic bytes)")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("model file is truncated")]
    Truncated,
    #[error("model file has trailing bytes")]
    TrailingData,
    #[error("model was trained for a different phrase vocabulary")]
    FingerprintMismatch,
    #[error("feature file line {line}: {message}")]
    MalformedFeatures { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fixed image descriptors keyed by image id, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> FeatureStore {
        FeatureStore {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        image_id: impl Into<String>,
        z: Vec<f64>,
    ) -> Result<(), BilinearError> {
        let image_id = image_id.into();
        if z.len() != self.dim {
            return Err(BilinearError::FeatureDimension {
                expected: self.dim,
                found: z.len(),
            });
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(BilinearError::NonFinite);
        }
        match self.index.get(&image_id) {
            Some(&i) => self.vectors[i] = z,
            None => {
                self.index.insert(image_id.clone(), self.ids.len());
                self.ids.push(image_id);
                self.vectors.push(z);
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&[f64]> {
        self.index
            .get(image_id)
            .map(|&i| self.vectors[i].as_slice())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn write<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        writeln!(sink, "n {}", self.dim)?;
        for (id, z) in self.ids.iter().zip(&self.vectors) {
            write!(sink, "{id}")?;
            for v in z {
                write!(sink, " {v}")?;
            }
            writeln!(sink)?;
        }
        Ok(())
    }
}

/// Reads a feature file: header `n <dim>`, then `image_id v1 ... vn` lines.
pub fn load_features<R: BufRead>(source: R) -> Result<FeatureStore, BilinearError> {
    let malformed =
        |line: usize, message: String| BilinearError::MalformedFeatures { line, message };
    let mut store: Option<FeatureStore> = None;
    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let Some(store) = store.as_mut() else {
            let dim = match (fields.next(), fields.next(), fields.next()) {
                (Some("n"), Some(d), None) => d
                    .parse::<usize>()
                    .map_err(|e| malformed(line_no, format!("bad dimension: {e}")))?,
                _ => {
                    return Err(malformed(
                        line_no,
                        "expected header \"n <dimension>\"".into(),
                    ))
                }
            };
            if dim == 0 {
                return Err(malformed(line_no, "dimension must be positive".into()));
            }
            store = Some(FeatureStore::new(dim));
            continue;
        };
        let id = fields.next().expect("nonblank line has a field");
        if store.index.contains_key(id) {
            return Err(malformed(line_no, format!("duplicate image id {id:?}")));
        }
        let z = fields
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| malformed(line_no, e.to_string()))?;
        store
            .insert(id, z)
            .map_err(|e| malformed(line_no, e.to_string()))?;
    }
    store.ok_or_else(|| malformed(1, "missing header".into()))
}

/// Trainable parameters plus the fingerprint of the vocabulary they index.
#[derive(Debug, Clone, PartialEq)]
pub struct BilinearModel {
    phrases: Matrix,
    projection: Matrix,
    fingerprint: [u8; 32],
}

impl BilinearModel {
    pub fn new(
        phrases: Matrix,
        projection: Matrix,
        fingerprint: [u8; 32],
    ) -> Result<BilinearModel, BilinearError> {
        if phrases.rows() != projection.rows() {
            return Err(BilinearError::RankMismatch {
                phrase_rows: phrases.rows(),
                projection_rows: projection.rows(),
            });
        }
        if !phrases.all_finite() || !projection.all_finite() {
            return Err(BilinearError::NonFinite);
        }
        Ok(BilinearModel {
            phrases,
            projection,
            fingerprint,
        })
    }

    /// Keeps the given phrase matrix and draws `V` from
    /// uniform(-1/sqrt(n), 1/sqrt(n)).
    pub fn with_random_projection(
        phrases: Matrix,
        feature_dim: usize,
        fingerprint: [u8; 32],
        seed: u64,
    ) -> Result<BilinearModel, BilinearError> {
        let mut rng = stream_rng(seed, Stream::ProjectionInit);
        let bound = 1.0 / (feature_dim as f64).sqrt();
        let mut projection = Matrix::zeros(phrases.rows(), feature_dim);
        for v in projection.as_mut_slice() {
            *v = rng.gen_range(-bound..bound);
        }
        BilinearModel::new(phrases, projection, fingerprint)
    }

    /// Embedding dimension m.
    pub fn rank(&self) -> usize {
        self.phrases.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.projection.cols()
    }

    pub fn num_phrases(&self) -> usize {
        self.phrases.cols()
    }

    pub fn phrases(&self) -> &Matrix {
        &self.phrases
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    pub fn check_fingerprint(&self, expected: &[u8; 32]) -> Result<(), BilinearError> {
        if &self.fingerprint == expected {
            Ok(())
        } else {
            Err(BilinearError::FingerprintMismatch)
        }
    }

    fn check_phrase(&self, id: PhraseId) -> Result<(), BilinearError> {
        if id.index() < self.num_phrases() {
            Ok(())
        } else {
            Err(BilinearError::PhraseOutOfRange(id))
        }
    }

    /// `V z`, the image mapped into phrase space.
    pub fn project(&self, z: &[f64]) -> Result<Vec<f64>, BilinearError> {
        if z.len() != self.feature_dim() {
            return Err(BilinearError::FeatureDimension {
                expected: self.feature_dim(),
                found: z.len(),
            });
        }
        Ok(self.projection.mul_vec(z))
    }

    pub fn score(&self, phrase: PhraseId, z: &[f64]) -> Result<f64, BilinearError> {
        self.check_phrase(phrase)?;
        let w = self.project(z)?;
        Ok(dot(self.phrases.column(phrase.index()), &w))
    }

    /// Scores of every phrase for one image, indexed by phrase id.
    pub fn score_all(&self, z: &[f64]) -> Result<Vec<f64>, BilinearError> {
        let w = self.project(z)?;
        Ok((0..self.num_phrases())
            .map(|c| dot(self.phrases.column(c), &w))
            .collect())
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_example(
    model: &BilinearModel,
    positive: PhraseId,
    negatives: &[PhraseId],
) -> Result<(), BilinearError> {
    model.check_phrase(positive)?;
    if negatives.is_empty() {
        return Err(BilinearError::NoNegatives);
    }
    for &n in negatives {
        model.check_phrase(n)?;
        if n == positive {
            return Err(BilinearError::PositiveAmongNegatives(positive));
        }
    }
    Ok(())
}

fn loss_from_projection(
    model: &BilinearModel,
    w: &[f64],
    positive: PhraseId,
    negatives: &[PhraseId],
) -> f64 {
    let pos = dot(model.phrases.column(positive.index()), w);
    let mut loss = softplus(-pos);
    for n in negatives {
        loss += softplus(dot(model.phrases.column(n.index()), w));
    }
    loss
}

/// Logistic loss of one positive phrase against its sampled negatives.
pub fn example_loss(
    model: &BilinearModel,
    positive: PhraseId,
    negatives: &[PhraseId],
    z: &[f64],
) -> Result<f64, BilinearError> {
    check_example(model, positive, negatives)?;
    let w = model.project(z)?;
    Ok(loss_from_projection(model, &w, positive, negatives))
}

/// Gradient of [`example_loss`]. Only the touched columns of `U` appear.
#[derive(Debug, Clone, PartialEq)]
pub struct ExampleGradient {
    pub loss: f64,
    pub phrase_columns: BTreeMap<PhraseId, Vec<f64>>,
    pub projection: Matrix,
}

pub fn example_gradient(
    model: &BilinearModel,
    positive: PhraseId,
    negatives: &[PhraseId],
    z: &[f64],
) -> Result<ExampleGradient, BilinearError> {
    check_example(model, positive, negatives)?;
    let w = model.project(z)?;
    let m = model.rank();

    // dL/df for each term: sigma(f) - 1 for the positive, sigma(f) for negatives
    let mut coefficients: Vec<(PhraseId, f64)> = Vec::with_capacity(negatives.len() + 1);
    let pos_score = dot(model.phrases.column(positive.index()), &w);
    let mut loss = softplus(-pos_score);
    coefficients.push((positive, -sigmoid(-pos_score)));
    for &n in negatives {
        let s = dot(model.phrases.column(n.index()), &w);
        loss += softplus(s);
        coefficients.push((n, sigmoid(s)));
    }

    let mut phrase_columns: BTreeMap<PhraseId, Vec<f64>> = BTreeMap::new();
    let mut mixed = vec![0.0; m];
    for &(id, g) in &coefficients {
        let col = phrase_columns.entry(id).or_insert_with(|| vec![0.0; m]);
        for (c, wi) in col.iter_mut().zip(&w) {
            *c += g * wi;
        }
        for (a, ui) in mixed.iter_mut().zip(model.phrases.column(id.index())) {
            *a += g * ui;
        }
    }
    let mut projection = Matrix::zeros(m, model.feature_dim());
    for (j, &zj) in z.iter().enumerate() {
        for (v, a) in projection.column_mut(j).iter_mut().zip(&mixed) {
            *v = a * zj;
        }
    }
    Ok(ExampleGradient {
        loss,
        phrase_columns,
        projection,
    })
}

/// One SGD update on a single example. Returns the loss before the update.
pub fn sgd_step(
    model: &mut BilinearModel,
    positive: PhraseId,
    negatives: &[PhraseId],
    z: &[f64],
    learning_rate: f64,
) -> Result<f64, BilinearError> {
    let grad = example_gradient(model, positive, negatives, z)?;
    for (id, g) in &grad.phrase_columns {
        for (u, gi) in model.phrases.column_mut(id.index()).iter_mut().zip(g) {
            *u -= learning_rate * gi;
        }
    }
    for (v, g) in model
        .projection
        .as_mut_slice()
        .iter_mut()
        .zip(grad.projection.as_slice())
    {
        *v -= learning_rate * g;
    }
    Ok(grad.loss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub negatives_per_positive: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: DEFAULT_LEARNING_RATE,
            negatives_per_positive: DEFAULT_NEGATIVES,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), BilinearError> {
        // zero is allowed for the rate: it turns training into a dry run
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(BilinearError::InvalidConfig(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.negatives_per_positive == 0 {
            return Err(BilinearError::InvalidConfig(
                "negatives_per_positive must be positive".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(BilinearError::InvalidConfig(
                "epochs must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-example SGD over all (image, positive phrase) pairs.
///
/// Each epoch visits the pairs in a seeded shuffled order. For every step a
/// fresh set of `negatives_per_positive` distinct negatives is drawn
/// uniformly from the phrases not describing that image (all of them when
/// fewer remain). Returns the mean pre-update loss of each epoch.
pub fn train(
    model: &mut BilinearModel,
    examples: &BTreeMap<String, BTreeSet<PhraseId>>,
    features: &FeatureStore,
    config: &TrainConfig,
) -> Result<Vec<f64>, BilinearError> {
    config.validate()?;
    let vocab_size = model.num_phrases();
    let mut images: Vec<(&[f64], Vec<PhraseId>)> = Vec::with_capacity(examples.len());
    let mut pairs: Vec<(usize, PhraseId)> = Vec::new();
    for (image_id, positives) in examples {
        let z = features
            .get(image_id)
            .ok_or_else(|| BilinearError::MissingFeatures(image_id.clone()))?;
        if z.len() != model.feature_dim() {
            return Err(BilinearError::FeatureDimension {
                expected: model.feature_dim(),
                found: z.len(),
            });
        }
        if positives.is_empty() {
            return Err(BilinearError::NoPositives(image_id.clone()));
        }
        for &p in positives {
            model.check_phrase(p)?;
        }
        let complement: Vec<PhraseId> = (0..vocab_size as u32)
            .map(PhraseId)
            .filter(|id| !positives.contains(id))
            .collect();
        if complement.is_empty() {
            return Err(BilinearError::NoNegativeCandidates(image_id.clone()));
        }
        let slot = images.len();
        pairs.extend(positives.iter().map(|&p| (slot, p)));
        images.push((z, complement));
    }

    let mut rng = stream_rng(config.seed, Stream::Training);
    let mut trace = Vec::with_capacity(config.epochs);
    let mut negatives = Vec::with_capacity(config.negatives_per_positive);
    for _ in 0..config.epochs {
        pairs.shuffle(&mut rng);
        let mut total = 0.0;
        for &(slot, positive) in &pairs {
            let (z, complement) = &images[slot];
            let k = config.negatives_per_positive.min(complement.len());
            negatives.clear();
            negatives.extend(
                index::sample(&mut rng, complement.len(), k)
                    .into_iter()
                    .map(|i| complement[i]),
            );
            total += sgd_step(model, positive, &negatives, z, config.learning_rate)?;
        }
        trace.push(if pairs.is_empty() {
            0.0
        } else {
            total / pairs.len() as f64
        });
    }
    if !model.phrases.all_finite() || !model.projection.all_finite() {
        return Err(BilinearError::NonFinite);
    }
    Ok(trace)
}

/// The `k` phrases whose `U` columns are closest in cosine similarity,
/// excluding the query itself. Ties go to the lower id.
pub fn nearest_phrases(
    model: &BilinearModel,
    phrase: PhraseId,
    k: usize,
) -> Result<Vec<(PhraseId, f64)>, BilinearError> {
    model.check_phrase(phrase)?;
    let vocab = model.num_phrases();
    if k == 0 || k >= vocab {
        return Err(BilinearError::InvalidNeighborCount { k, vocab });
    }
    let query = model.phrases.column(phrase.index());
    let qn = norm(query);
    let mut sims: Vec<(PhraseId, f64)> = (0..vocab)
        .filter(|&c| c != phrase.index())
        .map(|c| {
            let col = model.phrases.column(c);
            let denom = qn * norm(col);
            let sim = if denom > 0.0 {
                dot(query, col) / denom
            } else {
                0.0
            };
            (PhraseId(c as u32), sim)
        })
        .collect();
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sims.truncate(k);
    Ok(sims)
}

/// Writes the versioned little-endian model file.
pub fn save_model<W: Write>(model: &BilinearModel, mut sink: W) -> Result<(), BilinearError> {
    sink.write_all(MODEL_MAGIC)?;
    sink.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
    for d in [model.rank(), model.feature_dim(), model.num_phrases()] {
        sink.write_all(&(d as u64).to_le_bytes())?;
    }
    sink.write_all(&model.fingerprint)?;
    for v in model
        .phrases
        .as_slice()
        .iter()
        .chain(model.projection.as_slice())
    {
        sink.write_all(&v.to_le_bytes())?;
    }
    sink.flush()?;
    Ok(())
}

fn read_exact_or_truncated<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<(), BilinearError> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => BilinearError::Truncated,
        _ => BilinearError::Io(e),
    })
}

fn read_u64<R: Read>(source: &mut R) -> Result<u64, BilinearError> {
    let mut b = [0u8; 8];
    read_exact_or_truncated(source, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_matrix<R: Read>(source: &mut R, rows: usize, cols: usize) -> Result<Matrix, BilinearError> {
    let len = rows.checked_mul(cols).ok_or(BilinearError::Truncated)?;
    let mut data = Vec::with_capacity(len.min(1 << 24));
    let mut b = [0u8; 8];
    for _ in 0..len {
        read_exact_or_truncated(source, &mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    Ok(Matrix::from_column_major(rows, cols, data))
}

/// Reads a model file. When `expected_fingerprint` is given, the model must
/// have been built for that vocabulary.
pub fn load_model<R: Read>(
    mut source: R,
    expected_fingerprint: Option<&[u8; 32]>,
) -> Result<BilinearModel, BilinearError> {
    let mut magic = [0u8; 8];
    read_exact_or_truncated(&mut source, &mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(BilinearError::BadMagic);
    }
    let mut version = [0u8; 4];
    read_exact_or_truncated(&mut source, &mut version)?;
    let version = u32::from_le_bytes(version);
    if version != MODEL_FORMAT_VERSION {
        return Err(BilinearError::UnsupportedVersion(version));
    }
    let m = read_u64(&mut source)? as usize;
    let n = read_u64(&mut source)? as usize;
    let c = read_u64(&mut source)? as usize;
    let mut fingerprint = [0u8; 32];
    read_exact_or_truncated(&mut source, &mut fingerprint)?;
    if let Some(expected) = expected_fingerprint {
        if &fingerprint != expected {
            return Err(BilinearError::FingerprintMismatch);
        }
    }
    let phrases = read_matrix(&mut source, m, c)?;
    let projection = read_matrix(&mut source, m, n)?;
    let mut rest = [0u8; 1];
    if source.read(&mut rest)? != 0 {
        return Err(BilinearError::TrailingData);
    }
    BilinearModel::new(phrases, projection, fingerprint)
}
