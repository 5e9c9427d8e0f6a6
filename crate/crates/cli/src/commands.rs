use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use phrasecap::bilinear::{self, load_features, load_model, save_model};
use phrasecap::corpus::{self, parse_captions, ChunkedSentence};
use phrasecap::embeddings::{init_phrase_matrix, load_embeddings};
use phrasecap::eval::{self, DEFAULT_MAX_NGRAM, HUMAN_AGREEMENT_MIN_REFERENCES};
use phrasecap::generator::{self, GeneratedSentence};
use phrasecap::langmodel::{self, sequences_from_corpus};
use phrasecap::{
    BilinearModel, BleuReport, FeatureStore, PhraseId, PhraseSelection, PhraseVocabulary,
    RecallReport, TrigramModel,
};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::{Cli, Command, CommonArgs};

/// Process exit status: 0 success, 1 per-item failure, 2 input error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success = 0,
    Partial = 1,
    InputError = 2,
}

impl From<Status> for ExitCode {
    fn from(s: Status) -> Self {
        ExitCode::from(s as u8)
    }
}

pub fn run(cli: Cli) -> Result<Status> {
    let config = resolve_config(&cli.common)?;
    let ctx = Ctx {
        config,
        out: cli.common.out.clone(),
        verbose: cli.common.verbose,
    };
    match cli.command {
        Command::Stats => ctx.stats(),
        Command::BuildVocab { threshold } => ctx.build_vocab(threshold),
        Command::Train => ctx.train(),
        Command::PredictPhrases { images } => ctx.predict_phrases(&images),
        Command::Generate { images } => ctx.generate(&images),
        Command::Evaluate {
            candidates,
            references,
            predictions,
        } => ctx.evaluate(candidates, references, predictions),
    }
}

fn resolve_config(args: &CommonArgs) -> Result<PipelineConfig> {
    let mut config = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let p = &mut config.paths;
    for (slot, flag) in [
        (&mut p.captions, &args.captions),
        (&mut p.embeddings, &args.embeddings),
        (&mut p.features, &args.features),
        (&mut p.model, &args.model),
        (&mut p.lm, &args.lm),
        (&mut p.vocab, &args.vocab),
    ] {
        if let Some(v) = flag {
            *slot = Some(v.clone());
        }
    }
    config.validate()?;
    Ok(config)
}

fn input_path<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    let path = path
        .as_deref()
        .ok_or_else(|| anyhow!("no {what} path configured"))?;
    if !path.is_file() {
        bail!("{what} file not found: {}", path.display());
    }
    Ok(path)
}

fn output_path<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| anyhow!("no {what} path configured"))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| {
        format!("cannot open {}", path.display())
    })?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("cannot create {}", path.display())
    })?))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(text.as_bytes())?;
            w.flush()?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn pretty(value: &impl Serialize) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn read_captions(path: &Path) -> Result<Vec<ChunkedSentence>> {
    parse_captions(open(path)?).with_context(|| format!("reading captions {}", path.display()))
}

fn read_vocab(path: &Path) -> Result<PhraseVocabulary> {
    let value: serde_json::Value = serde_json::from_reader(open(path)?)
        .with_context(|| format!("reading vocabulary {}", path.display()))?;
    PhraseVocabulary::from_json(value)
        .with_context(|| format!("reading vocabulary {}", path.display()))
}

fn read_features(path: &Path) -> Result<FeatureStore> {
    load_features(open(path)?).with_context(|| format!("reading features {}", path.display()))
}

fn read_lm(path: &Path) -> Result<TrigramModel> {
    let value: serde_json::Value = serde_json::from_reader(open(path)?)
        .with_context(|| format!("reading language model {}", path.display()))?;
    TrigramModel::from_json(value)
        .with_context(|| format!("reading language model {}", path.display()))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct PhraseInfo {
    id: PhraseId,
    tag: String,
    text: String,
    score: f64,
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    selection: Option<PhraseSelection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    phrases: Vec<PhraseInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct GenerationRecord {
    image_id: String,
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    phrases: Vec<PhraseId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    match_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ranking: Option<Vec<GeneratedSentence>>,
}

impl GenerationRecord {
    fn failed(image_id: &str, reason: String) -> GenerationRecord {
        GenerationRecord {
            image_id: image_id.to_string(),
            text: None,
            phrases: Vec::new(),
            log_prob: None,
            match_score: None,
            reason: Some(reason),
            ranking: None,
        }
    }
}

#[derive(Serialize)]
struct HumanAgreementBlock {
    report: Option<BleuReport>,
    images: usize,
    skipped: Vec<String>,
}

#[derive(Serialize)]
struct NoveltyBlock {
    rate: f64,
    generated: usize,
    in_training: usize,
}

#[derive(Serialize)]
struct EvaluationReport {
    recall: Option<RecallReport>,
    bleu: BleuReport,
    human_agreement: HumanAgreementBlock,
    novelty: NoveltyBlock,
}

#[derive(Serialize)]
struct TrainTrace {
    epochs: Vec<f64>,
    vocabulary_size: usize,
    training_images: usize,
    fallback_phrases: usize,
}

struct Ctx {
    config: PipelineConfig,
    out: Option<PathBuf>,
    verbose: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn image_ids(&self, requested: &[String], features: &FeatureStore) -> Vec<String> {
        if requested.is_empty() {
            features.ids().to_vec()
        } else {
            requested.to_vec()
        }
    }

    fn stats(&self) -> Result<Status> {
        let path = input_path(&self.config.paths.captions, "captions")?;
        let corpus = read_captions(path)?;
        let stats = corpus::syntax_stats(&corpus);
        self.log(format!(
            "{} sentences, {} structures",
            stats.sentences,
            stats.structures.len()
        ));
        write_text(self.out.as_deref(), &pretty(&stats)?)?;
        Ok(Status::Success)
    }

    fn build_vocab(&self, threshold: Option<u64>) -> Result<Status> {
        let path = input_path(&self.config.paths.captions, "captions")?;
        let corpus = read_captions(path)?;
        let threshold = threshold.unwrap_or(self.config.vocabulary.threshold);
        let vocab = corpus::build_vocabulary(&corpus, threshold)?;
        let t = vocab.totals();
        eprintln!("phrases occurring at least {threshold} times");
        eprintln!("  NP     {:>8}", t.np);
        eprintln!("  VP     {:>8}", t.vp);
        eprintln!("  PP     {:>8}", t.pp);
        eprintln!("  total  {:>8}", t.total);
        let target = self.out.as_deref().or(self.config.paths.vocab.as_deref());
        write_text(target, &pretty(&vocab.to_json())?)?;
        Ok(Status::Success)
    }

    fn train(&self) -> Result<Status> {
        let paths = &self.config.paths;
        let captions = input_path(&paths.captions, "captions")?;
        let embeddings = input_path(&paths.embeddings, "embeddings")?;
        let features = input_path(&paths.features, "features")?;
        let model_path = output_path(&paths.model, "model")?;
        let lm_path = output_path(&paths.lm, "language model")?;
        let vocab_path = output_path(&paths.vocab, "vocabulary")?;

        let corpus = read_captions(captions)?;
        let table = load_embeddings(open(embeddings)?)
            .with_context(|| format!("reading embeddings {}", embeddings.display()))?;
        let features = read_features(features)?;
        let vocab = corpus::build_vocabulary(&corpus, self.config.vocabulary.threshold)?;
        if vocab.is_empty() {
            bail!(
                "no phrase occurs at least {} times",
                self.config.vocabulary.threshold
            );
        }
        let fingerprint = vocab.fingerprint();
        let init = init_phrase_matrix(&vocab, &table, self.config.seed);
        self.log(format!(
            "vocabulary: {} phrases ({} without embedded words)",
            vocab.len(),
            init.fallback.len()
        ));
        let mut model = BilinearModel::with_random_projection(
            init.matrix,
            features.dim(),
            fingerprint,
            self.config.seed,
        )?;
        let examples: BTreeMap<_, _> = corpus::ground_truth_by_image(&corpus, &vocab)
            .into_iter()
            .filter(|(_, ids)| !ids.is_empty())
            .collect();
        let trace = bilinear::train(
            &mut model,
            &examples,
            &features,
            &self.config.train_config(),
        )?;
        for (i, loss) in trace.iter().enumerate() {
            self.log(format!("epoch {:>3}  loss {loss:.6}", i + 1));
        }
        let lm = langmodel::estimate(&sequences_from_corpus(&corpus, &vocab))?
            .with_fingerprint(fingerprint);

        let mut w = create(model_path)?;
        save_model(&model, &mut w)?;
        w.flush()?;
        write_text(Some(lm_path), &pretty(&lm.to_json())?)?;
        write_text(Some(vocab_path), &pretty(&vocab.to_json())?)?;
        let trace_path = self
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("{}.loss.json", model_path.display())));
        let record = TrainTrace {
            epochs: trace,
            vocabulary_size: vocab.len(),
            training_images: examples.len(),
            fallback_phrases: init.fallback.len(),
        };
        write_text(Some(&trace_path), &pretty(&record)?)?;
        Ok(Status::Success)
    }

    fn load_scoring(&self) -> Result<(PhraseVocabulary, BilinearModel, FeatureStore)> {
        let paths = &self.config.paths;
        let vocab = read_vocab(input_path(&paths.vocab, "vocabulary")?)?;
        let model_path = input_path(&paths.model, "model")?;
        let model = load_model(open(model_path)?, Some(&vocab.fingerprint()))
            .with_context(|| format!("reading model {}", model_path.display()))?;
        let features = read_features(input_path(&paths.features, "features")?)?;
        Ok((vocab, model, features))
    }

    fn predict_phrases(&self, requested: &[String]) -> Result<Status> {
        let (vocab, model, features) = self.load_scoring()?;
        let caps = self.config.caps();
        let mut lines = String::new();
        let ids = self.image_ids(requested, &features);
        let mut failures = 0;
        for image in &ids {
            let record = match features.get(image) {
                None => {
                    failures += 1;
                    PredictionRecord {
                        image_id: image.clone(),
                        selection: None,
                        phrases: Vec::new(),
                        error: Some("unknown image id".into()),
                    }
                }
                Some(z) => {
                    let selection = generator::predict_phrases(&model, &vocab, z, &caps)?;
                    let phrases = selection
                        .ids()
                        .map(|id| PhraseInfo {
                            id,
                            tag: vocab.tag(id).to_string(),
                            text: vocab.phrase(id).text(),
                            score: selection.scores[&id],
                        })
                        .collect();
                    PredictionRecord {
                        image_id: image.clone(),
                        selection: Some(selection),
                        phrases,
                        error: None,
                    }
                }
            };
            lines.push_str(&serde_json::to_string(&record)?);
            lines.push('\n');
        }
        write_text(self.out.as_deref(), &lines)?;
        Ok(item_status(ids.len(), failures))
    }

    fn generate(&self, requested: &[String]) -> Result<Status> {
        let (vocab, model, features) = self.load_scoring()?;
        let lm = read_lm(input_path(&self.config.paths.lm, "language model")?)?;
        lm.check_fingerprint(&vocab.fingerprint())?;
        let caps = self.config.caps();
        let ids = self.image_ids(requested, &features);
        let mut lines = String::new();
        let mut failures = 0;
        for image in &ids {
            let record = match features.get(image) {
                None => GenerationRecord::failed(image, "unknown image id".into()),
                Some(z) => {
                    let selection = generator::predict_phrases(&model, &vocab, z, &caps)?;
                    let candidates = generator::decode(&selection, &lm, &self.config.decode)?;
                    if candidates.is_empty() {
                        GenerationRecord::failed(
                            image,
                            "no sentence over the selected phrases satisfies the grammar and threshold".into(),
                        )
                    } else {
                        let ranking = generator::rerank(&model, z, &vocab, &candidates)?;
                        let best = &ranking[0];
                        self.log(format!(
                            "{image}: {} ({} candidates)",
                            best.text,
                            ranking.len()
                        ));
                        GenerationRecord {
                            image_id: image.clone(),
                            text: Some(best.text.clone()),
                            phrases: best.phrases.clone(),
                            log_prob: Some(best.log_prob),
                            match_score: Some(best.match_score),
                            reason: None,
                            ranking: self.verbose.then(|| ranking.clone()),
                        }
                    }
                }
            };
            if record.text.is_none() {
                failures += 1;
            }
            lines.push_str(&serde_json::to_string(&record)?);
            lines.push('\n');
        }
        write_text(self.out.as_deref(), &lines)?;
        Ok(item_status(ids.len(), failures))
    }

    fn evaluate(
        &self,
        candidates: Option<PathBuf>,
        references: Option<PathBuf>,
        predictions: Option<PathBuf>,
    ) -> Result<Status> {
        let references = references.or_else(|| self.config.paths.references.clone());
        let reference_corpus = read_captions(input_path(&references, "references")?)?;
        let candidates_path = input_path(&candidates, "candidates")?;
        let generated: Vec<GenerationRecord> = read_jsonl(candidates_path)?;
        let training = read_captions(input_path(&self.config.paths.captions, "captions")?)?;

        let refs_by_image = corpus::references_by_image(&reference_corpus);
        let mut cand_texts = Vec::new();
        let mut cand_refs = Vec::new();
        for record in &generated {
            let Some(text) = &record.text else { continue };
            let refs = refs_by_image
                .get(&record.image_id)
                .ok_or_else(|| anyhow!("no references for image {:?}", record.image_id))?;
            cand_texts.push(text.clone());
            cand_refs.push(refs.clone());
        }
        let bleu = eval::corpus_bleu(&cand_texts, &cand_refs, DEFAULT_MAX_NGRAM)?;

        let (eligible, skipped): (BTreeMap<_, _>, BTreeMap<_, _>) = refs_by_image
            .into_iter()
            .partition(|(_, texts)| texts.len() >= HUMAN_AGREEMENT_MIN_REFERENCES);
        let human = HumanAgreementBlock {
            report: if eligible.is_empty() {
                None
            } else {
                Some(eval::human_agreement(&eligible, DEFAULT_MAX_NGRAM)?)
            },
            images: eligible.len(),
            skipped: skipped.into_keys().collect(),
        };

        let training_texts: Vec<String> = training.iter().map(|s| s.text()).collect();
        let rate = eval::novelty_rate(&cand_texts, &training_texts);
        let novelty = NoveltyBlock {
            rate,
            generated: cand_texts.len(),
            in_training: (rate * cand_texts.len() as f64).round() as usize,
        };

        let recall = match predictions {
            None => None,
            Some(path) => {
                let vocab = read_vocab(input_path(&self.config.paths.vocab, "vocabulary")?)?;
                let records: Vec<PredictionRecord> =
                    read_jsonl(input_path(&Some(path), "predictions")?)?;
                let predicted: BTreeMap<String, PhraseSelection> = records
                    .into_iter()
                    .filter_map(|r| r.selection.map(|s| (r.image_id, s)))
                    .collect();
                let truth = corpus::ground_truth_by_image(&reference_corpus, &vocab);
                Some(eval::phrase_recall(&predicted, &truth, &vocab)?)
            }
        };

        let report = EvaluationReport {
            recall,
            bleu,
            human_agreement: human,
            novelty,
        };
        let table = render_table(&report);
        match &self.out {
            Some(path) => {
                write_text(Some(path), &pretty(&report)?)?;
                print!("{table}");
            }
            None => {
                print!("{}", pretty(&report)?);
                eprint!("{table}");
            }
        }
        Ok(Status::Success)
    }
}

fn item_status(requested: usize, failures: usize) -> Status {
    if requested > 0 && failures == requested {
        Status::Partial
    } else {
        Status::Success
    }
}

fn bleu_row(name: &str, r: &BleuReport) -> String {
    let cells: Vec<String> = r.scores.iter().map(|s| format!("{s:>7.4}")).collect();
    format!("{name:<18}{}\n", cells.join(""))
}

fn render_table(report: &EvaluationReport) -> String {
    let mut out = String::new();
    if let Some(r) = &report.recall {
        out.push_str("phrase recall       NP      VP      PP   total\n");
        out.push_str(&format!(
            "{:<18}{:>6.4}  {:>6.4}  {:>6.4}  {:>6.4}\n",
            "", r.np.recall, r.vp.recall, r.pp.recall, r.overall.recall
        ));
    }
    out.push_str("BLEU                 B-1    B-2    B-3    B-4\n");
    out.push_str(&bleu_row("generated", &report.bleu));
    if let Some(h) = &report.human_agreement.report {
        out.push_str(&bleu_row("human agreement", h));
    }
    out.push_str(&format!(
        "in training set    {:.4} ({} of {})\n",
        report.novelty.rate, report.novelty.in_training, report.novelty.generated
    ));
    out
}
