//! Configuration, run directories and the command implementations behind
//! the CLI.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use candle::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::corpus::{
    assign_popularity_labels, build_dataset, load_dataset, popularity_score, read_jsonl, save_dataset, tune_lambda_with_quantile,
    write_jsonl, Article, DomainCoding, LabeledDataset, PopularityLabel, Split, DEFAULT_LAMBDA, DEFAULT_QUANTILE,
};
use crate::crossmodal::{kway_accuracy, train_embedding, CrossDomainConfig, CrossModalConfig, CrossModalEmbedder};
use crate::encoders::{preprocess, FeatureStore, ImageBatch, ImageEncoder, ImageEncoderConfig, PreparedImage};
use crate::error::{Error, Result};
use crate::homogeneity::{homogeneity_experiment, render_svg, summarize, write_csv, HomogeneityConfig, HomogeneityRow};
use crate::ingest::{run_ingest, IngestOptions, ARTICLES_FILE};
use crate::multitask::{evaluate, train, ArticleInputs, ModelConfig, Modalities, MultiTaskModel, Task, TrainConfig};
use crate::nn::ParamStore;
use crate::saliency::{
    gradcam_image, render_overlay, render_token_strip, smoothgrad_image, smoothgrad_tokens, to_rgb, token_attention, token_report_table,
    top_tokens_report, SmoothGradConfig, Target, TargetClass, TextField, TokenReportConfig,
};
use crate::textenc::{
    average_embedding, encode_sequence, sequence_cap, title_tokens, train_word_embeddings, tweet_tokens, EmbeddingTable, SpaceTag,
    Word2VecConfig,
};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = "run.lock";
pub const LOG_FILE: &str = "run.log";
pub const ENCODING_FILE: &str = "encoding.json";
pub const TITLE_EMBEDDINGS: &str = "title.emb";
pub const TWEET_EMBEDDINGS: &str = "tweet.emb";
pub const REPORT_FILE: &str = "report.md";
/// Default location of the page/image cache used by `ingest`.
pub const CACHE_ENV: &str = "MMRL_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { corpus: None, images: None, output: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedsConfig {
    pub data: u64,
    pub model: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub lambda: f64,
    /// Pick λ from `lambda_candidates` instead of using `lambda`.
    pub tune_lambda: bool,
    pub lambda_candidates: Vec<f64>,
    pub quantile: f64,
    pub pad_to_longest: bool,
    pub word2vec: Word2VecConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            tune_lambda: false,
            lambda_candidates: vec![1e2, 1e3, 1e4, 1e5, 1e6],
            quantile: DEFAULT_QUANTILE,
            pad_to_longest: false,
            word2vec: Word2VecConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub model: CrossModalConfig,
    pub train: TrainConfig,
    pub retrieval: CrossDomainConfig,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self { model: CrossModalConfig::default(), train: TrainConfig::default(), retrieval: CrossDomainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyConfig {
    pub smoothgrad: SmoothGradConfig,
    pub overlay_alpha: f64,
    pub token_report: TokenReportConfig,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self { smoothgrad: SmoothGradConfig::default(), overlay_alpha: 0.5, token_report: TokenReportConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub max_parallel: usize,
    pub retries: usize,
    pub backoff_ms: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { max_parallel: 8, retries: 3, backoff_ms: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment_id: String,
    pub paths: PathsConfig,
    pub seeds: SeedsConfig,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub embed: EmbedConfig,
    pub saliency: SaliencyConfig,
    pub homogeneity: HomogeneityConfig,
    pub ingest: IngestConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment_id: "exp".into(),
            paths: PathsConfig::default(),
            seeds: SeedsConfig::default(),
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            embed: EmbedConfig::default(),
            saliency: SaliencyConfig::default(),
            homogeneity: HomogeneityConfig::default(),
            ingest: IngestConfig::default(),
        }
    }
}

fn kind_of(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "table",
    }
}

/// Overlays `user` on `base`, rejecting keys and value kinds that the
/// defaults do not have. `null` defaults accept anything.
fn merge_checked(base: &mut Value, user: Value, path: &str, errors: &mut Vec<String>) {
    match (base, user) {
        (Value::Object(b), Value::Object(u)) => {
            for (k, v) in u {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge_checked(slot, v, &p, errors),
                    None => errors.push(format!("{p}: unknown field")),
                }
            }
        }
        (slot @ Value::Null, u) => *slot = u,
        (slot, u) => {
            let compatible = kind_of(slot) == kind_of(&u) || (matches!(slot, Value::String(_)) && u.is_number());
            if compatible {
                *slot = u;
            } else {
                errors.push(format!("{path}: expected {}, found {}", kind_of(slot), kind_of(&u)));
            }
        }
    }
}

fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s.split_once('=').ok_or_else(|| Error::config(format!("override `{s}` is not key=value")))?;
    let key: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if key.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override `{s}` has an empty key segment")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("parsed"))?,
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((key, value))
}

impl ExperimentConfig {
    /// Defaults, then the TOML file, then `key.path=value` overrides. All
    /// problems are reported together, one per field.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(Self::default())?;
        let mut errors = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            let user: toml::Table = toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
            merge_checked(&mut tree, serde_json::to_value(user)?, "", &mut errors);
        }
        for o in overrides {
            let (key, value) = parse_override(o)?;
            let nested = key.iter().rev().fold(value, |acc, k| json!({ k.as_str(): acc }));
            merge_checked(&mut tree, nested, "", &mut errors);
        }
        if !errors.is_empty() {
            return Err(Error::config(errors.join("; ")));
        }
        let cfg: Self = serde_json::from_value(tree).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.experiment_id.is_empty() || !self.experiment_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            errors.push("experiment_id: must be non-empty ASCII letters, digits, '-' or '_'".to_string());
        }
        if !(self.dataset.lambda > 0.0) {
            errors.push("dataset.lambda: must be positive".into());
        }
        if !(self.dataset.quantile > 0.0 && self.dataset.quantile <= 0.5) {
            errors.push("dataset.quantile: must lie in (0, 0.5]".into());
        }
        for (name, t) in [("train", &self.train), ("embed.train", &self.embed.train)] {
            if let Err(e) = t.validate() {
                errors.push(format!("{name}: {e}"));
            }
        }
        if let Err(e) = self.model.text_cnn.validate() {
            errors.push(format!("model.text_cnn: {e}"));
        }
        if !(0.0..1.0).contains(&self.model.dropout) {
            errors.push("model.dropout: must lie in [0, 1)".into());
        }
        if self.model.tasks.is_empty() {
            errors.push("model.tasks: at least one task is required".into());
        }
        if self.homogeneity.repeats < 2 || self.homogeneity.sample_sizes.iter().any(|&n| n < 2) {
            errors.push("homogeneity: repeats and sample sizes must be at least 2".into());
        }
        if self.saliency.smoothgrad.samples == 0 || self.saliency.smoothgrad.sigma.is_some_and(|s| !(s >= 0.0)) {
            errors.push("saliency.smoothgrad: samples must be ≥ 1 and sigma ≥ 0".into());
        }
        if !(0.0..=1.0).contains(&self.saliency.overlay_alpha) {
            errors.push("saliency.overlay_alpha: must lie in [0, 1]".into());
        }
        for p in [&self.paths.corpus, &self.paths.images].into_iter().flatten() {
            if !p.exists() {
                errors.push(format!("paths: {} does not exist", p.display()));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::config(errors.join("; ")))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

/// Process exit status for an error: 2 usage, 3 data, 4 numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::NonFinite { .. } | Error::DegenerateEmbedding(_) | Error::Tensor(_) => 4,
        _ => 3,
    }
}

/// A locked, timestamped directory holding one command's outputs.
pub struct RunDir {
    pub path: PathBuf,
    pub config_hash: String,
    log: File,
    artifacts: Vec<PathBuf>,
}

impl RunDir {
    pub fn create(config: &ExperimentConfig, command: &str) -> Result<Self> {
        std::fs::create_dir_all(&config.paths.output)?;
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let stem = format!("{}-{command}-{secs}", config.experiment_id);
        let mut path = config.paths.output.join(&stem);
        let mut i = 1;
        while path.exists() {
            i += 1;
            path = config.paths.output.join(format!("{stem}-{i}"));
        }
        std::fs::create_dir_all(&path)?;
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path.join(LOCK_FILE))
            .map_err(|e| Error::config(format!("run directory {} is locked: {e}", path.display())))?;
        let hash = config.hash();
        std::fs::write(path.join(CONFIG_FILE), format!("# config_hash = \"{hash}\"\n{}", config.to_toml()?))?;
        let log = File::create(path.join(LOG_FILE))?;
        let mut run = Self { path, config_hash: hash, log, artifacts: vec![] };
        run.log(&format!("command {command}, config {}", run.config_hash));
        Ok(run)
    }

    pub fn log(&mut self, msg: &str) {
        let _ = writeln!(self.log, "{msg}");
        eprintln!("{msg}");
    }

    pub fn file(&mut self, name: &str) -> PathBuf {
        let p = self.path.join(name);
        self.artifacts.push(p.clone());
        p
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(name);
        std::fs::write(&p, bytes)?;
        Ok(p)
    }

    pub fn write_json(&mut self, name: &str, value: &Value) -> Result<PathBuf> {
        let mut v = value.clone();
        if let Value::Object(m) = &mut v {
            m.insert("config_hash".into(), Value::String(self.config_hash.clone()));
        }
        self.write(name, serde_json::to_string_pretty(&v)? + "\n")
    }

    /// Also records artifacts written outside the run directory.
    pub fn external(&mut self, p: &Path) {
        self.artifacts.push(p.to_path_buf());
    }

    /// Records a failure and releases the lock.
    pub fn abandon(mut self, error: &Error) -> Result<()> {
        let _ = writeln!(self.log, "error: {error}");
        std::fs::write(self.path.join("error.txt"), format!("{error}\nexit code {}\n", exit_code(error)))?;
        std::fs::remove_file(self.path.join(LOCK_FILE))?;
        Ok(())
    }

    /// Writes the metrics and the artifact manifest and releases the lock.
    pub fn finish(mut self, command: &str, metrics: Value) -> Result<PathBuf> {
        self.write_json(METRICS_FILE, &json!({ "command": command, "metrics": metrics }))?;
        let mut files = Vec::new();
        for a in &self.artifacts {
            if a.is_file() {
                let digest = hex::encode(Sha256::digest(std::fs::read(a)?));
                files.push(json!({ "path": a, "sha256": digest }));
            } else if a.exists() {
                files.push(json!({ "path": a }));
            }
        }
        let manifest = json!({ "command": command, "config_hash": self.config_hash, "artifacts": files });
        std::fs::write(self.path.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
        std::fs::remove_file(self.path.join(LOCK_FILE))?;
        Ok(self.path.clone())
    }
}

/// Sequence caps and provenance of a dataset directory's text encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingInfo {
    pub title_len: usize,
    pub tweet_len: usize,
    pub pad_to_longest: bool,
    pub image_root: PathBuf,
    pub word2vec: Word2VecConfig,
}

/// A built dataset directory with its word embeddings.
pub struct DatasetBundle {
    pub dir: PathBuf,
    pub dataset: LabeledDataset,
    pub encoding: EncodingInfo,
    pub title_table: EmbeddingTable,
    pub tweet_table: EmbeddingTable,
}

impl DatasetBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let dataset = load_dataset(dir)?;
        let encoding: EncodingInfo = serde_json::from_slice(&std::fs::read(dir.join(ENCODING_FILE))?)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            dataset,
            encoding,
            title_table: EmbeddingTable::load(dir.join(TITLE_EMBEDDINGS))?,
            tweet_table: EmbeddingTable::load(dir.join(TWEET_EMBEDDINGS))?,
        })
    }

    pub fn load_image(&self, article: &Article, config: &ImageEncoderConfig) -> Result<PreparedImage> {
        let r = article.image_ref.as_deref().ok_or_else(|| Error::invalid(format!("article {} has no image", article.article_id)))?;
        let bytes = std::fs::read(self.encoding.image_root.join(r))?;
        preprocess(&bytes, config)
    }

    pub fn encode(&self, article: &Article, config: &ImageEncoderConfig) -> Result<ArticleInputs> {
        let image = self.load_image(article, config)?;
        encode_article(article, Some(image), &self.title_table, &self.tweet_table, self.encoding.title_len, self.encoding.tweet_len)
    }

    pub fn inputs(&self, articles: &[Article], config: &ImageEncoderConfig) -> Result<Vec<ArticleInputs>> {
        articles.iter().map(|a| self.encode(a, config)).collect()
    }

    pub fn find(&self, id: &str) -> Option<&Article> {
        self.dataset.iter().find(|a| a.article_id == id)
    }
}

/// Encodes one article's text fields; labels come from the article.
pub fn encode_article(
    article: &Article,
    image: Option<PreparedImage>,
    title_table: &EmbeddingTable,
    tweet_table: &EmbeddingTable,
    title_len: usize,
    tweet_len: usize,
) -> Result<ArticleInputs> {
    Ok(ArticleInputs {
        id: article.article_id.clone(),
        url: article.url.clone(),
        image,
        image_features: None,
        title: encode_sequence(&title_tokens(article), title_table, title_len),
        tweet: encode_sequence(&tweet_tokens(article)?, tweet_table, tweet_len),
        y_pop: article.popularity_target(),
        y_rel: article.reliability_target(),
    })
}

/// Word embeddings and sequence caps fitted on the training split.
pub fn fit_text_encoding(
    train_articles: &[Article],
    w2v: &Word2VecConfig,
    pad_to_longest: bool,
) -> Result<(EmbeddingTable, EmbeddingTable, usize, usize)> {
    let titles: Vec<Vec<String>> = train_articles.iter().map(title_tokens).collect();
    let tweets: Vec<Vec<String>> = train_articles.iter().map(tweet_tokens).collect::<Result<_>>()?;
    let title_table = train_word_embeddings(&titles, w2v, SpaceTag::Title)?;
    let tweet_table = train_word_embeddings(&tweets, w2v, SpaceTag::Tweet)?;
    let title_len = sequence_cap(&titles.iter().map(Vec::len).collect::<Vec<_>>(), pad_to_longest);
    let tweet_len = sequence_cap(&tweets.iter().map(Vec::len).collect::<Vec<_>>(), pad_to_longest);
    Ok((title_table, tweet_table, title_len, tweet_len))
}

fn coding_name(c: DomainCoding) -> &'static str {
    match c {
        DomainCoding::Red => "red",
        DomainCoding::Orange => "orange",
        DomainCoding::Yellow => "yellow",
        DomainCoding::Green => "green",
        DomainCoding::Satire => "satire",
    }
}

/// Counts by domain coding and popularity class over articles with a
/// preview, labeled at `quantile`.
pub fn composition(articles: &[Article], lambda: f64, quantile: f64) -> Result<Value> {
    let mut scored: Vec<Article> = articles
        .iter()
        .filter(|a| a.title.as_deref().is_some_and(|t| !t.trim().is_empty()) && a.image_ref.is_some())
        .cloned()
        .collect();
    for a in &mut scored {
        a.popularity_score = Some(popularity_score(&a.tweets, lambda)?);
    }
    let labeled = assign_popularity_labels(&scored, quantile)?;
    let mut table: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for a in &labeled {
        let label = match a.popularity_label {
            Some(PopularityLabel::Popular) => "popular",
            Some(PopularityLabel::Unpopular) => "unpopular",
            _ => "middle",
        };
        *table.entry(coding_name(a.domain_coding)).or_default().entry(label).or_default() += 1;
    }
    Ok(serde_json::to_value(table)?)
}

/// Counts and popularity-score mean/stdev by reliability × popularity.
pub fn dataset_statistics(ds: &LabeledDataset) -> Result<Value> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for a in ds.iter() {
        let rel = if a.reliability_target() == Some(1) { "reliable" } else { "unreliable" };
        let pop = if a.popularity_target() == Some(1) { "popular" } else { "unpopular" };
        groups.entry(format!("{rel}/{pop}")).or_default().push(a.popularity_score.unwrap_or(f64::NAN));
    }
    let mut out = serde_json::Map::new();
    for (k, v) in groups {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        out.insert(k, json!({ "count": v.len(), "mean": mean, "stdev": sd }));
    }
    Ok(Value::Object(out))
}

/// Builds a dataset directory from an ingest output directory.
pub fn build_dataset_dir(corpus_dir: &Path, out: &Path, config: &ExperimentConfig, run: &mut RunDir) -> Result<Value> {
    let articles: Vec<Article> = read_jsonl(corpus_dir.join(ARTICLES_FILE))?;
    let dc = &config.dataset;
    let lambda = if dc.tune_lambda {
        let scored: Vec<Article> =
            articles.iter().filter(|a| a.title.is_some() && a.image_ref.is_some() && !a.tweets.is_empty()).cloned().collect();
        tune_lambda_with_quantile(&dc.lambda_candidates, &scored, dc.quantile)?
    } else {
        dc.lambda
    };
    run.log(&format!("lambda = {lambda}"));
    let (ds, report) = build_dataset(&articles, lambda, dc.quantile, config.seeds.data)?;
    if ds.train.is_empty() || ds.val.is_empty() || ds.test.is_empty() {
        return Err(Error::insufficient("every split must receive at least one article"));
    }
    if out.exists() && std::fs::read_dir(out)?.next().is_some() {
        return Err(Error::invalid(format!("output directory {} is not empty", out.display())));
    }
    std::fs::create_dir_all(out)?;
    save_dataset(&ds, out)?;
    let (title_table, tweet_table, title_len, tweet_len) = fit_text_encoding(&ds.train, &dc.word2vec, dc.pad_to_longest)?;
    title_table.save(out.join(TITLE_EMBEDDINGS))?;
    tweet_table.save(out.join(TWEET_EMBEDDINGS))?;
    let encoding = EncodingInfo {
        title_len,
        tweet_len,
        pad_to_longest: dc.pad_to_longest,
        image_root: std::fs::canonicalize(corpus_dir)?,
        word2vec: dc.word2vec.clone(),
    };
    std::fs::write(out.join(ENCODING_FILE), serde_json::to_string_pretty(&encoding)?)?;
    run.log(&format!("caps: title {title_len}, tweet {tweet_len}"));

    let bundle = DatasetBundle::load(out)?;
    write_feature_files(&bundle, config, out)?;
    run.external(out);
    Ok(json!({
        "lambda": lambda,
        "quantile": dc.quantile,
        "build": report,
        "splits": { "train": ds.train.len(), "val": ds.val.len(), "test": ds.test.len() },
        "title_len": title_len,
        "tweet_len": tweet_len,
        "vocab": { "title": bundle.title_table.len(), "tweet": bundle.tweet_table.len() },
        "composition": composition(&articles, lambda, dc.quantile)?,
        "statistics": dataset_statistics(&ds)?,
    }))
}

pub const IMAGE_FEATURES: &str = "features_image.fea";
pub const TITLE_FEATURES: &str = "features_title.fea";
pub const TWEET_FEATURES: &str = "features_tweet.fea";

fn feature_key(a: &Article) -> String {
    format!("{}/{}", coding_name(a.domain_coding), a.article_id)
}

/// Per-article features for homogeneity analysis, keyed `<coding>/<id>`:
/// backbone image features and averaged word vectors for both text fields.
pub fn write_feature_files(bundle: &DatasetBundle, config: &ExperimentConfig, out: &Path) -> Result<()> {
    let mut params = ParamStore::new(config.seeds.model, DType::F32);
    let encoder = ImageEncoder::new(&mut params, "image", &config.model.image)?;
    let articles: Vec<&Article> = bundle.dataset.iter().collect();
    let mut image_store = FeatureStore::new(crate::encoders::IMAGE_FEATURE_DIM);
    let mut title_store = FeatureStore::new(bundle.title_table.dim());
    let mut tweet_store = FeatureStore::new(bundle.tweet_table.dim());
    for chunk in articles.chunks(64) {
        let prepared: Vec<PreparedImage> = chunk.iter().map(|a| bundle.load_image(a, &config.model.image)).collect::<Result<_>>()?;
        let refs: Vec<&PreparedImage> = prepared.iter().collect();
        let batch = ImageBatch::from_prepared(&refs, DType::F32, params.device())?;
        let feats = crate::nn::to_vec_f64(&encoder.forward(&batch, DType::F32, params.device())?)?;
        let dim = crate::encoders::IMAGE_FEATURE_DIM;
        for (i, a) in chunk.iter().enumerate() {
            let row: Vec<f32> = feats[i * dim..(i + 1) * dim].iter().map(|&v| v as f32).collect();
            image_store.insert(feature_key(a), &row)?;
            title_store.insert(feature_key(a), &average_embedding(&title_tokens(a), &bundle.title_table))?;
            tweet_store.insert(feature_key(a), &average_embedding(&tweet_tokens(a)?, &bundle.tweet_table))?;
        }
    }
    image_store.save(out.join(IMAGE_FEATURES))?;
    title_store.save(out.join(TITLE_FEATURES))?;
    tweet_store.save(out.join(TWEET_FEATURES))?;
    Ok(())
}

fn refuse_existing(p: &Path) -> Result<()> {
    if p.exists() {
        return Err(Error::invalid(format!("{} already exists; pick a new output path", p.display())));
    }
    if let Some(parent) = p.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn abs(p: &Path) -> Result<PathBuf> {
    Ok(std::fs::canonicalize(p)?)
}

fn dataset_from_extra(extra: &Value, flag: Option<&Path>) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p.to_path_buf()),
        None => extra["dataset"]
            .as_str()
            .map(PathBuf::from)
            .ok_or_else(|| Error::config("checkpoint does not name its dataset; pass --dataset")),
    }
}

pub fn train_command(dataset: &Path, out: &Path, config: &ExperimentConfig, run: &mut RunDir) -> Result<Value> {
    refuse_existing(out)?;
    let bundle = DatasetBundle::load(dataset)?;
    let img = &config.model.image;
    let mut train_set = bundle.inputs(&bundle.dataset.train, img)?;
    let mut val_set = bundle.inputs(&bundle.dataset.val, img)?;
    let mut model = MultiTaskModel::new(&config.model, config.seeds.model, DType::F32)?;
    model.cache_image_features(&mut train_set)?;
    model.cache_image_features(&mut val_set)?;
    run.log(&format!("train {} / val {} articles, {} parameters", train_set.len(), val_set.len(), model.params.num_parameters()));
    let history = train(&mut model, &train_set, &val_set, &config.train)?;
    for e in &history.epochs {
        run.log(&format!(
            "epoch {:>3} lr {:.1e} train {:.4} val {:.4} acc_pop {:?} acc_rel {:?}",
            e.epoch, e.lr, e.train_loss, e.val_loss, e.val_acc_pop, e.val_acc_rel
        ));
    }
    let val = evaluate(&model, &val_set)?;
    model.save(out, json!({ "dataset": abs(dataset)?, "config_hash": run.config_hash, "kind": "multitask" }))?;
    run.external(out);
    Ok(json!({ "history": history, "val": val }))
}

pub fn eval_command(ckpt: &Path, split: Split, modalities: Option<Modalities>, dataset: Option<&Path>, run: &mut RunDir) -> Result<Value> {
    let (mut model, extra) = MultiTaskModel::load(ckpt)?;
    if let Some(m) = modalities {
        model.config.modalities = m;
    }
    let bundle = DatasetBundle::load(&dataset_from_extra(&extra, dataset)?)?;
    let mut inputs = bundle.inputs(bundle.dataset.split(split), &model.config.image)?;
    model.cache_image_features(&mut inputs)?;
    let report = evaluate(&model, &inputs)?;
    run.log(&format!("{} on {split:?}: loss {:.4}", report.modalities, report.loss));
    Ok(json!({ "split": split, "report": report }))
}

/// Articles of one domain coding.
fn domain_articles(articles: &[Article], domain: DomainCoding) -> Vec<Article> {
    articles.iter().filter(|a| a.domain_coding == domain).cloned().collect()
}

/// Seeded 70/10/20 split of a corpus domain for cross-modal work.
pub fn corpus_domain_splits(corpus_dir: &Path, domain: DomainCoding, seed: u64) -> Result<[Vec<Article>; 3]> {
    let all: Vec<Article> = read_jsonl(corpus_dir.join(ARTICLES_FILE))?;
    let mut arts: Vec<Article> = domain_articles(&all, domain)
        .into_iter()
        .filter(|a| a.title.as_deref().is_some_and(|t| !t.trim().is_empty()) && a.image_ref.is_some())
        .collect();
    arts.sort_by(|a, b| a.article_id.cmp(&b.article_id));
    arts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = arts.len();
    let n_train = (0.7 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    let test = arts.split_off(n_train + n_val);
    let val = arts.split_off(n_train);
    Ok([arts, val, test])
}

fn embed_splits(bundle: &DatasetBundle, corpus: Option<&Path>, domain: DomainCoding, seed: u64) -> Result<[Vec<Article>; 3]> {
    match corpus {
        Some(c) => corpus_domain_splits(c, domain, seed),
        None => Ok([Split::Train, Split::Val, Split::Test].map(|s| domain_articles(bundle.dataset.split(s), domain))),
    }
}

fn embed_inputs(bundle: &DatasetBundle, corpus: Option<&Path>, articles: &[Article], config: &ImageEncoderConfig) -> Result<Vec<ArticleInputs>> {
    articles
        .iter()
        .map(|a| {
            let image = match corpus {
                Some(c) => {
                    let r = a.image_ref.as_deref().ok_or_else(|| Error::invalid("article has no image"))?;
                    preprocess(&std::fs::read(c.join(r))?, config)?
                }
                None => bundle.load_image(a, config)?,
            };
            encode_article(a, Some(image), &bundle.title_table, &bundle.tweet_table, bundle.encoding.title_len, bundle.encoding.tweet_len)
        })
        .collect()
}

pub fn parse_domain(s: &str) -> Result<DomainCoding> {
    match s {
        "red" => Ok(DomainCoding::Red),
        "green" => Ok(DomainCoding::Green),
        other => Err(Error::config(format!("domain must be red or green, got `{other}`"))),
    }
}

pub fn embed_train_command(
    dataset: &Path,
    domain: DomainCoding,
    corpus: Option<&Path>,
    out: &Path,
    config: &ExperimentConfig,
    run: &mut RunDir,
) -> Result<Value> {
    refuse_existing(out)?;
    let bundle = DatasetBundle::load(dataset)?;
    let [tr, va, _] = embed_splits(&bundle, corpus, domain, config.seeds.data)?;
    let img = &config.embed.model.image;
    let mut train_set = embed_inputs(&bundle, corpus, &tr, img)?;
    let mut val_set = embed_inputs(&bundle, corpus, &va, img)?;
    let mut model = CrossModalEmbedder::new(&config.embed.model, config.seeds.model, DType::F32)?;
    model.cache_image_features(&mut train_set)?;
    model.cache_image_features(&mut val_set)?;
    run.log(&format!("{} train / {} val pairs", train_set.len(), val_set.len()));
    let history = train_embedding(&mut model, &train_set, &val_set, &config.embed.train)?;
    for e in &history.epochs {
        run.log(&format!("epoch {:>3} lr {:.1e} train {:.4} val {:.4}", e.epoch, e.lr, e.train_loss, e.val_loss));
    }
    let corpus_abs = corpus.map(abs).transpose()?;
    model.save(
        out,
        json!({
            "dataset": abs(dataset)?,
            "corpus": corpus_abs,
            "domain": coding_name(domain),
            "split_seed": config.seeds.data,
            "config_hash": run.config_hash,
            "kind": "embedder",
        }),
    )?;
    run.external(out);
    Ok(json!({ "domain": coding_name(domain), "train_pairs": train_set.len(), "history": history }))
}

pub fn retrieve_command(
    ckpt: &Path,
    test_domain: DomainCoding,
    ks: &[usize],
    dataset: Option<&Path>,
    config: &ExperimentConfig,
    run: &mut RunDir,
) -> Result<Value> {
    let (model, extra) = CrossModalEmbedder::load(ckpt)?;
    let bundle = DatasetBundle::load(&dataset_from_extra(&extra, dataset)?)?;
    let corpus = extra["corpus"].as_str().map(PathBuf::from);
    let split_seed = extra["split_seed"].as_u64().unwrap_or(config.seeds.data);
    let [_, _, te] = embed_splits(&bundle, corpus.as_deref(), test_domain, split_seed)?;
    let mut test_set = embed_inputs(&bundle, corpus.as_deref(), &te, &model.config.image)?;
    model.cache_image_features(&mut test_set)?;
    let rc = &config.embed.retrieval;
    let mut cells = Vec::new();
    for &k in ks {
        let accs: Vec<f64> = rc
            .eval_seeds
            .iter()
            .map(|&s| kway_accuracy(&model, &test_set, k, rc.trials_per_query, s).map(|r| r.accuracy))
            .collect::<Result<_>>()?;
        let s = summarize(&accs)?;
        run.log(&format!("{k}-way: {:.3} ± {:.3}", s.mean, s.stderr));
        cells.push(json!({ "k": k, "accuracy": s.mean, "stderr": s.stderr, "per_seed": accs }));
    }
    Ok(json!({
        "train_domain": extra["domain"],
        "test_domain": coding_name(test_domain),
        "test_pairs": test_set.len(),
        "cells": cells,
    }))
}

fn find_inputs(bundle: &DatasetBundle, id: &str, image: &ImageEncoderConfig) -> Result<ArticleInputs> {
    let a = bundle.find(id).ok_or_else(|| Error::invalid(format!("article `{id}` is not in the dataset")))?;
    bundle.encode(a, image)
}

pub fn saliency_command(
    ckpt: &Path,
    id: &str,
    target: Target,
    dataset: Option<&Path>,
    config: &ExperimentConfig,
    run: &mut RunDir,
) -> Result<Value> {
    let (model, extra) = MultiTaskModel::load(ckpt)?;
    let bundle = DatasetBundle::load(&dataset_from_extra(&extra, dataset)?)?;
    let article = find_inputs(&bundle, id, &model.config.image)?;
    let source = bundle.find(id).expect("found above");
    let sg = &config.saliency.smoothgrad;
    let mut out = serde_json::Map::new();
    if model.image.needs_pixels() {
        let cam = gradcam_image(&model, &article, target)?;
        let smooth = smoothgrad_image(&model, &article, target, sg)?;
        let base = to_rgb(article.image.as_ref().expect("encoded with image"), &model.config.image);
        let overlay = render_overlay(&base, &smooth, config.saliency.overlay_alpha);
        let p = run.file("overlay.png");
        overlay.save(&p).map_err(|e| Error::Decode(e.to_string()))?;
        out.insert("image_gradcam".into(), serde_json::to_value(&cam)?);
        out.insert("image_smoothgrad".into(), serde_json::to_value(&smooth)?);
    } else {
        run.log("image backbone reads precomputed features; no image map");
    }
    let mut html = String::from("<!doctype html>\n<meta charset=\"utf-8\">\n");
    let tokens = [(TextField::Title, title_tokens(source)), (TextField::Tweet, tweet_tokens(source)?)];
    for (field, toks) in tokens {
        let name = match field {
            TextField::Title => "title",
            TextField::Tweet => "tweet",
        };
        let seq_len = match field {
            TextField::Title => article.title.length,
            TextField::Tweet => article.tweet.length,
        };
        if seq_len == 0 {
            continue;
        }
        let cam = token_attention(&model, &article, field, target)?;
        let smooth = smoothgrad_tokens(&model, &article, field, target, sg)?;
        let shown: Vec<String> = toks.into_iter().take(seq_len).collect();
        writeln!(html, "<h3>{name}</h3>").unwrap();
        html.push_str(&render_token_strip(&shown, &smooth.values));
        out.insert(format!("{name}_tokens"), json!(shown));
        out.insert(format!("{name}_gradcam"), serde_json::to_value(&cam)?);
        out.insert(format!("{name}_smoothgrad"), serde_json::to_value(&smooth)?);
    }
    run.write("tokens.html", html)?;
    let maps = Value::Object(out);
    run.write_json("saliency.json", &maps)?;
    Ok(json!({ "input": id, "target": target, "label": target.label(), "maps": maps }))
}

pub fn token_report_command(ckpt: &Path, split: Split, dataset: Option<&Path>, config: &ExperimentConfig, run: &mut RunDir) -> Result<Value> {
    let (model, extra) = MultiTaskModel::load(ckpt)?;
    let bundle = DatasetBundle::load(&dataset_from_extra(&extra, dataset)?)?;
    let articles = bundle.dataset.split(split);
    let mut inputs = bundle.inputs(articles, &model.config.image)?;
    model.cache_image_features(&mut inputs)?;
    let cfg = config.saliency.token_report;
    let tokens: Vec<Vec<String>> = articles
        .iter()
        .map(|a| match cfg.field {
            TextField::Title => Ok(title_tokens(a)),
            TextField::Tweet => tweet_tokens(a),
        })
        .collect::<Result<_>>()?;
    let report = top_tokens_report(&model, &inputs, &tokens, &cfg)?;
    let table = token_report_table(&report);
    run.write("token_report.txt", &table)?;
    run.log(&table);
    Ok(json!({ "split": split, "report": report }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Image,
    Title,
    Tweet,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Image => "image",
            FeatureKind::Title => "title",
            FeatureKind::Tweet => "tweet",
        }
    }

    pub fn file(self) -> &'static str {
        match self {
            FeatureKind::Image => IMAGE_FEATURES,
            FeatureKind::Title => TITLE_FEATURES,
            FeatureKind::Tweet => TWEET_FEATURES,
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(FeatureKind::Image),
            "title" => Ok(FeatureKind::Title),
            "tweet" => Ok(FeatureKind::Tweet),
            other => Err(Error::config(format!("kind must be image, title or tweet, got `{other}`"))),
        }
    }
}

/// Rows of a feature file grouped by the `<coding>/` key prefix.
pub fn features_by_domain(store: &FeatureStore) -> Result<BTreeMap<String, Vec<Vec<f64>>>> {
    let mut out: BTreeMap<String, Vec<Vec<f64>>> = BTreeMap::new();
    for k in store.keys() {
        let domain = k.split_once('/').map(|(d, _)| d).unwrap_or("all");
        out.entry(domain.to_string()).or_default().push(store.get(k)?.iter().map(|&v| v as f64).collect());
    }
    Ok(out)
}

pub fn mmd_command(
    features: &Path,
    domain: Option<DomainCoding>,
    kind: FeatureKind,
    config: &HomogeneityConfig,
    run: &mut RunDir,
) -> Result<Value> {
    let store = if features.is_dir() {
        FeatureStore::load(features.join(kind.file()))?
    } else {
        FeatureStore::load(features)?
    };
    let mut groups = features_by_domain(&store)?;
    groups.retain(|d, _| d == "red" || d == "green");
    if let Some(d) = domain {
        groups.retain(|k, _| k == coding_name(d));
    }
    if groups.is_empty() {
        return Err(Error::insufficient("no red or green rows in the feature file"));
    }
    let result = homogeneity_experiment(&groups, kind.name(), config)?;
    let csv = run.file(&format!("mmd_{}.csv", kind.name()));
    write_csv(&result.rows, &csv)?;
    let svg = render_svg(&result.rows, &format!("MMD² vs N ({})", kind.name()));
    run.write(&format!("mmd_{}.svg", kind.name()), with_hash_comment(&svg, &run.config_hash))?;
    for r in &result.rows {
        run.log(&format!("N={} {} {}: {:.3e} ± {:.1e}", r.n, r.domain, r.kind, r.mean, r.stderr));
    }
    Ok(json!({ "kind": kind.name(), "result": result }))
}

fn with_hash_comment(svg: &str, hash: &str) -> String {
    match svg.find('>') {
        Some(i) => format!("{}<!-- config_hash {hash} -->{}", &svg[..=i], &svg[i + 1..]),
        None => svg.to_string(),
    }
}

/// A finished run directory's metrics.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub command: String,
    pub metrics: Value,
}

/// Finished runs under the given paths: each path is a run directory or a
/// directory of run directories. Sorted by directory name.
pub fn collect_runs(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut dirs = Vec::new();
    for p in paths {
        if p.join(METRICS_FILE).is_file() {
            dirs.push(p.clone());
        } else {
            for e in std::fs::read_dir(p)? {
                let e = e?.path();
                if e.join(METRICS_FILE).is_file() {
                    dirs.push(e);
                }
            }
        }
    }
    dirs.sort();
    dirs.dedup();
    dirs.into_iter()
        .map(|d| {
            let v: Value = serde_json::from_slice(&std::fs::read(d.join(METRICS_FILE))?)?;
            Ok(RunRecord { command: v["command"].as_str().unwrap_or_default().to_string(), metrics: v["metrics"].clone(), dir: d })
        })
        .collect()
}

pub const REPORT_SECTIONS: [&str; 6] = [
    "## Corpus composition",
    "## Classification accuracy",
    "## Cross-modal retrieval",
    "## Top tweet tokens",
    "## Saliency examples",
    "## MMD versus sample size",
];

fn fmt_acc(m: &Value) -> String {
    match (m["accuracy"].as_f64(), m["stderr"].as_f64()) {
        (Some(a), Some(s)) => format!("{a:.3} ± {s:.3}"),
        _ => "n/a".into(),
    }
}

fn runs_of<'a>(runs: &'a [RunRecord], command: &'a str) -> impl Iterator<Item = &'a RunRecord> {
    runs.iter().filter(move |r| r.command == command)
}

/// Markdown report over finished runs; plots are copied next to it.
pub fn report_command(paths: &[PathBuf], run: &mut RunDir) -> Result<Value> {
    let runs: Vec<RunRecord> = collect_runs(paths)?.into_iter().filter(|r| r.command != "report").collect();
    let mut md = format!("# Experiment report\n\nconfig_hash: `{}`  \nruns: {}\n\n", run.config_hash, runs.len());

    md.push_str(REPORT_SECTIONS[0]);
    md.push_str("\n\n");
    match runs_of(&runs, "build-dataset").last() {
        Some(r) => {
            let comp = &r.metrics["composition"];
            md.push_str("| domain | popular | unpopular | middle | total |\n|---|---:|---:|---:|---:|\n");
            if let Some(m) = comp.as_object() {
                for (d, c) in m {
                    let g = |k: &str| c[k].as_u64().unwrap_or(0);
                    let total = g("popular") + g("unpopular") + g("middle");
                    writeln!(md, "| {d} | {} | {} | {} | {total} |", g("popular"), g("unpopular"), g("middle")).unwrap();
                }
            }
            md.push_str("\n| group | count | mean P | stdev P |\n|---|---:|---:|---:|\n");
            if let Some(m) = r.metrics["statistics"].as_object() {
                for (g, s) in m {
                    writeln!(
                        md,
                        "| {g} | {} | {:.4e} | {:.4e} |",
                        s["count"],
                        s["mean"].as_f64().unwrap_or(f64::NAN),
                        s["stdev"].as_f64().unwrap_or(f64::NAN)
                    )
                    .unwrap();
                }
            }
            writeln!(md, "\nλ = {}, quantile = {}\n", r.metrics["lambda"], r.metrics["quantile"]).unwrap();
        }
        None => md.push_str("_no build-dataset run_\n\n"),
    }

    md.push_str(REPORT_SECTIONS[1]);
    md.push_str("\n\n| inputs | split | popularity | reliability |\n|---|---|---|---|\n");
    let mut any = false;
    for r in runs_of(&runs, "eval") {
        let rep = &r.metrics["report"];
        writeln!(
            md,
            "| {} | {} | {} | {} |",
            rep["modalities"].as_str().unwrap_or("?"),
            r.metrics["split"].as_str().unwrap_or("?"),
            fmt_acc(&rep["popularity"]),
            fmt_acc(&rep["reliability"])
        )
        .unwrap();
        any = true;
    }
    if !any {
        md.push_str("| _no eval run_ | | | |\n");
    }
    md.push('\n');

    md.push_str(REPORT_SECTIONS[2]);
    md.push_str("\n\n");
    let mut grid: BTreeMap<(String, String), BTreeMap<u64, (f64, f64)>> = BTreeMap::new();
    for r in runs_of(&runs, "retrieve") {
        let key = (r.metrics["train_domain"].as_str().unwrap_or("?").to_string(), r.metrics["test_domain"].as_str().unwrap_or("?").to_string());
        for c in r.metrics["cells"].as_array().into_iter().flatten() {
            grid.entry(key.clone())
                .or_default()
                .insert(c["k"].as_u64().unwrap_or(0), (c["accuracy"].as_f64().unwrap_or(f64::NAN), c["stderr"].as_f64().unwrap_or(0.0)));
        }
    }
    let ks: std::collections::BTreeSet<u64> = grid.values().flat_map(|m| m.keys().copied()).collect();
    md.push_str("| train | test |");
    for k in &ks {
        write!(md, " {k}-way |").unwrap();
    }
    md.push_str("\n|---|---|");
    for _ in &ks {
        md.push_str("---|");
    }
    md.push('\n');
    if grid.is_empty() {
        md.push_str("| _no retrieve run_ | |\n");
    }
    for ((train_d, test_d), cells) in &grid {
        write!(md, "| {train_d} | {test_d} |").unwrap();
        for k in &ks {
            match cells.get(k) {
                Some((acc, _)) => {
                    let same = grid.get(&(train_d.clone(), train_d.clone())).and_then(|m| m.get(k)).map(|c| c.0);
                    match same {
                        Some(s) if train_d != test_d && s > 0.0 => write!(md, " {acc:.3} ({:+.2}%) |", 100.0 * (acc - s) / s).unwrap(),
                        _ => write!(md, " {acc:.3} |").unwrap(),
                    }
                }
                None => md.push_str(" |"),
            }
        }
        md.push('\n');
    }
    md.push('\n');

    md.push_str(REPORT_SECTIONS[3]);
    md.push_str("\n\n");
    match runs_of(&runs, "token-report").last() {
        Some(r) => {
            md.push_str("| class | tokens |\n|---|---|\n");
            for t in r.metrics["report"].as_array().into_iter().flatten() {
                let toks: Vec<String> =
                    t["tokens"].as_array().into_iter().flatten().map(|e| e["token"].as_str().unwrap_or("").to_string()).collect();
                writeln!(md, "| {} | {} |", t["label"].as_str().unwrap_or("?"), toks.join(", ")).unwrap();
            }
        }
        None => md.push_str("_no token-report run_\n"),
    }
    md.push('\n');

    md.push_str(REPORT_SECTIONS[4]);
    md.push_str("\n\n");
    let mut n_sal = 0;
    for (i, r) in runs_of(&runs, "saliency").enumerate() {
        let overlay = r.dir.join("overlay.png");
        let label = r.metrics["label"].as_str().unwrap_or("?");
        let input = r.metrics["input"].as_str().unwrap_or("?");
        if overlay.is_file() {
            let name = format!("saliency_{i}.png");
            std::fs::copy(&overlay, run.file(&name))?;
            writeln!(md, "- `{input}` ({label}): ![]({name})").unwrap();
        } else {
            writeln!(md, "- `{input}` ({label}): text maps only").unwrap();
        }
        for field in ["title", "tweet"] {
            if let (Some(toks), Some(vals)) =
                (r.metrics["maps"][format!("{field}_tokens")].as_array(), r.metrics["maps"][format!("{field}_smoothgrad")]["values"].as_array())
            {
                let shown: Vec<String> = toks.iter().zip(vals).map(|(t, v)| format!("{}:{:.2}", t.as_str().unwrap_or(""), v.as_f64().unwrap_or(0.0))).collect();
                writeln!(md, "  - {field}: {}", shown.join(" ")).unwrap();
            }
        }
        n_sal += 1;
    }
    if n_sal == 0 {
        md.push_str("_no saliency run_\n");
    }
    md.push('\n');

    md.push_str(REPORT_SECTIONS[5]);
    md.push_str("\n\n");
    let mut n_mmd = 0;
    for r in runs_of(&runs, "mmd") {
        let kind = r.metrics["kind"].as_str().unwrap_or("?").to_string();
        let rows: Vec<HomogeneityRow> = serde_json::from_value(r.metrics["result"]["rows"].clone())?;
        let svg = render_svg(&rows, &format!("MMD² vs N ({kind})"));
        let name = format!("mmd_{kind}_{n_mmd}.svg");
        run.write(&name, with_hash_comment(&svg, &run.config_hash.clone()))?;
        writeln!(md, "### {kind}\n\n![]({name})\n\n| N | domain | mean MMD² | stderr |\n|---:|---|---:|---:|").unwrap();
        for row in &rows {
            writeln!(md, "| {} | {} | {:.4e} | {:.2e} |", row.n, row.domain, row.mean, row.stderr).unwrap();
        }
        for c in r.metrics["result"]["comparisons"].as_array().into_iter().flatten() {
            writeln!(
                md,
                "\nN = {}: {} vs {}: t({}) = {:.3}, p = {:.3e}",
                c["n"], c["first"].as_str().unwrap_or("?"), c["second"].as_str().unwrap_or("?"), c["test"]["df"], c["test"]["t"].as_f64().unwrap_or(f64::NAN), c["test"]["p_value"].as_f64().unwrap_or(f64::NAN)
            )
            .unwrap();
        }
        md.push('\n');
        n_mmd += 1;
    }
    if n_mmd == 0 {
        md.push_str("_no mmd run_\n");
    }
    run.write(REPORT_FILE, &md)?;
    Ok(json!({ "runs": runs.len(), "sections": REPORT_SECTIONS.len() }))
}

pub fn ingest_command(opts: &IngestOptions, run: &mut RunDir) -> Result<Value> {
    let report = run_ingest(opts)?;
    run.external(&opts.out);
    run.log(&format!("{} articles from {} tweets", report.articles, report.tweets_kept));
    Ok(serde_json::to_value(report)?)
}

pub fn ingest_options(
    tweets: PathBuf,
    domains: PathBuf,
    html_cache: Option<PathBuf>,
    out: PathBuf,
    offline: bool,
    config: &IngestConfig,
) -> Result<IngestOptions> {
    let html_cache = match html_cache.or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from)) {
        Some(p) => p,
        None => return Err(Error::config(format!("--html-cache is required when {CACHE_ENV} is unset"))),
    };
    Ok(IngestOptions {
        tweets,
        domains,
        html_cache,
        out,
        offline,
        max_parallel: config.max_parallel.max(1),
        retries: config.retries,
        backoff: Duration::from_millis(config.backoff_ms),
    })
}

/// Writes offline ingest fixtures for a synthetic corpus.
pub fn synth_command(out: &Path, articles: usize, middle_fraction: f64, seed: u64, run: &mut RunDir) -> Result<Value> {
    let cfg = crate::synth::ClassificationSynth { n_articles: articles, seed, middle_fraction, ..Default::default() };
    let arts = crate::synth::generate_classification(&cfg);
    let paths = crate::synth::write_ingest_fixtures(&arts, out)?;
    run.external(out);
    Ok(json!({ "articles": arts.len(), "tweets": paths.tweets, "domains": paths.domains, "html_cache": paths.html_cache }))
}

/// Labeled synthetic articles written as a corpus directory (articles plus
/// PNG images), bypassing HTML extraction.
pub fn write_synthetic_corpus(articles: &[crate::synth::SynthArticle], dir: &Path) -> Result<()> {
    let images = dir.join(crate::ingest::IMAGES_DIR);
    std::fs::create_dir_all(&images)?;
    let mut out = Vec::with_capacity(articles.len());
    for s in articles {
        let mut a = s.article.clone();
        let name = format!("{}.png", a.article_id);
        s.image.save(images.join(&name)).map_err(|e| Error::Decode(e.to_string()))?;
        a.image_ref = Some(format!("{}/{name}", crate::ingest::IMAGES_DIR));
        out.push(a);
    }
    write_jsonl(std::io::BufWriter::new(File::create(dir.join(ARTICLES_FILE))?), &out)?;
    Ok(())
}

pub fn parse_target(task: &str, class: &str) -> Result<Target> {
    let task: Task = task.parse()?;
    let class: TargetClass = class.parse()?;
    Ok(Target { task, class })
}
