//! Fused image/title/tweet classifier with separate popularity and
//! reliability heads, trained jointly on the summed binary cross entropy.

use std::path::Path;

use candle::{DType, Device, Tensor};
use candle_nn::Optimizer;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, CHECKPOINT_MAGIC};
use crate::encoders::{ImageBatch, ImageEncoder, ImageEncoderConfig, PreparedImage, TextCnn, TextCnnConfig, IMAGE_FEATURE_DIM};
use crate::error::{Error, Result};
use crate::nn::{adam, bce_with_logits, dropout, to_vec_f64, Linear, ParamStore, PlateauSchedule};
use crate::textenc::EncodedSequence;

pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Popularity,
    Reliability,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Popularity, Task::Reliability];

    pub fn name(self) -> &'static str {
        match self {
            Task::Popularity => "popularity",
            Task::Reliability => "reliability",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "popularity" | "t1" => Ok(Task::Popularity),
            "reliability" | "t2" => Ok(Task::Reliability),
            other => Err(Error::config(format!("unknown task `{other}`"))),
        }
    }
}

/// Which input blocks feed the fused vector. Disabled blocks are zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modalities {
    pub image: bool,
    pub title: bool,
    pub tweet: bool,
}

impl Modalities {
    pub const ALL: Modalities = Modalities { image: true, title: true, tweet: true };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.image {
            parts.push("image");
        }
        if self.title {
            parts.push("title");
        }
        if self.tweet {
            parts.push("tweet");
        }
        parts.join(",")
    }
}

impl Default for Modalities {
    fn default() -> Self {
        Self::ALL
    }
}

impl std::str::FromStr for Modalities {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut m = Modalities { image: false, title: false, tweet: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "image" => m.image = true,
                "title" => m.title = true,
                "tweet" => m.tweet = true,
                other => return Err(Error::config(format!("unknown modality `{other}`"))),
            }
        }
        if !(m.image || m.title || m.tweet) {
            return Err(Error::config("at least one modality must be enabled"));
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text_cnn: TextCnnConfig,
    pub image: ImageEncoderConfig,
    pub hidden: usize,
    pub dropout: f64,
    pub modalities: Modalities,
    pub tasks: Vec<Task>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            text_cnn: TextCnnConfig::default(),
            image: ImageEncoderConfig::default(),
            hidden: 256,
            dropout: 0.5,
            modalities: Modalities::ALL,
            tasks: Task::ALL.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn fused_dim(&self) -> usize {
        IMAGE_FEATURE_DIM + 2 * self.text_cnn.output_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_patience: usize,
    pub early_stop_patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-4,
            lr_decay_factor: 0.1,
            lr_patience: 4,
            early_stop_patience: 6,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 64,
            max_epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("learning rate, batch size and epoch count must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lr_decay_factor) {
            return Err(Error::config("lr_decay_factor must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Encoded inputs for one article.
#[derive(Debug, Clone)]
pub struct ArticleInputs {
    pub id: String,
    pub url: String,
    pub image: Option<PreparedImage>,
    /// Backbone output cached for frozen training.
    pub image_features: Option<Vec<f32>>,
    pub title: EncodedSequence,
    pub tweet: EncodedSequence,
    pub y_pop: Option<u8>,
    pub y_rel: Option<u8>,
}

impl ArticleInputs {
    pub fn target(&self, task: Task) -> Option<u8> {
        match task {
            Task::Popularity => self.y_pop,
            Task::Reliability => self.y_rel,
        }
    }
}

/// Probabilities from both heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_pop: f64,
    pub p_rel: f64,
}

impl Prediction {
    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Popularity => self.p_pop,
            Task::Reliability => self.p_rel,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

#[derive(Debug, Clone)]
pub struct Head {
    pub hidden: Linear,
    pub out: Linear,
}

impl Head {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.out.forward(&self.hidden.forward(x)?.relu()?)?.squeeze(1)?)
    }
}

/// A batch of tensors ready for the model.
#[derive(Debug, Clone)]
pub struct Batch {
    pub image_features: Option<Tensor>,
    pub images: Option<ImageBatch>,
    pub title: Tensor,
    pub tweet: Tensor,
    pub y_pop: Tensor,
    pub y_rel: Tensor,
    pub mask_pop: Tensor,
    pub mask_rel: Tensor,
}

pub struct MultiTaskModel {
    pub params: ParamStore,
    pub config: ModelConfig,
    pub image: ImageEncoder,
    pub title: TextCnn,
    pub tweet: TextCnn,
    pub head_pop: Head,
    pub head_rel: Head,
}

impl MultiTaskModel {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        if config.tasks.is_empty() {
            return Err(Error::config("at least one task must be trained"));
        }
        let mut params = ParamStore::new(seed, dtype);
        let image = ImageEncoder::new(&mut params, "image", &config.image)?;
        let title = TextCnn::new(&mut params, "title", &config.text_cnn)?;
        let tweet = TextCnn::new(&mut params, "tweet", &config.text_cnn)?;
        let fused = config.fused_dim();
        let mut head = |name: &str| -> Result<Head> {
            Ok(Head {
                hidden: params.linear(&format!("{name}.hidden"), fused, config.hidden, true)?,
                out: params.linear(&format!("{name}.out"), config.hidden, 1, true)?,
            })
        };
        let head_pop = head("head_pop")?;
        let head_rel = head("head_rel")?;
        Ok(Self { params, config: config.clone(), image, title, tweet, head_pop, head_rel })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn head(&self, task: Task) -> &Head {
        match task {
            Task::Popularity => &self.head_pop,
            Task::Reliability => &self.head_rel,
        }
    }

    /// Prefixes of the parameters updated during training.
    pub fn trainable_prefixes(&self) -> Vec<String> {
        let mut p = vec!["title.".to_string(), "tweet.".to_string()];
        for t in &self.config.tasks {
            p.push(match t {
                Task::Popularity => "head_pop.".into(),
                Task::Reliability => "head_rel.".into(),
            });
        }
        p.extend(self.image.trainable_prefixes());
        p
    }

    /// Runs the frozen backbone once and caches its output on each article.
    pub fn cache_image_features(&self, inputs: &mut [ArticleInputs]) -> Result<()> {
        for chunk in inputs.chunks_mut(64) {
            let prepared: Vec<&PreparedImage> = chunk.iter().filter_map(|a| a.image.as_ref()).collect();
            if prepared.is_empty() {
                continue;
            }
            let batch = ImageBatch::from_prepared(&prepared, self.dtype(), self.device())?;
            let feats = self.image.forward(&batch, DType::F32, self.device())?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            let mut it = feats.into_iter();
            for a in chunk.iter_mut().filter(|a| a.image.is_some()) {
                a.image_features = it.next();
            }
        }
        Ok(())
    }

    pub fn make_batch(&self, items: &[&ArticleInputs]) -> Result<Batch> {
        if items.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let dev = self.device();
        let dtype = self.dtype();
        let title = sequence_tensor(items, |a| &a.title, dtype, dev)?;
        let tweet = sequence_tensor(items, |a| &a.tweet, dtype, dev)?;
        let (image_features, images) = if self.config.modalities.image {
            image_input(items, &self.image, dtype, dev)?
        } else {
            (None, None)
        };

        let labels = |task: Task| -> Result<(Tensor, Tensor)> {
            let y: Vec<f64> = items.iter().map(|a| a.target(task).unwrap_or(0) as f64).collect();
            let m: Vec<f64> = items.iter().map(|a| a.target(task).map_or(0.0, |_| 1.0)).collect();
            if items.iter().filter_map(|a| a.target(task)).any(|v| v > 1) {
                return Err(Error::invalid("labels must be 0 or 1"));
            }
            Ok((Tensor::new(y, dev)?.to_dtype(dtype)?, Tensor::new(m, dev)?.to_dtype(dtype)?))
        };
        let (y_pop, mask_pop) = labels(Task::Popularity)?;
        let (y_rel, mask_rel) = labels(Task::Reliability)?;
        Ok(Batch { image_features, images, title, tweet, y_pop, y_rel, mask_pop, mask_rel })
    }

    pub fn image_block(&self, batch: &Batch) -> Result<Tensor> {
        let b = batch.title.dims()[0];
        if !self.config.modalities.image {
            return Ok(Tensor::zeros((b, IMAGE_FEATURE_DIM), self.dtype(), self.device())?);
        }
        match (&batch.image_features, &batch.images) {
            (Some(f), _) => Ok(f.clone()),
            (None, Some(imgs)) => self.image.forward(imgs, self.dtype(), self.device()),
            (None, None) => Err(Error::invalid("batch carries no image input")),
        }
    }

    pub fn title_block(&self, batch: &Batch) -> Result<Tensor> {
        self.text_block(&self.title, &batch.title, self.config.modalities.title)
    }

    pub fn tweet_block(&self, batch: &Batch) -> Result<Tensor> {
        self.text_block(&self.tweet, &batch.tweet, self.config.modalities.tweet)
    }

    fn text_block(&self, cnn: &TextCnn, x: &Tensor, enabled: bool) -> Result<Tensor> {
        if enabled {
            cnn.forward(x)
        } else {
            Ok(Tensor::zeros((x.dims()[0], cnn.config.output_dim()), self.dtype(), self.device())?)
        }
    }

    /// `(batch, 2816)` concatenation of image, title and tweet blocks.
    pub fn fuse(&self, image: &Tensor, title: &Tensor, tweet: &Tensor) -> Result<Tensor> {
        let fused = Tensor::cat(&[image, title, tweet], 1)?;
        if fused.dims()[1] != self.config.fused_dim() {
            return Err(Error::config(format!("fused vector has {} dims, expected {}", fused.dims()[1], self.config.fused_dim())));
        }
        Ok(fused)
    }

    pub fn fused(&self, batch: &Batch) -> Result<Tensor> {
        self.fuse(&self.image_block(batch)?, &self.title_block(batch)?, &self.tweet_block(batch)?)
    }

    /// Logits of both heads; dropout is applied to the fused vector when
    /// `rng` is given.
    pub fn logits(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<(Tensor, Tensor)> {
        let mut fused = self.fused(batch)?;
        if let Some(rng) = rng {
            fused = dropout(&fused, self.config.dropout, rng)?;
        }
        Ok((self.head_pop.forward(&fused)?, self.head_rel.forward(&fused)?))
    }

    pub fn predict(&self, items: &[&ArticleInputs]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(128) {
            let batch = self.make_batch(chunk)?;
            let (zp, zr) = self.logits(&batch, None)?;
            let (zp, zr) = (to_vec_f64(&zp)?, to_vec_f64(&zr)?);
            out.extend(zp.into_iter().zip(zr).map(|(a, b)| Prediction { p_pop: sigmoid(a), p_rel: sigmoid(b) }));
        }
        Ok(out)
    }

    /// Mean BCE per enabled task over the labelled rows, summed over tasks.
    pub fn batch_loss(&self, batch: &Batch, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let (zp, zr) = self.logits(batch, rng)?;
        let mut total: Option<Tensor> = None;
        for task in &self.config.tasks {
            let (z, y, m) = match task {
                Task::Popularity => (&zp, &batch.y_pop, &batch.mask_pop),
                Task::Reliability => (&zr, &batch.y_rel, &batch.mask_rel),
            };
            let count = to_vec_f64(&m.sum_all()?)?[0];
            if count == 0.0 {
                continue;
            }
            let l = (bce_with_logits(z, y, CLAMP_EPS)?.mul(m)?.sum_all()? / count)?;
            total = Some(match total {
                Some(t) => (t + l)?,
                None => l,
            });
        }
        match total {
            Some(t) => Ok(t),
            None => Ok(Tensor::new(0.0, self.device())?.to_dtype(self.dtype())?),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        Container {
            meta: serde_json::json!({ "model": self.config, "extra": extra }),
            tensors: self.params.to_named_tensors()?,
        }
        .save(CHECKPOINT_MAGIC, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let c = Container::load(CHECKPOINT_MAGIC, path)?;
        let config: ModelConfig = serde_json::from_value(c.meta["model"].clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let model = Self::new(&config, 0, DType::F32)?;
        model.params.load_named_tensors(&c.tensors)?;
        Ok((model, c.meta["extra"].clone()))
    }
}

/// `(batch, max_len, dim)` stack of one text field.
pub fn sequence_tensor(
    items: &[&ArticleInputs],
    get: impl Fn(&ArticleInputs) -> &EncodedSequence,
    dtype: DType,
    dev: &Device,
) -> Result<Tensor> {
    let first = get(items[0]);
    let (l, d) = (first.max_len, first.dim);
    let mut data = Vec::with_capacity(items.len() * l * d);
    for a in items {
        let s = get(a);
        if (s.max_len, s.dim) != (l, d) {
            return Err(Error::config("sequences in one batch must share length and dimension"));
        }
        data.extend_from_slice(&s.data);
    }
    Ok(Tensor::from_vec(data, (items.len(), l, d), dev)?.to_dtype(dtype)?)
}

/// Cached backbone features when the backbone is frozen and they are
/// available (missing images give zeros), pixels otherwise.
pub fn image_input(
    items: &[&ArticleInputs],
    encoder: &ImageEncoder,
    dtype: DType,
    dev: &Device,
) -> Result<(Option<Tensor>, Option<ImageBatch>)> {
    let cached = items.iter().all(|a| a.image_features.is_some() || a.image.is_none());
    if (encoder.config.frozen && cached) || !encoder.needs_pixels() && items.iter().all(|a| a.image.is_none()) {
        let mut data = Vec::with_capacity(items.len() * IMAGE_FEATURE_DIM);
        for a in items {
            match &a.image_features {
                Some(f) => data.extend_from_slice(f),
                None => data.extend(std::iter::repeat_n(0f32, IMAGE_FEATURE_DIM)),
            }
        }
        return Ok((Some(Tensor::from_vec(data, (items.len(), IMAGE_FEATURE_DIM), dev)?.to_dtype(dtype)?), None));
    }
    let prepared: Vec<&PreparedImage> = items
        .iter()
        .map(|a| a.image.as_ref().ok_or_else(|| Error::invalid(format!("article {} has no image", a.id))))
        .collect::<Result<_>>()?;
    Ok((None, Some(ImageBatch::from_prepared(&prepared, dtype, dev)?)))
}

fn check_labels(y: &[u8]) -> Result<()> {
    if y.iter().any(|&v| v > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok(())
}

/// Binary cross entropy summed over the batch, probabilities clamped to
/// `[ε, 1 − ε]`.
pub fn bce_sum(p: &[f64], y: &[u8]) -> Result<f64> {
    check_labels(y)?;
    if p.len() != y.len() {
        return Err(Error::invalid("prediction and label counts differ"));
    }
    Ok(p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            let p = p.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum())
}

/// `L = L_pop + L_rel`, each summed over the batch.
pub fn multitask_loss(pred: &[Prediction], y_pop: &[u8], y_rel: &[u8]) -> Result<f64> {
    let p: Vec<f64> = pred.iter().map(|p| p.p_pop).collect();
    let r: Vec<f64> = pred.iter().map(|p| p.p_rel).collect();
    Ok(bce_sum(&p, y_pop)? + bce_sum(&r, y_rel)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub n: usize,
    pub accuracy: f64,
    /// Binomial standard error, `sqrt(acc (1 − acc) / n)`.
    pub stderr: f64,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl TaskMetrics {
    pub fn from_predictions(p: &[f64], y: &[u8]) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::invalid("no labelled examples"));
        }
        check_labels(y)?;
        let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
        for (&p, &y) in p.iter().zip(y) {
            match (p >= 0.5, y == 1) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
            }
        }
        let n = p.len();
        let accuracy = (tp + tn) as f64 / n as f64;
        Ok(Self { n, accuracy, stderr: (accuracy * (1.0 - accuracy) / n as f64).sqrt(), tp, tn, fp, fn_ })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub modalities: String,
    pub loss: f64,
    pub popularity: Option<TaskMetrics>,
    pub reliability: Option<TaskMetrics>,
}

impl EvalReport {
    pub fn task(&self, task: Task) -> Option<&TaskMetrics> {
        match task {
            Task::Popularity => self.popularity.as_ref(),
            Task::Reliability => self.reliability.as_ref(),
        }
    }
}

/// Accuracy with standard error and confusion counts per trained task.
/// `loss` is the mean per-article multi-task loss.
pub fn evaluate(model: &MultiTaskModel, inputs: &[ArticleInputs]) -> Result<EvalReport> {
    if inputs.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let refs: Vec<&ArticleInputs> = inputs.iter().collect();
    let preds = model.predict(&refs)?;
    let mut report = EvalReport { modalities: model.config.modalities.label(), loss: 0.0, popularity: None, reliability: None };
    for &task in &model.config.tasks {
        let (p, y): (Vec<f64>, Vec<u8>) =
            preds.iter().zip(inputs).filter_map(|(pr, a)| a.target(task).map(|y| (pr.get(task), y))).unzip();
        if p.is_empty() {
            continue;
        }
        report.loss += bce_sum(&p, &y)? / p.len() as f64;
        let m = TaskMetrics::from_predictions(&p, &y)?;
        match task {
            Task::Popularity => report.popularity = Some(m),
            Task::Reliability => report.reliability = Some(m),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc_pop: Option<f64>,
    pub val_acc_rel: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Mean validation loss over batches, no dropout.
pub fn mean_loss(model: &MultiTaskModel, inputs: &[ArticleInputs], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in inputs.chunks(batch_size) {
        let refs: Vec<&ArticleInputs> = chunk.iter().collect();
        let l = to_vec_f64(&model.batch_loss(&model.make_batch(&refs)?, None)?)?[0];
        total += l * chunk.len() as f64;
    }
    Ok(total / inputs.len() as f64)
}

/// Adam training with the plateau schedule; the model ends up holding the
/// weights of the best validation epoch.
pub fn train(
    model: &mut MultiTaskModel,
    train_set: &[ArticleInputs],
    val_set: &[ArticleInputs],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid("training and validation splits must be non-empty"));
    }
    let prefixes = model.trainable_prefixes();
    let prefixes: Vec<&str> = prefixes.iter().map(String::as_str).collect();
    let vars = model
        .params
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p)) && !n.contains("running_"))
        .map(|n| model.params.get(n).expect("listed").clone())
        .collect();
    let mut opt = adam(vars, config.initial_lr, config.beta1, config.beta2)?;
    let mut schedule = PlateauSchedule::new(config.initial_lr, config.lr_decay_factor, config.lr_patience, config.early_stop_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory { epochs: vec![], best_epoch: 0, best_val_loss: f64::INFINITY };
    let mut best = model.params.snapshot()?;

    for epoch in 1..=config.max_epochs {
        let lr = schedule.lr;
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let items: Vec<&ArticleInputs> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = model.make_batch(&items)?;
            let loss = model.batch_loss(&batch, Some(&mut rng))?;
            let value = to_vec_f64(&loss)?[0];
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, batch: bi, lr, detail: format!("training loss {value}") });
            }
            opt.backward_step(&loss)?;
            train_total += value * chunk.len() as f64;
        }
        let val_loss = mean_loss(model, val_set, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite { epoch, batch: 0, lr, detail: format!("validation loss {val_loss}") });
        }
        let eval = evaluate(model, val_set)?;
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss: train_total / train_set.len() as f64,
            val_loss,
            val_acc_pop: eval.popularity.as_ref().map(|m| m.accuracy),
            val_acc_rel: eval.reliability.as_ref().map(|m| m.accuracy),
        });
        let step = schedule.step(val_loss);
        if step.improved {
            best = model.params.snapshot()?;
            history.best_epoch = epoch;
            history.best_val_loss = val_loss;
        }
        opt.set_learning_rate(step.lr);
        if step.stop {
            break;
        }
    }
    model.params.restore(&best)?;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            text_cnn: TextCnnConfig { filters_per_size: 2, input_dim: 4, ..Default::default() },
            hidden: 8,
            ..Default::default()
        }
    }

    fn seq(seed: u32, len: usize) -> EncodedSequence {
        let data = (0..len * 4).map(|i| (((i as u32 * 7 + seed * 13) % 11) as f32 - 5.0) / 5.0).collect();
        EncodedSequence { data, length: len, max_len: len, dim: 4 }
    }

    fn article(i: u32, y_pop: u8, y_rel: u8) -> ArticleInputs {
        ArticleInputs {
            id: format!("a{i}"),
            url: format!("https://x.org/{i}"),
            image: None,
            image_features: Some((0..IMAGE_FEATURE_DIM).map(|k| ((k as u32 + i) % 5) as f32 * 0.01).collect()),
            title: seq(i, 5),
            tweet: seq(i + 3, 6),
            y_pop: Some(y_pop),
            y_rel: Some(y_rel),
        }
    }

    #[test]
    fn loss_at_half_is_two_log_two_per_example() {
        let pred = vec![Prediction { p_pop: 0.5, p_rel: 0.5 }; 3];
        let l = multitask_loss(&pred, &[0, 1, 1], &[1, 0, 0]).unwrap();
        assert!((l - 6.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let pred = vec![Prediction { p_pop: 1.0, p_rel: 0.0 }];
        let l = multitask_loss(&pred, &[1], &[0]).unwrap();
        assert!(l <= -2.0 * (1.0 - CLAMP_EPS).ln() + 1e-15);
    }

    #[test]
    fn bad_labels_rejected() {
        assert!(matches!(bce_sum(&[0.3], &[2]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn probabilities_in_open_interval() {
        let model = MultiTaskModel::new(&tiny_config(), 1, DType::F32).unwrap();
        let items: Vec<ArticleInputs> = (0..4).map(|i| article(i, 1, 0)).collect();
        let refs: Vec<&ArticleInputs> = items.iter().collect();
        for p in model.predict(&refs).unwrap() {
            assert!(p.p_pop > 0.0 && p.p_pop < 1.0 && p.p_rel > 0.0 && p.p_rel < 1.0);
        }
        assert!(sigmoid(1e4) < 1.0 && sigmoid(-1e4) > 0.0);
    }

    #[test]
    fn disabled_modality_is_zero_block() {
        let mut cfg = tiny_config();
        cfg.modalities = "tweet".parse().unwrap();
        let model = MultiTaskModel::new(&cfg, 1, DType::F64).unwrap();
        let items = [article(1, 0, 1)];
        let refs: Vec<&ArticleInputs> = items.iter().collect();
        let fused = to_vec_f64(&model.fused(&model.make_batch(&refs).unwrap()).unwrap()).unwrap();
        assert!(fused[..IMAGE_FEATURE_DIM + 6].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn modality_parsing() {
        assert_eq!("image,title".parse::<Modalities>().unwrap().label(), "image,title");
        assert!("".parse::<Modalities>().is_err());
        assert!("audio".parse::<Modalities>().is_err());
    }

    #[test]
    fn evaluate_perfect_and_empty() {
        let m = TaskMetrics::from_predictions(&[0.9, 0.1, 0.7], &[1, 0, 1]).unwrap();
        assert_eq!((m.accuracy, m.stderr, m.tp, m.tn), (1.0, 0.0, 2, 1));
        let model = MultiTaskModel::new(&tiny_config(), 1, DType::F32).unwrap();
        assert!(matches!(evaluate(&model, &[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let data: Vec<ArticleInputs> = (0..24).map(|i| article(i, (i % 2) as u8, ((i / 2) % 2) as u8)).collect();
        let cfg = TrainConfig { batch_size: 8, max_epochs: 3, initial_lr: 1e-3, ..Default::default() };
        let run = || {
            let mut m = MultiTaskModel::new(&tiny_config(), 5, DType::F32).unwrap();
            let h = train(&mut m, &data[..16], &data[16..], &cfg).unwrap();
            (m, h)
        };
        let (m1, h1) = run();
        let (_, h2) = run();
        assert_eq!(h1, h2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m1.save(&path, serde_json::json!({"k": 1})).unwrap();
        let (m3, extra) = MultiTaskModel::load(&path).unwrap();
        assert_eq!(extra["k"], 1);
        let refs: Vec<&ArticleInputs> = data.iter().collect();
        assert_eq!(m1.predict(&refs).unwrap(), m3.predict(&refs).unwrap());
    }
}
