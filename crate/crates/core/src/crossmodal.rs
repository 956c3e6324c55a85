//! Joint image/text embedding on the 512-D unit sphere, the N-pairs margin
//! loss, K-way retrieval and the two-domain generalization grid.

use std::fmt::Write as _;
use std::path::Path;

use candle::{DType, Device, Tensor, D};
use candle_nn::Optimizer;
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{Container, CHECKPOINT_MAGIC};
use crate::encoders::{ImageBatch, ImageEncoder, ImageEncoderConfig, PreparedImage, TextCnn, TextCnnConfig, IMAGE_FEATURE_DIM};
use crate::error::{Error, Result};
use crate::multitask::{image_input, sequence_tensor, ArticleInputs, TrainConfig};
use crate::nn::{adam, to_vec_f64, Linear, ParamStore, PlateauSchedule};

pub const EMBED_DIM: usize = 512;
pub const DEFAULT_MARGIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModalConfig {
    pub text_cnn: TextCnnConfig,
    pub image: ImageEncoderConfig,
    pub embed_dim: usize,
    pub margin: f64,
    /// Adds the text-anchored hinge terms. Off by default.
    pub symmetric: bool,
}

impl Default for CrossModalConfig {
    fn default() -> Self {
        Self {
            text_cnn: TextCnnConfig::default(),
            image: ImageEncoderConfig::default(),
            embed_dim: EMBED_DIM,
            margin: DEFAULT_MARGIN,
            symmetric: false,
        }
    }
}

pub struct CrossModalEmbedder {
    pub params: ParamStore,
    pub config: CrossModalConfig,
    pub image: ImageEncoder,
    pub image_proj: Linear,
    pub title: TextCnn,
    pub tweet: TextCnn,
    pub text_proj: Linear,
}

/// Row-wise L2 normalization; a zero row is a degenerate embedding.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norms = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    if to_vec_f64(&norms)?.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::DegenerateEmbedding("pre-normalization vector has zero or non-finite norm".into()));
    }
    Ok(x.broadcast_div(&norms)?)
}

impl CrossModalEmbedder {
    pub fn new(config: &CrossModalConfig, seed: u64, dtype: DType) -> Result<Self> {
        if config.embed_dim == 0 || !(config.margin >= 0.0) {
            return Err(Error::config("embedding width must be positive and the margin non-negative"));
        }
        let mut params = ParamStore::new(seed, dtype);
        let image = ImageEncoder::new(&mut params, "image", &config.image)?;
        let image_proj = params.linear("image_proj", IMAGE_FEATURE_DIM, config.embed_dim, true)?;
        let title = TextCnn::new(&mut params, "title", &config.text_cnn)?;
        let tweet = TextCnn::new(&mut params, "tweet", &config.text_cnn)?;
        let text_proj = params.linear("text_proj", 2 * config.text_cnn.output_dim(), config.embed_dim, true)?;
        Ok(Self { params, config: config.clone(), image, image_proj, title, tweet, text_proj })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    pub fn trainable_prefixes(&self) -> Vec<String> {
        let mut p: Vec<String> = ["image_proj.", "title.", "tweet.", "text_proj."].map(String::from).to_vec();
        p.extend(self.image.trainable_prefixes());
        p
    }

    /// Same caching contract as the multi-task model.
    pub fn cache_image_features(&self, inputs: &mut [ArticleInputs]) -> Result<()> {
        for chunk in inputs.chunks_mut(64) {
            let prepared: Vec<&PreparedImage> = chunk.iter().filter_map(|a| a.image.as_ref()).collect();
            if prepared.is_empty() {
                continue;
            }
            let batch = ImageBatch::from_prepared(&prepared, self.dtype(), self.device())?;
            let feats = self.image.forward(&batch, self.dtype(), self.device())?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            let mut it = feats.into_iter();
            for a in chunk.iter_mut().filter(|a| a.image.is_some()) {
                a.image_features = it.next();
            }
        }
        Ok(())
    }

    /// Pre-normalization image vectors, `(batch, embed_dim)`.
    pub fn image_raw(&self, items: &[&ArticleInputs]) -> Result<Tensor> {
        let feats = match image_input(items, &self.image, self.dtype(), self.device())? {
            (Some(f), _) => f,
            (None, Some(b)) => self.image.forward(&b, self.dtype(), self.device())?,
            (None, None) => return Err(Error::invalid("batch carries no image input")),
        };
        self.image_proj.forward(&feats)
    }

    /// Pre-normalization text vectors, `(batch, embed_dim)`.
    pub fn text_raw(&self, items: &[&ArticleInputs]) -> Result<Tensor> {
        let title = sequence_tensor(items, |a| &a.title, self.dtype(), self.device())?;
        let tweet = sequence_tensor(items, |a| &a.tweet, self.dtype(), self.device())?;
        let joined = Tensor::cat(&[self.title.forward(&title)?, self.tweet.forward(&tweet)?], 1)?;
        self.text_proj.forward(&joined)
    }

    pub fn embed_images(&self, items: &[&ArticleInputs]) -> Result<Tensor> {
        l2_normalize(&self.image_raw(items)?)
    }

    pub fn embed_texts(&self, items: &[&ArticleInputs]) -> Result<Tensor> {
        l2_normalize(&self.text_raw(items)?)
    }

    pub fn embed_image(&self, item: &ArticleInputs) -> Result<Vec<f64>> {
        to_vec_f64(&self.embed_images(&[item])?)
    }

    pub fn embed_text(&self, item: &ArticleInputs) -> Result<Vec<f64>> {
        to_vec_f64(&self.embed_texts(&[item])?)
    }

    /// Image and text embeddings for every item, in order.
    pub fn embed_all(&self, items: &[ArticleInputs]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (mut img, mut txt) = (Vec::with_capacity(items.len()), Vec::with_capacity(items.len()));
        for chunk in items.chunks(128) {
            let refs: Vec<&ArticleInputs> = chunk.iter().collect();
            let rows = |t: Tensor| -> Result<Vec<Vec<f64>>> { Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?) };
            img.extend(rows(self.embed_images(&refs)?)?);
            txt.extend(rows(self.embed_texts(&refs)?)?);
        }
        Ok((img, txt))
    }

    /// Summed N-pairs loss of one batch.
    pub fn batch_loss(&self, items: &[&ArticleInputs]) -> Result<Tensor> {
        let f = self.embed_images(items)?;
        let g = self.embed_texts(items)?;
        npairs_loss_tensor(&f, &g, self.config.margin, self.config.symmetric)
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        Container {
            meta: serde_json::json!({ "embedder": self.config, "extra": extra }),
            tensors: self.params.to_named_tensors()?,
        }
        .save(CHECKPOINT_MAGIC, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let c = Container::load(CHECKPOINT_MAGIC, path)?;
        let config: CrossModalConfig = serde_json::from_value(c.meta["embedder"].clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let model = Self::new(&config, 0, DType::F32)?;
        model.params.load_named_tensors(&c.tensors)?;
        Ok((model, c.meta["extra"].clone()))
    }
}

/// `Σ_i Σ_{j≠i} [d²(F_i, G_i) − d²(F_i, G_j) + α]₊` for `(batch, dim)`
/// tensors; with `symmetric`, the text-anchored terms
/// `[d²(F_i, G_i) − d²(F_j, G_i) + α]₊` are added.
pub fn npairs_loss_tensor(f: &Tensor, g: &Tensor, margin: f64, symmetric: bool) -> Result<Tensor> {
    let (b, _) = f.dims2()?;
    if b < 2 {
        return Err(Error::invalid("N-pairs loss needs at least two pairs"));
    }
    if f.dims() != g.dims() {
        return Err(Error::invalid("image and text embeddings differ in shape"));
    }
    // d2[i, j] = ‖F_i − G_j‖²
    let diff = f.unsqueeze(1)?.broadcast_sub(&g.unsqueeze(0)?)?;
    let d2 = diff.sqr()?.sum(D::Minus1)?;
    let pos = (f - g)?.sqr()?.sum(D::Minus1)?;
    let off_diag = (Tensor::ones((b, b), f.dtype(), f.device())? - Tensor::eye(b, f.dtype(), f.device())?)?;
    let hinge = |anchor_pos: &Tensor, neg: &Tensor| -> Result<Tensor> {
        Ok(anchor_pos.broadcast_sub(neg)?.affine(1.0, margin)?.relu()?.mul(&off_diag)?.sum_all()?)
    };
    let mut loss = hinge(&pos.unsqueeze(1)?, &d2)?;
    if symmetric {
        loss = (loss + hinge(&pos.unsqueeze(1)?, &d2.t()?)?)?;
    }
    Ok(loss)
}

/// [`npairs_loss_tensor`] on plain rows, in double precision.
pub fn npairs_loss(f: &[Vec<f64>], g: &[Vec<f64>], margin: f64) -> Result<f64> {
    if f.len() < 2 {
        return Err(Error::invalid("N-pairs loss needs at least two pairs"));
    }
    let to_t = |rows: &[Vec<f64>]| -> Result<Tensor> {
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("rows differ in dimension"));
        }
        Ok(Tensor::from_vec(rows.concat(), (rows.len(), d), &Device::Cpu)?)
    };
    to_vec_f64(&npairs_loss_tensor(&to_t(f)?, &to_t(g)?, margin, false)?).map(|v| v[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedHistory {
    pub epochs: Vec<EmbedEpoch>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Mean per-anchor N-pairs loss over consecutive batches.
pub fn mean_npairs_loss(model: &CrossModalEmbedder, items: &[ArticleInputs], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut anchors = 0usize;
    for chunk in items.chunks(batch_size).filter(|c| c.len() >= 2) {
        let refs: Vec<&ArticleInputs> = chunk.iter().collect();
        total += to_vec_f64(&model.batch_loss(&refs)?)?[0];
        anchors += chunk.len();
    }
    if anchors == 0 {
        return Err(Error::invalid("need at least two pairs to compute a loss"));
    }
    Ok(total / anchors as f64)
}

/// Adam with the plateau schedule on the mean per-anchor loss; the model
/// keeps the best validation weights.
pub fn train_embedding(
    model: &mut CrossModalEmbedder,
    train_set: &[ArticleInputs],
    val_set: &[ArticleInputs],
    config: &TrainConfig,
) -> Result<EmbedHistory> {
    config.validate()?;
    if train_set.len() < 2 || val_set.len() < 2 {
        return Err(Error::invalid("embedding training needs at least two pairs per split"));
    }
    let prefixes = model.trainable_prefixes();
    let vars = model
        .params
        .names()
        .filter(|n| prefixes.iter().any(|p| n.starts_with(p.as_str())) && !n.contains("running_"))
        .map(|n| model.params.get(n).expect("listed").clone())
        .collect();
    let mut opt = adam(vars, config.initial_lr, config.beta1, config.beta2)?;
    let mut schedule = PlateauSchedule::new(config.initial_lr, config.lr_decay_factor, config.lr_patience, config.early_stop_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = EmbedHistory { epochs: vec![], best_epoch: 0, best_val_loss: f64::INFINITY };
    let mut best = model.params.snapshot()?;
    for epoch in 1..=config.max_epochs {
        let lr = schedule.lr;
        order.shuffle(&mut rng);
        let (mut total, mut anchors) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let items: Vec<&ArticleInputs> = chunk.iter().map(|&i| &train_set[i]).collect();
            let loss = (model.batch_loss(&items)? / chunk.len() as f64)?;
            let value = to_vec_f64(&loss)?[0];
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, batch: bi, lr, detail: format!("N-pairs loss {value}") });
            }
            opt.backward_step(&loss)?;
            total += value * chunk.len() as f64;
            anchors += chunk.len();
        }
        let val_loss = mean_npairs_loss(model, val_set, config.batch_size)?;
        history.epochs.push(EmbedEpoch { epoch, lr, train_loss: total / anchors.max(1) as f64, val_loss });
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

fn trial_rng(seed: u64, query_id: &str, trial: usize) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(query_id.as_bytes());
    h.update((trial as u64).to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KwayResult {
    pub k: usize,
    pub trials: usize,
    pub hits: usize,
    pub accuracy: f64,
}

/// K-way retrieval over precomputed embeddings. For every query image and
/// trial, `K − 1` negative texts are drawn from the other items whose URL
/// differs, with an RNG derived from `(seed, query id, trial)`. A hit means
/// the paired text is strictly closer than every negative.
pub fn kway_from_embeddings(
    images: &[Vec<f64>],
    texts: &[Vec<f64>],
    ids: &[String],
    urls: &[String],
    k: usize,
    trials_per_query: usize,
    seed: u64,
) -> Result<KwayResult> {
    if k < 2 {
        return Err(Error::invalid(format!("K must be at least 2, got {k}")));
    }
    let n = images.len();
    if texts.len() != n || ids.len() != n || urls.len() != n {
        return Err(Error::invalid("embedding, id and URL counts differ"));
    }
    if n < k {
        return Err(Error::invalid(format!("test set of {n} is smaller than K = {k}")));
    }
    let mut hits = 0;
    let mut trials = 0;
    for q in 0..n {
        let pool: Vec<usize> = (0..n).filter(|&j| j != q && urls[j] != urls[q]).collect();
        if pool.len() < k - 1 {
            return Err(Error::invalid(format!("query {} has only {} eligible negatives", ids[q], pool.len())));
        }
        let pos = sq_dist(&images[q], &texts[q]);
        for t in 0..trials_per_query {
            let mut rng = trial_rng(seed, &ids[q], t);
            let negs = sample(&mut rng, pool.len(), k - 1);
            if negs.iter().all(|j| pos < sq_dist(&images[q], &texts[pool[j]])) {
                hits += 1;
            }
            trials += 1;
        }
    }
    Ok(KwayResult { k, trials, hits, accuracy: hits as f64 / trials as f64 })
}

pub fn kway_accuracy(
    model: &CrossModalEmbedder,
    test_set: &[ArticleInputs],
    k: usize,
    trials_per_query: usize,
    seed: u64,
) -> Result<KwayResult> {
    if k < 2 {
        return Err(Error::invalid(format!("K must be at least 2, got {k}")));
    }
    let (img, txt) = model.embed_all(test_set)?;
    let ids: Vec<String> = test_set.iter().map(|a| a.id.clone()).collect();
    let urls: Vec<String> = test_set.iter().map(|a| a.url.clone()).collect();
    kway_from_embeddings(&img, &txt, &ids, &urls, k, trials_per_query, seed)
}

/// One domain's splits for the generalization grid.
#[derive(Debug, Clone)]
pub struct DomainSplits {
    pub name: String,
    pub train: Vec<ArticleInputs>,
    pub val: Vec<ArticleInputs>,
    pub test: Vec<ArticleInputs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub train_domain: String,
    pub test_domain: String,
    pub k: usize,
    /// Mean over evaluation seeds.
    pub accuracy: f64,
    pub stderr: f64,
    /// `(other − same) / same` on cross-domain cells; `None` on the diagonal.
    pub relative_diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainGrid {
    pub domains: [String; 2],
    pub ks: Vec<usize>,
    pub train_size: usize,
    pub cells: Vec<GridCell>,
}

impl CrossDomainGrid {
    pub fn cell(&self, train: &str, test: &str, k: usize) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.train_domain == train && c.test_domain == test && c.k == k)
    }

    /// Relative accuracy loss of the model trained on `train` when moved to
    /// the other domain (positive means worse).
    pub fn drop(&self, train: &str, k: usize) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.train_domain == train && c.test_domain != train && c.k == k)
            .and_then(|c| c.relative_diff)
            .map(|d| -d)
    }

    /// Aligned text table: one row per (train, test) pair, one column per K.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        write!(s, "{:<12} {:<12}", "train", "test").unwrap();
        for k in &self.ks {
            write!(s, " {:>20}", format!("{k}-way")).unwrap();
        }
        s.push('\n');
        for train in &self.domains {
            for test in &self.domains {
                write!(s, "{train:<12} {test:<12}").unwrap();
                for &k in &self.ks {
                    let c = self.cell(train, test, k).expect("grid is complete");
                    let text = match c.relative_diff {
                        Some(d) => format!("{:.3} ({:+.2}%)", c.accuracy, 100.0 * d),
                        None => format!("{:.3}", c.accuracy),
                    };
                    write!(s, " {text:>20}").unwrap();
                }
                s.push('\n');
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossDomainConfig {
    pub ks: Vec<usize>,
    pub trials_per_query: usize,
    pub eval_seeds: Vec<u64>,
    pub seed: u64,
}

impl Default for CrossDomainConfig {
    fn default() -> Self {
        Self { ks: vec![3, 5, 10], trials_per_query: 1, eval_seeds: vec![0, 1, 2, 3, 4], seed: 0 }
    }
}

fn undersample(items: &[ArticleInputs], n: usize, seed: u64) -> Vec<ArticleInputs> {
    if items.len() <= n {
        return items.to_vec();
    }
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), items.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

/// Trains one embedder per domain on equal-size training sets and evaluates
/// both on both test sets with shared negative draws.
pub fn cross_domain_experiment(
    a: &DomainSplits,
    b: &DomainSplits,
    model: &CrossModalConfig,
    train: &TrainConfig,
    config: &CrossDomainConfig,
) -> Result<CrossDomainGrid> {
    if config.eval_seeds.is_empty() {
        return Err(Error::config("at least one evaluation seed is required"));
    }
    let n = a.train.len().min(b.train.len());
    let mut per_domain = Vec::new();
    for (i, d) in [a, b].into_iter().enumerate() {
        let mut train_set = undersample(&d.train, n, config.seed.wrapping_add(i as u64));
        let mut val_set = d.val.clone();
        let mut embedder = CrossModalEmbedder::new(model, config.seed, DType::F32)?;
        embedder.cache_image_features(&mut train_set)?;
        embedder.cache_image_features(&mut val_set)?;
        train_embedding(&mut embedder, &train_set, &val_set, train)?;
        per_domain.push(embedder);
    }
    let mut raw = Vec::new();
    for (mi, embedder) in per_domain.iter().enumerate() {
        for test in [a, b] {
            let (img, txt) = embedder.embed_all(&test.test)?;
            let ids: Vec<String> = test.test.iter().map(|x| x.id.clone()).collect();
            let urls: Vec<String> = test.test.iter().map(|x| x.url.clone()).collect();
            for &k in &config.ks {
                let accs: Vec<f64> = config
                    .eval_seeds
                    .iter()
                    .map(|&s| kway_from_embeddings(&img, &txt, &ids, &urls, k, config.trials_per_query, s).map(|r| r.accuracy))
                    .collect::<Result<_>>()?;
                let m = accs.len() as f64;
                let mean = accs.iter().sum::<f64>() / m;
                let stderr = if accs.len() > 1 {
                    (accs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0) / m).sqrt()
                } else {
                    0.0
                };
                raw.push((mi, test.name.clone(), k, mean, stderr));
            }
        }
    }
    let names = [a.name.clone(), b.name.clone()];
    let mut cells = Vec::new();
    for &(mi, ref test, k, acc, se) in &raw {
        let train_name = &names[mi];
        let relative_diff = if test == train_name {
            None
        } else {
            let same = raw.iter().find(|r| r.0 == mi && &r.1 == train_name && r.2 == k).expect("diagonal cell").3;
            Some(if same > 0.0 { (acc - same) / same } else { 0.0 })
        };
        cells.push(GridCell { train_domain: train_name.clone(), test_domain: test.clone(), k, accuracy: acc, stderr: se, relative_diff });
    }
    Ok(CrossDomainGrid { domains: names, ks: config.ks.clone(), train_size: n, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn brute_force(f: &[Vec<f64>], g: &[Vec<f64>], margin: f64) -> f64 {
        let mut total = 0.0;
        for i in 0..f.len() {
            for j in 0..f.len() {
                if i != j {
                    total += (sq_dist(&f[i], &g[i]) - sq_dist(&f[i], &g[j]) + margin).max(0.0);
                }
            }
        }
        total
    }

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    }

    #[test]
    fn loss_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let f = unit_rows(&mut rng, 4, 512);
            let g = unit_rows(&mut rng, 4, 512);
            assert!((npairs_loss(&f, &g, 0.5).unwrap() - brute_force(&f, &g, 0.5)).abs() < 1e-10);
        }
    }

    #[test]
    fn hinge_cases() {
        let e = |i: usize| -> Vec<f64> { (0..3).map(|k| if k == i { 1.0 } else { 0.0 }).collect() };
        // Positives coincide, negatives at distance² 2 ≥ α.
        let f = vec![e(0), e(1), e(2)];
        assert_eq!(npairs_loss(&f, &f, 0.5).unwrap(), 0.0);
        // All texts equal: every term is exactly α.
        let g = vec![e(0); 3];
        let f = vec![e(1), e(2), vec![0.0, 0.6, 0.8]];
        assert_eq!(npairs_loss(&f, &g, 0.5).unwrap(), 6.0 * 0.5);
        assert!(matches!(npairs_loss(&f[..1], &g[..1], 0.5), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn symmetric_variant_adds_text_anchored_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = unit_rows(&mut rng, 5, 8);
        let g = unit_rows(&mut rng, 5, 8);
        let t = |r: &[Vec<f64>]| Tensor::from_vec(r.concat(), (5, 8), &Device::Cpu).unwrap();
        let sym = to_vec_f64(&npairs_loss_tensor(&t(&f), &t(&g), 0.5, true).unwrap()).unwrap()[0];
        let mut extra = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    extra += (sq_dist(&f[i], &g[i]) - sq_dist(&f[j], &g[i]) + 0.5).max(0.0);
                }
            }
        }
        assert!((sym - brute_force(&f, &g, 0.5) - extra).abs() < 1e-10);
    }

    #[test]
    fn perfect_alignment_scores_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = unit_rows(&mut rng, 30, 16);
        let ids: Vec<String> = (0..30).map(|i| i.to_string()).collect();
        let r = kway_from_embeddings(&e, &e, &ids, &ids, 10, 3, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.trials, 90);
        assert!(kway_from_embeddings(&e, &e, &ids, &ids, 1, 1, 0).is_err());
        assert!(kway_from_embeddings(&e[..5], &e[..5], &ids[..5], &ids[..5], 10, 1, 0).is_err());
    }

    #[test]
    fn orthogonal_transform_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = unit_rows(&mut rng, 40, 2);
        let txt = unit_rows(&mut rng, 40, 2);
        let rot = |v: &Vec<f64>| vec![0.6 * v[0] - 0.8 * v[1], 0.8 * v[0] + 0.6 * v[1]];
        let ids: Vec<String> = (0..40).map(|i| format!("q{i}")).collect();
        let a = kway_from_embeddings(&img, &txt, &ids, &ids, 5, 4, 9).unwrap();
        let b = kway_from_embeddings(
            &img.iter().map(rot).collect::<Vec<_>>(),
            &txt.iter().map(rot).collect::<Vec<_>>(),
            &ids,
            &ids,
            5,
            4,
            9,
        )
        .unwrap();
        assert_eq!(a.hits, b.hits);
    }

    #[test]
    fn negatives_skip_same_url() {
        // Two items share a URL and an identical text; the duplicate is never a negative.
        let img = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]];
        let txt = vec![vec![0.9, 0.1], vec![0.9, 0.1], vec![-1.0, 0.0], vec![0.0, -1.0]];
        let ids: Vec<String> = (0..4).map(|i| i.to_string()).collect();
        let urls = vec!["u".to_string(), "u".into(), "v".into(), "w".into()];
        let r = kway_from_embeddings(&img[..1], &txt[..1], &ids[..1], &urls[..1], 2, 1, 0);
        assert!(r.is_err());
        let r = kway_from_embeddings(&img, &txt, &ids, &urls, 3, 5, 0).unwrap();
        assert!(r.hits >= 5);
    }

    #[test]
    fn zero_vector_is_degenerate() {
        let z = Tensor::zeros((2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(l2_normalize(&z), Err(Error::DegenerateEmbedding(_))));
        let x = Tensor::new(&[[3.0f64, 4.0]], &Device::Cpu).unwrap();
        let y = to_vec_f64(&l2_normalize(&(x.clone() * 7.0).unwrap()).unwrap()).unwrap();
        assert_eq!(y, to_vec_f64(&l2_normalize(&x).unwrap()).unwrap());
    }
}
