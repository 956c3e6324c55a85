//! Grad-CAM and SmoothGrad maps over image regions and text tokens, plus the
//! ranked per-class token report.

use std::collections::HashMap;
use std::fmt::Write as _;

use candle::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoders::{ImageEncoderConfig, PreparedImage, TextCnn};
use crate::error::{Error, Result};
use crate::multitask::{ArticleInputs, MultiTaskModel, Task};
use crate::nn::to_vec_f64;
use crate::textenc::TWEET_SEPARATOR;

pub const DEFAULT_SAMPLES: usize = 25;
pub const DEFAULT_NOISE_FRACTION: f64 = 0.1;
pub const MIN_TOKEN_COUNT: usize = 20;
pub const TOP_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetClass {
    Positive,
    Negative,
}

impl std::str::FromStr for TargetClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" | "popular" | "reliable" | "1" => Ok(TargetClass::Positive),
            "negative" | "unpopular" | "unreliable" | "0" => Ok(TargetClass::Negative),
            other => Err(Error::config(format!("unknown class `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Target {
    pub task: Task,
    pub class: TargetClass,
}

impl Target {
    pub fn all() -> [Target; 4] {
        let t = |task, class| Target { task, class };
        [
            t(Task::Popularity, TargetClass::Positive),
            t(Task::Popularity, TargetClass::Negative),
            t(Task::Reliability, TargetClass::Positive),
            t(Task::Reliability, TargetClass::Negative),
        ]
    }

    pub fn label(&self) -> &'static str {
        match (self.task, self.class) {
            (Task::Popularity, TargetClass::Positive) => "popular",
            (Task::Popularity, TargetClass::Negative) => "unpopular",
            (Task::Reliability, TargetClass::Positive) => "reliable",
            (Task::Reliability, TargetClass::Negative) => "unreliable",
        }
    }

    fn sign(&self) -> f64 {
        match self.class {
            TargetClass::Positive => 1.0,
            TargetClass::Negative => -1.0,
        }
    }

    /// Whether an article's ground truth belongs to this target's class.
    pub fn matches(&self, article: &ArticleInputs) -> bool {
        let want = match self.class {
            TargetClass::Positive => 1,
            TargetClass::Negative => 0,
        };
        article.target(self.task) == Some(want)
    }
}

/// A max-normalized, non-negative map: `shape` is `[h, w]` for images and
/// `[tokens]` for text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub target: Target,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Divides by the maximum; an all-zero map stays zero.
pub fn max_normalize(mut v: Vec<f64>) -> Vec<f64> {
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter_mut().for_each(|x| *x /= max);
    }
    v
}

/// Gradient-weighted channel sums for each activation block.
///
/// Each block is `(batch, channels, spatial...)`. `logits` maps the blocks to
/// a `(batch,)` tensor whose rows depend only on their own batch row. The
/// result per block is `Σ_c w_bc A_bc` flattened over the spatial axes, with
/// `w_bc` the spatial mean of `∂logit_b/∂A_bc`.
pub fn weighted_activations(
    blocks: &[Tensor],
    logits: impl FnOnce(&[Tensor]) -> Result<Tensor>,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let vars: Vec<Var> = blocks.iter().map(|b| Var::from_tensor(&b.detach())).collect::<candle::Result<_>>()?;
    let inputs: Vec<Tensor> = vars.iter().map(|v| v.as_tensor().clone()).collect();
    let y = logits(&inputs)?.sum_all()?;
    let grads = y.backward()?;
    let mut out = Vec::with_capacity(vars.len());
    for v in &vars {
        let a = v.as_tensor();
        let dims = a.dims();
        let (b, c) = (dims[0], dims[1]);
        let spatial: usize = dims[2..].iter().product();
        let a_vals = to_vec_f64(a)?;
        let g_vals = match grads.get(v) {
            Some(g) => to_vec_f64(g)?,
            None => vec![0.0; a_vals.len()],
        };
        let mut maps = vec![vec![0.0; spatial]; b];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * spatial;
                let w = g_vals[off..off + spatial].iter().sum::<f64>() / spatial as f64;
                if w == 0.0 {
                    continue;
                }
                for (m, &av) in maps[bi].iter_mut().zip(&a_vals[off..off + spatial]) {
                    *m += w * av;
                }
            }
        }
        out.push(maps);
    }
    Ok(out)
}

/// Rectified Grad-CAM maps (not normalized) for a single activation block.
pub fn gradcam_raw(block: &Tensor, logits: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Vec<Vec<f64>>> {
    let mut maps = weighted_activations(std::slice::from_ref(block), |b| logits(&b[0]))?;
    let mut m = maps.remove(0);
    m.iter_mut().flatten().for_each(|x| *x = x.max(0.0));
    Ok(m)
}

/// Projects per-position filter contributions onto tokens: token `t`
/// collects every position whose width-`k` window covers it. Positions at or
/// beyond `length` score exactly zero.
pub fn project_to_tokens(blocks: &[(usize, Vec<f64>)], length: usize, max_len: usize) -> Vec<f64> {
    let mut scores = vec![0.0; max_len];
    for (k, contrib) in blocks {
        let half = k / 2;
        for (p, &c) in contrib.iter().enumerate() {
            let lo = p.saturating_sub(half);
            let hi = (p + half).min(max_len - 1);
            for s in &mut scores[lo..=hi] {
                *s += c;
            }
        }
    }
    for (t, s) in scores.iter_mut().enumerate() {
        *s = if t < length { s.max(0.0) } else { 0.0 };
    }
    scores
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextField {
    Title,
    Tweet,
}

impl std::str::FromStr for TextField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "title" => Ok(TextField::Title),
            "tweet" => Ok(TextField::Tweet),
            other => Err(Error::config(format!("unknown text field `{other}`"))),
        }
    }
}

fn head_logit(model: &MultiTaskModel, target: Target, image: &Tensor, title: &Tensor, tweet: &Tensor) -> Result<Tensor> {
    let fused = model.fuse(image, title, tweet)?;
    Ok(model.head(target.task).forward(&fused)?.affine(target.sign(), 0.0)?)
}

/// Raw image maps for a batch of pixel tensors `(batch, 3, s, s)`; returns
/// the maps and the conv-layer grid size `(h, w)`.
pub fn image_gradcam_batch(
    model: &MultiTaskModel,
    items: &[&ArticleInputs],
    pixels: &Tensor,
    target: Target,
) -> Result<(Vec<Vec<f64>>, (usize, usize))> {
    let fmap = model.image.feature_map(pixels)?;
    let (_, _, h, w) = fmap.dims4()?;
    let batch = model.make_batch(items)?;
    let title = model.title_block(&batch)?.detach();
    let tweet = model.tweet_block(&batch)?.detach();
    let enabled = model.config.modalities.image;
    let maps = gradcam_raw(&fmap, |a| {
        let img = if enabled {
            model.image.pool_map(a)?
        } else {
            Tensor::zeros((a.dims()[0], crate::encoders::IMAGE_FEATURE_DIM), a.dtype(), a.device())?
        };
        head_logit(model, target, &img, &title, &tweet)
    })?;
    Ok((maps, (h, w)))
}

/// Raw per-token maps for a batch of text inputs `(batch, max_len, dim)`.
pub fn text_gradcam_batch(
    model: &MultiTaskModel,
    items: &[&ArticleInputs],
    field: TextField,
    x: &Tensor,
    target: Target,
) -> Result<Vec<Vec<f64>>> {
    let batch = model.make_batch(items)?;
    let image = model.image_block(&batch)?.detach();
    let (cnn, enabled): (&TextCnn, bool) = match field {
        TextField::Title => (&model.title, model.config.modalities.title),
        TextField::Tweet => (&model.tweet, model.config.modalities.tweet),
    };
    let other = match field {
        TextField::Title => model.tweet_block(&batch)?.detach(),
        TextField::Tweet => model.title_block(&batch)?.detach(),
    };
    let acts = cnn.activations(x)?;
    let weighted = weighted_activations(&acts, |a| {
        let own = if enabled {
            cnn.pool(a)?
        } else {
            Tensor::zeros((a[0].dims()[0], cnn.config.output_dim()), a[0].dtype(), a[0].device())?
        };
        match field {
            TextField::Title => head_logit(model, target, &image, &own, &other),
            TextField::Tweet => head_logit(model, target, &image, &other, &own),
        }
    })?;
    let widths = cnn.filter_widths();
    let max_len = x.dims()[1];
    Ok((0..items.len())
        .map(|b| {
            let seq = match field {
                TextField::Title => &items[b].title,
                TextField::Tweet => &items[b].tweet,
            };
            let blocks: Vec<(usize, Vec<f64>)> = widths.iter().zip(&weighted).map(|(&k, w)| (k, w[b].clone())).collect();
            project_to_tokens(&blocks, seq.length, max_len)
        })
        .collect())
}

fn pixel_tensor(model: &MultiTaskModel, image: &PreparedImage) -> Result<Tensor> {
    let s = image.size;
    Ok(Tensor::from_vec(image.pixels.clone(), (1, 3, s, s), model.device())?.to_dtype(model.dtype())?)
}

fn text_tensor(model: &MultiTaskModel, article: &ArticleInputs, field: TextField) -> Result<Tensor> {
    let seq = match field {
        TextField::Title => &article.title,
        TextField::Tweet => &article.tweet,
    };
    if seq.length == 0 {
        return Err(Error::invalid("text input has no tokens"));
    }
    Ok(Tensor::from_vec(seq.data.clone(), (1, seq.max_len, seq.dim), model.device())?.to_dtype(model.dtype())?)
}

fn article_image(article: &ArticleInputs) -> Result<&PreparedImage> {
    article.image.as_ref().ok_or_else(|| Error::invalid(format!("article {} has no image", article.id)))
}

pub fn gradcam_image(model: &MultiTaskModel, article: &ArticleInputs, target: Target) -> Result<SaliencyMap> {
    let x = pixel_tensor(model, article_image(article)?)?;
    let (mut maps, (h, w)) = image_gradcam_batch(model, &[article], &x, target)?;
    Ok(SaliencyMap { target, shape: vec![h, w], values: max_normalize(maps.remove(0)) })
}

pub fn token_attention(model: &MultiTaskModel, article: &ArticleInputs, field: TextField, target: Target) -> Result<SaliencyMap> {
    let x = text_tensor(model, article, field)?;
    let mut maps = text_gradcam_batch(model, &[article], field, &x, target)?;
    let values = max_normalize(maps.remove(0));
    Ok(SaliencyMap { target, shape: vec![values.len()], values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothGradConfig {
    pub samples: usize,
    /// Absolute noise scale; `None` uses 0.1 × the input's dynamic range.
    pub sigma: Option<f64>,
    pub seed: u64,
}

impl Default for SmoothGradConfig {
    fn default() -> Self {
        Self { samples: DEFAULT_SAMPLES, sigma: None, seed: 0 }
    }
}

fn dynamic_range(v: &[f32]) -> f64 {
    let (lo, hi) = v.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    if lo.is_finite() {
        (hi - lo) as f64
    } else {
        0.0
    }
}

/// Average of raw maps over `samples` perturbed copies of `input`. Noise is
/// added only where `noise_mask` is true. Returns `None` for zero noise.
pub fn smoothgrad_raw(
    input: &Tensor,
    noise_mask: &[bool],
    samples: usize,
    sigma: f64,
    seed: u64,
    mut raw_map: impl FnMut(&Tensor) -> Result<Vec<f64>>,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::invalid("SmoothGrad needs at least one sample"));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise scale must be a finite non-negative number, got {sigma}")));
    }
    if sigma == 0.0 {
        return raw_map(input);
    }
    let base = to_vec_f64(input)?;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc: Option<Vec<f64>> = None;
    for _ in 0..samples {
        let noisy: Vec<f64> = base
            .iter()
            .zip(noise_mask)
            .map(|(&v, &m)| if m { v + normal.sample(&mut rng) } else { v })
            .collect();
        let t = Tensor::from_vec(noisy, input.shape(), input.device())?.to_dtype(input.dtype())?;
        let m = raw_map(&t)?;
        match &mut acc {
            Some(a) => a.iter_mut().zip(&m).for_each(|(x, y)| *x += y),
            None => acc = Some(m),
        }
    }
    let mut a = acc.expect("samples ≥ 1");
    a.iter_mut().for_each(|x| *x /= samples as f64);
    Ok(a)
}

pub fn smoothgrad_image(
    model: &MultiTaskModel,
    article: &ArticleInputs,
    target: Target,
    config: &SmoothGradConfig,
) -> Result<SaliencyMap> {
    let img = article_image(article)?;
    let x = pixel_tensor(model, img)?;
    let sigma = config.sigma.unwrap_or(DEFAULT_NOISE_FRACTION * dynamic_range(&img.pixels));
    let mut shape = (0, 0);
    let raw = smoothgrad_raw(&x, &vec![true; img.pixels.len()], config.samples, sigma, config.seed, |t| {
        let (mut maps, hw) = image_gradcam_batch(model, &[article], t, target)?;
        shape = hw;
        Ok(maps.remove(0))
    })?;
    Ok(SaliencyMap { target, shape: vec![shape.0, shape.1], values: max_normalize(raw) })
}

pub fn smoothgrad_tokens(
    model: &MultiTaskModel,
    article: &ArticleInputs,
    field: TextField,
    target: Target,
    config: &SmoothGradConfig,
) -> Result<SaliencyMap> {
    let x = text_tensor(model, article, field)?;
    let seq = match field {
        TextField::Title => &article.title,
        TextField::Tweet => &article.tweet,
    };
    let real = &seq.data[..seq.length * seq.dim];
    let sigma = config.sigma.unwrap_or(DEFAULT_NOISE_FRACTION * dynamic_range(real));
    let mask: Vec<bool> = (0..seq.max_len * seq.dim).map(|i| i < seq.length * seq.dim).collect();
    let raw = smoothgrad_raw(&x, &mask, config.samples, sigma, config.seed, |t| {
        Ok(text_gradcam_batch(model, &[article], field, t, target)?.remove(0))
    })?;
    let values = max_normalize(raw);
    Ok(SaliencyMap { target, shape: vec![values.len()], values })
}

/// Share of total map mass inside the rectangle `rows × cols` (half-open).
pub fn region_mass(map: &SaliencyMap, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
    let (h, w) = (map.shape[0], map.shape[1]);
    let total: f64 = map.values.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut inside = 0.0;
    for r in rows.start..rows.end.min(h) {
        for c in cols.start..cols.end.min(w) {
            inside += map.values[r * w + c];
        }
    }
    inside / total
}

/// Bilinear upsampling of an `h × w` grid to `out_h × out_w` (align-corners
/// off, edge clamped).
pub fn upsample_bilinear(values: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_h * out_w];
    let sample = |r: f64, c: f64| -> f64 {
        let r = r.clamp(0.0, (h - 1) as f64);
        let c = c.clamp(0.0, (w - 1) as f64);
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
        let (fr, fc) = (r - r0 as f64, c - c0 as f64);
        let top = values[r0 * w + c0] * (1.0 - fc) + values[r0 * w + c1] * fc;
        let bot = values[r1 * w + c0] * (1.0 - fc) + values[r1 * w + c1] * fc;
        top * (1.0 - fr) + bot * fr
    };
    for y in 0..out_h {
        for x in 0..out_w {
            let r = (y as f64 + 0.5) * h as f64 / out_h as f64 - 0.5;
            let c = (x as f64 + 0.5) * w as f64 / out_w as f64 - 0.5;
            out[y * out_w + x] = sample(r, c);
        }
    }
    out
}

/// Undoes the standardization of a prepared image.
pub fn to_rgb(image: &PreparedImage, config: &ImageEncoderConfig) -> image::RgbImage {
    let s = image.size;
    image::RgbImage::from_fn(s as u32, s as u32, |x, y| {
        let px = |c: usize| {
            let v = image.pixels[c * s * s + y as usize * s + x as usize] * config.std[c] + config.mean[c];
            (v * 255.0).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// Heatmap (red for high, blue for low) alpha-blended over the image.
pub fn render_overlay(base: &image::RgbImage, map: &SaliencyMap, alpha: f64) -> image::RgbImage {
    let (w, h) = base.dimensions();
    let up = upsample_bilinear(&map.values, map.shape[0], map.shape[1], h as usize, w as usize);
    let mut out = base.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let v = up[y as usize * w as usize + x as usize].clamp(0.0, 1.0);
        let heat = [255.0 * v, 255.0 * (1.0 - (2.0 * v - 1.0).abs()), 255.0 * (1.0 - v)];
        for c in 0..3 {
            p.0[c] = ((1.0 - alpha) * p.0[c] as f64 + alpha * heat[c]).round() as u8;
        }
    }
    out
}

/// Tokens with a background shade proportional to their score.
pub fn render_token_strip(tokens: &[String], scores: &[f64]) -> String {
    let mut s = String::from("<p class=\"tokens\">");
    for (t, v) in tokens.iter().zip(scores) {
        let esc = t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        write!(s, "<span style=\"background: rgba(255,0,0,{v:.3})\">{esc}</span> ").unwrap();
    }
    s.push_str("</p>\n");
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEntry {
    pub token: String,
    pub mean_score: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTokens {
    pub target: Target,
    pub label: String,
    pub tokens: Vec<TokenEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenReportConfig {
    pub k: usize,
    pub min_count: usize,
    pub field: TextField,
}

impl Default for TokenReportConfig {
    fn default() -> Self {
        Self { k: TOP_K, min_count: MIN_TOKEN_COUNT, field: TextField::Tweet }
    }
}

/// Rank tokens by mean attention over their occurrences in the articles
/// that belong to `target`'s class, keeping those seen at least `min_count`
/// times.
pub fn rank_tokens(
    occurrences: impl IntoIterator<Item = (String, f64)>,
    k: usize,
    min_count: usize,
) -> Vec<TokenEntry> {
    let mut acc: HashMap<String, (f64, usize)> = HashMap::new();
    for (t, s) in occurrences {
        if t == TWEET_SEPARATOR {
            continue;
        }
        let e = acc.entry(t).or_default();
        e.0 += s;
        e.1 += 1;
    }
    let mut entries: Vec<TokenEntry> = acc
        .into_iter()
        .filter(|(_, (_, n))| *n >= min_count)
        .map(|(token, (sum, count))| TokenEntry { token, mean_score: sum / count as f64, count })
        .collect();
    entries.sort_by(|a, b| b.mean_score.total_cmp(&a.mean_score).then_with(|| a.token.cmp(&b.token)));
    entries.truncate(k);
    entries
}

/// Per-target top tokens. `tokens[i]` holds the token strings of
/// `inputs[i]`'s chosen field, aligned with its encoded rows.
pub fn top_tokens_report(
    model: &MultiTaskModel,
    inputs: &[ArticleInputs],
    tokens: &[Vec<String>],
    config: &TokenReportConfig,
) -> Result<Vec<TargetTokens>> {
    if inputs.len() != tokens.len() {
        return Err(Error::invalid("token lists must align with inputs"));
    }
    let mut out = Vec::new();
    for target in Target::all() {
        if !model.config.tasks.contains(&target.task) {
            continue;
        }
        let chosen: Vec<usize> = (0..inputs.len()).filter(|&i| target.matches(&inputs[i])).collect();
        let mut occ = Vec::new();
        for chunk in chosen.chunks(64) {
            let items: Vec<&ArticleInputs> = chunk.iter().map(|&i| &inputs[i]).collect();
            let x = crate::multitask::sequence_tensor(
                &items,
                |a| match config.field {
                    TextField::Title => &a.title,
                    TextField::Tweet => &a.tweet,
                },
                model.dtype(),
                model.device(),
            )?;
            let maps = text_gradcam_batch(model, &items, config.field, &x, target)?;
            for (&i, m) in chunk.iter().zip(maps) {
                let m = max_normalize(m);
                occ.extend(tokens[i].iter().zip(m).map(|(t, s)| (t.clone(), s)));
            }
        }
        out.push(TargetTokens { target, label: target.label().to_string(), tokens: rank_tokens(occ, config.k, config.min_count) });
    }
    Ok(out)
}

pub fn token_report_table(report: &[TargetTokens]) -> String {
    let mut s = String::new();
    for t in report {
        let list: Vec<String> = t.tokens.iter().map(|e| format!("{} ({:.2}, n={})", e.token, e.mean_score, e.count)).collect();
        writeln!(s, "{:<11} {}", t.label, list.join(", ")).unwrap();
    }
    s
}
