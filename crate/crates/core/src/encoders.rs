//! Feature extractors: the Text-CNN (three filter widths, global max-pool)
//! and the image backbones that all emit 2048-D vectors.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{Container, NamedTensor, FEATURE_MAGIC};
use crate::error::{Error, Result};
use crate::nn::{max_over_last, Conv1d, Conv2d, Linear, ParamStore};
use crate::textenc::{EncodedSequence, EMBEDDING_DIM};

pub const IMAGE_FEATURE_DIM: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Tanh => x.tanh()?,
            Activation::Identity => x.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCnnConfig {
    pub filter_sizes: Vec<usize>,
    pub filters_per_size: usize,
    pub activation: Activation,
    pub input_dim: usize,
    pub bias: bool,
}

impl Default for TextCnnConfig {
    fn default() -> Self {
        Self {
            filter_sizes: vec![3, 5, 7],
            filters_per_size: 128,
            activation: Activation::Relu,
            input_dim: EMBEDDING_DIM,
            bias: true,
        }
    }
}

impl TextCnnConfig {
    pub fn output_dim(&self) -> usize {
        self.filter_sizes.len() * self.filters_per_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.filter_sizes.is_empty() || self.filters_per_size == 0 {
            return Err(Error::config("text CNN needs at least one filter"));
        }
        if let Some(k) = self.filter_sizes.iter().find(|k| *k % 2 == 0) {
            return Err(Error::config(format!("filter width {k} must be odd")));
        }
        Ok(())
    }
}

/// 1-D convolutions over the token axis, one block per filter width, each
/// followed by the nonlinearity and a global max-pool.
#[derive(Debug, Clone)]
pub struct TextCnn {
    pub config: TextCnnConfig,
    convs: Vec<Conv1d>,
}

impl TextCnn {
    pub fn new(params: &mut ParamStore, prefix: &str, config: &TextCnnConfig) -> Result<Self> {
        config.validate()?;
        let convs = config
            .filter_sizes
            .iter()
            .map(|&k| params.conv1d(&format!("{prefix}.conv{k}"), config.input_dim, config.filters_per_size, k, config.bias))
            .collect::<Result<_>>()?;
        Ok(Self { config: config.clone(), convs })
    }

    pub fn filter_widths(&self) -> Vec<usize> {
        self.convs.iter().map(Conv1d::width).collect()
    }

    /// Post-activation filter responses, one `(batch, filters, length)`
    /// tensor per filter width. `x` is `(batch, length, input_dim)`.
    pub fn activations(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, _, d) = x.dims3()?;
        if d != self.config.input_dim {
            return Err(Error::config(format!("text CNN expects {}-D tokens, got {d}", self.config.input_dim)));
        }
        let x = x.transpose(1, 2)?.contiguous()?;
        self.convs.iter().map(|c| self.config.activation.apply(&c.forward(&x)?)).collect()
    }

    /// Global max-pool of each block, concatenated in filter-width order.
    pub fn pool(&self, activations: &[Tensor]) -> Result<Tensor> {
        let pooled: Vec<Tensor> = activations.iter().map(max_over_last).collect::<Result<_>>()?;
        Ok(Tensor::cat(&pooled, 1)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.pool(&self.activations(x)?)
    }

    /// Feature vector for one encoded sequence.
    pub fn features(&self, seq: &EncodedSequence) -> Result<Vec<f32>> {
        let dtype = self.convs[0].weight.dtype();
        let x = Tensor::from_vec(seq.data.clone(), (1, seq.max_len, seq.dim), self.convs[0].weight.device())?
            .to_dtype(dtype)?;
        Ok(self.forward(&x)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    PretrainedResnet50,
    SmallCnn,
    Precomputed,
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained-resnet50" | "resnet50" => Ok(Backbone::PretrainedResnet50),
            "small-cnn" => Ok(Backbone::SmallCnn),
            "precomputed" => Ok(Backbone::Precomputed),
            other => Err(Error::config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub backbone: Backbone,
    pub output_dim: usize,
    pub frozen: bool,
    /// Shorter side is resized to this before the center crop.
    pub resize_shorter: u32,
    pub crop: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub small_cnn_channels: [usize; 3],
    pub bias: bool,
    /// Pretrained weights (safetensors, torchvision names) for the ResNet.
    pub weights: Option<PathBuf>,
    /// Feature container for the precomputed mode.
    pub features: Option<PathBuf>,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self::small_cnn(32)
    }
}

impl ImageEncoderConfig {
    pub fn small_cnn(size: u32) -> Self {
        Self {
            backbone: Backbone::SmallCnn,
            output_dim: IMAGE_FEATURE_DIM,
            frozen: true,
            resize_shorter: size,
            crop: size,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
            small_cnn_channels: [16, 32, 64],
            bias: true,
            weights: None,
            features: None,
        }
    }

    pub fn resnet50(weights: Option<PathBuf>) -> Self {
        Self {
            backbone: Backbone::PretrainedResnet50,
            resize_shorter: 256,
            crop: 224,
            weights,
            ..Self::small_cnn(224)
        }
    }

    pub fn precomputed(features: PathBuf) -> Self {
        Self { backbone: Backbone::Precomputed, features: Some(features), ..Self::small_cnn(32) }
    }
}

/// A decoded, resized, cropped and standardized image.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedImage {
    /// SHA-256 of the original bytes, used by the precomputed mode.
    pub content_hash: String,
    /// `3 × crop × crop`, channel-major.
    pub pixels: Vec<f32>,
    pub size: usize,
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Decode, resize the shorter side, center-crop and standardize per channel.
pub fn preprocess(bytes: &[u8], config: &ImageEncoderConfig) -> Result<PreparedImage> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    Ok(prepare_rgb(&img.to_rgb8(), content_hash(bytes), config))
}

pub fn prepare_rgb(img: &image::RgbImage, content_hash: String, config: &ImageEncoderConfig) -> PreparedImage {
    use image::imageops::{self, FilterType};
    let (w, h) = img.dimensions();
    let short = w.min(h).max(1) as f64;
    let scale = config.resize_shorter as f64 / short;
    let nw = ((w as f64 * scale).round() as u32).max(config.crop);
    let nh = ((h as f64 * scale).round() as u32).max(config.crop);
    let resized = if (nw, nh) == (w, h) { img.clone() } else { imageops::resize(img, nw, nh, FilterType::Triangle) };
    let x0 = (nw - config.crop) / 2;
    let y0 = (nh - config.crop) / 2;
    let crop = imageops::crop_imm(&resized, x0, y0, config.crop, config.crop).to_image();
    let s = config.crop as usize;
    let mut pixels = vec![0f32; 3 * s * s];
    for (x, y, p) in crop.enumerate_pixels() {
        for c in 0..3 {
            let v = p.0[c] as f32 / 255.0;
            pixels[c * s * s + y as usize * s + x as usize] = (v - config.mean[c]) / config.std[c];
        }
    }
    PreparedImage { content_hash, pixels, size: s }
}

/// Content-hash keyed feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    pub dim: usize,
    keys: Vec<String>,
    index: HashMap<String, usize>,
    data: Vec<f32>,
    pub meta: serde_json::Value,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, keys: vec![], index: HashMap::new(), data: vec![], meta: serde_json::Value::Null }
    }

    pub fn insert(&mut self, key: impl Into<String>, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::invalid(format!("feature has dim {}, store holds {}", v.len(), self.dim)));
        }
        let key = key.into();
        match self.index.get(&key) {
            Some(&i) => self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(v),
            None => {
                self.index.insert(key.clone(), self.keys.len());
                self.keys.push(key);
                self.data.extend_from_slice(v);
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<&[f32]> {
        let i = *self.index.get(key).ok_or_else(|| Error::Lookup(format!("no stored feature for `{key}`")))?;
        Ok(&self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Container {
            meta: serde_json::json!({ "keys": self.keys, "dim": self.dim, "meta": self.meta }),
            tensors: vec![NamedTensor::new("features", vec![self.keys.len(), self.dim], self.data.clone())?],
        }
        .save(FEATURE_MAGIC, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = Container::load(FEATURE_MAGIC, path)?;
        let keys: Vec<String> = serde_json::from_value(c.meta["keys"].clone())?;
        let dim: usize = serde_json::from_value(c.meta["dim"].clone())?;
        let data = c.tensor("features")?.data.clone();
        if data.len() != keys.len() * dim {
            return Err(Error::Format("feature payload does not match key count".into()));
        }
        let index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        Ok(Self { dim, keys, index, data, meta: c.meta["meta"].clone() })
    }
}

#[derive(Debug, Clone)]
struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    mean: Tensor,
    var: Tensor,
}

impl BatchNorm {
    fn new(p: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            weight: p.constant(&format!("{name}.weight"), &[c], vec![1.0; c])?,
            bias: p.zeros(&format!("{name}.bias"), &[c])?,
            mean: p.zeros(&format!("{name}.running_mean"), &[c])?,
            var: p.constant(&format!("{name}.running_var"), &[c], vec![1.0; c])?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let shape = (1, (), 1, 1);
        let inv = (self.var.affine(1.0, 1e-5)?.sqrt()?.recip()?.mul(&self.weight))?.reshape(shape)?;
        let x = x.broadcast_sub(&self.mean.reshape(shape)?)?.broadcast_mul(&inv)?;
        Ok(x.broadcast_add(&self.bias.reshape(shape)?)?)
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
    bn3: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl Bottleneck {
    fn new(p: &mut ParamStore, name: &str, c_in: usize, width: usize, stride: usize) -> Result<Self> {
        let c_out = width * 4;
        let conv = |p: &mut ParamStore, n: &str, i, o, k, s| -> Result<Conv2d> {
            let mut c = p.conv2d(&format!("{name}.{n}"), i, o, k, s, false)?;
            c.padding = k / 2;
            Ok(c)
        };
        Ok(Self {
            conv1: conv(p, "conv1", c_in, width, 1, 1)?,
            bn1: BatchNorm::new(p, &format!("{name}.bn1"), width)?,
            conv2: conv(p, "conv2", width, width, 3, stride)?,
            bn2: BatchNorm::new(p, &format!("{name}.bn2"), width)?,
            conv3: conv(p, "conv3", width, c_out, 1, 1)?,
            bn3: BatchNorm::new(p, &format!("{name}.bn3"), c_out)?,
            downsample: if stride != 1 || c_in != c_out {
                Some((
                    conv(p, "downsample.0", c_in, c_out, 1, stride)?,
                    BatchNorm::new(p, &format!("{name}.downsample.1"), c_out)?,
                ))
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?)?.relu()?;
        let y = self.bn3.forward(&self.conv3.forward(&y)?)?;
        let skip = match &self.downsample {
            Some((c, bn)) => bn.forward(&c.forward(x)?)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// ResNet-50 with inference-mode batch norm. Parameter names follow
/// torchvision under the `prefix.` namespace.
#[derive(Debug, Clone)]
struct ResNet50 {
    conv1: Conv2d,
    bn1: BatchNorm,
    layers: Vec<Bottleneck>,
}

impl ResNet50 {
    fn new(p: &mut ParamStore, prefix: &str) -> Result<Self> {
        let conv1 = p.conv2d(&format!("{prefix}.conv1"), 3, 64, 7, 2, false)?;
        let bn1 = BatchNorm::new(p, &format!("{prefix}.bn1"), 64)?;
        let mut layers = Vec::new();
        let mut c_in = 64;
        for (li, (blocks, width, stride)) in [(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)].into_iter().enumerate() {
            for b in 0..blocks {
                let name = format!("{prefix}.layer{}.{b}", li + 1);
                layers.push(Bottleneck::new(p, &name, c_in, width, if b == 0 { stride } else { 1 })?);
                c_in = width * 4;
            }
        }
        Ok(Self { conv1, bn1, layers })
    }

    fn stem(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?)?.relu()?;
        // Post-ReLU values are non-negative, so zero padding acts as -inf padding.
        Ok(y.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?.max_pool2d_with_stride(3, 2)?)
    }
}

#[derive(Debug, Clone)]
struct SmallCnn {
    convs: [Conv2d; 3],
    proj: Linear,
}

/// Image branch producing 2048-D features.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    prefix: String,
    kind: EncoderKind,
}

#[derive(Debug, Clone)]
enum EncoderKind {
    Small(SmallCnn),
    ResNet(Box<ResNet50>),
    Precomputed(FeatureStore),
}

/// What the image branch consumes for one batch.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    /// `(batch, 3, size, size)`; absent in precomputed mode.
    pub pixels: Option<Tensor>,
    pub hashes: Vec<String>,
}

impl ImageBatch {
    pub fn from_prepared(images: &[&PreparedImage], dtype: DType, device: &candle::Device) -> Result<Self> {
        let hashes = images.iter().map(|i| i.content_hash.clone()).collect();
        if images.is_empty() {
            return Ok(Self { pixels: None, hashes });
        }
        let s = images[0].size;
        let mut data = Vec::with_capacity(images.len() * 3 * s * s);
        for i in images {
            if i.size != s {
                return Err(Error::invalid("images in one batch must share a size"));
            }
            data.extend_from_slice(&i.pixels);
        }
        let pixels = Tensor::from_vec(data, (images.len(), 3, s, s), device)?.to_dtype(dtype)?;
        Ok(Self { pixels: Some(pixels), hashes })
    }
}

impl ImageEncoder {
    pub fn new(params: &mut ParamStore, prefix: &str, config: &ImageEncoderConfig) -> Result<Self> {
        if config.output_dim != IMAGE_FEATURE_DIM {
            return Err(Error::config(format!("image features are {IMAGE_FEATURE_DIM}-D, got {}", config.output_dim)));
        }
        let kind = match config.backbone {
            Backbone::SmallCnn => {
                let [c1, c2, c3] = config.small_cnn_channels;
                let b = config.bias;
                EncoderKind::Small(SmallCnn {
                    convs: [
                        params.conv2d(&format!("{prefix}.conv1"), 3, c1, 3, 1, b)?,
                        params.conv2d(&format!("{prefix}.conv2"), c1, c2, 3, 1, b)?,
                        params.conv2d(&format!("{prefix}.conv3"), c2, c3, 3, 1, b)?,
                    ],
                    proj: params.linear(&format!("{prefix}.proj"), c3, IMAGE_FEATURE_DIM, b)?,
                })
            }
            Backbone::PretrainedResnet50 => {
                let net = ResNet50::new(params, prefix)?;
                if let Some(w) = &config.weights {
                    load_torchvision_weights(params, prefix, w)?;
                }
                EncoderKind::ResNet(Box::new(net))
            }
            Backbone::Precomputed => {
                let path = config
                    .features
                    .as_ref()
                    .ok_or_else(|| Error::config("precomputed backbone needs a feature file"))?;
                let store = FeatureStore::load(path)?;
                if store.dim != IMAGE_FEATURE_DIM {
                    return Err(Error::config(format!("feature file holds {}-D vectors", store.dim)));
                }
                EncoderKind::Precomputed(store)
            }
        };
        Ok(Self { config: config.clone(), prefix: prefix.to_string(), kind })
    }

    pub fn with_store(prefix: &str, store: FeatureStore) -> Result<Self> {
        if store.dim != IMAGE_FEATURE_DIM {
            return Err(Error::config(format!("feature store holds {}-D vectors", store.dim)));
        }
        let config = ImageEncoderConfig { backbone: Backbone::Precomputed, ..Default::default() };
        Ok(Self { config, prefix: prefix.to_string(), kind: EncoderKind::Precomputed(store) })
    }

    /// Parameter-name prefixes that the optimizer may update.
    pub fn trainable_prefixes(&self) -> Vec<String> {
        if self.config.frozen {
            return vec![];
        }
        match &self.kind {
            EncoderKind::Small(_) => vec![format!("{}.", self.prefix)],
            EncoderKind::ResNet(_) => (1..=4).map(|i| format!("{}.layer{i}.", self.prefix)).collect(),
            EncoderKind::Precomputed(_) => vec![],
        }
    }

    pub fn needs_pixels(&self) -> bool {
        !matches!(self.kind, EncoderKind::Precomputed(_))
    }

    /// Output of the last convolutional block, `(batch, channels, h, w)`.
    pub fn feature_map(&self, pixels: &Tensor) -> Result<Tensor> {
        match &self.kind {
            EncoderKind::Small(net) => {
                let [c1, c2, c3] = &net.convs;
                let y = c1.forward(pixels)?.relu()?.avg_pool2d(2)?;
                let y = c2.forward(&y)?.relu()?.avg_pool2d(2)?;
                Ok(c3.forward(&y)?.relu()?)
            }
            EncoderKind::ResNet(net) => {
                let mut y = net.stem(pixels)?;
                if !self.config.frozen {
                    y = y.detach();
                }
                for block in &net.layers {
                    y = block.forward(&y)?;
                }
                Ok(y)
            }
            EncoderKind::Precomputed(_) => {
                Err(Error::config("precomputed image features have no convolutional layer"))
            }
        }
    }

    /// Global average pool of a feature map followed by the projection to 2048.
    pub fn pool_map(&self, map: &Tensor) -> Result<Tensor> {
        let pooled = map.mean(3)?.mean(2)?;
        match &self.kind {
            EncoderKind::Small(net) => net.proj.forward(&pooled),
            _ => Ok(pooled),
        }
    }

    /// `(batch, 2048)` features.
    pub fn forward(&self, batch: &ImageBatch, dtype: DType, device: &candle::Device) -> Result<Tensor> {
        match &self.kind {
            EncoderKind::Precomputed(store) => {
                let mut data = Vec::with_capacity(batch.hashes.len() * store.dim);
                for h in &batch.hashes {
                    data.extend_from_slice(store.get(h)?);
                }
                Ok(Tensor::from_vec(data, (batch.hashes.len(), store.dim), device)?.to_dtype(dtype)?)
            }
            _ => {
                let pixels = batch.pixels.as_ref().ok_or_else(|| Error::invalid("image batch has no pixels"))?;
                self.pool_map(&self.feature_map(pixels)?)
            }
        }
    }

    /// Features for a single prepared image.
    pub fn features(&self, image: &PreparedImage, dtype: DType, device: &candle::Device) -> Result<Vec<f32>> {
        let batch = ImageBatch::from_prepared(&[image], dtype, device)?;
        Ok(self.forward(&batch, dtype, device)?.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?)
    }
}

fn load_torchvision_weights(params: &ParamStore, prefix: &str, path: &Path) -> Result<()> {
    let tensors = candle::safetensors::load(path, params.device())?;
    let mut loaded = 0;
    for name in params.names().cloned().collect::<Vec<_>>() {
        let Some(short) = name.strip_prefix(&format!("{prefix}.")) else { continue };
        let Some(src) = tensors.get(short) else { continue };
        let var = params.get(&name).expect("name came from the store");
        if src.dims() != var.dims() {
            return Err(Error::Format(format!("`{short}` has shape {:?}, expected {:?}", src.dims(), var.dims())));
        }
        var.set(&src.to_dtype(params.dtype())?)?;
        loaded += 1;
    }
    if loaded == 0 {
        return Err(Error::Format(format!("{} holds no ResNet-50 weights", path.display())));
    }
    Ok(())
}
