//! Small layer toolkit on top of candle with seeded initialization, seeded
//! dropout, parameter snapshots and the plateau learning-rate schedule.

use std::collections::BTreeMap;

use candle::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::NamedTensor;
use crate::error::{Error, Result};

/// Named trainable tensors, created deterministically from a seed.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { vars: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed), dtype, device: Device::Cpu }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::config(format!("parameter `{name}` defined twice")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, shape, data)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![0.0; n])
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        self.insert(name, shape, data)
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Linear> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = self.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound)?;
        let bias = if bias { Some(self.uniform(&format!("{name}.bias"), &[out_dim], bound)?) } else { None };
        Ok(Linear { weight, bias })
    }

    pub fn conv1d(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, bias: bool) -> Result<Conv1d> {
        if kernel % 2 == 0 {
            return Err(Error::config(format!("1-D filter width {kernel} must be odd")));
        }
        let bound = 1.0 / ((c_in * kernel) as f64).sqrt();
        let weight = self.uniform(&format!("{name}.weight"), &[c_out, c_in, kernel], bound)?;
        let bias = if bias { Some(self.uniform(&format!("{name}.bias"), &[c_out], bound)?) } else { None };
        Ok(Conv1d { weight, bias, padding: kernel / 2 })
    }

    pub fn conv2d(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Conv2d> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = self.uniform(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], bound)?;
        let bias = if bias { Some(self.uniform(&format!("{name}.bias"), &[c_out], bound)?) } else { None };
        Ok(Conv2d { weight, bias, padding: kernel / 2, stride })
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    /// Variables whose name starts with any of `prefixes` (all when empty).
    pub fn vars_with_prefix(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(n, _)| prefixes.is_empty() || prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn snapshot(&self) -> Result<Snapshot> {
        let mut out = BTreeMap::new();
        for (n, v) in &self.vars {
            out.insert(n.clone(), v.as_tensor().copy()?);
        }
        Ok(Snapshot(out))
    }

    pub fn restore(&self, snap: &Snapshot) -> Result<()> {
        for (n, v) in &self.vars {
            let t = snap.0.get(n).ok_or_else(|| Error::config(format!("snapshot lacks `{n}`")))?;
            v.set(t)?;
        }
        Ok(())
    }

    pub fn to_named_tensors(&self) -> Result<Vec<NamedTensor>> {
        let mut out = Vec::with_capacity(self.vars.len());
        for (n, v) in &self.vars {
            let t = v.as_tensor();
            let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            out.push(NamedTensor::new(n.clone(), t.dims().to_vec(), data)?);
        }
        Ok(out)
    }

    pub fn load_named_tensors(&self, tensors: &[NamedTensor]) -> Result<()> {
        let by_name: BTreeMap<&str, &NamedTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (n, v) in &self.vars {
            let t = by_name.get(n.as_str()).ok_or_else(|| Error::Format(format!("checkpoint lacks `{n}`")))?;
            if t.shape != v.dims() {
                return Err(Error::Format(format!("`{n}` has shape {:?}, expected {:?}", t.shape, v.dims())));
            }
            let value = Tensor::from_vec(t.data.clone(), t.shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            v.set(&value)?;
        }
        Ok(())
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[derive(Debug, Clone)]
pub struct Snapshot(BTreeMap<String, Tensor>);

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    /// `x`: `(batch, in)` → `(batch, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

/// Stride-1 1-D convolution with "same" zero padding.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub padding: usize,
}

impl Conv1d {
    /// `x`: `(batch, channels, length)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // Explicit padding keeps the backward pass valid for sequences
        // shorter than the filter. Runs as a height-1 conv2d: candle's conv1d
        // kernel gradient is wrong for batch > 1 with several output channels.
        let x = x.pad_with_zeros(2, self.padding, self.padding)?.unsqueeze(2)?;
        let y = x.conv2d(&self.weight.unsqueeze(2)?, 0, 1, 1, 1)?.squeeze(2)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1))?)?,
            None => y,
        })
    }

    pub fn width(&self) -> usize {
        self.weight.dims()[2]
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub padding: usize,
    pub stride: usize,
}

impl Conv2d {
    /// `x`: `(batch, channels, h, w)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.pad_with_zeros(2, self.padding, self.padding)?.pad_with_zeros(3, self.padding, self.padding)?;
        let y = x.conv2d(&self.weight, 0, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

/// Max over the last axis, routing the gradient to a single argmax position.
pub fn max_over_last(x: &Tensor) -> Result<Tensor> {
    let idx = x.argmax_keepdim(D::Minus1)?;
    Ok(x.gather(&idx, D::Minus1)?.squeeze(D::Minus1)?)
}

/// Inverted dropout with a mask drawn from `rng`.
pub fn dropout(x: &Tensor, p: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let n = x.elem_count();
    let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

/// Adam(β1, β2) without weight decay.
pub fn adam(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr, beta1, beta2, eps: 1e-8, weight_decay: 0.0 })?)
}

pub fn set_lr(opt: &mut AdamW, lr: f64) {
    opt.set_learning_rate(lr);
}

/// Numerically safe `log σ(z)` and `log(1 − σ(z))` based binary cross entropy
/// on logits, clamped to `[ε, 1−ε]` in probability space.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor, eps: f64) -> Result<Tensor> {
    let p = candle_nn::ops::sigmoid(logits)?.clamp(eps, 1.0 - eps)?;
    let pos = targets.mul(&p.log()?)?;
    let neg = targets.affine(-1.0, 1.0)?.mul(&p.affine(-1.0, 1.0)?.log()?)?;
    Ok(pos.add(&neg)?.neg()?)
}

/// Validation-loss driven schedule: multiply the learning rate by `factor`
/// after `lr_patience` epochs without improvement and stop after
/// `stop_patience` epochs without improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub lr_patience: usize,
    pub stop_patience: usize,
    best: f64,
    since_best: usize,
    since_decay: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleStep {
    pub improved: bool,
    pub lr: f64,
    pub stop: bool,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, lr_patience: usize, stop_patience: usize) -> Self {
        Self { lr, factor, lr_patience, stop_patience, best: f64::INFINITY, since_best: 0, since_decay: 0 }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records one epoch's validation loss; returns the learning rate for the
    /// next epoch and whether to stop.
    pub fn step(&mut self, val_loss: f64) -> ScheduleStep {
        let improved = val_loss < self.best;
        if improved {
            self.best = val_loss;
            self.since_best = 0;
            self.since_decay = 0;
        } else {
            self.since_best += 1;
            self.since_decay += 1;
            if self.since_decay >= self.lr_patience {
                self.lr *= self.factor;
                self.since_decay = 0;
            }
        }
        ScheduleStep { improved, lr: self.lr, stop: self.since_best >= self.stop_patience }
    }
}

/// Flattened f64 copy of a tensor.
pub fn to_vec_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}
