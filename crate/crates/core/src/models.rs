//! Backbones with an explicit latent tap between feature extractor and head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, ParamStore, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid backbone spec: {0}")]
    InvalidSpec(String),
    #[error("input shape {got:?} does not match expected [B, {expected:?}]")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneKind {
    /// `widths[0]` is the input width; each further entry is a hidden layer.
    Mlp { widths: Vec<usize> },
    /// Stride-1 convolutions (one entry per output channel count), max
    /// pooling after the last one (`pool: None` pools globally), then
    /// optional dense layers.
    Conv1d { channels: Vec<usize>, kernel: usize, pool: Option<usize>, dense: Vec<usize> },
}

/// Architecture description. Stages are numbered from 1 (first hidden
/// layer or convolution); `latent_tap` names the stage whose output is the
/// latent. The classification head always follows the last stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    #[serde(flatten)]
    pub kind: BackboneKind,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub latent_tap: usize,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
}

impl BackboneSpec {
    /// `input -> 64 -> 32 (tap) -> classes`.
    pub fn default_mlp(input_dim: usize, num_classes: usize) -> Self {
        BackboneSpec {
            kind: BackboneKind::Mlp { widths: vec![input_dim, 64, 32] },
            activation: Activation::Relu,
            dropout_rate: 0.0,
            latent_tap: 2,
            num_classes,
            input_shape: vec![input_dim],
        }
    }

    /// Two convolutions, global max pool (tap), linear head.
    pub fn default_conv1d(channels_in: usize, length: usize, num_classes: usize) -> Self {
        BackboneSpec {
            kind: BackboneKind::Conv1d { channels: vec![16, 32], kernel: 3, pool: None, dense: vec![] },
            activation: Activation::Relu,
            dropout_rate: 0.0,
            latent_tap: 2,
            num_classes,
            input_shape: vec![channels_in, length],
        }
    }

    fn stage_count(&self) -> usize {
        match &self.kind {
            BackboneKind::Mlp { widths } => widths.len().saturating_sub(1),
            BackboneKind::Conv1d { channels, dense, .. } => channels.len() + dense.len(),
        }
    }

    fn min_tap(&self) -> usize {
        match &self.kind {
            BackboneKind::Mlp { .. } => 1,
            BackboneKind::Conv1d { channels, .. } => channels.len(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return bad(format!("input_shape {:?}", self.input_shape));
        }
        match &self.kind {
            BackboneKind::Mlp { widths } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return bad(format!("mlp widths {widths:?} need an input and at least one hidden width, all > 0"));
                }
                let flat: usize = self.input_shape.iter().product();
                if widths[0] != flat {
                    return bad(format!("mlp input width {} != input size {flat}", widths[0]));
                }
            }
            BackboneKind::Conv1d { channels, kernel, pool, dense } => {
                if self.input_shape.len() != 2 {
                    return bad("conv1d input_shape must be [channels, length]".into());
                }
                if channels.is_empty() || channels.contains(&0) || dense.contains(&0) || *kernel == 0 {
                    return bad("conv1d channels/kernel/dense sizes must be > 0".into());
                }
                let conv_len = self.input_shape[1] as isize - (channels.len() * (kernel - 1)) as isize;
                if conv_len < 1 {
                    return bad(format!(
                        "sequence length {} too short for {} convolutions",
                        self.input_shape[1],
                        channels.len()
                    ));
                }
                if let Some(w) = pool {
                    if *w == 0 || *w > conv_len as usize {
                        return bad(format!("pool window {w} invalid for conv output length {conv_len}"));
                    }
                }
            }
        }
        let stages = self.stage_count();
        if self.latent_tap < self.min_tap() || self.latent_tap > stages {
            return bad(format!("latent_tap {} outside [{}, {stages}]", self.latent_tap, self.min_tap()));
        }
        Ok(())
    }

    /// Width of the latent produced at the tap.
    pub fn latent_dim(&self) -> usize {
        match &self.kind {
            BackboneKind::Mlp { widths } => widths[self.latent_tap],
            BackboneKind::Conv1d { channels, kernel, pool, dense } => {
                if self.latent_tap == channels.len() {
                    self.conv_flat_dim(channels, *kernel, *pool)
                } else {
                    dense[self.latent_tap - channels.len() - 1]
                }
            }
        }
    }

    fn conv_flat_dim(&self, channels: &[usize], kernel: usize, pool: Option<usize>) -> usize {
        let len = self.input_shape[1] - channels.len() * (kernel - 1);
        let pooled = match pool {
            Some(w) => len / w,
            None => 1,
        };
        channels[channels.len() - 1] * pooled
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone<T = f32> {
    pub spec: BackboneSpec,
    pub params: ParamStore<T>,
    pub seed: u64,
}

/// Latent and logits nodes from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct TapOutput {
    pub latent: Var,
    pub logits: Var,
}

fn uniform_init<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl<T: Real> Backbone<T> {
    /// Deterministic fan-in uniform initialization; weights and biases are
    /// drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn build(spec: BackboneSpec, seed: u64) -> Result<Self, ModelError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let dense = |params: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize| {
            params.insert(&format!("{name}.weight"), uniform_init(rng, &[i, o], i))?;
            params.insert(&format!("{name}.bias"), uniform_init(rng, &[o], i))?;
            Ok::<_, DiffError>(())
        };
        let last = match &spec.kind {
            BackboneKind::Mlp { widths } => {
                for (k, w) in widths.windows(2).enumerate() {
                    dense(&mut params, &mut rng, &format!("dense{}", k + 1), w[0], w[1])?;
                }
                widths[widths.len() - 1]
            }
            BackboneKind::Conv1d { channels, kernel, pool, dense: hidden } => {
                let mut cin = spec.input_shape[0];
                for (k, &co) in channels.iter().enumerate() {
                    let fan = cin * kernel;
                    params
                        .insert(&format!("conv{}.weight", k + 1), uniform_init(&mut rng, &[co, cin, *kernel], fan))?;
                    params.insert(&format!("conv{}.bias", k + 1), uniform_init(&mut rng, &[co], fan))?;
                    cin = co;
                }
                let mut width = spec.conv_flat_dim(channels, *kernel, *pool);
                for (k, &h) in hidden.iter().enumerate() {
                    dense(&mut params, &mut rng, &format!("dense{}", channels.len() + k + 1), width, h)?;
                    width = h;
                }
                width
            }
        };
        dense(&mut params, &mut rng, "head", last, spec.num_classes)?;
        Ok(Backbone { spec, params, seed })
    }

    pub fn latent_dim(&self) -> usize {
        self.spec.latent_dim()
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone { spec: self.spec.clone(), params: self.params.cast(), seed: self.seed }
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(ModelError::InputShape { expected: self.spec.input_shape.clone(), got: shape.to_vec() });
        }
        Ok(())
    }

    /// Records the forward pass on `g`. `params` are this backbone's bound
    /// leaves (see [`ParamStore::bind`]). Dropout is inverted dropout,
    /// active only in `train` mode, with masks drawn from `dropout_seed`.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        params: &[Var],
        input: Var,
        train: bool,
        dropout_seed: u64,
    ) -> Result<TapOutput, ModelError> {
        self.check_input(g.value(input).shape())?;
        let batch = g.value(input).shape()[0];
        let rate = if train { self.spec.dropout_rate } else { 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
        let mut dropout = |g: &mut Graph<T>, x: Var| -> Result<Var, DiffError> {
            if rate == 0.0 {
                return Ok(x);
            }
            let keep = 1.0 - rate;
            let shape = g.value(x).shape().to_vec();
            let n: usize = shape.iter().product();
            let mask = (0..n).map(|_| if rng.random::<f64>() < keep { T::of(1.0 / keep) } else { T::zero() }).collect();
            let m = g.input(Tensor::new(shape, mask)?);
            g.mul(x, m)
        };
        let act = self.spec.activation;
        let activate = |g: &mut Graph<T>, x: Var| match act {
            Activation::Relu => g.relu(x),
            Activation::Tanh => g.tanh(x),
        };
        let affine = |g: &mut Graph<T>, x: Var, w: Var, b: Var| -> Result<Var, DiffError> {
            let y = g.matmul(x, w)?;
            g.add(y, b)
        };

        let tap = self.spec.latent_tap;
        let mut latent = None;
        let mut p = 0;
        let mut stage = 0;
        let mut x = input;
        if let BackboneKind::Conv1d { channels, pool, .. } = &self.spec.kind {
            for _ in channels {
                stage += 1;
                let y = g.conv1d(x, params[p], Some(params[p + 1]))?;
                p += 2;
                x = activate(g, y);
                if stage == channels.len() {
                    let len = g.value(x).shape()[2];
                    x = g.max_pool(x, pool.unwrap_or(len))?;
                    let flat = g.value(x).numel() / batch;
                    x = g.reshape(x, &[batch, flat])?;
                }
                if stage == tap {
                    latent = Some(x);
                }
                if stage < channels.len() {
                    x = dropout(g, x)?;
                }
            }
        } else if g.value(x).shape().len() != 2 {
            let flat = g.value(x).numel() / batch;
            x = g.reshape(x, &[batch, flat])?;
        }
        let head_index = self.params.len() - 2;
        if stage > 0 {
            x = dropout(g, x)?;
        }
        while p < head_index {
            stage += 1;
            let y = affine(g, x, params[p], params[p + 1])?;
            p += 2;
            x = activate(g, y);
            if stage == tap {
                latent = Some(x);
            }
            x = dropout(g, x)?;
        }
        let logits = affine(g, x, params[p], params[p + 1])?;
        let latent = latent.expect("validated tap");
        Ok(TapOutput { latent, logits })
    }

    /// Forward pass on plain tensors, returning `(latent [B, D], logits [B, C])`.
    pub fn forward_with_tap(
        &self,
        inputs: &Tensor<T>,
        train: bool,
        dropout_seed: u64,
    ) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let x = g.input(inputs.clone());
        let out = self.forward_graph(&mut g, &vars, x, train, dropout_seed)?;
        Ok((g.value(out.latent).clone(), g.value(out.logits).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(widths: &[usize], tap: usize, classes: usize) -> BackboneSpec {
        BackboneSpec {
            kind: BackboneKind::Mlp { widths: widths.to_vec() },
            activation: Activation::Relu,
            dropout_rate: 0.0,
            latent_tap: tap,
            num_classes: classes,
            input_shape: vec![widths[0]],
        }
    }

    fn batch(b: usize, d: usize) -> Tensor<f32> {
        let data = (0..b * d).map(|i| ((i * 37 % 11) as f32 - 5.0) / 3.0).collect();
        Tensor::new(vec![b, d], data).unwrap()
    }

    #[test]
    fn same_seed_bitwise_equal() {
        let a = Backbone::<f32>::build(mlp(&[8, 64, 32], 2, 3), 11).unwrap();
        let b = Backbone::<f32>::build(mlp(&[8, 64, 32], 2, 3), 11).unwrap();
        assert_eq!(a.params.to_le_bytes(), b.params.to_le_bytes());
        let c = Backbone::<f32>::build(mlp(&[8, 64, 32], 2, 3), 12).unwrap();
        assert_ne!(a.params.to_le_bytes(), c.params.to_le_bytes());
    }

    #[test]
    fn mlp_tap_dimension() {
        let m = Backbone::<f32>::build(mlp(&[8, 64, 32], 2, 3), 0).unwrap();
        assert_eq!(m.latent_dim(), 32);
        let (z, logits) = m.forward_with_tap(&batch(5, 8), false, 0).unwrap();
        assert_eq!(z.shape(), &[5, 32]);
        assert_eq!(logits.shape(), &[5, 3]);
        let m1 = Backbone::<f32>::build(mlp(&[8, 64, 32], 1, 3), 0).unwrap();
        assert_eq!(m1.forward_with_tap(&batch(1, 8), false, 0).unwrap().0.shape(), &[1, 64]);
    }

    #[test]
    fn conv_tap_dimension() {
        let spec = BackboneSpec {
            kind: BackboneKind::Conv1d { channels: vec![4, 6, 5], kernel: 3, pool: Some(2), dense: vec![7] },
            activation: Activation::Relu,
            dropout_rate: 0.0,
            latent_tap: 3,
            num_classes: 4,
            input_shape: vec![2, 20],
        };
        let m = Backbone::<f32>::build(spec, 1).unwrap();
        // 20 - 3*2 = 14 after convs, pooled by 2 -> 7; 5 channels * 7.
        assert_eq!(m.latent_dim(), 35);
        let x = Tensor::from_f64(&[3, 2, 20], &(0..120).map(|i| (i % 7) as f64 * 0.1).collect::<Vec<_>>()).unwrap();
        let (z, logits) = m.forward_with_tap(&x, false, 0).unwrap();
        assert_eq!(z.shape(), &[3, 35]);
        assert_eq!(logits.shape(), &[3, 4]);
    }

    #[test]
    fn default_conv_global_pool() {
        let m = Backbone::<f32>::build(BackboneSpec::default_conv1d(1, 16, 5), 2).unwrap();
        assert_eq!(m.latent_dim(), 32);
    }

    #[test]
    fn eval_is_deterministic_and_batch_of_one() {
        let m = Backbone::<f32>::build(mlp(&[8, 16, 4], 2, 3), 3).unwrap();
        let x = batch(1, 8);
        let a = m.forward_with_tap(&x, false, 1).unwrap();
        let b = m.forward_with_tap(&x, false, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.shape(), &[1, 4]);
    }

    #[test]
    fn dropout_zero_means_train_equals_eval() {
        let m = Backbone::<f32>::build(mlp(&[8, 16, 4], 1, 3), 3).unwrap();
        let x = batch(6, 8);
        assert_eq!(m.forward_with_tap(&x, true, 5).unwrap(), m.forward_with_tap(&x, false, 5).unwrap());
    }

    #[test]
    fn dropout_is_seeded() {
        let mut spec = mlp(&[8, 16, 8], 1, 3);
        spec.dropout_rate = 0.5;
        let m = Backbone::<f32>::build(spec, 3).unwrap();
        let x = batch(6, 8);
        let a = m.forward_with_tap(&x, true, 5).unwrap();
        assert_eq!(a, m.forward_with_tap(&x, true, 5).unwrap());
        assert_ne!(a.1, m.forward_with_tap(&x, true, 6).unwrap().1);
        assert_ne!(a.1, m.forward_with_tap(&x, false, 5).unwrap().1);
    }

    #[test]
    fn invalid_specs() {
        assert!(Backbone::<f32>::build(mlp(&[8, 64, 32], 3, 3), 0).is_err());
        assert!(Backbone::<f32>::build(mlp(&[8, 64, 32], 0, 3), 0).is_err());
        assert!(Backbone::<f32>::build(mlp(&[8, 0, 32], 1, 3), 0).is_err());
        assert!(Backbone::<f32>::build(mlp(&[8, 64], 1, 1), 0).is_err());
    }

    #[test]
    fn wrong_input_shape() {
        let m = Backbone::<f32>::build(mlp(&[8, 16], 1, 3), 0).unwrap();
        assert!(matches!(m.forward_with_tap(&batch(2, 7), false, 0), Err(ModelError::InputShape { .. })));
    }
}
