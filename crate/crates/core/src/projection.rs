//! 2D projection head over the latent tap.
//!
//! The projector trains only during the first epoch (through an auxiliary
//! classifier on detached latents) and is then frozen for the rest of the
//! session, so changes in the picture come from the backbone alone.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, OptimizerState, ParamStore, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProjectionError {
    #[error("invalid projector dims: latent {latent}, hidden {hidden}, classes {classes}")]
    InvalidDims { latent: usize, hidden: usize, classes: usize },
    #[error("projector is frozen")]
    Frozen,
    #[error("projector is already frozen")]
    AlreadyFrozen,
    #[error("need at least 2 reference points, got {0}")]
    TooFewReferencePoints(usize),
    #[error("reference points are degenerate (zero spread)")]
    DegenerateReference,
    #[error("latent width {got} does not match projector input {expected}")]
    LatentDim { expected: usize, got: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub const DEFAULT_HIDDEN: usize = 32;

/// `D -> H -> 2` with `tanh` between, plus a `2 -> C` auxiliary head that
/// exists only until [`Projector::freeze`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projector<T = f32> {
    latent_dim: usize,
    hidden: usize,
    classes: usize,
    params: ParamStore<T>,
    aux_head: Option<ParamStore<T>>,
    frozen: bool,
    sigma_ref: Option<f64>,
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()).expect("init shape")
}

/// Population standard deviation of every coordinate pooled together.
pub fn pooled_std<T: Real>(points: &Tensor<T>) -> f64 {
    let n = points.numel() as f64;
    let mean = points.data().iter().map(|v| v.f64()).sum::<f64>() / n;
    let var = points.data().iter().map(|v| (v.f64() - mean) * (v.f64() - mean)).sum::<f64>() / n;
    libm::sqrt(var)
}

impl<T: Real> Projector<T> {
    pub fn init(latent_dim: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self, ProjectionError> {
        if latent_dim < 2 || hidden < 2 || classes < 2 {
            return Err(ProjectionError::InvalidDims { latent: latent_dim, hidden, classes });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert("proj1.weight", uniform(&mut rng, &[latent_dim, hidden], latent_dim))?;
        params.insert("proj1.bias", uniform(&mut rng, &[hidden], latent_dim))?;
        params.insert("proj2.weight", uniform(&mut rng, &[hidden, 2], hidden))?;
        params.insert("proj2.bias", uniform(&mut rng, &[2], hidden))?;
        let mut aux = ParamStore::new();
        aux.insert("aux.weight", uniform(&mut rng, &[2, classes], 2))?;
        aux.insert("aux.bias", uniform(&mut rng, &[classes], 2))?;
        Ok(Projector { latent_dim, hidden, classes, params, aux_head: Some(aux), frozen: false, sigma_ref: None })
    }

    /// Reassembles a projector from persisted state.
    pub fn from_parts(
        params: ParamStore<T>,
        aux_head: Option<ParamStore<T>>,
        classes: usize,
        frozen: bool,
        sigma_ref: Option<f64>,
    ) -> Result<Self, ProjectionError> {
        let w1 = params.get("proj1.weight").ok_or(ProjectionError::InvalidDims { latent: 0, hidden: 0, classes: 0 })?;
        let (latent_dim, hidden) = (w1.shape()[0], w1.shape()[1]);
        if aux_head.as_ref().and_then(|a| a.get("aux.bias")).is_some_and(|b| b.numel() != classes) {
            return Err(ProjectionError::InvalidDims { latent: latent_dim, hidden, classes });
        }
        if frozen != sigma_ref.is_some() || frozen == aux_head.is_some() {
            return Err(ProjectionError::InvalidDims { latent: latent_dim, hidden, classes });
        }
        Ok(Projector { latent_dim, hidden, classes, params, aux_head, frozen, sigma_ref })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn sigma_ref(&self) -> Option<f64> {
        self.sigma_ref
    }

    /// Class count of the auxiliary head, kept after freezing.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn aux_head(&self) -> Option<&ParamStore<T>> {
        self.aux_head.as_ref()
    }

    /// Mutable access to the projection weights; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore<T>, ProjectionError> {
        if self.frozen {
            return Err(ProjectionError::Frozen);
        }
        Ok(&mut self.params)
    }

    pub fn cast<U: Real>(&self) -> Projector<U> {
        Projector {
            latent_dim: self.latent_dim,
            hidden: self.hidden,
            classes: self.classes,
            params: self.params.cast(),
            aux_head: self.aux_head.as_ref().map(ParamStore::cast),
            frozen: self.frozen,
            sigma_ref: self.sigma_ref,
        }
    }

    /// Records `p = tanh(z W1 + b1) W2 + b2` on `g`. Gradients reach `z`
    /// whether or not the projector is frozen.
    pub fn project_graph(&self, g: &mut Graph<T>, params: &[Var], z: Var) -> Result<Var, ProjectionError> {
        let shape = g.value(z).shape();
        if shape.len() != 2 || shape[1] != self.latent_dim {
            return Err(ProjectionError::LatentDim { expected: self.latent_dim, got: *shape.last().unwrap_or(&0) });
        }
        let h = g.matmul(z, params[0])?;
        let h = g.add(h, params[1])?;
        let h = g.tanh(h);
        let p = g.matmul(h, params[2])?;
        Ok(g.add(p, params[3])?)
    }

    pub fn project(&self, z: &Tensor<T>) -> Result<Tensor<T>, ProjectionError> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g);
        let z = g.input(z.clone());
        let p = self.project_graph(&mut g, &vars, z)?;
        Ok(g.value(p).clone())
    }

    /// One auxiliary-classification step on latents that carry no gradient
    /// back to the backbone. `optimizer` covers the projection weights
    /// followed by the auxiliary head. Returns the auxiliary loss before
    /// the update.
    pub fn epoch1_step(
        &mut self,
        latents: &Tensor<T>,
        labels: &[usize],
        optimizer: &mut OptimizerState<T>,
    ) -> Result<f64, ProjectionError> {
        if self.frozen {
            return Err(ProjectionError::Frozen);
        }
        let aux = self.aux_head.as_mut().expect("unfrozen projector has an aux head");
        let mut g = Graph::new();
        let mut vars = self.params.bind(&mut g);
        let aux_vars = aux.bind(&mut g);
        let z = g.input(latents.clone());
        let p = {
            let shape = g.value(z).shape();
            if shape.len() != 2 || shape[1] != self.latent_dim {
                return Err(ProjectionError::LatentDim { expected: self.latent_dim, got: *shape.last().unwrap_or(&0) });
            }
            let h = g.matmul(z, vars[0])?;
            let h = g.add(h, vars[1])?;
            let h = g.tanh(h);
            let p = g.matmul(h, vars[2])?;
            g.add(p, vars[3])?
        };
        let logits = g.matmul(p, aux_vars[0])?;
        let logits = g.add(logits, aux_vars[1])?;
        let loss = g.softmax_cross_entropy(logits, labels)?;
        let value = g.value(loss).item().f64();
        if !value.is_finite() {
            return Err(DiffError::NonFinite("projector auxiliary loss".into()).into());
        }
        let grads = g.backward(loss)?;
        vars.extend_from_slice(&aux_vars);
        let grads = grads.collect(&vars);
        let mut joint = ParamStore::new();
        for (name, t) in self.params.iter().chain(aux.iter()) {
            joint.insert(name, t.clone())?;
        }
        optimizer.step(&mut joint, &grads)?;
        let mut it = joint.iter();
        for slot in self.params.tensors_mut().chain(aux.tensors_mut()) {
            *slot = it.next().expect("joint store").1.clone();
        }
        Ok(value)
    }

    /// Freezes the projection and records the reference scale as the
    /// pooled population standard deviation of `reference` (`[M, 2]`).
    pub fn freeze(&mut self, reference: &Tensor<T>) -> Result<f64, ProjectionError> {
        if self.frozen {
            return Err(ProjectionError::AlreadyFrozen);
        }
        if reference.shape().len() != 2 || reference.shape()[1] != 2 || reference.rows() < 2 {
            return Err(ProjectionError::TooFewReferencePoints(reference.rows()));
        }
        let sigma = pooled_std(reference);
        if !(sigma > 0.0) {
            return Err(ProjectionError::DegenerateReference);
        }
        self.frozen = true;
        self.aux_head = None;
        self.sigma_ref = Some(sigma);
        Ok(sigma)
    }

    /// Byte image of the projection weights.
    pub fn param_bytes(&self) -> Vec<u8> {
        self.params.to_le_bytes()
    }
}
