use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::ModelConfig;
use crate::error::{FipError, Result};
use crate::modalities::ModalityKind;
use crate::tensor_ad::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Glorot-uniform over `[fan_in, fan_out]`.
    Xavier,
    Zeros,
    Ones,
    /// N(0, 0.02^2)
    Small,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, fan_in: usize, fan_out: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.weight"),
        shape: vec![fan_in, fan_out],
        init: Init::Xavier,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.bias"),
        shape: vec![fan_out],
        init: Init::Zeros,
    });
}

fn norm(out: &mut Vec<ParamSpec>, prefix: &str, d: usize) {
    out.push(ParamSpec {
        name: format!("{prefix}.gamma"),
        shape: vec![d],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{prefix}.beta"),
        shape: vec![d],
        init: Init::Zeros,
    });
}

fn block(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, mlp_ratio: usize) {
    norm(out, &format!("{prefix}.norm1"), d);
    linear(out, &format!("{prefix}.attn.q"), d, d);
    // Softmax ignores a per-row constant, so a key bias would never get a gradient.
    out.push(ParamSpec {
        name: format!("{prefix}.attn.k.weight"),
        shape: vec![d, d],
        init: Init::Xavier,
    });
    linear(out, &format!("{prefix}.attn.v"), d, d);
    linear(out, &format!("{prefix}.attn.out"), d, d);
    norm(out, &format!("{prefix}.norm2"), d);
    linear(out, &format!("{prefix}.mlp.fc1"), d, d * mlp_ratio);
    linear(out, &format!("{prefix}.mlp.fc2"), d * mlp_ratio, d);
}

/// Names, shapes and initializers of the autoencoder parameters.
pub fn backbone_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d, dw) = (cfg.d_model, cfg.decoder_width);
    let mut out = Vec::new();
    for m in ModalityKind::ALL {
        linear(&mut out, &format!("patch_embed.{m}"), cfg.patch_dim(), d);
        out.push(ParamSpec {
            name: format!("modality_embed.{m}"),
            shape: vec![d],
            init: Init::Small,
        });
    }
    for l in 0..cfg.encoder_layers {
        block(&mut out, &format!("encoder.{l}"), d, cfg.mlp_ratio);
    }
    for (&m, &depth) in &cfg.decoder_layers {
        let p = format!("decoder.{m}");
        out.push(ParamSpec {
            name: format!("{p}.mask_token"),
            shape: vec![1, dw],
            init: Init::Small,
        });
        linear(&mut out, &format!("{p}.embed"), d, dw);
        for l in 0..depth {
            block(&mut out, &format!("{p}.{l}"), dw, cfg.mlp_ratio);
        }
        norm(&mut out, &format!("{p}.norm"), dw);
        linear(&mut out, &format!("{p}.head"), dw, cfg.patch_dim());
    }
    out
}

/// The classification head used after pretraining.
pub fn head_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    linear(&mut out, "head", cfg.d_model, cfg.n_classes);
    out
}

fn init_tensor<T: Real, R: Rng + ?Sized>(spec: &ParamSpec, rng: &mut R) -> Tensor<T> {
    let n: usize = spec.shape.iter().product();
    let data: Vec<T> = match spec.init {
        Init::Zeros => vec![T::zero(); n],
        Init::Ones => vec![T::one(); n],
        Init::Small => {
            let dist = Normal::new(0.0, 0.02).unwrap();
            (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
        }
        Init::Xavier => {
            let (fi, fo) = (spec.shape[0], spec.shape[1]);
            let a = (6.0 / (fi + fo) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a);
            (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
        }
    };
    Tensor::new(spec.shape.clone(), data).unwrap()
}

/// Named parameter tensors in a deterministic (sorted) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Real> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    /// Initializes every spec in order from `rng`.
    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let mut store = Self::new();
        store.init_missing(specs, rng);
        store
    }

    /// Initializes only specs not already present.
    pub fn init_missing<R: Rng + ?Sized>(&mut self, specs: &[ParamSpec], rng: &mut R) {
        for s in specs {
            if !self.params.contains_key(&s.name) {
                let t = init_tensor(s, rng);
                self.params.insert(s.name.clone(), t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| FipError::invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.count_with_prefix("")
    }

    /// Checks that every spec is present with the right shape.
    pub fn check_specs(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            let t = self
                .params
                .get(&s.name)
                .ok_or_else(|| FipError::Checkpoint(format!("parameter {} missing", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(FipError::Checkpoint(format!(
                    "parameter {} has shape {:?}, config expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}
