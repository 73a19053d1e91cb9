use std::collections::BTreeMap;

use rand::Rng;

use super::config::ModelConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Decoder / head branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Branch {
    Ref,
    Src,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Ref => "ref",
            Branch::Src => "src",
        }
    }
}

const INIT_STD: f64 = 0.02;
/// Prompt tokens start as small Gaussian noise.
pub const PROMPT_INIT_STD: f64 = 0.02;
/// Initial depth the head bias points at, in scene units.
const HEAD_DEPTH_BIAS: f64 = 4.0;

/// Backbone parameters: patch embedding, shared encoder, two decoder branches
/// and two heads. Frozen during test-time adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    tensors: BTreeMap<String, Tensor>,
}

/// Expected `(name, shape)` list for a config, in a fixed order.
pub fn weight_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let h = cfg.mlp_hidden();
    let p2 = cfg.patch_size * cfg.patch_size;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
    let linear = |push: &mut dyn FnMut(String, Vec<usize>), name: &str, i: usize, o: usize| {
        push(format!("{name}.w"), vec![i, o]);
        push(format!("{name}.b"), vec![o]);
    };
    let norm = |push: &mut dyn FnMut(String, Vec<usize>), name: &str| {
        push(format!("{name}.g"), vec![d]);
        push(format!("{name}.b"), vec![d]);
    };
    linear(&mut push, "patch_embed", p2 * 3, d);
    for i in 0..cfg.encoder_layers {
        let p = format!("enc.{i}");
        norm(&mut push, &format!("{p}.ln1"));
        linear(&mut push, &format!("{p}.attn.qkv"), d, 3 * d);
        linear(&mut push, &format!("{p}.attn.proj"), d, d);
        norm(&mut push, &format!("{p}.ln2"));
        linear(&mut push, &format!("{p}.mlp.fc1"), d, h);
        linear(&mut push, &format!("{p}.mlp.fc2"), h, d);
    }
    norm(&mut push, "enc.norm");
    for branch in [Branch::Ref, Branch::Src] {
        for i in 0..cfg.decoder_layers {
            let p = format!("dec.{}.{i}", branch.name());
            norm(&mut push, &format!("{p}.ln1"));
            linear(&mut push, &format!("{p}.self.qkv"), d, 3 * d);
            linear(&mut push, &format!("{p}.self.proj"), d, d);
            norm(&mut push, &format!("{p}.ln2"));
            norm(&mut push, &format!("{p}.ln_ctx"));
            linear(&mut push, &format!("{p}.cross.q"), d, d);
            linear(&mut push, &format!("{p}.cross.kv"), d, 2 * d);
            linear(&mut push, &format!("{p}.cross.proj"), d, d);
            norm(&mut push, &format!("{p}.ln3"));
            linear(&mut push, &format!("{p}.mlp.fc1"), d, h);
            linear(&mut push, &format!("{p}.mlp.fc2"), h, d);
        }
        linear(
            &mut push,
            &format!("head.{}", branch.name()),
            (cfg.decoder_layers + 1) * d,
            p2 * 4,
        );
    }
    out
}

impl Weights {
    /// Random initialisation: N(0, 0.02²) matrices, unit norm gains, zero
    /// biases except the head's depth channel.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in weight_layout(cfg) {
            let t = if name.ends_with(".g") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with(".w") {
                Tensor::randn(shape, INIT_STD, rng)
            } else if name.starts_with("head.") {
                let mut b = Tensor::zeros(shape);
                for (i, v) in b.data_mut().iter_mut().enumerate() {
                    if i % 4 == 2 {
                        *v = HEAD_DEPTH_BIAS;
                    }
                }
                b
            } else {
                Tensor::zeros(shape)
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    /// Builds weights from named tensors, checking names and shapes against the config.
    pub fn from_tensors(cfg: &ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let mut out = BTreeMap::new();
        for (name, shape) in weight_layout(cfg) {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Input(format!("missing weight tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Input(format!(
                    "weight {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            out.insert(name, t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Input(format!("unexpected weight tensor {extra}")));
        }
        Ok(Self { tensors: out })
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("no weight named {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Bitwise equality of every tensor (NaN-safe, unlike `==`).
    pub fn bit_identical(&self, other: &Weights) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, a), (nb, b))| {
                na == nb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Names of tensors that differ bitwise from `other`.
    pub fn changed_tensors(&self, other: &Weights) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(name, t)| {
                other.tensors.get(*name).is_none_or(|o| {
                    o.shape() != t.shape()
                        || o.data().iter().zip(t.data()).any(|(x, y)| x.to_bits() != y.to_bits())
                })
            })
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Learnable prompt tokens: the only trainable state during adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    /// One `N_p × D` array per group (encoder layer, or a single group).
    pub tokens: Vec<Tensor>,
}

impl PromptSet {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let tokens = (0..cfg.prompt_groups())
            .map(|_| Tensor::randn([cfg.prompt_len, cfg.embed_dim], PROMPT_INIT_STD, rng))
            .collect();
        Self { tokens }
    }

    pub fn empty(cfg: &ModelConfig) -> Self {
        Self {
            tokens: (0..cfg.prompt_groups())
                .map(|_| Tensor::zeros([0, cfg.embed_dim]))
                .collect(),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.tokens.len() != cfg.prompt_groups() {
            return Err(Error::Input(format!(
                "expected {} prompt groups, got {}",
                cfg.prompt_groups(),
                self.tokens.len()
            )));
        }
        for (i, t) in self.tokens.iter().enumerate() {
            if t.shape() != [cfg.prompt_len, cfg.embed_dim] {
                return Err(Error::Input(format!(
                    "prompt group {i} has shape {:?}, expected [{}, {}]",
                    t.shape(),
                    cfg.prompt_len,
                    cfg.embed_dim
                )));
            }
            if !t.is_finite() {
                return Err(Error::Numerical(format!("prompt group {i} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.tokens.iter().map(Tensor::numel).sum()
    }

    pub fn name(group: usize) -> String {
        format!("prompt.{group}")
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (Self::name(i), t.clone()))
            .collect()
    }

    pub fn from_named(cfg: &ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut tokens = Vec::new();
        for i in 0..cfg.prompt_groups() {
            tokens.push(
                tensors
                    .remove(&Self::name(i))
                    .ok_or_else(|| Error::Input(format!("missing prompt tensor {}", Self::name(i))))?,
            );
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Input(format!("unexpected prompt tensor {extra}")));
        }
        let set = Self { tokens };
        set.validate(cfg)?;
        Ok(set)
    }
}
