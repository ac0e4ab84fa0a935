use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ANCHOR_TOKENS};
use crate::error::{Error, Result};

/// A named parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Array2<f64>,
}

/// All model parameters in a fixed order.
///
/// Values are held as `f64` for computation but are always representable as
/// `f32`, which is what checkpoints store.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    tensors: Vec<Tensor>,
}

pub(crate) const EMBED_VISUAL: usize = 0;
pub(crate) const EMBED_TEXT: usize = 1;
pub(crate) const EMBED_SPECIAL: usize = 2;
pub(crate) const EMBED_ROW: usize = 3;
pub(crate) const EMBED_COL: usize = 4;
pub(crate) const EMBED_TEXT_POS: usize = 5;
const EMBED_COUNT: usize = 6;
const PER_LAYER: usize = 12;

/// Offsets of one block's tensors from its base index.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerIdx {
    base: usize,
}

impl LayerIdx {
    pub fn new(layer: usize) -> Self {
        Self { base: EMBED_COUNT + PER_LAYER * layer }
    }
    pub fn ln1_gain(self) -> usize {
        self.base
    }
    pub fn ln1_bias(self) -> usize {
        self.base + 1
    }
    pub fn qkv_weight(self) -> usize {
        self.base + 2
    }
    pub fn qkv_bias(self) -> usize {
        self.base + 3
    }
    pub fn out_weight(self) -> usize {
        self.base + 4
    }
    pub fn out_bias(self) -> usize {
        self.base + 5
    }
    pub fn ln2_gain(self) -> usize {
        self.base + 6
    }
    pub fn ln2_bias(self) -> usize {
        self.base + 7
    }
    pub fn ffn_in_weight(self) -> usize {
        self.base + 8
    }
    pub fn ffn_in_bias(self) -> usize {
        self.base + 9
    }
    pub fn ffn_out_weight(self) -> usize {
        self.base + 10
    }
    pub fn ffn_out_bias(self) -> usize {
        self.base + 11
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

fn layout(c: &ModelConfig) -> Vec<(String, (usize, usize), Init)> {
    let d = c.d_model;
    let emb = Init::Normal(0.1);
    let w = Init::Normal(0.02);
    let w_res = Init::Normal(0.02 / ((2 * c.layers) as f64).sqrt());
    let mut out = vec![
        ("embed.visual".to_string(), (c.visual_vocab, d), emb),
        ("embed.text".to_string(), (c.text_vocab, d), emb),
        ("embed.anchor".to_string(), (ANCHOR_TOKENS, d), emb),
        ("embed.row".to_string(), (c.max_rows, d), emb),
        ("embed.col".to_string(), (c.max_cols, d), emb),
        ("embed.text_pos".to_string(), (c.max_query_len + ANCHOR_TOKENS, d), emb),
    ];
    for l in 0..c.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        out.extend([
            (p("ln1.gain"), (1, d), Init::Ones),
            (p("ln1.bias"), (1, d), Init::Zeros),
            (p("attn.qkv.weight"), (d, 3 * d), w),
            (p("attn.qkv.bias"), (1, 3 * d), Init::Zeros),
            (p("attn.out.weight"), (d, d), w_res),
            (p("attn.out.bias"), (1, d), Init::Zeros),
            (p("ln2.gain"), (1, d), Init::Ones),
            (p("ln2.bias"), (1, d), Init::Zeros),
            (p("ffn.in.weight"), (d, c.d_ff), w),
            (p("ffn.in.bias"), (1, c.d_ff), Init::Zeros),
            (p("ffn.out.weight"), (c.d_ff, d), w_res),
            (p("ffn.out.bias"), (1, d), Init::Zeros),
        ]);
    }
    out
}

impl Params {
    pub(crate) fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let tensors = layout(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let value = match init {
                    Init::Ones => Array2::ones(shape),
                    Init::Zeros => Array2::zeros(shape),
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("positive std");
                        Array2::from_shape_simple_fn(shape, || dist.sample(&mut rng) as f32 as f64)
                    }
                };
                Tensor { name, value }
            })
            .collect();
        Self { tensors }
    }

    pub(crate) fn from_tensors(tensors: Vec<Tensor>) -> Self {
        Self { tensors }
    }

    /// Verify names and shapes against what `config` expects.
    pub(crate) fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let expected = layout(config);
        if expected.len() != self.tensors.len() {
            return Err(Error::TensorTable(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape, _), t) in expected.iter().zip(&self.tensors) {
            if *name != t.name || *shape != t.value.dim() {
                return Err(Error::TensorTable(format!(
                    "expected {name} {shape:?}, found {} {:?}",
                    t.name,
                    t.value.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, index: usize) -> &Array2<f64> {
        &self.tensors[index].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Snap every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.value.mapv_inplace(|v| v as f32 as f64);
        }
    }
}
