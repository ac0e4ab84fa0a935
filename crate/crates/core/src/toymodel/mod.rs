//! A small pre-norm causal transformer over `[visual patches, query, anchor markers]`.
//!
//! Visual tokens carry learned row and column embeddings; text and anchor
//! tokens carry a learned position within the text segment. The anchor is the
//! middle of three reserved tokens (`<ANCHOR_START> <ANCHOR> <ANCHOR_END>`).
//!
//! Two forward implementations exist:
//! * [`Model::forward`] materializes every attention matrix on a tape and is
//!   the path training differentiates through;
//! * [`Model::forward_fast`] streams attention with an online softmax and keeps
//!   only the layer inputs and keys, from which [`anchor_rows_partial`]
//!   recomputes the text and anchor rows afterwards.

mod checkpoint;
mod fast;
pub(crate) mod graph;
mod params;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use fast::{anchor_rows_partial, FastForward, PartialRows};
pub use params::{Params, Tensor};

/// Number of reserved anchor-segment tokens.
pub const ANCHOR_TOKENS: usize = 3;
pub const ANCHOR_START_ID: usize = 0;
pub const ANCHOR_ID: usize = 1;
pub const ANCHOR_END_ID: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
    pub visual_vocab: usize,
    pub text_vocab: usize,
    pub max_rows: usize,
    pub max_cols: usize,
    pub max_query_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let vocab = crate::synthdata::Vocabulary::standard();
        Self {
            layers: 4,
            heads: 4,
            d_model: 64,
            d_ff: 128,
            visual_vocab: vocab.visual_size(),
            text_vocab: vocab.text_size(),
            max_rows: 14,
            max_cols: 14,
            max_query_len: 8,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self { layers: 2, heads: 2, d_model: 16, d_ff: 32, max_rows: 4, max_cols: 4, ..Self::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("visual_vocab", self.visual_vocab),
            ("text_vocab", self.text_vocab),
            ("max_rows", self.max_rows),
            ("max_cols", self.max_cols),
            ("max_query_len", self.max_query_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("d_model {} is not divisible by heads {}", self.d_model, self.heads)));
        }
        Ok(())
    }
}

/// Positions of the token segments inside one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub visual_len: usize,
    pub query_len: usize,
}

impl SequenceLayout {
    pub fn new(visual_len: usize, query_len: usize) -> Self {
        Self { visual_len, query_len }
    }

    pub fn query_pos(&self, i: usize) -> usize {
        self.visual_len + i
    }

    pub fn query_positions(&self) -> std::ops::Range<usize> {
        self.visual_len..self.visual_len + self.query_len
    }

    pub fn anchor_start_pos(&self) -> usize {
        self.visual_len + self.query_len
    }

    pub fn anchor_pos(&self) -> usize {
        self.anchor_start_pos() + 1
    }

    pub fn total_len(&self) -> usize {
        self.visual_len + self.query_len + ANCHOR_TOKENS
    }
}

/// Visual patch tokens laid out row-major on a `rows x cols` grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisualTokens {
    pub ids: Vec<u32>,
    pub rows: usize,
    pub cols: usize,
}

impl VisualTokens {
    pub fn new(ids: Vec<u32>, rows: usize, cols: usize) -> Result<Self> {
        if ids.len() != rows * cols {
            return Err(Error::Shape(format!("{} visual ids for a {rows}x{cols} grid", ids.len())));
        }
        Ok(Self { ids, rows, cols })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// What the eager forward pass should keep besides hidden states and anchor rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceOptions {
    pub query_rows: bool,
    /// Keep every full attention matrix (debug only; `L*H*T^2` values).
    pub full_rows: bool,
}

/// Hidden states and attention rows from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub layout: SequenceLayout,
    /// `L + 1` matrices of shape `T x d`; index 0 is the embedding output.
    pub hidden: Vec<Array2<f64>>,
    /// `L x H x |V|`: the anchor's attention restricted to visual tokens.
    pub anchor_attn: Array3<f64>,
    /// `L x H x |Q| x |V|`, when requested.
    pub query_attn: Option<Array4<f64>>,
    /// `L * H` full `T x T` matrices, layer-major, when requested.
    pub full_attn: Option<Vec<Array2<f64>>>,
}

impl ForwardTrace {
    pub fn layers(&self) -> usize {
        self.anchor_attn.dim().0
    }

    pub fn heads(&self) -> usize {
        self.anchor_attn.dim().1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Params,
}

impl Model {
    /// Deterministically initialized model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self { config, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn check_inputs(&self, visual: &VisualTokens, query: &[u32]) -> Result<SequenceLayout> {
        let c = &self.config;
        if visual.is_empty() {
            return Err(Error::SequenceOverflow("no visual tokens".into()));
        }
        if visual.rows > c.max_rows || visual.cols > c.max_cols {
            return Err(Error::SequenceOverflow(format!(
                "visual grid {}x{} exceeds {}x{}",
                visual.rows, visual.cols, c.max_rows, c.max_cols
            )));
        }
        if query.len() > c.max_query_len {
            return Err(Error::SequenceOverflow(format!(
                "query of {} tokens exceeds {}",
                query.len(),
                c.max_query_len
            )));
        }
        if let Some(&id) = visual.ids.iter().find(|&&id| id as usize >= c.visual_vocab) {
            return Err(Error::TokenOutOfVocab { kind: "visual", id, size: c.visual_vocab });
        }
        if let Some(&id) = query.iter().find(|&&id| id as usize >= c.text_vocab) {
            return Err(Error::TokenOutOfVocab { kind: "text", id, size: c.text_vocab });
        }
        Ok(SequenceLayout::new(visual.len(), query.len()))
    }

    /// Eager forward pass with materialized attention.
    pub fn forward(&self, visual: &VisualTokens, query: &[u32], opts: TraceOptions) -> Result<ForwardTrace> {
        let layout = self.check_inputs(visual, query)?;
        let mut tape = crate::autograd::Tape::new();
        let vars = graph::param_vars(&mut tape, &self.params, false);
        let g = graph::build(&mut tape, &self.config, &vars, visual, query);
        Ok(g.trace(&tape, layout, opts))
    }

    /// Streaming forward pass; attention matrices are never stored.
    pub fn forward_fast(&self, visual: &VisualTokens, query: &[u32]) -> Result<FastForward> {
        let layout = self.check_inputs(visual, query)?;
        Ok(fast::forward(self, visual, query, layout))
    }

    /// Fast forward followed by partial recomputation of the text and anchor rows.
    pub fn trace_fast(&self, visual: &VisualTokens, query: &[u32], query_rows: bool) -> Result<ForwardTrace> {
        let ff = self.forward_fast(visual, query)?;
        let rows = anchor_rows_partial(self, &ff)?;
        Ok(ForwardTrace {
            layout: ff.layout,
            anchor_attn: rows.anchor_attn,
            query_attn: if query_rows { Some(rows.query_attn) } else { None },
            hidden: ff.hidden,
            full_attn: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_examples() {
        let c = ModelConfig::default();
        assert_eq!(c.head_dim(), 16);
        c.validate().unwrap();
        let bad = ModelConfig { d_model: 30, heads: 4, ..c };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let zero = ModelConfig { layers: 0, ..c };
        assert!(zero.validate().is_err());
        assert!(Model::new(bad).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let c = ModelConfig::tiny();
        let a = Model::new(c).unwrap();
        let b = Model::new(c).unwrap();
        assert_eq!(a.params(), b.params());
        let other = Model::new(ModelConfig { seed: 1, ..c }).unwrap();
        assert_ne!(a.params(), other.params());
    }

    #[test]
    fn layout_positions() {
        let l = SequenceLayout::new(16, 3);
        assert_eq!(l.query_positions(), 16..19);
        assert_eq!(l.anchor_start_pos(), 19);
        assert_eq!(l.anchor_pos(), 20);
        assert_eq!(l.total_len(), 22);
    }

    #[test]
    fn input_validation() {
        let m = Model::new(ModelConfig::tiny()).unwrap();
        let v = VisualTokens::new(vec![0; 4], 2, 2).unwrap();
        assert!(m.check_inputs(&v, &[0, 1]).is_ok());
        let bad_id = VisualTokens::new(vec![9999; 4], 2, 2).unwrap();
        assert!(matches!(m.check_inputs(&bad_id, &[]), Err(Error::TokenOutOfVocab { .. })));
        assert!(matches!(m.check_inputs(&v, &[9999]), Err(Error::TokenOutOfVocab { .. })));
        let big = VisualTokens::new(vec![0; 25], 5, 5).unwrap();
        assert!(matches!(m.check_inputs(&big, &[]), Err(Error::SequenceOverflow(_))));
        assert!(matches!(m.check_inputs(&v, &[0; 9]), Err(Error::SequenceOverflow(_))));
        assert!(VisualTokens::new(vec![0; 3], 2, 2).is_err());
    }
}
