use std::path::{Path, PathBuf};

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PatchGrid;
use crate::grounding::{global_distribution, top_k, visual_sink_scores};
use crate::toymodel::ForwardTrace;

pub const HEATMAP_FORMAT: &str = "aima-heatmap/1";
pub const TOKENS_FORMAT: &str = "aima-tokens/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub format: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a binary PGM with one pixel per patch, scaled so the largest value
/// is 255, plus a JSON sidecar next to it with the raw values. Returns the
/// sidecar path.
pub fn export_heatmap(values: &[f64], grid: &PatchGrid, path: &Path) -> Result<PathBuf> {
    if values.len() != grid.len() {
        return Err(Error::Shape(format!("{} values for a {}-patch grid", values.len(), grid.len())));
    }
    let max = values.iter().copied().fold(0.0f64, f64::max);
    let mut bytes = format!("P5\n{} {}\n255\n", grid.cols(), grid.rows()).into_bytes();
    bytes.extend(values.iter().map(|&v| if max > 0.0 { (v.max(0.0) / max * 255.0).round() as u8 } else { 0 }));
    write(path, &bytes)?;
    let side =
        HeatmapSidecar { format: HEATMAP_FORMAT.into(), rows: grid.rows(), cols: grid.cols(), values: values.to_vec() };
    let sp = sidecar_path(path);
    write(&sp, serde_json::to_string(&side).expect("sidecar serializes").as_bytes())?;
    Ok(sp)
}

pub fn read_heatmap_sidecar(path: &Path) -> Result<HeatmapSidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let side: HeatmapSidecar =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if side.format != HEATMAP_FORMAT {
        return Err(Error::Parse(format!("unknown heatmap format `{}`", side.format)));
    }
    if side.values.len() != side.rows * side.cols {
        return Err(Error::Parse(format!("{} values for {}x{}", side.values.len(), side.rows, side.cols)));
    }
    Ok(side)
}

/// Two distributions over query tokens for one layer, or for all layers
/// summed when `layer` is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProfile {
    pub layer: Option<usize>,
    /// From summed cosine similarity to the visual hidden states.
    pub embedding: Vec<f64>,
    /// From attention mass on visual tokens, summed over heads.
    pub attention: Vec<f64>,
    /// Token indices, most correlated first.
    pub embedding_rank: Vec<usize>,
    pub attention_rank: Vec<usize>,
}

impl TokenProfile {
    fn new(layer: Option<usize>, cos: &[f64], mass: &[f64]) -> Self {
        let embedding = global_distribution(cos);
        let total: f64 = mass.iter().sum();
        let attention = if total > 0.0 {
            mass.iter().map(|m| m / total).collect()
        } else {
            vec![1.0 / mass.len() as f64; mass.len()]
        };
        let embedding_rank = top_k(&embedding, embedding.len());
        let attention_rank = top_k(&attention, attention.len());
        Self { layer, embedding, attention, embedding_rank, attention_rank }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenCorrelation {
    pub format: String,
    pub query_tokens: Vec<u32>,
    pub per_layer: Vec<TokenProfile>,
    pub overall: TokenProfile,
}

pub fn token_correlation(trace: &ForwardTrace, query_tokens: &[u32]) -> Result<TokenCorrelation> {
    let qa = trace.query_attn.as_ref().ok_or_else(|| Error::MissingQueryRows("analyze-tokens".into()))?;
    let (layers, _, q, _) = qa.dim();
    if q == 0 {
        return Err(Error::EmptyQuery);
    }
    if query_tokens.len() != q {
        return Err(Error::Shape(format!("{} query tokens for {q} query rows", query_tokens.len())));
    }
    let scores = visual_sink_scores(trace, &trace.layout)?;
    let mut per_layer = Vec::with_capacity(layers);
    let mut mass_all = vec![0.0; q];
    for l in 0..layers {
        let mass: Vec<f64> = (0..q).map(|i| qa.slice(s![l, .., i, ..]).sum()).collect();
        mass_all.iter_mut().zip(&mass).for_each(|(a, m)| *a += m);
        let cos = scores.per_layer.row(l).to_vec();
        per_layer.push(TokenProfile::new(Some(l), &cos, &mass));
    }
    let overall = TokenProfile::new(None, &scores.summed, &mass_all);
    Ok(TokenCorrelation { format: TOKENS_FORMAT.into(), query_tokens: query_tokens.to_vec(), per_layer, overall })
}

pub fn token_correlation_report(trace: &ForwardTrace, query_tokens: &[u32], path: &Path) -> Result<TokenCorrelation> {
    let report = token_correlation(trace, query_tokens)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    write(path, text.as_bytes())?;
    Ok(report)
}
