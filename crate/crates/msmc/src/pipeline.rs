//! End-to-end runs and the on-disk artifacts that tie commands together:
//! graph extraction from flow sequences, training into a checkpoint,
//! scoring against a saved checkpoint, metric evaluation, and the
//! JSON/JSONL/TSV writers the CLI uses.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::consistency::FrameGrids;
use crate::error::{Error, Result};
use crate::flow::FlowSequence;
use crate::graph::{build_msmc, MotionGraph, MultiScaleGraphSet};
use crate::net::{
    fusion_losses, prepare_snippet, train, AdamState, EpochRecord, ModelParams, PreparedSnippet,
    TrainOutcome,
};
use crate::scoring::{anomaly_scores, metrics, MetricsReport, Normalizer, ScoreSeries};

/// Builds one multi-scale graph set per snippet of the sequence.
pub fn extract_graph_sets(
    seq: &FlowSequence,
    cfg: &RunConfig,
) -> Result<Vec<MultiScaleGraphSet>> {
    let specs = cfg.scale_specs(seq.width(), seq.height())?;
    let grids = FrameGrids::compute(seq, &specs)?;
    let params = cfg.consistency_params();
    let ends = FrameGrids::snippet_ends(seq.frame_count(), cfg.snippet_frames, cfg.snippet_stride);
    if ends.is_empty() {
        return Err(Error::SequenceTooShort {
            frames: seq.frame_count(),
            snippet: cfg.snippet_frames,
        });
    }
    ends.par_iter()
        .map(|&end| {
            let window = grids.window(seq, cfg.snippet_frames, cfg.snippet_stride, end)?;
            build_msmc(&window, &specs, &params)
        })
        .collect()
}

pub fn prepare_all(sets: &[MultiScaleGraphSet]) -> Result<Vec<PreparedSnippet>> {
    sets.iter().map(prepare_snippet).collect()
}

/// A dense matrix in row-major order, as stored inside checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TensorData {
    fn from_array(a: &Array2<f64>) -> Self {
        TensorData {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    fn to_array(&self, name: &str) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone()).map_err(|_| {
            Error::CheckpointMismatch {
                reason: format!(
                    "tensor {name}: {}x{} shape disagrees with {} stored values",
                    self.rows,
                    self.cols,
                    self.data.len()
                ),
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NamedTensor {
    fn from_array(name: String, a: &Array2<f64>) -> Self {
        let t = TensorData::from_array(a);
        NamedTensor {
            name,
            rows: t.rows,
            cols: t.cols,
            data: t.data,
        }
    }

    fn to_array(&self) -> Result<Array2<f64>> {
        TensorData {
            rows: self.rows,
            cols: self.cols,
            data: self.data.clone(),
        }
        .to_array(&self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerData {
    pub step: u64,
    pub m: Vec<TensorData>,
    pub v: Vec<TensorData>,
}

/// Everything a scoring run needs: the training config, the frame geometry
/// the model was fit to, all parameter tensors by name, the optimizer
/// moments (so training could resume), and the score normalizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub frame_width: usize,
    pub frame_height: usize,
    pub tensors: Vec<NamedTensor>,
    pub optimizer: OptimizerData,
    pub normalizer: Normalizer,
}

impl Checkpoint {
    pub fn from_training(
        config: RunConfig,
        frame_width: usize,
        frame_height: usize,
        outcome: &TrainOutcome,
        normalizer: Normalizer,
    ) -> Self {
        let tensors = outcome
            .params
            .tensors()
            .into_iter()
            .map(|(name, a)| NamedTensor::from_array(name, a))
            .collect();
        Checkpoint {
            config,
            frame_width,
            frame_height,
            tensors,
            optimizer: OptimizerData {
                step: outcome.optimizer.step,
                m: outcome.optimizer.m.iter().map(TensorData::from_array).collect(),
                v: outcome.optimizer.v.iter().map(TensorData::from_array).collect(),
            },
            normalizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Internal {
            context: "Checkpoint::save",
            reason: e.to_string(),
        })?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io("write checkpoint", path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io("read checkpoint", path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::CheckpointParse {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        ckpt.config.validate().map_err(|e| Error::CheckpointParse {
            path: path.to_path_buf(),
            reason: format!("embedded config: {e}"),
        })?;
        Ok(ckpt)
    }

    /// Rebuilds the model, requiring the stored tensors to match the
    /// embedded config's architecture name for name and shape for shape.
    pub fn model_params(&self) -> Result<ModelParams> {
        let mut params =
            ModelParams::init(self.config.embed_dim, &self.config.scale_factors, 0);
        let expected = params.tensors().len();
        if self.tensors.len() != expected {
            return Err(Error::CheckpointMismatch {
                reason: format!(
                    "stored {} tensors, architecture has {expected}",
                    self.tensors.len()
                ),
            });
        }
        for ((name, slot), stored) in params.tensors_mut().into_iter().zip(&self.tensors) {
            if stored.name != name {
                return Err(Error::CheckpointMismatch {
                    reason: format!("expected tensor {name}, found {}", stored.name),
                });
            }
            let loaded = stored.to_array()?;
            if loaded.dim() != slot.dim() {
                return Err(Error::CheckpointMismatch {
                    reason: format!(
                        "tensor {name}: stored {}x{}, architecture wants {}x{}",
                        loaded.nrows(),
                        loaded.ncols(),
                        slot.nrows(),
                        slot.ncols()
                    ),
                });
            }
            *slot = loaded;
        }
        params.validate().map_err(|e| Error::CheckpointMismatch {
            reason: e.to_string(),
        })?;
        Ok(params)
    }

    pub fn adam_state(&self) -> Result<AdamState> {
        let count = self.tensors.len();
        if self.optimizer.m.len() != count || self.optimizer.v.len() != count {
            return Err(Error::CheckpointMismatch {
                reason: format!(
                    "optimizer holds {}/{} moment tensors for {count} parameters",
                    self.optimizer.m.len(),
                    self.optimizer.v.len()
                ),
            });
        }
        let mut m = Vec::with_capacity(count);
        let mut v = Vec::with_capacity(count);
        for (i, (dm, dv)) in self.optimizer.m.iter().zip(&self.optimizer.v).enumerate() {
            let name = &self.tensors[i].name;
            let am = dm.to_array(name)?;
            let av = dv.to_array(name)?;
            let want = (self.tensors[i].rows, self.tensors[i].cols);
            if am.dim() != want || av.dim() != want {
                return Err(Error::CheckpointMismatch {
                    reason: format!("optimizer moments for {name} have the wrong shape"),
                });
            }
            m.push(am);
            v.push(av);
        }
        Ok(AdamState {
            step: self.optimizer.step,
            m,
            v,
        })
    }

    /// Scoring must recompute features exactly as training saw them, so the
    /// fields that define features or the model must match. Snippet stride
    /// and the moving-average weight are scoring-time knobs and may differ.
    pub fn check_scoring_compat(&self, cfg: &RunConfig, seq: &FlowSequence) -> Result<()> {
        let mismatch = |field: &str, stored: String, active: String| {
            Err(Error::CheckpointMismatch {
                reason: format!("{field}: checkpoint has {stored}, config has {active}"),
            })
        };
        let a = &self.config;
        if a.snippet_frames != cfg.snippet_frames {
            return mismatch(
                "snippet_frames",
                a.snippet_frames.to_string(),
                cfg.snippet_frames.to_string(),
            );
        }
        if a.direction_classes != cfg.direction_classes {
            return mismatch(
                "direction_classes",
                a.direction_classes.to_string(),
                cfg.direction_classes.to_string(),
            );
        }
        if a.scale_factors != cfg.scale_factors {
            return mismatch(
                "scale_factors",
                format!("{:?}", a.scale_factors),
                format!("{:?}", cfg.scale_factors),
            );
        }
        if a.shoulder_px != cfg.shoulder_px {
            return mismatch(
                "shoulder_px",
                a.shoulder_px.to_string(),
                cfg.shoulder_px.to_string(),
            );
        }
        if a.eps_static != cfg.eps_static {
            return mismatch(
                "eps_static",
                a.eps_static.to_string(),
                cfg.eps_static.to_string(),
            );
        }
        if a.connectivity != cfg.connectivity {
            return mismatch(
                "connectivity",
                a.connectivity.to_string(),
                cfg.connectivity.to_string(),
            );
        }
        if a.embed_dim != cfg.embed_dim {
            return mismatch(
                "embed_dim",
                a.embed_dim.to_string(),
                cfg.embed_dim.to_string(),
            );
        }
        if (seq.width(), seq.height()) != (self.frame_width, self.frame_height) {
            return Err(Error::CheckpointMismatch {
                reason: format!(
                    "flow frames are {}x{}, checkpoint was trained on {}x{}",
                    seq.width(),
                    seq.height(),
                    self.frame_width,
                    self.frame_height
                ),
            });
        }
        Ok(())
    }
}

pub struct TrainArtifacts {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochRecord>,
}

/// Extracts graphs, trains from a seeded initialization, fits the score
/// normalizer on the training snippets' final losses, and packages a
/// checkpoint. Identical inputs give identical artifacts.
pub fn train_pipeline(cfg: &RunConfig, seq: &FlowSequence) -> Result<TrainArtifacts> {
    cfg.validate()?;
    let sets = extract_graph_sets(seq, cfg)?;
    let prepared = prepare_all(&sets)?;
    let init = ModelParams::init(cfg.embed_dim, &cfg.scale_factors, cfg.seed);
    let outcome = train(init, &prepared, &cfg.train_settings())?;
    let raw = fusion_losses(&outcome.params, &prepared)?;
    let normalizer = Normalizer::from_values(&raw)?;
    let checkpoint = Checkpoint::from_training(
        cfg.clone(),
        seq.width(),
        seq.height(),
        &outcome,
        normalizer,
    );
    Ok(TrainArtifacts {
        checkpoint,
        epochs: outcome.epochs,
    })
}

/// Scores a sequence with a saved model: per-snippet fused reconstruction
/// losses, normalized by the checkpoint's normalizer, smoothed, and spread
/// over frames.
pub fn score_pipeline(
    cfg: &RunConfig,
    checkpoint: &Checkpoint,
    seq: &FlowSequence,
) -> Result<ScoreSeries> {
    cfg.validate()?;
    checkpoint.check_scoring_compat(cfg, seq)?;
    let sets = extract_graph_sets(seq, cfg)?;
    let prepared = prepare_all(&sets)?;
    let params = checkpoint.model_params()?;
    let raw = fusion_losses(&params, &prepared)?;
    anomaly_scores(
        &raw,
        &checkpoint.normalizer,
        cfg.lambda_moving,
        seq.frame_count(),
        cfg.snippet_frames,
        cfg.snippet_stride,
    )
}

/// Computes ROC metrics and enforces optional thresholds.
pub fn evaluate(
    frame_scores: &[f64],
    labels: &[u8],
    min_auc: Option<f64>,
    max_eer: Option<f64>,
) -> Result<MetricsReport> {
    let report = metrics(frame_scores, labels)?;
    if let Some(min) = min_auc {
        if report.auc < min {
            return Err(Error::MetricThreshold {
                what: "auc",
                actual: report.auc,
                requirement: format!(">= {min}"),
            });
        }
    }
    if let Some(max) = max_eer {
        if report.eer > max {
            return Err(Error::MetricThreshold {
                what: "eer",
                actual: report.eer,
                requirement: format!("<= {max}"),
            });
        }
    }
    Ok(report)
}

/// One graph as exported to JSONL: raw consistency values, one record per
/// scale per snippet.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphRecord {
    pub end_frame: usize,
    pub scale_factor: usize,
    pub regions_w: usize,
    pub regions_h: usize,
    /// Direction class count used for the temporal measures.
    pub classes: usize,
    /// Per region: [direction entropy of the last frame, direction entropy
    /// over the snippet].
    pub nodes: Vec<(f64, f64)>,
    pub edges: Vec<(usize, usize)>,
    /// Per edge: adjusted cosine similarity in [-1, 1].
    pub edge_spatial: Vec<f64>,
    /// Per edge: direction mutual information in [0, ln classes].
    pub edge_temporal: Vec<f64>,
}

impl GraphRecord {
    pub fn from_graph(g: &MotionGraph) -> Self {
        GraphRecord {
            end_frame: g.end_frame,
            scale_factor: g.spec.scale_factor,
            regions_w: g.spec.regions_w,
            regions_h: g.spec.regions_h,
            classes: g.classes,
            nodes: g
                .node_features
                .rows()
                .into_iter()
                .map(|r| (r[0], r[1]))
                .collect(),
            edges: g.edges.clone(),
            edge_spatial: g.edge_raw.column(0).to_vec(),
            edge_temporal: g.edge_raw.column(1).to_vec(),
        }
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io("write", path, e))
}

pub fn write_json_pretty(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal {
        context: "write_json_pretty",
        reason: e.to_string(),
    })?;
    text.push('\n');
    write_text(path, &text)
}

/// One [`GraphRecord`] per line, snippets in order, scales within a snippet
/// in config order.
pub fn write_graphs_jsonl(path: &Path, sets: &[MultiScaleGraphSet]) -> Result<()> {
    let mut text = String::new();
    for set in sets {
        for g in &set.graphs {
            let line = serde_json::to_string(&GraphRecord::from_graph(g)).map_err(|e| {
                Error::Internal {
                    context: "write_graphs_jsonl",
                    reason: e.to_string(),
                }
            })?;
            text.push_str(&line);
            text.push('\n');
        }
    }
    write_text(path, &text)
}

pub fn write_epochs_jsonl(path: &Path, epochs: &[EpochRecord]) -> Result<()> {
    let mut text = String::new();
    for record in epochs {
        let line = serde_json::to_string(record).map_err(|e| Error::Internal {
            context: "write_epochs_jsonl",
            reason: e.to_string(),
        })?;
        text.push_str(&line);
        text.push('\n');
    }
    write_text(path, &text)
}

/// `frame_index<TAB>score`, one line per frame.
pub fn write_scores_tsv(path: &Path, series: &ScoreSeries) -> Result<()> {
    let mut text = String::new();
    for (i, s) in series.frame_scores.iter().enumerate() {
        text.push_str(&format!("{i}\t{s}\n"));
    }
    write_text(path, &text)
}

pub fn read_scores_tsv(path: &Path) -> Result<Vec<f64>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io("read scores", path, e))?;
    let malformed = |line: usize, reason: String| Error::MalformedScores {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut scores = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (index_text, score_text) = line
            .split_once('\t')
            .ok_or_else(|| malformed(i + 1, "expected frame_index<TAB>score".into()))?;
        let index: usize = index_text
            .trim()
            .parse()
            .map_err(|_| malformed(i + 1, format!("bad frame index {index_text:?}")))?;
        if index != scores.len() {
            return Err(malformed(
                i + 1,
                format!("frame index {index}, expected {}", scores.len()),
            ));
        }
        let score: f64 = score_text
            .trim()
            .parse()
            .map_err(|_| malformed(i + 1, format!("bad score {score_text:?}")))?;
        scores.push(score);
    }
    if scores.is_empty() {
        return Err(Error::EmptyScores);
    }
    Ok(scores)
}
