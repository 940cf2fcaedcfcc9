//! Held-out scoring, AUC and 2-D feature projections.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Sample;
use crate::model::{ModelError, ModelParams, Networks};
use crate::style::{PcaModel, StyleError};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC needs both classes; got {live} live and {spoof} spoof")]
    SingleClass { live: usize, spoof: usize },
    #[error("scores and labels differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("projection needs at least 3 samples, got {0}")]
    TooFewSamples(usize),
    #[error("degenerate features: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

const SCORE_CHUNK: usize = 64;
pub const HISTOGRAM_BINS: usize = 10;

/// Scores `M(F(x))` for a set of images, chunked; no parameters change.
pub fn score(nets: &Networks, params: &ModelParams, images: &[&Tensor]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(SCORE_CHUNK) {
        out.extend(nets.score_batch(params, &Tensor::stack(chunk)?)?);
    }
    Ok(out)
}

/// Flattened F outputs, one row per image.
pub fn features(nets: &Networks, params: &ModelParams, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(images.len());
    for chunk in images.chunks(SCORE_CHUNK) {
        let tape = Tape::new();
        let bf = params.f.bind(&tape, false)?;
        let x = tape.constant(Tensor::stack(chunk)?)?;
        let out = nets.f.forward(&tape, &bf, x)?.features.value();
        let width = out.len() / chunk.len();
        rows.extend(out.data().chunks(width).map(|r| r.to_vec()));
    }
    Ok(rows)
}

/// Mann-Whitney AUC with label 1 as the positive class; ties count one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass { live: pos, spoof: neg });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1.0).count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: usize,
    pub label: f64,
    pub score: f64,
}

/// Equal-width bins over [0, 1] per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub edges: Vec<f64>,
    pub live: Vec<usize>,
    pub spoof: Vec<usize>,
}

impl ScoreHistogram {
    pub fn new(scores: &[f64], labels: &[f64]) -> Self {
        let edges = (0..=HISTOGRAM_BINS).map(|i| i as f64 / HISTOGRAM_BINS as f64).collect();
        let mut live = vec![0; HISTOGRAM_BINS];
        let mut spoof = vec![0; HISTOGRAM_BINS];
        for (&s, &y) in scores.iter().zip(labels) {
            let bin = ((s * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            if y == 1.0 {
                live[bin] += 1;
            } else {
                spoof[bin] += 1;
            }
        }
        Self { edges, live, spoof }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
    pub architecture_hash: String,
    pub held_out_domain: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub n_samples: usize,
    pub histogram: ScoreHistogram,
    pub metadata: RunMetadata,
    pub samples: Vec<SampleScore>,
}

/// Scores every sample and computes the AUC.
pub fn evaluate(nets: &Networks, params: &ModelParams, samples: &[Sample], metadata: RunMetadata) -> Result<EvalResult> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let scores = score(nets, params, &images)?;
    let labels: Vec<f64> = samples.iter().map(|s| s.y()).collect();
    Ok(EvalResult {
        auc: auc(&scores, &labels)?,
        n_samples: samples.len(),
        histogram: ScoreHistogram::new(&scores, &labels),
        metadata,
        samples: samples
            .iter()
            .zip(&scores)
            .map(|(s, &score)| SampleScore {
                sample_id: s.sample_id,
                label: s.y(),
                score,
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionRow {
    pub sample_id: usize,
    pub pc1: f64,
    pub pc2: f64,
    pub label: f64,
    pub score: f64,
}

/// Projects feature rows onto their first two principal axes.
pub fn project_2d(features: &[Vec<f64>], ids: &[usize], labels: &[f64], scores: &[f64]) -> Result<Vec<ProjectionRow>> {
    if features.len() < 3 {
        return Err(EvalError::TooFewSamples(features.len()));
    }
    let pca = PcaModel::fit(features, 2).map_err(|e| match e {
        StyleError::Degenerate(m) => EvalError::Degenerate(m),
        other => EvalError::Degenerate(other.to_string()),
    })?;
    features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let p = pca.project(f).map_err(|e| EvalError::Degenerate(e.to_string()))?;
            Ok(ProjectionRow {
                sample_id: ids[i],
                pc1: p[0],
                pc2: p.get(1).copied().unwrap_or(0.0),
                label: labels[i],
                score: scores[i],
            })
        })
        .collect()
}

/// CSV with a header row and LF line endings.
pub fn projection_csv(rows: &[ProjectionRow]) -> String {
    let mut out = String::from("sample_id,pc1,pc2,label,score\n");
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.sample_id, r.pc1, r.pc2, r.label, r.score).expect("string write");
    }
    out
}
