//! Meta-train / meta-test / meta-optimization over pseudo-domains.
//!
//! One meta step runs every meta-train batch and the meta-test batch through
//! F on a single tape. Each meta-train batch gets an inner step on M alone
//! (features frozen), the adapted head scores the meta-test batch, and one
//! backward pass over the summed objective yields the outer gradients:
//!
//! * M: meta-train classification plus meta-test classification at each
//!   adapted head,
//! * F: every term,
//! * D: depth terms only.

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{self, Bound, MetaLearner, ModelError, ModelParams, Networks, ParamSet};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum MetaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid hyperparameters: {0}")]
    Hyper(String),
    #[error("invalid episode: {0}")]
    Episode(String),
    #[error("non-finite {what} during meta step")]
    NonFinite {
        what: String,
        report: Box<MetaStepReport>,
    },
}

pub type Result<T> = std::result::Result<T, MetaError>;

/// Images, binary labels (1 = live) and depth targets drawn from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sample_ids: Vec<usize>,
    /// `[B, 6, H, W]`
    pub images: Tensor,
    pub labels: Vec<f64>,
    /// `[B, 1, d, d]`
    pub depth: Tensor,
    pub domain: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn has_both_classes(&self) -> bool {
        self.labels.contains(&1.0) && self.labels.contains(&0.0)
    }

    /// Concatenates batches along the sample axis. The domain of the first is kept.
    pub fn concat(parts: &[&Batch]) -> Batch {
        let images: Vec<&Tensor> = parts.iter().map(|b| &b.images).collect();
        let depth: Vec<&Tensor> = parts.iter().map(|b| &b.depth).collect();
        let flat = |ts: Vec<&Tensor>| {
            let mut shape = ts[0].shape().to_vec();
            shape[0] = ts.iter().map(|t| t.shape()[0]).sum();
            let data = ts.iter().flat_map(|t| t.data().iter().copied()).collect();
            Tensor::new(&shape, data).expect("batches share a sample shape")
        };
        Batch {
            sample_ids: parts.iter().flat_map(|b| b.sample_ids.iter().copied()).collect(),
            images: flat(images),
            labels: parts.iter().flat_map(|b| b.labels.iter().copied()).collect(),
            depth: flat(depth),
            domain: parts[0].domain,
        }
    }
}

/// N-1 meta-train batches and one meta-test batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeBatch {
    pub meta_train: Vec<Batch>,
    pub meta_test: Batch,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub alpha: f64,
    pub beta: f64,
    pub n_domains: usize,
    pub per_domain_batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta: 0.001,
            n_domains: 3,
            per_domain_batch: 7,
            epochs: 10,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(MetaError::Hyper(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(MetaError::Hyper(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.n_domains < 2 {
            return Err(MetaError::Hyper(format!("N must be >= 2, got {}", self.n_domains)));
        }
        if self.per_domain_batch < 2 {
            return Err(MetaError::Hyper(format!(
                "per-domain batch must hold both classes, got {}",
                self.per_domain_batch
            )));
        }
        Ok(())
    }
}

/// How the meta-test gradient flows back through the inner update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientOrder {
    /// Adapted head parameters are treated as constants of θ_M.
    #[default]
    First,
    /// Adds the `-α H v` correction with a finite-difference Hessian-vector product.
    Second,
}

impl std::str::FromStr for GradientOrder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "first" => Ok(Self::First),
            "second" => Ok(Self::Second),
            other => Err(format!("unknown gradient order {other:?} (expected first|second)")),
        }
    }
}

impl std::fmt::Display for GradientOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::First => "first",
            Self::Second => "second",
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetaStepReport {
    pub meta_train_domains: Vec<usize>,
    pub meta_test_domain: Option<usize>,
    pub train_cls: Vec<f64>,
    pub train_depth: Vec<f64>,
    /// Meta-test classification loss at each adapted head.
    pub test_cls: Vec<f64>,
    pub test_depth: Option<f64>,
    pub grad_norm_f: f64,
    pub grad_norm_m: f64,
    pub grad_norm_d: f64,
    pub clamped_probs: usize,
}

impl MetaStepReport {
    fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.train_cls
            .iter()
            .chain(&self.train_depth)
            .chain(&self.test_cls)
            .chain(self.test_depth.iter())
            .copied()
    }

    fn check(self) -> Result<Self> {
        if self.losses().any(|l| !l.is_finite()) {
            return Err(MetaError::NonFinite {
                what: "loss".into(),
                report: Box::new(self),
            });
        }
        if ![self.grad_norm_f, self.grad_norm_m, self.grad_norm_d].iter().all(|g| g.is_finite()) {
            return Err(MetaError::NonFinite {
                what: "gradient".into(),
                report: Box::new(self),
            });
        }
        Ok(self)
    }
}

/// Mean negative log-likelihood of binary labels.
pub fn cls_loss<'t>(tape: &'t Tape, probs: Var<'t>, labels: &[f64]) -> Result<Var<'t>> {
    Ok(tape.bce(probs, labels)?)
}

/// Batch-mean squared Frobenius distance divided by `d * d`.
pub fn depth_loss<'t>(tape: &'t Tape, pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    let (ps, ts) = (pred.shape(), target.shape());
    if ps != ts || ps.len() != 4 || ps[1] != 1 {
        return Err(TensorError::Shape {
            op: "depth_loss",
            detail: format!("prediction {ps:?} vs target {ts:?}"),
        }
        .into());
    }
    Ok(tape.mse(pred, target)?)
}

/// A binary classifier head evaluated at supplied parameters.
pub trait Head {
    fn logits<'t>(&self, tape: &'t Tape, params: &Bound<'t>, features: Var<'t>) -> model::Result<Var<'t>>;

    fn classify<'t>(&self, tape: &'t Tape, params: &Bound<'t>, features: Var<'t>) -> model::Result<Var<'t>> {
        let z = self.logits(tape, params, features)?;
        Ok(tape.sigmoid(z)?)
    }
}

impl Head for MetaLearner {
    fn logits<'t>(&self, tape: &'t Tape, params: &Bound<'t>, features: Var<'t>) -> model::Result<Var<'t>> {
        MetaLearner::logits(self, tape, params, features)
    }
}

/// `sigmoid(w . x + b)` on flattened features. Parameters are `weight`
/// `[1, in]` and, optionally, `bias` `[1]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct LogisticHead;

impl Head for LogisticHead {
    fn logits<'t>(&self, tape: &'t Tape, params: &Bound<'t>, features: Var<'t>) -> model::Result<Var<'t>> {
        let flat = tape.flatten(features)?;
        let w = params.var("weight")?;
        let b = match params.var("bias") {
            Ok(b) => b,
            Err(_) => tape.constant(Tensor::zeros(&[1]))?,
        };
        let z = tape.linear(flat, w, b)?;
        let n = z.shape()[0];
        Ok(tape.reshape(z, &[n])?)
    }
}

/// Classification loss of `head` on fixed features and its gradient in the head parameters.
pub fn head_gradient<H: Head>(head: &H, theta: &ParamSet, features: &Tensor, labels: &[f64]) -> Result<(f64, ParamSet)> {
    let tape = Tape::new();
    let bound = theta.bind(&tape, true)?;
    let x = tape.constant(features.clone())?;
    let p = head.classify(&tape, &bound, x)?;
    let loss = cls_loss(&tape, p, labels)?;
    let value = loss.item();
    let g = tape.backward(loss)?;
    Ok((value, bound.grads(&g)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct InnerStep {
    pub adapted: ParamSet,
    pub gradient: ParamSet,
    pub loss: f64,
}

/// One descent step on the head with the features held fixed.
pub fn inner_update<H: Head>(
    head: &H,
    theta: &ParamSet,
    features: &Tensor,
    labels: &[f64],
    alpha: f64,
) -> Result<InnerStep> {
    if !(labels.contains(&1.0) && labels.contains(&0.0)) {
        return Err(MetaError::Episode("inner update needs both classes in the batch".into()));
    }
    let (loss, gradient) = head_gradient(head, theta, features, labels)?;
    if !gradient.all_finite() {
        return Err(MetaError::NonFinite {
            what: "inner-update gradient".into(),
            report: Box::default(),
        });
    }
    let adapted = theta.axpy(&gradient, -alpha)?;
    Ok(InnerStep { adapted, gradient, loss })
}

/// Features of a batch under θ_F with no gradient tracking.
pub fn features_no_grad(nets: &Networks, theta_f: &ParamSet, images: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let bf = theta_f.bind(&tape, false)?;
    let x = tape.constant(images.clone())?;
    let out = nets.f.forward(&tape, &bf, x)?;
    Ok(out.features.value().as_ref().clone())
}

/// Central-difference Hessian-vector product of the head loss.
fn head_hvp<H: Head>(head: &H, theta: &ParamSet, features: &Tensor, labels: &[f64], v: &ParamSet) -> Result<ParamSet> {
    let vn = v.norm();
    if vn == 0.0 {
        return Ok(v.zeros_like());
    }
    let h = 1e-5 * theta.norm().max(1.0) / vn;
    let (_, gp) = head_gradient(head, &theta.axpy(v, h)?, features, labels)?;
    let (_, gm) = head_gradient(head, &theta.axpy(v, -h)?, features, labels)?;
    Ok(gp.axpy(&gm, -1.0)?.scaled(1.0 / (2.0 * h)))
}

fn sum_terms<'t>(tape: &'t Tape, terms: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn check_episode(episode: &EpisodeBatch) -> Result<()> {
    if episode.meta_train.is_empty() {
        return Err(MetaError::Episode("no meta-train batches".into()));
    }
    for b in episode.meta_train.iter().chain(std::iter::once(&episode.meta_test)) {
        if b.is_empty() {
            return Err(MetaError::Episode(format!("empty batch for domain {}", b.domain)));
        }
        if !b.has_both_classes() {
            return Err(MetaError::Episode(format!("class-collapsed batch for domain {}", b.domain)));
        }
    }
    Ok(())
}

/// Outer gradients for one episode, before any optimizer is applied.
pub fn meta_gradients(
    nets: &Networks,
    params: &ModelParams,
    episode: &EpisodeBatch,
    alpha: f64,
    order: GradientOrder,
) -> Result<(ModelParams, MetaStepReport)> {
    check_episode(episode)?;
    let tape = Tape::new();
    let bf = params.f.bind(&tape, true)?;
    let bm = params.m.bind(&tape, true)?;
    let bd = params.d.bind(&tape, true)?;
    let mut report = MetaStepReport {
        meta_train_domains: episode.meta_train.iter().map(|b| b.domain).collect(),
        meta_test_domain: Some(episode.meta_test.domain),
        ..Default::default()
    };

    let test = &episode.meta_test;
    let x_test = tape.constant(test.images.clone())?;
    let f_test = nets.f.forward(&tape, &bf, x_test)?.features;
    let depth_test = nets.d.estimate_depth(&tape, &bd, f_test)?;
    let target_test = tape.constant(test.depth.clone())?;
    let dep_test = depth_loss(&tape, depth_test, target_test)?;
    let mut terms = vec![dep_test];
    report.test_depth = Some(dep_test.item());

    let mut adapted: Vec<(Bound<'_>, Rc<Tensor>, &[f64])> = Vec::new();
    for b in &episode.meta_train {
        let x = tape.constant(b.images.clone())?;
        let feats = nets.f.forward(&tape, &bf, x)?.features;
        let p = nets.m.classify(&tape, &bm, feats)?;
        let cls = cls_loss(&tape, p, &b.labels)?;
        let depth = nets.d.estimate_depth(&tape, &bd, feats)?;
        let target = tape.constant(b.depth.clone())?;
        let dep = depth_loss(&tape, depth, target)?;

        let feat_value = feats.value();
        let inner = inner_update(&nets.m, &params.m, &feat_value, &b.labels, alpha)?;
        let b_prime = inner.adapted.bind(&tape, true)?;
        let p_test = nets.m.classify(&tape, &b_prime, f_test)?;
        let cls_test = cls_loss(&tape, p_test, &test.labels)?;

        report.train_cls.push(cls.item());
        report.train_depth.push(dep.item());
        report.test_cls.push(cls_test.item());
        terms.extend([cls, dep, cls_test]);
        adapted.push((b_prime, feat_value, &b.labels));
    }
    report.clamped_probs = tape.clamp_count();
    if report.losses().any(|l| !l.is_finite()) {
        return Err(MetaError::NonFinite {
            what: "loss".into(),
            report: Box::new(report),
        });
    }

    let total = sum_terms(&tape, &terms)?;
    let g = tape.backward(total)?;
    let gf = bf.grads(&g);
    let mut gm = bm.grads(&g);
    let gd = bd.grads(&g);
    for (b_prime, feats, labels) in &adapted {
        let v = b_prime.grads(&g);
        gm.add_scaled(&v, 1.0)?;
        if order == GradientOrder::Second {
            let hv = head_hvp(&nets.m, &params.m, feats, labels, &v)?;
            gm.add_scaled(&hv, -alpha)?;
        }
    }
    report.grad_norm_f = gf.norm();
    report.grad_norm_m = gm.norm();
    report.grad_norm_d = gd.norm();
    let report = report.check()?;
    Ok((ModelParams { f: gf, m: gm, d: gd }, report))
}

/// Gradients of the joint classification + depth loss on one pooled batch.
pub fn erm_gradients(nets: &Networks, params: &ModelParams, batch: &Batch) -> Result<(ModelParams, MetaStepReport)> {
    if !batch.has_both_classes() {
        return Err(MetaError::Episode("ERM batch needs both classes".into()));
    }
    let tape = Tape::new();
    let bf = params.f.bind(&tape, true)?;
    let bm = params.m.bind(&tape, true)?;
    let bd = params.d.bind(&tape, true)?;
    let x = tape.constant(batch.images.clone())?;
    let feats = nets.f.forward(&tape, &bf, x)?.features;
    let p = nets.m.classify(&tape, &bm, feats)?;
    let cls = cls_loss(&tape, p, &batch.labels)?;
    let depth = nets.d.estimate_depth(&tape, &bd, feats)?;
    let target = tape.constant(batch.depth.clone())?;
    let dep = depth_loss(&tape, depth, target)?;
    let mut report = MetaStepReport {
        meta_train_domains: vec![batch.domain],
        train_cls: vec![cls.item()],
        train_depth: vec![dep.item()],
        clamped_probs: tape.clamp_count(),
        ..Default::default()
    };
    if report.losses().any(|l| !l.is_finite()) {
        return Err(MetaError::NonFinite {
            what: "loss".into(),
            report: Box::new(report),
        });
    }
    let total = tape.add(cls, dep)?;
    let g = tape.backward(total)?;
    let grads = ModelParams {
        f: bf.grads(&g),
        m: bm.grads(&g),
        d: bd.grads(&g),
    };
    report.grad_norm_f = grads.f.norm();
    report.grad_norm_m = grads.m.norm();
    report.grad_norm_d = grads.d.norm();
    Ok((grads, report.check()?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer {other:?} (expected sgd|adam)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
        })
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

struct AdamState {
    t: i32,
    m: ModelParams,
    v: ModelParams,
}

/// Plain gradient descent or Adam over all three parameter sets.
pub struct Optimizer {
    kind: OptimizerKind,
    adam: Option<AdamState>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self { kind, adam: None }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
        for (p, g) in [(&params.f, &grads.f), (&params.m, &grads.m), (&params.d, &grads.d)] {
            p.check_compatible(g)?;
        }
        match self.kind {
            OptimizerKind::Sgd => {
                params.f.add_scaled(&grads.f, -lr)?;
                params.m.add_scaled(&grads.m, -lr)?;
                params.d.add_scaled(&grads.d, -lr)?;
            }
            OptimizerKind::Adam => {
                let state = self.adam.get_or_insert_with(|| AdamState {
                    t: 0,
                    m: params.zeros_like(),
                    v: params.zeros_like(),
                });
                state.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(state.t);
                let c2 = 1.0 - ADAM_BETA2.powi(state.t);
                let sets = [
                    (&mut params.f, &mut state.m.f, &mut state.v.f, &grads.f),
                    (&mut params.m, &mut state.m.m, &mut state.v.m, &grads.m),
                    (&mut params.d, &mut state.m.d, &mut state.v.d, &grads.d),
                ];
                for (p, m, v, g) in sets {
                    let tensors = p.tensors_mut().zip(m.tensors_mut()).zip(v.tensors_mut()).zip(g.iter());
                    for (((pt, mt), vt), (_, gt)) in tensors {
                        let slots = pt.data_mut().iter_mut().zip(mt.data_mut()).zip(vt.data_mut());
                        for (((pi, mi), vi), &gi) in slots.zip(gt.data()) {
                            *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                            *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                            *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Meta gradients followed by an optimizer step with rate β.
pub fn meta_step(
    nets: &Networks,
    params: &ModelParams,
    episode: &EpisodeBatch,
    hp: &Hyperparams,
    order: GradientOrder,
    optimizer: &mut Optimizer,
) -> Result<(ModelParams, MetaStepReport)> {
    let (grads, report) = meta_gradients(nets, params, episode, hp.alpha, order)?;
    let mut next = params.clone();
    optimizer.step(&mut next, &grads, hp.beta)?;
    Ok((next, report))
}

/// Residual of the first-order expansion of the MLDG objective at one α.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaylorReport {
    pub alpha: f64,
    pub beta: f64,
    pub objective: f64,
    pub first_order: f64,
    pub residual: f64,
}

/// Compares `F(θ) + β G(θ - α F'(θ))` with `F(θ) + β G(θ) - β α G'(θ)·F'(θ)`.
/// `f` and `g` return a value and its gradient.
pub fn mldg_objective_check<F, G>(theta: &[f64], alpha: f64, beta: f64, f: F, g: G) -> TaylorReport
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
    G: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (fv, fg) = f(theta);
    let (gv, gg) = g(theta);
    let stepped: Vec<f64> = theta.iter().zip(&fg).map(|(t, d)| t - alpha * d).collect();
    let (g_stepped, _) = g(&stepped);
    let objective = fv + beta * g_stepped;
    let dot: f64 = gg.iter().zip(&fg).map(|(a, b)| a * b).sum();
    let first_order = fv + beta * gv - beta * alpha * dot;
    TaylorReport {
        alpha,
        beta,
        objective,
        first_order,
        residual: (objective - first_order).abs(),
    }
}

/// Head loss on fixed features as a function of the flattened head parameters.
pub fn head_objective<'a, H: Head>(
    head: &'a H,
    template: &'a ParamSet,
    features: &'a Tensor,
    labels: &'a [f64],
) -> impl Fn(&[f64]) -> (f64, Vec<f64>) + 'a {
    move |flat| {
        let theta = template.with_flat(flat).expect("flat length matches template");
        let (loss, grad) = head_gradient(head, &theta, features, labels).expect("head evaluates");
        (loss, grad.flat())
    }
}

/// Every term of the meta objective differentiated on its own tape.
#[derive(Clone, Debug)]
pub struct TermGradients {
    pub train_cls: Vec<ModelParams>,
    pub train_depth: Vec<ModelParams>,
    /// Gradient of each meta-test classification term w.r.t. θ_F and the
    /// adapted head; its θ_D part is always empty of signal.
    pub test_cls: Vec<ModelParams>,
    pub test_depth: ModelParams,
}

/// Per-term gradients for `episode`, with the same inner update as [`meta_gradients`].
pub fn term_gradients(nets: &Networks, params: &ModelParams, episode: &EpisodeBatch, alpha: f64) -> Result<TermGradients> {
    check_episode(episode)?;
    enum Term<'a> {
        Cls(&'a Batch, Option<&'a ParamSet>),
        Depth(&'a Batch),
    }
    let run = |term: Term<'_>| -> Result<ModelParams> {
        let tape = Tape::new();
        let bf = params.f.bind(&tape, true)?;
        let bd = params.d.bind(&tape, true)?;
        let (batch, head) = match &term {
            Term::Cls(b, h) => (*b, h.unwrap_or(&params.m)),
            Term::Depth(b) => (*b, &params.m),
        };
        let bm = head.bind(&tape, true)?;
        let x = tape.constant(batch.images.clone())?;
        let feats = nets.f.forward(&tape, &bf, x)?.features;
        let loss = match term {
            Term::Cls(..) => {
                let p = nets.m.classify(&tape, &bm, feats)?;
                cls_loss(&tape, p, &batch.labels)?
            }
            Term::Depth(_) => {
                let pred = nets.d.estimate_depth(&tape, &bd, feats)?;
                let target = tape.constant(batch.depth.clone())?;
                depth_loss(&tape, pred, target)?
            }
        };
        let g = tape.backward(loss)?;
        Ok(ModelParams {
            f: bf.grads(&g),
            m: bm.grads(&g),
            d: bd.grads(&g),
        })
    };
    let mut out = TermGradients {
        train_cls: Vec::new(),
        train_depth: Vec::new(),
        test_cls: Vec::new(),
        test_depth: run(Term::Depth(&episode.meta_test))?,
    };
    for b in &episode.meta_train {
        out.train_cls.push(run(Term::Cls(b, None))?);
        out.train_depth.push(run(Term::Depth(b))?);
        let feats = features_no_grad(nets, &params.f, &b.images)?;
        let adapted = inner_update(&nets.m, &params.m, &feats, &b.labels, alpha)?.adapted;
        out.test_cls.push(run(Term::Cls(&episode.meta_test, Some(&adapted)))?);
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::tensor::{sigmoid, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_arch() -> Architecture {
        Architecture {
            image_size: 8,
            base_width: 2,
            head_hidden: 3,
            depth_size: 2,
            depth_width: 2,
            ..Architecture::default()
        }
    }

    pub(crate) fn random_batch(rng: &mut ChaCha8Rng, arch: &Architecture, b: usize, domain: usize) -> Batch {
        let n = arch.image_size;
        let d = arch.depth_size;
        let labels: Vec<f64> = (0..b).map(|i| (i % 2 == 0) as u8 as f64).collect();
        let images = (0..b * 6 * n * n).map(|_| rng.random::<f64>()).collect();
        let depth = labels
            .iter()
            .flat_map(|&y| (0..d * d).map(move |k| y * (0.2 + 0.1 * k as f64)))
            .collect();
        Batch {
            sample_ids: (0..b).collect(),
            images: Tensor::new(&[b, 6, n, n], images).unwrap(),
            labels,
            depth: Tensor::new(&[b, 1, d, d], depth).unwrap(),
            domain,
        }
    }

    pub(crate) fn random_episode(seed: u64, n_domains: usize, b: usize) -> (Networks, ModelParams, EpisodeBatch) {
        let arch = tiny_arch();
        let nets = Networks::new(&arch).unwrap();
        let params = nets.init(seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let meta_train = (0..n_domains - 1).map(|i| random_batch(&mut rng, &arch, b, i)).collect();
        let meta_test = random_batch(&mut rng, &arch, b, n_domains - 1);
        (nets, params, EpisodeBatch { meta_train, meta_test, seed })
    }

    fn loss_value(probs: &[f64], labels: &[f64]) -> f64 {
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_vec(probs.to_vec())).unwrap();
        cls_loss(&tape, p, labels).unwrap().item()
    }

    #[test]
    fn cls_loss_closed_forms() {
        assert!((loss_value(&[0.5], &[1.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((loss_value(&[0.5, 0.5], &[0.0, 1.0]) - 2f64.ln()).abs() < 1e-15);
        assert!((loss_value(&[0.9], &[1.0]) - 0.10536051565782628).abs() < 1e-14);
    }

    #[test]
    fn cls_loss_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<f64> = (0..8).map(|_| rng.random_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..8).map(|_| rng.random_range(0..2) as f64).collect();
        let mut direct = 0.0;
        for i in 0..8 {
            direct += if y[i] == 1.0 { -p[i].ln() } else { -(1.0 - p[i]).ln() };
        }
        assert!((loss_value(&p, &y) - direct / 8.0).abs() < 1e-12);
    }

    #[test]
    fn cls_loss_counts_clamps() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_vec(vec![0.0, 1.0, 0.5])).unwrap();
        let l = cls_loss(&tape, p, &[1.0, 0.0, 1.0]).unwrap();
        assert!(l.item().is_finite());
        assert_eq!(tape.clamp_count(), 2);
    }

    #[test]
    fn depth_loss_values_and_gradient() {
        let tape = Tape::new();
        let pred = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0), true).unwrap();
        let target = tape.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        assert_eq!(depth_loss(&tape, pred, target).unwrap().item(), 1.0);
        let same = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        assert_eq!(depth_loss(&tape, pred, same).unwrap().item(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, d) = (3, 4);
        let pv: Vec<f64> = (0..b * d * d).map(|_| rng.random::<f64>()).collect();
        let tv: Vec<f64> = (0..b * d * d).map(|_| rng.random::<f64>()).collect();
        let tape = Tape::new();
        let p = tape.leaf(Tensor::new(&[b, 1, d, d], pv.clone()).unwrap(), true).unwrap();
        let t = tape.constant(Tensor::new(&[b, 1, d, d], tv.clone()).unwrap()).unwrap();
        let l = depth_loss(&tape, p, t).unwrap();
        let g = tape.backward(l).unwrap();
        let analytic = g.get(p).unwrap().data().to_vec();
        for i in 0..pv.len() {
            let expected = 2.0 * (pv[i] - tv[i]) / (b * d * d) as f64;
            assert!((analytic[i] - expected).abs() < 1e-15);
        }
        let f = |x: &[f64]| {
            let tape = Tape::new();
            let p = tape.constant(Tensor::new(&[b, 1, d, d], x.to_vec()).unwrap()).unwrap();
            let t = tape.constant(Tensor::new(&[b, 1, d, d], tv.clone()).unwrap()).unwrap();
            depth_loss(&tape, p, t).unwrap().item()
        };
        let rep = crate::tensor::grad_check(f, &pv, &analytic, 1e-4, 1e-8).unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn depth_loss_rejects_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[1, 1, 4, 1])).unwrap();
        assert!(depth_loss(&tape, a, b).is_err());
    }

    fn scalar_logistic(w: f64, b: Option<f64>) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("weight", Tensor::new(&[1, 1], vec![w]).unwrap()).unwrap();
        if let Some(b) = b {
            p.push("bias", Tensor::new(&[1], vec![b]).unwrap()).unwrap();
        }
        p
    }

    #[test]
    fn inner_update_matches_hand_derivation() {
        let xs = [0.7, -1.3, 2.1, 0.4];
        let ys = [1.0, 0.0, 1.0, 0.0];
        let feats = Tensor::new(&[4, 1], xs.to_vec()).unwrap();
        let (w, b, alpha) = (0.35, -0.2, 0.05);

        let step = inner_update(&LogisticHead, &scalar_logistic(w, None), &feats, &ys, alpha).unwrap();
        let gw: f64 = xs.iter().zip(&ys).map(|(x, y)| (sigmoid(w * x) - y) * x).sum::<f64>() / 4.0;
        assert!((step.adapted.flat()[0] - (w - alpha * gw)).abs() < 1e-12);

        let step = inner_update(&LogisticHead, &scalar_logistic(w, Some(b)), &feats, &ys, alpha).unwrap();
        let r: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| sigmoid(w * x + b) - y).collect();
        let gw: f64 = r.iter().zip(&xs).map(|(r, x)| r * x).sum::<f64>() / 4.0;
        let gb: f64 = r.iter().sum::<f64>() / 4.0;
        let got = step.adapted.flat();
        assert!((got[0] - (w - alpha * gw)).abs() < 1e-12);
        assert!((got[1] - (b - alpha * gb)).abs() < 1e-12);
    }

    #[test]
    fn inner_update_zero_alpha_is_identity() {
        let (nets, params, ep) = random_episode(3, 3, 6);
        let feats = features_no_grad(&nets, &params.f, &ep.meta_train[0].images).unwrap();
        let step = inner_update(&nets.m, &params.m, &feats, &ep.meta_train[0].labels, 0.0).unwrap();
        assert_eq!(step.adapted, params.m);
    }

    #[test]
    fn inner_update_rejects_single_class() {
        let feats = Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let r = inner_update(&LogisticHead, &scalar_logistic(0.1, None), &feats, &[1.0, 1.0], 0.1);
        assert!(matches!(r, Err(MetaError::Episode(_))));
    }

    #[test]
    fn adapted_head_changes_scores() {
        let (nets, params, ep) = random_episode(5, 2, 6);
        let b = &ep.meta_train[0];
        let feats = features_no_grad(&nets, &params.f, &b.images).unwrap();
        let step = inner_update(&nets.m, &params.m, &feats, &b.labels, 0.5).unwrap();
        assert!(step.gradient.norm() > 0.0);
        let eval = |theta: &ParamSet| {
            let tape = Tape::new();
            let bm = theta.bind(&tape, false).unwrap();
            let x = tape.constant(feats.clone()).unwrap();
            nets.m.classify(&tape, &bm, x).unwrap().value().data().to_vec()
        };
        assert_ne!(eval(&params.m), eval(&step.adapted));
    }

    #[test]
    fn small_inner_step_descends() {
        let mut failures = 0;
        for seed in 0..20 {
            let (nets, params, ep) = random_episode(seed, 2, 6);
            let b = &ep.meta_train[0];
            let feats = features_no_grad(&nets, &params.f, &b.images).unwrap();
            let step = inner_update(&nets.m, &params.m, &feats, &b.labels, 1e-4).unwrap();
            let (after, _) = head_gradient(&nets.m, &step.adapted, &feats, &b.labels).unwrap();
            if after > step.loss {
                failures += 1;
            }
        }
        assert!(failures <= 1);
    }

    #[test]
    fn identical_domains_transfer_descent() {
        let mut failures = 0;
        for seed in 0..20 {
            let (nets, params, mut ep) = random_episode(seed, 3, 6);
            ep.meta_train[1] = ep.meta_train[0].clone();
            ep.meta_test = ep.meta_train[0].clone();
            let feats = features_no_grad(&nets, &params.f, &ep.meta_test.images).unwrap();
            let labels = &ep.meta_test.labels;
            let step = inner_update(&nets.m, &params.m, &feats, labels, 1e-4).unwrap();
            let (before, _) = head_gradient(&nets.m, &params.m, &feats, labels).unwrap();
            let (after, _) = head_gradient(&nets.m, &step.adapted, &feats, labels).unwrap();
            if after > before {
                failures += 1;
            }
        }
        assert!(failures <= 1);
    }

    #[test]
    fn zero_beta_leaves_params() {
        let (nets, params, ep) = random_episode(1, 3, 4);
        let hp = Hyperparams {
            beta: 0.0,
            ..Hyperparams::default()
        };
        let mut opt = Optimizer::new(OptimizerKind::Sgd);
        let (next, report) = meta_step(&nets, &params, &ep, &hp, GradientOrder::First, &mut opt).unwrap();
        assert_eq!(next, params);
        assert_eq!(report.train_cls.len(), 2);
        assert_eq!(report.test_cls.len(), 2);
        assert!(report.losses().all(|l| l >= 0.0));
    }

    fn assemble(terms: &TermGradients) -> ModelParams {
        let mut g = terms.test_depth.clone();
        for i in 0..terms.train_cls.len() {
            for t in [&terms.train_cls[i], &terms.train_depth[i], &terms.test_cls[i]] {
                g.f.add_scaled(&t.f, 1.0).unwrap();
                g.m.add_scaled(&t.m, 1.0).unwrap();
                g.d.add_scaled(&t.d, 1.0).unwrap();
            }
        }
        g
    }

    fn max_diff(a: &ModelParams, b: &ModelParams) -> f64 {
        let fa = [a.f.flat(), a.m.flat(), a.d.flat()].concat();
        let fb = [b.f.flat(), b.m.flat(), b.d.flat()].concat();
        fa.iter().zip(&fb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn meta_gradients_match_term_assembly() {
        for seed in 0..3 {
            let (nets, params, ep) = random_episode(seed, 3, 4);
            let (g, _) = meta_gradients(&nets, &params, &ep, 0.01, GradientOrder::First).unwrap();
            let terms = term_gradients(&nets, &params, &ep, 0.01).unwrap();
            assert!(max_diff(&g, &assemble(&terms)) < 1e-10);
        }
    }

    #[test]
    fn gradient_sparsity() {
        let (nets, params, ep) = random_episode(2, 3, 4);
        let terms = term_gradients(&nets, &params, &ep, 0.01).unwrap();
        for t in terms.train_cls.iter().chain(&terms.test_cls) {
            assert_eq!(t.d.norm(), 0.0);
            assert!(t.m.norm() > 0.0);
        }
        for t in terms.train_depth.iter().chain(std::iter::once(&terms.test_depth)) {
            assert_eq!(t.m.norm(), 0.0);
            assert!(t.d.norm() > 0.0);
        }
    }

    #[test]
    fn duplicated_meta_train_domain_doubles_head_gradient() {
        let (nets, params, ep) = random_episode(6, 2, 4);
        let (single, _) = meta_gradients(&nets, &params, &ep, 0.01, GradientOrder::First).unwrap();
        let mut twice = ep.clone();
        twice.meta_train.push(ep.meta_train[0].clone());
        let (double, _) = meta_gradients(&nets, &params, &twice, 0.01, GradientOrder::First).unwrap();
        for (a, b) in single.m.flat().iter().zip(double.m.flat()) {
            assert!((2.0 * a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn meta_train_order_is_irrelevant() {
        let (nets, params, ep) = random_episode(7, 4, 4);
        let hp = Hyperparams::default();
        let mut perm = ep.clone();
        perm.meta_train.reverse();
        for order in [GradientOrder::First, GradientOrder::Second] {
            let (a, _) = meta_step(&nets, &params, &ep, &hp, order, &mut Optimizer::new(OptimizerKind::Sgd)).unwrap();
            let (b, _) = meta_step(&nets, &params, &perm, &hp, order, &mut Optimizer::new(OptimizerKind::Sgd)).unwrap();
            assert!(max_diff(&a, &b) < 1e-10);
        }
    }

    #[test]
    fn second_order_matches_finite_differences() {
        let (nets, params, ep) = random_episode(9, 3, 4);
        let alpha = 0.3;
        let (g, _) = meta_gradients(&nets, &params, &ep, alpha, GradientOrder::Second).unwrap();
        let train_feats: Vec<Tensor> = ep
            .meta_train
            .iter()
            .map(|b| features_no_grad(&nets, &params.f, &b.images).unwrap())
            .collect();
        let test_feats = features_no_grad(&nets, &params.f, &ep.meta_test.images).unwrap();
        let objective = |flat: &[f64]| {
            let theta = params.m.with_flat(flat).unwrap();
            let mut total = 0.0;
            for (b, feats) in ep.meta_train.iter().zip(&train_feats) {
                let step = inner_update(&nets.m, &theta, feats, &b.labels, alpha).unwrap();
                let (test, _) = head_gradient(&nets.m, &step.adapted, &test_feats, &ep.meta_test.labels).unwrap();
                total += step.loss + test;
            }
            total
        };
        let rep = crate::tensor::grad_check(objective, &params.m.flat(), &g.m.flat(), 1e-5, 1e-6).unwrap();
        assert!(rep.passed, "{rep:?}");
        let (first, _) = meta_gradients(&nets, &params, &ep, alpha, GradientOrder::First).unwrap();
        let gap = crate::tensor::grad_check(objective, &params.m.flat(), &first.m.flat(), 1e-5, 1e-6).unwrap();
        assert!(!gap.passed, "first-order mode should differ at large alpha");
    }

    #[test]
    fn rejects_class_collapsed_batch() {
        let (nets, params, mut ep) = random_episode(1, 3, 4);
        ep.meta_test.labels = vec![1.0; 4];
        assert!(matches!(
            meta_gradients(&nets, &params, &ep, 0.01, GradientOrder::First),
            Err(MetaError::Episode(_))
        ));
    }

    #[test]
    fn erm_gradient_is_sum_of_cls_and_depth() {
        let (nets, params, ep) = random_episode(4, 2, 6);
        let b = &ep.meta_train[0];
        let (g, report) = erm_gradients(&nets, &params, b).unwrap();
        let terms = term_gradients(&nets, &params, &ep, 0.01).unwrap();
        let mut expected = terms.train_cls[0].clone();
        expected.f.add_scaled(&terms.train_depth[0].f, 1.0).unwrap();
        expected.d.add_scaled(&terms.train_depth[0].d, 1.0).unwrap();
        assert!(max_diff(&g, &expected) < 1e-12);
        assert!(report.test_cls.is_empty() && report.test_depth.is_none());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (_, params, _) = random_episode(1, 2, 2);
        let mut grads = params.zeros_like();
        for t in grads.m.tensors_mut() {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = if i % 2 == 0 { 3.0 } else { -0.5 });
        }
        let mut next = params.clone();
        Optimizer::new(OptimizerKind::Adam).step(&mut next, &grads, 0.01).unwrap();
        for ((a, b), g) in next.m.flat().iter().zip(params.m.flat()).zip(grads.m.flat()) {
            let expected = -0.01 * g / (g.abs() + ADAM_EPS);
            assert!((a - b - expected).abs() < 1e-12);
        }
        assert_eq!(next.f, params.f);
    }

    #[test]
    fn taylor_residual_vanishes_at_zero_alpha() {
        let f = |x: &[f64]| (x[0].powi(4) + x[1].sin(), vec![4.0 * x[0].powi(3), x[1].cos()]);
        let g = |x: &[f64]| (x[0] * x[1].exp(), vec![x[1].exp(), x[0] * x[1].exp()]);
        let r = mldg_objective_check(&[0.3, -0.7], 0.0, 0.5, f, g);
        assert!(r.residual <= 1e-12);
    }

    #[test]
    fn taylor_residual_on_quadratics() {
        // F = x'Ax/2 + b'x, G = x'Cx/2 + e'x
        let a = [[2.0, 0.5], [0.5, 1.0]];
        let c = [[1.5, -0.3], [-0.3, 0.8]];
        let (b, e) = ([0.2, -0.4], [-0.1, 0.3]);
        let quad = |m: [[f64; 2]; 2], l: [f64; 2]| {
            move |x: &[f64]| {
                let mx = [m[0][0] * x[0] + m[0][1] * x[1], m[1][0] * x[0] + m[1][1] * x[1]];
                let v = 0.5 * (x[0] * mx[0] + x[1] * mx[1]) + l[0] * x[0] + l[1] * x[1];
                (v, vec![mx[0] + l[0], mx[1] + l[1]])
            }
        };
        let theta = [0.9, -1.1];
        let (alpha, beta) = (0.05, 0.7);
        let r = mldg_objective_check(&theta, alpha, beta, quad(a, b), quad(c, e));
        let (_, fp) = quad(a, b)(&theta);
        let cf = [c[0][0] * fp[0] + c[0][1] * fp[1], c[1][0] * fp[0] + c[1][1] * fp[1]];
        let closed = beta * alpha * alpha * 0.5 * (fp[0] * cf[0] + fp[1] * cf[1]);
        assert!((r.residual - closed).abs() <= 1e-10);
    }

    #[test]
    fn taylor_residual_scales_quadratically() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let feats = Tensor::new(&[12, 3], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let test_feats = Tensor::new(&[12, 3], (0..36).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        let mut theta = ParamSet::new();
        theta.push("weight", Tensor::new(&[1, 3], vec![0.4, -0.6, 0.9]).unwrap()).unwrap();
        theta.push("bias", Tensor::new(&[1], vec![0.1]).unwrap()).unwrap();
        let f = head_objective(&LogisticHead, &theta, &feats, &labels);
        let g = head_objective(&LogisticHead, &theta, &test_feats, &labels);
        let r1 = mldg_objective_check(&theta.flat(), 1e-2, 1.0, &f, &g);
        let r2 = mldg_objective_check(&theta.flat(), 5e-3, 1.0, &f, &g);
        let ratio = r1.residual / r2.residual;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    }
}
