//! Runtime property suites behind `pdl verify`.
//!
//! Each property reports the measured quantity next to its bound. With
//! [`VerifyOptions::corrupt_gradients`] every analytic gradient is perturbed
//! before comparison, so the gradient suite must fail.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::eval::auc;
use crate::meta::{
    self, cls_loss, depth_loss, features_no_grad, head_objective, inner_update, mldg_objective_check, term_gradients,
    Batch, EpisodeBatch, GradientOrder, LogisticHead, Optimizer, OptimizerKind,
};
use crate::model::{Architecture, ModelParams, Networks, ParamSet};
use crate::style::{adjusted_rand_index, ClusterMethod, ClusterModel, PcaModel};
use crate::tensor::{self, grad_check, sigmoid, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 20;
const CORRUPTION: f64 = 1e-2;
/// Model-loss coordinates excluded because a ±h probe crossed a ReLU or max-pool switch.
pub const MAX_KINK_FRACTION: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Gradients,
    MldgTaylor,
    Clustering,
    All,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gradients" => Ok(Self::Gradients),
            "mldg-taylor" => Ok(Self::MldgTaylor),
            "clustering" => Ok(Self::Clustering),
            "all" => Ok(Self::All),
            other => Err(format!("unknown suite {other:?} (gradients|mldg-taylor|clustering|all)")),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gradients => "gradients",
            Self::MldgTaylor => "mldg-taylor",
            Self::Clustering => "clustering",
            Self::All => "all",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Bound {
    AtMost { limit: f64 },
    AtLeast { limit: f64 },
    Within { lo: f64, hi: f64 },
}

impl Bound {
    pub fn holds(&self, x: f64) -> bool {
        match *self {
            Self::AtMost { limit } => x <= limit,
            Self::AtLeast { limit } => x >= limit,
            Self::Within { lo, hi } => (lo..=hi).contains(&x),
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Self::AtMost { limit } => write!(f, "<= {limit:e}"),
            Self::AtLeast { limit } => write!(f, ">= {limit:e}"),
            Self::Within { lo, hi } => write!(f, "in [{lo}, {hi}]"),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Property {
    pub suite: String,
    pub name: String,
    /// NaN when the property could not be evaluated.
    pub measured: f64,
    pub bound: Bound,
    pub passed: bool,
    pub seconds: f64,
    pub detail: Option<String>,
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}: measured {:.3e} (bound {}) [{:.2}s]",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.name,
            self.measured,
            self.bound,
            self.seconds
        )?;
        if let Some(d) = &self.detail {
            write!(f, " {d}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub properties: Vec<Property>,
    pub passed: bool,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub seeds: usize,
    pub corrupt_gradients: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seeds: DEFAULT_SEEDS,
            corrupt_gradients: false,
        }
    }
}

struct Recorder {
    suite: &'static str,
    out: Vec<Property>,
}

impl Recorder {
    fn new(suite: &'static str) -> Self {
        Self { suite, out: Vec::new() }
    }

    /// Times `measure` and records it against `bound`. Errors count as failures.
    fn check<F>(&mut self, name: &str, bound: Bound, measure: F)
    where
        F: FnOnce() -> Result<f64, String>,
    {
        let t = Instant::now();
        let (measured, detail) = match measure() {
            Ok(v) => (v, None),
            Err(e) => (f64::NAN, Some(e)),
        };
        self.out.push(Property {
            suite: self.suite.into(),
            name: name.into(),
            measured,
            bound,
            passed: detail.is_none() && bound.holds(measured),
            seconds: t.elapsed().as_secs_f64(),
            detail,
        });
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> VerifyReport {
    let t = Instant::now();
    let mut properties = Vec::new();
    if matches!(suite, Suite::Gradients | Suite::All) {
        properties.extend(gradient_suite(opts));
    }
    if matches!(suite, Suite::MldgTaylor | Suite::All) {
        properties.extend(taylor_suite(opts));
    }
    if matches!(suite, Suite::Clustering | Suite::All) {
        properties.extend(clustering_suite(opts));
    }
    VerifyReport {
        passed: properties.iter().all(|p| p.passed),
        properties,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn err_string(e: impl fmt::Display) -> String {
    e.to_string()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Distinct values at least `gap` apart and at least `gap / 2` from zero, in random order.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * gap).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, vals).expect("shape matches")
}

/// Signature of a differentiable test function over leaf inputs.
type Build = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> tensor::Result<Var<'t>>;

/// `sum(w * out)` with fixed random `w`, so every output entry gets a distinct cotangent.
fn weighted_sum<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> tensor::Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(uniform(&mut rng, &out.shape(), -1.0, 1.0))?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Max relative error between the tape gradient and central differences over all inputs.
fn fd_error(inputs: &[Tensor], build: &Build, corrupt: bool) -> Result<f64, String> {
    let tape = Tape::new();
    let leaves = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<tensor::Result<Vec<_>>>()
        .map_err(err_string)?;
    let loss = build(&tape, &leaves).map_err(err_string)?;
    let grads = tape.backward(loss).map_err(err_string)?;
    let mut analytic: Vec<f64> = leaves.iter().flat_map(|v| grads.get_or_zeros(*v).into_data()).collect();
    if corrupt {
        analytic.iter_mut().for_each(|g| *g += CORRUPTION);
    }
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let eval = |x: &[f64]| {
        let tape = Tape::new();
        let mut off = 0;
        let vars: Vec<Var<'_>> = inputs
            .iter()
            .map(|t| {
                let v = Tensor::new(t.shape(), x[off..off + t.len()].to_vec()).expect("shape matches");
                off += t.len();
                tape.constant(v).expect("finite")
            })
            .collect();
        build(&tape, &vars).map(|l| l.item()).unwrap_or(f64::NAN)
    };
    let report = grad_check(eval, &flat, &analytic, FD_STEP, GRAD_TOL).map_err(err_string)?;
    Ok(report.max_rel_error)
}

struct OpCase {
    name: &'static str,
    inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    build: Box<Build>,
}

fn op_cases() -> Vec<OpCase> {
    fn case(name: &'static str, inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>, build: Box<Build>) -> OpCase {
        OpCase { name, inputs, build }
    }
    let pair = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[3, 4], -1.0, 1.0)];
    vec![
        case("add", pair, Box::new(|t, v| weighted_sum(t, t.add(v[0], v[1])?, 1))),
        case("sub", pair, Box::new(|t, v| weighted_sum(t, t.sub(v[0], v[1])?, 2))),
        case("mul", pair, Box::new(|t, v| weighted_sum(t, t.mul(v[0], v[1])?, 3))),
        case(
            "scale",
            |r| vec![uniform(r, &[3, 4], -1.0, 1.0)],
            Box::new(|t, v| weighted_sum(t, t.scale(v[0], -1.7)?, 4)),
        ),
        case(
            "sum",
            |r| vec![uniform(r, &[2, 5], -1.0, 1.0)],
            Box::new(|t, v| {
                let s = t.sum(v[0])?;
                t.mul(s, s)
            }),
        ),
        case(
            "mean",
            |r| vec![uniform(r, &[2, 5], -1.0, 1.0)],
            Box::new(|t, v| {
                let s = t.mean(v[0])?;
                t.mul(s, s)
            }),
        ),
        case("mse", pair, Box::new(|t, v| t.mse(v[0], v[1]))),
        case(
            "relu",
            |r| vec![spaced(r, &[3, 4], 0.1)],
            Box::new(|t, v| weighted_sum(t, t.relu(v[0])?, 5)),
        ),
        case(
            "sigmoid",
            |r| vec![uniform(r, &[3, 4], -4.0, 4.0)],
            Box::new(|t, v| weighted_sum(t, t.sigmoid(v[0])?, 6)),
        ),
        case(
            "log_sigmoid",
            |r| vec![uniform(r, &[3, 4], -8.0, 8.0)],
            Box::new(|t, v| weighted_sum(t, t.log_sigmoid(v[0])?, 7)),
        ),
        case(
            "flatten",
            |r| vec![uniform(r, &[2, 3, 2, 2], -1.0, 1.0)],
            Box::new(|t, v| weighted_sum(t, t.flatten(v[0])?, 8)),
        ),
        case(
            "concat",
            |r| vec![uniform(r, &[2, 2, 3, 3], -1.0, 1.0), uniform(r, &[2, 1, 3, 3], -1.0, 1.0)],
            Box::new(|t, v| weighted_sum(t, t.concat(&[v[0], v[1]])?, 9)),
        ),
        case(
            "max_pool2d",
            |r| vec![spaced(r, &[2, 2, 4, 4], 0.05)],
            Box::new(|t, v| weighted_sum(t, t.max_pool2d(v[0])?, 10)),
        ),
        case(
            "upsample2x",
            |r| vec![uniform(r, &[1, 2, 3, 3], -1.0, 1.0)],
            Box::new(|t, v| weighted_sum(t, t.upsample2x(v[0])?, 11)),
        ),
        case(
            "conv2d",
            |r| {
                vec![
                    uniform(r, &[2, 3, 5, 5], -1.0, 1.0),
                    uniform(r, &[4, 3, 3, 3], -0.5, 0.5),
                    uniform(r, &[4], -0.5, 0.5),
                ]
            },
            Box::new(|t, v| weighted_sum(t, t.conv2d(v[0], v[1], v[2], 1, 1)?, 12)),
        ),
        case(
            "conv2d_stride2",
            |r| {
                vec![
                    uniform(r, &[1, 2, 6, 6], -1.0, 1.0),
                    uniform(r, &[3, 2, 3, 3], -0.5, 0.5),
                    uniform(r, &[3], -0.5, 0.5),
                ]
            },
            Box::new(|t, v| weighted_sum(t, t.conv2d(v[0], v[1], v[2], 2, 0)?, 13)),
        ),
        case(
            "linear",
            |r| {
                vec![
                    uniform(r, &[3, 5], -1.0, 1.0),
                    uniform(r, &[4, 5], -1.0, 1.0),
                    uniform(r, &[4], -1.0, 1.0),
                ]
            },
            Box::new(|t, v| weighted_sum(t, t.linear(v[0], v[1], v[2])?, 14)),
        ),
        case(
            "bce",
            |r| vec![uniform(r, &[6], 0.05, 0.95)],
            Box::new(|t, v| t.bce(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0])),
        ),
    ]
}

pub(crate) fn toy_arch() -> Architecture {
    Architecture {
        image_size: 8,
        base_width: 2,
        head_hidden: 3,
        depth_size: 2,
        depth_width: 2,
        ..Architecture::default()
    }
}

/// A batch with random images, alternating labels and matching depth targets.
pub(crate) fn toy_batch(rng: &mut ChaCha8Rng, arch: &Architecture, b: usize, domain: usize) -> Batch {
    let n = arch.image_size;
    let d = arch.depth_size;
    let labels: Vec<f64> = (0..b).map(|i| ((i + domain) % 2) as f64).collect();
    let mut depth = Tensor::zeros(&[b, 1, d, d]);
    for (i, &y) in labels.iter().enumerate() {
        if y == 1.0 {
            for v in &mut depth.data_mut()[i * d * d..(i + 1) * d * d] {
                *v = rng.random_range(0.2..1.0);
            }
        }
    }
    Batch {
        sample_ids: (0..b).map(|i| domain * 100 + i).collect(),
        images: uniform(rng, &[b, arch.in_channels, n, n], 0.0, 1.0),
        labels,
        depth,
        domain,
    }
}

pub(crate) fn toy_episode(seed: u64, n_domains: usize, b: usize) -> (Networks, ModelParams, EpisodeBatch) {
    let arch = toy_arch();
    let nets = Networks::new(&arch).expect("valid toy architecture");
    let params = nets.init(seed).expect("init");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let meta_train = (0..n_domains - 1).map(|d| toy_batch(&mut rng, &arch, b, d)).collect();
    let meta_test = toy_batch(&mut rng, &arch, b, n_domains - 1);
    (
        nets,
        params,
        EpisodeBatch {
            meta_train,
            meta_test,
            seed,
        },
    )
}

#[derive(Clone, Copy)]
enum ModelLoss {
    Classification,
    Depth,
    Joint,
}

/// Finite-difference comparison of a full-model loss over every parameter of F, M and D.
#[derive(Clone, Copy, Debug, Default)]
struct ModelFd {
    max_rel_error: f64,
    /// Coordinates whose ±h probes changed the ReLU/max-pool branch pattern.
    skipped: usize,
    total: usize,
}

fn model_fd(seed: u64, which: ModelLoss, corrupt: bool) -> Result<ModelFd, String> {
    let arch = toy_arch();
    let nets = Networks::new(&arch).map_err(err_string)?;
    let mut params = nets.init(seed).map_err(err_string)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(77));
    // Zero biases put ReLU inputs exactly on the kink wherever a receptive field is all zero.
    for set in [&mut params.f, &mut params.m, &mut params.d] {
        let is_bias: Vec<bool> = set.iter().map(|(n, _)| n.ends_with("bias")).collect();
        for (t, bias) in set.tensors_mut().zip(is_bias) {
            if bias {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            }
        }
    }
    let batch = toy_batch(&mut rng, &arch, 4, 0);
    let loss_of = |p: &ModelParams, requires_grad: bool| -> Result<(f64, u64, Vec<f64>), String> {
        let tape = Tape::new();
        let bf = p.f.bind(&tape, requires_grad).map_err(err_string)?;
        let bm = p.m.bind(&tape, requires_grad).map_err(err_string)?;
        let bd = p.d.bind(&tape, requires_grad).map_err(err_string)?;
        let x = tape.constant(batch.images.clone()).map_err(err_string)?;
        let feats = nets.f.forward(&tape, &bf, x).map_err(err_string)?.features;
        let cls = || -> Result<Var<'_>, String> {
            let probs = nets.m.classify(&tape, &bm, feats).map_err(err_string)?;
            cls_loss(&tape, probs, &batch.labels).map_err(err_string)
        };
        let dep = || -> Result<Var<'_>, String> {
            let pred = nets.d.estimate_depth(&tape, &bd, feats).map_err(err_string)?;
            let target = tape.constant(batch.depth.clone()).map_err(err_string)?;
            depth_loss(&tape, pred, target).map_err(err_string)
        };
        let loss = match which {
            ModelLoss::Classification => cls()?,
            ModelLoss::Depth => dep()?,
            ModelLoss::Joint => tape.add(cls()?, dep()?).map_err(err_string)?,
        };
        let (value, pattern) = (loss.item(), tape.branch_pattern());
        if !requires_grad {
            return Ok((value, pattern, Vec::new()));
        }
        let g = tape.backward(loss).map_err(err_string)?;
        Ok((value, pattern, [bf.grads(&g).flat(), bm.grads(&g).flat(), bd.grads(&g).flat()].concat()))
    };
    let (_, base_pattern, mut analytic) = loss_of(&params, true)?;
    if corrupt {
        analytic.iter_mut().for_each(|g| *g += CORRUPTION);
    }
    let (nf, nm) = (params.f.numel(), params.m.numel());
    let mut x = flat_params(&params);
    let eval = |x: &[f64]| -> Result<(f64, u64), String> {
        let p = ModelParams {
            f: params.f.with_flat(&x[..nf]).map_err(err_string)?,
            m: params.m.with_flat(&x[nf..nf + nm]).map_err(err_string)?,
            d: params.d.with_flat(&x[nf + nm..]).map_err(err_string)?,
        };
        loss_of(&p, false).map(|(v, pat, _)| (v, pat))
    };
    let mut out = ModelFd {
        total: x.len(),
        ..ModelFd::default()
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let (fp, pp) = eval(&x)?;
        x[i] = orig - FD_STEP;
        let (fm, pm) = eval(&x)?;
        x[i] = orig;
        if pp != base_pattern || pm != base_pattern {
            out.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        out.max_rel_error = out.max_rel_error.max(tensor::rel_error(analytic[i], numeric));
    }
    Ok(out)
}

fn max_over_seeds<F>(seeds: usize, mut f: F) -> Result<f64, String>
where
    F: FnMut(u64) -> Result<f64, String>,
{
    let mut worst = 0.0f64;
    for seed in 0..seeds as u64 {
        let e = f(seed).map_err(|e| format!("seed {seed}: {e}"))?;
        worst = worst.max(e);
    }
    Ok(worst)
}

pub fn gradient_suite(opts: &VerifyOptions) -> Vec<Property> {
    let mut rec = Recorder::new("gradients");
    let bound = Bound::AtMost { limit: GRAD_TOL };
    let corrupt = opts.corrupt_gradients;
    for case in op_cases() {
        rec.check(&format!("op {}", case.name), bound, || {
            max_over_seeds(opts.seeds, |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                fd_error(&(case.inputs)(&mut rng), &*case.build, corrupt)
            })
        });
    }
    let mut skipped = (0usize, 0usize);
    for (name, which) in [
        ("model classification loss", ModelLoss::Classification),
        ("model depth loss", ModelLoss::Depth),
        ("model joint loss", ModelLoss::Joint),
    ] {
        rec.check(name, bound, || {
            max_over_seeds(opts.seeds, |seed| {
                let r = model_fd(seed, which, corrupt)?;
                skipped.0 += r.skipped;
                skipped.1 += r.total;
                Ok(r.max_rel_error)
            })
        });
    }
    rec.check("model losses: fraction of coordinates straddling a kink", Bound::AtMost { limit: MAX_KINK_FRACTION }, || {
        Ok(skipped.0 as f64 / skipped.1.max(1) as f64)
    });
    // A deliberately wrong gradient must be caught.
    rec.check("negative control: corrupted conv2d gradient detected", Bound::AtLeast { limit: GRAD_TOL }, || {
        let case = op_cases().into_iter().find(|c| c.name == "conv2d").expect("conv2d case");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        fd_error(&(case.inputs)(&mut rng), &*case.build, true)
    });
    rec.out
}

fn logistic(weights: &[f64], bias: Option<f64>) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("weight", Tensor::new(&[1, weights.len()], weights.to_vec()).expect("shape"))
        .expect("unique");
    if let Some(b) = bias {
        p.push("bias", Tensor::new(&[1], vec![b]).expect("shape")).expect("unique");
    }
    p
}

fn flat_params(p: &ModelParams) -> Vec<f64> {
    [p.f.flat(), p.m.flat(), p.d.flat()].concat()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Hand-derived logistic-regression inner step on 1 to 3 parameters.
fn inner_update_error(seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = 6;
    let mut worst = 0.0f64;
    for (n_w, with_bias) in [(1, false), (1, true), (2, true)] {
        let xs: Vec<f64> = (0..b * n_w).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = (0..b).map(|i| (i % 2) as f64).collect();
        let w: Vec<f64> = (0..n_w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = with_bias.then(|| rng.random_range(-0.5..0.5));
        let alpha = rng.random_range(0.001..0.5);
        let feats = Tensor::new(&[b, n_w], xs.clone()).map_err(err_string)?;
        let step = inner_update(&LogisticHead, &logistic(&w, bias), &feats, &ys, alpha).map_err(err_string)?;
        let mut expected = w.clone();
        let mut expected_b = bias;
        for i in 0..b {
            let x = &xs[i * n_w..(i + 1) * n_w];
            let z: f64 = x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>() + bias.unwrap_or(0.0);
            let r = (sigmoid(z) - ys[i]) / b as f64;
            for j in 0..n_w {
                expected[j] -= alpha * r * x[j];
            }
            if let Some(eb) = expected_b.as_mut() {
                *eb -= alpha * r;
            }
        }
        expected.extend(expected_b);
        worst = worst.max(max_abs_diff(&step.adapted.flat(), &expected));
    }
    Ok(worst)
}

fn assemble(terms: &meta::TermGradients) -> ModelParams {
    let mut g = terms.test_depth.clone();
    for i in 0..terms.train_cls.len() {
        for t in [&terms.train_cls[i], &terms.train_depth[i], &terms.test_cls[i]] {
            g.f.add_scaled(&t.f, 1.0).expect("compatible");
            g.m.add_scaled(&t.m, 1.0).expect("compatible");
            g.d.add_scaled(&t.d, 1.0).expect("compatible");
        }
    }
    g
}

pub fn taylor_suite(opts: &VerifyOptions) -> Vec<Property> {
    let mut rec = Recorder::new("mldg-taylor");
    let seeds = opts.seeds;

    rec.check("inner update matches closed form", Bound::AtMost { limit: 1e-12 }, || {
        max_over_seeds(seeds, inner_update_error)
    });
    rec.check("inner update at alpha 0 is identity", Bound::AtMost { limit: 0.0 }, || {
        max_over_seeds(seeds.min(5), |seed| {
            let (nets, params, ep) = toy_episode(seed, 3, 4);
            let b = &ep.meta_train[0];
            let feats = features_no_grad(&nets, &params.f, &b.images).map_err(err_string)?;
            let step = inner_update(&nets.m, &params.m, &feats, &b.labels, 0.0).map_err(err_string)?;
            Ok(max_abs_diff(&step.adapted.flat(), &params.m.flat()))
        })
    });

    let smooth_f = |x: &[f64]| (x[0].powi(4) + x[1].sin(), vec![4.0 * x[0].powi(3), x[1].cos()]);
    let smooth_g = |x: &[f64]| (x[0] * x[1].exp(), vec![x[1].exp(), x[0] * x[1].exp()]);
    rec.check("residual at alpha 0", Bound::AtMost { limit: 1e-12 }, || {
        Ok(mldg_objective_check(&[0.3, -0.7], 0.0, 0.5, smooth_f, smooth_g).residual)
    });
    rec.check("residual matches quadratic closed form", Bound::AtMost { limit: 1e-10 }, || {
        max_over_seeds(seeds, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut sym = || {
                let (a, b, c) = (rng.random_range(0.5..2.0), rng.random_range(-0.5..0.5), rng.random_range(0.5..2.0));
                [[a, b], [b, c]]
            };
            let (ma, mc) = (sym(), sym());
            let quad = |m: [[f64; 2]; 2]| {
                move |x: &[f64]| {
                    let mx = [m[0][0] * x[0] + m[0][1] * x[1], m[1][0] * x[0] + m[1][1] * x[1]];
                    (0.5 * (x[0] * mx[0] + x[1] * mx[1]) + 0.3 * x[0] - 0.2 * x[1], vec![mx[0] + 0.3, mx[1] - 0.2])
                }
            };
            let theta = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let (alpha, beta) = (rng.random_range(0.01..0.2), rng.random_range(0.1..1.0));
            let r = mldg_objective_check(&theta, alpha, beta, quad(ma), quad(mc));
            let (_, fp) = quad(ma)(&theta);
            let cf = [mc[0][0] * fp[0] + mc[0][1] * fp[1], mc[1][0] * fp[0] + mc[1][1] * fp[1]];
            let closed = beta * alpha * alpha * 0.5 * (fp[0] * cf[0] + fp[1] * cf[1]);
            Ok((r.residual - closed).abs())
        })
    });
    rec.check("residual shrinks 4x when alpha halves (logistic head)", Bound::Within { lo: 3.5, hi: 4.5 }, || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let feats = uniform(&mut rng, &[12, 3], -1.0, 1.0);
        let test_feats = uniform(&mut rng, &[12, 3], -1.0, 1.0);
        let labels: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        let theta = logistic(&[0.4, -0.6, 0.9], Some(0.1));
        let f = head_objective(&LogisticHead, &theta, &feats, &labels);
        let g = head_objective(&LogisticHead, &theta, &test_feats, &labels);
        let r1 = mldg_objective_check(&theta.flat(), 1e-2, 1.0, &f, &g);
        let r2 = mldg_objective_check(&theta.flat(), 5e-3, 1.0, &f, &g);
        Ok(r1.residual / r2.residual)
    });
    rec.check("residual shrinks 4x when alpha halves (network head)", Bound::Within { lo: 3.5, hi: 4.5 }, || {
        let (nets, params, ep) = toy_episode(4, 2, 6);
        let train = features_no_grad(&nets, &params.f, &ep.meta_train[0].images).map_err(err_string)?;
        let test = features_no_grad(&nets, &params.f, &ep.meta_test.images).map_err(err_string)?;
        let f = head_objective(&nets.m, &params.m, &train, &ep.meta_train[0].labels);
        let g = head_objective(&nets.m, &params.m, &test, &ep.meta_test.labels);
        let theta = params.m.flat();
        let r1 = mldg_objective_check(&theta, 0.2, 1.0, &f, &g);
        let r2 = mldg_objective_check(&theta, 0.1, 1.0, &f, &g);
        Ok(r1.residual / r2.residual)
    });

    let meta_seeds = seeds.min(5);
    rec.check("meta step equals term-by-term assembly", Bound::AtMost { limit: 1e-10 }, || {
        max_over_seeds(meta_seeds, |seed| {
            let (nets, params, ep) = toy_episode(seed, 3, 4);
            let hp = meta::Hyperparams {
                alpha: 0.01,
                beta: 0.1,
                ..meta::Hyperparams::default()
            };
            let mut opt = Optimizer::new(OptimizerKind::Sgd);
            let (next, _) =
                meta::meta_step(&nets, &params, &ep, &hp, GradientOrder::First, &mut opt).map_err(err_string)?;
            let terms = term_gradients(&nets, &params, &ep, hp.alpha).map_err(err_string)?;
            let g = assemble(&terms);
            let expected: Vec<f64> = flat_params(&params)
                .iter()
                .zip(flat_params(&g))
                .map(|(p, g)| p - hp.beta * g)
                .collect();
            Ok(max_abs_diff(&flat_params(&next), &expected))
        })
    });
    rec.check("classification terms leave depth params untouched", Bound::AtMost { limit: 0.0 }, || {
        let (nets, params, ep) = toy_episode(2, 3, 4);
        let terms = term_gradients(&nets, &params, &ep, 0.01).map_err(err_string)?;
        Ok(terms.train_cls.iter().chain(&terms.test_cls).map(|t| t.d.norm()).fold(0.0, f64::max))
    });
    rec.check("depth terms leave head params untouched", Bound::AtMost { limit: 0.0 }, || {
        let (nets, params, ep) = toy_episode(2, 3, 4);
        let terms = term_gradients(&nets, &params, &ep, 0.01).map_err(err_string)?;
        Ok(terms
            .train_depth
            .iter()
            .chain(std::iter::once(&terms.test_depth))
            .map(|t| t.m.norm())
            .fold(0.0, f64::max))
    });
    rec.check("meta-train order does not matter", Bound::AtMost { limit: 1e-10 }, || {
        max_over_seeds(meta_seeds, |seed| {
            let (nets, params, ep) = toy_episode(seed, 4, 4);
            let mut perm = ep.clone();
            perm.meta_train.rotate_left(1);
            let (a, _) = meta::meta_gradients(&nets, &params, &ep, 0.01, GradientOrder::First).map_err(err_string)?;
            let (b, _) = meta::meta_gradients(&nets, &params, &perm, 0.01, GradientOrder::First).map_err(err_string)?;
            Ok(max_abs_diff(&flat_params(&a), &flat_params(&b)))
        })
    });
    rec.out
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
pub fn symmetric_eigenvalues(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.total_cmp(x));
    ev
}

fn covariance(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len();
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (r[i] - mean[i]) * (r[j] - mean[j]) / (n - 1) as f64;
            }
        }
    }
    c
}

fn pairwise_auc(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1.0 && labels[j] == 0.0 {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn two_clouds(rng: &mut ChaCha8Rng, per: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for (c, centre) in [-5.0, 5.0].iter().enumerate() {
        for _ in 0..per {
            rows.push((0..dim).map(|_| centre + rng.random_range(-1.0..1.0)).collect());
            truth.push(c);
        }
    }
    (rows, truth)
}

pub fn clustering_suite(opts: &VerifyOptions) -> Vec<Property> {
    let mut rec = Recorder::new("clustering");
    let seeds = opts.seeds;
    for method in [ClusterMethod::Kmeans, ClusterMethod::Gmm] {
        rec.check(&format!("{method} separates two clouds (1 - ARI)"), Bound::AtMost { limit: 0.0 }, || {
            max_over_seeds(seeds, |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (rows, truth) = two_clouds(&mut rng, 30, 6);
                let model = ClusterModel::fit(&rows, 2, method, seed).map_err(err_string)?;
                Ok(1.0 - adjusted_rand_index(&model.labels, &truth))
            })
        });
    }
    let random_rows = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scales: Vec<f64> = (0..8).map(|j| 1.0 / (1.0 + j as f64)).collect();
        (0..40)
            .map(|_| scales.iter().map(|s| s * rng.random_range(-1.0..1.0)).collect())
            .collect::<Vec<Vec<f64>>>()
    };
    rec.check("PCA components orthonormal", Bound::AtMost { limit: 1e-8 }, || {
        max_over_seeds(seeds, |seed| {
            let pca = PcaModel::fit(&random_rows(seed), 5).map_err(err_string)?;
            let mut worst = 0.0f64;
            for (i, a) in pca.components.iter().enumerate() {
                for (j, b) in pca.components.iter().enumerate() {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
                }
            }
            Ok(worst)
        })
    });
    rec.check("PCA variances match dense eigensolver", Bound::AtMost { limit: 1e-8 }, || {
        max_over_seeds(seeds, |seed| {
            let rows = random_rows(seed);
            let pca = PcaModel::fit(&rows, 8).map_err(err_string)?;
            let eig = symmetric_eigenvalues(covariance(&rows));
            Ok(max_abs_diff(&pca.explained_variance, &eig))
        })
    });
    rec.check("AUC matches pairwise count", Bound::AtMost { limit: 1e-12 }, || {
        max_over_seeds(seeds, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..200).map(|_| (rng.random_range(0.0..1.0f64) * 50.0).round() / 50.0).collect();
            let labels: Vec<f64> = (0..200).map(|_| rng.random_range(0..2) as f64).collect();
            let got = auc(&scores, &labels).map_err(err_string)?;
            Ok((got - pairwise_auc(&scores, &labels)).abs())
        })
    });
    rec.out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_oracle_on_known_matrix() {
        // eigenvalues of [[2,1],[1,2]] are 3 and 1
        let ev = symmetric_eigenvalues(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        assert!((ev[0] - 3.0).abs() < 1e-14 && (ev[1] - 1.0).abs() < 1e-14);
        let ev = symmetric_eigenvalues(vec![vec![4.0, 0.0, 0.0], vec![0.0, -1.0, 0.0], vec![0.0, 0.0, 2.0]]);
        assert_eq!(ev, vec![4.0, 2.0, -1.0]);
    }

    #[test]
    fn jacobi_matches_trace_and_determinant() {
        let a = vec![vec![4.0, 1.0, -2.0], vec![1.0, 3.0, 0.5], vec![-2.0, 0.5, 5.0]];
        let ev = symmetric_eigenvalues(a.clone());
        let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
        assert!((ev.iter().sum::<f64>() - 12.0).abs() < 1e-12);
        assert!((ev.iter().product::<f64>() - det).abs() < 1e-10);
    }

    #[test]
    fn corrupted_gradients_fail_the_suite() {
        let opts = VerifyOptions {
            seeds: 1,
            corrupt_gradients: true,
        };
        let props = gradient_suite(&opts);
        let checks = props
            .iter()
            .filter(|p| p.name.starts_with("op ") || p.name.ends_with(" loss"));
        assert!(checks.clone().count() > 10);
        assert!(checks.clone().all(|p| !p.passed), "{:?}", checks.collect::<Vec<_>>());
        let control = props.iter().find(|p| p.name.starts_with("negative control")).unwrap();
        assert!(control.passed);
    }

    #[test]
    fn quick_run_of_every_suite_passes() {
        let report = run(Suite::All, &VerifyOptions {
            seeds: 2,
            corrupt_gradients: false,
        });
        for p in &report.properties {
            assert!(p.passed, "{p}");
        }
        assert!(report.passed);
    }
}

