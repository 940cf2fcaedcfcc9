//! Style statistics: per-channel activation moments, PCA reduction and
//! clustering into pseudo-domains.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum StyleError {
    #[error("channel_stats: expected a [B,C,H,W] activation with H*W >= 1, got {0:?}")]
    BadActivation(Vec<usize>),
    #[error("degenerate statistics: {0}")]
    Degenerate(String),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, StyleError>;

/// Per-sample `[means(C), variances(C)]` over the spatial dims (population variance).
pub fn channel_stats(activation: &Tensor) -> Result<Tensor> {
    let s = activation.shape();
    if s.len() != 4 || s[2] * s[3] == 0 {
        return Err(StyleError::BadActivation(s.to_vec()));
    }
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let data = activation.data();
    let mut out = vec![0.0; b * 2 * c];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &data[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            out[bi * 2 * c + ci] = mean;
            out[bi * 2 * c + c + ci] = var;
        }
    }
    Ok(Tensor::new(&[b, 2 * c], out).expect("shape"))
}

/// Per-coordinate z-scoring fitted on one epoch's style vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = check_rows(rows, 1)?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
        }
        let mut std = vec![0.0; dim];
        for r in rows {
            for j in 0..dim {
                std[j] += (r[j] - mean[j]).powi(2) / n;
            }
        }
        std.iter_mut().for_each(|s| *s = s.sqrt());
        Ok(Self { mean, std })
    }

    /// Constant coordinates map to 0.
    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| if *s > 1e-12 { (v - m) / s } else { 0.0 })
            .collect()
    }
}

fn check_rows(rows: &[Vec<f64>], min: usize) -> Result<usize> {
    if rows.len() < min {
        return Err(StyleError::TooFewSamples {
            need: min,
            got: rows.len(),
        });
    }
    let dim = rows[0].len();
    for r in rows {
        if r.len() != dim {
            return Err(StyleError::Dimension {
                expected: dim,
                got: r.len(),
            });
        }
    }
    Ok(dim)
}

/// Principal axes of a set of vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows of length `dim`, by decreasing explained variance.
    pub components: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One-sided Jacobi orthogonalisation of `cols`. Returns the rotated columns
/// and, when `track` is set, the accumulated rotation matrix (as columns).
fn hestenes(mut cols: Vec<Vec<f64>>, track: bool) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let p = cols.len();
    let mut rot: Vec<Vec<f64>> = if track {
        (0..p)
            .map(|i| {
                let mut e = vec![0.0; p];
                e[i] = 1.0;
                e
            })
            .collect()
    } else {
        Vec::new()
    };
    for _sweep in 0..80 {
        let mut rotated = false;
        for i in 0..p {
            for j in i + 1..p {
                let alpha = dot(&cols[i], &cols[i]);
                let beta = dot(&cols[j], &cols[j]);
                let gamma = dot(&cols[i], &cols[j]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, i, j, c, s);
                if track {
                    rotate_pair(&mut rot, i, j, c, s);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (cols, rot)
}

fn rotate_pair(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (a, b) = (&mut lo[i], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xi, yi) = (*x, *y);
        *x = c * xi - s * yi;
        *y = s * xi + c * yi;
    }
}

/// Gram-Schmidt `v` against `basis`; `None` when nothing is left.
fn orthogonalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..2 {
        for b in basis {
            let d = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
    }
    let n = dot(&v, &v).sqrt();
    (n > 1e-8).then(|| v.into_iter().map(|x| x / n).collect())
}

impl PcaModel {
    /// Fits `k` components (clamped to `min(k, n - 1, dim)`) from the SVD of the centred data.
    pub fn fit(rows: &[Vec<f64>], k: usize) -> Result<Self> {
        let dim = check_rows(rows, 2)?;
        let n = rows.len();
        if k == 0 {
            return Err(StyleError::Degenerate("target dimension must be >= 1".into()));
        }
        let k = k.min(n - 1).min(dim);
        let mut mean = vec![0.0; dim];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
        }
        let centred: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
            .collect();
        let total: f64 = centred.iter().map(|r| dot(r, r)).sum();
        let scale: f64 = rows.iter().map(|r| dot(r, r)).sum::<f64>().max(1.0);
        if total <= 1e-24 * scale {
            return Err(StyleError::Degenerate("all vectors are identical".into()));
        }

        // (direction, singular value) pairs
        let mut pairs: Vec<(Vec<f64>, f64)> = if n >= dim {
            let cols: Vec<Vec<f64>> = (0..dim).map(|j| centred.iter().map(|r| r[j]).collect()).collect();
            let (cols, rot) = hestenes(cols, true);
            cols.iter()
                .zip(rot)
                .map(|(c, v)| (v, dot(c, c).sqrt()))
                .collect()
        } else {
            let (cols, _) = hestenes(centred, false);
            cols.into_iter()
                .map(|c| {
                    let s = dot(&c, &c).sqrt();
                    let v = if s > 0.0 { c.iter().map(|x| x / s).collect() } else { c };
                    (v, s)
                })
                .collect()
        };
        pairs.sort_by(|a, b| b.1.total_cmp(&a.1));

        let smax = pairs[0].1;
        let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut explained = Vec::with_capacity(k);
        for (v, s) in pairs.into_iter().take(k) {
            if s > smax * 1e-10 {
                components.push(v);
                explained.push(s * s / (n - 1) as f64);
            }
        }
        // Rank-deficient data: complete the basis with null-space directions.
        let mut e = 0;
        while components.len() < k && e < dim {
            let mut unit = vec![0.0; dim];
            unit[e] = 1.0;
            if let Some(v) = orthogonalize(unit, &components) {
                components.push(v);
                explained.push(0.0);
            }
            e += 1;
        }
        for c in components.iter_mut() {
            // sign convention: largest-magnitude coordinate positive
            let (idx, _) = c
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
            if c[idx] < 0.0 {
                c.iter_mut().for_each(|x| *x = -*x);
            }
        }
        Ok(Self {
            mean,
            components,
            explained_variance: explained,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// `components · (raw − mean)`.
    pub fn project(&self, raw: &[f64]) -> Result<Vec<f64>> {
        if raw.len() != self.dim() {
            return Err(StyleError::Dimension {
                expected: self.dim(),
                got: raw.len(),
            });
        }
        let centred: Vec<f64> = raw.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
        Ok(self.components.iter().map(|c| dot(c, &centred)).collect())
    }

    pub fn reconstruct(&self, reduced: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, z) in self.components.iter().zip(reduced) {
            out.iter_mut().zip(c).for_each(|(o, v)| *o += z * v);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    #[default]
    Kmeans,
    Gmm,
}

impl std::str::FromStr for ClusterMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "kmeans" | "k-means" => Ok(Self::Kmeans),
            "gmm" => Ok(Self::Gmm),
            other => Err(format!("unknown clustering method {other:?} (kmeans|gmm)")),
        }
    }
}

impl std::fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Kmeans => "kmeans",
            Self::Gmm => "gmm",
        })
    }
}

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;
/// k-means++ seedings per fit; the lowest-inertia run is kept.
pub const KMEANS_RESTARTS: usize = 10;
pub const GMM_MAX_ITER: usize = 200;
pub const GMM_TOL: f64 = 1e-7;
const GMM_VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ClusterParams {
    Kmeans {
        centers: Vec<Vec<f64>>,
    },
    Gmm {
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
        weights: Vec<f64>,
    },
}

/// A fitted clustering of reduced style vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub method: ClusterMethod,
    pub n_clusters: usize,
    pub seed: u64,
    pub params: ClusterParams,
    /// Labels of the fitting data.
    pub labels: Vec<usize>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the smallest value; ties go to the lowest index.
fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn nearest(centers: &[Vec<f64>], x: &[f64]) -> usize {
    argmin(centers.iter().map(|c| sq_dist(c, x)))
}

/// Within-cluster sum of squares.
pub fn inertia(data: &[Vec<f64>], centers: &[Vec<f64>], labels: &[usize]) -> f64 {
    data.iter().zip(labels).map(|(x, &l)| sq_dist(x, &centers[l])).sum()
}

fn kmeans_pp(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![data[rng.random_range(0..data.len())].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..data.len())
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut pick = data.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        };
        centers.push(data[idx].clone());
        let c = centers.last().unwrap();
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(sq_dist(x, c));
        }
    }
    centers
}

/// Lloyd iterations from the given starting centres. Returns (centres, labels, iterations).
pub fn lloyd(data: &[Vec<f64>], mut centers: Vec<Vec<f64>>) -> (Vec<Vec<f64>>, Vec<usize>, usize) {
    let k = centers.len();
    let dim = data[0].len();
    let mut labels: Vec<usize> = data.iter().map(|x| nearest(&centers, x)).collect();
    let mut iters = 0;
    while iters < KMEANS_MAX_ITER {
        iters += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (x, &l) in data.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        let mut new_centers: Vec<Vec<f64>> = sums
            .into_iter()
            .zip(&counts)
            .zip(&centers)
            .map(|((s, &n), old)| {
                if n == 0 {
                    old.clone()
                } else {
                    s.into_iter().map(|v| v / n as f64).collect()
                }
            })
            .collect();
        // empty clusters are re-seeded at the point farthest from its centre
        for c in 0..k {
            if counts[c] == 0 {
                let far = data
                    .iter()
                    .zip(&labels)
                    .enumerate()
                    .map(|(i, (x, &l))| (i, sq_dist(x, &new_centers[l])))
                    .fold((0, -1.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc })
                    .0;
                new_centers[c] = data[far].clone();
                labels[far] = c;
            }
        }
        let shift = centers
            .iter()
            .zip(&new_centers)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = new_centers;
        labels = data.iter().map(|x| nearest(&centers, x)).collect();
        if shift < KMEANS_TOL {
            break;
        }
    }
    (centers, labels, iters)
}

fn log_gauss_diag(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((xi, mi), vi) in x.iter().zip(mean).zip(var) {
        s += -0.5 * ((2.0 * std::f64::consts::PI * vi).ln() + (xi - mi) * (xi - mi) / vi);
    }
    s
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl ClusterModel {
    /// Fits `n` clusters; deterministic for a fixed `seed`.
    pub fn fit(data: &[Vec<f64>], n: usize, method: ClusterMethod, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(StyleError::Degenerate("cluster count must be >= 1".into()));
        }
        check_rows(data, n.max(1))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: Option<(f64, (Vec<Vec<f64>>, Vec<usize>, usize))> = None;
        for _ in 0..KMEANS_RESTARTS {
            let run = lloyd(data, kmeans_pp(data, n, &mut rng));
            let score = inertia(data, &run.0, &run.1);
            if best.as_ref().is_none_or(|(b, _)| score < *b) {
                best = Some((score, run));
            }
        }
        let (_, (centers, labels, iterations)) = best.expect("at least one restart");
        let mut model = ClusterModel {
            method: ClusterMethod::Kmeans,
            n_clusters: n,
            seed,
            params: ClusterParams::Kmeans { centers },
            labels,
            iterations,
        };
        if method == ClusterMethod::Gmm {
            model = model.refine_gmm(data)?;
        }
        Ok(model)
    }

    fn refine_gmm(self, data: &[Vec<f64>]) -> Result<Self> {
        let ClusterParams::Kmeans { centers } = &self.params else {
            unreachable!("refine_gmm starts from k-means")
        };
        let (k, dim, n) = (self.n_clusters, data[0].len(), data.len());
        let mut means = centers.clone();
        let mut variances = vec![vec![0.0; dim]; k];
        let mut weights = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (x, &l) in data.iter().zip(&self.labels) {
            counts[l] += 1;
            for j in 0..dim {
                variances[l][j] += (x[j] - means[l][j]).powi(2);
            }
        }
        for c in 0..k {
            weights[c] = counts[c].max(1) as f64 / n as f64;
            for v in variances[c].iter_mut() {
                *v = (*v / counts[c].max(1) as f64).max(GMM_VAR_FLOOR);
            }
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);

        let mut prev = f64::NEG_INFINITY;
        let mut iterations = 0;
        let mut resp = vec![vec![0.0; k]; n];
        while iterations < GMM_MAX_ITER {
            iterations += 1;
            let mut ll = 0.0;
            for (x, r) in data.iter().zip(resp.iter_mut()) {
                for c in 0..k {
                    r[c] = weights[c].ln() + log_gauss_diag(x, &means[c], &variances[c]);
                }
                let lse = log_sum_exp(r);
                ll += lse;
                r.iter_mut().for_each(|v| *v = (*v - lse).exp());
            }
            ll /= n as f64;
            for c in 0..k {
                let nk: f64 = resp.iter().map(|r| r[c]).sum::<f64>().max(1e-300);
                weights[c] = nk / n as f64;
                for j in 0..dim {
                    means[c][j] = data.iter().zip(&resp).map(|(x, r)| r[c] * x[j]).sum::<f64>() / nk;
                }
                for j in 0..dim {
                    variances[c][j] = (data
                        .iter()
                        .zip(&resp)
                        .map(|(x, r)| r[c] * (x[j] - means[c][j]).powi(2))
                        .sum::<f64>()
                        / nk)
                        .max(GMM_VAR_FLOOR);
                }
            }
            if (ll - prev).abs() < GMM_TOL {
                break;
            }
            prev = ll;
        }
        let mut model = ClusterModel {
            method: ClusterMethod::Gmm,
            params: ClusterParams::Gmm {
                means,
                variances,
                weights,
            },
            iterations: self.iterations + iterations,
            ..self
        };
        model.labels = data.iter().map(|x| model.assign_unchecked(x)).collect();
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        match &self.params {
            ClusterParams::Kmeans { centers } => centers[0].len(),
            ClusterParams::Gmm { means, .. } => means[0].len(),
        }
    }

    fn assign_unchecked(&self, x: &[f64]) -> usize {
        match &self.params {
            ClusterParams::Kmeans { centers } => nearest(centers, x),
            ClusterParams::Gmm {
                means,
                variances,
                weights,
            } => argmin((0..self.n_clusters).map(|c| -(weights[c].ln() + log_gauss_diag(x, &means[c], &variances[c])))),
        }
    }

    /// Nearest centre (k-means) or most responsible component (GMM); ties go to the lowest label.
    pub fn assign(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.dim() {
            return Err(StyleError::Dimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(self.assign_unchecked(x))
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        match &self.params {
            ClusterParams::Kmeans { centers } => centers,
            ClusterParams::Gmm { means, .. } => means,
        }
    }
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same samples.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let sum_cells: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let sum_a: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let sum_b: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
    let total = choose2(a.len() as u64);
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_cells - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn constant_and_two_point_stats() {
        let t = Tensor::full(&[2, 3, 4, 4], 3.0);
        let s = channel_stats(&t).unwrap();
        assert_eq!(s.shape(), &[2, 6]);
        assert_eq!(&s.data()[..3], &[3.0, 3.0, 3.0]);
        assert_eq!(&s.data()[3..6], &[0.0, 0.0, 0.0]);
        let t = Tensor::new(&[1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        assert_eq!(channel_stats(&t).unwrap().data(), &[1.0, 1.0]);
        assert!(channel_stats(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn pca_on_line_and_degenerate() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, i as f64]).collect();
        let m = PcaModel::fit(&rows, 1).unwrap();
        let c = &m.components[0];
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((c[0] - r).abs() < 1e-12 && (c[1] - r).abs() < 1e-12);
        for row in &rows {
            let back = m.reconstruct(&m.project(row).unwrap());
            assert!(sq_dist(&back, row) < 1e-20);
        }
        let same = vec![vec![1.0, 2.0]; 4];
        assert!(matches!(PcaModel::fit(&same, 1), Err(StyleError::Degenerate(_))));
        assert!(matches!(PcaModel::fit(&rows[..1], 1), Err(StyleError::TooFewSamples { .. })));
    }

    #[test]
    fn pca_clamps_k_and_completes_rank_deficient_basis() {
        // 3 samples in 6 dims -> at most 2 components
        let rows = vec![
            vec![1.0, 0.0, 0.0, 2.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0, 0.0, 3.0, 1.0],
            vec![1.0, 1.0, 0.0, 2.0, 3.0, 1.0],
        ];
        let m = PcaModel::fit(&rows, 10).unwrap();
        assert_eq!(m.k(), 2);
        // duplicated rows: rank 1 but k = 2 requested
        let rows = vec![vec![0.0, 0.0, 0.0], vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]];
        let m = PcaModel::fit(&rows, 2).unwrap();
        assert_eq!(m.k(), 2);
        assert!(dot(&m.components[0], &m.components[1]).abs() < 1e-10);
        assert!((dot(&m.components[1], &m.components[1]) - 1.0).abs() < 1e-10);
        assert_eq!(m.explained_variance[1], 0.0);
    }

    #[test]
    fn project_mean_is_zero_and_length_checked() {
        let rows = vec![vec![1.0, 2.0, 0.5], vec![2.0, 0.0, 1.0], vec![0.0, 1.0, 3.0]];
        let m = PcaModel::fit(&rows, 2).unwrap();
        assert!(m.project(&m.mean).unwrap().iter().all(|v| v.abs() < 1e-15));
        assert!(m.project(&[1.0]).is_err());
    }

    fn blobs(seed: u64, centers: &[Vec<f64>], per: usize, sd: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sd).unwrap();
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for (c, centre) in centers.iter().enumerate() {
            for _ in 0..per {
                data.push(centre.iter().map(|m| m + noise.sample(&mut rng)).collect());
                truth.push(c);
            }
        }
        (data, truth)
    }

    #[test]
    fn kmeans_single_cluster_is_mean() {
        let (data, _) = blobs(1, &[vec![1.0, -2.0, 0.5]], 40, 1.0);
        let m = ClusterModel::fit(&data, 1, ClusterMethod::Kmeans, 0).unwrap();
        assert!(m.labels.iter().all(|&l| l == 0));
        for j in 0..3 {
            let mean = data.iter().map(|r| r[j]).sum::<f64>() / data.len() as f64;
            assert!((m.centers()[0][j] - mean).abs() < 1e-10);
        }
    }

    #[test]
    fn assign_ties_and_exact_hits() {
        let m = ClusterModel {
            method: ClusterMethod::Kmeans,
            n_clusters: 3,
            seed: 0,
            params: ClusterParams::Kmeans {
                centers: vec![vec![-1.0, 0.0], vec![0.0, 5.0], vec![1.0, 0.0]],
            },
            labels: vec![],
            iterations: 0,
        };
        assert_eq!(m.assign(&[0.0, 5.0]).unwrap(), 1);
        assert_eq!(m.assign(&[0.0, 0.0]).unwrap(), 0);
        assert!(m.assign(&[0.0]).is_err());
    }

    #[test]
    fn gmm_recovers_separated_blobs_and_refits_consistently() {
        let (data, truth) = blobs(4, &[vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]], 30, 0.5);
        let m = ClusterModel::fit(&data, 3, ClusterMethod::Gmm, 7).unwrap();
        assert_eq!(adjusted_rand_index(&m.labels, &truth), 1.0);
        for (x, &l) in data.iter().zip(&m.labels) {
            assert_eq!(m.assign(x).unwrap(), l);
        }
        let again = ClusterModel::fit(&data, 3, ClusterMethod::Gmm, 7).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn too_few_samples_for_clusters() {
        let data = vec![vec![0.0], vec![1.0]];
        assert!(matches!(
            ClusterModel::fit(&data, 3, ClusterMethod::Kmeans, 0),
            Err(StyleError::TooFewSamples { need: 3, got: 2 })
        ));
    }

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        let ari = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!(ari < 0.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[0, 0, 0]), 1.0);
    }
}
