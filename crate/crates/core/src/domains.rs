//! Per-epoch pseudo-domain labels and the episode sampler built on them.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{mix_seed, Class, TrainRecord};
use crate::meta::{Batch, EpisodeBatch};
use crate::model::{ModelError, ModelParams, Networks};
use crate::style::{self, channel_stats, ClusterMethod, ClusterModel, PcaModel, Standardizer, StyleError};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DomainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Style(#[from] StyleError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("need at least {need} training samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("class-collapsed pseudo-domain {0}")]
    ClassCollapsed(usize),
    #[error("pseudo-domain {0} is empty")]
    EmptyDomain(usize),
}

pub type Result<T> = std::result::Result<T, DomainError>;

pub const RELABEL_RETRIES: usize = 3;
const STYLE_CHUNK: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleSettings {
    pub n_domains: usize,
    pub method: ClusterMethod,
    /// Upper bound on the PCA dimension; clamped to `n - 1` and the raw dimension.
    pub pca_dim: usize,
    pub threads: usize,
}

impl Default for StyleSettings {
    fn default() -> Self {
        Self {
            n_domains: 3,
            method: ClusterMethod::Kmeans,
            pca_dim: 256,
            threads: 1,
        }
    }
}

/// Labels for one epoch, aligned with the training records they were computed on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoDomainAssignment {
    pub epoch: usize,
    pub n_domains: usize,
    pub sample_ids: Vec<usize>,
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
    /// Relabeling attempts that were rejected before this one.
    pub retries: usize,
    /// True when clustering kept collapsing and a random balanced partition was used.
    pub fallback: bool,
    pub degenerate: bool,
}

impl PseudoDomainAssignment {
    pub fn from_labels(epoch: usize, n_domains: usize, sample_ids: Vec<usize>, labels: Vec<usize>) -> Self {
        let mut counts = vec![0; n_domains];
        labels.iter().for_each(|&l| counts[l] += 1);
        Self {
            epoch,
            n_domains,
            sample_ids,
            degenerate: counts.contains(&0),
            labels,
            counts,
            retries: 0,
            fallback: false,
        }
    }

    pub fn label_of(&self, sample_id: usize) -> Option<usize> {
        self.sample_ids.iter().position(|&s| s == sample_id).map(|i| self.labels[i])
    }

    /// First label that is empty or holds a single class.
    pub fn collapsed_label(&self, records: &[TrainRecord]) -> Option<usize> {
        let mut live = vec![0; self.n_domains];
        let mut spoof = vec![0; self.n_domains];
        for (r, &l) in records.iter().zip(&self.labels) {
            match r.class {
                Class::Live => live[l] += 1,
                Class::Spoof => spoof[l] += 1,
            }
        }
        (0..self.n_domains).find(|&l| live[l] == 0 || spoof[l] == 0)
    }
}

/// Raw style vectors: `[tap means, tap vars]` for each F tap in layer order,
/// then the same for D's output. Computed without gradients.
pub fn style_vectors(nets: &Networks, params: &ModelParams, records: &[TrainRecord], threads: usize) -> Result<Vec<Vec<f64>>> {
    let work = |chunk: &[TrainRecord]| -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let bf = params.f.bind(&tape, false)?;
        let bd = params.d.bind(&tape, false)?;
        let images: Vec<&Tensor> = chunk.iter().map(|r| &r.image).collect();
        let x = tape.constant(Tensor::stack(&images)?)?;
        let out = nets.f.forward(&tape, &bf, x)?;
        let depth = nets.d.estimate_depth(&tape, &bd, out.features)?;
        let mut stats = Vec::new();
        for tap in out.taps.values() {
            stats.push(channel_stats(&tap.value())?);
        }
        stats.push(channel_stats(&depth.value())?);
        Ok((0..chunk.len())
            .map(|b| {
                stats
                    .iter()
                    .flat_map(|s| {
                        let w = s.shape()[1];
                        s.data()[b * w..(b + 1) * w].iter().copied()
                    })
                    .collect()
            })
            .collect())
    };
    let chunks: Vec<&[TrainRecord]> = records.chunks(STYLE_CHUNK).collect();
    let per_chunk: Vec<Result<Vec<Vec<f64>>>> = if threads <= 1 {
        chunks.iter().map(|c| work(c)).collect()
    } else {
        let mut out: Vec<Option<Result<Vec<Vec<f64>>>>> = (0..chunks.len()).map(|_| None).collect();
        std::thread::scope(|s| {
            for (slot_group, chunk_group) in out
                .chunks_mut(chunks.len().div_ceil(threads))
                .zip(chunks.chunks(chunks.len().div_ceil(threads)))
            {
                let work = &work;
                s.spawn(move || {
                    for (slot, c) in slot_group.iter_mut().zip(chunk_group) {
                        *slot = Some(work(c));
                    }
                });
            }
        });
        out.into_iter().map(|o| o.expect("every chunk processed")).collect()
    };
    let mut rows = Vec::with_capacity(records.len());
    for c in per_chunk {
        rows.extend(c?);
    }
    Ok(rows)
}

/// Standardize, project onto principal axes and cluster.
pub fn cluster_style_vectors(rows: &[Vec<f64>], settings: &StyleSettings, seed: u64) -> Result<Vec<usize>> {
    let n = settings.n_domains;
    if rows.len() < n.max(2) {
        return Err(DomainError::TooFewSamples {
            need: n.max(2),
            got: rows.len(),
        });
    }
    if n == 1 {
        return Ok(vec![0; rows.len()]);
    }
    let standardizer = Standardizer::fit(rows)?;
    let z: Vec<Vec<f64>> = rows.iter().map(|r| standardizer.transform(r)).collect();
    let k = settings.pca_dim.min(rows.len() - 1).min(rows[0].len()).max(1);
    let pca = PcaModel::fit(&z, k)?;
    let reduced = z.iter().map(|r| pca.project(r)).collect::<style::Result<Vec<_>>>()?;
    let model = ClusterModel::fit(&reduced, n, settings.method, seed)?;
    Ok(reduced.iter().map(|r| model.assign(r)).collect::<style::Result<Vec<_>>>()?)
}

/// One labeling pass: no-grad forward, statistics, standardize, PCA, cluster, assign.
pub fn relabel_epoch(
    nets: &Networks,
    params: &ModelParams,
    records: &[TrainRecord],
    settings: &StyleSettings,
    seed: u64,
    epoch: usize,
) -> Result<PseudoDomainAssignment> {
    let rows = style_vectors(nets, params, records, settings.threads)?;
    let labels = cluster_style_vectors(&rows, settings, seed)?;
    Ok(PseudoDomainAssignment::from_labels(
        epoch,
        settings.n_domains,
        records.iter().map(|r| r.sample_id).collect(),
        labels,
    ))
}

/// Random partition into `n` labels with each class dealt round-robin, so
/// every label gets both classes when each class has at least `n` members.
pub fn balanced_partition(records: &[TrainRecord], n: usize, seed: u64, epoch: usize) -> PseudoDomainAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = vec![0; records.len()];
    for class in [Class::Live, Class::Spoof] {
        let mut idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].class == class).collect();
        idx.shuffle(&mut rng);
        for (k, i) in idx.into_iter().enumerate() {
            labels[i] = k % n;
        }
    }
    PseudoDomainAssignment::from_labels(epoch, n, records.iter().map(|r| r.sample_id).collect(), labels)
}

/// [`relabel_epoch`] with the collapse policy: up to three reseeded retries,
/// then a random balanced partition.
pub fn assign_pseudo_domains(
    nets: &Networks,
    params: &ModelParams,
    records: &[TrainRecord],
    settings: &StyleSettings,
    seed: u64,
    epoch: usize,
) -> Result<PseudoDomainAssignment> {
    let rows = style_vectors(nets, params, records, settings.threads)?;
    let ids: Vec<usize> = records.iter().map(|r| r.sample_id).collect();
    for attempt in 0..=RELABEL_RETRIES {
        let labels = cluster_style_vectors(&rows, settings, mix_seed(seed, attempt as u64))?;
        let mut a = PseudoDomainAssignment::from_labels(epoch, settings.n_domains, ids.clone(), labels);
        if a.collapsed_label(records).is_none() {
            a.retries = attempt;
            return Ok(a);
        }
    }
    let mut a = balanced_partition(records, settings.n_domains, mix_seed(seed, u64::MAX), epoch);
    a.retries = RELABEL_RETRIES;
    a.fallback = true;
    Ok(a)
}

/// Labels taken from a known domain id per record (the generator-truth mode).
pub fn assignment_from_domains(records: &[TrainRecord], domains: &[usize], epoch: usize) -> PseudoDomainAssignment {
    let mut distinct: Vec<usize> = domains.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let labels = domains
        .iter()
        .map(|d| distinct.binary_search(d).expect("present"))
        .collect();
    PseudoDomainAssignment::from_labels(epoch, distinct.len(), records.iter().map(|r| r.sample_id).collect(), labels)
}

/// Reshuffling queue: draws without replacement and starts a new pass when empty.
#[derive(Clone, Debug)]
struct Pool {
    members: Vec<usize>,
    queue: VecDeque<usize>,
}

impl Pool {
    fn new(members: Vec<usize>) -> Self {
        Self {
            members,
            queue: VecDeque::new(),
        }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.queue.is_empty() {
            let mut order = self.members.clone();
            order.shuffle(rng);
            self.queue.extend(order);
        }
        self.queue.pop_front().expect("non-empty pool")
    }
}

/// Draws class-stratified batches per pseudo-domain for one epoch.
pub struct EpisodeSampler {
    per_domain_batch: usize,
    live: Vec<Pool>,
    spoof: Vec<Pool>,
    rng: ChaCha8Rng,
}

impl EpisodeSampler {
    pub fn new(assignment: &PseudoDomainAssignment, records: &[TrainRecord], per_domain_batch: usize, seed: u64) -> Result<Self> {
        let n = assignment.n_domains;
        let mut live = vec![Vec::new(); n];
        let mut spoof = vec![Vec::new(); n];
        for (i, (r, &l)) in records.iter().zip(&assignment.labels).enumerate() {
            match r.class {
                Class::Live => live[l].push(i),
                Class::Spoof => spoof[l].push(i),
            }
        }
        for l in 0..n {
            if live[l].is_empty() && spoof[l].is_empty() {
                return Err(DomainError::EmptyDomain(l));
            }
            if live[l].is_empty() || spoof[l].is_empty() {
                return Err(DomainError::ClassCollapsed(l));
            }
        }
        Ok(Self {
            per_domain_batch,
            live: live.into_iter().map(Pool::new).collect(),
            spoof: spoof.into_iter().map(Pool::new).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn n_domains(&self) -> usize {
        self.live.len()
    }

    /// One stratified batch from `label`: the live count follows the label's
    /// class ratio, with at least one sample of each class.
    pub fn batch(&mut self, label: usize, records: &[TrainRecord]) -> Batch {
        let b = self.per_domain_batch;
        let (nl, ns) = (self.live[label].members.len(), self.spoof[label].members.len());
        let n_live = ((b as f64 * nl as f64 / (nl + ns) as f64).round() as usize).clamp(1, b - 1);
        let mut picks = Vec::with_capacity(b);
        for _ in 0..n_live {
            picks.push(self.live[label].draw(&mut self.rng));
        }
        for _ in n_live..b {
            picks.push(self.spoof[label].draw(&mut self.rng));
        }
        make_batch(records, &picks, label)
    }

    /// Uniform meta-test label; the other labels, ascending, form the meta-train side.
    pub fn sample_episode(&mut self, records: &[TrainRecord]) -> EpisodeBatch {
        let n = self.n_domains();
        let test = self.rng.random_range(0..n);
        let seed = self.rng.random::<u64>();
        let meta_train = (0..n).filter(|&l| l != test).map(|l| self.batch(l, records)).collect();
        let meta_test = self.batch(test, records);
        EpisodeBatch {
            meta_train,
            meta_test,
            seed,
        }
    }
}

pub fn make_batch(records: &[TrainRecord], picks: &[usize], domain: usize) -> Batch {
    let images: Vec<&Tensor> = picks.iter().map(|&i| &records[i].image).collect();
    let depth: Vec<&Tensor> = picks.iter().map(|&i| &records[i].depth).collect();
    Batch {
        sample_ids: picks.iter().map(|&i| records[i].sample_id).collect(),
        images: Tensor::stack(&images).expect("images share a shape"),
        labels: picks.iter().map(|&i| records[i].y()).collect(),
        depth: Tensor::stack(&depth).expect("depth maps share a shape"),
        domain,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, split_leave_one_domain_out, GeneratorConfig};
    use crate::model::Architecture;
    use crate::style::adjusted_rand_index;

    fn fake_records(n: usize) -> Vec<TrainRecord> {
        (0..n)
            .map(|i| TrainRecord {
                sample_id: i,
                image: Tensor::full(&[6, 8, 8], i as f64 / n as f64),
                class: if i % 2 == 0 { Class::Live } else { Class::Spoof },
                depth: Tensor::zeros(&[1, 2, 2]),
            })
            .collect()
    }

    fn assignment(n: usize, labels: Vec<usize>) -> PseudoDomainAssignment {
        let ids = (0..labels.len()).collect();
        PseudoDomainAssignment::from_labels(0, n, ids, labels)
    }

    #[test]
    fn episode_shapes() {
        let records = fake_records(60);
        for (n, expect_train) in [(3, 2), (2, 1)] {
            let a = assignment(n, (0..60).map(|i| (i / 2) % n).collect());
            let mut s = EpisodeSampler::new(&a, &records, 7, 1).unwrap();
            let ep = s.sample_episode(&records);
            assert_eq!(ep.meta_train.len(), expect_train);
            let mut labels: Vec<usize> = ep.meta_train.iter().map(|b| b.domain).collect();
            labels.push(ep.meta_test.domain);
            labels.sort();
            assert_eq!(labels, (0..n).collect::<Vec<_>>());
            let total: usize = ep.meta_train.iter().map(|b| b.len()).sum::<usize>() + ep.meta_test.len();
            assert_eq!(total, 7 * n);
            for b in ep.meta_train.iter().chain([&ep.meta_test]) {
                assert!(b.has_both_classes());
                assert!(b.sample_ids.iter().all(|&id| a.labels[id] == b.domain));
            }
        }
    }

    #[test]
    fn meta_test_label_is_uniform() {
        let records = fake_records(60);
        let a = assignment(3, (0..60).map(|i| (i / 2) % 3).collect());
        let mut s = EpisodeSampler::new(&a, &records, 4, 9).unwrap();
        let mut counts = [0; 3];
        for _ in 0..300 {
            counts[s.sample_episode(&records).meta_test.domain] += 1;
        }
        assert!(counts.iter().all(|&c| (60..=140).contains(&c)), "{counts:?}");
    }

    #[test]
    fn draws_without_replacement_within_a_pass() {
        let records = fake_records(40);
        let a = assignment(1, vec![0; 40]);
        let mut s = EpisodeSampler::new(&a, &records, 10, 3).unwrap();
        let mut seen: Vec<usize> = (0..4).flat_map(|_| s.batch(0, &records).sample_ids).collect();
        seen.sort();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn small_cluster_samples_with_replacement() {
        let records = fake_records(20);
        let mut labels = vec![0; 20];
        labels[0] = 1;
        labels[1] = 1;
        let a = assignment(2, labels);
        let mut s = EpisodeSampler::new(&a, &records, 7, 3).unwrap();
        let b = s.batch(1, &records);
        assert_eq!(b.len(), 7);
        assert!(b.sample_ids.iter().all(|&id| id < 2));
    }

    #[test]
    fn collapsed_label_is_rejected() {
        let records = fake_records(12);
        let labels = (0..12).map(|i| i % 2).collect();
        let a = assignment(2, labels);
        assert_eq!(a.collapsed_label(&records), Some(0));
        assert!(matches!(
            EpisodeSampler::new(&a, &records, 4, 0),
            Err(DomainError::ClassCollapsed(0))
        ));
    }

    #[test]
    fn balanced_partition_has_both_classes() {
        let records = fake_records(30);
        let a = balanced_partition(&records, 3, 5, 2);
        assert_eq!(a.collapsed_label(&records), None);
        assert_eq!(a.counts, vec![10, 10, 10]);
        assert_eq!(a.counts.iter().sum::<usize>(), 30);
    }

    #[test]
    fn truth_assignment_compacts_ids() {
        let records = fake_records(4);
        let a = assignment_from_domains(&records, &[0, 3, 1, 3], 0);
        assert_eq!(a.labels, vec![0, 2, 1, 2]);
        assert_eq!(a.n_domains, 3);
        assert_eq!(a.label_of(1), Some(2));
    }

    fn small_setup() -> (Networks, ModelParams, Vec<TrainRecord>, Vec<usize>) {
        let cfg = GeneratorConfig {
            per_domain: 40,
            image_size: 16,
            depth_size: 4,
            ..GeneratorConfig::default()
        };
        let ds = generate(&cfg, 1).unwrap();
        let split = split_leave_one_domain_out(&ds, 3).unwrap();
        let arch = Architecture {
            image_size: 16,
            base_width: 4,
            head_hidden: 4,
            depth_size: 4,
            depth_width: 4,
            ..Architecture::default()
        };
        let nets = Networks::new(&arch).unwrap();
        let params = nets.init(0).unwrap();
        (nets, params, split.train, split.train_domains)
    }

    #[test]
    fn relabel_single_domain_and_determinism() {
        let (nets, params, records, _) = small_setup();
        let one = StyleSettings {
            n_domains: 1,
            ..StyleSettings::default()
        };
        let a = relabel_epoch(&nets, &params, &records, &one, 0, 0).unwrap();
        assert!(a.labels.iter().all(|&l| l == 0));

        let three = StyleSettings::default();
        let before = params.checksum();
        let a = relabel_epoch(&nets, &params, &records, &three, 4, 0).unwrap();
        let b = relabel_epoch(&nets, &params, &records, &three, 4, 0).unwrap();
        assert_eq!(a, b);
        assert_eq!(params.checksum(), before);
        assert_eq!(a.counts.iter().sum::<usize>(), records.len());
    }

    #[test]
    fn threads_do_not_change_style_vectors() {
        let (nets, params, records, _) = small_setup();
        let a = style_vectors(&nets, &params, &records, 1).unwrap();
        let b = style_vectors(&nets, &params, &records, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].len(), nets.arch.style_dim());
    }

    #[test]
    fn relabel_recovers_generator_domains() {
        let (nets, params, records, truth) = small_setup();
        let a = assign_pseudo_domains(&nets, &params, &records, &StyleSettings::default(), 0, 0).unwrap();
        let ari = adjusted_rand_index(&a.labels, &truth);
        assert!(ari >= 0.5, "ARI {ari}");
    }
}
