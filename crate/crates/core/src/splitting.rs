//! Concept splitting: discovering sub-concepts inside a trained model's embeddings.
//!
//! For one top-level concept, the training rows' mixed embeddings are partitioned
//! by the predicted probability (`p > 0.5` versus the rest). Each partition gets its
//! own sparse autoencoder and every sufficiently supported feature becomes a
//! sub-concept of the matching polarity, labelled 1 exactly on the partition rows
//! where the feature fires. The clustering variant replaces the SAE by k-means++
//! with the cluster count chosen by mean silhouette.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::cem::{collect_embeddings, EmbeddingRecord};
use crate::error::{Error, Result};
use crate::net::ConceptNet;
use crate::numkit::Matrix;
use crate::rng::{Rng, Seeds, Stream};
use crate::sae::{active_features, sae_train, SaeConfig, SaeModel};
use crate::worlds::{Dataset, Polarity, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub sae: SaeConfig,
    /// Minimum fraction of the partition on which a feature must fire.
    pub min_support: f64,
    pub clustering: ClusterConfig,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            sae: SaeConfig::default(),
            min_support: 0.005,
            clustering: ClusterConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub alpha_min: usize,
    pub beta_max: usize,
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            alpha_min: 2,
            beta_max: 8,
            restarts: 10,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubConceptSource {
    Sae { feature: usize, theta: f64 },
    Cluster { cluster: usize, of: usize },
    /// Several discovered sub-concepts OR-merged after matching the same bank entry.
    Merged { ids: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscoveredSubConcept {
    /// `parent/pos/f12`, `parent/neg/k3` and so on; unique within a run.
    pub id: String,
    pub parent: usize,
    pub parent_name: String,
    pub polarity: Polarity,
    pub source: SubConceptSource,
    /// Row ids the labels are defined on (the training rows), ascending.
    pub rows: Vec<usize>,
    pub labels: Vec<bool>,
    /// Activation strength per entry of `rows`; 0 where the label is 0.
    pub activations: Vec<f64>,
}

impl DiscoveredSubConcept {
    pub fn support(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    /// Label of dataset row `row`, `None` outside the label domain.
    pub fn label_of(&self, row: usize) -> Option<bool> {
        self.rows.binary_search(&row).ok().map(|i| self.labels[i])
    }
}

/// Rows predicted present (`p > 0.5`) and the rest, each in input order.
pub fn partition_embeddings(records: &[EmbeddingRecord]) -> (Vec<EmbeddingRecord>, Vec<EmbeddingRecord>) {
    records.iter().cloned().partition(|r| r.prob > 0.5)
}

/// `label(row) = row in partition and feature active on it`, over `domain`.
///
/// `active` holds the active features of each partition row, aligned with `partition`.
pub fn make_subconcept_labels(
    domain: &[usize],
    partition: &[usize],
    active: &[Vec<(usize, f64)>],
    feature: usize,
) -> Vec<bool> {
    let on: std::collections::HashSet<usize> = partition
        .iter()
        .zip(active)
        .filter(|(_, a)| a.iter().any(|&(f, _)| f == feature))
        .map(|(&r, _)| r)
        .collect();
    domain.iter().map(|r| on.contains(r)).collect()
}

/// Up to `n_top` labelled rows by descending activation, ties by row id.
pub fn prototypes(sub: &DiscoveredSubConcept, n_top: usize) -> Vec<(usize, f64)> {
    let mut hits: Vec<(usize, f64)> = sub
        .rows
        .iter()
        .zip(&sub.labels)
        .zip(&sub.activations)
        .filter(|((_, &l), _)| l)
        .map(|((&r, _), &a)| (r, a))
        .collect();
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    hits.truncate(n_top);
    hits
}

fn polarity_tag(p: Polarity) -> &'static str {
    match p {
        Polarity::Positive => "pos",
        Polarity::Negative => "neg",
    }
}

fn to_matrix(records: &[EmbeddingRecord]) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = records.iter().map(|r| r.embedding.clone()).collect();
    Matrix::from_rows(&rows)
}

/// Result of splitting one top-level concept.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitOutcome {
    pub subs: Vec<DiscoveredSubConcept>,
    /// One trained SAE per polarity that was not skipped.
    pub saes: Vec<(Polarity, SaeModel)>,
    /// Polarities skipped, with the reason.
    pub skipped: Vec<(Polarity, String)>,
    /// Features dropped for lack of support, per polarity.
    pub below_support: Vec<(Polarity, usize)>,
}

/// SAE splitting on embedding records of one concept. `records` must cover exactly
/// the label domain (normally the training rows), in ascending row order.
pub fn split_records_sae(
    parent: usize,
    parent_name: &str,
    records: &[EmbeddingRecord],
    config: &SplitConfig,
) -> Result<SplitOutcome> {
    let domain: Vec<usize> = records.iter().map(|r| r.row).collect();
    let (on, off) = partition_embeddings(records);
    let mut out = SplitOutcome::default();
    let need = 2 * config.sae.batch_size;
    let mut jobs = Vec::new();
    for (polarity, part) in [(Polarity::Positive, on), (Polarity::Negative, off)] {
        if part.len() < need {
            out.skipped.push((
                polarity,
                format!("{} rows, need at least {need}", part.len()),
            ));
        } else {
            jobs.push((polarity, part));
        }
    }
    let sae_config = |polarity: Polarity| SaeConfig {
        seed: Seeds::new(config.seed)
            .child(2 * parent as u64 + u64::from(polarity == Polarity::Negative))
            .seed(),
        ..config.sae.clone()
    };
    let trained = train_jobs(&jobs, sae_config);
    for ((polarity, part), sae) in jobs.into_iter().zip(trained) {
        let sae = sae?;
        let part_rows: Vec<usize> = part.iter().map(|r| r.row).collect();
        let active: Vec<Vec<(usize, f64)>> = part.iter().map(|r| active_features(&sae, &r.embedding)).collect();
        let mut strength: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); sae.dict_size()];
        for (&row, acts) in part_rows.iter().zip(&active) {
            for &(f, a) in acts {
                strength[f].insert(row, a);
            }
        }
        let min_support = (config.min_support * part.len() as f64).ceil().max(1.0) as usize;
        let mut dropped = 0;
        for (f, hits) in strength.iter().enumerate() {
            if hits.is_empty() {
                continue;
            }
            if hits.len() < min_support {
                dropped += 1;
                continue;
            }
            let labels = make_subconcept_labels(&domain, &part_rows, &active, f);
            let activations = domain.iter().map(|r| hits.get(r).copied().unwrap_or(0.0)).collect();
            out.subs.push(DiscoveredSubConcept {
                id: format!("{parent_name}/{}/f{f}", polarity_tag(polarity)),
                parent,
                parent_name: parent_name.to_string(),
                polarity,
                source: SubConceptSource::Sae {
                    feature: f,
                    theta: sae.theta,
                },
                rows: domain.clone(),
                labels,
                activations,
            });
        }
        out.below_support.push((polarity, dropped));
        out.saes.push((polarity, sae));
    }
    Ok(out)
}

// The polarities are independent and seeded separately, so they train in parallel
// where threads exist.
#[cfg(not(target_arch = "wasm32"))]
fn train_jobs(
    jobs: &[(Polarity, Vec<EmbeddingRecord>)],
    cfg: impl Fn(Polarity) -> SaeConfig,
) -> Vec<Result<SaeModel>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(polarity, part)| {
                let c = cfg(*polarity);
                scope.spawn(move || sae_train(&to_matrix(part)?, &c))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("SAE worker panicked")).collect()
    })
}

#[cfg(target_arch = "wasm32")]
fn train_jobs(
    jobs: &[(Polarity, Vec<EmbeddingRecord>)],
    cfg: impl Fn(Polarity) -> SaeConfig,
) -> Vec<Result<SaeModel>> {
    jobs.iter().map(|(p, part)| sae_train(&to_matrix(part)?, &cfg(*p))).collect()
}

/// Training-row embedding records of `concept`, ascending by row.
pub fn training_records(net: &ConceptNet, data: &Dataset, concept: usize) -> Result<Vec<EmbeddingRecord>> {
    let mut recs = collect_embeddings(net, data, concept)?;
    recs.retain(|r| data.splits[r.row] == Split::Train);
    Ok(recs)
}

/// SAE splitting of concept `concept` of a trained model.
pub fn split_concept_sae(net: &ConceptNet, data: &Dataset, concept: usize, config: &SplitConfig) -> Result<SplitOutcome> {
    let recs = training_records(net, data, concept)?;
    let name = net.hierarchy.concepts()[concept].name.clone();
    split_records_sae(concept, &name, &recs, config)
}

/// Squared Euclidean distance.
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean silhouette over all points (Euclidean). Points in singleton clusters score 0.
pub fn silhouette_score(points: &Matrix, assignment: &[usize]) -> Result<f64> {
    let n = points.rows();
    if assignment.len() != n {
        return Err(Error::dim(format!("{} labels for {n} points", assignment.len())));
    }
    let k = assignment.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignment {
        sizes[a] += 1;
    }
    if k < 2 || sizes.contains(&0) || k >= n {
        return Err(Error::Silhouette(format!(
            "{k} clusters over {n} points (need 2 <= clusters < points, none empty)"
        )));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        let xi = points.row(i);
        for j in 0..n {
            if j != i {
                sums[assignment[j]] += dist2(xi, points.row(j)).sqrt();
            }
        }
        let own = assignment[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Best-of-`restarts` k-means++ clustering; returns `(assignment, centroids, inertia)`.
pub fn kmeans(points: &Matrix, k: usize, restarts: usize, max_iter: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<Vec<f64>>, f64)> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::param(format!("cannot form {k} clusters from {n} points")));
    }
    let mut best: Option<(Vec<usize>, Vec<Vec<f64>>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans_once(points, k, max_iter, rng);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn kmeans_once(points: &Matrix, k: usize, max_iter: usize, rng: &mut Rng) -> (Vec<usize>, Vec<Vec<f64>>, f64) {
    let n = points.rows();
    let mut centroids: Vec<Vec<f64>> = vec![points.row(rng.random_range(0..n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(points.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if u < d {
                    chosen = i;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points.row(pick).to_vec();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(points.row(i), &c));
        }
        centroids.push(c);
    }
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (i, slot) in assignment.iter_mut().enumerate() {
            let c = nearest_centroid(points.row(i), &centroids);
            if *slot != c {
                *slot = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let m = points.cols();
        let mut sums = vec![vec![0.0; m]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignment.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // re-seed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = dist2(points.row(a), &centroids[assignment[a]]);
                        let db = dist2(points.row(b), &centroids[assignment[b]]);
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .expect("n > 0");
                centroids[c] = points.row(far).to_vec();
            }
        }
    }
    let inertia = (0..n).map(|i| dist2(points.row(i), &centroids[assignment[i]])).sum();
    (assignment, centroids, inertia)
}

fn nearest_centroid(x: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, mu) in centroids.iter().enumerate() {
        let d = dist2(x, mu);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Cluster-count selection by silhouette over `alpha_min..=beta_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterChoice {
    pub n_clusters: usize,
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// `(candidate count, mean silhouette)` for every candidate tried.
    pub scores: Vec<(usize, f64)>,
    /// Set when the range had to be clipped to the number of points.
    pub clipped: bool,
}

pub fn select_clusters(points: &Matrix, config: &ClusterConfig, rng: &mut Rng) -> Result<ClusterChoice> {
    if config.alpha_min < 2 || config.beta_max < config.alpha_min {
        return Err(Error::param(format!(
            "cluster range {}..={} needs 2 <= alpha_min <= beta_max",
            config.alpha_min, config.beta_max
        )));
    }
    let n = points.rows();
    let hi = config.beta_max.min(n.saturating_sub(1));
    if hi < config.alpha_min {
        return Err(Error::param(format!("{n} points cannot form {} clusters", config.alpha_min)));
    }
    let mut best: Option<(f64, usize, Vec<usize>, Vec<Vec<f64>>)> = None;
    let mut scores = Vec::new();
    for c in config.alpha_min..=hi {
        let (assignment, centroids, _) = kmeans(points, c, config.restarts, config.max_iter, rng)?;
        // k-means can leave a cluster empty on degenerate data; such a split scores -1
        let s = silhouette_score(points, &assignment).unwrap_or(-1.0);
        scores.push((c, s));
        if best.as_ref().is_none_or(|b| s > b.0) {
            best = Some((s, c, assignment, centroids));
        }
    }
    let (_, n_clusters, assignment, centroids) = best.expect("non-empty range");
    Ok(ClusterChoice {
        n_clusters,
        assignment,
        centroids,
        scores,
        clipped: hi < config.beta_max,
    })
}

/// Clustering splitting of one polarity. Labels are 1 exactly on the members of a
/// cluster; activation strength is the negated distance to the cluster centre.
pub fn split_records_clustering(
    parent: usize,
    parent_name: &str,
    records: &[EmbeddingRecord],
    polarity: Polarity,
    config: &SplitConfig,
) -> Result<(Vec<DiscoveredSubConcept>, ClusterChoice)> {
    let domain: Vec<usize> = records.iter().map(|r| r.row).collect();
    let (on, off) = partition_embeddings(records);
    let part = if polarity == Polarity::Positive { on } else { off };
    let points = to_matrix(&part)?;
    let seeds = Seeds::new(config.seed).child(2 * parent as u64 + u64::from(polarity == Polarity::Negative));
    let choice = select_clusters(&points, &config.clustering, &mut seeds.stream(Stream::Cluster, 0))?;
    let pos_of: BTreeMap<usize, usize> = part.iter().enumerate().map(|(i, r)| (r.row, i)).collect();
    let subs = (0..choice.n_clusters)
        .map(|c| {
            let mut labels = Vec::with_capacity(domain.len());
            let mut activations = Vec::with_capacity(domain.len());
            for r in &domain {
                match pos_of.get(r) {
                    Some(&i) if choice.assignment[i] == c => {
                        labels.push(true);
                        activations.push(-dist2(points.row(i), &choice.centroids[c]).sqrt());
                    }
                    _ => {
                        labels.push(false);
                        activations.push(0.0);
                    }
                }
            }
            DiscoveredSubConcept {
                id: format!("{parent_name}/{}/k{c}", polarity_tag(polarity)),
                parent,
                parent_name: parent_name.to_string(),
                polarity,
                source: SubConceptSource::Cluster {
                    cluster: c,
                    of: choice.n_clusters,
                },
                rows: domain.clone(),
                labels,
                activations,
            }
        })
        .collect();
    Ok((subs, choice))
}

pub fn split_concept_clustering(
    net: &ConceptNet,
    data: &Dataset,
    concept: usize,
    polarity: Polarity,
    config: &SplitConfig,
) -> Result<(Vec<DiscoveredSubConcept>, ClusterChoice)> {
    let recs = training_records(net, data, concept)?;
    let name = net.hierarchy.concepts()[concept].name.clone();
    split_records_clustering(concept, &name, &recs, polarity, config)
}

/// Tab-separated label table: a `row` column then one 0/1 column per sub-concept.
/// All sub-concepts must share the same row domain.
pub fn write_labels_tsv<W: Write>(subs: &[DiscoveredSubConcept], mut out: W) -> Result<()> {
    let io = |e| Error::io("<labels>", e);
    let Some(first) = subs.first() else {
        writeln!(out, "row").map_err(io)?;
        return Ok(());
    };
    if subs.iter().any(|s| s.rows != first.rows) {
        return Err(Error::dim("sub-concepts over different row sets"));
    }
    let header: Vec<&str> = std::iter::once("row").chain(subs.iter().map(|s| s.id.as_str())).collect();
    writeln!(out, "{}", header.join("\t")).map_err(io)?;
    for (i, r) in first.rows.iter().enumerate() {
        let mut line = r.to_string();
        for s in subs {
            line.push('\t');
            line.push(if s.labels[i] { '1' } else { '0' });
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubConceptMeta {
    pub id: String,
    pub parent: String,
    pub polarity: Polarity,
    pub source: SubConceptSource,
    pub support: usize,
    pub prototypes: Vec<(usize, f64)>,
}

/// Sidecar metadata for the label table.
pub fn sidecar(subs: &[DiscoveredSubConcept], n_prototypes: usize) -> Vec<SubConceptMeta> {
    subs.iter()
        .map(|s| SubConceptMeta {
            id: s.id.clone(),
            parent: s.parent_name.clone(),
            polarity: s.polarity,
            source: s.source.clone(),
            support: s.support(),
            prototypes: prototypes(s, n_prototypes),
        })
        .collect()
}
