//! Joint task + concept training with random interventions and early stopping.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ConceptNet, Forcing, Forward, NetParams, NetShape, OutputGrads};
use crate::numkit::{bce_term, AdamConfig, AdamState, BinaryWeights, Parameters, PROB_CLAMP};
use crate::rng::{Seeds, Stream};
use crate::worlds::{ConceptHierarchy, Dataset, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the concept loss.
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    /// Per-concept probability of a training-time intervention.
    pub p_int: f64,
    pub seed: u64,
    /// Embedding width `m`.
    pub embedding_width: usize,
    /// Also intervene on sub-concepts during training.
    pub sub_randint: bool,
    /// Reweight top-level concept BCE by label imbalance.
    pub balance_concepts: bool,
    /// Reweight sub-concept BCE by label imbalance.
    pub balance_sub_concepts: bool,
    /// Inverse-frequency task class weights.
    pub balance_tasks: bool,
    /// Hidden width of an optional ReLU backbone in front of the generators.
    pub backbone_hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            lr: 1e-3,
            batch_size: 256,
            max_epochs: 300,
            patience: 20,
            p_int: 0.25,
            seed: 0,
            embedding_width: 16,
            sub_randint: false,
            balance_concepts: false,
            balance_sub_concepts: false,
            balance_tasks: false,
            backbone_hidden: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.embedding_width == 0 {
            return Err(Error::Config("batch_size, max_epochs and embedding_width must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_int) {
            return Err(Error::Config(format!("p_int {} outside [0, 1]", self.p_int)));
        }
        if !(self.lambda >= 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config("lambda must be >= 0 and lr > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Loss weights derived once from the training split.
#[derive(Clone, Debug)]
pub(crate) struct LossSpec {
    pub lambda: f64,
    pub concept_weights: Vec<BinaryWeights>,
    pub sub_weights: Vec<BinaryWeights>,
    pub class_weights: Option<Vec<f64>>,
}

impl LossSpec {
    pub fn unweighted(lambda: f64, k: usize, n_subs: usize) -> Self {
        Self {
            lambda,
            concept_weights: vec![BinaryWeights::default(); k],
            sub_weights: vec![BinaryWeights::default(); n_subs],
            class_weights: None,
        }
    }
}

fn balance(pos: usize, neg: usize) -> BinaryWeights {
    if pos == 0 || neg == 0 {
        BinaryWeights::default()
    } else {
        BinaryWeights {
            positive: neg as f64 / pos as f64,
            negative: 1.0,
        }
    }
}

/// Sub-concept targets aligned with the network's flat sub order; checks that every
/// sub-concept of the hierarchy has a label column.
pub(crate) fn sub_targets(hierarchy: &ConceptHierarchy, data: &Dataset) -> Result<Vec<Vec<Option<bool>>>> {
    hierarchy
        .sub_refs()
        .into_iter()
        .map(|s| {
            let col = data.sub_column(s).ok_or_else(|| {
                Error::Config(format!(
                    "no label column for sub-concept `{}` of `{}`",
                    hierarchy.sub_name(s),
                    hierarchy.concepts()[s.parent].name
                ))
            })?;
            if col.values.len() != data.len() {
                return Err(Error::dim(format!(
                    "label column for `{}` has {} rows, dataset has {}",
                    hierarchy.sub_name(s),
                    col.values.len(),
                    data.len()
                )));
            }
            Ok(col.values.clone())
        })
        .collect()
}

/// Per-sample loss and its output gradients. `scale` multiplies the gradients.
pub(crate) fn sample_loss(
    fwd: &Forward,
    task: usize,
    concepts: &[f64],
    subs: &[Option<bool>],
    spec: &LossSpec,
    scale: f64,
) -> (f64, OutputGrads) {
    let w_task = spec.class_weights.as_ref().map_or(1.0, |w| w[task]);
    let mut value = -w_task * fwd.task_probs[task].max(PROB_CLAMP).ln();
    let logits: Vec<f64> = fwd
        .task_probs
        .iter()
        .enumerate()
        .map(|(c, &p)| scale * w_task * (p - if c == task { 1.0 } else { 0.0 }))
        .collect();
    let known = subs.iter().filter(|s| s.is_some()).count();
    let n_terms = (concepts.len() + known) as f64;
    let per_term = spec.lambda / n_terms;
    let mut top = vec![0.0; concepts.len()];
    for (i, (&t, st)) in concepts.iter().zip(&fwd.concepts).enumerate() {
        let (v, g) = bce_term(st.predicted, t, spec.concept_weights[i]);
        value += per_term * v;
        top[i] = scale * per_term * g;
    }
    let mut sub = vec![0.0; subs.len()];
    if known > 0 {
        let mut ord = 0;
        for st in &fwd.concepts {
            for side in &st.sides {
                for &pred in &side.sub_predicted {
                    if let Some(t) = subs[ord] {
                        let (v, g) = bce_term(pred, f64::from(u8::from(t)), spec.sub_weights[ord]);
                        value += per_term * v;
                        sub[ord] = scale * per_term * g;
                    }
                    ord += 1;
                }
            }
        }
    }
    (value, OutputGrads { logits, top, sub })
}

/// One labelled example for [`loss_and_gradient`].
#[derive(Clone, Debug)]
pub struct Example<'a> {
    pub x: &'a [f64],
    pub task: usize,
    pub concepts: &'a [f64],
    /// Sub-concept labels in flat sub order; `None` is unlabelled.
    pub subs: &'a [Option<bool>],
    pub forcing: &'a Forcing,
}

/// Unweighted training loss summed over `examples`, with its gradient.
pub fn loss_and_gradient(net: &ConceptNet, examples: &[Example], lambda: f64) -> Result<(f64, NetParams)> {
    let spec = LossSpec::unweighted(lambda, net.k(), net.n_subs());
    let mut grads = net.params.zeros_like();
    let mut total = 0.0;
    for e in examples {
        if e.task >= net.shape.n_classes || e.concepts.len() != net.k() || e.subs.len() != net.n_subs() {
            return Err(Error::dim("example does not fit the network"));
        }
        let fwd = net.forward(e.x, e.forcing)?;
        let (l, out) = sample_loss(&fwd, e.task, e.concepts, e.subs, &spec, 1.0);
        total += l;
        net.backward(e.x, &fwd, &out, &mut grads);
    }
    Ok((total, grads))
}

pub(crate) struct Prepared<'a> {
    pub data: &'a Dataset,
    pub concepts: Vec<Vec<f64>>,
    pub subs: Vec<Vec<Option<bool>>>,
    pub spec: LossSpec,
}

impl<'a> Prepared<'a> {
    pub fn new(hierarchy: &ConceptHierarchy, data: &'a Dataset, cfg: &TrainConfig) -> Result<Self> {
        if data.concepts.cols() != hierarchy.len() {
            return Err(Error::Config(format!(
                "dataset has {} top-level concept columns, hierarchy has {}",
                data.concepts.cols(),
                hierarchy.len()
            )));
        }
        let by_sub = sub_targets(hierarchy, data)?;
        let n = data.len();
        let subs: Vec<Vec<Option<bool>>> = (0..n).map(|r| by_sub.iter().map(|c| c[r]).collect()).collect();
        let concepts: Vec<Vec<f64>> = (0..n).map(|r| data.concepts.row(r).to_vec()).collect();
        let train = data.rows_in(Split::Train);
        let mut spec = LossSpec::unweighted(cfg.lambda, hierarchy.len(), by_sub.len());
        if cfg.balance_concepts {
            for (i, w) in spec.concept_weights.iter_mut().enumerate() {
                let pos = train.iter().filter(|&&r| data.concept(r, i)).count();
                *w = balance(pos, train.len() - pos);
            }
        }
        if cfg.balance_sub_concepts {
            for (s, w) in spec.sub_weights.iter_mut().enumerate() {
                let pos = train.iter().filter(|&&r| by_sub[s][r] == Some(true)).count();
                let neg = train.iter().filter(|&&r| by_sub[s][r] == Some(false)).count();
                *w = balance(pos, neg);
            }
        }
        if cfg.balance_tasks {
            let mut counts = vec![0usize; data.n_classes];
            for &r in &train {
                counts[data.tasks[r]] += 1;
            }
            let present = counts.iter().filter(|&&c| c > 0).count().max(1) as f64;
            let total = train.len() as f64;
            spec.class_weights = Some(
                counts
                    .iter()
                    .map(|&c| if c == 0 { 1.0 } else { total / (present * c as f64) })
                    .collect(),
            );
        }
        Ok(Self {
            data,
            concepts,
            subs,
            spec,
        })
    }

    pub fn mean_loss(&self, net: &ConceptNet, rows: &[usize]) -> f64 {
        let none = Forcing::none(net);
        let total: f64 = rows
            .iter()
            .map(|&r| {
                let fwd = net.forward_unchecked(self.data.features.row(r), &none);
                sample_loss(&fwd, self.data.tasks[r], &self.concepts[r], &self.subs[r], &self.spec, 0.0).0
            })
            .sum();
        total / rows.len().max(1) as f64
    }
}

/// Trains a concept network on the dataset's training split, early-stopping on the
/// validation split when it is non-empty.
pub fn train_network(
    hierarchy: &ConceptHierarchy,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ConceptNet, TrainReport)> {
    cfg.validate()?;
    let prepared = Prepared::new(hierarchy, data, cfg)?;
    let seeds = Seeds::new(cfg.seed);
    let shape = NetShape {
        n_input: data.n_hidden(),
        backbone_hidden: cfg.backbone_hidden,
        m: cfg.embedding_width,
        n_classes: data.n_classes,
    };
    let mut net = ConceptNet::init(hierarchy.clone(), shape, &mut seeds.stream(Stream::Init, 0))?;
    let mut train_rows = data.rows_in(Split::Train);
    if train_rows.is_empty() {
        return Err(Error::Config("dataset has no training rows".into()));
    }
    let val_rows = data.rows_in(Split::Val);
    let mut shuffle_rng = seeds.stream(Stream::Shuffle, 0);
    let mut randint_rng = seeds.stream(Stream::RandInt, 0);
    let mut sub_randint_rng = seeds.stream(Stream::RandInt, 1);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &net.params);
    let mut grads: NetParams = net.params.zeros_like();
    let mut report = TrainReport::default();
    let mut best: Option<(f64, NetParams)> = None;
    let k = hierarchy.len();
    let n_subs = net.n_subs();
    for epoch in 0..cfg.max_epochs {
        train_rows.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in train_rows.chunks(cfg.batch_size) {
            for g in grads.params_mut() {
                g.fill(0.0);
            }
            let scale = 1.0 / batch.len() as f64;
            for &r in batch {
                let mut forcing = Forcing {
                    top: Vec::with_capacity(k),
                    sub: vec![None; n_subs],
                };
                for i in 0..k {
                    let hit = randint_rng.random::<f64>() < cfg.p_int;
                    forcing.top.push(hit.then(|| prepared.concepts[r][i]));
                }
                if cfg.sub_randint {
                    for (s, f) in forcing.sub.iter_mut().enumerate() {
                        let hit = sub_randint_rng.random::<f64>() < cfg.p_int;
                        if let (true, Some(t)) = (hit, prepared.subs[r][s]) {
                            *f = Some(f64::from(u8::from(t)));
                        }
                    }
                }
                let x = data.features.row(r);
                let fwd = net.forward_unchecked(x, &forcing);
                let (loss, out) = sample_loss(
                    &fwd,
                    data.tasks[r],
                    &prepared.concepts[r],
                    &prepared.subs[r],
                    &prepared.spec,
                    scale,
                );
                epoch_loss += loss;
                net.backward(x, &fwd, &out, &mut grads);
            }
            let mut params = net.params.params_mut();
            adam.update(&mut params, &grads.params())?;
        }
        let train_loss = epoch_loss / train_rows.len() as f64;
        let val_loss = (!val_rows.is_empty()).then(|| prepared.mean_loss(&net, &val_rows));
        report.history.push(EpochStats { train_loss, val_loss });
        report.epochs_run = epoch + 1;
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, net.params.clone()));
                report.best_epoch = epoch;
            } else if epoch - report.best_epoch >= cfg.patience {
                break;
            }
        } else {
            report.best_epoch = epoch;
        }
    }
    if let Some((_, params)) = best {
        net.params = params;
    }
    Ok((net, report))
}
