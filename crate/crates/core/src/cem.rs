//! Flat concept embedding models.
//!
//! A [`CemModel`] is a [`ConceptNet`] over an all-leaves hierarchy: each concept has
//! a positive and a negative generator, the shared scoring head reads the positive
//! embedding, and the bottleneck mixes the two by the predicted probability.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{self, ConceptNet, Forward, Intervention};
use crate::train::{train_network, TrainConfig, TrainReport};
use crate::worlds::{ConceptHierarchy, Dataset};

/// One row's mixed embedding and predicted probability for a single concept.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub row: usize,
    pub embedding: Vec<f64>,
    pub prob: f64,
}

/// `p c_plus + (1 - p) c_minus`.
pub fn mix_embedding(p: f64, c_plus: &[f64], c_minus: &[f64]) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::param(format!("mixture weight {p} outside [0, 1]")));
    }
    if c_plus.len() != c_minus.len() {
        return Err(Error::dim(format!(
            "embeddings of width {} and {}",
            c_plus.len(),
            c_minus.len()
        )));
    }
    Ok(net::mix(p, c_plus, c_minus))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CemModel {
    net: ConceptNet,
    pub config: TrainConfig,
    pub report: TrainReport,
}

impl CemModel {
    /// Wraps a network whose hierarchy has no sub-concepts.
    pub fn from_net(net: ConceptNet, config: TrainConfig, report: TrainReport) -> Result<Self> {
        if !net.hierarchy.is_all_leaves() {
            return Err(Error::param("a flat model cannot carry sub-concepts"));
        }
        Ok(Self { net, config, report })
    }

    pub fn net(&self) -> &ConceptNet {
        &self.net
    }

    pub fn into_net(self) -> ConceptNet {
        self.net
    }

    pub fn hierarchy(&self) -> &ConceptHierarchy {
        &self.net.hierarchy
    }

    pub fn forward(&self, h: &[f64]) -> Result<Forward> {
        cem_forward(self, h)
    }
}

/// Trains on the top-level concepts of `hierarchy`; any sub-concepts are ignored.
pub fn cem_train(hierarchy: &ConceptHierarchy, data: &Dataset, config: &TrainConfig) -> Result<CemModel> {
    let (net, report) = train_network(&hierarchy.flattened(), data, config)?;
    CemModel::from_net(net, config.clone(), report)
}

pub fn cem_forward(model: &CemModel, h: &[f64]) -> Result<Forward> {
    model.net.forward(h, &net::Forcing::none(&model.net))
}

/// Top-level interventions `(concept name, truth)`; names must be distinct.
pub fn cem_intervene(model: &CemModel, h: &[f64], spec: &[(&str, bool)]) -> Result<Forward> {
    intervene_top(&model.net, h, spec)
}

pub(crate) fn intervene_top(net: &ConceptNet, h: &[f64], spec: &[(&str, bool)]) -> Result<Forward> {
    let mut seen = HashSet::new();
    let mut ivs = Vec::with_capacity(spec.len());
    for &(name, present) in spec {
        let concept = net.hierarchy.index_of(name)?;
        if !seen.insert(concept) {
            return Err(Error::param(format!("concept `{name}` intervened twice")));
        }
        ivs.push(Intervention::Top { concept, present });
    }
    net.forward(h, &net.compile(&ivs)?)
}

/// Mixed embedding and probability of concept `concept` for every dataset row.
pub fn collect_embeddings(net: &ConceptNet, data: &Dataset, concept: usize) -> Result<Vec<EmbeddingRecord>> {
    if concept >= net.k() {
        return Err(Error::Lookup {
            kind: "concept",
            name: concept.to_string(),
        });
    }
    let none = net::Forcing::none(net);
    (0..data.len())
        .map(|row| {
            let fwd = net.forward(data.features.row(row), &none)?;
            let st = &fwd.concepts[concept];
            Ok(EmbeddingRecord {
                row,
                embedding: st.embedding.clone(),
                prob: st.prob,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{NetParams, NetShape};
    use crate::numkit::Parameters;
    use crate::rng::{Seeds, Stream};
    use crate::worlds::gen_digit_pairs;

    fn zero_net(k: usize, classes: usize) -> ConceptNet {
        let names: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
        let h = ConceptHierarchy::leaves(names).unwrap();
        let shape = NetShape {
            n_input: 3,
            backbone_hidden: None,
            m: 2,
            n_classes: classes,
        };
        let mut net = ConceptNet::init(h, shape, &mut Seeds::new(0).stream(Stream::Init, 0)).unwrap();
        for p in net.params.params_mut() {
            p.fill(0.0);
        }
        net
    }

    #[test]
    fn mix_examples() {
        assert_eq!(mix_embedding(1.0, &[1.5, 2.0], &[3.0, 4.0]).unwrap(), vec![1.5, 2.0]);
        assert_eq!(mix_embedding(0.0, &[1.5, 2.0], &[3.0, 4.0]).unwrap(), vec![3.0, 4.0]);
        assert_eq!(mix_embedding(0.25, &[4.0, 0.0], &[0.0, 4.0]).unwrap(), vec![1.0, 3.0]);
        assert!(matches!(mix_embedding(1.5, &[0.0], &[0.0]), Err(Error::Parameter(_))));
        assert!(mix_embedding(-0.1, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_outputs() {
        let net = zero_net(3, 4);
        let model = CemModel::from_net(net, TrainConfig::default(), TrainReport::default()).unwrap();
        let fwd = cem_forward(&model, &[1.0, -2.0, 0.5]).unwrap();
        assert!(fwd.concepts.iter().all(|c| c.prob == 0.5));
        assert!(fwd.task_probs.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let concat: Vec<f64> = fwd.concepts.iter().flat_map(|c| c.embedding.clone()).collect();
        assert_eq!(concat, fwd.bottleneck);
        assert!(cem_forward(&model, &[1.0]).is_err());
    }

    fn random_model(seed: u64) -> CemModel {
        let h = ConceptHierarchy::leaves(["a", "b", "c"]).unwrap();
        let shape = NetShape {
            n_input: 4,
            backbone_hidden: None,
            m: 3,
            n_classes: 4,
        };
        let net = ConceptNet::init(h, shape, &mut Seeds::new(seed).stream(Stream::Init, 0)).unwrap();
        CemModel::from_net(net, TrainConfig::default(), TrainReport::default()).unwrap()
    }

    #[test]
    fn intervention_replaces_embedding_exactly() {
        let model = random_model(3);
        let x = [0.3, -0.7, 1.1, 0.2];
        let plain = cem_forward(&model, &x).unwrap();
        let fwd = cem_intervene(&model, &x, &[("b", true), ("c", false)]).unwrap();
        assert_eq!(fwd.concepts[1].embedding, plain.concepts[1].sides[0].embedding);
        assert_eq!(fwd.concepts[2].embedding, plain.concepts[2].sides[1].embedding);
        assert_eq!(fwd.concepts[1].prob, 1.0);
        assert_eq!(fwd.concepts[2].prob, 0.0);
        assert_eq!(fwd.concepts[0], plain.concepts[0]);
        assert_eq!(cem_intervene(&model, &x, &[]).unwrap(), plain);
        let again = cem_intervene(&model, &x, &[("b", true), ("c", false)]).unwrap();
        assert_eq!(again, fwd);
        assert!(matches!(
            cem_intervene(&model, &x, &[("zzz", true)]),
            Err(Error::Lookup { .. })
        ));
        assert!(cem_intervene(&model, &x, &[("a", true), ("a", false)]).is_err());
    }

    #[test]
    fn collect_covers_every_row() {
        let w = gen_digit_pairs(0, 50, 0.3, 2).unwrap();
        let shape = NetShape {
            n_input: 4,
            backbone_hidden: None,
            m: 3,
            n_classes: 13,
        };
        let net = ConceptNet::init(w.hierarchy.clone(), shape, &mut Seeds::new(1).stream(Stream::Init, 0)).unwrap();
        let recs = collect_embeddings(&net, &w.dataset, 1).unwrap();
        assert_eq!(recs.len(), 50);
        assert_eq!(recs, collect_embeddings(&net, &w.dataset, 1).unwrap());
        assert!(recs.iter().enumerate().all(|(i, r)| r.row == i));
        assert!(collect_embeddings(&net, &w.dataset, 2).is_err());
    }

    #[test]
    fn zero_lambda_matches_task_only_gradient() {
        // with lambda 0 the loss is pure task CE, so the scoring head only moves
        // through the mixture weights
        let net = random_model(5).into_net();
        let spec0 = crate::train::LossSpec::unweighted(0.0, 3, 0);
        let x = [0.1, 0.2, 0.3, 0.4];
        let fwd = net.forward(&x, &net::Forcing::none(&net)).unwrap();
        let (_, out) = crate::train::sample_loss(&fwd, 1, &[1.0, 0.0, 1.0], &[], &spec0, 1.0);
        assert!(out.top.iter().all(|&g| g == 0.0));
        let mut g: NetParams = net.params.zeros_like();
        net.backward(&x, &fwd, &out, &mut g);
        let mut forced = net::Forcing::none(&net);
        forced.top = vec![Some(1.0); 3];
        let fwd = net.forward(&x, &forced).unwrap();
        let (_, out) = crate::train::sample_loss(&fwd, 1, &[1.0, 0.0, 1.0], &[], &spec0, 1.0);
        let mut g: NetParams = net.params.zeros_like();
        net.backward(&x, &fwd, &out, &mut g);
        assert!(g.score.w.data().iter().all(|&v| v == 0.0));
    }
}
