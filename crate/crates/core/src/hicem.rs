//! Hierarchical concept embedding models.
//!
//! Each polarity of a top-level concept that has sub-concepts is produced by a
//! sub-concept module: every sub-concept gets its own generator on top of the
//! parent's preliminary embedding, the side embedding is the probability-weighted
//! sum of sub-concept embeddings and the side probability is a soft maximum of the
//! sub-concept probabilities. Interventions work at both levels.

use crate::cem::intervene_top;
use crate::error::{Error, Result};
use crate::net::{self, ConceptNet, Forcing, Forward, Intervention, SideState, SOFT_MAX_ALPHA, SOFT_MAX_BETA};
use crate::train::{train_network, TrainConfig, TrainReport};
use crate::worlds::{ConceptHierarchy, Dataset, Polarity, SubRef};

pub use crate::net::toplevel_prob;

/// `sum_j softmax(alpha p - beta)_j p_j` with the default `alpha = 200`, `beta = 100`.
pub fn soft_max_prob(probs: &[f64]) -> Result<f64> {
    soft_max_prob_with(probs, SOFT_MAX_ALPHA, SOFT_MAX_BETA)
}

pub fn soft_max_prob_with(probs: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::dim("soft maximum of an empty vector"));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::param(format!("probability {p} outside [0, 1]")));
    }
    Ok(net::soft_max_weights(probs, alpha, beta).0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HicemModel {
    net: ConceptNet,
    pub config: TrainConfig,
    pub report: TrainReport,
}

impl HicemModel {
    pub fn from_net(net: ConceptNet, config: TrainConfig, report: TrainReport) -> Self {
        Self {
            net,
            config,
            report,
        }
    }

    pub fn net(&self) -> &ConceptNet {
        &self.net
    }

    pub fn into_net(self) -> ConceptNet {
        self.net
    }

    pub fn hierarchy(&self) -> &ConceptHierarchy {
        &self.net().hierarchy
    }
}

/// Runs one sub-concept module on a preliminary embedding `c_pre`.
pub fn subconcepts_module_forward(
    model: &HicemModel,
    parent: usize,
    polarity: Polarity,
    c_pre: &[f64],
) -> Result<SideState> {
    let net = model.net();
    if parent >= net.k() {
        return Err(Error::Lookup {
            kind: "concept",
            name: parent.to_string(),
        });
    }
    if net.hierarchy.sub_count(parent, polarity) == 0 {
        return Err(Error::param(format!(
            "`{}` has no {} sub-concepts",
            net.hierarchy.concepts()[parent].name,
            polarity.as_str()
        )));
    }
    if c_pre.len() != net.m() {
        return Err(Error::dim(format!("embedding width {} but m = {}", c_pre.len(), net.m())));
    }
    Ok(net.side_forward(parent, polarity, c_pre, &Forcing::none(net)))
}

/// Trains with the top-level labels plus every sub-concept label column.
pub fn hicem_train(hierarchy: &ConceptHierarchy, data: &Dataset, config: &TrainConfig) -> Result<HicemModel> {
    let (net, report) = train_network(hierarchy, data, config)?;
    Ok(HicemModel::from_net(net, config.clone(), report))
}

pub fn hicem_forward(model: &HicemModel, h: &[f64]) -> Result<Forward> {
    let net = model.net();
    net.forward(h, &Forcing::none(net))
}

pub fn hicem_intervene(model: &HicemModel, h: &[f64], interventions: &[Intervention]) -> Result<Forward> {
    let net = model.net();
    net.forward(h, &net.compile(interventions)?)
}

pub fn hicem_intervene_top(model: &HicemModel, h: &[f64], spec: &[(&str, bool)]) -> Result<Forward> {
    intervene_top(model.net(), h, spec)
}

pub fn hicem_intervene_sub(
    model: &HicemModel,
    h: &[f64],
    parent: usize,
    polarity: Polarity,
    index: usize,
    present: bool,
) -> Result<Forward> {
    let sub = SubRef {
        parent,
        polarity,
        index,
    };
    hicem_intervene(model, h, &[Intervention::Sub { sub, present }])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cem::{cem_forward, CemModel};
    use crate::net::NetShape;
    use crate::numkit::Parameters;
    use crate::rng::{Seeds, Stream};
    use crate::worlds::TopConcept;

    fn hierarchy() -> ConceptHierarchy {
        ConceptHierarchy::new(vec![
            TopConcept {
                name: "p".into(),
                positive: vec!["p+0".into(), "p+1".into(), "p+2".into()],
                negative: vec!["p-0".into()],
            },
            TopConcept::leaf("q"),
        ])
        .unwrap()
    }

    fn model(h: ConceptHierarchy, seed: u64) -> HicemModel {
        let shape = NetShape {
            n_input: 4,
            backbone_hidden: None,
            m: 3,
            n_classes: 3,
        };
        let net = ConceptNet::init(h, shape, &mut Seeds::new(seed).stream(Stream::Init, 0)).unwrap();
        HicemModel::from_net(net, TrainConfig::default(), TrainReport::default())
    }

    #[test]
    fn soft_max_examples() {
        assert_eq!(soft_max_prob(&[0.5, 0.5]).unwrap(), 0.5);
        assert!((soft_max_prob(&[0.9, 0.1]).unwrap() - 0.9).abs() < 1e-6);
        assert_eq!(soft_max_prob(&[0.37]).unwrap(), 0.37);
        assert!(matches!(soft_max_prob(&[]), Err(Error::Dimension(_))));
        assert!(soft_max_prob(&[1.2]).is_err());
    }

    #[test]
    fn toplevel_examples() {
        assert_eq!(toplevel_prob(1.0, 0.0), 1.0);
        assert_eq!(toplevel_prob(0.5, 0.5), 0.5);
        assert!((toplevel_prob(0.8, 0.3) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn module_rejects_leaf_sides() {
        let m = model(hierarchy(), 1);
        assert!(subconcepts_module_forward(&m, 1, Polarity::Positive, &[0.0; 3]).is_err());
        assert!(subconcepts_module_forward(&m, 0, Polarity::Positive, &[0.0; 2]).is_err());
        let side = subconcepts_module_forward(&m, 0, Polarity::Positive, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(side.sub_embeddings.len(), 3);
        let expected: Vec<f64> = (0..3)
            .map(|d| (0..3).map(|j| side.sub_probs[j] * side.sub_embeddings[j][d]).sum())
            .collect();
        for (a, b) in side.embedding.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(side.prob, soft_max_prob(&side.sub_probs).unwrap());
    }

    #[test]
    fn single_half_sub_gives_half_embedding() {
        let h = ConceptHierarchy::new(vec![TopConcept {
            name: "p".into(),
            positive: vec!["p+0".into()],
            negative: vec![],
        }])
        .unwrap();
        let mut m = model(h, 2);
        let mut net = m.clone().into_net();
        // zero score weights make every sub probability exactly 0.5
        net.params.score.w.fill(0.0);
        net.params.score.b.fill(0.0);
        m = HicemModel::from_net(net, m.config, m.report);
        let side = subconcepts_module_forward(&m, 0, Polarity::Positive, &[1.0, -1.0, 2.0]).unwrap();
        assert_eq!(side.prob, 0.5);
        let half: Vec<f64> = side.sub_embeddings[0].iter().map(|v| 0.5 * v).collect();
        assert_eq!(side.embedding, half);
    }

    #[test]
    fn leaf_hierarchy_matches_cem_bitwise() {
        let h = ConceptHierarchy::leaves(["a", "b"]).unwrap();
        let hm = model(h, 9);
        let cm = CemModel::from_net(hm.net().clone(), TrainConfig::default(), TrainReport::default()).unwrap();
        let x = [0.3, 0.1, -0.4, 2.0];
        assert_eq!(hicem_forward(&hm, &x).unwrap(), cem_forward(&cm, &x).unwrap());
    }

    #[test]
    fn present_sub_collapses_parent_embedding() {
        let m = model(hierarchy(), 4);
        let x = [0.5, -0.2, 0.9, 0.1];
        let plain = hicem_forward(&m, &x).unwrap();
        let fwd = hicem_intervene_sub(&m, &x, 0, Polarity::Positive, 1, true).unwrap();
        let st = &fwd.concepts[0];
        assert_eq!(st.embedding, plain.concepts[0].sides[0].sub_embeddings[1]);
        assert_eq!(st.prob, 1.0);
        assert_eq!(st.sides[0].sub_probs, vec![0.0, 1.0, 0.0]);
        let neg = hicem_intervene_sub(&m, &x, 0, Polarity::Negative, 0, true).unwrap();
        assert_eq!(neg.concepts[0].embedding, plain.concepts[0].sides[1].sub_embeddings[0]);
        assert_eq!(neg.concepts[0].prob, 0.0);
        assert!(hicem_intervene_sub(&m, &x, 0, Polarity::Negative, 1, true).is_err());
        assert!(hicem_intervene_sub(&m, &x, 1, Polarity::Positive, 0, true).is_err());
    }

    #[test]
    fn absent_on_zero_sub_is_a_no_op() {
        let mut net = model(hierarchy(), 6).into_net();
        // push sub p+2 to probability 0 in floating point
        let ord = net.sub_ordinal(SubRef {
            parent: 0,
            polarity: Polarity::Positive,
            index: 2,
        });
        net.params.subs[ord].w.fill(0.0);
        let dir: Vec<f64> = net.params.score.w.data().to_vec();
        let norm2: f64 = dir.iter().map(|v| v * v).sum();
        for (d, w) in net.params.subs[ord].b.data_mut().iter_mut().zip(&dir) {
            *d = -1e6 * w / norm2;
        }
        let m = HicemModel::from_net(net, TrainConfig::default(), TrainReport::default());
        let x = [0.5, -0.2, 0.9, 0.1];
        let plain = hicem_forward(&m, &x).unwrap();
        assert_eq!(plain.concepts[0].sides[0].sub_probs[2], 0.0);
        let fwd = hicem_intervene_sub(&m, &x, 0, Polarity::Positive, 2, false).unwrap();
        assert_eq!(fwd.logits, plain.logits);
    }

    #[test]
    fn top_intervention_uses_sub_informed_side() {
        let m = model(hierarchy(), 8);
        let x = [0.2, 0.2, -0.3, 0.7];
        let plain = hicem_forward(&m, &x).unwrap();
        let fwd = hicem_intervene_top(&m, &x, &[("p", true)]).unwrap();
        assert_eq!(fwd.concepts[0].embedding, plain.concepts[0].sides[0].embedding);
        assert_eq!(fwd.concepts[0].prob, 1.0);
        assert_eq!(hicem_intervene_top(&m, &x, &[("p", true)]).unwrap(), fwd);
    }

    #[test]
    fn module_permutation_keeps_parent_scalar() {
        let h2 = ConceptHierarchy::new(vec![
            TopConcept {
                name: "p".into(),
                positive: vec!["p+2".into(), "p+0".into(), "p+1".into()],
                negative: vec!["p-0".into()],
            },
            TopConcept::leaf("q"),
        ])
        .unwrap();
        let m = model(hierarchy(), 3);
        let mut net2 = ConceptNet::from_parts(h2, m.net().shape.clone(), m.net().params.clone()).unwrap();
        net2.params.subs.swap(0, 2);
        net2.params.subs.swap(1, 2);
        // net2 positive subs now hold generators [2, 0, 1]
        let m2 = HicemModel::from_net(net2, TrainConfig::default(), TrainReport::default());
        let c = [0.4, -0.6, 0.8];
        let a = subconcepts_module_forward(&m, 0, Polarity::Positive, &c).unwrap();
        let b = subconcepts_module_forward(&m2, 0, Polarity::Positive, &c).unwrap();
        assert_eq!(b.sub_probs, vec![a.sub_probs[2], a.sub_probs[0], a.sub_probs[1]]);
        assert!((a.prob - b.prob).abs() < 1e-15);
        assert!(m2.net().params.params().len() == m.net().params.params().len());
    }
}
