use hicem_core::container::{Block, Container, Kind};
use hicem_core::eval::{intervention_curve, match_to_bank, roc_auc, CurveConfig, InterventionKind, MatchTable};
use hicem_core::net::{mix, soft_max_weights, ConceptNet, NetShape};
use hicem_core::numkit::Matrix;
use hicem_core::rng::{Seeds, Stream};
use hicem_core::sae::batch_topk_select;
use hicem_core::splitting::{DiscoveredSubConcept, SubConceptSource};
use hicem_core::worlds::{gen_digit_pairs, gen_onehot_world, onehot_hierarchy, Polarity};
use proptest::prelude::*;
use serde_json::json;

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec((0u8..10).prop_map(|v| f64::from(v) / 3.0 - 1.0), n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(s, mut l)| {
                l[0] = true;
                l[1] = false;
                (s, l)
            })
    })
}

proptest! {
    #[test]
    fn auc_ignores_monotone_transforms((scores, labels) in scored_labels()) {
        let base = roc_auc(&scores, &labels).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|s| s * s * s + 2.0 * s).collect();
        let shifted: Vec<f64> = scores.iter().map(|s| 5.0 * s - 3.0).collect();
        prop_assert!((roc_auc(&cubed, &labels).unwrap() - base).abs() < 1e-12);
        prop_assert!((roc_auc(&shifted, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn auc_of_negated_scores_is_complement((scores, labels) in scored_labels()) {
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_keeps_the_largest_positive_entries(
        rows in 1usize..6,
        cols in 1usize..8,
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::Rng as _;
        let mut rng = Seeds::new(seed).stream(Stream::World, 0);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pre = Matrix::from_vec(rows, cols, data).unwrap();
        let out = batch_topk_select(&pre, k).unwrap();
        let kept: Vec<f64> = out.data().iter().copied().filter(|&v| v != 0.0).collect();
        prop_assert!(kept.len() <= rows * k);
        let smallest_kept = kept.iter().copied().fold(f64::INFINITY, f64::min);
        for (i, &v) in pre.data().iter().enumerate() {
            let o = out.data()[i];
            prop_assert!(o == 0.0 || o == v);
            if o == 0.0 && v > 0.0 {
                prop_assert!(kept.len() == rows * k && v <= smallest_kept);
            }
        }
    }

    #[test]
    fn soft_max_stays_within_range(probs in prop::collection::vec(0.0f64..=1.0, 1..10)) {
        let (value, _, weights) = soft_max_weights(&probs, 200.0, 100.0);
        let lo = probs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo <= value && value <= hi);
        prop_assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mix_endpoints_are_exact(a in prop::collection::vec(-5.0f64..5.0, 4), b in prop::collection::vec(-5.0f64..5.0, 4)) {
        prop_assert_eq!(mix(1.0, &a, &b), a.clone());
        prop_assert_eq!(mix(0.0, &a, &b), b);
    }

    #[test]
    fn container_round_trips(
        floats in prop::collection::vec(-1e300f64..1e300, 0..50),
        ints in prop::collection::vec(any::<u32>(), 0..50),
        bits in prop::collection::vec(any::<bool>(), 0..70),
        bytes in prop::collection::vec(any::<u8>(), 0..50),
        note in "[a-z ]{0,20}",
    ) {
        let mut c = Container::new(Kind::Sae, json!({ "note": note }));
        c.push("f", Block::F64(floats));
        c.push("u", Block::U32(ints));
        c.push("b", Block::Bits(bits));
        c.push("r", Block::Bytes(bytes));
        let bytes = c.to_bytes();
        prop_assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matching_never_crosses_parent_or_polarity(seed in any::<u64>(), n_found in 1usize..12) {
        use rand::Rng as _;
        let h = onehot_hierarchy(2, 2).unwrap();
        let world = gen_onehot_world(seed, &h, 300).unwrap();
        let mut rng = Seeds::new(seed).stream(Stream::World, 9);
        let rows: Vec<usize> = (0..300).collect();
        let found: Vec<DiscoveredSubConcept> = (0..n_found)
            .map(|i| {
                let parent = rng.random_range(0..2);
                let polarity = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
                // copy a random bank column, noised, so some candidates clear the threshold
                let col = &world.bank.entries[rng.random_range(0..world.bank.entries.len())].column;
                let labels: Vec<bool> = col.iter().map(|&v| v ^ rng.random_bool(0.05)).collect();
                DiscoveredSubConcept {
                    id: format!("s{i}"),
                    parent,
                    parent_name: h.concepts()[parent].name.clone(),
                    polarity,
                    source: SubConceptSource::Sae { feature: i, theta: 0.0 },
                    rows: rows.clone(),
                    activations: labels.iter().map(|&l| f64::from(u8::from(l))).collect(),
                    labels,
                }
            })
            .collect();
        let m = match_to_bank(&found, &world.bank).unwrap();
        for row in m.table.matched() {
            let sub = m.subs.iter().find(|s| Some(&s.id) == row.sub.as_ref()).unwrap();
            prop_assert_eq!(&sub.parent_name, &row.parent);
            prop_assert_eq!(sub.polarity, row.polarity);
            let parts: Vec<String> = match &sub.source {
                SubConceptSource::Merged { ids } => ids.clone(),
                _ => vec![sub.id.clone()],
            };
            for id in parts {
                let original = found.iter().find(|f| f.id == id).unwrap();
                prop_assert_eq!(&original.parent_name, &row.parent);
                prop_assert_eq!(original.polarity, row.polarity);
            }
        }
    }

    #[test]
    fn curves_are_reproducible(seed in any::<u64>(), trials in 1usize..4) {
        let world = gen_digit_pairs(seed, 300, 0.3, 4).unwrap();
        let shape = NetShape { n_input: world.dataset.n_hidden(), backbone_hidden: None, m: 4, n_classes: world.dataset.n_classes };
        let net = ConceptNet::init(world.hierarchy.flattened(), shape, &mut Seeds::new(seed).stream(Stream::Init, 0)).unwrap();
        let cfg = CurveConfig { trials, seed, ..Default::default() };
        let table = MatchTable::default();
        let a = intervention_curve(&net, &world.dataset, &world.bank, &table, InterventionKind::TopLevel, &cfg).unwrap();
        let b = intervention_curve(&net, &world.dataset, &world.bank, &table, InterventionKind::TopLevel, &cfg).unwrap();
        prop_assert_eq!(a.points.len(), net.k() + 1);
        prop_assert_eq!(a, b);
    }
}
