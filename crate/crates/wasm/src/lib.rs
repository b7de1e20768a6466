//! Browser demo: the soft maximum, one-hot concept splitting, and interventions on a
//! small HiCEM trained in the page.
//!
//! Every export returns a JSON string. The [`demo`] module holds the plain Rust
//! versions so they can be tested off the browser.

use wasm_bindgen::prelude::*;

pub mod demo {
    use hicem_core::api::{render, ApiResponse, Explorer};
    use hicem_core::eval::{match_to_bank, MatchRow, MatchTable};
    use hicem_core::hicem::{hicem_train, soft_max_prob};
    use hicem_core::net::soft_max_weights;
    use hicem_core::pipeline::{attach_sub_labels, hierarchy_from_subs, ServedRun};
    use hicem_core::splitting::{split_records_sae, DiscoveredSubConcept, SplitConfig, SubConceptSource};
    use hicem_core::train::TrainConfig;
    use hicem_core::worlds::{gen_digit_pairs, gen_onehot_world, onehot_hierarchy, Split};
    use serde::Serialize;

    pub const ALPHA: f64 = 200.0;
    pub const BETA: f64 = 100.0;

    #[derive(Serialize)]
    struct SoftMax {
        prob: f64,
        weights: Vec<f64>,
        max: f64,
        mean: f64,
    }

    /// Soft maximum of sub-concept probabilities with its softmax weights, next to
    /// the hard maximum and the mean for comparison.
    pub fn soft_max(probs: &[f64]) -> Result<String, String> {
        let prob = soft_max_prob(probs).map_err(|e| e.to_string())?;
        let (_, _, weights) = soft_max_weights(probs, ALPHA, BETA);
        Ok(render(&SoftMax {
            prob,
            weights,
            max: probs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: probs.iter().sum::<f64>() / probs.len() as f64,
        }))
    }

    #[derive(Serialize)]
    struct OneHotResult {
        rows: MatchTable,
        matched: usize,
        bank_entries: usize,
        mean_auc: f64,
    }

    /// SAE splitting on idealised one-hot embeddings, matched back to the true
    /// sub-concepts.
    pub fn onehot_split(seed: u64, parents: usize, subs: usize, n: usize, epochs: usize) -> Result<String, String> {
        let err = |e: hicem_core::Error| e.to_string();
        let h = onehot_hierarchy(parents, subs).map_err(err)?;
        let world = gen_onehot_world(seed, &h, n).map_err(err)?;
        let mut cfg = SplitConfig {
            seed,
            ..Default::default()
        };
        cfg.sae.dict_size = 32;
        cfg.sae.batch_size = 128;
        cfg.sae.epochs = epochs;
        let mut found = Vec::new();
        for (p, records) in world.records.iter().enumerate() {
            let out = split_records_sae(p, &h.concepts()[p].name, records, &cfg).map_err(err)?;
            found.extend(out.subs);
        }
        let m = match_to_bank(&found, &world.bank).map_err(err)?;
        let aucs: Vec<f64> = m.table.rows.iter().filter_map(|r| r.match_auc.filter(|_| r.sub.is_some())).collect();
        Ok(render(&OneHotResult {
            matched: aucs.len(),
            bank_entries: m.table.rows.len(),
            mean_auc: if aucs.is_empty() { 0.0 } else { aucs.iter().sum::<f64>() / aucs.len() as f64 },
            rows: m.table,
        }))
    }

    /// A HiCEM on a small DigitPairs world whose sub-concepts are the digit values
    /// themselves, served through the same payloads as the HTTP explorer.
    pub struct InterventionDemo {
        explorer: Explorer,
    }

    impl InterventionDemo {
        pub fn train(seed: u64, n: usize, epochs: usize) -> Result<Self, String> {
            let err = |e: hicem_core::Error| e.to_string();
            let world = gen_digit_pairs(seed, n, 0.3, 8).map_err(err)?;
            let train_rows = world.dataset.rows_in(Split::Train);
            let subs: Vec<DiscoveredSubConcept> = world
                .bank
                .entries
                .iter()
                .map(|e| {
                    let parent = world.hierarchy.index_of(&e.parent).expect("bank parents are concepts");
                    let labels: Vec<bool> = train_rows.iter().map(|&r| e.column[r]).collect();
                    DiscoveredSubConcept {
                        id: e.name.clone(),
                        parent,
                        parent_name: e.parent.clone(),
                        polarity: e.polarity,
                        source: SubConceptSource::Merged { ids: vec![e.name.clone()] },
                        rows: train_rows.clone(),
                        activations: labels.iter().map(|&l| f64::from(u8::from(l))).collect(),
                        labels,
                    }
                })
                .collect();
            let table = MatchTable {
                rows: world
                    .bank
                    .entries
                    .iter()
                    .map(|e| MatchRow {
                        bank: e.name.clone(),
                        parent: e.parent.clone(),
                        polarity: e.polarity,
                        sub: Some(e.name.clone()),
                        match_auc: Some(1.0),
                        test_auc: None,
                    })
                    .collect(),
            };
            let hierarchy = hierarchy_from_subs(&world.hierarchy, &subs).map_err(err)?;
            let data = attach_sub_labels(&world.dataset, &hierarchy, &subs);
            let cfg = TrainConfig {
                seed,
                max_epochs: epochs,
                embedding_width: 8,
                batch_size: 128,
                ..Default::default()
            };
            let model = hicem_train(&hierarchy, &data, &cfg).map_err(err)?;
            Ok(Self {
                explorer: Explorer::new(ServedRun {
                    world,
                    model,
                    matched: subs,
                    table,
                }),
            })
        }

        pub fn hierarchy(&self) -> String {
            self.explorer.hierarchy().body
        }

        pub fn samples(&self, offset: usize, limit: usize) -> ApiResponse {
            self.explorer
                .samples(Some("test"), Some(&offset.to_string()), Some(&limit.to_string()))
        }

        pub fn prediction(&self, id: usize) -> ApiResponse {
            self.explorer.prediction(&id.to_string())
        }

        pub fn intervene(&self, id: usize, body: &str) -> ApiResponse {
            self.explorer.intervene(&id.to_string(), body.as_bytes())
        }
    }
}

fn js(r: Result<String, String>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e))
}

fn api(r: hicem_core::api::ApiResponse) -> Result<String, JsError> {
    if r.status == 200 {
        Ok(r.body)
    } else {
        Err(JsError::new(&r.body))
    }
}

/// JSON `{prob, weights, max, mean}` for the given sub-concept probabilities.
#[wasm_bindgen(js_name = softMax)]
pub fn soft_max(probs: &[f64]) -> Result<String, JsError> {
    js(demo::soft_max(probs))
}

/// JSON match table of one-hot SAE splitting.
#[wasm_bindgen(js_name = oneHotSplit)]
pub fn onehot_split(seed: u32, parents: usize, subs: usize, n: usize, epochs: usize) -> Result<String, JsError> {
    js(demo::onehot_split(u64::from(seed), parents, subs, n, epochs))
}

#[wasm_bindgen]
pub struct InterventionDemo(demo::InterventionDemo);

#[wasm_bindgen]
impl InterventionDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, n: usize, epochs: usize) -> Result<InterventionDemo, JsError> {
        demo::InterventionDemo::train(u64::from(seed), n, epochs)
            .map(InterventionDemo)
            .map_err(|e| JsError::new(&e))
    }

    pub fn hierarchy(&self) -> String {
        self.0.hierarchy()
    }

    pub fn samples(&self, offset: usize, limit: usize) -> Result<String, JsError> {
        api(self.0.samples(offset, limit))
    }

    pub fn prediction(&self, id: usize) -> Result<String, JsError> {
        api(self.0.prediction(id))
    }

    pub fn intervene(&self, id: usize, body: &str) -> Result<String, JsError> {
        api(self.0.intervene(id, body))
    }
}
