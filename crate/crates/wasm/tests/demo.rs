use hicem_wasm::demo::{onehot_split, soft_max, InterventionDemo};
use serde_json::{json, Value};

#[test]
fn soft_max_sits_between_mean_and_max() {
    let v: Value = serde_json::from_str(&soft_max(&[0.9, 0.2, 0.1]).unwrap()).unwrap();
    let p = v["prob"].as_f64().unwrap();
    assert!(p <= 0.9 && p > v["mean"].as_f64().unwrap());
    let w: f64 = v["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((w - 1.0).abs() < 1e-12);
    assert!(soft_max(&[]).is_err());
    assert!(soft_max(&[1.5]).is_err());
}

#[test]
fn onehot_demo_recovers_subconcepts() {
    let v: Value = serde_json::from_str(&onehot_split(0, 2, 2, 1200, 60).unwrap()).unwrap();
    assert_eq!(v["bank_entries"], 8);
    assert_eq!(v["matched"], 8);
    assert!(v["mean_auc"].as_f64().unwrap() > 0.99);
}

#[test]
fn intervention_demo_follows_sub_concept_semantics() {
    let demo = InterventionDemo::train(0, 600, 5).unwrap();
    let h: Value = serde_json::from_str(&demo.hierarchy()).unwrap();
    assert_eq!(h["concepts"][0]["positive"].as_array().unwrap().len(), 3);
    let s: Value = serde_json::from_str(&demo.samples(0, 3).unwrap_body()).unwrap();
    let id = s["samples"][0]["id"].as_u64().unwrap() as usize;
    let body = json!({"interventions": [{"level": "sub", "concept": "digit1>3", "sub": "digit1 is 5", "present": true}]});
    let r = demo.intervene(id, &body.to_string());
    assert_eq!(r.status, 200);
    let p: Value = serde_json::from_str(&r.body).unwrap();
    let c = &p["concepts"][0];
    assert_eq!(c["prob"], 1.0);
    let probs: Vec<f64> = c["positive"].as_array().unwrap().iter().map(|s| s["prob"].as_f64().unwrap()).collect();
    assert_eq!(probs, [0.0, 1.0, 0.0]);
    assert_eq!(demo.intervene(id, "{}").status, 400);
    assert_eq!(demo.prediction(1 << 20).status, 404);
}

trait Body {
    fn unwrap_body(self) -> String;
}

impl Body for hicem_core::api::ApiResponse {
    fn unwrap_body(self) -> String {
        assert_eq!(self.status, 200, "{}", self.body);
        self.body
    }
}
