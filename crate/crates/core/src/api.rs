//! JSON payloads served to the intervention explorer.
//!
//! Everything here is transport-free: each call returns a status code and the exact
//! response body, so the HTTP server and the command line produce the same bytes.

use std::collections::BTreeMap;

use serde::Serialize;
use serde_json::Value;

use crate::error::Error;
use crate::eval::MatchTable;
use crate::hicem::{hicem_intervene, HicemModel};
use crate::net::{ConceptNet, Forward, Intervention};
use crate::pipeline::ServedRun;
use crate::splitting::{prototypes, DiscoveredSubConcept};
use crate::worlds::{Polarity, Split, SubRef, World};

pub const DEFAULT_SAMPLE_LIMIT: usize = 50;
pub const MAX_SAMPLE_LIMIT: usize = 1000;
pub const DEFAULT_PROTOTYPES: usize = 10;
/// Prototype ids listed per sub-concept in the hierarchy payload.
const TREE_PROTOTYPES: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    pub fn bad_request(field: impl Into<String>, error: impl Into<String>) -> Self {
        Self {
            status: 400,
            error: error.into(),
            field: Some(field.into()),
        }
    }

    pub fn not_found(error: impl Into<String>) -> Self {
        Self {
            status: 404,
            error: error.into(),
            field: None,
        }
    }

    fn internal(e: Error) -> Self {
        Self {
            status: 500,
            error: e.to_string(),
            field: None,
        }
    }
}

/// Status code and body of one API call.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: String,
}

/// The one JSON encoding used for every response body.
pub fn render<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("payload serializes");
    s.push('\n');
    s
}

fn respond<T: Serialize>(r: Result<T, ApiError>) -> ApiResponse {
    match r {
        Ok(v) => ApiResponse {
            status: 200,
            body: render(&v),
        },
        Err(e) => ApiResponse {
            status: e.status,
            body: render(&e),
        },
    }
}

/// Error response for problems found outside the explorer (routing, extraction).
pub fn error_response(e: ApiError) -> ApiResponse {
    respond::<()>(Err(e))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubNode {
    pub id: String,
    /// Position among the parent's subs of this polarity.
    pub index: usize,
    /// Position among all sub-concepts of the model; accepted wherever an id is.
    pub ordinal: usize,
    pub matched: Vec<String>,
    pub prototypes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConceptNode {
    pub index: usize,
    pub name: String,
    pub leaf: bool,
    pub positive: Vec<SubNode>,
    pub negative: Vec<SubNode>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HierarchyPayload {
    pub concepts: Vec<ConceptNode>,
    pub n_classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleRow {
    pub id: usize,
    pub task: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SamplesPayload {
    pub split: &'static str,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub samples: Vec<SampleRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubPrediction {
    pub id: String,
    pub prob: f64,
    pub predicted: f64,
    pub intervened: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConceptPrediction {
    pub name: String,
    pub prob: f64,
    /// The model's own probability, before any intervention on this concept.
    pub predicted: f64,
    pub intervened: bool,
    pub truth: bool,
    pub positive: Vec<SubPrediction>,
    pub negative: Vec<SubPrediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskPrediction {
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub truth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionPayload {
    pub sample: usize,
    pub split: &'static str,
    /// Bank entries true for this sample.
    pub bank: Vec<String>,
    pub concepts: Vec<ConceptPrediction>,
    pub task: TaskPrediction,
    pub interventions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prototype {
    pub sample: usize,
    pub activation: f64,
    /// Ground truth of the bank entries this sub-concept was matched to.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub bank: BTreeMap<String, bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PrototypesPayload {
    pub id: String,
    pub parent: String,
    pub polarity: Polarity,
    pub support: usize,
    pub prototypes: Vec<Prototype>,
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

/// Read-only view over a finished run. Every request is an independent forward pass.
pub struct Explorer {
    world: World,
    model: HicemModel,
    table: MatchTable,
    /// Matched sub-concepts by id.
    subs: BTreeMap<String, DiscoveredSubConcept>,
}

impl Explorer {
    pub fn new(run: ServedRun) -> Self {
        let subs = run.matched.into_iter().map(|s| (s.id.clone(), s)).collect();
        Self {
            world: run.world,
            model: run.model,
            table: run.table,
            subs,
        }
    }

    fn net(&self) -> &ConceptNet {
        self.model.net()
    }

    fn matched_bank(&self, id: &str) -> Vec<String> {
        self.table
            .rows
            .iter()
            .filter(|r| r.sub.as_deref() == Some(id))
            .map(|r| r.bank.clone())
            .collect()
    }

    pub fn hierarchy(&self) -> ApiResponse {
        respond(Ok(self.hierarchy_payload()))
    }

    pub fn hierarchy_payload(&self) -> HierarchyPayload {
        let h = &self.net().hierarchy;
        let refs = h.sub_refs();
        let node = |sub: SubRef| {
            let id = h.sub_name(sub).to_string();
            SubNode {
                index: sub.index,
                ordinal: refs.iter().position(|r| *r == sub).expect("listed"),
                matched: self.matched_bank(&id),
                prototypes: self
                    .subs
                    .get(&id)
                    .map(|s| prototypes(s, TREE_PROTOTYPES).into_iter().map(|(r, _)| r).collect())
                    .unwrap_or_default(),
                id,
            }
        };
        let concepts = h
            .concepts()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let side = |polarity| {
                    refs.iter()
                        .filter(|r| r.parent == i && r.polarity == polarity)
                        .map(|&r| node(r))
                        .collect()
                };
                ConceptNode {
                    index: i,
                    name: c.name.clone(),
                    leaf: c.is_leaf(),
                    positive: side(Polarity::Positive),
                    negative: side(Polarity::Negative),
                }
            })
            .collect();
        HierarchyPayload {
            concepts,
            n_classes: self.net().shape.n_classes,
        }
    }

    /// `split` defaults to test, `offset` to 0, `limit` to [`DEFAULT_SAMPLE_LIMIT`].
    pub fn samples(&self, split: Option<&str>, offset: Option<&str>, limit: Option<&str>) -> ApiResponse {
        respond(self.samples_payload(split, offset, limit))
    }

    fn samples_payload(
        &self,
        split: Option<&str>,
        offset: Option<&str>,
        limit: Option<&str>,
    ) -> Result<SamplesPayload, ApiError> {
        let split = match split {
            None => Split::Test,
            Some(s) => Split::parse(s).ok_or_else(|| ApiError::bad_request("split", format!("unknown split `{s}`")))?,
        };
        let offset = parse_count("offset", offset, 0)?;
        let limit = parse_count("limit", limit, DEFAULT_SAMPLE_LIMIT)?;
        if limit == 0 || limit > MAX_SAMPLE_LIMIT {
            return Err(ApiError::bad_request(
                "limit",
                format!("limit must lie in 1..={MAX_SAMPLE_LIMIT}"),
            ));
        }
        let rows = self.world.dataset.rows_in(split);
        let samples = rows
            .iter()
            .skip(offset)
            .take(limit)
            .map(|&id| SampleRow {
                id,
                task: self.world.dataset.tasks[id],
            })
            .collect();
        Ok(SamplesPayload {
            split: split_name(split),
            total: rows.len(),
            offset,
            limit,
            samples,
        })
    }

    fn sample_id(&self, id: &str) -> Result<usize, ApiError> {
        let row: usize = id
            .parse()
            .map_err(|_| ApiError::bad_request("id", format!("sample id `{id}` is not a non-negative integer")))?;
        if row >= self.world.dataset.len() {
            return Err(ApiError::not_found(format!("no sample {row}")));
        }
        Ok(row)
    }

    pub fn prediction(&self, id: &str) -> ApiResponse {
        respond(self.sample_id(id).and_then(|row| self.predict_with(row, &[])))
    }

    /// Applies the interventions in a JSON request body to sample `id`.
    pub fn intervene(&self, id: &str, body: &[u8]) -> ApiResponse {
        respond(self.sample_id(id).and_then(|row| {
            let ivs = self.parse_interventions(body)?;
            self.predict_with(row, &ivs)
        }))
    }

    fn predict_with(&self, row: usize, ivs: &[Intervention]) -> Result<PredictionPayload, ApiError> {
        let x = self.world.dataset.features.row(row);
        let fwd = hicem_intervene(&self.model, x, ivs).map_err(ApiError::internal)?;
        Ok(self.payload(row, &fwd, ivs.len()))
    }

    fn payload(&self, row: usize, fwd: &Forward, n_ivs: usize) -> PredictionPayload {
        let h = &self.net().hierarchy;
        let d = &self.world.dataset;
        let concepts = h
            .concepts()
            .iter()
            .zip(&fwd.concepts)
            .enumerate()
            .map(|(i, (c, state))| {
                let subs = |polarity: Polarity| -> Vec<SubPrediction> {
                    let side = state.side(polarity);
                    c.subs(polarity)
                        .iter()
                        .enumerate()
                        .map(|(j, id)| SubPrediction {
                            id: id.clone(),
                            prob: side.sub_probs[j],
                            predicted: side.sub_predicted[j],
                            intervened: side.sub_forced[j],
                        })
                        .collect()
                };
                ConceptPrediction {
                    name: c.name.clone(),
                    prob: state.prob,
                    predicted: state.predicted,
                    intervened: state.forced,
                    truth: d.concept(row, i),
                    positive: subs(Polarity::Positive),
                    negative: subs(Polarity::Negative),
                }
            })
            .collect();
        PredictionPayload {
            sample: row,
            split: split_name(d.splits[row]),
            bank: self.world.bank.active_names(row).into_iter().map(str::to_string).collect(),
            concepts,
            task: TaskPrediction {
                probs: fwd.task_probs.clone(),
                predicted: fwd.predicted_class(),
                truth: d.tasks[row],
            },
            interventions: n_ivs,
        }
    }

    /// Validates an intervention request body:
    /// `{"interventions": [{"level": "top"|"sub", "concept", "polarity"?, "sub"?, "present"}]}`.
    ///
    /// `concept` is a name or index. For sub-concepts, `sub` is an id, or an index
    /// within the parent's subs of the given `polarity`.
    pub fn parse_interventions(&self, body: &[u8]) -> Result<Vec<Intervention>, ApiError> {
        let v: Value = serde_json::from_slice(body).map_err(|e| ApiError::bad_request("body", format!("invalid JSON: {e}")))?;
        let obj = v
            .as_object()
            .ok_or_else(|| ApiError::bad_request("body", "expected a JSON object"))?;
        if let Some(k) = obj.keys().find(|k| *k != "interventions") {
            return Err(ApiError::bad_request(k.as_str(), "unknown field"));
        }
        let list = obj
            .get("interventions")
            .ok_or_else(|| ApiError::bad_request("interventions", "missing field"))?
            .as_array()
            .ok_or_else(|| ApiError::bad_request("interventions", "expected an array"))?;
        list.iter()
            .enumerate()
            .map(|(i, item)| self.parse_one(&format!("interventions[{i}]"), item))
            .collect()
    }

    fn parse_one(&self, at: &str, item: &Value) -> Result<Intervention, ApiError> {
        let f = |name: &str| format!("{at}.{name}");
        let obj = item
            .as_object()
            .ok_or_else(|| ApiError::bad_request(at, "expected an object"))?;
        const KNOWN: [&str; 5] = ["level", "concept", "polarity", "sub", "present"];
        if let Some(k) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            return Err(ApiError::bad_request(f(k), "unknown field"));
        }
        let present = obj
            .get("present")
            .ok_or_else(|| ApiError::bad_request(f("present"), "missing field"))?
            .as_bool()
            .ok_or_else(|| ApiError::bad_request(f("present"), "expected true or false"))?;
        let h = &self.net().hierarchy;
        let concept = match obj.get("concept") {
            None => return Err(ApiError::bad_request(f("concept"), "missing field")),
            Some(Value::String(name)) => h
                .index_of(name)
                .map_err(|_| ApiError::bad_request(f("concept"), format!("unknown concept `{name}`")))?,
            Some(v) => match v.as_u64() {
                Some(i) if (i as usize) < h.len() => i as usize,
                _ => return Err(ApiError::bad_request(f("concept"), "expected a concept name or index")),
            },
        };
        let polarity = match obj.get("polarity") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(
                Polarity::parse(s)
                    .ok_or_else(|| ApiError::bad_request(f("polarity"), format!("unknown polarity `{s}`")))?,
            ),
            Some(_) => return Err(ApiError::bad_request(f("polarity"), "expected \"positive\" or \"negative\"")),
        };
        match obj.get("level").and_then(Value::as_str) {
            Some("top") => {
                if obj.get("sub").is_some_and(|v| !v.is_null()) {
                    return Err(ApiError::bad_request(f("sub"), "not allowed on a top-level intervention"));
                }
                Ok(Intervention::Top { concept, present })
            }
            Some("sub") => {
                let sub = match obj.get("sub") {
                    None | Some(Value::Null) => return Err(ApiError::bad_request(f("sub"), "missing field")),
                    Some(Value::String(id)) => h
                        .find_sub(id)
                        .ok_or_else(|| ApiError::bad_request(f("sub"), format!("unknown sub-concept `{id}`")))?,
                    Some(v) => {
                        let polarity =
                            polarity.ok_or_else(|| ApiError::bad_request(f("polarity"), "required with a sub index"))?;
                        let index = v
                            .as_u64()
                            .ok_or_else(|| ApiError::bad_request(f("sub"), "expected a sub-concept id or index"))?
                            as usize;
                        if index >= h.sub_count(concept, polarity) {
                            return Err(ApiError::bad_request(
                                f("sub"),
                                format!("concept has {} {} sub-concepts", h.sub_count(concept, polarity), polarity.as_str()),
                            ));
                        }
                        SubRef {
                            parent: concept,
                            polarity,
                            index,
                        }
                    }
                };
                if sub.parent != concept {
                    return Err(ApiError::bad_request(f("sub"), "sub-concept belongs to another concept"));
                }
                if polarity.is_some_and(|p| p != sub.polarity) {
                    return Err(ApiError::bad_request(f("polarity"), "does not match the sub-concept"));
                }
                Ok(Intervention::Sub { sub, present })
            }
            Some(other) => Err(ApiError::bad_request(f("level"), format!("unknown level `{other}`"))),
            None => Err(ApiError::bad_request(f("level"), "expected \"top\" or \"sub\"")),
        }
    }

    /// `id` is a sub-concept id or its ordinal from the hierarchy payload.
    pub fn prototypes(&self, id: &str, n: Option<&str>) -> ApiResponse {
        respond(self.prototypes_payload(id, n))
    }

    fn prototypes_payload(&self, id: &str, n: Option<&str>) -> Result<PrototypesPayload, ApiError> {
        let n = parse_count("n", n, DEFAULT_PROTOTYPES)?;
        let h = &self.net().hierarchy;
        let sub_ref = h
            .find_sub(id)
            .or_else(|| id.parse::<usize>().ok().and_then(|o| h.sub_refs().get(o).copied()))
            .ok_or_else(|| ApiError::not_found(format!("no sub-concept `{id}`")))?;
        let name = h.sub_name(sub_ref);
        let bank = self.matched_bank(name);
        let protos = match self.subs.get(name) {
            Some(s) => prototypes(s, n),
            None => Vec::new(),
        };
        Ok(PrototypesPayload {
            id: name.to_string(),
            parent: h.concepts()[sub_ref.parent].name.clone(),
            polarity: sub_ref.polarity,
            support: self.subs.get(name).map_or(0, DiscoveredSubConcept::support),
            prototypes: protos
                .into_iter()
                .map(|(sample, activation)| Prototype {
                    sample,
                    activation,
                    bank: bank
                        .iter()
                        .filter_map(|b| Some((b.clone(), self.world.bank.get(b)?.column[sample])))
                        .collect(),
                })
                .collect(),
        })
    }
}

fn parse_count(field: &str, v: Option<&str>, default: usize) -> Result<usize, ApiError> {
    match v {
        None => Ok(default),
        Some(s) => s
            .parse()
            .map_err(|_| ApiError::bad_request(field, format!("`{s}` is not a non-negative integer"))),
    }
}
