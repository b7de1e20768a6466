//! Run orchestration: gen, CEM, split, match, HiCEM, eval, curves, report.
//!
//! Every stage writes its artifacts into one directory. Each artifact records the
//! SHA-256 of the files and config sections it was built from; a stage whose
//! recorded inputs still match is loaded instead of recomputed, so a run resumes
//! from whatever is complete and valid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cem::{cem_train, CemModel};
use crate::config::{RunConfig, SplitVariant, WorldKind};
use crate::container::{self, Container, Kind};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_model, intervention_curve, match_to_bank, with_test_auc, InterventionCurve, InterventionKind, MatchTable,
    Matching, ModelReport,
};
use crate::hicem::{hicem_train, HicemModel};
use crate::splitting::{
    split_records_clustering, split_records_sae, training_records, write_labels_tsv, DiscoveredSubConcept,
};
use crate::worlds::{ConceptHierarchy, Dataset, Polarity, Split, SubLabelColumn, TopConcept, World};

/// Version of every JSON artifact layout written here.
pub const SCHEMA_VERSION: u32 = 1;

pub mod files {
    pub const WORLD: &str = "world.hcc";
    pub const CEM: &str = "cem.hcc";
    pub const SPLIT: &str = "split.hcc";
    pub const SPLIT_SUMMARY: &str = "split.json";
    pub const LABELS_TSV: &str = "labels.tsv";
    pub const MATCHED: &str = "matched.hcc";
    pub const MATCH_TABLE: &str = "match.json";
    pub const HICEM: &str = "hicem.hcc";
    pub const EVAL: &str = "eval.json";
    pub const CURVES: &str = "curves.json";
    pub const REPORT: &str = "report.json";
}

/// Top-level hierarchy extended with `subs` (names are the sub-concept ids), in the
/// order given.
pub fn hierarchy_from_subs(base: &ConceptHierarchy, subs: &[DiscoveredSubConcept]) -> Result<ConceptHierarchy> {
    let concepts = base
        .concepts()
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let pick = |p: Polarity| -> Vec<String> {
                subs.iter()
                    .filter(|s| s.parent == i && s.polarity == p)
                    .map(|s| s.id.clone())
                    .collect()
            };
            TopConcept {
                name: c.name.clone(),
                positive: pick(Polarity::Positive),
                negative: pick(Polarity::Negative),
            }
        })
        .collect();
    ConceptHierarchy::new(concepts)
}

/// Copy of `data` carrying one label column per sub-concept of `hierarchy`.
pub fn attach_sub_labels(data: &Dataset, hierarchy: &ConceptHierarchy, subs: &[DiscoveredSubConcept]) -> Dataset {
    let mut out = data.clone();
    out.sub_labels = hierarchy
        .sub_refs()
        .into_iter()
        .filter_map(|r| {
            let name = hierarchy.sub_name(r);
            let s = subs.iter().find(|s| s.id == name)?;
            let mut values = vec![None; data.len()];
            for (&row, &l) in s.rows.iter().zip(&s.labels) {
                values[row] = Some(l);
            }
            Some(SubLabelColumn { sub: r, values })
        })
        .collect();
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_json<T: Serialize>(v: &T) -> String {
    sha256_hex(&serde_json::to_vec(v).expect("config serializes"))
}

/// JSON artifact wrapper: schema version, provenance and a hash of the body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub kind: String,
    pub inputs: BTreeMap<String, String>,
    pub content_sha256: String,
    pub body: T,
}

fn envelope_bytes<T: Serialize>(kind: &str, inputs: &BTreeMap<String, String>, body: &T) -> Vec<u8> {
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        inputs: inputs.clone(),
        content_sha256: hash_json(body),
        body,
    };
    let mut out = serde_json::to_vec_pretty(&env).expect("artifact serializes");
    out.push(b'\n');
    out
}

pub fn parse_envelope<T: Serialize + DeserializeOwned>(bytes: &[u8], kind: &str) -> Result<Envelope<T>> {
    let env: Envelope<T> = serde_json::from_slice(bytes).map_err(|e| Error::load(0, e.to_string()))?;
    if env.schema_version != SCHEMA_VERSION {
        return Err(Error::UnsupportedVersion {
            found: env.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    if env.kind != kind {
        return Err(Error::load(0, format!("expected a {kind} artifact, found {}", env.kind)));
    }
    if hash_json(&env.body) != env.content_sha256 {
        return Err(Error::load(0, format!("{kind} artifact content hash mismatch")));
    }
    Ok(env)
}

/// Writes through a temporary file so an interrupted write never leaves a
/// half-written artifact under the final name.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<String> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(bytes))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn inputs<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// A container on disk whose recorded inputs equal `want`, with its file hash.
fn fresh_container(path: &Path, want: &BTreeMap<String, String>) -> Option<(Container, String)> {
    let bytes = std::fs::read(path).ok()?;
    let c = Container::from_bytes(&bytes).ok()?;
    (c.inputs().as_ref() == Some(want)).then(|| (c, sha256_hex(&bytes)))
}

fn fresh_json<T: Serialize + DeserializeOwned>(
    path: &Path,
    kind: &str,
    want: &BTreeMap<String, String>,
) -> Option<(T, String)> {
    let bytes = std::fs::read(path).ok()?;
    let env = parse_envelope::<T>(&bytes, kind).ok()?;
    (env.inputs == *want).then(|| (env.body, sha256_hex(&bytes)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SaeSummary {
    pub final_mse: f64,
    pub dead_features: usize,
    pub resampled: usize,
    pub theta: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub n_clusters: usize,
    pub silhouette: Vec<(usize, f64)>,
    pub clipped: bool,
}

/// Splitting outcome for one (concept, polarity).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub concept: String,
    pub polarity: Polarity,
    pub partition_rows: usize,
    pub discovered: usize,
    pub skipped: Option<String>,
    pub below_support: usize,
    pub sae: Option<SaeSummary>,
    pub clusters: Option<ClusterSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub cem: ModelReport,
    pub hicem: ModelReport,
    /// Match table with the HiCEM's test AUC filled in.
    pub match_table: MatchTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub cem_top: InterventionCurve,
    pub hicem_top: InterventionCurve,
    pub hicem_sub: InterventionCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSummary {
    pub kind: WorldKind,
    pub rows: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub concepts: Vec<String>,
    pub bank_entries: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
}

/// The run report. Contains nothing time- or path-dependent, so identical configs
/// give byte-identical reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config: RunConfig,
    pub world: WorldSummary,
    pub cem_training: TrainingSummary,
    pub hicem_training: TrainingSummary,
    pub cem: ModelReport,
    pub hicem: ModelReport,
    pub split: Vec<SplitSummary>,
    pub discovered: usize,
    pub matched_bank_entries: usize,
    pub match_table: MatchTable,
    pub curves: Curves,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageEvent {
    pub stage: &'static str,
    pub reused: bool,
}

#[derive(Clone, Debug)]
struct SplitArtifact {
    subs: Vec<DiscoveredSubConcept>,
    summary: Vec<SplitSummary>,
}

/// A staged run over one artifact directory.
pub struct Pipeline {
    config: RunConfig,
    dir: PathBuf,
    events: Vec<StageEvent>,
    world: Option<(World, String)>,
    cem: Option<(CemModel, String)>,
    split: Option<(SplitArtifact, String)>,
    matching: Option<(Matching, String, String)>,
    hicem: Option<(HicemModel, String)>,
    eval: Option<(EvalSummary, String)>,
    curves: Option<(Curves, String)>,
    report: Option<(Report, String)>,
}

impl Pipeline {
    /// Validates `config` and prepares its artifact directory.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let config = config.resolved();
        let dir = config.artifacts.clone();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            config,
            dir,
            events: Vec::new(),
            world: None,
            cem: None,
            split: None,
            matching: None,
            hicem: None,
            eval: None,
            curves: None,
            report: None,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Stages run or reused so far, in order.
    pub fn events(&self) -> &[StageEvent] {
        &self.events
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn note(&mut self, stage: &'static str, reused: bool) {
        log::info!("{stage}: {}", if reused { "up to date" } else { "done" });
        self.events.push(StageEvent { stage, reused });
    }

    /// The config as hashed into the report: the artifact location is not part of
    /// what a run computes.
    fn portable_config(&self) -> RunConfig {
        RunConfig {
            artifacts: PathBuf::new(),
            ..self.config.clone()
        }
    }

    pub fn world(&mut self) -> Result<&World> {
        self.ensure_world().map_err(|e| e.in_stage("gen"))?;
        Ok(&self.world.as_ref().expect("ensured").0)
    }

    fn ensure_world(&mut self) -> Result<()> {
        if self.world.is_some() {
            return Ok(());
        }
        let want = inputs([("config.world", &hash_json(&(self.config.seed, &self.config.world)))]);
        let path = self.path(files::WORLD);
        if let Some((c, hash)) = fresh_container(&path, &want) {
            self.world = Some((container::world_from_container(&c)?, hash));
            self.note("gen", true);
            return Ok(());
        }
        let world = self.config.world.generate(self.config.seed)?;
        let hash = write_atomic(&path, &container::world_to_container(&world).with_inputs(&want).to_bytes())?;
        self.world = Some((world, hash));
        self.note("gen", false);
        Ok(())
    }

    pub fn cem(&mut self) -> Result<&CemModel> {
        self.ensure_world().map_err(|e| e.in_stage("gen"))?;
        self.ensure_cem().map_err(|e| e.in_stage("train-cem"))?;
        Ok(&self.cem.as_ref().expect("ensured").0)
    }

    fn ensure_cem(&mut self) -> Result<()> {
        if self.cem.is_some() {
            return Ok(());
        }
        let (world, world_hash) = self.world.as_ref().expect("world first");
        let want = inputs([("world", world_hash), ("config.cem", &hash_json(&self.config.cem))]);
        let path = self.path(files::CEM);
        if let Some((c, hash)) = fresh_container(&path, &want) {
            let (net, config, report) = container::net_from_container(&c, Kind::Cem)?;
            self.cem = Some((CemModel::from_net(net, config, report)?, hash));
            self.note("train-cem", true);
            return Ok(());
        }
        let model = cem_train(&world.hierarchy, &world.dataset, &self.config.cem)?;
        let c = container::net_to_container(Kind::Cem, model.net(), &model.config, &model.report);
        let hash = write_atomic(&path, &c.with_inputs(&want).to_bytes())?;
        self.cem = Some((model, hash));
        self.note("train-cem", false);
        Ok(())
    }

    /// Discovered sub-concepts of every top-level concept.
    pub fn split(&mut self) -> Result<&[DiscoveredSubConcept]> {
        self.cem()?;
        self.ensure_split().map_err(|e| e.in_stage("split"))?;
        Ok(&self.split.as_ref().expect("ensured").0.subs)
    }

    pub fn split_summary(&mut self) -> Result<&[SplitSummary]> {
        self.split()?;
        Ok(&self.split.as_ref().expect("ensured").0.summary)
    }

    fn ensure_split(&mut self) -> Result<()> {
        if self.split.is_some() {
            return Ok(());
        }
        let (world, world_hash) = self.world.as_ref().expect("world first");
        let (cem, cem_hash) = self.cem.as_ref().expect("cem first");
        let want = inputs([
            ("world", world_hash),
            ("cem", cem_hash),
            ("config.split", &hash_json(&self.config.split)),
        ]);
        let path = self.path(files::SPLIT);
        let summary_path = self.path(files::SPLIT_SUMMARY);
        if let (Some((c, hash)), Some((summary, _))) = (
            fresh_container(&path, &want),
            fresh_json::<Vec<SplitSummary>>(&summary_path, "split", &want),
        ) {
            let subs = container::subs_from_container(&c)?;
            self.split = Some((SplitArtifact { subs, summary }, hash));
            self.note("split", true);
            return Ok(());
        }
        let mut subs = Vec::new();
        let mut summary = Vec::new();
        let mut saes = Vec::new();
        let cfg = &self.config.split.config;
        for (concept, top) in cem.hierarchy().concepts().iter().enumerate() {
            let records = training_records(cem.net(), &world.dataset, concept)?;
            let on = records.iter().filter(|r| r.prob > 0.5).count();
            let sizes = |p: Polarity| if p == Polarity::Positive { on } else { records.len() - on };
            match self.config.split.variant {
                SplitVariant::Sae => {
                    let out = split_records_sae(concept, &top.name, &records, cfg)?;
                    for polarity in Polarity::BOTH {
                        let sae = out.saes.iter().find(|(p, _)| *p == polarity).map(|(_, s)| s);
                        summary.push(SplitSummary {
                            concept: top.name.clone(),
                            polarity,
                            partition_rows: sizes(polarity),
                            discovered: out.subs.iter().filter(|s| s.polarity == polarity).count(),
                            skipped: out.skipped.iter().find(|(p, _)| *p == polarity).map(|(_, r)| r.clone()),
                            below_support: out
                                .below_support
                                .iter()
                                .find(|(p, _)| *p == polarity)
                                .map_or(0, |(_, n)| *n),
                            sae: sae.map(|s| SaeSummary {
                                final_mse: s.stats.final_mse,
                                dead_features: s.stats.dead_features,
                                resampled: s.stats.resampled,
                                theta: s.theta,
                            }),
                            clusters: None,
                        });
                    }
                    for (polarity, sae) in out.saes {
                        saes.push((format!("sae-{concept}-{}.hcc", polarity_tag(polarity)), sae));
                    }
                    subs.extend(out.subs);
                }
                SplitVariant::Clustering => {
                    for polarity in Polarity::BOTH {
                        let mut row = SplitSummary {
                            concept: top.name.clone(),
                            polarity,
                            partition_rows: sizes(polarity),
                            discovered: 0,
                            skipped: None,
                            below_support: 0,
                            sae: None,
                            clusters: None,
                        };
                        // a partition too small or too uniform to cluster is skipped, not fatal
                        match split_records_clustering(concept, &top.name, &records, polarity, cfg) {
                            Ok((found, choice)) => {
                                row.discovered = found.len();
                                row.clusters = Some(ClusterSummary {
                                    n_clusters: choice.n_clusters,
                                    silhouette: choice.scores,
                                    clipped: choice.clipped,
                                });
                                subs.extend(found);
                            }
                            Err(e) => row.skipped = Some(e.to_string()),
                        }
                        summary.push(row);
                    }
                }
            }
        }
        for (name, sae) in &saes {
            write_atomic(&self.path(name), &container::sae_to_container(sae).with_inputs(&want).to_bytes())?;
        }
        let mut tsv = Vec::new();
        if !subs.is_empty() {
            write_labels_tsv(&subs, &mut tsv)?;
        }
        write_atomic(&self.path(files::LABELS_TSV), &tsv)?;
        write_atomic(&summary_path, &envelope_bytes("split", &want, &summary))?;
        let hash = write_atomic(&path, &container::subs_to_container(&subs)?.with_inputs(&want).to_bytes())?;
        self.split = Some((SplitArtifact { subs, summary }, hash));
        self.note("split", false);
        Ok(())
    }

    /// Sub-concepts matched to the concept bank, duplicates merged.
    pub fn matching(&mut self) -> Result<&Matching> {
        self.split()?;
        self.ensure_matching().map_err(|e| e.in_stage("match"))?;
        Ok(&self.matching.as_ref().expect("ensured").0)
    }

    fn ensure_matching(&mut self) -> Result<()> {
        if self.matching.is_some() {
            return Ok(());
        }
        let (world, world_hash) = self.world.as_ref().expect("world first");
        let (split, split_hash) = self.split.as_ref().expect("split first");
        let want = inputs([("world", world_hash), ("split", split_hash)]);
        let path = self.path(files::MATCHED);
        let table_path = self.path(files::MATCH_TABLE);
        if let (Some((c, hash)), Some((table, table_hash))) = (
            fresh_container(&path, &want),
            fresh_json::<MatchTable>(&table_path, "match", &want),
        ) {
            let subs = container::subs_from_container(&c)?;
            self.matching = Some((Matching { table, subs }, hash, table_hash));
            self.note("match", true);
            return Ok(());
        }
        let m = match_to_bank(&split.subs, &world.bank)?;
        let table_hash = write_atomic(&table_path, &envelope_bytes("match", &want, &m.table))?;
        let hash = write_atomic(&path, &container::subs_to_container(&m.subs)?.with_inputs(&want).to_bytes())?;
        self.matching = Some((m, hash, table_hash));
        self.note("match", false);
        Ok(())
    }

    pub fn hicem(&mut self) -> Result<&HicemModel> {
        self.matching()?;
        self.ensure_hicem().map_err(|e| e.in_stage("train-hicem"))?;
        Ok(&self.hicem.as_ref().expect("ensured").0)
    }

    fn ensure_hicem(&mut self) -> Result<()> {
        if self.hicem.is_some() {
            return Ok(());
        }
        let (world, world_hash) = self.world.as_ref().expect("world first");
        let (m, matched_hash, table_hash) = self.matching.as_ref().expect("match first");
        let want = inputs([
            ("world", world_hash),
            ("matched", matched_hash),
            ("match_table", table_hash),
            ("config.hicem", &hash_json(&self.config.hicem)),
        ]);
        let path = self.path(files::HICEM);
        if let Some((c, hash)) = fresh_container(&path, &want) {
            let (net, config, report) = container::net_from_container(&c, Kind::Hicem)?;
            self.hicem = Some((HicemModel::from_net(net, config, report), hash));
            self.note("train-hicem", true);
            return Ok(());
        }
        let hierarchy = hierarchy_from_subs(&world.hierarchy, &m.subs)?;
        let data = attach_sub_labels(&world.dataset, &hierarchy, &m.subs);
        let model = hicem_train(&hierarchy, &data, &self.config.hicem)?;
        let c = container::net_to_container(Kind::Hicem, model.net(), &model.config, &model.report);
        let hash = write_atomic(&path, &c.with_inputs(&want).to_bytes())?;
        self.hicem = Some((model, hash));
        self.note("train-hicem", false);
        Ok(())
    }

    pub fn eval(&mut self) -> Result<&EvalSummary> {
        self.hicem()?;
        self.ensure_eval().map_err(|e| e.in_stage("eval"))?;
        Ok(&self.eval.as_ref().expect("ensured").0)
    }

    fn model_inputs(&self) -> BTreeMap<String, String> {
        let (_, world) = self.world.as_ref().expect("world first");
        let (_, cem) = self.cem.as_ref().expect("cem first");
        let (_, matched, table) = self.matching.as_ref().expect("match first");
        let (_, hicem) = self.hicem.as_ref().expect("hicem first");
        inputs([
            ("world", world),
            ("cem", cem),
            ("matched", matched),
            ("match_table", table),
            ("hicem", hicem),
        ])
    }

    fn ensure_eval(&mut self) -> Result<()> {
        if self.eval.is_some() {
            return Ok(());
        }
        let want = self.model_inputs();
        let path = self.path(files::EVAL);
        if let Some(found) = fresh_json::<EvalSummary>(&path, "eval", &want) {
            self.eval = Some(found);
            self.note("eval", true);
            return Ok(());
        }
        let (world, _) = self.world.as_ref().expect("world first");
        let (cem, _) = self.cem.as_ref().expect("cem first");
        let (m, _, _) = self.matching.as_ref().expect("match first");
        let (hicem, _) = self.hicem.as_ref().expect("hicem first");
        let cem_report = evaluate_model(cem.net(), &world.dataset, &world.bank, &MatchTable::default())?;
        let hicem_report = evaluate_model(hicem.net(), &world.dataset, &world.bank, &m.table)?;
        let summary = EvalSummary {
            match_table: with_test_auc(&m.table, &hicem_report),
            cem: cem_report,
            hicem: hicem_report,
        };
        let hash = write_atomic(&path, &envelope_bytes("eval", &want, &summary))?;
        self.eval = Some((summary, hash));
        self.note("eval", false);
        Ok(())
    }

    pub fn curves(&mut self) -> Result<&Curves> {
        self.hicem()?;
        self.ensure_curves().map_err(|e| e.in_stage("curve"))?;
        Ok(&self.curves.as_ref().expect("ensured").0)
    }

    fn ensure_curves(&mut self) -> Result<()> {
        if self.curves.is_some() {
            return Ok(());
        }
        let mut want = self.model_inputs();
        want.insert("config.eval".into(), hash_json(&self.config.eval));
        let path = self.path(files::CURVES);
        if let Some(found) = fresh_json::<Curves>(&path, "curves", &want) {
            self.curves = Some(found);
            self.note("curve", true);
            return Ok(());
        }
        let (world, _) = self.world.as_ref().expect("world first");
        let (cem, _) = self.cem.as_ref().expect("cem first");
        let (m, _, _) = self.matching.as_ref().expect("match first");
        let (hicem, _) = self.hicem.as_ref().expect("hicem first");
        let cfg = &self.config.eval.curve;
        let (data, bank) = (&world.dataset, &world.bank);
        let curves = Curves {
            cem_top: intervention_curve(cem.net(), data, bank, &MatchTable::default(), InterventionKind::TopLevel, cfg)?,
            hicem_top: intervention_curve(hicem.net(), data, bank, &m.table, InterventionKind::TopLevel, cfg)?,
            hicem_sub: intervention_curve(hicem.net(), data, bank, &m.table, InterventionKind::SubConcept, cfg)?,
        };
        for (name, c) in [("cem-top", &curves.cem_top), ("hicem-top", &curves.hicem_top), ("hicem-sub", &curves.hicem_sub)] {
            write_atomic(&self.path(&format!("curve-{name}.tsv")), crate::eval::curve_tsv(c).as_bytes())?;
        }
        let hash = write_atomic(&path, &envelope_bytes("curves", &want, &curves))?;
        self.curves = Some((curves, hash));
        self.note("curve", false);
        Ok(())
    }

    /// Runs every stage that is not already up to date and returns the report.
    pub fn report(&mut self) -> Result<&Report> {
        self.eval()?;
        self.curves()?;
        self.ensure_report().map_err(|e| e.in_stage("report"))?;
        Ok(&self.report.as_ref().expect("ensured").0)
    }

    /// SHA-256 of the report file once [`Pipeline::report`] has run.
    pub fn report_hash(&self) -> Option<&str> {
        self.report.as_ref().map(|(_, h)| h.as_str())
    }

    fn ensure_report(&mut self) -> Result<()> {
        if self.report.is_some() {
            return Ok(());
        }
        let config = self.portable_config();
        let mut want = self.model_inputs();
        want.insert("config".into(), hash_json(&config));
        want.insert("split".into(), self.split.as_ref().expect("split first").1.clone());
        want.insert("eval".into(), self.eval.as_ref().expect("eval first").1.clone());
        want.insert("curves".into(), self.curves.as_ref().expect("curves first").1.clone());
        let path = self.path(files::REPORT);
        if let Some(found) = fresh_json::<Report>(&path, "report", &want) {
            self.report = Some(found);
            self.note("report", true);
            return Ok(());
        }
        let (world, _) = self.world.as_ref().expect("world first");
        let (cem, _) = self.cem.as_ref().expect("cem first");
        let (split, _) = self.split.as_ref().expect("split first");
        let (hicem, _) = self.hicem.as_ref().expect("hicem first");
        let (eval, _) = self.eval.as_ref().expect("eval first");
        let (curves, _) = self.curves.as_ref().expect("curves first");
        let d = &world.dataset;
        let report = Report {
            world: WorldSummary {
                kind: config.world.kind,
                rows: d.len(),
                train: d.rows_in(Split::Train).len(),
                val: d.rows_in(Split::Val).len(),
                test: d.rows_in(Split::Test).len(),
                concepts: world.hierarchy.names().map(str::to_string).collect(),
                bank_entries: world.bank.entries.len(),
            },
            config,
            cem_training: TrainingSummary {
                epochs_run: cem.report.epochs_run,
                best_epoch: cem.report.best_epoch,
            },
            hicem_training: TrainingSummary {
                epochs_run: hicem.report.epochs_run,
                best_epoch: hicem.report.best_epoch,
            },
            cem: eval.cem.clone(),
            hicem: eval.hicem.clone(),
            split: split.summary.clone(),
            discovered: split.subs.len(),
            matched_bank_entries: eval.match_table.matched().count(),
            match_table: eval.match_table.clone(),
            curves: curves.clone(),
        };
        let hash = write_atomic(&path, &envelope_bytes("report", &want, &report))?;
        self.report = Some((report, hash));
        self.note("report", false);
        Ok(())
    }
}

fn polarity_tag(p: Polarity) -> &'static str {
    match p {
        Polarity::Positive => "pos",
        Polarity::Negative => "neg",
    }
}

/// Artifacts a finished run leaves for serving: the world, the HiCEM, the matched
/// sub-concepts and the match table.
#[derive(Clone, Debug)]
pub struct ServedRun {
    pub world: World,
    pub model: HicemModel,
    pub matched: Vec<DiscoveredSubConcept>,
    pub table: MatchTable,
}

impl ServedRun {
    /// Loads without recomputing anything; a missing artifact is an error naming it.
    pub fn open(dir: &Path) -> Result<Self> {
        let world = container::load_world(&dir.join(files::WORLD))?;
        let (net, config, report) =
            container::net_from_container(&Container::load(&dir.join(files::HICEM))?, Kind::Hicem)?;
        let matched = container::subs_from_container(&Container::load(&dir.join(files::MATCHED))?)?;
        let table = parse_envelope::<MatchTable>(&read_bytes(&dir.join(files::MATCH_TABLE))?, "match")?.body;
        if net.shape.n_input != world.dataset.n_hidden() {
            return Err(Error::dim(format!(
                "model expects {} features, dataset has {}",
                net.shape.n_input,
                world.dataset.n_hidden()
            )));
        }
        Ok(Self {
            world,
            model: HicemModel::from_net(net, config, report),
            matched,
            table,
        })
    }
}

/// Report of a finished run, read back with its version and hash checked.
pub fn read_report(dir: &Path) -> Result<Envelope<Report>> {
    parse_envelope(&read_bytes(&dir.join(files::REPORT))?, "report")
}

/// Short human-readable digest of a report.
pub fn summary_text(r: &Report) -> String {
    let mut s = String::new();
    let auc = |v: Option<f64>| v.map_or("n/a".to_string(), |a| format!("{a:.4}"));
    s.push_str(&format!(
        "world {:?}: {} rows ({} train / {} val / {} test)\n",
        r.world.kind, r.world.rows, r.world.train, r.world.val, r.world.test
    ));
    s.push_str(&format!(
        "CEM    task accuracy {:.4}  concept AUC {:.4}  ({} epochs)\n",
        r.cem.task_accuracy, r.cem.concept_auc_mean, r.cem_training.epochs_run
    ));
    s.push_str(&format!(
        "HiCEM  task accuracy {:.4}  concept AUC {:.4}  sub-concept AUC {}  ({} epochs)\n",
        r.hicem.task_accuracy,
        r.hicem.concept_auc_mean,
        auc(r.hicem.sub_auc_mean),
        r.hicem_training.epochs_run
    ));
    s.push_str(&format!(
        "discovered {} sub-concepts, matched {}/{} bank entries\n",
        r.discovered,
        r.matched_bank_entries,
        r.match_table.rows.len()
    ));
    for row in &r.match_table.rows {
        s.push_str(&format!(
            "  {:<16} {:<4} match {}  test {}  {}\n",
            row.bank,
            polarity_tag(row.polarity),
            auc(row.match_auc),
            auc(row.test_auc),
            row.sub.as_deref().unwrap_or("-")
        ));
    }
    for (name, c) in [
        ("CEM top", &r.curves.cem_top),
        ("HiCEM top", &r.curves.hicem_top),
        ("HiCEM sub", &r.curves.hicem_sub),
    ] {
        let pts: Vec<String> = c.points.iter().map(|p| format!("{:.3}", p.accuracy)).collect();
        s.push_str(&format!("curve {name:<9} {}\n", pts.join(" ")));
    }
    s
}
