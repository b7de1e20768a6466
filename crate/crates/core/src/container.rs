//! Versioned binary container shared by datasets and checkpoints.
//!
//! Layout:
//!
//! ```text
//! HICEM-CONTAINER <version> <header bytes> <header crc32, 8 hex digits>\n
//! <header: pretty-printed JSON>
//! <section 0 payload><section 1 payload>...
//! ```
//!
//! The header lists every section with its element type, element count, byte
//! length and CRC-32, plus a SHA-256 over all payload bytes. Reals are
//! little-endian `f64`, integers little-endian `u32`, binary labels are packed
//! eight to a byte (least significant bit first), and small codes are one byte each.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::net::{Affine, ConceptNet, NetParams, NetShape};
use crate::numkit::Matrix;
use crate::rng::{Seeds, Stream};
use crate::sae::{SaeConfig, SaeModel, SaeStats};
use crate::splitting::{DiscoveredSubConcept, SubConceptSource};
use crate::train::{TrainConfig, TrainReport};
use crate::worlds::{
    BankEntry, ConceptBank, ConceptHierarchy, Dataset, Polarity, Split, SubLabelColumn, SubRef, TopConcept, World,
};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "HICEM-CONTAINER";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Dataset,
    Cem,
    Hicem,
    Sae,
    Labels,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Dataset => "dataset",
            Kind::Cem => "cem",
            Kind::Hicem => "hicem",
            Kind::Sae => "sae",
            Kind::Labels => "labels",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    F64(Vec<f64>),
    U32(Vec<u32>),
    Bits(Vec<bool>),
    Bytes(Vec<u8>),
}

impl Block {
    fn type_name(&self) -> &'static str {
        match self {
            Block::F64(_) => "f64",
            Block::U32(_) => "u32",
            Block::Bits(_) => "bits",
            Block::Bytes(_) => "u8",
        }
    }

    fn len(&self) -> usize {
        match self {
            Block::F64(v) => v.len(),
            Block::U32(v) => v.len(),
            Block::Bits(v) => v.len(),
            Block::Bytes(v) => v.len(),
        }
    }

    fn encode(&self) -> Vec<u8> {
        match self {
            Block::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Block::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            Block::Bits(v) => {
                let mut out = vec![0u8; v.len().div_ceil(8)];
                for (i, &b) in v.iter().enumerate() {
                    if b {
                        out[i / 8] |= 1 << (i % 8);
                    }
                }
                out
            }
            Block::Bytes(v) => v.clone(),
        }
    }

    fn byte_len(type_name: &str, len: usize) -> Option<usize> {
        match type_name {
            "f64" => len.checked_mul(8),
            "u32" => len.checked_mul(4),
            "bits" => Some(len.div_ceil(8)),
            "u8" => Some(len),
            _ => None,
        }
    }

    fn decode(type_name: &str, len: usize, bytes: &[u8]) -> Option<Block> {
        Some(match type_name {
            "f64" => Block::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            "u32" => Block::U32(
                bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            "bits" => Block::Bits((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()),
            "u8" => Block::Bytes(bytes.to_vec()),
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SectionEntry {
    name: String,
    #[serde(rename = "type")]
    type_name: String,
    len: usize,
    bytes: usize,
    crc32: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: Kind,
    content_sha256: String,
    meta: Value,
    sections: Vec<SectionEntry>,
}

/// In-memory form of a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: Kind,
    pub meta: Value,
    pub sections: Vec<(String, Block)>,
}

impl Container {
    pub fn new(kind: Kind, meta: Value) -> Self {
        Self {
            kind,
            meta,
            sections: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, block: Block) {
        self.sections.push((name.into(), block));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payloads: Vec<Vec<u8>> = self.sections.iter().map(|(_, b)| b.encode()).collect();
        let mut sha = Sha256::new();
        for p in &payloads {
            sha.update(p);
        }
        let header = Header {
            kind: self.kind,
            content_sha256: hex::encode(sha.finalize()),
            meta: self.meta.clone(),
            sections: self
                .sections
                .iter()
                .zip(&payloads)
                .map(|((name, block), p)| SectionEntry {
                    name: name.clone(),
                    type_name: block.type_name().into(),
                    len: block.len(),
                    bytes: p.len(),
                    crc32: format!("{:08x}", crc32fast::hash(p)),
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&header).expect("header serializes");
        text.push('\n');
        let mut out = format!(
            "{MAGIC} {FORMAT_VERSION} {} {:08x}\n",
            text.len(),
            crc32fast::hash(text.as_bytes())
        )
        .into_bytes();
        out.extend_from_slice(text.as_bytes());
        for p in payloads {
            out.extend(p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .take(128)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::load(0, "missing container preamble"))?;
        let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::load(0, "preamble is not text"))?;
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 4 || fields[0] != MAGIC {
            return Err(Error::load(0, "not a container file"));
        }
        let version: u32 = fields[1].parse().map_err(|_| Error::load(0, "bad version field"))?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len: usize = fields[2].parse().map_err(|_| Error::load(0, "bad header length"))?;
        let start = nl + 1;
        let end = start
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::load(start as u64, "header truncated"))?;
        let header_bytes = &bytes[start..end];
        if format!("{:08x}", crc32fast::hash(header_bytes)) != fields[3] {
            return Err(Error::load(start as u64, "header checksum mismatch"));
        }
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::load(start as u64, format!("header: {e}")))?;
        let mut offset = end;
        let mut sections = Vec::with_capacity(header.sections.len());
        let mut sha = Sha256::new();
        for s in &header.sections {
            let need = Block::byte_len(&s.type_name, s.len)
                .filter(|&n| n == s.bytes)
                .ok_or_else(|| Error::load(offset as u64, format!("section `{}` has inconsistent size", s.name)))?;
            if bytes.len() - offset < need {
                return Err(Error::load(
                    offset as u64,
                    format!(
                        "section `{}` truncated: need {need} bytes, have {}",
                        s.name,
                        bytes.len() - offset
                    ),
                ));
            }
            let payload = &bytes[offset..offset + need];
            if format!("{:08x}", crc32fast::hash(payload)) != s.crc32 {
                return Err(Error::load(offset as u64, format!("section `{}` checksum mismatch", s.name)));
            }
            sha.update(payload);
            let block = Block::decode(&s.type_name, s.len, payload)
                .ok_or_else(|| Error::load(offset as u64, format!("section `{}` has unknown type", s.name)))?;
            sections.push((s.name.clone(), block));
            offset += need;
        }
        if offset != bytes.len() {
            return Err(Error::load(offset as u64, "trailing bytes after last section"));
        }
        if hex::encode(sha.finalize()) != header.content_sha256 {
            return Err(Error::load(end as u64, "content hash mismatch"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    fn expect_kind(&self, kind: Kind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::load(
                0,
                format!("expected a {} container, found {}", kind.as_str(), self.kind.as_str()),
            ))
        }
    }

    fn block(&self, name: &str) -> Result<&Block> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| b)
            .ok_or_else(|| Error::load(0, format!("missing section `{name}`")))
    }

    fn f64s(&self, name: &str, len: usize) -> Result<&[f64]> {
        match self.block(name)? {
            Block::F64(v) if v.len() == len => Ok(v),
            _ => Err(Error::load(0, format!("section `{name}` is not {len} reals"))),
        }
    }

    fn u32s(&self, name: &str, len: usize) -> Result<&[u32]> {
        match self.block(name)? {
            Block::U32(v) if v.len() == len => Ok(v),
            _ => Err(Error::load(0, format!("section `{name}` is not {len} integers"))),
        }
    }

    fn bits(&self, name: &str, len: usize) -> Result<&[bool]> {
        match self.block(name)? {
            Block::Bits(v) if v.len() == len => Ok(v),
            _ => Err(Error::load(0, format!("section `{name}` is not {len} bits"))),
        }
    }

    fn bytes(&self, name: &str, len: usize) -> Result<&[u8]> {
        match self.block(name)? {
            Block::Bytes(v) if v.len() == len => Ok(v),
            _ => Err(Error::load(0, format!("section `{name}` is not {len} bytes"))),
        }
    }

    /// Attaches provenance: the hashes of the artifacts this one was built from.
    pub fn with_inputs(mut self, inputs: &BTreeMap<String, String>) -> Self {
        if let Value::Object(m) = &mut self.meta {
            m.insert("inputs".into(), serde_json::json!(inputs));
        }
        self
    }

    pub fn inputs(&self) -> Option<BTreeMap<String, String>> {
        serde_json::from_value(self.meta.get("inputs")?.clone()).ok()
    }

    fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::load(0, format!("header lacks `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::load(0, format!("header `{key}`: {e}")))
    }
}

/// Hierarchy as nested lists: `[[name, [positive...], [negative...]], ...]`.
pub fn hierarchy_to_lists(h: &ConceptHierarchy) -> Value {
    Value::Array(
        h.concepts()
            .iter()
            .map(|c| serde_json::json!([c.name, c.positive, c.negative]))
            .collect(),
    )
}

pub fn hierarchy_from_lists(v: &Value) -> Result<ConceptHierarchy> {
    let lists: Vec<(String, Vec<String>, Vec<String>)> =
        serde_json::from_value(v.clone()).map_err(|e| Error::load(0, format!("hierarchy: {e}")))?;
    ConceptHierarchy::new(
        lists
            .into_iter()
            .map(|(name, positive, negative)| TopConcept {
                name,
                positive,
                negative,
            })
            .collect(),
    )
}

fn split_code(s: Split) -> u8 {
    s.code()
}

fn split_from_code(c: u8) -> Result<Split> {
    Split::from_code(c).ok_or_else(|| Error::load(0, format!("bad split code {c}")))
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    name: String,
    parent: String,
    polarity: Polarity,
}

/// Serializes a world (dataset, bank and hierarchy).
pub fn world_to_container(world: &World) -> Container {
    let d = &world.dataset;
    let n = d.len();
    let meta = serde_json::json!({
        "rows": n,
        "n_hidden": d.n_hidden(),
        "n_concepts": d.concepts.cols(),
        "n_classes": d.n_classes,
        "concepts": world.hierarchy.concepts().iter().map(|c| &c.name).collect::<Vec<_>>(),
        "hierarchy": hierarchy_to_lists(&world.hierarchy),
        "bank": world.bank.entries.iter().map(|e| BankMeta {
            name: e.name.clone(),
            parent: e.parent.clone(),
            polarity: e.polarity,
        }).collect::<Vec<_>>(),
        "sub_labels": d.sub_labels.iter().map(|c| c.sub).collect::<Vec<_>>(),
    });
    let mut c = Container::new(Kind::Dataset, meta);
    c.push("features", Block::F64(d.features.data().to_vec()));
    c.push("concepts", Block::Bits(d.concepts.data().iter().map(|&v| v > 0.5).collect()));
    c.push("tasks", Block::U32(d.tasks.iter().map(|&t| t as u32).collect()));
    c.push("splits", Block::Bytes(d.splits.iter().map(|&s| split_code(s)).collect()));
    for (i, e) in world.bank.entries.iter().enumerate() {
        c.push(format!("bank[{i}]"), Block::Bits(e.column.clone()));
    }
    for (i, col) in d.sub_labels.iter().enumerate() {
        // 0 absent, 1 present, 2 unlabelled
        let codes = col.values.iter().map(|v| v.map_or(2, u8::from)).collect();
        c.push(format!("sub_labels[{i}]"), Block::Bytes(codes));
    }
    c
}

pub fn world_from_container(c: &Container) -> Result<World> {
    c.expect_kind(Kind::Dataset)?;
    let n: usize = c.meta_field("rows")?;
    let n_hidden: usize = c.meta_field("n_hidden")?;
    let k: usize = c.meta_field("n_concepts")?;
    let n_classes: usize = c.meta_field("n_classes")?;
    let hierarchy = hierarchy_from_lists(c.meta.get("hierarchy").unwrap_or(&Value::Null))?;
    let bank_meta: Vec<BankMeta> = c.meta_field("bank")?;
    let sub_refs: Vec<SubRef> = c.meta_field("sub_labels")?;
    let features = Matrix::from_vec(n, n_hidden, c.f64s("features", n * n_hidden)?.to_vec())?;
    let concepts = Matrix::from_vec(
        n,
        k,
        c.bits("concepts", n * k)?.iter().map(|&b| f64::from(u8::from(b))).collect(),
    )?;
    let tasks = c.u32s("tasks", n)?.iter().map(|&t| t as usize).collect();
    let splits = c
        .bytes("splits", n)?
        .iter()
        .map(|&s| split_from_code(s))
        .collect::<Result<_>>()?;
    let mut bank = ConceptBank::default();
    for (i, m) in bank_meta.into_iter().enumerate() {
        bank.entries.push(BankEntry {
            name: m.name,
            parent: m.parent,
            polarity: m.polarity,
            column: c.bits(&format!("bank[{i}]"), n)?.to_vec(),
        });
    }
    let mut sub_labels = Vec::with_capacity(sub_refs.len());
    for (i, sub) in sub_refs.into_iter().enumerate() {
        let values = c
            .bytes(&format!("sub_labels[{i}]"), n)?
            .iter()
            .map(|&v| match v {
                0 => Ok(Some(false)),
                1 => Ok(Some(true)),
                2 => Ok(None),
                _ => Err(Error::load(0, format!("bad label code {v}"))),
            })
            .collect::<Result<_>>()?;
        sub_labels.push(SubLabelColumn { sub, values });
    }
    Ok(World {
        dataset: Dataset {
            features,
            concepts,
            sub_labels,
            tasks,
            n_classes,
            splits,
        },
        bank,
        hierarchy,
    })
}

/// Parameter layers of a network with stable section names.
fn named_layers<'a>(net_h: &ConceptHierarchy, p: &'a NetParams) -> Vec<(String, &'a Affine)> {
    let mut out: Vec<(String, &Affine)> = Vec::new();
    if let Some(b) = &p.backbone {
        out.push(("backbone".into(), b));
    }
    for (i, a) in p.top_pos.iter().enumerate() {
        out.push((format!("top_pos[{}]", net_h.concepts()[i].name), a));
    }
    for (i, a) in p.top_neg.iter().enumerate() {
        out.push((format!("top_neg[{}]", net_h.concepts()[i].name), a));
    }
    for (sub, a) in net_h.sub_refs().into_iter().zip(&p.subs) {
        out.push((format!("sub[{}]", net_h.sub_name(sub)), a));
    }
    out.push(("score".into(), &p.score));
    out.push(("predictor".into(), &p.predictor));
    out
}

/// Serializes a concept network with its training snapshot.
pub fn net_to_container(kind: Kind, net: &ConceptNet, config: &TrainConfig, report: &TrainReport) -> Container {
    let meta = serde_json::json!({
        "hierarchy": hierarchy_to_lists(&net.hierarchy),
        "shape": net.shape,
        "config": config,
        "report": report,
    });
    let mut c = Container::new(kind, meta);
    for (name, a) in named_layers(&net.hierarchy, &net.params) {
        c.push(format!("{name}.w"), Block::F64(a.w.data().to_vec()));
        c.push(format!("{name}.b"), Block::F64(a.b.data().to_vec()));
    }
    c
}

pub fn net_from_container(c: &Container, kind: Kind) -> Result<(ConceptNet, TrainConfig, TrainReport)> {
    c.expect_kind(kind)?;
    let hierarchy = hierarchy_from_lists(c.meta.get("hierarchy").unwrap_or(&Value::Null))?;
    let shape: NetShape = c.meta_field("shape")?;
    let config: TrainConfig = c.meta_field("config")?;
    let report: TrainReport = c.meta_field("report")?;
    let mut rng = Seeds::new(0).stream(Stream::Init, 0);
    let skeleton = ConceptNet::init(hierarchy.clone(), shape.clone(), &mut rng)?;
    let mut params = skeleton.params.clone();
    let names: Vec<String> = named_layers(&hierarchy, &skeleton.params).into_iter().map(|(n, _)| n).collect();
    let mut layers = params_layers_mut(&mut params);
    for (name, a) in names.iter().zip(layers.iter_mut()) {
        let (r, k) = a.w.shape();
        a.w = Matrix::from_vec(r, k, c.f64s(&format!("{name}.w"), r * k)?.to_vec())?;
        a.b = Matrix::from_vec(1, k, c.f64s(&format!("{name}.b"), k)?.to_vec())?;
    }
    Ok((ConceptNet::from_parts(hierarchy, shape, params)?, config, report))
}

fn params_layers_mut(p: &mut NetParams) -> Vec<&mut Affine> {
    let mut out: Vec<&mut Affine> = p.backbone.iter_mut().collect();
    out.extend(&mut p.top_pos);
    out.extend(&mut p.top_neg);
    out.extend(&mut p.subs);
    out.push(&mut p.score);
    out.push(&mut p.predictor);
    out
}

pub fn sae_to_container(sae: &SaeModel) -> Container {
    let meta = serde_json::json!({
        "width": sae.width(),
        "dict_size": sae.dict_size(),
        "theta": sae.theta,
        "config": sae.config,
        "stats": sae.stats,
    });
    let mut c = Container::new(Kind::Sae, meta);
    c.push("w_enc", Block::F64(sae.w_enc.data().to_vec()));
    c.push("b_enc", Block::F64(sae.b_enc.data().to_vec()));
    c.push("w_dec", Block::F64(sae.w_dec.data().to_vec()));
    c.push("b_dec", Block::F64(sae.b_dec.data().to_vec()));
    c
}

pub fn sae_from_container(c: &Container) -> Result<SaeModel> {
    c.expect_kind(Kind::Sae)?;
    let m: usize = c.meta_field("width")?;
    let d: usize = c.meta_field("dict_size")?;
    let config: SaeConfig = c.meta_field("config")?;
    let stats: SaeStats = c.meta_field("stats")?;
    let theta: f64 = c.meta_field("theta")?;
    Ok(SaeModel {
        w_enc: Matrix::from_vec(m, d, c.f64s("w_enc", m * d)?.to_vec())?,
        b_enc: Matrix::from_vec(1, d, c.f64s("b_enc", d)?.to_vec())?,
        w_dec: Matrix::from_vec(d, m, c.f64s("w_dec", d * m)?.to_vec())?,
        b_dec: Matrix::from_vec(1, m, c.f64s("b_dec", m)?.to_vec())?,
        theta,
        config,
        stats,
    })
}

#[derive(Serialize, Deserialize)]
struct SubMeta {
    id: String,
    parent: usize,
    parent_name: String,
    polarity: Polarity,
    source: SubConceptSource,
    support: usize,
}

/// Discovered sub-concepts sharing one row domain. Activations are stored only for
/// labelled rows.
pub fn subs_to_container(subs: &[DiscoveredSubConcept]) -> Result<Container> {
    let rows = subs.first().map(|s| s.rows.clone()).unwrap_or_default();
    if let Some(s) = subs.iter().find(|s| s.rows != rows) {
        return Err(Error::param(format!("sub-concept `{}` has a different row domain", s.id)));
    }
    let meta = serde_json::json!({
        "rows": rows.len(),
        "subs": subs.iter().map(|s| SubMeta {
            id: s.id.clone(),
            parent: s.parent,
            parent_name: s.parent_name.clone(),
            polarity: s.polarity,
            source: s.source.clone(),
            support: s.support(),
        }).collect::<Vec<_>>(),
    });
    let mut c = Container::new(Kind::Labels, meta);
    c.push("rows", Block::U32(rows.iter().map(|&r| r as u32).collect()));
    for (i, s) in subs.iter().enumerate() {
        c.push(format!("labels[{i}]"), Block::Bits(s.labels.clone()));
        let acts = s.labels.iter().zip(&s.activations).filter(|(&l, _)| l).map(|(_, &a)| a).collect();
        c.push(format!("activations[{i}]"), Block::F64(acts));
    }
    Ok(c)
}

pub fn subs_from_container(c: &Container) -> Result<Vec<DiscoveredSubConcept>> {
    c.expect_kind(Kind::Labels)?;
    let n: usize = c.meta_field("rows")?;
    let metas: Vec<SubMeta> = c.meta_field("subs")?;
    let rows: Vec<usize> = c.u32s("rows", n)?.iter().map(|&r| r as usize).collect();
    metas
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let labels = c.bits(&format!("labels[{i}]"), n)?.to_vec();
            let support = labels.iter().filter(|&&l| l).count();
            if support != m.support {
                return Err(Error::load(0, format!("sub-concept `{}` support disagrees with its labels", m.id)));
            }
            let mut acts = c.f64s(&format!("activations[{i}]"), support)?.iter();
            let activations = labels
                .iter()
                .map(|&l| if l { *acts.next().expect("support counted") } else { 0.0 })
                .collect();
            Ok(DiscoveredSubConcept {
                id: m.id,
                parent: m.parent,
                parent_name: m.parent_name,
                polarity: m.polarity,
                source: m.source,
                rows: rows.clone(),
                labels,
                activations,
            })
        })
        .collect()
}

pub fn save_world(path: &Path, world: &World) -> Result<()> {
    world_to_container(world).save(path)
}

pub fn load_world(path: &Path) -> Result<World> {
    world_from_container(&Container::load(path)?)
}
