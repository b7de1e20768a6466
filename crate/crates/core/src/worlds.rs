//! Seeded synthetic concept worlds.
//!
//! Features are prototype-plus-Gaussian-noise vectors standing in for a frozen
//! backbone's output. Each world carries a top-level concept matrix used for
//! training and a held-out [`ConceptBank`] of finer-grained ground truth that is
//! never shown to the models.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cem::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::numkit::Matrix;
use crate::rng::{Seeds, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub const BOTH: [Polarity; 2] = [Polarity::Positive, Polarity::Negative];

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        }
    }

    pub fn sign(self) -> char {
        match self {
            Polarity::Positive => '+',
            Polarity::Negative => '-',
        }
    }

    /// Parent truth implied by a sub-concept of this polarity being present.
    pub fn parent_value(self) -> bool {
        self == Polarity::Positive
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "positive" | "pos" | "+" => Some(Polarity::Positive),
            "negative" | "neg" | "-" => Some(Polarity::Negative),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopConcept {
    pub name: String,
    pub positive: Vec<String>,
    pub negative: Vec<String>,
}

impl TopConcept {
    pub fn leaf(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            positive: Vec::new(),
            negative: Vec::new(),
        }
    }

    pub fn subs(&self, polarity: Polarity) -> &[String] {
        match polarity {
            Polarity::Positive => &self.positive,
            Polarity::Negative => &self.negative,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.positive.is_empty() && self.negative.is_empty()
    }
}

/// Address of one sub-concept inside a hierarchy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubRef {
    pub parent: usize,
    pub polarity: Polarity,
    pub index: usize,
}

/// Two-level concept tree: top-level concepts with ordered positive and
/// negative sub-concept lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptHierarchy {
    concepts: Vec<TopConcept>,
}

impl ConceptHierarchy {
    pub fn new(concepts: Vec<TopConcept>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &concepts {
            for name in std::iter::once(&c.name).chain(&c.positive).chain(&c.negative) {
                if !seen.insert(name.as_str()) {
                    return Err(Error::param(format!("duplicate concept name `{name}`")));
                }
            }
        }
        Ok(Self { concepts })
    }

    pub fn leaves<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::new(names.into_iter().map(TopConcept::leaf).collect())
    }

    /// Same top-level names with every sub-concept list dropped.
    pub fn flattened(&self) -> Self {
        Self {
            concepts: self.concepts.iter().map(|c| TopConcept::leaf(c.name.clone())).collect(),
        }
    }

    pub fn concepts(&self) -> &[TopConcept] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.concepts.iter().map(|c| c.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.concepts
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| Error::Lookup {
                kind: "concept",
                name: name.to_string(),
            })
    }

    pub fn sub_count(&self, parent: usize, polarity: Polarity) -> usize {
        self.concepts[parent].subs(polarity).len()
    }

    pub fn is_all_leaves(&self) -> bool {
        self.concepts.iter().all(TopConcept::is_leaf)
    }

    /// Every sub-concept in parent, polarity (positive first), index order.
    pub fn sub_refs(&self) -> Vec<SubRef> {
        let mut out = Vec::new();
        for (parent, c) in self.concepts.iter().enumerate() {
            for polarity in Polarity::BOTH {
                for index in 0..c.subs(polarity).len() {
                    out.push(SubRef {
                        parent,
                        polarity,
                        index,
                    });
                }
            }
        }
        out
    }

    pub fn sub_name(&self, sub: SubRef) -> &str {
        &self.concepts[sub.parent].subs(sub.polarity)[sub.index]
    }

    pub fn find_sub(&self, name: &str) -> Option<SubRef> {
        self.sub_refs().into_iter().find(|&s| self.sub_name(s) == name)
    }

    pub fn check_sub(&self, sub: SubRef) -> Result<()> {
        if sub.parent < self.len() && sub.index < self.sub_count(sub.parent, sub.polarity) {
            Ok(())
        } else {
            Err(Error::Lookup {
                kind: "sub-concept",
                name: format!("{}/{}/{}", sub.parent, sub.polarity.as_str(), sub.index),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Labels of one sub-concept; `None` where the row carries no label (outside the
/// split the labels were synthesized on).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubLabelColumn {
    pub sub: SubRef,
    pub values: Vec<Option<bool>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    /// Top-level concept labels, `N x k`, entries 0 or 1.
    pub concepts: Matrix,
    pub sub_labels: Vec<SubLabelColumn>,
    pub tasks: Vec<usize>,
    pub n_classes: usize,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn n_hidden(&self) -> usize {
        self.features.cols()
    }

    pub fn rows_in(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&r| self.splits[r] == split).collect()
    }

    pub fn concept(&self, row: usize, concept: usize) -> bool {
        self.concepts.get(row, concept) > 0.5
    }

    pub fn sub_column(&self, sub: SubRef) -> Option<&SubLabelColumn> {
        self.sub_labels.iter().find(|c| c.sub == sub)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankEntry {
    pub name: String,
    pub parent: String,
    pub polarity: Polarity,
    pub column: Vec<bool>,
}

/// Held-out named ground-truth concepts, each tied to a parent and polarity.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptBank {
    pub entries: Vec<BankEntry>,
}

impl ConceptBank {
    pub fn get(&self, name: &str) -> Option<&BankEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Names of the entries true on `row`, in bank order.
    pub fn active_names(&self, row: usize) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.column[row])
            .map(|e| e.name.as_str())
            .collect()
    }
}

/// A generated world: data, held-out bank, and the top-level hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub dataset: Dataset,
    pub bank: ConceptBank,
    pub hierarchy: ConceptHierarchy,
}

impl World {
    pub fn into_parts(self) -> (Dataset, ConceptBank, ConceptHierarchy) {
        (self.dataset, self.bank, self.hierarchy)
    }

    /// Hierarchy consistency of every bank column against the concept labels.
    pub fn check_consistency(&self) -> Result<()> {
        for e in &self.bank.entries {
            let p = self.hierarchy.index_of(&e.parent)?;
            for (row, &v) in e.column.iter().enumerate() {
                if v && self.dataset.concept(row, p) != e.polarity.parent_value() {
                    return Err(Error::param(format!(
                        "bank entry `{}` inconsistent with `{}` on row {row}",
                        e.name, e.parent
                    )));
                }
            }
        }
        Ok(())
    }
}

pub const DIGIT_VALUES: usize = 7;
pub const DIGIT_CLASSES: usize = 2 * (DIGIT_VALUES - 1) + 1;
pub const DIGIT_THRESHOLD: usize = 3;

fn check_common(n: usize, noise_sigma: f64) -> Result<()> {
    if n == 0 {
        return Err(Error::param("n must be at least 1"));
    }
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::param(format!("noise_sigma must be >= 0, got {noise_sigma}")));
    }
    Ok(())
}

fn prototypes(seeds: &Seeds, tag: u64, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = seeds.stream(Stream::World, tag);
    (0..count)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// 80/10/10 split tags assigned through a seeded permutation of row indices.
fn split_tags(seeds: &Seeds, n: usize) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds.stream(Stream::World, u64::MAX));
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut tags = vec![Split::Test; n];
    for (pos, &row) in order.iter().enumerate() {
        tags[row] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    tags
}

fn push_noisy(features: &mut Vec<f64>, proto: &[f64], noise: &Normal<f64>, rng: &mut crate::rng::Rng) {
    features.extend(proto.iter().map(|&v| v + noise.sample(rng)));
}

/// Per-row factor values of a DigitPairs world.
fn digit_pair(dataset_row_rng: &mut crate::rng::Rng) -> (usize, usize) {
    (
        dataset_row_rng.random_range(0..DIGIT_VALUES),
        dataset_row_rng.random_range(0..DIGIT_VALUES),
    )
}

/// Two digits in `0..=6`; task is their sum, concepts are "digit p > 3" and the
/// bank holds the one-hot digit values.
pub fn gen_digit_pairs(seed: u64, n: usize, noise_sigma: f64, dim_per_digit: usize) -> Result<World> {
    check_common(n, noise_sigma)?;
    if dim_per_digit == 0 {
        return Err(Error::param("dim_per_digit must be at least 1"));
    }
    let seeds = Seeds::new(seed);
    let protos = [
        prototypes(&seeds, 0, DIGIT_VALUES, dim_per_digit),
        prototypes(&seeds, 1, DIGIT_VALUES, dim_per_digit),
    ];
    let noise = Normal::new(0.0, noise_sigma).expect("sigma checked");
    let mut features = Vec::with_capacity(n * 2 * dim_per_digit);
    let mut concepts = Vec::with_capacity(n * 2);
    let mut tasks = Vec::with_capacity(n);
    let mut digits = Vec::with_capacity(n);
    for row in 0..n {
        let mut rng = seeds.stream(Stream::WorldRow, row as u64);
        let (a, b) = digit_pair(&mut rng);
        push_noisy(&mut features, &protos[0][a], &noise, &mut rng);
        push_noisy(&mut features, &protos[1][b], &noise, &mut rng);
        concepts.push(f64::from(u8::from(a > DIGIT_THRESHOLD)));
        concepts.push(f64::from(u8::from(b > DIGIT_THRESHOLD)));
        tasks.push(a + b);
        digits.push([a, b]);
    }
    let hierarchy = ConceptHierarchy::leaves(["digit1>3", "digit2>3"])?;
    let mut bank = ConceptBank::default();
    for slot in 0..2 {
        for v in 0..DIGIT_VALUES {
            bank.entries.push(BankEntry {
                name: format!("digit{} is {v}", slot + 1),
                parent: format!("digit{}>3", slot + 1),
                polarity: if v > DIGIT_THRESHOLD {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                },
                column: digits.iter().map(|d| d[slot] == v).collect(),
            });
        }
    }
    let dataset = Dataset {
        features: Matrix::from_vec(n, 2 * dim_per_digit, features)?,
        concepts: Matrix::from_vec(n, 2, concepts)?,
        sub_labels: Vec::new(),
        tasks,
        n_classes: DIGIT_CLASSES,
        splits: split_tags(&seeds, n),
    };
    Ok(World {
        dataset,
        bank,
        hierarchy,
    })
}

pub const SHAPES: [&str; 4] = ["square", "circle", "triangle", "hexagon"];
pub const COLOURS: [&str; 4] = ["red", "green", "blue", "purple"];
pub const SHAPE_CLASSES: usize = 48;

pub fn is_light(colour: usize) -> bool {
    colour < 2
}

pub fn is_polygon(shape: usize) -> bool {
    SHAPES[shape] != "circle"
}

/// Lexicographic class code of a (shape, shape colour, background colour) triple.
pub fn shape_class(shape: usize, colour: usize, background: usize) -> usize {
    debug_assert_ne!(colour, background);
    let bg_slot = if background > colour { background - 1 } else { background };
    shape * 12 + colour * 3 + bg_slot
}

/// Shape, shape colour and a distinct background colour (48 classes).
pub fn gen_shapes(seed: u64, n: usize, noise_sigma: f64, dim_per_factor: usize) -> Result<World> {
    check_common(n, noise_sigma)?;
    if dim_per_factor == 0 {
        return Err(Error::param("dim_per_factor must be at least 1"));
    }
    let seeds = Seeds::new(seed);
    let shape_protos = prototypes(&seeds, 0, SHAPES.len(), dim_per_factor);
    let colour_protos = prototypes(&seeds, 1, COLOURS.len(), dim_per_factor);
    let bg_protos = prototypes(&seeds, 2, COLOURS.len(), dim_per_factor);
    let noise = Normal::new(0.0, noise_sigma).expect("sigma checked");
    let mut features = Vec::with_capacity(n * 3 * dim_per_factor);
    let mut concepts = Vec::with_capacity(n * 5);
    let mut tasks = Vec::with_capacity(n);
    let mut factors = Vec::with_capacity(n);
    for row in 0..n {
        let mut rng = seeds.stream(Stream::WorldRow, row as u64);
        let shape = rng.random_range(0..SHAPES.len());
        let colour = rng.random_range(0..COLOURS.len());
        let mut background = rng.random_range(0..COLOURS.len() - 1);
        if background >= colour {
            background += 1;
        }
        push_noisy(&mut features, &shape_protos[shape], &noise, &mut rng);
        push_noisy(&mut features, &colour_protos[colour], &noise, &mut rng);
        push_noisy(&mut features, &bg_protos[background], &noise, &mut rng);
        for v in [
            is_polygon(shape),
            is_light(colour),
            !is_light(colour),
            is_light(background),
            !is_light(background),
        ] {
            concepts.push(f64::from(u8::from(v)));
        }
        tasks.push(shape_class(shape, colour, background));
        factors.push([shape, colour, background]);
    }
    let hierarchy = ConceptHierarchy::leaves([
        "is-polygon",
        "shape-light",
        "shape-dark",
        "background-light",
        "background-dark",
    ])?;
    let mut bank = ConceptBank::default();
    for (s, name) in SHAPES.iter().enumerate() {
        bank.entries.push(BankEntry {
            name: format!("shape is {name}"),
            parent: "is-polygon".into(),
            polarity: if is_polygon(s) {
                Polarity::Positive
            } else {
                Polarity::Negative
            },
            column: factors.iter().map(|f| f[0] == s).collect(),
        });
    }
    for (slot, prefix, light, dark) in [
        (1, "shape colour", "shape-light", "shape-dark"),
        (2, "background", "background-light", "background-dark"),
    ] {
        for (c, name) in COLOURS.iter().enumerate() {
            bank.entries.push(BankEntry {
                name: format!("{prefix} is {name}"),
                parent: if is_light(c) { light } else { dark }.into(),
                polarity: Polarity::Positive,
                column: factors.iter().map(|f| f[slot] == c).collect(),
            });
        }
    }
    let dataset = Dataset {
        features: Matrix::from_vec(n, 3 * dim_per_factor, features)?,
        concepts: Matrix::from_vec(n, 5, concepts)?,
        sub_labels: Vec::new(),
        tasks,
        n_classes: SHAPE_CLASSES,
        splits: split_tags(&seeds, n),
    };
    Ok(World {
        dataset,
        bank,
        hierarchy,
    })
}

pub const ONEHOT_WIDTH: usize = 16;

/// Idealised embeddings: one-hot of the true sub-concept per parent.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotWorld {
    pub hierarchy: ConceptHierarchy,
    /// One record list per parent, one record per row.
    pub records: Vec<Vec<EmbeddingRecord>>,
    /// Parent truth per parent, per row.
    pub parent_labels: Vec<Vec<bool>>,
    /// Ground-truth sub-concept columns, named after the hierarchy's sub-concepts.
    pub bank: ConceptBank,
}

pub fn gen_onehot_world(seed: u64, parents: &ConceptHierarchy, n: usize) -> Result<OneHotWorld> {
    if n == 0 {
        return Err(Error::param("n must be at least 1"));
    }
    for c in parents.concepts() {
        if c.positive.is_empty() || c.negative.is_empty() {
            return Err(Error::param(format!(
                "`{}` needs at least one positive and one negative sub-concept",
                c.name
            )));
        }
        if c.positive.len() > ONEHOT_WIDTH || c.negative.len() > ONEHOT_WIDTH {
            return Err(Error::Capacity(format!(
                "`{}` has more sub-concepts than the embedding width {ONEHOT_WIDTH}",
                c.name
            )));
        }
    }
    let seeds = Seeds::new(seed);
    let mut records = vec![Vec::with_capacity(n); parents.len()];
    let mut parent_labels = vec![Vec::with_capacity(n); parents.len()];
    let mut truth: Vec<(usize, Polarity, usize)> = Vec::new();
    let mut columns: Vec<Vec<bool>> = parents
        .concepts()
        .iter()
        .flat_map(|c| vec![vec![false; n]; c.positive.len() + c.negative.len()])
        .collect();
    for row in 0..n {
        let mut rng = seeds.stream(Stream::WorldRow, row as u64);
        truth.clear();
        let mut col_base = 0;
        for (p, c) in parents.concepts().iter().enumerate() {
            let active = rng.random_bool(0.5);
            let polarity = if active {
                Polarity::Positive
            } else {
                Polarity::Negative
            };
            let j = rng.random_range(0..c.subs(polarity).len());
            let mut embedding = vec![0.0; ONEHOT_WIDTH];
            embedding[j] = 1.0;
            records[p].push(EmbeddingRecord {
                row,
                embedding,
                prob: if active { 1.0 } else { 0.0 },
            });
            parent_labels[p].push(active);
            let offset = if active { j } else { c.positive.len() + j };
            columns[col_base + offset][row] = true;
            col_base += c.positive.len() + c.negative.len();
        }
    }
    let mut bank = ConceptBank::default();
    let mut col = columns.into_iter();
    for c in parents.concepts() {
        for polarity in Polarity::BOTH {
            for name in c.subs(polarity) {
                bank.entries.push(BankEntry {
                    name: name.clone(),
                    parent: c.name.clone(),
                    polarity,
                    column: col.next().expect("one column per sub-concept"),
                });
            }
        }
    }
    Ok(OneHotWorld {
        hierarchy: parents.clone(),
        records,
        parent_labels,
        bank,
    })
}

/// `parents` top-level concepts, each with `subs` positive and `subs` negative children.
pub fn onehot_hierarchy(parents: usize, subs: usize) -> Result<ConceptHierarchy> {
    ConceptHierarchy::new(
        (0..parents)
            .map(|p| TopConcept {
                name: format!("c{p}"),
                positive: (0..subs).map(|j| format!("c{p}+{j}")).collect(),
                negative: (0..subs).map(|j| format!("c{p}-{j}")).collect(),
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_with_digits(world: &World, a: usize, b: usize) -> Option<usize> {
        let col_a = &world.bank.get(&format!("digit1 is {a}")).unwrap().column;
        let col_b = &world.bank.get(&format!("digit2 is {b}")).unwrap().column;
        (0..world.dataset.len()).find(|&r| col_a[r] && col_b[r])
    }

    #[test]
    fn digit_pair_row_semantics() {
        let w = gen_digit_pairs(3, 2000, 0.3, 16).unwrap();
        let r = row_with_digits(&w, 6, 2).expect("pair (6,2) present");
        assert!(w.dataset.concept(r, 0));
        assert!(!w.dataset.concept(r, 1));
        assert_eq!(w.dataset.tasks[r], 8);
        assert_eq!(w.bank.get("digit1 is 6").unwrap().polarity, Polarity::Positive);
        assert_eq!(w.bank.get("digit2 is 2").unwrap().polarity, Polarity::Negative);
        assert_eq!(w.bank.entries.len(), 14);
        assert_eq!(w.dataset.n_classes, 13);
        w.check_consistency().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_digit_pairs(11, 500, 0.3, 16).unwrap();
        let b = gen_digit_pairs(11, 500, 0.3, 16).unwrap();
        let bits = |w: &World| w.dataset.features.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a, b);
        let c = gen_digit_pairs(12, 500, 0.3, 16).unwrap();
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn splits_are_80_10_10() {
        let w = gen_digit_pairs(1, 1000, 0.3, 4).unwrap();
        assert_eq!(w.dataset.rows_in(Split::Train).len(), 800);
        assert_eq!(w.dataset.rows_in(Split::Val).len(), 100);
        assert_eq!(w.dataset.rows_in(Split::Test).len(), 100);
    }

    #[test]
    fn nearest_prototype_recovers_noise_free_digits() {
        let dim = 16;
        let w = gen_digit_pairs(5, 700, 0.0, dim).unwrap();
        let seeds = Seeds::new(5);
        let protos = [
            prototypes(&seeds, 0, DIGIT_VALUES, dim),
            prototypes(&seeds, 1, DIGIT_VALUES, dim),
        ];
        let mut correct = 0;
        for r in 0..w.dataset.len() {
            let f = w.dataset.features.row(r);
            let mut ok = true;
            for slot in 0..2 {
                let seg = &f[slot * dim..(slot + 1) * dim];
                let best = (0..DIGIT_VALUES)
                    .min_by(|&a, &b| {
                        let da: f64 = seg.iter().zip(&protos[slot][a]).map(|(x, y)| (x - y).powi(2)).sum();
                        let db: f64 = seg.iter().zip(&protos[slot][b]).map(|(x, y)| (x - y).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                ok &= w.bank.get(&format!("digit{} is {best}", slot + 1)).unwrap().column[r];
            }
            correct += usize::from(ok);
        }
        assert_eq!(correct, w.dataset.len());
    }

    #[test]
    fn negative_noise_rejected() {
        assert!(matches!(gen_digit_pairs(0, 10, -0.1, 4), Err(Error::Parameter(_))));
        assert!(matches!(gen_shapes(0, 10, -1.0, 4), Err(Error::Parameter(_))));
        assert!(gen_digit_pairs(0, 0, 0.1, 4).is_err());
    }

    #[test]
    fn shapes_semantics() {
        let w = gen_shapes(2, 3000, 0.3, 8).unwrap();
        let red = &w.bank.get("shape colour is red").unwrap().column;
        let circle = &w.bank.get("shape is circle").unwrap().column;
        let bg_blue = &w.bank.get("background is blue").unwrap().column;
        let r = (0..w.dataset.len())
            .find(|&r| red[r] && circle[r] && bg_blue[r])
            .expect("(circle, red, blue) present");
        let labels: Vec<bool> = (0..5).map(|c| w.dataset.concept(r, c)).collect();
        assert_eq!(labels, vec![false, true, false, false, true]);
        for r in 0..w.dataset.len() {
            assert_ne!(w.dataset.concept(r, 1), w.dataset.concept(r, 2));
            assert_ne!(w.dataset.concept(r, 3), w.dataset.concept(r, 4));
        }
        w.check_consistency().unwrap();
    }

    #[test]
    fn shapes_cover_48_classes() {
        let mut all = HashSet::new();
        for s in 0..4 {
            for c in 0..4 {
                for b in (0..4).filter(|&b| b != c) {
                    all.insert(shape_class(s, c, b));
                }
            }
        }
        assert_eq!(all.len(), 48);
        assert!(all.iter().all(|&c| c < 48));
        let w = gen_shapes(9, 10_000, 0.3, 4).unwrap();
        let seen: HashSet<usize> = w.dataset.tasks.iter().copied().collect();
        assert_eq!(seen.len(), 48);
    }

    #[test]
    fn onehot_world_shape() {
        let h = onehot_hierarchy(3, 3).unwrap();
        let w = gen_onehot_world(4, &h, 400).unwrap();
        for (p, recs) in w.records.iter().enumerate() {
            assert_eq!(recs.len(), 400);
            for rec in recs {
                assert_eq!(rec.embedding.iter().filter(|&&v| v != 0.0).count(), 1);
                assert_eq!(rec.embedding.iter().sum::<f64>(), 1.0);
                assert_eq!(rec.prob == 1.0, w.parent_labels[p][rec.row]);
            }
        }
        // each row has exactly one true sub per parent
        for r in 0..400 {
            for c in h.concepts() {
                let hits = w.bank.entries.iter().filter(|e| e.parent == c.name && e.column[r]).count();
                assert_eq!(hits, 1);
            }
        }
        // embedding index equals the true sub index
        let e = w.bank.get("c0+2").unwrap();
        for rec in &w.records[0] {
            if e.column[rec.row] {
                assert_eq!(rec.embedding[2], 1.0);
            }
        }
    }

    #[test]
    fn onehot_world_capacity() {
        let h = onehot_hierarchy(1, 17).unwrap();
        assert!(matches!(gen_onehot_world(0, &h, 10), Err(Error::Capacity(_))));
        let leaf = ConceptHierarchy::leaves(["x"]).unwrap();
        assert!(gen_onehot_world(0, &leaf, 10).is_err());
    }

    #[test]
    fn hierarchy_rejects_duplicates() {
        let h = ConceptHierarchy::new(vec![
            TopConcept {
                name: "a".into(),
                positive: vec!["b".into()],
                negative: vec![],
            },
            TopConcept::leaf("b"),
        ]);
        assert!(h.is_err());
    }
}
