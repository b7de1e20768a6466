//! The concept network shared by [`crate::cem`] and [`crate::hicem`].
//!
//! A flat CEM is the network whose hierarchy has only leaves: each polarity of a
//! leaf uses its generator output directly and is scored by the shared head, so
//! both model kinds run through exactly the same forward and backward code.
//!
//! Per top-level concept `i` and polarity `s`:
//!
//! - preliminary embedding `pre_is = phi_is(h)` (affine, `n_hidden -> m`);
//! - leaf polarity: `emb_is = pre_is`, `p_is = sigma(w . emb_is + b)`;
//! - otherwise every sub-concept `j` has `emb_ij = phi_ij(pre_is)` (affine `m -> m`),
//!   `p_ij = sigma(w . emb_ij + b)`; the side embedding is `sum_j p_ij emb_ij` and the
//!   side probability is the soft maximum of the `p_ij`;
//! - `p_i = (p_i+ + 1 - p_i-) / 2` and `emb_i = p_i emb_i+ + (1 - p_i) emb_i-`.
//!
//! The bottleneck concatenates all `emb_i` and a linear layer produces task logits.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{affine_row, affine_row_backward, dot, sigmoid_scalar, softmax_into, Matrix, Parameters};
use crate::rng::Rng;
use crate::worlds::{ConceptHierarchy, Polarity, SubRef};

pub const SOFT_MAX_ALPHA: f64 = 200.0;
pub const SOFT_MAX_BETA: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    /// `in x out`
    pub w: Matrix,
    /// `1 x out`
    pub b: Matrix,
}

impl Affine {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            w: Matrix::zeros(n_in, n_out),
            b: Matrix::zeros(1, n_out),
        }
    }

    /// Uniform in `[-1/sqrt(n_in), 1/sqrt(n_in)]` for weights and biases.
    pub fn init(n_in: usize, n_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (n_in.max(1) as f64).sqrt();
        let mut draw = |rows, cols| {
            let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            Matrix::from_vec(rows, cols, data).expect("finite init")
        };
        let w = draw(n_in, n_out);
        let b = draw(1, n_out);
        Self { w, b }
    }

    pub fn n_in(&self) -> usize {
        self.w.rows()
    }

    pub fn n_out(&self) -> usize {
        self.w.cols()
    }

    #[inline]
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_out()];
        affine_row(x, &self.w, &self.b, &mut out);
        out
    }
}

/// All learnable matrices of a concept network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub backbone: Option<Affine>,
    pub top_pos: Vec<Affine>,
    pub top_neg: Vec<Affine>,
    /// One generator per sub-concept, in [`ConceptHierarchy::sub_refs`] order.
    pub subs: Vec<Affine>,
    pub score: Affine,
    pub predictor: Affine,
}

impl NetParams {
    fn layers(&self) -> Vec<&Affine> {
        let mut out: Vec<&Affine> = self.backbone.iter().collect();
        out.extend(&self.top_pos);
        out.extend(&self.top_neg);
        out.extend(&self.subs);
        out.push(&self.score);
        out.push(&self.predictor);
        out
    }

    fn layers_mut(&mut self) -> Vec<&mut Affine> {
        let mut out: Vec<&mut Affine> = self.backbone.iter_mut().collect();
        out.extend(&mut self.top_pos);
        out.extend(&mut self.top_neg);
        out.extend(&mut self.subs);
        out.push(&mut self.score);
        out.push(&mut self.predictor);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let z = |a: &Affine| Affine::zeros(a.n_in(), a.n_out());
        Self {
            backbone: self.backbone.as_ref().map(z),
            top_pos: self.top_pos.iter().map(z).collect(),
            top_neg: self.top_neg.iter().map(z).collect(),
            subs: self.subs.iter().map(z).collect(),
            score: z(&self.score),
            predictor: z(&self.predictor),
        }
    }

    pub fn top(&self, polarity: Polarity) -> &[Affine] {
        match polarity {
            Polarity::Positive => &self.top_pos,
            Polarity::Negative => &self.top_neg,
        }
    }
}

impl Parameters for NetParams {
    fn params(&self) -> Vec<&Matrix> {
        self.layers().into_iter().flat_map(|a| [&a.w, &a.b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers_mut()
            .into_iter()
            .flat_map(|a| [&mut a.w, &mut a.b])
            .collect()
    }
}

/// Shape of a concept network independent of its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub n_input: usize,
    pub backbone_hidden: Option<usize>,
    pub m: usize,
    pub n_classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptNet {
    pub hierarchy: ConceptHierarchy,
    pub shape: NetShape,
    pub params: NetParams,
    /// Flat sub-generator offset per `(concept, polarity)`.
    sub_base: Vec<[usize; 2]>,
}

fn pol_idx(p: Polarity) -> usize {
    match p {
        Polarity::Positive => 0,
        Polarity::Negative => 1,
    }
}

fn sub_offsets(h: &ConceptHierarchy) -> Vec<[usize; 2]> {
    let mut next = 0;
    h.concepts()
        .iter()
        .map(|c| {
            let pos = next;
            next += c.positive.len();
            let neg = next;
            next += c.negative.len();
            [pos, neg]
        })
        .collect()
}

/// Forced probabilities for one forward pass. `None` leaves the prediction alone.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Forcing {
    pub top: Vec<Option<f64>>,
    pub sub: Vec<Option<f64>>,
}

impl Forcing {
    pub fn none(net: &ConceptNet) -> Self {
        Self {
            top: vec![None; net.hierarchy.len()],
            sub: vec![None; net.params.subs.len()],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.top.iter().chain(&self.sub).all(Option::is_none)
    }
}

/// One polarity of one top-level concept after the sub-concept module (or leaf rule).
#[derive(Clone, Debug, PartialEq)]
pub struct SideState {
    pub embedding: Vec<f64>,
    /// Probability used downstream (soft maximum over subs, or leaf score).
    pub prob: f64,
    /// Unclamped soft-maximum value; equals `prob` for leaves.
    raw_prob: f64,
    pub sub_embeddings: Vec<Vec<f64>>,
    /// Sub probabilities after forcing.
    pub sub_probs: Vec<f64>,
    /// Sub probabilities as predicted by the scoring head.
    pub sub_predicted: Vec<f64>,
    pub sub_forced: Vec<bool>,
    pub softmax_weights: Vec<f64>,
}

impl SideState {
    pub fn is_leaf(&self) -> bool {
        self.sub_embeddings.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptState {
    /// Generator outputs `phi_i+(h)`, `phi_i-(h)`.
    pub pre: [Vec<f64>; 2],
    pub sides: [SideState; 2],
    /// `(p_i+ + 1 - p_i-) / 2`, before any top-level forcing.
    pub predicted: f64,
    /// Mixture weight actually used (forced value when intervened).
    pub prob: f64,
    pub forced: bool,
    pub embedding: Vec<f64>,
}

impl ConceptState {
    pub fn side(&self, p: Polarity) -> &SideState {
        &self.sides[pol_idx(p)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    backbone_pre: Option<Vec<f64>>,
    pub h: Vec<f64>,
    pub concepts: Vec<ConceptState>,
    pub bottleneck: Vec<f64>,
    pub logits: Vec<f64>,
    pub task_probs: Vec<f64>,
}

impl Forward {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }

    pub fn concept_probs(&self) -> Vec<f64> {
        self.concepts.iter().map(|c| c.prob).collect()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `p c_plus + (1 - p) c_minus`, returning the exact endpoint at `p` of 0 or 1.
pub fn mix(p: f64, c_plus: &[f64], c_minus: &[f64]) -> Vec<f64> {
    if p == 1.0 {
        return c_plus.to_vec();
    }
    if p == 0.0 {
        return c_minus.to_vec();
    }
    c_plus
        .iter()
        .zip(c_minus)
        .map(|(a, b)| p * a + (1.0 - p) * b)
        .collect()
}

/// Soft maximum `sum_j softmax(alpha p - beta)_j p_j` with the softmax weights.
/// The value is clamped into `[min p, max p]` to absorb rounding.
pub fn soft_max_weights(probs: &[f64], alpha: f64, beta: f64) -> (f64, f64, Vec<f64>) {
    let scaled: Vec<f64> = probs.iter().map(|&p| alpha * p - beta).collect();
    let mut weights = vec![0.0; probs.len()];
    softmax_into(&scaled, &mut weights);
    let raw: f64 = weights.iter().zip(probs).map(|(a, p)| a * p).sum();
    let lo = probs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (raw.clamp(lo, hi), raw, weights)
}

/// `sum_j p_j e_j` over nonzero weights, so a single weight of 1 reproduces `e_j` exactly.
fn weighted_sum(probs: &[f64], embs: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut out: Option<Vec<f64>> = None;
    for (&p, e) in probs.iter().zip(embs) {
        if p == 0.0 {
            continue;
        }
        match out.as_mut() {
            None => out = Some(e.iter().map(|v| p * v).collect()),
            Some(acc) => acc.iter_mut().zip(e).for_each(|(a, v)| *a += p * v),
        }
    }
    out.unwrap_or_else(|| vec![0.0; m])
}

/// Gradients of the per-sample loss with respect to the network outputs.
#[derive(Clone, Debug)]
pub struct OutputGrads {
    pub logits: Vec<f64>,
    /// d loss / d `predicted` per top-level concept.
    pub top: Vec<f64>,
    /// d loss / d `sub_predicted`, flat sub order.
    pub sub: Vec<f64>,
}

impl ConceptNet {
    pub fn init(hierarchy: ConceptHierarchy, shape: NetShape, rng: &mut Rng) -> Result<Self> {
        if shape.m == 0 || shape.n_classes == 0 || shape.n_input == 0 || hierarchy.is_empty() {
            return Err(Error::param("network needs m, classes, inputs and concepts > 0"));
        }
        let k = hierarchy.len();
        let m = shape.m;
        let backbone = shape.backbone_hidden.map(|hid| Affine::init(shape.n_input, hid, rng));
        let n_hidden = shape.backbone_hidden.unwrap_or(shape.n_input);
        let mut top_pos = Vec::with_capacity(k);
        let mut top_neg = Vec::with_capacity(k);
        for _ in 0..k {
            top_pos.push(Affine::init(n_hidden, m, rng));
            top_neg.push(Affine::init(n_hidden, m, rng));
        }
        let n_subs = hierarchy.sub_refs().len();
        let subs = (0..n_subs).map(|_| Affine::init(m, m, rng)).collect();
        let score = Affine::init(m, 1, rng);
        let predictor = Affine::init(k * m, shape.n_classes, rng);
        let sub_base = sub_offsets(&hierarchy);
        Ok(Self {
            hierarchy,
            shape,
            params: NetParams {
                backbone,
                top_pos,
                top_neg,
                subs,
                score,
                predictor,
            },
            sub_base,
        })
    }

    /// Rebuilds a network from stored parameters, checking every shape.
    pub fn from_parts(hierarchy: ConceptHierarchy, shape: NetShape, params: NetParams) -> Result<Self> {
        let k = hierarchy.len();
        let m = shape.m;
        let n_hidden = shape.backbone_hidden.unwrap_or(shape.n_input);
        let check = |a: &Affine, n_in: usize, n_out: usize, what: &str| -> Result<()> {
            if a.w.shape() != (n_in, n_out) || a.b.shape() != (1, n_out) {
                Err(Error::dim(format!("{what}: expected {n_in}x{n_out}, got {:?}", a.w.shape())))
            } else {
                Ok(())
            }
        };
        match (&params.backbone, shape.backbone_hidden) {
            (Some(b), Some(hid)) => check(b, shape.n_input, hid, "backbone")?,
            (None, None) => {}
            _ => return Err(Error::dim("backbone presence mismatch")),
        }
        if params.top_pos.len() != k || params.top_neg.len() != k {
            return Err(Error::dim("one generator pair per concept"));
        }
        for a in params.top_pos.iter().chain(&params.top_neg) {
            check(a, n_hidden, m, "concept generator")?;
        }
        if params.subs.len() != hierarchy.sub_refs().len() {
            return Err(Error::dim("one generator per sub-concept"));
        }
        for a in &params.subs {
            check(a, m, m, "sub-concept generator")?;
        }
        check(&params.score, m, 1, "scoring head")?;
        check(&params.predictor, k * m, shape.n_classes, "label predictor")?;
        let sub_base = sub_offsets(&hierarchy);
        Ok(Self {
            hierarchy,
            shape,
            params,
            sub_base,
        })
    }

    pub fn m(&self) -> usize {
        self.shape.m
    }

    pub fn k(&self) -> usize {
        self.hierarchy.len()
    }

    pub fn n_subs(&self) -> usize {
        self.params.subs.len()
    }

    /// Flat index of a sub-concept generator.
    pub fn sub_ordinal(&self, sub: SubRef) -> usize {
        self.sub_base[sub.parent][pol_idx(sub.polarity)] + sub.index
    }

    pub fn sub_refs(&self) -> Vec<SubRef> {
        self.hierarchy.sub_refs()
    }

    #[inline]
    fn score(&self, emb: &[f64]) -> f64 {
        sigmoid_scalar(dot(self.params.score.w.data(), emb) + self.params.score.b.data()[0])
    }

    /// Scoring head applied to an arbitrary embedding.
    pub fn score_embedding(&self, emb: &[f64]) -> f64 {
        self.score(emb)
    }

    pub(crate) fn side_forward(&self, concept: usize, polarity: Polarity, pre: &[f64], forcing: &Forcing) -> SideState {
        let n_sub = self.hierarchy.sub_count(concept, polarity);
        if n_sub == 0 {
            let prob = self.score(pre);
            return SideState {
                embedding: pre.to_vec(),
                prob,
                raw_prob: prob,
                sub_embeddings: Vec::new(),
                sub_probs: Vec::new(),
                sub_predicted: Vec::new(),
                sub_forced: Vec::new(),
                softmax_weights: Vec::new(),
            };
        }
        let base = self.sub_base[concept][pol_idx(polarity)];
        let mut sub_embeddings = Vec::with_capacity(n_sub);
        let mut sub_probs = Vec::with_capacity(n_sub);
        let mut sub_predicted = Vec::with_capacity(n_sub);
        let mut sub_forced = Vec::with_capacity(n_sub);
        for j in 0..n_sub {
            let e = self.params.subs[base + j].apply(pre);
            let pred = self.score(&e);
            let forced = forcing.sub.get(base + j).copied().flatten();
            sub_predicted.push(pred);
            sub_probs.push(forced.unwrap_or(pred));
            sub_forced.push(forced.is_some());
            sub_embeddings.push(e);
        }
        let embedding = weighted_sum(&sub_probs, &sub_embeddings, self.m());
        let (prob, raw_prob, softmax_weights) = soft_max_weights(&sub_probs, SOFT_MAX_ALPHA, SOFT_MAX_BETA);
        SideState {
            embedding,
            prob,
            raw_prob,
            sub_embeddings,
            sub_probs,
            sub_predicted,
            sub_forced,
            softmax_weights,
        }
    }

    /// Full forward pass on one input row.
    pub fn forward(&self, x: &[f64], forcing: &Forcing) -> Result<Forward> {
        if x.len() != self.shape.n_input {
            return Err(Error::dim(format!(
                "input width {} but the network expects {}",
                x.len(),
                self.shape.n_input
            )));
        }
        Ok(self.forward_unchecked(x, forcing))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64], forcing: &Forcing) -> Forward {
        let (backbone_pre, h) = match &self.params.backbone {
            Some(bb) => {
                let pre = bb.apply(x);
                let h = pre.iter().map(|&v| v.max(0.0)).collect();
                (Some(pre), h)
            }
            None => (None, x.to_vec()),
        };
        let m = self.m();
        let mut concepts = Vec::with_capacity(self.k());
        let mut bottleneck = Vec::with_capacity(self.k() * m);
        for i in 0..self.k() {
            let pre = [self.params.top_pos[i].apply(&h), self.params.top_neg[i].apply(&h)];
            let sides = [
                self.side_forward(i, Polarity::Positive, &pre[0], forcing),
                self.side_forward(i, Polarity::Negative, &pre[1], forcing),
            ];
            let predicted = toplevel_prob(sides[0].prob, sides[1].prob);
            let forced = forcing.top.get(i).copied().flatten();
            let prob = forced.unwrap_or(predicted);
            let embedding = mix(prob, &sides[0].embedding, &sides[1].embedding);
            bottleneck.extend_from_slice(&embedding);
            concepts.push(ConceptState {
                pre,
                sides,
                predicted,
                prob,
                forced: forced.is_some(),
                embedding,
            });
        }
        let logits = self.params.predictor.apply(&bottleneck);
        let mut task_probs = vec![0.0; logits.len()];
        softmax_into(&logits, &mut task_probs);
        Forward {
            backbone_pre,
            h,
            concepts,
            bottleneck,
            logits,
            task_probs,
        }
    }

    /// Accumulates parameter gradients for one sample into `grads`.
    pub fn backward(&self, x: &[f64], fwd: &Forward, out: &OutputGrads, grads: &mut NetParams) {
        let m = self.m();
        let p = &self.params;
        let mut dbottleneck = vec![0.0; self.k() * m];
        affine_row_backward(
            &fwd.bottleneck,
            &p.predictor.w,
            &out.logits,
            &mut grads.predictor.w,
            &mut grads.predictor.b,
            Some(&mut dbottleneck),
        );
        let mut dh = p.backbone.as_ref().map(|_| vec![0.0; fwd.h.len()]);
        let w_score = p.score.w.data();
        for (i, st) in fwd.concepts.iter().enumerate() {
            let dc = &dbottleneck[i * m..(i + 1) * m];
            let mut dp = out.top[i];
            if !st.forced {
                dp += dc
                    .iter()
                    .zip(&st.sides[0].embedding)
                    .zip(&st.sides[1].embedding)
                    .map(|((d, a), b)| d * (a - b))
                    .sum::<f64>();
            }
            let d_side_prob = [0.5 * dp, -0.5 * dp];
            let weights = [st.prob, 1.0 - st.prob];
            for (s, polarity) in Polarity::BOTH.into_iter().enumerate() {
                let side = &st.sides[s];
                let d_emb: Vec<f64> = dc.iter().map(|d| weights[s] * d).collect();
                let mut dpre = vec![0.0; m];
                if side.is_leaf() {
                    let dz = d_side_prob[s] * side.prob * (1.0 - side.prob);
                    accumulate_score(grads, &side.embedding, dz);
                    for ((g, d), w) in dpre.iter_mut().zip(&d_emb).zip(w_score) {
                        *g = d + dz * w;
                    }
                } else {
                    let base = self.sub_base[i][s];
                    for j in 0..side.sub_embeddings.len() {
                        let e = &side.sub_embeddings[j];
                        let pj = side.sub_probs[j];
                        let aj = side.softmax_weights[j];
                        let mut dpj = d_side_prob[s] * (aj + SOFT_MAX_ALPHA * aj * (pj - side.raw_prob));
                        dpj += dot(&d_emb, e);
                        let mut dpred = out.sub[base + j];
                        if !side.sub_forced[j] {
                            dpred += dpj;
                        }
                        let pred = side.sub_predicted[j];
                        let dz = dpred * pred * (1.0 - pred);
                        accumulate_score(grads, e, dz);
                        let de: Vec<f64> = d_emb
                            .iter()
                            .zip(w_score)
                            .map(|(d, w)| pj * d + dz * w)
                            .collect();
                        let g = &mut grads.subs[base + j];
                        affine_row_backward(&st.pre[s], &p.subs[base + j].w, &de, &mut g.w, &mut g.b, Some(&mut dpre));
                    }
                }
                let (gen, ggen) = match polarity {
                    Polarity::Positive => (&p.top_pos[i], &mut grads.top_pos[i]),
                    Polarity::Negative => (&p.top_neg[i], &mut grads.top_neg[i]),
                };
                affine_row_backward(&fwd.h, &gen.w, &dpre, &mut ggen.w, &mut ggen.b, dh.as_deref_mut());
            }
        }
        if let (Some(bb), Some(dh), Some(pre), Some(gbb)) =
            (&p.backbone, dh, &fwd.backbone_pre, grads.backbone.as_mut())
        {
            let dpre: Vec<f64> = dh.iter().zip(pre).map(|(d, &z)| if z > 0.0 { *d } else { 0.0 }).collect();
            affine_row_backward(x, &bb.w, &dpre, &mut gbb.w, &mut gbb.b, None);
        }
    }
}

fn accumulate_score(grads: &mut NetParams, emb: &[f64], dz: f64) {
    if dz == 0.0 {
        return;
    }
    for (g, e) in grads.score.w.data_mut().iter_mut().zip(emb) {
        *g += dz * e;
    }
    grads.score.b.data_mut()[0] += dz;
}

/// `(p_plus + 1 - p_minus) / 2`.
#[inline]
pub fn toplevel_prob(p_plus: f64, p_minus: f64) -> f64 {
    0.5 * (p_plus + 1.0 - p_minus)
}

/// A test-time intervention request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Intervention {
    /// Fix a top-level concept to its ground truth.
    Top { concept: usize, present: bool },
    /// Fix a sub-concept. "Present" zeroes its siblings and fixes the parent to the
    /// sub-concept's polarity; "absent" only zeroes the sub-concept.
    Sub { sub: SubRef, present: bool },
}

impl ConceptNet {
    /// Resolves interventions into forced probabilities; later requests override
    /// earlier ones on the same target.
    pub fn compile(&self, interventions: &[Intervention]) -> Result<Forcing> {
        let mut forcing = Forcing::none(self);
        for iv in interventions {
            match *iv {
                Intervention::Top { concept, present } => {
                    if concept >= self.k() {
                        return Err(Error::Lookup {
                            kind: "concept",
                            name: concept.to_string(),
                        });
                    }
                    forcing.top[concept] = Some(if present { 1.0 } else { 0.0 });
                }
                Intervention::Sub { sub, present } => {
                    self.hierarchy.check_sub(sub)?;
                    let ord = self.sub_ordinal(sub);
                    if present {
                        let base = self.sub_base[sub.parent][pol_idx(sub.polarity)];
                        for j in 0..self.hierarchy.sub_count(sub.parent, sub.polarity) {
                            forcing.sub[base + j] = Some(0.0);
                        }
                        forcing.sub[ord] = Some(1.0);
                        forcing.top[sub.parent] = Some(if sub.polarity.parent_value() { 1.0 } else { 0.0 });
                    } else {
                        forcing.sub[ord] = Some(0.0);
                    }
                }
            }
        }
        Ok(forcing)
    }
}
