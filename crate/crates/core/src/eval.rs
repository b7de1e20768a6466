//! ROC-AUC, concept-bank matching, model reports and intervention curves.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{ConceptNet, Forcing, Forward, Intervention};
use crate::rng::{Seeds, Stream};
use crate::splitting::{DiscoveredSubConcept, SubConceptSource};
use crate::worlds::{ConceptBank, Dataset, Polarity, Split, SubRef};

/// Matching threshold on ROC-AUC.
pub const MATCH_THRESHOLD: f64 = 0.7;

/// Probability that a random positive outscores a random negative, ties counted as
/// one half. Computed from average ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!("{n_pos} positives and {n_neg} negatives")));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Numeric(format!("score {s}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        let pos_in_tie = order[i..=j].iter().filter(|&&r| labels[r]).count();
        rank_sum += avg * pos_in_tie as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

fn bool_scores(v: &[bool]) -> Vec<f64> {
    v.iter().map(|&b| f64::from(u8::from(b))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub bank: String,
    pub parent: String,
    pub polarity: Polarity,
    pub sub: Option<String>,
    /// AUC of the discovered labels against the bank column on the label rows.
    pub match_auc: Option<f64>,
    /// AUC of the trained model's sub-concept probability on the test split.
    pub test_auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchTable {
    pub rows: Vec<MatchRow>,
}

impl MatchTable {
    pub fn matched(&self) -> impl Iterator<Item = &MatchRow> {
        self.rows.iter().filter(|r| r.sub.is_some())
    }

    pub fn row(&self, bank: &str) -> Option<&MatchRow> {
        self.rows.iter().find(|r| r.bank == bank)
    }
}

/// Matched sub-concepts (duplicates merged) and the table describing the match.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Matching {
    pub table: MatchTable,
    pub subs: Vec<DiscoveredSubConcept>,
}

fn merge(group: &[&DiscoveredSubConcept]) -> DiscoveredSubConcept {
    if let [only] = group {
        return (*only).clone();
    }
    let mut out = group[0].clone();
    let mut ids: Vec<String> = group.iter().map(|s| s.id.clone()).collect();
    ids.sort();
    for s in &group[1..] {
        for i in 0..out.labels.len() {
            out.labels[i] |= s.labels[i];
            out.activations[i] = out.activations[i].max(s.activations[i]);
        }
    }
    out.id = ids.join("+");
    out.source = SubConceptSource::Merged { ids };
    out
}

/// Matches discovered sub-concepts to bank entries of the same parent and polarity.
///
/// Each discovered sub-concept votes for the bank entry it agrees with best. An entry's
/// voters are OR-merged best first, skipping any voter that would lower the merged AUC,
/// and the entry is matched if the result clears the threshold. Entries with no voter
/// take the best remaining candidate above the threshold.
/// Sub-concepts matched to no entry are dropped.
pub fn match_to_bank(discovered: &[DiscoveredSubConcept], bank: &ConceptBank) -> Result<Matching> {
    let mut table = MatchTable::default();
    let mut kept: Vec<DiscoveredSubConcept> = Vec::new();
    // (parent, polarity) groups in bank order
    let mut groups: Vec<(String, Polarity)> = Vec::new();
    for e in &bank.entries {
        if !groups.iter().any(|g| g.0 == e.parent && g.1 == e.polarity) {
            groups.push((e.parent.clone(), e.polarity));
        }
    }
    for (parent, polarity) in groups {
        let entries: Vec<_> = bank
            .entries
            .iter()
            .filter(|e| e.parent == parent && e.polarity == polarity)
            .collect();
        let cands: Vec<&DiscoveredSubConcept> = discovered
            .iter()
            .filter(|s| s.parent_name == parent && s.polarity == polarity)
            .collect();
        // auc[c][e], None where undefined on the label rows
        let truth: Vec<Vec<bool>> = entries
            .iter()
            .map(|e| cands.first().map_or(Vec::new(), |c| c.rows.iter().map(|&r| e.column[r]).collect()))
            .collect();
        let auc: Vec<Vec<Option<f64>>> = cands
            .iter()
            .map(|c| {
                let s = bool_scores(&c.labels);
                truth.iter().map(|t| roc_auc(&s, t).ok()).collect()
            })
            .collect();
        let mut voters: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (c, row) in auc.iter().enumerate() {
            let best = row
                .iter()
                .enumerate()
                .filter_map(|(e, a)| a.map(|a| (e, a)))
                .fold(None, |acc: Option<(usize, f64)>, (e, a)| match acc {
                    Some((_, b)) if b >= a => acc,
                    _ => Some((e, a)),
                });
            if let Some((e, a)) = best {
                if a > 0.5 {
                    voters.entry(e).or_default().push(c);
                }
            }
        }
        // voted entries first, so later fallbacks can reuse merged forms
        let mut chosen: Vec<Option<(DiscoveredSubConcept, f64)>> = vec![None; entries.len()];
        for (&e, vs) in &voters {
            // best voter first; a voter joins the merge only if it raises the AUC
            let mut order = vs.clone();
            order.sort_by(|&a, &b| {
                let (x, y) = (auc[a][e].unwrap_or(0.0), auc[b][e].unwrap_or(0.0));
                y.total_cmp(&x).then(a.cmp(&b))
            });
            let mut group = vec![cands[order[0]]];
            let mut best = auc[order[0]][e].unwrap_or(0.0);
            for &c in &order[1..] {
                group.push(cands[c]);
                match roc_auc(&bool_scores(&merge(&group).labels), &truth[e]) {
                    Ok(a) if a > best => best = a,
                    _ => {
                        group.pop();
                    }
                }
            }
            if best > MATCH_THRESHOLD {
                chosen[e] = Some((merge(&group), best));
            }
        }
        let voted_forms: Vec<DiscoveredSubConcept> = chosen.iter().flatten().map(|(s, _)| s.clone()).collect();
        for e in 0..entries.len() {
            if voters.contains_key(&e) {
                continue;
            }
            let best = (0..cands.len())
                .filter_map(|c| auc[c][e].map(|a| (c, a)))
                .fold(None, |acc: Option<(usize, f64)>, (c, a)| match acc {
                    Some((_, b)) if b >= a => acc,
                    _ => Some((c, a)),
                });
            if let Some((c, a)) = best.filter(|&(_, a)| a > MATCH_THRESHOLD) {
                let id = &cands[c].id;
                let sub = voted_forms
                    .iter()
                    .find(|s| match &s.source {
                        SubConceptSource::Merged { ids } => ids.contains(id),
                        _ => &s.id == id,
                    })
                    .cloned()
                    .unwrap_or_else(|| cands[c].clone());
                chosen[e] = Some((sub, a));
            }
        }
        let mut local: Vec<DiscoveredSubConcept> = Vec::new();
        for (entry, pick) in entries.iter().zip(chosen) {
            let (sub, match_auc) = match pick {
                Some((s, a)) => {
                    let id = s.id.clone();
                    if !local.iter().any(|k| k.id == id) {
                        local.push(s);
                    }
                    (Some(id), Some(a))
                }
                None => (None, None),
            };
            table.rows.push(MatchRow {
                bank: entry.name.clone(),
                parent: parent.clone(),
                polarity,
                sub,
                match_auc,
                test_auc: None,
            });
        }
        kept.extend(local);
    }
    Ok(Matching { table, subs: kept })
}

/// Per-row model outputs needed by the metrics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Predictions {
    pub rows: Vec<usize>,
    pub task_probs: Vec<Vec<f64>>,
    /// `rows x k` top-level probabilities.
    pub concept_probs: Vec<Vec<f64>>,
    /// Sub-concept probabilities keyed by sub-concept name.
    pub sub_probs: BTreeMap<String, Vec<f64>>,
}

fn sub_prob(fwd: &Forward, sub: SubRef) -> f64 {
    fwd.concepts[sub.parent].side(sub.polarity).sub_probs[sub.index]
}

pub fn predict(net: &ConceptNet, data: &Dataset, rows: &[usize]) -> Result<Predictions> {
    let none = Forcing::none(net);
    let refs = net.sub_refs();
    let mut p = Predictions {
        rows: rows.to_vec(),
        ..Default::default()
    };
    for s in &refs {
        p.sub_probs.insert(net.hierarchy.sub_name(*s).to_string(), Vec::with_capacity(rows.len()));
    }
    for &r in rows {
        let fwd = net.forward(data.features.row(r), &none)?;
        p.task_probs.push(fwd.task_probs.clone());
        p.concept_probs.push(fwd.concept_probs());
        for s in &refs {
            p.sub_probs
                .get_mut(net.hierarchy.sub_name(*s))
                .expect("inserted above")
                .push(sub_prob(&fwd, *s));
        }
    }
    Ok(p)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub task_accuracy: f64,
    pub concept_auc: Vec<(String, Option<f64>)>,
    pub concept_auc_mean: f64,
    /// Bank entry, sub-concept id, test AUC.
    pub sub_auc: Vec<(String, String, Option<f64>)>,
    pub sub_auc_mean: Option<f64>,
    pub n_test: usize,
}

fn mean_defined<'a>(v: impl Iterator<Item = &'a Option<f64>>) -> Option<f64> {
    let vals: Vec<f64> = v.filter_map(|x| *x).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Metrics from precomputed predictions; `names` are the top-level concept names.
pub fn report_from_predictions(
    pred: &Predictions,
    data: &Dataset,
    names: &[String],
    bank: &ConceptBank,
    table: &MatchTable,
) -> Result<ModelReport> {
    if pred.rows.is_empty() {
        return Err(Error::Config("empty test split".into()));
    }
    let correct = pred
        .rows
        .iter()
        .zip(&pred.task_probs)
        .filter(|(&r, probs)| crate::net::argmax(probs) == data.tasks[r])
        .count();
    let concept_auc: Vec<(String, Option<f64>)> = names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let s: Vec<f64> = pred.concept_probs.iter().map(|p| p[i]).collect();
            let l: Vec<bool> = pred.rows.iter().map(|&r| data.concept(r, i)).collect();
            (n.clone(), roc_auc(&s, &l).ok())
        })
        .collect();
    let mut sub_auc = Vec::new();
    for row in table.matched() {
        let id = row.sub.as_deref().expect("matched");
        let (Some(scores), Some(entry)) = (pred.sub_probs.get(id), bank.get(&row.bank)) else {
            continue;
        };
        let l: Vec<bool> = pred.rows.iter().map(|&r| entry.column[r]).collect();
        sub_auc.push((row.bank.clone(), id.to_string(), roc_auc(scores, &l).ok()));
    }
    Ok(ModelReport {
        task_accuracy: correct as f64 / pred.rows.len() as f64,
        concept_auc_mean: mean_defined(concept_auc.iter().map(|c| &c.1)).unwrap_or(f64::NAN),
        sub_auc_mean: mean_defined(sub_auc.iter().map(|s| &s.2)),
        concept_auc,
        sub_auc,
        n_test: pred.rows.len(),
    })
}

/// Task accuracy, provided-concept AUC and matched sub-concept AUC on the test split.
pub fn evaluate_model(net: &ConceptNet, data: &Dataset, bank: &ConceptBank, table: &MatchTable) -> Result<ModelReport> {
    let rows = data.rows_in(Split::Test);
    let pred = predict(net, data, &rows)?;
    let names: Vec<String> = net.hierarchy.names().map(str::to_string).collect();
    report_from_predictions(&pred, data, &names, bank, table)
}

/// Table with `test_auc` filled from a model report.
pub fn with_test_auc(table: &MatchTable, report: &ModelReport) -> MatchTable {
    let mut t = table.clone();
    for row in &mut t.rows {
        row.test_auc = report
            .sub_auc
            .iter()
            .find(|(b, _, _)| *b == row.bank)
            .and_then(|(_, _, a)| *a);
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    TopLevel,
    SubConcept,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveOrder {
    /// Fresh uniform order per sample and trial.
    #[default]
    Random,
    /// Targets in their listed order.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurveConfig {
    pub trials: usize,
    pub seed: u64,
    pub order: CurveOrder,
    /// Intervene with the model's own thresholded predictions instead of ground truth.
    pub use_predictions: bool,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            trials: 5,
            seed: 0,
            order: CurveOrder::Random,
            use_predictions: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub intervened: usize,
    pub accuracy: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionCurve {
    pub kind: InterventionKind,
    pub trials: usize,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
}

/// One intervenable target: the request and a per-row truth.
struct Target {
    make: Box<dyn Fn(bool) -> Intervention>,
    truth: Vec<bool>,
}

fn targets(net: &ConceptNet, data: &Dataset, bank: &ConceptBank, table: &MatchTable, kind: InterventionKind) -> Vec<Target> {
    match kind {
        InterventionKind::TopLevel => (0..net.k())
            .map(|concept| Target {
                make: Box::new(move |present| Intervention::Top { concept, present }),
                truth: (0..data.len()).map(|r| data.concept(r, concept)).collect(),
            })
            .collect(),
        InterventionKind::SubConcept => table
            .matched()
            .filter_map(|row| {
                let sub = net.hierarchy.find_sub(row.sub.as_deref()?)?;
                let entry = bank.get(&row.bank)?;
                Some(Target {
                    make: Box::new(move |present| Intervention::Sub { sub, present }),
                    truth: entry.column.clone(),
                })
            })
            .collect(),
    }
}

/// Test accuracy as 0, 1, ... targets are intervened, averaged over trials.
pub fn intervention_curve(
    net: &ConceptNet,
    data: &Dataset,
    bank: &ConceptBank,
    table: &MatchTable,
    kind: InterventionKind,
    config: &CurveConfig,
) -> Result<InterventionCurve> {
    let rows = data.rows_in(Split::Test);
    if rows.is_empty() {
        return Err(Error::Config("empty test split".into()));
    }
    let targets = targets(net, data, bank, table, kind);
    let t_max = targets.len();
    let trials = config.trials.max(1);
    let seeds = Seeds::new(config.seed);
    let none = Forcing::none(net);
    let plain: Vec<Forward> = rows
        .iter()
        .map(|&r| net.forward(data.features.row(r), &none))
        .collect::<Result<_>>()?;
    // acc[trial][t]
    let mut acc = vec![vec![0usize; t_max + 1]; trials];
    for (trial, acc_trial) in acc.iter_mut().enumerate() {
        let mut rng = seeds.stream(Stream::Curve, trial as u64);
        for (i, &r) in rows.iter().enumerate() {
            let mut order: Vec<usize> = (0..t_max).collect();
            if config.order == CurveOrder::Random {
                order.shuffle(&mut rng);
            }
            let x = data.features.row(r);
            let mut ivs = Vec::with_capacity(t_max);
            for t in 0..=t_max {
                if t > 0 {
                    let tg = &targets[order[t - 1]];
                    let present = if config.use_predictions {
                        predicted_truth(&plain[i], &tg.make, kind)
                    } else {
                        tg.truth[r]
                    };
                    ivs.push((tg.make)(present));
                }
                let fwd = if t == 0 {
                    plain[i].clone()
                } else {
                    net.forward(x, &net.compile(&ivs)?)?
                };
                if fwd.predicted_class() == data.tasks[r] {
                    acc_trial[t] += 1;
                }
            }
        }
    }
    let n = rows.len() as f64;
    let points = (0..=t_max)
        .map(|t| {
            let vals: Vec<f64> = acc.iter().map(|a| a[t] as f64 / n).collect();
            let mean = vals.iter().sum::<f64>() / trials as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / trials as f64;
            CurvePoint {
                intervened: t,
                accuracy: mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(InterventionCurve {
        kind,
        trials,
        seed: config.seed,
        points,
    })
}

fn predicted_truth(fwd: &Forward, make: &dyn Fn(bool) -> Intervention, kind: InterventionKind) -> bool {
    match (kind, make(true)) {
        (_, Intervention::Top { concept, .. }) => fwd.concepts[concept].prob > 0.5,
        (_, Intervention::Sub { sub, .. }) => sub_prob(fwd, sub) > 0.5,
    }
}

/// Two-column tab-separated curve: intervened count and mean accuracy.
pub fn curve_tsv(curve: &InterventionCurve) -> String {
    let mut s = String::from("intervened\taccuracy\n");
    for p in &curve.points {
        s.push_str(&format!("{}\t{}\n", p.intervened, p.accuracy));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worlds::BankEntry;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.8, 0.6, 0.4, 0.2], &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedAuc(_))));
    }

    fn sub(id: &str, parent: &str, polarity: Polarity, labels: &[bool]) -> DiscoveredSubConcept {
        DiscoveredSubConcept {
            id: id.into(),
            parent: 0,
            parent_name: parent.into(),
            polarity,
            source: SubConceptSource::Sae { feature: 0, theta: 0.0 },
            rows: (0..labels.len()).collect(),
            labels: labels.to_vec(),
            activations: labels.iter().map(|&l| f64::from(u8::from(l))).collect(),
        }
    }

    fn entry(name: &str, parent: &str, polarity: Polarity, column: &[bool]) -> BankEntry {
        BankEntry {
            name: name.into(),
            parent: parent.into(),
            polarity,
            column: column.to_vec(),
        }
    }

    const T: bool = true;
    const F: bool = false;

    #[test]
    fn matching_picks_argmax_above_threshold() {
        let truth = [T, T, T, T, F, F, F, F, F, F];
        let good = sub("p/pos/f0", "p", Polarity::Positive, &[T, T, T, T, F, F, F, F, F, T]);
        let weak = sub("p/pos/f1", "p", Polarity::Positive, &[T, F, F, F, T, F, F, F, F, F]);
        let bank = ConceptBank {
            entries: vec![entry("a", "p", Polarity::Positive, &truth)],
        };
        let m = match_to_bank(&[weak.clone(), good.clone()], &bank).unwrap();
        let row = m.table.row("a").unwrap();
        assert_eq!(row.sub.as_deref(), Some("p/pos/f0"));
        assert!(row.match_auc.unwrap() > 0.9);
        assert_eq!(m.subs.len(), 1);
        // best candidate below 0.7 stays unmatched
        let m = match_to_bank(&[weak], &bank).unwrap();
        assert!(m.table.row("a").unwrap().sub.is_none());
        assert!(m.subs.is_empty());
    }

    #[test]
    fn matching_respects_parent_and_polarity() {
        let truth = [T, T, F, F];
        let other_parent = sub("q/pos/f0", "q", Polarity::Positive, &truth);
        let other_pol = sub("p/neg/f0", "p", Polarity::Negative, &truth);
        let bank = ConceptBank {
            entries: vec![entry("a", "p", Polarity::Positive, &truth)],
        };
        let m = match_to_bank(&[other_parent, other_pol], &bank).unwrap();
        assert!(m.table.row("a").unwrap().sub.is_none());
    }

    #[test]
    fn duplicates_are_merged() {
        let truth = [T, T, T, T, F, F, F, F];
        let a = sub("p/pos/f0", "p", Polarity::Positive, &[T, T, F, F, F, F, F, F]);
        let b = sub("p/pos/f1", "p", Polarity::Positive, &[F, F, T, T, F, F, F, F]);
        let bank = ConceptBank {
            entries: vec![entry("x", "p", Polarity::Positive, &truth)],
        };
        let m = match_to_bank(&[a, b], &bank).unwrap();
        let row = m.table.row("x").unwrap();
        assert_eq!(row.sub.as_deref(), Some("p/pos/f0+p/pos/f1"));
        assert_eq!(row.match_auc, Some(1.0));
        assert_eq!(m.subs[0].labels, truth.to_vec());
        assert!(match_to_bank(&[], &ConceptBank::default()).unwrap().table.rows.is_empty());
    }

    #[test]
    fn voter_that_dilutes_is_left_out() {
        let mut truth = [F; 12];
        truth[..4].fill(T);
        let mut a = [F; 12];
        a[..3].fill(T);
        let mut b = [F; 12];
        b[0] = T;
        b[4] = T;
        let bank = ConceptBank {
            entries: vec![entry("x", "p", Polarity::Positive, &truth)],
        };
        let subs = [
            sub("p/pos/f0", "p", Polarity::Positive, &a),
            sub("p/pos/f1", "p", Polarity::Positive, &b),
        ];
        // a: tpr 3/4, fpr 0 -> 0.875; a|b: tpr 3/4, fpr 1/8 -> 0.8125
        let m = match_to_bank(&subs, &bank).unwrap();
        let row = m.table.row("x").unwrap();
        assert_eq!(row.sub.as_deref(), Some("p/pos/f0"));
        assert_eq!(row.match_auc, Some(0.875));
        assert_eq!(m.subs.len(), 1);
    }

    #[test]
    fn shared_sub_can_serve_two_entries() {
        let s = sub("p/pos/f0", "p", Polarity::Positive, &[T, T, F, F, F, F]);
        let bank = ConceptBank {
            entries: vec![
                entry("x", "p", Polarity::Positive, &[T, T, F, F, F, F]),
                entry("y", "p", Polarity::Positive, &[T, F, F, F, F, F]),
            ],
        };
        let m = match_to_bank(&[s], &bank).unwrap();
        assert_eq!(m.table.row("x").unwrap().sub, m.table.row("y").unwrap().sub);
        assert_eq!(m.subs.len(), 1);
    }

    fn fixture(perfect: bool) -> (Predictions, Dataset, ConceptBank, MatchTable) {
        use crate::numkit::Matrix;
        let n = 6;
        let tasks = vec![0, 1, 1, 0, 1, 0];
        let concept: Vec<f64> = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let data = Dataset {
            features: Matrix::zeros(n, 1),
            concepts: Matrix::from_vec(n, 1, concept.clone()).unwrap(),
            sub_labels: vec![],
            tasks: tasks.clone(),
            n_classes: 2,
            splits: vec![Split::Test; n],
        };
        let bank_col: Vec<bool> = vec![T, F, F, F, F, T];
        let bank = ConceptBank {
            entries: vec![entry("b", "c", Polarity::Positive, &bank_col)],
        };
        let table = MatchTable {
            rows: vec![MatchRow {
                bank: "b".into(),
                parent: "c".into(),
                polarity: Polarity::Positive,
                sub: Some("c/pos/f0".into()),
                match_auc: Some(1.0),
                test_auc: None,
            }],
        };
        let pred = if perfect {
            Predictions {
                rows: (0..n).collect(),
                task_probs: tasks.iter().map(|&t| if t == 0 { vec![0.9, 0.1] } else { vec![0.2, 0.8] }).collect(),
                concept_probs: concept.iter().map(|&c| vec![c]).collect(),
                sub_probs: [("c/pos/f0".to_string(), bank_col.iter().map(|&b| if b { 0.9 } else { 0.1 }).collect())]
                    .into_iter()
                    .collect(),
            }
        } else {
            Predictions {
                rows: (0..n).collect(),
                task_probs: vec![vec![0.3, 0.7]; n],
                concept_probs: vec![vec![0.4]; n],
                sub_probs: [("c/pos/f0".to_string(), vec![0.5; n])].into_iter().collect(),
            }
        };
        (pred, data, bank, table)
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let (p, d, b, t) = fixture(true);
        let r = report_from_predictions(&p, &d, &["c".into()], &b, &t).unwrap();
        assert_eq!((r.task_accuracy, r.concept_auc_mean, r.sub_auc_mean), (1.0, 1.0, Some(1.0)));
        let (p, d, b, t) = fixture(false);
        let r = report_from_predictions(&p, &d, &["c".into()], &b, &t).unwrap();
        assert_eq!(r.task_accuracy, 0.5);
        assert_eq!(r.concept_auc_mean, 0.5);
        assert_eq!(r.sub_auc_mean, Some(0.5));
        let empty = Predictions::default();
        assert!(report_from_predictions(&empty, &d, &["c".into()], &b, &t).is_err());
    }
}
