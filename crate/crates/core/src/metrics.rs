//! Panoptic evaluation: length-weighted IoU between symbols, matching, and
//! the PQ/RQ/SQ scores, plus per-class and per-primitive reports.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::{Drawing, Symbol};

/// Length-weighted IoU between two symbols over a drawing:
/// sum of ln(1+L) over the intersection divided by the same sum over the
/// union. Labels are not consulted here.
pub fn weighted_iou(pred: &Symbol, gt: &Symbol, drawing: &Drawing) -> Result<f64> {
    let inter: BTreeSet<usize> = pred.members.intersection(&gt.members).copied().collect();
    let union: BTreeSet<usize> = pred.members.union(&gt.members).copied().collect();
    if union.is_empty() {
        return Err(Error::InvalidSymbol("IoU of two empty symbols".into()));
    }
    let wsum = |set: &BTreeSet<usize>| -> Result<f64> {
        let mut s = 0.0;
        for &i in set {
            let p = drawing
                .primitives
                .get(i)
                .ok_or_else(|| Error::InvalidSymbol(format!("member {i} out of range")))?;
            s += (1.0 + p.length()).ln();
        }
        Ok(s)
    };
    let wi = if inter.is_empty() { 0.0 } else { wsum(&inter)? };
    let wu = wsum(&union)?;
    Ok(wi / wu)
}

/// Group primitives into symbols from per-primitive labels and instance ids.
/// Things (instance >= 0) are keyed by (label, instance); all primitives of
/// one label with instance -1 form a single stuff symbol.
pub fn symbols_from_labels(labels: &[u32], instances: &[i32]) -> Vec<Symbol> {
    let mut groups: BTreeMap<(u32, i32), BTreeSet<usize>> = BTreeMap::new();
    for (i, (&l, &z)) in labels.iter().zip(instances).enumerate() {
        groups.entry((l, z.max(-1))).or_default().insert(i);
    }
    groups
        .into_iter()
        .map(|((label, instance), members)| Symbol {
            label,
            instance,
            members,
        })
        .collect()
}

/// Ground-truth symbols of a drawing, excluding the background class.
pub fn ground_truth_symbols(drawing: &Drawing) -> Vec<Symbol> {
    let labels: Vec<u32> = drawing.primitives.iter().map(|p| p.label).collect();
    let instances: Vec<i32> = drawing.primitives.iter().map(|p| p.instance).collect();
    symbols_from_labels(&labels, &instances)
        .into_iter()
        .filter(|s| s.label != 0)
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    /// (pred index, gt index, weighted IoU) triples.
    pub tp: Vec<(usize, usize, f64)>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

/// Match predictions to ground truth: a pair matches iff the labels agree and
/// the weighted IoU exceeds 0.5. Because ground-truth symbols are disjoint,
/// at most one can clear 0.5 against a given prediction, so the greedy pass
/// is exact.
pub fn match_symbols(
    preds: &[Symbol],
    gts: &[Symbol],
    drawing: &Drawing,
) -> Result<MatchResult> {
    let mut gt_taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for (pi, p) in preds.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if gt_taken[gi] || g.label != p.label {
                continue;
            }
            if p.members.is_disjoint(&g.members) {
                continue;
            }
            let iou = weighted_iou(p, g, drawing)?;
            if iou > 0.5 && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) => {
                gt_taken[gi] = true;
                result.tp.push((pi, gi, iou));
            }
            None => result.fp.push(pi),
        }
    }
    for (gi, taken) in gt_taken.iter().enumerate() {
        if !taken {
            result.fn_.push(gi);
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PanopticScores {
    pub pq: f64,
    pub rq: f64,
    pub sq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    /// True when there was nothing to score (no predictions, no ground truth).
    pub empty: bool,
}

/// Accumulates matches across tiles and reduces to PQ = RQ * SQ.
#[derive(Debug, Clone, Default)]
pub struct Accumulator {
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub iou_sum: f64,
    pub per_class: BTreeMap<u32, (usize, usize, usize, f64)>,
}

impl Accumulator {
    pub fn add(&mut self, m: &MatchResult, preds: &[Symbol], gts: &[Symbol]) {
        self.tp += m.tp.len();
        self.fp += m.fp.len();
        self.fn_count += m.fn_.len();
        for &(pi, _, iou) in &m.tp {
            self.iou_sum += iou;
            let e = self.per_class.entry(preds[pi].label).or_default();
            e.0 += 1;
            e.3 += iou;
        }
        for &pi in &m.fp {
            self.per_class.entry(preds[pi].label).or_default().1 += 1;
        }
        for &gi in &m.fn_ {
            self.per_class.entry(gts[gi].label).or_default().2 += 1;
        }
    }

    pub fn scores(&self) -> PanopticScores {
        scores_from_counts(self.tp, self.fp, self.fn_count, self.iou_sum)
    }

    pub fn class_scores(&self) -> BTreeMap<u32, PanopticScores> {
        self.per_class
            .iter()
            .map(|(&c, &(tp, fp, fn_, iou))| (c, scores_from_counts(tp, fp, fn_, iou)))
            .collect()
    }
}

fn scores_from_counts(tp: usize, fp: usize, fn_count: usize, iou_sum: f64) -> PanopticScores {
    let empty = tp + fp + fn_count == 0;
    let denom = tp as f64 + 0.5 * fp as f64 + 0.5 * fn_count as f64;
    let rq = if empty { 0.0 } else { tp as f64 / denom };
    let sq = if tp == 0 { 0.0 } else { iou_sum / tp as f64 };
    let pq = rq * sq;
    debug_assert!((pq - rq * sq).abs() <= 1e-12);
    PanopticScores {
        pq,
        rq,
        sq,
        tp,
        fp,
        fn_count,
        empty,
    }
}

/// Scores for a single tile's match result.
pub fn panoptic_scores(m: &MatchResult) -> PanopticScores {
    let iou_sum: f64 = m.tp.iter().map(|&(_, _, i)| i).sum();
    scores_from_counts(m.tp.len(), m.fp.len(), m.fn_.len(), iou_sum)
}

#[derive(Debug, Clone, Default)]
pub struct PrimitiveReport {
    /// Per class: (tp, fp, fn) on primitive label assignments.
    pub per_class: BTreeMap<u32, (usize, usize, usize)>,
    pub correct: usize,
    pub total: usize,
}

impl PrimitiveReport {
    pub fn add(&mut self, pred_labels: &[u32], gt_labels: &[u32]) {
        for (&p, &g) in pred_labels.iter().zip(gt_labels) {
            self.total += 1;
            if p == g {
                self.correct += 1;
                self.per_class.entry(g).or_default().0 += 1;
            } else {
                self.per_class.entry(p).or_default().1 += 1;
                self.per_class.entry(g).or_default().2 += 1;
            }
        }
    }

    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    /// Micro-averaged F1 over classes; for single-label primitives this
    /// equals accuracy.
    pub fn micro_f1(&self) -> f64 {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for &(t, f, n) in self.per_class.values() {
            tp += t;
            fp += f;
            fn_ += n;
        }
        if tp == 0 {
            return 0.0;
        }
        2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
    }

    pub fn class_f1(&self, class: u32) -> f64 {
        match self.per_class.get(&class) {
            Some(&(tp, fp, fn_)) if tp > 0 => {
                2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fn_ as f64)
            }
            _ => 0.0,
        }
    }
}
