//! Detection scoring: greedy IoU matching, P/R/F and PR curves.

use serde::{Deserialize, Serialize};

use crate::geometry::{polygon_iou, Polygon};
use crate::labels::TextAnnotation;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub det: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Detections dropped because they matched a do-not-care region.
    pub ignored: usize,
}

impl EvalCounts {
    pub fn add(&mut self, other: &EvalCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.ignored += other.ignored;
    }

    /// P, R, F. Nothing to find and nothing found scores 1; any other
    /// empty ratio scores 0.
    pub fn scores(&self) -> (f64, f64, f64) {
        let dets = self.tp + self.fp;
        let gts = self.tp + self.fn_;
        if dets == 0 && gts == 0 {
            return (1.0, 1.0, 1.0);
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (p, r) = (ratio(self.tp, dets), ratio(self.tp, gts));
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        (p, r, f)
    }

    pub fn report(&self, matches: Vec<Match>) -> EvalReport {
        let (precision, recall, f_score) = self.scores();
        EvalReport {
            precision,
            recall,
            f_score,
            matches,
            counts: *self,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    /// Matches against counted (non-ignored) ground truth.
    pub matches: Vec<Match>,
    pub counts: EvalCounts,
}

/// All detection/ground-truth pairs with IoU at or above `thresh`, best first.
/// Ties keep the lower detection index, then the lower ground-truth index.
fn candidate_pairs(dets: &[Polygon], gts: &[TextAnnotation], thresh: f64) -> Vec<Match> {
    let mut pairs = Vec::new();
    for (di, d) in dets.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            let iou = polygon_iou(d, &g.polygon);
            if iou > 0.0 && iou >= thresh {
                pairs.push(Match { det: di, gt: gi, iou });
            }
        }
    }
    pairs.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.det.cmp(&b.det)).then(a.gt.cmp(&b.gt)));
    pairs
}

fn greedy(pairs: &[Match], n_det: usize, n_gt: usize) -> Vec<Match> {
    let mut det_used = vec![false; n_det];
    let mut gt_used = vec![false; n_gt];
    let mut out = Vec::new();
    for m in pairs {
        if !det_used[m.det] && !gt_used[m.gt] {
            det_used[m.det] = true;
            gt_used[m.gt] = true;
            out.push(*m);
        }
    }
    out
}

fn tally(matched: &[Match], n_det: usize, gts: &[TextAnnotation]) -> (EvalCounts, Vec<Match>) {
    let mut counts = EvalCounts::default();
    let mut kept = Vec::new();
    for m in matched {
        if gts[m.gt].ignore {
            counts.ignored += 1;
        } else {
            counts.tp += 1;
            kept.push(*m);
        }
    }
    counts.fp = n_det - matched.len();
    counts.fn_ = gts.iter().filter(|g| !g.ignore).count() - counts.tp;
    (counts, kept)
}

/// One-to-one greedy matching by descending IoU. Ignored ground truth takes
/// part in the matching; detections it claims count as neither TP nor FP.
pub fn evaluate(dets: &[Polygon], gts: &[TextAnnotation], iou_thresh: f64) -> EvalReport {
    let pairs = candidate_pairs(dets, gts, iou_thresh);
    let matched = greedy(&pairs, dets.len(), gts.len());
    let (counts, kept) = tally(&matched, dets.len(), gts);
    counts.report(kept)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub counts: EvalCounts,
}

/// Counts at every threshold of `grid` for one image.
pub fn pr_counts(dets: &[Polygon], gts: &[TextAnnotation], grid: &[f64]) -> Vec<EvalCounts> {
    // Raising the threshold only truncates the greedy sequence, so one
    // sorted pass serves the whole grid.
    let min_t = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let pairs = candidate_pairs(dets, gts, if min_t.is_finite() { min_t } else { 0.0 });
    grid.iter()
        .map(|&t| {
            let cut = pairs.partition_point(|m| m.iou >= t);
            let matched = greedy(&pairs[..cut], dets.len(), gts.len());
            tally(&matched, dets.len(), gts).0
        })
        .collect()
}

pub fn curve_from_counts(grid: &[f64], counts: &[EvalCounts]) -> Vec<PrPoint> {
    grid.iter()
        .zip(counts)
        .map(|(&iou, c)| {
            let (precision, recall, f_score) = c.scores();
            PrPoint {
                iou,
                precision,
                recall,
                f_score,
                counts: *c,
            }
        })
        .collect()
}

pub fn pr_curve(dets: &[Polygon], gts: &[TextAnnotation], grid: &[f64]) -> Vec<PrPoint> {
    curve_from_counts(grid, &pr_counts(dets, gts, grid))
}

/// Evenly spaced thresholds `start, start + step, ..` up to `end` inclusive.
pub fn iou_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| start + i as f64 * step).collect()
}

/// Accumulates per-image counts over a corpus, one threshold grid at a time.
#[derive(Clone, Debug)]
pub struct CorpusEval {
    pub grid: Vec<f64>,
    pub counts: Vec<EvalCounts>,
}

impl CorpusEval {
    pub fn new(grid: Vec<f64>) -> Self {
        let counts = vec![EvalCounts::default(); grid.len()];
        Self { grid, counts }
    }

    pub fn add_image(&mut self, dets: &[Polygon], gts: &[TextAnnotation]) -> Vec<EvalCounts> {
        let per = pr_counts(dets, gts, &self.grid);
        for (acc, c) in self.counts.iter_mut().zip(&per) {
            acc.add(c);
        }
        per
    }

    pub fn curve(&self) -> Vec<PrPoint> {
        curve_from_counts(&self.grid, &self.counts)
    }
}

pub fn format_pr_csv(curve: &[PrPoint]) -> String {
    let mut s = String::from("iou,precision,recall,f_score,tp,fp,fn,ignored\n");
    for p in curve {
        s.push_str(&format!(
            "{:.4},{:.6},{:.6},{:.6},{},{},{},{}\n",
            p.iou, p.precision, p.recall, p.f_score, p.counts.tp, p.counts.fp, p.counts.fn_, p.counts.ignored
        ));
    }
    s
}
