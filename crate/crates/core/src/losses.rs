//! Training objective: OHEM-sampled BCE on P, Dice on B, masked L1 on T.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::labels::LabelMaps;
use crate::network::ForwardNodes;
use crate::tensor::FeatureMap;

pub const DEFAULT_ALPHA: f64 = 5.0;
pub const DEFAULT_BETA: f64 = 10.0;
pub const DEFAULT_OHEM_RATIO: f64 = 3.0;
pub const DEFAULT_FALLBACK_NEGATIVES: usize = 100;
pub const DICE_EPS: f64 = 1e-6;
pub const LOG_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("loss.alpha", self.alpha), ("loss.beta", self.beta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub ohem_ratio: f64,
    /// Negatives kept when an image has no positives.
    pub fallback_negatives: usize,
    pub dice_eps: f64,
    pub log_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            ohem_ratio: DEFAULT_OHEM_RATIO,
            fallback_negatives: DEFAULT_FALLBACK_NEGATIVES,
            dice_eps: DICE_EPS,
            log_eps: LOG_EPS,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.ohem_ratio.is_finite() && self.ohem_ratio >= 0.0) {
            return Err(Error::Config(format!("loss.ohem_ratio must be >= 0, got {}", self.ohem_ratio)));
        }
        if !(self.dice_eps > 0.0) {
            return Err(Error::Config("loss.dice_eps must be positive".into()));
        }
        if !(self.log_eps > 0.0 && self.log_eps < 0.5) {
            return Err(Error::Config("loss.log_eps must lie in (0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Pixels supervised by BCE and Dice: every positive plus the mined negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampledSet {
    /// Sorted pixel indices.
    pub indices: Vec<usize>,
    pub positives: usize,
    pub negatives: usize,
}

impl SampledSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// 0/1 weights over `n` pixels.
    pub fn mask(&self, n: usize) -> Vec<f64> {
        let mut m = vec![0.0; n];
        for &i in &self.indices {
            m[i] = 1.0;
        }
        m
    }
}

/// Keeps all valid positives and the `ratio * #pos` hardest valid negatives
/// (`fallback` of them when there are no positives). Ties go to the lower index.
pub fn ohem_select(
    per_pixel_loss: &[f64],
    pos_mask: &[bool],
    valid_mask: &[bool],
    ratio: f64,
    fallback: usize,
) -> Result<SampledSet> {
    let n = per_pixel_loss.len();
    if pos_mask.len() != n || valid_mask.len() != n {
        return Err(Error::Shape {
            op: "ohem_select",
            detail: format!("{n} losses, {} positives, {} valid", pos_mask.len(), valid_mask.len()),
        });
    }
    let mut selected: Vec<usize> = (0..n).filter(|&i| valid_mask[i] && pos_mask[i]).collect();
    let positives = selected.len();
    let mut negs: Vec<usize> = (0..n).filter(|&i| valid_mask[i] && !pos_mask[i]).collect();
    let want = if positives == 0 {
        fallback
    } else {
        (ratio * positives as f64).floor() as usize
    };
    let take = want.min(negs.len());
    negs.sort_by(|&a, &b| per_pixel_loss[b].total_cmp(&per_pixel_loss[a]).then(a.cmp(&b)));
    selected.extend_from_slice(&negs[..take]);
    selected.sort_unstable();
    Ok(SampledSet {
        indices: selected,
        positives,
        negatives: take,
    })
}

/// Per-pixel BCE with predictions clamped to `[eps, 1 - eps]`.
pub fn bce_per_pixel(x: &[f64], y: &[f64], eps: f64) -> Vec<f64> {
    x.iter()
        .zip(y)
        .map(|(&p, &t)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .collect()
}

fn check_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape {
            op,
            detail: format!("{a} predictions vs {b} targets"),
        });
    }
    Ok(())
}

/// Mean BCE over `set`; zero for an empty set.
pub fn bce_loss(x: &[f64], y: &[f64], set: &SampledSet, eps: f64) -> Result<f64> {
    check_len("bce_loss", x.len(), y.len())?;
    if set.is_empty() {
        return Ok(0.0);
    }
    let per = bce_per_pixel(x, y, eps);
    Ok(set.indices.iter().map(|&i| per[i]).sum::<f64>() / set.len() as f64)
}

pub fn dice_loss(x: &[f64], y: &[f64], set: &SampledSet, eps: f64) -> Result<f64> {
    check_len("dice_loss", x.len(), y.len())?;
    let (mut inter, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for &i in &set.indices {
        inter += x[i] * y[i];
        sx += x[i].abs();
        sy += y[i].abs();
    }
    Ok(1.0 - 2.0 * inter / (sx + sy + eps))
}

/// Mean |y - x| over pixels where `region > 0`; zero when the region is empty.
pub fn l1_thresh_loss(x: &[f64], y: &[f64], region: &[f64]) -> Result<f64> {
    check_len("l1_thresh_loss", x.len(), y.len())?;
    check_len("l1_thresh_loss", x.len(), region.len())?;
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..x.len() {
        if region[i] > 0.0 {
            total += region[i] * (y[i] - x[i]).abs();
            count += region[i];
        }
    }
    Ok(if count > 0.0 { total / count } else { 0.0 })
}

pub fn total_loss(l_p: f64, l_b: f64, l_t: f64, w: &LossWeights) -> f64 {
    l_b + w.alpha * l_p + w.beta * l_t
}

#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub prob: NodeId,
    pub binary: NodeId,
    pub thresh: NodeId,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub prob: f64,
    pub binary: f64,
    pub thresh: f64,
}

impl LossNodes {
    pub fn values(&self, g: &Graph) -> LossValues {
        LossValues {
            total: g.value(self.total).item(),
            prob: g.value(self.prob).item(),
            binary: g.value(self.binary).item(),
            thresh: g.value(self.thresh).item(),
        }
    }
}

/// Records the three losses on the tape. The OHEM set is picked from the
/// current P and is shared by the BCE and Dice terms.
pub fn loss_on_graph(
    g: &mut Graph,
    prob: NodeId,
    binary: NodeId,
    thresh: NodeId,
    labels: &LabelMaps,
    cfg: &LossConfig,
) -> Result<LossNodes> {
    let pv = g.value(prob);
    labels.prob_gt.ensure_same_shape(pv, "detector_loss")?;
    let y = labels.prob_gt.data();
    let per = bce_per_pixel(pv.data(), y, cfg.log_eps);
    let pos: Vec<bool> = y.iter().map(|&v| v > 0.5).collect();
    let valid: Vec<bool> = labels.prob_mask.data().iter().map(|&v| v > 0.0).collect();
    let set = ohem_select(&per, &pos, &valid, cfg.ohem_ratio, cfg.fallback_negatives)?;
    let mask = set.mask(y.len());

    let l_p = g.bce(prob, y.to_vec(), mask.clone(), cfg.log_eps)?;
    let l_b = g.dice(binary, y.to_vec(), mask, cfg.dice_eps)?;
    let l_t = g.l1(
        thresh,
        labels.thresh_gt.data().to_vec(),
        labels.thresh_mask.data().to_vec(),
    )?;
    let w = cfg.weights;
    let total = g.lin_comb(&[(l_b, 1.0), (l_p, w.alpha), (l_t, w.beta)])?;
    Ok(LossNodes {
        total,
        prob: l_p,
        binary: l_b,
        thresh: l_t,
    })
}

pub fn detector_loss(g: &mut Graph, out: &ForwardNodes, labels: &LabelMaps, cfg: &LossConfig) -> Result<LossNodes> {
    loss_on_graph(g, out.prob, out.binary, out.thresh, labels, cfg)
}

/// Plain-value version of [`loss_on_graph`].
pub fn detector_loss_values(
    prob: &FeatureMap,
    binary: &FeatureMap,
    thresh: &FeatureMap,
    labels: &LabelMaps,
    cfg: &LossConfig,
) -> Result<LossValues> {
    let y = labels.prob_gt.data();
    check_len("detector_loss", prob.len(), y.len())?;
    let per = bce_per_pixel(prob.data(), y, cfg.log_eps);
    let pos: Vec<bool> = y.iter().map(|&v| v > 0.5).collect();
    let valid: Vec<bool> = labels.prob_mask.data().iter().map(|&v| v > 0.0).collect();
    let set = ohem_select(&per, &pos, &valid, cfg.ohem_ratio, cfg.fallback_negatives)?;
    let l_p = bce_loss(prob.data(), y, &set, cfg.log_eps)?;
    let l_b = dice_loss(binary.data(), y, &set, cfg.dice_eps)?;
    let l_t = l1_thresh_loss(thresh.data(), labels.thresh_gt.data(), labels.thresh_mask.data())?;
    Ok(LossValues {
        total: total_loss(l_p, l_b, l_t, &cfg.weights),
        prob: l_p,
        binary: l_b,
        thresh: l_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, GradCheckConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn all(n: usize) -> SampledSet {
        SampledSet {
            indices: (0..n).collect(),
            positives: 0,
            negatives: n,
        }
    }

    #[test]
    fn ohem_keeps_three_negatives_per_positive() {
        let n = 102;
        let loss: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let pos: Vec<bool> = (0..n).map(|i| i < 2).collect();
        let s = ohem_select(&loss, &pos, &vec![true; n], 3.0, 100).unwrap();
        assert_eq!((s.positives, s.negatives, s.len()), (2, 6, 8));
        assert_eq!(s.indices, vec![0, 1, 96, 97, 98, 99, 100, 101]);
    }

    #[test]
    fn ohem_negative_shortage_takes_everything() {
        let pos: Vec<bool> = (0..15).map(|i| i < 10).collect();
        let s = ohem_select(&[0.2; 15], &pos, &[true; 15], 3.0, 100).unwrap();
        assert_eq!(s.len(), 15);
    }

    #[test]
    fn ohem_picks_hardest_negatives() {
        let s = ohem_select(&[0.0, 0.9, 0.1, 0.5], &[true, false, false, false], &[true; 4], 2.0, 100).unwrap();
        assert_eq!(s.indices, vec![0, 1, 3]);
        let s = ohem_select(&[0.0, 0.9, 0.1, 0.5], &[true, false, false, false], &[true; 4], 3.0, 100).unwrap();
        assert_eq!(s.indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn ohem_ties_prefer_lower_index() {
        let s = ohem_select(&[0.0, 0.5, 0.5, 0.5], &[true, false, false, false], &[true; 4], 2.0, 100).unwrap();
        assert_eq!(s.indices, vec![0, 1, 2]);
    }

    #[test]
    fn ohem_without_positives_uses_fallback() {
        let loss: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let s = ohem_select(&loss, &[false; 10], &[true; 10], 3.0, 4).unwrap();
        assert_eq!(s.indices, vec![6, 7, 8, 9]);
        let s = ohem_select(&loss, &[false; 10], &[true; 10], 3.0, 100).unwrap();
        assert_eq!(s.len(), 10);
    }

    #[test]
    fn ohem_ignores_invalid_pixels() {
        let valid = [true, false, true, true];
        let s = ohem_select(&[0.0, 9.0, 0.1, 0.5], &[true, true, false, false], &valid, 1.0, 100).unwrap();
        assert_eq!(s.indices, vec![0, 3]);
        assert!(ohem_select(&[0.0; 3], &[true; 2], &[true; 3], 3.0, 1).is_err());
    }

    #[test]
    fn bce_examples() {
        let x = [0.5; 7];
        let y = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        assert!((bce_loss(&x, &y, &all(7), LOG_EPS).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let v = bce_loss(&[0.25], &[1.0], &all(1), LOG_EPS).unwrap();
        assert!((v - 1.3862943611198906).abs() < 1e-12);
        let x = [LOG_EPS, 1.0 - LOG_EPS];
        assert!(bce_loss(&x, &[0.0, 1.0], &all(2), LOG_EPS).unwrap() < 2e-6);
        let x = [0.0, 1.0];
        let v = bce_loss(&x, &[1.0, 0.0], &all(2), LOG_EPS).unwrap();
        assert!(v.is_finite() && (v + LOG_EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn dice_examples() {
        let v = dice_loss(&[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0], &all(4), DICE_EPS).unwrap();
        assert!((v - (1.0 - 2.0 / (3.0 + DICE_EPS))).abs() < 1e-15);
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
        let v = dice_loss(&[1.0, 1.0, 0.0], &[1.0, 1.0, 0.0], &all(3), DICE_EPS).unwrap();
        assert!((0.0..DICE_EPS).contains(&v));
        let v = dice_loss(&[1.0, 0.0], &[0.0, 1.0], &all(2), DICE_EPS).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let empty = SampledSet { indices: vec![], positives: 0, negatives: 0 };
        assert_eq!(dice_loss(&[0.3], &[1.0], &empty, DICE_EPS).unwrap(), 1.0);
    }

    #[test]
    fn l1_examples() {
        let region = [1.0, 1.0, 0.0];
        assert!((l1_thresh_loss(&[0.3, 0.3, 9.0], &[0.7, 0.7, 0.0], &region).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(l1_thresh_loss(&[0.5, 0.2, 7.0], &[0.5, 0.2, -3.0], &region).unwrap(), 0.0);
        assert_eq!(l1_thresh_loss(&[0.1], &[0.9], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, 0.0, &w), 0.0);
        assert!((total_loss(0.2, 0.1, 0.05, &w) - 1.6).abs() < 1e-12);
        assert_eq!(total_loss(1.0, 0.0, 0.0, &w), 5.0);
        assert_eq!(total_loss(0.0, 0.0, 1.0, &w), 10.0);
        assert!(LossWeights { alpha: 0.0, beta: 1.0 }.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    #[test]
    fn total_gradient_equals_weights() {
        let mut g = Graph::new();
        let p = g.variable(FeatureMap::scalar(0.3));
        let b = g.variable(FeatureMap::scalar(0.2));
        let t = g.variable(FeatureMap::scalar(0.1));
        let total = g.lin_comb(&[(b, 1.0), (p, 5.0), (t, 10.0)]).unwrap();
        let gr = g.backward(total).unwrap();
        assert_eq!(gr.get(p).unwrap().item(), 5.0);
        assert_eq!(gr.get(b).unwrap().item(), 1.0);
        assert_eq!(gr.get(t).unwrap().item(), 10.0);
    }

    fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMaps {
        let n = h * w;
        let bits = |rng: &mut ChaCha8Rng, p: f64| -> Vec<f64> {
            (0..n).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect()
        };
        let prob_gt = bits(rng, 0.2);
        let prob_mask = bits(rng, 0.9);
        let thresh_mask = bits(rng, 0.5);
        let thresh_gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..0.7)).collect();
        LabelMaps {
            prob_gt: FeatureMap::from_vec(1, h, w, prob_gt).unwrap(),
            prob_mask: FeatureMap::from_vec(1, h, w, prob_mask).unwrap(),
            thresh_gt: FeatureMap::from_vec(1, h, w, thresh_gt).unwrap(),
            thresh_mask: FeatureMap::from_vec(1, h, w, thresh_mask).unwrap(),
        }
    }

    fn open_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(1, h, w, |_, _, _| rng.random_range(0.05..0.95))
    }

    #[test]
    fn graph_and_value_losses_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = random_labels(&mut rng, 6, 7);
        let (p, b, t) = (open_map(&mut rng, 6, 7), open_map(&mut rng, 6, 7), open_map(&mut rng, 6, 7));
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let (pn, bn, tn) = (g.variable(p.clone()), g.variable(b.clone()), g.variable(t.clone()));
        let nodes = loss_on_graph(&mut g, pn, bn, tn, &labels, &cfg).unwrap();
        let a = nodes.values(&g);
        let v = detector_loss_values(&p, &b, &t, &labels, &cfg).unwrap();
        for (x, y) in [(a.total, v.total), (a.prob, v.prob), (a.binary, v.binary), (a.thresh, v.thresh)] {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn losses_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let labels = random_labels(&mut rng, 5, 6);
        let maps = [open_map(&mut rng, 5, 6), open_map(&mut rng, 5, 6), open_map(&mut rng, 5, 6)];
        let per = bce_per_pixel(maps[0].data(), labels.prob_gt.data(), LOG_EPS);
        let pos: Vec<bool> = labels.prob_gt.data().iter().map(|&v| v > 0.5).collect();
        let valid: Vec<bool> = labels.prob_mask.data().iter().map(|&v| v > 0.0).collect();
        let set = ohem_select(&per, &pos, &valid, 3.0, 100).unwrap();
        let mask = set.mask(30);
        let y = labels.prob_gt.data().to_vec();
        let cfg = GradCheckConfig::with_tolerance(1e-4);

        let r = finite_diff_check("bce_loss", &[("x", &maps[0])], |g, ids| g.bce(ids[0], y.clone(), mask.clone(), LOG_EPS), &cfg);
        assert!(r.pass, "{r}");
        let r = finite_diff_check("dice_loss", &[("x", &maps[1])], |g, ids| g.dice(ids[0], y.clone(), mask.clone(), DICE_EPS), &cfg);
        assert!(r.pass, "{r}");
        let ty = labels.thresh_gt.data().to_vec();
        let tm = labels.thresh_mask.data().to_vec();
        let r = finite_diff_check("l1_thresh_loss", &[("x", &maps[2])], |g, ids| g.l1(ids[0], ty.clone(), tm.clone()), &cfg);
        assert!(r.pass, "{r}");
        assert_eq!(r.inputs[0].skipped_kinks, 0);
    }

    #[test]
    fn total_loss_passes_gradient_check_with_fixed_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let labels = random_labels(&mut rng, 4, 5);
        let maps = [open_map(&mut rng, 4, 5), open_map(&mut rng, 4, 5), open_map(&mut rng, 4, 5)];
        // Mining is piecewise constant in P; the checker treats selection flips as kinks.
        let r = finite_diff_check(
            "total_loss",
            &[("P", &maps[0]), ("B", &maps[1]), ("T", &maps[2])],
            |g, ids| {
                let n = loss_on_graph(g, ids[0], ids[1], ids[2], &labels, &LossConfig::default())?;
                Ok(n.total)
            },
            &GradCheckConfig::with_tolerance(1e-4),
        );
        assert!(r.pass, "{r}");
    }

    fn brute_force(loss: &[f64], pos: &[bool], valid: &[bool], ratio: f64, fallback: usize) -> Vec<usize> {
        let p: Vec<usize> = (0..loss.len()).filter(|&i| valid[i] && pos[i]).collect();
        let negs: Vec<usize> = (0..loss.len()).filter(|&i| valid[i] && !pos[i]).collect();
        let k = if p.is_empty() { fallback } else { (ratio * p.len() as f64) as usize }.min(negs.len());
        // Repeatedly take the hardest remaining negative, lowest index on ties.
        let mut left = negs;
        let mut out = p;
        for _ in 0..k {
            let mut best = 0;
            for j in 1..left.len() {
                if loss[left[j]] > loss[left[best]] {
                    best = j;
                }
            }
            out.push(left.remove(best));
        }
        out.sort_unstable();
        out
    }

    fn masks() -> impl Strategy<Value = (Vec<f64>, Vec<bool>, Vec<bool>)> {
        (1usize..=64).prop_flat_map(|n| {
            (
                prop::collection::vec(prop_oneof![Just(0.5), 0.0..1.0f64], n),
                prop::collection::vec(prop::bool::weighted(0.15), n),
                prop::collection::vec(prop::bool::weighted(0.9), n),
            )
        })
    }

    proptest! {
        #[test]
        fn ohem_matches_brute_force((loss, pos, valid) in masks(), fallback in 0usize..8) {
            let s = ohem_select(&loss, &pos, &valid, 3.0, fallback).unwrap();
            prop_assert_eq!(s.indices, brute_force(&loss, &pos, &valid, 3.0, fallback));
        }

        #[test]
        fn ohem_stable_under_irrelevant_removal((loss, pos, valid) in masks(), pick in 0usize..64) {
            let s = ohem_select(&loss, &pos, &valid, 3.0, 5).unwrap();
            let dropped: Vec<usize> = (0..loss.len()).filter(|&i| valid[i] && !pos[i] && !s.contains(i)).collect();
            prop_assume!(!dropped.is_empty());
            let victim = dropped[pick % dropped.len()];
            let mut v2 = valid.clone();
            v2[victim] = false;
            let s2 = ohem_select(&loss, &pos, &v2, 3.0, 5).unwrap();
            prop_assert_eq!(s.indices, s2.indices);
        }

        #[test]
        fn loss_ranges(x in prop::collection::vec(0.0..=1.0f64, 1..40), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = x.iter().map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
            let r: Vec<f64> = x.iter().map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let set = all(x.len());
            let d = dice_loss(&x, &y, &set, DICE_EPS).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!(bce_loss(&x, &y, &set, LOG_EPS).unwrap() >= 0.0);
            prop_assert!(l1_thresh_loss(&x, &y, &r).unwrap() >= 0.0);
        }

        #[test]
        fn total_is_linear(a in -10.0..10.0f64, b in -10.0..10.0f64, c in -10.0..10.0f64, k in 0.0..4.0f64) {
            let w = LossWeights::default();
            let base = total_loss(a, b, c, &w);
            prop_assert_eq!(total_loss(a, 0.0, 0.0, &w), 5.0 * a);
            prop_assert_eq!(total_loss(0.0, b, 0.0, &w), b);
            prop_assert_eq!(total_loss(0.0, 0.0, c, &w), 10.0 * c);
            prop_assert!((total_loss(k * a, k * b, k * c, &w) - k * base).abs() <= 1e-12 * (1.0 + base.abs() * k));
        }
    }
}
