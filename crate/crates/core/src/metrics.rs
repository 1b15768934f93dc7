//! Segmentation metrics for sets of sampled and reference label maps.
//!
//! Binary tasks are scored on the foreground class; with more classes the
//! per-class scores are averaged over the non-background classes. Two empty
//! masks count as a perfect match (IoU = Dice = 1).

use serde::{Deserialize, Serialize};

use crate::datagen::LabelMap;
use crate::error::{Error, Result};

fn counts(a: &[bool], b: &[bool]) -> Result<(usize, usize, usize)> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { expected: vec![a.len()], actual: vec![b.len()] });
    }
    let (mut inter, mut na, mut nb) = (0, 0, 0);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    Ok((inter, na, nb))
}

pub fn iou(a: &[bool], b: &[bool]) -> Result<f64> {
    let (i, na, nb) = counts(a, b)?;
    let union = na + nb - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

pub fn dice(a: &[bool], b: &[bool]) -> Result<f64> {
    let (i, na, nb) = counts(a, b)?;
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * i as f64 / (na + nb) as f64 })
}

fn check_same(a: &LabelMap, b: &LabelMap) -> Result<()> {
    let sa = [a.k(), a.height(), a.width()];
    let sb = [b.k(), b.height(), b.width()];
    if sa != sb {
        return Err(Error::ShapeMismatch { expected: sa.to_vec(), actual: sb.to_vec() });
    }
    Ok(())
}

fn class_average(a: &LabelMap, b: &LabelMap, f: fn(&[bool], &[bool]) -> Result<f64>) -> Result<f64> {
    check_same(a, b)?;
    let k = a.k();
    if k <= 2 {
        return f(&a.class_mask(k - 1), &b.class_mask(k - 1));
    }
    let mut total = 0.0;
    for c in 1..k {
        total += f(&a.class_mask(c), &b.class_mask(c))?;
    }
    Ok(total / (k - 1) as f64)
}

/// IoU between label maps under the class convention above.
pub fn label_iou(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    class_average(a, b, iou)
}

pub fn label_dice(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    class_average(a, b, dice)
}

/// `1 − IoU`.
pub fn distance(a: &LabelMap, b: &LabelMap) -> Result<f64> {
    Ok(1.0 - label_iou(a, b)?)
}

/// Model samples and annotator references for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub predictions: Vec<LabelMap>,
    pub references: Vec<LabelMap>,
}

impl SampleSet {
    pub fn new(predictions: Vec<LabelMap>, references: Vec<LabelMap>) -> Result<Self> {
        if predictions.is_empty() || references.is_empty() {
            return Err(Error::invalid("sample sets need at least one prediction and one reference"));
        }
        let first = &predictions[0];
        for m in predictions.iter().chain(&references) {
            check_same(first, m)?;
        }
        Ok(SampleSet { predictions, references })
    }

    /// The set restricted to the first `m` predictions.
    pub fn truncated(&self, m: usize) -> SampleSet {
        let m = m.clamp(1, self.predictions.len());
        SampleSet { predictions: self.predictions[..m].to_vec(), references: self.references.clone() }
    }
}

fn mean_pairwise(a: &[LabelMap], b: &[LabelMap]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            total += distance(x, y).expect("set shapes validated");
        }
    }
    total / (a.len() * b.len()) as f64
}

/// `(D²_GED, diversity)`. Every expectation averages over all ordered pairs,
/// self-pairs included.
pub fn ged_squared(set: &SampleSet) -> (f64, f64) {
    let cross = mean_pairwise(&set.references, &set.predictions);
    let diversity = mean_pairwise(&set.predictions, &set.predictions);
    let refs = mean_pairwise(&set.references, &set.references);
    (2.0 * cross - diversity - refs, diversity)
}

/// Minimum-cost perfect matching on a square `n × n` cost matrix (row-major).
/// Returns the column assigned to each row.
pub fn linear_sum_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    if n == 0 {
        return vec![];
    }
    // shortest augmenting paths with row/column potentials; index 0 is a sentinel
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

/// References repeated to the prediction count and truncated.
fn tiled_references(set: &SampleSet) -> Vec<&LabelMap> {
    let n = set.references.len();
    (0..set.predictions.len()).map(|i| &set.references[i % n]).collect()
}

/// Mean IoU under the optimal one-to-one matching between predictions and
/// references tiled to the same count.
pub fn hm_iou(set: &SampleSet) -> f64 {
    let refs = tiled_references(set);
    let m = refs.len();
    let mut sim = vec![0.0; m * m];
    for (i, p) in set.predictions.iter().enumerate() {
        for (j, r) in refs.iter().enumerate() {
            sim[i * m + j] = label_iou(p, r).expect("set shapes validated");
        }
    }
    let cost: Vec<f64> = sim.iter().map(|s| 1.0 - s).collect();
    let assignment = linear_sum_assignment(&cost, m);
    assignment.iter().enumerate().map(|(i, &j)| sim[i * m + j]).sum::<f64>() / m as f64
}

/// Mean Dice over all (reference, prediction) pairs.
pub fn mean_dice(set: &SampleSet) -> f64 {
    let mut total = 0.0;
    for r in &set.references {
        for p in &set.predictions {
            total += label_dice(r, p).expect("set shapes validated");
        }
    }
    total / (set.references.len() * set.predictions.len()) as f64
}

/// Per-pixel entropy (bits) of the class frequencies across predictions.
pub fn uncertainty_map(set: &SampleSet) -> Result<Vec<f64>> {
    let m = set.predictions.len();
    if m < 2 {
        return Err(Error::invalid("uncertainty needs at least two predictions"));
    }
    let first = &set.predictions[0];
    let (k, d) = (first.k(), first.pixels());
    let mut freq = vec![0usize; k * d];
    for p in &set.predictions {
        for (j, c) in p.classes().into_iter().enumerate() {
            freq[c * d + j] += 1;
        }
    }
    Ok((0..d)
        .map(|j| {
            (0..k)
                .map(|c| freq[c * d + j] as f64 / m as f64)
                .filter(|&q| q > 0.0)
                .map(|q| -q * q.log2())
                .sum::<f64>()
                .max(0.0)
        })
        .collect())
}

/// Metrics for one image, or averaged over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub checkpoint: String,
    pub m: usize,
    pub n: usize,
    pub ged16: f64,
    pub ged_m: f64,
    pub diversity: f64,
    pub dice: f64,
    pub hm_iou: f64,
    pub seed: u64,
    #[serde(skip)]
    pub uncertainty: Vec<f64>,
}

impl MetricReport {
    pub fn csv_header() -> [&'static str; 10] {
        ["dataset", "checkpoint", "M", "N", "ged16", "gedM", "diversity", "dice", "hm_iou", "seed"]
    }

    pub fn csv_record(&self) -> Vec<String> {
        vec![
            self.dataset.clone(),
            self.checkpoint.clone(),
            self.m.to_string(),
            self.n.to_string(),
            self.ged16.to_string(),
            self.ged_m.to_string(),
            self.diversity.to_string(),
            self.dice.to_string(),
            self.hm_iou.to_string(),
            self.seed.to_string(),
        ]
    }
}

/// Scores each image's sample set and averages. `uncertainty` holds the
/// first image's map (empty when `M < 2`).
pub fn metric_report(sets: &[SampleSet], dataset: &str, checkpoint: &str, seed: u64) -> Result<MetricReport> {
    let first = sets.first().ok_or_else(|| Error::invalid("no sample sets to score"))?;
    let (m, n) = (first.predictions.len(), first.references.len());
    let count = sets.len() as f64;
    let (mut g16, mut gm, mut div, mut dc, mut hm) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for s in sets {
        g16 += ged_squared(&s.truncated(16)).0;
        let (g, d) = ged_squared(s);
        gm += g;
        div += d;
        dc += mean_dice(s);
        hm += hm_iou(s);
    }
    Ok(MetricReport {
        dataset: dataset.to_string(),
        checkpoint: checkpoint.to_string(),
        m,
        n,
        ged16: g16 / count,
        ged_m: gm / count,
        diversity: div / count,
        dice: dc / count,
        hm_iou: hm / count,
        seed,
        uncertainty: if m >= 2 { uncertainty_map(first)? } else { vec![] },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(bits: &[u8]) -> LabelMap {
        let b: Vec<bool> = bits.iter().map(|&x| x == 1).collect();
        LabelMap::from_mask(1, b.len(), &b)
    }

    fn random_mask(rng: &mut ChaCha8Rng, d: usize, p: f64) -> LabelMap {
        let b: Vec<bool> = (0..d).map(|_| rng.random::<f64>() < p).collect();
        LabelMap::from_mask(1, d, &b)
    }

    #[test]
    fn iou_and_dice_counting() {
        let a = [true, true, false, false];
        let b = [false, true, true, false];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(dice(&a, &[false, false, true, true]).unwrap(), 0.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(iou(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert_eq!(iou(&[false; 2], &[true, false]).unwrap(), 0.0);
        assert!(iou(&a, &[true]).is_err());
    }

    #[test]
    fn multiclass_average_skips_background() {
        let a = LabelMap::from_classes(3, 1, 4, &[0, 1, 2, 2]);
        let b = LabelMap::from_classes(3, 1, 4, &[0, 1, 1, 2]);
        // class 1: {1} vs {1,2} → 1/2; class 2: {2,3} vs {3} → 1/2
        assert!((label_iou(&a, &b).unwrap() - 0.5).abs() < 1e-15);
    }

    /// Direct enumeration of every pair, written independently of the
    /// library's averaging helper.
    fn brute_force_ged(set: &SampleSet) -> (f64, f64) {
        let d = |a: &LabelMap, b: &LabelMap| {
            let (fa, fb) = (a.foreground(), b.foreground());
            let inter = fa.iter().zip(&fb).filter(|(x, y)| **x && **y).count();
            let union = fa.iter().zip(&fb).filter(|(x, y)| **x || **y).count();
            if union == 0 {
                0.0
            } else {
                1.0 - inter as f64 / union as f64
            }
        };
        let (p, r) = (&set.predictions, &set.references);
        let mut cross = vec![];
        let mut pp = vec![];
        let mut rr = vec![];
        for a in r {
            for b in p {
                cross.push(d(a, b));
            }
        }
        for a in p {
            for b in p {
                pp.push(d(a, b));
            }
        }
        for a in r {
            for b in r {
                rr.push(d(a, b));
            }
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        (2.0 * mean(&cross) - mean(&pp) - mean(&rr), mean(&pp))
    }

    #[test]
    fn ged_hand_built_cases() {
        let y = mask(&[1, 1, 0, 0]);
        let set = SampleSet::new(vec![y.clone(); 3], vec![y.clone()]).unwrap();
        assert_eq!(ged_squared(&set), (0.0, 0.0));

        // d(y1, y2) = 1 − 1/3 = 2/3 for half-overlapping pairs
        let y1 = mask(&[1, 1, 0, 0]);
        let y2 = mask(&[0, 1, 1, 0]);
        let set = SampleSet::new(vec![y1.clone(), y2.clone()], vec![y1, y2]).unwrap();
        let (g, div) = ged_squared(&set);
        let dd = 2.0 / 3.0;
        // cross = pred = ref = (0 + dd + dd + 0) / 4
        assert!((div - dd / 2.0).abs() < 1e-15);
        assert!(g.abs() < 1e-15);
        assert_eq!((g, div), brute_force_ged(&set));

        let m1 = SampleSet::new(vec![mask(&[1, 0, 0, 0])], vec![mask(&[1, 1, 0, 0])]).unwrap();
        assert_eq!(ged_squared(&m1).1, 0.0);
    }

    #[test]
    fn ged_matches_enumeration_on_random_small_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let m = rng.random_range(1..=6);
            let n = rng.random_range(1..=6);
            let preds = (0..m).map(|_| random_mask(&mut rng, 9, 0.4)).collect();
            let refs = (0..n).map(|_| random_mask(&mut rng, 9, 0.4)).collect();
            let set = SampleSet::new(preds, refs).unwrap();
            let (a, b) = ged_squared(&set);
            let (c, d) = brute_force_ged(&set);
            assert!((a - c).abs() < 1e-12 && (b - d).abs() < 1e-12);
        }
    }

    #[test]
    fn ged_of_identical_multisets_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let maps: Vec<LabelMap> = (0..5).map(|_| random_mask(&mut rng, 16, 0.5)).collect();
        let set = SampleSet::new(maps.clone(), maps).unwrap();
        assert!(ged_squared(&set).0.abs() <= 1e-12);
    }

    #[test]
    fn ged_prediction_term_bias_scales_with_sample_count() {
        // Self-pairs contribute zero distance, so the prediction term has
        // expectation (M − 1)/M · E[d]; doubling M lowers D² by E[d]/(2M).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let refs: Vec<LabelMap> = (0..4).map(|_| random_mask(&mut rng, 12, 0.5)).collect();
        let m = 4;
        let reps = 400;
        let (mut small, mut large, mut div) = (vec![], vec![], vec![]);
        for _ in 0..reps {
            let preds: Vec<LabelMap> = (0..2 * m).map(|_| random_mask(&mut rng, 12, 0.5)).collect();
            let set = SampleSet::new(preds, refs.clone()).unwrap();
            small.push(ged_squared(&set.truncated(m)).0);
            let (g, d) = ged_squared(&set);
            large.push(g);
            div.push(d * (2 * m) as f64 / (2 * m - 1) as f64);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let diffs: Vec<f64> = small.iter().zip(&large).map(|(a, b)| b - a).collect();
        let sd = (diffs.iter().map(|x| (x - mean(&diffs)).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let predicted = -mean(&div) / (2 * m) as f64;
        let se = sd / (reps as f64).sqrt();
        assert!((mean(&diffs) - predicted).abs() < 3.0 * se + 1e-3, "{} vs {predicted}", mean(&diffs));
    }

    fn brute_force_assignment(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row * n + j] + rec(cost, n, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, n, 0, &mut vec![false; n])
    }

    proptest! {
        #[test]
        fn hungarian_is_optimal(n in 1usize..=6, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
            let a = linear_sum_assignment(&cost, n);
            let mut seen = vec![false; n];
            for &j in &a {
                prop_assert!(!seen[j]);
                seen[j] = true;
            }
            let total: f64 = a.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            prop_assert!((total - brute_force_assignment(&cost, n)).abs() < 1e-12);
        }

        #[test]
        fn iou_and_dice_are_symmetric(a in prop::collection::vec(any::<bool>(), 12), b in prop::collection::vec(any::<bool>(), 12)) {
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
        }
    }

    #[test]
    fn hm_iou_cases() {
        let a = mask(&[1, 1, 0, 0]);
        let b = mask(&[0, 0, 1, 1]);
        let c = mask(&[0, 1, 1, 0]);
        let set = SampleSet::new(vec![c.clone(), a.clone(), b.clone()], vec![a.clone(), b.clone(), c.clone()]).unwrap();
        assert_eq!(hm_iou(&set), 1.0);
        let empty = SampleSet::new(vec![mask(&[0; 4]); 2], vec![a.clone(), b.clone()]).unwrap();
        assert_eq!(hm_iou(&empty), 0.0);

        // M = 3, N = 2: references tiled to (a, b, a)
        let preds = vec![mask(&[1, 0, 0, 0]), mask(&[0, 0, 1, 0]), c.clone()];
        let set = SampleSet::new(preds.clone(), vec![a.clone(), b.clone()]).unwrap();
        let refs = [&a, &b, &a];
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let best = perms
            .iter()
            .map(|p| (0..3).map(|i| label_iou(&preds[i], refs[p[i]]).unwrap()).sum::<f64>() / 3.0)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!((hm_iou(&set) - best).abs() < 1e-12);
    }

    #[test]
    fn one_minus_iou_is_a_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = rng.random::<f64>();
            let (a, b, c) = (random_mask(&mut rng, 10, p), random_mask(&mut rng, 10, p), random_mask(&mut rng, 10, p));
            let (ab, bc, ac) = (distance(&a, &b).unwrap(), distance(&b, &c).unwrap(), distance(&a, &c).unwrap());
            assert!(ac <= ab + bc + 1e-12);
        }
    }

    #[test]
    fn uncertainty_cases() {
        let a = mask(&[1, 0, 1]);
        let same = SampleSet::new(vec![a.clone(); 4], vec![a.clone()]).unwrap();
        assert_eq!(uncertainty_map(&same).unwrap(), vec![0.0; 3]);
        let half = SampleSet::new(vec![mask(&[1, 0, 0]), mask(&[0, 0, 1])], vec![a.clone()]).unwrap();
        assert_eq!(uncertainty_map(&half).unwrap(), vec![1.0, 0.0, 1.0]);
        let three = SampleSet::new(vec![mask(&[1, 0, 0]), mask(&[1, 1, 0]), mask(&[0, 1, 0])], vec![a.clone()]).unwrap();
        let h = |p: f64| -(p * p.log2() + (1.0 - p) * (1.0 - p).log2());
        let u = uncertainty_map(&three).unwrap();
        assert!((u[0] - h(2.0 / 3.0)).abs() < 1e-15 && (u[1] - h(2.0 / 3.0)).abs() < 1e-15 && u[2] == 0.0);
        assert!(uncertainty_map(&SampleSet::new(vec![a.clone()], vec![a]).unwrap()).is_err());
    }

    #[test]
    fn report_columns() {
        let a = mask(&[1, 0, 1, 0]);
        let set = SampleSet::new(vec![a.clone(); 20], vec![a]).unwrap();
        let r = metric_report(&[set], "toy", "ck", 7).unwrap();
        assert_eq!((r.m, r.n, r.ged16, r.ged_m, r.hm_iou, r.dice), (20, 1, 0.0, 0.0, 1.0, 1.0));
        assert_eq!(r.csv_record().len(), MetricReport::csv_header().len());
    }
}
