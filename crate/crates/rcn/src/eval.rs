//! Detection (FPPI / miss rate, log-average miss rate) and tracking (one-pass success
//! over overlap thresholds) evaluation.

use std::cmp::Ordering;
use std::io::Write;

use crate::error::{Error, Result};
use crate::localizer::BoundingBox;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub confidence: f64,
}

/// One evaluated frame. `ignore` boxes neither count as misses nor turn matching
/// detections into false positives.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectionRecord {
    pub gts: Vec<BoundingBox>,
    pub ignore: Vec<BoundingBox>,
    pub dets: Vec<Detection>,
}

impl DetectionRecord {
    /// Moves ground truth shorter than `min_height` into the ignore set.
    pub fn with_min_height(mut self, min_height: f64) -> Self {
        let (keep, drop): (Vec<_>, Vec<_>) = self.gts.into_iter().partition(|g| g.h >= min_height);
        self.gts = keep;
        self.ignore.extend(drop);
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetOutcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameMatch {
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
    /// Outcome per detection, in the order given.
    pub outcomes: Vec<DetOutcome>,
}

fn by_confidence_desc(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap_or(Ordering::Equal));
    order
}

/// Greedy matching: in decreasing confidence, each detection claims the unclaimed
/// ground truth of highest IoU at or above `thresh` (ties to the lower index).
pub fn match_frame(dets: &[Detection], gts: &[BoundingBox], thresh: f64) -> FrameMatch {
    match_frame_with_ignore(dets, gts, &[], thresh)
}

pub fn match_frame_with_ignore(dets: &[Detection], gts: &[BoundingBox], ignore: &[BoundingBox], thresh: f64) -> FrameMatch {
    let mut claimed = vec![false; gts.len()];
    let mut outcomes = vec![DetOutcome::FalsePositive; dets.len()];
    for i in by_confidence_desc(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if claimed[j] {
                continue;
            }
            let o = dets[i].bbox.iou(g);
            if o >= thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        outcomes[i] = match best {
            Some((j, _)) => {
                claimed[j] = true;
                DetOutcome::TruePositive
            }
            None if ignore.iter().any(|g| dets[i].bbox.iou(g) >= thresh) => DetOutcome::Ignored,
            None => DetOutcome::FalsePositive,
        };
    }
    let tp = outcomes.iter().filter(|o| **o == DetOutcome::TruePositive).count();
    let fp = outcomes.iter().filter(|o| **o == DetOutcome::FalsePositive).count();
    FrameMatch { tp, fp, missed: gts.len() - tp, outcomes }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub fppi: f64,
    pub miss_rate: f64,
}

/// FPPI / miss-rate pairs for every confidence threshold observed, plus the empty
/// operating point, sorted by FPPI ascending (miss rate descending within ties).
pub fn fppi_mr_curve(records: &[DetectionRecord], thresh: f64) -> Vec<CurvePoint> {
    let frames = records.len().max(1) as f64;
    let total_gt: usize = records.iter().map(|r| r.gts.len()).sum();
    let mut scored: Vec<(f64, DetOutcome)> = Vec::new();
    for r in records {
        let m = match_frame_with_ignore(&r.dets, &r.gts, &r.ignore, thresh);
        scored.extend(r.dets.iter().zip(&m.outcomes).map(|(d, o)| (d.confidence, *o)));
    }
    // A lower threshold admits a superset, and greedy matching in confidence order
    // makes each frame's outcomes at any threshold a prefix of the full matching.
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    let rate = |tp: usize| if total_gt == 0 { 0.0 } else { (total_gt - tp) as f64 / total_gt as f64 };
    let mut curve = vec![CurvePoint { fppi: 0.0, miss_rate: rate(0) }];
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < scored.len() {
        let c = scored[i].0;
        while i < scored.len() && scored[i].0 == c {
            match scored[i].1 {
                DetOutcome::TruePositive => tp += 1,
                DetOutcome::FalsePositive => fp += 1,
                DetOutcome::Ignored => {}
            }
            i += 1;
        }
        curve.push(CurvePoint { fppi: fp as f64 / frames, miss_rate: rate(tp) });
    }
    curve
}

pub const MR_FLOOR: f64 = 1e-10;

/// FPPI reference points: nine values log-spaced over `[1e-2, 1]`.
pub fn mr_reference_points() -> [f64; 9] {
    std::array::from_fn(|i| 10f64.powf(-2.0 + 2.0 * i as f64 / 8.0))
}

/// Geometric mean of the miss rate sampled at the nine reference FPPI values. Each
/// sample is the miss rate at the largest curve FPPI not above the reference (the
/// last such point), or the curve's highest miss rate if there is none.
pub fn log_average_mr(curve: &[CurvePoint]) -> f64 {
    if curve.is_empty() {
        return 1.0;
    }
    let worst = curve.iter().map(|p| p.miss_rate).fold(0.0, f64::max);
    let logs: Vec<f64> = mr_reference_points()
        .iter()
        .map(|&r| {
            let m = curve.iter().rev().find(|p| p.fppi <= r).map_or(worst, |p| p.miss_rate);
            m.max(MR_FLOOR).ln()
        })
        .collect();
    (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

/// Printable form: values at the floor are reported as zero.
pub fn report_mr(mr: f64) -> f64 {
    if mr <= MR_FLOOR * (1.0 + 1e-9) {
        0.0
    } else {
        mr
    }
}

/// Boxes on consecutive frames starting at `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub start: usize,
    pub boxes: Vec<BoundingBox>,
}

impl Trajectory {
    pub fn new(start: usize, boxes: Vec<BoundingBox>) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::Contract("trajectory must contain at least one box".into()));
        }
        Ok(Trajectory { start, boxes })
    }

    pub fn end(&self) -> usize {
        self.start + self.boxes.len()
    }

    pub fn at(&self, frame: usize) -> Option<&BoundingBox> {
        self.boxes.get(frame.checked_sub(self.start)?)
    }
}

/// `0, 0.05, ..., 1`.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 * 0.05).collect()
}

/// Fraction of the overlapping frames whose IoU exceeds each threshold.
pub fn ope_success(pred: &Trajectory, gt: &Trajectory, thresholds: &[f64]) -> Vec<f64> {
    let (lo, hi) = (pred.start.max(gt.start), pred.end().min(gt.end()));
    let overlaps: Vec<f64> = (lo..hi).map(|f| pred.at(f).unwrap().iou(gt.at(f).unwrap())).collect();
    if overlaps.is_empty() {
        return vec![0.0; thresholds.len()];
    }
    thresholds
        .iter()
        .map(|&t| overlaps.iter().filter(|&&o| o > t).count() as f64 / overlaps.len() as f64)
        .collect()
}

/// Mean of per-track success curves.
pub fn mean_success(curves: &[Vec<f64>], n: usize) -> Vec<f64> {
    if curves.is_empty() {
        return vec![0.0; n];
    }
    (0..n).map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64).collect()
}

/// Area under the success curve, as the mean success rate over thresholds.
pub fn success_auc(curve: &[f64]) -> f64 {
    if curve.is_empty() {
        0.0
    } else {
        curve.iter().sum::<f64>() / curve.len() as f64
    }
}

/// Probability that a random positive outscores a random negative (ties count half).
pub fn roc_auc(pos: &[f64], neg: &[f64]) -> f64 {
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal));
    // Mann-Whitney with midranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += mid * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

/// Writes `header` then `x,y` rows.
pub fn write_curve(out: impl Write, header: (&str, &str), points: impl IntoIterator<Item = (f64, f64)>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record([header.0, header.1])?;
    for (x, y) in points {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    fn det(x: f64, y: f64, c: f64) -> Detection {
        Detection { bbox: bx(x, y, 10.0, 10.0), confidence: c }
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 0.0, 10.0, 10.0)), 0.0);
        assert!((iou(&a, &bx(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn matching_rules() {
        let g = [bx(0.0, 0.0, 10.0, 10.0)];
        assert_eq!(match_frame(&[det(0.0, 0.0, 0.9)], &g, 0.5).tp, 1);
        let m = match_frame(&[det(0.0, 0.0, 0.9), det(1.0, 0.0, 0.8)], &g, 0.5);
        assert_eq!((m.tp, m.fp, m.missed), (1, 1, 0));
        // The higher-confidence detection claims the ground truth even with lower IoU.
        let m = match_frame(&[det(2.0, 0.0, 0.4), det(0.0, 0.0, 0.3)], &g, 0.5);
        assert_eq!(m.outcomes, vec![DetOutcome::TruePositive, DetOutcome::FalsePositive]);
        let m = match_frame(&[], &g, 0.5);
        assert_eq!((m.tp, m.fp, m.missed), (0, 0, 1));
    }

    #[test]
    fn ignore_regions() {
        let r = DetectionRecord { gts: vec![bx(0.0, 0.0, 10.0, 4.0)], ignore: vec![], dets: vec![Detection { bbox: bx(0.0, 0.0, 10.0, 4.0), confidence: 1.0 }] }
            .with_min_height(5.0);
        assert!(r.gts.is_empty());
        let m = match_frame_with_ignore(&r.dets, &r.gts, &r.ignore, 0.5);
        assert_eq!((m.tp, m.fp, m.missed), (0, 0, 0));
    }

    #[test]
    fn curve_extremes() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let perfect = vec![DetectionRecord { gts: vec![g], ignore: vec![], dets: vec![Detection { bbox: g, confidence: 0.7 }] }];
        let c = fppi_mr_curve(&perfect, 0.5);
        assert_eq!(c.last().unwrap(), &CurvePoint { fppi: 0.0, miss_rate: 0.0 });
        assert!((log_average_mr(&c) - MR_FLOOR).abs() < 1e-20);
        assert_eq!(report_mr(log_average_mr(&c)), 0.0);
        let empty = vec![DetectionRecord { gts: vec![g], ..Default::default() }];
        assert_eq!(fppi_mr_curve(&empty, 0.5), vec![CurvePoint { fppi: 0.0, miss_rate: 1.0 }]);
        assert_eq!(log_average_mr(&fppi_mr_curve(&empty, 0.5)), 1.0);
    }

    #[test]
    fn flat_curve_averages_to_constant() {
        let c = vec![CurvePoint { fppi: 0.0, miss_rate: 0.3 }, CurvePoint { fppi: 5.0, miss_rate: 0.3 }];
        assert!((log_average_mr(&c) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn reference_points() {
        let r = mr_reference_points();
        assert!((r[0] - 0.01).abs() < 1e-15 && (r[4] - 0.1).abs() < 1e-15 && (r[8] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ope_trivial_cases() {
        let th = success_thresholds();
        assert_eq!(th.len(), 21);
        let gt = Trajectory::new(0, (0..10).map(|i| bx(i as f64, 0.0, 5.0, 5.0)).collect()).unwrap();
        let same = ope_success(&gt, &gt, &th);
        assert!(same[..20].iter().all(|&s| s == 1.0));
        assert_eq!(same[20], 0.0);
        let far = Trajectory::new(0, (0..10).map(|i| bx(i as f64 + 50.0, 0.0, 5.0, 5.0)).collect()).unwrap();
        assert!(ope_success(&far, &gt, &th).iter().all(|&s| s == 0.0));
        let half = Trajectory::new(0, (0..10).map(|i| if i % 2 == 0 { *gt.at(i).unwrap() } else { *far.at(i).unwrap() }).collect()).unwrap();
        let s = ope_success(&half, &gt, &th);
        assert!(s[1..20].iter().all(|&v| v == 0.5));
    }

    #[test]
    fn auc_values() {
        assert_eq!(roc_auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(roc_auc(&[0.0], &[1.0]), 0.0);
        assert_eq!(roc_auc(&[1.0, 1.0], &[1.0]), 0.5);
        assert!((roc_auc(&[0.5, 2.0], &[1.0, 3.0]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn curve_csv_format() {
        let mut buf = Vec::new();
        write_curve(&mut buf, ("fppi", "miss_rate"), [(0.0, 1.0), (0.5, 0.25)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "fppi,miss_rate\n0,1\n0.5,0.25\n");
    }

    fn arb_records() -> impl Strategy<Value = Vec<DetectionRecord>> {
        let b = (0u8..6, 0u8..6).prop_map(|(x, y)| bx(x as f64 * 4.0, y as f64 * 4.0, 8.0, 8.0));
        let d = (b.clone(), 0u8..10).prop_map(|(bbox, c)| Detection { bbox, confidence: c as f64 / 10.0 });
        proptest::collection::vec(
            (proptest::collection::vec(b, 0..4), proptest::collection::vec(d, 0..6))
                .prop_map(|(gts, dets)| DetectionRecord { gts, ignore: vec![], dets }),
            1..5,
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn curve_is_monotone(records in arb_records()) {
            let c = fppi_mr_curve(&records, 0.5);
            for p in c.windows(2) {
                prop_assert!(p[1].fppi >= p[0].fppi);
                prop_assert!(p[1].miss_rate <= p[0].miss_rate);
            }
            let mr = log_average_mr(&c);
            prop_assert!((0.0..=1.0).contains(&mr));
        }

        #[test]
        fn matching_invariant_to_monotone_confidence_maps(records in arb_records()) {
            for r in &records {
                let mapped: Vec<Detection> = r.dets.iter().map(|d| Detection { confidence: (3.0 * d.confidence).exp(), ..*d }).collect();
                prop_assert_eq!(match_frame(&r.dets, &r.gts, 0.5), match_frame(&mapped, &r.gts, 0.5));
            }
        }

        #[test]
        fn success_non_increasing(shift in 0.0f64..10.0, n in 1usize..12) {
            let gt = Trajectory::new(0, (0..n).map(|i| bx(i as f64, 0.0, 8.0, 8.0)).collect()).unwrap();
            let pred = Trajectory::new(0, (0..n).map(|i| bx(i as f64 + shift * (i % 3) as f64, 0.0, 8.0, 8.0)).collect()).unwrap();
            let s = ope_success(&pred, &gt, &success_thresholds());
            for p in s.windows(2) {
                prop_assert!(p[1] <= p[0]);
            }
        }
    }
}
