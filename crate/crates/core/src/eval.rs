//! KITTI-style evaluation: per-frame greedy matching, AP over 40 recall
//! positions, difficulty buckets, and the recall-interval TP/FP breakdown.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{argsort_desc, iou, Box3D, IouMetric, ScoredBox};

pub const RECALL_POSITIONS: usize = 40;
pub const RECALL_INTERVALS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

/// Bucket for synthetic objects, where no image box height exists.
pub fn synthetic_difficulty(range: f64, occlusion: f64) -> Difficulty {
    if range < 30.0 && occlusion < 0.2 {
        Difficulty::Easy
    } else if range < 50.0 && occlusion < 0.5 {
        Difficulty::Moderate
    } else {
        Difficulty::Hard
    }
}

/// The official rule on 2D box height (px), occlusion level (0..=3) and truncation.
/// `None` means the object is too small or hidden for every bucket.
pub fn kitti_difficulty(bbox_height: f64, occlusion: u8, truncation: f64) -> Option<Difficulty> {
    if bbox_height >= 40.0 && occlusion == 0 && truncation <= 0.15 {
        Some(Difficulty::Easy)
    } else if bbox_height >= 25.0 && occlusion <= 1 && truncation <= 0.3 {
        Some(Difficulty::Moderate)
    } else if bbox_height >= 25.0 && occlusion <= 2 && truncation <= 0.5 {
        Some(Difficulty::Hard)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub class_id: usize,
    pub iou_threshold: f64,
    pub metric: IouMetric,
    pub difficulty: Difficulty,
}

impl EvalConfig {
    pub fn car(difficulty: Difficulty) -> Self {
        EvalConfig {
            class_id: 0,
            iou_threshold: 0.7,
            metric: IouMetric::Iou3d,
            difficulty,
        }
    }

    pub fn cyclist(class_id: usize, difficulty: Difficulty) -> Self {
        EvalConfig {
            class_id,
            iou_threshold: 0.5,
            metric: IouMetric::Iou3d,
            difficulty,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "IoU threshold {} outside (0, 1]",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

/// A ground-truth object as seen by the evaluator. `difficulty: None` or
/// `ignore` marks regions that absorb detections without counting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalObject {
    pub class_id: usize,
    pub bbox: Box3D,
    pub difficulty: Option<Difficulty>,
    pub ignore: bool,
}

impl EvalObject {
    fn counted_for(&self, cfg: &EvalConfig) -> bool {
        !self.ignore && self.class_id == cfg.class_id && self.difficulty.is_some_and(|d| d <= cfg.difficulty)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetMatch {
    pub score: f64,
    pub outcome: Outcome,
    pub gt: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchRecord {
    /// In descending score order.
    pub dets: Vec<DetMatch>,
    pub gt_matched: Vec<bool>,
    pub gt_counted: Vec<bool>,
}

impl MatchRecord {
    pub fn num_gt(&self) -> usize {
        self.gt_counted.iter().filter(|&&c| c).count()
    }
}

/// Greedy matching of one frame's detections of `cfg.class_id` in descending
/// score. Each counted gt absorbs at most one detection; detections overlapping
/// only ignored or out-of-bucket gts are dropped from the count.
pub fn match_frame(dets: &[ScoredBox], gts: &[EvalObject], cfg: &EvalConfig) -> MatchRecord {
    let dets: Vec<&ScoredBox> = dets.iter().filter(|d| d.class_id == cfg.class_id).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let counted: Vec<bool> = gts.iter().map(|g| g.counted_for(cfg)).collect();
    let mut matched = vec![false; gts.len()];
    let mut out = Vec::with_capacity(dets.len());
    for i in argsort_desc(&scores) {
        let det = dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if !counted[j] || matched[j] {
                continue;
            }
            let v = iou(&det.bbox, &gt.bbox, cfg.metric);
            if v >= cfg.iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        let m = if let Some((j, _)) = best {
            matched[j] = true;
            DetMatch {
                score: det.score,
                outcome: Outcome::TruePositive,
                gt: Some(j),
            }
        } else {
            let absorbed = gts.iter().enumerate().find(|(j, gt)| {
                !counted[*j]
                    && (gt.ignore || gt.class_id == cfg.class_id)
                    && iou(&det.bbox, &gt.bbox, cfg.metric) >= cfg.iou_threshold
            });
            DetMatch {
                score: det.score,
                outcome: if absorbed.is_some() {
                    Outcome::Ignored
                } else {
                    Outcome::FalsePositive
                },
                gt: absorbed.map(|(j, _)| j),
            }
        };
        out.push(m);
    }
    MatchRecord {
        dets: out,
        gt_matched: matched,
        gt_counted: counted,
    }
}

/// Counted detections across frames, sorted by descending score (stable in
/// frame order), as TP flags.
fn ranked_flags(records: &[MatchRecord]) -> (Vec<bool>, usize) {
    let mut all: Vec<(f64, bool)> = records
        .iter()
        .flat_map(|r| r.dets.iter())
        .filter(|d| d.outcome != Outcome::Ignored)
        .map(|d| (d.score, d.outcome == Outcome::TruePositive))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let num_gt = records.iter().map(MatchRecord::num_gt).sum();
    (all.into_iter().map(|(_, tp)| tp).collect(), num_gt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApResult {
    /// Percent.
    pub ap: f64,
    /// Interpolated precision at recall `i/40`, `i = 1..=40`.
    pub precision: Vec<f64>,
    pub num_gt: usize,
    pub num_det: usize,
}

/// Average of the interpolated precision at the 40 recall positions, in percent.
pub fn ap_r40(records: &[MatchRecord]) -> Result<ApResult> {
    let (flags, num_gt) = ranked_flags(records);
    if num_gt == 0 {
        return Err(Error::InvalidInput("AP is undefined without ground truth".into()));
    }
    // recall_k >= i/40  <=>  40 tp_k >= i n_gt, kept in integers
    let mut best = vec![0.0f64; RECALL_POSITIONS + 1];
    let mut tp = 0usize;
    for (k, &is_tp) in flags.iter().enumerate() {
        tp += is_tp as usize;
        let precision = tp as f64 / (k + 1) as f64;
        let reached = (RECALL_POSITIONS * tp) / num_gt;
        for slot in best.iter_mut().take(reached.min(RECALL_POSITIONS) + 1).skip(1) {
            *slot = slot.max(precision);
        }
    }
    let precision = best[1..].to_vec();
    let ap = 100.0 * precision.iter().sum::<f64>() / RECALL_POSITIONS as f64;
    Ok(ApResult {
        ap,
        precision,
        num_gt,
        num_det: flags.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IntervalStats {
    pub tp: usize,
    pub fp: usize,
}

impl IntervalStats {
    /// `None` for an empty interval.
    pub fn tp_ratio(&self) -> Option<f64> {
        let n = self.tp + self.fp;
        (n > 0).then(|| self.tp as f64 / n as f64)
    }
}

/// Splits the ranked detections into the recall quarters R1–10 … R31–40 by the
/// cumulative recall reached after each detection. Detections before the first
/// TP fall in the first quarter.
pub fn recall_interval_analysis(records: &[MatchRecord]) -> Result<[IntervalStats; RECALL_INTERVALS]> {
    let (flags, num_gt) = ranked_flags(records);
    if num_gt == 0 {
        return Err(Error::InvalidInput("recall is undefined without ground truth".into()));
    }
    let per = RECALL_POSITIONS / RECALL_INTERVALS;
    let mut out = [IntervalStats::default(); RECALL_INTERVALS];
    let mut tp = 0usize;
    for is_tp in flags {
        tp += is_tp as usize;
        let position = (RECALL_POSITIONS * tp).div_ceil(num_gt);
        let bucket = (position.max(1) - 1) / per;
        let s = &mut out[bucket.min(RECALL_INTERVALS - 1)];
        if is_tp {
            s.tp += 1;
        } else {
            s.fp += 1;
        }
    }
    Ok(out)
}

/// One frame's detections and ground truth.
#[derive(Debug, Clone, Default)]
pub struct EvalFrame {
    pub dets: Vec<ScoredBox>,
    pub gts: Vec<EvalObject>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cfg: EvalConfig,
    pub ap: ApResult,
    pub intervals: [IntervalStats; RECALL_INTERVALS],
}

/// Matches frames in parallel (merged in frame order) and scores them.
pub fn evaluate(frames: &[EvalFrame], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let records: Vec<MatchRecord> = frames.par_iter().map(|f| match_frame(&f.dets, &f.gts, cfg)).collect();
    Ok(EvalReport {
        cfg: *cfg,
        ap: ap_r40(&records)?,
        intervals: recall_interval_analysis(&records)?,
    })
}

pub const TABLE_HEADER: &str = "class,difficulty,metric,iou_threshold,ap_r40,num_gt,num_det";

pub fn table_row(class: &str, r: &EvalReport) -> String {
    let metric = match r.cfg.metric {
        IouMetric::Bev => "bev",
        IouMetric::Iou3d => "3d",
    };
    format!(
        "{class},{},{metric},{},{:.4},{},{}",
        r.cfg.difficulty.name(),
        r.cfg.iou_threshold,
        r.ap.ap,
        r.ap.num_gt,
        r.ap.num_det
    )
}

pub fn intervals_csv(r: &EvalReport) -> String {
    let mut s = String::from("interval,tp,fp,tp_ratio\n");
    let per = RECALL_POSITIONS / RECALL_INTERVALS;
    for (i, b) in r.intervals.iter().enumerate() {
        let ratio = b.tp_ratio().map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        let _ = writeln!(s, "R{}-{},{},{},{ratio}", i * per + 1, (i + 1) * per, b.tp, b.fp);
    }
    s
}

/// Whitespace-separated `recall precision` pairs for plotting.
pub fn pr_curve_data(r: &ApResult) -> String {
    let mut s = String::from("# recall precision\n");
    for (i, p) in r.precision.iter().enumerate() {
        let _ = writeln!(s, "{:.4} {p:.6}", (i + 1) as f64 / RECALL_POSITIONS as f64);
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn car(x: f64) -> Box3D {
        Box3D::new(x, 0.0, -1.0, 3.9, 1.6, 1.56, 0.0)
    }

    fn gt(x: f64) -> EvalObject {
        EvalObject {
            class_id: 0,
            bbox: car(x),
            difficulty: Some(Difficulty::Easy),
            ignore: false,
        }
    }

    fn det(x: f64, score: f64) -> ScoredBox {
        ScoredBox {
            bbox: car(x),
            score,
            class_id: 0,
        }
    }

    fn cfg() -> EvalConfig {
        EvalConfig::car(Difficulty::Moderate)
    }

    #[test]
    fn perfect_detections() {
        let gts = [gt(5.0), gt(15.0)];
        let r = match_frame(&[det(5.0, 0.9), det(15.0, 0.8)], &gts, &cfg());
        assert!(r.dets.iter().all(|d| d.outcome == Outcome::TruePositive));
        assert_eq!(ap_r40(&[r]).unwrap().ap, 100.0);
    }

    #[test]
    fn duplicate_is_false_positive() {
        let r = match_frame(&[det(5.0, 0.9), det(5.0, 0.8)], &[gt(5.0)], &cfg());
        assert_eq!(r.dets[0].outcome, Outcome::TruePositive);
        assert_eq!(r.dets[1].outcome, Outcome::FalsePositive);
    }

    #[test]
    fn iou_just_below_threshold_is_false_positive() {
        // pure x shift of d on length l: IoU = (l-d)/(l+d)
        let l = 3.9;
        let d = l * (1.0 - 0.69) / (1.0 + 0.69);
        let r = match_frame(&[det(5.0 + d, 0.9)], &[gt(5.0)], &cfg());
        assert_eq!(r.dets[0].outcome, Outcome::FalsePositive);
    }

    #[test]
    fn half_recall_without_false_positives() {
        let gts: Vec<_> = (0..10).map(|i| gt(10.0 * i as f64)).collect();
        let dets: Vec<_> = (0..5).map(|i| det(10.0 * i as f64, 1.0 - 0.1 * i as f64)).collect();
        let r = match_frame(&dets, &gts, &cfg());
        assert_eq!(ap_r40(&[r]).unwrap().ap, 50.0);
    }

    #[test]
    fn ignored_and_harder_gts_absorb_detections() {
        let mut hard = gt(30.0);
        hard.difficulty = Some(Difficulty::Hard);
        let mut dc = gt(60.0);
        dc.ignore = true;
        dc.class_id = 9;
        let r = match_frame(&[det(30.0, 0.9), det(60.0, 0.8)], &[hard, dc, gt(0.0)], &cfg());
        assert!(r.dets.iter().all(|d| d.outcome == Outcome::Ignored));
        assert_eq!(r.num_gt(), 1);
    }

    #[test]
    fn no_ground_truth_is_flagged() {
        assert!(ap_r40(&[MatchRecord::default()]).is_err());
    }

    #[test]
    fn intervals_all_true_positive() {
        let gts: Vec<_> = (0..8).map(|i| gt(10.0 * i as f64)).collect();
        let dets: Vec<_> = (0..8).map(|i| det(10.0 * i as f64, 1.0 - 0.1 * i as f64)).collect();
        let r = match_frame(&dets, &gts, &cfg());
        let iv = recall_interval_analysis(&[r]).unwrap();
        assert!(iv.iter().all(|b| b.tp_ratio() == Some(1.0)));
        assert_eq!(iv.iter().map(|b| b.tp).sum::<usize>(), 8);
    }

    #[test]
    fn kitti_rule_buckets() {
        assert_eq!(kitti_difficulty(45.0, 0, 0.1), Some(Difficulty::Easy));
        assert_eq!(kitti_difficulty(30.0, 1, 0.2), Some(Difficulty::Moderate));
        assert_eq!(kitti_difficulty(30.0, 2, 0.4), Some(Difficulty::Hard));
        assert_eq!(kitti_difficulty(20.0, 0, 0.0), None);
        assert_eq!(synthetic_difficulty(45.0, 0.1), Difficulty::Moderate);
    }
}
