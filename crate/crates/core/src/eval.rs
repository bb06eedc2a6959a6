//! Detection metrics: IoU, greedy matching, per-class average precision with
//! all-point PR interpolation, and run-level aggregation.
//!
//! Detections are evaluated online from the teacher's predictions at
//! prediction time; `summarize` only folds the recorded matches, it never
//! re-runs a model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::{BBox, Detection};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("stream layouts differ: {0}")]
    LayoutMismatch(String),
}

/// Intersection over union of two boxes, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Adapt-or-pause outcome of the monitor for one frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Adapt,
    Pause,
}

/// One scored detection's match outcome against its own frame's ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredMatch {
    pub score: f64,
    pub is_tp: bool,
}

/// Per-frame, per-class match results plus ground-truth counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    /// For each class: every detection's (score, matched) in score order.
    pub matches: Vec<Vec<ScoredMatch>>,
    /// Ground-truth count per class.
    pub gt_counts: Vec<usize>,
}

impl FrameEval {
    pub fn tp(&self) -> usize {
        self.matches
            .iter()
            .flatten()
            .filter(|m| m.is_tp)
            .count()
    }

    pub fn fp(&self) -> usize {
        self.matches
            .iter()
            .flatten()
            .filter(|m| !m.is_tp)
            .count()
    }

    pub fn missed(&self) -> usize {
        self.gt_counts.iter().sum::<usize>() - self.tp()
    }
}

/// Greedy match: detections in descending score order, each taking the
/// unmatched ground truth of highest IoU >= `iou_thresh` of its class.
pub fn match_frame(
    dets: &[Detection],
    gts: &[Detection],
    classes: usize,
    iou_thresh: f64,
) -> FrameEval {
    let mut matches = vec![Vec::new(); classes];
    let mut gt_counts = vec![0usize; classes];
    for gt in gts {
        gt_counts[gt.class_id] += 1;
    }
    for c in 0..classes {
        let mut class_dets: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        class_dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let class_gts: Vec<&Detection> = gts.iter().filter(|g| g.class_id == c).collect();
        let mut taken = vec![false; class_gts.len()];
        for d in class_dets {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in class_gts.iter().enumerate() {
                if taken[gi] {
                    continue;
                }
                let v = iou(&d.bbox, &gt.bbox);
                if v >= iou_thresh {
                    let better = match best {
                        None => true,
                        Some((_, bv)) => v > bv,
                    };
                    if better {
                        best = Some((gi, v));
                    }
                }
            }
            let is_tp = match best {
                Some((gi, _)) => {
                    taken[gi] = true;
                    true
                }
                None => false,
            };
            matches[c].push(ScoredMatch {
                score: d.score,
                is_tp,
            });
        }
    }
    FrameEval { matches, gt_counts }
}

/// Average precision from pooled (score, is_tp) entries with all-point
/// interpolation. `None` when the class has no ground truth and no
/// detections (excluded from the mean); zero ground truth with detections
/// scores 0.
pub fn average_precision(entries: &[ScoredMatch], total_gt: usize) -> Option<f64> {
    if total_gt == 0 {
        return if entries.is_empty() { None } else { Some(0.0) };
    }
    if entries.is_empty() {
        return Some(0.0);
    }
    let mut sorted = entries.to_vec();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(sorted.len());
    let mut precision = Vec::with_capacity(sorted.len());
    for m in &sorted {
        if m.is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / total_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    // All-point interpolation: running max of precision from the right, then
    // sum precision * recall increment.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for i in 0..recall.len() {
        let dr = recall[i] - prev_r;
        if dr > 0.0 {
            ap += dr * precision[i];
            prev_r = recall[i];
        }
    }
    Some(ap)
}

/// Mean AP over classes, ignoring classes with neither ground truth nor
/// detections. `None` when every class is ignored.
pub fn mean_ap(per_class: &[(Vec<ScoredMatch>, usize)]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (entries, gt) in per_class {
        if let Some(ap) = average_precision(entries, *gt) {
            sum += ap;
            n += 1;
        }
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// Everything recorded about one stream frame.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRecord {
    pub frame_index: usize,
    pub domain_index: usize,
    pub domain_tag: String,
    pub round_index: usize,
    pub decision: Decision,
    pub eval: FrameEval,
}

/// The (domains x rounds x frames) shape of a stream, minus the seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamLayout {
    pub domain_tags: Vec<String>,
    pub rounds: usize,
    pub frames_per_domain: usize,
}

impl StreamLayout {
    pub fn total_frames(&self) -> usize {
        self.domain_tags.len() * self.rounds * self.frames_per_domain
    }
}

/// Aggregated run result; the unit of comparison across variants.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub group: String,
    pub seed: u64,
    pub layout: StreamLayout,
    /// mAP@0.5 per (round, domain) cell.
    pub cell_map: Vec<Vec<f64>>,
    /// Arithmetic mean over all cells.
    pub mean_map: f64,
    pub adapted_iterations: usize,
    pub paused_iterations: usize,
    pub skip_rate: f64,
    /// Mean over domains, per round.
    pub round_mean: Vec<f64>,
}

/// Fold per-frame records into per-cell mAP and iteration accounting.
pub fn summarize(
    name: &str,
    seed: u64,
    layout: &StreamLayout,
    records: &[MetricRecord],
) -> RunSummary {
    let rounds = layout.rounds;
    let domains = layout.domain_tags.len();
    // Pool (score, is_tp) per class within each cell.
    let mut cells: BTreeMap<(usize, usize), Vec<(Vec<ScoredMatch>, usize)>> = BTreeMap::new();
    let mut adapted = 0usize;
    let mut paused = 0usize;
    for rec in records {
        match rec.decision {
            Decision::Adapt => adapted += 1,
            Decision::Pause => paused += 1,
        }
        let key = (rec.round_index, rec.domain_index);
        let classes = rec.eval.matches.len();
        let entry = cells
            .entry(key)
            .or_insert_with(|| vec![(Vec::new(), 0usize); classes]);
        for (c, ms) in rec.eval.matches.iter().enumerate() {
            entry[c].0.extend_from_slice(ms);
            entry[c].1 += rec.eval.gt_counts[c];
        }
    }
    let mut cell_map = vec![vec![0.0; domains]; rounds];
    for r in 0..rounds {
        for d in 0..domains {
            cell_map[r][d] = cells
                .get(&(r, d))
                .and_then(|per_class| mean_ap(per_class))
                .unwrap_or(0.0);
        }
    }
    let all: Vec<f64> = cell_map.iter().flatten().copied().collect();
    let mean_map = if all.is_empty() {
        0.0
    } else {
        all.iter().sum::<f64>() / all.len() as f64
    };
    let round_mean = cell_map
        .iter()
        .map(|row| {
            if row.is_empty() {
                0.0
            } else {
                row.iter().sum::<f64>() / row.len() as f64
            }
        })
        .collect();
    let total = adapted + paused;
    RunSummary {
        name: name.to_string(),
        group: String::new(),
        seed,
        layout: layout.clone(),
        cell_map,
        mean_map,
        adapted_iterations: adapted,
        paused_iterations: paused,
        skip_rate: if total == 0 {
            0.0
        } else {
            paused as f64 / total as f64
        },
        round_mean,
    }
}

impl RunSummary {
    /// Per-cell candidate minus baseline; layouts must agree.
    pub fn gain_vs(&self, baseline: &RunSummary) -> Result<Vec<Vec<f64>>, EvalError> {
        if self.layout != baseline.layout {
            return Err(EvalError::LayoutMismatch(format!(
                "{:?} vs {:?}",
                self.layout, baseline.layout
            )));
        }
        Ok(self
            .cell_map
            .iter()
            .zip(&baseline.cell_map)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect())
    }

    pub fn mean_gain_vs(&self, baseline: &RunSummary) -> Result<f64, EvalError> {
        self.gain_vs(baseline)?;
        Ok(self.mean_map - baseline.mean_map)
    }
}
