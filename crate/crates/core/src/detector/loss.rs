//! Detection supervision: objectness BCE plus box smooth-L1 on the proposal
//! head, class cross-entropy plus refinement smooth-L1 on the ROI head.

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::eval::iou;

use super::net::{backbone, proposals_from_values, roi_outputs_for_boxes, rpn, BoundParams};
use super::{encode_box, BBox, Detection, DetectorConfig, Image, Proposal};

const SMOOTH_L1_DELTA: f64 = 1.0;
const MATCH_IOU: f64 = 0.5;

/// The loss decomposition; `total = rpn + rcnn`.
pub struct LossParts {
    pub rpn: NodeId,
    pub rcnn: NodeId,
    pub total: NodeId,
}

/// An anchor is positive iff its cell center lies inside a label box; among
/// containing labels the one with the highest anchor IoU wins (ties to the
/// lowest label index).
fn anchor_targets(cfg: &DetectorConfig, labels: &[Detection]) -> Vec<Option<usize>> {
    let g = cfg.grid();
    let mut out = Vec::with_capacity(cfg.cells());
    for r in 0..g {
        for c in 0..g {
            let (cx, cy) = cfg.cell_center(r, c);
            let anchor = cfg.anchor(r, c);
            let mut best: Option<(usize, f64)> = None;
            for (li, label) in labels.iter().enumerate() {
                if !label.bbox.contains(cx, cy) {
                    continue;
                }
                let v = iou(&anchor, &label.bbox);
                let better = match best {
                    None => true,
                    Some((_, bv)) => v > bv,
                };
                if better {
                    best = Some((li, v));
                }
            }
            out.push(best.map(|(li, _)| li));
        }
    }
    out
}

/// Greedy per-proposal matching: highest-IoU label at IoU >= 0.5, else
/// background.
pub fn match_proposals(proposals: &[Proposal], labels: &[Detection]) -> Vec<Option<usize>> {
    proposals
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (li, label) in labels.iter().enumerate() {
                let v = iou(&p.bbox, &label.bbox);
                if v >= MATCH_IOU {
                    let better = match best {
                        None => true,
                        Some((_, bv)) => v > bv,
                    };
                    if better {
                        best = Some((li, v));
                    }
                }
            }
            best.map(|(li, _)| li)
        })
        .collect()
}

/// Full supervision on one image. Empty labels are valid: every anchor is
/// negative and every proposal is background, and both box terms vanish.
pub fn supervised_loss(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &DetectorConfig,
    image: &Image,
    labels: &[Detection],
) -> Result<LossParts, AutodiffError> {
    let feat = backbone(g, p, cfg, image)?;
    supervised_loss_on_features(g, p, cfg, feat, labels)
}

/// Same, reusing an already-built feature map node.
pub fn supervised_loss_on_features(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &DetectorConfig,
    feat: NodeId,
    labels: &[Detection],
) -> Result<LossParts, AutodiffError> {
    let cells = cfg.cells();
    let grid = cfg.grid();
    let rpn_out = rpn(g, p, cfg, feat)?;

    // ── RPN objectness: mean BCE over anchors ────────────────────────
    let assignment = anchor_targets(cfg, labels);
    let y: Vec<f64> = assignment
        .iter()
        .map(|a| if a.is_some() { 1.0 } else { 0.0 })
        .collect();
    let y_const = g.constant(Tensor::from_vec(vec![cells], y));
    let sp = g.softplus(rpn_out.obj_logits);
    let oy = g.mul(rpn_out.obj_logits, y_const)?;
    let bce = g.sub(sp, oy)?;
    let l_obj = g.mean(bce);

    // ── RPN box regression: smooth-L1 on positive anchors ────────────
    let positives: Vec<usize> = assignment
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.map(|_| i))
        .collect();
    let l_rpn_box = if positives.is_empty() {
        g.scalar(0.0)
    } else {
        let npos = positives.len();
        let mut idx = Vec::with_capacity(4 * npos);
        for row in 0..4 {
            for &cell in &positives {
                idx.push(row * cells + cell);
            }
        }
        let pred = g.gather(rpn_out.box_t, idx, vec![4, npos])?;
        let mut tgt = vec![0.0; 4 * npos];
        for (j, &cell) in positives.iter().enumerate() {
            let li = assignment[cell].unwrap();
            let anchor = cfg.anchor(cell / grid, cell % grid);
            let t = encode_box(&anchor, &labels[li].bbox);
            for row in 0..4 {
                tgt[row * npos + j] = t[row];
            }
        }
        let tgt_const = g.constant(Tensor::from_vec(vec![4, npos], tgt));
        let diff = g.sub(pred, tgt_const)?;
        let sl = g.smooth_l1(diff, SMOOTH_L1_DELTA);
        // Sum the four offset terms per anchor, average over anchors.
        let total = g.sum(sl);
        g.scale(total, 1.0 / npos as f64)
    };
    let l_rpn = g.add(l_obj, l_rpn_box)?;

    // ── RCNN: CE + refinement smooth-L1 over the model's own proposals ─
    let obj_vals = g.value(rpn_out.obj_logits).data().to_vec();
    let box_vals = g.value(rpn_out.box_t).clone();
    let proposals = proposals_from_values(cfg, &obj_vals, &box_vals, cfg.top_l);
    let boxes: Vec<BBox> = proposals.iter().map(|pr| pr.bbox).collect();
    let (cls_stack, box_nodes) = roi_outputs_for_boxes(g, p, cfg, feat, &boxes)?;

    let matches = match_proposals(&proposals, labels);
    let k1 = cfg.classes + 1;
    let l = proposals.len();
    let ls = g.log_softmax_last(cls_stack);
    let pick_idx: Vec<usize> = matches
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let class = m.map(|li| labels[li].class_id).unwrap_or(cfg.classes);
            i * k1 + class
        })
        .collect();
    let picked = g.gather(ls, pick_idx, vec![l])?;
    let nll = g.neg(picked);
    let l_cls = g.mean(nll);

    let matched: Vec<(usize, usize)> = matches
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|li| (i, li)))
        .collect();
    let l_ref = if matched.is_empty() {
        g.scalar(0.0)
    } else {
        let mut diffs = Vec::with_capacity(matched.len());
        for &(pi, li) in &matched {
            let t = encode_box(&proposals[pi].bbox, &labels[li].bbox);
            let tgt = g.constant(Tensor::from_vec(vec![4], t.to_vec()));
            diffs.push(g.sub(box_nodes[pi], tgt)?);
        }
        let stacked = g.concat_rows(&diffs)?;
        let sl = g.smooth_l1(stacked, SMOOTH_L1_DELTA);
        let total = g.sum(sl);
        g.scale(total, 1.0 / matched.len() as f64)
    };
    let l_rcnn = g.add(l_cls, l_ref)?;

    let total = g.add(l_rpn, l_rcnn)?;
    Ok(LossParts {
        rpn: l_rpn,
        rcnn: l_rcnn,
        total,
    })
}
