//! Forward passes: backbone, proposal head, ROI pooling, ROI head, and the
//! full detect pipeline with greedy NMS.
//!
//! Every pass is built on an autodiff [`Graph`] so the same code serves
//! inference (read the values) and training (run backward). Convolutions are
//! im2col gathers followed by a matmul; zero padding rides on the gather's
//! sentinel index.

use crate::autodiff::{AutodiffError, Graph, NodeId, Tensor};
use crate::eval::iou;

use super::{decode_box, BBox, Detection, DetectorConfig, Image, ParamStore, Proposal};

/// Parameter leaves of one store registered on one graph.
pub struct BoundParams {
    pub conv1_w: NodeId,
    pub conv1_b: NodeId,
    pub conv2_w: NodeId,
    pub conv2_b: NodeId,
    pub conv3_w: NodeId,
    pub conv3_b: NodeId,
    pub rpn_obj_w: NodeId,
    pub rpn_obj_b: NodeId,
    pub rpn_box_w: NodeId,
    pub rpn_box_b: NodeId,
    pub roi_fc_w: NodeId,
    pub roi_fc_b: NodeId,
    pub roi_cls_w: NodeId,
    pub roi_cls_b: NodeId,
    pub roi_box_w: NodeId,
    pub roi_box_b: NodeId,
}

/// Register every layer of `store` as a named parameter leaf.
pub fn bind(g: &mut Graph, store: &ParamStore) -> Result<BoundParams, AutodiffError> {
    let mut leaf = |name: &str| -> Result<NodeId, AutodiffError> {
        let t = store
            .get(name)
            .unwrap_or_else(|| panic!("store missing layer {name:?}"))
            .clone();
        g.param(name, t)
    };
    Ok(BoundParams {
        conv1_w: leaf("conv1.w")?,
        conv1_b: leaf("conv1.b")?,
        conv2_w: leaf("conv2.w")?,
        conv2_b: leaf("conv2.b")?,
        conv3_w: leaf("conv3.w")?,
        conv3_b: leaf("conv3.b")?,
        rpn_obj_w: leaf("rpn.obj.w")?,
        rpn_obj_b: leaf("rpn.obj.b")?,
        rpn_box_w: leaf("rpn.box.w")?,
        rpn_box_b: leaf("rpn.box.b")?,
        roi_fc_w: leaf("roi.fc.w")?,
        roi_fc_b: leaf("roi.fc.b")?,
        roi_cls_w: leaf("roi.cls.w")?,
        roi_cls_b: leaf("roi.cls.b")?,
        roi_box_w: leaf("roi.box.w")?,
        roi_box_b: leaf("roi.box.b")?,
    })
}

/// im2col indices for a 3x3, pad-1 convolution with the given stride over
/// `channels` planes of side `side`. Output: `[channels*9, out^2]`, sentinel
/// `usize::MAX` marks padding.
fn im2col_indices(channels: usize, side: usize, stride: usize) -> (Vec<usize>, usize) {
    let out = side / stride;
    let mut idx = Vec::with_capacity(channels * 9 * out * out);
    for c in 0..channels {
        for dr in 0..3usize {
            for dc in 0..3usize {
                for r in 0..out {
                    for cc in 0..out {
                        let y = (stride * r + dr) as isize - 1;
                        let x = (stride * cc + dc) as isize - 1;
                        if y < 0 || x < 0 || y >= side as isize || x >= side as isize {
                            idx.push(usize::MAX);
                        } else {
                            idx.push(c * side * side + y as usize * side + x as usize);
                        }
                    }
                }
            }
        }
    }
    (idx, out)
}

fn conv3x3(
    g: &mut Graph,
    input: NodeId,
    channels: usize,
    side: usize,
    stride: usize,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId, AutodiffError> {
    let (idx, out) = im2col_indices(channels, side, stride);
    let cols = g.gather(input, idx, vec![channels * 9, out * out])?;
    let z = g.matmul(w, cols)?;
    let zb = g.add_row_bias(z, b)?;
    Ok(g.relu(zb))
}

/// Feature map `[feat_channels, grid*grid]`: two strided reduction convs to
/// the anchor grid, then one stride-1 context conv so each cell's feature
/// sees a neighborhood the size of a whole object.
pub fn backbone(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &DetectorConfig,
    image: &Image,
) -> Result<NodeId, AutodiffError> {
    assert_eq!(image.size, cfg.img_size, "image size mismatch");
    let input = g.constant(Tensor::from_vec(
        vec![1, cfg.img_size, cfg.img_size],
        image.pixels.clone(),
    ));
    let h1 = conv3x3(g, input, 1, cfg.img_size, 2, p.conv1_w, p.conv1_b)?;
    let h2 = conv3x3(
        g,
        h1,
        cfg.mid_channels,
        cfg.img_size / 2,
        2,
        p.conv2_w,
        p.conv2_b,
    )?;
    conv3x3(
        g,
        h2,
        cfg.feat_channels,
        cfg.grid(),
        1,
        p.conv3_w,
        p.conv3_b,
    )
}

pub struct RpnOut {
    /// Objectness logits, `[cells]`.
    pub obj_logits: NodeId,
    /// Box offsets, `[4, cells]`.
    pub box_t: NodeId,
}

pub fn rpn(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &DetectorConfig,
    feat: NodeId,
) -> Result<RpnOut, AutodiffError> {
    let obj = g.matmul(p.rpn_obj_w, feat)?;
    let obj = g.add_row_bias(obj, p.rpn_obj_b)?;
    let obj_logits = g.reshape(obj, vec![cfg.cells()])?;
    let bx = g.matmul(p.rpn_box_w, feat)?;
    let box_t = g.add_row_bias(bx, p.rpn_box_b)?;
    Ok(RpnOut { obj_logits, box_t })
}

/// Decode the proposal list from RPN output values: sigmoid objectness per
/// cell, sorted descending with ties broken by (row, col) scan order, top-l
/// kept.
pub fn proposals_from_values(
    cfg: &DetectorConfig,
    obj_logits: &[f64],
    box_t: &Tensor,
    top_l: usize,
) -> Vec<Proposal> {
    let cells = cfg.cells();
    let g = cfg.grid();
    debug_assert_eq!(obj_logits.len(), cells);
    debug_assert_eq!(box_t.shape(), &[4, cells]);
    let bt = box_t.data();
    let mut order: Vec<usize> = (0..cells).collect();
    order.sort_by(|&a, &b| {
        obj_logits[b]
            .partial_cmp(&obj_logits[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(top_l.min(cells))
        .map(|i| {
            let (row, col) = (i / g, i % g);
            let anchor = cfg.anchor(row, col);
            let t = [bt[i], bt[cells + i], bt[2 * cells + i], bt[3 * cells + i]];
            Proposal {
                bbox: decode_box(&anchor, &t),
                objectness: sigmoid(obj_logits[i]),
            }
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cells whose centers fall inside `bbox` (inclusive), scan order. Falls back
/// to the single nearest cell when no center is covered.
pub fn cells_covered(cfg: &DetectorConfig, bbox: &BBox) -> Vec<usize> {
    let g = cfg.grid();
    let mut cells = Vec::new();
    for r in 0..g {
        for c in 0..g {
            let (cx, cy) = cfg.cell_center(r, c);
            if bbox.contains(cx, cy) {
                cells.push(r * g + c);
            }
        }
    }
    if cells.is_empty() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for r in 0..g {
            for c in 0..g {
                let (cx, cy) = cfg.cell_center(r, c);
                let d = (cx - bbox.cx).powi(2) + (cy - bbox.cy).powi(2);
                if d < best_d {
                    best_d = d;
                    best = r * g + c;
                }
            }
        }
        cells.push(best);
    }
    cells
}

/// Average-pool the feature vectors of the cells covered by `bbox`; `[D]`.
pub fn roi_pool(
    g: &mut Graph,
    cfg: &DetectorConfig,
    feat: NodeId,
    bbox: &BBox,
) -> Result<NodeId, AutodiffError> {
    let d = cfg.feat_channels;
    let cells = cfg.cells();
    let cov = cells_covered(cfg, bbox);
    let n = cov.len();
    let mut idx = Vec::with_capacity(d * n);
    for ch in 0..d {
        for &cell in &cov {
            idx.push(ch * cells + cell);
        }
    }
    let picked = g.gather(feat, idx, vec![d, n])?;
    let weights = g.constant(Tensor::from_vec(vec![n, 1], vec![1.0 / n as f64; n]));
    let pooled = g.matmul(picked, weights)?;
    g.reshape(pooled, vec![d])
}

pub struct RoiOut {
    /// Class logits over foreground classes plus background, `[K+1]`.
    pub cls_logits: NodeId,
    /// Refinement offsets relative to the proposal box, `[4]`.
    pub box_t: NodeId,
}

pub fn roi_head(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &DetectorConfig,
    pooled: NodeId,
) -> Result<RoiOut, AutodiffError> {
    let x = g.reshape(pooled, vec![cfg.feat_channels, 1])?;
    let h = g.matmul(p.roi_fc_w, x)?;
    let h = g.add_row_bias(h, p.roi_fc_b)?;
    let h = g.relu(h);
    let cls = g.matmul(p.roi_cls_w, h)?;
    let cls = g.add_row_bias(cls, p.roi_cls_b)?;
    let cls_logits = g.reshape(cls, vec![cfg.classes + 1])?;
    let bx = g.matmul(p.roi_box_w, h)?;
    let bx = g.add_row_bias(bx, p.roi_box_b)?;
    let box_t = g.reshape(bx, vec![4])?;
    Ok(RoiOut {
        cls_logits,
        box_t,
    })
}

/// ROI outputs for a fixed list of boxes: stacked class logits `[l, K+1]`
/// plus each box-offset node.
pub fn roi_outputs_for_boxes(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &DetectorConfig,
    feat: NodeId,
    boxes: &[BBox],
) -> Result<(NodeId, Vec<NodeId>), AutodiffError> {
    let mut cls = Vec::with_capacity(boxes.len());
    let mut boxes_t = Vec::with_capacity(boxes.len());
    for b in boxes {
        let pooled = roi_pool(g, cfg, feat, b)?;
        let out = roi_head(g, p, cfg, pooled)?;
        cls.push(out.cls_logits);
        boxes_t.push(out.box_t);
    }
    let stacked = g.concat_rows(&cls)?;
    Ok((stacked, boxes_t))
}

/// Everything the adaptation loop needs from one model on one image.
pub struct FullPass {
    pub featmap: NodeId,
    pub proposals: Vec<Proposal>,
    /// Stacked class logits over the proposals, `[l, K+1]`.
    pub cls_stack: NodeId,
    /// Per-proposal refinement offsets.
    pub box_nodes: Vec<NodeId>,
    /// Score-floored, per-class-NMS detections.
    pub detections: Vec<Detection>,
}

/// backbone -> proposal head -> ROI pooling -> ROI head -> NMS.
pub fn full_pass(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &DetectorConfig,
    image: &Image,
    score_floor: f64,
) -> Result<FullPass, AutodiffError> {
    assert!((0.0..1.0).contains(&score_floor), "score_floor in [0,1)");
    let featmap = backbone(g, p, cfg, image)?;
    let rpn_out = rpn(g, p, cfg, featmap)?;
    let obj = g.value(rpn_out.obj_logits).data().to_vec();
    let box_t = g.value(rpn_out.box_t).clone();
    let proposals = proposals_from_values(cfg, &obj, &box_t, cfg.top_l);
    let boxes: Vec<BBox> = proposals.iter().map(|pr| pr.bbox).collect();
    let (cls_stack, box_nodes) = roi_outputs_for_boxes(g, p, cfg, featmap, &boxes)?;

    let k1 = cfg.classes + 1;
    let logits = g.value(cls_stack).data();
    let mut candidates = Vec::new();
    for (i, prop) in proposals.iter().enumerate() {
        let row = &logits[i * k1..(i + 1) * k1];
        let probs = softmax_slice(row);
        let mut best_c = 0;
        for c in 1..cfg.classes {
            if probs[c] > probs[best_c] {
                best_c = c;
            }
        }
        let score = probs[best_c];
        if score < score_floor {
            continue;
        }
        let tv = g.value(box_nodes[i]).data();
        let t = [tv[0], tv[1], tv[2], tv[3]];
        candidates.push(Detection {
            bbox: decode_box(&prop.bbox, &t),
            class_id: best_c,
            score,
        });
    }
    let detections = nms_per_class(&candidates, cfg.classes, cfg.nms_iou);
    Ok(FullPass {
        featmap,
        proposals,
        cls_stack,
        box_nodes,
        detections,
    })
}

/// Pure detection: full pipeline on a scratch graph.
pub fn detect(
    store: &ParamStore,
    cfg: &DetectorConfig,
    image: &Image,
    score_floor: f64,
) -> Vec<Detection> {
    let mut g = Graph::new();
    let p = bind(&mut g, store).expect("bind");
    full_pass(&mut g, &p, cfg, image, score_floor)
        .expect("forward")
        .detections
}

fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Greedy NMS within each class; survivors keep global score-descending
/// order (ties by input order).
pub fn nms_per_class(dets: &[Detection], classes: usize, iou_thresh: f64) -> Vec<Detection> {
    let mut kept = Vec::new();
    for c in 0..classes {
        let mut class_dets: Vec<&Detection> = dets.iter().filter(|d| d.class_id == c).collect();
        class_dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut survivors: Vec<&Detection> = Vec::new();
        for d in class_dets {
            if survivors.iter().all(|s| iou(&s.bbox, &d.bbox) < iou_thresh) {
                survivors.push(d);
            }
        }
        kept.extend(survivors.into_iter().cloned());
    }
    kept.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.class_id.cmp(&b.class_id))
    });
    kept
}
