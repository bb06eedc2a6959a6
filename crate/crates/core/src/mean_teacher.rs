//! Student/teacher scaffolding: weak/strong augmentation, pseudo-label
//! filtering, KL distillation, the overall student loss, the SGD step, and
//! the teacher EMA update.
//!
//! Augmentations are photometric only, so boxes and proposals computed on the
//! weak view are geometrically valid on the strong view without transform.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, GradMap, Graph, NodeId, Tensor};
use crate::contrastive::{contrastive_loss, extract_pairs, OclError};
use crate::detector::{
    bind, full_pass, roi_outputs_for_boxes, supervised_loss_on_features, BBox, Detection,
    DetectorConfig, Image, ParamStore, Proposal,
};

#[derive(Debug, Error)]
pub enum MtError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Ocl(#[from] OclError),
    #[error("gradient map missing layer {0:?}")]
    MissingGradient(String),
    #[error("parameter schema mismatch between {0} and {1}")]
    SchemaMismatch(&'static str, &'static str),
}

// ── Augmentation ─────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub contrast_lo: f64,
    pub contrast_hi: f64,
    /// Side of the square cutout patch on the strong view; 0 disables.
    pub cutout: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            weak_sigma: 0.01,
            strong_sigma: 0.05,
            contrast_lo: 0.7,
            contrast_hi: 1.3,
            cutout: 8,
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation; both views equal the input bit-exactly.
    pub fn identity() -> Self {
        AugmentConfig {
            weak_sigma: 0.0,
            strong_sigma: 0.0,
            contrast_lo: 1.0,
            contrast_hi: 1.0,
            cutout: 0,
        }
    }
}

/// Two photometric views of one frame; no geometric transform.
#[derive(Clone, Debug)]
pub struct AugmentedPair {
    pub weak: Image,
    pub strong: Image,
}

fn add_noise(pixels: &mut [f64], sigma: f64, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    let dist = Normal::new(0.0, sigma).expect("valid sigma");
    for p in pixels.iter_mut() {
        *p += dist.sample(rng);
    }
}

fn clamp01(pixels: &mut [f64]) {
    for p in pixels.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
}

/// Weak view: light Gaussian pixel noise. Strong view: heavier noise, a
/// random contrast scale around 0.5, and one zeroed square patch.
pub fn augment(image: &Image, cfg: &AugmentConfig, rng: &mut impl Rng) -> AugmentedPair {
    let size = image.size;
    let mut weak = image.pixels.clone();
    add_noise(&mut weak, cfg.weak_sigma, rng);
    clamp01(&mut weak);

    let mut strong = image.pixels.clone();
    add_noise(&mut strong, cfg.strong_sigma, rng);
    let c = if cfg.contrast_lo < cfg.contrast_hi {
        rng.gen_range(cfg.contrast_lo..cfg.contrast_hi)
    } else {
        cfg.contrast_lo
    };
    if c != 1.0 {
        for p in strong.iter_mut() {
            *p = 0.5 + (*p - 0.5) * c;
        }
    }
    if cfg.cutout > 0 && cfg.cutout <= size {
        let r0 = rng.gen_range(0..=size - cfg.cutout);
        let c0 = rng.gen_range(0..=size - cfg.cutout);
        for r in r0..r0 + cfg.cutout {
            for cc in c0..c0 + cfg.cutout {
                strong[r * size + cc] = 0.0;
            }
        }
    }
    clamp01(&mut strong);

    AugmentedPair {
        weak: Image::new(size, weak, image.domain_tag.clone()),
        strong: Image::new(size, strong, image.domain_tag.clone()),
    }
}

// ── Pseudo-labels ────────────────────────────────────────────────────

/// Keep detections whose score clears their class threshold. Pure filter:
/// the output is a subset of the input, unmodified.
pub fn pseudo_label(teacher_dets: &[Detection], thresholds: &[f64]) -> Vec<Detection> {
    teacher_dets
        .iter()
        .filter(|d| d.score >= thresholds[d.class_id])
        .copied()
        .collect()
}

// ── Trainer configuration ────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// Student learning rate.
    pub gamma: f64,
    /// Teacher EMA momentum (weight on the old teacher).
    pub alpha: f64,
    /// Contrastive loss weight.
    pub lambda_cl: f64,
    /// KL distillation weight.
    pub mu_kl: f64,
    /// Contrastive temperature.
    pub tau: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            gamma: 0.01,
            alpha: 0.9996,
            lambda_cl: 0.5,
            mu_kl: 1.0,
            tau: 0.07,
        }
    }
}

// ── KL distillation ──────────────────────────────────────────────────

/// Identical to the graph's row log-softmax, operation for operation, so a
/// bit-identical student reproduces the teacher term exactly.
fn log_softmax_plain(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|&s| (s - m).exp()).sum();
    let lz = m + z.ln();
    row.iter().map(|&s| s - lz).collect()
}

/// Mean over proposals of `KL(P || Q)` where P is the teacher's class
/// distribution (constant) and Q the student's. Built as
/// `mean_rows(sum_x P * (logP - logQ))`, so identical logits give exactly 0.
pub fn kl_loss(
    g: &mut Graph,
    student_logits: NodeId,
    teacher_logits: &Tensor,
) -> Result<NodeId, MtError> {
    let shape = teacher_logits.shape().to_vec();
    if g.value(student_logits).shape() != shape.as_slice() {
        return Err(MtError::Autodiff(AutodiffError::ShapeMismatch {
            op: "kl_loss",
            lhs: g.value(student_logits).shape().to_vec(),
            rhs: shape,
        }));
    }
    let cols = *shape.last().unwrap();
    let rows = teacher_logits.numel() / cols;
    let mut p = Vec::with_capacity(teacher_logits.numel());
    let mut lp = Vec::with_capacity(teacher_logits.numel());
    for row in teacher_logits.data().chunks(cols) {
        let l = log_softmax_plain(row);
        p.extend(l.iter().map(|&v| v.exp()));
        lp.extend_from_slice(&l);
    }
    let p_const = g.constant(Tensor::from_vec(shape.clone(), p));
    let lp_const = g.constant(Tensor::from_vec(shape, lp));
    let lq = g.log_softmax_last(student_logits);
    let diff = g.sub(lp_const, lq)?;
    let weighted = g.mul(p_const, diff)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / rows as f64))
}

// ── Teacher forward ──────────────────────────────────────────────────

/// Detached teacher artifacts from one weak-view forward pass.
pub struct TeacherOutput {
    pub detections: Vec<Detection>,
    pub proposals: Vec<Proposal>,
    /// Backbone features, `[D, cells]`.
    pub featmap: Tensor,
    /// Per-proposal class logits, `[l, K+1]`.
    pub cls_logits: Tensor,
}

pub fn teacher_pass(
    store: &ParamStore,
    det_cfg: &DetectorConfig,
    image: &Image,
    score_floor: f64,
) -> Result<TeacherOutput, MtError> {
    let mut g = Graph::new();
    let p = bind(&mut g, store)?;
    let pass = full_pass(&mut g, &p, det_cfg, image, score_floor)?;
    Ok(TeacherOutput {
        detections: pass.detections,
        proposals: pass.proposals.clone(),
        featmap: g.value(pass.featmap).clone(),
        cls_logits: g.value(pass.cls_stack).clone(),
    })
}

// ── Overall loss ─────────────────────────────────────────────────────

/// The student's loss graph plus per-term values for tracing.
pub struct LossReport {
    pub graph: Graph,
    pub total: NodeId,
    pub l_pl: f64,
    pub l_cl: f64,
    pub l_kl: f64,
    pub total_value: f64,
}

/// `L_pl(strong, pseudo) + lambda * L_cl + mu * L_kl`, all on the student.
///
/// The contrastive and KL terms use the teacher's proposals from the weak
/// view; the teacher side of both is detached (constant tensors). A zero
/// weight or an empty proposal list skips the corresponding term entirely,
/// so it contributes exactly 0.
pub fn overall_loss(
    pair: &AugmentedPair,
    pseudo: &[Detection],
    teacher: &TeacherOutput,
    trainer: &TrainerConfig,
    det_cfg: &DetectorConfig,
    student: &ParamStore,
) -> Result<LossReport, MtError> {
    let mut g = Graph::new();
    let p = bind(&mut g, student)?;
    let feat_s = crate::detector::backbone(&mut g, &p, det_cfg, &pair.strong)?;
    let parts = supervised_loss_on_features(&mut g, &p, det_cfg, feat_s, pseudo)?;
    let mut total = parts.total;
    let l_pl = g.value(parts.total).item();
    let mut l_cl = 0.0;
    let mut l_kl = 0.0;

    let have_props = !teacher.proposals.is_empty();
    if trainer.lambda_cl > 0.0 && have_props {
        let t_fm = g.constant(teacher.featmap.clone());
        let pairs = extract_pairs(&mut g, det_cfg, t_fm, feat_s, &teacher.proposals)?;
        let cl = contrastive_loss(&mut g, &pairs, trainer.tau)?;
        l_cl = g.value(cl).item();
        let scaled = g.scale(cl, trainer.lambda_cl);
        total = g.add(total, scaled)?;
    }
    if trainer.mu_kl > 0.0 && have_props {
        let boxes: Vec<BBox> = teacher.proposals.iter().map(|pr| pr.bbox).collect();
        let (stack, _) = roi_outputs_for_boxes(&mut g, &p, det_cfg, feat_s, &boxes)?;
        let kl = kl_loss(&mut g, stack, &teacher.cls_logits)?;
        l_kl = g.value(kl).item();
        let scaled = g.scale(kl, trainer.mu_kl);
        total = g.add(total, scaled)?;
    }
    let total_value = g.value(total).item();
    Ok(LossReport {
        graph: g,
        total,
        l_pl,
        l_cl,
        l_kl,
        total_value,
    })
}

// ── Parameter updates ────────────────────────────────────────────────

/// One descent step: `theta <- theta - gamma * grad`, layerwise.
pub fn sgd_step(
    grads: &GradMap,
    gamma: f64,
    student: &ParamStore,
) -> Result<ParamStore, MtError> {
    student.map(|name, t| {
        let grad = grads
            .get(name)
            .ok_or_else(|| MtError::MissingGradient(name.to_string()))?;
        if grad.shape() != t.shape() {
            return Err(MtError::SchemaMismatch("gradients", "student"));
        }
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&w, &g)| w - gamma * g)
            .collect();
        Ok(Tensor::from_vec(t.shape().to_vec(), data))
    })
}

/// Teacher EMA: `theta_T <- alpha * theta_T + (1 - alpha) * theta_S`.
pub fn ema_update(
    teacher: &ParamStore,
    student: &ParamStore,
    alpha: f64,
) -> Result<ParamStore, MtError> {
    if !teacher.schema_matches(student) {
        return Err(MtError::SchemaMismatch("teacher", "student"));
    }
    teacher.map(|name, t| {
        let s = student.get(name).unwrap();
        let data: Vec<f64> = t
            .data()
            .iter()
            .zip(s.data())
            .map(|(&tv, &sv)| alpha * tv + (1.0 - alpha) * sv)
            .collect();
        Ok(Tensor::from_vec(t.shape().to_vec(), data))
    })
}
