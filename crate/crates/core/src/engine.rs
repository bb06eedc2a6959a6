//! The online adaptation loop and experiment orchestration.
//!
//! Per frame, in order: teacher prediction (weak view), dynamic-skip check,
//! per-class threshold update, contrastive term, pseudo-label filtering,
//! supervised + KL terms, student SGD step, teacher EMA, restoration. A
//! paused frame stops right after the skip check: one teacher forward pass,
//! no parameter mutation, no threshold update.
//!
//! [`Engine::step`] takes only the image; ground truth flows through
//! [`run`]'s separate evaluation channel and is structurally unreachable
//! from the adaptation path.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{RunConfig, SupervisionSource, VariantFlags};
use crate::contrastive::{contrastive_loss, extract_pairs};
use crate::detector::{
    backbone, bind, load_store, roi_outputs_for_boxes, supervised_loss,
    supervised_loss_on_features, BBox, Detection, DetectorConfig, Image, ParamStore, Role,
    StoreError,
};
use crate::eval::{
    match_frame, summarize, Decision, EvalError, MetricRecord, RunSummary,
};
use crate::mean_teacher::{
    augment, ema_update, kl_loss, pseudo_label, sgd_step, teacher_pass, MtError,
};
use crate::monitor::{init_state, skip_decision, update_thresholds, MonitorError, MonitorState};
use crate::restore::{
    adaptive_randomized_restore, data_driven_restore, fim_from_grads, stochastic_restore,
    FimAccumulator, RestoreError, RestoreMode,
};
use crate::rng as seeds;
use crate::streams::{build_stream, pretrain_source, StreamsError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("source model {path:?}: {source}. Run `pretrain` first.")]
    MissingSource {
        path: PathBuf,
        source: StoreError,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    MeanTeacher(#[from] MtError),
    #[error(transparent)]
    Restore(#[from] RestoreError),
    #[error(transparent)]
    Streams(#[from] StreamsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
    #[error("ablate variant {name:?} failed: {source}")]
    AblateChild {
        name: String,
        source: Box<EngineError>,
    },
}

/// Everything one frame produced, for tracing and evaluation.
pub struct StepOutcome {
    pub decision: Decision,
    /// The teacher's predictions on the weak view; the evaluation output.
    pub teacher_dets: Vec<Detection>,
    pub mean_score: Option<f64>,
    pub ema: Option<f64>,
    pub ratio: Option<f64>,
    pub thresholds: Vec<f64>,
    pub pseudo_count: usize,
    pub l_pl: Option<f64>,
    pub l_cl: Option<f64>,
    pub l_kl: Option<f64>,
    pub l_total: Option<f64>,
    pub reset_total: usize,
    /// Per-layer (resets, fim min, fim median, fim max) when restoration ran
    /// with an available FIM.
    pub restore_layers: Vec<(String, usize, f64, f64, f64)>,
    /// Executed operations, in order.
    pub ops: Vec<&'static str>,
}

/// The adaptation state machine. Constructed per run; consumed sequentially.
pub struct Engine {
    det_cfg: DetectorConfig,
    trainer: crate::mean_teacher::TrainerConfig,
    augment_cfg: crate::mean_teacher::AugmentConfig,
    variant: VariantFlags,
    restore_cfg: crate::restore::RestoreConfig,
    score_floor: f64,
    student: ParamStore,
    teacher: ParamStore,
    source: ParamStore,
    monitor: MonitorState,
    aug_rng: ChaCha8Rng,
    restore_rng: ChaCha8Rng,
}

impl Engine {
    pub fn new(cfg: &RunConfig, source: ParamStore) -> Result<Engine, EngineError> {
        let schema_probe = crate::detector::init_params(&cfg.detector, 0);
        if !schema_probe.schema_matches(&source) {
            return Err(EngineError::Config(
                "detector config does not match the source model's layer schema".into(),
            ));
        }
        let monitor = init_state(&cfg.monitor, cfg.detector.classes)?;
        Ok(Engine {
            det_cfg: cfg.detector.clone(),
            trainer: cfg.trainer.clone(),
            augment_cfg: cfg.augment.clone(),
            variant: cfg.variant.clone(),
            restore_cfg: cfg.restore.clone(),
            score_floor: cfg.score_floor,
            student: source.clone().with_role(Role::Student),
            teacher: source.clone().with_role(Role::Teacher),
            source: source.with_role(Role::Source),
            monitor,
            aug_rng: seeds::stream(cfg.seed, "augment", 0),
            restore_rng: seeds::stream(cfg.seed, "restore", 0),
        })
    }

    pub fn student(&self) -> &ParamStore {
        &self.student
    }

    pub fn teacher(&self) -> &ParamStore {
        &self.teacher
    }

    pub fn monitor(&self) -> &MonitorState {
        &self.monitor
    }

    /// Pseudo-label thresholds in force right now.
    fn effective_thresholds(&self) -> Vec<f64> {
        if self.variant.use_am_threshold {
            self.monitor.thresholds.clone()
        } else {
            vec![self.variant.fixed_threshold; self.det_cfg.classes]
        }
    }

    /// One frame of the adaptation loop. Labels are not a parameter: the
    /// adaptation path cannot see them.
    pub fn step(&mut self, image: &Image) -> Result<StepOutcome, EngineError> {
        let mut ops: Vec<&'static str> = Vec::new();

        // Weak/strong views; the teacher predicts on the weak one.
        let pair = augment(image, &self.augment_cfg, &mut self.aug_rng);
        let teacher_out = teacher_pass(&self.teacher, &self.det_cfg, &pair.weak, self.score_floor)?;
        ops.push("teacher_predict");

        // Prediction stream for the monitor and pseudo-labels.
        let pred_dets: Vec<Detection> = match self.variant.supervision_source {
            SupervisionSource::Teacher => teacher_out.detections.clone(),
            SupervisionSource::Student => {
                let student_out =
                    teacher_pass(&self.student, &self.det_cfg, &pair.weak, self.score_floor)?;
                ops.push("student_predict");
                student_out.detections
            }
        };

        let (info, next_monitor) = skip_decision(&self.monitor, &pred_dets);
        self.monitor = next_monitor;
        ops.push("skip_check");
        let decision = if self.variant.use_am_skip {
            info.decision
        } else if pred_dets.is_empty() {
            Decision::Pause
        } else {
            Decision::Adapt
        };

        if decision == Decision::Pause {
            return Ok(StepOutcome {
                decision,
                teacher_dets: teacher_out.detections,
                mean_score: info.lbar,
                ema: self.monitor.lbar_ema,
                ratio: info.ratio,
                thresholds: self.effective_thresholds(),
                pseudo_count: 0,
                l_pl: None,
                l_cl: None,
                l_kl: None,
                l_total: None,
                reset_total: 0,
                restore_layers: Vec::new(),
                ops,
            });
        }

        if self.variant.use_am_threshold {
            self.monitor = update_thresholds(&self.monitor, &pred_dets);
            ops.push("threshold_update");
        }
        let thresholds = self.effective_thresholds();

        // Student loss graph, assembled in control-flow order.
        let mut g = crate::autodiff::Graph::new();
        let bound = bind(&mut g, &self.student).map_err(MtError::Autodiff)?;
        let feat_s =
            backbone(&mut g, &bound, &self.det_cfg, &pair.strong).map_err(MtError::Autodiff)?;

        let have_props = !teacher_out.proposals.is_empty();
        let mut l_cl = 0.0;
        let mut cl_node = None;
        if self.variant.use_ocl && self.trainer.lambda_cl > 0.0 && have_props {
            let t_fm = g.constant(teacher_out.featmap.clone());
            let pairs = extract_pairs(&mut g, &self.det_cfg, t_fm, feat_s, &teacher_out.proposals)
                .map_err(MtError::Ocl)?;
            let cl = contrastive_loss(&mut g, &pairs, self.trainer.tau).map_err(MtError::Ocl)?;
            l_cl = g.value(cl).item();
            cl_node = Some(cl);
            ops.push("ocl_loss");
        }

        let pseudo = pseudo_label(&pred_dets, &thresholds);
        ops.push("pseudo_label");

        let parts =
            supervised_loss_on_features(&mut g, &bound, &self.det_cfg, feat_s, &pseudo)
                .map_err(MtError::Autodiff)?;
        let l_pl = g.value(parts.total).item();
        let mut total = parts.total;
        if let Some(cl) = cl_node {
            let scaled = g.scale(cl, self.trainer.lambda_cl);
            total = g.add(total, scaled).map_err(MtError::Autodiff)?;
        }
        let mut l_kl = 0.0;
        if self.variant.use_kl && self.trainer.mu_kl > 0.0 && have_props {
            let boxes: Vec<BBox> = teacher_out.proposals.iter().map(|p| p.bbox).collect();
            let (stack, _) = roi_outputs_for_boxes(&mut g, &bound, &self.det_cfg, feat_s, &boxes)
                .map_err(MtError::Autodiff)?;
            let kl = kl_loss(&mut g, stack, &teacher_out.cls_logits)?;
            l_kl = g.value(kl).item();
            let scaled = g.scale(kl, self.trainer.mu_kl);
            total = g.add(total, scaled).map_err(MtError::Autodiff)?;
        }
        ops.push("supervised_kl_loss");
        let l_total = g.value(total).item();

        let grads = g.backward(total).map_err(MtError::Autodiff)?;
        self.student = sgd_step(&grads, self.trainer.gamma, &self.student)?;
        ops.push("sgd_step");

        self.teacher = ema_update(&self.teacher, &self.student, self.trainer.alpha)?;
        ops.push("ema_update");

        let mut reset_total = 0;
        let mut restore_layers = Vec::new();
        if self.restore_cfg.mode != RestoreMode::None {
            let fim = match self.restore_cfg.mode {
                RestoreMode::Arr | RestoreMode::Dr => {
                    Some(self.fim_at_current_student(&pair.strong, &pseudo)?)
                }
                _ => None,
            };
            let (next_student, mask) = match self.restore_cfg.mode {
                RestoreMode::Arr => adaptive_randomized_restore(
                    &self.student,
                    &self.source,
                    fim.as_ref().unwrap(),
                    self.restore_cfg.q,
                    &mut self.restore_rng,
                )?,
                RestoreMode::Dr => data_driven_restore(
                    &self.student,
                    &self.source,
                    fim.as_ref().unwrap(),
                    self.restore_cfg.q,
                )?,
                RestoreMode::Sr => stochastic_restore(
                    &self.student,
                    &self.source,
                    self.restore_cfg.p_reset,
                    &mut self.restore_rng,
                )?,
                RestoreMode::None => unreachable!(),
            };
            self.student = next_student;
            reset_total = mask.total_resets();
            if self.restore_cfg.trace {
                for (name, _) in self.student.layers() {
                    let (lo, med, hi) = fim
                        .as_ref()
                        .map(|f| layer_stats(f, name))
                        .unwrap_or((0.0, 0.0, 0.0));
                    restore_layers.push((name.clone(), mask.reset_count(name), lo, med, hi));
                }
            }
            ops.push("restore");
        }

        Ok(StepOutcome {
            decision,
            teacher_dets: teacher_out.detections,
            mean_score: info.lbar,
            ema: self.monitor.lbar_ema,
            ratio: info.ratio,
            thresholds,
            pseudo_count: pseudo.len(),
            l_pl: Some(l_pl),
            l_cl: Some(l_cl),
            l_kl: Some(l_kl),
            l_total: Some(l_total),
            reset_total,
            restore_layers,
            ops,
        })
    }

    /// Empirical FIM from a second backward pass at the post-step student
    /// parameters, on the same strong view and pseudo-labels.
    fn fim_at_current_student(
        &self,
        strong: &Image,
        pseudo: &[Detection],
    ) -> Result<FimAccumulator, EngineError> {
        let mut g = crate::autodiff::Graph::new();
        let bound = bind(&mut g, &self.student).map_err(MtError::Autodiff)?;
        let parts = supervised_loss(&mut g, &bound, &self.det_cfg, strong, pseudo)
            .map_err(MtError::Autodiff)?;
        let grads = g.backward(parts.total).map_err(MtError::Autodiff)?;
        Ok(fim_from_grads(&grads))
    }
}

fn layer_stats(fim: &FimAccumulator, name: &str) -> (f64, f64, f64) {
    match fim.layers.get(name) {
        None => (0.0, 0.0, 0.0),
        Some(t) => {
            let mut v: Vec<f64> = t.data().to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (v[0], v[v.len() / 2], v[v.len() - 1])
        }
    }
}

// ── Run orchestration ────────────────────────────────────────────────

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => String::new(),
    }
}

/// Load the source model named by the config and run the stream.
pub fn run(cfg: &RunConfig) -> Result<RunSummary, EngineError> {
    let saved = load_store(&cfg.source_model).map_err(|e| EngineError::MissingSource {
        path: cfg.source_model.clone(),
        source: e,
    })?;
    run_with_source(cfg, saved.store)
}

/// Run the stream against an in-memory source store, writing trace.csv,
/// summary.json, and the effective config into the run directory.
pub fn run_with_source(cfg: &RunConfig, source: ParamStore) -> Result<RunSummary, EngineError> {
    let mut engine = Engine::new(cfg, source)?;
    let spec = cfg.stream_spec();
    let layout = spec.layout();
    let classes = cfg.detector.classes;

    let mut records: Vec<MetricRecord> = Vec::with_capacity(spec.total_frames());
    let mut trace = String::new();
    let thr_cols: Vec<String> = (0..classes).map(|c| format!("thr{c}")).collect();
    let _ = writeln!(
        trace,
        "frame,round,domain,tag,decision,dets,pseudo,mean_score,ema,ratio,{},l_pl,l_cl,l_kl,l_total,resets,tp,fp,fn",
        thr_cols.join(",")
    );
    let mut restore_trace = String::from("frame,layer,resets,fim_min,fim_median,fim_max\n");

    for frame in build_stream(&spec) {
        let outcome = engine.step(&frame.scene.image)?;
        let eval = match_frame(&outcome.teacher_dets, &frame.scene.labels, classes, 0.5);
        let decision_s = match outcome.decision {
            Decision::Adapt => "adapt",
            Decision::Pause => "pause",
        };
        let thr = outcome
            .thresholds
            .iter()
            .map(|t| format!("{t:.6}"))
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(
            trace,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            frame.frame_index,
            frame.round_index,
            frame.domain_index,
            frame.scene.image.domain_tag,
            decision_s,
            outcome.teacher_dets.len(),
            outcome.pseudo_count,
            fmt_opt(outcome.mean_score),
            fmt_opt(outcome.ema),
            fmt_opt(outcome.ratio),
            thr,
            fmt_opt(outcome.l_pl),
            fmt_opt(outcome.l_cl),
            fmt_opt(outcome.l_kl),
            fmt_opt(outcome.l_total),
            outcome.reset_total,
            eval.tp(),
            eval.fp(),
            eval.missed(),
        );
        for (layer, resets, lo, med, hi) in &outcome.restore_layers {
            let _ = writeln!(
                restore_trace,
                "{},{},{},{:.9e},{:.9e},{:.9e}",
                frame.frame_index, layer, resets, lo, med, hi
            );
        }
        records.push(MetricRecord {
            frame_index: frame.frame_index,
            domain_index: frame.domain_index,
            domain_tag: frame.scene.image.domain_tag.clone(),
            round_index: frame.round_index,
            decision: outcome.decision,
            eval,
        });
    }

    let mut summary = summarize(&cfg.name, cfg.seed, &layout, &records);
    summary.group = cfg.group.clone();

    fs::create_dir_all(&cfg.out_dir)?;
    fs::write(cfg.out_dir.join("trace.csv"), trace)?;
    fs::write(cfg.out_dir.join("config.txt"), cfg.to_text())?;
    let json = serde_json::to_string_pretty(&summary).expect("serialize summary");
    fs::write(cfg.out_dir.join("summary.json"), json + "\n")?;
    if cfg.restore.trace {
        fs::write(cfg.out_dir.join("restore_trace.csv"), restore_trace)?;
    }
    Ok(summary)
}

// ── Pretraining entry point ──────────────────────────────────────────

/// Train the source model and write it (with provenance) where the config
/// points. Returns the held-out clean mAP.
pub fn pretrain_to_file(cfg: &RunConfig) -> Result<f64, EngineError> {
    let (store, map) = pretrain_source(&cfg.detector, &cfg.pretrain, cfg.seed)?;
    let prov = crate::detector::Provenance {
        seed: cfg.seed,
        frames: cfg.pretrain.frames as u32,
        clean_map: map,
    };
    crate::detector::save_store(&cfg.source_model, &store, &prov).map_err(|e| {
        EngineError::MissingSource {
            path: cfg.source_model.clone(),
            source: e,
        }
    })?;
    Ok(map)
}

// ── Ablation matrix ──────────────────────────────────────────────────

/// The 6-row component matrix plus the 6-row variant matrix, derived from a
/// base config. Each row changes only the fields its name declares, plus its
/// name, group, and output directory; the base's variant and restore-mode
/// settings are replaced by the canonical matrix.
pub fn ablate_matrix(base: &RunConfig) -> Vec<RunConfig> {
    let full_flags = VariantFlags::default();
    let mt_flags = VariantFlags {
        use_ocl: false,
        use_am_threshold: false,
        use_am_skip: false,
        ..VariantFlags::default()
    };
    let mk = |name: &str, group: &str, variant: VariantFlags, mode: RestoreMode| {
        let mut c = base.clone();
        c.name = name.to_string();
        c.group = group.to_string();
        c.out_dir = base.out_dir.join(name);
        c.variant = variant;
        c.restore.mode = mode;
        c
    };
    vec![
        mk("mt", "components", mt_flags.clone(), RestoreMode::None),
        mk("mt_arr", "components", mt_flags.clone(), RestoreMode::Arr),
        mk(
            "mt_am",
            "components",
            VariantFlags {
                use_ocl: false,
                ..VariantFlags::default()
            },
            RestoreMode::None,
        ),
        mk(
            "mt_ocl",
            "components",
            VariantFlags {
                use_am_threshold: false,
                use_am_skip: false,
                ..VariantFlags::default()
            },
            RestoreMode::None,
        ),
        mk(
            "mt_ocl_am",
            "components",
            VariantFlags::default(),
            RestoreMode::None,
        ),
        mk("full", "components", full_flags.clone(), RestoreMode::Arr),
        mk(
            "student",
            "variants",
            VariantFlags {
                supervision_source: SupervisionSource::Student,
                ..VariantFlags::default()
            },
            RestoreMode::Arr,
        ),
        mk(
            "ft_0.7",
            "variants",
            VariantFlags {
                use_am_threshold: false,
                use_am_skip: false,
                fixed_threshold: 0.7,
                ..VariantFlags::default()
            },
            RestoreMode::Arr,
        ),
        mk(
            "ft_0.8",
            "variants",
            VariantFlags {
                use_am_threshold: false,
                use_am_skip: false,
                fixed_threshold: 0.8,
                ..VariantFlags::default()
            },
            RestoreMode::Arr,
        ),
        mk(
            "ft_0.9",
            "variants",
            VariantFlags {
                use_am_threshold: false,
                use_am_skip: false,
                fixed_threshold: 0.9,
                ..VariantFlags::default()
            },
            RestoreMode::Arr,
        ),
        mk("sr", "variants", full_flags.clone(), RestoreMode::Sr),
        mk("dr", "variants", full_flags, RestoreMode::Dr),
    ]
}

/// Run the whole matrix sequentially (same seed, same stream) and write the
/// combined comparison table under the base out_dir.
pub fn ablate(base: &RunConfig) -> Result<Vec<RunSummary>, EngineError> {
    let saved = load_store(&base.source_model).map_err(|e| EngineError::MissingSource {
        path: base.source_model.clone(),
        source: e,
    })?;
    let mut summaries = Vec::new();
    for row in ablate_matrix(base) {
        let summary =
            run_with_source(&row, saved.store.clone()).map_err(|e| EngineError::AblateChild {
                name: row.name.clone(),
                source: Box::new(e),
            })?;
        summaries.push(summary);
    }
    crate::report::write_report(&base.out_dir, &summaries)?;
    Ok(summaries)
}

// ── Stream dumping ───────────────────────────────────────────────────

/// Write stream frames as binary PGM plus a labels text file, for visual
/// inspection. `limit` caps the frame count.
pub fn dump_stream(cfg: &RunConfig, out: &Path, limit: Option<usize>) -> Result<usize, EngineError> {
    fs::create_dir_all(out)?;
    let spec = cfg.stream_spec();
    let mut labels = String::from("# frame tag round class cx cy w h\n");
    let mut count = 0;
    for frame in build_stream(&spec).take(limit.unwrap_or(usize::MAX)) {
        let img = &frame.scene.image;
        let mut pgm = format!("P5\n{} {}\n255\n", img.size, img.size).into_bytes();
        pgm.extend(
            img.pixels
                .iter()
                .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        fs::write(out.join(format!("frame_{:06}.pgm", frame.frame_index)), pgm)?;
        for l in &frame.scene.labels {
            let _ = writeln!(
                labels,
                "{} {} {} {} {:.6} {:.6} {:.6} {:.6}",
                frame.frame_index,
                img.domain_tag,
                frame.round_index,
                l.class_id,
                l.bbox.cx,
                l.bbox.cy,
                l.bbox.w,
                l.bbox.h
            );
        }
        count += 1;
    }
    fs::write(out.join("labels.txt"), labels)?;
    Ok(count)
}
