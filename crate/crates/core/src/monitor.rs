//! Adaptive monitoring: dynamic skipping over the overall mean score and
//! per-class dynamic pseudo-label thresholds.
//!
//! The skip rule tracks an EMA of the mean prediction score and pauses
//! adaptation whenever the ratio of the current mean to the EMA leaves the
//! stability band `(1/delta_s, delta_s)`. Per-class thresholds relax toward
//! `epsilon * sqrt(mean class score)` under an EMA with rate `beta_t`,
//! clamped to `[delta_mini, delta_max]`; a class absent from the frame keeps
//! its threshold bit-exactly.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Detection;
use crate::eval::Decision;

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("monitor config: {what} = {value} violates {bound}")]
    BadConfig {
        what: &'static str,
        value: f64,
        bound: &'static str,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    /// EMA rate for the overall mean score (weight on history).
    pub beta_s: f64,
    /// Stability band half-width; adapt iff ratio in (1/delta_s, delta_s).
    pub delta_s: f64,
    /// EMA rate for per-class thresholds.
    pub beta_t: f64,
    /// Linear projection applied to sqrt(mean class score).
    pub epsilon: f64,
    /// Initial per-class threshold.
    pub delta0: f64,
    pub delta_max: f64,
    pub delta_mini: f64,
    /// Update the mean-score EMA on frames the ratio test pauses (the update
    /// rule is written unconditionally; set false to freeze it on pause).
    pub ema_update_on_pause: bool,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            beta_s: 0.75,
            delta_s: 1.4,
            beta_t: 0.95,
            epsilon: 1.3,
            delta0: 0.8,
            delta_max: 0.9,
            delta_mini: 0.7,
            ema_update_on_pause: true,
        }
    }
}

impl MonitorConfig {
    pub fn validate(&self) -> Result<(), MonitorError> {
        let checks: [(&'static str, f64, bool, &'static str); 6] = [
            ("beta_s", self.beta_s, 0.0 < self.beta_s && self.beta_s < 1.0, "0 < beta_s < 1"),
            ("beta_t", self.beta_t, 0.0 < self.beta_t && self.beta_t < 1.0, "0 < beta_t < 1"),
            ("delta_s", self.delta_s, self.delta_s > 1.0, "delta_s > 1"),
            ("epsilon", self.epsilon, self.epsilon > 0.0, "epsilon > 0"),
            (
                "delta_mini",
                self.delta_mini,
                0.0 < self.delta_mini && self.delta_mini <= self.delta_max,
                "0 < delta_mini <= delta_max",
            ),
            (
                "delta0",
                self.delta0,
                self.delta_mini <= self.delta0 && self.delta0 <= self.delta_max,
                "delta_mini <= delta0 <= delta_max",
            ),
        ];
        for (what, value, ok, bound) in checks {
            if !ok {
                return Err(MonitorError::BadConfig { what, value, bound });
            }
        }
        Ok(())
    }
}

/// The monitor's mutable state; a small value object, cloneable for logging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonitorState {
    pub cfg: MonitorConfig,
    /// EMA of the overall mean score; `None` until the first scored frame.
    pub lbar_ema: Option<f64>,
    /// Per-class pseudo-label thresholds.
    pub thresholds: Vec<f64>,
}

/// Per-frame skip diagnostics for the trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkipInfo {
    /// Mean score over this frame's detections; `None` when there were none.
    pub lbar: Option<f64>,
    /// Ratio against the pre-update EMA; `None` on the first scored frame or
    /// an empty frame.
    pub ratio: Option<f64>,
    pub decision: Decision,
}

/// Fresh state with all thresholds at `delta0` and an uninitialized EMA.
pub fn init_state(cfg: &MonitorConfig, classes: usize) -> Result<MonitorState, MonitorError> {
    cfg.validate()?;
    Ok(MonitorState {
        cfg: cfg.clone(),
        lbar_ema: None,
        thresholds: vec![cfg.delta0; classes],
    })
}

fn mean_score(dets: &[Detection]) -> Option<f64> {
    if dets.is_empty() {
        None
    } else {
        Some(dets.iter().map(|d| d.score).sum::<f64>() / dets.len() as f64)
    }
}

/// The dynamic-skipping rule.
///
/// Empty frames pause and leave the state untouched (an undefined mean must
/// not corrupt the EMA). The first scored frame initializes the EMA to the
/// frame mean and adapts. Afterwards: adapt iff `1/delta_s < lbar/ema <
/// delta_s`, with the EMA updated from the pre-update value on every scored
/// frame (or only on adapted frames when `ema_update_on_pause` is off).
pub fn skip_decision(state: &MonitorState, dets: &[Detection]) -> (SkipInfo, MonitorState) {
    let mut next = state.clone();
    let lbar = match mean_score(dets) {
        Some(v) => v,
        None => {
            return (
                SkipInfo {
                    lbar: None,
                    ratio: None,
                    decision: Decision::Pause,
                },
                next,
            )
        }
    };
    match state.lbar_ema {
        None => {
            next.lbar_ema = Some(lbar);
            (
                SkipInfo {
                    lbar: Some(lbar),
                    ratio: None,
                    decision: Decision::Adapt,
                },
                next,
            )
        }
        Some(ema) => {
            let ratio = lbar / ema;
            let cfg = &state.cfg;
            let decision = if ratio > 1.0 / cfg.delta_s && ratio < cfg.delta_s {
                Decision::Adapt
            } else {
                Decision::Pause
            };
            if decision == Decision::Adapt || cfg.ema_update_on_pause {
                next.lbar_ema = Some(cfg.beta_s * ema + (1.0 - cfg.beta_s) * lbar);
            }
            (
                SkipInfo {
                    lbar: Some(lbar),
                    ratio: Some(ratio),
                    decision,
                },
                next,
            )
        }
    }
}

/// Per-class threshold update; classes absent from `dets` keep their
/// thresholds bit-exactly.
pub fn update_thresholds(state: &MonitorState, dets: &[Detection]) -> MonitorState {
    let mut next = state.clone();
    let classes = state.thresholds.len();
    for c in 0..classes {
        let scores: Vec<f64> = dets
            .iter()
            .filter(|d| d.class_id == c)
            .map(|d| d.score)
            .collect();
        if scores.is_empty() {
            continue;
        }
        let lbar_c = scores.iter().sum::<f64>() / scores.len() as f64;
        let cfg = &state.cfg;
        let raw =
            cfg.beta_t * state.thresholds[c] + (1.0 - cfg.beta_t) * cfg.epsilon * lbar_c.sqrt();
        next.thresholds[c] = raw.clamp(cfg.delta_mini, cfg.delta_max);
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::BBox;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(class_id: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(0.5, 0.5, 0.2, 0.2),
            class_id,
            score,
        }
    }

    fn state_with_ema(ema: f64) -> MonitorState {
        let mut s = init_state(&MonitorConfig::default(), 4).unwrap();
        s.lbar_ema = Some(ema);
        s
    }

    #[test]
    fn ratio_exactly_one_adapts() {
        let s = state_with_ema(0.5);
        let (info, _) = skip_decision(&s, &[det(0, 0.5)]);
        assert_eq!(info.decision, Decision::Adapt);
        assert_eq!(info.ratio, Some(1.0));
    }

    #[test]
    fn ratio_outside_band_pauses() {
        let s = state_with_ema(0.5);
        // delta_s = 1.4; mean 0.8 gives ratio 1.6 >= 1.4.
        let (info, _) = skip_decision(&s, &[det(0, 0.8)]);
        assert_eq!(info.decision, Decision::Pause);
        assert!((info.ratio.unwrap() - 1.6).abs() < 1e-12);
        // And the low side: ratio 0.5 <= 1/1.4.
        let (info, _) = skip_decision(&s, &[det(0, 0.25)]);
        assert_eq!(info.decision, Decision::Pause);
    }

    #[test]
    fn ema_update_arithmetic() {
        let cfg = MonitorConfig {
            beta_s: 0.75,
            ..MonitorConfig::default()
        };
        let mut s = init_state(&cfg, 4).unwrap();
        s.lbar_ema = Some(0.5);
        let (_, next) = skip_decision(&s, &[det(0, 0.9)]);
        assert!((next.lbar_ema.unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn empty_frame_pauses_without_mutation() {
        let s = state_with_ema(0.5);
        let (info, next) = skip_decision(&s, &[]);
        assert_eq!(info.decision, Decision::Pause);
        assert_eq!(next, s);
    }

    #[test]
    fn first_scored_frame_initializes_and_adapts() {
        let s = init_state(&MonitorConfig::default(), 4).unwrap();
        let (info, next) = skip_decision(&s, &[det(1, 0.42)]);
        assert_eq!(info.decision, Decision::Adapt);
        assert_eq!(next.lbar_ema, Some(0.42));
    }

    #[test]
    fn constant_stream_never_pauses_after_init() {
        let mut s = init_state(&MonitorConfig::default(), 4).unwrap();
        for _ in 0..100 {
            let (info, next) = skip_decision(&s, &[det(0, 0.6), det(1, 0.6)]);
            assert_eq!(info.decision, Decision::Adapt);
            s = next;
        }
    }

    #[test]
    fn pause_can_freeze_ema_behind_flag() {
        let cfg = MonitorConfig {
            ema_update_on_pause: false,
            ..MonitorConfig::default()
        };
        let mut s = init_state(&cfg, 4).unwrap();
        s.lbar_ema = Some(0.5);
        let (info, next) = skip_decision(&s, &[det(0, 0.9)]);
        assert_eq!(info.decision, Decision::Pause);
        assert_eq!(next.lbar_ema, Some(0.5));
    }

    #[test]
    fn threshold_update_golden_value() {
        // beta_t 0.95, epsilon 1.3, threshold 0.8, mean class score 0.64:
        // 0.95*0.8 + 0.05*1.3*0.8 = 0.812.
        let s = init_state(&MonitorConfig::default(), 4).unwrap();
        let next = update_thresholds(&s, &[det(0, 0.64)]);
        assert!((next.thresholds[0] - 0.812).abs() < 1e-12);
        // Other classes untouched.
        assert_eq!(next.thresholds[1], 0.8);
    }

    #[test]
    fn threshold_clamps_at_bounds() {
        let mut s = init_state(&MonitorConfig::default(), 4).unwrap();
        // raw = 0.95*0.9 + 0.05*1.3*1.0 = 0.92 -> clamped to 0.9.
        s.thresholds[2] = 0.9;
        let next = update_thresholds(&s, &[det(2, 1.0)]);
        assert_eq!(next.thresholds[2], 0.9);
        // And the lower bound: raw = 0.95*0.7 + 0.05*1.3*0.1 = 0.6715 -> 0.7.
        s.thresholds[2] = 0.7;
        let next = update_thresholds(&s, &[det(2, 0.01)]);
        assert_eq!(next.thresholds[2], 0.7);
    }

    #[test]
    fn absent_class_keeps_threshold_bit_exactly() {
        let mut s = init_state(&MonitorConfig::default(), 4).unwrap();
        s.thresholds[2] = 0.83521796437;
        let next = update_thresholds(&s, &[det(0, 0.5), det(1, 0.9)]);
        assert_eq!(next.thresholds[2].to_bits(), s.thresholds[2].to_bits());
    }

    #[test]
    fn init_rejects_out_of_range_delta0() {
        let cfg = MonitorConfig {
            delta0: 0.5,
            ..MonitorConfig::default()
        };
        let err = init_state(&cfg, 4).unwrap_err();
        assert!(err.to_string().contains("delta0"));
    }

    #[test]
    fn default_thresholds_all_at_delta0() {
        let s = init_state(&MonitorConfig::default(), 4).unwrap();
        assert_eq!(s.thresholds, vec![0.8; 4]);
    }

    #[test]
    fn thresholds_stay_in_bounds_under_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let mut s = init_state(&MonitorConfig::default(), 4).unwrap();
            for _ in 0..50 {
                let n = rng.gen_range(0..6);
                let dets: Vec<Detection> = (0..n)
                    .map(|_| det(rng.gen_range(0..4), rng.gen_range(0.0..1.0)))
                    .collect();
                let (_, after_skip) = skip_decision(&s, &dets);
                s = update_thresholds(&after_skip, &dets);
                for &t in &s.thresholds {
                    assert!((0.7..=0.9).contains(&t), "threshold {t} escaped bounds");
                }
            }
        }
    }

    #[test]
    fn constant_class_score_converges_to_clamped_projection() {
        // With score s fixed, the threshold EMA converges geometrically to
        // clamp(epsilon * sqrt(s)); closed form after k steps:
        // t_k = target + beta^k (t_0 - target), in-bounds here so unclamped.
        let cfg = MonitorConfig::default();
        let score = 0.36; // sqrt = 0.6, target = 0.78, inside [0.7, 0.9]
        let target = cfg.epsilon * f64::sqrt(score);
        let mut s = init_state(&cfg, 4).unwrap();
        for _ in 0..200 {
            s = update_thresholds(&s, &[det(0, score)]);
        }
        let closed = target + cfg.beta_t.powi(200) * (cfg.delta0 - target);
        assert!((s.thresholds[0] - closed).abs() < 1e-9);
    }
}
