//! Parameter restoration against catastrophic forgetting.
//!
//! The main mechanism scores every parameter by its empirical diagonal Fisher
//! information (squared pseudo-label loss gradient) times a fresh uniform
//! draw, then resets the per-layer q-quantile of lowest scores back to the
//! frozen source weights. Two ablation variants ride on the same masking
//! machinery: a Bernoulli mask (stochastic restoration) and a pure-FIM mask
//! (data-driven restoration).
//!
//! Quantiles are per layer, not global: weight scales differ across layers
//! and a global cut would concentrate resets in the smallest-scale layer.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{GradMap, Tensor};
use crate::detector::ParamStore;

#[derive(Debug, Error)]
pub enum RestoreError {
    #[error("quantile q = {0} outside (0, 1)")]
    BadQuantile(f64),
    #[error("reset probability p = {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RestoreMode {
    /// Fisher-times-uniform scores, per-layer quantile mask.
    Arr,
    /// Bernoulli mask (stochastic restoration).
    Sr,
    /// Pure-FIM quantile mask, no randomness (data-driven restoration).
    Dr,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestoreConfig {
    pub mode: RestoreMode,
    /// Per-layer reset quantile for Arr/Dr.
    pub q: f64,
    /// Per-element reset probability for Sr.
    pub p_reset: f64,
    /// Dump per-layer reset counts and FIM stats to restore_trace.csv.
    pub trace: bool,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        RestoreConfig {
            mode: RestoreMode::Arr,
            q: 0.01,
            p_reset: 0.01,
            trace: false,
        }
    }
}

/// Empirical diagonal Fisher information, one tensor per layer (shapes mirror
/// the parameter store).
#[derive(Clone, Debug, PartialEq)]
pub struct FimAccumulator {
    pub layers: BTreeMap<String, Tensor>,
    pub sample_count: usize,
}

/// Per-layer binary reset masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ResetMask {
    pub layers: BTreeMap<String, Vec<bool>>,
}

impl ResetMask {
    pub fn reset_count(&self, layer: &str) -> usize {
        self.layers
            .get(layer)
            .map(|m| m.iter().filter(|&&b| b).count())
            .unwrap_or(0)
    }

    pub fn total_resets(&self) -> usize {
        self.layers
            .values()
            .map(|m| m.iter().filter(|&&b| b).count())
            .sum()
    }
}

/// Elementwise square of pseudo-label loss gradients (one sample, N = 1).
pub fn fim_from_grads(grads: &GradMap) -> FimAccumulator {
    let layers = grads
        .iter()
        .map(|(name, g)| {
            let sq: Vec<f64> = g.data().iter().map(|&v| v * v).collect();
            (name.clone(), Tensor::from_vec(g.shape().to_vec(), sq))
        })
        .collect();
    FimAccumulator {
        layers,
        sample_count: 1,
    }
}

/// `W = F ⊙ R` with a fresh uniform draw per element. The sampler is injected
/// so tests can pin R; production callers pass `uniform_sampler(rng)`.
pub fn reset_scores_with(
    fim: &FimAccumulator,
    sample: &mut impl FnMut() -> f64,
) -> BTreeMap<String, Tensor> {
    fim.layers
        .iter()
        .map(|(name, f)| {
            let w: Vec<f64> = f.data().iter().map(|&v| v * sample()).collect();
            (name.clone(), Tensor::from_vec(f.shape().to_vec(), w))
        })
        .collect()
}

/// Standard scoring draw: R ~ Uniform(0, 1).
pub fn reset_scores(fim: &FimAccumulator, rng: &mut impl Rng) -> BTreeMap<String, Tensor> {
    let mut sample = || rng.gen::<f64>();
    reset_scores_with(fim, &mut sample)
}

/// Per-layer mask of the `ceil(q*n)` lowest scores. Ties at the quantile go
/// to the lowest flat index, so the reset count is exact for every layer.
pub fn build_mask(scores: &BTreeMap<String, Tensor>, q: f64) -> Result<ResetMask, RestoreError> {
    if !(0.0 < q && q < 1.0) {
        return Err(RestoreError::BadQuantile(q));
    }
    let mut layers = BTreeMap::new();
    for (name, w) in scores {
        let n = w.numel();
        let k = ((q * n as f64).ceil() as usize).max(1).min(n);
        let mut order: Vec<usize> = (0..n).collect();
        let data = w.data();
        order.sort_by(|&a, &b| data[a].partial_cmp(&data[b]).unwrap().then(a.cmp(&b)));
        let mut mask = vec![false; n];
        for &i in order.iter().take(k) {
            mask[i] = true;
        }
        layers.insert(name.clone(), mask);
    }
    Ok(ResetMask { layers })
}

/// Masked elements take the source value; the rest keep the student value.
pub fn apply_restore(
    student: &ParamStore,
    source: &ParamStore,
    mask: &ResetMask,
) -> Result<ParamStore, RestoreError> {
    if !student.schema_matches(source) {
        return Err(RestoreError::SchemaMismatch(
            "student and source stores differ".into(),
        ));
    }
    student.map(|name, t| {
        let m = mask
            .layers
            .get(name)
            .ok_or_else(|| RestoreError::SchemaMismatch(format!("mask missing layer {name:?}")))?;
        if m.len() != t.numel() {
            return Err(RestoreError::SchemaMismatch(format!(
                "mask for {name:?} has {} entries, layer has {}",
                m.len(),
                t.numel()
            )));
        }
        let src = source.get(name).unwrap().data();
        let out: Vec<f64> = t
            .data()
            .iter()
            .zip(src)
            .zip(m)
            .map(|((&st, &so), &reset)| if reset { so } else { st })
            .collect();
        Ok(Tensor::from_vec(t.shape().to_vec(), out))
    })
}

/// Fisher-guided randomized restoration: scores, per-layer quantile mask,
/// splice against the source store.
pub fn adaptive_randomized_restore(
    student: &ParamStore,
    source: &ParamStore,
    fim: &FimAccumulator,
    q: f64,
    rng: &mut impl Rng,
) -> Result<(ParamStore, ResetMask), RestoreError> {
    let scores = reset_scores(fim, rng);
    let mask = build_mask(&scores, q)?;
    Ok((apply_restore(student, source, &mask)?, mask))
}

/// Bernoulli(p) mask per element.
pub fn stochastic_restore(
    student: &ParamStore,
    source: &ParamStore,
    p_reset: f64,
    rng: &mut impl Rng,
) -> Result<(ParamStore, ResetMask), RestoreError> {
    if !(0.0..=1.0).contains(&p_reset) {
        return Err(RestoreError::BadProbability(p_reset));
    }
    let mut layers = BTreeMap::new();
    for (name, t) in student.layers() {
        let mask: Vec<bool> = (0..t.numel()).map(|_| rng.gen::<f64>() < p_reset).collect();
        layers.insert(name.clone(), mask);
    }
    let mask = ResetMask { layers };
    Ok((apply_restore(student, source, &mask)?, mask))
}

/// Pure data-driven restoration: quantile mask over the raw FIM.
pub fn data_driven_restore(
    student: &ParamStore,
    source: &ParamStore,
    fim: &FimAccumulator,
    q: f64,
) -> Result<(ParamStore, ResetMask), RestoreError> {
    let mask = build_mask(&fim.layers, q)?;
    Ok((apply_restore(student, source, &mask)?, mask))
}

/// (min, median, max) of the pooled FIM entries, for the restore trace.
pub fn fim_stats(fim: &FimAccumulator) -> (f64, f64, f64) {
    let mut all: Vec<f64> = fim
        .layers
        .values()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    if all.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (all[0], all[all.len() / 2], all[all.len() - 1])
}
