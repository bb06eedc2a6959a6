//! Object-level contrastive learning over ROI features.
//!
//! For each teacher proposal, the teacher's pooled feature (weak view) and
//! the student's pooled feature (strong view) form the positive pair; every
//! other student feature in the frame is a negative. Features are
//! L2-normalized before the dot products, so the similarity is cosine, and
//! the anchor side is the teacher: gradient flows only into the student.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId};
use crate::detector::{roi_pool, DetectorConfig, Proposal};

#[derive(Debug, Error)]
pub enum OclError {
    #[error("no proposals; the contrastive term must be short-circuited to zero")]
    EmptyProposals,
    #[error("temperature {0} must be positive")]
    BadTemperature(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Paired, L2-normalized ROI features, stacked `[l, D]` on each side.
///
/// Row i of both stacks comes from the same proposal box. The teacher stack
/// must be built from a constant feature map so no gradient can reach
/// teacher parameters.
pub struct FeaturePairSet {
    pub teacher: NodeId,
    pub student: NodeId,
    pub len: usize,
}

/// Pool and normalize both views over the same proposal boxes.
pub fn extract_pairs(
    g: &mut Graph,
    cfg: &DetectorConfig,
    teacher_featmap: NodeId,
    student_featmap: NodeId,
    proposals: &[Proposal],
) -> Result<FeaturePairSet, OclError> {
    if proposals.is_empty() {
        return Err(OclError::EmptyProposals);
    }
    let mut teacher_rows = Vec::with_capacity(proposals.len());
    let mut student_rows = Vec::with_capacity(proposals.len());
    for p in proposals {
        let t = roi_pool(g, cfg, teacher_featmap, &p.bbox)?;
        teacher_rows.push(g.l2_normalize(t)?);
        let s = roi_pool(g, cfg, student_featmap, &p.bbox)?;
        student_rows.push(g.l2_normalize(s)?);
    }
    Ok(FeaturePairSet {
        teacher: g.concat_rows(&teacher_rows)?,
        student: g.concat_rows(&student_rows)?,
        len: proposals.len(),
    })
}

/// InfoNCE over the pair set: anchors are teacher features, candidates are
/// the student features (the denominator runs over all l of them, positive
/// included). Mean over anchors.
pub fn contrastive_loss(
    g: &mut Graph,
    pairs: &FeaturePairSet,
    tau: f64,
) -> Result<NodeId, OclError> {
    if tau <= 0.0 {
        return Err(OclError::BadTemperature(tau));
    }
    let l = pairs.len;
    let sims = g.matmul_tb(pairs.teacher, pairs.student)?;
    let scaled = g.scale(sims, 1.0 / tau);
    let log_probs = g.log_softmax_last(scaled);
    let diag: Vec<usize> = (0..l).map(|i| i * l + i).collect();
    let positives = g.gather(log_probs, diag, vec![l])?;
    let neg = g.neg(positives);
    Ok(g.mean(neg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn proposals(n: usize) -> Vec<Proposal> {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        (0..n)
            .map(|_| Proposal {
                bbox: crate::detector::BBox::new(
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.2..0.8),
                    rng.gen_range(0.1..0.5),
                    rng.gen_range(0.1..0.5),
                ),
                objectness: 0.5,
            })
            .collect()
    }

    fn random_featmap(cfg: &DetectorConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.feat_channels * cfg.cells();
        Tensor::from_vec(
            vec![cfg.feat_channels, cfg.cells()],
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn identical_featmaps_give_identical_pairs() {
        let cfg = DetectorConfig::default();
        let fm = random_featmap(&cfg, 0);
        let mut g = Graph::new();
        let t = g.constant(fm.clone());
        let s = g.constant(fm);
        let pairs = extract_pairs(&mut g, &cfg, t, s, &proposals(5)).unwrap();
        assert_eq!(g.value(pairs.teacher).data(), g.value(pairs.student).data());
    }

    #[test]
    fn features_are_unit_norm() {
        let cfg = DetectorConfig::default();
        for n in [1usize, 5, 12] {
            let mut g = Graph::new();
            let t = g.constant(random_featmap(&cfg, 1));
            let s = g.constant(random_featmap(&cfg, 2));
            let pairs = extract_pairs(&mut g, &cfg, t, s, &proposals(n)).unwrap();
            assert_eq!(pairs.len, n);
            let d = cfg.feat_channels;
            for side in [pairs.teacher, pairs.student] {
                let data = g.value(side).data();
                assert_eq!(g.value(side).shape(), &[n, d]);
                for row in data.chunks(d) {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    assert!((norm - 1.0).abs() < 1e-9, "norm {norm}");
                }
            }
        }
    }

    #[test]
    fn empty_proposals_error() {
        let cfg = DetectorConfig::default();
        let mut g = Graph::new();
        let t = g.constant(random_featmap(&cfg, 1));
        let s = g.constant(random_featmap(&cfg, 2));
        assert!(matches!(
            extract_pairs(&mut g, &cfg, t, s, &[]),
            Err(OclError::EmptyProposals)
        ));
    }

    fn pair_set_from(g: &mut Graph, teacher: Tensor, student_param: Tensor) -> FeaturePairSet {
        let l = teacher.shape()[0];
        let t = g.constant(teacher);
        let s = g.param("student_feats", student_param).unwrap();
        FeaturePairSet {
            teacher: t,
            student: s,
            len: l,
        }
    }

    #[test]
    fn single_pair_loss_is_exactly_zero() {
        let mut g = Graph::new();
        let pairs = pair_set_from(
            &mut g,
            Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]),
            Tensor::from_vec(vec![1, 2], vec![0.6, 0.8]),
        );
        let loss = contrastive_loss(&mut g, &pairs, 0.07).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn equidistant_anchor_gives_log_two() {
        // Teacher anchors are orthogonal; both student rows equal (1,0), so
        // every anchor sees two equal similarities: per-anchor term log 2.
        let mut g = Graph::new();
        let pairs = pair_set_from(
            &mut g,
            Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]),
        );
        let loss = contrastive_loss(&mut g, &pairs, 0.07).unwrap();
        assert!((g.value(loss).item() - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let l = 5;
            let d = 7;
            let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            };
            let tf: Vec<Vec<f64>> = (0..l).map(|_| unit(&mut rng)).collect();
            let sf: Vec<Vec<f64>> = (0..l).map(|_| unit(&mut rng)).collect();
            let tau = 0.07;

            let mut g = Graph::new();
            let pairs = pair_set_from(
                &mut g,
                Tensor::from_vec(vec![l, d], tf.concat()),
                Tensor::from_vec(vec![l, d], sf.concat()),
            );
            let loss = contrastive_loss(&mut g, &pairs, tau).unwrap();

            // Brute force over the definition.
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let mut total = 0.0;
            for i in 0..l {
                let pos = (dot(&tf[i], &sf[i]) / tau).exp();
                let denom: f64 = (0..l).map(|j| (dot(&tf[i], &sf[j]) / tau).exp()).sum();
                total += -(pos / denom).ln();
            }
            total /= l as f64;
            assert!((g.value(loss).item() - total).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let l = rng.gen_range(1..8);
            let d = 6;
            let mk = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                (0..l * d).map(|_| rng.gen_range(-2.0..2.0)).collect()
            };
            let mut g = Graph::new();
            let pairs = pair_set_from(
                &mut g,
                Tensor::from_vec(vec![l, d], mk(&mut rng)),
                Tensor::from_vec(vec![l, d], mk(&mut rng)),
            );
            let loss = contrastive_loss(&mut g, &pairs, 0.07).unwrap();
            assert!(g.value(loss).item() >= 0.0);
        }
    }

    #[test]
    fn pair_order_permutation_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let l = 6;
        let d = 5;
        let tf: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sf: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |perm: &[usize]| -> f64 {
            let tp: Vec<f64> = perm
                .iter()
                .flat_map(|&i| tf[i * d..(i + 1) * d].to_vec())
                .collect();
            let sp: Vec<f64> = perm
                .iter()
                .flat_map(|&i| sf[i * d..(i + 1) * d].to_vec())
                .collect();
            let mut g = Graph::new();
            let pairs = pair_set_from(
                &mut g,
                Tensor::from_vec(vec![l, d], tp),
                Tensor::from_vec(vec![l, d], sp),
            );
            let loss = contrastive_loss(&mut g, &pairs, 0.07).unwrap();
            g.value(loss).item()
        };
        let id: Vec<usize> = (0..l).collect();
        let shuffled = vec![3usize, 0, 5, 1, 4, 2];
        assert!((eval(&id) - eval(&shuffled)).abs() < 1e-10);
    }

    #[test]
    fn huge_temperature_approaches_log_l() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let l = 9;
        let d = 4;
        let mk: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sk: Vec<f64> = (0..l * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let pairs = pair_set_from(
            &mut g,
            Tensor::from_vec(vec![l, d], mk),
            Tensor::from_vec(vec![l, d], sk),
        );
        let loss = contrastive_loss(&mut g, &pairs, 1e6).unwrap();
        assert!((g.value(loss).item() - (l as f64).ln()).abs() < 1e-3);
    }

    #[test]
    fn bad_temperature_rejected() {
        let mut g = Graph::new();
        let pairs = pair_set_from(
            &mut g,
            Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]),
            Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]),
        );
        assert!(contrastive_loss(&mut g, &pairs, 0.0).is_err());
        assert!(contrastive_loss(&mut g, &pairs, -1.0).is_err());
    }

    #[test]
    fn gradient_reaches_student_only() {
        let cfg = DetectorConfig::default();
        let fm_t = random_featmap(&cfg, 31);
        let fm_s = random_featmap(&cfg, 32);
        let mut g = Graph::new();
        let t = g.constant(fm_t);
        let s = g.param("student_featmap", fm_s).unwrap();
        let pairs = extract_pairs(&mut g, &cfg, t, s, &proposals(5)).unwrap();
        let loss = contrastive_loss(&mut g, &pairs, 0.07).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.len(), 1);
        let sg = &grads["student_featmap"];
        assert!(sg.data().iter().any(|&v| v != 0.0));
    }
}
