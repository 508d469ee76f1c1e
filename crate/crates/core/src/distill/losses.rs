//! Distillation losses: softened-logit KL for one or two teachers,
//! batch-similarity maps, merged maps, and the orthogonal patch-Gram
//! transfer term.
//!
//! Teacher-side quantities are always imported as constants into the
//! student's graph, so no gradient can reach a teacher.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Tensor};
use crate::nn::ops;

/// Hyperparameters of the distillation objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    /// Softening temperature.
    pub tau: f64,
    /// Blend between cross-entropy (1 - lambda) and distillation (lambda).
    pub lambda: f64,
    /// Blend between the two teachers.
    pub alpha: f64,
    /// Weight of the feature-transfer term.
    pub beta: f64,
    /// Number of partitions per similarity-map row.
    pub k: usize,
    /// `(teacher1 stage, teacher2 stage, student stage)` capture triples.
    pub layer_pairs: Vec<(usize, usize, usize)>,
    pub use_orth: bool,
    pub anneal: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            tau: 4.0,
            lambda: 0.7,
            alpha: 0.7,
            beta: 900.0,
            k: 4,
            layer_pairs: vec![(0, 0, 0), (1, 1, 1), (2, 2, 2)],
            use_orth: true,
            anneal: true,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 1.0) {
            return Err(Error::Config(format!("tau {} must exceed 1", self.tau)));
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return Err(Error::Config(format!("lambda {} must be in (0, 1)", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} must be in [0, 1]", self.alpha)));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta {} must be non-negative", self.beta)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if self.layer_pairs.is_empty() {
            return Err(Error::Config("layer_pairs must not be empty".into()));
        }
        Ok(())
    }
}

/// Detached copy of a tensor into another graph.
fn import_const(graph: &Graph, t: &Tensor) -> Tensor {
    graph.tensor(t.shape().to_vec(), t.to_vec())
}

fn logits_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, c] => Ok((*n, *c)),
        other => Err(Error::ShapeMismatch {
            expected: "[n, classes]".into(),
            actual: format!("{other:?}"),
        }),
    }
}

/// Temperature-softened class distribution `softmax(logits / tau)`.
/// The result is a constant (detached) tensor in the same graph.
pub fn softened_probs(logits: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let (n, c) = logits_dims(logits)?;
    let p = ops::softmax_rows(&logits.data(), n, c, tau);
    Ok(logits.graph().tensor(vec![n, c], p))
}

/// `tau^2 * mean_batch KL(p_teacher || p_student)` with the teacher
/// distribution treated as a constant.
pub fn kd_loss(teacher_logits: &Tensor, student_logits: &Tensor, tau: f64) -> Result<Tensor> {
    let (tn, tc) = logits_dims(teacher_logits)?;
    let (sn, sc) = logits_dims(student_logits)?;
    if (tn, tc) != (sn, sc) {
        return Err(Error::ShapeMismatch {
            expected: format!("[{tn}, {tc}]"),
            actual: format!("[{sn}, {sc}]"),
        });
    }
    let p_t = ops::softmax_rows(&teacher_logits.data(), tn, tc, tau);
    ops::kd_kl_mean(&p_t, student_logits, tau)
}

/// `tau^2 (alpha KL(p_T1 || p_S) + (1 - alpha) KL(p_T2 || p_S))`.
pub fn multi_teacher_kd_loss(
    teacher1_logits: &Tensor,
    teacher2_logits: &Tensor,
    student_logits: &Tensor,
    tau: f64,
    alpha: f64,
) -> Result<Tensor> {
    let k1 = kd_loss(teacher1_logits, student_logits, tau)?;
    let k2 = kd_loss(teacher2_logits, student_logits, tau)?;
    ops::add(&ops::scale(&k1, alpha)?, &ops::scale(&k2, 1.0 - alpha)?)
}

/// Batch-similarity map `G' = A A^T` of flattened per-sample activations.
#[derive(Clone)]
pub struct SimilarityMap {
    /// `[b x b]`
    pub values: Tensor,
}

impl SimilarityMap {
    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Flatten each sample of `activation [b, ...]` to a row and form the
/// `b x b` Gram matrix of rows.
pub fn similarity_map(activation: &Tensor) -> Result<SimilarityMap> {
    let b = *activation
        .shape()
        .first()
        .ok_or_else(|| Error::ShapeMismatch {
            expected: "batch-leading tensor".into(),
            actual: "rank 0".into(),
        })?;
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let values = ops::matmul_nt(activation, activation)?;
    Ok(SimilarityMap { values })
}

/// `alpha * g1 + (1 - alpha) * g2`.
pub fn merge_maps(g1: &SimilarityMap, g2: &SimilarityMap, alpha: f64) -> Result<SimilarityMap> {
    if g1.values.shape() != g2.values.shape() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", g1.values.shape()),
            actual: format!("{:?}", g2.values.shape()),
        });
    }
    let values = ops::add(
        &ops::scale(&g1.values, alpha)?,
        &ops::scale(&g2.values, 1.0 - alpha)?,
    )?;
    Ok(SimilarityMap { values })
}

/// Per-sample orthogonality knowledge extracted from a similarity map.
#[derive(Clone)]
pub struct PatchGram {
    /// `[b x k x k]` segment grams minus the identity.
    pub grams: Tensor,
    /// Partition size `d = b / k`.
    pub d: usize,
}

/// L2-normalize each row of the map, cut it into `k` contiguous segments of
/// length `d = b / k`, and form the `k x k` segment-inner-product matrix
/// minus the identity, per sample.
pub fn patch_grams(g: &SimilarityMap, k: usize) -> Result<PatchGram> {
    let b = g.batch();
    if k == 0 || b % k != 0 {
        return Err(Error::BatchNotDivisible { batch: b, k });
    }
    let normalized = ops::row_l2_normalize(&g.values)?;
    let grams = ops::patch_gram(&normalized, k)?;
    Ok(PatchGram { grams, d: b / k })
}

/// Mean over layer pairs of the squared Frobenius distance between teacher
/// and student gram stacks (summed over the batch slices). Teacher grams are
/// constants in the student's graph.
pub fn orth_loss(teacher_grams: &[PatchGram], student_grams: &[PatchGram]) -> Result<Tensor> {
    if teacher_grams.len() != student_grams.len() || teacher_grams.is_empty() {
        return Err(Error::Config(format!(
            "gram lists of length {} and {} (need equal, non-empty)",
            teacher_grams.len(),
            student_grams.len()
        )));
    }
    let graph = student_grams[0].grams.graph().clone();
    let mut acc: Option<Tensor> = None;
    for (i, (t, s)) in teacher_grams.iter().zip(student_grams.iter()).enumerate() {
        if t.grams.shape() != s.grams.shape() {
            return Err(Error::LayerPair {
                index: i,
                reason: format!(
                    "teacher grams {:?} vs student grams {:?}",
                    t.grams.shape(),
                    s.grams.shape()
                ),
            });
        }
        let t_const = import_const(&graph, &t.grams);
        let diff = ops::sub(&t_const, &s.grams)?;
        let sq = ops::sum_squares(&diff)?;
        acc = Some(match acc {
            Some(a) => ops::add(&a, &sq)?,
            None => sq,
        });
    }
    ops::scale(&acc.unwrap(), 1.0 / teacher_grams.len() as f64)
}

/// Direct map matching: mean squared difference between row-normalized
/// teacher and student similarity maps, averaged over layer pairs.
pub fn map_mse_loss(teacher_maps: &[SimilarityMap], student_maps: &[SimilarityMap]) -> Result<Tensor> {
    if teacher_maps.len() != student_maps.len() || teacher_maps.is_empty() {
        return Err(Error::Config(format!(
            "map lists of length {} and {} (need equal, non-empty)",
            teacher_maps.len(),
            student_maps.len()
        )));
    }
    let graph = student_maps[0].values.graph().clone();
    let mut acc: Option<Tensor> = None;
    for (i, (t, s)) in teacher_maps.iter().zip(student_maps.iter()).enumerate() {
        if t.values.shape() != s.values.shape() {
            return Err(Error::LayerPair {
                index: i,
                reason: format!("teacher map {:?} vs student map {:?}", t.values.shape(), s.values.shape()),
            });
        }
        let tn = ops::row_l2_normalize(&t.values)?;
        let t_const = import_const(&graph, &tn);
        let sn = ops::row_l2_normalize(&s.values)?;
        let diff = ops::sub(&t_const, &sn)?;
        let sq = ops::sum_squares(&diff)?;
        acc = Some(match acc {
            Some(a) => ops::add(&a, &ops::scale(&sq, 1.0 / diff.numel() as f64)?)?,
            None => ops::scale(&sq, 1.0 / diff.numel() as f64)?,
        });
    }
    ops::scale(&acc.unwrap(), 1.0 / teacher_maps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_logits(rng: &mut ChaCha8Rng, g: &Graph, n: usize, c: usize) -> Tensor {
        g.tensor(vec![n, c], (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn default_config_carries_reference_hyperparameters() {
        let cfg = DistillConfig::default();
        assert_eq!(cfg.tau, 4.0);
        assert_eq!(cfg.lambda, 0.7);
        assert_eq!(cfg.alpha, 0.7);
        assert_eq!(cfg.k, 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn softened_probs_rows_sum_to_one() {
        let g = Graph::inference();
        let l = g.tensor(vec![2, 3], vec![1.0, -1.0, 0.5, 0.0, 0.0, 0.0]);
        let p = softened_probs(&l, 4.0).unwrap();
        let d = p.to_vec();
        for i in 0..2 {
            let s: f64 = d[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let p = softened_probs(&g.tensor(vec![1, 2], vec![0.0, 0.0]), 7.0).unwrap();
        assert_eq!(p.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn multi_teacher_alpha_one_is_bitwise_single_teacher() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let g = Graph::inference();
            let t1 = rand_logits(&mut rng, &g, 4, 5);
            let t2 = rand_logits(&mut rng, &g, 4, 5);
            let s = rand_logits(&mut rng, &g, 4, 5);
            let single = kd_loss(&t1, &s, 4.0).unwrap().item();
            let multi = multi_teacher_kd_loss(&t1, &t2, &s, 4.0, 1.0).unwrap().item();
            assert_eq!(single.to_bits(), multi.to_bits());
            let multi0 = multi_teacher_kd_loss(&t1, &t2, &s, 4.0, 0.0).unwrap().item();
            let single2 = kd_loss(&t2, &s, 4.0).unwrap().item();
            assert_eq!(single2.to_bits(), multi0.to_bits());
        }
    }

    #[test]
    fn similarity_map_matches_hand_product_and_rejects_singletons() {
        let g = Graph::inference();
        let a = g.tensor(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]);
        let m = similarity_map(&a).unwrap();
        assert_eq!(m.values.to_vec(), vec![1.0, 0.0, 0.0, 4.0]);

        let one = g.tensor(vec![1, 4], vec![1.0; 4]);
        assert!(matches!(similarity_map(&one), Err(Error::BatchTooSmall(1))));
    }

    #[test]
    fn orthonormal_rows_give_identity_map() {
        let g = Graph::inference();
        let a = g.tensor(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let m = similarity_map(&a).unwrap();
        assert_eq!(m.values.to_vec(), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn duplicate_samples_duplicate_map_rows() {
        let g = Graph::inference();
        let a = g.tensor(vec![3, 2], vec![1.0, 2.0, 1.0, 2.0, -1.0, 0.5]);
        let m = similarity_map(&a).unwrap();
        let v = m.values.to_vec();
        assert_eq!(&v[0..3], &v[3..6]);
    }

    #[test]
    fn merge_maps_blends_linearly() {
        let g = Graph::inference();
        let i2 = g.tensor(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let two_i = g.tensor(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]);
        let g1 = SimilarityMap { values: i2 };
        let g2 = SimilarityMap { values: two_i };
        let merged = merge_maps(&g1, &g2, 0.5).unwrap();
        assert_eq!(merged.values.to_vec(), vec![1.5, 0.0, 0.0, 1.5]);
        let only1 = merge_maps(&g1, &g2, 1.0).unwrap();
        assert_eq!(only1.values.to_vec(), g1.values.to_vec());
    }

    #[test]
    fn merge_maps_rejects_shape_mismatch() {
        let g = Graph::inference();
        let a = SimilarityMap { values: g.tensor(vec![2, 2], vec![0.0; 4]) };
        let b = SimilarityMap { values: g.tensor(vec![3, 3], vec![0.0; 9]) };
        assert!(merge_maps(&a, &b, 0.5).is_err());
    }

    #[test]
    fn patch_grams_requires_divisible_batch() {
        let g = Graph::inference();
        let m = SimilarityMap { values: g.tensor(vec![3, 3], vec![0.5; 9]) };
        match patch_grams(&m, 2) {
            Err(Error::BatchNotDivisible { batch, k }) => assert_eq!((batch, k), (3, 2)),
            other => panic!("expected BatchNotDivisible, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn orth_loss_zero_iff_equal_and_hand_value() {
        let g = Graph::training();
        let make = |vals: Vec<f64>| PatchGram {
            grams: g.tensor(vec![1, 2, 2], vals),
            d: 2,
        };
        let t = make(vec![0.1, 0.2, 0.2, -0.4]);
        let s_equal = make(vec![0.1, 0.2, 0.2, -0.4]);
        let zero = orth_loss(&[t.clone()], &[s_equal]).unwrap();
        assert_eq!(zero.item(), 0.0);

        // difference [[1,0],[0,1]] -> squared Frobenius norm 2
        let t2 = make(vec![1.0, 0.0, 0.0, 1.0]);
        let s2 = make(vec![0.0, 0.0, 0.0, 0.0]);
        let l = orth_loss(&[t2.clone()], &[s2.clone()]).unwrap();
        assert_eq!(l.item(), 2.0);

        // duplicating the pair leaves the mean unchanged
        let l2 = orth_loss(&[t2.clone(), t2], &[s2.clone(), s2]).unwrap();
        assert_eq!(l2.item(), 2.0);
    }

    #[test]
    fn similarity_maps_are_symmetric_and_merged_maps_stay_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let g = Graph::inference();
            let a1 = rand_logits(&mut rng, &g, 5, 7);
            let a2 = rand_logits(&mut rng, &g, 5, 7);
            let m1 = similarity_map(&a1).unwrap();
            let m2 = similarity_map(&a2).unwrap();
            for m in [&m1, &m2] {
                let v = m.values.to_vec();
                for i in 0..5 {
                    for j in 0..5 {
                        assert_eq!(v[i * 5 + j], v[j * 5 + i]);
                    }
                }
                let eigs = crate::test_util::symmetric_eigenvalues(&v, 5);
                for e in eigs {
                    assert!(e >= -1e-6, "similarity map eigenvalue {e}");
                }
            }
            let merged = merge_maps(&m1, &m2, rng.gen_range(0.0..=1.0)).unwrap();
            let eigs = crate::test_util::symmetric_eigenvalues(&merged.values.to_vec(), 5);
            for e in eigs {
                assert!(e >= -1e-6, "eigenvalue {e}");
            }
        }
    }
}
