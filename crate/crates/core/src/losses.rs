//! Training objectives and their staged combinations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ops;
use crate::tensor::{Tensor, Var};

/// Weights of the pretraining (`lambda*`) and fine-tuning (`gamma*`)
/// objectives plus the contrastive temperature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub tau: f64,
    /// Also anchor the local loss on the second view and average both.
    pub symmetric_local: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.9,
            gamma1: 0.9,
            gamma2: 0.05,
            gamma3: 0.05,
            tau: 0.5,
            symmetric_local: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda1, self.lambda2, self.gamma1, self.gamma2, self.gamma3];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Common frame count of student and teacher sequences (trailing frames of
/// the longer one are dropped).
pub fn align_frames(student_frames: usize, teacher_frames: usize) -> usize {
    student_frames.min(teacher_frames)
}

/// One-hot `[B, classes]` targets; labels must be below `classes`.
pub fn one_hot<S: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<S>> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::contract(format!("label {y} outside 0..{classes}")));
        }
        t.data_mut()[i * classes + y] = S::one();
    }
    Ok(t)
}

/// Mean cross-entropy of probabilities `p: [B,C]` against one-hot `y`.
pub fn cross_entropy<'t, S: Scalar>(p: Var<'t, S>, y: &Tensor<S>) -> Result<Var<'t, S>> {
    ops::cross_entropy(p, y)
}

/// Mean squared error between equally shaped student and teacher frames.
pub fn wvc_loss<'t, S: Scalar>(student: Var<'t, S>, teacher: Var<'t, S>) -> Result<Var<'t, S>> {
    if student.shape() != teacher.shape() {
        return Err(Error::contract(format!(
            "wvc_loss: student {:?} and teacher {:?} differ after alignment",
            student.shape(),
            teacher.shape()
        )));
    }
    ops::mse(student, teacher)
}

/// [`wvc_loss`] on the common frame prefix of `[B,Fs,D]` and `[B,Ft,D]`.
pub fn aligned_wvc_loss<'t, S: Scalar>(student: Var<'t, S>, teacher: Var<'t, S>) -> Result<Var<'t, S>> {
    let (fs, ft) = (student.shape()[1], teacher.shape()[1]);
    let f = align_frames(fs, ft);
    let s = if f < fs { ops::narrow_time(student, f)? } else { student };
    let t = if f < ft { ops::narrow_time(teacher, f)? } else { teacher };
    wvc_loss(s, t)
}

/// Batch mean of the squared distance between time-averaged projections.
pub fn global_loss<'t, S: Scalar>(d1: Var<'t, S>, d2: Var<'t, S>) -> Result<Var<'t, S>> {
    let diff = ops::sub(ops::mean_time(d1)?, ops::mean_time(d2)?)?;
    ops::batch_mean_sq_norm(diff)
}

/// Frame-level InfoNCE with branch-2 frames as candidates. With `symmetric`
/// the loss anchored on branch 2 is averaged in.
pub fn local_loss<'t, S: Scalar>(
    d1: Var<'t, S>,
    d2: Var<'t, S>,
    tau: f64,
    symmetric: bool,
) -> Result<Var<'t, S>> {
    let forward = ops::local_contrastive(d1, d2, tau)?;
    if !symmetric {
        return Ok(forward);
    }
    let backward = ops::local_contrastive(d2, d1, tau)?;
    ops::weighted_sum(&[(forward, 0.5), (backward, 0.5)])
}

/// `global_loss + local_loss`.
pub fn lgcsiam_loss<'t, S: Scalar>(
    d1: Var<'t, S>,
    d2: Var<'t, S>,
    tau: f64,
    symmetric: bool,
) -> Result<Var<'t, S>> {
    ops::add(global_loss(d1, d2)?, local_loss(d1, d2, tau, symmetric)?)
}

/// `λ1·lgcsiam + λ2·wvc`.
pub fn pretrain_loss<'t, S: Scalar>(lgcsiam: Var<'t, S>, wvc: Var<'t, S>, w: &LossWeights) -> Result<Var<'t, S>> {
    ops::weighted_sum(&[(lgcsiam, w.lambda1), (wvc, w.lambda2)])
}

/// `γ1·ce + γ2·lgcsiam + γ3·wvc`.
pub fn finetune_loss<'t, S: Scalar>(
    ce: Var<'t, S>,
    lgcsiam: Var<'t, S>,
    wvc: Var<'t, S>,
    w: &LossWeights,
) -> Result<Var<'t, S>> {
    ops::weighted_sum(&[(ce, w.gamma1), (lgcsiam, w.gamma2), (wvc, w.gamma3)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Exhaustive enumeration of every anchor/candidate pair.
    fn local_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let d = a.shape()[2];
        let rows = a.numel() / d;
        let row = |t: &Tensor<f64>, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
        let cos = |x: &[f64], y: &[f64]| {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-8;
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-8;
            dot / (nx * ny)
        };
        let mut total = 0.0;
        for i in 0..rows {
            let ai = row(a, i);
            let mut den = 0.0;
            for j in 0..rows {
                den += (cos(&ai, &row(b, j)) / 0.5).exp();
            }
            let num = (cos(&ai, &row(b, i)) / 0.5).exp();
            total += -(num / den).ln();
        }
        total / rows as f64
    }

    #[test]
    fn cross_entropy_reference_values() {
        let tape = Tape::<f64>::new();
        let y = one_hot::<f64>(&[3, 0], 12).unwrap();
        let uniform = tape.constant(Tensor::full(&[2, 12], 1.0 / 12.0));
        assert!((cross_entropy(uniform, &y).unwrap().item() - 12f64.ln()).abs() < 1e-12);
        let exact = tape.constant(y.clone());
        assert_eq!(cross_entropy(exact, &y).unwrap().item(), 0.0);
        let p = [0.5, 0.2, 0.3, 0.1, 0.1, 0.8];
        let y = one_hot::<f64>(&[2, 1], 3).unwrap();
        let ce = cross_entropy(tape.constant(Tensor::new(&[2, 3], p.to_vec()).unwrap()), &y).unwrap();
        assert!((ce.item() - (-(0.3f64.ln() + 0.1f64.ln()) / 2.0)).abs() < 1e-12);
        assert!(one_hot::<f64>(&[12], 12).is_err());
    }

    #[test]
    fn wvc_reference_values() {
        let tape = Tape::<f64>::new();
        let a = random(&[2, 3, 768], 1);
        let same = wvc_loss(tape.constant(a.clone()), tape.constant(a.clone())).unwrap();
        assert_eq!(same.item(), 0.0);
        let shifted = a.map(|v| v + 1.0);
        let one = wvc_loss(tape.constant(a.clone()), tape.constant(shifted)).unwrap();
        assert!((one.item() - 1.0).abs() < 1e-12);
        let b = random(&[2, 3, 768], 2);
        let want = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.numel() as f64;
        let got = wvc_loss(tape.constant(a.clone()), tape.constant(b.clone())).unwrap().item();
        assert!((got - want).abs() < 1e-12);
        let swapped = wvc_loss(tape.constant(b), tape.constant(a.clone())).unwrap().item();
        assert_eq!(got, swapped);
        let short = random(&[2, 2, 768], 3);
        assert!(wvc_loss(tape.constant(a), tape.constant(short)).is_err());
    }

    #[test]
    fn aligned_wvc_uses_common_prefix() {
        assert_eq!(align_frames(50, 49), 49);
        assert_eq!(align_frames(50, 50), 50);
        assert_eq!(align_frames(50, 120), 50);
        let tape = Tape::<f64>::new();
        let s = random(&[1, 5, 4], 4);
        let mut t = Tensor::zeros(&[1, 3, 4]);
        t.data_mut().copy_from_slice(&s.data()[..12]);
        let loss = aligned_wvc_loss(tape.constant(s), tape.constant(t)).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn global_reference_values() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[1, 50, 128]));
        let b = tape.constant(Tensor::ones(&[1, 50, 128]));
        assert!((global_loss(a, b).unwrap().item() - 128.0).abs() < 1e-9);
        let x = random(&[2, 6, 128], 5);
        let same = global_loss(tape.constant(x.clone()), tape.constant(x)).unwrap();
        assert_eq!(same.item(), 0.0);
    }

    #[test]
    fn local_identical_vectors_give_log_count() {
        let tape = Tape::<f64>::new();
        for (b, f) in [(1, 2), (2, 3), (2, 50)] {
            let v = tape.constant(Tensor::full(&[b, f, 128], 0.3));
            let got = local_loss(v, v, 0.5, false).unwrap().item();
            assert!((got - ((b * f) as f64).ln()).abs() < 1e-6, "{b}x{f}: {got}");
        }
    }

    #[test]
    fn local_matches_double_loop_oracle() {
        let tape = Tape::<f64>::new();
        for (shape, seed) in [([1, 3, 128], 6), ([2, 3, 128], 7), ([3, 7, 16], 8)] {
            let (a, b) = (random(&shape, seed), random(&shape, seed + 100));
            let got = local_loss(tape.constant(a.clone()), tape.constant(b.clone()), 0.5, false).unwrap();
            assert!((got.item() - local_oracle(&a, &b)).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_local_averages_both_anchorings() {
        let tape = Tape::<f64>::new();
        let (a, b) = (random(&[2, 3, 8], 9), random(&[2, 3, 8], 10));
        let got = local_loss(tape.constant(a.clone()), tape.constant(b.clone()), 0.5, true).unwrap().item();
        let want = 0.5 * (local_oracle(&a, &b) + local_oracle(&b, &a));
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn lgcsiam_is_component_sum() {
        let tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::full(&[2, 3, 128], -0.7));
        assert!((lgcsiam_loss(v, v, 0.5, false).unwrap().item() - 6f64.ln()).abs() < 1e-6);
        let (a, b) = (tape.constant(random(&[2, 3, 128], 11)), tape.constant(random(&[2, 3, 128], 12)));
        let sum = global_loss(a, b).unwrap().item() + local_loss(a, b, 0.5, false).unwrap().item();
        assert_eq!(lgcsiam_loss(a, b, 0.5, false).unwrap().item(), sum);
    }

    #[test]
    fn staged_combinations() {
        let tape = Tape::<f64>::new();
        let s = |v: f64| tape.constant(Tensor::scalar(v));
        let w = LossWeights::default();
        assert!((pretrain_loss(s(1.0), s(2.0), &w).unwrap().item() - 1.9).abs() < 1e-12);
        assert_eq!(pretrain_loss(s(0.0), s(0.0), &w).unwrap().item(), 0.0);
        assert!((finetune_loss(s(1.0), s(1.0), s(1.0), &w).unwrap().item() - 1.0).abs() < 1e-12);
        let ln12 = 12f64.ln();
        assert!((finetune_loss(s(ln12), s(0.0), s(0.0), &w).unwrap().item() - 2.2364).abs() < 1e-4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let (a, b, c) = (rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0));
            assert!((pretrain_loss(s(a), s(b), &w).unwrap().item() - (0.1 * a + 0.9 * b)).abs() < 1e-12);
            let want = 0.9 * a + 0.05 * b + 0.05 * c;
            assert!((finetune_loss(s(a), s(b), s(c), &w).unwrap().item() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { tau: 0.0, ..LossWeights::default() }.validate().is_err());
        assert!(LossWeights { gamma2: -0.1, ..LossWeights::default() }.validate().is_err());
    }

    fn orthogonal(d: usize, seed: u64) -> Vec<f64> {
        // Gram-Schmidt on a random matrix.
        let m = random(&[d, d], seed).into_data();
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..d {
            let mut v = m[i * d..(i + 1) * d].to_vec();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            q.push(v);
        }
        q.concat()
    }

    fn rotate(x: &Tensor<f64>, r: &[f64]) -> Tensor<f64> {
        let d = x.shape()[2];
        let data = x
            .data()
            .chunks(d)
            .flat_map(|row| (0..d).map(move |j| (0..d).map(|i| row[i] * r[i * d + j]).sum::<f64>()))
            .collect();
        Tensor::new(x.shape(), data).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn non_negative_and_invariant(seed in 0u64..10_000, b in 1usize..4, f in 1usize..6) {
            let tape = Tape::<f64>::new();
            let (a, c) = (random(&[b, f, 16], seed), random(&[b, f, 16], seed + 1));
            let (va, vc) = (tape.constant(a.clone()), tape.constant(c.clone()));
            let local = local_loss(va, vc, 0.5, false).unwrap().item();
            prop_assert!(local >= 0.0);
            let global = global_loss(va, vc).unwrap().item();
            prop_assert!(global >= 0.0);
            prop_assert!(wvc_loss(va, vc).unwrap().item() >= 0.0);

            let r = orthogonal(16, seed + 2);
            let rotated = local_loss(tape.constant(rotate(&a, &r)), tape.constant(rotate(&c, &r)), 0.5, false).unwrap();
            prop_assert!((rotated.item() - local).abs() < 1e-5);

            // Reverse the frame order of one input only.
            let mut perm = c.clone();
            for bi in 0..b {
                for t in 0..f {
                    let (src, dst) = ((bi * f + t) * 16, (bi * f + f - 1 - t) * 16);
                    perm.data_mut()[dst..dst + 16].copy_from_slice(&c.data()[src..src + 16]);
                }
            }
            let permuted = global_loss(va, tape.constant(perm)).unwrap().item();
            prop_assert!((permuted - global).abs() < 1e-9);
        }
    }
}
