//! Wasserstein losses, masked gradient penalty and masked reconstruction.
//!
//! Scores are raw critic outputs. The generator minimises
//! `w_adv * (-E[D_whole] - E[D_slice]) + w_rec * L1_hole`, each critic
//! minimises `E[D(fake)] - E[D(real)] + w_gp * GP`.

use panocube_autograd::{grad, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub adversarial: f64,
    pub gradient_penalty: f64,
    pub reconstruction: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            adversarial: 0.001,
            gradient_penalty: 10.0,
            reconstruction: 1.2,
        }
    }
}

impl ObjectiveWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("adversarial", self.adversarial),
            ("gradient_penalty", self.gradient_penalty),
            ("reconstruction", self.reconstruction),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} = {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum L1Reduction {
    /// Mean over every element, holes and valid pixels alike.
    #[default]
    Mean,
    Sum,
}

/// `-E[D_whole(fake)] - E[D_slice(fake)]`.
pub fn generator_adversarial_loss<T: Scalar>(whole_fake: &Var<T>, slice_fake: &Var<T>) -> Var<T> {
    whole_fake.mean().add(&slice_fake.mean()).neg()
}

/// `E[D(fake)] - E[D(real)]`.
pub fn critic_loss<T: Scalar>(real: &Var<T>, fake: &Var<T>) -> Var<T> {
    fake.mean().sub(&real.mean())
}

/// `sum((1 - m) * |generated - target|)`, averaged over all elements for
/// [`L1Reduction::Mean`]. `hole` holds `1 - m` broadcast to the image shape.
pub fn masked_l1<T: Scalar>(
    generated: &Var<T>,
    target: &Tensor<T>,
    hole: &Tensor<T>,
    reduction: L1Reduction,
) -> Result<Var<T>> {
    if generated.shape() != target.shape() || target.shape() != hole.shape() {
        return Err(Error::Shape(format!(
            "masked L1 needs equal shapes, got {:?}, {:?}, {:?}",
            generated.shape(),
            target.shape(),
            hole.shape()
        )));
    }
    // |d| = d * sign(d); the sign is folded into the constant weight.
    let diff = generated.value().zip_map(target, |g, t| g - t);
    let weight = diff.zip_map(hole, |d, h| {
        if d > T::zero() {
            h
        } else if d < T::zero() {
            -h
        } else {
            T::zero()
        }
    });
    let sum = generated.sub(&Var::constant(target.clone())).mul_const(&weight).sum();
    Ok(match reduction {
        L1Reduction::Sum => sum,
        L1Reduction::Mean => sum.scale(T::one() / T::from_usize(target.numel()).expect("count")),
    })
}

/// `real + eps * (fake - real)` with one coefficient per block of
/// `rows / eps.len()` leading rows.
pub fn interpolate<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>, eps: &[T]) -> Result<Tensor<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::Shape(format!("real {:?} and fake {:?} differ", real.shape(), fake.shape())));
    }
    let rows = real.shape()[0];
    if eps.is_empty() || !rows.is_multiple_of(eps.len()) {
        return Err(Error::Shape(format!("{} coefficients for {rows} rows", eps.len())));
    }
    let block = real.numel() / eps.len();
    let data = real
        .data()
        .iter()
        .zip(fake.data().iter())
        .enumerate()
        .map(|(i, (&r, &f))| r + eps[i / block] * (f - r))
        .collect();
    Ok(Tensor::from_vec(data, real.shape()))
}

/// `mean_g (||(1 - m) * grad_x D(x)||_g - 1)^2` at `x = interpolated`.
///
/// Norms are taken over groups of `rows_per_norm` leading rows. `critic`
/// maps the input to scores; the gradient of their sum is used, which is the
/// per-sample gradient when samples do not interact. The result stays
/// differentiable with respect to the critic parameters.
pub fn masked_gradient_penalty<T: Scalar>(
    critic: impl FnOnce(&Var<T>) -> Result<Var<T>>,
    interpolated: &Tensor<T>,
    hole: &Tensor<T>,
    rows_per_norm: usize,
) -> Result<Var<T>> {
    if interpolated.shape() != hole.shape() {
        return Err(Error::Shape(format!(
            "penalty input {:?} and hole weights {:?} differ",
            interpolated.shape(),
            hole.shape()
        )));
    }
    let rows = interpolated.shape()[0];
    if rows_per_norm == 0 || !rows.is_multiple_of(rows_per_norm) {
        return Err(Error::Shape(format!("{rows} rows cannot form groups of {rows_per_norm}")));
    }
    let groups = rows / rows_per_norm;
    let x = Var::leaf(interpolated.clone());
    let scores = critic(&x)?;
    let g = grad(&scores.sum(), std::slice::from_ref(&x), true)
        .pop()
        .flatten()
        .unwrap_or_else(|| Var::constant(Tensor::zeros(interpolated.shape())));
    if !g.value().all_finite() {
        return Err(Error::Numerical {
            term: "gradient_penalty".into(),
            detail: "critic gradient is not finite".into(),
        });
    }
    let masked = g.mul_const(hole);
    let per_group = masked
        .mul(&masked)
        .reshape(&[groups, interpolated.numel() / groups])
        .sum_keep_axis(0);
    let dev = per_group.sqrt().add_scalar(-T::one());
    Ok(dev.mul(&dev).mean())
}

/// Scalar loss components for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub g_adv: f64,
    pub g_l1: f64,
    pub d_whole: f64,
    pub d_slice: f64,
    pub gp_whole: f64,
    pub gp_slice: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TotalLosses {
    pub generator: f64,
    pub critic_whole: f64,
    pub critic_slice: f64,
}

/// Weighted totals; a non-finite component is reported by name.
pub fn total_objective(c: &LossComponents, w: &ObjectiveWeights) -> Result<TotalLosses> {
    for (term, v) in [
        ("g_adv", c.g_adv),
        ("g_l1", c.g_l1),
        ("d_whole", c.d_whole),
        ("d_slice", c.d_slice),
        ("gp_whole", c.gp_whole),
        ("gp_slice", c.gp_slice),
    ] {
        if !v.is_finite() {
            return Err(Error::Numerical {
                term: term.into(),
                detail: format!("value {v}"),
            });
        }
    }
    Ok(TotalLosses {
        generator: w.adversarial * c.g_adv + w.reconstruction * c.g_l1,
        critic_whole: c.d_whole + w.gradient_penalty * c.gp_whole,
        critic_slice: c.d_slice + w.gradient_penalty * c.gp_slice,
    })
}

/// Differentiable counterpart of [`TotalLosses::generator`].
pub fn generator_objective<T: Scalar>(adv: &Var<T>, l1: &Var<T>, w: &ObjectiveWeights) -> Var<T> {
    adv.scale(T::from_f64_lossy(w.adversarial))
        .add(&l1.scale(T::from_f64_lossy(w.reconstruction)))
}

/// Differentiable counterpart of a critic total.
pub fn critic_objective<T: Scalar>(wasserstein: &Var<T>, penalty: &Var<T>, w: &ObjectiveWeights) -> Var<T> {
    wasserstein.add(&penalty.scale(T::from_f64_lossy(w.gradient_penalty)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
    }

    /// Linear critic `D(x) = <a, x>` per row.
    fn linear_critic(a: &Tensor<f64>) -> impl Fn(&Var<f64>) -> Result<Var<f64>> + '_ {
        move |x: &Var<f64>| {
            let rows = x.shape()[0];
            let flat = x.reshape(&[rows, a.numel()]);
            Ok(flat.matmul(&Var::constant(a.reshape(&[a.numel(), 1]))))
        }
    }

    #[test]
    fn linear_critic_penalty_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&mut rng, &[1, 8, 8]);
        let x = random(&mut rng, &[3, 1, 8, 8]);
        let hole = Tensor::from_vec((0..192).map(|i| ((i * 7) % 5 != 0) as u8 as f64).collect(), &[3, 1, 8, 8]);
        let gp = masked_gradient_penalty(linear_critic(&a), &x, &hole, 1).unwrap();
        let mut expected = 0.0;
        for r in 0..3 {
            let sq: f64 = (0..64).map(|i| (a.data()[i] * hole.data()[r * 64 + i]).powi(2)).sum();
            expected += (sq.sqrt() - 1.0).powi(2) / 3.0;
        }
        assert!((gp.value().item() - expected).abs() < 1e-9, "{} vs {expected}", gp.value().item());
    }

    #[test]
    fn all_valid_mask_gives_unit_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random(&mut rng, &[1, 8, 8]);
        let x = random(&mut rng, &[2, 1, 8, 8]);
        let gp = masked_gradient_penalty(linear_critic(&a), &x, &Tensor::zeros(&[2, 1, 8, 8]), 1).unwrap();
        assert_eq!(gp.value().item(), 1.0);
    }

    #[test]
    fn grouped_norm_spans_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random(&mut rng, &[1, 4, 4]);
        let x = random(&mut rng, &[4, 1, 4, 4]);
        let hole = Tensor::full(&[4, 1, 4, 4], 1.0);
        let gp = masked_gradient_penalty(linear_critic(&a), &x, &hole, 2).unwrap();
        let norm = (2.0 * a.data().iter().map(|v| v * v).sum::<f64>()).sqrt();
        assert!((gp.value().item() - (norm - 1.0).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn interpolates_lie_on_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let real = random(&mut rng, &[4, 2, 3, 3]);
        let fake = random(&mut rng, &[4, 2, 3, 3]);
        let eps = [0.0, 0.25, 1.0, 0.6];
        let x = interpolate(&real, &fake, &eps).unwrap();
        for i in 0..x.numel() {
            let e = eps[i / 18];
            let expected = (1.0 - e) * real.data()[i] + e * fake.data()[i];
            assert!((x.data()[i] - expected).abs() < 1e-15);
        }
        assert!(interpolate(&real, &fake, &[0.5; 3]).is_err());
    }

    #[test]
    fn penalty_parameter_gradient_matches_finite_differences() {
        // Critic D(x) = sum(tanh(w * x)) with scalar w, so the penalty depends on w.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = random(&mut rng, &[2, 1, 3, 3]);
        let hole = Tensor::from_vec((0..18).map(|i| (i % 4 != 1) as u8 as f64).collect(), &[2, 1, 3, 3]);
        let penalty = |w: f64| -> (f64, Option<f64>) {
            let wv = Var::leaf(Tensor::scalar(w));
            let critic = |v: &Var<f64>| Ok(v.mul(&wv.expand(v.shape())).tanh().reshape(&[2, 9]).sum_keep_axis(0));
            let gp = masked_gradient_penalty(critic, &x, &hole, 1).unwrap();
            let g = grad(&gp, std::slice::from_ref(&wv), false).pop().flatten().map(|g| g.value().item());
            (gp.value().item(), g)
        };
        let w0 = 0.7;
        let (_, analytic) = penalty(w0);
        let h = 1e-6;
        let numeric = (penalty(w0 + h).0 - penalty(w0 - h).0) / (2.0 * h);
        let analytic = analytic.unwrap();
        assert!((analytic - numeric).abs() < 1e-6 * numeric.abs().max(1.0), "{analytic} vs {numeric}");
    }

    #[test]
    fn masked_l1_ignores_valid_pixels() {
        let gen = Tensor::<f64>::from_vec(vec![0.2, 0.9, 0.4, 0.1], &[1, 1, 2, 2]);
        let target = Tensor::from_vec(vec![0.5, 0.5, 0.5, 0.5], &[1, 1, 2, 2]);
        let hole = Tensor::from_vec(vec![1.0, 1.0, 0.0, 0.0], &[1, 1, 2, 2]);
        let g = Var::leaf(gen);
        let sum = masked_l1(&g, &target, &hole, L1Reduction::Sum).unwrap();
        assert!((sum.value().item() - 0.7).abs() < 1e-12);
        let mean = masked_l1(&g, &target, &hole, L1Reduction::Mean).unwrap();
        assert!((mean.value().item() - 0.175).abs() < 1e-12);
        let dg = grad(&sum, &[g], false).pop().flatten().unwrap();
        assert_eq!(dg.value().data(), &[-1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn adversarial_signs() {
        let real = Var::constant(Tensor::from_vec(vec![1.0, 3.0], &[2, 1]));
        let fake = Var::constant(Tensor::from_vec(vec![-1.0, 0.0], &[2, 1]));
        assert_eq!(critic_loss(&real, &fake).value().item(), -2.5);
        assert_eq!(generator_adversarial_loss(&real, &fake).value().item(), -1.5);
    }

    #[test]
    fn non_finite_terms_are_named() {
        let c = LossComponents {
            gp_slice: f64::NAN,
            ..Default::default()
        };
        match total_objective(&c, &ObjectiveWeights::default()) {
            Err(Error::Numerical { term, .. }) => assert_eq!(term, "gp_slice"),
            other => panic!("unexpected {other:?}"),
        }
        let c = LossComponents {
            g_adv: -2.0,
            g_l1: 0.5,
            d_whole: 1.0,
            d_slice: -1.0,
            gp_whole: 0.1,
            gp_slice: 0.2,
        };
        let t = total_objective(&c, &ObjectiveWeights::default()).unwrap();
        assert!((t.generator - (-0.002 + 0.6)).abs() < 1e-12);
        assert!((t.critic_whole - 2.0).abs() < 1e-12);
        assert!((t.critic_slice - 1.0).abs() < 1e-12);
    }
}
