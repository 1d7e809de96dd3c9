//! GAN and WGAN-GP objectives over precomputed critic outputs.
//!
//! The Wasserstein terms follow the standard WGAN-GP formulation: the critic
//! maximizes `E[D(x)] - E[D(G(z))]`, i.e. it minimizes
//! `E[D(G(z))] - E[D(x)] + lambda * E[(||grad D(x_hat)||_2 - 1)^2]`.
//! A version of the objective written as a sum of the two expectations, or
//! with one expectation nested in the other, describes the same training
//! procedure; the difference form is what is implemented here.

use thiserror::Error;

/// Default penalty weight.
pub const DEFAULT_LAMBDA: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainMathError {
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("{what}[{index}] = {value} is outside {domain}")]
    Domain {
        what: &'static str,
        index: usize,
        value: f64,
        domain: &'static str,
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

fn check<'a>(
    what: &'static str,
    xs: &'a [f64],
    domain: &'static str,
    ok: impl Fn(f64) -> bool,
) -> Result<&'a [f64], TrainMathError> {
    if xs.is_empty() {
        return Err(TrainMathError::Empty(what));
    }
    match xs.iter().position(|&x| !ok(x)) {
        Some(index) => Err(TrainMathError::Domain {
            what,
            index,
            value: xs[index],
            domain,
        }),
        None => Ok(xs),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Critic outputs on a real batch and a generated batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBatch {
    real_scores: Vec<f64>,
    fake_scores: Vec<f64>,
}

impl ScoreBatch {
    pub fn new(real_scores: Vec<f64>, fake_scores: Vec<f64>) -> Result<Self, TrainMathError> {
        check("real_scores", &real_scores, "finite values", f64::is_finite)?;
        check("fake_scores", &fake_scores, "finite values", f64::is_finite)?;
        Ok(Self {
            real_scores,
            fake_scores,
        })
    }

    pub fn real_scores(&self) -> &[f64] {
        &self.real_scores
    }

    pub fn fake_scores(&self) -> &[f64] {
        &self.fake_scores
    }
}

/// Critic gradient norms at interpolated samples, with the penalty weight.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyBatch {
    grad_norms: Vec<f64>,
    lambda: f64,
}

impl PenaltyBatch {
    pub fn new(grad_norms: Vec<f64>, lambda: f64) -> Result<Self, TrainMathError> {
        check("grad_norms", &grad_norms, "[0, inf)", |x| x.is_finite() && x >= 0.0)?;
        check("lambda", &[lambda], "[0, inf)", |x| x.is_finite() && x >= 0.0)?;
        Ok(Self { grad_norms, lambda })
    }

    pub fn with_default_lambda(grad_norms: Vec<f64>) -> Result<Self, TrainMathError> {
        Self::new(grad_norms, DEFAULT_LAMBDA)
    }

    pub fn grad_norms(&self) -> &[f64] {
        &self.grad_norms
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// Minimax GAN value `E[log D(x)] + E[log(1 - D(G(z)))]`.
pub fn gan_minimax_value(probs_real: &[f64], probs_fake: &[f64]) -> Result<f64, TrainMathError> {
    check("probs_real", probs_real, "(0, 1]", |p| p > 0.0 && p <= 1.0)?;
    check("probs_fake", probs_fake, "[0, 1)", |p| (0.0..1.0).contains(&p))?;
    let real = probs_real.iter().map(|p| p.ln()).sum::<f64>() / probs_real.len() as f64;
    let fake = probs_fake.iter().map(|p| (-p).ln_1p()).sum::<f64>() / probs_fake.len() as f64;
    Ok(real + fake)
}

/// Critic estimate of the Wasserstein distance: `mean(real) - mean(fake)`.
pub fn wasserstein_estimate(sb: &ScoreBatch) -> f64 {
    mean(&sb.real_scores) - mean(&sb.fake_scores)
}

/// `lambda * mean((norm - 1)^2)`.
pub fn gradient_penalty(pb: &PenaltyBatch) -> f64 {
    let m = pb.grad_norms.iter().map(|n| (n - 1.0).powi(2)).sum::<f64>() / pb.grad_norms.len() as f64;
    pb.lambda * m
}

/// Loss the critic minimizes: `mean(fake) - mean(real) + penalty`.
pub fn wgan_gp_critic_loss(sb: &ScoreBatch, pb: &PenaltyBatch) -> f64 {
    mean(&sb.fake_scores) - mean(&sb.real_scores) + gradient_penalty(pb)
}

/// `eps * x_real + (1 - eps) * x_fake`, elementwise.
pub fn interpolate_samples(x_real: &[f64], x_fake: &[f64], eps: f64) -> Result<Vec<f64>, TrainMathError> {
    if x_real.len() != x_fake.len() {
        return Err(TrainMathError::LengthMismatch {
            left: x_real.len(),
            right: x_fake.len(),
        });
    }
    check("eps", &[eps], "[0, 1]", |e| (0.0..=1.0).contains(&e))?;
    Ok(x_real
        .iter()
        .zip(x_fake)
        .map(|(&r, &f)| eps * r + (1.0 - eps) * f)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sb(r: &[f64], f: &[f64]) -> ScoreBatch {
        ScoreBatch::new(r.to_vec(), f.to_vec()).unwrap()
    }

    #[test]
    fn minimax_examples() {
        assert_eq!(gan_minimax_value(&[1.0, 1.0], &[0.0]).unwrap(), 0.0);
        let v = gan_minimax_value(&[0.5], &[0.5]).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!((v + 1.3863).abs() < 1e-4);
        assert!(gan_minimax_value(&[1.0], &[1.0 - 1e-12]).unwrap() < -20.0);
    }

    #[test]
    fn minimax_domain() {
        assert!(gan_minimax_value(&[0.0], &[0.5]).is_err());
        assert!(gan_minimax_value(&[0.5], &[1.0]).is_err());
        assert!(gan_minimax_value(&[], &[0.5]).is_err());
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_estimate(&sb(&[2.0, 4.0], &[1.0, 1.0])), 2.0);
        assert_eq!(wasserstein_estimate(&sb(&[0.3, -1.5], &[0.3, -1.5])), 0.0);
        assert!(ScoreBatch::new(vec![], vec![1.0]).is_err());
    }

    #[test]
    fn penalty_examples() {
        let p = |n: &[f64]| gradient_penalty(&PenaltyBatch::with_default_lambda(n.to_vec()).unwrap());
        assert_eq!(p(&[1.0, 1.0, 1.0]), 0.0);
        assert_eq!(p(&[2.0]), 10.0);
        assert_eq!(p(&[0.0, 2.0]), 10.0);
        assert!(PenaltyBatch::new(vec![-0.1], 10.0).is_err());
        assert!(PenaltyBatch::new(vec![1.0], -1.0).is_err());
    }

    #[test]
    fn critic_loss_examples() {
        let one = PenaltyBatch::with_default_lambda(vec![1.0]).unwrap();
        assert_eq!(wgan_gp_critic_loss(&sb(&[1.0], &[1.0]), &one), 0.0);
        let ones = PenaltyBatch::with_default_lambda(vec![1.0, 1.0]).unwrap();
        assert_eq!(wgan_gp_critic_loss(&sb(&[2.0, 4.0], &[1.0, 1.0]), &ones), -2.0);
        let three = PenaltyBatch::new(vec![3.0], 10.0).unwrap();
        assert_eq!(wgan_gp_critic_loss(&sb(&[0.0], &[0.0]), &three), 40.0);
    }

    #[test]
    fn interpolation_examples() {
        let r = [1.0, -2.0, 3.5];
        let f = [0.0, 4.0, -1.0];
        assert_eq!(interpolate_samples(&r, &f, 1.0).unwrap(), r);
        assert_eq!(interpolate_samples(&r, &f, 0.0).unwrap(), f);
        assert_eq!(interpolate_samples(&[2.0], &[0.0], 0.5).unwrap(), vec![1.0]);
        assert!(interpolate_samples(&r, &f[..2], 0.5).is_err());
        assert!(interpolate_samples(&r, &f, 1.5).is_err());
    }
}
