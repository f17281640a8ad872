//! Reconstruction and mask losses, and the summed training objective.

use crate::error::{Error, Result};

/// Clamp applied to predicted probabilities before taking logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

fn check_shapes(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "prediction has {} entries, target has {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

pub fn mse_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_shapes(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn mse_grad(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    check_shapes(pred, gt)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(gt).map(|(p, g)| 2.0 * (p - g) / n).collect())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

pub fn bce_loss(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check_shapes(pred, gt)?;
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let p = clamp_prob(p);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient of [`bce_loss`]; zero where the clamp is active.
pub fn bce_grad(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    check_shapes(pred, gt)?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                0.0
            } else {
                (p - g) / (p * (1.0 - p)) / n
            }
        })
        .collect())
}

/// A loss with its named parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossValue {
    pub value: f64,
    pub img: f64,
    pub mask: f64,
    pub pose: f64,
}

impl LossValue {
    pub fn from_parts(img: f64, mask: f64, pose: f64) -> Self {
        LossValue {
            value: img + mask + pose,
            img,
            mask,
            pose,
        }
    }
}

/// A prediction/target pair.
pub type Term<'a> = (&'a [f64], &'a [f64]);

/// `L = Σ mse(img) + Σ bce(mask) + L_pose` over the query and reference views.
pub fn total_loss(img: [Term<'_>; 2], mask: [Term<'_>; 2], pose: f64) -> Result<LossValue> {
    let l_img = mse_loss(img[0].0, img[0].1)? + mse_loss(img[1].0, img[1].1)?;
    let l_mask = bce_loss(mask[0].0, mask[0].1)? + bce_loss(mask[1].0, mask[1].1)?;
    let value = LossValue::from_parts(l_img, l_mask, pose);
    if !value.value.is_finite() {
        return Err(Error::DegenerateInput("non-finite loss".into()));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_examples() {
        let x = [0.3, -1.0, 2.0];
        assert_eq!(mse_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(mse_loss(&[0.0], &[1.0, 1.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn bce_examples() {
        let half = [0.5; 4];
        assert!((bce_loss(&half, &half).unwrap() - 2f64.ln()).abs() < 1e-15);
        let gt = [0.0, 1.0, 1.0, 0.0];
        assert!(bce_loss(&gt, &gt).unwrap() <= 1e-6);
        assert!(bce_loss(&[0.2], &[0.1, 0.3]).is_err());
    }

    #[test]
    fn random_pairs_match_scalar_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 37;
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut mse = 0.0;
        let mut bce = 0.0;
        for k in 0..n {
            mse += (p[k] - g[k]).powi(2);
            bce -= g[k] * p[k].ln() + (1.0 - g[k]) * (1.0 - p[k]).ln();
        }
        assert!((mse_loss(&p, &g).unwrap() - mse / n as f64).abs() < 1e-12);
        assert!((bce_loss(&p, &g).unwrap() - bce / n as f64).abs() < 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 9;
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let h = 1e-6;
        type Loss = fn(&[f64], &[f64]) -> Result<f64>;
        type Grad = fn(&[f64], &[f64]) -> Result<Vec<f64>>;
        for (loss, grad) in [(mse_loss as Loss, mse_grad as Grad), (bce_loss, bce_grad)] {
            let analytic = grad(&p, &g).unwrap();
            for k in 0..n {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus[k] += h;
                minus[k] -= h;
                let fd = (loss(&plus, &g).unwrap() - loss(&minus, &g).unwrap()) / (2.0 * h);
                let rel = (fd - analytic[k]).abs() / fd.abs().max(analytic[k].abs()).max(1e-12);
                assert!(rel < 1e-5, "k={k} fd={fd} analytic={}", analytic[k]);
            }
        }
    }

    #[test]
    fn total_loss_sums_parts() {
        let z = [0.0, 1.0];
        let l = total_loss([(&z, &z), (&z, &z)], [(&z, &z), (&z, &z)], 0.0).unwrap();
        assert!(l.value <= 4e-7);
        let l = LossValue::from_parts(1.0, 2.0, 3.0);
        assert_eq!((l.value, l.img, l.mask, l.pose), (6.0, 1.0, 2.0, 3.0));

        let a = [0.2, 0.4, 0.9];
        let b = [0.1, 0.5, 0.7];
        let m = [1.0, 0.0, 1.0];
        let l = total_loss([(&a, &b), (&b, &a)], [(&a, &m), (&b, &m)], 0.75).unwrap();
        let expected_img = mse_loss(&a, &b).unwrap() + mse_loss(&b, &a).unwrap();
        let expected_mask = bce_loss(&a, &m).unwrap() + bce_loss(&b, &m).unwrap();
        assert!((l.value - (expected_img + expected_mask + 0.75)).abs() < 1e-12);
        assert!((l.value - (l.img + l.mask + l.pose)).abs() < 1e-12);
    }
}
