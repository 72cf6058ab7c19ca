//! Hybrid BCE + Dice segmentation loss over probabilities, with analytic
//! per-pixel gradients.
//!
//! ```text
//! bce  = -(1/N) Σ [t ln p + (1 - t) ln(1 - p)]
//! dice = 1 - (2 Σ p t + ε) / (Σ p + Σ t + ε)
//! loss = bce + dice
//! ```
//!
//! `p` is clamped to `[bce_clamp, 1 - bce_clamp]` inside the logarithms only;
//! the Dice term sees raw probabilities.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    ShapeMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub epsilon: f64,
    pub bce_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            bce_clamp: 1e-7,
        }
    }
}

fn check(p: &[f64], t: &[f64]) -> Result<(), LossError> {
    if p.len() != t.len() {
        return Err(LossError::ShapeMismatch(p.len(), t.len()));
    }
    if p.is_empty() {
        return Err(LossError::EmptyInput);
    }
    Ok(())
}

pub fn bce_loss(p: &[f64], t: &[f64], cfg: &LossConfig) -> Result<f64, LossError> {
    check(p, t)?;
    let lo = cfg.bce_clamp;
    let sum: f64 = p
        .iter()
        .zip(t)
        .map(|(&p, &t)| {
            let p = p.clamp(lo, 1.0 - lo);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum();
    Ok(-sum / p.len() as f64)
}

struct DiceSums {
    intersection: f64,
    denominator: f64,
}

fn dice_sums(p: &[f64], t: &[f64], eps: f64) -> DiceSums {
    let (mut pt, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in p.iter().zip(t) {
        pt += p * t;
        sp += p;
        st += t;
    }
    DiceSums {
        intersection: 2.0 * pt + eps,
        denominator: sp + st + eps,
    }
}

pub fn dice_loss(p: &[f64], t: &[f64], cfg: &LossConfig) -> Result<f64, LossError> {
    check(p, t)?;
    let s = dice_sums(p, t, cfg.epsilon);
    Ok(1.0 - s.intersection / s.denominator)
}

pub fn combined_loss(p: &[f64], t: &[f64], cfg: &LossConfig) -> Result<f64, LossError> {
    Ok(bce_loss(p, t, cfg)? + dice_loss(p, t, cfg)?)
}

/// `∂(bce + dice)/∂p_i` for every pixel.
pub fn grad_combined(p: &[f64], t: &[f64], cfg: &LossConfig) -> Result<Vec<f64>, LossError> {
    check(p, t)?;
    let n = p.len() as f64;
    let lo = cfg.bce_clamp;
    let s = dice_sums(p, t, cfg.epsilon);
    let d2 = s.denominator * s.denominator;
    Ok(p.iter()
        .zip(t)
        .map(|(&p, &t)| {
            let pc = p.clamp(lo, 1.0 - lo);
            let bce = (-t / pc + (1.0 - t) / (1.0 - pc)) / n;
            let dice = -(2.0 * t * s.denominator - s.intersection) / d2;
            bce + dice
        })
        .collect())
}

/// Largest relative gap between [`grad_combined`] and central differences
/// of [`combined_loss`] with step `h`.
pub fn max_gradient_error(p: &[f64], t: &[f64], cfg: &LossConfig, h: f64) -> Result<f64, LossError> {
    let analytic = grad_combined(p, t, cfg)?;
    let mut probe = p.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        probe[i] = p[i] + h;
        let up = combined_loss(&probe, t, cfg)?;
        probe[i] = p[i] - h;
        let down = combined_loss(&probe, t, cfg)?;
        probe[i] = p[i];
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: LossConfig = LossConfig {
        epsilon: 1e-6,
        bce_clamp: 1e-7,
    };

    #[test]
    fn bce_hand_values() {
        let v = bce_loss(&[0.5, 0.5], &[1.0, 0.0], &CFG).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let v = bce_loss(&[0.9], &[0.0], &CFG).unwrap();
        assert!((v - 2.302_585_092_994_046).abs() < 1e-9);
        assert!(bce_loss(&[1.0, 0.0], &[1.0, 0.0], &CFG).unwrap() <= 1e-6);
    }

    #[test]
    fn dice_hand_values() {
        assert!(dice_loss(&[1.0; 4], &[1.0; 4], &CFG).unwrap().abs() < 1e-15);
        let v = dice_loss(&[1.0, 1.0, 0.0, 0.0], &[1.0, 0.0, 0.0, 0.0], &CFG).unwrap();
        assert!((v - (1.0 - (2.0 + 1e-6) / (3.0 + 1e-6))).abs() < 1e-15);
        assert_eq!(dice_loss(&[0.0; 3], &[0.0; 3], &CFG).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert_eq!(bce_loss(&[0.5], &[], &CFG), Err(LossError::ShapeMismatch(1, 0)));
        assert_eq!(dice_loss(&[], &[], &CFG), Err(LossError::EmptyInput));
        assert_eq!(grad_combined(&[0.5, 0.5], &[1.0], &CFG), Err(LossError::ShapeMismatch(2, 1)));
    }

    #[test]
    fn single_pixel_gradient() {
        let g = grad_combined(&[0.5], &[1.0], &CFG).unwrap();
        let eps = 1e-6;
        let dice = -(2.0 * (1.5 + eps) - (1.0 + eps)) / ((1.5 + eps) * (1.5 + eps));
        assert!((g[0] - (-2.0 + dice)).abs() < 1e-12);
        assert!((g[0] + 2.888_889).abs() < 1e-6);
    }
}
