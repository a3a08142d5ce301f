//! Batch normalization over `[B, C, H, W]`, per-channel.
//!
//! Train mode normalizes by biased batch statistics (epsilon 1e-5) and folds
//! them into the running estimates with momentum 0.1; the running variance
//! stores the unbiased estimate, which is why train mode needs at least two
//! entries per channel. Eval mode normalizes by the running estimates.

use crate::error::{Error, Result};
use crate::tensor::{dims4, ec, Elem, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel context saved by the forward pass for backward.
#[derive(Clone, Debug)]
pub struct BnCtx<E: Elem> {
    pub mean: Vec<E>,
    pub inv_std: Vec<E>,
    pub mode: BnMode,
}

fn check_params<E: Elem>(x: &Tensor<E>, gamma: &Tensor<E>, beta: &Tensor<E>) -> Result<usize> {
    let (_, c, _, _) = dims4(x.shape(), "batchnorm")?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::ShapeMismatch {
            op: "batchnorm params",
            expected: vec![c],
            got: vec![gamma.len(), beta.len()],
        });
    }
    Ok(c)
}

/// Forward pass. In train mode `running` (mean, var) is updated in place.
pub fn batchnorm_forward<E: Elem>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running: Option<(&mut Tensor<E>, &mut Tensor<E>)>,
    mode: BnMode,
) -> Result<(Tensor<E>, BnCtx<E>)> {
    let c = check_params(x, gamma, beta)?;
    let (b, _, h, w) = dims4(x.shape(), "batchnorm")?;
    let m = b * h * w;
    let plane = h * w;
    let xd = x.data();
    let eps = ec::<E>(BN_EPS);

    let (mean, inv_std) = match mode {
        BnMode::Train => {
            if m < 2 {
                return Err(Error::BadDimension {
                    op: "batchnorm",
                    detail: format!("train mode needs B*H*W >= 2, got {m}"),
                });
            }
            let mut mean = vec![E::zero(); c];
            let mut var = vec![E::zero(); c];
            for ch in 0..c {
                let mut sum = E::zero();
                for bi in 0..b {
                    let base = (bi * c + ch) * plane;
                    for v in &xd[base..base + plane] {
                        sum = sum + *v;
                    }
                }
                let mu = sum / ec::<E>(m as f64);
                let mut ss = E::zero();
                for bi in 0..b {
                    let base = (bi * c + ch) * plane;
                    for v in &xd[base..base + plane] {
                        let d = *v - mu;
                        ss = ss + d * d;
                    }
                }
                mean[ch] = mu;
                var[ch] = ss / ec::<E>(m as f64);
            }
            if let Some((rm, rv)) = running {
                let mom = ec::<E>(BN_MOMENTUM);
                let keep = E::one() - mom;
                let unbias = ec::<E>(m as f64 / (m as f64 - 1.0));
                let rmd = rm.data_mut();
                let rvd = rv.data_mut();
                for ch in 0..c {
                    rmd[ch] = keep * rmd[ch] + mom * mean[ch];
                    rvd[ch] = keep * rvd[ch] + mom * var[ch] * unbias;
                }
            }
            let inv_std = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
            (mean, inv_std)
        }
        BnMode::Eval => {
            let (rm, rv) = match running {
                Some((rm, rv)) => (rm.data().to_vec(), rv.data().to_vec()),
                None => {
                    return Err(Error::BadDimension {
                        op: "batchnorm",
                        detail: "eval mode requires running statistics".into(),
                    })
                }
            };
            let inv_std = rv.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
            (rm, inv_std)
        }
    };

    let gd = gamma.data();
    let bd = beta.data();
    let mut out = vec![E::zero(); xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            let scale = gd[ch] * inv_std[ch];
            let shift = bd[ch] - mean[ch] * scale;
            for (o, v) in out[base..base + plane].iter_mut().zip(&xd[base..base + plane]) {
                *o = *v * scale + shift;
            }
        }
    }
    let ctx = BnCtx { mean, inv_std, mode };
    Ok((Tensor::new(x.shape().to_vec(), out)?, ctx))
}

/// Gradients w.r.t. input, gamma, beta.
pub fn batchnorm_backward<E: Elem>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    ctx: &BnCtx<E>,
    dy: &[E],
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (b, c, h, w) = dims4(x.shape(), "batchnorm")?;
    let m = b * h * w;
    let plane = h * w;
    let xd = x.data();
    let gd = gamma.data();

    let mut dgamma = vec![E::zero(); c];
    let mut dbeta = vec![E::zero(); c];
    let mut dx = vec![E::zero(); xd.len()];

    for ch in 0..c {
        let mu = ctx.mean[ch];
        let istd = ctx.inv_std[ch];
        let mut sum_dy = E::zero();
        let mut sum_dy_xhat = E::zero();
        for bi in 0..b {
            let base = (bi * c + ch) * plane;
            for i in 0..plane {
                let g = dy[base + i];
                sum_dy = sum_dy + g;
                sum_dy_xhat = sum_dy_xhat + g * (xd[base + i] - mu) * istd;
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;

        match ctx.mode {
            BnMode::Train => {
                // dx = (gamma*istd/M) * (M*dy - sum_dy - xhat*sum_dy_xhat)
                let inv_m = E::one() / ec::<E>(m as f64);
                let coef = gd[ch] * istd * inv_m;
                let mf = ec::<E>(m as f64);
                for bi in 0..b {
                    let base = (bi * c + ch) * plane;
                    for i in 0..plane {
                        let xhat = (xd[base + i] - mu) * istd;
                        dx[base + i] =
                            coef * (mf * dy[base + i] - sum_dy - xhat * sum_dy_xhat);
                    }
                }
            }
            BnMode::Eval => {
                let coef = gd[ch] * istd;
                for bi in 0..b {
                    let base = (bi * c + ch) * plane;
                    for i in 0..plane {
                        dx[base + i] = coef * dy[base + i];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::from_vec(dgamma),
        Tensor::from_vec(dbeta),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randish(n: usize, seed: u64) -> Vec<f32> {
        let mut s = seed | 1;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f32 / (1u64 << 31) as f32) - 1.0
            })
            .collect()
    }

    #[test]
    fn constant_channel_train_mode_zeroes_out() {
        let x = Tensor::full(vec![2, 1, 2, 2], 3.5f32);
        let gamma = Tensor::from_vec(vec![1.0f32]);
        let beta = Tensor::from_vec(vec![0.0f32]);
        let (y, _) = batchnorm_forward(&x, &gamma, &beta, None, BnMode::Train).unwrap();
        for v in y.data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn zero_gamma_yields_beta() {
        let x = Tensor::new(vec![1, 2, 1, 2], randish(4, 7)).unwrap();
        let gamma = Tensor::from_vec(vec![0.0f32, 0.0]);
        let beta = Tensor::from_vec(vec![1.5f32, -2.0]);
        let (y, _) = batchnorm_forward(&x, &gamma, &beta, None, BnMode::Train).unwrap();
        assert_eq!(y.data(), &[1.5, 1.5, -2.0, -2.0]);
    }

    #[test]
    fn train_mode_statistics_match_gamma_beta() {
        let x = Tensor::new(vec![4, 2, 3, 3], randish(4 * 2 * 9, 11)).unwrap();
        let gamma = Tensor::from_vec(vec![2.0f32, 0.5]);
        let beta = Tensor::from_vec(vec![-1.0f32, 3.0]);
        let (y, _) = batchnorm_forward(&x, &gamma, &beta, None, BnMode::Train).unwrap();
        let yd = y.data();
        let m = 4 * 9;
        for ch in 0..2 {
            let mut vals = Vec::new();
            for bi in 0..4 {
                let base = (bi * 2 + ch) * 9;
                vals.extend_from_slice(&yd[base..base + 9]);
            }
            let mean: f32 = vals.iter().sum::<f32>() / m as f32;
            let var: f32 =
                vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / m as f32;
            assert!((mean - beta.data()[ch]).abs() < 1e-4, "mean {mean}");
            assert!((var.sqrt() - gamma.data()[ch].abs()).abs() < 1e-4, "std {}", var.sqrt());
        }
    }

    #[test]
    fn eval_mode_uses_running_stats_and_guards_zero_variance() {
        let x = Tensor::full(vec![1, 1, 2, 2], 2.0f32);
        let gamma = Tensor::from_vec(vec![1.0f32]);
        let beta = Tensor::from_vec(vec![0.0f32]);
        let mut rm = Tensor::from_vec(vec![0.0f32]);
        let mut rv = Tensor::from_vec(vec![0.0f32]);
        let (y, _) =
            batchnorm_forward(&x, &gamma, &beta, Some((&mut rm, &mut rv)), BnMode::Eval).unwrap();
        for v in y.data() {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn single_entry_train_mode_rejected() {
        let x = Tensor::full(vec![1, 1, 1, 1], 2.0f32);
        let gamma = Tensor::from_vec(vec![1.0f32]);
        let beta = Tensor::from_vec(vec![0.0f32]);
        assert!(batchnorm_forward(&x, &gamma, &beta, None, BnMode::Train).is_err());
    }
}
