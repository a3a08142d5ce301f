//! Max pooling (2x2, stride 2) and global average pooling.

use crate::error::{Error, Result};
use crate::tensor::{dims4, ec, Elem, Tensor};

/// 2x2 max pool with stride 2; odd trailing rows/columns are dropped.
/// Returns the output and the flat input index of each selected maximum
/// (first maximum wins on ties, fixed scan order).
pub fn maxpool2_forward<E: Elem>(x: &Tensor<E>) -> Result<(Tensor<E>, Vec<u32>)> {
    let (b, c, h, w) = dims4(x.shape(), "maxpool2")?;
    if h < 2 || w < 2 {
        return Err(Error::BadDimension {
            op: "maxpool2",
            detail: format!("input {h}x{w} smaller than 2x2 window"),
        });
    }
    let oh = h / 2;
    let ow = w / 2;
    let xd = x.data();
    let mut out = vec![E::zero(); b * c * oh * ow];
    let mut argmax = vec![0u32; out.len()];
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (oy * 2) * w + ox * 2;
                let mut best = xd[best_idx];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = base + (oy * 2 + dy) * w + (ox * 2 + dx);
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = bc * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, argmax))
}

pub fn maxpool2_backward<E: Elem>(x_shape: &[usize], argmax: &[u32], dy: &[E]) -> Tensor<E> {
    let n: usize = x_shape.iter().product();
    let mut dx = vec![E::zero(); n];
    for (i, &src) in argmax.iter().enumerate() {
        dx[src as usize] = dx[src as usize] + dy[i];
    }
    Tensor::new(x_shape.to_vec(), dx).expect("argmax within input bounds")
}

/// `[B, C, H, W] -> [B, C]` mean over the spatial plane.
pub fn global_avgpool_forward<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let (b, c, h, w) = dims4(x.shape(), "global_avgpool")?;
    let plane = h * w;
    let xd = x.data();
    let mut out = vec![E::zero(); b * c];
    for (o, chunk) in out.iter_mut().zip(xd.chunks_exact(plane)) {
        let mut sum = E::zero();
        for v in chunk {
            sum = sum + *v;
        }
        *o = sum / ec::<E>(plane as f64);
    }
    Tensor::new(vec![b, c], out)
}

pub fn global_avgpool_backward<E: Elem>(x_shape: &[usize], dy: &[E]) -> Tensor<E> {
    let plane = x_shape[2] * x_shape[3];
    let inv = E::one() / ec::<E>(plane as f64);
    let mut dx = vec![E::zero(); x_shape.iter().product()];
    for (chunk, &g) in dx.chunks_exact_mut(plane).zip(dy.iter()) {
        let v = g * inv;
        chunk.fill(v);
    }
    Tensor::new(x_shape.to_vec(), dx).expect("shape product matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maxpool_picks_maximum_and_routes_gradient() {
        let x = Tensor::new(
            vec![1, 1, 2, 4],
            vec![1.0f32, 5.0, 2.0, 2.0, 3.0, 4.0, 2.0, 6.0],
        )
        .unwrap();
        let (y, argmax) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[5.0, 6.0]);
        let dx = maxpool2_backward(x.shape(), &argmax, &[1.0f32, 2.0]);
        assert_eq!(dx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn maxpool_tie_prefers_first_in_scan_order() {
        let x = Tensor::full(vec![1, 1, 2, 2], 7.0f32);
        let (_, argmax) = maxpool2_forward(&x).unwrap();
        assert_eq!(argmax, vec![0]);
    }

    #[test]
    fn global_avgpool_means_and_spreads_back() {
        let x = Tensor::new(vec![1, 2, 1, 2], vec![1.0f32, 3.0, 10.0, 20.0]).unwrap();
        let y = global_avgpool_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2]);
        assert_eq!(y.data(), &[2.0, 15.0]);
        let dx = global_avgpool_backward(x.shape(), &[1.0f32, 4.0]);
        assert_eq!(dx.data(), &[0.5, 0.5, 2.0, 2.0]);
    }
}
