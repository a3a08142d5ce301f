//! Fully connected layer `y = x W^T + b` with `x: [B, F]`, `w: [O, F]`.

use crate::error::{Error, Result};
use crate::tensor::{dims2, Elem, Tensor};

pub fn linear_forward<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (b, f) = dims2(x.shape(), "linear")?;
    let (o, wf) = dims2(w.shape(), "linear")?;
    if wf != f || bias.len() != o {
        return Err(Error::ShapeMismatch {
            op: "linear",
            expected: vec![f, o],
            got: vec![wf, bias.len()],
        });
    }
    let mut out = vec![E::zero(); b * o];
    for row in out.chunks_exact_mut(o) {
        row.copy_from_slice(bias.data());
    }
    unsafe {
        // out[B, O] += x[B, F] @ w^T[F, O]
        E::gemm(
            b,
            f,
            o,
            E::one(),
            x.data().as_ptr(),
            f as isize,
            1,
            w.data().as_ptr(),
            1,
            f as isize,
            E::one(),
            out.as_mut_ptr(),
            o as isize,
            1,
        );
    }
    Tensor::new(vec![b, o], out)
}

pub fn linear_backward<E: Elem>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    dy: &[E],
) -> Result<(Tensor<E>, Tensor<E>, Tensor<E>)> {
    let (b, f) = dims2(x.shape(), "linear")?;
    let (o, _) = dims2(w.shape(), "linear")?;
    let mut dx = vec![E::zero(); b * f];
    let mut dw = vec![E::zero(); o * f];
    let mut db = vec![E::zero(); o];
    unsafe {
        // dx[B, F] = dy[B, O] @ w[O, F]
        E::gemm(
            b,
            o,
            f,
            E::one(),
            dy.as_ptr(),
            o as isize,
            1,
            w.data().as_ptr(),
            f as isize,
            1,
            E::zero(),
            dx.as_mut_ptr(),
            f as isize,
            1,
        );
        // dw[O, F] = dy^T[O, B] @ x[B, F]
        E::gemm(
            o,
            b,
            f,
            E::one(),
            dy.as_ptr(),
            1,
            o as isize,
            x.data().as_ptr(),
            f as isize,
            1,
            E::zero(),
            dw.as_mut_ptr(),
            f as isize,
            1,
        );
    }
    for row in dy.chunks_exact(o) {
        for (acc, &g) in db.iter_mut().zip(row) {
            *acc = *acc + g;
        }
    }
    Ok((
        Tensor::new(vec![b, f], dx)?,
        Tensor::new(vec![o, f], dw)?,
        Tensor::from_vec(db),
    ))
}
