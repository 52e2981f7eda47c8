//! Differentiable primitives.
//!
//! Every function here records a backward rule when an input tracks
//! gradients. All primitives are exercised by the finite-difference suite in
//! [`crate::gradcheck`].

mod conv;
mod loss;
mod pool;
mod softmax;
mod warp;

pub use conv::{conv2d, conv3d};
pub use loss::{smooth_l1, unbalanced_smooth_l1_lower, unbalanced_smooth_l1_upper};
pub use pool::{adaptive_avg_pool2d, avg_pool2d, upsample_bilinear2d};
pub use softmax::softmax;
pub use warp::bilinear_warp_1d;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{shape_string, strides, Tensor};

fn unary<T: Scalar>(
    name: &'static str,
    x: &Tensor<T>,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Tensor<T> {
    let data: Vec<T> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        name,
        vec![x.clone()],
        Box::new(move |ctx| {
            let x = &ctx.inputs[0];
            if !x.requires_grad() {
                return;
            }
            let xd = x.data();
            let g = ctx.out_grad;
            let yd = ctx.out_data;
            x.accumulate_grad_with(|gx| {
                for i in 0..gx.len() {
                    gx[i] = gx[i] + g[i] * df(xd[i], yd[i]);
                }
            });
        }),
    )
}

fn check_same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape_mismatch(
            op,
            shape_string(a.shape()),
            shape_string(b.shape()),
        ));
    }
    Ok(())
}

/// Elementwise `a + b` (same shape).
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("add", a, b)?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        "add",
        vec![a.clone(), b.clone()],
        Box::new(|ctx| {
            let g = ctx.out_grad;
            for input in ctx.inputs {
                input.accumulate_grad_with(|gi| {
                    for i in 0..gi.len() {
                        gi[i] = gi[i] + g[i];
                    }
                });
            }
        }),
    ))
}

/// Elementwise `a - b` (same shape).
pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("sub", a, b)?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x - y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        "sub",
        vec![a.clone(), b.clone()],
        Box::new(|ctx| {
            let g = ctx.out_grad;
            ctx.inputs[0].accumulate_grad_with(|gi| {
                for i in 0..gi.len() {
                    gi[i] = gi[i] + g[i];
                }
            });
            ctx.inputs[1].accumulate_grad_with(|gi| {
                for i in 0..gi.len() {
                    gi[i] = gi[i] - g[i];
                }
            });
        }),
    ))
}

/// Elementwise `a * b` (same shape).
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("mul", a, b)?;
    let data: Vec<T> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        "mul",
        vec![a.clone(), b.clone()],
        Box::new(|ctx| {
            let g = ctx.out_grad;
            let (a, b) = (&ctx.inputs[0], &ctx.inputs[1]);
            if a.requires_grad() {
                let bd = b.data();
                a.accumulate_grad_with(|ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + g[i] * bd[i];
                    }
                });
            }
            if b.requires_grad() {
                let ad = a.data();
                b.accumulate_grad_with(|gb| {
                    for i in 0..gb.len() {
                        gb[i] = gb[i] + g[i] * ad[i];
                    }
                });
            }
        }),
    ))
}

/// `x * c` for a scalar constant.
pub fn scalar_mul<T: Scalar>(x: &Tensor<T>, c: f64) -> Tensor<T> {
    let c = T::from_f64(c);
    unary("scalar_mul", x, move |v| v * c, move |_, _| c)
}

/// `x + c` for a scalar constant.
pub fn scalar_add<T: Scalar>(x: &Tensor<T>, c: f64) -> Tensor<T> {
    let c = T::from_f64(c);
    unary("scalar_add", x, move |v| v + c, |_, _| T::one())
}

pub fn neg<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    scalar_mul(x, -1.0)
}

/// Elementwise `1 / x`.
pub fn reciprocal<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    unary("reciprocal", x, |v| T::one() / v, |_, y| -(y * y))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    unary(
        "relu",
        x,
        |v| if v > T::zero() { v } else { T::zero() },
        |xv, _| if xv > T::zero() { T::one() } else { T::zero() },
    )
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    unary(
        "sigmoid",
        x,
        |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        },
        |_, y| y * (T::one() - y),
    )
}

/// `ln(p / (1 - p))` with `p` clamped into `[eps, 1 - eps]`. Gradient is zero
/// in the clamped region.
pub fn logit<T: Scalar>(x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let lo = T::from_f64(eps);
    let hi = T::one() - lo;
    unary(
        "logit",
        x,
        move |v| {
            let p = v.max(lo).min(hi);
            (p / (T::one() - p)).ln()
        },
        move |v, _| {
            if v <= lo || v >= hi {
                T::zero()
            } else {
                T::one() / (v * (T::one() - v))
            }
        },
    )
}

/// Elementwise `min(max(x, lo), hi)` with tensor bounds. The gradient routes
/// to whichever argument is active at each element.
pub fn clamp_bounds<T: Scalar>(x: &Tensor<T>, lo: &Tensor<T>, hi: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape("clamp_bounds", x, lo)?;
    check_same_shape("clamp_bounds", x, hi)?;
    let data: Vec<T> = {
        let xd = x.data();
        let ld = lo.data();
        let hd = hi.data();
        (0..xd.len()).map(|i| xd[i].max(ld[i]).min(hd[i])).collect()
    };
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        data,
        "clamp_bounds",
        vec![x.clone(), lo.clone(), hi.clone()],
        Box::new(|ctx| {
            let g = ctx.out_grad;
            let (x, lo, hi) = (&ctx.inputs[0], &ctx.inputs[1], &ctx.inputs[2]);
            let xd = x.data();
            let ld = lo.data();
            let hd = hi.data();
            // Route: below the interval -> lo, above -> hi, inside -> x.
            x.accumulate_grad_with(|gx| {
                for i in 0..gx.len() {
                    if xd[i] >= ld[i] && xd[i] <= hd[i] {
                        gx[i] = gx[i] + g[i];
                    }
                }
            });
            lo.accumulate_grad_with(|gl| {
                for i in 0..gl.len() {
                    if xd[i] < ld[i] {
                        gl[i] = gl[i] + g[i];
                    }
                }
            });
            hi.accumulate_grad_with(|gh| {
                for i in 0..gh.len() {
                    if xd[i] > hd[i] && xd[i] >= ld[i] {
                        gh[i] = gh[i] + g[i];
                    }
                }
            });
        }),
    ))
}

/// Copy with a new shape; element count must match.
pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(TensorError::shape_mismatch(
            "reshape",
            format!("{} elements", x.numel()),
            shape_string(shape),
        ));
    }
    Ok(Tensor::from_op(
        shape.to_vec(),
        x.to_vec(),
        "reshape",
        vec![x.clone()],
        Box::new(|ctx| {
            let g = ctx.out_grad;
            ctx.inputs[0].accumulate_grad_with(|gx| {
                for i in 0..gx.len() {
                    gx[i] = gx[i] + g[i];
                }
            });
        }),
    ))
}

fn axis_split<T: Scalar>(x: &Tensor<T>, axis: usize) -> (usize, usize, usize) {
    let shape = x.shape();
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Contiguous slice `[start, start + len)` along `axis`.
pub fn narrow<T: Scalar>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() || start + len > shape[axis] {
        return Err(TensorError::invalid(
            "narrow",
            format!("axis {axis} range {start}..{} out of shape {shape:?}", start + len),
        ));
    }
    let (outer, alen, inner) = axis_split(x, axis);
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let xd = x.data();
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for a in start..start + len {
            let base = (o * alen + a) * inner;
            data.extend_from_slice(&xd[base..base + inner]);
        }
    }
    drop(xd);
    Ok(Tensor::from_op(
        out_shape,
        data,
        "narrow",
        vec![x.clone()],
        Box::new(move |ctx| {
            let g = ctx.out_grad;
            let x = &ctx.inputs[0];
            let (outer, alen, inner) = axis_split(x, axis);
            x.accumulate_grad_with(|gx| {
                for o in 0..outer {
                    for a in 0..len {
                        let src = (o * len + a) * inner;
                        let dst = (o * alen + start + a) * inner;
                        for i in 0..inner {
                            gx[dst + i] = gx[dst + i] + g[src + i];
                        }
                    }
                }
            });
        }),
    ))
}

/// Concatenation along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(TensorError::invalid("concat", "no tensors given".to_string()));
    }
    let first = parts[0].shape();
    if axis >= first.len() {
        return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
    }
    let mut total = 0usize;
    for p in parts {
        let s = p.shape();
        if s.len() != first.len()
            || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
        {
            return Err(TensorError::shape_mismatch(
                "concat",
                shape_string(first),
                shape_string(s),
            ));
        }
        total += s[axis];
    }
    let mut out_shape = first.to_vec();
    out_shape[axis] = total;
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let alen = p.shape()[axis];
            let pd = p.data();
            let base = o * alen * inner;
            data.extend_from_slice(&pd[base..base + alen * inner]);
        }
    }
    let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Ok(Tensor::from_op(
        out_shape,
        data,
        "concat",
        parts.to_vec(),
        Box::new(move |ctx| {
            let g = ctx.out_grad;
            for (idx, input) in ctx.inputs.iter().enumerate() {
                if !input.requires_grad() {
                    continue;
                }
                let alen = lens[idx];
                let offset: usize = lens[..idx].iter().sum();
                input.accumulate_grad_with(|gi| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * alen * inner;
                        for j in 0..alen * inner {
                            gi[dst + j] = gi[dst + j] + g[src + j];
                        }
                    }
                });
            }
        }),
    ))
}

/// Sum of all elements, as a `[1]` tensor.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let total: T = x.data().iter().copied().sum();
    Ok(Tensor::from_op(
        vec![1],
        vec![total],
        "sum_all",
        vec![x.clone()],
        Box::new(|ctx| {
            let g = ctx.out_grad[0];
            ctx.inputs[0].accumulate_grad_with(|gx| {
                for v in gx.iter_mut() {
                    *v = *v + g;
                }
            });
        }),
    ))
}

/// Mean of all elements, as a `[1]` tensor.
pub fn mean_all<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let n = x.numel();
    Ok(scalar_mul(&sum_all(x)?, 1.0 / n as f64))
}

/// Sum along `axis`, keeping it as extent 1.
pub fn sum_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.shape().len() {
        return Err(TensorError::invalid("sum_axis", format!("axis {axis} out of range")));
    }
    let (outer, alen, inner) = axis_split(x, axis);
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = 1;
    let xd = x.data();
    let mut data = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for a in 0..alen {
            let base = (o * alen + a) * inner;
            for i in 0..inner {
                data[o * inner + i] = data[o * inner + i] + xd[base + i];
            }
        }
    }
    drop(xd);
    Ok(Tensor::from_op(
        out_shape,
        data,
        "sum_axis",
        vec![x.clone()],
        Box::new(move |ctx| {
            let g = ctx.out_grad;
            let x = &ctx.inputs[0];
            let (outer, alen, inner) = axis_split(x, axis);
            x.accumulate_grad_with(|gx| {
                for o in 0..outer {
                    for a in 0..alen {
                        let base = (o * alen + a) * inner;
                        for i in 0..inner {
                            gx[base + i] = gx[base + i] + g[o * inner + i];
                        }
                    }
                }
            });
        }),
    ))
}

pub(crate) use conv::check_image_shape;

#[allow(unused_imports)]
pub(crate) use crate::tensor::BwdCtx;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn narrow_concat_round_trip() {
        let x = Tensor::<f64>::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false);
        let a = narrow(&x, 1, 0, 1).unwrap();
        let b = narrow(&x, 1, 1, 2).unwrap();
        let back = concat(&[a, b], 1).unwrap();
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn clamp_routes_gradients() {
        let x = Tensor::<f64>::from_vec(&[3], vec![-1.0, 0.5, 2.0], true);
        let lo = Tensor::<f64>::from_vec(&[3], vec![0.0; 3], true);
        let hi = Tensor::<f64>::from_vec(&[3], vec![1.0; 3], true);
        let y = clamp_bounds(&x, &lo, &hi).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 0.5, 1.0]);
        sum_all(&y).unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(lo.grad().unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(hi.grad().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn sum_axis_keeps_dim() {
        let x = Tensor::<f64>::from_vec(&[2, 2, 2], (1..=8).map(f64::from).collect(), false);
        let y = sum_axis(&x, 1).unwrap();
        assert_eq!(y.shape(), &[2, 1, 2]);
        assert_eq!(y.to_vec(), vec![4.0, 6.0, 12.0, 14.0]);
    }
}
