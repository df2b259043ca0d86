//! Forward kernels and their backward rules.
//!
//! Broadcasting is deliberately limited to the one pattern the models need:
//! adding a rank-1 bias to the rows of a rank-2 tensor. Everything else
//! requires exact shape agreement and fails with an error naming both shapes.

use super::{debug_assert_finite, lit, Scalar, Tensor, TensorError, TensorResult};
use ndarray::{Array2, ArrayD, Axis, Ix2, Slice, Zip};
use rand::Rng;

fn view2<S: Scalar>(a: &ArrayD<S>, op: &'static str) -> TensorResult<Array2<S>> {
    a.view()
        .into_dimensionality::<Ix2>()
        .map(|v| v.to_owned())
        .map_err(|_| TensorError::Invalid(format!("{op} expects a rank-2 tensor, got {:?}", a.shape())))
}

/// Elementwise addition; also accepts a rank-1 `b` broadcast over the rows
/// of a rank-2 `a` (the bias pattern).
pub fn add<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> TensorResult<Tensor<S>> {
    let av = a.value();
    let bv = b.value();
    if av.shape() == bv.shape() {
        let out = &*av + &*bv;
        drop(av);
        drop(bv);
        return Ok(Tensor::from_op(
            out,
            vec![a.clone(), b.clone()],
            Box::new(|g| vec![Some(g.clone()), Some(g.clone())]),
        ));
    }
    if av.ndim() == 2 && bv.ndim() == 1 && av.shape()[1] == bv.shape()[0] {
        let out = &*av + &bv.view().insert_axis(Axis(0));
        drop(av);
        drop(bv);
        return Ok(Tensor::from_op(
            out,
            vec![a.clone(), b.clone()],
            Box::new(|g| vec![Some(g.clone()), Some(g.sum_axis(Axis(0)))]),
        ));
    }
    Err(TensorError::ShapeMismatch {
        op: "add",
        left: av.shape().to_vec(),
        right: bv.shape().to_vec(),
    })
}

/// Elementwise (Hadamard) product of equally shaped tensors.
pub fn mul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> TensorResult<Tensor<S>> {
    let av = a.value();
    let bv = b.value();
    if av.shape() != bv.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mul",
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
        });
    }
    let out = &*av * &*bv;
    drop(av);
    drop(bv);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            vec![
                Some(g * &*bc.value()),
                Some(g * &*ac.value()),
            ]
        }),
    ))
}

/// Multiply by a compile-time known constant.
pub fn scale<S: Scalar>(a: &Tensor<S>, c: S) -> Tensor<S> {
    let out = a.value().mapv(|v| v * c);
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g.mapv(|v| v * c))]),
    )
}

/// Rank-2 matrix product.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> TensorResult<Tensor<S>> {
    let av = a.value();
    let bv = b.value();
    if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
        });
    }
    let a2 = view2(&av, "matmul")?;
    let b2 = view2(&bv, "matmul")?;
    let out = a2.dot(&b2).into_dyn();
    drop(av);
    drop(bv);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let g2 = g
                .view()
                .into_dimensionality::<Ix2>()
                .expect("matmul grad rank");
            let av = ac.value();
            let bv = bc.value();
            let a2 = av.view().into_dimensionality::<Ix2>().expect("rank");
            let b2 = bv.view().into_dimensionality::<Ix2>().expect("rank");
            let ga = g2.dot(&b2.t()).into_dyn();
            let gb = a2.t().dot(&g2).into_dyn();
            vec![Some(ga), Some(gb)]
        }),
    ))
}

/// Rank-2 transpose.
pub fn transpose<S: Scalar>(a: &Tensor<S>) -> TensorResult<Tensor<S>> {
    let av = a.value();
    if av.ndim() != 2 {
        return Err(TensorError::Invalid(format!(
            "transpose expects a rank-2 tensor, got {:?}",
            av.shape()
        )));
    }
    let out = av.t().to_owned();
    drop(av);
    Ok(Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(|g| {
            let g2 = g.view().into_dimensionality::<Ix2>().expect("rank");
            vec![Some(g2.t().to_owned().into_dyn())]
        }),
    ))
}

/// Gather rows of `table` by token id; backward scatter-adds into the table.
pub fn embedding_lookup<S: Scalar>(table: &Tensor<S>, ids: &[usize]) -> TensorResult<Tensor<S>> {
    let tv = table.value();
    if tv.ndim() != 2 {
        return Err(TensorError::Invalid(format!(
            "embedding_lookup expects a rank-2 table, got {:?}",
            tv.shape()
        )));
    }
    let (rows, dim) = (tv.shape()[0], tv.shape()[1]);
    for &id in ids {
        if id >= rows {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding_lookup",
                index: id,
                extent: rows,
            });
        }
    }
    let mut out = ArrayD::zeros(ndarray::IxDyn(&[ids.len(), dim]));
    for (i, &id) in ids.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&tv.index_axis(Axis(0), id));
    }
    drop(tv);
    let ids_owned: Vec<usize> = ids.to_vec();
    let table_shape = vec![rows, dim];
    Ok(Tensor::from_op(
        out,
        vec![table.clone()],
        Box::new(move |g| {
            let mut gt = ArrayD::<S>::zeros(ndarray::IxDyn(&table_shape));
            for (i, &id) in ids_owned.iter().enumerate() {
                let src = g.index_axis(Axis(0), i);
                let mut dst = gt.index_axis_mut(Axis(0), id);
                dst.zip_mut_with(&src, |d, &s| *d = *d + s);
            }
            vec![Some(gt)]
        }),
    ))
}

fn check_axis<S: Scalar>(a: &ArrayD<S>, axis: usize, op: &'static str) -> TensorResult<()> {
    if axis >= a.ndim() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            shape: a.shape().to_vec(),
        });
    }
    Ok(())
}

/// Numerically stable softmax along `axis`.
pub fn softmax<S: Scalar>(a: &Tensor<S>, axis: usize) -> TensorResult<Tensor<S>> {
    let av = a.value();
    check_axis(&av, axis, "softmax")?;
    let mut out = av.clone();
    drop(av);
    for mut lane in out.lanes_mut(Axis(axis)) {
        let max = lane.iter().copied().fold(S::neg_infinity(), S::max);
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane.mapv_inplace(|v| v / sum);
    }
    let y = out.clone();
    Ok(Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let mut dx = ArrayD::<S>::zeros(y.raw_dim());
            Zip::from(dx.lanes_mut(Axis(axis)))
                .and(y.lanes(Axis(axis)))
                .and(g.lanes(Axis(axis)))
                .for_each(|mut dl, yl, gl| {
                    let dot = yl
                        .iter()
                        .zip(gl.iter())
                        .fold(S::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    for ((d, &yv), &gv) in dl.iter_mut().zip(yl.iter()).zip(gl.iter()) {
                        *d = yv * (gv - dot);
                    }
                });
            vec![Some(dx)]
        }),
    ))
}

/// Normalize each lane along `axis` to zero mean and unit variance.
/// Affine gain/shift are the caller's business (separate parameters).
pub fn layer_norm<S: Scalar>(a: &Tensor<S>, axis: usize, eps: S) -> TensorResult<Tensor<S>> {
    let av = a.value();
    check_axis(&av, axis, "layer_norm")?;
    let n = av.shape()[axis];
    let inv_n = S::one() / lit::<S>(n as f64);
    let mut out = av.clone();
    drop(av);
    let mut inv_sigmas: Vec<S> = Vec::new();
    for mut lane in out.lanes_mut(Axis(axis)) {
        let mean = lane.sum() * inv_n;
        let var = lane
            .iter()
            .fold(S::zero(), |acc, &v| acc + (v - mean) * (v - mean))
            * inv_n;
        let inv_sigma = S::one() / (var + eps).sqrt();
        inv_sigmas.push(inv_sigma);
        lane.mapv_inplace(|v| (v - mean) * inv_sigma);
    }
    let y = out.clone();
    Ok(Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let mut dx = ArrayD::<S>::zeros(y.raw_dim());
            let mut k = 0usize;
            Zip::from(dx.lanes_mut(Axis(axis)))
                .and(y.lanes(Axis(axis)))
                .and(g.lanes(Axis(axis)))
                .for_each(|mut dl, yl, gl| {
                    let inv_sigma = inv_sigmas[k];
                    k += 1;
                    let mean_g = gl.sum() * inv_n;
                    let mean_gy = yl
                        .iter()
                        .zip(gl.iter())
                        .fold(S::zero(), |acc, (&yv, &gv)| acc + yv * gv)
                        * inv_n;
                    for ((d, &yv), &gv) in dl.iter_mut().zip(yl.iter()).zip(gl.iter()) {
                        *d = inv_sigma * (gv - mean_g - yv * mean_gy);
                    }
                });
            vec![Some(dx)]
        }),
    ))
}

/// GELU activation (tanh approximation).
pub fn gelu<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let c: S = lit((2.0 / std::f64::consts::PI).sqrt());
    let k: S = lit(0.044715);
    let half: S = lit(0.5);
    let three: S = lit(3.0);
    let out = a.value().mapv(|x| {
        let u = c * (x + k * x * x * x);
        half * x * (S::one() + u.tanh())
    });
    let ac = a.clone();
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let av = ac.value();
            let dx = Zip::from(g).and(&*av).map_collect(|&gv, &x| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let sech2 = S::one() - t * t;
                let du = c * (S::one() + three * k * x * x);
                gv * (half * (S::one() + t) + half * x * sech2 * du)
            });
            vec![Some(dx)]
        }),
    )
}

/// Concatenate tensors along `axis`.
pub fn concat<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> TensorResult<Tensor<S>> {
    if parts.is_empty() {
        return Err(TensorError::Invalid("concat of zero tensors".into()));
    }
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    check_axis(&values[0], axis, "concat")?;
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let out = ndarray::concatenate(Axis(axis), &views).map_err(|_| TensorError::ShapeMismatch {
        op: "concat",
        left: values[0].shape().to_vec(),
        right: values.last().expect("non-empty").shape().to_vec(),
    })?;
    let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    drop(values);
    Ok(Tensor::from_op(
        out,
        parts.iter().map(|&p| p.clone()).collect(),
        Box::new(move |g| {
            let mut offset = 0usize;
            extents
                .iter()
                .map(|&ext| {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::from(offset..offset + ext))
                        .to_owned();
                    offset += ext;
                    Some(piece)
                })
                .collect()
        }),
    ))
}

/// Contiguous slice of `len` entries starting at `start` along `axis`.
pub fn slice<S: Scalar>(
    a: &Tensor<S>,
    axis: usize,
    start: usize,
    len: usize,
) -> TensorResult<Tensor<S>> {
    let av = a.value();
    check_axis(&av, axis, "slice")?;
    let extent = av.shape()[axis];
    if start + len > extent {
        return Err(TensorError::IndexOutOfRange {
            op: "slice",
            index: start + len,
            extent,
        });
    }
    let out = av
        .slice_axis(Axis(axis), Slice::from(start..start + len))
        .to_owned();
    let parent_shape = av.shape().to_vec();
    drop(av);
    Ok(Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let mut dx = ArrayD::<S>::zeros(ndarray::IxDyn(&parent_shape));
            dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                .assign(g);
            vec![Some(dx)]
        }),
    ))
}

/// Sum of all elements, as a scalar tensor.
pub fn sum_all<S: Scalar>(a: &Tensor<S>) -> Tensor<S> {
    let av = a.value();
    let total = av.sum();
    let shape = av.shape().to_vec();
    drop(av);
    let out = ArrayD::from_elem(ndarray::IxDyn(&[]), total);
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let gv = *g.iter().next().expect("scalar grad");
            vec![Some(ArrayD::from_elem(ndarray::IxDyn(&shape), gv))]
        }),
    )
}

/// Inverted dropout: keeps each element with probability `1 - rate` and
/// rescales survivors by `1/(1 - rate)`. `rate == 0` is the identity.
pub fn dropout<S: Scalar, R: Rng>(a: &Tensor<S>, rate: f64, rng: &mut R) -> Tensor<S> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
    if rate == 0.0 {
        return a.clone();
    }
    let keep = S::one() / lit::<S>(1.0 - rate);
    let mask: ArrayD<S> = a
        .value()
        .mapv(|_| if rng.random::<f64>() < rate { S::zero() } else { keep });
    let out = &*a.value() * &mask;
    debug_assert_finite("dropout", &out);
    Tensor::from_op(
        out,
        vec![a.clone()],
        Box::new(move |g| vec![Some(g * &mask)]),
    )
}
