//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward path (under [`no_grad`]), so
//! it stays independent of the backward rules it is used to verify. Checks
//! run in `f64`, which is the reason the tensor engine is generic over the
//! scalar type.

use super::{backward, no_grad, Tensor};
use ndarray::ArrayD;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub coordinates: usize,
    pub max_rel_error: f64,
}

fn eval<F>(f: &F, inputs: &[ArrayD<f64>]) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    no_grad(|| {
        let tensors: Vec<Tensor<f64>> = inputs.iter().map(|a| Tensor::constant(a.clone())).collect();
        f(&tensors).item()
    })
}

/// Central differences of a scalar-valued function at `inputs`.
pub fn numeric_gradient<F>(f: &F, inputs: &[ArrayD<f64>], h: f64) -> Vec<ArrayD<f64>>
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = ArrayD::<f64>::zeros(inputs[i].raw_dim());
        let flat_len = inputs[i].len();
        for j in 0..flat_len {
            let mut plus: Vec<ArrayD<f64>> = inputs.to_vec();
            let mut minus: Vec<ArrayD<f64>> = inputs.to_vec();
            *plus[i].iter_mut().nth(j).expect("index") += h;
            *minus[i].iter_mut().nth(j).expect("index") -= h;
            let slope = (eval(f, &plus) - eval(f, &minus)) / (2.0 * h);
            *g.iter_mut().nth(j).expect("index") = slope;
        }
        grads.push(g);
    }
    grads
}

/// Compare tape gradients of `f` against central finite differences.
///
/// The error is relative with a small floor in the denominator, so
/// coordinates whose true gradient is essentially zero are held to an
/// absolute tolerance of `rtol * 1e-3` instead of a meaningless ratio.
pub fn check_gradients<F>(
    f: F,
    inputs: &[ArrayD<f64>],
    h: f64,
    rtol: f64,
) -> Result<GradCheckReport, String>
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let params: Vec<Tensor<f64>> = inputs.iter().map(|a| Tensor::param(a.clone())).collect();
    let loss = f(&params);
    backward(&loss).map_err(|e| e.to_string())?;
    let analytic: Vec<ArrayD<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| ArrayD::zeros(p.value().raw_dim())))
        .collect();
    let numeric = numeric_gradient(&f, inputs, h);

    let mut max_rel = 0.0_f64;
    let mut coordinates = 0usize;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for (j, (&av, &nv)) in a.iter().zip(n.iter()).enumerate() {
            coordinates += 1;
            let denom = av.abs().max(nv.abs()).max(1e-3);
            let rel = (av - nv).abs() / denom;
            max_rel = max_rel.max(rel);
            if rel > rtol {
                return Err(format!(
                    "gradient mismatch at input {i} coordinate {j}: analytic {av:.8e} vs numeric {nv:.8e} (rel {rel:.3e} > {rtol:.1e})"
                ));
            }
        }
    }
    Ok(GradCheckReport {
        coordinates,
        max_rel_error: max_rel,
    })
}

/// Run the finite-difference check over every differentiable kernel and both
/// losses, on `variants` random shapes each. Returns one `(kernel, result)`
/// row per check so callers can report them individually.
pub fn kernel_gradient_suite(
    variants: usize,
    seed: u64,
) -> Vec<(String, Result<GradCheckReport, String>)> {
    use crate::numerics::{
        add, bce_with_logits, concat, cross_entropy_masked, dropout, embedding_lookup, gelu,
        layer_norm, matmul, mul, scale, slice, softmax, sum_all, transpose, Tensor,
    };
    use rand::{Rng, SeedableRng};

    const H: f64 = 1e-3;
    const RTOL: f64 = 1e-3;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<(String, Result<GradCheckReport, String>)> = Vec::new();

    let mut rand_array = |rng: &mut rand_chacha::ChaCha8Rng, shape: &[usize]| -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).expect("shape")
    };

    for variant in 0..variants {
        let rows = 2 + (variant % 3);
        let cols = 3 + (variant % 4);
        let inner = 2 + (variant % 2);

        // non-uniform weights keep reduction gradients informative
        let weights = Tensor::constant(rand_array(&mut rng, &[rows, cols]));
        let weighted_sum = {
            let weights = weights.clone();
            move |y: &Tensor<f64>| sum_all(&mul(y, &weights).expect("weight shape"))
        };

        type Case = (
            &'static str,
            Vec<ArrayD<f64>>,
            Box<dyn Fn(&[Tensor<f64>]) -> Tensor<f64>>,
        );
        let mut cases: Vec<Case> = Vec::new();

        let a = rand_array(&mut rng, &[rows, cols]);
        let b = rand_array(&mut rng, &[rows, cols]);
        let ws = weighted_sum.clone();
        cases.push((
            "add",
            vec![a, b],
            Box::new(move |xs| ws(&add(&xs[0], &xs[1]).unwrap())),
        ));

        let a = rand_array(&mut rng, &[rows, cols]);
        let bias = rand_array(&mut rng, &[cols]);
        let ws = weighted_sum.clone();
        cases.push((
            "add_bias_broadcast",
            vec![a, bias],
            Box::new(move |xs| ws(&add(&xs[0], &xs[1]).unwrap())),
        ));

        let a = rand_array(&mut rng, &[rows, cols]);
        let b = rand_array(&mut rng, &[rows, cols]);
        let ws = weighted_sum.clone();
        cases.push((
            "mul",
            vec![a, b],
            Box::new(move |xs| ws(&mul(&xs[0], &xs[1]).unwrap())),
        ));

        let a = rand_array(&mut rng, &[rows, cols]);
        let ws = weighted_sum.clone();
        cases.push((
            "scale",
            vec![a],
            Box::new(move |xs| ws(&scale(&xs[0], 0.73))),
        ));

        let a = rand_array(&mut rng, &[rows, inner]);
        let b = rand_array(&mut rng, &[inner, cols]);
        let ws = weighted_sum.clone();
        cases.push((
            "matmul",
            vec![a, b],
            Box::new(move |xs| ws(&matmul(&xs[0], &xs[1]).unwrap())),
        ));

        let a = rand_array(&mut rng, &[inner, rows]);
        let b = rand_array(&mut rng, &[inner, cols]);
        let ws = weighted_sum.clone();
        cases.push((
            "transpose",
            vec![a, b],
            Box::new(move |xs| ws(&matmul(&transpose(&xs[0]).unwrap(), &xs[1]).unwrap())),
        ));

        let table = rand_array(&mut rng, &[5, cols]);
        let ids: Vec<usize> = (0..rows).map(|_| rng.random_range(0..5)).collect();
        let ws = weighted_sum.clone();
        cases.push((
            "embedding_lookup",
            vec![table],
            Box::new(move |xs| ws(&embedding_lookup(&xs[0], &ids).unwrap())),
        ));

        let a = rand_array(&mut rng, &[rows, cols]);
        let axis = variant % 2;
        let ws = weighted_sum.clone();
        cases.push((
            "softmax",
            vec![a],
            Box::new(move |xs| ws(&softmax(&xs[0], axis).unwrap())),
        ));

        let a = rand_array(&mut rng, &[rows, cols]);
        let axis = variant % 2;
        let ws = weighted_sum.clone();
        cases.push((
            "layer_norm",
            vec![a],
            Box::new(move |xs| ws(&layer_norm(&xs[0], axis, 1e-5).unwrap())),
        ));

        let a = rand_array(&mut rng, &[rows, cols]);
        let ws = weighted_sum.clone();
        cases.push(("gelu", vec![a], Box::new(move |xs| ws(&gelu(&xs[0])))));

        let split = 1 + (variant % (cols - 1));
        let a = rand_array(&mut rng, &[rows, split]);
        let b = rand_array(&mut rng, &[rows, cols - split]);
        let ws = weighted_sum.clone();
        cases.push((
            "concat",
            vec![a, b],
            Box::new(move |xs| ws(&concat(&[&xs[0], &xs[1]], 1).unwrap())),
        ));

        let a = rand_array(&mut rng, &[rows, cols + 2]);
        let start = variant % 3;
        let ws = weighted_sum.clone();
        cases.push((
            "slice",
            vec![a],
            Box::new(move |xs| ws(&slice(&xs[0], 1, start, cols).unwrap())),
        ));

        let a = rand_array(&mut rng, &[rows, cols]);
        let ws = weighted_sum.clone();
        let drop_seed = seed ^ (variant as u64);
        cases.push((
            "dropout",
            vec![a],
            Box::new(move |xs| {
                let mut drop_rng = rand_chacha::ChaCha8Rng::seed_from_u64(drop_seed);
                ws(&dropout(&xs[0], 0.25, &mut drop_rng))
            }),
        ));

        let logits = rand_array(&mut rng, &[rows, cols]);
        let labels: Vec<Option<usize>> = (0..rows)
            .map(|i| {
                if i == rows - 1 && rows > 1 {
                    None
                } else {
                    Some(rng.random_range(0..cols))
                }
            })
            .collect();
        cases.push((
            "cross_entropy_masked",
            vec![logits],
            Box::new(move |xs| cross_entropy_masked(&xs[0], &labels).unwrap()),
        ));

        let logits = rand_array(&mut rng, &[cols]);
        let targets: Vec<f64> = (0..cols).map(|_| f64::from(rng.random_range(0..2))).collect();
        cases.push((
            "bce_with_logits",
            vec![logits],
            Box::new(move |xs| bce_with_logits(&xs[0], &targets).unwrap()),
        ));

        for (name, inputs, f) in cases {
            let outcome = check_gradients(|xs| f(xs), &inputs, H, RTOL);
            results.push((format!("{name}#{variant}"), outcome));
        }
    }
    results
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{mul, sum_all};
    use ndarray::arr1;

    #[test]
    fn quadratic_passes() {
        let f = |xs: &[Tensor<f64>]| sum_all(&mul(&xs[0], &xs[0]).unwrap());
        let inputs = vec![arr1(&[1.0, -2.0, 0.5]).into_dyn()];
        let report = check_gradients(f, &inputs, 1e-3, 1e-3).unwrap();
        assert_eq!(report.coordinates, 3);
        assert!(report.max_rel_error < 1e-6);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // forward computes x^2 but we sneak in an op whose backward is x^2's
        // while the value is x^3: numeric and analytic must disagree
        let f = |xs: &[Tensor<f64>]| {
            let cubed = Tensor::from_op(
                xs[0].value().mapv(|v| v * v * v),
                vec![xs[0].clone()],
                Box::new({
                    let x = xs[0].clone();
                    move |g| vec![Some(g * &x.value().mapv(|v| 2.0 * v))]
                }),
            );
            sum_all(&cubed)
        };
        let inputs = vec![arr1(&[1.5, 2.0]).into_dyn()];
        assert!(check_gradients(f, &inputs, 1e-3, 1e-3).is_err());
    }
}
