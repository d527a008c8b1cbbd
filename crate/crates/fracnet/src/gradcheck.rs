//! Central finite-difference verification of analytic gradients.
//!
//! Checks run in f64. The step is applied per coordinate and the difference
//! quotient divides by the actually representable perturbation (xp - xm), so
//! the only residual error is truncation plus summation rounding.

use crate::graph::{Graph, NodeId};
use crate::params::Params;
use crate::rng::SplitMix64;
use crate::tensor::{Tensor, TensorError};

/// Relative error with an absolute floor, as used by every check here:
/// |a - n| / max(|a|, |n|, 1e-8).
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn sample_coords(numel: usize, max_samples: usize, seed: u64) -> Vec<usize> {
    if numel <= max_samples {
        return (0..numel).collect();
    }
    let mut rng = SplitMix64::new(seed);
    let mut all: Vec<usize> = (0..numel).collect();
    // Partial Fisher-Yates: the first max_samples entries are a uniform sample.
    for i in 0..max_samples {
        let j = i + rng.next_below(numel - i);
        all.swap(i, j);
    }
    all.truncate(max_samples);
    all.sort_unstable();
    all
}

/// Max relative error between the analytic input gradient of a scalar loss
/// and its central finite difference, over up to `max_samples` coordinates.
///
/// `build` must construct the loss from the input leaf on a fresh graph.
/// `h` must lie in [1e-7, 1e-3].
pub fn grad_check<F>(
    build: F,
    input: &Tensor<f64>,
    h: f64,
    max_samples: usize,
    seed: u64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, NodeId) -> Result<NodeId, TensorError>,
{
    assert!((1e-7..=1e-3).contains(&h), "h must lie in [1e-7, 1e-3]");

    let eval = |data: &[f64]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(input.shape(), data.to_vec())?);
        let loss = build(&mut g, x)?;
        Ok(g.value(loss).data()[0])
    };

    // Analytic pass.
    let analytic = {
        let mut g = Graph::new();
        let mut t = input.clone();
        t.requires_grad = true;
        let x = g.leaf(t);
        let loss = build(&mut g, x)?;
        let grads = g.backward(loss)?;
        grads
            .node(x)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()])
    };

    let mut max_err = 0.0f64;
    let mut data = input.data().to_vec();
    for coord in sample_coords(input.numel(), max_samples, seed) {
        let orig = data[coord];
        let xp = orig + h;
        let xm = orig - h;
        data[coord] = xp;
        let lp = eval(&data)?;
        data[coord] = xm;
        let lm = eval(&data)?;
        data[coord] = orig;
        let numeric = (lp - lm) / (xp - xm);
        max_err = max_err.max(relative_error(analytic[coord], numeric));
    }
    Ok(max_err)
}

/// Max relative error over trainable parameters of a scalar loss built
/// against a parameter store, sampling at least `samples_per_param`
/// coordinates of every trainable tensor.
///
/// `build` may mutate non-trainable state (batch-norm running statistics);
/// such state does not influence a train-mode loss, so repeated evaluations
/// stay consistent.
pub fn grad_check_params<F>(
    build: F,
    params: &mut Params<f64>,
    h: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &mut Params<f64>) -> Result<NodeId, TensorError>,
{
    let per_param = grad_check_params_detailed(build, params, h, samples_per_param, seed)?;
    Ok(per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max))
}

/// Like [`grad_check_params`] but reports the max error per parameter tensor.
pub fn grad_check_params_detailed<F>(
    build: F,
    params: &mut Params<f64>,
    h: f64,
    samples_per_param: usize,
    seed: u64,
) -> Result<Vec<(String, f64)>, TensorError>
where
    F: Fn(&mut Graph<f64>, &mut Params<f64>) -> Result<NodeId, TensorError>,
{
    assert!((1e-7..=1e-3).contains(&h), "h must lie in [1e-7, 1e-3]");

    params.zero_grads();
    {
        let mut g = Graph::new();
        let loss = build(&mut g, params)?;
        let grads = g.backward(loss)?;
        grads.accumulate_into(params);
    }
    let analytic: Vec<(crate::params::ParamId, String, Vec<f64>)> = params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(id, e)| {
            (
                id,
                e.name.clone(),
                e.tensor
                    .grad
                    .clone()
                    .unwrap_or_else(|| vec![0.0; e.tensor.numel()]),
            )
        })
        .collect();

    let eval = |params: &mut Params<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let loss = build(&mut g, params)?;
        Ok(g.value(loss).data()[0])
    };

    let mut report = Vec::with_capacity(analytic.len());
    for (pi, (id, name, grad)) in analytic.iter().enumerate() {
        let numel = params.get(*id).numel();
        let mut max_err = 0.0f64;
        for coord in sample_coords(numel, samples_per_param, seed.wrapping_add(pi as u64)) {
            let orig = params.get(*id).data()[coord];
            let xp = orig + h;
            let xm = orig - h;
            params.get_mut(*id).data_mut()[coord] = xp;
            let lp = eval(params)?;
            params.get_mut(*id).data_mut()[coord] = xm;
            let lm = eval(params)?;
            params.get_mut(*id).data_mut()[coord] = orig;
            let numeric = (lp - lm) / (xp - xm);
            max_err = max_err.max(relative_error(grad[coord], numeric));
        }
        report.push((name.clone(), max_err));
    }
    params.zero_grads();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ConvSpec;

    fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = SplitMix64::new(seed);
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.next_symmetric(scale)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    /// Loss that projects a node against fixed pseudo-random weights before
    /// summing, so sign errors cannot cancel across output coordinates.
    fn projected_loss(g: &mut Graph<f64>, node: NodeId, seed: u64) -> Result<NodeId, TensorError> {
        let shape = g.value(node).shape().to_vec();
        let w = random_tensor(&shape, seed, 1.0);
        let wn = g.constant(w);
        let prod = g.mul(node, wn)?;
        Ok(g.sum(prod))
    }

    #[test]
    fn identity_subgraph_error_is_zero_up_to_rounding() {
        // Dyadic values and a dyadic step keep every operation exact, so the
        // difference quotient reproduces the analytic gradient bit for bit.
        let data: Vec<f64> = vec![3.0 / 1024.0, 511.0 / 1024.0, 1.0 / 4.0, 7.0 / 8.0];
        let input = Tensor::from_vec(&[2, 2], data).unwrap();
        let err = grad_check(|g, x| Ok(g.sum(x)), &input, 1.0 / 1024.0, 16, 0).unwrap();
        assert!(err < 1e-12, "identity error {err}");
    }

    #[test]
    fn dense_layer_error_below_1e6() {
        let input = random_tensor(&[3, 5], 1, 1.0);
        let err = grad_check(
            |g, x| {
                let w = g.leaf(random_tensor(&[5, 4], 2, 1.0));
                let b = g.leaf(random_tensor(&[4], 3, 1.0));
                let y = g.dense(x, w, b)?;
                projected_loss(g, y, 4)
            },
            &input,
            1e-5,
            64,
            5,
        )
        .unwrap();
        assert!(err < 1e-6, "dense error {err}");
    }

    #[test]
    fn dilated_conv_error_below_1e5() {
        let input = random_tensor(&[2, 3, 12, 12], 6, 1.0);
        let err = grad_check(
            |g, x| {
                let k = g.leaf(random_tensor(&[4, 3, 3, 3], 7, 0.5));
                let b = g.leaf(random_tensor(&[4], 8, 0.5));
                let y = g.conv2d(
                    x,
                    k,
                    Some(b),
                    ConvSpec {
                        stride: 1,
                        padding: 4,
                        dilation: 4,
                    },
                )?;
                projected_loss(g, y, 9)
            },
            &input,
            1e-5,
            64,
            10,
        )
        .unwrap();
        assert!(err < 1e-5, "dilated conv error {err}");
    }

    #[test]
    fn conv_kernel_gradient_checks() {
        let kernel = random_tensor(&[4, 3, 3, 3], 11, 0.5);
        let err = grad_check(
            |g, k| {
                let x = g.leaf(random_tensor(&[2, 3, 8, 8], 12, 1.0));
                let y = g.conv2d(
                    x,
                    k,
                    None,
                    ConvSpec {
                        stride: 2,
                        padding: 1,
                        dilation: 1,
                    },
                )?;
                projected_loss(g, y, 13)
            },
            &kernel,
            1e-5,
            64,
            14,
        )
        .unwrap();
        assert!(err < 1e-5, "conv kernel error {err}");
    }

    #[test]
    fn batch_norm_input_gradient_checks() {
        let input = random_tensor(&[3, 4, 5, 5], 20, 2.0);
        let err = grad_check(
            |g, x| {
                let gamma = g.leaf(random_tensor(&[4], 21, 1.0));
                let beta = g.leaf(random_tensor(&[4], 22, 1.0));
                let (y, _) = g.batch_norm(
                    x,
                    gamma,
                    beta,
                    &[0.0; 4],
                    &[1.0; 4],
                    crate::graph::Mode::Train,
                    0.1,
                    1e-5,
                )?;
                projected_loss(g, y, 23)
            },
            &input,
            1e-5,
            64,
            24,
        )
        .unwrap();
        assert!(err < 1e-4, "batch norm error {err}");
    }

    #[test]
    fn max_pool_gradient_checks_away_from_ties() {
        let input = random_tensor(&[2, 2, 6, 6], 30, 1.0);
        let err = grad_check(
            |g, x| {
                let y = g.max_pool(x, 2, 2, 0)?;
                projected_loss(g, y, 31)
            },
            &input,
            1e-5,
            72,
            32,
        )
        .unwrap();
        assert!(err < 1e-4, "max pool error {err}");
    }

    #[test]
    fn sigmoid_gradient_checks_tightly() {
        let input = random_tensor(&[4, 7], 40, 3.0);
        let err = grad_check(
            |g, x| {
                let y = g.sigmoid(x);
                projected_loss(g, y, 41)
            },
            &input,
            1e-5,
            28,
            42,
        )
        .unwrap();
        assert!(err < 1e-6, "sigmoid error {err}");
    }

    #[test]
    fn cross_entropy_gradient_matches_softmax_minus_target() {
        let logits = random_tensor(&[4, 3], 50, 2.0);
        let mut targets = vec![0.0; 12];
        for (r, c) in [(0usize, 1usize), (1, 0), (2, 2), (3, 1)] {
            targets[r * 3 + c] = 1.0;
        }
        let targets = Tensor::from_vec(&[4, 3], targets).unwrap();

        // Closed form.
        let probs = crate::tensor::softmax_rows(&logits);
        let expected: Vec<f64> = probs
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&p, &t)| (p - t) / 4.0)
            .collect();
        let mut g = Graph::new();
        let x = g.leaf(logits.clone().with_grad());
        let loss = g.softmax_cross_entropy(x, &targets).unwrap();
        let grads = g.backward(loss).unwrap();
        for (a, e) in grads.node(x).unwrap().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }

        // And against finite differences.
        let t2 = targets.clone();
        let err = grad_check(
            move |g, x| g.softmax_cross_entropy(x, &t2),
            &logits,
            1e-5,
            12,
            51,
        )
        .unwrap();
        assert!(err < 1e-5, "cross entropy error {err}");
    }

    #[test]
    fn param_gradients_check_through_a_small_stack() {
        let mut params = Params::<f64>::new();
        let mut rng = SplitMix64::new(60);
        let w_data: Vec<f64> = (0..6 * 4).map(|_| rng.next_symmetric(0.8)).collect();
        let w = params
            .add("w", Tensor::from_vec(&[6, 4], w_data).unwrap(), true)
            .unwrap();
        let b = params.add("b", Tensor::zeros(&[4]), true).unwrap();
        let input = random_tensor(&[3, 6], 61, 1.0);
        let mut targets = vec![0.0; 12];
        targets[1] = 1.0;
        targets[4] = 1.0;
        targets[2 * 4 + 3] = 1.0;
        let targets = Tensor::from_vec(&[3, 4], targets).unwrap();

        let err = grad_check_params(
            move |g, p| {
                let x = g.leaf(input.clone());
                let wn = g.param(p, w);
                let bn = g.param(p, b);
                let y = g.dense(x, wn, bn)?;
                g.softmax_cross_entropy(y, &targets)
            },
            &mut params,
            1e-5,
            24,
            62,
        )
        .unwrap();
        assert!(err < 1e-6, "param stack error {err}");
    }
}
