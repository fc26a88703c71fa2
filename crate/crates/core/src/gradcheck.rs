//! Central finite-difference gradient verification.
//!
//! The numeric side only re-runs forward passes, so it stays independent of
//! every backward formula it is used to check.

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
#[allow(unused_imports)]
use num_traits::Float as _;


/// Builds the scalar loss from leaf nodes bound to `inputs`, in order.
pub type BuildFn<'a, T> = dyn Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId> + 'a;

fn eval<T: Scalar>(build: &BuildFn<'_, T>, inputs: &[Tensor<T>]) -> Result<T> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    g.value(loss).as_scalar()
}

/// Central-difference gradient of the built loss w.r.t. `inputs[which]`.
pub fn numerical_grad<T: Scalar>(
    build: &BuildFn<'_, T>,
    inputs: &[Tensor<T>],
    which: usize,
    step: f64,
) -> Result<Tensor<T>> {
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    let n = probe[which].numel();
    let mut grad = Tensor::zeros(probe[which].shape());
    for i in 0..n {
        let orig = probe[which].data()[i];
        probe[which].data_mut()[i] = orig + T::of(step);
        let plus = eval(build, &probe)?.as_f64();
        probe[which].data_mut()[i] = orig - T::of(step);
        let minus = eval(build, &probe)?.as_f64();
        probe[which].data_mut()[i] = orig;
        grad.data_mut()[i] = T::of((plus - minus) / (2.0 * step));
    }
    Ok(grad)
}

/// Relative L2 distance between two gradients.
pub fn grad_rel_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    let mut diff = 0.0;
    for (&a, &n) in analytic.data().iter().zip(numeric.data().iter()) {
        let d = a.as_f64() - n.as_f64();
        diff += d * d;
    }
    let scale = analytic.sq_norm().max(numeric.sq_norm()).max(1e-24);
    (diff / scale).sqrt()
}

/// Compare analytic and numeric gradients for every input of the built
/// loss. Returns the worst relative error across inputs.
pub fn check_gradients<T: Scalar>(
    build: &BuildFn<'_, T>,
    inputs: &[Tensor<T>],
    step: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let mut worst = 0.0f64;
    for (which, &id) in ids.iter().enumerate() {
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));
        let numeric = numerical_grad(build, inputs, which, step)?;
        // A structurally zero gradient (e.g. a bias absorbed by a following
        // normalization) leaves only cancellation noise on the numeric
        // side; relative comparison is meaningless there.
        let floor = 1e-5f64;
        if analytic.sq_norm() < floor * floor && numeric.sq_norm() < floor * floor {
            continue;
        }
        let err = grad_rel_error(&analytic, &numeric);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.normal())
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn elementwise_chain_grads() {
        let mut rng = Rng::new(21);
        let a = rand_tensor(&mut rng, &[3, 4, 4]);
        let b = rand_tensor(&mut rng, &[3, 4, 4]);
        let build: &BuildFn<'_, f64> = &|g, ids| {
            let s = g.mul(ids[0], ids[1])?;
            let t = g.tanh(s);
            let u = g.sigmoid(t);
            let v = g.leaky_relu(u, 0.1);
            Ok(g.sum_all(v))
        };
        let err = check_gradients(build, &[a, b], 1e-6).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn conv_and_norm_grads() {
        let mut rng = Rng::new(22);
        let x = rand_tensor(&mut rng, &[2, 6, 6]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let build: &BuildFn<'_, f64> = &|g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1)?;
            let n = g.instance_norm(y, 1e-5)?;
            let r = g.relu(n);
            let sq = g.mul(r, r)?;
            Ok(g.sum_all(sq))
        };
        let err = check_gradients(build, &[x, w, b], 1e-6).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn strided_conv_grads() {
        let mut rng = Rng::new(23);
        let x = rand_tensor(&mut rng, &[2, 8, 8]);
        let w = rand_tensor(&mut rng, &[4, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        let build: &BuildFn<'_, f64> = &|g, ids| {
            let y = g.conv2d(ids[0], ids[1], ids[2], 2, 1)?;
            let sq = g.mul(y, y)?;
            Ok(g.sum_all(sq))
        };
        let err = check_gradients(build, &[x, w, b], 1e-6).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn pooling_and_gate_grads() {
        let mut rng = Rng::new(24);
        let x = rand_tensor(&mut rng, &[3, 4, 4]);
        let build: &BuildFn<'_, f64> = &|g, ids| {
            let x = ids[0];
            let ga = g.global_avg_pool(x)?;
            let gm = g.global_max_pool(x)?;
            let gate = g.add(ga, gm)?;
            let gate = g.sigmoid(gate);
            let gated = g.mul_channel_gate(x, gate)?;
            let cm = g.channel_mean(gated)?;
            let cx = g.channel_max(gated)?;
            let cat = g.concat_channels(&[cm, cx])?;
            let pooled = g.avg_pool2(cat)?;
            let up = g.upsample_nearest2(pooled)?;
            let sgate = g.channel_mean(up)?;
            let sgate = g.sigmoid(sgate);
            let out = g.mul_spatial_gate(gated, sgate)?;
            let sq = g.mul(out, out)?;
            Ok(g.sum_all(sq))
        };
        let err = check_gradients(build, &[x], 1e-6).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn fusion_style_ops_grads() {
        let mut rng = Rng::new(25);
        let logits = rand_tensor(&mut rng, &[4]);
        let m0 = rand_tensor(&mut rng, &[2, 3, 3]);
        let m1 = rand_tensor(&mut rng, &[2, 3, 3]);
        let m2 = rand_tensor(&mut rng, &[2, 3, 3]);
        let m3 = rand_tensor(&mut rng, &[2, 3, 3]);
        let mask = [true, false, true, true];
        let build: &BuildFn<'_, f64> = &|g, ids| {
            let sm = g.softmax(ids[0])?;
            let omega0 = g.add_scalar(sm, 1e-5);
            let omega = g.mask_renorm(omega0, &mask)?;
            let fused = g.weighted_sum(&ids[1..5], omega)?;
            let sq = g.mul(fused, fused)?;
            Ok(g.sum_all(sq))
        };
        let err = check_gradients(build, &[logits, m0, m1, m2, m3], 1e-6).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn linear_and_slice_grads() {
        let mut rng = Rng::new(26);
        let w = rand_tensor(&mut rng, &[6, 5]);
        let b = rand_tensor(&mut rng, &[6]);
        let x = rand_tensor(&mut rng, &[5]);
        let v = rand_tensor(&mut rng, &[4]);
        let m = rand_tensor(&mut rng, &[4, 6]);
        let mb = rand_tensor(&mut rng, &[6]);
        let build: &BuildFn<'_, f64> = &|g, ids| {
            let y = g.linear(ids[0], ids[1], ids[2])?;
            let z = g.vecmat(ids[3], ids[4], ids[5])?;
            let s = g.add(y, z)?;
            let head = g.slice1d(s, 0, 3)?;
            let tail = g.slice1d(s, 3, 3)?;
            let p = g.mul(head, tail)?;
            Ok(g.sum_all(p))
        };
        let err = check_gradients(build, &[w, b, x, v, m, mb], 1e-6).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn loss_style_grads() {
        let mut rng = Rng::new(27);
        let a = rand_tensor(&mut rng, &[1, 4, 4]);
        let b = rand_tensor(&mut rng, &[1, 4, 4]);
        let build: &BuildFn<'_, f64> = &|g, ids| {
            let l1 = g.mean_abs_diff(ids[0], ids[1])?;
            let sc = g.scale(l1, 10.0);
            let d = g.sub(ids[0], ids[1])?;
            let sq = g.mul(d, d)?;
            let s2 = g.sum_all(sq);
            g.add(sc, s2)
        };
        let err = check_gradients(build, &[a, b], 1e-6).unwrap();
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn frozen_subtree_gets_no_grad() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::full(&[2, 2], 1.5));
        let w = g.leaf(Tensor::<f64>::full(&[2, 2], 2.0));
        let y = g.mul(x, w).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }
}
