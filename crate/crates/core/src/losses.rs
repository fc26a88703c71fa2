//! Supervised reconstruction loss: both decode branches are pulled toward
//! the target with an L1 term and a perceptual term.
//!
//! The perceptual distance runs on a fixed, seeded convolutional feature
//! net instead of a pretrained backbone; random frozen features keep the
//! metric reproducible without downloading weights.

use alloc::vec::Vec;

use crate::backbone::ConvLayer;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loss term weights; both branches share them.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights<T> {
    pub lambda_r: T,
    pub lambda_p: T,
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        LossWeights {
            lambda_r: T::of(10.0),
            lambda_p: T::of(0.01),
        }
    }
}

/// Fixed five-layer feature extractor. Parameters are sampled once from the
/// seed and never trained; identical seeds give identical parameters.
#[derive(Debug, Clone)]
pub struct FrozenFeatureNet<T> {
    layers: Vec<ConvLayer<T>>,
    seed: u64,
}

/// Channel plan of the frozen net.
const FROZEN_PLAN: [(usize, usize); 5] = [(1, 8), (8, 16), (16, 32), (32, 32), (32, 32)];
/// Taps are collected after these layers (1-based).
const TAP_LAYERS: [usize; 2] = [2, 4];

impl<T: Scalar> FrozenFeatureNet<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let layers = FROZEN_PLAN
            .iter()
            .map(|&(cin, cout)| ConvLayer::new(&mut rng, cin, cout, 3, 1, 1))
            .collect();
        FrozenFeatureNet { layers, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn bind(&self, g: &mut Graph<T>) -> FrozenNetNodes {
        FrozenNetNodes {
            convs: self
                .layers
                .iter()
                .map(|l| {
                    let w = g.constant(l.weight.clone());
                    let b = g.constant(l.bias.clone());
                    (w, b)
                })
                .collect(),
        }
    }
}

pub struct FrozenNetNodes {
    convs: Vec<(NodeId, NodeId)>,
}

impl FrozenNetNodes {
    /// Feature maps after the tap layers. Pooling halves the resolution
    /// between layers whenever the spatial dims are still even.
    pub fn taps<T: Scalar>(&self, g: &mut Graph<T>, image: NodeId) -> Result<Vec<NodeId>> {
        let mut taps = Vec::new();
        let mut x = image;
        for (idx, &(w, b)) in self.convs.iter().enumerate() {
            let layer_no = idx + 1;
            let y = g.conv2d(x, w, b, 1, 1)?;
            x = g.relu(y);
            if TAP_LAYERS.contains(&layer_no) {
                taps.push(x);
            }
            if layer_no < self.convs.len() {
                let (_, h, wd) = g.value(x).dims3()?;
                if h % 2 == 0 && wd % 2 == 0 && h > 1 && wd > 1 {
                    x = g.avg_pool2(x)?;
                }
            }
        }
        Ok(taps)
    }
}

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(shape_err!("loss inputs: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// Mean absolute difference between two images.
pub fn l1_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    check_pair(a, b)?;
    let mut g = Graph::new();
    let an = g.constant(a.clone());
    let bn = g.constant(b.clone());
    let l = g.mean_abs_diff(an, bn)?;
    g.value(l).as_scalar()
}

/// Sum over tap layers of the mean L1 distance between the frozen features
/// of the two images.
pub fn perceptual_loss<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    net: &FrozenFeatureNet<T>,
) -> Result<T> {
    check_pair(a, b)?;
    let mut g = Graph::new();
    let nodes = net.bind(&mut g);
    let an = g.constant(a.clone());
    let bn = g.constant(b.clone());
    let l = perceptual_on_graph(&mut g, &nodes, an, bn)?;
    g.value(l).as_scalar()
}

pub fn perceptual_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    net: &FrozenNetNodes,
    a: NodeId,
    b: NodeId,
) -> Result<NodeId> {
    let taps_a = net.taps(g, a)?;
    let taps_b = net.taps(g, b)?;
    let mut total: Option<NodeId> = None;
    for (&ta, &tb) in taps_a.iter().zip(taps_b.iter()) {
        let d = g.mean_abs_diff(ta, tb)?;
        total = Some(match total {
            None => d,
            Some(t) => g.add(t, d)?,
        });
    }
    total.ok_or_else(|| shape_err!("frozen net produced no taps"))
}

/// Scalar node handles for the four loss terms and their weighted total.
pub struct ReconstructionNodes {
    pub total: NodeId,
    pub l1_plain: NodeId,
    pub p_plain: NodeId,
    pub l1_att: NodeId,
    pub p_att: NodeId,
}

/// `lambda_r*L1(plain,tgt) + lambda_p*P(plain,tgt) + lambda_r*L1(att,tgt)
/// + lambda_p*P(att,tgt)` on the graph.
pub fn reconstruction_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    net: &FrozenNetNodes,
    x_plain: NodeId,
    x_attended: NodeId,
    x_tgt: NodeId,
    weights: LossWeights<T>,
) -> Result<ReconstructionNodes> {
    let l1_plain = g.mean_abs_diff(x_plain, x_tgt)?;
    let p_plain = perceptual_on_graph(g, net, x_plain, x_tgt)?;
    let l1_att = g.mean_abs_diff(x_attended, x_tgt)?;
    let p_att = perceptual_on_graph(g, net, x_attended, x_tgt)?;
    let mut total = g.scale(l1_plain, weights.lambda_r);
    let t = g.scale(p_plain, weights.lambda_p);
    total = g.add(total, t)?;
    let t = g.scale(l1_att, weights.lambda_r);
    total = g.add(total, t)?;
    let t = g.scale(p_att, weights.lambda_p);
    total = g.add(total, t)?;
    Ok(ReconstructionNodes {
        total,
        l1_plain,
        p_plain,
        l1_att,
        p_att,
    })
}

/// Single-branch variant used during pretraining, where only the plain
/// decode exists.
pub fn single_branch_on_graph<T: Scalar>(
    g: &mut Graph<T>,
    net: &FrozenNetNodes,
    x: NodeId,
    x_tgt: NodeId,
    weights: LossWeights<T>,
) -> Result<(NodeId, NodeId, NodeId)> {
    let l1 = g.mean_abs_diff(x, x_tgt)?;
    let p = perceptual_on_graph(g, net, x, x_tgt)?;
    let mut total = g.scale(l1, weights.lambda_r);
    let t = g.scale(p, weights.lambda_p);
    total = g.add(total, t)?;
    Ok((total, l1, p))
}

/// Per-term values of the two-branch loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub l1_plain: T,
    pub p_plain: T,
    pub l1_att: T,
    pub p_att: T,
    pub total: T,
}

/// Evaluate the two-branch reconstruction loss for concrete tensors.
pub fn reconstruction_loss<T: Scalar>(
    x_plain: &Tensor<T>,
    x_attended: &Tensor<T>,
    x_tgt: &Tensor<T>,
    weights: LossWeights<T>,
    net: &FrozenFeatureNet<T>,
) -> Result<LossBreakdown<T>> {
    check_pair(x_plain, x_tgt)?;
    check_pair(x_attended, x_tgt)?;
    let mut g = Graph::new();
    let nodes = net.bind(&mut g);
    let xp = g.constant(x_plain.clone());
    let xa = g.constant(x_attended.clone());
    let xt = g.constant(x_tgt.clone());
    let r = reconstruction_on_graph(&mut g, &nodes, xp, xa, xt, weights)?;
    Ok(LossBreakdown {
        l1_plain: g.value(r.l1_plain).as_scalar()?,
        p_plain: g.value(r.p_plain).as_scalar()?,
        l1_att: g.value(r.l1_att).as_scalar()?,
        p_att: g.value(r.p_att).as_scalar()?,
        total: g.value(r.total).as_scalar()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_image(rng: &mut Rng, h: usize, w: usize) -> Tensor<f64> {
        let data = (0..h * w).map(|_| rng.range(-1.0, 1.0)).collect();
        Tensor::from_vec(&[1, h, w], data).unwrap()
    }

    #[test]
    fn l1_basics() {
        let mut rng = Rng::new(31);
        let a = rand_image(&mut rng, 8, 8);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);

        let zero = Tensor::<f64>::zeros(&[1, 8, 8]);
        let half = Tensor::<f64>::full(&[1, 8, 8], 0.5);
        assert!((l1_loss(&zero, &half).unwrap() - 0.5).abs() < 1e-12);

        let b = rand_image(&mut rng, 8, 8);
        let got = l1_loss(&a, &b).unwrap();
        // independent elementwise oracle
        let want: f64 = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / 64.0;
        assert!((got - want).abs() < 1e-7);

        let c = rand_image(&mut rng, 4, 4);
        assert!(l1_loss(&a, &c).is_err());
    }

    #[test]
    fn frozen_net_is_seed_deterministic() {
        let n1 = FrozenFeatureNet::<f64>::new(99);
        let n2 = FrozenFeatureNet::<f64>::new(99);
        let n3 = FrozenFeatureNet::<f64>::new(100);
        let flat = |n: &FrozenFeatureNet<f64>| {
            let mut v = alloc::vec::Vec::new();
            for l in &n.layers {
                v.extend_from_slice(l.weight.data());
            }
            v
        };
        assert_eq!(flat(&n1), flat(&n2));
        assert_ne!(flat(&n1), flat(&n3));
    }

    #[test]
    fn perceptual_zero_symmetric_positive() {
        let mut rng = Rng::new(32);
        let net = FrozenFeatureNet::<f64>::new(7);
        let a = rand_image(&mut rng, 16, 16);
        let b = rand_image(&mut rng, 16, 16);

        assert_eq!(perceptual_loss(&a, &a, &net).unwrap(), 0.0);
        let ab = perceptual_loss(&a, &b, &net).unwrap();
        let ba = perceptual_loss(&b, &a, &net).unwrap();
        assert!((ab - ba).abs() < 1e-12);

        // strictly positive for distinct random inputs (randomized check)
        let mut positive = 0;
        let trials = 200;
        for _ in 0..trials {
            let x = rand_image(&mut rng, 8, 8);
            let y = rand_image(&mut rng, 8, 8);
            if perceptual_loss(&x, &y, &net).unwrap() > 0.0 {
                positive += 1;
            }
        }
        assert!(positive >= trials - 1, "only {positive}/{trials} positive");
    }

    #[test]
    fn reconstruction_matches_hand_arithmetic() {
        let mut rng = Rng::new(33);
        let net = FrozenFeatureNet::<f64>::new(7);
        let tgt = rand_image(&mut rng, 8, 8);
        let shifted = tgt.map(|v| v + 0.1);
        let w = LossWeights::default();

        // identical branches and target: zero everywhere
        let z = reconstruction_loss(&tgt, &tgt, &tgt, w, &net).unwrap();
        assert_eq!(z.total, 0.0);

        // plain == target, attended off by 0.1: the L1 part is exactly
        // lambda_r * 0.1
        let r = reconstruction_loss(&tgt, &shifted, &tgt, w, &net).unwrap();
        assert!((r.l1_plain - 0.0).abs() < 1e-12);
        assert!((r.l1_att - 0.1).abs() < 1e-9);
        let l1_portion = w.lambda_r * (r.l1_plain + r.l1_att);
        assert!((l1_portion - 1.0).abs() < 1e-9, "l1 portion {l1_portion}");
        let want_total = l1_portion + w.lambda_p * (r.p_plain + r.p_att);
        assert!((r.total - want_total).abs() < 1e-9);

        // doubling lambda_r doubles exactly the L1 portion
        let w2 = LossWeights {
            lambda_r: 20.0,
            lambda_p: 0.01,
        };
        let r2 = reconstruction_loss(&tgt, &shifted, &tgt, w2, &net).unwrap();
        let l1_portion2 = w2.lambda_r * (r2.l1_plain + r2.l1_att);
        assert!((l1_portion2 - 2.0 * l1_portion).abs() < 1e-9);
        assert!((r2.p_att - r.p_att).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_nonnegative_and_gradients_reach_both_branches() {
        let mut rng = Rng::new(34);
        let net = FrozenFeatureNet::<f64>::new(7);
        let tgt = rand_image(&mut rng, 8, 8);
        let xp = rand_image(&mut rng, 8, 8);
        let xa = rand_image(&mut rng, 8, 8);
        let w = LossWeights::default();

        let r = reconstruction_loss(&xp, &xa, &tgt, w, &net).unwrap();
        assert!(r.total >= 0.0);

        let mut g = Graph::new();
        let nodes = net.bind(&mut g);
        let xp_n = g.leaf(xp);
        let xa_n = g.leaf(xa);
        let tgt_n = g.constant(tgt);
        let rn = reconstruction_on_graph(&mut g, &nodes, xp_n, xa_n, tgt_n, w).unwrap();
        let grads = g.backward(rn.total).unwrap();
        let gp = grads.get(xp_n).unwrap().sq_norm();
        let ga = grads.get(xa_n).unwrap().sq_norm();
        assert!(gp > 0.0, "plain branch grad norm {gp}");
        assert!(ga > 0.0, "attended branch grad norm {ga}");
    }

    #[test]
    fn reconstruction_gradient_matches_finite_differences() {
        use crate::gradcheck::{check_gradients, BuildFn};
        let mut rng = Rng::new(35);
        let net = FrozenFeatureNet::<f64>::new(7);
        let tgt = rand_image(&mut rng, 8, 8);
        let xp = rand_image(&mut rng, 8, 8);
        let xa = rand_image(&mut rng, 8, 8);
        let w = LossWeights::default();

        let build: &BuildFn<'_, f64> = &|g, ids| {
            let nodes = net.bind(g);
            let tgt_n = g.constant(tgt.clone());
            let r = reconstruction_on_graph(g, &nodes, ids[0], ids[1], tgt_n, w)?;
            Ok(r.total)
        };
        let err = check_gradients(build, &[xp, xa], 1e-6).unwrap();
        assert!(err < 1e-4, "rel err {err}");
    }
}
