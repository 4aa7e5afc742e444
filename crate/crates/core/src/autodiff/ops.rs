//! Graph-free forward evaluation of the primitives.

use rand::Rng;

use super::{BnOptions, BnStats, Graph, Mode, Padding, PoolMode, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Elementwise nonlinearity selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

fn eval(build: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    Ok(g.value(out).clone())
}

pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    eval(|g| {
        let x = g.input(input.clone());
        let k = g.input(kernel.clone());
        let b = bias.map(|b| g.input(b.clone()));
        g.conv2d(x, k, b, stride, padding)
    })
}

pub fn affine(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    eval(|g| {
        let (x, w, b) = (g.input(input.clone()), g.input(weight.clone()), g.input(bias.clone()));
        g.affine(x, w, b)
    })
}

pub fn batch_norm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &mut BnStats,
    mode: Mode,
    options: BnOptions,
) -> Result<Tensor> {
    eval(|g| {
        let (x, ga, be) = (g.input(input.clone()), g.input(gamma.clone()), g.input(beta.clone()));
        g.batch_norm(x, ga, be, stats, mode, options)
    })
}

pub fn activation(input: &Tensor, kind: Activation) -> Tensor {
    eval(|g| {
        let x = g.input(input.clone());
        Ok(match kind {
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
        })
    })
    .expect("elementwise activations cannot fail")
}

pub fn softmax(input: &Tensor) -> Result<Tensor> {
    eval(|g| {
        let x = g.input(input.clone());
        g.softmax(x)
    })
}

pub fn pool(input: &Tensor, mode: PoolMode) -> Result<Tensor> {
    eval(|g| {
        let x = g.input(input.clone());
        g.pool(x, mode)
    })
}

pub fn concat_channels(inputs: &[Tensor]) -> Result<Tensor> {
    eval(|g| {
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        g.concat_channels(&vars)
    })
}

pub fn broadcast_mul(input: &Tensor, gate: &Tensor) -> Result<Tensor> {
    eval(|g| {
        let (x, m) = (g.input(input.clone()), g.input(gate.clone()));
        g.broadcast_mul(x, m)
    })
}

pub fn dropout<R: Rng + ?Sized>(input: &Tensor, rate: f64, mode: Mode, rng: &mut R) -> Result<Tensor> {
    eval(|g| {
        let x = g.input(input.clone());
        g.dropout(x, rate, mode, rng)
    })
}

pub fn weighted_cross_entropy(probabilities: &Tensor, labels: &[usize], class_weights: &[f64]) -> Result<f64> {
    eval(|g| {
        let p = g.input(probabilities.clone());
        g.weighted_cross_entropy(p, labels, class_weights)
    })
    .map(|t| t.data()[0])
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Graph;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Direct nested-loop convolution (valid padding).
    fn conv_valid_oracle(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
        let [b, h, w, ci] = x.nhwc().unwrap();
        let [kh, kw, _, co] = k.nhwc().unwrap();
        let (oh, ow) = ((h - kh) / stride + 1, (w - kw) / stride + 1);
        let mut out = Tensor::zeros([b, oh, ow, co]);
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..co {
                        let mut s = 0.0;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                for i in 0..ci {
                                    s += x.at(&[bi, oy * stride + ky, ox * stride + kx, i]) * k.at(&[ky, kx, i, o]);
                                }
                            }
                        }
                        out.data_mut()[((bi * oh + oy) * ow + ox) * co + o] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 2, 2, 1], &[1., 2., 3., 4.]);
        let y = conv2d(&x, &t(&[1, 1, 1, 1], &[1.]), None, 1, Padding::Valid).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_window_sums() {
        let x = t(&[1, 2, 2, 1], &[1., 2., 3., 4.]);
        let k = Tensor::full([2, 2, 1, 1], 1.0);
        let y = conv2d(&x, &k, None, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), conv_valid_oracle(&x, &k, 1).data());
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv_same_seven_by_seven_keeps_extent() {
        let x = Tensor::full([1, 7, 7, 2], 0.5);
        let k = Tensor::full([7, 7, 2, 1], 0.1);
        assert_eq!(conv2d(&x, &k, None, 1, Padding::Same).unwrap().shape(), &[1, 7, 7, 1]);
    }

    #[test]
    fn conv_matches_loop_oracle_with_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 7, 6, 3], &mut rng);
        let k = random(&[3, 2, 3, 4], &mut rng);
        for stride in 1..=3 {
            let y = conv2d(&x, &k, None, stride, Padding::Valid).unwrap();
            assert!(y.max_abs_diff(&conv_valid_oracle(&x, &k, stride)) < 1e-12);
        }
    }

    #[test]
    fn same_padding_puts_extra_row_at_bottom() {
        // 2×2 kernel with stride 1 on 3×3 needs one padded row: it goes at the bottom,
        // so output (0,0) covers input rows 0..2 exactly.
        let x = Tensor::from_fn([1, 3, 3, 1], |i| i as f64 + 1.0);
        let k = Tensor::full([2, 2, 1, 1], 1.0);
        let y = conv2d(&x, &k, None, 1, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 1]);
        assert_eq!(y.at(&[0, 0, 0, 0]), 1. + 2. + 4. + 5.);
        assert_eq!(y.at(&[0, 2, 2, 0]), 9.0);
        // stride 2: ceil(5 / 2) = 3
        let x = Tensor::full([1, 5, 5, 1], 1.0);
        let y = conv2d(&x, &Tensor::full([3, 3, 1, 1], 1.0), None, 2, Padding::Same).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 1]);
    }

    #[test]
    fn conv_channel_mismatch_names_axes() {
        let err = conv2d(&Tensor::zeros([1, 4, 4, 3]), &Tensor::zeros([3, 3, 2, 1]), None, 1, Padding::Same).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("axis (3)") && msg.contains("axis (2)"), "{msg}");
    }

    #[test]
    fn affine_examples() {
        let x = t(&[1, 2], &[1., 2.]);
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        assert_eq!(affine(&x, &eye, &Tensor::zeros([2])).unwrap(), x);
        assert_eq!(affine(&x, &eye, &t(&[2], &[3., 4.])).unwrap().data(), &[4., 6.]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (x, w, b) = (random(&[2, 3], &mut rng), random(&[3, 2], &mut rng), random(&[2], &mut rng));
        let y = affine(&x, &w, &b).unwrap();
        for i in 0..2 {
            for u in 0..2 {
                let mut s = b.data()[u];
                for d in 0..3 {
                    s += x.at(&[i, d]) * w.at(&[d, u]);
                }
                assert!((y.at(&[i, u]) - s).abs() < 1e-14);
            }
        }
        assert!(affine(&x, &random(&[2, 2], &mut rng), &b).is_err());
    }

    #[test]
    fn batch_norm_examples() {
        let opts = BnOptions::default();
        // per-channel zero mean, unit variance already
        let x = t(&[2, 2], &[1., -1., -1., 1.]);
        let mut st = BnStats::new(2);
        let y = batch_norm(&x, &Tensor::full([2], 1.0), &Tensor::zeros([2]), &mut st, Mode::Train, opts).unwrap();
        let scale = 1.0 / (1.0 + opts.epsilon).sqrt();
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| (a - b * scale).abs() < 1e-15));

        let x = Tensor::full([3, 2, 2, 2], 7.0);
        let beta = t(&[2], &[0.25, -0.5]);
        let y = batch_norm(&x, &Tensor::full([2], 3.0), &beta, &mut BnStats::new(2), Mode::Train, opts).unwrap();
        for px in y.data().chunks(2) {
            assert_eq!(px, beta.data());
        }

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[4, 2], &mut rng);
        let (gamma, beta) = (random(&[2], &mut rng), random(&[2], &mut rng));
        let mut st = BnStats::new(2);
        let y = batch_norm(&x, &gamma, &beta, &mut st, Mode::Train, opts).unwrap();
        for c in 0..2 {
            let col: Vec<f64> = (0..4).map(|i| x.at(&[i, c])).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            for i in 0..4 {
                let want = gamma.data()[c] * (col[i] - mean) / (var + 1e-5).sqrt() + beta.data()[c];
                assert!((y.at(&[i, c]) - want).abs() < 1e-12);
            }
            assert!((st.mean[c] - 0.1 * mean).abs() < 1e-15);
            assert!((st.var[c] - (0.9 + 0.1 * var)).abs() < 1e-15);
        }
        // infer mode uses the running statistics
        let y = batch_norm(&x, &gamma, &beta, &mut st.clone(), Mode::Infer, opts).unwrap();
        let want = gamma.data()[0] * (x.at(&[0, 0]) - st.mean[0]) / (st.var[0] + 1e-5).sqrt() + beta.data()[0];
        assert!((y.at(&[0, 0]) - want).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_rejects_single_sample_training() {
        let r = batch_norm(
            &Tensor::zeros([1, 3, 3, 2]),
            &Tensor::full([2], 1.0),
            &Tensor::zeros([2]),
            &mut BnStats::new(2),
            Mode::Train,
            BnOptions::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn activation_examples() {
        let y = activation(&t(&[3], &[0., 6., -3.]), Activation::Sigmoid);
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] - 0.997527).abs() < 1e-6);
        assert!((y.data()[1] - 1.0 / (1.0 + (-6f64).exp())).abs() < 1e-15);
        let r = activation(&t(&[2], &[-3., 3.]), Activation::Relu);
        assert_eq!(r.data(), &[0., 3.]);
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&Tensor::zeros([1, 3])).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let a = softmax(&t(&[1, 3], &[1., 2., 3.])).unwrap();
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        for (i, want) in [0.09003, 0.24473, 0.66524].iter().enumerate() {
            assert!((a.data()[i] - want).abs() < 1e-5);
            assert!((a.data()[i] - ((i + 1) as f64).exp() / z).abs() < 1e-15);
        }
        let shifted = softmax(&t(&[1, 3], &[101., 102., 103.])).unwrap();
        assert!(a.max_abs_diff(&shifted) < 1e-14);
        assert!(softmax(&Tensor::zeros([2, 1])).is_err());
    }

    #[test]
    fn pool_examples() {
        let x = t(&[1, 2, 2, 1], &[1., 2., 3., 4.]);
        assert_eq!(pool(&x, PoolMode::GlobalAvg).unwrap().data(), &[2.5]);
        assert_eq!(pool(&x, PoolMode::GlobalMax).unwrap().data(), &[4.0]);
        let x = t(&[1, 1, 1, 2], &[2., 4.]);
        assert_eq!(pool(&x, PoolMode::ChannelAvg).unwrap().data(), &[3.0]);
        assert_eq!(pool(&x, PoolMode::ChannelMax).unwrap().data(), &[4.0]);
        let c = Tensor::full([2, 3, 3, 4], -1.25);
        for mode in [PoolMode::GlobalAvg, PoolMode::GlobalMax, PoolMode::ChannelAvg, PoolMode::ChannelMax] {
            assert!(pool(&c, mode).unwrap().data().iter().all(|&v| v == -1.25));
        }
        assert_eq!(pool(&c, PoolMode::GlobalMax).unwrap().shape(), &[2, 1, 1, 4]);
        assert_eq!(pool(&c, PoolMode::ChannelAvg).unwrap().shape(), &[2, 3, 3, 1]);
    }

    #[test]
    fn concat_examples() {
        let a = Tensor::full([1, 2, 2, 1], 1.0);
        let b = Tensor::full([1, 2, 2, 1], 2.0);
        assert_eq!(concat_channels(&[a.clone()]).unwrap(), a);
        let ab = concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab.slice_channels(0, 1).unwrap(), a);
        assert_eq!(ab.slice_channels(1, 1).unwrap(), b);
        assert!(concat_channels(&[a, Tensor::zeros([1, 3, 2, 1])]).is_err());
    }

    #[test]
    fn broadcast_mul_examples() {
        let x = Tensor::from_fn([1, 2, 2, 2], |i| i as f64 + 1.0);
        assert_eq!(broadcast_mul(&x, &Tensor::full([1, 1, 1, 2], 1.0)).unwrap(), x);
        let half = broadcast_mul(&x, &Tensor::full([1, 2, 2, 1], 0.5)).unwrap();
        assert!(half.data().iter().zip(x.data()).all(|(h, v)| *h == v * 0.5));
        let gated = broadcast_mul(&x, &t(&[1, 1, 1, 2], &[0., 1.])).unwrap();
        assert!(gated.slice_channels(0, 1).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(gated.slice_channels(1, 1).unwrap(), x.slice_channels(1, 1).unwrap());
        assert!(broadcast_mul(&x, &Tensor::full([1, 2, 1, 1], 1.0)).is_err());
    }

    #[test]
    fn dropout_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn([4, 5], |i| i as f64);
        assert_eq!(dropout(&x, 0.0, Mode::Train, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.0, Mode::Infer, &mut rng).unwrap(), x);
        assert_eq!(dropout(&x, 0.5, Mode::Infer, &mut rng).unwrap(), x);
        let ones = Tensor::full([100_000], 1.0);
        let y = dropout(&ones, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = y.data().iter().sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(dropout(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn weighted_cross_entropy_examples() {
        let uniform = Tensor::full([4, 3], 1.0 / 3.0);
        let l = weighted_cross_entropy(&uniform, &[0, 1, 2, 0], &[1.0; 3]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        let onehot = t(&[2, 3], &[1., 0., 0., 0., 0., 1.]);
        assert_eq!(weighted_cross_entropy(&onehot, &[0, 2], &[1.0; 3]).unwrap(), 0.0);
        let p = t(&[2, 3], &[0.5, 0.25, 0.25, 0.25, 0.5, 0.25]);
        let l = weighted_cross_entropy(&p, &[0, 1], &[2.0, 1.0, 1.0]).unwrap();
        assert!((l - 1.5 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 1.0397).abs() < 1e-4);
        assert!(matches!(
            weighted_cross_entropy(&p, &[0, 3], &[1.0; 3]),
            Err(crate::Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
        // a zero probability is clipped, not infinite
        let l = weighted_cross_entropy(&onehot, &[1, 2], &[1.0; 3]).unwrap();
        assert!((l - (-(1e-12f64).ln()) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn backward_square_and_fan_out() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[6.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn([1, 2, 2, 3], |i| i as f64), true);
        let cat = g.concat_channels(&[x, x]).unwrap();
        let s = g.sum(cat);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn backward_rejects_non_scalar_and_skips_frozen() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([2]), true);
        let frozen = g.leaf(Tensor::full([2], 2.0), false);
        let y = g.mul(x, frozen).unwrap();
        assert!(g.backward(y).is_err());
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
        assert!(grads.get(frozen).is_none());
    }
}
