//! Convolutional block attention: a channel gate followed by a spatial gate.
//!
//! Given a feature map `F` (B×H×W×C):
//!
//! * the channel gate `M_c = σ(MLP(avgpool(F)) + MLP(maxpool(F)))` is
//!   B×1×1×C, with one bottleneck MLP `v ↦ relu(v·W1)·W2` shared by both
//!   pooled descriptors;
//! * `F' = M_c ⊗ F`;
//! * the spatial gate `M_s = σ(conv7×7([chan_avg(F'), chan_max(F')]) + b)`
//!   is B×H×W×1;
//! * the block output is `F'' = M_s ⊗ F'`, the same shape as `F`.

use rand::Rng;

use crate::autodiff::{Graph, Padding, PoolMode, Var};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

/// Shape parameters of a CBAM block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CbamConfig {
    pub channels: usize,
    /// Bottleneck reduction ratio `r`.
    pub ratio: usize,
    /// Side of the square spatial kernel; must be odd.
    pub spatial_kernel: usize,
}

impl CbamConfig {
    pub fn new(channels: usize) -> Self {
        CbamConfig {
            channels,
            ratio: 8,
            spatial_kernel: 7,
        }
    }

    /// `ceil(C / r)`, never below one.
    pub fn hidden(&self) -> usize {
        self.channels.div_ceil(self.ratio).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.ratio == 0 {
            return Err(Error::InvalidArgument("CBAM needs positive channels and ratio".into()));
        }
        if self.spatial_kernel % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "spatial kernel side {} must be odd",
                self.spatial_kernel
            )));
        }
        Ok(())
    }
}

/// Shared bottleneck MLP weights; no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionParams {
    /// C × hidden
    pub w1: Tensor,
    /// hidden × C
    pub w2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams {
    /// k × k × 2 × 1
    pub kernel: Tensor,
    /// single-element bias
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CbamBlock {
    pub config: CbamConfig,
    pub channel: ChannelAttentionParams,
    pub spatial: SpatialAttentionParams,
}

fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let limit = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-limit..limit))
}

impl CbamBlock {
    /// Uniform fan-in initialization, zero spatial bias.
    pub fn init<R: Rng + ?Sized>(config: CbamConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, h, k) = (config.channels, config.hidden(), config.spatial_kernel);
        Ok(CbamBlock {
            config,
            channel: ChannelAttentionParams {
                w1: fan_in_uniform(&[c, h], c, rng),
                w2: fan_in_uniform(&[h, c], h, rng),
            },
            spatial: SpatialAttentionParams {
                kernel: fan_in_uniform(&[k, k, 2, 1], k * k * 2, rng),
                bias: Tensor::zeros([1]),
            },
        })
    }

    /// All attention weights zero: both gates sit at exactly 0.5.
    pub fn zeros(config: CbamConfig) -> Result<Self> {
        config.validate()?;
        let (c, h, k) = (config.channels, config.hidden(), config.spatial_kernel);
        Ok(CbamBlock {
            config,
            channel: ChannelAttentionParams {
                w1: Tensor::zeros([c, h]),
                w2: Tensor::zeros([h, c]),
            },
            spatial: SpatialAttentionParams {
                kernel: Tensor::zeros([k, k, 2, 1]),
                bias: Tensor::zeros([1]),
            },
        })
    }

    /// Parameter names under `prefix`, in registration order.
    pub fn param_names(prefix: &str) -> [String; 4] {
        [
            format!("{prefix}.channel.w1"),
            format!("{prefix}.channel.w2"),
            format!("{prefix}.spatial.kernel"),
            format!("{prefix}.spatial.bias"),
        ]
    }

    pub fn register(&self, prefix: &str, params: &mut ParameterSet) -> Result<()> {
        let [w1, w2, k, b] = Self::param_names(prefix);
        params.insert(w1, self.channel.w1.clone())?;
        params.insert(w2, self.channel.w2.clone())?;
        params.insert(k, self.spatial.kernel.clone())?;
        params.insert(b, self.spatial.bias.clone())
    }

    pub fn from_params(config: CbamConfig, prefix: &str, params: &ParameterSet) -> Result<Self> {
        let [w1, w2, k, b] = Self::param_names(prefix);
        let get = |n: &str| {
            params
                .get(n)
                .map(|p| p.value.clone())
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{n}`")))
        };
        Ok(CbamBlock {
            config,
            channel: ChannelAttentionParams { w1: get(&w1)?, w2: get(&w2)? },
            spatial: SpatialAttentionParams { kernel: get(&k)?, bias: get(&b)? },
        })
    }

    /// Records the block's parameters as graph leaves.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> CbamVars {
        CbamVars {
            channels: self.config.channels,
            w1: g.leaf(self.channel.w1.clone(), requires_grad),
            w2: g.leaf(self.channel.w2.clone(), requires_grad),
            kernel: g.leaf(self.spatial.kernel.clone(), requires_grad),
            bias: g.leaf(self.spatial.bias.clone(), requires_grad),
        }
    }
}

/// Graph handles of a bound CBAM block.
#[derive(Clone, Copy, Debug)]
pub struct CbamVars {
    pub channels: usize,
    pub w1: Var,
    pub w2: Var,
    pub kernel: Var,
    pub bias: Var,
}

fn check_channels(g: &Graph, f: Var, expected: usize) -> Result<[usize; 4]> {
    let dims = g.value(f).nhwc()?;
    if dims[3] != expected {
        return Err(Error::shape(
            "cbam",
            format!("feature map has {} channels, attention is bound to {expected}", dims[3]),
        ));
    }
    Ok(dims)
}

/// `relu(v·W1)·W2` on a B×C descriptor.
fn shared_mlp(g: &mut Graph, v: Var, w1: Var, w2: Var) -> Result<Var> {
    let hidden = g.value(w1).shape()[1];
    let c = g.value(w2).shape()[1];
    let zero_h = g.input(Tensor::zeros([hidden]));
    let zero_c = g.input(Tensor::zeros([c]));
    let h = g.affine(v, w1, zero_h)?;
    let h = g.relu(h);
    g.affine(h, w2, zero_c)
}

/// Channel gate `M_c` (B×1×1×C) recorded on the graph.
pub fn channel_attention_graph(g: &mut Graph, f: Var, w1: Var, w2: Var) -> Result<Var> {
    let c = g.value(w1).shape()[0];
    let [b, ..] = check_channels(g, f, c)?;
    let avg = g.pool(f, PoolMode::GlobalAvg)?;
    let max = g.pool(f, PoolMode::GlobalMax)?;
    let avg = g.reshape(avg, &[b, c])?;
    let max = g.reshape(max, &[b, c])?;
    let a = shared_mlp(g, avg, w1, w2)?;
    let m = shared_mlp(g, max, w1, w2)?;
    let s = g.add(a, m)?;
    let gate = g.sigmoid(s);
    g.reshape(gate, &[b, 1, 1, c])
}

/// Spatial gate `M_s` (B×H×W×1) recorded on the graph.
pub fn spatial_attention_graph(g: &mut Graph, f: Var, kernel: Var, bias: Var) -> Result<Var> {
    g.value(f).nhwc()?;
    let avg = g.pool(f, PoolMode::ChannelAvg)?;
    let max = g.pool(f, PoolMode::ChannelMax)?;
    let both = g.concat_channels(&[avg, max])?;
    let s = g.conv2d(both, kernel, Some(bias), 1, Padding::Same)?;
    Ok(g.sigmoid(s))
}

/// Handles to the intermediate values of one CBAM application.
#[derive(Clone, Copy, Debug)]
pub struct CbamOutput {
    pub channel_gate: Var,
    pub channel_refined: Var,
    pub spatial_gate: Var,
    pub output: Var,
}

pub fn cbam_graph(g: &mut Graph, f: Var, vars: &CbamVars) -> Result<CbamOutput> {
    check_channels(g, f, vars.channels)?;
    let channel_gate = channel_attention_graph(g, f, vars.w1, vars.w2)?;
    let channel_refined = g.broadcast_mul(f, channel_gate)?;
    let spatial_gate = spatial_attention_graph(g, channel_refined, vars.kernel, vars.bias)?;
    let output = g.broadcast_mul(channel_refined, spatial_gate)?;
    Ok(CbamOutput {
        channel_gate,
        channel_refined,
        spatial_gate,
        output,
    })
}

/// Channel attention map `M_c` for a B×H×W×C input.
pub fn channel_attention(f: &Tensor, params: &ChannelAttentionParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(f.clone());
    let w1 = g.input(params.w1.clone());
    let w2 = g.input(params.w2.clone());
    let m = channel_attention_graph(&mut g, x, w1, w2)?;
    Ok(g.value(m).clone())
}

/// Spatial attention map `M_s` for a B×H×W×C input.
pub fn spatial_attention(f: &Tensor, params: &SpatialAttentionParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(f.clone());
    let k = g.input(params.kernel.clone());
    let b = g.input(params.bias.clone());
    let m = spatial_attention_graph(&mut g, x, k, b)?;
    Ok(g.value(m).clone())
}

/// `F''` for a B×H×W×C input; the output has the input's shape.
pub fn cbam_forward(f: &Tensor, block: &CbamBlock) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.input(f.clone());
    let vars = block.bind(&mut g, false);
    let out = cbam_graph(&mut g, x, &vars)?;
    Ok(g.value(out.output).clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_weights_give_half_gates() {
        let f = Tensor::from_fn([2, 3, 4, 5], |i| (i as f64 * 0.37).sin());
        let block = CbamBlock::zeros(CbamConfig::new(5)).unwrap();
        let mc = channel_attention(&f, &block.channel).unwrap();
        assert!(mc.data().iter().all(|&v| v == 0.5));
        let ms = spatial_attention(&f, &block.spatial).unwrap();
        assert_eq!(ms.shape(), &[2, 3, 4, 1]);
        assert!(ms.data().iter().all(|&v| v == 0.5));
        let out = cbam_forward(&f, &block).unwrap();
        assert!(out.data().iter().zip(f.data()).all(|(o, x)| *o == 0.25 * x));
    }

    #[test]
    fn channel_gate_hand_example() {
        let f = Tensor::new([1, 1, 1, 2], vec![2.0, 4.0]).unwrap();
        let params = ChannelAttentionParams {
            w1: Tensor::new([2, 1], vec![0.5, 0.5]).unwrap(),
            w2: Tensor::new([1, 2], vec![1.0, 1.0]).unwrap(),
        };
        let mc = channel_attention(&f, &params).unwrap();
        // hidden relu(3) = 3 on both paths, pre-sigmoid 3 + 3 = 6
        for &v in mc.data() {
            assert!((v - 0.997527).abs() < 1e-6);
        }
    }

    #[test]
    fn spatial_gate_window_sum_example() {
        let f = Tensor::new([1, 2, 2, 1], vec![1., 2., 3., 4.]).unwrap();
        let params = SpatialAttentionParams {
            kernel: Tensor::full([7, 7, 2, 1], 1.0),
            bias: Tensor::zeros([1]),
        };
        let ms = spatial_attention(&f, &params).unwrap();
        let want = 1.0 / (1.0 + (-20f64).exp());
        assert!(ms.data().iter().all(|&v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn full_scale_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = CbamBlock::init(CbamConfig::new(1024), &mut rng).unwrap();
        assert_eq!(block.channel.w1.shape(), &[1024, 128]);
        let f = Tensor::from_fn([1, 7, 7, 1024], |i| ((i % 13) as f64 - 6.0) * 0.1);
        assert_eq!(channel_attention(&f, &block.channel).unwrap().shape(), &[1, 1, 1, 1024]);
        assert_eq!(cbam_forward(&f, &block).unwrap().shape(), &[1, 7, 7, 1024]);
    }

    #[test]
    fn ratio_larger_than_channels_degenerates_to_width_one() {
        let cfg = CbamConfig { channels: 3, ratio: 8, spatial_kernel: 7 };
        assert_eq!(cfg.hidden(), 1);
        assert!(CbamConfig { spatial_kernel: 6, ..cfg }.validate().is_err());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let block = CbamBlock::zeros(CbamConfig::new(4)).unwrap();
        assert!(cbam_forward(&Tensor::zeros([1, 2, 2, 3]), &block).is_err());
        assert!(channel_attention(&Tensor::zeros([1, 2, 2, 3]), &block.channel).is_err());
    }
}
