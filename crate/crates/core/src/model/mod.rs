//! Dense-connectivity backbone, CBAM, classifier head and checkpoints.
//!
//! The backbone is pre-activation DenseNet style: every parameter-bearing
//! layer is either a convolution or a batch-norm, and each is registered in
//! order from input to output. Freeze control counts those registry entries
//! from the output end.

mod checkpoint;
mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{cbam_graph, CbamBlock, CbamConfig, CbamVars};
use crate::autodiff::{BnOptions, BnStats, Graph, Mode, Padding, PoolMode, Var};
use crate::error::{Error, Result};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointMeta, Precision, FORMAT_VERSION, MAGIC};
pub use config::{BackboneConfig, BackbonePlan, DenseBlockConfig, HeadConfig, ModelConfig, StagePlan, StemConfig, PRESETS};

/// Last dense-block concatenation, before the final batch-norm and CBAM.
pub const TAP_FINAL_FEATURE_MAP: &str = "final_feature_map";
/// Backbone output after the final batch-norm + relu; the CBAM input.
pub const TAP_BACKBONE_OUTPUT: &str = "backbone_output";
/// CBAM-refined feature map `F''`.
pub const TAP_CBAM_OUTPUT: &str = "cbam_output";
pub const TAPS: [&str; 3] = [TAP_FINAL_FEATURE_MAP, TAP_BACKBONE_OUTPUT, TAP_CBAM_OUTPUT];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Dense,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Section {
    Backbone,
    Attention,
    Head,
}

/// One registry entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub section: Section,
    pub params: Vec<String>,
    /// Running statistics, present on batch-norm layers only.
    pub stats: Option<BnStats>,
}

#[derive(Clone, Debug, PartialEq)]
enum Step {
    Conv { layer: usize, stride: usize },
    Bn { layer: usize },
    Relu,
    AvgPool2,
}

/// A backbone stage mapping one tensor to the next. Dense layers concat
/// their result onto their input.
#[derive(Clone, Debug, PartialEq)]
struct Unit {
    steps: Vec<Step>,
    concat_input: bool,
    layers: Vec<usize>,
}

#[derive(Clone, Copy)]
struct Pass {
    mode: Mode,
    bn: BnOptions,
    dropout: bool,
    frozen_bn_train: bool,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    plan: BackbonePlan,
    params: ParameterSet,
    layers: Vec<Layer>,
    units: Vec<Unit>,
    cbam: usize,
    head_bn: usize,
    head_dense: Vec<usize>,
}

/// Graph handles produced by [`Model::forward_graph`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub probabilities: Var,
    pub taps: Vec<(&'static str, Var)>,
    /// Parameter name → leaf, for parameters that require gradients.
    pub trainable: Vec<(String, Var)>,
    /// New running statistics for the batch-norm layers that ran in train
    /// mode, keyed by registry index. Apply with [`Model::apply_bn_updates`].
    pub bn_updates: Vec<(usize, BnStats)>,
}

impl ForwardOutput {
    pub fn tap(&self, name: &str) -> Option<Var> {
        self.taps.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }
}

/// Concrete tensors from [`Model::forward`].
#[derive(Clone, Debug)]
pub struct Prediction {
    pub probabilities: Tensor,
    pub taps: Vec<(&'static str, Tensor)>,
}

impl Prediction {
    pub fn tap(&self, name: &str) -> Option<&Tensor> {
        self.taps.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

struct Builder<'a, R: Rng> {
    params: ParameterSet,
    layers: Vec<Layer>,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn push(&mut self, name: String, kind: LayerKind, section: Section, params: Vec<(String, Tensor)>) -> Result<usize> {
        let mut names = Vec::new();
        for (n, t) in params {
            self.params.insert(n.clone(), t)?;
            names.push(n);
        }
        let stats = (kind == LayerKind::BatchNorm).then(|| BnStats::new(*self.params.value(&names[0]).shape().last().unwrap()));
        self.layers.push(Layer { name, kind, section, params: names, stats });
        Ok(self.layers.len() - 1)
    }

    /// He-uniform kernel, no bias; a batch-norm always follows.
    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> Result<usize> {
        let limit = (6.0 / (k * k * cin) as f64).sqrt();
        let kernel = Tensor::from_fn([k, k, cin, cout], |_| self.rng.random_range(-limit..limit));
        self.push(name.into(), LayerKind::Conv, Section::Backbone, vec![(format!("{name}.kernel"), kernel)])
    }

    fn bn(&mut self, name: &str, c: usize, section: Section) -> Result<usize> {
        self.push(
            name.into(),
            LayerKind::BatchNorm,
            section,
            vec![(format!("{name}.gamma"), Tensor::full([c], 1.0)), (format!("{name}.beta"), Tensor::zeros([c]))],
        )
    }

    /// Glorot-uniform weights, zero bias.
    fn dense(&mut self, name: &str, inputs: usize, outputs: usize) -> Result<usize> {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = Tensor::from_fn([inputs, outputs], |_| self.rng.random_range(-limit..limit));
        self.push(
            name.into(),
            LayerKind::Dense,
            Section::Head,
            vec![(format!("{name}.weight"), w), (format!("{name}.bias"), Tensor::zeros([outputs]))],
        )
    }
}

/// Builds a freshly initialized model. Parameter names and values depend
/// only on `config` and `seed`; every parameter starts trainable.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    Model::build(config, seed)
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let plan = config.backbone.plan()?;
        let head = &config.head;
        if head.widths.len() != head.dropout.len() {
            return Err(Error::InvalidArgument(format!(
                "head has {} widths but {} dropout rates",
                head.widths.len(),
                head.dropout.len()
            )));
        }
        if head.classes < 2 || head.widths.contains(&0) {
            return Err(Error::InvalidArgument("head needs ≥ 2 classes and positive widths".into()));
        }
        if let Some(&r) = head.dropout.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::InvalidArgument(format!("dropout rate {r} outside [0, 1)")));
        }
        if config.bn.epsilon <= 0.0 || !(0.0..=1.0).contains(&config.bn.momentum) {
            return Err(Error::InvalidArgument("batch-norm needs epsilon > 0 and momentum in [0, 1]".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: ParameterSet::new(), layers: Vec::new(), rng: &mut rng };
        let bb = &config.backbone;
        let mut units = Vec::new();

        let stem_conv = b.conv("stem.conv", bb.stem.kernel, bb.input_channels, bb.stem.channels)?;
        let stem_bn = b.bn("stem.bn", bb.stem.channels, Section::Backbone)?;
        let mut steps = vec![
            Step::Conv { layer: stem_conv, stride: bb.stem.stride },
            Step::Bn { layer: stem_bn },
            Step::Relu,
        ];
        if bb.stem.pool {
            steps.push(Step::AvgPool2);
        }
        units.push(Unit { steps, concat_input: false, layers: vec![stem_conv, stem_bn] });

        let mut channels = bb.stem.channels;
        for (bi, block) in bb.blocks.iter().enumerate() {
            let stage = plan.blocks[bi];
            assert_eq!(stage.in_channels, channels, "block {} input width", bi + 1);
            for li in 0..block.layers {
                let p = format!("block{}.layer{}", bi + 1, li + 1);
                let (steps, layers) = match bb.bottleneck {
                    None => {
                        let n = b.bn(&format!("{p}.bn"), channels, Section::Backbone)?;
                        let c = b.conv(&format!("{p}.conv"), 3, channels, block.growth)?;
                        (vec![Step::Bn { layer: n }, Step::Relu, Step::Conv { layer: c, stride: 1 }], vec![n, c])
                    }
                    Some(m) => {
                        let width = m * block.growth;
                        let n1 = b.bn(&format!("{p}.bn1"), channels, Section::Backbone)?;
                        let c1 = b.conv(&format!("{p}.conv1"), 1, channels, width)?;
                        let n2 = b.bn(&format!("{p}.bn2"), width, Section::Backbone)?;
                        let c2 = b.conv(&format!("{p}.conv2"), 3, width, block.growth)?;
                        (
                            vec![
                                Step::Bn { layer: n1 },
                                Step::Relu,
                                Step::Conv { layer: c1, stride: 1 },
                                Step::Bn { layer: n2 },
                                Step::Relu,
                                Step::Conv { layer: c2, stride: 1 },
                            ],
                            vec![n1, c1, n2, c2],
                        )
                    }
                };
                units.push(Unit { steps, concat_input: true, layers });
                channels += block.growth;
            }
            assert_eq!(stage.out_channels, channels, "block {} output width", bi + 1);
            if let Some(t) = plan.transitions.get(bi) {
                let p = format!("transition{}", bi + 1);
                let n = b.bn(&format!("{p}.bn"), channels, Section::Backbone)?;
                let c = b.conv(&format!("{p}.conv"), 1, channels, t.out_channels)?;
                assert_eq!(t.out_channels, ((bb.compression * channels as f64).floor() as usize).max(1));
                units.push(Unit {
                    steps: vec![Step::Bn { layer: n }, Step::Relu, Step::Conv { layer: c, stride: 1 }, Step::AvgPool2],
                    concat_input: false,
                    layers: vec![n, c],
                });
                channels = t.out_channels;
            }
        }
        assert_eq!(channels, plan.final_channels);
        let final_bn = b.bn("backbone.bn", channels, Section::Backbone)?;
        units.push(Unit { steps: vec![Step::Bn { layer: final_bn }, Step::Relu], concat_input: false, layers: vec![final_bn] });

        let cbam_config = CbamConfig { channels, ratio: config.cbam_ratio, spatial_kernel: config.spatial_kernel };
        let block = CbamBlock::init(cbam_config, b.rng)?;
        block.register("cbam", &mut b.params)?;
        let cbam = b.layers.len();
        b.layers.push(Layer {
            name: "cbam".into(),
            kind: LayerKind::Attention,
            section: Section::Attention,
            params: CbamBlock::param_names("cbam").to_vec(),
            stats: None,
        });

        let head_bn = b.bn("head.bn", channels, Section::Head)?;
        let mut head_dense = Vec::new();
        let mut width = channels;
        for (i, &w) in head.widths.iter().enumerate() {
            head_dense.push(b.dense(&format!("head.fc{}", i + 1), width, w)?);
            width = w;
        }
        head_dense.push(b.dense("head.out", width, head.classes)?);

        let Builder { params, layers, .. } = b;
        Ok(Model { config: config.clone(), plan, params, layers, units, cbam, head_bn, head_dense })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn plan(&self) -> &BackbonePlan {
        &self.plan
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn cbam_config(&self) -> CbamConfig {
        CbamConfig {
            channels: self.plan.final_channels,
            ratio: self.config.cbam_ratio,
            spatial_kernel: self.config.spatial_kernel,
        }
    }

    /// Registry indices of the parameter-bearing backbone layers, input first.
    pub fn backbone_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.layers[i].section == Section::Backbone).collect()
    }

    pub fn backbone_layer_count(&self) -> usize {
        self.backbone_layers().len()
    }

    pub fn layer_frozen(&self, index: usize) -> bool {
        self.layers[index].params.iter().all(|p| self.params.get(p).unwrap().frozen)
    }

    /// Makes the last `unfreeze_last_n` backbone layers, CBAM and the head
    /// trainable and freezes every other backbone layer.
    pub fn set_trainable(&mut self, unfreeze_last_n: usize) -> Result<()> {
        let backbone = self.backbone_layers();
        if unfreeze_last_n > backbone.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot unfreeze {unfreeze_last_n} layers, the backbone has {}",
                backbone.len()
            )));
        }
        let first_trainable = backbone.len() - unfreeze_last_n;
        let mut frozen = vec![false; self.layers.len()];
        for &i in &backbone[..first_trainable] {
            frozen[i] = true;
        }
        for (layer, &f) in self.layers.iter().zip(&frozen) {
            for p in &layer.params {
                self.params.set_frozen(p, f)?;
            }
        }
        Ok(())
    }

    /// (total, trainable) scalar parameter counts.
    pub fn count_parameters(&self) -> (usize, usize) {
        self.params.counts()
    }

    pub fn bn_stats(&self, layer: &str) -> Option<&BnStats> {
        self.layers.iter().find(|l| l.name == layer).and_then(|l| l.stats.as_ref())
    }

    pub fn apply_bn_updates(&mut self, updates: Vec<(usize, BnStats)>) {
        for (i, s) in updates {
            self.layers[i].stats = Some(s);
        }
    }

    /// Index of the backbone unit whose output is the final feature map.
    fn feature_unit(&self) -> usize {
        self.units.len() - 2
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let bb = &self.config.backbone;
        match shape {
            [_, h, w, c] if *h == bb.input_side && *w == bb.input_side && *c == bb.input_channels => Ok(()),
            s => Err(Error::shape(
                "model_forward",
                format!("expected B×{0}×{0}×{1} input, got {s:?}", bb.input_side, bb.input_channels),
            )),
        }
    }

    fn bind(&self, g: &mut Graph, name: &str, trainable: &mut Vec<(String, Var)>) -> Var {
        let p = self.params.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        let v = g.leaf(p.value.clone(), !p.frozen);
        if !p.frozen {
            trainable.push((name.to_owned(), v));
        }
        v
    }

    #[allow(clippy::too_many_arguments)]
    fn run_unit(
        &self,
        g: &mut Graph,
        unit: &Unit,
        x: Var,
        pass: Pass,
        trainable: &mut Vec<(String, Var)>,
        bn_updates: &mut Vec<(usize, BnStats)>,
    ) -> Result<Var> {
        let mut h = x;
        for step in &unit.steps {
            h = match *step {
                Step::Conv { layer, stride } => {
                    let k = self.bind(g, &self.layers[layer].params[0], trainable);
                    g.conv2d(h, k, None, stride, Padding::Same)?
                }
                Step::Bn { layer } => self.batch_norm(g, layer, h, pass, trainable, bn_updates)?,
                Step::Relu => g.relu(h),
                Step::AvgPool2 => g.avg_pool2(h)?,
            };
        }
        if unit.concat_input {
            h = g.concat_channels(&[x, h])?;
        }
        Ok(h)
    }

    /// Frozen batch-norm layers use their running statistics unless the
    /// pass says otherwise.
    fn batch_norm(
        &self,
        g: &mut Graph,
        layer: usize,
        x: Var,
        pass: Pass,
        trainable: &mut Vec<(String, Var)>,
        bn_updates: &mut Vec<(usize, BnStats)>,
    ) -> Result<Var> {
        let l = &self.layers[layer];
        let gamma = self.bind(g, &l.params[0], trainable);
        let beta = self.bind(g, &l.params[1], trainable);
        let mut stats = l.stats.clone().expect("batch-norm layer has stats");
        let mode = if self.layer_frozen(layer) && !pass.frozen_bn_train { Mode::Infer } else { pass.mode };
        let y = g.batch_norm(x, gamma, beta, &mut stats, mode, pass.bn)?;
        if mode == Mode::Train {
            bn_updates.push((layer, stats));
        }
        Ok(y)
    }

    /// Records the forward pass on `g`.
    ///
    /// With `grad_tap = Some(name)` the named tap becomes a fresh leaf that
    /// requires gradients, so `Gradients::get` on it yields the gradient of
    /// any downstream scalar with respect to that activation. Leading
    /// backbone stages that cannot receive gradients run on a scratch graph
    /// and only their output is kept.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        input: Var,
        mode: Mode,
        grad_tap: Option<&str>,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let pass = Pass { mode, bn: self.config.bn, dropout: true, frozen_bn_train: false };
        self.forward_impl(g, input, pass, grad_tap, rng)
    }

    fn forward_impl<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        input: Var,
        pass: Pass,
        grad_tap: Option<&str>,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        self.check_input(g.value(input).shape())?;
        if let Some(t) = grad_tap {
            if !TAPS.contains(&t) {
                return Err(Error::InvalidArgument(format!("unknown tap `{t}` (known: {})", TAPS.join(", "))));
            }
        }
        let mut trainable = Vec::new();
        let mut bn_updates = Vec::new();
        let mut taps = Vec::new();
        let feature_unit = self.feature_unit();
        let last_unit = self.units.len() - 1;

        let frozen_prefix = self
            .units
            .iter()
            .take_while(|u| u.layers.iter().all(|&l| self.layer_frozen(l)))
            .count();
        let detached = match grad_tap {
            Some(TAP_FINAL_FEATURE_MAP) => feature_unit + 1,
            Some(TAP_BACKBONE_OUTPUT) => last_unit + 1,
            _ => frozen_prefix,
        };

        let mut x = input;
        if detached > 0 {
            // One throwaway graph per unit keeps peak memory at a single stage.
            let mut value = g.value(input).clone();
            let mut interior = None;
            for (i, unit) in self.units[..detached].iter().enumerate() {
                let mut s = Graph::new();
                let h = s.input(value);
                let h = self.run_unit(&mut s, unit, h, pass, &mut Vec::new(), &mut bn_updates)?;
                value = s.into_value(h);
                if i == feature_unit && i + 1 < detached {
                    interior = Some(value.clone());
                }
            }
            if let Some(t) = interior {
                taps.push((TAP_FINAL_FEATURE_MAP, g.leaf(t, false)));
            }
            let rerooted = matches!(grad_tap, Some(TAP_FINAL_FEATURE_MAP | TAP_BACKBONE_OUTPUT));
            x = g.leaf(value, rerooted);
            if detached - 1 == feature_unit {
                taps.push((TAP_FINAL_FEATURE_MAP, x));
            }
        }
        for (i, unit) in self.units.iter().enumerate().skip(detached) {
            x = self.run_unit(g, unit, x, pass, &mut trainable, &mut bn_updates)?;
            if i == feature_unit {
                taps.push((TAP_FINAL_FEATURE_MAP, x));
            }
        }
        taps.push((TAP_BACKBONE_OUTPUT, x));

        let cbam = self.bind_cbam(g, &mut trainable);
        let refined = cbam_graph(g, x, &cbam)?;
        let mut y = refined.output;
        if grad_tap == Some(TAP_CBAM_OUTPUT) {
            y = g.leaf(g.value(y).clone(), true);
        }
        taps.push((TAP_CBAM_OUTPUT, y));

        let pooled = g.pool(y, PoolMode::GlobalAvg)?;
        let c = self.plan.final_channels;
        let b = g.value(input).shape()[0];
        let mut h = g.reshape(pooled, &[b, c])?;
        h = self.batch_norm(g, self.head_bn, h, pass, &mut trainable, &mut bn_updates)?;
        let hidden = self.head_dense.len() - 1;
        for (i, &layer) in self.head_dense.iter().enumerate() {
            let l = &self.layers[layer];
            let w = self.bind(g, &l.params[0], &mut trainable);
            let bias = self.bind(g, &l.params[1], &mut trainable);
            h = g.affine(h, w, bias)?;
            if i < hidden {
                h = g.relu(h);
                if pass.dropout {
                    h = g.dropout(h, self.config.head.dropout[i], pass.mode, rng)?;
                }
            }
        }
        let logits = h;
        let probabilities = g.softmax(logits)?;
        Ok(ForwardOutput { logits, probabilities, taps, trainable, bn_updates })
    }

    fn bind_cbam(&self, g: &mut Graph, trainable: &mut Vec<(String, Var)>) -> CbamVars {
        let names = &self.layers[self.cbam].params;
        CbamVars {
            channels: self.plan.final_channels,
            w1: self.bind(g, &names[0], trainable),
            w2: self.bind(g, &names[1], trainable),
            kernel: self.bind(g, &names[2], trainable),
            bias: self.bind(g, &names[3], trainable),
        }
    }

    /// Runs the model on a concrete batch. Infer mode is deterministic and
    /// never touches `rng`; train mode returns, but does not apply, the
    /// batch-norm updates.
    pub fn forward<R: Rng + ?Sized>(&self, batch: &Tensor, mode: Mode, rng: &mut R) -> Result<(Prediction, Vec<(usize, BnStats)>)> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let out = self.forward_graph(&mut g, x, mode, None, rng)?;
        let taps = out.taps.iter().map(|&(n, v)| (n, g.value(v).clone())).collect();
        Ok((Prediction { probabilities: g.value(out.probabilities).clone(), taps }, out.bn_updates))
    }

    /// Infer-mode class probabilities, B×K.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let frozen = self.clone_frozen_all();
        let out = frozen.forward_graph(&mut g, x, Mode::Infer, None, &mut NoRng)?;
        Ok(g.value(out.probabilities).clone())
    }

    /// A copy with every parameter frozen, so inference keeps no gradient
    /// bookkeeping and the whole backbone runs detached.
    fn clone_frozen_all(&self) -> std::borrow::Cow<'_, Model> {
        if self.params.iter().all(|p| p.frozen) {
            return std::borrow::Cow::Borrowed(self);
        }
        let mut m = self.clone();
        m.params.iter_mut().for_each(|p| p.frozen = true);
        std::borrow::Cow::Owned(m)
    }

    /// Replaces the running statistics of every backbone batch-norm layer
    /// with the statistics of `batch` propagated through the network, one
    /// layer at a time.
    pub fn calibrate_batch_norm(&mut self, batch: &Tensor) -> Result<()> {
        let m = self.clone_frozen_all();
        let pass = Pass {
            mode: Mode::Train,
            bn: BnOptions { momentum: 0.0, ..self.config.bn },
            dropout: false,
            frozen_bn_train: true,
        };
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let out = m.forward_impl(&mut g, x, pass, None, &mut NoRng)?;
        let updates = out
            .bn_updates
            .into_iter()
            .filter(|(i, _)| self.layers[*i].section == Section::Backbone)
            .collect();
        self.apply_bn_updates(updates);
        Ok(())
    }
}

/// Random source for passes that must not draw (infer mode, calibration
/// with dropout bypassed).
pub(crate) struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("this pass draws no random numbers")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("this pass draws no random numbers")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("this pass draws no random numbers")
    }
}
