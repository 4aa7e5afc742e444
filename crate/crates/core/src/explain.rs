//! Grad-CAM class-activation maps and their rendering.

use crate::autodiff::{Graph, Mode};
use crate::data::BoundingBox;
use crate::error::{Error, Result};
use crate::imaging::{self, to_u8, RawImage};
use crate::model::{Model, NoRng, TAPS, TAP_FINAL_FEATURE_MAP};
use crate::tensor::Tensor;

pub const DEFAULT_OPACITY: f64 = 0.45;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassSelection {
    Predicted,
    Explicit(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCamConfig {
    pub tap: String,
    pub class: ClassSelection,
    /// Side of the upsampled map; `None` uses the model's input side.
    pub output_side: Option<usize>,
    pub opacity: f64,
}

impl Default for GradCamConfig {
    fn default() -> Self {
        GradCamConfig {
            tap: TAP_FINAL_FEATURE_MAP.into(),
            class: ClassSelection::Predicted,
            output_side: None,
            opacity: DEFAULT_OPACITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// h×w, nonnegative.
    pub raw: Tensor,
    /// h×w in `[0, 1]`.
    pub normalized: Tensor,
    /// S×S in `[0, 1]`.
    pub upsampled: Tensor,
}

/// `relu(Σ_k α_k A^k)` with `α_k` the spatial mean of `∂y/∂A^k`, for a
/// single-item 1×h×w×K activation and its gradient.
pub fn gradcam_from(activation: &Tensor, gradient: &Tensor) -> Result<Tensor> {
    let [b, h, w, k] = activation.nhwc()?;
    if b != 1 || gradient.shape() != activation.shape() {
        return Err(Error::shape(
            "gradcam",
            format!("activation {:?} and gradient {:?} must match with batch 1", activation.shape(), gradient.shape()),
        ));
    }
    let mut alpha = vec![0.0; k];
    for px in gradient.data().chunks_exact(k) {
        alpha.iter_mut().zip(px).for_each(|(a, g)| *a += g);
    }
    alpha.iter_mut().for_each(|a| *a /= (h * w) as f64);
    let raw = activation
        .data()
        .chunks_exact(k)
        .map(|px| px.iter().zip(&alpha).map(|(a, w)| a * w).sum::<f64>().max(0.0))
        .collect();
    Tensor::new([h, w], raw)
}

fn as_batch(model: &Model, image: &Tensor) -> Result<Tensor> {
    let t = match image.shape() {
        [_, _, _] => image.clone().reshape([1].into_iter().chain(image.shape().iter().copied()).collect::<Vec<_>>())?,
        [1, _, _, _] => image.clone(),
        s => return Err(Error::shape("gradcam", format!("expected one H×W×3 image, got {s:?}"))),
    };
    let side = model.config().backbone.input_side;
    if t.shape()[1..] != [side, side, model.config().backbone.input_channels] {
        return Err(Error::shape("gradcam", format!("image {:?} does not fit a {side}×{side} model", image.shape())));
    }
    Ok(t)
}

/// Raw Grad-CAM map of `class`'s logit for one image, along with the
/// infer-mode class probabilities.
pub fn compute_gradcam(model: &Model, image: &Tensor, class: usize, tap: &str) -> Result<(Tensor, Vec<f64>)> {
    if !TAPS.contains(&tap) {
        return Err(Error::InvalidArgument(format!("unknown tap `{tap}` (known: {})", TAPS.join(", "))));
    }
    let k = model.config().head.classes;
    if class >= k {
        return Err(Error::LabelOutOfRange { label: class, classes: k });
    }
    let x = as_batch(model, image)?;
    let mut frozen = model.clone();
    frozen.params_mut().iter_mut().for_each(|p| p.frozen = true);
    let mut g = Graph::new();
    let xi = g.input(x);
    let out = frozen.forward_graph(&mut g, xi, Mode::Infer, Some(tap), &mut NoRng)?;
    let score = g.pick_sum(out.logits, class)?;
    let grads = g.backward(score)?;
    let a = out.tap(tap).expect("tap recorded");
    let grad = grads.get(a).cloned().unwrap_or_else(|| Tensor::zeros(g.value(a).shape().to_vec()));
    let raw = gradcam_from(g.value(a), &grad)?;
    Ok((raw, g.value(out.probabilities).data().to_vec()))
}

/// `(x − min) / (max − min)`; a constant map becomes all zeros.
pub fn normalize_heatmap(raw: &Tensor) -> Tensor {
    let (lo, hi) = raw.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = hi - lo;
    let data = raw
        .data()
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    Tensor::new(raw.shape().to_vec(), data).expect("same shape")
}

/// Resamples an h×w map to side×side.
pub fn bilinear_resize(map: &Tensor, side: usize) -> Result<Tensor> {
    let (h, w) = match map.shape() {
        &[h, w] => (h, w),
        s => return Err(Error::shape("bilinear_resize", format!("expected an h×w map, got {s:?}"))),
    };
    Tensor::new([side, side], imaging::bilinear_resize(map.data(), h, w, 1, side, side))
}

/// Piecewise-linear jet colormap.
pub fn jet_rgb(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// `(1 − opacity)·gray + opacity·jet(heat)` per pixel and channel.
pub fn overlay(gray: &Tensor, heat: &Tensor, opacity: f64) -> Result<Tensor> {
    if gray.shape() != heat.shape() || gray.rank() != 2 {
        return Err(Error::shape(
            "overlay",
            format!("gray {:?} and heatmap {:?} must be equal S×S maps", gray.shape(), heat.shape()),
        ));
    }
    if !(0.0..=1.0).contains(&opacity) {
        return Err(Error::InvalidArgument(format!("opacity {opacity} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(gray.numel() * 3);
    for (&g, &h) in gray.data().iter().zip(heat.data()) {
        for c in jet_rgb(h) {
            out.push((1.0 - opacity) * g + opacity * c);
        }
    }
    Tensor::new([gray.shape()[0], gray.shape()[1], 3], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub predicted: usize,
    pub class: usize,
    pub probabilities: Vec<f64>,
    pub heatmap: Heatmap,
    /// Channel mean of the input image, S×S.
    pub gray: Tensor,
    /// S×S×3.
    pub overlay: Tensor,
}

/// Full Grad-CAM pipeline for one H×W×3 image: raw map, normalization,
/// upsampling and overlay.
pub fn explain(model: &Model, image: &Tensor, config: &GradCamConfig) -> Result<Explanation> {
    let x = as_batch(model, image)?;
    let [_, h, w, c] = x.nhwc()?;
    let probe = model.predict(&x)?;
    let predicted = crate::train::argmax(probe.data());
    let class = match config.class {
        ClassSelection::Predicted => predicted,
        ClassSelection::Explicit(c) => c,
    };
    let (raw, probabilities) = compute_gradcam(model, &x, class, &config.tap)?;
    let side = config.output_side.unwrap_or(h);
    let normalized = normalize_heatmap(&raw);
    let upsampled = bilinear_resize(&normalized, side)?;
    let gray_native = Tensor::new([h, w], x.data().chunks_exact(c).map(|p| p.iter().sum::<f64>() / c as f64).collect())?;
    let gray = Tensor::new([side, side], imaging::bilinear_resize(gray_native.data(), h, w, 1, side, side))?;
    let overlay = overlay(&gray, &upsampled, config.opacity)?;
    Ok(Explanation {
        predicted,
        class,
        probabilities,
        heatmap: Heatmap { raw, normalized, upsampled },
        gray,
        overlay,
    })
}

/// Share of a map's total mass at pixels whose centres fall inside `bbox`;
/// 0 for an all-zero map.
pub fn mass_inside(map: &Tensor, bbox: &BoundingBox) -> f64 {
    let side = map.shape()[0];
    let total: f64 = map.data().iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let inside: f64 = (0..side)
        .flat_map(|r| (0..side).map(move |c| (r, c)))
        .filter(|&(r, c)| bbox.contains_pixel(r, c, side))
        .map(|(r, c)| map.data()[r * side + c])
        .sum();
    inside / total
}

/// Original, normalized heatmap (gray) and overlay side by side.
pub fn triptych(explanation: &Explanation) -> RawImage {
    let side = explanation.gray.shape()[0];
    let mut pixels = Vec::with_capacity(side * side * 9);
    for r in 0..side {
        for src in [&explanation.gray, &explanation.heatmap.upsampled] {
            for c in 0..side {
                pixels.extend([to_u8(src.data()[r * side + c]); 3]);
            }
        }
        for c in 0..side {
            let o = (r * side + c) * 3;
            pixels.extend(explanation.overlay.data()[o..o + 3].iter().map(|&v| to_u8(v)));
        }
    }
    RawImage { width: 3 * side, height: side, channels: 3, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenseBlockConfig, ModelConfig};

    #[test]
    fn toy_tap_gradient() {
        let a = Tensor::new([1, 1, 1, 2], vec![2.0, 3.0]).unwrap();
        let g = Tensor::new([1, 1, 1, 2], vec![3.0, -1.0]).unwrap();
        assert_eq!(gradcam_from(&a, &g).unwrap().data(), &[3.0]);
    }

    #[test]
    fn normalization_cases() {
        let n = |v: Vec<f64>| normalize_heatmap(&Tensor::new([1, v.len()], v).unwrap()).into_data();
        assert_eq!(n(vec![0.0, 0.0]), [0.0, 0.0]);
        assert_eq!(n(vec![0.0, 5.0]), [0.0, 1.0]);
        assert_eq!(n(vec![1.0, 2.0, 4.0]), [0.0, 1.0 / 3.0, 1.0]);
    }

    #[test]
    fn resize_cases() {
        let m = Tensor::new([1, 2], vec![0.0, 1.0]).unwrap();
        let r = imaging::bilinear_resize(m.data(), 1, 2, 1, 1, 4);
        assert_eq!(r, [0.0, 0.25, 0.75, 1.0]);
        let big = bilinear_resize(&Tensor::from_fn([7, 7], |i| (i % 5) as f64), 224).unwrap();
        assert_eq!(big.shape(), &[224, 224]);
        assert!(big.data().iter().all(|&v| (0.0..=4.0).contains(&v)));
        let same = Tensor::from_fn([3, 3], |i| i as f64);
        assert_eq!(bilinear_resize(&same, 3).unwrap(), same);
    }

    #[test]
    fn jet_and_overlay_arithmetic() {
        assert_eq!(jet_rgb(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(jet_rgb(1.0), [0.5, 0.0, 0.0]);
        assert_eq!(jet_rgb(0.5), [0.5, 1.0, 0.5]);
        let gray = Tensor::full([1, 1], 0.5);
        let heat = Tensor::full([1, 1], 1.0);
        let o = overlay(&gray, &heat, 0.45).unwrap();
        let want = [0.5, 0.275, 0.275];
        for (a, b) in o.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(overlay(&gray, &heat, 0.0).unwrap().data(), &[0.5; 3]);
        assert_eq!(overlay(&gray, &heat, 1.0).unwrap().data(), &jet_rgb(1.0));
        assert!(overlay(&gray, &Tensor::full([1, 2], 0.0), 0.45).is_err());
    }

    fn small() -> Model {
        let mut c = ModelConfig::dense_tiny();
        c.backbone.input_side = 16;
        c.backbone.blocks = vec![DenseBlockConfig { layers: 2, growth: 4 }; 2];
        c.head.widths = vec![8, 8];
        Model::build(&c, 3).unwrap()
    }

    #[test]
    fn model_maps_are_nonnegative_and_zero_when_decoupled() {
        let mut m = small();
        let img = Tensor::from_fn([16, 16, 3], |i| ((i * 37) % 11) as f64 / 11.0);
        for class in 0..3 {
            let (raw, probs) = compute_gradcam(&m, &img, class, TAP_FINAL_FEATURE_MAP).unwrap();
            assert_eq!(raw.shape(), &[8, 8]);
            assert!(raw.data().iter().all(|&v| v >= 0.0));
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let w = m.params_mut().get_mut("head.out.weight").unwrap();
        w.value = Tensor::zeros(w.value.shape().to_vec());
        let (raw, _) = compute_gradcam(&m, &img, 1, TAP_FINAL_FEATURE_MAP).unwrap();
        assert!(raw.data().iter().all(|&v| v == 0.0));
        assert!(compute_gradcam(&m, &img, 3, TAP_FINAL_FEATURE_MAP).is_err());
        assert!(compute_gradcam(&m, &img, 0, "conv5").is_err());
    }

    #[test]
    fn explanation_and_triptych_shapes() {
        let m = small();
        let img = Tensor::from_fn([16, 16, 3], |i| (i % 13) as f64 / 13.0);
        let e = explain(&m, &img, &GradCamConfig { output_side: Some(32), ..Default::default() }).unwrap();
        assert_eq!(e.heatmap.upsampled.shape(), &[32, 32]);
        assert_eq!(e.overlay.shape(), &[32, 32, 3]);
        let t = triptych(&e);
        assert_eq!((t.width, t.height, t.pixels.len()), (96, 32, 96 * 32 * 3));
        let b = BoundingBox { x0: 0.0, y0: 0.0, x1: 1.0, y1: 1.0 };
        let mass = mass_inside(&e.heatmap.upsampled, &b);
        assert!(mass == 1.0 || e.heatmap.upsampled.data().iter().all(|&v| v == 0.0));
    }
}
