//! Random geometric and photometric training augmentation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Rotation limit in degrees; θ ~ U(−limit, limit).
    pub rotation_deg: f64,
    /// Shift limit as a fraction of width/height.
    pub shift: f64,
    /// Zoom limit; scale ~ U(1 − zoom, 1 + zoom).
    pub zoom: f64,
    pub flip_prob: f64,
    pub brightness: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_deg: 15.0,
            shift: 0.10,
            zoom: 0.10,
            flip_prob: 0.5,
            brightness: (0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            rotation_deg: 0.0,
            shift: 0.0,
            zoom: 0.0,
            flip_prob: 0.0,
            brightness: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=15.0).contains(&self.rotation_deg)
            && (0.0..=0.10).contains(&self.shift)
            && (0.0..=0.10).contains(&self.zoom)
            && (0.0..=1.0).contains(&self.flip_prob)
            && 0.9 <= self.brightness.0
            && self.brightness.0 <= self.brightness.1
            && self.brightness.1 <= 1.1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("augmentation limits out of range: {self:?}")))
        }
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, limit: f64) -> f64 {
    rng.random_range(-limit..=limit)
}

/// Augments one H×W×C image in `[0, 1]`.
///
/// Draws, in order, rotation, horizontal and vertical shift, zoom, flip and
/// brightness, then applies them in that order as one inverse-mapped
/// bilinear resample with zero fill, and clamps to `[0, 1]`. Every draw is
/// made even when its range is degenerate, so the stream position does not
/// depend on the config.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, config: &AugmentConfig, rng: &mut R) -> Tensor {
    let (h, w, c) = match image.shape() {
        &[h, w, c] => (h, w, c),
        s => panic!("augment expects an H×W×C image, got {s:?}"),
    };
    let theta = symmetric(rng, config.rotation_deg).to_radians();
    let dx = symmetric(rng, config.shift) * w as f64;
    let dy = symmetric(rng, config.shift) * h as f64;
    let scale = 1.0 + symmetric(rng, config.zoom);
    let flip = rng.random::<f64>() < config.flip_prob;
    let brightness = rng.random_range(config.brightness.0..=config.brightness.1);

    let (cos, sin) = (theta.cos(), theta.sin());
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for i in 0..h {
        for j in 0..w {
            // Output pixel centre relative to the image centre, pulled back
            // through flip, zoom, shift and rotation.
            let mut x = j as f64 + 0.5 - cx;
            let y = i as f64 + 0.5 - cy;
            if flip {
                x = -x;
            }
            let (x, y) = (x / scale - dx, y / scale - dy);
            let (x, y) = (cos * x + sin * y, -sin * x + cos * y);
            let (sx, sy) = (x + cx - 0.5, y + cy - 0.5);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let o = (i * w + j) * c;
            for (yy, wy) in [(y0, 1.0 - fy), (y0 + 1.0, fy)] {
                if wy == 0.0 || yy < 0.0 || yy >= h as f64 {
                    continue;
                }
                for (xx, wx) in [(x0, 1.0 - fx), (x0 + 1.0, fx)] {
                    if wx == 0.0 || xx < 0.0 || xx >= w as f64 {
                        continue;
                    }
                    let s = (yy as usize * w + xx as usize) * c;
                    for k in 0..c {
                        out[o + k] += wy * wx * src[s + k];
                    }
                }
            }
        }
    }
    for v in &mut out {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape as input")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([9, 7, 3], |_| rng.random())
    }

    #[test]
    fn collapsed_config_is_identity() {
        let img = image(1);
        let out = augment(&img, &AugmentConfig::identity(), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(out, img);
    }

    #[test]
    fn brightness_clamps() {
        let img = Tensor::full([2, 2, 1], 1.0);
        let cfg = AugmentConfig { brightness: (1.1, 1.1), ..AugmentConfig::identity() };
        let out = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = image(2);
        let cfg = AugmentConfig { flip_prob: 1.0, ..AugmentConfig::identity() };
        let out = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.at(&[4, 0, 1]), img.at(&[4, 6, 1]));
        assert_eq!(out.at(&[0, 2, 2]), img.at(&[0, 4, 2]));
    }

    #[test]
    fn seeded_output_repeats() {
        let img = image(4);
        let cfg = AugmentConfig::default();
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(8));
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a, b);
        assert_ne!(a, img);
    }

    #[test]
    fn limits_are_validated() {
        assert!(AugmentConfig::default().validate().is_ok());
        assert!(AugmentConfig { rotation_deg: 30.0, ..Default::default() }.validate().is_err());
    }
}
