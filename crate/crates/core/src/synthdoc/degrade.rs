use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imaging::Image;

/// Parameters of one deterministic degradation pass.
///
/// `ink_level` lifts black ink towards gray (0 keeps it black). `background_shade` darkens the page with a left-to-right gradient: the
/// rightmost column is multiplied by `1 - background_shade`. `occlusion_rate`
/// is the expected number of occluding patches per glyph-sized cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    #[serde(default)]
    pub ink_level: f64,
    pub gaussian_sigma: f64,
    pub salt_pepper_rate: f64,
    pub background_shade: f64,
    pub blur_radius: usize,
    pub occlusion_rate: f64,
    pub seed: u64,
}

impl DegradationConfig {
    pub fn none(seed: u64) -> Self {
        DegradationConfig {
            ink_level: 0.0,
            gaussian_sigma: 0.0,
            salt_pepper_rate: 0.0,
            background_shade: 0.0,
            blur_radius: 0,
            occlusion_rate: 0.0,
            seed,
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.ink_level)
            && self.gaussian_sigma >= 0.0
            && (0.0..=1.0).contains(&self.salt_pepper_rate)
            && (0.0..=1.0).contains(&self.background_shade)
            && (0.0..=1.0).contains(&self.occlusion_rate)
    }
}

/// Apply ink fading, shading, blur, Gaussian noise, salt-and-pepper and occlusion, in that
/// order, then clamp to `[0, 1]`.
pub fn degrade(image: &Image, cfg: &DegradationConfig) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();

    if cfg.ink_level > 0.0 {
        for v in out.data_mut() {
            *v = cfg.ink_level + (1.0 - cfg.ink_level) * *v;
        }
    }

    if cfg.background_shade > 0.0 && w > 0 {
        let denom = (w.max(2) - 1) as f64;
        for r in 0..h {
            for c in 0..w {
                let factor = 1.0 - cfg.background_shade * (c as f64 / denom);
                out.set(r, c, out.get(r, c) * factor);
            }
        }
    }

    if cfg.blur_radius > 0 {
        out = box_blur(&out, cfg.blur_radius);
    }

    if cfg.gaussian_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.gaussian_sigma).expect("sigma is finite and positive");
        for v in out.data_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    if cfg.salt_pepper_rate > 0.0 {
        for v in out.data_mut() {
            if rng.gen::<f64>() < cfg.salt_pepper_rate {
                *v = if rng.gen::<bool>() { 1.0 } else { 0.0 };
            }
        }
    }

    if cfg.occlusion_rate > 0.0 && h >= 2 && w >= 2 {
        let cells = (w / super::CELL_WIDTH).max(1);
        let patches = (cfg.occlusion_rate * cells as f64).round() as usize;
        let (ph, pw) = ((h / 3).max(1), (super::CELL_WIDTH / 2).max(1).min(w));
        for _ in 0..patches {
            let r0 = rng.gen_range(0..=h - ph);
            let c0 = rng.gen_range(0..=w - pw);
            let shade = rng.gen_range(0.0..0.4);
            for r in r0..r0 + ph {
                for c in c0..c0 + pw {
                    out.set(r, c, shade);
                }
            }
        }
    }

    out.clamp_unit();
    out
}

fn box_blur(image: &Image, radius: usize) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = Image::filled(h, w, 0.0);
    let r = radius as isize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut sum = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    sum += image.get(yy, xx);
                }
            }
            out.set(y as usize, x as usize, sum / ((2 * r + 1) * (2 * r + 1)) as f64);
        }
    }
    out
}
