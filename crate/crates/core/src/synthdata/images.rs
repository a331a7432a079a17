use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng::{stream, sub_seed};

/// Per-channel renderer applied to the content map.
///
/// `pixel[ch] = gain[ch] * content + bias[ch] + texture[ch] * sin(2 pi f (i + j) / side)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    pub texture: Vec<f64>,
    pub texture_freq: f64,
}

/// One image environment: the corner motif equals the label with
/// probability `rho`, and the style is drawn uniformly from `styles`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEnv {
    pub rho: f64,
    pub styles: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleImageConfig {
    pub side: usize,
    pub classes: usize,
    pub styles: Vec<StyleSpec>,
    pub envs: Vec<ImageEnv>,
    pub noise_sigma: f64,
    pub patch_size: usize,
}

pub const MAX_CLASSES: usize = 6;

impl Default for StyleImageConfig {
    fn default() -> Self {
        Self {
            side: 16,
            classes: 2,
            styles: vec![
                StyleSpec {
                    gain: vec![1.3, 0.7, 1.0],
                    bias: vec![0.15, -0.15, 0.0],
                    texture: vec![0.15, -0.15, 0.0],
                    texture_freq: 1.0,
                },
                StyleSpec {
                    gain: vec![0.7, 1.3, 1.0],
                    bias: vec![-0.15, 0.15, 0.0],
                    texture: vec![0.15, -0.15, 0.0],
                    texture_freq: 3.0,
                },
            ],
            envs: vec![
                ImageEnv {
                    rho: 0.9,
                    styles: vec![0, 1],
                },
                ImageEnv {
                    rho: 0.7,
                    styles: vec![0, 1],
                },
            ],
            noise_sigma: 0.3,
            patch_size: 4,
        }
    }
}

impl StyleImageConfig {
    pub fn channels(&self) -> usize {
        self.styles.first().map_or(0, |s| s.gain.len())
    }

    pub fn sample_shape(&self) -> Vec<usize> {
        vec![self.channels(), self.side, self.side]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=MAX_CLASSES).contains(&self.classes) {
            return bad(format!("classes must be in 2..={MAX_CLASSES}, got {}", self.classes));
        }
        if self.patch_size < 2 || self.side < 2 * self.patch_size + 4 {
            return bad(format!(
                "side {} too small for patch size {}",
                self.side, self.patch_size
            ));
        }
        let ch = self.channels();
        if ch == 0 {
            return bad("style bank must be non-empty with at least one channel".into());
        }
        for (i, s) in self.styles.iter().enumerate() {
            if s.gain.len() != ch || s.bias.len() != ch || s.texture.len() != ch {
                return bad(format!("styles[{i}] must give {ch} values for gain, bias and texture"));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if self.envs.is_empty() {
            return bad("at least one environment is required".into());
        }
        for (i, e) in self.envs.iter().enumerate() {
            self.validate_env(e).map_err(|err| Error::Config(format!("envs[{i}]: {err}")))?;
        }
        if self.envs.len() > 1 && self.envs.iter().all(|e| e.rho == self.envs[0].rho) {
            return bad("training environments must not all share one rho".into());
        }
        Ok(())
    }

    pub fn validate_env(&self, env: &ImageEnv) -> Result<()> {
        if !(0.0..=1.0).contains(&env.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1], got {}", env.rho)));
        }
        if env.styles.is_empty() || env.styles.iter().any(|&s| s >= self.styles.len()) {
            return Err(Error::Config(format!("invalid style list {:?}", env.styles)));
        }
        Ok(())
    }

    /// Class shape `y` over the full image, 1 inside the shape.
    pub fn shape_mask(&self, y: usize) -> Vec<f64> {
        let (o, l) = (self.patch_size, self.side - self.patch_size - 1);
        let mut m = vec![0.0; self.side * self.side];
        for i in 0..l {
            for j in 0..l {
                let u = 2.0 * (i as f64 + 0.5) / l as f64 - 1.0;
                let v = 2.0 * (j as f64 + 0.5) / l as f64 - 1.0;
                let on = match y {
                    0 => u.abs() < 0.25 || v.abs() < 0.25,
                    1 => u.abs().max(v.abs()) > 0.55,
                    2 => u.abs() + v.abs() < 0.7,
                    3 => (u.abs() - v.abs()).abs() < 0.25,
                    4 => ((u + 1.0) * 2.5).floor() as i64 % 2 == 0,
                    _ => u * u + v * v < 0.45,
                };
                if on {
                    m[(o + i) * self.side + o + j] = 1.0;
                }
            }
        }
        m
    }

    /// Corner motif `k` over the full image.
    pub fn motif_mask(&self, k: usize) -> Vec<f64> {
        let p = self.patch_size;
        let mut m = vec![0.0; self.side * self.side];
        for i in 0..p {
            for j in 0..p {
                let on = match k {
                    0 => true,
                    1 => (i + j) % 2 == 0,
                    2 => i % 2 == 0,
                    3 => j % 2 == 0,
                    4 => i == 0 || j == 0 || i == p - 1 || j == p - 1,
                    _ => i == j,
                };
                if on {
                    m[i * self.side + j] = 1.0;
                }
            }
        }
        m
    }

    /// Noise-free image for (class, motif, style), channel-major.
    pub fn render(&self, y: usize, motif: usize, style: usize) -> Vec<f64> {
        let content: Vec<f64> = self
            .shape_mask(y)
            .iter()
            .zip(self.motif_mask(motif))
            .map(|(a, b)| a + b)
            .collect();
        let s = &self.styles[style];
        let n = self.side;
        let mut img = Vec::with_capacity(self.channels() * n * n);
        for ch in 0..self.channels() {
            for i in 0..n {
                for j in 0..n {
                    let wave = (2.0 * PI * s.texture_freq * (i + j) as f64 / n as f64).sin();
                    img.push(s.gain[ch] * content[i * n + j] + s.bias[ch] + s.texture[ch] * wave);
                }
            }
        }
        img
    }
}

/// Draws `n` images from training environment `env_index`.
pub fn sample_styled_images(cfg: &StyleImageConfig, env_index: usize, n: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let env = cfg.envs.get(env_index).ok_or_else(|| {
        Error::Range(format!(
            "environment {env_index} requested but only {} exist",
            cfg.envs.len()
        ))
    })?;
    sample_styled_images_env(cfg, env, env_index, n, seed)
}

/// Draws `n` images from an arbitrary environment (e.g. a held-out test one).
pub fn sample_styled_images_env(
    cfg: &StyleImageConfig,
    env: &ImageEnv,
    env_id: usize,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    cfg.validate_env(env)?;
    if n == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, stream::DATA, 1000 + env_id as u64));
    let samples = (0..n)
        .map(|_| {
            let y = rng.random_range(0..cfg.classes);
            let style = env.styles[rng.random_range(0..env.styles.len())];
            let motif = if rng.random_bool(env.rho) {
                y
            } else {
                let k = rng.random_range(0..cfg.classes - 1);
                if k >= y {
                    k + 1
                } else {
                    k
                }
            };
            let mut x = cfg.render(y, motif, style);
            if cfg.noise_sigma > 0.0 {
                for v in &mut x {
                    *v += cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let mut s = Sample::new(x, y, env_id);
            s.true_style = Some(style);
            s.true_spurious = Some(motif);
            s
        })
        .collect();
    Ok(Dataset {
        samples,
        sample_shape: cfg.sample_shape(),
        classes: cfg.classes,
    })
}
