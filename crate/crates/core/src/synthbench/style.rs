use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::scene::SceneSpec;

/// Linear RGB in `[0, 1]`, row-major `H×W×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        Self {
            h,
            w,
            data: rgb.repeat(h * w),
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data
            .iter()
            .map(|&v| (f64::from(v) - m).powi(2))
            .sum::<f64>()
            / self.data.len() as f64
    }
}

const BASE_COLORS: [[f64; 3]; 6] = [
    [0.55, 0.70, 0.88], // sky
    [0.42, 0.52, 0.30], // terrain
    [0.38, 0.37, 0.40], // road
    [0.78, 0.24, 0.20], // vehicle
    [0.88, 0.78, 0.22], // sign
    [0.30, 0.32, 0.62], // pole
];

/// Style-free rendering: class base colour plus each primitive's tint.
pub fn render_base(scene: &SceneSpec) -> Image {
    let (h, w) = scene.canvas;
    let owner = scene.owner_map();
    let mut data = Vec::with_capacity(h * w * 3);
    for &o in &owner {
        let p = &scene.layout[o];
        let base = BASE_COLORS[p.class_id as usize % BASE_COLORS.len()];
        for c in 0..3 {
            data.push((base[c] + p.tint[c]).clamp(0.0, 1.0) as f32);
        }
    }
    Image { h, w, data }
}

/// Appearance parameters of one domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DomainStyle {
    /// Rotation about the grey axis, radians.
    pub hue_shift: f64,
    /// Additive, in `[-0.3, 0.3]`.
    pub brightness: f64,
    /// Multiplicative about 0.5, in `[0.6, 1.5]`.
    pub contrast: f64,
    /// Gaussian noise standard deviation, in `[0, 0.1]`.
    pub noise_sigma: f64,
    /// Blend weight toward grey 0.7, in `[0, 0.6]`.
    pub fog_alpha: f64,
    /// Left-to-right gain slope, in `[-0.3, 0.3]`.
    pub illum_gradient: f64,
    /// Relative size of the per-sample perturbation, in `[0, 1]`.
    pub jitter: f64,
}

pub const FOG_GRAY: f64 = 0.7;

impl DomainStyle {
    pub const IDENTITY: Self = Self {
        hue_shift: 0.0,
        brightness: 0.0,
        contrast: 1.0,
        noise_sigma: 0.0,
        fog_alpha: 0.0,
        illum_gradient: 0.0,
        jitter: 0.0,
    };

    pub fn validate(&self) -> Result<(), String> {
        let checks = [
            ("brightness", self.brightness, -0.3, 0.3),
            ("contrast", self.contrast, 0.6, 1.5),
            ("noise_sigma", self.noise_sigma, 0.0, 0.1),
            ("fog_alpha", self.fog_alpha, 0.0, 0.6),
            ("illum_gradient", self.illum_gradient, -0.3, 0.3),
            ("jitter", self.jitter, 0.0, 1.0),
        ];
        for (name, v, lo, hi) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(format!("{name} = {v} outside [{lo}, {hi}]"));
            }
        }
        if !self.hue_shift.is_finite() {
            return Err("hue_shift must be finite".into());
        }
        Ok(())
    }

    /// Per-sample variant: each parameter moves by up to `jitter` times a
    /// tenth of its range, then is clamped back into range.
    fn jittered(&self, rng: &mut ChaCha8Rng) -> Self {
        if self.jitter == 0.0 {
            return *self;
        }
        let mut nudge = |v: f64, lo: f64, hi: f64| {
            let span = 0.1 * (hi - lo) * self.jitter;
            (v + rng.random_range(-span..=span)).clamp(lo, hi)
        };
        Self {
            hue_shift: nudge(self.hue_shift, -std::f64::consts::PI, std::f64::consts::PI),
            brightness: nudge(self.brightness, -0.3, 0.3),
            contrast: nudge(self.contrast, 0.6, 1.5),
            noise_sigma: nudge(self.noise_sigma, 0.0, 0.1),
            fog_alpha: nudge(self.fog_alpha, 0.0, 0.6),
            illum_gradient: nudge(self.illum_gradient, -0.3, 0.3),
            jitter: self.jitter,
        }
    }
}

/// The shipped domains. `clear` is the usual source domain.
pub const DOMAIN_PRESETS: [(&str, DomainStyle); 5] = [
    (
        "clear",
        DomainStyle {
            hue_shift: 0.0,
            brightness: 0.0,
            contrast: 1.0,
            noise_sigma: 0.01,
            fog_alpha: 0.0,
            illum_gradient: 0.0,
            jitter: 0.3,
        },
    ),
    (
        "dusk",
        DomainStyle {
            hue_shift: 0.35,
            brightness: -0.2,
            contrast: 0.8,
            noise_sigma: 0.02,
            fog_alpha: 0.0,
            illum_gradient: 0.2,
            jitter: 0.3,
        },
    ),
    (
        "fog",
        DomainStyle {
            hue_shift: 0.0,
            brightness: 0.05,
            contrast: 0.85,
            noise_sigma: 0.01,
            fog_alpha: 0.5,
            illum_gradient: 0.0,
            jitter: 0.3,
        },
    ),
    (
        "noiseCam",
        DomainStyle {
            hue_shift: -0.2,
            brightness: 0.0,
            contrast: 1.3,
            noise_sigma: 0.08,
            fog_alpha: 0.0,
            illum_gradient: -0.2,
            jitter: 0.3,
        },
    ),
    (
        "coolHue",
        DomainStyle {
            hue_shift: 1.2,
            brightness: 0.05,
            contrast: 1.1,
            noise_sigma: 0.02,
            fog_alpha: 0.1,
            illum_gradient: 0.1,
            jitter: 0.3,
        },
    ),
];

pub fn domain_preset(name: &str) -> Option<DomainStyle> {
    DOMAIN_PRESETS
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(name))
        .map(|(_, s)| *s)
}

/// Rotation by `theta` about the `(1,1,1)` axis.
fn hue_matrix(theta: f64) -> [[f64; 3]; 3] {
    let (s, c) = theta.sin_cos();
    let k = 1.0 / 3.0;
    let r = 3f64.sqrt().recip();
    let a = c + (1.0 - c) * k;
    let b = (1.0 - c) * k - s * r;
    let d = (1.0 - c) * k + s * r;
    [[a, b, d], [d, a, b], [b, d, a]]
}

/// Applies a style to a rendered image. Steps run in a fixed order:
/// illumination gradient, contrast, brightness, hue rotation, fog, noise,
/// clipping.
pub fn stylize(base: &Image, style: &DomainStyle, jitter_seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let s = style.jittered(&mut rng);
    let hue = (s.hue_shift != 0.0).then(|| hue_matrix(s.hue_shift));
    let noise = (s.noise_sigma > 0.0).then(|| Normal::new(0.0, s.noise_sigma).expect("valid sigma"));
    let mut data = Vec::with_capacity(base.data.len());
    for y in 0..base.h {
        for x in 0..base.w {
            let i = (y * base.w + x) * 3;
            let u = (x as f64 + 0.5) / base.w as f64;
            let gain = 1.0 + s.illum_gradient * (2.0 * u - 1.0);
            let mut px = [0.0; 3];
            for c in 0..3 {
                let v = f64::from(base.data[i + c]) * gain;
                px[c] = (v - 0.5) * s.contrast + 0.5 + s.brightness;
            }
            if let Some(m) = &hue {
                px = [0, 1, 2].map(|r| m[r][0] * px[0] + m[r][1] * px[1] + m[r][2] * px[2]);
            }
            for v in &mut px {
                *v = (1.0 - s.fog_alpha) * *v + s.fog_alpha * FOG_GRAY;
                if let Some(n) = &noise {
                    *v += n.sample(&mut rng);
                }
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Image {
        h: base.h,
        w: base.w,
        data,
    }
}

/// Renders `scene` and applies `style`; labels are untouched by design.
pub fn apply_style(scene: &SceneSpec, style: &DomainStyle, jitter_seed: u64) -> Image {
    stylize(&render_base(scene), style, jitter_seed)
}
