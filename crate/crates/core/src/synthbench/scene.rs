use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::segmodel::LabelMap;

/// Class ids of the generator. Bands come first, then foreground objects.
pub const SKY: u8 = 0;
pub const TERRAIN: u8 = 1;
pub const ROAD: u8 = 2;
pub const VEHICLE: u8 = 3;
pub const SIGN: u8 = 4;
pub const POLE: u8 = 5;

pub const CLASS_NAMES: [&str; 6] = ["sky", "terrain", "road", "vehicle", "sign", "pole"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneConfig {
    pub h: usize,
    pub w: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { h: 64, w: 64 }
    }
}

impl SceneConfig {
    pub const N_CLASSES: usize = 6;

    pub fn validate(&self) -> Result<(), String> {
        if self.h == 0 || self.w == 0 || !self.h.is_multiple_of(32) || !self.w.is_multiple_of(32) {
            return Err(format!(
                "scene size {}×{} must be a positive multiple of 32",
                self.h, self.w
            ));
        }
        Ok(())
    }
}

/// Geometry of one layout element, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Full-width horizontal band covering rows `y0..y1`.
    Band { y0: usize, y1: usize },
    Rect { x: f64, y: f64, w: f64, h: f64 },
    Circle { cx: f64, cy: f64, r: f64 },
}

impl Shape {
    /// Whether the pixel centre `(px + 0.5, py + 0.5)` lies inside.
    pub fn contains(&self, px: usize, py: usize) -> bool {
        let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
        match *self {
            Shape::Band { y0, y1 } => (y0..y1).contains(&py),
            Shape::Rect { x, y, w, h } => fx >= x && fx < x + w && fy >= y && fy < y + h,
            Shape::Circle { cx, cy, r } => (fx - cx).powi(2) + (fy - cy).powi(2) <= r * r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub class_id: u8,
    pub shape: Shape,
    /// Per-object colour offset added to the class base colour.
    pub tint: [f64; 3],
}

/// A procedurally generated scene. Later primitives paint over earlier
/// ones; the first three bands cover the canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas: (usize, usize),
    pub layout: Vec<Primitive>,
}

impl SceneSpec {
    pub fn label_map(&self) -> LabelMap {
        let (h, w) = self.canvas;
        let mut labels = vec![SKY; h * w];
        for p in &self.layout {
            for y in 0..h {
                for x in 0..w {
                    if p.shape.contains(x, y) {
                        labels[y * w + x] = p.class_id;
                    }
                }
            }
        }
        LabelMap::new(h, w, labels)
    }

    /// Index into `layout` of the primitive visible at each pixel.
    pub(crate) fn owner_map(&self) -> Vec<usize> {
        let (h, w) = self.canvas;
        let mut owner = vec![0; h * w];
        for (i, p) in self.layout.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    if p.shape.contains(x, y) {
                        owner[y * w + x] = i;
                    }
                }
            }
        }
        owner
    }
}

fn tint(rng: &mut ChaCha8Rng, amp: f64) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(-amp..=amp))
}

/// Deterministic layered scene: sky, terrain and road bands, then two to
/// six vehicles, signs and poles with class-specific size ranges.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<(SceneSpec, LabelMap), String> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.h, cfg.w);
    let (hf, wf) = (h as f64, w as f64);
    let horizon = (hf * rng.random_range(0.25..0.42)).round() as usize;
    let road_top = (hf * rng.random_range(0.58..0.74)).round() as usize;
    let mut layout = vec![
        Primitive {
            class_id: SKY,
            shape: Shape::Band { y0: 0, y1: horizon },
            tint: tint(&mut rng, 0.04),
        },
        Primitive {
            class_id: TERRAIN,
            shape: Shape::Band { y0: horizon, y1: road_top },
            tint: tint(&mut rng, 0.04),
        },
        Primitive {
            class_id: ROAD,
            shape: Shape::Band { y0: road_top, y1: h },
            tint: tint(&mut rng, 0.04),
        },
    ];
    let n_objects = rng.random_range(2..=6);
    for _ in 0..n_objects {
        let class_id = rng.random_range(VEHICLE..=POLE);
        let shape = match class_id {
            VEHICLE => {
                let vw = wf * rng.random_range(0.16..0.34);
                let vh = hf * rng.random_range(0.10..0.18);
                let bottom = rng.random_range(road_top as f64 + vh * 0.5..=hf);
                Shape::Rect {
                    x: rng.random_range(-vw * 0.3..wf - vw * 0.7),
                    y: bottom - vh,
                    w: vw,
                    h: vh,
                }
            }
            SIGN => {
                let r = wf * rng.random_range(0.05..0.10);
                Shape::Circle {
                    cx: rng.random_range(r..wf - r),
                    cy: rng.random_range(hf * 0.1..horizon as f64 + hf * 0.15),
                    r,
                }
            }
            _ => {
                let pw = wf * rng.random_range(0.03..0.06);
                let ph = hf * rng.random_range(0.30..0.55);
                let bottom = rng.random_range(horizon as f64 + hf * 0.1..=road_top as f64 + hf * 0.1);
                Shape::Rect {
                    x: rng.random_range(0.0..wf - pw),
                    y: bottom - ph,
                    w: pw,
                    h: ph,
                }
            }
        };
        layout.push(Primitive {
            class_id,
            shape,
            tint: tint(&mut rng, 0.06),
        });
    }
    let scene = SceneSpec {
        seed,
        canvas: (h, w),
        layout,
    };
    let labels = scene.label_map();
    Ok((scene, labels))
}
