//! Small convolutional encoder and FPN-style pixel decoder.
//!
//! `encode` produces stride-4/8/16/32 maps from a stride-2 stem followed by
//! four stride-2 stages (3×3 conv → layer norm over channels → ReLU), each
//! projected to the common width `d`. `pixel_decode` walks the pyramid
//! coarse to fine with nearest-neighbour upsampling and summation and ends
//! with the ¼-resolution mask-feature map.

use crate::ndtensor::{Result, Tensor, TensorError, Var};
use crate::params::{Affine, Binder, Norm, ParamId, ParamInit, ParamStore};

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Input height and width must both be multiples of this.
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    norm: Norm,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, init: &mut ParamInit, name: &str, c_in: usize, c_out: usize) -> Self {
        let fan_in = 9 * c_in;
        let weight = store.add(
            format!("{name}.weight"),
            init.glorot(&[3, 3, c_in, c_out], fan_in, 9 * c_out),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        let norm = Norm::new(store, &format!("{name}.norm"), c_out);
        Self { weight, bias, norm }
    }

    fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.conv2d(b.p(self.weight), b.p(self.bias), 2, 1)?;
        self.norm.forward(b, y)?.relu()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelNetParams {
    pub d: usize,
    stem: ConvBlock,
    stages: [ConvBlock; 4],
    /// Encoder-side projections to width `d`, one per stride.
    proj: [Affine; 4],
    /// Decoder-side lateral maps, one per stride.
    lateral: [Affine; 4],
    mask_proj: Affine,
}

impl PixelNetParams {
    pub fn new(store: &mut ParamStore, init: &mut ParamInit, d: usize) -> Self {
        let stem_c = (d / 2).max(8);
        let stem = ConvBlock::new(store, init, "pixel.stem", 3, stem_c);
        let stages = [
            ConvBlock::new(store, init, "pixel.stage4", stem_c, d),
            ConvBlock::new(store, init, "pixel.stage8", d, d),
            ConvBlock::new(store, init, "pixel.stage16", d, d),
            ConvBlock::new(store, init, "pixel.stage32", d, d),
        ];
        let proj = STRIDES.map(|s| Affine::new(store, init, &format!("pixel.proj{s}"), d, d));
        let lateral =
            STRIDES.map(|s| Affine::new(store, init, &format!("pixel.lateral{s}"), d, d));
        let mask_proj = Affine::new(store, init, "pixel.mask_proj", d, d);
        Self {
            d,
            stem,
            stages,
            proj,
            lateral,
            mask_proj,
        }
    }
}

/// Feature maps at strides 4, 8, 16 and 32, all of width `d`.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid<'t> {
    levels: [Var<'t>; 4],
    input_hw: (usize, usize),
}

impl<'t> FeaturePyramid<'t> {
    /// Validates shapes: level `s` must be `(H/s)×(W/s)×d`.
    pub fn new(levels: [Var<'t>; 4], input_hw: (usize, usize)) -> Result<Self> {
        let (h, w) = input_hw;
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(size_error(h, w));
        }
        let d = levels[0].shape().last().copied().unwrap_or(0);
        for (v, s) in levels.iter().zip(STRIDES) {
            let expect = vec![h / s, w / s, d];
            if v.shape() != expect {
                return Err(TensorError::Shape {
                    op: "feature_pyramid",
                    lhs: v.shape(),
                    rhs: expect,
                });
            }
        }
        Ok(Self { levels, input_hw })
    }

    pub fn level(&self, stride: usize) -> Option<Var<'t>> {
        STRIDES
            .iter()
            .position(|&s| s == stride)
            .map(|i| self.levels[i])
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    pub fn width(&self) -> usize {
        *self.levels[0].shape().last().expect("rank 3")
    }
}

fn size_error(h: usize, w: usize) -> TensorError {
    TensorError::Invalid {
        op: "encode",
        msg: format!("input {h}×{w} must have height and width that are multiples of {INPUT_MULTIPLE}"),
    }
}

/// Encodes an `H×W×3` image into the stride-4/8/16/32 pyramid.
pub fn encode<'t>(
    b: &Binder<'t, '_>,
    image: Var<'t>,
    params: &PixelNetParams,
) -> Result<FeaturePyramid<'t>> {
    let (h, w) = match image.shape()[..] {
        [h, w, 3] if h % INPUT_MULTIPLE == 0 && w % INPUT_MULTIPLE == 0 && h > 0 && w > 0 => {
            (h, w)
        }
        [h, w, 3] => return Err(size_error(h, w)),
        ref s => {
            return Err(TensorError::Invalid {
                op: "encode",
                msg: format!("expected an H×W×3 image, got {s:?}"),
            })
        }
    };
    let mut x = params.stem.forward(b, image)?;
    let mut levels = Vec::with_capacity(4);
    for (stage, proj) in params.stages.iter().zip(&params.proj) {
        x = stage.forward(b, x)?;
        levels.push(proj.forward(b, x)?);
    }
    let levels: [Var<'t>; 4] = levels.try_into().expect("four stages");
    FeaturePyramid::new(levels, (h, w))
}

/// Pixel-decoder output: decoded multi-scale maps (used as attention
/// memory) and the ¼-resolution mask features.
#[derive(Debug, Clone, Copy)]
pub struct PixelDecoderOutput<'t> {
    pub levels: FeaturePyramid<'t>,
    pub mask_features: Var<'t>,
}

/// Coarse-to-fine lateral sum; returns the decoded pyramid and mask features.
pub fn pixel_decode_multiscale<'t>(
    b: &Binder<'t, '_>,
    p: &FeaturePyramid<'t>,
    params: &PixelNetParams,
) -> Result<PixelDecoderOutput<'t>> {
    let mut decoded: [Option<Var<'t>>; 4] = [None; 4];
    let mut top: Option<Var<'t>> = None;
    for i in (0..4).rev() {
        let lat = params.lateral[i].forward(b, p.levels[i])?;
        let y = match top {
            Some(t) => lat.add(t.upsample_nearest(2)?)?,
            None => lat,
        };
        decoded[i] = Some(y);
        top = Some(y);
    }
    let levels = FeaturePyramid::new(decoded.map(|v| v.expect("filled")), p.input_hw)?;
    let mask_features = params.mask_proj.forward(b, levels.levels[0])?;
    Ok(PixelDecoderOutput {
        levels,
        mask_features,
    })
}

/// `(H/4)×(W/4)×d` mask features.
pub fn pixel_decode<'t>(
    b: &Binder<'t, '_>,
    p: &FeaturePyramid<'t>,
    params: &PixelNetParams,
) -> Result<Var<'t>> {
    Ok(pixel_decode_multiscale(b, p, params)?.mask_features)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndtensor::Tape;

    fn setup(d: usize) -> (ParamStore, PixelNetParams) {
        let mut store = ParamStore::new();
        let p = PixelNetParams::new(&mut store, &mut ParamInit::new(3), d);
        (store, p)
    }

    #[test]
    fn pyramid_shapes_for_64() {
        let (store, p) = setup(8);
        let tape = Tape::new();
        let b = Binder::infer(&tape, &store);
        let img = tape.constant(&Tensor::full(&[64, 64, 3], 0.5));
        let pyr = encode(&b, img, &p).unwrap();
        for (s, hw) in [(4, 16), (8, 8), (16, 4), (32, 2)] {
            assert_eq!(pyr.level(s).unwrap().shape(), vec![hw, hw, 8]);
        }
        let mf = pixel_decode(&b, &pyr, &p).unwrap();
        assert_eq!(mf.shape(), vec![16, 16, 8]);
    }

    #[test]
    fn rejects_sizes_off_the_grid() {
        let (store, p) = setup(8);
        let tape = Tape::new();
        let b = Binder::infer(&tape, &store);
        let img = tape.constant(&Tensor::zeros(&[48, 64, 3]));
        let err = encode(&b, img, &p).unwrap_err();
        assert!(err.to_string().contains("multiples of 32"), "{err}");
        let gray = tape.constant(&Tensor::zeros(&[64, 64, 1]));
        assert!(encode(&b, gray, &p).is_err());
    }

    #[test]
    fn zero_image_is_finite_and_deterministic() {
        let (store, p) = setup(8);
        let run = || {
            let tape = Tape::new();
            let b = Binder::infer(&tape, &store);
            let img = tape.constant(&Tensor::zeros(&[32, 32, 3]));
            let pyr = encode(&b, img, &p).unwrap();
            STRIDES.map(|s| pyr.level(s).unwrap().data())
        };
        let a = run();
        assert!(a.iter().flatten().all(|v| v.is_finite()));
        assert_eq!(a, run());
    }

    #[test]
    fn zero_levels_decode_to_zero_without_bias() {
        let (store, p) = setup(4);
        let tape = Tape::new();
        let b = Binder::infer(&tape, &store);
        let levels = STRIDES.map(|s| tape.constant(&Tensor::zeros(&[64 / s, 64 / s, 4])));
        let pyr = FeaturePyramid::new(levels, (64, 64)).unwrap();
        let out = pixel_decode(&b, &pyr, &p).unwrap();
        assert_eq!(out.shape(), vec![16, 16, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coarsest_level_reaches_mask_features() {
        let (store, p) = setup(4);
        let decode = |bump: f64| {
            let tape = Tape::new();
            let b = Binder::infer(&tape, &store);
            let levels = STRIDES.map(|s| {
                let v = if s == 32 { bump } else { 0.1 };
                tape.constant(&Tensor::full(&[64 / s, 64 / s, 4], v))
            });
            let pyr = FeaturePyramid::new(levels, (64, 64)).unwrap();
            pixel_decode(&b, &pyr, &p).unwrap().data()
        };
        let base = decode(0.1);
        let bumped = decode(0.6);
        let delta: f64 = base.iter().zip(&bumped).map(|(a, b)| (a - b).abs()).sum();
        assert!(delta > 1e-6, "x32 perturbation had no effect");
    }

    #[test]
    fn pyramid_rejects_wrong_level_shape() {
        let tape = Tape::new();
        let mut levels = STRIDES.map(|s| tape.constant(&Tensor::zeros(&[64 / s, 64 / s, 4])));
        levels[2] = tape.constant(&Tensor::zeros(&[3, 4, 4]));
        assert!(FeaturePyramid::new(levels, (64, 64)).is_err());
    }
}
