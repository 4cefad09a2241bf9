//! The assembled segmentation model: pixel network, learned queries,
//! the multi-resolution mask-attention decoder and its prediction heads.

mod checkpoint;
mod config;
mod inference;

pub use checkpoint::CheckpointError;
pub use config::{DecoderConfig, Enhancement, ModelConfig};
pub use inference::{semantic_inference, semantic_inference_lowres, LabelMap, MASK_STRIDE};

use crate::cma::{decoder_layer, CmaLayerParams, LayerInputs};
use crate::ndtensor::{Result, Tensor, TensorError, Var};
use crate::params::{Affine, Binder, Norm, ParamId, ParamInit, ParamStore};
use crate::pixelnet::{encode, pixel_decode_multiscale, FeaturePyramid, PixelNetParams};

/// Learned query features `X₀` and query position embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuerySet {
    pub x0: ParamId,
    pub q_pos: ParamId,
    pub n_queries: usize,
}

/// Shared class and mask heads applied after every decoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadParams {
    pub norm: Norm,
    pub class: Affine,
    pub mask_mlp: [Affine; 3],
}

impl HeadParams {
    pub fn new(store: &mut ParamStore, init: &mut ParamInit, d: usize, n_classes: usize) -> Self {
        Self {
            norm: Norm::new(store, "head.norm", d),
            class: Affine::new(store, init, "head.class", d, n_classes + 1),
            mask_mlp: [0, 1, 2].map(|i| Affine::new(store, init, &format!("head.mask{i}"), d, d)),
        }
    }
}

/// Class and mask logits of one decoder stage.
#[derive(Debug, Clone, Copy)]
pub struct LayerPrediction<'t> {
    /// `N × (K+1)`, no-object last.
    pub class_logits: Var<'t>,
    /// `N × (h·w)` at ¼ input resolution.
    pub mask_logits: Var<'t>,
    pub mask_hw: (usize, usize),
}

impl LayerPrediction<'_> {
    pub fn values(&self) -> Prediction {
        let (h, w) = self.mask_hw;
        let class_logits = self.class_logits.value();
        let n = class_logits.shape()[0];
        let mask_logits = self
            .mask_logits
            .value()
            .reshaped(&[n, h, w])
            .expect("mask logits are N×h×w");
        Prediction {
            class_logits,
            mask_logits,
        }
    }
}

/// Detached prediction values.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `N × (K+1)`.
    pub class_logits: Tensor,
    /// `N × h × w`.
    pub mask_logits: Tensor,
}

impl Prediction {
    pub fn n_queries(&self) -> usize {
        self.class_logits.shape()[0]
    }

    pub fn n_classes(&self) -> usize {
        self.class_logits.shape()[1] - 1
    }

    pub fn mask_hw(&self) -> (usize, usize) {
        (self.mask_logits.shape()[1], self.mask_logits.shape()[2])
    }
}

/// Class logits `= affine(LN(x))`; mask logits `= ⟨mlp(LN(x))_i, F(p)⟩`
/// with a 3-layer ReLU MLP.
pub fn predict_heads<'t>(
    b: &Binder<'t, '_>,
    x: Var<'t>,
    mask_features: Var<'t>,
    heads: &HeadParams,
) -> Result<LayerPrediction<'t>> {
    let (h, w, d) = match mask_features.shape()[..] {
        [h, w, d] => (h, w, d),
        ref s => {
            return Err(TensorError::Invalid {
                op: "predict_heads",
                msg: format!("mask features must be h×w×d, got {s:?}"),
            })
        }
    };
    let xs = x.shape();
    if xs.len() != 2 || xs[1] != d {
        return Err(TensorError::Shape {
            op: "predict_heads",
            lhs: xs,
            rhs: vec![h, w, d],
        });
    }
    let xn = heads.norm.forward(b, x)?;
    let class_logits = heads.class.forward(b, xn)?;
    let [m0, m1, m2] = &heads.mask_mlp;
    let e = m0.forward(b, xn)?.relu()?;
    let e = m1.forward(b, e)?.relu()?;
    let e = m2.forward(b, e)?;
    let pixels = mask_features.reshape(&[h * w, d])?;
    let mask_logits = e.matmul(pixels.transpose()?)?;
    Ok(LayerPrediction {
        class_logits,
        mask_logits,
        mask_hw: (h, w),
    })
}

/// Output of a full forward pass: the initial prediction followed by one
/// prediction per decoder layer.
#[derive(Debug, Clone)]
pub struct ForwardOutput<'t> {
    pub predictions: Vec<LayerPrediction<'t>>,
}

impl<'t> ForwardOutput<'t> {
    pub fn last(&self) -> &LayerPrediction<'t> {
        self.predictions.last().expect("at least the initial prediction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    /// Initialization seed, carried through checkpoints for reporting.
    pub seed: u64,
    pub store: ParamStore,
    pub pixel: PixelNetParams,
    pub queries: QuerySet,
    pub layers: Vec<CmaLayerParams>,
    pub heads: HeadParams,
}

impl SegModel {
    /// Builds a freshly initialized model. Parameters shared with the
    /// non-enhanced baseline are drawn from one stream and the
    /// low-resolution branches from another, so for a fixed seed the
    /// shared parameters do not depend on the enhancement setting.
    pub fn new(config: ModelConfig, seed: u64) -> std::result::Result<Self, String> {
        config.validate()?;
        let d = config.d;
        let mut store = ParamStore::new();
        let mut init = ParamInit::new(seed);
        let mut lo_init = ParamInit::new(seed ^ 0x9e37_79b9_7f4a_7c15);
        let pixel = PixelNetParams::new(&mut store, &mut init, d);
        let n = config.n_queries;
        let queries = QuerySet {
            x0: store.add("query.x0", init.uniform(&[n, d], 1.0)),
            q_pos: store.add("query.pos", init.uniform(&[n, d], 1.0)),
            n_queries: n,
        };
        let dec = &config.decoder;
        let layers = dec
            .resolution_schedule
            .iter()
            .enumerate()
            .map(|(l, &stride)| {
                CmaLayerParams::new(
                    &mut store,
                    &mut init,
                    &mut lo_init,
                    &format!("decoder.layer{l}"),
                    d,
                    dec.enhancement.at(stride),
                    config.share_query_proj,
                )
            })
            .collect();
        let heads = HeadParams::new(&mut store, &mut init, d, config.n_classes);
        Ok(Self {
            config,
            seed,
            store,
            pixel,
            queries,
            layers,
            heads,
        })
    }

    /// `(x0, x0_d, initial prediction)`; both query streams start at `X₀`.
    pub fn init_queries<'t>(
        &self,
        b: &Binder<'t, '_>,
        mask_features: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>, LayerPrediction<'t>)> {
        let x0 = b.p(self.queries.x0);
        let pred = predict_heads(b, x0, mask_features, &self.heads)?;
        Ok((x0, x0, pred))
    }

    /// Runs every decoder layer; layer `l` attends to the decoded level at
    /// `resolution_schedule[l]` under the mask of prediction `l`.
    pub fn decoder_forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        levels: &FeaturePyramid<'t>,
        mask_features: Var<'t>,
    ) -> Result<Vec<LayerPrediction<'t>>> {
        let (mut x, mut x_d, pred0) = self.init_queries(b, mask_features)?;
        let q_pos = b.p(self.queries.q_pos);
        let mut preds = vec![pred0];
        let mut mask = pred0.values().mask_logits;
        for (l, layer) in self.layers.iter().enumerate() {
            let stride = self.config.decoder.resolution_schedule[l];
            let feature = levels.level(stride).ok_or(TensorError::Invalid {
                op: "decoder_forward",
                msg: format!("no pyramid level at stride {stride}"),
            })?;
            let out = decoder_layer(
                b,
                LayerInputs {
                    x_prev: x,
                    x_prev_d: x_d,
                    q_pos: Some(q_pos),
                    feature,
                    mask_logits: &mask,
                },
                layer,
            )?;
            x = out.x_final;
            if let Some(lo) = out.x_lo {
                x_d = lo;
            }
            let pred = predict_heads(b, x, mask_features, &self.heads)?;
            mask = pred.values().mask_logits;
            preds.push(pred);
        }
        Ok(preds)
    }

    /// Image (`H×W×3`, values in `[0,1]`) to all stage predictions.
    pub fn forward<'t>(&self, b: &Binder<'t, '_>, image: &Tensor) -> Result<ForwardOutput<'t>> {
        let img = b.constant(image);
        let pyramid = encode(b, img, &self.pixel)?;
        let decoded = pixel_decode_multiscale(b, &pyramid, &self.pixel)?;
        let predictions = self.decoder_forward(b, &decoded.levels, decoded.mask_features)?;
        Ok(ForwardOutput { predictions })
    }

    /// Inference-only forward pass returning the final-stage label map.
    pub fn predict_labels(&self, image: &Tensor) -> Result<LabelMap> {
        let tape = crate::ndtensor::Tape::new();
        let b = Binder::infer(&tape, &self.store);
        let out = self.forward(&b, image)?;
        Ok(semantic_inference(&out.last().values()))
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Model whose parameters went through `f32` (what a checkpoint holds).
    pub fn quantized(&self) -> Self {
        Self {
            store: self.store.quantized_f32(),
            ..self.clone()
        }
    }
}
