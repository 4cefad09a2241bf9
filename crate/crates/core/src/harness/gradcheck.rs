//! Finite-difference verification of every differentiable building block.
//!
//! Each check evaluates a function of a few random tensors (and, for layer
//! checks, of a parameter store), projects the output on a fixed random
//! direction `r`, and compares the reverse-mode gradient of `Σ r ⊙ out`
//! with central differences.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{masked_attention, scaled_self_attention, AttentionBias, AttentionParams};
use crate::cma::{cma_layer, CmaLayerParams, LayerInputs};
use crate::ndtensor::{OpKind, Result, Tape, Tensor, Var};
use crate::objective::{bce_mask_loss, cls_loss, dice_loss, GtSegment, Match};
use crate::params::{Binder, ParamInit, ParamStore};

pub const LAYER_CHECKS: [&str; 6] = [
    "masked_attention",
    "scaled_self_attention",
    "cma_layer",
    "dice_loss",
    "bce_mask_loss",
    "cls_loss",
];

/// Names every complete report must contain.
pub fn required_checks() -> Vec<&'static str> {
    OpKind::ALL
        .iter()
        .map(|k| k.name())
        .chain(LAYER_CHECKS)
        .collect()
}

#[derive(Debug, Clone)]
pub struct GradcheckOptions {
    pub seeds: Vec<u64>,
    pub eps: f64,
    pub tolerance: f64,
    /// Runs the analytic pass on a tape whose backward for this op is
    /// deliberately wrong (negative control).
    pub corrupt: Option<OpKind>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            eps: 1e-5,
            tolerance: 1e-4,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    /// Worst `|a − n| / max(|a|, |n|, 1e-8)` over coordinates and seeds.
    pub max_rel_err: f64,
    pub coordinates: usize,
    /// Set when the function itself failed to evaluate.
    pub error: Option<String>,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub results: Vec<CheckResult>,
    pub tolerance: f64,
}

impl GradcheckReport {
    /// Every check passed and no required check is missing.
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed) && self.missing().is_empty()
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.results.iter().filter(|r| !r.passed).map(|r| r.name).collect()
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.name == name)
    }

    /// Required check names missing from the report.
    pub fn missing(&self) -> Vec<&'static str> {
        required_checks()
            .into_iter()
            .filter(|n| self.get(n).is_none())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.results {
            let status = if r.passed { "ok  " } else { "FAIL" };
            let _ = write!(
                s,
                "{status} {:<22} max rel err {:.3e} over {} coords",
                r.name, r.max_rel_err, r.coordinates
            );
            if let Some(e) = &r.error {
                let _ = write!(s, " ({e})");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "{} of {} checks passed (tolerance {:e})",
            self.results.iter().filter(|r| r.passed).count(),
            self.results.len(),
            self.tolerance
        );
        s
    }
}

type CaseFn = Box<dyn for<'t, 's> Fn(&Binder<'t, 's>, &[Var<'t>]) -> Result<Var<'t>>>;

/// One instance of a check: free inputs, a parameter store (possibly
/// empty) and the function under test.
struct Case {
    inputs: Vec<Tensor>,
    store: ParamStore,
    f: CaseFn,
}

impl Case {
    fn new(inputs: Vec<Tensor>, f: CaseFn) -> Self {
        Self {
            inputs,
            store: ParamStore::new(),
            f,
        }
    }

    fn eval(&self, inputs: &[Tensor], store: &ParamStore, proj: &mut Option<Vec<f64>>, rng_seed: u64) -> Result<f64> {
        let tape = Tape::new();
        let b = Binder::infer(&tape, store);
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t)).collect();
        let out = (self.f)(&b, &vars)?.data();
        let r = proj.get_or_insert_with(|| direction(out.len(), rng_seed));
        Ok(out.iter().zip(r.iter()).map(|(a, b)| a * b).sum())
    }

    /// Reverse-mode gradients of the projected output, flattened over
    /// inputs then parameters.
    fn analytic(&self, corrupt: Option<OpKind>, proj: &mut Option<Vec<f64>>, rng_seed: u64) -> Result<Vec<f64>> {
        let tape = match corrupt {
            Some(k) => Tape::with_corrupted_backward(k),
            None => Tape::new(),
        };
        let b = Binder::train(&tape, &self.store);
        let vars: Vec<Var<'_>> = self
            .inputs
            .iter()
            .map(|t| tape.leaf(&t.clone().with_grad()))
            .collect();
        let params: Vec<Var<'_>> = self.store.ids().map(|id| b.p(id)).collect();
        let out = (self.f)(&b, &vars)?;
        let r = proj.get_or_insert_with(|| direction(out.numel(), rng_seed)).clone();
        let g = out.backward_with(&r)?;
        let mut flat = Vec::new();
        for (v, t) in vars.iter().zip(&self.inputs) {
            flat.extend(g.wrt(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec));
        }
        for (v, (_, t)) in params.iter().zip(self.store.iter()) {
            flat.extend(g.wrt(*v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec));
        }
        Ok(flat)
    }

    fn numeric(&self, eps: f64, proj: &mut Option<Vec<f64>>, rng_seed: u64) -> Result<Vec<f64>> {
        let mut flat = Vec::new();
        let mut inputs = self.inputs.clone();
        for i in 0..inputs.len() {
            for k in 0..inputs[i].numel() {
                let x = inputs[i].data()[k];
                inputs[i].data_mut()[k] = x + eps;
                let up = self.eval(&inputs, &self.store, proj, rng_seed)?;
                inputs[i].data_mut()[k] = x - eps;
                let down = self.eval(&inputs, &self.store, proj, rng_seed)?;
                inputs[i].data_mut()[k] = x;
                flat.push((up - down) / (2.0 * eps));
            }
        }
        let mut store = self.store.clone();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for k in 0..store.get(id).numel() {
                let x = store.get(id).data()[k];
                store.get_mut(id).data_mut()[k] = x + eps;
                let up = self.eval(&self.inputs, &store, proj, rng_seed)?;
                store.get_mut(id).data_mut()[k] = x - eps;
                let down = self.eval(&self.inputs, &store, proj, rng_seed)?;
                store.get_mut(id).data_mut()[k] = x;
                flat.push((up - down) / (2.0 * eps));
            }
        }
        Ok(flat)
    }
}

fn direction(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ec_7105);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values bounded away from zero, random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = rand_t(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random::<bool>() {
            *v = -*v;
        }
    }
    t
}

fn op_case(kind: OpKind, rng: &mut ChaCha8Rng) -> Case {
    let m = |rng: &mut ChaCha8Rng, s: &[usize]| rand_t(rng, s, -1.0, 1.0);
    match kind {
        OpKind::Add => Case::new(vec![m(rng, &[3, 4]), m(rng, &[3, 4])], Box::new(|_, v| v[0].add(v[1]))),
        OpKind::Sub => Case::new(vec![m(rng, &[3, 4]), m(rng, &[3, 4])], Box::new(|_, v| v[0].sub(v[1]))),
        OpKind::Mul => Case::new(vec![m(rng, &[3, 4]), m(rng, &[3, 4])], Box::new(|_, v| v[0].mul(v[1]))),
        OpKind::Div => Case::new(
            vec![m(rng, &[3, 4]), away_from_zero(rng, &[3, 4], 0.5, 1.5)],
            Box::new(|_, v| v[0].div(v[1])),
        ),
        OpKind::Scale => Case::new(vec![m(rng, &[2, 5])], Box::new(|_, v| v[0].scale(-1.7))),
        OpKind::AddBias => {
            let bias: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            Case::new(vec![m(rng, &[2, 4])], Box::new(move |_, v| v[0].add_bias(&bias)))
        }
        OpKind::Matmul => Case::new(vec![m(rng, &[3, 4]), m(rng, &[4, 2])], Box::new(|_, v| v[0].matmul(v[1]))),
        OpKind::Transpose => Case::new(vec![m(rng, &[3, 4])], Box::new(|_, v| v[0].transpose())),
        OpKind::Reshape => Case::new(vec![m(rng, &[3, 4])], Box::new(|_, v| v[0].reshape(&[2, 6]))),
        OpKind::Sigmoid => Case::new(vec![rand_t(rng, &[3, 4], -3.0, 3.0)], Box::new(|_, v| v[0].sigmoid())),
        OpKind::Relu => Case::new(vec![away_from_zero(rng, &[3, 4], 0.2, 1.5)], Box::new(|_, v| v[0].relu())),
        OpKind::Exp => Case::new(vec![m(rng, &[3, 4])], Box::new(|_, v| v[0].exp())),
        OpKind::Log => Case::new(vec![rand_t(rng, &[3, 4], 0.5, 2.0)], Box::new(|_, v| v[0].log())),
        OpKind::Softplus => Case::new(vec![rand_t(rng, &[3, 4], -4.0, 4.0)], Box::new(|_, v| v[0].softplus())),
        OpKind::Sum => Case::new(vec![m(rng, &[3, 4])], Box::new(|_, v| v[0].sum())),
        OpKind::Mean => Case::new(vec![m(rng, &[3, 4])], Box::new(|_, v| v[0].mean())),
        OpKind::SumLastdim => Case::new(vec![m(rng, &[2, 3, 4])], Box::new(|_, v| v[0].sum_lastdim())),
        OpKind::Softmax => {
            // One masked entry per row exercises the −∞ path.
            let mut bias = vec![0.0; 12];
            for r in 0..3 {
                bias[r * 4 + rng.random_range(0..4)] = f64::NEG_INFINITY;
            }
            Case::new(
                vec![rand_t(rng, &[3, 4], -2.0, 2.0)],
                Box::new(move |_, v| v[0].add_bias(&bias)?.softmax_lastdim()),
            )
        }
        OpKind::LogSoftmax => Case::new(vec![rand_t(rng, &[3, 5], -2.0, 2.0)], Box::new(|_, v| v[0].log_softmax_lastdim())),
        OpKind::Concat => Case::new(vec![m(rng, &[3, 2]), m(rng, &[3, 4])], Box::new(|_, v| v[0].concat_lastdim(v[1]))),
        OpKind::AvgPool => Case::new(vec![m(rng, &[4, 6, 2])], Box::new(|_, v| v[0].avgpool2x2())),
        OpKind::Upsample => Case::new(vec![m(rng, &[2, 3, 2])], Box::new(|_, v| v[0].upsample_nearest(2))),
        OpKind::Conv2d => Case::new(
            vec![m(rng, &[5, 6, 2]), m(rng, &[3, 3, 2, 3]), m(rng, &[3])],
            Box::new(|_, v| v[0].conv2d(v[1], v[2], 2, 1)),
        ),
        OpKind::LayerNorm => Case::new(
            vec![rand_t(rng, &[3, 5], -2.0, 2.0), rand_t(rng, &[5], 0.5, 1.5), m(rng, &[5])],
            Box::new(|_, v| v[0].layernorm(v[1], v[2])),
        ),
        OpKind::Linear => Case::new(
            vec![m(rng, &[3, 4]), m(rng, &[4, 2]), m(rng, &[2])],
            Box::new(|_, v| v[0].linear(v[1], v[2])),
        ),
        OpKind::GatherRows => Case::new(vec![m(rng, &[4, 3])], Box::new(|_, v| v[0].gather_rows(&[2, 0, 2, 3]))),
    }
}

fn layer_case(name: &str, rng: &mut ChaCha8Rng, seed: u64) -> Case {
    let (n, d) = (3, 4);
    match name {
        "masked_attention" => {
            let mut store = ParamStore::new();
            let params = AttentionParams::new(&mut store, &mut ParamInit::new(seed), "attn", d);
            let positions = 6;
            let mut fg: Vec<bool> = (0..n * positions).map(|_| rng.random::<bool>()).collect();
            fg[..positions].iter_mut().for_each(|v| *v = false);
            let bias = AttentionBias::from_foreground(n, positions, &fg);
            Case {
                inputs: vec![rand_t(rng, &[n, d], -1.0, 1.0), rand_t(rng, &[positions, d], -1.0, 1.0)],
                store,
                f: Box::new(move |b, v| masked_attention(b, v[0], v[1], &bias, &params)),
            }
        }
        "scaled_self_attention" => {
            let mut store = ParamStore::new();
            let params = AttentionParams::new(&mut store, &mut ParamInit::new(seed), "self", d);
            Case {
                inputs: vec![rand_t(rng, &[n, d], -1.0, 1.0)],
                store,
                f: Box::new(move |b, v| scaled_self_attention(b, v[0], &params)),
            }
        }
        "cma_layer" => {
            let mut store = ParamStore::new();
            let params = CmaLayerParams::new(
                &mut store,
                &mut ParamInit::new(seed),
                &mut ParamInit::new(seed + 1),
                "layer",
                d,
                true,
                false,
            );
            let mask = rand_t(rng, &[n, 4, 4], -1.0, 1.0);
            Case {
                inputs: vec![
                    rand_t(rng, &[n, d], -1.0, 1.0),
                    rand_t(rng, &[n, d], -1.0, 1.0),
                    rand_t(rng, &[n, d], -0.5, 0.5),
                    rand_t(rng, &[4, 4, d], -1.0, 1.0),
                ],
                store,
                f: Box::new(move |b, v| {
                    let out = cma_layer(
                        b,
                        LayerInputs {
                            x_prev: v[0],
                            x_prev_d: v[1],
                            q_pos: Some(v[2]),
                            feature: v[3],
                            mask_logits: &mask,
                        },
                        &params,
                    )?;
                    out.x_final.concat_lastdim(out.x_lo.expect("enhanced layer"))
                }),
            }
        }
        "dice_loss" | "bce_mask_loss" => {
            let target: Vec<f64> = (0..12).map(|_| f64::from(rng.random_range(0..2u8))).collect();
            let x = rand_t(rng, &[2, 6], -3.0, 3.0);
            if name == "dice_loss" {
                Case::new(vec![x], Box::new(move |_, v| dice_loss(v[0], &target, 1.0).map_err(unwrap_tensor)))
            } else {
                Case::new(vec![x], Box::new(move |_, v| bce_mask_loss(v[0], &target).map_err(unwrap_tensor)))
            }
        }
        "cls_loss" => {
            let gt = vec![
                GtSegment { class_id: 1, mask: vec![true] },
                GtSegment { class_id: 0, mask: vec![true] },
            ];
            let matches = vec![Match { query: 2, segment: 0 }, Match { query: 0, segment: 1 }];
            Case::new(
                vec![rand_t(rng, &[4, 4], -2.0, 2.0)],
                Box::new(move |_, v| cls_loss(v[0], &matches, &gt, 0.1).map_err(unwrap_tensor)),
            )
        }
        other => unreachable!("unknown layer check {other}"),
    }
}

fn unwrap_tensor(e: crate::objective::ObjectiveError) -> crate::ndtensor::TensorError {
    match e {
        crate::objective::ObjectiveError::Tensor(t) => t,
        other => crate::ndtensor::TensorError::Invalid {
            op: "loss",
            msg: other.to_string(),
        },
    }
}

fn run_check(name: &'static str, make: &dyn Fn(&mut ChaCha8Rng, u64) -> Case, opts: &GradcheckOptions) -> CheckResult {
    let mut worst = 0.0f64;
    let mut coords = 0;
    for &seed in &opts.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = make(&mut rng, seed);
        let mut proj = None;
        let outcome = case
            .analytic(opts.corrupt, &mut proj, seed)
            .and_then(|a| Ok((a, case.numeric(opts.eps, &mut proj, seed)?)));
        let (a, n) = match outcome {
            Ok(v) => v,
            Err(e) => {
                return CheckResult {
                    name,
                    max_rel_err: f64::INFINITY,
                    coordinates: coords,
                    error: Some(e.to_string()),
                    passed: false,
                }
            }
        };
        coords += a.len();
        for (x, y) in a.iter().zip(&n) {
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    CheckResult {
        name,
        max_rel_err: worst,
        coordinates: coords,
        error: None,
        passed: worst <= opts.tolerance,
    }
}

/// Runs every required check.
pub fn run_gradcheck(opts: &GradcheckOptions) -> GradcheckReport {
    let mut results = Vec::new();
    for kind in OpKind::ALL {
        results.push(run_check(kind.name(), &|rng, _| op_case(kind, rng), opts));
    }
    for name in LAYER_CHECKS {
        results.push(run_check(name, &|rng, seed| layer_case(name, rng, seed), opts));
    }
    GradcheckReport {
        results,
        tolerance: opts.tolerance,
    }
}
