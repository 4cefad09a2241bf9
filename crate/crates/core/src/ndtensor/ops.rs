use super::kernels::{matmul_slices, transpose2, Conv2dGeom};
use super::tape::{sigmoid, Op};
use super::{Result, TensorError, Var};

const LN_EPS: f64 = 1e-5;

fn shape_err(op: &'static str, lhs: Vec<usize>, rhs: Vec<usize>) -> TensorError {
    TensorError::Shape { op, lhs, rhs }
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands live on different tapes"
        );
        self.check();
        other.check();
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        self.check();
        let (shape, data, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            (n.shape.clone(), n.data.iter().map(|&x| f(x)).collect(), n.requires_grad)
        };
        self.tape.push(shape, data, op, rg, false)
    }

    fn zip(
        self,
        other: Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (shape, data, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(shape_err(name, a.shape.clone(), b.shape.clone()));
            }
            let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            (a.shape.clone(), data, a.requires_grad || b.requires_grad)
        };
        self.tape.push(shape, data, op, rg, false)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    /// Adds a constant of the same size. Entries of `bias` may be `-inf`
    /// (attention masking); nothing else non-finite is accepted.
    pub fn add_bias(self, bias: &[f64]) -> Result<Var<'t>> {
        self.check();
        let (shape, data, rg) = {
            let nodes = self.tape.nodes();
            let n = &nodes[self.id];
            if n.data.len() != bias.len() {
                return Err(shape_err("add_bias", n.shape.clone(), vec![bias.len()]));
            }
            if bias.iter().any(|b| b.is_nan() || *b == f64::INFINITY) {
                return Err(TensorError::Invalid {
                    op: "add_bias",
                    msg: "bias entries must be finite or -inf".into(),
                });
            }
            let data = n.data.iter().zip(bias).map(|(x, b)| x + b).collect();
            (n.shape.clone(), data, n.requires_grad)
        };
        self.tape.push(shape, data, Op::AddBias(self.id), rg, true)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (m, k, n, data, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(shape_err("matmul", a.shape.clone(), b.shape.clone()));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let data = matmul_slices(&a.data, &b.data, m, k, n);
            (m, k, n, data, a.requires_grad || b.requires_grad)
        };
        self.tape.push(
            vec![m, n],
            data,
            Op::Matmul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            rg,
            false,
        )
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.check();
        let (m, n, data, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 2 {
                return Err(TensorError::Invalid {
                    op: "transpose",
                    msg: format!("expected a matrix, got {:?}", a.shape),
                });
            }
            let (m, n) = (a.shape[0], a.shape[1]);
            (m, n, transpose2(&a.data, m, n), a.requires_grad)
        };
        self.tape
            .push(vec![n, m], data, Op::Transpose { a: self.id, m, n }, rg, false)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.check();
        let (data, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if shape.iter().product::<usize>() != a.data.len() || shape.contains(&0) {
                return Err(shape_err("reshape", a.shape.clone(), shape.to_vec()));
            }
            (a.data.clone(), a.requires_grad)
        };
        self.tape
            .push(shape.to_vec(), data, Op::Reshape(self.id), rg, false)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    /// `ln(1 + e^x)` in the overflow-free form `max(x,0) + ln(1 + e^-|x|)`.
    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(Op::Softplus(self.id), |x| x.max(0.0) + (-x.abs()).exp().ln_1p())
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.check();
        let (s, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            (a.data.iter().fold(0.0, |acc, v| acc + v), a.requires_grad)
        };
        self.tape.push(vec![], vec![s], Op::Sum(self.id), rg, false)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.check();
        let (s, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let s = a.data.iter().fold(0.0, |acc, v| acc + v);
            (s / a.data.len() as f64, a.requires_grad)
        };
        self.tape.push(vec![], vec![s], Op::Mean(self.id), rg, false)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_lastdim(self) -> Result<Var<'t>> {
        self.check();
        let (shape, data, n, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let n = *a.shape.last().ok_or(TensorError::Invalid {
                op: "sum_lastdim",
                msg: "scalar input".into(),
            })?;
            let data = a
                .data
                .chunks(n)
                .map(|c| c.iter().fold(0.0, |acc, v| acc + v))
                .collect();
            let shape = a.shape[..a.shape.len() - 1].to_vec();
            (shape, data, n, a.requires_grad)
        };
        self.tape
            .push(shape, data, Op::SumLastdim { a: self.id, n }, rg, false)
    }

    /// Row-wise softmax over the last axis with max subtraction. `-inf`
    /// entries get probability exactly 0; an all-`-inf` row is an error.
    pub fn softmax_lastdim(self) -> Result<Var<'t>> {
        self.check();
        let (shape, data, n, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let n = last_dim(&a.shape, "softmax_lastdim")?;
            let mut out = Vec::with_capacity(a.data.len());
            for row in a.data.chunks(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::DegenerateSoftmax);
                }
                let start = out.len();
                let mut total = 0.0;
                for &x in row {
                    let e = (x - max).exp();
                    total += e;
                    out.push(e);
                }
                out[start..].iter_mut().for_each(|v| *v /= total);
            }
            (a.shape.clone(), out, n, a.requires_grad)
        };
        self.tape
            .push(shape, data, Op::Softmax { a: self.id, n }, rg, false)
    }

    pub fn log_softmax_lastdim(self) -> Result<Var<'t>> {
        self.check();
        let (shape, data, n, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let n = last_dim(&a.shape, "log_softmax_lastdim")?;
            let mut out = Vec::with_capacity(a.data.len());
            for row in a.data.chunks(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::DegenerateSoftmax);
                }
                let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|x| x - lse));
            }
            (a.shape.clone(), out, n, a.requires_grad)
        };
        self.tape
            .push(shape, data, Op::LogSoftmax { a: self.id, n }, rg, false)
    }

    /// `[a | b]` along the last axis; leading dimensions must agree.
    pub fn concat_lastdim(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (shape, data, da, db, rg) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let ra = a.shape.len();
            if ra == 0 || ra != b.shape.len() || a.shape[..ra - 1] != b.shape[..ra - 1] {
                return Err(shape_err("concat_lastdim", a.shape.clone(), b.shape.clone()));
            }
            let (da, db) = (a.shape[ra - 1], b.shape[ra - 1]);
            let mut data = Vec::with_capacity(a.data.len() + b.data.len());
            for (ra_, rb) in a.data.chunks(da).zip(b.data.chunks(db)) {
                data.extend_from_slice(ra_);
                data.extend_from_slice(rb);
            }
            let mut shape = a.shape.clone();
            shape[ra - 1] = da + db;
            (shape, data, da, db, a.requires_grad || b.requires_grad)
        };
        self.tape.push(
            shape,
            data,
            Op::Concat {
                a: self.id,
                b: other.id,
                da,
                db,
            },
            rg,
            false,
        )
    }

    /// 2×2 mean pooling with stride 2 over an `H×W×C` map.
    pub fn avgpool2x2(self) -> Result<Var<'t>> {
        self.check();
        let (h, w, c, data, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let (h, w, c) = hwc(&a.shape, "avgpool2x2")?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(TensorError::Invalid {
                    op: "avgpool2x2",
                    msg: format!("spatial dims must be even, got {h}×{w}"),
                });
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; oh * ow * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let at = |y: usize, x: usize| a.data[(y * w + x) * c + ch];
                        let s = at(2 * oy, 2 * ox)
                            + at(2 * oy, 2 * ox + 1)
                            + at(2 * oy + 1, 2 * ox)
                            + at(2 * oy + 1, 2 * ox + 1);
                        out[(oy * ow + ox) * c + ch] = 0.25 * s;
                    }
                }
            }
            (h, w, c, out, a.requires_grad)
        };
        self.tape.push(
            vec![h / 2, w / 2, c],
            data,
            Op::AvgPool { a: self.id, h, w, c },
            rg,
            false,
        )
    }

    /// Nearest-neighbour upsampling of an `H×W×C` map by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        self.check();
        if factor == 0 {
            return Err(TensorError::Invalid {
                op: "upsample_nearest",
                msg: "factor must be positive".into(),
            });
        }
        let (h, w, c, data, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let (h, w, c) = hwc(&a.shape, "upsample_nearest")?;
            let (oh, ow) = (h * factor, w * factor);
            let mut out = Vec::with_capacity(oh * ow * c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let src = ((oy / factor) * w + ox / factor) * c;
                    out.extend_from_slice(&a.data[src..src + c]);
                }
            }
            (h, w, c, out, a.requires_grad)
        };
        self.tape.push(
            vec![h * factor, w * factor, c],
            data,
            Op::Upsample {
                a: self.id,
                h,
                w,
                c,
                factor,
            },
            rg,
            false,
        )
    }

    /// Square-kernel convolution of an `H×W×C_in` map. `weight` is
    /// `[k, k, C_in, C_out]`, `bias` is `[C_out]`, padding is zero.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Var<'t>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(&weight);
        self.same_tape(&bias);
        let (geom, data, rg) = {
            let nodes = self.tape.nodes();
            let (x, wt, b) = (&nodes[self.id], &nodes[weight.id], &nodes[bias.id]);
            let (h, w, c_in) = hwc(&x.shape, "conv2d")?;
            let ws = &wt.shape;
            if ws.len() != 4 || ws[0] != ws[1] || ws[2] != c_in || b.shape != [ws[3]] {
                return Err(shape_err("conv2d", x.shape.clone(), ws.clone()));
            }
            if stride == 0 || h + 2 * pad < ws[0] || w + 2 * pad < ws[0] {
                return Err(TensorError::Invalid {
                    op: "conv2d",
                    msg: format!("kernel {} does not fit {h}×{w} with pad {pad}", ws[0]),
                });
            }
            let geom = Conv2dGeom {
                h,
                w,
                c_in,
                c_out: ws[3],
                kernel: ws[0],
                stride,
                pad,
            };
            let cols = geom.im2col(&x.data);
            let p = geom.out_h() * geom.out_w();
            let mut out = matmul_slices(&cols, &wt.data, p, geom.patch_len(), geom.c_out);
            for row in out.chunks_mut(geom.c_out) {
                row.iter_mut().zip(&b.data).for_each(|(o, bv)| *o += bv);
            }
            (geom, out, x.requires_grad || wt.requires_grad || b.requires_grad)
        };
        self.tape.push(
            vec![geom.out_h(), geom.out_w(), geom.c_out],
            data,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
            },
            rg,
            false,
        )
    }

    /// Layer normalization over the last axis with affine `gamma`/`beta`.
    pub fn layernorm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (shape, data, n, xhat, rstd, rg) = {
            let nodes = self.tape.nodes();
            let (x, g, b) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
            let n = last_dim(&x.shape, "layernorm")?;
            if g.shape != [n] || b.shape != [n] {
                return Err(shape_err("layernorm", x.shape.clone(), g.shape.clone()));
            }
            let rows = x.data.len() / n;
            let mut xhat = Vec::with_capacity(x.data.len());
            let mut rstd = Vec::with_capacity(rows);
            let mut out = Vec::with_capacity(x.data.len());
            for row in x.data.chunks(n) {
                let mean = row.iter().fold(0.0, |a, v| a + v) / n as f64;
                let var = row.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / n as f64;
                let r = 1.0 / (var + LN_EPS).sqrt();
                rstd.push(r);
                for j in 0..n {
                    let xh = (row[j] - mean) * r;
                    xhat.push(xh);
                    out.push(xh * g.data[j] + b.data[j]);
                }
            }
            let rg = x.requires_grad || g.requires_grad || b.requires_grad;
            (x.shape.clone(), out, n, xhat, rstd, rg)
        };
        self.tape.push(
            shape,
            data,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                n,
                xhat,
                rstd,
            },
            rg,
            false,
        )
    }

    /// Affine map `x·W + b` over the last axis; `W` is `[d_in, d_out]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&weight);
        self.same_tape(&bias);
        let (shape, data, rows, d_in, d_out, rg) = {
            let nodes = self.tape.nodes();
            let (x, w, b) = (&nodes[self.id], &nodes[weight.id], &nodes[bias.id]);
            let d_in = last_dim(&x.shape, "linear")?;
            if w.shape.len() != 2 || w.shape[0] != d_in || b.shape != [w.shape[1]] {
                return Err(shape_err("linear", x.shape.clone(), w.shape.clone()));
            }
            let d_out = w.shape[1];
            let rows = x.data.len() / d_in;
            let mut out = matmul_slices(&x.data, &w.data, rows, d_in, d_out);
            for row in out.chunks_mut(d_out) {
                row.iter_mut().zip(&b.data).for_each(|(o, bv)| *o += bv);
            }
            let mut shape = x.shape.clone();
            *shape.last_mut().expect("rank >= 1") = d_out;
            let rg = x.requires_grad || w.requires_grad || b.requires_grad;
            (shape, out, rows, d_in, d_out, rg)
        };
        self.tape.push(
            shape,
            data,
            Op::Linear {
                x: self.id,
                w: weight.id,
                b: bias.id,
                rows,
                d_in,
                d_out,
            },
            rg,
            false,
        )
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        self.check();
        let (cols, data, rg) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 2 {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("expected a matrix, got {:?}", a.shape),
                });
            }
            let (m, cols) = (a.shape[0], a.shape[1]);
            if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
                return Err(TensorError::Invalid {
                    op: "gather_rows",
                    msg: format!("row {bad} out of range for {m} rows"),
                });
            }
            let mut out = Vec::with_capacity(rows.len() * cols);
            for &r in rows {
                out.extend_from_slice(&a.data[r * cols..(r + 1) * cols]);
            }
            (cols, out, a.requires_grad)
        };
        if rows.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "empty row selection".into(),
            });
        }
        self.tape.push(
            vec![rows.len(), cols],
            data,
            Op::GatherRows {
                a: self.id,
                rows: rows.to_vec(),
                cols,
            },
            rg,
            false,
        )
    }
}

fn last_dim(shape: &[usize], op: &'static str) -> Result<usize> {
    shape.last().copied().ok_or(TensorError::Invalid {
        op,
        msg: "scalar input".into(),
    })
}

fn hwc(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [h, w, c] => Ok((*h, *w, *c)),
        _ => Err(TensorError::Invalid {
            op,
            msg: format!("expected an H×W×C map, got {shape:?}"),
        }),
    }
}
