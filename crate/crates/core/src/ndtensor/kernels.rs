// Slice-level kernels shared by forward and backward passes.
//
// Summation order: every dot product accumulates over the inner index in
// ascending order starting from 0.0, so c[i][j] is bitwise equal to the
// naive `for t in 0..k { s += a[i][t] * b[t][j] }` loop.

/// `a[m×k] · b[k×n]`.
pub fn matmul_slices(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let brow = &b[t * n..(t + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a[m×k] · b[n×k]ᵀ`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// `a[k×m]ᵀ · b[k×n]`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for t in 0..k {
        let brow = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let av = a[t * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose2(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Geometry of a 2-D convolution over an `H×W×C_in` feature map with a
/// square kernel and symmetric zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }

    /// Unfolds the input into `[out_h·out_w × k·k·c_in]` patches.
    pub(crate) fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (oh, ow, pl) = (self.out_h(), self.out_w(), self.patch_len());
        let mut cols = vec![0.0; oh * ow * pl];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * pl;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let src = (iy as usize * self.w + ix as usize) * self.c_in;
                        let dst = base + (ky * self.kernel + kx) * self.c_in;
                        cols[dst..dst + self.c_in].copy_from_slice(&x[src..src + self.c_in]);
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: scatters patch gradients back onto the input.
    pub(crate) fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (oh, ow, pl) = (self.out_h(), self.out_w(), self.patch_len());
        let mut x = vec![0.0; self.h * self.w * self.c_in];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (oy * ow + ox) * pl;
                for ky in 0..self.kernel {
                    let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    for kx in 0..self.kernel {
                        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                        if ix < 0 || ix >= self.w as isize {
                            continue;
                        }
                        let dst = (iy as usize * self.w + ix as usize) * self.c_in;
                        let src = base + (ky * self.kernel + kx) * self.c_in;
                        for c in 0..self.c_in {
                            x[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
        x
    }
}
