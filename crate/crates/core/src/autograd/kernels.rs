//! Raw numeric kernels behind the differentiable ops.

/// `C = alpha * A B + beta * C` with arbitrary strides (in elements).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: A out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: B out of bounds");
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: C out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Geometry of a channels-last 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub input: [usize; 3],
    pub cin: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
    pub cout: usize,
}

impl ConvGeom {
    pub fn rows_per_sample(&self) -> usize {
        self.output.iter().product()
    }

    pub fn patch(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.cin
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.pad == [0, 0, 0]
    }

    fn sample_len(&self) -> usize {
        self.input.iter().product::<usize>() * self.cin
    }
}

/// Gather one sample's receptive fields into a `(rows, patch)` matrix.
fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let [t, h, w] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let cin = g.cin;
    let patch = g.patch();
    let mut row = 0;
    for to in 0..ot {
        for ho in 0..oh {
            for wo in 0..ow {
                let dst = &mut col[row * patch..(row + 1) * patch];
                let mut off = 0;
                for dt in 0..kt {
                    let ti = (to * st + dt) as isize - pt as isize;
                    for dh in 0..kh {
                        let hi = (ho * sh + dh) as isize - ph as isize;
                        for dw in 0..kw {
                            let wi = (wo * sw + dw) as isize - pw as isize;
                            let seg = &mut dst[off..off + cin];
                            if ti < 0 || hi < 0 || wi < 0 || ti >= t as isize || hi >= h as isize || wi >= w as isize {
                                seg.fill(0.0);
                            } else {
                                let src = ((ti as usize * h + hi as usize) * w + wi as usize) * cin;
                                seg.copy_from_slice(&x[src..src + cin]);
                            }
                            off += cin;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add a `(rows, patch)` matrix back onto one sample.
fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let [t, h, w] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.pad;
    let [ot, oh, ow] = g.output;
    let cin = g.cin;
    let patch = g.patch();
    let mut row = 0;
    for to in 0..ot {
        for ho in 0..oh {
            for wo in 0..ow {
                let src = &col[row * patch..(row + 1) * patch];
                let mut off = 0;
                for dt in 0..kt {
                    let ti = (to * st + dt) as isize - pt as isize;
                    for dh in 0..kh {
                        let hi = (ho * sh + dh) as isize - ph as isize;
                        for dw in 0..kw {
                            let wi = (wo * sw + dw) as isize - pw as isize;
                            if !(ti < 0 || hi < 0 || wi < 0 || ti >= t as isize || hi >= h as isize || wi >= w as isize) {
                                let dst = ((ti as usize * h + hi as usize) * w + wi as usize) * cin;
                                for (d, s) in dx[dst..dst + cin].iter_mut().zip(&src[off..off + cin]) {
                                    *d += s;
                                }
                            }
                            off += cin;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv3d_forward(g: &ConvGeom, x: &[f64], weight: &[f64]) -> Vec<f64> {
    let rows = g.rows_per_sample();
    let patch = g.patch();
    let mut out = vec![0.0; g.n * rows * g.cout];
    if g.is_pointwise() {
        gemm(g.n * rows, patch, g.cout, 1.0, x, (patch, 1), weight, (g.cout, 1), 0.0, &mut out, (g.cout, 1));
        return out;
    }
    let mut col = vec![0.0; rows * patch];
    let slen = g.sample_len();
    for s in 0..g.n {
        im2col(g, &x[s * slen..(s + 1) * slen], &mut col);
        let dst = &mut out[s * rows * g.cout..(s + 1) * rows * g.cout];
        gemm(rows, patch, g.cout, 1.0, &col, (patch, 1), weight, (g.cout, 1), 0.0, dst, (g.cout, 1));
    }
    out
}

/// Returns `(d_input, d_weight)`, each only when requested.
pub(crate) fn conv3d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let rows = g.rows_per_sample();
    let patch = g.patch();
    let cout = g.cout;
    let mut dw = need_dw.then(|| vec![0.0; patch * cout]);
    let mut dx = need_dx.then(|| vec![0.0; g.n * g.sample_len()]);
    if g.is_pointwise() {
        let total = g.n * rows;
        if let Some(dw) = dw.as_mut() {
            gemm(patch, total, cout, 1.0, x, (1, patch), dout, (cout, 1), 0.0, dw, (cout, 1));
        }
        if let Some(dx) = dx.as_mut() {
            gemm(total, cout, patch, 1.0, dout, (cout, 1), weight, (1, cout), 0.0, dx, (patch, 1));
        }
        return (dx, dw);
    }
    let slen = g.sample_len();
    let mut col = vec![0.0; rows * patch];
    let mut dcol = vec![0.0; rows * patch];
    for s in 0..g.n {
        let dout_s = &dout[s * rows * cout..(s + 1) * rows * cout];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[s * slen..(s + 1) * slen], &mut col);
            gemm(patch, rows, cout, 1.0, &col, (1, patch), dout_s, (cout, 1), 1.0, dw, (cout, 1));
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, cout, patch, 1.0, dout_s, (cout, 1), weight, (1, cout), 0.0, &mut dcol, (patch, 1));
            col2im(g, &dcol, &mut dx[s * slen..(s + 1) * slen]);
        }
    }
    (dx, dw)
}
