//! Raw numeric kernels over row-major slices. No shape validation here;
//! callers in `ops` check shapes first.

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`. A transposed operand is stored in its untransposed
/// row-major layout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strided access touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2-D convolution, resolved against concrete shapes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvDims {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_ch * self.out_h * self.out_w
    }
}

/// Writes the columns of one sample into `cols` at column `offset` of a
/// matrix with row stride `ld`.
fn im2col(d: &ConvDims, x: &[f64], cols: &mut [f64], ld: usize, offset: usize) {
    let ncols = d.col_cols();
    for c in 0..d.in_ch {
        let plane = &x[c * d.height * d.width..(c + 1) * d.height * d.width];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * ld + offset..row * ld + offset + ncols];
                for oy in 0..d.out_h {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    let line = &mut dst[oy * d.out_w..(oy + 1) * d.out_w];
                    if iy < 0 || iy >= d.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * d.width..(iy as usize + 1) * d.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        *out = if ix < 0 || ix >= d.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(d: &ConvDims, cols: &[f64], ld: usize, offset: usize, x: &mut [f64]) {
    let ncols = d.col_cols();
    for c in 0..d.in_ch {
        let plane = &mut x[c * d.height * d.width..(c + 1) * d.height * d.width];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * ld + offset..row * ld + offset + ncols];
                for oy in 0..d.out_h {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.width..(iy as usize + 1) * d.width];
                    for ox in 0..d.out_w {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.width as isize {
                            dst[ix as usize] += src[oy * d.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Samples per GEMM: enough to keep the column matrix near 4 MiB.
fn chunk_len(d: &ConvDims) -> usize {
    (COL_BUDGET / (d.col_rows() * d.col_cols()).max(1)).clamp(1, d.batch.max(1))
}

const COL_BUDGET: usize = 1 << 19;

/// Copies `[nb, Co, N]` sample-major data into a `[Co, nb * N]` matrix.
fn gather_channels(d: &ConvDims, src: &[f64], nb: usize, dst: &mut [f64]) {
    let n = d.col_cols();
    for s in 0..nb {
        for co in 0..d.out_ch {
            let from = &src[s * d.out_plane() + co * n..s * d.out_plane() + (co + 1) * n];
            dst[co * nb * n + s * n..co * nb * n + (s + 1) * n].copy_from_slice(from);
        }
    }
}

/// Inverse of [`gather_channels`].
fn scatter_channels(d: &ConvDims, src: &[f64], nb: usize, dst: &mut [f64]) {
    let n = d.col_cols();
    for s in 0..nb {
        for co in 0..d.out_ch {
            dst[s * d.out_plane() + co * n..s * d.out_plane() + (co + 1) * n]
                .copy_from_slice(&src[co * nb * n + s * n..co * nb * n + (s + 1) * n]);
        }
    }
}

/// `y[b] = w * im2col(x[b])`, output `[B, Co, Ho, Wo]`.
pub(crate) fn conv2d_forward(d: &ConvDims, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; d.batch * d.out_plane()];
    let chunk = chunk_len(d);
    let (rows, n) = (d.col_rows(), d.col_cols());
    let mut cols = vec![0.0; rows * n * chunk];
    let mut out = vec![0.0; d.out_ch * n * chunk];
    for b0 in (0..d.batch).step_by(chunk) {
        let nb = chunk.min(d.batch - b0);
        for s in 0..nb {
            let b = b0 + s;
            im2col(d, &x[b * d.in_plane()..(b + 1) * d.in_plane()], &mut cols, nb * n, s * n);
        }
        gemm(d.out_ch, rows, nb * n, w, false, &cols, false, 0.0, &mut out);
        scatter_channels(d, &out, nb, &mut y[b0 * d.out_plane()..(b0 + nb) * d.out_plane()]);
    }
    y
}

/// Gradient of `<conv(x, w), g>` with respect to `x`.
pub(crate) fn conv2d_input_grad(d: &ConvDims, g: &[f64], w: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; d.batch * d.in_plane()];
    let chunk = chunk_len(d);
    let (rows, n) = (d.col_rows(), d.col_cols());
    let mut cols = vec![0.0; rows * n * chunk];
    let mut gm = vec![0.0; d.out_ch * n * chunk];
    for b0 in (0..d.batch).step_by(chunk) {
        let nb = chunk.min(d.batch - b0);
        gather_channels(d, &g[b0 * d.out_plane()..(b0 + nb) * d.out_plane()], nb, &mut gm);
        gemm(rows, d.out_ch, nb * n, w, true, &gm, false, 0.0, &mut cols);
        for s in 0..nb {
            let b = b0 + s;
            col2im_add(d, &cols, nb * n, s * n, &mut dx[b * d.in_plane()..(b + 1) * d.in_plane()]);
        }
    }
    dx
}

/// Gradient of `<conv(x, w), g>` with respect to `w`.
pub(crate) fn conv2d_weight_grad(d: &ConvDims, x: &[f64], g: &[f64]) -> Vec<f64> {
    let mut dw = vec![0.0; d.out_ch * d.col_rows()];
    let chunk = chunk_len(d);
    let (rows, n) = (d.col_rows(), d.col_cols());
    let mut cols = vec![0.0; rows * n * chunk];
    let mut gm = vec![0.0; d.out_ch * n * chunk];
    for b0 in (0..d.batch).step_by(chunk) {
        let nb = chunk.min(d.batch - b0);
        for s in 0..nb {
            let b = b0 + s;
            im2col(d, &x[b * d.in_plane()..(b + 1) * d.in_plane()], &mut cols, nb * n, s * n);
        }
        gather_channels(d, &g[b0 * d.out_plane()..(b0 + nb) * d.out_plane()], nb, &mut gm);
        let beta = if b0 == 0 { 0.0 } else { 1.0 };
        gemm(d.out_ch, nb * n, rows, &gm, false, &cols, true, beta, &mut dw);
    }
    dw
}

/// Non-overlapping average pooling over `[planes, h, w]`; trailing rows and
/// columns that do not fill a window are dropped.
pub(crate) fn avg_pool(x: &[f64], planes: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (oh, ow) = (h / kh, w / kw);
    let scale = 1.0 / (kh * kw) as f64;
    let mut y = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for i in 0..kh {
                let row = &src[(oy * kh + i) * w..(oy * kh + i + 1) * w];
                for ox in 0..ow {
                    dst[oy * ow + ox] += row[ox * kw..ox * kw + kw].iter().sum::<f64>();
                }
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    y
}

/// Adjoint of [`avg_pool`].
pub(crate) fn avg_pool_adjoint(
    g: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    let (oh, ow) = (h / kh, w / kw);
    let scale = 1.0 / (kh * kw) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for i in 0..kh {
                let row = &mut dst[(oy * kh + i) * w..(oy * kh + i + 1) * w];
                for ox in 0..ow {
                    let v = src[oy * ow + ox] * scale;
                    row[ox * kw..ox * kw + kw].iter_mut().for_each(|r| *r = v);
                }
            }
        }
    }
    dx
}

/// Row-wise log-softmax of a `[rows, cols]` matrix.
pub(crate) fn log_softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}
