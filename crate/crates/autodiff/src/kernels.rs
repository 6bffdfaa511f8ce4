//! Raw numeric kernels behind the graph ops. Everything here works on flat
//! row-major slices; shape checking happens in `graph`.

use rayon::prelude::*;

/// `c = a * b + beta * c` for strided row/column-major operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(k == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    debug_assert!(c.len() > (m - 1) * c_row_stride + (n - 1));
    // SAFETY: the debug assertions above document the extents; all callers
    // derive strides from the same shapes used to allocate the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_sample(&self) -> usize {
        self.in_ch * self.h * self.w
    }

    pub fn out_sample(&self) -> usize {
        self.out_ch * self.out_plane()
    }

    pub fn cols_sample(&self) -> usize {
        self.patch_len() * self.out_plane()
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * plane;
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.pad_h as isize;
                    let dst = &mut cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    if y < 0 || y >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + y as usize) * g.w..(c * g.h + y as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let xx = (ox * g.stride + j) as isize - g.pad_w as isize;
                        *d = if xx < 0 || xx >= g.w as isize { 0.0 } else { src[xx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * plane;
                for oy in 0..g.out_h {
                    let y = (oy * g.stride + i) as isize - g.pad_h as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + y as usize) * g.w;
                    let src = &cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for (ox, s) in src.iter().enumerate() {
                        let xx = (ox * g.stride + j) as isize - g.pad_w as isize;
                        if xx >= 0 && (xx as usize) < g.w {
                            dx[base + xx as usize] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward. Returns `(output, im2col buffers)`; the
/// buffers are kept for the weight gradient.
pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; g.batch * g.out_sample()];
    let mut cols = vec![0.0; g.batch * g.cols_sample()];
    let plane = g.out_plane();
    let patch = g.patch_len();
    out.par_chunks_mut(g.out_sample())
        .zip(cols.par_chunks_mut(g.cols_sample()))
        .zip(x.par_chunks(g.in_sample()))
        .for_each(|((out_b, cols_b), x_b)| {
            im2col(g, x_b, cols_b);
            for (k, row) in out_b.chunks_mut(plane).enumerate() {
                row.fill(bias[k]);
            }
            gemm(g.out_ch, patch, plane, weight, (patch, 1), cols_b, (plane, 1), 1.0, out_b, plane);
        });
    (out, cols)
}

/// Accumulates gradients for the conv inputs. Weight and bias reductions
/// run over the batch in index order so results do not depend on the
/// thread count.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    grad_out: &[f64],
    cols: &[f64],
    weight: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    if let Some(dw) = dw {
        for (go_b, cols_b) in grad_out.chunks(g.out_sample()).zip(cols.chunks(g.cols_sample())) {
            gemm(g.out_ch, plane, patch, go_b, (plane, 1), cols_b, (1, plane), 1.0, dw, patch);
        }
    }
    if let Some(db) = db {
        for go_b in grad_out.chunks(g.out_sample()) {
            for (k, row) in go_b.chunks(plane).enumerate() {
                db[k] += row.iter().sum::<f64>();
            }
        }
    }
    if let Some(dx) = dx {
        dx.par_chunks_mut(g.in_sample()).zip(grad_out.par_chunks(g.out_sample())).for_each(|(dx_b, go_b)| {
            let mut dcols = vec![0.0; g.cols_sample()];
            gemm(patch, g.out_ch, plane, weight, (1, patch), go_b, (plane, 1), 0.0, &mut dcols, plane);
            col2im_add(g, &dcols, dx_b);
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub batch: usize,
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Max pooling with implicit `-inf` padding. Ties resolve to the first
/// element in row-major window order.
pub(crate) fn max_pool_forward(g: &PoolGeom, x: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let planes = g.batch * g.ch;
    let mut out = vec![0.0; planes * g.out_h * g.out_w];
    let mut arg = vec![0usize; out.len()];
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for i in 0..g.kernel {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    for j in 0..g.kernel {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx < 0 || xx >= g.w as isize {
                            continue;
                        }
                        let idx = base + y as usize * g.w + xx as usize;
                        if x[idx] > best || best_idx == usize::MAX {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (p * g.out_h + oy) * g.out_w + ox;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    (out, arg)
}
