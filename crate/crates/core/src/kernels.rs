//! Raw numeric kernels behind the autograd ops.
//!
//! Dense convolutions lower to matrix products over an im2col buffer;
//! grouped (depthwise) convolutions use direct loops. Forward and
//! input-gradient passes parallelise over the batch. Weight gradients are
//! formed per image and summed in batch order, so results do not depend on
//! thread count.

use crate::exec;
use crate::tensor::{Scalar, Strided, StridedMut, Tensor};

/// Images whose weight-gradient contributions are materialised at once.
const WEIGHT_GRAD_CHUNK: usize = 8;

pub const BN_EPS: f64 = 1e-5;

/// Stride / padding / grouping of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn same(kernel: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: kernel / 2,
            groups: 1,
        }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding - kernel) / self.stride + 1
    }
}

/// Range of output columns `ow` whose input column `ow*s + k - p` is in `[0, w)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let (k, pad, s) = (k as isize, pad as isize, stride as isize);
    let lo = if pad > k { (pad - k + s - 1) / s } else { 0 };
    let last = in_len as isize - 1 + pad - k;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    ho: usize,
    wo: usize,
    ci_g: usize,
    co_g: usize,
    spec: ConvSpec,
}

fn geometry<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, spec: ConvSpec) -> ConvGeom {
    let (n, ci, h, w) = x.dims4();
    let ws = weight.shape();
    let (co, k) = (ws[0], ws[2]);
    ConvGeom {
        n,
        ci,
        h,
        w,
        co,
        k,
        ho: spec.output_size(h, k),
        wo: spec.output_size(w, k),
        ci_g: ci / spec.groups,
        co_g: co / spec.groups,
        spec,
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Tensor<T> {
    let g = geometry(x, weight, spec);
    if spec.groups == 1 {
        return dense_forward(&g, x, weight, bias);
    }
    let mut out = Tensor::zeros(&[g.n, g.co, g.ho, g.wo]);
    let (xd, wd) = (x.data(), weight.data());
    let bd = bias.map(|b| b.data());
    let plane_out = g.ho * g.wo;
    exec::for_each_chunk_mut(out.data_mut(), g.co * plane_out, |n, chunk| {
        for oc in 0..g.co {
            let group = oc / g.co_g;
            let op = &mut chunk[oc * plane_out..(oc + 1) * plane_out];
            if let Some(b) = bd {
                op.fill(b[oc]);
            }
            for icg in 0..g.ci_g {
                let ic = group * g.ci_g + icg;
                let ip = &xd[(n * g.ci + ic) * g.h * g.w..][..g.h * g.w];
                for kh in 0..g.k {
                    let (oh_lo, oh_hi) = valid_range(g.ho, g.h, g.spec.stride, kh, g.spec.padding);
                    for kw in 0..g.k {
                        let wv = wd[((oc * g.ci_g + icg) * g.k + kh) * g.k + kw];
                        let (ow_lo, ow_hi) =
                            valid_range(g.wo, g.w, g.spec.stride, kw, g.spec.padding);
                        if ow_lo == ow_hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.spec.stride + kh - g.spec.padding;
                            let row = &ip[ih * g.w..(ih + 1) * g.w];
                            let orow = &mut op[oh * g.wo..(oh + 1) * g.wo];
                            if g.spec.stride == 1 {
                                let off = kw as isize - g.spec.padding as isize;
                                let src = &row[(ow_lo as isize + off) as usize
                                    ..(ow_hi as isize + off) as usize];
                                for (o, &v) in orow[ow_lo..ow_hi].iter_mut().zip(src) {
                                    *o += wv * v;
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * g.spec.stride + kw - g.spec.padding;
                                    orow[ow] += wv * row[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
    spec: ConvSpec,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let g = geometry(x, weight, spec);
    if spec.groups == 1 {
        return dense_backward(&g, x, weight, gout, need);
    }
    let (xd, wd, gd) = (x.data(), weight.data(), gout.data());
    let plane_out = g.ho * g.wo;
    let plane_in = g.h * g.w;

    let input = need.0.then(|| {
        let mut gin = Tensor::zeros(x.shape());
        exec::for_each_chunk_mut(gin.data_mut(), g.ci * plane_in, |n, chunk| {
            for oc in 0..g.co {
                let group = oc / g.co_g;
                let gp = &gd[(n * g.co + oc) * plane_out..][..plane_out];
                for icg in 0..g.ci_g {
                    let ic = group * g.ci_g + icg;
                    let ip = &mut chunk[ic * plane_in..(ic + 1) * plane_in];
                    for kh in 0..g.k {
                        let (oh_lo, oh_hi) =
                            valid_range(g.ho, g.h, g.spec.stride, kh, g.spec.padding);
                        for kw in 0..g.k {
                            let wv = wd[((oc * g.ci_g + icg) * g.k + kh) * g.k + kw];
                            let (ow_lo, ow_hi) =
                                valid_range(g.wo, g.w, g.spec.stride, kw, g.spec.padding);
                            for oh in oh_lo..oh_hi {
                                let ih = oh * g.spec.stride + kh - g.spec.padding;
                                let grow = &gp[oh * g.wo..(oh + 1) * g.wo];
                                let irow = &mut ip[ih * g.w..(ih + 1) * g.w];
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * g.spec.stride + kw - g.spec.padding;
                                    irow[iw] += wv * grow[ow];
                                }
                            }
                        }
                    }
                }
            }
        });
        gin
    });

    let weight_grad = need.1.then(|| {
        let mut gw = Tensor::zeros(weight.shape());
        let per_oc = g.ci_g * g.k * g.k;
        exec::for_each_chunk_mut(gw.data_mut(), per_oc, |oc, chunk| {
            let group = oc / g.co_g;
            for n in 0..g.n {
                let gp = &gd[(n * g.co + oc) * plane_out..][..plane_out];
                for icg in 0..g.ci_g {
                    let ic = group * g.ci_g + icg;
                    let ip = &xd[(n * g.ci + ic) * plane_in..][..plane_in];
                    for kh in 0..g.k {
                        let (oh_lo, oh_hi) =
                            valid_range(g.ho, g.h, g.spec.stride, kh, g.spec.padding);
                        for kw in 0..g.k {
                            let (ow_lo, ow_hi) =
                                valid_range(g.wo, g.w, g.spec.stride, kw, g.spec.padding);
                            let mut acc = T::zero();
                            for oh in oh_lo..oh_hi {
                                let ih = oh * g.spec.stride + kh - g.spec.padding;
                                let grow = &gp[oh * g.wo..(oh + 1) * g.wo];
                                let irow = &ip[ih * g.w..(ih + 1) * g.w];
                                for ow in ow_lo..ow_hi {
                                    acc += grow[ow] * irow[ow * g.spec.stride + kw - g.spec.padding];
                                }
                            }
                            chunk[(icg * g.k + kh) * g.k + kw] += acc;
                        }
                    }
                }
            }
        });
        gw
    });

    ConvGrads {
        input,
        weight: weight_grad,
        bias: need.2.then(|| bias_grad(&g, gd)),
    }
}

impl ConvGeom {
    /// Rows of the im2col matrix.
    fn col_rows(&self) -> usize {
        self.ci * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }
}

/// Unfolds one image `(ci, h, w)` into `(ci * k * k, ho * wo)`; out-of-range taps are zero.
fn im2col<T: Scalar>(g: &ConvGeom, img: &[T], col: &mut [T]) {
    let p = g.ho * g.wo;
    let (s, pad) = (g.spec.stride, g.spec.padding);
    for ic in 0..g.ci {
        let plane = &img[ic * g.h * g.w..][..g.h * g.w];
        for kh in 0..g.k {
            let (oh_lo, oh_hi) = valid_range(g.ho, g.h, s, kh, pad);
            for kw in 0..g.k {
                let (ow_lo, ow_hi) = valid_range(g.wo, g.w, s, kw, pad);
                let row = &mut col[((ic * g.k + kh) * g.k + kw) * p..][..p];
                row.fill(T::zero());
                for oh in oh_lo..oh_hi {
                    let ih = oh * s + kh - pad;
                    let src = &plane[ih * g.w..][..g.w];
                    let dst = &mut row[oh * g.wo..][..g.wo];
                    for ow in ow_lo..ow_hi {
                        dst[ow] = src[ow * s + kw - pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `(ci * k * k, ho * wo)` back onto `(ci, h, w)`.
fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], img: &mut [T]) {
    let p = g.ho * g.wo;
    let (s, pad) = (g.spec.stride, g.spec.padding);
    for ic in 0..g.ci {
        let plane = &mut img[ic * g.h * g.w..][..g.h * g.w];
        for kh in 0..g.k {
            let (oh_lo, oh_hi) = valid_range(g.ho, g.h, s, kh, pad);
            for kw in 0..g.k {
                let (ow_lo, ow_hi) = valid_range(g.wo, g.w, s, kw, pad);
                let row = &col[((ic * g.k + kh) * g.k + kw) * p..][..p];
                for oh in oh_lo..oh_hi {
                    let ih = oh * s + kh - pad;
                    let dst = &mut plane[ih * g.w..][..g.w];
                    let src = &row[oh * g.wo..][..g.wo];
                    for ow in ow_lo..ow_hi {
                        dst[ow * s + kw - pad] += src[ow];
                    }
                }
            }
        }
    }
}

/// Runs `f` with the image's im2col matrix (the image itself for a plain 1x1 conv).
fn with_col<T: Scalar, R>(g: &ConvGeom, img: &[T], scratch: &mut Vec<T>, f: impl FnOnce(&[T]) -> R) -> R {
    if g.is_pointwise() {
        f(img)
    } else {
        scratch.resize(g.col_rows() * g.ho * g.wo, T::zero());
        im2col(g, img, scratch);
        f(scratch)
    }
}

fn dense_forward<T: Scalar>(g: &ConvGeom, x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let (kk, p) = (g.col_rows(), g.ho * g.wo);
    let mut out = Tensor::zeros(&[g.n, g.co, g.ho, g.wo]);
    let (xd, wd) = (x.data(), weight.data());
    exec::for_each_chunk_mut(out.data_mut(), g.co * p, |n, chunk| {
        let img = &xd[n * g.ci * g.h * g.w..][..g.ci * g.h * g.w];
        let mut scratch = Vec::new();
        with_col(g, img, &mut scratch, |col| {
            T::gemm(
                g.co,
                kk,
                p,
                Strided { data: wd, rows: kk, cols: 1 },
                Strided { data: col, rows: p, cols: 1 },
                T::zero(),
                StridedMut { data: chunk, rows: p, cols: 1 },
            )
        });
        if let Some(b) = bias {
            for (plane, &bv) in chunk.chunks_mut(p).zip(b.data()) {
                for v in plane {
                    *v += bv;
                }
            }
        }
    });
    out
}

fn dense_backward<T: Scalar>(
    g: &ConvGeom,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (kk, p) = (g.col_rows(), g.ho * g.wo);
    let (xd, wd, gd) = (x.data(), weight.data(), gout.data());
    let img_len = g.ci * g.h * g.w;

    let input = need.0.then(|| {
        let mut gin = Tensor::zeros(x.shape());
        exec::for_each_chunk_mut(gin.data_mut(), img_len, |n, chunk| {
            let go = &gd[n * g.co * p..][..g.co * p];
            // W^T (kk x co) times gout_n (co x p)
            let wt = Strided { data: wd, rows: 1, cols: kk };
            let gm = Strided { data: go, rows: p, cols: 1 };
            if g.is_pointwise() {
                T::gemm(kk, g.co, p, wt, gm, T::zero(), StridedMut { data: chunk, rows: p, cols: 1 });
            } else {
                let mut gcol = vec![T::zero(); kk * p];
                T::gemm(kk, g.co, p, wt, gm, T::zero(), StridedMut { data: &mut gcol, rows: p, cols: 1 });
                col2im(g, &gcol, chunk);
            }
        });
        gin
    });

    let weight_grad = need.1.then(|| {
        let mut gw = Tensor::zeros(weight.shape());
        let mut start = 0;
        while start < g.n {
            let len = WEIGHT_GRAD_CHUNK.min(g.n - start);
            let parts = exec::map_indices(len, |i| {
                let n = start + i;
                let img = &xd[n * img_len..][..img_len];
                let go = &gd[n * g.co * p..][..g.co * p];
                let mut part = vec![T::zero(); g.co * kk];
                let mut scratch = Vec::new();
                with_col(g, img, &mut scratch, |col| {
                    // gout_n (co x p) times col^T (p x kk)
                    T::gemm(
                        g.co,
                        p,
                        kk,
                        Strided { data: go, rows: p, cols: 1 },
                        Strided { data: col, rows: 1, cols: p },
                        T::zero(),
                        StridedMut { data: &mut part, rows: kk, cols: 1 },
                    )
                });
                part
            });
            for part in parts {
                for (a, b) in gw.data_mut().iter_mut().zip(part) {
                    *a += b;
                }
            }
            start += len;
        }
        gw
    });

    ConvGrads {
        input,
        weight: weight_grad,
        bias: need.2.then(|| bias_grad(g, gd)),
    }
}

fn bias_grad<T: Scalar>(g: &ConvGeom, gd: &[T]) -> Tensor<T> {
    let plane_out = g.ho * g.wo;
    let sums = exec::map_indices(g.co, |oc| {
        let mut acc = T::zero();
        for n in 0..g.n {
            for &v in &gd[(n * g.co + oc) * plane_out..][..plane_out] {
                acc += v;
            }
        }
        acc
    });
    Tensor::from_vec(&[g.co], sums).expect("bias grad shape")
}

/// Per-channel mean and biased variance over `(n, h, w)`.
pub fn channel_moments<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let m = T::from_f64((n * plane) as f64);
    let stats = exec::map_indices(c, |ch| {
        let mut sum = T::zero();
        for b in 0..n {
            for &v in &x.data()[(b * c + ch) * plane..][..plane] {
                sum += v;
            }
        }
        let mean = sum / m;
        let mut sq = T::zero();
        for b in 0..n {
            for &v in &x.data()[(b * c + ch) * plane..][..plane] {
                let d = v - mean;
                sq += d * d;
            }
        }
        (mean, sq / m)
    });
    stats.into_iter().unzip()
}
