//! Forward and backward kernels behind the autodiff graph.
//!
//! Convolutions go through im2col + GEMM, parallel over the batch. Reductions
//! over the batch (weight gradients) are summed sequentially in sample order so
//! results do not depend on the thread count.

use rayon::prelude::*;

use crate::tensor::Real;

/// Geometry of one 2-D convolution over an `(N, C_in, H, W)` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        (n, cin, h, w): (usize, usize, usize, usize),
        (cout, kh, kw): (usize, usize, usize),
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Some(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.cout * self.p()
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst =
                        &mut dx[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Lanes per output block of the direct kernels.
const BLOCK: usize = 32;

/// Stride-1 convolutions on wide maps are computed directly on zero-padded
/// planes, where every kernel tap is a constant offset into the flattened plane.
fn use_direct(g: &ConvGeom) -> bool {
    g.stride == 1 && !g.pointwise() && g.pad < g.kh && g.pad < g.kw && g.wo >= 32
}

struct Padded {
    hp: usize,
    wp: usize,
    /// Output positions in padded-row coordinates, rounded up to whole blocks.
    span: usize,
}

impl Padded {
    fn new(g: &ConvGeom) -> Self {
        let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
        let len = (g.ho - 1) * wp + g.wo;
        Self {
            hp,
            wp,
            span: len.div_ceil(BLOCK) * BLOCK,
        }
    }

    fn plane(&self) -> usize {
        self.hp * self.wp
    }
}

fn pad_planes<T: Real>(x: &[T], c: usize, g: &ConvGeom, pd: &Padded) -> Vec<T> {
    let plane = pd.plane();
    let mut out = vec![T::zero(); c * plane + BLOCK];
    for ci in 0..c {
        for y in 0..g.h {
            let dst = ci * plane + (y + g.pad) * pd.wp + g.pad;
            out[dst..dst + g.w].copy_from_slice(&x[(ci * g.h + y) * g.w..(ci * g.h + y + 1) * g.w]);
        }
    }
    out
}

fn direct_forward_sample<T: Real>(xs: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom, y: &mut [T]) {
    let pd = Padded::new(g);
    let plane = pd.plane();
    let xpad = pad_planes(xs, g.cin, g, &pd);
    let taps = g.kh * g.kw;
    let mut yq = vec![T::zero(); pd.span];
    for co in 0..g.cout {
        let bias = b.map_or(T::zero(), |b| b[co]);
        let wco = &w[co * g.cin * taps..(co + 1) * g.cin * taps];
        for (blk, out) in yq.chunks_exact_mut(BLOCK).enumerate() {
            let base = blk * BLOCK;
            let mut acc = [bias; BLOCK];
            for ci in 0..g.cin {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = wco[(ci * g.kh + ky) * g.kw + kx];
                        let off = ci * plane + base + ky * pd.wp + kx;
                        let xs: &[T; BLOCK] = xpad[off..off + BLOCK].try_into().expect("block");
                        for l in 0..BLOCK {
                            acc[l] += wv * xs[l];
                        }
                    }
                }
            }
            out.copy_from_slice(&acc);
        }
        let yp = &mut y[co * g.p()..(co + 1) * g.p()];
        for oy in 0..g.ho {
            yp[oy * g.wo..(oy + 1) * g.wo].copy_from_slice(&yq[oy * pd.wp..oy * pd.wp + g.wo]);
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    for (x, y) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for (x, y) in a
        .chunks_exact(8)
        .remainder()
        .iter()
        .zip(b.chunks_exact(8).remainder())
    {
        s += *x * *y;
    }
    for v in acc {
        s += v;
    }
    s
}

fn direct_backward_sample<T: Real>(
    xs: &[T],
    w: &[T],
    dys: &[T],
    g: &ConvGeom,
    dw: &mut [T],
    dx: Option<&mut [T]>,
) {
    let pd = Padded::new(g);
    let plane = pd.plane();
    let xpad = pad_planes(xs, g.cin, g, &pd);
    let taps = g.kh * g.kw;
    let mut dyq = vec![T::zero(); pd.span];
    for co in 0..g.cout {
        let dyp = &dys[co * g.p()..(co + 1) * g.p()];
        for oy in 0..g.ho {
            dyq[oy * pd.wp..oy * pd.wp + g.wo].copy_from_slice(&dyp[oy * g.wo..(oy + 1) * g.wo]);
        }
        for ci in 0..g.cin {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let off = ci * plane + ky * pd.wp + kx;
                    dw[(co * g.cin + ci) * taps + ky * g.kw + kx] =
                        dot(&dyq, &xpad[off..off + pd.span]);
                }
            }
        }
    }
    if let Some(dx) = dx {
        // The input gradient is a stride-1 convolution of dy with the
        // spatially flipped, channel-transposed kernel.
        let mut wt = vec![T::zero(); w.len()];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for t in 0..taps {
                    wt[(ci * g.cout + co) * taps + (taps - 1 - t)] =
                        w[(co * g.cin + ci) * taps + t];
                }
            }
        }
        let gt = ConvGeom::new(
            (1, g.cout, g.ho, g.wo),
            (g.cin, g.kh, g.kw),
            1,
            g.kh - 1 - g.pad,
        )
        .expect("transposed geometry");
        debug_assert_eq!((gt.ho, gt.wo), (g.h, g.w));
        direct_forward_sample(dys, &wt, None, &gt, dx);
    }
}

/// `y = conv(x, w) + b`; `w` is `(C_out, C_in·kh·kw)` row-major.
pub fn conv2d_forward<T: Real>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![T::zero(); g.n * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each_init(
            || Vec::new(),
            |cols, (y, xs)| {
                if use_direct(g) {
                    direct_forward_sample(xs, w, b, g, y);
                    return;
                }
                if let Some(b) = b {
                    for (co, row) in y.chunks_mut(p).enumerate() {
                        row.fill(b[co]);
                    }
                }
                let cols_ref: &[T] = if g.pointwise() {
                    xs
                } else {
                    cols.resize(k * p, T::zero());
                    im2col(xs, g, cols);
                    cols
                };
                let beta = if b.is_some() { T::one() } else { T::zero() };
                T::gemm(
                    g.cout,
                    k,
                    p,
                    T::one(),
                    w,
                    k,
                    1,
                    cols_ref,
                    p,
                    1,
                    beta,
                    y,
                    p,
                    1,
                );
            },
        );
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads<T> {
    let (k, p) = (g.k(), g.p());
    let per_sample: Vec<(Vec<T>, Option<Vec<T>>)> = x
        .par_chunks(g.in_len())
        .zip(dy.par_chunks(g.out_len()))
        .map(|(xs, dys)| {
            if use_direct(g) {
                let mut dw = vec![T::zero(); g.cout * k];
                let mut dx = need_dx.then(|| vec![T::zero(); g.in_len()]);
                direct_backward_sample(xs, w, dys, g, &mut dw, dx.as_deref_mut());
                return (dw, dx);
            }
            let owned;
            let cols: &[T] = if g.pointwise() {
                xs
            } else {
                let mut c = vec![T::zero(); k * p];
                im2col(xs, g, &mut c);
                owned = c;
                &owned
            };
            let mut dw = vec![T::zero(); g.cout * k];
            // dw = dy (C_out × P) · cols^T (P × K)
            T::gemm(
                g.cout,
                p,
                k,
                T::one(),
                dys,
                p,
                1,
                cols,
                1,
                p,
                T::zero(),
                &mut dw,
                k,
                1,
            );
            let dx = need_dx.then(|| {
                // dcols = w^T (K × C_out) · dy (C_out × P)
                if g.pointwise() {
                    let mut dx = vec![T::zero(); g.in_len()];
                    T::gemm(
                        k,
                        g.cout,
                        p,
                        T::one(),
                        w,
                        1,
                        k,
                        dys,
                        p,
                        1,
                        T::zero(),
                        &mut dx,
                        p,
                        1,
                    );
                    dx
                } else {
                    let mut dcols = vec![T::zero(); k * p];
                    T::gemm(
                        k,
                        g.cout,
                        p,
                        T::one(),
                        w,
                        1,
                        k,
                        dys,
                        p,
                        1,
                        T::zero(),
                        &mut dcols,
                        p,
                        1,
                    );
                    let mut dx = vec![T::zero(); g.in_len()];
                    col2im_add(&dcols, g, &mut dx);
                    dx
                }
            });
            (dw, dx)
        })
        .collect();

    let mut dw = vec![T::zero(); g.cout * k];
    let mut dx = need_dx.then(|| Vec::with_capacity(g.n * g.in_len()));
    for (dw_n, dx_n) in per_sample {
        for (a, b) in dw.iter_mut().zip(&dw_n) {
            *a += *b;
        }
        if let (Some(dx), Some(dx_n)) = (dx.as_mut(), dx_n) {
            dx.extend_from_slice(&dx_n);
        }
    }
    let mut db = vec![T::zero(); g.cout];
    for dys in dy.chunks(g.out_len()) {
        for (co, row) in dys.chunks(p).enumerate() {
            let mut s = T::zero();
            for &v in row {
                s += v;
            }
            db[co] += s;
        }
    }
    ConvGrads { dx, dw, db }
}

/// Row-wise numerically stabilized softmax of a `rows × cols` matrix, in place.
pub fn softmax_rows<T: Real>(m: &mut [T], cols: usize) {
    for row in m.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Shape of a channel (transposed) attention: queries `(C_q, P)`, keys and
/// values `(C_k, P)`, channels split evenly into `heads` groups.
#[derive(Debug, Clone, Copy)]
pub struct AttnGeom {
    pub n: usize,
    pub cq: usize,
    pub ck: usize,
    pub p: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn dq(&self) -> usize {
        self.cq / self.heads
    }
    fn dk(&self) -> usize {
        self.ck / self.heads
    }
    /// Elements of the per-sample probability block `(heads, d_q, d_k)`.
    pub fn probs_len(&self) -> usize {
        self.heads * self.dq() * self.dk()
    }
}

/// Softmax(τ · Q Kᵀ) per head, rows over key channels.
pub fn attention_probs<T: Real>(q: &[T], k: &[T], g: &AttnGeom, tau: T) -> Vec<T> {
    let (dq, dk, p) = (g.dq(), g.dk(), g.p);
    let mut probs = vec![T::zero(); g.n * g.probs_len()];
    probs
        .par_chunks_mut(g.probs_len())
        .zip(q.par_chunks(g.cq * p).zip(k.par_chunks(g.ck * p)))
        .for_each(|(a, (qs, ks))| {
            for h in 0..g.heads {
                let qh = &qs[h * dq * p..(h + 1) * dq * p];
                let kh = &ks[h * dk * p..(h + 1) * dk * p];
                let ah = &mut a[h * dq * dk..(h + 1) * dq * dk];
                T::gemm(dq, p, dk, tau, qh, p, 1, kh, 1, p, T::zero(), ah, dk, 1);
                softmax_rows(ah, dk);
            }
        });
    probs
}

/// `out = A · V` per head.
pub fn attention_apply<T: Real>(probs: &[T], v: &[T], g: &AttnGeom) -> Vec<T> {
    let (dq, dk, p) = (g.dq(), g.dk(), g.p);
    let mut out = vec![T::zero(); g.n * g.cq * p];
    out.par_chunks_mut(g.cq * p)
        .zip(probs.par_chunks(g.probs_len()).zip(v.par_chunks(g.ck * p)))
        .for_each(|(o, (a, vs))| {
            for h in 0..g.heads {
                let ah = &a[h * dq * dk..(h + 1) * dq * dk];
                let vh = &vs[h * dk * p..(h + 1) * dk * p];
                let oh = &mut o[h * dq * p..(h + 1) * dq * p];
                T::gemm(
                    dq,
                    dk,
                    p,
                    T::one(),
                    ah,
                    dk,
                    1,
                    vh,
                    p,
                    1,
                    T::zero(),
                    oh,
                    p,
                    1,
                );
            }
        });
    out
}

pub struct AttnGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

pub fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    g: &AttnGeom,
    tau: T,
) -> AttnGrads<T> {
    let (dq_, dk_, p) = (g.dq(), g.dk(), g.p);
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|s| {
            let qs = &q[s * g.cq * p..(s + 1) * g.cq * p];
            let ks = &k[s * g.ck * p..(s + 1) * g.ck * p];
            let vs = &v[s * g.ck * p..(s + 1) * g.ck * p];
            let a = &probs[s * g.probs_len()..(s + 1) * g.probs_len()];
            let dos = &dout[s * g.cq * p..(s + 1) * g.cq * p];
            let mut gq = vec![T::zero(); g.cq * p];
            let mut gk = vec![T::zero(); g.ck * p];
            let mut gv = vec![T::zero(); g.ck * p];
            let mut da = vec![T::zero(); dq_ * dk_];
            for h in 0..g.heads {
                let qh = &qs[h * dq_ * p..(h + 1) * dq_ * p];
                let kh = &ks[h * dk_ * p..(h + 1) * dk_ * p];
                let vh = &vs[h * dk_ * p..(h + 1) * dk_ * p];
                let ah = &a[h * dq_ * dk_..(h + 1) * dq_ * dk_];
                let doh = &dos[h * dq_ * p..(h + 1) * dq_ * p];
                // dV = Aᵀ dO
                T::gemm(
                    dk_,
                    dq_,
                    p,
                    T::one(),
                    ah,
                    1,
                    dk_,
                    doh,
                    p,
                    1,
                    T::zero(),
                    &mut gv[h * dk_ * p..(h + 1) * dk_ * p],
                    p,
                    1,
                );
                // dA = dO Vᵀ
                T::gemm(
                    dq_,
                    p,
                    dk_,
                    T::one(),
                    doh,
                    p,
                    1,
                    vh,
                    1,
                    p,
                    T::zero(),
                    &mut da,
                    dk_,
                    1,
                );
                // softmax backward, then the τ scale of the logits
                for (arow, darow) in ah.chunks(dk_).zip(da.chunks_mut(dk_)) {
                    let mut dot = T::zero();
                    for (&ai, &di) in arow.iter().zip(darow.iter()) {
                        dot += ai * di;
                    }
                    for (&ai, di) in arow.iter().zip(darow.iter_mut()) {
                        *di = tau * ai * (*di - dot);
                    }
                }
                // dQ = dS K, dK = dSᵀ Q
                T::gemm(
                    dq_,
                    dk_,
                    p,
                    T::one(),
                    &da,
                    dk_,
                    1,
                    kh,
                    p,
                    1,
                    T::zero(),
                    &mut gq[h * dq_ * p..(h + 1) * dq_ * p],
                    p,
                    1,
                );
                T::gemm(
                    dk_,
                    dq_,
                    p,
                    T::one(),
                    &da,
                    1,
                    dk_,
                    qh,
                    p,
                    1,
                    T::zero(),
                    &mut gk[h * dk_ * p..(h + 1) * dk_ * p],
                    p,
                    1,
                );
            }
            (gq, gk, gv)
        })
        .collect();
    let mut grads = AttnGrads {
        dq: Vec::with_capacity(q.len()),
        dk: Vec::with_capacity(k.len()),
        dv: Vec::with_capacity(v.len()),
    };
    for (gq, gk, gv) in per_sample {
        grads.dq.extend(gq);
        grads.dk.extend(gk);
        grads.dv.extend(gv);
    }
    grads
}

/// Nearest-neighbour ×2 upsampling of `(N·C, H, W)` planes.
pub fn upsample2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * h2 * w2];
    for (src, dst) in x.chunks(h * w).zip(out.chunks_mut(h2 * w2)) {
        for y in 0..h2 {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (xx, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Real>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let w2 = 2 * w;
    let mut dx = vec![T::zero(); planes * h * w];
    for (src, dst) in dy.chunks(4 * h * w).zip(dx.chunks_mut(h * w)) {
        for y in 0..2 * h {
            for xx in 0..w2 {
                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx];
            }
        }
    }
    dx
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
