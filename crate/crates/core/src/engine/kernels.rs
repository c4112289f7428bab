//! Forward and backward kernels for each layer kind.
//!
//! Batch items are processed in parallel. Parameter gradients are reduced over
//! fixed-size chunks of the batch and then summed in chunk order, so results do
//! not depend on the number of worker threads.

use rayon::prelude::*;

const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub oh: usize,
    pub ow: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_t: usize,
    pub pad_l: usize,
}

impl ConvGeom {
    fn in_len(&self) -> usize {
        self.h * self.w * self.cin
    }

    fn out_len(&self) -> usize {
        self.oh * self.ow * self.cout
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }
}

fn sum_chunks(parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

pub fn conv2d_forward(x: &[f64], n: usize, w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; n * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(y, x)| {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let acc = &mut y[(oy * g.ow + ox) * g.cout..][..g.cout];
                    if let Some(b) = b {
                        acc.copy_from_slice(b);
                    }
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.pad_t, g.h) else { continue };
                        for kx in 0..g.kw {
                            let Some(ix) = g.src(ox, kx, g.pad_l, g.w) else { continue };
                            let xs = &x[(iy * g.w + ix) * g.cin..][..g.cin];
                            let wk = &w[(ky * g.kw + kx) * g.cin * g.cout..];
                            for (ci, &xv) in xs.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let wr = &wk[ci * g.cout..][..g.cout];
                                for (a, &wv) in acc.iter_mut().zip(wr) {
                                    *a += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Returns (grad wrt input, grad wrt weight, grad wrt bias).
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    gy: &[f64],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let gx = need_x.then(|| {
        let mut gx = vec![0.0; n * g.in_len()];
        gx.par_chunks_mut(g.in_len())
            .zip(gy.par_chunks(g.out_len()))
            .for_each(|(gx, gy)| {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let go = &gy[(oy * g.ow + ox) * g.cout..][..g.cout];
                        for ky in 0..g.kh {
                            let Some(iy) = g.src(oy, ky, g.pad_t, g.h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.src(ox, kx, g.pad_l, g.w) else { continue };
                                let gxs = &mut gx[(iy * g.w + ix) * g.cin..][..g.cin];
                                let wk = &w[(ky * g.kw + kx) * g.cin * g.cout..];
                                for (ci, gv) in gxs.iter_mut().enumerate() {
                                    let wr = &wk[ci * g.cout..][..g.cout];
                                    *gv += wr.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                }
            });
        gx
    });

    let wlen = g.kh * g.kw * g.cin * g.cout;
    let gw = need_w.then(|| {
        let parts: Vec<Vec<f64>> = x
            .par_chunks(g.in_len() * CHUNK)
            .zip(gy.par_chunks(g.out_len() * CHUNK))
            .map(|(xc, gc)| {
                let mut gw = vec![0.0; wlen];
                for (x, gy) in xc.chunks(g.in_len()).zip(gc.chunks(g.out_len())) {
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            let go = &gy[(oy * g.ow + ox) * g.cout..][..g.cout];
                            for ky in 0..g.kh {
                                let Some(iy) = g.src(oy, ky, g.pad_t, g.h) else { continue };
                                for kx in 0..g.kw {
                                    let Some(ix) = g.src(ox, kx, g.pad_l, g.w) else { continue };
                                    let xs = &x[(iy * g.w + ix) * g.cin..][..g.cin];
                                    let base = (ky * g.kw + kx) * g.cin * g.cout;
                                    for (ci, &xv) in xs.iter().enumerate() {
                                        if xv == 0.0 {
                                            continue;
                                        }
                                        let gr = &mut gw[base + ci * g.cout..][..g.cout];
                                        for (a, &b) in gr.iter_mut().zip(go) {
                                            *a += xv * b;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                gw
            })
            .collect();
        sum_chunks(parts, wlen)
    });

    let mut gb = vec![0.0; g.cout];
    for row in gy.chunks(g.cout) {
        for (a, b) in gb.iter_mut().zip(row) {
            *a += b;
        }
    }
    (gx, gw, gb)
}

pub fn depthwise_forward(x: &[f64], n: usize, w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let c = g.cin;
    let mut out = vec![0.0; n * g.out_len()];
    out.par_chunks_mut(g.out_len())
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(y, x)| {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let acc = &mut y[(oy * g.ow + ox) * c..][..c];
                    if let Some(b) = b {
                        acc.copy_from_slice(b);
                    }
                    for ky in 0..g.kh {
                        let Some(iy) = g.src(oy, ky, g.pad_t, g.h) else { continue };
                        for kx in 0..g.kw {
                            let Some(ix) = g.src(ox, kx, g.pad_l, g.w) else { continue };
                            let xs = &x[(iy * g.w + ix) * c..][..c];
                            let wr = &w[(ky * g.kw + kx) * c..][..c];
                            for ((a, &xv), &wv) in acc.iter_mut().zip(xs).zip(wr) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        });
    out
}

pub fn depthwise_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    gy: &[f64],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let c = g.cin;
    let gx = need_x.then(|| {
        let mut gx = vec![0.0; n * g.in_len()];
        gx.par_chunks_mut(g.in_len())
            .zip(gy.par_chunks(g.out_len()))
            .for_each(|(gx, gy)| {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let go = &gy[(oy * g.ow + ox) * c..][..c];
                        for ky in 0..g.kh {
                            let Some(iy) = g.src(oy, ky, g.pad_t, g.h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = g.src(ox, kx, g.pad_l, g.w) else { continue };
                                let gxs = &mut gx[(iy * g.w + ix) * c..][..c];
                                let wr = &w[(ky * g.kw + kx) * c..][..c];
                                for ((a, &wv), &gv) in gxs.iter_mut().zip(wr).zip(go) {
                                    *a += wv * gv;
                                }
                            }
                        }
                    }
                }
            });
        gx
    });
    let wlen = g.kh * g.kw * c;
    let gw = need_w.then(|| {
        let parts: Vec<Vec<f64>> = x
            .par_chunks(g.in_len() * CHUNK)
            .zip(gy.par_chunks(g.out_len() * CHUNK))
            .map(|(xc, gc)| {
                let mut gw = vec![0.0; wlen];
                for (x, gy) in xc.chunks(g.in_len()).zip(gc.chunks(g.out_len())) {
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            let go = &gy[(oy * g.ow + ox) * c..][..c];
                            for ky in 0..g.kh {
                                let Some(iy) = g.src(oy, ky, g.pad_t, g.h) else { continue };
                                for kx in 0..g.kw {
                                    let Some(ix) = g.src(ox, kx, g.pad_l, g.w) else { continue };
                                    let xs = &x[(iy * g.w + ix) * c..][..c];
                                    let gr = &mut gw[(ky * g.kw + kx) * c..][..c];
                                    for ((a, &xv), &gv) in gr.iter_mut().zip(xs).zip(go) {
                                        *a += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                gw
            })
            .collect();
        sum_chunks(parts, wlen)
    });
    let mut gb = vec![0.0; c];
    for row in gy.chunks(c) {
        for (a, b) in gb.iter_mut().zip(row) {
            *a += b;
        }
    }
    (gx, gw, gb)
}

pub fn dense_forward(x: &[f64], n: usize, w: &[f64], b: Option<&[f64]>, cin: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * cout];
    out.par_chunks_mut(cout)
        .zip(x.par_chunks(cin))
        .for_each(|(y, x)| {
            if let Some(b) = b {
                y.copy_from_slice(b);
            }
            for (ci, &xv) in x.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (a, &wv) in y.iter_mut().zip(&w[ci * cout..(ci + 1) * cout]) {
                    *a += xv * wv;
                }
            }
        });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    x: &[f64],
    n: usize,
    w: &[f64],
    gy: &[f64],
    cin: usize,
    cout: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let gx = need_x.then(|| {
        let mut gx = vec![0.0; n * cin];
        gx.par_chunks_mut(cin)
            .zip(gy.par_chunks(cout))
            .for_each(|(gx, go)| {
                for (ci, a) in gx.iter_mut().enumerate() {
                    *a = w[ci * cout..(ci + 1) * cout]
                        .iter()
                        .zip(go)
                        .map(|(w, g)| w * g)
                        .sum();
                }
            });
        gx
    });
    let gw = need_w.then(|| {
        let parts: Vec<Vec<f64>> = x
            .par_chunks(cin * CHUNK)
            .zip(gy.par_chunks(cout * CHUNK))
            .map(|(xc, gc)| {
                let mut gw = vec![0.0; cin * cout];
                for (x, go) in xc.chunks(cin).zip(gc.chunks(cout)) {
                    for (ci, &xv) in x.iter().enumerate() {
                        for (a, &g) in gw[ci * cout..(ci + 1) * cout].iter_mut().zip(go) {
                            *a += xv * g;
                        }
                    }
                }
                gw
            })
            .collect();
        sum_chunks(parts, cin * cout)
    });
    let mut gb = vec![0.0; cout];
    let _ = n;
    for row in gy.chunks(cout) {
        for (a, b) in gb.iter_mut().zip(row) {
            *a += b;
        }
    }
    (gx, gw, gb)
}

#[derive(Debug, Clone, Copy)]
pub struct PoolGeom {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub oh: usize,
    pub ow: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl PoolGeom {
    fn window(&self, oy: usize, ox: usize) -> impl Iterator<Item = usize> + '_ {
        let (y0, x0) = (oy * self.stride, ox * self.stride);
        (0..self.kh).flat_map(move |ky| (0..self.kw).map(move |kx| ((y0 + ky) * self.w + x0 + kx) * self.c))
    }
}

pub fn avgpool_forward(x: &[f64], n: usize, g: &PoolGeom) -> Vec<f64> {
    let (il, ol) = (g.h * g.w * g.c, g.oh * g.ow * g.c);
    let area = (g.kh * g.kw) as f64;
    let mut out = vec![0.0; n * ol];
    out.par_chunks_mut(ol).zip(x.par_chunks(il)).for_each(|(y, x)| {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let acc = &mut y[(oy * g.ow + ox) * g.c..][..g.c];
                for base in g.window(oy, ox) {
                    for (a, v) in acc.iter_mut().zip(&x[base..base + g.c]) {
                        *a += v;
                    }
                }
                for a in acc.iter_mut() {
                    *a /= area;
                }
            }
        }
    });
    out
}

pub fn avgpool_backward(gy: &[f64], n: usize, g: &PoolGeom) -> Vec<f64> {
    let (il, ol) = (g.h * g.w * g.c, g.oh * g.ow * g.c);
    let area = (g.kh * g.kw) as f64;
    let mut gx = vec![0.0; n * il];
    gx.par_chunks_mut(il).zip(gy.par_chunks(ol)).for_each(|(gx, gy)| {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let go = &gy[(oy * g.ow + ox) * g.c..][..g.c];
                for base in g.window(oy, ox) {
                    for (a, v) in gx[base..base + g.c].iter_mut().zip(go) {
                        *a += v / area;
                    }
                }
            }
        }
    });
    gx
}

/// Max pooling; ties resolve to the first element of the window.
pub fn maxpool_forward(x: &[f64], n: usize, g: &PoolGeom) -> Vec<f64> {
    let (il, ol) = (g.h * g.w * g.c, g.oh * g.ow * g.c);
    let mut out = vec![0.0; n * ol];
    out.par_chunks_mut(ol).zip(x.par_chunks(il)).for_each(|(y, x)| {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let acc = &mut y[(oy * g.ow + ox) * g.c..][..g.c];
                acc.fill(f64::NEG_INFINITY);
                for base in g.window(oy, ox) {
                    for (a, &v) in acc.iter_mut().zip(&x[base..base + g.c]) {
                        if v > *a {
                            *a = v;
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn maxpool_backward(x: &[f64], gy: &[f64], n: usize, g: &PoolGeom) -> Vec<f64> {
    let (il, ol) = (g.h * g.w * g.c, g.oh * g.ow * g.c);
    let mut gx = vec![0.0; n * il];
    gx.par_chunks_mut(il)
        .zip(x.par_chunks(il))
        .zip(gy.par_chunks(ol))
        .for_each(|((gx, x), gy)| {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    for c in 0..g.c {
                        let mut best = None::<(usize, f64)>;
                        for base in g.window(oy, ox) {
                            let v = x[base + c];
                            if best.is_none_or(|(_, b)| v > b) {
                                best = Some((base + c, v));
                            }
                        }
                        if let Some((i, _)) = best {
                            gx[i] += gy[(oy * g.ow + ox) * g.c + c];
                        }
                    }
                }
            }
        });
    gx
}
