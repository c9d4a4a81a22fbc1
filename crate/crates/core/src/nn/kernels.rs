//! Dense linear kernels shared by point evaluation and interval propagation.
//!
//! Parameters are stored as `f32`; activations and accumulators are `f64`.
//! The `ABS` variants apply `|W|` instead of `W`, which is what radius
//! propagation needs.

#[inline]
fn weight<const ABS: bool>(w: f32) -> f64 {
    if ABS {
        (w as f64).abs()
    } else {
        w as f64
    }
}

#[inline]
pub(crate) fn sign(w: f32) -> f64 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `y = W x (+ b)` for a row-major `(out, in)` weight matrix.
pub(crate) fn affine<const ABS: bool>(w: &[f32], bias: Option<&[f32]>, x: &[f64], y: &mut [f64]) {
    let in_dim = x.len();
    for (o, out) in y.iter_mut().enumerate() {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = bias.map_or(0.0, |b| b[o] as f64);
        for (wi, xi) in row.iter().zip(x) {
            acc += weight::<ABS>(*wi) * xi;
        }
        *out = acc;
    }
}

/// `gx = W^T gy`, overwriting `gx`.
pub(crate) fn affine_transpose<const ABS: bool>(w: &[f32], gy: &[f64], gx: &mut [f64]) {
    let in_dim = gx.len();
    gx.fill(0.0);
    for (o, g) in gy.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        let row = &w[o * in_dim..(o + 1) * in_dim];
        for (acc, wi) in gx.iter_mut().zip(row) {
            *acc += weight::<ABS>(*wi) * g;
        }
    }
}

/// `gw += scale * gy x^T`, optionally multiplied elementwise by `sign(W)`.
pub(crate) fn affine_weight_grad(
    gy: &[f64],
    x: &[f64],
    signs: Option<&[f32]>,
    scale: f64,
    gw: &mut [f64],
) {
    let in_dim = x.len();
    for (o, g) in gy.iter().enumerate() {
        let g = g * scale;
        if g == 0.0 {
            continue;
        }
        let row = &mut gw[o * in_dim..(o + 1) * in_dim];
        match signs {
            None => {
                for (acc, xi) in row.iter_mut().zip(x) {
                    *acc += g * xi;
                }
            }
            Some(w) => {
                let wrow = &w[o * in_dim..(o + 1) * in_dim];
                for ((acc, xi), wi) in row.iter_mut().zip(x).zip(wrow) {
                    *acc += g * xi * sign(*wi);
                }
            }
        }
    }
}

/// Geometry of a square-kernel 2-D convolution over a `(C, H, W)` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    /// Valid kernel offsets `[lo, hi)` along one axis for output coordinate `o`.
    #[inline]
    fn taps(&self, o: usize, extent: usize) -> (usize, usize) {
        let origin = (o * self.stride) as isize - self.padding as isize;
        let lo = (-origin).max(0) as usize;
        let hi = ((extent as isize - origin).min(self.kernel as isize)).max(0) as usize;
        (lo, hi.max(lo))
    }

    #[inline]
    fn origin(&self, o: usize) -> isize {
        (o * self.stride) as isize - self.padding as isize
    }
}

pub(crate) fn conv<const ABS: bool>(
    w: &[f32],
    bias: Option<&[f32]>,
    g: &ConvGeom,
    x: &[f64],
    y: &mut [f64],
) {
    let k = g.kernel;
    let plane = g.height * g.width;
    let filter_len = g.in_channels * k * k;
    for f in 0..g.filters {
        let wf = &w[f * filter_len..(f + 1) * filter_len];
        let b = bias.map_or(0.0, |b| b[f] as f64);
        for oi in 0..g.out_height {
            let (ki_lo, ki_hi) = g.taps(oi, g.height);
            let row0 = g.origin(oi);
            for oj in 0..g.out_width {
                let (kj_lo, kj_hi) = g.taps(oj, g.width);
                let col0 = g.origin(oj);
                let mut acc = b;
                for c in 0..g.in_channels {
                    let xc = &x[c * plane..(c + 1) * plane];
                    let wc = &wf[c * k * k..(c + 1) * k * k];
                    for ki in ki_lo..ki_hi {
                        let ii = (row0 + ki as isize) as usize;
                        let xrow = &xc[ii * g.width..(ii + 1) * g.width];
                        let wrow = &wc[ki * k..(ki + 1) * k];
                        for kj in kj_lo..kj_hi {
                            let jj = (col0 + kj as isize) as usize;
                            acc += weight::<ABS>(wrow[kj]) * xrow[jj];
                        }
                    }
                }
                y[(f * g.out_height + oi) * g.out_width + oj] = acc;
            }
        }
    }
}

/// Adjoint of [`conv`] without bias, overwriting `gx`.
pub(crate) fn conv_transpose<const ABS: bool>(w: &[f32], g: &ConvGeom, gy: &[f64], gx: &mut [f64]) {
    let k = g.kernel;
    let plane = g.height * g.width;
    let filter_len = g.in_channels * k * k;
    gx.fill(0.0);
    for f in 0..g.filters {
        let wf = &w[f * filter_len..(f + 1) * filter_len];
        for oi in 0..g.out_height {
            let (ki_lo, ki_hi) = g.taps(oi, g.height);
            let row0 = g.origin(oi);
            for oj in 0..g.out_width {
                let gout = gy[(f * g.out_height + oi) * g.out_width + oj];
                if gout == 0.0 {
                    continue;
                }
                let (kj_lo, kj_hi) = g.taps(oj, g.width);
                let col0 = g.origin(oj);
                for c in 0..g.in_channels {
                    let wc = &wf[c * k * k..(c + 1) * k * k];
                    for ki in ki_lo..ki_hi {
                        let ii = (row0 + ki as isize) as usize;
                        let base = c * plane + ii * g.width;
                        for kj in kj_lo..kj_hi {
                            let jj = (col0 + kj as isize) as usize;
                            gx[base + jj] += weight::<ABS>(wc[ki * k + kj]) * gout;
                        }
                    }
                }
            }
        }
    }
}

/// `gw += scale * dconv/dW` contracted with `gy`, optionally sign-weighted.
pub(crate) fn conv_weight_grad(
    g: &ConvGeom,
    gy: &[f64],
    x: &[f64],
    signs: Option<&[f32]>,
    scale: f64,
    gw: &mut [f64],
) {
    let k = g.kernel;
    let plane = g.height * g.width;
    let filter_len = g.in_channels * k * k;
    for f in 0..g.filters {
        for oi in 0..g.out_height {
            let (ki_lo, ki_hi) = g.taps(oi, g.height);
            let row0 = g.origin(oi);
            for oj in 0..g.out_width {
                let gout = gy[(f * g.out_height + oi) * g.out_width + oj] * scale;
                if gout == 0.0 {
                    continue;
                }
                let (kj_lo, kj_hi) = g.taps(oj, g.width);
                let col0 = g.origin(oj);
                for c in 0..g.in_channels {
                    for ki in ki_lo..ki_hi {
                        let ii = (row0 + ki as isize) as usize;
                        for kj in kj_lo..kj_hi {
                            let jj = (col0 + kj as isize) as usize;
                            let widx = f * filter_len + (c * k + ki) * k + kj;
                            let s = signs.map_or(1.0, |w| sign(w[widx]));
                            gw[widx] += gout * x[c * plane + ii * g.width + jj] * s;
                        }
                    }
                }
            }
        }
    }
}

/// Sums `gy` over spatial positions into per-filter bias gradients.
pub(crate) fn conv_bias_grad(g: &ConvGeom, gy: &[f64], scale: f64, gb: &mut [f64]) {
    let plane = g.out_height * g.out_width;
    for (f, acc) in gb.iter_mut().enumerate() {
        *acc += scale * gy[f * plane..(f + 1) * plane].iter().sum::<f64>();
    }
}

/// `y = W x + b` with `f64` weights.
pub(crate) fn dense(w: &[f64], bias: &[f64], x: &[f64], y: &mut [f64]) {
    let in_dim = x.len();
    for ((out, row), b) in y.iter_mut().zip(w.chunks_exact(in_dim)).zip(bias) {
        *out = b + dot(row, x);
    }
}

/// `gx = W^T gy` with `f64` weights, overwriting `gx`.
pub(crate) fn dense_transpose(w: &[f64], gy: &[f64], gx: &mut [f64]) {
    gx.fill(0.0);
    for (row, g) in w.chunks_exact(gx.len()).zip(gy) {
        if *g != 0.0 {
            for (acc, wi) in gx.iter_mut().zip(row) {
                *acc += wi * g;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler pipeline the multiply-adds while the
    // reduction order stays fixed.
    let mut acc = [0.0f64; 4];
    let (ca, ra) = (a.chunks_exact(4), a.chunks_exact(4).remainder());
    let rb = b.chunks_exact(4).remainder();
    for (x, y) in ca.zip(b.chunks_exact(4)) {
        let x: &[f64; 4] = x.try_into().unwrap();
        let y: &[f64; 4] = y.try_into().unwrap();
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Gather plan for a convolution: for every output position, the
/// `(input index, tap)` pairs of the kernel taps that land inside the
/// input; taps in the zero padding are dropped.
#[derive(Debug, Clone)]
pub(crate) struct ConvPlan {
    filters: usize,
    taps: usize,
    positions: usize,
    starts: Vec<usize>,
    pairs: Vec<(usize, usize)>,
}

impl ConvPlan {
    pub(crate) fn new(g: &ConvGeom) -> Self {
        let k = g.kernel;
        let taps = g.in_channels * k * k;
        let positions = g.out_height * g.out_width;
        let mut starts = Vec::with_capacity(positions + 1);
        let mut pairs = Vec::new();
        for oi in 0..g.out_height {
            for oj in 0..g.out_width {
                starts.push(pairs.len());
                let (r0, c0) = (g.origin(oi), g.origin(oj));
                for c in 0..g.in_channels {
                    for ki in 0..k {
                        for kj in 0..k {
                            let (ii, jj) = (r0 + ki as isize, c0 + kj as isize);
                            if ii >= 0
                                && jj >= 0
                                && (ii as usize) < g.height
                                && (jj as usize) < g.width
                            {
                                let i = (c * g.height + ii as usize) * g.width + jj as usize;
                                pairs.push((i, (c * k + ki) * k + kj));
                            }
                        }
                    }
                }
            }
        }
        starts.push(pairs.len());
        ConvPlan {
            filters: g.filters,
            taps,
            positions,
            starts,
            pairs,
        }
    }

    pub(crate) fn scratch_len(&self) -> usize {
        self.filters
    }

    /// Reorders `(F, C, k, k)` weights into the `(taps, F)` layout used here.
    pub(crate) fn layout(&self, w: &[f32]) -> Vec<f64> {
        let mut out = vec![0.0; w.len()];
        for f in 0..self.filters {
            for t in 0..self.taps {
                out[t * self.filters + f] = w[f * self.taps + t] as f64;
            }
        }
        out
    }

    fn position(&self, p: usize) -> &[(usize, usize)] {
        &self.pairs[self.starts[p]..self.starts[p + 1]]
    }

    /// Same result as [`conv`] up to summation order; `wt` comes from
    /// [`ConvPlan::layout`].
    pub(crate) fn forward(
        &self,
        wt: &[f64],
        bias: &[f64],
        x: &[f64],
        y: &mut [f64],
        scratch: &mut [f64],
    ) {
        match self.filters {
            8 => self.forward_fixed::<8>(wt, bias, x, y),
            16 => self.forward_fixed::<16>(wt, bias, x, y),
            _ => self.forward_any(wt, bias, x, y, scratch),
        }
    }

    fn forward_fixed<const F: usize>(&self, wt: &[f64], bias: &[f64], x: &[f64], y: &mut [f64]) {
        let rows: &[[f64; F]] = as_rows(wt);
        let bias: &[f64; F] = bias.try_into().unwrap();
        for p in 0..self.positions {
            let mut acc = *bias;
            for &(i, t) in self.position(p) {
                let (v, row) = (x[i], &rows[t]);
                for f in 0..F {
                    acc[f] += row[f] * v;
                }
            }
            for (f, a) in acc.iter().enumerate() {
                y[f * self.positions + p] = *a;
            }
        }
    }

    fn forward_any(&self, wt: &[f64], bias: &[f64], x: &[f64], y: &mut [f64], scratch: &mut [f64]) {
        let f_all = self.filters;
        let acc = &mut scratch[..f_all];
        for p in 0..self.positions {
            acc.copy_from_slice(bias);
            for &(i, t) in self.position(p) {
                let v = x[i];
                for (a, w) in acc.iter_mut().zip(&wt[t * f_all..(t + 1) * f_all]) {
                    *a += w * v;
                }
            }
            for (f, a) in acc.iter().enumerate() {
                y[f * self.positions + p] = *a;
            }
        }
    }

    /// Adjoint of [`ConvPlan::forward`] without bias, overwriting `gx`.
    pub(crate) fn transpose(&self, wt: &[f64], gy: &[f64], gx: &mut [f64], scratch: &mut [f64]) {
        gx.fill(0.0);
        match self.filters {
            8 => self.transpose_fixed::<8>(wt, gy, gx),
            16 => self.transpose_fixed::<16>(wt, gy, gx),
            _ => self.transpose_any(wt, gy, gx, scratch),
        }
    }

    fn transpose_fixed<const F: usize>(&self, wt: &[f64], gy: &[f64], gx: &mut [f64]) {
        let rows: &[[f64; F]] = as_rows(wt);
        for p in 0..self.positions {
            let mut g = [0.0; F];
            for (f, v) in g.iter_mut().enumerate() {
                *v = gy[f * self.positions + p];
            }
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            for &(i, t) in self.position(p) {
                let row = &rows[t];
                let mut prod = [0.0; F];
                for f in 0..F {
                    prod[f] = row[f] * g[f];
                }
                gx[i] += prod.iter().sum::<f64>();
            }
        }
    }

    fn transpose_any(&self, wt: &[f64], gy: &[f64], gx: &mut [f64], scratch: &mut [f64]) {
        let f_all = self.filters;
        let g = &mut scratch[..f_all];
        for p in 0..self.positions {
            let mut any = false;
            for (f, v) in g.iter_mut().enumerate() {
                *v = gy[f * self.positions + p];
                any |= *v != 0.0;
            }
            if any {
                for &(i, t) in self.position(p) {
                    gx[i] += dot(&wt[t * f_all..(t + 1) * f_all], g);
                }
            }
        }
    }
}

fn as_rows<const F: usize>(w: &[f64]) -> &[[f64; F]] {
    let (rows, rest) = w.as_chunks::<F>();
    debug_assert!(rest.is_empty());
    rows
}
