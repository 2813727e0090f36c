//! Dense loops behind the differentiable ops.

/// `c[m×n] += op(a)[m×k] · op(b)[k×n]`, where `op` optionally transposes.
///
/// With `ta` the slice `a` holds a `k×m` matrix; with `tb`, `b` holds `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, n: usize, k: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for (x, y) in arow.iter().zip(brow) {
                        s += x * y;
                    }
                    c[i * n + j] += s;
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

/// Geometry of a 2-D cross-correlation over a `cin×h×w` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Range of output columns `ow` whose input column `ow*sw + kj - pw` is in bounds.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        range_for(self.wo, self.sw, kj, self.pw, self.w)
    }

    fn valid_rows(&self, ki: usize) -> (usize, usize) {
        range_for(self.ho, self.sh, ki, self.ph, self.h)
    }
}

fn range_for(out: usize, stride: usize, k: usize, pad: usize, len: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad < len
    let hi = if len + pad <= k {
        0
    } else {
        ((len + pad - k - 1) / stride + 1).min(out)
    };
    (lo, hi.max(lo))
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    for co in 0..g.cout {
        let oplane = &mut out[co * g.ho * g.wo..(co + 1) * g.ho * g.wo];
        for ci in 0..g.cin {
            let iplane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..g.kh {
                let (r0, r1) = g.valid_rows(ki);
                for kj in 0..g.kw {
                    let wv = kernel[((co * g.cin + ci) * g.kh + ki) * g.kw + kj];
                    if wv == 0.0 {
                        continue;
                    }
                    let (c0, c1) = g.valid_cols(kj);
                    for oh in r0..r1 {
                        let ih = oh * g.sh + ki - g.ph;
                        let irow = &iplane[ih * g.w..(ih + 1) * g.w];
                        let orow = &mut oplane[oh * g.wo..(oh + 1) * g.wo];
                        for ow in c0..c1 {
                            orow[ow] += wv * irow[ow * g.sw + kj - g.pw];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input and kernel gradients for a given output gradient.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    mut dinput: Option<&mut [f64]>,
    mut dkernel: Option<&mut [f64]>,
) {
    for co in 0..g.cout {
        let gplane = &dout[co * g.ho * g.wo..(co + 1) * g.ho * g.wo];
        for ci in 0..g.cin {
            let ibase = ci * g.h * g.w;
            for ki in 0..g.kh {
                let (r0, r1) = g.valid_rows(ki);
                for kj in 0..g.kw {
                    let widx = ((co * g.cin + ci) * g.kh + ki) * g.kw + kj;
                    let wv = kernel[widx];
                    let (c0, c1) = g.valid_cols(kj);
                    let mut dw = 0.0;
                    for oh in r0..r1 {
                        let ih = oh * g.sh + ki - g.ph;
                        let grow = &gplane[oh * g.wo..(oh + 1) * g.wo];
                        let rowbase = ibase + ih * g.w;
                        for ow in c0..c1 {
                            let iw = ow * g.sw + kj - g.pw;
                            dw += grow[ow] * input[rowbase + iw];
                            if let Some(di) = dinput.as_deref_mut() {
                                di[rowbase + iw] += wv * grow[ow];
                            }
                        }
                    }
                    if let Some(dk) = dkernel.as_deref_mut() {
                        dk[widx] += dw;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3×2
        let mut c = [0.0; 4];
        gemm(2, 2, 3, &a, false, &b, false, &mut c);
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, -1.0, 0.0, 0.5, 2.0, 1.0];
        for (ta, tb) in [(true, false), (false, true), (true, true)] {
            let mut c2 = [0.0; 4];
            let aa: &[f64] = if ta { &at } else { &a };
            let bb: &[f64] = if tb { &bt } else { &b };
            gemm(2, 2, 3, aa, ta, bb, tb, &mut c2);
            assert_eq!(c, c2);
        }
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for len in 1usize..9 {
            for pad in 0..3 {
                for k in 0..3 {
                    for stride in 1..4 {
                        let out = (len + 2 * pad).saturating_sub(3_usize) / stride + 1;
                        let (lo, hi) = range_for(out, stride, k, pad, len);
                        for o in 0..out {
                            let pos = (o * stride + k) as isize - pad as isize;
                            let inside = pos >= 0 && (pos as usize) < len;
                            assert_eq!(inside, o >= lo && o < hi, "len {len} pad {pad} k {k} s {stride} o {o}");
                        }
                    }
                }
            }
        }
    }
}
