//! Slice-level numeric kernels shared by forward and backward passes.

use super::Real;

#[inline]
pub fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc(a: &[Real], b: &[Real], out: &mut [Real], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Circular correlation `out[k] = Σᵢ a[i]·b[(i+k) mod d]`.
pub fn circ_correlate(a: &[Real], b: &[Real], out: &mut [Real]) {
    let d = a.len();
    for (k, o) in out.iter_mut().enumerate() {
        let mut s = 0.0;
        for i in 0..d - k {
            s += a[i] * b[i + k];
        }
        for i in d - k..d {
            s += a[i] * b[i + k - d];
        }
        *o = s;
    }
}

/// Accumulates the gradients of [`circ_correlate`] given upstream `g`.
pub fn circ_correlate_backward(
    g: &[Real],
    a: &[Real],
    b: &[Real],
    ga: Option<&mut [Real]>,
    gb: Option<&mut [Real]>,
) {
    let d = a.len();
    if let Some(ga) = ga {
        for (i, gai) in ga.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in 0..d - i {
                s += g[k] * b[i + k];
            }
            for k in d - i..d {
                s += g[k] * b[i + k - d];
            }
            *gai += s;
        }
    }
    if let Some(gb) = gb {
        for (j, gbj) in gb.iter_mut().enumerate() {
            // i = j - k (mod d)
            let mut s = 0.0;
            for k in 0..=j {
                s += g[k] * a[j - k];
            }
            for k in j + 1..d {
                s += g[k] * a[j + d - k];
            }
            *gbj += s;
        }
    }
}

/// Geometry of a stride-1, unpadded 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.w - self.kw + 1
    }
}

/// Cross-correlation (no kernel flip).
pub fn conv2d(x: &[Real], w: &[Real], bias: Option<&[Real]>, d: ConvDims, out: &mut [Real]) {
    let (oh, ow) = (d.out_h(), d.out_w());
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let obase = (b * d.c_out + co) * oh * ow;
            let bv = bias.map_or(0.0, |bs| bs[co]);
            out[obase..obase + oh * ow].iter_mut().for_each(|o| *o = bv);
            for ci in 0..d.c_in {
                let xbase = (b * d.c_in + ci) * d.h * d.w;
                let wbase = (co * d.c_in + ci) * d.kh * d.kw;
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let wv = w[wbase + ki * d.kw + kj];
                        for i in 0..oh {
                            let xrow = xbase + (i + ki) * d.w + kj;
                            let orow = obase + i * ow;
                            for j in 0..ow {
                                out[orow + j] += wv * x[xrow + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_backward(
    g: &[Real],
    x: &[Real],
    w: &[Real],
    d: ConvDims,
    mut gx: Option<&mut [Real]>,
    mut gw: Option<&mut [Real]>,
    gb: Option<&mut [Real]>,
) {
    let (oh, ow) = (d.out_h(), d.out_w());
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let obase = (b * d.c_out + co) * oh * ow;
            for ci in 0..d.c_in {
                let xbase = (b * d.c_in + ci) * d.h * d.w;
                let wbase = (co * d.c_in + ci) * d.kh * d.kw;
                for ki in 0..d.kh {
                    for kj in 0..d.kw {
                        let wv = w[wbase + ki * d.kw + kj];
                        let mut acc = 0.0;
                        for i in 0..oh {
                            let xrow = xbase + (i + ki) * d.w + kj;
                            let orow = obase + i * ow;
                            for j in 0..ow {
                                let gv = g[orow + j];
                                acc += gv * x[xrow + j];
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[xrow + j] += gv * wv;
                                }
                            }
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            gw[wbase + ki * d.kw + kj] += acc;
                        }
                    }
                }
            }
        }
    }
    if let Some(gb) = gb {
        for b in 0..d.batch {
            for (co, gbv) in gb.iter_mut().enumerate() {
                let obase = (b * d.c_out + co) * oh * ow;
                *gbv += g[obase..obase + oh * ow].iter().sum::<Real>();
            }
        }
    }
}

/// Numerically stable `ln Σ exp(x)`.
pub fn log_sum_exp(x: &[Real]) -> Real {
    let m = x.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    if m == Real::NEG_INFINITY {
        return m;
    }
    m + x.iter().map(|v| (v - m).exp()).sum::<Real>().ln()
}

/// Stable `ln(1 + eˣ)`.
#[inline]
pub fn softplus(x: Real) -> Real {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        // a: 2×3, b: 3×2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c2 = [0.0; 4];
        matmul_nt_acc(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
        // aᵀ·c : 3×2
        let mut t = [0.0; 6];
        matmul_tn_acc(&a, &c, &mut t, 2, 3, 2);
        assert_eq!(t[0], 1.0 * 58.0 + 4.0 * 139.0);
    }

    #[test]
    fn circular_correlation_examples() {
        let mut out = [0.0; 2];
        circ_correlate(&[1.0, 0.0], &[5.0, 7.0], &mut out);
        assert_eq!(out, [5.0, 7.0]);
        circ_correlate(&[1.0, 2.0], &[3.0, 4.0], &mut out);
        assert_eq!(out, [11.0, 10.0]);
    }

    #[test]
    fn stable_helpers() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + (2.0 as Real).ln())).abs() < 1e-9);
        assert!((softplus(0.0) - (2.0 as Real).ln()).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
