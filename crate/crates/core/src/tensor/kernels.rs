//! Hot numeric kernels shared by the tape's forward and backward passes.
//!
//! Parallel loops always split over disjoint output chunks and each
//! output element is accumulated sequentially, so results do not depend
//! on the thread schedule.

use rayon::prelude::*;

/// Work threshold (in multiply-adds) below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 16;

/// c[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |ci: &mut [f64], i: usize| {
        let ar = &a[i * k..(i + 1) * k];
        for (kk, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T  (dot-product form)
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let row = |ci: &mut [f64], i: usize| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, cv) in ci.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in ar.iter().zip(br) {
                acc += av * bv;
            }
            *cv += acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let row = |ck: &mut [f64], kk: usize| {
        for i in 0..m {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            let br = &b[i * n..(i + 1) * n];
            for (cv, &bv) in ck.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(kk, ck)| row(ck, kk));
    } else {
        for (kk, ck) in c.chunks_mut(n).enumerate() {
            row(ck, kk);
        }
    }
}

pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        (self.h_in + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn w_out(&self) -> usize {
        (self.w_in + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// out[oc,oy,ox] = bias[oc] + sum_{ic,ky,kx} w[oc,ic,ky,kx] * x[ic, oy*s-p+ky, ox*s-p+kx]
pub fn conv2d_fwd(x: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64], g: &ConvGeom) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let per_oc = |oc: usize, o: &mut [f64]| {
        o.fill(bias.map_or(0.0, |b| b[oc]));
        for ic in 0..g.c_in {
            let xc = &x[ic * g.h_in * g.w_in..(ic + 1) * g.h_in * g.w_in];
            let wk = &w[(oc * g.c_in + ic) * g.kernel * g.kernel..];
            for ky in 0..g.kernel {
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h_in as isize {
                        continue;
                    }
                    let xrow = &xc[iy as usize * g.w_in..(iy as usize + 1) * g.w_in];
                    let orow = &mut o[oy * wo..(oy + 1) * wo];
                    for kx in 0..g.kernel {
                        let wv = wk[ky * g.kernel + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w_in as isize {
                                orow[ox] += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    };
    let work = g.c_out * g.c_in * ho * wo * g.kernel * g.kernel;
    if work >= PAR_THRESHOLD && g.c_out > 1 {
        out.par_chunks_mut(ho * wo).enumerate().for_each(|(oc, o)| per_oc(oc, o));
    } else {
        for (oc, o) in out.chunks_mut(ho * wo).enumerate() {
            per_oc(oc, o);
        }
    }
}

/// gx[ic,iy,ix] += sum_{oc,ky,kx} gout[oc,oy,ox] * w[oc,ic,ky,kx]  (gather form)
pub fn conv2d_bwd_input(gout: &[f64], w: &[f64], gx: &mut [f64], g: &ConvGeom) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let per_ic = |ic: usize, gxc: &mut [f64]| {
        for oc in 0..g.c_out {
            let goc = &gout[oc * ho * wo..(oc + 1) * ho * wo];
            let wk = &w[(oc * g.c_in + ic) * g.kernel * g.kernel..];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let wv = wk[ky * g.kernel + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h_in as isize {
                            continue;
                        }
                        let base = iy as usize * g.w_in;
                        let grow = &goc[oy * wo..(oy + 1) * wo];
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w_in as isize {
                                gxc[base + ix as usize] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    };
    let work = g.c_out * g.c_in * ho * wo * g.kernel * g.kernel;
    if work >= PAR_THRESHOLD && g.c_in > 1 {
        gx.par_chunks_mut(g.h_in * g.w_in).enumerate().for_each(|(ic, gxc)| per_ic(ic, gxc));
    } else {
        for (ic, gxc) in gx.chunks_mut(g.h_in * g.w_in).enumerate() {
            per_ic(ic, gxc);
        }
    }
}

/// gw[oc,ic,ky,kx] += sum_{oy,ox} gout[oc,oy,ox] * x[ic, oy*s-p+ky, ox*s-p+kx]
/// gb[oc] += sum gout[oc,:,:]
pub fn conv2d_bwd_params(
    gout: &[f64],
    x: &[f64],
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
    g: &ConvGeom,
) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let per_oc = |oc: usize, gwc: &mut [f64]| {
        let goc = &gout[oc * ho * wo..(oc + 1) * ho * wo];
        for ic in 0..g.c_in {
            let xc = &x[ic * g.h_in * g.w_in..(ic + 1) * g.h_in * g.w_in];
            let gwk = &mut gwc[ic * g.kernel * g.kernel..(ic + 1) * g.kernel * g.kernel];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h_in as isize {
                            continue;
                        }
                        let xrow = &xc[iy as usize * g.w_in..];
                        let grow = &goc[oy * wo..(oy + 1) * wo];
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w_in as isize {
                                acc += grow[ox] * xrow[ix as usize];
                            }
                        }
                    }
                    gwk[ky * g.kernel + kx] += acc;
                }
            }
        }
    };
    let work = g.c_out * g.c_in * ho * wo * g.kernel * g.kernel;
    if work >= PAR_THRESHOLD && g.c_out > 1 {
        gw.par_chunks_mut(g.c_in * g.kernel * g.kernel)
            .enumerate()
            .for_each(|(oc, gwc)| per_oc(oc, gwc));
    } else {
        for (oc, gwc) in gw.chunks_mut(g.c_in * g.kernel * g.kernel).enumerate() {
            per_oc(oc, gwc);
        }
    }
    if let Some(gb) = gb {
        for oc in 0..g.c_out {
            gb[oc] += gout[oc * ho * wo..(oc + 1) * ho * wo].iter().sum::<f64>();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let m = 3;
        let k = 4;
        let n = 5;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.1 + 0.5).collect();
        let mut c = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let mut e = 0.0;
                for kk in 0..k {
                    e += a[i * k + kk] * b[kk * n + j];
                }
                assert!((c[i * n + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let m = 4;
        let k = 3;
        let n = 6;
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).cos()).collect();
        // b transposed as [n, k]
        let mut bt = vec![0.0; n * k];
        for kk in 0..k {
            for j in 0..n {
                bt[j * k + kk] = b[kk * n + j];
            }
        }
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        matmul_acc(&a, &b, &mut c1, m, k, n);
        matmul_nt_acc(&a, &bt, &mut c2, m, k, n);
        for (u, v) in c1.iter().zip(&c2) {
            assert!((u - v).abs() < 1e-12);
        }
        // a^T * c1 via tn
        let mut d = vec![0.0; k * n];
        matmul_tn_acc(&a, &c1, &mut d, m, k, n);
        for kk in 0..k {
            for j in 0..n {
                let mut e = 0.0;
                for i in 0..m {
                    e += a[i * k + kk] * c1[i * n + j];
                }
                assert!((d[kk * n + j] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let g = ConvGeom { c_in: 2, c_out: 3, h_in: 5, w_in: 6, kernel: 3, stride: 2, pad: 1 };
        let x: Vec<f64> = (0..g.c_in * g.h_in * g.w_in).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
        let w: Vec<f64> = (0..g.c_out * g.c_in * 9).map(|i| ((i * 5 % 11) as f64) * 0.1 - 0.5).collect();
        let b: Vec<f64> = vec![0.3, -0.1, 0.2];
        let (ho, wo) = (g.h_out(), g.w_out());
        let mut out = vec![0.0; g.c_out * ho * wo];
        conv2d_fwd(&x, &w, Some(&b), &mut out, &g);
        for oc in 0..g.c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut e = b[oc];
                    for ic in 0..g.c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy >= 0
                                    && iy < g.h_in as isize
                                    && ix >= 0
                                    && ix < g.w_in as isize
                                {
                                    e += w[((oc * g.c_in + ic) * 3 + ky) * 3 + kx]
                                        * x[(ic * g.h_in + iy as usize) * g.w_in + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out[(oc * ho + oy) * wo + ox] - e).abs() < 1e-12);
                }
            }
        }
    }
}
