//! Raw f32 kernels used by graph ops. Output rows are independent, so the
//! row-parallel versions are bit-identical to sequential execution.

use crate::exec;

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    if n == 0 {
        return c;
    }
    exec::for_each_chunk_mut(&mut c, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    });
    c
}

/// `c[m,n] = a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    if n == 0 {
        return c;
    }
    exec::for_each_chunk_mut(&mut c, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *cv = dot(ar, br);
        }
    });
    c
}

/// `c[k,n] = a[m,k]ᵀ · b[m,n]`
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; k * n];
    if n == 0 {
        return c;
    }
    exec::for_each_chunk_mut(&mut c, n, |p, row| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    });
    c
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    // four accumulators in a fixed order
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for o in chunks * 4..a.len() {
        s += a[o] * b[o];
    }
    s
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output of permuting `data` (with `shape`) so that output axis `i` is input axis `perm[i]`.
pub fn permute(data: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mapped: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        let off: usize = idx.iter().zip(&mapped).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
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
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    #[inline]
    fn input_index(&self, o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = o * stride + k;
        if pos < pad || pos - pad >= limit {
            None
        } else {
            Some(pos - pad)
        }
    }
}

pub fn conv2d_forward(x: &[f32], w: &[f32], bias: &[f32], d: &ConvDims) -> Vec<f32> {
    let plane = d.oh * d.ow;
    let mut out = vec![0.0f32; d.cout * plane];
    exec::for_each_chunk_mut(&mut out, plane, |co, o| {
        o.iter_mut().for_each(|v| *v = bias[co]);
        for ci in 0..d.cin {
            let xp = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for kh in 0..d.kh {
                for kw in 0..d.kw {
                    let wv = w[((co * d.cin + ci) * d.kh + kh) * d.kw + kw];
                    for oy in 0..d.oh {
                        let Some(iy) = d.input_index(oy, kh, d.sh, d.ph, d.h) else { continue };
                        let orow = &mut o[oy * d.ow..(oy + 1) * d.ow];
                        let xrow = &xp[iy * d.w..(iy + 1) * d.w];
                        for (ox, ov) in orow.iter_mut().enumerate() {
                            if let Some(ix) = d.input_index(ox, kw, d.sw, d.pw, d.w) {
                                *ov += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Returns (dx, dw, dbias).
pub fn conv2d_backward(x: &[f32], w: &[f32], g: &[f32], d: &ConvDims) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let plane = d.oh * d.ow;
    let dbias: Vec<f32> = (0..d.cout).map(|co| g[co * plane..(co + 1) * plane].iter().sum()).collect();
    let ksz = d.cin * d.kh * d.kw;
    let mut dw = vec![0.0f32; d.cout * ksz];
    exec::for_each_chunk_mut(&mut dw, ksz, |co, dwc| {
        let gp = &g[co * plane..(co + 1) * plane];
        for ci in 0..d.cin {
            let xp = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for kh in 0..d.kh {
                for kw in 0..d.kw {
                    let mut acc = 0.0f32;
                    for oy in 0..d.oh {
                        let Some(iy) = d.input_index(oy, kh, d.sh, d.ph, d.h) else { continue };
                        for ox in 0..d.ow {
                            if let Some(ix) = d.input_index(ox, kw, d.sw, d.pw, d.w) {
                                acc += gp[oy * d.ow + ox] * xp[iy * d.w + ix];
                            }
                        }
                    }
                    dwc[(ci * d.kh + kh) * d.kw + kw] = acc;
                }
            }
        }
    });
    let mut dx = vec![0.0f32; d.cin * d.h * d.w];
    exec::for_each_chunk_mut(&mut dx, d.h * d.w, |ci, dxp| {
        for co in 0..d.cout {
            let gp = &g[co * plane..(co + 1) * plane];
            for kh in 0..d.kh {
                for kw in 0..d.kw {
                    let wv = w[((co * d.cin + ci) * d.kh + kh) * d.kw + kw];
                    for oy in 0..d.oh {
                        let Some(iy) = d.input_index(oy, kh, d.sh, d.ph, d.h) else { continue };
                        for ox in 0..d.ow {
                            if let Some(ix) = d.input_index(ox, kw, d.sw, d.pw, d.w) {
                                dxp[iy * d.w + ix] += wv * gp[oy * d.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    });
    (dx, dw, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f32> = (0..12).map(|v| v as f32 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f32> = (0..8).map(|v| (v as f32).sin()).collect(); // 4x2
        let want = naive(&a, &b, 3, 4, 2);
        let got = matmul_nn(&a, &b, 3, 4, 2);
        for (x, y) in want.iter().zip(&got) {
            assert!((x - y).abs() < 1e-5);
        }
        let bt = permute(&b, &[4, 2], &[1, 0]);
        let got = matmul_nt(&a, &bt, 3, 4, 2);
        for (x, y) in want.iter().zip(&got) {
            assert!((x - y).abs() < 1e-5);
        }
        let at = permute(&a, &[3, 4], &[1, 0]);
        let got = matmul_tn(&at, &b, 4, 3, 2);
        for (x, y) in want.iter().zip(&got) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn permute_3d() {
        let x: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let y = permute(&x, &[2, 3, 4], &[1, 0, 2]);
        // y[j,i,k] = x[i,j,k]
        assert_eq!(y[(2 + 1) * 4 + 3], x[(3 + 1) * 4 + 3]);
        let back = permute(&y, &[3, 2, 4], &[1, 0, 2]);
        assert_eq!(back, x);
    }
}
