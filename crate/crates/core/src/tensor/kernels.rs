//! Naive dense kernels. Output elements are accumulated in a fixed order so
//! the sequential and rayon paths agree bit for bit.

use super::Real;
use crate::par::Backend;

/// `[m,k] x [k,n] -> [m,n]`.
pub fn matmul<T: Real>(backend: Backend, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    backend.for_each_chunk(&mut out, n, m * k * n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    });
    out
}

pub fn transpose<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Splits a shape around `axis` into `(outer, extent, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Index maps for a broadcasting binary op (right-aligned, extents 1 stretch).
pub struct Broadcast {
    pub out_shape: Vec<usize>,
    pub a_idx: Vec<usize>,
    pub b_idx: Vec<usize>,
}

pub fn broadcast(a: &[usize], b: &[usize]) -> Option<Broadcast> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (ap, bp) = (pad(a), pad(b));
    let mut out_shape = Vec::with_capacity(rank);
    for (&x, &y) in ap.iter().zip(&bp) {
        if x == y || y == 1 {
            out_shape.push(x);
        } else if x == 1 {
            out_shape.push(y);
        } else {
            return None;
        }
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            st[d] = if s[d] == 1 { 0 } else { acc };
            acc *= s[d];
        }
        st
    };
    let (sa, sb) = (strides(&ap), strides(&bp));
    let total: usize = out_shape.iter().product();
    let mut a_idx = Vec::with_capacity(total);
    let mut b_idx = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        a_idx.push(idx.iter().zip(&sa).map(|(i, s)| i * s).sum());
        b_idx.push(idx.iter().zip(&sb).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(Broadcast {
        out_shape,
        a_idx,
        b_idx,
    })
}

pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

/// 3x3 convolution, stride 1, zero padding 1.
/// `x: [n,cin,h,w]`, `w: [cout,cin,3,3]`, `b: [cout]` -> `[n,cout,h,w]`.
pub fn conv3x3<T: Real>(backend: Backend, d: &ConvDims, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let plane = d.h * d.w;
    let mut out = vec![T::zero(); d.n * d.cout * plane];
    let work = d.n * d.cout * plane * d.cin * 9;
    backend.for_each_chunk(&mut out, plane, work, |idx, o| {
        let (ni, co) = (idx / d.cout, idx % d.cout);
        o.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..d.cin {
            let xp = &x[(ni * d.cin + ci) * plane..][..plane];
            let wk = &w[(co * d.cin + ci) * 9..][..9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = wk[ky * 3 + kx];
                    for y in 0..d.h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= d.h as isize {
                            continue;
                        }
                        for xx in 0..d.w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= d.w as isize {
                                continue;
                            }
                            o[y * d.w + xx] += wv * xp[sy as usize * d.w + sx as usize];
                        }
                    }
                }
            }
        }
    });
    out
}

/// Gradients of [`conv3x3`] with respect to input, weight and bias.
pub fn conv3x3_backward<T: Real>(
    backend: Backend,
    d: &ConvDims,
    x: &[T],
    w: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let plane = d.h * d.w;
    let work = d.n * d.cout * plane * d.cin * 9;

    let mut dx = vec![T::zero(); d.n * d.cin * plane];
    backend.for_each_chunk(&mut dx, plane, work, |idx, g| {
        let (ni, ci) = (idx / d.cin, idx % d.cin);
        for co in 0..d.cout {
            let dp = &dout[(ni * d.cout + co) * plane..][..plane];
            let wk = &w[(co * d.cin + ci) * 9..][..9];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = wk[ky * 3 + kx];
                    for y in 0..d.h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= d.h as isize {
                            continue;
                        }
                        for xx in 0..d.w {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= d.w as isize {
                                continue;
                            }
                            g[sy as usize * d.w + sx as usize] += wv * dp[y * d.w + xx];
                        }
                    }
                }
            }
        }
    });

    let mut dw = vec![T::zero(); d.cout * d.cin * 9];
    backend.for_each_chunk(&mut dw, d.cin * 9, work, |co, g| {
        for ni in 0..d.n {
            let dp = &dout[(ni * d.cout + co) * plane..][..plane];
            for ci in 0..d.cin {
                let xp = &x[(ni * d.cin + ci) * plane..][..plane];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut acc = T::zero();
                        for y in 0..d.h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= d.h as isize {
                                continue;
                            }
                            for xx in 0..d.w {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= d.w as isize {
                                    continue;
                                }
                                acc += dp[y * d.w + xx] * xp[sy as usize * d.w + sx as usize];
                            }
                        }
                        g[ci * 9 + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    });

    let mut db = vec![T::zero(); d.cout];
    for ni in 0..d.n {
        for (co, v) in db.iter_mut().enumerate() {
            for &g in &dout[(ni * d.cout + co) * plane..][..plane] {
                *v += g;
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_hand() {
        let c = matmul(Backend::Sequential, &[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 2, 2, 1);
        assert_eq!(c, vec![3.0, 7.0]);
    }

    #[test]
    fn broadcast_rules() {
        let b = broadcast(&[2, 3], &[3]).unwrap();
        assert_eq!(b.out_shape, vec![2, 3]);
        assert_eq!(b.b_idx, vec![0, 1, 2, 0, 1, 2]);
        let b = broadcast(&[2, 1, 2], &[1, 3, 2]).unwrap();
        assert_eq!(b.out_shape, vec![2, 3, 2]);
        assert_eq!(b.a_idx[..6], [0, 1, 0, 1, 0, 1]);
        assert!(broadcast(&[2, 3], &[2]).is_none());
    }

    #[test]
    fn conv_identity_kernel() {
        let d = ConvDims {
            n: 1,
            cin: 1,
            cout: 1,
            h: 3,
            w: 3,
        };
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        assert_eq!(
            conv3x3(Backend::Sequential, &d, &x, &w, &[0.5]),
            x.iter().map(|v| v + 0.5).collect::<Vec<_>>()
        );
    }

    #[test]
    fn conv_backends_agree() {
        let d = ConvDims {
            n: 2,
            cin: 3,
            cout: 4,
            h: 24,
            w: 24,
        };
        let x: Vec<f64> = (0..2 * 3 * 576)
            .map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0)
            .collect();
        let w: Vec<f64> = (0..4 * 3 * 9).map(|i| ((i * 31) % 17) as f64 / 8.0 - 1.0).collect();
        let b = vec![0.1, -0.2, 0.3, 0.0];
        let s = conv3x3(Backend::Sequential, &d, &x, &w, &b);
        let p = conv3x3(Backend::Parallel, &d, &x, &w, &b);
        assert_eq!(s, p);
        let gs = conv3x3_backward(Backend::Sequential, &d, &x, &w, &s);
        let gp = conv3x3_backward(Backend::Parallel, &d, &x, &w, &p);
        assert_eq!(gs, gp);
    }
}
