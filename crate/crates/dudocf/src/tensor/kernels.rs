//! Direct (loop-based) numeric kernels behind the graph ops.
//!
//! Forward and gradient kernels are written in gather form: every output
//! element is a fixed-order sum owned by exactly one loop iteration, which
//! makes the parallel and sequential paths bit-identical.

use crate::par::for_each_chunk_mut;

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub in_sp: [usize; 3],
    pub out_sp: [usize; 3],
    pub k: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvDims {
    pub fn in_spatial_len(&self) -> usize {
        self.in_sp.iter().product()
    }
    pub fn out_spatial_len(&self) -> usize {
        self.out_sp.iter().product()
    }
}

#[inline]
fn sp_idx(sp: [usize; 3], d: usize, h: usize, w: usize) -> usize {
    (d * sp[1] + h) * sp[2] + w
}

// ---------------------------------------------------------------- conv3d --

pub fn conv3d_fwd(x: &[f64], w: &[f64], bias: Option<&[f64]>, dims: &ConvDims) -> Vec<f64> {
    let os = dims.out_spatial_len();
    let is = dims.in_spatial_len();
    let klen = dims.k.iter().product::<usize>();
    let mut out = vec![0.0; dims.batch * dims.cout * os];
    for_each_chunk_mut(&mut out, os, |bc, chunk| {
        let b = bc / dims.cout;
        let co = bc % dims.cout;
        let base = bias.map_or(0.0, |bv| bv[co]);
        for od in 0..dims.out_sp[0] {
            for oh in 0..dims.out_sp[1] {
                for ow in 0..dims.out_sp[2] {
                    let mut acc = base;
                    for ci in 0..dims.cin {
                        let xoff = (b * dims.cin + ci) * is;
                        let woff = (co * dims.cin + ci) * klen;
                        for kd in 0..dims.k[0] {
                            let id = (od * dims.stride[0] + kd) as isize - dims.pad[0] as isize;
                            if id < 0 || id >= dims.in_sp[0] as isize {
                                continue;
                            }
                            for kh in 0..dims.k[1] {
                                let ih = (oh * dims.stride[1] + kh) as isize - dims.pad[1] as isize;
                                if ih < 0 || ih >= dims.in_sp[1] as isize {
                                    continue;
                                }
                                for kw in 0..dims.k[2] {
                                    let iw = (ow * dims.stride[2] + kw) as isize - dims.pad[2] as isize;
                                    if iw < 0 || iw >= dims.in_sp[2] as isize {
                                        continue;
                                    }
                                    let xi = xoff + sp_idx(dims.in_sp, id as usize, ih as usize, iw as usize);
                                    let wi = woff + sp_idx(dims.k, kd, kh, kw);
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    chunk[sp_idx(dims.out_sp, od, oh, ow)] = acc;
                }
            }
        }
    });
    out
}

pub fn conv3d_dx(gout: &[f64], w: &[f64], dims: &ConvDims) -> Vec<f64> {
    let os = dims.out_spatial_len();
    let is = dims.in_spatial_len();
    let klen = dims.k.iter().product::<usize>();
    let mut dx = vec![0.0; dims.batch * dims.cin * is];
    for_each_chunk_mut(&mut dx, is, |bc, chunk| {
        let b = bc / dims.cin;
        let ci = bc % dims.cin;
        for id in 0..dims.in_sp[0] {
            for ih in 0..dims.in_sp[1] {
                for iw in 0..dims.in_sp[2] {
                    let mut acc = 0.0;
                    for co in 0..dims.cout {
                        let goff = (b * dims.cout + co) * os;
                        let woff = (co * dims.cin + ci) * klen;
                        for kd in 0..dims.k[0] {
                            let Some(od) = out_coord(id, kd, dims.pad[0], dims.stride[0], dims.out_sp[0]) else {
                                continue;
                            };
                            for kh in 0..dims.k[1] {
                                let Some(oh) = out_coord(ih, kh, dims.pad[1], dims.stride[1], dims.out_sp[1]) else {
                                    continue;
                                };
                                for kw in 0..dims.k[2] {
                                    let Some(ow) = out_coord(iw, kw, dims.pad[2], dims.stride[2], dims.out_sp[2]) else {
                                        continue;
                                    };
                                    acc += w[woff + sp_idx(dims.k, kd, kh, kw)]
                                        * gout[goff + sp_idx(dims.out_sp, od, oh, ow)];
                                }
                            }
                        }
                    }
                    chunk[sp_idx(dims.in_sp, id, ih, iw)] = acc;
                }
            }
        }
    });
    dx
}

/// Output coordinate receiving input coordinate `i` through kernel offset `k`,
/// if any: solves i = o*stride + k - pad for integer o in range.
#[inline]
fn out_coord(i: usize, k: usize, pad: usize, stride: usize, out_extent: usize) -> Option<usize> {
    let num = i as isize + pad as isize - k as isize;
    if num < 0 || (num as usize) % stride != 0 {
        return None;
    }
    let o = num as usize / stride;
    (o < out_extent).then_some(o)
}

pub fn conv3d_dw(gout: &[f64], x: &[f64], dims: &ConvDims) -> Vec<f64> {
    let os = dims.out_spatial_len();
    let is = dims.in_spatial_len();
    let klen = dims.k.iter().product::<usize>();
    let mut dw = vec![0.0; dims.cout * dims.cin * klen];
    for_each_chunk_mut(&mut dw, klen, |cc, chunk| {
        let co = cc / dims.cin;
        let ci = cc % dims.cin;
        for kd in 0..dims.k[0] {
            for kh in 0..dims.k[1] {
                for kw in 0..dims.k[2] {
                    let mut acc = 0.0;
                    for b in 0..dims.batch {
                        let xoff = (b * dims.cin + ci) * is;
                        let goff = (b * dims.cout + co) * os;
                        for od in 0..dims.out_sp[0] {
                            let id = (od * dims.stride[0] + kd) as isize - dims.pad[0] as isize;
                            if id < 0 || id >= dims.in_sp[0] as isize {
                                continue;
                            }
                            for oh in 0..dims.out_sp[1] {
                                let ih = (oh * dims.stride[1] + kh) as isize - dims.pad[1] as isize;
                                if ih < 0 || ih >= dims.in_sp[1] as isize {
                                    continue;
                                }
                                for ow in 0..dims.out_sp[2] {
                                    let iw = (ow * dims.stride[2] + kw) as isize - dims.pad[2] as isize;
                                    if iw < 0 || iw >= dims.in_sp[2] as isize {
                                        continue;
                                    }
                                    acc += x[xoff + sp_idx(dims.in_sp, id as usize, ih as usize, iw as usize)]
                                        * gout[goff + sp_idx(dims.out_sp, od, oh, ow)];
                                }
                            }
                        }
                    }
                    chunk[sp_idx(dims.k, kd, kh, kw)] = acc;
                }
            }
        }
    });
    dw
}

pub fn conv_db(gout: &[f64], batch: usize, cout: usize, os: usize) -> Vec<f64> {
    let mut db = vec![0.0; cout];
    for co in 0..cout {
        let mut acc = 0.0;
        for b in 0..batch {
            let off = (b * cout + co) * os;
            for v in &gout[off..off + os] {
                acc += v;
            }
        }
        db[co] = acc;
    }
    db
}

// ------------------------------------------------------ conv3d transpose --

/// Transposed conv, weight layout [cin, cout, k...], zero padding.
/// Output extent per axis: (in - 1) * stride + k.
pub fn convt3d_fwd(x: &[f64], w: &[f64], bias: Option<&[f64]>, dims: &ConvDims) -> Vec<f64> {
    let os = dims.out_spatial_len();
    let is = dims.in_spatial_len();
    let klen = dims.k.iter().product::<usize>();
    let mut out = vec![0.0; dims.batch * dims.cout * os];
    for_each_chunk_mut(&mut out, os, |bc, chunk| {
        let b = bc / dims.cout;
        let co = bc % dims.cout;
        let base = bias.map_or(0.0, |bv| bv[co]);
        for od in 0..dims.out_sp[0] {
            for oh in 0..dims.out_sp[1] {
                for ow in 0..dims.out_sp[2] {
                    let mut acc = base;
                    for ci in 0..dims.cin {
                        let xoff = (b * dims.cin + ci) * is;
                        let woff = (ci * dims.cout + co) * klen;
                        for kd in 0..dims.k[0] {
                            let Some(id) = in_coord_t(od, kd, dims.stride[0], dims.in_sp[0]) else {
                                continue;
                            };
                            for kh in 0..dims.k[1] {
                                let Some(ih) = in_coord_t(oh, kh, dims.stride[1], dims.in_sp[1]) else {
                                    continue;
                                };
                                for kw in 0..dims.k[2] {
                                    let Some(iw) = in_coord_t(ow, kw, dims.stride[2], dims.in_sp[2]) else {
                                        continue;
                                    };
                                    acc += x[xoff + sp_idx(dims.in_sp, id, ih, iw)]
                                        * w[woff + sp_idx(dims.k, kd, kh, kw)];
                                }
                            }
                        }
                    }
                    chunk[sp_idx(dims.out_sp, od, oh, ow)] = acc;
                }
            }
        }
    });
    out
}

/// Input coordinate feeding transposed-conv output `o` through offset `k`:
/// solves o = i*stride + k for integer i in range.
#[inline]
fn in_coord_t(o: usize, k: usize, stride: usize, in_extent: usize) -> Option<usize> {
    if o < k {
        return None;
    }
    let num = o - k;
    if num % stride != 0 {
        return None;
    }
    let i = num / stride;
    (i < in_extent).then_some(i)
}

pub fn convt3d_dx(gout: &[f64], w: &[f64], dims: &ConvDims) -> Vec<f64> {
    let os = dims.out_spatial_len();
    let is = dims.in_spatial_len();
    let klen = dims.k.iter().product::<usize>();
    let mut dx = vec![0.0; dims.batch * dims.cin * is];
    for_each_chunk_mut(&mut dx, is, |bc, chunk| {
        let b = bc / dims.cin;
        let ci = bc % dims.cin;
        for id in 0..dims.in_sp[0] {
            for ih in 0..dims.in_sp[1] {
                for iw in 0..dims.in_sp[2] {
                    let mut acc = 0.0;
                    for co in 0..dims.cout {
                        let goff = (b * dims.cout + co) * os;
                        let woff = (ci * dims.cout + co) * klen;
                        for kd in 0..dims.k[0] {
                            let od = id * dims.stride[0] + kd;
                            for kh in 0..dims.k[1] {
                                let oh = ih * dims.stride[1] + kh;
                                for kw in 0..dims.k[2] {
                                    let ow = iw * dims.stride[2] + kw;
                                    acc += gout[goff + sp_idx(dims.out_sp, od, oh, ow)]
                                        * w[woff + sp_idx(dims.k, kd, kh, kw)];
                                }
                            }
                        }
                    }
                    chunk[sp_idx(dims.in_sp, id, ih, iw)] = acc;
                }
            }
        }
    });
    dx
}

pub fn convt3d_dw(gout: &[f64], x: &[f64], dims: &ConvDims) -> Vec<f64> {
    let os = dims.out_spatial_len();
    let is = dims.in_spatial_len();
    let klen = dims.k.iter().product::<usize>();
    let mut dw = vec![0.0; dims.cin * dims.cout * klen];
    for_each_chunk_mut(&mut dw, klen, |cc, chunk| {
        let ci = cc / dims.cout;
        let co = cc % dims.cout;
        for kd in 0..dims.k[0] {
            for kh in 0..dims.k[1] {
                for kw in 0..dims.k[2] {
                    let mut acc = 0.0;
                    for b in 0..dims.batch {
                        let xoff = (b * dims.cin + ci) * is;
                        let goff = (b * dims.cout + co) * os;
                        for id in 0..dims.in_sp[0] {
                            let od = id * dims.stride[0] + kd;
                            for ih in 0..dims.in_sp[1] {
                                let oh = ih * dims.stride[1] + kh;
                                for iw in 0..dims.in_sp[2] {
                                    let ow = iw * dims.stride[2] + kw;
                                    acc += x[xoff + sp_idx(dims.in_sp, id, ih, iw)]
                                        * gout[goff + sp_idx(dims.out_sp, od, oh, ow)];
                                }
                            }
                        }
                    }
                    chunk[sp_idx(dims.k, kd, kh, kw)] = acc;
                }
            }
        }
    });
    dw
}

// --------------------------------------------------------------- pooling --

pub fn avg_pool3d_fwd(x: &[f64], bc: usize, in_sp: [usize; 3], win: [usize; 3]) -> Vec<f64> {
    let out_sp = [in_sp[0] / win[0], in_sp[1] / win[1], in_sp[2] / win[2]];
    let os: usize = out_sp.iter().product();
    let is: usize = in_sp.iter().product();
    let inv = 1.0 / (win.iter().product::<usize>() as f64);
    let mut out = vec![0.0; bc * os];
    for_each_chunk_mut(&mut out, os, |c, chunk| {
        let xoff = c * is;
        for od in 0..out_sp[0] {
            for oh in 0..out_sp[1] {
                for ow in 0..out_sp[2] {
                    let mut acc = 0.0;
                    for kd in 0..win[0] {
                        for kh in 0..win[1] {
                            for kw in 0..win[2] {
                                acc += x[xoff
                                    + sp_idx(in_sp, od * win[0] + kd, oh * win[1] + kh, ow * win[2] + kw)];
                            }
                        }
                    }
                    chunk[sp_idx(out_sp, od, oh, ow)] = acc * inv;
                }
            }
        }
    });
    out
}

pub fn avg_pool3d_dx(gout: &[f64], bc: usize, in_sp: [usize; 3], win: [usize; 3]) -> Vec<f64> {
    let out_sp = [in_sp[0] / win[0], in_sp[1] / win[1], in_sp[2] / win[2]];
    let os: usize = out_sp.iter().product();
    let is: usize = in_sp.iter().product();
    let inv = 1.0 / (win.iter().product::<usize>() as f64);
    let mut dx = vec![0.0; bc * is];
    for_each_chunk_mut(&mut dx, is, |c, chunk| {
        let goff = c * os;
        for id in 0..in_sp[0] {
            for ih in 0..in_sp[1] {
                for iw in 0..in_sp[2] {
                    let g = gout[goff + sp_idx(out_sp, id / win[0], ih / win[1], iw / win[2])];
                    chunk[sp_idx(in_sp, id, ih, iw)] = g * inv;
                }
            }
        }
    });
    dx
}

// ---------------------------------------------------------- upsampling ----

pub fn upsample_nearest_fwd(x: &[f64], bc: usize, in_sp: [usize; 3], f: [usize; 3]) -> Vec<f64> {
    let out_sp = [in_sp[0] * f[0], in_sp[1] * f[1], in_sp[2] * f[2]];
    let os: usize = out_sp.iter().product();
    let is: usize = in_sp.iter().product();
    let mut out = vec![0.0; bc * os];
    for_each_chunk_mut(&mut out, os, |c, chunk| {
        let xoff = c * is;
        for od in 0..out_sp[0] {
            for oh in 0..out_sp[1] {
                for ow in 0..out_sp[2] {
                    chunk[sp_idx(out_sp, od, oh, ow)] =
                        x[xoff + sp_idx(in_sp, od / f[0], oh / f[1], ow / f[2])];
                }
            }
        }
    });
    out
}

pub fn upsample_nearest_dx(gout: &[f64], bc: usize, in_sp: [usize; 3], f: [usize; 3]) -> Vec<f64> {
    let out_sp = [in_sp[0] * f[0], in_sp[1] * f[1], in_sp[2] * f[2]];
    let os: usize = out_sp.iter().product();
    let is: usize = in_sp.iter().product();
    let mut dx = vec![0.0; bc * is];
    for_each_chunk_mut(&mut dx, is, |c, chunk| {
        let goff = c * os;
        for id in 0..in_sp[0] {
            for ih in 0..in_sp[1] {
                for iw in 0..in_sp[2] {
                    let mut acc = 0.0;
                    for kd in 0..f[0] {
                        for kh in 0..f[1] {
                            for kw in 0..f[2] {
                                acc += gout[goff
                                    + sp_idx(out_sp, id * f[0] + kd, ih * f[1] + kh, iw * f[2] + kw)];
                            }
                        }
                    }
                    chunk[sp_idx(in_sp, id, ih, iw)] = acc;
                }
            }
        }
    });
    dx
}

// --------------------------------------------------------------- stable ----

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
