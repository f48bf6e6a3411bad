use super::{need, Contribs};
use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::tape::{Node, Op, Tape, Var};
use crate::tensor::Tensor;

/// Batch layout of a matmul operand: (batch, rows, cols), batch 0 means shared.
fn mat_dims(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match shape {
        [r, c] => Some((0, *r, *c)),
        [b, r, c] => Some((*b, *r, *c)),
        _ => None,
    }
}

fn im2col_2d<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - p as isize;
                    let line = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &x[ci * hw + sy as usize * w..ci * hw + (sy as usize + 1) * w];
                    for (xo, d) in line.iter_mut().enumerate() {
                        let sx = xo as isize + kx as isize - p as isize;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_2d<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let p = k / 2;
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - p as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ci * hw + sy as usize * w;
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - p as isize;
                        if sx >= 0 && sx < w as isize {
                            dx[base + sx as usize] = dx[base + sx as usize] + src[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

fn im2col_3d<T: Scalar>(x: &[T], c: usize, dims: [usize; 3], k: usize, cols: &mut [T]) {
    let p = k as isize / 2;
    let [nx, ny, nz] = dims;
    let vol = nx * ny * nz;
    for ci in 0..c {
        let src = &x[ci * vol..(ci + 1) * vol];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let row = ((ci * k + kx) * k + ky) * k + kz;
                    let dst = &mut cols[row * vol..(row + 1) * vol];
                    let (ox, oy, oz) = (kx as isize - p, ky as isize - p, kz as isize - p);
                    for i in 0..nx {
                        let si = i as isize + ox;
                        for j in 0..ny {
                            let sj = j as isize + oy;
                            let line = &mut dst[(i * ny + j) * nz..(i * ny + j + 1) * nz];
                            if si < 0 || si >= nx as isize || sj < 0 || sj >= ny as isize {
                                line.fill(T::zero());
                                continue;
                            }
                            let sbase = (si as usize * ny + sj as usize) * nz;
                            for (l, d) in line.iter_mut().enumerate() {
                                let sl = l as isize + oz;
                                *d = if sl < 0 || sl >= nz as isize {
                                    T::zero()
                                } else {
                                    src[sbase + sl as usize]
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_3d<T: Scalar>(cols: &[T], c: usize, dims: [usize; 3], k: usize, dx: &mut [T]) {
    let p = k as isize / 2;
    let [nx, ny, nz] = dims;
    let vol = nx * ny * nz;
    for ci in 0..c {
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let row = ((ci * k + kx) * k + ky) * k + kz;
                    let src = &cols[row * vol..(row + 1) * vol];
                    let (ox, oy, oz) = (kx as isize - p, ky as isize - p, kz as isize - p);
                    for i in 0..nx {
                        let si = i as isize + ox;
                        if si < 0 || si >= nx as isize {
                            continue;
                        }
                        for j in 0..ny {
                            let sj = j as isize + oy;
                            if sj < 0 || sj >= ny as isize {
                                continue;
                            }
                            let sbase = ci * vol + (si as usize * ny + sj as usize) * nz;
                            let line = &src[(i * ny + j) * nz..(i * ny + j + 1) * nz];
                            for (l, &v) in line.iter().enumerate() {
                                let sl = l as isize + oz;
                                if sl >= 0 && sl < nz as isize {
                                    let t = sbase + sl as usize;
                                    dx[t] = dx[t] + v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Shared im2col convolution core over `batches` spatial blocks of `spatial` positions.
struct ConvGeom {
    batches: usize,
    cin: usize,
    cout: usize,
    spatial: usize,
    patch: usize,
}

fn conv_forward<T: Scalar>(
    geom: &ConvGeom,
    x: &[T],
    w: &[T],
    b: &[T],
    im2col: impl Fn(&[T], &mut [T]),
) -> Vec<T> {
    let ConvGeom {
        batches,
        cin,
        cout,
        spatial,
        patch,
    } = *geom;
    let rows = cin * patch;
    let mut cols = vec![T::zero(); rows * spatial];
    let mut out = vec![T::zero(); batches * cout * spatial];
    for bi in 0..batches {
        im2col(&x[bi * cin * spatial..(bi + 1) * cin * spatial], &mut cols);
        let o = &mut out[bi * cout * spatial..(bi + 1) * cout * spatial];
        for (oc, line) in o.chunks_mut(spatial).enumerate() {
            line.fill(b[oc]);
        }
        T::gemm(
            cout,
            rows,
            spatial,
            T::one(),
            w,
            rows as isize,
            1,
            &cols,
            spatial as isize,
            1,
            T::one(),
            o,
            spatial as isize,
            1,
        );
    }
    out
}

#[allow(clippy::type_complexity)]
fn conv_backward<T: Scalar>(
    geom: &ConvGeom,
    x: &[T],
    w: &[T],
    g: &[T],
    want: (bool, bool, bool),
    im2col: impl Fn(&[T], &mut [T]),
    col2im: impl Fn(&[T], &mut [T]),
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ConvGeom {
        batches,
        cin,
        cout,
        spatial,
        patch,
    } = *geom;
    let rows = cin * patch;
    let mut dx = if want.0 {
        vec![T::zero(); batches * cin * spatial]
    } else {
        vec![]
    };
    let mut dw = if want.1 {
        vec![T::zero(); cout * rows]
    } else {
        vec![]
    };
    let mut db = vec![T::zero(); if want.2 { cout } else { 0 }];
    let mut cols = vec![T::zero(); rows * spatial];
    for bi in 0..batches {
        let gb = &g[bi * cout * spatial..(bi + 1) * cout * spatial];
        if want.2 {
            for (oc, line) in gb.chunks(spatial).enumerate() {
                db[oc] = db[oc] + line.iter().copied().sum::<T>();
            }
        }
        if want.1 {
            im2col(&x[bi * cin * spatial..(bi + 1) * cin * spatial], &mut cols);
            // dW += G [cout, S] * cols^T [S, rows]
            T::gemm(
                cout,
                spatial,
                rows,
                T::one(),
                gb,
                spatial as isize,
                1,
                &cols,
                1,
                spatial as isize,
                T::one(),
                &mut dw,
                rows as isize,
                1,
            );
        }
        if want.0 {
            // dcols = W^T [rows, cout] * G [cout, S]
            T::gemm(
                rows,
                cout,
                spatial,
                T::one(),
                w,
                1,
                rows as isize,
                gb,
                spatial as isize,
                1,
                T::zero(),
                &mut cols,
                spatial as isize,
                1,
            );
            col2im(&cols, &mut dx[bi * cin * spatial..(bi + 1) * cin * spatial]);
        }
    }
    (dx, dw, db)
}

impl<T: Scalar> Tape<T> {
    /// Matrix product. Supports `[m,k]x[k,n]`, `[b,m,k]x[b,k,n]` and `[b,m,k]x[k,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.read(|n| {
            let (x, y) = (&n[a.0].value, &n[b.0].value);
            let bad = || DiffError::shapes("matmul", &[x.shape(), y.shape()]);
            let (ba, m, k) = mat_dims(x.shape()).ok_or_else(bad)?;
            let (bb, k2, nn) = mat_dims(y.shape()).ok_or_else(bad)?;
            if k != k2 || (bb != 0 && bb != ba) {
                return Err(bad());
            }
            let batches = ba.max(1);
            let mut data = vec![T::zero(); batches * m * nn];
            for bi in 0..batches {
                let yo = if bb == 0 { 0 } else { bi * k * nn };
                T::gemm(
                    m,
                    k,
                    nn,
                    T::one(),
                    &x.data()[bi * m * k..(bi + 1) * m * k],
                    k as isize,
                    1,
                    &y.data()[yo..yo + k * nn],
                    nn as isize,
                    1,
                    T::zero(),
                    &mut data[bi * m * nn..(bi + 1) * m * nn],
                    nn as isize,
                    1,
                );
            }
            let shape = if ba == 0 { vec![m, nn] } else { vec![ba, m, nn] };
            Tensor::new(shape, data)
        })?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    /// Same-padded stride-1 2-D convolution.
    /// `x: [B,C,H,W]`, `w: [O,C,k,k]` with odd `k`, `b: [O]`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = self.read(|n| {
            let (xv, wv, bv) = (&n[x.0].value, &n[w.0].value, &n[b.0].value);
            let err = || DiffError::shapes("conv2d", &[xv.shape(), wv.shape(), bv.shape()]);
            let &[bs, c, h, wd] = xv.shape() else { return Err(err()) };
            let &[o, c2, k, k2] = wv.shape() else { return Err(err()) };
            if c != c2 || k != k2 || k % 2 == 0 || bv.shape() != [o] {
                return Err(err());
            }
            let geom = ConvGeom {
                batches: bs,
                cin: c,
                cout: o,
                spatial: h * wd,
                patch: k * k,
            };
            let data = conv_forward(&geom, xv.data(), wv.data(), bv.data(), |src, cols| {
                im2col_2d(src, c, h, wd, k, cols)
            });
            Tensor::new(vec![bs, o, h, wd], data)
        })?;
        self.push("conv2d", out, Op::Conv2d { x, w, b })
    }

    /// Same-padded stride-1 3-D convolution.
    /// `x: [C,X,Y,Z]`, `w: [O,C,k,k,k]` with odd `k`, `b: [O]`.
    pub fn conv3d(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = self.read(|n| {
            let (xv, wv, bv) = (&n[x.0].value, &n[w.0].value, &n[b.0].value);
            let err = || DiffError::shapes("conv3d", &[xv.shape(), wv.shape(), bv.shape()]);
            let &[c, nx, ny, nz] = xv.shape() else { return Err(err()) };
            let &[o, c2, k, k2, k3] = wv.shape() else { return Err(err()) };
            if c != c2 || k != k2 || k != k3 || k % 2 == 0 || bv.shape() != [o] {
                return Err(err());
            }
            let geom = ConvGeom {
                batches: 1,
                cin: c,
                cout: o,
                spatial: nx * ny * nz,
                patch: k * k * k,
            };
            let data = conv_forward(&geom, xv.data(), wv.data(), bv.data(), |src, cols| {
                im2col_3d(src, c, [nx, ny, nz], k, cols)
            });
            Tensor::new(vec![o, nx, ny, nz], data)
        })?;
        self.push("conv3d", out, Op::Conv3d { x, w, b })
    }

    /// Depth-to-space: `[B, C*r*r, h, w] -> [B, C, h*r, w*r]`.
    pub fn pixel_shuffle(&self, a: Var, r: usize) -> Result<Var> {
        let out = self.read(|n| {
            let x = &n[a.0].value;
            let &[bs, cr, h, w] = x.shape() else {
                return Err(DiffError::shapes("pixel_shuffle", &[x.shape()]));
            };
            if r == 0 || cr % (r * r) != 0 {
                return Err(DiffError::invalid(
                    "pixel_shuffle",
                    format!("{cr} channels not divisible by {}", r * r),
                ));
            }
            let c = cr / (r * r);
            let mut data = vec![T::zero(); x.numel()];
            shuffle_index(bs, c, h, w, r, |src, dst| data[dst] = x.data()[src]);
            Tensor::new(vec![bs, c, h * r, w * r], data)
        })?;
        self.push("pixel_shuffle", out, Op::PixelShuffle { a, r })
    }
}

/// Calls `f(input offset, output offset)` for every element of a pixel shuffle.
fn shuffle_index(
    bs: usize,
    c: usize,
    h: usize,
    w: usize,
    r: usize,
    mut f: impl FnMut(usize, usize),
) {
    let (oh, ow) = (h * r, w * r);
    for b in 0..bs {
        for ci in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let ic = (ci * r + i) * r + j;
                    for y in 0..h {
                        for x in 0..w {
                            let src = ((b * c * r * r + ic) * h + y) * w + x;
                            let dst = ((b * c + ci) * oh + y * r + i) * ow + x * r + j;
                            f(src, dst);
                        }
                    }
                }
            }
        }
    }
}

pub(super) fn matmul_backward<T: Scalar>(
    nodes: &[Node<T>],
    a: Var,
    b: Var,
    g: &Tensor<T>,
) -> Contribs<T> {
    let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
    let (ba, m, k) = mat_dims(x.shape()).expect("matmul dims");
    let (bb, _, nn) = mat_dims(y.shape()).expect("matmul dims");
    let batches = ba.max(1);
    let mut out = Vec::new();
    if need(nodes, a) {
        let mut da = vec![T::zero(); x.numel()];
        for bi in 0..batches {
            let yo = if bb == 0 { 0 } else { bi * k * nn };
            // dA = G [m,n] * B^T [n,k]
            T::gemm(
                m,
                nn,
                k,
                T::one(),
                &g.data()[bi * m * nn..(bi + 1) * m * nn],
                nn as isize,
                1,
                &y.data()[yo..yo + k * nn],
                1,
                nn as isize,
                T::zero(),
                &mut da[bi * m * k..(bi + 1) * m * k],
                k as isize,
                1,
            );
        }
        out.push((a, Tensor::new(x.shape().to_vec(), da).expect("matmul grad")));
    }
    if need(nodes, b) {
        let mut db = vec![T::zero(); y.numel()];
        for bi in 0..batches {
            let yo = if bb == 0 { 0 } else { bi * k * nn };
            let beta = if bb == 0 && bi > 0 { T::one() } else { T::zero() };
            // dB = A^T [k,m] * G [m,n]
            T::gemm(
                k,
                m,
                nn,
                T::one(),
                &x.data()[bi * m * k..(bi + 1) * m * k],
                1,
                k as isize,
                &g.data()[bi * m * nn..(bi + 1) * m * nn],
                nn as isize,
                1,
                beta,
                &mut db[yo..yo + k * nn],
                nn as isize,
                1,
            );
        }
        out.push((b, Tensor::new(y.shape().to_vec(), db).expect("matmul grad")));
    }
    out
}

fn conv_contribs<T: Scalar>(
    nodes: &[Node<T>],
    (x, w, b): (Var, Var, Var),
    (dx, dw, db): (Vec<T>, Vec<T>, Vec<T>),
) -> Contribs<T> {
    let mut out = Vec::new();
    for (v, d) in [(x, dx), (w, dw), (b, db)] {
        if need(nodes, v) {
            let shape = nodes[v.0].value.shape().to_vec();
            out.push((v, Tensor::new(shape, d).expect("conv grad")));
        }
    }
    out
}

pub(super) fn conv2d_backward<T: Scalar>(
    nodes: &[Node<T>],
    x: Var,
    w: Var,
    b: Var,
    g: &Tensor<T>,
) -> Contribs<T> {
    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
    let &[bs, c, h, wd] = xv.shape() else { unreachable!() };
    let (o, k) = (wv.shape()[0], wv.shape()[2]);
    let geom = ConvGeom {
        batches: bs,
        cin: c,
        cout: o,
        spatial: h * wd,
        patch: k * k,
    };
    let grads = conv_backward(
        &geom,
        xv.data(),
        wv.data(),
        g.data(),
        (need(nodes, x), need(nodes, w), need(nodes, b)),
        |src, cols| im2col_2d(src, c, h, wd, k, cols),
        |cols, dx| col2im_2d(cols, c, h, wd, k, dx),
    );
    conv_contribs(nodes, (x, w, b), grads)
}

pub(super) fn conv3d_backward<T: Scalar>(
    nodes: &[Node<T>],
    x: Var,
    w: Var,
    b: Var,
    g: &Tensor<T>,
) -> Contribs<T> {
    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
    let &[c, nx, ny, nz] = xv.shape() else { unreachable!() };
    let (o, k) = (wv.shape()[0], wv.shape()[2]);
    let geom = ConvGeom {
        batches: 1,
        cin: c,
        cout: o,
        spatial: nx * ny * nz,
        patch: k * k * k,
    };
    let grads = conv_backward(
        &geom,
        xv.data(),
        wv.data(),
        g.data(),
        (need(nodes, x), need(nodes, w), need(nodes, b)),
        |src, cols| im2col_3d(src, c, [nx, ny, nz], k, cols),
        |cols, dx| col2im_3d(cols, c, [nx, ny, nz], k, dx),
    );
    conv_contribs(nodes, (x, w, b), grads)
}

pub(super) fn pixel_shuffle_backward<T: Scalar>(
    nodes: &[Node<T>],
    a: Var,
    r: usize,
    g: &Tensor<T>,
) -> Contribs<T> {
    let x = &nodes[a.0].value;
    let &[bs, cr, h, w] = x.shape() else { unreachable!() };
    let mut data = vec![T::zero(); x.numel()];
    shuffle_index(bs, cr / (r * r), h, w, r, |src, dst| data[src] = g.data()[dst]);
    vec![(a, Tensor::new(x.shape().to_vec(), data).expect("shuffle grad"))]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shape_rule() {
        let t = Tape::<f64>::new();
        let a = t.constant(Tensor::ones(vec![2, 3]));
        let b = t.constant(Tensor::ones(vec![3, 4]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), vec![2, 4]);
        assert!(t.value(c).data().iter().all(|&v| v == 3.0));
        let bad = t.constant(Tensor::ones(vec![4, 4]));
        assert!(matches!(
            t.matmul(a, bad),
            Err(DiffError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_fn(vec![1, 1, 3, 3], |i| i as f64));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = t.constant(Tensor::new(vec![1, 1, 3, 3], k).unwrap());
        let b = t.constant(Tensor::zeros(vec![1]));
        let y = t.conv2d(x, w, b).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn conv3d_box_sum_counts_neighbours() {
        let t = Tape::<f64>::new();
        let x = t.constant(Tensor::ones(vec![1, 3, 3, 3]));
        let w = t.constant(Tensor::ones(vec![1, 1, 3, 3, 3]));
        let b = t.constant(Tensor::zeros(vec![1]));
        let y = t.value(t.conv3d(x, w, b).unwrap());
        assert_eq!(y.data()[13], 27.0); // centre
        assert_eq!(y.data()[0], 8.0); // corner
    }

    #[test]
    fn pixel_shuffle_shapes() {
        let t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_fn(vec![1, 48, 4, 4], |i| i as f64));
        let y = t.pixel_shuffle(x, 4).unwrap();
        assert_eq!(t.shape(y), vec![1, 3, 16, 16]);
        let id = t.pixel_shuffle(x, 1).unwrap();
        assert_eq!(t.value(id), t.value(x));
        assert!(t.pixel_shuffle(x, 5).is_err());
    }
}
