use std::sync::Arc;

use super::{need, Contribs};
use crate::error::{DiffError, Result};
use crate::scalar::Scalar;
use crate::tape::{Node, Op, Tape, Var};
use crate::tensor::Tensor;

/// Cell lookup for trilinear interpolation on an `[X, Y, Z]` lattice in index
/// coordinates. Points are clamped to the lattice; the last cell is reused at
/// the upper face so the interpolant stays one polynomial per cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridIndex {
    pub base: [usize; 3],
    pub frac: [f64; 3],
}

impl GridIndex {
    pub fn new(dims: [usize; 3], p: [f64; 3]) -> Self {
        let mut base = [0; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = dims[a];
            let hi = (n - 1) as f64;
            let q = p[a].clamp(0.0, hi);
            let i0 = (q.floor() as usize).min(n.saturating_sub(2));
            base[a] = i0;
            frac[a] = q - i0 as f64;
        }
        GridIndex { base, frac }
    }

    /// Visits the 8 corners as (flat voxel index, weight, d weight / d axis).
    pub fn corners(&self, dims: [usize; 3], mut f: impl FnMut(usize, f64, [f64; 3])) {
        let [_, ny, nz] = dims;
        for c in 0..8 {
            let bit = [(c >> 2) & 1, (c >> 1) & 1, c & 1];
            let mut idx = [0usize; 3];
            let mut w = [0.0; 3];
            let mut dw = [0.0; 3];
            for a in 0..3 {
                // A one-voxel axis has a single corner, weighted fully.
                if dims[a] == 1 {
                    w[a] = if bit[a] == 0 { 1.0 } else { 0.0 };
                    continue;
                }
                idx[a] = self.base[a] + bit[a];
                if bit[a] == 1 {
                    w[a] = self.frac[a];
                    dw[a] = 1.0;
                } else {
                    w[a] = 1.0 - self.frac[a];
                    dw[a] = -1.0;
                }
            }
            let weight = w[0] * w[1] * w[2];
            let grad = [dw[0] * w[1] * w[2], w[0] * dw[1] * w[2], w[0] * w[1] * dw[2]];
            if weight == 0.0 && grad == [0.0; 3] {
                continue;
            }
            f((idx[0] * ny + idx[1]) * nz + idx[2], weight, grad);
        }
    }
}

/// Trilinear interpolation of a channel-last `[X, Y, Z, C]` grid at one point.
pub fn trilinear_point<T: Scalar>(grid: &[T], dims: [usize; 3], channels: usize, p: [f64; 3]) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    GridIndex::new(dims, p).corners(dims, |v, w, _| {
        let w = T::c(w);
        for (o, &g) in out.iter_mut().zip(&grid[v * channels..(v + 1) * channels]) {
            *o = *o + w * g;
        }
    });
    out
}

/// Bilinear corners of continuous pixel coordinate `(u, v)` with pixel centres
/// at half-integers: (x, y, weight, d weight/du, d weight/dv).
fn bilinear_corners(u: f64, v: f64) -> [(isize, isize, f64, f64, f64); 4] {
    let (x, y) = (u - 0.5, v - 0.5);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as isize, y0 as isize);
    [
        (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (x0 + 1, y0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (x0, y0 + 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (x0 + 1, y0 + 1, fx * fy, fy, fx),
    ]
}

/// Bilinear sample of one `[C, H, W]` map; taps outside the image read zero.
pub fn bilinear_point<T: Scalar>(map: &[T], c: usize, h: usize, w: usize, u: f64, v: f64) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for (x, y, wt, _, _) in bilinear_corners(u, v) {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize || wt == 0.0 {
            continue;
        }
        let off = y as usize * w + x as usize;
        for (ci, o) in out.iter_mut().enumerate() {
            *o = *o + T::c(wt) * map[ci * h * w + off];
        }
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// Samples feature maps `maps: [V, C, H, W]` at pixel coordinates
    /// `coords: [Q, 2]` (u, v), query `q` reading view `views[q]`.
    /// Output `[Q, C]`. Differentiable in both the maps and the coordinates.
    pub fn bilinear_sample(&self, maps: Var, coords: Var, views: &[usize]) -> Result<Var> {
        let out = self.read(|n| {
            let (m, xy) = (&n[maps.0].value, &n[coords.0].value);
            let err = || DiffError::shapes("bilinear_sample", &[m.shape(), xy.shape()]);
            let &[nv, c, h, w] = m.shape() else { return Err(err()) };
            let &[q, 2] = xy.shape() else { return Err(err()) };
            if views.len() != q || views.iter().any(|&v| v >= nv) {
                return Err(DiffError::invalid(
                    "bilinear_sample",
                    format!("{} view indices for {q} queries over {nv} views", views.len()),
                ));
            }
            let mut data = Vec::with_capacity(q * c);
            for (qi, &vi) in views.iter().enumerate() {
                let (u, v) = (xy.data()[2 * qi].f64(), xy.data()[2 * qi + 1].f64());
                let map = &m.data()[vi * c * h * w..(vi + 1) * c * h * w];
                data.extend(bilinear_point(map, c, h, w, u, v));
            }
            Tensor::new(vec![q, c], data)
        })?;
        self.push(
            "bilinear_sample",
            out,
            Op::Bilinear {
                maps,
                coords,
                views: Arc::from(views),
            },
        )
    }

    /// Trilinear interpolation of a channel-last grid `[X, Y, Z, C]` at fixed
    /// index-space points, output `[Q, C]`.
    pub fn trilinear_sample(&self, grid: Var, points: &[[f64; 3]]) -> Result<Var> {
        let out = self.read(|n| {
            let g = &n[grid.0].value;
            let (dims, c) = grid_dims(g)?;
            let mut data = Vec::with_capacity(points.len() * c);
            for &p in points {
                data.extend(trilinear_point(g.data(), dims, c, p));
            }
            Tensor::new(vec![points.len(), c], data)
        })?;
        self.push(
            "trilinear_sample",
            out,
            Op::Trilinear {
                grid,
                points: Arc::from(points),
            },
        )
    }

    /// Exact spatial derivative of the trilinear interpolant with respect to
    /// the index coordinates, output `[Q, C, 3]`. Linear in the grid, so it is
    /// itself differentiable with respect to the grid values.
    pub fn trilinear_gradient(&self, grid: Var, points: &[[f64; 3]]) -> Result<Var> {
        let out = self.read(|n| {
            let g = &n[grid.0].value;
            let (dims, c) = grid_dims(g)?;
            let mut data = vec![T::zero(); points.len() * c * 3];
            for (qi, &p) in points.iter().enumerate() {
                let o = &mut data[qi * c * 3..(qi + 1) * c * 3];
                GridIndex::new(dims, p).corners(dims, |v, _, dw| {
                    for ci in 0..c {
                        let val = g.data()[v * c + ci];
                        for a in 0..3 {
                            o[ci * 3 + a] = o[ci * 3 + a] + T::c(dw[a]) * val;
                        }
                    }
                });
            }
            Tensor::new(vec![points.len(), c, 3], data)
        })?;
        self.push(
            "trilinear_gradient",
            out,
            Op::TrilinearGrad {
                grid,
                points: Arc::from(points),
            },
        )
    }
}

fn grid_dims<T: Scalar>(g: &Tensor<T>) -> Result<([usize; 3], usize)> {
    match *g.shape() {
        [x, y, z, c] => Ok(([x, y, z], c)),
        _ => Err(DiffError::shapes("trilinear_sample", &[g.shape()])),
    }
}

pub(super) fn bilinear_backward<T: Scalar>(
    nodes: &[Node<T>],
    maps: Var,
    coords: Var,
    views: &[usize],
    g: &Tensor<T>,
) -> Contribs<T> {
    let (m, xy) = (&nodes[maps.0].value, &nodes[coords.0].value);
    let &[_, c, h, w] = m.shape() else { unreachable!() };
    let (want_m, want_c) = (need(nodes, maps), need(nodes, coords));
    let mut dm = if want_m { vec![T::zero(); m.numel()] } else { vec![] };
    let mut dc = vec![T::zero(); xy.numel()];
    for (qi, &vi) in views.iter().enumerate() {
        let (u, v) = (xy.data()[2 * qi].f64(), xy.data()[2 * qi + 1].f64());
        let gq = &g.data()[qi * c..(qi + 1) * c];
        let base = vi * c * h * w;
        for (x, y, wt, du, dv) in bilinear_corners(u, v) {
            if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                continue;
            }
            let off = base + y as usize * w + x as usize;
            let mut dot = T::zero();
            for ci in 0..c {
                let i = off + ci * h * w;
                if want_m {
                    dm[i] = dm[i] + T::c(wt) * gq[ci];
                }
                dot = dot + gq[ci] * m.data()[i];
            }
            dc[2 * qi] = dc[2 * qi] + T::c(du) * dot;
            dc[2 * qi + 1] = dc[2 * qi + 1] + T::c(dv) * dot;
        }
    }
    let mut out = Vec::new();
    if want_m {
        out.push((maps, Tensor::new(m.shape().to_vec(), dm).expect("bilinear grad")));
    }
    if want_c {
        out.push((coords, Tensor::new(xy.shape().to_vec(), dc).expect("bilinear grad")));
    }
    out
}

pub(super) fn trilinear_backward<T: Scalar>(
    nodes: &[Node<T>],
    grid: Var,
    points: &[[f64; 3]],
    g: &Tensor<T>,
) -> Contribs<T> {
    let gv = &nodes[grid.0].value;
    let (dims, c) = grid_dims(gv).expect("grid dims");
    let mut dg = vec![T::zero(); gv.numel()];
    for (qi, &p) in points.iter().enumerate() {
        let gq = &g.data()[qi * c..(qi + 1) * c];
        GridIndex::new(dims, p).corners(dims, |v, w, _| {
            for ci in 0..c {
                dg[v * c + ci] = dg[v * c + ci] + T::c(w) * gq[ci];
            }
        });
    }
    vec![(grid, Tensor::new(gv.shape().to_vec(), dg).expect("trilinear grad"))]
}

pub(super) fn trilinear_grad_backward<T: Scalar>(
    nodes: &[Node<T>],
    grid: Var,
    points: &[[f64; 3]],
    g: &Tensor<T>,
) -> Contribs<T> {
    let gv = &nodes[grid.0].value;
    let (dims, c) = grid_dims(gv).expect("grid dims");
    let mut dg = vec![T::zero(); gv.numel()];
    for (qi, &p) in points.iter().enumerate() {
        let gq = &g.data()[qi * c * 3..(qi + 1) * c * 3];
        GridIndex::new(dims, p).corners(dims, |v, _, dw| {
            for ci in 0..c {
                let s = T::c(dw[0]) * gq[ci * 3] + T::c(dw[1]) * gq[ci * 3 + 1] + T::c(dw[2]) * gq[ci * 3 + 2];
                dg[v * c + ci] = dg[v * c + ci] + s;
            }
        });
    }
    vec![(grid, Tensor::new(gv.shape().to_vec(), dg).expect("trilinear grad"))]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trilinear_reproduces_affine_fields() {
        // f(i,j,k) = 1 + 2i - j + 0.5k is reproduced exactly, gradient included
        let f = |p: [f64; 3]| 1.0 + 2.0 * p[0] - p[1] + 0.5 * p[2];
        let grid = Tensor::<f64>::from_fn(vec![3, 4, 5, 1], |i| {
            f([(i / 20) as f64, ((i / 5) % 4) as f64, (i % 5) as f64])
        });
        let t = Tape::new();
        let g = t.constant(grid);
        let pts = [[0.3, 2.9, 4.0], [2.0, 0.0, 0.0], [1.5, 1.25, 3.75]];
        let s = t.value(t.trilinear_sample(g, &pts).unwrap());
        let d = t.value(t.trilinear_gradient(g, &pts).unwrap());
        for (q, p) in pts.iter().enumerate() {
            assert!((s.data()[q] - f(*p)).abs() < 1e-12);
            for (got, want) in d.data()[q * 3..q * 3 + 3].iter().zip([2.0, -1.0, 0.5]) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_hits_pixel_centres() {
        let map: Vec<f64> = (0..12).map(|i| i as f64).collect(); // C=1, H=3, W=4
        assert_eq!(bilinear_point(&map, 1, 3, 4, 2.5, 1.5), vec![6.0]);
        assert_eq!(bilinear_point(&map, 1, 3, 4, 3.0, 1.5), vec![6.5]);
        // half a pixel outside the left border blends with zero padding
        assert_eq!(bilinear_point(&map, 1, 3, 4, 0.0, 0.5), vec![0.0]);
        assert_eq!(bilinear_point(&map, 1, 3, 4, 0.0, 1.5), vec![2.0]);
    }
}
