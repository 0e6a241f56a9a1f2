//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Activations are channel-major `[c, h, w]`; vectors are `[n]`. Only nodes
//! that transitively depend on a leaf marked `requires_grad` receive
//! gradients.

use crate::gemm::{matmul, Mat, Real};

pub type Var = usize;

enum Op<T> {
    Leaf,
    /// 3x3 convolution, stride 2, zero padding 1. `cols` is the unfolded
    /// input `[c_in * 9, h_out * w_out]`.
    Conv {
        x: Var,
        w: Var,
        b: Var,
        in_shape: [usize; 3],
        cols: Vec<T>,
    },
    /// Per-channel `gamma * (x - mean) * inv_std + beta` with frozen statistics.
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<T>,
        xhat: Vec<T>,
    },
    Swish {
        x: Var,
    },
    Gap {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
    },
    /// `w x + b` with `w` of shape `[out, in]`.
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Affine {
        x: Var,
        scale: T,
    },
}

pub struct Tape<T> {
    values: Vec<Vec<T>>,
    shapes: Vec<Vec<usize>>,
    ops: Vec<Op<T>>,
    req: Vec<bool>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn conv_out(len: usize) -> usize {
    (len + 1) / 2
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn swish<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

/// Unfolds `x: [c, h, w]` into `[c * 9, ho * wo]` for a stride-2, pad-1 3x3 kernel.
fn im2col<T: Real>(x: &[T], [c, h, w]: [usize; 3]) -> Vec<T> {
    let (ho, wo) = (conv_out(h), conv_out(w));
    let p = ho * wo;
    let mut cols = vec![T::zero(); c * 9 * p];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..][..w];
                    let dst = &mut row[oy * wo..][..wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], [c, h, w]: [usize; 3], dx: &mut [T]) {
    let (ho, wo) = (conv_out(h), conv_out(w));
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (2 * oy + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..][..w];
                    let src = &row[oy * wo..][..wo];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (2 * ox + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut Option<Vec<T>>, src: Vec<T>) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            shapes: Vec::new(),
            ops: Vec::new(),
            req: Vec::new(),
        }
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, req: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.values.push(value);
        self.shapes.push(shape);
        self.ops.push(op);
        self.req.push(req);
        self.values.len() - 1
    }

    pub fn leaf(&mut self, value: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> Var {
        self.push(value, shape, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.values[v]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v]
    }

    fn shape3(&self, v: Var) -> [usize; 3] {
        let s = &self.shapes[v];
        assert_eq!(s.len(), 3, "expected a [c, h, w] activation");
        [s[0], s[1], s[2]]
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Var) -> Var {
        let in_shape = self.shape3(x);
        let c_out = self.shapes[w][0];
        assert_eq!(self.shapes[w], [c_out, in_shape[0], 3, 3], "conv weight shape");
        let (ho, wo) = (conv_out(in_shape[1]), conv_out(in_shape[2]));
        let p = ho * wo;
        let cols = im2col(&self.values[x], in_shape);
        let mut out = vec![T::zero(); c_out * p];
        for (co, row) in out.chunks_mut(p).enumerate() {
            row.fill(self.values[b][co]);
        }
        matmul(
            Mat::new(&self.values[w], c_out, in_shape[0] * 9),
            Mat::new(&cols, in_shape[0] * 9, p),
            &mut out,
            true,
        );
        let req = self.req[x] || self.req[w] || self.req[b];
        self.push(out, vec![c_out, ho, wo], Op::Conv { x, w, b, in_shape, cols }, req)
    }

    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Var {
        let [c, h, w] = self.shape3(x);
        let hw = h * w;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = &self.values[x];
        let (g, bt) = (&self.values[gamma], &self.values[beta]);
        let mut xhat = vec![T::zero(); c * hw];
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                let xh = (xv[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = g[ch] * xh + bt[ch];
            }
        }
        let req = self.req[x] || self.req[gamma] || self.req[beta];
        self.push(
            out,
            vec![c, h, w],
            Op::Norm {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            },
            req,
        )
    }

    pub fn swish(&mut self, x: Var) -> Var {
        let out = self.values[x].iter().map(|&v| swish(v)).collect();
        let shape = self.shapes[x].clone();
        let req = self.req[x];
        self.push(out, shape, Op::Swish { x }, req)
    }

    pub fn gap(&mut self, x: Var) -> Var {
        let [c, h, w] = self.shape3(x);
        let n = T::from_usize_lossy(h * w);
        let out = self.values[x].chunks(h * w).map(|p| p.iter().copied().sum::<T>() / n).collect();
        let req = self.req[x];
        self.push(out, vec![c], Op::Gap { x }, req)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let mut out = Vec::new();
        for &x in xs {
            assert_eq!(self.shapes[x].len(), 1, "concat takes vectors");
            out.extend_from_slice(&self.values[x]);
        }
        let n = out.len();
        let req = xs.iter().any(|&x| self.req[x]);
        self.push(out, vec![n], Op::Concat { xs: xs.to_vec() }, req)
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Var {
        let n_in = self.values[x].len();
        let n_out = self.shapes[w][0];
        assert_eq!(self.shapes[w], [n_out, n_in], "dense weight shape");
        let mut out = self.values[b].clone();
        matmul(
            Mat::new(&self.values[w], n_out, n_in),
            Mat::new(&self.values[x], n_in, 1),
            &mut out,
            true,
        );
        let req = self.req[x] || self.req[w] || self.req[b];
        self.push(out, vec![n_out], Op::Dense { x, w, b }, req)
    }

    pub fn affine(&mut self, x: Var, offset: T, scale: T) -> Var {
        let out = self.values[x].iter().map(|&v| offset + scale * v).collect();
        let shape = self.shapes[x].clone();
        let req = self.req[x];
        self.push(out, shape, Op::Affine { x, scale }, req)
    }

    /// Back-propagates `seed` (same shape as `root`) and returns the
    /// gradients of all leaves that require them, indexed by node.
    pub fn backward(&self, root: Var, seed: Vec<T>) -> Vec<Option<Vec<T>>> {
        let n = root + 1;
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if !self.req[root] {
            return grads;
        }
        grads[root] = Some(seed);
        for i in (0..n).rev() {
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => unreachable!(),
                Op::Conv { x, w, b, in_shape, cols } => {
                    let (c_out, k) = (self.shapes[*w][0], in_shape[0] * 9);
                    let p = g.len() / c_out;
                    if self.req[*b] {
                        add_into(&mut grads[*b], g.chunks(p).map(|r| r.iter().copied().sum()).collect());
                    }
                    if self.req[*w] {
                        let mut dw = vec![T::zero(); c_out * k];
                        matmul(Mat::new(&g, c_out, p), Mat::new(cols, k, p).t(), &mut dw, false);
                        add_into(&mut grads[*w], dw);
                    }
                    if self.req[*x] {
                        let mut dcols = vec![T::zero(); k * p];
                        matmul(Mat::new(&self.values[*w], c_out, k).t(), Mat::new(&g, c_out, p), &mut dcols, false);
                        let mut dx = vec![T::zero(); in_shape.iter().product()];
                        col2im(&dcols, *in_shape, &mut dx);
                        add_into(&mut grads[*x], dx);
                    }
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    inv_std,
                    xhat,
                } => {
                    let c = inv_std.len();
                    let hw = g.len() / c;
                    if self.req[*gamma] {
                        let dg = (0..c)
                            .map(|ch| (ch * hw..(ch + 1) * hw).map(|i| g[i] * xhat[i]).sum())
                            .collect();
                        add_into(&mut grads[*gamma], dg);
                    }
                    if self.req[*beta] {
                        add_into(&mut grads[*beta], g.chunks(hw).map(|r| r.iter().copied().sum()).collect());
                    }
                    if self.req[*x] {
                        let gm = &self.values[*gamma];
                        let dx = g
                            .iter()
                            .enumerate()
                            .map(|(i, &gi)| gi * gm[i / hw] * inv_std[i / hw])
                            .collect();
                        add_into(&mut grads[*x], dx);
                    }
                }
                Op::Swish { x } => {
                    if self.req[*x] {
                        let dx = self.values[*x]
                            .iter()
                            .zip(&g)
                            .map(|(&v, &gi)| {
                                let s = sigmoid(v);
                                gi * s * (T::one() + v * (T::one() - s))
                            })
                            .collect();
                        add_into(&mut grads[*x], dx);
                    }
                }
                Op::Gap { x } => {
                    if self.req[*x] {
                        let hw = self.values[*x].len() / g.len();
                        let inv = T::one() / T::from_usize_lossy(hw);
                        let dx = g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, hw)).collect();
                        add_into(&mut grads[*x], dx);
                    }
                }
                Op::Concat { xs } => {
                    let mut off = 0;
                    for &x in xs {
                        let len = self.values[x].len();
                        if self.req[x] {
                            add_into(&mut grads[x], g[off..off + len].to_vec());
                        }
                        off += len;
                    }
                }
                Op::Dense { x, w, b } => {
                    let n_out = g.len();
                    let n_in = self.values[*x].len();
                    if self.req[*b] {
                        add_into(&mut grads[*b], g.clone());
                    }
                    if self.req[*w] {
                        let mut dw = vec![T::zero(); n_out * n_in];
                        matmul(Mat::new(&g, n_out, 1), Mat::new(&self.values[*x], 1, n_in), &mut dw, false);
                        add_into(&mut grads[*w], dw);
                    }
                    if self.req[*x] {
                        let mut dx = vec![T::zero(); n_in];
                        matmul(Mat::new(&self.values[*w], n_out, n_in).t(), Mat::new(&g, n_out, 1), &mut dx, false);
                        add_into(&mut grads[*x], dx);
                    }
                }
                Op::Affine { x, scale, .. } => {
                    if self.req[*x] {
                        add_into(&mut grads[*x], g.iter().map(|&gi| gi * *scale).collect());
                    }
                }
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_direct_sum() {
        let (c, h, w) = (2, 5, 4);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let wt: Vec<f64> = (0..3 * c * 9).map(|i| (i as f64 * 0.11).cos()).collect();
        let b = vec![0.5, -0.25, 1.0];
        let mut t = Tape::new();
        let xv = t.leaf(x.clone(), vec![c, h, w], false);
        let wv = t.leaf(wt.clone(), vec![3, c, 3, 3], false);
        let bv = t.leaf(b.clone(), vec![3], false);
        let y = t.conv(xv, wv, bv);
        assert_eq!(t.shape(y), [3, 3, 2]);
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..2 {
                    let mut s = b[co];
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = 2 * oy as i64 + ky as i64 - 1;
                                let ix = 2 * ox as i64 + kx as i64 - 1;
                                if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                                    s += wt[((co * c + ci) * 3 + ky) * 3 + kx] * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((t.value(y)[(co * 3 + oy) * 2 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn no_gradient_without_requirement() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], false);
        let y = t.affine(x, 1.0, 2.0);
        let g = t.backward(y, vec![1.0, 1.0]);
        assert!(g.iter().all(Option::is_none));
    }

    #[test]
    fn dense_swish_gradient() {
        // y = swish(w x + b), x = [1, -2], w = [[0.5, 0.25]], b = [0.1]
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![1.0, -2.0], vec![2], false);
        let w = t.leaf(vec![0.5, 0.25], vec![1, 2], true);
        let b = t.leaf(vec![0.1], vec![1], true);
        let z = t.dense(x, w, b);
        let y = t.swish(z);
        let zv = 0.1_f64;
        assert!((t.value(y)[0] - zv / (1.0 + (-zv).exp())).abs() < 1e-15);
        let g = t.backward(y, vec![1.0]);
        let s = 1.0 / (1.0 + (-zv).exp());
        let dz = s * (1.0 + zv * (1.0 - s));
        assert!((g[b].as_ref().unwrap()[0] - dz).abs() < 1e-15);
        let gw = g[w].as_ref().unwrap();
        assert!((gw[0] - dz).abs() < 1e-15 && (gw[1] + 2.0 * dz).abs() < 1e-15);
    }
}
