//! Differentiable tensor ops recorded on an [`autograd::Tape`](crate::autograd::Tape).

use std::rc::Rc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Ix1, Ix2, IxDyn};

use crate::autograd::{scalar, Tensor, Var};

pub(crate) fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view().into_dimensionality::<Ix2>().expect("expected a 2-d tensor")
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected a 4-d tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// `x w^T + b` for `x: (n, in)`, `w: (out, in)`, `b: (out)`.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Var<'t> {
    let xv = x.value();
    let wv = w.value();
    let mut y = view2(&xv).dot(&view2(&wv).t());
    if let Some(b) = b {
        let bv = b.value();
        y += &bv.view().into_dimensionality::<Ix1>().expect("bias must be 1-d");
    }
    let mut parents = vec![x, w];
    parents.extend(b);
    x.tape().custom(y.into_dyn(), &parents, move |g, needs| {
        let g = view2(g);
        let mut out = vec![
            needs[0].then(|| g.dot(&view2(&wv)).into_dyn()),
            needs[1].then(|| g.t().dot(&view2(&xv)).into_dyn()),
        ];
        if needs.len() > 2 {
            out.push(needs[2].then(|| g.sum_axis(Axis(0)).into_dyn()));
        }
        out
    })
}

struct ConvShape {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvShape {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Calls `f(row, col, input_offset)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ohw = self.oh * self.ow;
        for n in 0..self.n {
            for c in 0..self.c {
                for ki in 0..self.kh {
                    for kj in 0..self.kw {
                        let row = (c * self.kh + ki) * self.kw + kj;
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let in_row = ((n * self.c + c) * self.h + iy as usize) * self.w;
                            let col_row = n * ohw + oy * self.ow;
                            for ox in 0..self.ow {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(row, col_row + ox, in_row + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-d convolution (cross-correlation) of `x: (n, c, h, w)` with `weight: (o, c, kh, kw)`,
/// lowered to a matrix product over im2col patches.
pub fn conv2d<'t>(x: Var<'t>, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, pad: usize) -> Var<'t> {
    let xv = x.value();
    let wv = weight.value();
    let (n, c, h, w) = dims4(&xv);
    let (o, wc, kh, kw) = dims4(&wv);
    assert_eq!(c, wc, "conv2d channel mismatch");
    assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "kernel larger than padded input");
    let shape = ConvShape {
        n,
        c,
        h,
        w,
        kh,
        kw,
        oh: (h + 2 * pad - kh) / stride + 1,
        ow: (w + 2 * pad - kw) / stride + 1,
        stride,
        pad,
    };
    let xs = xv.as_standard_layout();
    let xdata = xs.as_slice().unwrap();
    let ncols = shape.cols();
    let mut cols = vec![0.0; shape.rows() * ncols];
    shape.for_each_tap(|row, col, off| cols[row * ncols + col] = xdata[off]);
    let cols = Array2::from_shape_vec((shape.rows(), ncols), cols).unwrap();
    let wmat = wv.view().into_shape_with_order((o, shape.rows())).unwrap().to_owned();
    let out2 = wmat.dot(&cols);

    let ohw = shape.oh * shape.ow;
    let mut out = Tensor::zeros(IxDyn(&[n, o, shape.oh, shape.ow]));
    {
        let od = out.as_slice_mut().unwrap();
        for oc in 0..o {
            let src = out2.row(oc);
            let src = src.as_slice().unwrap();
            let b = bias.map(|b| b.value()[[oc]]).unwrap_or(0.0);
            for ni in 0..n {
                let dst = &mut od[(ni * o + oc) * ohw..(ni * o + oc + 1) * ohw];
                for (d, s) in dst.iter_mut().zip(&src[ni * ohw..(ni + 1) * ohw]) {
                    *d = s + b;
                }
            }
        }
    }

    let mut parents = vec![x, weight];
    parents.extend(bias);
    let cols = Rc::new(cols);
    x.tape().custom(out, &parents, move |g, needs| {
        let gs = g.as_standard_layout();
        let gd = gs.as_slice().unwrap();
        let mut g2 = Array2::zeros((o, ncols));
        for oc in 0..o {
            let mut row = g2.row_mut(oc);
            let dst = row.as_slice_mut().unwrap();
            for ni in 0..n {
                dst[ni * ohw..(ni + 1) * ohw].copy_from_slice(&gd[(ni * o + oc) * ohw..(ni * o + oc + 1) * ohw]);
            }
        }
        let dx = needs[0].then(|| {
            let dcols = wmat.t().dot(&g2);
            let dcols = dcols.as_slice().unwrap();
            let mut dx = vec![0.0; n * c * h * w];
            shape.for_each_tap(|row, col, off| dx[off] += dcols[row * ncols + col]);
            Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap()
        });
        let dw = needs[1].then(|| g2.dot(&cols.t()).into_shape_with_order(IxDyn(&[o, c, kh, kw])).unwrap());
        let mut out = vec![dx, dw];
        if needs.len() > 2 {
            out.push(needs[2].then(|| g2.sum_axis(Axis(1)).into_dyn()));
        }
        out
    })
}

pub const BN_EPS: f64 = 1e-5;

/// Batch statistics observed by a training-mode batch norm: per-channel mean and unbiased
/// variance, for the running-average update.
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Normalization statistics source.
pub enum NormMode<'a> {
    Batch,
    Running { mean: &'a Array1<f64>, var: &'a Array1<f64> },
}

/// Batch normalization over every axis except 1 for `(n, c)` or `(n, c, h, w)` inputs.
pub fn batch_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>, mode: NormMode<'_>) -> (Var<'t>, Option<BatchStats>) {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let m = (n * spatial) as f64;
    let xs = xv.as_standard_layout();
    let xd = xs.as_slice().unwrap();
    let idx = move |ni: usize, ci: usize| (ni * c + ci) * spatial;

    let (mean, var, stats) = match mode {
        NormMode::Batch => {
            let mut mean = Array1::zeros(c);
            let mut var = Array1::zeros(c);
            for ci in 0..c {
                let mut sum = 0.0;
                for ni in 0..n {
                    sum += xd[idx(ni, ci)..idx(ni, ci) + spatial].iter().sum::<f64>();
                }
                let mu = sum / m;
                let mut sq = 0.0;
                for ni in 0..n {
                    sq += xd[idx(ni, ci)..idx(ni, ci) + spatial].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                mean[ci] = mu;
                var[ci] = sq / m;
            }
            let unbiased = if m > 1.0 { &var * (m / (m - 1.0)) } else { var.clone() };
            (mean.clone(), var, Some(BatchStats { mean, var: unbiased }))
        }
        NormMode::Running { mean, var } => (mean.clone(), var.clone(), None),
    };
    let train = stats.is_some();
    let inv_std: Array1<f64> = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let gv = gamma.value();
    let bv = beta.value();
    let mut xhat = vec![0.0; xd.len()];
    let mut y = vec![0.0; xd.len()];
    for ni in 0..n {
        for ci in 0..c {
            let base = idx(ni, ci);
            let (mu, is, ga, be) = (mean[ci], inv_std[ci], gv[[ci]], bv[[ci]]);
            for k in base..base + spatial {
                let h = (xd[k] - mu) * is;
                xhat[k] = h;
                y[k] = ga * h + be;
            }
        }
    }
    let y = Tensor::from_shape_vec(IxDyn(&shape), y).unwrap();
    let out = x.tape().custom(y, &[x, gamma, beta], move |g, needs| {
        let gs = g.as_standard_layout();
        let gd = gs.as_slice().unwrap();
        let mut dgamma = Array1::<f64>::zeros(c);
        let mut dbeta = Array1::<f64>::zeros(c);
        for ni in 0..n {
            for ci in 0..c {
                let base = idx(ni, ci);
                for k in base..base + spatial {
                    dgamma[ci] += gd[k] * xhat[k];
                    dbeta[ci] += gd[k];
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; gd.len()];
            for ci in 0..c {
                let ga = gv[[ci]];
                let is = inv_std[ci];
                if train {
                    // dxhat = g * gamma; dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                    let mean_d = ga * dbeta[ci] / m;
                    let mean_dx = ga * dgamma[ci] / m;
                    for ni in 0..n {
                        let base = idx(ni, ci);
                        for k in base..base + spatial {
                            dx[k] = is * (ga * gd[k] - mean_d - xhat[k] * mean_dx);
                        }
                    }
                } else {
                    for ni in 0..n {
                        let base = idx(ni, ci);
                        for k in base..base + spatial {
                            dx[k] = is * ga * gd[k];
                        }
                    }
                }
            }
            Tensor::from_shape_vec(IxDyn(&shape), dx).unwrap()
        });
        vec![dx, needs[1].then(|| dgamma.into_dyn()), needs[2].then(|| dbeta.into_dyn())]
    });
    (out, stats)
}

pub fn relu(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    let y = xv.mapv(|v| if v <= 0.0 { 0.0 } else { v });
    x.tape().custom(y, &[x], move |g, _| {
        let mut d = g.clone();
        d.zip_mut_with(&xv, |d, &v| {
            if v <= 0.0 {
                *d = 0.0
            }
        });
        vec![Some(d)]
    })
}

/// Max pooling over `k x k` windows with the given stride and implicit `-inf` padding.
pub fn max_pool2d(x: Var<'_>, k: usize, stride: usize, pad: usize) -> Var<'_> {
    let xv = x.value();
    let (n, c, h, w) = dims4(&xv);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let xs = xv.as_standard_layout();
    let xd = xs.as_slice().unwrap();
    let mut y = vec![0.0; n * c * oh * ow];
    let mut arg = vec![0usize; y.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = usize::MAX;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let off = base + iy as usize * w + ix as usize;
                        if xd[off] > best || best_at == usize::MAX || xd[off].is_nan() {
                            best = xd[off];
                            best_at = off;
                        }
                    }
                }
                let o = (plane * oh + oy) * ow + ox;
                y[o] = best;
                arg[o] = best_at;
            }
        }
    }
    let in_len = xd.len();
    let y = Tensor::from_shape_vec(IxDyn(&[n, c, oh, ow]), y).unwrap();
    x.tape().custom(y, &[x], move |g, _| {
        let gs = g.as_standard_layout();
        let mut dx = vec![0.0; in_len];
        for (gi, &a) in gs.iter().zip(&arg) {
            dx[a] += gi;
        }
        vec![Some(Tensor::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
    })
}

/// Mean over the spatial axes: `(n, c, h, w) -> (n, c)`.
pub fn global_avg_pool(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    let (n, c, h, w) = dims4(&xv);
    let hw = (h * w) as f64;
    let xs = xv.as_standard_layout();
    let xd = xs.as_slice().unwrap();
    let y = Array2::from_shape_fn((n, c), |(ni, ci)| {
        let base = (ni * c + ci) * h * w;
        xd[base..base + h * w].iter().sum::<f64>() / hw
    });
    x.tape().custom(y.into_dyn(), &[x], move |g, _| {
        let g = view2(g);
        let dx = Tensor::from_shape_fn(IxDyn(&[n, c, h, w]), |i| g[[i[0], i[1]]] / hw);
        vec![Some(dx)]
    })
}

pub fn add<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    assert_eq!(a.shape(), b.shape(), "add shape mismatch");
    let y = &*a.value() + &*b.value();
    a.tape().custom(y, &[a, b], |g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())])
}

pub fn sub<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
    let y = &*a.value() - &*b.value();
    a.tape().custom(y, &[a, b], |g, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| -g)])
}

/// Column-wise concatenation `[a | b]` of two `(n, _)` matrices.
pub fn concat_cols<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    let (av, bv) = (a.value(), b.value());
    let (av, bv) = (view2(&av), view2(&bv));
    assert_eq!(av.nrows(), bv.nrows(), "concat row mismatch");
    let da = av.ncols();
    let y = ndarray::concatenate(Axis(1), &[av, bv]).unwrap().as_standard_layout().into_owned();
    a.tape().custom(y.into_dyn(), &[a, b], move |g, needs| {
        let g = view2(g);
        vec![
            needs[0].then(|| g.slice(s![.., ..da]).to_owned().into_dyn()),
            needs[1].then(|| g.slice(s![.., da..]).to_owned().into_dyn()),
        ]
    })
}

/// `sum_i w_i * x_i` over scalar terms.
pub fn weighted_sum<'t>(terms: &[(Var<'t>, f64)]) -> Var<'t> {
    assert!(!terms.is_empty());
    let total: f64 = terms.iter().map(|(v, w)| w * v.item()).sum();
    let weights: Vec<f64> = terms.iter().map(|(_, w)| *w).collect();
    let vars: Vec<Var<'t>> = terms.iter().map(|(v, _)| *v).collect();
    terms[0].0.tape().custom(scalar(total), &vars, move |g, needs| {
        weights.iter().zip(needs).map(|(w, n)| n.then(|| g * *w)).collect()
    })
}

/// Mean squared error between `pred: (n, k)` and a constant target.
pub fn mse<'t>(pred: Var<'t>, target: &Array2<f64>) -> Var<'t> {
    let pv = pred.value();
    let diff = &view2(&pv) - target;
    let count = diff.len().max(1) as f64;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / count;
    pred.tape().custom(scalar(value), &[pred], move |g, _| {
        let gs = g[[]];
        vec![Some((&diff * (2.0 * gs / count)).into_dyn())]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::testutil::{check, randn};

    fn sum_sq<'t>(x: Var<'t>) -> Var<'t> {
        let v = x.value();
        let shape = v.shape().to_vec();
        let flat = v.as_standard_layout().into_shape_with_order((1, v.len())).unwrap().into_owned();
        let target = Array2::zeros(flat.raw_dim());
        let n = v.len() as f64;
        // mse on a reshaped view: route through a reshape op.
        let reshaped = x.tape().custom(flat.into_dyn(), &[x], move |g, _| {
            vec![Some(g.clone().into_shape_with_order(IxDyn(&shape)).unwrap())]
        });
        weighted_sum(&[(mse(reshaped, &target), n)])
    }

    #[test]
    fn nan_propagates_through_relu_and_pool() {
        let tape = Tape::new();
        let mut x = randn(&[1, 1, 2, 2], 30);
        x[[0, 0, 1, 1]] = f64::NAN;
        let y = max_pool2d(relu(tape.constant(x)), 2, 2, 0);
        assert!(y.item().is_nan());
    }

    #[test]
    fn linear_gradients() {
        check(vec![randn(&[4, 3], 1), randn(&[5, 3], 2), randn(&[5], 3)], |_, v| sum_sq(linear(v[0], v[1], Some(v[2]))), 1e-6);
    }

    #[test]
    fn conv_gradients() {
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 3, 7)] {
            check(
                vec![randn(&[2, 2, 7, 6], 4), randn(&[3, 2, k, k], 5), randn(&[3], 6)],
                move |_, v| sum_sq(conv2d(v[0], v[1], Some(v[2]), stride, pad)),
                1e-5,
            );
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let x = randn(&[1, 2, 5, 5], 7);
        let w = randn(&[2, 2, 3, 3], 8);
        let tape = Tape::new();
        let y = conv2d(tape.constant(x.clone()), tape.constant(w.clone()), None, 1, 1).value();
        for o in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (yi, xj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                if (0..5).contains(&yi) && (0..5).contains(&xj) {
                                    acc += x[[0, c, yi as usize, xj as usize]] * w[[o, c, ki, kj]];
                                }
                            }
                        }
                    }
                    assert!((y[[0, o, i, j]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batch_norm_gradients() {
        check(
            vec![randn(&[4, 3, 2, 2], 9), randn(&[3], 10), randn(&[3], 11)],
            |_, v| {
                let (y, _) = batch_norm(v[0], v[1], v[2], NormMode::Batch);
                // Weight outputs unevenly so the gradient is not trivially zero.
                let w = randn(&[4, 3, 2, 2], 12);
                let yv = y.value();
                let wy = y.tape().custom(scalar((&*yv * &w).sum()), &[y], move |g, _| vec![Some(&w * g[[]])]);
                wy
            },
            1e-5,
        );
        check(vec![randn(&[6, 4], 13), randn(&[4], 14), randn(&[4], 15)], |_, v| sum_sq(batch_norm(v[0], v[1], v[2], NormMode::Batch).0), 1e-5);
    }

    #[test]
    fn pooling_and_pointwise_gradients() {
        check(vec![randn(&[2, 2, 6, 6], 16)], |_, v| sum_sq(max_pool2d(v[0], 2, 2, 0)), 1e-6);
        check(vec![randn(&[2, 2, 7, 7], 17)], |_, v| sum_sq(max_pool2d(v[0], 3, 2, 1)), 1e-6);
        check(vec![randn(&[2, 3, 4, 4], 18)], |_, v| sum_sq(global_avg_pool(v[0])), 1e-6);
        check(vec![randn(&[3, 4], 19)], |_, v| sum_sq(relu(v[0])), 1e-6);
        check(vec![randn(&[3, 4], 20), randn(&[3, 2], 21)], |_, v| sum_sq(concat_cols(v[0], v[1])), 1e-6);
        check(vec![randn(&[3, 4], 22), randn(&[3, 4], 23)], |_, v| sum_sq(sub(v[0], add(v[1], v[0]))), 1e-6);
    }

    #[test]
    fn running_stats_match_batch_moments() {
        let tape = Tape::new();
        let x = randn(&[8, 2], 24);
        let (_, stats) = batch_norm(tape.constant(x.clone()), tape.constant(Tensor::ones(IxDyn(&[2]))), tape.constant(Tensor::zeros(IxDyn(&[2]))), NormMode::Batch);
        let stats = stats.unwrap();
        let col = x.index_axis(Axis(1), 0);
        let mean = col.mean().unwrap();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        assert!((stats.mean[0] - mean).abs() < 1e-12 && (stats.var[0] - var).abs() < 1e-12);
    }
}
