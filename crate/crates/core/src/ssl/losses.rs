//! The three self-supervised objectives with closed-form gradients.
//!
//! Each loss has a pure form over `Array2` returning the value and the input gradients, and a
//! tape form that records it as a single fused node.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use crate::autograd::{scalar, Var};
use crate::error::{Error, Result};
use crate::ops::view2;

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_OFFDIAG_WEIGHT: f64 = 5e-3;
const NORM_FLOOR: f64 = 1e-12;

/// A loss value with the gradients of both inputs.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad1: Array2<f64>,
    pub grad2: Array2<f64>,
}

fn check_pair(z1: &ArrayView2<f64>, z2: &ArrayView2<f64>) -> Result<()> {
    if z1.dim() != z2.dim() {
        return Err(Error::contract(format!("loss inputs differ in shape: {:?} vs {:?}", z1.dim(), z2.dim())));
    }
    if z1.iter().chain(z2.iter()).any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite loss input"));
    }
    Ok(())
}

/// Row-normalises `z`, returning the unit rows and the original norms.
fn unit_rows(z: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| n <= NORM_FLOOR) {
        return Err(Error::numeric(format!("row {i} has near-zero norm")));
    }
    let u = z / &norms.view().insert_axis(Axis(1));
    Ok((u, norms))
}

/// Pulls a gradient w.r.t. unit rows back through row normalisation.
fn unnormalize_grad(u: &Array2<f64>, norms: &Array1<f64>, du: &Array2<f64>) -> Array2<f64> {
    let mut dz = du.clone();
    for ((mut row, ur), &n) in dz.outer_iter_mut().zip(u.outer_iter()).zip(norms) {
        let proj = ur.dot(&row);
        row.scaled_add(-proj, &ur);
        row /= n;
    }
    dz
}

/// Normalised-temperature cross entropy over the `2N` views with `2N - 2` negatives per anchor,
/// averaged over all anchors.
pub fn ntxent(z1: ArrayView2<f64>, z2: ArrayView2<f64>, temperature: f64) -> Result<LossGrad> {
    check_pair(&z1, &z2)?;
    let n = z1.nrows();
    if n < 2 {
        return Err(Error::contract("nt-xent needs a batch of at least 2 (no negatives otherwise)"));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let z = ndarray::concatenate(Axis(0), &[z1, z2]).unwrap();
    let (u, norms) = unit_rows(&z.view())?;
    let m = 2 * n;
    let sim = u.dot(&u.t()) / temperature;
    let mut value = 0.0;
    // d loss / d sim, row i holds the anchor-i terms.
    let mut g = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        let pos = (i + n) % m;
        let row = sim.row(i);
        let max = (0..m).filter(|&j| j != i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..m).filter(|&j| j != i).map(|j| (row[j] - max).exp()).sum();
        value += max + denom.ln() - row[pos];
        for j in (0..m).filter(|&j| j != i) {
            g[[i, j]] = (row[j] - max).exp() / denom / m as f64;
        }
        g[[i, pos]] -= 1.0 / m as f64;
    }
    value /= m as f64;
    let du = (&g + &g.t()).dot(&u) / temperature;
    let dz = unnormalize_grad(&u, &norms, &du);
    Ok(LossGrad { value, grad1: dz.slice(s![..n, ..]).to_owned(), grad2: dz.slice(s![n.., ..]).to_owned() })
}

/// `mean_i (2 - 2 cos(p_i, z_i))`. `grad2` is zero: the target side is a stop-gradient.
pub fn byol(p: ArrayView2<f64>, z: ArrayView2<f64>) -> Result<LossGrad> {
    check_pair(&p, &z)?;
    let n = p.nrows();
    if n == 0 {
        return Err(Error::contract("empty batch"));
    }
    let (pu, pn) = unit_rows(&p)?;
    let (zu, _) = unit_rows(&z)?;
    let cos = (&pu * &zu).sum_axis(Axis(1));
    let value = cos.iter().map(|c| 2.0 - 2.0 * c).sum::<f64>() / n as f64;
    let du = zu * (-2.0 / n as f64);
    let grad1 = unnormalize_grad(&pu, &pn, &du);
    Ok(LossGrad { value, grad1, grad2: Array2::zeros(z.raw_dim()) })
}

/// Column standardisation with the biased standard deviation.
fn standardize(z: &ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let n = z.nrows() as f64;
    let mean = z.mean_axis(Axis(0)).unwrap();
    let centered = z - &mean;
    let std = centered.map_axis(Axis(0), |c| (c.dot(&c) / n).sqrt());
    if let Some(j) = std.iter().position(|&s| s <= NORM_FLOOR) {
        return Err(Error::numeric(format!("feature {j} has zero variance in the batch")));
    }
    Ok((centered / &std, std))
}

fn unstandardize_grad(a: &Array2<f64>, std: &Array1<f64>, da: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows() as f64;
    let mean_da = da.mean_axis(Axis(0)).unwrap();
    let mean_da_a = (da * a).sum_axis(Axis(0)) / n;
    (da - &mean_da - &(a * &mean_da_a)) / std
}

/// `sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2` for the cross-correlation `C` of the
/// standardised inputs.
pub fn barlow_twins(z1: ArrayView2<f64>, z2: ArrayView2<f64>, offdiag_weight: f64) -> Result<LossGrad> {
    check_pair(&z1, &z2)?;
    if z1.nrows() < 2 {
        return Err(Error::contract("barlow twins needs a batch of at least 2"));
    }
    if !(offdiag_weight > 0.0) {
        return Err(Error::config("off-diagonal weight must be positive"));
    }
    let n = z1.nrows() as f64;
    let (a1, s1) = standardize(&z1)?;
    let (a2, s2) = standardize(&z2)?;
    let c = a1.t().dot(&a2) / n;
    let k = c.nrows();
    let mut value = 0.0;
    let mut gc = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            let v = c[[i, j]];
            if i == j {
                value += (1.0 - v).powi(2);
                gc[[i, j]] = -2.0 * (1.0 - v);
            } else {
                value += offdiag_weight * v * v;
                gc[[i, j]] = 2.0 * offdiag_weight * v;
            }
        }
    }
    let da1 = a2.dot(&gc.t()) / n;
    let da2 = a1.dot(&gc) / n;
    Ok(LossGrad { value, grad1: unstandardize_grad(&a1, &s1, &da1), grad2: unstandardize_grad(&a2, &s2, &da2) })
}

fn record<'t>(a: Var<'t>, b: Var<'t>, lg: LossGrad) -> Var<'t> {
    let LossGrad { value, grad1, grad2 } = lg;
    a.tape().custom(scalar(value), &[a, b], move |g, needs| {
        let gs = g[[]];
        vec![needs[0].then(|| (&grad1 * gs).into_dyn()), needs[1].then(|| (&grad2 * gs).into_dyn())]
    })
}

pub fn ntxent_loss<'t>(z1: Var<'t>, z2: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    let lg = ntxent(view2(&z1.value()), view2(&z2.value()), temperature)?;
    Ok(record(z1, z2, lg))
}

/// Single-direction BYOL loss; no gradient reaches `z_target`.
pub fn byol_loss<'t>(p_online: Var<'t>, z_target: Var<'t>) -> Result<Var<'t>> {
    let lg = byol(view2(&p_online.value()), view2(&z_target.value()))?;
    Ok(record(p_online, z_target.detach(), lg))
}

/// `0.5 * (byol(p1, zt2) + byol(p2, zt1))`.
pub fn byol_symmetric<'t>(p1: Var<'t>, p2: Var<'t>, zt1: Var<'t>, zt2: Var<'t>) -> Result<Var<'t>> {
    let a = byol_loss(p1, zt2)?;
    let b = byol_loss(p2, zt1)?;
    Ok(crate::ops::weighted_sum(&[(a, 0.5), (b, 0.5)]))
}

pub fn barlow_twins_loss<'t>(z1: Var<'t>, z2: Var<'t>, offdiag_weight: f64) -> Result<Var<'t>> {
    let lg = barlow_twins(view2(&z1.value()), view2(&z2.value()), offdiag_weight)?;
    Ok(record(z1, z2, lg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Tape, Tensor};
    use crate::testutil::{check, randn};
    use ndarray::{array, Ix2};
    use proptest::prelude::*;

    fn m(t: Tensor) -> Array2<f64> {
        t.into_dimensionality::<Ix2>().unwrap()
    }

    /// Direct transcription of the cross entropy, one anchor at a time.
    fn ntxent_oracle(z1: &Array2<f64>, z2: &Array2<f64>, tau: f64) -> f64 {
        let z: Vec<Vec<f64>> = z1.outer_iter().chain(z2.outer_iter()).map(|r| r.to_vec()).collect();
        let norm = |v: &Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b));
        let m = z.len();
        let n = m / 2;
        let mut total = 0.0;
        for i in 0..m {
            let pos = (i + n) % m;
            let denom: f64 = (0..m).filter(|&j| j != i).map(|j| (cos(&z[i], &z[j]) / tau).exp()).sum();
            total += -((cos(&z[i], &z[pos]) / tau).exp() / denom).ln();
        }
        total / m as f64
    }

    #[test]
    fn ntxent_two_orthogonal_pairs() {
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        let lg = ntxent(z.view(), z.view(), 1.0).unwrap();
        // Each anchor: one positive at similarity 1 and two negatives at similarity 0.
        let expected = (2.0 + std::f64::consts::E).ln() - 1.0;
        assert!((lg.value - expected).abs() < 1e-12);
    }

    #[test]
    fn ntxent_matches_oracle() {
        let z1 = m(randn(&[5, 4], 1));
        let z2 = m(randn(&[5, 4], 2));
        for tau in [0.1, 0.5, 2.0] {
            let v = ntxent(z1.view(), z2.view(), tau).unwrap().value;
            assert!((v - ntxent_oracle(&z1, &z2, tau)).abs() < 1e-12);
        }
    }

    #[test]
    fn ntxent_rejects_single_pair() {
        let z = array![[1.0, 0.0]];
        assert!(matches!(ntxent(z.view(), z.view(), 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn ntxent_gradients() {
        check(vec![randn(&[4, 8], 3), randn(&[4, 8], 4)], |_, v| ntxent_loss(v[0], v[1], 0.5).unwrap(), 1e-5);
    }

    #[test]
    fn byol_extremes() {
        let z = m(randn(&[4, 6], 5));
        assert!(byol(z.view(), z.view()).unwrap().value.abs() < 1e-12);
        let neg = -&z;
        assert!((byol(neg.view(), z.view()).unwrap().value - 4.0).abs() < 1e-12);
    }

    #[test]
    fn byol_zero_row_is_numeric_error() {
        let mut p = m(randn(&[3, 4], 6));
        p.row_mut(1).fill(0.0);
        let z = m(randn(&[3, 4], 7));
        assert!(matches!(byol(p.view(), z.view()), Err(Error::Numeric(_))));
    }

    #[test]
    fn byol_gradients_and_stop_gradient() {
        let z = randn(&[4, 5], 9);
        check(vec![randn(&[4, 5], 8)], |t, v| byol_loss(v[0], t.constant(z.clone())).unwrap(), 1e-5);
        let tape = Tape::new();
        let p = tape.leaf(randn(&[4, 5], 10));
        let z = tape.leaf(randn(&[4, 5], 11));
        let loss = byol_loss(p, z).unwrap();
        let grads = tape.backward(loss);
        assert!(grads.get(z).is_none());
        assert!(grads.get(p).is_some());
    }

    #[test]
    fn barlow_whitened_batch_is_zero() {
        // Columns of a centred orthogonal matrix scaled by sqrt(n) have identity cross-correlation.
        let n = 8;
        let k = 3;
        let raw = m(randn(&[n, k], 12));
        let mut q: Vec<Array1<f64>> = Vec::new();
        let ones = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
        for j in 0..k {
            let mut v = raw.column(j).to_owned();
            v = &v - &(&ones * ones.dot(&v));
            for b in &q {
                v = &v - &(b * b.dot(&v));
            }
            let nv = v.dot(&v).sqrt();
            q.push(v / nv);
        }
        let z = Array2::from_shape_fn((n, k), |(i, j)| q[j][i] * (n as f64).sqrt());
        assert!(barlow_twins(z.view(), z.view(), DEFAULT_OFFDIAG_WEIGHT).unwrap().value <= 1e-10);
    }

    #[test]
    fn barlow_single_feature() {
        let z = array![[1.0], [2.0], [4.0]];
        assert!(barlow_twins(z.view(), z.view(), DEFAULT_OFFDIAG_WEIGHT).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn barlow_constant_feature_is_numeric_error() {
        let mut z = m(randn(&[4, 3], 13));
        z.column_mut(2).fill(1.5);
        let z2 = m(randn(&[4, 3], 14));
        assert!(matches!(barlow_twins(z.view(), z2.view(), 5e-3), Err(Error::Numeric(_))));
    }

    #[test]
    fn barlow_gradients() {
        check(vec![randn(&[8, 4], 15), randn(&[8, 4], 16)], |_, v| barlow_twins_loss(v[0], v[1], 5e-3).unwrap(), 1e-5);
    }

    fn permute_rows(z: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn(z.dim(), |(i, j)| z[[perm[i], j]])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn losses_are_permutation_invariant_and_finite(seed in 0u64..10_000, shift in 1usize..5) {
            let n = 6;
            let z1 = m(randn(&[n, 5], seed));
            let z2 = m(randn(&[n, 5], seed + 77_777));
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let (p1, p2) = (permute_rows(&z1, &perm), permute_rows(&z2, &perm));
            let pairs: [(f64, f64); 3] = [
                (ntxent(z1.view(), z2.view(), 0.5).unwrap().value, ntxent(p1.view(), p2.view(), 0.5).unwrap().value),
                (byol(z1.view(), z2.view()).unwrap().value, byol(p1.view(), p2.view()).unwrap().value),
                (barlow_twins(z1.view(), z2.view(), 5e-3).unwrap().value, barlow_twins(p1.view(), p2.view(), 5e-3).unwrap().value),
            ];
            for (a, b) in pairs {
                prop_assert!(a.is_finite() && a >= 0.0);
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn symmetric_losses_swap(seed in 0u64..10_000) {
            let z1 = m(randn(&[6, 4], seed));
            let z2 = m(randn(&[6, 4], seed + 1));
            let a = ntxent(z1.view(), z2.view(), 0.5).unwrap().value;
            let b = ntxent(z2.view(), z1.view(), 0.5).unwrap().value;
            prop_assert!((a - b).abs() < 1e-6);
            let a = barlow_twins(z1.view(), z2.view(), 5e-3).unwrap().value;
            let b = barlow_twins(z2.view(), z1.view(), 5e-3).unwrap().value;
            prop_assert!((a - b).abs() < 1e-6);
        }

        #[test]
        fn byol_scale_invariant(seed in 0u64..10_000, c in prop::sample::select(vec![0.1, 10.0])) {
            let p = m(randn(&[5, 4], seed));
            let z = m(randn(&[5, 4], seed + 3));
            let base = byol(p.view(), z.view()).unwrap().value;
            let ps = &p * c;
            let zs = &z * c;
            prop_assert!((byol(ps.view(), z.view()).unwrap().value - base).abs() < 1e-6);
            prop_assert!((byol(p.view(), zs.view()).unwrap().value - base).abs() < 1e-6);
            prop_assert!((0.0..=4.0).contains(&base));
        }
    }
}
