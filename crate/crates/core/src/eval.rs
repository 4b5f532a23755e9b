//! Linear evaluation: frozen features, an L2-regularised multinomial logistic regression
//! fitted by L-BFGS, and Student-t confidence intervals over trials.

use std::collections::VecDeque;

use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Dataset, DatasetId};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, purpose};
use crate::ssl::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// L2 strength on the weights (biases are not penalised).
    #[serde(default = "d_reg")]
    pub reg: f64,
    #[serde(default = "d_iter")]
    pub max_iter: usize,
    #[serde(default = "d_tol")]
    pub tol: f64,
    #[serde(default = "d_trials")]
    pub trials: usize,
    /// Fraction of the probe training set each trial fits on.
    #[serde(default = "d_subsample")]
    pub subsample: f64,
    /// Items of the evaluation split kept for testing.
    #[serde(default)]
    pub eval_limit: Option<usize>,
    #[serde(default)]
    pub train_limit: Option<usize>,
}

fn d_reg() -> f64 {
    1.0
}
fn d_iter() -> usize {
    500
}
fn d_tol() -> f64 {
    1e-5
}
fn d_trials() -> usize {
    5
}
fn d_subsample() -> f64 {
    0.8
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { reg: d_reg(), max_iter: d_iter(), tol: d_tol(), trials: d_trials(), subsample: d_subsample(), eval_limit: None, train_limit: None }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.reg >= 0.0) || !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::config("probe needs reg >= 0, tol > 0 and at least one iteration"));
        }
        if self.trials == 0 || !(self.subsample > 0.0 && self.subsample <= 1.0) {
            return Err(Error::config("probe needs >= 1 trial and subsample in (0, 1]"));
        }
        Ok(())
    }
}

/// Frozen-encoder features of every item, in dataset order.
pub fn extract_features(model: &Model, data: &Dataset, chunk: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    if data.is_empty() {
        return Err(Error::contract("cannot extract features of an empty split"));
    }
    let mut parts = Vec::new();
    for start in (0..data.len()).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk.max(1)).min(data.len())).collect();
        parts.push(model.encode(&data.batch(&idx).data, chunk)?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    Ok((ndarray::concatenate(Axis(0), &views).expect("equal widths"), data.labels.clone()))
}

/// Per-dimension standardisation fitted on training features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

impl Standardizer {
    pub fn fit(x: &Array2<f64>) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let var = x.var_axis(Axis(0), 0.0);
        let scale = var.mapv(|v| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 });
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.mean) * &self.scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// `d x classes`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl LinearProbe {
    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        self.logits(x)
            .outer_iter()
            .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0)
            .collect()
    }

    pub fn accuracy(&self, x: &Array2<f64>, y: &[usize]) -> f64 {
        let pred = self.predict(x);
        pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len().max(1) as f64
    }
}

/// `(1/n) * (sum_i CE_i + reg/2 * |W|^2)` and its gradient, packed as `[W (row-major), b]`.
struct Objective<'a> {
    x: &'a Array2<f64>,
    y: &'a [usize],
    classes: usize,
    reg: f64,
}

impl Objective<'_> {
    fn unpack(&self, theta: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
        let d = self.x.ncols();
        let w = theta.slice(ndarray::s![..d * self.classes]).to_owned().into_shape_with_order((d, self.classes)).unwrap();
        let b = theta.slice(ndarray::s![d * self.classes..]).to_owned();
        (w, b)
    }

    fn eval(&self, theta: &Array1<f64>) -> (f64, Array1<f64>) {
        let n = self.x.nrows() as f64;
        let (w, b) = self.unpack(theta);
        let mut logits = self.x.dot(&w) + &b;
        let mut loss = 0.0;
        for (mut row, &label) in logits.outer_iter_mut().zip(self.y) {
            let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            loss += z.ln() - (row[label].ln());
            row /= z;
            row[label] -= 1.0;
        }
        let gw = (self.x.t().dot(&logits) + &w * self.reg) / n;
        let gb = logits.sum_axis(Axis(0)) / n;
        loss = (loss + 0.5 * self.reg * w.iter().map(|v| v * v).sum::<f64>()) / n;
        let mut g = Array1::zeros(theta.len());
        g.slice_mut(ndarray::s![..gw.len()]).assign(&Array1::from_iter(gw.iter().copied()));
        g.slice_mut(ndarray::s![gw.len()..]).assign(&gb);
        (loss, g)
    }
}

/// Fits the probe by L-BFGS (memory 10, Armijo backtracking) from a zero start.
pub fn fit_linear_probe(x: &Array2<f64>, y: &[usize], classes: usize, reg: f64, max_iter: usize, tol: f64) -> Result<LinearProbe> {
    if classes < 2 {
        return Err(Error::contract("a probe needs at least two classes"));
    }
    if x.nrows() != y.len() || x.nrows() == 0 {
        return Err(Error::contract("features and labels disagree in length or are empty"));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!("label {bad} outside {classes} classes")));
    }
    let obj = Objective { x, y, classes, reg };
    let dim = x.ncols() * classes + classes;
    let mut theta = Array1::zeros(dim);
    let (mut f, mut g) = obj.eval(&theta);
    let mut history: VecDeque<(Array1<f64>, Array1<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut gnorm = g.dot(&g).sqrt();
    while gnorm > tol && iterations < max_iter {
        iterations += 1;
        // Two-loop recursion for the quasi-Newton direction.
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, yv, rho) in history.iter().rev() {
            let a = rho * s.dot(&q);
            q.scaled_add(-a, yv);
            alphas.push(a);
        }
        let gamma = history.back().map_or(1.0 / gnorm.max(1.0), |(s, yv, _)| s.dot(yv) / yv.dot(yv));
        q *= gamma;
        for ((s, yv, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let beta = rho * yv.dot(&q);
            q.scaled_add(a - beta, s);
        }
        let mut dir = -q;
        let mut slope = g.dot(&dir);
        if slope >= 0.0 {
            history.clear();
            dir = -&g;
            slope = -gnorm * gnorm;
        }
        let mut step = 1.0;
        let (theta_new, f_new, g_new) = loop {
            let cand = &theta + &(&dir * step);
            let (fc, gc) = obj.eval(&cand);
            if fc <= f + 1e-4 * step * slope || step < 1e-12 {
                break (cand, fc, gc);
            }
            step *= 0.5;
        };
        let s = &theta_new - &theta;
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            if history.len() == 10 {
                history.pop_front();
            }
            history.push_back((s, yv, 1.0 / sy));
        }
        let stalled = (f - f_new).abs() <= f64::EPSILON * f.abs().max(1.0) && step < 1e-12;
        theta = theta_new;
        f = f_new;
        g = g_new;
        gnorm = g.dot(&g).sqrt();
        if stalled {
            break;
        }
    }
    let (weights, bias) = obj.unpack(&theta);
    Ok(LinearProbe { weights, bias, converged: gnorm <= tol, iterations, grad_norm: gnorm })
}

/// Two-sided 95% Student-t interval half-width over trial accuracies.
pub fn t_interval(values: &[f64]) -> (f64, f64, bool) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    if n < 2 {
        return (mean, 0.0, true);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive dof").inverse_cdf(0.975);
    (mean, t * (var / n as f64).sqrt(), false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub dataset: DatasetId,
    pub checkpoint: String,
    pub epoch: usize,
    pub trial_seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub ci_half_width: f64,
    /// Fewer than two trials: the interval is reported as zero.
    pub degenerate_ci: bool,
    pub trials: usize,
    pub converged: bool,
}

/// One record of an evaluation: a result, or a dataset that could not be evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvalRecord {
    Probe(ProbeResult),
    Skipped { dataset: DatasetId, epoch: usize, reason: String },
}

/// Whether item `id` belongs to the training subsample of `trial`; keyed by id so that the
/// choice does not depend on row order.
fn in_subsample(seed: u64, trial: u64, id: u64, fraction: f64) -> bool {
    fraction >= 1.0 || (derive_seed(seed, &[purpose::PROBE, trial, id]) as f64 / u64::MAX as f64) < fraction
}

/// Fits and scores the probe over `cfg.trials` trials on precomputed features.
pub fn probe_trials(
    train: (&Array2<f64>, &[usize], &[u64]),
    test: (&Array2<f64>, &[usize]),
    classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<(Vec<u64>, Vec<f64>, bool)> {
    cfg.validate()?;
    let (xtr, ytr, ids) = train;
    let mut seeds = Vec::new();
    let mut accs = Vec::new();
    let mut converged = true;
    for trial in 0..cfg.trials as u64 {
        let trial_seed = derive_seed(seed, &[purpose::PROBE, trial]);
        let keep: Vec<usize> = (0..xtr.nrows()).filter(|&i| in_subsample(seed, trial, ids[i], cfg.subsample)).collect();
        if keep.is_empty() {
            return Err(Error::contract("probe subsample is empty"));
        }
        let x = xtr.select(Axis(0), &keep);
        let y: Vec<usize> = keep.iter().map(|&i| ytr[i]).collect();
        let std = Standardizer::fit(&x);
        let probe = fit_linear_probe(&std.apply(&x), &y, classes, cfg.reg, cfg.max_iter, cfg.tol)?;
        converged &= probe.converged;
        seeds.push(trial_seed);
        accs.push(probe.accuracy(&std.apply(test.0), test.1));
    }
    Ok((seeds, accs, converged))
}

/// Probe evaluation of a frozen model on one dataset's train/eval splits.
pub fn evaluate(model: &Model, train: &Dataset, test: &Dataset, cfg: &ProbeConfig, seed: u64, checkpoint: &str, epoch: usize) -> Result<ProbeResult> {
    let (xtr, ytr) = extract_features(model, train, 256)?;
    let (xte, yte) = extract_features(model, test, 256)?;
    let (trial_seeds, accuracies, converged) = probe_trials((&xtr, &ytr, &train.ids), (&xte, &yte), train.num_classes, cfg, seed)?;
    let (mean, ci_half_width, degenerate_ci) = t_interval(&accuracies);
    Ok(ProbeResult {
        dataset: train.id,
        checkpoint: checkpoint.to_string(),
        epoch,
        trials: accuracies.len(),
        trial_seeds,
        accuracies,
        mean,
        ci_half_width,
        degenerate_ci,
        converged,
    })
}

/// Element-wise equality of two weight matrices' argmax decisions on `x`.
pub fn same_decisions(a: &LinearProbe, b: &LinearProbe, xa: &Array2<f64>, xb: &Array2<f64>) -> bool {
    Zip::from(a.logits(xa).rows()).and(b.logits(xb).rows()).all(|ra, rb| {
        let arg = |r: ndarray::ArrayView1<f64>| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best }).0;
        arg(ra) == arg(rb)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::testutil::randn;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn blobs(n: usize, seed: u64, sep: f64) -> (Array2<f64>, Vec<usize>) {
        let noise = randn(&[n, 2], seed).into_dimensionality::<ndarray::Ix2>().unwrap();
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| noise[[i, j]] * 0.3 + if j == 0 { sep * (2.0 * y[i] as f64 - 1.0) } else { 0.0 });
        (x, y)
    }

    #[test]
    fn separable_toy_is_fit_exactly() {
        let (x, y) = blobs(60, 1, 2.0);
        let p = fit_linear_probe(&x, &y, 2, 1e-3, 500, 1e-5).unwrap();
        assert_eq!(p.accuracy(&x, &y), 1.0);
        assert!(p.converged, "grad norm {}", p.grad_norm);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = randn(&[7, 3], 2).into_dimensionality().unwrap();
        let y = vec![0, 1, 2, 1, 0, 2, 2];
        let obj = Objective { x: &x, y: &y, classes: 3, reg: 0.7 };
        let theta = randn(&[12], 3).into_dimensionality().unwrap();
        let (_, g) = obj.eval(&theta);
        for k in 0..12 {
            let mut p = theta.clone();
            let mut m = theta.clone();
            p[k] += 1e-6;
            m[k] -= 1e-6;
            let fd = (obj.eval(&p).0 - obj.eval(&m).0) / 2e-6;
            assert!((fd - g[k]).abs() < 1e-7, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn scaled_features_keep_decisions_after_standardizing() {
        let (x, y) = blobs(40, 4, 0.7);
        let x2 = &x * 2.0;
        let (sa, sb) = (Standardizer::fit(&x), Standardizer::fit(&x2));
        let a = fit_linear_probe(&sa.apply(&x), &y, 2, 1.0, 500, 1e-8).unwrap();
        let b = fit_linear_probe(&sb.apply(&x2), &y, 2, 1.0, 500, 1e-8).unwrap();
        let test: Array2<f64> = randn(&[50, 2], 5).into_dimensionality().unwrap();
        assert!(same_decisions(&a, &b, &sa.apply(&test), &sb.apply(&(&test * 2.0))));
    }

    #[test]
    fn shuffled_labels_give_chance() {
        let mut rng = stream(6, &[]);
        let n = 600;
        let x: Array2<f64> = randn(&[n, 8], 7).into_dimensionality().unwrap();
        let mut y: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        y.shuffle(&mut rng);
        let p = fit_linear_probe(&x.slice(ndarray::s![..400, ..]).to_owned(), &y[..400], 4, 1.0, 500, 1e-5).unwrap();
        let acc = p.accuracy(&x.slice(ndarray::s![400.., ..]).to_owned(), &y[400..]);
        let sigma = (0.25f64 * 0.75 / 200.0).sqrt();
        assert!((acc - 0.25).abs() < 3.0 * sigma, "accuracy {acc}");
    }

    #[test]
    fn row_order_does_not_matter() {
        let (x, y) = blobs(80, 8, 0.5);
        let ids: Vec<u64> = (0..80).collect();
        let cfg = ProbeConfig { trials: 3, ..Default::default() };
        let (_, a, _) = probe_trials((&x, &y, &ids), (&x, &y), 2, &cfg, 9).unwrap();
        let perm: Vec<usize> = (0..80).rev().collect();
        let xp = x.select(Axis(0), &perm);
        let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let idp: Vec<u64> = perm.iter().map(|&i| ids[i]).collect();
        let (_, b, _) = probe_trials((&xp, &yp, &idp), (&x, &y), 2, &cfg, 9).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-6);
        }
    }

    #[test]
    fn intervals() {
        let (m, h, deg) = t_interval(&[0.7]);
        assert_eq!((m, h, deg), (0.7, 0.0, true));
        let (_, h, deg) = t_interval(&[0.6; 5]);
        assert_eq!((h, deg), (0.0, false));
        let (m, h, _) = t_interval(&[0.5, 0.52, 0.54, 0.51, 0.53]);
        assert!((m - 0.52).abs() < 1e-15);
        // t_{0.975, 4} = 2.7764451051977987; sample sd = sqrt(0.00025).
        assert!((h - 2.7764451051977987 * (0.00025f64 / 5.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let x = Array2::zeros((3, 2));
        assert!(matches!(fit_linear_probe(&x, &[0, 0, 0], 1, 1.0, 10, 1e-5), Err(Error::Contract(_))));
        assert!(matches!(fit_linear_probe(&x, &[0, 5, 0], 2, 1.0, 10, 1e-5), Err(Error::Contract(_))));
    }

    #[test]
    fn evaluation_leaves_the_encoder_untouched() {
        use crate::data::{load_dataset, LoadOptions, Split};
        use crate::ssl::{EncoderSpec, Method, SslConfig};
        let model = Model::new(&SslConfig::new(Method::SimClr, EncoderSpec::conv_net(&[8, 16])), None, 3).unwrap();
        let opts = |limit| LoadOptions { resolution: 16, limit: Some(limit), seed: 0 };
        let train = load_dataset(DatasetId::Synthetic, None, Split::Train, &opts(100)).unwrap();
        let test = load_dataset(DatasetId::Synthetic, None, Split::Eval, &opts(60)).unwrap();
        let before = model.state.clone();
        let (f1, labels) = extract_features(&model, &train, 32).unwrap();
        assert_eq!(f1.dim(), (100, 16));
        assert_eq!(labels, train.labels);
        let (f2, _) = extract_features(&model, &train, 7).unwrap();
        assert_eq!(f1, f2);
        let cfg = ProbeConfig { trials: 3, ..Default::default() };
        let r = evaluate(&model, &train, &test, &cfg, 1, "init", 0).unwrap();
        assert_eq!(model.state, before);
        assert_eq!(r.mean, r.accuracies.iter().sum::<f64>() / 3.0);
        assert!(r.accuracies.iter().all(|a| (0.0..=1.0).contains(a)) && r.ci_half_width >= 0.0);
        assert!(matches!(extract_features(&model, &train.subset(&[]), 8), Err(Error::Contract(_))));
    }
}
