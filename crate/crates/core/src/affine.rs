//! Affine-transformation prediction: warp a view, aggregate the two representations into a
//! transition vector, regress the transformation parameters, and mix the regression error
//! into the self-supervised objective.

use ndarray::{Array2, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::batch::ImageBatch;
use crate::error::{Error, Result};
use crate::geometry::{
    bounded_sampling_matrix, normalize_params, resample_into, sample_affine_params, warp_each, AffineMatrix, AffineParams,
    ComponentMask, ParamRanges,
};
use crate::nn::{Ctx, HeadSpec, Mlp};
use crate::ops;
use crate::ssl::{BranchSource, Method, RegressorSpec, RepresentationBundle};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `h - ha`.
    #[default]
    #[serde(alias = "diff")]
    Difference,
    /// `[h | ha]`.
    #[serde(alias = "concat")]
    Concatenation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewCount {
    /// Only the first view gets an affine counterpart.
    #[default]
    One,
    Both,
}

impl ViewCount {
    pub fn count(self) -> usize {
        match self {
            ViewCount::One => 1,
            ViewCount::Both => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineModuleConfig {
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default)]
    pub views: ViewCount,
    #[serde(default)]
    pub source: BranchSource,
    #[serde(default = "all_components")]
    pub components: ComponentMask,
    #[serde(default = "one")]
    pub beta1: f64,
    /// Unset means the per-method default: 10 for Barlow Twins, 1 otherwise.
    #[serde(default)]
    pub beta2: Option<f64>,
    #[serde(default = "yes")]
    pub normalize_targets: bool,
    /// Crop the maximal inscribed rectangle of the warped footprint and resize it back.
    #[serde(default)]
    pub bounded: bool,
    #[serde(default)]
    pub ranges: ParamRanges,
    /// Hidden width and batch norm of the regressor; its output width follows the mask.
    #[serde(default = "default_regressor_hidden")]
    pub regressor_hidden: usize,
    #[serde(default = "yes")]
    pub regressor_batch_norm: bool,
}

fn all_components() -> ComponentMask {
    ComponentMask::ALL
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

fn default_regressor_hidden() -> usize {
    512
}

impl Default for AffineModuleConfig {
    fn default() -> Self {
        AffineModuleConfig {
            aggregation: Aggregation::Difference,
            views: ViewCount::One,
            source: BranchSource::Encoder,
            components: ComponentMask::ALL,
            beta1: 1.0,
            beta2: None,
            normalize_targets: true,
            bounded: false,
            ranges: ParamRanges::PAPER,
            regressor_hidden: default_regressor_hidden(),
            regressor_batch_norm: true,
        }
    }
}

impl AffineModuleConfig {
    pub fn beta2(&self, method: Method) -> f64 {
        self.beta2.unwrap_or(match method {
            Method::BarlowTwins => 10.0,
            _ => 1.0,
        })
    }

    pub fn validate(&self, method: Method) -> Result<()> {
        let (b1, b2) = (self.beta1, self.beta2(method));
        if !(b1 >= 0.0 && b1.is_finite() && b2 >= 0.0 && b2.is_finite()) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if b1 == 0.0 && b2 == 0.0 {
            return Err(Error::config("beta1 and beta2 cannot both be zero"));
        }
        if self.regressor_hidden == 0 {
            return Err(Error::config("regressor hidden width must be positive"));
        }
        self.components.validate()?;
        self.ranges.validate()
    }

    /// Width of the representation fed to the branch.
    pub fn branch_dim(&self, encoder_dim: usize, projector_dim: usize) -> usize {
        match self.source {
            BranchSource::Encoder => encoder_dim,
            BranchSource::Projector => projector_dim,
        }
    }

    pub fn regressor_spec(&self, encoder_dim: usize, projector_dim: usize) -> RegressorSpec {
        let d = self.branch_dim(encoder_dim, projector_dim);
        let in_dim = match self.aggregation {
            Aggregation::Difference => d,
            Aggregation::Concatenation => 2 * d,
        };
        RegressorSpec {
            in_dim,
            head: HeadSpec { hidden: self.regressor_hidden, output: self.components.active_count(), batch_norm: self.regressor_batch_norm },
        }
    }
}

/// Aggregated representation pair, `(n, d)` for difference or `(n, 2d)` for concatenation.
#[derive(Clone, Copy, Debug)]
pub struct TransitionVector<'t> {
    pub values: Var<'t>,
    pub mode: Aggregation,
}

pub fn aggregate<'t>(h: Var<'t>, ha: Var<'t>, mode: Aggregation) -> Result<TransitionVector<'t>> {
    let (sh, sa) = (h.shape(), ha.shape());
    if sh.len() != 2 || sh != sa {
        return Err(Error::contract(format!("cannot aggregate {sh:?} with {sa:?}")));
    }
    let values = match mode {
        Aggregation::Difference => ops::sub(h, ha),
        Aggregation::Concatenation => ops::concat_cols(h, ha),
    };
    Ok(TransitionVector { values, mode })
}

/// Regressor output: one column per active parameter, in normalised target space when targets
/// are normalised.
pub fn predict_phi<'t>(ctx: &mut Ctx<'_, 't>, regressor: &Mlp, t: &TransitionVector<'t>) -> Result<Var<'t>> {
    let width = t.values.shape()[1];
    if width != regressor.in_dim() {
        return Err(Error::contract(format!("transition vector width {width} but regressor expects {}", regressor.in_dim())));
    }
    Ok(regressor.forward(ctx, t.values))
}

/// Regression targets for the active parameters, `(n, active)`.
pub fn encode_targets(params: &[AffineParams], cfg: &AffineModuleConfig) -> Result<Array2<f64>> {
    let active = cfg.components.active_indices();
    let mut out = Array2::zeros((params.len(), active.len()));
    for (i, p) in params.iter().enumerate() {
        let full = if cfg.normalize_targets { normalize_params(p, &cfg.ranges)? } else { p.to_array() };
        for (j, &k) in active.iter().enumerate() {
            out[[i, j]] = full[k];
        }
    }
    Ok(out)
}

/// Mean over batch and components of the squared error.
pub fn affine_mse(target: &Array2<f64>, pred: &Array2<f64>) -> Result<f64> {
    if target.dim() != pred.dim() {
        return Err(Error::contract(format!("target {:?} vs prediction {:?}", target.dim(), pred.dim())));
    }
    if target.iter().chain(pred.iter()).any(|v| v.is_nan()) {
        return Err(Error::numeric("NaN in affine regression"));
    }
    let n = target.len().max(1) as f64;
    Ok(target.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

pub fn affine_loss<'t>(pred: Var<'t>, target: &Array2<f64>) -> Result<Var<'t>> {
    let shape = pred.shape();
    if shape != [target.nrows(), target.ncols()] {
        return Err(Error::contract(format!("prediction {shape:?} vs target {:?}", target.dim())));
    }
    if target.iter().any(|v| v.is_nan()) || pred.value().iter().any(|v| v.is_nan()) {
        return Err(Error::numeric("NaN in affine regression"));
    }
    Ok(ops::mse(pred, target))
}

/// `beta1 * l_ssl + beta2 * l_affine`, with `l_affine` the mean of the per-view terms.
pub fn combined_value(l_ssl: f64, affine: &[f64], beta1: f64, beta2: f64) -> f64 {
    if affine.is_empty() {
        return beta1 * l_ssl;
    }
    beta1 * l_ssl + beta2 * affine.iter().sum::<f64>() / affine.len() as f64
}

pub fn combined_loss<'t>(l_ssl: Var<'t>, affine: &[Var<'t>], beta1: f64, beta2: f64) -> Var<'t> {
    let mut terms = vec![(l_ssl, beta1)];
    let w = beta2 / affine.len().max(1) as f64;
    terms.extend(affine.iter().map(|a| (*a, w)));
    ops::weighted_sum(&terms)
}

/// One affine-warped view with its parameters and regression targets.
#[derive(Clone, Debug)]
pub struct AffineView {
    pub images: ImageBatch,
    pub params: Vec<AffineParams>,
    pub targets: Array2<f64>,
}

/// Warps every image of `x` with its own freshly sampled transformation.
pub fn make_affine_view<R: Rng + ?Sized>(x: &ImageBatch, cfg: &AffineModuleConfig, rng: &mut R) -> Result<AffineView> {
    let (w, h) = (x.width(), x.height());
    let params = (0..x.len()).map(|_| sample_affine_params(rng, cfg.components, &cfg.ranges)).collect::<Result<Vec<_>>>()?;
    let matrices: Vec<AffineMatrix> = params.iter().map(|p| AffineMatrix::build(p, w, h)).collect();
    let images = if cfg.bounded {
        let mut out = ImageBatch { data: Array4::zeros(x.data.raw_dim()), ids: x.ids.clone() };
        for (i, m) in matrices.iter().enumerate() {
            let (sampler, _) = bounded_sampling_matrix(m, w, h)?;
            resample_into(x.image(i), &sampler, out.image_mut(i));
        }
        out
    } else {
        warp_each(x, &matrices)?
    };
    let targets = encode_targets(&params, cfg)?;
    Ok(AffineView { images, params, targets })
}

/// Regression loss of one view from an already computed representation bundle.
pub fn branch_loss<'t>(
    ctx: &mut Ctx<'_, 't>,
    regressor: &Mlp,
    bundle: &RepresentationBundle<'t>,
    view: usize,
    targets: &Array2<f64>,
    cfg: &AffineModuleConfig,
) -> Result<Var<'t>> {
    let (r, ra) = bundle
        .branch_pair(view, cfg.source)
        .ok_or_else(|| Error::contract(format!("bundle has no affine representation for view {view}")))?;
    let t = aggregate(r, ra, cfg.aggregation)?;
    let pred = predict_phi(ctx, regressor, &t)?;
    affine_loss(pred, targets)
}

/// The complete branch for a single view: warp, encode both, aggregate, regress.
pub fn affine_branch<'t, R: Rng + ?Sized>(
    ctx: &mut Ctx<'_, 't>,
    nets: &crate::ssl::Networks,
    x: &ImageBatch,
    cfg: &AffineModuleConfig,
    rng: &mut R,
) -> Result<(Var<'t>, Vec<AffineParams>)> {
    let regressor = nets.regressor.as_ref().ok_or_else(|| Error::contract("model has no affine regressor"))?;
    let view = make_affine_view(x, cfg, rng)?;
    let tape = ctx.tape;
    let mut r = nets.encoder.forward(ctx, tape.constant(x.data.clone().into_dyn()));
    let mut ra = nets.encoder.forward(ctx, tape.constant(view.images.data.into_dyn()));
    if cfg.source == BranchSource::Projector {
        r = nets.projector.forward(ctx, r);
        ra = nets.projector.forward(ctx, ra);
    }
    let t = aggregate(r, ra, cfg.aggregation)?;
    let pred = predict_phi(ctx, regressor, &t)?;
    Ok((affine_loss(pred, &view.targets)?, view.params))
}
