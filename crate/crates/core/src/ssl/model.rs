use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array4, Axis, Ix2};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Ctx, HeadSpec, Init, Mlp, NetState, ParamStore};
use crate::rng::{purpose, stream};
use crate::ssl::encoder::{Encoder, EncoderSpec};
use crate::ssl::losses;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "simclr")]
    SimClr,
    #[serde(rename = "byol")]
    Byol,
    #[serde(rename = "barlow_twins")]
    BarlowTwins,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::SimClr, Method::Byol, Method::BarlowTwins];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::SimClr => "simclr",
            Method::Byol => "byol",
            Method::BarlowTwins => "barlow_twins",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown method {s:?}; expected simclr, byol or barlow_twins")))
    }
}

/// Which representation feeds the affine branch: encoder output `h` or projector output `z`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchSource {
    #[default]
    #[serde(alias = "f")]
    Encoder,
    #[serde(alias = "g")]
    Projector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SslConfig {
    pub method: Method,
    pub encoder: EncoderSpec,
    #[serde(default = "default_head")]
    pub projector: HeadSpec,
    /// BYOL only.
    #[serde(default = "default_head")]
    pub predictor: HeadSpec,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_offdiag")]
    pub offdiag_weight: f64,
    #[serde(default = "default_tau")]
    pub ema_tau: f64,
}

pub fn default_head() -> HeadSpec {
    HeadSpec { hidden: 512, output: 128, batch_norm: true }
}

fn default_temperature() -> f64 {
    losses::DEFAULT_TEMPERATURE
}

fn default_offdiag() -> f64 {
    losses::DEFAULT_OFFDIAG_WEIGHT
}

fn default_tau() -> f64 {
    0.99
}

impl SslConfig {
    pub fn new(method: Method, encoder: EncoderSpec) -> Self {
        SslConfig {
            method,
            encoder,
            projector: default_head(),
            predictor: default_head(),
            temperature: default_temperature(),
            offdiag_weight: default_offdiag(),
            ema_tau: default_tau(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.projector.validate("projector")?;
        if self.method == Method::Byol {
            self.predictor.validate("predictor")?;
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(self.offdiag_weight > 0.0) {
            return Err(Error::config("off-diagonal weight must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_tau) {
            return Err(Error::config("ema tau must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Input width and head shape of the affine regressor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RegressorSpec {
    pub in_dim: usize,
    pub head: HeadSpec,
}

#[derive(Clone, Debug)]
pub struct Networks {
    pub encoder: Encoder,
    pub projector: Mlp,
    pub predictor: Option<Mlp>,
    pub regressor: Option<Mlp>,
}

/// Exponential-moving-average copy of the online encoder and projector.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub state: NetState,
    pub tau: f64,
}

impl EmaState {
    pub fn new(state: NetState, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::config("ema tau must lie in [0, 1]"));
        }
        Ok(EmaState { state, tau })
    }

    /// `target <- tau * target + (1 - tau) * online`, matching parameters by position. `online`
    /// may carry extra trailing parameters (heads the target does not have).
    pub fn update(&mut self, online: &ParamStore) -> Result<()> {
        let target = self.state.params.entries_mut();
        if online.len() < target.len() {
            return Err(Error::contract("online network has fewer parameters than the ema target"));
        }
        for (t, o) in target.iter().zip(online.entries()) {
            if t.name != o.name || t.value.shape() != o.value.shape() {
                return Err(Error::contract(format!("ema parameter mismatch: {} {:?} vs {} {:?}", t.name, t.value.shape(), o.name, o.value.shape())));
            }
        }
        let tau = self.tau;
        for (t, o) in target.iter_mut().zip(online.entries()) {
            t.value.zip_mut_with(&o.value, |a, &b| *a = tau * *a + (1.0 - tau) * b);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: SslConfig,
    pub nets: Networks,
    pub state: NetState,
    pub target: Option<EmaState>,
}

impl Model {
    /// Builds fresh networks. Each network draws its initial weights from its own stream so
    /// that adding the regressor leaves the other networks' initialisation unchanged.
    pub fn new(config: &SslConfig, regressor: Option<RegressorSpec>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut state = NetState::default();
        let mut rng = stream(seed, &[purpose::INIT, 0]);
        let encoder = Encoder::new(&config.encoder, &mut state, &mut Init { rng: &mut rng })?;
        let mut rng = stream(seed, &[purpose::INIT, 1]);
        let projector = Mlp::new(&mut state, &mut Init { rng: &mut rng }, "projector", encoder.output_dim(), &config.projector);
        let shared = (state.params.len(), state.buffers.len());
        let predictor = (config.method == Method::Byol).then(|| {
            let mut rng = stream(seed, &[purpose::INIT, 2]);
            let out = config.projector.output;
            Mlp::new(&mut state, &mut Init { rng: &mut rng }, "predictor", out, &HeadSpec { output: out, ..config.predictor })
        });
        let regressor = match regressor {
            Some(spec) => {
                spec.head.validate("affine regressor")?;
                let mut rng = stream(seed, &[purpose::INIT, 3]);
                Some(Mlp::new(&mut state, &mut Init { rng: &mut rng }, "regressor", spec.in_dim, &spec.head))
            }
            None => None,
        };
        let target = match config.method {
            Method::Byol => Some(EmaState::new(state.prefix(shared.0, shared.1), config.ema_tau)?),
            _ => None,
        };
        Ok(Model { config: config.clone(), nets: Networks { encoder, projector, predictor, regressor }, state, target })
    }

    pub fn method(&self) -> Method {
        self.config.method
    }

    pub fn num_params(&self) -> usize {
        self.state.params.num_scalars()
    }

    /// Frozen encoder features in evaluation mode, computed in chunks of `chunk` images.
    pub fn encode(&self, images: &Array4<f64>, chunk: usize) -> Result<Array2<f64>> {
        if images.shape()[0] == 0 {
            return Err(Error::contract("nothing to encode"));
        }
        let mut buffers = self.state.buffers.clone();
        let mut rows = Vec::new();
        for part in images.axis_chunks_iter(Axis(0), chunk.max(1)) {
            let tape = Tape::new();
            let params = self.state.params.bind_frozen(&tape);
            let mut ctx = Ctx { tape: &tape, params: &params, buffers: &mut buffers, train: false };
            let x = tape.constant(part.to_owned().into_dyn());
            let h = self.nets.encoder.forward(&mut ctx, x);
            rows.push(h.value().as_ref().clone().into_dimensionality::<Ix2>().expect("encoder output is 2-d"));
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("chunks share width");
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite encoder features"));
        }
        Ok(out)
    }
}

/// The two augmented views and, optionally, their affine-warped counterparts.
#[derive(Clone, Copy, Debug)]
pub struct Views<'t> {
    pub x1: Var<'t>,
    pub x2: Var<'t>,
    pub x1a: Option<Var<'t>>,
    pub x2a: Option<Var<'t>>,
}

#[derive(Clone, Copy, Debug)]
pub struct RepresentationBundle<'t> {
    pub h1: Var<'t>,
    pub h2: Var<'t>,
    pub z1: Var<'t>,
    pub z2: Var<'t>,
    pub p1: Option<Var<'t>>,
    pub p2: Option<Var<'t>>,
    /// Target-network projections (BYOL).
    pub zt1: Option<Var<'t>>,
    pub zt2: Option<Var<'t>>,
    pub h1a: Option<Var<'t>>,
    pub h2a: Option<Var<'t>>,
    pub z1a: Option<Var<'t>>,
    pub z2a: Option<Var<'t>>,
}

impl<'t> RepresentationBundle<'t> {
    /// The (original, affine) representation pair of view `1` or `2` for the given source.
    pub fn branch_pair(&self, view: usize, source: BranchSource) -> Option<(Var<'t>, Var<'t>)> {
        match (view, source) {
            (1, BranchSource::Encoder) => self.h1a.map(|a| (self.h1, a)),
            (2, BranchSource::Encoder) => self.h2a.map(|a| (self.h2, a)),
            (1, BranchSource::Projector) => self.z1a.map(|a| (self.z1, a)),
            (2, BranchSource::Projector) => self.z2a.map(|a| (self.z2, a)),
            _ => None,
        }
    }
}

/// Runs the online networks on both views (and any affine views) and, for BYOL, the target
/// networks on the two plain views. Affine views only ever pass through the online encoder.
pub fn forward_bundle<'t>(
    method: Method,
    nets: &Networks,
    online: &mut Ctx<'_, 't>,
    target: Option<&mut Ctx<'_, 't>>,
    views: &Views<'t>,
    source: BranchSource,
) -> Result<RepresentationBundle<'t>> {
    let h1 = nets.encoder.forward(online, views.x1);
    let h2 = nets.encoder.forward(online, views.x2);
    let z1 = nets.projector.forward(online, h1);
    let z2 = nets.projector.forward(online, h2);
    let (mut p1, mut p2, mut zt1, mut zt2) = (None, None, None, None);
    if method == Method::Byol {
        let predictor = nets.predictor.as_ref().ok_or_else(|| Error::contract("byol needs a predictor head"))?;
        let target = target.ok_or_else(|| Error::contract("byol needs a target network"))?;
        p1 = Some(predictor.forward(online, z1));
        p2 = Some(predictor.forward(online, z2));
        let th1 = nets.encoder.forward(target, views.x1);
        let th2 = nets.encoder.forward(target, views.x2);
        zt1 = Some(nets.projector.forward(target, th1).detach());
        zt2 = Some(nets.projector.forward(target, th2).detach());
    }
    let h1a = views.x1a.map(|x| nets.encoder.forward(online, x));
    let h2a = views.x2a.map(|x| nets.encoder.forward(online, x));
    let (z1a, z2a) = match source {
        BranchSource::Projector => (h1a.map(|h| nets.projector.forward(online, h)), h2a.map(|h| nets.projector.forward(online, h))),
        BranchSource::Encoder => (None, None),
    };
    Ok(RepresentationBundle { h1, h2, z1, z2, p1, p2, zt1, zt2, h1a, h2a, z1a, z2a })
}

/// The method's self-supervised objective on a bundle.
pub fn ssl_loss<'t>(config: &SslConfig, bundle: &RepresentationBundle<'t>) -> Result<Var<'t>> {
    match config.method {
        Method::SimClr => losses::ntxent_loss(bundle.z1, bundle.z2, config.temperature),
        Method::BarlowTwins => losses::barlow_twins_loss(bundle.z1, bundle.z2, config.offdiag_weight),
        Method::Byol => {
            let missing = || Error::contract("byol bundle lacks predictor or target outputs");
            losses::byol_symmetric(
                bundle.p1.ok_or_else(missing)?,
                bundle.p2.ok_or_else(missing)?,
                bundle.zt1.ok_or_else(missing)?,
                bundle.zt2.ok_or_else(missing)?,
            )
        }
    }
}
