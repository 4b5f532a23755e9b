use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PARAM_COUNT: usize = 6;

/// Component order of the parameter vector: `[theta, tx, ty, sigma, sx, sy]`.
pub const PARAM_NAMES: [&str; PARAM_COUNT] = ["theta", "tx", "ty", "sigma", "sx", "sy"];

/// The 6-DoF parameter vector of an affine transformation.
///
/// Angles are in degrees. Translations are fractions of the image width/height. `sigma` is an
/// isotropic scale factor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub theta: f64,
    pub tx: f64,
    pub ty: f64,
    pub sigma: f64,
    pub sx: f64,
    pub sy: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams =
        AffineParams { theta: 0.0, tx: 0.0, ty: 0.0, sigma: 1.0, sx: 0.0, sy: 0.0 };

    pub fn to_array(&self) -> [f64; PARAM_COUNT] {
        [self.theta, self.tx, self.ty, self.sigma, self.sx, self.sy]
    }

    pub fn from_array(v: [f64; PARAM_COUNT]) -> Self {
        AffineParams { theta: v[0], tx: v[1], ty: v[2], sigma: v[3], sx: v[4], sy: v[5] }
    }
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Translation,
    Shear,
    Rotation,
    Scale,
}

impl Component {
    pub const ALL: [Component; 4] =
        [Component::Translation, Component::Shear, Component::Rotation, Component::Scale];

    /// Indices into the parameter vector owned by this component.
    pub fn indices(self) -> &'static [usize] {
        match self {
            Component::Rotation => &[0],
            Component::Translation => &[1, 2],
            Component::Scale => &[3],
            Component::Shear => &[4, 5],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Component::Translation => "translation",
            Component::Shear => "shear",
            Component::Rotation => "rotation",
            Component::Scale => "scale",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translation" => Ok(Component::Translation),
            "shear" => Ok(Component::Shear),
            "rotation" => Ok(Component::Rotation),
            "scale" => Ok(Component::Scale),
            other => Err(Error::config(format!("unknown affine component `{other}`"))),
        }
    }
}

/// Which affine components are sampled (and regressed). Disabled components stay at their
/// identity values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ComponentMask {
    pub translation: bool,
    pub shear: bool,
    pub rotation: bool,
    pub scale: bool,
}

impl ComponentMask {
    pub const ALL: ComponentMask =
        ComponentMask { translation: true, shear: true, rotation: true, scale: true };
    pub const NONE: ComponentMask =
        ComponentMask { translation: false, shear: false, rotation: false, scale: false };

    pub fn only(component: Component) -> Self {
        Self::NONE.with(component, true)
    }

    pub fn with(mut self, component: Component, on: bool) -> Self {
        match component {
            Component::Translation => self.translation = on,
            Component::Shear => self.shear = on,
            Component::Rotation => self.rotation = on,
            Component::Scale => self.scale = on,
        }
        self
    }

    pub fn contains(&self, component: Component) -> bool {
        match component {
            Component::Translation => self.translation,
            Component::Shear => self.shear,
            Component::Rotation => self.rotation,
            Component::Scale => self.scale,
        }
    }

    pub fn components(&self) -> Vec<Component> {
        Component::ALL.into_iter().filter(|c| self.contains(*c)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if *self == Self::NONE {
            return Err(Error::config("component mask must enable at least one component"));
        }
        Ok(())
    }

    /// Parameter-vector indices of the enabled components, in parameter order.
    pub fn active_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> =
            self.components().iter().flat_map(|c| c.indices().iter().copied()).collect();
        idx.sort_unstable();
        idx
    }

    pub fn active_count(&self) -> usize {
        self.active_indices().len()
    }
}

impl Default for ComponentMask {
    fn default() -> Self {
        Self::ALL
    }
}

// Serialized as a list of component names, e.g. `["rotation", "scale"]`.
impl Serialize for ComponentMask {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.components().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ComponentMask {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let list = Vec::<Component>::deserialize(d)?;
        Ok(list.into_iter().fold(ComponentMask::NONE, |m, c| m.with(c, true)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Interval { lo: v, hi: v }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    fn validate(&self, what: &str) -> Result<()> {
        if !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::config(format!("{what} interval must be finite")));
        }
        if self.lo > self.hi {
            return Err(Error::config(format!(
                "{what} interval has lo {} > hi {}",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }
}

/// Sampling intervals per component. `translation` is a magnitude interval; with
/// `signed_translation` each axis gets an independent random sign and the regression target
/// spans `[-hi, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRanges {
    pub rotation: Interval,
    pub translation: Interval,
    pub signed_translation: bool,
    pub scale: Interval,
    pub shear: Interval,
}

impl ParamRanges {
    /// Rotation in [-90, 90] degrees, translation magnitude in [0, 0.25], scale in
    /// [0.7, 1.3], shear in [-25, 25] degrees.
    pub const PAPER: ParamRanges = ParamRanges {
        rotation: Interval::new(-90.0, 90.0),
        translation: Interval::new(0.0, 0.25),
        signed_translation: true,
        scale: Interval::new(0.7, 1.3),
        shear: Interval::new(-25.0, 25.0),
    };

    /// Every interval collapsed onto the identity value.
    pub const IDENTITY: ParamRanges = ParamRanges {
        rotation: Interval::point(0.0),
        translation: Interval::point(0.0),
        signed_translation: true,
        scale: Interval::point(1.0),
        shear: Interval::point(0.0),
    };

    pub fn validate(&self) -> Result<()> {
        self.rotation.validate("rotation")?;
        self.translation.validate("translation")?;
        self.scale.validate("scale")?;
        self.shear.validate("shear")?;
        if self.translation.lo < 0.0 {
            return Err(Error::config("translation interval is a magnitude and must be >= 0"));
        }
        if self.scale.lo <= 0.0 {
            return Err(Error::config("scale interval must be strictly positive"));
        }
        if self.shear.lo <= -90.0 || self.shear.hi >= 90.0 {
            return Err(Error::config("shear angles must lie strictly inside (-90, 90)"));
        }
        Ok(())
    }

    /// Interval of the regression target for parameter index `idx`.
    pub fn target_interval(&self, idx: usize) -> Interval {
        match idx {
            0 => self.rotation,
            1 | 2 if self.signed_translation => {
                Interval::new(-self.translation.hi, self.translation.hi)
            }
            1 | 2 => self.translation,
            3 => self.scale,
            4 | 5 => self.shear,
            _ => panic!("parameter index {idx} out of range"),
        }
    }
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self::PAPER
    }
}

/// Draws one parameter vector. Enabled components are uniform over their interval, disabled
/// components sit at identity.
pub fn sample_affine_params<R: Rng + ?Sized>(
    rng: &mut R,
    mask: ComponentMask,
    ranges: &ParamRanges,
) -> Result<AffineParams> {
    mask.validate()?;
    ranges.validate()?;
    let mut p = AffineParams::IDENTITY;
    if mask.rotation {
        p.theta = ranges.rotation.sample(rng);
    }
    if mask.translation {
        let draw = |rng: &mut R| {
            let magnitude = ranges.translation.sample(rng);
            if ranges.signed_translation && rng.random_bool(0.5) {
                -magnitude
            } else {
                magnitude
            }
        };
        p.tx = draw(rng);
        p.ty = draw(rng);
    }
    if mask.scale {
        p.sigma = ranges.scale.sample(rng);
    }
    if mask.shear {
        p.sx = ranges.shear.sample(rng);
        p.sy = ranges.shear.sample(rng);
    }
    Ok(p)
}

const RANGE_SLACK: f64 = 1e-9;

/// Maps each parameter affinely from its target interval onto [-1, 1]. Collapsed intervals
/// map to 0.
pub fn normalize_params(p: &AffineParams, ranges: &ParamRanges) -> Result<[f64; PARAM_COUNT]> {
    let raw = p.to_array();
    let mut out = [0.0; PARAM_COUNT];
    for (i, (&v, o)) in raw.iter().zip(out.iter_mut()).enumerate() {
        let iv = ranges.target_interval(i);
        let slack = RANGE_SLACK * (1.0 + iv.lo.abs().max(iv.hi.abs()));
        if !(v >= iv.lo - slack && v <= iv.hi + slack) {
            return Err(Error::contract(format!(
                "{} = {v} outside [{}, {}]",
                PARAM_NAMES[i], iv.lo, iv.hi
            )));
        }
        *o = if iv.width() == 0.0 { 0.0 } else { 2.0 * (v - iv.lo) / iv.width() - 1.0 };
    }
    Ok(out)
}

pub fn denormalize_params(v: &[f64; PARAM_COUNT], ranges: &ParamRanges) -> AffineParams {
    let mut raw = [0.0; PARAM_COUNT];
    for (i, r) in raw.iter_mut().enumerate() {
        let iv = ranges.target_interval(i);
        *r = iv.lo + 0.5 * (v[i] + 1.0) * iv.width();
    }
    AffineParams::from_array(raw)
}
