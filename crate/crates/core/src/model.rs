//! Parameter and state types for the ant/fungus mutualism model, and the
//! vector field
//!
//! ```text
//! dA/dt = (r_a F - d_a A) A
//! dF/dt = (r_f a A^2 / (b + a A^2) - d_f F - r_c A) F
//! ```
//!
//! together with its Jacobian and the derived scalars used throughout the
//! crate (division-of-labor coefficient, coexistence threshold, attracting
//! box). Biomass is in grams and time in weeks.

use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest admissible division-of-labor coefficient (p = 1, q = 1/2).
pub const LABOR_MAX: f64 = 0.25;

/// Agreement required between an explicit `a` and the one derived from `(p, q)`.
const LABOR_AGREEMENT_TOL: f64 = 1e-12;

/// One of the seven dynamical parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Param {
    #[serde(rename = "r_a")]
    AntGrowth,
    #[serde(rename = "r_f")]
    FungusGrowth,
    #[serde(rename = "r_c")]
    Consumption,
    #[serde(rename = "d_a")]
    AntDeath,
    #[serde(rename = "d_f")]
    FungusDeath,
    #[serde(rename = "b")]
    HalfSaturation,
    #[serde(rename = "a")]
    Labor,
}

impl Param {
    pub const ALL: [Param; 7] = [
        Param::AntGrowth,
        Param::FungusGrowth,
        Param::Consumption,
        Param::AntDeath,
        Param::FungusDeath,
        Param::HalfSaturation,
        Param::Labor,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Param::AntGrowth => "r_a",
            Param::FungusGrowth => "r_f",
            Param::Consumption => "r_c",
            Param::AntDeath => "d_a",
            Param::FungusDeath => "d_f",
            Param::HalfSaturation => "b",
            Param::Labor => "a",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Param {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Anything a trajectory can be differentiated against or fitted for:
/// the seven parameters plus the two initial biomasses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Target {
    #[serde(rename = "r_a")]
    AntGrowth,
    #[serde(rename = "r_f")]
    FungusGrowth,
    #[serde(rename = "r_c")]
    Consumption,
    #[serde(rename = "d_a")]
    AntDeath,
    #[serde(rename = "d_f")]
    FungusDeath,
    #[serde(rename = "b")]
    HalfSaturation,
    #[serde(rename = "a")]
    Labor,
    #[serde(rename = "A0")]
    InitialAnts,
    #[serde(rename = "F0")]
    InitialFungus,
}

impl Target {
    pub const ALL: [Target; 9] = [
        Target::AntGrowth,
        Target::FungusGrowth,
        Target::Consumption,
        Target::AntDeath,
        Target::FungusDeath,
        Target::HalfSaturation,
        Target::Labor,
        Target::InitialAnts,
        Target::InitialFungus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::InitialAnts => "A0",
            Target::InitialFungus => "F0",
            other => other.param().map(Param::key).unwrap_or_default(),
        }
    }

    pub fn param(self) -> Option<Param> {
        Some(match self {
            Target::AntGrowth => Param::AntGrowth,
            Target::FungusGrowth => Param::FungusGrowth,
            Target::Consumption => Param::Consumption,
            Target::AntDeath => Param::AntDeath,
            Target::FungusDeath => Param::FungusDeath,
            Target::HalfSaturation => Param::HalfSaturation,
            Target::Labor => Param::Labor,
            Target::InitialAnts | Target::InitialFungus => return None,
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl From<Param> for Target {
    fn from(p: Param) -> Self {
        Target::ALL[p.index()]
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s.trim())
            .ok_or_else(|| Error::Precondition(format!("unknown target `{s}`")))
    }
}

/// The seven parameters of the vector field.
///
/// `r_c` is stored directly (it is `c * r_a` in terms of the conversion
/// rate `c`); [`ModelParams::conversion_rate`] recovers `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    r_a: f64,
    r_f: f64,
    r_c: f64,
    d_a: f64,
    d_f: f64,
    b: f64,
    a: f64,
}

impl ModelParams {
    /// Validated constructor: all rates and `b` strictly positive, `0 < a < 0.25`.
    pub fn new(r_a: f64, r_f: f64, r_c: f64, d_a: f64, d_f: f64, b: f64, a: f64) -> Result<Self> {
        let p = Self::new_unchecked(r_a, r_f, r_c, d_a, d_f, b, a);
        p.validate()?;
        Ok(p)
    }

    /// Skips the range checks, e.g. for experiments at `a = 0` or `a = 0.25`.
    pub const fn new_unchecked(
        r_a: f64,
        r_f: f64,
        r_c: f64,
        d_a: f64,
        d_f: f64,
        b: f64,
        a: f64,
    ) -> Self {
        Self {
            r_a,
            r_f,
            r_c,
            d_a,
            d_f,
            b,
            a,
        }
    }

    /// Builds the parameter set with `a` derived from a labor allocation.
    pub fn from_allocation(
        r_a: f64,
        r_f: f64,
        r_c: f64,
        d_a: f64,
        d_f: f64,
        b: f64,
        alloc: LaborAllocation,
    ) -> Result<Self> {
        Self::new(r_a, r_f, r_c, d_a, d_f, b, alloc.coefficient())
    }

    pub fn validate(&self) -> Result<()> {
        for p in Param::ALL {
            let v = self.get(p);
            if !v.is_finite() {
                return Err(Error::invalid(p.key(), format!("{v} is not finite")));
            }
        }
        for p in &Param::ALL[..6] {
            let v = self.get(*p);
            if v <= 0.0 {
                return Err(Error::invalid(p.key(), format!("{v} must be strictly positive")));
            }
        }
        if !(self.a > 0.0 && self.a < LABOR_MAX) {
            return Err(Error::invalid(
                "a",
                format!("{} must lie strictly inside (0, {LABOR_MAX})", self.a),
            ));
        }
        Ok(())
    }

    pub fn r_a(&self) -> f64 {
        self.r_a
    }
    pub fn r_f(&self) -> f64 {
        self.r_f
    }
    pub fn r_c(&self) -> f64 {
        self.r_c
    }
    pub fn d_a(&self) -> f64 {
        self.d_a
    }
    pub fn d_f(&self) -> f64 {
        self.d_f
    }
    pub fn b(&self) -> f64 {
        self.b
    }
    pub fn a(&self) -> f64 {
        self.a
    }

    /// Conversion rate `c = r_c / r_a` between fungus and ants.
    pub fn conversion_rate(&self) -> f64 {
        self.r_c / self.r_a
    }

    pub fn get(&self, p: Param) -> f64 {
        match p {
            Param::AntGrowth => self.r_a,
            Param::FungusGrowth => self.r_f,
            Param::Consumption => self.r_c,
            Param::AntDeath => self.d_a,
            Param::FungusDeath => self.d_f,
            Param::HalfSaturation => self.b,
            Param::Labor => self.a,
        }
    }

    /// Copy with one parameter replaced; not validated.
    pub fn with_unchecked(mut self, p: Param, value: f64) -> Self {
        match p {
            Param::AntGrowth => self.r_a = value,
            Param::FungusGrowth => self.r_f = value,
            Param::Consumption => self.r_c = value,
            Param::AntDeath => self.d_a = value,
            Param::FungusDeath => self.d_f = value,
            Param::HalfSaturation => self.b = value,
            Param::Labor => self.a = value,
        }
        self
    }

    pub fn with(self, p: Param, value: f64) -> Result<Self> {
        let out = self.with_unchecked(p, value);
        out.validate()?;
        Ok(out)
    }

    pub fn with_a(self, a: f64) -> Result<Self> {
        self.with(Param::Labor, a)
    }

    /// Holling type III fungus response `r_f a A^2 / (b + a A^2)`.
    #[inline]
    pub fn fungus_response(&self, ants: f64) -> f64 {
        let sq = self.a * ants * ants;
        self.r_f * sq / (self.b + sq)
    }

    /// Vector field without input checks; used on integrator hot paths.
    #[inline]
    pub fn rate(&self, ants: f64, fungus: f64) -> [f64; 2] {
        [
            (self.r_a * fungus - self.d_a * ants) * ants,
            (self.fungus_response(ants) - self.d_f * fungus - self.r_c * ants) * fungus,
        ]
    }

    /// Jacobian without input checks, row-major `[[dfA/dA, dfA/dF], [dfF/dA, dfF/dF]]`.
    #[inline]
    pub fn jacobian_raw(&self, ants: f64, fungus: f64) -> [[f64; 2]; 2] {
        let denom = self.b + self.a * ants * ants;
        // d/dA of r_f a A^2 / (b + a A^2)
        let response_slope = 2.0 * self.r_f * self.a * self.b * ants / (denom * denom);
        [
            [
                self.r_a * fungus - 2.0 * self.d_a * ants,
                self.r_a * ants,
            ],
            [
                (response_slope - self.r_c) * fungus,
                self.fungus_response(ants) - 2.0 * self.d_f * fungus - self.r_c * ants,
            ],
        ]
    }

    pub fn jacobian_matrix(&self, ants: f64, fungus: f64) -> Matrix2<f64> {
        let j = self.jacobian_raw(ants, fungus);
        Matrix2::new(j[0][0], j[0][1], j[1][0], j[1][1])
    }

    /// Threshold `a* = 4 b ((r_c r_a + d_f d_a) / (r_a r_f))^2` for this parameter set
    /// (independent of `a`).
    pub fn coexistence_threshold(&self) -> f64 {
        let ratio = (self.r_c * self.r_a + self.d_f * self.d_a) / (self.r_a * self.r_f);
        4.0 * self.b * ratio * ratio
    }

    /// Slope `d_a / r_a` of the ant nullcline `F = (d_a / r_a) A`.
    pub fn ant_nullcline_slope(&self) -> f64 {
        self.d_a / self.r_a
    }

    /// Non-trivial fungus nullcline `F = r_f a A^2 / (d_f (b + a A^2)) - (r_c / d_f) A`.
    pub fn fungus_nullcline(&self, ants: f64) -> f64 {
        self.fungus_response(ants) / self.d_f - self.r_c * ants / self.d_f
    }
}

impl fmt::Display for ModelParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Param::ALL
            .iter()
            .map(|p| format!("{}={}", p.key(), self.get(*p)))
            .collect();
        f.write_str(&parts.join(" "))
    }
}

/// Worker fraction `p` and leaf-collecting share `q` of the workers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaborAllocation {
    p: f64,
    q: f64,
}

impl LaborAllocation {
    pub fn new(p: f64, q: f64) -> Result<Self> {
        for (name, v) in [("p", p), ("q", q)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, format!("{v} must lie in [0, 1]")));
            }
        }
        Ok(Self { p, q })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// Division-of-labor coefficient `a = p^2 q (1 - q)`, in `[0, 0.25]`.
    pub fn coefficient(&self) -> f64 {
        self.p * self.p * self.q * (1.0 - self.q)
    }
}

/// Free-function form of [`LaborAllocation::coefficient`].
pub fn labor_coefficient(alloc: LaborAllocation) -> f64 {
    alloc.coefficient()
}

/// Ant and fungus biomass at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BiomassState {
    #[serde(rename = "A")]
    pub ants: f64,
    #[serde(rename = "F")]
    pub fungus: f64,
}

impl BiomassState {
    pub const ORIGIN: BiomassState = BiomassState {
        ants: 0.0,
        fungus: 0.0,
    };

    pub const fn new(ants: f64, fungus: f64) -> Self {
        Self { ants, fungus }
    }

    /// Checks the state is finite and in the closed positive quadrant.
    pub fn check_nonnegative(&self) -> Result<()> {
        if !self.ants.is_finite() || !self.fungus.is_finite() {
            return Err(Error::NonFinite("biomass state"));
        }
        if self.ants < 0.0 || self.fungus < 0.0 {
            return Err(Error::Precondition(format!(
                "biomass state ({}, {}) has a negative component",
                self.ants, self.fungus
            )));
        }
        Ok(())
    }

    pub fn distance(&self, other: &BiomassState) -> f64 {
        (self.ants - other.ants).hypot(self.fungus - other.fungus)
    }

    pub fn norm(&self) -> f64 {
        self.ants.hypot(self.fungus)
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.ants, self.fungus]
    }
}

/// Time derivative of a [`BiomassState`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateRate {
    #[serde(rename = "dA")]
    pub ants: f64,
    #[serde(rename = "dF")]
    pub fungus: f64,
}

impl StateRate {
    pub fn norm(&self) -> f64 {
        self.ants.hypot(self.fungus)
    }
}

/// The compact set `[0, r_a r_f / (d_a d_f)] x [0, r_f / d_f]` that attracts
/// every orbit in the positive quadrant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttractingBox {
    pub ants_max: f64,
    pub fungus_max: f64,
}

impl AttractingBox {
    /// Membership in the box inflated by `eps` on every side.
    pub fn contains(&self, state: &BiomassState, eps: f64) -> bool {
        state.ants >= -eps
            && state.fungus >= -eps
            && state.ants <= self.ants_max + eps
            && state.fungus <= self.fungus_max + eps
    }
}

fn check_params_finite(params: &ModelParams) -> Result<()> {
    if Param::ALL.iter().all(|p| params.get(*p).is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("model parameters"))
    }
}

/// Evaluates `(dA/dt, dF/dt)` at `state`.
pub fn vector_field(params: &ModelParams, state: BiomassState) -> Result<StateRate> {
    check_params_finite(params)?;
    state.check_nonnegative()?;
    let [da, df] = params.rate(state.ants, state.fungus);
    Ok(StateRate {
        ants: da,
        fungus: df,
    })
}

/// Analytic Jacobian `d(dA/dt, dF/dt) / d(A, F)` at an arbitrary state.
pub fn jacobian(params: &ModelParams, state: BiomassState) -> Result<Matrix2<f64>> {
    check_params_finite(params)?;
    if !state.ants.is_finite() || !state.fungus.is_finite() {
        return Err(Error::NonFinite("biomass state"));
    }
    Ok(params.jacobian_matrix(state.ants, state.fungus))
}

pub fn coexistence_threshold(params: &ModelParams) -> f64 {
    params.coexistence_threshold()
}

pub fn attracting_box(params: &ModelParams) -> AttractingBox {
    AttractingBox {
        ants_max: params.r_a * params.r_f / (params.d_a * params.d_f),
        fungus_max: params.r_f / params.d_f,
    }
}

/// Reference colony: the parameter values and week-6 biomasses the laboratory
/// comparison is run with.
pub mod nominal {
    use super::{BiomassState, ModelParams};

    pub const PARAMS: ModelParams = ModelParams::new_unchecked(0.1, 0.7, 0.0045, 0.1, 0.2, 0.002, 0.2);
    pub const INITIAL: BiomassState = BiomassState::new(0.05, 0.3);
    /// First observed week.
    pub const T_START: f64 = 6.0;
    /// Last observed week.
    pub const T_END: f64 = 29.0;
}

/// A parameter file: the seven parameters plus, optionally, the labor
/// allocation `a` was derived from.
///
/// Text form is one `key = value` pair per line with keys
/// `r_a r_f r_c d_a d_f b a p q`; blank lines and `#` comments are ignored.
/// `a` may be omitted when both `p` and `q` are present; if all three are
/// given they must agree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    pub params: ModelParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub allocation: Option<LaborAllocation>,
}

impl ParamFile {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            allocation: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        const KEYS: [&str; 9] = ["r_a", "r_f", "r_c", "d_a", "d_f", "b", "a", "p", "q"];
        let mut values: [Option<f64>; 9] = [None; 9];
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let slot = KEYS.iter().position(|k| *k == key).ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("unknown key `{key}`"),
            })?;
            if values[slot].is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("duplicate key `{key}`"),
                });
            }
            let v: f64 = value.trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("`{}` is not a number", value.trim()),
            })?;
            values[slot] = Some(v);
        }

        let mut required = [0.0; 6];
        for (i, slot) in required.iter_mut().enumerate() {
            *slot = values[i].ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("missing key `{}`", KEYS[i]),
            })?;
        }
        let allocation = match (values[7], values[8]) {
            (Some(p), Some(q)) => Some(LaborAllocation::new(p, q)?),
            (None, None) => None,
            _ => {
                return Err(Error::Parse {
                    line: 0,
                    message: "`p` and `q` must be given together".into(),
                })
            }
        };
        let a = match (values[6], allocation) {
            (Some(a), Some(alloc)) => {
                let derived = alloc.coefficient();
                if (a - derived).abs() > LABOR_AGREEMENT_TOL {
                    return Err(Error::invalid(
                        "a",
                        format!("{a} disagrees with p^2 q (1 - q) = {derived}"),
                    ));
                }
                a
            }
            (Some(a), None) => a,
            (None, Some(alloc)) => alloc.coefficient(),
            (None, None) => {
                return Err(Error::Parse {
                    line: 0,
                    message: "missing key `a` (or `p` and `q`)".into(),
                })
            }
        };
        let [r_a, r_f, r_c, d_a, d_f, b] = required;
        Ok(Self {
            params: ModelParams::new(r_a, r_f, r_c, d_a, d_f, b, a)?,
            allocation,
        })
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Text form; values use the shortest representation that parses back exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in Param::ALL {
            out.push_str(&format!("{} = {}\n", p.key(), self.params.get(p)));
        }
        if let Some(alloc) = self.allocation {
            out.push_str(&format!("p = {}\nq = {}\n", alloc.p, alloc.q));
        }
        out
    }
}

impl FromStr for ParamFile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}
