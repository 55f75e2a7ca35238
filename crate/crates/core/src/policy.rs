//! When each feedback term is active, how training timesteps are drawn, and
//! timestep-dependent loss weights.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Terms of the fine-tuning objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossTerm {
    Denoise,
    Reg,
    Boundary,
    Id,
    Gaze,
    Pose,
    Interaction,
}

impl LossTerm {
    pub const ALL: [LossTerm; 7] = [
        LossTerm::Denoise,
        LossTerm::Reg,
        LossTerm::Boundary,
        LossTerm::Id,
        LossTerm::Gaze,
        LossTerm::Pose,
        LossTerm::Interaction,
    ];

    /// The six weighted auxiliary terms.
    pub const AUXILIARY: [LossTerm; 6] = [
        LossTerm::Reg,
        LossTerm::Boundary,
        LossTerm::Id,
        LossTerm::Gaze,
        LossTerm::Pose,
        LossTerm::Interaction,
    ];

    /// Terms computed from detector feedback on the clean-sample estimate.
    pub const FEEDBACK: [LossTerm; 5] = [
        LossTerm::Boundary,
        LossTerm::Id,
        LossTerm::Gaze,
        LossTerm::Pose,
        LossTerm::Interaction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Denoise => "denoise",
            LossTerm::Reg => "reg",
            LossTerm::Boundary => "boundary",
            LossTerm::Id => "id",
            LossTerm::Gaze => "gaze",
            LossTerm::Pose => "pose",
            LossTerm::Interaction => "interaction",
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossTerm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossTerm::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownLoss(s.to_string()))
    }
}

/// Inclusive timestep range `[t_min, t_max]`; `[-1, -1]` never fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "[i64; 2]", into = "[i64; 2]")]
pub struct TimestepGate {
    pub t_min: i64,
    pub t_max: i64,
}

impl TryFrom<[i64; 2]> for TimestepGate {
    type Error = Error;

    fn try_from(v: [i64; 2]) -> Result<Self> {
        let g = TimestepGate {
            t_min: v[0],
            t_max: v[1],
        };
        if g.is_empty() || (0 <= g.t_min && g.t_min <= g.t_max) {
            Ok(g)
        } else {
            Err(Error::Config(format!(
                "gate [{}, {}] must satisfy 0 <= t_min <= t_max, or be [-1, -1]",
                v[0], v[1]
            )))
        }
    }
}

impl From<TimestepGate> for [i64; 2] {
    fn from(g: TimestepGate) -> Self {
        [g.t_min, g.t_max]
    }
}

impl TimestepGate {
    pub const EMPTY: TimestepGate = TimestepGate {
        t_min: -1,
        t_max: -1,
    };

    pub fn new(t_min: usize, t_max: usize) -> Result<Self> {
        Self::try_from([t_min as i64, t_max as i64])
    }

    pub fn is_empty(&self) -> bool {
        self.t_min == -1 && self.t_max == -1
    }

    pub fn active(&self, t: usize) -> bool {
        !self.is_empty() && self.t_min <= t as i64 && t as i64 <= self.t_max
    }

    pub fn validate(&self, num_steps: usize) -> Result<()> {
        if !self.is_empty() && self.t_max >= num_steps as i64 {
            return Err(Error::Config(format!(
                "gate upper bound {} >= number of timesteps {num_steps}",
                self.t_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GateSet(BTreeMap<LossTerm, TimestepGate>);

impl GateSet {
    pub fn new(gates: BTreeMap<LossTerm, TimestepGate>) -> Self {
        Self(gates)
    }

    /// Gates for `num_steps` timesteps: gaze `[0, 200]`, id `[0, 400]`,
    /// interaction `[0, 500]`, pose `[0, 700]`; everything else always on.
    pub fn paper_defaults(num_steps: usize) -> Self {
        let last = num_steps.saturating_sub(1);
        let cap = |t: usize| t.min(last);
        let mut gates = BTreeMap::new();
        for term in LossTerm::ALL {
            let hi = match term {
                LossTerm::Gaze => cap(200),
                LossTerm::Id => cap(400),
                LossTerm::Interaction => cap(500),
                LossTerm::Pose => cap(700),
                LossTerm::Denoise | LossTerm::Reg | LossTerm::Boundary => last,
            };
            gates.insert(
                term,
                TimestepGate {
                    t_min: 0,
                    t_max: hi as i64,
                },
            );
        }
        Self(gates)
    }

    /// Gate for `term`; terms without an entry are always on.
    pub fn gate(&self, term: LossTerm) -> Option<TimestepGate> {
        self.0.get(&term).copied()
    }

    pub fn set(&mut self, term: LossTerm, gate: TimestepGate) {
        self.0.insert(term, gate);
    }

    pub fn active(&self, term: LossTerm, t: usize) -> bool {
        self.gate(term).map_or(true, |g| g.active(t))
    }

    /// Gate lookup by loss name.
    pub fn gate_active(&self, loss_name: &str, t: usize) -> Result<bool> {
        Ok(self.active(loss_name.parse()?, t))
    }

    pub fn validate(&self, num_steps: usize) -> Result<()> {
        self.0.values().try_for_each(|g| g.validate(num_steps))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LossTerm, &TimestepGate)> {
        self.0.iter()
    }
}

/// One constant-density piece `[start, end)` of the timestep distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSegment {
    pub start: usize,
    pub end: usize,
    pub weight: f64,
}

/// Piecewise-uniform timestep distribution. Each segment's weight is a
/// per-timestep relative density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub segments: Vec<SamplerSegment>,
}

impl SamplerSpec {
    /// The first half of the timesteps twice as likely as the second half.
    pub fn low_noise_biased(num_steps: usize) -> Self {
        let mid = num_steps / 2;
        Self {
            segments: vec![
                SamplerSegment {
                    start: 0,
                    end: mid,
                    weight: 2.0,
                },
                SamplerSegment {
                    start: mid,
                    end: num_steps,
                    weight: 1.0,
                },
            ],
        }
    }

    pub fn uniform(num_steps: usize) -> Self {
        Self {
            segments: vec![SamplerSegment {
                start: 0,
                end: num_steps,
                weight: 1.0,
            }],
        }
    }

    /// Segments must tile `[0, num_steps)` in order with positive weights.
    pub fn validate(&self, num_steps: usize) -> Result<()> {
        let mut expected = 0;
        for s in &self.segments {
            if s.start != expected || s.end <= s.start {
                return Err(Error::Config(format!(
                    "sampler segment [{}, {}) does not continue the tiling at {expected}",
                    s.start, s.end
                )));
            }
            if !(s.weight > 0.0 && s.weight.is_finite()) {
                return Err(Error::Config(format!(
                    "sampler weight {} must be positive",
                    s.weight
                )));
            }
            expected = s.end;
        }
        if expected != num_steps {
            return Err(Error::Config(format!(
                "sampler covers [0, {expected}) but the schedule has {num_steps} steps"
            )));
        }
        Ok(())
    }

    fn total_mass(&self) -> f64 {
        self.segments
            .iter()
            .map(|s| s.weight * (s.end - s.start) as f64)
            .sum()
    }

    /// Probability of drawing `t`.
    pub fn probability(&self, t: usize) -> f64 {
        self.segments
            .iter()
            .find(|s| (s.start..s.end).contains(&t))
            .map_or(0.0, |s| s.weight / self.total_mass())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = self.total_mass();
        let mut u = rng.random::<f64>() * total;
        for s in &self.segments {
            let mass = s.weight * (s.end - s.start) as f64;
            if u < mass {
                return rng.random_range(s.start..s.end);
            }
            u -= mass;
        }
        // Rounding can leave `u` a hair above the last segment's mass.
        let last = self.segments.last().expect("validated sampler");
        rng.random_range(last.start..last.end)
    }
}

/// Per-term weight tables `t → λ_k(t)`, linearly interpolated between grid
/// points and held constant outside them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossWeightCurve(BTreeMap<LossTerm, Vec<(usize, f64)>>);

impl LossWeightCurve {
    pub fn new(tables: BTreeMap<LossTerm, Vec<(usize, f64)>>) -> Result<Self> {
        for (term, table) in &tables {
            if table.is_empty() {
                return Err(Error::Config(format!("empty weight table for {term}")));
            }
            if table.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(Error::Config(format!(
                    "weight table for {term} must have increasing timesteps"
                )));
            }
            if table.iter().any(|&(_, v)| !(v >= 0.0 && v.is_finite())) {
                return Err(Error::Config(format!(
                    "weight table for {term} has negative or non-finite values"
                )));
            }
        }
        Ok(Self(tables))
    }

    pub fn table(&self, term: LossTerm) -> Option<&[(usize, f64)]> {
        self.0.get(&term).map(Vec::as_slice)
    }

    pub fn lambda(&self, term: LossTerm, t: usize) -> Option<f64> {
        let table = self.0.get(&term)?;
        let t = t as f64;
        let first = table[0];
        if t <= first.0 as f64 {
            return Some(first.1);
        }
        for w in table.windows(2) {
            let ((t0, v0), (t1, v1)) = (w[0], w[1]);
            if t <= t1 as f64 {
                let a = (t - t0 as f64) / (t1 - t0) as f64;
                return Some(v0 + a * (v1 - v0));
            }
        }
        Some(table[table.len() - 1].1)
    }
}

/// Floor applied to profiled loss averages before inversion.
pub const INVERSE_WEIGHT_FLOOR: f64 = 1e-3;

/// `λ_k(t) = base_lambda · min(curve_k) / curve_k(t)`, after flooring every
/// curve value at [`INVERSE_WEIGHT_FLOOR`].
pub fn inverse_timestep_weights(
    avg_loss_curves: &BTreeMap<LossTerm, Vec<(usize, f64)>>,
    base_lambda: f64,
) -> Result<LossWeightCurve> {
    let mut tables = BTreeMap::new();
    for (&term, curve) in avg_loss_curves {
        if let Some(&(t, v)) = curve.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::invalid(
                "avg_loss_curves",
                format!("{term} curve value {v} at t = {t} is not finite"),
            ));
        }
        let floored: Vec<(usize, f64)> = curve
            .iter()
            .map(|&(t, v)| (t, v.max(INVERSE_WEIGHT_FLOOR)))
            .collect();
        let min = floored
            .iter()
            .map(|&(_, v)| v)
            .fold(f64::INFINITY, f64::min);
        tables.insert(
            term,
            floored
                .into_iter()
                .map(|(t, v)| (t, base_lambda * min / v))
                .collect(),
        );
    }
    LossWeightCurve::new(tables)
}

/// Weights and gates for every term of the objective. Terms missing from
/// `lambdas` weigh 0; terms missing from `gates` are never gated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeedbackConfig {
    /// Constant weights for the auxiliary terms; the denoising term has
    /// weight 1.
    pub lambdas: BTreeMap<LossTerm, f64>,
    pub gates: GateSet,
    /// Timestep-dependent weights overriding `lambdas` for the terms they
    /// cover.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_curves: Option<LossWeightCurve>,
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        Self::paper_defaults(1000)
    }
}

impl FeedbackConfig {
    pub fn paper_defaults(num_steps: usize) -> Self {
        Self {
            lambdas: LossTerm::AUXILIARY.into_iter().map(|t| (t, 0.01)).collect(),
            gates: GateSet::paper_defaults(num_steps),
            weight_curves: None,
        }
    }

    /// Denoising only.
    pub fn baseline(num_steps: usize) -> Self {
        let mut cfg = Self::paper_defaults(num_steps);
        for v in cfg.lambdas.values_mut() {
            *v = 0.0;
        }
        cfg
    }

    pub fn lambda(&self, term: LossTerm, t: usize) -> f64 {
        if term == LossTerm::Denoise {
            return 1.0;
        }
        self.weight_curves
            .as_ref()
            .and_then(|c| c.lambda(term, t))
            .unwrap_or_else(|| self.lambdas.get(&term).copied().unwrap_or(0.0))
    }

    /// `λ_k(t) · gate_k(t)`.
    pub fn coefficient(&self, term: LossTerm, t: usize) -> f64 {
        if self.gates.active(term, t) {
            self.lambda(term, t)
        } else {
            0.0
        }
    }

    pub fn validate(&self, num_steps: usize) -> Result<()> {
        self.gates.validate(num_steps)?;
        for (term, &v) in &self.lambdas {
            if *term == LossTerm::Denoise {
                return Err(Error::Config(
                    "the denoising term has fixed weight 1; remove it from lambdas".into(),
                ));
            }
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("lambda for {term} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}
