//! Token-to-(Q, K, V, λ) projection.
//!
//! Covers the positive feature map, sigmoid decay parameterizations,
//! zero-order-hold discretization and the named model configurations that
//! map existing causal linear transformers onto the bidirectional mixer.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use crate::error::{LionError, Result};
use crate::numerics::{dot, matmul, Matrix, ScalingMode, Vector};

/// Decay family fed to a mixer.
#[derive(Debug, Clone, PartialEq)]
pub enum DecaySpec {
    /// λ = 1 everywhere; the mask is all ones.
    NoDecay,
    /// One λ shared by every position; the mask is `λ^|i-j|`.
    FixedScalar(f64),
    /// One λ per position.
    SelectiveScalar(Vector),
    /// One λ per position and state channel (`L x N`).
    SelectiveDiagonal(Matrix),
}

impl DecaySpec {
    /// Checks the `(0, 1]` stability range and the sequence length.
    pub fn validate(&self, len: usize) -> Result<()> {
        let check = |index: usize, value: f64| {
            if value > 0.0 && value <= 1.0 {
                Ok(())
            } else {
                Err(LionError::InvalidDecay { index, value })
            }
        };
        match self {
            DecaySpec::NoDecay => Ok(()),
            DecaySpec::FixedScalar(l) => check(0, *l),
            DecaySpec::SelectiveScalar(v) => {
                if v.len() != len {
                    return Err(LionError::shape(format!(
                        "selective decay has {} entries for a length-{len} sequence",
                        v.len()
                    )));
                }
                v.iter().enumerate().try_for_each(|(i, &x)| check(i, x))
            }
            DecaySpec::SelectiveDiagonal(d) => {
                if d.rows() != len {
                    return Err(LionError::shape(format!(
                        "diagonal decay has {} rows for a length-{len} sequence",
                        d.rows()
                    )));
                }
                d.as_slice()
                    .iter()
                    .enumerate()
                    .try_for_each(|(i, &x)| check(i / d.cols(), x))
            }
        }
    }

    pub fn is_scalar(&self) -> bool {
        !matches!(self, DecaySpec::SelectiveDiagonal(_))
    }

    /// Scalar decay at position `i`, or `None` for the diagonal family.
    pub fn scalar_at(&self, i: usize) -> Option<f64> {
        match self {
            DecaySpec::NoDecay => Some(1.0),
            DecaySpec::FixedScalar(l) => Some(*l),
            DecaySpec::SelectiveScalar(v) => Some(v[i]),
            DecaySpec::SelectiveDiagonal(_) => None,
        }
    }

    /// Per-position scalar decays expanded to a vector of length `len`.
    pub fn scalar_decays(&self, len: usize) -> Result<Vector> {
        match self {
            DecaySpec::NoDecay => Ok(Vector::filled(len, 1.0)),
            DecaySpec::FixedScalar(l) => Ok(Vector::filled(len, *l)),
            DecaySpec::SelectiveScalar(v) => Ok(v.clone()),
            DecaySpec::SelectiveDiagonal(_) => Err(LionError::Unsupported(
                "diagonal decay has no scalar expansion".into(),
            )),
        }
    }

    pub fn family(&self) -> DecayFamily {
        match self {
            DecaySpec::NoDecay => DecayFamily::None,
            DecaySpec::FixedScalar(_) => DecayFamily::Fixed,
            DecaySpec::SelectiveScalar(_) => DecayFamily::Selective,
            DecaySpec::SelectiveDiagonal(_) => DecayFamily::Diagonal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DecayFamily {
    None,
    Fixed,
    Selective,
    Diagonal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FeatureMap {
    /// `(SiLU(x) + 0.5) / ‖SiLU(x) + 0.5‖`.
    ShiftedSilu,
    Identity,
}

/// How keys are rewritten after the feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KeyTransform {
    None,
    /// `k_i := (1 - λ_i) k_i` (gated RFA).
    DecayComplement,
    /// `k_i := (1 - λ_i) · 1` (HGRN-2).
    ReplaceByComplement,
    /// `k_i := i_i k_i` with a sigmoid input gate (xLSTM).
    InputGate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ZooModel {
    LionLit,
    LionD,
    LionS,
    RetNet,
    RetNetScaled,
    GatedRfa,
    Mamba2Scalar,
    DiagonalDecay,
    Hgrn2,
    Xlstm,
}

/// A named linear transformer expressed as a bidirectional mixer configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ZooConfig {
    pub model: ZooModel,
    pub scaling: ScalingMode,
    pub decay: DecayFamily,
    pub feature_map: FeatureMap,
    pub keys: KeyTransform,
}

impl ZooConfig {
    pub const fn of(model: ZooModel) -> Self {
        use DecayFamily as D;
        use FeatureMap::*;
        use KeyTransform as K;
        use ScalingMode as S;
        let (scaling, decay, feature_map, keys) = match model {
            ZooModel::LionLit => (S::Sum, D::None, ShiftedSilu, K::None),
            ZooModel::LionD => (S::Sum, D::Fixed, ShiftedSilu, K::None),
            ZooModel::LionS => (S::Sum, D::Selective, ShiftedSilu, K::None),
            ZooModel::RetNet => (S::None, D::Fixed, Identity, K::None),
            ZooModel::RetNetScaled => (S::Sum, D::Fixed, ShiftedSilu, K::None),
            ZooModel::GatedRfa => (S::Sum, D::Selective, ShiftedSilu, K::DecayComplement),
            ZooModel::Mamba2Scalar => (S::None, D::Selective, Identity, K::None),
            ZooModel::DiagonalDecay => (S::None, D::Diagonal, Identity, K::None),
            ZooModel::Hgrn2 => (S::None, D::Selective, Identity, K::ReplaceByComplement),
            ZooModel::Xlstm => (S::MaxOne, D::Selective, Identity, K::InputGate),
        };
        ZooConfig {
            model,
            scaling,
            decay,
            feature_map,
            keys,
        }
    }

    pub const ALL: [ZooModel; 10] = [
        ZooModel::LionLit,
        ZooModel::LionD,
        ZooModel::LionS,
        ZooModel::RetNet,
        ZooModel::RetNetScaled,
        ZooModel::GatedRfa,
        ZooModel::Mamba2Scalar,
        ZooModel::DiagonalDecay,
        ZooModel::Hgrn2,
        ZooModel::Xlstm,
    ];

    /// Every configuration whose decay is a scalar per position.
    pub fn scalar_models() -> impl Iterator<Item = ZooModel> {
        Self::ALL
            .into_iter()
            .filter(|m| Self::of(*m).decay != DecayFamily::Diagonal)
    }

    pub fn name(&self) -> &'static str {
        self.model.name()
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .map(Self::of)
    }
}

impl ZooModel {
    pub fn name(self) -> &'static str {
        match self {
            ZooModel::LionLit => "lion-lit",
            ZooModel::LionD => "lion-d",
            ZooModel::LionS => "lion-s",
            ZooModel::RetNet => "retnet",
            ZooModel::RetNetScaled => "retnet-scaled",
            ZooModel::GatedRfa => "gated-rfa",
            ZooModel::Mamba2Scalar => "mamba2",
            ZooModel::DiagonalDecay => "diagonal",
            ZooModel::Hgrn2 => "hgrn2",
            ZooModel::Xlstm => "xlstm",
        }
    }
}

/// Projection parameters for one head.
///
/// `wa` has one column for scalar decay families and `d` columns for the
/// diagonal family. `wi`/`bi` parameterize the xLSTM input gate.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wa: Option<Matrix>,
    pub b: f64,
    pub a_fixed: Option<f64>,
    pub wi: Option<Matrix>,
    pub bi: f64,
}

impl ProjectionWeights {
    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    /// Checks shapes and that the parameters required by `cfg` are present.
    pub fn validate(&self, cfg: &ZooConfig) -> Result<()> {
        let d = self.dim();
        for (name, w) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv)] {
            if w.shape() != (d, d) {
                return Err(LionError::shape(format!(
                    "{name} is {:?}, expected ({d}, {d})",
                    w.shape()
                )));
            }
        }
        match cfg.decay {
            DecayFamily::None => {}
            DecayFamily::Fixed => {
                self.a_fixed.ok_or(LionError::MissingWeight("a_fixed"))?;
            }
            DecayFamily::Selective | DecayFamily::Diagonal => {
                let wa = self.wa.as_ref().ok_or(LionError::MissingWeight("wa"))?;
                let cols = if cfg.decay == DecayFamily::Diagonal {
                    d
                } else {
                    1
                };
                if wa.shape() != (d, cols) {
                    return Err(LionError::shape(format!(
                        "wa is {:?}, expected ({d}, {cols})",
                        wa.shape()
                    )));
                }
            }
        }
        if cfg.keys == KeyTransform::InputGate {
            let wi = self.wi.as_ref().ok_or(LionError::MissingWeight("wi"))?;
            if wi.shape() != (d, 1) {
                return Err(LionError::shape(format!(
                    "wi is {:?}, expected ({d}, 1)",
                    wi.shape()
                )));
            }
        }
        Ok(())
    }

    /// Deterministic weights for `cfg` from a 64-bit seed.
    ///
    /// The stream is `SplitMix64` seeded with `seed`; standard normals are
    /// drawn in this order: `wq`, `wk`, `wv` (row-major, scaled by `1/√d`),
    /// then `wa` and `wi` when the configuration needs them (same scaling),
    /// then `a_fixed = 2 + N(0, 1)` for fixed decay. Biases are zero.
    pub fn seeded(seed: u64, d: usize, cfg: &ZooConfig) -> Self {
        let mut rng = SplitMix64::seed_from_u64(seed);
        Self::draw(&mut rng, d, cfg)
    }

    fn draw(rng: &mut SplitMix64, d: usize, cfg: &ZooConfig) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        let mut gaussian = |rows: usize, cols: usize, s: f64| {
            Matrix::from_fn(rows, cols, |_, _| {
                let z: f64 = rng.sample(StandardNormal);
                z * s
            })
        };
        let wq = gaussian(d, d, scale);
        let wk = gaussian(d, d, scale);
        let wv = gaussian(d, d, scale);
        let wa = match cfg.decay {
            DecayFamily::Selective => Some(gaussian(d, 1, scale)),
            DecayFamily::Diagonal => Some(gaussian(d, d, scale)),
            _ => None,
        };
        let wi = (cfg.keys == KeyTransform::InputGate).then(|| gaussian(d, 1, scale));
        let a_fixed =
            (cfg.decay == DecayFamily::Fixed).then(|| 2.0 + gaussian(1, 1, 1.0).get(0, 0));
        ProjectionWeights {
            wq,
            wk,
            wv,
            wa,
            b: 0.0,
            a_fixed,
            wi,
            bi: 0.0,
        }
    }
}

/// Seeded token matrix and weights: weights are drawn first (see
/// [`ProjectionWeights::seeded`]), then `X` as `L x d` standard normals from
/// the same stream.
pub fn seeded_fixture(
    seed: u64,
    len: usize,
    d: usize,
    cfg: &ZooConfig,
) -> (Matrix, ProjectionWeights) {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let weights = ProjectionWeights::draw(&mut rng, d, cfg);
    let x = Matrix::from_fn(len, d, |_, _| rng.sample(StandardNormal));
    (x, weights)
}

/// xLSTM forget and input gates, one per position.
#[derive(Debug, Clone, PartialEq)]
pub struct GatePair {
    pub forget: Vector,
    pub input: Vector,
}

/// The `(Q, K, V, λ)` bundle consumed by every mixer form.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub decay: DecaySpec,
    pub gates: Option<GatePair>,
}

impl MixerInputs {
    pub fn new(q: Matrix, k: Matrix, v: Matrix, decay: DecaySpec) -> Result<Self> {
        let inputs = MixerInputs {
            q,
            k,
            v,
            decay,
            gates: None,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.shape() != self.k.shape() || self.q.rows() != self.v.rows() {
            return Err(LionError::shape(format!(
                "Q {:?}, K {:?}, V {:?} disagree",
                self.q.shape(),
                self.k.shape(),
                self.v.shape()
            )));
        }
        self.decay.validate(self.len())?;
        if let DecaySpec::SelectiveDiagonal(d) = &self.decay {
            if d.cols() != self.key_dim() {
                return Err(LionError::shape(format!(
                    "diagonal decay has {} channels, keys have {}",
                    d.cols(),
                    self.key_dim()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn key_dim(&self) -> usize {
        self.q.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.v.cols()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Shifted and normalized SiLU: `(SiLU(x) + 0.5) / ‖SiLU(x) + 0.5‖₂`.
///
/// SiLU is bounded below by about -0.2785, so every shifted entry is at
/// least 0.22 and the norm never vanishes.
pub fn feature_map_silu(x: &[f64]) -> Vec<f64> {
    assert!(!x.is_empty(), "feature map needs a nonempty vector");
    let shifted: Vec<f64> = x.iter().map(|&v| silu(v) + 0.5).collect();
    let norm = dot(&shifted, &shifted).sqrt();
    shifted.into_iter().map(|v| v / norm).collect()
}

fn apply_feature_map(m: &Matrix, map: FeatureMap) -> Matrix {
    match map {
        FeatureMap::Identity => m.clone(),
        FeatureMap::ShiftedSilu => {
            let mut out = m.clone();
            for i in 0..m.rows() {
                let row = feature_map_silu(m.row(i));
                out.row_mut(i).copy_from_slice(&row);
            }
            out
        }
    }
}

/// Zero-order-hold discretization of log-decays `a`: `λ = eᵃ`, key scale `eᵃ - 1`.
///
/// With `require_stable`, any `a_i > 0` (which would give λ > 1) is rejected.
pub fn zoh_discretize(a: &Vector, require_stable: bool) -> Result<(Vector, Vector)> {
    if let Some((index, &value)) = a
        .iter()
        .enumerate()
        .find(|(_, x)| !x.is_finite() || (require_stable && **x > 0.0))
    {
        return Err(LionError::InvalidDecay {
            index,
            value: value.exp(),
        });
    }
    Ok((a.map(f64::exp), a.map(f64::exp_m1)))
}

/// Projects tokens `x` (`L x d`) into mixer inputs for configuration `cfg`.
pub fn project(x: &Matrix, w: &ProjectionWeights, cfg: &ZooConfig) -> Result<MixerInputs> {
    w.validate(cfg)?;
    if x.cols() != w.dim() {
        return Err(LionError::shape(format!(
            "tokens have {} features, weights expect {}",
            x.cols(),
            w.dim()
        )));
    }
    let len = x.rows();
    let q = apply_feature_map(&matmul(x, &w.wq)?, cfg.feature_map);
    let mut k = apply_feature_map(&matmul(x, &w.wk)?, cfg.feature_map);
    let v = matmul(x, &w.wv)?;

    let gate_logits =
        |wa: &Matrix| -> Result<Matrix> { Ok(matmul(x, wa)?.map(|z| sigmoid(z + w.b))) };
    let decay = match cfg.decay {
        DecayFamily::None => DecaySpec::NoDecay,
        DecayFamily::Fixed => DecaySpec::FixedScalar(sigmoid(
            w.a_fixed.ok_or(LionError::MissingWeight("a_fixed"))?,
        )),
        DecayFamily::Selective => {
            let wa = w.wa.as_ref().ok_or(LionError::MissingWeight("wa"))?;
            DecaySpec::SelectiveScalar(gate_logits(wa)?.column(0))
        }
        DecayFamily::Diagonal => {
            let wa = w.wa.as_ref().ok_or(LionError::MissingWeight("wa"))?;
            DecaySpec::SelectiveDiagonal(gate_logits(wa)?)
        }
    };

    let mut gates = None;
    match cfg.keys {
        KeyTransform::None => {}
        KeyTransform::DecayComplement | KeyTransform::ReplaceByComplement => {
            let lambdas = decay.scalar_decays(len)?;
            for i in 0..len {
                let complement = 1.0 - lambdas[i];
                for kv in k.row_mut(i) {
                    *kv = if cfg.keys == KeyTransform::DecayComplement {
                        complement * *kv
                    } else {
                        complement
                    };
                }
            }
        }
        KeyTransform::InputGate => {
            let wi = w.wi.as_ref().ok_or(LionError::MissingWeight("wi"))?;
            let input = matmul(x, wi)?.map(|z| sigmoid(z + w.bi)).column(0);
            for i in 0..len {
                let g = input[i];
                k.row_mut(i).iter_mut().for_each(|kv| *kv *= g);
            }
            gates = Some(GatePair {
                forget: decay.scalar_decays(len)?,
                input,
            });
        }
    }

    let mut inputs = MixerInputs::new(q, k, v, decay)?;
    inputs.gates = gates;
    Ok(inputs)
}
