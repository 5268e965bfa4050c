//! Closed-form stand-in evaluator: no training, deterministic per genome.

use serde::{Deserialize, Serialize};

use super::{EvalResult, Evaluator};
use crate::error::{Error, Result};
use crate::search_space::{CellKind, CellRole, Combination, ModelGenome, StackingProfile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub seed: u64,
    /// Target architecture. When set, accuracy is the fraction of matching
    /// combination fields and the policy only affects size.
    pub planted: Option<ModelGenome>,
    /// Leave combination inputs out of the accuracy score.
    pub ignore_inputs: bool,
    pub accuracy_floor: f64,
    pub accuracy_span: f64,
    /// Accuracy credit for wide bit widths (unplanted mode only).
    pub bit_bonus: f64,
    pub overhead_bytes: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            planted: None,
            ignore_inputs: false,
            accuracy_floor: 0.5,
            accuracy_span: 0.45,
            bit_bonus: 0.05,
            overhead_bytes: 64,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit_hash(parts: &[u64]) -> f64 {
    let h = parts.iter().fold(0u64, |acc, &p| splitmix(acc ^ p));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn fields(c: &Combination) -> [u64; 4] {
    [
        c.input_1 as i64 as u64,
        c.input_2 as i64 as u64,
        c.op_1 as u64,
        c.op_2 as u64,
    ]
}

pub struct SurrogateEvaluator {
    pub config: SurrogateConfig,
    pub profile: StackingProfile,
}

impl SurrogateEvaluator {
    pub fn new(config: SurrogateConfig, profile: StackingProfile) -> Result<Self> {
        profile.validate()?;
        let c = &config;
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(c.accuracy_floor) && ok(c.accuracy_span) && ok(c.bit_bonus))
            || c.accuracy_floor + c.accuracy_span + c.bit_bonus > 1.0
        {
            return Err(Error::Config(
                "surrogate accuracy terms must be >= 0 and sum to at most 1".into(),
            ));
        }
        Ok(Self { config, profile })
    }

    fn field_mask(&self) -> &'static [usize] {
        if self.config.ignore_inputs {
            &[2, 3]
        } else {
            &[0, 1, 2, 3]
        }
    }

    pub fn accuracy(&self, genome: &ModelGenome) -> f64 {
        let mask = self.field_mask();
        let mut score = 0.0;
        let mut total = 0usize;
        for kind in [CellKind::Normal, CellKind::Reduction] {
            let cell = genome.cell(kind);
            for (j, c) in cell.combinations.iter().enumerate() {
                let f = fields(c);
                for &m in mask {
                    total += 1;
                    score += match &self.config.planted {
                        Some(target) => {
                            let hit = target.cell(kind).combinations.get(j).map(|t| fields(t)[m] == f[m]);
                            f64::from(u8::from(hit == Some(true)))
                        }
                        None => unit_hash(&[self.config.seed, kind as u64, j as u64, m as u64, f[m]]),
                    };
                }
            }
        }
        let arch = if total == 0 { 0.0 } else { score / total as f64 };
        let bits = if self.config.planted.is_some() || genome.policy.is_empty() {
            0.0
        } else {
            let sum: f64 = genome
                .policy
                .bits
                .iter()
                .map(|b| 1.0 - (-f64::from(b.bits()) / 2.0).exp2())
                .sum();
            sum / genome.policy.len() as f64
        };
        let acc = self.config.accuracy_floor + self.config.accuracy_span * arch + self.config.bit_bonus * bits;
        acc.clamp(0.0, 1.0)
    }

    /// Overhead, f32 stem and classifier, plus every cell's dense parameters
    /// at its policy bit width.
    pub fn size_bytes(&self, genome: &ModelGenome) -> Result<u64> {
        let roles = self.profile.cell_roles();
        if genome.policy.len() != roles.len() {
            return Err(Error::PolicyLengthMismatch {
                expected: roles.len(),
                found: genome.policy.len(),
            });
        }
        let p = &self.profile;
        let f = p.f_init as u64;
        let mut float_params = p.input_dim as u64 * f + f;
        float_params += (p.stem_layers() as u64 - 1) * (f * f + f);
        let mut bytes = self.config.overhead_bytes;
        let mut w = f;
        for (role, bits) in roles.iter().zip(&genome.policy.bits) {
            let out = match role {
                CellRole::Normal => w,
                CellRole::Reduction => 2 * w,
            };
            let cell = genome.cell(role.kind());
            let layers: u64 = cell
                .combinations
                .iter()
                .map(|c| (c.op_1.affine_layers() + c.op_2.affine_layers()) as u64)
                .sum();
            let params = layers * (w * w + w) + cell.combinations.len() as u64 * w * out + out;
            bytes += (params * u64::from(bits.bits())).div_ceil(8);
            w = out;
        }
        float_params += w * p.classes as u64 + p.classes as u64;
        Ok(bytes + 4 * float_params)
    }
}

impl Evaluator for SurrogateEvaluator {
    fn evaluate(&self, genome: &ModelGenome) -> Result<EvalResult> {
        let size_bytes = self.size_bytes(genome)?;
        Ok(EvalResult {
            accuracy: self.accuracy(genome),
            size_bytes,
            quantized_model: None,
        })
    }
}
