//! Genome encoding for cell architectures and per-cell bit policies.
//!
//! A genome holds a normal cell, a reduction cell (each an ordered list of
//! combinations) and one bit-width per cell of the assembled network.

mod assembly;

pub use assembly::{
    assemble, Activation, CellPlan, CellRole, CombinationNode, DatasetStyle, DenseLayer,
    NetworkPlan, OpNode, StackingProfile, TensorSpec,
};

use std::fmt;

use num_bigint::BigUint;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quantizer::BitWidth;

/// Candidate operation applied to one combination input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operation {
    #[serde(rename = "sep_conv_3")]
    SepConv3,
    #[serde(rename = "sep_conv_5")]
    SepConv5,
    #[serde(rename = "avg_pool_3")]
    AvgPool3,
    #[serde(rename = "max_pool_3")]
    MaxPool3,
    #[serde(rename = "zero")]
    Zero,
    #[serde(rename = "identity")]
    Identity,
}

impl Operation {
    pub const ALL: [Operation; 6] = [
        Operation::SepConv3,
        Operation::SepConv5,
        Operation::AvgPool3,
        Operation::MaxPool3,
        Operation::Zero,
        Operation::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operation::SepConv3 => "sep_conv_3",
            Operation::SepConv5 => "sep_conv_5",
            Operation::AvgPool3 => "avg_pool_3",
            Operation::MaxPool3 => "max_pool_3",
            Operation::Zero => "zero",
            Operation::Identity => "identity",
        }
    }

    /// Number of stacked learned affine maps in the dense stand-in.
    pub fn affine_layers(self) -> usize {
        match self {
            Operation::SepConv3 => 1,
            Operation::SepConv5 => 2,
            _ => 0,
        }
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Two inputs and two operations; output is the sum of both operation outputs.
///
/// Input `-2` and `-1` are the cell's external inputs, `0..j` refer to earlier
/// combinations of the same cell. Serialized as `[i1, i2, "op1", "op2"]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(i32, i32, Operation, Operation)", into = "(i32, i32, Operation, Operation)")]
pub struct Combination {
    pub input_1: i32,
    pub input_2: i32,
    pub op_1: Operation,
    pub op_2: Operation,
}

impl From<(i32, i32, Operation, Operation)> for Combination {
    fn from((input_1, input_2, op_1, op_2): (i32, i32, Operation, Operation)) -> Self {
        Self {
            input_1,
            input_2,
            op_1,
            op_2,
        }
    }
}

impl From<Combination> for (i32, i32, Operation, Operation) {
    fn from(c: Combination) -> Self {
        (c.input_1, c.input_2, c.op_1, c.op_2)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellGenome {
    pub combinations: Vec<Combination>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QuantizationPolicy {
    pub bits: Vec<BitWidth>,
}

impl QuantizationPolicy {
    pub fn uniform(bits: BitWidth, cells: usize) -> Self {
        Self {
            bits: vec![bits; cells],
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelGenome {
    pub normal: CellGenome,
    pub reduction: CellGenome,
    pub policy: QuantizationPolicy,
}

impl ModelGenome {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("genome always serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    /// Digest of the two cell structures only (policy ignored).
    pub fn architecture_digest(&self) -> String {
        let arch = serde_json::to_string(&(&self.normal, &self.reduction)).expect("serializes");
        hex::encode(Sha256::digest(arch.as_bytes()))
    }

    pub fn cell(&self, kind: CellKind) -> &CellGenome {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduction,
        }
    }

    fn cell_mut(&mut self, kind: CellKind) -> &mut CellGenome {
        match kind {
            CellKind::Normal => &mut self.normal,
            CellKind::Reduction => &mut self.reduction,
        }
    }
}

/// Which of the two searched cell structures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellKind {
    Normal,
    Reduction,
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Normal => "normal",
            CellKind::Reduction => "reduction",
        })
    }
}

fn default_combinations() -> usize {
    5
}

fn default_operations() -> Vec<Operation> {
    Operation::ALL.to_vec()
}

fn default_bit_choices() -> Vec<BitWidth> {
    [4, 8, 16].map(|b| BitWidth::new(b).expect("valid")).to_vec()
}

/// Shape of the searchable space, independent of the stacking profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceConfig {
    #[serde(default = "default_combinations")]
    pub combinations_per_cell: usize,
    #[serde(default = "default_operations")]
    pub operations: Vec<Operation>,
    #[serde(default = "default_bit_choices")]
    pub bit_choices: Vec<BitWidth>,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            combinations_per_cell: default_combinations(),
            operations: default_operations(),
            bit_choices: default_bit_choices(),
        }
    }
}

/// One invariant violation found by [`SearchSpace::validate`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Diagnostic {
    EmptyCell(CellKind),
    CombinationCount { cell: CellKind, expected: usize, found: usize },
    ForwardReference { cell: CellKind, position: usize, slot: usize, index: i32 },
    OperationNotAllowed { cell: CellKind, position: usize, op: Operation },
    PolicyLengthMismatch { expected: usize, found: usize },
    BitNotAllowed { position: usize, bits: BitWidth },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::EmptyCell(c) => write!(f, "{c} cell has no combinations"),
            Diagnostic::CombinationCount { cell, expected, found } => {
                write!(f, "{cell} cell has {found} combinations, expected {expected}")
            }
            Diagnostic::ForwardReference { cell, position, slot, index } => write!(
                f,
                "forward reference: {cell} combination {position} input {} uses index {index}",
                slot + 1
            ),
            Diagnostic::OperationNotAllowed { cell, position, op } => {
                write!(f, "{cell} combination {position} uses disallowed operation {op}")
            }
            Diagnostic::PolicyLengthMismatch { expected, found } => {
                write!(f, "policy length mismatch: expected {expected}, found {found}")
            }
            Diagnostic::BitNotAllowed { position, bits } => {
                write!(f, "policy entry {position} uses disallowed bit width {bits}")
            }
        }
    }
}

fn input_range(position: usize) -> std::ops::Range<i32> {
    -2..position as i32
}

/// A space config bound to the cell count of a stacking profile.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    pub config: SpaceConfig,
    pub cell_count: usize,
}

impl SearchSpace {
    pub fn new(config: SpaceConfig, cell_count: usize) -> Result<Self> {
        if config.combinations_per_cell == 0 {
            return Err(Error::Config("combinations_per_cell must be at least 1".into()));
        }
        if config.operations.is_empty() {
            return Err(Error::Config("operation set is empty".into()));
        }
        if config.bit_choices.is_empty() {
            return Err(Error::Config("bit choice set is empty".into()));
        }
        if cell_count == 0 {
            return Err(Error::Config("profile has no cells".into()));
        }
        Ok(Self { config, cell_count })
    }

    pub fn for_profile(config: SpaceConfig, profile: &StackingProfile) -> Result<Self> {
        Self::new(config, profile.cell_count())
    }

    pub fn random_cell<R: Rng + ?Sized>(&self, rng: &mut R) -> CellGenome {
        let ops = &self.config.operations;
        let combinations = (0..self.config.combinations_per_cell)
            .map(|j| Combination {
                input_1: rng.random_range(input_range(j)),
                input_2: rng.random_range(input_range(j)),
                op_1: *ops.choose(rng).expect("nonempty"),
                op_2: *ops.choose(rng).expect("nonempty"),
            })
            .collect();
        CellGenome { combinations }
    }

    pub fn random_policy<R: Rng + ?Sized>(&self, rng: &mut R) -> QuantizationPolicy {
        QuantizationPolicy {
            bits: (0..self.cell_count)
                .map(|_| *self.config.bit_choices.choose(rng).expect("nonempty"))
                .collect(),
        }
    }

    /// Uniformly random valid genome.
    pub fn random_genome<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelGenome {
        let normal = self.random_cell(rng);
        let reduction = self.random_cell(rng);
        let policy = self.random_policy(rng);
        ModelGenome {
            normal,
            reduction,
            policy,
        }
    }

    /// Lists every violated invariant; empty means valid.
    pub fn validate(&self, genome: &ModelGenome) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        for kind in [CellKind::Normal, CellKind::Reduction] {
            let cell = genome.cell(kind);
            if cell.combinations.is_empty() {
                out.push(Diagnostic::EmptyCell(kind));
            } else if cell.combinations.len() != self.config.combinations_per_cell {
                out.push(Diagnostic::CombinationCount {
                    cell: kind,
                    expected: self.config.combinations_per_cell,
                    found: cell.combinations.len(),
                });
            }
            for (j, c) in cell.combinations.iter().enumerate() {
                for (slot, index) in [c.input_1, c.input_2].into_iter().enumerate() {
                    if !input_range(j).contains(&index) {
                        out.push(Diagnostic::ForwardReference {
                            cell: kind,
                            position: j,
                            slot,
                            index,
                        });
                    }
                }
                for op in [c.op_1, c.op_2] {
                    if !self.config.operations.contains(&op) {
                        out.push(Diagnostic::OperationNotAllowed {
                            cell: kind,
                            position: j,
                            op,
                        });
                    }
                }
            }
        }
        if genome.policy.len() != self.cell_count {
            out.push(Diagnostic::PolicyLengthMismatch {
                expected: self.cell_count,
                found: genome.policy.len(),
            });
        }
        for (position, &bits) in genome.policy.bits.iter().enumerate() {
            if !self.config.bit_choices.contains(&bits) {
                out.push(Diagnostic::BitNotAllowed { position, bits });
            }
        }
        out
    }

    /// Replaces one field of one combination with a different valid value.
    pub fn mutate_architecture<R: Rng + ?Sized>(
        &self,
        genome: &ModelGenome,
        rng: &mut R,
    ) -> Result<ModelGenome> {
        let kind = if rng.random_bool(0.5) {
            CellKind::Normal
        } else {
            CellKind::Reduction
        };
        let mut child = genome.clone();
        let cell = child.cell_mut(kind);
        if cell.combinations.is_empty() {
            return Err(Error::NoAlternative(format!("{kind} cell is empty")));
        }
        let position = rng.random_range(0..cell.combinations.len());
        let combo = &mut cell.combinations[position];

        let input_alternatives = |current: i32| -> Vec<i32> {
            input_range(position).filter(|&i| i != current).collect()
        };
        let op_alternatives = |current: Operation| -> Vec<Operation> {
            self.config
                .operations
                .iter()
                .copied()
                .filter(|&o| o != current)
                .collect()
        };
        let fields: Vec<usize> = (0..4)
            .filter(|&f| match f {
                0 => !input_alternatives(combo.input_1).is_empty(),
                1 => !input_alternatives(combo.input_2).is_empty(),
                2 => !op_alternatives(combo.op_1).is_empty(),
                _ => !op_alternatives(combo.op_2).is_empty(),
            })
            .collect();
        let field = *fields.choose(rng).ok_or_else(|| {
            Error::NoAlternative(format!("{kind} combination {position} has no mutable field"))
        })?;
        match field {
            0 => combo.input_1 = *input_alternatives(combo.input_1).choose(rng).expect("checked"),
            1 => combo.input_2 = *input_alternatives(combo.input_2).choose(rng).expect("checked"),
            2 => combo.op_1 = *op_alternatives(combo.op_1).choose(rng).expect("checked"),
            _ => combo.op_2 = *op_alternatives(combo.op_2).choose(rng).expect("checked"),
        }
        Ok(child)
    }

    /// Resets one policy entry to a different bit choice.
    pub fn mutate_policy<R: Rng + ?Sized>(
        &self,
        genome: &ModelGenome,
        rng: &mut R,
    ) -> Result<ModelGenome> {
        if self.config.bit_choices.len() < 2 {
            return Err(Error::NoAlternative("only one bit choice configured".into()));
        }
        if genome.policy.is_empty() {
            return Err(Error::NoAlternative("policy is empty".into()));
        }
        let mut child = genome.clone();
        let position = rng.random_range(0..child.policy.len());
        let current = child.policy.bits[position];
        let alternatives: Vec<BitWidth> = self
            .config
            .bit_choices
            .iter()
            .copied()
            .filter(|&b| b != current)
            .collect();
        child.policy.bits[position] = *alternatives.choose(rng).expect("at least one alternative");
        Ok(child)
    }

    /// Number of distinct single-cell structures: `prod_j (j+2)^2 |ops|^2`.
    pub fn cell_cardinality(&self) -> BigUint {
        let ops = self.config.operations.len() as u64;
        (0..self.config.combinations_per_cell as u64)
            .map(|j| BigUint::from((j + 2) * (j + 2) * ops * ops))
            .product()
    }

    pub fn architecture_cardinality(&self) -> BigUint {
        let cell = self.cell_cardinality();
        &cell * &cell
    }

    pub fn policy_cardinality(&self) -> BigUint {
        BigUint::from(self.config.bit_choices.len()).pow(self.cell_count as u32)
    }

    pub fn cardinality(&self) -> BigUint {
        self.architecture_cardinality() * self.policy_cardinality()
    }
}
