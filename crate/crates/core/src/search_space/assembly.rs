//! Macro-architecture stacking: turns a genome into a concrete layer plan.
//!
//! Operations map onto dense stand-ins at the cell's working width: separable
//! convolutions become one (3x3) or two (5x5) affine maps with `tanh`, pools are
//! parameter-free windowed reductions over adjacent features. Both external cell
//! inputs receive the previous cell's output (the stem output for the first cell).
//! A cell concatenates all combination outputs and projects them back to its
//! output width, which doubles after a reduction cell.

use serde::{Deserialize, Serialize};

use super::{CellKind, ModelGenome, Operation};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetStyle {
    #[serde(rename = "cifar-style")]
    Cifar,
    #[serde(rename = "imagenet-style")]
    Imagenet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellRole {
    Normal,
    Reduction,
}

impl CellRole {
    pub fn kind(self) -> CellKind {
        match self {
            CellRole::Normal => CellKind::Normal,
            CellRole::Reduction => CellKind::Reduction,
        }
    }
}

fn default_input_dim() -> usize {
    16
}

fn default_classes() -> usize {
    4
}

/// Stacking depth `n`, initial width `f_init` and the cell pattern.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackingProfile {
    pub n: usize,
    pub f_init: usize,
    pub dataset: DatasetStyle,
    /// Explicit cell-role list overriding the dataset pattern.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Vec<CellRole>>,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
}

impl StackingProfile {
    pub fn cifar(n: usize, f_init: usize) -> Self {
        Self {
            n,
            f_init,
            dataset: DatasetStyle::Cifar,
            pattern: None,
            input_dim: default_input_dim(),
            classes: default_classes(),
        }
    }

    pub fn imagenet(n: usize, f_init: usize) -> Self {
        Self {
            dataset: DatasetStyle::Imagenet,
            ..Self::cifar(n, f_init)
        }
    }

    pub fn with_io(mut self, input_dim: usize, classes: usize) -> Self {
        self.input_dim = input_dim;
        self.classes = classes;
        self
    }

    pub fn with_pattern(mut self, pattern: Vec<CellRole>) -> Self {
        self.pattern = Some(pattern);
        self
    }

    /// `N` normal, reduction, `N` normal, reduction, `N` normal; the ImageNet
    /// pattern prepends two reduction cells.
    pub fn cell_roles(&self) -> Vec<CellRole> {
        if let Some(p) = &self.pattern {
            return p.clone();
        }
        let mut roles = Vec::with_capacity(3 * self.n + 4);
        if self.dataset == DatasetStyle::Imagenet {
            roles.extend([CellRole::Reduction, CellRole::Reduction]);
        }
        for block in 0..3 {
            if block > 0 {
                roles.push(CellRole::Reduction);
            }
            roles.extend(std::iter::repeat(CellRole::Normal).take(self.n));
        }
        roles
    }

    pub fn cell_count(&self) -> usize {
        self.cell_roles().len()
    }

    /// Dense layers in the stem; the ImageNet pattern adds a strided stage.
    pub fn stem_layers(&self) -> usize {
        match self.dataset {
            DatasetStyle::Cifar => 1,
            DatasetStyle::Imagenet => 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.f_init == 0 || self.input_dim == 0 || self.classes < 2 {
            return Err(Error::Config(
                "profile needs f_init >= 1, input_dim >= 1 and classes >= 2".into(),
            ));
        }
        if self.cell_count() == 0 {
            return Err(Error::Config("profile has no cells".into()));
        }
        if self.cell_count() > u16::MAX as usize {
            return Err(Error::Config("profile has too many cells".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

/// Affine map `y = x W + b` with `W` stored `[fan_in, fan_out]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseLayer {
    pub weight: String,
    pub bias: String,
    pub fan_in: usize,
    pub fan_out: usize,
    pub cell_index: Option<u16>,
    pub activation: Activation,
}

impl DenseLayer {
    fn new(prefix: String, fan_in: usize, fan_out: usize, cell: Option<u16>, act: Activation) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            fan_in,
            fan_out,
            cell_index: cell,
            activation: act,
        }
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpNode {
    pub kind: Operation,
    pub width: usize,
    pub layers: Vec<DenseLayer>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CombinationNode {
    pub inputs: [i32; 2],
    pub ops: [OpNode; 2],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellPlan {
    pub index: usize,
    pub role: CellRole,
    /// Width at which the combinations operate.
    pub width: usize,
    pub out_width: usize,
    pub combinations: Vec<CombinationNode>,
    pub projection: DenseLayer,
}

/// Name, shape and cell tag of one trainable tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub cell_index: Option<u16>,
    pub fan_in: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkPlan {
    pub input_dim: usize,
    pub classes: usize,
    pub stem: Vec<DenseLayer>,
    pub cells: Vec<CellPlan>,
    pub classifier: DenseLayer,
}

impl NetworkPlan {
    /// Every dense layer in evaluation order.
    pub fn layers(&self) -> Vec<&DenseLayer> {
        let mut out: Vec<&DenseLayer> = self.stem.iter().collect();
        for cell in &self.cells {
            for combo in &cell.combinations {
                for op in &combo.ops {
                    out.extend(op.layers.iter());
                }
            }
            out.push(&cell.projection);
        }
        out.push(&self.classifier);
        out
    }

    pub fn tensor_specs(&self) -> Vec<TensorSpec> {
        self.layers()
            .into_iter()
            .flat_map(|l| {
                [
                    TensorSpec {
                        name: l.weight.clone(),
                        shape: vec![l.fan_in, l.fan_out],
                        cell_index: l.cell_index,
                        fan_in: l.fan_in,
                    },
                    TensorSpec {
                        name: l.bias.clone(),
                        shape: vec![l.fan_out],
                        cell_index: l.cell_index,
                        fan_in: l.fan_in,
                    },
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    pub fn output_width(&self) -> usize {
        self.classifier.fan_out
    }
}

/// Builds the layer plan for `genome` stacked per `profile`.
pub fn assemble(genome: &ModelGenome, profile: &StackingProfile) -> Result<NetworkPlan> {
    profile.validate()?;
    let roles = profile.cell_roles();
    if genome.policy.len() != roles.len() {
        return Err(Error::PolicyLengthMismatch {
            expected: roles.len(),
            found: genome.policy.len(),
        });
    }
    for kind in [CellKind::Normal, CellKind::Reduction] {
        let cell = genome.cell(kind);
        if cell.combinations.is_empty() {
            return Err(Error::InvalidArgument(format!("{kind} cell is empty")));
        }
        for (j, c) in cell.combinations.iter().enumerate() {
            for i in [c.input_1, c.input_2] {
                if i < -2 || i >= j as i32 {
                    return Err(Error::InvalidArgument(format!(
                        "forward reference in {kind} combination {j}: input {i}"
                    )));
                }
            }
        }
    }

    let width = profile.f_init;
    let stem = (0..profile.stem_layers())
        .map(|s| {
            let fan_in = if s == 0 { profile.input_dim } else { width };
            DenseLayer::new(format!("stem.{s}"), fan_in, width, None, Activation::Tanh)
        })
        .collect();

    let mut cells = Vec::with_capacity(roles.len());
    let mut width = profile.f_init;
    for (index, &role) in roles.iter().enumerate() {
        let tag = Some(index as u16);
        let out_width = match role {
            CellRole::Normal => width,
            CellRole::Reduction => 2 * width,
        };
        let structure = genome.cell(role.kind());
        let combinations = structure
            .combinations
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let ops = [(0usize, c.op_1), (1, c.op_2)].map(|(slot, kind)| OpNode {
                    kind,
                    width,
                    layers: (0..kind.affine_layers())
                        .map(|m| {
                            DenseLayer::new(
                                format!("cell{index}.comb{j}.op{slot}.{}.l{m}", kind.name()),
                                width,
                                width,
                                tag,
                                Activation::Tanh,
                            )
                        })
                        .collect(),
                });
                CombinationNode {
                    inputs: [c.input_1, c.input_2],
                    ops,
                }
            })
            .collect::<Vec<_>>();
        let projection = DenseLayer::new(
            format!("cell{index}.proj"),
            combinations.len() * width,
            out_width,
            tag,
            Activation::Tanh,
        );
        cells.push(CellPlan {
            index,
            role,
            width,
            out_width,
            combinations,
            projection,
        });
        width = out_width;
    }
    let classifier = DenseLayer::new("classifier".into(), width, profile.classes, None, Activation::Linear);
    Ok(NetworkPlan {
        input_dim: profile.input_dim,
        classes: profile.classes,
        stem,
        cells,
        classifier,
    })
}
