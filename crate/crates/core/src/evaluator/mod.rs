//! Accuracy and size measurement for genomes: toy training on synthetic data,
//! post-training quantization, and a closed-form surrogate.

pub mod dataset;
pub mod network;
pub mod surrogate;

pub use dataset::{load_csv, make_blobs, BlobConfig, Dataset};
pub use network::{train_model, Network, SharedWeights, TrainHyper, TrainReport};
pub use surrogate::{SurrogateConfig, SurrogateEvaluator};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::quantized_model_bytes;
use crate::error::{Error, Result};
use crate::quantizer::{dequantize_tensor, quantize_tensor};
use crate::search_space::{assemble, ModelGenome, NetworkPlan, QuantizationPolicy, StackingProfile};
use crate::tensor_model::{float_model_bytes, FloatModel, QuantizedModel, WeightTensor};

pub const GENOME_KEY: &str = "genome";
pub const GENOME_DIGEST_KEY: &str = "genome_digest";
pub const PROFILE_KEY: &str = "profile";
pub const POLICY_KEY: &str = "policy";
pub const BUCKET_SIZE_KEY: &str = "bucket_size";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// Validation accuracy in `[0, 1]`.
    pub accuracy: f64,
    pub size_bytes: u64,
    pub quantized_model: Option<Arc<QuantizedModel>>,
}

/// Maps a genome to its accuracy and storage size.
pub trait Evaluator: Send + Sync {
    fn evaluate(&self, genome: &ModelGenome) -> Result<EvalResult>;
}

/// Tagged tensors that stay at full precision.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExemptionRules {
    pub names: BTreeSet<String>,
    pub cells: BTreeSet<u16>,
}

impl ExemptionRules {
    pub fn exempts(&self, t: &WeightTensor) -> bool {
        match t.cell_index {
            None => true,
            Some(c) => self.cells.contains(&c) || self.names.contains(&t.name),
        }
    }
}

/// Quantizes every non-exempt tagged tensor at its cell's policy width.
/// Untagged and exempt tensors are stored at the model's float width.
pub fn quantize_model(
    model: &FloatModel,
    policy: &QuantizationPolicy,
    bucket_size: usize,
    exemptions: &ExemptionRules,
) -> Result<QuantizedModel> {
    let cells = model.cell_count();
    if cells == 0 {
        return Err(Error::InvalidArgument("model has no cell-tagged tensors".into()));
    }
    if policy.len() != cells {
        return Err(Error::PolicyLengthMismatch {
            expected: cells,
            found: policy.len(),
        });
    }
    let mut quantized = Vec::new();
    let mut exempt = Vec::new();
    for t in &model.tensors {
        if exemptions.exempts(t) {
            exempt.push(t.clone());
            continue;
        }
        let cell = t.cell_index.expect("exempts() keeps untagged tensors") as usize;
        let bits = *policy.bits.get(cell).ok_or(Error::MissingPolicyEntry(cell))?;
        quantized.push(quantize_tensor(t, bits, bucket_size)?);
    }
    let mut metadata = model.metadata.clone();
    metadata.insert(POLICY_KEY.into(), serde_json::to_string(policy)?);
    metadata.insert(BUCKET_SIZE_KEY.into(), bucket_size.to_string());
    QuantizedModel::new(quantized, exempt, model.float_width, metadata)
}

/// Dequantized and exempt tensors, in container order.
pub fn restore_tensors(model: &QuantizedModel) -> Result<Vec<WeightTensor>> {
    let mut out = model
        .tensors
        .iter()
        .map(dequantize_tensor)
        .collect::<Result<Vec<_>>>()?;
    out.extend(model.exempt_tensors.iter().cloned());
    Ok(out)
}

/// Validation accuracy of `plan` run with the dequantized weights.
pub fn evaluate_quantized(plan: &NetworkPlan, model: &QuantizedModel, data: &Dataset) -> Result<f64> {
    let tensors = restore_tensors(model)?;
    let by_name: HashMap<&str, &WeightTensor> = tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let net = Network::from_tensors(plan, |n| by_name.get(n).copied())?;
    net.accuracy(data, &data.validation)
}

fn quantized_result(plan: &NetworkPlan, q: QuantizedModel, data: &Dataset) -> Result<EvalResult> {
    let accuracy = evaluate_quantized(plan, &q, data)?;
    let size_bytes = quantized_model_bytes(&q)?.len() as u64;
    Ok(EvalResult {
        accuracy,
        size_bytes,
        quantized_model: Some(Arc::new(q)),
    })
}

fn digest_seed(base: u64, digest: &str) -> u64 {
    let bytes = hex::decode(&digest[..16]).expect("hex digest");
    base ^ u64::from_le_bytes(bytes.try_into().expect("8 bytes"))
}

/// Trains each genome's network on a dataset and measures it after
/// post-training quantization.
pub struct ToyEvaluator {
    pub profile: StackingProfile,
    pub data: Arc<Dataset>,
    pub hyper: TrainHyper,
    pub bucket_size: usize,
    pub exemptions: ExemptionRules,
    share_parameters: bool,
    shared: Mutex<SharedWeights>,
    trained: Mutex<HashMap<String, Arc<FloatModel>>>,
}

impl ToyEvaluator {
    pub fn new(profile: StackingProfile, data: Arc<Dataset>, hyper: TrainHyper, bucket_size: usize) -> Result<Self> {
        profile.validate()?;
        hyper.validate()?;
        if bucket_size == 0 {
            return Err(Error::Config("bucket_size must be positive".into()));
        }
        if data.dims != profile.input_dim || data.classes > profile.classes {
            return Err(Error::DimensionMismatch(format!(
                "dataset ({} features, {} classes) does not fit profile ({} inputs, {} classes)",
                data.dims, data.classes, profile.input_dim, profile.classes
            )));
        }
        Ok(Self {
            profile,
            data,
            hyper,
            bucket_size,
            exemptions: ExemptionRules::default(),
            share_parameters: false,
            shared: Mutex::new(SharedWeights::new()),
            trained: Mutex::new(HashMap::new()),
        })
    }

    pub fn with_exemptions(mut self, exemptions: ExemptionRules) -> Self {
        self.exemptions = exemptions;
        self
    }

    /// Enables the cross-genome weight cache: layers start from the most
    /// recently trained weights with the same name, and genomes that differ
    /// only in policy reuse one trained model.
    pub fn with_parameter_sharing(mut self, on: bool) -> Self {
        self.share_parameters = on;
        self
    }

    pub fn parameter_sharing(&self) -> bool {
        self.share_parameters
    }

    /// Number of architectures with a cached trained model.
    pub fn cached_models(&self) -> usize {
        self.trained.lock().expect("cache lock").len()
    }

    /// Trains the float model for `genome`'s architecture. The training seed
    /// mixes the configured seed with the architecture digest.
    pub fn train_float(&self, genome: &ModelGenome) -> Result<Arc<FloatModel>> {
        let arch = genome.architecture_digest();
        if self.share_parameters {
            if let Some(m) = self.trained.lock().expect("cache lock").get(&arch) {
                return Ok(m.clone());
            }
        }
        let plan = assemble(genome, &self.profile)?;
        let hyper = TrainHyper {
            seed: digest_seed(self.hyper.seed, &arch),
            ..self.hyper.clone()
        };
        let net = if self.share_parameters {
            let mut shared = self.shared.lock().expect("shared lock");
            let (net, _) = train_model(&plan, &self.data, &hyper, Some(&shared))?;
            net.export_shared(&mut shared);
            net
        } else {
            train_model(&plan, &self.data, &hyper, None)?.0
        };
        let model = Arc::new(net.to_float_model(genome_metadata(genome, &self.profile)?)?);
        if self.share_parameters {
            self.trained.lock().expect("cache lock").insert(arch, model.clone());
        }
        Ok(model)
    }
}

/// Metadata recorded in trained model files.
pub fn genome_metadata(genome: &ModelGenome, profile: &StackingProfile) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    m.insert(GENOME_KEY.into(), genome.to_json());
    m.insert(GENOME_DIGEST_KEY.into(), genome.digest());
    m.insert(PROFILE_KEY.into(), serde_json::to_string(profile)?);
    Ok(m)
}

impl Evaluator for ToyEvaluator {
    fn evaluate(&self, genome: &ModelGenome) -> Result<EvalResult> {
        let plan = assemble(genome, &self.profile)?;
        let model = self.train_float(genome)?;
        let q = quantize_model(&model, &genome.policy, self.bucket_size, &self.exemptions)?;
        quantized_result(&plan, q, &self.data)
    }
}

/// Searches policies for one frozen, already trained architecture.
pub struct PolicyEvaluator {
    pub plan: NetworkPlan,
    pub model: Arc<FloatModel>,
    pub data: Arc<Dataset>,
    pub bucket_size: usize,
    pub exemptions: ExemptionRules,
    architecture: String,
    model_digest: String,
    memo: Mutex<HashMap<(String, QuantizationPolicy), EvalResult>>,
}

impl PolicyEvaluator {
    pub fn new(
        genome: &ModelGenome,
        profile: &StackingProfile,
        model: Arc<FloatModel>,
        data: Arc<Dataset>,
        bucket_size: usize,
        exemptions: ExemptionRules,
    ) -> Result<Self> {
        let plan = assemble(genome, profile)?;
        if model.cell_count() == 0 {
            return Err(Error::InvalidArgument("model has no cell-tagged tensors".into()));
        }
        Network::from_model(&plan, &model)?;
        let model_digest = hex::encode(Sha256::digest(float_model_bytes(&model)?));
        Ok(Self {
            plan,
            model,
            data,
            bucket_size,
            exemptions,
            architecture: genome.architecture_digest(),
            model_digest,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn memo_len(&self) -> usize {
        self.memo.lock().expect("memo lock").len()
    }
}

impl Evaluator for PolicyEvaluator {
    fn evaluate(&self, genome: &ModelGenome) -> Result<EvalResult> {
        if genome.architecture_digest() != self.architecture {
            return Err(Error::InvalidArgument("genome architecture differs from the frozen model".into()));
        }
        let key = (self.model_digest.clone(), genome.policy.clone());
        if let Some(hit) = self.memo.lock().expect("memo lock").get(&key) {
            return Ok(hit.clone());
        }
        let q = quantize_model(&self.model, &genome.policy, self.bucket_size, &self.exemptions)?;
        let result = quantized_result(&self.plan, q, &self.data)?;
        self.memo.lock().expect("memo lock").insert(key, result.clone());
        Ok(result)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizer::BitWidth;
    use crate::search_space::{SearchSpace, SpaceConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (SearchSpace, ToyEvaluator) {
        let profile = StackingProfile::cifar(1, 8).with_io(4, 3);
        let data = make_blobs(&BlobConfig { classes: 3, dims: 4, samples: 300, spread: 0.15 }, 2).unwrap();
        let hyper = TrainHyper { epochs: 8, ..Default::default() };
        let space = SearchSpace::for_profile(SpaceConfig::default(), &profile).unwrap();
        (space, ToyEvaluator::new(profile, Arc::new(data), hyper, 64).unwrap())
    }

    #[test]
    fn toy_evaluation_is_deterministic() {
        let (space, eval) = toy();
        let g = space.random_genome(&mut ChaCha8Rng::seed_from_u64(3));
        let a = eval.evaluate(&g).unwrap();
        let b = eval.evaluate(&g).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.accuracy));
        let bytes = quantized_model_bytes(a.quantized_model.as_ref().unwrap()).unwrap();
        assert_eq!(bytes.len() as u64, a.size_bytes);
    }

    #[test]
    fn policy_errors() {
        let (space, eval) = toy();
        let g = space.random_genome(&mut ChaCha8Rng::seed_from_u64(5));
        let model = eval.train_float(&g).unwrap();
        let short = QuantizationPolicy::uniform(BitWidth::new(8).unwrap(), 4);
        assert!(matches!(
            quantize_model(&model, &short, 64, &ExemptionRules::default()),
            Err(Error::PolicyLengthMismatch { expected: 5, found: 4 })
        ));
        let long = QuantizationPolicy::uniform(BitWidth::new(8).unwrap(), 6);
        assert!(matches!(
            quantize_model(&model, &long, 64, &ExemptionRules::default()),
            Err(Error::PolicyLengthMismatch { expected: 5, found: 6 })
        ));
    }

    #[test]
    fn exempt_cells_stay_float() {
        let (space, eval) = toy();
        let g = space.random_genome(&mut ChaCha8Rng::seed_from_u64(6));
        let model = eval.train_float(&g).unwrap();
        let rules = ExemptionRules { cells: [0u16].into(), ..Default::default() };
        let q = quantize_model(&model, &g.policy, 64, &rules).unwrap();
        assert!(q.tensors.iter().all(|t| t.cell_index != Some(0)));
        assert!(q.exempt_tensors.iter().any(|t| t.cell_index == Some(0)));
        let restored = restore_tensors(&q).unwrap();
        let cell0 = model.tensors.iter().find(|t| t.cell_index == Some(0)).unwrap();
        assert_eq!(restored.iter().find(|t| t.name == cell0.name).unwrap(), cell0);
    }

    #[test]
    fn sharing_reuses_weights_across_policies() {
        let (space, eval) = toy();
        let eval = eval.with_parameter_sharing(true);
        let g = space.random_genome(&mut ChaCha8Rng::seed_from_u64(8));
        let mut h = g.clone();
        h.policy = QuantizationPolicy::uniform(BitWidth::new(16).unwrap(), 5);
        eval.evaluate(&g).unwrap();
        eval.evaluate(&h).unwrap();
        assert_eq!(eval.cached_models(), 1);
        assert!(Arc::ptr_eq(&eval.train_float(&g).unwrap(), &eval.train_float(&h).unwrap()));
    }

    #[test]
    fn policy_evaluator_memoizes() {
        let (space, eval) = toy();
        let g = space.random_genome(&mut ChaCha8Rng::seed_from_u64(9));
        let model = eval.train_float(&g).unwrap();
        let pe = PolicyEvaluator::new(&g, &eval.profile, model, eval.data.clone(), 64, ExemptionRules::default()).unwrap();
        let a = pe.evaluate(&g).unwrap();
        assert_eq!(pe.evaluate(&g).unwrap(), a);
        assert_eq!(pe.memo_len(), 1);
        let mut other = g.clone();
        other.normal.combinations[0].op_1 = if g.normal.combinations[0].op_1 == crate::search_space::Operation::Zero {
            crate::search_space::Operation::Identity
        } else {
            crate::search_space::Operation::Zero
        };
        assert!(pe.evaluate(&other).is_err());
    }
}
