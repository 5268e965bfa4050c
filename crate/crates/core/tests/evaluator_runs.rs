mod common;

use std::sync::Arc;

use nasquant::codec::quantized_model_bytes;
use nasquant::evaluator::{
    evaluate_quantized, make_blobs, quantize_model, BlobConfig, Dataset, Evaluator, ExemptionRules, Network,
    SurrogateConfig, SurrogateEvaluator, ToyEvaluator, TrainHyper,
};
use nasquant::objective::fitness;
use nasquant::search_space::{
    assemble, CellGenome, CellRole, Combination, ModelGenome, Operation, QuantizationPolicy, SearchSpace,
    SpaceConfig, StackingProfile,
};
use nasquant::tensor_model::{float_model_bytes, FloatModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{bw, enumerate_genomes, nearest_centroid_accuracy};

fn blobs(seed: u64) -> Dataset {
    make_blobs(&BlobConfig { classes: 4, dims: 16, samples: 2000, spread: 0.15 }, seed).unwrap()
}

fn uniform(genome: &ModelGenome, bits: u8) -> QuantizationPolicy {
    QuantizationPolicy::uniform(bw(bits), genome.policy.len())
}

fn float_accuracy(profile: &StackingProfile, genome: &ModelGenome, model: &FloatModel, data: &Dataset) -> f64 {
    let net = Network::from_model(&assemble(genome, profile).unwrap(), model).unwrap();
    net.accuracy(data, &data.validation).unwrap()
}

#[test]
fn blobs_are_centroid_separable() {
    let d = blobs(7);
    assert_eq!(d, blobs(7));
    assert!(nearest_centroid_accuracy(&d) >= 0.95);
    let tight = make_blobs(&BlobConfig { spread: 0.0, ..Default::default() }, 7).unwrap();
    assert_eq!(nearest_centroid_accuracy(&tight), 1.0);
}

#[test]
fn zero_op_network_is_at_chance() {
    let profile = StackingProfile::cifar(1, 8);
    let zero = |n| CellGenome {
        combinations: vec![
            Combination { input_1: -2, input_2: -1, op_1: Operation::Zero, op_2: Operation::Zero };
            n
        ],
    };
    let genome = ModelGenome { normal: zero(5), reduction: zero(5), policy: QuantizationPolicy::uniform(bw(8), 5) };
    let data = Arc::new(blobs(7));
    let eval = ToyEvaluator::new(profile.clone(), data.clone(), TrainHyper::default(), 256).unwrap();
    let model = eval.train_float(&genome).unwrap();
    let acc = float_accuracy(&profile, &genome, &model, &data);
    assert!((acc - 0.25).abs() <= 0.1, "{acc}");
}

#[test]
fn quantized_evaluation_examples() {
    let profile = StackingProfile::cifar(1, 8);
    let data = Arc::new(blobs(3));
    let space = SearchSpace::for_profile(SpaceConfig::default(), &profile).unwrap();
    let genome = space.random_genome(&mut ChaCha8Rng::seed_from_u64(4));
    let eval = ToyEvaluator::new(profile.clone(), data.clone(), TrainHyper::default(), 256).unwrap();
    let model = eval.train_float(&genome).unwrap();
    let plan = assemble(&genome, &profile).unwrap();
    let float_acc = float_accuracy(&profile, &genome, &model, &data);
    let none = ExemptionRules::default();

    let q16 = quantize_model(&model, &uniform(&genome, 16), 256, &none).unwrap();
    assert!((evaluate_quantized(&plan, &q16, &data).unwrap() - float_acc).abs() <= 0.01);

    let sizes: Vec<usize> = [2, 4, 8, 16]
        .iter()
        .map(|&b| {
            let q = quantize_model(&model, &uniform(&genome, b), 256, &none).unwrap();
            quantized_model_bytes(&q).unwrap().len()
        })
        .collect();
    assert!(sizes.windows(2).all(|w| w[0] < w[1]), "{sizes:?}");

    let all = ExemptionRules { cells: (0..5).collect(), ..Default::default() };
    let q = quantize_model(&model, &uniform(&genome, 4), 256, &all).unwrap();
    assert!(q.tensors.is_empty());
    assert_eq!(evaluate_quantized(&plan, &q, &data).unwrap(), float_acc);
    // JSQQ adds two bytes of section header over JSQW when the metadata matches
    let same_meta = FloatModel::new(model.tensors.clone(), q.metadata.clone(), model.float_width).unwrap();
    assert_eq!(
        quantized_model_bytes(&q).unwrap().len(),
        float_model_bytes(&same_meta).unwrap().len() + 2
    );
}

#[test]
fn constant_buckets_reproduce_float_accuracy() {
    let profile = StackingProfile::cifar(1, 8);
    let data = Arc::new(blobs(5));
    let space = SearchSpace::for_profile(SpaceConfig::default(), &profile).unwrap();
    let genome = space.random_genome(&mut ChaCha8Rng::seed_from_u64(5));
    let eval = ToyEvaluator::new(profile.clone(), data.clone(), TrainHyper { epochs: 5, ..Default::default() }, 256).unwrap();
    let trained = eval.train_float(&genome).unwrap();
    let k = 16;
    let mut tensors = trained.tensors.clone();
    for t in tensors.iter_mut().filter(|t| t.cell_index.is_some()) {
        for bucket in t.values.chunks_mut(k) {
            let v = bucket[0];
            bucket.fill(v);
        }
    }
    let flat = FloatModel::new(tensors, trained.metadata.clone(), trained.float_width).unwrap();
    let plan = assemble(&genome, &profile).unwrap();
    let float_acc = float_accuracy(&profile, &genome, &flat, &data);
    for b in [2, 8] {
        let q = quantize_model(&flat, &uniform(&genome, b), k, &ExemptionRules::default()).unwrap();
        assert_eq!(evaluate_quantized(&plan, &q, &data).unwrap(), float_acc);
    }
}

#[test]
fn sharing_reuses_weights_across_policies() {
    let profile = StackingProfile::cifar(1, 8);
    let data = Arc::new(blobs(2));
    let hyper = TrainHyper { epochs: 5, ..Default::default() };
    let eval = ToyEvaluator::new(profile.clone(), data, hyper, 256).unwrap().with_parameter_sharing(true);
    let space = SearchSpace::for_profile(SpaceConfig::default(), &profile).unwrap();
    let a = space.random_genome(&mut ChaCha8Rng::seed_from_u64(1));
    let b = ModelGenome { policy: uniform(&a, 16), ..a.clone() };
    let ma = eval.train_float(&a).unwrap();
    let mb = eval.train_float(&b).unwrap();
    assert!(Arc::ptr_eq(&ma, &mb));
    assert_eq!(eval.cached_models(), 1);
    let (ra, rb) = (eval.evaluate(&a).unwrap(), eval.evaluate(&b).unwrap());
    assert_eq!(eval.cached_models(), 1);
    let qa = ra.quantized_model.unwrap();
    let qb = rb.quantized_model.unwrap();
    assert!(qb.tensors.iter().all(|t| t.bit_width == bw(16)));
    assert_eq!(qa.tensors.len(), qb.tensors.len());
}

#[test]
fn planted_genome_is_the_enumerated_optimum() {
    let profile = StackingProfile::cifar(1, 8).with_pattern(vec![CellRole::Normal, CellRole::Reduction]);
    let choices = [bw(4), bw(8)];
    let all = enumerate_genomes(1, &Operation::ALL, 2, &choices);
    let planted = all[12_345].clone();
    let eval = SurrogateEvaluator::new(
        SurrogateConfig { planted: Some(planted.clone()), ..Default::default() },
        profile.clone(),
    )
    .unwrap();
    let results: Vec<_> = all.iter().map(|g| eval.evaluate(g).unwrap()).collect();
    let target = results.iter().map(|r| r.size_bytes).max().unwrap();
    let best = results
        .iter()
        .map(|r| fitness(r.accuracy, r.size_bytes, target).unwrap().fitness)
        .fold(f64::NEG_INFINITY, f64::max);
    let p = eval.evaluate(&planted).unwrap();
    assert_eq!(fitness(p.accuracy, p.size_bytes, target).unwrap().fitness, best);

    let blind = SurrogateEvaluator::new(
        SurrogateConfig { planted: Some(planted.clone()), ignore_inputs: true, ..Default::default() },
        profile,
    )
    .unwrap();
    let mut swapped = planted.clone();
    let c = &mut swapped.normal.combinations[0];
    (c.input_1, c.input_2) = (if c.input_1 == -1 { -2 } else { -1 }, c.input_1);
    assert_eq!(blind.evaluate(&swapped).unwrap(), blind.evaluate(&planted).unwrap());
}
