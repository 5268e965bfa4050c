use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nasquant::codec::{parse_quantized_model, quantized_model_bytes, QUANTIZED_MAGIC};
use nasquant::evaluator::{
    evaluate_quantized, quantize_model, restore_tensors, Dataset, EvalResult, Evaluator, ExemptionRules,
    Network, PolicyEvaluator, ToyEvaluator, GENOME_KEY, PROFILE_KEY,
};
use nasquant::evolution::{
    read_history, run_sweep, write_curve_csv, write_record, CurvePoint, EvaluatorConfig, IndividualRecord,
    Search, SearchConfig, SearchMode, SweepConfig, ToyConfig,
};
use nasquant::objective::{fitness, pareto_indices, ParetoPoint, BYTES_PER_MB};
use nasquant::quantizer::{theoretical_bits, theoretical_ratio, BitWidth};
use nasquant::search_space::{assemble, ModelGenome, QuantizationPolicy, SearchSpace, StackingProfile};
use nasquant::tensor_model::{
    float_model_bytes, parse_float_model, FloatModel, FloatWidth, QuantizedModel,
};
use nasquant::Error;

use crate::{
    DequantizeArgs, EvalArgs, ParetoArgs, QuantizeArgs, ReportArgs, SearchArgs, SearchPolicyArgs, SweepArgs,
    TrainArgs,
};

const HISTORY_FILE: &str = "history.jsonl";
const BEST_GENOME_FILE: &str = "best_genome.json";
const BEST_POLICY_FILE: &str = "best_policy.json";
const BEST_MODEL_FILE: &str = "best_model.jsqq";
const FRONT_HEADER: [&str; 2] = ["accuracy", "size_bytes"];

/// Bad input detected by the CLI itself; exits with status 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// 2 for invalid input (configs, policies, untagged models), 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::PolicyLengthMismatch { .. }
                | Error::MissingPolicyEntry(_)
                | Error::Json(_)
                | Error::Csv(_) => 2,
                _ => 1,
            };
        }
    }
    1
}

fn size_text(bytes: u64) -> String {
    format!("{bytes} bytes ({:.6} MB)", bytes as f64 / BYTES_PER_MB)
}

/// Rounds `x` up to four significant digits, so the printed value never
/// understates it.
fn round_up_4(x: f64) -> f64 {
    if x <= 0.0 || !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(3 - x.log10().floor() as i32);
    (x * (1.0 + 1e-12) * scale).ceil() / scale
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn read_float(path: &Path) -> Result<FloatModel> {
    let bytes = read_bytes(path)?;
    parse_float_model(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn read_quantized(path: &Path) -> Result<QuantizedModel> {
    let bytes = read_bytes(path)?;
    parse_quantized_model(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn read_config(path: &Path) -> Result<SearchConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SearchConfig::from_json(&text).with_context(|| format!("config {}", path.display()))
}

fn toy_section(config: &SearchConfig) -> Result<&ToyConfig> {
    match &config.evaluator {
        EvaluatorConfig::Toy(t) => Ok(t),
        EvaluatorConfig::Surrogate(_) => Err(usage("this command needs a toy evaluator config")),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Genome and stacking profile recorded by training.
fn model_identity(metadata: &BTreeMap<String, String>) -> Result<(ModelGenome, StackingProfile)> {
    let genome = metadata
        .get(GENOME_KEY)
        .ok_or_else(|| usage("model metadata has no genome"))?;
    let profile = metadata
        .get(PROFILE_KEY)
        .ok_or_else(|| usage("model metadata has no profile"))?;
    Ok((ModelGenome::from_json(genome)?, serde_json::from_str(profile).map_err(Error::from)?))
}

fn parse_bits(bits: &[u8]) -> Result<QuantizationPolicy> {
    let bits = bits.iter().map(|&b| BitWidth::new(b)).collect::<nasquant::Result<_>>()?;
    Ok(QuantizationPolicy { bits })
}

fn print_result(label: &str, result: &EvalResult, target_bytes: u64) -> Result<()> {
    let rec = fitness(result.accuracy, result.size_bytes, target_bytes)?;
    println!("{label}accuracy: {:.6}", rec.accuracy);
    println!("{label}size: {}", size_text(rec.size_bytes));
    println!("{label}fitness: {:.6}", rec.fitness);
    Ok(())
}

pub fn quantize(a: QuantizeArgs) -> Result<()> {
    let model = read_float(&a.model)?;
    let cells = model.cell_count();
    if cells == 0 {
        return Err(Error::InvalidArgument("model has no cell-tagged tensors".into()).into());
    }
    let policy = match (a.bits, &a.policy) {
        (Some(b), _) => QuantizationPolicy::uniform(BitWidth::new(b)?, cells),
        (None, Some(bits)) => parse_bits(bits)?,
        (None, None) => return Err(usage("pass --bits or --policy")),
    };
    let exemptions = ExemptionRules {
        names: a.exempt_names.iter().cloned().collect(),
        cells: a.exempt_cells.iter().copied().collect(),
    };
    let q = quantize_model(&model, &policy, a.bucket_size, &exemptions)?;
    let q_bytes = quantized_model_bytes(&q)?;
    let f_bytes = float_model_bytes(&model)?;
    write_file(&a.out, &q_bytes)?;

    let f = model.float_width.bits() as u32;
    let theoretical = match policy.bits.first() {
        Some(&b) if policy.bits.iter().all(|&x| x == b) => Some(theoretical_ratio(a.bucket_size, f, b)),
        _ if q.tensors.is_empty() => None,
        _ => {
            let n: u64 = q.tensors.iter().map(|t| t.value_count() as u64).sum();
            let bits: u64 = q
                .tensors
                .iter()
                .map(|t| theoretical_bits(t.value_count(), t.bit_width, a.bucket_size, f))
                .sum();
            Some((n * f as u64) as f64 / bits as f64)
        }
    };
    let bound = q.tensors.iter().map(|t| t.max_error_bound()).fold(0.0, f64::max);
    println!("float size: {}", size_text(f_bytes.len() as u64));
    println!("quantized size: {}", size_text(q_bytes.len() as u64));
    match theoretical {
        Some(r) => println!("theoretical ratio: {r:.3}"),
        None => println!("theoretical ratio: n/a"),
    }
    println!("actual ratio: {:.3}", f_bytes.len() as f64 / q_bytes.len() as f64);
    println!("max error bound: {}", round_up_4(bound));
    Ok(())
}

pub fn dequantize(a: DequantizeArgs) -> Result<()> {
    let q = read_quantized(&a.model)?;
    let width = match a.width {
        Some(w) => FloatWidth::try_from(w).map_err(|e| usage(e.to_string()))?,
        None => FloatWidth::F64,
    };
    let tensors = restore_tensors(&q)?;
    let model = FloatModel::new(tensors, q.metadata.clone(), width)?;
    let bytes = float_model_bytes(&model)?;
    write_file(&a.out, &bytes)?;
    println!("tensors: {}", model.tensors.len());
    println!("float size: {}", size_text(bytes.len() as u64));
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let config = read_config(&a.config)?;
    let toy = toy_section(&config)?;
    let profile = config.search_profile.clone();
    let genome = match &a.genome {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ModelGenome::from_json(&text)?
        }
        None => {
            let space = SearchSpace::for_profile(config.space.clone(), &profile)?;
            space.random_genome(&mut ChaCha8Rng::seed_from_u64(a.seed))
        }
    };
    let mut hyper = toy.hyper.clone();
    hyper.seed = a.seed;
    let data = Arc::new(toy.dataset()?);
    let eval = ToyEvaluator::new(profile.clone(), data.clone(), hyper, config.bucket_size)?;
    let model = eval.train_float(&genome)?;
    let bytes = float_model_bytes(&model)?;
    write_file(&a.out, &bytes)?;
    let net = Network::from_model(&assemble(&genome, &profile)?, &model)?;
    println!("genome: {}", genome.to_json());
    println!("float accuracy: {:.6}", net.accuracy(&data, &data.validation)?);
    println!("float size: {}", size_text(bytes.len() as u64));
    Ok(())
}

/// Streams the history to `dir/history.jsonl` while the search runs.
fn run_logged(search: Search<'_>, dir: &Path) -> Result<nasquant::evolution::SearchHistory> {
    let path = dir.join(HISTORY_FILE);
    let mut out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    let history = search.run_with(|r| write_record(r, &mut out))?;
    out.flush()?;
    Ok(history)
}

fn write_model(dir: &Path, model: Option<&Arc<QuantizedModel>>) -> Result<()> {
    match model {
        Some(m) => write_file(&dir.join(BEST_MODEL_FILE), &quantized_model_bytes(m)?),
        None => {
            println!("evaluator produced no model file; {BEST_MODEL_FILE} not written");
            Ok(())
        }
    }
}

pub fn search(a: SearchArgs) -> Result<()> {
    let mut config = read_config(&a.config)?;
    config.seed = a.seed;
    create_dir(&a.out_dir)?;
    let evaluator = config.evaluator.build(&config.search_profile, config.bucket_size)?;
    let search = Search::new(config.clone(), evaluator.as_ref())?;
    let history = run_logged(search, &a.out_dir)?;
    let best = &history.best;
    write_file(&a.out_dir.join(BEST_GENOME_FILE), best.genome.to_json().as_bytes())?;
    println!("best individual: id {} (iteration {})", best.id, best.birth_iteration);

    match config.evaluation_profile.as_ref().filter(|p| **p != config.search_profile) {
        Some(profile) => {
            print_result("search ", &best.result, config.target_bytes)?;
            let final_eval = config.evaluator.build(profile, config.bucket_size)?;
            let result = final_eval.evaluate(&best.genome)?;
            write_model(&a.out_dir, result.quantized_model.as_ref())?;
            print_result("", &result, config.target_bytes)
        }
        None => {
            write_model(&a.out_dir, best.result.quantized_model.as_ref())?;
            print_result("", &best.result, config.target_bytes)
        }
    }
}

pub fn search_policy(a: SearchPolicyArgs) -> Result<()> {
    let mut config = read_config(&a.config)?;
    let model = read_float(&a.model)?;
    if model.cell_count() == 0 {
        return Err(Error::InvalidArgument("model has no cell-tagged tensors".into()).into());
    }
    let (genome, profile) = model_identity(&model.metadata)?;
    let toy = toy_section(&config)?.clone();
    config.seed = a.seed;
    config.mode = SearchMode::PolicyOnly;
    config.search_profile = profile.clone();
    config.evaluation_profile = None;
    if let Some(path) = &a.seed_policy {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let policy: QuantizationPolicy = serde_json::from_str(&text).map_err(Error::from)?;
        config.seed_individuals = vec![ModelGenome { policy, ..genome.clone() }];
    }
    config.validate()?;

    let data = Arc::new(toy.dataset()?);
    let evaluator = PolicyEvaluator::new(
        &genome,
        &profile,
        Arc::new(model),
        data,
        config.bucket_size,
        toy.exemptions.clone(),
    )?;
    create_dir(&a.out_dir)?;
    let search = Search::new(config.clone(), &evaluator)?.with_frozen_architecture(genome.clone());
    let history = run_logged(search, &a.out_dir)?;
    let best = &history.best;
    write_file(&a.out_dir.join(BEST_POLICY_FILE), serde_json::to_string(&best.genome.policy)?.as_bytes())?;
    write_model(&a.out_dir, best.result.quantized_model.as_ref())?;

    for &b in &config.space.bit_choices {
        let uniform = ModelGenome {
            policy: QuantizationPolicy::uniform(b, profile.cell_count()),
            ..genome.clone()
        };
        let r = evaluator.evaluate(&uniform)?;
        let rec = fitness(r.accuracy, r.size_bytes, config.target_bytes)?;
        println!(
            "uniform {}-bit: accuracy {:.6}, size {}, fitness {:.6}",
            b.bits(),
            rec.accuracy,
            size_text(rec.size_bytes),
            rec.fitness
        );
    }
    println!("best policy: {}", serde_json::to_string(&best.genome.policy)?);
    print_result("", &best.result, config.target_bytes)
}

fn dataset_for(config: &SearchConfig) -> Result<Dataset> {
    Ok(toy_section(config)?.dataset()?)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let config = read_config(&a.config)?;
    let bytes = read_bytes(&a.model)?;
    let data = dataset_for(&config)?;
    let (accuracy, metadata) = if bytes.starts_with(&QUANTIZED_MAGIC) {
        let q = parse_quantized_model(&bytes)?;
        let (genome, profile) = model_identity(&q.metadata)?;
        (evaluate_quantized(&assemble(&genome, &profile)?, &q, &data)?, q.metadata)
    } else {
        let m = parse_float_model(&bytes)?;
        let (genome, profile) = model_identity(&m.metadata)?;
        let net = Network::from_model(&assemble(&genome, &profile)?, &m)?;
        (net.accuracy(&data, &data.validation)?, m.metadata)
    };
    if let Some(p) = metadata.get(nasquant::evaluator::POLICY_KEY) {
        println!("policy: {p}");
    }
    let result = EvalResult {
        accuracy,
        size_bytes: bytes.len() as u64,
        quantized_model: None,
    };
    match a.target_bytes {
        Some(t) => print_result("", &result, t),
        None => {
            println!("accuracy: {accuracy:.6}");
            println!("size: {}", size_text(result.size_bytes));
            Ok(())
        }
    }
}

fn read_history_file(path: &Path) -> Result<Vec<nasquant::evolution::HistoryRecord>> {
    let file = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    read_history(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn front_csv<W: Write>(records: &[IndividualRecord], sink: W) -> Result<()> {
    let points: Vec<ParetoPoint> = records.iter().map(|r| ParetoPoint::new(r.accuracy, r.size_bytes)).collect();
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(FRONT_HEADER)?;
    for i in pareto_indices(&points) {
        w.write_record([points[i].accuracy.to_string(), points[i].size_bytes.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn evaluated(records: &[nasquant::evolution::HistoryRecord]) -> Vec<IndividualRecord> {
    records.iter().flat_map(|r| r.evaluated()).cloned().collect()
}

pub fn pareto(a: ParetoArgs) -> Result<()> {
    let mut all = Vec::new();
    for path in &a.histories {
        all.extend(evaluated(&read_history_file(path)?));
    }
    if all.is_empty() {
        bail!("no evaluated individuals in the given histories");
    }
    let mut buf = Vec::new();
    front_csv(&all, &mut buf)?;
    if let Some(out) = &a.out {
        write_file(out, &buf)?;
    }
    std::io::stdout().write_all(&buf)?;
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let mut config: SweepConfig = serde_json::from_str(&text).map_err(Error::from)?;
    config.base.seed = a.seed;
    config.validate()?;
    let evaluator = config.base.evaluator.build(&config.base.search_profile, config.base.bucket_size)?;
    let curves = run_sweep(&config, evaluator.as_ref())?;
    create_dir(&a.out_dir)?;
    for c in &curves {
        let path = a.out_dir.join(format!("curve_p{}_s{}.csv", c.population_size, c.sample_size));
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_curve_csv(&c.points, BufWriter::new(file))?;
        let (first, last) = (c.points[0], c.points[c.points.len() - 1]);
        println!(
            "P={} S={}: mean fitness {:.6} -> {:.6}, best {:.6}, wrote {}",
            c.population_size,
            c.sample_size,
            first.mean_fitness,
            last.mean_fitness,
            last.best_fitness,
            path.display()
        );
    }
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let records = read_history_file(&a.history)?;
    if records.is_empty() {
        bail!("{} has no records", a.history.display());
    }
    create_dir(&a.out_dir)?;
    let points: Vec<CurvePoint> = records
        .iter()
        .map(|r| CurvePoint {
            iteration: r.iteration,
            mean_fitness: r.mean_fitness,
            std_fitness: r.std_fitness,
            best_fitness: r.best_fitness,
        })
        .collect();
    let curve_path = a.out_dir.join("curve.csv");
    write_curve_csv(&points, BufWriter::new(File::create(&curve_path)?))?;
    let all = evaluated(&records);
    let front_path = a.out_dir.join("front.csv");
    front_csv(&all, BufWriter::new(File::create(&front_path)?))?;

    let last = records.last().expect("nonempty");
    println!("iterations: {}", last.iteration);
    println!("evaluated individuals: {}", all.len());
    println!("population size: {}", last.population_size);
    println!("final mean fitness: {:.6}", last.mean_fitness);
    println!("final std fitness: {:.6}", last.std_fitness);
    if let Some(best) = all.iter().max_by(|x, y| x.fitness.total_cmp(&y.fitness).then(y.id.cmp(&x.id))) {
        println!(
            "best: id {} accuracy {:.6} size {} fitness {:.6}",
            best.id,
            best.accuracy,
            size_text(best.size_bytes),
            best.fitness
        );
    }
    println!("{:>9}  {:>12}  {:>12}  {:>12}", "iteration", "mean", "std", "best");
    let stride = (records.len() / 10).max(1);
    for (i, p) in points.iter().enumerate() {
        if i % stride == 0 || i + 1 == points.len() {
            println!(
                "{:>9}  {:>12.6}  {:>12.6}  {:>12.6}",
                p.iteration, p.mean_fitness, p.std_fitness, p.best_fitness
            );
        }
    }
    println!("wrote {} and {}", curve_path.display(), front_path.display());
    Ok(())
}
