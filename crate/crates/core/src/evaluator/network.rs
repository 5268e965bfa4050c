//! Dense realization of an assembled cell network, trained with minibatch SGD.
//!
//! Each cell reads the previous cell's output through both of its input slots
//! (indices -2 and -1 therefore coincide); combination `j` sums its two
//! operation outputs and the cell concatenates all combination outputs before
//! a tanh projection to the cell's output width.

use std::collections::{BTreeMap, HashMap};

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::search_space::{Activation, NetworkPlan};
use crate::search_space::Operation;
use crate::tensor_model::{FloatModel, FloatWidth, WeightTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Mean training cross-entropy before training and after every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

/// Trained weights keyed by tensor name, reusable across architectures.
pub type SharedWeights = HashMap<String, (Array2<f32>, Array1<f32>)>;

#[derive(Clone, Debug)]
struct Dense {
    w: Array2<f32>,
    b: Array1<f32>,
    tanh: bool,
}

/// Rational tanh approximation, clamped where f32 tanh saturates to +-1;
/// within a few ulp of `f32::tanh` and several times faster.
fn tanh(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_311;
    if x.abs() < 4e-4 {
        return x;
    }
    let x = x.clamp(-CLAMP, CLAMP);
    let x2 = x * x;
    let mut p = x2 * -2.760_768_5e-16 + 2.000_187_9e-13;
    p = x2 * p + -8.604_671_5e-11;
    p = x2 * p + 5.122_297e-8;
    p = x2 * p + 1.485_722_4e-5;
    p = x2 * p + 6.372_619_3e-4;
    p = x2 * p + 4.893_524_6e-3;
    p *= x;
    let mut q = x2 * 1.198_258_4e-6 + 1.185_347_1e-4;
    q = x2 * q + 2.268_434_6e-3;
    q = x2 * q + 4.893_525e-3;
    p / q
}

impl Dense {
    fn forward(&self, x: &ArrayView2<f32>) -> Array2<f32> {
        let mut z = x.dot(&self.w) + &self.b;
        if self.tanh {
            z.mapv_inplace(tanh);
        }
        z
    }
}

#[derive(Clone, Debug)]
enum OpKind {
    Dense(Vec<usize>),
    AvgPool,
    MaxPool,
    Identity,
    Zero,
}

#[derive(Clone, Debug)]
struct CellTopo {
    combos: Vec<([i32; 2], [OpKind; 2])>,
    proj: usize,
}

/// Per-op state kept for the backward pass.
enum OpCache {
    /// Activations after each affine layer.
    Dense(Vec<Array2<f32>>),
    None,
}

struct CellCache {
    input: Array2<f32>,
    outs: Vec<Array2<f32>>,
    ops: Vec<[OpCache; 2]>,
    concat: Array2<f32>,
    output: Array2<f32>,
}

struct Grad {
    w: Array2<f32>,
    b: Array1<f32>,
}

pub struct Network {
    plan: NetworkPlan,
    layers: Vec<Dense>,
    stem: Vec<usize>,
    cells: Vec<CellTopo>,
    classifier: usize,
}

fn topology(plan: &NetworkPlan) -> (Vec<usize>, Vec<CellTopo>, usize) {
    let mut next = 0usize;
    let mut take = || {
        next += 1;
        next - 1
    };
    let stem = plan.stem.iter().map(|_| take()).collect();
    let cells = plan
        .cells
        .iter()
        .map(|cell| {
            let combos = cell
                .combinations
                .iter()
                .map(|c| {
                    let ops = [0, 1].map(|slot| {
                        let op = &c.ops[slot];
                        match op.kind {
                            Operation::SepConv3 | Operation::SepConv5 => {
                                OpKind::Dense(op.layers.iter().map(|_| take()).collect())
                            }
                            Operation::AvgPool3 => OpKind::AvgPool,
                            Operation::MaxPool3 => OpKind::MaxPool,
                            Operation::Identity => OpKind::Identity,
                            Operation::Zero => OpKind::Zero,
                        }
                    });
                    (c.inputs, ops)
                })
                .collect();
            CellTopo {
                combos,
                proj: take(),
            }
        })
        .collect();
    let classifier = take();
    (stem, cells, classifier)
}

fn clamp_neighbors(i: usize, width: usize) -> [usize; 3] {
    [i.saturating_sub(1), i, (i + 1).min(width - 1)]
}

fn pool_forward(x: &Array2<f32>, max: bool) -> Array2<f32> {
    let width = x.ncols();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut out = vec![0.0f32; src.len()];
    for (xr, yr) in src.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        for (i, y) in yr.iter_mut().enumerate() {
            let [l, c, r] = clamp_neighbors(i, width);
            *y = if max {
                xr[l].max(xr[c]).max(xr[r])
            } else {
                (xr[l] + xr[c] + xr[r]) / 3.0
            };
        }
    }
    Array2::from_shape_vec(x.raw_dim(), out).expect("same shape")
}

fn pool_backward(x: &Array2<f32>, dy: &Array2<f32>, max: bool) -> Array2<f32> {
    let width = x.ncols();
    let x = x.as_standard_layout();
    let dy = dy.as_standard_layout();
    let (src, grad) = (x.as_slice().expect("standard"), dy.as_slice().expect("standard"));
    let mut out = vec![0.0f32; src.len()];
    for ((xr, dyr), dxr) in src
        .chunks_exact(width)
        .zip(grad.chunks_exact(width))
        .zip(out.chunks_exact_mut(width))
    {
        for (i, &g) in dyr.iter().enumerate() {
            let idx = clamp_neighbors(i, width);
            if max {
                let mut best = idx[0];
                for &j in &idx[1..] {
                    if xr[j] > xr[best] {
                        best = j;
                    }
                }
                dxr[best] += g;
            } else {
                for j in idx {
                    dxr[j] += g / 3.0;
                }
            }
        }
    }
    Array2::from_shape_vec(x.raw_dim(), out).expect("same shape")
}

/// Softmax cross-entropy: mean loss and gradient w.r.t. the logits.
fn softmax_xent(logits: &Array2<f32>, labels: &[usize]) -> (f64, Array2<f32>) {
    let n = logits.nrows();
    let mut grad = logits.clone();
    let mut loss = 0.0f64;
    for (mut row, &y) in grad.outer_iter_mut().zip(labels) {
        let m = row.fold(f32::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let z: f32 = row.sum();
        row.mapv_inplace(|v| v / z);
        loss -= f64::from(row[y].max(f32::MIN_POSITIVE)).ln();
        row[y] -= 1.0;
    }
    grad.mapv_inplace(|v| v / n as f32);
    (loss / n as f64, grad)
}

fn gather(data: &Dataset, rows: &[usize]) -> (Array2<f32>, Vec<usize>) {
    let d = data.dims;
    let x = Array2::from_shape_fn((rows.len(), d), |(r, c)| data.features[rows[r] * d + c] as f32);
    (x, rows.iter().map(|&i| data.labels[i]).collect())
}

impl Network {
    /// Glorot-uniform weights and zero biases drawn from `rng` in layer
    /// order; layers present in `shared` with a matching shape start from
    /// those values instead.
    pub fn init<R: Rng + ?Sized>(plan: &NetworkPlan, rng: &mut R, shared: Option<&SharedWeights>) -> Self {
        let layers = plan
            .layers()
            .into_iter()
            .map(|l| {
                let a = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt() as f32;
                let mut w = Array2::from_shape_simple_fn((l.fan_in, l.fan_out), || rng.random_range(-a..a));
                let mut b = Array1::zeros(l.fan_out);
                if let Some((sw, sb)) = shared.and_then(|m| m.get(&l.weight)) {
                    if sw.dim() == w.dim() && sb.len() == b.len() {
                        w = sw.clone();
                        b = sb.clone();
                    }
                }
                Dense {
                    w,
                    b,
                    tanh: l.activation == Activation::Tanh,
                }
            })
            .collect();
        Self::with_layers(plan, layers)
    }

    fn with_layers(plan: &NetworkPlan, layers: Vec<Dense>) -> Self {
        let (stem, cells, classifier) = topology(plan);
        Self {
            plan: plan.clone(),
            layers,
            stem,
            cells,
            classifier,
        }
    }

    /// Rebuilds a network from named tensors (weights `[fan_in, fan_out]`).
    pub fn from_tensors<'a>(
        plan: &NetworkPlan,
        lookup: impl Fn(&str) -> Option<&'a WeightTensor>,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        for l in plan.layers() {
            let fetch = |name: &str, shape: Vec<usize>| -> Result<Vec<f32>> {
                let t = lookup(name).ok_or_else(|| Error::DimensionMismatch(format!("missing tensor {name}")))?;
                if t.shape != shape {
                    return Err(Error::DimensionMismatch(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape
                    )));
                }
                Ok(t.values.iter().map(|&v| v as f32).collect())
            };
            let w = fetch(&l.weight, vec![l.fan_in, l.fan_out])?;
            let b = fetch(&l.bias, vec![l.fan_out])?;
            layers.push(Dense {
                w: Array2::from_shape_vec((l.fan_in, l.fan_out), w).expect("shape checked"),
                b: Array1::from(b),
                tanh: l.activation == Activation::Tanh,
            });
        }
        Ok(Self::with_layers(plan, layers))
    }

    pub fn from_model(plan: &NetworkPlan, model: &FloatModel) -> Result<Self> {
        let by_name: HashMap<&str, &WeightTensor> = model.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        Self::from_tensors(plan, |n| by_name.get(n).copied())
    }

    pub fn plan(&self) -> &NetworkPlan {
        &self.plan
    }

    /// Exports the weights as an f32 model, tensors in plan order.
    pub fn to_float_model(&self, metadata: BTreeMap<String, String>) -> Result<FloatModel> {
        let mut tensors = Vec::with_capacity(2 * self.layers.len());
        for (spec, layer) in self.plan.layers().into_iter().zip(&self.layers) {
            let w: Vec<f64> = layer.w.iter().map(|&v| f64::from(v)).collect();
            let b: Vec<f64> = layer.b.iter().map(|&v| f64::from(v)).collect();
            tensors.push(WeightTensor::new(
                spec.weight.clone(),
                vec![spec.fan_in, spec.fan_out],
                w,
                spec.cell_index,
            )?);
            tensors.push(WeightTensor::new(spec.bias.clone(), vec![spec.fan_out], b, spec.cell_index)?);
        }
        FloatModel::new(tensors, metadata, FloatWidth::F32)
    }

    /// Copies every layer into `shared`, keyed by weight name.
    pub fn export_shared(&self, shared: &mut SharedWeights) {
        for (spec, layer) in self.plan.layers().into_iter().zip(&self.layers) {
            shared.insert(spec.weight.clone(), (layer.w.clone(), layer.b.clone()));
        }
    }

    fn op_forward(&self, op: &OpKind, x: &Array2<f32>) -> (Array2<f32>, OpCache) {
        match op {
            OpKind::Dense(ids) => {
                let mut acts = Vec::with_capacity(ids.len());
                let mut h = x.clone();
                for &id in ids {
                    h = self.layers[id].forward(&h.view());
                    acts.push(h.clone());
                }
                (h, OpCache::Dense(acts))
            }
            OpKind::AvgPool => (pool_forward(x, false), OpCache::None),
            OpKind::MaxPool => (pool_forward(x, true), OpCache::None),
            OpKind::Identity => (x.clone(), OpCache::None),
            OpKind::Zero => (Array2::zeros(x.raw_dim()), OpCache::None),
        }
    }

    fn cell_forward(&self, cell: &CellTopo, input: Array2<f32>) -> CellCache {
        let mut outs: Vec<Array2<f32>> = Vec::with_capacity(cell.combos.len());
        let mut caches = Vec::with_capacity(cell.combos.len());
        for (inputs, ops) in &cell.combos {
            let mut sum = Array2::zeros(input.raw_dim());
            let pair = [0, 1].map(|slot| {
                let src = if inputs[slot] < 0 { &input } else { &outs[inputs[slot] as usize] };
                let (y, cache) = self.op_forward(&ops[slot], src);
                sum += &y;
                cache
            });
            outs.push(sum);
            caches.push(pair);
        }
        let views: Vec<ArrayView2<f32>> = outs.iter().map(|o| o.view()).collect();
        let concat = concatenate(Axis(1), &views).expect("equal row counts");
        let output = self.layers[cell.proj].forward(&concat.view());
        CellCache {
            input,
            outs,
            ops: caches,
            concat,
            output,
        }
    }

    /// Logits for a batch of rows.
    pub fn forward(&self, x: &Array2<f32>) -> Array2<f32> {
        let mut h = x.clone();
        for &id in &self.stem {
            h = self.layers[id].forward(&h.view());
        }
        for cell in &self.cells {
            h = self.cell_forward(cell, h).output;
        }
        self.layers[self.classifier].forward(&h.view())
    }

    fn dense_backward(&self, id: usize, x: &Array2<f32>, a: &Array2<f32>, da: Array2<f32>, grads: &mut [Grad]) -> Array2<f32> {
        let layer = &self.layers[id];
        let dz = if layer.tanh { da * &a.mapv(|v| 1.0 - v * v) } else { da };
        grads[id].w += &x.t().dot(&dz);
        grads[id].b += &dz.sum_axis(Axis(0));
        dz.dot(&layer.w.t())
    }

    fn op_backward(&self, op: &OpKind, cache: &OpCache, x: &Array2<f32>, dy: &Array2<f32>, grads: &mut [Grad]) -> Option<Array2<f32>> {
        match (op, cache) {
            (OpKind::Dense(ids), OpCache::Dense(acts)) => {
                let mut d = dy.clone();
                for k in (0..ids.len()).rev() {
                    let input = if k == 0 { x } else { &acts[k - 1] };
                    d = self.dense_backward(ids[k], input, &acts[k], d, grads);
                }
                Some(d)
            }
            (OpKind::AvgPool, _) => Some(pool_backward(x, dy, false)),
            (OpKind::MaxPool, _) => Some(pool_backward(x, dy, true)),
            (OpKind::Identity, _) => Some(dy.clone()),
            _ => None,
        }
    }

    fn cell_backward(&self, cell: &CellTopo, cache: &CellCache, dout: Array2<f32>, grads: &mut [Grad]) -> Array2<f32> {
        let dconcat = self.dense_backward(cell.proj, &cache.concat, &cache.output, dout, grads);
        let width = cache.input.ncols();
        let mut douts: Vec<Array2<f32>> = (0..cell.combos.len())
            .map(|j| dconcat.slice(s![.., j * width..(j + 1) * width]).to_owned())
            .collect();
        let mut dinput = Array2::zeros(cache.input.raw_dim());
        for j in (0..cell.combos.len()).rev() {
            let (inputs, ops) = &cell.combos[j];
            let dy = std::mem::take(&mut douts[j]);
            for slot in 0..2 {
                let src = inputs[slot];
                let x = if src < 0 { &cache.input } else { &cache.outs[src as usize] };
                if let Some(dx) = self.op_backward(&ops[slot], &cache.ops[j][slot], x, &dy, grads) {
                    if src < 0 {
                        dinput += &dx;
                    } else {
                        douts[src as usize] += &dx;
                    }
                }
            }
        }
        dinput
    }

    /// One SGD step on a batch; returns the batch loss.
    fn step(&mut self, x: &Array2<f32>, labels: &[usize], lr: f32, decay: f32) -> f64 {
        let mut stem_acts = Vec::with_capacity(self.stem.len());
        let mut h = x.clone();
        for &id in &self.stem {
            h = self.layers[id].forward(&h.view());
            stem_acts.push(h.clone());
        }
        let mut cell_caches: Vec<CellCache> = Vec::with_capacity(self.cells.len());
        for cell in &self.cells {
            let cache = self.cell_forward(cell, h);
            h = cache.output.clone();
            cell_caches.push(cache);
        }
        let logits = self.layers[self.classifier].forward(&h.view());
        let (loss, dlogits) = softmax_xent(&logits, labels);

        let mut grads: Vec<Grad> = self
            .layers
            .iter()
            .map(|l| Grad {
                w: Array2::zeros(l.w.raw_dim()),
                b: Array1::zeros(l.b.len()),
            })
            .collect();
        let mut d = self.dense_backward(self.classifier, &h, &logits, dlogits, &mut grads);
        for (cell, cache) in self.cells.iter().zip(&cell_caches).rev() {
            d = self.cell_backward(cell, cache, d, &mut grads);
        }
        for k in (0..self.stem.len()).rev() {
            let input = if k == 0 { x } else { &stem_acts[k - 1] };
            d = self.dense_backward(self.stem[k], input, &stem_acts[k], d, &mut grads);
        }
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            layer.w.zip_mut_with(&g.w, |w, &gw| *w -= lr * (gw + decay * *w));
            layer.b.zip_mut_with(&g.b, |b, &gb| *b -= lr * gb);
        }
        loss
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dims != self.plan.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "dataset has {} features, network expects {}",
                data.dims, self.plan.input_dim
            )));
        }
        if data.classes > self.plan.classes {
            return Err(Error::DimensionMismatch(format!(
                "dataset has {} classes, network outputs {}",
                data.classes, self.plan.classes
            )));
        }
        Ok(())
    }

    /// Mean cross-entropy over `rows`.
    pub fn loss(&self, data: &Dataset, rows: &[usize]) -> Result<f64> {
        self.check_data(data)?;
        let (x, y) = gather(data, rows);
        Ok(softmax_xent(&self.forward(&x), &y).0)
    }

    /// Fraction of `rows` whose arg-max logit equals the label.
    pub fn accuracy(&self, data: &Dataset, rows: &[usize]) -> Result<f64> {
        self.check_data(data)?;
        if rows.is_empty() {
            return Err(Error::InvalidArgument("no rows to evaluate".into()));
        }
        let (x, y) = gather(data, rows);
        let logits = self.forward(&x);
        let correct = logits
            .outer_iter()
            .zip(&y)
            .filter(|(row, &label)| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best == label
            })
            .count();
        Ok(correct as f64 / rows.len() as f64)
    }

    /// Trains on `data.train`; batch order is drawn from `rng`.
    pub fn train<R: Rng + ?Sized>(&mut self, data: &Dataset, hyper: &TrainHyper, rng: &mut R) -> Result<TrainReport> {
        hyper.validate()?;
        self.check_data(data)?;
        let mut losses = vec![self.loss(data, &data.train)?];
        let mut order = data.train.clone();
        for epoch in 0..hyper.epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            for batch in order.chunks(hyper.batch_size) {
                let (x, y) = gather(data, batch);
                total += self.step(&x, &y, hyper.learning_rate as f32, hyper.weight_decay as f32) * batch.len() as f64;
            }
            let mean = total / order.len() as f64;
            if !mean.is_finite() || self.layers.iter().any(|l| l.w.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged { epoch });
            }
            losses.push(mean);
        }
        Ok(TrainReport { losses })
    }
}

/// Initializes with `hyper.seed`, trains, and exports the weights.
pub fn train_model(
    plan: &NetworkPlan,
    data: &Dataset,
    hyper: &TrainHyper,
    shared: Option<&SharedWeights>,
) -> Result<(Network, TrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut net = Network::init(plan, &mut rng, shared);
    let report = net.train(data, hyper, &mut rng)?;
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::dataset::{make_blobs, BlobConfig};
    use crate::search_space::{assemble, SearchSpace, SpaceConfig, StackingProfile};

    fn small_plan(seed: u64) -> NetworkPlan {
        plan_with(SpaceConfig::default(), seed)
    }

    fn plan_with(config: SpaceConfig, seed: u64) -> NetworkPlan {
        let profile = StackingProfile::cifar(1, 8).with_io(4, 3);
        let space = SearchSpace::for_profile(config, &profile).unwrap();
        let g = space.random_genome(&mut ChaCha8Rng::seed_from_u64(seed));
        assemble(&g, &profile).unwrap()
    }

    fn blobs() -> Dataset {
        make_blobs(&BlobConfig { classes: 3, dims: 4, samples: 240, spread: 0.15 }, 5).unwrap()
    }

    #[test]
    fn tanh_approximation_tracks_libm() {
        let mut worst = 0.0f32;
        for i in -200_000..=200_000 {
            let x = i as f32 * 1e-4;
            worst = worst.max((tanh(x) - x.tanh()).abs());
        }
        assert!(worst < 1e-6, "{worst}");
        assert_eq!(tanh(50.0), 1.0);
        assert_eq!(tanh(-50.0), -1.0);
    }

    #[test]
    fn pooling_matches_direct_formula() {
        let x = Array2::from_shape_vec((1, 4), vec![1.0f32, 5.0, 2.0, -1.0]).unwrap();
        let avg = pool_forward(&x, false);
        assert!((avg[[0, 0]] - 7.0 / 3.0).abs() < 1e-6);
        assert!((avg[[0, 3]] - 0.0).abs() < 1e-6);
        assert_eq!(pool_forward(&x, true).row(0).to_vec(), vec![5.0, 5.0, 5.0, 2.0]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Max pooling is piecewise linear; kinks spoil finite differences.
        const H: f32 = 1e-2;
        let smooth = SpaceConfig {
            operations: Operation::ALL.into_iter().filter(|&o| o != Operation::MaxPool3).collect(),
            ..Default::default()
        };
        let data = blobs();
        for seed in 0..8 {
            let plan = plan_with(smooth.clone(), seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = Network::init(&plan, &mut rng, None);
            let rows: Vec<usize> = (0..16).collect();
            let (x, y) = gather(&data, &rows);
            // Analytic gradient: one step with lr=1, no decay, read back the delta.
            let mut stepped = Network::with_layers(&plan, net.layers.clone());
            stepped.step(&x, &y, 1.0, 0.0);
            let loss_at = |layers: &Vec<Dense>| {
                let n = Network::with_layers(&plan, layers.clone());
                softmax_xent(&n.forward(&x), &y).0
            };
            let probe = [0usize, net.stem.len(), net.classifier];
            for &id in &probe {
                for idx in [[0usize, 0usize], [1, 2]] {
                    let analytic = f64::from(net.layers[id].w[idx] - stepped.layers[id].w[idx]);
                    let h = H;
                    let mut plus = net.layers.clone();
                    plus[id].w[idx] += h;
                    let mut minus = net.layers.clone();
                    minus[id].w[idx] -= h;
                    let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * f64::from(h));
                    assert!(
                        (analytic - numeric).abs() < 2e-3 + 0.05 * numeric.abs(),
                        "seed {seed} layer {id} {idx:?}: {analytic} vs {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Array2::from_shape_vec((1, 4), vec![1.0f32, 5.0, 2.0, -1.0]).unwrap();
        let dy = Array2::from_shape_vec((1, 4), vec![1.0f32, 10.0, 100.0, 1000.0]).unwrap();
        assert_eq!(pool_backward(&x, &dy, true).row(0).to_vec(), vec![0.0, 111.0, 1000.0, 0.0]);
        let avg = pool_backward(&x, &dy, false);
        // Clamped edges count the boundary element twice.
        assert!((avg[[0, 0]] - 4.0).abs() < 1e-4);
        assert!((avg[[0, 3]] - 700.0).abs() < 1e-3);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data = blobs();
        let plan = small_plan(1);
        let hyper = TrainHyper { epochs: 10, seed: 9, ..Default::default() };
        let (net, report) = train_model(&plan, &data, &hyper, None).unwrap();
        assert_eq!(report.losses.len(), 11);
        assert!(report.losses.last().unwrap() < &report.losses[0]);
        let (again, _) = train_model(&plan, &data, &hyper, None).unwrap();
        let a = net.to_float_model(BTreeMap::new()).unwrap();
        let b = again.to_float_model(BTreeMap::new()).unwrap();
        assert_eq!(a, b);
        let back = Network::from_model(&plan, &a).unwrap();
        assert_eq!(back.accuracy(&data, &data.validation).unwrap(), net.accuracy(&data, &data.validation).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let data = blobs();
        let plan = small_plan(2);
        let hyper = TrainHyper { epochs: 5, learning_rate: 1e30, ..Default::default() };
        assert!(matches!(train_model(&plan, &data, &hyper, None), Err(Error::Diverged { .. })));
    }

    #[test]
    fn dimension_mismatch() {
        let data = make_blobs(&BlobConfig { classes: 3, dims: 5, samples: 60, spread: 0.1 }, 0).unwrap();
        let plan = small_plan(0);
        let net = Network::init(&plan, &mut ChaCha8Rng::seed_from_u64(0), None);
        assert!(matches!(net.accuracy(&data, &data.train), Err(Error::DimensionMismatch(_))));
    }
}
