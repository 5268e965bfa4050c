//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use nasquant::evaluator::Dataset;
use nasquant::objective::ParetoPoint;
use nasquant::search_space::{CellGenome, Combination, ModelGenome, Operation, QuantizationPolicy};
use nasquant::quantizer::BitWidth;

/// Cheapest prefix code for `freqs` found by trying every length vector with
/// entries in `1..=n-1` that satisfies Kraft's inequality.
pub fn optimal_prefix_cost(freqs: &[u64]) -> u64 {
    let n = freqs.len();
    if n == 1 {
        return freqs[0];
    }
    let max_len = (n - 1) as u32;
    let mut lengths = vec![1u32; n];
    let mut best = u64::MAX;
    loop {
        let kraft: u64 = lengths.iter().map(|&l| 1u64 << (max_len - l)).sum();
        if kraft <= 1u64 << max_len {
            let cost = freqs.iter().zip(&lengths).map(|(&f, &l)| f * l as u64).sum();
            best = best.min(cost);
        }
        let mut i = 0;
        while i < n && lengths[i] == max_len {
            lengths[i] = 1;
            i += 1;
        }
        if i == n {
            return best;
        }
        lengths[i] += 1;
    }
}

const FIXED_SHIFT: u32 = 80;

/// `x * 2^80` as an exact integer; `x` must be 0 or have no bits below 2^-80.
fn fixed(x: f64) -> u128 {
    assert!((0.0..=1.0).contains(&x));
    if x == 0.0 {
        return 0;
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32 - 1075;
    let mantissa = (bits & ((1 << 52) - 1)) | (1 << 52);
    let shift = exp + FIXED_SHIFT as i32;
    assert!(shift >= 0, "{x} has bits below 2^-80");
    (mantissa as u128) << shift
}

/// Code of the grid point `j / 2^b` nearest to `x`, ties to the lower point,
/// by scanning the whole grid in exact integer arithmetic.
pub fn nearest_grid_scan(x: f64, b: u8) -> u32 {
    let target = fixed(x);
    let step = 1u128 << (FIXED_SHIFT - b as u32);
    let mut best = (u128::MAX, 0u32);
    for j in 0..=(1u32 << b) {
        let g = j as u128 * step;
        let d = g.abs_diff(target);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

/// Same answer as [`nearest_grid_scan`], checking only the grid points around
/// the exact integer quotient.
pub fn nearest_grid_local(x: f64, b: u8) -> u32 {
    let target = fixed(x);
    let step = 1u128 << (FIXED_SHIFT - b as u32);
    let j0 = (target / step) as i64;
    let top = 1i64 << b;
    let mut best = (u128::MAX, 0u32);
    for j in (j0 - 1).max(0)..=(j0 + 2).min(top) {
        let d = (j as u128 * step).abs_diff(target);
        if d < best.0 {
            best = (d, j as u32);
        }
    }
    best.1
}

/// O(n^2) dominance filter; duplicates keep their first occurrence; result
/// sorted by size.
pub fn pareto_brute(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut out: Vec<ParetoPoint> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let dominated = points.iter().any(|q| {
            q.accuracy >= p.accuracy
                && q.size_bytes <= p.size_bytes
                && (q.accuracy > p.accuracy || q.size_bytes < p.size_bytes)
        });
        let duplicate = points[..i].contains(p);
        if !dominated && !duplicate {
            out.push(*p);
        }
    }
    out.sort_by_key(|p| p.size_bytes);
    out
}

/// Every cell with `b` combinations over `ops`.
pub fn enumerate_cells(b: usize, ops: &[Operation]) -> Vec<CellGenome> {
    let mut cells = vec![Vec::<Combination>::new()];
    for j in 0..b {
        let inputs: Vec<i32> = (-2..j as i32).collect();
        let mut next = Vec::new();
        for prefix in &cells {
            for &i1 in &inputs {
                for &i2 in &inputs {
                    for &o1 in ops {
                        for &o2 in ops {
                            let mut c = prefix.clone();
                            c.push(Combination { input_1: i1, input_2: i2, op_1: o1, op_2: o2 });
                            next.push(c);
                        }
                    }
                }
            }
        }
        cells = next;
    }
    cells.into_iter().map(|combinations| CellGenome { combinations }).collect()
}

/// Every policy of length `cells` over `choices`.
pub fn enumerate_policies(cells: usize, choices: &[BitWidth]) -> Vec<QuantizationPolicy> {
    let mut out = vec![Vec::new()];
    for _ in 0..cells {
        out = out
            .into_iter()
            .flat_map(|p: Vec<BitWidth>| {
                choices.iter().map(move |&c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
    }
    out.into_iter().map(|bits| QuantizationPolicy { bits }).collect()
}

/// Every genome of a space with `b` combinations per cell.
pub fn enumerate_genomes(b: usize, ops: &[Operation], cells: usize, choices: &[BitWidth]) -> Vec<ModelGenome> {
    let cell_list = enumerate_cells(b, ops);
    let policies = enumerate_policies(cells, choices);
    let mut out = Vec::with_capacity(cell_list.len().pow(2) * policies.len());
    for normal in &cell_list {
        for reduction in &cell_list {
            for policy in &policies {
                out.push(ModelGenome {
                    normal: normal.clone(),
                    reduction: reduction.clone(),
                    policy: policy.clone(),
                });
            }
        }
    }
    out
}

/// Validation accuracy of a classifier that assigns each sample to the class
/// whose training-set mean is closest.
pub fn nearest_centroid_accuracy(data: &Dataset) -> f64 {
    let d = data.dims;
    let mut sums = vec![0.0; data.classes * d];
    let mut counts = vec![0usize; data.classes];
    for &i in &data.train {
        let c = data.labels[i];
        counts[c] += 1;
        for (s, v) in sums[c * d..(c + 1) * d].iter_mut().zip(data.row(i)) {
            *s += v;
        }
    }
    for c in 0..data.classes {
        for s in &mut sums[c * d..(c + 1) * d] {
            *s /= counts[c].max(1) as f64;
        }
    }
    let correct = data
        .validation
        .iter()
        .filter(|&&i| {
            let row = data.row(i);
            let dist = |c: usize| -> f64 {
                sums[c * d..(c + 1) * d].iter().zip(row).map(|(m, v)| (m - v).powi(2)).sum()
            };
            let pred = (0..data.classes).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
            pred == data.labels[i]
        })
        .count();
    correct as f64 / data.validation.len() as f64
}

pub fn bw(b: u8) -> BitWidth {
    BitWidth::new(b).unwrap()
}
