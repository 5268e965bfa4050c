use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// Keeps the split shuffle independent of the sample generator stream.
const SPLIT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

/// Gaussian-blob generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobConfig {
    pub classes: usize,
    pub dims: usize,
    pub samples: usize,
    pub spread: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            dims: 16,
            samples: 2000,
            spread: 0.15,
        }
    }
}

/// Labelled feature matrix with a fixed train/validation split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// Row-major `samples x dims`.
    pub features: Vec<f64>,
    pub dims: usize,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub seed: u64,
}

impl Dataset {
    fn from_parts(features: Vec<f64>, dims: usize, labels: Vec<usize>, classes: usize, seed: u64) -> Self {
        let n = labels.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM));
        let n_train = (n * 4 / 5).max(1).min(n);
        let mut validation = order.split_off(n_train);
        let mut train = order;
        train.sort_unstable();
        validation.sort_unstable();
        Self {
            features,
            dims,
            labels,
            classes,
            train,
            validation,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dims..(i + 1) * self.dims]
    }

    /// Writes `f0,...,f{d-1},label` CSV.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dims).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Class centers uniform in `[0,1]^d`, isotropic noise with std `spread`.
/// Label of sample `i` is `i mod classes`.
pub fn make_blobs(cfg: &BlobConfig, seed: u64) -> Result<Dataset> {
    let BlobConfig {
        classes,
        dims,
        samples,
        spread,
    } = *cfg;
    if classes < 2 || dims < 2 {
        return Err(Error::InvalidArgument(format!(
            "need classes >= 2 and dims >= 2, got {classes} and {dims}"
        )));
    }
    if samples < 10 * classes {
        return Err(Error::InvalidArgument(format!(
            "need at least {} samples for {classes} classes, got {samples}",
            10 * classes
        )));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(Error::InvalidArgument(format!("spread {spread} must be finite and >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..classes * dims).map(|_| rng.random::<f64>()).collect();
    let noise = Normal::new(0.0, spread.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut features = Vec::with_capacity(samples * dims);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let c = i % classes;
        labels.push(c);
        for j in 0..dims {
            let eps = if spread == 0.0 { 0.0 } else { noise.sample(&mut rng) };
            features.push(centers[c * dims + j] + eps);
        }
    }
    Ok(Dataset::from_parts(features, dims, labels, classes, seed))
}

/// Reads a `f0,...,f{d-1},label` CSV. Labels must cover `0..C` with no gaps.
pub fn load_csv(path: impl AsRef<Path>, seed: u64) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = reader.headers()?.clone();
    let label_col = header
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::Config("missing label column".into()))?;
    if label_col != header.len() - 1 {
        return Err(Error::Config("label must be the last column".into()));
    }
    let dims = header.len() - 1;
    for (i, h) in header.iter().take(dims).enumerate() {
        if h.trim() != format!("f{i}") {
            return Err(Error::Config(format!("expected column f{i}, found {h:?}")));
        }
    }
    if dims == 0 {
        return Err(Error::Config("no feature columns".into()));
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        for field in rec.iter().take(dims) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("row {}: bad feature {field:?}", line + 1)))?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("row {}", line + 1)));
            }
            features.push(v);
        }
        let label = rec[dims]
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("row {}: bad label {:?}", line + 1, &rec[dims])))?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::Config("no data rows".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; classes];
    labels.iter().for_each(|&l| seen[l] = true);
    if let Some(gap) = seen.iter().position(|s| !s) {
        return Err(Error::Config(format!("labels are not contiguous: {gap} is missing")));
    }
    Ok(Dataset::from_parts(features, dims, labels, classes, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn blobs_shape_and_balance() {
        let d = make_blobs(&BlobConfig::default(), 3).unwrap();
        assert_eq!(d.len(), 2000);
        assert_eq!(d.features.len(), 2000 * 16);
        for c in 0..4 {
            assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), 500);
        }
        assert_eq!(d.train.len(), 1600);
        assert_eq!(d.validation.len(), 400);
        assert_eq!(make_blobs(&BlobConfig::default(), 3).unwrap(), d);
        assert_ne!(make_blobs(&BlobConfig::default(), 4).unwrap(), d);
    }

    #[test]
    fn blobs_reject_bad_configs() {
        let bad = [
            BlobConfig { classes: 1, ..Default::default() },
            BlobConfig { dims: 1, ..Default::default() },
            BlobConfig { samples: 39, ..Default::default() },
            BlobConfig { spread: f64::NAN, ..Default::default() },
        ];
        for cfg in bad {
            assert!(make_blobs(&cfg, 0).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn zero_spread_sits_on_centers() {
        let cfg = BlobConfig { classes: 2, dims: 2, samples: 20, spread: 0.0 };
        let d = make_blobs(&cfg, 1).unwrap();
        assert_eq!(d.row(0), d.row(2));
        assert_eq!(d.row(1), d.row(3));
    }

    #[test]
    fn csv_round_trip() {
        let f = write("f0,f1,label\n0.5,1.0,0\n-2,3,1\n1e-3,0,1\n");
        let d = load_csv(f.path(), 0).unwrap();
        assert_eq!((d.len(), d.dims, d.classes), (3, 2, 2));
        assert_eq!(d.row(1), &[-2.0, 3.0]);
        assert_eq!(d.train.len() + d.validation.len(), 3);

        let out = tempfile::NamedTempFile::new().unwrap();
        d.write_csv(out.path()).unwrap();
        assert_eq!(load_csv(out.path(), 0).unwrap(), d);
    }

    #[test]
    fn csv_errors() {
        for bad in [
            "f0,f1\n1,2\n",
            "f0,f1,label\n1,2,0\n1,2\n",
            "f0,f1,label\n1,2,0\n1,2,2\n",
            "f0,f1,label\n",
            "f0,f1,label\n1,x,0\n",
        ] {
            assert!(load_csv(write(bad).path(), 0).is_err(), "{bad:?}");
        }
    }
}
