//! Synthetic long-tailed Gaussian-blob datasets.
//!
//! Class centers sit on a sphere of radius `class_separation`; each sample is
//! its class center plus isotropic Gaussian noise. Training counts decay
//! exponentially from `max_count` (class 0) to `max_count / imbalance_factor`
//! (class K-1); the test split is balanced.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassStats;

const CENTER_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    /// Training samples in the largest class.
    pub max_count: u64,
    /// Ratio between the largest and the smallest class.
    pub imbalance_factor: f64,
    pub input_dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
    pub test_per_class: u64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 100,
            max_count: 500,
            imbalance_factor: 100.0,
            input_dim: 32,
            class_separation: 4.0,
            noise_sigma: 1.0,
            test_per_class: 100,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 3 {
            return Err(Error::config(format!(
                "num_classes must be >= 3, got {}",
                self.num_classes
            )));
        }
        if self.max_count < 10 {
            return Err(Error::config(format!(
                "max_count must be >= 10, got {}",
                self.max_count
            )));
        }
        if !(self.imbalance_factor.is_finite() && self.imbalance_factor >= 1.0) {
            return Err(Error::config(format!(
                "imbalance_factor must be >= 1, got {}",
                self.imbalance_factor
            )));
        }
        if self.input_dim < 2 {
            return Err(Error::config(format!(
                "input_dim must be >= 2, got {}",
                self.input_dim
            )));
        }
        if !(self.class_separation.is_finite() && self.class_separation > 0.0) {
            return Err(Error::config("class_separation must be > 0"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return Err(Error::config("noise_sigma must be > 0"));
        }
        if self.test_per_class == 0 {
            return Err(Error::config("test_per_class must be >= 1"));
        }
        Ok(())
    }
}

/// Features (one row per sample) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn counts(&self) -> Vec<u64> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Writes `feature_0,...,feature_{d-1},label` with 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().from_writer(writer);
        let mut header: Vec<String> = (0..self.input_dim())
            .map(|i| format!("feature_{i}"))
            .collect();
        header.push("label".to_string());
        out.write_record(&header)?;
        for (row, &label) in self.features.rows().into_iter().zip(&self.labels) {
            let mut record: Vec<String> = row.iter().map(|v| format_float(*v)).collect();
            record.push(label.to_string());
            out.write_record(&record)?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, num_classes: usize) -> Result<Self> {
        let mut input = csv::Reader::from_reader(reader);
        let headers = input.headers()?.clone();
        let dim = headers.len().saturating_sub(1);
        let expected = (0..dim)
            .map(|i| format!("feature_{i}"))
            .chain(std::iter::once("label".to_string()));
        if dim == 0
            || !headers
                .iter()
                .eq(expected.collect::<Vec<_>>().iter().map(String::as_str))
        {
            return Err(Error::Shape(format!(
                "unexpected dataset header: {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for record in input.records() {
            let record = record?;
            for field in record.iter().take(dim) {
                let v: f64 = field
                    .parse()
                    .map_err(|_| Error::Shape(format!("bad feature value `{field}`")))?;
                values.push(v);
            }
            let label = &record[dim];
            labels.push(
                label
                    .parse()
                    .map_err(|_| Error::Shape(format!("bad label `{label}`")))?,
            );
        }
        let features = Array2::from_shape_vec((labels.len(), dim), values)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(features, labels, num_classes)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load_csv(path: &Path, num_classes: usize) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file), num_classes)
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Train split, balanced test split and statistics of the train split.
#[derive(Debug, Clone)]
pub struct Generated {
    pub train: Dataset,
    pub test: Dataset,
    pub stats: ClassStats,
}

/// `N_c = round(N_1 · IF^{-c/(K-1)})` for `c = 0..K`.
pub fn exponential_class_counts(spec: &DatasetSpec) -> Result<Vec<u64>> {
    spec.validate()?;
    let k = spec.num_classes;
    let counts: Vec<u64> = (0..k)
        .map(|c| {
            let decay = spec.imbalance_factor.powf(-(c as f64) / (k - 1) as f64);
            (spec.max_count as f64 * decay).round() as u64
        })
        .collect();
    if let Some(class) = counts.iter().position(|&n| n == 0) {
        return Err(Error::config(format!(
            "imbalance factor {} leaves class {class} empty with max_count {}",
            spec.imbalance_factor, spec.max_count
        )));
    }
    Ok(counts)
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn class_centers(spec: &DatasetSpec) -> Array2<f64> {
    let mut rng = rng(spec.seed, CENTER_STREAM);
    let mut centers = Array2::zeros((spec.num_classes, spec.input_dim));
    for mut row in centers.rows_mut() {
        loop {
            row.iter_mut()
                .for_each(|v: &mut f64| *v = StandardNormal.sample(&mut rng));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row.mapv_inplace(|v| v / norm * spec.class_separation);
                break;
            }
        }
    }
    centers
}

fn sample_blobs(
    centers: &Array2<f64>,
    counts: &[u64],
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let total = counts.iter().sum::<u64>() as usize;
    let dim = centers.ncols();
    let mut features = Array2::zeros((total, dim));
    let mut labels = Vec::with_capacity(total);
    let mut rows = features.rows_mut().into_iter();
    for (class, &n) in counts.iter().enumerate() {
        let center = centers.row(class);
        for _ in 0..n {
            let mut row = rows.next().expect("row count matches");
            for (v, c) in row.iter_mut().zip(center) {
                let noise: f64 = StandardNormal.sample(rng);
                *v = c + sigma * noise;
            }
            labels.push(class);
        }
    }
    Dataset::new(features, labels, counts.len())
}

pub fn generate(spec: &DatasetSpec) -> Result<Generated> {
    let counts = exponential_class_counts(spec)?;
    let centers = class_centers(spec);
    let train = sample_blobs(
        &centers,
        &counts,
        spec.noise_sigma,
        &mut rng(spec.seed, TRAIN_STREAM),
    )?;
    let test_counts = vec![spec.test_per_class; spec.num_classes];
    let test = sample_blobs(
        &centers,
        &test_counts,
        spec.noise_sigma,
        &mut rng(spec.seed, TEST_STREAM),
    )?;
    let stats = ClassStats::from_counts(train.counts())?;
    Ok(Generated { train, test, stats })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Many => "many",
            Group::Medium => "medium",
            Group::Few => "few",
        })
    }
}

/// Training-count thresholds: Many is `N_c >= many_min`, Few is
/// `N_c <= few_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupThresholds {
    pub many_min: u64,
    pub few_max: u64,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        Self {
            many_min: 100,
            few_max: 20,
        }
    }
}

impl GroupThresholds {
    pub fn new(many_min: u64, few_max: u64) -> Result<Self> {
        let t = Self { many_min, few_max };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.few_max >= self.many_min {
            return Err(Error::config(format!(
                "few_max ({}) must be below many_min ({})",
                self.few_max, self.many_min
            )));
        }
        Ok(())
    }

    pub fn group_of(&self, count: u64) -> Group {
        if count >= self.many_min {
            Group::Many
        } else if count <= self.few_max {
            Group::Few
        } else {
            Group::Medium
        }
    }
}

pub fn assign_groups(stats: &ClassStats, thresholds: &GroupThresholds) -> Vec<Group> {
    stats
        .counts()
        .iter()
        .map(|&n| thresholds.group_of(n))
        .collect()
}
