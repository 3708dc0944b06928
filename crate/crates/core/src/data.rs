//! Task sequences, datasets, and the synthetic oracle family.
//!
//! A [`TaskSequence`] partitions a dataset's classes into ordered disjoint
//! tasks. Sample labels inside a task are *model-space* row indices: class
//! `class_order[r]` maps to classifier row `r`, so rows for task j precede
//! rows for task j+1 by construction.
//!
//! Desk-scale data comes from two procedural sources that need no downloads:
//! `synthpat` (10 classes of noisy parametric 16x16 patterns in `[-1, 1]`)
//! and the tied-Gaussian oracle (vector data where the estimation stage's
//! modeling assumption holds exactly). CIFAR-100 and Tiny-ImageNet adapters
//! load the standard archives for full-scale runs.

use crate::error::{CoreError, Result};
use crate::rng::{self, Stream};
use crate::stats::cholesky;
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

pub type ClassId = usize;

/// A labelled sample set. `labels` are model-space row indices once the set
/// is part of a [`TaskSequence`]; original dataset ids before that.
#[derive(Debug, Clone)]
pub struct DataSet {
    pub inputs: ArrayD<f64>,
    pub labels: Vec<ClassId>,
}

impl DataSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows selected by index, in the given order.
    pub fn gather(&self, idx: &[usize]) -> (ArrayD<f64>, Vec<ClassId>) {
        let mut shape: Vec<usize> = self.inputs.shape().to_vec();
        shape[0] = idx.len();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
        for (row, &i) in idx.iter().enumerate() {
            out.index_axis_mut(Axis(0), row).assign(&self.inputs.index_axis(Axis(0), i));
        }
        (out, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Samples whose label is in `keep`.
    pub fn filter_labels(&self, keep: &BTreeSet<ClassId>) -> DataSet {
        let idx: Vec<usize> =
            (0..self.len()).filter(|&i| keep.contains(&self.labels[i])).collect();
        let (inputs, labels) = self.gather(&idx);
        DataSet { inputs, labels }
    }

    pub fn concat(&self, other: &DataSet) -> DataSet {
        assert_eq!(self.inputs.shape()[1..], other.inputs.shape()[1..]);
        let inputs = ndarray::concatenate(
            Axis(0),
            &[self.inputs.view(), other.inputs.view()],
        )
        .expect("concat shapes");
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        DataSet { inputs, labels }
    }
}

/// Shuffled index batches for one epoch; a pure function of the stream state.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut Stream) -> Vec<Vec<usize>> {
    let order = rng::permutation(rng, n);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// One task of a sequence.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub index: usize,
    /// Original dataset ids of this task's classes, in row order.
    pub original_ids: Vec<ClassId>,
    /// Model-space rows `[start, end)` owned by this task.
    pub row_range: (usize, usize),
    pub train: DataSet,
    pub test: DataSet,
}

impl TaskData {
    pub fn class_count(&self) -> usize {
        self.row_range.1 - self.row_range.0
    }
}

/// Ordered disjoint class partitions with per-task train/test sets.
#[derive(Debug, Clone)]
pub struct TaskSequence {
    pub class_order: Vec<ClassId>,
    pub tasks: Vec<TaskData>,
    pub input_shape: Vec<usize>,
}

impl TaskSequence {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Number of classes seen through task `i` (inclusive).
    pub fn classes_through(&self, i: usize) -> usize {
        self.tasks[i].row_range.1
    }

    /// Union of test sets of tasks `0..=i`.
    pub fn cumulative_test(&self, i: usize) -> DataSet {
        let mut acc = self.tasks[0].test.clone();
        for t in &self.tasks[1..=i] {
            acc = acc.concat(&t.test);
        }
        acc
    }

    /// Reproducibility manifest: class order and per-task class lists.
    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "class_order": self.class_order,
            "num_tasks": self.num_tasks(),
            "tasks": self.tasks.iter().map(|t| serde_json::json!({
                "index": t.index,
                "classes": t.original_ids,
                "rows": [t.row_range.0, t.row_range.1],
                "train_samples": t.train.len(),
                "test_samples": t.test.len(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// A whole dataset before task splitting (labels are original ids).
#[derive(Debug, Clone)]
pub struct FullDataset {
    pub train: DataSet,
    pub test: DataSet,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
}

/// How the class order is chosen before splitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassOrderSpec {
    /// Natural 0..C order.
    Identity,
    /// Seed-derived permutation.
    Seed { seed: u64 },
    /// One of the three shipped fixed orders (for multi-order averaging).
    Shipped { index: usize },
    /// Explicit permutation.
    Explicit { order: Vec<ClassId> },
}

impl Default for ClassOrderSpec {
    fn default() -> Self {
        ClassOrderSpec::Identity
    }
}

/// The three fixed class orders shipped for multi-order averaging.
pub fn shipped_class_orders(num_classes: usize) -> [Vec<ClassId>; 3] {
    [17u64, 43, 91].map(|seed| {
        let mut r = rng::stream(seed, &["shipped-class-order"]);
        rng::permutation(&mut r, num_classes)
    })
}

fn resolve_order(spec: &ClassOrderSpec, num_classes: usize) -> Result<Vec<ClassId>> {
    let order = match spec {
        ClassOrderSpec::Identity => (0..num_classes).collect(),
        ClassOrderSpec::Seed { seed } => {
            let mut r = rng::stream(*seed, &["class-order"]);
            rng::permutation(&mut r, num_classes)
        }
        ClassOrderSpec::Shipped { index } => {
            if *index >= 3 {
                return Err(CoreError::InvalidArgument(format!(
                    "shipped class order index {index} out of range 0..3"
                )));
            }
            shipped_class_orders(num_classes)[*index].clone()
        }
        ClassOrderSpec::Explicit { order } => order.clone(),
    };
    let mut seen = vec![false; num_classes];
    if order.len() != num_classes {
        return Err(CoreError::InvalidArgument(format!(
            "class order has {} entries for {num_classes} classes",
            order.len()
        )));
    }
    for &c in &order {
        if c >= num_classes || seen[c] {
            return Err(CoreError::InvalidArgument(format!(
                "class order is not a permutation (class {c})"
            )));
        }
        seen[c] = true;
    }
    Ok(order)
}

/// Split a dataset's classes into `num_tasks` equal ordered chunks.
///
/// Samples are routed to the task owning their class, and labels are
/// rewritten to model-space rows (position in the class order).
pub fn split_tasks(
    dataset: &FullDataset,
    num_tasks: usize,
    order_spec: &ClassOrderSpec,
) -> Result<TaskSequence> {
    if num_tasks == 0 || dataset.num_classes % num_tasks != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "{} classes cannot be split into {num_tasks} equal tasks",
            dataset.num_classes
        )));
    }
    let order = resolve_order(order_spec, dataset.num_classes)?;
    let per_task = dataset.num_classes / num_tasks;

    // original class id -> model row
    let mut row_of = vec![0usize; dataset.num_classes];
    for (row, &c) in order.iter().enumerate() {
        row_of[c] = row;
    }

    let route = |set: &DataSet| -> Vec<DataSet> {
        let mut per_task_idx: Vec<Vec<usize>> = vec![Vec::new(); num_tasks];
        for (i, &y) in set.labels.iter().enumerate() {
            per_task_idx[row_of[y] / per_task].push(i);
        }
        per_task_idx
            .into_iter()
            .map(|idx| {
                let (inputs, labels) = set.gather(&idx);
                DataSet { inputs, labels: labels.into_iter().map(|y| row_of[y]).collect() }
            })
            .collect()
    };

    let train_parts = route(&dataset.train);
    let test_parts = route(&dataset.test);
    let tasks = train_parts
        .into_iter()
        .zip(test_parts)
        .enumerate()
        .map(|(i, (train, test))| TaskData {
            index: i,
            original_ids: order[i * per_task..(i + 1) * per_task].to_vec(),
            row_range: (i * per_task, (i + 1) * per_task),
            train,
            test,
        })
        .collect();
    Ok(TaskSequence { class_order: order, tasks, input_shape: dataset.input_shape.clone() })
}

// ---------------------------------------------------------------------------
// synthetic pattern dataset (desk-scale image data)
// ---------------------------------------------------------------------------

pub const SYNTHPAT_CLASSES: usize = 10;
pub const SYNTHPAT_SIDE: usize = 16;

/// One 16x16 pattern sample for class `k` with per-sample jitter and noise.
fn synthpat_sample(class: usize, rng: &mut Stream) -> Array2<f64> {
    let n = SYNTHPAT_SIDE;
    let mut img = Array2::<f64>::zeros((n, n));
    let amp: f64 = rng.random_range(0.75..1.0);
    let dx: f64 = rng.random_range(-2.0..2.0);
    let dy: f64 = rng.random_range(-2.0..2.0);
    let tau = std::f64::consts::TAU;
    for y in 0..n {
        for x in 0..n {
            let (xf, yf) = (x as f64, y as f64);
            let v = match class {
                0 => (tau * (yf + dy) / 4.0).sin(),
                1 => (tau * (xf + dx) / 4.0).sin(),
                2 => (tau * (xf + yf + dx) / 5.66).sin(),
                3 => (tau * (xf + dx) / 8.0).sin() * (tau * (yf + dy) / 8.0).sin() * 2.0,
                4 => {
                    let r2 = (xf - 7.5 - dx).powi(2) + (yf - 7.5 - dy).powi(2);
                    2.0 * (-r2 / 18.0).exp() - 1.0
                }
                5 => {
                    let r2 = (xf - 3.5 - dx * 0.5).powi(2) + (yf - 3.5 - dy * 0.5).powi(2);
                    2.0 * (-r2 / 10.0).exp() - 1.0
                }
                6 => {
                    let r = ((xf - 7.5).powi(2) + (yf - 7.5).powi(2)).sqrt();
                    2.0 * (-(r - 5.0 - dx * 0.3).powi(2) / 3.0).exp() - 1.0
                }
                7 => ((xf - 7.5 - dx) / 1.5).tanh(),
                8 => {
                    let hx = (-(xf - 7.5 - dx).powi(2) / 6.0).exp();
                    let hy = (-(yf - 7.5 - dy).powi(2) / 6.0).exp();
                    2.0 * hx.max(hy) - 1.0
                }
                9 => {
                    let edge = x < 2 || y < 2 || x >= n - 2 || y >= n - 2;
                    if edge {
                        1.0
                    } else {
                        -1.0
                    }
                }
                _ => unreachable!("synthpat has 10 classes"),
            };
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.15;
            img[(y, x)] = (amp * v.clamp(-1.0, 1.0) + noise).clamp(-1.0, 1.0);
        }
    }
    img
}

/// Build the 10-class procedural pattern dataset (`[1, 16, 16]` samples).
pub fn synthpat_dataset(train_per_class: usize, test_per_class: usize, seed: u64) -> FullDataset {
    let build = |per_class: usize, split: &str| {
        let n_total = per_class * SYNTHPAT_CLASSES;
        let mut inputs = ArrayD::<f64>::zeros(IxDyn(&[n_total, 1, SYNTHPAT_SIDE, SYNTHPAT_SIDE]));
        let mut labels = Vec::with_capacity(n_total);
        let mut row = 0usize;
        for class in 0..SYNTHPAT_CLASSES {
            let mut r = rng::stream(seed, &["synthpat", split, &class.to_string()]);
            for _ in 0..per_class {
                let img = synthpat_sample(class, &mut r).insert_axis(Axis(0));
                inputs.index_axis_mut(Axis(0), row).assign(&img);
                labels.push(class);
                row += 1;
            }
        }
        DataSet { inputs, labels }
    };
    FullDataset {
        train: build(train_per_class, "train"),
        test: build(test_per_class, "test"),
        num_classes: SYNTHPAT_CLASSES,
        input_shape: vec![1, SYNTHPAT_SIDE, SYNTHPAT_SIDE],
    }
}

// ---------------------------------------------------------------------------
// tied-Gaussian oracle
// ---------------------------------------------------------------------------

/// Vector data family where the tied-Gaussian assumption holds exactly.
#[derive(Debug, Clone)]
pub struct OracleTaskSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub means: Array2<f64>,
    pub covariance: Array2<f64>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl OracleTaskSpec {
    /// Random means/covariance: class means of norm ~`separation`, SPD
    /// covariance with unit-scale diagonal.
    pub fn random(
        num_classes: usize,
        feature_dim: usize,
        separation: f64,
        train_per_class: usize,
        test_per_class: usize,
        seed: u64,
    ) -> Self {
        let mut r = rng::stream(seed, &["oracle-spec"]);
        let mut means = Array2::<f64>::zeros((num_classes, feature_dim));
        for mut row in means.rows_mut() {
            let v = Array1::from_iter(
                (0..feature_dim).map(|_| r.sample::<f64, _>(StandardNormal)),
            );
            let norm = v.mapv(|x| x * x).sum().sqrt().max(1e-9);
            row.assign(&(v * (separation / norm)));
        }
        let a = rng::normal_array(&mut r, &[feature_dim, feature_dim])
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut covariance = a.dot(&a.t()) / feature_dim as f64 * 0.5;
        for i in 0..feature_dim {
            covariance[[i, i]] += 0.5;
        }
        OracleTaskSpec {
            num_classes,
            feature_dim,
            means,
            covariance,
            train_per_class,
            test_per_class,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.nrows() != self.num_classes || self.means.ncols() != self.feature_dim {
            return Err(CoreError::ShapeMismatch("oracle means shape".into()));
        }
        for i in 0..self.num_classes {
            for j in (i + 1)..self.num_classes {
                let gap: f64 =
                    (&self.means.row(i) - &self.means.row(j)).mapv(|x| x * x).sum();
                if gap == 0.0 {
                    return Err(CoreError::InvalidArgument(format!(
                        "oracle means {i} and {j} coincide"
                    )));
                }
            }
        }
        cholesky(&self.covariance)
            .ok_or(CoreError::NotPositiveDefinite(self.feature_dim))
            .map(|_| ())
    }

    /// Sample the dataset (deterministic in the spec seed).
    pub fn generate(&self) -> Result<FullDataset> {
        self.validate()?;
        let chol = cholesky(&self.covariance).expect("validated covariance");
        let build = |per_class: usize, split: &str| {
            let n_total = per_class * self.num_classes;
            let mut inputs = ArrayD::<f64>::zeros(IxDyn(&[n_total, self.feature_dim]));
            let mut labels = Vec::with_capacity(n_total);
            let mut row = 0usize;
            for class in 0..self.num_classes {
                let mut r =
                    rng::stream(self.seed, &["oracle", split, &class.to_string()]);
                let mean = self.means.row(class);
                for _ in 0..per_class {
                    let xi = Array1::from_iter(
                        (0..self.feature_dim).map(|_| r.sample::<f64, _>(StandardNormal)),
                    );
                    let z = &mean + &chol.dot(&xi);
                    inputs.index_axis_mut(Axis(0), row).assign(&z);
                    labels.push(class);
                    row += 1;
                }
            }
            DataSet { inputs, labels }
        };
        Ok(FullDataset {
            train: build(self.train_per_class, "train"),
            test: build(self.test_per_class, "test"),
            num_classes: self.num_classes,
            input_shape: vec![self.feature_dim],
        })
    }
}

/// Oracle dataset split into tasks (identity class order; the oracle's class
/// geometry is already random).
pub fn make_oracle_tasks(spec: &OracleTaskSpec, num_tasks: usize) -> Result<TaskSequence> {
    let data = spec.generate()?;
    split_tasks(&data, num_tasks, &ClassOrderSpec::Identity)
}

// ---------------------------------------------------------------------------
// full-scale dataset adapters
// ---------------------------------------------------------------------------

/// Where to look for full-scale dataset archives.
pub fn data_root(configured: Option<&Path>) -> PathBuf {
    configured
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os("DFCIL_DATA_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn missing(what: &str, path: &Path) -> CoreError {
    CoreError::DatasetUnavailable(format!("{what} not found at {}", path.display()))
}

/// CIFAR-100 from the standard binary archive (`cifar-100-binary/…`).
/// Pixels are mapped to `[-1, 1]`.
pub fn load_cifar100(root: &Path) -> Result<FullDataset> {
    let dir = root.join("cifar-100-binary");
    let parse = |file: &Path| -> Result<DataSet> {
        let bytes = std::fs::read(file).map_err(|_| missing("CIFAR-100 archive", file))?;
        const REC: usize = 2 + 3072;
        if bytes.len() % REC != 0 {
            return Err(CoreError::DatasetUnavailable(format!(
                "{} has invalid record size",
                file.display()
            )));
        }
        let n = bytes.len() / REC;
        let mut inputs = ArrayD::<f64>::zeros(IxDyn(&[n, 3, 32, 32]));
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let rec = &bytes[i * REC..(i + 1) * REC];
            labels.push(rec[1] as usize); // fine label
            for (j, &b) in rec[2..].iter().enumerate() {
                let (c, rest) = (j / 1024, j % 1024);
                let (y, x) = (rest / 32, rest % 32);
                inputs[[i, c, y, x]] = b as f64 / 127.5 - 1.0;
            }
        }
        Ok(DataSet { inputs, labels })
    };
    Ok(FullDataset {
        train: parse(&dir.join("train.bin"))?,
        test: parse(&dir.join("test.bin"))?,
        num_classes: 100,
        input_shape: vec![3, 32, 32],
    })
}

/// Tiny-ImageNet-200 from the standard directory layout. Pixels are mapped
/// to `[-1, 1]`; the val split serves as the test set.
pub fn load_tiny_imagenet(root: &Path) -> Result<FullDataset> {
    let dir = root.join("tiny-imagenet-200");
    let wnids_path = dir.join("wnids.txt");
    let wnids_raw =
        std::fs::read_to_string(&wnids_path).map_err(|_| missing("wnids.txt", &wnids_path))?;
    let wnids: Vec<&str> = wnids_raw.lines().filter(|l| !l.is_empty()).collect();
    let class_of = |wnid: &str| wnids.iter().position(|w| *w == wnid);

    let decode = |path: &Path| -> Result<Array1<f64>> {
        let img = image::open(path)
            .map_err(|e| CoreError::DatasetUnavailable(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let mut out = Array1::<f64>::zeros(3 * 64 * 64);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out[c * 64 * 64 + y as usize * 64 + x as usize] = p[c] as f64 / 127.5 - 1.0;
            }
        }
        Ok(out)
    };

    let mut train_rows: Vec<(Array1<f64>, usize)> = Vec::new();
    for (k, wnid) in wnids.iter().enumerate() {
        let img_dir = dir.join("train").join(wnid).join("images");
        let mut entries: Vec<PathBuf> = std::fs::read_dir(&img_dir)
            .map_err(|_| missing("train images", &img_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for path in entries {
            train_rows.push((decode(&path)?, k));
        }
    }

    let ann_path = dir.join("val").join("val_annotations.txt");
    let ann = std::fs::read_to_string(&ann_path).map_err(|_| missing("val annotations", &ann_path))?;
    let mut test_rows: Vec<(Array1<f64>, usize)> = Vec::new();
    for line in ann.lines() {
        let mut cols = line.split_whitespace();
        let (Some(file), Some(wnid)) = (cols.next(), cols.next()) else { continue };
        let Some(k) = class_of(wnid) else { continue };
        test_rows.push((decode(&dir.join("val").join("images").join(file))?, k));
    }

    let pack = |rows: Vec<(Array1<f64>, usize)>| {
        let n = rows.len();
        let mut inputs = ArrayD::<f64>::zeros(IxDyn(&[n, 3, 64, 64]));
        let mut labels = Vec::with_capacity(n);
        for (i, (flat, k)) in rows.into_iter().enumerate() {
            let img = flat.into_shape_clone(IxDyn(&[3, 64, 64])).unwrap();
            inputs.index_axis_mut(Axis(0), i).assign(&img);
            labels.push(k);
        }
        DataSet { inputs, labels }
    };
    Ok(FullDataset {
        train: pack(train_rows),
        test: pack(test_rows),
        num_classes: wnids.len(),
        input_shape: vec![3, 64, 64],
    })
}

/// Dataset selector as it appears in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Procedural 10-class pattern images (desk profile).
    Synthpat {
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Tied-Gaussian vector oracle with generated geometry.
    Oracle {
        num_classes: usize,
        feature_dim: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_train_per_class")]
        train_per_class: usize,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
        #[serde(default)]
        seed: u64,
    },
    Cifar100 {
        #[serde(default)]
        root: Option<PathBuf>,
    },
    TinyImagenet {
        #[serde(default)]
        root: Option<PathBuf>,
    },
}

fn default_train_per_class() -> usize {
    100
}

fn default_test_per_class() -> usize {
    40
}

fn default_separation() -> f64 {
    3.0
}

impl DatasetSpec {
    pub fn load(&self) -> Result<FullDataset> {
        match self {
            DatasetSpec::Synthpat { train_per_class, test_per_class, seed } => {
                Ok(synthpat_dataset(*train_per_class, *test_per_class, *seed))
            }
            DatasetSpec::Oracle {
                num_classes,
                feature_dim,
                separation,
                train_per_class,
                test_per_class,
                seed,
            } => OracleTaskSpec::random(
                *num_classes,
                *feature_dim,
                *separation,
                *train_per_class,
                *test_per_class,
                *seed,
            )
            .generate(),
            DatasetSpec::Cifar100 { root } => load_cifar100(&data_root(root.as_deref())),
            DatasetSpec::TinyImagenet { root } => load_tiny_imagenet(&data_root(root.as_deref())),
        }
    }
}
