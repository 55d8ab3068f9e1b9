//! Datasets, client partitioning, class rebalancing and public batches.

pub mod idx;
pub mod synth;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Matrix, TrainingSet};

pub use synth::{synth_clusters, synth_imbalanced};

/// Feature rows with integer class labels. Features lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    num_features: usize,
    num_classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        num_features: usize,
        num_classes: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if num_features == 0 || num_classes < 2 {
            return Err(Error::data("need at least one feature and two classes"));
        }
        if inputs.len() != labels.len() * num_features {
            return Err(Error::Dimension {
                expected: labels.len() * num_features,
                got: inputs.len(),
            });
        }
        if let Some(i) = inputs.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::data(format!(
                "feature {} of row {} is {} (outside [0, 1])",
                i % num_features,
                i / num_features,
                inputs[i]
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::data(format!("label {l} >= {num_classes} classes")));
        }
        Ok(Self {
            name: name.into(),
            num_features,
            num_classes,
            inputs,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }

    /// Rows `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(idx.len() * self.num_features);
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
        }
        Dataset {
            name: self.name.clone(),
            num_features: self.num_features,
            num_classes: self.num_classes,
            inputs,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn inputs_matrix(&self) -> Matrix {
        Matrix::new(self.len(), self.num_features, self.inputs.clone()).unwrap()
    }

    /// Training batch over rows `idx`. `out_width == 1` gives binary targets
    /// (two-class data only); otherwise one-hot rows of width `out_width`.
    pub fn batch(&self, idx: &[usize], out_width: usize) -> Result<Batch> {
        if out_width == 1 && self.num_classes != 2 {
            return Err(Error::data(format!(
                "single-output model needs binary labels, dataset has {} classes",
                self.num_classes
            )));
        }
        if out_width > 1 && out_width < self.num_classes {
            return Err(Error::data(format!(
                "model has {out_width} outputs but the dataset has {} classes",
                self.num_classes
            )));
        }
        let mut inputs = Vec::with_capacity(idx.len() * self.num_features);
        let mut targets = vec![0.0; idx.len() * out_width];
        for (r, &i) in idx.iter().enumerate() {
            inputs.extend_from_slice(self.row(i));
            let l = self.labels[i];
            if out_width == 1 {
                targets[r] = l as f64;
            } else {
                targets[r * out_width + l] = 1.0;
            }
        }
        Batch::new(
            Matrix::new(idx.len(), self.num_features, inputs)?,
            Matrix::new(idx.len(), out_width, targets)?,
        )
    }
}

/// One client's shard viewed as a training set.
#[derive(Debug, Clone, Copy)]
pub struct ClientData<'a> {
    pub dataset: &'a Dataset,
    pub indices: &'a [usize],
    pub out_width: usize,
}

impl TrainingSet for ClientData<'_> {
    fn num_samples(&self) -> usize {
        self.indices.len()
    }

    fn batch(&self, rows: &[usize]) -> Batch {
        let idx: Vec<usize> = rows.iter().map(|&r| self.indices[r]).collect();
        // widths were validated when the experiment was set up
        self.dataset
            .batch(&idx, self.out_width)
            .expect("client batch")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum PartitionMode {
    #[default]
    Iid,
    /// Each client only sees samples of `labels_per_client` classes.
    LabelSkewed { labels_per_client: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub mode: PartitionMode,
    pub assignments: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }
}

/// Splits `d` across `n_clients` disjoint shards.
///
/// `Iid` shards all have `floor(|d| / n_clients)` samples. `LabelSkewed`
/// assigns each client a rotating subset of classes and fills its shard
/// round-robin from those classes only; shards may come out smaller when a
/// class runs short.
pub fn partition(d: &Dataset, n_clients: usize, mode: PartitionMode, seed: u64) -> Result<Partition> {
    if n_clients == 0 || n_clients > d.len() {
        return Err(Error::config(format!(
            "cannot split {} samples across {n_clients} clients",
            d.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shard = d.len() / n_clients;
    let assignments = match mode {
        PartitionMode::Iid => {
            let mut order: Vec<usize> = (0..d.len()).collect();
            order.shuffle(&mut rng);
            order.chunks(shard).take(n_clients).map(<[usize]>::to_vec).collect()
        }
        PartitionMode::LabelSkewed { labels_per_client } => {
            let c = d.num_classes();
            if labels_per_client == 0 || labels_per_client > c {
                return Err(Error::config(format!(
                    "labels_per_client must be in 1..={c}, got {labels_per_client}"
                )));
            }
            let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
            for (i, &l) in d.labels().iter().enumerate() {
                pools[l].push(i);
            }
            for p in &mut pools {
                p.shuffle(&mut rng);
            }
            let mut label_order: Vec<usize> = (0..c).collect();
            label_order.shuffle(&mut rng);
            let mut out = Vec::with_capacity(n_clients);
            for client in 0..n_clients {
                let labels: Vec<usize> = (0..labels_per_client)
                    .map(|j| label_order[(client * labels_per_client + j) % c])
                    .collect();
                let mut mine = Vec::with_capacity(shard);
                let mut dry = 0;
                let mut j = 0;
                while mine.len() < shard && dry < labels.len() {
                    match pools[labels[j % labels.len()]].pop() {
                        Some(i) => {
                            mine.push(i);
                            dry = 0;
                        }
                        None => dry += 1,
                    }
                    j += 1;
                }
                if mine.is_empty() {
                    return Err(Error::config(format!(
                        "client {client} received no samples from labels {labels:?}"
                    )));
                }
                out.push(mine);
            }
            out
        }
    };
    Ok(Partition { mode, assignments })
}

/// Subsamples the majority class of a two-class dataset down to the
/// minority count. Row order is preserved.
pub fn downsample(d: &Dataset, seed: u64) -> Result<Dataset> {
    if d.num_classes() != 2 {
        return Err(Error::data("downsampling needs binary labels"));
    }
    let counts = d.class_counts();
    if counts.contains(&0) {
        return Err(Error::data("downsampling needs both classes present"));
    }
    let minority = if counts[0] <= counts[1] { 0 } else { 1 };
    let keep_n = counts[minority];
    let majority_idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels()[i] != minority).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampled = rand::seq::index::sample(&mut rng, majority_idx.len(), keep_n);
    let mut keep: Vec<usize> = (0..d.len()).filter(|&i| d.labels()[i] == minority).collect();
    keep.extend(sampled.iter().map(|j| majority_idx[j]));
    keep.sort_unstable();
    Ok(d.subset(&keep))
}

/// Random `size`-row batch from `source`.
pub fn public_batch(source: &Dataset, size: usize, out_width: usize, seed: u64) -> Result<Batch> {
    if size == 0 || size > source.len() {
        return Err(Error::config(format!(
            "public batch of {size} from a dataset of {}",
            source.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, source.len(), size).into_vec();
    idx.sort_unstable();
    source.batch(&idx, out_width)
}

/// Seeded random split; the first set gets `round(train_fraction * |d|)` rows.
pub fn train_test_split(d: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (train_fraction * d.len() as f64).round() as usize;
    let (a, b) = order.split_at(cut);
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_unstable();
    b.sort_unstable();
    Ok((d.subset(&a), d.subset(&b)))
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]` and flattening
/// each image into one row.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let name = images
        .as_ref()
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let img = idx::read(images, idx::IMAGES_MAGIC)?;
    let lab = idx::read(labels, idx::LABELS_MAGIC)?;
    from_idx(name, &img, &lab)
}

pub fn from_idx(name: impl Into<String>, img: &idx::IdxArray, lab: &idx::IdxArray) -> Result<Dataset> {
    let count = img.dims[0];
    if lab.dims[0] != count {
        return Err(Error::data(format!(
            "{count} images but {} labels",
            lab.dims[0]
        )));
    }
    let features: usize = img.dims[1..].iter().product();
    let inputs = img.data.iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new(name, features, classes, inputs, labels)
}
