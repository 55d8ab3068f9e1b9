//! Retained-coordinate selection and the linear compress / expand operators.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, ArchSpec, Batch, WeightVector};

/// Strictly increasing coordinate positions in `[0, dim)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    indices: Vec<usize>,
    dim: usize,
}

impl IndexSet {
    pub fn new(indices: Vec<usize>, dim: usize) -> Result<Self> {
        for (pos, &i) in indices.iter().enumerate() {
            if i >= dim {
                return Err(Error::Index { index: i, n: dim });
            }
            if pos > 0 && indices[pos - 1] >= i {
                return Err(Error::config(format!(
                    "indices must be strictly increasing (position {pos})"
                )));
            }
        }
        Ok(Self { indices, dim })
    }

    pub fn full(dim: usize) -> Self {
        Self {
            indices: (0..dim).collect(),
            dim,
        }
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            indices: Vec::new(),
            dim,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// `K`.
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `n`, the dimension of the vectors this set indexes.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_full(&self) -> bool {
        self.indices.len() == self.dim
    }

    /// `K / n`.
    pub fn ratio(&self) -> f64 {
        self.indices.len() as f64 / self.dim as f64
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Writes one decimal index per line, ascending.
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        for i in &self.indices {
            writeln!(out, "{i}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(f)
    }

    /// Parses the newline-delimited format. Blank lines are ignored.
    pub fn read_from(input: impl BufRead, dim: usize) -> Result<Self> {
        let mut indices = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let i = t.parse::<usize>().map_err(|e| {
                Error::data(format!("index file line {}: {e}", lineno + 1))
            })?;
            indices.push(i);
        }
        Self::new(indices, dim)
    }

    pub fn load(path: impl AsRef<Path>, dim: usize) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(f, dim)
    }
}

/// Values at the coordinates of an [`IndexSet`], in the set's order.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedUpdate(Vec<f64>);

impl CompressedUpdate {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k > n {
        return Err(Error::config(format!("K = {k} exceeds n = {n}")));
    }
    Ok(())
}

/// Runs `t_init` full-batch SGD steps from `w0` on the public batch,
/// accumulating `|grad|` per coordinate at every step, and keeps the `k`
/// coordinates with the largest totals (ties go to the lower index).
pub fn select_topk(
    arch: &ArchSpec,
    w0: &WeightVector,
    public: &Batch,
    t_init: usize,
    k: usize,
    lr: f64,
) -> Result<IndexSet> {
    let n = arch.param_count();
    check_k(k, n)?;
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    if t_init == 0 {
        return Err(Error::config("T_init must be at least 1"));
    }
    if k == n {
        return Ok(IndexSet::full(n));
    }
    let scores = accumulated_gradient_magnitude(arch, w0, public, t_init, lr)?;
    Ok(top_k_of(&scores, k))
}

/// Per-coordinate sum of `|grad|` over `t_init` full-batch SGD steps.
pub fn accumulated_gradient_magnitude(
    arch: &ArchSpec,
    w0: &WeightVector,
    public: &Batch,
    t_init: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let mut w = w0.clone();
    let mut acc = vec![0.0; w.len()];
    for _ in 0..t_init {
        let g = nn::gradient(arch, &w, public)?;
        for ((a, wi), gi) in acc.iter_mut().zip(w.as_mut_slice()).zip(g.as_slice()) {
            *a += gi.abs();
            *wi -= lr * gi;
        }
    }
    Ok(acc)
}

/// Indices of the `k` largest scores, lowest index first among ties,
/// returned in ascending order.
pub fn top_k_of(scores: &[f64], k: usize) -> IndexSet {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    IndexSet {
        indices: order,
        dim: scores.len(),
    }
}

/// Uniformly random `k`-subset of `[0, n)`.
pub fn select_random(n: usize, k: usize, seed: u64) -> Result<IndexSet> {
    check_k(k, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = rand::seq::index::sample(&mut rng, n, k).into_vec();
    indices.sort_unstable();
    Ok(IndexSet { indices, dim: n })
}

pub fn compress(v: &[f64], set: &IndexSet) -> Result<CompressedUpdate> {
    if v.len() != set.dim() {
        return Err(Error::Dimension {
            expected: set.dim(),
            got: v.len(),
        });
    }
    Ok(CompressedUpdate(set.indices().iter().map(|&i| v[i]).collect()))
}

/// Scatters `c` onto a copy of `base` at the coordinates of `set`.
pub fn expand(c: &CompressedUpdate, set: &IndexSet, base: &WeightVector) -> Result<WeightVector> {
    if c.len() != set.len() {
        return Err(Error::Dimension {
            expected: set.len(),
            got: c.len(),
        });
    }
    if base.len() != set.dim() {
        return Err(Error::Dimension {
            expected: set.dim(),
            got: base.len(),
        });
    }
    let mut out = base.clone();
    let slice = out.as_mut_slice();
    for (&i, &v) in set.indices().iter().zip(c.values()) {
        slice[i] = v;
    }
    Ok(out)
}
