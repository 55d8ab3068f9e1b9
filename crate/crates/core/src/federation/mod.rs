//! Round loop for every scheme: client sampling, local training, (secure)
//! aggregation, evaluation and bandwidth/privacy bookkeeping.

pub mod client;
pub mod metrics;
pub mod scheme;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{self, CompressedUpdate, IndexSet};
use crate::data::{ClientData, Dataset, Partition};
use crate::error::{Error, Result};
use crate::nn::{self, ArchSpec, Batch, Matrix, WeightVector};
use crate::privacy::{self, MomentsAccountant};
use crate::secure_agg::{self, FixedPointCodec, MaskedUpdate};
use crate::seed;

pub use client::{DpParams, LocalTraining};
pub use metrics::bandwidth_cost;
pub use scheme::{Scheme, SchemeName, SchemeSpec, Selection};

/// Clipping bound: a fixed value or calibrated on public data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sensitivity {
    Fixed(f64),
    Calibrate,
}

impl Serialize for Sensitivity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Sensitivity::Fixed(v) => s.serialize_f64(*v),
            Sensitivity::Calibrate => s.serialize_str("calibrate"),
        }
    }
}

impl<'de> Deserialize<'de> for Sensitivity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Value(f64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Value(v) => Ok(Sensitivity::Fixed(v)),
            Raw::Word(w) if w == "calibrate" => Ok(Sensitivity::Calibrate),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "sensitivity must be a number or \"calibrate\", got \"{w}\""
            ))),
        }
    }
}

/// The four seeds every random stream of a run is derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    /// Model initialization and random index sets.
    pub model: u64,
    /// Data generation and splitting, client sampling and local batch order.
    pub sampling: u64,
    pub noise: u64,
    pub masks: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            model: 1,
            sampling: 2,
            noise: 3,
            masks: 4,
        }
    }
}

fn default_delta() -> f64 {
    privacy::accountant::DEFAULT_DELTA
}
fn default_lambda_max() -> u32 {
    privacy::accountant::DEFAULT_LAMBDA_MAX
}
fn default_t_init() -> usize {
    5
}
fn default_trials() -> usize {
    100
}
fn default_frac_bits() -> u32 {
    32
}
fn default_sensitivity() -> Sensitivity {
    Sensitivity::Calibrate
}
fn default_sigma() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub scheme: Scheme,
    /// `N`.
    pub num_clients: usize,
    /// `C`, the fraction of clients sampled each round.
    pub sampling: f64,
    /// `T_cl`.
    pub rounds: usize,
    /// Local SGD settings, also used for Top-K selection and calibration.
    pub local: LocalTraining,
    /// Compression ratio `r = K / n`; ignored by FL-STD.
    pub ratio: f64,
    /// Public-data SGD steps used for Top-K selection.
    #[serde(default = "default_t_init")]
    pub t_init: usize,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_sensitivity")]
    pub sensitivity: Sensitivity,
    /// Random index sets drawn when calibrating per-round random schemes.
    #[serde(default = "default_trials")]
    pub calibration_trials: usize,
    #[serde(default = "default_frac_bits")]
    pub frac_bits: u32,
    #[serde(default = "default_lambda_max")]
    pub lambda_max: u32,
    #[serde(default)]
    pub seeds: Seeds,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be at least 1"));
        }
        if !(self.sampling > 0.0 && self.sampling <= 1.0) {
            return Err(Error::config(format!(
                "sampling fraction must be in (0, 1], got {}",
                self.sampling
            )));
        }
        if self.cohort_size() == 0 {
            return Err(Error::config("sampling selects no clients per round"));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config(format!("ratio must be in (0, 1], got {}", self.ratio)));
        }
        if self.local.iterations == 0 || self.local.batch_size == 0 {
            return Err(Error::config("local iterations and batch size must be positive"));
        }
        if !(self.local.learning_rate.is_finite() && self.local.learning_rate >= 0.0) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if self.scheme.dp {
            if !(self.sigma > 0.0 && self.sigma.is_finite()) {
                return Err(Error::config("sigma must be positive"));
            }
            if !(self.delta > 0.0 && self.delta < 1.0) {
                return Err(Error::config("delta must be in (0, 1)"));
            }
            if let Sensitivity::Fixed(s) = self.sensitivity {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::config("sensitivity must be positive"));
                }
            }
            if self.cohort_size() < 2 {
                return Err(Error::config(
                    "secure aggregation needs at least 2 clients per round",
                ));
            }
        }
        Ok(())
    }

    /// `|K| = round(C N)`.
    pub fn cohort_size(&self) -> usize {
        (self.sampling * self.num_clients as f64).round() as usize
    }

    /// `K = round(r n)`, at least 1; `n` for uncompressed schemes.
    pub fn retained(&self, n: usize) -> usize {
        if self.scheme.spec().selection == Selection::All {
            n
        } else {
            ((self.ratio * n as f64).round() as usize).clamp(1, n)
        }
    }
}

/// Everything a run trains and evaluates on.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub train: Dataset,
    pub partition: Partition,
    pub test: Dataset,
    pub public: Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub auroc: f64,
    pub down_kb: f64,
    pub up_kb: f64,
    pub epsilon: Option<f64>,
    pub clamps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scheme: Scheme,
    pub ratio: f64,
    pub n: usize,
    pub k: usize,
    /// `accuracy` for multi-class tasks, `balanced_accuracy` for binary ones.
    pub metric: String,
    pub best: f64,
    pub round: usize,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub auroc: f64,
    pub down_kb: f64,
    pub up_kb: f64,
    pub epsilon: Option<f64>,
    pub sensitivity: Option<f64>,
    pub total_clamps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub trace: Vec<RoundMetrics>,
    pub summary: Option<Summary>,
}

/// What happened in one round, besides the model change.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub cohort: Vec<usize>,
    pub index_set: IndexSet,
    /// Length of every vector a client transmitted.
    pub message_len: usize,
    pub clamps: usize,
}

/// Federation state: configuration, `w0`, the current global model and the
/// fixed index set (if the scheme has one).
pub struct Federation<'a> {
    config: FederationConfig,
    spec: SchemeSpec,
    arch: ArchSpec,
    data: &'a FederatedData,
    w0: WeightVector,
    global: WeightVector,
    k: usize,
    fixed_set: Option<IndexSet>,
    sensitivity: Option<f64>,
    accountant: Option<MomentsAccountant>,
    test_inputs: Matrix,
    rounds_done: usize,
}

impl<'a> Federation<'a> {
    pub fn new(config: FederationConfig, arch: ArchSpec, data: &'a FederatedData) -> Result<Self> {
        config.validate()?;
        if data.partition.num_clients() != config.num_clients {
            return Err(Error::config(format!(
                "partition has {} clients, config expects {}",
                data.partition.num_clients(),
                config.num_clients
            )));
        }
        for ds in [&data.train, &data.test] {
            if ds.num_features() != arch.input_width() {
                return Err(Error::Dimension {
                    expected: arch.input_width(),
                    got: ds.num_features(),
                });
            }
            // fails early on label / output width mismatches
            ds.batch(&[0], arch.output_width())?;
        }
        let spec = config.scheme.spec();
        let n = arch.param_count();
        let k = config.retained(n);
        let w0 = nn::init_model(&arch, config.seeds.model);

        let fixed_set = match (spec.selection, spec.fixed_across_rounds) {
            (Selection::All, _) => Some(IndexSet::full(n)),
            (Selection::Topk, _) => Some(compression::select_topk(
                &arch,
                &w0,
                &data.public,
                config.t_init,
                k,
                config.local.learning_rate,
            )?),
            (Selection::Random, true) => Some(compression::select_random(
                n,
                k,
                seed::derive(config.seeds.model, &[0]),
            )?),
            (Selection::Random, false) => None,
        };

        let (sensitivity, accountant) = if spec.dp {
            let s = match config.sensitivity {
                Sensitivity::Fixed(s) => s,
                Sensitivity::Calibrate => {
                    let trials = if spec.per_round_selection() {
                        config.calibration_trials
                    } else {
                        1
                    };
                    privacy::calibrate_sensitivity(
                        &arch,
                        &spec,
                        &w0,
                        &data.public,
                        fixed_set.as_ref(),
                        k,
                        &config.local,
                        trials,
                        seed::derive(config.seeds.model, &[1]),
                    )?
                    .sensitivity
                }
            };
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Numeric(format!("calibrated sensitivity {s} is unusable")));
            }
            let acc = MomentsAccountant::new(config.sigma, config.sampling, config.lambda_max)?;
            (Some(s), Some(acc))
        } else {
            (None, None)
        };

        Ok(Self {
            test_inputs: data.test.inputs_matrix(),
            global: w0.clone(),
            config,
            spec,
            arch,
            data,
            w0,
            k,
            fixed_set,
            sensitivity,
            accountant,
            rounds_done: 0,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn w0(&self) -> &WeightVector {
        &self.w0
    }

    pub fn global(&self) -> &WeightVector {
        &self.global
    }

    pub fn fixed_set(&self) -> Option<&IndexSet> {
        self.fixed_set.as_ref()
    }

    pub fn sensitivity(&self) -> Option<f64> {
        self.sensitivity
    }

    pub fn retained(&self) -> usize {
        self.k
    }

    /// `K / n` as actually used.
    pub fn effective_ratio(&self) -> f64 {
        self.k as f64 / self.arch.param_count() as f64
    }

    fn sample_cohort(&self, round: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.config.seeds.sampling, &[round as u64]));
        let mut c = rand::seq::index::sample(&mut rng, self.config.num_clients, self.config.cohort_size())
            .into_vec();
        c.sort_unstable();
        c
    }

    fn round_set(&self, round: usize) -> Result<IndexSet> {
        match &self.fixed_set {
            Some(s) => Ok(s.clone()),
            None => compression::select_random(
                self.arch.param_count(),
                self.k,
                seed::derive(self.config.seeds.model, &[2, round as u64]),
            ),
        }
    }

    fn client_data(&self, client: usize) -> ClientData<'_> {
        ClientData {
            dataset: &self.data.train,
            indices: &self.data.partition.assignments[client],
            out_width: self.arch.output_width(),
        }
    }

    fn train_seed(&self, round: usize, client: usize) -> u64 {
        seed::derive(self.config.seeds.sampling, &[round as u64, client as u64])
    }

    /// Executes round `round` (1-based) and replaces the global model.
    pub fn run_round(&mut self, round: usize) -> Result<RoundReport> {
        let cohort = self.sample_cohort(round);
        let set = self.round_set(round)?;
        let start = client::client_start(&self.global, &self.w0, &set, &self.spec)?;
        let updates: Vec<CompressedUpdate> = cohort
            .par_iter()
            .map(|&c| {
                client::local_update(
                    &self.arch,
                    &self.client_data(c),
                    &start,
                    &self.w0,
                    &set,
                    &self.spec,
                    &self.config.local,
                    self.train_seed(round, c),
                )
            })
            .collect::<Result<_>>()?;

        let (aggregate, message_len, clamps) = if self.spec.dp {
            let masked = self.encrypt_updates(round, &cohort, updates)?;
            let message_len = masked[0].0.len();
            let (agg, clamps) = self.server_aggregate_masked(&masked)?;
            (agg, message_len, clamps)
        } else {
            let message_len = updates[0].len();
            (self.server_aggregate_plain(&cohort, &updates), message_len, 0)
        };

        self.global = self.apply(&set, &aggregate)?;
        self.rounds_done = round;
        Ok(RoundReport {
            cohort,
            index_set: set,
            message_len,
            clamps,
        })
    }

    /// Client side of a DP round: every update leaves the client only as a
    /// [`MaskedUpdate`]. The clamp count rides along as a diagnostic.
    fn encrypt_updates(
        &self,
        round: usize,
        cohort: &[usize],
        updates: Vec<CompressedUpdate>,
    ) -> Result<Vec<(MaskedUpdate, usize)>> {
        let m = cohort.len();
        let codec = FixedPointCodec::new(self.config.frac_bits, 64, m)?;
        let masks = secure_agg::make_masks(
            m,
            updates[0].len(),
            &codec,
            seed::derive(self.config.seeds.masks, &[round as u64]),
        )?
        .into_client_masks();
        let dp = DpParams {
            sensitivity: self.sensitivity.expect("dp runs carry a sensitivity"),
            sigma: self.config.sigma,
        };
        updates
            .par_iter()
            .zip(masks.par_iter())
            .zip(cohort.par_iter())
            .map(|((u, mask), &c)| {
                client::private_message(
                    u,
                    &dp,
                    m,
                    &codec,
                    mask,
                    seed::derive(self.config.seeds.noise, &[round as u64, c as u64]),
                )
            })
            .collect::<Result<_>>()
            .map_err(|e| match e {
                Error::Overflow { index, value } => Error::Numeric(format!(
                    "round {round}: fixed-point overflow at coordinate {index} (value {value})"
                )),
                e => e,
            })
    }

    /// `(1/|K|) * decode(sum of masked messages)`.
    fn server_aggregate_masked(&self, masked: &[(MaskedUpdate, usize)]) -> Result<(Vec<f64>, usize)> {
        let m = masked.len();
        let codec = FixedPointCodec::new(self.config.frac_bits, 64, m)?;
        let clamps = masked.iter().map(|(_, c)| c).sum();
        let msgs: Vec<MaskedUpdate> = masked.iter().map(|(u, _)| u.clone()).collect();
        let sum = secure_agg::aggregate_decode(&msgs, &codec)?;
        let w = 1.0 / m as f64;
        Ok((sum.into_iter().map(|s| w * s).collect(), clamps))
    }

    /// Weighted sum of plaintext updates: by data size for FL-STD, uniform
    /// otherwise.
    fn server_aggregate_plain(&self, cohort: &[usize], updates: &[CompressedUpdate]) -> Vec<f64> {
        let weights: Vec<f64> = if self.spec.selection == Selection::All {
            let sizes: Vec<usize> = cohort
                .iter()
                .map(|&c| self.data.partition.assignments[c].len())
                .collect();
            let total: usize = sizes.iter().sum();
            sizes.iter().map(|&s| s as f64 / total as f64).collect()
        } else {
            vec![1.0 / cohort.len() as f64; cohort.len()]
        };
        let mut agg = vec![0.0; updates[0].len()];
        for (u, w) in updates.iter().zip(&weights) {
            for (a, v) in agg.iter_mut().zip(u.values()) {
                *a += w * v;
            }
        }
        agg
    }

    fn apply(&self, set: &IndexSet, aggregate: &[f64]) -> Result<WeightVector> {
        let reinit = self.spec.reinit_nonselected && self.spec.selection != Selection::All;
        let mut next = if reinit { self.w0.clone() } else { self.global.clone() };
        let slice = next.as_mut_slice();
        for (&i, a) in set.indices().iter().zip(aggregate) {
            slice[i] = self.global[i] + a;
        }
        if !next.is_finite() {
            return Err(Error::Numeric("global model diverged (non-finite weights)".into()));
        }
        Ok(next)
    }

    /// Metrics of the current global model on the test set, plus cumulative
    /// costs and privacy spent after `round` rounds.
    pub fn evaluate(&self, round: usize, clamps: usize) -> Result<RoundMetrics> {
        let probs = nn::predict(&self.arch, &self.global, &self.test_inputs)?;
        let labels = self.data.test.labels();
        let predicted = metrics::predicted_labels(&probs);
        let n = self.arch.param_count();
        let r = self.effective_ratio();
        let epsilon = match &self.accountant {
            Some(acc) if round > 0 => Some(acc.epsilon(round as u64, self.config.delta)?.epsilon),
            _ => None,
        };
        Ok(RoundMetrics {
            round,
            accuracy: metrics::accuracy(&predicted, labels)?,
            balanced_accuracy: metrics::balanced_accuracy(&predicted, labels)?,
            auroc: metrics::auroc_from_probs(&probs, labels).unwrap_or(f64::NAN),
            down_kb: bandwidth_cost(r, n, round, self.config.sampling, self.spec.downstream_compressed()),
            up_kb: bandwidth_cost(r, n, round, self.config.sampling, true),
            epsilon,
            clamps,
        })
    }

    /// Runs every remaining round, evaluating after each one.
    pub fn run(mut self) -> Result<ExperimentResult> {
        let mut trace = Vec::with_capacity(self.config.rounds);
        for round in self.rounds_done + 1..=self.config.rounds {
            let report = self.run_round(round)?;
            trace.push(self.evaluate(round, report.clamps)?);
        }
        let summary = summarize(&self, &trace);
        Ok(ExperimentResult { trace, summary })
    }
}

fn summarize(fed: &Federation<'_>, trace: &[RoundMetrics]) -> Option<Summary> {
    let binary = fed.data.test.num_classes() == 2;
    let key = |m: &RoundMetrics| if binary { m.balanced_accuracy } else { m.accuracy };
    let mut best: Option<&RoundMetrics> = None;
    for m in trace {
        if best.is_none_or(|b| key(m) > key(b)) {
            best = Some(m);
        }
    }
    let best = best?;
    Some(Summary {
        scheme: fed.config.scheme,
        ratio: fed.effective_ratio(),
        n: fed.arch.param_count(),
        k: fed.k,
        metric: if binary { "balanced_accuracy" } else { "accuracy" }.into(),
        best: key(best),
        round: best.round,
        accuracy: best.accuracy,
        balanced_accuracy: best.balanced_accuracy,
        auroc: best.auroc,
        down_kb: best.down_kb,
        up_kb: best.up_kb,
        epsilon: best.epsilon,
        sensitivity: fed.sensitivity,
        total_clamps: trace.iter().map(|m| m.clamps).sum(),
    })
}

/// Builds the federation and runs all `config.rounds` rounds.
pub fn run_experiment(
    config: FederationConfig,
    arch: ArchSpec,
    data: &FederatedData,
) -> Result<ExperimentResult> {
    Federation::new(config, arch, data)?.run()
}

pub const TRACE_HEADER: [&str; 8] = [
    "round",
    "accuracy",
    "balanced_accuracy",
    "auroc",
    "down_kb",
    "up_kb",
    "epsilon",
    "clamps",
];

/// Writes the per-round trace as CSV; `epsilon` is empty for non-DP runs.
pub fn write_trace_csv(trace: &[RoundMetrics], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record(TRACE_HEADER).map_err(csv_err)?;
    for m in trace {
        w.write_record([
            m.round.to_string(),
            m.accuracy.to_string(),
            m.balanced_accuracy.to_string(),
            m.auroc.to_string(),
            m.down_kb.to_string(),
            m.up_kb.to_string(),
            m.epsilon.map(|e| e.to_string()).unwrap_or_default(),
            m.clamps.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
