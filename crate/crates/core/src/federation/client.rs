//! Client-side work for one round: rebuild the local model from what the
//! server sent, train, compress the update, and for DP schemes clip, noise
//! and mask it.

use serde::{Deserialize, Serialize};

use super::scheme::{SchemeSpec, Selection};
use crate::compression::{self, CompressedUpdate, IndexSet};
use crate::error::Result;
use crate::nn::{self, ArchSpec, TrainingSet, WeightVector};
use crate::privacy;
use crate::secure_agg::{self, ClientMask, FixedPointCodec, MaskedUpdate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    /// `T_gd`.
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpParams {
    pub sensitivity: f64,
    pub sigma: f64,
}

/// The model a client starts from. Schemes that pin unselected weights
/// rebuild it from `w0` plus the retained coordinates of the global model.
pub fn client_start(
    global: &WeightVector,
    w0: &WeightVector,
    set: &IndexSet,
    spec: &SchemeSpec,
) -> Result<WeightVector> {
    if spec.reinit_nonselected && spec.selection != Selection::All {
        compression::expand(&compression::compress(global.as_slice(), set)?, set, w0)
    } else {
        Ok(global.clone())
    }
}

/// Local training from `start` followed by `C(w_local - start, set)`.
#[allow(clippy::too_many_arguments)]
pub fn local_update(
    arch: &ArchSpec,
    data: &dyn TrainingSet,
    start: &WeightVector,
    w0: &WeightVector,
    set: &IndexSet,
    spec: &SchemeSpec,
    train: &LocalTraining,
    seed: u64,
) -> Result<CompressedUpdate> {
    let local = if spec.reinit_nonselected && spec.selection != Selection::All {
        nn::topk_sgd(
            arch,
            data,
            start,
            w0,
            train.iterations,
            set,
            train.learning_rate,
            train.batch_size,
            seed,
        )?
    } else {
        nn::sgd(
            arch,
            data,
            start,
            train.iterations,
            train.learning_rate,
            train.batch_size,
            seed,
        )?
    };
    compression::compress(local.sub(start)?.as_slice(), set)
}

/// Clip to `S`, add this client's share of the Gaussian noise, quantize and
/// mask. Returns the message and the number of clamped coordinates.
pub fn private_message(
    update: &CompressedUpdate,
    dp: &DpParams,
    num_selected: usize,
    codec: &FixedPointCodec,
    mask: &ClientMask,
    noise_seed: u64,
) -> Result<(MaskedUpdate, usize)> {
    let clipped = privacy::clip(update, dp.sensitivity)?;
    let noised = privacy::add_client_noise(&clipped, dp.sensitivity, dp.sigma, num_selected, noise_seed)?;
    let encoded = codec.encode(noised.values())?;
    Ok((secure_agg::encrypt(&encoded.residues, mask, codec)?, encoded.clamps))
}
