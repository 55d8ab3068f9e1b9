//! Additive-mask secure aggregation over `Z_{2^b}`.
//!
//! Clients quantize their (noised) updates to fixed point, add a mask drawn
//! by a trusted dealer, and send only the masked residues. The masks of one
//! cohort sum to zero, so the server's modular sum is the sum of the
//! plaintext updates while any strict subset of messages looks uniform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::seed;

/// Signed fixed point with `frac_bits` fractional bits in a ring of
/// `modulus_bits` bits, sized so that `parties` clamped values can be summed
/// without wrapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointCodec {
    frac_bits: u32,
    modulus_bits: u32,
    parties: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub residues: Vec<u64>,
    /// Coordinates that exceeded the clamp range and were saturated.
    pub clamps: usize,
}

impl FixedPointCodec {
    pub fn new(frac_bits: u32, modulus_bits: u32, parties: usize) -> Result<Self> {
        if !(16..=64).contains(&modulus_bits) {
            return Err(Error::config(format!(
                "modulus must be 16..=64 bits, got {modulus_bits}"
            )));
        }
        if frac_bits + 8 >= modulus_bits {
            return Err(Error::config(format!(
                "{frac_bits} fractional bits leave too little headroom in a {modulus_bits}-bit ring"
            )));
        }
        if parties == 0 {
            return Err(Error::config("codec needs at least one party"));
        }
        Ok(Self {
            frac_bits,
            modulus_bits,
            parties,
        })
    }

    pub fn frac_bits(&self) -> u32 {
        self.frac_bits
    }

    pub fn modulus_bits(&self) -> u32 {
        self.modulus_bits
    }

    pub fn parties(&self) -> usize {
        self.parties
    }

    fn mask(&self) -> u64 {
        if self.modulus_bits == 64 {
            u64::MAX
        } else {
            (1u64 << self.modulus_bits) - 1
        }
    }

    fn scale(&self) -> f64 {
        (self.frac_bits as f64).exp2()
    }

    /// Largest magnitude a single party may encode:
    /// `2^(modulus_bits - frac_bits - 2) / parties`.
    pub fn clamp_range(&self) -> f64 {
        ((self.modulus_bits - self.frac_bits - 2) as f64).exp2() / self.parties as f64
    }

    pub fn add(&self, a: u64, b: u64) -> u64 {
        a.wrapping_add(b) & self.mask()
    }

    pub fn neg(&self, a: u64) -> u64 {
        a.wrapping_neg() & self.mask()
    }

    /// `round(v * 2^f)` as a two's-complement residue. Values outside the
    /// clamp range saturate and are counted; non-finite values are an error.
    pub fn encode(&self, v: &[f64]) -> Result<Encoded> {
        let limit = self.clamp_range();
        let scale = self.scale();
        let mut clamps = 0;
        let residues = v
            .iter()
            .enumerate()
            .map(|(index, &x)| {
                if !x.is_finite() {
                    return Err(Error::Overflow { index, value: x });
                }
                let c = if x.abs() > limit {
                    clamps += 1;
                    limit.copysign(x)
                } else {
                    x
                };
                let q = (c * scale).round() as i64;
                Ok(q as u64 & self.mask())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoded { residues, clamps })
    }

    fn signed_value(&self, r: u64) -> i64 {
        let half = 1u64 << (self.modulus_bits - 1);
        if r & self.mask() >= half {
            // r - 2^b, computed without overflowing for b = 64
            (r | !self.mask()) as i64
        } else {
            r as i64
        }
    }

    /// Inverse of [`encode`](Self::encode) for a sum of `num_summed`
    /// encodings. Magnitudes beyond `num_summed` clamp ranges mean the ring
    /// wrapped (or masks did not cancel) and are reported as overflow.
    pub fn decode(&self, r: &[u64], num_summed: usize) -> Result<Vec<f64>> {
        if num_summed == 0 || num_summed > self.parties {
            return Err(Error::config(format!(
                "codec sized for {} parties cannot decode a sum of {num_summed}",
                self.parties
            )));
        }
        let scale = self.scale();
        let bound = num_summed as f64 * self.clamp_range() * scale;
        r.iter()
            .enumerate()
            .map(|(index, &x)| {
                let s = self.signed_value(x) as f64;
                if s.abs() > bound {
                    return Err(Error::Overflow {
                        index,
                        value: s / scale,
                    });
                }
                Ok(s / scale)
            })
            .collect()
    }
}

/// Masks for one cohort; residues of all masks sum to zero coordinate-wise.
#[derive(Debug, Clone)]
pub struct MaskSet {
    id: u64,
    masks: Vec<Vec<u64>>,
}

/// One client's share of a [`MaskSet`].
#[derive(Debug, Clone)]
pub struct ClientMask {
    set_id: u64,
    slot: usize,
    num_clients: usize,
    residues: Vec<u64>,
}

impl ClientMask {
    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn residues(&self) -> &[u64] {
        &self.residues
    }
}

/// What a client actually transmits under secure aggregation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedUpdate {
    set_id: u64,
    slot: usize,
    num_clients: usize,
    residues: Vec<u64>,
}

impl MaskedUpdate {
    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn residues(&self) -> &[u64] {
        &self.residues
    }

    pub fn len(&self) -> usize {
        self.residues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residues.is_empty()
    }

    /// Little-endian 64-bit words, for debugging dumps.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.residues.iter().flat_map(|r| r.to_le_bytes()).collect()
    }
}

impl MaskSet {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn num_clients(&self) -> usize {
        self.masks.len()
    }

    pub fn masks(&self) -> &[Vec<u64>] {
        &self.masks
    }

    pub fn into_client_masks(self) -> Vec<ClientMask> {
        let n = self.masks.len();
        self.masks
            .into_iter()
            .enumerate()
            .map(|(slot, residues)| ClientMask {
                set_id: self.id,
                slot,
                num_clients: n,
                residues,
            })
            .collect()
    }
}

/// Trusted-dealer masks: the first `num_clients - 1` are uniform residues,
/// the last is the negated sum of the others.
pub fn make_masks(
    num_clients: usize,
    dim: usize,
    codec: &FixedPointCodec,
    seed: u64,
) -> Result<MaskSet> {
    if num_clients < 2 {
        return Err(Error::config(format!(
            "masking needs at least 2 clients, got {num_clients}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut masks = Vec::with_capacity(num_clients);
    let mut total = vec![0u64; dim];
    for _ in 0..num_clients - 1 {
        let m: Vec<u64> = (0..dim).map(|_| rng.random::<u64>() & codec.mask()).collect();
        for (t, v) in total.iter_mut().zip(&m) {
            *t = codec.add(*t, *v);
        }
        masks.push(m);
    }
    masks.push(total.iter().map(|&t| codec.neg(t)).collect());
    Ok(MaskSet {
        id: seed::derive(seed, &[u64::MAX]),
        masks,
    })
}

/// `(encoded + mask) mod 2^b`.
pub fn encrypt(encoded: &[u64], mask: &ClientMask, codec: &FixedPointCodec) -> Result<MaskedUpdate> {
    if encoded.len() != mask.residues.len() {
        return Err(Error::Dimension {
            expected: mask.residues.len(),
            got: encoded.len(),
        });
    }
    Ok(MaskedUpdate {
        set_id: mask.set_id,
        slot: mask.slot,
        num_clients: mask.num_clients,
        residues: encoded
            .iter()
            .zip(&mask.residues)
            .map(|(&e, &m)| codec.add(e, m))
            .collect(),
    })
}

/// Coordinate-wise modular sum of any collection of masked updates.
pub fn sum_residues(masked: &[MaskedUpdate], codec: &FixedPointCodec) -> Result<Vec<u64>> {
    let Some(first) = masked.first() else {
        return Err(Error::Protocol("no masked updates to sum".into()));
    };
    let dim = first.len();
    let mut total = vec![0u64; dim];
    for m in masked {
        if m.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: m.len(),
            });
        }
        for (t, &r) in total.iter_mut().zip(&m.residues) {
            *t = codec.add(*t, r);
        }
    }
    Ok(total)
}

/// Server side: checks that the messages are exactly one cohort's, sums them
/// and decodes the plaintext sum.
pub fn aggregate_decode(masked: &[MaskedUpdate], codec: &FixedPointCodec) -> Result<Vec<f64>> {
    let Some(first) = masked.first() else {
        return Err(Error::Protocol("no masked updates received".into()));
    };
    let expected = first.num_clients;
    let mut seen = vec![false; expected];
    for m in masked {
        if m.set_id != first.set_id || m.num_clients != expected {
            return Err(Error::Protocol("masked updates come from different cohorts".into()));
        }
        if std::mem::replace(&mut seen[m.slot], true) {
            return Err(Error::Protocol(format!("duplicate update for client slot {}", m.slot)));
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Protocol(format!(
            "missing update for client slot {missing} ({} of {expected} received)",
            masked.len()
        )));
    }
    let total = sum_residues(masked, codec)?;
    codec.decode(&total, expected)
}
