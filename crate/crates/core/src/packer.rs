//! Patch n' Pack sequence packing.
//!
//! Concatenates variable-length per-image patch sequences into packed
//! sequences bounded by a context capacity. Each packed bin records its
//! members and cumulative sequence lengths (cu_seqlens), the boundaries the
//! encoder uses to isolate attention per image. Also reports utilization
//! against naive pad-to-longest batching.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PackError {
    #[error("sequence '{id}' has length {len}, exceeding capacity {capacity}")]
    SequenceExceedsCapacity {
        id: String,
        len: usize,
        capacity: usize,
    },
    #[error("sequence '{id}' has empty length")]
    EmptySequence { id: String },
    #[error("payload dimension mismatch: sequence '{id}' has {got} columns, expected {expected}")]
    DimensionMismatch {
        id: String,
        got: usize,
        expected: usize,
    },
    #[error("sequence '{id}' carries no payload")]
    MissingPayload { id: String },
    #[error("payload of '{id}' has {rows} rows but declared length {len}")]
    PayloadLengthMismatch { id: String, rows: usize, len: usize },
}

/// One image's patch sequence: an id, its patch count, and optionally the
/// row-major feature matrix (patch count x feature dim). Dry-run packing
/// needs only the length.
#[derive(Debug, Clone)]
pub struct PatchSequence {
    pub id: String,
    pub len: usize,
    pub payload: Option<Array2<f32>>,
}

impl PatchSequence {
    pub fn dry(id: impl Into<String>, len: usize) -> Self {
        Self {
            id: id.into(),
            len,
            payload: None,
        }
    }

    pub fn with_payload(id: impl Into<String>, payload: Array2<f32>) -> Self {
        Self {
            id: id.into(),
            len: payload.nrows(),
            payload: Some(payload),
        }
    }
}

/// Bin placement policy. All policies are deterministic for a fixed input
/// order; FFD sorts by length descending with a stable tie-break on input
/// index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum PackPolicy {
    FirstFit,
    #[default]
    FirstFitDecreasing,
    BestFit,
}


impl std::fmt::Display for PackPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PackPolicy::FirstFit => "first_fit",
            PackPolicy::FirstFitDecreasing => "first_fit_decreasing",
            PackPolicy::BestFit => "best_fit",
        })
    }
}

impl std::str::FromStr for PackPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "first_fit" => Ok(PackPolicy::FirstFit),
            "first_fit_decreasing" | "ffd" => Ok(PackPolicy::FirstFitDecreasing),
            "best_fit" => Ok(PackPolicy::BestFit),
            other => Err(format!(
                "unknown pack policy '{other}' (expected first_fit, first_fit_decreasing, or best_fit)"
            )),
        }
    }
}

/// One packed sequence: member indices into the input list, in placement
/// order, plus the cumulative lengths delimiting each member's rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedSequence {
    pub members: Vec<usize>,
    /// Starts at 0, strictly increasing, ends at the total packed length.
    pub cu_seqlens: Vec<usize>,
}

impl PackedSequence {
    pub fn total_len(&self) -> usize {
        *self.cu_seqlens.last().unwrap_or(&0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackedBatch {
    pub capacity: usize,
    pub bins: Vec<PackedSequence>,
}

/// Packing efficiency versus naive pad-to-longest batching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackStats {
    pub bin_count: usize,
    pub packed_tokens: u64,
    /// Occupied fraction of packed capacity: sum(N_i) / (bins * capacity).
    pub utilization: f64,
    /// Tokens a pad-to-longest batch would spend: count * max(N_i).
    pub naive_padded_tokens: u64,
    /// Fraction of the naive footprint eliminated by packing.
    pub waste_ratio_saved: f64,
}

/// Pack sequences into bins of `capacity` tokens.
///
/// Every sequence is placed exactly once and never split; a sequence longer
/// than the capacity is an error.
pub fn pack(
    seqs: &[PatchSequence],
    capacity: usize,
    policy: PackPolicy,
) -> Result<PackedBatch, PackError> {
    for s in seqs {
        if s.len == 0 {
            return Err(PackError::EmptySequence { id: s.id.clone() });
        }
        if s.len > capacity {
            return Err(PackError::SequenceExceedsCapacity {
                id: s.id.clone(),
                len: s.len,
                capacity,
            });
        }
    }

    let mut order: Vec<usize> = (0..seqs.len()).collect();
    if policy == PackPolicy::FirstFitDecreasing {
        order.sort_by_key(|&i| (std::cmp::Reverse(seqs[i].len), i));
    }

    let mut bins: Vec<(usize, Vec<usize>)> = Vec::new(); // (load, member indices)
    for &i in &order {
        let len = seqs[i].len;
        let slot = match policy {
            PackPolicy::FirstFit | PackPolicy::FirstFitDecreasing => bins
                .iter()
                .position(|(load, _)| load + len <= capacity),
            PackPolicy::BestFit => bins
                .iter()
                .enumerate()
                .filter(|(_, (load, _))| load + len <= capacity)
                .min_by_key(|(idx, (load, _))| (capacity - load - len, *idx))
                .map(|(idx, _)| idx),
        };
        match slot {
            Some(b) => {
                bins[b].0 += len;
                bins[b].1.push(i);
            }
            None => bins.push((len, vec![i])),
        }
    }

    let bins = bins
        .into_iter()
        .map(|(_, members)| {
            let mut cu = Vec::with_capacity(members.len() + 1);
            cu.push(0);
            for &i in &members {
                cu.push(cu.last().unwrap() + seqs[i].len);
            }
            PackedSequence {
                members,
                cu_seqlens: cu,
            }
        })
        .collect();

    Ok(PackedBatch { capacity, bins })
}

/// Utilization and naive-padding comparison for a packed batch.
pub fn stats(batch: &PackedBatch, original: &[PatchSequence]) -> PackStats {
    let packed_tokens: u64 = original.iter().map(|s| s.len as u64).sum();
    let bin_count = batch.bins.len();
    let max_len = original.iter().map(|s| s.len).max().unwrap_or(0);
    let naive_padded_tokens = original.len() as u64 * max_len as u64;
    let slot_tokens = bin_count as u64 * batch.capacity as u64;
    let utilization = if slot_tokens == 0 {
        0.0
    } else {
        packed_tokens as f64 / slot_tokens as f64
    };
    let waste_ratio_saved = if naive_padded_tokens == 0 {
        0.0
    } else {
        (naive_padded_tokens as f64 - slot_tokens as f64) / naive_padded_tokens as f64
    };
    PackStats {
        bin_count,
        packed_tokens,
        utilization,
        naive_padded_tokens,
        waste_ratio_saved,
    }
}

/// Concatenate member payloads per bin into (total length x D) matrices.
/// Rows `[cu[i], cu[i+1])` of each output equal member i's payload verbatim.
pub fn concat_payloads(
    batch: &PackedBatch,
    original: &[PatchSequence],
) -> Result<Vec<Array2<f32>>, PackError> {
    let dim = original
        .iter()
        .find_map(|s| s.payload.as_ref().map(|p| p.ncols()))
        .unwrap_or(0);

    let mut out = Vec::with_capacity(batch.bins.len());
    for bin in &batch.bins {
        let mut mat = Array2::<f32>::zeros((bin.total_len(), dim));
        for (k, &i) in bin.members.iter().enumerate() {
            let seq = &original[i];
            let payload = seq.payload.as_ref().ok_or(PackError::MissingPayload {
                id: seq.id.clone(),
            })?;
            if payload.ncols() != dim {
                return Err(PackError::DimensionMismatch {
                    id: seq.id.clone(),
                    got: payload.ncols(),
                    expected: dim,
                });
            }
            if payload.nrows() != seq.len {
                return Err(PackError::PayloadLengthMismatch {
                    id: seq.id.clone(),
                    rows: payload.nrows(),
                    len: seq.len,
                });
            }
            let (start, end) = (bin.cu_seqlens[k], bin.cu_seqlens[k + 1]);
            mat.slice_mut(ndarray::s![start..end, ..]).assign(payload);
        }
        out.push(mat);
    }
    Ok(out)
}
