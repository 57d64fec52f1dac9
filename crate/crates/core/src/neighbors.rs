//! Exact k-nearest-neighbor queries with bounded transient memory.
//!
//! Queries are processed in chunks and, within each chunk, reference points
//! are streamed in fixed-size blocks, so the scratch working set is a function
//! of the chunk size alone — never of the total query count. Distances are
//! compared squared and as `(d², index)` pairs, which gives a total order:
//! results are bit-identical for every chunk size.

use crate::error::{Error, Result};
use crate::track::TrackedBuf;

/// Reference points are streamed in blocks of this many rows.
const REF_BLOCK: usize = 4096;

/// Default query chunk used by callers that have no reason to tune it.
pub const DEFAULT_CHUNK: usize = 512;

/// Indices and rooted Euclidean distances of the `k` nearest reference points
/// per query, ascending per row.
#[derive(Debug, Clone)]
pub struct KnnResult {
    pub k: usize,
    /// `queries × k`, row-major.
    pub indices: Vec<u32>,
    /// `queries × k`, row-major, rooted.
    pub distances: Vec<f64>,
}

impl KnnResult {
    pub fn row_indices(&self, q: usize) -> &[u32] {
        &self.indices[q * self.k..(q + 1) * self.k]
    }

    pub fn row_distances(&self, q: usize) -> &[f64] {
        &self.distances[q * self.k..(q + 1) * self.k]
    }
}

/// Exact k nearest neighbors of every query point among `reference`.
///
/// `exclude_self` skips the reference with the same index as the query — the
/// usual convention when both slices are the same cloud. Ties are broken by
/// the smaller reference index. `chunk` bounds the number of queries whose
/// scratch state is live at once.
pub fn knn(
    query: &[[f64; 3]],
    reference: &[[f64; 3]],
    k: usize,
    exclude_self: bool,
    chunk: usize,
) -> Result<KnnResult> {
    if query.is_empty() || reference.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if k < 1 || chunk < 1 {
        return Err(Error::InvalidConfig(
            "knn requires k >= 1 and chunk >= 1".into(),
        ));
    }
    let available = if exclude_self {
        reference.len().saturating_sub(1)
    } else {
        reference.len()
    };
    if k > available {
        return Err(Error::KTooLarge { k, available });
    }

    let nq = query.len();
    let mut indices = vec![0u32; nq * k];
    let mut distances = vec![0.0f64; nq * k];

    for chunk_start in (0..nq).step_by(chunk) {
        let chunk_end = (chunk_start + chunk).min(nq);
        let rows = chunk_end - chunk_start;

        // Per-query best-k kept sorted ascending by (d², index).
        let mut best_d2: TrackedBuf<f64> = TrackedBuf::zeroed(rows * k);
        let mut best_idx: TrackedBuf<u32> = TrackedBuf::zeroed(rows * k);
        let mut filled: TrackedBuf<u32> = TrackedBuf::zeroed(rows);

        for ref_start in (0..reference.len()).step_by(REF_BLOCK) {
            let ref_end = (ref_start + REF_BLOCK).min(reference.len());
            for (row, q) in query[chunk_start..chunk_end].iter().enumerate() {
                let qi = chunk_start + row;
                let row_d2 = &mut best_d2[row * k..(row + 1) * k];
                let row_idx = &mut best_idx[row * k..(row + 1) * k];
                let mut n = filled[row] as usize;
                for (j, r) in reference[ref_start..ref_end].iter().enumerate() {
                    let ridx = (ref_start + j) as u32;
                    if exclude_self && ridx as usize == qi {
                        continue;
                    }
                    let dx = q[0] - r[0];
                    let dy = q[1] - r[1];
                    let dz = q[2] - r[2];
                    let d2 = dx * dx + dy * dy + dz * dz;
                    if n == k {
                        let worst = (row_d2[k - 1], row_idx[k - 1]);
                        if (d2, ridx) >= worst {
                            continue;
                        }
                    }
                    // binary insertion position by (d², index)
                    let hint = row_d2[..n].partition_point(|&d| d <= d2);
                    let pos = insertion_point(&row_d2[..n], &row_idx[..n], d2, ridx, hint);
                    let last = if n == k { k - 1 } else { n };
                    for m in (pos..last).rev() {
                        row_d2[m + 1] = row_d2[m];
                        row_idx[m + 1] = row_idx[m];
                    }
                    row_d2[pos] = d2;
                    row_idx[pos] = ridx;
                    if n < k {
                        n += 1;
                    }
                }
                filled[row] = n as u32;
            }
        }

        for row in 0..rows {
            let qi = chunk_start + row;
            for m in 0..k {
                indices[qi * k + m] = best_idx[row * k + m];
                distances[qi * k + m] = best_d2[row * k + m].sqrt();
            }
        }
    }

    Ok(KnnResult {
        k,
        indices,
        distances,
    })
}

/// Exact insertion point under the `(d², index)` lexicographic order given a
/// candidate position from the distance-only partition point.
fn insertion_point(d2s: &[f64], idxs: &[u32], d2: f64, idx: u32, hint: usize) -> usize {
    // Walk left across equal distances until the index order is right.
    let mut pos = hint;
    while pos > 0 && d2s[pos - 1] == d2 && idxs[pos - 1] > idx {
        pos -= 1;
    }
    pos
}
