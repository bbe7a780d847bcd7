use crate::error::{arg_err, Result};

/// A contiguous run of tokens scanned in one sequential pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    pub row: usize,
    /// Grid positions (`row * W + col`) in scan order.
    pub tokens: Vec<usize>,
    /// First chunk visited in its row.
    pub starts_row: bool,
}

/// Chunk boundaries, traversal order and cross-row handoff for an `H × W` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkPlan {
    height: usize,
    width: usize,
    chunk_len: usize,
    requested_len: usize,
    eta_cross: f64,
    snake: bool,
    chunks: Vec<Chunk>,
}

/// Largest divisor of `n` that is at most `cap`.
fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}

/// Chunk length giving `num_chunks` chunks over the whole grid.
pub fn chunk_len_for_total(height: usize, width: usize, num_chunks: usize) -> Result<usize> {
    if num_chunks == 0 || num_chunks > height * width {
        return Err(arg_err!(
            "cannot split a {height}x{width} grid into {num_chunks} chunks"
        ));
    }
    Ok(height * width / num_chunks)
}

/// Chunk length giving `per_row` chunks in every row.
pub fn chunk_len_per_row(width: usize, per_row: usize) -> Result<usize> {
    if per_row == 0 || per_row > width {
        return Err(arg_err!(
            "cannot split a row of {width} into {per_row} chunks"
        ));
    }
    Ok(width / per_row)
}

pub fn build_chunk_plan(
    height: usize,
    width: usize,
    chunk_len: usize,
    eta_cross: f64,
    snake: bool,
) -> Result<ChunkPlan> {
    if chunk_len == 0 {
        return Err(arg_err!("chunk length must be at least 1"));
    }
    if height == 0 || width == 0 {
        return Err(arg_err!("empty {height}x{width} grid"));
    }
    if !eta_cross.is_finite() {
        return Err(arg_err!("eta_cross must be finite"));
    }
    let len = largest_divisor_at_most(width, chunk_len);
    if len != chunk_len {
        log::info!("chunk length {chunk_len} does not divide row width {width}; using {len}");
    }
    let per_row = width / len;
    let mut chunks = Vec::with_capacity(height * per_row);
    for row in 0..height {
        let reversed = snake && row % 2 == 1;
        let cols: Vec<usize> = if reversed {
            (0..width).rev().collect()
        } else {
            (0..width).collect()
        };
        for (k, run) in cols.chunks(len).enumerate() {
            chunks.push(Chunk {
                row,
                tokens: run.iter().map(|c| row * width + c).collect(),
                starts_row: k == 0,
            });
        }
    }
    Ok(ChunkPlan {
        height,
        width,
        chunk_len: len,
        requested_len: chunk_len,
        eta_cross,
        snake,
        chunks,
    })
}

impl ChunkPlan {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Chunk length actually used.
    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    /// `(requested, used)` when the requested length had to be clamped.
    pub fn clamped(&self) -> Option<(usize, usize)> {
        (self.requested_len != self.chunk_len).then_some((self.requested_len, self.chunk_len))
    }

    pub fn eta_cross(&self) -> f64 {
        self.eta_cross
    }

    pub fn snake(&self) -> bool {
        self.snake
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    /// Same plan with a different handoff coefficient.
    pub fn with_eta_cross(&self, eta_cross: f64) -> Self {
        Self {
            eta_cross,
            ..self.clone()
        }
    }

    /// Every grid position in the order the scan visits it.
    pub fn traversal(&self) -> Vec<usize> {
        self.chunks
            .iter()
            .flat_map(|c| c.tokens.iter().copied())
            .collect()
    }

    /// Human-readable description of the resolved plan.
    pub fn describe(&self) -> String {
        let mut s = format!(
            "grid {}x{}, chunk_len L={} ({} chunks, {} per row), eta_cross={}, snake={}",
            self.height,
            self.width,
            self.chunk_len,
            self.chunks.len(),
            self.width / self.chunk_len,
            self.eta_cross,
            self.snake
        );
        if let Some((req, used)) = self.clamped() {
            s.push_str(&format!(" [requested L={req} clamped to {used}]"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    #[test]
    fn single_chunk_row() {
        let p = build_chunk_plan(1, 8, 8, 1.0, false).unwrap();
        assert_eq!(p.chunks().len(), 1);
        assert_eq!(p.chunks()[0].tokens, (0..8).collect::<Vec<_>>());
        assert!(p.clamped().is_none());
    }

    #[test]
    fn snake_order_by_hand() {
        let p = build_chunk_plan(2, 4, 2, 1.0, true).unwrap();
        let orders: Vec<Vec<usize>> = p.chunks().iter().map(|c| c.tokens.clone()).collect();
        assert_eq!(orders, vec![vec![0, 1], vec![2, 3], vec![7, 6], vec![5, 4]]);
        assert_eq!(
            p.chunks().iter().map(|c| c.starts_row).collect::<Vec<_>>(),
            vec![true, false, true, false]
        );
    }

    #[test]
    fn clamp_to_divisor() {
        let p = build_chunk_plan(32, 32, 64, 1.0, true).unwrap();
        assert_eq!(p.chunk_len(), 32);
        assert_eq!(p.clamped(), Some((64, 32)));
        assert!(p.describe().contains("clamped"));

        let p = build_chunk_plan(2, 7, 3, 1.0, false).unwrap();
        assert_eq!(p.chunk_len(), 1);
        let p = build_chunk_plan(2, 12, 5, 1.0, false).unwrap();
        assert_eq!(p.chunk_len(), 4);
    }

    #[test]
    fn chunk_count_helpers() {
        assert_eq!(chunk_len_for_total(32, 32, 16).unwrap(), 64);
        assert_eq!(chunk_len_per_row(32, 16).unwrap(), 2);
        assert!(chunk_len_for_total(2, 2, 0).is_err());
        assert!(chunk_len_per_row(4, 5).is_err());
    }

    #[test]
    fn zero_length_rejected() {
        assert!(build_chunk_plan(2, 2, 0, 1.0, false).is_err());
    }

    proptest! {
        #[test]
        fn every_token_exactly_once(h in 1usize..9, w in 1usize..13, l in 1usize..16, snake in proptest::bool::ANY) {
            let p = build_chunk_plan(h, w, l, 1.0, snake).unwrap();
            prop_assert_eq!(w % p.chunk_len(), 0);
            prop_assert!(p.chunk_len() <= l);
            prop_assert_eq!(p.chunks().len(), h * (w / p.chunk_len()));
            let mut seen = p.traversal();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..h * w).collect::<Vec<_>>());
            for c in p.chunks() {
                prop_assert_eq!(c.tokens.len(), p.chunk_len());
                prop_assert!(c.tokens.iter().all(|t| t / w == c.row));
            }
        }
    }
}
