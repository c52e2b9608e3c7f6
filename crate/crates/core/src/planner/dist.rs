use std::sync::Arc;

use crate::raster::TargetTrack;

/// Per-timestep log-probabilities over grid cells.
///
/// Stored factorized: `log p(h, cell) = log_block[h][block(cell)] +
/// log_within[h][cell]`, where blocks are `pool × pool` cells and
/// `log_within` is normalized inside every block. With `pool = 1` the
/// within-block term is identically zero and `log_block` is the dense map.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanDistribution {
    pub horizon: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub pool: usize,
    /// `[h][n_rows / pool][n_cols / pool]`.
    pub log_block: Vec<f64>,
    /// `[h][n_rows][n_cols]`.
    pub log_within: Arc<Vec<f64>>,
}

impl PlanDistribution {
    pub fn n_cells(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn n_blocks(&self) -> usize {
        (self.n_rows / self.pool) * (self.n_cols / self.pool)
    }

    /// Block index of flat cell `cell`.
    pub fn block_of(&self, cell: usize) -> usize {
        let (r, c) = (cell / self.n_cols, cell % self.n_cols);
        (r / self.pool) * (self.n_cols / self.pool) + c / self.pool
    }

    pub fn log_prob(&self, h: usize, cell: usize) -> f64 {
        self.log_block[h * self.n_blocks() + self.block_of(cell)]
            + self.log_within[h * self.n_cells() + cell]
    }

    /// Dense log-probability map of timestep `h`, row-major.
    pub fn dense(&self, h: usize) -> Vec<f64> {
        (0..self.n_cells())
            .map(|cell| self.log_prob(h, cell))
            .collect()
    }

    pub fn block_log_probs(&self, h: usize) -> &[f64] {
        let nb = self.n_blocks();
        &self.log_block[h * nb..(h + 1) * nb]
    }

    pub fn prob_sum(&self, h: usize) -> f64 {
        (0..self.n_cells())
            .map(|cell| self.log_prob(h, cell).exp())
            .sum()
    }

    /// Highest-probability cell of timestep `h`; the lowest flat index wins
    /// ties.
    pub fn argmax(&self, h: usize) -> usize {
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for cell in 0..self.n_cells() {
            let v = self.log_prob(h, cell);
            if v > best_v {
                best_v = v;
                best = cell;
            }
        }
        best
    }

    /// Zero-based rank of `cell` in timestep `h`: cells with strictly higher
    /// probability plus equal cells with a lower index.
    pub fn rank_of(&self, h: usize, cell: usize) -> usize {
        let v = self.log_prob(h, cell);
        (0..self.n_cells())
            .filter(|&o| {
                let w = self.log_prob(h, o);
                w > v || (w == v && o < cell)
            })
            .count()
    }

    /// True when both distributions use the same within-block factor, so
    /// divergences reduce to the block level.
    pub fn shares_within(&self, other: &PlanDistribution) -> bool {
        self.pool == other.pool
            && self.n_rows == other.n_rows
            && self.n_cols == other.n_cols
            && (Arc::ptr_eq(&self.log_within, &other.log_within)
                || self.log_within == other.log_within)
    }
}

/// Cross-entropy of the target track under `dist`: the sum over in-grid
/// timesteps of `−log p(target)`, clipped at `clip`. `None` when every target
/// is off the grid (the sample is skipped).
pub fn loss(dist: &PlanDistribution, target: &TargetTrack, clip: Option<f64>) -> Option<f64> {
    if target.in_grid() == 0 {
        return None;
    }
    let raw: f64 = target
        .cells
        .iter()
        .enumerate()
        .take(dist.horizon)
        .filter_map(|(h, c)| c.map(|(r, col)| -dist.log_prob(h, r * dist.n_cols + col)))
        .sum();
    Some(match clip {
        Some(c) => raw.min(c),
        None => raw,
    })
}
