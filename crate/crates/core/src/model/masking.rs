use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric};

use crate::error::{Error, Result};

/// Boolean `n x t` map of masked time steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSpec {
    n: usize,
    t: usize,
    cells: Vec<bool>,
    seed: u64,
}

impl MaskSpec {
    pub fn from_cells(n: usize, t: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != n * t {
            return Err(Error::Shape(format!("{} mask cells for [{n}, {t}]", cells.len())));
        }
        Ok(Self { n, t, cells, seed: 0 })
    }

    pub fn none(n: usize, t: usize) -> Self {
        Self { n, t, cells: vec![false; n * t], seed: 0 }
    }

    pub fn all(n: usize, t: usize) -> Self {
        Self { n, t, cells: vec![true; n * t], seed: 0 }
    }

    /// Per sample, masks `round(ratio * t)` steps using contiguous segments
    /// whose lengths are geometric with mean `mean_len`. Segment starts are
    /// drawn among still-unmasked steps; a segment is cut short once the
    /// target count is reached.
    pub fn generate(n: usize, t: usize, ratio: f64, mean_len: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = (1.0 / mean_len.max(1.0)).clamp(f64::MIN_POSITIVE, 1.0);
        let geom = Geometric::new(p).expect("probability in (0, 1]");
        let target = ((ratio * t as f64).round() as usize).min(t);
        let mut cells = vec![false; n * t];
        for row in cells.chunks_exact_mut(t) {
            let mut masked = 0;
            while masked < target {
                let free: Vec<usize> = (0..t).filter(|&i| !row[i]).collect();
                let start = free[rng.random_range(0..free.len())];
                let len = 1 + geom.sample(&mut rng) as usize;
                for cell in row[start..(start + len).min(t)].iter_mut() {
                    if masked == target {
                        break;
                    }
                    if !*cell {
                        *cell = true;
                        masked += 1;
                    }
                }
            }
        }
        Self { n, t, cells, seed }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Row-major `n x t` flags.
    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn is_masked(&self, sample: usize, step: usize) -> bool {
        self.cells[sample * self.t + step]
    }

    pub fn masked_count(&self, sample: usize) -> usize {
        self.cells[sample * self.t..(sample + 1) * self.t].iter().filter(|&&m| m).count()
    }

    pub fn total_masked(&self) -> usize {
        self.cells.iter().filter(|&&m| m).count()
    }

    /// Flags expanded to every channel of a `[n, t, d]` tensor.
    pub fn expand(&self, d: usize) -> Vec<bool> {
        self.cells.iter().flat_map(|&m| std::iter::repeat_n(m, d)).collect()
    }
}
