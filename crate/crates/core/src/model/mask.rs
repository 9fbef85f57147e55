use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};

/// How the frame-2 conditioning subset is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevealMode {
    /// Any cells, drawn at random.
    RandomSubset,
    /// The first cells in raster order.
    RasterPrefix,
    /// Nothing revealed up front; a random subset is overwritten with the true
    /// tokens as the rollout reaches it.
    OverwriteDuringRollout,
    /// Every cell revealed, nothing to predict.
    Full,
}

impl RevealMode {
    pub const ALL: [RevealMode; 4] = [
        RevealMode::RandomSubset,
        RevealMode::RasterPrefix,
        RevealMode::OverwriteDuringRollout,
        RevealMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RevealMode::RandomSubset => "random_subset",
            RevealMode::RasterPrefix => "raster_prefix",
            RevealMode::OverwriteDuringRollout => "overwrite_during_rollout",
            RevealMode::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mode: RevealMode,
    pub cells: usize,
    /// Revealed cell indices, ascending.
    pub revealed: Vec<usize>,
    /// Cells replaced by the true token after sampling (overwrite mode only), ascending.
    pub overwrite: Vec<usize>,
}

/// Number of cells in a `fraction` budget: `ceil(fraction * cells)`.
pub fn budget(cells: usize, fraction: f64) -> usize {
    ((fraction * cells as f64) - 1e-9).ceil().max(0.0) as usize
}

fn check_fraction(fraction: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("reveal fraction {fraction} outside [0, 1]")));
    }
    Ok(())
}

fn random_cells(cells: usize, count: usize, rng_seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(rng_seed, Stream::Mask, 0);
    let mut pool: Vec<usize> = (0..cells).collect();
    for i in 0..count {
        let j = rng.random_range(i..cells);
        pool.swap(i, j);
    }
    let mut out = pool[..count].to_vec();
    out.sort_unstable();
    out
}

impl MaskSpec {
    pub fn new(mode: RevealMode, cells: usize, fraction: f64, rng_seed: u64) -> Result<Self> {
        check_fraction(fraction)?;
        let n = budget(cells, fraction);
        Ok(match mode {
            RevealMode::RandomSubset => MaskSpec {
                mode,
                cells,
                revealed: random_cells(cells, n, rng_seed),
                overwrite: Vec::new(),
            },
            RevealMode::RasterPrefix => MaskSpec {
                mode,
                cells,
                revealed: (0..n).collect(),
                overwrite: Vec::new(),
            },
            RevealMode::OverwriteDuringRollout => MaskSpec {
                mode,
                cells,
                revealed: Vec::new(),
                overwrite: random_cells(cells, n, rng_seed),
            },
            RevealMode::Full => MaskSpec::full(cells),
        })
    }

    pub fn full(cells: usize) -> Self {
        MaskSpec {
            mode: RevealMode::Full,
            cells,
            revealed: (0..cells).collect(),
            overwrite: Vec::new(),
        }
    }

    /// An explicit revealed set (treated as a random subset).
    pub fn from_revealed(cells: usize, mut revealed: Vec<usize>) -> Result<Self> {
        revealed.sort_unstable();
        revealed.dedup();
        if revealed.last().is_some_and(|&i| i >= cells) {
            return Err(Error::dim(format!("revealed cell outside a {cells}-cell grid")));
        }
        Ok(MaskSpec {
            mode: RevealMode::RandomSubset,
            cells,
            revealed,
            overwrite: Vec::new(),
        })
    }

    pub fn is_revealed(&self, cell: usize) -> bool {
        self.revealed.binary_search(&cell).is_ok()
    }

    /// Cells the model has to predict, ascending.
    pub fn hidden(&self) -> Vec<usize> {
        let mut flags = vec![true; self.cells];
        for &i in &self.revealed {
            flags[i] = false;
        }
        (0..self.cells).filter(|&i| flags[i]).collect()
    }
}

/// Visiting order of the hidden cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeOrder {
    pub order: Vec<usize>,
    pub rng_seed: u64,
}

impl DecodeOrder {
    pub fn random(mask: &MaskSpec, rng_seed: u64) -> Self {
        let mut order = mask.hidden();
        let mut rng = seed::rng(rng_seed, Stream::Order, 0);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        DecodeOrder { order, rng_seed }
    }

    pub fn raster(mask: &MaskSpec) -> Self {
        DecodeOrder {
            order: mask.hidden(),
            rng_seed: 0,
        }
    }

    /// The order must be a permutation of the mask's hidden cells.
    pub fn validate(&self, mask: &MaskSpec) -> Result<()> {
        let mut seen = vec![false; mask.cells];
        for &i in &self.order {
            if i >= mask.cells {
                return Err(Error::dim(format!("decode order visits cell {i} of {}", mask.cells)));
            }
            if mask.is_revealed(i) {
                return Err(Error::config(format!("decode order visits revealed cell {i}")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::config(format!("decode order visits cell {i} twice")));
            }
        }
        if self.order.len() + mask.revealed.len() != mask.cells {
            return Err(Error::config("decode order does not cover every hidden cell"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn budgets() {
        assert_eq!(budget(256, 0.1), 26);
        assert_eq!(budget(256, 0.0), 0);
        assert_eq!(budget(256, 0.25), 64);
        assert_eq!(budget(10, 1.0), 10);
    }

    #[test]
    fn modes() {
        let r = MaskSpec::new(RevealMode::RandomSubset, 256, 0.1, 3).unwrap();
        assert_eq!(r.revealed.len(), 26);
        assert_eq!(r.hidden().len(), 230);
        let p = MaskSpec::new(RevealMode::RasterPrefix, 256, 0.1, 3).unwrap();
        assert_eq!(p.revealed, (0..26).collect::<Vec<_>>());
        let o = MaskSpec::new(RevealMode::OverwriteDuringRollout, 256, 0.1, 3).unwrap();
        assert!(o.revealed.is_empty());
        assert_eq!(o.overwrite.len(), 26);
        let f = MaskSpec::new(RevealMode::Full, 256, 0.1, 3).unwrap();
        assert!(f.hidden().is_empty());
        assert!(MaskSpec::new(RevealMode::RandomSubset, 256, 1.5, 0).is_err());
    }

    #[test]
    fn orders_are_permutations() {
        let m = MaskSpec::new(RevealMode::RandomSubset, 64, 0.25, 1).unwrap();
        let o = DecodeOrder::random(&m, 9);
        o.validate(&m).unwrap();
        let mut sorted = o.order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, m.hidden());
        assert_ne!(o.order, m.hidden());
        let bad = DecodeOrder {
            order: vec![m.revealed[0]],
            rng_seed: 0,
        };
        assert!(bad.validate(&m).is_err());
    }
}
