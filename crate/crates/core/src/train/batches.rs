use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

const BATCH_STREAM: u64 = 3;

/// Dataset indices of one mini-batch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Batch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// Endless reshuffled pass over a pool of indices.
#[derive(Clone, Debug)]
struct Cycler {
    pool: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(pool: &[usize]) -> Self {
        Self {
            pool: pool.to_vec(),
            order: Vec::new(),
            pos: 0,
        }
    }

    fn next(&mut self, rng: &mut Rng) -> usize {
        if self.pos == self.order.len() {
            self.order = self.pool.clone();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }

    fn take(&mut self, n: usize, rng: &mut Rng) -> Vec<usize> {
        (0..n).map(|_| self.next(rng)).collect()
    }
}

/// Deterministic epoch-by-epoch batch source for one run.
#[derive(Clone, Debug)]
pub struct BatchStream {
    rng: Rng,
    source: Cycler,
    target: Option<Cycler>,
    batch_size: usize,
}

impl BatchStream {
    /// Balanced stream: every batch holds `batch_size / 2` samples of each
    /// domain.
    pub fn balanced(source: &[usize], target: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::EmptyPartition("balanced batches need both domains".into()));
        }
        if batch_size < 2 || batch_size % 2 != 0 {
            return Err(Error::Config(format!("balanced batch size {batch_size} must be even and >= 2")));
        }
        Ok(Self {
            rng: stream(seed, &[BATCH_STREAM]),
            source: Cycler::new(source),
            target: Some(Cycler::new(target)),
            batch_size,
        })
    }

    /// Source-only stream of shuffled batches.
    pub fn source_only(source: &[usize], batch_size: usize, seed: u64) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::EmptyPartition("no source samples".into()));
        }
        Ok(Self {
            rng: stream(seed, &[BATCH_STREAM]),
            source: Cycler::new(source),
            target: None,
            batch_size,
        })
    }

    /// Batches of one pass over the larger domain (balanced) or over the
    /// source pool (source-only, last batch possibly smaller).
    pub fn epoch(&mut self) -> Vec<Batch> {
        match self.target.as_mut() {
            Some(target) => {
                let half = self.batch_size / 2;
                let larger = self.source.pool.len().max(target.pool.len());
                (0..larger.div_ceil(half))
                    .map(|_| Batch {
                        source: self.source.take(half, &mut self.rng),
                        target: target.take(half, &mut self.rng),
                    })
                    .collect()
            }
            None => {
                let n = self.source.pool.len();
                let order = self.source.take(n, &mut self.rng);
                order
                    .chunks(self.batch_size)
                    .map(|c| Batch {
                        source: c.to_vec(),
                        target: Vec::new(),
                    })
                    .collect()
            }
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        match &self.target {
            Some(t) => self.source.pool.len().max(t.pool.len()).div_ceil(self.batch_size / 2),
            None => self.source.pool.len().div_ceil(self.batch_size),
        }
    }
}

/// First epoch of a balanced stream.
pub fn make_balanced_batches(source: &[usize], target: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    Ok(BatchStream::balanced(source, target, batch_size, seed)?.epoch())
}

/// First epoch of a source-only stream.
pub fn source_batches(source: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    Ok(BatchStream::source_only(source, batch_size, seed)?.epoch())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn range(from: usize, n: usize) -> Vec<usize> {
        (from..from + n).collect()
    }

    #[test]
    fn equal_domains_give_two_batches() {
        let batches = make_balanced_batches(&range(0, 16), &range(100, 16), 16, 0).unwrap();
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert_eq!((b.source.len(), b.target.len()), (8, 8));
        }
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.source.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, range(0, 16));
    }

    #[test]
    fn smaller_domain_cycles() {
        let batches = make_balanced_batches(&range(0, 100), &range(100, 10), 16, 1).unwrap();
        assert_eq!(batches.len(), 13);
        assert!(batches.iter().all(|b| b.source.len() == 8 && b.target.len() == 8));
        assert!(batches.iter().all(|b| b.target.iter().all(|t| (100..110).contains(t))));
        let first: Vec<usize> = batches.iter().flat_map(|b| b.target.clone()).take(10).collect();
        let mut sorted = first.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, range(100, 10));
    }

    #[test]
    fn streams_are_deterministic() {
        let mut a = BatchStream::balanced(&range(0, 30), &range(50, 7), 8, 9).unwrap();
        let mut b = BatchStream::balanced(&range(0, 30), &range(50, 7), 8, 9).unwrap();
        for _ in 0..3 {
            assert_eq!(a.epoch(), b.epoch());
        }
        let mut c = BatchStream::balanced(&range(0, 30), &range(50, 7), 8, 10).unwrap();
        assert_ne!(a.epoch(), c.epoch());
    }

    #[test]
    fn empty_domain_errors() {
        assert!(make_balanced_batches(&[], &[1], 16, 0).is_err());
        assert!(make_balanced_batches(&[1], &[], 16, 0).is_err());
        assert!(make_balanced_batches(&[1], &[2], 15, 0).is_err());
    }

    #[test]
    fn source_only_covers_pool_once() {
        let batches = source_batches(&range(0, 37), 16, 2).unwrap();
        assert_eq!(batches.iter().map(|b| b.source.len()).collect::<Vec<_>>(), vec![16, 16, 5]);
        let mut all: Vec<usize> = batches.iter().flat_map(|b| b.source.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, range(0, 37));
    }
}
