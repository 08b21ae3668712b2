//! Per-iteration episode sampling: meta-train / meta-test pairs plus the
//! labeled and unlabeled batches.

use rand::Rng;

use super::TrainerConfig;
use crate::error::{Error, Result};

/// One meta-iteration's sampled indices. Pair entries are
/// `(moving: index into the labeled pool, fixed: index into the source-like
/// pool)`. The fixed partners of train and test pairs are disjoint within
/// an episode; the first `labeled_batch.len()` train pairs carry the
/// labeled batch as their movings, so the augmented slots hallucinate from
/// exactly the labeled slots.
#[derive(Debug, Clone)]
pub struct Episode {
    pub train_pairs: Vec<(usize, usize)>,
    pub test_pairs: Vec<(usize, usize)>,
    pub labeled_batch: Vec<usize>,
    pub unlabeled_batch: Vec<usize>,
}

impl Episode {
    pub fn train_movings(&self) -> Vec<usize> {
        self.train_pairs.iter().map(|&(m, _)| m).collect()
    }

    pub fn test_movings(&self) -> Vec<usize> {
        self.test_pairs.iter().map(|&(m, _)| m).collect()
    }

    pub fn train_fixed(&self) -> Vec<usize> {
        self.train_pairs.iter().map(|&(_, f)| f).collect()
    }

    pub fn test_fixed(&self) -> Vec<usize> {
        self.test_pairs.iter().map(|&(_, f)| f).collect()
    }
}

/// `count` uniform draws from `0..n`: without replacement when `n >= count`
/// (so a batch never repeats an item), with replacement otherwise (the
/// few-shot fallback).
fn draw(n: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n >= count {
        // partial Fisher-Yates over a scratch index vector
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(count);
        idx
    } else {
        (0..count).map(|_| rng.gen_range(0..n)).collect()
    }
}

/// Samples one episode. `unlabeled_chunk` is this iteration's slice of the
/// epoch's shuffled unlabeled pool (epochs cover the pool once).
pub fn sample_episode(
    n_labeled: usize,
    n_source_like: usize,
    unlabeled_chunk: &[usize],
    cfg: &TrainerConfig,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if n_labeled == 0 {
        return Err(Error::Data("episode sampling needs labeled data".into()));
    }
    let need = cfg.meta_train_pairs + cfg.meta_test_pairs;
    if n_source_like < need {
        return Err(Error::Data(format!(
            "source-like pool ({n_source_like}) smaller than meta_train_pairs + \
             meta_test_pairs ({need}); disjoint pair sets are impossible"
        )));
    }

    // disjoint fixed partners for train and test pairs
    let fixed = draw(n_source_like, need, rng);
    let (fixed_tr, fixed_te) = fixed.split_at(cfg.meta_train_pairs);

    let labeled_batch = draw(n_labeled, cfg.labeled_batch, rng);
    let extra = draw(n_labeled, cfg.meta_train_pairs - cfg.labeled_batch, rng);
    let movings_tr: Vec<usize> = labeled_batch.iter().chain(extra.iter()).copied().collect();
    let movings_te = draw(n_labeled, cfg.meta_test_pairs, rng);

    Ok(Episode {
        train_pairs: movings_tr.into_iter().zip(fixed_tr.iter().copied()).collect(),
        test_pairs: movings_te.into_iter().zip(fixed_te.iter().copied()).collect(),
        labeled_batch,
        unlabeled_batch: unlabeled_chunk.to_vec(),
    })
}
