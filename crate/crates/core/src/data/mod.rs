//! Datasets, class folds and episode sampling.

pub mod io;
pub mod metrics;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{BinaryMask, ImageTensor};
use crate::error::{Error, Result};

pub use synthetic::gen_synthetic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub num_classes: usize,
    pub num_folds: usize,
    pub fold_index: usize,
}

impl FoldSpec {
    pub fn new(num_classes: usize, num_folds: usize, fold_index: usize) -> Result<Self> {
        if num_folds == 0 || fold_index >= num_folds {
            return Err(Error::InvalidFold(format!("fold {fold_index} of {num_folds}")));
        }
        if num_classes % num_folds != 0 {
            return Err(Error::InvalidFold(format!(
                "{num_classes} classes do not split into {num_folds} folds"
            )));
        }
        Ok(Self { num_classes, num_folds, fold_index })
    }
}

/// Interleaved split: class `c` is held out when `c mod num_folds == fold_index`.
/// Returns `(train, test)`.
pub fn build_folds(spec: &FoldSpec) -> Result<(Vec<usize>, Vec<usize>)> {
    let spec = FoldSpec::new(spec.num_classes, spec.num_folds, spec.fold_index)?;
    Ok((0..spec.num_classes).partition(|c| c % spec.num_folds != spec.fold_index))
}

/// One image and the masks of the classes it is annotated with.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub image: ImageTensor,
    pub masks: BTreeMap<usize, BinaryMask>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetIndex {
    pub records: Vec<Record>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<usize> {
        self.records.iter().flat_map(|r| r.masks.keys().copied()).collect()
    }

    /// Records whose mask for `class` has at least one foreground pixel.
    pub fn images_of(&self, class: usize) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.masks.get(&class).is_some_and(|m| !m.is_empty()))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn episode(&self, spec: &EpisodeSpec) -> Episode {
        let pair = |i: usize| (self.records[i].image.clone(), self.records[i].masks[&spec.class_id].clone());
        let (query_image, query_mask) = pair(spec.query);
        Episode {
            supports: spec.supports.iter().map(|&i| pair(i)).collect(),
            query_image,
            query_mask,
            class_id: spec.class_id,
        }
    }
}

/// An episode by record index, cheap to store and compare.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub class_id: usize,
    pub query: usize,
    pub supports: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub supports: Vec<(ImageTensor, BinaryMask)>,
    pub query_image: ImageTensor,
    pub query_mask: BinaryMask,
    pub class_id: usize,
}

impl Episode {
    pub fn n_shot(&self) -> usize {
        self.supports.len()
    }

    /// The same episode restricted to its first `n` supports.
    pub fn with_shots(&self, n: usize) -> Episode {
        Episode { supports: self.supports[..n.min(self.supports.len())].to_vec(), ..self.clone() }
    }
}

/// Draws `count` episodes: a class uniformly from `classes`, then `n_shot + 1`
/// distinct images of it, the first being the query.
pub fn sample_episodes(
    index: &DatasetIndex,
    classes: &[usize],
    n_shot: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<EpisodeSpec>> {
    if classes.is_empty() {
        return Err(Error::Empty("no classes to sample from".into()));
    }
    if n_shot == 0 {
        return Err(Error::InvalidRange("n_shot must be at least 1".into()));
    }
    let pools: Vec<Vec<usize>> = classes.iter().map(|&c| index.images_of(c)).collect();
    for (&class, pool) in classes.iter().zip(&pools) {
        if pool.len() < n_shot + 1 {
            return Err(Error::InsufficientImages { class, available: pool.len(), needed: n_shot + 1 });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let k = rng.random_range(0..classes.len());
            let picked = rand::seq::index::sample(&mut rng, pools[k].len(), n_shot + 1);
            let ids: Vec<usize> = picked.iter().map(|i| pools[k][i]).collect();
            EpisodeSpec { class_id: classes[k], query: ids[0], supports: ids[1..].to_vec() }
        })
        .collect())
}
