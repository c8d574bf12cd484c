//! Experiment plumbing: data bundles, few-shot sampling, the training loop
//! with early stopping, ablations, the edit-distance baseline, and reports.

mod baseline;
mod checkpoint;
mod config;
mod report;
mod synthetic;
mod train;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{load_dataset, write_dataset, Delimiters, GoldAlignment, StandardLibrary};
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::knowledge_encoder::StaticVectors;

pub use baseline::{baseline_edit_distance, edit_distance_predict, levenshtein};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{ExperimentConfig, Shots};
pub use report::{collect_reports, ArmReport, ComparisonReport, MetricsReport, SeedResult, CSV_HEADER};
pub use synthetic::{generate_synthetic, write_synthetic, SyntheticConfig, PROCEDURE_RELATION, SITE_RELATION};
pub use train::{
    ablate_knowledge, ablate_templates, build_model, evaluate_split, predict_rows, run_seed, train,
    train_with_candidates, Candidates,
};

pub const LIBRARY_FILE: &str = "library.txt";
pub const KB_FILE: &str = "kb.tsv";
pub const TRAIN_FILE: &str = "train.tsv";
pub const DEV_FILE: &str = "dev.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const SURFACE_FILE: &str = "surface_vectors.tsv";
pub const STATIC_FILE: &str = "static_vectors.tsv";

/// Everything an experiment reads from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBundle {
    pub library: StandardLibrary,
    pub kb: KnowledgeBase,
    pub train: Vec<GoldAlignment>,
    pub dev: Vec<GoldAlignment>,
    pub test: Vec<GoldAlignment>,
    /// Vectors standing in for a pretrained encoder's view of each token.
    pub surface: Option<StaticVectors>,
    pub static_table: Option<StaticVectors>,
}

impl DataBundle {
    /// Read a data directory. Vector files are optional.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let delims = Delimiters::default();
        let library = StandardLibrary::load(dir.join(LIBRARY_FILE))?;
        let kb = KnowledgeBase::load(dir.join(KB_FILE))?;
        let split = |f: &str| load_dataset(dir.join(f), &library, &delims);
        let (train, dev, test) = (split(TRAIN_FILE)?, split(DEV_FILE)?, split(TEST_FILE)?);
        let vectors = |f: &str| {
            let p = dir.join(f);
            p.exists().then(|| StaticVectors::load(&p)).transpose()
        };
        Ok(DataBundle {
            surface: vectors(SURFACE_FILE)?,
            static_table: vectors(STATIC_FILE)?,
            library,
            kb,
            train,
            dev,
            test,
        })
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let lib_path = dir.join(LIBRARY_FILE);
        let mut lib = self.library.terms().join("\n");
        lib.push('\n');
        std::fs::write(&lib_path, lib).map_err(|e| Error::io(&lib_path, e))?;
        self.kb.write(dir.join(KB_FILE))?;
        write_dataset(dir.join(TRAIN_FILE), &self.train)?;
        write_dataset(dir.join(DEV_FILE), &self.dev)?;
        write_dataset(dir.join(TEST_FILE), &self.test)?;
        if let Some(v) = &self.surface {
            v.write(dir.join(SURFACE_FILE))?;
        }
        if let Some(v) = &self.static_table {
            v.write(dir.join(STATIC_FILE))?;
        }
        Ok(())
    }
}

/// Indices of `n` training mentions drawn uniformly without replacement,
/// in shuffled order.
pub fn few_shot_sample(train_len: usize, shots: Shots, seed: u64) -> Result<Vec<usize>> {
    let n = match shots {
        Shots::All => train_len,
        Shots::Count(n) => n,
    };
    if n > train_len {
        return Err(Error::Config(format!(
            "{n} shots requested from a training set of {train_len} mentions"
        )));
    }
    let mut idx: Vec<usize> = (0..train_len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    Ok(idx)
}

/// Patience rule over per-epoch dev accuracy.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_improvement: f64,
    best: Option<f64>,
    best_epoch: usize,
    stale: usize,
    epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_improvement: f64) -> Self {
        EarlyStopping {
            patience,
            min_improvement,
            best: None,
            best_epoch: 0,
            stale: 0,
            epoch: 0,
        }
    }

    pub fn observe(&mut self, accuracy: f64) -> StopDecision {
        self.epoch += 1;
        let improved = match self.best {
            None => true,
            Some(b) => accuracy - b >= self.min_improvement,
        };
        if improved {
            self.best = Some(accuracy);
            self.best_epoch = self.epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// 1-based epoch of the best score.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(accs: &[f64], patience: usize) -> (usize, usize) {
        let mut es = EarlyStopping::new(patience, 1e-4);
        for (i, &a) in accs.iter().enumerate() {
            if es.observe(a).stop {
                return (i + 1, es.best_epoch());
            }
        }
        (accs.len(), es.best_epoch())
    }

    #[test]
    fn patience_two_trace() {
        assert_eq!(trace(&[0.5, 0.6, 0.6, 0.6], 2), (4, 2));
        let monotone: Vec<f64> = (0..10).map(|i| 0.1 * i as f64).collect();
        assert_eq!(trace(&monotone, 2), (10, 10));
        // a gain below the threshold is not an improvement
        assert_eq!(trace(&[0.5, 0.50005, 0.5, 0.9], 2), (3, 1));
    }

    #[test]
    fn sampling_rules() {
        assert_eq!(few_shot_sample(10, Shots::Count(4), 3).unwrap(), few_shot_sample(10, Shots::Count(4), 3).unwrap());
        let mut all = few_shot_sample(10, Shots::All, 1).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(few_shot_sample(10, Shots::Count(11), 0).is_err());
    }

    #[test]
    fn bundle_round_trips_through_disk() {
        let d = generate_synthetic(&SyntheticConfig { train: 30, dev: 10, test: 10, ..SyntheticConfig::default() }, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.write_dir(dir.path()).unwrap();
        let back = DataBundle::load_dir(dir.path()).unwrap();
        assert_eq!(back.library, d.library);
        assert_eq!(back.kb, d.kb);
        assert_eq!(back.surface, d.surface);
        let gold = |rows: &[GoldAlignment]| rows.iter().map(|r| (r.mention.parts.clone(), r.gold_parts.clone())).collect::<Vec<_>>();
        assert_eq!(gold(&back.train), gold(&d.train));
        assert_eq!(gold(&back.test), gold(&d.test));
    }

    proptest! {
        #[test]
        fn sample_is_a_subset_without_repeats(len in 1usize..200, frac in 0.0f64..1.0, seed in any::<u64>()) {
            let n = ((len as f64 * frac) as usize).max(1);
            let s = few_shot_sample(len, Shots::Count(n), seed).unwrap();
            prop_assert_eq!(s.len(), n);
            let set: std::collections::BTreeSet<_> = s.iter().collect();
            prop_assert_eq!(set.len(), n);
            prop_assert!(s.iter().all(|&i| i < len));
        }

        #[test]
        fn best_score_never_decreases(accs in proptest::collection::vec(0.0f64..1.0, 1..20)) {
            let mut es = EarlyStopping::new(100, 1e-4);
            let mut prev = f64::NEG_INFINITY;
            for a in accs {
                es.observe(a);
                let b = es.best().unwrap();
                prop_assert!(b >= prev);
                prev = b;
            }
        }
    }
}
