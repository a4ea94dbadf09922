//! Fold assignment and the six evaluation scenarios.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{write_lines, DatasetManifest};
use crate::error::{Error, Result};

pub const CLINIC: &str = "CVC-ClinicDB";
pub const COLON: &str = "CVC-ColonDB";
pub const ETIS: &str = "ETIS-Larib";
pub const KVASIR: &str = "Kvasir-SEG";

/// Seeded shuffle of `0..n`, then round-robin into `k` folds. Each fold is
/// returned sorted; sizes differ by at most one, larger folds first.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::InvalidArgument(format!("cannot split {n} items into {k} folds")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::with_capacity(n / k + 1); k];
    for (pos, idx) in order.into_iter().enumerate() {
        folds[pos % k].push(idx);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(folds)
}

/// Writes `fold_0 .. fold_{k-1}` (one id per line) into `dir`.
pub fn write_folds(dir: &Path, ids: &[String], folds: &[Vec<usize>]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in folds.iter().enumerate() {
        write_lines(&dir.join(format!("fold_{i}")), f.iter().map(|&j| ids[j].as_str()))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// Train sources vs test sources; `validation` of the training pool is held out.
    CrossSource { validation: f64 },
    /// Sources merged, shuffled, split into train/validation/test fractions
    /// (floors for validation and test, remainder to train).
    Merged { validation: f64, test: f64 },
    /// `k`-fold cross-validation with `test_fold` as the test set; `validation`
    /// of the remaining folds is held out.
    Folds { k: usize, test_fold: usize, validation: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// 1–6 for the predefined scenarios, 0 for a custom one.
    pub id: u8,
    pub train_sources: Vec<String>,
    pub test_sources: Vec<String>,
    pub rule: SplitRule,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn predefined(id: u8, seed: u64) -> Result<Self> {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let cross = SplitRule::CrossSource { validation: 0.1 };
        let folds = SplitRule::Folds { k: 5, test_fold: 0, validation: 0.1 };
        let (train, test, rule) = match id {
            1 => (s(&[COLON, ETIS]), s(&[CLINIC]), cross),
            2 => (s(&[COLON]), s(&[CLINIC]), cross),
            3 => (s(&[CLINIC]), s(&[ETIS]), cross),
            4 => (s(&[KVASIR, CLINIC]), s(&[KVASIR, CLINIC]), SplitRule::Merged { validation: 0.1, test: 0.1 }),
            5 => (s(&[CLINIC]), s(&[CLINIC]), folds),
            6 => (s(&[KVASIR]), s(&[KVASIR]), folds),
            _ => return Err(Error::Config(format!("unknown scenario {id} (expected 1–6)"))),
        };
        Ok(ScenarioSpec { id, train_sources: train, test_sources: test, rule, seed })
    }

    /// One source split 80/10/10, as scenario 4 does with merged sources.
    pub fn single_source(source: &str, seed: u64) -> Self {
        ScenarioSpec {
            id: 0,
            train_sources: vec![source.to_string()],
            test_sources: vec![source.to_string()],
            rule: SplitRule::Merged { validation: 0.1, test: 0.1 },
            seed,
        }
    }

    pub fn with_test_fold(mut self, fold: usize) -> Result<Self> {
        match &mut self.rule {
            SplitRule::Folds { k, test_fold, .. } if fold < *k => *test_fold = fold,
            _ => return Err(Error::Config(format!("scenario {} has no fold {fold}", self.id))),
        }
        Ok(self)
    }
}

/// A sample addressed by source name and index into that source's manifest.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleRef {
    pub source: String,
    pub index: usize,
    pub id: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<SampleRef>,
    pub validation: Vec<SampleRef>,
    /// Tagged by source so each test source can be reported separately.
    pub test: Vec<SampleRef>,
}

impl Split {
    pub fn test_sources(&self) -> Vec<String> {
        let mut s: Vec<String> = self.test.iter().map(|r| r.source.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

fn refs(m: &DatasetManifest) -> Vec<SampleRef> {
    m.entries
        .iter()
        .enumerate()
        .map(|(index, e)| SampleRef { source: m.source.clone(), index, id: e.id.clone() })
        .collect()
}

fn find<'a>(manifests: &'a [DatasetManifest], name: &str) -> Result<&'a DatasetManifest> {
    manifests
        .iter()
        .find(|m| m.source == name)
        .ok_or_else(|| Error::Config(format!("unknown source `{name}`")))
}

fn check_fraction(f: f64) -> Result<()> {
    if !(0.0..1.0).contains(&f) {
        return Err(Error::Config(format!("split fraction {f} outside [0, 1)")));
    }
    Ok(())
}

/// Shuffles and moves `floor(fraction · n)` items (at least one when
/// `fraction > 0` and `n ≥ 2`) out of `pool`.
fn hold_out(pool: &mut Vec<SampleRef>, fraction: f64, rng: &mut ChaCha8Rng) -> Vec<SampleRef> {
    pool.shuffle(rng);
    let mut n = (fraction * pool.len() as f64).floor() as usize;
    if n == 0 && fraction > 0.0 && pool.len() >= 2 {
        n = 1;
    }
    let mut held = pool.split_off(pool.len() - n);
    pool.sort();
    held.sort();
    held
}

pub fn scenario_split(spec: &ScenarioSpec, manifests: &[DatasetManifest]) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let gather = |names: &[String]| -> Result<Vec<SampleRef>> {
        let mut out = Vec::new();
        for n in names {
            out.extend(refs(find(manifests, n)?));
        }
        Ok(out)
    };
    let split = match spec.rule {
        SplitRule::CrossSource { validation } => {
            check_fraction(validation)?;
            if let Some(shared) = spec.train_sources.iter().find(|s| spec.test_sources.contains(s)) {
                return Err(Error::Config(format!("source `{shared}` is both a train and a test source")));
            }
            let mut train = gather(&spec.train_sources)?;
            let test = gather(&spec.test_sources)?;
            let validation = hold_out(&mut train, validation, &mut rng);
            Split { train, validation, test }
        }
        SplitRule::Merged { validation, test } => {
            check_fraction(validation)?;
            check_fraction(test)?;
            let mut names = spec.train_sources.clone();
            for s in &spec.test_sources {
                if !names.contains(s) {
                    names.push(s.clone());
                }
            }
            let mut pool = gather(&names)?;
            let n = pool.len();
            pool.shuffle(&mut rng);
            let n_test = (test * n as f64).floor() as usize;
            let n_val = (validation * n as f64).floor() as usize;
            let mut test_set = pool.split_off(n - n_test);
            let mut val_set = pool.split_off(n - n_test - n_val);
            pool.sort();
            val_set.sort();
            test_set.sort();
            Split { train: pool, validation: val_set, test: test_set }
        }
        SplitRule::Folds { k, test_fold, validation } => {
            check_fraction(validation)?;
            if spec.train_sources.len() != 1 || spec.test_sources != spec.train_sources {
                return Err(Error::Config("cross-validation scenarios use exactly one source".into()));
            }
            if test_fold >= k {
                return Err(Error::Config(format!("test fold {test_fold} out of range for {k} folds")));
            }
            let all = gather(&spec.train_sources)?;
            let folds = make_folds(all.len(), k, spec.seed)?;
            let test: Vec<SampleRef> = folds[test_fold].iter().map(|&i| all[i].clone()).collect();
            let mut train: Vec<SampleRef> = folds
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != test_fold)
                .flat_map(|(_, f)| f.iter().map(|&i| all[i].clone()))
                .collect();
            let validation = hold_out(&mut train, validation, &mut rng);
            Split { train, validation, test }
        }
    };
    if split.train.is_empty() {
        return Err(Error::Config("scenario leaves no training samples".into()));
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::dataset::ManifestEntry;

    fn manifest(source: &str, n: usize) -> DatasetManifest {
        DatasetManifest {
            source: source.into(),
            entries: (0..n)
                .map(|i| ManifestEntry { id: format!("{i:04}"), image: "i".into(), mask: "m".into() })
                .collect(),
            checksum: String::new(),
        }
    }

    #[test]
    fn fold_sizes_for_612() {
        let f = make_folds(612, 5, 7).unwrap();
        let sizes: Vec<usize> = f.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![123, 123, 122, 122, 122]);
    }

    #[test]
    fn merged_scenario_counts() {
        let ms = [manifest(KVASIR, 1000), manifest(CLINIC, 612)];
        let s = scenario_split(&ScenarioSpec::predefined(4, 1).unwrap(), &ms).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (1290, 161, 161));
        assert_eq!(s.test_sources().len(), 2);
    }

    #[test]
    fn unknown_source_rejected() {
        let ms = [manifest(COLON, 10)];
        assert!(scenario_split(&ScenarioSpec::predefined(2, 1).unwrap(), &ms).is_err());
        assert!(ScenarioSpec::predefined(7, 0).is_err());
    }

    #[test]
    fn cross_source_holds_out_validation() {
        let ms = [manifest(COLON, 380), manifest(CLINIC, 612)];
        let s = scenario_split(&ScenarioSpec::predefined(2, 3).unwrap(), &ms).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (342, 38, 612));
        assert!(s.train.iter().all(|r| r.source == COLON));
    }

    #[test]
    fn write_fold_files() {
        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<String> = (0..7).map(|i| format!("id{i}")).collect();
        let folds = make_folds(7, 5, 0).unwrap();
        write_folds(dir.path(), &ids, &folds).unwrap();
        let text = fs::read_to_string(dir.path().join("fold_4")).unwrap();
        assert_eq!(text.lines().count(), 1);
    }
}
