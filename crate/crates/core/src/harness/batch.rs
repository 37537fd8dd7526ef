//! Multi-run experiments: same-seed-K sweeps and the injection ablation grid.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::attention::TOKEN_SLOTS;
use crate::backend::Backend;
use crate::error::{DdError, Result};
use crate::harness::store::RunStore;
use crate::pipeline::{run_directed_diffusion, DenoiseConfig, EditMode, RunRecord};
use crate::regions::RegionDirective;

/// Builds a fresh backend; parallel workers each call it once.
pub type BackendFactory<'a> = dyn Fn() -> Result<Box<dyn Backend>> + Sync + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BatchMode {
    Sequential,
    Parallel { workers: usize },
}

impl Default for BatchMode {
    fn default() -> Self {
        BatchMode::Sequential
    }
}

/// One run of a batch. `outcome` holds the record (possibly with a failed
/// status) or the error that prevented the run from starting.
#[derive(Debug, Clone)]
pub struct Cell<K> {
    pub key: K,
    pub outcome: std::result::Result<RunRecord, String>,
}

impl<K> Cell<K> {
    pub fn record(&self) -> Option<&RunRecord> {
        self.outcome.as_ref().ok()
    }
}

/// Runs `job` for every key and returns cells in key order. Records are saved
/// to `store` from the calling thread only.
fn run_cells<K, F>(
    factory: &BackendFactory<'_>,
    mode: BatchMode,
    keys: Vec<K>,
    store: Option<&RunStore>,
    job: F,
) -> Result<Vec<Cell<K>>>
where
    K: Send + Sync,
    F: Fn(&dyn Backend, &K) -> Result<RunRecord> + Sync,
{
    let persist = |outcome: Result<RunRecord>| -> std::result::Result<RunRecord, String> {
        let rec = outcome.map_err(|e| e.to_string())?;
        if let Some(store) = store {
            store.save(&rec).map_err(|e| format!("saving {}: {e}", rec.run_id))?;
        }
        Ok(rec)
    };

    let workers = match mode {
        BatchMode::Sequential => 1,
        BatchMode::Parallel { workers } if workers == 0 => {
            return Err(DdError::validation("workers", "must be at least 1"));
        }
        BatchMode::Parallel { workers } => workers.min(keys.len().max(1)),
    };

    if workers == 1 {
        let backend = factory()?;
        let outcomes: Vec<_> = keys.iter().map(|k| persist(job(backend.as_ref(), k))).collect();
        return Ok(keys
            .into_iter()
            .zip(outcomes)
            .map(|(key, outcome)| Cell { key, outcome })
            .collect());
    }

    let mut slots: Vec<Option<std::result::Result<RunRecord, String>>> = (0..keys.len()).map(|_| None).collect();
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<RunRecord>)>();
    std::thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (keys, next, job) = (&keys, &next, &job);
            s.spawn(move || {
                let backend = match factory() {
                    Ok(b) => b,
                    Err(e) => {
                        // Claim the remaining cells so they are reported, not lost.
                        loop {
                            let i = next.fetch_add(1, Ordering::SeqCst);
                            if i >= keys.len() {
                                return;
                            }
                            let _ = tx.send((i, Err(DdError::Unavailable(e.to_string()))));
                        }
                    }
                };
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= keys.len() {
                        return;
                    }
                    if tx.send((i, job(backend.as_ref(), &keys[i]))).is_err() {
                        return;
                    }
                }
            });
        }
        drop(tx);
        for (i, outcome) in rx {
            slots[i] = Some(persist(outcome));
        }
    });
    Ok(keys
        .into_iter()
        .zip(slots)
        .map(|(key, outcome)| Cell {
            key,
            outcome: outcome.unwrap_or_else(|| Err("worker exited before running this cell".into())),
        })
        .collect())
}

/// Same prompt and directives over seeds `seed0 .. seed0 + k`.
#[allow(clippy::too_many_arguments)]
pub fn run_ssk(
    factory: &BackendFactory<'_>,
    mode: BatchMode,
    prompt: &str,
    directives: &[RegionDirective],
    config: &DenoiseConfig,
    seed0: u64,
    k: usize,
    store: Option<&RunStore>,
) -> Result<Vec<Cell<u64>>> {
    if k == 0 {
        return Err(DdError::validation("k", "must be at least 1"));
    }
    config.validate()?;
    let seeds: Vec<u64> = (0..k as u64).map(|i| seed0.wrapping_add(i)).collect();
    run_cells(factory, mode, seeds, store, |backend, &seed| {
        let cfg = DenoiseConfig {
            seed,
            ..config.clone()
        };
        run_directed_diffusion(backend, prompt, directives, &cfg)
    })
}

pub const DEFAULT_ABLATION_TRAILING: [usize; 4] = [5, 10, 15, 20];
pub const DEFAULT_ABLATION_STEPS: [usize; 5] = [1, 3, 5, 10, 15];

fn default_trailing() -> Vec<usize> {
    DEFAULT_ABLATION_TRAILING.to_vec()
}

fn default_steps() -> Vec<usize> {
    DEFAULT_ABLATION_STEPS.to_vec()
}

fn default_true() -> bool {
    true
}

/// Grid over the number of injected trailing maps `m` and edited steps `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    #[serde(default = "default_trailing")]
    pub trailing: Vec<usize>,
    #[serde(default = "default_steps")]
    pub steps: Vec<usize>,
    /// Adds the unedited `m = 0, n = 0` cell first.
    #[serde(default = "default_true")]
    pub include_baseline: bool,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            trailing: default_trailing(),
            steps: default_steps(),
            include_baseline: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationKey {
    pub num_trailing: usize,
    pub edit_steps: usize,
}

impl AblationSpec {
    /// Checks every cell against the prompt length and step budget.
    pub fn cells(&self, prompt_len: usize, total_steps: usize) -> Result<Vec<AblationKey>> {
        let trailing = TOKEN_SLOTS.saturating_sub(prompt_len);
        for (i, &m) in self.trailing.iter().enumerate() {
            if m > trailing {
                return Err(DdError::validation(
                    format!("trailing[{i}]"),
                    format!("{m} exceeds the {trailing} trailing tokens of this prompt"),
                ));
            }
        }
        for (i, &n) in self.steps.iter().enumerate() {
            if n > total_steps {
                return Err(DdError::validation(
                    format!("steps[{i}]"),
                    format!("{n} exceeds total_steps {total_steps}"),
                ));
            }
        }
        let mut keys = Vec::new();
        if self.include_baseline {
            keys.push(AblationKey {
                num_trailing: 0,
                edit_steps: 0,
            });
        }
        for &m in &self.trailing {
            for &n in &self.steps {
                keys.push(AblationKey {
                    num_trailing: m,
                    edit_steps: n,
                });
            }
        }
        Ok(keys)
    }
}

/// Direct-injection ablation: one run per `(m, n)` cell, all from `config.seed`.
pub fn ablation_grid(
    factory: &BackendFactory<'_>,
    mode: BatchMode,
    prompt: &str,
    directives: &[RegionDirective],
    config: &DenoiseConfig,
    spec: &AblationSpec,
    store: Option<&RunStore>,
) -> Result<Vec<Cell<AblationKey>>> {
    config.validate()?;
    let prompt_len = factory()?.encode_text(prompt)?.prompt_len;
    let keys = spec.cells(prompt_len, config.total_steps)?;
    run_cells(factory, mode, keys, store, |backend, key| {
        let cfg = DenoiseConfig {
            edit_steps: key.edit_steps,
            edit_mode: EditMode::DirectInjection {
                num_trailing: key.num_trailing,
            },
            ..config.clone()
        };
        run_directed_diffusion(backend, prompt, directives, &cfg)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::ToyBackend;
    use crate::regions::BoundingBox;

    fn toy() -> Result<Box<dyn Backend>> {
        Ok(Box::new(ToyBackend::new()))
    }

    fn small() -> DenoiseConfig {
        DenoiseConfig {
            total_steps: 6,
            edit_steps: 2,
            opt: crate::attention::OptConfig {
                iterations: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn directive() -> Vec<RegionDirective> {
        vec![RegionDirective::new(BoundingBox::new(0.0, 0.5, 0.0, 0.5).unwrap(), vec![3], "bear").unwrap()]
    }

    #[test]
    fn ssk_parallel_matches_sequential() {
        let seq = run_ssk(&toy, BatchMode::Sequential, "a bear eating", &directive(), &small(), 7, 3, None).unwrap();
        let par = run_ssk(&toy, BatchMode::Parallel { workers: 3 }, "a bear eating", &directive(), &small(), 7, 3, None)
            .unwrap();
        assert_eq!(seq.iter().map(|c| c.key).collect::<Vec<_>>(), vec![7, 8, 9]);
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.key, b.key);
            assert!(a.record().unwrap().same_content(b.record().unwrap()));
            assert_eq!(a.record().unwrap().config.seed, a.key);
        }
    }

    #[test]
    fn ablation_cells_and_validation() {
        let spec = AblationSpec::default();
        let keys = spec.cells(5, 50).unwrap();
        assert_eq!(keys.len(), 21);
        assert_eq!(keys[0], AblationKey { num_trailing: 0, edit_steps: 0 });
        let err = spec.cells(70, 50).unwrap_err();
        assert!(matches!(err, DdError::Validation { ref field, .. } if field == "trailing[1]"), "{err}");
        let err = spec.cells(5, 12).unwrap_err();
        assert!(matches!(err, DdError::Validation { ref field, .. } if field == "steps[4]"), "{err}");
    }

    #[test]
    fn ablation_runs_and_saves() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        let spec = AblationSpec {
            trailing: vec![2],
            steps: vec![1, 3],
            include_baseline: true,
        };
        let cells = ablation_grid(
            &toy,
            BatchMode::Parallel { workers: 2 },
            "a bear eating",
            &directive(),
            &small(),
            &spec,
            Some(&store),
        )
        .unwrap();
        assert_eq!(cells.len(), 3);
        assert_eq!(store.list().unwrap().len(), 3);
        for c in &cells {
            let rec = c.record().unwrap();
            assert_eq!(rec.config.edit_steps, c.key.edit_steps);
            assert!(rec.loss_trace.is_empty());
        }
    }

    #[test]
    fn zero_workers_rejected() {
        let err = run_ssk(&toy, BatchMode::Parallel { workers: 0 }, "a bear", &[], &small(), 0, 1, None).unwrap_err();
        assert!(matches!(err, DdError::Validation { .. }));
    }
}
