//! Training loop, masked replay and multi-seed sweeps.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{sample_preference_batch, sample_sft_batch, Teacher};
use super::model::{dpo_loss_and_grad, sft_loss_and_grad, PolicyShape};
use super::{Objective, Optimizer, ParamStorage, ToyConfig};
use crate::checkpoint::{bf16_round, write_safetensors, Dtype, TensorData};
use crate::error::{Error, Result};
use crate::mask::{splitmix64_at, write_mask, Bitset, MaskTensor, MaskTensorSchema, SubnetMask};

const TEACHER_SALT: u64 = 0x7EAC_4E55_0F1D_2C3B;
const DATA_SALT: u64 = 0x0DA7_A5EE_D5A1_7000;
/// Steps averaged for the reported final training loss.
const FINAL_LOSS_WINDOW: usize = 100;

pub fn toy_schema(shape: &PolicyShape) -> Vec<MaskTensorSchema> {
    shape
        .tensors()
        .into_iter()
        .map(|(name, dims, _)| MaskTensorSchema::new(name, dims))
        .collect()
}

/// PyTorch-style initialization: every weight and bias uniform in `±1/sqrt(fan_in)`.
pub fn init_params(shape: &PolicyShape, seed: u64, storage: ParamStorage) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(shape.num_params());
    for (name, dims, _) in shape.tensors() {
        let fan_in = if name.contains("fc1") { shape.input_dim } else { shape.hidden_dim };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let numel: usize = dims.iter().product();
        for _ in 0..numel {
            let v = rng.random_range(-bound..bound) as f32;
            out.push(match storage {
                ParamStorage::Bf16Emulated => bf16_round(v),
                ParamStorage::F32 => v,
            });
        }
    }
    out
}

fn teacher_for(cfg: &ToyConfig, seed: u64) -> Teacher {
    Teacher::new(cfg.shape(), splitmix64_at(seed ^ TEACHER_SALT, 0), 1.0, cfg.teacher_temperature)
}

fn batch_seed(seed: u64, step: usize) -> u64 {
    splitmix64_at(seed ^ DATA_SALT, step as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyRun {
    pub config: ToyConfig,
    pub init_params: Vec<f32>,
    /// Stored parameters after the last step (bfloat16 values when emulated).
    pub final_params: Vec<f32>,
    /// Fraction of parameters equal to their initial value after each step.
    pub step_sparsity: Vec<f64>,
    /// Loss of each step's batch, evaluated before that step's update.
    pub loss_curve: Vec<f64>,
    /// Parameters whose stored value differs from init (tolerance 0).
    pub final_mask: SubnetMask,
    /// `(step, params)` snapshots when `snapshot_every > 0`.
    pub snapshots: Vec<(usize, Vec<f32>)>,
}

impl ToyRun {
    /// Sparsity of the final parameters against init; 1.0 for a zero-step run.
    pub fn final_sparsity(&self) -> f64 {
        self.step_sparsity.last().copied().unwrap_or(1.0)
    }

    /// Mean loss over the last (up to) 100 steps.
    pub fn final_train_loss(&self) -> f64 {
        let n = self.loss_curve.len().min(FINAL_LOSS_WINDOW);
        if n == 0 {
            return f64::NAN;
        }
        self.loss_curve[self.loss_curve.len() - n..].iter().sum::<f64>() / n as f64
    }

    fn dtype(&self) -> Dtype {
        match self.config.param_storage {
            ParamStorage::Bf16Emulated => Dtype::BF16,
            ParamStorage::F32 => Dtype::F32,
        }
    }

    /// Splits a flat parameter vector into named tensors in the checkpoint layout.
    pub fn tensors(&self, params: &[f32]) -> Vec<TensorData> {
        self.config
            .shape()
            .tensors()
            .into_iter()
            .map(|(name, dims, off)| {
                let n: usize = dims.iter().product();
                TensorData::new(name, self.dtype(), dims, params[off..off + n].to_vec())
            })
            .collect()
    }

    /// Writes `init.safetensors`, `final.safetensors`, one `step_NNNNNN.safetensors` per
    /// snapshot, `mask.snmk`, `log.csv` and `config.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("seed".to_string(), self.config.seed.to_string());
        meta.insert("objective".to_string(), self.config.objective.to_string());
        write_safetensors(dir.join("init.safetensors"), &self.tensors(&self.init_params), Some(&meta))?;
        write_safetensors(dir.join("final.safetensors"), &self.tensors(&self.final_params), Some(&meta))?;
        for (step, params) in &self.snapshots {
            write_safetensors(
                dir.join(format!("step_{step:06}.safetensors")),
                &self.tensors(params),
                Some(&meta),
            )?;
        }
        write_mask(&self.final_mask, dir.join("mask.snmk"))?;

        let log = dir.join("log.csv");
        let mut w = csv::Writer::from_path(&log).map_err(|e| csv_error(&log, e))?;
        w.write_record(["step", "loss", "sparsity"]).map_err(|e| csv_error(&log, e))?;
        for (i, (loss, sp)) in self.loss_curve.iter().zip(&self.step_sparsity).enumerate() {
            w.write_record([(i + 1).to_string(), loss.to_string(), sp.to_string()])
                .map_err(|e| csv_error(&log, e))?;
        }
        w.flush().map_err(|e| Error::io(&log, e))?;

        let cfg = dir.join("config.json");
        let text = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(&cfg, text + "\n").map_err(|e| Error::io(&cfg, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

fn flat_mask(mask: &SubnetMask, shape: &PolicyShape) -> Result<Vec<bool>> {
    let expected = toy_schema(shape);
    let got = mask.schema();
    if got != expected {
        let describe = |s: &[MaskTensorSchema]| {
            s.iter()
                .map(|t| format!("{}{:?}", t.name, t.shape))
                .collect::<Vec<_>>()
                .join(", ")
        };
        return Err(Error::MaskSchemaMismatch(format!(
            "mask covers [{}] but the toy model has [{}]",
            describe(&got),
            describe(&expected)
        )));
    }
    Ok(mask
        .tensors
        .iter()
        .flat_map(|t| (0..t.bits.len()).map(move |i| t.bits.get(i)))
        .collect())
}

fn changed_mask(shape: &PolicyShape, init: &[f32], fin: &[f32]) -> SubnetMask {
    let tensors = shape
        .tensors()
        .into_iter()
        .map(|(name, dims, off)| {
            let n: usize = dims.iter().product();
            let mut bits = Bitset::zeros(n);
            for i in 0..n {
                if init[off + i] != fin[off + i] {
                    bits.set(i, true);
                }
            }
            MaskTensor {
                name: name.to_string(),
                shape: dims,
                bits,
            }
        })
        .collect();
    SubnetMask {
        tolerance: 0.0,
        source: "toy".into(),
        tensors,
    }
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    const B1: f32 = 0.9;
    const B2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn updates(&mut self, grad: &[f64], lr: f64) -> Vec<f32> {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        grad.iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                let g = g as f32;
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                lr as f32 * (*m / c1) / ((*v / c2).sqrt() + Self::EPS)
            })
            .collect()
    }
}

/// Trains from the seed-derived initialization.
pub fn train(config: &ToyConfig, seed: u64, mask: Option<&SubnetMask>) -> Result<ToyRun> {
    config.validate()?;
    let init = init_params(&config.shape(), seed, config.param_storage);
    train_from(config, seed, init, mask)
}

/// Trains from explicit initial parameters. `seed` still selects the teacher and the data
/// stream. With a mask, gradients outside it are zeroed before every optimizer step.
pub fn train_from(config: &ToyConfig, seed: u64, init: Vec<f32>, mask: Option<&SubnetMask>) -> Result<ToyRun> {
    config.validate()?;
    let shape = config.shape();
    let n = shape.num_params();
    if init.len() != n {
        return Err(Error::DimMismatch(format!("expected {n} initial parameters, got {}", init.len())));
    }
    let keep = mask.map(|m| flat_mask(m, &shape)).transpose()?;
    let teacher = teacher_for(config, seed);
    let reference: Vec<f64> = init.iter().map(|&v| v as f64).collect();
    let mut params = init.clone();
    let mut params64 = reference.clone();
    let mut adam = (config.optimizer == Optimizer::Adam).then(|| Adam::new(n));
    let mut step_sparsity = Vec::with_capacity(config.steps);
    let mut loss_curve = Vec::with_capacity(config.steps);
    let mut snapshots = Vec::new();

    for step in 0..config.steps {
        let bs = batch_seed(seed, step);
        let (loss, mut grad) = match config.objective {
            Objective::DpoInd => {
                let batch = sample_preference_batch(&shape, &params64, &teacher, config.batch, bs);
                dpo_loss_and_grad(&shape, &params64, &reference, &batch, config.beta)?
            }
            Objective::SftOod => {
                let batch = sample_sft_batch(shape.input_dim, &teacher, config.batch, bs);
                sft_loss_and_grad(&shape, &params64, &batch)?
            }
        };
        loss_curve.push(loss);
        if let Some(keep) = &keep {
            for (g, &k) in grad.iter_mut().zip(keep) {
                if !k {
                    *g = 0.0;
                }
            }
        }
        let updates: Vec<f32> = match &mut adam {
            Some(a) => a.updates(&grad, config.lr),
            None => grad.iter().map(|&g| (config.lr * g) as f32).collect(),
        };
        for ((p, p64), u) in params.iter_mut().zip(params64.iter_mut()).zip(updates) {
            let next = *p - u;
            *p = match config.param_storage {
                ParamStorage::Bf16Emulated => bf16_round(next),
                ParamStorage::F32 => next,
            };
            *p64 = *p as f64;
        }
        let same = params.iter().zip(&init).filter(|(a, b)| a == b).count();
        step_sparsity.push(same as f64 / n as f64);
        if config.snapshot_every > 0 && (step + 1) % config.snapshot_every == 0 {
            snapshots.push((step + 1, params.clone()));
        }
    }

    let final_mask = changed_mask(&shape, &init, &params);
    let mut cfg = config.clone();
    cfg.seed = seed;
    Ok(ToyRun {
        config: cfg,
        init_params: init,
        final_params: params,
        step_sparsity,
        loss_curve,
        final_mask,
        snapshots,
    })
}

/// Fraction of positions where `|a - b| <= tol`.
pub fn agreement(a: &[f32], b: &[f32], tol: f64) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let same = a
        .iter()
        .zip(b)
        .filter(|(&x, &y)| x == y || (x as f64 - y as f64).abs() <= tol)
        .count();
    same as f64 / a.len() as f64
}

#[derive(Debug, Clone)]
pub struct ReplayOutcome {
    /// Agreement between full and masked final parameters at tolerance 1e-4.
    pub agreement_1e4: f64,
    pub agreement_1e5: f64,
    pub full: ToyRun,
    pub masked: ToyRun,
}

/// Trains once without a mask, then retrains from the same init and data stream with
/// gradients restricted to the parameters the first run changed.
pub fn conjecture_replay(config: &ToyConfig, seed: u64) -> Result<ReplayOutcome> {
    let full = train(config, seed, None)?;
    let masked = train_from(config, seed, full.init_params.clone(), Some(&full.final_mask))?;
    Ok(ReplayOutcome {
        agreement_1e4: agreement(&full.final_params, &masked.final_params, 1e-4),
        agreement_1e5: agreement(&full.final_params, &masked.final_params, 1e-5),
        full,
        masked,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub seed: u64,
    pub objective: Objective,
    pub final_sparsity: f64,
    pub final_loss: f64,
}

/// Runs every (objective, seed) combination in parallel; results are ordered by objective,
/// then seed, independent of scheduling.
pub fn sweep(config: &ToyConfig, seeds: &[u64], objectives: &[Objective]) -> Result<Vec<SweepEntry>> {
    let jobs: Vec<(Objective, u64)> = objectives
        .iter()
        .flat_map(|&o| seeds.iter().map(move |&s| (o, s)))
        .collect();
    jobs.into_par_iter()
        .map(|(objective, seed)| {
            let mut cfg = config.clone();
            cfg.objective = objective;
            let run = train(&cfg, seed, None)?;
            Ok(SweepEntry {
                seed,
                objective,
                final_sparsity: run.final_sparsity(),
                final_loss: run.final_train_loss(),
            })
        })
        .collect()
}

/// Mean final sparsity of the entries for `objective`, or `None` if there are none.
pub fn mean_final_sparsity(entries: &[SweepEntry], objective: Objective) -> Option<f64> {
    let v: Vec<f64> = entries
        .iter()
        .filter(|e| e.objective == objective)
        .map(|e| e.final_sparsity)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(objective: Objective) -> ToyConfig {
        ToyConfig {
            input_dim: 6,
            hidden_dim: 8,
            num_actions: 5,
            steps: 40,
            batch: 8,
            objective,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        for o in [Objective::DpoInd, Objective::SftOod] {
            let cfg = small(o);
            let a = train(&cfg, 3, None).unwrap();
            assert_eq!(a, train(&cfg, 3, None).unwrap());
            assert_ne!(a.final_params, train(&cfg, 4, None).unwrap().final_params);
        }
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut cfg = small(Objective::SftOod);
        cfg.lr = 0.0;
        let run = train(&cfg, 1, None).unwrap();
        assert_eq!(run.final_params, run.init_params);
        assert!(run.step_sparsity.iter().all(|&s| s == 1.0));
        let replay = conjecture_replay(&cfg, 1).unwrap();
        assert_eq!(replay.agreement_1e4, 1.0);
    }

    #[test]
    fn ones_mask_is_identity() {
        let cfg = small(Objective::DpoInd);
        let plain = train(&cfg, 5, None).unwrap();
        let mut ones = SubnetMask::empty(&toy_schema(&cfg.shape()), 0.0, "ones");
        for t in &mut ones.tensors {
            t.bits = Bitset::ones(t.bits.len());
        }
        let masked = train(&cfg, 5, Some(&ones)).unwrap();
        assert_eq!(plain.final_params, masked.final_params);
        assert_eq!(plain.loss_curve, masked.loss_curve);
        assert_eq!(plain.step_sparsity, masked.step_sparsity);
    }

    #[test]
    fn masked_params_frozen_every_step() {
        let mut cfg = small(Objective::SftOod);
        cfg.snapshot_every = 1;
        let mask = crate::mask::random_mask(&toy_schema(&cfg.shape()), 0.3, 9).unwrap();
        let keep = flat_mask(&mask, &cfg.shape()).unwrap();
        let run = train(&cfg, 2, Some(&mask)).unwrap();
        assert_eq!(run.snapshots.len(), cfg.steps);
        for (_, p) in &run.snapshots {
            for ((a, b), k) in p.iter().zip(&run.init_params).zip(&keep) {
                if !k {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn mask_schema_checked() {
        let cfg = small(Objective::SftOod);
        let other = ToyConfig { hidden_dim: 9, ..cfg.clone() };
        let mask = SubnetMask::empty(&toy_schema(&other.shape()), 0.0, "x");
        assert!(matches!(train(&cfg, 0, Some(&mask)), Err(Error::MaskSchemaMismatch(_))));
    }

    #[test]
    fn final_mask_matches_sparsity() {
        let cfg = small(Objective::SftOod);
        let run = train(&cfg, 8, None).unwrap();
        let m = &run.final_mask;
        assert_eq!(m.density(), 1.0 - run.final_sparsity());
    }

    #[test]
    fn bf16_init_is_representable() {
        let shape = small(Objective::DpoInd).shape();
        let p = init_params(&shape, 1, ParamStorage::Bf16Emulated);
        assert!(p.iter().all(|v| bf16_round(*v) == *v));
        assert!(p.iter().all(|v| v.abs() <= 1.0 / 6f32.sqrt()));
    }

    #[test]
    fn adam_runs_and_respects_mask() {
        let mut cfg = small(Objective::SftOod);
        cfg.optimizer = Optimizer::Adam;
        cfg.lr = 1e-3;
        let mask = crate::mask::random_mask(&toy_schema(&cfg.shape()), 0.5, 1).unwrap();
        let keep = flat_mask(&mask, &cfg.shape()).unwrap();
        let run = train(&cfg, 0, Some(&mask)).unwrap();
        assert!(run.final_sparsity() < 1.0);
        for ((a, b), k) in run.final_params.iter().zip(&run.init_params).zip(&keep) {
            if !k {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn sweep_is_ordered() {
        let cfg = ToyConfig { steps: 5, ..small(Objective::DpoInd) };
        let entries = sweep(&cfg, &[1, 2], &[Objective::DpoInd, Objective::SftOod]).unwrap();
        let keys: Vec<_> = entries.iter().map(|e| (e.objective, e.seed)).collect();
        assert_eq!(
            keys,
            vec![
                (Objective::DpoInd, 1),
                (Objective::DpoInd, 2),
                (Objective::SftOod, 1),
                (Objective::SftOod, 2)
            ]
        );
        assert!(mean_final_sparsity(&entries, Objective::SftOod).is_some());
    }

    #[test]
    fn save_writes_readable_checkpoints() {
        let mut cfg = small(Objective::SftOod);
        cfg.snapshot_every = 20;
        let run = train(&cfg, 1, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run.save(dir.path()).unwrap();
        let init = crate::checkpoint::CheckpointIndex::open(dir.path().join("init.safetensors")).unwrap();
        let fin = crate::checkpoint::CheckpointIndex::open(dir.path().join("final.safetensors")).unwrap();
        assert_eq!(init.total_params as usize, cfg.shape().num_params());
        let mask = crate::mask::extract_mask(&init, &fin, 0.0, &Default::default()).unwrap();
        assert_eq!(mask.updated(), run.final_mask.updated());
        assert!(dir.path().join("step_000020.safetensors").exists());
        assert!(dir.path().join("step_000040.safetensors").exists());
        let read = crate::mask::read_mask(dir.path().join("mask.snmk")).unwrap();
        assert_eq!(read.updated(), run.final_mask.updated());
        let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert_eq!(log.lines().count(), cfg.steps + 1);
    }
}
