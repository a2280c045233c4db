//! Adversarial training loop.
//!
//! One step: the generator runs once in training mode; the composited
//! result is detached for `critic_steps_per_gen_step` updates of each critic
//! (Wasserstein loss plus masked gradient penalty), then the generator is
//! updated against the freshly updated critics with the adversarial and
//! masked L1 terms.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::Instant;

use panocube_autograd::{grad, Adam, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{capture_store, restore_store, Checkpoint, TensorGroup};
use crate::error::{Error, Result};
use crate::networks::{
    composite, cubes_to_tensor, expand_mask_rgb, generator_input, masks_to_tensor, to_network, Critic,
    CriticConfig, Generator, GeneratorConfig, Mode, FACES,
};
use crate::objectives::{
    critic_loss, critic_objective, generator_adversarial_loss, generator_objective, interpolate, masked_gradient_penalty,
    masked_l1, total_objective, L1Reduction, LossComponents, ObjectiveWeights,
};
use crate::pipeline::TrainingSample;

/// Training configuration; the TOML form uses exactly these keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub face_size: usize,
    pub critic_steps_per_gen_step: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub checkpoint_interval: u64,
    pub weight_adversarial: f64,
    pub weight_gradient_penalty: f64,
    pub weight_reconstruction: f64,
    pub l1_reduction: L1Reduction,
    pub beta1: f64,
    pub beta2: f64,
    /// Encoder depth; `None` picks the deepest that fits `face_size`.
    pub generator_depth: Option<usize>,
    pub equirect_width: usize,
    pub fill: f32,
    pub save_optimizer_state: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = ObjectiveWeights::default();
        Self {
            learning_rate: 4e-4,
            batch_size: 8,
            face_size: 256,
            critic_steps_per_gen_step: 1,
            max_steps: 1000,
            seed: 0,
            checkpoint_interval: 100,
            weight_adversarial: w.adversarial,
            weight_gradient_penalty: w.gradient_penalty,
            weight_reconstruction: w.reconstruction,
            l1_reduction: L1Reduction::Mean,
            beta1: 0.5,
            beta2: 0.9,
            generator_depth: None,
            equirect_width: 512,
            fill: crate::masking::DEFAULT_FILL,
            save_optimizer_state: true,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            adversarial: self.weight_adversarial,
            gradient_penalty: self.weight_gradient_penalty,
            reconstruction: self.weight_reconstruction,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let mut g = GeneratorConfig::for_face_size(self.face_size);
        if let Some(d) = self.generator_depth {
            g.depth = d;
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.critic_steps_per_gen_step == 0 {
            return Err(Error::Config("critic_steps_per_gen_step must be at least 1".into()));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.equirect_width < 16 || !self.equirect_width.is_multiple_of(2) {
            return Err(Error::Config(format!("equirect_width {} must be even and >= 16", self.equirect_width)));
        }
        self.weights().validate()?;
        let g = self.generator_config();
        g.validate()?;
        g.check_face_size(self.face_size).map_err(|e| Error::Config(e.to_string()))?;
        CriticConfig::whole(self.face_size).validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub g_adv: f64,
    pub g_l1: f64,
    pub d_whole: f64,
    pub d_slice: f64,
    pub gp_whole: f64,
    pub gp_slice: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            g_adv: self.g_adv,
            g_l1: self.g_l1,
            d_whole: self.d_whole,
            d_slice: self.d_slice,
            gp_whole: self.gp_whole,
            gp_slice: self.gp_slice,
        }
    }
}

pub type StepReport = StepRecord;

/// Networks, optimisers and the number of completed generator steps.
pub struct TrainState {
    pub generator: Generator<f32>,
    pub whole: Critic<f32>,
    pub slice: Critic<f32>,
    pub opt_generator: Adam<f32>,
    pub opt_whole: Adam<f32>,
    pub opt_slice: Adam<f32>,
    pub step: u64,
}

fn adam(store: &ParamStore<f32>, c: &TrainConfig) -> Adam<f32> {
    Adam::new(store, c.learning_rate, c.beta1, c.beta2)
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
        let generator = Generator::new(config.generator_config(), seeds.random())?;
        let whole = Critic::new(CriticConfig::whole(config.face_size), seeds.random())?;
        let slice = Critic::new(CriticConfig::slice(config.face_size), seeds.random())?;
        Ok(Self {
            opt_generator: adam(generator.store(), config),
            opt_whole: adam(whole.store(), config),
            opt_slice: adam(slice.store(), config),
            generator,
            whole,
            slice,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, config: &TrainConfig) -> Checkpoint {
        let mut c = Checkpoint::new(
            self.step,
            self.generator.config().clone(),
            self.whole.config().clone(),
            self.slice.config().clone(),
        );
        c.meta = serde_json::json!({ "train_config": config });
        let nets: [(&str, &ParamStore<f32>, &Adam<f32>); 3] = [
            ("generator", self.generator.store(), &self.opt_generator),
            ("whole", self.whole.store(), &self.opt_whole),
            ("slice", self.slice.store(), &self.opt_slice),
        ];
        for (name, store, opt) in nets {
            let (params, buffers) = capture_store(store);
            if config.save_optimizer_state {
                let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
                let pair = |ts: &[Tensor<f32>]| -> TensorGroup { names.iter().cloned().zip(ts.iter().cloned()).collect() };
                c.groups.insert(format!("{name}.adam_m"), pair(&opt.first));
                c.groups.insert(format!("{name}.adam_v"), pair(&opt.second));
                c.groups.insert(
                    format!("{name}.adam_step"),
                    vec![("step".into(), Tensor::from_vec(vec![opt.step as f32], &[1]))],
                );
            }
            c.groups.insert(name.to_string(), params);
            c.groups.insert(format!("{name}.buffers"), buffers);
        }
        c
    }

    /// Rebuilds networks from a checkpoint. Optimiser moments are restored
    /// when present, otherwise they start from zero.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: &TrainConfig) -> Result<Self> {
        let mut generator = Generator::new(ckpt.generator.clone(), 0)?;
        let mut whole = Critic::new(ckpt.whole.clone(), 0)?;
        let mut slice = Critic::new(ckpt.slice.clone(), 0)?;
        restore_store(generator.store_mut(), ckpt.group("generator")?, ckpt.group("generator.buffers")?)?;
        restore_store(whole.store_mut(), ckpt.group("whole")?, ckpt.group("whole.buffers")?)?;
        restore_store(slice.store_mut(), ckpt.group("slice")?, ckpt.group("slice.buffers")?)?;
        let restore_opt = |name: &str, store: &ParamStore<f32>| -> Result<Adam<f32>> {
            let mut opt = adam(store, config);
            if let (Some(m), Some(v), Some(s)) = (
                ckpt.groups.get(&format!("{name}.adam_m")),
                ckpt.groups.get(&format!("{name}.adam_v")),
                ckpt.groups.get(&format!("{name}.adam_step")),
            ) {
                if m.len() != opt.first.len() || v.len() != opt.second.len() {
                    return Err(Error::Checkpoint(format!("optimizer state for {name} has the wrong size")));
                }
                opt.first = m.iter().map(|(_, t)| t.clone()).collect();
                opt.second = v.iter().map(|(_, t)| t.clone()).collect();
                opt.step = s.first().map_or(0, |(_, t)| t.data()[0] as u64);
            }
            Ok(opt)
        };
        Ok(Self {
            opt_generator: restore_opt("generator", generator.store())?,
            opt_whole: restore_opt("whole", whole.store())?,
            opt_slice: restore_opt("slice", slice.store())?,
            generator,
            whole,
            slice,
            step: ckpt.step,
        })
    }
}

/// Stacked tensors for a batch of samples.
pub struct Batch {
    pub truth: Tensor<f32>,
    pub damaged: Tensor<f32>,
    pub masks: Tensor<f32>,
}

impl Batch {
    pub fn new(samples: &[&TrainingSample]) -> Result<Self> {
        let s = samples.first().ok_or_else(|| Error::Validation("empty batch".into()))?.face_size();
        if samples.iter().any(|x| x.face_size() != s || x.masks.face_size() != s) {
            return Err(Error::Validation("batch mixes face sizes".into()));
        }
        let truth: Vec<_> = samples.iter().map(|x| &x.ground_truth).collect();
        let damaged: Vec<_> = samples.iter().map(|x| &x.damaged).collect();
        let masks: Vec<_> = samples.iter().map(|x| &x.masks).collect();
        Ok(Self {
            truth: cubes_to_tensor(&truth),
            damaged: cubes_to_tensor(&damaged),
            masks: masks_to_tensor(&masks),
        })
    }

    pub fn panoramas(&self) -> usize {
        self.truth.shape()[0] / FACES
    }
}

fn numerical(term: &str, detail: &str) -> Error {
    Error::Numerical {
        term: term.into(),
        detail: detail.into(),
    }
}

fn finite_grads(params: &[Var<f32>], loss: &Var<f32>, term: &str) -> Result<Vec<Option<Tensor<f32>>>> {
    let grads: Vec<Option<Tensor<f32>>> = grad(loss, params, false)
        .into_iter()
        .map(|g| g.map(|g| g.value().clone()))
        .collect();
    if grads.iter().flatten().any(|g| !g.all_finite()) {
        return Err(numerical(term, "gradient is not finite"));
    }
    Ok(grads)
}

/// Wasserstein loss and penalty for one critic; returns their values.
#[allow(clippy::too_many_arguments)]
fn critic_update(
    critic: &mut Critic<f32>,
    opt: &mut Adam<f32>,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    batch: &Batch,
    hole: &Tensor<f32>,
    eps: &[f32],
    weights: &ObjectiveWeights,
    term: &str,
) -> Result<(f64, f64)> {
    let params = critic.store().bind(true);
    let (real_score, _, u_real) = critic.score_faces(&params, &Var::constant(real.clone()), &batch.masks, Mode::Train)?;
    let (fake_score, _, u_fake) = critic.score_faces(&params, &Var::constant(fake.clone()), &batch.masks, Mode::Train)?;
    let wass = critic_loss(&real_score, &fake_score);
    let interp = interpolate(real, fake, eps)?;
    let rows_per_norm = match critic.config().kind {
        crate::networks::CriticKind::Whole => FACES,
        crate::networks::CriticKind::Slice => 1,
    };
    let mut u_gp = Vec::new();
    let gp = masked_gradient_penalty(
        |x| {
            // Per-face scores so the slice penalty sees each face's own gradient.
            let (_, per_face, u) = critic.score_faces(&params, x, &batch.masks, Mode::Train)?;
            u_gp = u;
            Ok(per_face)
        },
        &interp,
        hole,
        rows_per_norm,
    )?;
    let (d, p) = (wass.value().item() as f64, gp.value().item() as f64);
    if !d.is_finite() {
        return Err(numerical(&format!("d_{term}"), "critic loss is not finite"));
    }
    if !p.is_finite() {
        return Err(numerical(&format!("gp_{term}"), "gradient penalty is not finite"));
    }
    let total = critic_objective(&wass, &gp, weights);
    let grads = finite_grads(&params, &total, &format!("d_{term}"))?;
    drop(params);
    opt.step(critic.store_mut(), &grads);
    critic.apply_updates(u_real);
    critic.apply_updates(u_fake);
    critic.apply_updates(u_gp);
    Ok((d, p))
}

/// Runs one generator step (with its critic steps) on `samples`.
pub fn train_step(
    state: &mut TrainState,
    samples: &[&TrainingSample],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepReport> {
    let start = Instant::now();
    let batch = Batch::new(samples)?;
    let s = batch.truth.shape()[2];
    if s != config.face_size || s != state.whole.config().face_size {
        return Err(Error::Validation(format!(
            "batch face size {s} does not match configured {}",
            config.face_size
        )));
    }
    let weights = config.weights();
    let hole = expand_mask_rgb(&batch.masks).map(|m| 1.0 - m);
    let real = to_network(&batch.truth);

    let g_params = state.generator.store().bind(true);
    let input = Var::constant(generator_input(&batch.damaged, &batch.masks)?);
    let (raw, g_updates) = state.generator.forward(&g_params, &input, Mode::Train, Some(rng))?;
    let filled = composite(&raw, &batch.damaged, &batch.masks)?;
    let fake_var = filled.scale(2.0).add_scalar(-1.0);
    let fake = fake_var.value().clone();

    let n = batch.panoramas();
    let (mut d_whole, mut gp_whole, mut d_slice, mut gp_slice) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..config.critic_steps_per_gen_step {
        let eps: Vec<f32> = (0..n).map(|_| rng.random()).collect();
        (d_whole, gp_whole) = critic_update(
            &mut state.whole,
            &mut state.opt_whole,
            &real,
            &fake,
            &batch,
            &hole,
            &eps,
            &weights,
            "whole",
        )?;
        let eps: Vec<f32> = (0..n).map(|_| rng.random()).collect();
        (d_slice, gp_slice) = critic_update(
            &mut state.slice,
            &mut state.opt_slice,
            &real,
            &fake,
            &batch,
            &hole,
            &eps,
            &weights,
            "slice",
        )?;
    }

    // Critic parameters enter as constants, so only the generator moves.
    let wp = state.whole.store().bind(false);
    let sp = state.slice.store().bind(false);
    let (w_score, _, _) = state.whole.score_faces(&wp, &fake_var, &batch.masks, Mode::Train)?;
    let (s_score, _, _) = state.slice.score_faces(&sp, &fake_var, &batch.masks, Mode::Train)?;
    let adv = generator_adversarial_loss(&w_score, &s_score);
    let l1 = masked_l1(&raw, &batch.truth, &hole, config.l1_reduction)?;
    let components = LossComponents {
        g_adv: adv.value().item() as f64,
        g_l1: l1.value().item() as f64,
        d_whole,
        d_slice,
        gp_whole,
        gp_slice,
    };
    total_objective(&components, &weights)?;
    let total = generator_objective(&adv, &l1, &weights);
    let grads = finite_grads(&g_params, &total, "g_adv")?;
    drop(g_params);
    state.opt_generator.step(state.generator.store_mut(), &grads);
    state.generator.apply_updates(g_updates);
    state.step += 1;

    Ok(StepRecord {
        step: state.step,
        g_adv: components.g_adv,
        g_l1: components.g_l1,
        d_whole,
        d_slice,
        gp_whole,
        gp_slice,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Randomness for generator step `step` (1-based): its own stream of `seed`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Sample indices for a step: a continuous walk through per-epoch
/// permutations, so any step can be reconstructed without replay.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, len: usize) -> Vec<usize> {
    let start = (step - 1) * batch_size as u64;
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|i| {
            let pos = start + i;
            let epoch = pos / len as u64;
            if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(u64::MAX - epoch);
                let mut perm: Vec<usize> = (0..len).collect();
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("set above").1[(pos % len as u64) as usize]
        })
        .collect()
}

pub const LOG_CSV: &str = "loss.csv";
pub const LOG_JSONL: &str = "loss.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step-{step:06}.ckpt"))
}

/// Appends step records to the CSV and JSON-lines logs.
pub struct LossLog {
    csv: csv::Writer<File>,
    jsonl: File,
    paths: (PathBuf, PathBuf),
}

impl LossLog {
    /// Opens the logs in `dir`, keeping only records up to `keep_through`
    /// (all earlier records of a resumed run).
    pub fn open(dir: &Path, keep_through: u64) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(LOG_CSV);
        let json_path = dir.join(LOG_JSONL);
        let kept: Vec<StepRecord> = read_log(&json_path)
            .unwrap_or_default()
            .into_iter()
            .filter(|r| r.step <= keep_through)
            .collect();
        let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        let jsonl = File::create(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let mut log = Self {
            csv: csv::Writer::from_writer(file),
            jsonl,
            paths: (csv_path, json_path),
        };
        if kept.is_empty() {
            log.csv
                .write_record(["step", "g_adv", "g_l1", "d_whole", "d_slice", "gp_whole", "gp_slice", "wall_ms"])
                .map_err(|e| Error::io(&log.paths.0, e.into()))?;
            log.csv.flush().map_err(|e| Error::io(&log.paths.0, e))?;
        }
        for r in &kept {
            log.append(r)?;
        }
        Ok(log)
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        self.csv.serialize(r).map_err(|e| Error::io(&self.paths.0, e.into()))?;
        self.csv.flush().map_err(|e| Error::io(&self.paths.0, e))?;
        let line = serde_json::to_string(r).expect("record serialises");
        writeln!(self.jsonl, "{line}").map_err(|e| Error::io(&self.paths.1, e))
    }
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Background checkpoint writer behind a one-slot channel: the training
/// thread blocks only if the previous checkpoint is still being written.
struct CheckpointWriter {
    tx: Option<mpsc::SyncSender<(PathBuf, Checkpoint)>>,
    done: mpsc::Receiver<Result<PathBuf>>,
    handle: Option<JoinHandle<()>>,
}

impl CheckpointWriter {
    fn spawn() -> Self {
        let (tx, rx) = mpsc::sync_channel::<(PathBuf, Checkpoint)>(1);
        let (done_tx, done) = mpsc::channel();
        let handle = std::thread::spawn(move || {
            for (path, ckpt) in rx {
                let r = ckpt.save(&path).map(|_| path);
                if done_tx.send(r).is_err() {
                    break;
                }
            }
        });
        Self {
            tx: Some(tx),
            done,
            handle: Some(handle),
        }
    }

    fn submit(&mut self, path: PathBuf, ckpt: Checkpoint) -> Result<()> {
        self.tx
            .as_ref()
            .expect("writer open")
            .send((path.clone(), ckpt))
            .map_err(|_| Error::Checkpoint(format!("checkpoint writer stopped before {}", path.display())))
    }

    /// Paths written so far; the first failure is returned as an error.
    fn drain(&mut self, written: &mut Vec<PathBuf>) -> Result<()> {
        while let Ok(r) = self.done.try_recv() {
            written.push(r?);
        }
        Ok(())
    }

    fn finish(mut self, written: &mut Vec<PathBuf>) -> Result<()> {
        drop(self.tx.take());
        if let Some(h) = self.handle.take() {
            h.join().map_err(|_| Error::Checkpoint("checkpoint writer panicked".into()))?;
        }
        self.drain(written)
    }
}

pub struct TrainReport {
    pub state: TrainState,
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// A failed run keeps everything trained so far in memory; `report` is
/// `None` when the run failed before any state existed.
pub struct TrainFailure {
    pub error: Error,
    pub report: Option<TrainReport>,
}

impl std::fmt::Debug for TrainFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let step = self.report.as_ref().map(|r| r.state.step);
        write!(f, "TrainFailure({}, step {step:?})", self.error)
    }
}

/// Trains until `config.max_steps` generator steps, writing logs and
/// checkpoints under `out_dir`. `resume` continues from a checkpoint.
pub fn train(
    config: &TrainConfig,
    dataset: &[TrainingSample],
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> std::result::Result<TrainReport, Box<TrainFailure>> {
    let setup = || -> Result<(TrainState, LossLog)> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("training dataset is empty".into()));
        }
        if let Some(bad) = dataset.iter().find(|s| s.face_size() != config.face_size) {
            return Err(Error::Validation(format!(
                "sample {} has face size {}, configured {}",
                bad.image_id,
                bad.face_size(),
                config.face_size
            )));
        }
        let state = match resume {
            Some(c) => TrainState::from_checkpoint(c, config)?,
            None => TrainState::new(config)?,
        };
        let log = LossLog::open(out_dir, state.step)?;
        Ok((state, log))
    };
    let (state, mut log) = setup().map_err(|error| Box::new(TrainFailure { error, report: None }))?;
    let mut report = TrainReport {
        state,
        records: Vec::new(),
        checkpoints: Vec::new(),
    };
    let mut writer = CheckpointWriter::spawn();
    let result = run_loop(config, dataset, out_dir, resume.is_none(), &mut report, &mut log, &mut writer);
    let finished = writer.finish(&mut report.checkpoints);
    match result.and(finished) {
        Ok(()) => Ok(report),
        Err(error) => Err(Box::new(TrainFailure {
            error,
            report: Some(report),
        })),
    }
}

fn run_loop(
    config: &TrainConfig,
    dataset: &[TrainingSample],
    out_dir: &Path,
    fresh: bool,
    report: &mut TrainReport,
    log: &mut LossLog,
    writer: &mut CheckpointWriter,
) -> Result<()> {
    let state = &mut report.state;
    if fresh {
        writer.submit(checkpoint_path(out_dir, state.step), state.to_checkpoint(config))?;
    }
    while state.step < config.max_steps {
        let next = state.step + 1;
        let idx = batch_indices(config.seed, next, config.batch_size, dataset.len());
        let batch: Vec<&TrainingSample> = idx.iter().map(|&i| &dataset[i]).collect();
        let mut rng = step_rng(config.seed, next);
        let record = train_step(state, &batch, config, &mut rng)?;
        log.append(&record)?;
        report.records.push(record);
        if state.step.is_multiple_of(config.checkpoint_interval) || state.step == config.max_steps {
            writer.submit(checkpoint_path(out_dir, state.step), state.to_checkpoint(config))?;
        }
        writer.drain(&mut report.checkpoints)?;
    }
    Ok(())
}

/// Hole-region mean absolute error of the evaluation-mode generator, per
/// hole pixel and channel, on `[0, 1]` values.
pub fn hole_l1(generator: &Generator<f32>, samples: &[TrainingSample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in samples {
        let batch = Batch::new(&[s])?;
        let out = generator.generate(&batch.damaged, &batch.masks)?;
        let hole = expand_mask_rgb(&batch.masks);
        for ((o, t), m) in out.data().iter().zip(batch.truth.data().iter()).zip(hole.data().iter()) {
            if *m == 0.0 {
                sum += (o - t).abs() as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Validation("samples contain no hole pixels".into()));
    }
    Ok(sum / count as f64)
}
