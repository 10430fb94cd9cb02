//! Pretraining, fine-tuning and evaluation loops.
//!
//! Every batch is a pure function of `(config, corpus, run seed, step)`, so
//! batches can be prepared on a worker thread without changing results.
//!
//! Regression targets are root-centered 3D joints in the camera frame of
//! the sample's view, divided by the scale of the sample's 2D normalization
//! box. Metrics multiply predictions back into millimeters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use ndarray::{s, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::config::TrainConfig;
use crate::corruption::{add_noise, schedule_corruption, CorruptionConfig};
use crate::metrics::{ClipMetrics, EvalReport};
use crate::model::{is_pose_stream, save_checkpoint, Model, Tokenizer};
use crate::nn::{AdamW, AdamWConfig, Graph, Tensor};
use crate::objectives::{contrastive_loss, loss_3d_with_grad, loss_velocity_with_grad, total_pretrain_loss};
use crate::rng::{derive, rng_from};
use crate::skeleton::{normalize_to_pixels, project_orthographic, root_center, to_camera_frame, PixelBox, PoseSeq2D, PoseSeq3D, View, BOX_MARGIN};
use crate::synth::{sample_contrastive_batch, Anchor, Corpus, LabeledClip};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.apck";
pub const TRAIN_LOG_FILE: &str = "train.log";
pub const TIMING_LOG_FILE: &str = "timing.log";
pub const CONFIG_FILE: &str = "config.toml";

/// Worker threads allowed by `ACTIONPOSE_THREADS` (default: all cores).
pub fn worker_threads() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var("ACTIONPOSE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0).unwrap_or(cores)
}

/// One camera view of a clip window, ready for the network.
#[derive(Debug, Clone)]
pub struct ViewSample {
    /// Normalized 2D input.
    pub input: PoseSeq2D,
    /// Root-centered camera-frame 3D joints in normalized units.
    pub target: Array3<f64>,
    /// Millimeters per normalized unit.
    pub scale: f64,
}

pub fn view_sample(clip: &LabeledClip, view: View, start: usize, len: usize) -> Result<ViewSample> {
    if start + len > clip.duration() {
        return Err(Error::invalid("window", format!("frames {start}..{} exceed clip {} of {} frames", start + len, clip.id, clip.duration())));
    }
    let m = &clip.motion;
    let window = PoseSeq3D::new(m.data.slice(s![start..start + len, .., ..]).to_owned(), m.layout.clone(), m.fps)?;
    let proj = project_orthographic(&window, view)?;
    let bbox = PixelBox::enclosing(&proj, BOX_MARGIN)?;
    let input = normalize_to_pixels(&proj, bbox)?;
    let target = root_center(&to_camera_frame(&window, view)).data / bbox.scale;
    Ok(ViewSample { input, target, scale: bbox.scale })
}

/// Stacks `T x J x C` arrays into a `B x T x J x C` tensor.
fn stack<F: crate::nn::Scalar>(items: &[&Array3<f64>]) -> Tensor<F> {
    let (t, j, c) = items[0].dim();
    let data = items.iter().flat_map(|a| a.iter().map(|&v| F::c(v))).collect();
    Tensor::new(&[items.len(), t, j, c], data)
}

/// Everything one pretraining step needs.
#[derive(Debug, Clone)]
pub struct PretrainBatch {
    pub step: usize,
    pub seed: u64,
    pub anchors: Vec<Anchor>,
    pub input: Tensor<f32>,
    /// `B x T x J x 3`, normalized units.
    pub target: Vec<f64>,
    /// Distinct token sequences of every candidate text.
    pub texts: Vec<Vec<usize>>,
    /// For each anchor and candidate, the row of `texts`.
    pub candidate_rows: Vec<usize>,
    pub targets: Vec<Vec<f64>>,
}

pub fn batch_seed(run_seed: u64, step: usize) -> u64 {
    derive(run_seed, step as u64)
}

fn window_start(clip: &LabeledClip, len: usize, seed: u64) -> usize {
    let slack = clip.duration() - len;
    if slack == 0 {
        0
    } else {
        rng_from(seed).random_range(0..=slack)
    }
}

pub fn prepare_pretrain_batch(config: &TrainConfig, corpus: &Corpus, tokenizer: &Tokenizer, step: usize) -> Result<PretrainBatch> {
    let seed = batch_seed(config.seed, step);
    let cb = sample_contrastive_batch(corpus, config.batch_size, config.loss.k, config.loss.epsilon_smooth, derive(seed, 0))?;
    let t = config.seq_len;
    let mut inputs = Vec::with_capacity(cb.anchors.len());
    let mut targets3d = Vec::with_capacity(cb.anchors.len());
    for (i, a) in cb.anchors.iter().enumerate() {
        let clip = &corpus.clips[a.clip];
        let start = window_start(clip, t, derive(derive(seed, 1), i as u64));
        let vs = view_sample(clip, a.view, start, t)?;
        let (corrupted, _) = schedule_corruption(&vs.input, derive(derive(seed, 2), i as u64), &config.corruption)?;
        inputs.push(corrupted.data);
        targets3d.push(vs.target);
    }
    let mut rows: BTreeMap<&str, usize> = BTreeMap::new();
    for i in 0..cb.anchors.len() {
        for text in cb.candidates(i) {
            rows.insert(text, 0);
        }
    }
    let mut texts = Vec::with_capacity(rows.len());
    for (r, (text, row)) in rows.iter_mut().enumerate() {
        *row = r;
        texts.push(tokenizer.tokenize(text)?);
    }
    let candidate_rows = (0..cb.anchors.len()).flat_map(|i| cb.candidates(i).map(|t| rows[t]).collect::<Vec<_>>()).collect();
    Ok(PretrainBatch {
        step,
        seed,
        input: stack(&inputs.iter().collect::<Vec<_>>()),
        target: targets3d.iter().flat_map(|a| a.iter().copied()).collect(),
        texts,
        candidate_rows,
        targets: cb.targets.clone(),
        anchors: cb.anchors,
    })
}

/// Loss values of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// `None` when the contrastive term was not evaluated.
    pub l_con: Option<f64>,
    pub l_3d: f64,
    pub l_v: f64,
    pub total: f64,
    pub batch_seed: u64,
    /// A probability was clamped before its logarithm.
    pub floored: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_total: f64,
    /// Training-set MPJPE after the epoch (fine-tuning only).
    pub mpjpe_mm: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Training-set MPJPE before the first step (fine-tuning only).
    pub initial_mpjpe_mm: Option<f64>,
    /// Number of contrastive-loss evaluations.
    pub con_evaluations: usize,
}

impl TrainLog {
    pub fn step_line(r: &StepRecord) -> String {
        let con = r.l_con.map_or("-".to_string(), |v| format!("{v:?}"));
        format!(
            "step={} l_con={con} l_3d={:?} l_v={:?} total={:?} batch_seed={:#018x}{}",
            r.step,
            r.l_3d,
            r.l_v,
            r.total,
            r.batch_seed,
            if r.floored { " floored" } else { "" }
        )
    }

    pub fn epoch_line(e: &EpochRecord) -> String {
        let m = e.mpjpe_mm.map_or(String::new(), |v| format!(" mpjpe_mm={v:?}"));
        format!("epoch={} mean_total={:?}{m}", e.epoch, e.mean_total)
    }

    /// Mean total loss of the last `n` steps.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.steps[self.steps.len().saturating_sub(n)..];
        tail.iter().map(|r| r.total).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// Append-only line writers for `train.log` and `timing.log`.
struct Logs {
    train: Option<fs::File>,
    timing: Option<fs::File>,
    dir: Option<PathBuf>,
    started: Instant,
}

impl Logs {
    fn open(dir: Option<&Path>, stage: &str, config: &TrainConfig) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Logs { train: None, timing: None, dir: None, started: Instant::now() });
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, config.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            fs::File::create(&p).map_err(|e| Error::io(&p, e))
        };
        let mut logs = Logs { train: Some(create(TRAIN_LOG_FILE)?), timing: Some(create(TIMING_LOG_FILE)?), dir: Some(dir.to_path_buf()), started: Instant::now() };
        logs.train(&format!("# {stage} seed={} profile={}", config.seed, config.profile))?;
        let unix = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs());
        logs.timing(&format!("# {stage} started unix_time={unix}"))?;
        Ok(logs)
    }

    fn write(file: &mut Option<fs::File>, dir: &Option<PathBuf>, name: &str, line: &str) -> Result<()> {
        use std::io::Write;
        if let Some(f) = file {
            writeln!(f, "{line}").map_err(|e| Error::io(dir.as_ref().expect("dir").join(name), e))?;
        }
        Ok(())
    }

    fn train(&mut self, line: &str) -> Result<()> {
        Self::write(&mut self.train, &self.dir, TRAIN_LOG_FILE, line)
    }

    fn timing(&mut self, line: &str) -> Result<()> {
        Self::write(&mut self.timing, &self.dir, TIMING_LOG_FILE, line)
    }

    fn step_time(&mut self, step: usize) -> Result<()> {
        let secs = self.started.elapsed().as_secs_f64();
        self.timing(&format!("step={step} elapsed_s={secs:.3}"))
    }

    fn checkpoint(&self, model: &Model<f32>) -> Result<()> {
        match &self.dir {
            Some(d) => save_checkpoint(&d.join(CHECKPOINT_FILE), model),
            None => Ok(()),
        }
    }
}

/// Trained model and its log.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: Model<f32>,
    pub log: TrainLog,
}

fn optimizer(config: &TrainConfig, model: &Model<f32>) -> AdamW {
    AdamW::new(AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, ..AdamWConfig::default() }, &model.params)
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data.iter().map(|&v| v as f64).collect()
}

fn to_f32(shape: &[usize], v: &[f64]) -> Tensor<f32> {
    Tensor::new(shape, v.iter().map(|&x| x as f32).collect())
}

/// Runs one pretraining step on `batch`; the model is updated only when the
/// loss is finite.
pub fn pretrain_step(config: &TrainConfig, model: &mut Model<f32>, opt: &mut AdamW, batch: &PretrainBatch) -> Result<StepRecord> {
    let lc = &config.loss;
    let b = batch.anchors.len();
    let (t, j) = (config.seq_len, model.config.joints);
    let mut g = Graph::training(derive(batch.seed, 3));
    let taps = model.pose_encode(&mut g, batch.input.clone())?;
    let pred = model.regress_3d(&mut g, taps.last);
    let hp = model.pool_pose(&mut g, taps.mid);
    let feats = model.text_encode(&mut g, &batch.texts)?;
    let hw_rows = model.pool_text(&mut g, feats);
    let hw = g.gather(hw_rows, &batch.candidate_rows);

    let d = model.config.align_dim;
    let con = contrastive_loss(&to_f64(g.value(hp)), &to_f64(g.value(hw)), &batch.targets, d, lc.tau, lc.gamma, lc.con_reduction)?;
    let pred_v = to_f64(g.value(pred));
    let (l3d, g3d) = loss_3d_with_grad(&pred_v, &batch.target, lc.recon_reduction)?;
    let (lv, gv) = loss_velocity_with_grad(&pred_v, &batch.target, (b, t, j), lc.recon_reduction)?;
    let total = total_pretrain_loss(con.loss, l3d, lv, lc);
    let record = StepRecord { step: batch.step, l_con: Some(con.loss), l_3d: l3d, l_v: lv, total, batch_seed: batch.seed, floored: con.floored };
    if !total.is_finite() {
        return Err(Error::NumericalAbort { step: batch.step, batch_seed: batch.seed });
    }
    let gpred: Vec<f64> = g3d.iter().zip(&gv).map(|(a, v)| lc.lambda_3d * a + lc.lambda_v * v).collect();
    let seeds = vec![
        (pred, to_f32(&g.value(pred).shape.clone(), &gpred)),
        (hp, to_f32(&g.value(hp).shape.clone(), &con.grad_h_p)),
        (hw, to_f32(&g.value(hw).shape.clone(), &con.grad_h_w)),
    ];
    g.backward(seeds);
    model.params.zero_grads();
    g.accumulate_param_grads(&mut model.params);
    if !model.params.grads_finite() {
        return Err(Error::NumericalAbort { step: batch.step, batch_seed: batch.seed });
    }
    opt.step(&mut model.params, |_| true);
    Ok(record)
}

/// Calls `consume` with the batch of every step in order, preparing up to
/// `prefetch` batches ahead on a worker thread.
fn for_each_batch<B: Send>(steps: usize, prefetch: usize, make: impl Fn(usize) -> Result<B> + Sync, mut consume: impl FnMut(B) -> Result<()>) -> Result<()> {
    if prefetch == 0 || worker_threads() < 2 {
        for step in 1..=steps {
            consume(make(step)?)?;
        }
        return Ok(());
    }
    std::thread::scope(|s| {
        let (tx, rx) = mpsc::sync_channel::<Result<B>>(prefetch);
        let make = &make;
        s.spawn(move || {
            for step in 1..=steps {
                let b = make(step);
                let stop = b.is_err();
                if tx.send(b).is_err() || stop {
                    break;
                }
            }
        });
        for b in rx.iter().take(steps) {
            consume(b?)?;
        }
        Ok(())
    })
}

fn check_vocab(model: &Model<f32>, tokenizer: &Tokenizer) -> Result<()> {
    if model.config.vocab_size != tokenizer.vocab_size() {
        return Err(Error::Config { key: "model.vocab_size".into(), reason: format!("{} does not match the tokenizer's {}", model.config.vocab_size, tokenizer.vocab_size()) });
    }
    Ok(())
}

/// Joint pretraining of both encoders. Writes a checkpoint after every
/// epoch and at the end when `out_dir` is given.
pub fn pretrain(config: &TrainConfig, corpus: &Corpus, init: Option<Model<f32>>, out_dir: Option<&Path>) -> Result<RunOutput> {
    config.validate()?;
    let tokenizer = Tokenizer::action_vocab();
    let mut model = match init {
        Some(m) => {
            Model::<f32>::new(config.model.clone(), 0)?.check_compatible(&m)?;
            m
        }
        None => Model::new(config.model.clone(), derive(config.seed, u64::MAX))?,
    };
    check_vocab(&model, &tokenizer)?;
    if let Some(c) = corpus.clips.iter().find(|c| c.duration() < config.seq_len) {
        return Err(Error::invalid("corpus", format!("clip {} has {} frames, fewer than train.seq_len {}", c.id, c.duration(), config.seq_len)));
    }
    let samples = 2 * corpus.clips.len();
    let steps_per_epoch = samples.div_ceil(config.batch_size).max(1);
    let steps = config.total_steps(samples);
    let mut opt = optimizer(config, &model);
    let mut logs = Logs::open(out_dir, "pretrain", config)?;
    let mut log = TrainLog::default();
    let mut epoch_sum = 0.0;
    let mut epoch_n = 0;
    let result = for_each_batch(
        steps,
        config.prefetch,
        |step| prepare_pretrain_batch(config, corpus, &tokenizer, step),
        |batch| {
            let rec = match pretrain_step(config, &mut model, &mut opt, &batch) {
                Err(e @ Error::NumericalAbort { .. }) => {
                    logs.train(&format!("abort step={} batch_seed={:#018x} non-finite loss", batch.step, batch.seed))?;
                    return Err(e);
                }
                other => other?,
            };
            log.con_evaluations += 1;
            logs.train(&TrainLog::step_line(&rec))?;
            logs.step_time(rec.step)?;
            epoch_sum += rec.total;
            epoch_n += 1;
            let step = rec.step;
            log.steps.push(rec);
            if step % steps_per_epoch == 0 || step == steps {
                let e = EpochRecord { epoch: step.div_ceil(steps_per_epoch), mean_total: epoch_sum / epoch_n as f64, mpjpe_mm: None };
                logs.train(&TrainLog::epoch_line(&e))?;
                log.epochs.push(e);
                epoch_sum = 0.0;
                epoch_n = 0;
                logs.checkpoint(&model)?;
            }
            Ok(())
        },
    );
    result?;
    Ok(RunOutput { model, log })
}

/// `(clip, view)` pairs used for fine-tuning: `finetune_clips` clips taken
/// round-robin over classes in corpus order, or every clip when zero.
pub fn finetune_samples(config: &TrainConfig, corpus: &Corpus) -> Vec<(usize, View)> {
    let n = if config.finetune_clips == 0 { corpus.clips.len() } else { config.finetune_clips.min(corpus.clips.len()) };
    let mut by_class: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, c) in corpus.clips.iter().enumerate() {
        by_class.entry(c.class).or_default().push(i);
    }
    let mut picked = Vec::with_capacity(n);
    for round in 0.. {
        if picked.len() == n {
            break;
        }
        for members in by_class.values() {
            if let Some(&i) = members.get(round) {
                if picked.len() < n {
                    picked.push(i);
                }
            }
        }
    }
    picked.sort_unstable();
    picked.into_iter().flat_map(|c| View::BOTH.map(|v| (c, v))).collect()
}

/// Training-set MPJPE over the given samples, first window of each.
fn samples_mpjpe(model: &Model<f32>, corpus: &Corpus, samples: &[(usize, View)], t: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0.0;
    for chunk in samples.chunks(16) {
        let vs = chunk.iter().map(|&(c, v)| view_sample(&corpus.clips[c], v, 0, t)).collect::<Result<Vec<_>>>()?;
        let input = stack(&vs.iter().map(|s| &s.input.data).collect::<Vec<_>>());
        let pred = model.predict(input)?;
        for (i, s) in vs.iter().enumerate() {
            let p = prediction_mm(&pred, i, s.scale);
            let gt = &s.target * s.scale;
            let e = crate::metrics::joint_errors(&p, &gt)?;
            sum += e.sum();
            n += e.len() as f64;
        }
    }
    Ok(sum / n.max(1.0))
}

/// Sample `i` of a `B x T x J x 3` prediction, root-centered, millimeters.
fn prediction_mm(pred: &Tensor<f32>, i: usize, scale: f64) -> Array3<f64> {
    let (t, j) = (pred.shape[1], pred.shape[2]);
    let per = t * j * 3;
    let mut a = Array3::from_shape_vec((t, j, 3), pred.data[i * per..(i + 1) * per].iter().map(|&v| v as f64 * scale).collect()).expect("shape");
    crate::skeleton::root_center_in_place(&mut a);
    a
}

/// Fine-tunes the pose encoder and regression head with the reconstruction
/// losses; every other parameter is left untouched.
pub fn finetune(config: &TrainConfig, model: Model<f32>, corpus: &Corpus, out_dir: Option<&Path>) -> Result<RunOutput> {
    config.validate()?;
    Model::<f32>::new(config.model.clone(), 0)?.check_compatible(&model)?;
    let mut model = model;
    let samples = finetune_samples(config, corpus);
    if samples.is_empty() {
        return Err(Error::invalid("corpus", "no clips to fine-tune on"));
    }
    let t = config.seq_len;
    let lc = &config.loss;
    let steps_per_epoch = samples.len().div_ceil(config.batch_size);
    let steps = config.total_steps(samples.len());
    let trainable: Vec<bool> = model.params.names().iter().map(|n| is_pose_stream(n)).collect();
    let mut opt = optimizer(config, &model);
    let mut logs = Logs::open(out_dir, "finetune", config)?;
    let mut log = TrainLog { initial_mpjpe_mm: Some(samples_mpjpe(&model, corpus, &samples, t)?), ..Default::default() };
    logs.train(&format!("initial mpjpe_mm={:?}", log.initial_mpjpe_mm.unwrap()))?;
    let mut order = samples.clone();
    let mut epoch_sum = 0.0;
    for step in 1..=steps {
        let epoch = (step - 1) / steps_per_epoch;
        let pos = (step - 1) % steps_per_epoch;
        if pos == 0 {
            order.clone_from(&samples);
            order.shuffle(&mut rng_from(derive(config.seed, epoch as u64)));
            epoch_sum = 0.0;
        }
        let seed = batch_seed(config.seed, step);
        let chunk = &order[pos * config.batch_size..((pos + 1) * config.batch_size).min(order.len())];
        let mut inputs = Vec::with_capacity(chunk.len());
        let mut target = Vec::new();
        for (i, &(c, v)) in chunk.iter().enumerate() {
            let clip = &corpus.clips[c];
            let vs = view_sample(clip, v, window_start(clip, t, derive(derive(seed, 1), i as u64)), t)?;
            let input = if config.finetune_noise > 0.0 { add_noise(&vs.input, config.finetune_noise, 0.0, derive(derive(seed, 2), i as u64))? } else { vs.input };
            inputs.push(input.data);
            target.extend(vs.target.iter().copied());
        }
        let mut g = Graph::training(derive(seed, 3));
        let taps = model.pose_encode(&mut g, stack(&inputs.iter().collect::<Vec<_>>()))?;
        let pred = model.regress_3d(&mut g, taps.last);
        let pred_v = to_f64(g.value(pred));
        let (l3d, g3d) = loss_3d_with_grad(&pred_v, &target, lc.recon_reduction)?;
        let (lv, gv) = loss_velocity_with_grad(&pred_v, &target, (chunk.len(), t, model.config.joints), lc.recon_reduction)?;
        let total = lc.lambda_3d * l3d + lc.lambda_v * lv;
        if !total.is_finite() {
            logs.train(&format!("abort step={step} batch_seed={seed:#018x} non-finite loss"))?;
            return Err(Error::NumericalAbort { step, batch_seed: seed });
        }
        let gpred: Vec<f64> = g3d.iter().zip(&gv).map(|(a, v)| lc.lambda_3d * a + lc.lambda_v * v).collect();
        let shape = g.value(pred).shape.clone();
        g.backward(vec![(pred, to_f32(&shape, &gpred))]);
        model.params.zero_grads();
        g.accumulate_param_grads(&mut model.params);
        if !model.params.grads_finite() {
            return Err(Error::NumericalAbort { step, batch_seed: seed });
        }
        opt.step(&mut model.params, |id| trainable[id]);
        let rec = StepRecord { step, l_con: None, l_3d: l3d, l_v: lv, total, batch_seed: seed, floored: false };
        logs.train(&TrainLog::step_line(&rec))?;
        logs.step_time(step)?;
        epoch_sum += total;
        log.steps.push(rec);
        if pos + 1 == steps_per_epoch || step == steps {
            let e = EpochRecord { epoch: epoch + 1, mean_total: epoch_sum / (pos + 1) as f64, mpjpe_mm: Some(samples_mpjpe(&model, corpus, &samples, t)?) };
            logs.train(&TrainLog::epoch_line(&e))?;
            log.epochs.push(e);
            logs.checkpoint(&model)?;
        }
    }
    Ok(RunOutput { model, log })
}

/// Inference-mode metrics over every clip and view. Clips are cut into
/// consecutive non-overlapping windows of `seq_len` frames; trailing frames
/// that do not fill a window are skipped.
pub fn evaluate(model: &Model<f32>, corpus: &Corpus, seq_len: usize) -> Result<EvalReport> {
    let mut per_clip = Vec::new();
    for clip in &corpus.clips {
        let windows = clip.duration() / seq_len;
        if windows == 0 {
            return Err(Error::invalid("corpus", format!("clip {} is shorter than {seq_len} frames", clip.id)));
        }
        for view in View::BOTH {
            let vs = (0..windows).map(|w| view_sample(clip, view, w * seq_len, seq_len)).collect::<Result<Vec<_>>>()?;
            let input = stack(&vs.iter().map(|s| &s.input.data).collect::<Vec<_>>());
            let pred = model.predict(input)?;
            let preds: Vec<Array3<f64>> = vs.iter().enumerate().map(|(i, s)| prediction_mm(&pred, i, s.scale)).collect();
            let gts: Vec<Array3<f64>> = vs.iter().map(|s| &s.target * s.scale).collect();
            let cat = |parts: &[Array3<f64>]| ndarray::concatenate(Axis(0), &parts.iter().map(|a| a.view()).collect::<Vec<_>>()).expect("same joint count");
            per_clip.push(ClipMetrics::compute(&clip.id, view.name(), &cat(&preds), &cat(&gts))?);
        }
    }
    Ok(EvalReport::from_clips(per_clip))
}

/// Writes `eval_report.txt` and `eval_report.kv` into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in [("eval_report.txt", report.to_text()), ("eval_report.kv", report.to_kv())] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Unit-norm pose embedding of every clip's first window.
pub fn embed_clips(model: &Model<f32>, corpus: &Corpus, seq_len: usize, view: View) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(corpus.clips.len());
    for chunk in corpus.clips.chunks(16) {
        let vs = chunk.iter().map(|c| view_sample(c, view, 0, seq_len)).collect::<Result<Vec<_>>>()?;
        let h = model.embed_pose(stack(&vs.iter().map(|s| &s.input.data).collect::<Vec<_>>()))?;
        out.extend(h.data.chunks_exact(model.config.align_dim).map(|r| r.iter().map(|&v| v as f64).collect()));
    }
    Ok(out)
}

/// Mean cosine similarity of embedding pairs from the same class and from
/// different classes.
pub fn class_cosine_means(embeddings: &[Vec<f64>], classes: &[String]) -> (f64, f64) {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let (a, b) = (&embeddings[i], &embeddings[j]);
            let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt());
            if classes[i] == classes[j] {
                intra += cos;
                ni += 1;
            } else {
                inter += cos;
                nx += 1;
            }
        }
    }
    (intra / ni.max(1) as f64, inter / nx.max(1) as f64)
}

/// Fraction of `(clip, view)` anchors whose positive label scores above
/// all `k` negatives drawn with `seed`. With `corruption`, anchor inputs go
/// through the pretraining corruption schedule (seeded from `seed`) as they
/// do during pretraining; otherwise they are clean.
pub fn retrieval_accuracy(model: &Model<f32>, corpus: &Corpus, seq_len: usize, k: usize, corruption: Option<&CorruptionConfig>, seed: u64) -> Result<f64> {
    let tokenizer = Tokenizer::action_vocab();
    let cb = sample_contrastive_batch(corpus, 2 * corpus.clips.len(), k, 0.0, derive(seed, 0))?;
    let pool = corpus.label_pool();
    let labels: Vec<&str> = pool.iter().map(|(_, l)| l.as_str()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let hw = model.embed_text(&tokenizer, &labels)?;
    let d = model.config.align_dim;
    let row = |text: &str| -> &[f32] {
        let r = labels.binary_search(&text).expect("label in pool");
        &hw.data[r * d..(r + 1) * d]
    };
    let mut hits = 0;
    for (ci, chunk) in cb.anchors.chunks(16).enumerate() {
        let mut inputs = Vec::with_capacity(chunk.len());
        for (i, a) in chunk.iter().enumerate() {
            let vs = view_sample(&corpus.clips[a.clip], a.view, 0, seq_len)?;
            inputs.push(match corruption {
                Some(c) => schedule_corruption(&vs.input, derive(derive(seed, 1), (ci * 16 + i) as u64), c)?.0.data,
                None => vs.input.data,
            });
        }
        let hp = model.embed_pose(stack(&inputs.iter().collect::<Vec<_>>()))?;
        for (i, h) in hp.data.chunks_exact(d).enumerate() {
            let a = ci * 16 + i;
            let score = |t: &str| row(t).iter().zip(h).map(|(x, y)| (*x as f64) * (*y as f64)).sum::<f64>();
            let pos = score(&cb.positives[a]);
            if cb.negatives[a].iter().all(|n| score(n) < pos) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / cb.anchors.len() as f64)
}

/// Human-readable summary of a run's step log.
pub fn summarize(log: &TrainLog) -> String {
    let mut s = String::new();
    if let (Some(first), Some(last)) = (log.steps.first(), log.steps.last()) {
        let _ = writeln!(s, "steps {}: total {:.5} -> {:.5}", log.steps.len(), first.total, last.total);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_corpus, CorpusSpec};

    fn micro_config() -> TrainConfig {
        let mut c = TrainConfig::tiny();
        c.model.c_f = 16;
        c.model.l1 = 1;
        c.model.l2 = 1;
        c.model.l3 = 1;
        c.model.heads = 2;
        c.model.align_dim = 8;
        c.model.t_max = 16;
        c.seq_len = 16;
        c.data.duration = 16;
        c.batch_size = 4;
        c.loss.k = 4;
        c.steps = 3;
        c.prefetch = 0;
        c
    }

    fn micro_corpus() -> Corpus {
        generate_corpus(&CorpusSpec::balanced(4, 2, 20, 5), 1).unwrap()
    }

    #[test]
    fn view_sample_targets_match_projection() {
        let corpus = micro_corpus();
        let vs = view_sample(&corpus.clips[0], View::Side, 2, 16).unwrap();
        assert_eq!(vs.input.data.dim(), (16, 17, 3));
        let bbox = vs.input.pixel_box.unwrap();
        // In-plane target coordinates are the normalized 2D input shifted by the root.
        for t in 0..16 {
            for j in 0..17 {
                for k in 0..2 {
                    let expect = vs.input.data[[t, j, k]] - vs.input.data[[t, 0, k]];
                    assert!((vs.target[[t, j, k]] - expect).abs() < 1e-9);
                }
            }
        }
        assert_eq!(vs.scale, bbox.scale);
        assert!(view_sample(&corpus.clips[0], View::Front, 10, 16).is_err());
    }

    #[test]
    fn batches_are_deterministic_and_deduplicate_text() {
        let cfg = micro_config();
        let corpus = micro_corpus();
        let tok = Tokenizer::action_vocab();
        let a = prepare_pretrain_batch(&cfg, &corpus, &tok, 1).unwrap();
        let b = prepare_pretrain_batch(&cfg, &corpus, &tok, 1).unwrap();
        assert_eq!(a.input, b.input);
        assert_eq!(a.candidate_rows, b.candidate_rows);
        assert_eq!(a.candidate_rows.len(), 4 * 5);
        assert!(a.texts.len() <= 4 * 3);
        let mut uniq = a.texts.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), a.texts.len());
        assert_ne!(prepare_pretrain_batch(&cfg, &corpus, &tok, 2).unwrap().seed, a.seed);
    }

    #[test]
    fn pretraining_is_deterministic_with_and_without_prefetch() {
        let corpus = micro_corpus();
        let mut cfg = micro_config();
        let a = pretrain(&cfg, &corpus, None, None).unwrap();
        cfg.prefetch = 2;
        let b = pretrain(&cfg, &corpus, None, None).unwrap();
        assert_eq!(a.log.steps, b.log.steps);
        assert_eq!(crate::model::checkpoint::to_bytes(&a.model), crate::model::checkpoint::to_bytes(&b.model));
    }

    #[test]
    fn alignment_only_step_updates_text_encoder() {
        let corpus = micro_corpus();
        let mut cfg = micro_config();
        cfg.loss.lambda_3d = 0.0;
        cfg.loss.lambda_v = 0.0;
        cfg.steps = 1;
        let init = Model::<f32>::new(cfg.model.clone(), derive(cfg.seed, u64::MAX)).unwrap();
        let out = pretrain(&cfg, &corpus, None, None).unwrap();
        let id = init.param_id("text.block0.attn.q.w");
        assert_ne!(init.params.value(id), out.model.params.value(id));
        assert_eq!(out.log.steps[0].total, out.log.steps[0].l_con.unwrap());
    }

    #[test]
    fn non_finite_loss_aborts_with_batch_seed() {
        let corpus = micro_corpus();
        let mut cfg = micro_config();
        cfg.lr = 1e30;
        let dir = tempfile::tempdir().unwrap();
        match pretrain(&cfg, &corpus, None, Some(dir.path())) {
            Err(Error::NumericalAbort { step, batch_seed }) => {
                assert!(step > 1 && step <= cfg.steps);
                assert_eq!(batch_seed, batch_seed_of(&cfg, step));
                let log = fs::read_to_string(dir.path().join(TRAIN_LOG_FILE)).unwrap();
                assert!(log.contains(&format!("{batch_seed:#018x}")));
            }
            other => panic!("expected abort, got ok={}", other.is_ok()),
        }
    }

    #[test]
    fn finetune_subset_is_stratified_by_class() {
        let corpus = micro_corpus();
        let mut cfg = micro_config();
        cfg.finetune_clips = 4;
        let s = finetune_samples(&cfg, &corpus);
        let clips: Vec<usize> = s.iter().step_by(2).map(|p| p.0).collect();
        assert_eq!(clips, vec![0, 2, 4, 6]);
        assert_eq!(s.len(), 8);
        cfg.finetune_clips = 0;
        assert_eq!(finetune_samples(&cfg, &corpus).len(), 2 * corpus.clips.len());
    }

    fn batch_seed_of(cfg: &TrainConfig, step: usize) -> u64 {
        batch_seed(cfg.seed, step)
    }

    #[test]
    fn finetuning_freezes_text_and_alignment_pooling() {
        let corpus = micro_corpus();
        let cfg = micro_config();
        let init = Model::<f32>::new(cfg.model.clone(), 1).unwrap();
        let out = finetune(&cfg, init.clone(), &corpus, None).unwrap();
        assert_eq!(out.log.con_evaluations, 0);
        assert!(out.log.steps.iter().all(|s| s.l_con.is_none()));
        for (id, name) in init.params.names().iter().enumerate() {
            let moved = init.params.value(id) != out.model.params.value(id);
            assert_eq!(moved, is_pose_stream(name), "{name}");
        }
    }

    #[test]
    fn finetune_rejects_incompatible_checkpoint() {
        let corpus = micro_corpus();
        let cfg = micro_config();
        let mut other = cfg.model.clone();
        other.l3 = 2;
        let m = Model::<f32>::new(other, 1).unwrap();
        match finetune(&cfg, m, &corpus, None) {
            Err(Error::IncompatibleCheckpoint(names)) => assert!(names.iter().any(|n| n.starts_with("text.block1"))),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_identity_is_zero() {
        let corpus = micro_corpus();
        let cfg = micro_config();
        let m = Model::<f32>::new(cfg.model.clone(), 2).unwrap();
        let a = evaluate(&m, &corpus, 16).unwrap();
        assert_eq!(a, evaluate(&m, &corpus, 16).unwrap());
        assert!(a.mpjpe_mm > 0.0);
        assert_eq!(a.num_clips(), 2 * corpus.clips.len());
        let vs = view_sample(&corpus.clips[0], View::Front, 0, 16).unwrap();
        let gt = &vs.target * vs.scale;
        let c = ClipMetrics::compute("x", "front", &gt, &gt).unwrap();
        assert_eq!(c.mpjpe_mm(), 0.0);
    }

    #[test]
    fn logs_and_checkpoints_are_written() {
        let corpus = micro_corpus();
        let cfg = micro_config();
        let dir = tempfile::tempdir().unwrap();
        let out = pretrain(&cfg, &corpus, None, Some(dir.path())).unwrap();
        let log = fs::read_to_string(dir.path().join(TRAIN_LOG_FILE)).unwrap();
        assert_eq!(log.lines().filter(|l| l.starts_with("step=")).count(), 3);
        assert!(dir.path().join(TIMING_LOG_FILE).exists());
        let saved = fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!(saved, crate::model::checkpoint::to_bytes(&out.model));
        let cfg_back = TrainConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(cfg_back, cfg);
    }
}
