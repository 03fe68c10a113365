//! Minibatch training: episode sampling, ablation transforms, SGD with
//! momentum on a step-decay schedule, JSON-lines logging, checkpointing and
//! deterministic resume.

use crate::encoder::{
    self, EncoderConfig, GroupKey, ParamNodes,
};
use crate::error::{HvError, Result};
use crate::hierarchy::{Corpus, CorpusOptions, DetectedBox};
use crate::losses::{
    self, LossWeights, ObjectPool,
};
use crate::seeding;
use crate::synth;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use tensor_core::{Graph, NodeId, ParamSet, TensorData};

/// Which training objective variant to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    None,
    /// Box labels drawn uniformly at random.
    RandomLabels,
    /// Box coordinates drawn at random (labels kept).
    RandomBoxes,
    RandomBoth,
    /// Per-box binary cross-entropy head added to the full objective.
    BceAdded,
    /// BCE head replaces the object triplet loss.
    BceReplacesObject,
    /// Object triplet loss alone.
    ObjectOnly,
    /// Two-level (frame + shot) baseline: object weight forced to zero.
    BaselineVivi,
}

fn d_n() -> usize {
    8
}
fn d_l() -> usize {
    2
}
fn d_k() -> usize {
    4
}
fn d_steps() -> usize {
    2000
}
fn d_ckpt_interval() -> usize {
    500
}
fn d_pred_steps() -> usize {
    1
}
fn d_stills_batch() -> usize {
    32
}
fn d_lr0() -> f64 {
    0.1
}
fn d_momentum() -> f64 {
    0.9
}
fn d_decay_steps() -> Vec<usize> {
    vec![1500, 1833]
}
fn d_decay_factor() -> f64 {
    0.1
}
fn d_score_threshold() -> f64 {
    0.05
}
fn d_clip_norm() -> Option<f64> {
    Some(1.0)
}
fn d_max_boxes() -> usize {
    5
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "d_lr0")]
    pub lr0: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_decay_steps")]
    pub decay_steps: Vec<usize>,
    #[serde(default = "d_decay_factor")]
    pub decay_factor: f64,
    /// Global gradient-norm ceiling; gradients are rescaled to this norm
    /// when they exceed it. The encoder has no normalization layers, so the
    /// unbounded bilinear critic can otherwise drive occasional loss spikes
    /// into divergence. `null` disables clipping.
    #[serde(default = "d_clip_norm")]
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Manifest path of the training corpus.
    pub corpus: PathBuf,
    /// Optional labeled-stills manifest for supervised cotraining.
    #[serde(default)]
    pub stills_corpus: Option<PathBuf>,
    /// Videos per batch (N).
    #[serde(default = "d_n")]
    pub videos_per_batch: usize,
    /// Shots per episode (L).
    #[serde(default = "d_l")]
    pub shots_per_episode: usize,
    /// Frames per shot (K).
    #[serde(default = "d_k")]
    pub frames_per_shot: usize,
    /// Shot positions predicted by the recurrent model (m); the first
    /// L - m shots form the conditioning prefix.
    #[serde(default = "d_pred_steps")]
    pub prediction_steps: usize,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub ablation: AblationMode,
    #[serde(default)]
    pub object_pool: ObjectPool,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub log: Option<PathBuf>,
    #[serde(default = "d_ckpt_interval")]
    pub checkpoint_interval: usize,
    /// Labeled stills sampled per step when cotraining.
    #[serde(default = "d_stills_batch")]
    pub stills_batch: usize,
    #[serde(default = "d_score_threshold")]
    pub score_threshold: f64,
    #[serde(default = "d_max_boxes")]
    pub max_boxes: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errors = Vec::new();
        if self.videos_per_batch < 2 {
            errors.push("videos_per_batch must be >= 2".into());
        }
        if self.shots_per_episode < 2 {
            errors.push("shots_per_episode must be >= 2".into());
        }
        if self.frames_per_shot == 0 {
            errors.push("frames_per_shot must be >= 1".into());
        }
        if self.prediction_steps == 0 || self.prediction_steps >= self.shots_per_episode {
            errors.push(format!(
                "prediction_steps must lie in [1, shots_per_episode-1], got {}",
                self.prediction_steps
            ));
        }
        if self.checkpoint_interval == 0 {
            errors.push("checkpoint_interval must be >= 1".into());
        }
        let ds = &self.optimizer.decay_steps;
        if !ds.windows(2).all(|w| w[0] < w[1]) {
            errors.push("optimizer.decay_steps must be strictly increasing".into());
        }
        if ds.iter().any(|&s| s >= self.steps.max(1)) {
            errors.push("optimizer.decay_steps must all be < steps".into());
        }
        if !(self.optimizer.lr0 > 0.0) {
            errors.push("optimizer.lr0 must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            errors.push("optimizer.momentum must lie in [0, 1)".into());
        }
        if !(self.optimizer.decay_factor > 0.0) {
            errors.push("optimizer.decay_factor must be > 0".into());
        }
        if let Some(c) = self.optimizer.clip_norm {
            if !(c > 0.0) {
                errors.push("optimizer.clip_norm must be > 0 when set".into());
            }
        }
        if let Err(mut e) = self.encoder.validate() {
            errors.append(&mut e);
        }
        if let Err(mut e) = self.weights.validate() {
            errors.append(&mut e);
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Learning rate after `step` optimizer updates:
/// lr0 * factor^(boundaries passed).
pub fn lr_at(step: usize, lr0: f64, decay_steps: &[usize], factor: f64) -> f64 {
    let passed = decay_steps.iter().filter(|&&b| step >= b).count();
    lr0 * factor.powi(passed as i32)
}

/// Rescale gradients so their global L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// One SGD-with-momentum update: v <- mu*v + g, w <- w - lr*v.
pub fn sgd_momentum_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Vec<f64>>,
    velocity: &mut ParamSet,
    lr: f64,
    mu: f64,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(HvError::NonFiniteTraining {
                what: format!("gradient of {}", name),
                step: 0,
            });
        }
    }
    for (name, w) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let v = velocity
            .get_mut(name)
            .ok_or_else(|| HvError::Other(format!("missing velocity for {}", name)))?;
        for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g) {
            *vi = mu * *vi + gi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

/// Per-step loss component record, written as one JSON line.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub shot: f64,
    pub frame: f64,
    pub object: f64,
    pub bce: f64,
    pub supervised: f64,
    pub frame_triplets: usize,
    pub frame_skipped: usize,
    pub object_triplets: usize,
    pub object_skipped: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub steps_run: usize,
    pub wall_time_s: f64,
    pub final_log: StepLog,
    pub checkpoint: PathBuf,
    pub checkpoint_digest: String,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    step: usize,
    seed: u64,
    config_digest: String,
}

/// Save parameters plus optimizer state (`opt.*` entries) and the JSON
/// sidecar; returns the checkpoint file digest.
pub fn save_checkpoint(
    path: &Path,
    params: &ParamSet,
    velocity: &ParamSet,
    step: usize,
    config: &TrainConfig,
) -> Result<String> {
    let mut all = params.clone();
    for (name, t) in velocity.iter() {
        all.insert(format!("opt.{}", name), t.clone());
    }
    all.save(path)?;
    let sidecar = Sidecar {
        step,
        seed: config.seed,
        config_digest: config.digest(),
    };
    let side_path = sidecar_path(path);
    std::fs::write(&side_path, serde_json::to_string_pretty(&sidecar)?)?;
    checkpoint_digest(path)
}

pub fn sidecar_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn checkpoint_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Split a checkpoint into parameters and `opt.*` velocity entries.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, ParamSet, usize)> {
    let all = ParamSet::load(path)?;
    let mut params = ParamSet::new();
    let mut velocity = ParamSet::new();
    for (name, t) in all.iter() {
        if let Some(stripped) = name.strip_prefix("opt.") {
            velocity.insert(stripped, t.clone());
        } else {
            params.insert(name, t.clone());
        }
    }
    let side = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(&side)?)?;
    Ok((params, velocity, sidecar.step))
}

/// Load model parameters only (the usual consumer path).
pub fn load_params(path: &Path) -> Result<ParamSet> {
    Ok(load_checkpoint(path)?.0)
}

/// All frames of a corpus held in memory for repeated sampling.
pub struct LoadedCorpus {
    pub corpus: Corpus,
    pub frames: Vec<Vec<TensorData>>,
}

impl LoadedCorpus {
    pub fn load(manifest: &Path, options: CorpusOptions) -> Result<LoadedCorpus> {
        let corpus = Corpus::load(manifest, options)?;
        let mut frames = Vec::with_capacity(corpus.len());
        for i in 0..corpus.len() {
            let mut reader = corpus.open_frames(i)?;
            let n = corpus.video(i).num_frames();
            let mut vids = Vec::with_capacity(n);
            for f in 0..n {
                vids.push(reader.read(f)?);
            }
            frames.push(vids);
        }
        Ok(LoadedCorpus { corpus, frames })
    }
}

pub(crate) struct Batch {
    /// One tensor per frame, ordered (video, shot, frame-within-shot).
    pub(crate) images: Vec<TensorData>,
    /// Boxes per batch frame, post ablation transform.
    pub(crate) boxes: Vec<Vec<DetectedBox>>,
}

fn sample_batch(
    data: &LoadedCorpus,
    cfg: &TrainConfig,
    step: usize,
) -> Result<Batch> {
    let n_videos = data.corpus.len();
    if n_videos == 0 {
        return Err(HvError::Other("training corpus is empty".into()));
    }
    let mut rng = seeding::stream(cfg.seed, "batch", step as u64);
    let mut images = Vec::new();
    let mut boxes = Vec::new();
    for _ in 0..cfg.videos_per_batch {
        let vi = rand::Rng::gen_range(&mut rng, 0..n_videos);
        let video = data.corpus.video(vi);
        let ep = crate::hierarchy::sample_episode(
            video,
            cfg.shots_per_episode,
            cfg.frames_per_shot,
            &mut rng,
        )?;
        for (si, &shot) in ep.shot_indices.iter().enumerate() {
            for &local in &ep.frame_indices[si] {
                let global = video.shots[shot][local];
                images.push(data.frames[vi][global].clone());
                boxes.push(video.boxes[global].clone());
            }
        }
    }
    // Ablation transforms on the sampled boxes, drawn from a dedicated
    // stream so toggling them never perturbs episode selection.
    let mut arng = seeding::stream(cfg.seed, "ablation", step as u64);
    let c = cfg.encoder.num_categories;
    match cfg.ablation {
        AblationMode::RandomLabels => {
            for b in &mut boxes {
                synth::randomize_label_list(b, c, &mut arng);
            }
        }
        AblationMode::RandomBoxes => {
            for b in &mut boxes {
                synth::randomize_box_list(b, &mut arng);
            }
        }
        AblationMode::RandomBoth => {
            for b in &mut boxes {
                synth::randomize_box_list(b, &mut arng);
                synth::randomize_label_list(b, c, &mut arng);
            }
        }
        _ => {}
    }
    Ok(Batch { images, boxes })
}

pub(crate) struct StepOutcome {
    pub(crate) loss: NodeId,
    pub(crate) log: StepLog,
}

pub(crate) fn forward_step(
    g: &mut Graph,
    pn: &ParamNodes,
    batch: &Batch,
    cfg: &TrainConfig,
    stills: Option<(&TensorData, &[usize])>,
) -> Result<StepOutcome> {
    let (n, l, k) = (
        cfg.videos_per_batch,
        cfg.shots_per_episode,
        cfg.frames_per_shot,
    );
    let ecfg = &cfg.encoder;
    let w = &cfg.weights;
    let refs: Vec<&TensorData> = batch.images.iter().collect();
    let patches = encoder::patchify(&refs, ecfg)?;
    let enc = encoder::encode_batch(g, pn, patches, ecfg)?;

    let mode = cfg.ablation;
    let use_shot_frame = mode != AblationMode::ObjectOnly;
    let use_object = !matches!(
        mode,
        AblationMode::BceReplacesObject | AblationMode::BaselineVivi
    );
    let use_bce = matches!(mode, AblationMode::BceAdded | AblationMode::BceReplacesObject);
    let omega = if mode == AblationMode::BaselineVivi {
        0.0
    } else {
        w.omega
    };

    let mut log = StepLog::default();
    let zero = g.scalar(0.0)?;

    // Frame triplet loss over normalized frame embeddings, labeled by shot.
    let mut l_frame = zero;
    if use_shot_frame {
        let emb = if ecfg.normalize_frame_embeddings {
            enc.frame_embed_norm
        } else {
            enc.frame_embed
        };
        let shot_ids: Vec<i64> = (0..n * l * k).map(|i| (i / k) as i64).collect();
        let term = losses::frame_loss(g, emb, &shot_ids, w.margin_frame)?;
        l_frame = term.node;
        log.frame_triplets = term.triplets;
        log.frame_skipped = term.skipped_pairs;
    }

    // Shot InfoNCE: aggregate unnormalized frame embeddings per shot, run
    // the predictor over the prefix, score predictions against the batch.
    let mut l_shot = zero;
    if use_shot_frame {
        let shot_reps = g.mean_groups(enc.frame_embed, k)?; // [n*l, d]
        let m = cfg.prediction_steps;
        let prefix_len = l - m;
        let slot_rows = |t: usize| -> Vec<usize> { (0..n).map(|v| v * l + t).collect() };
        let mut prefix = Vec::with_capacity(prefix_len);
        for t in 0..prefix_len {
            prefix.push(g.gather_rows(shot_reps, &slot_rows(t))?);
        }
        let preds = encoder::predict_rollout(g, pn, &prefix, m, ecfg.lstm_hidden)?;
        let critic_b = pn.id("critic.B")?;
        let mut slots = Vec::with_capacity(m);
        for (j, pred) in preds.into_iter().enumerate() {
            let target = g.gather_rows(shot_reps, &slot_rows(prefix_len + j))?;
            slots.push((pred, target));
        }
        l_shot = losses::shot_infonce(g, critic_b, &slots)?;
    }

    // Object embeddings from the shared grids.
    let mut boxed = Vec::new();
    for (fi, frame_boxes) in batch.boxes.iter().enumerate() {
        let key = GroupKey {
            video: fi / (l * k),
            shot: (fi / k) % l,
            frame: fi % k,
        };
        for b in frame_boxes {
            boxed.push((fi, key, *b));
        }
    }
    let set = encoder::gather_box_embeddings(g, pn, enc.grid, &boxed, ecfg)?;

    let mut l_object = zero;
    if use_object {
        if let Some(set) = &set {
            let term = losses::object_loss(g, set, w.margin_object, cfg.object_pool)?;
            l_object = term.node;
            log.object_triplets = term.triplets;
            log.object_skipped = term.skipped_pairs;
        }
    }

    let mut l_bce = zero;
    if use_bce {
        if let Some(set) = &set {
            let bw = pn.id("head.bce.w")?;
            let bb = pn.id("head.bce.b")?;
            let logits = g.matmul(set.node, bw)?;
            let logits = g.add(logits, bb)?;
            let labels: Vec<usize> = set.labels.iter().map(|&v| v as usize).collect();
            l_bce = losses::object_bce(g, logits, &labels)?;
        }
    }

    // Supervised cotraining on a labeled-stills batch.
    let mut l_sup = zero;
    if let Some((still_patches, labels)) = stills {
        let senc = encoder::encode_batch(g, pn, still_patches.clone(), ecfg)?;
        let sw = pn.id("head.sup.w")?;
        let sb = pn.id("head.sup.b")?;
        let logits = g.matmul(senc.frame_embed, sw)?;
        let logits = g.add(logits, sb)?;
        l_sup = losses::supervised_ce(g, logits, labels)?;
    }

    let mut total = g.scale(l_object, omega)?;
    let t = g.scale(l_shot, w.beta)?;
    total = g.add(total, l_frame)?;
    total = g.add(total, t)?;
    if use_bce {
        let t = g.scale(l_bce, w.bce_weight)?;
        total = g.add(total, t)?;
    }
    if stills.is_some() {
        let t = g.scale(l_sup, w.gamma)?;
        total = g.add(total, t)?;
    }

    log.shot = g.value(l_shot).item()?;
    log.frame = g.value(l_frame).item()?;
    log.object = g.value(l_object).item()?;
    log.bce = g.value(l_bce).item()?;
    log.supervised = g.value(l_sup).item()?;
    log.total = g.value(total).item()?;
    Ok(StepOutcome { loss: total, log })
}

fn sample_stills(
    data: &LoadedCorpus,
    cfg: &TrainConfig,
    step: usize,
) -> Result<(TensorData, Vec<usize>)> {
    let mut rng = seeding::stream(cfg.seed, "stills", step as u64);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..cfg.stills_batch {
        let vi = rand::Rng::gen_range(&mut rng, 0..data.corpus.len());
        let video = data.corpus.video(vi);
        let fi = rand::Rng::gen_range(&mut rng, 0..video.num_frames());
        let cat = video
            .frame_categories
            .as_ref()
            .map(|c| c[fi])
            .ok_or_else(|| {
                HvError::Other(format!(
                    "stills corpus video {} lacks frame_categories",
                    video.video_id
                ))
            })?;
        images.push(data.frames[vi][fi].clone());
        labels.push(cat);
    }
    let refs: Vec<&TensorData> = images.iter().collect();
    Ok((encoder::patchify(&refs, &cfg.encoder)?, labels))
}

/// Run training to completion (or resume from `resume`), writing logs and
/// checkpoints as configured.
pub fn train(cfg: &TrainConfig, resume: Option<&Path>) -> Result<RunReport> {
    if let Err(errors) = cfg.validate() {
        return Err(HvError::Config { errors });
    }
    let start_time = std::time::Instant::now();
    let options = CorpusOptions {
        score_threshold: cfg.score_threshold,
        max_boxes: cfg.max_boxes,
    };
    let data = LoadedCorpus::load(&cfg.corpus, options)?;
    let stills_data = match &cfg.stills_corpus {
        Some(p) => Some(LoadedCorpus::load(p, options)?),
        None => None,
    };
    let cotrain = stills_data.is_some() && cfg.weights.gamma > 0.0;

    let (mut params, mut velocity, start_step) = match resume {
        Some(path) => {
            let (p, v, s) = load_checkpoint(path)?;
            (p, v, s)
        }
        None => {
            let mut rng = seeding::stream(cfg.seed, "init", 0);
            let p = encoder::init_params(&cfg.encoder, &mut rng);
            let v = p.zeros_like();
            (p, v, 0)
        }
    };

    if let Some(dir) = cfg.checkpoint.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut log_file = match &cfg.log {
        Some(p) => {
            if let Some(dir) = p.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            Some(std::io::BufWriter::new(if start_step > 0 {
                std::fs::OpenOptions::new().append(true).create(true).open(p)?
            } else {
                std::fs::File::create(p)?
            }))
        }
        None => None,
    };

    let mut last_log = StepLog::default();
    let mut digest = save_checkpoint(&cfg.checkpoint, &params, &velocity, start_step, cfg)?;

    for step in start_step..cfg.steps {
        let batch = sample_batch(&data, cfg, step)?;
        let stills = match (&stills_data, cotrain) {
            (Some(sd), true) => Some(sample_stills(sd, cfg, step)?),
            _ => None,
        };
        let mut g = Graph::new();
        let pn = encoder::insert_params(&mut g, &params, true)?;
        let outcome = forward_step(
            &mut g,
            &pn,
            &batch,
            cfg,
            stills.as_ref().map(|(p, l)| (p, l.as_slice())),
        )
        .map_err(|e| match e {
            HvError::Tensor(tensor_core::TensorError::NonFinite { op }) => {
                HvError::NonFiniteTraining {
                    what: format!("forward op {}", op),
                    step: step as u64,
                }
            }
            other => other,
        })?;
        if !outcome.log.total.is_finite() {
            return Err(HvError::NonFiniteTraining {
                what: "total loss".into(),
                step: step as u64,
            });
        }
        g.backward(outcome.loss)?;
        // Gradients gathered in fixed name order.
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (name, id) in pn.iter() {
            if let Some(gr) = g.grad(id) {
                grads.insert(name.to_string(), gr.to_vec());
            }
        }
        if let Some(c) = cfg.optimizer.clip_norm {
            clip_grad_norm(&mut grads, c);
        }
        let lr = lr_at(
            step,
            cfg.optimizer.lr0,
            &cfg.optimizer.decay_steps,
            cfg.optimizer.decay_factor,
        );
        sgd_momentum_step(&mut params, &grads, &mut velocity, lr, cfg.optimizer.momentum)
            .map_err(|e| match e {
                HvError::NonFiniteTraining { what, .. } => HvError::NonFiniteTraining {
                    what,
                    step: step as u64,
                },
                other => other,
            })?;

        let mut log = outcome.log;
        log.step = step;
        log.lr = lr;
        if let Some(f) = &mut log_file {
            writeln!(f, "{}", serde_json::to_string(&log)?)?;
        }
        last_log = log;

        let done = step + 1 == cfg.steps;
        if done || (step + 1) % cfg.checkpoint_interval == 0 {
            digest = save_checkpoint(&cfg.checkpoint, &params, &velocity, step + 1, cfg)?;
        }
    }
    if let Some(f) = &mut log_file {
        f.flush()?;
    }

    Ok(RunReport {
        steps_run: cfg.steps.saturating_sub(start_step),
        wall_time_s: start_time.elapsed().as_secs_f64(),
        final_log: last_log,
        checkpoint: cfg.checkpoint.clone(),
        checkpoint_digest: digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_video, DetectorNoise, SceneSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_corpus(dir: &Path, n_videos: usize, seed: u64) {
        let spec = SceneSpec {
            image_size: (16, 16, 3),
            num_categories: 3,
            objects_range: (1, 2),
            shot_len_range: (4, 5),
            shots_per_video_range: (2, 3),
            ..SceneSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut videos = Vec::new();
        for i in 0..n_videos {
            let mut v = generate_video(&spec, &format!("v{:03}", i), &mut rng).unwrap();
            v = crate::synth::simulate_detector(&v, &DetectorNoise::none(), 3, &mut rng);
            videos.push(v);
        }
        crate::hierarchy::write_corpus(&videos, dir).unwrap();
    }

    fn tiny_config(dir: &Path, steps: usize) -> TrainConfig {
        TrainConfig {
            corpus: dir.join("manifest.jsonl"),
            stills_corpus: None,
            videos_per_batch: 2,
            shots_per_episode: 2,
            frames_per_shot: 2,
            prediction_steps: 1,
            encoder: EncoderConfig {
                image_size: (16, 16, 3),
                stride: 8,
                channels: 6,
                blocks: 1,
                embed_dim: 4,
                lstm_hidden: 4,
                num_categories: 3,
                ..EncoderConfig::default()
            },
            weights: LossWeights::default(),
            ablation: AblationMode::None,
            object_pool: ObjectPool::Batch,
            optimizer: OptimizerConfig {
                lr0: 0.01,
                momentum: 0.9,
                decay_steps: vec![],
                decay_factor: 0.1,
                clip_norm: d_clip_norm(),
            },
            steps,
            seed: 7,
            checkpoint: dir.join("ckpt.hvt"),
            log: Some(dir.join("log.jsonl")),
            checkpoint_interval: 4,
            stills_batch: 4,
            score_threshold: 0.05,
            max_boxes: 5,
        }
    }

    #[test]
    fn lr_schedule_matches_paper_values() {
        let b = [90_000, 110_000];
        assert!((lr_at(0, 0.8, &b, 0.1) - 0.8).abs() < 1e-15);
        assert!((lr_at(95_000, 0.8, &b, 0.1) - 0.08).abs() < 1e-15);
        assert!((lr_at(115_000, 0.8, &b, 0.1) - 0.008).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_hand_values() {
        let mut params = ParamSet::new();
        params.insert("w", TensorData::from_vec(vec![1.0]));
        let mut vel = params.zeros_like();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        sgd_momentum_step(&mut params, &grads, &mut vel, 0.1, 0.9).unwrap();
        assert!((params.get("w").unwrap().data()[0] - 0.9).abs() < 1e-15);
        assert!((vel.get("w").unwrap().data()[0] - 1.0).abs() < 1e-15);
        // Second constant-gradient step: v = 1.9, total delta = -0.1*(1+1.9).
        sgd_momentum_step(&mut params, &grads, &mut vel, 0.1, 0.9).unwrap();
        assert!((params.get("w").unwrap().data()[0] - (1.0 - 0.1 * 2.9)).abs() < 1e-12);
        // Zero gradients decay velocity geometrically.
        grads.insert("w".to_string(), vec![0.0]);
        sgd_momentum_step(&mut params, &grads, &mut vel, 0.1, 0.9).unwrap();
        assert!((vel.get("w").unwrap().data()[0] - 1.9 * 0.9).abs() < 1e-12);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut params = ParamSet::new();
        params.insert("w", TensorData::from_vec(vec![1.0]));
        let mut vel = params.zeros_like();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![f64::NAN]);
        assert!(sgd_momentum_step(&mut params, &grads, &mut vel, 0.1, 0.9).is_err());
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 3, 1);
        let mut cfg = tiny_config(dir.path(), 0);
        cfg.optimizer.decay_steps = vec![];
        let report = train(&cfg, None).unwrap();
        assert_eq!(report.steps_run, 0);
        assert!(cfg.checkpoint.exists());
        let (params, _, step) = load_checkpoint(&cfg.checkpoint).unwrap();
        assert_eq!(step, 0);
        assert!(params.contains("patch.w"));
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 4, 2);
        let cfg = tiny_config(dir.path(), 3);
        let a = train(&cfg, None).unwrap();
        let log_a = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        let b = train(&cfg, None).unwrap();
        let log_b = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        assert_eq!(a.checkpoint_digest, b.checkpoint_digest);
        assert_eq!(log_a, log_b);
    }

    #[test]
    fn logged_components_sum_to_total() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 4, 3);
        let mut cfg = tiny_config(dir.path(), 2);
        cfg.ablation = AblationMode::BceAdded;
        train(&cfg, None).unwrap();
        let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        for line in log.lines() {
            let rec: StepLog = serde_json::from_str(line).unwrap();
            let w = &cfg.weights;
            let expect =
                w.omega * rec.object + rec.frame + w.beta * rec.shot + w.bce_weight * rec.bce;
            assert!(
                (rec.total - expect).abs() < 1e-9,
                "step {}: total {} expected {}",
                rec.step,
                rec.total,
                expect
            );
        }
    }

    #[test]
    fn resume_continues_identically() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 4, 4);
        // Uninterrupted run of 6 steps.
        let mut cfg = tiny_config(dir.path(), 6);
        cfg.checkpoint = dir.path().join("full.hvt");
        cfg.log = Some(dir.path().join("full.jsonl"));
        let full = train(&cfg, None).unwrap();
        // 3 steps, then resume to 6.
        let mut cfg_a = tiny_config(dir.path(), 3);
        cfg_a.checkpoint = dir.path().join("part.hvt");
        cfg_a.log = Some(dir.path().join("part.jsonl"));
        cfg_a.checkpoint_interval = 3;
        train(&cfg_a, None).unwrap();
        let mut cfg_b = tiny_config(dir.path(), 6);
        cfg_b.checkpoint = dir.path().join("part.hvt");
        cfg_b.log = Some(dir.path().join("part.jsonl"));
        cfg_b.checkpoint_interval = 3;
        let resumed = train(&cfg_b, Some(&dir.path().join("part.hvt"))).unwrap();
        assert_eq!(resumed.steps_run, 3);
        // Final parameters identical to the uninterrupted run.
        let (pa, _, _) = load_checkpoint(&full.checkpoint).unwrap();
        let (pb, _, _) = load_checkpoint(&resumed.checkpoint).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn omega_zero_matches_baseline_mode() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 4, 5);
        let mut cfg = tiny_config(dir.path(), 2);
        cfg.ablation = AblationMode::BaselineVivi;
        cfg.checkpoint = dir.path().join("a.hvt");
        cfg.log = Some(dir.path().join("a.jsonl"));
        train(&cfg, None).unwrap();
        let log = std::fs::read_to_string(dir.path().join("a.jsonl")).unwrap();
        for line in log.lines() {
            let rec: StepLog = serde_json::from_str(line).unwrap();
            // The object component is still measured but carries no weight.
            assert!((rec.total - (rec.frame + cfg.weights.beta * rec.shot)).abs() < 1e-9);
        }
    }

    #[test]
    fn object_only_mode_trains_on_object_loss_alone() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 4, 6);
        let mut cfg = tiny_config(dir.path(), 2);
        cfg.ablation = AblationMode::ObjectOnly;
        train(&cfg, None).unwrap();
        let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        for line in log.lines() {
            let rec: StepLog = serde_json::from_str(line).unwrap();
            assert_eq!(rec.frame, 0.0);
            assert_eq!(rec.shot, 0.0);
            assert!((rec.total - cfg.weights.omega * rec.object).abs() < 1e-9);
        }
    }

    #[test]
    fn cotraining_adds_supervised_component() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 4, 8);
        let stills_dir = dir.path().join("stills");
        std::fs::create_dir_all(&stills_dir).unwrap();
        tiny_corpus(&stills_dir, 3, 9);
        let mut cfg = tiny_config(dir.path(), 2);
        cfg.stills_corpus = Some(stills_dir.join("manifest.jsonl"));
        cfg.weights.gamma = 1.0;
        train(&cfg, None).unwrap();
        let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        for line in log.lines() {
            let rec: StepLog = serde_json::from_str(line).unwrap();
            assert!(rec.supervised > 0.0);
            let w = &cfg.weights;
            let expect = w.omega * rec.object
                + rec.frame
                + w.beta * rec.shot
                + w.gamma * rec.supervised;
            assert!((rec.total - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn validate_rejects_bad_decay_steps() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path(), 10);
        cfg.optimizer.decay_steps = vec![5, 5];
        assert!(cfg.validate().is_err());
        cfg.optimizer.decay_steps = vec![5, 20];
        assert!(cfg.validate().is_err()); // 20 >= steps
        cfg.optimizer.decay_steps = vec![5, 8];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn clip_grad_norm_rescales_only_above_ceiling() {
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        grads.insert("a".into(), vec![3.0, 0.0]);
        grads.insert("b".into(), vec![0.0, 4.0]);
        // Norm 5 is within a ceiling of 5: untouched.
        let norm = clip_grad_norm(&mut grads, 5.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert_eq!(grads["a"], vec![3.0, 0.0]);
        // Ceiling 1: rescaled to unit global norm.
        clip_grad_norm(&mut grads, 1.0);
        assert!((grads["a"][0] - 0.6).abs() < 1e-12);
        assert!((grads["b"][1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ablation_transforms_change_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 4, 10);
        let cfg = tiny_config(dir.path(), 2);
        let a = train(&cfg, None).unwrap();
        let mut cfg2 = tiny_config(dir.path(), 2);
        cfg2.ablation = AblationMode::RandomBoth;
        let b = train(&cfg2, None).unwrap();
        assert_ne!(a.final_log.object, b.final_log.object);
    }

}
