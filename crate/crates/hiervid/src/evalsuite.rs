//! Quantitative diagnostics over frozen checkpoints: nearest-neighbor
//! category matching with Fisher significance, few-shot linear-probe
//! transfer on synthetic still tasks, and robustness deltas under image
//! perturbations. Everything here is read-only on model parameters.

use crate::encoder::{self, EncoderConfig, GroupKey};
use crate::error::{HvError, Result};
use crate::hierarchy::sample_episode;
use crate::seeding;
use crate::synth::{generate_video, SceneSpec};
use crate::trainer::LoadedCorpus;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tensor_core::{Graph, ParamSet, TensorData};

/// Frames encoded per graph when embedding large still sets.
const EMBED_CHUNK: usize = 64;

/// Encode still images to (normalized) frame embeddings.
pub fn embed_frames(
    params: &ParamSet,
    ecfg: &EncoderConfig,
    images: &[TensorData],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        let refs: Vec<&TensorData> = chunk.iter().collect();
        let patches = encoder::patchify(&refs, ecfg)?;
        let mut g = Graph::new();
        let pn = encoder::insert_params(&mut g, params, false)?;
        let enc = encoder::encode_batch(&mut g, &pn, patches, ecfg)?;
        let vals = g.value(enc.frame_embed_norm);
        let d = vals.shape()[1];
        for i in 0..chunk.len() {
            out.push(vals.data()[i * d..(i + 1) * d].to_vec());
        }
    }
    Ok(out)
}

/// Sample `batches` episode batches from a corpus and gather every box
/// embedding with its category label and source-video index. The video
/// index lets nearest-neighbor scans skip the near-duplicate renderings
/// of the same object in sibling frames of one video.
pub fn collect_box_embeddings(
    params: &ParamSet,
    ecfg: &EncoderConfig,
    data: &LoadedCorpus,
    batches: usize,
    videos_per_batch: usize,
    shots: usize,
    frames_per_shot: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<i64>)> {
    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    for b in 0..batches {
        let mut rng = seeding::stream(seed, "eval-batch", b as u64);
        let mut images = Vec::new();
        let mut boxes = Vec::new();
        for _ in 0..videos_per_batch {
            let vi = rng.gen_range(0..data.corpus.len());
            let video = data.corpus.video(vi);
            let ep = sample_episode(video, shots, frames_per_shot, &mut rng)?;
            for (si, &shot) in ep.shot_indices.iter().enumerate() {
                for &local in &ep.frame_indices[si] {
                    let global = video.shots[shot][local];
                    images.push(data.frames[vi][global].clone());
                    boxes.push(video.boxes[global].clone());
                }
            }
        }
        let refs: Vec<&TensorData> = images.iter().collect();
        let patches = encoder::patchify(&refs, ecfg)?;
        let mut g = Graph::new();
        let pn = encoder::insert_params(&mut g, params, false)?;
        let enc = encoder::encode_batch(&mut g, &pn, patches, ecfg)?;
        let mut boxed = Vec::new();
        for (fi, frame_boxes) in boxes.iter().enumerate() {
            let key = GroupKey {
                video: fi / (shots * frames_per_shot),
                shot: (fi / frames_per_shot) % shots,
                frame: fi % frames_per_shot,
            };
            for bx in frame_boxes {
                boxed.push((fi, key, *bx));
            }
        }
        if let Some(set) = encoder::gather_box_embeddings(&mut g, &pn, enc.grid, &boxed, ecfg)? {
            let vals = g.value(set.node);
            let d = vals.shape()[1];
            for i in 0..set.labels.len() {
                embeddings.push(vals.data()[i * d..(i + 1) * d].to_vec());
                labels.push(set.labels[i]);
            }
        }
    }
    Ok((embeddings, labels))
}

/// Fraction of embeddings whose Euclidean nearest neighbor (excluding
/// itself, ties toward the lowest index) shares their label. Brute-force
/// all-pairs scan.
pub fn nn_match_fraction(embeddings: &[Vec<f64>], labels: &[i64]) -> Result<f64> {
    let n = embeddings.len();
    if n < 2 || labels.len() != n {
        return Err(HvError::Other(format!(
            "nn_match_fraction needs >= 2 aligned boxes, got {} embeddings / {} labels",
            n,
            labels.len()
        )));
    }
    let mut matches = 0usize;
    for i in 0..n {
        let mut best = usize::MAX;
        let mut best_d = f64::INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            let d: f64 = embeddings[i]
                .iter()
                .zip(&embeddings[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        if labels[best] == labels[i] {
            matches += 1;
        }
    }
    Ok(matches as f64 / n as f64)
}

/// Expected match fraction if neighbors were chosen uniformly at random:
/// mean over boxes of (same-label count - 1) / (n - 1).
pub fn chance_level(labels: &[i64]) -> f64 {
    let n = labels.len();
    if n < 2 {
        return 0.0;
    }
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    labels
        .iter()
        .map(|l| (counts[l] - 1) as f64 / (n - 1) as f64)
        .sum::<f64>()
        / n as f64
}

/// Two-sided Fisher's exact test on a 2x2 table: sums hypergeometric
/// probabilities of all same-margin tables at most as likely as the
/// observed one (relative slack 1e-12).
pub fn fisher_exact_2x2(table: [[u64; 2]; 2]) -> Result<f64> {
    let [[a, b], [c, d]] = table;
    let (r1, r2) = (a + b, c + d);
    let (c1, c2) = (a + c, b + d);
    let n = r1 + r2;
    if n == 0 {
        return Err(HvError::Other(
            "fisher_exact_2x2: all margins are zero".into(),
        ));
    }
    let lnf = {
        let mut v = vec![0.0f64; (n + 1) as usize];
        for i in 2..=n as usize {
            v[i] = v[i - 1] + (i as f64).ln();
        }
        v
    };
    let ln_table = |x: u64| -> f64 {
        // P(X = x) for X hypergeometric with these margins.
        lnf[r1 as usize] + lnf[r2 as usize] + lnf[c1 as usize] + lnf[c2 as usize]
            - lnf[n as usize]
            - lnf[x as usize]
            - lnf[(r1 - x) as usize]
            - lnf[(c1 - x) as usize]
            - lnf[(r2 - (c1 - x)) as usize]
    };
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let p_obs = ln_table(a).exp();
    let mut p = 0.0;
    for x in lo..=hi {
        let px = ln_table(x).exp();
        if px <= p_obs * (1.0 + 1e-12) {
            p += px;
        }
    }
    Ok(p.min(1.0))
}

/// Downstream still-image classification tasks for the linear probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    /// Dominant-object category.
    Category,
    /// Number of objects in the scene.
    Count,
    /// Image quadrant holding the dominant object's center.
    Quadrant,
}

/// Labeled still images for one probe task.
pub struct TaskData {
    pub images: Vec<TensorData>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Generate `n` labeled stills by rendering independent scenes and keeping
/// each scene's first frame with ground-truth annotations.
pub fn generate_task(
    spec: &SceneSpec,
    task: ProbeTask,
    n: usize,
    seed: u64,
    tag: &str,
) -> Result<TaskData> {
    let mut rng = seeding::stream(seed, tag, 0);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let num_classes = match task {
        ProbeTask::Category => spec.num_categories,
        ProbeTask::Count => spec.objects_range.1 - spec.objects_range.0 + 1,
        ProbeTask::Quadrant => 4,
    };
    for i in 0..n {
        let video = generate_video(spec, &format!("{}_{:05}", tag, i), &mut rng)?;
        let frame = video
            .frames()
            .next()
            .ok_or_else(|| HvError::Other("generated video has no frames".into()))?;
        let label = match task {
            ProbeTask::Category => frame.frame_category.ok_or_else(|| {
                HvError::Other("generated frame lacks a category".into())
            })?,
            ProbeTask::Count => frame.boxes.len() - spec.objects_range.0,
            ProbeTask::Quadrant => {
                let largest = frame
                    .boxes
                    .iter()
                    .max_by(|x, y| {
                        x.bbox
                            .area()
                            .partial_cmp(&y.bbox.area())
                            .unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .ok_or_else(|| HvError::Other("frame has no boxes".into()))?;
                let (cx, cy) = largest.bbox.center();
                usize::from(cy >= 0.5) * 2 + usize::from(cx >= 0.5)
            }
        };
        if label >= num_classes {
            return Err(HvError::Other(format!(
                "task label {} out of range {}",
                label, num_classes
            )));
        }
        images.push(frame.image.clone());
        labels.push(label);
    }
    Ok(TaskData {
        images,
        labels,
        num_classes,
    })
}

/// Affine+softmax head fitted by full-batch gradient descent.
#[derive(Clone, Debug)]
pub struct ProbeHead {
    /// Row-major [d, classes].
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub dim: usize,
    pub classes: usize,
}

impl ProbeHead {
    /// Class scores for one embedding.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for (i, &xi) in x.iter().enumerate() {
            for c in 0..self.classes {
                out[c] += xi * self.w[i * self.classes + c];
            }
        }
        out
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        let mut best = 0;
        for (c, &v) in l.iter().enumerate() {
            if v > l[best] {
                best = c;
            }
        }
        best
    }
}

/// Train the softmax head with full-batch GD; lr decays by 10x every
/// `decay_every` steps.
pub fn train_probe_head(
    x: &[Vec<f64>],
    y: &[usize],
    classes: usize,
    lr0: f64,
    steps: usize,
    decay_every: usize,
) -> Result<ProbeHead> {
    let n = x.len();
    if n == 0 || y.len() != n {
        return Err(HvError::Other("probe head needs aligned samples".into()));
    }
    let dim = x[0].len();
    let mut head = ProbeHead {
        w: vec![0.0; dim * classes],
        b: vec![0.0; classes],
        dim,
        classes,
    };
    let mut probs = vec![0.0; classes];
    for step in 0..steps {
        let lr = lr0 * 0.1f64.powi((step / decay_every.max(1)) as i32);
        let mut gw = vec![0.0; dim * classes];
        let mut gb = vec![0.0; classes];
        for (xi, &yi) in x.iter().zip(y) {
            let logits = head.logits(xi);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, &l) in logits.iter().enumerate() {
                probs[c] = (l - m).exp();
                z += probs[c];
            }
            for c in 0..classes {
                let delta = probs[c] / z - if c == yi { 1.0 } else { 0.0 };
                gb[c] += delta;
                for (i, &v) in xi.iter().enumerate() {
                    gw[i * classes + c] += delta * v;
                }
            }
        }
        let scale = lr / n as f64;
        for (w, g) in head.w.iter_mut().zip(&gw) {
            *w -= scale * g;
        }
        for (b, g) in head.b.iter_mut().zip(&gb) {
            *b -= scale * g;
        }
    }
    Ok(head)
}

pub fn probe_accuracy(head: &ProbeHead, x: &[Vec<f64>], y: &[usize]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let correct = x
        .iter()
        .zip(y)
        .filter(|(xi, &yi)| head.predict(xi) == yi)
        .count();
    correct as f64 / x.len() as f64
}

fn d_lrs() -> Vec<f64> {
    vec![0.1, 0.01]
}
fn d_schedules() -> Vec<(usize, usize)> {
    vec![(1000, 300), (300, 100)]
}
fn d_n_train() -> usize {
    1000
}
fn d_n_val() -> usize {
    200
}
fn d_n_test() -> usize {
    2000
}

/// Sweep protocol for the probe: train on n_train - n_val samples per
/// (lr, schedule) candidate, select by validation accuracy (ties toward
/// lower lr, then the earlier schedule), retrain on all n_train.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeProtocol {
    #[serde(default = "d_lrs")]
    pub lrs: Vec<f64>,
    /// (total steps, decay interval) pairs.
    #[serde(default = "d_schedules")]
    pub schedules: Vec<(usize, usize)>,
    #[serde(default = "d_n_train")]
    pub n_train: usize,
    #[serde(default = "d_n_val")]
    pub n_val: usize,
    #[serde(default = "d_n_test")]
    pub n_test: usize,
}

impl Default for ProbeProtocol {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub chosen_lr: f64,
    pub chosen_schedule: (usize, usize),
    pub head_classes: usize,
}

/// Run the probe sweep on precomputed embeddings; returns test accuracy of
/// the retrained winner.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    classes: usize,
    protocol: &ProbeProtocol,
) -> Result<ProbeResult> {
    if train_x.len() < protocol.n_train || protocol.n_val >= protocol.n_train {
        return Err(HvError::Other(format!(
            "probe needs n_train={} samples (with n_val={} < n_train), got {}",
            protocol.n_train,
            protocol.n_val,
            train_x.len()
        )));
    }
    let fit = protocol.n_train - protocol.n_val;
    let (fit_x, rest) = train_x.split_at(fit);
    let (fit_y, rest_y) = train_y.split_at(fit);
    let val_x = &rest[..protocol.n_val];
    let val_y = &rest_y[..protocol.n_val];

    // Candidates ordered lr-ascending so first-strictly-better keeps the
    // lower learning rate on ties.
    let mut lrs = protocol.lrs.clone();
    lrs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best: Option<(f64, f64, (usize, usize))> = None; // (val_acc, lr, sched)
    for &lr in &lrs {
        for &(steps, decay) in &protocol.schedules {
            let head = train_probe_head(fit_x, fit_y, classes, lr, steps, decay)?;
            let acc = probe_accuracy(&head, val_x, val_y);
            if best.map_or(true, |(bacc, _, _)| acc > bacc) {
                best = Some((acc, lr, (steps, decay)));
            }
        }
    }
    let (val_acc, lr, sched) = best.expect("at least one candidate");
    let head = train_probe_head(
        &train_x[..protocol.n_train],
        &train_y[..protocol.n_train],
        classes,
        lr,
        sched.0,
        sched.1,
    )?;
    let accuracy = probe_accuracy(
        &head,
        &test_x[..protocol.n_test.min(test_x.len())],
        &test_y[..protocol.n_test.min(test_y.len())],
    );
    Ok(ProbeResult {
        accuracy,
        val_accuracy: val_acc,
        chosen_lr: lr,
        chosen_schedule: sched,
        head_classes: classes,
    })
}

/// End-to-end transfer evaluation for one checkpoint and task: embed the
/// task stills with the frozen encoder and run the probe sweep.
pub fn linear_probe_transfer(
    params: &ParamSet,
    ecfg: &EncoderConfig,
    train: &TaskData,
    test: &TaskData,
    protocol: &ProbeProtocol,
) -> Result<ProbeResult> {
    let train_x = embed_frames(params, ecfg, &train.images)?;
    let test_x = embed_frames(params, ecfg, &test.images)?;
    linear_probe(
        &train_x,
        &train.labels,
        &test_x,
        &test.labels,
        train.num_classes,
        protocol,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    /// Additive Gaussian pixel noise; level = sigma.
    GaussianNoise,
    /// k x k mean filter; level = k (odd).
    BoxBlur,
    /// Adds +delta to the first channel and -delta to the last.
    ChannelShift,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 3] = [
        PerturbKind::GaussianNoise,
        PerturbKind::BoxBlur,
        PerturbKind::ChannelShift,
    ];

    /// The three standard levels per kind (mild, middle, strong).
    pub fn standard_levels(self) -> [f64; 3] {
        match self {
            PerturbKind::GaussianNoise => [0.05, 0.1, 0.2],
            PerturbKind::BoxBlur => [3.0, 5.0, 7.0],
            PerturbKind::ChannelShift => [0.1, 0.2, 0.3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::GaussianNoise => "gaussian_noise",
            PerturbKind::BoxBlur => "box_blur",
            PerturbKind::ChannelShift => "channel_shift",
        }
    }
}

fn perturb_image<R: Rng>(
    img: &TensorData,
    kind: PerturbKind,
    level: f64,
    rng: &mut R,
) -> Result<TensorData> {
    let shape = img.shape().to_vec();
    if shape.len() != 3 {
        return Err(HvError::Other(format!(
            "perturb expects [H, W, C] images, got {:?}",
            shape
        )));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut out = img.clone();
    match kind {
        PerturbKind::GaussianNoise => {
            if level < 0.0 {
                return Err(HvError::Other("gaussian_noise level must be >= 0".into()));
            }
            if level > 0.0 {
                let n = Normal::new(0.0, level)
                    .map_err(|e| HvError::Other(format!("bad noise level: {}", e)))?;
                for v in out.data_mut() {
                    *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
                }
            }
        }
        PerturbKind::BoxBlur => {
            let k = level as usize;
            if level.fract() != 0.0 || k == 0 || k % 2 == 0 {
                return Err(HvError::Other(format!(
                    "box_blur level must be an odd positive integer, got {}",
                    level
                )));
            }
            if k > 1 {
                let r = k / 2;
                let src = img.data();
                let dst = out.data_mut();
                for y in 0..h {
                    for x in 0..w {
                        let y0 = y.saturating_sub(r);
                        let y1 = (y + r).min(h - 1);
                        let x0 = x.saturating_sub(r);
                        let x1 = (x + r).min(w - 1);
                        let count = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
                        for ch in 0..c {
                            let mut acc = 0.0;
                            for yy in y0..=y1 {
                                for xx in x0..=x1 {
                                    acc += src[(yy * w + xx) * c + ch];
                                }
                            }
                            dst[(y * w + x) * c + ch] = (acc / count).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
        PerturbKind::ChannelShift => {
            let dst = out.data_mut();
            for px in dst.chunks_mut(c) {
                px[0] = (px[0] + level).clamp(0.0, 1.0);
                px[c - 1] = (px[c - 1] - level).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Perturb a still set deterministically under `seed`.
pub fn perturb_dataset(
    images: &[TensorData],
    kind: PerturbKind,
    level: f64,
    seed: u64,
) -> Result<Vec<TensorData>> {
    let mut out = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let mut rng = seeding::stream(seed, "perturb", i as u64);
        out.push(perturb_image(img, kind, level, &mut rng)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub kind: String,
    pub level: f64,
    pub clean_accuracy: f64,
    pub perturbed_accuracy: f64,
    pub delta: f64,
}

/// Fit the probe once on clean data, then measure accuracy deltas on
/// perturbed copies of the test stills: delta = clean - perturbed.
pub fn robustness_delta(
    params: &ParamSet,
    ecfg: &EncoderConfig,
    train: &TaskData,
    test: &TaskData,
    perturbations: &[(PerturbKind, f64)],
    protocol: &ProbeProtocol,
    seed: u64,
) -> Result<Vec<RobustnessRow>> {
    let train_x = embed_frames(params, ecfg, &train.images)?;
    // Refit the winner from the sweep, then keep one head for all rows.
    let chosen = linear_probe(
        &train_x,
        &train.labels,
        &train_x,
        &train.labels,
        train.num_classes,
        protocol,
    )?;
    let head = train_probe_head(
        &train_x[..protocol.n_train],
        &train.labels[..protocol.n_train],
        train.num_classes,
        chosen.chosen_lr,
        chosen.chosen_schedule.0,
        chosen.chosen_schedule.1,
    )?;
    let n_test = protocol.n_test.min(test.images.len());
    let clean_x = embed_frames(params, ecfg, &test.images[..n_test])?;
    let clean = probe_accuracy(&head, &clean_x, &test.labels[..n_test]);
    let mut rows = Vec::with_capacity(perturbations.len());
    for &(kind, level) in perturbations {
        let perturbed = perturb_dataset(&test.images[..n_test], kind, level, seed)?;
        let px = embed_frames(params, ecfg, &perturbed)?;
        let acc = probe_accuracy(&head, &px, &test.labels[..n_test]);
        rows.push(RobustnessRow {
            kind: kind.name().to_string(),
            level,
            clean_accuracy: clean,
            perturbed_accuracy: acc,
            delta: clean - acc,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nn_fraction_hand_example() {
        // 1-D embeddings {0.0: A, 0.1: A, 5.0: B} -> 2/3.
        let e = vec![vec![0.0], vec![0.1], vec![5.0]];
        let l = vec![0, 0, 1];
        let f = nn_match_fraction(&e, &l).unwrap();
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nn_fraction_all_same_category_is_one() {
        let e = vec![vec![0.0], vec![1.0], vec![2.0], vec![9.0]];
        let l = vec![3, 3, 3, 3];
        assert_eq!(nn_match_fraction(&e, &l).unwrap(), 1.0);
        assert!(nn_match_fraction(&e[..1], &l[..1]).is_err());
    }

    #[test]
    fn nn_ties_break_to_lowest_index() {
        // Rows 1 and 2 are equidistant from row 0; row 1 (label B) wins.
        let e = vec![vec![0.0], vec![1.0], vec![-1.0]];
        let l = vec![0, 1, 0];
        // Row 0's neighbor is row 1 (B != A): no match. Row 1 -> row 0
        // (A != B): no match. Row 2 -> row 0 (A == A): match.
        let f = nn_match_fraction(&e, &l).unwrap();
        assert!((f - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn chance_level_matches_label_histogram() {
        // 4 of A, 2 of B: chance = (4*(3/5) + 2*(1/5)) / 6.
        let labels = vec![0, 0, 0, 0, 1, 1];
        let expect = (4.0 * (3.0 / 5.0) + 2.0 * (1.0 / 5.0)) / 6.0;
        assert!((chance_level(&labels) - expect).abs() < 1e-12);
    }

    #[test]
    fn fisher_symmetric_table_is_one() {
        assert!((fisher_exact_2x2([[5, 5], [5, 5]]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fisher_diagonal_table_value() {
        // [[10,0],[0,10]]: only the two extreme tables qualify,
        // p = 2 / C(20,10) = 1.0824e-5.
        let p = fisher_exact_2x2([[10, 0], [0, 10]]).unwrap();
        let expect = 2.0 / 184_756.0;
        assert!((p - expect).abs() < 1e-9, "p = {}", p);
    }

    /// Exhaustive oracle: enumerate all same-margin tables with exact
    /// big-rational-free arithmetic via ln-factorials recomputed separately.
    fn fisher_oracle(table: [[u64; 2]; 2]) -> f64 {
        let [[a, b], [c, d]] = table;
        let (r1, r2, c1) = (a + b, c + d, a + c);
        let n = r1 + r2;
        let choose = |n: u64, k: u64| -> f64 {
            let mut acc = 0.0f64;
            for i in 0..k {
                acc += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
            }
            acc.exp()
        };
        let total = choose(n, c1);
        let prob = |x: u64| -> Option<f64> {
            if x > r1 || c1 - x > r2 {
                return None;
            }
            Some(choose(r1, x) * choose(r2, c1 - x) / total)
        };
        let p_obs = prob(a).unwrap();
        let mut p = 0.0;
        for x in 0..=c1 {
            if let Some(px) = prob(x) {
                if px <= p_obs * (1.0 + 1e-12) {
                    p += px;
                }
            }
        }
        p.min(1.0)
    }

    #[test]
    fn fisher_matches_enumeration_for_small_tables() {
        for a in 0..=6u64 {
            for b in 0..=6 {
                for c in 0..=6 {
                    for d in 0..=6 {
                        if a + b + c + d == 0 {
                            continue;
                        }
                        let p = fisher_exact_2x2([[a, b], [c, d]]).unwrap();
                        let o = fisher_oracle([[a, b], [c, d]]);
                        assert!(
                            (p - o).abs() < 1e-9,
                            "[[{},{}],[{},{}]]: {} vs {}",
                            a,
                            b,
                            c,
                            d,
                            p,
                            o
                        );
                        assert!(p > 0.0 && p <= 1.0);
                    }
                }
            }
        }
        assert!(fisher_exact_2x2([[0, 0], [0, 0]]).is_err());
    }

    fn one_hot_embeddings(labels: &[usize], classes: usize) -> Vec<Vec<f64>> {
        labels
            .iter()
            .map(|&l| {
                let mut v = vec![0.0; classes];
                v[l] = 1.0;
                v
            })
            .collect()
    }

    #[test]
    fn probe_separable_task_reaches_high_accuracy() {
        let classes = 3;
        let labels: Vec<usize> = (0..60).map(|i| i % classes).collect();
        let x = one_hot_embeddings(&labels, classes);
        let protocol = ProbeProtocol {
            lrs: vec![0.1, 0.01],
            schedules: vec![(200, 80)],
            n_train: 40,
            n_val: 10,
            n_test: 20,
        };
        let r = linear_probe(&x[..40], &labels[..40], &x[40..], &labels[40..], classes, &protocol)
            .unwrap();
        assert!(r.accuracy > 0.99, "accuracy {}", r.accuracy);
    }

    #[test]
    fn probe_shuffled_labels_near_chance() {
        let classes = 4;
        let mut rng = seeding::stream(3, "shuffle", 0);
        let n = 400;
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let protocol = ProbeProtocol {
            lrs: vec![0.1],
            schedules: vec![(150, 60)],
            n_train: 200,
            n_val: 50,
            n_test: 200,
        };
        let r = linear_probe(&x[..200], &y[..200], &x[200..], &y[200..], classes, &protocol)
            .unwrap();
        assert!(
            (r.accuracy - 1.0 / classes as f64).abs() < 0.12,
            "accuracy {}",
            r.accuracy
        );
    }

    #[test]
    fn probe_tie_prefers_lower_lr() {
        // Degenerate data where every candidate reaches the same validation
        // accuracy: a single repeated sample.
        let classes = 2;
        let x: Vec<Vec<f64>> = (0..20).map(|_| vec![1.0, 0.0]).collect();
        let y = vec![0usize; 20];
        let protocol = ProbeProtocol {
            lrs: vec![0.1, 0.01],
            schedules: vec![(20, 10)],
            n_train: 15,
            n_val: 5,
            n_test: 5,
        };
        let r = linear_probe(&x[..15], &y[..15], &x[15..], &y[15..], classes, &protocol).unwrap();
        assert_eq!(r.chosen_lr, 0.01);
    }

    fn const_image(h: usize, w: usize, c: usize, v: f64) -> TensorData {
        let mut t = TensorData::zeros(vec![h, w, c]);
        for x in t.data_mut() {
            *x = v;
        }
        t
    }

    #[test]
    fn identity_perturbations_change_nothing() {
        let img = const_image(8, 8, 3, 0.4);
        for (kind, level) in [
            (PerturbKind::GaussianNoise, 0.0),
            (PerturbKind::BoxBlur, 1.0),
            (PerturbKind::ChannelShift, 0.0),
        ] {
            let out = perturb_dataset(&[img.clone()], kind, level, 1).unwrap();
            assert_eq!(out[0], img, "{:?}", kind);
        }
    }

    #[test]
    fn blur_leaves_constant_image_unchanged() {
        let img = const_image(10, 10, 3, 0.7);
        let out = perturb_dataset(&[img.clone()], PerturbKind::BoxBlur, 3.0, 1).unwrap();
        for (a, b) in out[0].data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(perturb_dataset(&[img], PerturbKind::BoxBlur, 4.0, 1).is_err());
    }

    #[test]
    fn noise_variance_matches_sigma_squared() {
        let img = const_image(32, 32, 3, 0.5);
        let out = perturb_dataset(&[img], PerturbKind::GaussianNoise, 0.1, 5).unwrap();
        let data = out[0].data();
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let var: f64 =
            data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / data.len() as f64;
        assert!((var - 0.01).abs() < 0.002, "variance {}", var);
        assert!(data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn perturbation_is_deterministic_under_seed() {
        let img = const_image(8, 8, 3, 0.5);
        let a = perturb_dataset(&[img.clone()], PerturbKind::GaussianNoise, 0.1, 9).unwrap();
        let b = perturb_dataset(&[img], PerturbKind::GaussianNoise, 0.1, 9).unwrap();
        assert_eq!(a[0], b[0]);
    }

    #[test]
    fn channel_shift_moves_first_and_last_channels() {
        let img = const_image(2, 2, 3, 0.5);
        let out = perturb_dataset(&[img], PerturbKind::ChannelShift, 0.2, 1).unwrap();
        for px in out[0].data().chunks(3) {
            assert!((px[0] - 0.7).abs() < 1e-12);
            assert!((px[1] - 0.5).abs() < 1e-12);
            assert!((px[2] - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn task_generation_labels_in_range_and_deterministic() {
        let spec = SceneSpec {
            image_size: (16, 16, 3),
            num_categories: 4,
            objects_range: (1, 3),
            ..SceneSpec::default()
        };
        for task in [ProbeTask::Category, ProbeTask::Count, ProbeTask::Quadrant] {
            let a = generate_task(&spec, task, 12, 7, "t").unwrap();
            let b = generate_task(&spec, task, 12, 7, "t").unwrap();
            assert_eq!(a.labels, b.labels);
            assert!(a.labels.iter().all(|&l| l < a.num_classes));
            assert_eq!(a.images.len(), 12);
            for (x, y) in a.images.iter().zip(&b.images) {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn robustness_identity_perturbation_has_zero_delta() {
        let spec = SceneSpec {
            image_size: (16, 16, 3),
            num_categories: 3,
            objects_range: (1, 2),
            ..SceneSpec::default()
        };
        let train = generate_task(&spec, ProbeTask::Category, 30, 1, "tr").unwrap();
        let test = generate_task(&spec, ProbeTask::Category, 10, 2, "te").unwrap();
        let ecfg = EncoderConfig {
            image_size: (16, 16, 3),
            stride: 8,
            channels: 4,
            blocks: 1,
            embed_dim: 4,
            lstm_hidden: 4,
            num_categories: 3,
            ..EncoderConfig::default()
        };
        let mut rng = seeding::stream(1, "init", 0);
        let params = encoder::init_params(&ecfg, &mut rng);
        let protocol = ProbeProtocol {
            lrs: vec![0.1],
            schedules: vec![(30, 15)],
            n_train: 30,
            n_val: 10,
            n_test: 10,
        };
        let rows = robustness_delta(
            &params,
            &ecfg,
            &train,
            &test,
            &[(PerturbKind::GaussianNoise, 0.0), (PerturbKind::BoxBlur, 1.0)],
            &protocol,
            3,
        )
        .unwrap();
        for r in rows {
            assert_eq!(r.delta, 0.0, "{}", r.kind);
        }
    }
}
