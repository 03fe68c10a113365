//! Hierarchical training objectives: shot-level InfoNCE, frame- and
//! object-level semi-hard triplet losses, the weighted combination, and the
//! supervised cross-entropy / binary cross-entropy heads.

use crate::encoder::EmbeddingSet;
use crate::error::{HvError, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use tensor_core::{Graph, NodeId, TensorData};

fn d_omega() -> f64 {
    5.0
}
fn d_beta() -> f64 {
    0.04
}
fn d_margin() -> f64 {
    0.2
}
fn d_bce_weight() -> f64 {
    0.1
}

/// Weights of the combined objective L = omega*L_object + L_frame +
/// beta*L_shot (+ gamma*L_supervised, + bce_weight*L_bce).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "d_omega")]
    pub omega: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default)]
    pub gamma: f64,
    #[serde(default = "d_margin")]
    pub margin_frame: f64,
    #[serde(default = "d_margin")]
    pub margin_object: f64,
    #[serde(default = "d_bce_weight")]
    pub bce_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl LossWeights {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errors = Vec::new();
        for (name, v) in [
            ("weights.omega", self.omega),
            ("weights.beta", self.beta),
            ("weights.gamma", self.gamma),
            ("weights.margin_frame", self.margin_frame),
            ("weights.margin_object", self.margin_object),
            ("weights.bce_weight", self.bce_weight),
        ] {
            if !(v >= 0.0) {
                errors.push(format!("{} must be >= 0, got {}", name, v));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// A loss component together with its activity flag and mining counters.
#[derive(Clone, Copy, Debug)]
pub struct LossTerm {
    pub node: NodeId,
    /// False when the pool degenerated (single shot, one category, no
    /// triplets) and the value is a constant zero.
    pub active: bool,
    pub triplets: usize,
    pub skipped_pairs: usize,
}

/// All ordered same-label index pairs (anchor, positive), anchor != positive.
pub fn same_label_pairs(labels: &[i64]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for a in 0..labels.len() {
        for p in 0..labels.len() {
            if a != p && labels[a] == labels[p] {
                pairs.push((a, p));
            }
        }
    }
    pairs
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Row-major n*n squared-distance matrix.
fn pairwise_sq_dists(values: &TensorData) -> Vec<f64> {
    let n = values.shape()[0];
    let d = values.shape()[1];
    let data = values.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = sq_dist(&data[i * d..(i + 1) * d], &data[j * d..(j + 1) * d]);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    out
}

/// Semi-hard negative selection over detached embedding values.
///
/// For each anchor-positive pair, the chosen negative has a differing label
/// and minimal squared distance among those with d2(a,n) > d2(a,p); if no
/// such candidate exists, the maximal-distance differing-label candidate is
/// used instead. Ties break toward the lowest row index. Pairs with no
/// differing-label candidate at all are skipped; the count is returned.
pub fn semi_hard_mine(
    values: &TensorData,
    labels: &[i64],
    pairs: &[(usize, usize)],
) -> (Vec<Triplet>, usize) {
    let n = labels.len();
    let d2 = pairwise_sq_dists(values);
    let mut triplets = Vec::new();
    let mut skipped = 0usize;
    for &(a, p) in pairs {
        let dap = d2[a * n + p];
        let mut best_semi: Option<(f64, usize)> = None;
        let mut best_far: Option<(f64, usize)> = None;
        for neg in 0..n {
            if labels[neg] == labels[a] {
                continue;
            }
            let dan = d2[a * n + neg];
            if dan > dap && best_semi.map_or(true, |(bd, _)| dan < bd) {
                best_semi = Some((dan, neg));
            }
            if best_far.map_or(true, |(bd, _)| dan > bd) {
                best_far = Some((dan, neg));
            }
        }
        match best_semi.or(best_far) {
            Some((_, neg)) => triplets.push(Triplet {
                anchor: a,
                positive: p,
                negative: neg,
            }),
            None => skipped += 1,
        }
    }
    (triplets, skipped)
}

fn rowwise_sq_dist(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let diff = g.sub(a, b)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.sum_axis(sq, 1)?)
}

/// Mean hinge over mined triplets: max(d2(a,p) - d2(a,n) + margin, 0).
/// An empty triplet list returns a constant zero, flagged inactive.
pub fn triplet_loss(
    g: &mut Graph,
    embeddings: NodeId,
    triplets: &[Triplet],
    margin: f64,
) -> Result<LossTerm> {
    if triplets.is_empty() {
        return Ok(LossTerm {
            node: g.scalar(0.0)?,
            active: false,
            triplets: 0,
            skipped_pairs: 0,
        });
    }
    let (a_idx, p_idx, n_idx): (Vec<_>, Vec<_>, Vec<_>) = triplets
        .iter()
        .map(|t| (t.anchor, t.positive, t.negative))
        .fold((vec![], vec![], vec![]), |mut acc, (a, p, n)| {
            acc.0.push(a);
            acc.1.push(p);
            acc.2.push(n);
            acc
        });
    let av = g.gather_rows(embeddings, &a_idx)?;
    let pv = g.gather_rows(embeddings, &p_idx)?;
    let nv = g.gather_rows(embeddings, &n_idx)?;
    let dap = rowwise_sq_dist(g, av, pv)?;
    let dan = rowwise_sq_dist(g, av, nv)?;
    let gap = g.sub(dap, dan)?;
    let shifted = g.add_scalar(gap, margin)?;
    let hinge = g.relu(shifted)?;
    Ok(LossTerm {
        node: g.mean(hinge)?,
        active: true,
        triplets: triplets.len(),
        skipped_pairs: 0,
    })
}

fn mine_and_score(
    g: &mut Graph,
    embeddings: NodeId,
    labels: &[i64],
    margin: f64,
) -> Result<LossTerm> {
    let values = g.value(embeddings).clone();
    let pairs = same_label_pairs(labels);
    let (triplets, skipped) = semi_hard_mine(&values, labels, &pairs);
    let mut term = triplet_loss(g, embeddings, &triplets, margin)?;
    term.skipped_pairs = skipped;
    Ok(term)
}

/// Frame triplet loss: positives are ordered same-shot frame pairs,
/// negatives are mined batch-wide from other shots (other videos included).
/// `shot_ids[i]` identifies the shot frame i came from.
pub fn frame_loss(
    g: &mut Graph,
    frame_embeddings: NodeId,
    shot_ids: &[i64],
    margin: f64,
) -> Result<LossTerm> {
    if g.value(frame_embeddings).shape()[0] != shot_ids.len() {
        return Err(HvError::Other(
            "frame_loss: shot id count does not match embedding rows".into(),
        ));
    }
    let distinct: std::collections::BTreeSet<_> = shot_ids.iter().collect();
    if distinct.len() < 2 {
        return Ok(LossTerm {
            node: g.scalar(0.0)?,
            active: false,
            triplets: 0,
            skipped_pairs: 0,
        });
    }
    mine_and_score(g, frame_embeddings, shot_ids, margin)
}

/// Mining-pool scope for the object loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectPool {
    /// All boxes in the minibatch, across frames and videos.
    #[default]
    Batch,
    /// Pairs and negatives restricted to boxes of the same frame.
    PerFrame,
}

/// Object triplet loss over box embeddings labeled by detector category.
pub fn object_loss(
    g: &mut Graph,
    set: &EmbeddingSet,
    margin: f64,
    pool: ObjectPool,
) -> Result<LossTerm> {
    let distinct: std::collections::BTreeSet<_> = set.labels.iter().collect();
    if distinct.len() < 2 {
        return Ok(LossTerm {
            node: g.scalar(0.0)?,
            active: false,
            triplets: 0,
            skipped_pairs: 0,
        });
    }
    match pool {
        ObjectPool::Batch => mine_and_score(g, set.node, &set.labels, margin),
        ObjectPool::PerFrame => {
            // Mine each frame's boxes in isolation, then take one mean hinge
            // over the union of mined triplets.
            let values = g.value(set.node).clone();
            let mut by_frame: BTreeMap<(usize, usize, usize), Vec<usize>> = BTreeMap::new();
            for (i, k) in set.groups.iter().enumerate() {
                by_frame
                    .entry((k.video, k.shot, k.frame))
                    .or_default()
                    .push(i);
            }
            let mut triplets = Vec::new();
            let mut skipped = 0usize;
            for rows in by_frame.values() {
                let d = values.shape()[1];
                let mut sub = Vec::with_capacity(rows.len() * d);
                let mut sub_labels = Vec::with_capacity(rows.len());
                for &r in rows {
                    sub.extend_from_slice(&values.data()[r * d..(r + 1) * d]);
                    sub_labels.push(set.labels[r]);
                }
                let sub_vals = TensorData::new(vec![rows.len(), d], sub)?;
                let pairs = same_label_pairs(&sub_labels);
                let (local, sk) = semi_hard_mine(&sub_vals, &sub_labels, &pairs);
                skipped += sk;
                triplets.extend(local.into_iter().map(|t| Triplet {
                    anchor: rows[t.anchor],
                    positive: rows[t.positive],
                    negative: rows[t.negative],
                }));
            }
            let mut term = triplet_loss(g, set.node, &triplets, margin)?;
            term.skipped_pairs = skipped;
            Ok(term)
        }
    }
}

/// Shot-level InfoNCE. Each slot supplies aligned predictions and targets
/// `[N, d]` for the same shot position across the batch; the loss averages
/// `logsumexp_j g(pred_i, target_j) - ln N - g(pred_i, target_i)` over all
/// positive pairs.
pub fn shot_infonce(
    g: &mut Graph,
    critic_b: NodeId,
    slots: &[(NodeId, NodeId)],
) -> Result<NodeId> {
    if slots.is_empty() {
        return Err(HvError::Other("shot_infonce: no slots provided".into()));
    }
    let mut terms = Vec::with_capacity(slots.len());
    for &(preds, targets) in slots {
        let np = g.value(preds).shape().to_vec();
        let nt = g.value(targets).shape().to_vec();
        if np != nt {
            return Err(HvError::Other(format!(
                "shot_infonce: prediction shape {:?} does not match targets {:?}",
                np, nt
            )));
        }
        let n = np[0];
        if n < 2 {
            return Err(HvError::Other(format!(
                "shot_infonce: batch size {} < 2",
                n
            )));
        }
        let pb = g.matmul(preds, critic_b)?;
        let tt = g.transpose(targets)?;
        let scores = g.matmul(pb, tt)?; // [N, N], (i, j) = g(pred_i, target_j)
        let lse = g.logsumexp(scores, 1)?; // [N]
        let mut eye = TensorData::zeros(vec![n, n]);
        for i in 0..n {
            eye.data_mut()[i * n + i] = 1.0;
        }
        let mask = g.constant(eye)?;
        let masked = g.mul(scores, mask)?;
        let pos = g.sum_axis(masked, 1)?; // [N]
        let diff = g.sub(lse, pos)?;
        let term = g.add_scalar(diff, -(n as f64).ln())?;
        terms.push(term);
    }
    let all = if terms.len() == 1 {
        terms[0]
    } else {
        g.concat(&terms)?
    };
    Ok(g.mean(all)?)
}

/// L = omega*L_object + L_frame + beta*L_shot.
pub fn combined_loss(
    g: &mut Graph,
    l_object: NodeId,
    l_frame: NodeId,
    l_shot: NodeId,
    weights: &LossWeights,
) -> Result<NodeId> {
    let wo = g.scale(l_object, weights.omega)?;
    let ws = g.scale(l_shot, weights.beta)?;
    let t = g.add(wo, l_frame)?;
    Ok(g.add(t, ws)?)
}

fn one_hot(labels: &[usize], classes: usize) -> Result<TensorData> {
    let mut t = TensorData::zeros(vec![labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(HvError::Other(format!(
                "label {} out of range for {} categories",
                l, classes
            )));
        }
        t.data_mut()[i * classes + l] = 1.0;
    }
    Ok(t)
}

/// Mean softmax cross-entropy of `[N, C]` logits against integer labels.
pub fn supervised_ce(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(HvError::Other(format!(
            "supervised_ce: logits {:?} incompatible with {} labels",
            shape,
            labels.len()
        )));
    }
    let mask = one_hot(labels, shape[1])?;
    let mask = g.constant(mask)?;
    let lse = g.logsumexp(logits, 1)?;
    let masked = g.mul(logits, mask)?;
    let truth = g.sum_axis(masked, 1)?;
    let nll = g.sub(lse, truth)?;
    Ok(g.mean(nll)?)
}

/// Mean element-wise binary cross-entropy of `[N, C]` logits against the
/// one-hot category targets, computed via the stable softplus identity
/// `bce(x, y) = softplus(x) - x*y`, softplus(x) = relu(x) + ln(1+e^{-|x|}).
pub fn object_bce(g: &mut Graph, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = g.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(HvError::Other(format!(
            "object_bce: logits {:?} incompatible with {} labels",
            shape,
            labels.len()
        )));
    }
    let targets = one_hot(labels, shape[1])?;
    let targets = g.constant(targets)?;
    let pos = g.relu(logits)?;
    let negx = g.neg(logits)?;
    let negpart = g.relu(negx)?;
    let absx = g.add(pos, negpart)?;
    let nabs = g.neg(absx)?;
    let e = g.exp(nabs)?;
    let e1 = g.add_scalar(e, 1.0)?;
    let log1p = g.log(e1)?;
    let softplus = g.add(pos, log1p)?;
    let xy = g.mul(logits, targets)?;
    let bce = g.sub(softplus, xy)?;
    Ok(g.mean(bce)?)
}
