//! Differentiable image encoder producing a spatial feature grid, plus
//! projection heads, shot aggregation, a recurrent shot predictor and a
//! bilinear critic.
//!
//! The encoder is a patch embedding followed by gated 3x3 neighborhood
//! mixing blocks with pointwise residual units: it keeps the essential
//! property of a convolutional backbone (a feature grid whose cells have
//! center-concentrated receptive fields) at a gradient-checkable size.

use crate::error::{HvError, Result};
use crate::hierarchy::DetectedBox;
use crate::pooling::box_to_cell;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use tensor_core::{Graph, NodeId, ParamSet, TensorData};

fn d_image() -> (usize, usize, usize) {
    (64, 64, 3)
}
fn d_stride() -> usize {
    8
}
fn d_channels() -> usize {
    64
}
fn d_blocks() -> usize {
    2
}
fn d_embed_dim() -> usize {
    32
}
fn d_lstm_hidden() -> usize {
    32
}
fn d_num_categories() -> usize {
    6
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// (height, width, channels) of input images.
    #[serde(default = "d_image")]
    pub image_size: (usize, usize, usize),
    #[serde(default = "d_stride")]
    pub stride: usize,
    /// Feature grid channels C'.
    #[serde(default = "d_channels")]
    pub channels: usize,
    /// Number of mixing blocks.
    #[serde(default = "d_blocks")]
    pub blocks: usize,
    /// Projection dimension d for frame and object embeddings.
    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "d_lstm_hidden")]
    pub lstm_hidden: usize,
    #[serde(default = "d_num_categories")]
    pub num_categories: usize,
    /// Pass box features through the object projection head.
    #[serde(default = "d_true")]
    pub object_head: bool,
    /// L2-normalize frame embeddings used by the frame triplet loss.
    #[serde(default = "d_true")]
    pub normalize_frame_embeddings: bool,
    /// L2-normalize object embeddings used by the object triplet loss.
    #[serde(default = "d_true")]
    pub normalize_object_embeddings: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl EncoderConfig {
    pub fn grid_h(&self) -> usize {
        self.image_size.0 / self.stride
    }

    pub fn grid_w(&self) -> usize {
        self.image_size.1 / self.stride
    }

    pub fn cells(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.stride * self.stride * self.image_size.2
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errors = Vec::new();
        let (h, w, c) = self.image_size;
        if self.stride == 0 || h == 0 || w == 0 || c == 0 {
            errors.push("encoder.image_size and encoder.stride must be positive".into());
        } else if h % self.stride != 0 || w % self.stride != 0 {
            errors.push(format!(
                "encoder.image_size ({}x{}) must be divisible by stride {}",
                h, w, self.stride
            ));
        }
        for (name, v) in [
            ("encoder.channels", self.channels),
            ("encoder.embed_dim", self.embed_dim),
            ("encoder.lstm_hidden", self.lstm_hidden),
            ("encoder.num_categories", self.num_categories),
        ] {
            if v == 0 {
                errors.push(format!("{} must be positive", name));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

/// H' x W' x C' encoder output for a single image.
#[derive(Clone, Debug)]
pub struct FeatureGrid {
    /// Stored as [H'*W', C'] row-major.
    pub values: TensorData,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl FeatureGrid {
    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        let c = self.channels();
        let idx = (row * self.grid_w + col) * c;
        &self.values.data()[idx..idx + c]
    }
}

/// Embeddings with labels and grouping keys; the mining pool for the
/// triplet losses. Values live on the graph node.
#[derive(Clone, Debug)]
pub struct EmbeddingSet {
    pub node: NodeId,
    pub labels: Vec<i64>,
    pub groups: Vec<GroupKey>,
    pub normalized: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GroupKey {
    pub video: usize,
    pub shot: usize,
    pub frame: usize,
}

fn xavier<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> TensorData {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    TensorData::new(vec![rows, cols], data).unwrap()
}

/// All learnable weights, keyed by canonical checkpoint entry names.
pub fn init_params<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> ParamSet {
    let c = cfg.channels;
    let d = cfg.embed_dim;
    let h = cfg.lstm_hidden;
    let mut ps = ParamSet::new();
    ps.insert("patch.w", xavier(rng, cfg.patch_dim(), c));
    ps.insert("patch.b", TensorData::zeros(vec![c]));
    for i in 0..cfg.blocks {
        let mut gate = TensorData::zeros(vec![]);
        gate.data_mut()[0] = 0.5;
        ps.insert(format!("block{}.gate", i), gate);
        ps.insert(format!("block{}.mlp1.w", i), xavier(rng, c, c));
        ps.insert(format!("block{}.mlp1.b", i), TensorData::zeros(vec![c]));
        ps.insert(format!("block{}.mlp2.w", i), xavier(rng, c, c));
        ps.insert(format!("block{}.mlp2.b", i), TensorData::zeros(vec![c]));
    }
    for head in ["frame", "obj"] {
        ps.insert(format!("head.{}.w1", head), xavier(rng, c, c));
        // A small positive bias keeps the relu hidden layer from starting
        // fully dead, which would zero the head output and put the
        // downstream L2 normalization on its epsilon branch.
        let mut b1 = TensorData::zeros(vec![c]);
        b1.data_mut().fill(0.1);
        ps.insert(format!("head.{}.b1", head), b1);
        ps.insert(format!("head.{}.w2", head), xavier(rng, c, d));
        ps.insert(format!("head.{}.b2", head), TensorData::zeros(vec![d]));
    }
    ps.insert("lstm.w_ih", xavier(rng, d, 4 * h));
    ps.insert("lstm.w_hh", xavier(rng, h, 4 * h));
    // Forget-gate bias starts at 1 so early training does not wash out state.
    let mut lstm_b = TensorData::zeros(vec![4 * h]);
    for j in h..2 * h {
        lstm_b.data_mut()[j] = 1.0;
    }
    ps.insert("lstm.b", lstm_b);
    ps.insert("lstm.out.w", xavier(rng, h, d));
    ps.insert("lstm.out.b", TensorData::zeros(vec![d]));
    ps.insert("critic.B", xavier(rng, d, d));
    ps.insert("head.sup.w", xavier(rng, d, cfg.num_categories));
    ps.insert("head.sup.b", TensorData::zeros(vec![cfg.num_categories]));
    ps.insert("head.bce.w", xavier(rng, d, cfg.num_categories));
    ps.insert("head.bce.b", TensorData::zeros(vec![cfg.num_categories]));
    ps
}

/// Graph node ids of inserted parameters.
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| HvError::Other(format!("missing parameter {}", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn insert_params(
    g: &mut Graph,
    params: &ParamSet,
    requires_grad: bool,
) -> Result<ParamNodes> {
    let mut nodes = BTreeMap::new();
    for (name, t) in params.iter() {
        nodes.insert(name.to_string(), g.leaf(t.clone(), requires_grad)?);
    }
    Ok(ParamNodes { nodes })
}

/// Rearrange images into per-cell patch rows: `[frames*H'*W', s*s*C]`.
pub fn patchify(images: &[&TensorData], cfg: &EncoderConfig) -> Result<TensorData> {
    let (h, w, c) = cfg.image_size;
    let s = cfg.stride;
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let pd = cfg.patch_dim();
    let mut data = Vec::with_capacity(images.len() * gh * gw * pd);
    for img in images {
        if img.shape() != [h, w, c] {
            return Err(HvError::Other(format!(
                "patchify: image shape {:?} does not match configured {:?}",
                img.shape(),
                (h, w, c)
            )));
        }
        let src = img.data();
        for gy in 0..gh {
            for gx in 0..gw {
                for dy in 0..s {
                    for dx in 0..s {
                        let base = (((gy * s + dy) * w) + (gx * s + dx)) * c;
                        data.extend_from_slice(&src[base..base + c]);
                    }
                }
            }
        }
    }
    Ok(TensorData::new(vec![images.len() * gh * gw, pd], data)?)
}

/// Batched forward pass results over a stack of frames.
pub struct EncodedBatch {
    /// Feature grids, `[frames*H'*W', C']`.
    pub grid: NodeId,
    /// Mean-pooled grid per frame, `[frames, C']`.
    pub pooled: NodeId,
    /// Frame projection head output, `[frames, d]`.
    pub frame_embed: NodeId,
    /// L2-normalized frame embeddings, `[frames, d]`.
    pub frame_embed_norm: NodeId,
    pub frames: usize,
}

fn two_layer_head(
    g: &mut Graph,
    pn: &ParamNodes,
    input: NodeId,
    prefix: &str,
) -> Result<NodeId> {
    let w1 = pn.id(&format!("{}.w1", prefix))?;
    let b1 = pn.id(&format!("{}.b1", prefix))?;
    let w2 = pn.id(&format!("{}.w2", prefix))?;
    let b2 = pn.id(&format!("{}.b2", prefix))?;
    let t = g.matmul(input, w1)?;
    let t = g.add(t, b1)?;
    let t = g.relu(t)?;
    let t = g.matmul(t, w2)?;
    Ok(g.add(t, b2)?)
}

/// Encode pre-patchified frames through the grid encoder and frame head.
pub fn encode_batch(
    g: &mut Graph,
    pn: &ParamNodes,
    patches: TensorData,
    cfg: &EncoderConfig,
) -> Result<EncodedBatch> {
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let cells = gh * gw;
    if patches.shape()[0] % cells != 0 {
        return Err(HvError::Other(
            "encode_batch: patch rows not a multiple of grid cells".into(),
        ));
    }
    let frames = patches.shape()[0] / cells;
    let x = g.leaf(patches, false)?;
    let pw = pn.id("patch.w")?;
    let pb = pn.id("patch.b")?;
    let mut h = g.matmul(x, pw)?;
    h = g.add(h, pb)?;
    for i in 0..cfg.blocks {
        let agg = g.neighbor_mean(h, gh, gw)?;
        let gate = pn.id(&format!("block{}.gate", i))?;
        let gated = g.mul(agg, gate)?;
        let m = g.add(h, gated)?;
        let w1 = pn.id(&format!("block{}.mlp1.w", i))?;
        let b1 = pn.id(&format!("block{}.mlp1.b", i))?;
        let w2 = pn.id(&format!("block{}.mlp2.w", i))?;
        let b2 = pn.id(&format!("block{}.mlp2.b", i))?;
        let t = g.matmul(m, w1)?;
        let t = g.add(t, b1)?;
        let t = g.relu(t)?;
        let t = g.matmul(t, w2)?;
        let t = g.add(t, b2)?;
        h = g.add(m, t)?;
    }
    let pooled = g.mean_groups(h, cells)?;
    let frame_embed = two_layer_head(g, pn, pooled, "head.frame")?;
    let frame_embed_norm = g.l2_normalize(frame_embed, 1, 1e-12)?;
    Ok(EncodedBatch {
        grid: h,
        pooled,
        frame_embed,
        frame_embed_norm,
        frames,
    })
}

/// Single-image convenience: run the grid encoder and return values.
pub fn encode_grid(image: &TensorData, params: &ParamSet, cfg: &EncoderConfig) -> Result<FeatureGrid> {
    let (h, w, _) = cfg.image_size;
    if h % cfg.stride != 0 || w % cfg.stride != 0 {
        return Err(HvError::Other(format!(
            "encode_grid: image size {}x{} not divisible by stride {}",
            h, w, cfg.stride
        )));
    }
    let mut g = Graph::new();
    let pn = insert_params(&mut g, params, false)?;
    let patches = patchify(&[image], cfg)?;
    let enc = encode_batch(&mut g, &pn, patches, cfg)?;
    Ok(FeatureGrid {
        values: g.value(enc.grid).clone(),
        grid_h: cfg.grid_h(),
        grid_w: cfg.grid_w(),
    })
}

/// Mean-pool a grid and apply the frame projection head; optionally
/// L2-normalized.
pub fn frame_embed(
    grid: &FeatureGrid,
    params: &ParamSet,
    cfg: &EncoderConfig,
    normalize: bool,
) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let pn = insert_params(&mut g, params, false)?;
    let x = g.leaf(grid.values.clone(), false)?;
    let pooled = g.mean_groups(x, grid.grid_h * grid.grid_w)?;
    let fe = two_layer_head(&mut g, &pn, pooled, "head.frame")?;
    let out = if normalize {
        g.l2_normalize(fe, 1, 1e-12)?
    } else {
        fe
    };
    let _ = cfg;
    Ok(g.value(out).data().to_vec())
}

/// Arithmetic mean of frame representations.
pub fn aggregate_shot(frame_embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = frame_embeddings.first() else {
        return Err(HvError::Other(
            "aggregate_shot: empty frame embedding list".into(),
        ));
    };
    let d = first.len();
    let mut out = vec![0.0; d];
    for e in frame_embeddings {
        for (o, v) in out.iter_mut().zip(e.iter()) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= frame_embeddings.len() as f64;
    }
    Ok(out)
}

/// One LSTM cell step over a `[N, d]` input; returns (h, c).
pub fn lstm_step(
    g: &mut Graph,
    pn: &ParamNodes,
    x: NodeId,
    state: Option<(NodeId, NodeId)>,
    hidden: usize,
) -> Result<(NodeId, NodeId)> {
    let n = g.value(x).shape()[0];
    let w_ih = pn.id("lstm.w_ih")?;
    let w_hh = pn.id("lstm.w_hh")?;
    let b = pn.id("lstm.b")?;
    let mut gates = g.matmul(x, w_ih)?;
    let (h_prev, c_prev) = match state {
        Some(s) => s,
        None => {
            let z = g.constant(TensorData::zeros(vec![n, hidden]))?;
            (z, z)
        }
    };
    let hh = g.matmul(h_prev, w_hh)?;
    gates = g.add(gates, hh)?;
    gates = g.add(gates, b)?;
    let i_g = g.slice(gates, 1, 0, hidden)?;
    let f_g = g.slice(gates, 1, hidden, 2 * hidden)?;
    let g_g = g.slice(gates, 1, 2 * hidden, 3 * hidden)?;
    let o_g = g.slice(gates, 1, 3 * hidden, 4 * hidden)?;
    let i_s = g.sigmoid(i_g)?;
    let f_s = g.sigmoid(f_g)?;
    let g_t = g.tanh(g_g)?;
    let o_s = g.sigmoid(o_g)?;
    let fc = g.mul(f_s, c_prev)?;
    let ig = g.mul(i_s, g_t)?;
    let c = g.add(fc, ig)?;
    let ct = g.tanh(c)?;
    let h = g.mul(o_s, ct)?;
    Ok((h, c))
}

fn lstm_output(g: &mut Graph, pn: &ParamNodes, h: NodeId) -> Result<NodeId> {
    let w = pn.id("lstm.out.w")?;
    let b = pn.id("lstm.out.b")?;
    let t = g.matmul(h, w)?;
    Ok(g.add(t, b)?)
}

/// Consume shot representations `s_1..s_l` and predict the next `m` shot
/// representations, feeding each prediction back as the next input.
/// Graph-level variant used during training.
pub fn predict_rollout(
    g: &mut Graph,
    pn: &ParamNodes,
    prefix: &[NodeId],
    m: usize,
    hidden: usize,
) -> Result<Vec<NodeId>> {
    if prefix.is_empty() {
        return Err(HvError::Other("predict_next_shots: empty prefix".into()));
    }
    if m == 0 {
        return Err(HvError::Other("predict_next_shots: m must be >= 1".into()));
    }
    let mut state = None;
    for &x in prefix {
        state = Some(lstm_step(g, pn, x, state, hidden)?);
    }
    let mut preds = Vec::with_capacity(m);
    let mut last = lstm_output(g, pn, state.unwrap().0)?;
    preds.push(last);
    for _ in 1..m {
        state = Some(lstm_step(g, pn, last, state, hidden)?);
        last = lstm_output(g, pn, state.unwrap().0)?;
        preds.push(last);
    }
    Ok(preds)
}

/// Value-level predict_next_shots for a single video.
pub fn predict_next_shots(
    shot_reps: &[Vec<f64>],
    params: &ParamSet,
    cfg: &EncoderConfig,
    m: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let pn = insert_params(&mut g, params, false)?;
    let mut prefix = Vec::with_capacity(shot_reps.len());
    for s in shot_reps {
        prefix.push(g.leaf(TensorData::new(vec![1, s.len()], s.clone())?, false)?);
    }
    let preds = predict_rollout(&mut g, &pn, &prefix, m, cfg.lstm_hidden)?;
    Ok(preds
        .into_iter()
        .map(|p| g.value(p).data().to_vec())
        .collect())
}

/// Bilinear critic g(s_hat, s) = s_hat^T B s.
pub fn critic_score(s_hat: &[f64], s: &[f64], params: &ParamSet) -> Result<f64> {
    let b = params
        .get("critic.B")
        .ok_or_else(|| HvError::Other("missing parameter critic.B".into()))?;
    let d = b.shape()[0];
    if s_hat.len() != d || s.len() != b.shape()[1] {
        return Err(HvError::Other(format!(
            "critic_score: dims {}x{} incompatible with critic {:?}",
            s_hat.len(),
            s.len(),
            b.shape()
        )));
    }
    let mut acc = 0.0;
    for (i, &a) in s_hat.iter().enumerate() {
        for (j, &v) in s.iter().enumerate() {
            acc += a * b.data()[i * b.shape()[1] + j] * v;
        }
    }
    Ok(acc)
}

/// All pairwise critic scores between predictions and targets: `[N, N]`
/// where entry (i, j) = g(pred_i, target_j).
pub fn critic_scores(
    g: &mut Graph,
    pn: &ParamNodes,
    preds: NodeId,
    targets: NodeId,
) -> Result<NodeId> {
    let b = pn.id("critic.B")?;
    let pb = g.matmul(preds, b)?;
    let tt = g.transpose(targets)?;
    Ok(g.matmul(pb, tt)?)
}

/// Gather box embeddings r_b from a batch of grids: each box maps to its
/// center cell's feature column, optionally projected and normalized.
///
/// `boxes` carries (frame index within the batch, group key, box).
pub fn gather_box_embeddings(
    g: &mut Graph,
    pn: &ParamNodes,
    grid: NodeId,
    boxes: &[(usize, GroupKey, DetectedBox)],
    cfg: &EncoderConfig,
) -> Result<Option<EmbeddingSet>> {
    if boxes.is_empty() {
        return Ok(None);
    }
    let (gh, gw) = (cfg.grid_h(), cfg.grid_w());
    let cells = gh * gw;
    let (h, w, _) = cfg.image_size;
    let mut rows = Vec::with_capacity(boxes.len());
    let mut labels = Vec::with_capacity(boxes.len());
    let mut groups = Vec::with_capacity(boxes.len());
    for (frame_idx, key, b) in boxes {
        let (row, col) = box_to_cell(&b.bbox, h, w, gh, gw)?;
        rows.push(frame_idx * cells + row * gw + col);
        labels.push(b.category_id as i64);
        groups.push(*key);
    }
    let mut e = g.gather_rows(grid, &rows)?;
    if cfg.object_head {
        e = two_layer_head(g, pn, e, "head.obj")?;
    }
    let normalized = cfg.normalize_object_embeddings;
    if normalized {
        e = g.l2_normalize(e, 1, 1e-12)?;
    }
    Ok(Some(EmbeddingSet {
        node: e,
        labels,
        groups,
        normalized,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::BBox;
    use crate::seeding;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: (16, 16, 3),
            stride: 8,
            channels: 6,
            blocks: 2,
            embed_dim: 4,
            lstm_hidden: 4,
            num_categories: 3,
            ..EncoderConfig::default()
        }
    }

    fn rand_image(cfg: &EncoderConfig, seed: u64) -> TensorData {
        let (h, w, c) = cfg.image_size;
        let mut rng = seeding::stream(seed, "test-image", 0);
        let data: Vec<f64> = (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect();
        TensorData::new(vec![h, w, c], data).unwrap()
    }

    #[test]
    fn grid_shape_matches_stride_rule() {
        let cfg = EncoderConfig::default();
        let mut rng = seeding::stream(0, "init", 0);
        let params = init_params(&cfg, &mut rng);
        let img = TensorData::zeros(vec![64, 64, 3]);
        let grid = encode_grid(&img, &params, &cfg).unwrap();
        assert_eq!(grid.values.shape(), &[64, 64]); // 8*8 cells x 64 channels
        assert_eq!(grid.grid_h, 8);
        assert_eq!(grid.grid_w, 8);
    }

    #[test]
    fn zero_image_zero_biases_gives_zero_grid() {
        let cfg = small_cfg();
        let mut rng = seeding::stream(1, "init", 0);
        let params = init_params(&cfg, &mut rng); // biases init to zero
        let img = TensorData::zeros(vec![16, 16, 3]);
        let grid = encode_grid(&img, &params, &cfg).unwrap();
        assert!(grid.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn indivisible_image_size_is_error() {
        let cfg = EncoderConfig {
            image_size: (60, 64, 3),
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn frame_embed_constant_grid_equals_single_cell_path() {
        let cfg = small_cfg();
        let mut rng = seeding::stream(2, "init", 0);
        let params = init_params(&cfg, &mut rng);
        let cells = cfg.cells();
        let cell: Vec<f64> = (0..cfg.channels).map(|i| 0.1 * i as f64).collect();
        let mut grid_vals = Vec::new();
        for _ in 0..cells {
            grid_vals.extend_from_slice(&cell);
        }
        let grid = FeatureGrid {
            values: TensorData::new(vec![cells, cfg.channels], grid_vals).unwrap(),
            grid_h: cfg.grid_h(),
            grid_w: cfg.grid_w(),
        };
        let one_cell_grid = FeatureGrid {
            values: TensorData::new(vec![1, cfg.channels], cell).unwrap(),
            grid_h: 1,
            grid_w: 1,
        };
        let a = frame_embed(&grid, &params, &cfg, false).unwrap();
        let b = frame_embed(&one_cell_grid, &params, &cfg, false).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_embed_normalized_has_unit_norm() {
        let cfg = small_cfg();
        let mut rng = seeding::stream(3, "init", 0);
        let params = init_params(&cfg, &mut rng);
        let grid = encode_grid(&rand_image(&cfg, 1), &params, &cfg).unwrap();
        let e = frame_embed(&grid, &params, &cfg, true).unwrap();
        let norm: f64 = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = small_cfg();
        let mut rng = seeding::stream(4, "init", 0);
        let params = init_params(&cfg, &mut rng);
        let img = rand_image(&cfg, 9);
        let a = encode_grid(&img, &params, &cfg).unwrap();
        let b = encode_grid(&img, &params, &cfg).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn aggregate_shot_mean_properties() {
        let v = vec![1.0, 0.0];
        let w = vec![0.0, 1.0];
        assert_eq!(aggregate_shot(&[v.clone(), v.clone()]).unwrap(), v);
        assert_eq!(
            aggregate_shot(&[v.clone(), w.clone()]).unwrap(),
            vec![0.5, 0.5]
        );
        assert_eq!(
            aggregate_shot(&[v.clone(), w.clone()]).unwrap(),
            aggregate_shot(&[w, v]).unwrap()
        );
        assert!(aggregate_shot(&[]).is_err());
    }

    #[test]
    fn zero_lstm_weights_give_zero_predictions() {
        let cfg = small_cfg();
        let mut rng = seeding::stream(5, "init", 0);
        let mut params = init_params(&cfg, &mut rng);
        for name in ["lstm.w_ih", "lstm.w_hh", "lstm.b", "lstm.out.w", "lstm.out.b"] {
            let t = params.get_mut(name).unwrap();
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let preds =
            predict_next_shots(&[vec![1.0; 4], vec![-1.0; 4]], &params, &cfg, 2).unwrap();
        for p in preds {
            assert!(p.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn multi_step_prediction_prefix_is_causal() {
        let cfg = small_cfg();
        let mut rng = seeding::stream(6, "init", 0);
        let params = init_params(&cfg, &mut rng);
        let reps = vec![vec![0.3, -0.2, 0.1, 0.5], vec![0.0, 0.4, -0.1, 0.2]];
        let one = predict_next_shots(&reps, &params, &cfg, 1).unwrap();
        let two = predict_next_shots(&reps, &params, &cfg, 2).unwrap();
        for (a, b) in one[0].iter().zip(two[0].iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(predict_next_shots(&[], &params, &cfg, 1).is_err());
    }

    #[test]
    fn critic_identity_is_dot_product() {
        let cfg = small_cfg();
        let mut rng = seeding::stream(7, "init", 0);
        let mut params = init_params(&cfg, &mut rng);
        let d = cfg.embed_dim;
        let eye = {
            let mut t = TensorData::zeros(vec![d, d]);
            for i in 0..d {
                t.data_mut()[i * d + i] = 1.0;
            }
            t
        };
        params.insert("critic.B", eye);
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![0.5, -1.0, 2.0, 0.0];
        let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
        assert!((critic_score(&a, &b, &params).unwrap() - dot).abs() < 1e-12);
        assert_eq!(critic_score(&[0.0; 4], &b, &params).unwrap(), 0.0);
    }

    #[test]
    fn critic_matches_triple_loop_oracle() {
        let cfg = small_cfg();
        let mut rng = seeding::stream(8, "init", 0);
        let params = init_params(&cfg, &mut rng);
        let b = params.get("critic.B").unwrap();
        let d = cfg.embed_dim;
        let mut r = seeding::stream(8, "vals", 0);
        let s_hat: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let s: Vec<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let mut oracle = 0.0;
        for i in 0..d {
            for j in 0..d {
                oracle += s_hat[i] * b.data()[i * d + j] * s[j];
            }
        }
        assert!((critic_score(&s_hat, &s, &params).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn receptive_field_locality() {
        // A cell's value must not change when pixels outside its receptive
        // field (own patch + `blocks` rounds of 3x3 neighbor mixing) change.
        let cfg = EncoderConfig {
            image_size: (40, 40, 3),
            stride: 8,
            channels: 6,
            blocks: 1,
            ..small_cfg()
        };
        let mut rng = seeding::stream(9, "init", 0);
        let params = init_params(&cfg, &mut rng);
        let img = rand_image(&cfg, 2);
        let grid = encode_grid(&img, &params, &cfg).unwrap();
        // With 1 block, cell (0,0) sees patches (0..2, 0..2). Change a pixel
        // in patch (4,4) and verify cell (0,0) is untouched.
        let mut img2 = img.clone();
        let (_, w, c) = cfg.image_size;
        let (py, px) = (4 * 8 + 3, 4 * 8 + 3);
        img2.data_mut()[(py * w + px) * c] = 1.0 - img.data()[(py * w + px) * c];
        let grid2 = encode_grid(&img2, &params, &cfg).unwrap();
        assert_eq!(grid.cell(0, 0), grid2.cell(0, 0));
        // Sanity: the perturbed cell itself does change.
        assert_ne!(grid.cell(4, 4), grid2.cell(4, 4));
    }

    #[test]
    fn gathered_box_embeddings_share_cells() {
        let cfg = small_cfg();
        let mut rng = seeding::stream(10, "init", 0);
        let params = init_params(&cfg, &mut rng);
        let mut g = Graph::new();
        let pn = insert_params(&mut g, &params, false).unwrap();
        let patches = patchify(&[&rand_image(&cfg, 5)], &cfg).unwrap();
        let enc = encode_batch(&mut g, &pn, patches, &cfg).unwrap();
        let key = GroupKey {
            video: 0,
            shot: 0,
            frame: 0,
        };
        let mk = |x: f64, y: f64| DetectedBox {
            category_id: 0,
            score: 1.0,
            bbox: BBox {
                x_min: x - 0.05,
                y_min: y - 0.05,
                x_max: x + 0.05,
                y_max: y + 0.05,
            },
        };
        // Same center cell -> identical embeddings.
        let boxes = vec![(0, key, mk(0.3, 0.3)), (0, key, mk(0.3, 0.3))];
        let set = gather_box_embeddings(&mut g, &pn, enc.grid, &boxes, &cfg)
            .unwrap()
            .unwrap();
        let vals = g.value(set.node);
        let d = vals.shape()[1];
        assert_eq!(&vals.data()[..d], &vals.data()[d..2 * d]);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_grids() {
        let cfg = small_cfg();
        let mut rng = seeding::stream(11, "init", 0);
        let params = init_params(&cfg, &mut rng);
        let dir = std::env::temp_dir().join("hiervid_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.hvt");
        params.save(&path).unwrap();
        let loaded = ParamSet::load(&path).unwrap();
        assert_eq!(params, loaded);
        let img = rand_image(&cfg, 3);
        let a = encode_grid(&img, &params, &cfg).unwrap();
        let b = encode_grid(&img, &loaded, &cfg).unwrap();
        assert_eq!(a.values, b.values);
        std::fs::remove_dir_all(&dir).ok();
    }
}
