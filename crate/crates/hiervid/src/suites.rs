//! Self-contained verification suites behind `hiervid gradcheck` and
//! `hiervid oracle-check`: finite-difference gradient validation for every
//! graph operation, the encoder and the full combined objective, and
//! independent brute-force oracles for mining, InfoNCE algebra and
//! Fisher's exact test.

use crate::encoder::{self, EncoderConfig};
use crate::error::Result;
use crate::evalsuite;
use crate::losses::{self, LossWeights, ObjectPool, Triplet};
use crate::seeding;
use crate::synth::{generate_video, SceneSpec};
use crate::trainer::{self, AblationMode, OptimizerConfig, TrainConfig};
use rand::Rng;
use std::collections::BTreeMap;
use tensor_core::{finite_diff_check, Graph, NodeId, ParamSet, TensorData};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: String,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "[{}] {}: {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        out.push_str(&format!(
            "{}: {}\n",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

/// Move every parameter to a generic random point. Fresh initializations
/// zero some biases, which at the tiny check scale can leave a relu layer
/// fully dead and the head output exactly at the L2-normalization origin,
/// where finite differences are meaningless.
fn jitter_params<R: Rng>(params: &mut ParamSet, rng: &mut R) {
    let names: Vec<String> = params.names().map(|s| s.to_string()).collect();
    for name in names {
        for v in params.get_mut(&name).unwrap().data_mut() {
            *v += rng.gen_range(-0.4..0.4);
        }
    }
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, lo: f64, hi: f64) -> TensorData {
    let n: usize = shape.iter().product::<usize>().max(1);
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    TensorData::new(shape, data).unwrap()
}

/// Finite-difference check of one graph construction against its analytic
/// gradients; the built node is reduced to a scalar by summation.
fn check_graph_op<F>(name: &str, inputs: &[TensorData], build: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |ins: &[TensorData]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ins
            .iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect::<std::result::Result<_, _>>()?;
        let out = build(&mut g, &ids)?;
        let loss = if g.value(out).shape().is_empty() {
            out
        } else {
            g.sum(out)?
        };
        let v = g.value(loss).item()?;
        g.backward(loss)?;
        let grads = ids
            .iter()
            .map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_default())
            .collect();
        Ok((v, grads))
    };
    let (_, analytic) = eval(inputs)?;
    let mut max_rel = 0.0f64;
    for (ii, input) in inputs.iter().enumerate() {
        let zero = vec![0.0; input.numel()];
        let grads = if analytic[ii].is_empty() {
            &zero
        } else {
            &analytic[ii]
        };
        for k in 0..input.numel() {
            let mut work: Vec<TensorData> = inputs.to_vec();
            work[ii].data_mut()[k] += FD_STEP;
            let plus = eval(&work)?.0;
            work[ii].data_mut()[k] -= 2.0 * FD_STEP;
            let minus = eval(&work)?.0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grads[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        passed: max_rel < GRAD_TOL,
        detail: format!("max rel err {:.3e}", max_rel),
    })
}

/// Gradient checks for every differentiable graph operation over random
/// shapes and values.
fn op_gradchecks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    let trials = 4usize;
    for trial in 0..trials {
        let mut rng = seeding::stream(seed, "gradcheck-ops", trial as u64);
        let m = rng.gen_range(2..5usize);
        let k = rng.gen_range(2..5usize);
        let n = rng.gen_range(2..5usize);
        let a = rand_tensor(&mut rng, vec![m, k], -1.0, 1.0);
        let b = rand_tensor(&mut rng, vec![m, k], -1.0, 1.0);
        let w = rand_tensor(&mut rng, vec![k, n], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, vec![k], -1.0, 1.0);
        let pos = rand_tensor(&mut rng, vec![m, k], 0.1, 2.0);
        // Keep values away from relu/max kinks so central differences are
        // valid.
        let t = format!("#{}", trial);
        results.push(check_graph_op(&format!("add{}", t), &[a.clone(), b.clone()], |g, i| {
            Ok(g.add(i[0], i[1])?)
        })?);
        results.push(check_graph_op(
            &format!("add_broadcast{}", t),
            &[a.clone(), bias.clone()],
            |g, i| Ok(g.add(i[0], i[1])?),
        )?);
        results.push(check_graph_op(&format!("sub{}", t), &[a.clone(), b.clone()], |g, i| {
            Ok(g.sub(i[0], i[1])?)
        })?);
        results.push(check_graph_op(&format!("mul{}", t), &[a.clone(), b.clone()], |g, i| {
            Ok(g.mul(i[0], i[1])?)
        })?);
        results.push(check_graph_op(
            &format!("matmul{}", t),
            &[a.clone(), w.clone()],
            |g, i| Ok(g.matmul(i[0], i[1])?),
        )?);
        results.push(check_graph_op(&format!("relu{}", t), &[pos.clone()], |g, i| {
            Ok(g.relu(i[0])?)
        })?);
        results.push(check_graph_op(&format!("tanh{}", t), &[a.clone()], |g, i| {
            Ok(g.tanh(i[0])?)
        })?);
        results.push(check_graph_op(&format!("sigmoid{}", t), &[a.clone()], |g, i| {
            Ok(g.sigmoid(i[0])?)
        })?);
        results.push(check_graph_op(&format!("exp{}", t), &[a.clone()], |g, i| {
            Ok(g.exp(i[0])?)
        })?);
        results.push(check_graph_op(&format!("log{}", t), &[pos.clone()], |g, i| {
            Ok(g.log(i[0])?)
        })?);
        results.push(check_graph_op(&format!("scale{}", t), &[a.clone()], |g, i| {
            Ok(g.scale(i[0], -1.7)?)
        })?);
        results.push(check_graph_op(&format!("add_scalar{}", t), &[a.clone()], |g, i| {
            Ok(g.add_scalar(i[0], 0.3)?)
        })?);
        results.push(check_graph_op(&format!("neg{}", t), &[a.clone()], |g, i| {
            Ok(g.neg(i[0])?)
        })?);
        results.push(check_graph_op(&format!("sum{}", t), &[a.clone()], |g, i| {
            Ok(g.sum(i[0])?)
        })?);
        results.push(check_graph_op(&format!("mean{}", t), &[a.clone()], |g, i| {
            Ok(g.mean(i[0])?)
        })?);
        results.push(check_graph_op(&format!("max{}", t), &[a.clone()], |g, i| {
            Ok(g.max(i[0])?)
        })?);
        results.push(check_graph_op(&format!("sum_axis0{}", t), &[a.clone()], |g, i| {
            Ok(g.sum_axis(i[0], 0)?)
        })?);
        results.push(check_graph_op(&format!("sum_axis1{}", t), &[a.clone()], |g, i| {
            Ok(g.sum_axis(i[0], 1)?)
        })?);
        results.push(check_graph_op(
            &format!("concat{}", t),
            &[a.clone(), b.clone()],
            |g, i| Ok(g.concat(i)?),
        )?);
        results.push(check_graph_op(&format!("slice{}", t), &[a.clone()], |g, i| {
            Ok(g.slice(i[0], 1, 0, 1)?)
        })?);
        results.push(check_graph_op(&format!("reshape{}", t), &[a.clone()], |g, i| {
            let numel = g.value(i[0]).numel();
            Ok(g.reshape(i[0], vec![numel])?)
        })?);
        results.push(check_graph_op(&format!("transpose{}", t), &[a.clone()], |g, i| {
            Ok(g.transpose(i[0])?)
        })?);
        results.push(check_graph_op(&format!("gather_rows{}", t), &[a.clone()], |g, i| {
            Ok(g.gather_rows(i[0], &[0, 0, m - 1])?)
        })?);
        let grid = rand_tensor(&mut rng, vec![2 * 2 * 3, k], -1.0, 1.0);
        results.push(check_graph_op(
            &format!("neighbor_mean{}", t),
            &[grid.clone()],
            |g, i| Ok(g.neighbor_mean(i[0], 2, 3)?),
        )?);
        results.push(check_graph_op(&format!("mean_groups{}", t), &[a.clone()], |g, i| {
            Ok(g.mean_groups(i[0], 1)?)
        })?);
        results.push(check_graph_op(
            &format!("l2_normalize{}", t),
            &[pos.clone(), b.clone()],
            |g, i| {
                // Weight the normalized rows so the loss is not constant in
                // the input (each row has unit norm after normalization).
                let n = g.l2_normalize(i[0], 1, 1e-12)?;
                let p = g.mul(n, i[1])?;
                Ok(g.sum(p)?)
            },
        )?);
        results.push(check_graph_op(&format!("logsumexp{}", t), &[a.clone()], |g, i| {
            Ok(g.logsumexp(i[0], 1)?)
        })?);
        results.push(check_graph_op(&format!("softmax{}", t), &[a.clone()], |g, i| {
            let s = g.softmax(i[0], 1)?;
            let sq = g.mul(s, s)?;
            Ok(g.sum(sq)?)
        })?);
    }
    Ok(results)
}

fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        image_size: (8, 8, 3),
        stride: 4,
        channels: 4,
        blocks: 1,
        embed_dim: 3,
        lstm_hidden: 3,
        num_categories: 3,
        ..EncoderConfig::default()
    }
}

/// Check the full encoder path (patch embed, mixing blocks, frame head)
/// against finite differences over every parameter.
fn encoder_gradcheck(seed: u64) -> Result<CheckResult> {
    let cfg = tiny_encoder_config();
    let mut rng = seeding::stream(seed, "gradcheck-encoder", 0);
    let mut params = encoder::init_params(&cfg, &mut rng);
    jitter_params(&mut params, &mut rng);
    let image = rand_tensor(&mut rng, vec![8, 8, 3], 0.0, 1.0);
    let direction = rand_tensor(&mut rng, vec![1, cfg.embed_dim], -1.0, 1.0);
    let loss_of = |p: &ParamSet| -> Result<(f64, Option<BTreeMap<String, Vec<f64>>>)> {
        let mut g = Graph::new();
        let pn = encoder::insert_params(&mut g, p, true)?;
        let patches = encoder::patchify(&[&image], &cfg)?;
        let enc = encoder::encode_batch(&mut g, &pn, patches, &cfg)?;
        let dir = g.constant(direction.clone())?;
        let weighted = g.mul(enc.frame_embed_norm, dir)?;
        let loss = g.sum(weighted)?;
        let v = g.value(loss).item()?;
        g.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, id) in pn.iter() {
            if let Some(gr) = g.grad(id) {
                grads.insert(name.to_string(), gr.to_vec());
            }
        }
        Ok((v, Some(grads)))
    };
    let (_, analytic) = loss_of(&params)?;
    let report = finite_diff_check(
        &params,
        &analytic.unwrap(),
        |p| {
            loss_of(p).map(|(v, _)| v).map_err(|e| tensor_core::TensorError::Invalid {
                op: "gradcheck",
                msg: e.to_string(),
            })
        },
        FD_STEP,
        GRAD_TOL,
    )?;
    Ok(CheckResult {
        name: "encoder".to_string(),
        passed: report.passed(),
        detail: match &report.worst {
            Some(w) => format!(
                "{} entries, max rel err {:.3e} at {}[{}] (analytic {:.3e}, numeric {:.3e})",
                report.checked, report.max_rel_err, w.name, w.index, w.analytic, w.numeric
            ),
            None => format!("{} entries, max rel err {:.3e}", report.checked, report.max_rel_err),
        },
    })
}

/// Check the full combined objective (object + frame + shot losses through
/// the shared encoder) on a 2-video, 2-shot, 3-frame, <=3-box batch.
fn combined_loss_gradcheck(seed: u64) -> Result<CheckResult> {
    let cfg = TrainConfig {
        corpus: std::path::PathBuf::new(),
        stills_corpus: None,
        videos_per_batch: 2,
        shots_per_episode: 2,
        frames_per_shot: 3,
        prediction_steps: 1,
        encoder: tiny_encoder_config(),
        weights: LossWeights::default(),
        ablation: AblationMode::None,
        object_pool: ObjectPool::Batch,
        optimizer: OptimizerConfig::default(),
        steps: 2000,
        seed,
        checkpoint: std::path::PathBuf::new(),
        log: None,
        checkpoint_interval: 500,
        stills_batch: 4,
        score_threshold: 0.05,
        max_boxes: 3,
    };
    let spec = SceneSpec {
        image_size: (8, 8, 3),
        num_categories: 3,
        objects_range: (1, 3),
        shot_len_range: (3, 4),
        shots_per_video_range: (2, 2),
        ..SceneSpec::default()
    };
    let mut rng = seeding::stream(seed, "gradcheck-batch", 0);
    let mut images = Vec::new();
    let mut boxes = Vec::new();
    for vi in 0..2 {
        let video = generate_video(&spec, &format!("g{}", vi), &mut rng)?;
        let frames: Vec<_> = video.frames().collect();
        for f in frames.iter().take(6) {
            images.push(f.image.clone());
            boxes.push(f.boxes.iter().take(cfg.max_boxes).copied().collect());
        }
    }
    let batch = trainer::Batch { images, boxes };
    let mut prng = seeding::stream(seed, "gradcheck-params", 0);
    let mut params = encoder::init_params(&cfg.encoder, &mut prng);
    jitter_params(&mut params, &mut prng);
    let loss_of = |p: &ParamSet| -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
        let mut g = Graph::new();
        let pn = encoder::insert_params(&mut g, p, true)?;
        let out = trainer::forward_step(&mut g, &pn, &batch, &cfg, None)?;
        let v = g.value(out.loss).item()?;
        g.backward(out.loss)?;
        let mut grads = BTreeMap::new();
        for (name, id) in pn.iter() {
            if let Some(gr) = g.grad(id) {
                grads.insert(name.to_string(), gr.to_vec());
            }
        }
        Ok((v, grads))
    };
    let (_, analytic) = loss_of(&params)?;
    let report = finite_diff_check(
        &params,
        &analytic,
        |p| {
            loss_of(p).map(|(v, _)| v).map_err(|e| tensor_core::TensorError::Invalid {
                op: "gradcheck",
                msg: e.to_string(),
            })
        },
        FD_STEP,
        GRAD_TOL,
    )?;
    Ok(CheckResult {
        name: "combined_loss".to_string(),
        passed: report.passed(),
        detail: match &report.worst {
            Some(w) => format!(
                "{} entries, max rel err {:.3e} at {}[{}] (analytic {:.3e}, numeric {:.3e})",
                report.checked, report.max_rel_err, w.name, w.index, w.analytic, w.numeric
            ),
            None => format!("{} entries, max rel err {:.3e}", report.checked, report.max_rel_err),
        },
    })
}

/// The full gradient-verification suite behind `hiervid gradcheck`.
pub fn gradcheck_suite(seed: u64) -> Result<SuiteReport> {
    let mut checks = op_gradchecks(seed)?;
    // Collapse per-op trial results into one line per suite section for
    // readability while keeping failures identifiable.
    let ops_passed = checks.iter().all(|c| c.passed);
    let worst = checks
        .iter()
        .map(|c| c.detail.clone())
        .max()
        .unwrap_or_default();
    let failures: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.clone())
        .collect();
    checks = vec![CheckResult {
        name: "ops".to_string(),
        passed: ops_passed,
        detail: if failures.is_empty() {
            format!("all graph ops, worst case {}", worst)
        } else {
            format!("failed: {}", failures.join(", "))
        },
    }];
    checks.push(encoder_gradcheck(seed)?);
    checks.push(combined_loss_gradcheck(seed)?);
    Ok(SuiteReport {
        name: "gradcheck".to_string(),
        checks,
    })
}

/// Brute-force semi-hard reference, independent of the mining code.
fn brute_force_triplets(
    values: &TensorData,
    labels: &[i64],
) -> (Vec<Triplet>, f64, usize) {
    let n = labels.len();
    let d = values.shape()[1];
    let row = |i: usize| &values.data()[i * d..(i + 1) * d];
    let dist = |i: usize, j: usize| -> f64 {
        row(i)
            .iter()
            .zip(row(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    let mut triplets = Vec::new();
    let mut hinges = Vec::new();
    let mut skipped = 0usize;
    for a in 0..n {
        for p in 0..n {
            if a == p || labels[a] != labels[p] {
                continue;
            }
            let dap = dist(a, p);
            let mut semi: Option<(f64, usize)> = None;
            let mut far: Option<(f64, usize)> = None;
            for neg in 0..n {
                if labels[neg] == labels[a] {
                    continue;
                }
                let dan = dist(a, neg);
                if dan > dap && semi.map_or(true, |(bd, _)| dan < bd) {
                    semi = Some((dan, neg));
                }
                if far.map_or(true, |(bd, _)| dan > bd) {
                    far = Some((dan, neg));
                }
            }
            match semi.or(far) {
                Some((dan, neg)) => {
                    triplets.push(Triplet {
                        anchor: a,
                        positive: p,
                        negative: neg,
                    });
                    hinges.push((dap - dan + 0.2).max(0.0));
                }
                None => skipped += 1,
            }
        }
    }
    let loss = if hinges.is_empty() {
        0.0
    } else {
        hinges.iter().sum::<f64>() / hinges.len() as f64
    };
    (triplets, loss, skipped)
}

fn mining_oracle_check(seed: u64) -> Result<CheckResult> {
    let pools = 200usize;
    let mut max_err = 0.0f64;
    for pool in 0..pools {
        let mut rng = seeding::stream(seed, "oracle-mining", pool as u64);
        let n = rng.gen_range(3..=32usize);
        let d = rng.gen_range(2..=16usize);
        let values = {
            let mut t = rand_tensor(&mut rng, vec![n, d], -1.0, 1.0);
            for i in 0..n {
                let row = &mut t.data_mut()[i * d..(i + 1) * d];
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                for v in row {
                    *v /= norm;
                }
            }
            t
        };
        let classes = rng.gen_range(2..=4i64);
        let labels: Vec<i64> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let (oracle_triplets, oracle_loss, oracle_skipped) =
            brute_force_triplets(&values, &labels);
        let pairs = losses::same_label_pairs(&labels);
        let (mined, skipped) = losses::semi_hard_mine(&values, &labels, &pairs);
        if mined != oracle_triplets || skipped != oracle_skipped {
            return Ok(CheckResult {
                name: "mining_oracle".to_string(),
                passed: false,
                detail: format!("pool {} selected different triplets", pool),
            });
        }
        let mut g = Graph::new();
        let e = g.leaf(values, false)?;
        let term = losses::triplet_loss(&mut g, e, &mined, 0.2)?;
        let got = g.value(term.node).item()?;
        max_err = max_err.max((got - oracle_loss).abs());
    }
    Ok(CheckResult {
        name: "mining_oracle".to_string(),
        passed: max_err < 1e-10,
        detail: format!("{} pools, max loss err {:.3e}", pools, max_err),
    })
}

fn infonce_algebra_check(seed: u64) -> Result<CheckResult> {
    // Uniform critic: exactly zero.
    {
        let mut g = Graph::new();
        let t = TensorData::new(vec![3, 2], vec![0.4; 6])?;
        let p = g.leaf(t.clone(), false)?;
        let q = g.leaf(t, false)?;
        let mut rng = seeding::stream(seed, "oracle-infonce-uniform", 0);
        let b = g.leaf(rand_tensor(&mut rng, vec![2, 2], -1.0, 1.0), false)?;
        let l = losses::shot_infonce(&mut g, b, &[(p, q)])?;
        if g.value(l).item()? != 0.0 {
            return Ok(CheckResult {
                name: "infonce_algebra".to_string(),
                passed: false,
                detail: "uniform critic loss nonzero".to_string(),
            });
        }
    }
    let batches = 1000usize;
    let mut max_shift_err = 0.0f64;
    for b in 0..batches {
        let mut rng = seeding::stream(seed, "oracle-infonce", b as u64);
        let n = rng.gen_range(2..=8usize);
        let d = rng.gen_range(2..=6usize);
        let preds = rand_tensor(&mut rng, vec![n, d], -1.0, 1.0);
        let targets = rand_tensor(&mut rng, vec![n, d], -1.0, 1.0);
        let bmat = rand_tensor(&mut rng, vec![d, d], -1.0, 1.0);
        let mut g = Graph::new();
        let pn = g.leaf(preds.clone(), false)?;
        let tn = g.leaf(targets.clone(), false)?;
        let bn = g.leaf(bmat.clone(), false)?;
        let l = losses::shot_infonce(&mut g, bn, &[(pn, tn)])?;
        let base = g.value(l).item()?;
        if base < -(n as f64).ln() - 1e-12 {
            return Ok(CheckResult {
                name: "infonce_algebra".to_string(),
                passed: false,
                detail: format!("batch {}: loss {} below -ln N", b, base),
            });
        }
        // Shift invariance: recompute from raw scores with +c added.
        let c = rng.gen_range(-5.0..5.0);
        let mut shifted = 0.0;
        for i in 0..n {
            let mut row = vec![0.0; n];
            for (j, r) in row.iter_mut().enumerate() {
                let mut acc = 0.0;
                for x in 0..d {
                    for y in 0..d {
                        acc += preds.data()[i * d + x]
                            * bmat.data()[x * d + y]
                            * targets.data()[j * d + y];
                    }
                }
                *r = acc + c;
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            shifted += lse - (n as f64).ln() - row[i];
        }
        shifted /= n as f64;
        max_shift_err = max_shift_err.max((shifted - base).abs());
    }
    Ok(CheckResult {
        name: "infonce_algebra".to_string(),
        passed: max_shift_err < 1e-9,
        detail: format!(
            "{} batches, lower bound held, max shift err {:.3e}",
            batches, max_shift_err
        ),
    })
}

/// Independent Fisher reference via products of binomial coefficients.
fn fisher_reference(a: u64, b: u64, c: u64, d: u64) -> f64 {
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

fn fisher_oracle_check() -> Result<CheckResult> {
    let max_total = 40u64;
    let mut checked = 0usize;
    let mut max_err = 0.0f64;
    for a in 0..=max_total {
        for b in 0..=max_total - a {
            for c in 0..=max_total - a - b {
                for d in 0..=max_total - a - b - c {
                    if a + b + c + d == 0 {
                        continue;
                    }
                    let p = evalsuite::fisher_exact_2x2([[a, b], [c, d]])?;
                    let o = fisher_reference(a, b, c, d);
                    let err = (p - o).abs();
                    if err > max_err {
                        max_err = err;
                    }
                    checked += 1;
                    if err >= 1e-9 {
                        return Ok(CheckResult {
                            name: "fisher_oracle".to_string(),
                            passed: false,
                            detail: format!(
                                "[[{},{}],[{},{}]]: {} vs {}",
                                a, b, c, d, p, o
                            ),
                        });
                    }
                }
            }
        }
    }
    Ok(CheckResult {
        name: "fisher_oracle".to_string(),
        passed: true,
        detail: format!("{} tables (total <= 40), max err {:.3e}", checked, max_err),
    })
}

/// The independent-oracle suite behind `hiervid oracle-check`.
pub fn oracle_suite(seed: u64) -> Result<SuiteReport> {
    Ok(SuiteReport {
        name: "oracle-check".to_string(),
        checks: vec![
            mining_oracle_check(seed)?,
            infonce_algebra_check(seed)?,
            fisher_oracle_check()?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradcheck_suite_passes() {
        let report = gradcheck_suite(0).unwrap();
        assert!(report.passed(), "{}", report.render());
    }

    #[test]
    fn oracle_suite_passes() {
        let report = oracle_suite(0).unwrap();
        assert!(report.passed(), "{}", report.render());
    }
}
