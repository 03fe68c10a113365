//! Synthetic annotated videos: moving shapes over per-shot backgrounds,
//! a simulated noisy detector, and the box/label randomization ablations.

use crate::error::Result;
use crate::hierarchy::{filter_box_list, AnnotatedVideo, BBox, DetectedBox, Frame, Shot};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tensor_core::TensorData;

pub const MIN_BOX_SIDE: f64 = 0.02;

/// Shape kind per category; categories map onto this list cyclically.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

pub const SHAPE_KINDS: [ShapeKind; 6] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::Triangle,
    ShapeKind::Cross,
    ShapeKind::Ring,
    ShapeKind::Bar,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Solid,
    Gradient,
    Noise,
}

fn d_num_categories() -> usize {
    6
}
fn d_objects_range() -> (usize, usize) {
    (1, 4)
}
fn d_image_size() -> (usize, usize, usize) {
    (64, 64, 3)
}
fn d_scale_range() -> (f64, f64) {
    (0.18, 0.34)
}
fn d_speed_range() -> (f64, f64) {
    (0.005, 0.03)
}
fn d_shot_len_range() -> (usize, usize) {
    (4, 6)
}
fn d_shots_range() -> (usize, usize) {
    (2, 4)
}
fn d_backgrounds() -> Vec<BackgroundKind> {
    vec![
        BackgroundKind::Solid,
        BackgroundKind::Gradient,
        BackgroundKind::Noise,
    ]
}

/// Controls for synthetic video generation.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    #[serde(default = "d_num_categories")]
    pub num_categories: usize,
    /// Inclusive range of objects per scene.
    #[serde(default = "d_objects_range")]
    pub objects_range: (usize, usize),
    /// (height, width, channels)
    #[serde(default = "d_image_size")]
    pub image_size: (usize, usize, usize),
    /// Object size as a fraction of the frame, inclusive range.
    #[serde(default = "d_scale_range")]
    pub scale_range: (f64, f64),
    /// Center speed per frame in normalized units, inclusive range.
    #[serde(default = "d_speed_range")]
    pub speed_range: (f64, f64),
    #[serde(default = "d_shot_len_range")]
    pub shot_len_range: (usize, usize),
    #[serde(default = "d_shots_range")]
    pub shots_per_video_range: (usize, usize),
    #[serde(default = "d_backgrounds")]
    pub backgrounds: Vec<BackgroundKind>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

impl SceneSpec {
    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errors = Vec::new();
        if self.num_categories == 0 {
            errors.push("scene.num_categories must be positive".into());
        }
        if self.objects_range.0 == 0 || self.objects_range.0 > self.objects_range.1 {
            errors.push("scene.objects_range must be a nonempty positive range".into());
        }
        let (h, w, c) = self.image_size;
        if h == 0 || w == 0 || c == 0 {
            errors.push("scene.image_size extents must be positive".into());
        }
        if !(self.scale_range.0 > 0.0 && self.scale_range.0 <= self.scale_range.1) {
            errors.push("scene.scale_range invalid".into());
        }
        if self.shot_len_range.0 == 0 || self.shot_len_range.0 > self.shot_len_range.1 {
            errors.push("scene.shot_len_range invalid".into());
        }
        if self.shots_per_video_range.0 < 2 || self.shots_per_video_range.0 > self.shots_per_video_range.1 {
            errors.push("scene.shots_per_video_range must start at >= 2".into());
        }
        if self.backgrounds.is_empty() {
            errors.push("scene.backgrounds must not be empty".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }

    pub fn shape_for(&self, category: usize) -> ShapeKind {
        SHAPE_KINDS[category % SHAPE_KINDS.len()]
    }
}

/// Score model of the simulated detector: clamped Gaussians for correct and
/// flipped labels.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScoreModel {
    pub correct_mean: f64,
    pub correct_std: f64,
    pub flipped_mean: f64,
    pub flipped_std: f64,
}

/// Imperfection model standing in for an off-the-shelf object detector.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorNoise {
    #[serde(default)]
    pub label_flip_prob: f64,
    /// Gaussian std per box coordinate, normalized units.
    #[serde(default)]
    pub box_jitter_std: f64,
    #[serde(default)]
    pub miss_prob: f64,
    #[serde(default = "DetectorNoise::default_score_model")]
    pub score_model: ScoreModel,
}

impl DetectorNoise {
    fn default_score_model() -> ScoreModel {
        ScoreModel {
            correct_mean: 1.0,
            correct_std: 0.0,
            flipped_mean: 0.3,
            flipped_std: 0.1,
        }
    }

    /// Zero noise: boxes pass through untouched with score 1.0.
    pub fn none() -> Self {
        DetectorNoise {
            label_flip_prob: 0.0,
            box_jitter_std: 0.0,
            miss_prob: 0.0,
            score_model: Self::default_score_model(),
        }
    }

    /// The standard imperfect detector used in experiments.
    pub fn standard() -> Self {
        DetectorNoise {
            label_flip_prob: 0.1,
            box_jitter_std: 0.02,
            miss_prob: 0.1,
            score_model: ScoreModel {
                correct_mean: 0.8,
                correct_std: 0.1,
                flipped_mean: 0.3,
                flipped_std: 0.1,
            },
        }
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<String>> {
        let mut errors = Vec::new();
        for (name, v) in [
            ("detector.label_flip_prob", self.label_flip_prob),
            ("detector.miss_prob", self.miss_prob),
        ] {
            if !(0.0..=1.0).contains(&v) {
                errors.push(format!("{} must be in [0,1], got {}", name, v));
            }
        }
        if self.box_jitter_std < 0.0 {
            errors.push("detector.box_jitter_std must be >= 0".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(errors)
        }
    }
}

impl Default for DetectorNoise {
    fn default() -> Self {
        DetectorNoise::none()
    }
}

struct ObjectState {
    category: usize,
    color: [f64; 3],
    /// Full object extent as a fraction of the frame.
    scale: f64,
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
}

impl ObjectState {
    fn half(&self) -> f64 {
        self.scale / 2.0
    }

    /// Tight extents (half-width, half-height) of the rendered shape.
    fn extents(&self, kind: ShapeKind) -> (f64, f64) {
        let r = self.half();
        match kind {
            ShapeKind::Bar => (r, r / 3.0),
            _ => (r, r),
        }
    }

    fn step(&mut self) {
        self.cx += self.vx;
        self.cy += self.vy;
        // Reflect to keep the center inside [0.1, 0.9].
        if self.cx < 0.1 {
            self.cx = 0.2 - self.cx;
            self.vx = -self.vx;
        } else if self.cx > 0.9 {
            self.cx = 1.8 - self.cx;
            self.vx = -self.vx;
        }
        if self.cy < 0.1 {
            self.cy = 0.2 - self.cy;
            self.vy = -self.vy;
        } else if self.cy > 0.9 {
            self.cy = 1.8 - self.cy;
            self.vy = -self.vy;
        }
    }
}

fn inside_shape(kind: ShapeKind, dx: f64, dy: f64, r: f64) -> bool {
    match kind {
        ShapeKind::Disk => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
        ShapeKind::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
        ShapeKind::Cross => {
            (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
        }
        ShapeKind::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        ShapeKind::Bar => dx.abs() <= r && dy.abs() <= r / 3.0,
    }
}

enum Background {
    Solid([f64; 3]),
    Gradient {
        a: [f64; 3],
        b: [f64; 3],
        drift: f64,
    },
    Noise {
        texture: Vec<f64>,
        h: usize,
        w: usize,
        c: usize,
        shift: (usize, usize),
    },
}

impl Background {
    fn pixel(&self, y: usize, x: usize, ch: usize, h: usize, w: usize, t: usize) -> f64 {
        match self {
            Background::Solid(color) => color[ch % 3],
            Background::Gradient { a, b, drift } => {
                let tt = ((x as f64 / w as f64 + y as f64 / h as f64) / 2.0
                    + drift * t as f64)
                    .rem_euclid(1.0);
                a[ch % 3] * (1.0 - tt) + b[ch % 3] * tt
            }
            Background::Noise {
                texture,
                h: th,
                w: tw,
                c,
                shift,
            } => {
                let yy = (y + shift.0 * t) % th;
                let xx = (x + shift.1 * t) % tw;
                texture[(yy * tw + xx) * c + ch]
            }
        }
    }
}

/// Generate one synthetic video with ground-truth boxes (score 1.0). Object
/// identities persist across shots; each shot re-randomizes the background,
/// camera drift and object positions, and objects move continuously within
/// the shot, reflecting off the [0.1, 0.9] center band.
pub fn generate_video<R: Rng>(
    spec: &SceneSpec,
    video_id: &str,
    rng: &mut R,
) -> Result<AnnotatedVideo> {
    let (h, w, c) = spec.image_size;
    let n_objects = rng.gen_range(spec.objects_range.0..=spec.objects_range.1);
    let mut objects: Vec<ObjectState> = (0..n_objects)
        .map(|_| ObjectState {
            category: rng.gen_range(0..spec.num_categories),
            color: [
                rng.gen_range(0.55..1.0),
                rng.gen_range(0.55..1.0),
                rng.gen_range(0.55..1.0),
            ],
            scale: rng.gen_range(spec.scale_range.0..=spec.scale_range.1),
            cx: 0.5,
            cy: 0.5,
            vx: 0.0,
            vy: 0.0,
        })
        .collect();
    // Frame label: category of the largest object.
    let frame_category = objects
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.scale
                .partial_cmp(&b.scale)
                .unwrap()
                .then(ib.cmp(ia))
        })
        .map(|(_, o)| o.category)
        .unwrap();

    let n_shots = rng.gen_range(spec.shots_per_video_range.0..=spec.shots_per_video_range.1);
    let mut shots = Vec::with_capacity(n_shots);
    for _ in 0..n_shots {
        let shot_len = rng.gen_range(spec.shot_len_range.0..=spec.shot_len_range.1);
        let background = sample_background(spec, rng);
        for o in objects.iter_mut() {
            o.cx = rng.gen_range(0.15..0.85);
            o.cy = rng.gen_range(0.15..0.85);
            let speed = rng.gen_range(spec.speed_range.0..=spec.speed_range.1);
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            o.vx = speed * angle.cos();
            o.vy = speed * angle.sin();
        }
        let mut frames = Vec::with_capacity(shot_len);
        for t in 0..shot_len {
            if t > 0 {
                for o in objects.iter_mut() {
                    o.step();
                }
            }
            let mut image = vec![0.0; h * w * c];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        image[(y * w + x) * c + ch] = background.pixel(y, x, ch, h, w, t);
                    }
                }
            }
            let mut boxes = Vec::with_capacity(objects.len());
            for o in &objects {
                let kind = spec.shape_for(o.category);
                let r = o.half();
                // Rasterize over the object's bounding square.
                let y0 = (((o.cy - r) * h as f64).floor().max(0.0)) as usize;
                let y1 = (((o.cy + r) * h as f64).ceil().min(h as f64)) as usize;
                let x0 = (((o.cx - r) * w as f64).floor().max(0.0)) as usize;
                let x1 = (((o.cx + r) * w as f64).ceil().min(w as f64)) as usize;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let dy = (y as f64 + 0.5) / h as f64 - o.cy;
                        let dx = (x as f64 + 0.5) / w as f64 - o.cx;
                        if inside_shape(kind, dx, dy, r) {
                            for ch in 0..c {
                                image[(y * w + x) * c + ch] = o.color[ch % 3];
                            }
                        }
                    }
                }
                let (ex, ey) = o.extents(kind);
                let bbox = clamp_bbox(o.cx - ex, o.cy - ey, o.cx + ex, o.cy + ey);
                boxes.push(DetectedBox {
                    category_id: o.category,
                    score: 1.0,
                    bbox,
                });
            }
            frames.push(Frame {
                image: TensorData::new(vec![h, w, c], image)?,
                boxes,
                frame_category: Some(frame_category),
            });
        }
        shots.push(Shot { frames });
    }
    Ok(AnnotatedVideo {
        video_id: video_id.to_string(),
        shots,
    })
}

fn sample_background<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Background {
    let (h, w, c) = spec.image_size;
    let dim = |rng: &mut R| {
        [
            rng.gen_range(0.0..0.45),
            rng.gen_range(0.0..0.45),
            rng.gen_range(0.0..0.45),
        ]
    };
    match spec.backgrounds[rng.gen_range(0..spec.backgrounds.len())] {
        BackgroundKind::Solid => Background::Solid(dim(rng)),
        BackgroundKind::Gradient => Background::Gradient {
            a: dim(rng),
            b: dim(rng),
            drift: rng.gen_range(0.0..0.05),
        },
        BackgroundKind::Noise => {
            let base = dim(rng);
            let texture: Vec<f64> = (0..h * w * c)
                .map(|i| (base[(i % c) % 3] + rng.gen_range(-0.1..0.1)).clamp(0.0, 0.45))
                .collect();
            Background::Noise {
                texture,
                h,
                w,
                c,
                shift: (rng.gen_range(0..2), rng.gen_range(0..3)),
            }
        }
    }
}

/// Clamp a rectangle into [0,1] and enforce a minimum side length.
fn clamp_bbox(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> BBox {
    let fix = |lo: f64, hi: f64| -> (f64, f64) {
        let mut lo = lo.clamp(0.0, 1.0);
        let mut hi = hi.clamp(0.0, 1.0);
        if hi - lo < MIN_BOX_SIDE {
            let c = ((lo + hi) / 2.0).clamp(MIN_BOX_SIDE / 2.0, 1.0 - MIN_BOX_SIDE / 2.0);
            lo = c - MIN_BOX_SIDE / 2.0;
            hi = c + MIN_BOX_SIDE / 2.0;
        }
        (lo, hi)
    };
    let (x_min, x_max) = fix(x_min, x_max);
    let (y_min, y_max) = fix(y_min, y_max);
    BBox {
        x_min,
        y_min,
        x_max,
        y_max,
    }
}

fn clamp_gaussian<R: Rng>(mean: f64, std: f64, rng: &mut R) -> f64 {
    if std == 0.0 {
        return mean.clamp(0.0, 1.0);
    }
    let n = Normal::new(mean, std).expect("valid normal");
    n.sample(rng).clamp(0.0, 1.0)
}

/// Simulate an imperfect detector over ground-truth boxes: misses, jitter,
/// label flips, sampled scores, then the standard score/max filtering.
pub fn simulate_detector<R: Rng>(
    video: &AnnotatedVideo,
    noise: &DetectorNoise,
    num_categories: usize,
    rng: &mut R,
) -> AnnotatedVideo {
    let mut out = video.clone();
    for frame in out.frames_mut() {
        let mut boxes = Vec::with_capacity(frame.boxes.len());
        for b in &frame.boxes {
            if noise.miss_prob > 0.0 && rng.gen_bool(noise.miss_prob) {
                continue;
            }
            let mut bbox = b.bbox;
            if noise.box_jitter_std > 0.0 {
                let n = Normal::new(0.0, noise.box_jitter_std).expect("valid normal");
                bbox = clamp_bbox(
                    bbox.x_min + n.sample(rng),
                    bbox.y_min + n.sample(rng),
                    bbox.x_max + n.sample(rng),
                    bbox.y_max + n.sample(rng),
                );
                if bbox.x_min >= bbox.x_max || bbox.y_min >= bbox.y_max {
                    bbox = clamp_bbox(
                        bbox.x_min.min(bbox.x_max),
                        bbox.y_min.min(bbox.y_max),
                        bbox.x_min.max(bbox.x_max),
                        bbox.y_min.max(bbox.y_max),
                    );
                }
            }
            let flipped = num_categories > 1
                && noise.label_flip_prob > 0.0
                && rng.gen_bool(noise.label_flip_prob);
            let category_id = if flipped {
                // Uniform over the other categories.
                let mut cat = rng.gen_range(0..num_categories - 1);
                if cat >= b.category_id {
                    cat += 1;
                }
                cat
            } else {
                b.category_id
            };
            let score = if flipped {
                clamp_gaussian(noise.score_model.flipped_mean, noise.score_model.flipped_std, rng)
            } else {
                clamp_gaussian(noise.score_model.correct_mean, noise.score_model.correct_std, rng)
            };
            boxes.push(DetectedBox {
                category_id,
                score,
                bbox,
            });
        }
        frame.boxes = filter_box_list(&boxes, 0.05, 5);
    }
    out
}

/// Ablation: replace every box label by a uniform draw over all categories.
pub fn randomize_labels<R: Rng>(
    video: &AnnotatedVideo,
    num_categories: usize,
    rng: &mut R,
) -> AnnotatedVideo {
    let mut out = video.clone();
    for frame in out.frames_mut() {
        randomize_label_list(&mut frame.boxes, num_categories, rng);
    }
    out
}

pub(crate) fn randomize_label_list<R: Rng>(
    boxes: &mut [DetectedBox],
    num_categories: usize,
    rng: &mut R,
) {
    for b in boxes {
        b.category_id = rng.gen_range(0..num_categories);
    }
}

/// Ablation: replace every box rectangle by a uniform random valid rectangle
/// (center uniform in frame, sides uniform in [0.05, 0.5]); labels and
/// scores unchanged.
pub fn randomize_boxes<R: Rng>(video: &AnnotatedVideo, rng: &mut R) -> AnnotatedVideo {
    let mut out = video.clone();
    for frame in out.frames_mut() {
        randomize_box_list(&mut frame.boxes, rng);
    }
    out
}

pub(crate) fn randomize_box_list<R: Rng>(boxes: &mut [DetectedBox], rng: &mut R) {
    for b in boxes {
        let cx = rng.gen_range(0.0..1.0);
        let cy = rng.gen_range(0.0..1.0);
        let sw = rng.gen_range(0.05..0.5);
        let sh = rng.gen_range(0.05..0.5);
        b.bbox = clamp_bbox(cx - sw / 2.0, cy - sh / 2.0, cx + sw / 2.0, cy + sh / 2.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> SceneSpec {
        SceneSpec::default()
    }

    #[test]
    fn default_spec_is_valid() {
        assert!(spec().validate().is_ok());
    }

    #[test]
    fn generated_videos_pass_hierarchy_invariants() {
        let spec = spec();
        for i in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            let v = generate_video(&spec, &format!("v{}", i), &mut rng).unwrap();
            v.validate().unwrap();
            assert!(v.shots.len() >= 2);
            for f in v.frames() {
                assert!(!f.boxes.is_empty());
                assert!(f.frame_category.is_some());
            }
        }
    }

    #[test]
    fn object_continuity_within_shot() {
        let spec = spec();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = generate_video(&spec, "v", &mut rng).unwrap();
            let max_step = spec.speed_range.1 + 1e-9;
            for shot in &v.shots {
                for pair in shot.frames.windows(2) {
                    for (a, b) in pair[0].boxes.iter().zip(pair[1].boxes.iter()) {
                        let (ax, ay) = a.bbox.center();
                        let (bx, by) = b.bbox.center();
                        // Reflection can at most double the apparent step.
                        assert!(
                            (ax - bx).hypot(ay - by) <= 2.0 * max_step + 1e-9,
                            "center jumped too far within a shot"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn zero_noise_detector_is_identity_with_unit_score() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = generate_video(&spec, "v", &mut rng).unwrap();
        let out = simulate_detector(&v, &DetectorNoise::none(), spec.num_categories, &mut rng);
        for (a, b) in v.frames().zip(out.frames()) {
            assert_eq!(a.boxes.len(), b.boxes.len());
            for (x, y) in a.boxes.iter().zip(b.boxes.iter()) {
                assert_eq!(x.bbox, y.bbox);
                assert_eq!(x.category_id, y.category_id);
                assert_eq!(y.score, 1.0);
            }
        }
    }

    #[test]
    fn full_flip_with_two_categories_flips_every_label() {
        let mut spec = spec();
        spec.num_categories = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = generate_video(&spec, "v", &mut rng).unwrap();
        // Uniform scores keep the post-filter sort stable, so output boxes
        // stay positionally aligned with the ground-truth list.
        let noise = DetectorNoise {
            label_flip_prob: 1.0,
            score_model: ScoreModel {
                correct_mean: 1.0,
                correct_std: 0.0,
                flipped_mean: 1.0,
                flipped_std: 0.0,
            },
            ..DetectorNoise::none()
        };
        let out = simulate_detector(&v, &noise, 2, &mut rng);
        for (a, b) in v.frames().zip(out.frames()) {
            for (x, y) in a.boxes.iter().zip(b.boxes.iter()) {
                assert_ne!(x.category_id, y.category_id);
            }
        }
    }

    #[test]
    fn flip_fraction_matches_probability() {
        // Monte Carlo over ~10k boxes.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = DetectorNoise {
            label_flip_prob: 0.2,
            score_model: ScoreModel {
                correct_mean: 1.0,
                correct_std: 0.0,
                flipped_mean: 1.0,
                flipped_std: 0.0,
            },
            ..DetectorNoise::none()
        };
        let mut total = 0usize;
        let mut flipped = 0usize;
        let spec = SceneSpec {
            objects_range: (4, 4),
            ..spec()
        };
        while total < 10_000 {
            let v = generate_video(&spec, "v", &mut rng).unwrap();
            let out = simulate_detector(&v, &noise, spec.num_categories, &mut rng);
            for (a, b) in v.frames().zip(out.frames()) {
                for (x, y) in a.boxes.iter().zip(b.boxes.iter()) {
                    total += 1;
                    if x.category_id != y.category_id {
                        flipped += 1;
                    }
                }
            }
        }
        let frac = flipped as f64 / total as f64;
        assert!((frac - 0.2).abs() < 0.01, "flip fraction {}", frac);
    }

    #[test]
    fn randomize_labels_single_category_is_identity() {
        let mut spec = spec();
        spec.num_categories = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let v = generate_video(&spec, "v", &mut rng).unwrap();
        let out = randomize_labels(&v, 1, &mut rng);
        for (a, b) in v.frames().zip(out.frames()) {
            assert_eq!(a.boxes, b.boxes);
        }
    }

    #[test]
    fn randomize_labels_uniform_chi_square() {
        let spec = SceneSpec {
            objects_range: (4, 4),
            ..spec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut counts = vec![0usize; 6];
        let mut total = 0usize;
        while total < 10_000 {
            let v = generate_video(&spec, "v", &mut rng).unwrap();
            let out = randomize_labels(&v, 6, &mut rng);
            for f in out.frames() {
                for b in &f.boxes {
                    counts[b.category_id] += 1;
                    total += 1;
                }
            }
        }
        let expected = total as f64 / 6.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 5 dof, alpha = 1e-4 critical value ~ 25.7
        assert!(chi2 < 25.7, "chi2 = {} counts {:?}", chi2, counts);
    }

    #[test]
    fn randomize_boxes_keeps_labels_and_validity() {
        let spec = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let v = generate_video(&spec, "v", &mut rng).unwrap();
        let out = randomize_boxes(&v, &mut rng);
        for (a, b) in v.frames().zip(out.frames()) {
            for (x, y) in a.boxes.iter().zip(b.boxes.iter()) {
                assert_eq!(x.category_id, y.category_id);
                assert_eq!(x.score, y.score);
                assert!(y.bbox.is_valid());
            }
        }
    }

    #[test]
    fn randomize_box_centers_uniform() {
        let spec = SceneSpec {
            objects_range: (4, 4),
            ..spec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        // Quadrant counts of pre-clamp center draws are uniform; post-clamp
        // centers shift slightly, so bucket by which half the center is in
        // with a generous bound.
        let mut quadrants = [0usize; 4];
        let mut total = 0usize;
        while total < 10_000 {
            let v = generate_video(&spec, "v", &mut rng).unwrap();
            let out = randomize_boxes(&v, &mut rng);
            for f in out.frames() {
                for b in &f.boxes {
                    let (cx, cy) = b.bbox.center();
                    let q = (cx >= 0.5) as usize + 2 * ((cy >= 0.5) as usize);
                    quadrants[q] += 1;
                    total += 1;
                }
            }
        }
        let expected = total as f64 / 4.0;
        let chi2: f64 = quadrants
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 3 dof; clamping perturbs centers near edges, allow slack.
        assert!(chi2 < 40.0, "chi2 = {} quadrants {:?}", chi2, quadrants);
    }

    #[test]
    fn static_object_produces_constant_boxes() {
        let spec = SceneSpec {
            objects_range: (1, 1),
            speed_range: (0.0, 0.0),
            shots_per_video_range: (2, 2),
            shot_len_range: (4, 4),
            ..spec()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let v = generate_video(&spec, "v", &mut rng).unwrap();
        for shot in &v.shots {
            let first = shot.frames[0].boxes[0].bbox;
            for f in &shot.frames {
                assert_eq!(f.boxes[0].bbox, first);
            }
        }
    }
}
