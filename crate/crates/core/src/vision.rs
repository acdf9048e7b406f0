//! Frames, detections and the two vision components used by the ground
//! station: a colour-blob reference detector and the hand-gesture MLP.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VisionError {
    #[error("frame buffer holds {got} bytes, expected {expected}")]
    FrameSize { expected: usize, got: usize },
    #[error("rejected input: non-finite value at index {0}")]
    NonFinite(usize),
    #[error("expected 63 keypoint values, got {0}")]
    KeypointCount(usize),
    #[error("label {0} out of range 0..6")]
    LabelOutOfRange(usize),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("dataset needs at least 6 samples, got {0}")]
    DatasetTooSmall(usize),
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("invalid training config: {0}")]
    BadConfig(&'static str),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("model file: {0}")]
    ModelFormat(String),
    #[error("dataset file: {0}")]
    DatasetFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// An RGB8 image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl Frame {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Frame, VisionError> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(VisionError::FrameSize { expected, got: pixels.len() });
        }
        Ok(Frame { width, height, pixels })
    }

    pub fn filled(width: u32, height: u32, color: [u8; 3]) -> Frame {
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&color);
        }
        Frame { width, height, pixels }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel(&self, col: u32, row: u32) -> [u8; 3] {
        let i = (row as usize * self.width as usize + col as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Fills the half-open pixel rectangle `[col0, col1) × [row0, row1)`,
    /// clipped to the frame.
    pub fn fill_rect(&mut self, col0: u32, row0: u32, col1: u32, row1: u32, color: [u8; 3]) {
        let (col1, row1) = (col1.min(self.width), row1.min(self.height));
        for row in row0..row1 {
            let base = row as usize * self.width as usize;
            for col in col0..col1 {
                let i = (base + col as usize) * 3;
                self.pixels[i..i + 3].copy_from_slice(&color);
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.width == 0 || self.height == 0
    }
}

/// Centre-format box in frame-relative units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl NormalizedBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> NormalizedBox {
        NormalizedBox { x, y, w, h }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: NormalizedBox,
    pub class_id: u32,
    pub confidence: f64,
}

/// Anything that turns a frame into detections.
pub trait Detector: Send + Sync {
    fn detect(&self, frame: &Frame) -> Vec<Detection>;
}

pub const DEFAULT_MIN_AREA_PX: usize = 30;

/// Reference detector: connected regions of a single colour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobDetector {
    pub target_color: [u8; 3],
    pub tolerance: u8,
    pub min_area_px: usize,
    pub class_id: u32,
}

impl BlobDetector {
    pub fn new(target_color: [u8; 3]) -> BlobDetector {
        BlobDetector { target_color, tolerance: 10, min_area_px: DEFAULT_MIN_AREA_PX, class_id: 0 }
    }
}

impl Detector for BlobDetector {
    fn detect(&self, frame: &Frame) -> Vec<Detection> {
        detect_blob(frame, self.target_color, self.tolerance, self.min_area_px)
            .into_iter()
            .map(|d| Detection { class_id: self.class_id, ..d })
            .collect()
    }
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let p = parent[i as usize];
        parent[i as usize] = parent[p as usize];
        i = p;
    }
    i
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

#[derive(Clone, Copy)]
struct Component {
    area: usize,
    min_col: u32,
    max_col: u32,
    min_row: u32,
    max_row: u32,
}

/// Finds 4-connected regions whose pixels are within `tolerance` of
/// `target_color` on every channel. Regions of at least `min_area_px` pixels
/// become detections, largest first.
pub fn detect_blob(
    frame: &Frame,
    target_color: [u8; 3],
    tolerance: u8,
    min_area_px: usize,
) -> Vec<Detection> {
    if frame.is_empty() {
        return Vec::new();
    }
    let (w, h) = (frame.width as usize, frame.height as usize);
    let px = &frame.pixels;
    let matches = |i: usize| {
        (0..3).all(|c| px[i * 3 + c].abs_diff(target_color[c]) <= tolerance)
    };

    // Two-pass labelling; label 0 is background, provisional labels start at 1.
    const NONE: u32 = 0;
    let mut labels = vec![NONE; w * h];
    let mut parent: Vec<u32> = vec![0];
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            if !matches(i) {
                continue;
            }
            let left = if col > 0 { labels[i - 1] } else { NONE };
            let up = if row > 0 { labels[i - w] } else { NONE };
            labels[i] = match (left, up) {
                (NONE, NONE) => {
                    let l = parent.len() as u32;
                    parent.push(l);
                    l
                }
                (l, NONE) | (NONE, l) => l,
                (l, u) => {
                    union(&mut parent, l, u);
                    l.min(u)
                }
            };
        }
    }

    let mut comps: Vec<Option<Component>> = vec![None; parent.len()];
    for row in 0..h {
        for col in 0..w {
            let l = labels[row * w + col];
            if l == NONE {
                continue;
            }
            let root = find(&mut parent, l) as usize;
            let (c, r) = (col as u32, row as u32);
            let comp = comps[root].get_or_insert(Component {
                area: 0,
                min_col: c,
                max_col: c,
                min_row: r,
                max_row: r,
            });
            comp.area += 1;
            comp.min_col = comp.min_col.min(c);
            comp.max_col = comp.max_col.max(c);
            comp.min_row = comp.min_row.min(r);
            comp.max_row = comp.max_row.max(r);
        }
    }

    let mut found: Vec<Component> =
        comps.into_iter().flatten().filter(|c| c.area >= min_area_px).collect();
    found.sort_by_key(|c| std::cmp::Reverse(c.area));
    let (wf, hf) = (w as f64, h as f64);
    found
        .into_iter()
        .map(|c| {
            let bw = f64::from(c.max_col - c.min_col + 1);
            let bh = f64::from(c.max_row - c.min_row + 1);
            Detection {
                bbox: NormalizedBox {
                    x: f64::from(c.min_col + c.max_col + 1) / (2.0 * wf),
                    y: f64::from(c.min_row + c.max_row + 1) / (2.0 * hf),
                    w: bw / wf,
                    h: bh / hf,
                },
                class_id: 0,
                confidence: c.area as f64 / (bw * bh),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Gesture classifier

pub const KEYPOINT_DIM: usize = 63;
pub const HIDDEN_UNITS: usize = 50;
pub const GESTURE_CLASSES: usize = 6;
pub const LEAKY_SLOPE: f64 = 0.01;

/// 21 hand landmarks as (x, y, z) triples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HandKeypoints(pub [f64; KEYPOINT_DIM]);

impl HandKeypoints {
    pub fn from_slice(values: &[f64]) -> Result<HandKeypoints, VisionError> {
        let arr: [f64; KEYPOINT_DIM] =
            values.try_into().map_err(|_| VisionError::KeypointCount(values.len()))?;
        Ok(HandKeypoints(arr))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GestureLabel(u8);

impl GestureLabel {
    pub const TAKEOFF: GestureLabel = GestureLabel(0);
    pub const LAND: GestureLabel = GestureLabel(1);
    pub const RIGHT: GestureLabel = GestureLabel(2);
    pub const LEFT: GestureLabel = GestureLabel(3);
    pub const FORWARD: GestureLabel = GestureLabel(4);
    pub const BACKWARD: GestureLabel = GestureLabel(5);

    pub const NAMES: [&'static str; GESTURE_CLASSES] =
        ["takeoff", "land", "right", "left", "forward", "backward"];

    pub fn new(index: usize) -> Result<GestureLabel, VisionError> {
        if index < GESTURE_CLASSES {
            Ok(GestureLabel(index as u8))
        } else {
            Err(VisionError::LabelOutOfRange(index))
        }
    }

    pub fn all() -> impl Iterator<Item = GestureLabel> {
        (0..GESTURE_CLASSES as u8).map(GestureLabel)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        Self::NAMES[self.index()]
    }

    pub fn from_name(name: &str) -> Option<GestureLabel> {
        Self::NAMES.iter().position(|n| *n == name).map(|i| GestureLabel(i as u8))
    }
}

/// Weights of the 63 → 50 → 6 network. Matrices are row-major with one row
/// per output unit. The same shape doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpParams {
    pub fn zeros() -> MlpParams {
        MlpParams {
            w1: vec![0.0; HIDDEN_UNITS * KEYPOINT_DIM],
            b1: vec![0.0; HIDDEN_UNITS],
            w2: vec![0.0; GESTURE_CLASSES * HIDDEN_UNITS],
            b2: vec![0.0; GESTURE_CLASSES],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot<R: Rng>(rng: &mut R) -> MlpParams {
        let mut p = MlpParams::zeros();
        let l1 = (6.0 / (KEYPOINT_DIM + HIDDEN_UNITS) as f64).sqrt();
        let l2 = (6.0 / (HIDDEN_UNITS + GESTURE_CLASSES) as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.random_range(-l1..l1));
        p.w2.iter_mut().for_each(|w| *w = rng.random_range(-l2..l2));
        p
    }

    fn check_shapes(&self) -> Result<(), VisionError> {
        let ok = self.w1.len() == HIDDEN_UNITS * KEYPOINT_DIM
            && self.b1.len() == HIDDEN_UNITS
            && self.w2.len() == GESTURE_CLASSES * HIDDEN_UNITS
            && self.b2.len() == GESTURE_CLASSES;
        if ok {
            Ok(())
        } else {
            Err(VisionError::ModelFormat("parameter shapes do not match 63x50x6".into()))
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1.iter_mut().chain(&mut self.b1).chain(&mut self.w2).chain(&mut self.b2)
    }

    pub fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn axpy(&mut self, alpha: f64, other: &MlpParams) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += alpha * b;
        }
    }

    /// Serializes to the `AVMLP1` flat binary layout.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<(), VisionError> {
        self.check_shapes()?;
        out.write_all(MODEL_MAGIC)?;
        for d in [KEYPOINT_DIM, HIDDEN_UNITS, GESTURE_CLASSES] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in self.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<MlpParams, VisionError> {
        let mut magic = [0u8; 6];
        input.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(VisionError::ModelFormat("bad magic".into()));
        }
        let mut dims = [0u32; 3];
        for d in &mut dims {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b);
        }
        if dims != [KEYPOINT_DIM as u32, HIDDEN_UNITS as u32, GESTURE_CLASSES as u32] {
            return Err(VisionError::ModelFormat(format!("unsupported dims {dims:?}")));
        }
        let mut p = MlpParams::zeros();
        for (i, v) in p.iter_mut().enumerate() {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            *v = f64::from_le_bytes(b);
            if !v.is_finite() {
                return Err(VisionError::ModelFormat(format!("non-finite weight at {i}")));
            }
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest)? != 0 {
            return Err(VisionError::ModelFormat("trailing bytes".into()));
        }
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), VisionError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<MlpParams, VisionError> {
        MlpParams::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

pub const MODEL_MAGIC: &[u8; 6] = b"AVMLP1";

pub fn leaky_relu(t: f64) -> f64 {
    if t >= 0.0 {
        t
    } else {
        LEAKY_SLOPE * t
    }
}

fn check_finite(values: &[f64]) -> Result<(), VisionError> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(VisionError::NonFinite(i)),
        None => Ok(()),
    }
}

struct ForwardPass {
    pre: [f64; HIDDEN_UNITS],
    hidden: [f64; HIDDEN_UNITS],
    probs: [f64; GESTURE_CLASSES],
}

fn forward_pass(p: &MlpParams, k: &[f64; KEYPOINT_DIM]) -> ForwardPass {
    let mut pre = [0.0; HIDDEN_UNITS];
    let mut hidden = [0.0; HIDDEN_UNITS];
    for j in 0..HIDDEN_UNITS {
        let row = &p.w1[j * KEYPOINT_DIM..(j + 1) * KEYPOINT_DIM];
        pre[j] = p.b1[j] + row.iter().zip(k).map(|(w, x)| w * x).sum::<f64>();
        hidden[j] = leaky_relu(pre[j]);
    }
    let mut logits = [0.0; GESTURE_CLASSES];
    for (c, logit) in logits.iter_mut().enumerate() {
        let row = &p.w2[c * HIDDEN_UNITS..(c + 1) * HIDDEN_UNITS];
        *logit = p.b2[c] + row.iter().zip(&hidden).map(|(w, x)| w * x).sum::<f64>();
    }
    ForwardPass { pre, hidden, probs: softmax(&logits) }
}

pub fn softmax(logits: &[f64; GESTURE_CLASSES]) -> [f64; GESTURE_CLASSES] {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = logits.map(|l| (l - max).exp());
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Class probabilities for one keypoint vector.
pub fn mlp_forward(
    params: &MlpParams,
    keypoints: &HandKeypoints,
) -> Result<[f64; GESTURE_CLASSES], VisionError> {
    params.check_shapes()?;
    check_finite(&keypoints.0)?;
    Ok(forward_pass(params, &keypoints.0).probs)
}

/// Mean cross-entropy over the batch and its gradient.
pub fn mlp_loss_and_grad(
    params: &MlpParams,
    batch: &[(HandKeypoints, usize)],
) -> Result<(f64, MlpParams), VisionError> {
    if batch.is_empty() {
        return Err(VisionError::EmptyBatch);
    }
    params.check_shapes()?;
    let mut grad = MlpParams::zeros();
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for (k, label) in batch {
        if *label >= GESTURE_CLASSES {
            return Err(VisionError::LabelOutOfRange(*label));
        }
        check_finite(&k.0)?;
        let fp = forward_pass(params, &k.0);
        loss -= fp.probs[*label].ln();

        // d(loss)/d(logits) = p - onehot
        let mut dlogits = fp.probs;
        dlogits[*label] -= 1.0;
        let mut dhidden = [0.0; HIDDEN_UNITS];
        for (c, dl) in dlogits.iter().enumerate() {
            let dl = dl * scale;
            grad.b2[c] += dl;
            let row = c * HIDDEN_UNITS;
            for j in 0..HIDDEN_UNITS {
                grad.w2[row + j] += dl * fp.hidden[j];
                dhidden[j] += dl * params.w2[row + j];
            }
        }
        for j in 0..HIDDEN_UNITS {
            let dpre = if fp.pre[j] >= 0.0 { dhidden[j] } else { LEAKY_SLOPE * dhidden[j] };
            grad.b1[j] += dpre;
            let row = j * KEYPOINT_DIM;
            for (i, x) in k.0.iter().enumerate() {
                grad.w1[row + i] += dpre * x;
            }
        }
    }
    Ok((loss * scale, grad))
}

/// Most probable gesture and its probability; ties go to the lower index.
pub fn predict_gesture(
    params: &MlpParams,
    keypoints: &HandKeypoints,
) -> Result<(GestureLabel, f64), VisionError> {
    let probs = mlp_forward(params, keypoints)?;
    let mut best = 0;
    for c in 1..GESTURE_CLASSES {
        if probs[c] > probs[best] {
            best = c;
        }
    }
    Ok((GestureLabel(best as u8), probs[best]))
}

// ---------------------------------------------------------------------------
// Synthetic gestures

pub const SYNTH_NOISE_SIGMA: f64 = 0.02;

/// Size of the stock synthetic gesture set.
pub const GESTURE_DATASET_SIZE: usize = 328;

// Landmark layout: 0 wrist, then four joints per finger from base to tip
// for thumb, index, middle, ring, pinky.
const FINGER_BASES: [[f64; 2]; 5] =
    [[-0.07, -0.04], [-0.04, -0.12], [0.0, -0.13], [0.04, -0.12], [0.07, -0.10]];
const SEGMENT_LEN: f64 = 0.035;
const WRIST: [f64; 3] = [0.5, 0.7, 0.0];

#[derive(Clone, Copy)]
enum Finger {
    /// Straight, pointing along the unit vector (dx, dy).
    Extended(f64, f64),
    /// Curled back over the palm.
    Folded,
}

fn finger_joints(base: [f64; 2], finger: Finger) -> [[f64; 3]; 4] {
    let mut out = [[0.0; 3]; 4];
    let b = [WRIST[0] + base[0], WRIST[1] + base[1]];
    for (j, joint) in out.iter_mut().enumerate() {
        let t = j as f64;
        *joint = match finger {
            Finger::Extended(dx, dy) => {
                [b[0] + dx * SEGMENT_LEN * t, b[1] + dy * SEGMENT_LEN * t, -0.01 * t]
            }
            // Proximal joint rises, the rest curls back toward the wrist and
            // toward the camera.
            Finger::Folded => {
                let back = [0.0, -0.02, 0.03, 0.05][j];
                [b[0] * 1.0 - base[0] * 0.2 * t, b[1] + back, -0.03 * t]
            }
        };
    }
    out
}

fn template_fingers(label: GestureLabel) -> [Finger; 5] {
    use Finger::{Extended as E, Folded as F};
    const UP: Finger = E(0.0, -1.0);
    match label.index() {
        // open palm, fingers spread
        0 => [E(-0.8, -0.6), E(-0.3, -0.95), UP, E(0.3, -0.95), E(0.6, -0.8)],
        // closed fist
        1 => [F, F, F, F, F],
        // index pointing to the image right
        2 => [F, E(1.0, 0.0), F, F, F],
        // index pointing to the image left
        3 => [F, E(-1.0, 0.0), F, F, F],
        // thumb up
        4 => [UP, F, F, F, F],
        // index and middle raised in a V
        _ => [F, E(-0.35, -0.94), E(0.35, -0.94), F, F],
    }
}

/// The noiseless keypoint template for a gesture.
pub fn gesture_template(label: GestureLabel) -> HandKeypoints {
    let mut k = [0.0; KEYPOINT_DIM];
    k[..3].copy_from_slice(&WRIST);
    for (f, (base, finger)) in FINGER_BASES.iter().zip(template_fingers(label)).enumerate() {
        for (j, joint) in finger_joints(*base, finger).iter().enumerate() {
            let lm = 1 + f * 4 + j;
            k[lm * 3..lm * 3 + 3].copy_from_slice(joint);
        }
    }
    HandKeypoints(k)
}

pub type GestureSample = (HandKeypoints, GestureLabel);

/// `n` noisy copies of the six templates, labels cycling 0..6 so class
/// counts differ by at most one.
pub fn synth_gesture_dataset(n: usize, seed: u64) -> Result<Vec<GestureSample>, VisionError> {
    if n < GESTURE_CLASSES {
        return Err(VisionError::DatasetTooSmall(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SYNTH_NOISE_SIGMA).expect("valid sigma");
    let templates: Vec<HandKeypoints> = GestureLabel::all().map(gesture_template).collect();
    Ok((0..n)
        .map(|i| {
            let label = GestureLabel((i % GESTURE_CLASSES) as u8);
            let mut k = templates[label.index()];
            k.0.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
            (k, label)
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<GestureSample>,
    pub val: Vec<GestureSample>,
    pub test: Vec<GestureSample>,
}

/// Per-class shuffled partition. Each class is divided by largest remainder;
/// ties between the validation and test parts alternate from class to class
/// so the totals stay balanced.
pub fn stratified_split(
    dataset: &[GestureSample],
    ratios: [f64; 3],
    seed: u64,
) -> Result<Split, VisionError> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(VisionError::BadRatios(ratios));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    for label in GestureLabel::all() {
        let mut members: Vec<GestureSample> =
            dataset.iter().filter(|(_, l)| *l == label).copied().collect();
        if members.is_empty() {
            return Err(VisionError::EmptyClass(label.index()));
        }
        members.shuffle(&mut rng);
        let counts = apportion(members.len(), ratios, label.index());
        let mut rest = members.into_iter();
        split.train.extend(rest.by_ref().take(counts[0]));
        split.val.extend(rest.by_ref().take(counts[1]));
        split.test.extend(rest);
    }
    Ok(split)
}

// Validation and test swap precedence on alternate classes.
fn tie_rank(part: usize, flip: bool) -> usize {
    match (part, flip) {
        (1, true) => 2,
        (2, true) => 1,
        (p, _) => p,
    }
}

fn apportion(n: usize, ratios: [f64; 3], class: usize) -> [usize; 3] {
    let flip = class % 2 == 1;
    let exact = ratios.map(|r| r * n as f64);
    let mut counts = exact.map(|e| (e + 1e-9).floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - counts[a] as f64, exact[b] - counts[b] as f64);
        if (ra - rb).abs() > 1e-9 {
            rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
        } else {
            tie_rank(a, flip).cmp(&tie_rank(b, flip))
        }
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub ratios: [f64; 3],
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { ratios: [0.8, 0.1, 0.1], learning_rate: 0.05, batch_size: 32, epochs: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainMetrics {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    /// Full training-set loss before training and after each epoch.
    pub loss_curve: Vec<f64>,
    /// Epoch whose parameters were returned (0 = initialization).
    pub best_epoch: usize,
}

fn as_batch(samples: &[GestureSample]) -> Vec<(HandKeypoints, usize)> {
    samples.iter().map(|(k, l)| (*k, l.index())).collect()
}

pub fn accuracy(params: &MlpParams, samples: &[GestureSample]) -> Result<f64, VisionError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (k, l) in samples {
        if predict_gesture(params, k)?.0 == *l {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Mini-batch gradient descent from a Glorot initialization. Returns the
/// parameters with the best validation accuracy (lower validation loss breaks
/// ties).
pub fn train_gestures(
    dataset: &[GestureSample],
    config: &TrainConfig,
) -> Result<(MlpParams, TrainMetrics), VisionError> {
    if config.batch_size == 0 {
        return Err(VisionError::BadConfig("batch size must be positive"));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(VisionError::BadConfig("learning rate must be positive"));
    }
    let split = stratified_split(dataset, config.ratios, config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut params = MlpParams::glorot(&mut rng);

    let train = as_batch(&split.train);
    let val = as_batch(&split.val);
    let full_loss = |p: &MlpParams, set: &[(HandKeypoints, usize)]| -> Result<f64, VisionError> {
        if set.is_empty() {
            Ok(0.0)
        } else {
            Ok(mlp_loss_and_grad(p, set)?.0)
        }
    };

    let mut loss_curve = vec![full_loss(&params, &train)?];
    let mut best = params.clone();
    let mut best_key = (accuracy(&params, &split.val)?, -full_loss(&params, &val)?);
    let mut best_epoch = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| train[i]).collect();
            let (_, grad) = mlp_loss_and_grad(&params, &batch)?;
            params.axpy(-config.learning_rate, &grad);
        }
        let loss = full_loss(&params, &train)?;
        if !loss.is_finite() {
            return Err(VisionError::Diverged { epoch, loss });
        }
        loss_curve.push(loss);
        let key = (accuracy(&params, &split.val)?, -full_loss(&params, &val)?);
        if key.0 > best_key.0 || (key.0 == best_key.0 && key.1 > best_key.1) {
            best_key = key;
            best = params.clone();
            best_epoch = epoch;
        }
    }
    let metrics = TrainMetrics {
        train_accuracy: accuracy(&best, &split.train)?,
        val_accuracy: accuracy(&best, &split.val)?,
        test_accuracy: accuracy(&best, &split.test)?,
        loss_curve,
        best_epoch,
    };
    Ok((best, metrics))
}

/// Writes samples as CSV: 63 feature columns `f0..f62`, then `label`.
pub fn write_dataset_csv<W: Write>(samples: &[GestureSample], out: W) -> Result<(), VisionError> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..KEYPOINT_DIM).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (k, l) in samples {
        let mut rec: Vec<String> = k.0.iter().map(|v| v.to_string()).collect();
        rec.push(l.index().to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_csv<R: Read>(input: R) -> Result<Vec<GestureSample>, VisionError> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != KEYPOINT_DIM + 1 {
            return Err(VisionError::DatasetFormat(format!(
                "row {}: expected {} columns, got {}",
                line + 1,
                KEYPOINT_DIM + 1,
                rec.len()
            )));
        }
        let bad = |what: &str| VisionError::DatasetFormat(format!("row {}: bad {what}", line + 1));
        let mut k = [0.0; KEYPOINT_DIM];
        for (i, v) in k.iter_mut().enumerate() {
            *v = rec[i].trim().parse().map_err(|_| bad("feature"))?;
        }
        let label: usize = rec[KEYPOINT_DIM].trim().parse().map_err(|_| bad("label"))?;
        out.push((HandKeypoints(k), GestureLabel::new(label)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect_frame(w: u32, h: u32, rows: (u32, u32), cols: (u32, u32)) -> Frame {
        let mut f = Frame::filled(w, h, [20, 20, 20]);
        f.fill_rect(cols.0, rows.0, cols.1 + 1, rows.1 + 1, [250, 0, 0]);
        f
    }

    #[test]
    fn blob_on_uniform_frame_is_empty() {
        let f = Frame::filled(64, 48, [20, 20, 20]);
        assert!(detect_blob(&f, [250, 0, 0], 10, 1).is_empty());
        assert!(detect_blob(&Frame::filled(0, 0, [0, 0, 0]), [0, 0, 0], 0, 0).is_empty());
    }

    #[test]
    fn blob_rectangle_box() {
        let f = rect_frame(100, 100, (40, 59), (45, 54));
        let d = detect_blob(&f, [250, 0, 0], 10, 30);
        assert_eq!(d.len(), 1);
        let b = d[0].bbox;
        assert!((b.x - 0.5).abs() < 1e-12 && (b.y - 0.5).abs() < 1e-12);
        assert!((b.w - 0.1).abs() < 1e-12 && (b.h - 0.2).abs() < 1e-12);
        assert_eq!(d[0].confidence, 1.0);
    }

    #[test]
    fn blob_components_sorted_and_filtered() {
        let mut f = Frame::filled(50, 50, [0, 0, 0]);
        f.fill_rect(0, 0, 3, 3, [9, 9, 9]); // 9 px
        f.fill_rect(10, 10, 20, 20, [9, 9, 9]); // 100 px
        f.fill_rect(30, 30, 36, 36, [9, 9, 9]); // 36 px
        // Diagonal neighbours are not 4-connected.
        f.fill_rect(40, 40, 41, 41, [9, 9, 9]);
        f.fill_rect(41, 41, 42, 42, [9, 9, 9]);
        let d = detect_blob(&f, [9, 9, 9], 0, 30);
        assert_eq!(d.len(), 2);
        assert!(d[0].bbox.w > d[1].bbox.w);
        assert_eq!(detect_blob(&f, [9, 9, 9], 0, 1).len(), 5);
    }

    #[test]
    fn blob_u_shape_merges_and_reports_fill_ratio() {
        // A U: two vertical bars joined at the bottom, labelled separately
        // on the first pass.
        let mut f = Frame::filled(20, 20, [0, 0, 0]);
        f.fill_rect(2, 2, 4, 12, [5, 5, 5]);
        f.fill_rect(10, 2, 12, 12, [5, 5, 5]);
        f.fill_rect(2, 10, 12, 12, [5, 5, 5]);
        let d = detect_blob(&f, [5, 5, 5], 0, 1);
        assert_eq!(d.len(), 1);
        let area = 2 * 10 + 2 * 10 + 6 * 2;
        assert!((d[0].confidence - area as f64 / 100.0).abs() < 1e-12);
    }

    #[test]
    fn blob_tolerance() {
        let mut f = Frame::filled(10, 10, [0, 0, 0]);
        f.fill_rect(0, 0, 10, 5, [100, 110, 90]);
        assert_eq!(detect_blob(&f, [100, 100, 100], 9, 1).len(), 0);
        assert_eq!(detect_blob(&f, [100, 100, 100], 10, 1).len(), 1);
    }

    #[test]
    fn frame_size_checked() {
        assert!(Frame::new(2, 2, vec![0; 11]).is_err());
        assert!(Frame::new(2, 2, vec![0; 12]).is_ok());
    }

    #[test]
    fn zero_params_give_uniform() {
        let p = MlpParams::zeros();
        let k = HandKeypoints([0.3; KEYPOINT_DIM]);
        let probs = mlp_forward(&p, &k).unwrap();
        assert!(probs.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
        let (loss, _) = mlp_loss_and_grad(&p, &[(k, 3)]).unwrap();
        assert!((loss - 6f64.ln()).abs() < 1e-12);
        assert!((loss - 1.7918).abs() < 1e-4);
        assert_eq!(predict_gesture(&p, &k).unwrap().0, GestureLabel::TAKEOFF);
    }

    #[test]
    fn leaky_relu_slope() {
        assert_eq!(leaky_relu(-2.0), -0.02);
        assert_eq!(leaky_relu(3.0), 3.0);
        assert_eq!(leaky_relu(0.0), 0.0);
    }

    #[test]
    fn forward_rejects_non_finite() {
        let mut k = HandKeypoints([0.0; KEYPOINT_DIM]);
        k.0[7] = f64::NAN;
        assert!(matches!(mlp_forward(&MlpParams::zeros(), &k), Err(VisionError::NonFinite(7))));
    }

    #[test]
    fn loss_errors() {
        let p = MlpParams::zeros();
        assert!(matches!(mlp_loss_and_grad(&p, &[]), Err(VisionError::EmptyBatch)));
        let k = HandKeypoints([0.0; KEYPOINT_DIM]);
        assert!(matches!(mlp_loss_and_grad(&p, &[(k, 6)]), Err(VisionError::LabelOutOfRange(6))));
        assert!(HandKeypoints::from_slice(&[0.0; 62]).is_err());
    }

    #[test]
    fn duplicated_batch_is_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MlpParams::glorot(&mut rng);
        let batch: Vec<_> = synth_gesture_dataset(12, 1)
            .unwrap()
            .into_iter()
            .map(|(k, l)| (k, l.index()))
            .collect();
        let doubled: Vec<_> = batch.iter().chain(batch.iter()).copied().collect();
        let (l1, g1) = mlp_loss_and_grad(&p, &batch).unwrap();
        let (l2, g2) = mlp_loss_and_grad(&p, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g1.iter().zip(g2.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn synth_counts_and_determinism() {
        let d = synth_gesture_dataset(328, 7).unwrap();
        let mut counts = [0; 6];
        d.iter().for_each(|(_, l)| counts[l.index()] += 1);
        let mut sorted = counts;
        sorted.sort();
        assert_eq!(sorted, [54, 54, 55, 55, 55, 55]);
        assert_eq!(d, synth_gesture_dataset(328, 7).unwrap());
        assert!(synth_gesture_dataset(5, 7).is_err());
    }

    #[test]
    fn templates_are_distinct() {
        for a in GestureLabel::all() {
            for b in GestureLabel::all().filter(|b| *b > a) {
                let ta = gesture_template(a);
                let tb = gesture_template(b);
                let dist: f64 =
                    ta.0.iter().zip(tb.0.iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                // Far beyond the noise scale of sqrt(63) * 0.02 ~ 0.16 per sample.
                assert!(dist > 0.1, "{} vs {}: {dist}", a.name(), b.name());
            }
        }
    }

    #[test]
    fn split_sizes() {
        let d = synth_gesture_dataset(328, 7).unwrap();
        let s = stratified_split(&d, [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (262, 33, 33));
        for part in [&s.train, &s.val, &s.test] {
            for l in GestureLabel::all() {
                assert!(part.iter().any(|(_, x)| *x == l));
            }
        }
        assert!(stratified_split(&d, [0.8, 0.1, 0.2], 1).is_err());
        let missing: Vec<_> = d.iter().filter(|(_, l)| l.index() != 2).copied().collect();
        assert!(matches!(stratified_split(&missing, [0.8, 0.1, 0.1], 1), Err(VisionError::EmptyClass(2))));
    }

    #[test]
    fn zero_epochs_returns_init() {
        let d = synth_gesture_dataset(60, 2).unwrap();
        let cfg = TrainConfig { epochs: 0, seed: 11, ..Default::default() };
        let (p, m) = train_gestures(&d, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        assert_eq!(p, MlpParams::glorot(&mut rng));
        assert_eq!(m.loss_curve.len(), 1);
        assert_eq!(m.best_epoch, 0);
    }

    #[test]
    fn divergence_reported() {
        let d = synth_gesture_dataset(60, 2).unwrap();
        let cfg = TrainConfig { epochs: 50, learning_rate: 1e6, ..Default::default() };
        match train_gestures(&d, &cfg) {
            Err(VisionError::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn model_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MlpParams::glorot(&mut rng);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..6], b"AVMLP1");
        assert_eq!(&buf[6..18], &[63, 0, 0, 0, 50, 0, 0, 0, 6, 0, 0, 0]);
        assert_eq!(buf.len(), 18 + 8 * p.len());
        assert_eq!(MlpParams::read_from(&buf[..]).unwrap(), p);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(MlpParams::read_from(&bad[..]).is_err());
        assert!(MlpParams::read_from(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let d = synth_gesture_dataset(12, 4).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&d, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("f0,f1,"));
        assert_eq!(read_dataset_csv(&buf[..]).unwrap(), d);
        assert!(read_dataset_csv(&b"f0,label\n1,2\n"[..]).is_err());
    }
}
