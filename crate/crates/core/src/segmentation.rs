//! Instance detection providers: ground truth from the synthetic world with
//! optional corruption, precomputed mask files, and an asynchronous wrapper.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::association::Detection;
use crate::geometry::{Intrinsics, Pose};
use crate::image::{Image, Mask};
use crate::synthworld::{render_synth, SceneSpec};

pub const DEFAULT_CADENCE: usize = 30;
const DIST_TOLERANCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum SegmentationError {
    #[error("{path}: {message}")]
    Load { path: PathBuf, message: String },
    #[error("mask source worker stopped")]
    Disconnected,
}

/// Detections together with the frame they were computed for.
#[derive(Clone, Debug)]
pub struct DetectionBatch {
    pub source_frame: usize,
    pub detections: Vec<Detection>,
}

pub trait MaskSource {
    fn cadence(&self) -> usize;

    fn set_cadence(&mut self, cadence: usize);

    fn num_classes(&self) -> usize;

    /// Detections for `frame`, or `None` on frames off the cadence or
    /// without data.
    fn detections_for(&mut self, frame: usize) -> Result<Option<Vec<Detection>>, SegmentationError>;

    fn is_detection_frame(&self, frame: usize) -> bool {
        frame.is_multiple_of(self.cadence().max(1))
    }
}

/// Never detects anything.
#[derive(Clone, Debug)]
pub struct NoMasks {
    pub num_classes: usize,
}

impl MaskSource for NoMasks {
    fn cadence(&self) -> usize {
        DEFAULT_CADENCE
    }

    fn set_cadence(&mut self, _cadence: usize) {}

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn detections_for(&mut self, _frame: usize) -> Result<Option<Vec<Detection>>, SegmentationError> {
        Ok(None)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Corruption {
    /// Boundary jitter: each mask is eroded or dilated by up to this many pixels.
    pub jitter_px: usize,
    /// Per-instance, per-frame probability of a missed detection.
    pub dropout: f64,
    /// Per-frame probability of injecting one spurious blob.
    pub false_positive_rate: f64,
    /// Probability mass moved from the true class to the others, spread evenly.
    pub softening: f64,
    pub seed: u64,
}

impl Default for Corruption {
    fn default() -> Self {
        Self {
            jitter_px: 0,
            dropout: 0.0,
            false_positive_rate: 0.0,
            softening: 0.0,
            seed: 0,
        }
    }
}

/// Renders instance masks of the labelled primitives at the true poses.
pub struct GroundTruthSource {
    scene: SceneSpec,
    poses: Vec<Pose>,
    intrinsics: Intrinsics,
    pub corruption: Corruption,
    pub cadence: usize,
}

impl GroundTruthSource {
    pub fn new(scene: SceneSpec, poses: Vec<Pose>, intrinsics: Intrinsics, corruption: Corruption) -> Self {
        Self {
            scene,
            poses,
            intrinsics,
            corruption,
            cadence: DEFAULT_CADENCE,
        }
    }

    fn class_dist(&self, label: usize) -> Vec<f64> {
        let n = self.scene.labels.len();
        if n == 1 {
            return vec![1.0];
        }
        let s = self.corruption.softening;
        (0..n)
            .map(|c| if c == label { 1.0 - s } else { s / (n - 1) as f64 })
            .collect()
    }

    /// Uncorrupted masks per primitive id, in id order.
    pub fn clean_masks(&self, frame: usize) -> BTreeMap<u32, Mask> {
        let f = render_synth(&self.scene, &self.poses[frame], &self.intrinsics, None);
        let mut out = BTreeMap::new();
        for p in self.scene.objects() {
            let m = Image::from_vec(f.index.width, f.index.height, f.index.data.iter().map(|&i| i == p.id).collect());
            if m.count() > 0 {
                out.insert(p.id, m);
            }
        }
        out
    }
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (frame as u64).wrapping_mul(0xd1b5_4a32_d192_ed03))
}

impl MaskSource for GroundTruthSource {
    fn cadence(&self) -> usize {
        self.cadence
    }

    fn set_cadence(&mut self, cadence: usize) {
        self.cadence = cadence;
    }

    fn num_classes(&self) -> usize {
        self.scene.labels.len()
    }

    fn detections_for(&mut self, frame: usize) -> Result<Option<Vec<Detection>>, SegmentationError> {
        if !self.is_detection_frame(frame) || frame >= self.poses.len() {
            return Ok(None);
        }
        let c = self.corruption;
        let mut rng = frame_rng(c.seed, frame);
        let mut out = Vec::new();
        for (id, mut mask) in self.clean_masks(frame) {
            // draw every random number regardless of outcome so each
            // instance consumes a fixed stream
            let drop = rng.random::<f64>() < c.dropout;
            let radius = if c.jitter_px > 0 { rng.random_range(0..=c.jitter_px) } else { 0 };
            let grow = rng.random::<bool>();
            if drop {
                continue;
            }
            if radius > 0 {
                mask = if grow { mask.dilated(radius) } else { mask.eroded(radius) };
            }
            if mask.count() == 0 {
                continue;
            }
            let label = self.scene.primitive(id).and_then(|p| p.label).unwrap_or(0);
            out.push(Detection {
                mask,
                class_dist: self.class_dist(label),
                score: 0.9,
            });
        }
        if rng.random::<f64>() < c.false_positive_rate {
            let (w, h) = (self.intrinsics.width, self.intrinsics.height);
            let r = rng.random_range(10.0..40.0f64);
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let label = rng.random_range(0..self.scene.labels.len().max(1));
            let mut m = Image::new(w, h, false);
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    m.set(x, y, dx * dx + dy * dy <= r * r);
                }
            }
            if m.count() > 0 {
                out.push(Detection {
                    mask: m,
                    class_dist: self.class_dist(label),
                    score: 0.6,
                });
            }
        }
        Ok(Some(out))
    }
}

/// Reads `NNNNNN.mask` (little-endian u16 instance ids, row-major, 0 =
/// background) and `NNNNNN.txt` (one line per instance: `id score p0 .. pn`)
/// for frame number NNNNNN.
pub struct FileSource {
    dir: PathBuf,
    width: usize,
    height: usize,
    num_classes: usize,
    pub cadence: usize,
}

impl FileSource {
    pub fn new(dir: &Path, width: usize, height: usize, num_classes: usize) -> Self {
        Self {
            dir: dir.to_owned(),
            width,
            height,
            num_classes,
            cadence: DEFAULT_CADENCE,
        }
    }

    pub fn raster_path(dir: &Path, frame: usize) -> PathBuf {
        dir.join(format!("{frame:06}.mask"))
    }

    pub fn sidecar_path(dir: &Path, frame: usize) -> PathBuf {
        dir.join(format!("{frame:06}.txt"))
    }

    pub fn load(&self, frame: usize) -> Result<Option<Vec<Detection>>, SegmentationError> {
        let raster = Self::raster_path(&self.dir, frame);
        if !raster.exists() {
            return Ok(None);
        }
        let err = |path: &Path, message: String| SegmentationError::Load {
            path: path.to_owned(),
            message,
        };
        let bytes = std::fs::read(&raster).map_err(|e| err(&raster, e.to_string()))?;
        if bytes.len() != self.width * self.height * 2 {
            return Err(err(
                &raster,
                format!("{} bytes, expected {} for {}x{}", bytes.len(), self.width * self.height * 2, self.width, self.height),
            ));
        }
        let ids: Vec<u16> = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        let sidecar = Self::sidecar_path(&self.dir, frame);
        let text = std::fs::read_to_string(&sidecar).map_err(|e| err(&sidecar, e.to_string()))?;
        let mut entries: BTreeMap<u16, (f64, Vec<f64>)> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let at = |m: String| err(&sidecar, format!("line {}: {m}", n + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 2 + self.num_classes {
                return Err(at(format!("expected {} fields, found {}", 2 + self.num_classes, f.len())));
            }
            let id: u16 = f[0].parse().map_err(|e| at(format!("id {:?}: {e}", f[0])))?;
            if id == 0 {
                return Err(at("id 0 is background".into()));
            }
            let nums: Vec<f64> = f[1..]
                .iter()
                .map(|x| x.parse::<f64>().map_err(|e| at(format!("{x:?}: {e}"))))
                .collect::<Result<_, _>>()?;
            let score = nums[0];
            if !(0.0..=1.0).contains(&score) {
                return Err(at(format!("score {score} outside [0, 1]")));
            }
            let dist = nums[1..].to_vec();
            let sum: f64 = dist.iter().sum();
            if dist.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > DIST_TOLERANCE {
                return Err(at(format!("class distribution sums to {sum}")));
            }
            if entries.insert(id, (score, dist)).is_some() {
                return Err(at(format!("duplicate id {id}")));
            }
        }
        let mut masks: BTreeMap<u16, Mask> = BTreeMap::new();
        for (i, &id) in ids.iter().enumerate() {
            if id == 0 {
                continue;
            }
            if !entries.contains_key(&id) {
                return Err(err(&sidecar, format!("no entry for instance {id} present in the raster")));
            }
            masks.entry(id).or_insert_with(|| Image::new(self.width, self.height, false)).data[i] = true;
        }
        Ok(Some(
            masks
                .into_iter()
                .map(|(id, mask)| {
                    let (score, dist) = entries.remove(&id).unwrap();
                    Detection {
                        mask,
                        class_dist: dist,
                        score,
                    }
                })
                .collect(),
        ))
    }
}

impl MaskSource for FileSource {
    fn cadence(&self) -> usize {
        self.cadence
    }

    fn set_cadence(&mut self, cadence: usize) {
        self.cadence = cadence;
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn detections_for(&mut self, frame: usize) -> Result<Option<Vec<Detection>>, SegmentationError> {
        if !self.is_detection_frame(frame) {
            return Ok(None);
        }
        self.load(frame)
    }
}

/// Writes one frame in the [`FileSource`] layout. `entries` maps instance
/// id to (score, class distribution).
pub fn write_mask_frame(
    dir: &Path,
    frame: usize,
    index: &Image<u16>,
    entries: &BTreeMap<u16, (f64, Vec<f64>)>,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let bytes: Vec<u8> = index.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(FileSource::raster_path(dir, frame), bytes)?;
    let mut s = String::new();
    for (id, (score, dist)) in entries {
        let _ = write!(s, "{id} {score}");
        for p in dist {
            let _ = write!(s, " {p}");
        }
        s.push('\n');
    }
    std::fs::write(FileSource::sidecar_path(dir, frame), s)
}

/// Runs a source on a worker thread. Requests are queued by frame index and
/// results come back tagged with it; arrival order relative to the pipeline
/// depends on thread scheduling, so runs using this wrapper are not
/// reproducible frame for frame.
pub struct AsyncMaskSource {
    requests: Option<mpsc::Sender<usize>>,
    results: mpsc::Receiver<Result<DetectionBatch, SegmentationError>>,
    worker: Option<std::thread::JoinHandle<()>>,
    pending: VecDeque<usize>,
    cadence: usize,
    num_classes: usize,
}

impl AsyncMaskSource {
    pub fn spawn(mut inner: Box<dyn MaskSource + Send>) -> Self {
        let (req_tx, req_rx) = mpsc::channel::<usize>();
        let (res_tx, res_rx) = mpsc::channel();
        let cadence = inner.cadence();
        let num_classes = inner.num_classes();
        let worker = std::thread::spawn(move || {
            for frame in req_rx {
                let r = inner.detections_for(frame).map(|d| DetectionBatch {
                    source_frame: frame,
                    detections: d.unwrap_or_default(),
                });
                if res_tx.send(r).is_err() {
                    break;
                }
            }
        });
        Self {
            requests: Some(req_tx),
            results: res_rx,
            worker: Some(worker),
            pending: VecDeque::new(),
            cadence,
            num_classes,
        }
    }

    pub fn cadence(&self) -> usize {
        self.cadence
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn request(&mut self, frame: usize) -> Result<(), SegmentationError> {
        self.pending.push_back(frame);
        self.requests
            .as_ref()
            .ok_or(SegmentationError::Disconnected)?
            .send(frame)
            .map_err(|_| SegmentationError::Disconnected)
    }

    /// Batches that have arrived, without blocking.
    pub fn poll(&mut self) -> Result<Vec<DetectionBatch>, SegmentationError> {
        let mut out = Vec::new();
        while let Ok(r) = self.results.try_recv() {
            let b = r?;
            self.pending.retain(|&f| f != b.source_frame);
            out.push(b);
        }
        Ok(out)
    }

    /// Blocks until every outstanding request has been answered.
    pub fn drain(&mut self) -> Result<Vec<DetectionBatch>, SegmentationError> {
        let mut out = Vec::new();
        while !self.pending.is_empty() {
            let b = self.results.recv().map_err(|_| SegmentationError::Disconnected)??;
            self.pending.retain(|&f| f != b.source_frame);
            out.push(b);
        }
        Ok(out)
    }

    pub fn outstanding(&self) -> usize {
        self.pending.len()
    }
}

impl Drop for AsyncMaskSource {
    fn drop(&mut self) {
        self.requests.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
