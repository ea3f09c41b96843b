//! The per-frame reconstruction loop: tracking, relocalisation, background
//! resets with graph optimisation, object fusion and detection handling.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::association::{associate, filter_detections, merge, Detection};
use crate::background::{init_background, integrate_background, needs_reset, CoarseVolume};
use crate::config::{FeatureKind, PipelineConfig};
use crate::geometry::{Intrinsics, Pose};
use crate::image::{DepthImage, Image, RgbImage};
use crate::io_formats::{IoError, TimedPose, TrajectoryRecord, TumSequence};
use crate::posegraph::{make_virtual_measurement, GraphError, NodeId, OptimizeReport, PoseGraph};
use crate::raycast::{raycast_layered, render_instance_masks, BACKGROUND_ID};
use crate::reloc::{relocalize, FeatureExtractor, FeatureFrame, HarrisBrief, OracleExtractor, RelocObject, SnapshotStore};
use crate::segmentation::{AsyncMaskSource, MaskSource, SegmentationError};
use crate::synthworld::{landmarks, render_synth, OdometryNoise, Sequence};
use crate::tracking::{icp_track, partitioned_systems, preprocess_frame, tracking_lost, TargetSystem};
use crate::tsdf::{extract_mesh, init_object, mask_cloud, ObjectVolume, ResizeKind, TsdfError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Frames(#[from] IoError),
    #[error(transparent)]
    Masks(#[from] SegmentationError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Volume(#[from] TsdfError),
    #[error(transparent)]
    Snapshots(#[from] crate::reloc::RelocError),
    #[error("{0}")]
    Input(String),
}

#[derive(Clone, Debug)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub depth: DepthImage,
    pub rgb: RgbImage,
    /// Known only for synthetic input; read by the oracle feature extractor.
    pub true_pose: Option<Pose>,
}

pub trait FrameSource {
    fn intrinsics(&self) -> Intrinsics;
    fn len(&self) -> usize;
    fn frame(&mut self, index: usize) -> Result<Frame, PipelineError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Renders a synthetic sequence on demand.
pub struct SynthFrames {
    pub sequence: Sequence,
    poses: Vec<(f64, Pose)>,
}

impl SynthFrames {
    pub fn new(sequence: Sequence) -> Self {
        let poses = sequence.trajectory.frame_poses();
        Self { sequence, poses }
    }

    pub fn true_trajectory(&self) -> TrajectoryRecord {
        TrajectoryRecord {
            poses: self
                .poses
                .iter()
                .map(|&(timestamp, pose)| TimedPose { timestamp, pose })
                .collect(),
        }
    }
}

impl FrameSource for SynthFrames {
    fn intrinsics(&self) -> Intrinsics {
        self.sequence.intrinsics
    }

    fn len(&self) -> usize {
        self.poses.len()
    }

    fn frame(&mut self, index: usize) -> Result<Frame, PipelineError> {
        let (timestamp, pose) = self.poses[index];
        let s = &self.sequence;
        let f = render_synth(&s.scene, &pose, &s.intrinsics, s.depth_noise.as_ref().map(|n| (n, index as u64)));
        Ok(Frame {
            index,
            timestamp,
            depth: f.depth_f32(),
            rgb: f.rgb,
            true_pose: Some(pose),
        })
    }
}

/// Frames of a TUM RGB-D directory.
pub struct TumFrames {
    pub sequence: TumSequence,
    pub intrinsics: Intrinsics,
}

impl FrameSource for TumFrames {
    fn intrinsics(&self) -> Intrinsics {
        self.intrinsics
    }

    fn len(&self) -> usize {
        self.sequence.len()
    }

    fn frame(&mut self, index: usize) -> Result<Frame, PipelineError> {
        let f = self.sequence.load(index)?;
        if (f.depth.width, f.depth.height) != (self.intrinsics.width, self.intrinsics.height) {
            return Err(PipelineError::Input(format!(
                "{}: depth is {}x{}, intrinsics expect {}x{}",
                self.sequence.frames[index].depth.display(),
                f.depth.width,
                f.depth.height,
                self.intrinsics.width,
                self.intrinsics.height
            )));
        }
        Ok(Frame {
            index,
            timestamp: f.timestamp,
            depth: f.depth,
            rgb: f.rgb,
            true_pose: None,
        })
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Timings {
    pub preprocess_ms: f64,
    pub raycast_ms: f64,
    pub track_ms: f64,
    pub relocalise_ms: f64,
    pub optimise_ms: f64,
    pub integrate_background_ms: f64,
    pub integrate_objects_ms: f64,
    pub detections_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DetectionStats {
    pub source_frame: usize,
    pub raw: usize,
    pub kept: usize,
    pub matched: usize,
    pub created: Vec<u32>,
    pub rejected: usize,
    pub deleted: Vec<u32>,
    pub resized: Vec<u32>,
    pub snapshots: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimiseStats {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub nodes: usize,
    pub edges: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct FrameStats {
    pub frame: usize,
    pub timestamp: f64,
    pub lost: bool,
    pub relocalised: bool,
    pub reloc_failure: Option<String>,
    pub background_reset: bool,
    pub icp_rmse: Option<f64>,
    pub valid_fraction: Option<f64>,
    pub objects: usize,
    /// Voxel storage per object id, bytes.
    pub object_memory: BTreeMap<u32, usize>,
    pub object_memory_total: usize,
    pub optimisation: Option<OptimiseStats>,
    pub detections: Option<DetectionStats>,
    pub timings: Timings,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// What detection handling needs from the frame it belongs to.
#[derive(Clone)]
pub struct FrameContext {
    pub index: usize,
    pub depth: DepthImage,
    pub rgb: RgbImage,
    pub true_pose: Option<Pose>,
    pub pose: Pose,
    /// Partitioned ICP systems at `pose` against the tracking reference.
    pub systems: BTreeMap<i32, TargetSystem>,
    pub lost: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum RunStatus {
    Complete,
    /// Stopped early after too many consecutive lost frames.
    Partial { last_frame: usize },
}

pub struct RunOutput {
    pub trajectory: TrajectoryRecord,
    pub objects: Vec<ObjectVolume>,
    pub graph: PoseGraph,
    pub snapshots: SnapshotStore,
    pub stats: Vec<FrameStats>,
    pub status: RunStatus,
}

pub fn make_extractor(kind: FeatureKind, sequence: Option<&Sequence>, config: &PipelineConfig) -> Result<Box<dyn FeatureExtractor>, PipelineError> {
    Ok(match kind {
        FeatureKind::HarrisBrief => Box::new(HarrisBrief::new(10.0, config.reloc.ratio_test)),
        FeatureKind::Oracle => {
            let seq = sequence.ok_or_else(|| PipelineError::Input("oracle features need a synthetic sequence".into()))?;
            let lm = landmarks(&seq.scene, 200, config.seed);
            Box::new(OracleExtractor::new(lm.into_iter().map(|(id, _, p)| (id, p)).collect()))
        }
    })
}

fn downsample_rgb(img: &RgbImage) -> RgbImage {
    let (w, h) = (img.width / 2, img.height / 2);
    let mut out = Image::new(w, h, [0u8; 3]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0u32; 3];
            for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let p = img.get(2 * x + dx, 2 * y + dy);
                for c in 0..3 {
                    acc[c] += p[c] as u32;
                }
            }
            out.set(x, y, acc.map(|a| ((a + 2) / 4) as u8));
        }
    }
    out
}

pub struct Pipeline {
    config: PipelineConfig,
    k: Intrinsics,
    num_classes: usize,
    extractor: Box<dyn FeatureExtractor>,
    odometry_noise: Option<OdometryNoise>,
    pose: Pose,
    background: Option<CoarseVolume>,
    bg_node: NodeId,
    anchor: NodeId,
    objects: Vec<ObjectVolume>,
    graph: PoseGraph,
    snapshots: SnapshotStore,
    next_object_id: u32,
    trajectory: Vec<(f64, NodeId, Pose)>,
    lost_streak: usize,
    started: bool,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        input_intrinsics: Intrinsics,
        num_classes: usize,
        extractor: Box<dyn FeatureExtractor>,
        odometry_noise: Option<OdometryNoise>,
    ) -> Self {
        let mut k = input_intrinsics;
        for _ in 0..config.input_downsample {
            k = k.half();
        }
        Self {
            config,
            k,
            num_classes,
            extractor,
            odometry_noise,
            pose: Pose::identity(),
            background: None,
            bg_node: NodeId::Camera(0),
            anchor: NodeId::Camera(0),
            objects: Vec::new(),
            graph: PoseGraph::new(),
            snapshots: SnapshotStore::new(),
            next_object_id: 1,
            trajectory: Vec::new(),
            lost_streak: 0,
            started: false,
        }
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.k
    }

    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    pub fn objects(&self) -> &[ObjectVolume] {
        &self.objects
    }

    pub fn graph(&self) -> &PoseGraph {
        &self.graph
    }

    pub fn lost_streak(&self) -> usize {
        self.lost_streak
    }

    fn prepare(&self, frame: &Frame) -> (DepthImage, RgbImage) {
        let (mut d, mut c) = (frame.depth.clone(), frame.rgb.clone());
        for _ in 0..self.config.input_downsample {
            d = d.downsample_depth();
            c = downsample_rgb(&c);
        }
        (d, c)
    }

    fn fill_memory(&self, stats: &mut FrameStats) {
        stats.objects = self.objects.len();
        stats.object_memory = self.objects.iter().map(|o| (o.id, o.memory_bytes())).collect();
        stats.object_memory_total = stats.object_memory.values().sum();
    }

    fn optimise(&mut self) -> OptimiseStats {
        let OptimizeReport {
            iterations,
            initial_cost,
            final_cost,
            ..
        } = self.graph.optimize(&self.config.optimizer);
        for o in &mut self.objects {
            if let Some(s) = self.graph.state(NodeId::Object(o.id)) {
                o.pose = s;
            }
        }
        OptimiseStats {
            iterations,
            initial_cost,
            final_cost,
            nodes: self.graph.len(),
            edges: self.graph.edges().len(),
        }
    }

    /// Virtual-measurement edges into camera node `node` from the background
    /// node and every object whose partition passes the integration gate.
    fn add_edges(&mut self, node: NodeId, pose: &Pose, systems: &BTreeMap<i32, TargetSystem>, with_background: bool) -> Result<(), PipelineError> {
        let max_cond = self.config.tracking.max_condition;
        if with_background && self.bg_node != node {
            if let (Some(sys), Some(bg)) = (systems.get(&BACKGROUND_ID), &self.background) {
                if let Some((z, info)) = make_virtual_measurement(sys, pose, &bg.frame(), max_cond) {
                    self.graph.add_edge(self.bg_node, node, z, info)?;
                }
            }
        }
        for (&id, sys) in systems.range(1..) {
            let Some(o) = self.objects.iter().find(|o| o.id as i32 == id) else {
                continue;
            };
            if !ObjectVolume::passes_gate(&sys.quality(), &self.config.objects) || !self.graph.contains(NodeId::Object(o.id)) {
                continue;
            }
            if let Some((z, info)) = make_virtual_measurement(sys, pose, &o.pose, max_cond) {
                self.graph.add_edge(NodeId::Object(o.id), node, z, info)?;
            }
        }
        Ok(())
    }

    /// New camera node with edges, optimisation, and a fresh background at
    /// the optimised pose.
    fn reset_background(
        &mut self,
        frame: usize,
        pose: Pose,
        systems: &BTreeMap<i32, TargetSystem>,
        with_background: bool,
        stats: &mut FrameStats,
    ) -> Result<(), PipelineError> {
        let node = NodeId::Camera(frame as u32);
        if !self.graph.contains(node) {
            self.graph.add_camera_node(frame as u32, pose)?;
            self.add_edges(node, &pose, systems, with_background)?;
        }
        let t = Instant::now();
        stats.optimisation = Some(self.optimise());
        stats.timings.optimise_ms += ms(t);
        self.pose = self.graph.state(node).unwrap_or(pose);
        self.background = Some(init_background(&self.pose, &self.config.background));
        self.bg_node = node;
        self.anchor = node;
        stats.background_reset = true;
        Ok(())
    }

    fn gate_distribution(&self, detections: Option<&[Detection]>) -> Option<Vec<f64>> {
        let kept = filter_detections(detections?.to_vec(), &self.config.association);
        (!kept.is_empty()).then(|| merge(kept).class_dist)
    }

    /// Tracks one frame and fuses its depth. `detections` are only read for
    /// the relocalisation class gate.
    pub fn process(&mut self, frame: &Frame, detections: Option<&[Detection]>) -> Result<(FrameStats, FrameContext), PipelineError> {
        let t_total = Instant::now();
        let mut stats = FrameStats {
            frame: frame.index,
            timestamp: frame.timestamp,
            ..Default::default()
        };
        let (depth, rgb) = self.prepare(frame);
        let k = self.k;
        let cfg = self.config.clone();
        let t = Instant::now();
        let pyr = preprocess_frame(&depth, &k, &cfg.tracking);
        stats.timings.preprocess_ms = ms(t);
        let mut systems = BTreeMap::new();
        let mut lost = false;

        if !self.started {
            self.started = true;
            let node = self.graph.add_camera_node(frame.index as u32, Pose::identity())?;
            self.pose = Pose::identity();
            self.bg_node = node;
            self.anchor = node;
            self.background = Some(init_background(&self.pose, &cfg.background));
        } else {
            let t = Instant::now();
            let reference = raycast_layered(&self.objects, self.background.as_ref(), &self.pose, &k, &cfg.raycast);
            stats.timings.raycast_ms = ms(t);
            let t = Instant::now();
            let result = icp_track(&reference, &pyr, &self.pose, &cfg.tracking);
            stats.timings.track_ms = ms(t);
            stats.icp_rmse = Some(result.icp_rmse);
            stats.valid_fraction = Some(result.valid_fraction);
            let mut pose = result.pose;
            systems = result.systems.clone();
            if let Some(n) = &self.odometry_noise {
                let noisy = pose.compose(&n.increment(frame.index as u64));
                // the background follows the error so it accumulates as drift
                if let Some(bg) = &mut self.background {
                    bg.carry(&noisy.compose(&pose.inverse()));
                }
                pose = noisy;
                systems = partitioned_systems(&reference, &pyr, &pose, &cfg.tracking);
            }
            if tracking_lost(&result, &cfg.tracking) {
                let t = Instant::now();
                let gate = self.gate_distribution(detections);
                match self.try_relocalise(&depth, &rgb, frame.true_pose.as_ref(), gate.as_deref()) {
                    Ok(p) => {
                        let fresh = raycast_layered(&self.objects, None, &p, &k, &cfg.raycast);
                        let sys = partitioned_systems(&fresh, &pyr, &p, &cfg.tracking);
                        stats.timings.relocalise_ms = ms(t);
                        stats.relocalised = true;
                        self.lost_streak = 0;
                        self.reset_background(frame.index, p, &sys, false, &mut stats)?;
                        systems = sys;
                        pose = self.pose;
                    }
                    Err(reason) => {
                        stats.timings.relocalise_ms = ms(t);
                        stats.reloc_failure = Some(reason.to_string());
                        self.lost_streak += 1;
                        lost = true;
                    }
                }
            } else {
                self.lost_streak = 0;
            }
            if !lost {
                self.pose = pose;
                let reset = self
                    .background
                    .as_ref()
                    .is_none_or(|bg| needs_reset(bg, &self.pose, &cfg.background));
                if reset && !stats.relocalised {
                    self.reset_background(frame.index, self.pose, &systems, true, &mut stats)?;
                }
            }
        }
        stats.lost = lost;

        if !lost {
            let t = Instant::now();
            if let Some(bg) = &mut self.background {
                integrate_background(bg, &depth, &self.pose, &k, &cfg.background);
            }
            stats.timings.integrate_background_ms = ms(t);
            let t = Instant::now();
            for o in &mut self.objects {
                if let Some(sys) = systems.get(&(o.id as i32)) {
                    o.integrate_depth(&depth, &self.pose, &k, &sys.quality(), &cfg.objects);
                }
            }
            stats.timings.integrate_objects_ms = ms(t);
        }

        let anchor_pose = self.graph.state(self.anchor).unwrap_or_default();
        self.trajectory
            .push((frame.timestamp, self.anchor, anchor_pose.inverse().compose(&self.pose)));
        self.fill_memory(&mut stats);
        stats.timings.total_ms = ms(t_total);
        let ctx = FrameContext {
            index: frame.index,
            depth,
            rgb,
            true_pose: frame.true_pose,
            pose: self.pose,
            systems,
            lost,
        };
        Ok((stats, ctx))
    }

    fn try_relocalise(
        &self,
        depth: &DepthImage,
        rgb: &RgbImage,
        true_pose: Option<&Pose>,
        gate: Option<&[f64]>,
    ) -> Result<Pose, crate::reloc::RelocFailure> {
        let features = self.extractor.detect(&FeatureFrame {
            rgb,
            depth,
            intrinsics: &self.k,
            true_pose,
        });
        let objects: Vec<RelocObject> = self
            .objects
            .iter()
            .map(|o| RelocObject {
                id: o.id,
                pose: o.pose,
                class_dist: o.class_distribution.clone(),
            })
            .collect();
        relocalize(&self.snapshots, &features, &objects, gate, self.extractor.as_ref(), &self.config.reloc)
            .map(|r| r.camera_pose)
    }

    /// Association, object updates, new objects, snapshots and the camera
    /// node of a detection frame.
    pub fn apply_detections(&mut self, ctx: &FrameContext, detections: Vec<Detection>) -> Result<DetectionStats, PipelineError> {
        let mut ds = DetectionStats {
            source_frame: ctx.index,
            raw: detections.len(),
            ..Default::default()
        };
        if ctx.lost {
            return Ok(ds);
        }
        let k = self.k;
        let cfg = self.config.clone();
        let op = &cfg.objects;
        let pose = ctx.pose;
        let maps = raycast_layered(&self.objects, self.background.as_ref(), &pose, &k, &cfg.raycast);
        let rendered = render_instance_masks(&maps);
        let kept = filter_detections(detections, &cfg.association);
        ds.kept = kept.len();
        let assoc = associate(kept, &rendered, &cfg.association);
        ds.matched = assoc.matched.len();

        for o in &mut self.objects {
            let visible = maps.pixel_counts.get(&(o.id as i32)).copied().unwrap_or(0);
            if o.update_existence(visible, assoc.matched.contains_key(&(o.id as i32)), op) {
                ds.deleted.push(o.id);
            }
        }
        for id in &ds.deleted {
            self.objects.retain(|o| o.id != *id);
            self.graph.remove_object(*id);
            self.snapshots.remove_object(*id);
        }

        let features = self.extractor.detect(&FeatureFrame {
            rgb: &ctx.rgb,
            depth: &ctx.depth,
            intrinsics: &k,
            true_pose: ctx.true_pose.as_ref(),
        });
        let min_angle = cfg.reloc.min_view_angle_deg;

        for (&id, det) in &assoc.matched {
            let Some(o) = self.objects.iter_mut().find(|o| o.id as i32 == id) else {
                continue;
            };
            let mc = mask_cloud(&det.mask, &ctx.depth, &pose, &k, op.erosion_radius);
            let rc: Vec<_> = maps
                .index
                .data
                .iter()
                .zip(&maps.vertices.data)
                .filter(|(&i, _)| i == id)
                .map(|(_, v)| *v)
                .collect();
            let r = o.resize(&mc, &rc, op);
            if r.kind != ResizeKind::Unchanged {
                ds.resized.push(o.id);
                self.graph.recentre_object(o.id, &r.new_from_old)?;
                self.snapshots.recentre_object(o.id, &r.new_from_old);
                if r.kind == ResizeKind::Reinitialised {
                    o.integrate_depth_ungated(&ctx.depth, &pose, &k, op);
                }
            }
            o.fuse_foreground(&det.mask, &ctx.depth, &pose, &k, op);
            o.fuse_semantics(&det.class_dist, op.semantic_mode)?;
            if self
                .snapshots
                .maybe_add_snapshot(o.id, &o.pose, &pose, &features, Some(&det.mask), &o.class_distribution, min_angle)
            {
                ds.snapshots += 1;
            }
        }

        for det in &assoc.unmatched {
            match init_object(self.next_object_id, &det.mask, &ctx.depth, &pose, &k, &self.objects, self.num_classes, op) {
                Ok(mut o) => {
                    self.next_object_id += 1;
                    o.integrate_depth_ungated(&ctx.depth, &pose, &k, op);
                    o.fuse_foreground(&det.mask, &ctx.depth, &pose, &k, op);
                    o.fuse_semantics(&det.class_dist, op.semantic_mode)?;
                    self.graph.add_object_node(o.id, o.pose)?;
                    if self
                        .snapshots
                        .maybe_add_snapshot(o.id, &o.pose, &pose, &features, Some(&det.mask), &o.class_distribution, min_angle)
                    {
                        ds.snapshots += 1;
                    }
                    ds.created.push(o.id);
                    self.objects.push(o);
                }
                Err(_) => ds.rejected += 1,
            }
        }

        let node = NodeId::Camera(ctx.index as u32);
        if !self.graph.contains(node) {
            self.graph.add_camera_node(ctx.index as u32, pose)?;
            self.add_edges(node, &pose, &ctx.systems, true)?;
            if let NodeId::Camera(a) = self.anchor {
                if ctx.index as u32 >= a {
                    self.anchor = node;
                    // later frames of this batch are re-expressed against it
                }
            }
        }
        Ok(ds)
    }

    /// Final optimisation (when configured) and the corrected trajectory.
    pub fn finish(mut self, status: RunStatus, stats: Vec<FrameStats>) -> RunOutput {
        if self.config.final_optimisation && self.started {
            self.optimise();
        }
        let poses = self
            .trajectory
            .iter()
            .map(|&(timestamp, anchor, rel)| TimedPose {
                timestamp,
                pose: self.graph.state(anchor).unwrap_or_default().compose(&rel),
            })
            .collect();
        RunOutput {
            trajectory: TrajectoryRecord { poses },
            objects: self.objects,
            graph: self.graph,
            snapshots: self.snapshots,
            stats,
            status,
        }
    }
}

fn emit(stats: &FrameStats, out: &mut Option<&mut dyn Write>) -> Result<(), PipelineError> {
    if let Some(w) = out {
        serde_json::to_writer(&mut **w, stats).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Runs the whole sequence. Stats are written as one JSON object per line.
pub fn run(
    config: &PipelineConfig,
    source: &mut dyn FrameSource,
    mut masks: Box<dyn MaskSource + Send>,
    extractor: Box<dyn FeatureExtractor>,
    odometry_noise: Option<OdometryNoise>,
    mut stats_out: Option<&mut dyn Write>,
) -> Result<RunOutput, PipelineError> {
    config.validate().map_err(|e| PipelineError::Input(e.to_string()))?;
    masks.set_cadence(config.detection_cadence);
    let mut p = Pipeline::new(config.clone(), source.intrinsics(), masks.num_classes(), extractor, odometry_noise);
    let mut all = Vec::new();
    let mut status = RunStatus::Complete;
    let cap = config.max_consecutive_lost;

    if config.async_detections {
        let cadence = masks.cadence();
        let mut worker = AsyncMaskSource::spawn(masks);
        let mut pending: BTreeMap<usize, FrameContext> = BTreeMap::new();
        for i in 0..source.len() {
            let frame = source.frame(i)?;
            let (mut stats, ctx) = p.process(&frame, None)?;
            if i.is_multiple_of(cadence) {
                worker.request(i)?;
                pending.insert(i, ctx);
            }
            let t = Instant::now();
            for b in worker.poll()? {
                if let Some(c) = pending.remove(&b.source_frame) {
                    stats.detections = Some(p.apply_detections(&c, b.detections)?);
                }
            }
            stats.timings.detections_ms = ms(t);
            p.fill_memory(&mut stats);
            emit(&stats, &mut stats_out)?;
            all.push(stats);
            if p.lost_streak > cap {
                status = RunStatus::Partial { last_frame: i };
                break;
            }
        }
        for b in worker.drain()? {
            if let Some(c) = pending.remove(&b.source_frame) {
                p.apply_detections(&c, b.detections)?;
            }
        }
    } else {
        for i in 0..source.len() {
            let frame = source.frame(i)?;
            let dets = masks.detections_for(i)?;
            let (mut stats, ctx) = p.process(&frame, dets.as_deref())?;
            if let Some(d) = dets {
                let t = Instant::now();
                stats.detections = Some(p.apply_detections(&ctx, d)?);
                stats.timings.detections_ms = ms(t);
                p.fill_memory(&mut stats);
            }
            emit(&stats, &mut stats_out)?;
            all.push(stats);
            if p.lost_streak > cap {
                status = RunStatus::Partial { last_frame: i };
                break;
            }
        }
    }
    Ok(p.finish(status, all))
}

/// Writes `trajectory.txt`, `graph.txt`, `snapshots.bin` and
/// `objects/object_<id>.{vox,toml,ply}` under `dir`.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir.join("objects"))?;
    crate::io_formats::write_trajectory(&out.trajectory, &dir.join("trajectory.txt"))?;
    std::fs::write(dir.join("graph.txt"), out.graph.dump())?;
    out.snapshots.save(&dir.join("snapshots.bin"))?;
    for o in &out.objects {
        let stem = dir.join("objects").join(format!("object_{}", o.id));
        o.save(&stem)?;
        extract_mesh(o).save_ply(&stem.with_extension("ply"))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentation::{Corruption, GroundTruthSource, NoMasks};
    use crate::synthworld::loop_sequence;

    fn small_config() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.background.resolution = 128;
        c.background.voxel_size = 0.04;
        c.objects.init_resolution = 32;
        c.objects.max_resolution = 64;
        c.detection_cadence = 10;
        c.features = FeatureKind::Oracle;
        c
    }

    fn tiny(frames: usize) -> Sequence {
        let mut s = loop_sequence("loop-tiny").unwrap();
        s.trajectory.keyframes.truncate(frames);
        s
    }

    fn run_tiny(config: &PipelineConfig, frames: usize, with_masks: bool) -> RunOutput {
        let seq = tiny(frames);
        let mut src = SynthFrames::new(seq.clone());
        let masks: Box<dyn MaskSource + Send> = if with_masks {
            let poses = src.true_trajectory().poses.iter().map(|p| p.pose).collect();
            Box::new(GroundTruthSource::new(seq.scene.clone(), poses, seq.intrinsics, Corruption::default()))
        } else {
            Box::new(NoMasks { num_classes: 3 })
        };
        let ex = make_extractor(config.features, Some(&seq), config).unwrap();
        run(config, &mut src, masks, ex, None, None).unwrap()
    }

    #[test]
    fn tracks_a_short_sequence() {
        let c = small_config();
        let out = run_tiny(&c, 12, true);
        assert_eq!(out.status, RunStatus::Complete);
        assert_eq!(out.trajectory.len(), 12);
        let truth = SynthFrames::new(tiny(12)).true_trajectory();
        let ate = crate::io_formats::ate_rmse(&out.trajectory, &truth).unwrap();
        assert!(ate < 0.02, "ate {ate}");
        assert!(!out.objects.is_empty());
        // inventory consistency
        for o in &out.objects {
            assert!(out.graph.contains(NodeId::Object(o.id)));
        }
        for n in out.graph.nodes() {
            if let NodeId::Object(id) = n.id {
                assert!(out.objects.iter().any(|o| o.id == id));
            }
        }
        for s in &out.stats {
            for (id, &bytes) in &s.object_memory {
                let _ = id;
                let r = (bytes / 10) as f64;
                let side = r.cbrt().round() as usize;
                assert_eq!(side * side * side * 10, bytes);
            }
        }
    }

    #[test]
    fn no_masks_is_plain_odometry() {
        let c = small_config();
        let out = run_tiny(&c, 8, false);
        assert!(out.objects.is_empty());
        assert!(out.graph.nodes().all(|n| matches!(n.id, NodeId::Camera(_))));
    }

    #[test]
    fn runs_are_reproducible() {
        let c = small_config();
        let a = run_tiny(&c, 12, true);
        let b = run_tiny(&c, 12, true);
        assert_eq!(a.trajectory.to_text(), b.trajectory.to_text());
        assert_eq!(a.graph.dump(), b.graph.dump());
    }
}
