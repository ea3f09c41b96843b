//! TUM RGB-D ingestion, trajectory text files and absolute trajectory error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::geometry::{align_points, Intrinsics, Pose};
use crate::image::{DepthImage, Image, RgbImage};

/// Maximum timestamp difference for rgb/depth and estimate/truth pairing.
pub const MAX_TIME_DIFFERENCE: f64 = 0.02;
/// Raw depth units per metre.
pub const DEPTH_SCALE: f64 = 5000.0;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("only {0} matched pose pairs; at least 3 are needed")]
    TooFewMatches(usize),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
}

fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Non-comment, non-empty lines with their 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryRecord {
    pub poses: Vec<TimedPose>,
}

impl TrajectoryRecord {
    pub fn new(poses: Vec<TimedPose>) -> Result<Self, IoError> {
        let r = Self { poses };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if self.poses.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            return Err(IoError::InvalidTrajectory("timestamps decrease".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for p in &self.poses {
            let t = p.pose.translation;
            let q = p.pose.quaternion();
            let _ = writeln!(
                s,
                "{:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
                p.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
            );
        }
        s
    }

    /// Parses "timestamp tx ty tz qx qy qz qw" lines; `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self, IoError> {
        let mut poses = Vec::new();
        for (line, l) in data_lines(text) {
            let err = |message: String| IoError::Parse {
                path: path.to_owned(),
                line,
                message,
            };
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|x| x.parse::<f64>().map_err(|e| err(format!("{x:?}: {e}"))))
                .collect::<Result<_, _>>()?;
            if v.len() != 8 {
                return Err(err(format!("expected 8 fields, found {}", v.len())));
            }
            let q = Quaternion::new(v[7], v[4], v[5], v[6]);
            if (q.norm() - 1.0).abs() > 1e-3 {
                return Err(err(format!("quaternion norm {} is not 1", q.norm())));
            }
            let pose = Pose::from_quaternion(Vector3::new(v[1], v[2], v[3]), &UnitQuaternion::from_quaternion(q));
            poses.push(TimedPose { timestamp: v[0], pose });
        }
        let r = Self { poses };
        r.validate().map_err(|e| IoError::Parse {
            path: path.to_owned(),
            line: 0,
            message: e.to_string(),
        })?;
        Ok(r)
    }
}

pub fn write_trajectory(record: &TrajectoryRecord, path: &Path) -> Result<(), IoError> {
    std::fs::write(path, record.to_text()).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryRecord, IoError> {
    TrajectoryRecord::parse(&read_text(path)?, path)
}

/// Greedy one-to-one pairing by nearest timestamp within `max_dt`;
/// returns index pairs ordered by the first sequence.
pub fn associate_timestamps(a: &[f64], b: &[f64], max_dt: f64) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for (i, &t) in a.iter().enumerate() {
        let j0 = b.partition_point(|&x| x < t - max_dt);
        for (j, &u) in b.iter().enumerate().skip(j0) {
            if u > t + max_dt {
                break;
            }
            cands.push(((t - u).abs(), i, j));
        }
    }
    cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let (mut used_a, mut used_b) = (vec![false; a.len()], vec![false; b.len()]);
    let mut out = Vec::new();
    for (_, i, j) in cands {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j));
        }
    }
    out.sort_unstable();
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AteReport {
    pub rmse: f64,
    pub matches: usize,
    /// Diagnostic only: RMS rotation error after alignment, radians.
    pub rotation_rmse: f64,
    /// Estimate-to-truth alignment.
    pub alignment: Pose,
}

pub fn ate(estimate: &TrajectoryRecord, truth: &TrajectoryRecord) -> Result<AteReport, IoError> {
    let te: Vec<f64> = estimate.poses.iter().map(|p| p.timestamp).collect();
    let tt: Vec<f64> = truth.poses.iter().map(|p| p.timestamp).collect();
    let pairs = associate_timestamps(&te, &tt, MAX_TIME_DIFFERENCE);
    if pairs.len() < 3 {
        return Err(IoError::TooFewMatches(pairs.len()));
    }
    let src: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| estimate.poses[i].pose.translation).collect();
    let dst: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| truth.poses[j].pose.translation).collect();
    let align = align_points(&src, &dst);
    let n = pairs.len() as f64;
    let sq: f64 = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (align.transform_point(s) - d).norm_squared())
        .sum();
    let rot: f64 = pairs
        .iter()
        .map(|&(i, j)| {
            let e = align.compose(&estimate.poses[i].pose);
            e.inverse().compose(&truth.poses[j].pose).rotation_angle().powi(2)
        })
        .sum();
    Ok(AteReport {
        rmse: (sq / n).sqrt(),
        matches: pairs.len(),
        rotation_rmse: (rot / n).sqrt(),
        alignment: align,
    })
}

pub fn ate_rmse(estimate: &TrajectoryRecord, truth: &TrajectoryRecord) -> Result<f64, IoError> {
    Ok(ate(estimate, truth)?.rmse)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameEntry {
    pub timestamp: f64,
    pub rgb: PathBuf,
    pub depth_timestamp: f64,
    pub depth: PathBuf,
}

#[derive(Clone, Debug)]
pub struct RgbdFrame {
    pub index: usize,
    pub timestamp: f64,
    pub depth: DepthImage,
    pub rgb: RgbImage,
}

/// A TUM RGB-D directory with rgb/depth already associated.
#[derive(Clone, Debug)]
pub struct TumSequence {
    pub root: PathBuf,
    pub frames: Vec<FrameEntry>,
    /// rgb entries without a depth image within the pairing window.
    pub skipped: usize,
    pub groundtruth: Option<TrajectoryRecord>,
    /// From `intrinsics.toml` when present.
    pub intrinsics: Option<Intrinsics>,
}

fn read_list(path: &Path) -> Result<Vec<(f64, PathBuf)>, IoError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (line, l) in data_lines(&text) {
        let mut it = l.split_whitespace();
        let (Some(t), Some(f)) = (it.next(), it.next()) else {
            return Err(IoError::Parse {
                path: path.to_owned(),
                line,
                message: "expected \"timestamp filename\"".into(),
            });
        };
        let t: f64 = t.parse().map_err(|e| IoError::Parse {
            path: path.to_owned(),
            line,
            message: format!("{t:?}: {e}"),
        })?;
        out.push((t, PathBuf::from(f)));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

pub fn read_tum_rgbd(dir: &Path) -> Result<TumSequence, IoError> {
    let rgb = read_list(&dir.join("rgb.txt"))?;
    let depth = read_list(&dir.join("depth.txt"))?;
    let tr: Vec<f64> = rgb.iter().map(|r| r.0).collect();
    let td: Vec<f64> = depth.iter().map(|d| d.0).collect();
    let pairs = associate_timestamps(&tr, &td, MAX_TIME_DIFFERENCE);
    let frames: Vec<FrameEntry> = pairs
        .iter()
        .map(|&(i, j)| FrameEntry {
            timestamp: rgb[i].0,
            rgb: dir.join(&rgb[i].1),
            depth_timestamp: depth[j].0,
            depth: dir.join(&depth[j].1),
        })
        .collect();
    let gt_path = dir.join("groundtruth.txt");
    let groundtruth = if gt_path.exists() {
        Some(read_trajectory(&gt_path)?)
    } else {
        None
    };
    let k_path = dir.join("intrinsics.toml");
    let intrinsics = if k_path.exists() {
        let k: Intrinsics = toml::from_str(&read_text(&k_path)?).map_err(|e| IoError::Parse {
            path: k_path.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        Some(k)
    } else {
        None
    };
    Ok(TumSequence {
        root: dir.to_owned(),
        skipped: rgb.len() - frames.len(),
        frames,
        groundtruth,
        intrinsics,
    })
}

impl TumSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn load(&self, index: usize) -> Result<RgbdFrame, IoError> {
        let e = &self.frames[index];
        Ok(RgbdFrame {
            index,
            timestamp: e.timestamp,
            depth: read_depth_png(&e.depth)?,
            rgb: read_rgb_png(&e.rgb)?,
        })
    }

    /// Frames decoded lazily in order.
    pub fn iter(&self) -> impl Iterator<Item = Result<RgbdFrame, IoError>> + '_ {
        (0..self.len()).map(|i| self.load(i))
    }
}

fn decode_png(path: &Path) -> Result<(png::OutputInfo, Vec<u8>), IoError> {
    let dec_err = |message: String| IoError::Decode {
        path: path.to_owned(),
        message,
    };
    let file = std::fs::File::open(path).map_err(|source| IoError::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND);
    let mut reader = dec.read_info().map_err(|e| dec_err(e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| dec_err("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| dec_err(e.to_string()))?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// 16-bit single-channel PNG, 5000 units per metre; 0 stays invalid.
pub fn read_depth_png(path: &Path) -> Result<DepthImage, IoError> {
    let (info, buf) = decode_png(path)?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(IoError::Decode {
            path: path.to_owned(),
            message: format!("expected 16-bit greyscale, found {:?} {:?}", info.color_type, info.bit_depth),
        });
    }
    let data = buf
        .chunks_exact(2)
        .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / DEPTH_SCALE) as f32)
        .collect();
    Ok(Image::from_vec(info.width as usize, info.height as usize, data))
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage, IoError> {
    let (info, buf) = decode_png(path)?;
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let channels = info.color_type.samples();
    let step = channels * if wide { 2 } else { 1 };
    let sample = |px: &[u8], c: usize| if wide { px[2 * c] } else { px[c] };
    let data = buf
        .chunks_exact(step)
        .map(|px| match channels {
            1 | 2 => [sample(px, 0); 3],
            _ => [sample(px, 0), sample(px, 1), sample(px, 2)],
        })
        .collect();
    Ok(Image::from_vec(info.width as usize, info.height as usize, data))
}
