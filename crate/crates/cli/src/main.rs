use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use objslam::config::{FeatureKind, PipelineConfig};
use objslam::geometry::Intrinsics;
use objslam::image::Image;
use objslam::io_formats::{ate, read_trajectory, read_tum_rgbd};
use objslam::pipeline::{make_extractor, run, write_outputs, FrameSource, RunStatus, SynthFrames, TumFrames};
use objslam::posegraph::PoseGraph;
use objslam::segmentation::{write_mask_frame, Corruption, FileSource, GroundTruthSource, MaskSource, NoMasks};
use objslam::synthworld::{export_tum, loop_sequence, OdometryNoise, Sequence};
use objslam::tsdf::{extract_mesh, ObjectVolume};

/// Object-level volumetric RGB-D SLAM.
#[derive(Parser)]
#[command(name = "objslam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline on a TUM-layout directory or a synthetic preset.
    Run(RunArgs),
    /// Absolute trajectory error of an estimate against ground truth.
    EvalAte {
        estimate: PathBuf,
        groundtruth: PathBuf,
        /// Also print match count and rotation RMSE.
        #[arg(long)]
        verbose: bool,
    },
    /// Write a PLY mesh for every object volume saved by `run`.
    ExportMeshes {
        /// Output directory of a previous run (reads `objects/*.vox`).
        run_dir: PathBuf,
        out_dir: PathBuf,
    },
    /// Render a synthetic preset in the TUM layout, with mask files.
    SynthGenerate(SynthArgs),
    /// Parse a pose graph file and print it back in canonical form.
    DumpGraph {
        graph: PathBuf,
        /// Print node and edge counts instead of the graph.
        #[arg(long)]
        summary: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MaskMode {
    /// `<input>/masks` when it exists, otherwise none.
    Auto,
    /// Read mask files from `--mask-dir`.
    Files,
    /// Ground-truth masks rendered from the synthetic scene.
    Truth,
    /// No detections: plain coarse-volume odometry.
    None,
}

#[derive(Args)]
struct RunArgs {
    /// TUM-layout sequence directory.
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    input: Option<PathBuf>,
    /// Synthetic preset rendered on the fly (`loop-small`, `loop-tiny`).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    output: PathBuf,
    /// Pipeline configuration (TOML); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MaskMode::Auto)]
    masks: MaskMode,
    #[arg(long)]
    mask_dir: Option<PathBuf>,
    /// Number of classes in the mask files; read from `labels.txt` next to
    /// them when omitted.
    #[arg(long)]
    num_classes: Option<usize>,
    /// Intrinsics TOML overriding `<input>/intrinsics.toml`.
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Missed-detection probability for `--masks truth`.
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    /// Per-frame odometry noise (translation sigma, metres). Together with
    /// `--sigma-r-deg` this overrides `<input>/odometry_noise.toml`.
    #[arg(long)]
    sigma_t: Option<f64>,
    #[arg(long)]
    sigma_r_deg: Option<f64>,
    /// Ignore `<input>/odometry_noise.toml`.
    #[arg(long)]
    no_odometry_noise: bool,
    /// Process only the first N frames.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    preset: String,
    out_dir: PathBuf,
    /// Frames between written mask files.
    #[arg(long, default_value_t = 30)]
    mask_cadence: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    sigma_t: f64,
    #[arg(long, default_value_t = 0.0)]
    sigma_r_deg: f64,
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        Self {
            kind,
            message: message.to_string(),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::new("io", format!("{}: {e}", path.display()))
}

fn noise_from(sigma_t: f64, sigma_r_deg: f64, seed: u64) -> Option<OdometryNoise> {
    (sigma_t > 0.0 || sigma_r_deg > 0.0).then(|| OdometryNoise {
        sigma_t,
        sigma_r: sigma_r_deg.to_radians(),
        seed,
    })
}

fn preset(name: &str, frames: Option<usize>) -> Result<Sequence> {
    let mut seq = loop_sequence(name).map_err(|e| CliError::new("input", e))?;
    if let Some(n) = frames {
        seq.trajectory.keyframes.truncate(n.max(2));
    }
    Ok(seq)
}

fn read_labels(dir: &Path) -> Result<usize> {
    let path = dir.join("labels.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| {
        CliError::new("input", format!("{}: {e} (pass --num-classes instead)", path.display()))
    })?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).count())
}

struct Limited<'a> {
    inner: &'a mut dyn FrameSource,
    len: usize,
}

impl FrameSource for Limited<'_> {
    fn intrinsics(&self) -> Intrinsics {
        self.inner.intrinsics()
    }

    fn len(&self) -> usize {
        self.len.min(self.inner.len())
    }

    fn frame(&mut self, index: usize) -> std::result::Result<objslam::pipeline::Frame, objslam::pipeline::PipelineError> {
        self.inner.frame(index)
    }
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let config = match &a.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| CliError::new("config", e))?,
        None => PipelineConfig::default(),
    };
    let explicit_noise = match (a.sigma_t, a.sigma_r_deg) {
        (None, None) => None,
        (t, r) => Some(noise_from(t.unwrap_or(0.0), r.unwrap_or(0.0), config.seed)),
    };

    let mut synth: Option<Sequence> = None;
    let (mut source, truth, file_noise, input_dir): (Box<dyn FrameSource>, _, _, Option<PathBuf>) = if let Some(name) = &a.preset {
        let seq = preset(name, a.frames)?;
        synth = Some(seq.clone());
        let src = SynthFrames::new(seq);
        let truth = src.true_trajectory();
        (Box::new(src), Some(truth), None, None)
    } else {
        let dir = a.input.clone().expect("clap enforces --input or --preset");
        let seq = read_tum_rgbd(&dir).map_err(|e| CliError::new("input", e))?;
        let k = match &a.intrinsics {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                toml::from_str(&text).map_err(|e| CliError::new("input", format!("{}: {e}", p.display())))?
            }
            None => seq.intrinsics.ok_or_else(|| {
                CliError::new("input", format!("{}: no intrinsics.toml; pass --intrinsics", dir.display()))
            })?,
        };
        let noise_path = dir.join("odometry_noise.toml");
        let file_noise = if noise_path.exists() {
            let text = std::fs::read_to_string(&noise_path).map_err(io_err(&noise_path))?;
            Some(toml::from_str::<OdometryNoise>(&text).map_err(|e| CliError::new("input", format!("{}: {e}", noise_path.display())))?)
        } else {
            None
        };
        let truth = seq.groundtruth.clone();
        (Box::new(TumFrames { sequence: seq, intrinsics: k }), truth, file_noise, Some(dir))
    };
    let noise = if a.no_odometry_noise { None } else { explicit_noise.unwrap_or(file_noise) };
    let k = source.intrinsics();

    let masks: Box<dyn MaskSource + Send> = match a.masks {
        MaskMode::None => Box::new(NoMasks { num_classes: a.num_classes.unwrap_or(1) }),
        MaskMode::Truth => {
            let seq = synth
                .as_ref()
                .ok_or_else(|| CliError::new("usage", "--masks truth needs --preset"))?;
            let poses = seq.trajectory.frame_poses().into_iter().map(|(_, p)| p).collect();
            let corruption = Corruption {
                dropout: a.dropout,
                seed: config.seed,
                ..Default::default()
            };
            Box::new(GroundTruthSource::new(seq.scene.clone(), poses, k, corruption))
        }
        MaskMode::Files | MaskMode::Auto => {
            let dir = match (&a.mask_dir, &input_dir) {
                (Some(d), _) => Some(d.clone()),
                (None, Some(i)) if i.join("masks").is_dir() => Some(i.join("masks")),
                _ => None,
            };
            match dir {
                Some(d) => {
                    let n = match a.num_classes {
                        Some(n) => n,
                        None => read_labels(&d)?,
                    };
                    Box::new(FileSource::new(&d, k.width, k.height, n))
                }
                None if matches!(a.masks, MaskMode::Files) => {
                    return Err(CliError::new("usage", "--masks files needs --mask-dir or <input>/masks"));
                }
                None => Box::new(NoMasks { num_classes: a.num_classes.unwrap_or(1) }),
            }
        }
    };
    if config.features == FeatureKind::Oracle && synth.is_none() {
        return Err(CliError::new("config", "oracle features need --preset"));
    }
    let extractor = make_extractor(config.features, synth.as_ref(), &config).map_err(|e| CliError::new("pipeline", e))?;

    std::fs::create_dir_all(&a.output).map_err(io_err(&a.output))?;
    let stats_path = a.output.join("stats.jsonl");
    let mut stats = BufWriter::new(File::create(&stats_path).map_err(io_err(&stats_path))?);
    let mut limited = Limited {
        inner: source.as_mut(),
        len: a.frames.unwrap_or(usize::MAX),
    };
    let out = run(&config, &mut limited, masks, extractor, noise, Some(&mut stats)).map_err(|e| CliError::new("pipeline", e))?;
    stats.flush().map_err(io_err(&stats_path))?;
    write_outputs(&out, &a.output).map_err(|e| CliError::new("io", e))?;

    let status = match out.status {
        RunStatus::Complete => "complete".to_string(),
        RunStatus::Partial { last_frame } => format!("partial (lost, last frame {last_frame})"),
    };
    println!("status: {status}");
    println!("frames: {}", out.trajectory.len());
    println!("objects: {}", out.objects.len());
    if let Some(truth) = truth {
        match ate(&out.trajectory, &truth) {
            Ok(r) => println!("ate_rmse: {:.6}", r.rmse),
            Err(e) => println!("ate_rmse: unavailable ({e})"),
        }
    }
    println!("output: {}", a.output.display());
    Ok(())
}

fn cmd_eval(estimate: &Path, groundtruth: &Path, verbose: bool) -> Result<()> {
    let est = read_trajectory(estimate).map_err(|e| CliError::new("input", e))?;
    let gt = read_trajectory(groundtruth).map_err(|e| CliError::new("input", e))?;
    let r = ate(&est, &gt).map_err(|e| CliError::new("input", e))?;
    println!("{:.6}", r.rmse);
    if verbose {
        println!("matches: {}", r.matches);
        println!("rotation_rmse_deg: {:.6}", r.rotation_rmse.to_degrees());
    }
    Ok(())
}

fn cmd_export_meshes(run_dir: &Path, out_dir: &Path) -> Result<()> {
    let objects = run_dir.join("objects");
    let mut stems: Vec<PathBuf> = std::fs::read_dir(&objects)
        .map_err(io_err(&objects))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "vox"))
        .map(|p| p.with_extension(""))
        .collect();
    stems.sort();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for stem in &stems {
        let vol = ObjectVolume::load(stem).map_err(|e| CliError::new("input", e))?;
        let mesh = extract_mesh(&vol);
        let path = out_dir.join(format!("object_{}.ply", vol.id));
        mesh.save_ply(&path).map_err(io_err(&path))?;
        println!("{} {} triangles", path.display(), mesh.triangles.len());
    }
    println!("meshes: {}", stems.len());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.mask_cadence == 0 {
        return Err(CliError::new("usage", "--mask-cadence must be positive"));
    }
    let mut seq = preset(&a.preset, a.frames)?;
    seq.trajectory.odometry_noise = noise_from(a.sigma_t, a.sigma_r_deg, a.seed);
    let n = export_tum(&seq, &a.out_dir).map_err(|e| CliError::new("io", e))?;

    let mask_dir = a.out_dir.join("masks");
    std::fs::create_dir_all(&mask_dir).map_err(io_err(&mask_dir))?;
    let labels: String = seq.scene.labels.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(mask_dir.join("labels.txt"), labels).map_err(io_err(&mask_dir))?;
    let poses = seq.trajectory.frame_poses().into_iter().map(|(_, p)| p).collect();
    let corruption = Corruption {
        dropout: a.dropout,
        seed: a.seed,
        ..Default::default()
    };
    let k = seq.intrinsics;
    let mut gt = GroundTruthSource::new(seq.scene.clone(), poses, k, corruption);
    gt.set_cadence(a.mask_cadence);
    let mut written = 0;
    for f in 0..n {
        let Some(dets) = gt.detections_for(f).map_err(|e| CliError::new("io", e))? else {
            continue;
        };
        let mut index = Image::new(k.width, k.height, 0u16);
        let mut entries = BTreeMap::new();
        for (i, d) in dets.iter().enumerate() {
            let id = i as u16 + 1;
            for (dst, &m) in index.data.iter_mut().zip(&d.mask.data) {
                if m && *dst == 0 {
                    *dst = id;
                }
            }
            entries.insert(id, (d.score, d.class_dist.clone()));
        }
        // instances hidden entirely by earlier ones have no pixels left
        entries.retain(|id, _| index.data.contains(id));
        write_mask_frame(&mask_dir, f, &index, &entries).map_err(io_err(&mask_dir))?;
        written += 1;
    }
    println!("frames: {n}");
    println!("mask_frames: {written}");
    println!("output: {}", a.out_dir.display());
    Ok(())
}

fn cmd_dump_graph(path: &Path, summary: bool) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let g = PoseGraph::parse(&text).map_err(|e| CliError::new("input", format!("{}: {e}", path.display())))?;
    if summary {
        let cams = g.nodes().filter(|n| matches!(n.id, objslam::posegraph::NodeId::Camera(_))).count();
        println!("nodes: {}", g.len());
        println!("camera_nodes: {cams}");
        println!("object_nodes: {}", g.len() - cams);
        println!("edges: {}", g.edges().len());
    } else {
        print!("{}", g.dump());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.to_string();
            let first = message.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::EvalAte {
            estimate,
            groundtruth,
            verbose,
        } => cmd_eval(&estimate, &groundtruth, verbose),
        Command::ExportMeshes { run_dir, out_dir } => cmd_export_meshes(&run_dir, &out_dir),
        Command::SynthGenerate(a) => cmd_synth(a),
        Command::DumpGraph { graph, summary } => cmd_dump_graph(&graph, summary),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind, "message": e.message });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
