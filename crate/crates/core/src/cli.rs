//! The `sebsfv` command line.
//!
//! Every subcommand writes a JSON run manifest (command line, configuration,
//! seeds, version, per-stage timings and SHA-256 hashes of the outputs).
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::admm::{self, AdmmOptions};
use crate::detect::{self, Polarity};
use crate::error::{Error, Result};
use crate::metrics::{self, DetectionBox};
use crate::pipeline::{self, PipelineConfig};
use crate::registration;
use crate::synth::{self, SceneSpec};
use crate::videodata::{self, quantize_u8, VideoMatrix};

pub const THREADS_ENV: &str = "SEBSFV_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "sebsfv",
    version,
    about = "Shadow enhancement and background suppression for video SAR"
)]
struct Cli {
    /// Worker threads (falls back to SEBSFV_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Manifest path (default: next to the outputs).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene with ground truth.
    Synth(SynthArgs),
    /// Rigidly register every frame to the first frame of its chunk.
    Register(RegisterArgs),
    /// Run the streaming foreground extraction and ADMM clean-up.
    Enhance(EnhanceArgs),
    /// Batch convex decomposition baselines.
    Baseline(BaselineArgs),
    /// Threshold detector on a frame sequence.
    Detect(DetectArgs),
    /// Score detections against ground truth.
    Eval(EvalArgs),
    /// Entropy, contrast and singular-value CDF of a frame sequence.
    Metrics(MetricsArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Scene spec JSON; defaults are used when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Also write the clean background/shadow/noise matrices here.
    #[arg(long)]
    clean: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RegisterArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = registration::DEFAULT_CHUNK)]
    chunk: usize,
}

/// `auto` or a fixed rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RankArg(Option<usize>);

fn parse_rank(s: &str) -> std::result::Result<RankArg, String> {
    if s == "auto" {
        return Ok(RankArg(None));
    }
    match s.parse::<usize>() {
        Ok(0) | Err(_) => Err(format!("expected 'auto' or a positive integer, got '{s}'")),
        Ok(r) => Ok(RankArg(Some(r))),
    }
}

#[derive(Debug, Args)]
struct EnhanceArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    chunk: usize,
    #[arg(long = "K", default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 0.98)]
    eta: f64,
    #[arg(long, default_value = "auto", value_parser = parse_rank)]
    rank: RankArg,
    #[arg(long, default_value_t = 0.98)]
    forgetting: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-frame diagnostics as JSON lines.
    #[arg(long)]
    diag: Option<PathBuf>,
    #[arg(long)]
    swap_roles: bool,
    #[arg(long)]
    carry_state: bool,
    /// Register the input before enhancement.
    #[arg(long)]
    register: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineMethod {
    Lrsd,
    Sbn3dsd,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long, value_enum)]
    method: BaselineMethod,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sparse weight (default 1/sqrt(max(d, n))).
    #[arg(long)]
    xi: Option<f64>,
    /// Noise weight for sbn3dsd (default 100 xi).
    #[arg(long)]
    gamma: Option<f64>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "dark")]
    polarity: Polarity,
    #[arg(long, default_value_t = detect::DEFAULT_Q)]
    q: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    det: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    #[arg(long)]
    pr: Option<PathBuf>,
}

fn parse_center(s: &str) -> std::result::Result<(usize, usize), String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected X,Y, got '{s}'"))?;
    let x = x.trim().parse().map_err(|_| format!("bad x in '{s}'"))?;
    let y = y.trim().parse().map_err(|_| format!("bad y in '{s}'"))?;
    Ok((x, y))
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Contrast window centre `X,Y`.
    #[arg(long, value_parser = parse_center)]
    center: Option<(usize, usize)>,
    /// CDF percentage of singular values.
    #[arg(long, default_value_t = 5.0)]
    rho: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Collected manifest fields of one run.
struct Run {
    argv: Vec<String>,
    command: &'static str,
    config: Value,
    seeds: Map<String, Value>,
    timings: Map<String, Value>,
    outputs: Vec<PathBuf>,
    extra: Map<String, Value>,
}

impl Run {
    fn new(argv: Vec<String>, command: &'static str) -> Self {
        Self {
            argv,
            command,
            config: Value::Null,
            seeds: Map::new(),
            timings: Map::new(),
            outputs: Vec::new(),
            extra: Map::new(),
        }
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.timings.insert(stage.into(), json!(start.elapsed().as_secs_f64()));
        Ok(out)
    }

    fn manifest(&self) -> Result<Value> {
        let mut hashes = Map::new();
        for path in &self.outputs {
            hashes.insert(path.display().to_string(), json!(sha256_file(path)?));
        }
        let mut m = Map::new();
        m.insert("command_line".into(), json!(self.argv));
        m.insert("command".into(), json!(self.command));
        m.insert("config".into(), self.config.clone());
        m.insert("seeds".into(), Value::Object(self.seeds.clone()));
        m.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        m.insert("timings_s".into(), Value::Object(self.timings.clone()));
        m.insert("outputs".into(), Value::Object(hashes));
        for (k, v) in &self.extra {
            m.insert(k.clone(), v.clone());
        }
        Ok(Value::Object(m))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                _ => {
                    eprintln!("{}", e.render());
                    1
                }
            };
        }
    };
    let threads = cli
        .threads
        .or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()))
        .unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(cli, argv, threads)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: Cli, argv: Vec<String>, threads: usize) -> Result<()> {
    let (mut run, default_manifest) = match cli.command {
        Command::Synth(a) => {
            let manifest = a.out.join("manifest.json");
            (cmd_synth(a, argv)?, Some(manifest))
        }
        Command::Register(a) => {
            let manifest = a.out.join("manifest.json");
            (cmd_register(a, argv)?, Some(manifest))
        }
        Command::Enhance(a) => {
            let manifest = a.out.join("manifest.json");
            (cmd_enhance(a, argv)?, Some(manifest))
        }
        Command::Baseline(a) => {
            let manifest = a.out.join("manifest.json");
            (cmd_baseline(a, argv)?, Some(manifest))
        }
        Command::Detect(a) => {
            let manifest = sibling_manifest(&a.out);
            (cmd_detect(a, argv)?, Some(manifest))
        }
        Command::Eval(a) => {
            let manifest = sibling_manifest(&a.out);
            (cmd_eval(a, argv)?, Some(manifest))
        }
        Command::Metrics(a) => {
            let manifest = a.out.as_deref().map(sibling_manifest);
            (cmd_metrics(a, argv)?, manifest)
        }
    };
    run.extra.insert("threads".into(), json!(threads));
    let manifest = serde_json::to_string_pretty(&run.manifest()?)?;
    match cli.manifest.or(default_manifest) {
        Some(path) => write_text(&path, &(manifest + "\n")),
        None => {
            eprintln!("{}", serde_json::to_string(&run.manifest()?)?);
            Ok(())
        }
    }
}

fn sibling_manifest(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn load_frames(dir: &Path) -> Result<Vec<videodata::Frame>> {
    videodata::load_frame_sequence(dir)?.frames()
}

fn cmd_synth(a: SynthArgs, argv: Vec<String>) -> Result<Run> {
    let mut run = Run::new(argv, "synth");
    let mut spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<SceneSpec>(&text)?
        }
        None => SceneSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let scene = run.time("synth", || synth::generate_scene(&spec))?;
    let video = VideoMatrix::from_frames(&scene.frames)?;
    run.outputs = videodata::save_frame_sequence(&a.out, &video, false)?;
    write_text(&a.gt, &metrics::boxes_to_jsonl(&scene.boxes)?)?;
    run.outputs.push(a.gt.clone());
    if let Some(dir) = &a.clean {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, m) in [
            ("background.sbfv", &scene.background),
            ("shadows.sbfv", &scene.shadows),
            ("noise.sbfv", &scene.noise),
        ] {
            let path = dir.join(name);
            videodata::write_matrix(&path, m)?;
            run.outputs.push(path);
        }
    }
    run.seeds.insert("scene".into(), json!(spec.seed));
    run.config = serde_json::to_value(&spec)?;
    Ok(run)
}

fn cmd_register(a: RegisterArgs, argv: Vec<String>) -> Result<Run> {
    let mut run = Run::new(argv, "register");
    let frames = load_frames(&a.input)?;
    let reg = run.time("registration", || registration::register_sequence(&frames, a.chunk))?;
    run.outputs = videodata::save_frame_sequence(&a.out, &reg.video, false)?;
    let lines: Vec<String> = reg
        .transforms
        .iter()
        .enumerate()
        .map(|(j, t)| {
            json!({"frame": j, "reference": (j / a.chunk) * a.chunk, "rotation": t.rotation, "dx": t.dx, "dy": t.dy})
                .to_string()
        })
        .collect();
    let path = a.out.join("transforms.jsonl");
    write_text(&path, &(lines.join("\n") + "\n"))?;
    run.outputs.push(path);
    run.config = json!({"input": a.input, "chunk": a.chunk});
    Ok(run)
}

fn cmd_enhance(a: EnhanceArgs, argv: Vec<String>) -> Result<Run> {
    let mut run = Run::new(argv, "enhance");
    let cfg = PipelineConfig {
        chunk: a.chunk,
        k: a.k,
        eta: a.eta,
        rank: a.rank.0,
        forgetting: a.forgetting,
        carry_state: a.carry_state,
        swap_roles: a.swap_roles,
        seed: a.seed,
        ..PipelineConfig::default()
    };
    cfg.validate()?;
    let mut video = videodata::load_frame_sequence(&a.input)?;
    if a.register {
        let frames = video.frames()?;
        video = run
            .time("registration", || registration::register_sequence(&frames, a.chunk))?
            .video;
    }
    let stream = run.time("online_loop", || pipeline::se_bsfv_stream(&video, &cfg))?;
    let enhanced = run.time("admm", || pipeline::finalize(&stream.stack, &cfg))?;
    run.outputs = videodata::save_frame_sequence(&a.out, &enhanced.video, false)?;
    if let Some(path) = &a.diag {
        let mut text = String::new();
        for d in &stream.diagnostics {
            text.push_str(&serde_json::to_string(d)?);
            text.push('\n');
        }
        write_text(path, &text)?;
        run.outputs.push(path.clone());
    }
    let failed = stream.diagnostics.iter().filter(|d| d.error.is_some()).count();
    run.extra.insert("failed_frames".into(), json!(failed));
    run.extra.insert(
        "admm".into(),
        json!(enhanced
            .reports
            .iter()
            .map(
                |r| json!({"iterations": r.iterations, "primal_residual": r.primal_residual, "converged": r.converged})
            )
            .collect::<Vec<_>>()),
    );
    run.seeds.insert("pipeline".into(), json!(a.seed));
    let mut config = serde_json::to_value(&cfg)?;
    config["register"] = json!(a.register);
    config["input"] = json!(a.input);
    run.config = config;
    Ok(run)
}

fn cmd_baseline(a: BaselineArgs, argv: Vec<String>) -> Result<Run> {
    let mut run = Run::new(argv, "baseline");
    let video = videodata::load_frame_sequence(&a.input)?;
    let (d, n) = (video.d(), video.n());
    let xi = a.xi.unwrap_or_else(|| admm::default_xi(d, n));
    let mask: Vec<bool> = video.mask().iter().copied().collect();
    let mut x = video.data().clone();
    for (v, &m) in x.iter_mut().zip(&mask) {
        if !m {
            *v = 0.0;
        }
    }
    let opts = AdmmOptions::default();
    let (background, sparse, noise, report) = match a.method {
        BaselineMethod::Lrsd => {
            let split = run.time("admm", || admm::rpca_two_term(&x, xi, &opts))?;
            (split.s, split.o, None, split.report)
        }
        BaselineMethod::Sbn3dsd => {
            let gamma = a.gamma.unwrap_or(100.0 * xi);
            run.extra.insert("gamma".into(), json!(gamma));
            let split = run.time("admm", || admm::rpca_three_term(&x, xi, gamma, &opts))?;
            (split.b, split.s, Some(split.n), split.report)
        }
    };
    let rendered = DMatrix::from_vec(d, n, pipeline::render_shadow(sparse.as_slice(), &mask));
    let out = VideoMatrix::new(video.width(), video.height(), rendered, video.mask().clone())?;
    run.outputs = videodata::save_frame_sequence(&a.out, &out, false)?;
    let mut mats = vec![("background.sbfv", &background), ("sparse.sbfv", &sparse)];
    if let Some(noise) = &noise {
        mats.push(("noise.sbfv", noise));
    }
    for (name, m) in mats {
        let path = a.out.join(name);
        videodata::write_matrix(&path, m)?;
        run.outputs.push(path);
    }
    run.extra.insert("admm".into(), json!({"iterations": report.iterations, "primal_residual": report.primal_residual, "converged": report.converged}));
    run.config = json!({
        "method": format!("{:?}", a.method).to_lowercase(),
        "input": a.input,
        "xi": xi,
    });
    Ok(run)
}

fn cmd_detect(a: DetectArgs, argv: Vec<String>) -> Result<Run> {
    let mut run = Run::new(argv, "detect");
    let frames = load_frames(&a.input)?;
    let boxes = run.time("detect", || detect::detect_sequence(&frames, a.q, a.polarity))?;
    write_text(&a.out, &metrics::boxes_to_jsonl(&boxes)?)?;
    run.outputs.push(a.out.clone());
    run.config = json!({
        "input": a.input,
        "polarity": format!("{:?}", a.polarity).to_lowercase(),
        "q": a.q,
    });
    Ok(run)
}

fn read_boxes(path: &Path) -> Result<Vec<DetectionBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    metrics::parse_boxes_jsonl(&text)
}

fn cmd_eval(a: EvalArgs, argv: Vec<String>) -> Result<Run> {
    let mut run = Run::new(argv, "eval");
    if !(a.iou > 0.0 && a.iou <= 1.0) {
        return Err(Error::invalid(format!("iou must lie in (0, 1], got {}", a.iou)));
    }
    let dets = read_boxes(&a.det)?;
    let gts = read_boxes(&a.gt)?;
    let (m, s) = metrics::match_and_score(&dets, &gts, a.iou);
    let (curve, ap) = metrics::pr_curve_and_ap(&dets, &gts, a.iou);
    let report = format!(
        "n_tp,n_fp,n_fn,n_g,precision,recall,f1,ap\n{},{},{},{},{},{},{},{}\n",
        m.tp, m.fp, m.fn_, m.n_g, s.precision, s.recall, s.f1, ap
    );
    write_text(&a.out, &report)?;
    run.outputs.push(a.out.clone());
    if let Some(path) = &a.pr {
        let mut text = String::from("threshold,precision,recall\n");
        for p in &curve {
            text.push_str(&format!("{},{},{}\n", p.threshold, p.precision, p.recall));
        }
        write_text(path, &text)?;
        run.outputs.push(path.clone());
    }
    run.config = json!({"det": a.det, "gt": a.gt, "iou": a.iou});
    Ok(run)
}

fn cmd_metrics(a: MetricsArgs, argv: Vec<String>) -> Result<Run> {
    let mut run = Run::new(argv, "metrics");
    let video = videodata::load_frame_sequence(&a.input)?;
    let frames = video.frames()?;
    let mut entropies = Vec::with_capacity(frames.len());
    let mut contrasts = Vec::new();
    let mut all = Vec::with_capacity(video.d() * video.n());
    let mut all_mask = Vec::with_capacity(video.d() * video.n());
    for f in &frames {
        let q = quantize_u8(f);
        entropies.push(metrics::entropy(&q, Some(f.valid()))?);
        if let Some(center) = a.center {
            contrasts.push(metrics::contrast(
                &q,
                f.width(),
                f.height(),
                center,
                metrics::CONTRAST_WINDOW,
            )?);
        }
        all.extend_from_slice(&q);
        all_mask.extend_from_slice(f.valid());
    }
    let cdf = metrics::cdf_curve(video.data(), a.rho)?;
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let mut report = json!({
        "frames": frames.len(),
        "entropy_sequence": metrics::entropy(&all, Some(&all_mask))?,
        "entropy_mean": mean(&entropies),
        "entropy": entropies,
        "cdf_rho": a.rho,
        "cdf": cdf,
    });
    if a.center.is_some() {
        report["contrast_mean"] = json!(mean(&contrasts));
        report["contrast"] = json!(contrasts);
    }
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &a.out {
        Some(path) => {
            write_text(path, &text)?;
            run.outputs.push(path.clone());
        }
        None => print!("{text}"),
    }
    run.config = json!({"input": a.input, "center": a.center, "rho": a.rho});
    Ok(run)
}
