use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use lanetopo::gradcheck::{gradcheck, GradcheckConfig};
use lanetopo::metrics::{evaluate, evaluate_with_frames};
use lanetopo::model::Model;
use lanetopo::nn::Params;
use lanetopo::rng::Rng;
use lanetopo::scene::{validate_frame, FrameGraph, Violation};
use lanetopo::scene_io::{
    read_scene, read_scene_dir, serialize_scene, to_scene_file, write_json, Checkpoint, ParseOptions, RunConfig, SceneFile,
};
use lanetopo::sgnn::{LayerState, Variant};
use lanetopo::synth::{frame_id, generate, perturb, SynthSpec};
use lanetopo::{DenseMatrix, Error};

#[derive(Debug, Parser)]
#[command(name = "lanetopo", version, about = "Lane/traffic-element scene graphs: evaluation, synthesis and SGNN tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantArg {
    Sg,
    Skg,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Sg => Variant::Sg,
            VariantArg::Skg => Variant::Skg,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum VariantSelect {
    Sg,
    Skg,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score a directory of predicted scenes against ground truth.
    Evaluate {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        /// Run configuration (TOML or JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Include per-frame scores in the report.
        #[arg(long)]
        per_frame: bool,
        /// Resample lanes to 11 points on load.
        #[arg(long)]
        resample: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Write synthetic ground truth (`DIR/gt`) and predictions (`DIR/pred`).
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        frames: u64,
        #[arg(long)]
        out: PathBuf,
        /// Generator and perturbation spec (TOML or JSON). Without it the
        /// `synth` section of `--config` is used, or the defaults.
        #[arg(long)]
        perturb: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the SGNN stack on the queries of a scene file.
    Sgnn {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum)]
        variant: VariantArg,
        #[arg(long)]
        layers: usize,
        #[arg(long)]
        out: PathBuf,
        /// Seed for standard-normal queries when the scene carries none.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Finite-difference check of the layer, head and loss gradients.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, value_enum, default_value = "both")]
        variant: VariantSelect,
        /// Write the full reports as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a freshly initialised parameter checkpoint.
    InitParams {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
        #[arg(long)]
        layers: Option<usize>,
    },
}

/// Failure carrying its exit code.
enum Failure {
    Usage(String),
    Invalid(Vec<String>),
    Error(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Error(other),
        }
    }
}

fn quote(s: &str) -> String {
    serde_json::to_string(s).unwrap_or_else(|_| format!("{s:?}"))
}

fn error_line(e: &Error) -> String {
    match e {
        Error::Parse { path, line, column, offset, message } => format!(
            "level=error kind=parse path={} line={line} column={column} offset={offset} message={}",
            quote(path),
            quote(message)
        ),
        Error::File { path, source } => {
            format!("level=error kind=io path={} message={}", quote(path), quote(&source.to_string()))
        }
        Error::Shape { .. } => format!("level=error kind=shape message={}", quote(&e.to_string())),
        Error::Generation(m) => format!("level=error kind=generation message={}", quote(m)),
        Error::InvalidInput(m) => format!("level=error kind=invalid_input message={}", quote(m)),
        Error::Config(m) => format!("level=error kind=config message={}", quote(m)),
        Error::Io(io) => format!("level=error kind=io message={}", quote(&io.to_string())),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn thread_pool(config: &RunConfig, flag: Option<usize>) -> Result<rayon::ThreadPool, Failure> {
    let threads = match flag {
        Some(0) => return Err(Failure::Usage("--threads must be at least 1".into())),
        Some(n) => Some(n),
        None => config.effective_threads()?,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Failure::Usage(format!("thread pool: {e}")))
}

fn violation_lines(file: &Path, role: &str, violations: &[Violation]) -> Vec<String> {
    violations
        .iter()
        .map(|v| {
            format!(
                "level=error kind=validation role={role} file={} detail={}",
                quote(&file.display().to_string()),
                quote(&v.to_string())
            )
        })
        .collect()
}

fn cmd_evaluate(
    gt: &Path,
    pred: &Path,
    config: Option<&Path>,
    out: &Path,
    per_frame: bool,
    resample: bool,
    threads: Option<usize>,
) -> Result<(), Failure> {
    let config = load_config(config)?;
    let pool = thread_pool(&config, threads)?;
    let options = ParseOptions { resample };
    pool.install(|| {
        let gt_scenes = read_scene_dir(gt, options)?;
        let pred_scenes = read_scene_dir(pred, options)?;
        let mut problems = Vec::new();
        for (path, s) in &gt_scenes {
            problems.extend(violation_lines(path, "gt", &validate_frame(&s.frame, &config.eval)));
        }
        for (path, s) in &pred_scenes {
            problems.extend(violation_lines(path, "pred", &s.violations));
        }
        if !problems.is_empty() {
            return Err(Failure::Invalid(problems));
        }
        let g: Vec<FrameGraph> = gt_scenes.into_iter().map(|(_, s)| s.frame).collect();
        let p: Vec<FrameGraph> = pred_scenes.into_iter().map(|(_, s)| s.frame).collect();
        let report = if per_frame {
            evaluate_with_frames(&g, &p, &config.eval)
        } else {
            evaluate(&g, &p, &config.eval)
        }
        .map_err(|e| match e {
            Error::InvalidInput(m) => Failure::Invalid(vec![format!("level=error kind=invalid_input message={}", quote(&m))]),
            other => other.into(),
        })?;
        write_json(out, &report)?;
        println!(
            "frames={} det_l={} det_l_chamfer={} det_t={} top_ll={} top_lt={} ols={}",
            report.metadata.frames, report.det_l, report.det_l_chamfer, report.det_t, report.top_ll, report.top_lt, report.ols
        );
        Ok(())
    })
}

fn cmd_synth(seed: u64, frames: u64, out: &Path, perturb_spec: Option<&Path>, config: Option<&Path>) -> Result<(), Failure> {
    let config = load_config(config)?;
    let mut spec: SynthSpec = match perturb_spec {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::file(p, e))?;
            let parsed: Result<SynthSpec, String> = if text.trim_start().starts_with('{') {
                serde_json::from_str(&text).map_err(|e| e.to_string())
            } else {
                toml::from_str(&text).map_err(|e| e.to_string())
            };
            parsed.map_err(|m| Failure::Usage(format!("{}: {m}", p.display())))?
        }
        None => config.synth.clone(),
    };
    spec.seed = seed;
    spec.validate()?;
    let pool = thread_pool(&config, None)?;
    let pairs = pool.install(|| {
        (0..frames)
            .into_par_iter()
            .map(|k| {
                let gt = generate(&spec, k)?;
                let pred = perturb(&gt, &spec, k);
                Ok((k, serialize_scene(&gt)?, serialize_scene(&pred)?))
            })
            .collect::<lanetopo::Result<Vec<_>>>()
    })?;
    for sub in ["gt", "pred"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::file(&dir, e))?;
    }
    for (k, gt, pred) in pairs {
        let name = format!("{}.json", frame_id(k));
        for (sub, bytes) in [("gt", gt), ("pred", pred)] {
            let path = out.join(sub).join(&name);
            std::fs::write(&path, bytes).map_err(|e| Error::file(&path, e))?;
        }
    }
    println!("frames={frames} out={}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct LayerDump {
    index: usize,
    lane_queries: Vec<Vec<f64>>,
    te_queries: Vec<Vec<f64>>,
    adj_ll: Vec<Vec<f64>>,
    adj_lt: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct SgnnDump {
    frame_id: String,
    variant: Variant,
    layers: Vec<LayerDump>,
    /// Final-layer detections and topology in scene layout.
    prediction: SceneFile,
}

fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.normal())
}

fn cmd_sgnn(params: &Path, scene: &Path, variant: Variant, layers: usize, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let checkpoint = Checkpoint::load(params)?;
    let mut model = checkpoint.into_model()?;
    if layers == 0 || layers > model.layers.len() {
        return Err(Failure::Usage(format!("--layers must be in 1..={} for this checkpoint", model.layers.len())));
    }
    model.layers.truncate(layers);
    model.variant = variant;
    let parsed = read_scene(scene, ParseOptions::default())?;
    let (fl, ft) = (model.layers[0].lane_dim(), model.layers[0].te_dim());
    let (n_l, n_t) = (parsed.frame.lanes.len(), parsed.frame.tes.len());
    let (q_l, q_t) = match (parsed.queries, seed) {
        (Some(q), _) => q,
        (None, Some(s)) => {
            let mut rng = Rng::new(s);
            (standard_normal(n_l, fl, &mut rng), standard_normal(n_t, ft, &mut rng))
        }
        (None, None) => return Err(Failure::Usage("scene carries no queries; pass --seed to draw them".into())),
    };
    if q_l.cols() != fl || q_t.cols() != ft {
        return Err(Failure::Invalid(vec![format!(
            "level=error kind=shape message={}",
            quote(&format!("queries are {}/{} wide, checkpoint expects {fl}/{ft}", q_l.cols(), q_t.cols()))
        )]));
    }
    let outputs = model.run_from(&q_l, &q_t, LayerState::initial(n_l, n_t), true)?;
    let dumps = outputs
        .iter()
        .enumerate()
        .map(|(i, (o, p))| LayerDump {
            index: i,
            lane_queries: o.q_l_tilde.to_rows(),
            te_queries: o.q_t_tilde.to_rows(),
            adj_ll: p.conf_ll.to_rows(),
            adj_lt: p.conf_lt.to_rows(),
        })
        .collect();
    let (_, last) = outputs.last().expect("at least one layer");
    let mut frame = FrameGraph::new(
        parsed.frame.frame_id.clone(),
        last.det.lanes(),
        last.det.traffic_elements(parsed.frame.image_size),
        last.conf_ll.clone(),
        last.conf_lt.clone(),
    );
    frame.image_size = parsed.frame.image_size;
    let dump = SgnnDump { frame_id: parsed.frame.frame_id, variant, layers: dumps, prediction: to_scene_file(&frame) };
    write_json(out, &dump)?;
    println!("layers={layers} variant={variant:?} out={}", out.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64, eps: f64, which: VariantSelect, out: Option<&Path>) -> Result<(), Failure> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Failure::Usage("--eps must be positive".into()));
    }
    let cfg = GradcheckConfig { eps, ..GradcheckConfig::default() };
    let variants: &[Variant] = match which {
        VariantSelect::Sg => &[Variant::Sg],
        VariantSelect::Skg => &[Variant::Skg],
        VariantSelect::Both => &[Variant::Sg, Variant::Skg],
    };
    let reports = variants.iter().map(|&v| gradcheck(seed, v, &cfg)).collect::<lanetopo::Result<Vec<_>>>()?;
    let mut ok = true;
    for r in &reports {
        for b in &r.blocks {
            println!("variant={:?} block={} len={} max_rel_error={:e} max_abs_error={:e}", r.variant, b.name, b.len, b.max_rel_error, b.max_abs_error);
        }
        println!(
            "variant={:?} seed={} draws={} kink_margin={:e} state_grads_zero={} max relative error: {:e} ({})",
            r.variant,
            r.seed,
            r.draws,
            r.kink_margin,
            r.state_grads_zero,
            r.max_rel_error,
            if r.passed { "pass" } else { "FAIL" }
        );
        ok &= r.passed;
    }
    if let Some(p) = out {
        write_json(p, &reports)?;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Invalid(vec![format!("level=error kind=gradcheck message={}", quote("gradient mismatch above tolerance"))]))
    }
}

fn cmd_init_params(seed: u64, out: &Path, config: Option<&Path>, variant: Option<VariantArg>, layers: Option<usize>) -> Result<(), Failure> {
    let run = load_config(config)?;
    let mut mc = run.model_config();
    if let Some(v) = variant {
        mc.sgnn.variant = v.into();
    }
    if let Some(n) = layers {
        mc.sgnn.layers = n;
    }
    mc.sgnn.validate()?;
    let model = Model::init(&mc, seed)?;
    write_json(out, &Checkpoint::from_model(&model, &mc))?;
    println!("params={} out={}", model.num_params(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Evaluate { gt, pred, config, out, per_frame, resample, threads } => {
            cmd_evaluate(&gt, &pred, config.as_deref(), &out, per_frame, resample, threads)
        }
        Command::Synth { seed, frames, out, perturb, config } => cmd_synth(seed, frames, &out, perturb.as_deref(), config.as_deref()),
        Command::Sgnn { params, scene, variant, layers, out, seed } => cmd_sgnn(&params, &scene, variant.into(), layers, &out, seed),
        Command::Gradcheck { seed, eps, variant, out } => cmd_gradcheck(seed, eps, variant, out.as_deref()),
        Command::InitParams { seed, out, config, variant, layers } => cmd_init_params(seed, &out, config.as_deref(), variant, layers),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("level=error kind=usage message={}", quote(&m));
            ExitCode::from(2)
        }
        Err(Failure::Invalid(lines)) => {
            for l in lines {
                eprintln!("{l}");
            }
            ExitCode::from(1)
        }
        Err(Failure::Error(e)) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(1)
        }
    }
}
