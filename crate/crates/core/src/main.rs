use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;

use splatfuse::alignment::{SyntheticSfm, SyntheticSfmConfig};
use splatfuse::correspondence::FileProvider;
use splatfuse::geometry::{Rotation3, SE3Pose};
use splatfuse::semantics::{query as field_query, read_label_table, FeatureField};
use splatfuse::splatmap::{export_ply, read_ply, render, save_depth_png, save_rgb_png, RenderCamera};
use splatfuse::stream::{
    evaluate, replay, scene::Sim3Record, simulate_record, spawn_server, Descriptors, FileConfig,
    ServerDeps, SyntheticFeatureProvider, SyntheticScene,
};

#[derive(Parser)]
#[command(name = "splatfuse", about = "Multi-agent map-fusion server and tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the fusion server until idle or a runtime limit.
    Serve(ServeArgs),
    /// Generate a synthetic scene and record its fleet to a container.
    Sim(SimArgs),
    /// Replay a recorded stream into a running server.
    Replay(ReplayArgs),
    /// Evaluate a map against scene ground truth on held-out views.
    Eval(EvalArgs),
    /// Query a map + feature field by label or embedding vector.
    Query(QueryArgs),
    /// Export a map as PLY or render it to PNG at a pose.
    Export(ExportArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene truth sidecar; backs the synthetic descriptor/feature/SfM
    /// providers.
    #[arg(long)]
    truth: PathBuf,
    /// Descriptor sidecar; replaces the synthetic descriptor provider.
    #[arg(long)]
    desc: Option<PathBuf>,
    /// Basename for outputs written at shutdown (.ply, .hfld,
    /// .transforms.json, .align.log).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = 0)]
    scene_seed: u64,
    #[arg(long)]
    agents: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    duration_s: Option<f64>,
    #[arg(long)]
    rate_hz: Option<f64>,
}

#[derive(Args)]
struct ReplayArgs {
    #[arg(long)]
    file: PathBuf,
    /// Delay multiplier: 1 = real time, 0 = as fast as possible.
    #[arg(long, default_value_t = 0.0)]
    speed: f64,
    #[arg(long)]
    to: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 10)]
    holdout_n: u64,
    /// transforms.json written by serve, for alignment error columns.
    #[arg(long)]
    transforms: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    field: PathBuf,
    /// Label resolved through the label table sidecar.
    #[arg(long)]
    label: Option<String>,
    /// Label table sidecar (required with --label).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Comma-separated embedding values, alternative to --label.
    #[arg(long)]
    vector: Option<String>,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    ply: Option<PathBuf>,
    /// Basename for .rgb.png / .depth.png renders.
    #[arg(long)]
    png: Option<PathBuf>,
    /// Camera pose qw,qx,qy,qz,tx,ty,tz (camera-to-global).
    #[arg(long)]
    pose: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig, String> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::default()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Serve(args) => serve_cmd(args),
        Command::Sim(args) => sim_cmd(args),
        Command::Replay(args) => {
            let frames = replay(&args.file, args.speed, &args.to)?;
            println!("replayed {frames} frames to {}", args.to);
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval(args) => eval_cmd(args),
        Command::Query(args) => query_cmd(args),
        Command::Export(args) => export_cmd(args),
    }
}

fn serve_cmd(args: ServeArgs) -> anyhow::Result<ExitCode> {
    let mut config = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return Ok(ExitCode::from(2));
        }
    };
    if let Some(bind) = args.bind {
        config.server.bind = bind;
    }
    let scene = match SyntheticScene::load(&args.truth) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("config error: cannot load truth scene: {e}");
            return Ok(ExitCode::from(2));
        }
    };

    let descriptors: Arc<dyn splatfuse::correspondence::DescriptorProvider> = match &args.desc {
        Some(path) => Arc::new(Descriptors::File(FileProvider::load(path)?)),
        None => Arc::new(Descriptors::Synthetic(
            splatfuse::correspondence::SyntheticProvider::new(
                config.sim_params().descriptor,
                scene.agent_truths(),
            ),
        )),
    };
    let deps = ServerDeps {
        descriptors,
        features: Arc::new(SyntheticFeatureProvider::from_scene(
            &scene,
            256,
            config.server.seed,
        )),
        sfm: Arc::new(SyntheticSfm::new(
            SyntheticSfmConfig {
                seed: config.server.seed,
                ..Default::default()
            },
            scene.agent_truths(),
        )),
    };

    let handle = match spawn_server(config, deps) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("bind failure: {e}");
            return Ok(ExitCode::from(3));
        }
    };
    println!("listening on {}", handle.addr);
    let outcome = handle.join()?;
    println!(
        "done: {} frames received, {} ingested, {} held out, {} gaussians, {} steps",
        outcome.frames_received,
        outcome.frames_ingested,
        outcome.frames_held_out,
        outcome.map.len(),
        outcome.optimizer_steps
    );

    if let Some(base) = args.out {
        let base = base.to_string_lossy();
        export_ply(&outcome.map, Path::new(&format!("{base}.ply")))?;
        if let Some(field) = &outcome.field {
            field.save(Path::new(&format!("{base}.hfld")))?;
        }
        let transforms: HashMap<String, Sim3Record> = outcome
            .transforms
            .iter()
            .map(|(a, t)| (a.to_string(), Sim3Record::from(t)))
            .collect();
        std::fs::write(
            format!("{base}.transforms.json"),
            serde_json::to_string_pretty(&transforms)?,
        )?;
        std::fs::write(format!("{base}.align.log"), outcome.align_log.join("\n"))?;
        println!("wrote {base}.ply / .hfld / .transforms.json / .align.log");
    }
    Ok(ExitCode::SUCCESS)
}

fn sim_cmd(args: SimArgs) -> anyhow::Result<ExitCode> {
    let mut config = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return Ok(ExitCode::from(2));
        }
    };
    config.sim.scene_seed = args.scene_seed;
    if let Some(a) = args.agents {
        config.sim.agents = a;
    }
    if let Some(d) = args.duration_s {
        config.sim.duration_s = d;
    }
    if let Some(r) = args.rate_hz {
        config.sim.frame_rate_hz = r;
    }
    let scene = SyntheticScene::generate(&config.scene_params());
    let (paths, stats) = simulate_record(&scene, &config.sim_params(), &args.out)?;
    println!(
        "recorded {} frames ({} messages, {:.1} MiB) to {}",
        stats.frames,
        stats.messages,
        stats.bytes_total as f64 / (1 << 20) as f64,
        paths.stream.display()
    );
    for script in &scene.agents {
        println!("  agent {}: {:.2} Mbps", script.agent, stats.mbps(script.agent));
    }
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(args: EvalArgs) -> anyhow::Result<ExitCode> {
    let config = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return Ok(ExitCode::from(2));
        }
    };
    let map = read_ply(&args.map)?;
    let scene = SyntheticScene::load(&args.truth)?;
    let transforms = match &args.transforms {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let raw: HashMap<String, Sim3Record> = serde_json::from_str(&text)?;
            raw.into_iter()
                .map(|(a, r)| Ok((a.parse::<u32>()?, r.to_transform())))
                .collect::<anyhow::Result<HashMap<_, _>>>()?
        }
        None => HashMap::new(),
    };
    let report = evaluate(&map, &transforms, &scene, args.holdout_n, &config.render_config());
    print!("{}", report.table());
    Ok(ExitCode::SUCCESS)
}

fn query_cmd(args: QueryArgs) -> anyhow::Result<ExitCode> {
    let config = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return Ok(ExitCode::from(2));
        }
    };
    let field_cfg = config.field_config();
    let map = read_ply(&args.map)?;
    let field = FeatureField::load(&args.field, field_cfg.bbox_min, field_cfg.bbox_max)?;

    let embedding: Vec<f64> = match (&args.label, &args.vector) {
        (Some(label), _) => {
            let labels_path = args
                .labels
                .as_ref()
                .ok_or_else(|| anyhow::anyhow!("--label requires --labels <table>"))?;
            let table = read_label_table(labels_path, field.out_dim())?;
            table
                .iter()
                .find(|(name, _)| name == label)
                .map(|(_, v)| v.iter().map(|x| *x as f64).collect())
                .ok_or_else(|| anyhow::anyhow!("label {label:?} not in table"))?
        }
        (None, Some(csv)) => csv
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()?,
        (None, None) => anyhow::bail!("provide --label or --vector"),
    };
    anyhow::ensure!(
        embedding.len() == field.out_dim(),
        "embedding has {} values, field expects {}",
        embedding.len(),
        field.out_dim()
    );

    let results = field_query(&map, &field, &embedding, args.top_k);
    for (rank, (idx, score)) in results.iter().enumerate() {
        let g = &map.gaussians()[*idx];
        println!(
            "{}: gaussian {} score {:.4} at ({:.3}, {:.3}, {:.3})",
            rank + 1,
            idx,
            score,
            g.mean.x,
            g.mean.y,
            g.mean.z
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn export_cmd(args: ExportArgs) -> anyhow::Result<ExitCode> {
    let config = match load_config(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return Ok(ExitCode::from(2));
        }
    };
    let map = read_ply(&args.map)?;
    if let Some(out) = &args.ply {
        export_ply(&map, out)?;
        println!("wrote {}", out.display());
    }
    if let Some(png_base) = &args.png {
        let pose_csv = args
            .pose
            .as_ref()
            .ok_or_else(|| anyhow::anyhow!("--png requires --pose qw,qx,qy,qz,tx,ty,tz"))?;
        let vals: Vec<f64> = pose_csv
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<_, _>>()?;
        anyhow::ensure!(vals.len() == 7, "--pose needs 7 values");
        let rotation = Rotation3::from_quat(vals[0], vals[1], vals[2], vals[3])
            .ok_or_else(|| anyhow::anyhow!("degenerate pose quaternion"))?;
        let size = config.sim.image_size;
        let camera = RenderCamera {
            intrinsics: splatfuse::frame::Intrinsics {
                fx: size as f64 * 0.9,
                fy: size as f64 * 0.9,
                cx: size as f64 / 2.0,
                cy: size as f64 / 2.0,
                width: size,
                height: size,
            },
            pose: SE3Pose::new(rotation, Vector3::new(vals[4], vals[5], vals[6])),
        };
        let out = render(&map, &camera, &config.render_config());
        let base = png_base.to_string_lossy();
        save_rgb_png(Path::new(&format!("{base}.rgb.png")), out.width, out.height, &out.rgb)?;
        save_depth_png(
            Path::new(&format!("{base}.depth.png")),
            out.width,
            out.height,
            &out.depth,
        )?;
        println!("wrote {base}.rgb.png and {base}.depth.png");
    }
    Ok(ExitCode::SUCCESS)
}
