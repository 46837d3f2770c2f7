//! `sdf3d`: render, fit, train, mesh and benchmark signed distance fields.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use log::info;

use config::{key_listing, Config};
use sdf3d_core::autodiff::Checkpoint;
use sdf3d_core::bench::{compare_strategies, BenchOptions};
use sdf3d_core::mesh::{export_obj, export_ply, marching_cubes, Bounds};
use sdf3d_core::network::NeuralField;
use sdf3d_core::render::io::save_render;
use sdf3d_core::rng::stream;
use sdf3d_core::training::{fit_sdf, held_out_error, Dataset, DatasetKind, FitConfig, GanConfig, GanTrainer};
use sdf3d_core::{
    AnalyticScene, CameraPose, ColorCode, GeneratorNetwork, NetConfig, RenderConfig, SamplingStrategy, SdfField,
    ShapeCode,
};

#[derive(Parser, Debug)]
#[command(name = "sdf3d", version, about = "Signed distance field rendering and 3D-aware GAN training")]
struct Cli {
    /// TOML configuration file (every key is optional).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides `seed` from the file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render RGB, depth and normal images of a scene or checkpoint.
    Render(RenderArgs),
    /// Fit the network to an analytic scene.
    Fit(FitArgs),
    /// Train the generator adversarially.
    TrainGan(TrainArgs),
    /// Extract the zero level set as OBJ and PLY meshes.
    Mesh(MeshArgs),
    /// Compare sampling strategies against a dense reference.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct Source {
    /// Built-in scene: sphere, unit-sphere, two-spheres, box, torus.
    #[arg(long, conflicts_with = "checkpoint")]
    scene: Option<String>,
    /// Generator checkpoint from `fit` or `train-gan`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Sample the latent codes from this seed instead of using zero codes.
    #[arg(long)]
    code_seed: Option<u64>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    azimuth: Option<f64>,
    #[arg(long)]
    polar: Option<f64>,
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    strategy: Option<SamplingStrategy>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// synthetic-spheres, synthetic-boxes or image-folder.
    #[arg(long)]
    dataset: Option<DatasetKind>,
    /// Image folder for `--dataset image-folder`.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Train until this many iterations are complete.
    #[arg(long)]
    iters: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct MeshArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    res: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Failures caused by the invocation rather than the run.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SDF3D_LOG", "warn")).init();
    let help = format!("Configuration keys and defaults:\n{}", key_listing());
    let matches = match Cli::command().after_long_help(help).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from the same definition");
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if e.is::<UsageError>() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p).map_err(|e| UsageError(format!("{e:#}")))?,
        None => Config::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.render.seed = cfg.seed;
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()?;
    }
    match cli.command {
        Command::Render(a) => cmd_render(cfg, a),
        Command::Fit(a) => cmd_fit(cfg, a),
        Command::TrainGan(a) => cmd_train(cfg, a),
        Command::Mesh(a) => cmd_mesh(cfg, a),
        Command::Bench(a) => cmd_bench(cfg, a),
    }
}

fn named_scene(name: &str) -> Result<AnalyticScene> {
    match AnalyticScene::named(name) {
        Some(s) => Ok(s),
        None => usage(format!(
            "unknown scene {name:?} (expected one of {})",
            AnalyticScene::NAMES.join(", ")
        )),
    }
}

/// A generator restored from a checkpoint, with the codes to query it at.
struct Loaded {
    net: GeneratorNetwork,
    zs: ShapeCode,
    zc: ColorCode,
    beta: f64,
}

/// Matches the checkpoint's leading layers against `[network]`, then
/// `[fit.network]`; GAN checkpoints carry extra layers after the generator.
fn load_generator(cfg: &Config, path: &Path, code_seed: Option<u64>) -> Result<Loaded> {
    if !path.exists() {
        return usage(format!("checkpoint {} does not exist", path.display()));
    }
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let fits = |net: &NetConfig| {
        let dims: Vec<(u32, u32)> = net.layer_dims().iter().map(|&(r, c)| (r as u32, c as u32)).collect();
        ck.layers.len() >= dims.len() && ck.layers[..dims.len()] == dims[..]
    };
    let Some(net_cfg) = [&cfg.network, &cfg.fit.network].into_iter().find(|n| fits(n)) else {
        bail!(
            "checkpoint {} matches neither [network] nor [fit.network]; pass the config it was trained with",
            path.display()
        );
    };
    let n = net_cfg.param_count();
    let net = GeneratorNetwork::from_params(net_cfg.clone(), ck.params[..n].to_vec())?;
    let (zs, zc) = match code_seed {
        Some(s) => {
            let mut rng = stream(s, &[0x636f_6465]);
            (ShapeCode::sample(net_cfg.z_shape, &mut rng), ColorCode::sample(net_cfg.z_color, &mut rng))
        }
        None => (ShapeCode::zeros(net_cfg.z_shape), ColorCode::zeros(net_cfg.z_color)),
    };
    Ok(Loaded {
        net,
        zs,
        zc,
        beta: ck.beta,
    })
}

fn with_field<T>(cfg: &Config, src: &Source, f: impl FnOnce(&dyn SdfField, Option<f64>) -> Result<T>) -> Result<T> {
    match (&src.scene, &src.checkpoint) {
        (Some(name), None) => f(&named_scene(name)?, None),
        (None, Some(path)) => {
            let l = load_generator(cfg, path, src.code_seed)?;
            let beta = (l.beta > 0.0).then_some(l.beta);
            f(&NeuralField::new(&l.net, &l.zs, &l.zc), beta)
        }
        _ => usage("pass exactly one of --scene or --checkpoint"),
    }
}

fn cmd_render(mut cfg: Config, a: RenderArgs) -> Result<()> {
    let cam = &mut cfg.camera;
    cam.azimuth = a.azimuth.unwrap_or(cam.azimuth);
    cam.polar = a.polar.unwrap_or(cam.polar);
    cam.radius = a.radius.unwrap_or(cam.radius);
    cam.size = a.size.unwrap_or(cam.size);
    if let Some(s) = a.strategy {
        cfg.render.strategy = s;
    }
    let pose = CameraPose::new(cam.azimuth, cam.polar, cam.radius).with_fov(cam.fov_degrees.to_radians());
    if pose.validate().is_err() || cam.size == 0 {
        return usage(format!("invalid camera {pose:?} at size {}", cam.size));
    }
    let size = cam.size;
    with_field(&cfg, &a.source, |field, ck_beta| {
        let rc = RenderConfig {
            beta: a.beta.or(ck_beta).unwrap_or(cfg.render.beta),
            ..cfg.render.clone()
        };
        rc.validate().map_err(|e| UsageError(e.to_string()))?;
        let start = Instant::now();
        let out = sdf3d_core::render::render(field, &pose, size, size, &rc)?;
        let secs = start.elapsed().as_secs_f64();
        let paths = save_render(&out, &a.out, "render")?;
        println!(
            "rendered {size}x{size} in {secs:.3}s: {} sdf queries ({:.2} per ray), {} gradient queries",
            out.sdf_queries,
            out.sdf_queries as f64 / (size * size) as f64,
            out.gradient_queries
        );
        for p in paths {
            println!("wrote {}", p.display());
        }
        Ok(())
    })
}

fn cmd_fit(cfg: Config, a: FitArgs) -> Result<()> {
    let scene = named_scene(a.scene.as_deref().unwrap_or(&cfg.fit.scene))?;
    let fc = FitConfig {
        net: cfg.fit.network.clone(),
        iterations: a.iters.unwrap_or(cfg.fit.iterations),
        batch: cfg.fit.batch,
        lr: cfg.fit.lr,
        lambda_eikonal: cfg.fit.lambda_eikonal,
        seed: cfg.seed,
    };
    let start = Instant::now();
    let res = fit_sdf(&scene.sdf, &fc)?;
    std::fs::create_dir_all(&a.out)?;
    let mut log = String::from("iteration,distance,eikonal\n");
    for (it, d, e) in &res.history {
        log.push_str(&format!("{it},{d},{e}\n"));
    }
    std::fs::write(a.out.join("fit.csv"), log)?;
    let ck = a.out.join("fit.bin");
    res.checkpoint.save(&ck)?;
    let (err, eik) = held_out_error(&res.net, &scene.sdf, 4096, cfg.seed);
    println!(
        "fit {} iterations in {:.1}s: held-out mean |ds| {err:.5}, eikonal {eik:.5}",
        fc.iterations,
        start.elapsed().as_secs_f64()
    );
    println!("wrote {}", ck.display());
    Ok(())
}

fn cmd_train(cfg: Config, a: TrainArgs) -> Result<()> {
    let mut source = cfg.train.dataset.clone();
    if let Some(k) = a.dataset {
        source.kind = k;
    }
    if let Some(p) = a.data_dir {
        source.path = Some(p);
    }
    if source.kind == DatasetKind::ImageFolder && source.path.is_none() {
        return usage("--dataset image-folder needs --data-dir");
    }
    let gan = GanConfig {
        net: cfg.network.clone(),
        stages: cfg.stages.clone(),
        loss: cfg.loss.clone(),
        disc_channels: cfg.train.disc_channels,
        beta_init: cfg.train.beta_init,
        checkpoint_every: cfg.train.checkpoint_every,
        poses: source.poses.clone(),
        render: cfg.render.clone(),
        seed: cfg.seed,
    };
    gan.validate().map_err(|e| UsageError(e.to_string()))?;
    let dataset = Dataset::from_source(&source)?;
    let mut trainer = match &a.resume {
        Some(p) => {
            if !p.exists() {
                return usage(format!("checkpoint {} does not exist", p.display()));
            }
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            GanTrainer::from_checkpoint(gan, dataset, &ck)?
        }
        None => GanTrainer::new(gan, dataset)?,
    };
    let until = a.iters.unwrap_or_else(|| trainer.total_iterations());
    let start = Instant::now();
    let from = trainer.iteration();
    trainer.run(until, Some(&a.out), |row| {
        if row.iteration % 50 == 0 {
            info!(
                "iteration {}: L_G {:.4} L_D {:.4} R1 {:.4} eikonal {:.4} beta {:.2}",
                row.iteration, row.l_g, row.l_d, row.r1, row.eikonal, row.beta
            );
        }
    })?;
    println!(
        "trained iterations {from}..{} in {:.1}s; beta {:.2}",
        trainer.iteration(),
        start.elapsed().as_secs_f64(),
        trainer.beta()
    );
    println!("wrote {} and {}", a.out.join("losses.csv").display(), a.out.join("checkpoint.bin").display());
    Ok(())
}

fn cmd_mesh(mut cfg: Config, a: MeshArgs) -> Result<()> {
    if let Some(r) = a.res {
        cfg.mesh.resolution = r;
    }
    if cfg.mesh.resolution < 8 || !(cfg.mesh.bound > 0.0) {
        return usage("mesh resolution must be >= 8 and bound > 0");
    }
    with_field(&cfg, &a.source, |field, _| {
        let start = Instant::now();
        let mesh = marching_cubes(field, Bounds::cube(cfg.mesh.bound), cfg.mesh.resolution)?.with_field_normals(field);
        std::fs::create_dir_all(&a.out)?;
        let (obj, ply) = (a.out.join("mesh.obj"), a.out.join("mesh.ply"));
        export_obj(&mesh, &obj)?;
        export_ply(&mesh, &ply)?;
        println!(
            "{} vertices, {} triangles at {}^3 in {:.2}s",
            mesh.vertices.len(),
            mesh.triangles.len(),
            cfg.mesh.resolution,
            start.elapsed().as_secs_f64()
        );
        println!("wrote {} and {}", obj.display(), ply.display());
        Ok(())
    })
}

fn cmd_bench(mut cfg: Config, a: BenchArgs) -> Result<()> {
    let b = &mut cfg.bench;
    if let Some(s) = a.scene {
        b.scene = s;
    }
    b.size = a.size.unwrap_or(b.size);
    b.frames = a.frames.unwrap_or(b.frames);
    let scene = named_scene(&b.scene)?;
    let beta = a.beta.unwrap_or(cfg.render.beta);
    let base = RenderConfig {
        beta,
        ..cfg.render.clone()
    };
    let configs: Vec<RenderConfig> = SamplingStrategy::ALL
        .iter()
        .map(|&strategy| RenderConfig {
            strategy,
            n_coarse: b.n_coarse,
            n_fine: b.n_fine,
            ..base.clone()
        })
        .collect();
    let cam = &cfg.camera;
    let poses: Vec<CameraPose> = (0..b.poses.max(1))
        .map(|k| {
            let az = cam.azimuth + k as f64 * std::f64::consts::TAU / b.poses.max(1) as f64;
            CameraPose::new(az, cam.polar, cam.radius).with_fov(cam.fov_degrees.to_radians())
        })
        .collect();
    let opts = BenchOptions {
        size: b.size,
        n_dense: b.n_dense,
        frames: b.frames,
        warmup: b.warmup,
        threads: b.threads,
    };
    let report = compare_strategies(&scene, &poses, &configs, &opts).map_err(|e| match e {
        sdf3d_core::Error::InvalidConfig(m) => anyhow::Error::from(UsageError(m)),
        other => other.into(),
    })?;
    std::fs::create_dir_all(&a.out)?;
    let csv = a.out.join("bench.csv");
    std::fs::write(&csv, report.to_csv())?;
    print!("{}", report.summary());
    println!("wrote {}", csv.display());
    Ok(())
}
