//! Command-line entry point: dataset generation, staged training,
//! sampling, editing and evaluation.

use clap::{Parser, Subcommand};
use lidarflow::checkpoint::Checkpoint;
use lidarflow::config::{load_config, ConfigError, Loaded, Provenance};
use lidarflow::data::Dataset;
use lidarflow::formats;
use lidarflow::geometry::{range_to_pointcloud, PointCloud, RangeImage};
use lidarflow::guidance::{inpaint, mix_scenes, MaskRegion};
use lidarflow::metrics;
use lidarflow::sampler::{generate_scenes, SamplerConfig, SamplerKind};
use lidarflow::synthworld::{class_id, make_dataset, DatasetParams};
use lidarflow::teacher::class_mean_feature;
use lidarflow::trainer::{
    e2e_stage, prior_pretrain, vae_align_stage, Optimizers, Pipeline, StageKind,
};
use std::path::{Path, PathBuf};

type Elem = f32;

#[derive(Parser)]
#[command(name = "lidarflow", version, about = "LiDAR range-image scene generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, clap::Args)]
struct ConfigArgs {
    /// Path to the TOML run configuration (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dot-path overrides, e.g. --set vae.base=8
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a procedural dataset (range images, clouds, feature grids).
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
    /// Run one training stage.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = parse_stage)]
        stage: StageKind,
        /// Dataset directory (not needed for prior_pretrain).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint providing the previous stage's weights, when not in --out.
        #[arg(long)]
        init_from: Option<PathBuf>,
        /// Resume this stage from its checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Skip the prior transfer: start vae_align from a random flow model.
        #[arg(long)]
        random_init: bool,
    },
    /// Sample scenes from a trained checkpoint.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace a region of a real scene with a guided object.
    Inpaint {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Rectangle i0,j0,i1,j1 in pixels (repeatable).
        #[arg(long, value_name = "I0,J0,I1,J1")]
        rect: Vec<String>,
        /// Target object class name.
        #[arg(long = "class")]
        class_name: String,
        /// Labeled point cloud with teacher features supplying the class vector.
        #[arg(long)]
        donor: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a scene mixing the feature layouts of two real scenes.
    Mix {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene_a: PathBuf,
        #[arg(long)]
        scene_b: PathBuf,
        /// Token column where the stitch switches from scene A to B.
        #[arg(long)]
        split: usize,
        #[arg(long, default_value_t = 1.0)]
        gamma: f64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute distribution metrics between two scene directories.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Comma-separated subset of frd-range,frd-point,jsd,mmd
        #[arg(long, default_value = "frd-range,frd-point,jsd,mmd")]
        metrics: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_stage(s: &str) -> Result<StageKind, String> {
    match s {
        "prior_pretrain" => Ok(StageKind::PriorPretrain),
        "vae_align" => Ok(StageKind::VaeAlign),
        "e2e" => Ok(StageKind::E2e),
        other => Err(format!("unknown stage '{other}'")),
    }
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Io(String),
    Prereq(String),
    Other(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Prereq(m) => write!(f, "missing prerequisite: {m}"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Prereq(_) => 4,
            CliError::Other(_) => 1,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<formats::FormatError> for CliError {
    fn from(e: formats::FormatError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<lidarflow::checkpoint::CheckpointError> for CliError {
    fn from(e: lidarflow::checkpoint::CheckpointError) -> Self {
        match e {
            lidarflow::checkpoint::CheckpointError::CheckpointRequired(m) => CliError::Prereq(m),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<lidarflow::trainer::TrainError> for CliError {
    fn from(e: lidarflow::trainer::TrainError) -> Self {
        match e {
            lidarflow::trainer::TrainError::CheckpointRequired(m) => CliError::Prereq(m),
            lidarflow::trainer::TrainError::BadConfig(m) => CliError::Config(m),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<lidarflow::synthworld::WorldError> for CliError {
    fn from(e: lidarflow::synthworld::WorldError) -> Self {
        match e {
            lidarflow::synthworld::WorldError::BadConfig(m) => CliError::Config(m),
            lidarflow::synthworld::WorldError::Io { .. } => CliError::Io(e.to_string()),
            lidarflow::synthworld::WorldError::Format(f) => CliError::Io(f.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

impl From<lidarflow::data::DataError> for CliError {
    fn from(e: lidarflow::data::DataError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<lidarflow::guidance::GuidanceError> for CliError {
    fn from(e: lidarflow::guidance::GuidanceError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<metrics::MetricsError> for CliError {
    fn from(e: metrics::MetricsError) -> Self {
        CliError::Other(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.code());
        }
    }
}

/// Resolve an output dir against `LIDARFLOW_OUT_ROOT` when relative.
fn resolve_out(out: &Path) -> PathBuf {
    if out.is_absolute() {
        return out.to_path_buf();
    }
    match std::env::var_os("LIDARFLOW_OUT_ROOT") {
        Some(root) => PathBuf::from(root).join(out),
        None => out.to_path_buf(),
    }
}

fn worker_count() -> usize {
    std::env::var("LIDARFLOW_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|v| *v >= 1)
        .unwrap_or(1)
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { cfg, n, out, split } => cmd_gen_data(cfg, n, &resolve_out(&out), &split),
        Command::Train {
            cfg,
            stage,
            data,
            out,
            init_from,
            resume,
            random_init,
        } => cmd_train(
            cfg,
            stage,
            data.as_deref(),
            &resolve_out(&out),
            init_from.as_deref(),
            resume.as_deref(),
            random_init,
        ),
        Command::Sample {
            cfg,
            ckpt,
            count,
            steps,
            kind,
            sigma,
            seed,
            out,
        } => cmd_sample(cfg, &ckpt, count, steps, kind, sigma, seed, &resolve_out(&out)),
        Command::Inpaint {
            cfg,
            ckpt,
            scene,
            rect,
            class_name,
            donor,
            gamma,
            steps,
            out,
        } => cmd_inpaint(
            cfg,
            &ckpt,
            &scene,
            &rect,
            &class_name,
            &donor,
            gamma,
            steps,
            &resolve_out(&out),
        ),
        Command::Mix {
            cfg,
            ckpt,
            scene_a,
            scene_b,
            split,
            gamma,
            steps,
            out,
        } => cmd_mix(
            cfg,
            &ckpt,
            &scene_a,
            &scene_b,
            split,
            gamma,
            steps,
            &resolve_out(&out),
        ),
        Command::Evaluate {
            cfg,
            generated,
            reference,
            metrics: list,
            out,
        } => cmd_evaluate(cfg, &generated, &reference, &list, &resolve_out(&out)),
    }
}

fn load(cfg: &ConfigArgs) -> Result<Loaded, CliError> {
    Ok(load_config(cfg.config.as_deref(), &cfg.overrides)?)
}

fn dataset_params(loaded: &Loaded) -> DatasetParams {
    DatasetParams {
        sensor: loaded.sensor,
        generator: loaded.raw.generator.clone(),
        teacher: loaded.raw.teacher_resolved(),
        grid_h: loaded.flow.token_grid().0,
        grid_w: loaded.flow.token_grid().1,
        seed: loaded.raw.seed,
        config_hash: loaded.hash.clone(),
    }
}

fn cmd_gen_data(cfg: ConfigArgs, n: usize, out: &Path, split: &str) -> Result<(), CliError> {
    let loaded = load(&cfg)?;
    let params = dataset_params(&loaded);
    let workers = worker_count().min(n.max(1));
    if workers <= 1 || n == 0 {
        make_dataset(n, &params, split, out)?;
    } else {
        // scenes are independent; fan out disjoint index ranges
        std::fs::create_dir_all(out.join("scenes"))?;
        let chunk = n.div_ceil(workers);
        std::thread::scope(|scope| -> Result<(), CliError> {
            let mut handles = Vec::new();
            for wi in 0..workers {
                let params = &params;
                let lo = wi * chunk;
                let hi = ((wi + 1) * chunk).min(n);
                handles.push(scope.spawn(move || -> Result<(), CliError> {
                    for idx in lo..hi {
                        let scene_seed =
                            lidarflow::rng::derive_seed(params.seed, "dataset-scene", idx as u64);
                        let (ri, pc, grid) =
                            lidarflow::synthworld::render_scene(scene_seed, params)?;
                        let (ri_p, pc_p, fg_p) = lidarflow::synthworld::scene_paths(out, idx);
                        formats::write_rangeimage(&ri_p, &ri)?;
                        formats::write_pointcloud(&pc_p, &pc)?;
                        formats::write_featuregrid(&fg_p, &grid)?;
                    }
                    Ok(())
                }));
            }
            for h in handles {
                h.join().expect("worker panicked")?;
            }
            Ok(())
        })?;
        let files: Vec<String> = (0..n)
            .flat_map(|i| {
                let stem = format!("{i:06}");
                [
                    format!("scenes/{stem}.r3ri"),
                    format!("scenes/{stem}.r3pc"),
                    format!("scenes/{stem}.r3fg"),
                ]
            })
            .collect();
        let manifest = lidarflow::synthworld::DatasetManifest {
            split: split.to_string(),
            count: n,
            sensor: loaded.sensor,
            config_hash: loaded.hash.clone(),
            files,
        };
        manifest.write(&out.join("manifest.toml"))?;
    }
    Provenance::new(&loaded.hash, loaded.raw.seed, command_line()).write(out)?;
    println!("wrote {n} scenes to {}", out.display());
    Ok(())
}

/// Rebuild a pipeline from the config embedded in a checkpoint.
fn pipeline_from_checkpoint(path: &Path) -> Result<(Loaded, Pipeline<Elem>), CliError> {
    if !path.exists() {
        return Err(CliError::Prereq(format!("{} not found", path.display())));
    }
    let ck = Checkpoint::<Elem>::load(path)?;
    let raw: lidarflow::config::RunConfig =
        toml::from_str(&ck.config_toml).map_err(|e| CliError::Config(e.to_string()))?;
    let loaded = raw.materialize()?;
    let mut pipe = Pipeline::new(loaded.raw.vae.clone(), loaded.flow.clone(), loaded.raw.seed);
    pipe.load_from(&ck);
    Ok((loaded, pipe))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    cfg: ConfigArgs,
    stage: StageKind,
    data: Option<&Path>,
    out: &Path,
    init_from: Option<&Path>,
    resume: Option<&Path>,
    random_init: bool,
) -> Result<(), CliError> {
    let loaded = load(&cfg)?;
    std::fs::create_dir_all(out)?;
    let meta = (loaded.hash.as_str(), loaded.canonical_toml.as_str());
    let mut opts = Optimizers::<Elem>::new();

    let (resume_ck, resume_step) = match resume {
        Some(p) => {
            let ck = Checkpoint::<Elem>::load(p)?;
            let step = ck.step;
            (Some(ck), step)
        }
        None => (None, 0),
    };

    let outcome = match stage {
        StageKind::PriorPretrain => {
            let mut pipe = Pipeline::new(
                loaded.raw.vae.clone(),
                loaded.flow.clone(),
                lidarflow::rng::derive_seed(loaded.raw.seed, "prior-pipeline", 0),
            );
            if let Some(ck) = &resume_ck {
                pipe.load_from(ck);
                ck.load_adam("vae", &pipe.vae.store, &mut opts.vae);
                ck.load_adam("fm", &pipe.fm.store, &mut opts.fm);
            }
            prior_pretrain(
                &mut pipe,
                &mut opts,
                &loaded.raw.stage.prior_pretrain,
                &loaded.raw.proxy,
                (loaded.sensor.height, loaded.sensor.width),
                loaded.raw.seed,
                out,
                meta,
                resume_step,
            )?
        }
        StageKind::VaeAlign => {
            let dataset_dir = data.ok_or_else(|| CliError::Config("--data required".into()))?;
            let dataset = Dataset::<Elem>::load(dataset_dir)?;
            let mut pipe = Pipeline::new(
                loaded.raw.vae.clone(),
                loaded.flow.clone(),
                lidarflow::rng::derive_seed(loaded.raw.seed, "align-pipeline", 0),
            );
            if let Some(ck) = &resume_ck {
                pipe.load_from(ck);
                ck.load_adam("vae", &pipe.vae.store, &mut opts.vae);
                ck.load_adam("fm", &pipe.fm.store, &mut opts.fm);
                ck.load_adam("disc", &pipe.disc.store, &mut opts.disc);
            } else if !random_init {
                let prior_path = init_from
                    .map(Path::to_path_buf)
                    .unwrap_or_else(|| out.join("ckpt_prior_pretrain.r3ck"));
                if !prior_path.exists() {
                    return Err(CliError::Prereq(format!(
                        "prior checkpoint {} (use --random-init to skip prior transfer)",
                        prior_path.display()
                    )));
                }
                let prior = Checkpoint::<Elem>::load(&prior_path)?;
                prior.load_store("fm", &mut pipe.fm.store);
                pipe.fm.reinit_untransferred(lidarflow::rng::derive_seed(
                    loaded.raw.seed,
                    "align-reinit",
                    0,
                ));
            }
            vae_align_stage(
                &mut pipe,
                &mut opts,
                &loaded.raw.stage.vae_align,
                &dataset,
                loaded.raw.seed,
                out,
                meta,
                resume_step,
            )?
        }
        StageKind::E2e => {
            let dataset_dir = data.ok_or_else(|| CliError::Config("--data required".into()))?;
            let dataset = Dataset::<Elem>::load(dataset_dir)?;
            let resumed = resume_ck.is_some();
            let src = match resume_ck {
                Some(ck) => ck,
                None => {
                    let p = init_from
                        .map(Path::to_path_buf)
                        .unwrap_or_else(|| out.join("ckpt_vae_align.r3ck"));
                    if !p.exists() {
                        return Err(CliError::Prereq(format!(
                            "vae_align checkpoint {}",
                            p.display()
                        )));
                    }
                    Checkpoint::<Elem>::load(&p)?
                }
            };
            let mut pipe = Pipeline::new(
                loaded.raw.vae.clone(),
                loaded.flow.clone(),
                lidarflow::rng::derive_seed(loaded.raw.seed, "align-pipeline", 0),
            );
            pipe.load_from(&src);
            if resumed {
                src.load_adam("vae", &pipe.vae.store, &mut opts.vae);
                src.load_adam("fm", &pipe.fm.store, &mut opts.fm);
                src.load_adam("disc", &pipe.disc.store, &mut opts.disc);
            }
            e2e_stage(
                &mut pipe,
                &mut opts,
                &loaded.raw.stage.e2e,
                &dataset,
                loaded.raw.seed,
                out,
                meta,
                if resumed { resume_step } else { 0 },
            )?
        }
    };
    Provenance::new(&loaded.hash, loaded.raw.seed, command_line()).write(out)?;
    if let Some(at) = outcome.aborted_at {
        eprintln!(
            "stage aborted at step {at} (non-finite loss); last good checkpoint: {}",
            outcome.checkpoint_path.display()
        );
    }
    println!(
        "stage {} finished at step {}; checkpoint {}",
        stage.tag(),
        outcome.final_step,
        outcome.checkpoint_path.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    cfg: ConfigArgs,
    ckpt: &Path,
    count: usize,
    steps: Option<usize>,
    kind: Option<String>,
    sigma: Option<f64>,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), CliError> {
    let _ = load(&cfg)?; // validate any explicit config; the checkpoint's config rules
    let (loaded, pipe) = pipeline_from_checkpoint(ckpt)?;
    let kind = match kind.as_deref().unwrap_or(loaded.raw.sampler.kind.as_str()) {
        "ode" => SamplerKind::Ode,
        "sde" => SamplerKind::Sde,
        other => return Err(CliError::Config(format!("unknown sampler kind {other}"))),
    };
    let scfg = SamplerConfig {
        kind,
        steps: steps.unwrap_or(loaded.raw.sampler.steps),
        sigma_scale: sigma.unwrap_or(loaded.raw.sampler.sigma_scale),
        seed: seed.unwrap_or(loaded.raw.seed),
    };
    let scenes = generate_scenes(&pipe, &loaded.sensor, &scfg, count, 32)?;
    std::fs::create_dir_all(out)?;
    for (i, s) in scenes.iter().enumerate() {
        formats::write_rangeimage(&out.join(format!("sample_{i:06}.r3ri")), &s.range)?;
        formats::write_pointcloud(&out.join(format!("sample_{i:06}.r3pc")), &s.cloud)?;
    }
    Provenance::new(&loaded.hash, scfg.seed, command_line()).write(out)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn parse_rects(specs: &[String]) -> Result<MaskRegion, CliError> {
    let mut rects = Vec::new();
    for s in specs {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Config(format!("bad rect '{s}': {e}")))?;
        if parts.len() != 4 {
            return Err(CliError::Config(format!("rect '{s}' needs i0,j0,i1,j1")));
        }
        rects.push([parts[0], parts[1], parts[2], parts[3]]);
    }
    Ok(MaskRegion { rects })
}

#[allow(clippy::too_many_arguments)]
fn cmd_inpaint(
    cfg: ConfigArgs,
    ckpt: &Path,
    scene: &Path,
    rects: &[String],
    class_name: &str,
    donor: &Path,
    gamma: f64,
    steps: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let _ = load(&cfg)?;
    let (loaded, pipe) = pipeline_from_checkpoint(ckpt)?;
    let region = parse_rects(rects)?;
    let class = class_id(class_name)
        .ok_or_else(|| CliError::Config(format!("unknown class {class_name}")))?;
    let ri = formats::read_rangeimage(scene)?;
    let donor_cloud: PointCloud = formats::read_pointcloud(donor)?;
    let class_vec =
        class_mean_feature(&donor_cloud, class).map_err(|e| CliError::Other(e.to_string()))?;
    let steps = steps.unwrap_or(64);
    let result = inpaint(
        &pipe,
        &loaded.sensor,
        &ri,
        &region,
        &class_vec,
        gamma,
        steps,
        loaded.raw.seed,
    )?;
    std::fs::create_dir_all(out)?;
    formats::write_rangeimage(&out.join("inpainted.r3ri"), &result.range)?;
    formats::write_pointcloud(&out.join("inpainted.r3pc"), &result.cloud)?;
    formats::write_depth_png(&out.join("inpainted.png"), &result.range)?;
    formats::write_depth_png(&out.join("input.png"), &ri)?;
    Provenance::new(&loaded.hash, loaded.raw.seed, command_line()).write(out)?;
    println!("inpainted scene written to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_mix(
    cfg: ConfigArgs,
    ckpt: &Path,
    scene_a: &Path,
    scene_b: &Path,
    split: usize,
    gamma: f64,
    steps: Option<usize>,
    out: &Path,
) -> Result<(), CliError> {
    let _ = load(&cfg)?;
    let (loaded, pipe) = pipeline_from_checkpoint(ckpt)?;
    let a = formats::read_rangeimage(scene_a)?;
    let b = formats::read_rangeimage(scene_b)?;
    let steps = steps.unwrap_or(64);
    let result = mix_scenes(
        &pipe,
        &loaded.sensor,
        &loaded.raw.teacher_resolved(),
        &a,
        &b,
        split,
        gamma,
        steps,
        loaded.raw.seed,
    )?;
    std::fs::create_dir_all(out)?;
    formats::write_rangeimage(&out.join("mixed.r3ri"), &result.edit.range)?;
    formats::write_pointcloud(&out.join("mixed.r3pc"), &result.edit.cloud)?;
    formats::write_depth_png(&out.join("mixed.png"), &result.edit.range)?;
    let mut sim = toml::map::Map::new();
    sim.insert("left_cos_a".into(), toml::Value::Float(result.similarity.left_cos_a));
    sim.insert("left_cos_b".into(), toml::Value::Float(result.similarity.left_cos_b));
    sim.insert("right_cos_a".into(), toml::Value::Float(result.similarity.right_cos_a));
    sim.insert("right_cos_b".into(), toml::Value::Float(result.similarity.right_cos_b));
    std::fs::write(
        out.join("similarity.toml"),
        toml::to_string_pretty(&toml::Value::Table(sim)).unwrap(),
    )?;
    Provenance::new(&loaded.hash, loaded.raw.seed, command_line()).write(out)?;
    println!("mixed scene written to {}", out.display());
    Ok(())
}

fn scan_scene_dir(dir: &Path) -> Result<(Vec<RangeImage>, Vec<PointCloud>), CliError> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "r3ri").unwrap_or(false))
        .collect();
    names.sort();
    if names.is_empty() {
        // datasets keep scenes under scenes/
        let sub = dir.join("scenes");
        if sub.is_dir() {
            return scan_scene_dir(&sub);
        }
        return Err(CliError::Io(format!(
            "no .r3ri files under {}",
            dir.display()
        )));
    }
    let mut ranges = Vec::with_capacity(names.len());
    let mut clouds = Vec::with_capacity(names.len());
    for p in &names {
        let ri = formats::read_rangeimage(p)?;
        let pc_path = p.with_extension("r3pc");
        let cloud = if pc_path.exists() {
            formats::read_pointcloud(&pc_path)?
        } else {
            range_to_pointcloud(&ri)
        };
        ranges.push(ri);
        clouds.push(cloud);
    }
    Ok((ranges, clouds))
}

fn cmd_evaluate(
    cfg: ConfigArgs,
    generated: &Path,
    reference: &Path,
    list: &str,
    out: &Path,
) -> Result<(), CliError> {
    let loaded = load(&cfg)?;
    let teacher = loaded.raw.teacher_resolved();
    let msec = &loaded.raw.metrics;
    let (gen_r, gen_c) = scan_scene_dir(generated)?;
    let (ref_r, ref_c) = scan_scene_dir(reference)?;
    let mut report = metrics::MetricReport {
        values: Default::default(),
        generated_count: gen_r.len(),
        reference_count: ref_r.len(),
        extractors: Vec::new(),
        config_hash: loaded.hash.clone(),
    };
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match name {
            "frd-range" => {
                let a = metrics::pooled_features(
                    &gen_r,
                    &gen_c,
                    metrics::Extractor::RangeLevel,
                    &teacher,
                )?;
                let b = metrics::pooled_features(
                    &ref_r,
                    &ref_c,
                    metrics::Extractor::RangeLevel,
                    &teacher,
                )?;
                report
                    .values
                    .insert(name.into(), metrics::frechet_distance(&a, &b)?);
                report.extractors.push(name.into());
            }
            "frd-point" => {
                let a = metrics::pooled_features(
                    &gen_r,
                    &gen_c,
                    metrics::Extractor::PointLevel,
                    &teacher,
                )?;
                let b = metrics::pooled_features(
                    &ref_r,
                    &ref_c,
                    metrics::Extractor::PointLevel,
                    &teacher,
                )?;
                report
                    .values
                    .insert(name.into(), metrics::frechet_distance(&a, &b)?);
                report.extractors.push(name.into());
            }
            "jsd" => {
                let bins = (msec.jsd_bins, msec.jsd_bins);
                let ha = metrics::bev_histogram_of_points(
                    gen_c.iter().flat_map(|c| c.positions.iter().copied()),
                    msec.bev_extent,
                    bins,
                )?;
                let hb = metrics::bev_histogram_of_points(
                    ref_c.iter().flat_map(|c| c.positions.iter().copied()),
                    msec.bev_extent,
                    bins,
                )?;
                report.values.insert(name.into(), metrics::jsd(&ha, &hb)?);
            }
            "mmd" => {
                let g: Vec<PointCloud> =
                    gen_c.iter().take(msec.mmd_generated_cap).cloned().collect();
                let v: Vec<PointCloud> =
                    ref_c.iter().take(msec.mmd_validation_cap).cloned().collect();
                report
                    .values
                    .insert(name.into(), metrics::mmd(&g, &v, msec.mmd_voxel)?);
            }
            other => {
                return Err(CliError::Config(format!("unknown metric '{other}'")));
            }
        }
    }
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    report.write(out)?;
    for (k, v) in &report.values {
        println!("{k} = {v:.6}");
    }
    println!("report written to {}", out.display());
    Ok(())
}
