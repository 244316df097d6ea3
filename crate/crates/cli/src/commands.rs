use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use pointfuse::config::ModelConfig;
use pointfuse::dataset::{
    load_cloud, load_pgm, read_dataset, render_projection, save_xyz, synth_rows, write_dataset, Sample, ShapeKind, View,
};
use pointfuse::geometry::normalize_unit_sphere;
use pointfuse::model::PreparedSample;
use pointfuse::training::{evaluate, run_schedule, Checkpoint, ScheduleOptions, Stage, TrainLog, TrainState};
use pointfuse::{Error, Result};

/// Config sources shared by every model-facing subcommand. Later sources
/// win: `--preset`, then `--config`, then each `--set` in order.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// Starting preset (tiny, base, large, vitmae, base36).
    #[arg(long)]
    pub preset: Option<String>,
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Applies `args` on top of `base` and validates the result. Also returns
/// the keys that were given explicitly.
pub fn resolve_config(base: ModelConfig, args: &ConfigArgs) -> Result<(ModelConfig, BTreeSet<String>)> {
    let mut cfg = base;
    let mut explicit = BTreeSet::new();
    if let Some(name) = &args.preset {
        cfg = ModelConfig::preset(name)?;
    }
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.apply_text(&text, &path.display().to_string())?;
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("");
            if let Some((k, _)) = line.split_once('=') {
                explicit.insert(k.trim().to_string());
            }
        }
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
        explicit.insert(k.trim().to_string());
    }
    cfg.validate()?;
    Ok((cfg, explicit))
}

fn print_config(cfg: &ModelConfig) {
    println!("# resolved config");
    print!("{}", cfg.to_text());
}

/// Loads a checkpoint and refuses it if the stored checksum disagrees.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let loaded = Checkpoint::load(path)?;
    if !loaded.checksum_ok {
        return Err(Error::Checkpoint(format!(
            "{}: checksum mismatch, file is corrupt",
            path.display()
        )));
    }
    Ok(loaded.checkpoint)
}

/// Rebuilds a checkpoint under `cfg`. A layout mismatch means the config
/// overrides disagree with the checkpoint, so it is reported as a config error.
fn restore(ck: Checkpoint, cfg: &ModelConfig) -> Result<TrainState> {
    ck.into_state_with(cfg).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Config(format!("config does not match checkpoint: {msg}")),
        e => e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Args)]
pub struct DatasetArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated shape kinds, cycled over the samples.
    #[arg(long, default_value = "sphere,cube,torus,plane_with_hole")]
    pub shapes: String,
    /// Points per cloud.
    #[arg(long, default_value_t = 1024)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    /// Camera direction: +x, -x, +y, -y, +z or -z.
    #[arg(long, default_value = "+z", allow_hyphen_values = true)]
    pub view: String,
}

pub fn cmd_dataset(args: &DatasetArgs) -> Result<()> {
    let shapes = args
        .shapes
        .split(',')
        .map(|s| s.trim().parse::<ShapeKind>())
        .collect::<Result<Vec<_>>>()?;
    let view: View = args.view.parse()?;
    if args.count == 0 || args.n == 0 || args.image_size == 0 {
        return Err(Error::Config("--count, --n and --image-size must be positive".into()));
    }
    println!("# resolved config");
    println!("out = {}", args.out.display());
    println!(
        "shapes = {}",
        shapes.iter().map(|s| s.name()).collect::<Vec<_>>().join(",")
    );
    println!("n = {}", args.n);
    println!("count = {}", args.count);
    println!("seed = {}", args.seed);
    println!("image_size = {}", args.image_size);
    println!("view = {view}");
    let rows = synth_rows(&shapes, args.count, args.n, args.seed, args.image_size, view);
    let samples = rows.iter().map(|r| r.synthesize()).collect::<Result<Vec<_>>>()?;
    write_dataset(&args.out, &rows, &samples)?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct TokenizeArgs {
    #[arg(long)]
    pub cloud: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub mask_seed: u64,
    /// Directory for centers.xyz, visible.xyz and masked.xyz.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_tokenize(args: &TokenizeArgs) -> Result<()> {
    let (cfg, _) = resolve_config(ModelConfig::default(), &args.cfg)?;
    print_config(&cfg);
    let (cloud, _) = normalize_unit_sphere(&load_cloud(&args.cloud)?)?;
    let image = render_projection(&cloud, cfg.image_size, cfg.image_size, View::PosZ)?;
    let sample = Sample {
        id: stem(&args.cloud),
        cloud,
        image,
    };
    let prepared = PreparedSample::new(&sample, &cfg, args.mask_seed)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    save_xyz(args.out.join("centers.xyz"), &prepared.grouped.centers)?;
    save_xyz(args.out.join("visible.xyz"), &prepared.visible_points())?;
    save_xyz(args.out.join("masked.xyz"), &prepared.masked_points())?;
    println!(
        "points={} groups={} group_size={} visible={} masked={} patch={}x{}",
        sample.cloud.len(),
        cfg.groups,
        cfg.group_size,
        prepared.partition.visible.len(),
        prepared.partition.masked.len(),
        cfg.patch_size(),
        cfg.patch_size()
    );
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset directory with manifest.csv.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub stage: u8,
    /// Continue from this checkpoint; its config is the base config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides the `epochs` key.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// CSV log; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub allow_stage_regress: bool,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let stage = Stage::from_number(args.stage).ok_or_else(|| Error::Config(format!("invalid stage {}", args.stage)))?;
    let data = read_dataset(&args.data)?;
    let resumed = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let base = resumed.as_ref().map_or_else(ModelConfig::default, |c| c.config.clone());
    let (mut cfg, explicit) = resolve_config(base, &args.cfg)?;
    let h = data.first().map_or(cfg.image_size, |s| s.image.height);
    if h != cfg.image_size && resumed.is_none() && !explicit.contains("image_size") {
        // The image size follows the data unless pinned explicitly.
        cfg.check_image_size(h)?;
        cfg.image_size = h;
        cfg.validate()?;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    print_config(&cfg);
    let mut state = match resumed {
        Some(ck) => restore(ck, &cfg)?,
        None => TrainState::new(&cfg)?,
    };
    let log_path = args.log.clone().unwrap_or_else(|| args.out.with_extension("csv"));
    let mut log = TrainLog::default();
    let result = run_schedule(
        &mut state,
        &data,
        stage,
        cfg.epochs,
        &mut log,
        ScheduleOptions {
            allow_stage_regress: args.allow_stage_regress,
        },
        &mut |s| s.checkpoint().save(&args.out),
    );
    for line in log.as_str().lines().filter(|l| l.starts_with('#')) {
        eprintln!("{}", line.trim_start_matches("# "));
    }
    write_text(&log_path, log.as_str())?;
    result?;
    if let Some((epoch, _, loss)) = log.rows().last() {
        println!("epoch {epoch} loss {loss}");
    }
    println!(
        "wrote {} (stage {stage}, step {}) and {}",
        args.out.display(),
        state.step,
        log_path.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Input cloud (.xyz or ASCII .ply); normalized before grouping.
    #[arg(long)]
    pub cloud: PathBuf,
    /// Paired PGM image; rendered from the cloud along +z when omitted.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub mask_seed: u64,
    /// Reconstructed cloud (.xyz, G·M points).
    #[arg(long)]
    pub out: PathBuf,
    /// Visible input points; defaults to `<out stem>.input.xyz`.
    #[arg(long)]
    pub input_out: Option<PathBuf>,
    /// Cross-attention weights in ATTN v1 format.
    #[arg(long)]
    pub dump_attn: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "sample".into(), |s| s.to_string_lossy().into_owned())
}

pub fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ckpt)?;
    let fuse = ck.stage.is_some_and(Stage::fuses);
    let (cfg, _) = resolve_config(ck.config.clone(), &args.cfg)?;
    print_config(&cfg);
    if args.dump_attn.is_some() && !fuse {
        return Err(Error::Config(
            "--dump-attn needs a checkpoint trained with the image branch (stage 2 or 3)".into(),
        ));
    }
    let state = restore(ck, &cfg)?;
    let (cloud, _) = normalize_unit_sphere(&load_cloud(&args.cloud)?)?;
    let image = match &args.image {
        Some(p) => load_pgm(p)?,
        None => render_projection(&cloud, cfg.image_size, cfg.image_size, View::PosZ)?.quantized(),
    };
    let sample = Sample {
        id: stem(&args.cloud),
        cloud,
        image,
    };
    let prepared = PreparedSample::new(&sample, &cfg, args.mask_seed)?;
    let (recon, maps) = state
        .model
        .reconstruct(std::slice::from_ref(&prepared), fuse, args.dump_attn.is_some())?;
    save_xyz(&args.out, &recon[0])?;
    let input_out = args.input_out.clone().unwrap_or_else(|| {
        let mut p = args.out.clone();
        p.set_file_name(format!("{}.input.xyz", stem(&args.out)));
        p
    });
    save_xyz(&input_out, &prepared.visible_points())?;
    if let (Some(path), Some(maps)) = (&args.dump_attn, maps) {
        maps.save(path)?;
        println!(
            "wrote attention ({} layers x {} heads) to {}",
            maps.layers,
            maps.heads,
            path.display()
        );
    }
    println!(
        "wrote {} ({} points) and {} ({} visible points)",
        args.out.display(),
        recon[0].len(),
        input_out.display(),
        prepared.partition.visible.len() * cfg.group_size
    );
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// CSV output: sample_id,chamfer_l2sq,chamfer_l1.
    #[arg(long)]
    pub out: PathBuf,
    /// Debug mode: the reconstruction is the visible input itself.
    #[arg(long)]
    pub identity_bypass: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&args.ckpt)?;
    let fuse = ck.stage.is_some_and(Stage::fuses);
    let (mut cfg, _) = resolve_config(ck.config.clone(), &args.cfg)?;
    if args.identity_bypass {
        cfg.identity_bypass = true;
    }
    print_config(&cfg);
    let data = read_dataset(&args.data)?;
    let state = restore(ck, &cfg)?;
    let report = evaluate(&state.model, &data, fuse)?;
    write_text(&args.out, &report.to_csv())?;
    println!(
        "{} samples: mean chamfer_l2sq {} chamfer_l1 {}",
        report.rows.len(),
        report.mean_l2sq(),
        report.mean_l1()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        fs::write(&path, "preset = tiny\nlr = 0.01 # file\nseed = 3\n").unwrap();
        let args = ConfigArgs {
            preset: None,
            config: Some(path),
            set: vec!["lr=0.5".into()],
        };
        let (cfg, explicit) = resolve_config(ModelConfig::default(), &args).unwrap();
        assert_eq!((cfg.preset.as_str(), cfg.lr, cfg.seed), ("tiny", 0.5, 3));
        assert!(explicit.contains("seed") && explicit.contains("lr"));
        assert!(!explicit.contains("groups"));
    }

    #[test]
    fn malformed_set_is_a_usage_error() {
        let args = ConfigArgs {
            set: vec!["lr".into()],
            ..Default::default()
        };
        assert!(resolve_config(ModelConfig::default(), &args).unwrap_err().is_usage());
    }
}
