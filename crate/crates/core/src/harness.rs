//! Command-line surface: argument types and the command implementations.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::load_checkpoint;
use crate::data::{
    build_dataset, read_volume, volume_to_image, volume_to_mask, write_volume, DatasetSpec, DatasetSplit,
    Manifest, PhantomParams, Split, Volume, VolumeData, VolumeRecord,
};
use crate::error::{Error, Result};
use crate::geometry::{boundary_weights, signed_distance_map, BinaryMask, SignedDistanceMap};
use crate::inference::{evaluate, sliding_window_infer};
use crate::losses::ConsistencyMode;
use crate::metrics::{AggregateMetrics, MetricReport};
use crate::network::Network;
use crate::tensor::Tensor;
use crate::training::{train_loop, TrainConfig, TrainSummary, CONFIG_FILE};

pub const RESULT_CSV_SCHEMA: u32 = 1;
pub const ABLATION_HEADER: &str = "config,seed,dice,jaccard,asd,hd95";
pub const SWEEP_HEADER: &str = "rho,seed,dice,jaccard,asd,hd95";

/// Training configurations compared by the ablation command, in order.
pub const ABLATION_MODES: [Mode; 5] = [Mode::Seg, Mode::SegSdf, Mode::Mc, Mode::Gc, Mode::Wgc];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Segmentation losses only.
    Seg,
    /// Segmentation plus distance regression.
    SegSdf,
    Mc,
    Gc,
    Wgc,
    /// Alias of `seg+sdf`.
    SupervisedOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Seg => "seg",
            Mode::SegSdf => "seg+sdf",
            Mode::Mc => "mc",
            Mode::Gc => "gc",
            Mode::Wgc => "wgc",
            Mode::SupervisedOnly => "supervised-only",
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        cfg.loss.consistency = match self {
            Mode::Seg | Mode::SegSdf | Mode::SupervisedOnly => ConsistencyMode::None,
            Mode::Mc => ConsistencyMode::Mc,
            Mode::Gc => ConsistencyMode::Gc,
            Mode::Wgc => ConsistencyMode::Wgc,
        };
        if self == Mode::Seg {
            cfg.loss.beta = 0.0;
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ok(match s {
            "seg" => Mode::Seg,
            "seg+sdf" => Mode::SegSdf,
            "mc" => Mode::Mc,
            "gc" => Mode::Gc,
            "wgc" => Mode::Wgc,
            "supervised-only" => Mode::SupervisedOnly,
            _ => {
                return Err(format!(
                    "unknown mode {s:?}; expected seg, seg+sdf, mc, gc, wgc or supervised-only"
                ))
            }
        })
    }
}

/// Parses extents written as `64x64`, `64,64` or `32x32x16`.
/// Grid extents parsed from one argument; a plain `Vec` would make clap expect repeated values.
pub type Extents = Vec<usize>;

pub fn parse_extents(s: &str) -> std::result::Result<Extents, String> {
    s.split(['x', ','])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad extent {p:?}: {e}")))
        .collect()
}

#[derive(Debug, Parser)]
#[command(name = "geoseg", version, about = "Semi-supervised segmentation with geometry-aware consistency")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct GlobalOpts {
    /// Seed for data generation or training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// TOML file with training settings; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Deterministic kernels (always the case in this build; recorded in the snapshot).
    #[arg(long, global = true, action = ArgAction::Set, num_args = 0..=1,
          default_value = "true", default_missing_value = "true")]
    pub deterministic: bool,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic phantom dataset and its manifest.
    BuildData(BuildDataArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train and evaluate the five loss configurations over several seeds.
    Ablate(AblateArgs),
    /// Train and evaluate the weighted configuration over several rho values.
    SweepRho(SweepArgs),
    /// Export signed distance and boundary weight maps.
    ExportMaps(ExportArgs),
}

#[derive(Clone, Debug, Args)]
pub struct BuildDataArgs {
    #[arg(long, default_value_t = 4)]
    pub labeled: usize,
    #[arg(long, default_value_t = 36)]
    pub unlabeled: usize,
    #[arg(long, default_value_t = 10)]
    pub test: usize,
    #[arg(long, value_parser = parse_extents, default_value = "64x64")]
    pub shape: Extents,
    /// Additive noise sigma.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Boundary blur sigma in voxels.
    #[arg(long)]
    pub blur: Option<f64>,
}

impl Default for BuildDataArgs {
    fn default() -> Self {
        BuildDataArgs {
            labeled: 4,
            unlabeled: 36,
            test: 10,
            shape: vec![64, 64],
            noise: None,
            blur: None,
        }
    }
}

/// Training settings that can be overridden on the command line.
#[derive(Clone, Debug, Default, Args)]
pub struct TrainOverrides {
    /// One of seg, seg+sdf, mc, gc, wgc, supervised-only.
    #[arg(long)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub k: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda_max: Option<f64>,
    /// Number of optimizer steps; the decay step is rescaled with it.
    #[arg(long)]
    pub t_max: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, value_parser = parse_extents)]
    pub crop: Option<Extents>,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest or its directory.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Clone, Debug, Default, Args)]
pub struct WindowArgs {
    /// Sliding window extents; defaults to the volume shape.
    #[arg(long, value_parser = parse_extents)]
    pub window: Option<Extents>,
    /// Window stride; defaults to half the window.
    #[arg(long, value_parser = parse_extents)]
    pub stride: Option<Extents>,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Clone, Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Clone, Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,1.5,2,2.5,3")]
    pub values: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub seeds: Vec<u64>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Clone, Debug, Args)]
pub struct ExportArgs {
    /// Ground-truth mask volume (uint8 header file).
    #[arg(long, conflicts_with = "checkpoint")]
    pub mask: Option<PathBuf>,
    /// Checkpoint whose decoder-1 distance prediction is used.
    #[arg(long, requires = "image")]
    pub checkpoint: Option<PathBuf>,
    /// Image volume to run the checkpoint on.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub rho: Vec<f64>,
}

fn out_dir(g: &GlobalOpts, default: &str) -> PathBuf {
    g.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Exists(path.to_path_buf()));
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_build_data(g: &GlobalOpts, args: &BuildDataArgs) -> Result<Manifest> {
    let mut phantom = PhantomParams::default();
    if let Some(n) = args.noise {
        phantom.noise_sigma = n;
    }
    if let Some(b) = args.blur {
        phantom.blur_sigma = b;
    }
    let spec = DatasetSpec {
        n_labeled: args.labeled,
        n_unlabeled: args.unlabeled,
        n_test: args.test,
        shape: args.shape.clone(),
        seed: g.seed.unwrap_or(0),
        phantom,
    };
    build_dataset(&out_dir(g, "data"), &spec, g.force)
}

/// Defaults, then the `--config` file, then command-line flags.
pub fn resolve_train_config(g: &GlobalOpts, o: &TrainOverrides) -> Result<TrainConfig> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            TrainConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::desk(),
    };
    if let Some(t) = o.t_max {
        cfg = cfg.with_t_max(t);
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.network.seed = cfg.seed;
    cfg.deterministic = g.deterministic;
    if let Some(m) = o.mode {
        m.apply(&mut cfg);
    }
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut cfg.loss.rho, o.rho);
    set(&mut cfg.loss.k, o.k);
    set(&mut cfg.loss.beta, o.beta);
    set(&mut cfg.loss.lambda_max, o.lambda_max);
    set(&mut cfg.lr, o.lr);
    if let Some(w) = o.width {
        cfg.network.width = w;
    }
    if let Some(d) = o.depth {
        cfg.network.depth = d;
    }
    if let Some(c) = &o.crop {
        cfg.crop = c.clone();
        cfg.network.spatial_rank = c.len();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_training_split(manifest: &Path) -> Result<(Manifest, DatasetSplit)> {
    let m = Manifest::load(manifest)?;
    let split = m.load_split()?;
    Ok((m, split))
}

fn load_test_cases(m: &Manifest) -> Result<Vec<VolumeRecord>> {
    m.records
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| m.load_record(r))
        .collect()
}

pub fn cmd_train(g: &GlobalOpts, args: &TrainArgs) -> Result<TrainSummary> {
    let cfg = resolve_train_config(g, &args.overrides)?;
    let dir = out_dir(g, "run");
    if args.resume.is_none() {
        refuse_existing(&dir.join(CONFIG_FILE), g.force)?;
    }
    let (_, split) = load_training_split(&args.manifest)?;
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    Ok(train_loop(&split, &cfg, Some(&dir), resume)?.summary)
}

fn resolve_window(w: &WindowArgs, shape: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let window = w.window.clone().unwrap_or_else(|| shape.to_vec());
    let stride = w
        .stride
        .clone()
        .unwrap_or_else(|| window.iter().map(|&e| (e / 2).max(1)).collect());
    (window, stride)
}

fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    write_text(&dir.join("metrics.csv"), &report.to_csv())?;
    write_text(
        &dir.join("metrics.json"),
        &serde_json::to_string_pretty(&report.aggregate)?,
    )
}

pub fn cmd_eval(g: &GlobalOpts, args: &EvalArgs) -> Result<MetricReport> {
    let dir = out_dir(g, "eval");
    refuse_existing(&dir.join("metrics.csv"), g.force)?;
    let ck = load_checkpoint(&args.checkpoint)?;
    let m = Manifest::load(&args.manifest)?;
    let cases = load_test_cases(&m)?;
    let (window, stride) = resolve_window(&args.window, &m.shape);
    let report = evaluate(&ck.network, &cases, &window, &stride)?;
    write_report(&dir, &report)?;
    Ok(report)
}

fn metric_cells(a: &AggregateMetrics) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| crate::metrics::UNDEFINED.to_string(), |v| v.to_string());
    format!("{},{},{},{}", a.dice, a.jaccard, opt(a.asd), opt(a.hd95))
}

/// One row of an ablation or sweep table.
#[derive(Clone, Debug, Serialize)]
pub struct ResultRow {
    pub label: String,
    pub seed: Option<u64>,
    pub metrics: AggregateMetrics,
}

fn mean_row(label: String, rows: &[&ResultRow]) -> ResultRow {
    let n = rows.len() as f64;
    let mean_opt = |f: fn(&AggregateMetrics) -> Option<f64>| {
        rows.iter()
            .map(|r| f(&r.metrics))
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.iter().sum::<f64>() / n)
    };
    ResultRow {
        label,
        seed: None,
        metrics: AggregateMetrics {
            dice: rows.iter().map(|r| r.metrics.dice).sum::<f64>() / n,
            jaccard: rows.iter().map(|r| r.metrics.jaccard).sum::<f64>() / n,
            asd: mean_opt(|m| m.asd),
            hd95: mean_opt(|m| m.hd95),
            cases: rows.iter().map(|r| r.metrics.cases).sum(),
            degenerate_cases: rows.iter().map(|r| r.metrics.degenerate_cases).sum(),
        },
    }
}

fn results_csv(header: &str, rows: &[ResultRow]) -> String {
    let mut s = format!("# schema_version={RESULT_CSV_SCHEMA}\n{header}\n");
    for r in rows {
        let seed = r.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
        s.push_str(&format!("{},{},{}\n", r.label, seed, metric_cells(&r.metrics)));
    }
    s
}

fn train_and_eval(
    split: &DatasetSplit,
    cases: &[VolumeRecord],
    cfg: &TrainConfig,
    dir: &Path,
    window: &WindowArgs,
    shape: &[usize],
) -> Result<AggregateMetrics> {
    let out = train_loop(split, cfg, Some(dir), None)?;
    let (w, s) = resolve_window(window, shape);
    let report = evaluate(&out.network, cases, &w, &s)?;
    write_report(dir, &report)?;
    Ok(report.aggregate)
}

/// Per-seed rows for every ablation configuration followed by one mean row each.
pub fn cmd_ablate(g: &GlobalOpts, args: &AblateArgs) -> Result<Vec<ResultRow>> {
    let dir = out_dir(g, "ablation");
    let csv_path = dir.join("ablation.csv");
    refuse_existing(&csv_path, g.force)?;
    if args.seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds given".into()));
    }
    let (m, split) = load_training_split(&args.manifest)?;
    let mut rows = Vec::new();
    for mode in ABLATION_MODES {
        for &seed in &args.seeds {
            let g = GlobalOpts {
                seed: Some(seed),
                ..g.clone()
            };
            let o = TrainOverrides {
                mode: Some(mode),
                ..args.overrides.clone()
            };
            let cfg = resolve_train_config(&g, &o)?;
            let run = dir.join(mode.as_str()).join(format!("seed_{seed}"));
            let metrics = train_and_eval(&split, &split.test, &cfg, &run, &args.window, &m.shape)?;
            rows.push(ResultRow {
                label: mode.as_str().into(),
                seed: Some(seed),
                metrics,
            });
        }
    }
    let means: Vec<ResultRow> = ABLATION_MODES
        .iter()
        .map(|mode| {
            let of: Vec<&ResultRow> = rows.iter().filter(|r| r.label == mode.as_str()).collect();
            mean_row(mode.as_str().into(), &of)
        })
        .collect();
    rows.extend(means);
    write_text(&csv_path, &results_csv(ABLATION_HEADER, &rows))?;
    Ok(rows)
}

/// One weighted-consistency run per `(rho, seed)`.
pub fn cmd_sweep_rho(g: &GlobalOpts, args: &SweepArgs) -> Result<Vec<ResultRow>> {
    let dir = out_dir(g, "sweep");
    let csv_path = dir.join("sweep_rho.csv");
    refuse_existing(&csv_path, g.force)?;
    if args.values.is_empty() || args.seeds.is_empty() {
        return Err(Error::InvalidArgument("need at least one rho value and one seed".into()));
    }
    let (m, split) = load_training_split(&args.manifest)?;
    let mut rows = Vec::new();
    for &rho in &args.values {
        for &seed in &args.seeds {
            let g = GlobalOpts {
                seed: Some(seed),
                ..g.clone()
            };
            let o = TrainOverrides {
                mode: Some(Mode::Wgc),
                rho: Some(rho),
                ..args.overrides.clone()
            };
            let cfg = resolve_train_config(&g, &o)?;
            let run = dir.join(format!("rho_{rho}")).join(format!("seed_{seed}"));
            let metrics = train_and_eval(&split, &split.test, &cfg, &run, &args.window, &m.shape)?;
            rows.push(ResultRow {
                label: rho.to_string(),
                seed: Some(seed),
                metrics,
            });
        }
    }
    write_text(&csv_path, &results_csv(SWEEP_HEADER, &rows))?;
    Ok(rows)
}

/// Binary 8-bit grayscale image (`P5`).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Maps a weight in `[exp(-rho), 1]` linearly onto `[0, 255]`.
pub fn weight_to_pixel(w: f32, rho: f64) -> u8 {
    let lo = (-rho).exp();
    let v = (f64::from(w) - lo) / (1.0 - lo) * 255.0;
    v.round().clamp(0.0, 255.0) as u8
}

/// The middle slice along the last axis of a 3D volume, or the whole 2D image,
/// as `(rows, cols, values)`.
pub fn mid_slice<T: Copy>(shape: &[usize], data: &[T]) -> (usize, usize, Vec<T>) {
    match shape {
        [r, c] => (*r, *c, data.to_vec()),
        [r, c, d] => {
            let z = d / 2;
            let v = (0..r * c).map(|i| data[i * d + z]).collect();
            (*r, *c, v)
        }
        _ => (0, 0, Vec::new()),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExportedMap {
    pub rho: f64,
    pub sdm: PathBuf,
    pub weights: PathBuf,
    pub slice: PathBuf,
    pub mean_weight: f64,
}

fn exported_sdm(args: &ExportArgs) -> Result<(SignedDistanceMap, Vec<f64>)> {
    if let Some(p) = &args.mask {
        let vol = read_volume(p)?;
        let mask = volume_to_mask(&vol)?;
        let sdm = signed_distance_map(&mask).normalized();
        return Ok((sdm, vol.spacing));
    }
    match (&args.checkpoint, &args.image) {
        (Some(ck), Some(img)) => {
            let net: Network = load_checkpoint(ck)?.network;
            let vol = read_volume(img)?;
            let image: Vec<f64> = volume_to_image(&vol)?.into_iter().map(f64::from).collect();
            let mut shape = vec![1, 1];
            shape.extend_from_slice(&vol.shape);
            let pred = net.predict(&Tensor::new(shape, image)?)?;
            let sdm = SignedDistanceMap {
                shape: vol.shape.clone(),
                values: pred.sdm[0].data().to_vec(),
                normalized: true,
                degenerate: false,
            };
            Ok((sdm, vol.spacing))
        }
        _ => Err(Error::InvalidArgument(
            "export-maps needs --mask, or --checkpoint with --image".into(),
        )),
    }
}

/// Writes, per rho, the distance map, the weight map and a mid-slice image of the weights.
pub fn cmd_export_maps(g: &GlobalOpts, args: &ExportArgs) -> Result<Vec<ExportedMap>> {
    let dir = out_dir(g, "maps");
    let index = dir.join("maps.json");
    refuse_existing(&index, g.force)?;
    let (sdm, spacing) = exported_sdm(args)?;
    let tensor = Tensor::new(sdm.shape.clone(), sdm.values.clone())?;
    let mut out = Vec::new();
    for &rho in &args.rho {
        let weights = boundary_weights(&tensor, rho)?;
        let sub = dir.join(format!("rho_{rho}"));
        let as_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let sdm_path = sub.join("sdm.json");
        let w_path = sub.join("weights.json");
        write_volume(
            &sdm_path,
            &Volume {
                shape: sdm.shape.clone(),
                spacing: spacing.clone(),
                data: VolumeData::Float32(as_f32(&sdm.values)),
            },
        )?;
        let w32 = as_f32(weights.values());
        write_volume(
            &w_path,
            &Volume {
                shape: sdm.shape.clone(),
                spacing: spacing.clone(),
                data: VolumeData::Float32(w32.clone()),
            },
        )?;
        let (rows, cols, slice) = mid_slice(&sdm.shape, &w32);
        let pixels: Vec<u8> = slice.iter().map(|&w| weight_to_pixel(w, rho)).collect();
        let pgm = sub.join("weights_mid.pgm");
        fs::write(&pgm, encode_pgm(cols, rows, &pixels)).map_err(|e| Error::io(&pgm, e))?;
        out.push(ExportedMap {
            rho,
            sdm: sdm_path,
            weights: w_path,
            slice: pgm,
            mean_weight: weights.mean(),
        });
    }
    write_text(&index, &serde_json::to_string_pretty(&out)?)?;
    Ok(out)
}

/// Writes `mask` as a uint8 volume; convenient for feeding `export-maps`.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<String> {
    write_volume(
        path,
        &Volume {
            shape: mask.shape().to_vec(),
            spacing: vec![1.0; mask.shape().len()],
            data: VolumeData::Uint8(mask.data().to_vec()),
        },
    )
}

/// Single-window prediction of the whole volume, for comparison with tiled inference.
pub fn predict_volume(network: &Network, image: &[f64], shape: &[usize]) -> Result<Vec<f64>> {
    sliding_window_infer(network, image, shape, shape, shape)
}

pub fn run(cli: &Cli) -> Result<String> {
    let g = &cli.global;
    Ok(match &cli.command {
        Command::BuildData(a) => {
            let m = cmd_build_data(g, a)?;
            format!("wrote {} records to {}", m.records.len(), m.root.display())
        }
        Command::Train(a) => {
            let s = cmd_train(g, a)?;
            format!(
                "trained {} steps in {:.1} s; final total loss {}",
                s.steps,
                s.wall_seconds,
                s.final_losses.map_or(f64::NAN, |l| l.total)
            )
        }
        Command::Eval(a) => {
            let r = cmd_eval(g, a)?;
            format!(
                "{} cases: dice {:.4} jaccard {:.4}",
                r.aggregate.cases, r.aggregate.dice, r.aggregate.jaccard
            )
        }
        Command::Ablate(a) => format!("{} rows written", cmd_ablate(g, a)?.len()),
        Command::SweepRho(a) => format!("{} rows written", cmd_sweep_rho(g, a)?.len()),
        Command::ExportMaps(a) => format!("{} maps written", cmd_export_maps(g, a)?.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in ABLATION_MODES.iter().chain([Mode::SupervisedOnly].iter()) {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), *m);
        }
        assert!("full".parse::<Mode>().is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["geoseg", "train", "--manifest", "m", "--crop", "32x32"]).unwrap();
        match cli.command {
            Command::Train(a) => assert_eq!(a.overrides.crop, Some(vec![32, 32])),
            _ => unreachable!(),
        }
    }

    #[test]
    fn extents_parse() {
        assert_eq!(parse_extents("32x32x16").unwrap(), vec![32, 32, 16]);
        assert_eq!(parse_extents("64,64").unwrap(), vec![64, 64]);
        assert!(parse_extents("64xa").is_err());
    }

    #[test]
    fn pixel_map_endpoints() {
        assert_eq!(weight_to_pixel(1.0, 2.0), 255);
        assert_eq!(weight_to_pixel((-2.0f64).exp() as f32, 2.0), 0);
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "seed = 5\nt_max = 40\n[loss]\nrho = 1.5\nk = 10.0\n").unwrap();
        let g = GlobalOpts {
            config: Some(p),
            deterministic: true,
            ..Default::default()
        };
        let o = TrainOverrides {
            k: Some(1500.0),
            ..Default::default()
        };
        let cfg = resolve_train_config(&g, &o).unwrap();
        assert_eq!((cfg.seed, cfg.t_max, cfg.loss.rho, cfg.loss.k), (5, 40, 1.5, 1500.0));
        assert_eq!(cfg.network.seed, 5);
    }
}
