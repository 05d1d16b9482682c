use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{DatasetKind, ExperimentConfig};
use super::dia::{train_dia_with, EpochRecord};
use crate::contrastive::EncoderCheckpoint;
use crate::datasets::{
    contaminate, load_folder_dataset, load_npz_dataset, subsample_fraction, synth_finegrained,
    ImageDataset, Split, ANOMALOUS,
};
use crate::diffusion::{train_denoiser_with, DenoiserCheckpoint};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scoring::{balancing_terms, build_feature_bank, score_images, ScoreReport};
use crate::transforms::{
    dissolve_images, DiffusionDissolver, DissolveConfig, DissolveMethod, Dissolver,
    HeuristicDissolver, ShiftSet,
};

pub const RUN_FORMAT_VERSION: u32 = 1;

/// Standard locations inside a run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join(format!("manifest-{command}.toml"))
    }

    pub fn denoiser(&self) -> PathBuf {
        self.root.join("checkpoints").join("denoiser")
    }

    pub fn encoder(&self) -> PathBuf {
        self.root.join("checkpoints").join("encoder")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn figures(&self) -> PathBuf {
        self.root.join("figures")
    }

    fn create(&self) -> Result<()> {
        for d in [self.root.clone(), self.metrics(), self.figures(), self.root.join("checkpoints")] {
            fs::create_dir_all(d)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub config_hash: String,
    pub dataset_fingerprint: String,
    pub checkpoints: Vec<String>,
    pub metrics: Vec<String>,
    pub figures: Vec<String>,
    pub wall_clock_seconds: f64,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        crate::diffusion::check_format_version(&text, RUN_FORMAT_VERSION)?;
        Ok(toml::from_str(&text)?)
    }
}

struct ManifestWriter<'a> {
    layout: &'a RunLayout,
    cfg: &'a ExperimentConfig,
    command: &'static str,
    start: Instant,
}

impl<'a> ManifestWriter<'a> {
    fn begin(layout: &'a RunLayout, cfg: &'a ExperimentConfig, command: &'static str) -> Result<Self> {
        layout.create()?;
        fs::write(layout.config(), cfg.to_toml()?)?;
        Ok(Self {
            layout,
            cfg,
            command,
            start: Instant::now(),
        })
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.layout.root)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    }

    fn finish(
        self,
        dataset: &ImageDataset,
        checkpoints: &[PathBuf],
        metrics: &[PathBuf],
        figures: &[PathBuf],
    ) -> Result<RunManifest> {
        let m = RunManifest {
            format_version: RUN_FORMAT_VERSION,
            command: self.command.to_string(),
            config_hash: self.cfg.hash()?,
            dataset_fingerprint: dataset.fingerprint().to_string(),
            checkpoints: checkpoints.iter().map(|p| self.rel(p)).collect(),
            metrics: metrics.iter().map(|p| self.rel(p)).collect(),
            figures: figures.iter().map(|p| self.rel(p)).collect(),
            wall_clock_seconds: self.start.elapsed().as_secs_f64(),
            config: self.cfg.clone(),
        };
        fs::write(self.layout.manifest(self.command), toml::to_string(&m)?)?;
        Ok(m)
    }
}

/// Train and test splits after resizing, contamination and removal of the
/// anomalies that were moved into training.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: ImageDataset,
    pub test: ImageDataset,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let ds = &cfg.dataset;
    let (train, test) = match ds.kind {
        DatasetKind::Synthetic => synth_finegrained(&ds.synth)?,
        DatasetKind::Folder => {
            let root = Path::new(&ds.path);
            (load_folder_dataset(root, Split::Train)?, load_folder_dataset(root, Split::Test)?)
        }
        DatasetKind::Npz => {
            let p = Path::new(&ds.path);
            (
                load_npz_dataset(p, Split::Train, &ds.normal_labels)?,
                load_npz_dataset(p, Split::Test, &ds.normal_labels)?,
            )
        }
    };
    let (train, test) = if ds.image_size > 0 {
        (train.resized(ds.image_size)?, test.resized(ds.image_size)?)
    } else {
        (train, test)
    };
    if ds.contamination == 0.0 {
        return Ok(PreparedData { train, test });
    }
    let mixed = contaminate(&train, &test, ds.contamination)?;
    let used = mixed.count(ANOMALOUS);
    // The first `used` anomalies of the test split moved to training.
    let mut skipped = 0;
    let (images, labels): (Vec<Image>, Vec<u8>) = test
        .images()
        .iter()
        .zip(test.labels())
        .filter(|(_, l)| {
            if **l == ANOMALOUS && skipped < used {
                skipped += 1;
                false
            } else {
                true
            }
        })
        .map(|(i, l)| (i.clone(), *l))
        .unzip();
    Ok(PreparedData {
        train: mixed,
        test: ImageDataset::new(images, labels, Split::Test)?,
    })
}

/// Training images for the denoiser: resampled to the dissolve resolution
/// and subsampled by `diffusion_fraction`.
pub fn diffusion_training_set(cfg: &ExperimentConfig, train: &ImageDataset) -> Result<ImageDataset> {
    let side = cfg.transforms.dissolve.resolution;
    let resized = if train.image_shape().is_some_and(|(_, h, w)| h == side && w == side) {
        train.clone()
    } else {
        train.resized(side)?
    };
    let normal = resized.filter_label(0)?;
    subsample_fraction(&normal, cfg.dataset.diffusion_fraction, cfg.dataset.subsample_seed)
}

pub fn write_loss_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn train_diffusion(cfg: &ExperimentConfig, run_dir: &Path) -> Result<PathBuf> {
    let layout = RunLayout::new(run_dir);
    let writer = ManifestWriter::begin(&layout, cfg, "train-diffusion")?;
    let data = prepare_data(cfg)?;
    let set = diffusion_training_set(cfg, &data.train)?;
    let (ckpt, log) = train_denoiser_with(&set, &cfg.diffusion, cfg.seed, |_, _| {})?;
    let out = layout.denoiser();
    ckpt.save(&out)?;
    let loss_path = layout.metrics().join("diffusion_loss.csv");
    write_loss_csv(
        &loss_path,
        &["step", "l1"],
        log.losses
            .iter()
            .enumerate()
            .map(|(i, l)| vec![i.to_string(), l.to_string()]),
    )?;
    writer.finish(&set, &[out.clone()], &[loss_path], &[])?;
    Ok(out)
}

/// Heuristic dissolver for non-diffusion methods.
pub fn heuristic_dissolver(dissolve: &DissolveConfig) -> Option<HeuristicDissolver> {
    (dissolve.method != DissolveMethod::Diffusion).then_some(HeuristicDissolver {
        method: dissolve.method,
        kernel_size: dissolve.kernel_size,
    })
}

fn denoiser_path(cfg: &ExperimentConfig, layout: &RunLayout) -> PathBuf {
    if cfg.dia.denoiser.is_empty() {
        layout.denoiser()
    } else {
        PathBuf::from(&cfg.dia.denoiser)
    }
}

/// Checks that a denoiser works at the configured dissolve resolution and channel count.
pub fn check_denoiser(ckpt: &DenoiserCheckpoint, cfg: &ExperimentConfig, channels: usize) -> Result<()> {
    let side = cfg.transforms.dissolve.resolution;
    if ckpt.image_shape() != (channels, side, side) {
        return Err(Error::Config(format!(
            "denoiser trained on {:?} but dissolving runs at {:?}",
            ckpt.image_shape(),
            (channels, side, side)
        )));
    }
    if cfg.transforms.dissolve.t_high > ckpt.schedule().steps() {
        return Err(Error::Timestep {
            t: cfg.transforms.dissolve.t_high,
            max: ckpt.schedule().steps(),
        });
    }
    Ok(())
}

/// Trains the encoder with an in-memory denoiser (or none for heuristics).
pub fn train_dia_model(
    cfg: &ExperimentConfig,
    train: &ImageDataset,
    denoiser: Option<&DenoiserCheckpoint>,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(EncoderCheckpoint, Vec<EpochRecord>)> {
    if !cfg.dia.include_dissolved {
        return train_dia_with(train, cfg, None, on_epoch);
    }
    match (cfg.transforms.dissolve.method, denoiser) {
        (DissolveMethod::Diffusion, Some(ckpt)) => {
            let (c, _, _) = train.image_shape().unwrap_or((0, 0, 0));
            check_denoiser(ckpt, cfg, c)?;
            let mut d = DiffusionDissolver {
                predictor: ckpt,
                schedule: ckpt.schedule(),
                image_shape: ckpt.image_shape(),
            };
            train_dia_with(train, cfg, Some(&mut d), on_epoch)
        }
        (DissolveMethod::Diffusion, None) => Err(Error::Config(
            "diffusion dissolving needs a trained denoiser".into(),
        )),
        _ => {
            let mut h = heuristic_dissolver(&cfg.transforms.dissolve).expect("heuristic method");
            train_dia_with(train, cfg, Some(&mut h), on_epoch)
        }
    }
}

pub fn train_dia(cfg: &ExperimentConfig, run_dir: &Path) -> Result<PathBuf> {
    let layout = RunLayout::new(run_dir);
    let needs_denoiser =
        cfg.dia.include_dissolved && cfg.transforms.dissolve.method == DissolveMethod::Diffusion;
    let denoiser = if needs_denoiser {
        let path = denoiser_path(cfg, &layout);
        if !path.join(crate::diffusion::MANIFEST_FILE).is_file() {
            return Err(Error::MissingPath(path));
        }
        Some(DenoiserCheckpoint::load(&path)?)
    } else {
        None
    };
    let writer = ManifestWriter::begin(&layout, cfg, "train-dia")?;
    let data = prepare_data(cfg)?;
    let (ckpt, history) = train_dia_model(cfg, &data.train, denoiser.as_ref(), |_| {})?;
    let out = layout.encoder();
    ckpt.save(&out)?;
    let loss_path = layout.metrics().join("dia_loss.csv");
    write_loss_csv(
        &loss_path,
        &["epoch", "loss", "con", "cls", "lr"],
        history.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.loss.to_string(),
                r.con.to_string(),
                r.cls.to_string(),
                r.lr.to_string(),
            ]
        }),
    )?;
    writer.finish(&data.train, &[out.clone()], &[loss_path], &[])?;
    Ok(out)
}

/// Scores the test split against a bank built from the train split.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    ckpt: &EncoderCheckpoint,
    data: &PreparedData,
) -> Result<ScoreReport> {
    let shifts = ShiftSet::new(cfg.transforms.shift, cfg.transforms.k)?;
    let bank = build_feature_bank(&ckpt.encoder, data.train.images(), &shifts)?;
    let lambdas = balancing_terms(&bank)?;
    let scores = score_images(&ckpt.encoder, data.test.images(), &bank, &lambdas, &shifts)?;
    let labels = data.test.labels();
    if !(labels.contains(&0) && labels.contains(&1)) {
        return Err(Error::Data("evaluation needs normal and anomalous test images".into()));
    }
    ScoreReport::new(scores, Some(labels), cfg.seed, &cfg.hash()?)
}

pub fn eval(cfg: &ExperimentConfig, run_dir: &Path, encoder: Option<&Path>) -> Result<ScoreReport> {
    let layout = RunLayout::new(run_dir);
    let path = encoder.map_or_else(|| layout.encoder(), Path::to_path_buf);
    let ckpt = EncoderCheckpoint::load(&path)?;
    let writer = ManifestWriter::begin(&layout, cfg, "eval")?;
    let data = prepare_data(cfg)?;
    let report = evaluate_model(cfg, &ckpt, &data)?;
    let csv_path = layout.metrics().join("scores.csv");
    let json_path = layout.metrics().join("summary.json");
    report.write_csv(&csv_path)?;
    report.write_summary(&json_path)?;
    writer.finish(&data.test, &[path], &[csv_path, json_path], &[])?;
    Ok(report)
}

/// Default columns of the dissolve grid.
pub const DEFAULT_GRID_STEPS: [usize; 4] = [50, 100, 200, 400];
pub const GRID_PADDING: usize = 2;

/// Rows are inputs; the first column is the original and each further
/// column dissolves at one `t`. `t = 0` entries add no column.
/// Cells are separated and framed by `GRID_PADDING` white pixels.
pub fn dissolve_grid(
    ckpt: &DenoiserCheckpoint,
    dissolve: &DissolveConfig,
    images: &[Image],
    t_list: &[usize],
) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("dissolve grid needs at least one image".into()))?;
    let (c, h, w) = first.shape();
    if images.iter().any(|i| i.shape() != first.shape()) {
        return Err(Error::Shape("grid images must share one shape".into()));
    }
    let steps: Vec<usize> = t_list.iter().copied().filter(|t| *t > 0).collect();
    for &t in &steps {
        ckpt.schedule().check(t)?;
    }
    let mut columns = vec![images.to_vec()];
    for &t in &steps {
        let mut d = DiffusionDissolver {
            predictor: ckpt,
            schedule: ckpt.schedule(),
            image_shape: ckpt.image_shape(),
        };
        let cfg = DissolveConfig {
            resolution: ckpt.image_shape().1,
            ..dissolve.clone()
        };
        columns.push(dissolve_images(&cfg, &mut d as &mut dyn Dissolver, images, &vec![t; images.len()])?);
    }
    let p = GRID_PADDING;
    let (rows, cols) = (images.len(), columns.len());
    let gh = rows * h + (rows + 1) * p;
    let gw = cols * w + (cols + 1) * p;
    let mut grid = Image::filled(c, gh, gw, 1.0);
    for (ci, col) in columns.iter().enumerate() {
        for (ri, img) in col.iter().enumerate() {
            let (oy, ox) = (p + ri * (h + p), p + ci * (w + p));
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        grid.set(ch, oy + y, ox + x, img.get(ch, y, x));
                    }
                }
            }
        }
    }
    Ok(grid)
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (c, h, w) = img.shape();
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let result = if c == 1 {
        image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([to_u8(img.get(0, y as usize, x as usize))])
        })
        .save(path)
    } else {
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch| to_u8(img.get(ch, y as usize, x as usize));
            image::Rgb([px(0), px(1), px(2)])
        })
        .save(path)
    };
    result.map_err(|e| Error::Serialization(format!("{}: {e}", path.display())))
}

/// Writes a dissolve grid of the first `count` test images.
pub fn dissolve_grid_command(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    denoiser: Option<&Path>,
    t_list: &[usize],
    count: usize,
) -> Result<PathBuf> {
    let layout = RunLayout::new(run_dir);
    let path = denoiser.map_or_else(|| denoiser_path(cfg, &layout), Path::to_path_buf);
    let ckpt = DenoiserCheckpoint::load(&path)?;
    let writer = ManifestWriter::begin(&layout, cfg, "dissolve-grid")?;
    let data = prepare_data(cfg)?;
    let n = count.clamp(1, data.test.len());
    let images: Vec<Image> = data.test.images()[..n].to_vec();
    let grid = dissolve_grid(&ckpt, &cfg.transforms.dissolve, &images, t_list)?;
    let out = layout.figures().join("dissolve_grid.png");
    save_png(&grid, &out)?;
    writer.finish(&data.test, &[path], &[], &[out.clone()])?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub run: usize,
    pub overrides: String,
    pub auroc: f64,
    pub config_hash: String,
}

/// Runs every combination of `sweep` values; returns rows sorted by AUROC, best first.
pub fn grid_search(
    base: &ExperimentConfig,
    sweep: &[(String, Vec<toml::Value>)],
    run_dir: &Path,
) -> Result<Vec<GridRow>> {
    let mut combos: Vec<Vec<(String, toml::Value)>> = vec![vec![]];
    for (key, values) in sweep {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    // Validate every combination before running any.
    let configs = combos
        .iter()
        .map(|combo| base.with_values(combo))
        .collect::<Result<Vec<_>>>()?;

    let mut denoisers: HashMap<String, DenoiserCheckpoint> = HashMap::new();
    let mut rows = Vec::with_capacity(configs.len());
    for (i, (cfg, combo)) in configs.iter().zip(&combos).enumerate() {
        let dir = run_dir.join("grid").join(format!("run-{i:03}"));
        let layout = RunLayout::new(&dir);
        let writer = ManifestWriter::begin(&layout, cfg, "grid-run")?;
        let data = prepare_data(cfg)?;
        let needs = cfg.dia.include_dissolved
            && cfg.transforms.dissolve.method == DissolveMethod::Diffusion;
        let key = denoiser_key(cfg)?;
        if needs && !denoisers.contains_key(&key) {
            let ckpt = if cfg.dia.denoiser.is_empty() {
                let set = diffusion_training_set(cfg, &data.train)?;
                train_denoiser_with(&set, &cfg.diffusion, cfg.seed, |_, _| {})?.0
            } else {
                DenoiserCheckpoint::load(Path::new(&cfg.dia.denoiser))?
            };
            denoisers.insert(key.clone(), ckpt);
        }
        let denoiser = if needs { denoisers.get(&key) } else { None };
        let (enc, _) = train_dia_model(cfg, &data.train, denoiser, |_| {})?;
        enc.save(&layout.encoder())?;
        let report = evaluate_model(cfg, &enc, &data)?;
        let csv_path = layout.metrics().join("scores.csv");
        let json_path = layout.metrics().join("summary.json");
        report.write_csv(&csv_path)?;
        report.write_summary(&json_path)?;
        writer.finish(&data.test, &[layout.encoder()], &[csv_path, json_path], &[])?;
        let overrides = combo
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(" ");
        rows.push(GridRow {
            run: i,
            overrides,
            auroc: report.summary.auroc.unwrap_or(f64::NAN),
            config_hash: cfg.hash()?,
        });
    }
    rows.sort_by(|a, b| b.auroc.total_cmp(&a.auroc).then(a.run.cmp(&b.run)));
    fs::create_dir_all(run_dir)?;
    write_loss_csv(
        &run_dir.join("grid_summary.csv"),
        &["run", "overrides", "auroc", "config_hash"],
        rows.iter().map(|r| {
            vec![r.run.to_string(), r.overrides.clone(), r.auroc.to_string(), r.config_hash.clone()]
        }),
    )?;
    Ok(rows)
}

/// Identifies the denoiser a configuration would train.
fn denoiser_key(cfg: &ExperimentConfig) -> Result<String> {
    Ok(format!(
        "{}|{}|{}|{}|{}",
        toml::to_string(&cfg.dataset)?,
        toml::to_string(&cfg.diffusion)?,
        cfg.seed,
        cfg.transforms.dissolve.resolution,
        cfg.dia.denoiser
    ))
}
