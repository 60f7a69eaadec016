use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use roadadapt::datasets::{
    extract_tiles, generate_synthetic_domain, harmonize_resolution, load_sample, parse_manifest, save_png_gray,
    save_png_rgb, DatasetManifest, Role, SamplePath, Style, TileStore, SYNTHETIC_RESOLUTION,
};
use roadadapt::eval::{run_transfer_grid, EvalSet, GridCell, TransferReport};
use roadadapt::experiment::{load_dataset_at, ExperimentConfig, LoadedDataset};
use roadadapt::model::ModelCheckpoint;
use roadadapt::pseudolabel::{
    generate_pseudo_labels, pseudo_label_stats, CheckpointTeacher, PseudoLabelStore, Teacher,
};
use roadadapt::trainer::{load_checkpoint, log_csv, TrainSession};
use roadadapt::Error;

use crate::{Cli, Command, Common};

pub const SNAPSHOT_FILE: &str = "config.resolved.json";
pub const RUN_FILE: &str = "run.json";
pub const MODEL_FILE: &str = "model.ckpt";

/// Identity of a finished training run, next to its `model.ckpt`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunInfo {
    kind: String,
    target_train: String,
    source: Option<String>,
    train_resolution_m_per_px: f64,
    checkpoint_id: String,
    config_hash: String,
    #[serde(default)]
    teacher_checkpoint_id: Option<String>,
}

impl RunInfo {
    fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(RUN_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn save(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join(RUN_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

/// 2 for bad invocations and inputs, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Validation(_) | Error::Config(_) | Error::Parse { .. } => 2,
                _ => 1,
            };
        }
    }
    1
}

pub fn parse_role(s: &str) -> Result<Role, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown role `{s}` (labeled_target, unlabeled_source, eval)"))
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let root = cli.data_root;
    match cli.command {
        Command::Synth {
            style,
            n,
            size,
            seed,
            name,
            role,
            split,
            out,
            force,
        } => synth(style, n, size, seed, name, role, &split, &out, force),
        Command::Prep {
            manifest,
            tile,
            stride,
            target_res,
            split,
            out,
            force,
        } => prep(&manifest, tile, stride.unwrap_or(tile), target_res, &split, &out, force),
        Command::Train { common, resume } => train(Run::new(&common, root, "train")?, resume.as_deref()),
        Command::Pseudolabel {
            common,
            teacher,
            threshold,
        } => pseudolabel(Run::new(&common, root, "pseudolabel")?, &teacher, threshold),
        Command::TrainSsda { common, pseudo, resume } => {
            train_ssda(Run::new(&common, root, "train-ssda")?, pseudo.as_deref(), resume.as_deref())
        }
        Command::Eval {
            common,
            checkpoint,
            eval_sets,
        } => eval(Run::new(&common, root, "eval")?, &checkpoint, &eval_sets),
        Command::Report {
            common,
            runs,
            eval_sets,
        } => report(Run::new(&common, root, "report")?, &runs, &eval_sets),
    }
}

fn refuse_overwrite(path: &Path, force: bool) -> anyhow::Result<()> {
    if path.exists() && !force {
        return Err(Error::Validation(format!("{} already exists (use --force to overwrite)", path.display())).into());
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn synth(
    style: Style,
    n: usize,
    size: u32,
    seed: u64,
    name: Option<String>,
    role: Role,
    split: &str,
    out: &Path,
    force: bool,
) -> anyhow::Result<()> {
    if n == 0 {
        return Err(Error::Validation("--n must be at least 1".into()).into());
    }
    if size < 8 {
        return Err(Error::Validation("--size must be at least 8".into()).into());
    }
    let manifest_path = out.join("manifest.json");
    refuse_overwrite(&manifest_path, force)?;
    for sub in ["images", "masks"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
    }
    let name = name.unwrap_or_else(|| format!("synthetic-{}", style.name()));
    write_json(
        &out.join(SNAPSHOT_FILE),
        &serde_json::json!({
            "command": "synth",
            "style": style,
            "n": n,
            "size": size,
            "seed": seed,
            "name": name,
            "role": role,
            "split": split,
        }),
    )?;
    let mut samples = Vec::with_capacity(n);
    for tile in generate_synthetic_domain(style, n, size, seed) {
        let id = &tile.origin.image_id;
        let image_path = PathBuf::from("images").join(format!("{id}.png"));
        let mask_path = PathBuf::from("masks").join(format!("{id}.png"));
        save_png_rgb(&tile.image, &out.join(&image_path))?;
        save_png_gray(&tile.mask, &out.join(&mask_path))?;
        samples.push(SamplePath {
            image_path,
            mask_path: Some(mask_path),
            vector_roads_path: None,
        });
    }
    let manifest = DatasetManifest {
        name,
        resolution_m_per_px: SYNTHETIC_RESOLUTION,
        role,
        splits: BTreeMap::from([(split.to_string(), samples)]),
        road_class_ids: BTreeSet::from([1]),
        nodata_ids: BTreeSet::from([255]),
    };
    manifest.write(&manifest_path)?;
    log::info!("wrote {n} {size}px images to {}", out.display());
    Ok(())
}

fn prep(
    manifest_path: &Path,
    tile: u32,
    stride: u32,
    target_res: Option<f64>,
    split: &str,
    out: &Path,
    force: bool,
) -> anyhow::Result<()> {
    if tile == 0 || stride == 0 {
        return Err(Error::Validation("--tile and --stride must be positive".into()).into());
    }
    if let Some(r) = target_res {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::Validation("--target-res must be positive".into()).into());
        }
    }
    refuse_overwrite(&out.join(roadadapt::datasets::INDEX_FILE), force)?;
    let manifest = parse_manifest(manifest_path)?;
    let samples = manifest.split(split)?;
    let res = target_res.unwrap_or(manifest.resolution_m_per_px);
    let mut tiles = Vec::new();
    let mut failures = Vec::new();
    for s in samples {
        match load_sample(&manifest, s).and_then(|t| harmonize_resolution(&t, res)) {
            Ok(t) => tiles.extend(extract_tiles(&t, tile, stride)),
            Err(e) => failures.push(format!("{}: {e}", s.image_path.display())),
        }
    }
    if !failures.is_empty() {
        for f in &failures {
            log::error!("{f}");
        }
        bail!("{} of {} files failed; no tile store written", failures.len(), samples.len());
    }
    TileStore::create(out, &manifest.name, manifest.role, tile, stride, &tiles, force)?;
    write_json(
        &out.join(SNAPSHOT_FILE),
        &serde_json::json!({
            "command": "prep",
            "manifest": manifest_path.canonicalize().unwrap_or_else(|_| manifest_path.to_path_buf()),
            "split": split,
            "tile": tile,
            "stride": stride,
            "target_res": res,
        }),
    )?;
    log::info!("{} images -> {} tiles in {}", samples.len(), tiles.len(), out.display());
    Ok(())
}

/// A config-driven command: resolved config plus output directory.
struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    force: bool,
}

impl Run {
    fn new(common: &Common, data_root: Option<PathBuf>, command: &str) -> anyhow::Result<Self> {
        let mut cfg = ExperimentConfig::load(&common.config)?;
        if let Some(seed) = common.seed {
            cfg.set_seed(seed);
        }
        let config_dir = common
            .config
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        cfg.resolve_paths(&data_root.unwrap_or_else(|| config_dir.clone()));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = config_dir.join(&cfg.output_dir);
        }
        cfg.validate()?;
        let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.join(command));
        Ok(Run {
            cfg,
            out,
            force: common.force,
        })
    }

    fn snapshot(&self) -> anyhow::Result<()> {
        self.cfg.save(&self.out.join(SNAPSHOT_FILE))?;
        Ok(())
    }

    fn load(&self, role: Role) -> anyhow::Result<LoadedDataset> {
        let d = self.cfg.load_dataset(role)?;
        log::info!("{}: {} tiles from {}", role.as_str(), d.samples.len(), d.name);
        Ok(d)
    }

    fn eval_sets(&self, extra: &[PathBuf]) -> anyhow::Result<Vec<EvalSet>> {
        let mut loaded = Vec::new();
        if self.cfg.datasets.contains_key(&Role::Eval) {
            loaded.push(self.load(Role::Eval)?);
        }
        for p in extra {
            loaded.push(load_dataset_at(p, "test", &self.cfg.tiling)?);
        }
        if loaded.is_empty() {
            return Err(Error::Config("no eval set: configure datasets.eval or pass --eval".into()).into());
        }
        Ok(loaded
            .into_iter()
            .map(|d| EvalSet {
                name: d.name,
                resolution_m_per_px: d.resolution_m_per_px,
                samples: d.samples,
            })
            .collect())
    }

    /// Runs a session to completion and writes log, model and run info.
    fn finish_training(
        &self,
        mut session: TrainSession,
        resume: Option<&Path>,
        mut info: RunInfo,
    ) -> anyhow::Result<()> {
        if let Some(p) = resume {
            session.resume(load_checkpoint(p)?)?;
            log::info!("resumed from {} at iteration {}", p.display(), session.iteration());
        }
        let ckpt_dir = self.out.join("checkpoints");
        std::fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
        session.run(Some(&ckpt_dir))?;
        let log_path = self.out.join("train_log.csv");
        std::fs::write(&log_path, log_csv(session.log())).with_context(|| format!("writing {}", log_path.display()))?;
        let ckpt = session.model_checkpoint();
        ckpt.save(&self.out.join(MODEL_FILE))?;
        info.checkpoint_id = ckpt.id();
        info.save(&self.out)?;
        log::info!("checkpoint {} written to {}", info.checkpoint_id, self.out.display());
        Ok(())
    }

    fn run_info(&self, kind: &str, target: &LoadedDataset, source: Option<&LoadedDataset>) -> RunInfo {
        RunInfo {
            kind: kind.into(),
            target_train: target.name.clone(),
            source: source.map(|s| s.name.clone()),
            train_resolution_m_per_px: target.resolution_m_per_px,
            checkpoint_id: String::new(),
            config_hash: self.cfg.hash(),
            teacher_checkpoint_id: None,
        }
    }

    fn write_report(&self, report: &TransferReport) -> anyhow::Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        let csv = self.out.join("report.csv");
        std::fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
        let md = self.out.join("report.md");
        std::fs::write(&md, report.to_markdown()).with_context(|| format!("writing {}", md.display()))?;
        for w in &report.metadata.warnings {
            log::warn!("{w}");
        }
        for r in &report.rows {
            match (r.road_iou_pct, &r.error) {
                (Some(v), _) => log::info!(
                    "{} + {} on {}: road IoU {v:.1}",
                    r.target_train,
                    r.source.as_deref().unwrap_or("-"),
                    r.eval_set
                ),
                (None, e) => log::error!(
                    "{} + {} on {}: {}",
                    r.target_train,
                    r.source.as_deref().unwrap_or("-"),
                    r.eval_set,
                    e.as_deref().unwrap_or("failed")
                ),
            }
        }
        let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
        if failed > 0 {
            bail!("{failed} of {} report rows failed; see {}", report.rows.len(), csv.display());
        }
        Ok(())
    }
}

fn train(run: Run, resume: Option<&Path>) -> anyhow::Result<()> {
    refuse_overwrite(&run.out.join(MODEL_FILE), run.force)?;
    run.snapshot()?;
    let labeled = run.load(Role::LabeledTarget)?;
    let info = run.run_info("supervised", &labeled, None);
    let session = TrainSession::supervised(
        run.cfg.train.clone(),
        run.cfg.model.clone(),
        run.cfg.augment.clone(),
        labeled.samples,
    )?;
    run.finish_training(session, resume, info)
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(MODEL_FILE)
    } else {
        p.to_path_buf()
    }
}

fn pseudolabel(mut run: Run, teacher: &Path, threshold: Option<f64>) -> anyhow::Result<()> {
    if let Some(t) = threshold {
        run.cfg.train.pseudo_threshold = t;
        run.cfg.validate()?;
    }
    refuse_overwrite(&run.out.join(roadadapt::pseudolabel::INDEX_FILE), run.force)?;
    let teacher = CheckpointTeacher::load(&checkpoint_path(teacher))?;
    let unlabeled = run.load(Role::UnlabeledSource)?;
    let threshold = run.cfg.train.pseudo_threshold;
    let maps = generate_pseudo_labels(&teacher, &unlabeled.samples, threshold)?;
    let store = PseudoLabelStore::create(&run.out, &maps, run.force)?;
    run.snapshot()?;
    let stats = pseudo_label_stats(&maps)?;
    write_json(&run.out.join("pseudo_stats.json"), &stats)?;
    log::info!(
        "teacher {}: {} tiles, kept {:.1}% of pixels at threshold {threshold}, {:.1}% of kept are road",
        teacher.checkpoint_id(),
        store.index().tiles.len(),
        100.0 * stats.kept_fraction,
        100.0 * stats.road_fraction
    );
    Ok(())
}

fn train_ssda(run: Run, pseudo: Option<&Path>, resume: Option<&Path>) -> anyhow::Result<()> {
    refuse_overwrite(&run.out.join(MODEL_FILE), run.force)?;
    run.snapshot()?;
    let labeled = run.load(Role::LabeledTarget)?;
    let unlabeled = run.load(Role::UnlabeledSource)?;
    let mut info = run.run_info("ssda", &labeled, Some(&unlabeled));
    let store = pseudo.map(PseudoLabelStore::open).transpose()?;
    let maps = match &store {
        Some(s) => {
            if s.index().threshold != run.cfg.train.pseudo_threshold {
                log::warn!(
                    "pseudo-labels were made at threshold {}, config says {}",
                    s.index().threshold,
                    run.cfg.train.pseudo_threshold
                );
            }
            info.teacher_checkpoint_id = Some(s.index().teacher_checkpoint_id.clone());
            Some(s.load_all()?)
        }
        None => None,
    };
    let session = TrainSession::ssda(
        run.cfg.train.clone(),
        run.cfg.model.clone(),
        run.cfg.augment.clone(),
        labeled.samples,
        unlabeled.samples,
        maps.as_deref(),
    )?;
    run.finish_training(session, resume, info)
}

fn eval(run: Run, checkpoint: &Path, extra: &[PathBuf]) -> anyhow::Result<()> {
    refuse_overwrite(&run.out.join("report.csv"), run.force)?;
    run.snapshot()?;
    let sets = run.eval_sets(extra)?;
    let path = checkpoint_path(checkpoint);
    let info = path.parent().and_then(|d| RunInfo::load(d).ok());
    let target = info.as_ref().map(|i| i.target_train.clone()).unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".into())
    });
    let cell = GridCell {
        target_train: target,
        source: info.as_ref().and_then(|i| i.source.clone()),
        train_resolution_m_per_px: info
            .as_ref()
            .map(|i| i.train_resolution_m_per_px)
            .unwrap_or(sets[0].resolution_m_per_px),
        checkpoint: Box::new(move || ModelCheckpoint::load(&path)),
    };
    let report = run_transfer_grid(vec![cell], &sets, run.cfg.tiling.tile_size, &run.cfg.hash());
    run.write_report(&report)
}

fn report(run: Run, runs: &[PathBuf], extra: &[PathBuf]) -> anyhow::Result<()> {
    refuse_overwrite(&run.out.join("report.csv"), run.force)?;
    run.snapshot()?;
    let sets = run.eval_sets(extra)?;
    let cells = runs
        .iter()
        .map(|dir| match RunInfo::load(dir) {
            Ok(info) => GridCell {
                target_train: info.target_train,
                source: info.source,
                train_resolution_m_per_px: info.train_resolution_m_per_px,
                checkpoint: Box::new(move || ModelCheckpoint::load(&dir.join(MODEL_FILE))),
            },
            Err(e) => {
                let msg = format!("{e:#}");
                GridCell {
                    target_train: dir.display().to_string(),
                    source: None,
                    train_resolution_m_per_px: sets[0].resolution_m_per_px,
                    checkpoint: Box::new(move || Err(Error::Config(msg))),
                }
            }
        })
        .collect();
    let report = run_transfer_grid(cells, &sets, run.cfg.tiling.tile_size, &run.cfg.hash());
    run.write_report(&report)
}
