//! Command-line front end: one subcommand per pipeline stage.
//!
//! Case layout under a root directory:
//!
//! ```text
//! cases/<id>/image.nii.gz      intensities
//! cases/<id>/chambers.nii.gz   heart (chamber + myocardium) mask
//! cases/<id>/pat.nii.gz        reference fat mask
//! cohort.csv                   case_id,age,sex,bmi,deceased,cvd_diagnosis
//! ```

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::groundtruth::candidate_pat_mask;
use crate::metrics::{evaluate, patv_cm3, write_eval_csv};
use crate::nn::Checkpoint;
use crate::phantom::{generate_cohort_members, Cohort};
use crate::stats::{read_records, run_analysis, write_clinical_csv, write_patv_csv, write_reports};
use crate::trainer::{predict, split_dataset, train_with_observer, TrainingCase};
use crate::volumes::{load_mask, load_volume, save_mask, save_volume, LabelMask};
use crate::Volume;

pub const CASES_DIR: &str = "cases";
pub const IMAGE_FILE: &str = "image.nii.gz";
pub const CHAMBERS_FILE: &str = "chambers.nii.gz";
pub const PAT_FILE: &str = "pat.nii.gz";
pub const CANDIDATE_FILE: &str = "candidate.nii.gz";
pub const COHORT_FILE: &str = "cohort.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const SPLIT_FILE: &str = "split.csv";
pub const PREDICTIONS_DIR: &str = "predictions";

#[derive(Parser, Debug)]
#[command(name = "patcnn", version, about = "Pericardial fat segmentation and analysis pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override any configuration key, e.g. `--set train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, env = "PATCNN_DATA_ROOT")]
    pub data_root: Option<PathBuf>,
    #[arg(long, global = true, env = "PATCNN_OUTPUT_ROOT")]
    pub output_root: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Subset {
    All,
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Label {
    /// The reference fat mask.
    Pat,
    /// The Otsu candidate written by `groundtruth`.
    Candidate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MaskSource {
    Predictions,
    Truth,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic cases and their clinical records.
    Phantom {
        #[arg(long)]
        n: usize,
    },
    /// Write Otsu-based candidate fat masks next to each case.
    Groundtruth {
        #[arg(long)]
        case: Option<String>,
    },
    /// Train a model on the non-test cases.
    Train {
        #[arg(long, value_enum, default_value = "pat")]
        label: Label,
        /// Train on every case instead of holding out a test set.
        #[arg(long)]
        all: bool,
    },
    /// Segment cases with a trained checkpoint.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        subset: Subset,
    },
    /// Score predictions against the reference masks.
    Evaluate,
    /// Fat volume per case in cm³.
    Quantify {
        #[arg(long, value_enum, default_value = "predictions")]
        source: MaskSource,
    },
    /// Screening and multivariate regression on the clinical records.
    Stats {
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        patv: Option<PathBuf>,
    },
    /// Per-slice PNGs with reference (red) and predicted (green) contours.
    Overlay {
        #[arg(long)]
        case: String,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code: 0 on success, 2 on usage errors, 1 otherwise.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn resolve_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    cfg = cfg.with_overrides(&common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = &common.data_root {
        cfg.paths.data_root = p.clone();
    }
    if let Some(p) = &common.output_root {
        cfg.paths.output_root = p.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    match &cli.command {
        Command::Phantom { n } => cmd_phantom(&cfg, *n),
        Command::Groundtruth { case } => cmd_groundtruth(&cfg, case.as_deref()),
        Command::Train { label, all } => cmd_train(&cfg, *label, *all),
        Command::Predict { checkpoint, subset } => cmd_predict(&cfg, checkpoint.as_deref(), *subset),
        Command::Evaluate => cmd_evaluate(&cfg),
        Command::Quantify { source } => cmd_quantify(&cfg, *source),
        Command::Stats { records, patv } => cmd_stats(&cfg, records.as_deref(), patv.as_deref()),
        Command::Overlay { case } => cmd_overlay(&cfg, case),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).map_err(|e| Error::io(p, e))
}

/// Case ids (directory names) under `root/cases`, sorted.
pub fn list_cases(root: &Path) -> Result<Vec<String>> {
    let dir = root.join(CASES_DIR);
    let mut ids = Vec::new();
    for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        let entry = entry.map_err(|e| Error::io(&dir, e))?;
        if entry.path().join(IMAGE_FILE).is_file() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::domain(format!("no cases found under {}", dir.display())));
    }
    Ok(ids)
}

fn case_dir(root: &Path, id: &str) -> PathBuf {
    root.join(CASES_DIR).join(id)
}

fn cmd_phantom(cfg: &PipelineConfig, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::domain("--n must be at least 1"));
    }
    let out = &cfg.paths.output_root;
    let members = generate_cohort_members(n, cfg.seed, &cfg.cohort, &cfg.phantom)?;
    let cohort = Cohort { members, effects: cfg.cohort.clone(), template: cfg.phantom.clone() };
    for (i, m) in cohort.members.iter().enumerate() {
        let dir = case_dir(out, &m.record.case_id);
        create_dir(&dir)?;
        let case = cohort.render::<f32>(i)?;
        save_volume(&case.volume, dir.join(IMAGE_FILE))?;
        save_mask(&case.chambers, dir.join(CHAMBERS_FILE))?;
        save_mask(&case.pat, dir.join(PAT_FILE))?;
    }
    write_clinical_csv(&cohort.records(), out.join(COHORT_FILE))?;
    let effects = toml::to_string(&cohort.effects).map_err(|e| Error::format(e.to_string()))?;
    write_text(&out.join("cohort_effects.toml"), &effects)?;
    println!("wrote {n} cases to {}", out.join(CASES_DIR).display());
    Ok(())
}

fn cmd_groundtruth(cfg: &PipelineConfig, only: Option<&str>) -> Result<()> {
    let ids = match only {
        Some(id) => vec![id.to_string()],
        None => list_cases(&cfg.paths.data_root)?,
    };
    for id in &ids {
        let src = case_dir(&cfg.paths.data_root, id);
        let volume: Volume = load_volume(src.join(IMAGE_FILE))?;
        let chambers = load_mask(src.join(CHAMBERS_FILE))?;
        let cand = candidate_pat_mask(&volume, &chambers, cfg.groundtruth.margin_mm, cfg.groundtruth.bins)?;
        let dst = case_dir(&cfg.paths.output_root, id);
        create_dir(&dst)?;
        save_mask(&cand, dst.join(CANDIDATE_FILE))?;
        println!("{id}: {} candidate voxels", cand.count());
    }
    Ok(())
}

fn write_split(path: &Path, train: &[String], test: &[String]) -> Result<()> {
    let mut s = String::from("case_id,set\n");
    for id in train {
        s.push_str(&format!("{id},train\n"));
    }
    for id in test {
        s.push_str(&format!("{id},test\n"));
    }
    write_text(path, &s)
}

fn read_split(path: &Path) -> Result<Vec<(String, String)>> {
    read_text(path)?
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split_once(',')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::format(format!("{}: bad line {l:?}", path.display())))
        })
        .collect()
}

fn cmd_train(cfg: &PipelineConfig, label: Label, all: bool) -> Result<()> {
    let ids = list_cases(&cfg.paths.data_root)?;
    let (train_ids, test_ids) = if all || cfg.train.test_fraction == 0.0 {
        (ids.clone(), Vec::new())
    } else {
        let s = split_dataset(&ids, cfg.train.test_fraction, cfg.seed)?;
        let (mut a, mut b) = (s.train_val, s.test);
        a.sort();
        b.sort();
        (a, b)
    };
    let cases = train_ids
        .iter()
        .map(|id| {
            let dir = case_dir(&cfg.paths.data_root, id);
            let mask_file = match label {
                Label::Pat => PAT_FILE,
                Label::Candidate => CANDIDATE_FILE,
            };
            Ok(TrainingCase { id: id.clone(), volume: load_volume(dir.join(IMAGE_FILE))?, mask: load_mask(dir.join(mask_file))? })
        })
        .collect::<Result<Vec<TrainingCase<f32>>>>()?;
    let out = &cfg.paths.output_root;
    create_dir(out)?;
    write_split(&out.join(SPLIT_FILE), &train_ids, &test_ids)?;
    let mut ck = train_with_observer(&cases, &cfg.train_config(), &cfg.model_config(), |s| {
        eprintln!(
            "epoch {:>3}: train loss {:.5}, validation loss {:.5}{}",
            s.epoch,
            s.train_loss,
            s.val_loss,
            if s.improved { " *" } else { "" }
        );
    })?;
    ck.save(out.join(CHECKPOINT_FILE))?;
    let mut log = String::from("epoch,train_loss,val_loss\n");
    for (e, (t, v)) in ck.meta.train_losses.iter().zip(&ck.meta.val_losses).enumerate() {
        log.push_str(&format!("{},{t},{v}\n", e + 1));
    }
    write_text(&out.join("training_log.csv"), &log)?;
    println!("kept epoch {} of {}", ck.meta.best_epoch, ck.meta.epochs_run);
    Ok(())
}

fn subset_ids(cfg: &PipelineConfig, subset: Subset) -> Result<Vec<String>> {
    let all = list_cases(&cfg.paths.data_root)?;
    if subset == Subset::All {
        return Ok(all);
    }
    let want = if subset == Subset::Train { "train" } else { "test" };
    let split = read_split(&cfg.paths.output_root.join(SPLIT_FILE))?;
    Ok(split.into_iter().filter(|(_, s)| s == want).map(|(id, _)| id).collect())
}

fn cmd_predict(cfg: &PipelineConfig, checkpoint: Option<&Path>, subset: Subset) -> Result<()> {
    let out = &cfg.paths.output_root;
    let ck_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(CHECKPOINT_FILE));
    let ck = Checkpoint::<f32>::load(&ck_path)?;
    let dir = out.join(PREDICTIONS_DIR);
    create_dir(&dir)?;
    for id in subset_ids(cfg, subset)? {
        let volume: Volume = load_volume(case_dir(&cfg.paths.data_root, &id).join(IMAGE_FILE))?;
        let mask = predict(&ck.model, &volume)?;
        save_mask(&mask, dir.join(format!("{id}.nii.gz")))?;
        println!("{id}: {} voxels", mask.count());
    }
    Ok(())
}

fn predicted_ids(out: &Path) -> Result<Vec<String>> {
    let dir = out.join(PREDICTIONS_DIR);
    let mut ids: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_string_lossy().strip_suffix(".nii.gz").map(str::to_string))
        .collect();
    ids.sort();
    Ok(ids)
}

fn cmd_evaluate(cfg: &PipelineConfig) -> Result<()> {
    let out = &cfg.paths.output_root;
    let mut rows = Vec::new();
    for id in predicted_ids(out)? {
        let pred = load_mask(out.join(PREDICTIONS_DIR).join(format!("{id}.nii.gz")))?;
        let truth = load_mask(case_dir(&cfg.paths.data_root, &id).join(PAT_FILE))?;
        rows.push((id, evaluate(&pred, &truth)?));
    }
    if rows.is_empty() {
        return Err(Error::domain("no predictions to evaluate"));
    }
    write_eval_csv(&rows, out.join("eval.csv"))?;
    let mean = rows.iter().map(|(_, r)| r.dice).sum::<f64>() / rows.len() as f64;
    println!("{} cases, mean Dice {mean:.4}", rows.len());
    Ok(())
}

fn cmd_quantify(cfg: &PipelineConfig, source: MaskSource) -> Result<()> {
    let out = &cfg.paths.output_root;
    let ids = match source {
        MaskSource::Predictions => predicted_ids(out)?,
        MaskSource::Truth => list_cases(&cfg.paths.data_root)?,
    };
    let mut rows = Vec::new();
    for id in ids {
        let path = match source {
            MaskSource::Predictions => out.join(PREDICTIONS_DIR).join(format!("{id}.nii.gz")),
            MaskSource::Truth => case_dir(&cfg.paths.data_root, &id).join(PAT_FILE),
        };
        let mask = load_mask(path)?;
        rows.push((id, patv_cm3(&mask, mask.spacing().0)?));
    }
    create_dir(out)?;
    write_patv_csv(&rows, out.join("patv.csv"))?;
    println!("wrote {} volumes", rows.len());
    Ok(())
}

fn cmd_stats(cfg: &PipelineConfig, records: Option<&Path>, patv: Option<&Path>) -> Result<()> {
    let out = &cfg.paths.output_root;
    let records = records.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.data_root.join(COHORT_FILE));
    let patv = patv.map(Path::to_path_buf).unwrap_or_else(|| out.join("patv.csv"));
    let recs = read_records(&records, &patv)?;
    let analyses = run_analysis(&recs)?;
    create_dir(out)?;
    write_reports(&analyses, out.join("stats.csv"), out.join("stats_table.txt"))?;
    print!("{}", crate::stats::report_table(&analyses));
    Ok(())
}

const RED: [u8; 3] = [255, 0, 0];
const GREEN: [u8; 3] = [0, 255, 0];
const YELLOW: [u8; 3] = [255, 255, 0];

/// In-plane boundary voxels: foreground with a background 4-neighbour.
fn is_edge(m: &LabelMask, x: usize, y: usize, z: usize) -> bool {
    let [nx, ny, _] = m.dims();
    if !m.get(x, y, z) {
        return false;
    }
    x == 0 || y == 0 || x + 1 == nx || y + 1 == ny
        || !m.get(x - 1, y, z)
        || !m.get(x + 1, y, z)
        || !m.get(x, y - 1, z)
        || !m.get(x, y + 1, z)
}

/// One RGB image per slice: grey intensities with contour overlays.
pub fn render_overlay(volume: &Volume, truth: &LabelMask, pred: &LabelMask) -> Vec<image::RgbImage> {
    let [nx, ny, nz] = volume.dims();
    let (lo, hi) = volume.range();
    let span = if hi > lo { hi - lo } else { 1.0 };
    (0..nz)
        .map(|z| {
            image::RgbImage::from_fn(nx as u32, ny as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                let (t, p) = (is_edge(truth, x, y, z), is_edge(pred, x, y, z));
                let px = match (t, p) {
                    (true, true) => YELLOW,
                    (true, false) => RED,
                    (false, true) => GREEN,
                    _ => [(255.0 * (volume.get(x, y, z) - lo) / span).round() as u8; 3],
                };
                image::Rgb(px)
            })
        })
        .collect()
}

fn cmd_overlay(cfg: &PipelineConfig, id: &str) -> Result<()> {
    let out = &cfg.paths.output_root;
    let src = case_dir(&cfg.paths.data_root, id);
    let volume: Volume = load_volume(src.join(IMAGE_FILE))?;
    let truth = load_mask(src.join(PAT_FILE))?;
    let pred = load_mask(out.join(PREDICTIONS_DIR).join(format!("{id}.nii.gz")))?;
    if !volume.is_aligned_with(&truth) || !truth.is_aligned_with(&pred) {
        return Err(Error::domain(format!("{id}: image and masks are not aligned")));
    }
    let dir = out.join("overlay").join(id);
    create_dir(&dir)?;
    let slices = render_overlay(&volume, &truth, &pred);
    for (z, img) in slices.iter().enumerate() {
        let path = dir.join(format!("slice_{z:03}.png"));
        img.save(&path).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    }
    println!("wrote {} slices to {}", slices.len(), dir.display());
    Ok(())
}
