//! Subcommands of the `ambiflow` binary.
//!
//! Every command writes into an output directory and echoes the effective
//! configuration there as `config.txt`.

pub mod config;
pub mod plot;

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ambiflow::data::{self, Sample};
use ambiflow::eval::{self, EvalReport};
use ambiflow::flow::FlowModel;
use ambiflow::heatmap::{self, HeatmapFrame, HeatmapGaussian};
use ambiflow::model::{self, Model};
use ambiflow::posedisc::Discriminator;
use ambiflow::trainer::{self, StepReport, Trainer, TrainingSet};
use rayon::prelude::*;

pub use config::{ConfigError, RunConfig};

/// Exit code for configuration problems (also used by argument parsing).
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
/// Inputs that are readable but inconsistent.
pub const EXIT_INPUT: i32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] ambiflow::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Input(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Core(e) => match e {
                ambiflow::Error::Io { .. } | ambiflow::Error::Format(_) => EXIT_IO,
                ambiflow::Error::Numeric(_) | ambiflow::Error::Tensor(_) => EXIT_NUMERIC,
                ambiflow::Error::InvalidInput(_) => EXIT_INPUT,
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

/// Write a file through a buffered writer.
fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.txt");
    fs::write(&path, cfg.render()).map_err(io_err(&path))
}

/// Outcome of `gen`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub samples: usize,
    pub occluded_samples: usize,
    pub occluded_joints: usize,
    pub ambiguous: usize,
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path, heatmaps: bool) -> Result<GenSummary> {
    create_dir(out)?;
    let samples = data::generate_dataset(&cfg.data)?;
    data::write_dataset(&samples, &out.join("dataset.bin"))?;
    if heatmaps {
        let n = cfg.heatmap_frames.min(samples.len());
        let frames = (0..n)
            .into_par_iter()
            .map(|i| {
                let raw = data::generate_raw(&cfg.data, i)?;
                let joints = raw
                    .truth
                    .iter()
                    .map(|g| data::joint_window(g, cfg.data.window).map(|w| w.0))
                    .collect::<ambiflow::Result<Vec<_>>>()?;
                Ok(HeatmapFrame { joints })
            })
            .collect::<ambiflow::Result<Vec<_>>>()?;
        heatmap::write_heatmaps(&out.join("heatmaps.bin"), &frames)?;
    }
    echo_config(cfg, out)?;
    Ok(GenSummary {
        samples: samples.len(),
        occluded_samples: samples.iter().filter(|s| s.occluded.iter().any(|&o| o)).count(),
        occluded_joints: samples.iter().map(|s| s.occluded.iter().filter(|&&o| o).count()).sum(),
        ambiguous: samples.iter().filter(|s| heatmap::is_ambiguous(&s.gaussians, cfg.eval.ambiguity_threshold)).count(),
    })
}

/// Fit every heatmap of a heatmap file, starting from its argmax. Writes
/// `fits.csv`; returns the number of fits.
pub fn cmd_fit_heatmaps(cfg: &RunConfig, heatmaps: &Path, out: &Path) -> Result<usize> {
    create_dir(out)?;
    let frames = heatmap::read_heatmaps(heatmaps)?;
    if frames.is_empty() {
        return Err(CliError::Input(format!("{} contains no heatmaps", heatmaps.display())));
    }
    let fits = frames
        .par_iter()
        .map(|f| {
            f.joints
                .iter()
                .map(|hm| heatmap::fit_gaussian(hm, &HeatmapGaussian::initial(hm.argmax().0)))
                .collect::<ambiflow::Result<Vec<_>>>()
        })
        .collect::<ambiflow::Result<Vec<_>>>()?;
    write_file(&out.join("fits.csv"), |w| heatmap::write_fits_csv(w, &fits))?;
    echo_config(cfg, out)?;
    Ok(fits.iter().map(Vec::len).sum())
}

pub fn new_model(cfg: &RunConfig) -> Result<Model> {
    Ok(Model { flow: FlowModel::new(cfg.flow.clone())?, disc: Discriminator::new(&cfg.data.skeleton, &cfg.disc) })
}

pub fn training_set(cfg: &RunConfig, samples: &[Sample]) -> Result<TrainingSet> {
    if samples.first().is_some_and(|s| s.joint_count() != cfg.data.skeleton.joint_count()) {
        return Err(CliError::Input("dataset joint count does not match the skeleton".into()));
    }
    Ok(TrainingSet::from_samples(samples, &cfg.data.skeleton.hips)?)
}

/// Train on `dataset`, writing `checkpoint.bin`, `model.bin` and
/// `history.csv` into `out`. With `resume`, training continues from that
/// checkpoint and the history of the earlier run is kept.
pub fn cmd_train(
    cfg: &RunConfig,
    dataset: &Path,
    out: &Path,
    resume: Option<&Path>,
    mut progress: impl FnMut(usize, &[StepReport]),
) -> Result<Vec<StepReport>> {
    create_dir(out)?;
    let samples = data::read_dataset(dataset)?;
    if samples.len() < 2 {
        return Err(CliError::Input("training needs at least 2 samples".into()));
    }
    let set = training_set(cfg, &samples)?;
    let history_path = out.join("history.csv");
    let header = format!("{}\n", trainer::HISTORY_HEADER);
    let mut t = match resume {
        Some(ckpt) => Trainer::load_checkpoint(ckpt, cfg.train.clone())?,
        None => Trainer::new(new_model(cfg)?, cfg.train.clone())?,
    };
    // A resumed run keeps the rows of the steps it resumes after, taken from
    // this directory or else from the checkpoint's.
    let earlier = resume
        .and_then(|c| c.parent())
        .map(|d| d.join("history.csv"))
        .filter(|p| p.exists())
        .into_iter()
        .chain(Some(history_path.clone()).filter(|p| p.exists()))
        .last();
    let rows = match earlier {
        Some(p) if resume.is_some() => truncate_history(&fs::read_to_string(&p).map_err(io_err(&p))?, t.step),
        _ => header,
    };
    fs::write(&history_path, rows).map_err(io_err(&history_path))?;
    echo_config(cfg, out)?;
    let ckpt_path = out.join("checkpoint.bin");
    let mut history = Vec::new();
    while t.epoch < cfg.train.epochs {
        let steps = t.train_epoch(&set)?;
        fs::OpenOptions::new()
            .append(true)
            .open(&history_path)
            .and_then(|f| {
                let mut w = BufWriter::new(f);
                trainer::write_history(&mut w, &steps, false)?;
                w.flush()
            })
            .map_err(io_err(&history_path))?;
        progress(t.epoch, &steps);
        history.extend(steps);
        if t.epoch == cfg.train.epochs || (cfg.checkpoint_every > 0 && t.epoch % cfg.checkpoint_every == 0) {
            t.save_checkpoint(&ckpt_path)?;
        }
    }
    if !ckpt_path.exists() || history.is_empty() {
        t.save_checkpoint(&ckpt_path)?;
    }
    model::save_model(&t.model, &out.join("model.bin"))?;
    Ok(history)
}

/// Keep the header and the rows of the first `steps` steps.
fn truncate_history(text: &str, steps: u64) -> String {
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        if i as u64 > steps {
            break;
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

/// Load a model file or a training checkpoint.
pub fn load_any_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(b"AMBICKPT") {
        Ok(Trainer::decode_checkpoint(&bytes, cfg.train.clone())?.model)
    } else {
        Ok(model::decode_model(&bytes)?)
    }
}

/// Write `hypotheses.csv`: `sample.m` hypotheses plus the z₀ pose per sample.
pub fn cmd_sample(cfg: &RunConfig, model_path: &Path, dataset: &Path, out: &Path) -> Result<usize> {
    create_dir(out)?;
    let m = load_any_model(cfg, model_path)?;
    let samples = data::read_dataset(dataset)?;
    let set = training_set(cfg, &samples)?;
    if m.flow.config.joints != set.joints {
        return Err(CliError::Input("model and dataset disagree on joint count".into()));
    }
    let sets = eval::sample_dataset(&m.flow, &set, cfg.sample_m, cfg.seed, cfg.sample_z0_only)?;
    write_file(&out.join("hypotheses.csv"), |w| eval::write_hypotheses(w, &sets))?;
    echo_config(cfg, out)?;
    Ok(sets.len() * (cfg.sample_m + 1))
}

/// Write `report.csv`, `summary.txt`, `m_curve.csv` and `joint_spread.csv`.
pub fn cmd_eval(cfg: &RunConfig, hypotheses: &Path, dataset: &Path, out: &Path) -> Result<EvalReport> {
    create_dir(out)?;
    let samples = data::read_dataset(dataset)?;
    let file = fs::File::open(hypotheses).map_err(io_err(hypotheses))?;
    let sets = eval::read_hypotheses(BufReader::new(file))?;
    if sets.len() != samples.len() {
        return Err(CliError::Input(format!("{} hypothesis sets for {} samples", sets.len(), samples.len())));
    }
    let report = eval::evaluate(&samples, &sets, &cfg.eval)?;
    write_file(&out.join("report.csv"), |w| report.write_csv(w))?;
    write_file(&out.join("summary.txt"), |w| report.write_summary(w))?;
    write_file(&out.join("m_curve.csv"), |w| report.write_m_curve(w))?;
    write_file(&out.join("joint_spread.csv"), |w| report.write_joint_spread(w))?;
    echo_config(cfg, out)?;
    Ok(report)
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|v| if v.is_empty() { Ok(f64::NAN) } else { v.parse::<f64>() }).collect::<std::result::Result<Vec<_>, _>>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| CliError::Input(format!("{}: non-numeric value", path.display())))?;
    if rows.is_empty() {
        return Err(CliError::Input(format!("{} has no rows", path.display())));
    }
    Ok((header, rows))
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    write_file(path, |w| {
        writeln!(w, "{}", header.join(","))?;
        for r in rows {
            let cells: Vec<String> = r.iter().map(|v| if v.is_nan() { String::new() } else { format!("{v}") }).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    })
}

/// Files written by `plot`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlotOutputs {
    pub files: Vec<PathBuf>,
}

/// Loss curves from a history CSV and/or the error-vs-M curve and per-joint
/// spread from an eval output directory. Every SVG gets a CSV twin.
pub fn cmd_plot(history: Option<&Path>, report: Option<&Path>, out: &Path) -> Result<PlotOutputs> {
    if history.is_none() && report.is_none() {
        return Err(CliError::Input("plot needs --history and/or --report".into()));
    }
    create_dir(out)?;
    let mut files = Vec::new();
    let mut emit = |name: &str, svg: String, header: &[&str], rows: &[Vec<f64>]| -> Result<()> {
        let s = out.join(format!("{name}.svg"));
        fs::write(&s, svg).map_err(io_err(&s))?;
        let c = out.join(format!("{name}.csv"));
        write_csv(&c, header, rows)?;
        files.push(s);
        files.push(c);
        Ok(())
    };
    if let Some(h) = history {
        let (header, rows) = read_csv(h)?;
        let col = |name: &str| header.iter().position(|c| c == name).ok_or_else(|| CliError::Input(format!("history lacks column {name}")));
        let epoch = col("epoch")?;
        let names = ["l2d", "gen", "mmd", "det", "mb", "hm", "total"];
        let idx: Vec<usize> = names.iter().map(|n| col(n)).collect::<Result<_>>()?;
        // Per-epoch means.
        let mut per_epoch: Vec<Vec<f64>> = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        for r in &rows {
            let e = r[epoch];
            if per_epoch.last().is_none_or(|p| p[0] != e) {
                per_epoch.push(std::iter::once(e).chain(std::iter::repeat_n(0.0, names.len())).collect());
                counts.push(0.0);
            }
            let p = per_epoch.last_mut().expect("pushed");
            for (k, &i) in idx.iter().enumerate() {
                p[k + 1] += r[i];
            }
            *counts.last_mut().expect("pushed") += 1.0;
        }
        for (p, n) in per_epoch.iter_mut().zip(&counts) {
            for v in &mut p[1..] {
                *v /= n;
            }
        }
        let series: Vec<(&str, Vec<(f64, f64)>)> =
            names.iter().enumerate().map(|(k, n)| (*n, per_epoch.iter().map(|p| (p[0], p[k + 1])).collect())).collect();
        let svg = plot::line_chart("Training losses (epoch means)", "epoch", "loss", &series, false);
        let header: Vec<&str> = std::iter::once("epoch").chain(names).collect();
        emit("loss_curves", svg, &header, &per_epoch)?;
    }
    if let Some(dir) = report {
        let (header, rows) = read_csv(&dir.join("m_curve.csv"))?;
        let has_base = rows.iter().any(|r| r.get(2).is_some_and(|v| v.is_finite()));
        let mut series = vec![("flow best-of-M", rows.iter().map(|r| (r[0], r[1])).collect::<Vec<_>>())];
        if has_base {
            series.push(("z0 + noise best-of-M", rows.iter().map(|r| (r[0], r[2])).collect()));
        }
        let svg = plot::line_chart("Error vs number of hypotheses", "M", "MPJPE (mm)", &series, true);
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        emit("error_vs_m", svg, &header, &rows)?;
        let (sh, srows) = read_csv(&dir.join("joint_spread.csv"))?;
        let cats: Vec<String> = srows.iter().map(|r| format!("{}", r[0])).collect();
        let axes = [("x", 1), ("y", 2), ("depth", 3)];
        let series: Vec<(&str, Vec<f64>)> = axes.iter().map(|&(n, k)| (n, srows.iter().map(|r| r[k]).collect())).collect();
        let svg = plot::bar_chart("Hypothesis spread per joint", "joint", "std (mm)", &cats, &series);
        let sh: Vec<&str> = sh.iter().map(String::as_str).collect();
        emit("joint_spread", svg, &sh, &srows)?;
    }
    Ok(PlotOutputs { files })
}

/// Cap rayon's pool from `AMBIFLOW_THREADS`, if set.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("AMBIFLOW_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| {
            CliError::Config(ConfigError::BadValue { origin: "environment".into(), key: "AMBIFLOW_THREADS".into(), value: v.clone() })
        })?;
        // A second initialization (in-process tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(())
}
