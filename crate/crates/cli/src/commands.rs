use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use bloodnet::data::{self, make_slice_windows, SliceWindow, Study, WindowBatch};
use bloodnet::eval::{self, ComparisonTable, EvalReport, Level};
use bloodnet::model::{blood_volume_feature, checkpoint, Model, Variant};
use bloodnet::tensor::DType;
use bloodnet::train::{self, TrainLog};
use bloodnet::{Element, Error};

use crate::config::RunConfig;
use crate::{overlay, CliError, Command};

pub const CHECKPOINT_FILE: &str = "model.ckpt";

type Result<T, E = CliError> = std::result::Result<T, E>;

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Generate {
            config,
            out,
            studies,
            first_index,
            seed,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.phantom.seed = s;
            }
            let dirs = generate(&cfg, &out, first_index, studies)?;
            eprintln!("wrote {} studies to {}", dirs.len(), out.display());
        }
        Command::Train {
            config,
            data,
            val,
            out,
            variant,
            init_seed,
            shuffle_seed,
            epochs,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            if let Some(v) = variant {
                cfg.arch.variant = v;
            }
            if let Some(s) = init_seed {
                cfg.train.init_seed = s;
            }
            if let Some(s) = shuffle_seed {
                cfg.train.shuffle_seed = s;
            }
            if let Some(e) = epochs {
                cfg.train.stage_epochs = [e[0], e[1], e[2]];
            }
            let log = train(&cfg, &data, val.as_deref(), &out)?;
            for s in &log.stages {
                eprintln!(
                    "stage {} lambda {} epochs {} steps {} best val auc {}",
                    s.stage,
                    s.lambda,
                    s.epochs,
                    s.steps,
                    s.best_val_auc.map_or("-".into(), |a| format!("{a:.4}"))
                );
            }
            eprintln!("checkpoint {}", out.join(CHECKPOINT_FILE).display());
        }
        Command::Eval {
            config,
            checkpoint,
            data,
            out,
            bootstrap,
            seed,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            override_eval(&mut cfg, bootstrap, seed);
            for r in evaluate(&cfg, &checkpoint, &data, &out)? {
                println!(
                    "{} auc {:.4} ci [{:.4}, {:.4}] n {}",
                    r.level.as_str(),
                    r.auc,
                    r.ci.low,
                    r.ci.high,
                    r.items.len()
                );
            }
        }
        Command::Infer {
            config,
            checkpoint,
            study,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            println!("{}", infer(&cfg, &checkpoint, &study)?);
        }
        Command::Report {
            config,
            checkpoint,
            data,
            out,
            bootstrap,
            seed,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            override_eval(&mut cfg, bootstrap, seed);
            print!("{}", report(&cfg, &checkpoint, &data, &out)?.to_text());
        }
    }
    Ok(())
}

fn override_eval(cfg: &mut RunConfig, bootstrap: Option<usize>, seed: Option<u64>) {
    if let Some(n) = bootstrap {
        cfg.eval.n_bootstrap = n;
    }
    if let Some(s) = seed {
        cfg.eval.seed = s;
    }
}

/// Studies `first_index..first_index + count`, written under `out`.
pub fn generate(cfg: &RunConfig, out: &Path, first_index: u64, count: usize) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let studies = data::generate_studies(&cfg.phantom, first_index..first_index + count as u64)?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let dirs = studies
        .iter()
        .map(|s| data::write_study(out, s))
        .collect::<bloodnet::Result<Vec<_>>>()?;
    cfg.echo(out)?;
    Ok(dirs)
}

fn check_geometry(cfg_arch: &bloodnet::model::ArchConfig, studies: &[Study]) -> Result<()> {
    for s in studies {
        if (s.height, s.width) != (cfg_arch.height, cfg_arch.width) {
            return Err(Error::invalid(format!(
                "study {} is {}x{} but the network expects {}x{}",
                s.study_id, s.height, s.width, cfg_arch.height, cfg_arch.width
            ))
            .into());
        }
    }
    Ok(())
}

pub fn windows(studies: &[Study], k: usize, cfg: &RunConfig) -> Result<Vec<SliceWindow>> {
    let mut out = Vec::new();
    for s in studies {
        out.extend(make_slice_windows(s, k, cfg.window)?);
    }
    Ok(out)
}

/// Train on the studies under `data` and write the checkpoint, training
/// log and resolved config into `out`.
pub fn train(cfg: &RunConfig, data: &Path, val: Option<&Path>, out: &Path) -> Result<TrainLog> {
    cfg.validate()?;
    let studies = data::load_dataset(data)?;
    check_geometry(&cfg.arch, &studies)?;
    let train_windows = windows(&studies, cfg.arch.input_slices, cfg)?;
    let val_windows = match val {
        Some(dir) => {
            let v = data::load_dataset(dir)?;
            check_geometry(&cfg.arch, &v)?;
            Some(windows(&v, cfg.arch.input_slices, cfg)?)
        }
        None => None,
    };
    std::fs::create_dir_all(out).map_err(Error::from)?;
    cfg.echo(out)?;
    let log = match cfg.dtype()? {
        DType::F32 => train_as::<f32>(cfg, &train_windows, val_windows.as_deref(), out)?,
        DType::F64 => train_as::<f64>(cfg, &train_windows, val_windows.as_deref(), out)?,
    };
    log.save(out)?;
    Ok(log)
}

fn train_as<T: Element>(
    cfg: &RunConfig,
    train_windows: &[SliceWindow],
    val_windows: Option<&[SliceWindow]>,
    out: &Path,
) -> Result<TrainLog> {
    let (model, log) = train::run_protocol::<T>(&cfg.arch, &cfg.train, train_windows, val_windows)?;
    checkpoint::save(&model, &out.join(CHECKPOINT_FILE))?;
    Ok(log)
}

/// A checkpoint loaded at its stored precision.
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

macro_rules! with_model {
    ($m:expr, $model:ident => $body:expr) => {
        match $m {
            AnyModel::F32($model) => $body,
            AnyModel::F64($model) => $body,
        }
    };
}

impl AnyModel {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::format("checkpoint", format!("{}: {e}", path.display())))?;
        let (_, dtype) = checkpoint::peek(&bytes)?;
        Ok(match dtype {
            DType::F32 => AnyModel::F32(checkpoint::from_bytes(&bytes)?),
            DType::F64 => AnyModel::F64(checkpoint::from_bytes(&bytes)?),
        })
    }

    pub fn arch(&self) -> &bloodnet::model::ArchConfig {
        with_model!(self, m => m.arch())
    }

    pub fn variant(&self) -> Variant {
        self.arch().variant
    }

    pub fn score_studies(&self, studies: &[Study], cfg: &RunConfig) -> Result<(Vec<eval::Item>, Vec<eval::Item>)> {
        check_geometry(self.arch(), studies)?;
        Ok(with_model!(self, m => eval::score_studies(m, studies, cfg.window, cfg.eval.batch_size))?)
    }

    /// Per-window classification probabilities and, when the network
    /// segments, centre-slice mask probabilities `[h*w]` per window.
    pub fn predict(&self, windows: &[SliceWindow], batch_size: usize) -> Result<Predictions> {
        with_model!(self, m => predict_with(m, windows, batch_size))
    }
}

/// Window probabilities and optional centre-slice mask probabilities.
pub type Predictions = (Vec<f64>, Option<Vec<Vec<f64>>>);

fn predict_with<T: Element>(
    model: &Model<T>,
    windows: &[SliceWindow],
    batch_size: usize,
) -> Result<Predictions> {
    let mut probs = Vec::with_capacity(windows.len());
    let mut masks = model.variant().has_decoder().then(Vec::new);
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceWindow> = chunk.iter().collect();
        let p = model.forward_batch(&WindowBatch::<T>::from_windows(&refs)?)?;
        probs.extend(p.cls_probs.iter().map(|&v| Element::to_f64(v)));
        if let (Some(masks), Some(seg)) = (masks.as_mut(), p.seg_probs) {
            let plane = seg.numel() / chunk.len();
            masks.extend(
                seg.data()
                    .chunks(plane)
                    .map(|c| c.iter().map(|&v| Element::to_f64(v)).collect::<Vec<f64>>()),
            );
        }
    }
    Ok((probs, masks))
}

/// Slice- and study-level reports for one checkpoint.
pub fn evaluate(cfg: &RunConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<[EvalReport; 2]> {
    cfg.validate()?;
    let model = AnyModel::load(checkpoint)?;
    let studies = data::load_dataset(data)?;
    let (slices, study_items) = model.score_studies(&studies, cfg)?;
    let slice = EvalReport::new(Level::Slice, slices, cfg.eval.n_bootstrap, cfg.eval.seed)?;
    let study = EvalReport::new(Level::Study, study_items, cfg.eval.n_bootstrap, cfg.eval.seed)?;
    slice.save(out)?;
    study.save(out)?;
    cfg.echo(out)?;
    Ok([slice, study])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub study_id: String,
    pub probability: f64,
    /// Summed centre-slice blood estimates; absent for the single-task
    /// network, which does not segment.
    pub blood_mm3: Option<f64>,
    pub window_probabilities: Vec<f64>,
}

impl fmt::Display for Inference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.study_id, self.probability)?;
        match self.blood_mm3 {
            Some(v) => write!(f, " {v}"),
            None => write!(f, " NA"),
        }
    }
}

pub fn infer(cfg: &RunConfig, checkpoint: &Path, study_dir: &Path) -> Result<Inference> {
    let model = AnyModel::load(checkpoint)?;
    let study = data::read_study(study_dir)?;
    check_geometry(model.arch(), std::slice::from_ref(&study))?;
    let windows = make_slice_windows(&study, model.arch().input_slices, cfg.window)?;
    let (probs, masks) = model.predict(&windows, cfg.eval.batch_size)?;
    let blood_mm3 = match masks {
        Some(masks) => Some(
            masks
                .iter()
                .map(|m| blood_volume_feature(m, study.voxel_volume()))
                .sum::<bloodnet::Result<f64>>()?,
        ),
        None => None,
    };
    Ok(Inference {
        study_id: study.study_id.clone(),
        probability: eval::max_probability(&probs)?,
        blood_mm3,
        window_probabilities: probs,
    })
}

/// Compare checkpoints at slice level on `data`; draw overlays from the
/// first checkpoint that segments.
pub fn report(cfg: &RunConfig, checkpoints: &[PathBuf], data: &Path, out: &Path) -> Result<ComparisonTable> {
    cfg.validate()?;
    let studies = data::load_dataset(data)?;
    let models = checkpoints
        .iter()
        .map(|p| AnyModel::load(p))
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::with_capacity(models.len());
    for m in &models {
        let (slices, _) = m.score_studies(&studies, cfg)?;
        reports.push(EvalReport::new(Level::Slice, slices, cfg.eval.n_bootstrap, cfg.eval.seed)?);
    }
    let pairs: Vec<(Variant, &EvalReport)> = models.iter().map(|m| m.variant()).zip(&reports).collect();
    let table = eval::compare_variants(&pairs)?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    table.write_csv(File::create(out.join("comparison.csv")).map_err(Error::from)?)?;
    std::fs::write(out.join("comparison.txt"), table.to_text()).map_err(Error::from)?;
    if let Some(m) = models.iter().find(|m| m.variant().has_decoder()) {
        write_overlays(m, &studies, cfg, &out.join("overlays"))?;
    }
    cfg.echo(out)?;
    Ok(table)
}

/// For every slice whose true or predicted mask is nonempty, write
/// `{study}_{slice}.ppm` (contours over the centre slice) and
/// `{study}_{slice}_prob.pgm` (mask probabilities).
pub fn write_overlays(model: &AnyModel, studies: &[Study], cfg: &RunConfig, dir: &Path) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(Error::from)?;
    let k = model.arch().input_slices;
    let mut written = 0;
    for study in studies {
        let windows = make_slice_windows(study, k, cfg.window)?;
        let (_, masks) = model.predict(&windows, cfg.eval.batch_size)?;
        let Some(masks) = masks else { return Ok(0) };
        for (w, probs) in windows.iter().zip(&masks) {
            let predicted: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
            written += write_slice_overlay(dir, w, &predicted, probs)? as usize;
        }
    }
    Ok(written)
}

/// Returns whether anything was drawn.
pub fn write_slice_overlay(dir: &Path, w: &SliceWindow, predicted: &[u8], probs: &[f64]) -> Result<bool> {
    if w.center_mask.iter().all(|&m| m == 0) && predicted.iter().all(|&m| m == 0) {
        return Ok(false);
    }
    let (h, wd) = (w.height, w.width);
    let centre = &w.context[(w.k / 2) * h * wd..(w.k / 2 + 1) * h * wd];
    let rgb = overlay::overlay(centre, &w.center_mask, predicted, h, wd);
    let stem = format!("{}_{:03}", w.study_id, w.center_index);
    let io = |e: std::io::Error| CliError::from(Error::from(e));
    let file = |name: String| File::create(dir.join(name)).map(BufWriter::new).map_err(io);
    overlay::write_ppm(file(format!("{stem}.ppm"))?, wd, h, &rgb).map_err(io)?;
    let gray: Vec<f32> = probs.iter().map(|&p| p as f32).collect();
    overlay::write_pgm(file(format!("{stem}_prob.pgm"))?, wd, h, &overlay::to_gray(&gray)).map_err(io)?;
    Ok(true)
}
