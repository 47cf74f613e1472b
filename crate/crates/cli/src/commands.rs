//! Subcommand bodies. Each reads the resolved [`RunConfig`], writes its
//! artifacts and logs to the run directory.

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sketchguide::checkpoint::{read_tensor, write_tensor, Checkpoint};
use sketchguide::finetune::{edit, finetune, pretrain, FineTuneEvent};
use sketchguide::interpolate::{interpolation_weights, slerp};
use sketchguide::metrics::MetricsReport;
use sketchguide::model::EpsilonNetwork;
use sketchguide::objectives::Objectives;
use sketchguide::sampler::{invert, sample, sample_from, GuidanceClassifier};
use sketchguide::schedule::{NoiseSchedule, TimestepMap};
use sketchguide::sketch::pgm::{export_dataset, grid, import_dataset, read_raster};
use sketchguide::sketch::{
    gen_dataset, image_batch, to_sketch, train_classifier, NoisyClassifier, SketchConverter,
    SketchFeatureExtractor, ToyImage,
};
use sketchguide::tensor::Tensor;

use crate::config::RunConfig;
use crate::error::CliError;

/// Resolved config plus the run directory log.
pub struct Run {
    pub cfg: RunConfig,
    pub sched: NoiseSchedule,
    pub hash: String,
    log: fs::File,
}

impl Run {
    /// Creates the run directory, records the resolved config in it and
    /// echoes it to standard output.
    pub fn start(cfg: RunConfig, command: &str) -> Result<Self, CliError> {
        let sched = cfg.schedule()?;
        let hash = cfg.hash();
        fs::create_dir_all(&cfg.run_dir)?;
        fs::write(cfg.run_dir.join("config.txt"), cfg.to_text())?;
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(cfg.run_dir.join("log.txt"))?;
        let run = Self { cfg, sched, hash, log };
        run.log(&format!("{command} config {}", run.hash));
        for line in run.cfg.to_text().lines() {
            run.log(&format!("  {line}"));
        }
        Ok(run)
    }

    pub fn log(&self, msg: &str) {
        println!("{msg}");
        let _ = writeln!(&self.log, "{msg}");
    }

    pub fn note(&self) -> String {
        format!("config {}", self.hash)
    }

    fn out(&self, explicit: Option<PathBuf>, name: &str) -> PathBuf {
        explicit.unwrap_or_else(|| self.cfg.run_dir.join(name))
    }

    fn write_images(&self, dir: &Path, stem: &str, batch: &Tensor, columns: usize) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        grid(batch, columns, -1.0, 1.0).write(&dir.join(format!("{stem}.pgm")), Some(&self.note()))?;
        write_tensor(&dir.join(format!("{stem}.tensor")), batch, &self.note())?;
        Ok(())
    }

    fn save(&self, ck: Checkpoint, path: &Path) -> Result<(), CliError> {
        ck.with_meta("config_hash", &self.hash).save(path)?;
        self.log(&format!("wrote {}", path.display()));
        Ok(())
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::MissingCheckpoint(path.to_path_buf()));
    }
    Ok(Checkpoint::load(path)?)
}

pub fn load_epsilon(path: &Path) -> Result<EpsilonNetwork, CliError> {
    Ok(load_checkpoint(path)?.into_epsilon()?)
}

pub fn load_classifier(path: &Path) -> Result<NoisyClassifier, CliError> {
    Ok(load_checkpoint(path)?.into_classifier()?)
}

fn raster(path: &Path, lo: f64, hi: f64) -> Result<Tensor, CliError> {
    let t = read_raster(path, lo, hi).map_err(|e| match e {
        sketchguide::Error::Io(io) => CliError::MalformedRaster(format!("{}: {io}", path.display())),
        sketchguide::Error::Raster(m) => CliError::MalformedRaster(m),
        other => other.into(),
    })?;
    Ok(t.reshape(vec![1, 1, 32, 32])?)
}

/// Image raster mapped onto `[-1, 1]` as `[1, 1, 32, 32]`.
pub fn read_image(path: &Path) -> Result<Tensor, CliError> {
    raster(path, -1.0, 1.0)
}

/// Sketch raster mapped onto `[0, 1]` as `[1, 1, 32, 32]`.
pub fn read_sketch(path: &Path) -> Result<Tensor, CliError> {
    raster(path, 0.0, 1.0)
}

fn dataset(run: &Run, dir: Option<&Path>) -> Result<Vec<ToyImage>, CliError> {
    match dir {
        Some(d) => Ok(import_dataset(d)?),
        None => Ok(gen_dataset(run.cfg.data_size, run.cfg.data_seed)),
    }
}

pub fn gen_data(run: &Run, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let dir = run.out(out, "data");
    let images = gen_dataset(run.cfg.data_size, run.cfg.data_seed);
    export_dataset(&images, &dir, Some(&run.note()))?;
    run.log(&format!("wrote {} images to {}", images.len(), dir.display()));
    Ok(dir)
}

pub fn train_classifier_cmd(run: &Run, data: Option<&Path>) -> Result<PathBuf, CliError> {
    let images = dataset(run, data)?;
    let start = Instant::now();
    let clf = train_classifier(&images, &run.sched, &run.cfg.classifier(), run.cfg.seed)?;
    let held_out = gen_dataset(400, run.cfg.data_seed.wrapping_add(1));
    for t in [0, run.sched.steps() / 2, run.sched.steps()] {
        let acc = clf.accuracy(&held_out, t, &run.sched, run.cfg.seed)?;
        run.log(&format!("held-out accuracy at t={t}: {acc:.4}"));
    }
    run.log(&format!("trained in {:.1}s", start.elapsed().as_secs_f64()));
    let path = run.cfg.classifier_path();
    run.save(Checkpoint::classifier(&clf, &run.sched), &path)?;
    Ok(path)
}

pub fn pretrain_cmd(run: &Run, data: Option<&Path>) -> Result<PathBuf, CliError> {
    let images = dataset(run, data)?;
    let cfg = run.cfg.pretrain();
    let total = cfg.iterations(images.len());
    let start = Instant::now();
    let mut curve = String::new();
    let out = pretrain(&images, &run.sched, &cfg, run.cfg.seed, |it, loss| {
        curve.push_str(&format!("{it} {loss}\n"));
        if it % 100 == 0 || it + 1 == total {
            run.log(&format!("iteration {it}/{total} loss {loss:.5}"));
        }
    })?;
    fs::write(run.cfg.run_dir.join("pretrain_loss.txt"), curve)?;
    run.log(&format!("pretrained in {:.1}s", start.elapsed().as_secs_f64()));
    let path = run.cfg.pretrained_path();
    run.save(Checkpoint::epsilon(&out.model, &run.sched).with_meta("iterations", total), &path)?;
    Ok(path)
}

pub struct FineTuneArgs {
    pub image: PathBuf,
    pub sketch: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn finetune_cmd(run: &Run, args: FineTuneArgs) -> Result<PathBuf, CliError> {
    let model = load_epsilon(&args.model.unwrap_or_else(|| run.cfg.pretrained_path()))?;
    let clf = load_classifier(&run.cfg.classifier_path())?;
    let x0 = read_image(&args.image)?;
    let s0 = match &args.sketch {
        Some(p) => read_sketch(p)?,
        None => to_sketch(&x0),
    };
    let (conv, feats) = (SketchConverter::default(), SketchFeatureExtractor::default());
    let obj = Objectives {
        converter: &conv,
        sketch_features: &feats,
        classifier: &clf,
    };
    let ck_dir = run.cfg.run_dir.join("finetune");
    let mut log = String::new();
    let mut failure = None;
    let start = Instant::now();
    let result = finetune(&model, &x0, &s0, &obj, &run.sched, &run.cfg.finetune(), |e| match e {
        FineTuneEvent::Step { iteration, report } => {
            log.push_str(&format!("{iteration} {report}\n"));
            if iteration % 10 == 0 {
                run.log(&format!("iteration {iteration} {report}"));
            }
        }
        FineTuneEvent::Checkpoint { iteration, model } => {
            let ck = Checkpoint::epsilon(model, &run.sched).with_meta("iteration", iteration);
            if let Err(e) = run.save(ck, &ck_dir.join(format!("iter_{iteration:05}.ckpt"))) {
                failure.get_or_insert(e);
            }
        }
    });
    fs::create_dir_all(&run.cfg.run_dir)?;
    fs::write(run.cfg.run_dir.join("finetune_log.txt"), format!("# {}\n# iteration l_p l_i total lambda\n{log}", run.note()))?;
    let out = match result {
        Ok(out) => out,
        Err(sketchguide::Error::Diverged { iteration, last_good }) => {
            let path = ck_dir.join("last_good.ckpt");
            run.save(
                Checkpoint::epsilon(&EpsilonNetwork::from_network(*last_good)?, &run.sched)
                    .with_meta("iteration", iteration),
                &path,
            )?;
            return Err(sketchguide::Error::NonFinite(format!(
                "fine-tuning diverged at iteration {iteration}; last good model in {}",
                path.display()
            ))
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(e) = failure {
        return Err(e);
    }
    run.log(&format!("fine-tuned in {:.1}s", start.elapsed().as_secs_f64()));
    let path = args.out.unwrap_or_else(|| run.cfg.finetuned_path());
    run.save(Checkpoint::epsilon(&out.model, &run.sched), &path)?;
    Ok(path)
}

fn guide(run: &Run) -> Result<Option<NoisyClassifier>, CliError> {
    if run.cfg.sample_target_class.0.is_some() && run.cfg.sample_guidance_scale != 0.0 {
        Ok(Some(load_classifier(&run.cfg.classifier_path())?))
    } else {
        Ok(None)
    }
}

pub fn sample_cmd(run: &Run, model: Option<PathBuf>, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let model = load_epsilon(&model.unwrap_or_else(|| run.cfg.pretrained_path()))?;
    let clf = guide(run)?;
    let out_dir = run.out(out, "samples");
    let samples = sample(
        &model,
        clf.as_ref().map(|c| c as &dyn GuidanceClassifier<f64>),
        &run.sched,
        &run.cfg.sampler()?,
        run.cfg.sample_count,
        false,
    )?
    .samples;
    run.write_images(&out_dir, "samples", &samples, 8)?;
    run.log(&format!("wrote {} samples to {}", samples.batch(), out_dir.display()));
    Ok(out_dir)
}

fn sample_steps(run: &Run) -> Result<TimestepMap, CliError> {
    Ok(TimestepMap::evenly_spaced(run.sched.steps(), run.cfg.sample_steps)?)
}

pub fn invert_cmd(run: &Run, image: &Path, model: Option<PathBuf>, out: Option<PathBuf>) -> Result<PathBuf, CliError> {
    let model = load_epsilon(&model.unwrap_or_else(|| run.cfg.pretrained_path()))?;
    let x0 = read_image(image)?;
    let labels = run.cfg.sample_target_class.0.map(|y| vec![y]);
    let latent = invert(&x0, &model, &run.sched, &sample_steps(run)?, labels.as_deref())?;
    let path = run.out(out, "latent.tensor");
    write_tensor(&path, &latent, &run.note())?;
    run.log(&format!("wrote {}", path.display()));
    Ok(path)
}

pub enum Endpoint {
    Latent(PathBuf),
    Image(PathBuf),
}

pub fn interpolate_cmd(
    run: &Run,
    a: Endpoint,
    b: Endpoint,
    model: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<PathBuf, CliError> {
    let model = load_epsilon(&model.unwrap_or_else(|| run.cfg.pretrained_path()))?;
    let steps = sample_steps(run)?;
    let labels = run.cfg.sample_target_class.0.map(|y| vec![y]);
    let latent = |e: Endpoint| -> Result<Tensor, CliError> {
        match e {
            Endpoint::Latent(p) => Ok(read_tensor(&p)?.0),
            Endpoint::Image(p) => Ok(invert(&read_image(&p)?, &model, &run.sched, &steps, labels.as_deref())?),
        }
    };
    let (za, zb) = (latent(a)?, latent(b)?);
    let frames = interpolation_weights(run.cfg.interpolate_count)
        .into_iter()
        .map(|alpha| slerp(&za, &zb, alpha))
        .collect::<Result<Vec<_>, _>>()?;
    let clf = guide(run)?;
    let images = sample_from(
        &model,
        clf.as_ref().map(|c| c as &dyn GuidanceClassifier<f64>),
        &run.sched,
        &run.cfg.sampler()?,
        Tensor::stack(&frames)?,
        false,
    )?
    .samples;
    let out_dir = run.out(out, "interpolation");
    run.write_images(&out_dir, "interpolation", &images, images.batch())?;
    run.log(&format!("wrote {} frames to {}", images.batch(), out_dir.display()));
    Ok(out_dir)
}

pub fn edit_cmd(
    run: &Run,
    image: &Path,
    sketch: &Path,
    model: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<PathBuf, CliError> {
    let model = load_epsilon(&model.unwrap_or_else(|| run.cfg.pretrained_path()))?;
    let clf = load_classifier(&run.cfg.classifier_path())?;
    let x0 = read_image(image)?;
    let s_new = read_sketch(sketch)?;
    let (conv, feats) = (SketchConverter::default(), SketchFeatureExtractor::default());
    let obj = Objectives {
        converter: &conv,
        sketch_features: &feats,
        classifier: &clf,
    };
    let result = edit(&model, &x0, &s_new, &obj, &run.sched, &run.cfg.finetune())?;
    let out_dir = run.out(out, "edit");
    let strip = Tensor::stack(&[x0, s_new.map(|v| 2.0 * v - 1.0), result.image.clone()])?;
    run.write_images(&out_dir, "edit", &strip, 3)?;
    write_tensor(&out_dir.join("edited.tensor"), &result.image, &run.note())?;
    run.log(&format!("wrote {}", out_dir.display()));
    Ok(out_dir)
}

pub struct EvaluateArgs {
    pub model: Option<PathBuf>,
    pub real: Option<PathBuf>,
    pub fake: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn evaluate_cmd(run: &Run, args: EvaluateArgs) -> Result<MetricsReport, CliError> {
    let clf = load_classifier(&run.cfg.classifier_path())?;
    let real = match &args.real {
        Some(d) => image_batch(&import_dataset(d)?),
        None => image_batch(&gen_dataset(run.cfg.metrics_count, run.cfg.data_seed.wrapping_add(2))),
    };
    let fake = match &args.fake {
        Some(d) => image_batch(&import_dataset(d)?),
        None => {
            let model = load_epsilon(&args.model.unwrap_or_else(|| run.cfg.pretrained_path()))?;
            let g = guide(run)?;
            sample(
                &model,
                g.as_ref().map(|c| c as &dyn GuidanceClassifier<f64>),
                &run.sched,
                &run.cfg.sampler()?,
                run.cfg.metrics_count,
                false,
            )?
            .samples
        }
    };
    let report = MetricsReport::evaluate(&real, &fake, &clf, run.cfg.metrics_k, run.cfg.metrics_splits)?;
    let path = run.out(args.out, "metrics.txt");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&path, format!("# {}\n{report}", run.note()))?;
    for line in report.to_string().lines() {
        run.log(line);
    }
    Ok(report)
}
