//! One function per subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use dida_core::encoder::{Encoder, EncoderConfig};
use dida_core::gradcheck::{run_all, CheckSize};
use dida_core::par::Execution;
use dida_core::scene::{
    generate_dataset, read_dataset, read_image, upsample_bilinear, write_dataset, write_image, DataConfig, Scene,
};
use dida_core::train::{
    attend as attend_map, grabcut_seeds, scene_ious, train as train_encoder, MapSource, MaskOracle, TrainConfig,
    VdaMaps, SEED_BACKGROUND, SEED_FOREGROUND,
};
use dida_core::Error;

use crate::config::Resolver;
use crate::values::{Background, Mode, Range, Widths};
use crate::{AttendArgs, CliError, EvalArgs, GenArgs, GradcheckArgs, TrainArgs};

fn print_resolved(command: &str, resolver: Resolver) -> Result<(), CliError> {
    let settings = resolver.finish()?;
    eprintln!("dida {command}: resolved config");
    for (key, value) in settings {
        eprintln!("  {key}={value}");
    }
    Ok(())
}

fn display_path(p: &Path) -> String {
    p.display().to_string()
}

pub fn gen(a: GenArgs) -> Result<(), CliError> {
    let d = DataConfig::default();
    let mut r = Resolver::new(a.config.as_deref())?;
    let out: PathBuf = r.required("out", a.out.map(|p| display_path(&p)))?.into();
    let count = r.value("count", a.count, 320usize)?;
    let size = r.value("size", a.size, d.image_size)?;
    let seed = r.value("seed", a.seed, d.seed)?;
    let objects = r.value(
        "objects",
        a.objects,
        Range {
            min: d.min_objects,
            max: d.max_objects,
        },
    )?;
    let sizes = r.value(
        "sizes",
        a.sizes,
        Range {
            min: d.min_size,
            max: d.max_size,
        },
    )?;
    let background = r.value("background", a.background, Background(d.background))?;
    print_resolved("gen", r)?;

    let config = DataConfig {
        image_size: size,
        min_objects: objects.min,
        max_objects: objects.max,
        min_size: sizes.min,
        max_size: sizes.max,
        background: background.0,
        seed,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let scenes = generate_dataset(&config, count, Execution::Parallel)?;
    write_dataset(&out, &scenes)?;
    println!("wrote {count} scenes to {}", out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let t = TrainConfig::default();
    let e = EncoderConfig::default();
    let mut r = Resolver::new(a.config.as_deref())?;
    let data: PathBuf = r.required("data", a.data.map(|p| display_path(&p)))?.into();
    let steps = r.value("steps", a.steps, t.steps)?;
    let lr = r.value("lr", a.lr, t.learning_rate)?;
    let lambda_dida = r.value("lambda-dida", a.lambda_dida, t.lambda_dida)?;
    let lambda_con = r.value("lambda-con", a.lambda_con, t.lambda_contrastive)?;
    let seed = r.value("seed", a.seed, t.seed)?;
    let out: PathBuf = r.required("out", a.out.map(|p| display_path(&p)))?.into();
    let report: PathBuf = r.required("report", a.report.map(|p| display_path(&p)))?.into();
    let batch_size = r.value("batch-size", a.batch_size, t.batch_size)?;
    let optimizer = r.value("optimizer", a.optimizer, t.optimizer)?;
    let eval_interval = r.value("eval-interval", a.eval_interval, t.eval_interval)?;
    let temperature = r.value("temperature", a.temperature, t.temperature)?;
    let eval_mode = r.value("eval-mode", a.eval_mode, Mode::of(t.eval_mode))?;
    let widths = r.value("widths", a.widths, Widths(e.conv_widths.clone()))?;
    let feature_dim = r.value("feature-dim", a.feature_dim, e.feature_dim)?;
    let init = r.optional("init", a.init.map(|p| display_path(&p)))?;
    print_resolved("train", r)?;

    let config = TrainConfig {
        steps,
        batch_size,
        learning_rate: lr,
        optimizer,
        lambda_dida,
        lambda_contrastive: lambda_con,
        eval_interval,
        seed,
        checkpoint_path: Some(out.clone()),
        temperature,
        eval_mode: eval_mode.signal(),
        execution: Execution::Parallel,
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let scenes = read_dataset(&data)?;
    let Some(first) = scenes.first() else {
        return Err(Error::EmptyDataset.into());
    };
    let encoder = match init {
        Some(path) => Encoder::load(path)?,
        None => Encoder::new(EncoderConfig {
            input_size: first.size(),
            conv_widths: widths.0,
            feature_dim,
            seed,
            ..e
        })
        .map_err(|e| CliError::Usage(e.to_string()))?,
    };
    let (trained, rep) = match train_encoder(encoder, &scenes, &config) {
        Ok(v) => v,
        Err(Error::Diverged(report)) => {
            eprint!("{report}");
            return Err(CliError::Runtime(format!(
                "training diverged at step {}: {}",
                report.step, report.reason
            )));
        }
        Err(e) => return Err(e.into()),
    };
    trained.save(&out)?;
    fs::write(&report, rep.to_csv()).map_err(|e| Error::io(&report, e))?;
    if let (Some(first), Some(last)) = (rep.first(), rep.last()) {
        println!(
            "step {}: dida_loss {:.4} mean_iou {:.4} -> step {}: dida_loss {:.4} mean_iou {:.4}",
            first.step, first.dida_loss, first.mean_iou, last.step, last.dida_loss, last.mean_iou
        );
    }
    Ok(())
}

fn compare_golden(dir: &Path, name: &str, produced: &Path, bless: bool) -> Result<(), CliError> {
    let golden = dir.join(name);
    let bytes = fs::read(produced).map_err(|e| Error::io(produced, e))?;
    if bless {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        fs::write(&golden, &bytes).map_err(|e| Error::io(&golden, e))?;
        return Ok(());
    }
    let expected = fs::read(&golden).map_err(|e| Error::io(&golden, e))?;
    if expected != bytes {
        return Err(CliError::Runtime(format!(
            "{} differs from golden {}",
            produced.display(),
            golden.display()
        )));
    }
    Ok(())
}

pub fn attend(a: AttendArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let ckpt: PathBuf = r.required("ckpt", a.ckpt.map(|p| display_path(&p)))?.into();
    let image: PathBuf = r.required("image", a.image.map(|p| display_path(&p)))?.into();
    let mask: PathBuf = r.required("mask", a.mask.map(|p| display_path(&p)))?.into();
    let mode = r.value("mode", a.mode, Mode::Threshold)?;
    let prefix = r.required("out", a.out)?;
    let golden = r.optional("golden", a.golden.map(|p| display_path(&p)))?;
    let bless = r.switch("bless", a.bless)?;
    print_resolved("attend", r)?;
    if bless && golden.is_none() {
        return Err(CliError::Usage("--bless needs --golden DIR".into()));
    }

    let encoder = Encoder::load(&ckpt)?;
    let scene = Scene::from_image_and_mask(read_image(&image)?, read_image(&mask)?)?;
    if scene.size() != encoder.config().input_size {
        return Err(CliError::Runtime(format!(
            "image is {0}×{0} but the checkpoint expects {1}×{1}",
            scene.size(),
            encoder.config().input_size
        )));
    }
    let map = attend_map(&encoder, &scene, mode.signal())?;
    let side = scene.size();
    let raw = upsample_bilinear(&map.raw, side, side);
    let soft = upsample_bilinear(&map.softened, side, side);
    let seeds = grabcut_seeds(&raw, SEED_FOREGROUND, SEED_BACKGROUND).to_tensor();
    for (suffix, tensor) in [("raw", &raw), ("soft", &soft), ("seeds", &seeds)] {
        let path = PathBuf::from(format!("{prefix}_{suffix}.pgm"));
        write_image(&path, tensor)?;
        if let Some(dir) = &golden {
            compare_golden(Path::new(dir), &format!("{mode}_{suffix}.pgm"), &path, bless)?;
        }
        println!("wrote {}", path.display());
    }
    if golden.is_some() {
        println!("{}", if bless { "golden outputs blessed" } else { "golden outputs match" });
    }
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let oracle = r.switch("oracle", a.oracle)?;
    let ckpt = r.optional("ckpt", a.ckpt.map(|p| display_path(&p)))?;
    let data: PathBuf = r.required("data", a.data.map(|p| display_path(&p)))?.into();
    let out: PathBuf = r.required("out", a.out.map(|p| display_path(&p)))?.into();
    let mode = r.value("mode", a.mode, Mode::Threshold)?;
    print_resolved("eval", r)?;

    if !oracle && ckpt.is_none() {
        return Err(CliError::Usage("missing required setting --ckpt (or pass --oracle)".into()));
    }

    let scenes = read_dataset(&data)?;
    if scenes.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let encoder;
    let source: &dyn MapSource = match ckpt {
        Some(path) if !oracle => {
            encoder = Encoder::load(path)?;
            &VdaMaps {
                encoder: &encoder,
                mode: mode.signal(),
            }
        }
        _ => &MaskOracle,
    };
    let ious = scene_ious(source, &scenes, Execution::Parallel)?;
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    let mut csv = String::from("index,iou\n");
    for (i, v) in ious.iter().enumerate() {
        csv.push_str(&format!("{i},{v}\n"));
    }
    csv.push_str(&format!("mean,{mean}\n"));
    fs::write(&out, csv).map_err(|e| Error::io(&out, e))?;
    println!("mean,{mean}");
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(a.config.as_deref())?;
    let size = r.value("size", a.size, CheckSize::Tiny)?;
    let tol = r.optional("tol", a.tol)?;
    print_resolved("gradcheck", r)?;
    if tol.is_some_and(|t| t.is_nan() || t < 0.0) {
        return Err(CliError::Usage("--tol must be nonnegative".into()));
    }
    let report = run_all(size, tol)?;
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}
