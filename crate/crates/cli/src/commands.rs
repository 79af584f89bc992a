use std::path::{Path, PathBuf};

use dcsau_core::analysis::CostReport;
use dcsau_core::data::{
    netpbm, read_ids, split, synth_dataset, write_dataset, write_ids, AugmentConfig, Manifest, Sample, SplitSpec,
};
use dcsau_core::kernels::resize_bilinear;
use dcsau_core::metrics::scored_classes;
use dcsau_core::model::predict_mask;
use dcsau_core::selftest::{self, Fault, Options};
use dcsau_core::train::{self as trainer, TrainConfig};
use dcsau_core::{Error, Model, ModelConfig, Result};

use crate::config::parse_input;
use crate::{EvalArgs, FaultArg, PredictArgs, SelftestArgs, SummaryArgs, TrainArgs};

const DEFAULT_EPOCHS: usize = 100;

pub fn summary(args: &SummaryArgs) -> Result<u8> {
    let config = args.model.resolve(None)?;
    let (c, h, w) = parse_input(&args.input)?;
    config.check_input(c, h, w)?;
    let report = CostReport::new(&config, h, w)?;
    print!("{}", report.render());
    if let Some(path) = &args.json {
        std::fs::write(path, report.to_json() + "\n")?;
    }
    Ok(0)
}

fn config_beside(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join("config.json")
}

fn load_model(config: &ModelConfig, checkpoint: &Path) -> Result<Model> {
    let mut model = Model::build(config, 0)?;
    model.load(checkpoint)?;
    Ok(model)
}

fn load_split(manifest: &Manifest, config: &ModelConfig, args: &TrainArgs) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let spec = SplitSpec {
        seed: args.seed,
        ..SplitSpec::default()
    };
    let parts = split(&manifest.ids(), &spec)?;
    let dir = args.out.join("split");
    std::fs::create_dir_all(&dir)?;
    write_ids(&dir.join("train.txt"), &parts.train)?;
    write_ids(&dir.join("valid.txt"), &parts.valid)?;
    write_ids(&dir.join("test.txt"), &parts.test)?;
    let classes = scored_classes(config.num_classes);
    let size = Some((args.size, args.size));
    Ok((
        manifest.select(&parts.train)?.load_samples(classes, size)?,
        manifest.select(&parts.valid)?.load_samples(classes, size)?,
    ))
}

pub fn train(args: &TrainArgs) -> Result<u8> {
    let config = args.model.resolve(None)?;
    config.check_input(3, args.size, args.size)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.json"), config.to_json() + "\n")?;

    let (train_set, valid_set) = match (&args.manifest, args.synthetic) {
        (Some(path), _) => load_split(&Manifest::load(path)?, &config, args)?,
        (None, Some(n)) => {
            let samples = synth_dataset(n, args.size, args.size, scored_classes(config.num_classes), args.seed)?;
            write_dataset(&args.out.join("synthetic"), &samples)?;
            (samples.clone(), samples)
        }
        (None, None) => return Err(Error::Config("either --manifest or --synthetic is required".into())),
    };

    let run = TrainConfig {
        epochs: args
            .epochs
            .unwrap_or(if args.steps.is_some() { usize::MAX } else { DEFAULT_EPOCHS }),
        max_steps: args.steps,
        batch_size: args.batch_size,
        lr: args.lr,
        seed: args.seed,
        augment: args.augment.then(AugmentConfig::default),
        threshold: args.threshold,
        ..TrainConfig::default()
    };
    let mut model = Model::build(&config, args.seed)?;
    let log = trainer::train(&mut model, &train_set, &valid_set, &run, Some(&args.out))?;
    for r in &log.epochs {
        println!(
            "epoch {:>4}  step {:>6}  train {:.4}  valid {:.4}  f1 {:.4}  miou {:.4}  lr {:.1e}",
            r.epoch, r.step, r.train_loss, r.valid_loss, r.valid.f1, r.valid.miou, r.lr
        );
    }
    println!("{} steps, outputs in {}", log.step_losses.len(), args.out.display());
    Ok(0)
}

pub fn eval(args: &EvalArgs) -> Result<u8> {
    let config = args.model.resolve(Some(&config_beside(&args.checkpoint)))?;
    let mut model = load_model(&config, &args.checkpoint)?;
    let mut manifest = Manifest::load(&args.manifest)?;
    if let Some(ids) = &args.ids {
        manifest = manifest.select(&read_ids(ids)?)?;
    }
    let samples = manifest.load_samples(scored_classes(config.num_classes), args.size.map(|s| (s, s)))?;
    let report = trainer::evaluate(&mut model, &samples, args.threshold)?;
    print!("{}", report.render_table());
    let path = args
        .report
        .clone()
        .unwrap_or_else(|| args.checkpoint.with_file_name("eval.json"));
    std::fs::write(path, report.to_json() + "\n")?;
    Ok(0)
}

fn predict_one(model: &mut Model, args: &PredictArgs, image: &Path) -> Result<PathBuf> {
    let mut x = netpbm::load_ppm(image)?;
    if let Some(s) = args.size {
        x = resize_bilinear(&x, s, s);
    }
    let shape = x.shape();
    model.config().check_input(shape.c, shape.h, shape.w)?;
    let mut mask = predict_mask(&model.infer(&x)?, args.threshold);
    if model.config().num_classes == 1 {
        for v in mask.data_mut() {
            *v *= 255;
        }
    }
    let stem = image
        .file_stem()
        .ok_or_else(|| Error::Data(format!("{}: no file name", image.display())))?;
    let out = args.out.join(stem).with_extension("pgm");
    netpbm::save_pgm(&out, &mask)?;
    Ok(out)
}

pub fn predict(args: &PredictArgs) -> Result<u8> {
    let config = args.model.resolve(Some(&config_beside(&args.checkpoint)))?;
    let mut model = load_model(&config, &args.checkpoint)?;
    std::fs::create_dir_all(&args.out)?;
    let mut status = 0;
    for image in &args.images {
        match predict_one(&mut model, args, image) {
            Ok(out) => println!("{} -> {}", image.display(), out.display()),
            Err(e) => {
                eprintln!("error: {}: {e}", image.display());
                if status == 0 {
                    status = e.exit_code() as u8;
                }
            }
        }
    }
    Ok(status)
}

pub fn selftest(args: &SelftestArgs) -> Result<u8> {
    let options = Options {
        seeds: args.seeds,
        fault: args.inject_fault.map(|f| match f {
            FaultArg::ConvSign => Fault::FlipConvSign,
        }),
    };
    let checks = selftest::run(&options);
    for c in &checks {
        println!("{c}");
    }
    match checks.iter().find(|c| !c.passed()) {
        Some(first) => {
            let failed = checks.iter().filter(|c| !c.passed()).count();
            eprintln!("selftest: {failed} of {} checks failed; first: {}/{}", checks.len(), first.module, first.op);
            Ok(1)
        }
        None => {
            println!("selftest: all {} checks passed", checks.len());
            Ok(0)
        }
    }
}
