use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use image::{GrayImage, Luma};
use plutonet::data::{self, Pair};
use plutonet::decoders::{ForwardMode, NetworkConfig, PlutoNet};
use plutonet::metrics::{evaluate, EvalConfig, MetricsReport};
use plutonet::trainer::{self, load_checkpoint, LoadedData, TrainHistory};
use plutonet::{
    BackboneVariant, Error, RunConfig, AUXILIARY_PARAMETER_BUDGET, REFERENCE_AUXILIARY_PARAMETERS,
    REFERENCE_TOTAL_PARAMETERS,
};

use crate::overlay;
use crate::Command;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) => 1,
            Error::Numeric(_) => 3,
            _ => 2,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<candle_core::Error> for Failure {
    fn from(e: candle_core::Error) -> Self {
        Error::from(e).into()
    }
}

type Outcome = std::result::Result<(), Failure>;

pub fn run(command: Command, extra: Vec<String>) -> Outcome {
    let no_extra = |name: &str| {
        if extra.is_empty() {
            Ok(())
        } else {
            Err(Failure::usage(format!("`{name}` takes no configuration overrides, got {extra:?}")))
        }
    };
    match command {
        Command::Synth { n, seed, out, size } => {
            no_extra("synth")?;
            synth(n, seed, &out, size)
        }
        Command::Train(a) => {
            let cfg = resolve(Some(&a.config), &a.set, &extra)?;
            train(&cfg)
        }
        Command::Ablate(a) => {
            let cfg = resolve(Some(&a.config), &a.set, &extra)?;
            ablate(&cfg)
        }
        Command::Eval {
            checkpoint,
            data_dir,
            split,
            threshold,
            batch_size,
            out,
        } => {
            no_extra("eval")?;
            eval(&checkpoint, data_dir.as_deref(), &split, threshold, batch_size, out.as_deref())
        }
        Command::Predict {
            checkpoint,
            images,
            out,
            threshold,
            masks,
            batch_size,
        } => {
            no_extra("predict")?;
            predict(&checkpoint, &images, &out, threshold, masks.as_deref(), batch_size)
        }
        Command::Params {
            config,
            checkpoint,
            names,
            set,
        } => {
            let network = match &checkpoint {
                Some(dir) => {
                    if !set.is_empty() || !extra.is_empty() {
                        return Err(Failure::usage("overrides cannot be combined with --checkpoint"));
                    }
                    trainer::read_manifest(dir)?.network
                }
                None => resolve(config.as_deref(), &set, &extra)?.network(),
            };
            params(&network, names)
        }
        Command::Config { config, set } => {
            let cfg = resolve(config.as_deref(), &set, &extra)?;
            print!("{}", cfg.echo()?);
            Ok(())
        }
    }
}

fn resolve(path: Option<&Path>, set: &[String], extra: &[String]) -> std::result::Result<RunConfig, Failure> {
    let base = match path {
        Some(p) if !p.is_file() => {
            return Err(Failure::usage(format!("configuration file {} does not exist", p.display())));
        }
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    let overrides: Vec<&String> = set.iter().chain(extra).collect();
    Ok(base.with_overrides(&overrides)?)
}

fn synth(n: usize, seed: u64, out: &Path, size: u32) -> Outcome {
    let m = data::generate_synthetic(n, seed, out, size)?;
    println!("wrote {} synthetic pairs (seed {}) to {}", m.n, m.seed, out.display());
    Ok(())
}

fn load(cfg: &RunConfig) -> std::result::Result<LoadedData, Failure> {
    let d = trainer::load_data(cfg)?;
    log::info!(
        "{}: {} train / {} validation / {} test images",
        cfg.data.name,
        d.train.len(),
        d.val.len(),
        d.test.len()
    );
    Ok(d)
}

fn summarize(history: &TrainHistory) {
    let best = history.best();
    println!(
        "stopped after {} epochs ({:?}); best epoch {} with validation loss {:.6} and Dice {:.4}",
        history.epochs.len(),
        history.stop_reason,
        history.best_epoch,
        best.val_total,
        best.val_dice
    );
}

fn write_report(report: &MetricsReport, dir: &Path, stem: &str) -> Outcome {
    report.write_csv(&dir.join(format!("{stem}.csv")))?;
    let txt = dir.join(format!("{stem}.txt"));
    std::fs::write(&txt, report.to_table()).map_err(|e| Failure::from(Error::Io { path: txt, source: e }))?;
    Ok(())
}

fn train(cfg: &RunConfig) -> Outcome {
    let data = load(cfg)?;
    let resolved = cfg.write_resolved(&cfg.output_dir)?;
    log::info!("resolved configuration written to {}", resolved.display());
    let [no, with] = trainer::ablation_labels(&cfg.data.name);
    let label = if cfg.train.consistency_enabled { with } else { no };
    let outcome = trainer::train_run(cfg, &data, &cfg.output_dir, &label)?;
    summarize(&outcome.history);
    if !outcome.report.rows.is_empty() {
        write_report(&outcome.report, &cfg.output_dir, "test_metrics")?;
        print!("{}", outcome.report.to_table());
    }
    Ok(())
}

fn ablate(cfg: &RunConfig) -> Outcome {
    let data = load(cfg)?;
    cfg.write_resolved(&cfg.output_dir)?;
    let outcome = trainer::run_ablation(cfg, &data)?;
    for (name, arm) in [("no consistency", &outcome.without), ("with consistency", &outcome.with)] {
        print!("{name}: ");
        summarize(&arm.history);
    }
    print!("{}", outcome.report.to_table());
    Ok(())
}

fn eval(
    checkpoint: &Path,
    data_dir: Option<&Path>,
    split: &str,
    threshold: Option<f64>,
    batch_size: usize,
    out: Option<&Path>,
) -> Outcome {
    if !checkpoint.is_dir() {
        return Err(Failure::usage(format!("checkpoint directory {} does not exist", checkpoint.display())));
    }
    let (model, manifest) = load_checkpoint(checkpoint, None)?;
    let info = &manifest.split;
    let root: PathBuf = match (data_dir, &info.data_root) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(d)) => d.clone(),
        (None, None) => return Err(Failure::usage("no --data-dir given and the checkpoint records none")),
    };
    let samples = data::load_corpus(&root, false)?;
    let wanted: Option<&Vec<String>> = match split {
        "all" => None,
        "train" => Some(&info.train_ids),
        "val" => Some(&info.val_ids),
        "test" => Some(&info.test_ids),
        other => return Err(Failure::usage(format!("unknown split `{other}`; use train, val, test or all"))),
    };
    let selected: Vec<data::Sample> = match wanted {
        None => samples,
        Some(ids) => {
            let by_id: BTreeMap<&str, &data::Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
            ids.iter()
                .map(|id| {
                    by_id.get(id.as_str()).map(|s| (*s).clone()).ok_or_else(|| {
                        Error::Data(format!("sample {id} of the {split} split is not in {}", root.display()))
                    })
                })
                .collect::<plutonet::Result<_>>()?
        }
    };
    if selected.is_empty() {
        return Err(Error::Data(format!("the {split} split is empty")).into());
    }
    let pairs = data::load_pairs(&selected)?;
    let cfg = EvalConfig {
        threshold: threshold.unwrap_or(manifest.threshold),
        batch_size,
    };
    let ev = evaluate(&model, &pairs, &cfg, &Default::default())?;
    let mut report = MetricsReport::new(cfg.threshold);
    let label = if info.dataset.is_empty() {
        split.to_string()
    } else {
        format!("{} {split}", info.dataset)
    };
    report.extend(ev.rows(&label));
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io { path: dir.into(), source: e }))?;
        write_report(&report, dir, "metrics")?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn list_images(dir: &Path) -> plutonet::Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::Io { path: dir.into(), source: e })?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn open_image(path: &Path) -> plutonet::Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

fn save(img: image::DynamicImage, path: &Path) -> plutonet::Result<()> {
    img.save(path).map_err(|e| Error::Image { path: path.into(), source: e })
}

fn predict(
    checkpoint: &Path,
    images: &Path,
    out: &Path,
    threshold: f64,
    masks: Option<&Path>,
    batch_size: usize,
) -> Outcome {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Failure::usage(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    if batch_size == 0 {
        return Err(Failure::usage("batch size must be at least 1"));
    }
    if !checkpoint.is_dir() {
        return Err(Failure::usage(format!("checkpoint directory {} does not exist", checkpoint.display())));
    }
    let (model, _) = load_checkpoint(checkpoint, None)?;
    let files = list_images(images)?;
    if files.is_empty() {
        return Err(Error::Data(format!("no png or jpg images in {}", images.display())).into());
    }
    std::fs::create_dir_all(out).map_err(|e| Failure::from(Error::Io { path: out.into(), source: e }))?;
    let side = plutonet::backbone::INPUT_SIZE as u32;
    let plane = (side * side) as usize;
    for chunk in files.chunks(batch_size) {
        let inputs: Vec<Pair> = chunk
            .iter()
            .map(|(id, path)| {
                Ok(Pair {
                    id: id.clone(),
                    image: data::image_to_input(open_image(path)?.to_rgb8()),
                    mask: vec![0.0; plane],
                })
            })
            .collect::<plutonet::Result<_>>()?;
        let refs: Vec<&Pair> = inputs.iter().collect();
        let (batch, _) = data::to_batch(&refs, DType::F32, &Device::Cpu)?;
        let probs = model
            .forward(&batch, ForwardMode::Eval)?
            .main
            .into_tensor()
            .flatten_from(1)?
            .to_vec2::<f32>()?;
        for (pair, p) in inputs.iter().zip(&probs) {
            let prob = GrayImage::from_fn(side, side, |x, y| {
                Luma([(p[(y * side + x) as usize] * 255.0).round().clamp(0.0, 255.0) as u8])
            });
            let mask = GrayImage::from_fn(side, side, |x, y| {
                Luma([if p[(y * side + x) as usize] as f64 >= threshold { 255 } else { 0 }])
            });
            let truth = match masks {
                Some(dir) => ground_truth(dir, &pair.id)?,
                None => None,
            };
            let (rgb, _) = pair.to_images();
            let over = overlay::render(&rgb, &mask, truth.as_ref());
            save(prob.into(), &out.join(format!("{}_prob.png", pair.id)))?;
            save(mask.into(), &out.join(format!("{}_mask.png", pair.id)))?;
            save(over.into(), &out.join(format!("{}_overlay.png", pair.id)))?;
        }
    }
    println!("wrote predictions for {} images to {}", files.len(), out.display());
    Ok(())
}

/// The ground-truth mask for `id`, resized and binarized like training data.
fn ground_truth(dir: &Path, id: &str) -> plutonet::Result<Option<GrayImage>> {
    let path = dir.join(format!("{id}.png"));
    if !path.is_file() {
        return Ok(None);
    }
    let m = open_image(&path)?.to_luma8();
    let blank = image::RgbImage::new(m.width(), m.height());
    let (_, mask) = data::preprocess_images(id, blank, m)?.to_images();
    Ok(Some(mask))
}

fn params(network: &NetworkConfig, names: bool) -> Outcome {
    let model = PlutoNet::new(network, 0, DType::F32, &Device::Cpu)?;
    let b = model.count_parameters();
    println!("backbone: {:?}", network.backbone.variant);
    println!("{:<18} {:>12}", "component", "parameters");
    for (name, n) in b.rows() {
        println!("{name:<18} {n:>12}");
    }
    println!("{:<18} {:>12}", "total", b.total);
    println!("non-trainable buffers: {}", model.store().buffer_count());
    let verdict = if b.auxiliary <= AUXILIARY_PARAMETER_BUDGET { "within" } else { "OVER" };
    println!(
        "auxiliary decoder: {} parameters, {verdict} the {AUXILIARY_PARAMETER_BUDGET}-parameter budget (reference size {REFERENCE_AUXILIARY_PARAMETERS})",
        b.auxiliary
    );
    let standard_total = if network.backbone.variant == BackboneVariant::Standard {
        b.total
    } else {
        let mut s = network.clone();
        s.backbone.variant = BackboneVariant::Standard;
        s.backbone.weights_path = None;
        PlutoNet::new(&s, 0, DType::F32, &Device::Cpu)?.count_parameters().total
    };
    println!(
        "standard-backbone total: {standard_total} (reference figure {REFERENCE_TOTAL_PARAMETERS}, difference {:+})",
        standard_total as i64 - REFERENCE_TOTAL_PARAMETERS as i64
    );
    if names {
        for p in model.store().describe() {
            let kind = if p.trainable { "param" } else { "buffer" };
            println!("{:<6} {:<48} {:?}", kind, p.name, p.shape);
        }
    }
    Ok(())
}
