//! Command implementations behind the CLI surface.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use vi2ir::data::{
    crop_back, denormalize, export_detection_dataset, load_image, load_paired_dataset, normalize,
    pad_to_multiple, save_image, write_synthetic_dataset, DatasetManifest, Direction, ImageBuf,
    RawScale, Split,
};
use vi2ir::metrics::{mean_average_precision, psnr, read_label_file, ssim, DetectionRecord};
use vi2ir::model::{ForwardMode, Generator};
use vi2ir::superres::{
    build_sr_network, load_sr_checkpoint, save_sr_checkpoint, train_sr, SrNetwork,
};
use vi2ir::training::{
    load_checkpoint, run_schedule, save_checkpoint, RunOptions, TrainState,
};
use vi2ir::{Error, Result};

use crate::config::RunConfig;

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::parse(&text).map_err(|msg| Error::Config {
        field: format!("{}", path.display()),
        reason: msg,
    })
}

#[derive(Serialize)]
struct TrainSummary {
    steps: u64,
    checkpoint: PathBuf,
    sr_checkpoint: Option<PathBuf>,
    log: PathBuf,
}

pub fn cmd_train(config_path: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(config_path)?;
    let dataset = load_paired_dataset(cfg.dataset_manifest())?;
    let out_dir = cfg.output.dir.clone();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;

    let mut state = match resume {
        Some(p) => {
            // A resumed run continues under the checkpoint's own specs and
            // schedule; the config supplies dataset and output locations.
            let st = load_checkpoint(p)?;
            eprintln!(
                "resuming from {} at step {} of {}",
                p.display(),
                st.step(),
                st.config().total_steps()
            );
            st
        }
        None => TrainState::new(
            &cfg.generator_spec(),
            &cfg.discriminator_spec(),
            &cfg.train_config().map_err(|m| Error::Config {
                field: "train".into(),
                reason: m,
            })?,
        )?,
    };

    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    run_schedule(
        &mut state,
        &dataset,
        RunOptions {
            snapshot_dir: Some(&out_dir),
            log: Some(&mut log_file),
        },
    )?;

    let ckpt_path = out_dir.join("final.ckpt");
    save_checkpoint(&state, &ckpt_path)?;

    // Optional super-resolution stage: learn 2x upsampling in the target
    // domain (high = training target, low = its exact half).
    let sr_ckpt = if cfg.superres.enabled {
        let range = state.generator().spec().value_range;
        let mut pairs = Vec::with_capacity(dataset.len());
        for sample in dataset.iter() {
            let sample = sample?;
            let high = normalize(&sample.target(dataset.direction()).data, RawScale::Unit, range)?;
            let low_t = vi2ir::nn::avg_pool_down(&high.to_batch());
            let low = ImageBuf::from_batch(&low_t, 0, range);
            pairs.push((low, high));
        }
        let channels = state.generator().spec().output_channels;
        let mut net = build_sr_network(&cfg.sr_spec(), channels, range, cfg.superres.seed)?;
        let history = train_sr(&mut net, &pairs, &cfg.sr_train_config())?;
        let sr_log = out_dir.join("sr_log.jsonl");
        let mut w = fs::File::create(&sr_log).map_err(|e| Error::io(&sr_log, e))?;
        for rec in &history {
            writeln!(w, "{}", serde_json::to_string(rec).unwrap())
                .map_err(|e| Error::io(&sr_log, e))?;
        }
        let p = out_dir.join("sr.ckpt");
        save_sr_checkpoint(&net, &p)?;
        Some(p)
    } else {
        None
    };

    let summary = TrainSummary {
        steps: state.step(),
        checkpoint: ckpt_path,
        sr_checkpoint: sr_ckpt,
        log: log_path,
    };
    let spath = out_dir.join("summary.json");
    fs::write(&spath, serde_json::to_string_pretty(&summary).unwrap())
        .map_err(|e| Error::io(&spath, e))?;
    println!(
        "training complete: {} steps, checkpoint at {}",
        summary.steps,
        summary.checkpoint.display()
    );
    Ok(())
}

/// One image through the full inference pipeline: normalize, pad, translate,
/// crop, optionally super-resolve, denormalize.
fn translate_image(
    gen: &Generator,
    sr: Option<&SrNetwork>,
    img: &ImageBuf,
) -> Result<ImageBuf> {
    let range = gen.spec().value_range;
    let norm = normalize(&img.data, RawScale::Unit, range)?;
    let (padded, rec) = pad_to_multiple(&norm, gen.spec().size_multiple())?;
    let y = gen.forward(&padded, ForwardMode::Full)?;
    let mut y = crop_back(&y, rec);
    if let Some(net) = sr {
        y = net.forward(&y)?;
    }
    Ok(ImageBuf::new(denormalize(&y, RawScale::Unit), (0.0, 1.0)))
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

pub struct TranslateArgs<'a> {
    pub checkpoint: &'a Path,
    pub input: Option<&'a Path>,
    pub dataset: Option<&'a Path>,
    pub split: Split,
    pub direction: Direction,
    pub output: &'a Path,
    pub superres: Option<&'a Path>,
}

pub fn cmd_translate(args: TranslateArgs) -> Result<()> {
    let state = load_checkpoint(args.checkpoint)?;
    let gen = state.generator();
    let sr = match args.superres {
        Some(p) => Some(load_sr_checkpoint(p)?),
        None => None,
    };

    match (args.input, args.dataset) {
        (Some(input), None) => {
            fs::create_dir_all(args.output).map_err(|e| Error::io(args.output, e))?;
            let stems = png_stems(input)?;
            let mut translated = 0usize;
            let mut skipped = 0usize;
            for stem in &stems {
                let src_path = input.join(format!("{stem}.png"));
                let img = match load_image(&src_path) {
                    Ok(i) => i,
                    Err(e) => {
                        eprintln!("warning: skipping {}: {e}", src_path.display());
                        skipped += 1;
                        continue;
                    }
                };
                let out = translate_image(gen, sr.as_ref(), &img)?;
                save_image(&out, &args.output.join(format!("{stem}.png")))?;
                translated += 1;
            }
            println!("{translated} translated, {skipped} skipped");
            Ok(())
        }
        (None, Some(root)) => {
            let ds = load_paired_dataset(DatasetManifest {
                root: root.to_path_buf(),
                direction: args.direction,
                split: args.split,
            })?;
            let sr_ref = sr.as_ref();
            let manifest = export_detection_dataset(
                &ds,
                |img| translate_image(gen, sr_ref, img),
                args.output,
            )?;
            println!(
                "{} translated, {} skipped (missing labels)",
                manifest.exported,
                manifest.skipped_missing_labels.len()
            );
            Ok(())
        }
        _ => Err(Error::Precondition(
            "pass exactly one of --input (flat image dir) or --dataset (paired layout)".into(),
        )),
    }
}

#[derive(Serialize)]
struct PerImageMetrics {
    id: String,
    ssim: f64,
    psnr: f64,
}

#[derive(Serialize)]
struct EvaluateReport {
    mean_ssim: f64,
    mean_psnr: f64,
    sample_count: usize,
    per_image: Vec<PerImageMetrics>,
    excluded_generated_only: Vec<String>,
    excluded_reference_only: Vec<String>,
}

pub fn cmd_evaluate(generated: &Path, reference: &Path, out: &Path) -> Result<()> {
    let gen_set: BTreeSet<String> = png_stems(generated)?.into_iter().collect();
    let ref_set: BTreeSet<String> = png_stems(reference)?.into_iter().collect();
    let common: Vec<String> = gen_set.intersection(&ref_set).cloned().collect();
    if common.is_empty() {
        return Err(Error::Precondition(format!(
            "no matching filenames between {} and {}; nothing scored",
            generated.display(),
            reference.display()
        )));
    }
    let mut per_image = Vec::with_capacity(common.len());
    let mut ssim_sum = 0.0;
    let mut psnr_sum = 0.0;
    for id in &common {
        let g = load_image(&generated.join(format!("{id}.png")))?;
        let r = load_image(&reference.join(format!("{id}.png")))?;
        let s = ssim(&g, &r)
            .map_err(|e| Error::Precondition(format!("{id}: {e}")))?;
        let p = psnr(&g, &r)
            .map_err(|e| Error::Precondition(format!("{id}: {e}")))?;
        ssim_sum += s;
        psnr_sum += p;
        per_image.push(PerImageMetrics {
            id: id.clone(),
            ssim: s,
            psnr: p,
        });
    }
    let report = EvaluateReport {
        mean_ssim: ssim_sum / common.len() as f64,
        mean_psnr: psnr_sum / common.len() as f64,
        sample_count: common.len(),
        per_image,
        excluded_generated_only: gen_set.difference(&ref_set).cloned().collect(),
        excluded_reference_only: ref_set.difference(&gen_set).cloned().collect(),
    };
    fs::write(out, serde_json::to_string_pretty(&report).unwrap())
        .map_err(|e| Error::io(out, e))?;
    println!(
        "mean SSIM {:.4}, mean PSNR {:.3} dB over {} pairs ({} unmatched excluded)",
        report.mean_ssim,
        report.mean_psnr,
        report.sample_count,
        report.excluded_generated_only.len() + report.excluded_reference_only.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct DetectionEvalReport {
    map50: f64,
    map50_pct: f64,
    iou_thresh: f64,
    per_class_ap: std::collections::BTreeMap<u32, f64>,
    prediction_count: usize,
    ground_truth_count: usize,
    empty_ground_truth: bool,
}

fn txt_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn cmd_eval_detections(
    predictions: &Path,
    ground_truth: &Path,
    iou_thresh: f64,
    out: &Path,
) -> Result<()> {
    let mut gts: Vec<DetectionRecord> = Vec::new();
    for id in txt_stems(ground_truth)? {
        gts.extend(read_label_file(
            &ground_truth.join(format!("{id}.txt")),
            &id,
            false,
        )?);
    }
    let mut preds: Vec<DetectionRecord> = Vec::new();
    for id in txt_stems(predictions)? {
        preds.extend(read_label_file(
            &predictions.join(format!("{id}.txt")),
            &id,
            true,
        )?);
    }
    let rep = mean_average_precision(&preds, &gts, iou_thresh)?;
    let map50 = rep.map50.unwrap_or(0.0);
    let report = DetectionEvalReport {
        map50,
        map50_pct: 100.0 * map50,
        iou_thresh,
        per_class_ap: rep.per_class_ap,
        prediction_count: preds.len(),
        ground_truth_count: gts.len(),
        empty_ground_truth: rep.empty_ground_truth,
    };
    fs::write(out, serde_json::to_string_pretty(&report).unwrap())
        .map_err(|e| Error::io(out, e))?;
    println!(
        "mAP@{:.2} = {:.2}% over {} predictions / {} ground truths",
        iou_thresh, report.map50_pct, report.prediction_count, report.ground_truth_count
    );
    if report.empty_ground_truth {
        eprintln!("warning: ground truth is empty; mAP defined as 0");
    }
    Ok(())
}

pub fn cmd_gen_synthetic(
    config: Option<&Path>,
    out: &Path,
    count: usize,
    seed: Option<u64>,
    split: Split,
) -> Result<()> {
    let cfg = match config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let mut recipe = cfg.synthesis_recipe();
    if let Some(s) = seed {
        recipe.seed = s;
    }
    let ids = write_synthetic_dataset(&recipe, count, split, out)?;
    println!("wrote {} pairs under {}", ids.len(), out.display());
    Ok(())
}
