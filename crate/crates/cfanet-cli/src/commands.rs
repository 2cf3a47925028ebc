//! Subcommand implementations. Every command that produces artifacts writes
//! them under a run directory together with `config.json`, the fully
//! resolved configuration that produced them.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use cfanet::experiments::{ablate as run_ablate, AblationAxis, DatasetRecipe, RunSpec};
use cfanet::groundtruth::{compute_class_thresholds, make_attention_targets, render_annotation};
use cfanet::io::{
    load_dataset, read_manifest, write_density, write_image, write_manifest, Image, Sample,
};
use cfanet::losses::full_graph_check_with;
use cfanet::metrics::{evaluate, EvalConfig};
use cfanet::model::build;
use cfanet::tensor::gradcheck::{op_checks, GradCheckConfig};
use cfanet::train::{load_checkpoint, save_checkpoint, train as run_train, OptimizerState};

use crate::config::RunConfig;
use crate::{AblateData, CliError, EvalArgs, GengtArgs, GradcheckArgs, SynthArgs, TrainArgs};

// ── run directories ──────────────────────────────────────────────────────

/// `--out` verbatim, or a fresh `runs/<name>-<unix-seconds>` directory.
fn resolve_out(flag: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    let dir = match flag {
        Some(path) => path.clone(),
        None => {
            let stamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let base = PathBuf::from(format!("runs/{name}-{stamp}"));
            let mut dir = base.clone();
            let mut n = 1;
            while dir.exists() {
                n += 1;
                dir = PathBuf::from(format!("{}-{n}", base.display()));
            }
            dir
        }
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(fs::write(path, text)?)
}

fn echo_config(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    write_json(&out.join("config.json"), cfg)
}

// ── synth ────────────────────────────────────────────────────────────────

pub fn synth(cfg: &RunConfig, args: &SynthArgs, out: &Option<PathBuf>) -> Result<(), CliError> {
    let mut recipe = match args.preset.as_deref() {
        None | Some("mixed") => DatasetRecipe::default(),
        Some("cluttered") => DatasetRecipe::cluttered(8, 0),
        Some(other) => {
            return Err(CliError::Usage(format!(
                "unknown preset `{other}` (expected mixed, cluttered)"
            )))
        }
    };
    recipe.seed = cfg.seed;
    if let Some(n) = args.n_images {
        recipe.n_images = n;
    }
    if let Some(w) = args.width {
        recipe.width = w;
    }
    if let Some(h) = args.height {
        recipe.height = h;
    }
    if let Some(lo) = args.people_min {
        recipe.people.0 = lo;
    }
    if let Some(hi) = args.people_max {
        recipe.people.1 = hi;
    }
    if let Some(layouts) = &args.layouts {
        recipe.layouts = layouts.clone();
    }
    if let Some(backgrounds) = &args.backgrounds {
        recipe.backgrounds = backgrounds.clone();
    }
    if let Some(lo) = args.radius_min {
        recipe.head_radius_range.0 = lo;
    }
    if let Some(hi) = args.radius_max {
        recipe.head_radius_range.1 = hi;
    }

    let samples = recipe.build()?;
    let out = resolve_out(out, "synth")?;
    let mut annotations = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let name = format!("scene_{i:03}.ppm");
        write_image(out.join(&name), &sample.image)?;
        let mut ann = sample.annotation.clone();
        ann.image_id = name;
        annotations.push(ann);
    }
    write_manifest(out.join("manifest.json"), &annotations)?;
    write_json(&out.join("recipe.json"), &recipe)?;
    echo_config(&out, cfg)?;
    println!(
        "wrote {} scenes ({} heads) to {}",
        annotations.len(),
        annotations.iter().map(|a| a.points.len()).sum::<usize>(),
        out.display()
    );
    Ok(())
}

// ── gengt ────────────────────────────────────────────────────────────────

pub fn gengt(cfg: &RunConfig, args: &GengtArgs, out: &Option<PathBuf>) -> Result<(), CliError> {
    let manifest = cfg.manifest_path(&args.manifest)?;
    let k = args.k.unwrap_or(cfg.k);
    let annotations = read_manifest(&manifest)?;
    if annotations.is_empty() {
        return Err(CliError::Data(format!("{manifest}: empty manifest")));
    }
    let maps = annotations
        .iter()
        .map(render_annotation)
        .collect::<Result<Vec<_>, _>>()?;
    let thresholds = compute_class_thresholds(&maps, k)?;

    let out = resolve_out(out, "gengt")?;
    for (i, (ann, dm)) in annotations.iter().zip(&maps).enumerate() {
        let stem = Path::new(&ann.image_id)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("img_{i:03}"));
        write_density(out.join(format!("{stem}.dmap")), dm)?;
        let targets = make_attention_targets(dm, &thresholds, k)?;
        let cam = Image::new(
            dm.width,
            dm.height,
            1,
            targets.cam.data.iter().map(|&v| v * 255).collect(),
        )?;
        write_image(out.join(format!("{stem}_cam.pgm")), &cam)?;
        // Raw class indices (0..k-1); dark on screen but exact.
        let fam = Image::new(dm.width, dm.height, 1, targets.fam.data.clone())?;
        write_image(out.join(format!("{stem}_fam.pgm")), &fam)?;
    }
    write_json(
        &out.join("thresholds.json"),
        &serde_json::json!({ "k": k, "thresholds": thresholds }),
    )?;
    echo_config(&out, cfg)?;
    println!(
        "wrote {} density maps and attention rasters to {}",
        maps.len(),
        out.display()
    );
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────────

pub fn train(cfg: &RunConfig, args: &TrainArgs, out: &Option<PathBuf>) -> Result<(), CliError> {
    let manifest = cfg.manifest_path(&args.manifest)?;
    let samples = load_dataset(&manifest)?;
    let train_cfg = cfg.train();
    let mut params = build(&cfg.model(), train_cfg.seed)?;
    let mut state = OptimizerState::new(&params);
    let reports = run_train(&mut params, &mut state, &samples, &train_cfg)?;

    let out = resolve_out(out, "train")?;
    let ckpt = out.join("checkpoint.bin");
    save_checkpoint(&ckpt, &params, &state)?;
    let mut lines = String::new();
    for report in &reports {
        lines.push_str(&serde_json::to_string(report).expect("report serializes"));
        lines.push('\n');
    }
    fs::write(out.join("epochs.jsonl"), lines)?;
    echo_config(&out, cfg)?;
    match reports.last() {
        Some(last) => println!("{last}"),
        None => println!("initialized without training (0 epochs)"),
    }
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

// ── eval ─────────────────────────────────────────────────────────────────

pub fn eval(cfg: &RunConfig, args: &EvalArgs, out: &Option<PathBuf>) -> Result<(), CliError> {
    let manifest = cfg.manifest_path(&args.manifest)?;
    let checkpoint = cfg.checkpoint_path(&args.checkpoint)?;
    let samples = load_dataset(&manifest)?;
    let (params, _) = load_checkpoint(Path::new(&checkpoint))?;
    let eval_cfg = EvalConfig {
        expansion: args.expansion.unwrap_or(cfg.expansion),
        ..EvalConfig::default()
    };
    let (records, summary) = evaluate(&params, &samples, &eval_cfg)?;

    let out = resolve_out(out, "eval")?;
    write_json(&out.join("records.json"), &records)?;
    write_json(&out.join("summary.json"), &summary)?;
    echo_config(&out, cfg)?;
    println!(
        "images {}  mae {:.4}  rmse {:.4}  ssim {:.4}  psnr {:.2}  r_bg {:.4}",
        summary.n_images,
        summary.mae,
        summary.rmse,
        summary.mean_ssim,
        summary.mean_psnr,
        summary.mean_bg_ratio
    );
    Ok(())
}

// ── gradcheck ────────────────────────────────────────────────────────────

pub fn gradcheck(cfg: &RunConfig, args: &GradcheckArgs) -> Result<(), CliError> {
    let base = GradCheckConfig::default();
    let op_cfg = GradCheckConfig {
        step: args.step.unwrap_or(base.step),
        tol: args.tol.unwrap_or(base.tol),
        seed: cfg.seed,
        ..base
    };
    let mut failures = 0usize;
    if !args.graph_only {
        for check in op_checks() {
            let report = check.run_with(&op_cfg, cfg.seed)?;
            println!("op {:<24} {report}", check.name);
            failures += usize::from(!report.passed());
        }
    }
    let graph_cfg = GradCheckConfig {
        max_elems_per_input: Some(args.max_elems.unwrap_or(4)),
        ..op_cfg
    };
    let report = full_graph_check_with(&graph_cfg)?;
    println!("{:<27} {report}", "full loss graph");
    failures += usize::from(!report.passed());
    if failures > 0 {
        return Err(CliError::Numeric(format!(
            "{failures} gradient check(s) failed"
        )));
    }
    Ok(())
}

// ── ablate / compare-losses ──────────────────────────────────────────────

pub fn ablate(
    cfg: &RunConfig,
    axis: AblationAxis,
    data: &AblateData,
    out: &Option<PathBuf>,
) -> Result<(), CliError> {
    let train_set: Vec<Sample> = match &data.manifest {
        Some(path) => load_dataset(path)?,
        None => {
            let size = data.image_size.unwrap_or(96);
            DatasetRecipe {
                n_images: data.train_images.unwrap_or(8),
                width: size,
                height: size,
                seed: cfg.seed,
                ..DatasetRecipe::default()
            }
            .build()?
        }
    };
    let held_out: Option<Vec<Sample>> = match &data.held_out_manifest {
        Some(path) => Some(load_dataset(path)?),
        None => match data.held_out_images.unwrap_or(8) {
            0 => None,
            n => {
                let mut recipe = DatasetRecipe::cluttered(n, cfg.seed.wrapping_add(1));
                let size = data.image_size.unwrap_or(96);
                recipe.width = size;
                recipe.height = size;
                Some(recipe.build()?)
            }
        },
    };
    let seeds = data.seeds.clone().unwrap_or_else(|| vec![1]);
    let base = RunSpec {
        model: cfg.model(),
        train: cfg.train(),
    };
    let report = run_ablate(axis, &base, &train_set, held_out.as_deref(), &seeds)?;

    let out = resolve_out(out, &format!("ablate-{axis}"))?;
    write_json(&out.join("ablation.json"), &report)?;
    let table = report.text_table();
    fs::write(out.join("ablation.txt"), &table)?;
    echo_config(&out, cfg)?;
    print!("{table}");
    println!("report: {}", out.join("ablation.json").display());
    Ok(())
}
