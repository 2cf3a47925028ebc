//! Acceptance gate: ten end-to-end checks covering gradient integrity, the
//! groundtruth/metric contracts, and directional desk-scale training
//! experiments. Each criterion prints one `ACCEPT <n> <name>: PASS|FAIL`
//! line; the test fails if any criterion does. Run with `--nocapture` to
//! watch progress — the training criteria dominate the runtime.

use std::fmt::Write as _;
use std::time::Instant;

use cfanet::experiments::{run, DatasetRecipe, RunSpec};
use cfanet::groundtruth::{render_annotation, PointAnnotation};
use cfanet::io::{read_density, write_density, Sample};
use cfanet::losses::{full_graph_check, ssim, structural_loss, SsimConstants};
use cfanet::metrics::{bg_ratio, mae, map_ssim, psnr, rmse, EvalRecord};
use cfanet::model::{
    build, class_weights, forward, refine_attention, AttentionMode, ForwardOptions, ModelConfig,
};
use cfanet::tensor::gradcheck::op_checks;
use cfanet::tensor::{Shape, Tape, Tensor};
use cfanet::train::{load_checkpoint, save_checkpoint, train, OptimizerState, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<(), String>;

fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    Tensor::new(
        Shape::new(1, 1, h, w),
        (0..h * w).map(|_| rng.gen::<f32>()).collect(),
    )
    .expect("dims consistent")
}

// ── 1: gradient integrity ────────────────────────────────────────────────

fn gradient_integrity() -> Verdict {
    let started = Instant::now();
    let mut bad = Vec::new();
    for check in op_checks() {
        let report = check.run(0).map_err(|e| format!("{}: {e}", check.name))?;
        if !report.passed() {
            bad.push(format!("{}: {report}", check.name));
        }
    }
    let graph = full_graph_check(4, 0).map_err(|e| format!("full graph: {e}"))?;
    if !graph.passed() {
        bad.push(format!("full graph: {graph}"));
    }
    let elapsed = started.elapsed().as_secs_f64();
    if elapsed > 60.0 {
        bad.push(format!("took {elapsed:.1}s (limit 60s)"));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(bad.join("; "))
    }
}

// ── 2: mass conservation ─────────────────────────────────────────────────

fn mass_conservation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let (w, h) = (rng.gen_range(48..=128), rng.gen_range(48..=128));
        let n = rng.gen_range(1..=200);
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen::<f64>() * w as f64, rng.gen::<f64>() * h as f64))
            .collect();
        let ann = PointAnnotation::new(format!("case-{case}"), w, h, points)
            .map_err(|e| e.to_string())?;
        let dm = render_annotation(&ann).map_err(|e| e.to_string())?;
        let mass: f64 = dm.data.iter().map(|&v| v as f64).sum();
        let err = (mass - n as f64).abs();
        if err > 1e-3 * n as f64 {
            return Err(format!(
                "case {case}: {n} points integrate to {mass:.6} (err {err:.2e})"
            ));
        }
    }
    Ok(())
}

// ── 3: ssim and structural-loss identities ───────────────────────────────

fn ssim_identities() -> Verdict {
    let consts = SsimConstants::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3030);

    for case in 0..10 {
        let x = random_map(&mut rng, 40, 52);
        let self_sim = map_ssim(&x, &x, &consts).map_err(|e| e.to_string())?;
        if (self_sim - 1.0).abs() > 1e-9 {
            return Err(format!("case {case}: ssim(x, x) = {self_sim}"));
        }
        let mut tape = Tape::<f64>::new();
        let xf = x.cast::<f64>();
        let sl = structural_loss(&mut tape, &xf, &xf, &consts)
            .map_err(|e| e.to_string())?
            .item()
            .map_err(|e| e.to_string())?;
        if sl.abs() > 1e-9 {
            return Err(format!("case {case}: structural_loss(x, x) = {sl}"));
        }
    }

    // Constant maps 0 and 1: every window has zero variance, so only the
    // stabilizing constants survive: (c1 * c2) / ((1 + c1) * c2) = c1/(1+c1).
    let zero = Tensor::zeros(Shape::new(1, 1, 88, 88));
    let one = Tensor::full(Shape::new(1, 1, 88, 88), 1.0f32);
    let v = map_ssim(&zero, &one, &consts).map_err(|e| e.to_string())?;
    let want = 0.01 / 1.01;
    if (v - want).abs() > 1e-6 {
        return Err(format!("ssim(0, 1) = {v}, want {want}"));
    }

    for pair in 0..20 {
        let x = random_map(&mut rng, 24, 24);
        let y = random_map(&mut rng, 24, 24);
        let mut t1 = Tape::new();
        let a = ssim(&mut t1, &x, &y, &consts)
            .map_err(|e| e.to_string())?
            .item()
            .map_err(|e| e.to_string())?;
        let mut t2 = Tape::new();
        let b = ssim(&mut t2, &y, &x, &consts)
            .map_err(|e| e.to_string())?
            .item()
            .map_err(|e| e.to_string())?;
        if a.to_bits() != b.to_bits() {
            return Err(format!("pair {pair}: ssim(x, y) = {a} but ssim(y, x) = {b}"));
        }
    }
    Ok(())
}

// ── 4: attention identities ──────────────────────────────────────────────

fn attention_identities() -> Verdict {
    // Forcing zero attention maps through the fusion arithmetic must equal
    // skipping fusion bit for bit.
    let config = ModelConfig {
        k: 6,
        width_mult: 0.0625,
        init_std: 0.1,
        ..ModelConfig::default()
    };
    let params = build(&config, 404).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(405);
    let image = Tensor::new(
        Shape::new(1, 3, 32, 32),
        (0..3 * 32 * 32).map(|_| rng.gen::<f32>()).collect(),
    )
    .expect("dims consistent");
    let run_mode = |attention: AttentionMode| -> Result<Vec<Vec<f32>>, String> {
        let mut tape = Tape::new();
        let out = forward(&mut tape, &params, &image, ForwardOptions { attention })
            .map_err(|e| e.to_string())?;
        Ok(out.density.iter().map(|d| d.data().to_vec()).collect())
    };
    let forced = run_mode(AttentionMode::ForceZero)?;
    let skipped = run_mode(AttentionMode::Disabled)?;
    for (stage, (f, s)) in forced.iter().zip(&skipped).enumerate() {
        let same = f.len() == s.len()
            && f.iter().zip(s).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("stage {}: zero attention is not a bit-identity", stage + 1));
        }
    }

    // A certain class-0 fine map plus a saturated-negative coarse map must
    // leave (almost) no attention.
    let k = 6;
    let (h, w) = (9, 13);
    let mut fam = vec![-30.0f32; k * h * w];
    fam[..h * w].iter_mut().for_each(|v| *v = 30.0);
    let fam = Tensor::new(Shape::new(1, k, h, w), fam).expect("dims consistent");
    let cam = Tensor::full(Shape::new(1, 1, h, w), -40.0f32);
    let mut tape = Tape::new();
    let attention =
        refine_attention(&mut tape, &fam, &cam, k).map_err(|e| e.to_string())?;
    let peak = attention.data().iter().copied().fold(0.0f32, f32::max);
    if peak >= 1e-4 {
        return Err(format!("suppressed attention peaks at {peak}"));
    }

    let weights = class_weights(6);
    if weights != vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0] {
        return Err(format!("class_weights(6) = {weights:?}"));
    }
    Ok(())
}

// ── desk-scale training harness ──────────────────────────────────────────

fn overfit_spec(seed: u64) -> RunSpec {
    RunSpec {
        model: ModelConfig {
            k: 6,
            width_mult: 0.125,
            init_std: 0.1,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 300,
            lr0: 3e-4,
            crop_fraction: 1.0,
            flip_prob: 0.0,
            seed,
            ..TrainConfig::default()
        },
    }
}

/// Shared config for the directional experiments: same architecture as the
/// overfit run, shorter budget.
fn directional_spec(seed: u64) -> RunSpec {
    let mut spec = overfit_spec(seed);
    spec.train.epochs = 60;
    spec
}

fn mean_count(samples: &[Sample]) -> f64 {
    let total: usize = samples.iter().map(|s| s.annotation.points.len()).sum();
    total as f64 / samples.len() as f64
}

fn small_scenes(mut recipe: DatasetRecipe) -> DatasetRecipe {
    recipe.width = 64;
    recipe.height = 64;
    recipe
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

// ── 5: desk-scale overfit ────────────────────────────────────────────────

fn desk_overfit() -> Verdict {
    let mut passes = 0;
    let mut detail = String::new();
    for seed in SEEDS {
        let recipe = DatasetRecipe {
            seed,
            ..DatasetRecipe::default()
        };
        let samples = recipe.build().map_err(|e| e.to_string())?;
        let threshold = 0.05 * mean_count(&samples);
        let outcome = run(&overfit_spec(seed), &samples, None).map_err(|e| e.to_string())?;
        let mae = outcome.train_eval.mae;
        let ok = mae <= threshold && outcome.seconds <= 600.0;
        passes += usize::from(ok);
        let _ = write!(
            detail,
            "seed {seed}: mae {mae:.3} vs {threshold:.3} in {:.0}s{}; ",
            outcome.seconds,
            if ok { "" } else { " [miss]" }
        );
    }
    println!("  overfit detail: {}", detail.trim_end_matches("; "));
    if passes >= 4 {
        Ok(())
    } else {
        Err(format!("{passes}/5 seeds reached the target ({detail})"))
    }
}

// ── 6: background-loss direction ─────────────────────────────────────────

fn background_loss_direction() -> Verdict {
    let train_set = small_scenes(DatasetRecipe::cluttered(6, 1021))
        .build()
        .map_err(|e| e.to_string())?;
    let held_out = small_scenes(DatasetRecipe::cluttered(32, 1022))
        .build()
        .map_err(|e| e.to_string())?;
    let mut means = [0.0f64; 2];
    for (slot, enable_bl) in [(0, true), (1, false)] {
        for seed in SEEDS {
            let mut spec = directional_spec(seed);
            spec.train.enable_bl = enable_bl;
            let outcome =
                run(&spec, &train_set, Some(&held_out)).map_err(|e| e.to_string())?;
            means[slot] += outcome.held_out_eval.expect("held out present").mean_bg_ratio;
        }
        means[slot] /= SEEDS.len() as f64;
    }
    println!(
        "  r_bg detail: enabled {:.5}, disabled {:.5}",
        means[0], means[1]
    );
    if means[0] < means[1] {
        Ok(())
    } else {
        Err(format!(
            "mean r_bg {:.5} with the background term is not below {:.5} without it",
            means[0], means[1]
        ))
    }
}

// ── 7: supervision direction ─────────────────────────────────────────────

fn supervision_direction() -> Verdict {
    let train_set = small_scenes(DatasetRecipe {
        n_images: 6,
        seed: 1031,
        ..DatasetRecipe::default()
    })
    .build()
    .map_err(|e| e.to_string())?;
    let mut means = [0.0f64; 2];
    for (slot, mask) in [(0, [true; 4]), (1, [false, false, false, true])] {
        for seed in SEEDS {
            let mut spec = directional_spec(seed);
            spec.train.supervision_mask = mask;
            let outcome = run(&spec, &train_set, None).map_err(|e| e.to_string())?;
            means[slot] += outcome.train_eval.mae;
        }
        means[slot] /= SEEDS.len() as f64;
    }
    println!(
        "  supervision detail: all stages mae {:.3}, final stage only {:.3}",
        means[0], means[1]
    );
    if means[0] <= means[1] {
        Ok(())
    } else {
        Err(format!(
            "full supervision mae {:.3} exceeds single-stage mae {:.3}",
            means[0], means[1]
        ))
    }
}

// ── 8: branch direction ──────────────────────────────────────────────────

fn branch_direction() -> Verdict {
    let train_set = small_scenes(DatasetRecipe {
        n_images: 6,
        seed: 1041,
        ..DatasetRecipe::default()
    })
    .build()
    .map_err(|e| e.to_string())?;
    let held_out = small_scenes(DatasetRecipe {
        n_images: 16,
        seed: 1042,
        ..DatasetRecipe::default()
    })
    .build()
    .map_err(|e| e.to_string())?;
    let mut means = [0.0f64; 2];
    for (slot, attention) in [(0, true), (1, false)] {
        for seed in SEEDS {
            let mut spec = directional_spec(seed);
            spec.model.use_crr = attention;
            spec.model.use_dle = attention;
            let outcome =
                run(&spec, &train_set, Some(&held_out)).map_err(|e| e.to_string())?;
            means[slot] += outcome.held_out_eval.expect("held out present").mae;
        }
        means[slot] /= SEEDS.len() as f64;
    }
    println!(
        "  branch detail: attention mae {:.3}, baseline {:.3}",
        means[0], means[1]
    );
    if means[0] <= means[1] {
        Ok(())
    } else {
        Err(format!(
            "attention branches mae {:.3} exceeds baseline {:.3}",
            means[0], means[1]
        ))
    }
}

// ── 9: metrics oracle ────────────────────────────────────────────────────

fn brute_psnr(est: &[f32], gt: &[f32]) -> f64 {
    let mut peak = f64::MIN;
    for &g in gt {
        if g as f64 > peak {
            peak = g as f64;
        }
    }
    let mut acc = 0.0;
    for i in 0..est.len() {
        let d = (est[i] as f64 - gt[i] as f64) / peak;
        acc += d * d;
    }
    let m = acc / est.len() as f64;
    if m == 0.0 {
        return 99.0;
    }
    (-10.0 * m.log10()).min(99.0)
}

fn brute_bg_ratio(est: &[f32], mask: &[u8]) -> f64 {
    let mut total = 0.0;
    let mut bg = 0.0;
    for i in 0..est.len() {
        total += est[i] as f64;
        if mask[i] != 0 {
            bg += est[i] as f64;
        }
    }
    if total < 1e-8 {
        0.0
    } else {
        bg / total
    }
}

fn metrics_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut records = Vec::new();
    for case in 0..50 {
        let n = rng.gen_range(64..=400);
        let est: Vec<f32> = (0..n).map(|_| rng.gen::<f32>()).collect();
        let gt: Vec<f32> = (0..n).map(|_| rng.gen::<f32>() + 1e-3).collect();
        let mask: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();

        let p = psnr(&est, &gt).map_err(|e| e.to_string())?;
        if (p - brute_psnr(&est, &gt)).abs() > 1e-9 {
            return Err(format!("case {case}: psnr {p} vs brute {}", brute_psnr(&est, &gt)));
        }
        let r = bg_ratio(&est, &mask).map_err(|e| e.to_string())?;
        if (r - brute_bg_ratio(&est, &mask)).abs() > 1e-9 {
            return Err(format!(
                "case {case}: bg_ratio {r} vs brute {}",
                brute_bg_ratio(&est, &mask)
            ));
        }
        records.push(EvalRecord {
            image_id: format!("case-{case}"),
            count_est: est.iter().map(|&v| v as f64).sum(),
            count_gt: gt.iter().map(|&v| v as f64).sum(),
            ssim: 0.0,
            psnr: p,
            bg_mass: 0.0,
            total_mass: 0.0,
        });
    }
    let (m, r) = (
        mae(&records).map_err(|e| e.to_string())?,
        rmse(&records).map_err(|e| e.to_string())?,
    );
    let brute_mae = records
        .iter()
        .map(|rec| (rec.count_est - rec.count_gt).abs())
        .sum::<f64>()
        / records.len() as f64;
    let brute_rmse = (records
        .iter()
        .map(|rec| (rec.count_est - rec.count_gt).powi(2))
        .sum::<f64>()
        / records.len() as f64)
        .sqrt();
    if (m - brute_mae).abs() > 1e-9 || (r - brute_rmse).abs() > 1e-9 {
        return Err(format!("mae {m} vs {brute_mae}, rmse {r} vs {brute_rmse}"));
    }

    for trial in 0..1000 {
        let n = rng.gen_range(1..=12);
        let records: Vec<EvalRecord> = (0..n)
            .map(|i| EvalRecord {
                image_id: format!("t{trial}-{i}"),
                count_est: rng.gen::<f64>() * 40.0,
                count_gt: rng.gen::<f64>() * 40.0,
                ssim: 0.0,
                psnr: 0.0,
                bg_mass: 0.0,
                total_mass: 0.0,
            })
            .collect();
        let m = mae(&records).map_err(|e| e.to_string())?;
        let r = rmse(&records).map_err(|e| e.to_string())?;
        if r < m {
            return Err(format!("trial {trial}: rmse {r} < mae {m}"));
        }
    }
    Ok(())
}

// ── 10: determinism and formats ──────────────────────────────────────────

fn determinism_and_formats() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let recipe = small_scenes(DatasetRecipe {
        n_images: 2,
        people: (2, 5),
        seed: 77,
        ..DatasetRecipe::default()
    });
    let samples = recipe.build().map_err(|e| e.to_string())?;

    // Same seed, same data ⇒ byte-identical checkpoints through a real
    // (short) training loop.
    let spec = RunSpec {
        model: ModelConfig {
            k: 3,
            width_mult: 0.0625,
            init_std: 0.1,
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            lr0: 1e-4,
            crop_fraction: 1.0,
            seed: 7,
            ..TrainConfig::default()
        },
    };
    let mut blobs = Vec::new();
    for name in ["a.bin", "b.bin"] {
        let mut params = build(&spec.model, spec.train.seed).map_err(|e| e.to_string())?;
        let mut state = OptimizerState::new(&params);
        train(&mut params, &mut state, &samples, &spec.train).map_err(|e| e.to_string())?;
        let path = dir.path().join(name);
        save_checkpoint(&path, &params, &state).map_err(|e| e.to_string())?;
        blobs.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    if blobs[0] != blobs[1] {
        return Err("identical seeds produced different checkpoints".into());
    }

    // Checkpoint round trip is bit-exact for every parameter tensor.
    let (params, _) =
        load_checkpoint(&dir.path().join("a.bin")).map_err(|e| e.to_string())?;
    let mut again = build(&spec.model, spec.train.seed).map_err(|e| e.to_string())?;
    let mut state = OptimizerState::new(&again);
    train(&mut again, &mut state, &samples, &spec.train).map_err(|e| e.to_string())?;
    for (name, tensor) in again.iter() {
        let restored = params.get(name);
        let same = tensor.data().len() == restored.data().len()
            && tensor
                .data()
                .iter()
                .zip(restored.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("parameter {name} did not round trip bit-exactly"));
        }
    }

    // Density-map round trip is bit-exact.
    let ann = PointAnnotation::new("rt", 40, 30, vec![(3.5, 4.5), (20.0, 11.0), (33.3, 25.0)])
        .map_err(|e| e.to_string())?;
    let dm = render_annotation(&ann).map_err(|e| e.to_string())?;
    let dmap = dir.path().join("rt.dmap");
    write_density(&dmap, &dm).map_err(|e| e.to_string())?;
    let back = read_density(&dmap).map_err(|e| e.to_string())?;
    let same = back.width == dm.width
        && back.height == dm.height
        && back
            .data
            .iter()
            .zip(&dm.data)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    if !same {
        return Err("density map did not round trip bit-exactly".into());
    }

    // Truncated files surface clean format errors instead of panicking.
    for (path, original) in [
        (dir.path().join("trunc.dmap"), std::fs::read(&dmap).map_err(|e| e.to_string())?),
        (dir.path().join("trunc.bin"), blobs[0].clone()),
    ] {
        std::fs::write(&path, &original[..original.len() / 2]).map_err(|e| e.to_string())?;
    }
    if read_density(dir.path().join("trunc.dmap")).is_ok() {
        return Err("truncated density map was accepted".into());
    }
    if load_checkpoint(&dir.path().join("trunc.bin")).is_ok() {
        return Err("truncated checkpoint was accepted".into());
    }
    Ok(())
}

// ── the gate ─────────────────────────────────────────────────────────────

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Verdict); 10] = [
        ("gradient-integrity", gradient_integrity),
        ("mass-conservation", mass_conservation),
        ("ssim-identities", ssim_identities),
        ("attention-identities", attention_identities),
        ("desk-overfit", desk_overfit),
        ("background-loss-direction", background_loss_direction),
        ("supervision-direction", supervision_direction),
        ("branch-direction", branch_direction),
        ("metrics-oracle", metrics_oracle),
        ("determinism-and-formats", determinism_and_formats),
    ];
    let mut failures = Vec::new();
    for (i, (name, criterion)) in criteria.iter().enumerate() {
        let n = i + 1;
        match criterion() {
            Ok(()) => println!("ACCEPT {n} {name}: PASS"),
            Err(why) => {
                println!("ACCEPT {n} {name}: FAIL ({why})");
                failures.push(format!("{n} {name}: {why}"));
            }
        }
    }
    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}
