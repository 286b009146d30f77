//! Acceptance harness: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the report reads top to
//! bottom in order. Criterion 9 needs real VGG-19 weights and a 9-channel
//! material; it runs only when `TRITEX_VGG19_WEIGHTS` and `TRITEX_MATERIAL`
//! are set and is recorded, never gating.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nalgebra::DMatrix;
use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use triplet_texture::evaluation::{
    alignment_metric, chi_square_uniform, colocated_exemplar, gradcheck_loss_3channel, gradcheck_stochastic,
    triplet_histogram, unbiasedness_check,
};
use triplet_texture::extractor::gram;
use triplet_texture::generator::{load_model, train_generator, TrainConfig};
use triplet_texture::loss::sample_triplet;
use triplet_texture::material::{load_material, MaterialManifest};
use triplet_texture::synthesis::{initialize, synthesize, Objective, SynthesisConfig};
use triplet_texture::{ExtractorConfig, FeatureExtractor, MaterialStack, TexturalLoss, TripletIndex};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_stack(n: usize, size: usize, rng: &mut ChaCha8Rng) -> MaterialStack {
    MaterialStack::from_planes(Array3::from_shape_simple_fn((n, size, size), || rng.gen::<f64>())).unwrap()
}

fn unbiasedness() -> Outcome {
    let ex = FeatureExtractor::mock();
    let mut worst: f64 = 0.0;
    for n in 1..=4 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + n as u64);
        let (a, b) = (random_stack(n, 16, &mut rng), random_stack(n, 16, &mut rng));
        let report = unbiasedness_check(&a, &b, &ex, 6).map_err(|e| e.to_string())?;
        worst = worst.max(report.relative_gap);
    }
    check(worst < 1e-6, format!("max relative gap {worst:.3e} over n=1..4"))
}

fn sample_space() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(729);
    let draws: Vec<TripletIndex> = (0..270_000).map(|_| sample_triplet(9, &mut rng).unwrap()).collect();
    let support: HashSet<TripletIndex> = draws.iter().copied().collect();
    let report = chi_square_uniform(&triplet_histogram(&draws, 9), 0.001);
    check(
        support.len() == 729 && report.passes,
        format!(
            "support {} triplets, chi2 {:.1} (critical {:.1}, p {:.3})",
            support.len(),
            report.statistic,
            report.critical_value,
            report.p_value
        ),
    )
}

fn gradients() -> Outcome {
    let ex = FeatureExtractor::mock();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let image = Array3::from_shape_simple_fn((3, 12, 12), || rng.gen::<f64>());
    let reference = Array3::from_shape_simple_fn((3, 12, 12), || rng.gen::<f64>());
    let grams = ex.gram_statistics(&reference).map_err(|e| e.to_string())?;
    let three = gradcheck_loss_3channel(&ex, &image, &grams, 150, 1).map_err(|e| e.to_string())?;
    let (a, b) = (random_stack(4, 12, &mut rng), random_stack(4, 12, &mut rng));
    let stochastic = gradcheck_stochastic(&ex, &a, &b, 2, 5, 150, 2).map_err(|e| e.to_string())?;
    check(
        three.coordinates >= 100
            && stochastic.coordinates >= 100
            && three.max_relative_error < 1e-4
            && stochastic.max_relative_error < 1e-4,
        format!(
            "3-channel {:.2e} ({} coords, {} kink-refined), stochastic {:.2e} ({} coords, {} kink-refined)",
            three.max_relative_error,
            three.coordinates,
            three.refined_coordinates,
            stochastic.max_relative_error,
            stochastic.coordinates,
            stochastic.refined_coordinates
        ),
    )
}

fn gram_laws() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut min_eig, mut perm, mut scale_err) = (f64::INFINITY, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=12);
        let m = rng.gen_range(1..=40);
        let f = Array2::from_shape_simple_fn((n, m), || rng.gen_range(-2.0..2.0));
        let g = gram(f.view()).map_err(|e| e.to_string())?;
        if g != g.t() {
            return Err("gram not exactly symmetric".into());
        }
        let eig = DMatrix::from_fn(n, n, |i, j| g[[i, j]]).symmetric_eigenvalues();
        min_eig = eig.iter().fold(min_eig, |acc, &l| acc.min(l));

        // integer features keep every partial sum exact
        let fi = f.mapv(f64::round);
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        let gi = gram(fi.view()).unwrap();
        let moved = gram(fi.select(Axis(1), &order).view()).unwrap();
        perm = perm.max((&gi - &moved).iter().fold(0.0f64, |acc, v| acc.max(v.abs())));

        let a: f64 = rng.gen_range(-3.0..3.0);
        let scaled = gram((&f * a).view()).unwrap();
        let expected = &g * (a * a);
        let norm = expected.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        scale_err = scale_err.max((&scaled - &expected).iter().fold(0.0f64, |acc, v| acc.max(v.abs())) / norm);
    }
    check(
        min_eig > -1e-6 && perm == 0.0 && scale_err < 1e-6,
        format!("1000 matrices: symmetric, min eigenvalue {min_eig:.2e}, permutation diff {perm}, scale law {scale_err:.2e}"),
    )
}

fn correlation_claim() -> Outcome {
    let ex = FeatureExtractor::mock();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let exemplar = colocated_exemplar(64, 40 + seed);
        let base = SynthesisConfig {
            height: 64,
            width: 64,
            steps: 500,
            seed,
            ..Default::default()
        };
        let joint = synthesize(&exemplar, &base, &ex).map_err(|e| e.to_string())?;
        let separate = synthesize(
            &exemplar,
            &SynthesisConfig {
                objective: Objective::Separate {
                    groups: vec![vec![0], vec![1]],
                },
                ..base
            },
            &ex,
        )
        .map_err(|e| e.to_string())?;
        let ej = alignment_metric(&exemplar, &joint.stack)
            .map_err(|e| e.to_string())?
            .error();
        let es = alignment_metric(&exemplar, &separate.stack)
            .map_err(|e| e.to_string())?
            .error();
        if ej <= es {
            wins += 1;
        }
        rows.push(format!("{ej:.3}/{es:.3}"));
    }
    check(
        wins >= 4,
        format!(
            "n-channel ≤ separate in {wins}/5 seeds (alignment error joint/separate: {})",
            rows.join(", ")
        ),
    )
}

fn smoke_test() -> Outcome {
    let ex = FeatureExtractor::mock();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let exemplar = random_stack(2, 32, &mut rng);
    let config = SynthesisConfig {
        height: 32,
        width: 32,
        steps: 200,
        seed: 1,
        objective: Objective::Exact,
        ..Default::default()
    };
    let loss = TexturalLoss::new(&ex);
    let init = initialize(&exemplar, &config).map_err(|e| e.to_string())?;
    let before = loss.exact(&init, &exemplar, 6).map_err(|e| e.to_string())?.total;
    let out = synthesize(&exemplar, &config, &ex).map_err(|e| e.to_string())?;
    let after = loss.exact(&out.stack, &exemplar, 6).map_err(|e| e.to_string())?.total;
    check(
        after * 10.0 <= before,
        format!("exact loss {before:.4e} -> {after:.4e} ({:.1}x)", before / after),
    )
}

fn generator_contracts() -> Outcome {
    let ex = FeatureExtractor::mock();
    let exemplar = load_material(&MaterialManifest::from_file(&sample_manifest()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let config = TrainConfig {
        steps: 2,
        batch_size: 1,
        crop_size: 128,
        seed: 5,
        ..Default::default()
    };
    let model = train_generator(&exemplar, &config, &ex)
        .map_err(|e| e.to_string())?
        .model;
    let big = model.generate(384, 384, 1).map_err(|e| e.to_string())?;
    let shape_ok = big.data().dim() == (exemplar.channels(), 384, 384);
    let a = model.generate(128, 128, 1).unwrap();
    let b = model.generate(128, 128, 2).unwrap();
    let variation = (a.data() - b.data()).mapv(f64::abs).mean().unwrap();

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.safetensors");
    model.save(&path).map_err(|e| e.to_string())?;
    let loaded = load_model(&path, Some(&ex.config().fingerprint())).map_err(|e| e.to_string())?;
    let again = loaded.model.generate(128, 128, 1).unwrap();
    let bitwise = a
        .data()
        .iter()
        .zip(again.data())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    check(
        shape_ok && variation > 0.0 && bitwise,
        format!(
            "384² output {:?}, seed variation {variation:.3e}, round-trip bitwise {bitwise}",
            big.data().dim()
        ),
    )
}

fn sample_manifest() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../assets/sample_material/manifest.toml")
        .canonicalize()
        .expect("sample material present")
}

fn tritex(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tritex"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "tritex {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

/// Compare two CSV traces: identical text outside numeric cells, numeric
/// cells within `1e-5` relative.
fn traces_match(a: &str, b: &str) -> bool {
    let (la, lb): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
    la.len() == lb.len()
        && la.iter().zip(&lb).all(|(ra, rb)| {
            let (ca, cb): (Vec<&str>, Vec<&str>) = (ra.split(',').collect(), rb.split(',').collect());
            ca.len() == cb.len()
                && ca
                    .iter()
                    .zip(&cb)
                    .all(|(x, y)| match (x.parse::<f64>(), y.parse::<f64>()) {
                        (Ok(x), Ok(y)) => (x - y).abs() <= 1e-5 * x.abs().max(y.abs()),
                        _ => x == y,
                    })
        })
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let m = sample_manifest();
    let m = m.to_str().unwrap();
    for run in ["a", "b"] {
        let cwd = dir.path();
        tritex(
            &[
                "synthesize",
                "--exemplar",
                m,
                "--out",
                &format!("{run}/synth"),
                "--steps",
                "20",
                "--size",
                "32",
                "--k",
                "2",
                "--seed",
                "3",
            ],
            cwd,
        )?;
        tritex(
            &[
                "train",
                "--exemplar",
                m,
                "--out",
                &format!("{run}/train"),
                "--steps",
                "5",
                "--batch",
                "2",
                "--crop",
                "32",
                "--seed",
                "3",
            ],
            cwd,
        )?;
        tritex(
            &[
                "generate",
                "--model",
                &format!("{run}/train/model.safetensors"),
                "--size",
                "64",
                "--out",
                &format!("{run}/gen"),
                "--seed",
                "3",
            ],
            cwd,
        )?;
        tritex(&["eval", "--out", &format!("{run}/eval"), "--seed", "3"], cwd)?;
    }
    let read = |p: &str| std::fs::read(dir.path().join(p)).map_err(|e| format!("{p}: {e}"));
    let text = |p: &str| read(p).map(|b| String::from_utf8_lossy(&b).into_owned());
    let mut failures = Vec::new();
    for trace in ["synth/trace.csv", "train/train_trace.csv"] {
        if !traces_match(&text(&format!("a/{trace}"))?, &text(&format!("b/{trace}"))?) {
            failures.push(trace.to_string());
        }
    }
    for artifact in [
        "train/model.safetensors",
        "gen/albedo.png",
        "synth/albedo.png",
        "eval/eval_report.json",
    ] {
        if read(&format!("a/{artifact}"))? != read(&format!("b/{artifact}"))? {
            failures.push(artifact.to_string());
        }
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "synthesize/train/generate/eval twice: traces and triplet logs match, artifacts byte-identical".into()
        } else {
            format!("differs: {}", failures.join(", "))
        },
    )
}

fn full_scale() -> Option<Outcome> {
    let weights = std::env::var_os("TRITEX_VGG19_WEIGHTS")?;
    let material = std::env::var_os("TRITEX_MATERIAL")?;
    let steps = std::env::var("TRITEX_FULL_STEPS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(1000);
    let run = || -> Result<String, String> {
        let ex = FeatureExtractor::load(ExtractorConfig::vgg19(PathBuf::from(weights))).map_err(|e| e.to_string())?;
        let manifest = MaterialManifest::from_file(Path::new(&material)).map_err(|e| e.to_string())?;
        let exemplar = load_material(&manifest).map_err(|e| e.to_string())?;
        let base = SynthesisConfig {
            height: 256,
            width: 256,
            steps,
            ..Default::default()
        };
        let joint = synthesize(&exemplar, &base, &ex).map_err(|e| e.to_string())?;
        let groups = manifest_groups(&exemplar);
        let separate = synthesize(
            &exemplar,
            &SynthesisConfig {
                objective: Objective::Separate { groups },
                ..base
            },
            &ex,
        )
        .map_err(|e| e.to_string())?;
        let finite = joint.trace.iter().filter_map(|e| e.estimate).all(f64::is_finite);
        let ej = alignment_metric(&exemplar, &joint.stack)
            .map_err(|e| e.to_string())?
            .error();
        let es = alignment_metric(&exemplar, &separate.stack)
            .map_err(|e| e.to_string())?
            .error();
        Ok(format!(
            "{steps} steps, finite trace {finite}, alignment error joint {ej:.3} vs separate {es:.3}"
        ))
    };
    Some(run())
}

/// Separate-loss groups: one group per role, roles wider than three channels
/// split into runs of three.
fn manifest_groups(stack: &MaterialStack) -> Vec<Vec<usize>> {
    let mut start = 0;
    let mut groups = Vec::new();
    for (_, width) in stack.layout().entries() {
        let channels: Vec<usize> = (start..start + width).collect();
        groups.extend(channels.chunks(3).map(<[usize]>::to_vec));
        start += width;
    }
    groups
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("unbiasedness", unbiasedness),
        ("n^3 sample space", sample_space),
        ("gradient correctness", gradients),
        ("gram statistics", gram_laws),
        ("correlation preservation vs separate losses", correlation_claim),
        ("optimization smoke test", smoke_test),
        ("generator contracts", generator_contracts),
        ("CLI determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    match full_scale() {
        None => println!(
            "SKIP criterion 9 (full-scale qualitative): set TRITEX_VGG19_WEIGHTS and TRITEX_MATERIAL to record it"
        ),
        Some(Ok(detail)) => println!("RECORDED criterion 9 (full-scale qualitative): {detail}"),
        Some(Err(detail)) => println!("RECORDED criterion 9 (full-scale qualitative): error: {detail}"),
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
