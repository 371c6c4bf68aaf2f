//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits non-zero if any criterion fails.
//!
//! The desk experiment (three seeds of the mode x fraction x selector sweep)
//! is written to a fresh temporary directory. Set `ACCEPTANCE_RUN_DIR` to
//! reuse a directory across runs.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use robust_kd::checkpoint::{self, section_bytes};
use robust_kd::config::{RunConfig, OUTPUT_ENV};
use robust_kd::corruptions::{CorruptionKind, Gate, PerturbationKind, PerturbationSequence};
use robust_kd::evaluation::{mce, mfr, AblationTable, SeveritySweep};
use robust_kd::image::Image;
use robust_kd::inference::{
    kl_divergence, mc_predict_all, select_head, select_head_variant, uncertainty_scalar, zero_shot_logits,
    RandomEmbeddings, ClassEmbeddingProvider, Selector, KL_EPSILON,
};
use robust_kd::model::{build_multihead, build_with_layout, HeadId, PartitionConfig, Section};
use robust_kd::nn::Activations;
use robust_kd::pipeline::{cmd_ablate, cmd_distill, cmd_eval, cmd_pretrain, cmd_train_teacher, variant, DistillInputs};
use robust_kd::training::*;

const SEEDS: [u64; 3] = [0, 1, 2];
const FRACTIONS: [f64; 4] = [0.0, 0.05, 0.1, 0.2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn desk_config(root: &Path, seed: u64) -> RunConfig {
    let mut cfg = RunConfig { seed, output_dir: root.to_path_buf(), ..Default::default() };
    cfg.experiment = "acceptance".into();
    cfg.ablation.modes = vec![DistillMode::Ours, DistillMode::Apt];
    cfg.ablation.fractions = FRACTIONS.to_vec();
    cfg.ablation.selectors = vec![Selector::Full, Selector::NoUmc, Selector::MaxLogit];
    cfg
}

struct Desk {
    root: PathBuf,
    tables: Vec<AblationTable>,
    teacher_gain: Vec<(f64, f64)>,
    _tmp: Option<tempfile::TempDir>,
}

fn run_desk() -> Desk {
    let (root, tmp) = match std::env::var_os("ACCEPTANCE_RUN_DIR") {
        Some(d) => (PathBuf::from(d), None),
        None => {
            let t = tempfile::tempdir().unwrap();
            (t.path().to_path_buf(), Some(t))
        }
    };
    let mut tables = Vec::new();
    let mut teacher_gain = Vec::new();
    for seed in SEEDS {
        let started = Instant::now();
        let cfg = desk_config(&root, seed);
        let (_, table) = cmd_ablate(&cfg).expect("desk ablation runs");
        let teacher = cmd_train_teacher(&cfg).unwrap();
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(teacher.dir.report("teacher.json")).unwrap()).unwrap();
        teacher_gain.push((
            report["holdout_before"].as_f64().unwrap_or(f64::NAN),
            report["holdout_after"].as_f64().unwrap_or(f64::NAN),
        ));
        println!("  desk seed {seed}: {:.0}s", started.elapsed().as_secs_f64());
        tables.push(table);
    }
    Desk { root, tables, teacher_gain, _tmp: tmp }
}

/// Seed-averaged metric of one ablation cell.
fn cell(desk: &Desk, mode: &str, selector: Option<&str>, fraction: f64, column: &str) -> f64 {
    let vals: Vec<f64> = desk
        .tables
        .iter()
        .map(|t| {
            let (i, _) = t
                .rows
                .iter()
                .enumerate()
                .find(|(_, r)| r.mode == mode && r.selector.as_deref() == selector && r.fraction_tuned == fraction)
                .unwrap_or_else(|| panic!("missing row {mode} {selector:?} {fraction}"));
            t.cell(i, column).unwrap_or(f64::NAN)
        })
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let eps = 1e-6;
    for _ in 0..50 {
        let z: Vec<f64> = (0..CLASSES).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let t: Vec<f64> = (0..CLASSES).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y = rng.gen_range(0..CLASSES);
        let temp = rng.gen_range(0.5..4.0);
        let (_, gce) = classification_loss_grad(&z, y);
        let (_, gkd) = distillation_loss_grad(&z, &t, temp);
        for k in 0..CLASSES {
            let (mut p, mut m) = (z.clone(), z.clone());
            p[k] += eps;
            m[k] -= eps;
            let fd = (classification_loss(&p, y) - classification_loss(&m, y)) / (2.0 * eps);
            worst = worst.max(rel_err(gce[k], fd));
            let fd = (distillation_loss(&p, &t, temp) - distillation_loss(&m, &t, temp)) / (2.0 * eps);
            worst = worst.max(rel_err(gkd[k], fd));
        }
    }
    let cfg = DistillConfig { lambda_c: 0.7, lambda_d: 1.3, ..Default::default() };
    let mut params = 0;
    for seed in 0..3 {
        let (base, model) = tiny_model(seed, 0.25);
        let teachers = tiny_teachers(&base, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clean = clean_example(&mut rng, 0);
        let aug = augmented_example(&mut rng, 1);
        let batch = mixed_batch(&mut rng, 6);
        for (w, n) in [
            max_fd_error(&model, |m| loss_clean(&clean, m, &teachers, &cfg).unwrap()),
            max_fd_error(&model, |m| loss_aug(&aug, m, &teachers, &cfg).unwrap()),
            max_fd_error(&model, |m| loss_total(&batch, m, &teachers, &cfg).unwrap()),
        ] {
            worst = worst.max(w);
            params += n;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-4 && secs < 60.0,
        format!("worst relative error {worst:.2e} over {params} parameter checks, {secs:.1}s"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = DistillConfig::default();
    let mut checked = 0;
    let mut ok = true;
    for seed in 0..20 {
        let (base, mut model) = tiny_model(seed, 0.25);
        let teachers = tiny_teachers(&base, seed);
        let backbone = section_bytes(model.backbone());
        for ex in mixed_batch(&mut rng, 8) {
            let obj = match ex.gate() {
                Gate::Clean => loss_clean(&ex, &model, &teachers, &cfg).unwrap(),
                Gate::Augmented => loss_aug(&ex, &model, &teachers, &cfg).unwrap(),
            };
            let silent = match ex.gate() {
                Gate::Clean => HeadId::Unclean,
                Gate::Augmented => HeadId::Clean,
            };
            ok &= obj.grads.head_is_zero(silent);
            checked += 1;
        }
        ok &= model.trainable_mut(Section::Backbone).is_err();
        let data = robust_kd::corruptions::AugmentedDataset { num_classes: CLASSES, examples: mixed_batch(&mut rng, 16) };
        let c = DistillConfig { epochs: 2, batch_size: 4, data_fraction: 1.0, ..Default::default() };
        let trained = distill(model.clone(), &teachers, &data, &c).unwrap().model;
        ok &= section_bytes(trained.backbone()) == backbone;
    }
    outcome(ok, format!("{checked} per-example losses, off-branch head gradients exactly zero; backbone unwritable"))
}

fn criterion_3(desk: &Desk) -> Outcome {
    let cfg = variant(&desk_config(&desk.root, 0), DistillMode::Ours, 0.1);
    let pre = cmd_pretrain(&cfg).unwrap();
    let base = checkpoint::load(&pre.artifacts[0], None).unwrap().into_network().unwrap();
    let built = build_multihead(&base, cfg.partition.clone(), 0).unwrap();
    let before = section_bytes(built.backbone());
    let k = built.backbone().len();
    let original = section_bytes(&base.layers[..k]);
    let out = cmd_distill(&cfg, &DistillInputs::default()).unwrap();
    let after = section_bytes(checkpoint::load(&out.artifacts[0], None).unwrap().into_multihead().unwrap().backbone());
    outcome(
        before == after && before == original,
        format!("{k} backbone layers, {} bytes compared after {} epochs", before.len(), cfg.distill.epochs),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let (base, model) = tiny_model(trial % 7, 0.25);
        let teachers = tiny_teachers(&base, trial % 7);
        let len = rng.gen_range(2..12);
        let batch = mixed_batch(&mut rng, len);
        let cfg = DistillConfig {
            lambda_c: rng.gen_range(0.1..2.0),
            lambda_d: rng.gen_range(0.0..2.0),
            temperature: rng.gen_range(0.5..4.0),
            ..Default::default()
        };
        let got = loss_total(&batch, &model, &teachers, &cfg).unwrap().value;
        let want = brute_force_total(&batch, &model, &teachers, &cfg);
        worst = worst.max((got - want).abs() / want.abs());
    }
    outcome(worst <= 1e-6, format!("100 mixed batches, worst relative gap {worst:.1e}"))
}

fn criterion_5() -> Outcome {
    let mut ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut inputs = 0;
    for seed in 0..10 {
        let (_, model) = tiny_model(seed, 0.0);
        let images: Vec<Image> = (0..8).map(|_| random_image(&mut rng)).collect();
        let refs: Vec<&Image> = images.iter().collect();
        let x = Activations::from_images(&refs).unwrap();
        for dists in mc_predict_all(&model, &x, 10, seed).unwrap() {
            for d in dists {
                ok &= uncertainty_scalar(&d) == 0.0;
                ok &= kl_divergence(&d.mean_probs, &d.mean_probs, KL_EPSILON).unwrap() == 0.0;
            }
        }
        // Fresh heads are copies: every score is zero and the tie goes to clean.
        let fresh = build_multihead(&tiny_base(seed), PartitionConfig { dropout_rate: 0.0, ..tiny_partition(0.0) }, seed).unwrap();
        let (_, noisy) = tiny_model(seed, 0.3);
        for img in &images {
            let x1 = Activations::from_image(img).unwrap();
            let r = select_head(&fresh, &x1, 10, seed).unwrap();
            ok &= r.score_clean == 0.0 && r.score_unclean == 0.0 && r.chosen_head == HeadId::Clean;
            for v in Selector::ALL {
                ok &= select_head_variant(&noisy, &x1, v, 10, seed).unwrap().chosen_head != HeadId::Combined;
            }
            inputs += 1;
        }
    }
    outcome(ok, format!("{inputs} inputs: zero uncertainty, zero self-KL, clean tie-break, combined never chosen"))
}

fn criterion_6(desk: &Desk) -> Outcome {
    let c0 = cell(desk, "ours", Some("full"), 0.0, "corrupted_acc");
    let c1 = cell(desk, "ours", Some("full"), 0.1, "corrupted_acc");
    let k0 = cell(desk, "ours", Some("full"), 0.0, "clean_acc");
    let k1 = cell(desk, "ours", Some("full"), 0.1, "clean_acc");
    let gain = 100.0 * (c1 - c0);
    let drop = 100.0 * (k0 - k1);
    outcome(
        gain >= 5.0 && drop <= 2.0,
        format!("corrupted {:.2} -> {:.2} (+{gain:.2} pts), clean {:.2} -> {:.2} (drop {drop:.2} pts)", 100.0 * c0, 100.0 * c1, 100.0 * k0, 100.0 * k1),
    )
}

fn criterion_7(desk: &Desk) -> Outcome {
    let accs: Vec<f64> = FRACTIONS.iter().map(|&f| 100.0 * cell(desk, "ours", Some("full"), f, "corrupted_acc")).collect();
    let inversions: Vec<f64> = accs.windows(2).filter(|w| w[1] < w[0]).map(|w| w[0] - w[1]).collect();
    let pass = inversions.is_empty() || (inversions.len() == 1 && inversions[0] <= 0.5);
    let shown: Vec<String> = FRACTIONS.iter().zip(&accs).map(|(f, a)| format!("{f}:{a:.2}")).collect();
    outcome(pass, format!("corrupted accuracy by fraction {}", shown.join(" ")))
}

fn criterion_8(desk: &Desk) -> Outcome {
    let ours = cell(desk, "ours", Some("full"), 0.1, "corrupted_acc");
    let apt = cell(desk, "apt", None, 0.1, "corrupted_acc");
    let max_logit = cell(desk, "ours", Some("max_logit"), 0.1, "corrupted_acc");
    outcome(
        ours >= apt && ours >= max_logit,
        format!("ours {:.2}, apt {:.2}, max_logit {:.2}", 100.0 * ours, 100.0 * apt, 100.0 * max_logit),
    )
}

fn criterion_9(desk: &Desk) -> Outcome {
    let fc = cell(desk, "ours", Some("full"), 0.1, "f_correct_clean");
    let fs = cell(desk, "ours", Some("full"), 0.1, "f_correct_shifted");
    let nc = cell(desk, "ours", Some("no_umc"), 0.1, "f_correct_clean");
    let ns = cell(desk, "ours", Some("no_umc"), 0.1, "f_correct_shifted");
    let (full, no_umc) = ((fc + fs) / 2.0, (nc + ns) / 2.0);
    outcome(
        fc >= 0.70 && fs >= 0.70 && full > no_umc,
        format!("full clean {fc:.3} shifted {fs:.3}; no_umc clean {nc:.3} shifted {ns:.3}"),
    )
}

fn criterion_10() -> Outcome {
    let sweep: SeveritySweep = [
        (CorruptionKind::ShotNoise, [0.9, 0.7, 0.6, 0.4, 0.3]),
        (CorruptionKind::Fog, [0.8, 0.75, 0.5, 0.5, 0.1]),
    ]
    .into_iter()
    .collect();
    let self_mce = mce(&sweep, &sweep).unwrap();
    let frames = |n: usize| PerturbationSequence {
        kind: PerturbationKind::BrightnessWalk { step: 0.05 },
        frames: (0..n).map(|i| Image::filled(2, 2, 1, i as f64 / n as f64)).collect(),
    };
    let seqs = vec![frames(10), frames(7), frames(2)];
    let constant = mfr(|f: &[&Image]| Ok(vec![1; f.len()]), &seqs).unwrap();
    let alternating = mfr(|f: &[&Image]| Ok((0..f.len()).map(|i| i % 2).collect()), &seqs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let dim = rng.gen_range(2..64);
        let classes = rng.gen_range(2..20);
        let img: Vec<f64> = robust_kd::inference::l2_normalize(&(0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>());
        let emb = RandomEmbeddings { dim, seed: trial }.class_embeddings(classes).unwrap();
        let got = zero_shot_logits(&img, &emb).unwrap();
        for (c, e) in emb.iter().enumerate() {
            let mut dot = 0.0;
            for j in 0..dim {
                dot += img[j] * e[j];
            }
            worst = worst.max((got[c] - dot).abs());
        }
    }
    outcome(
        self_mce == 100.0 && constant == 0.0 && alternating == 1.0 && worst <= 1e-6,
        format!("mCE(self) {self_mce}, mFR constant {constant} alternating {alternating}, zero-shot max gap {worst:.1e}"),
    )
}

fn small_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig { output_dir: root.to_path_buf(), experiment: "determinism".into(), ..Default::default() };
    cfg.pretrain.student.epochs = 2;
    cfg.pretrain.teacher.epochs = 2;
    cfg.teacher.epochs = 2;
    cfg.distill.epochs = 3;
    cfg.evaluation.perturbation.sequences = 10;
    cfg.evaluation.probe.epochs = 5;
    cfg
}

fn run_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let cfg = small_config(root);
    let teacher = cmd_train_teacher(&cfg).unwrap();
    let distilled = cmd_distill(&cfg, &DistillInputs::default()).unwrap();
    let eval = cmd_eval(&cfg, None).unwrap();
    let mut files: Vec<PathBuf> = teacher.artifacts.into_iter().chain(distilled.artifacts).chain(eval.artifacts).collect();
    files.push(eval.dir.report("traces_clean.jsonl"));
    files.push(eval.dir.report("traces_shifted.jsonl"));
    files
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(root).unwrap().display().to_string();
            (rel, std::fs::read(&p).unwrap())
        })
        .collect()
}

fn criterion_11() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_bytes(a.path());
    let second = run_bytes(b.path());
    let same = first == second;
    let names: Vec<&str> = first.iter().map(|(n, _)| n.rsplit('/').next().unwrap_or(n)).collect();
    outcome(same, format!("{} artifacts byte-identical across two fresh runs: {}", first.len(), names.join(", ")))
}

/// Minimum per-call time of `f` over repeated timed blocks.
fn min_time(mut f: impl FnMut(), blocks: usize, calls: usize) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..blocks {
        let t = Instant::now();
        for _ in 0..calls {
            f();
        }
        best = best.min(t.elapsed().as_secs_f64() / calls as f64);
    }
    best
}

fn criterion_12(desk: &Desk) -> Outcome {
    let cfg = desk_config(&desk.root, 0);
    let pre = cmd_pretrain(&cfg).unwrap();
    let base = checkpoint::load(&pre.artifacts[0], None).unwrap().into_network().unwrap();
    let test = robust_kd::data::generate(robust_kd::data::Generator::Shapes10, 4, 9, 16);
    let x = Activations::from_image(&test.examples[0].image).unwrap();
    let mut ratios = Vec::new();
    for f in [0.05, 0.1, 0.2] {
        let model = build_with_layout(
            &base,
            PartitionConfig { fraction_tuned: f, ..cfg.partition.clone() },
            DistillMode::Ours.layout(),
            0,
        )
        .unwrap();
        let mut fwd = f64::INFINITY;
        let mut sel = f64::INFINITY;
        for _ in 0..5 {
            fwd = fwd.min(min_time(|| drop(std::hint::black_box(base.forward(&x).unwrap())), 10, 20));
            sel = sel.min(min_time(|| drop(std::hint::black_box(select_head(&model, &x, 10, 3).unwrap())), 10, 20));
        }
        ratios.push((f, fwd, sel / fwd));
    }
    let worst = ratios.iter().map(|r| r.2).fold(0.0, f64::max);
    let shown: Vec<String> = ratios.iter().map(|(f, t, r)| format!("f={f}: {r:.2}x of {:.0}us", t * 1e6)).collect();
    outcome(worst <= 1.5, format!("select_head(mc=10) vs forward: {}", shown.join(", ")))
}

fn main() {
    // Keep the experiment inside its own directory regardless of the caller's
    // environment.
    std::env::remove_var(OUTPUT_ENV);

    println!("running acceptance suite");
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "loss gradients match central differences", criterion_1()),
        (2, "gradient routing is exact", criterion_2()),
        (4, "loss_total equals the gated per-example mean", criterion_4()),
        (5, "inference degeneracies", criterion_5()),
        (10, "metric fixtures", criterion_10()),
        (11, "stage reruns are byte-identical", criterion_11()),
    ];
    let started = Instant::now();
    let desk = run_desk();
    println!("  desk experiment: {:.0}s for {} seeds", started.elapsed().as_secs_f64(), SEEDS.len());
    for (i, (before, after)) in desk.teacher_gain.iter().enumerate() {
        println!(
            "  note: seed {i} teacher held-out corrupted accuracy {:.2} -> {:.2} (+{:.2} pts)",
            100.0 * before,
            100.0 * after,
            100.0 * (after - before)
        );
    }
    results.push((3, "frozen backbone is bit-identical after distillation", criterion_3(&desk)));
    results.push((6, "tuning 10% of layers lifts corrupted accuracy", criterion_6(&desk)));
    results.push((7, "corrupted accuracy rises with the tuned fraction", criterion_7(&desk)));
    results.push((8, "ours beats apt and max-logit selection", criterion_8(&desk)));
    results.push((9, "routing picks the right head", criterion_9(&desk)));
    results.push((12, "head selection overhead", criterion_12(&desk)));
    results.sort_by_key(|r| r.0);

    let mut failed = 0;
    for (n, name, o) in &results {
        println!("criterion {n:>2} {}: {name} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
