mod common;

use std::collections::BTreeMap;

use common::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use robust_kd::checkpoint::encode_multihead;
use robust_kd::corruptions::{build_perturbation_sequence, CorruptionKind, PerturbationKind, PerturbationSequence,
    SeverityTable};
use robust_kd::data::{generate, Generator};
use robust_kd::evaluation::*;
use robust_kd::image::{Dataset, Example, Image};
use robust_kd::inference::{SelectionSettings, SelectionTrace};
use robust_kd::model::HeadId;
use robust_kd::nn::{Architecture, Network};
use robust_kd::training::{train_classifier, ClassifierConfig};
use robust_kd::Error;

fn constant_image(v: f64) -> Image {
    Image::filled(2, 2, 1, v)
}

fn labelled(labels: &[usize], classes: usize) -> Dataset {
    let examples = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| Example { image: constant_image(i as f64 / labels.len() as f64), label })
        .collect();
    Dataset::new("fixture", classes, examples).unwrap()
}

#[test]
fn accuracy_fixtures() {
    let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
    let ds = labelled(&labels, 4);
    let lookup: BTreeMap<u64, usize> = ds.examples.iter().map(|e| (e.image.pixels[0].to_bits(), e.label)).collect();
    let oracle = |imgs: &[&Image]| Ok(imgs.iter().map(|i| lookup[&i.pixels[0].to_bits()]).collect());
    assert_eq!(evaluate_accuracy(oracle, &ds).unwrap(), 1.0);
    let constant = |imgs: &[&Image]| Ok(vec![2; imgs.len()]);
    assert_eq!(evaluate_accuracy(constant, &ds).unwrap(), 0.25);

    // Twenty stored predictions, hand count: positions 0-6, 10, 13 and 19 are right.
    let truth = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1];
    let preds = [0, 1, 2, 0, 1, 2, 0, 2, 0, 1, 1, 0, 1, 1, 0, 2, 0, 1, 2, 1];
    let ds = labelled(&truth, 3);
    let order: BTreeMap<u64, usize> =
        ds.examples.iter().enumerate().map(|(i, e)| (e.image.pixels[0].to_bits(), preds[i])).collect();
    let stored = |imgs: &[&Image]| Ok(imgs.iter().map(|i| order[&i.pixels[0].to_bits()]).collect());
    assert_eq!(evaluate_accuracy(stored, &ds).unwrap(), 10.0 / 20.0);

    let empty = Dataset::new("empty", 3, vec![]).unwrap();
    assert!(evaluate_accuracy(constant, &empty).is_err());
}

/// The desk teacher trained briefly on clean data.
fn trained_predictor(train: &Dataset) -> impl Fn(&[&Image]) -> robust_kd::Result<Vec<usize>> {
    let mut net = Network::init(&Architecture::teacher((16, 16, 3), train.num_classes), 1).unwrap();
    let images: Vec<&Image> = train.examples.iter().map(|e| &e.image).collect();
    let cfg = ClassifierConfig { epochs: 8, ..Default::default() };
    train_classifier(&mut net, &images, &train.labels(), &cfg).unwrap();
    move |imgs: &[&Image]| Ok(net.logits(imgs)?.iter().map(|l| robust_kd::nn::argmax(l)).collect())
}

#[test]
fn severity_sweeps_are_deterministic_and_decay_with_severity() {
    let train = generate(Generator::Shapes10, 1000, 1, 16);
    let test = generate(Generator::Shapes10, 200, 2, 16);
    let predict = trained_predictor(&train);
    let table = SeverityTable::builtin();
    let clean = evaluate_accuracy(&predict, &test).unwrap();
    assert!(clean > 0.6, "clean accuracy {clean}");

    let ident = severity_sweep(&predict, &test, &[CorruptionKind::Identity], 3, &table).unwrap();
    assert!(ident[&CorruptionKind::Identity].iter().all(|&a| a == clean));

    let kinds = [
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::Pixelate,
        CorruptionKind::Fog,
    ];
    let a = severity_sweep(&predict, &test, &kinds, 3, &table).unwrap();
    let b = severity_sweep(&predict, &test, &kinds, 3, &table).unwrap();
    assert_eq!(a, b);
    for (kind, accs) in &a {
        let inversions = accs.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(inversions <= 1, "{kind}: {accs:?}");
    }
}

#[test]
fn mce_fixtures() {
    let sweep = |rows: &[(CorruptionKind, [f64; 5])]| -> SeveritySweep { rows.iter().copied().collect() };
    let base = sweep(&[
        (CorruptionKind::ShotNoise, [0.9, 0.8, 0.7, 0.6, 0.5]),
        (CorruptionKind::Fog, [0.8, 0.8, 0.6, 0.6, 0.2]),
    ]);
    assert_eq!(mce(&base, &base).unwrap(), 100.0);
    let half = sweep(&[
        (CorruptionKind::ShotNoise, [0.95, 0.9, 0.85, 0.8, 0.75]),
        (CorruptionKind::Fog, [0.9, 0.9, 0.8, 0.8, 0.6]),
    ]);
    assert!((mce(&half, &base).unwrap() - 50.0).abs() < 1e-9);
    // Hand-set errors: shot 0.5 vs 1.5, fog 2.0 vs 2.0 -> (1/3 + 1) / 2 * 100.
    let mixed = sweep(&[
        (CorruptionKind::ShotNoise, [1.0, 1.0, 0.9, 0.8, 0.8]),
        (CorruptionKind::Fog, [0.8, 0.8, 0.6, 0.6, 0.2]),
    ]);
    assert!((mce(&mixed, &base).unwrap() - 200.0 / 3.0).abs() < 1e-9);
    let perfect = sweep(&[(CorruptionKind::ShotNoise, [1.0; 5])]);
    assert!(matches!(mce(&base, &perfect), Err(Error::ZeroBaseline(_))));
}

fn sequence(len: usize) -> PerturbationSequence {
    let frames = (0..len).map(|i| constant_image(i as f64 / len as f64)).collect();
    PerturbationSequence { kind: PerturbationKind::BrightnessWalk { step: 0.1 }, frames }
}

#[test]
fn mfr_fixtures() {
    let seqs = vec![sequence(10), sequence(6)];
    assert_eq!(mfr(|f: &[&Image]| Ok(vec![3; f.len()]), &seqs).unwrap(), 0.0);
    let alternate = |f: &[&Image]| Ok((0..f.len()).map(|i| i % 2).collect());
    assert_eq!(mfr(alternate, &seqs).unwrap(), 1.0);
    assert_eq!(flip_rate(&[0, 0, 1, 1, 1, 2, 2, 2, 0, 0]).unwrap(), 3.0 / 9.0);
    assert!(flip_rate(&[1]).is_err());

    let img = generate(Generator::Shapes10, 1, 0, 8).examples[0].image.clone();
    let kind = PerturbationKind::NoiseWalk { step_rms: 0.02 };
    let real = vec![build_perturbation_sequence(&img, kind, 12, 4).unwrap()];
    let r = mfr(|f: &[&Image]| Ok(f.iter().map(|i| (i.mean() * 50.0) as usize).collect()), &real).unwrap();
    assert!((0.0..=1.0).contains(&r));
}

fn trace(i: usize, head: HeadId) -> SelectionTrace {
    SelectionTrace {
        index: i,
        label: 0,
        chosen_head: head,
        predicted_class: 0,
        score_clean: 0.0,
        score_unclean: 0.0,
        u_clean: 0.0,
        u_unclean: 0.0,
        kl_clean: 0.0,
        kl_unclean: 0.0,
    }
}

#[test]
fn f_correct_fixtures_and_binomial_bounds() {
    let all_clean: Vec<_> = (0..50).map(|i| trace(i, HeadId::Clean)).collect();
    assert_eq!(f_correct(&all_clean, Split::Clean).unwrap(), 1.0);
    assert_eq!(f_correct(&all_clean, Split::Shifted).unwrap(), 0.0);

    let n = 2000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let random: Vec<_> = (0..n)
        .map(|i| trace(i, if rng.gen_bool(0.5) { HeadId::Clean } else { HeadId::Unclean }))
        .collect();
    let sigma = (0.25 / n as f64).sqrt();
    for split in [Split::Clean, Split::Shifted] {
        let f = f_correct(&random, split).unwrap();
        assert!((f - 0.5).abs() <= 3.0 * sigma, "{split:?}: {f}");
        let misrouted = random.iter().filter(|t| t.chosen_head != split.correct_head()).count() as f64 / n as f64;
        assert!((f + misrouted - 1.0).abs() < 1e-12);
    }
    let usage = head_usage(&random);
    assert_eq!(usage.values().sum::<usize>(), n);
    assert!(f_correct(&[], Split::Clean).is_err());
}

#[test]
fn probe_fixtures() {
    let classes = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let one_hot = |y: usize| (0..classes).map(|c| if c == y { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let ys: Vec<usize> = (0..200).map(|i| i % classes).collect();
    let xs: Vec<Vec<f64>> = ys.iter().map(|&y| one_hot(y)).collect();
    let cfg = ProbeConfig::default();
    let acc = linear_probe((&xs, &ys), (&xs, &ys), classes, &cfg).unwrap();
    assert!(acc >= 0.99);

    // Features independent of the labels.
    let n = 800;
    let rand_feats = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    };
    let train_x = rand_feats(&mut rng, n);
    let test_x = rand_feats(&mut rng, n);
    let train_y: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut test_y = train_y.clone();
    test_y.shuffle(&mut rng);
    let acc = linear_probe((&train_x, &train_y), (&test_x, &test_y), classes, &cfg).unwrap();
    let p = 1.0 / classes as f64;
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    assert!((acc - p).abs() <= 3.0 * sigma, "chance-level probe reached {acc}");
    let again = linear_probe((&train_x, &train_y), (&test_x, &test_y), classes, &cfg).unwrap();
    assert_eq!(acc, again);
}

#[test]
fn transfer_probe_is_deterministic() {
    let (_, model) = tiny_model(3, 0.25);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mk = |rng: &mut ChaCha8Rng, n: usize| {
        let examples = (0..n).map(|i| Example { image: random_image(rng), label: i % 3 }).collect();
        Dataset::new("probe", 3, examples).unwrap()
    };
    let (train, test) = (mk(&mut rng, 60), mk(&mut rng, 30));
    let feats = |imgs: &[&Image]| penultimate_features(&model, HeadId::Clean, imgs);
    let cfg = ProbeConfig { epochs: 5, ..Default::default() };
    let a = transfer_probe(feats, &train, &test, &cfg).unwrap();
    assert_eq!(a, transfer_probe(feats, &train, &test, &cfg).unwrap());
    assert!((0.0..=1.0).contains(&a));
}

#[test]
fn evaluation_leaves_the_model_untouched() {
    let (_, model) = tiny_model(4, 0.25);
    let before = encode_multihead(&model, "h").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let examples = (0..20).map(|i| Example { image: random_image(&mut rng), label: i % CLASSES }).collect();
    let ds = Dataset::new("eval", CLASSES, examples).unwrap();
    let sel = evaluate_selection(&model, &ds, &SelectionSettings::default()).unwrap();
    assert_eq!(sel.traces.len(), 20);
    evaluate_accuracy(|imgs| predict_primary(&model, imgs), &ds).unwrap();
    let table = SeverityTable::builtin();
    severity_sweep(|imgs| predict_primary(&model, imgs), &ds, &[CorruptionKind::Fog], 1, &table).unwrap();
    let imgs: Vec<&Image> = ds.examples.iter().map(|e| &e.image).collect();
    penultimate_features(&model, HeadId::Unclean, &imgs).unwrap();
    assert_eq!(encode_multihead(&model, "h").unwrap(), before);
}

fn row(label: &str, mode: &str, selector: Option<&str>, fraction: f64, metrics: &[(&str, f64)]) -> AblationRow {
    AblationRow {
        label: label.into(),
        mode: mode.into(),
        selector: selector.map(Into::into),
        fraction_tuned: fraction,
        metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

#[test]
fn ablation_table_fixtures() {
    let single = ablation_table(vec![row("a", "ours", Some("full"), 0.1, &[("clean_acc", 0.9)])]);
    assert_eq!(single.rows.len(), 1);
    assert_eq!(single.columns, vec!["clean_acc"]);
    assert_eq!(single.cell(0, "clean_acc"), Some(0.9));
    assert!(single.to_text().lines().count() == 2);

    let two = ablation_table(vec![
        row("b", "apt", None, 0.1, &[("clean_acc", 0.8), ("corrupted_acc", 0.6)]),
        row("a", "ours", Some("full"), 0.1, &[("clean_acc", 0.9), ("corrupted_acc", 0.7), ("f_correct_clean", 0.5)]),
    ]);
    assert_eq!(two.rows[0].mode, "ours");
    let diff = two.diff(1, 0).unwrap();
    assert!((diff["corrupted_acc"].unwrap() - 0.1).abs() < 1e-12);
    assert_eq!(diff["f_correct_clean"], None);
    assert!(two.to_text().contains('-'));
    assert!(two.diff(0, 5).is_none());
    let parsed: AblationTable = serde_json::from_str(&two.to_json()).unwrap();
    assert_eq!(parsed, two);
}

proptest! {
    #[test]
    fn ablation_rows_are_stable_under_permutation(seed in any::<u64>()) {
        let modes = ["ours", "apt", "only_kd", "no_kd"];
        let selectors = [None, Some("full"), Some("max_logit")];
        let mut rows = Vec::new();
        for (i, m) in modes.iter().enumerate() {
            for (j, s) in selectors.iter().enumerate() {
                for f in [0.0, 0.1] {
                    rows.push(row(&format!("r{i}{j}{f}"), m, *s, f, &[("clean_acc", i as f64 + j as f64 + f)]));
                }
            }
        }
        let reference = ablation_table(rows.clone());
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(ablation_table(rows), reference);
    }
}
