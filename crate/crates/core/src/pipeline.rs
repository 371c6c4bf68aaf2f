//! Config-driven experiment stages with on-disk artifacts.
//!
//! Each stage writes to `<out>/<experiment>/<stage-hash>/` where the hash
//! covers exactly the configuration the stage depends on, so unchanged
//! stages are reused across runs and ablation variants.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{hash_value, RunConfig};
use crate::corruptions::{
    build_augmented_dataset, corrupt_with, AugmentedDataset, CorruptionKind, CorruptionSpec, SeverityTable,
    SEVERITY_LEVELS,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    ablation_bars_svg, ablation_table, corruption_suite, evaluate_accuracy, evaluate_selection_from, f_correct,
    head_distributions, head_usage, mce, mfr, penultimate_features, perturbation_suite, predict_primary,
    severity_curves_svg, sweep_suite, transfer_probe, AblationRow, AblationTable, ProbeConfig, RobustnessReport,
    SeveritySweep, Split, TransferReport,
};
use crate::image::{Dataset, Example, Image};
use crate::inference::{select_batch, PredictiveDistribution, SelectionSettings, SelectionTrace, Selector};
use crate::model::{build_with_layout, clone_frozen_teacher, HeadId, MultiHeadModel, TeacherHandle};
use crate::nn::{stack, Activations, Architecture, Network};
use crate::seed::{derive_seed, derive_seed2};
use crate::training::{distill, robustify_teacher, train_classifier, Teachers};

const STUDENT_CKPT: &str = "student.rdck";
const TEACHER_SMALL_CKPT: &str = "teacher_small.rdck";
const TEACHER_CKPT: &str = "teacher.rdck";
const DISTILLED_CKPT: &str = "distilled.rdck";

/// Which part of the pipeline an error came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageKind {
    Config,
    Training,
    Evaluation,
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageKind::Config => "configuration",
            StageKind::Training => "training",
            StageKind::Evaluation => "evaluation",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{stage} failed: {source}")]
pub struct StageError {
    pub stage: StageKind,
    #[source]
    pub source: Error,
}

impl StageError {
    /// Config errors are always reported as such, whatever stage hit them.
    pub fn new(stage: StageKind, source: Error) -> Self {
        let stage = match source {
            Error::Config { .. } => StageKind::Config,
            _ => stage,
        };
        StageError { stage, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self.stage {
            StageKind::Config => 2,
            StageKind::Training => 3,
            StageKind::Evaluation => 4,
        }
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

trait StageContext<T> {
    fn during(self, stage: StageKind) -> StageResult<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn during(self, stage: StageKind) -> StageResult<T> {
        self.map_err(|e| StageError::new(stage, e))
    }
}

/// The `checkpoints`, `logs`, `reports` and `plots` directories of a run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunDir {
    pub root: PathBuf,
    pub config_hash: String,
}

impl RunDir {
    pub fn new(cfg: &RunConfig, config_hash: String) -> Self {
        RunDir {
            root: cfg.output_root().join(&cfg.experiment).join(&config_hash),
            config_hash,
        }
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(name)
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn plot(&self, name: &str) -> PathBuf {
        self.root.join("plots").join(name)
    }

    fn create(&self, cfg: &RunConfig) -> Result<()> {
        for sub in ["checkpoints", "logs", "reports", "plots"] {
            let dir = self.root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        write_text(&self.root.join("config.toml"), &cfg.to_toml())
    }
}

/// What a stage produced and whether it was served from cache.
#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub dir: RunDir,
    pub cached: bool,
    pub artifacts: Vec<PathBuf>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads a checkpoint written by this stage, treating any mismatch as a
/// cache miss.
fn cached_checkpoint(path: &Path, hash: &str) -> Option<Checkpoint> {
    if !path.exists() {
        return None;
    }
    checkpoint::load(path, Some(hash)).ok()
}

mod salt {
    pub const STUDENT_INIT: u64 = 1;
    pub const STUDENT_TRAIN: u64 = 2;
    pub const TEACHER_INIT: u64 = 3;
    pub const TEACHER_TRAIN: u64 = 4;
    pub const AUGMENT: u64 = 5;
    pub const ROBUSTIFY: u64 = 6;
    pub const HEADS: u64 = 7;
    pub const DISTILL: u64 = 8;
    pub const EVAL: u64 = 9;
    pub const HOLDOUT: u64 = 10;
}

fn severity_table_id(cfg: &RunConfig) -> Result<String> {
    let table = cfg.severity_table()?;
    let rows: BTreeMap<String, Vec<f64>> = table
        .kinds()
        .filter_map(|k| table.magnitudes(k).map(|m| (k.to_string(), m.to_vec())))
        .collect();
    Ok(hash_value(&rows))
}

pub fn pretrain_hash(cfg: &RunConfig) -> String {
    hash_value(&("pretrain", cfg.seed, &cfg.data.train, &cfg.pretrain))
}

pub fn teacher_hash(cfg: &RunConfig) -> Result<String> {
    Ok(hash_value(&(
        "teacher",
        pretrain_hash(cfg),
        &cfg.data.test,
        &cfg.augmentation,
        &cfg.teacher,
        &cfg.evaluation.kinds,
        severity_table_id(cfg)?,
    )))
}

fn distill_hash_with(cfg: &RunConfig, base: &str, teacher: &str) -> Result<String> {
    Ok(hash_value(&(
        "distill",
        base,
        teacher,
        &cfg.augmentation,
        &cfg.partition,
        &cfg.distill,
        severity_table_id(cfg)?,
    )))
}

pub fn distill_hash(cfg: &RunConfig) -> Result<String> {
    distill_hash_with(cfg, &pretrain_hash(cfg), &teacher_hash(cfg)?)
}

fn eval_hash_with(cfg: &RunConfig, model: &str) -> Result<String> {
    Ok(hash_value(&(
        "eval",
        model,
        pretrain_hash(cfg),
        &cfg.data,
        &cfg.evaluation,
        cfg.evaluation_kinds(),
        severity_table_id(cfg)?,
    )))
}

pub fn ablate_hash(cfg: &RunConfig) -> Result<String> {
    Ok(hash_value(&("ablate", distill_hash(cfg)?, eval_hash_with(cfg, "")?, &cfg.ablation)))
}

fn load_dataset(cfg: &RunConfig, field: &str) -> Result<Dataset> {
    let source = match field {
        "data.train" => &cfg.data.train,
        "data.test" => &cfg.data.test,
        other => unreachable!("unknown dataset field {other}"),
    };
    let data = source.load(field)?;
    if data.is_empty() {
        return Err(Error::config(field, "dataset is empty"));
    }
    Ok(data)
}

fn input_shape(data: &Dataset) -> (usize, usize, usize) {
    data.image_shape().expect("nonempty dataset")
}

/// Clean-data pretraining of the desk student and the small teacher.
pub fn cmd_pretrain(cfg: &RunConfig) -> StageResult<StageOutput> {
    cfg.validate().during(StageKind::Config)?;
    let dir = RunDir::new(cfg, pretrain_hash(cfg));
    let student_path = dir.checkpoint(STUDENT_CKPT);
    let teacher_path = dir.checkpoint(TEACHER_SMALL_CKPT);
    let artifacts = vec![student_path.clone(), teacher_path.clone()];
    if cached_checkpoint(&student_path, &dir.config_hash).is_some()
        && cached_checkpoint(&teacher_path, &dir.config_hash).is_some()
    {
        info!("cache hit: pretrain {}", dir.root.display());
        return Ok(StageOutput {
            dir,
            cached: true,
            artifacts,
        });
    }
    let train = load_dataset(cfg, "data.train").during(StageKind::Config)?;
    dir.create(cfg).during(StageKind::Training)?;
    let images: Vec<&Image> = train.examples.iter().map(|e| &e.image).collect();
    let labels = train.labels();
    let shape = input_shape(&train);
    let mut logs = BTreeMap::new();
    for (name, arch, init, train_salt, classifier, path) in [
        (
            "student",
            Architecture::student(shape, train.num_classes),
            salt::STUDENT_INIT,
            salt::STUDENT_TRAIN,
            &cfg.pretrain.student,
            &student_path,
        ),
        (
            "teacher",
            Architecture::teacher(shape, train.num_classes),
            salt::TEACHER_INIT,
            salt::TEACHER_TRAIN,
            &cfg.pretrain.teacher,
            &teacher_path,
        ),
    ] {
        let build_seed = derive_seed(cfg.seed, init);
        let mut net = Network::init(&arch, build_seed).during(StageKind::Training)?;
        let mut ccfg = classifier.clone();
        ccfg.seed = derive_seed2(cfg.seed, train_salt, classifier.seed);
        let log = train_classifier(&mut net, &images, &labels, &ccfg).during(StageKind::Training)?;
        write_jsonl(&dir.log(&format!("pretrain_{name}.jsonl")), &log).during(StageKind::Training)?;
        checkpoint::save(path, &checkpoint::encode_network(&net, &dir.config_hash, build_seed))
            .during(StageKind::Training)?;
        logs.insert(name, log.last().cloned());
    }
    info!("pretrained student and teacher in {}", dir.root.display());
    Ok(StageOutput {
        dir,
        cached: false,
        artifacts,
    })
}

fn load_network(path: &Path, hash: Option<&str>) -> Result<Network> {
    checkpoint::load(path, hash)?.into_network()
}

fn augmented_data(cfg: &RunConfig, train: &Dataset, table: &SeverityTable) -> Result<AugmentedDataset> {
    build_augmented_dataset(
        train,
        &cfg.augmentation.policy,
        cfg.augmentation.ratio,
        derive_seed(cfg.seed, salt::AUGMENT),
        table,
    )
}

/// A single held-out corrupted split: example `i` gets evaluation kind
/// `i mod k` at severity `1 + (i / k) mod 5`.
pub fn corrupted_holdout(
    clean: &Dataset,
    kinds: &[CorruptionKind],
    seed: u64,
    table: &SeverityTable,
) -> Result<Dataset> {
    if kinds.is_empty() {
        return Err(Error::validation("no corruption kinds for the held-out split"));
    }
    let examples = clean
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let kind = kinds[i % kinds.len()];
            let severity = 1 + ((i / kinds.len()) % SEVERITY_LEVELS) as u8;
            let spec = CorruptionSpec::new(kind, severity, derive_seed(seed, i as u64))?;
            Ok(Example {
                image: corrupt_with(&e.image, &spec, table)?,
                label: e.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(format!("{}-holdout", clean.name), clean.num_classes, examples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    pub config_hash: String,
    pub status: crate::training::TeacherStatus,
    pub holdout_before: Option<f64>,
    pub holdout_after: Option<f64>,
}

/// Robustifies the pretrained small teacher on the augmented data.
pub fn cmd_train_teacher(cfg: &RunConfig) -> StageResult<StageOutput> {
    cfg.validate().during(StageKind::Config)?;
    let hash = teacher_hash(cfg).during(StageKind::Config)?;
    let dir = RunDir::new(cfg, hash);
    let path = dir.checkpoint(TEACHER_CKPT);
    if cached_checkpoint(&path, &dir.config_hash).is_some() {
        info!("cache hit: train-teacher {}", dir.root.display());
        return Ok(StageOutput {
            dir,
            cached: true,
            artifacts: vec![path],
        });
    }
    let pre = cmd_pretrain(cfg)?;
    let small = load_network(&pre.artifacts[1], Some(&pre.dir.config_hash)).during(StageKind::Training)?;
    let table = cfg.severity_table().during(StageKind::Config)?;
    let train = load_dataset(cfg, "data.train").during(StageKind::Config)?;
    let test = load_dataset(cfg, "data.test").during(StageKind::Config)?;
    if small.num_classes() != train.num_classes {
        return Err(StageError::new(
            StageKind::Training,
            Error::validation("small teacher and training data disagree on the class set"),
        ));
    }
    dir.create(cfg).during(StageKind::Training)?;
    let data = augmented_data(cfg, &train, &table).during(StageKind::Training)?;
    data.write_manifest(&dir.log("manifest.jsonl")).during(StageKind::Training)?;
    let holdout = corrupted_holdout(
        &test,
        &cfg.evaluation.kinds,
        derive_seed(cfg.seed, salt::HOLDOUT),
        &table,
    )
    .during(StageKind::Training)?;
    let mut tcfg = cfg.teacher.clone();
    tcfg.seed = derive_seed2(cfg.seed, salt::ROBUSTIFY, cfg.teacher.seed);
    let outcome = robustify_teacher(&small, &data, Some(&holdout), &tcfg).during(StageKind::Training)?;
    write_jsonl(&dir.log("teacher.jsonl"), &outcome.log).during(StageKind::Training)?;
    let report = TeacherReport {
        config_hash: dir.config_hash.clone(),
        status: outcome.status,
        holdout_before: outcome.holdout_before,
        holdout_after: outcome.holdout_after,
    };
    write_json(&dir.report("teacher.json"), &report).during(StageKind::Training)?;
    let bytes = checkpoint::encode_network(outcome.teacher.network(), &dir.config_hash, tcfg.seed);
    checkpoint::save(&path, &bytes).during(StageKind::Training)?;
    Ok(StageOutput {
        dir,
        cached: false,
        artifacts: vec![path],
    })
}

/// Explicit checkpoints to use instead of the cached pipeline stages.
#[derive(Clone, Debug, Default)]
pub struct DistillInputs<'a> {
    pub teacher: Option<&'a Path>,
    pub base: Option<&'a Path>,
}

/// Builds the multi-head student and distills it in the configured mode.
pub fn cmd_distill(cfg: &RunConfig, inputs: &DistillInputs<'_>) -> StageResult<StageOutput> {
    cfg.validate().during(StageKind::Config)?;
    let (base, base_id) = match inputs.base {
        Some(p) => {
            let ck = checkpoint::load(p, None).during(StageKind::Training)?;
            let id = ck.meta().config_hash.clone();
            (ck.into_network().during(StageKind::Training)?, id)
        }
        None => {
            let pre = cmd_pretrain(cfg)?;
            let net = load_network(&pre.artifacts[0], Some(&pre.dir.config_hash)).during(StageKind::Training)?;
            (net, pre.dir.config_hash)
        }
    };
    let (teacher, teacher_id) = match inputs.teacher {
        Some(p) => {
            let ck = checkpoint::load(p, None).during(StageKind::Training)?;
            let id = ck.meta().config_hash.clone();
            (ck.into_network().during(StageKind::Training)?, id)
        }
        None => {
            let t = cmd_train_teacher(cfg)?;
            let net = load_network(&t.artifacts[0], Some(&t.dir.config_hash)).during(StageKind::Training)?;
            (net, t.dir.config_hash)
        }
    };
    let hash = distill_hash_with(cfg, &base_id, &teacher_id).during(StageKind::Config)?;
    let dir = RunDir::new(cfg, hash);
    let path = dir.checkpoint(DISTILLED_CKPT);
    if cached_checkpoint(&path, &dir.config_hash).is_some() {
        info!("cache hit: distill {}", dir.root.display());
        return Ok(StageOutput {
            dir,
            cached: true,
            artifacts: vec![path],
        });
    }
    if teacher.num_classes() != base.num_classes() {
        return Err(StageError::new(
            StageKind::Training,
            Error::validation(format!(
                "teacher predicts {} classes, base student {}",
                teacher.num_classes(),
                base.num_classes()
            )),
        ));
    }
    let table = cfg.severity_table().during(StageKind::Config)?;
    let train = load_dataset(cfg, "data.train").during(StageKind::Config)?;
    let data = augmented_data(cfg, &train, &table).during(StageKind::Training)?;
    dir.create(cfg).during(StageKind::Training)?;
    let model = build_with_layout(
        &base,
        cfg.partition.clone(),
        cfg.distill.mode.layout(),
        derive_seed(cfg.seed, salt::HEADS),
    )
    .during(StageKind::Training)?;
    let teachers = Teachers {
        clean: clone_frozen_teacher(&base),
        robust: TeacherHandle::robust(teacher),
    };
    let mut dcfg = cfg.distill.clone();
    dcfg.seed = derive_seed2(cfg.seed, salt::DISTILL, cfg.distill.seed);
    let outcome = distill(model, &teachers, &data, &dcfg).during(StageKind::Training)?;
    write_jsonl(&dir.log("distill.jsonl"), &outcome.log).during(StageKind::Training)?;
    let bytes = checkpoint::encode_multihead(&outcome.model, &dir.config_hash).during(StageKind::Training)?;
    checkpoint::save(&path, &bytes).during(StageKind::Training)?;
    Ok(StageOutput {
        dir,
        cached: false,
        artifacts: vec![path],
    })
}

/// All evaluation inputs that do not depend on the model under test.
struct EvalSuite {
    test: Dataset,
    suite: BTreeMap<CorruptionKind, Vec<Dataset>>,
    baseline: Network,
    baseline_sweep: SeveritySweep,
    sequences: Vec<crate::corruptions::PerturbationSequence>,
    transfer: Option<(Dataset, Dataset)>,
    eval_seed: u64,
}

fn network_predict(net: &Network) -> impl Fn(&[&Image]) -> Result<Vec<usize>> + '_ {
    move |images: &[&Image]| {
        let logits = net.forward(&Activations::from_images(images)?)?;
        Ok(logits.rows().map(crate::nn::argmax).collect())
    }
}

fn build_suite(cfg: &RunConfig) -> StageResult<EvalSuite> {
    let table = cfg.severity_table().during(StageKind::Config)?;
    let test = load_dataset(cfg, "data.test").during(StageKind::Config)?;
    let eval_seed = derive_seed2(cfg.seed, salt::EVAL, cfg.evaluation.seed);
    let suite = corruption_suite(&test, &cfg.evaluation_kinds(), eval_seed, &table).during(StageKind::Evaluation)?;
    let pre = cmd_pretrain(cfg)?;
    let baseline = load_network(&pre.artifacts[0], Some(&pre.dir.config_hash)).during(StageKind::Evaluation)?;
    let baseline_sweep = sweep_suite(&network_predict(&baseline), &suite).during(StageKind::Evaluation)?;
    let p = &cfg.evaluation.perturbation;
    let sequences = perturbation_suite(&test, p.kind, p.length, p.sequences, derive_seed(eval_seed, 1))
        .during(StageKind::Evaluation)?;
    let transfer = match (&cfg.data.transfer_train, &cfg.data.transfer_test) {
        (Some(tr), Some(te)) => Some((
            tr.load("data.transfer_train").during(StageKind::Config)?,
            te.load("data.transfer_test").during(StageKind::Config)?,
        )),
        _ => None,
    };
    Ok(EvalSuite {
        test,
        suite,
        baseline,
        baseline_sweep,
        sequences,
        transfer,
        eval_seed,
    })
}

type Triples = Vec<[PredictiveDistribution; 3]>;

/// Reports for one model under several selectors. Single-head models
/// produce one report with no selector.
fn evaluate_model(
    cfg: &RunConfig,
    suite: &EvalSuite,
    model: &MultiHeadModel,
    config_hash: &str,
    selectors: &[Selector],
) -> Result<Vec<(RobustnessReport, Vec<SelectionTrace>, Vec<SelectionTrace>)>> {
    let ev = &cfg.evaluation;
    let mut base = RobustnessReport {
        config_hash: config_hash.to_string(),
        mode: cfg.distill.mode.name().to_string(),
        fraction_tuned: model.config().fraction_tuned,
        ..Default::default()
    };
    if !model.has_three_heads() {
        let predict = |x: &[&Image]| predict_primary(model, x);
        base.clean_accuracy = evaluate_accuracy(predict, &suite.test)?;
        let sweep = sweep_suite(&predict, &suite.suite)?;
        base.set_sweep(&sweep);
        base.mce = Some(mce(&sweep, &suite.baseline_sweep)?);
        base.mfr = Some(mfr(predict, &suite.sequences)?);
        let head = model.primary_head().name().to_string();
        let shifted: usize = suite.suite.values().flatten().map(Dataset::len).sum();
        base.head_usage = BTreeMap::from([
            ("clean".to_string(), BTreeMap::from([(head.clone(), suite.test.len())])),
            ("shifted".to_string(), BTreeMap::from([(head, shifted)])),
        ]);
        return Ok(vec![(base, Vec::new(), Vec::new())]);
    }
    let clean_dists = head_distributions(model, &suite.test, ev.mc_samples, derive_seed(suite.eval_seed, 100))?;
    let mut shifted: Vec<(CorruptionKind, usize, Triples)> = Vec::new();
    for (k, (kind, sets)) in suite.suite.iter().enumerate() {
        for (s, set) in sets.iter().enumerate() {
            let seed = derive_seed2(suite.eval_seed, 200 + k as u64, s as u64);
            shifted.push((*kind, s, head_distributions(model, set, ev.mc_samples, seed)?));
        }
    }
    let mut out = Vec::with_capacity(selectors.len());
    for &selector in selectors {
        let settings = SelectionSettings {
            mc_samples: ev.mc_samples,
            seed: derive_seed(suite.eval_seed, 300),
            selector,
            aggregation: ev.aggregation,
        };
        let mut report = base.clone();
        report.selector = Some(selector.name().to_string());
        let clean = evaluate_selection_from(&clean_dists, &suite.test.labels(), &settings)?;
        report.clean_accuracy = clean.accuracy;
        let mut sweep = SeveritySweep::new();
        let mut shifted_traces = Vec::new();
        for (kind, s, dists) in &shifted {
            let set = &suite.suite[kind][*s];
            let e = evaluate_selection_from(dists, &set.labels(), &settings)?;
            sweep.entry(*kind).or_insert([0.0; SEVERITY_LEVELS])[*s] = e.accuracy;
            shifted_traces.extend(e.traces);
        }
        report.set_sweep(&sweep);
        report.mce = Some(mce(&sweep, &suite.baseline_sweep)?);
        let predict = |x: &[&Image]| -> Result<Vec<usize>> {
            let r = select_batch(model, &Activations::from_images(x)?, &settings)?;
            Ok(r.iter().map(|r| r.predicted_class).collect())
        };
        report.mfr = Some(mfr(predict, &suite.sequences)?);
        report.f_correct_clean = Some(f_correct(&clean.traces, Split::Clean)?);
        report.f_correct_shifted = Some(f_correct(&shifted_traces, Split::Shifted)?);
        let usage = |t: &[SelectionTrace]| -> BTreeMap<String, usize> {
            head_usage(t).into_iter().map(|(h, n)| (h.name().to_string(), n)).collect()
        };
        report.head_usage = BTreeMap::from([
            ("clean".to_string(), usage(&clean.traces)),
            ("shifted".to_string(), usage(&shifted_traces)),
        ]);
        report.validate()?;
        out.push((report, clean.traces, shifted_traces));
    }
    Ok(out)
}

fn network_penultimate(net: &Network, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let x = Activations::from_images(images)?;
    let feats = stack::forward(&net.layers[..net.layers.len() - 1], &x)?;
    Ok(feats.rows().map(<[f64]>::to_vec).collect())
}

fn evaluate_transfer(cfg: &RunConfig, suite: &EvalSuite, model: &MultiHeadModel) -> Result<Option<TransferReport>> {
    let Some((train, test)) = &suite.transfer else {
        return Ok(None);
    };
    let probe = ProbeConfig {
        seed: derive_seed2(suite.eval_seed, 400, cfg.evaluation.probe.seed),
        ..cfg.evaluation.probe
    };
    let original = transfer_probe(|x: &[&Image]| network_penultimate(&suite.baseline, x), train, test, &probe)?;
    let head = if model.has_three_heads() {
        HeadId::Clean
    } else {
        model.primary_head()
    };
    let distilled = transfer_probe(|x: &[&Image]| penultimate_features(model, head, x), train, test, &probe)?;
    Ok(Some(TransferReport::new(train.name.clone(), original, distilled)))
}

fn load_student(path: &Path, test: &Dataset) -> Result<MultiHeadModel> {
    let ck = checkpoint::load(path, None)?;
    let expected = Architecture::student(input_shape(test), test.num_classes).hash();
    let meta = ck.meta();
    if meta.architecture_hash != expected {
        return Err(Error::Checkpoint(format!(
            "{} has architecture {}, config expects {expected}",
            path.display(),
            meta.architecture_hash
        )));
    }
    ck.into_multihead()
}

/// Runs the configured evaluation suites on a distilled checkpoint.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: Option<&Path>) -> StageResult<StageOutput> {
    cfg.validate().during(StageKind::Config)?;
    let path = match checkpoint_path {
        Some(p) => p.to_path_buf(),
        None => cmd_distill(cfg, &DistillInputs::default())?.artifacts[0].clone(),
    };
    let suite = build_suite(cfg)?;
    let model = load_student(&path, &suite.test).during(StageKind::Evaluation)?;
    let model_id = checkpoint::load(&path, None)
        .during(StageKind::Evaluation)?
        .meta()
        .config_hash
        .clone();
    let hash = eval_hash_with(cfg, &model_id).during(StageKind::Config)?;
    let dir = RunDir::new(cfg, hash);
    dir.create(cfg).during(StageKind::Evaluation)?;
    let mut results =
        evaluate_model(cfg, &suite, &model, &dir.config_hash, &[cfg.evaluation.selector]).during(StageKind::Evaluation)?;
    let (report, clean_traces, shifted_traces) = results.remove(0);
    let transfer = evaluate_transfer(cfg, &suite, &model).during(StageKind::Evaluation)?;
    let mut artifacts = vec![dir.report("robustness.json")];
    write_json(&artifacts[0], &report).during(StageKind::Evaluation)?;
    if let Some(t) = &transfer {
        artifacts.push(dir.report("transfer.json"));
        write_json(&dir.report("transfer.json"), t).during(StageKind::Evaluation)?;
    }
    if model.has_three_heads() {
        write_jsonl(&dir.report("traces_clean.jsonl"), &clean_traces).during(StageKind::Evaluation)?;
        write_jsonl(&dir.report("traces_shifted.jsonl"), &shifted_traces).during(StageKind::Evaluation)?;
    }
    let sweep = report.sweep().during(StageKind::Evaluation)?;
    let title = format!("{} accuracy vs severity", report.mode);
    write_text(&dir.plot("severity.svg"), &severity_curves_svg(&title, &sweep)).during(StageKind::Evaluation)?;
    artifacts.push(dir.plot("severity.svg"));
    Ok(StageOutput {
        dir,
        cached: false,
        artifacts,
    })
}

/// Config for one ablation cell.
pub fn variant(cfg: &RunConfig, mode: crate::training::DistillMode, fraction: f64) -> RunConfig {
    let mut v = cfg.clone();
    v.distill.mode = mode;
    v.partition.fraction_tuned = fraction;
    v
}

/// Mode x fraction x selector sweep; distilled checkpoints are reused from
/// their stage directories when present.
pub fn cmd_ablate(cfg: &RunConfig) -> StageResult<(StageOutput, AblationTable)> {
    cfg.validate().during(StageKind::Config)?;
    let hash = ablate_hash(cfg).during(StageKind::Config)?;
    let dir = RunDir::new(cfg, hash);
    let table_path = dir.report("ablation.json");
    if let Ok(table) = read_json::<AblationTable>(&table_path) {
        info!("cache hit: ablate {}", dir.root.display());
        return Ok((
            StageOutput {
                dir,
                cached: true,
                artifacts: vec![table_path],
            },
            table,
        ));
    }
    let suite = build_suite(cfg)?;
    let mut rows = Vec::new();
    for &mode in &cfg.ablation.modes {
        for &fraction in &cfg.ablation.fractions {
            let v = variant(cfg, mode, fraction);
            v.validate().during(StageKind::Config)?;
            let out = cmd_distill(&v, &DistillInputs::default())?;
            let model = load_student(&out.artifacts[0], &suite.test).during(StageKind::Evaluation)?;
            let results = evaluate_model(&v, &suite, &model, &out.dir.config_hash, &cfg.ablation.selectors)
                .during(StageKind::Evaluation)?;
            for (report, _, _) in results {
                let label = match &report.selector {
                    Some(s) => format!("{}@{fraction}/{s}", mode.name()),
                    None => format!("{}@{fraction}", mode.name()),
                };
                rows.push(AblationRow::from_report(label, &report));
            }
        }
    }
    let table = ablation_table(rows);
    dir.create(cfg).during(StageKind::Evaluation)?;
    write_json(&table_path, &table).during(StageKind::Evaluation)?;
    write_text(&dir.report("ablation.txt"), &table.to_text()).during(StageKind::Evaluation)?;
    write_text(
        &dir.plot("ablation.svg"),
        &ablation_bars_svg("corrupted accuracy", &table, "corrupted_acc"),
    )
    .during(StageKind::Evaluation)?;
    Ok((
        StageOutput {
            dir,
            cached: false,
            artifacts: vec![table_path],
        },
        table,
    ))
}

/// Collects `reports/robustness.json` (and ablation tables) from run
/// directories into one table. Directories without reports are skipped.
pub fn cmd_report(dirs: &[PathBuf]) -> StageResult<AblationTable> {
    let mut rows = Vec::new();
    for dir in dirs {
        let report_path = dir.join("reports").join("robustness.json");
        if report_path.exists() {
            let report: RobustnessReport = read_json(&report_path).during(StageKind::Evaluation)?;
            let label = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| report.config_hash.clone());
            rows.push(AblationRow::from_report(label, &report));
        }
        let ablation_path = dir.join("reports").join("ablation.json");
        if ablation_path.exists() {
            let table: AblationTable = read_json(&ablation_path).during(StageKind::Evaluation)?;
            rows.extend(table.rows);
        }
    }
    Ok(ablation_table(rows))
}

/// Every run directory of an experiment.
pub fn experiment_dirs(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let root = cfg.output_root().join(&cfg.experiment);
    let mut dirs = Vec::new();
    let entries = match std::fs::read_dir(&root) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(dirs),
        Err(e) => return Err(Error::io(&root, e)),
    };
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(&root, e))?;
        if entry.path().is_dir() {
            dirs.push(entry.path());
        }
    }
    dirs.sort();
    Ok(dirs)
}
