//! Experiment configuration and the staged end-to-end pipeline.
//!
//! Every stage can run in memory or from the files written by the stage
//! before it. Artifacts live under `<output_dir>/seed_<s>/` and carry the
//! digest of the configuration that produced them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{
    self, Correction, EpochRecord, RevisionOutcome, TrainHistory, TrainRunConfig,
};
use crate::data::{self, GaussianMixtureSpec, LabeledDataset, NoiseGenConfig};
use crate::distill::{self, DistillConfig, DistilledSet};
use crate::error::{Error, Result};
use crate::io::{self, fmt_f64, CsvOut};
use crate::metrics::{
    self, MethodMetrics, MetricsReport, RowSubset, SeedReport, StageFailure, Summary,
};
use crate::nn::{Checkpoint, NetworkParams};
use crate::rng;
use crate::transition::{self, RevisionSlack, TransitionConfig, TransitionFit, TransitionMatrix};

pub const METHOD_CE: &str = "ce";
pub const METHOD_CLASS_T: &str = "class_dependent_t";
pub const METHOD_BAYES_T: &str = metrics::PRIMARY_METHOD;
pub const METHOD_REVISED: &str = "bayes_t_revised";

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "BTLAB_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_mixture")]
    pub mixture: GaussianMixtureSpec,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub noise: NoiseGenConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub transition: TransitionConfig,
    #[serde(default)]
    pub classifier: TrainRunConfig,
    /// Hidden widths shared by the warm-up, transition and classifier networks.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_mixture() -> GaussianMixtureSpec {
    GaussianMixtureSpec::ring(3, 2.5, 1.0)
}
fn default_n_train() -> usize {
    20_000
}
fn default_n_test() -> usize {
    10_000
}
fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mixture: default_mixture(),
            n_train: default_n_train(),
            n_test: default_n_test(),
            noise: NoiseGenConfig::default(),
            distill: DistillConfig::default(),
            transition: TransitionConfig::default(),
            classifier: TrainRunConfig::default(),
            hidden: default_hidden(),
            seeds: default_seeds(),
            output_dir: default_output_dir(),
        }
    }
}

/// Per-seed configuration with every stage seed filled in.
#[derive(Clone, Debug)]
pub struct StageConfigs {
    pub seed: u64,
    pub train_data_seed: u64,
    pub test_data_seed: u64,
    pub split_seed: u64,
    pub noise: NoiseGenConfig,
    pub distill: DistillConfig,
    pub transition: TransitionConfig,
    pub classifier: TrainRunConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        if self.mixture.classes() < 2 {
            return Err(Error::config("mixture needs at least two classes"));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::config("n_train and n_test must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        self.noise.validate()?;
        self.distill.validate()?;
        self.classifier.validate()?;
        if self.transition.batch_size == 0 || !(self.transition.lr > 0.0) {
            return Err(Error::config("transition batch_size and lr must be positive"));
        }
        let (train, val) = split_sizes(self.n_train, self.classifier.validation_fraction);
        if train == 0 || val == 0 {
            return Err(Error::config(format!(
                "n_train {} is too small for a validation fraction of {}",
                self.n_train, self.classifier.validation_fraction
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn digest(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let value = serde_json::to_value(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    pub fn stages(&self, seed: u64) -> StageConfigs {
        let sub = |label: &str| rng::derive_seed(seed, label);
        let mut noise = self.noise.clone();
        noise.projection_seed = sub("noise-projection");
        noise.rate_seed = sub("noise-rate");
        noise.flip_seed = sub("noise-flip");
        let mut distill = self.distill.clone();
        distill.hidden = self.hidden.clone();
        distill.seed = sub("warmup");
        let mut transition = self.transition.clone();
        transition.hidden = self.hidden.clone();
        transition.seed = sub("transition");
        let mut classifier = self.classifier.clone();
        classifier.hidden = self.hidden.clone();
        classifier.seed = sub("classifier");
        StageConfigs {
            seed,
            train_data_seed: sub("data-train"),
            test_data_seed: sub("data-test"),
            split_seed: sub("split"),
            noise,
            distill,
            transition,
            classifier,
        }
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed_{seed}"))
    }
}

fn split_sizes(n: usize, fraction: f64) -> (usize, usize) {
    let val = ((n as f64) * fraction).round() as usize;
    (n.saturating_sub(val), val.min(n))
}

/// Worker pool sized by `BTLAB_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::config(format!("cannot build thread pool: {e}")))
}

/// JSON artifact tagged with the digest of the producing configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stamped<T> {
    pub config_digest: String,
    pub payload: T,
}

fn write_stamped<T: Serialize>(path: &Path, digest: &str, payload: &T) -> Result<()> {
    io::write_json(
        path,
        &Stamped {
            config_digest: digest.to_string(),
            payload,
        },
    )
}

fn provenance_error(path: &Path, found: Option<&str>, expected: &str) -> Error {
    Error::stage(
        "provenance",
        format!(
            "{} was produced by config {} but the current config is {expected}",
            path.display(),
            found.unwrap_or("<unknown>")
        ),
    )
}

fn read_stamped<T: DeserializeOwned>(path: &Path, digest: &str) -> Result<T> {
    let s: Stamped<T> = io::read_json(path)?;
    if s.config_digest != digest {
        return Err(provenance_error(path, Some(&s.config_digest), digest));
    }
    Ok(s.payload)
}

fn check_csv_digest(path: &Path, digest: &str) -> Result<()> {
    let found = io::read_digest(path)?;
    if found.as_deref() != Some(digest) {
        return Err(provenance_error(path, found.as_deref(), digest));
    }
    Ok(())
}

fn save_params(path: &Path, digest: &str, params: &NetworkParams) -> Result<()> {
    write_stamped(path, digest, &params.to_checkpoint())
}

fn load_params(path: &Path, digest: &str) -> Result<NetworkParams> {
    NetworkParams::from_checkpoint(read_stamped::<Checkpoint>(path, digest)?)
}

fn load_dataset(path: &Path, digest: &str) -> Result<LabeledDataset> {
    check_csv_digest(path, digest)?;
    data::read_dataset(path)
}

/// File names inside one seed directory.
pub struct SeedPaths {
    pub dir: PathBuf,
}

impl SeedPaths {
    pub fn new(dir: PathBuf) -> Self {
        Self { dir }
    }
    pub fn create(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))
    }
    pub fn train_clean(&self) -> PathBuf {
        self.dir.join("train_clean.csv")
    }
    pub fn test(&self) -> PathBuf {
        self.dir.join("test.csv")
    }
    pub fn train(&self) -> PathBuf {
        self.dir.join("train.csv")
    }
    pub fn val(&self) -> PathBuf {
        self.dir.join("val.csv")
    }
    pub fn warmup(&self) -> PathBuf {
        self.dir.join("warmup.json")
    }
    pub fn distilled(&self) -> PathBuf {
        self.dir.join("distilled.csv")
    }
    pub fn transition(&self) -> PathBuf {
        self.dir.join("transition.json")
    }
    pub fn classifiers(&self) -> PathBuf {
        self.dir.join("classifiers.json")
    }
    pub fn classifier(&self, method: &str) -> PathBuf {
        self.dir.join(format!("classifier_{method}.json"))
    }
    pub fn train_log(&self, method: &str) -> PathBuf {
        self.dir.join(format!("train_log_{method}.csv"))
    }
    pub fn history(&self, method: &str) -> PathBuf {
        self.dir.join(format!("history_{method}.json"))
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.json")
    }
}

/// Clean training pool and clean test set.
pub fn stage_generate(cfg: &ExperimentConfig, st: &StageConfigs) -> Result<(LabeledDataset, LabeledDataset)> {
    let train = data::generate_mixture(&cfg.mixture, cfg.n_train, st.train_data_seed)?;
    let test = data::generate_mixture(&cfg.mixture, cfg.n_test, st.test_data_seed)?;
    Ok((train, test))
}

/// Noisy labels, then a seeded split into training and noisy validation.
pub fn stage_inject(
    cfg: &ExperimentConfig,
    st: &StageConfigs,
    clean: &LabeledDataset,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let noisy = data::inject_idn_noise(clean, &st.noise)?;
    let (_, n_val) = split_sizes(noisy.len(), cfg.classifier.validation_fraction);
    let mut perm: Vec<usize> = (0..noisy.len()).collect();
    perm.shuffle(&mut rng::stream(st.split_seed, 0));
    let mut val_idx = perm[..n_val].to_vec();
    let mut train_idx = perm[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((noisy.select(&train_idx), noisy.select(&val_idx)))
}

pub fn stage_warmup(st: &StageConfigs, train: &LabeledDataset) -> Result<NetworkParams> {
    distill::warmup_train(train, &st.distill)
}

pub fn stage_distill(st: &StageConfigs, train: &LabeledDataset, warmup: &NetworkParams) -> Result<DistilledSet> {
    let set = distill::collect_distilled(train, warmup, &st.distill)?;
    info!(
        "seed {}: distilled {} of {} examples at rho_max {}",
        st.seed,
        set.len(),
        train.len(),
        st.distill.rho_max
    );
    Ok(set)
}

pub fn stage_transition(st: &StageConfigs, distilled: &DistilledSet) -> Result<TransitionFit> {
    transition::train_transition(distilled, &st.transition)
}

/// Which classifiers the training stage produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodSet {
    /// The instance-dependent method, its revision and both baselines.
    Full,
    /// Only the instance-dependent method.
    Primary,
}

#[derive(Clone, Debug)]
pub struct TrainedMethod {
    pub classifier: NetworkParams,
    pub selected_epoch: usize,
    pub records: Vec<EpochRecord>,
}

/// Summary of the training stage, saved next to the classifier checkpoints.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierStageInfo {
    pub selected_epochs: BTreeMap<String, usize>,
    pub class_dependent_matrix: Option<Vec<Vec<f64>>>,
    pub class_dependent_missing: Vec<usize>,
    pub revision_slack: Option<RevisionSlack>,
    pub revision_val_risks: Vec<f64>,
    pub revision_reverted: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct ClassifierOutputs {
    pub methods: BTreeMap<String, TrainedMethod>,
    pub info: ClassifierStageInfo,
}

fn train_one(
    train: &LabeledDataset,
    val: &LabeledDataset,
    test: &LabeledDataset,
    correction: &Correction<'_>,
    cfg: &TrainRunConfig,
) -> Result<TrainedMethod> {
    let history: TrainHistory = classifier::train_classifier(train, val, correction, cfg, Some(test))?;
    let selected_epoch = classifier::argmin_earliest(&history.val_risks());
    Ok(TrainedMethod {
        classifier: history.checkpoints[selected_epoch].clone(),
        selected_epoch,
        records: history.records,
    })
}

fn matrix_rows(t: &TransitionMatrix) -> Vec<Vec<f64>> {
    (0..t.classes()).map(|i| t.row(i).to_vec()).collect()
}

pub fn stage_classifiers(
    st: &StageConfigs,
    train: &LabeledDataset,
    val: &LabeledDataset,
    test: &LabeledDataset,
    theta: &NetworkParams,
    distilled: &DistilledSet,
    methods: MethodSet,
) -> Result<ClassifierOutputs> {
    let cfg = &st.classifier;
    let mut info = ClassifierStageInfo::default();
    let mut out = BTreeMap::new();
    let instance = Correction::Instance(theta);
    let primary = train_one(train, val, test, &instance, cfg)?;

    if methods == MethodSet::Full {
        out.insert(METHOD_CE.to_string(), train_one(train, val, test, &Correction::Identity, cfg)?);
        let (t_cd, missing) = metrics::class_dependent_matrix(distilled)?;
        info.class_dependent_matrix = Some(matrix_rows(&t_cd));
        info.class_dependent_missing = missing;
        out.insert(
            METHOD_CLASS_T.to_string(),
            train_one(train, val, test, &Correction::Global(t_cd), cfg)?,
        );
        if cfg.revision.epochs > 0 {
            let rev: RevisionOutcome = classifier::finetune_revision(
                &primary.classifier,
                &RevisionSlack::zeros(train.num_classes),
                &instance,
                val,
                cfg,
            )?;
            info.revision_val_risks = rev.val_risks.clone();
            info.revision_reverted = Some(rev.reverted);
            out.insert(
                METHOD_REVISED.to_string(),
                TrainedMethod {
                    classifier: rev.classifier,
                    selected_epoch: primary.selected_epoch,
                    records: Vec::new(),
                },
            );
            info.revision_slack = Some(rev.slack);
        }
    }
    out.insert(METHOD_BAYES_T.to_string(), primary);
    info.selected_epochs = out.iter().map(|(k, m)| (k.clone(), m.selected_epoch)).collect();
    Ok(ClassifierOutputs { methods: out, info })
}

fn correction_for<'a>(method: &str, theta: &'a NetworkParams, info: &ClassifierStageInfo) -> Result<Option<Correction<'a>>> {
    Ok(match method {
        METHOD_CE => None,
        METHOD_BAYES_T => Some(Correction::Instance(theta)),
        METHOD_CLASS_T => {
            let rows = info
                .class_dependent_matrix
                .as_ref()
                .ok_or_else(|| Error::input("class-dependent matrix missing from the training record"))?;
            Some(Correction::Global(TransitionMatrix::from_rows(rows)?))
        }
        METHOD_REVISED => {
            let slack = info
                .revision_slack
                .clone()
                .ok_or_else(|| Error::input("revision slack missing from the training record"))?;
            Some(Correction::Revised { theta, slack })
        }
        other => return Err(Error::input(format!("unknown method `{other}`"))),
    })
}

/// Test accuracies and training-set row errors for every trained method.
pub fn stage_evaluate(
    report: &mut SeedReport,
    train: &LabeledDataset,
    test: &LabeledDataset,
    distilled: &DistilledSet,
    theta: &NetworkParams,
    trained: &ClassifierOutputs,
) -> Result<()> {
    let q = distill::distill_quality(distilled, train)?;
    report.distill_precision = q.precision;
    report.distill_coverage = Some(q.coverage);
    report.distilled_count = Some(distilled.len());
    report.bayes_accuracy_vs_clean = Some(metrics::bayes_accuracy_vs_clean(test));
    report.revision_reverted = trained.info.revision_reverted;
    if !trained.info.class_dependent_missing.is_empty() {
        report.warnings.push(format!(
            "classes {:?} absent from the distilled set; class-dependent rows are uniform",
            trained.info.class_dependent_missing
        ));
    }
    if trained.info.revision_reverted == Some(true) {
        report.warnings.push("revision diverged and was reverted".to_string());
    }
    for (name, m) in &trained.methods {
        let (all, dist, held) = match correction_for(name, theta, &trained.info)? {
            None => (None, None, None),
            Some(c) => (
                metrics::transition_row_l1(&c, train, RowSubset::All)?,
                metrics::transition_row_l1(&c, train, RowSubset::Distilled(&distilled.indices))?,
                metrics::transition_row_l1(&c, train, RowSubset::Heldout(&distilled.indices))?,
            ),
        };
        report.methods.insert(
            name.clone(),
            MethodMetrics {
                test_accuracy_vs_bayes: metrics::accuracy_vs_bayes(&m.classifier, test)?,
                test_accuracy_vs_clean: metrics::accuracy_vs_clean(&m.classifier, test)?,
                selected_epoch: m.selected_epoch,
                mean_row_l1_all: all,
                mean_row_l1_distilled: dist,
                mean_row_l1_heldout: held,
            },
        );
    }
    Ok(())
}

fn tag(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Stage { .. } => e,
        other => Error::stage(stage, other),
    }
}

// ---- file-backed stages ----

fn write_train_log(path: &Path, digest: &str, records: &[EpochRecord]) -> Result<()> {
    let with_test = records.iter().all(|r| r.test_acc_vs_bayes.is_some());
    let mut out = CsvOut::create(path, Some(digest))?;
    let mut header = vec!["epoch", "train_r2", "val_r2"];
    if with_test {
        header.push("test_acc_vs_bayes");
    }
    out.record(header)?;
    for r in records {
        let mut row = vec![r.epoch.to_string(), fmt_f64(r.train_r2), fmt_f64(r.val_r2)];
        if let (true, Some(a)) = (with_test, r.test_acc_vs_bayes) {
            row.push(fmt_f64(a));
        }
        out.record(row)?;
    }
    out.finish()
}

pub fn run_generate(cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    let st = cfg.stages(seed);
    let paths = SeedPaths::new(cfg.seed_dir(seed));
    paths.create()?;
    let digest = cfg.digest();
    let (train, test) = stage_generate(cfg, &st).map_err(tag("generate"))?;
    data::write_dataset(&paths.train_clean(), &train, Some(&digest))?;
    data::write_dataset(&paths.test(), &test, Some(&digest))
}

pub fn run_inject(cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    let st = cfg.stages(seed);
    let paths = SeedPaths::new(cfg.seed_dir(seed));
    let digest = cfg.digest();
    let clean = load_dataset(&paths.train_clean(), &digest)?;
    let (train, val) = stage_inject(cfg, &st, &clean).map_err(tag("inject-noise"))?;
    data::write_dataset(&paths.train(), &train, Some(&digest))?;
    data::write_dataset(&paths.val(), &val, Some(&digest))
}

pub fn run_warmup(cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    let st = cfg.stages(seed);
    let paths = SeedPaths::new(cfg.seed_dir(seed));
    let digest = cfg.digest();
    let train = load_dataset(&paths.train(), &digest)?;
    let w = stage_warmup(&st, &train).map_err(tag("warmup"))?;
    save_params(&paths.warmup(), &digest, &w)
}

pub fn run_distill(cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    let st = cfg.stages(seed);
    let paths = SeedPaths::new(cfg.seed_dir(seed));
    let digest = cfg.digest();
    let train = load_dataset(&paths.train(), &digest)?;
    let w = load_params(&paths.warmup(), &digest)?;
    let set = stage_distill(&st, &train, &w).map_err(tag("distill"))?;
    distill::write_distilled(&paths.distilled(), &set, Some(&digest))
}

fn load_distilled(cfg: &ExperimentConfig, paths: &SeedPaths, digest: &str) -> Result<DistilledSet> {
    check_csv_digest(&paths.distilled(), digest)?;
    distill::read_distilled(&paths.distilled(), cfg.mixture.classes(), cfg.distill.rho_max)
}

pub fn run_train_transition(cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    let st = cfg.stages(seed);
    let paths = SeedPaths::new(cfg.seed_dir(seed));
    let digest = cfg.digest();
    let set = load_distilled(cfg, &paths, &digest)?;
    let fit = stage_transition(&st, &set).map_err(tag("train-transition"))?;
    save_transition(&paths, &digest, &fit)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransitionArtifact {
    network: Checkpoint,
    initial_risk: f64,
    final_risk: f64,
    missing_classes: Vec<usize>,
}

fn save_transition(paths: &SeedPaths, digest: &str, fit: &TransitionFit) -> Result<()> {
    write_stamped(
        &paths.transition(),
        digest,
        &TransitionArtifact {
            network: fit.params.to_checkpoint(),
            initial_risk: fit.initial_risk,
            final_risk: fit.final_risk,
            missing_classes: fit.missing_classes.clone(),
        },
    )
}

fn load_transition(paths: &SeedPaths, digest: &str) -> Result<TransitionFit> {
    let a: TransitionArtifact = read_stamped(&paths.transition(), digest)?;
    Ok(TransitionFit {
        params: NetworkParams::from_checkpoint(a.network)?,
        initial_risk: a.initial_risk,
        final_risk: a.final_risk,
        missing_classes: a.missing_classes,
    })
}

fn save_classifiers(paths: &SeedPaths, digest: &str, out: &ClassifierOutputs) -> Result<()> {
    for (name, m) in &out.methods {
        save_params(&paths.classifier(name), digest, &m.classifier)?;
        if !m.records.is_empty() {
            write_train_log(&paths.train_log(name), digest, &m.records)?;
            write_stamped(&paths.history(name), digest, &m.records)?;
        }
    }
    write_stamped(&paths.classifiers(), digest, &out.info)
}

fn load_classifiers(paths: &SeedPaths, digest: &str) -> Result<ClassifierOutputs> {
    let info: ClassifierStageInfo = read_stamped(&paths.classifiers(), digest)?;
    let mut methods = BTreeMap::new();
    for (name, &epoch) in &info.selected_epochs {
        methods.insert(
            name.clone(),
            TrainedMethod {
                classifier: load_params(&paths.classifier(name), digest)?,
                selected_epoch: epoch,
                records: Vec::new(),
            },
        );
    }
    Ok(ClassifierOutputs { methods, info })
}

pub fn run_train_classifier(cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    let st = cfg.stages(seed);
    let paths = SeedPaths::new(cfg.seed_dir(seed));
    let digest = cfg.digest();
    let train = load_dataset(&paths.train(), &digest)?;
    let val = load_dataset(&paths.val(), &digest)?;
    let test = load_dataset(&paths.test(), &digest)?;
    let fit = load_transition(&paths, &digest)?;
    let set = load_distilled(cfg, &paths, &digest)?;
    let out = stage_classifiers(&st, &train, &val, &test, &fit.params, &set, MethodSet::Full)
        .map_err(tag("train-classifier"))?;
    save_classifiers(&paths, &digest, &out)
}

/// Evaluates one seed from its files and writes `report.json`.
pub fn run_evaluate_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedReport> {
    let paths = SeedPaths::new(cfg.seed_dir(seed));
    let digest = cfg.digest();
    let train = load_dataset(&paths.train(), &digest)?;
    let test = load_dataset(&paths.test(), &digest)?;
    let fit = load_transition(&paths, &digest)?;
    let set = load_distilled(cfg, &paths, &digest)?;
    let trained = load_classifiers(&paths, &digest)?;
    let mut report = SeedReport {
        seed,
        transition_risk_initial: Some(fit.initial_risk),
        transition_risk_final: Some(fit.final_risk),
        ..SeedReport::default()
    };
    stage_evaluate(&mut report, &train, &test, &set, &fit.params, &trained).map_err(tag("evaluate"))?;
    write_stamped(&paths.report(), &digest, &report)?;
    Ok(report)
}

pub fn metrics_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("metrics.json")
}

pub fn comparison_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("comparison.csv")
}

/// Aggregates the reports and writes `metrics.json` and `comparison.csv`.
pub fn write_report(cfg: &ExperimentConfig, per_seed: Vec<SeedReport>) -> Result<MetricsReport> {
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let report = MetricsReport::aggregate(cfg.digest(), per_seed);
    io::write_json(&metrics_path(cfg), &report)?;
    write_comparison(&comparison_path(cfg), &report)?;
    Ok(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn write_comparison(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut out = CsvOut::create(path, Some(&report.config_digest))?;
    out.record([
        "seed",
        "method",
        "test_accuracy_vs_bayes",
        "test_accuracy_vs_clean",
        "mean_row_l1_all",
        "mean_row_l1_distilled",
        "mean_row_l1_heldout",
    ])?;
    for s in &report.per_seed {
        for (name, m) in &s.methods {
            out.record([
                s.seed.to_string(),
                name.clone(),
                fmt_f64(m.test_accuracy_vs_bayes),
                fmt_f64(m.test_accuracy_vs_clean),
                opt(m.mean_row_l1_all),
                opt(m.mean_row_l1_distilled),
                opt(m.mean_row_l1_heldout),
            ])?;
        }
    }
    let mut summaries = vec![(
        report.method.clone(),
        metrics::MethodSummary {
            test_accuracy_vs_bayes: report.test_accuracy_vs_bayes,
            test_accuracy_vs_clean: report.test_accuracy_vs_clean,
            mean_row_l1_all: report.mean_row_l1_all,
            mean_row_l1_distilled: Summary::of_options(
                report
                    .per_seed
                    .iter()
                    .filter_map(|s| s.methods.get(&report.method))
                    .map(|m| m.mean_row_l1_distilled),
            ),
            mean_row_l1_heldout: report.mean_row_l1_heldout,
        },
    )];
    summaries.extend(report.baselines.iter().map(|(k, v)| (k.clone(), v.clone())));
    summaries.sort_by(|a, b| a.0.cmp(&b.0));
    for (stat, pick) in [("mean", 0usize), ("sd", 1)] {
        for (name, m) in &summaries {
            let f = |s: &Summary| opt(if pick == 0 { s.mean } else { s.sd });
            out.record([
                stat.to_string(),
                name.clone(),
                f(&m.test_accuracy_vs_bayes),
                f(&m.test_accuracy_vs_clean),
                f(&m.mean_row_l1_all),
                f(&m.mean_row_l1_distilled),
                f(&m.mean_row_l1_heldout),
            ])?;
        }
    }
    out.finish()
}

// ---- in-memory composition ----

fn run_seed_inner(cfg: &ExperimentConfig, seed: u64, report: &mut SeedReport) -> Result<()> {
    let st = cfg.stages(seed);
    let paths = SeedPaths::new(cfg.seed_dir(seed));
    paths.create()?;
    let digest = cfg.digest();

    let (clean, test) = stage_generate(cfg, &st).map_err(tag("generate"))?;
    data::write_dataset(&paths.train_clean(), &clean, Some(&digest))?;
    data::write_dataset(&paths.test(), &test, Some(&digest))?;

    let (train, val) = stage_inject(cfg, &st, &clean).map_err(tag("inject-noise"))?;
    data::write_dataset(&paths.train(), &train, Some(&digest))?;
    data::write_dataset(&paths.val(), &val, Some(&digest))?;

    let warm = stage_warmup(&st, &train).map_err(tag("warmup"))?;
    save_params(&paths.warmup(), &digest, &warm)?;

    let set = stage_distill(&st, &train, &warm).map_err(tag("distill"))?;
    distill::write_distilled(&paths.distilled(), &set, Some(&digest))?;
    let q = distill::distill_quality(&set, &train)?;
    report.distill_precision = q.precision;
    report.distill_coverage = Some(q.coverage);
    report.distilled_count = Some(set.len());

    let fit = stage_transition(&st, &set).map_err(tag("train-transition"))?;
    save_transition(&paths, &digest, &fit)?;
    report.transition_risk_initial = Some(fit.initial_risk);
    report.transition_risk_final = Some(fit.final_risk);
    if !fit.missing_classes.is_empty() {
        report
            .warnings
            .push(format!("classes {:?} have no distilled examples", fit.missing_classes));
    }

    let trained = stage_classifiers(&st, &train, &val, &test, &fit.params, &set, MethodSet::Full)
        .map_err(tag("train-classifier"))?;
    save_classifiers(&paths, &digest, &trained)?;

    stage_evaluate(report, &train, &test, &set, &fit.params, &trained).map_err(tag("evaluate"))?;
    write_stamped(&paths.report(), &digest, report)
}

/// Full pipeline for one seed; a failing stage yields a partial report.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> SeedReport {
    let mut report = SeedReport {
        seed,
        ..SeedReport::default()
    };
    if let Err(e) = run_seed_inner(cfg, seed, &mut report) {
        warn!("seed {seed}: {e}");
        let (stage, message) = match e {
            Error::Stage { stage, message } => (stage, message),
            other => ("io".to_string(), other.to_string()),
        };
        report.failure = Some(StageFailure { stage, message });
    }
    report
}

/// Runs every configured seed and writes the aggregate reports.
pub fn run_comparison(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let pool = thread_pool()?;
    let per_seed: Vec<SeedReport> = pool.install(|| cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect());
    write_report(cfg, per_seed)
}

// ---- distillation-threshold sweep ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rho: f64,
    pub acc_mean: Option<f64>,
    pub acc_sd: Option<f64>,
    pub distill_precision: Option<f64>,
    pub distill_coverage: Option<f64>,
    /// Some seed produced an empty distilled set or failed downstream.
    pub flagged: bool,
    pub completed_seeds: usize,
}

#[derive(Clone, Debug)]
struct SweepPoint {
    accuracy: Option<f64>,
    precision: Option<f64>,
    coverage: f64,
    flagged: bool,
}

fn sweep_seed(cfg: &ExperimentConfig, seed: u64, rhos: &[f64]) -> Result<Vec<SweepPoint>> {
    let st = cfg.stages(seed);
    let (clean, test) = stage_generate(cfg, &st).map_err(tag("generate"))?;
    let (train, val) = stage_inject(cfg, &st, &clean).map_err(tag("inject-noise"))?;
    let warm = stage_warmup(&st, &train).map_err(tag("warmup"))?;
    let posteriors = crate::nn::forward_probs(&warm, &train.features)?;
    rhos.iter()
        .map(|&rho| {
            let set = distill::collect_from_posteriors(&train, &posteriors, rho)?;
            let q = distill::distill_quality(&set, &train)?;
            let mut point = SweepPoint {
                accuracy: None,
                precision: q.precision,
                coverage: q.coverage,
                flagged: set.is_empty(),
            };
            if set.is_empty() {
                warn!("seed {seed}: rho {rho} admits no examples");
                return Ok(point);
            }
            let fit = stage_transition(&st, &set).map_err(tag("train-transition"))?;
            let out = stage_classifiers(&st, &train, &val, &test, &fit.params, &set, MethodSet::Primary)
                .map_err(tag("train-classifier"))?;
            point.accuracy = Some(metrics::accuracy_vs_bayes(&out.methods[METHOD_BAYES_T].classifier, &test)?);
            Ok(point)
        })
        .collect()
}

/// Repeats distillation and everything downstream for each threshold,
/// reusing data and warm-up per seed.
pub fn sweep_rho(cfg: &ExperimentConfig, rhos: &[f64]) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if rhos.len() < 2 {
        return Err(Error::config("a sweep needs at least two rho values"));
    }
    if let Some(r) = rhos.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::config(format!("rho {r} must lie in [0, 1)")));
    }
    let pool = thread_pool()?;
    let per_seed: Vec<Result<Vec<SweepPoint>>> =
        pool.install(|| cfg.seeds.par_iter().map(|&s| sweep_seed(cfg, s, rhos)).collect());
    let rows: Vec<SweepRow> = rhos
        .iter()
        .enumerate()
        .map(|(k, &rho)| {
            let points: Vec<Option<&SweepPoint>> =
                per_seed.iter().map(|r| r.as_ref().ok().map(|p| &p[k])).collect();
            let acc: Vec<f64> = points.iter().flatten().filter_map(|p| p.accuracy).collect();
            let s = Summary::of(&acc);
            SweepRow {
                rho,
                acc_mean: s.mean,
                acc_sd: s.sd,
                distill_precision: Summary::of_options(points.iter().flatten().map(|p| p.precision)).mean,
                distill_coverage: Summary::of_options(points.iter().flatten().map(|p| Some(p.coverage))).mean,
                flagged: points.iter().any(|p| p.is_none_or(|p| p.flagged || p.accuracy.is_none())),
                completed_seeds: acc.len(),
            }
        })
        .collect();
    for (seed, r) in cfg.seeds.iter().zip(&per_seed) {
        if let Err(e) = r {
            warn!("sweep seed {seed} failed: {e}");
        }
    }
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let digest = cfg.digest();
    write_sweep_csv(&cfg.output_dir.join("sweep.csv"), &digest, &rows)?;
    let svg = sweep_svg(&rows, &digest);
    let svg_path = cfg.output_dir.join("sweep.svg");
    std::fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;
    Ok(rows)
}

fn write_sweep_csv(path: &Path, digest: &str, rows: &[SweepRow]) -> Result<()> {
    let mut out = CsvOut::create(path, Some(digest))?;
    out.record(["rho", "acc_mean", "acc_sd", "distill_precision", "distill_coverage", "flagged"])?;
    for r in rows {
        out.record([
            fmt_f64(r.rho),
            opt(r.acc_mean),
            opt(r.acc_sd),
            opt(r.distill_precision),
            opt(r.distill_coverage),
            r.flagged.to_string(),
        ])?;
    }
    out.finish()
}

/// Line plot of mean accuracy against rho with a shaded one-sd band.
pub fn sweep_svg(rows: &[SweepRow], digest: &str) -> String {
    let (w, h, m) = (560.0, 360.0, 56.0);
    let mut pts: Vec<(f64, f64, f64)> = rows
        .iter()
        .filter_map(|r| r.acc_mean.map(|a| (r.rho, a, r.acc_sd.unwrap_or(0.0))))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (x0, x1) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r.rho), hi.max(r.rho)));
    let (mut y0, mut y1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1 - p.2), hi.max(p.1 + p.2)));
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.1).max(0.005);
    let (y0, y1) = ((y0 - pad).max(0.0), (y1 + pad).min(1.0));
    let span_x = if x1 > x0 { x1 - x0 } else { 1.0 };
    let sx = |x: f64| m + (x - x0) / span_x * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<!-- config_digest={digest} -->");
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    if !pts.is_empty() {
        let upper: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1 + p.2))).collect();
        let lower: Vec<String> = pts.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1 - p.2))).collect();
        let _ = writeln!(
            s,
            r##"<polygon points="{} {}" fill="#4c72b0" fill-opacity="0.25" stroke="none"/>"##,
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(
            s,
            r##"<polyline points="{}" fill="none" stroke="#4c72b0" stroke-width="2"/>"##,
            line.join(" ")
        );
    }
    for r in rows {
        let x = sx(r.rho);
        match r.acc_mean {
            Some(a) => {
                let color = if r.flagged { "#c44e52" } else { "#4c72b0" };
                let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{:.2}" r="4" fill="{color}"/>"#, sy(a));
            }
            None => {
                let y = h - m - 12.0;
                let _ = writeln!(
                    s,
                    r##"<text x="{x:.2}" y="{y:.2}" text-anchor="middle" fill="#c44e52">empty</text>"##
                );
            }
        }
    }
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{b}" stroke="black"/>"#,
        b = h - m,
        r = w - m
    );
    for r in rows {
        let x = sx(r.rho);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            h - m + 18.0,
            r.rho
        );
    }
    for k in 0..=4 {
        let v = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
            m - 6.0,
            sy(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">rho_max</text>"#,
        w / 2.0,
        h - 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">test accuracy vs Bayes label</text>"#,
        h / 2.0,
        h / 2.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_constants() {
        let c = ExperimentConfig::default();
        assert_eq!(c.noise.rate_bound, 0.6);
        assert_eq!(c.distill.rho_max, 0.3);
        assert_eq!(c.classifier.validation_fraction, 0.1);
        assert_eq!(c.distill.warmup_epochs, 5);
        assert_eq!(c.transition.epochs, 5);
        c.validate().unwrap();
    }

    #[test]
    fn empty_json_gives_defaults_and_unknown_keys_fail() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
        let e = ExperimentConfig::from_json(r#"{"n_trian": 5}"#).unwrap_err();
        assert!(e.is_config());
        let e = ExperimentConfig::from_json(r#"{"noise": {"rate": 0.1}}"#).unwrap_err();
        assert!(e.is_config());
    }

    #[test]
    fn noise_rate_above_bound_fails_validation() {
        let c = ExperimentConfig::from_json(r#"{"noise": {"target_rate": 0.7}}"#).unwrap();
        assert!(c.validate().unwrap_err().is_config());
    }

    #[test]
    fn digest_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.digest(), b.digest());
        b.n_test += 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn stage_seeds_are_distinct() {
        let st = ExperimentConfig::default().stages(3);
        let mut all = vec![
            st.train_data_seed,
            st.test_data_seed,
            st.split_seed,
            st.noise.projection_seed,
            st.noise.rate_seed,
            st.noise.flip_seed,
            st.distill.seed,
            st.transition.seed,
            st.classifier.seed,
        ];
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 9);
    }

    #[test]
    fn split_is_disjoint_and_sized() {
        let cfg = ExperimentConfig {
            n_train: 101,
            ..ExperimentConfig::default()
        };
        let st = cfg.stages(0);
        let (clean, _) = stage_generate(&ExperimentConfig { n_test: 1, ..cfg.clone() }, &st).unwrap();
        let (train, val) = stage_inject(&cfg, &st, &clean).unwrap();
        assert_eq!((train.len(), val.len()), (91, 10));
        let tv = train.features.as_slice().len() + val.features.as_slice().len();
        assert_eq!(tv, clean.features.as_slice().len());
    }

    #[test]
    fn svg_is_well_formed_text() {
        let rows = vec![
            SweepRow {
                rho: 0.2,
                acc_mean: Some(0.9),
                acc_sd: Some(0.01),
                distill_precision: Some(1.0),
                distill_coverage: Some(0.4),
                flagged: false,
                completed_seeds: 2,
            },
            SweepRow {
                rho: 0.9,
                acc_mean: None,
                acc_sd: None,
                distill_precision: None,
                distill_coverage: Some(0.0),
                flagged: true,
                completed_seeds: 0,
            },
        ];
        let s = sweep_svg(&rows, "abc");
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("polygon") && s.contains("empty"));
    }
}
