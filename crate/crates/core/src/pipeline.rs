//! Stage orchestration: data generation, the four training stages,
//! counterfactual generation (including the ablation grid), evaluation, and
//! run manifests with content hashes.
//!
//! Every stage is a pure function of (config, seed): run manifests list the
//! deterministic output files with their hashes, while wall-clock numbers go
//! to separate timing files that are never hashed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, checkpoint_hash, load_checkpoint_into, save_checkpoint};
use crate::config::{ExperimentConfig, Method};
use crate::diffusion::{train_denoiser, DenoiserArch, DenoiserModel};
use crate::error::{Error, Result};
use crate::guidance::{
    diff_ice, CounterfactualRecord, GuidanceConfig, GuidanceModels, IterationScores,
    ScoringModels,
};
use crate::metrics::{build_report, score_records, MetricsReport};
use crate::models::{
    balanced_accuracy, segmentation_mean_iou, train_classifier, train_featurenet, train_oracle,
    FeatureNet, OracleModel, QualityClassifier,
};
use crate::rng::sha256_hex;
use crate::schedule::{build_schedule, respace, NoiseSchedule};
use crate::synth::{
    dataset_hash, generate_samples, image_to_pgm, load_dataset, persist_dataset, pgm_to_image,
    Label, LoadedSample, IMG_H, IMG_W,
};
use crate::tensor::Tensor;

pub const ROLE_DIFFUSION: &str = "diffusion";
pub const ROLE_CLASSIFIER: &str = "classifier";
pub const ROLE_ORACLE: &str = "oracle";
pub const ROLE_FEAT_GUID: &str = "feat_guid";
pub const ROLE_FEAT_EVAL: &str = "feat_eval";

pub struct Paths {
    root: PathBuf,
}

impl Paths {
    pub fn new(root: &Path) -> Self {
        Paths {
            root: root.to_path_buf(),
        }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn splits(&self) -> PathBuf {
        self.data().join("splits.json")
    }

    pub fn checkpoint(&self, role: &str) -> PathBuf {
        self.root.join("checkpoints").join(role)
    }

    pub fn records(&self, method: &str) -> PathBuf {
        self.root.join("records").join(method)
    }

    pub fn reports(&self, method: &str) -> PathBuf {
        self.root.join("reports").join(method)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
}

/// Deterministic record of a stage run. Wall-clock data deliberately lives
/// elsewhere so re-runs produce byte-identical manifests.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<OutputEntry>,
}

fn write_run_manifest(
    dir: &Path,
    stage: &str,
    cfg: &ExperimentConfig,
    inputs: BTreeMap<String, String>,
    output_files: &[PathBuf],
) -> Result<RunManifest> {
    let mut outputs = Vec::with_capacity(output_files.len());
    for path in output_files {
        let rel = path
            .strip_prefix(&cfg.out_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/");
        outputs.push(OutputEntry {
            sha256: sha256_hex(&fs::read(path)?),
            path: rel,
        });
    }
    outputs.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = RunManifest {
        stage: stage.to_string(),
        config_hash: cfg.content_hash(),
        inputs,
        outputs,
    };
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("run_manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn list_files_recursive(dir: &Path, skip: &[&str]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let mut entries: Vec<_> = fs::read_dir(&d)?.collect::<std::io::Result<_>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let path = e.path();
            let name = path.file_name().unwrap_or_default().to_string_lossy().to_string();
            if skip.contains(&name.as_str()) {
                continue;
            }
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

// ---- synth ----

pub fn stage_synth(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let paths = Paths::new(&cfg.out_dir);
    let samples = generate_samples(cfg.data.total(), &cfg.data.balance, cfg.seed, &cfg.data.knobs)?;
    persist_dataset(&paths.data(), &samples, cfg.seed, &cfg.data.knobs)?;

    let (train, val, test) =
        crate::models::split_indices(cfg.data.total(), cfg.data.n_train, cfg.data.n_val, cfg.seed);
    let splits = Splits { train, val, test };
    fs::write(paths.splits(), serde_json::to_vec_pretty(&splits)?)?;

    let files = list_files_recursive(&paths.data(), &["run_manifest.json"])?;
    write_run_manifest(&paths.data(), "synth", cfg, BTreeMap::new(), &files)
}

pub struct DatasetView {
    pub samples: Vec<LoadedSample>,
    pub splits: Splits,
    pub hash: String,
}

impl DatasetView {
    pub fn subset(&self, indices: &[usize]) -> Vec<LoadedSample> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<DatasetView> {
    let paths = Paths::new(&cfg.out_dir);
    let (_, samples) = load_dataset(&paths.data()).map_err(|_| Error::MissingStage {
        stage: "training".into(),
        hint: "synth".into(),
    })?;
    let splits: Splits = serde_json::from_slice(&fs::read(paths.splits())?)?;
    let hash = dataset_hash(&paths.data())?;
    Ok(DatasetView {
        samples,
        splits,
        hash,
    })
}

// ---- training stages ----

pub fn sampling_schedule(cfg: &ExperimentConfig) -> Result<NoiseSchedule> {
    let base = build_schedule(cfg.diffusion.t_train, cfg.diffusion.schedule)?;
    respace(&base, cfg.diffusion.t_sample)
}

fn write_loss_trace(path: &Path, trace: &[(usize, f32)]) -> Result<()> {
    let mut csv = String::from("iteration,loss\n");
    for (i, l) in trace {
        csv.push_str(&format!("{i},{l}\n"));
    }
    fs::write(path, csv)?;
    Ok(())
}

pub fn stage_train_diffusion(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let data = load_data(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    let train_images: Vec<Tensor<f32>> = data
        .splits
        .train
        .iter()
        .map(|&i| data.samples[i].image.clone())
        .collect();
    let schedule = build_schedule(cfg.diffusion.t_train, cfg.diffusion.schedule)?;
    let (model, trace) = train_denoiser(&train_images, &schedule, &cfg.diffusion.train, cfg.seed)?;

    let dir = paths.checkpoint(ROLE_DIFFUSION);
    fs::create_dir_all(&dir)?;
    write_loss_trace(&dir.join("loss_trace.csv"), &trace)?;
    save_checkpoint(
        &dir,
        ROLE_DIFFUSION,
        cfg.seed,
        &data.hash,
        serde_json::to_value(cfg.diffusion.train.arch)?,
        serde_json::json!({
            "final_loss": trace.last().map(|(_, l)| *l),
            "iterations": trace.len(),
        }),
        &model.params(),
    )?;
    let files = list_files_recursive(&dir, &["run_manifest.json", "loss_trace.csv"])?;
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset".into(), data.hash.clone());
    write_run_manifest(&dir, "train-diffusion", cfg, inputs, &files)
}

pub fn stage_train_classifier(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let data = load_data(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    let train = data.subset(&data.splits.train);
    let val = data.subset(&data.splits.val);

    let classifier = train_classifier(
        &train,
        &val,
        &cfg.classifier.segmenter,
        &cfg.classifier.predictor,
        cfg.seed,
    )?;
    let bal_acc = balanced_accuracy(&classifier, &val)?;
    let iou = segmentation_mean_iou(&classifier.segmenter, &val)?;

    let dir = paths.checkpoint(ROLE_CLASSIFIER);
    let params = classifier_params(&classifier);
    save_checkpoint(
        &dir,
        ROLE_CLASSIFIER,
        cfg.seed,
        &data.hash,
        serde_json::json!({"segmenter_channels": [8, 16, 32], "predictor_layers": 4}),
        serde_json::json!({
            "balanced_accuracy_val": bal_acc,
            "segmentation_mean_iou_val": iou,
            "temperature": classifier.temperature_value(),
        }),
        &params,
    )?;
    let files = list_files_recursive(&dir, &["run_manifest.json"])?;
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset".into(), data.hash.clone());
    write_run_manifest(&dir, "train-classifier", cfg, inputs, &files)
}

/// Namespaced parameter list of the composite classifier, in a stable order.
fn classifier_params(classifier: &QualityClassifier<f32>) -> Vec<(&'static str, &Tensor<f32>)> {
    let mut v = Vec::new();
    for (name, t) in classifier.segmenter.params() {
        v.push((prefix_name("segmenter.", name), t));
    }
    for (name, t) in classifier.predictor.params() {
        v.push((prefix_name("predictor.", name), t));
    }
    v.push(("temperature", &classifier.temperature));
    v
}

fn classifier_params_mut(
    classifier: &mut QualityClassifier<f32>,
) -> Vec<(&'static str, &mut Tensor<f32>)> {
    let mut v = Vec::new();
    for (name, t) in classifier.segmenter.params_mut() {
        v.push((prefix_name("segmenter.", name), t));
    }
    for (name, t) in classifier.predictor.params_mut() {
        v.push((prefix_name("predictor.", name), t));
    }
    v.push(("temperature", &mut classifier.temperature));
    v
}

/// Interns the small fixed set of namespaced parameter names.
fn prefix_name(prefix: &str, name: &str) -> &'static str {
    use std::collections::HashMap;
    use std::sync::Mutex;
    use std::sync::OnceLock;
    static NAMES: OnceLock<Mutex<HashMap<String, &'static str>>> = OnceLock::new();
    let mut map = NAMES
        .get_or_init(|| Mutex::new(HashMap::new()))
        .lock()
        .expect("name cache");
    let key = format!("{prefix}{name}");
    if let Some(&s) = map.get(&key) {
        return s;
    }
    let leaked: &'static str = Box::leak(key.clone().into_boxed_str());
    map.insert(key, leaked);
    leaked
}

pub fn stage_train_oracle(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let data = load_data(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    let train = data.subset(&data.splits.train);
    let val = data.subset(&data.splits.val);
    // Distinct seed stream: the oracle must share nothing with the guide.
    let (oracle, _) = train_oracle(&train, &cfg.oracle, cfg.seed ^ ORACLE_SEED_SALT)?;

    let mut agree = 0usize;
    for s in &val {
        let predicted = oracle.score(&s.image)?.overall >= 0.5;
        if predicted == (s.label == Label::Sp) {
            agree += 1;
        }
    }
    let dir = paths.checkpoint(ROLE_ORACLE);
    save_checkpoint(
        &dir,
        ROLE_ORACLE,
        cfg.seed,
        &data.hash,
        serde_json::json!({"trunk_channels": [10, 20, 20], "heads": ["overall", "th", "csp", "fp"]}),
        serde_json::json!({"val_overall_accuracy": agree as f64 / val.len().max(1) as f64}),
        &oracle.params(),
    )?;
    let files = list_files_recursive(&dir, &["run_manifest.json"])?;
    let mut inputs = BTreeMap::new();
    inputs.insert("dataset".into(), data.hash.clone());
    write_run_manifest(&dir, "train-oracle", cfg, inputs, &files)
}

pub fn stage_train_features(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let data = load_data(cfg)?;
    let paths = Paths::new(&cfg.out_dir);
    let train = data.subset(&data.splits.train);

    let mut manifests = Vec::new();
    for (role, noise, scale, seed_salt) in [
        (
            ROLE_FEAT_GUID,
            cfg.features.guidance_noise,
            cfg.features.guidance_output_scale,
            FEAT_GUID_SEED_SALT,
        ),
        (ROLE_FEAT_EVAL, cfg.features.evaluation_noise, 1.0, FEAT_EVAL_SEED_SALT),
    ] {
        let (net, _) = train_featurenet(
            &train,
            cfg.features.dim,
            noise,
            scale,
            &cfg.features.train,
            cfg.seed ^ seed_salt,
        )?;
        let dir = paths.checkpoint(role);
        save_checkpoint(
            &dir,
            role,
            cfg.seed,
            &data.hash,
            serde_json::json!({"dim": net.dim, "input_hw": [IMG_H, IMG_W]}),
            serde_json::json!({"train_noise": noise}),
            &net.params(),
        )?;
        let files = list_files_recursive(&dir, &["run_manifest.json"])?;
        let mut inputs = BTreeMap::new();
        inputs.insert("dataset".into(), data.hash.clone());
        manifests.push(write_run_manifest(&dir, "train-features", cfg, inputs, &files)?);
    }
    Ok(manifests.pop().expect("two feature nets"))
}

const ORACLE_SEED_SALT: u64 = 0x0a5a_c1e0;
const FEAT_GUID_SEED_SALT: u64 = 0x6f2a_11d7;
const FEAT_EVAL_SEED_SALT: u64 = 0x94c3_55e1;

// ---- model bundle ----

pub struct ModelBundle {
    pub denoiser: DenoiserModel<f32>,
    pub classifier: QualityClassifier<f32>,
    pub oracle: OracleModel<f32>,
    pub feat_guid: FeatureNet<f32>,
    pub feat_eval: FeatureNet<f32>,
    pub schedule: NoiseSchedule,
    pub checkpoint_hashes: BTreeMap<String, String>,
}

impl ModelBundle {
    pub fn guidance_models(&self) -> GuidanceModels<'_> {
        GuidanceModels {
            denoiser: &self.denoiser,
            classifier: &self.classifier,
            feat_guid: &self.feat_guid,
        }
    }

    pub fn scoring_models(&self) -> ScoringModels<'_> {
        ScoringModels {
            oracle: &self.oracle,
            feat_eval: &self.feat_eval,
        }
    }
}

fn require_checkpoint(paths: &Paths, role: &str, stage: &str, hint: &str) -> Result<PathBuf> {
    let dir = paths.checkpoint(role);
    if !dir.join(checkpoint::MANIFEST_FILE).exists() {
        return Err(Error::MissingStage {
            stage: stage.into(),
            hint: hint.into(),
        });
    }
    Ok(dir)
}

pub fn load_bundle(cfg: &ExperimentConfig, stage: &str) -> Result<ModelBundle> {
    let paths = Paths::new(&cfg.out_dir);
    let mut hashes = BTreeMap::new();

    let dir = require_checkpoint(&paths, ROLE_DIFFUSION, stage, "train-diffusion")?;
    let manifest = checkpoint::read_manifest(&dir)?;
    let arch: DenoiserArch = serde_json::from_value(manifest.arch.clone())?;
    let mut denoiser = DenoiserModel::init(arch, &mut crate::rng::derive_rng(0, "skeleton", &[]));
    load_checkpoint_into(&dir, denoiser.params_mut())?;
    hashes.insert(ROLE_DIFFUSION.into(), checkpoint_hash(&dir)?);

    let dir = require_checkpoint(&paths, ROLE_CLASSIFIER, stage, "train-classifier")?;
    let mut classifier = QualityClassifier::init(&mut crate::rng::derive_rng(0, "skeleton", &[]));
    load_checkpoint_into(&dir, classifier_params_mut(&mut classifier))?;
    hashes.insert(ROLE_CLASSIFIER.into(), checkpoint_hash(&dir)?);

    let dir = require_checkpoint(&paths, ROLE_ORACLE, stage, "train-oracle")?;
    let mut oracle = OracleModel::init(&mut crate::rng::derive_rng(0, "skeleton", &[]));
    load_checkpoint_into(&dir, oracle.params_mut())?;
    hashes.insert(ROLE_ORACLE.into(), checkpoint_hash(&dir)?);

    let mut feats = Vec::new();
    for role in [ROLE_FEAT_GUID, ROLE_FEAT_EVAL] {
        let dir = require_checkpoint(&paths, role, stage, "train-features")?;
        let manifest = checkpoint::read_manifest(&dir)?;
        let dim = manifest.arch["dim"].as_u64().ok_or_else(|| {
            Error::Checkpoint("feature checkpoint missing dim".into())
        })? as usize;
        let mut net = FeatureNet::init(
            dim,
            (IMG_H, IMG_W),
            &mut crate::rng::derive_rng(0, "skeleton", &[]),
        );
        load_checkpoint_into(&dir, net.params_mut())?;
        hashes.insert(role.into(), checkpoint_hash(&dir)?);
        feats.push(net);
    }
    let feat_eval = feats.pop().expect("eval net");
    let feat_guid = feats.pop().expect("guid net");

    Ok(ModelBundle {
        denoiser,
        classifier,
        oracle,
        feat_guid,
        feat_eval,
        schedule: sampling_schedule(cfg)?,
        checkpoint_hashes: hashes,
    })
}

// ---- generation ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordFile {
    pub image_id: u64,
    pub master_seed: u64,
    pub config: GuidanceConfig,
    pub chosen_lambda_c: f64,
    pub input_p_sp: f64,
    pub input_oracle: crate::models::OracleScores,
    pub scores: Vec<IterationScores>,
    pub input_image: String,
    pub iteration_images: Vec<String>,
}

/// The ground-truth NSP test images, in stable index order.
pub fn nsp_test_ids(data: &DatasetView, cap: Option<usize>) -> Vec<usize> {
    let mut ids: Vec<usize> = data
        .splits
        .test
        .iter()
        .copied()
        .filter(|&i| data.samples[i].label == Label::Nsp)
        .collect();
    ids.sort_unstable();
    if let Some(cap) = cap {
        ids.truncate(cap);
    }
    ids
}

/// Generate records for a set of images under one guidance config,
/// parallelized over images. Results are identical for any `jobs` because
/// every stream is derived from (seed, image id) alone.
pub fn generate_records(
    data: &DatasetView,
    ids: &[usize],
    gcfg: &GuidanceConfig,
    bundle: &ModelBundle,
    master_seed: u64,
    jobs: usize,
) -> Result<Vec<CounterfactualRecord>> {
    let jobs = jobs.max(1).min(ids.len().max(1));
    let models = bundle.guidance_models();
    let scoring = bundle.scoring_models();
    let mut slots: Vec<Option<Result<CounterfactualRecord>>> = Vec::new();
    slots.resize_with(ids.len(), || None);

    if jobs == 1 {
        for (slot, &id) in slots.iter_mut().zip(ids) {
            *slot = Some(diff_ice(
                &data.samples[id].image,
                gcfg,
                &models,
                &scoring,
                &bundle.schedule,
                master_seed,
                id as u64,
            ));
        }
    } else {
        let chunks = split_round_robin(ids.len(), jobs);
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for chunk in &chunks {
                let chunk = chunk.clone();
                let models = &models;
                let scoring = &scoring;
                let schedule = &bundle.schedule;
                let samples = &data.samples;
                handles.push(scope.spawn(move || {
                    chunk
                        .into_iter()
                        .map(|pos| {
                            let id = ids[pos];
                            (
                                pos,
                                diff_ice(
                                    &samples[id].image,
                                    gcfg,
                                    models,
                                    scoring,
                                    schedule,
                                    master_seed,
                                    id as u64,
                                ),
                            )
                        })
                        .collect::<Vec<_>>()
                }));
            }
            for h in handles {
                for (pos, res) in h.join().expect("generation worker") {
                    slots[pos] = Some(res);
                }
            }
        });
    }
    slots
        .into_iter()
        .map(|s| s.expect("slot filled"))
        .collect()
}

fn split_round_robin(n: usize, jobs: usize) -> Vec<Vec<usize>> {
    let mut chunks = vec![Vec::new(); jobs];
    for i in 0..n {
        chunks[i % jobs].push(i);
    }
    chunks.retain(|c| !c.is_empty());
    chunks
}

pub fn persist_records(
    dir: &Path,
    records: &[CounterfactualRecord],
) -> Result<(Vec<PathBuf>, PathBuf)> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let mut timings: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for r in records {
        let rdir = dir.join(format!("img_{:05}", r.image_id));
        fs::create_dir_all(&rdir)?;
        let input_rel = "input.pgm".to_string();
        fs::write(rdir.join(&input_rel), image_to_pgm(&r.original))?;
        files.push(rdir.join(&input_rel));
        let mut iteration_images = Vec::new();
        for (i, img) in r.iterations.iter().enumerate() {
            let rel = format!("iter_{}.pgm", i + 1);
            fs::write(rdir.join(&rel), image_to_pgm(img))?;
            files.push(rdir.join(&rel));
            iteration_images.push(rel);
        }
        let record_file = RecordFile {
            image_id: r.image_id,
            master_seed: r.master_seed,
            config: r.config.clone(),
            chosen_lambda_c: r.chosen_lambda_c,
            input_p_sp: r.input_p_sp,
            input_oracle: r.input_oracle,
            scores: r.scores.clone(),
            input_image: input_rel,
            iteration_images,
        };
        fs::write(
            rdir.join("record.json"),
            serde_json::to_vec_pretty(&record_file)?,
        )?;
        files.push(rdir.join("record.json"));
        timings.insert(r.image_id, r.seconds_per_iteration.clone());
    }
    let timings_path = dir.join("timings.json");
    fs::write(&timings_path, serde_json::to_vec_pretty(&timings)?)?;
    Ok((files, timings_path))
}

pub fn load_records(dir: &Path) -> Result<Vec<CounterfactualRecord>> {
    if !dir.exists() {
        return Err(Error::MissingStage {
            stage: "evaluate".into(),
            hint: "generate".into(),
        });
    }
    let timings: BTreeMap<u64, Vec<f64>> = match fs::read(dir.join("timings.json")) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(_) => BTreeMap::new(),
    };
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    let mut out = Vec::with_capacity(entries.len());
    for rdir in entries {
        let rf: RecordFile = serde_json::from_slice(&fs::read(rdir.join("record.json"))?)?;
        let original = pgm_to_image(&fs::read(rdir.join(&rf.input_image))?)?;
        let mut iterations = Vec::with_capacity(rf.iteration_images.len());
        for rel in &rf.iteration_images {
            iterations.push(pgm_to_image(&fs::read(rdir.join(rel))?)?);
        }
        let seconds = timings
            .get(&rf.image_id)
            .cloned()
            .unwrap_or_else(|| vec![0.0; iterations.len()]);
        out.push(CounterfactualRecord {
            image_id: rf.image_id,
            master_seed: rf.master_seed,
            config: rf.config,
            original,
            input_p_sp: rf.input_p_sp,
            input_oracle: rf.input_oracle,
            chosen_lambda_c: rf.chosen_lambda_c,
            iterations,
            scores: rf.scores,
            seconds_per_iteration: seconds,
        });
    }
    if out.is_empty() {
        return Err(Error::MissingStage {
            stage: "evaluate".into(),
            hint: "generate".into(),
        });
    }
    Ok(out)
}

pub fn stage_generate(cfg: &ExperimentConfig) -> Result<Vec<RunManifest>> {
    let data = load_data(cfg)?;
    let bundle = load_bundle(cfg, "generate")?;
    let paths = Paths::new(&cfg.out_dir);
    let ids = nsp_test_ids(&data, cfg.generate.max_images);
    if ids.is_empty() {
        return Err(Error::EmptyDataset("no NSP test images to explain".into()));
    }

    let mut manifests = Vec::new();
    for method in &cfg.generate.methods {
        let gcfg = method.specialize(&cfg.guidance);
        let records =
            generate_records(&data, &ids, &gcfg, &bundle, cfg.seed, cfg.generate.jobs)?;
        let dir = paths.records(method.dir_name());
        let (files, _) = persist_records(&dir, &records)?;
        let mut inputs = bundle.checkpoint_hashes.clone();
        inputs.insert("dataset".into(), data.hash.clone());
        manifests.push(write_run_manifest(
            &dir,
            &format!("generate:{}", method.dir_name()),
            cfg,
            inputs,
            &files,
        )?);
    }
    Ok(manifests)
}

// ---- ablation grid ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub tau: usize,
    pub lambda_p: f64,
    /// Candidate set override; `None` keeps the configured search.
    pub fixed_lambda_c: Option<f64>,
}

pub fn ablation_cells(cfg: &ExperimentConfig) -> Vec<AblationCell> {
    let mut cells = Vec::new();
    for &tau in &cfg.ablation.taus {
        cells.push(AblationCell {
            name: format!("tau{tau:03}_lp_on"),
            tau,
            lambda_p: cfg.guidance.lambda_p,
            fixed_lambda_c: None,
        });
        if cfg.ablation.include_lp_off {
            cells.push(AblationCell {
                name: format!("tau{tau:03}_lp_off"),
                tau,
                lambda_p: 0.0,
                fixed_lambda_c: None,
            });
        }
    }
    if cfg.ablation.include_lambda_heavy {
        cells.push(AblationCell {
            name: format!("tau{:03}_lc_heavy", cfg.guidance.tau),
            tau: cfg.guidance.tau,
            lambda_p: cfg.guidance.lambda_p,
            fixed_lambda_c: Some(cfg.ablation.lambda_c_heavy),
        });
    }
    cells
}

/// Single-iteration runs over the ablation grid, all on the same test subset.
pub fn stage_generate_ablation(cfg: &ExperimentConfig) -> Result<Vec<RunManifest>> {
    let data = load_data(cfg)?;
    let bundle = load_bundle(cfg, "generate")?;
    let paths = Paths::new(&cfg.out_dir);
    let ids = nsp_test_ids(&data, cfg.ablation.max_images);
    if ids.is_empty() {
        return Err(Error::EmptyDataset("no NSP test images to explain".into()));
    }
    let mut manifests = Vec::new();
    for cell in ablation_cells(cfg) {
        let mut gcfg = Method::DiffIce1.specialize(&cfg.guidance);
        gcfg.tau = cell.tau;
        gcfg.lambda_p = cell.lambda_p;
        if let Some(l) = cell.fixed_lambda_c {
            gcfg.lambda_c = l;
            gcfg.lambda_c_candidates = vec![];
        }
        let records =
            generate_records(&data, &ids, &gcfg, &bundle, cfg.seed, cfg.generate.jobs)?;
        let dir = paths.records(&format!("ablation/{}", cell.name));
        let (files, _) = persist_records(&dir, &records)?;
        let mut inputs = bundle.checkpoint_hashes.clone();
        inputs.insert("dataset".into(), data.hash.clone());
        manifests.push(write_run_manifest(
            &dir,
            &format!("generate:ablation/{}", cell.name),
            cfg,
            inputs,
            &files,
        )?);
    }
    Ok(manifests)
}

// ---- evaluation ----

pub fn evaluate_method_dir(
    cfg: &ExperimentConfig,
    bundle: &ModelBundle,
    method_dir: &str,
) -> Result<MetricsReport> {
    let paths = Paths::new(&cfg.out_dir);
    let records = load_records(&paths.records(method_dir))?;
    let scored = score_records(
        &records,
        &bundle.classifier,
        &bundle.oracle,
        &bundle.feat_eval,
    )?;
    let (report, efficiency, scatters) = build_report(method_dir, &scored)?;

    let dir = paths.reports(method_dir);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
    fs::write(
        dir.join("metrics.csv"),
        crate::metrics::report_to_csv(&report),
    )?;
    fs::write(
        dir.join("efficiency.csv"),
        format!(
            "method,mean_iteration_seconds,std_iteration_seconds,total_hours\n{},{:.4},{:.4},{:.6}\n",
            efficiency.method,
            efficiency.mean_iteration_seconds,
            efficiency.std_iteration_seconds,
            efficiency.total_hours
        ),
    )?;
    for s in &scatters {
        fs::write(
            dir.join(format!("qd_vs_qs_{}.csv", s.structure)),
            crate::metrics::scatter_to_csv(s),
        )?;
    }
    let deterministic: Vec<PathBuf> = list_files_recursive(&dir, &["run_manifest.json", "efficiency.csv"])?;
    let mut inputs = bundle.checkpoint_hashes.clone();
    write_run_manifest(
        &dir,
        &format!("evaluate:{method_dir}"),
        cfg,
        std::mem::take(&mut inputs),
        &deterministic,
    )?;
    Ok(report)
}

pub fn stage_evaluate(cfg: &ExperimentConfig) -> Result<Vec<MetricsReport>> {
    let bundle = load_bundle(cfg, "evaluate")?;
    cfg.generate
        .methods
        .iter()
        .map(|m| evaluate_method_dir(cfg, &bundle, m.dir_name()))
        .collect()
}

/// Evaluate every ablation cell and write the aggregate grid table.
pub fn stage_evaluate_ablation(cfg: &ExperimentConfig) -> Result<Vec<(AblationCell, MetricsReport)>> {
    let bundle = load_bundle(cfg, "evaluate")?;
    let paths = Paths::new(&cfg.out_dir);
    let mut rows = Vec::new();
    for cell in ablation_cells(cfg) {
        let report = evaluate_method_dir(cfg, &bundle, &format!("ablation/{}", cell.name))?;
        rows.push((cell, report));
    }
    let mut csv = String::from(
        "cell,tau,lambda_p,fixed_lambda_c,frechet_feature_distance,feature_cosine,mqd,bkl,mad,flip_ratio\n",
    );
    for (cell, report) in &rows {
        let it = report.final_iteration();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            cell.name,
            cell.tau,
            cell.lambda_p,
            cell.fixed_lambda_c.map_or(String::new(), |l| l.to_string()),
            it.frechet.map_or(String::new(), |v| format!("{v:.6}")),
            it.feature_cosine.map_or(String::new(), |v| format!("{v:.6}")),
            it.mqd,
            it.bkl,
            it.mad,
            it.flip_ratio,
        ));
    }
    let dir = paths.reports("ablation");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("ablation.csv"), csv)?;
    Ok(rows)
}
