//! Batch command surface. Every subcommand reads its inputs, writes its
//! artifacts under `--out` and finishes by atomically writing
//! `run_manifest.json` there.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::io::{read_dataset, write_dataset};
use crate::dataset::{split, FrictionDataset, MaterialClass, Split, SplitScheme, DEFAULT_MU_MAX};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::measurement::{dataset_from_trials, read_trials};
use crate::model::{
    channel_indices, encoder_inputs, predict_pair, Architecture, Model, ModelConfig,
};
use crate::proxy::{
    reveal_proxy_pairs, select_mask_opt, select_rrqr, AlignmentMode, ProxySet, Reference,
    RrqrOptions,
};
use crate::spectral::{
    effective_rank, eig_sym, pca_project, retention_size, Imputation, RetentionMode,
};
use crate::synthgen::{gen_lowrank, write_synthetic, BlockLayout, SynthSpec};
use crate::training::{
    cross_validate_with, evaluate, metrics_from_rows, predictions_csv, split_data, train_ensemble,
    Metrics, TrainConfig, TrainReport,
};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const BUNDLE_FILE: &str = "bundle.json";
const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "tribolens",
    version,
    about = "Pairwise friction prediction from proxy-material measurements"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Seed for splits, initialization, batching and synthesis
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON run configuration (model, train, split, synth sections)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Rrqr,
    MaskOpt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scheme {
    /// Shuffled split from the configuration
    Random,
    Kfold,
    /// Leave one material out
    Loom,
    LeaveBlockOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutPreset {
    /// 12 knit, 18 woven and 10 non-fabric materials in measured blocks
    FabricCampaign,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Aggregate tribometer trials into a dataset
    Ingest {
        /// Trial CSV
        #[arg(long)]
        trials: PathBuf,
        /// CSV of `material,class` rows
        #[arg(long)]
        classes: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MU_MAX)]
        mu_max: f64,
    },
    /// Eigenvalue spectrum and retention budgets of one channel
    Spectrum {
        /// Dataset manifest
        #[arg(long)]
        data: PathBuf,
        /// Channel label (default: first channel)
        #[arg(long)]
        channel: Option<String>,
        /// Retention levels to report
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.95, 0.99, 0.995, 0.999])]
        retention: Vec<f64>,
        /// Relative eigenvalue threshold for the effective rank
        #[arg(long, default_value_t = 0.01)]
        rank_threshold: f64,
    },
    /// Choose a proxy set by spectral selection or mask optimization
    SelectProxies {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Rrqr)]
        method: Method,
        /// Spectral retention level (rrqr)
        #[arg(long, default_value_t = 0.999)]
        retention: f64,
        /// Alignment tolerance (mask-opt)
        #[arg(long)]
        epsilon: Option<f64>,
        /// Read the tolerance as a fraction of the empty-mask error
        #[arg(long)]
        relative: bool,
        /// Largest proxy set (mask-opt)
        #[arg(long)]
        k_max: Option<usize>,
        /// Channel label for rrqr (default: first channel)
        #[arg(long)]
        channel: Option<String>,
        /// Trained model directory for mask-opt; trained on the fly if absent
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train a model or ensemble on the configured split
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Proxy set JSON; the encoder then reads proxy columns only
        #[arg(long)]
        proxies: Option<PathBuf>,
        /// Ensemble size (overrides the configuration)
        #[arg(long)]
        members: Option<usize>,
    },
    /// Score a trained model on its test split, or cross-validate
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Trained model directory (scores its held-out pairs)
        #[arg(long, conflicts_with = "scheme")]
        model: Option<PathBuf>,
        /// Cross-validation scheme (trains one model per fold)
        #[arg(long, value_enum)]
        scheme: Option<Scheme>,
        /// Number of folds for kfold
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Material held out by loom (default: every material in turn)
        #[arg(long)]
        material: Option<String>,
        /// First class of the withheld block (leave-block-out)
        #[arg(long, default_value = "knit")]
        block_a: String,
        /// Second class of the withheld block (leave-block-out)
        #[arg(long, default_value = "woven")]
        block_b: String,
        /// Score the head of SRC against channel DST, as `SRC:DST`
        #[arg(long)]
        transfer: Option<String>,
        /// Proxy set JSON for cross-validation
        #[arg(long)]
        proxies: Option<PathBuf>,
    },
    /// Predict one pair
    Predict {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// First material (name or index)
        a: String,
        /// Second material (name or index)
        b: String,
        /// Output channel (default: first head)
        #[arg(long)]
        channel: Option<String>,
    },
    /// Write material embeddings, optionally PCA-projected
    ExportEmbeddings {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Number of principal components
        #[arg(long)]
        pca: Option<usize>,
    },
    /// Generate a synthetic dataset with known ground truth
    Synth {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long)]
        missing: Option<f64>,
        /// Comma-separated channel labels
        #[arg(long, value_delimiter = ',')]
        channels: Option<Vec<String>>,
        #[arg(long, value_enum)]
        layout: Option<LayoutPreset>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Spectrum { .. } => "spectrum",
            Command::SelectProxies { .. } => "select-proxies",
            Command::Train { .. } => "train",
            Command::Evaluate { .. } => "evaluate",
            Command::Predict { .. } => "predict",
            Command::ExportEmbeddings { .. } => "export-embeddings",
            Command::Synth { .. } => "synth",
        }
    }
}

/// Settings shared by the subcommands; every section has defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Channels modelled (default: every dataset channel).
    pub channels: Option<Vec<String>>,
    pub members: usize,
    pub split: SplitScheme,
    pub retention_mode: RetentionMode,
    pub imputation: Imputation,
    /// Scoring of candidate proxy sets in mask optimization.
    pub alignment: AlignmentMode,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            channels: None,
            members: 1,
            split: SplitScheme::default(),
            retention_mode: RetentionMode::default(),
            imputation: Imputation::default(),
            alignment: AlignmentMode::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::schema(format!("{}: {e}", p.display())))
            }
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(serde_json::to_vec(self)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    pub wall_time_s: f64,
}

/// A trained ensemble with the split it was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub version: u32,
    /// Member checkpoint manifests, relative to the bundle directory.
    pub members: Vec<String>,
    pub split: Split,
    pub proxies: Option<Vec<usize>>,
    pub seed: u64,
}

impl ModelBundle {
    pub fn load(dir: &Path) -> Result<(ModelBundle, Vec<Model>)> {
        let path = dir.join(BUNDLE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bundle: ModelBundle = serde_json::from_str(&text)?;
        if bundle.version != BUNDLE_VERSION {
            return Err(Error::schema(format!(
                "unsupported bundle version {}",
                bundle.version
            )));
        }
        let members = bundle
            .members
            .iter()
            .map(|m| Model::load(&dir.join(m)))
            .collect::<Result<Vec<_>>>()?;
        if members.is_empty() {
            return Err(Error::schema("bundle has no members"));
        }
        Ok((bundle, members))
    }
}

/// Write `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>, outputs: &mut Vec<PathBuf>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))?;
    outputs.push(path.to_path_buf());
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T, outputs: &mut Vec<PathBuf>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text, outputs)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(format!("{}: {e}", path.display())))
}

fn resolve_material(ds: &FrictionDataset, key: &str) -> Result<usize> {
    ds.library()
        .index_of(key)
        .or_else(|e| match key.parse::<usize>() {
            Ok(i) if i < ds.n() => Ok(i),
            _ => Err(e),
        })
}

fn resolve_channel(ds: &FrictionDataset, label: Option<&str>) -> Result<usize> {
    label.map_or(Ok(0), |l| ds.channel_index(l))
}

fn architecture(
    ds: &FrictionDataset,
    cfg: &RunConfig,
    columns: Vec<usize>,
    seed: u64,
) -> Result<Architecture> {
    let channels = cfg
        .channels
        .clone()
        .unwrap_or_else(|| ds.channels().to_vec());
    channel_indices(ds, &channels)?;
    Ok(Architecture {
        config: cfg.model.clone(),
        columns,
        channels,
        mu_max: ds.mu_max(),
        seed,
    })
}

fn train_config(cfg: &RunConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

fn primary_split(ds: &FrictionDataset, cfg: &RunConfig, seed: u64) -> Result<Split> {
    Ok(split(ds, &cfg.split, seed)?.swap_remove(0))
}

fn load_proxies(path: &Path, n: usize) -> Result<ProxySet> {
    let set: ProxySet = read_json(path)?;
    set.validate(n)?;
    if set.is_empty() {
        return Err(Error::schema("proxy set is empty"));
    }
    Ok(set)
}

/// Train an ensemble on `split` (after revealing proxy pairs) and save it
/// under `dir`.
fn train_bundle(
    ds: &FrictionDataset,
    cfg: &RunConfig,
    seed: u64,
    split: Split,
    proxies: Option<Vec<usize>>,
    members: usize,
    dir: &Path,
    outputs: &mut Vec<PathBuf>,
) -> Result<(ModelBundle, Vec<Model>, Vec<TrainReport>)> {
    let columns = proxies.clone().unwrap_or_else(|| (0..ds.n()).collect());
    let split = match &proxies {
        Some(p) => reveal_proxy_pairs(&split, p),
        None => split,
    };
    let arch = architecture(ds, cfg, columns, seed)?;
    let data = split_data(ds, &split, &arch)?;
    let trained = train_ensemble(&arch, &data, &train_config(cfg, seed), members)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    let mut models = Vec::new();
    let mut reports = Vec::new();
    for (i, (model, report)) in trained.into_iter().enumerate() {
        let manifest = model.save(&dir.join(format!("member{i}")))?;
        outputs.push(manifest.clone());
        outputs.push(manifest.with_extension("bin"));
        names.push(
            manifest
                .file_name()
                .expect("checkpoint file")
                .to_string_lossy()
                .into_owned(),
        );
        write_file(
            &dir.join(format!("history{i}.csv")),
            report.history_csv()?,
            outputs,
        )?;
        models.push(model);
        reports.push(report);
    }
    let bundle = ModelBundle {
        version: BUNDLE_VERSION,
        members: names,
        split,
        proxies,
        seed,
    };
    write_json(&dir.join(BUNDLE_FILE), &bundle, outputs)?;
    Ok((bundle, models, reports))
}

#[derive(Debug, Serialize)]
struct SpectrumReport {
    channel: String,
    eigenvalues: Vec<f64>,
    cumulative_energy: Vec<f64>,
    effective_rank: usize,
    rank_threshold: f64,
    retention: Vec<RetentionRow>,
}

#[derive(Debug, Serialize)]
struct RetentionRow {
    retention: f64,
    k: usize,
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    mode: String,
    metrics: Metrics,
    folds: Vec<FoldSummary>,
}

#[derive(Debug, Serialize)]
struct FoldSummary {
    fold: usize,
    train_pairs: usize,
    test_pairs: usize,
    epochs_run: usize,
    metrics: Metrics,
}

#[derive(Debug, Serialize)]
struct PredictionReport {
    a: String,
    b: String,
    channel: String,
    mean: f64,
    aleatoric: f64,
    epistemic: f64,
    std: f64,
}

/// Parse arguments and run; the caller maps errors to exit codes.
pub fn run(cli: Cli) -> Result<RunManifest> {
    let start = Instant::now();
    let cfg = RunConfig::load(cli.global.config.as_deref())?;
    let seed = cli.global.seed;
    let out = cli.global.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut inputs: Vec<PathBuf> = cli.global.config.iter().cloned().collect();
    let mut outputs = Vec::new();
    let name = cli.command.name();
    let pending = execute(cli.command, &cfg, seed, &out, &mut inputs, &mut outputs)?;
    let manifest = RunManifest {
        command: name.to_string(),
        config_hash: cfg.hash()?,
        seed,
        inputs,
        outputs,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    // a run that did not meet its target leaves artifacts but no manifest
    if let Some(err) = pending {
        return Err(err);
    }
    write_atomic(
        &out.join(MANIFEST_FILE),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

fn execute(
    command: Command,
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
    inputs: &mut Vec<PathBuf>,
    outputs: &mut Vec<PathBuf>,
) -> Result<Option<Error>> {
    match command {
        Command::Ingest {
            trials,
            classes,
            mu_max,
        } => {
            inputs.push(trials.clone());
            let file = fs::File::open(&trials).map_err(|e| Error::io(&trials, e))?;
            let records = read_trials(file)?;
            let mut class_map = BTreeMap::new();
            if let Some(path) = classes {
                let mut rdr = csv::ReaderBuilder::new()
                    .trim(csv::Trim::All)
                    .from_path(&path)?;
                for rec in rdr.records() {
                    let rec = rec?;
                    let (Some(m), Some(c)) = (rec.get(0), rec.get(1)) else {
                        return Err(Error::schema(format!(
                            "{}: rows need `material,class`",
                            path.display()
                        )));
                    };
                    class_map.insert(m.to_string(), c.parse::<MaterialClass>()?);
                }
                inputs.push(path);
            }
            let ingested = dataset_from_trials(&records, &class_map, mu_max)?;
            let manifest = write_dataset(&ingested.dataset, out)?;
            for label in ingested.dataset.channels() {
                outputs.push(out.join(format!("{label}.csv")));
            }
            outputs.push(manifest);
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "block",
                "surface",
                "regime",
                "orientation",
                "mean",
                "std",
                "count",
                "inconsistent",
            ])?;
            for (k, s) in &ingested.groups {
                w.write_record([
                    k.block.clone(),
                    k.surface.clone(),
                    k.regime.to_string(),
                    k.orientation.to_string(),
                    s.mean.to_string(),
                    s.std.to_string(),
                    s.count.to_string(),
                    s.inconsistent.to_string(),
                ])?;
            }
            let bytes = w.into_inner().map_err(|e| Error::schema(e.to_string()))?;
            write_file(&out.join("trial_summary.csv"), bytes, outputs)?;
        }
        Command::Spectrum {
            data,
            channel,
            retention,
            rank_threshold,
        } => {
            inputs.push(data.clone());
            let ds = read_dataset(&data)?;
            let c = resolve_channel(&ds, channel.as_deref())?;
            let f = crate::proxy::completed_matrix(&ds, c, cfg.imputation)?;
            let spectrum = eig_sym(&f)?;
            let total: f64 = spectrum.values.iter().map(|v| v * v).sum();
            let mut acc = 0.0;
            let cumulative: Vec<f64> = spectrum
                .values
                .iter()
                .map(|v| {
                    acc += v * v;
                    if total > 0.0 {
                        acc / total
                    } else {
                        0.0
                    }
                })
                .collect();
            let rows = retention
                .iter()
                .map(|&r| {
                    retention_size(&spectrum, r, cfg.retention_mode)
                        .map(|k| RetentionRow { retention: r, k })
                })
                .collect::<Result<Vec<_>>>()?;
            let report = SpectrumReport {
                channel: ds.channels()[c].clone(),
                effective_rank: effective_rank(&spectrum, rank_threshold)?,
                rank_threshold,
                eigenvalues: spectrum.values.clone(),
                cumulative_energy: cumulative.clone(),
                retention: rows,
            };
            write_json(&out.join("spectrum.json"), &report, outputs)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["index", "eigenvalue", "cumulative_energy"])?;
            for (i, (v, e)) in spectrum.values.iter().zip(&cumulative).enumerate() {
                w.write_record([(i + 1).to_string(), v.to_string(), e.to_string()])?;
            }
            let bytes = w.into_inner().map_err(|e| Error::schema(e.to_string()))?;
            write_file(&out.join("spectrum.csv"), bytes, outputs)?;
        }
        Command::SelectProxies {
            data,
            method,
            retention,
            epsilon,
            relative,
            k_max,
            channel,
            model,
        } => {
            inputs.push(data.clone());
            let ds = read_dataset(&data)?;
            let set = match method {
                Method::Rrqr => {
                    // selection sees only the pairs later used for training
                    let visible = ds.restrict_to_pairs(&primary_split(&ds, cfg, seed)?.train);
                    let c = resolve_channel(&ds, channel.as_deref())?;
                    let opts = RrqrOptions {
                        mode: cfg.retention_mode,
                        imputation: cfg.imputation,
                    };
                    select_rrqr(&visible, c, retention, opts)?
                }
                Method::MaskOpt => {
                    let epsilon =
                        epsilon.ok_or_else(|| Error::schema("mask-opt needs --epsilon"))?;
                    let (bundle, members) = match model {
                        Some(dir) => {
                            inputs.push(dir.join(BUNDLE_FILE));
                            ModelBundle::load(&dir)?
                        }
                        None => {
                            let split = primary_split(&ds, cfg, seed)?;
                            let (b, m, _) = train_bundle(
                                &ds,
                                cfg,
                                seed,
                                split,
                                None,
                                1,
                                &out.join("reference_model"),
                                outputs,
                            )?;
                            (b, m)
                        }
                    };
                    let teacher = &members[0];
                    if teacher.arch().columns.len() != ds.n() {
                        return Err(Error::schema(
                            "mask optimization needs a model over all materials",
                        ));
                    }
                    let visible = ds.restrict_to_pairs(&bundle.split.train);
                    let enc_inputs = encoder_inputs(&visible, teacher.arch())?;
                    let eps = if relative {
                        epsilon * Reference::new(teacher, &enc_inputs)?.baseline()
                    } else {
                        epsilon
                    };
                    select_mask_opt(
                        teacher,
                        &enc_inputs,
                        eps,
                        k_max.unwrap_or(ds.n()),
                        &cfg.alignment,
                    )?
                }
            };
            write_json(&out.join("proxies.json"), &set, outputs)?;
            if !set.diagnostics.converged {
                return Ok(Some(Error::NotConverged(format!(
                    "alignment {:.6e} above tolerance with {} proxies",
                    set.diagnostics.alignment_error.unwrap_or(f64::NAN),
                    set.len()
                ))));
            }
        }
        Command::Train {
            data,
            proxies,
            members,
        } => {
            inputs.push(data.clone());
            let ds = read_dataset(&data)?;
            let proxy_idx = match proxies {
                Some(p) => {
                    inputs.push(p.clone());
                    Some(load_proxies(&p, ds.n())?.indices)
                }
                None => None,
            };
            let split = primary_split(&ds, cfg, seed)?;
            let members = members.unwrap_or(cfg.members);
            let (_, _, reports) = train_bundle(
                &ds,
                cfg,
                seed,
                split,
                proxy_idx,
                members,
                &out.join("model"),
                outputs,
            )?;
            write_json(&out.join("train_report.json"), &reports, outputs)?;
        }
        Command::Evaluate {
            data,
            model,
            scheme,
            k,
            material,
            block_a,
            block_b,
            transfer,
            proxies,
        } => {
            inputs.push(data.clone());
            let ds = read_dataset(&data)?;
            let heads_for = |arch: &Architecture| -> Result<Vec<(usize, usize)>> {
                match &transfer {
                    Some(spec) => {
                        let (src, dst) = spec.split_once(':').ok_or_else(|| {
                            Error::schema(format!("--transfer expects SRC:DST, got `{spec}`"))
                        })?;
                        let head =
                            arch.channels.iter().position(|c| c == src).ok_or_else(|| {
                                Error::Lookup {
                                    kind: "head",
                                    name: src.to_string(),
                                }
                            })?;
                        Ok(vec![(head, ds.channel_index(dst)?)])
                    }
                    None => Ok(channel_indices(&ds, &arch.channels)?
                        .into_iter()
                        .enumerate()
                        .collect()),
                }
            };
            let labels = |arch: &Architecture, targets: &[(usize, usize)]| -> Vec<String> {
                (0..arch.channels.len())
                    .map(|h| match targets.iter().find(|t| t.0 == h) {
                        Some(&(_, c)) if ds.channels()[c] != arch.channels[h] => {
                            format!("{}->{}", arch.channels[h], ds.channels()[c])
                        }
                        _ => arch.channels[h].clone(),
                    })
                    .collect()
            };
            let report = match (model, scheme) {
                (Some(dir), _) => {
                    inputs.push(dir.join(BUNDLE_FILE));
                    let (bundle, members) = ModelBundle::load(&dir)?;
                    let targets = heads_for(members[0].arch())?;
                    let visible = ds.restrict_to_pairs(&bundle.split.train);
                    let (metrics, rows) =
                        evaluate(&members, &visible, &ds, &bundle.split.test, &targets)?;
                    write_file(
                        &out.join("predictions.csv"),
                        predictions_csv(&rows)?,
                        outputs,
                    )?;
                    EvaluationReport {
                        mode: "holdout".into(),
                        metrics,
                        folds: Vec::new(),
                    }
                }
                (None, scheme) => {
                    let scheme_value = match scheme.unwrap_or(Scheme::Random) {
                        Scheme::Random => cfg.split.clone(),
                        Scheme::Kfold => SplitScheme::KFold { k },
                        Scheme::Loom => SplitScheme::LeaveOneMaterialOut {
                            material: material
                                .as_deref()
                                .map(|m| resolve_material(&ds, m))
                                .transpose()?,
                        },
                        Scheme::LeaveBlockOut => SplitScheme::LeaveBlockOut {
                            a: block_a.parse()?,
                            b: block_b.parse()?,
                        },
                    };
                    let columns = match &proxies {
                        Some(p) => {
                            inputs.push(p.clone());
                            load_proxies(p, ds.n())?.indices
                        }
                        None => (0..ds.n()).collect(),
                    };
                    let arch = architecture(&ds, cfg, columns, seed)?;
                    let targets = heads_for(&arch)?;
                    let folds = cross_validate_with(
                        &ds,
                        &scheme_value,
                        &arch,
                        &train_config(cfg, seed),
                        seed,
                        &targets,
                    )?;
                    let rows: Vec<_> = folds.iter().flat_map(|f| f.rows.iter().cloned()).collect();
                    write_file(
                        &out.join("predictions.csv"),
                        predictions_csv(&rows)?,
                        outputs,
                    )?;
                    EvaluationReport {
                        mode: serde_json::to_value(&scheme_value)?["scheme"]
                            .as_str()
                            .unwrap_or("split")
                            .to_string(),
                        metrics: metrics_from_rows(&rows, &labels(&arch, &targets)),
                        folds: folds
                            .into_iter()
                            .map(|f| FoldSummary {
                                fold: f.fold,
                                train_pairs: f.train_pairs,
                                test_pairs: f.test_pairs,
                                epochs_run: f.report.epochs_run,
                                metrics: f.metrics,
                            })
                            .collect(),
                    }
                }
            };
            write_json(&out.join("metrics.json"), &report, outputs)?;
        }
        Command::Predict {
            data,
            model,
            a,
            b,
            channel,
        } => {
            inputs.push(data.clone());
            inputs.push(model.join(BUNDLE_FILE));
            let ds = read_dataset(&data)?;
            let (_, members) = ModelBundle::load(&model)?;
            let arch = members[0].arch();
            let head = match &channel {
                Some(c) => {
                    arch.channels
                        .iter()
                        .position(|h| h == c)
                        .ok_or_else(|| Error::Lookup {
                            kind: "head",
                            name: c.clone(),
                        })?
                }
                None => 0,
            };
            let (ia, ib) = (resolve_material(&ds, &a)?, resolve_material(&ds, &b)?);
            let p = predict_pair(&members, &ds, ia, ib, head)?;
            let report = PredictionReport {
                a: ds.library().name(ia).to_string(),
                b: ds.library().name(ib).to_string(),
                channel: arch.channels[head].clone(),
                mean: p.mean,
                aleatoric: p.aleatoric,
                epistemic: p.epistemic,
                std: p.total_variance().sqrt(),
            };
            println!("{}", serde_json::to_string(&report)?);
            write_json(&out.join("prediction.json"), &report, outputs)?;
        }
        Command::ExportEmbeddings { data, model, pca } => {
            inputs.push(data.clone());
            inputs.push(model.join(BUNDLE_FILE));
            let ds = read_dataset(&data)?;
            let (_, members) = ModelBundle::load(&model)?;
            let m = &members[0];
            let enc = encoder_inputs(&ds, m.arch())?;
            let kept: Vec<usize> = (0..ds.n()).filter(|&i| enc[i].observed() > 0).collect();
            let z: Vec<Vec<f64>> = kept
                .iter()
                .map(|&i| m.encode(&enc[i]))
                .collect::<Result<_>>()?;
            let (coords, prefix) = match pca {
                Some(dims) => {
                    let zm = Matrix::from_rows(&z)?;
                    let p = pca_project(&zm, dims)?;
                    write_json(&out.join("pca.json"), &p, outputs)?;
                    let rows = (0..p.coords.rows())
                        .map(|i| p.coords.row(i).to_vec())
                        .collect();
                    (rows, "pc")
                }
                None => (z, "z"),
            };
            let width = coords.first().map_or(0, Vec::len);
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["material".to_string(), "class".to_string()];
            header.extend((1..=width).map(|k| format!("{prefix}{k}")));
            w.write_record(&header)?;
            for (&i, row) in kept.iter().zip(&coords) {
                let mut rec = vec![
                    ds.library().name(i).to_string(),
                    ds.library().class(i).to_string(),
                ];
                rec.extend(row.iter().map(f64::to_string));
                w.write_record(&rec)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::schema(e.to_string()))?;
            write_file(&out.join("embeddings.csv"), bytes, outputs)?;
        }
        Command::Synth {
            n,
            rank,
            noise,
            missing,
            channels,
            layout,
        } => {
            let mut spec = cfg.synth.clone();
            spec.seed = seed;
            if let Some(v) = n {
                spec.n = v;
            }
            if let Some(v) = rank {
                spec.rank = v;
            }
            if let Some(v) = noise {
                spec.noise_std = v;
            }
            if let Some(v) = missing {
                spec.missing_rate = v;
            }
            if let Some(v) = channels {
                spec.channels = v;
            }
            if let Some(LayoutPreset::FabricCampaign) = layout {
                spec.layout = Some(BlockLayout::fabric_campaign());
            }
            let syn = gen_lowrank(&spec)?;
            let manifest = write_synthetic(&syn, &spec, out)?;
            for label in syn.dataset.channels() {
                outputs.push(out.join(format!("{label}.csv")));
            }
            outputs.push(out.join("truth.json"));
            outputs.push(manifest);
        }
    }
    Ok(None)
}

/// JSON written to stderr on failure.
pub fn error_json(err: &Error) -> String {
    serde_json::json!({
        "error": err.kind(),
        "message": err.to_string(),
        "exit_code": err.exit_code(),
    })
    .to_string()
}
