//! Config-driven experiment commands. Each command reads one TOML file,
//! validates it with field-named diagnostics, runs, and writes a manifest
//! plus CSV artifacts into the output directory.

use crate::analysis::{mean_offdiag_abs, pearson_matrix};
use crate::bench::{bench_csv_header, bench_csv_row, bench_sweep, BenchCell};
use crate::error::{Error, Result};
use crate::microbn::{run_microbn, MicroBnConfig, MicroBnPolicy};
use crate::net::data::make_blob_dataset;
use crate::net::{train, LayerSpec, NormSetting, TrainConfig, TrainReport};
use crate::report::{fmt_f64, manifest_hash, semantic_view, write_csv, write_manifest};
use crate::sampling::{SamplingStrategy, StrategyKind};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const VERSION: &str = concat!("sbn ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunStatus {
    Success,
    /// At least one run hit non-finite values; artifacts were still written.
    Diverged,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
}

impl DatasetConfig {
    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("dataset.classes", "must be >= 2"));
        }
        if self.per_class == 0 {
            return Err(Error::invalid("dataset.per_class", "must be >= 1"));
        }
        if self.height < 3 || self.width < 3 {
            return Err(Error::invalid("dataset.height/width", "must be >= 3"));
        }
        if self.noise < 0.0 {
            return Err(Error::invalid("dataset.noise", "must be >= 0"));
        }
        Ok(())
    }

    fn build(&self, seed: u64) -> Result<crate::net::data::SyntheticDataset> {
        make_blob_dataset(
            self.classes,
            self.per_class,
            self.height,
            self.width,
            self.noise,
            seed,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// One conv/normalize/relu block per entry, then pool and a dense head.
    pub conv_channels: Vec<usize>,
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid(
                "model.conv_channels",
                "needs at least one nonzero channel count",
            ));
        }
        Ok(())
    }

    pub fn specs(&self, classes: usize) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        for &out_c in &self.conv_channels {
            specs.push(LayerSpec::Conv3x3 { out_c });
            specs.push(LayerSpec::Bn);
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::GlobalAvgPool);
        specs.push(LayerSpec::Dense { out_dim: classes });
        specs
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub strategy: String,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    /// "off", "pure", or "mixed".
    #[serde(default = "default_vdn")]
    pub vdn: String,
    #[serde(default = "default_n_v")]
    pub n_v: usize,
    #[serde(default = "default_mix")]
    pub mix: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_lr_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default)]
    pub record_errors: bool,
    #[serde(default)]
    pub reset_moving_each_epoch: bool,
}

fn default_ratio() -> f64 {
    1.0
}
fn default_vdn() -> String {
    "off".into()
}
fn default_n_v() -> usize {
    1
}
fn default_mix() -> f64 {
    0.5
}
fn default_decay() -> f64 {
    0.9
}
fn default_momentum() -> f64 {
    0.9
}
fn default_lr_decay_factor() -> f64 {
    0.1
}

fn parse_strategy_kind(name: &str, field: &str) -> Result<StrategyKind> {
    match name {
        "full" => Ok(StrategyKind::Full),
        "ns" => Ok(StrategyKind::Ns),
        "bs" => Ok(StrategyKind::Bs),
        "fs" => Ok(StrategyKind::Fs),
        "frs" => Ok(StrategyKind::Frs),
        other => Err(Error::invalid(
            field,
            format!("unknown strategy {other:?}; expected full|ns|bs|fs|frs"),
        )),
    }
}

impl TrainSection {
    fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::invalid(
                "ratio",
                format!("must be in (0, 1], got {}", self.ratio),
            ));
        }
        if !(0.0..=1.0).contains(&self.mix) {
            return Err(Error::invalid("mix", format!("must be in [0, 1], got {}", self.mix)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::invalid(
                "decay",
                format!("must be in (0, 1], got {}", self.decay),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch", "must be >= 1"));
        }
        if self.n_v == 0 {
            return Err(Error::invalid("n_v", "must be >= 1"));
        }
        if !matches!(self.vdn.as_str(), "off" | "pure" | "mixed") {
            return Err(Error::invalid(
                "vdn",
                format!("must be off|pure|mixed, got {:?}", self.vdn),
            ));
        }
        parse_strategy_kind(&self.strategy, "strategy")?;
        Ok(())
    }

    fn norm_setting(&self) -> Result<NormSetting> {
        let kind = parse_strategy_kind(&self.strategy, "strategy")?;
        let strategy = SamplingStrategy::new(kind, self.ratio)?;
        Ok(match self.vdn.as_str() {
            "off" => NormSetting::Strategy(strategy),
            "pure" => NormSetting::Vdn {
                n_v: self.n_v,
                mixed: None,
            },
            _ => NormSetting::Vdn {
                n_v: self.n_v,
                mixed: Some((strategy, self.mix)),
            },
        })
    }

    fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            momentum: self.momentum,
            lr_decay_epochs: self.lr_decay_epochs.clone(),
            lr_decay_factor: self.lr_decay_factor,
            decay: self.decay,
            epsilon: crate::batchnorm::DEFAULT_EPSILON,
            seed,
            norm: self.norm_setting()?,
            record_errors: self.record_errors,
            reset_moving_each_epoch: self.reset_moving_each_epoch,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrobnSection {
    /// "local", "sync_full", "sync_bs", or "local_vdn".
    pub policy: String,
    pub gradient_batch: usize,
    pub statistic_batch: usize,
    #[serde(default)]
    pub k_nodes: usize,
    #[serde(default = "default_n_v")]
    pub n_v: usize,
    #[serde(default)]
    pub mixed: bool,
    #[serde(default = "default_mix")]
    pub mix: f64,
}

impl MicrobnSection {
    fn config(&self) -> Result<MicroBnConfig> {
        let policy = match self.policy.as_str() {
            "local" => MicroBnPolicy::Local,
            "sync_full" => MicroBnPolicy::SyncFull,
            "sync_bs" => MicroBnPolicy::SyncBs {
                k_nodes: self.k_nodes,
            },
            "local_vdn" => MicroBnPolicy::LocalVdn {
                n_v: self.n_v,
                mixed: self.mixed,
                mix: self.mix,
            },
            other => {
                return Err(Error::invalid(
                    "microbn.policy",
                    format!("unknown policy {other:?}"),
                ))
            }
        };
        let cfg = MicroBnConfig {
            gradient_batch: self.gradient_batch,
            statistic_batch: self.statistic_batch,
            policy,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrobnFileConfig {
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub microbn: MicrobnSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCellConfig {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub strategy: String,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchFileConfig {
    #[serde(default)]
    pub seed: u64,
    pub repetitions: usize,
    pub cells: Vec<BenchCellConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeFileConfig {
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    /// Strategies compared on matched seeds, e.g. ["ns", "bs"].
    pub strategies: Vec<String>,
    pub ratio: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecayFileConfig {
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub alphas: Vec<f64>,
    pub strategy: String,
    pub ratio: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    #[serde(default)]
    pub reset_moving_each_epoch: bool,
}

pub fn load_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::invalid("config", e.to_string()))
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::invalid("seeds", "must not be empty"));
    }
    Ok(())
}

fn ensure_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    Ok(())
}

fn build_manifest(
    command: &str,
    config_json: serde_json::Value,
    extra: serde_json::Value,
) -> (serde_json::Value, String) {
    let mut semantic = semantic_view(&config_json);
    if let Some(map) = semantic.as_object_mut() {
        map.insert("command".into(), command.into());
    }
    let hash = manifest_hash(&semantic);
    let manifest = serde_json::json!({
        "version": VERSION,
        "command": command,
        "manifest_hash": hash,
        "config": config_json,
        "detail": extra,
    });
    (manifest, hash)
}

/// Manifest for a multi-seed parent directory whose per-seed artifacts were
/// produced by worker processes.
pub fn write_command_manifest(
    command: &str,
    config_json: &serde_json::Value,
    out: &Path,
) -> Result<()> {
    let (manifest, _) = build_manifest(command, config_json.clone(), serde_json::Value::Null);
    write_manifest(&out.join("manifest.json"), &manifest)
}

fn metrics_rows(report: &TrainReport, strategy: &str, ratio: f64, hash: &str) -> Vec<String> {
    report
        .metrics
        .iter()
        .map(|m| {
            format!(
                "{},{},{},{},{},{},{}",
                m.epoch,
                fmt_f64(m.train_loss),
                fmt_f64(m.val_acc),
                strategy,
                fmt_f64(ratio),
                report.seed,
                hash
            )
        })
        .collect()
}

/// Train one or more seeds; writes manifest.json, metrics.csv, and the
/// error-trace artifacts when recording is on.
pub fn run_train(cfg: &TrainFileConfig, out: &Path) -> Result<RunStatus> {
    cfg.dataset.validate()?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    check_seeds(&cfg.seeds)?;
    ensure_out(out)?;

    let specs = cfg.model.specs(cfg.dataset.classes);
    let mut status = RunStatus::Success;
    let mut rows = Vec::new();
    let mut error_rows = Vec::new();
    let mut corr_rows = Vec::new();
    let mut detail = Vec::new();
    let config_json = serde_json::to_value(cfg).expect("config serializes");
    let (_, hash) = build_manifest("train", config_json.clone(), serde_json::Value::Null);
    let strategy_label = cfg.train.norm_setting()?.label();

    let mut num_bn = 0usize;
    for &seed in &cfg.seeds {
        let dataset = cfg.dataset.build(seed)?;
        if cfg.train.vdn != "off" {
            // persist the offline dataset statistics next to the run
            let sampler = crate::vdn::fit_dataset_stats(
                std::slice::from_ref(&dataset.train),
                cfg.train.n_v,
            )?;
            sampler.save_json(&out.join(format!("dataset_stats_seed_{seed}.json")))?;
        }
        let train_cfg = cfg.train.train_config(seed)?;
        let report = train(&specs, &dataset, &train_cfg)?;
        if report.diverged {
            status = RunStatus::Diverged;
        }
        rows.extend(metrics_rows(&report, &strategy_label, cfg.train.ratio, &hash));
        if let Some(trace) = &report.trace {
            num_bn = trace.num_layers;
            for r in &trace.rows {
                error_rows.push(format!(
                    "{},{},{},{},{},{},{}",
                    r.layer,
                    r.iter,
                    fmt_f64(r.e_mu),
                    fmt_f64(r.e_sigma),
                    strategy_label,
                    seed,
                    hash
                ));
            }
            if trace.rows.len() >= 3 * trace.num_layers {
                let matrix = pearson_matrix(trace, false)?;
                for (layer, row) in matrix.iter().enumerate() {
                    let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
                    corr_rows.push(format!(
                        "{},{},{},{},{}",
                        strategy_label,
                        seed,
                        layer,
                        cells.join(","),
                        hash
                    ));
                }
            }
        }
        detail.push(serde_json::json!({
            "seed": seed,
            "diverged": report.diverged,
            "final_val_acc": report.final_val_acc,
            "realized_ratios": report.realized_ratios,
            "plans": report.plan_epochs,
        }));
    }

    let (manifest, hash2) = build_manifest("train", config_json, serde_json::Value::Array(detail));
    debug_assert_eq!(hash, hash2);
    write_manifest(&out.join("manifest.json"), &manifest)?;
    write_csv(
        &out.join("metrics.csv"),
        "epoch,train_loss,val_acc,strategy,ratio,seed,manifest_hash",
        &rows,
    )?;
    if !error_rows.is_empty() {
        write_csv(
            &out.join("errors.csv"),
            "layer,iter,e_mu,e_sigma,strategy,seed,manifest_hash",
            &error_rows,
        )?;
        let corr_cols: Vec<String> = (0..num_bn).map(|i| format!("c{i}")).collect();
        write_csv(
            &out.join("corr.csv"),
            &format!("strategy,seed,layer,{},manifest_hash", corr_cols.join(",")),
            &corr_rows,
        )?;
    }
    Ok(status)
}

/// Sharded-normalization training over the policy in the config.
pub fn run_microbn_cmd(cfg: &MicrobnFileConfig, out: &Path) -> Result<RunStatus> {
    cfg.dataset.validate()?;
    cfg.model.validate()?;
    cfg.train.validate()?;
    check_seeds(&cfg.seeds)?;
    let mbn = cfg.microbn.config()?;
    if cfg.train.batch != cfg.microbn.gradient_batch {
        return Err(Error::invalid(
            "microbn.gradient_batch",
            format!("must equal train.batch {}", cfg.train.batch),
        ));
    }
    ensure_out(out)?;

    let specs = cfg.model.specs(cfg.dataset.classes);
    let config_json = serde_json::to_value(cfg).expect("config serializes");
    let (_, hash) = build_manifest("microbn", config_json.clone(), serde_json::Value::Null);
    let mut rows = Vec::new();
    let mut detail = Vec::new();
    let mut status = RunStatus::Success;
    for &seed in &cfg.seeds {
        let dataset = cfg.dataset.build(seed)?;
        let train_cfg = cfg.train.train_config(seed)?;
        let report = run_microbn(&specs, &dataset, &mbn, &train_cfg)?;
        if report.diverged {
            status = RunStatus::Diverged;
        }
        for m in &report.metrics {
            rows.push(format!(
                "{},{},{},{},{},{},{},{}",
                m.epoch,
                fmt_f64(m.train_loss),
                fmt_f64(m.val_acc),
                mbn.policy.label(),
                mbn.gradient_batch,
                mbn.statistic_batch,
                seed,
                hash
            ));
        }
        detail.push(serde_json::json!({
            "seed": seed,
            "diverged": report.diverged,
            "final_val_acc": report.final_val_acc,
        }));
    }
    let (manifest, _) = build_manifest("microbn", config_json, serde_json::Value::Array(detail));
    write_manifest(&out.join("manifest.json"), &manifest)?;
    write_csv(
        &out.join("metrics.csv"),
        "epoch,train_loss,val_acc,policy,gradient_batch,statistic_batch,seed,manifest_hash",
        &rows,
    )?;
    Ok(status)
}

/// Statistics-kernel timing sweep; writes bench.csv. Timing columns are
/// measurements and vary run to run by nature.
pub fn run_bench(cfg: &BenchFileConfig, out: &Path) -> Result<RunStatus> {
    if cfg.repetitions < 5 {
        return Err(Error::invalid("repetitions", "must be >= 5"));
    }
    ensure_out(out)?;
    let cells: Vec<BenchCell> = cfg
        .cells
        .iter()
        .map(|c| {
            let kind = parse_strategy_kind(&c.strategy, "cells.strategy")?;
            Ok(BenchCell {
                n: c.n,
                h: c.h,
                w: c.w,
                c: c.c,
                strategy: SamplingStrategy::new(kind, c.ratio)?,
            })
        })
        .collect::<Result<_>>()?;
    let results = bench_sweep(&cells, cfg.repetitions, cfg.seed)?;
    let config_json = serde_json::to_value(cfg).expect("config serializes");
    let (manifest, hash) = build_manifest("bench", config_json, serde_json::Value::Null);
    write_manifest(&out.join("manifest.json"), &manifest)?;
    let rows: Vec<String> = results
        .iter()
        .map(|r| format!("{},{}", bench_csv_row(r), hash))
        .collect();
    write_csv(
        &out.join("bench.csv"),
        &format!("{},manifest_hash", bench_csv_header()),
        &rows,
    )?;
    Ok(RunStatus::Success)
}

/// Estimation-error sweep: short recorded runs for each strategy on matched
/// seeds; writes errors.csv and corr.csv.
pub fn run_analyze(cfg: &AnalyzeFileConfig, out: &Path) -> Result<RunStatus> {
    cfg.dataset.validate()?;
    cfg.model.validate()?;
    check_seeds(&cfg.seeds)?;
    if cfg.strategies.is_empty() {
        return Err(Error::invalid("strategies", "must not be empty"));
    }
    ensure_out(out)?;

    let specs = cfg.model.specs(cfg.dataset.classes);
    let config_json = serde_json::to_value(cfg).expect("config serializes");
    let (_, hash) = build_manifest("analyze", config_json.clone(), serde_json::Value::Null);
    let mut error_rows = Vec::new();
    let mut corr_rows = Vec::new();
    let mut detail = Vec::new();
    let mut status = RunStatus::Success;
    let mut num_bn = cfg.model.conv_channels.len();
    for name in &cfg.strategies {
        let kind = parse_strategy_kind(name, "strategies")?;
        let strategy = SamplingStrategy::new(kind, if kind == StrategyKind::Full { 1.0 } else { cfg.ratio })?;
        for &seed in &cfg.seeds {
            let dataset = cfg.dataset.build(seed)?;
            let mut train_cfg = TrainConfig::basic(
                cfg.epochs,
                cfg.batch,
                cfg.lr,
                seed,
                NormSetting::Strategy(strategy),
            );
            train_cfg.record_errors = true;
            let report = train(&specs, &dataset, &train_cfg)?;
            if report.diverged {
                status = RunStatus::Diverged;
            }
            let Some(trace) = &report.trace else { continue };
            num_bn = trace.num_layers;
            for r in &trace.rows {
                error_rows.push(format!(
                    "{},{},{},{},{},{},{}",
                    r.layer,
                    r.iter,
                    fmt_f64(r.e_mu),
                    fmt_f64(r.e_sigma),
                    name,
                    seed,
                    hash
                ));
            }
            let matrix = pearson_matrix(trace, false)?;
            for (layer, row) in matrix.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
                corr_rows.push(format!(
                    "{},{},{},{},{}",
                    name,
                    seed,
                    layer,
                    cells.join(","),
                    hash
                ));
            }
            detail.push(serde_json::json!({
                "strategy": name,
                "seed": seed,
                "mean_offdiag_abs": mean_offdiag_abs(&matrix),
                "diverged": report.diverged,
            }));
        }
    }
    let (manifest, _) = build_manifest("analyze", config_json, serde_json::Value::Array(detail));
    write_manifest(&out.join("manifest.json"), &manifest)?;
    write_csv(
        &out.join("errors.csv"),
        "layer,iter,e_mu,e_sigma,strategy,seed,manifest_hash",
        &error_rows,
    )?;
    let corr_cols: Vec<String> = (0..num_bn).map(|i| format!("c{i}")).collect();
    write_csv(
        &out.join("corr.csv"),
        &format!("strategy,seed,layer,{},manifest_hash", corr_cols.join(",")),
        &corr_rows,
    )?;
    Ok(status)
}

/// Moving-average decay sweep: final validation accuracy per decay rate,
/// divergence reported per row rather than failing the sweep.
pub fn run_decay_sweep(cfg: &DecayFileConfig, out: &Path) -> Result<RunStatus> {
    cfg.dataset.validate()?;
    cfg.model.validate()?;
    check_seeds(&cfg.seeds)?;
    if cfg.alphas.is_empty() {
        return Err(Error::invalid("alphas", "must not be empty"));
    }
    for &a in &cfg.alphas {
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::invalid("alphas", format!("must be in (0, 1], got {a}")));
        }
    }
    ensure_out(out)?;

    let specs = cfg.model.specs(cfg.dataset.classes);
    let kind = parse_strategy_kind(&cfg.strategy, "strategy")?;
    let strategy = SamplingStrategy::new(kind, cfg.ratio)?;
    let config_json = serde_json::to_value(cfg).expect("config serializes");
    let (_, hash) = build_manifest("decay-sweep", config_json.clone(), serde_json::Value::Null);
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &alpha in &cfg.alphas {
        let mut acc_sum = 0.0;
        for &seed in &cfg.seeds {
            let dataset = cfg.dataset.build(seed)?;
            let mut train_cfg = TrainConfig::basic(
                cfg.epochs,
                cfg.batch,
                cfg.lr,
                seed,
                NormSetting::Strategy(strategy),
            );
            train_cfg.decay = alpha;
            train_cfg.reset_moving_each_epoch = cfg.reset_moving_each_epoch;
            let report = train(&specs, &dataset, &train_cfg)?;
            acc_sum += report.final_val_acc;
            rows.push(format!(
                "{},{},{},{},{}",
                fmt_f64(alpha),
                seed,
                fmt_f64(report.final_val_acc),
                report.diverged,
                hash
            ));
        }
        summary.push((alpha, acc_sum / cfg.seeds.len() as f64));
    }
    let best = summary
        .iter()
        .cloned()
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite accuracy"))
        .expect("non-empty alphas");
    let min_alpha = cfg.alphas.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_alpha = cfg.alphas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let placement = if best.0 > min_alpha && best.0 < max_alpha {
        "interior"
    } else {
        "boundary"
    };
    println!(
        "decay sweep: best decay rate {} (mean val acc {:.4}, {} of the sweep range)",
        best.0, best.1, placement
    );

    let detail = serde_json::json!({
        "per_alpha_mean_val_acc": summary.iter().map(|(a, v)| serde_json::json!({"alpha": a, "mean_val_acc": v})).collect::<Vec<_>>(),
        "best_alpha": best.0,
        "placement": placement,
    });
    let (manifest, _) = build_manifest("decay-sweep", config_json, detail);
    write_manifest(&out.join("manifest.json"), &manifest)?;
    write_csv(
        &out.join("decay.csv"),
        "alpha,seed,final_val_acc,diverged,manifest_hash",
        &rows,
    )?;
    Ok(RunStatus::Success)
}
