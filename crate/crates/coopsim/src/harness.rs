//! Experiment orchestration: configuration, the four comparison modes,
//! per-seed parallel execution, and the ablation sweeps (bandwidth, latency,
//! corruption).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::infra::TransmitContent;
use crate::metrics::EvalReport;
use crate::pipeline::{run_seed, CostAggregate};
use crate::planner::PlannerConfig;
use crate::scenario::{generate_scenario, mix_seed, Scenario, ScenarioConfig};

/// Comparison modes: ego-only, detection-box late fusion, the full hybrid
/// pipeline, and a dense-BEV cost baseline (hybrid semantics, dense-tensor
/// transmission accounting).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NoFusion,
    LateFusion,
    Univ2x,
    DenseBev,
}

impl Mode {
    pub fn transmits(&self) -> bool {
        !matches!(self, Mode::NoFusion)
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::NoFusion => "no_fusion",
            Mode::LateFusion => "late_fusion",
            Mode::Univ2x => "univ2x",
            Mode::DenseBev => "dense_bev",
        }
    }
}

/// Oracle sensor noise shared by both views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub pos_sigma: f64,
    pub heading_sigma: f64,
    pub miss_prob: f64,
    pub false_pos_rate: f64,
    pub conf_base: f64,
    pub conf_decay: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            pos_sigma: 0.15,
            heading_sigma: 0.02,
            miss_prob: 0.05,
            false_pos_rate: 0.2,
            conf_base: 0.95,
            conf_decay: 0.005,
        }
    }
}

impl NoiseConfig {
    pub fn noiseless() -> Self {
        NoiseConfig {
            pos_sigma: 0.0,
            heading_sigma: 0.0,
            miss_prob: 0.0,
            false_pos_rate: 0.0,
            conf_base: 0.95,
            conf_decay: 0.005,
        }
    }
}

/// Infrastructure-side transmission settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransmitConfig {
    /// Queries below this confidence are filtered before transmission.
    pub conf_threshold: f64,
    pub content: TransmitContent,
}

impl Default for TransmitConfig {
    fn default() -> Self {
        TransmitConfig {
            conf_threshold: 0.3,
            content: TransmitContent::default(),
        }
    }
}

/// Full experiment configuration; the JSON config file mirrors these field
/// names. Exactly one of `scenario` / `scenario_path` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: Option<ScenarioConfig>,
    pub scenario_path: Option<PathBuf>,
    pub mode: Mode,
    pub channel: ChannelConfig,
    pub fusion: FusionConfig,
    pub planner: PlannerConfig,
    pub noise: NoiseConfig,
    pub transmit: TransmitConfig,
    pub feature_dim: usize,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            scenario: Some(ScenarioConfig::default()),
            scenario_path: None,
            mode: Mode::Univ2x,
            channel: ChannelConfig::default(),
            fusion: FusionConfig::default(),
            planner: PlannerConfig::default(),
            noise: NoiseConfig::default(),
            transmit: TransmitConfig::default(),
            feature_dim: 256,
            seeds: vec![0, 1, 2, 3],
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.scenario, &self.scenario_path) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "set either scenario or scenario_path, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config(
                    "one of scenario / scenario_path required".into(),
                ))
            }
            _ => {}
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed required".into()));
        }
        if self.feature_dim == 0 || !self.feature_dim.is_multiple_of(2) {
            return Err(Error::Config(
                "feature_dim must be a positive even number".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.channel.drop_fraction) {
            return Err(Error::Config("drop_fraction must be in [0,1]".into()));
        }
        if self.channel.frequency_hz <= 0.0 {
            return Err(Error::Config("frequency_hz must be > 0".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One experiment cell: per-seed reports plus their aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub axis: Option<String>,
    pub axis_value: Option<f64>,
    pub variant: Option<String>,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<EvalReport>,
    pub mean: EvalReport,
    pub std: EvalReport,
    pub cost: CostAggregate,
}

/// Serialized output of `run` / `sweep`, consumed by `report`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub config: ExperimentConfig,
    pub axis: Option<String>,
    pub records: Vec<RunRecord>,
}

impl ReportDoc {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Worker pool honoring the COOPSIM_THREADS override.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("COOPSIM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("COOPSIM_THREADS must be a number, got {v}")))?;
        if n > 0 {
            builder = builder.num_threads(n);
        }
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn scenario_for_seed(
    cfg: &ExperimentConfig,
    loaded: Option<&Scenario>,
    run_seed: u64,
) -> Result<Scenario> {
    if let Some(s) = loaded {
        return Ok(s.clone());
    }
    let mut sc = cfg.scenario.clone().expect("validated");
    sc.seed = mix_seed(sc.seed, run_seed);
    generate_scenario(&sc)
}

/// Runs one mode over all seeds (parallel across seeds; aggregation in seed
/// order, so any worker count yields identical results).
pub fn run_mode(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let loaded = match &cfg.scenario_path {
        Some(p) => Some(Scenario::load_json(p)?),
        None => None,
    };
    let pool = thread_pool()?;
    let results: Result<Vec<(EvalReport, CostAggregate)>> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let scenario = scenario_for_seed(cfg, loaded.as_ref(), seed)?;
                run_seed(&scenario, cfg, seed)
            })
            .collect()
    });
    let results = results?;
    let per_seed: Vec<EvalReport> = results.iter().map(|(r, _)| r.clone()).collect();
    let costs: Vec<CostAggregate> = results.iter().map(|(_, c)| *c).collect();
    let (mean, std) = aggregate_reports(&per_seed);
    Ok(RunRecord {
        label: cfg.mode.name().to_string(),
        axis: None,
        axis_value: None,
        variant: None,
        config_hash: cfg.config_hash(),
        seeds: cfg.seeds.clone(),
        per_seed,
        mean,
        std,
        cost: mean_costs(&costs),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Bandwidth,
    Latency,
    Corruption,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Bandwidth => "bandwidth",
            SweepAxis::Latency => "latency",
            SweepAxis::Corruption => "corruption",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bandwidth" => Ok(SweepAxis::Bandwidth),
            "latency" => Ok(SweepAxis::Latency),
            "corruption" => Ok(SweepAxis::Corruption),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other}; expected bandwidth|latency|corruption"
            ))),
        }
    }
}

/// Bytes-per-payload budget equivalent to a megabit-per-second link at the
/// configured transmission frequency.
pub fn mbps_to_budget_bytes(mbps: f64, frequency_hz: f64) -> u64 {
    (mbps * 1e6 / 8.0 / frequency_hz).floor() as u64
}

/// Runs one cell per axis value (latency values run twice: with and without
/// flow compensation), all else held fixed.
pub fn sweep(axis: SweepAxis, values: &[f64], base: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    base.validate()?;
    let mut records = Vec::new();
    for &v in values {
        match axis {
            SweepAxis::Bandwidth => {
                let mut cfg = base.clone();
                cfg.channel.bandwidth_budget =
                    Some(mbps_to_budget_bytes(v, cfg.channel.frequency_hz));
                let mut rec = run_mode(&cfg)?;
                rec.label = format!("bandwidth={v}");
                rec.axis = Some(axis.name().to_string());
                rec.axis_value = Some(v);
                records.push(rec);
            }
            SweepAxis::Latency => {
                for (compensated, variant) in [(true, "compensated"), (false, "uncompensated")] {
                    let mut cfg = base.clone();
                    cfg.channel.latency = v;
                    cfg.fusion.flow_compensation = compensated;
                    let mut rec = run_mode(&cfg)?;
                    rec.label = format!("latency={v}/{variant}");
                    rec.axis = Some(axis.name().to_string());
                    rec.axis_value = Some(v);
                    rec.variant = Some(variant.to_string());
                    records.push(rec);
                }
            }
            SweepAxis::Corruption => {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!(
                        "corruption fraction {v} outside [0,1]"
                    )));
                }
                let mut cfg = base.clone();
                cfg.channel.drop_fraction = v;
                // The reliability ablation exercises agent queries only.
                cfg.transmit.content = TransmitContent {
                    agents: true,
                    lanes: false,
                    occupancy: false,
                };
                let mut rec = run_mode(&cfg)?;
                rec.label = format!("corruption={v}");
                rec.axis = Some(axis.name().to_string());
                rec.axis_value = Some(v);
                records.push(rec);
            }
        }
    }
    Ok(records)
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn std_of(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

fn map_keys(
    reports: &[EvalReport],
    get: impl Fn(&EvalReport) -> &BTreeMap<String, f64>,
) -> Vec<String> {
    let mut keys: Vec<String> = Vec::new();
    for r in reports {
        for k in get(r).keys() {
            if !keys.contains(k) {
                keys.push(k.clone());
            }
        }
    }
    keys.sort();
    keys
}

fn aggregate_map(
    reports: &[EvalReport],
    get: impl Fn(&EvalReport) -> &BTreeMap<String, f64> + Copy,
    stat: impl Fn(&mut dyn Iterator<Item = f64>) -> f64,
) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for key in map_keys(reports, get) {
        let value = {
            let mut it = reports.iter().filter_map(|r| get(r).get(&key).copied());
            stat(&mut it)
        };
        out.insert(key, value);
    }
    out
}

fn build_stat_report(reports: &[EvalReport], use_std: bool) -> EvalReport {
    let stat = |get: fn(&EvalReport) -> f64| -> f64 {
        if use_std {
            std_of(reports.iter().map(get))
        } else {
            mean_of(reports.iter().map(get))
        }
    };
    let map_stat = |it: &mut dyn Iterator<Item = f64>| -> f64 {
        if use_std {
            std_of(it)
        } else {
            mean_of(it)
        }
    };
    EvalReport {
        ap_per_class: aggregate_map(reports, |r| &r.ap_per_class, map_stat),
        det_recall: stat(|r| r.det_recall),
        mota: stat(|r| r.mota),
        id_switches: stat(|r| r.id_switches),
        iou_lane: stat(|r| r.iou_lane),
        iou_crosswalk: stat(|r| r.iou_crosswalk),
        iou_n: stat(|r| r.iou_n),
        iou_f: stat(|r| r.iou_f),
        l2_at: aggregate_map(reports, |r| &r.l2_at, map_stat),
        collision_rate_at: aggregate_map(reports, |r| &r.collision_rate_at, map_stat),
        offroad_rate_at: aggregate_map(reports, |r| &r.offroad_rate_at, map_stat),
        l2_avg: stat(|r| r.l2_avg),
        collision_rate_avg: stat(|r| r.collision_rate_avg),
        offroad_rate_avg: stat(|r| r.offroad_rate_avg),
        avg_bps: stat(|r| r.avg_bps),
    }
}

/// Field-wise mean and (population) standard deviation over per-seed
/// reports. Map-valued fields aggregate per key over the seeds that carry
/// the key.
pub fn aggregate_reports(reports: &[EvalReport]) -> (EvalReport, EvalReport) {
    (
        build_stat_report(reports, false),
        build_stat_report(reports, true),
    )
}

fn mean_costs(costs: &[CostAggregate]) -> CostAggregate {
    if costs.is_empty() {
        return CostAggregate::zero();
    }
    let n = costs.len() as f64;
    CostAggregate {
        feature_bytes: costs.iter().map(|c| c.feature_bytes).sum::<f64>() / n,
        geometry_bytes: costs.iter().map(|c| c.geometry_bytes).sum::<f64>() / n,
        occupancy_bytes: costs.iter().map(|c| c.occupancy_bytes).sum::<f64>() / n,
        total_body_bytes: costs.iter().map(|c| c.total_body_bytes).sum::<f64>() / n,
        bps: costs.iter().map(|c| c.bps).sum::<f64>() / n,
    }
}

// ---------------------------------------------------------------------------
// CLI entry points (the bin stays thin).

pub fn cmd_gen(config_path: &Path, out: &Path) -> Result<()> {
    let s = std::fs::read_to_string(config_path)
        .map_err(|e| Error::io(config_path.display().to_string(), e))?;
    let sc: ScenarioConfig = serde_json::from_str(&s)?;
    let scenario = generate_scenario(&sc)?;
    scenario.save_json(out)?;
    println!(
        "wrote scenario with {} frames to {}",
        scenario.frames.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_run(config_path: &Path, out_dir: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let record = run_mode(&cfg)?;
    let doc = ReportDoc {
        config: cfg,
        axis: None,
        records: vec![record],
    };
    let path = out_dir.join("run.json");
    doc.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_sweep(axis: &str, values: &[f64], config_path: &Path, out_dir: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let axis = SweepAxis::parse(axis)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let records = sweep(axis, values, &cfg)?;
    let doc = ReportDoc {
        config: cfg,
        axis: Some(axis.name().to_string()),
        records,
    };
    let path = out_dir.join("sweep.json");
    doc.save(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn cmd_report(in_dir: &Path, format: &str) -> Result<PathBuf> {
    let format = crate::report::ReportFormat::parse(format)?;
    let doc_path = ["run.json", "sweep.json"]
        .iter()
        .map(|f| in_dir.join(f))
        .find(|p| p.exists())
        .ok_or_else(|| {
            Error::Config(format!("no run.json or sweep.json in {}", in_dir.display()))
        })?;
    let doc = ReportDoc::load(&doc_path)?;
    let out = crate::report::write_report(&doc, format, in_dir)?;
    println!("wrote {}", out.display());
    Ok(out)
}
