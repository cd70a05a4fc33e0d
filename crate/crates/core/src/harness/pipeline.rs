//! Batch orchestration: load, attribute, refine, evaluate, write.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    base_cam, baseline_fixed_threshold, check_step_feasibility, FeasibilityReport,
};
use crate::config::{BaselineMode, PipelineConfig};
use crate::data::{GroundTruthMaskSet, TokenInfo, VariantLabel};
use crate::error::{Error, Result};
use crate::harness::manifest::{Manifest, ManifestRecord};
use crate::io::{
    read_features, read_gradients, read_map, read_mask_set, read_metadata, resolve, write_map,
};
use crate::map::{map_stats, ActivationMap};
use crate::metrics::{evaluate, MetricReport, MetricSummary};
use crate::refine::dacg::select_branch;
use crate::refine::{refine, Branch, Module, RefineTrace, RoutingCounts, TokenMaps};
use crate::synth::Scene;

/// Sample ids paired with the error that stopped them.
pub type SampleErrors = Vec<(String, Error)>;

/// A sample after attribution, ready for refinement.
#[derive(Debug, Clone)]
pub struct SampleInput {
    pub sample_id: String,
    pub variant_label: Option<VariantLabel>,
    /// Denoising step the features came from.
    pub step_t: Option<i64>,
    pub cam: ActivationMap,
    pub masks: GroundTruthMaskSet,
    pub tokens: Vec<TokenInfo>,
    pub token_maps: Vec<Option<ActivationMap>>,
    /// Wall-clock time of file loading and base-CAM computation.
    pub load_time: Duration,
}

impl SampleInput {
    /// A synthetic scene, attributed in memory. The result equals what the
    /// file path computes from the scene's written interchange files.
    pub fn from_scene(scene: &Scene) -> Self {
        let start = Instant::now();
        let cam = scene.raw.normalized();
        Self {
            sample_id: scene.meta.sample_id.clone(),
            variant_label: scene.meta.variant_label,
            step_t: Some(0),
            cam,
            masks: scene.masks.clone(),
            tokens: scene.meta.tokens.clone(),
            token_maps: scene.token_maps.clone(),
            load_time: start.elapsed(),
        }
    }
}

/// Step feasibility and the attributed input, or why attribution failed.
#[derive(Debug)]
pub struct LoadedSample {
    pub feasibility: Option<FeasibilityReport>,
    pub input: Result<SampleInput>,
}

/// Reads one manifest record and computes its base CAM.
pub fn load_sample(
    manifest: &Manifest,
    record: &ManifestRecord,
    cfg: &PipelineConfig,
) -> LoadedSample {
    let start = Instant::now();
    let meta_path = manifest.path(&record.meta_path);
    let meta = match read_metadata(&meta_path) {
        Ok(m) => m,
        Err(e) => {
            return LoadedSample {
                feasibility: None,
                input: Err(e),
            }
        }
    };
    let feasibility = match check_step_feasibility(&meta) {
        Ok(f) => f,
        Err(e) => {
            return LoadedSample {
                feasibility: None,
                input: Err(e),
            }
        }
    };
    let input = (|| {
        if meta.sample_id != record.sample_id {
            return Err(Error::Manifest(format!(
                "record {:?} points at metadata for {:?}",
                record.sample_id, meta.sample_id
            )));
        }
        let step = feasibility
            .select(&cfg.attribution.step_overrides)
            .ok_or_else(|| Error::NoValidStep {
                sample_id: meta.sample_id.clone(),
            })?;
        let s = step.t.max(0) as usize;
        let features = read_features(&manifest.path(&record.features_path), &meta, s)?;
        let gradients = read_gradients(&manifest.path(&record.gradients_path), &meta, s)?;
        let cam = base_cam(&features, &gradients)?;
        let masks = read_mask_set(&meta, &manifest.path(&record.mask_dir))?;
        let meta_dir = meta_path.parent().unwrap_or(Path::new(""));
        let token_maps = meta
            .tokens
            .iter()
            .map(|t| {
                t.per_token_map
                    .as_ref()
                    .map(|p| read_map(&resolve(meta_dir, p)))
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleInput {
            sample_id: meta.sample_id.clone(),
            variant_label: record.variant_label.or(meta.variant_label),
            step_t: Some(step.t),
            cam,
            masks,
            tokens: meta.tokens.clone(),
            token_maps,
            load_time: start.elapsed(),
        })
    })();
    LoadedSample {
        feasibility: Some(feasibility),
        input,
    }
}

/// How a refined map was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_t: Option<i64>,
    pub baseline_mode: BaselineMode,
    pub modules: Vec<Module>,
    /// Gating branch of the map entering the gating stage (or of the base
    /// CAM when gating is disabled).
    pub routing_branch: Branch,
    #[serde(flatten)]
    pub trace: RefineTrace,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimes {
    pub attribution_io: Duration,
    pub modules: Vec<(Module, Duration)>,
    pub metrics: Duration,
}

#[derive(Debug, Clone)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub variant_label: Option<VariantLabel>,
    pub cam: ActivationMap,
    pub refined: ActivationMap,
    pub report: MetricReport,
    pub provenance: Provenance,
    pub times: StageTimes,
}

/// Refines and evaluates one attributed sample.
pub fn process(input: &SampleInput, cfg: &PipelineConfig) -> Result<SampleOutcome> {
    let (refined, trace) = match cfg.baseline_mode {
        BaselineMode::FixedThreshold => (
            baseline_fixed_threshold(&input.cam, BaselineMode::THRESHOLD),
            RefineTrace::default(),
        ),
        BaselineMode::None => refine(
            &input.cam,
            TokenMaps {
                tokens: &input.tokens,
                maps: &input.token_maps,
            },
            &cfg.refine_params(),
        )?,
    };
    let routing_branch = match &trace.dacg {
        Some(log) => log.branch,
        None => {
            let s = map_stats(&input.cam);
            select_branch(s.mean, s.std, &cfg.dacg).0
        }
    };
    let start = Instant::now();
    let report = evaluate(&input.sample_id, &refined, &input.masks)?;
    let metrics = start.elapsed();
    let modules = match cfg.baseline_mode {
        BaselineMode::None => cfg.modules.clone(),
        BaselineMode::FixedThreshold => Vec::new(),
    };
    Ok(SampleOutcome {
        sample_id: input.sample_id.clone(),
        variant_label: input.variant_label,
        cam: input.cam.clone(),
        refined,
        report,
        times: StageTimes {
            attribution_io: input.load_time,
            modules: trace.timings.clone(),
            metrics,
        },
        provenance: Provenance {
            step_t: input.step_t,
            baseline_mode: cfg.baseline_mode,
            modules,
            routing_branch,
            trace,
        },
    })
}

/// One `metrics.json` entry: either metrics with provenance, or an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_label: Option<VariantLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Results of a batch, in input order.
#[derive(Debug, Clone)]
pub struct BatchReport {
    pub entries: Vec<SampleEntry>,
    pub outcomes: Vec<SampleOutcome>,
    pub summary: MetricSummary,
    pub routing: RoutingCounts,
}

impl BatchReport {
    fn assemble(
        results: Vec<(
            String,
            Option<VariantLabel>,
            std::result::Result<SampleOutcome, String>,
        )>,
    ) -> Self {
        let mut entries = Vec::with_capacity(results.len());
        let mut outcomes = Vec::new();
        for (sample_id, variant_label, r) in results {
            match r {
                Ok(o) => {
                    entries.push(SampleEntry {
                        sample_id,
                        variant_label: o.variant_label,
                        metrics: Some(o.report.clone()),
                        provenance: Some(o.provenance.clone()),
                        error: None,
                    });
                    outcomes.push(o);
                }
                Err(e) => entries.push(SampleEntry {
                    sample_id,
                    variant_label,
                    metrics: None,
                    provenance: None,
                    error: Some(e),
                }),
            }
        }
        let reports: Vec<MetricReport> = outcomes.iter().map(|o| o.report.clone()).collect();
        let routing = outcomes
            .iter()
            .map(|o| o.provenance.routing_branch)
            .collect();
        Self {
            entries,
            summary: MetricSummary::of(&reports),
            routing,
            outcomes,
        }
    }

    pub fn error_count(&self) -> usize {
        self.entries.iter().filter(|e| e.error.is_some()).count()
    }

    pub fn reports(&self) -> Vec<MetricReport> {
        self.outcomes.iter().map(|o| o.report.clone()).collect()
    }

    pub fn metrics_json(&self) -> Result<String> {
        let doc = serde_json::json!({
            "summary": self.summary,
            "routing": self.routing,
            "samples": self.entries,
        });
        Ok(serde_json::to_string_pretty(&doc)? + "\n")
    }
}

pub(crate) fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))
}

/// Processes attributed inputs with `cfg.workers` threads; output order
/// follows input order.
pub fn run_inputs(inputs: &[SampleInput], cfg: &PipelineConfig) -> Result<BatchReport> {
    let results = thread_pool(cfg.workers)?.install(|| {
        inputs
            .par_iter()
            .map(|i| {
                (
                    i.sample_id.clone(),
                    i.variant_label,
                    process(i, cfg).map_err(|e| e.to_string()),
                )
            })
            .collect()
    });
    Ok(BatchReport::assemble(results))
}

/// Attributes every manifest record, keeping failures per sample.
pub fn load_manifest(
    manifest: &Manifest,
    cfg: &PipelineConfig,
) -> Result<Vec<(ManifestRecord, LoadedSample)>> {
    thread_pool(cfg.workers)?.install(|| {
        Ok(manifest
            .records
            .par_iter()
            .map(|r| (r.clone(), load_sample(manifest, r, cfg)))
            .collect())
    })
}

/// Pooled step feasibility plus the per-sample verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityDoc {
    pub valid_count: usize,
    pub total_count: usize,
    pub valid_ratio: f64,
    pub samples: Vec<SampleFeasibility>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleFeasibility {
    pub sample_id: String,
    #[serde(flatten)]
    pub report: FeasibilityReport,
}

impl FeasibilityDoc {
    pub fn of<'a>(items: impl IntoIterator<Item = (&'a str, &'a FeasibilityReport)>) -> Self {
        let samples: Vec<SampleFeasibility> = items
            .into_iter()
            .map(|(id, r)| SampleFeasibility {
                sample_id: id.to_string(),
                report: r.clone(),
            })
            .collect();
        let pooled = FeasibilityReport::pooled(samples.iter().map(|s| &s.report));
        Self {
            valid_count: pooled.valid_count,
            total_count: pooled.total_count,
            valid_ratio: pooled.valid_ratio,
            samples,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::file(path, e))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

fn feasibility_of(loaded: &[(ManifestRecord, LoadedSample)]) -> FeasibilityDoc {
    FeasibilityDoc::of(
        loaded
            .iter()
            .filter_map(|(r, l)| l.feasibility.as_ref().map(|f| (r.sample_id.as_str(), f))),
    )
}

/// Computes base CAMs only, writing `cam_<id>.npy` and `feasibility.json`.
/// Returns the per-sample errors.
pub fn run_attribution(
    manifest: &Manifest,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<SampleErrors> {
    ensure_dir(out_dir)?;
    let loaded = load_manifest(manifest, cfg)?;
    feasibility_of(&loaded).write(&out_dir.join("feasibility.json"))?;
    let mut errors = Vec::new();
    for (r, l) in loaded {
        match l.input {
            Ok(i) => write_map(&out_dir.join(format!("cam_{}.npy", i.sample_id)), &i.cam)?,
            Err(e) => errors.push((r.sample_id, e)),
        }
    }
    Ok(errors)
}

/// The full batch: attribution, refinement and evaluation of every record.
/// Writes `cam_<id>.npy`, `refined_<id>.npy`, `metrics.json`, `summary.csv`
/// and `feasibility.json` into `out_dir`.
pub fn run_pipeline(
    manifest: &Manifest,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<BatchReport> {
    ensure_dir(out_dir)?;
    let loaded = load_manifest(manifest, cfg)?;
    let results = thread_pool(cfg.workers)?.install(|| {
        loaded
            .par_iter()
            .map(|(r, l)| {
                let outcome = match &l.input {
                    Ok(i) => process(i, cfg).map_err(|e| e.to_string()),
                    Err(e) => Err(e.to_string()),
                };
                (r.sample_id.clone(), r.variant_label, outcome)
            })
            .collect::<Vec<_>>()
    });
    let batch = BatchReport::assemble(results);
    for o in &batch.outcomes {
        write_map(&out_dir.join(format!("cam_{}.npy", o.sample_id)), &o.cam)?;
        write_map(
            &out_dir.join(format!("refined_{}.npy", o.sample_id)),
            &o.refined,
        )?;
    }
    write_text(&out_dir.join("metrics.json"), &batch.metrics_json()?)?;
    crate::harness::report::write_summary_csv(
        &out_dir.join("summary.csv"),
        &[crate::harness::report::SummaryRow::of("run", &batch)],
    )?;
    feasibility_of(&loaded).write(&out_dir.join("feasibility.json"))?;
    Ok(batch)
}

/// Attributes every record into memory, dropping failures with a warning.
pub fn attributed_inputs(
    manifest: &Manifest,
    cfg: &PipelineConfig,
) -> Result<(Vec<SampleInput>, SampleErrors)> {
    let mut inputs = Vec::new();
    let mut errors = Vec::new();
    for (r, l) in load_manifest(manifest, cfg)? {
        match l.input {
            Ok(i) => inputs.push(i),
            Err(e) => {
                log::warn!("{}: {e}", r.sample_id);
                errors.push((r.sample_id, e));
            }
        }
    }
    Ok((inputs, errors))
}

/// Refines every record, writing `refined_<id>.npy` and `provenance.json`.
pub fn run_refine(
    manifest: &Manifest,
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<BatchReport> {
    ensure_dir(out_dir)?;
    let loaded = load_manifest(manifest, cfg)?;
    let results = thread_pool(cfg.workers)?.install(|| {
        loaded
            .par_iter()
            .map(|(r, l)| {
                let outcome = match &l.input {
                    Ok(i) => process(i, cfg).map_err(|e| e.to_string()),
                    Err(e) => Err(e.to_string()),
                };
                (r.sample_id.clone(), r.variant_label, outcome)
            })
            .collect::<Vec<_>>()
    });
    let batch = BatchReport::assemble(results);
    for o in &batch.outcomes {
        write_map(
            &out_dir.join(format!("refined_{}.npy", o.sample_id)),
            &o.refined,
        )?;
    }
    let entries: Vec<SampleEntry> = batch
        .entries
        .iter()
        .map(|e| SampleEntry {
            metrics: None,
            ..e.clone()
        })
        .collect();
    write_text(
        &out_dir.join("provenance.json"),
        &(serde_json::to_string_pretty(&entries)? + "\n"),
    )?;
    Ok(batch)
}

/// Ground-truth masks of one record.
pub fn load_masks(manifest: &Manifest, record: &ManifestRecord) -> Result<GroundTruthMaskSet> {
    let meta = read_metadata(&manifest.path(&record.meta_path))?;
    read_mask_set(&meta, &manifest.path(&record.mask_dir))
}

/// Metrics of maps computed elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<SampleEntry>,
    pub summary: MetricSummary,
}

impl EvalReport {
    pub fn error_count(&self) -> usize {
        self.entries.iter().filter(|e| e.error.is_some()).count()
    }
}

/// Scores `<prefix>_<id>.npy` in `maps_dir` against each record's masks
/// and writes `metrics.json` and `summary.csv` into `out_dir`.
pub fn run_eval(
    manifest: &Manifest,
    maps_dir: &Path,
    prefix: &str,
    workers: usize,
    out_dir: &Path,
) -> Result<EvalReport> {
    ensure_dir(out_dir)?;
    let entries: Vec<SampleEntry> = thread_pool(workers)?.install(|| {
        manifest
            .records
            .par_iter()
            .map(|r| {
                let scored = read_map(&maps_dir.join(format!("{prefix}_{}.npy", r.sample_id)))
                    .and_then(|m| evaluate(&r.sample_id, &m, &load_masks(manifest, r)?));
                SampleEntry {
                    sample_id: r.sample_id.clone(),
                    variant_label: r.variant_label,
                    error: scored.as_ref().err().map(|e| e.to_string()),
                    metrics: scored.ok(),
                    provenance: None,
                }
            })
            .collect()
    });
    let reports: Vec<MetricReport> = entries.iter().filter_map(|e| e.metrics.clone()).collect();
    let report = EvalReport {
        summary: MetricSummary::of(&reports),
        entries,
    };
    let doc = serde_json::json!({ "summary": report.summary, "samples": report.entries });
    write_text(
        &out_dir.join("metrics.json"),
        &(serde_json::to_string_pretty(&doc)? + "\n"),
    )?;
    crate::harness::report::write_summary_csv(
        &out_dir.join("summary.csv"),
        &[crate::harness::report::SummaryRow::new(
            prefix,
            &report.summary,
            &RoutingCounts::default(),
            report.error_count(),
        )],
    )?;
    Ok(report)
}
