use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffcam::harness::report::{write_csv, write_summary_csv, SummaryRow};
use diffcam::harness::{
    attributed_inputs, load_manifest, run_attribution, run_eval, run_inputs, run_pipeline,
    run_refine, sweep, time_report, variant_report, FeasibilityDoc, Manifest, SweepSpec,
};
use diffcam::io::{read_map, read_mask_png};
use diffcam::refine::parse_modules;
use diffcam::render::{read_rgb, write_grayscale, write_overlay, OverlayOptions};
use diffcam::{synth, ClassMask, Error, GroundTruthMaskSet, Metric, PipelineConfig};

#[derive(Parser)]
#[command(
    name = "diffcam",
    version,
    about = "Activation maps for diffusion multimodal models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    manifest: PathBuf,
    /// TOML pipeline configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Comma-separated module order, e.g. `akd,dacg,cba,sicd`. Empty disables all.
    #[arg(long)]
    modules: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Base CAMs and step feasibility.
    Attribute(Common),
    /// Base CAMs followed by the refinement modules.
    Refine(Common),
    /// Score precomputed maps against the manifest masks.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Directory holding `<prefix>_<id>.npy` maps.
        #[arg(long)]
        maps_dir: PathBuf,
        #[arg(long, default_value = "refined")]
        prefix: String,
    },
    /// Attribution, refinement and evaluation.
    Run(Common),
    /// Re-run with one parameter set to each of several values.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config path, e.g. `dacg.delta_sigma`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        /// Comma-separated metric subset.
        #[arg(long)]
        metrics: Option<String>,
        #[arg(long)]
        no_routing: bool,
    },
    /// Write a synthetic corpus and its manifest.
    Synth {
        #[arg(long, default_value = "synth")]
        out_dir: PathBuf,
        /// `START..END` (end exclusive) or a single seed.
        #[arg(long, default_value = "0..200")]
        seed_range: String,
        /// Also write the four caption variants of each scene.
        #[arg(long)]
        variants: bool,
    },
    /// Heatmap PNG, optionally blended over an image with mask outlines.
    Render {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        image: Option<PathBuf>,
        /// Mask PNGs to outline.
        #[arg(long, value_delimiter = ',')]
        masks: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        opacity: f64,
        /// Output `HxW` for overlays without a source image.
        #[arg(long)]
        size: Option<String>,
    },
    /// Step feasibility of every sample.
    CheckSteps(Common),
    /// Mean metrics per caption variant and the ordering predicate.
    Variants(Common),
    /// Per-stage runtime breakdown.
    Time(Common),
}

enum Status {
    Ok,
    SampleErrors(usize),
}

fn config(common: &Common) -> Result<PipelineConfig, Error> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = &common.modules {
        cfg = cfg.with_modules(parse_modules(m)?);
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// An unreadable manifest is reported like a bad configuration.
fn manifest(common: &Common) -> Result<Manifest, Error> {
    Manifest::load(&common.manifest).map_err(|e| match e {
        Error::Manifest(_) => e,
        other => Error::Manifest(other.to_string()),
    })
}

fn parse_seed_range(text: &str) -> Result<Range<u64>, Error> {
    let bad = || Error::Config(format!("bad seed range {text:?}"));
    match text.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            );
            if a >= b {
                return Err(bad());
            }
            Ok(a..b)
        }
        None => {
            let s: u64 = text.trim().parse().map_err(|_| bad())?;
            Ok(s..s + 1)
        }
    }
}

fn parse_size(text: &str) -> Result<(usize, usize), Error> {
    let bad = || Error::Config(format!("bad size {text:?}, expected HxW"));
    let (h, w) = text.split_once('x').ok_or_else(bad)?;
    Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?))
}

fn report_errors(errors: &[(String, String)]) -> Status {
    for (id, e) in errors {
        log::error!("{id}: {e}");
    }
    if errors.is_empty() {
        Status::Ok
    } else {
        Status::SampleErrors(errors.len())
    }
}

fn entry_errors(entries: &[diffcam::harness::SampleEntry]) -> Vec<(String, String)> {
    entries
        .iter()
        .filter_map(|e| e.error.as_ref().map(|m| (e.sample_id.clone(), m.clone())))
        .collect()
}

fn stringify(errors: Vec<(String, Error)>) -> Vec<(String, String)> {
    errors
        .into_iter()
        .map(|(id, e)| (id, e.to_string()))
        .collect()
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(Error::Io)
}

fn execute(command: Command) -> Result<Status, Error> {
    match command {
        Command::Attribute(c) => {
            let (cfg, m) = (config(&c)?, manifest(&c)?);
            Ok(report_errors(&stringify(run_attribution(
                &m, &cfg, &c.out_dir,
            )?)))
        }
        Command::Refine(c) => {
            let (cfg, m) = (config(&c)?, manifest(&c)?);
            Ok(report_errors(&entry_errors(
                &run_refine(&m, &cfg, &c.out_dir)?.entries,
            )))
        }
        Command::Eval {
            common: c,
            maps_dir,
            prefix,
        } => {
            let (cfg, m) = (config(&c)?, manifest(&c)?);
            let r = run_eval(&m, &maps_dir, &prefix, cfg.workers, &c.out_dir)?;
            println!(
                "f3 {:.4} over {} samples",
                r.summary.f3.mean, r.summary.count
            );
            Ok(report_errors(&entry_errors(&r.entries)))
        }
        Command::Run(c) => {
            let (cfg, m) = (config(&c)?, manifest(&c)?);
            let batch = run_pipeline(&m, &cfg, &c.out_dir)?;
            let s = &batch.summary;
            println!(
                "obj_iou {:.4}  contrast {:.3}  concentration {:.4}  f3 {:.4}  ({} samples)",
                s.obj_iou.mean, s.contrast.mean, s.concentration.mean, s.f3.mean, s.count
            );
            Ok(report_errors(&entry_errors(&batch.entries)))
        }
        Command::Sweep {
            common: c,
            param,
            values,
            metrics,
            no_routing,
        } => {
            let (cfg, m) = (config(&c)?, manifest(&c)?);
            let mut spec = SweepSpec::new(&param, &[]);
            spec.values = SweepSpec::parse_values(&values);
            spec.routing = !no_routing;
            if let Some(list) = metrics {
                spec.metrics = list
                    .split(',')
                    .map(|name| {
                        Metric::ALL
                            .into_iter()
                            .find(|x| x.as_str() == name.trim())
                            .ok_or_else(|| Error::Config(format!("unknown metric {name:?}")))
                    })
                    .collect::<Result<_, _>>()?;
            }
            let (inputs, errors) = attributed_inputs(&m, &cfg)?;
            let table = sweep(&inputs, &cfg, &spec)?;
            ensure_dir(&c.out_dir)?;
            std::fs::write(c.out_dir.join("sweep.csv"), table.to_csv()?)?;
            write_summary_csv(&c.out_dir.join("summary.csv"), &table.summary_rows())?;
            print!("{}", table.to_csv()?);
            Ok(report_errors(&stringify(errors)))
        }
        Command::Synth {
            out_dir,
            seed_range,
            variants,
        } => {
            let seeds = parse_seed_range(&seed_range)?;
            let path = synth::write_corpus(&out_dir, seeds, variants)?;
            println!("{}", path.display());
            Ok(Status::Ok)
        }
        Command::Render {
            map,
            out,
            image,
            masks,
            opacity,
            size,
        } => {
            let map = read_map(&map)?;
            if image.is_none() && masks.is_empty() && size.is_none() {
                write_grayscale(&out, &map)?;
                return Ok(Status::Ok);
            }
            let background = image.as_deref().map(read_rgb).transpose()?;
            let mask_set = if masks.is_empty() {
                None
            } else {
                let mut dims = None;
                let mut list = Vec::new();
                for p in &masks {
                    let (h, w, mask) = read_mask_png(p)?;
                    dims.get_or_insert((h, w));
                    let class_name = p
                        .file_stem()
                        .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                    list.push(ClassMask { class_name, mask });
                }
                Some(GroundTruthMaskSet::new(dims.unwrap_or_default(), list)?)
            };
            let opts = OverlayOptions {
                size: size
                    .as_deref()
                    .map(parse_size)
                    .transpose()?
                    .unwrap_or((0, 0)),
                opacity,
                ..Default::default()
            };
            write_overlay(&out, &map, background.as_ref(), mask_set.as_ref(), &opts)?;
            Ok(Status::Ok)
        }
        Command::CheckSteps(c) => {
            let (cfg, m) = (config(&c)?, manifest(&c)?);
            let loaded = load_manifest(&m, &cfg)?;
            let doc =
                FeasibilityDoc::of(loaded.iter().filter_map(|(r, l)| {
                    l.feasibility.as_ref().map(|f| (r.sample_id.as_str(), f))
                }));
            ensure_dir(&c.out_dir)?;
            doc.write(&c.out_dir.join("feasibility.json"))?;
            println!(
                "{}/{} steps valid ({:.2}%)",
                doc.valid_count,
                doc.total_count,
                100.0 * doc.valid_ratio
            );
            let errors: Vec<(String, String)> = loaded
                .iter()
                .filter(|(_, l)| l.feasibility.is_none())
                .filter_map(|(r, l)| {
                    l.input
                        .as_ref()
                        .err()
                        .map(|e| (r.sample_id.clone(), e.to_string()))
                })
                .collect();
            Ok(report_errors(&errors))
        }
        Command::Variants(c) => {
            let (cfg, m) = (config(&c)?, manifest(&c)?);
            let (inputs, errors) = attributed_inputs(&m, &cfg)?;
            let batch = run_inputs(&inputs, &cfg)?;
            let report =
                variant_report(batch.outcomes.iter().map(|o| (o.variant_label, &o.report)))?;
            ensure_dir(&c.out_dir)?;
            let text = report.to_csv()?;
            std::fs::write(c.out_dir.join("variants.csv"), &text)?;
            print!("{text}");
            let mut errors = stringify(errors);
            errors.extend(entry_errors(&batch.entries));
            Ok(report_errors(&errors))
        }
        Command::Time(c) => {
            let (cfg, m) = (config(&c)?, manifest(&c)?);
            let (inputs, errors) = attributed_inputs(&m, &cfg)?;
            let batch = run_inputs(&inputs, &cfg)?;
            let rows = time_report(&batch.outcomes);
            ensure_dir(&c.out_dir)?;
            write_csv(&c.out_dir.join("timing.csv"), &rows)?;
            for r in &rows {
                println!("{:<22} {:>9.3} ms", r.stage, r.mean_ms);
            }
            write_summary_csv(
                &c.out_dir.join("summary.csv"),
                &[SummaryRow::of("time", &batch)],
            )?;
            let mut errors = stringify(errors);
            errors.extend(entry_errors(&batch.entries));
            Ok(report_errors(&errors))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::SampleErrors(n)) => {
            eprintln!("{n} sample(s) failed");
            ExitCode::from(1)
        }
        Err(e @ (Error::Config(_) | Error::Manifest(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
