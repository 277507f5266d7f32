use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use ofrnn::dataset::{read_flow_files, read_frames, write_flow_files};
use ofrnn::{load_config, load_model, pgm, read_dataset, read_subject, save_model, write_subject, Error, Result};
use ofrnn_core::localization::{crop_sequence, localize_lv};
use ofrnn_core::matching::match_images;
use ofrnn_core::pipeline::data::{cohort_params, phantom_subject};
use ofrnn_core::pipeline::*;
use ofrnn_core::synth::{generate, PhantomParams};
use ofrnn_core::varflow::{angle_stats, angular_error, flow_density, flow_sequence, FlowSequence};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "ofrnn", version, about = "Motion-feature infarct localization on cine sequences")]
struct Cli {
    /// JSON pipeline configuration; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Feature mode, overriding the configuration.
    #[arg(long, global = true, value_parser = parse_mode)]
    mode: Option<FeatureMode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom cohort in the dataset layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        count: usize,
        /// Relative motion of the infarct sector.
        #[arg(long)]
        motion_scale: Option<f64>,
        #[arg(long)]
        frames: Option<usize>,
        /// Keep the full field of view instead of the 64x64 crop.
        #[arg(long)]
        uncropped: bool,
    },
    /// Print the 64x64 LV box of a subject as JSON.
    Localize {
        subject: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one .flo per consecutive frame pair.
    Flow {
        subject: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the sparse matches of each pair as CSV.
        #[arg(long)]
        matches: bool,
    },
    Train {
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the predicted mask (mask.pgm) and per-pixel scores (scores.csv).
    Infer {
        subject: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics of a model on a dataset; with --out also ROC and PR curves as CSV.
    Eval {
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Local, global and combined features on the same folds.
    Ablate {
        data: PathBuf,
        /// Number of cross-validation folds (defaults to the configuration).
        #[arg(long, conflicts_with = "holdout")]
        folds: Option<usize>,
        /// Single seeded split with this many test subjects.
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy and wall time per window size, as CSV.
    PatchSweep {
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![3, 5, 7, 9, 11, 13, 15, 17])]
        sizes: Vec<usize>,
        #[arg(long, conflicts_with = "holdout")]
        folds: Option<usize>,
        #[arg(long)]
        holdout: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Angular error and density of estimated flow against ground-truth .flo files.
    BenchmarkFlow {
        subject: PathBuf,
        /// Directory of ground-truth flows; defaults to the subject's flows/.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_mode(s: &str) -> std::result::Result<FeatureMode, String> {
    s.parse().map_err(|e: ofrnn_core::Error| e.to_string())
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|source| Error::Io { path: p.into(), source }),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io { path: path.into(), source })
}

fn make_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io { path: path.into(), source })
}

fn folds_for(n: usize, folds: Option<usize>, holdout: Option<usize>, config: &PipelineConfig, seed: u64) -> Result<Vec<Fold>> {
    Ok(match holdout {
        Some(t) => vec![holdout_split(n, t, seed)?],
        None => kfold_split(n, folds.unwrap_or(config.folds), seed)?,
    })
}

fn points_csv(header: &str, points: &[(f64, f64)]) -> String {
    let mut s = format!("{header}\n");
    for (a, b) in points {
        writeln!(s, "{a},{b}").unwrap();
    }
    s
}

#[derive(Serialize)]
struct FlowBenchmark {
    pairs: usize,
    aae_mean_deg: f64,
    aae_std_deg: f64,
    aae: String,
    density: f64,
    pixels: usize,
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => load_config(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(m) = cli.mode {
        config.mode = m;
    }
    let seed = cli.seed;

    match cli.command {
        Command::Synth { out, count, motion_scale, frames, uncropped } => {
            let mut base = PhantomParams::default();
            if let Some(s) = motion_scale {
                base.infarct_motion_scale = s;
            }
            if let Some(f) = frames {
                base.frames = f;
            }
            for i in 0..count {
                let id = format!("phantom_{i:02}");
                let params = cohort_params(&base, i, seed);
                let subject = if uncropped {
                    let ds = generate(&params)?;
                    Subject {
                        id: id.clone(),
                        sequence: ds.sequence.clone(),
                        mask: ds.mask.clone(),
                        myocardium: Some(ds.myocardium.clone()),
                        slice_level: ds.slice_level,
                        center: ds.center(),
                        reference_angle: 0.0,
                        pixel_spacing_mm: 1.0,
                        gt_flows: Some(ds.gt_flows),
                    }
                } else {
                    phantom_subject(&id, &params)?
                };
                write_subject(&subject, &out.join(&id))?;
            }
            eprintln!("wrote {count} subjects to {}", out.display());
        }
        Command::Localize { subject, out } => {
            let seq = read_frames(&subject)?;
            let roi = localize_lv(&seq)?;
            emit(&json(&roi), out.as_deref())?;
        }
        Command::Flow { subject, out, matches } => {
            let mut seq = read_frames(&subject)?;
            if seq.dims() != (64, 64) {
                seq = crop_sequence(&seq, localize_lv(&seq)?)?;
            }
            let flows = flow_sequence(&seq, &config.flow, &config.matcher)?;
            write_flow_files(&flows, &out)?;
            if matches {
                for (i, pair) in seq.frames().windows(2).enumerate() {
                    let m = match_images(&pair[0], &pair[1], &config.matcher)?;
                    write_file(&out.join(format!("matches_{i:02}.csv")), &m.to_csv())?;
                }
            }
            eprintln!("wrote {} flow fields to {}", flows.len(), out.display());
        }
        Command::Train { data, out } => {
            let dataset = read_dataset(&data)?;
            let model = train(&dataset, &config, seed)?;
            save_model(&model, &out)?;
            eprintln!("trained on {} subjects; model written to {}", dataset.len(), out.display());
        }
        Command::Infer { subject, model, out } => {
            let model = load_model(&model)?;
            let s = read_subject(&subject)?;
            let pred = infer(&model, &s.sequence, s.myocardium.as_ref())?;
            make_dir(&out)?;
            pgm::write_mask(&pred.mask, &out.join("mask.pgm"))?;
            let (w, h) = pred.mask.dims();
            let mut csv = String::from("x,y,score\n");
            for y in 0..h {
                for x in 0..w {
                    if pred.region.get(x, y) {
                        writeln!(csv, "{x},{y},{}", pred.scores[y * w + x]).unwrap();
                    }
                }
            }
            write_file(&out.join("scores.csv"), &csv)?;
        }
        Command::Eval { data, model, out } => {
            let model = load_model(&model)?;
            let dataset = read_dataset(&data)?;
            let subjects: Vec<&Subject> = dataset.subjects.iter().collect();
            let flows = compute_flows(&subjects, &model.config)?;
            let refs: Vec<&FlowSequence> = flows.iter().collect();
            let report = evaluate_subjects(&model, &subjects, &refs)?;
            match out {
                Some(dir) => {
                    make_dir(&dir)?;
                    write_file(&dir.join("report.json"), &json(&report))?;
                    write_file(&dir.join("roc.csv"), &points_csv("fpr,tpr", &report.roc))?;
                    write_file(&dir.join("pr.csv"), &points_csv("recall,precision", &report.pr))?;
                }
                None => emit(&json(&report), None)?,
            }
        }
        Command::Ablate { data, folds, holdout, out } => {
            let dataset = read_dataset(&data)?;
            let folds = folds_for(dataset.len(), folds, holdout, &config, seed)?;
            let report = ablate(&dataset, &config, &folds, seed)?;
            emit(&json(&report), out.as_deref())?;
        }
        Command::PatchSweep { data, sizes, folds, holdout, out } => {
            let dataset = read_dataset(&data)?;
            let folds = folds_for(dataset.len(), folds, holdout, &config, seed)?;
            let start = Instant::now();
            let mut clock = || start.elapsed().as_secs_f64();
            let rows = patch_sweep(&dataset, &sizes, &config, &folds, seed, &mut clock)?;
            let mut csv = String::from("size,accuracy,seconds\n");
            for r in rows {
                writeln!(csv, "{},{},{:.3}", r.size, r.accuracy, r.seconds).unwrap();
            }
            emit(csv.trim_end(), out.as_deref())?;
        }
        Command::BenchmarkFlow { subject, gt, out } => {
            let s = read_subject(&subject)?;
            let gt = match gt {
                Some(dir) => read_flow_files(&dir)?,
                None => s.gt_flows.clone(),
            }
            .ok_or_else(|| Error::Format("no ground-truth flows found".into()))?;
            if gt.len() + 1 != s.sequence.len() || gt.dims() != s.sequence.dims() {
                return Err(Error::Format("ground-truth flows do not match the frames".into()));
            }
            let est = flow_sequence(&s.sequence, &config.flow, &config.matcher)?;
            let region = s.region();
            let mut angles = Vec::new();
            let mut density = 0.0;
            for (e, g) in est.flows().iter().zip(gt.flows()) {
                density += flow_density(e) / est.len() as f64;
                for i in 0..e.u().len() {
                    if region.labels()[i] != 0 && e.is_known(i) && g.is_known(i) {
                        angles.push(angular_error((e.u()[i], e.v()[i]), (g.u()[i], g.v()[i])).to_degrees());
                    }
                }
            }
            let stats = angle_stats(&angles);
            let report = FlowBenchmark {
                pairs: est.len(),
                aae_mean_deg: stats.mean,
                aae_std_deg: stats.std,
                aae: stats.to_string(),
                density,
                pixels: stats.pixels,
            };
            emit(&json(&report), out.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
