use std::fs;
use std::path::{Path, PathBuf};

use rgmm_core::evaluation::{generate_phantom, loo_eval, loo_patient_eval, OraclePredictor, PhantomSpec};
use rgmm_core::labeling::DEFAULT_BONE_THRESHOLD_HU;
use rgmm_core::mixture::{read_tissue_gmm, write_tissue_gmm};
use rgmm_core::predictor::{classifier_cv, predict_ct, read_bundle, train_pipeline, write_bundle};
use rgmm_core::volume::{assemble, io, Volume};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::Manifest;
use crate::{Command, ConfigArgs};

pub const MODEL_NAME: &str = "model.rgmm";
pub const CONFIG_NAME: &str = "config.txt";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<PathBuf, CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))?;
    Ok(path.to_path_buf())
}

fn write_json(path: &Path, value: &Value) -> Result<PathBuf, CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    write_file(path, text + "\n")
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for a in &args.set {
        cfg.set_assignment(a)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(t) = args.threshold_hu {
        cfg.pipeline.threshold_hu = t;
    }
    if let Some(n) = &args.neighborhood {
        cfg.set("neighborhood", n)?;
    }
    if let Some(m) = args.n_learners {
        cfg.pipeline.boost.n_learners = m;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_workers(n: usize) {
    if n > 0 {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Creates `out` and refuses to write into any input location.
fn prepare_out(out: &Path, inputs: &[&Path]) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let out_c = out.canonicalize().map_err(|e| io_err(out, e))?;
    for input in inputs {
        let in_c = input.canonicalize().map_err(|e| io_err(input, e))?;
        if out_c == in_c || (in_c.is_dir() && out_c.starts_with(&in_c)) {
            return Err(CliError::Usage(format!(
                "output {} must be outside input {}",
                out.display(),
                input.display()
            )));
        }
    }
    Ok(())
}

fn parse_dims(text: &str) -> Result<[usize; 3], CliError> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("bad dims `{text}`")))?;
    parts
        .try_into()
        .map_err(|_| CliError::Usage(format!("dims need three values, got `{text}`")))
}

pub fn run(command: Command) -> Result<(), CliError> {
    let argv: Vec<String> = std::env::args().collect();
    match command {
        Command::Phantom {
            out,
            patients,
            dims,
            channels,
            minority_fraction,
            noise_scale,
            smoothing_sigma,
            config,
        } => {
            let cfg = resolve_config(&config)?;
            init_workers(cfg.workers);
            let mut spec = PhantomSpec::standard(parse_dims(&dims)?, channels)?;
            spec.threshold_hu = cfg.pipeline.threshold_hu;
            if let Some(f) = minority_fraction {
                spec.minority_fraction = f;
            }
            if let Some(s) = noise_scale {
                spec.noise_scale = s;
            }
            if let Some(s) = smoothing_sigma {
                spec.smoothing_sigma = s;
            }
            let phantom = generate_phantom(&spec, patients, cfg.seed)?;
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            let mut artifacts = Vec::new();
            for p in &phantom.patients {
                for h in io::write_patient(p, out.join(&p.patient_id))? {
                    artifacts.push(h.with_extension(io::PAYLOAD_EXTENSION));
                    artifacts.push(h);
                }
            }
            let truth = rgmm_core::mixture::TissueGmm::new(spec.class_models.clone())?;
            artifacts.push(write_file(&out.join("truth.gmm"), write_tissue_gmm(&truth))?);
            let details = json!({
                "dims": spec.dims,
                "spacing": spec.spacing,
                "channels": spec.n_channels,
                "patients": patients,
                "minority_fraction": spec.minority_fraction,
                "realized_fractions": phantom.realized_fractions(),
                "smoothing_sigma": spec.smoothing_sigma,
                "noise_scale": spec.noise_scale,
                "threshold_hu": spec.threshold_hu,
            });
            artifacts.push(write_json(&out.join("phantom.json"), &details)?);
            Manifest { command: "phantom", argv, config: &cfg, inputs: vec![], artifacts, extra: details }.write(&out)?;
            println!("wrote {} patients to {}", patients, out.display());
        }

        Command::Train { cohort, out, config } => {
            let cfg = resolve_config(&config)?;
            init_workers(cfg.workers);
            let patients = io::load_cohort(&cohort)?;
            prepare_out(&out, &[&cohort])?;
            let (model, report) = train_pipeline(&patients, &cfg.pipeline, cfg.seed)?;
            let report_json = serde_json::to_value(&report).map_err(|e| CliError::Io(e.to_string()))?;
            let artifacts = vec![
                write_file(&out.join(MODEL_NAME), write_bundle(&model))?,
                write_json(&out.join("training_report.json"), &report_json)?,
                write_file(&out.join(CONFIG_NAME), cfg.to_text())?,
            ];
            let extra = json!({
                "patients": report.patient_ids,
                "validation_patient": report.validation_patient,
                "selected_components": report.selections.iter().map(|s| s.n_components).collect::<Vec<_>>(),
            });
            Manifest { command: "train", argv, config: &cfg, inputs: vec![cohort], artifacts, extra }.write(&out)?;
            println!("model written to {}", out.join(MODEL_NAME).display());
        }

        Command::Predict { model, input, out, workers } => {
            let text = fs::read_to_string(&model).map_err(|e| io_err(&model, e))?;
            let bundle = read_bundle(&text)?;
            let mut cfg = RunConfig { pipeline: bundle.config().clone(), seed: bundle.seed(), ..RunConfig::default() };
            cfg.workers = workers.unwrap_or(0);
            init_workers(cfg.workers);
            let channels = io::mr_headers_in(&input)?
                .iter()
                .map(io::read_volume)
                .collect::<Result<Vec<_>, _>>()?;
            let mask_path = input.join(format!("mask.{}", io::HEADER_EXTENSION));
            let mask = if mask_path.is_file() {
                io::read_volume(&mask_path)?
            } else {
                Volume::filled(channels[0].dims(), channels[0].spacing(), 1.0)?
            };
            prepare_out(&out, &[&input, &model])?;
            let pred = predict_ct(&bundle, &channels, &mask)?;
            let mut artifacts = Vec::new();
            for (vol, stem) in [(&pred.ct, "ct"), (&pred.labels, "labels")] {
                let h = io::write_volume(vol, out.join(stem))?;
                artifacts.push(h.with_extension(io::PAYLOAD_EXTENSION));
                artifacts.push(h);
            }
            let extra = json!({ "predicted_voxels": pred.n_predicted, "mask_supplied": mask_path.is_file() });
            Manifest { command: "predict", argv, config: &cfg, inputs: vec![model, input], artifacts, extra }.write(&out)?;
            println!("predicted {} voxels", pred.n_predicted);
        }

        Command::Evaluate { cohort, out, truth, config } => {
            let cfg = resolve_config(&config)?;
            init_workers(cfg.workers);
            let patients = io::load_cohort(&cohort)?;
            let mut inputs = vec![cohort.clone()];
            let oracle = match &truth {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                    inputs.push(path.clone());
                    Some(OraclePredictor::from_models(read_tissue_gmm(&text)?.models(), cfg.pipeline.threshold_hu)?)
                }
                None => None,
            };
            prepare_out(&out, &[&cohort])?;
            let report = loo_patient_eval(&patients, &cfg.pipeline, cfg.seed, cfg.window_hu)?;
            let mut summary = report.summary_json();
            if let Some(oracle) = &oracle {
                let o = loo_eval(&patients, cfg.window_hu, DEFAULT_BONE_THRESHOLD_HU, |_, test| {
                    oracle.predict_patient(test)
                })?;
                summary["oracle"] = o.summary_json();
            }
            let mut artifacts = Vec::new();
            let csv = |name: &str| -> Result<(fs::File, PathBuf), CliError> {
                let p = out.join(name);
                Ok((fs::File::create(&p).map_err(|e| io_err(&p, e))?, p))
            };
            let (f, p) = csv("patients.csv")?;
            report.write_patient_csv(f)?;
            artifacts.push(p);
            let (f, p) = csv("curves.csv")?;
            report.write_curves_csv(f)?;
            artifacts.push(p);
            artifacts.push(write_json(&out.join("summary.json"), &summary)?);
            let extra = json!({ "failed_folds": report.n_failed() });
            Manifest { command: "evaluate", argv, config: &cfg, inputs, artifacts, extra }.write(&out)?;
            match report.mean_mae {
                Some(m) => println!("mean MAE {m:.3} HU over {} patients", report.patients.len()),
                None => println!("every fold failed"),
            }
        }

        Command::CvClassifier { cohort, out, folds, config } => {
            let cfg = resolve_config(&config)?;
            init_workers(cfg.workers);
            let patients = io::load_cohort(&cohort)?;
            prepare_out(&out, &[&cohort])?;
            let table = assemble(&patients, cfg.pipeline.order, cfg.pipeline.threshold_hu)?;
            let metrics = classifier_cv(&table, &cfg.pipeline, folds, cfg.seed)?;
            let value = serde_json::to_value(metrics).map_err(|e| CliError::Io(e.to_string()))?;
            let artifacts = vec![write_json(&out.join("metrics.json"), &value)?];
            let extra = json!({ "folds": folds, "rows": table.n_rows() });
            Manifest { command: "cv-classifier", argv, config: &cfg, inputs: vec![cohort], artifacts, extra }.write(&out)?;
            println!("err {:.4} f_score {:.4}", metrics.err, metrics.f_score);
        }
    }
    Ok(())
}
