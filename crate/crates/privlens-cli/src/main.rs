//! Command-line surface for the privlens toolkit.
//!
//! Exit codes: 0 on success, 1 on usage/parse errors, 2 on numerical
//! failures. `PRIVLENS_SEED` overrides the config seed for `train`, `synth`,
//! and `attack`; `--threads N` caps data-parallelism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use privlens::attacks::{fresh_adversary_attack, wiener_deconvolve_video, LensDistortion};
use privlens::io;
use privlens::metrics::{average_precision, c_map, EvalReport};
use privlens::optics::psf_stack;
use privlens::sensor::{acquire_video, SensorConfig};
use privlens::synthdata::{make_dataset, N_ATTRIBUTES};
use privlens::trainer::{self, TrainConfig};
use privlens::zernike::{build_basis, compose_mask, PupilGrid, ZernikeCoefficients};
use privlens::{Error, Result};

#[derive(Parser)]
#[command(name = "privlens", version, about = "Privacy-preserving lens co-design toolkit")]
struct Cli {
    /// Cap the worker thread pool.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render per-channel PSFs from lens coefficients.
    Psf {
        #[arg(long)]
        coeffs: PathBuf,
        /// Run config supplying the optics section; defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pass a clip through a lens and sensor.
    Distort {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        coeffs: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run pretraining plus the adversarial schedule end to end.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train fresh adversaries against a frozen lens.
    Attack {
        #[arg(long)]
        lens: PathBuf,
        /// Dataset directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Report file; siblings `<out>.csv` and `<out>.provenance.json` are
        /// written next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score prediction records against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Optional directory for report.json / report.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic labeled dataset.
    Synth {
        /// Training clips; the test split holds n/4 unless overridden.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_test: Option<usize>,
    },
    /// Wiener-deconvolve a clip given the PSF it was formed with.
    Deconv {
        #[arg(long = "in")]
        input: PathBuf,
        /// PSF tensor file or a `psf` output directory.
        #[arg(long)]
        psf: PathBuf,
        #[arg(long)]
        k: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version through this path too
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        privlens::par::configure_threads(n);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Psf { coeffs, config, out } => cmd_psf(&coeffs, config.as_deref(), &out),
        Command::Distort {
            input,
            coeffs,
            config,
            out,
        } => cmd_distort(&input, &coeffs, config.as_deref(), &out),
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Attack {
            lens,
            data,
            out,
            config,
        } => cmd_attack(&lens, &data, &out, config.as_deref()),
        Command::Eval { pred, truth, out } => cmd_eval(&pred, &truth, out.as_deref()),
        Command::Synth { n, seed, out, n_test } => cmd_synth(n, seed, &out, n_test),
        Command::Deconv { input, psf, k, out } => cmd_deconv(&input, &psf, k, &out),
    }
}

fn env_seed_override(seed: u64) -> u64 {
    match std::env::var("PRIVLENS_SEED") {
        Ok(raw) => raw.parse().unwrap_or(seed),
        Err(_) => seed,
    }
}

fn load_config(path: Option<&Path>) -> Result<(TrainConfig, io::DataParams, String)> {
    let text = match path {
        Some(p) => fs::read_to_string(p)?,
        None => io::default_config_text(),
    };
    let (cfg, data) = io::train_config_from_str(&text)?;
    Ok((cfg, data, text))
}

fn lens_psf(
    alpha: &ZernikeCoefficients,
    cfg: &TrainConfig,
) -> Result<privlens::optics::PsfStack> {
    let grid = PupilGrid::new(cfg.optics_n_samples, cfg.optics.aperture_diameter)?;
    let basis = Arc::new(build_basis(&grid, alpha.q())?);
    let mask = compose_mask(&basis, alpha)?;
    psf_stack(&mask, &cfg.optics)
}

fn cmd_psf(coeffs_path: &Path, config_path: Option<&Path>, out: &Path) -> Result<()> {
    let coeff_text = fs::read_to_string(coeffs_path)?;
    let alpha = io::coefficients_from_str(&coeff_text)?;
    let (cfg, _, config_text) = load_config(config_path)?;
    let stack = lens_psf(&alpha, &cfg)?;
    for diag in stack.diagnostics() {
        eprintln!(
            "warning: channel {} kernel crop holds only {:.2e} of the field energy",
            diag.channel, diag.in_crop_fraction
        );
    }
    fs::create_dir_all(out)?;
    io::write_psf_stack(&out.join("psf.pltf"), &stack)?;
    for (ch, name) in ["r", "g", "b"].iter().enumerate() {
        io::write_kernel_png(&out.join(format!("psf_{name}.png")), stack.kernel(ch))?;
    }
    io::Provenance::new("psf", None)
        .with_input("config", config_text.as_bytes())
        .with_input("coefficients", coeff_text.as_bytes())
        .write(&out.join("provenance.json"))?;
    println!("wrote {} and previews", out.join("psf.pltf").display());
    Ok(())
}

fn cmd_distort(
    input: &Path,
    coeffs_path: &Path,
    config_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let coeff_text = fs::read_to_string(coeffs_path)?;
    let alpha = io::coefficients_from_str(&coeff_text)?;
    let (cfg, _, config_text) = load_config(config_path)?;
    let video = io::read_video(input)?;
    let stack = lens_psf(&alpha, &cfg)?;
    let sensor = SensorConfig {
        rng_seed: cfg.seed,
        ..cfg.sensor.clone()
    };
    let private = acquire_video(&video, &stack, &sensor)?;
    io::write_video(out, &private)?;
    io::Provenance::new("distort", Some(sensor.rng_seed))
        .with_input("config", config_text.as_bytes())
        .with_input("coefficients", coeff_text.as_bytes())
        .write(&out.with_extension("provenance.json"))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_train(config_path: &Path, out: &Path) -> Result<()> {
    let config_text = fs::read_to_string(config_path)?;
    let (mut cfg, data) = io::train_config_from_str(&config_text)?;
    cfg.seed = env_seed_override(cfg.seed);
    fs::create_dir_all(out)?;

    println!(
        "training: {} train / {} test clips, q={}, {} epochs, seed {}",
        data.n_train, data.n_test, cfg.q, cfg.epochs, cfg.seed
    );
    let dataset = make_dataset(data.n_train, data.n_test, cfg.seed)?;
    let outcome = trainer::run(&cfg, &dataset)?;

    io::write_text(
        &out.join("telemetry.csv"),
        &io::telemetry_csv(&outcome.state.telemetry),
    )?;
    io::write_coefficients(&out.join("lens.txt"), &outcome.state.alpha)?;
    io::save_classifier(&out.join("classifier"), &outcome.state.classifier)?;
    io::save_adversary(&out.join("adversary"), &outcome.state.adversary)?;
    io::write_eval_report(out, &outcome.report)?;
    io::write_text(&out.join("attack.csv"), &attack_csv(&outcome.attack))?;
    io::Provenance::new("train", Some(cfg.seed))
        .with_input("config", config_text.as_bytes())
        .write(&out.join("provenance.json"))?;

    println!(
        "clean bounds: A_C {:.3}, A_A {:.3}",
        outcome.state.bounds.a_c, outcome.state.bounds.a_a
    );
    println!(
        "final: ssim {:.3}, A_C {:.3}, A_A {:.3}, P {}",
        outcome.report.ssim_mean,
        outcome.report.a_c,
        outcome.report.a_a,
        outcome
            .report
            .p
            .map(|p| format!("{p:.3}"))
            .unwrap_or_else(|| "n/a".into())
    );
    println!("outputs in {}", out.display());
    Ok(())
}

fn attack_csv(report: &privlens::attacks::AttackReport) -> String {
    let mut out = String::from("adversary,cmap,converged\n");
    for (i, (cmap, conv)) in report
        .per_adversary_cmap
        .iter()
        .zip(&report.converged)
        .enumerate()
    {
        out.push_str(&format!("{i},{cmap:.6},{conv}\n"));
    }
    out.push_str(&format!("best,{:.6},\n", report.best_cmap));
    out
}

fn attack_text(report: &privlens::attacks::AttackReport) -> String {
    let mut out = String::new();
    out.push_str("fresh-adversary attack\n");
    for (i, (cmap, conv)) in report
        .per_adversary_cmap
        .iter()
        .zip(&report.converged)
        .enumerate()
    {
        out.push_str(&format!(
            "adversary {i}: C-MAP {cmap:.4}{}\n",
            if *conv { "" } else { " (not converged)" }
        ));
    }
    out.push_str(&format!("best C-MAP (A_A): {:.4}\n", report.best_cmap));
    out.push_str(&format!(
        "chance level (mean prevalence): {:.4}\n",
        report.chance_level()
    ));
    out.push_str("per-attribute AP of best adversary vs null hypothesis:\n");
    for (m, (ap, null)) in report
        .best_per_attribute
        .iter()
        .zip(&report.prevalence_ap)
        .enumerate()
    {
        out.push_str(&format!("  attr {m}: {ap:.4} (null {null:.4})\n"));
    }
    out
}

fn cmd_attack(lens: &Path, data: &Path, out: &Path, config_path: Option<&Path>) -> Result<()> {
    let coeff_text = fs::read_to_string(lens)?;
    let alpha = io::coefficients_from_str(&coeff_text)?;
    let (mut cfg, _, config_text) = load_config(config_path)?;
    cfg.seed = env_seed_override(cfg.seed);
    let dataset = io::load_dataset(data)?;
    let stack = lens_psf(&alpha, &cfg)?;
    let distortion = LensDistortion {
        psf: stack,
        sensor: cfg.sensor.clone(),
        seed: cfg.seed,
    };
    let report = fresh_adversary_attack(
        &distortion,
        &dataset,
        cfg.attack_adversaries,
        cfg.seed,
        &cfg,
    )?;
    io::write_text(out, &attack_text(&report))?;
    io::write_text(&out.with_extension("csv"), &attack_csv(&report))?;
    io::Provenance::new("attack", Some(cfg.seed))
        .with_input("config", config_text.as_bytes())
        .with_input("lens", coeff_text.as_bytes())
        .write(&out.with_extension("provenance.json"))?;
    println!("best adversary C-MAP: {:.4}", report.best_cmap);
    println!("wrote {}", out.display());
    Ok(())
}

/// Ground-truth record, one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
struct TruthRecord {
    id: u64,
    action: usize,
    attributes: Vec<bool>,
}

/// Prediction record, one JSON object per line.
#[derive(Debug, Serialize, Deserialize)]
struct PredRecord {
    id: u64,
    action: usize,
    attribute_scores: Vec<f64>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(idx, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: format!("{e}"),
            })
        })
        .collect()
}

fn cmd_eval(pred: &Path, truth: &Path, out: Option<&Path>) -> Result<()> {
    let preds: Vec<PredRecord> = read_jsonl(pred)?;
    let truths: Vec<TruthRecord> = read_jsonl(truth)?;
    if preds.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} truth records",
            preds.len(),
            truths.len()
        )));
    }
    let mut by_id: std::collections::BTreeMap<u64, &TruthRecord> =
        std::collections::BTreeMap::new();
    for t in &truths {
        if t.attributes.len() != N_ATTRIBUTES {
            return Err(Error::invalid(format!(
                "truth record {} needs {N_ATTRIBUTES} attributes",
                t.id
            )));
        }
        by_id.insert(t.id, t);
    }
    let mut hits = 0usize;
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); N_ATTRIBUTES];
    let mut labels: Vec<Vec<bool>> = vec![Vec::new(); N_ATTRIBUTES];
    for p in &preds {
        let t = by_id
            .get(&p.id)
            .ok_or_else(|| Error::invalid(format!("prediction id {} has no truth", p.id)))?;
        if p.attribute_scores.len() != N_ATTRIBUTES {
            return Err(Error::invalid(format!(
                "prediction {} needs {N_ATTRIBUTES} attribute scores",
                p.id
            )));
        }
        if p.action == t.action {
            hits += 1;
        }
        for m in 0..N_ATTRIBUTES {
            scores[m].push(p.attribute_scores[m]);
            labels[m].push(t.attributes[m]);
        }
    }
    let a_c = hits as f64 / preds.len() as f64;
    let per_attr: Vec<Option<f64>> = (0..N_ATTRIBUTES)
        .map(|m| average_precision(&scores[m], &labels[m]))
        .collect();
    for (m, ap) in per_attr.iter().enumerate() {
        if ap.is_none() {
            eprintln!("warning: attribute {m} has no positive labels; excluded from C-MAP");
        }
    }
    let a_a = c_map(&per_attr).ok_or_else(|| Error::numerical("C-MAP undefined"))?;
    let report = EvalReport::new(
        a_c,
        a_a,
        f64::NAN,
        per_attr.iter().map(|ap| ap.unwrap_or(f64::NAN)).collect(),
    );
    print!("{}", report.to_kv_text());
    if let Some(dir) = out {
        io::write_eval_report(dir, &report)?;
    }
    Ok(())
}

fn cmd_synth(n: usize, seed: u64, out: &Path, n_test: Option<usize>) -> Result<()> {
    let seed = env_seed_override(seed);
    let n_test = n_test.unwrap_or_else(|| (n / 4).max(1));
    let dataset = make_dataset(n, n_test, seed)?;
    io::save_dataset(out, &dataset)?;
    io::Provenance::new("synth", Some(seed)).write(&out.join("provenance.json"))?;
    println!(
        "wrote {} train + {} test clips to {}",
        n,
        n_test,
        out.display()
    );
    Ok(())
}

fn cmd_deconv(input: &Path, psf_path: &Path, k: f64, out: &Path) -> Result<()> {
    let video = io::read_video(input)?;
    let psf_file = if psf_path.is_dir() {
        psf_path.join("psf.pltf")
    } else {
        psf_path.to_path_buf()
    };
    let psf = io::read_psf_stack(&psf_file)?;
    let recovered = wiener_deconvolve_video(&video, &psf, k)?;
    io::write_video(out, &recovered)?;
    println!("wrote {}", out.display());
    Ok(())
}
