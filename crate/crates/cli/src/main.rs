//! `foliage`: generate data, embed signals, fit reduced order models and
//! extract frequency and damping curves.

mod settings;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};

use foliage::autoencoder::{fit_autoencoder, AutoencoderConfig, AutoencoderModel};
use foliage::check::check_model;
use foliage::data::{load_csv, load_trajectories, write_trajectories};
use foliage::embed::{detect_frequencies, embed_dft, embed_pca, EmbeddingData, EmbeddingOperator, WindowedSignal};
use foliage::foliation::{error_stats, fit_foliation, FoliationConfig, FoliationModel, NonlinearArgument, Select};
use foliage::localfoliation::{decoder_for_data, fit_local, reconstruct_decoder, LocalConfig};
use foliage::model::{config_hash, ModelFile};
use foliage::pipeline::{analyse, quantile, RomAnalysis};
use foliage::polynomial::PolyMap;
use foliage::riemopt::BfgsOptions;
use foliage::romanalysis::NormalFormStyle;
use foliage::{synth, AmplitudeMap, TrajectoryDataset};

use settings::*;

#[derive(Parser)]
#[command(name = "foliage", version, about = "Reduced order models from invariant foliations")]
struct Cli {
    /// Worker threads; fix it for bit-identical results.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with `[generate]`, `[embed]`, `[fit]`, `[manifold]` and
    /// `[freqdamp]` tables; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum System {
    Caricature,
    Tendim,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedMethod {
    Pca,
    Dft,
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum FitKind {
    Foliation,
    Koopman,
    Autoencoder,
}

#[derive(Subcommand)]
enum Command {
    /// Write trajectories of a synthetic system.
    Generate {
        #[arg(value_enum)]
        system: System,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        flags: GenerateFlags,
    },
    /// Embed scalar signals into a state space; writes the operator next to the output.
    Embed {
        #[arg(value_enum)]
        method: EmbedMethod,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        flags: EmbedFlags,
    },
    /// Fit a reduced order model; writes the model, its trace and an error histogram.
    Fit {
        #[arg(value_enum)]
        kind: FitKind,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        flags: FitFlags,
    },
    /// Fit the local foliation of a foliation model and reconstruct its invariant manifold.
    Manifold {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        flags: ManifoldFlags,
    },
    /// Corrected frequency and damping curves of a two dimensional model.
    Freqdamp {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Embedding operator whose reconstruction defines the amplitude; the
        /// mean of the state coordinates is used otherwise.
        #[arg(long)]
        operator: Option<PathBuf>,
        /// Also write a gnuplot script plotting the curves.
        #[arg(long)]
        plot: Option<PathBuf>,
        #[command(flatten)]
        flags: FreqdampFlags,
    },
    /// Check the invariants of a model file.
    Check {
        #[arg(long)]
        model: PathBuf,
        /// Data to evaluate the fitting error on.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "trajectories")]
        layout: Layout,
        /// Largest acceptable mean fitting error on the data.
        #[arg(long, default_value_t = f64::INFINITY)]
        max_error: f64,
    },
}

/// Resolved configuration of a run and its hash.
struct Run {
    config: Value,
    hash: String,
}

impl Run {
    fn new(config: Value) -> Self {
        let hash = config_hash(&config.to_string());
        Run { config, hash }
    }

    fn header(&self) -> String {
        format!("# config_hash={}\n", self.hash)
    }

    /// Prepends the hash comment to a file written by the library.
    fn stamp(&self, path: &Path) -> Result<()> {
        let body = std::fs::read_to_string(path)?;
        std::fs::write(path, self.header() + &body)?;
        Ok(())
    }
}

fn file_digest(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(config_hash(&text))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn load_data(path: &Path, layout: Layout) -> Result<TrajectoryDataset> {
    load_csv(path, layout.into()).with_context(|| format!("loading data {}", path.display()))
}

fn load_model(path: &Path) -> Result<ModelFile> {
    ModelFile::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn generate(cli: &Cli, system: System, output: &Path, flags: &GenerateFlags) -> Result<()> {
    let mut s: GenerateSettings = resolve(config_section(cli.config.as_deref(), "generate")?, flags)?;
    let (n_def, len_def) = match system {
        System::Caricature => (500, 30),
        System::Tendim => (300, 16),
    };
    s.trajectories.get_or_insert(n_def);
    s.length.get_or_insert(len_def);
    if let System::Tendim = system {
        s.dt.get_or_insert(0.1);
        s.radius.get_or_insert_with(|| vec![0.8]);
    }
    let (n, len) = (s.trajectories.unwrap_or(n_def), s.length.unwrap_or(len_def));
    let mut trajs = match system {
        System::Caricature => {
            if s.scalar {
                bail!("the caricature model has no scalar output");
            }
            synth::caricature_trajectories(n, len, s.seed)?
        }
        System::Tendim => {
            let out = if s.scalar { synth::TendimOutput::Scalar } else { synth::TendimOutput::State };
            synth::tendim_dataset(out, s.radius.as_deref().unwrap_or(&[0.8]), n, len, s.dt.unwrap_or(0.1), s.seed)?
        }
    };
    if s.noise > 0.0 {
        let normal = Normal::new(0.0, s.noise)?;
        for (i, t) in trajs.iter_mut().enumerate() {
            // Separate stream from the one that drew the initial conditions.
            let mut rng = synth::stream_rng(s.seed ^ 0x6e6f_6973_65, i);
            t.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
    }
    let name = match system {
        System::Caricature => "caricature",
        System::Tendim => "tendim",
    };
    let run = Run::new(json!({ "command": "generate", "system": name, "settings": s }));
    write_trajectories(output, &trajs)?;
    run.stamp(output)?;
    eprintln!("wrote {} trajectories to {}", trajs.len(), output.display());
    Ok(())
}

fn embed(cli: &Cli, method: EmbedMethod, input: &Path, output: &Path, flags: &EmbedFlags) -> Result<()> {
    let s: EmbedSettings = resolve(config_section(cli.config.as_deref(), "embed")?, flags)?;
    let fs = s.fs.context("the sampling frequency --fs is required")?;
    let trajs = load_trajectories(input)?;
    if trajs.iter().any(|t| t.nrows() != 1) {
        bail!("embedding needs a scalar signal (one column per row)");
    }
    let segments: Vec<Vec<f64>> = trajs.iter().map(|t| t.iter().cloned().collect()).collect();
    let freqs = if s.freqs.is_empty() { detect_frequencies(&segments, fs, s.modes)? } else { s.freqs.clone() };
    let sig = match (s.window, s.f1) {
        (Some(w), _) => WindowedSignal::with_window(segments, fs, w, s.hop)?,
        (None, Some(f1)) => WindowedSignal::new(segments, fs, f1, s.hop)?,
        (None, None) => {
            let f1 = freqs.iter().cloned().fold(f64::INFINITY, f64::min);
            WindowedSignal::new(segments, fs, f1, s.hop)?
        }
    };
    let (op, _) = match method {
        EmbedMethod::Pca => embed_pca(&sig, s.dim, s.reference)?,
        EmbedMethod::Dft => embed_dft(&sig, &freqs, s.reference)?,
    };
    let name = match method {
        EmbedMethod::Pca => "pca",
        EmbedMethod::Dft => "dft",
    };
    let run = Run::new(json!({
        "command": "embed",
        "method": name,
        "settings": s,
        "frequencies": freqs,
        "window": sig.window_len,
        "input": file_digest(input)?,
    }));
    write_trajectories(output, &op.apply(&sig)?)?;
    run.stamp(output)?;
    let sidecar = sibling(output, "operator.json");
    let doc = json!({ "config_hash": run.hash, "operator": op.to_data() });
    std::fs::write(&sidecar, serde_json::to_string_pretty(&doc)? + "\n")?;
    eprintln!("embedded into {} dimensions with a window of {} samples", op.dim(), sig.window_len);
    Ok(())
}

fn select(s: &FitSettings) -> Select {
    match s.select_freq {
        Some(f) => Select::Frequency(f),
        None => Select::Indices(s.select_index.clone()),
    }
}

fn write_histogram(path: &Path, run: &Run, erel: &[f64], bins: usize) -> Result<()> {
    let bins = bins.max(1);
    let top = erel.iter().cloned().filter(|v| v.is_finite()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut counts = vec![0usize; bins];
    for &e in erel.iter().filter(|v| v.is_finite()) {
        counts[((e / top * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let width = top / bins as f64;
    let total = erel.len().max(1) as f64;
    let mut out = run.header();
    out.push_str("lower,upper,count,density\n");
    for (i, c) in counts.iter().enumerate() {
        let lo = width * i as f64;
        writeln!(out, "{:?},{:?},{},{:?}", lo, lo + width, c, *c as f64 / total / width)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn fit(cli: &Cli, kind: FitKind, input: &Path, output: &Path, flags: &FitFlags) -> Result<()> {
    let mut s: FitSettings = resolve(config_section(cli.config.as_deref(), "fit")?, flags)?;
    let (enc_def, map_def) = if kind == FitKind::Autoencoder { (5, 5) } else { (5, 7) };
    s.order_encoder.get_or_insert(enc_def);
    s.order_map.get_or_insert(map_def);
    let ds = load_data(input, s.layout)?;
    let kind_name = match kind {
        FitKind::Foliation => "foliation",
        FitKind::Koopman => "koopman",
        FitKind::Autoencoder => "autoencoder",
    };
    let run = Run::new(json!({ "command": "fit", "kind": kind_name, "settings": s, "input": file_digest(input)? }));
    let mut file = ModelFile::new(run.config.clone());
    let trace = sibling(output, "trace.csv");
    let erel = match kind {
        FitKind::Foliation | FitKind::Koopman => {
            let mut cfg = FoliationConfig {
                select: select(&s),
                encoder_order: s.order_encoder.unwrap_or(enc_def),
                map_order: s.order_map.unwrap_or(map_def),
                rank: s.ht_rank,
                koopman: kind == FitKind::Koopman,
                argument: match s.argument {
                    Argument::FullDifference => NonlinearArgument::FullDifference,
                    Argument::Complement => NonlinearArgument::Complement,
                },
                linear_radius: s.linear_radius,
                seed: s.seed,
                ..Default::default()
            };
            cfg.gs.max_sweeps = s.sweeps;
            let (model, report) = fit_foliation(&ds, &cfg)?;
            report.write_csv(&trace)?;
            let (_, erel) = model.residual(&ds);
            eprintln!("{} sweeps, converged: {}", report.sweeps, report.converged);
            file.foliation = Some(model.to_data());
            erel
        }
        FitKind::Autoencoder => {
            let cfg = AutoencoderConfig {
                select: select(&s),
                decoder_order: s.order_encoder.unwrap_or(enc_def),
                map_order: s.order_map.unwrap_or(map_def),
                goae: None,
                bfgs: BfgsOptions { max_iter: s.iterations, ..Default::default() },
            };
            let (model, report) = fit_autoencoder(&ds, &cfg)?;
            let mut out = String::from("stage,iterations,f,grad_norm,converged\n");
            for (name, st) in [("reconstruction", &report.reconstruction), ("dynamics", &report.dynamics)] {
                writeln!(out, "{name},{},{:?},{:?},{}", st.iterations, st.f_final, st.grad_norm, st.converged)?;
            }
            std::fs::write(&trace, out)?;
            let erel = model.prediction_errors(&ds);
            file.autoencoder = Some(model.to_data());
            erel
        }
    };
    run.stamp(&trace)?;
    write_histogram(&sibling(output, "erel.csv"), &run, &erel, s.bins)?;
    file.save(output)?;
    let (mean, max) = error_stats(&erel);
    eprintln!("fitting error: mean {mean:.3e}, max {max:.3e}");
    Ok(())
}

fn manifold(cli: &Cli, input: &Path, model: &Path, output: &Path, flags: &ManifoldFlags) -> Result<()> {
    let s: ManifoldSettings = resolve(config_section(cli.config.as_deref(), "manifold")?, flags)?;
    let src = load_model(model)?;
    let fol = FoliationModel::from_data(src.foliation.as_ref().context("the model has no foliation section")?)?;
    let ds = load_data(input, s.layout)?;
    let run = Run::new(json!({
        "command": "manifold",
        "settings": s,
        "input": file_digest(input)?,
        "model": src.config_hash,
    }));
    let mut cfg = LocalConfig { kappa: s.kappa, order: s.order, rounds: s.rounds, ..Default::default() };
    cfg.gs.max_sweeps = s.sweeps;
    let (lf, reports) = fit_local(&ds, &fol, &cfg)?;
    let dec = match s.radius {
        Some(r) => reconstruct_decoder(&fol, &lf, r)?,
        None => decoder_for_data(&fol, &lf, &ds, s.quantile)?,
    };
    let mut out = run.header();
    out.push_str("round,sweep,block,f,grad_norm,radius\n");
    for (i, rep) in reports.iter().enumerate() {
        for r in &rep.trace {
            writeln!(out, "{i},{},{},{:?},{:?},{:?}", r.sweep, r.block, r.f, r.grad_norm, r.radius)?;
        }
    }
    std::fs::write(sibling(output, "trace.csv"), out)?;
    let mut file = ModelFile::new(run.config.clone());
    file.foliation = src.foliation.clone();
    file.local_foliation = Some(lf.to_data(Some(&dec)));
    file.save(output)?;
    eprintln!("decoder radius {:.4}, polynomial fit error {:.3e}", dec.radius, dec.fit_error);
    Ok(())
}

fn curve_csv(run: &Run, an: &RomAnalysis) -> Result<String> {
    let mut out = run.header();
    let lo = quantile(&an.data_amplitudes, 0.1);
    let hi = quantile(&an.data_amplitudes, 0.9);
    writeln!(out, "# central 80% of the data between amplitudes {lo:?} and {hi:?}")?;
    out.push_str("# r,A,omega,zeta,omega_naive,zeta_naive,gamma,kappa\n");
    let c = &an.curve;
    for i in 0..c.amplitude.len() {
        writeln!(
            out,
            "{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            c.t[i], c.amplitude[i], c.omega[i], c.zeta[i], an.naive.omega[i], an.naive.zeta[i], c.gamma[i], c.kappa[i]
        )?;
    }
    Ok(out)
}

fn plot_script(run: &Run, data: &Path) -> String {
    let d = data.display();
    format!(
        "{}set datafile separator ','\nset multiplot layout 1,2\nset ylabel 'amplitude'\n\
         set xlabel 'frequency'\nplot '{d}' using 3:2 with lines title 'corrected', '' using 5:1 with lines dashtype 2 title 'naive'\n\
         set xlabel 'damping ratio'\nplot '{d}' using 4:2 with lines title 'corrected', '' using 6:1 with lines dashtype 2 title 'naive'\n\
         unset multiplot\n",
        run.header()
    )
}

fn freqdamp(cli: &Cli, input: &Path, model: &Path, output: &Path, operator: Option<&Path>, plot: Option<&Path>, flags: &FreqdampFlags) -> Result<()> {
    let s: FreqdampSettings = resolve(config_section(cli.config.as_deref(), "freqdamp")?, flags)?;
    let file = load_model(model)?;
    let ds = load_data(input, s.layout)?;
    let op = match operator {
        Some(p) => {
            let doc: Value = serde_json::from_str(&std::fs::read_to_string(p)?)?;
            let data: EmbeddingData = serde_json::from_value(doc["operator"].clone()).context("reading the embedding operator")?;
            Some(EmbeddingOperator::from_data(&data)?)
        }
        None => None,
    };
    let w_star = match &op {
        Some(op) => op.amplitude_map(),
        None => AmplitudeMap { w_star: DVector::from_element(ds.dim(), 1.0 / ds.dim() as f64) },
    };
    let dt = s.dt.or(op.as_ref().map(|o| o.hop as f64 / o.f_s));
    let run = Run::new(json!({
        "command": "freqdamp",
        "settings": s,
        "dt": dt,
        "input": file_digest(input)?,
        "model": file.config_hash,
        "operator": operator.map(file_digest).transpose()?,
    }));
    let an = if let (Some(f), Some(l)) = (&file.foliation, &file.local_foliation) {
        let fol = FoliationModel::from_data(f)?;
        let w = PolyMap::from_data(l.decoder.as_ref().context("the local foliation has no decoder")?)?;
        let z: DMatrix<f64> = fol.encode_batch(&ds.xs);
        analyse(&fol.s, NormalFormStyle::Encoder, &w, &z, l.decoder_radius, &w_star, dt, s.amplitudes)?
    } else if let Some(a) = &file.autoencoder {
        let m = AutoencoderModel::from_data(a)?;
        analyse(&m.s, NormalFormStyle::Decoder, &m.decoder(), &m.encode_batch(&ds.xs), None, &w_star, dt, s.amplitudes)?
    } else {
        bail!("the model needs a foliation with a reconstructed manifold (run `manifold`) or an autoencoder");
    };
    std::fs::write(output, curve_csv(&run, &an)?)?;
    if let Some(p) = plot {
        std::fs::write(p, plot_script(&run, output))?;
    }
    eprintln!(
        "central 80% of the data between amplitudes {:.4e} and {:.4e}",
        quantile(&an.data_amplitudes, 0.1),
        quantile(&an.data_amplitudes, 0.9)
    );
    Ok(())
}

fn check(model: &Path, input: Option<&Path>, layout: Layout, max_error: f64) -> Result<bool> {
    let file = load_model(model)?;
    let ds = input.map(|p| load_data(p, layout)).transpose()?;
    let results = check_model(&file, ds.as_ref(), max_error)?;
    let mut stdout = std::io::stdout().lock();
    for r in &results {
        writeln!(stdout, "{} {}: {:.3e} (tolerance {:.1e})", if r.passed() { "ok    " } else { "FAILED" }, r.name, r.value, r.tolerance)?;
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        return Ok(true);
    }
    eprintln!("invariant violated: {}", failed.join(", "));
    Ok(false)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Generate { system, output, flags } => generate(cli, *system, output, flags)?,
        Command::Embed { method, input, output, flags } => embed(cli, *method, input, output, flags)?,
        Command::Fit { kind, input, output, flags } => fit(cli, *kind, input, output, flags)?,
        Command::Manifold { input, model, output, flags } => manifold(cli, input, model, output, flags)?,
        Command::Freqdamp { input, model, output, operator, plot, flags } => {
            freqdamp(cli, input, model, output, operator.as_deref(), plot.as_deref(), flags)?
        }
        Command::Check { model, input, layout, max_error } => return check(model, input.as_deref(), *layout, *max_error),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
