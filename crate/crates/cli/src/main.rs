use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use xfwi::experiments::{read_config_file, run_experiment, ExperimentContext, ExperimentName};
use xfwi::io::{load_geometry, load_model, save_gather, save_grid};
use xfwi::propagator::{ricker, SourceTerm};
use xfwi::selftest::{self, SelftestOptions, Suite};
use xfwi::{Error, ErrorClass, Propagator, WavefieldStore};

#[derive(Debug, Parser)]
#[command(name = "xfwi", version, about = "Time-domain FWI, WRI and ESI toolkit")]
struct Cli {
    /// Wavefield storage: `mem` or `disk:<dir>`.
    #[arg(long, global = true, default_value = "mem")]
    store: String,

    /// Worker threads for per-shot parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WaveletKind {
    Ricker,
    Zero,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Model shot gathers for a velocity file and geometry.
    Forward {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        geometry: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "ricker")]
        wavelet: WaveletKind,
        /// Write every k-th wavefield frame of each shot (0 disables).
        #[arg(long, default_value_t = 0)]
        snapshot_every: usize,
    },
    /// Run a packaged experiment and write its CSV and grid outputs.
    Experiment {
        name: String,
        /// TOML config overriding the shipped default.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the built-in verification suites.
    Selftest {
        /// Suites to run (comma separated); all when omitted.
        #[arg(long, value_delimiter = ',')]
        suite: Option<Vec<String>>,
        #[arg(long, hide = true)]
        inject_adjoint_fault: bool,
    },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 1,
        ErrorClass::Numerical => 2,
        ErrorClass::Budget => 3,
    }
}

fn open_store(spec: &str) -> Result<WavefieldStore, Error> {
    match spec {
        "mem" => Ok(WavefieldStore::in_memory()),
        s => match s.strip_prefix("disk:") {
            Some(dir) if !dir.is_empty() => WavefieldStore::disk(dir),
            _ => Err(Error::Config(format!("--store must be `mem` or `disk:<dir>`, got '{s}'"))),
        },
    }
}

fn forward(
    model: &Path,
    geometry: &Path,
    out: &Path,
    wavelet: WaveletKind,
    snapshot_every: usize,
    store: &WavefieldStore,
) -> Result<(), Error> {
    use rayon::prelude::*;
    let model = load_model(model)?;
    let geom = load_geometry(geometry)?;
    geom.validate(&model)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io { path: out.to_path_buf(), source: e })?;
    let w = match wavelet {
        WaveletKind::Ricker => ricker(geom.f_peak, geom.nt, geom.dt)?,
        WaveletKind::Zero => vec![0.0; geom.nt],
    };
    let prop = Propagator::for_geometry(&model, &geom)?;
    let receivers = geom.receiver_nodes(model.dims())?;
    let dims = *model.dims();
    (0..geom.sources.len()).into_par_iter().try_for_each(|shot| {
        let src = SourceTerm::Point { position: geom.sources[shot], wavelet: w.clone() };
        let mut gather = if snapshot_every > 0 {
            store.admit(xfwi::Wavefield::bytes_for(geom.nt, &dims))?;
            let u = prop.forward(&src)?;
            for n in (0..geom.nt).step_by(snapshot_every) {
                save_grid(&out.join(format!("snapshot_shot{shot:03}_step{n:06}")), &dims, "wavefield", u.frame(n))?;
            }
            xfwi::propagator::sample_r(&u, &geom, &dims)?
        } else {
            prop.forward_to_receivers(&src, &receivers)?
        };
        gather.shot_index = shot;
        log::info!("shot {shot}: gather norm {:.6e}", gather.norm());
        save_gather(&out.join(format!("shot_{shot:03}")), &gather, &geom)
    })
}

fn run(cli: Cli) -> Result<bool, Error> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("could not size the thread pool: {e}")))?;
    }
    let store = open_store(&cli.store)?;
    match cli.command {
        Command::Forward { model, geometry, out, wavelet, snapshot_every } => {
            forward(&model, &geometry, &out, wavelet, snapshot_every, &store)?;
            Ok(true)
        }
        Command::Experiment { name, config, out } => {
            let name: ExperimentName = name.parse()?;
            let text = config.as_deref().map(read_config_file).transpose()?;
            let ctx = ExperimentContext::new(out, store, cli.seed)?;
            let report = run_experiment(name, text.as_deref(), &ctx)?;
            for (k, v) in &report.metrics {
                println!("{name}: {k} = {v:.6e}");
            }
            println!("{name}: wrote {} files to {}", report.files.len(), ctx.out_dir.display());
            Ok(true)
        }
        Command::Selftest { suite, inject_adjoint_fault } => {
            let suites = match suite {
                None => Suite::ALL.to_vec(),
                Some(names) => names.iter().map(|s| s.trim().parse()).collect::<Result<Vec<Suite>, Error>>()?,
            };
            let opts = SelftestOptions { seed: cli.seed, inject_adjoint_fault };
            let checks = selftest::run(&suites, &opts)?;
            let mut all = true;
            for c in &checks {
                let verdict = if c.passed() { "PASS" } else { "FAIL" };
                println!("{verdict} [{}] {}: {:.3e} (limit {:.1e})", c.suite.as_str(), c.name, c.value, c.limit);
                all &= c.passed();
            }
            println!("{} of {} checks passed", checks.iter().filter(|c| c.passed()).count(), checks.len());
            Ok(all)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stdout)
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
