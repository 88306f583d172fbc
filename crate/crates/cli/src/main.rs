use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use scoreaug::checkpoint::Checkpoint;
use scoreaug::config::RunConfig;
use scoreaug::dataset::Generator;
use scoreaug::sampler::{heun_sample, write_samples, SamplerConfig};
use scoreaug::schedule::DiffusionSchedule;
use scoreaug::train::{quantile, train_run, LossVariant, RunDir, RunMetrics};
use scoreaug::transforms::AugmentationParams;
use scoreaug::verify::{run_suite, to_csv};
use scoreaug::Error;

use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "scoreaug", version, about = "Score augmentation for diffusion models at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the score-transformation and oracle checks and print a CSV report.
    Verify {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Only run cases whose id contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Also write the CSV to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a denoiser and write a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        /// Reuse a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Draw samples from a trained run.
    Sample {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint to load instead of the run's latest one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Condition such as `rotation:2`; repeat for several. Default is the zero condition.
        #[arg(long)]
        condition: Vec<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// Defaults to `<run>/samples`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Tabulate final metrics over run directories as tab-separated values.
    Report {
        /// Run directories, or directories to search for runs.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic dataset in the text dataset format.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        generator: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => RunConfig::parse("", Path::new(".")),
    }
}

fn cmd_verify(config: Option<&Path>, filter: Option<&str>, out: Option<&Path>) -> Result<ExitCode, Error> {
    let cfg = load_config(config)?;
    let results = run_suite(&cfg.verify, filter);
    if results.is_empty() {
        return Err(Error::InvalidParam(format!("no verification case matches `{}`", filter.unwrap_or(""))));
    }
    let csv = to_csv(&results);
    print!("{csv}");
    if let Some(p) = out {
        fs::write(p, &csv)?;
    }
    for r in results.iter().filter(|r| !r.passed) {
        match &r.error {
            Some(e) => eprintln!("{}: precondition failed: {e}", r.id),
            None => eprintln!("{}: error {:e} above threshold {:e}", r.id, r.rel_err, r.threshold),
        }
    }
    Ok(if results.iter().all(|r| r.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_train(config: Option<&Path>, seed: Option<u64>, out_dir: Option<PathBuf>, variant: Option<&str>, steps: Option<usize>, force: bool) -> Result<ExitCode, Error> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    if let Some(v) = variant {
        cfg.train.variant = LossVariant::parse(v)?;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    if let Some(d) = out_dir {
        cfg.output_dir = d;
    }
    cfg.train.validate()?;
    let (train, heldout) = cfg.dataset.load()?;
    let dir = RunDir::create(&cfg.output_dir, force)?;
    dir.write_config(&cfg.to_ini())?;
    let outcome = train_run(&cfg.train, &train, heldout.as_ref(), Some(&dir))?;
    if let Some(r) = outcome.metrics.last() {
        eprintln!(
            "{}: step {} train_loss {:.5} heldout_loss {:.5} floor {:.5} nn_median {:.4}",
            dir.root.display(),
            r.step,
            r.train_loss,
            r.heldout_loss,
            r.oracle_loss_floor,
            r.sample_nn_median
        );
    }
    Ok(ExitCode::SUCCESS)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(run: &Path, checkpoint: Option<&Path>, conditions: &[String], count: Option<usize>, seed: Option<u64>, steps: Option<usize>, out_dir: Option<PathBuf>) -> Result<ExitCode, Error> {
    let dir = RunDir::open(run);
    let mut cfg = RunConfig::load(&dir.root.join(RunDir::CONFIG))?;
    let ckpt_path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => dir.latest_checkpoint()?,
    };
    let ckpt = Checkpoint::load(&ckpt_path)?;
    let net = ckpt.ema_net()?;
    if let Some(s) = seed {
        cfg.sample_seed = s;
    }
    if let Some(n) = steps {
        cfg.sampler.n_steps = n;
    }
    let count = count.unwrap_or(cfg.sample_count);
    let schedule = DiffusionSchedule { sigma_data: ckpt.sigma_data, ..cfg.train.schedule.clone() };
    let out = out_dir.unwrap_or_else(|| dir.root.join("samples"));
    let aug = &cfg.train.augmentation;

    let mut runs: Vec<(String, Option<AugmentationParams>)> = Vec::new();
    if conditions.is_empty() {
        let label = cfg.sampler.condition.map_or("unconditional".to_string(), |c| c.to_string().replace(':', "_"));
        runs.push((label, cfg.sampler.condition));
    }
    for c in conditions {
        let params = AugmentationParams::parse(c)?;
        runs.push((c.replace(':', "_"), Some(params)));
    }
    for (label, condition) in runs {
        let sampler = SamplerConfig { condition, ..cfg.sampler.clone() };
        let cond = sampler.condition_vector(aug, ckpt.config.cond_dim)?;
        // every condition starts from the same initial noise
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.sample_seed);
        let samples = heun_sample(&net, &sampler, &schedule, &cond, &mut rng, count)?;
        let file = write_samples(&out, &label, &samples, aug.shape)?;
        eprintln!("wrote {} samples to {}", samples.len(), file.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn find_runs(root: &Path, out: &mut Vec<PathBuf>) -> Result<(), Error> {
    if root.join(RunDir::REPORT).is_file() {
        out.push(root.to_path_buf());
        return Ok(());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    children.sort();
    for c in children {
        find_runs(&c, out)?;
    }
    Ok(())
}

fn read_report(path: &Path) -> Result<BTreeMap<String, String>, Error> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.trim().to_string(), v.trim().to_string())).collect())
}

const REPORT_COLUMNS: &str = "variant\ttrain_size\twidth\truns\ttrain_loss\theldout_loss\tgap\toracle_loss_floor\tsample_nn_median";

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    quantile(&xs, 0.5)
}

fn cmd_report(roots: &[PathBuf], out: Option<&Path>) -> Result<ExitCode, Error> {
    let mut runs = Vec::new();
    for r in roots {
        find_runs(r, &mut runs)?;
    }
    if runs.is_empty() {
        return Err(Error::InvalidParam("no run directories found".into()));
    }
    // (variant, N, width) -> final metrics rows of each run
    let mut groups: BTreeMap<(String, usize, usize), Vec<[f64; 5]>> = BTreeMap::new();
    for run in &runs {
        let rep = read_report(&run.join(RunDir::REPORT))?;
        let field = |k: &str| rep.get(k).cloned().ok_or_else(|| Error::InvalidParam(format!("{}: report lacks `{k}`", run.display())));
        let num = |k: &str| -> Result<usize, Error> { field(k)?.parse().map_err(|_| Error::InvalidParam(format!("{}: bad `{k}`", run.display()))) };
        let metrics = RunMetrics::parse_csv(&fs::read_to_string(run.join(RunDir::METRICS))?)?;
        let Some(last) = metrics.last() else { continue };
        groups.entry((field("variant")?, num("train_size")?, num("width")?)).or_default().push([
            last.train_loss,
            last.heldout_loss,
            last.gap,
            last.oracle_loss_floor,
            last.sample_nn_median,
        ]);
    }
    let mut tsv = String::from(REPORT_COLUMNS);
    tsv.push('\n');
    for ((variant, n, width), rows) in &groups {
        tsv.push_str(&format!("{variant}\t{n}\t{width}\t{}", rows.len()));
        for k in 0..5 {
            tsv.push_str(&format!("\t{}", median(rows.iter().map(|r| r[k]).collect())));
        }
        tsv.push('\n');
    }
    print!("{tsv}");
    if let Some(p) = out {
        fs::write(p, &tsv)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_data(config: Option<&Path>, generator: Option<&str>, n: Option<usize>, seed: Option<u64>, size: usize, dim: usize, out: &Path) -> Result<ExitCode, Error> {
    let ds = match (config, generator) {
        (Some(_), Some(_)) => return Err(Error::InvalidParam("give either --config or --generator".into())),
        (Some(c), None) => {
            let mut cfg = RunConfig::load(c)?;
            if let scoreaug::config::DataSource::Generator { n: cn, seed: cs, .. } = &mut cfg.dataset.source {
                *cn = n.unwrap_or(*cn);
                *cs = seed.unwrap_or(*cs);
            }
            cfg.dataset.n_heldout = 0;
            cfg.dataset.load()?.0
        }
        (None, g) => Generator::parse(g.unwrap_or("gmm2d"), size, dim)?.generate(n.unwrap_or(8), seed.unwrap_or(0))?,
    };
    ds.save(out)?;
    eprintln!("wrote {} points of dimension {} to {}", ds.len(), ds.dim(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Verify { config, filter, out } => cmd_verify(config.as_deref(), filter.as_deref(), out.as_deref()),
        Command::Train { config, seed, out_dir, variant, steps, force } => cmd_train(config.as_deref(), seed, out_dir, variant.as_deref(), steps, force),
        Command::Sample { run, checkpoint, condition, count, seed, steps, out_dir } => {
            cmd_sample(&run, checkpoint.as_deref(), &condition, count, seed, steps, out_dir)
        }
        Command::Report { runs, out } => cmd_report(&runs, out.as_deref()),
        Command::GenData { config, generator, n, seed, size, dim, out } => {
            cmd_gen_data(config.as_deref(), generator.as_deref(), n, seed, size, dim, &out)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            match &e {
                Error::Parse { line, msg } if *line > 0 => eprintln!("error: line {line}: {msg}"),
                _ => eprintln!("error: {e}"),
            }
            ExitCode::from(2)
        }
    }
}
