use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crpt_core::collect::{collect_random, DomainBuffer};
use crpt_core::config::{Precision, RunConfig};
use crpt_core::ndmath::Scalar;
use crpt_core::protolearn::{self, EncoderStack, PrototypeBank};
use crpt_core::{metrics, pipeline, rlagent, Error};

/// Cross-domain random pre-training with prototypes.
#[derive(Parser)]
#[command(name = "crpt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Base {
    /// `key = value` configuration file (defaults to the desk preset).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used when no config file is given.
    #[arg(long)]
    preset: Option<String>,
}

impl Base {
    fn load(&self) -> Result<RunConfig, Error> {
        let cfg = match &self.config {
            Some(p) => RunConfig::parse(&fs::read_to_string(p)?)?,
            None => RunConfig::preset(self.preset.as_deref().unwrap_or("desk"))?,
        };
        if let (Some(_), Some(p)) = (&self.config, &self.preset) {
            if *p != cfg.preset {
                return Err(Error::ConfigInvalid(vec![format!(
                    "--preset {p} conflicts with preset `{}` in the config file",
                    cfg.preset
                )]));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fill a buffer with uniform-random rollouts of one domain.
    Collect {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        capacity: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        base: Base,
    },
    /// Cross-domain prototypical pre-training.
    Pretrain {
        /// Comma-separated buffer files.
        #[arg(long, value_delimiter = ',', required = true)]
        buffers: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        updates: Option<usize>,
        /// Per-update loss and coverage CSV.
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        base: Base,
    },
    /// Single-domain finetuning of a pre-trained checkpoint.
    Finetune {
        #[arg(long)]
        buffer: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        updates: Option<usize>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[command(flatten)]
        base: Base,
    },
    /// Downstream SAC on the frozen encoder; prints the evaluation CSV.
    Train {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        encoder: PathBuf,
        /// Environment frames of interaction.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        beta: Option<f64>,
        /// Directory for the policy checkpoint and evaluation CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        base: Base,
    },
    /// Coverage and PCA diagnostics.
    Metrics {
        #[command(subcommand)]
        which: MetricsCommand,
    },
    /// Run the configured phases, or re-run a manifest.
    Pipeline {
        #[arg(long, conflicts_with = "manifest")]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Override the configured output root.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// ANE/KNE of a checkpoint's prototypes.
    Coverage {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Principal components of encoder features, tagged by domain.
    Pca {
        #[arg(long, value_delimiter = ',', required = true)]
        buffers: Vec<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 4)]
        components: usize,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[command(flatten)]
        base: Base,
    },
}

fn load_buffers(paths: &[PathBuf]) -> Result<Vec<DomainBuffer>, Error> {
    paths.iter().map(DomainBuffer::load).collect()
}

fn pretrain<T: Scalar>(buffers: &[DomainBuffer], cfg: &RunConfig, seed: u64, out: &Path, log: Option<&Path>) -> Result<(), Error> {
    let refs: Vec<&DomainBuffer> = buffers.iter().collect();
    let p = protolearn::pretrain::<T>(&refs, &cfg.ssl, cfg.frame_stack, seed)?;
    protolearn::save_model(&p.stack, &p.bank, out)?;
    if let Some(path) = log {
        protolearn::write_log_csv(&p.log, path)?;
    }
    Ok(())
}

fn finetune<T: Scalar>(buffer: &DomainBuffer, cfg: &RunConfig, seed: u64, ckpt: &Path, out: &Path, log: Option<&Path>) -> Result<(), Error> {
    let (stack, bank) = protolearn::load_model::<T>(ckpt)?;
    let p = protolearn::finetune(stack, bank, buffer, &cfg.ssl, seed)?;
    protolearn::save_model(&p.stack, &p.bank, out)?;
    if let Some(path) = log {
        protolearn::write_log_csv(&p.log, path)?;
    }
    Ok(())
}

fn train<T: Scalar>(domain: &str, cfg: &RunConfig, seed: u64, encoder: &Path, out: Option<&Path>) -> Result<String, Error> {
    let (stack, bank): (EncoderStack<T>, PrototypeBank<T>) = protolearn::load_model(encoder)?;
    let spec = cfg.domain_spec(domain)?;
    let run = rlagent::train_downstream(&spec, &stack, &bank, &cfg.rl, seed)?;
    let csv = rlagent::eval_csv(&run.log);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        run.agent.save(dir.join(format!("policy_{domain}.ckpt")))?;
        fs::write(dir.join(format!("train_{domain}.csv")), &csv)?;
    }
    Ok(csv)
}

fn pca<T: Scalar>(buffers: &[DomainBuffer], ckpt: &Path, cfg: &RunConfig, components: usize, samples: usize) -> Result<String, Error> {
    let (stack, _bank) = protolearn::load_model::<T>(ckpt)?;
    let mut rows = Vec::new();
    let mut tags = Vec::new();
    for b in buffers {
        let x = pipeline::frame_sample::<T>(b, samples, cfg.frame_stack);
        let y = stack.features(&x)?.cast::<f64>();
        tags.extend(std::iter::repeat_n(b.domain().to_string(), y.rows()));
        rows.extend(y.to_rows_f64());
    }
    let p = metrics::pca(&crpt_core::ndmath::Tensor::from_rows(&rows)?, components)?;
    Ok(metrics::pca_csv(&p, &tags))
}

macro_rules! typed {
    ($cfg:expr, $f:ident ( $($arg:expr),* )) => {
        match $cfg.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Collect { domain, steps, capacity, seed, out, base } => {
            let cfg = base.load()?;
            let spec = cfg.domain_spec(&domain)?;
            spec.validate()?;
            let steps = steps.unwrap_or(cfg.collect_steps);
            let capacity = capacity.unwrap_or(cfg.buffer_capacity.max(steps));
            let buf = collect_random(&spec, steps, capacity, seed)?;
            buf.save(&out)?;
            println!("{} frames of {domain} written to {}", buf.len(), out.display());
        }
        Command::Pretrain { buffers, out, seed, updates, log, base } => {
            let mut cfg = base.load()?;
            if let Some(n) = updates {
                cfg.ssl.pretrain_updates = n;
            }
            let bufs = load_buffers(&buffers)?;
            typed!(cfg, pretrain(&bufs, &cfg, seed, &out, log.as_deref()))?;
            println!("encoder written to {}", out.display());
        }
        Command::Finetune { buffer, ckpt, out, seed, updates, log, base } => {
            let mut cfg = base.load()?;
            if let Some(n) = updates {
                cfg.ssl.finetune_updates = n;
            }
            let buf = DomainBuffer::load(&buffer)?;
            typed!(cfg, finetune(&buf, &cfg, seed, &ckpt, &out, log.as_deref()))?;
            println!("finetuned encoder written to {}", out.display());
        }
        Command::Train { domain, encoder, steps, seed, beta, out, base } => {
            let mut cfg = base.load()?;
            if let Some(n) = steps {
                cfg.rl.env_steps = n;
            }
            if let Some(b) = beta {
                cfg.rl.beta = b;
            }
            cfg.validate()?;
            let csv = typed!(cfg, train(&domain, &cfg, seed, &encoder, out.as_deref()))?;
            print!("{csv}");
        }
        Command::Metrics { which } => match which {
            MetricsCommand::Coverage { ckpt, k } => {
                let (_, bank) = protolearn::load_model::<f64>(&ckpt)?;
                print!("{}", metrics::coverage(&bank, k)?.csv());
            }
            MetricsCommand::Pca { buffers, ckpt, components, samples, base } => {
                let cfg = base.load()?;
                let bufs = load_buffers(&buffers)?;
                print!("{}", typed!(cfg, pca(&bufs, &ckpt, &cfg, components, samples))?);
            }
        },
        Command::Pipeline { config, manifest, out } => {
            let mut cfg = match (config, manifest) {
                (_, Some(m)) => pipeline::Manifest::parse(&fs::read_to_string(m)?)?.config,
                (Some(c), None) => RunConfig::parse(&fs::read_to_string(c)?)?,
                (None, None) => RunConfig::desk(),
            };
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let m = pipeline::run_pipeline(&cfg)?;
            println!("run directory {}", pipeline::run_dir(&cfg).display());
            for a in &m.artifacts {
                println!("{} {} {}", a.kind, a.path, a.hash);
            }
        }
    }
    Ok(())
}

fn is_validation(e: &Error) -> bool {
    match e {
        Error::ConfigInvalid(_) | Error::UnknownDomain(_) => true,
        Error::Phase { source, .. } => is_validation(source),
        _ => false,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
