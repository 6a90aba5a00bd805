//! `modtrans` command-line interface.
//!
//! Exit status: 0 success, 1 validation failure, 2 training failure,
//! 3 I/O failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use modtrans::commands::{cmd_generate, cmd_grid, cmd_report, cmd_run, cmd_validate, CommandError, RunOptions};
use modtrans::config::RunConfig;
use modtrans::data::SynthConfig;
use modtrans::pipeline::StageConfig;
use modtrans::recurrent::CellKind;

#[derive(Parser)]
#[command(name = "modtrans", version, about = "Multimodal modality translation and sentiment regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic word-aligned corpus.
    Generate {
        #[arg(long)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Train and evaluate one pipeline spec.
    Run(RunArgs),
    /// Run all 26 manifest specs and write a summary table.
    Grid(RunArgs),
    /// Check a dataset file and list every violation.
    Validate { path: PathBuf },
    /// Re-render a report.json or summary.json as tables.
    Report { path: PathBuf },
}

#[derive(Args, Default)]
struct SynthArgs {
    #[arg(long)]
    segments: Option<usize>,
    #[arg(long)]
    t_min: Option<usize>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    text_dim: Option<usize>,
    #[arg(long)]
    audio_dim: Option<usize>,
    #[arg(long)]
    video_dim: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    /// Shared-latent coupling in [0, 1].
    #[arg(long)]
    coupling: Option<f64>,
}

impl SynthArgs {
    fn is_set(&self) -> bool {
        self.segments.is_some()
            || self.t_min.is_some()
            || self.t_max.is_some()
            || self.text_dim.is_some()
            || self.audio_dim.is_some()
            || self.video_dim.is_some()
            || self.vocab.is_some()
            || self.coupling.is_some()
    }

    fn apply(&self, c: &mut SynthConfig) {
        set(&mut c.n_segments, self.segments);
        set(&mut c.t_min, self.t_min);
        set(&mut c.t_max, self.t_max);
        set(&mut c.dims.text, self.text_dim);
        set(&mut c.dims.audio, self.audio_dim);
        set(&mut c.dims.video, self.video_dim);
        set(&mut c.vocab, self.vocab);
        set(&mut c.coupling, self.coupling);
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

macro_rules! stage_args {
    ($name:ident, $p:literal) => {
        #[derive(Args, Default)]
        struct $name {
            #[arg(long = concat!($p, "-cell"), id = concat!($p, "-cell"))]
            cell: Option<CellKind>,
            #[arg(long = concat!($p, "-layers"), id = concat!($p, "-layers"))]
            layers: Option<usize>,
            #[arg(long = concat!($p, "-hidden"), id = concat!($p, "-hidden"))]
            hidden: Option<usize>,
            #[arg(long = concat!($p, "-attention"), id = concat!($p, "-attention"))]
            attention: Option<bool>,
            #[arg(long = concat!($p, "-epochs"), id = concat!($p, "-epochs"))]
            epochs: Option<usize>,
            #[arg(long = concat!($p, "-lr"), id = concat!($p, "-lr"))]
            learning_rate: Option<f64>,
            #[arg(long = concat!($p, "-clip-norm"), id = concat!($p, "-clip-norm"))]
            clip_norm: Option<f64>,
            #[arg(long = concat!($p, "-accumulate"), id = concat!($p, "-accumulate"))]
            accumulate: Option<usize>,
        }

        impl $name {
            fn apply(&self, s: &mut StageConfig) {
                set(&mut s.cell, self.cell);
                set(&mut s.layers, self.layers);
                set(&mut s.hidden, self.hidden);
                set(&mut s.attention, self.attention);
                set(&mut s.epochs, self.epochs);
                set(&mut s.learning_rate, self.learning_rate);
                if self.clip_norm.is_some() {
                    s.clip_norm = self.clip_norm;
                }
                set(&mut s.accumulate, self.accumulate);
            }
        }
    };
}

stage_args!(TranslationArgs, "tr");
stage_args!(RegressionArgs, "reg");

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    seed: u64,
    /// TOML or JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest id, e.g. `tr-t-v` or `hier-ta-v`.
    #[arg(long)]
    spec: Option<String>,
    /// Dataset file; a synthetic corpus is generated when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    finetune_encoder: Option<bool>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    #[command(flatten)]
    translation: TranslationArgs,
    #[command(flatten)]
    regression: RegressionArgs,
    #[command(flatten)]
    synth: SynthArgs,
    /// Stop after this many epochs (the run resumes when started again).
    #[arg(long, hide = true)]
    halt_after_epochs: Option<usize>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, CommandError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        c.seed = Some(self.seed);
        if self.spec.is_some() {
            c.spec = self.spec.clone();
            c.inline_spec = None;
        }
        if self.dataset.is_some() {
            c.dataset = self.dataset.clone();
        }
        set(&mut c.output_dir, self.output_dir.clone());
        set(&mut c.concurrency, self.concurrency);
        set(&mut c.beam_width, self.beam_width);
        set(&mut c.finetune_encoder, self.finetune_encoder);
        set(&mut c.split.train_fraction, self.train_fraction);
        set(&mut c.split.validation_fraction, self.validation_fraction);
        self.translation.apply(&mut c.translation);
        self.regression.apply(&mut c.regression);
        if self.synth.is_set() {
            let mut s = c.synthetic.take().unwrap_or(SynthConfig {
                seed: self.seed,
                ..SynthConfig::default()
            });
            self.synth.apply(&mut s);
            c.synthetic = Some(s);
        }
        Ok(c)
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            halt_after_epochs: self.halt_after_epochs,
        }
    }
}

fn execute(command: Command) -> Result<(), CommandError> {
    match command {
        Command::Generate { seed, out, synth } => {
            let mut c = SynthConfig {
                seed,
                ..SynthConfig::default()
            };
            synth.apply(&mut c);
            let d = cmd_generate(&c, &out)?;
            println!("wrote {} segments to {}", d.len(), out.display());
        }
        Command::Run(args) => {
            let config = args.config()?;
            cmd_run(&config, args.options())?;
            print!("{}", cmd_report(&config.output_dir.join("report.json"))?);
        }
        Command::Grid(args) => {
            let config = args.config()?;
            let summary = cmd_grid(&config, args.options())?;
            print!("{}", cmd_report(&config.output_dir.join("summary.json"))?);
            let failed = summary.rows.iter().filter(|r| !r.status.is_ok()).count();
            if failed > 0 {
                return Err(CommandError::Training(format!("{failed} of {} specs failed", summary.rows.len())));
            }
        }
        Command::Validate { path } => {
            let diagnostics = cmd_validate(&path)?;
            for d in &diagnostics {
                println!("{d}");
            }
            if !diagnostics.is_empty() {
                return Err(CommandError::Validation(format!("{} violations in {}", diagnostics.len(), path.display())));
            }
            println!("{}: ok", path.display());
        }
        Command::Report { path } => print!("{}", cmd_report(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
