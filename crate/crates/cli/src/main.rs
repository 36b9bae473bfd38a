use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use pseudolabel::{Error, ErrorKind};
use pseudolabel_cli::commands::{self, ApplyArgs, EvaluateArgs, PseudolabelArgs, ServeArgs, SynthArgs, VoteArgs};
use pseudolabel_cli::config::{Overrides, PipelineConfig};
use pseudolabel_cli::server;

/// Self-training pseudo-labeling with ensemble voting and human review.
#[derive(Debug, Parser)]
#[command(name = "pseudolabel", version)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus.
    Synth(SynthArgs),
    /// Cross-validate a supervised model on ground-truth labels.
    Baseline(EvaluateArgs),
    /// Run the self-training ensemble over unlabeled posts.
    Pseudolabel(PseudolabelArgs),
    /// Majority-vote the ensemble's labels.
    Vote(VoteArgs),
    /// Serve the review queue over HTTP.
    ReviewServe(ServeArgs),
    /// Merge review verdicts into the pseudo-labels.
    ApplyCorrections(ApplyArgs),
    /// Cross-validate with extra (pseudo-labeled) training data.
    Evaluate(EvaluateArgs),
    /// Speak the external-backend protocol on stdin/stdout using the built-in model.
    Backend,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map(Error::kind)
        .unwrap_or(ErrorKind::Data);
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Backend => 3,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = PipelineConfig::resolve(&cli.overrides)?;
    match cli.command {
        Command::Synth(args) => commands::synth(&args, &config, &cli.overrides),
        Command::Baseline(args) => {
            if args.extra.is_some() {
                anyhow::bail!(Error::Config("baseline takes no --extra; use evaluate".into()));
            }
            commands::evaluate(&args, &config).map(drop)
        }
        Command::Evaluate(args) => commands::evaluate(&args, &config).map(drop),
        Command::Pseudolabel(args) => commands::pseudolabel(&args, &config),
        Command::Vote(args) => commands::vote(&args, &config),
        Command::ApplyCorrections(args) => commands::apply(&args, &config).map(drop),
        Command::Backend => commands::backend(&config),
        Command::ReviewServe(args) => {
            let store = commands::review_store(&args, &config)?;
            let app = server::router(store, args.static_dir.as_deref());
            let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
            runtime.block_on(async {
                let addr = format!("{}:{}", args.bind, args.port);
                let listener = tokio::net::TcpListener::bind(&addr)
                    .await
                    .with_context(|| format!("binding {addr}"))?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                server::run(listener, app).await.context("serving")
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
