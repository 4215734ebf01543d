use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crystal_sst_cli::{build_config, run, CliError, Command, Overrides, EXIT_CONFIG};

/// Crystal image analysis with synchrosqueezed wave-packet transforms.
#[derive(Parser, Debug)]
#[command(name = "crystal-sst", version, about)]
struct Cli {
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "CRYSTAL_SST_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Render a scene with its ground-truth maps.
    Synth(RunArgs),
    /// Radial spectrum and dominant band.
    Spectrum(RunArgs),
    /// Rotation angle, boundary indicator and boundary mask maps.
    Analyze(RunArgs),
    /// Deformation gradient and volume distortion.
    Deform(RunArgs),
    /// Noise sweep of the rotation error and boundary-map distance.
    Stability(RunArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum AlgorithmArg {
    Stacked,
    #[value(name = "per_vector", alias = "per-vector")]
    PerVector,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene description to render (TOML or JSON).
    #[arg(long, conflicts_with = "image")]
    scene: Option<PathBuf>,
    /// Image to analyze (PNG, or .bin with a JSON header).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Grid size for rendered scenes.
    #[arg(long)]
    len: Option<usize>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    algorithm: Option<AlgorithmArg>,
    /// Config override such as `params.sst.epsilon=1e-3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", e.to_json());
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let err = CliError::Config(e.render().to_string().trim().trim_start_matches("error: ").to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(EXIT_CONFIG as u8);
        }
        Err(e) => e.exit(),
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        return fail(&CliError::Config(format!("cannot start worker threads: {e}")));
    }
    let (command, args) = match cli.command {
        Cmd::Synth(a) => (Command::Synth, a),
        Cmd::Spectrum(a) => (Command::Spectrum, a),
        Cmd::Analyze(a) => (Command::Analyze, a),
        Cmd::Deform(a) => (Command::Deform, a),
        Cmd::Stability(a) => (Command::Stability, a),
    };
    let overrides = Overrides {
        scene: args.scene,
        image: args.image,
        len: args.len,
        out: args.out,
        seed: args.seed,
        algorithm: args.algorithm.map(|a| match a {
            AlgorithmArg::Stacked => "stacked".to_string(),
            AlgorithmArg::PerVector => "per_vector".to_string(),
        }),
        set: args.set,
    };
    let result = build_config(args.config.as_deref(), &overrides).and_then(|cfg| run(command, &cfg));
    match result {
        Ok(manifest) => {
            println!("{}", serde_json::json!({ "command": manifest.command, "out": manifest.config.output.dir, "artifacts": manifest.artifacts, "wall_time_s": manifest.wall_time_s }));
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
