use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use percept_core::config::StudyConfig;
use percept_core::engine::{Durability, EngineSettings};
use percept_core::export::{pilot_from_rows, read_ratings_csv, scores_from_rows, AggregateParams};
use percept_core::ids::StudyTarget;
use percept_core::plate::{generate_plate, legibility_report, Palette, PlateSpec};
use percept_core::protocol::PlateAnswer;
use percept_core::stats::{
    closed_form_n_per_group, estimate_sample_size, leaderboard, required_participants, write_leaderboard_csv,
    BootstrapParams, EffectSpec, PowerParams,
};
use percept_service::campaign::{launch_local, stage_pool};
use percept_service::{HttpPlatform, ServiceConfig};
use percept_sim::{run_campaign, CampaignError, PoolSpec, PopulationSpec, SyntheticPool};

#[derive(Parser)]
#[command(name = "percept", version, about = "Run and analyse human imperceptibility studies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the study API.
    Serve {
        /// TOML service config; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bind: Option<std::net::SocketAddr>,
    },
    /// Render one colorblindness plate as PNG.
    Plate {
        #[arg(long)]
        seed: u64,
        /// Digit to hide, or "none" for a blank plate.
        #[arg(long, default_value = "none")]
        digit: PlateAnswer,
        #[arg(long)]
        palette: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print how many participants a configuration needs.
    Plan {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run a simulated campaign over HTTP.
    Campaign(CampaignArgs),
    /// Aggregate a ratings export into a leaderboard.
    Score {
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value_t = 10_000)]
        resamples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
    /// Estimate annotators per group from a pilot ratings export.
    SampleSize {
        #[arg(long)]
        ratings: PathBuf,
        /// Target as attack@model.
        #[arg(long)]
        target: String,
        /// Compare against a second attack@model instead of unmodified images.
        #[arg(long)]
        against: Option<String>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0.8)]
        power: f64,
        #[arg(long, default_value_t = 2_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(clap::Args)]
struct CampaignArgs {
    /// Drive an existing service instead of starting one.
    #[arg(long, requires = "token")]
    url: Option<String>,
    #[arg(long)]
    token: Option<String>,
    /// Work directory for a locally started service.
    #[arg(long, default_value = "campaign-data")]
    workdir: PathBuf,
    /// JSON population spec; flags below override parts of it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "diffattack@resnet50")]
    target: String,
    #[arg(long)]
    invites: Option<usize>,
    #[arg(long)]
    bad_fraction: Option<f64>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long)]
    datasets: Option<usize>,
    #[arg(long)]
    ratings_per_image: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

type Failure = Box<dyn std::error::Error>;

fn parse_target(s: &str) -> Result<StudyTarget, Failure> {
    let (attack, model) = s.split_once('@').ok_or_else(|| format!("expected attack@model, got {s:?}"))?;
    Ok(StudyTarget::new(attack, model))
}

fn load_config(path: Option<&PathBuf>) -> Result<ServiceConfig, Failure> {
    Ok(match path {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::default(),
    })
}

fn main() -> ExitCode {
    tracing_subscriber::fmt().with_writer(io::stderr).init();
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode, Failure> {
    match command {
        Command::Serve { config, bind } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(b) = bind {
                cfg.bind = b;
            }
            if cfg.admin_token.is_empty() {
                tracing::warn!("admin_token is empty; admin routes are disabled");
            }
            percept_service::run(cfg)?;
        }
        Command::Plate {
            seed,
            digit,
            palette,
            out,
        } => {
            let mut spec = PlateSpec::new(
                match digit {
                    PlateAnswer::Digit(d) => Some(d),
                    PlateAnswer::NoDigit => None,
                },
                seed,
            );
            if let Some(id) = palette {
                spec.palette = Palette::by_id(&id).ok_or_else(|| format!("unknown palette {id:?}"))?;
            }
            let plate = generate_plate(&spec)?;
            fs::write(&out, plate.png_bytes()?)?;
            let report = serde_json::json!({
                "meta": plate.meta(),
                "legibility": legibility_report(&plate)?,
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Plan { config } => {
            let cfg = load_config(config.as_ref())?;
            println!("{}", serde_json::to_string_pretty(&required_participants(&cfg.engine.study))?);
        }
        Command::Campaign(args) => return campaign(args),
        Command::Score {
            ratings,
            model,
            resamples,
            seed,
            format,
        } => {
            let rows = read_ratings_csv(fs::File::open(ratings)?)?;
            let params = AggregateParams {
                image: BootstrapParams {
                    resamples: resamples.min(1_000),
                    seed,
                },
                cluster: BootstrapParams { resamples, seed },
            };
            let scores: Vec<_> = scores_from_rows(&rows, params)?
                .into_iter()
                .filter(|s| model.as_ref().is_none_or(|m| &s.victim_model == m))
                .collect();
            let board = leaderboard(&scores);
            match format {
                Format::Csv => write_leaderboard_csv(&board, io::stdout().lock())?,
                Format::Json => println!("{}", serde_json::to_string_pretty(&board)?),
            }
        }
        Command::SampleSize {
            ratings,
            target,
            against,
            alpha,
            power,
            trials,
            seed,
        } => {
            let rows = read_ratings_csv(fs::File::open(ratings)?)?;
            let target = parse_target(&target)?;
            let effect = match against {
                Some(b) => EffectSpec::BetweenAttacks {
                    a: target,
                    b: parse_target(&b)?,
                },
                None => EffectSpec::AdversarialVsUnmodified { target },
            };
            let pilot = pilot_from_rows(&rows, &effect);
            let params = PowerParams {
                alpha,
                power_target: power,
                trials,
                seed,
            };
            let n = estimate_sample_size(&pilot, &params)?;
            let d = pilot.effect_size();
            let report = serde_json::json!({
                "effect": effect,
                "pilot_sizes": [pilot.group_a.len(), pilot.group_b.len()],
                "effect_size": d,
                "n_per_group": n,
                "closed_form_n_per_group": closed_form_n_per_group(d, alpha, power),
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn campaign(args: CampaignArgs) -> Result<ExitCode, Failure> {
    let mut spec: PopulationSpec = match &args.spec {
        Some(p) => serde_json::from_slice(&fs::read(p)?)?,
        None => PopulationSpec::default(),
    };
    if let Some(n) = args.invites {
        spec.invites = n;
    }
    if let Some(f) = args.bad_fraction {
        spec.bad_fraction = f;
    }
    if let Some(sd) = args.noise_sd {
        spec.honest.noise_sd = sd;
    }
    let target = parse_target(&args.target)?;
    spec.study = target.to_string();
    let mut study = StudyConfig::default();
    if let Some(n) = args.datasets {
        study.dataset_count = n;
    }
    if let Some(n) = args.ratings_per_image {
        study.ratings_per_image_min = n;
    }
    let world = SyntheticPool::generate(&target, &PoolSpec::for_config(&study), args.seed);
    let aggregate = AggregateParams::default();

    let mut _server = None;
    let client = match &args.url {
        Some(url) => HttpPlatform::new(url.clone(), args.token.clone()),
        None => {
            let settings = EngineSettings {
                study: study.clone(),
                seed: args.seed,
                aggregate,
                ..Default::default()
            };
            let (server, client) = launch_local(&args.workdir, settings, Durability::Flush)?;
            _server = Some(server);
            client
        }
    };
    stage_pool(&client, &world, &args.workdir.join("images"), args.seed)?;
    let (report, code) = match run_campaign(&client, &spec, &world, &study, aggregate, args.seed) {
        Ok(r) => (r, ExitCode::SUCCESS),
        Err(CampaignError::BudgetExhausted { shortfall, report }) => {
            eprintln!("budget exhausted; {} datasets short of the rating floor", shortfall.len());
            (*report, ExitCode::from(2))
        }
        Err(e) => return Err(e.into()),
    };
    let json = serde_json::to_string_pretty(&report)?;
    match args.out {
        Some(p) => fs::write(p, json)?,
        None => writeln!(io::stdout().lock(), "{json}")?,
    }
    Ok(code)
}
