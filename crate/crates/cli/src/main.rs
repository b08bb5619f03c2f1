use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use vitskip::pathfinder::{select_optimal_paths, EffortCatalog};
use vitskip::router::DEFAULT_THRESHOLD_STEP;
use vitskip::search::{
    phase2_search, sweep_lec, synthetic_logits, write_lec_sweep_csv, SearchSpec,
    DEFAULT_SEARCH_BATCH,
};
use vitskip::sim::report::write_reports_csv;
use vitskip::sim::{simulate, HardwareConfig};
use vitskip::similarity::{build_cka_matrix, CkaMatrix, CkaRows, DEFAULT_CKA_BATCH};
use vitskip::vit::{ActivationCapture, EffortConfig, SyntheticRun, ViTConfig};

const CAPTURE_DIR: &str = "capture";
const CKA_FILE: &str = "cka_matrix.csv";
const CATALOG_FILE: &str = "effort_catalog.txt";
const SIM_FILE: &str = "sim_report.json";
const SEARCH_FILE: &str = "search_result.json";
const SWEEP_FILE: &str = "lec_sweep.csv";

#[derive(Parser)]
#[command(
    name = "vitskip",
    version,
    about = "Input-aware attention skipping for ViT inference"
)]
struct Cli {
    /// ViT description: a `key = value` file, or one of `deit-s`, `lvvit-s`, `toy:<encoders>`.
    #[arg(long, global = true, default_value = "deit-s")]
    vit: String,
    /// Hardware `key = value` file; defaults to the built-in platform.
    #[arg(long, global = true)]
    hw: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Format of the summary printed on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Run the all-active model on seeded synthetic data and write taps and logits.
    Capture {
        #[arg(long, default_value_t = DEFAULT_CKA_BATCH)]
        samples: usize,
    },
    /// Build the CKA matrix from a capture directory.
    Cka {
        /// Defaults to `<out>/capture`.
        #[arg(long)]
        capture: Option<PathBuf>,
        /// Mean-pool tokens so each sample is one row.
        #[arg(long)]
        pooled: bool,
    },
    /// Select the best path per effort level.
    Paths {
        /// Defaults to `<out>/cka_matrix.csv`.
        #[arg(long)]
        cka: Option<PathBuf>,
        /// Comma-separated effort levels; defaults to 1..=encoders.
        #[arg(long, value_delimiter = ',')]
        efforts: Vec<usize>,
    },
    /// Simulate one effort.
    Sim {
        /// Comma-separated 1-based active encoders; defaults to all active.
        #[arg(long, value_delimiter = ',')]
        active: Option<Vec<usize>>,
        /// Take the path of this effort level from the catalog instead.
        #[arg(long, conflicts_with = "active")]
        effort: Option<usize>,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Find a low/high effort pair meeting a delay target.
    Search {
        #[arg(long)]
        delay_target: f64,
        /// Fraction (0.7) or percentage (70).
        #[arg(long, default_value_t = 0.7)]
        lec: f64,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD_STEP)]
        threshold_step: f64,
        #[arg(long, default_value_t = DEFAULT_SEARCH_BATCH)]
        samples: usize,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
    /// Tabulate accuracy and EDP over a grid of low-effort constraints.
    SweepLec {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.6, 0.7, 0.8, 0.9])]
        lec: Vec<f64>,
        /// Route a fixed `low,high` effort pair instead of searching.
        #[arg(long, value_parser = parse_pair)]
        pair: Option<(usize, usize)>,
        /// Required unless `--pair` is given.
        #[arg(long)]
        delay_target: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD_STEP)]
        threshold_step: f64,
        #[arg(long, default_value_t = DEFAULT_SEARCH_BATCH)]
        samples: usize,
        #[arg(long)]
        catalog: Option<PathBuf>,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (low, high) = s.split_once(',').ok_or("expected `low,high`")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(low)?, parse(high)?))
}

/// Marks errors caused by bad arguments or input files.
#[derive(Debug)]
struct InvalidInput(String);

impl std::fmt::Display for InvalidInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvalidInput {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    InvalidInput(msg.into()).into()
}

fn read_input(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))
}

fn load_vit(spec: &str) -> Result<ViTConfig> {
    match spec {
        "deit-s" => return Ok(ViTConfig::deit_s()),
        "lvvit-s" => return Ok(ViTConfig::lvvit_s()),
        _ => {}
    }
    if let Some(d) = spec.strip_prefix("toy:") {
        let d: usize = d
            .parse()
            .map_err(|_| invalid(format!("bad encoder count in `{spec}`")))?;
        let vit = ViTConfig::toy(d);
        vit.validate()?;
        return Ok(vit);
    }
    let path = Path::new(spec);
    let vit = ViTConfig::from_toml_str(&read_input(path)?)
        .with_context(|| format!("in {}", path.display()))?;
    Ok(vit)
}

fn load_hw(path: Option<&Path>) -> Result<HardwareConfig> {
    match path {
        None => Ok(HardwareConfig::default()),
        Some(p) => HardwareConfig::from_toml_str(&read_input(p)?)
            .with_context(|| format!("in {}", p.display())),
    }
}

fn load_catalog(path: &Path, vit: &ViTConfig) -> Result<EffortCatalog> {
    let catalog = EffortCatalog::parse(&read_input(path)?)
        .with_context(|| format!("in {}", path.display()))?;
    if catalog.num_encoders() != vit.num_encoders {
        bail!(invalid(format!(
            "{} describes {} encoders, the ViT has {}",
            path.display(),
            catalog.num_encoders(),
            vit.num_encoders
        )));
    }
    Ok(catalog)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

struct Ctx {
    vit: ViTConfig,
    hw: HardwareConfig,
    seed: u64,
    out: PathBuf,
    format: Format,
}

impl Ctx {
    fn catalog(&self, path: Option<PathBuf>) -> Result<EffortCatalog> {
        load_catalog(
            &path.unwrap_or_else(|| self.out.join(CATALOG_FILE)),
            &self.vit,
        )
    }
}

fn capture(ctx: &Ctx, samples: usize) -> Result<()> {
    let run = SyntheticRun::new(&ctx.vit, samples, ctx.seed)?;
    let (taps, logits) = run.capture()?;
    let dir = ctx.out.join(CAPTURE_DIR);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    taps.write_dir(&dir)?;
    logits.write_dir(&dir)?;
    let summary = serde_json::json!({
        "dir": dir,
        "samples": samples,
        "rows": taps.rows(),
        "cols": taps.cols(),
        "accuracy": logits.accuracy(),
    });
    match ctx.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&summary)?),
        Format::Csv => println!(
            "samples,rows,cols,accuracy\n{samples},{},{},{}",
            taps.rows(),
            taps.cols(),
            logits.accuracy()
        ),
    }
    Ok(())
}

fn cka(ctx: &Ctx, dir: Option<PathBuf>, pooled: bool) -> Result<()> {
    let dir = dir.unwrap_or_else(|| ctx.out.join(CAPTURE_DIR));
    let taps = ActivationCapture::read_dir(&dir, ctx.vit.num_encoders)?;
    let rows = if pooled {
        CkaRows::PooledPerSample {
            tokens: ctx.vit.tokens,
        }
    } else {
        CkaRows::TokenFlattened
    };
    let matrix = build_cka_matrix(&taps, &EffortConfig::all_active(ctx.vit.num_encoders), rows)?;
    let csv = matrix.to_csv_string();
    write(&ctx.out.join(CKA_FILE), &csv)?;
    match ctx.format {
        Format::Csv => print!("{csv}"),
        Format::Json => {
            let entries: Vec<_> = matrix
                .entries()
                .map(|(i, j, v)| serde_json::json!({ "i": i, "j": j, "cka": v }))
                .collect();
            println!("{}", serde_json::to_string_pretty(&entries)?);
        }
    }
    Ok(())
}

fn paths(ctx: &Ctx, cka: Option<PathBuf>, efforts: Vec<usize>) -> Result<()> {
    let path = cka.unwrap_or_else(|| ctx.out.join(CKA_FILE));
    let matrix = CkaMatrix::read_csv(read_input(&path)?.as_bytes(), ctx.vit.num_encoders)
        .with_context(|| format!("in {}", path.display()))?;
    let efforts = if efforts.is_empty() {
        (1..=ctx.vit.num_encoders).collect()
    } else {
        efforts
    };
    let catalog = select_optimal_paths(&matrix, &efforts)?;
    let text = catalog.to_text();
    write(&ctx.out.join(CATALOG_FILE), &text)?;
    match ctx.format {
        Format::Csv => print!("{text}"),
        Format::Json => {
            let rows: Vec<_> = catalog
                .efforts()
                .map(|e| catalog.get(e).expect("listed effort"))
                .collect();
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
    }
    Ok(())
}

fn sim(
    ctx: &Ctx,
    active: Option<Vec<usize>>,
    effort: Option<usize>,
    catalog: Option<PathBuf>,
) -> Result<()> {
    let d = ctx.vit.num_encoders;
    let config = match (active, effort) {
        (Some(active), _) => EffortConfig::new(d, active)?,
        (None, Some(e)) => ctx
            .catalog(catalog)?
            .get(e)
            .ok_or_else(|| invalid(format!("effort {e} is not in the catalog")))?
            .config
            .clone(),
        (None, None) => EffortConfig::all_active(d),
    };
    let report = simulate(&ctx.vit, &config, &ctx.hw)?;
    let json = report.to_json();
    write(&ctx.out.join(SIM_FILE), &json)?;
    match ctx.format {
        Format::Json => println!("{json}"),
        Format::Csv => write_reports_csv(std::slice::from_ref(&report), std::io::stdout())?,
    }
    Ok(())
}

fn search_spec(
    ctx: &Ctx,
    catalog: Option<PathBuf>,
    delay_target: f64,
    lec: f64,
    step: f64,
    samples: usize,
) -> Result<SearchSpec> {
    let catalog = ctx.catalog(catalog)?;
    let logits = synthetic_logits(&ctx.vit, &catalog, samples, ctx.seed)?;
    Ok(SearchSpec::new(catalog, delay_target, lec, step, logits)?)
}

/// Returns whether the search succeeded.
fn search(
    ctx: &Ctx,
    delay_target: f64,
    lec: f64,
    step: f64,
    samples: usize,
    catalog: Option<PathBuf>,
) -> Result<bool> {
    let spec = search_spec(ctx, catalog, delay_target, lec, step, samples)?;
    let result = phase2_search(&spec, &ctx.vit, &ctx.hw)?;
    let json = result.to_json();
    write(&ctx.out.join(SEARCH_FILE), &json)?;
    match ctx.format {
        Format::Json => println!("{json}"),
        Format::Csv => {
            println!("status,low,high,threshold,f_low,accuracy,combined_delay_ms");
            let best = result.selected.as_ref().or(result.nearest_miss.as_ref());
            match best {
                Some(c) => println!(
                    "{},{},{},{},{},{},{}",
                    if result.is_success() {
                        "success"
                    } else {
                        "infeasible"
                    },
                    c.low_effort.effort(),
                    c.high_effort.effort(),
                    c.threshold,
                    c.routing.f_low,
                    c.accuracy,
                    c.combined_delay_ms
                ),
                None => println!("infeasible,,,,,,"),
            }
        }
    }
    if !result.is_success() {
        eprintln!(
            "no effort pair within 5% of {delay_target} ms at LEC {}",
            result.lec
        );
    }
    Ok(result.is_success())
}

fn sweep(
    ctx: &Ctx,
    lecs: Vec<f64>,
    pinned: Option<(usize, usize)>,
    delay_target: Option<f64>,
    step: f64,
    samples: usize,
    catalog: Option<PathBuf>,
) -> Result<()> {
    let target = match (delay_target, pinned) {
        (Some(t), _) => t,
        // Unused when every row routes the pinned pair.
        (None, Some(_)) => 1.0,
        (None, None) => bail!(invalid("--delay-target is required without --pair")),
    };
    let spec = search_spec(ctx, catalog, target, lecs[0], step, samples)?;
    let rows = sweep_lec(&spec, &lecs, pinned, &ctx.vit, &ctx.hw)?;
    let mut csv = Vec::new();
    write_lec_sweep_csv(&rows, &mut csv)?;
    write(&ctx.out.join(SWEEP_FILE), &csv)?;
    match ctx.format {
        Format::Csv => print!("{}", String::from_utf8(csv)?),
        Format::Json => println!("{}", serde_json::to_string_pretty(&rows)?),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let ctx = Ctx {
        vit: load_vit(&cli.vit)?,
        hw: load_hw(cli.hw.as_deref())?,
        seed: cli.seed,
        out: cli.out,
        format: cli.format,
    };
    match cli.command {
        Command::Capture { samples } => capture(&ctx, samples)?,
        Command::Cka { capture, pooled } => cka(&ctx, capture, pooled)?,
        Command::Paths { cka: file, efforts } => paths(&ctx, file, efforts)?,
        Command::Sim {
            active,
            effort,
            catalog,
        } => sim(&ctx, active, effort, catalog)?,
        Command::Search {
            delay_target,
            lec,
            threshold_step,
            samples,
            catalog,
        } => return search(&ctx, delay_target, lec, threshold_step, samples, catalog),
        Command::SweepLec {
            lec,
            pair,
            delay_target,
            threshold_step,
            samples,
            catalog,
        } => sweep(
            &ctx,
            lec,
            pair,
            delay_target,
            threshold_step,
            samples,
            catalog,
        )?,
    }
    Ok(true)
}

fn is_invalid_input(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        cause.is::<InvalidInput>()
            || cause
                .downcast_ref::<vitskip::Error>()
                .is_some_and(|e| e.is_invalid_input())
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_invalid_input(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
