//! `redloc`: simulate ranging scenarios, localize, detect anomalous nodes and
//! evaluate the whole pipeline against ground truth.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use redloc_core::harness::{detect_gd, detect_ml, localize_gd, localize_ml};
use redloc_core::layouts::{aligned_layouts, read_csv, write_csv, RangeTable};
use redloc_core::sim::write_truth_csv;
use redloc_core::{
    generate_ranges, generate_truth, run_pipeline, AnomalyReport, EstimatorParams, Methods,
    PipelineConfig, Point2, SimScenario,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_PIPELINE: u8 = 3;

#[derive(Parser)]
#[command(name = "redloc", version)]
#[command(about = "Anchor-free relative localization and ranging-anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Ml,
    Gd,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodSet {
    Ml,
    Gd,
    Both,
}

impl From<MethodSet> for Methods {
    fn from(m: MethodSet) -> Self {
        match m {
            MethodSet::Ml => Methods::Ml,
            MethodSet::Gd => Methods::Gd,
            MethodSet::Both => Methods::Both,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate ground truth and range measurements for a scenario
    Simulate {
        /// Scenario JSON
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate positions from a ranges CSV
    Localize {
        #[arg(long)]
        ranges: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Estimator parameters JSON; defaults when omitted
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flag nodes whose ranges corrupt the layouts they take part in
    Detect {
        #[arg(long)]
        ranges: PathBuf,
        #[arg(long)]
        params: Option<PathBuf>,
        /// Which position estimates feed the detector
        #[arg(long, value_enum, default_value = "ml")]
        method: Method,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run simulate → localize → detect and score against ground truth
    Evaluate {
        /// Pipeline JSON: `scenario` plus estimator parameters
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        methods: MethodSet,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Failure split by exit code.
enum Failure {
    Config(anyhow::Error),
    Pipeline(anyhow::Error),
}

trait OrConfig<T> {
    fn config(self) -> std::result::Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrConfig<T> for std::result::Result<T, E> {
    fn config(self) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }
}

trait OrPipeline<T> {
    fn pipeline(self) -> std::result::Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrPipeline<T> for std::result::Result<T, E> {
    fn pipeline(self) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure::Pipeline(e.into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("pipeline error: {e:#}");
            ExitCode::from(EXIT_PIPELINE)
        }
    }
}

fn run(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Simulate { config, out, seed } => {
            let mut scenario: SimScenario = read_json(&config).config()?;
            if let Some(s) = seed {
                scenario.seed = s;
            }
            scenario.validate().config()?;
            let truth = generate_truth(&scenario).pipeline()?;
            let tables = generate_ranges(&truth, &scenario).pipeline()?;
            write(&out, "ranges.csv", &write_csv(&tables))?;
            write(&out, "truth.csv", &write_truth_csv(&truth))?;
        }
        Command::Localize {
            ranges,
            method,
            params,
            out,
        } => {
            let params = load_params(params.as_deref())?;
            let tables = load_ranges(&ranges)?;
            let frame = params.frame_or_default();
            let mut rows = Vec::new();
            let (csv, json) = match method {
                Method::Ml => {
                    let mut estimates = Vec::new();
                    for t in &tables {
                        let (_, fused) = localize_ml(t, frame, &params.fusion).pipeline()?;
                        rows.push((t.timestamp(), fused.positions.clone()));
                        estimates.push(fused);
                    }
                    (positions_csv(&rows), to_json(&estimates)?)
                }
                Method::Gd => {
                    #[derive(Serialize)]
                    struct Row {
                        timestamp: f64,
                        #[serde(flatten)]
                        result: redloc_core::GdResult,
                    }
                    let mut estimates = Vec::new();
                    for t in &tables {
                        let result = localize_gd(t, frame, &params).pipeline()?;
                        rows.push((t.timestamp(), result.positions.iter().copied().map(Some).collect()));
                        estimates.push(Row {
                            timestamp: t.timestamp(),
                            result,
                        });
                    }
                    (positions_csv(&rows), to_json(&estimates)?)
                }
            };
            write(&out, "positions.csv", &csv)?;
            write(&out, "estimates.json", &json)?;
        }
        Command::Detect {
            ranges,
            params,
            method,
            out,
        } => {
            let params = load_params(params.as_deref())?;
            let tables = load_ranges(&ranges)?;
            let frame = params.frame_or_default();
            let mut reports: Vec<AnomalyReport> = Vec::new();
            for t in &tables {
                let report = match method {
                    Method::Ml => detect_ml(t, frame, &params),
                    Method::Gd => aligned_layouts(t, frame).and_then(|a| detect_gd(t, &a, &params)),
                }
                .pipeline()?;
                reports.push(report);
            }
            let mut csv = String::from("timestamp_s,node,per_node_error_m2,candidate,confirmed\n");
            for r in &reports {
                for (i, e) in r.per_node_error.iter().enumerate() {
                    let e = e.map(|v| v.to_string()).unwrap_or_default();
                    let _ = writeln!(
                        csv,
                        "{},{i},{e},{},{}",
                        r.timestamp,
                        u8::from(r.candidates.contains(&i)),
                        u8::from(r.confirmed.contains(&i))
                    );
                }
            }
            write(&out, "anomalies.json", &to_json(&reports)?)?;
            write(&out, "decisions.csv", &csv)?;
        }
        Command::Evaluate {
            config,
            methods,
            out,
            seed,
        } => {
            let mut cfg: PipelineConfig = read_json(&config).config()?;
            if let Some(s) = seed {
                cfg.scenario.seed = s;
            }
            cfg.validate().config()?;
            let report = run_pipeline(&cfg, methods.into()).pipeline()?;
            write(&out, "report.json", &to_json(&report)?)?;
            write(&out, "per_node_rmse.csv", &report.rmse_csv())?;
            write(&out, "confusion.csv", &report.confusion_csv())?;
            write(&out, "decisions.csv", &report.decisions_csv())?;
            // Wall-clock figures differ run to run; kept apart from the
            // reproducible artifacts.
            write(&out, "timings.txt", &report.runtime_text())?;
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_params(path: Option<&Path>) -> std::result::Result<EstimatorParams, Failure> {
    let params = match path {
        Some(p) => read_json(p).config()?,
        None => EstimatorParams::default(),
    };
    params.validate().config()?;
    Ok(params)
}

fn load_ranges(path: &Path) -> std::result::Result<Vec<RangeTable>, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .config()?;
    read_csv(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .config()
}

fn positions_csv(rows: &[(f64, Vec<Option<Point2>>)]) -> String {
    let mut out = String::from("timestamp_s,node,x_m,y_m\n");
    for (t, positions) in rows {
        for (i, p) in positions.iter().enumerate() {
            if let Some(p) = p {
                let _ = writeln!(out, "{t},{i},{},{}", p.x, p.y);
            }
        }
    }
    out
}

fn to_json<T: Serialize>(value: &T) -> std::result::Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(value).pipeline()?;
    s.push('\n');
    Ok(s)
}

fn write(dir: &Path, name: &str, contents: &str) -> std::result::Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .config()?;
    let path = dir.join(name);
    fs::write(&path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .config()
}
