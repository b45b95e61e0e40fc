//! Command-line front end. Exit codes: 0 success, 1 domain failure,
//! 2 input error, 3 I/O error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use plotters::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::controllers::{calibrate_setpoint, ControllerSpec, Phi, Scheme};
use crate::error::{Error, Result};
use crate::experiments::{
    load_network, run_gain_sensitivity, run_scenario, run_uncertainty_sweep, ScenarioConfig, SweepManifest,
    SweepOptions, SweepResult, DISRUPTION_START_MIN, DISRUPTION_WINDOW_MIN, SIX_REGION_TABLE_GAINS,
};
use crate::experiments::{congested_regions, BUNDLED_SCENARIOS};
use crate::model::{validate_network, validate_uncertainty, DEFAULT_GRID};
use crate::sim::{Quantity, SimTrace};
use crate::stability::{synthesize_gains, gain_margins, unit_xi, LipschitzData, LipschitzInterpretation, XiMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "MFDVAC_OUT";

#[derive(Debug, Parser)]
#[command(name = "mfdvac", version, about = "Admission control of multi-region MFD traffic networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InterpArg {
    Max,
    Congested,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum XiArg {
    FixedOne,
    CoordinateDescent,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a network file (or bundled id: six_region, twenty_region).
    Validate { config: String },
    /// Evaluate the per-region gain condition.
    Check {
        config: String,
        /// TOML file with `eta = [...]`, or the bundled id six_region_table.
        #[arg(long, conflicts_with = "synthesize")]
        gains: Option<String>,
        /// Synthesize the smallest admissible gains instead of reading them.
        #[arg(long)]
        synthesize: bool,
        #[arg(long, value_enum, default_value = "fixed-one")]
        xi_mode: XiArg,
        #[arg(long, value_enum, default_value = "max")]
        lipschitz_interpretation: InterpArg,
        /// Relative safety margin for synthesized gains.
        #[arg(long, default_value_t = 0.05)]
        margin: f64,
        /// Write the certificate as TOML.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute the admitted demand at a set-point and each scheme's constant.
    Calibrate {
        config: String,
        /// Comma-separated densities, veh/km.
        #[arg(long, value_delimiter = ',', required = true)]
        setpoints: Vec<f64>,
        #[arg(long)]
        gains: Option<String>,
        /// Emit constants even when some admitted demand is negative.
        #[arg(long)]
        allow_negative: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario and write CSV series, SVG plots and a manifest.
    Simulate {
        /// Scenario file or id: six-a, six-a-mixed, six-b, six-b-mixed, twenty,
        /// twenty-uncertain, montecarlo, sensitivity, or a bundled file id.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run count for montecarlo and sensitivity.
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Uncertainty sweep on the twenty-region network.
    Montecarlo {
        #[arg(long, default_value_t = 50)]
        runs: usize,
        /// Run the full 200-run sweep.
        #[arg(long)]
        full: bool,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random certified gains on the twenty-region network.
    Sensitivity {
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        margin_lo: f64,
        #[arg(long, default_value_t = 2.0)]
        margin_hi: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a series CSV (first column time) as an SVG line plot.
    Plot {
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        title: Option<String>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Structural(_) => EXIT_INPUT,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_DOMAIN,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_cli<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Validate { config } => cmd_validate(&config, out),
        Command::Check {
            config,
            gains,
            synthesize,
            xi_mode,
            lipschitz_interpretation,
            margin,
            out: path,
        } => cmd_check(
            &config,
            gains.as_deref(),
            synthesize,
            xi_mode,
            lipschitz_interpretation,
            margin,
            path.as_deref(),
            out,
        ),
        Command::Calibrate {
            config,
            setpoints,
            gains,
            allow_negative,
            out: path,
        } => cmd_calibrate(&config, &setpoints, gains.as_deref(), allow_negative, path.as_deref(), out),
        Command::Simulate {
            scenario,
            out: dir,
            runs,
            seed,
        } => cmd_simulate(&scenario, dir, runs, seed, out),
        Command::Montecarlo { runs, full, seed, out: dir } => {
            let n = if full { 200 } else { runs };
            cmd_montecarlo(n, seed, dir, out)
        }
        Command::Sensitivity {
            runs,
            seed,
            margin_lo,
            margin_hi,
            out: dir,
        } => cmd_sensitivity(runs, seed, (margin_lo, margin_hi), dir, out),
        Command::Plot { csv, out: path, title } => cmd_plot(&csv, path, title, out),
    }
}

fn emit(out: &mut dyn Write, text: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{text}").map_err(|e| Error::io("stdout", e))
}

pub fn cmd_validate(config: &str, out: &mut dyn Write) -> Result<i32> {
    let (cfg, net) = load_network(config, None)?;
    let mut report = validate_network(&net)?;
    for (i, d) in cfg.uncertainties(&net)?.iter().enumerate() {
        report.extend(&format!("region{}.", i + 1), validate_uncertainty(&net.regions[i], d, DEFAULT_GRID)?);
    }
    emit(out, &report)?;
    Ok(if report.pass() { EXIT_OK } else { EXIT_DOMAIN })
}

#[derive(Debug, Deserialize)]
struct GainsFile {
    eta: Vec<f64>,
}

fn load_gains(id_or_path: &str) -> Result<Vec<f64>> {
    let text = match id_or_path {
        "six_region_table" => SIX_REGION_TABLE_GAINS.to_string(),
        p => fs::read_to_string(p).map_err(|e| Error::Config {
            location: p.into(),
            message: e.to_string(),
        })?,
    };
    let g: GainsFile = toml::from_str(&text).map_err(|e| Error::Config {
        location: id_or_path.into(),
        message: e.message().to_string(),
    })?;
    Ok(g.eta)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_check(
    config: &str,
    gains: Option<&str>,
    synthesize: bool,
    xi_mode: XiArg,
    interp: InterpArg,
    margin: f64,
    cert_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32> {
    let (cfg, net) = load_network(config, None)?;
    let interp = match interp {
        InterpArg::Max => LipschitzInterpretation::Max,
        InterpArg::Congested => LipschitzInterpretation::Congested,
    };
    let lip = LipschitzData::from_network(&net, interp, cfg.lipschitz_d_frac);
    let mode = match xi_mode {
        XiArg::FixedOne => XiMode::FixedOne,
        XiArg::CoordinateDescent => XiMode::CoordinateDescent,
    };
    let (eta, xi) = match (gains, synthesize) {
        (Some(g), _) => {
            let xi = if mode == XiMode::FixedOne {
                unit_xi(net.n())
            } else {
                synthesize_gains(&net, &lip, mode, margin).xi
            };
            (load_gains(g)?, xi)
        }
        (None, true) => {
            let s = synthesize_gains(&net, &lip, mode, margin);
            if let Some(w) = &s.warning {
                emit(out, format!("warning: {w}"))?;
            }
            (s.eta, s.xi)
        }
        (None, false) => {
            return Err(Error::Config {
                location: "check".into(),
                message: "pass --gains FILE or --synthesize".into(),
            })
        }
    };
    let cert = gain_margins(&net, &lip, &eta, &xi)?;
    emit(out, format!("lipschitz interpretation: {interp:?}"))?;
    emit(out, &cert)?;
    if let Some(p) = cert_path {
        fs::write(p, cert.to_toml()).map_err(|e| Error::io(p.display().to_string(), e))?;
    }
    Ok(if cert.valid() { EXIT_OK } else { EXIT_DOMAIN })
}

#[derive(Debug, Serialize)]
struct CalibrationFile {
    setpoints: Vec<f64>,
    eta: Vec<f64>,
    u_star: Vec<f64>,
    proportional_c: Vec<f64>,
    prop_nonlinear_c: Vec<f64>,
    first_order_c: Vec<f64>,
    second_order_c: Vec<f64>,
}

pub fn cmd_calibrate(
    config: &str,
    setpoints: &[f64],
    gains: Option<&str>,
    allow_negative: bool,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32> {
    let (cfg, net) = load_network(config, None)?;
    if setpoints.len() != net.n() {
        return Err(Error::Config {
            location: "--setpoints".into(),
            message: format!("expected {} values, got {}", net.n(), setpoints.len()),
        });
    }
    let eta = match gains {
        Some(g) => load_gains(g)?,
        None => {
            let lip = LipschitzData::from_network(&net, LipschitzInterpretation::Max, cfg.lipschitz_d_frac);
            synthesize_gains(&net, &lip, XiMode::FixedOne, 0.05).eta
        }
    };
    if eta.len() != net.n() {
        return Err(Error::Config {
            location: "gains".into(),
            message: format!("expected {} gains, got {}", net.n(), eta.len()),
        });
    }
    let models = net.nominal_models();
    let family = |make: &dyn Fn(f64) -> Scheme| -> Result<Vec<f64>> {
        let specs: Vec<ControllerSpec> = eta.iter().map(|&e| ControllerSpec::new(make(e))).collect();
        Ok(calibrate_setpoint(&net, &models, setpoints, &specs, !allow_negative)?.c)
    };
    let proportional_c = family(&|eta| Scheme::Proportional { eta, c: 0.0 })?;
    let prop_nonlinear_c = family(&|eta| Scheme::PropNonlinear {
        eta,
        c: 0.0,
        phi: Phi::Cubic { coeff: 0.001 },
    })?;
    let first_order_c = family(&|eta| Scheme::FirstOrder {
        eta,
        gamma: eta / 2.0,
        tau: 0.01,
        c: 0.0,
    })?;
    let second_order_c = family(&|eta| Scheme::SecondOrder {
        eta,
        tau: 0.01,
        kappa: 0.003,
        c: 0.0,
    })?;
    let specs: Vec<ControllerSpec> = eta
        .iter()
        .map(|&eta| ControllerSpec::new(Scheme::Proportional { eta, c: 0.0 }))
        .collect();
    let u_star = calibrate_setpoint(&net, &models, setpoints, &specs, false)?.u_star;
    let file = CalibrationFile {
        setpoints: setpoints.to_vec(),
        eta,
        u_star,
        proportional_c,
        prop_nonlinear_c,
        first_order_c,
        second_order_c,
    };
    let text = toml::to_string(&file).expect("calibration serializes");
    match path {
        Some(p) => fs::write(p, &text).map_err(|e| Error::io(p.display().to_string(), e))?,
        None => emit(out, &text)?,
    }
    Ok(EXIT_OK)
}

/// Per-run record written next to simulation outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub scenario: String,
    pub config_hash: String,
    pub tool_version: String,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
    pub certificate: Option<String>,
    pub wall_clock_s: f64,
}

pub fn config_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn scenario_alias(name: &str) -> &str {
    match name {
        "six-a" => "six_case1_malfunction",
        "six-a-mixed" => "six_case2_malfunction",
        "six-b" => "six_case1_noise",
        "six-b-mixed" => "six_case2_noise",
        "twenty" => "twenty_nominal",
        "twenty-uncertain" => "twenty_uncertain",
        other => other,
    }
}

fn output_dir(explicit: Option<PathBuf>, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(name)
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], outputs: &mut Vec<String>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, bytes).map_err(|e| Error::io(p.display().to_string(), e))?;
    outputs.push(name.to_string());
    Ok(())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    Ok(buf)
}

fn plot_error(e: impl std::fmt::Display) -> Error {
    Error::io("svg", std::io::Error::other(e.to_string()))
}

/// Line plot of several series sharing one time axis.
pub fn line_plot_svg(title: &str, y_label: &str, t: &[f64], series: &[(String, Vec<f64>)]) -> Result<String> {
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (900, 500)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_error)?;
        let (t0, t1) = (
            t.first().copied().unwrap_or(0.0),
            t.last().copied().unwrap_or(1.0).max(t.first().copied().unwrap_or(0.0) + 1e-9),
        );
        let finite = series.iter().flat_map(|s| s.1.iter()).filter(|v| v.is_finite());
        let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-9 {
            hi = lo + 1.0;
        }
        let pad = 0.05 * (hi - lo);
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(60)
            .build_cartesian_2d(t0..t1, (lo - pad)..(hi + pad))
            .map_err(plot_error)?;
        chart
            .configure_mesh()
            .x_desc("t [min]")
            .y_desc(y_label)
            .draw()
            .map_err(plot_error)?;
        for (k, (name, ys)) in series.iter().enumerate() {
            let color = Palette99::pick(k).to_rgba();
            chart
                .draw_series(LineSeries::new(t.iter().copied().zip(ys.iter().copied()), color))
                .map_err(plot_error)?
                .label(name.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        if series.len() <= 20 {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(plot_error)?;
        }
        root.present().map_err(plot_error)?;
    }
    Ok(svg)
}

/// Time x region heat map with a linear grey-to-red scale.
pub fn heat_map_svg(title: &str, t: &[f64], values: &[Vec<f64>]) -> Result<String> {
    let mut svg = String::new();
    {
        let n = values.first().map(Vec::len).unwrap_or(0);
        let root = SVGBackend::with_string(&mut svg, (900, 500)).into_drawing_area();
        root.fill(&WHITE).map_err(plot_error)?;
        let t1 = t.last().copied().unwrap_or(1.0);
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..t1, 0.5..(n as f64 + 0.5))
            .map_err(plot_error)?;
        chart
            .configure_mesh()
            .disable_mesh()
            .x_desc("t [min]")
            .y_desc("region")
            .draw()
            .map_err(plot_error)?;
        let flat = values.iter().flatten().filter(|v| v.is_finite());
        let (lo, hi) = flat.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = (hi - lo).max(1e-12);
        let stride = (t.len() / 300).max(1);
        let cells = (0..t.len().saturating_sub(1)).step_by(stride).flat_map(|k| {
            let k1 = (k + stride).min(t.len() - 1);
            (0..n).map(move |i| {
                let s = ((values[k][i] - lo) / span).clamp(0.0, 1.0);
                let color = RGBColor(
                    (230.0 * s + 20.0) as u8,
                    (200.0 * (1.0 - s) + 20.0) as u8,
                    (200.0 * (1.0 - s) + 20.0) as u8,
                );
                Rectangle::new([(t[k], i as f64 + 0.5), (t[k1], i as f64 + 1.5)], color.filled())
            })
        });
        chart.draw_series(cells).map_err(plot_error)?;
        root.present().map_err(plot_error)?;
    }
    Ok(svg)
}

fn columns(trace: &SimTrace, q: Quantity) -> Vec<(String, Vec<f64>)> {
    (0..trace.n)
        .map(|i| (format!("{}_{}", q.name(), i + 1), trace.series(q).iter().map(|r| r[i]).collect()))
        .collect()
}

fn y_label(q: Quantity) -> &'static str {
    match q {
        Quantity::Rho => "density [veh/km]",
        Quantity::U => "admitted demand [veh/h]",
        Quantity::Speed => "speed [km/h]",
        Quantity::G => "outflow [veh/h]",
    }
}

pub fn cmd_simulate(
    scenario: &str,
    dir: Option<PathBuf>,
    runs: Option<usize>,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<i32> {
    match scenario {
        "montecarlo" => return cmd_montecarlo(runs.unwrap_or(50), seed.unwrap_or(2024), dir, out),
        "sensitivity" => return cmd_sensitivity(runs.unwrap_or(50), seed.unwrap_or(7), (0.0, 2.0), dir, out),
        _ => {}
    }
    let start = Instant::now();
    let (mut cfg, text, base) = ScenarioConfig::load(scenario_alias(scenario))?;
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    let run = run_scenario(&cfg, base.as_deref())?;
    let dir = output_dir(dir, &cfg.name);
    create_dir(&dir)?;
    let mut outputs = Vec::new();
    let t: Vec<f64> = run.trace.t_min().collect();
    for q in Quantity::ALL {
        let bytes = csv_bytes(|b| run.trace.write_quantity_csv(q, b))?;
        write_file(&dir, &format!("{}.csv", q.name()), &bytes, &mut outputs)?;
        let svg = line_plot_svg(&format!("{} {}", cfg.name, q.name()), y_label(q), &t, &columns(&run.trace, q))?;
        write_file(&dir, &format!("{}.svg", q.name()), svg.as_bytes(), &mut outputs)?;
    }
    let bytes = csv_bytes(|b| run.trace.write_csv(b))?;
    write_file(&dir, "trace.csv", &bytes, &mut outputs)?;
    let mut err_csv = String::from("t_min,e_max\n");
    for (t, e) in run.metrics.t_min.iter().zip(&run.metrics.e_max) {
        err_csv.push_str(&format!("{t},{e}\n"));
    }
    write_file(&dir, "error.csv", err_csv.as_bytes(), &mut outputs)?;
    let svg = line_plot_svg(
        &format!("{} worst deviation", cfg.name),
        "max |rho - rho*| [veh/km]",
        &t,
        &[("e_max".into(), run.metrics.e_max.clone())],
    )?;
    write_file(&dir, "error.svg", svg.as_bytes(), &mut outputs)?;
    if run.trace.n > 6 {
        let svg = heat_map_svg(&format!("{} log10 density error", cfg.name), &t, &run.metrics.log_error())?;
        write_file(&dir, "log_error_heatmap.svg", svg.as_bytes(), &mut outputs)?;
        let svg = heat_map_svg(&format!("{} speed", cfg.name), &t, &run.trace.speed)?;
        write_file(&dir, "speed_heatmap.svg", svg.as_bytes(), &mut outputs)?;
        let congested = congested_regions(
            &run.trace,
            &run.closed_loop.models,
            DISRUPTION_START_MIN,
            DISRUPTION_START_MIN + DISRUPTION_WINDOW_MIN,
        );
        emit(
            out,
            format!("congested during disruption: {:?}", congested.iter().map(|i| i + 1).collect::<Vec<_>>()),
        )?;
    }
    outputs.push("manifest.toml".into());
    let manifest = RunManifest {
        scenario: cfg.name.clone(),
        config_hash: config_hash(text.as_bytes()),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seeds: vec![cfg.sim.seed],
        outputs,
        certificate: None,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    let p = dir.join("manifest.toml");
    fs::write(&p, toml::to_string(&manifest).expect("manifest serializes"))
        .map_err(|e| Error::io(p.display().to_string(), e))?;
    emit(
        out,
        format!(
            "{}: {} samples, final max deviation {} veh/km, clamp events {}, written to {}",
            cfg.name,
            t.len(),
            run.metrics.e_max.last().copied().unwrap_or(0.0),
            run.trace.clamp_events.len(),
            dir.display()
        ),
    )?;
    Ok(EXIT_OK)
}

/// Per-run CSV: t_min, e_max, rho_1..rho_n.
fn run_csv(trace: &SimTrace, e_max: &[f64]) -> Vec<u8> {
    let mut s = String::from("t_min,e_max");
    for i in 1..=trace.n {
        s.push_str(&format!(",rho_{i}"));
    }
    s.push('\n');
    for ((t, e), row) in trace.t_min().zip(e_max).zip(&trace.rho) {
        s.push_str(&format!("{t},{e}"));
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s.into_bytes()
}

fn write_sweep(
    name: &str,
    hash_input: &str,
    sweep: &SweepResult,
    base_seed: u64,
    dir: &Path,
    start: Instant,
) -> Result<()> {
    create_dir(&dir.join("runs"))?;
    let mut outputs = Vec::new();
    let bytes = csv_bytes(|b| sweep.write_envelope_csv(b))?;
    write_file(dir, "envelope.csv", &bytes, &mut outputs)?;
    for (k, trace) in sweep.traces.iter().enumerate() {
        write_file(dir, &format!("runs/run_{k:03}.csv"), &run_csv(trace, &sweep.e_max[k]), &mut outputs)?;
    }
    let svg = line_plot_svg(
        &format!("{name} worst deviation over runs"),
        "e_sweep [veh/km]",
        &sweep.t_min,
        &[("e_sweep".into(), sweep.envelope.clone())],
    )?;
    write_file(dir, "envelope.svg", svg.as_bytes(), &mut outputs)?;
    outputs.push("manifest.toml".into());
    let manifest = SweepManifest {
        scenario: name.into(),
        config_hash: config_hash(hash_input.as_bytes()),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        base_seed,
        n_runs: sweep.runs.len(),
        check_min: sweep.check_min,
        envelope_at_check: sweep.envelope_at(sweep.check_min),
        flagged_runs: sweep.flagged.clone(),
        outputs,
        wall_clock_s: start.elapsed().as_secs_f64(),
        runs: sweep.runs.clone(),
    };
    let p = dir.join("manifest.toml");
    fs::write(&p, toml::to_string(&manifest).expect("manifest serializes")).map_err(|e| Error::io(p.display().to_string(), e))
}

fn bundled_text(id: &str) -> &'static str {
    BUNDLED_SCENARIOS.iter().find(|(k, _)| *k == id).map(|(_, v)| *v).unwrap_or("")
}

pub fn cmd_montecarlo(n_runs: usize, seed: u64, dir: Option<PathBuf>, out: &mut dyn Write) -> Result<i32> {
    let start = Instant::now();
    let opts = SweepOptions {
        n_runs,
        base_seed: seed,
        keep_traces: true,
        ..Default::default()
    };
    let sweep = run_uncertainty_sweep(&opts)?;
    let dir = output_dir(dir, "montecarlo");
    let hash_input = format!("{}\n{opts:?}", bundled_text("twenty_uncertain"));
    write_sweep("montecarlo", &hash_input, &sweep, seed, &dir, start)?;
    let env = sweep.envelope_at(opts.check_min);
    emit(
        out,
        format!(
            "montecarlo: {n_runs} runs, e_sweep({} min) = {env} veh/km, flagged runs {:?}, written to {}",
            opts.check_min,
            sweep.flagged,
            dir.display()
        ),
    )?;
    Ok(if sweep.flagged.is_empty() { EXIT_OK } else { EXIT_DOMAIN })
}

pub fn cmd_sensitivity(
    n_runs: usize,
    seed: u64,
    margin_range: (f64, f64),
    dir: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<i32> {
    let start = Instant::now();
    let result = run_gain_sensitivity(n_runs, seed, margin_range)?;
    let dir = output_dir(dir, "sensitivity");
    let hash_input = format!("{}\n{n_runs} {seed} {margin_range:?}", bundled_text("twenty_nominal"));
    write_sweep("sensitivity", &hash_input, &result.sweep, seed, &dir, start)?;
    let min_margin = result
        .certificates
        .iter()
        .map(|c| c.min_margin())
        .fold(f64::INFINITY, f64::min);
    emit(
        out,
        format!(
            "sensitivity: {n_runs} certified runs (smallest margin {min_margin}), e_sweep(55 min) = {} veh/km, written to {}",
            result.sweep.envelope_at(55.0),
            dir.display()
        ),
    )?;
    Ok(if result.sweep.flagged.is_empty() { EXIT_OK } else { EXIT_DOMAIN })
}

pub fn cmd_plot(csv_path: &Path, svg_path: Option<PathBuf>, title: Option<String>, out: &mut dyn Write) -> Result<i32> {
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(csv_path.display().to_string(), io),
        other => Error::Config {
            location: csv_path.display().to_string(),
            message: format!("{other:?}"),
        },
    })?;
    let bad = |m: String| Error::Config {
        location: csv_path.display().to_string(),
        message: m,
    };
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    if headers.len() < 2 {
        return Err(bad("need a time column and at least one series".into()));
    }
    let mut t = Vec::new();
    let mut series: Vec<(String, Vec<f64>)> = headers[1..].iter().map(|h| (h.clone(), Vec::new())).collect();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        t.push(parse(&rec[0])?);
        for (k, s) in series.iter_mut().enumerate() {
            s.1.push(parse(rec.get(k + 1).unwrap_or("nan")).unwrap_or(f64::NAN));
        }
    }
    let title = title.unwrap_or_else(|| csv_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
    let svg = line_plot_svg(&title, "", &t, &series)?;
    let target = svg_path.unwrap_or_else(|| csv_path.with_extension("svg"));
    fs::write(&target, svg).map_err(|e| Error::io(target.display().to_string(), e))?;
    emit(out, format!("wrote {}", target.display()))?;
    Ok(EXIT_OK)
}

/// Convenience for tests: runs the CLI and captures stdout and stderr.
pub fn run_capture<S: AsRef<str>>(args: &[S]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv: Vec<String> = std::iter::once("mfdvac".to_string())
        .chain(args.iter().map(|s| s.as_ref().to_string()))
        .collect();
    let code = run_cli(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&err).into_owned(),
    )
}
