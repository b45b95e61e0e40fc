//! Scenario files, error metrics and the benchmark experiments: the
//! six-region cases, the twenty-region case, the uncertainty sweep and the
//! gain-sensitivity sweep.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controllers::{BoundedFilter, ControllerSpec, Phi, Saturation, Scheme};
use crate::error::{Error, Result};
use crate::mfd::{gen_uncertainty, FlowModel};
use crate::model::{Network, NetworkConfig, UncertaintyEntry, UncertaintyFn, DEFAULT_GRID};
use crate::sim::{run, ClosedLoop, DisturbanceSchedule, Event, SimConfig, SimTrace, MAX_STEP_RATE};
use crate::stability::{
    bounded_filter_passivity, default_grid, lti_passivity_frequency, synthesize_gains, gain_margins, unit_xi,
    LipschitzData, LipschitzInterpretation, Lti, StabilityCertificate, XiMode,
};

pub const BUNDLED_NETWORKS: [(&str, &str); 2] = [
    ("six_region", include_str!("../fixtures/six_region.toml")),
    ("twenty_region", include_str!("../fixtures/twenty_region.toml")),
];

pub const BUNDLED_SCENARIOS: [(&str, &str); 6] = [
    ("six_case1_malfunction", include_str!("../fixtures/six_case1_malfunction.toml")),
    ("six_case2_malfunction", include_str!("../fixtures/six_case2_malfunction.toml")),
    ("six_case1_noise", include_str!("../fixtures/six_case1_noise.toml")),
    ("six_case2_noise", include_str!("../fixtures/six_case2_noise.toml")),
    ("twenty_nominal", include_str!("../fixtures/twenty_nominal.toml")),
    ("twenty_uncertain", include_str!("../fixtures/twenty_uncertain.toml")),
];

pub const SIX_REGION_TABLE_GAINS: &str = include_str!("../fixtures/six_region_table_gains.toml");

pub fn bundled_network(id: &str) -> Option<&'static str> {
    BUNDLED_NETWORKS.iter().find(|(k, _)| *k == id).map(|(_, v)| *v)
}

pub fn bundled_scenario(id: &str) -> Option<&'static str> {
    BUNDLED_SCENARIOS.iter().find(|(k, _)| *k == id).map(|(_, v)| *v)
}

/// Reads an input file; failures are input errors rather than I/O errors.
fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config {
        location: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Loads a network by bundled id or file path.
pub fn load_network(id_or_path: &str, base: Option<&Path>) -> Result<(NetworkConfig, Network)> {
    let text = match bundled_network(id_or_path) {
        Some(t) => t.to_string(),
        None => read_text(&resolve(id_or_path, base))?,
    };
    let cfg = NetworkConfig::parse(&text)?;
    let net = cfg.build()?;
    Ok((cfg, net))
}

fn resolve(p: &str, base: Option<&Path>) -> PathBuf {
    let path = PathBuf::from(p);
    match base {
        Some(b) if path.is_relative() => b.join(path),
        _ => path,
    }
}

/// A scalar broadcast to every region of a group, or one value per region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Param {
    One(f64),
    Many(Vec<f64>),
}

impl Param {
    fn get(&self, k: usize, name: &str) -> Result<f64> {
        match self {
            Param::One(v) => Ok(*v),
            Param::Many(v) => v.get(k).copied().ok_or_else(|| Error::Config {
                location: format!("controllers.{name}"),
                message: format!("missing entry {}", k + 1),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerGroup {
    /// 1-based region indices.
    pub regions: Vec<usize>,
    pub scheme: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_coeff: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upsilon: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_c: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_c: Option<Param>,
    #[serde(default, rename = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<Param>,
    #[serde(default, rename = "T1", skip_serializing_if = "Option::is_none")]
    pub t1: Option<Param>,
    #[serde(default, rename = "T2", skip_serializing_if = "Option::is_none")]
    pub t2: Option<Param>,
    #[serde(default, rename = "T3", skip_serializing_if = "Option::is_none")]
    pub t3: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_c_max: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_th1: Option<Param>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_th2: Option<Param>,
}

impl ControllerGroup {
    fn req(&self, p: &Option<Param>, name: &str, k: usize) -> Result<f64> {
        p.as_ref()
            .ok_or_else(|| Error::Config {
                location: format!("controllers ({})", self.scheme),
                message: format!("missing `{name}`"),
            })?
            .get(k, name)
    }

    fn scheme_for(&self, k: usize) -> Result<Scheme> {
        let c = match &self.c {
            Some(p) => p.get(k, "c")?,
            None => 0.0,
        };
        Ok(match self.scheme.as_str() {
            "proportional" => Scheme::Proportional {
                eta: self.req(&self.eta, "eta", k)?,
                c,
            },
            "prop_nonlinear" => Scheme::PropNonlinear {
                eta: self.req(&self.eta, "eta", k)?,
                c,
                phi: Phi::Cubic {
                    coeff: match &self.phi_coeff {
                        Some(p) => p.get(k, "phi_coeff")?,
                        None => 0.001,
                    },
                },
            },
            "first_order" => Scheme::FirstOrder {
                eta: self.req(&self.eta, "eta", k)?,
                gamma: self.req(&self.gamma, "gamma", k)?,
                tau: self.req(&self.tau, "tau", k)?,
                c,
            },
            "second_order" => Scheme::SecondOrder {
                eta: self.req(&self.eta, "eta", k)?,
                tau: self.req(&self.tau, "tau", k)?,
                kappa: self.req(&self.kappa, "kappa", k)?,
                c,
            },
            "bounded_filter" => Scheme::BoundedFilter(BoundedFilter {
                beta_c: self.req(&self.beta_c, "beta_c", k)?,
                gamma_c: self.req(&self.gamma_c, "gamma_c", k)?,
                k: self.req(&self.k, "K", k)?,
                t1: self.req(&self.t1, "T1", k)?,
                t2: self.req(&self.t2, "T2", k)?,
                t3: self.req(&self.t3, "T3", k)?,
                p_c_max: self.req(&self.p_c_max, "p_c_max", k)?,
                rho_th1: self.req(&self.rho_th1, "rho_th1", k)?,
                rho_th2: self.req(&self.rho_th2, "rho_th2", k)?,
                c,
            }),
            other => {
                return Err(Error::Config {
                    location: "controllers.scheme".into(),
                    message: format!("unknown scheme `{other}`"),
                })
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    #[default]
    Recalibrate,
    Printed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialSpec {
    /// "zero" or "setpoint".
    Named(String),
    Vector(Vec<f64>),
}

fn default_dt() -> f64 {
    1e-4
}
fn default_record() -> usize {
    10
}
fn default_true() -> bool {
    true
}
fn default_floor() -> f64 {
    0.0
}
fn default_initial() -> InitialSpec {
    InitialSpec::Named("zero".into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub horizon_min: f64,
    #[serde(default = "default_dt")]
    pub dt_h: f64,
    #[serde(default = "default_record")]
    pub record_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_initial")]
    pub initial: InitialSpec,
    /// Lower saturation of every controller output, veh/h; `-inf` disables it.
    #[serde(default = "default_floor")]
    pub u_floor: f64,
    #[serde(default = "default_true")]
    pub freeze_on_override: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisturbanceEntry {
    /// "override", "noise" or "uncertainty".
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<f64>>,
    /// Regions forced to their nominal capacity flow, zero elsewhere.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_regions: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entries: Vec<UncertaintyEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub network: String,
    pub setpoints: Vec<f64>,
    #[serde(default)]
    pub calibration: CalibrationMode,
    pub sim: SimSection,
    pub controllers: Vec<ControllerGroup>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub disturbances: Vec<DisturbanceEntry>,
}

/// Everything needed to call [`run`].
#[derive(Clone, Debug)]
pub struct BuiltScenario {
    pub closed_loop: ClosedLoop,
    pub config: SimConfig,
    pub schedule: DisturbanceSchedule,
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            location: e
                .span()
                .map(|s| format!("bytes {}..{}", s.start, s.end))
                .unwrap_or_else(|| "scenario".into()),
            message: e.message().to_string(),
        })
    }

    /// Loads a bundled scenario id or a file; returns the raw bytes as well.
    pub fn load(id_or_path: &str) -> Result<(Self, String, Option<PathBuf>)> {
        match bundled_scenario(id_or_path) {
            Some(t) => Ok((Self::parse(t)?, t.to_string(), None)),
            None => {
                let path = PathBuf::from(id_or_path);
                let text = read_text(&path)?;
                let base = path.parent().map(Path::to_path_buf);
                Ok((Self::parse(&text)?, text, base))
            }
        }
    }

    pub fn controller_specs(&self, n: usize) -> Result<Vec<ControllerSpec>> {
        let mut specs: Vec<Option<ControllerSpec>> = vec![None; n];
        let saturation = Saturation {
            lower: self.sim.u_floor,
            upper: f64::INFINITY,
        };
        for group in &self.controllers {
            for (k, &region) in group.regions.iter().enumerate() {
                if region == 0 || region > n {
                    return Err(Error::Config {
                        location: "controllers.regions".into(),
                        message: format!("region {region} out of range 1..={n}"),
                    });
                }
                if specs[region - 1].is_some() {
                    return Err(Error::Config {
                        location: "controllers.regions".into(),
                        message: format!("region {region} assigned twice"),
                    });
                }
                let mut spec = ControllerSpec::new(group.scheme_for(k)?).with_saturation(saturation);
                if let Some(u) = &group.upsilon {
                    spec = spec.with_integrator(u.get(k, "upsilon")?, self.setpoints[region - 1]);
                }
                specs[region - 1] = Some(spec);
            }
        }
        specs
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| Error::Config {
                    location: "controllers.regions".into(),
                    message: format!("region {} has no controller", i + 1),
                })
            })
            .collect()
    }

    pub fn build(&self, base: Option<&Path>) -> Result<BuiltScenario> {
        let (net_cfg, net) = load_network(&self.network, base)?;
        let n = net.n();
        if self.setpoints.len() != n {
            return Err(Error::Config {
                location: "setpoints".into(),
                message: format!("expected {n} set-points, got {}", self.setpoints.len()),
            });
        }
        let d = net_cfg.uncertainties(&net)?;
        let models: Vec<FlowModel> = net
            .regions
            .iter()
            .zip(d)
            .map(|(r, d)| FlowModel::new(r.clone(), d))
            .collect();
        let specs = self.controller_specs(n)?;
        let cl = ClosedLoop::new(
            net.clone(),
            models,
            specs,
            self.setpoints.clone(),
            self.calibration == CalibrationMode::Recalibrate,
        )?;
        let initial_rho = match &self.sim.initial {
            InitialSpec::Named(s) if s == "zero" => vec![0.0; n],
            InitialSpec::Named(s) if s == "setpoint" => self.setpoints.clone(),
            InitialSpec::Named(s) => {
                return Err(Error::Config {
                    location: "sim.initial".into(),
                    message: format!("unknown initial state `{s}`"),
                })
            }
            InitialSpec::Vector(v) => v.clone(),
        };
        let t_end = self.sim.horizon_min / 60.0;
        let mut config = SimConfig::new(self.sim.dt_h, t_end, initial_rho);
        config.record_every = self.sim.record_every;
        config.seed = self.sim.seed;
        config.freeze_on_override = self.sim.freeze_on_override;
        let mut schedule = DisturbanceSchedule::default();
        let minutes = |v: Option<f64>, what: &str| {
            v.map(|m| m / 60.0).ok_or_else(|| Error::Config {
                location: format!("disturbances.{what}"),
                message: "missing".into(),
            })
        };
        for e in &self.disturbances {
            let event = match e.kind.as_str() {
                "override" => {
                    let u = match (&e.u, &e.capacity_regions) {
                        (Some(u), _) => u.clone(),
                        (None, Some(regions)) => capacity_override(&net, regions)?,
                        (None, None) => {
                            return Err(Error::Config {
                                location: "disturbances".into(),
                                message: "override needs `u` or `capacity_regions`".into(),
                            })
                        }
                    };
                    Event::ControllerOverride {
                        t0: minutes(e.from_min, "from_min")?,
                        t1: minutes(e.to_min, "to_min")?,
                        u_forced: u,
                    }
                }
                "noise" => Event::AdherenceNoise {
                    t0: minutes(e.from_min, "from_min")?,
                    t1: minutes(e.to_min, "to_min")?,
                    std_fraction: e.std_fraction.unwrap_or(0.2),
                },
                "uncertainty" => {
                    let mut cfg = net_cfg.clone();
                    cfg.uncertainty = e.entries.clone();
                    Event::UncertaintySwap {
                        at: minutes(e.at_min.or(Some(0.0)), "at_min")?,
                        d: cfg.uncertainties(&net)?,
                    }
                }
                other => {
                    return Err(Error::Config {
                        location: "disturbances.kind".into(),
                        message: format!("unknown kind `{other}`"),
                    })
                }
            };
            schedule.events.push(event);
        }
        Ok(BuiltScenario {
            closed_loop: cl,
            config,
            schedule,
        })
    }
}

/// Nominal capacity max(r f) on the listed 1-based regions, zero elsewhere.
pub fn capacity_override(net: &Network, regions: &[usize]) -> Result<Vec<f64>> {
    let mut u = vec![0.0; net.n()];
    for &r in regions {
        if r == 0 || r > net.n() {
            return Err(Error::Config {
                location: "disturbances.capacity_regions".into(),
                message: format!("region {r} out of range"),
            });
        }
        u[r - 1] = FlowModel::nominal(net.regions[r - 1].clone()).capacity();
    }
    Ok(u)
}

/// Absolute density errors against a reference.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricSeries {
    pub t_min: Vec<f64>,
    pub reference: Vec<f64>,
    pub e_region: Vec<Vec<f64>>,
    pub e_max: Vec<f64>,
}

impl MetricSeries {
    pub fn new(trace: &SimTrace, reference: &[f64]) -> Self {
        let e_region: Vec<Vec<f64>> = trace
            .rho
            .iter()
            .map(|row| row.iter().zip(reference).map(|(r, s)| (r - s).abs()).collect())
            .collect();
        let e_max = e_region.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).collect();
        MetricSeries {
            t_min: trace.t_min().collect(),
            reference: reference.to_vec(),
            e_region,
            e_max,
        }
    }

    pub fn at(&self, t_min: f64) -> f64 {
        let k = self.t_min.partition_point(|&t| t < t_min - 1e-9);
        self.e_max[k.min(self.e_max.len() - 1)]
    }

    /// Largest e_max over samples with t in [from, to] minutes.
    pub fn max_between(&self, from: f64, to: f64) -> f64 {
        self.t_min
            .iter()
            .zip(&self.e_max)
            .filter(|(t, _)| **t >= from - 1e-9 && **t <= to + 1e-9)
            .map(|(_, e)| *e)
            .fold(0.0, f64::max)
    }

    /// Earliest time after which e_max stays below `bound` up to `until`.
    pub fn settle_time(&self, bound: f64, until: f64) -> Option<f64> {
        let mut last_bad = None;
        for (t, e) in self.t_min.iter().zip(&self.e_max) {
            if *t > until + 1e-9 {
                break;
            }
            if *e >= bound {
                last_bad = Some(*t);
            }
        }
        match last_bad {
            None => self.t_min.first().copied(),
            Some(t) => self.t_min.iter().copied().find(|&s| s > t),
        }
    }

    /// log10 of the per-region error, floored at 1e-12.
    pub fn log_error(&self) -> Vec<Vec<f64>> {
        self.e_region
            .iter()
            .map(|r| r.iter().map(|e| e.max(1e-12).log10()).collect())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub scenario: ScenarioConfig,
    pub closed_loop: ClosedLoop,
    pub trace: SimTrace,
    pub metrics: MetricSeries,
}

pub fn run_scenario(scenario: &ScenarioConfig, base: Option<&Path>) -> Result<ExperimentRun> {
    let built = scenario.build(base)?;
    let trace = run(&built.closed_loop, &built.config, &built.schedule)?;
    let metrics = MetricSeries::new(&trace, &built.closed_loop.rho_star);
    Ok(ExperimentRun {
        scenario: scenario.clone(),
        closed_loop: built.closed_loop,
        trace,
        metrics,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SixCase {
    Case1Uniform,
    Case2Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SixDisturbance {
    SignalMalfunction,
    NonAdherence,
}

pub fn six_region_scenario(case: SixCase, disturbance: SixDisturbance) -> ScenarioConfig {
    let id = match (case, disturbance) {
        (SixCase::Case1Uniform, SixDisturbance::SignalMalfunction) => "six_case1_malfunction",
        (SixCase::Case2Mixed, SixDisturbance::SignalMalfunction) => "six_case2_malfunction",
        (SixCase::Case1Uniform, SixDisturbance::NonAdherence) => "six_case1_noise",
        (SixCase::Case2Mixed, SixDisturbance::NonAdherence) => "six_case2_noise",
    };
    ScenarioConfig::parse(bundled_scenario(id).expect("bundled")).expect("bundled scenario parses")
}

pub fn run_six_region(case: SixCase, disturbance: SixDisturbance) -> Result<ExperimentRun> {
    run_scenario(&six_region_scenario(case, disturbance), None)
}

/// Regions whose density exceeds the maximizer of their g somewhere in
/// [from, to] minutes (0-based indices).
pub fn congested_regions(trace: &SimTrace, models: &[FlowModel], from: f64, to: f64) -> Vec<usize> {
    let crit: Vec<f64> = models.iter().map(|m| m.g_maximizer(DEFAULT_GRID)).collect();
    (0..trace.n)
        .filter(|&i| {
            trace
                .t_min()
                .zip(&trace.rho)
                .any(|(t, row)| t >= from - 1e-9 && t <= to + 1e-9 && row[i] > crit[i])
        })
        .collect()
}

/// Whether every region runs at or above `(1 - tol)` of its free-flow speed
/// at every sample from `from` minutes on.
pub fn free_flow_from(trace: &SimTrace, models: &[FlowModel], from: f64, tol: f64) -> bool {
    trace.t_min().zip(&trace.speed).filter(|(t, _)| *t >= from - 1e-9).all(|(_, row)| {
        row.iter()
            .zip(models)
            .all(|(v, m)| *v >= (1.0 - tol) * m.region.free_speed)
    })
}

#[derive(Clone, Debug)]
pub struct TwentyRegionRun {
    pub run: ExperimentRun,
    /// 0-based regions flagged congested between the override and +15 min.
    pub congested: Vec<usize>,
    /// Time x region matrices for heat maps.
    pub log_error: Vec<Vec<f64>>,
    pub speed: Vec<Vec<f64>>,
}

pub const DISRUPTION_START_MIN: f64 = 30.0;
pub const DISRUPTION_WINDOW_MIN: f64 = 15.0;

pub fn run_twenty_region() -> Result<TwentyRegionRun> {
    let scenario = ScenarioConfig::parse(bundled_scenario("twenty_nominal").expect("bundled"))?;
    let run = run_scenario(&scenario, None)?;
    let congested = congested_regions(
        &run.trace,
        &run.closed_loop.models,
        DISRUPTION_START_MIN,
        DISRUPTION_START_MIN + DISRUPTION_WINDOW_MIN,
    );
    Ok(TwentyRegionRun {
        log_error: run.metrics.log_error(),
        speed: run.trace.speed.clone(),
        congested,
        run,
    })
}

/// Closed-loop steady state under the plant's actual flow models. Regions
/// with an integrator settle at their target; the rest solve the flow
/// balance against their static output map by Newton iteration.
pub fn equilibrium_density(cl: &ClosedLoop) -> Result<Vec<f64>> {
    let n = cl.n();
    let free: Vec<usize> = (0..n).filter(|&i| cl.controllers[i].integrator.is_none()).collect();
    let mut rho = cl.rho_star.clone();
    for (i, c) in cl.controllers.iter().enumerate() {
        if let Some(int) = c.integrator {
            rho[i] = int.target;
        }
    }
    if free.is_empty() {
        return Ok(rho);
    }
    let bare: Vec<ControllerSpec> = cl
        .controllers
        .iter()
        .map(|c| ControllerSpec {
            integrator: None,
            ..c.clone()
        })
        .collect();
    let residual = |rho: &[f64]| -> Vec<f64> {
        let g: Vec<f64> = cl.models.iter().zip(rho).map(|(m, &r)| m.g(r)).collect();
        free.iter()
            .map(|&i| {
                let inflow: f64 = cl.net.predecessors(i).iter().map(|&j| cl.net.w(j, i) * g[j]).sum();
                let maps = crate::controllers::static_maps(&bare[i]).expect("no integrator");
                g[i] - inflow - maps.k_uy(-rho[i])
            })
            .collect()
    };
    let m = free.len();
    for _ in 0..100 {
        let r0 = residual(&rho);
        let norm = r0.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if norm < 1e-9 {
            return Ok(rho);
        }
        let mut jac = nalgebra::DMatrix::<f64>::zeros(m, m);
        for (col, &i) in free.iter().enumerate() {
            let h = 1e-6 * rho[i].abs().max(1.0);
            let mut probe = rho.clone();
            probe[i] += h;
            let r1 = residual(&probe);
            for row in 0..m {
                jac[(row, col)] = (r1[row] - r0[row]) / h;
            }
        }
        let rhs = nalgebra::DVector::from_iterator(m, r0.iter().map(|v| -v));
        let step = jac
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Domain("singular equilibrium Jacobian".into()))?;
        let mut lambda = 1.0;
        loop {
            let mut trial = rho.clone();
            for (k, &i) in free.iter().enumerate() {
                trial[i] = (rho[i] + lambda * step[k]).clamp(0.0, cl.models[i].region.jam_density);
            }
            let tn = residual(&trial).iter().map(|v| v.abs()).fold(0.0, f64::max);
            if tn < norm || lambda < 1e-6 {
                rho = trial;
                break;
            }
            lambda *= 0.5;
        }
    }
    Err(Error::Domain("equilibrium solve did not converge".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub index: usize,
    pub seed: u64,
    pub reference: Vec<f64>,
    pub e_at_check: f64,
    pub max_e_after_disruption: f64,
    pub diverged: bool,
    pub clamp_events: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub amplitudes: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub peak_fracs: Vec<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub eta: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_margin: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub t_min: Vec<f64>,
    pub envelope: Vec<f64>,
    pub e_max: Vec<Vec<f64>>,
    pub runs: Vec<RunSummary>,
    pub traces: Vec<SimTrace>,
    /// Indices of runs flagged as diverging.
    pub flagged: Vec<usize>,
    pub check_min: f64,
}

impl SweepResult {
    pub fn envelope_at(&self, t_min: f64) -> f64 {
        let k = self.t_min.partition_point(|&t| t < t_min - 1e-9);
        self.envelope[k.min(self.envelope.len() - 1)]
    }

    pub fn write_envelope_csv(&self, w: impl std::io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["t_min", "e_sweep"]).map_err(csv_err)?;
        for (t, e) in self.t_min.iter().zip(&self.envelope) {
            out.write_record([t.to_string(), e.to_string()]).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::io("envelope.csv", e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::io("csv", std::io::Error::other(e.to_string()))
}

/// Pointwise max over runs.
pub fn envelope(series: &[Vec<f64>]) -> Vec<f64> {
    let len = series.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|k| series.iter().map(|s| s[k]).fold(0.0, f64::max))
        .collect()
}

/// True when e_max rises at every sample across some 10-minute stretch.
pub fn diverging(t_min: &[f64], e_max: &[f64], span_min: f64) -> bool {
    let mut start = 0;
    for k in 1..e_max.len() {
        if e_max[k] <= e_max[k - 1] {
            start = k;
        } else if t_min[k] - t_min[start] >= span_min {
            return true;
        }
    }
    false
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub n_runs: usize,
    pub base_seed: u64,
    pub max_amplitude: f64,
    pub peak_frac_range: (f64, f64),
    pub check_min: f64,
    pub keep_traces: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            n_runs: 50,
            base_seed: 2024,
            max_amplitude: 500.0,
            peak_frac_range: (0.2, 0.3),
            check_min: 55.0,
            keep_traces: false,
        }
    }
}

fn summarize(index: usize, seed: u64, trace: &SimTrace, reference: Vec<f64>, check_min: f64) -> (RunSummary, MetricSeries) {
    let metrics = MetricSeries::new(trace, &reference);
    let summary = RunSummary {
        index,
        seed,
        e_at_check: metrics.at(check_min),
        max_e_after_disruption: metrics.max_between(DISRUPTION_START_MIN, f64::INFINITY),
        diverged: diverging(&metrics.t_min, &metrics.e_max, 10.0),
        clamp_events: trace.clamp_events.len(),
        reference,
        amplitudes: vec![],
        peak_fracs: vec![],
        eta: vec![],
        min_margin: None,
    };
    (summary, metrics)
}

fn collect(results: Vec<(RunSummary, MetricSeries, SimTrace)>, keep: bool, check_min: f64) -> SweepResult {
    let t_min = results.first().map(|r| r.1.t_min.clone()).unwrap_or_default();
    let e_max: Vec<Vec<f64>> = results.iter().map(|r| r.1.e_max.clone()).collect();
    let flagged = results.iter().filter(|r| r.0.diverged).map(|r| r.0.index).collect();
    let (runs, traces): (Vec<RunSummary>, Vec<SimTrace>) = results.into_iter().map(|r| (r.0, r.2)).unzip();
    SweepResult {
        envelope: envelope(&e_max),
        t_min,
        e_max,
        runs,
        traces: if keep { traces } else { vec![] },
        flagged,
        check_min,
    }
}

/// Repeats the twenty-region disruption with a fresh tent perturbation per
/// region and run, under fixed gains. Errors are measured against each
/// run's own closed-loop steady state.
pub fn run_uncertainty_sweep(opts: &SweepOptions) -> Result<SweepResult> {
    let scenario = ScenarioConfig::parse(bundled_scenario("twenty_uncertain").expect("bundled"))?;
    let built = scenario.build(None)?;
    let results: Result<Vec<_>> = (0..opts.n_runs)
        .into_par_iter()
        .map(|k| {
            let seed = opts.base_seed + k as u64;
            let mut cl = built.closed_loop.clone();
            let mut amplitudes = Vec::with_capacity(cl.n());
            let mut peaks = Vec::with_capacity(cl.n());
            for (i, m) in cl.models.iter_mut().enumerate() {
                let region_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                let d = gen_uncertainty(&m.region, region_seed, opts.max_amplitude, opts.peak_frac_range)?;
                if let UncertaintyFn::Tent { amplitude, peak_density, jam_density } = &d {
                    amplitudes.push(*amplitude);
                    peaks.push(peak_density / jam_density);
                } else {
                    amplitudes.push(0.0);
                    peaks.push(0.0);
                }
                m.d = d;
            }
            let reference = equilibrium_density(&cl)?;
            let mut config = built.config.clone();
            config.seed = seed;
            let trace = run(&cl, &config, &built.schedule)?;
            let (mut summary, metrics) = summarize(k, seed, &trace, reference, opts.check_min);
            summary.amplitudes = amplitudes;
            summary.peak_fracs = peaks;
            Ok((summary, metrics, trace))
        })
        .collect();
    Ok(collect(results?, opts.keep_traces, opts.check_min))
}

/// Per-region input-strict passivity excess of each controller.
pub fn passivity_indices(specs: &[ControllerSpec]) -> Result<Vec<f64>> {
    let grid = default_grid();
    specs
        .iter()
        .map(|s| match &s.scheme {
            Scheme::Proportional { eta, .. } | Scheme::PropNonlinear { eta, .. } | Scheme::FirstOrder { eta, .. } => {
                Ok(*eta)
            }
            Scheme::SecondOrder { .. } => {
                Ok(lti_passivity_frequency(&Lti::of_scheme(&s.scheme)?, 0.0, &grid)?.eta_achieved)
            }
            Scheme::BoundedFilter(b) => Ok(bounded_filter_passivity(b, 0.0, &grid)?.eta_achieved),
        })
        .collect()
}

/// Sets the supply gain of a scheme, keeping the first-order gamma = eta / 2
/// and bounded-filter beta_c = eta conventions.
pub fn with_eta(scheme: &Scheme, eta_new: f64) -> Scheme {
    let mut s = scheme.clone();
    match &mut s {
        Scheme::Proportional { eta, .. } | Scheme::PropNonlinear { eta, .. } | Scheme::SecondOrder { eta, .. } => {
            *eta = eta_new
        }
        Scheme::FirstOrder { eta, gamma, .. } => {
            *eta = eta_new;
            *gamma = eta_new / 2.0;
        }
        Scheme::BoundedFilter(b) => b.beta_c = eta_new,
    }
    s
}

pub const SENSITIVITY_BASE_MARGIN: f64 = 0.05;
pub const SENSITIVITY_MAX_REDRAWS: usize = 20;

#[derive(Clone, Debug)]
pub struct SensitivityResult {
    pub sweep: SweepResult,
    pub baseline_eta: Vec<f64>,
    pub certificates: Vec<StabilityCertificate>,
}

/// Twenty-region disruption with random gains drawn as
/// baseline * (1 + U[margin_range]), where the baseline is the synthesized
/// gain with a 5% safety margin. Every drawn set is certified before it runs.
pub fn run_gain_sensitivity(n_runs: usize, base_seed: u64, margin_range: (f64, f64)) -> Result<SensitivityResult> {
    let (lo, hi) = margin_range;
    if !(0.0 <= lo && lo <= hi) {
        return Err(Error::Parameter(format!("margin range ({lo}, {hi}) must satisfy 0 <= lo <= hi")));
    }
    let scenario = ScenarioConfig::parse(bundled_scenario("twenty_nominal").expect("bundled"))?;
    let built = scenario.build(None)?;
    let net = built.closed_loop.net.clone();
    let lip = LipschitzData::from_network(&net, LipschitzInterpretation::Max, None);
    let synth = synthesize_gains(&net, &lip, XiMode::FixedOne, SENSITIVITY_BASE_MARGIN);
    let baseline = synth.eta.clone();
    let xi = unit_xi(net.n());

    let results: Result<Vec<_>> = (0..n_runs)
        .into_par_iter()
        .map(|k| {
            let seed = base_seed + k as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..SENSITIVITY_MAX_REDRAWS {
                let etas: Vec<f64> = baseline
                    .iter()
                    .map(|b| b * (1.0 + if hi > lo { rng.gen_range(lo..hi) } else { lo }))
                    .collect();
                let specs: Vec<ControllerSpec> = built
                    .closed_loop
                    .controllers
                    .iter()
                    .zip(&etas)
                    .map(|(c, &e)| ControllerSpec {
                        scheme: with_eta(&c.scheme, e),
                        ..c.clone()
                    })
                    .collect();
                if specs.iter().any(|s| s.validate().is_err()) {
                    continue;
                }
                let indices = passivity_indices(&specs)?;
                let cert = gain_margins(&net, &lip, &indices, &xi)?;
                if !cert.valid() {
                    continue;
                }
                let cl = ClosedLoop::new(net.clone(), built.closed_loop.models.clone(), specs, scenario.setpoints.clone(), true)?;
                let mut config = built.config.clone();
                config.seed = seed;
                while config.dt * cl.fastest_rate() > MAX_STEP_RATE {
                    config.dt *= 0.5;
                    config.record_every *= 2;
                }
                let trace = run(&cl, &config, &built.schedule)?;
                let (mut summary, metrics) = summarize(k, seed, &trace, scenario.setpoints.clone(), 55.0);
                summary.eta = etas;
                summary.min_margin = Some(cert.min_margin());
                return Ok((summary, metrics, trace, cert));
            }
            Err(Error::Parameter(format!("run {k}: no certified gain draw in {SENSITIVITY_MAX_REDRAWS} tries")))
        })
        .collect();
    let results = results?;
    let certificates = results.iter().map(|r| r.3.clone()).collect();
    let sweep = collect(results.into_iter().map(|r| (r.0, r.1, r.2)).collect(), true, 55.0);
    Ok(SensitivityResult {
        sweep,
        baseline_eta: baseline,
        certificates,
    })
}

/// Structured description of a sweep for its run directory.
#[derive(Clone, Debug, Serialize)]
pub struct SweepManifest {
    pub scenario: String,
    pub config_hash: String,
    pub tool_version: String,
    pub base_seed: u64,
    pub n_runs: usize,
    pub check_min: f64,
    pub envelope_at_check: f64,
    pub flagged_runs: Vec<usize>,
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
    pub runs: Vec<RunSummary>,
}
