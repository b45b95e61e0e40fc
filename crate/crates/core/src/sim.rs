//! Closed-loop integration of the regional density dynamics with one
//! controller per region and a schedule of disturbances.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controllers::{
    calibrate_setpoint, derivative_into, output_of, ControllerSpec, ControllerState, Phi, Scheme,
    StorageFn,
};
use crate::error::{Error, Result};
use crate::mfd::FlowModel;
use crate::model::{Network, UncertaintyFn};

/// One classical Runge-Kutta step of x' = f(t, x).
pub fn rk4_step(f: impl Fn(f64, &[f64], &mut [f64]), t: f64, x: &[f64], dt: f64) -> Vec<f64> {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    f(t, x, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    f(t + 0.5 * dt, &tmp, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    f(t + 0.5 * dt, &tmp, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    f(t + dt, &tmp, &mut k4);
    (0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Plant, controllers and the set-point they were calibrated for.
#[derive(Clone, Debug)]
pub struct ClosedLoop {
    pub net: Network,
    /// Plant flow models; may carry uncertainty unknown to the controllers.
    pub models: Vec<FlowModel>,
    pub controllers: Vec<ControllerSpec>,
    pub rho_star: Vec<f64>,
    pub u_star: Vec<f64>,
    pub equilibria: Vec<ControllerState>,
    pub storages: Option<Vec<StorageFn>>,
    inflows: Vec<Vec<(usize, f64)>>,
}

impl ClosedLoop {
    /// Calibrates against the nominal (d = 0) network. With `recalibrate`
    /// every controller constant c is replaced by its calibrated value.
    pub fn new(
        net: Network,
        models: Vec<FlowModel>,
        mut controllers: Vec<ControllerSpec>,
        rho_star: Vec<f64>,
        recalibrate: bool,
    ) -> Result<Self> {
        let n = net.n();
        if models.len() != n || controllers.len() != n || rho_star.len() != n {
            return Err(Error::Structural(
                "models, controllers and set-points must match the network size".into(),
            ));
        }
        for c in &controllers {
            c.validate()?;
        }
        let cal = calibrate_setpoint(&net, &net.nominal_models(), &rho_star, &controllers, false)?;
        if recalibrate {
            for (spec, &c) in controllers.iter_mut().zip(&cal.c) {
                spec.scheme.set_c(c);
            }
        }
        let equilibria = controllers
            .iter()
            .zip(rho_star.iter().zip(&cal.u_star))
            .map(|(s, (&r, &u))| s.equilibrium_state(r, u))
            .collect();
        let inflows = (0..n)
            .map(|i| net.predecessors(i).into_iter().map(|j| (j, net.w(j, i))).collect())
            .collect();
        Ok(ClosedLoop {
            net,
            models,
            controllers,
            rho_star,
            u_star: cal.u_star,
            equilibria,
            storages: None,
            inflows,
        })
    }

    pub fn with_storages(mut self, storages: Vec<StorageFn>) -> Self {
        self.storages = Some(storages);
        self
    }

    pub fn n(&self) -> usize {
        self.net.n()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.n() + 1);
        let mut k = self.n();
        for c in &self.controllers {
            off.push(k);
            k += c.dim();
        }
        off.push(k);
        off
    }

    fn rhs_into(&self, rho: &[f64], u: &[f64], out: &mut [f64]) {
        let g: Vec<f64> = self.models.iter().zip(rho).map(|(m, &r)| m.g(r)).collect();
        for i in 0..self.n() {
            let inflow: f64 = self.inflows[i].iter().map(|&(j, w)| w * g[j]).sum();
            out[i] = (-g[i] + inflow + u[i]) / self.net.regions[i].length_km;
        }
    }

    /// Rough fastest rate of the linearized loop, 1/h.
    pub fn fastest_rate(&self) -> f64 {
        let mut rate = 0.0f64;
        for (i, c) in self.controllers.iter().enumerate() {
            let p = &self.net.regions[i];
            let mut gain = c.scheme.eta();
            if let Scheme::PropNonlinear {
                phi: Phi::Cubic { coeff },
                ..
            } = &c.scheme
            {
                gain += 3.0 * coeff * p.jam_density * p.jam_density;
            }
            rate = rate.max((p.r() * p.lipschitz_f + gain) / p.length_km);
            match &c.scheme {
                Scheme::FirstOrder { tau, .. } => rate = rate.max(1.0 / tau),
                Scheme::SecondOrder { tau, kappa, .. } => rate = rate.max(1.0 / tau).max(1.0 / kappa),
                Scheme::BoundedFilter(b) => rate = rate.max(1.0 / b.t2).max(1.0 / b.t3),
                _ => {}
            }
            if let Some(int) = c.integrator {
                rate = rate.max((1.0 / (int.upsilon * p.length_km)).sqrt());
            }
        }
        rate
    }
}

/// Density derivative of the plant given densities and admitted demand.
pub fn plant_rhs(net: &Network, models: &[FlowModel], rho: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let n = net.n();
    if rho.len() != n || u.len() != n || models.len() != n {
        return Err(Error::Structural("plant vectors must match the network size".into()));
    }
    for (i, (&r, m)) in rho.iter().zip(models).enumerate() {
        if !(0.0..=m.region.jam_density).contains(&r) {
            return Err(Error::Integration {
                t_h: f64::NAN,
                reason: format!("density of region {} outside [0, rho_J]", i + 1),
                rho: rho.to_vec(),
            });
        }
    }
    let g: Vec<f64> = models.iter().zip(rho).map(|(m, &r)| m.g(r)).collect();
    Ok((0..n)
        .map(|i| {
            let inflow: f64 = net.predecessors(i).iter().map(|&j| net.w(j, i) * g[j]).sum();
            (-g[i] + inflow + u[i]) / net.regions[i].length_km
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    pub record_every: usize,
    pub seed: u64,
    pub initial_rho: Vec<f64>,
    pub initial_states: Option<Vec<ControllerState>>,
    /// Hold controller states while an override replaces their output.
    pub freeze_on_override: bool,
    pub track_lyapunov: bool,
}

impl SimConfig {
    pub fn new(dt: f64, t_end: f64, initial_rho: Vec<f64>) -> Self {
        SimConfig {
            dt,
            t_end,
            record_every: 1,
            seed: 0,
            initial_rho,
            initial_states: None,
            freeze_on_override: true,
            track_lyapunov: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    ControllerOverride { t0: f64, t1: f64, u_forced: Vec<f64> },
    AdherenceNoise { t0: f64, t1: f64, std_fraction: f64 },
    UncertaintySwap { at: f64, d: Vec<UncertaintyFn> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSchedule {
    pub events: Vec<Event>,
}

impl DisturbanceSchedule {
    pub fn validate(&self, n: usize, t_end: f64) -> Result<()> {
        let within = |t: f64| (0.0..=t_end * (1.0 + 1e-12)).contains(&t);
        for e in &self.events {
            match e {
                Event::ControllerOverride { t0, t1, u_forced } => {
                    if !(within(*t0) && within(*t1) && t0 <= t1) {
                        return Err(Error::Parameter(format!("override interval [{t0}, {t1}] outside run")));
                    }
                    if u_forced.len() != n || u_forced.iter().any(|&u| !(u >= 0.0)) {
                        return Err(Error::Parameter("override demand must be non-negative per region".into()));
                    }
                }
                Event::AdherenceNoise { t0, t1, std_fraction } => {
                    if !(within(*t0) && within(*t1) && t0 <= t1) || !(*std_fraction >= 0.0) {
                        return Err(Error::Parameter("invalid noise event".into()));
                    }
                }
                Event::UncertaintySwap { at, d } => {
                    if !within(*at) || d.len() != n {
                        return Err(Error::Parameter("invalid uncertainty swap".into()));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClampEvent {
    pub t: f64,
    pub region: usize,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimTrace {
    pub n: usize,
    /// Hours.
    pub t: Vec<f64>,
    pub rho: Vec<Vec<f64>>,
    /// Applied demand after saturation, noise and overrides.
    pub u: Vec<Vec<f64>>,
    pub speed: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
    pub lyapunov: Option<Vec<f64>>,
    pub saturated: Vec<Vec<bool>>,
    pub clamp_events: Vec<ClampEvent>,
    pub saturation_steps: Vec<usize>,
    pub final_rho: Vec<f64>,
    pub final_states: Vec<ControllerState>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantity {
    Rho,
    U,
    Speed,
    G,
}

impl Quantity {
    pub const ALL: [Quantity; 4] = [Quantity::Rho, Quantity::U, Quantity::Speed, Quantity::G];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::Rho => "rho",
            Quantity::U => "u",
            Quantity::Speed => "speed",
            Quantity::G => "g",
        }
    }
}

impl SimTrace {
    pub fn t_min(&self) -> impl Iterator<Item = f64> + '_ {
        self.t.iter().map(|t| t * 60.0)
    }

    pub fn series(&self, q: Quantity) -> &Vec<Vec<f64>> {
        match q {
            Quantity::Rho => &self.rho,
            Quantity::U => &self.u,
            Quantity::Speed => &self.speed,
            Quantity::G => &self.g,
        }
    }

    /// Index of the first sample at or after `t_min` minutes.
    pub fn index_at_min(&self, t_min: f64) -> usize {
        self.t.partition_point(|&t| t * 60.0 < t_min - 1e-9)
    }

    /// Full trace: t_min, rho_*, u_*, speed_*, g_*, lyapunov, sat_flags.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t_min".to_string()];
        for q in Quantity::ALL {
            header.extend((1..=self.n).map(|i| format!("{}_{i}", q.name())));
        }
        header.push("lyapunov".into());
        header.push("sat_flags".into());
        out.write_record(&header).map_err(csv_err)?;
        for (k, t) in self.t_min().enumerate() {
            let mut row = vec![t.to_string()];
            for q in Quantity::ALL {
                row.extend(self.series(q)[k].iter().map(|v| v.to_string()));
            }
            row.push(self.lyapunov.as_ref().map(|l| l[k].to_string()).unwrap_or_default());
            row.push(self.saturated[k].iter().map(|&s| if s { '1' } else { '0' }).collect());
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::io("csv", e))
    }

    /// One quantity: t_min, q_1..q_n.
    pub fn write_quantity_csv(&self, q: Quantity, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["t_min".to_string()];
        header.extend((1..=self.n).map(|i| format!("{}_{i}", q.name())));
        out.write_record(&header).map_err(csv_err)?;
        for (k, t) in self.t_min().enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(self.series(q)[k].iter().map(|v| v.to_string()));
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush().map_err(|e| Error::io("csv", e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::io("csv", std::io::Error::other(e.to_string()))
}

/// Per-step inputs held constant across the four stages.
struct StepInputs<'a> {
    forced: Option<&'a [f64]>,
    noise: Option<&'a [f64]>,
    freeze: bool,
}

struct Stepper<'a> {
    cl: &'a ClosedLoop,
    off: Vec<usize>,
}

impl Stepper<'_> {
    /// Applied demand and saturation flags for a full state vector.
    fn demand(&self, s: &[f64], inp: &StepInputs, u: &mut [f64], sat: &mut [bool]) {
        let n = self.cl.n();
        if let Some(f) = inp.forced {
            u.copy_from_slice(f);
            sat.iter_mut().for_each(|v| *v = false);
            return;
        }
        for i in 0..n {
            let spec = &self.cl.controllers[i];
            let x = &s[self.off[i]..self.off[i + 1]];
            let (v, hit) = spec.saturation.apply(output_of(spec, x, -s[i]));
            sat[i] = hit;
            u[i] = match inp.noise {
                Some(eps) => v * (1.0 + eps[i]),
                None => v,
            };
        }
    }

    fn deriv(&self, s: &[f64], inp: &StepInputs, out: &mut [f64]) {
        let n = self.cl.n();
        let mut u = vec![0.0; n];
        let mut sat = vec![false; n];
        self.demand(s, inp, &mut u, &mut sat);
        self.cl.rhs_into(&s[..n], &u, &mut out[..n]);
        for i in 0..n {
            let range = self.off[i]..self.off[i + 1];
            if inp.freeze && inp.forced.is_some() {
                out[range].iter_mut().for_each(|v| *v = 0.0);
            } else {
                derivative_into(&self.cl.controllers[i], &s[range.clone()], -s[i], &mut out[range]);
            }
        }
    }
}

/// Advances the joint state one RK4 step with demand inputs held fixed.
pub fn step_rk4(cl: &ClosedLoop, rho: &mut [f64], states: &mut [ControllerState], dt: f64) -> Result<()> {
    let stepper = Stepper { cl, off: cl.offsets() };
    let s = pack(rho, states);
    let inp = StepInputs {
        forced: None,
        noise: None,
        freeze: false,
    };
    let next = rk4_step(|_, x, dx| stepper.deriv(x, &inp, dx), 0.0, &s, dt);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration {
            t_h: f64::NAN,
            reason: "non-finite state".into(),
            rho: rho.to_vec(),
        });
    }
    unpack(&next, &stepper.off, rho, states);
    for (r, m) in rho.iter_mut().zip(&cl.models) {
        *r = r.clamp(0.0, m.region.jam_density);
    }
    Ok(())
}

fn pack(rho: &[f64], states: &[ControllerState]) -> Vec<f64> {
    let mut s = rho.to_vec();
    for st in states {
        s.extend_from_slice(&st.x);
    }
    s
}

fn unpack(s: &[f64], off: &[usize], rho: &mut [f64], states: &mut [ControllerState]) {
    let n = rho.len();
    rho.copy_from_slice(&s[..n]);
    for (i, st) in states.iter_mut().enumerate() {
        st.x.copy_from_slice(&s[off[i]..off[i + 1]]);
    }
}

pub const MAX_STEP_RATE: f64 = 0.1;

pub fn lyapunov_of(cl: &ClosedLoop, storages: &[StorageFn], rho: &[f64], x: &[&[f64]]) -> f64 {
    let plant: f64 = (0..cl.n())
        .map(|i| {
            let d = rho[i] - cl.rho_star[i];
            0.5 * cl.net.regions[i].length_km * d * d
        })
        .sum();
    let ctrl: f64 = (0..cl.n())
        .map(|i| storages[i].value(x[i], &cl.equilibria[i].x))
        .sum();
    plant + ctrl
}

pub fn run(cl: &ClosedLoop, config: &SimConfig, schedule: &DisturbanceSchedule) -> Result<SimTrace> {
    let n = cl.n();
    if !(config.dt > 0.0) || !(config.t_end >= config.dt) || config.record_every == 0 {
        return Err(Error::Parameter("need dt > 0, t_end >= dt, record_every >= 1".into()));
    }
    if config.initial_rho.len() != n {
        return Err(Error::Structural("initial density vector has wrong length".into()));
    }
    for (i, (&r, m)) in config.initial_rho.iter().zip(&cl.models).enumerate() {
        if !(0.0..=m.region.jam_density).contains(&r) {
            return Err(Error::Domain(format!("initial density of region {} outside [0, rho_J]", i + 1)));
        }
    }
    let ratio = config.dt * cl.fastest_rate();
    if ratio > MAX_STEP_RATE {
        return Err(Error::Parameter(format!(
            "dt = {} too large: dt * fastest rate = {ratio:.3} > {MAX_STEP_RATE}",
            config.dt
        )));
    }
    schedule.validate(n, config.t_end)?;
    if config.track_lyapunov && cl.storages.is_none() {
        return Err(Error::Unsupported("Lyapunov tracking needs registered storage functions".into()));
    }

    let mut plant = cl.clone();
    let mut states = match &config.initial_states {
        Some(s) if s.len() == n && s.iter().zip(&cl.controllers).all(|(st, c)| st.x.len() == c.dim()) => s.clone(),
        Some(_) => return Err(Error::Structural("initial controller states do not match schemes".into())),
        None => cl.equilibria.clone(),
    };
    let mut rho = config.initial_rho.clone();
    let steps = (config.t_end / config.dt).round() as usize;
    let step_of = |t: f64| (t / config.dt).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let capacity = steps / config.record_every + 2;
    let mut trace = SimTrace {
        n,
        t: Vec::with_capacity(capacity),
        rho: Vec::with_capacity(capacity),
        u: Vec::with_capacity(capacity),
        speed: Vec::with_capacity(capacity),
        g: Vec::with_capacity(capacity),
        lyapunov: config.track_lyapunov.then(Vec::new),
        saturated: Vec::with_capacity(capacity),
        clamp_events: Vec::new(),
        saturation_steps: vec![0; n],
        final_rho: Vec::new(),
        final_states: Vec::new(),
    };
    let off = cl.offsets();
    let mut eps = vec![0.0; n];
    let mut u = vec![0.0; n];
    let mut sat = vec![false; n];

    for k in 0..=steps {
        let t = k as f64 * config.dt;
        for e in &schedule.events {
            if let Event::UncertaintySwap { at, d } = e {
                if step_of(*at) == k {
                    for (m, di) in plant.models.iter_mut().zip(d) {
                        m.d = di.clone();
                    }
                }
            }
        }
        let forced = schedule.events.iter().find_map(|e| match e {
            Event::ControllerOverride { t0, t1, u_forced } if (step_of(*t0)..step_of(*t1)).contains(&k) => {
                Some(u_forced.as_slice())
            }
            _ => None,
        });
        let noise_std = schedule.events.iter().find_map(|e| match e {
            Event::AdherenceNoise { t0, t1, std_fraction } if (step_of(*t0)..step_of(*t1)).contains(&k) => {
                Some(*std_fraction)
            }
            _ => None,
        });
        if let Some(std) = noise_std {
            let a = std * 3f64.sqrt();
            for e in eps.iter_mut() {
                *e = if a > 0.0 { rng.gen_range(-a..=a) } else { 0.0 };
            }
        }
        let inp = StepInputs {
            forced,
            noise: noise_std.map(|_| eps.as_slice()),
            freeze: config.freeze_on_override,
        };
        let stepper = Stepper { cl: &plant, off: off.clone() };
        let s = pack(&rho, &states);
        stepper.demand(&s, &inp, &mut u, &mut sat);
        for i in 0..n {
            if sat[i] {
                trace.saturation_steps[i] += 1;
            }
        }
        if k % config.record_every == 0 || k == steps {
            trace.t.push(t);
            trace.rho.push(rho.clone());
            trace.u.push(u.clone());
            trace.speed.push(plant.models.iter().zip(&rho).map(|(m, &r)| m.speed_unchecked(r)).collect());
            trace.g.push(plant.models.iter().zip(&rho).map(|(m, &r)| m.g(r)).collect());
            trace.saturated.push(sat.clone());
            if let (Some(l), Some(st)) = (trace.lyapunov.as_mut(), cl.storages.as_ref()) {
                let xs: Vec<&[f64]> = states.iter().map(|s| s.x.as_slice()).collect();
                l.push(lyapunov_of(cl, st, &rho, &xs));
            }
        }
        if k == steps {
            break;
        }
        let next = rk4_step(|_, x, dx| stepper.deriv(x, &inp, dx), t, &s, config.dt);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                t_h: t,
                reason: "non-finite state".into(),
                rho: rho.clone(),
            });
        }
        unpack(&next, &off, &mut rho, &mut states);
        for (i, r) in rho.iter_mut().enumerate() {
            let jam = plant.models[i].region.jam_density;
            if *r < 0.0 || *r > jam {
                trace.clamp_events.push(ClampEvent {
                    t: t + config.dt,
                    region: i,
                    value: *r,
                });
                *r = r.clamp(0.0, jam);
            }
        }
    }
    trace.final_rho = rho;
    trace.final_states = states;
    Ok(trace)
}
