//! Vehicular admission control schemes. Every controller reads y = -rho of
//! its own region and returns the admitted demand u.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfd::FlowModel;
use crate::model::Network;
use crate::sim::rk4_step;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Phi {
    /// coeff * rho^3
    Cubic { coeff: f64 },
    /// Monotone table of (rho, phi) pairs, linearly interpolated.
    Table { points: Vec<(f64, f64)> },
}

impl Phi {
    pub fn eval(&self, rho: f64) -> f64 {
        match self {
            Phi::Cubic { coeff } => coeff * rho.powi(3),
            Phi::Table { points } => {
                let k = points.partition_point(|p| p.0 <= rho);
                if k == 0 {
                    points[0].1
                } else if k == points.len() {
                    points[k - 1].1
                } else {
                    let (x0, y0) = points[k - 1];
                    let (x1, y1) = points[k];
                    y0 + (y1 - y0) * (rho - x0) / (x1 - x0)
                }
            }
        }
    }
}

impl Default for Phi {
    fn default() -> Self {
        Phi::Cubic { coeff: 0.001 }
    }
}

/// Filtered bounded scheme: u = G(s)[p^c(rho)] - beta_c rho + c with
/// G(s) = K (1 + s T1) / ((1 + s T2)(1 + s T3)).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundedFilter {
    pub beta_c: f64,
    pub gamma_c: f64,
    pub k: f64,
    pub t1: f64,
    pub t2: f64,
    pub t3: f64,
    pub p_c_max: f64,
    pub rho_th1: f64,
    pub rho_th2: f64,
    pub c: f64,
}

impl BoundedFilter {
    pub fn p_c_min(&self) -> f64 {
        self.p_c_max - self.gamma_c * (self.rho_th2 - self.rho_th1)
    }

    /// Piecewise-linear, non-increasing pre-filter.
    pub fn p_c(&self, rho: f64) -> f64 {
        if rho < self.rho_th1 {
            self.p_c_max
        } else if rho < self.rho_th2 {
            self.p_c_max - self.gamma_c * (rho - self.rho_th1)
        } else {
            self.p_c_min()
        }
    }

    /// (a0, a1, b0, b1) of the controllable canonical realization
    /// x1' = x2, x2' = -a0 x1 - a1 x2 + p, u1 = b0 x1 + b1 x2.
    pub fn coefficients(&self) -> (f64, f64, f64, f64) {
        let a0 = 1.0 / (self.t2 * self.t3);
        let a1 = (self.t2 + self.t3) / (self.t2 * self.t3);
        (a0, a1, self.k * a0, self.k * self.t1 * a0)
    }

    pub fn g_at(&self, omega: f64) -> Complex64 {
        let s = Complex64::new(0.0, omega);
        self.k * (1.0 + s * self.t1) / ((1.0 + s * self.t2) * (1.0 + s * self.t3))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Scheme {
    /// u = c - eta rho
    Proportional { eta: f64, c: f64 },
    /// u = c - eta rho - phi(rho)
    PropNonlinear { eta: f64, c: f64, phi: Phi },
    /// tau x' = -(x - gamma (-rho) - c), u = x + eta (-rho)
    FirstOrder {
        eta: f64,
        gamma: f64,
        tau: f64,
        c: f64,
    },
    /// Two cascaded lags driven by -rho plus a direct term:
    /// u = x2 + eta (-rho) + c.
    SecondOrder {
        eta: f64,
        tau: f64,
        kappa: f64,
        c: f64,
    },
    BoundedFilter(BoundedFilter),
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Proportional { .. } => "proportional",
            Scheme::PropNonlinear { .. } => "prop_nonlinear",
            Scheme::FirstOrder { .. } => "first_order",
            Scheme::SecondOrder { .. } => "second_order",
            Scheme::BoundedFilter(_) => "bounded_filter",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Scheme::Proportional { .. } | Scheme::PropNonlinear { .. } => 0,
            Scheme::FirstOrder { .. } => 1,
            Scheme::SecondOrder { .. } | Scheme::BoundedFilter(_) => 2,
        }
    }

    pub fn c(&self) -> f64 {
        match self {
            Scheme::Proportional { c, .. }
            | Scheme::PropNonlinear { c, .. }
            | Scheme::FirstOrder { c, .. }
            | Scheme::SecondOrder { c, .. } => *c,
            Scheme::BoundedFilter(b) => b.c,
        }
    }

    pub fn set_c(&mut self, value: f64) {
        match self {
            Scheme::Proportional { c, .. }
            | Scheme::PropNonlinear { c, .. }
            | Scheme::FirstOrder { c, .. }
            | Scheme::SecondOrder { c, .. } => *c = value,
            Scheme::BoundedFilter(b) => b.c = value,
        }
    }

    /// The direct feedthrough / supply coefficient eta (beta_c for the
    /// bounded filter).
    pub fn eta(&self) -> f64 {
        match self {
            Scheme::Proportional { eta, .. }
            | Scheme::PropNonlinear { eta, .. }
            | Scheme::FirstOrder { eta, .. }
            | Scheme::SecondOrder { eta, .. } => *eta,
            Scheme::BoundedFilter(b) => b.beta_c,
        }
    }

    fn derivative(&self, x: &[f64], y: f64, dx: &mut [f64]) {
        match self {
            Scheme::Proportional { .. } | Scheme::PropNonlinear { .. } => {}
            Scheme::FirstOrder { gamma, tau, c, .. } => {
                dx[0] = -(x[0] - gamma * y - c) / tau;
            }
            Scheme::SecondOrder { tau, kappa, .. } => {
                dx[0] = (y - x[0]) / tau;
                dx[1] = (x[0] - x[1]) / kappa;
            }
            Scheme::BoundedFilter(b) => {
                let (a0, a1, _, _) = b.coefficients();
                dx[0] = x[1];
                dx[1] = -a0 * x[0] - a1 * x[1] + b.p_c(-y);
            }
        }
    }

    fn output(&self, x: &[f64], y: f64) -> f64 {
        match self {
            Scheme::Proportional { eta, c } => c + eta * y,
            Scheme::PropNonlinear { eta, c, phi } => c + eta * y - phi.eval(-y),
            Scheme::FirstOrder { eta, .. } => x[0] + eta * y,
            Scheme::SecondOrder { eta, c, .. } => x[1] + eta * y + c,
            Scheme::BoundedFilter(b) => {
                let (_, _, b0, b1) = b.coefficients();
                b0 * x[0] + b1 * x[1] + b.beta_c * y + b.c
            }
        }
    }

    /// Steady-state internal state under constant y.
    fn k_u(&self, y: f64) -> Vec<f64> {
        match self {
            Scheme::Proportional { .. } | Scheme::PropNonlinear { .. } => vec![],
            Scheme::FirstOrder { gamma, c, .. } => vec![gamma * y + c],
            Scheme::SecondOrder { .. } => vec![y, y],
            Scheme::BoundedFilter(b) => {
                let (a0, _, _, _) = b.coefficients();
                vec![b.p_c(-y) / a0, 0.0]
            }
        }
    }

    /// Constant c making the steady output at rho* equal to u*.
    pub fn calibrated_c(&self, rho_star: f64, u_star: f64) -> f64 {
        match self {
            Scheme::Proportional { eta, .. } => u_star + eta * rho_star,
            Scheme::PropNonlinear { eta, phi, .. } => u_star + eta * rho_star + phi.eval(rho_star),
            Scheme::FirstOrder { eta, gamma, .. } => u_star + (gamma + eta) * rho_star,
            Scheme::SecondOrder { eta, .. } => u_star + (1.0 + eta) * rho_star,
            Scheme::BoundedFilter(b) => u_star + b.beta_c * rho_star - b.k * b.p_c(rho_star),
        }
    }
}

/// Parallel integrator channel z' = (-rho + rho_target) / upsilon, u += z.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Integrator {
    pub upsilon: f64,
    pub target: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub lower: f64,
    pub upper: f64,
}

impl Default for Saturation {
    fn default() -> Self {
        Saturation {
            lower: 0.0,
            upper: f64::INFINITY,
        }
    }
}

impl Saturation {
    pub fn unbounded() -> Self {
        Saturation {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
        }
    }

    pub fn apply(&self, u: f64) -> (f64, bool) {
        let clamped = u.clamp(self.lower, self.upper);
        (clamped, clamped != u)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerSpec {
    pub scheme: Scheme,
    pub integrator: Option<Integrator>,
    pub saturation: Saturation,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    pub x: Vec<f64>,
}

impl ControllerSpec {
    pub fn new(scheme: Scheme) -> Self {
        ControllerSpec {
            scheme,
            integrator: None,
            saturation: Saturation::default(),
        }
    }

    pub fn with_integrator(mut self, upsilon: f64, target: f64) -> Self {
        self.integrator = Some(Integrator { upsilon, target });
        self
    }

    pub fn with_saturation(mut self, saturation: Saturation) -> Self {
        self.saturation = saturation;
        self
    }

    pub fn dim(&self) -> usize {
        self.scheme.dim() + usize::from(self.integrator.is_some())
    }

    /// Positivity of every gain and the bounded-filter gain condition
    /// gamma_c < beta_c / K.
    pub fn validate(&self) -> Result<()> {
        let positive: Vec<(&str, f64)> = match &self.scheme {
            Scheme::Proportional { eta, .. } => vec![("eta", *eta)],
            Scheme::PropNonlinear { eta, .. } => vec![("eta", *eta)],
            Scheme::FirstOrder { eta, gamma, tau, .. } => {
                vec![("eta", *eta), ("gamma", *gamma), ("tau", *tau)]
            }
            Scheme::SecondOrder { eta, tau, kappa, .. } => {
                vec![("eta", *eta), ("tau", *tau), ("kappa", *kappa)]
            }
            Scheme::BoundedFilter(b) => vec![
                ("beta_c", b.beta_c),
                ("gamma_c", b.gamma_c),
                ("K", b.k),
                ("T1", b.t1),
                ("T2", b.t2),
                ("T3", b.t3),
            ],
        };
        let mut all = positive;
        if let Some(int) = &self.integrator {
            all.push(("upsilon", int.upsilon));
        }
        for (name, v) in all {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!(
                    "{} gain {name} = {v} must be positive",
                    self.scheme.name()
                )));
            }
        }
        if let Scheme::BoundedFilter(b) = &self.scheme {
            if b.gamma_c >= b.beta_c / b.k {
                return Err(Error::Parameter(format!(
                    "bounded filter needs gamma_c < beta_c / K ({} >= {})",
                    b.gamma_c,
                    b.beta_c / b.k
                )));
            }
            if b.rho_th2 <= b.rho_th1 {
                return Err(Error::Parameter("rho_th2 must exceed rho_th1".into()));
            }
        }
        if self.saturation.lower > self.saturation.upper {
            return Err(Error::Parameter("saturation lower bound above upper".into()));
        }
        Ok(())
    }

    /// Internal state at the set-point rho* with steady output u*. The
    /// integrator state absorbs any mismatch between c and u*.
    pub fn equilibrium_state(&self, rho_star: f64, u_star: f64) -> ControllerState {
        let y = -rho_star;
        let mut x = self.scheme.k_u(y);
        if self.integrator.is_some() {
            let base = self.scheme.output(&x, y);
            x.push(u_star - base);
        }
        ControllerState { x }
    }

    /// Unsaturated output.
    pub fn raw_output(&self, state: &ControllerState, minus_rho: f64) -> f64 {
        let base = self.scheme.output(&state.x, minus_rho);
        match self.integrator {
            Some(_) => base + state.x[self.scheme.dim()],
            None => base,
        }
    }
}

pub fn controller_init(
    spec: &ControllerSpec,
    x0: Option<Vec<f64>>,
    rho_star: f64,
    u_star: f64,
) -> Result<ControllerState> {
    match x0 {
        Some(x) if x.len() != spec.dim() => Err(Error::Structural(format!(
            "{} state has dimension {}, got {}",
            spec.scheme.name(),
            spec.dim(),
            x.len()
        ))),
        Some(x) => Ok(ControllerState { x }),
        None => Ok(spec.equilibrium_state(rho_star, u_star)),
    }
}

pub fn controller_derivative(spec: &ControllerSpec, state: &ControllerState, minus_rho: f64) -> Vec<f64> {
    let mut dx = vec![0.0; spec.dim()];
    derivative_into(spec, &state.x, minus_rho, &mut dx);
    dx
}

pub(crate) fn derivative_into(spec: &ControllerSpec, x: &[f64], minus_rho: f64, dx: &mut [f64]) {
    let m = spec.scheme.dim();
    spec.scheme.derivative(&x[..m], minus_rho, &mut dx[..m]);
    if let Some(int) = &spec.integrator {
        dx[m] = (minus_rho + int.target) / int.upsilon;
    }
}

pub(crate) fn output_of(spec: &ControllerSpec, x: &[f64], minus_rho: f64) -> f64 {
    let m = spec.scheme.dim();
    let base = spec.scheme.output(&x[..m], minus_rho);
    match spec.integrator {
        Some(_) => base + x[m],
        None => base,
    }
}

/// Saturated output.
pub fn controller_output(spec: &ControllerSpec, state: &ControllerState, minus_rho: f64) -> f64 {
    spec.saturation.apply(spec.raw_output(state, minus_rho)).0
}

#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub u_star: Vec<f64>,
    pub c: Vec<f64>,
}

/// Admitted demand balancing the plant at rho*:
/// u*_i = g_i(rho*_i) - sum_{j in P_i} w_ji g_j(rho*_j).
pub fn setpoint_demand(net: &Network, models: &[FlowModel], rho_star: &[f64]) -> Result<Vec<f64>> {
    let n = net.n();
    if models.len() != n || rho_star.len() != n {
        return Err(Error::Structural("calibration vectors must match network size".into()));
    }
    for (i, (&r, m)) in rho_star.iter().zip(models).enumerate() {
        if !(r > 0.0 && r < m.region.jam_density) {
            return Err(Error::Domain(format!(
                "set-point {r} of region {} outside (0, {})",
                i + 1,
                m.region.jam_density
            )));
        }
    }
    let g: Vec<f64> = models.iter().zip(rho_star).map(|(m, &r)| m.g(r)).collect();
    Ok((0..n)
        .map(|i| {
            let inflow: f64 = net.predecessors(i).iter().map(|&j| net.w(j, i) * g[j]).sum();
            g[i] - inflow
        })
        .collect())
}

pub fn calibrate_setpoint(
    net: &Network,
    models: &[FlowModel],
    rho_star: &[f64],
    specs: &[ControllerSpec],
    strict_positive: bool,
) -> Result<Calibration> {
    let u_star = setpoint_demand(net, models, rho_star)?;
    if specs.len() != u_star.len() {
        return Err(Error::Structural("one controller per region required".into()));
    }
    if strict_positive {
        let bad: Vec<usize> = (0..u_star.len()).filter(|&i| u_star[i] < 0.0).map(|i| i + 1).collect();
        if !bad.is_empty() {
            return Err(Error::Infeasible(bad));
        }
    }
    let c = specs
        .iter()
        .zip(rho_star.iter().zip(&u_star))
        .map(|(s, (&r, &u))| s.scheme.calibrated_c(r, u))
        .collect();
    Ok(Calibration { u_star, c })
}

/// Closed-form constant-input characteristic maps.
#[derive(Clone, Copy, Debug)]
pub struct StaticMaps<'a> {
    spec: &'a ControllerSpec,
}

impl StaticMaps<'_> {
    pub fn k_u(&self, minus_rho: f64) -> Vec<f64> {
        self.spec.scheme.k_u(minus_rho)
    }

    pub fn k_uy(&self, minus_rho: f64) -> f64 {
        let x = self.spec.scheme.k_u(minus_rho);
        self.spec.saturation.apply(self.spec.scheme.output(&x, minus_rho)).0
    }
}

pub fn static_maps(spec: &ControllerSpec) -> Result<StaticMaps<'_>> {
    if spec.integrator.is_some() {
        return Err(Error::Unsupported(
            "integrator channel: constant-input steady state exists only at the target density".into(),
        ));
    }
    Ok(StaticMaps { spec })
}

/// Registered storage functions, all quadratic in the state offset.
#[derive(Clone, Debug, PartialEq)]
pub enum StorageFn {
    Stateless,
    /// tau / (2 gamma) (x - x*)^2
    FirstOrder { tau: f64, gamma: f64 },
    /// (x - x*)^T M (x - x*)
    Quadratic2 { m: [[f64; 2]; 2] },
    /// base + upsilon / 2 (z - z*)^2
    WithIntegrator { base: Box<StorageFn>, upsilon: f64 },
}

impl StorageFn {
    pub fn value(&self, x: &[f64], x_eq: &[f64]) -> f64 {
        match self {
            StorageFn::Stateless => 0.0,
            StorageFn::FirstOrder { tau, gamma } => {
                let dx = x[0] - x_eq[0];
                tau / (2.0 * gamma) * dx * dx
            }
            StorageFn::Quadratic2 { m } => {
                let d0 = x[0] - x_eq[0];
                let d1 = x[1] - x_eq[1];
                m[0][0] * d0 * d0 + 2.0 * m[0][1] * d0 * d1 + m[1][1] * d1 * d1
            }
            StorageFn::WithIntegrator { base, upsilon } => {
                let k = x.len() - 1;
                let dz = x[k] - x_eq[k];
                base.value(&x[..k], &x_eq[..k]) + 0.5 * upsilon * dz * dz
            }
        }
    }
}

/// Storage for a scheme. The second-order scheme needs a certificate M.
pub fn registered_storage(spec: &ControllerSpec, certificate: Option<[[f64; 2]; 2]>) -> Result<StorageFn> {
    let base = match (&spec.scheme, certificate) {
        (Scheme::Proportional { .. } | Scheme::PropNonlinear { .. }, _) => StorageFn::Stateless,
        (Scheme::FirstOrder { tau, gamma, .. }, _) => StorageFn::FirstOrder {
            tau: *tau,
            gamma: *gamma,
        },
        (Scheme::SecondOrder { .. }, Some(m)) => StorageFn::Quadratic2 { m },
        (Scheme::SecondOrder { .. }, None) => {
            return Err(Error::Unsupported("second-order storage needs a certificate M".into()))
        }
        (Scheme::BoundedFilter(_), _) => {
            return Err(Error::Unsupported("no storage registered for bounded_filter".into()))
        }
    };
    Ok(match spec.integrator {
        Some(int) => StorageFn::WithIntegrator {
            base: Box::new(base),
            upsilon: int.upsilon,
        },
        None => base,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSample {
    pub t: f64,
    pub minus_rho: f64,
    pub x: Vec<f64>,
    pub u: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControllerEquilibrium {
    pub x: Vec<f64>,
    pub minus_rho: f64,
    pub u: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub max_violation: f64,
    pub scale: f64,
    pub pass: bool,
}

/// Drives a controller open-loop with a prescribed density signal and
/// records unsaturated outputs.
pub fn drive_controller(
    spec: &ControllerSpec,
    x0: &[f64],
    rho: impl Fn(f64) -> f64,
    dt: f64,
    steps: usize,
) -> Vec<ProbeSample> {
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(steps + 1);
    let mut t = 0.0;
    let sample = |t: f64, x: &[f64]| {
        let y = -rho(t);
        ProbeSample {
            t,
            minus_rho: y,
            x: x.to_vec(),
            u: output_of(spec, x, y),
        }
    };
    out.push(sample(t, &x));
    for _ in 0..steps {
        x = rk4_step(
            |tt, xx, dx| derivative_into(spec, xx, -rho(tt), dx),
            t,
            &x,
            dt,
        );
        t += dt;
        out.push(sample(t, &x));
    }
    out
}

/// Checks V' <= (y - y*)(u - u*) - eta (rho - rho*)^2 along samples. V' is
/// the forward difference of V; the supply is averaged over each interval.
pub fn dissipation_probe(
    spec: &ControllerSpec,
    storage: &StorageFn,
    trajectory: &[ProbeSample],
    equilibrium: &ControllerEquilibrium,
    eta: f64,
    rel_tol: f64,
) -> Result<ProbeReport> {
    if matches!(spec.scheme, Scheme::BoundedFilter(_)) {
        return Err(Error::Unsupported("no storage registered for bounded_filter".into()));
    }
    let supply = |s: &ProbeSample| {
        let dy = s.minus_rho - equilibrium.minus_rho;
        dy * (s.u - equilibrium.u) - eta * dy * dy
    };
    let mut worst = f64::NEG_INFINITY;
    let mut scale = 0.0f64;
    for w in trajectory.windows(2) {
        let dt = w[1].t - w[0].t;
        let vdot = (storage.value(&w[1].x, &equilibrium.x) - storage.value(&w[0].x, &equilibrium.x)) / dt;
        let s0 = supply(&w[0]);
        let s1 = supply(&w[1]);
        scale = scale.max(s0.abs()).max(vdot.abs());
        worst = worst.max(vdot - 0.5 * (s0 + s1));
    }
    if trajectory.len() < 2 {
        worst = 0.0;
    }
    let scale = scale.max(f64::MIN_POSITIVE);
    Ok(ProbeReport {
        max_violation: worst,
        scale,
        pass: worst <= rel_tol * scale,
    })
}
