//! Decentralized stability margins, gain synthesis, passivity checks of the
//! linear controller parts and the closed-loop Lyapunov function.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::controllers::{BoundedFilter, ControllerState, Scheme, StorageFn};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::sim::{lyapunov_of, ClosedLoop};

pub const JACOBI_MAX_SWEEPS: usize = 100;
pub const JACOBI_TOL: f64 = 1e-12;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = a.len();
    if a.iter().any(|r| r.len() != n) {
        return Err(Error::Structural("matrix must be square".into()));
    }
    for i in 0..n {
        for j in 0..i {
            let s = a[i][j].abs().max(a[j][i].abs()).max(1.0);
            if (a[i][j] - a[j][i]).abs() > 1e-12 * s {
                return Err(Error::Structural("matrix must be symmetric".into()));
            }
        }
    }
    if n == 2 {
        let (p, q, r) = (a[0][0], a[0][1], a[1][1]);
        let mean = 0.5 * (p + r);
        let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
        return Ok(vec![mean - rad, mean + rad]);
    }
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let frob: f64 = m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOL * frob {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Which slope stands in for v^L in the margin condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzInterpretation {
    /// v^L = max(psi^f, congested slope), the Lipschitz constant of f.
    #[default]
    Max,
    /// v^L = congested-branch slope only.
    Congested,
}

/// Per-region v^L and v^{d,L}.
#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzData {
    pub v_l: Vec<f64>,
    pub v_dl: Vec<f64>,
}

impl LipschitzData {
    /// `d_frac`, when given, sets v^{d,L} = d_frac * v^L under the chosen
    /// interpretation; otherwise each region's declared v^{d,L} is used.
    pub fn from_network(net: &Network, interp: LipschitzInterpretation, d_frac: Option<f64>) -> Self {
        let v_l: Vec<f64> = net
            .regions
            .iter()
            .map(|p| match interp {
                LipschitzInterpretation::Max => p.lipschitz_f,
                LipschitzInterpretation::Congested => p.congested_slope(),
            })
            .collect();
        let v_dl = match d_frac {
            Some(f) => v_l.iter().map(|v| f * v).collect(),
            None => net.regions.iter().map(|p| p.lipschitz_d).collect(),
        };
        LipschitzData { v_l, v_dl }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeCoeff {
    pub from: usize,
    pub to: usize,
    pub value: f64,
}

/// a_ji = w_ji (r_j v^L_j + v^{d,L}_j) on every edge (j, i).
pub fn a_coefficients(net: &Network, lip: &LipschitzData) -> Vec<EdgeCoeff> {
    net.edges()
        .into_iter()
        .map(|(j, i)| EdgeCoeff {
            from: j,
            to: i,
            value: net.w(j, i) * (net.regions[j].r() * lip.v_l[j] + lip.v_dl[j]),
        })
        .collect()
}

/// Dense xi[j][i] for edge (j, i).
pub fn unit_xi(n: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0; n]; n]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCertificate {
    pub xi: Vec<EdgeCoeff>,
    pub eta: Vec<f64>,
    pub a: Vec<EdgeCoeff>,
    pub rhs: Vec<f64>,
    pub margins: Vec<f64>,
}

impl StabilityCertificate {
    pub fn valid(&self) -> bool {
        self.margins.iter().all(|&m| m > 0.0)
    }

    pub fn min_margin(&self) -> f64 {
        self.margins.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("certificate serializes")
    }
}

impl fmt::Display for StabilityCertificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "region        eta          rhs       margin")?;
        for i in 0..self.eta.len() {
            writeln!(
                f,
                "{:>6} {:>10.4} {:>12.4} {:>12.4}{}",
                i + 1,
                self.eta[i],
                self.rhs[i],
                self.margins[i],
                if self.margins[i] > 0.0 { "" } else { "  NEGATIVE" }
            )?;
        }
        write!(f, "certificate: {}", if self.valid() { "valid" } else { "invalid" })
    }
}

/// Right-hand side of the per-region gain condition.
pub fn gain_rhs(net: &Network, lip: &LipschitzData, xi: &[Vec<f64>]) -> Vec<f64> {
    let a = a_coefficients(net, lip);
    let mut rhs: Vec<f64> = (0..net.n())
        .map(|i| lip.v_dl[i] + net.regions[i].r() * lip.v_l[i])
        .collect();
    for e in &a {
        let x = xi[e.from][e.to];
        rhs[e.to] += e.value / (2.0 * x);
        rhs[e.from] += x * e.value / 2.0;
    }
    rhs
}

pub fn gain_margins(
    net: &Network,
    lip: &LipschitzData,
    eta: &[f64],
    xi: &[Vec<f64>],
) -> Result<StabilityCertificate> {
    let n = net.n();
    if eta.len() != n {
        return Err(Error::Structural(format!("eta has {} entries, expected {n}", eta.len())));
    }
    if eta.iter().any(|&e| !(e > 0.0)) {
        return Err(Error::Parameter("eta must be positive".into()));
    }
    let a = a_coefficients(net, lip);
    if a.iter().any(|e| !(xi[e.from][e.to] > 0.0)) {
        return Err(Error::Parameter("xi must be positive on every edge".into()));
    }
    let rhs = gain_rhs(net, lip, xi);
    Ok(StabilityCertificate {
        xi: a
            .iter()
            .map(|e| EdgeCoeff {
                from: e.from,
                to: e.to,
                value: xi[e.from][e.to],
            })
            .collect(),
        eta: eta.to_vec(),
        margins: eta.iter().zip(&rhs).map(|(e, r)| e - r).collect(),
        a,
        rhs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum XiMode {
    #[default]
    FixedOne,
    CoordinateDescent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthesis {
    pub eta: Vec<f64>,
    pub xi: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
    pub warning: Option<String>,
}

pub const DESCENT_MAX_ITERS: usize = 500;

/// Smallest gains (1 + safety_margin) * RHS_i(xi).
pub fn synthesize_gains(net: &Network, lip: &LipschitzData, mode: XiMode, safety_margin: f64) -> Synthesis {
    let n = net.n();
    let mut xi = unit_xi(n);
    let mut warning = None;
    if mode == XiMode::CoordinateDescent {
        let a = a_coefficients(net, lip);
        let max_of = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut best = max_of(&gain_rhs(net, lip, &xi));
        let mut converged = false;
        for _ in 0..DESCENT_MAX_ITERS {
            for e in &a {
                if e.value <= 0.0 {
                    continue;
                }
                // Balance region `to` (term a / 2xi) against region `from`
                // (term xi a / 2); the crossing minimizes their maximum.
                let rhs = gain_rhs(net, lip, &xi);
                let x = xi[e.from][e.to];
                let rest_to = rhs[e.to] - e.value / (2.0 * x);
                let rest_from = rhs[e.from] - x * e.value / 2.0;
                let diff = rest_to - rest_from;
                xi[e.from][e.to] = (diff + (diff * diff + e.value * e.value).sqrt()) / e.value;
            }
            let now = max_of(&gain_rhs(net, lip, &xi));
            let gain = best - now;
            best = best.min(now);
            if gain < 1e-6 {
                converged = true;
                break;
            }
        }
        if !converged {
            warning = Some("coordinate descent hit the iteration cap; using unit xi".into());
            xi = unit_xi(n);
        }
    }
    let rhs = gain_rhs(net, lip, &xi);
    Synthesis {
        eta: rhs.iter().map(|r| (1.0 + safety_margin) * r).collect(),
        xi,
        rhs,
        warning,
    }
}

/// Single-input single-output state-space model with at most two states.
#[derive(Clone, Debug, PartialEq)]
pub struct Lti {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: f64,
}

impl Lti {
    pub fn gain(d: f64) -> Self {
        Lti {
            a: vec![],
            b: vec![],
            c: vec![],
            d,
        }
    }

    /// Linear realization from input -rho to output u for the linear schemes.
    pub fn of_scheme(scheme: &Scheme) -> Result<Self> {
        match scheme {
            Scheme::Proportional { eta, .. } => Ok(Lti::gain(*eta)),
            Scheme::FirstOrder { eta, gamma, tau, .. } => Ok(Lti {
                a: vec![vec![-1.0 / tau]],
                b: vec![gamma / tau],
                c: vec![1.0],
                d: *eta,
            }),
            Scheme::SecondOrder { eta, tau, kappa, .. } => Ok(Lti {
                a: vec![vec![-1.0 / tau, 0.0], vec![1.0 / kappa, -1.0 / kappa]],
                b: vec![1.0 / tau, 0.0],
                c: vec![0.0, 1.0],
                d: *eta,
            }),
            other => Err(Error::Unsupported(format!("{} is not linear", other.name()))),
        }
    }

    fn check_dims(&self) -> Result<usize> {
        let n = self.a.len();
        if n > 2 || self.b.len() != n || self.c.len() != n || self.a.iter().any(|r| r.len() != n) {
            return Err(Error::Structural("state-space blocks must be consistent and at most 2x2".into()));
        }
        Ok(n)
    }

    pub fn is_hurwitz(&self) -> Result<bool> {
        Ok(match self.check_dims()? {
            0 => true,
            1 => self.a[0][0] < 0.0,
            _ => {
                let tr = self.a[0][0] + self.a[1][1];
                let det = self.a[0][0] * self.a[1][1] - self.a[0][1] * self.a[1][0];
                tr < 0.0 && det > 0.0
            }
        })
    }

    /// H(j omega) = D + C (j omega I - A)^{-1} B.
    pub fn response(&self, omega: f64) -> Complex64 {
        let s = Complex64::new(0.0, omega);
        match self.a.len() {
            0 => Complex64::new(self.d, 0.0),
            1 => self.d + self.c[0] * self.b[0] / (s - self.a[0][0]),
            _ => {
                let m00 = s - self.a[0][0];
                let m01 = Complex64::from(-self.a[0][1]);
                let m10 = Complex64::from(-self.a[1][0]);
                let m11 = s - self.a[1][1];
                let det = m00 * m11 - m01 * m10;
                let x0 = (m11 * self.b[0] - m01 * self.b[1]) / det;
                let x1 = (m00 * self.b[1] - m10 * self.b[0]) / det;
                self.d + self.c[0] * x0 + self.c[1] * x1
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PassivityMethod {
    FrequencySweep,
    KypCertificate,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PassivityReport {
    pub method: PassivityMethod,
    pub eta_achieved: f64,
    pub eta_required: f64,
    pub pass: bool,
    /// Frequency of the binding sample, rad/h (sweeps only).
    pub omega_worst: Option<f64>,
    /// Eigenvalues of M and of the assembled LMI (certificates only).
    pub m_eigenvalues: Vec<f64>,
    pub lmi_eigenvalues: Vec<f64>,
}

/// Log-spaced frequency grid.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp()).collect()
}

pub fn default_grid() -> Vec<f64> {
    log_grid(1e-3, 1e6, 2000)
}

/// Minimizes `f` over the grid, then refines every interior local minimum by
/// golden-section search in log-frequency.
fn sweep_min(f: impl Fn(f64) -> f64, grid: &[f64]) -> (f64, f64) {
    let vals: Vec<f64> = grid.iter().map(|&w| f(w)).collect();
    let mut best = (grid[0], vals[0]);
    for k in 0..grid.len() {
        if vals[k] < best.1 {
            best = (grid[k], vals[k]);
        }
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    for k in 1..grid.len().saturating_sub(1) {
        if vals[k] <= vals[k - 1] && vals[k] <= vals[k + 1] {
            let (mut a, mut b) = (grid[k - 1].ln(), grid[k + 1].ln());
            for _ in 0..80 {
                let c = b - inv_phi * (b - a);
                let d = a + inv_phi * (b - a);
                if f(c.exp()) < f(d.exp()) {
                    b = d;
                } else {
                    a = c;
                }
            }
            let w = (0.5 * (a + b)).exp();
            let v = f(w);
            if v < best.1 {
                best = (w, v);
            }
        }
    }
    best
}

/// Input-strict passivity excess as the minimum of Re H(j omega).
pub fn lti_passivity_frequency(sys: &Lti, eta_required: f64, omega_grid: &[f64]) -> Result<PassivityReport> {
    if !sys.is_hurwitz()? {
        return Err(Error::Unstable("A is not Hurwitz".into()));
    }
    if omega_grid.is_empty() {
        return Err(Error::Parameter("empty frequency grid".into()));
    }
    let (w, v) = sweep_min(|w| sys.response(w).re, omega_grid);
    let tol = 1e-9 * eta_required.abs().max(1e-300);
    Ok(PassivityReport {
        method: PassivityMethod::FrequencySweep,
        eta_achieved: v,
        eta_required,
        pass: v >= eta_required - tol,
        omega_worst: Some(w),
        m_eigenvalues: vec![],
        lmi_eigenvalues: vec![],
    })
}

/// Passivity excess of the bounded-filter scheme. The filter input p^c has
/// incremental gain at most gamma_c, so the filtered term is bounded by
/// gamma_c max|G(j omega)| and the excess is beta_c minus that bound.
pub fn bounded_filter_passivity(bf: &BoundedFilter, eta_required: f64, omega_grid: &[f64]) -> Result<PassivityReport> {
    if !(bf.t2 > 0.0 && bf.t3 > 0.0) {
        return Err(Error::Unstable("filter poles must be in the left half-plane".into()));
    }
    let mut grid = vec![0.0];
    grid.extend_from_slice(omega_grid);
    let (w, v) = sweep_min(|w| -bf.g_at(w).norm(), &grid);
    let eta = bf.beta_c - bf.gamma_c * (-v);
    let tol = 1e-9 * eta_required.abs().max(1e-300);
    Ok(PassivityReport {
        method: PassivityMethod::FrequencySweep,
        eta_achieved: eta,
        eta_required,
        pass: eta >= eta_required - tol && eta > 0.0,
        omega_worst: Some(w),
        m_eigenvalues: vec![],
        lmi_eigenvalues: vec![],
    })
}

/// Supply-rate weights on (input, output): Q input^2 + 2 S input output + R output^2.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Supply {
    pub q: f64,
    pub s: f64,
    pub r: f64,
}

impl Supply {
    /// input * output - eps * input^2.
    pub fn input_strict(eps: f64) -> Self {
        Supply { q: -eps, s: 0.5, r: 0.0 }
    }
}

/// Assembles the KYP matrix inequality for the storage x^T M x and supply
/// `supply`, and reports its eigenvalues.
pub fn kyp_lmi(sys: &Lti, m: &[Vec<f64>], supply: Supply) -> Result<Vec<Vec<f64>>> {
    let n = sys.check_dims()?;
    if m.len() != n || m.iter().any(|r| r.len() != n) {
        return Err(Error::Structural(format!("M must be {n}x{n}")));
    }
    let Supply { q, s, r } = supply;
    let mut lmi = vec![vec![0.0; n + 1]; n + 1];
    for i in 0..n {
        for j in 0..n {
            let atm: f64 = (0..n).map(|k| sys.a[k][i] * m[k][j]).sum();
            let ma: f64 = (0..n).map(|k| m[i][k] * sys.a[k][j]).sum();
            lmi[i][j] = atm + ma - r * sys.c[i] * sys.c[j];
        }
        let mb: f64 = (0..n).map(|k| m[i][k] * sys.b[k]).sum();
        let v = mb - s * sys.c[i] - r * sys.d * sys.c[i];
        lmi[i][n] = v;
        lmi[n][i] = v;
    }
    lmi[n][n] = -(q + 2.0 * s * sys.d + r * sys.d * sys.d);
    Ok(lmi)
}

pub fn kyp_verify(sys: &Lti, m: &[Vec<f64>], supply: Supply) -> Result<PassivityReport> {
    let lmi = kyp_lmi(sys, m, supply)?;
    let m_ev = if m.is_empty() { vec![] } else { symmetric_eigenvalues(m)? };
    let l_ev = symmetric_eigenvalues(&lmi)?;
    let m_pd = m_ev.iter().all(|&v| v > 0.0);
    let lmi_nd = l_ev.iter().all(|&v| v < 0.0);
    Ok(PassivityReport {
        method: PassivityMethod::KypCertificate,
        eta_achieved: -supply.q,
        eta_required: -supply.q,
        pass: m_pd && lmi_nd,
        omega_worst: None,
        m_eigenvalues: m_ev,
        lmi_eigenvalues: l_ev,
    })
}

/// Largest eps for which M certifies input-strict passivity with excess eps,
/// by bisection on the LMI (None if even eps = 0 fails).
pub fn kyp_max_excess(sys: &Lti, m: &[Vec<f64>]) -> Result<Option<f64>> {
    if !kyp_verify(sys, m, Supply::input_strict(0.0))?.pass {
        return Ok(None);
    }
    let mut lo = 0.0;
    let mut hi = sys.d.abs().max(1.0);
    while kyp_verify(sys, m, Supply::input_strict(hi))?.pass {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if kyp_verify(sys, m, Supply::input_strict(mid))?.pass {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(lo))
}

/// V = sum L_i / 2 (rho_i - rho*_i)^2 + sum V_i(x_i).
pub fn lyapunov_value(cl: &ClosedLoop, rho: &[f64], states: &[ControllerState]) -> Result<f64> {
    let storages: &[StorageFn] = cl
        .storages
        .as_deref()
        .ok_or_else(|| Error::Unsupported("closed loop has no registered storage functions".into()))?;
    if rho.len() != cl.n() || states.len() != cl.n() {
        return Err(Error::Structural("state vectors must match the network size".into()));
    }
    let xs: Vec<&[f64]> = states.iter().map(|s| s.x.as_slice()).collect();
    Ok(lyapunov_of(cl, storages, rho, &xs))
}
