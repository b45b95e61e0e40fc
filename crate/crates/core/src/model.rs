//! Region parameters, split networks, uncertainty shapes and the checks of
//! the structural modelling assumptions.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mfd::{lipschitz_estimate, FlowModel};

/// Split entries below this are structural zeros.
pub const STRUCTURAL_ZERO: f64 = 1e-12;
pub const DEFAULT_GRID: usize = 1000;
pub const DEFAULT_ROW_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionParams {
    pub length_km: f64,
    pub trip_length_km: f64,
    pub free_speed: f64,
    pub critical_density: f64,
    pub jam_density: f64,
    pub lipschitz_f: f64,
    pub lipschitz_d: f64,
}

impl RegionParams {
    /// Builds a region with `lipschitz_f` set to the steeper triangular leg.
    pub fn triangular(
        length_km: f64,
        trip_length_km: f64,
        free_speed: f64,
        critical_density: f64,
        jam_density: f64,
        lipschitz_d: f64,
    ) -> Self {
        let mut p = RegionParams {
            length_km,
            trip_length_km,
            free_speed,
            critical_density,
            jam_density,
            lipschitz_f: 0.0,
            lipschitz_d,
        };
        p.lipschitz_f = p.free_speed.max(p.congested_slope());
        p
    }

    /// Trip completion ratio r = L / l.
    pub fn r(&self) -> f64 {
        self.length_km / self.trip_length_km
    }

    /// Magnitude of the slope of the congested triangular leg.
    pub fn congested_slope(&self) -> f64 {
        self.free_speed * self.critical_density / (self.jam_density - self.critical_density)
    }

    fn values(&self) -> [f64; 7] {
        [
            self.length_km,
            self.trip_length_km,
            self.free_speed,
            self.critical_density,
            self.jam_density,
            self.lipschitz_f,
            self.lipschitz_d,
        ]
    }

    fn sane(&self) -> bool {
        self.length_km > 0.0
            && self.trip_length_km > 0.0
            && self.free_speed > 0.0
            && self.critical_density > 0.0
            && self.critical_density < self.jam_density
            && self.lipschitz_d >= 0.0
            && self.r().is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub regions: Vec<RegionParams>,
    /// Row i holds the outflow shares of region i; the diagonal is the
    /// trip-completion share.
    pub split: Vec<Vec<f64>>,
    pub row_sum_tol: f64,
}

impl Network {
    pub fn new(regions: Vec<RegionParams>, split: Vec<Vec<f64>>) -> Result<Self> {
        let n = regions.len();
        if n == 0 {
            return Err(Error::Structural("network has no regions".into()));
        }
        if split.len() != n || split.iter().any(|row| row.len() != n) {
            return Err(Error::Structural(format!(
                "split matrix must be {n}x{n}"
            )));
        }
        if split.iter().flatten().any(|w| !w.is_finite())
            || regions.iter().flat_map(|r| r.values()).any(|v| v.is_nan())
        {
            return Err(Error::Structural("NaN or infinite parameter".into()));
        }
        Ok(Network {
            regions,
            split,
            row_sum_tol: DEFAULT_ROW_TOL,
        })
    }

    pub fn with_row_sum_tol(mut self, tol: f64) -> Self {
        self.row_sum_tol = tol;
        self
    }

    pub fn n(&self) -> usize {
        self.regions.len()
    }

    pub fn w(&self, i: usize, j: usize) -> f64 {
        self.split[i][j]
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.split[i][j] > STRUCTURAL_ZERO
    }

    /// Directed edges (i, j), i != j, with w_ij > 0.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.has_edge(i, j))
            .collect()
    }

    /// P_i: regions sending flow into i.
    pub fn predecessors(&self, i: usize) -> Vec<usize> {
        (0..self.n()).filter(|&j| self.has_edge(j, i)).collect()
    }

    /// S_i: regions receiving flow from i.
    pub fn successors(&self, i: usize) -> Vec<usize> {
        (0..self.n()).filter(|&j| self.has_edge(i, j)).collect()
    }

    pub fn row_residuals(&self) -> Vec<f64> {
        self.split
            .iter()
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .collect()
    }

    /// Regions not reachable from region 0 in the undirected closure.
    pub fn unreachable(&self) -> Vec<usize> {
        let n = self.n();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if !seen[j] && (self.has_edge(i, j) || self.has_edge(j, i)) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        (0..n).filter(|&i| !seen[i]).collect()
    }

    pub fn nominal_models(&self) -> Vec<FlowModel> {
        self.regions.iter().cloned().map(FlowModel::nominal).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UncertaintyFn {
    Zero,
    /// A min(rho / rho_p, (rho_J - rho) / (rho_J - rho_p)) on [0, rho_J].
    Tent {
        amplitude: f64,
        peak_density: f64,
        jam_density: f64,
    },
    /// Linear interpolation between (density, flow) samples, held flat
    /// outside the sampled range.
    Tabulated { points: Vec<(f64, f64)> },
}

impl UncertaintyFn {
    pub fn tent(amplitude: f64, peak_density: f64, jam_density: f64) -> Self {
        UncertaintyFn::Tent {
            amplitude,
            peak_density,
            jam_density,
        }
    }

    pub fn eval(&self, rho: f64) -> f64 {
        match self {
            UncertaintyFn::Zero => 0.0,
            UncertaintyFn::Tent {
                amplitude,
                peak_density,
                jam_density,
            } => {
                if rho <= 0.0 || rho >= *jam_density {
                    return 0.0;
                }
                let up = rho / peak_density;
                let down = (jam_density - rho) / (jam_density - peak_density);
                amplitude * up.min(down)
            }
            UncertaintyFn::Tabulated { points } => interpolate(points, rho),
        }
    }

    pub fn amplitude(&self) -> f64 {
        match self {
            UncertaintyFn::Zero => 0.0,
            UncertaintyFn::Tent { amplitude, .. } => *amplitude,
            UncertaintyFn::Tabulated { points } => {
                points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max)
            }
        }
    }

    /// Parses two-column numeric text (density, flow), one pair per line.
    pub fn from_table_text(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .flexible(true)
            .from_reader(text.as_bytes());
        let mut points = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Config {
                location: format!("table line {}", line + 1),
                message: e.to_string(),
            })?;
            let fields: Vec<&str> = if rec.len() == 1 {
                rec[0].split_whitespace().collect()
            } else {
                rec.iter().collect()
            };
            if fields.len() != 2 {
                return Err(Error::Config {
                    location: format!("table line {}", line + 1),
                    message: "expected two columns".into(),
                });
            }
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|e| Error::Config {
                    location: format!("table line {}", line + 1),
                    message: e.to_string(),
                })
            };
            points.push((parse(fields[0])?, parse(fields[1])?));
        }
        if points.len() < 2 || points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::Parameter(
                "tabulated uncertainty needs at least two strictly increasing densities".into(),
            ));
        }
        Ok(UncertaintyFn::Tabulated { points })
    }
}

fn interpolate(points: &[(f64, f64)], x: f64) -> f64 {
    let k = points.partition_point(|p| p.0 <= x);
    if k == 0 {
        return points[0].1;
    }
    if k == points.len() {
        return points[k - 1].1;
    }
    let (x0, y0) = points[k - 1];
    let (x1, y1) = points[k];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    /// Advisory checks are reported but do not decide the verdict.
    pub gating: bool,
    pub offending: Vec<usize>,
    /// Worst-case value of the checked quantity.
    pub worst: f64,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass || !c.gating)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn push(&mut self, name: &str, offending: Vec<usize>, worst: f64, detail: String) {
        self.checks.push(Check {
            name: name.into(),
            pass: offending.is_empty(),
            gating: true,
            offending,
            worst,
            detail,
        });
    }

    pub fn extend(&mut self, prefix: &str, other: ValidationReport) {
        for mut c in other.checks {
            c.name = format!("{prefix}{}", c.name);
            self.checks.push(c);
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = match (c.pass, c.gating) {
                (true, _) => "pass",
                (false, true) => "FAIL",
                (false, false) => "note",
            };
            let regions: Vec<usize> = c.offending.iter().map(|i| i + 1).collect();
            write!(f, "{status:4}  {:<28} worst={}", c.name, c.worst)?;
            if !regions.is_empty() {
                write!(f, " regions={regions:?}")?;
            }
            if !c.detail.is_empty() {
                write!(f, "  {}", c.detail)?;
            }
            writeln!(f)?;
        }
        write!(f, "verdict: {}", if self.pass() { "pass" } else { "fail" })
    }
}

pub fn validate_network(net: &Network) -> Result<ValidationReport> {
    if net.n() == 0 {
        return Err(Error::Structural("network has no regions".into()));
    }
    let mut report = ValidationReport::default();

    let residuals = net.row_residuals();
    let bad_rows: Vec<usize> = (0..net.n())
        .filter(|&i| residuals[i] > net.row_sum_tol)
        .collect();
    let bad_entries: Vec<usize> = (0..net.n())
        .filter(|&i| net.split[i].iter().any(|&w| !(0.0..=1.0).contains(&w)))
        .collect();
    let worst = residuals.iter().cloned().fold(0.0, f64::max);
    report.push(
        "split_row_sums",
        bad_rows,
        worst,
        format!("tolerance {}", net.row_sum_tol),
    );
    report.push("split_entries_in_unit_interval", bad_entries, 0.0, String::new());

    let unreachable = net.unreachable();
    let detail = if net.edges().is_empty() && net.n() > 1 {
        "no inter-regional edges".to_string()
    } else {
        String::new()
    };
    report.push(
        "weak_connectivity",
        unreachable.clone(),
        unreachable.len() as f64,
        detail,
    );

    let insane: Vec<usize> = (0..net.n()).filter(|&i| !net.regions[i].sane()).collect();
    report.push("region_parameters", insane, 0.0, String::new());

    let mut slack_worst = f64::INFINITY;
    let mut loose = Vec::new();
    for (i, region) in net.regions.iter().enumerate() {
        if !region.sane() {
            continue;
        }
        let model = FlowModel::nominal(region.clone());
        let est = lipschitz_estimate(|x| model.f(x), 0.0, region.jam_density, DEFAULT_GRID);
        let slack = region.lipschitz_f - est;
        slack_worst = slack_worst.min(slack);
        if slack < -1e-9 * est.max(1.0) {
            loose.push(i);
        }
    }
    report.push(
        "lipschitz_f_bound",
        loose,
        slack_worst,
        "declared minus sampled slope".into(),
    );
    Ok(report)
}

pub fn validate_uncertainty(
    region: &RegionParams,
    d: &UncertaintyFn,
    grid_n: usize,
) -> Result<ValidationReport> {
    if grid_n < 100 {
        return Err(Error::Parameter(format!("grid_n = {grid_n} < 100")));
    }
    if let UncertaintyFn::Tent {
        amplitude,
        peak_density,
        jam_density,
    } = d
    {
        if *amplitude < 0.0 || amplitude.is_nan() {
            return Err(Error::Parameter(format!("negative amplitude {amplitude}")));
        }
        if !(*peak_density > 0.0 && peak_density < jam_density) {
            return Err(Error::Parameter(format!(
                "tent peak {peak_density} outside (0, {jam_density})"
            )));
        }
    }
    let model = FlowModel::new(region.clone(), d.clone());
    let rho_j = region.jam_density;
    let h = rho_j / (grid_n - 1) as f64;
    let g: Vec<f64> = (0..grid_n).map(|k| model.g(k as f64 * h)).collect();
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut report = ValidationReport::default();

    let (kmin, gmin) = g
        .iter()
        .cloned()
        .enumerate()
        .fold((0, f64::INFINITY), |a, (k, v)| if v < a.1 { (k, v) } else { a });
    let offending = if gmin < -1e-9 * scale { vec![kmin] } else { vec![] };
    report.push(
        "nonnegative_total_flow",
        offending,
        gmin,
        "min of r f + d over grid".into(),
    );

    let lip = lipschitz_estimate(|x| d.eval(x), 0.0, rho_j, grid_n);
    report.checks.push(Check {
        name: "lipschitz_d_declared".into(),
        pass: lip <= region.lipschitz_d * (1.0 + 1e-9),
        gating: false,
        offending: vec![],
        worst: lip,
        detail: format!("declared {}", region.lipschitz_d),
    });

    let second: Vec<f64> = g.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect();
    let smax = second.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bumps: Vec<usize> = second
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 1e-9 * scale)
        .map(|(k, _)| k + 1)
        .collect();
    report.push(
        "concave_total_flow",
        bumps,
        smax,
        "max second difference".into(),
    );

    let gmax = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let top: Vec<usize> = (0..grid_n)
        .filter(|&k| g[k] >= gmax - 1e-12 * scale)
        .collect();
    let unique = top.len() == 1 || (top.len() == 2 && top[1] == top[0] + 1);
    report.push(
        "unique_maximum",
        if unique { vec![] } else { top.clone() },
        top.len() as f64,
        "grid cells attaining the max".into(),
    );
    Ok(report)
}

/// On-disk network description; field names follow [`RegionParams`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub length_km: Vec<f64>,
    pub trip_length_km: Vec<f64>,
    pub free_speed: Vec<f64>,
    pub critical_density: Vec<f64>,
    pub jam_density: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_f: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_d: Option<Vec<f64>>,
    /// v^{d,L} as a fraction of v^L when no explicit vector is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_d_frac: Option<f64>,
    pub split: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_sum_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub uncertainty: Vec<UncertaintyEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintyEntry {
    /// 1-based region index.
    pub region: usize,
    pub kind: String,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default)]
    pub peak_frac: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<String>,
}

impl NetworkConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            location: e
                .span()
                .map(|s| format!("bytes {}..{}", s.start, s.end))
                .unwrap_or_else(|| "network".into()),
            message: e.message().to_string(),
        })
    }

    pub fn build(&self) -> Result<Network> {
        let n = self.length_km.len();
        let columns = [
            ("trip_length_km", self.trip_length_km.len()),
            ("free_speed", self.free_speed.len()),
            ("critical_density", self.critical_density.len()),
            ("jam_density", self.jam_density.len()),
        ];
        for (name, len) in columns {
            if len != n {
                return Err(Error::Structural(format!(
                    "{name} has {len} entries, expected {n}"
                )));
            }
        }
        let scale = self.split_scale.unwrap_or(1.0);
        let split: Vec<Vec<f64>> = self
            .split
            .iter()
            .map(|row| row.iter().map(|w| w * scale).collect())
            .collect();
        let mut regions = Vec::with_capacity(n);
        for i in 0..n {
            let mut p = RegionParams::triangular(
                self.length_km[i],
                self.trip_length_km[i],
                self.free_speed[i],
                self.critical_density[i],
                self.jam_density[i],
                0.0,
            );
            if let Some(v) = &self.lipschitz_f {
                p.lipschitz_f = *v.get(i).ok_or_else(|| {
                    Error::Structural(format!("lipschitz_f missing entry {}", i + 1))
                })?;
            }
            p.lipschitz_d = match (&self.lipschitz_d, self.lipschitz_d_frac) {
                (Some(v), _) => *v.get(i).ok_or_else(|| {
                    Error::Structural(format!("lipschitz_d missing entry {}", i + 1))
                })?,
                (None, Some(frac)) => frac * p.lipschitz_f,
                (None, None) => 0.0,
            };
            regions.push(p);
        }
        let net = Network::new(regions, split)?;
        Ok(match self.row_sum_tol {
            Some(tol) => net.with_row_sum_tol(tol),
            None => net,
        })
    }

    /// Per-region uncertainty functions declared in the file (zero elsewhere).
    pub fn uncertainties(&self, net: &Network) -> Result<Vec<UncertaintyFn>> {
        let mut out = vec![UncertaintyFn::Zero; net.n()];
        for e in &self.uncertainty {
            if e.region == 0 || e.region > net.n() {
                return Err(Error::Structural(format!(
                    "uncertainty region {} out of range",
                    e.region
                )));
            }
            let jam = net.regions[e.region - 1].jam_density;
            out[e.region - 1] = match e.kind.as_str() {
                "zero" => UncertaintyFn::Zero,
                "tent" => {
                    if e.amplitude < 0.0 {
                        return Err(Error::Parameter(format!(
                            "negative amplitude {} in region {}",
                            e.amplitude, e.region
                        )));
                    }
                    UncertaintyFn::tent(e.amplitude, e.peak_frac * jam, jam)
                }
                "tabulated" => {
                    let text = e.table.as_deref().ok_or_else(|| {
                        Error::Structural("tabulated uncertainty needs `table`".into())
                    })?;
                    UncertaintyFn::from_table_text(text)?
                }
                other => {
                    return Err(Error::Config {
                        location: format!("uncertainty region {}", e.region),
                        message: format!("unknown kind `{other}`"),
                    })
                }
            };
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(l: f64, trip: f64, psi: f64, crit: f64, jam: f64) -> RegionParams {
        RegionParams::triangular(l, trip, psi, crit, jam, 0.0)
    }

    fn six() -> (NetworkConfig, Network) {
        let cfg = NetworkConfig::parse(include_str!("../fixtures/six_region.toml")).unwrap();
        let net = cfg.build().unwrap();
        (cfg, net)
    }

    #[test]
    fn region_derived_quantities() {
        let p = region(1.2, 0.6, 30.0, 26.3, 118.0);
        assert_eq!(p.r(), 2.0);
        let slope = 30.0 * 26.3 / (118.0 - 26.3);
        assert!((p.congested_slope() - slope).abs() < 1e-12);
        assert_eq!(p.lipschitz_f, 30.0);
        // steep congested leg dominates when rho_C > rho_J / 2
        let q = region(1.0, 0.5, 20.0, 60.0, 80.0);
        assert!((q.lipschitz_f - 60.0).abs() < 1e-12);
    }

    #[test]
    fn six_region_fixture_loads() {
        let (cfg, net) = six();
        assert_eq!(net.n(), 6);
        assert_eq!(cfg.name.as_deref(), Some("six_region"));
        assert!((net.regions[3].lipschitz_d - 0.2 * 34.0).abs() < 1e-12);
        assert_eq!(net.w(0, 4), 0.25);
        assert!(validate_network(&net).unwrap().pass());
    }

    #[test]
    fn neighbour_sets_exclude_diagonal() {
        let (_, net) = six();
        assert_eq!(net.predecessors(0), vec![1, 4, 5]);
        assert_eq!(net.successors(0), vec![1, 4, 5]);
        assert!(!net.has_edge(0, 0));
        assert!(net.edges().iter().all(|(a, b)| a != b));
    }

    #[test]
    fn perturbed_row_is_named() {
        let (_, mut net) = six();
        net.split[2][3] += 0.01;
        let report = validate_network(&net).unwrap();
        assert!(!report.pass());
        let c = report.check("split_row_sums").unwrap();
        assert_eq!(c.offending, vec![2]);
        assert!((c.worst - 0.01).abs() < 1e-12);
    }

    #[test]
    fn negative_split_entry_rejected() {
        let (_, mut net) = six();
        net.split[0][0] = -0.25;
        net.split[0][1] = 0.75;
        let report = validate_network(&net).unwrap();
        assert_eq!(report.check("split_entries_in_unit_interval").unwrap().offending, vec![0]);
    }

    #[test]
    fn disconnected_network_fails_connectivity() {
        let p = region(1.0, 0.5, 30.0, 25.0, 100.0);
        let net = Network::new(
            vec![p.clone(), p.clone(), p],
            vec![vec![0.5, 0.5, 0.0], vec![0.5, 0.5, 0.0], vec![0.0, 0.0, 1.0]],
        )
        .unwrap();
        let report = validate_network(&net).unwrap();
        assert!(!report.pass());
        assert_eq!(report.check("weak_connectivity").unwrap().offending, vec![2]);
    }

    #[test]
    fn inconsistent_shapes_are_structural_errors() {
        let p = region(1.0, 0.5, 30.0, 25.0, 100.0);
        assert!(matches!(
            Network::new(vec![p.clone(), p], vec![vec![1.0, 0.0]]),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn tent_shape() {
        let d = UncertaintyFn::tent(300.0, 25.0, 100.0);
        assert_eq!(d.eval(0.0), 0.0);
        assert_eq!(d.eval(100.0), 0.0);
        assert_eq!(d.eval(25.0), 300.0);
        assert!((d.eval(12.5) - 150.0).abs() < 1e-12);
        assert!((d.eval(62.5) - 150.0).abs() < 1e-12);
        assert_eq!(d.amplitude(), 300.0);
    }

    #[test]
    fn table_text_parses_and_interpolates() {
        let d = UncertaintyFn::from_table_text("# rho, d\n0, 0\n10 50\n20, 0\n").unwrap();
        assert_eq!(d.eval(5.0), 25.0);
        assert_eq!(d.eval(15.0), 25.0);
        assert_eq!(d.eval(30.0), 0.0);
        assert!(UncertaintyFn::from_table_text("0 0\n0 1\n").is_err());
        assert!(matches!(UncertaintyFn::from_table_text("0 0 0\n"), Err(Error::Config { .. })));
    }

    #[test]
    fn admissible_tent_passes_uncertainty_checks() {
        let mut p = region(1.0, 0.5, 30.0, 25.0, 100.0);
        p.lipschitz_d = 20.0;
        let d = UncertaintyFn::tent(400.0, 25.0, 100.0);
        let report = validate_uncertainty(&p, &d, DEFAULT_GRID).unwrap();
        assert!(report.pass(), "{report}");
        assert!(report.check("lipschitz_d_declared").unwrap().pass);
    }

    #[test]
    fn steep_tent_only_notes_declared_bound() {
        let mut p = region(1.0, 0.5, 30.0, 25.0, 100.0);
        p.lipschitz_d = 1.0;
        let d = UncertaintyFn::tent(400.0, 25.0, 100.0);
        let report = validate_uncertainty(&p, &d, DEFAULT_GRID).unwrap();
        let c = report.check("lipschitz_d_declared").unwrap();
        assert!(!c.pass && !c.gating);
        assert!((c.worst - 16.0).abs() < 0.1);
        assert!(report.pass());
    }

    #[test]
    fn negative_flow_and_bump_fail() {
        let p = region(1.0, 0.5, 30.0, 25.0, 100.0);
        let dip = UncertaintyFn::Tabulated {
            points: vec![(0.0, 0.0), (5.0, -2000.0), (10.0, 0.0)],
        };
        let report = validate_uncertainty(&p, &dip, DEFAULT_GRID).unwrap();
        assert!(!report.check("nonnegative_total_flow").unwrap().pass);
        assert!(!report.check("concave_total_flow").unwrap().pass);
        assert!(validate_uncertainty(&p, &UncertaintyFn::Zero, 10).is_err());
    }

    #[test]
    fn twenty_region_uses_loose_row_tolerance() {
        let cfg = NetworkConfig::parse(include_str!("../fixtures/twenty_region.toml")).unwrap();
        let net = cfg.build().unwrap();
        assert_eq!(net.n(), 20);
        assert_eq!(net.row_sum_tol, 1e-3);
        assert!(validate_network(&net).unwrap().pass());
        assert!(net.row_residuals().iter().any(|&r| r > 1e-6));
    }

    #[test]
    fn unknown_config_key_reports_location() {
        let text = format!("{}\nbogus = 1\n", include_str!("../fixtures/six_region.toml"));
        match NetworkConfig::parse(&text) {
            Err(Error::Config { message, .. }) => assert!(message.contains("bogus")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn config_round_trips() {
        let (cfg, _) = six();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(NetworkConfig::parse(&text).unwrap(), cfg);
    }
}
