//! Flow functions of the regional MFD model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{validate_uncertainty, Network, RegionParams, UncertaintyFn, DEFAULT_GRID};

/// Shape of the nominal production function f.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MfdShape {
    /// min(psi rho, psi rho_C / (rho_J - rho_C) (rho_J - rho)).
    #[default]
    Triangular,
    /// psi rho (1 - rho / rho_J); peaks at rho_J / 2 regardless of rho_C.
    Greenshields,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub region: RegionParams,
    pub d: UncertaintyFn,
    pub shape: MfdShape,
}

impl FlowModel {
    pub fn new(region: RegionParams, d: UncertaintyFn) -> Self {
        FlowModel {
            region,
            d,
            shape: MfdShape::Triangular,
        }
    }

    pub fn nominal(region: RegionParams) -> Self {
        Self::new(region, UncertaintyFn::Zero)
    }

    fn in_domain(&self, rho: f64) -> Result<()> {
        if (0.0..=self.region.jam_density).contains(&rho) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "density {rho} outside [0, {}]",
                self.region.jam_density
            )))
        }
    }

    /// Nominal flow without domain checks; densities are clamped to [0, rho_J].
    pub fn f(&self, rho: f64) -> f64 {
        let p = &self.region;
        let rho = rho.clamp(0.0, p.jam_density);
        match self.shape {
            MfdShape::Triangular => {
                (p.free_speed * rho).min(p.congested_slope() * (p.jam_density - rho))
            }
            MfdShape::Greenshields => p.free_speed * rho * (1.0 - rho / p.jam_density),
        }
    }

    /// Total inter-regional flow r f + d, clamped like [`FlowModel::f`].
    pub fn g(&self, rho: f64) -> f64 {
        let rho = rho.clamp(0.0, self.region.jam_density);
        self.region.r() * self.f(rho) + self.d.eval(rho)
    }

    pub fn f_nominal(&self, rho: f64) -> Result<f64> {
        self.in_domain(rho)?;
        Ok(self.f(rho))
    }

    pub fn g_total(&self, rho: f64) -> Result<f64> {
        self.in_domain(rho)?;
        Ok(self.g(rho))
    }

    /// Space-mean speed f / rho, extended by continuity to psi^f at rho = 0.
    pub fn speed(&self, rho: f64) -> Result<f64> {
        self.in_domain(rho)?;
        Ok(self.speed_unchecked(rho))
    }

    pub fn speed_unchecked(&self, rho: f64) -> f64 {
        if rho <= 0.0 {
            self.region.free_speed
        } else {
            self.f(rho) / rho
        }
    }

    /// Largest nominal trip-completion flow, max r f.
    pub fn capacity(&self) -> f64 {
        let p = &self.region;
        let peak = match self.shape {
            MfdShape::Triangular => p.critical_density,
            MfdShape::Greenshields => p.jam_density / 2.0,
        };
        p.r() * self.f(peak)
    }

    /// Density maximizing g. Kinks of the nominal shape and of the
    /// uncertainty are checked exactly, on top of a uniform grid.
    pub fn g_maximizer(&self, grid_n: usize) -> f64 {
        let jam = self.region.jam_density;
        let mut candidates: Vec<f64> = (0..grid_n)
            .map(|k| jam * k as f64 / (grid_n - 1) as f64)
            .collect();
        match self.shape {
            MfdShape::Triangular => candidates.push(self.region.critical_density),
            MfdShape::Greenshields => candidates.push(jam / 2.0),
        }
        match &self.d {
            UncertaintyFn::Tent { peak_density, .. } => candidates.push(*peak_density),
            UncertaintyFn::Tabulated { points } => candidates.extend(points.iter().map(|p| p.0)),
            UncertaintyFn::Zero => {}
        }
        candidates
            .into_iter()
            .filter(|x| (0.0..=jam).contains(x))
            .fold((0.0, f64::NEG_INFINITY), |best, x| {
                let v = self.g(x);
                if v > best.1 {
                    (x, v)
                } else {
                    best
                }
            })
            .0
    }
}

/// Transfer flow w_il g_i(rho_i) from region i into successor l.
pub fn transfer_flow(
    model: &FlowModel,
    net: &Network,
    i: usize,
    l: usize,
    rho_i: f64,
) -> Result<f64> {
    if !net.has_edge(i, l) {
        return Err(Error::Topology { from: i, to: l });
    }
    Ok(net.w(i, l) * model.g_total(rho_i)?)
}

/// Largest absolute slope between adjacent points of a uniform grid.
pub fn lipschitz_estimate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, grid_n: usize) -> f64 {
    let n = grid_n.max(2);
    let h = (hi - lo) / (n - 1) as f64;
    let mut prev = f(lo);
    let mut best = 0.0f64;
    for k in 1..n {
        let v = f(lo + h * k as f64);
        best = best.max(((v - prev) / h).abs());
        prev = v;
    }
    best
}

const MAX_REGEN: usize = 16;

/// Draws a tent-shaped perturbation. Amplitude is uniform on (0, max] and
/// the peak uniform over `peak_frac_range` times rho_J. Draws whose slope
/// exceeds the region's declared v^{d,L} are redrawn with half the bound.
pub fn gen_uncertainty(
    region: &RegionParams,
    seed: u64,
    max_amplitude: f64,
    peak_frac_range: (f64, f64),
) -> Result<UncertaintyFn> {
    if max_amplitude.is_nan() || max_amplitude < 0.0 {
        return Err(Error::Parameter(format!(
            "max_amplitude {max_amplitude} must be non-negative"
        )));
    }
    let (lo, hi) = peak_frac_range;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::Parameter(format!(
            "peak fraction range ({lo}, {hi}) must lie in (0, 1)"
        )));
    }
    if max_amplitude == 0.0 {
        return Ok(UncertaintyFn::Zero);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jam = region.jam_density;
    let mut bound = max_amplitude;
    for _ in 0..MAX_REGEN {
        let amplitude = bound * (1.0 - rng.gen::<f64>());
        let frac = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let d = UncertaintyFn::tent(amplitude, frac * jam, jam);
        let slope = lipschitz_estimate(|x| d.eval(x), 0.0, jam, DEFAULT_GRID);
        if slope <= region.lipschitz_d && validate_uncertainty(region, &d, DEFAULT_GRID)?.pass() {
            return Ok(d);
        }
        bound *= 0.5;
    }
    Err(Error::Parameter(format!(
        "no admissible tent within {MAX_REGEN} draws (declared v^dL = {})",
        region.lipschitz_d
    )))
}
