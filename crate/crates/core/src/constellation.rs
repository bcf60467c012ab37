//! Circular-orbit propagation and satellite to ground-station visibility.
//!
//! Orbits are circular Keplerian; the Earth is a sphere rotating at a
//! constant rate with its prime meridian aligned to the inertial x-axis at
//! t = 0. That is enough to produce realistic contact-window statistics.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EARTH_RADIUS_KM: f64 = 6371.0;
pub const EARTH_MU_KM3_S2: f64 = 398_600.441_8;
pub const EARTH_ROTATION_RAD_S: f64 = 7.292_115_9e-5;

/// Default tolerance of the bisection that refines rise/set crossings.
pub const DEFAULT_REFINE_TOL_S: f64 = 0.1;
pub const DEFAULT_SCAN_STEP_S: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitSpec {
    pub altitude_km: f64,
    pub inclination_deg: f64,
    pub raan_deg: f64,
    pub initial_anomaly_deg: f64,
    #[serde(default)]
    pub epoch_s: f64,
}

impl OrbitSpec {
    pub fn circular(altitude_km: f64, inclination_deg: f64, raan_deg: f64, initial_anomaly_deg: f64) -> Self {
        Self {
            altitude_km,
            inclination_deg,
            raan_deg,
            initial_anomaly_deg,
            epoch_s: 0.0,
        }
    }

    pub fn radius_km(&self) -> f64 {
        EARTH_RADIUS_KM + self.altitude_km
    }

    /// Mean motion in rad/s.
    pub fn angular_rate(&self) -> f64 {
        (EARTH_MU_KM3_S2 / self.radius_km().powi(3)).sqrt()
    }

    pub fn period_s(&self) -> f64 {
        2.0 * PI / self.angular_rate()
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.altitude_km > 0.0) {
            errs.push(format!("altitude_km must be > 0 (got {})", self.altitude_km));
        }
        if !(0.0..=180.0).contains(&self.inclination_deg) {
            errs.push(format!("inclination_deg must be in [0,180] (got {})", self.inclination_deg));
        }
        if !(0.0..360.0).contains(&self.raan_deg) {
            errs.push(format!("raan_deg must be in [0,360) (got {})", self.raan_deg));
        }
        if !(0.0..360.0).contains(&self.initial_anomaly_deg) {
            errs.push(format!(
                "initial_anomaly_deg must be in [0,360) (got {})",
                self.initial_anomaly_deg
            ));
        }
        if !self.epoch_s.is_finite() {
            errs.push("epoch_s must be finite".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundStationSpec {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    pub min_elevation_deg: f64,
}

impl GroundStationSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(-90.0..=90.0).contains(&self.latitude_deg) {
            errs.push(format!("latitude_deg must be in [-90,90] (got {})", self.latitude_deg));
        }
        if !(-180.0..=180.0).contains(&self.longitude_deg) {
            errs.push(format!("longitude_deg must be in [-180,180] (got {})", self.longitude_deg));
        }
        if !(0.0..90.0).contains(&self.min_elevation_deg) {
            errs.push(format!(
                "min_elevation_deg must be in [0,90) (got {})",
                self.min_elevation_deg
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Station position in the inertial frame at time `t`.
    pub fn position_eci(&self, t: f64) -> [f64; 3] {
        let lat = self.latitude_deg.to_radians();
        let lon = self.longitude_deg.to_radians() + EARTH_ROTATION_RAD_S * t;
        [
            EARTH_RADIUS_KM * lat.cos() * lon.cos(),
            EARTH_RADIUS_KM * lat.cos() * lon.sin(),
            EARTH_RADIUS_KM * lat.sin(),
        ]
    }
}

/// A visibility interval `[start_s, end_s]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactWindow {
    pub start_s: f64,
    pub end_s: f64,
}

impl ContactWindow {
    pub fn new(start_s: f64, end_s: f64) -> Result<Self> {
        if !(start_s < end_s) {
            return Err(Error::invalid(format!("empty window [{start_s}, {end_s}]")));
        }
        Ok(Self { start_s, end_s })
    }

    pub fn duration(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn contains(&self, t: f64) -> bool {
        self.start_s <= t && t <= self.end_s
    }

    pub fn overlaps(&self, other: &ContactWindow) -> bool {
        self.start_s <= other.end_s && other.start_s <= self.end_s
    }
}

/// Inertial position (km) of the satellite at time `t`.
pub fn propagate(orbit: &OrbitSpec, t: f64) -> [f64; 3] {
    let a = orbit.radius_km();
    let u = orbit.initial_anomaly_deg.to_radians() + orbit.angular_rate() * (t - orbit.epoch_s);
    let (si, ci) = orbit.inclination_deg.to_radians().sin_cos();
    let (sr, cr) = orbit.raan_deg.to_radians().sin_cos();
    let (su, cu) = u.sin_cos();
    [
        a * (cr * cu - sr * su * ci),
        a * (sr * cu + cr * su * ci),
        a * su * si,
    ]
}

/// Elevation (degrees) of an inertial position seen from `gs` at time `t`.
pub fn elevation(sat_position: [f64; 3], gs: &GroundStationSpec, t: f64) -> f64 {
    let site = gs.position_eci(t);
    let rel = [
        sat_position[0] - site[0],
        sat_position[1] - site[1],
        sat_position[2] - site[2],
    ];
    let range = norm(rel);
    if range == 0.0 {
        return 90.0;
    }
    let up_dot = (rel[0] * site[0] + rel[1] * site[1] + rel[2] * site[2]) / EARTH_RADIUS_KM;
    (up_dot / range).clamp(-1.0, 1.0).asin().to_degrees()
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn visible(orbit: &OrbitSpec, gs: &GroundStationSpec, t: f64) -> bool {
    elevation(propagate(orbit, t), gs, t) >= gs.min_elevation_deg
}

/// Bisects a visibility transition inside `[lo, hi]`; `lo_visible` is the
/// state at `lo`. Returns the bracket end on the visible side.
fn refine(orbit: &OrbitSpec, gs: &GroundStationSpec, mut lo: f64, mut hi: f64, lo_visible: bool, tol: f64) -> f64 {
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if visible(orbit, gs, mid) == lo_visible {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo_visible {
        lo
    } else {
        hi
    }
}

/// Visibility windows over `[0, horizon_s]` with the default refinement
/// tolerance.
pub fn contact_windows(orbit: &OrbitSpec, gs: &GroundStationSpec, horizon_s: f64, step_s: f64) -> Result<Vec<ContactWindow>> {
    contact_windows_with_tol(orbit, gs, horizon_s, step_s, DEFAULT_REFINE_TOL_S)
}

pub fn contact_windows_with_tol(
    orbit: &OrbitSpec,
    gs: &GroundStationSpec,
    horizon_s: f64,
    step_s: f64,
    tol_s: f64,
) -> Result<Vec<ContactWindow>> {
    if !(step_s > 0.0) || !(horizon_s > 0.0) || !(tol_s > 0.0) {
        return Err(Error::invalid(format!(
            "step_s, horizon_s and tolerance must be positive (got {step_s}, {horizon_s}, {tol_s})"
        )));
    }
    let steps = (horizon_s / step_s).ceil() as usize;
    let mut windows = Vec::new();
    let mut prev_t = 0.0;
    let mut prev_vis = visible(orbit, gs, 0.0);
    let mut open: Option<f64> = prev_vis.then_some(0.0);

    for k in 1..=steps {
        let t = (k as f64 * step_s).min(horizon_s);
        let vis = visible(orbit, gs, t);
        if vis != prev_vis {
            let edge = refine(orbit, gs, prev_t, t, prev_vis, tol_s);
            if vis {
                open = Some(edge);
            } else if let Some(start) = open.take() {
                if edge > start {
                    windows.push(ContactWindow { start_s: start, end_s: edge });
                }
            }
        }
        prev_t = t;
        prev_vis = vis;
    }
    if let Some(start) = open {
        if horizon_s > start {
            windows.push(ContactWindow { start_s: start, end_s: horizon_s });
        }
    }
    Ok(windows)
}

/// Total window time divided by the horizon.
pub fn contact_fraction(windows: &[ContactWindow], horizon_s: f64) -> f64 {
    if horizon_s <= 0.0 {
        return 0.0;
    }
    let total = windows.iter().fold(0.0, |acc, w| acc + w.duration());
    (total / horizon_s).clamp(0.0, 1.0)
}

/// Longest possible pass for an overhead geometry: the central angle of
/// the visibility cap traversed at `relative_rate` rad/s.
pub fn max_pass_duration(altitude_km: f64, min_elevation_deg: f64, relative_rate: f64) -> f64 {
    let eps = min_elevation_deg.to_radians();
    let ratio = EARTH_RADIUS_KM * eps.cos() / (EARTH_RADIUS_KM + altitude_km);
    let central = 2.0 * ratio.acos() - 2.0 * eps;
    central / relative_rate
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Satellite {
    pub id: String,
    pub orbit: OrbitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundStation {
    pub id: String,
    pub site: GroundStationSpec,
}

/// Satellites plus ground stations, as read from a constellation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstellationSpec {
    pub satellites: Vec<Satellite>,
    pub ground_stations: Vec<GroundStation>,
    #[serde(default = "default_horizon")]
    pub horizon_s: f64,
    #[serde(default = "default_step")]
    pub step_s: f64,
}

fn default_horizon() -> f64 {
    86_400.0
}

fn default_step() -> f64 {
    DEFAULT_SCAN_STEP_S
}

/// Elevation mask solved by `calibrate_mask` for the default constellation
/// and a 4.33% mean contact fraction over 24 h.
pub const DEFAULT_CALIBRATED_MASK_DEG: f64 = 1.96;

impl Default for ConstellationSpec {
    /// Ten satellites of a 570 km, 70° shell, spread over RAAN and anomaly,
    /// and one mid-latitude station.
    fn default() -> Self {
        let satellites = (0..10)
            .map(|k| Satellite {
                id: format!("sat-{k}"),
                orbit: OrbitSpec::circular(570.0, 70.0, 36.0 * k as f64, (97.0 * k as f64) % 360.0),
            })
            .collect();
        Self {
            satellites,
            ground_stations: vec![GroundStation {
                id: "gs-0".to_string(),
                site: GroundStationSpec {
                    latitude_deg: 47.6,
                    longitude_deg: -122.3,
                    min_elevation_deg: DEFAULT_CALIBRATED_MASK_DEG,
                },
            }],
            horizon_s: default_horizon(),
            step_s: default_step(),
        }
    }
}

impl ConstellationSpec {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.satellites.is_empty() {
            errs.push("constellation.satellites: at least one satellite required".to_string());
        }
        if self.ground_stations.is_empty() {
            errs.push("constellation.ground_stations: at least one ground station required".to_string());
        }
        for (i, s) in self.satellites.iter().enumerate() {
            if let Err(Error::Config(e)) = s.orbit.validate() {
                errs.extend(e.into_iter().map(|m| format!("constellation.satellites[{i}].orbit.{m}")));
            }
        }
        for (i, g) in self.ground_stations.iter().enumerate() {
            if let Err(Error::Config(e)) = g.site.validate() {
                errs.extend(e.into_iter().map(|m| format!("constellation.ground_stations[{i}].site.{m}")));
            }
        }
        if !(self.horizon_s > 0.0) {
            errs.push(format!("constellation.horizon_s must be > 0 (got {})", self.horizon_s));
        }
        if !(self.step_s > 0.0) {
            errs.push(format!("constellation.step_s must be > 0 (got {})", self.step_s));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn set_mask(&mut self, mask_deg: f64) {
        for g in &mut self.ground_stations {
            g.site.min_elevation_deg = mask_deg;
        }
    }

    /// Windows for every (satellite, station) pair, in declaration order.
    pub fn all_windows(&self) -> Result<Vec<PairWindows>> {
        let mut out = Vec::new();
        for sat in &self.satellites {
            for gs in &self.ground_stations {
                out.push(PairWindows {
                    sat_id: sat.id.clone(),
                    gs_id: gs.id.clone(),
                    windows: contact_windows(&sat.orbit, &gs.site, self.horizon_s, self.step_s)?,
                });
            }
        }
        Ok(out)
    }

    /// Mean contact fraction over all (satellite, station) pairs.
    pub fn mean_contact_fraction(&self) -> Result<f64> {
        let pairs = self.all_windows()?;
        if pairs.is_empty() {
            return Ok(0.0);
        }
        let sum: f64 = pairs.iter().map(|p| contact_fraction(&p.windows, self.horizon_s)).sum();
        Ok(sum / pairs.len() as f64)
    }

    /// Merged windows of one satellite over all stations (any station in view).
    pub fn satellite_windows(&self, sat_index: usize) -> Result<Vec<ContactWindow>> {
        let sat = &self.satellites[sat_index];
        let mut all = Vec::new();
        for gs in &self.ground_stations {
            all.extend(contact_windows(&sat.orbit, &gs.site, self.horizon_s, self.step_s)?);
        }
        Ok(merge_windows(all))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairWindows {
    pub sat_id: String,
    pub gs_id: String,
    pub windows: Vec<ContactWindow>,
}

/// Sorts and unions overlapping windows.
pub fn merge_windows(mut windows: Vec<ContactWindow>) -> Vec<ContactWindow> {
    windows.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    let mut out: Vec<ContactWindow> = Vec::with_capacity(windows.len());
    for w in windows {
        match out.last_mut() {
            Some(last) if w.start_s <= last.end_s => last.end_s = last.end_s.max(w.end_s),
            _ => out.push(w),
        }
    }
    out
}

/// Outcome of a mask calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskCalibration {
    Solved { mask_deg: f64, fraction: f64 },
    /// The target fraction is at or below what the steepest mask allows.
    AtUpperBound { mask_deg: f64, fraction: f64 },
    Unreachable { min_fraction: f64, max_fraction: f64 },
}

pub const MASK_SEARCH_MAX_DEG: f64 = 89.0;

/// Bisects the elevation mask (shared by all stations) until the mean
/// contact fraction is within `tol` of `target`. The fraction is monotone
/// non-increasing in the mask.
pub fn calibrate_mask(spec: &ConstellationSpec, target: f64, tol: f64) -> Result<MaskCalibration> {
    let eval = |mask: f64| -> Result<f64> {
        let mut s = spec.clone();
        s.set_mask(mask);
        s.mean_contact_fraction()
    };
    let (mut lo, mut hi) = (0.0, MASK_SEARCH_MAX_DEG);
    let f_lo = eval(lo)?;
    let f_hi = eval(hi)?;
    if target > f_lo + tol {
        return Ok(MaskCalibration::Unreachable {
            min_fraction: f_hi,
            max_fraction: f_lo,
        });
    }
    if (f_lo - target).abs() <= tol {
        return Ok(MaskCalibration::Solved { mask_deg: lo, fraction: f_lo });
    }
    if target <= f_hi + tol {
        return Ok(MaskCalibration::AtUpperBound { mask_deg: hi, fraction: f_hi });
    }
    let mut best = (lo, f_lo);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        let f = eval(mid)?;
        if (f - target).abs() < (best.1 - target).abs() {
            best = (mid, f);
        }
        if (f - target).abs() <= tol {
            return Ok(MaskCalibration::Solved { mask_deg: mid, fraction: f });
        }
        if f > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-9 {
            break;
        }
    }
    Ok(MaskCalibration::Solved {
        mask_deg: best.0,
        fraction: best.1,
    })
}
