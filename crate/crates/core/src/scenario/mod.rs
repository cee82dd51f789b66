//! Deployments, shadowing maps and the RSRP table.

mod fading;

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use fading::{generate_fading_field, FadingField, FadingGenerator, FadingParams};

use crate::error::{Error, Result};
use crate::io;
use crate::rng;

/// Median channel gain at 1 km, dB.
pub const MEDIAN_GAIN_DB: f64 = -35.3;
/// Path-loss exponent.
pub const PATH_LOSS_EXPONENT: f64 = 3.76;
/// Distances are clamped to this before the path-loss model is evaluated.
pub const MIN_DISTANCE_KM: f64 = 0.01;

pub const SCENARIO_FILE_VERSION: u32 = 1;

/// A position in km.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Received power in dB at `distance_km` with shadowing `fading_db`.
pub fn rsrp(distance_km: f64, fading_db: f64) -> Result<f64> {
    if distance_km.is_nan() || distance_km <= 0.0 || !distance_km.is_finite() {
        return Err(Error::invalid(format!("distance must be positive, got {distance_km}")));
    }
    let d = distance_km.max(MIN_DISTANCE_KM);
    Ok(MEDIAN_GAIN_DB - 10.0 * PATH_LOSS_EXPONENT * d.log10() + fading_db)
}

/// `count` points drawn uniformly in `[0, side_length_km]²`.
pub fn place_nodes(count: usize, side_length_km: f64, seed: u64) -> Result<Vec<Point>> {
    let mut rng = rng::stream(seed, &[rng::TAG_AP_PLACEMENT]);
    place_with(&mut rng, count, side_length_km)
}

pub(crate) fn place_with<R: Rng + ?Sized>(rng: &mut R, count: usize, side_length_km: f64) -> Result<Vec<Point>> {
    if count == 0 {
        return Err(Error::invalid("node count must be at least 1"));
    }
    if side_length_km.is_nan() || side_length_km <= 0.0 || !side_length_km.is_finite() {
        return Err(Error::invalid("side length must be positive"));
    }
    Ok((0..count)
        .map(|_| {
            let x = rng.random::<f64>() * side_length_km;
            let y = rng.random::<f64>() * side_length_km;
            Point::new(x, y)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub ap_count: usize,
    pub side_length_km: f64,
    /// Zero disables shadowing altogether.
    pub sigma_sh_db: f64,
    pub decorrelation_distance_m: f64,
    pub grid_resolution_m: f64,
    pub seed: u64,
}

impl ScenarioConfig {
    pub const DEFAULT_SIGMA_SH_DB: f64 = 7.0;
    pub const DEFAULT_DECORRELATION_M: f64 = 100.0;
    pub const DEFAULT_RESOLUTION_M: f64 = 10.0;

    /// 100 APs in a 1×1 km square.
    pub fn dense(seed: u64) -> Self {
        Self {
            ap_count: 100,
            side_length_km: 1.0,
            sigma_sh_db: Self::DEFAULT_SIGMA_SH_DB,
            decorrelation_distance_m: Self::DEFAULT_DECORRELATION_M,
            grid_resolution_m: Self::DEFAULT_RESOLUTION_M,
            seed,
        }
    }

    /// 50 APs in a 2×2 km square.
    pub fn sparse(seed: u64) -> Self {
        Self {
            ap_count: 50,
            side_length_km: 2.0,
            ..Self::dense(seed)
        }
    }

    fn fading_params(&self) -> FadingParams {
        FadingParams {
            sigma_sh_db: self.sigma_sh_db,
            decorrelation_distance_m: self.decorrelation_distance_m,
            side_length_km: self.side_length_km,
            grid_resolution_m: self.grid_resolution_m,
        }
    }
}

/// The fixed AP deployment plus one shadowing map per AP.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    config: ScenarioConfig,
    ap_positions: Vec<Point>,
    fading_maps: Vec<FadingField>,
}

impl Scenario {
    pub fn generate(config: &ScenarioConfig) -> Result<Self> {
        if config.sigma_sh_db < 0.0 || !config.sigma_sh_db.is_finite() {
            return Err(Error::invalid("shadowing sigma must be non-negative"));
        }
        let ap_positions = place_nodes(config.ap_count, config.side_length_km, config.seed)?;
        let params = config.fading_params();
        let fading_maps = if config.sigma_sh_db == 0.0 {
            let flat = FadingField::flat(&params)?;
            vec![flat; config.ap_count]
        } else {
            let generator = FadingGenerator::new(params)?;
            (0..config.ap_count)
                .into_par_iter()
                .map(|l| {
                    let mut rng = rng::stream(config.seed, &[rng::TAG_FADING, l as u64]);
                    generator.sample(&mut rng)
                })
                .collect()
        };
        Ok(Self {
            config: config.clone(),
            ap_positions,
            fading_maps,
        })
    }

    /// Assembles a scenario from explicit parts.
    pub fn from_parts(config: ScenarioConfig, ap_positions: Vec<Point>, fading_maps: Vec<FadingField>) -> Result<Self> {
        if ap_positions.is_empty() || ap_positions.len() != config.ap_count {
            return Err(Error::invalid(format!(
                "expected {} AP positions, got {}",
                config.ap_count,
                ap_positions.len()
            )));
        }
        if fading_maps.len() != ap_positions.len() {
            return Err(Error::invalid("need exactly one fading map per AP"));
        }
        let points = config.fading_params().grid_points()?;
        if fading_maps.iter().any(|m| m.points_per_axis() != points) {
            return Err(Error::invalid("fading maps must share the scenario grid"));
        }
        let scenario = Self {
            config,
            ap_positions,
            fading_maps,
        };
        for p in &scenario.ap_positions {
            scenario.check_inside(p)?;
        }
        Ok(scenario)
    }

    /// A scenario whose maps are identically zero.
    pub fn without_shadowing(config: ScenarioConfig, ap_positions: Vec<Point>) -> Result<Self> {
        let flat = FadingField::flat(&config.fading_params())?;
        let maps = vec![flat; ap_positions.len()];
        Self::from_parts(
            ScenarioConfig {
                sigma_sh_db: 0.0,
                ..config
            },
            ap_positions,
            maps,
        )
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn ap_count(&self) -> usize {
        self.ap_positions.len()
    }

    pub fn side_length_km(&self) -> f64 {
        self.config.side_length_km
    }

    pub fn ap_positions(&self) -> &[Point] {
        &self.ap_positions
    }

    pub fn fading_maps(&self) -> &[FadingField] {
        &self.fading_maps
    }

    pub fn density_per_km2(&self) -> f64 {
        self.ap_count() as f64 / (self.config.side_length_km * self.config.side_length_km)
    }

    pub fn check_inside(&self, p: &Point) -> Result<()> {
        let s = self.config.side_length_km;
        let inside = |v: f64| v.is_finite() && (0.0..=s).contains(&v);
        if inside(p.x) && inside(p.y) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "point ({}, {}) lies outside the {s} km square",
                p.x, p.y
            )))
        }
    }

    /// RSRP from AP `ap` at `at`, using AP `ap`'s shadowing map.
    pub fn rsrp_from(&self, ap: usize, at: &Point) -> Result<f64> {
        let d = self.ap_positions[ap].distance(at).max(MIN_DISTANCE_KM);
        rsrp(d, self.fading_maps[ap].sample(at.x, at.y))
    }

    /// Draws UE positions for this scenario's area.
    pub fn place_ues<R: Rng + ?Sized>(&self, rng: &mut R, count: usize) -> Result<Vec<Point>> {
        place_with(rng, count, self.config.side_length_km)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &ScenarioFile::from(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ScenarioFile = io::read_json(path)?;
        file.into_scenario()
    }
}

/// On-disk form of a [`Scenario`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub version: u32,
    pub seed: u64,
    pub side_length_km: f64,
    pub grid_resolution_m: f64,
    pub sigma_sh_db: f64,
    pub decorrelation_distance_m: f64,
    pub ap_positions: Vec<Point>,
    pub fading_maps: Vec<Vec<f64>>,
}

impl From<&Scenario> for ScenarioFile {
    fn from(s: &Scenario) -> Self {
        Self {
            version: SCENARIO_FILE_VERSION,
            seed: s.config.seed,
            side_length_km: s.config.side_length_km,
            grid_resolution_m: s.config.grid_resolution_m,
            sigma_sh_db: s.config.sigma_sh_db,
            decorrelation_distance_m: s.config.decorrelation_distance_m,
            ap_positions: s.ap_positions.clone(),
            fading_maps: s.fading_maps.iter().map(|m| m.grid().to_vec()).collect(),
        }
    }
}

impl ScenarioFile {
    pub fn into_scenario(self) -> Result<Scenario> {
        io::check_version("scenario", self.version, SCENARIO_FILE_VERSION)?;
        let config = ScenarioConfig {
            ap_count: self.ap_positions.len(),
            side_length_km: self.side_length_km,
            sigma_sh_db: self.sigma_sh_db,
            decorrelation_distance_m: self.decorrelation_distance_m,
            grid_resolution_m: self.grid_resolution_m,
            seed: self.seed,
        };
        let params = config.fading_params();
        let maps = self
            .fading_maps
            .into_iter()
            .map(|g| FadingField::from_grid(&params, g))
            .collect::<Result<Vec<_>>>()?;
        Scenario::from_parts(config, self.ap_positions, maps)
    }
}

/// Simulated RSRP in dB: AP→UE (L×K) and AP→AP (L×L).
#[derive(Clone, Debug)]
pub struct RsrpTable {
    ap_count: usize,
    ue_count: usize,
    ap_to_ue: Vec<f64>,
    ap_to_ap: Vec<f64>,
}

/// Bitwise comparison, so the NaN diagonal compares equal to itself.
impl PartialEq for RsrpTable {
    fn eq(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.ap_count == other.ap_count
            && self.ue_count == other.ue_count
            && bits(&self.ap_to_ue) == bits(&other.ap_to_ue)
            && bits(&self.ap_to_ap) == bits(&other.ap_to_ap)
    }
}

impl RsrpTable {
    /// Builds a table from explicit values. `ap_to_ap` diagonal entries
    /// are ignored.
    pub fn from_values(ap_count: usize, ue_count: usize, ap_to_ue: Vec<f64>, mut ap_to_ap: Vec<f64>) -> Result<Self> {
        if ap_count == 0 {
            return Err(Error::invalid("table needs at least one AP"));
        }
        if ap_to_ue.len() != ap_count * ue_count || ap_to_ap.len() != ap_count * ap_count {
            return Err(Error::invalid("RSRP table dimensions do not match"));
        }
        for l in 0..ap_count {
            ap_to_ap[l * ap_count + l] = f64::NAN;
        }
        Ok(Self {
            ap_count,
            ue_count,
            ap_to_ue,
            ap_to_ap,
        })
    }

    pub fn ap_count(&self) -> usize {
        self.ap_count
    }

    pub fn ue_count(&self) -> usize {
        self.ue_count
    }

    /// `R_{l,k}`.
    pub fn ap_to_ue(&self, ap: usize, ue: usize) -> f64 {
        self.ap_to_ue[ap * self.ue_count + ue]
    }

    /// `R_{l,l̂}`: AP `from` transmitting, measured at AP `to`. `None` on the
    /// diagonal.
    pub fn ap_to_ap(&self, from: usize, to: usize) -> Option<f64> {
        (from != to).then(|| self.ap_to_ap[from * self.ap_count + to])
    }

    /// Column `ue` of the AP→UE matrix.
    pub fn ue_column(&self, ue: usize) -> Vec<f64> {
        (0..self.ap_count).map(|l| self.ap_to_ue(l, ue)).collect()
    }

    /// AP→UE matrix as CSV: one row per AP, one column per UE, 6 decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ap");
        for k in 0..self.ue_count {
            out.push_str(&format!(",ue{k}"));
        }
        out.push('\n');
        for l in 0..self.ap_count {
            out.push_str(&l.to_string());
            for k in 0..self.ue_count {
                out.push_str(&format!(",{:.6}", self.ap_to_ue(l, k)));
            }
            out.push('\n');
        }
        out
    }
}

/// Evaluates the path-loss model for every AP against every UE and AP.
pub fn build_rsrp_table(scenario: &Scenario, ue_positions: &[Point]) -> Result<RsrpTable> {
    for p in ue_positions {
        scenario.check_inside(p)?;
    }
    let l_count = scenario.ap_count();
    let k_count = ue_positions.len();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..l_count)
        .into_par_iter()
        .map(|l| -> Result<_> {
            let to_ue = ue_positions
                .iter()
                .map(|p| scenario.rsrp_from(l, p))
                .collect::<Result<Vec<_>>>()?;
            let to_ap = scenario
                .ap_positions()
                .iter()
                .enumerate()
                .map(|(j, p)| if j == l { Ok(f64::NAN) } else { scenario.rsrp_from(l, p) })
                .collect::<Result<Vec<_>>>()?;
            Ok((to_ue, to_ap))
        })
        .collect::<Result<_>>()?;
    let mut ap_to_ue = Vec::with_capacity(l_count * k_count);
    let mut ap_to_ap = Vec::with_capacity(l_count * l_count);
    for (u, a) in rows {
        ap_to_ue.extend(u);
        ap_to_ap.extend(a);
    }
    RsrpTable::from_values(l_count, k_count, ap_to_ue, ap_to_ap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rsrp_reference_points() {
        assert!((rsrp(1.0, 0.0).unwrap() + 35.3).abs() < 1e-12);
        assert!((rsrp(0.1, 0.0).unwrap() - 2.3).abs() < 1e-12);
        assert!((rsrp(1.0, -7.5).unwrap() + 42.8).abs() < 1e-12);
    }

    #[test]
    fn rsrp_rejects_non_positive_distance_and_clamps_small_ones() {
        assert!(rsrp(0.0, 0.0).is_err());
        assert!(rsrp(-1.0, 0.0).is_err());
        assert_eq!(rsrp(0.001, 0.0).unwrap(), rsrp(MIN_DISTANCE_KM, 0.0).unwrap());
    }

    #[test]
    fn place_nodes_validates_arguments() {
        assert!(place_nodes(0, 1.0, 1).is_err());
        assert!(place_nodes(1, 0.0, 1).is_err());
        let pts = place_nodes(100, 1.0, 9).unwrap();
        assert_eq!(pts.len(), 100);
        assert!(pts
            .iter()
            .all(|p| (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)));
        assert_eq!(pts, place_nodes(100, 1.0, 9).unwrap());
    }

    #[test]
    fn place_nodes_mean_is_centred() {
        let pts = place_nodes(1000, 2.0, 1234).unwrap();
        let mx = pts.iter().map(|p| p.x).sum::<f64>() / 1000.0;
        let my = pts.iter().map(|p| p.y).sum::<f64>() / 1000.0;
        assert!((mx - 1.0).abs() < 0.06, "{mx}");
        assert!((my - 1.0).abs() < 0.06, "{my}");
    }

    fn flat_config(ap_count: usize, side: f64) -> ScenarioConfig {
        ScenarioConfig {
            ap_count,
            side_length_km: side,
            sigma_sh_db: 0.0,
            decorrelation_distance_m: 100.0,
            grid_resolution_m: 50.0,
            seed: 0,
        }
    }

    #[test]
    fn zero_fading_table_matches_path_loss() {
        let aps = vec![Point::new(0.0, 0.0), Point::new(2.0, 2.0)];
        let s = Scenario::without_shadowing(flat_config(2, 2.0), aps).unwrap();
        let ue = Point::new(0.6, 0.8); // 1 km from AP 0
        let t = build_rsrp_table(&s, &[ue]).unwrap();
        assert!((t.ap_to_ue(0, 0) + 35.3).abs() < 1e-9);
        assert_eq!(t.ap_count(), 2);
        assert_eq!(t.ue_count(), 1);
        assert!(t.ap_to_ap(0, 0).is_none());
        let d = 8f64.sqrt();
        assert!((t.ap_to_ap(0, 1).unwrap() - rsrp(d, 0.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ue_outside_area_is_rejected() {
        let s = Scenario::without_shadowing(flat_config(1, 1.0), vec![Point::new(0.5, 0.5)]).unwrap();
        assert!(build_rsrp_table(&s, &[Point::new(1.2, 0.5)]).is_err());
        assert!(build_rsrp_table(&s, &[Point::new(0.5, -0.01)]).is_err());
    }

    #[test]
    fn csv_has_six_decimals() {
        let t = RsrpTable::from_values(1, 2, vec![-35.3, 2.3], vec![0.0]).unwrap();
        assert_eq!(t.to_csv(), "ap,ue0,ue1\n0,-35.300000,2.300000\n");
    }
}
