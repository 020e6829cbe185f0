//! UAV-ground RSS datasets: the nine-feature schema, a synthetic channel
//! generator, CSV interchange, standardization, train/test splitting, label
//! quantization, and tolerance scoring.
//!
//! The synthetic channel is log-distance path loss with an altitude-dependent
//! line-of-sight gain and spatially correlated log-normal shadowing:
//!
//! ```text
//! rss = P_tx - PL_0 - 10 n log10(d) + G_los (1 - exp(-alt / a_los)) - S(x, y, alt)
//! ```
//!
//! `S` is a zero-mean Gaussian field per cell with a squared-exponential
//! correlation of length `shadowing_decorrelation_m`, realized with random
//! Fourier features drawn from the noise seed.

use std::f64::consts::PI;
use std::fs::File;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_dim, Error, Result};
use crate::rng;

pub const FEATURE_COUNT: usize = 9;

/// Exact CSV header, features `N1..N9` followed by the label.
pub const CSV_HEADER: [&str; 10] = [
    "uav_lat",
    "uav_lon",
    "uav_elev_angle",
    "cell_lat",
    "cell_lon",
    "cell_elev",
    "cell_building",
    "mast_height",
    "uav_alt",
    "rss",
];

/// Upper edge of the flight envelope, meters above ground.
pub const MAX_UAV_ALTITUDE_M: f64 = 300.0;

const METERS_PER_DEGREE_LAT: f64 = 111_320.0;

/// One measurement: nine input features and the received power in dBm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureRow {
    /// N1, degrees.
    pub uav_lat: f64,
    /// N2, degrees.
    pub uav_lon: f64,
    /// N3, degrees above the horizon as seen from the serving antenna.
    pub uav_elev_angle: f64,
    /// N4, degrees.
    pub cell_lat: f64,
    /// N5, degrees.
    pub cell_lon: f64,
    /// N6, ground elevation of the cell site, meters.
    pub cell_elev: f64,
    /// N7, building height under the antenna, meters.
    pub cell_building: f64,
    /// N8, meters.
    pub mast_height: f64,
    /// N9, meters above ground.
    pub uav_alt: f64,
    /// dBm.
    pub rss: f64,
}

impl FeatureRow {
    pub fn features(&self) -> [f64; FEATURE_COUNT] {
        [
            self.uav_lat,
            self.uav_lon,
            self.uav_elev_angle,
            self.cell_lat,
            self.cell_lon,
            self.cell_elev,
            self.cell_building,
            self.mast_height,
            self.uav_alt,
        ]
    }

    pub fn from_values(values: [f64; 10]) -> Self {
        let [uav_lat, uav_lon, uav_elev_angle, cell_lat, cell_lon, cell_elev, cell_building, mast_height, uav_alt, rss] =
            values;
        Self {
            uav_lat,
            uav_lon,
            uav_elev_angle,
            cell_lat,
            cell_lon,
            cell_elev,
            cell_building,
            mast_height,
            uav_alt,
            rss,
        }
    }

    fn values(&self) -> [f64; 10] {
        let f = self.features();
        [
            f[0], f[1], f[2], f[3], f[4], f[5], f[6], f[7], f[8], self.rss,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.values().iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledDataset {
    pub rows: Vec<FeatureRow>,
}

impl LabeledDataset {
    pub fn new(rows: Vec<FeatureRow>) -> Self {
        Self { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `N × 9` feature matrix.
    pub fn features(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows.len(), FEATURE_COUNT));
        for (mut dst, row) in out.rows_mut().into_iter().zip(&self.rows) {
            dst.assign(&Array1::from(row.features().to_vec()));
        }
        out
    }

    pub fn rss(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.rss).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self::new(indices.iter().map(|&i| self.rows[i]).collect())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = csv::Writer::from_writer(file);
        let to_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        writer.write_record(CSV_HEADER).map_err(to_err)?;
        for row in &self.rows {
            // `Display` for f64 prints the shortest string that parses back bit-exactly.
            writer
                .write_record(row.values().iter().map(|v| v.to_string()))
                .map_err(to_err)?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let rows = read_columns::<10>(path.as_ref(), CSV_HEADER)?;
        Ok(Self::new(
            rows.into_iter().map(FeatureRow::from_values).collect(),
        ))
    }
}

/// Reads the nine feature columns of a CSV; an `rss` column is not required.
pub fn load_features_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let mut names = [""; FEATURE_COUNT];
    names.copy_from_slice(&CSV_HEADER[..FEATURE_COUNT]);
    let rows = read_columns::<FEATURE_COUNT>(path.as_ref(), names)?;
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Array2::from_shape_vec((rows.len(), FEATURE_COUNT), flat).expect("row width is fixed"))
}

/// Reads the named columns, in the given order, from a headed CSV.
fn read_columns<const N: usize>(path: &Path, names: [&str; N]) -> Result<Vec<[f64; N]>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if header.is_empty() || header.iter().all(|h| h.trim().is_empty()) {
        return Err(parse_err(1, "empty file".into()));
    }
    let mut columns = [0usize; N];
    for (slot, name) in columns.iter_mut().zip(names) {
        *slot = header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let mut values = [0.0; N];
        for (k, (&col, name)) in columns.iter().zip(names).enumerate() {
            let field = record
                .get(col)
                .ok_or_else(|| parse_err(line, format!("missing value for `{name}`")))?;
            let value: f64 = field.trim().parse().map_err(|_| {
                parse_err(
                    line,
                    format!("malformed number `{field}` in column `{name}`"),
                )
            })?;
            if !value.is_finite() {
                return Err(parse_err(
                    line,
                    format!("non-finite value in column `{name}`"),
                ));
            }
            values[k] = value;
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(parse_err(1, "no data rows".into()));
    }
    Ok(rows)
}

/// Parameters of the synthetic channel and flight geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub path_loss_exponent: f64,
    /// Path loss at 1 m, dB.
    pub reference_loss_db: f64,
    pub tx_power_dbm: f64,
    /// Standard deviation of the shadowing field, dB.
    pub shadowing_db: f64,
    /// Correlation length of the shadowing field, meters.
    pub shadowing_decorrelation_m: f64,
    /// Line-of-sight gain approached at high altitude, dB.
    pub los_gain_db: f64,
    /// Altitude scale of the line-of-sight gain, meters.
    pub los_altitude_m: f64,
    pub n_cells: usize,
    /// Number of measurement areas; the UAV climbs through each one.
    pub n_sites: usize,
    /// Radius of the region holding cells and measurement areas, meters.
    pub region_radius_m: f64,
    /// Horizontal radius of one measurement area, meters.
    pub site_radius_m: f64,
    /// Take-off ground elevation shared by all measurement areas, meters.
    pub ground_elevation_m: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Drives geometry and flight positions.
    pub seed: u64,
    /// Drives the shadowing field.
    pub noise_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_train: 710,
            n_test: 177,
            path_loss_exponent: 3.0,
            reference_loss_db: 40.0,
            tx_power_dbm: 43.0,
            shadowing_db: 6.0,
            shadowing_decorrelation_m: 500.0,
            los_gain_db: 10.0,
            los_altitude_m: 60.0,
            n_cells: 6,
            n_sites: 8,
            region_radius_m: 2500.0,
            site_radius_m: 150.0,
            ground_elevation_m: 650.0,
            origin_lat: 37.51,
            origin_lon: 22.37,
            seed: 2023,
            noise_seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::InvalidParameter(
                "n_train and n_test must be positive".into(),
            ));
        }
        if self.n_cells == 0 || self.n_sites == 0 {
            return Err(Error::InvalidParameter(
                "n_cells and n_sites must be positive".into(),
            ));
        }
        if !(self.shadowing_db >= 0.0) {
            return Err(Error::InvalidParameter(
                "shadowing_db must be non-negative".into(),
            ));
        }
        for (name, v) in [
            ("shadowing_decorrelation_m", self.shadowing_decorrelation_m),
            ("los_altitude_m", self.los_altitude_m),
            ("region_radius_m", self.region_radius_m),
            ("site_radius_m", self.site_radius_m),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn total_rows(&self) -> usize {
        self.n_train + self.n_test
    }

    /// Line-of-sight gain in dB at `altitude_m` above ground.
    pub fn los_gain(&self, altitude_m: f64) -> f64 {
        self.los_gain_db * (1.0 - (-altitude_m / self.los_altitude_m).exp())
    }

    fn to_lat_lon(&self, east_m: f64, north_m: f64) -> (f64, f64) {
        let lat = self.origin_lat + north_m / METERS_PER_DEGREE_LAT;
        let lon =
            self.origin_lon + east_m / (METERS_PER_DEGREE_LAT * self.origin_lat.to_radians().cos());
        (lat, lon)
    }
}

#[derive(Debug, Clone)]
struct CellSite {
    east: f64,
    north: f64,
    ground: f64,
    building: f64,
    mast: f64,
}

impl CellSite {
    fn antenna_height(&self) -> f64 {
        self.ground + self.building + self.mast
    }
}

/// Random Fourier approximation of a squared-exponential Gaussian field.
#[derive(Debug, Clone)]
struct ShadowField {
    frequencies: Vec<[f64; 3]>,
    phases: Vec<f64>,
    amplitude: f64,
}

impl ShadowField {
    const FEATURES: usize = 128;

    fn sample(stdev: f64, length: f64, rng: &mut ChaCha8Rng) -> Self {
        let freq = Normal::new(0.0, 1.0 / length).expect("positive length");
        let frequencies = (0..Self::FEATURES)
            .map(|_| [freq.sample(rng), freq.sample(rng), freq.sample(rng)])
            .collect();
        let phases = (0..Self::FEATURES)
            .map(|_| rng.random_range(0.0..2.0 * PI))
            .collect();
        Self {
            frequencies,
            phases,
            amplitude: stdev * (2.0 / Self::FEATURES as f64).sqrt(),
        }
    }

    fn at(&self, point: [f64; 3]) -> f64 {
        if self.amplitude == 0.0 {
            return 0.0;
        }
        let sum: f64 = self
            .frequencies
            .iter()
            .zip(&self.phases)
            .map(|(w, phi)| (w[0] * point[0] + w[1] * point[1] + w[2] * point[2] + phi).cos())
            .sum();
        self.amplitude * sum
    }
}

fn uniform_in_disk(radius: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let theta = rng.random_range(0.0..2.0 * PI);
    (r * theta.cos(), r * theta.sin())
}

/// Generates `n_train + n_test` rows. Deterministic in `(seed, noise_seed)`.
///
/// Each row picks a measurement area and a point of the climb through it,
/// attaches to the strongest cell, and records that cell's site data.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let mut geo = rng::stream(cfg.seed, 0);
    let cells: Vec<CellSite> = (0..cfg.n_cells)
        .map(|_| {
            let (east, north) = uniform_in_disk(cfg.region_radius_m, &mut geo);
            CellSite {
                east,
                north,
                ground: cfg.ground_elevation_m + geo.random_range(-30.0..80.0),
                building: geo.random_range(0.0..25.0),
                mast: geo.random_range(15.0..40.0),
            }
        })
        .collect();
    let sites: Vec<(f64, f64)> = (0..cfg.n_sites)
        .map(|_| uniform_in_disk(0.8 * cfg.region_radius_m, &mut geo))
        .collect();

    let mut noise = rng::stream(cfg.noise_seed, 1);
    let fields: Vec<ShadowField> = cells
        .iter()
        .map(|_| ShadowField::sample(cfg.shadowing_db, cfg.shadowing_decorrelation_m, &mut noise))
        .collect();

    let mut flight = rng::stream(cfg.seed, 2);
    let mut rows = Vec::with_capacity(cfg.total_rows());
    while rows.len() < cfg.total_rows() {
        let (site_e, site_n) = sites[flight.random_range(0..sites.len())];
        let (de, dn) = uniform_in_disk(cfg.site_radius_m, &mut flight);
        let (east, north) = (site_e + de, site_n + dn);
        let altitude = flight.random_range(0.0..=MAX_UAV_ALTITUDE_M);
        let height = cfg.ground_elevation_m + altitude;

        let mut best: Option<(f64, usize, f64, f64)> = None;
        for (c, cell) in cells.iter().enumerate() {
            let horizontal = (east - cell.east).hypot(north - cell.north);
            let vertical = height - cell.antenna_height();
            let distance = horizontal.hypot(vertical);
            if distance < 1.0 {
                continue;
            }
            let shadow = fields[c].at([east, north, altitude]);
            let rss = cfg.tx_power_dbm
                - cfg.reference_loss_db
                - 10.0 * cfg.path_loss_exponent * distance.log10()
                + cfg.los_gain(altitude)
                - shadow;
            let angle = vertical.atan2(horizontal).to_degrees();
            if best.is_none_or(|(b, ..)| rss > b) {
                best = Some((rss, c, angle, distance));
            }
        }
        // Degenerate geometry (UAV on top of every antenna) is resampled.
        let Some((rss, c, angle, _)) = best else {
            continue;
        };
        let cell = &cells[c];
        let (uav_lat, uav_lon) = cfg.to_lat_lon(east, north);
        let (cell_lat, cell_lon) = cfg.to_lat_lon(cell.east, cell.north);
        rows.push(FeatureRow {
            uav_lat,
            uav_lon,
            uav_elev_angle: angle,
            cell_lat,
            cell_lon,
            cell_elev: cell.ground,
            cell_building: cell.building,
            mast_height: cell.mast,
            uav_alt: altitude,
            rss,
        });
    }
    Ok(LabeledDataset::new(rows))
}

/// Per-feature affine map to zero mean and unit variance.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardizationStats {
    pub mean: Array1<f64>,
    pub stdev: Array1<f64>,
}

impl StandardizationStats {
    pub const STDEV_FLOOR: f64 = 1e-9;

    /// Population mean and standard deviation of every column.
    pub fn fit(data: &Array2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::Empty("data"));
        }
        let n = data.nrows() as f64;
        let mut mean = Array1::zeros(data.ncols());
        let mut stdev = Array1::zeros(data.ncols());
        for (k, col) in data.columns().into_iter().enumerate() {
            let first = col[0];
            if col.iter().all(|&x| x == first) {
                mean[k] = first;
                stdev[k] = Self::STDEV_FLOOR;
                log::warn!(
                    "feature {k} has zero variance; standard deviation floored at {}",
                    Self::STDEV_FLOOR
                );
                continue;
            }
            let rough = col.sum() / n;
            let m = rough + col.iter().map(|&x| x - rough).sum::<f64>() / n;
            let var = col.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / n;
            mean[k] = m;
            stdev[k] = var.sqrt().max(Self::STDEV_FLOOR);
        }
        Ok(Self { mean, stdev })
    }

    pub fn apply(&self, data: &Array2<f64>) -> Result<Array2<f64>> {
        check_dim("standardization width", self.mean.len(), data.ncols())?;
        let mut out = data.clone();
        for mut row in out.rows_mut() {
            row.zip_mut_with(&self.mean, |x, m| *x -= m);
            row.zip_mut_with(&self.stdev, |x, s| *x /= s);
        }
        Ok(out)
    }

    pub fn apply_row(&self, row: &[f64]) -> Result<Array1<f64>> {
        check_dim("standardization width", self.mean.len(), row.len())?;
        Ok(Array1::from_iter(
            row.iter()
                .zip(self.mean.iter().zip(self.stdev.iter()))
                .map(|(x, (m, s))| (x - m) / s),
        ))
    }
}

/// Standardizes with `stats` when given, otherwise with statistics fitted to `data`.
pub fn standardize(
    data: &Array2<f64>,
    stats: Option<&StandardizationStats>,
) -> Result<(Array2<f64>, StandardizationStats)> {
    if data.nrows() == 0 {
        return Err(Error::Empty("data"));
    }
    let stats = match stats {
        Some(s) => s.clone(),
        None => StandardizationStats::fit(data)?,
    };
    Ok((stats.apply(data)?, stats))
}

/// Shuffled, disjoint, exhaustive split with `n_train` training rows.
pub fn split(
    data: &LabeledDataset,
    n_train: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if n_train == 0 || n_train >= data.len() {
        return Err(Error::InvalidParameter(format!(
            "n_train {n_train} must lie in 1..{}",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng::seeded(seed));
    let (train, test) = order.split_at(n_train);
    Ok((data.select(train), data.select(test)))
}

/// Equal-width bins over the training label range.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    pub min: f64,
    pub max: f64,
    pub bins: usize,
}

impl Quantizer {
    pub fn fit(values: &[f64], bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 bins, got {bins}"
            )));
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(min.is_finite() && max.is_finite() && max > min) {
            return Err(Error::InvalidParameter(format!(
                "degenerate label range [{min}, {max}]"
            )));
        }
        Ok(Self { min, max, bins })
    }

    pub fn width(&self) -> f64 {
        (self.max - self.min) / self.bins as f64
    }

    /// Bin index; values outside the fitted range clamp to the end bins.
    pub fn label(&self, value: f64) -> usize {
        let k = ((value - self.min) / self.width()).floor();
        if k < 0.0 {
            0
        } else {
            (k as usize).min(self.bins - 1)
        }
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.width();
        (0..self.bins)
            .map(|k| self.min + (k as f64 + 0.5) * w)
            .collect()
    }
}

/// Labels every value and returns the fitted bin centers.
pub fn quantize_labels(values: &[f64], bins: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let q = Quantizer::fit(values, bins)?;
    Ok((values.iter().map(|&v| q.label(v)).collect(), q.centers()))
}

/// Fraction of predictions within `tolerance` of the truth.
pub fn accuracy(pred: &[f64], truth: &[f64], tolerance: f64) -> Result<f64> {
    check_dim("prediction count", truth.len(), pred.len())?;
    if pred.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| (*p - *t).abs() <= tolerance)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}
