//! Improved MUSIC estimation for the two-antenna platform.
//!
//! A single 2 x 56 CSI frame carries too few sensor rows for subspace
//! estimation, so the frame is rearranged into a smoothed matrix whose rows
//! stack a sliding window of 19 consecutive subcarriers per antenna and
//! whose columns are the window shifts. With the default 56 subcarriers the
//! result is square, 38 x 38, and the steering vector extends accordingly
//! with a time-of-flight phase ramp. The pseudo-spectrum is then evaluated
//! jointly over (angle, ToF).

use nalgebra::{DMatrix, DVector, Point2};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io::Write;

use crate::array::{
    grating_lobe_family, phase_shift_aoa, steering_vector_nearfield, AoaPeak, ArrayConfig,
    NodePose, SPEED_OF_LIGHT,
};
use crate::channel::CsiFrame;
use crate::error::{Error, Result};

/// Window length (subcarriers per antenna block) that balances the smoothed
/// matrix: antenna_count * W rows vs (subcarriers - W + 1) columns.
pub fn smoothing_window(subcarrier_count: usize, antenna_count: usize) -> usize {
    (((subcarrier_count + 1) as f64) / ((antenna_count + 1) as f64)).round() as usize
}

/// The rearranged CSI matrix used by the improved estimator.
#[derive(Debug, Clone)]
pub struct SmoothedMatrix {
    /// (antenna_count * window) x (subcarriers - window + 1) complex matrix.
    pub matrix: DMatrix<Complex64>,
    pub window: usize,
    pub antenna_count: usize,
}

/// Rearrange a CSI frame: column c stacks, antenna-major, the window of
/// subcarriers [c, c + window) for each antenna.
pub fn build_smoothed_matrix(frame: &CsiFrame) -> Result<SmoothedMatrix> {
    let antennas = frame.antenna_count();
    let subcarriers = frame.subcarrier_count();
    if antennas < 2 {
        return Err(Error::InvalidArgument(format!(
            "smoothing needs >= 2 antennas, got {antennas}"
        )));
    }
    if subcarriers < 20 {
        return Err(Error::InvalidArgument(format!(
            "smoothing needs >= 20 subcarriers, got {subcarriers}"
        )));
    }
    let window = smoothing_window(subcarriers, antennas);
    let shifts = subcarriers - window + 1;
    let mut matrix = DMatrix::<Complex64>::zeros(antennas * window, shifts);
    for c in 0..shifts {
        for a in 0..antennas {
            for w in 0..window {
                matrix[(a * window + w, c)] = frame.matrix[(a, c + w)];
            }
        }
    }
    Ok(SmoothedMatrix {
        matrix,
        window,
        antenna_count: antennas,
    })
}

/// Per-subcarrier phase factor for a path delay: `exp(-j 2 pi df tau)`.
pub fn tof_phase(tof: f64, config: &ArrayConfig) -> Complex64 {
    Complex64::from_polar(1.0, -TAU * config.subcarrier_spacing * tof)
}

/// Extended steering vector over antenna index a and window offset w:
/// element (a * window + w) equals `Phi(theta)^a * Psi(tau)^w`, matching the
/// smoothed-matrix stacking order.
pub fn extended_steering(theta: f64, tof: f64, config: &ArrayConfig) -> DVector<Complex64> {
    let window = smoothing_window(config.subcarrier_count, config.antenna_count);
    extended_steering_with_window(theta, tof, config, window)
}

fn extended_steering_with_window(
    theta: f64,
    tof: f64,
    config: &ArrayConfig,
    window: usize,
) -> DVector<Complex64> {
    let phi = phase_shift_aoa(theta, config);
    let psi = tof_phase(tof, config);
    let mut v = DVector::<Complex64>::zeros(config.antenna_count * window);
    let mut phi_pow = Complex64::new(1.0, 0.0);
    for a in 0..config.antenna_count {
        let mut entry = phi_pow;
        for w in 0..window {
            v[a * window + w] = entry;
            entry *= psi;
        }
        phi_pow *= phi;
    }
    v
}

/// Near-field extended steering for a candidate source position: exact
/// per-element path-difference phases combined with the ToF ramp implied by
/// the distance to element 0.
pub fn extended_steering_nearfield(
    source: &Point2<f64>,
    pose: &NodePose,
    config: &ArrayConfig,
) -> Result<DVector<Complex64>> {
    let window = smoothing_window(config.subcarrier_count, config.antenna_count);
    let phases = steering_vector_nearfield(source, pose, config)?;
    let tof = (source - pose.position).norm() / SPEED_OF_LIGHT;
    let psi = tof_phase(tof, config);
    let mut v = DVector::<Complex64>::zeros(config.antenna_count * window);
    for (a, phi) in phases.iter().enumerate() {
        let mut entry = *phi;
        for w in 0..window {
            v[a * window + w] = entry;
            entry *= psi;
        }
    }
    Ok(v)
}

/// Estimator parameters. The defaults follow the deployed construction:
/// 0.5 degree angle grid, 2.5 ns ToF grid up to 200 ns, peaks kept above 5%
/// of the global maximum, and automatic model order with a 10x eigenvalue
/// threshold over the noise floor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MusicParams {
    pub angle_step: f64,
    pub tof_max: f64,
    pub tof_step: f64,
    pub peak_floor: f64,
    pub signal_threshold: f64,
    /// Per-node confidence half-width attached to emitted profiles.
    pub error_range: f64,
}

impl Default for MusicParams {
    fn default() -> Self {
        Self {
            angle_step: 0.5f64.to_radians(),
            tof_max: 200e-9,
            tof_step: 2.5e-9,
            peak_floor: 0.05,
            signal_threshold: 10.0,
            error_range: 8f64.to_radians(),
        }
    }
}

impl MusicParams {
    pub fn angle_grid(&self) -> Vec<f64> {
        let half = std::f64::consts::FRAC_PI_2;
        let n = (2.0 * half / self.angle_step).round() as usize;
        (0..=n).map(|i| -half + i as f64 * self.angle_step).collect()
    }

    pub fn tof_grid(&self) -> Vec<f64> {
        let n = (self.tof_max / self.tof_step).round() as usize;
        (0..=n).map(|i| i as f64 * self.tof_step).collect()
    }
}

/// Joint (angle, ToF) pseudo-spectrum with extracted peaks.
#[derive(Debug, Clone)]
pub struct AoaProfile {
    pub angle_grid: Vec<f64>,
    pub tof_grid: Vec<f64>,
    /// angle x ToF spectrum values.
    pub spectrum: DMatrix<f64>,
    /// Local maxima above the peak floor, sorted by descending power.
    pub peaks: Vec<AoaPeak>,
    /// Confidence half-width of angle estimates, radians.
    pub error_range: f64,
}

impl AoaProfile {
    /// Export all grid cells as CSV rows `angle,tof,power` (angle in
    /// radians, tof in seconds).
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "angle,tof,power")?;
        for (i, theta) in self.angle_grid.iter().enumerate() {
            for (j, tof) in self.tof_grid.iter().enumerate() {
                writeln!(writer, "{theta},{tof},{}", self.spectrum[(i, j)])?;
            }
        }
        Ok(())
    }

    /// Compact per-node record: peak families plus the error range, which is
    /// everything fusion needs, so nodes never ship whole CSI traces.
    pub fn summary(&self, config: &ArrayConfig) -> ProfileSummary {
        let families = group_peaks_into_families(&self.peaks, config, None);
        ProfileSummary {
            families: families
                .iter()
                .map(|f| FamilySummary {
                    angles: f.members.iter().map(|p| p.angle).collect(),
                    strongest_angle: f.strongest().angle,
                    tof: f.strongest().tof,
                    power: f.strongest().power,
                })
                .collect(),
            error_range: self.error_range,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub families: Vec<FamilySummary>,
    pub error_range: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilySummary {
    pub angles: Vec<f64>,
    pub strongest_angle: f64,
    pub tof: f64,
    pub power: f64,
}

/// A set of peaks that are grating aliases of one physical path.
#[derive(Debug, Clone)]
pub struct GratingFamily {
    /// Members sorted by descending power.
    pub members: Vec<AoaPeak>,
}

impl GratingFamily {
    pub fn strongest(&self) -> &AoaPeak {
        &self.members[0]
    }

    /// Observed member angles.
    pub fn member_angles(&self) -> Vec<f64> {
        self.members.iter().map(|p| p.angle).collect()
    }

    /// Analytic grating family of the strongest member; more robust than the
    /// observed members when weak aliases fall below the peak floor.
    pub fn analytic_angles(&self, config: &ArrayConfig) -> Vec<f64> {
        grating_lobe_family(self.strongest().angle, config)
    }

    pub fn min_tof(&self) -> f64 {
        self.members
            .iter()
            .map(|p| p.tof)
            .fold(f64::INFINITY, f64::min)
    }
}

struct EigenBasis {
    /// Eigenvectors as columns, sorted by descending eigenvalue.
    vectors: DMatrix<Complex64>,
    /// Eigenvalues, descending.
    values: Vec<f64>,
}

fn sorted_eigen(covariance: DMatrix<Complex64>) -> Result<EigenBasis> {
    let dim = covariance.nrows();
    let eig = covariance.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    if values[0] <= 1e-30 {
        return Err(Error::EstimationFailed(
            "degenerate input: covariance has no energy".into(),
        ));
    }
    let mut vectors = DMatrix::<Complex64>::zeros(dim, dim);
    for (k, &i) in order.iter().enumerate() {
        vectors.set_column(k, &eig.eigenvectors.column(i));
    }
    Ok(EigenBasis { vectors, values })
}

/// Count eigenvalues above `threshold x noise floor`, where the floor is the
/// mean of the smaller half (guarded by a relative floor for noiseless
/// input).
fn auto_signal_dim(values: &[f64], threshold: f64) -> usize {
    let half = &values[values.len() / 2..];
    let mean_small: f64 = half.iter().sum::<f64>() / half.len() as f64;
    let floor = mean_small.max(values[0] * 1e-12);
    values
        .iter()
        .filter(|&&v| v > threshold * floor)
        .count()
        .clamp(1, values.len() - 1)
}

fn averaged_covariance(frames: &[&SmoothedMatrix]) -> Result<DMatrix<Complex64>> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("no smoothed matrices given".into()));
    }
    let dim = frames[0].matrix.nrows();
    let mut cov = DMatrix::<Complex64>::zeros(dim, dim);
    for f in frames {
        if f.matrix.nrows() != dim {
            return Err(Error::InvalidArgument(
                "smoothed matrices have mismatched dimensions".into(),
            ));
        }
        cov += &f.matrix * f.matrix.adjoint();
    }
    Ok(cov / Complex64::new(frames.len() as f64, 0.0))
}

/// MUSIC pseudo-spectrum over an (angle, ToF) grid for one smoothed matrix.
pub fn music_spectrum(
    smoothed: &SmoothedMatrix,
    angle_grid: &[f64],
    tof_grid: &[f64],
    config: &ArrayConfig,
    signal_dim: Option<usize>,
    params: &MusicParams,
) -> Result<AoaProfile> {
    music_spectrum_multi(&[smoothed], angle_grid, tof_grid, config, signal_dim, params)
}

/// Same estimator with the autocorrelation averaged over several packets.
pub fn music_spectrum_multi(
    smoothed: &[&SmoothedMatrix],
    angle_grid: &[f64],
    tof_grid: &[f64],
    config: &ArrayConfig,
    signal_dim: Option<usize>,
    params: &MusicParams,
) -> Result<AoaProfile> {
    let cov = averaged_covariance(smoothed)?;
    let dim = cov.nrows();
    let window = smoothed[0].window;
    let antennas = smoothed[0].antenna_count;
    let basis = sorted_eigen(cov)?;
    let p = match signal_dim {
        Some(p) if p >= dim => {
            return Err(Error::InvalidArgument(format!(
                "signal_dim {p} must be below the space dimension {dim}"
            )))
        }
        Some(p) => p.max(1),
        None => auto_signal_dim(&basis.values, params.signal_threshold),
    };
    let signal = basis.vectors.columns(0, p).into_owned();

    // ||E_noise^H s||^2 = ||s||^2 - ||E_signal^H s||^2 with a unitary eigen
    // basis, so projecting on the (small) signal space is enough. The
    // steering vector factorizes over (antenna, window offset); fold the
    // window sums per ToF first, then sweep angles.
    let norm_sq = dim as f64;
    let spectrum_rows: Vec<Vec<f64>> = angle_grid
        .par_iter()
        .map(|&theta| {
            let phi = phase_shift_aoa(theta, config);
            let mut phi_pows = Vec::with_capacity(antennas);
            let mut cur = Complex64::new(1.0, 0.0);
            for _ in 0..antennas {
                phi_pows.push(cur);
                cur *= phi;
            }
            tof_grid
                .iter()
                .map(|&tof| {
                    let psi = tof_phase(tof, config);
                    let mut sig_energy = 0.0;
                    for k in 0..p {
                        let e = signal.column(k);
                        let mut proj = Complex64::new(0.0, 0.0);
                        for (a, phi_a) in phi_pows.iter().enumerate() {
                            // Window sum: sum_w conj(e[a*W+w]) Psi^w.
                            let mut acc = Complex64::new(0.0, 0.0);
                            let mut psi_pow = Complex64::new(1.0, 0.0);
                            for w in 0..window {
                                acc += e[a * window + w].conj() * psi_pow;
                                psi_pow *= psi;
                            }
                            proj += phi_a * acc;
                        }
                        sig_energy += proj.norm_sqr();
                    }
                    1.0 / (norm_sq - sig_energy).max(1e-12)
                })
                .collect()
        })
        .collect();

    let mut spectrum = DMatrix::<f64>::zeros(angle_grid.len(), tof_grid.len());
    for (i, row) in spectrum_rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            spectrum[(i, j)] = v;
        }
    }
    let peaks = extract_peaks(&spectrum, angle_grid, tof_grid, params.peak_floor);
    Ok(AoaProfile {
        angle_grid: angle_grid.to_vec(),
        tof_grid: tof_grid.to_vec(),
        spectrum,
        peaks,
        error_range: params.error_range,
    })
}

/// Single-eigendirection spectrum (conventional projection on the dominant
/// eigenvector), the "one non-zero eigenvalue" construction. Its main lobe
/// is broader than the subspace estimator's.
pub fn bartlett_spectrum(
    smoothed: &SmoothedMatrix,
    angle_grid: &[f64],
    tof_grid: &[f64],
    config: &ArrayConfig,
) -> Result<DMatrix<f64>> {
    let cov = averaged_covariance(&[smoothed])?;
    let dim = cov.nrows();
    let basis = sorted_eigen(cov)?;
    let top = basis.vectors.column(0).into_owned();
    let window = smoothed.window;
    let mut spectrum = DMatrix::<f64>::zeros(angle_grid.len(), tof_grid.len());
    for (i, &theta) in angle_grid.iter().enumerate() {
        for (j, &tof) in tof_grid.iter().enumerate() {
            let s = extended_steering_with_window(theta, tof, config, window);
            let proj: Complex64 = top.dotc(&s);
            spectrum[(i, j)] = proj.norm_sqr() / dim as f64;
        }
    }
    Ok(spectrum)
}

/// MUSIC over candidate positions with the near-field steering model, for
/// sources within the near scope where the planar-wave approximation breaks.
pub fn nearfield_spectrum(
    smoothed: &SmoothedMatrix,
    positions: &[Point2<f64>],
    pose: &NodePose,
    config: &ArrayConfig,
    signal_dim: Option<usize>,
    params: &MusicParams,
) -> Result<Vec<f64>> {
    let cov = averaged_covariance(&[smoothed])?;
    let dim = cov.nrows();
    let basis = sorted_eigen(cov)?;
    let p = match signal_dim {
        Some(p) if p >= dim => {
            return Err(Error::InvalidArgument(format!(
                "signal_dim {p} must be below the space dimension {dim}"
            )))
        }
        Some(p) => p.max(1),
        None => auto_signal_dim(&basis.values, params.signal_threshold),
    };
    let signal = basis.vectors.columns(0, p).into_owned();
    positions
        .iter()
        .map(|pos| {
            let s = extended_steering_nearfield(pos, pose, config)?;
            let mut sig_energy = 0.0;
            for k in 0..p {
                sig_energy += signal.column(k).dotc(&s).norm_sqr();
            }
            Ok(1.0 / (dim as f64 - sig_energy).max(1e-12))
        })
        .collect()
}

/// Strict 2-D local maxima above `floor x global max`.
fn extract_peaks(
    spectrum: &DMatrix<f64>,
    angle_grid: &[f64],
    tof_grid: &[f64],
    floor: f64,
) -> Vec<AoaPeak> {
    let (rows, cols) = spectrum.shape();
    let global_max = spectrum.iter().cloned().fold(0.0f64, f64::max);
    let threshold = global_max * floor;
    let mut peaks = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let v = spectrum[(i, j)];
            if v < threshold {
                continue;
            }
            let mut is_peak = true;
            'scan: for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let ni = i as i64 + di;
                    let nj = j as i64 + dj;
                    if ni < 0 || nj < 0 || ni >= rows as i64 || nj >= cols as i64 {
                        continue;
                    }
                    if spectrum[(ni as usize, nj as usize)] >= v {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            if is_peak {
                peaks.push(AoaPeak {
                    angle: angle_grid[i],
                    power: v,
                    tof: tof_grid[j],
                });
            }
        }
    }
    peaks.sort_by(|a, b| b.power.total_cmp(&a.power));
    peaks
}

/// Group profile peaks into grating families: each unassigned strongest peak
/// seeds a family and absorbs peaks lying on its analytic alias angles (and
/// at a compatible ToF).
pub fn profile_peaks_with_ambiguity(
    profile: &AoaProfile,
    config: &ArrayConfig,
) -> Vec<GratingFamily> {
    group_peaks_into_families(&profile.peaks, config, None)
}

/// Same grouping with explicit matching tolerances `(angle_tol, tof_tol)`.
pub fn group_peaks_into_families(
    peaks: &[AoaPeak],
    config: &ArrayConfig,
    tolerances: Option<(f64, f64)>,
) -> Vec<GratingFamily> {
    let (angle_tol, tof_tol) = tolerances.unwrap_or((1.0f64.to_radians(), 10e-9));
    let mut assigned = vec![false; peaks.len()];
    let mut families = Vec::new();
    for seed in 0..peaks.len() {
        if assigned[seed] {
            continue;
        }
        assigned[seed] = true;
        let alias_angles = grating_lobe_family(peaks[seed].angle, config);
        let mut members = vec![peaks[seed]];
        for (idx, peak) in peaks.iter().enumerate() {
            if assigned[idx] {
                continue;
            }
            let on_alias = alias_angles
                .iter()
                .any(|&a| (a - peak.angle).abs() <= angle_tol);
            if on_alias && (peak.tof - peaks[seed].tof).abs() <= tof_tol {
                assigned[idx] = true;
                members.push(*peak);
            }
        }
        families.push(GratingFamily { members });
    }
    families
}
