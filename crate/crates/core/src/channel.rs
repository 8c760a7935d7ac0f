//! Synthetic CSI and RSSI generation for configurable multipath scenes.
//! Everything is deterministic given explicit seeds, so scenes double as
//! replayable ground truth for the estimator and fusion tests.

use nalgebra::{DMatrix, Point2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::io::Write;

use crate::array::{phase_shift_aoa, ArrayConfig, NodePose, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::geom::Rect;

/// z-value with `P(|X| <= z sigma) = 0.90` for a Gaussian; the AOA error
/// model is calibrated so the +-error_range window covers 90% of draws.
const Z_90: f64 = 1.644_853_626_951_472_2;

/// One propagation path between a source and a node array.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PropagationPath {
    /// Arrival angle at the array, radians from the normal.
    pub aoa: f64,
    /// Time of flight, seconds.
    pub tof: f64,
    /// Complex attenuation of the path.
    pub attenuation: Complex64,
    /// Whether this is the direct (line-of-sight) path.
    pub is_direct: bool,
}

/// Channel measurements for one received packet: one complex entry per
/// antenna per subcarrier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsiFrame {
    /// antenna_count x subcarrier_count matrix.
    pub matrix: DMatrix<Complex64>,
    /// Noise seed the frame was generated with, if any noise was added.
    pub noise_seed: Option<u64>,
}

impl CsiFrame {
    pub fn antenna_count(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn subcarrier_count(&self) -> usize {
        self.matrix.ncols()
    }

    /// Export as CSV rows `antenna,subcarrier,re,im`.
    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        writeln!(writer, "antenna,subcarrier,re,im")?;
        for a in 0..self.matrix.nrows() {
            for s in 0..self.matrix.ncols() {
                let z = self.matrix[(a, s)];
                writeln!(writer, "{a},{s},{},{}", z.re, z.im)?;
            }
        }
        Ok(())
    }
}

/// Log-distance path loss parameters of one device.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RssiModel {
    /// RSSI observed at 1 m, dB.
    pub reference_power: f64,
    /// Path loss exponent, dimensionless, in [1, 6].
    pub path_loss_exponent: f64,
    /// Standard deviation of shadowing noise, dB.
    pub shadowing_sigma: f64,
}

impl RssiModel {
    pub fn new(reference_power: f64, path_loss_exponent: f64, shadowing_sigma: f64) -> Result<Self> {
        if !(1.0..=6.0).contains(&path_loss_exponent) {
            return Err(Error::InvalidArgument(format!(
                "path_loss_exponent must be in [1, 6], got {path_loss_exponent}"
            )));
        }
        if shadowing_sigma < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "shadowing_sigma must be non-negative, got {shadowing_sigma}"
            )));
        }
        Ok(Self {
            reference_power,
            path_loss_exponent,
            shadowing_sigma,
        })
    }

    /// Noiseless LDPL prediction at `distance` meters. Distances are clamped
    /// to 1 mm so candidate positions sitting on a node stay finite.
    pub fn predict(&self, distance: f64) -> f64 {
        self.reference_power - 10.0 * self.path_loss_exponent * distance.max(1e-3).log10()
    }
}

/// One network node of a scene: pose, array, and radio parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneNode {
    pub pose: NodePose,
    pub array: ArrayConfig,
    pub rssi: RssiModel,
}

/// A randomly generated simulation scene. `paths[i][t]` holds the
/// propagation paths from target `t` to node `i`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkScene {
    /// Schema version of the serialized document.
    pub version: u32,
    pub nodes: Vec<SceneNode>,
    pub targets: Vec<Point2<f64>>,
    pub space_bounds: Rect,
    pub rng_seed: u64,
    pub paths: Vec<Vec<Vec<PropagationPath>>>,
}

pub const SCENE_SCHEMA_VERSION: u32 = 1;

impl NetworkScene {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scene: NetworkScene = serde_json::from_str(text)?;
        if scene.version != SCENE_SCHEMA_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported scene schema version {}",
                scene.version
            )));
        }
        Ok(scene)
    }
}

/// Multipath profile for scene generation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MultipathProfile {
    /// Maximum number of reflected paths per node-target pair (drawn
    /// uniformly from 1..=path_count when positive).
    pub path_count: usize,
    /// Probability that a pair has no direct path.
    pub nlos_probability: f64,
    /// Per-path magnitude decay factor for reflected paths.
    pub attenuation_decay: f64,
}

impl Default for MultipathProfile {
    fn default() -> Self {
        Self {
            path_count: 2,
            nlos_probability: 0.0,
            attenuation_decay: 0.5,
        }
    }
}

/// Knobs for scene generation the stage simulation exposes.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SceneOptions {
    /// Shadowing sigma assigned to every generated RSSI model, dB.
    pub shadowing_sigma: f64,
    /// Uniform range for per-node reference power at 1 m, dB.
    pub reference_power_range: (f64, f64),
    /// Uniform range for per-node path loss exponents.
    pub path_loss_exponent_range: (f64, f64),
    /// Number of targets to place.
    pub target_count: usize,
    /// Array configuration shared by all nodes.
    pub array: ArrayConfig,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            shadowing_sigma: 2.0,
            // Chipset-style RSSI in dB above the noise floor: values cross
            // zero within a 30x50 m space, which the likelihood anchors rely
            // on.
            reference_power_range: (30.0, 40.0),
            path_loss_exponent_range: (2.0, 4.0),
            target_count: 1,
            array: ArrayConfig::laptop(),
        }
    }
}

/// Splitmix64-style seed derivation so parallel trials get decorrelated,
/// order-independent streams.
pub fn mix_seed(base: u64, salt: &[u64]) -> u64 {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &s in salt {
        state = state.wrapping_add(s).wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        state = z ^ (z >> 31);
    }
    state
}

/// Synthesize one CSI frame as the superposition of all paths plus circular
/// complex Gaussian noise at the given SNR (`None` = noiseless). Entry
/// (m, n) accumulates `gamma_k * Phi(theta_k)^m * Psi(tau_k)^n` over paths k,
/// where `Psi(tau) = exp(-j 2 pi subcarrier_spacing tau)`.
pub fn synthesize_csi(
    paths: &[PropagationPath],
    config: &ArrayConfig,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<CsiFrame> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("path list is empty".into()));
    }
    let rows = config.antenna_count;
    let cols = config.subcarrier_count;
    let mut matrix = DMatrix::<Complex64>::zeros(rows, cols);
    for path in paths {
        let phi = phase_shift_aoa(path.aoa, config);
        let psi = Complex64::from_polar(1.0, -TAU * config.subcarrier_spacing * path.tof);
        let mut row_factor = path.attenuation;
        for m in 0..rows {
            let mut entry = row_factor;
            for n in 0..cols {
                matrix[(m, n)] += entry;
                entry *= psi;
            }
            row_factor *= phi;
        }
    }
    let noise_seed = match snr_db {
        Some(snr) => {
            let signal_power =
                matrix.iter().map(|z| z.norm_sqr()).sum::<f64>() / (rows * cols) as f64;
            let noise_var = signal_power / 10f64.powf(snr / 10.0);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let normal = Normal::new(0.0, (noise_var / 2.0).sqrt())
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for z in matrix.iter_mut() {
                *z += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
            }
            Some(seed)
        }
        None => None,
    };
    Ok(CsiFrame { matrix, noise_seed })
}

/// LDPL RSSI observation with shadowing noise, deterministic per seed.
pub fn synthesize_rssi(distance: f64, model: &RssiModel, seed: u64) -> Result<f64> {
    if distance <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "distance must be positive, got {distance}"
        )));
    }
    let mean = model.reference_power - 10.0 * model.path_loss_exponent * distance.log10();
    if model.shadowing_sigma == 0.0 {
        return Ok(mean);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, model.shadowing_sigma)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(mean + normal.sample(&mut rng))
}

/// AOA observation drawn from the truncated-Gaussian error model: the base
/// sigma is fitted so the +-error_range window covers 90% of the untruncated
/// distribution, and draws outside the window are rejected, mirroring how
/// out-of-range measurements are excluded.
pub fn perturbed_aoa_observation(true_angle: f64, error_range: f64, seed: u64) -> f64 {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (true_angle + sample_aoa_error(error_range, &mut rng)).clamp(-FRAC_PI_2, FRAC_PI_2)
}

/// One truncated-Gaussian AOA error draw from an existing RNG stream.
pub fn sample_aoa_error<R: Rng>(error_range: f64, rng: &mut R) -> f64 {
    if error_range <= 0.0 {
        return 0.0;
    }
    let sigma = error_range / Z_90;
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for _ in 0..256 {
        let e: f64 = normal.sample(rng);
        if e.abs() <= error_range {
            return e;
        }
    }
    // Practically unreachable: 90% acceptance per draw.
    0.0
}

/// Generate a random scene: node poses, per-node radio parameters, target
/// placements, and per-pair propagation paths.
pub fn build_scene(
    space: Rect,
    node_count: usize,
    profile: &MultipathProfile,
    seed: u64,
) -> Result<NetworkScene> {
    build_scene_with(space, node_count, profile, &SceneOptions::default(), seed)
}

pub fn build_scene_with(
    space: Rect,
    node_count: usize,
    profile: &MultipathProfile,
    options: &SceneOptions,
    seed: u64,
) -> Result<NetworkScene> {
    if node_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "node_count must be >= 2, got {node_count}"
        )));
    }
    if options.target_count == 0 {
        return Err(Error::InvalidArgument("target_count must be >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let ux = Uniform::new(space.min.x, space.max.x).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let uy = Uniform::new(space.min.y, space.max.y).map_err(|e| Error::InvalidArgument(e.to_string()))?;

    let mut nodes = Vec::with_capacity(node_count);
    for _ in 0..node_count {
        let pose = NodePose::new(
            Point2::new(ux.sample(&mut rng), uy.sample(&mut rng)),
            rng.random_range(-PI..PI),
        );
        let rssi = RssiModel::new(
            rng.random_range(options.reference_power_range.0..=options.reference_power_range.1),
            rng.random_range(
                options.path_loss_exponent_range.0..=options.path_loss_exponent_range.1,
            ),
            options.shadowing_sigma,
        )?;
        nodes.push(SceneNode {
            pose,
            array: options.array,
            rssi,
        });
    }

    let targets: Vec<Point2<f64>> = (0..options.target_count)
        .map(|_| Point2::new(ux.sample(&mut rng), uy.sample(&mut rng)))
        .collect();

    let mut paths = Vec::with_capacity(node_count);
    for node in &nodes {
        let mut per_target = Vec::with_capacity(targets.len());
        for target in &targets {
            per_target.push(generate_paths(node, target, profile, &mut rng));
        }
        paths.push(per_target);
    }

    Ok(NetworkScene {
        version: SCENE_SCHEMA_VERSION,
        nodes,
        targets,
        space_bounds: space,
        rng_seed: seed,
        paths,
    })
}

fn generate_paths<R: Rng>(
    node: &SceneNode,
    target: &Point2<f64>,
    profile: &MultipathProfile,
    rng: &mut R,
) -> Vec<PropagationPath> {
    let distance = (target - node.pose.position).norm().max(1e-3);
    let direct_tof = distance / SPEED_OF_LIGHT;
    let direct_aoa = node.pose.observed_aoa(target, &node.array);
    let mut paths = Vec::new();
    let has_direct = rng.random::<f64>() >= profile.nlos_probability;
    if has_direct {
        paths.push(PropagationPath {
            aoa: direct_aoa,
            tof: direct_tof,
            attenuation: Complex64::from_polar(1.0, rng.random_range(-PI..PI)),
            is_direct: true,
        });
    }
    let reflected = if profile.path_count == 0 {
        0
    } else {
        rng.random_range(1..=profile.path_count)
    };
    let mut magnitude = 1.0;
    for _ in 0..reflected {
        magnitude *= profile.attenuation_decay;
        paths.push(PropagationPath {
            aoa: rng.random_range(-FRAC_PI_2..FRAC_PI_2),
            tof: direct_tof + rng.random_range(5e-9..100e-9),
            attenuation: Complex64::from_polar(magnitude, rng.random_range(-PI..PI)),
            is_direct: false,
        });
    }
    if paths.is_empty() {
        // nLOS with zero reflections configured: keep the channel non-empty
        // with a single weak reflected path.
        paths.push(PropagationPath {
            aoa: rng.random_range(-FRAC_PI_2..FRAC_PI_2),
            tof: direct_tof + rng.random_range(5e-9..100e-9),
            attenuation: Complex64::from_polar(profile.attenuation_decay.max(0.1), rng.random_range(-PI..PI)),
            is_direct: false,
        });
    }
    paths
}
