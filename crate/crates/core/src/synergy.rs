//! Synergy basis extraction and forward BoMI mapping construction.
//!
//! Hand-posture exploration data lives in joint space (m joints). PCA on
//! the centered samples yields a small set of orthonormal postural
//! synergies `Φ ∈ R^{h×m}`; the forward mapping `C = W Φ` projects joint
//! velocities onto the screen plane through a weight matrix `W ∈ R^{n×h}`.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::la;

/// Joint-angle samples from a free-exploration phase (real or synthetic).
#[derive(Debug, Clone)]
pub struct PostureDataset {
    /// One row per sample, m columns of joint angles in radians.
    samples: DMatrix<f64>,
    rate_hz: f64,
}

impl PostureDataset {
    pub fn new(samples: DMatrix<f64>, rate_hz: f64) -> Result<Self> {
        let (n, m) = samples.shape();
        if m < 1 {
            return Err(Error::InvalidConfig("joint count m must be >= 1".into()));
        }
        if n < m + 1 {
            return Err(Error::InvalidConfig(format!(
                "need at least m+1 = {} samples, got {}",
                m + 1,
                n
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateData("non-finite joint angle".into()));
        }
        if !rate_hz.is_finite() || rate_hz <= 0.0 {
            return Err(Error::InvalidConfig("sampling rate must be positive".into()));
        }
        Ok(Self { samples, rate_hz })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.nrows()
    }

    pub fn m(&self) -> usize {
        self.samples.ncols()
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    /// Reads posture data from CSV: one row per sample, m columns of joint
    /// angles in radians. A non-numeric first row is treated as a header.
    pub fn from_csv_path(path: &Path, rate_hz: f64) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(false)
            .from_path(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let parsed: std::result::Result<Vec<f64>, _> =
                rec.iter().map(|f| f.trim().parse::<f64>()).collect();
            match parsed {
                Ok(row) => rows.push(row),
                Err(_) if i == 0 => continue, // header line
                Err(e) => {
                    return Err(Error::SchemaVersionMismatch(format!(
                        "row {}: {}",
                        i + 1,
                        e
                    )))
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::DegenerateData("no posture samples in file".into()));
        }
        let m = rows[0].len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::SchemaVersionMismatch(
                "inconsistent column count".into(),
            ));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(rows.len(), m, &flat), rate_hz)
    }

    /// FNV-1a hash of the sample bytes, recorded in exported metadata so a
    /// basis can be traced back to its source data.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.samples.iter() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Orthonormal postural synergies: the top-h principal directions of a
/// posture dataset, rows of `Φ`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynergyBasis {
    phi: DMatrix<f64>,
    explained_variance: Vec<f64>,
}

/// Maximum allowed deviation from row orthonormality, `||ΦΦᵀ - I||_max`.
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

impl SynergyBasis {
    pub fn new(phi: DMatrix<f64>, explained_variance: Vec<f64>) -> Result<Self> {
        let h = phi.nrows();
        if explained_variance.len() != h {
            return Err(Error::DimensionMismatch {
                context: "explained variance length",
                expected: h,
                actual: explained_variance.len(),
            });
        }
        let gram = &phi * phi.transpose();
        let dev = (gram - DMatrix::identity(h, h)).abs().max();
        if dev > ORTHONORMALITY_TOL {
            return Err(Error::DegenerateData(format!(
                "synergy rows not orthonormal (deviation {dev:.3e})"
            )));
        }
        for w in explained_variance.windows(2) {
            if w[1] > w[0] + 1e-12 {
                return Err(Error::DegenerateData(
                    "explained variance must be non-increasing".into(),
                ));
            }
        }
        if explained_variance
            .iter()
            .any(|&v| !(-1e-12..=1.0 + 1e-12).contains(&v))
        {
            return Err(Error::DegenerateData(
                "explained variance fractions must lie in [0, 1]".into(),
            ));
        }
        Ok(Self {
            phi,
            explained_variance,
        })
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn h(&self) -> usize {
        self.phi.nrows()
    }

    pub fn m(&self) -> usize {
        self.phi.ncols()
    }

    pub fn explained_variance(&self) -> &[f64] {
        &self.explained_variance
    }

    /// Writes the basis as CSV (h rows × m columns) plus a JSON sidecar
    /// `<path>.meta.json` with explained variance, dimensions, and the
    /// source-data hash.
    pub fn export_csv(&self, path: &Path, source_hash: Option<u64>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in 0..self.h() {
            let row: Vec<String> = (0..self.m()).map(|c| self.phi[(r, c)].to_string()).collect();
            w.write_record(&row)?;
        }
        w.flush()?;

        #[derive(Serialize)]
        struct Meta<'a> {
            schema_version: u32,
            h: usize,
            m: usize,
            explained_variance: &'a [f64],
            source_hash: Option<String>,
        }
        let meta = Meta {
            schema_version: 1,
            h: self.h(),
            m: self.m(),
            explained_variance: &self.explained_variance,
            source_hash: source_hash.map(|h| format!("{h:016x}")),
        };
        let mut f = std::fs::File::create(sidecar_path(path))?;
        f.write_all(serde_json::to_string_pretty(&meta)?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

/// The true forward BoMI map `C = W Φ` together with its factors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MappingMatrix {
    c: DMatrix<f64>,
    w: DMatrix<f64>,
    basis: SynergyBasis,
}

impl MappingMatrix {
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn basis(&self) -> &SynergyBasis {
        &self.basis
    }

    pub fn n(&self) -> usize {
        self.c.nrows()
    }

    pub fn m(&self) -> usize {
        self.c.ncols()
    }
}

/// How the weight matrix `W` is formed from a synergy basis.
#[derive(Debug, Clone)]
pub enum MappingScheme {
    /// `W = scale * [I_n | 0]`: row i of C is synergy i times `scale`
    /// (screen units per radian).
    FirstRows { n: usize, scale: f64 },
    /// Explicit weights, n×h.
    Custom(DMatrix<f64>),
}

impl Default for MappingScheme {
    fn default() -> Self {
        MappingScheme::FirstRows { n: 2, scale: 1.0 }
    }
}

/// Screen-units-per-radian row scale used by the simulation defaults. The
/// unit-scale default above keeps `C`'s rows equal to the synergies
/// themselves; simulations use this gain so exploration noise in joint
/// space produces screen-scale cursor motion.
pub const DEFAULT_MAP_SCALE: f64 = 2.0;

/// PCA on the centered posture data via SVD of the data matrix.
///
/// Rows of the returned `Φ` are the top-h principal directions ordered by
/// decreasing explained variance, with the dominant entry of each row made
/// positive.
pub fn build_synergy_basis(data: &PostureDataset, h: usize) -> Result<SynergyBasis> {
    let m = data.m();
    if h > m {
        return Err(Error::DimensionMismatch {
            context: "synergy count h vs joint count m",
            expected: m,
            actual: h,
        });
    }
    if h == 0 {
        return Err(Error::InvalidConfig("synergy count h must be >= 1".into()));
    }
    let x = data.samples();
    let n = x.nrows();
    let mean = x.row_mean();
    let mut centered = x.clone();
    for r in 0..n {
        for c in 0..m {
            centered[(r, c)] -= mean[c];
        }
    }
    let svd = la::sorted_svd(&centered, false, true);
    let rank = la::numerical_rank(&svd.sigma, n, m);
    if rank < h {
        return Err(Error::DegenerateData(format!(
            "covariance has only {rank} nonzero eigenvalues, need {h}"
        )));
    }
    let total: f64 = svd.sigma.iter().map(|s| s * s).sum();
    let explained: Vec<f64> = svd.sigma[..h].iter().map(|s| s * s / total).collect();
    let v_t = svd.v_t.expect("v requested");
    let phi = v_t.rows(0, h).into_owned();
    SynergyBasis::new(phi, explained)
}

/// Forms `C = W Φ` and checks that the map is onto the screen plane.
pub fn build_mapping(basis: &SynergyBasis, scheme: &MappingScheme) -> Result<MappingMatrix> {
    let h = basis.h();
    let w = match scheme {
        MappingScheme::FirstRows { n, scale } => {
            if *n > h {
                return Err(Error::DimensionMismatch {
                    context: "mapping rows vs synergy count",
                    expected: h,
                    actual: *n,
                });
            }
            let mut w = DMatrix::zeros(*n, h);
            for i in 0..*n {
                w[(i, i)] = *scale;
            }
            w
        }
        MappingScheme::Custom(w) => {
            if w.ncols() != h {
                return Err(Error::DimensionMismatch {
                    context: "custom W columns vs synergy count",
                    expected: h,
                    actual: w.ncols(),
                });
            }
            w.clone()
        }
    };
    let c = &w * basis.phi();
    let n = c.nrows();
    let svd = la::sorted_svd(&c, false, false);
    let rank = la::numerical_rank(&svd.sigma, n, c.ncols());
    if rank < n {
        return Err(Error::RankDeficient { rank, required: n });
    }
    Ok(MappingMatrix {
        c,
        w,
        basis: basis.clone(),
    })
}

/// Canonical seed-to-mapping derivation shared by the CLI and the
/// synthetic-subject generator: synthesize posture data, extract h
/// synergies, take the first n as the map rows.
#[allow(clippy::too_many_arguments)]
pub fn mapping_from_seed(
    seed: u64,
    m: usize,
    h: usize,
    latent_dim: usize,
    n_samples: usize,
    n_rows: usize,
    scale: f64,
) -> Result<MappingMatrix> {
    let data = synthesize_posture_data(m, latent_dim, n_samples, seed ^ 0x5eed_0000_0000_0001)?;
    let basis = build_synergy_basis(&data, h)?;
    build_mapping(&basis, &MappingScheme::FirstRows { n: n_rows, scale })
}

/// Default isotropic noise level of the synthetic posture generator.
pub const SYNTH_NOISE_FLOOR: f64 = 1e-3;

/// Default sampling rate attached to synthetic posture data (Hz).
pub const SYNTH_RATE_HZ: f64 = 50.0;

/// Factor standard deviations of the synthetic generator: a geometric
/// ladder so the principal spectrum is distinct and controllable.
pub fn synth_factor_scales(latent_dim: usize) -> Vec<f64> {
    (0..latent_dim).map(|j| 0.75f64.powi(j as i32)).collect()
}

/// Covariance eigenvalues of the synthetic generative model, descending.
/// Useful as an analytic oracle for spectrum checks.
pub fn synthetic_spectrum(m: usize, latent_dim: usize, noise_floor: f64) -> Vec<f64> {
    let nf2 = noise_floor * noise_floor;
    let mut eig: Vec<f64> = synth_factor_scales(latent_dim)
        .iter()
        .map(|s| s * s + nf2)
        .collect();
    eig.extend(std::iter::repeat_n(nf2, m - latent_dim));
    eig
}

/// Synthetic free-exploration posture data from a linear Gaussian factor
/// model: `x = mean + L diag(s) z + noise_floor * w` with `L` an m×latent
/// matrix with orthonormal columns and `z`, `w` standard normal.
/// Deterministic for a fixed seed.
pub fn synthesize_posture_data(
    m: usize,
    latent_dim: usize,
    n_samples: usize,
    seed: u64,
) -> Result<PostureDataset> {
    if latent_dim > m {
        return Err(Error::InvalidConfig(format!(
            "latent_dim {latent_dim} exceeds joint count {m}"
        )));
    }
    if latent_dim == 0 {
        return Err(Error::InvalidConfig("latent_dim must be >= 1".into()));
    }
    if n_samples <= m {
        return Err(Error::InvalidConfig(format!(
            "need more than m = {m} samples, got {n_samples}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;

    // Orthonormal loading directions via QR of a Gaussian matrix.
    let g: DMatrix<f64> = DMatrix::from_fn(m, latent_dim, |_, _| normal.sample(&mut rng));
    let qr = g.qr();
    let l = qr.q();

    let scales = synth_factor_scales(latent_dim);
    let mean = DVector::from_fn(m, |_, _| {
        let z: f64 = normal.sample(&mut rng);
        0.3 * z
    });

    let mut samples = DMatrix::zeros(n_samples, m);
    for i in 0..n_samples {
        let z = DVector::from_fn(latent_dim, |j, _| {
            let v: f64 = normal.sample(&mut rng);
            scales[j] * v
        });
        let x = &l * z;
        for c in 0..m {
            let noise: f64 = normal.sample(&mut rng);
            samples[(i, c)] = mean[c] + x[c] + SYNTH_NOISE_FLOOR * noise;
        }
    }
    PostureDataset::new(samples, SYNTH_RATE_HZ)
}
