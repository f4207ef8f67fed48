//! S³ scalar-field containers, occupancy extraction, value normalization, and
//! the on-disk volume format shared by every other module.
//!
//! A [`VoxelField`] is the universal carrier: clean shapes, partial scans,
//! diffusion states, and noise volumes all live in the same `S³` grid.
//! Values are stored x-fastest (x, then y, then z); that ordering is part of
//! the `.volf` file contract and is used everywhere in the crate.

use crate::error::{Error, Result};
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

/// Interpretation of the per-voxel scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    /// Truncated signed distance, voxel units, in `[-truncation, truncation]`.
    Tsdf,
    /// Truncated unsigned distance, voxel units, in `[0, truncation]`.
    Tudf,
    /// Normalized diffusion-space values, unitless and unbounded.
    Latent,
}

impl FieldKind {
    pub fn code(self) -> u8 {
        match self {
            FieldKind::Tsdf => 0,
            FieldKind::Tudf => 1,
            FieldKind::Latent => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(FieldKind::Tsdf),
            1 => Ok(FieldKind::Tudf),
            2 => Ok(FieldKind::Latent),
            other => Err(Error::UnknownKind(other)),
        }
    }
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldKind::Tsdf => write!(f, "TSDF"),
            FieldKind::Tudf => write!(f, "TUDF"),
            FieldKind::Latent => write!(f, "LATENT"),
        }
    }
}

/// Default truncation distance in voxel units for TSDF/TUDF fields.
pub const DEFAULT_TRUNCATION: f32 = 3.0;

/// An `S³` scalar grid. Immutable after construction and cheap to share
/// across threads; all operations on it are pure functions.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelField {
    resolution: usize,
    kind: FieldKind,
    truncation: f32,
    data: Vec<f32>,
}

impl VoxelField {
    /// Builds a field, validating the kind-specific value range and that
    /// `data.len() == resolution³`.
    pub fn new(resolution: usize, kind: FieldKind, truncation: f32, data: Vec<f32>) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::Parameter("resolution must be positive".into()));
        }
        if !(truncation > 0.0) {
            return Err(Error::Parameter(format!(
                "truncation must be > 0, got {truncation}"
            )));
        }
        let expect = resolution * resolution * resolution;
        if data.len() != expect {
            return Err(Error::Shape(format!(
                "expected {expect} voxels for resolution {resolution}, got {}",
                data.len()
            )));
        }
        for (i, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinitePayload { index: i });
            }
            let in_range = match kind {
                FieldKind::Tsdf => (-truncation..=truncation).contains(&v),
                FieldKind::Tudf => (0.0..=truncation).contains(&v),
                FieldKind::Latent => true,
            };
            if !in_range {
                return Err(Error::Parameter(format!(
                    "{kind} value {v} at element {i} outside legal range (truncation {truncation})"
                )));
            }
        }
        Ok(Self {
            resolution,
            kind,
            truncation,
            data,
        })
    }

    /// A field with every voxel set to `value`.
    pub fn constant(resolution: usize, kind: FieldKind, truncation: f32, value: f32) -> Result<Self> {
        Self::new(
            resolution,
            kind,
            truncation,
            vec![value; resolution * resolution * resolution],
        )
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn truncation(&self) -> f32 {
        self.truncation
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    /// Linear index of voxel `(x, y, z)` in x-fastest order.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.resolution && y < self.resolution && z < self.resolution);
        x + self.resolution * (y + self.resolution * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }
}

/// Per-voxel reliability weights in `[0, 1]`. Binary at native resolution;
/// pooled copies hold fractional block means.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMask {
    resolution: usize,
    weights: Vec<f32>,
}

impl OccupancyMask {
    pub fn new(resolution: usize, weights: Vec<f32>) -> Result<Self> {
        let expect = resolution * resolution * resolution;
        if weights.len() != expect {
            return Err(Error::Shape(format!(
                "expected {expect} weights for resolution {resolution}, got {}",
                weights.len()
            )));
        }
        for (i, &w) in weights.iter().enumerate() {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Parameter(format!(
                    "mask weight {w} at element {i} outside [0, 1]"
                )));
            }
        }
        Ok(Self { resolution, weights })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    /// Number of strictly positive weights.
    pub fn occupied_count(&self) -> usize {
        self.weights.iter().filter(|&&w| w > 0.0).count()
    }
}

/// Binary near-surface occupancy of a partial scan: voxel is occupied iff
/// `|tsdf| < tau` (strict, so values exactly at the threshold are free).
pub fn occupancy_from_tsdf(c: &VoxelField, tau: f32) -> Result<OccupancyMask> {
    if c.kind() != FieldKind::Tsdf {
        return Err(Error::KindMismatch {
            expected: "TSDF",
            got: c.kind(),
        });
    }
    if !(tau > 0.0) {
        return Err(Error::Parameter(format!("tau must be > 0, got {tau}")));
    }
    let weights = c
        .data()
        .iter()
        .map(|&v| if v.abs() < tau { 1.0 } else { 0.0 })
        .collect();
    OccupancyMask::new(c.resolution(), weights)
}

/// Mean-pools a mask by a power-of-two factor; each output voxel is the mean
/// of its `factor³` input block, so fractional reliability is preserved and
/// total mass is conserved.
pub fn pool_mask(w: &OccupancyMask, factor: usize) -> Result<OccupancyMask> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::Parameter(format!(
            "pool factor must be a power of two, got {factor}"
        )));
    }
    if w.resolution() % factor != 0 {
        return Err(Error::Parameter(format!(
            "pool factor {factor} does not divide resolution {}",
            w.resolution()
        )));
    }
    if factor == 1 {
        return Ok(w.clone());
    }
    let r_in = w.resolution();
    let r_out = r_in / factor;
    let inv = 1.0 / (factor * factor * factor) as f64;
    let src = w.weights();
    let mut out = vec![0.0f32; r_out * r_out * r_out];
    for oz in 0..r_out {
        for oy in 0..r_out {
            for ox in 0..r_out {
                let mut acc = 0.0f64;
                for dz in 0..factor {
                    let z = oz * factor + dz;
                    for dy in 0..factor {
                        let y = oy * factor + dy;
                        let base = r_in * (y + r_in * z) + ox * factor;
                        for &v in &src[base..base + factor] {
                            acc += v as f64;
                        }
                    }
                }
                out[ox + r_out * (oy + r_out * oz)] = (acc * inv) as f32;
            }
        }
    }
    OccupancyMask::new(r_out, out)
}

/// Maps a TSDF/TUDF field linearly onto `[-1, 1]` so diffusion sees
/// zero-centered data compatible with a unit-Gaussian terminal state.
///
/// TSDF: `[-truncation, truncation] -> [-1, 1]`;
/// TUDF: `[0, truncation] -> [-1, 1]`.
pub fn normalize_field(v: &VoxelField) -> Result<VoxelField> {
    let trunc = v.truncation();
    let data = match v.kind() {
        FieldKind::Tsdf => v.data().iter().map(|&x| x / trunc).collect(),
        FieldKind::Tudf => v.data().iter().map(|&x| 2.0 * x / trunc - 1.0).collect(),
        FieldKind::Latent => {
            return Err(Error::KindMismatch {
                expected: "TSDF or TUDF",
                got: FieldKind::Latent,
            })
        }
    };
    VoxelField::new(v.resolution(), FieldKind::Latent, trunc, data)
}

/// Inverse of [`normalize_field`]; clamps to the legal value range of the
/// target kind so slightly out-of-range diffusion outputs stay valid.
pub fn denormalize_field(v: &VoxelField, kind: FieldKind) -> Result<VoxelField> {
    if v.kind() != FieldKind::Latent {
        return Err(Error::KindMismatch {
            expected: "LATENT",
            got: v.kind(),
        });
    }
    let trunc = v.truncation();
    let data: Vec<f32> = match kind {
        FieldKind::Tsdf => v
            .data()
            .iter()
            .map(|&x| (x * trunc).clamp(-trunc, trunc))
            .collect(),
        FieldKind::Tudf => v
            .data()
            .iter()
            .map(|&x| ((x + 1.0) * 0.5 * trunc).clamp(0.0, trunc))
            .collect(),
        FieldKind::Latent => {
            return Err(Error::KindMismatch {
                expected: "TSDF or TUDF",
                got: FieldKind::Latent,
            })
        }
    };
    VoxelField::new(v.resolution(), kind, trunc, data)
}

const VOLF_MAGIC: &[u8; 4] = b"VOLF";
const VOLF_VERSION: u32 = 1;

/// Serializes a field in the `.volf` format: magic `VOLF`, version u32,
/// resolution u32, kind u8, 3 zero pad bytes, truncation f32, then `S³`
/// f32 values x-fastest. Everything little-endian, no compression.
pub fn write_volume(v: &VoxelField, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * v.num_voxels());
    buf.extend_from_slice(VOLF_MAGIC);
    buf.extend_from_slice(&VOLF_VERSION.to_le_bytes());
    buf.extend_from_slice(&(v.resolution() as u32).to_le_bytes());
    buf.push(v.kind().code());
    buf.extend_from_slice(&[0u8; 3]);
    buf.extend_from_slice(&v.truncation().to_le_bytes());
    for &x in v.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a `.volf` file, validating magic, version, kind byte, payload
/// length, and value finiteness. Round-trips written volumes bit-exactly.
pub fn read_volume(path: &Path) -> Result<VoxelField> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_volume_bytes(&bytes)
}

pub fn read_volume_bytes(bytes: &[u8]) -> Result<VoxelField> {
    if bytes.len() < 20 {
        return Err(Error::TruncatedPayload {
            expected: 20,
            got: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if &magic != VOLF_MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VOLF_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let resolution = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let kind = FieldKind::from_code(bytes[12])?;
    let truncation = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let n = resolution
        .checked_pow(3)
        .ok_or_else(|| Error::Parameter(format!("resolution {resolution} overflows")))?;
    let expected = 20 + 4 * n as u64;
    if bytes.len() as u64 != expected {
        return Err(Error::TruncatedPayload {
            expected,
            got: bytes.len() as u64,
        });
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let off = 20 + 4 * i;
        let x = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !x.is_finite() {
            return Err(Error::NonFinitePayload { index: i });
        }
        data.push(x);
    }
    VoxelField::new(resolution, kind, truncation, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(rng: &mut ChaCha8Rng, res: usize, kind: FieldKind) -> VoxelField {
        let n = res * res * res;
        let data: Vec<f32> = (0..n)
            .map(|_| match kind {
                FieldKind::Tsdf => rng.gen_range(-3.0..=3.0),
                FieldKind::Tudf => rng.gen_range(0.0..=3.0),
                FieldKind::Latent => rng.gen_range(-4.0..4.0),
            })
            .collect();
        VoxelField::new(res, kind, 3.0, data).unwrap()
    }

    #[test]
    fn occupancy_threshold_cases() {
        // Value 2.9 at tau=3 is occupied; exactly 3.0 is not (strict test).
        let mut data = vec![3.0f32; 8];
        data[0] = 2.9;
        data[1] = 3.0;
        data[2] = -3.0;
        let f = VoxelField::new(2, FieldKind::Tsdf, 3.0, data).unwrap();
        let m = occupancy_from_tsdf(&f, 3.0).unwrap();
        assert_eq!(m.weights()[0], 1.0);
        assert_eq!(m.weights()[1], 0.0);
        assert_eq!(m.weights()[2], 0.0);
    }

    #[test]
    fn occupancy_all_truncation_is_empty() {
        let f = VoxelField::constant(4, FieldKind::Tsdf, 3.0, 3.0).unwrap();
        let m = occupancy_from_tsdf(&f, 3.0).unwrap();
        assert_eq!(m.occupied_count(), 0);
    }

    #[test]
    fn occupancy_rejects_bad_inputs() {
        let f = VoxelField::constant(4, FieldKind::Tudf, 3.0, 1.0).unwrap();
        assert!(matches!(
            occupancy_from_tsdf(&f, 3.0),
            Err(Error::KindMismatch { .. })
        ));
        let f = VoxelField::constant(4, FieldKind::Tsdf, 3.0, 1.0).unwrap();
        assert!(matches!(
            occupancy_from_tsdf(&f, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn pool_all_ones_and_identity() {
        let m = OccupancyMask::new(32, vec![1.0; 32 * 32 * 32]).unwrap();
        let p = pool_mask(&m, 2).unwrap();
        assert_eq!(p.resolution(), 16);
        assert!(p.weights().iter().all(|&w| w == 1.0));
        let id = pool_mask(&m, 1).unwrap();
        assert_eq!(id, m);
    }

    #[test]
    fn pool_single_occupied_block() {
        let mut w = vec![0.0f32; 8];
        w[3] = 1.0;
        let m = OccupancyMask::new(2, w).unwrap();
        let p = pool_mask(&m, 2).unwrap();
        assert_eq!(p.resolution(), 1);
        assert_eq!(p.weights()[0], 0.125);
    }

    #[test]
    fn pool_rejects_non_divisible_factor() {
        let m = OccupancyMask::new(4, vec![0.0; 64]).unwrap();
        assert!(matches!(pool_mask(&m, 8), Err(Error::Parameter(_))));
        assert!(matches!(pool_mask(&m, 3), Err(Error::Parameter(_))));
    }

    #[test]
    fn normalize_endpoints() {
        let f = VoxelField::new(1, FieldKind::Tudf, 3.0, vec![3.0]).unwrap();
        assert_eq!(normalize_field(&f).unwrap().data()[0], 1.0);
        let f = VoxelField::new(1, FieldKind::Tudf, 3.0, vec![0.0]).unwrap();
        assert_eq!(normalize_field(&f).unwrap().data()[0], -1.0);
        let f = VoxelField::new(1, FieldKind::Tsdf, 3.0, vec![0.0]).unwrap();
        assert_eq!(normalize_field(&f).unwrap().data()[0], 0.0);
        let f = VoxelField::new(1, FieldKind::Tudf, 3.0, vec![1.5]).unwrap();
        assert_eq!(normalize_field(&f).unwrap().data()[0], 0.0);
    }

    #[test]
    fn normalize_rejects_latent() {
        let f = VoxelField::constant(2, FieldKind::Latent, 3.0, 0.5).unwrap();
        assert!(matches!(
            normalize_field(&f),
            Err(Error::KindMismatch { .. })
        ));
    }

    #[test]
    fn denormalize_clamps_out_of_range() {
        let f = VoxelField::new(1, FieldKind::Latent, 3.0, vec![1.4]).unwrap();
        let u = denormalize_field(&f, FieldKind::Tudf).unwrap();
        assert_eq!(u.data()[0], 3.0);
        let f = VoxelField::new(1, FieldKind::Latent, 3.0, vec![-1.4]).unwrap();
        let u = denormalize_field(&f, FieldKind::Tudf).unwrap();
        assert_eq!(u.data()[0], 0.0);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..100 {
            let kind = match i % 3 {
                0 => FieldKind::Tsdf,
                1 => FieldKind::Tudf,
                _ => FieldKind::Latent,
            };
            let f = random_field(&mut rng, 8, kind);
            let path = dir.path().join(format!("v{i}.volf"));
            write_volume(&f, &path).unwrap();
            let g = read_volume(&path).unwrap();
            assert_eq!(f.resolution(), g.resolution());
            assert_eq!(f.kind(), g.kind());
            assert_eq!(f.truncation().to_bits(), g.truncation().to_bits());
            let same = f
                .data()
                .iter()
                .zip(g.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "payload must round-trip bit-exactly");
        }
    }

    #[test]
    fn read_rejects_bad_magic() {
        let f = VoxelField::constant(2, FieldKind::Tudf, 3.0, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.volf");
        write_volume(&f, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            read_volume_bytes(&bytes),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn read_rejects_short_payload() {
        let f = VoxelField::constant(2, FieldKind::Tudf, 3.0, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.volf");
        write_volume(&f, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(
            read_volume_bytes(short),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn read_rejects_unknown_kind_and_nan() {
        let f = VoxelField::constant(2, FieldKind::Tudf, 3.0, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.volf");
        write_volume(&f, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_kind = good.clone();
        bad_kind[12] = 7;
        assert!(matches!(
            read_volume_bytes(&bad_kind),
            Err(Error::UnknownKind(7))
        ));

        let mut bad_val = good;
        bad_val[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            read_volume_bytes(&bad_val),
            Err(Error::NonFinitePayload { index: 0 })
        ));
    }

    proptest! {
        #[test]
        fn occupancy_monotone_in_tau(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_field(&mut rng, 8, FieldKind::Tsdf);
            let tau1 = rng.gen_range(0.1..2.0);
            let tau2 = rng.gen_range(tau1..3.0);
            let m1 = occupancy_from_tsdf(&f, tau1).unwrap();
            let m2 = occupancy_from_tsdf(&f, tau2).unwrap();
            for (a, b) in m1.weights().iter().zip(m2.weights()) {
                prop_assert!(a <= b, "mask(tau1) must be a subset of mask(tau2)");
            }
        }

        #[test]
        fn pool_preserves_mass(seed in 0u64..200, factor_log in 0u32..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let res = 8usize;
            let w: Vec<f32> = (0..res*res*res)
                .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
                .collect();
            let m = OccupancyMask::new(res, w).unwrap();
            let factor = 1usize << factor_log;
            let p = pool_mask(&m, factor).unwrap();
            let mass_in: f64 = m.weights().iter().map(|&x| x as f64).sum();
            let mass_out: f64 = p.weights().iter().map(|&x| x as f64).sum();
            let scaled = mass_out * (factor * factor * factor) as f64;
            prop_assert!((scaled - mass_in).abs() < 1e-5);
        }

        #[test]
        fn normalize_round_trip(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kind = if seed % 2 == 0 { FieldKind::Tsdf } else { FieldKind::Tudf };
            let f = random_field(&mut rng, 8, kind);
            let norm = normalize_field(&f).unwrap();
            let back = denormalize_field(&norm, kind).unwrap();
            for (a, b) in f.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
