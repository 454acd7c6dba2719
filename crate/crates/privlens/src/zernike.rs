//! Zernike polynomial basis in Noll ordering on a sampled pupil grid.
//!
//! Phase masks are linear combinations `phi = sum_j alpha_j Z_j` of the basis
//! maps; coefficients are in micrometers of optical path difference. The
//! normalization follows the Noll convention: `sqrt(n+1)` for m = 0 terms and
//! `sqrt(2(n+1))` otherwise, so coefficients line up with standard
//! wavefront-aberration tables.

use crate::par;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// 1-based Noll index of a Zernike polynomial.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NollIndex(u32);

impl NollIndex {
    pub fn new(j: u32) -> Result<Self> {
        if j == 0 {
            return Err(Error::invalid("Noll index must be >= 1"));
        }
        Ok(NollIndex(j))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

/// Maps a Noll index to its (radial degree, signed azimuthal frequency) pair.
///
/// Sign convention: even j is the cosine term (m > 0), odd j the sine term
/// (m < 0); m = 0 terms are rotationally symmetric.
pub fn noll_to_nm(j: NollIndex) -> (u32, i32) {
    let j = j.get();
    let mut n = 0u32;
    while j > (n + 1) * (n + 2) / 2 {
        n += 1;
    }
    let j1 = j - n * (n + 1) / 2 - 1; // position within the order, 0..=n
    let m_abs = if n % 2 == 0 {
        2 * ((j1 + 1) / 2)
    } else {
        2 * (j1 / 2) + 1
    };
    let m = if m_abs == 0 {
        0
    } else if j % 2 == 0 {
        m_abs as i32
    } else {
        -(m_abs as i32)
    };
    (n, m)
}

/// Inverse of [`noll_to_nm`].
pub fn nm_to_noll(n: u32, m: i32) -> Result<NollIndex> {
    if m.unsigned_abs() > n || (n - m.unsigned_abs()) % 2 != 0 {
        return Err(Error::invalid(format!("invalid Zernike pair ({n},{m})")));
    }
    let base = n * (n + 1) / 2 + 1;
    for j in base..=base + n {
        let idx = NollIndex::new(j)?;
        if noll_to_nm(idx) == (n, m) {
            return Ok(idx);
        }
    }
    Err(Error::invalid(format!("no Noll index for ({n},{m})")))
}

fn binomial_u128(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Radial polynomial `R_n^{|m|}(rho)` via the standard factorial sum.
pub fn radial_poly(n: u32, m: i32, rho: f64) -> Result<f64> {
    let m_abs = m.unsigned_abs();
    if m_abs > n {
        return Err(Error::invalid(format!("radial_poly requires n >= |m| ({n},{m})")));
    }
    if (n - m_abs) % 2 != 0 {
        return Err(Error::invalid(format!("radial_poly requires n - |m| even ({n},{m})")));
    }
    let half = ((n - m_abs) / 2) as u64;
    let n64 = n as u64;
    let mut sum = 0.0;
    for k in 0..=half {
        // (n-k)! / (k! ((n+m)/2-k)! ((n-m)/2-k)!) = C(n-k,k) * C(n-2k, (n-m)/2-k)
        let coeff = binomial_u128(n64 - k, k) as f64
            * binomial_u128(n64 - 2 * k, half - k) as f64;
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * coeff * rho.powi((n64 - 2 * k) as i32);
    }
    Ok(sum)
}

/// Square sampling grid covering the pupil.
///
/// Samples sit at `u_i = (i - n/2) * du` with `du = diameter / (n - 2)`, so
/// the optical axis is a sample and every in-disk sample has its mirror image
/// on the grid; the unpaired extreme row/column lies outside the aperture.
/// Samples with normalized radius exactly 1 count as inside the disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PupilGrid {
    n_samples: usize,
    aperture_diameter: f64,
}

impl PupilGrid {
    pub fn new(n_samples: usize, aperture_diameter: f64) -> Result<Self> {
        if n_samples < 8 || n_samples % 2 != 0 {
            return Err(Error::invalid(format!(
                "pupil grid needs an even sample count >= 8, got {n_samples}"
            )));
        }
        if !(aperture_diameter > 0.0) {
            return Err(Error::invalid("aperture diameter must be positive"));
        }
        Ok(PupilGrid {
            n_samples,
            aperture_diameter,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn aperture_diameter(&self) -> f64 {
        self.aperture_diameter
    }

    /// Sample pitch in meters.
    pub fn pitch(&self) -> f64 {
        self.aperture_diameter / (self.n_samples as f64 - 2.0)
    }

    /// Physical coordinate of sample index `i` along either axis.
    pub fn coord(&self, i: usize) -> f64 {
        (i as isize - (self.n_samples / 2) as isize) as f64 * self.pitch()
    }

    /// Normalized radius and azimuth at a sample; radius 1 is the rim.
    pub fn rho_theta(&self, row: usize, col: usize) -> (f64, f64) {
        let v = self.coord(row);
        let u = self.coord(col);
        let rho = (u * u + v * v).sqrt() / (self.aperture_diameter / 2.0);
        let theta = v.atan2(u);
        (rho, theta)
    }

    pub fn in_disk(&self, row: usize, col: usize) -> bool {
        self.rho_theta(row, col).0 <= 1.0
    }
}

/// Zernike maps 1..=q sampled on a pupil grid, zero outside the disk.
#[derive(Debug, Clone)]
pub struct ZernikeBasis {
    grid: PupilGrid,
    maps: Vec<Tensor>,
}

impl ZernikeBasis {
    pub fn grid(&self) -> &PupilGrid {
        &self.grid
    }

    pub fn q(&self) -> usize {
        self.maps.len()
    }

    /// Map for Noll index `j` (1-based).
    pub fn map(&self, j: usize) -> &Tensor {
        &self.maps[j - 1]
    }

    pub fn maps(&self) -> &[Tensor] {
        &self.maps
    }
}

/// Evaluates the first `q` Noll-ordered Zernike maps on `grid`.
pub fn build_basis(grid: &PupilGrid, q: usize) -> Result<ZernikeBasis> {
    if q < 1 {
        return Err(Error::invalid("basis size q must be >= 1"));
    }
    let n = grid.n_samples();
    let maps = par::map_range(q, |jm1| {
        let j = NollIndex::new((jm1 + 1) as u32).expect("j >= 1");
        let (deg, m) = noll_to_nm(j);
        let norm = if m == 0 {
            ((deg + 1) as f64).sqrt()
        } else {
            (2.0 * (deg + 1) as f64).sqrt()
        };
        let mut data = vec![0.0f64; n * n];
        for r in 0..n {
            for c in 0..n {
                let (rho, theta) = grid.rho_theta(r, c);
                if rho <= 1.0 {
                    let radial = radial_poly(deg, m, rho).expect("valid (n,m) from noll_to_nm");
                    let angular = if m > 0 {
                        (m as f64 * theta).cos()
                    } else if m < 0 {
                        ((-m) as f64 * theta).sin()
                    } else {
                        1.0
                    };
                    data[r * n + c] = norm * radial * angular;
                }
            }
        }
        Tensor::from_vec(&[n, n], data).expect("sized above")
    });
    Ok(ZernikeBasis {
        grid: grid.clone(),
        maps,
    })
}

/// Lens coefficients, micrometers of optical path difference per mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ZernikeCoefficients {
    alpha: Vec<f64>,
}

impl ZernikeCoefficients {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::invalid("coefficient vector must be non-empty"));
        }
        if !alpha.iter().all(|a| a.is_finite()) {
            return Err(Error::invalid("coefficients must be finite"));
        }
        Ok(ZernikeCoefficients { alpha })
    }

    pub fn zeros(q: usize) -> Self {
        ZernikeCoefficients {
            alpha: vec![0.0; q],
        }
    }

    pub fn q(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_mut(&mut self) -> &mut [f64] {
        &mut self.alpha
    }

    pub fn norm(&self) -> f64 {
        self.alpha.iter().map(|a| a * a).sum::<f64>().sqrt()
    }
}

/// The q = 15 coefficients characterized on the deformable-mirror testbed.
pub fn hardware_lens_q15() -> ZernikeCoefficients {
    ZernikeCoefficients::new(vec![
        0.0, 0.0, 0.0, -0.45, 0.36, 0.24, 0.6, -0.4, -0.11, 0.69, -0.31, -0.15, -0.70, -0.85,
        0.38,
    ])
    .expect("finite literals")
}

/// Phase mask in micrometers of optical path difference, zero off-disk.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseMask {
    grid: PupilGrid,
    phi: Tensor,
}

impl PhaseMask {
    pub fn new(grid: PupilGrid, phi: Tensor) -> Result<Self> {
        if phi.dims() != [grid.n_samples(), grid.n_samples()] {
            return Err(Error::shape("phase mask does not match grid"));
        }
        if !phi.all_finite() {
            return Err(Error::numerical("phase mask has non-finite entries"));
        }
        Ok(PhaseMask { grid, phi })
    }

    pub fn grid(&self) -> &PupilGrid {
        &self.grid
    }

    /// Phase values in micrometers of OPD.
    pub fn phi(&self) -> &Tensor {
        &self.phi
    }
}

/// Linear combination `phi = sum_j alpha_j Z_j`.
pub fn compose_mask(basis: &ZernikeBasis, alpha: &ZernikeCoefficients) -> Result<PhaseMask> {
    if alpha.q() != basis.q() {
        return Err(Error::shape(format!(
            "coefficient count {} does not match basis q {}",
            alpha.q(),
            basis.q()
        )));
    }
    let n = basis.grid().n_samples();
    let mut phi = Tensor::zeros(&[n, n]);
    for (a, map) in alpha.alpha().iter().zip(basis.maps()) {
        phi.axpy_in_place(*a, map);
    }
    PhaseMask::new(basis.grid().clone(), phi)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// First 36 entries of the published Noll table (j, n, m).
    const NOLL_TABLE: [(u32, u32, i32); 36] = [
        (1, 0, 0),
        (2, 1, 1),
        (3, 1, -1),
        (4, 2, 0),
        (5, 2, -2),
        (6, 2, 2),
        (7, 3, -1),
        (8, 3, 1),
        (9, 3, -3),
        (10, 3, 3),
        (11, 4, 0),
        (12, 4, 2),
        (13, 4, -2),
        (14, 4, 4),
        (15, 4, -4),
        (16, 5, 1),
        (17, 5, -1),
        (18, 5, 3),
        (19, 5, -3),
        (20, 5, 5),
        (21, 5, -5),
        (22, 6, 0),
        (23, 6, -2),
        (24, 6, 2),
        (25, 6, -4),
        (26, 6, 4),
        (27, 6, -6),
        (28, 6, 6),
        (29, 7, -1),
        (30, 7, 1),
        (31, 7, -3),
        (32, 7, 3),
        (33, 7, -5),
        (34, 7, 5),
        (35, 7, -7),
        (36, 7, 7),
    ];

    /// Enumeration oracle: walk radial orders, emit |m| in Noll's in-order
    /// sequence, and pick signs by index parity. Independent of the closed
    /// form used by `noll_to_nm`.
    fn noll_order_oracle(count: usize) -> Vec<(u32, i32)> {
        let mut out = Vec::with_capacity(count);
        let mut j = 1u32;
        let mut n = 0u32;
        while out.len() < count {
            let mut m_abs_seq = Vec::new();
            if n % 2 == 0 {
                m_abs_seq.push(0);
                for m in (2..=n).step_by(2) {
                    m_abs_seq.push(m);
                    m_abs_seq.push(m);
                }
            } else {
                for m in (1..=n).step_by(2) {
                    m_abs_seq.push(m);
                    m_abs_seq.push(m);
                }
            }
            for m_abs in m_abs_seq {
                if out.len() == count {
                    break;
                }
                let m = if m_abs == 0 {
                    0
                } else if j % 2 == 0 {
                    m_abs as i32
                } else {
                    -(m_abs as i32)
                };
                out.push((n, m));
                j += 1;
            }
            n += 1;
        }
        out
    }

    #[test]
    fn noll_matches_published_table() {
        for &(j, n, m) in &NOLL_TABLE {
            assert_eq!(
                noll_to_nm(NollIndex::new(j).unwrap()),
                (n, m),
                "mismatch at j={j}"
            );
        }
    }

    #[test]
    fn noll_matches_enumeration_oracle() {
        let oracle = noll_order_oracle(200);
        for (idx, &(n, m)) in oracle.iter().enumerate() {
            let j = NollIndex::new(idx as u32 + 1).unwrap();
            assert_eq!(noll_to_nm(j), (n, m), "mismatch at j={}", idx + 1);
        }
    }

    #[test]
    fn noll_bijective_to_1000() {
        let mut seen = std::collections::HashSet::new();
        for j in 1..=1000u32 {
            let idx = NollIndex::new(j).unwrap();
            let (n, m) = noll_to_nm(idx);
            assert!(n >= m.unsigned_abs());
            assert_eq!((n - m.unsigned_abs()) % 2, 0);
            assert!(seen.insert((n, m)), "duplicate pair at j={j}");
            assert_eq!(nm_to_noll(n, m).unwrap().get(), j);
        }
    }

    #[test]
    fn radial_small_cases() {
        for rho in [0.0, 0.3, 0.7, 1.0] {
            assert_eq!(radial_poly(0, 0, rho).unwrap(), 1.0);
            assert!((radial_poly(1, 1, rho).unwrap() - rho).abs() < 1e-15);
        }
        assert!((radial_poly(2, 0, 0.5).unwrap() - (-0.5)).abs() < 1e-15);
        assert!(radial_poly(3, 0, 0.5).is_err());
        assert!(radial_poly(2, 3, 0.5).is_err());
    }

    #[test]
    fn piston_is_constant_inside_disk() {
        let grid = PupilGrid::new(32, 5e-3).unwrap();
        let basis = build_basis(&grid, 1).unwrap();
        let map = basis.map(1);
        let n = grid.n_samples();
        for r in 0..n {
            for c in 0..n {
                let expect = if grid.in_disk(r, c) { 1.0 } else { 0.0 };
                assert_eq!(map.at2(r, c), expect);
            }
        }
    }

    #[test]
    fn rotationally_symmetric_modes_have_exact_point_symmetry() {
        let grid = PupilGrid::new(64, 5e-3).unwrap();
        let basis = build_basis(&grid, 11).unwrap();
        let n = grid.n_samples();
        for &j in &[1usize, 4, 11] {
            // m = 0 modes
            let map = basis.map(j);
            for r in 1..n {
                for c in 1..n {
                    assert_eq!(map.at2(r, c), map.at2(n - r, n - c), "j={j} at ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn basis_rejects_q_zero() {
        let grid = PupilGrid::new(16, 5e-3).unwrap();
        assert!(build_basis(&grid, 0).is_err());
    }

    #[test]
    fn gram_matrix_is_diagonal_within_two_percent() {
        let grid = PupilGrid::new(256, 5e-3).unwrap();
        let basis = build_basis(&grid, 10).unwrap();
        for i in 1..=10 {
            for j in 1..=10 {
                if i == j {
                    continue;
                }
                let zi = basis.map(i);
                let zj = basis.map(j);
                let leak = zi.dot(zj).abs() / (zi.norm() * zj.norm());
                assert!(leak < 0.02, "leakage {leak} between j={i} and j={j}");
            }
        }
    }

    #[test]
    fn compose_mask_is_linear() {
        let grid = PupilGrid::new(32, 5e-3).unwrap();
        let basis = build_basis(&grid, 6).unwrap();
        let a1 = ZernikeCoefficients::new(vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.6]).unwrap();
        let a2 = ZernikeCoefficients::new(vec![-0.4, 0.2, 0.0, 0.7, -0.1, 0.25]).unwrap();
        let (ca, cb) = (2.5f64, -1.25f64);
        let combo = ZernikeCoefficients::new(
            a1.alpha()
                .iter()
                .zip(a2.alpha())
                .map(|(x, y)| ca * x + cb * y)
                .collect(),
        )
        .unwrap();
        let m1 = compose_mask(&basis, &a1).unwrap();
        let m2 = compose_mask(&basis, &a2).unwrap();
        let mc = compose_mask(&basis, &combo).unwrap();
        for k in 0..mc.phi().len() {
            let expect = ca * m1.phi().data()[k] + cb * m2.phi().data()[k];
            assert!((mc.phi().data()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_coefficients_give_zero_mask_and_unit_defocus_selects_z4() {
        let grid = PupilGrid::new(32, 5e-3).unwrap();
        let basis = build_basis(&grid, 6).unwrap();
        let zero = compose_mask(&basis, &ZernikeCoefficients::zeros(6)).unwrap();
        assert!(zero.phi().data().iter().all(|&v| v == 0.0));

        let mut e4 = vec![0.0; 6];
        e4[3] = 1.0;
        let defocus = compose_mask(&basis, &ZernikeCoefficients::new(e4).unwrap()).unwrap();
        assert_eq!(defocus.phi(), basis.map(4));
    }

    #[test]
    fn hardware_fixture_composes_to_finite_nonzero_mask() {
        let grid = PupilGrid::new(64, 5e-3).unwrap();
        let basis = build_basis(&grid, 15).unwrap();
        let mask = compose_mask(&basis, &hardware_lens_q15()).unwrap();
        assert!(mask.phi().all_finite());
        assert!(mask.phi().max_abs() > 0.0);
    }

    #[test]
    fn coefficient_length_mismatch_is_rejected() {
        let grid = PupilGrid::new(16, 5e-3).unwrap();
        let basis = build_basis(&grid, 4).unwrap();
        assert!(compose_mask(&basis, &ZernikeCoefficients::zeros(5)).is_err());
    }
}
