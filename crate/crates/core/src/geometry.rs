//! Site configurations and the rigid transforms acting on them.
//!
//! All lengths are in units of the cube side r0. The input site is index 0
//! and sits at the origin; the output site is index `N - 1` at (1, 1, 1).
//! Rotations are about the input-output diagonal and the mirror is the
//! plane x - y = 0, both of which fix the two corners.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

pub type Vec3 = Vector3<f64>;

/// Minimum pairwise distance accepted at sampling time.
pub const MIN_SITE_DISTANCE: f64 = 1e-6;

/// Consecutive rejected draws before sampling gives up.
pub const MAX_REJECTIONS: usize = 1000;

/// Rotation grid: 180 steps of 2 degrees.
pub const ROTATION_STEPS: usize = 180;
pub const ROTATION_STEP_DEG: f64 = 2.0;

pub fn input_corner() -> Vec3 {
    Vec3::zeros()
}

pub fn output_corner() -> Vec3 {
    Vec3::new(1.0, 1.0, 1.0)
}

/// Unit vector along the input-output diagonal.
pub fn axis() -> Unit<Vec3> {
    Unit::new_normalize(output_corner())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteConfiguration {
    positions: Vec<Vec3>,
    seed: Option<u64>,
    displaced_outside: bool,
}

impl SiteConfiguration {
    /// Build a configuration from raw positions. Only requires `N >= 2` and
    /// finite coordinates; the corner invariants are checked by
    /// [`SiteConfiguration::is_canonical`].
    pub fn from_positions(positions: Vec<Vec3>) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::InvalidConfiguration(format!(
                "need at least 2 sites, got {}",
                positions.len()
            )));
        }
        if positions.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidConfiguration("non-finite coordinate".into()));
        }
        Ok(Self {
            positions,
            seed: None,
            displaced_outside: false,
        })
    }

    /// Input at the origin, output at (1,1,1), intermediates as given.
    pub fn with_intermediates(intermediates: &[Vec3]) -> Result<Self> {
        let mut positions = Vec::with_capacity(intermediates.len() + 2);
        positions.push(input_corner());
        positions.extend_from_slice(intermediates);
        positions.push(output_corner());
        Self::from_positions(positions)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn n_sites(&self) -> usize {
        self.positions.len()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn position(&self, i: usize) -> Vec3 {
        self.positions[i]
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn output_index(&self) -> usize {
        self.positions.len() - 1
    }

    /// Set when a displacement pushed a site out of the unit cube.
    pub fn displaced_outside(&self) -> bool {
        self.displaced_outside
    }

    pub fn intermediate_indices(&self) -> std::ops::Range<usize> {
        1..self.positions.len() - 1
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        (self.positions[i] - self.positions[j]).norm()
    }

    pub fn input_output_distance(&self) -> f64 {
        self.distance(0, self.output_index())
    }

    /// Smallest pairwise distance and the pair attaining it.
    pub fn min_pair_distance(&self) -> (f64, usize, usize) {
        let n = self.n_sites();
        let mut best = (f64::INFINITY, 0, 1);
        for i in 0..n {
            for j in i + 1..n {
                let d = self.distance(i, j);
                if d < best.0 {
                    best = (d, i, j);
                }
            }
        }
        best
    }

    /// Corners exact, intermediates inside the closed unit cube.
    pub fn is_canonical(&self) -> bool {
        let n = self.n_sites();
        self.positions[0] == input_corner()
            && self.positions[n - 1] == output_corner()
            && self.positions[1..n - 1]
                .iter()
                .all(|p| p.iter().all(|&c| (0.0..=1.0).contains(&c)))
    }

    /// Sorted list of all pairwise distances.
    pub fn sorted_pair_distances(&self) -> Vec<f64> {
        let n = self.n_sites();
        let mut d = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                d.push(self.distance(i, j));
            }
        }
        d.sort_by(f64::total_cmp);
        d
    }

    /// Multiply every coordinate by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            positions: self.positions.iter().map(|p| p * factor).collect(),
            seed: self.seed,
            displaced_outside: self.displaced_outside,
        }
    }
}

/// Draw a structure with `n_sites` sites: corners fixed, intermediates
/// i.i.d. uniform in the unit cube, ChaCha8 stream keyed by `rng_seed`.
pub fn sample_random_structure(n_sites: usize, rng_seed: u64) -> Result<SiteConfiguration> {
    if n_sites < 2 {
        return Err(Error::InvalidParameter(format!(
            "n_sites must be >= 2, got {n_sites}"
        )));
    }
    let mut rng = rng_from_seed(rng_seed);
    let mut positions = Vec::with_capacity(n_sites);
    positions.push(input_corner());
    let mut rejections = 0;
    while positions.len() < n_sites - 1 {
        let p = Vec3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        let clash = positions
            .iter()
            .chain(std::iter::once(&output_corner()))
            .any(|q| (p - q).norm() <= MIN_SITE_DISTANCE);
        if clash {
            rejections += 1;
            if rejections >= MAX_REJECTIONS {
                return Err(Error::SamplingRejected {
                    attempts: rejections,
                });
            }
            continue;
        }
        rejections = 0;
        positions.push(p);
    }
    positions.push(output_corner());
    Ok(SiteConfiguration {
        positions,
        seed: Some(rng_seed),
        displaced_outside: false,
    })
}

/// Which sites a displacement acts on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SiteSelection {
    All,
    Intermediate,
    Only(BTreeSet<usize>),
}

impl SiteSelection {
    fn contains(&self, i: usize, n: usize) -> bool {
        match self {
            SiteSelection::All => true,
            SiteSelection::Intermediate => i != 0 && i != n - 1,
            SiteSelection::Only(set) => set.contains(&i),
        }
    }
}

/// Shift each selected site by an independent uniform draw inside a cube of
/// edge `cube_side` centred on the original position (each coordinate moves
/// by at most `cube_side / 2`).
pub fn displace_sites(
    config: &SiteConfiguration,
    cube_side: f64,
    which: &SiteSelection,
    rng_seed: u64,
) -> SiteConfiguration {
    debug_assert!(cube_side >= 0.0);
    let n = config.n_sites();
    let half = 0.5 * cube_side;
    let mut rng = rng_from_seed(rng_seed);
    let mut positions = config.positions.clone();
    for (i, p) in positions.iter_mut().enumerate() {
        if !which.contains(i, n) {
            continue;
        }
        // Draw unconditionally so the stream does not depend on half == 0.
        let u = Vec3::new(rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>());
        if half > 0.0 {
            *p += (u * 2.0 - Vec3::repeat(1.0)) * half;
        }
    }
    let outside = positions
        .iter()
        .any(|p| p.iter().any(|&c| !(0.0..=1.0).contains(&c)));
    SiteConfiguration {
        positions,
        seed: config.seed,
        displaced_outside: config.displaced_outside || outside,
    }
}

/// Drop the given intermediate sites, keeping the order of the rest.
pub fn remove_sites(config: &SiteConfiguration, indices: &BTreeSet<usize>) -> Result<SiteConfiguration> {
    let n = config.n_sites();
    for &i in indices {
        if i >= n {
            return Err(Error::SiteOutOfRange { index: i, n_sites: n });
        }
        if i == 0 || i == n - 1 {
            return Err(Error::ProtectedSite(i));
        }
    }
    let positions = config
        .positions
        .iter()
        .enumerate()
        .filter(|(i, _)| !indices.contains(i))
        .map(|(_, p)| *p)
        .collect();
    Ok(SiteConfiguration {
        positions,
        seed: config.seed,
        displaced_outside: config.displaced_outside,
    })
}

/// Relabeling of intermediate sites plus a grid rotation about the
/// input-output diagonal and an optional mirror through x - y = 0.
///
/// Applied as `p -> R(angle) * M * p`, with `permutation[i]` the old
/// intermediate slot that moves into slot `i`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SymmetryTransform {
    pub permutation: Vec<usize>,
    /// Rotation in units of [`ROTATION_STEP_DEG`], in `0..ROTATION_STEPS`.
    pub rotation_step: usize,
    pub mirror: bool,
}

impl SymmetryTransform {
    pub fn identity(n_intermediate: usize) -> Self {
        Self {
            permutation: (0..n_intermediate).collect(),
            rotation_step: 0,
            mirror: false,
        }
    }

    /// Build from an angle in degrees; must be a multiple of 2 (any sign).
    pub fn from_degrees(permutation: Vec<usize>, degrees: i64, mirror: bool) -> Result<Self> {
        if degrees % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "rotation {degrees} deg is not on the 2 deg grid"
            )));
        }
        let step = (degrees / 2).rem_euclid(ROTATION_STEPS as i64) as usize;
        let t = Self {
            permutation,
            rotation_step: step,
            mirror,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn rotation_degrees(&self) -> f64 {
        self.rotation_step as f64 * ROTATION_STEP_DEG
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.permutation.len();
        let mut seen = vec![false; k];
        for &p in &self.permutation {
            if p >= k || seen[p] {
                return Err(Error::InvalidParameter(format!(
                    "{:?} is not a permutation",
                    self.permutation
                )));
            }
            seen[p] = true;
        }
        if self.rotation_step >= ROTATION_STEPS {
            return Err(Error::InvalidParameter(format!(
                "rotation step {} out of range",
                self.rotation_step
            )));
        }
        Ok(())
    }

    /// `R M` inverts to `M R^-1 = R M` when mirrored (reflection through a
    /// plane containing the axis conjugates R to R^-1), so only the
    /// unmirrored rotation flips sign.
    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.permutation.len()];
        for (i, &p) in self.permutation.iter().enumerate() {
            inv[p] = i;
        }
        let rotation_step = if self.mirror {
            self.rotation_step
        } else {
            (ROTATION_STEPS - self.rotation_step) % ROTATION_STEPS
        };
        Self {
            permutation: inv,
            rotation_step,
            mirror: self.mirror,
        }
    }

    /// The 3x3 orthogonal part `R M`.
    pub fn matrix(&self) -> Matrix3<f64> {
        let r = rotation_matrix(self.rotation_step);
        if self.mirror {
            r * mirror_matrix()
        } else {
            r
        }
    }
}

/// Reflection through the plane x - y = 0.
pub fn mirror_matrix() -> Matrix3<f64> {
    Matrix3::new(0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation by `step * 2` degrees about the diagonal; step 0 is exactly I.
pub fn rotation_matrix(step: usize) -> Matrix3<f64> {
    rotation_table()[step % ROTATION_STEPS]
}

pub fn rotation_table() -> &'static [Matrix3<f64>; ROTATION_STEPS] {
    static TABLE: OnceLock<[Matrix3<f64>; ROTATION_STEPS]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [Matrix3::identity(); ROTATION_STEPS];
        let ax = axis();
        for (k, m) in t.iter_mut().enumerate().skip(1) {
            let angle = (k as f64 * ROTATION_STEP_DEG).to_radians();
            *m = Rotation3::from_axis_angle(&ax, angle).into_inner();
        }
        t
    })
}

pub fn apply_transform(config: &SiteConfiguration, t: &SymmetryTransform) -> SiteConfiguration {
    let n = config.n_sites();
    debug_assert_eq!(t.permutation.len(), n - 2);
    let m = t.matrix();
    let is_identity = t.rotation_step == 0 && !t.mirror;
    let map = |p: &Vec3| if is_identity { *p } else { m * p };
    let mut positions = Vec::with_capacity(n);
    positions.push(map(&config.positions[0]));
    for &src in &t.permutation {
        positions.push(map(&config.positions[src + 1]));
    }
    positions.push(map(&config.positions[n - 1]));
    SiteConfiguration {
        positions,
        seed: config.seed,
        displaced_outside: config.displaced_outside,
    }
}

/// Descriptors of a pair relative to the rest of an N = 6 structure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGeometryDescriptor {
    /// Intra-pair distance.
    pub r_p: f64,
    /// Pair midpoint to midpoint of the two backbone intermediates.
    pub r_b: f64,
    /// Mean of input-to-first-backbone and second-backbone-to-output spacing.
    pub d_s: f64,
    /// Spacing between the two backbone intermediates.
    pub d_bb: f64,
}

pub fn pair_geometry_descriptors(
    config: &SiteConfiguration,
    pair: [usize; 2],
) -> Result<PairGeometryDescriptor> {
    let n = config.n_sites();
    if n != 6 {
        return Err(Error::InvalidParameter(format!(
            "pair descriptors need N = 6, got {n}"
        )));
    }
    for &i in &pair {
        if i == 0 || i == n - 1 {
            return Err(Error::ProtectedSite(i));
        }
        if i >= n {
            return Err(Error::SiteOutOfRange { index: i, n_sites: n });
        }
    }
    if pair[0] == pair[1] {
        return Err(Error::InvalidParameter("pair sites must differ".into()));
    }
    let mut backbone: Vec<usize> = config
        .intermediate_indices()
        .filter(|i| !pair.contains(i))
        .collect();
    let ax = axis();
    backbone.sort_by(|&a, &b| {
        config.positions[a]
            .dot(&ax)
            .total_cmp(&config.positions[b].dot(&ax))
    });
    let p = |i: usize| config.positions[i];
    let pair_mid = 0.5 * (p(pair[0]) + p(pair[1]));
    let bb_mid = 0.5 * (p(backbone[0]) + p(backbone[1]));
    Ok(PairGeometryDescriptor {
        r_p: (p(pair[0]) - p(pair[1])).norm(),
        r_b: (pair_mid - bb_mid).norm(),
        d_s: 0.5 * ((p(backbone[0]) - p(0)).norm() + (p(n - 1) - p(backbone[1])).norm()),
        d_bb: (p(backbone[1]) - p(backbone[0])).norm(),
    })
}

/// Cylindrical coordinates about the diagonal: (position along it,
/// distance from it). Both are invariant under every [`SymmetryTransform`]
/// rotation and mirror.
pub fn axial_coordinates(p: &Vec3) -> (f64, f64) {
    let ax = axis();
    let s = p.dot(&ax);
    let radial = (p - ax.into_inner() * s).norm();
    (s, radial)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_coord_diff(a: &SiteConfiguration, b: &SiteConfiguration) -> f64 {
        a.positions()
            .iter()
            .zip(b.positions())
            .map(|(p, q)| (p - q).amax())
            .fold(0.0, f64::max)
    }

    #[test]
    fn two_sites_are_the_corners() {
        let c = sample_random_structure(2, 99).unwrap();
        assert_eq!(c.positions(), &[input_corner(), output_corner()]);
    }

    #[test]
    fn sampling_is_deterministic_and_canonical() {
        let a = sample_random_structure(6, 1234).unwrap();
        let b = sample_random_structure(6, 1234).unwrap();
        assert_eq!(a, b);
        assert!(a.is_canonical());
        assert_ne!(a, sample_random_structure(6, 1235).unwrap());
    }

    #[test]
    fn rejects_single_site() {
        assert!(sample_random_structure(1, 0).is_err());
    }

    #[test]
    fn zero_displacement_is_identity() {
        let c = sample_random_structure(6, 5).unwrap();
        let d = displace_sites(&c, 0.0, &SiteSelection::All, 77);
        assert_eq!(c.positions(), d.positions());
    }

    #[test]
    fn displacement_stays_in_its_cube() {
        let c = sample_random_structure(6, 5).unwrap();
        for seed in 0..200 {
            let d = displace_sites(&c, 0.05, &SiteSelection::All, seed);
            for (p, q) in c.positions().iter().zip(d.positions()) {
                assert!((p - q).amax() <= 0.025);
            }
        }
    }

    #[test]
    fn intermediate_selection_keeps_corners() {
        let c = sample_random_structure(6, 5).unwrap();
        let d = displace_sites(&c, 0.05, &SiteSelection::Intermediate, 3);
        assert_eq!(d.position(0), input_corner());
        assert_eq!(d.position(5), output_corner());
        assert_ne!(d.position(2), c.position(2));
    }

    #[test]
    fn displacing_a_corner_flags_leaving_the_cube() {
        let c = sample_random_structure(4, 5).unwrap();
        let d = displace_sites(&c, 0.05, &SiteSelection::All, 3);
        assert!(d.displaced_outside());
    }

    #[test]
    fn remove_sites_keeps_order_and_rejects_corners() {
        let c = sample_random_structure(6, 11).unwrap();
        assert_eq!(remove_sites(&c, &BTreeSet::new()).unwrap(), c);
        let r = remove_sites(&c, &[2, 4].into_iter().collect()).unwrap();
        assert_eq!(r.n_sites(), 4);
        assert_eq!(r.positions(), &[c.position(0), c.position(1), c.position(3), c.position(5)]);
        assert!(matches!(
            remove_sites(&c, &[0].into_iter().collect()),
            Err(Error::ProtectedSite(0))
        ));
        assert!(matches!(
            remove_sites(&c, &[5].into_iter().collect()),
            Err(Error::ProtectedSite(5))
        ));
        assert!(remove_sites(&c, &[9].into_iter().collect()).is_err());
    }

    #[test]
    fn identity_and_full_turn() {
        let c = sample_random_structure(6, 21).unwrap();
        let id = SymmetryTransform::identity(4);
        assert!(max_coord_diff(&c, &apply_transform(&c, &id)) <= 1e-12);
        let full = SymmetryTransform::from_degrees(vec![0, 1, 2, 3], 360, false).unwrap();
        assert!(max_coord_diff(&c, &apply_transform(&c, &full)) <= 1e-10);
    }

    #[test]
    fn corners_are_fixed_points() {
        let t = SymmetryTransform::from_degrees(vec![0, 1], 74, true).unwrap();
        let m = t.matrix();
        assert!((m * output_corner() - output_corner()).amax() < 1e-14);
        let mm = mirror_matrix();
        assert_eq!(mm * output_corner(), output_corner());
    }

    #[test]
    fn inverse_round_trips() {
        let c = sample_random_structure(7, 8).unwrap();
        for (deg, mirror) in [(0, false), (2, false), (118, true), (300, false), (358, true)] {
            let t = SymmetryTransform::from_degrees(vec![3, 0, 4, 1, 2], deg, mirror).unwrap();
            let back = apply_transform(&apply_transform(&c, &t), &t.inverse());
            assert!(max_coord_diff(&c, &back) <= 1e-12, "deg {deg} mirror {mirror}");
        }
    }

    #[test]
    fn off_grid_angle_rejected() {
        assert!(SymmetryTransform::from_degrees(vec![0], 3, false).is_err());
        assert!(SymmetryTransform::from_degrees(vec![0, 0], 2, false).is_err());
    }

    #[test]
    fn descriptors_of_a_hand_built_structure() {
        let c = SiteConfiguration::with_intermediates(&[
            Vec3::new(0.3, 0.3, 0.3),
            Vec3::new(0.5, 0.8, 0.2),
            Vec3::new(0.5, 0.8, 0.45),
            Vec3::new(0.7, 0.7, 0.7),
        ])
        .unwrap();
        let d = pair_geometry_descriptors(&c, [2, 3]).unwrap();
        assert!((d.r_p - 0.25).abs() < 1e-12);
        let pair_mid = Vec3::new(0.5, 0.8, 0.325);
        assert!((d.r_b - (pair_mid - Vec3::repeat(0.5)).norm()).abs() < 1e-12);
        assert!((d.d_bb - 0.4 * 3f64.sqrt()).abs() < 1e-12);
        assert!((d.d_s - 0.3 * 3f64.sqrt()).abs() < 1e-12);
        assert!(pair_geometry_descriptors(&c, [0, 3]).is_err());
    }

    #[test]
    fn coincident_pair_has_zero_size() {
        let c = SiteConfiguration::with_intermediates(&[
            Vec3::new(0.3, 0.3, 0.3),
            Vec3::new(0.5, 0.8, 0.2),
            Vec3::new(0.5, 0.8, 0.2 + 1e-9),
            Vec3::new(0.7, 0.7, 0.7),
        ])
        .unwrap();
        assert!(pair_geometry_descriptors(&c, [2, 3]).unwrap().r_p < 1e-8);
    }
}
