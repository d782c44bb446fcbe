//! Symmetry-minimized structural similarity.
//!
//! `S^2(a, b)` is the smallest mean squared distance between corresponding
//! sites of `a` and a transformed copy of `b`, over every relabeling of the
//! intermediate sites, every 2-degree rotation about the input-output
//! diagonal, and the mirror through x - y = 0.
//!
//! The search is exact branch-and-bound: for each of the 360 orthogonal
//! states the per-site squared distances are tabulated once, a row-minimum
//! bound discards states that cannot win, and permutations are abandoned as
//! soon as their partial sum reaches the current bound.

use std::sync::{Mutex, OnceLock};

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::geometry::{
    axial_coordinates, mirror_matrix, rotation_table, SiteConfiguration, SymmetryTransform, Vec3,
    ROTATION_STEPS,
};

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    /// Minimum S^2 in r0^2. With a cutoff, `INFINITY` when no candidate
    /// falls below it.
    pub s_squared: f64,
    pub best_transform: Option<SymmetryTransform>,
    /// Candidates (permutation, rotation, mirror) whose cost was accumulated
    /// at least partially.
    pub evaluations: u64,
}

impl AlignmentResult {
    pub fn is_below(&self, cutoff: f64) -> bool {
        self.s_squared < cutoff
    }
}

/// All permutations of `0..k` in lexicographic order.
pub fn permutations(k: usize) -> std::sync::Arc<Vec<Vec<usize>>> {
    static CACHE: OnceLock<Mutex<Vec<Option<std::sync::Arc<Vec<Vec<usize>>>>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(Vec::new()));
    let mut guard = cache.lock().unwrap();
    if guard.len() <= k {
        guard.resize(k + 1, None);
    }
    guard[k]
        .get_or_insert_with(|| std::sync::Arc::new(lex_permutations(k)))
        .clone()
}

fn lex_permutations(k: usize) -> Vec<Vec<usize>> {
    let mut cur: Vec<usize> = (0..k).collect();
    let mut all = vec![cur.clone()];
    loop {
        // next_permutation
        let Some(i) = (1..k).rev().find(|&i| cur[i - 1] < cur[i]) else {
            return all;
        };
        let j = (i..k).rev().find(|&j| cur[j] > cur[i - 1]).unwrap();
        cur.swap(i - 1, j);
        cur[i..].reverse();
        all.push(cur.clone());
    }
}

fn orthogonal_states() -> &'static Vec<(usize, bool, Matrix3<f64>)> {
    static STATES: OnceLock<Vec<(usize, bool, Matrix3<f64>)>> = OnceLock::new();
    STATES.get_or_init(|| {
        let m = mirror_matrix();
        let mut v = Vec::with_capacity(2 * ROTATION_STEPS);
        for (step, r) in rotation_table().iter().enumerate() {
            v.push((step, false, *r));
            v.push((step, true, r * m));
        }
        v
    })
}

fn check_dims(a: &SiteConfiguration, b: &SiteConfiguration) -> Result<()> {
    if a.n_sites() != b.n_sites() {
        return Err(Error::DimensionMismatch {
            left: a.n_sites(),
            right: b.n_sites(),
        });
    }
    Ok(())
}

/// Minimum S^2 of `b` aligned onto `a`.
///
/// With `cutoff`, candidates whose partial sum reaches `N * cutoff` are
/// abandoned from the start, so the result is exact whenever the true S^2 is
/// below the cutoff and `INFINITY` otherwise.
pub fn similarity_score(
    a: &SiteConfiguration,
    b: &SiteConfiguration,
    cutoff: Option<f64>,
) -> Result<AlignmentResult> {
    check_dims(a, b)?;
    let n = a.n_sites();
    let k = n - 2;
    let perms = permutations(k);
    let pa = a.positions();
    let pb = b.positions();

    // Bound on the un-normalized sum; equality is not a win.
    let mut bound = cutoff.map_or(f64::INFINITY, |c| c * n as f64);
    let mut best: Option<(usize, usize, bool)> = None; // (perm index, step, mirror)
    let mut evaluations = 0u64;
    let mut cost = vec![0.0; k * k];
    let mut row_min = vec![0.0; k];
    let mut moved = vec![Vec3::zeros(); n];

    for &(step, mirror, ref m) in orthogonal_states() {
        for (dst, src) in moved.iter_mut().zip(pb) {
            *dst = if step == 0 && !mirror { *src } else { m * src };
        }
        let ends = (pa[0] - moved[0]).norm_squared() + (pa[n - 1] - moved[n - 1]).norm_squared();
        if ends > bound {
            continue;
        }
        let mut floor = ends;
        for i in 0..k {
            let mut lo = f64::INFINITY;
            for j in 0..k {
                let d = (pa[i + 1] - moved[j + 1]).norm_squared();
                cost[i * k + j] = d;
                lo = lo.min(d);
            }
            row_min[i] = lo;
            floor += lo;
        }
        if floor > bound {
            continue;
        }
        'perm: for (pi, perm) in perms.iter().enumerate() {
            evaluations += 1;
            let mut s = ends;
            for (i, &j) in perm.iter().enumerate() {
                s += cost[i * k + j];
                if s > bound {
                    continue 'perm;
                }
            }
            let better = match best {
                None => s < bound,
                Some(cur) => s < bound || (s == bound && (pi, step, mirror) < cur),
            };
            if better {
                bound = s;
                best = Some((pi, step, mirror));
            }
        }
    }

    Ok(match best {
        Some((pi, step, mirror)) => AlignmentResult {
            s_squared: bound / n as f64,
            best_transform: Some(SymmetryTransform {
                permutation: perms[pi].clone(),
                rotation_step: step,
                mirror,
            }),
            evaluations,
        },
        None => AlignmentResult {
            s_squared: f64::INFINITY,
            best_transform: None,
            evaluations,
        },
    })
}

/// Per-site (axial position, radial distance) about the diagonal.
pub fn axial_profile(config: &SiteConfiguration) -> Vec<(f64, f64)> {
    config.positions().iter().map(axial_coordinates).collect()
}

/// Lower bound on S^2 from transform-invariant per-site features.
///
/// For any two points `|p - q|^2 >= (s_p - s_q)^2 + (rho_p - rho_q)^2` in
/// cylindrical coordinates about the diagonal, and every candidate
/// transform preserves `(s, rho)`, so minimizing the feature distance over
/// the same relabelings bounds the true minimum from below.
pub fn axis_profile_lower_bound(a: &SiteConfiguration, b: &SiteConfiguration) -> Result<f64> {
    check_dims(a, b)?;
    Ok(profile_lower_bound(&axial_profile(a), &axial_profile(b)))
}

pub fn profile_lower_bound(fa: &[(f64, f64)], fb: &[(f64, f64)]) -> f64 {
    let n = fa.len();
    let k = n - 2;
    let d = |p: (f64, f64), q: (f64, f64)| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2);
    let ends = d(fa[0], fb[0]) + d(fa[n - 1], fb[n - 1]);
    let mut cost = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            cost[i * k + j] = d(fa[i + 1], fb[j + 1]);
        }
    }
    let mut best = f64::INFINITY;
    'perm: for perm in permutations(k).iter() {
        let mut s = ends;
        for (i, &j) in perm.iter().enumerate() {
            s += cost[i * k + j];
            if s >= best {
                continue 'perm;
            }
        }
        best = s;
    }
    best / n as f64
}
