//! Monte Carlo simple random walk on `Z^d`: hitting of finite sets and
//! visit counts of killed walks. These are independent oracles for the
//! potential-theoretic solvers.
//!
//! Far from the target the walk is advanced in blocks: if the `l^1` distance
//! to the target's bounding box is `D ≥ 2`, the next `D - 1` steps cannot
//! touch the target, and their net displacement is sampled exactly from
//! multinomial axis counts and binomial signs.
//!
//! The infinite horizon is handled by scale doubling: once the walk is at
//! distance `T` from the target centre, hitting from `y` has probability
//! `h(y) ≈ h(c + (y - c)/2) / 2` (the far field of a potential is
//! `cap · C_d / |y|^{d-2}` with `d = 3` giving the factor 1/2; in general
//! `2^{2-d}`), so the walk escapes with probability `1 - 2^{2-d}` and is
//! otherwise moved to the halved point.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::error::{LabError, Result};
use crate::lattice::{IntBox, Point, SiteSet};
use crate::mc::{binomial_estimate, merge_moments, par_blocks, Estimate, Moments};

/// Advances `y` by `n` steps of simple random walk.
pub fn jump(y: &mut Point, n: u64, rng: &mut ChaCha8Rng) {
    let d = y.dim();
    let mut left = n;
    for axis in 0..d {
        let m = if axis + 1 == d {
            left
        } else if left == 0 {
            0
        } else {
            Binomial::new(left, 1.0 / (d - axis) as f64).unwrap().sample(rng)
        };
        left -= m;
        if m > 0 {
            let up = Binomial::new(m, 0.5).unwrap().sample(rng) as i64;
            let delta = (2 * up - m as i64) as i32;
            *y = y.with_coord(axis, y.coord(axis) + delta);
        }
    }
}

/// One uniformly chosen nearest-neighbour step.
#[inline]
pub fn step(y: &mut Point, rng: &mut ChaCha8Rng) {
    let d = y.dim();
    let k = rng.gen_range(0..2 * d);
    let delta = if k % 2 == 0 { 1 } else { -1 };
    *y = y.with_coord(k / 2, y.coord(k / 2) + delta);
}

fn l1_to_box(y: &Point, b: &IntBox) -> u64 {
    (0..y.dim())
        .map(|i| {
            let v = y.coord(i);
            (b.lo.coord(i) - v).max(v - b.hi.coord(i)).max(0) as u64
        })
        .sum()
}

/// A finite target set prepared for repeated hitting simulations.
#[derive(Clone, Debug)]
pub struct SrwTarget {
    set: SiteSet,
    bbox: IntBox,
    center: Vec<f64>,
    radius: f64,
}

impl SrwTarget {
    pub fn new(set: &SiteSet) -> Result<Self> {
        let bbox = set
            .bounding_box()
            .ok_or_else(|| LabError::invalid("hitting target is empty"))?;
        let d = bbox.dim();
        let center: Vec<f64> =
            (0..d).map(|i| 0.5 * (bbox.lo.coord(i) as f64 + bbox.hi.coord(i) as f64)).collect();
        let radius = set
            .iter()
            .map(|p| dist_to(&center, p))
            .fold(0.0, f64::max);
        Ok(SrwTarget { set: set.clone(), bbox, center, radius })
    }

    /// Default doubling radius for a walk started at `x`.
    pub fn default_trigger(&self, x: &Point) -> f64 {
        (64.0f64).max(4.0 * dist_to(&self.center, x)).max(16.0 * self.radius)
    }

    /// Whether a walk from `x` ever hits the target.
    pub fn hits(&self, x: &Point, trigger: f64, rng: &mut ChaCha8Rng) -> bool {
        let d = x.dim();
        let keep = 2.0f64.powi(2 - d as i32);
        let mut y = *x;
        if self.set.contains(&y) {
            return true;
        }
        let t2 = trigger * trigger;
        loop {
            let dist = l1_to_box(&y, &self.bbox);
            if dist >= 2 {
                jump(&mut y, dist - 1, rng);
            } else {
                step(&mut y, rng);
                if self.set.contains(&y) {
                    return true;
                }
            }
            let r2: f64 = (0..d).map(|i| (y.coord(i) as f64 - self.center[i]).powi(2)).sum();
            if r2 >= t2 {
                if rng.gen::<f64>() >= keep {
                    return false;
                }
                let c: Vec<i32> = (0..d)
                    .map(|i| (self.center[i] + 0.5 * (y.coord(i) as f64 - self.center[i])).round() as i32)
                    .collect();
                y = Point::new(&c).expect("halving keeps coordinates small");
            }
        }
    }
}

fn dist_to(c: &[f64], p: &Point) -> f64 {
    c.iter().enumerate().map(|(i, v)| (p.coord(i) as f64 - v).powi(2)).sum::<f64>().sqrt()
}

/// Monte Carlo `P_x[H_K < ∞]` from `n` walks.
pub fn srw_hitting_estimate(k: &SiteSet, x: &Point, n: usize, seed: u64) -> Result<Estimate> {
    let target = SrwTarget::new(k)?;
    let trigger = target.default_trigger(x);
    let hits: u64 = par_blocks(seed, n, |rng, m| {
        (0..m).filter(|_| target.hits(x, trigger, rng)).count() as u64
    })
    .into_iter()
    .sum();
    Ok(binomial_estimate(hits, n as u64))
}

/// Monte Carlo escape probability `P_x[H̃_K = ∞]` for `x ∈ K`.
pub fn srw_escape_estimate(k: &SiteSet, x: &Point, n: usize, seed: u64) -> Result<Estimate> {
    if !k.contains(x) {
        return Err(LabError::OutsideDomain(x.to_string()));
    }
    let target = SrwTarget::new(k)?;
    let trigger = target.default_trigger(x);
    let escapes: u64 = par_blocks(seed, n, |rng, m| {
        (0..m)
            .filter(|_| {
                let mut y = *x;
                step(&mut y, rng);
                !target.hits(&y, trigger, rng)
            })
            .count() as u64
    })
    .into_iter()
    .sum();
    Ok(binomial_estimate(escapes, n as u64))
}

/// Monte Carlo expected number of visits to `y` by a walk from `x` before it
/// leaves `U` (the killed Green function `g_U(x, y)`).
pub fn srw_visits_before_exit(u: &SiteSet, x: &Point, y: &Point, n: usize, seed: u64) -> Result<Estimate> {
    if !u.contains(x) || !u.contains(y) {
        return Err(LabError::OutsideDomain(format!("{x} or {y}")));
    }
    let parts = par_blocks(seed, n, |rng, m| {
        let mut mom = Moments::default();
        for _ in 0..m {
            let mut z = *x;
            let mut visits = 0u64;
            while u.contains(&z) {
                if z == *y {
                    visits += 1;
                }
                step(&mut z, rng);
            }
            mom.push(visits as f64);
        }
        mom
    });
    Ok(merge_moments(&parts).estimate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mc::stream_rng;

    #[test]
    fn jump_preserves_parity_and_length() {
        let mut rng = stream_rng(1, 0);
        for n in [0u64, 1, 2, 7, 100] {
            for _ in 0..50 {
                let mut y = Point::origin(3);
                jump(&mut y, n, &mut rng);
                assert!(y.norm1() as u64 <= n);
                assert_eq!((y.norm1() as u64) % 2, n % 2);
            }
        }
    }

    #[test]
    fn jump_second_moment() {
        // E|X_n|² = n for simple random walk.
        let mut rng = stream_rng(2, 0);
        let n = 40u64;
        let m: Moments = (0..20000)
            .map(|_| {
                let mut y = Point::origin(3);
                jump(&mut y, n, &mut rng);
                y.norm2_sq() as f64
            })
            .collect();
        assert!(m.estimate().z_exact(n as f64) < 4.0, "{:?}", m.estimate());
    }

    #[test]
    fn visits_in_single_site_domain() {
        let u = SiteSet::from_points(vec![Point::origin(3)]).unwrap();
        let e = srw_visits_before_exit(&u, &Point::origin(3), &Point::origin(3), 100, 3).unwrap();
        assert_eq!(e.value, 1.0);
        assert_eq!(e.se, 0.0);
    }

    #[test]
    fn start_inside_target_hits() {
        let k = SiteSet::from_points(vec![Point::origin(3)]).unwrap();
        let e = srw_hitting_estimate(&k, &Point::origin(3), 100, 4).unwrap();
        assert_eq!(e.value, 1.0);
    }
}
