use std::f64::consts::PI;

use crate::geometry::Vec3;

/// Motion of two neighbors trading slots.
///
/// The pair's midpoint travels straight from its start to its end position
/// over `interval`, so a pair that also advances one slot keeps pace with the
/// rest of the queue. Relative to that midpoint the drones sweep antipodal
/// half-ellipses that bulge `lateral_offset` to either side of the line
/// joining them, finishing the exchange after `exchange` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapTrajectory {
    start: f64,
    exchange: f64,
    interval: f64,
    mid_from: Vec3,
    mid_to: Vec3,
    rel_from: Vec3,
    rel_to: Vec3,
    bulge: Vec3,
}

impl SwapTrajectory {
    /// `first` flies `first_from -> first_to`, `second` flies `second_from -> second_to`.
    /// `plane_normal` fixes the plane the bulge lies in.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        first_from: Vec3,
        first_to: Vec3,
        second_from: Vec3,
        second_to: Vec3,
        lateral_offset: f64,
        plane_normal: Vec3,
        start: f64,
        exchange: f64,
        interval: f64,
    ) -> Self {
        let rel_from = second_from - first_from;
        let rel_to = second_to - first_to;
        let sweep = rel_from - rel_to;
        let mut side = plane_normal
            .cross(sweep)
            .normalized()
            .or_else(|| Vec3::new(1.0, 0.0, 0.0).cross(sweep).normalized())
            .or_else(|| Vec3::new(0.0, 1.0, 0.0).cross(sweep).normalized())
            .unwrap_or(Vec3::new(1.0, 0.0, 0.0));
        if (rel_from + rel_to).dot(side) < 0.0 {
            side = -side;
        }
        Self {
            start,
            exchange: exchange.max(f64::EPSILON),
            interval: interval.max(exchange).max(f64::EPSILON),
            mid_from: (first_from + second_from) * 0.5,
            mid_to: (first_to + second_to) * 0.5,
            rel_from,
            rel_to,
            bulge: side * (2.0 * lateral_offset),
        }
    }

    fn relative(&self, t: f64) -> Vec3 {
        let sigma = (t - self.start) / self.exchange;
        if sigma <= 0.0 {
            return self.rel_from;
        }
        if sigma >= 1.0 {
            return self.rel_to;
        }
        let (s, c) = (PI * sigma).sin_cos();
        self.rel_from * ((1.0 + c) / 2.0) + self.rel_to * ((1.0 - c) / 2.0) + self.bulge * s
    }

    /// Positions of `(first, second)` at time `t`.
    pub fn positions(&self, t: f64) -> (Vec3, Vec3) {
        let tau = ((t - self.start) / self.interval).clamp(0.0, 1.0);
        let mid = self.mid_from.lerp(self.mid_to, tau);
        let rel = self.relative(t) * 0.5;
        (mid - rel, mid + rel)
    }

    /// True once the exchange is complete; the pair may still be closing in on its slots.
    pub fn exchanged(&self, t: f64) -> bool {
        t >= self.start + self.exchange - 1e-9
    }

    pub fn finished(&self, t: f64) -> bool {
        t >= self.start + self.interval - 1e-9
    }

    pub fn end_time(&self) -> f64 {
        self.start + self.interval
    }

    /// Peak speed of either drone, from the analytic velocity on a dense grid.
    pub fn peak_speed(&self) -> f64 {
        const N: usize = 4096;
        let mid_v = (self.mid_to - self.mid_from) * (1.0 / self.interval);
        let mut peak: f64 = 0.0;
        for i in 0..=N {
            let sigma = i as f64 / N as f64;
            let (s, c) = (PI * sigma).sin_cos();
            let rel_v = ((self.rel_to - self.rel_from) * (s / 2.0) + self.bulge * c) * (PI / self.exchange);
            let half = rel_v * 0.5;
            peak = peak.max((mid_v - half).norm()).max((mid_v + half).norm());
        }
        // after the exchange only the midpoint drift remains
        if self.interval > self.exchange {
            peak = peak.max(mid_v.norm());
        }
        peak * (1.0 + 1e-6)
    }

    /// Closest approach of the pair, from the analytic relative motion.
    pub fn min_separation(&self) -> f64 {
        // |rel| is smooth in sigma; a dense scan plus local refinement is exact enough
        const N: usize = 2048;
        let rel_at = |sigma: f64| self.relative(self.start + sigma * self.exchange).norm();
        let (mut best_i, mut best) = (0, f64::INFINITY);
        for i in 0..=N {
            let d = rel_at(i as f64 / N as f64);
            if d < best {
                best = d;
                best_i = i;
            }
        }
        let (mut lo, mut hi) = (
            best_i.saturating_sub(1) as f64 / N as f64,
            (best_i + 1).min(N) as f64 / N as f64,
        );
        for _ in 0..60 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if rel_at(m1) < rel_at(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        best.min(rel_at((lo + hi) / 2.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const UP: Vec3 = Vec3::new(0.0, 0.0, 1.0);

    /// Oracle: sample both drones every millisecond and take the pairwise minimum.
    fn sampled_min(traj: &SwapTrajectory, duration: f64) -> f64 {
        let steps = (duration / 1e-3).round() as usize;
        (0..=steps)
            .map(|i| {
                let (a, b) = traj.positions(i as f64 * 1e-3);
                a.distance(b)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn in_place_swap_one_meter_apart() {
        let a = Vec3::new(0.0, 0.0, 0.0);
        let b = Vec3::new(1.0, 0.0, 0.0);
        let traj = SwapTrajectory::new(a, b, b, a, 0.2, UP, 0.0, 1.0, 1.0);
        // sampled at 1 ms, the closest approach is the midpoint crossing
        let sampled = sampled_min(&traj, 1.0);
        assert_abs_diff_eq!(sampled, 0.4, epsilon = 1e-9);
        assert_abs_diff_eq!(traj.min_separation(), 0.4, epsilon = 1e-9);
        let (p, q) = traj.positions(0.5);
        assert_abs_diff_eq!(p.distance(Vec3::new(0.5, 0.0, 0.0)), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(q.distance(Vec3::new(0.5, 0.0, 0.0)), 0.2, epsilon = 1e-12);
        assert_eq!(traj.positions(1.0), (b, a));
        assert_eq!(traj.positions(0.0), (a, b));
    }

    #[test]
    fn swap_while_advancing_keeps_endpoints() {
        // first stays at slot 1, second jumps from slot 2 to slot 0
        let s = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.5, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
        let traj = SwapTrajectory::new(s[1], s[1], s[2], s[0], 0.15, UP, 2.0, 1.0, 2.0);
        assert_eq!(traj.positions(2.0), (s[1], s[2]));
        let (a, b) = traj.positions(4.0);
        assert!(a.distance(s[1]) < 1e-12 && b.distance(s[0]) < 1e-12);
        assert!(traj.exchanged(3.0) && !traj.finished(3.5) && traj.finished(4.0));
        let sampled = sampled_min(&SwapTrajectory::new(s[1], s[1], s[2], s[0], 0.15, UP, 0.0, 1.0, 2.0), 2.0);
        assert_abs_diff_eq!(traj.min_separation(), sampled, epsilon = 1e-6);
        assert!(sampled >= 0.3 - 1e-9);
    }

    #[test]
    fn peak_speed_bounds_sampled_speed() {
        let a = Vec3::new(0.0, 0.0, 0.0);
        let b = Vec3::new(0.8, 0.3, 0.0);
        let c = Vec3::new(1.5, 0.9, 0.0);
        let traj = SwapTrajectory::new(b, b, c, a, 0.2, UP, 0.0, 1.5, 2.0);
        let dt = 1e-4;
        let mut peak: f64 = 0.0;
        let mut prev = traj.positions(0.0);
        for i in 1..=20_000 {
            let cur = traj.positions(i as f64 * dt);
            peak = peak.max(cur.0.distance(prev.0) / dt).max(cur.1.distance(prev.1) / dt);
            prev = cur;
        }
        assert!(peak <= traj.peak_speed() + 1e-6, "{peak} > {}", traj.peak_speed());
    }
}
