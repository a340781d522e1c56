//! Small planar geometry helpers shared by the searches, the region builder
//! and the auditors.

use nalgebra::Vector2;

pub type Vec2 = Vector2<f64>;

/// A closed ball `B(center, radius)` in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ball {
    pub center: Vec2,
    pub radius: f64,
}

impl Ball {
    pub fn new(center: Vec2, radius: f64) -> Self {
        Self { center, radius }
    }

    /// Signed distance to the ball surface; negative inside.
    pub fn clearance(&self, p: &Vec2) -> f64 {
        (p - self.center).norm() - self.radius
    }

    pub fn contains_strict(&self, p: &Vec2) -> bool {
        (p - self.center).norm() < self.radius
    }
}

/// Minimum clearance of `p` against all balls; `+inf` for an empty set.
pub fn min_clearance(p: &Vec2, balls: &[Ball]) -> f64 {
    balls
        .iter()
        .map(|b| b.clearance(p))
        .fold(f64::INFINITY, f64::min)
}

/// Distance from `p` to the closed segment `[a, b]`.
pub fn point_segment_distance(p: &Vec2, a: &Vec2, b: &Vec2) -> f64 {
    let d = b - a;
    let len2 = d.norm_squared();
    if len2 <= 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&d) / len2).clamp(0.0, 1.0);
    (p - (a + d * t)).norm()
}

/// Twice the signed area of triangle `abc`.
pub fn cross2(a: &Vec2, b: &Vec2, c: &Vec2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Whether `p` lies inside the closed triangle `abc` (any orientation).
pub fn point_in_triangle(p: &Vec2, a: &Vec2, b: &Vec2, c: &Vec2) -> bool {
    let d1 = cross2(a, b, p);
    let d2 = cross2(b, c, p);
    let d3 = cross2(c, a, p);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

/// Distance from a point to the closed (possibly degenerate) triangle `abc`.
pub fn point_triangle_distance(p: &Vec2, a: &Vec2, b: &Vec2, c: &Vec2) -> f64 {
    let area = cross2(a, b, c).abs();
    let scale = (b - a).norm().max((c - a).norm()).max((c - b).norm());
    if area > 1e-14 * scale * scale.max(1.0) && point_in_triangle(p, a, b, c) {
        return 0.0;
    }
    point_segment_distance(p, a, b)
        .min(point_segment_distance(p, b, c))
        .min(point_segment_distance(p, c, a))
}

/// Whether the closed triangle `abc` meets the open interior of `ball`
/// by more than `tol`. Touching the surface does not count.
pub fn triangle_hits_ball(a: &Vec2, b: &Vec2, c: &Vec2, ball: &Ball, tol: f64) -> bool {
    point_triangle_distance(&ball.center, a, b, c) < ball.radius - tol
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_distance_cases() {
        let a = Vec2::new(0.0, 0.0);
        let b = Vec2::new(2.0, 0.0);
        assert!((point_segment_distance(&Vec2::new(1.0, 1.0), &a, &b) - 1.0).abs() < 1e-15);
        assert!((point_segment_distance(&Vec2::new(3.0, 0.0), &a, &b) - 1.0).abs() < 1e-15);
        assert!((point_segment_distance(&Vec2::new(5.0, 1.0), &a, &a) - 26f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn triangle_contains_center() {
        let ball = Ball::new(Vec2::new(0.2, 0.2), 0.01);
        let a = Vec2::new(0.0, 0.0);
        let b = Vec2::new(1.0, 0.0);
        let c = Vec2::new(0.0, 1.0);
        assert!(triangle_hits_ball(&a, &b, &c, &ball, 1e-12));
        let far = Ball::new(Vec2::new(2.0, 2.0), 1.0);
        assert!(!triangle_hits_ball(&a, &b, &c, &far, 1e-12));
    }

    #[test]
    fn touching_is_not_hitting() {
        let ball = Ball::new(Vec2::new(0.0, -1.0), 1.0);
        let a = Vec2::new(-1.0, 0.0);
        let b = Vec2::new(1.0, 0.0);
        let c = Vec2::new(0.0, 1.0);
        assert!(!triangle_hits_ball(&a, &b, &c, &ball, 1e-12));
    }
}
