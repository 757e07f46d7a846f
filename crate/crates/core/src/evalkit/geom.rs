//! Planar geometry for scoring: derived headings, oriented ego boxes,
//! convex polygon clipping, and point/disc containment tests.
//!
//! Conventions: ego frame with +x forward, +y left; polygons are convex and
//! counter-clockwise (CCW); angles in radians.

pub type Point = [f64; 2];

/// Tolerance for boundary-inclusive containment and degenerate segments.
const GEOM_EPS: f64 = 1e-9;

/// Heading at each waypoint as the direction of the forward difference
/// `w[i+1] − w[i]`. The last waypoint carries the previous heading forward,
/// as does any waypoint whose outgoing segment is shorter than 1e-9 (a
/// stopped vehicle keeps its heading). The heading before any motion is 0
/// (+x), matching the ego's initial orientation.
///
/// This is the single heading definition used by generation checks, the
/// drive score, and the multimodality measure.
pub fn derive_headings(waypoints: &[Point]) -> Vec<f64> {
    let mut headings = Vec::with_capacity(waypoints.len());
    let mut prev = 0.0;
    for i in 0..waypoints.len() {
        let h = if i + 1 < waypoints.len() {
            let dx = waypoints[i + 1][0] - waypoints[i][0];
            let dy = waypoints[i + 1][1] - waypoints[i][1];
            if dx.hypot(dy) > GEOM_EPS {
                dy.atan2(dx)
            } else {
                prev
            }
        } else {
            prev
        };
        headings.push(h);
        prev = h;
    }
    headings
}

/// Oriented rectangular footprint of the ego vehicle at one waypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoBox {
    pub center: Point,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl EgoBox {
    pub fn new(center: Point, heading: f64, half_length: f64, half_width: f64) -> Self {
        assert!(
            half_length > 0.0 && half_width > 0.0,
            "ego box extents must be positive"
        );
        Self {
            center,
            heading,
            half_length,
            half_width,
        }
    }

    /// Corner polygon, counter-clockwise.
    pub fn corners(&self) -> [Point; 4] {
        let (s, c) = self.heading.sin_cos();
        let (l, w) = (self.half_length, self.half_width);
        // CCW in the box frame: (+l,+w), (−l,+w), (−l,−w), (+l,−w)
        let local = [[l, w], [-l, w], [-l, -w], [l, -w]];
        local.map(|[x, y]| {
            [
                self.center[0] + c * x - s * y,
                self.center[1] + s * x + c * y,
            ]
        })
    }
}

/// Oriented ego box at `trajectory[step]` using derived headings.
pub fn oriented_box(
    waypoints: &[Point],
    step: usize,
    half_length: f64,
    half_width: f64,
) -> EgoBox {
    let headings = derive_headings(waypoints);
    EgoBox::new(waypoints[step], headings[step], half_length, half_width)
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Signed area (positive for CCW).
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x1, y1] = poly[i];
        let [x2, y2] = poly[(i + 1) % n];
        acc += x1 * y2 - x2 * y1;
    }
    acc / 2.0
}

/// Absolute polygon area; 0 for fewer than three vertices.
pub fn polygon_area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

/// True if `poly` (≥3 vertices) is convex and counter-clockwise, allowing
/// collinear runs.
pub fn is_convex_ccw(poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        if cross(poly[i], poly[(i + 1) % n], poly[(i + 2) % n]) < -GEOM_EPS {
            return false;
        }
    }
    signed_area(poly) > 0.0
}

/// Boundary-inclusive point-in-convex-polygon test (poly CCW).
pub fn point_in_convex(p: Point, poly: &[Point]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        if cross(poly[i], poly[(i + 1) % n], p) < -GEOM_EPS {
            return false;
        }
    }
    true
}

/// Sutherland–Hodgman: clip `subject` by each half-plane of convex CCW
/// `clip`. Result is convex and CCW (possibly empty).
pub fn convex_clip(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let nxt = input[(j + 1) % m];
            let cur_in = cross(a, b, cur) >= -GEOM_EPS;
            let nxt_in = cross(a, b, nxt) >= -GEOM_EPS;
            if cur_in {
                output.push(cur);
            }
            if cur_in != nxt_in {
                // intersection of segment cur→nxt with line a→b
                let d1 = cross(a, b, cur);
                let d2 = cross(a, b, nxt);
                let t = d1 / (d1 - d2);
                output.push([
                    cur[0] + t * (nxt[0] - cur[0]),
                    cur[1] + t * (nxt[1] - cur[1]),
                ]);
            }
        }
    }
    output
}

/// Intersection of a sequence of convex CCW polygons by iterated clipping.
/// A single polygon returns itself; an empty intersection returns an empty
/// vertex list (area 0).
pub fn convex_intersection(polys: &[Vec<Point>]) -> Vec<Point> {
    let Some(first) = polys.first() else {
        return Vec::new();
    };
    let mut acc = first.clone();
    for poly in &polys[1..] {
        acc = convex_clip(&acc, poly);
        if acc.is_empty() {
            break;
        }
    }
    acc
}

/// Distance from point `p` to segment `a`–`b`.
pub fn dist_point_segment(p: Point, a: Point, b: Point) -> f64 {
    let abx = b[0] - a[0];
    let aby = b[1] - a[1];
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * abx + (p[1] - a[1]) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let cx = a[0] + t * abx;
    let cy = a[1] + t * aby;
    (p[0] - cx).hypot(p[1] - cy)
}

/// True if the disc at `center` with radius `r` touches the convex CCW
/// polygon (interior or boundary).
pub fn disc_intersects_convex(center: Point, r: f64, poly: &[Point]) -> bool {
    if point_in_convex(center, poly) {
        return true;
    }
    let n = poly.len();
    (0..n).any(|i| dist_point_segment(center, poly[i], poly[(i + 1) % n]) <= r)
}

/// Total length of the polyline through `points`.
pub fn polyline_length(points: &[Point]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b}");
    }

    fn unit_square_at(x: f64, y: f64) -> Vec<Point> {
        vec![[x, y], [x + 1.0, y], [x + 1.0, y + 1.0], [x, y + 1.0]]
    }

    #[test]
    fn headings_follow_forward_differences() {
        let w = [[1.0, 0.0], [2.0, 0.0], [2.0, 1.0], [2.0, 2.0]];
        let h = derive_headings(&w);
        assert_close(h[0], 0.0, 1e-12);
        assert_close(h[1], std::f64::consts::FRAC_PI_2, 1e-12);
        assert_close(h[2], std::f64::consts::FRAC_PI_2, 1e-12);
        // last waypoint carries the previous heading
        assert_close(h[3], std::f64::consts::FRAC_PI_2, 1e-12);
    }

    #[test]
    fn headings_carry_through_stops_and_default_to_forward() {
        // Stationary start: no motion at all → +x everywhere.
        let w = [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]];
        assert_eq!(derive_headings(&w), vec![0.0, 0.0, 0.0]);
        // Motion, then a stop: the stop keeps the entry heading.
        let w = [[0.0, 1.0], [0.0, 2.0], [0.0, 2.0], [0.0, 2.0]];
        let h = derive_headings(&w);
        for &hi in &h {
            assert_close(hi, std::f64::consts::FRAC_PI_2, 1e-12);
        }
    }

    #[test]
    fn box_corners_are_ccw_with_exact_area() {
        for heading in [0.0, 0.4, std::f64::consts::FRAC_PI_2, 2.9, -1.3] {
            let b = EgoBox::new([3.0, -2.0], heading, 2.0, 0.9);
            let corners = b.corners();
            let area = signed_area(&corners);
            assert!(area > 0.0, "corners must be CCW");
            assert_close(area, 4.0 * 2.0 * 0.9, 1e-12);
        }
    }

    #[test]
    fn axis_aligned_box_at_zero_heading() {
        let b = EgoBox::new([0.0, 0.0], 0.0, 2.0, 0.9);
        let c = b.corners();
        assert_eq!(c[0], [2.0, 0.9]);
        assert_eq!(c[1], [-2.0, 0.9]);
        assert_eq!(c[2], [-2.0, -0.9]);
        assert_eq!(c[3], [2.0, -0.9]);
    }

    #[test]
    fn rotated_box_swaps_extents() {
        let b = EgoBox::new([0.0, 0.0], std::f64::consts::FRAC_PI_2, 2.0, 0.9);
        let c = b.corners();
        let max_x = c.iter().map(|p| p[0].abs()).fold(0.0, f64::max);
        let max_y = c.iter().map(|p| p[1].abs()).fold(0.0, f64::max);
        assert_close(max_x, 0.9, 1e-12);
        assert_close(max_y, 2.0, 1e-12);
    }

    #[test]
    fn clip_identity_and_disjoint() {
        let sq = unit_square_at(0.0, 0.0);
        let same = convex_intersection(&[sq.clone()]);
        assert_close(polygon_area(&same), 1.0, 1e-12);
        let far = unit_square_at(5.0, 5.0);
        let empty = convex_intersection(&[sq.clone(), far]);
        assert!(polygon_area(&empty) < 1e-12);
    }

    #[test]
    fn clip_offset_squares_analytic_area() {
        let a = unit_square_at(0.0, 0.0);
        let b = unit_square_at(0.5, 0.0);
        let inter = convex_intersection(&[a, b]);
        assert_close(polygon_area(&inter), 0.5, 1e-12);
    }

    #[test]
    fn clip_three_way_chain() {
        let a = unit_square_at(0.0, 0.0);
        let b = unit_square_at(0.25, 0.0);
        let c = unit_square_at(0.0, 0.25);
        let inter = convex_intersection(&[a, b, c]);
        // overlap is [0.25,1]×[0.25,1]
        assert_close(polygon_area(&inter), 0.75 * 0.75, 1e-12);
    }

    #[test]
    fn intersection_area_never_exceeds_inputs() {
        let a = unit_square_at(0.3, -0.2);
        let b = vec![[0.0, 0.0], [2.0, 0.0], [2.0, 0.5], [0.0, 0.5]];
        let inter = convex_intersection(&[a.clone(), b.clone()]);
        let ia = polygon_area(&inter);
        assert!(ia <= polygon_area(&a) + 1e-12);
        assert!(ia <= polygon_area(&b) + 1e-12);
    }

    #[test]
    fn point_containment_is_boundary_inclusive() {
        let sq = unit_square_at(0.0, 0.0);
        assert!(point_in_convex([0.5, 0.5], &sq));
        assert!(point_in_convex([0.0, 0.0], &sq));
        assert!(point_in_convex([1.0, 0.5], &sq));
        assert!(!point_in_convex([1.1, 0.5], &sq));
        assert!(!point_in_convex([-0.1, -0.1], &sq));
    }

    #[test]
    fn disc_polygon_tests() {
        let sq = unit_square_at(0.0, 0.0);
        // center inside
        assert!(disc_intersects_convex([0.5, 0.5], 0.1, &sq));
        // touching an edge from outside
        assert!(disc_intersects_convex([1.5, 0.5], 0.5, &sq));
        // clearly outside
        assert!(!disc_intersects_convex([2.0, 0.5], 0.5, &sq));
        // near a corner
        assert!(disc_intersects_convex([1.2, 1.2], 0.3, &sq));
        assert!(!disc_intersects_convex([1.3, 1.3], 0.3, &sq));
    }

    #[test]
    fn convexity_check() {
        assert!(is_convex_ccw(&unit_square_at(0.0, 0.0)));
        // clockwise square fails
        let cw: Vec<Point> = unit_square_at(0.0, 0.0).into_iter().rev().collect();
        assert!(!is_convex_ccw(&cw));
        // dart (concave) fails
        let dart = vec![[0.0, 0.0], [2.0, 0.0], [0.5, 0.5], [0.0, 2.0]];
        assert!(!is_convex_ccw(&dart));
    }

    #[test]
    fn polyline_length_sums_segments() {
        let pts = [[0.0, 0.0], [3.0, 0.0], [3.0, 4.0]];
        assert_close(polyline_length(&pts), 7.0, 1e-12);
        assert_eq!(polyline_length(&pts[..1]), 0.0);
    }
}
