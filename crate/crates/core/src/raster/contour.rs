//! Connected components, Moore-neighbor boundary tracing and closed-contour
//! Douglas–Peucker simplification.

use crate::error::{Error, Result};
use crate::geometry::ShapeKind;

/// Default simplification tolerance as a fraction of the contour perimeter.
pub const DP_EPSILON_FRACTION: f64 = 0.04;

/// Binary mask over a `width × height` grid, row-major.
#[derive(Debug, Clone)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }
}

// Clockwise in image coordinates (y down), starting west.
const NEIGHBORS: [(isize, isize); 8] = [
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
];

/// 8-connected components; each is a list of `(x, y)` in raster order of discovery.
pub fn connected_components(mask: &BinaryMask) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; mask.bits.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.bits.len() {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut comp = Vec::new();
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % mask.width, idx / mask.width);
            comp.push((x, y));
            for (dx, dy) in NEIGHBORS {
                let nx = x as isize + dx;
                let ny = y as isize + dy;
                if mask.get(nx, ny) {
                    let n = ny as usize * mask.width + nx as usize;
                    if !seen[n] {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        comp.sort_by_key(|&(x, y)| (y, x));
        out.push(comp);
    }
    out
}

/// Outer boundary of the component containing `start`, which must be its
/// first pixel in raster order (so its west neighbor is background).
pub fn trace_boundary(mask: &BinaryMask, start: (usize, usize)) -> Vec<(isize, isize)> {
    let start = (start.0 as isize, start.1 as isize);
    let mut boundary = vec![start];

    // Backtrack direction index: the neighbor we came from, relative to current.
    let step = |p: (isize, isize), back: usize| -> Option<((isize, isize), usize)> {
        for k in 1..=8 {
            let d = (back + k) % 8;
            let (dx, dy) = NEIGHBORS[d];
            let q = (p.0 + dx, p.1 + dy);
            if mask.get(q.0, q.1) {
                // previous scanned neighbor (background) seen from q
                let prev = (back + k - 1) % 8;
                let (bx, by) = NEIGHBORS[prev];
                let b_abs = (p.0 + bx, p.1 + by);
                let rel = (b_abs.0 - q.0, b_abs.1 - q.1);
                let back_q = NEIGHBORS.iter().position(|&n| n == rel).expect("adjacent");
                return Some((q, back_q));
            }
        }
        None
    };

    let Some((first, first_back)) = step(start, 0) else {
        return boundary;
    };
    let (mut p, mut back) = (first, first_back);
    let limit = 4 * mask.bits.len() + 8;
    for _ in 0..limit {
        let (next, next_back) = step(p, back).expect("component has at least two pixels");
        if p == start && next == first {
            break;
        }
        boundary.push(p);
        p = next;
        back = next_back;
    }
    boundary
}

pub fn perimeter(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    points
        .iter()
        .zip(points.iter().cycle().skip(1))
        .map(|(a, b)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt())
        .sum()
}

fn shoelace(points: &[(f64, f64)]) -> f64 {
    points
        .iter()
        .zip(points.iter().cycle().skip(1))
        .map(|(a, b)| a.0 * b.1 - b.0 * a.1)
        .sum::<f64>()
        / 2.0
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    if len2 == 0.0 {
        return ((p.0 - a.0).powi(2) + (p.1 - a.1).powi(2)).sqrt();
    }
    let t = (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * vx, a.1 + t * vy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Open-polyline Douglas–Peucker; returns kept indices including both ends.
fn dp_open(points: &[(f64, f64)], eps: f64) -> Vec<usize> {
    let n = points.len();
    if n <= 2 {
        return (0..n).collect();
    }
    let mut keep = vec![false; n];
    keep[0] = true;
    keep[n - 1] = true;
    let mut stack = vec![(0usize, n - 1)];
    while let Some((lo, hi)) = stack.pop() {
        if hi <= lo + 1 {
            continue;
        }
        let (mut best, mut best_d) = (lo, -1.0);
        for i in lo + 1..hi {
            let d = segment_distance(points[i], points[lo], points[hi]);
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        if best_d > eps {
            keep[best] = true;
            stack.push((lo, best));
            stack.push((best, hi));
        }
    }
    (0..n).filter(|&i| keep[i]).collect()
}

fn farthest_from(points: &[(f64, f64)], from: (f64, f64)) -> usize {
    let mut best = 0;
    let mut best_d = -1.0;
    for (i, p) in points.iter().enumerate() {
        let d = (p.0 - from.0).powi(2) + (p.1 - from.1).powi(2);
        if d > best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Closed-contour simplification: the contour is cut at two mutually distant
/// points and each half is simplified as an open polyline.
pub fn simplify_closed(points: &[(f64, f64)], eps: f64) -> Vec<(f64, f64)> {
    let n = points.len();
    if n <= 3 {
        return points.to_vec();
    }
    let a = farthest_from(points, points[0]);
    let b = farthest_from(points, points[a]);
    if a == b {
        return vec![points[a]];
    }
    let chain = |from: usize, to: usize| -> Vec<(f64, f64)> {
        let len = (to + n - from) % n;
        (0..=len).map(|k| points[(from + k) % n]).collect()
    };
    let first = chain(a, b);
    let second = chain(b, a);
    let mut out: Vec<(f64, f64)> = dp_open(&first, eps).into_iter().map(|i| first[i]).collect();
    let tail: Vec<(f64, f64)> = dp_open(&second, eps).into_iter().map(|i| second[i]).collect();
    out.pop();
    out.extend_from_slice(&tail[..tail.len() - 1]);
    out
}

/// Shape class from the vertex count of the simplified closed boundary:
/// 3 → triangle, 4 → square, more → circle.
pub fn classify_polygon(points: &[(f64, f64)], epsilon_fraction: f64) -> Result<ShapeKind> {
    if points.len() < 3 {
        return Err(Error::Classification(format!(
            "need at least 3 boundary points, got {}",
            points.len()
        )));
    }
    let perim = perimeter(points);
    let scale = perim.max(1e-12);
    if shoelace(points).abs() <= 1e-9 * scale * scale {
        return Err(Error::Classification("boundary is collinear".into()));
    }
    let simplified = simplify_closed(points, epsilon_fraction * perim);
    if simplified.len() < 3 || shoelace(&simplified).abs() <= 1e-9 * scale * scale {
        return Err(Error::Classification("boundary collapses under simplification".into()));
    }
    Ok(match simplified.len() {
        3 => ShapeKind::Triangle,
        4 => ShapeKind::Square,
        _ => ShapeKind::Circle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> BinaryMask {
        let mut m = BinaryMask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.set(x, y, f(x, y));
            }
        }
        m
    }

    #[test]
    fn components_use_8_connectivity() {
        let m = mask_from(5, 5, |x, y| (x == y) || (x == 4 && y == 0));
        let comps = connected_components(&m);
        assert_eq!(comps.len(), 2);
        let mut sizes: Vec<usize> = comps.iter().map(|c| c.len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![1, 5]);
    }

    #[test]
    fn square_boundary_trace() {
        let m = mask_from(10, 10, |x, y| (2..6).contains(&x) && (3..7).contains(&y));
        let b = trace_boundary(&m, (2, 3));
        assert_eq!(b.len(), 12);
        assert_eq!(b[0], (2, 3));
        assert!(b.contains(&(5, 6)));
        // clockwise: second point moves east along the top edge
        assert_eq!(b[1], (3, 3));
    }

    #[test]
    fn single_pixel_boundary() {
        let m = mask_from(3, 3, |x, y| x == 1 && y == 1);
        assert_eq!(trace_boundary(&m, (1, 1)), vec![(1, 1)]);
    }

    #[test]
    fn classify_exact_square_corners() {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push((i as f64, 0.0));
        }
        for i in 0..10 {
            pts.push((10.0, i as f64));
        }
        for i in 0..10 {
            pts.push((10.0 - i as f64, 10.0));
        }
        for i in 0..10 {
            pts.push((0.0, 10.0 - i as f64));
        }
        assert_eq!(classify_polygon(&pts, DP_EPSILON_FRACTION).unwrap(), ShapeKind::Square);
    }

    #[test]
    fn classify_64_gon_as_circle() {
        let pts: Vec<(f64, f64)> = (0..64)
            .map(|k| {
                let t = k as f64 * std::f64::consts::TAU / 64.0;
                (16.0 * t.cos(), 16.0 * t.sin())
            })
            .collect();
        // analytic check: quarter-arc sagitta 16 (1 - cos 45°) ≈ 4.69 exceeds
        // 0.04 × perimeter ≈ 4.02, so at least 8 vertices survive
        let simplified = simplify_closed(&pts, DP_EPSILON_FRACTION * perimeter(&pts));
        assert!(simplified.len() > 4, "{}", simplified.len());
        assert_eq!(classify_polygon(&pts, DP_EPSILON_FRACTION).unwrap(), ShapeKind::Circle);
    }

    #[test]
    fn classify_three_points() {
        let pts = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)];
        assert_eq!(classify_polygon(&pts, DP_EPSILON_FRACTION).unwrap(), ShapeKind::Triangle);
    }

    #[test]
    fn collinear_is_error() {
        let pts = [(0.0, 0.0), (1.0, 1.0), (2.0, 2.0), (3.0, 3.0)];
        assert!(matches!(
            classify_polygon(&pts, DP_EPSILON_FRACTION),
            Err(Error::Classification(_))
        ));
        assert!(classify_polygon(&[(0.0, 0.0), (1.0, 0.0)], DP_EPSILON_FRACTION).is_err());
    }
}
