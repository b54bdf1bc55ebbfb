//! Analytic rasterizer. Pixel `(i, j)` covers `[i, i + 1) × [j, j + 1)` and is
//! filled iff its center `(i + 0.5, j + 0.5)` lies inside the shape.

use image::{Rgb, RgbImage};

use crate::geometry::ShapeKind;

use super::SceneSpec;

pub const BACKGROUND: Rgb<u8> = Rgb([128, 128, 128]);
pub const RED: Rgb<u8> = Rgb([255, 0, 0]);
pub const BLUE: Rgb<u8> = Rgb([0, 0, 255]);

/// Vertices of the apex-up equilateral triangle with side `2r` whose centroid
/// sits at `center`.
pub fn triangle_vertices(center: (f64, f64), radius: f64) -> [(f64, f64); 3] {
    let h = radius * 3f64.sqrt();
    let (x, y) = center;
    [
        (x, y - 2.0 * h / 3.0),
        (x - radius, y + h / 3.0),
        (x + radius, y + h / 3.0),
    ]
}

/// Point-in-shape test in continuous image coordinates.
pub fn shape_contains(shape: ShapeKind, center: (f64, f64), radius: f64, p: (f64, f64)) -> bool {
    let dx = p.0 - center.0;
    let dy = p.1 - center.1;
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= radius * radius,
        ShapeKind::Square => dx.abs() <= radius && dy.abs() <= radius,
        ShapeKind::Triangle => {
            let [a, b, c] = triangle_vertices(center, radius);
            let edge = |u: (f64, f64), v: (f64, f64)| (v.0 - u.0) * (p.1 - u.1) - (v.1 - u.1) * (p.0 - u.0);
            let e0 = edge(a, b);
            let e1 = edge(b, c);
            let e2 = edge(c, a);
            (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
        }
    }
}

fn fill(img: &mut RgbImage, shape: ShapeKind, pos: (i32, i32), radius: u32, color: Rgb<u8>) {
    let center = (pos.0 as f64, pos.1 as f64);
    let r = radius as f64;
    let (w, h) = img.dimensions();
    let x0 = (pos.0 - radius as i32 - 1).max(0) as u32;
    let y0 = (pos.1 - radius as i32 - 1).max(0) as u32;
    let x1 = ((pos.0 + radius as i32 + 1).max(0) as u32).min(w - 1);
    let y1 = ((pos.1 + radius as i32 + 1).max(0) as u32).min(h - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if shape_contains(shape, center, r, (x as f64 + 0.5, y as f64 + 0.5)) {
                img.put_pixel(x, y, color);
            }
        }
    }
}

/// Renders shape1 in red and shape2 in blue on a gray canvas; the shape drawn
/// last (shape1 when `shape1_on_top`) wins in the overlap region.
pub fn render_scene(spec: &SceneSpec) -> RgbImage {
    let mut img = RgbImage::from_pixel(spec.canvas, spec.canvas, BACKGROUND);
    let first = (spec.shape1, spec.pos1, RED);
    let second = (spec.shape2, spec.pos2, BLUE);
    let order = if spec.shape1_on_top {
        [second, first]
    } else {
        [first, second]
    };
    for (shape, pos, color) in order {
        fill(&mut img, shape, pos, spec.radius, color);
    }
    img
}
