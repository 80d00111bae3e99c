//! Anti-aliased polygon fill with the nonzero winding rule.

/// Vertical samples per pixel row; horizontal coverage is computed exactly.
const SUBROWS: usize = 4;

/// Fractional coverage in `[0, 1]` of each pixel of a `width x height`
/// raster by the closed polygon `vertices` (pixel coordinates, y down).
pub fn coverage(vertices: &[[f64; 2]], width: usize, height: usize) -> Vec<f32> {
    let mut cov = vec![0.0f64; width * height];
    let n = vertices.len();
    if n < 3 {
        return vec![0.0; width * height];
    }
    let mut crossings: Vec<(f64, i32)> = Vec::new();
    for row in 0..height {
        for sub in 0..SUBROWS {
            let y = row as f64 + (sub as f64 + 0.5) / SUBROWS as f64;
            crossings.clear();
            for i in 0..n {
                let a = vertices[i];
                let b = vertices[(i + 1) % n];
                if (a[1] <= y) == (b[1] <= y) {
                    continue;
                }
                let t = (y - a[1]) / (b[1] - a[1]);
                let dir = if b[1] > a[1] { 1 } else { -1 };
                crossings.push((a[0] + t * (b[0] - a[0]), dir));
            }
            crossings.sort_by(|p, q| p.0.total_cmp(&q.0));
            let mut winding = 0;
            for w in crossings.windows(2) {
                winding += w[0].1;
                if winding != 0 {
                    add_span(&mut cov[row * width..(row + 1) * width], w[0].0, w[1].0);
                }
            }
        }
    }
    cov.into_iter().map(|c| (c / SUBROWS as f64).min(1.0) as f32).collect()
}

fn add_span(row: &mut [f64], x0: f64, x1: f64) {
    let width = row.len() as f64;
    let (x0, x1) = (x0.clamp(0.0, width), x1.clamp(0.0, width));
    if x1 <= x0 {
        return;
    }
    let first = x0.floor() as usize;
    let last = (x1.ceil() as usize).min(row.len());
    for (px, cell) in row.iter_mut().enumerate().take(last).skip(first) {
        let lo = x0.max(px as f64);
        let hi = x1.min(px as f64 + 1.0);
        if hi > lo {
            *cell += hi - lo;
        }
    }
}

/// Twice the signed area (shoelace), positive for counter-clockwise order in
/// a y-up frame.
pub fn signed_area2(vertices: &[[f64; 2]]) -> f64 {
    let n = vertices.len();
    (0..n)
        .map(|i| {
            let a = vertices[i];
            let b = vertices[(i + 1) % n];
            a[0] * b[1] - b[0] * a[1]
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_square_has_exact_coverage() {
        let sq = [[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0]];
        let c = coverage(&sq, 4, 4);
        let total: f32 = c.iter().sum();
        assert!((total - 4.0).abs() < 1e-6);
        assert_eq!(c[5], 1.0);
        assert_eq!(c[0], 0.0);
    }

    #[test]
    fn half_pixel_edges_are_partially_covered() {
        let sq = [[0.5, 0.0], [2.0, 0.0], [2.0, 2.0], [0.5, 2.0]];
        let c = coverage(&sq, 2, 2);
        assert!((c[0] - 0.5).abs() < 1e-6);
        assert!((c[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn total_coverage_matches_triangle_area() {
        let tri = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]];
        let c = coverage(&tri, 10, 10);
        let total: f32 = c.iter().sum();
        // four scanlines per row approximate the slanted edge
        assert!((total - 50.0).abs() < 0.5, "{total}");
        assert!((signed_area2(&tri) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn winding_direction_does_not_matter() {
        let cw = [[1.0, 1.0], [1.0, 5.0], [6.0, 4.0]];
        let ccw = [[1.0, 1.0], [6.0, 4.0], [1.0, 5.0]];
        assert_eq!(coverage(&cw, 8, 8), coverage(&ccw, 8, 8));
    }
}
