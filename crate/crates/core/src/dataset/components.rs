//! 8-connected component labeling on binary masks.

use crate::image::BinaryMask;

/// Pixel areas of every 8-connected foreground component, in raster order of
/// each component's first pixel.
pub fn component_areas(mask: &BinaryMask) -> Vec<usize> {
    let (rows, cols) = (mask.rows, mask.cols);
    let mut seen = vec![false; rows * cols];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    for start in 0..rows * cols {
        if mask.data[start] == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut area = 0;
        while let Some(p) = stack.pop() {
            area += 1;
            let (y, x) = ((p / cols) as isize, (p % cols) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= rows as isize || nx >= cols as isize {
                        continue;
                    }
                    let q = ny as usize * cols + nx as usize;
                    if mask.data[q] != 0 && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        areas.push(area);
    }
    areas
}

/// Equivalent-circle diameter in mm of a region of `area_px` pixels.
pub fn equivalent_diameter(area_px: usize, spacing: (f64, f64)) -> f64 {
    2.0 * (area_px as f64 * spacing.0 * spacing.1 / std::f64::consts::PI).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(rows: usize, cols: usize, on: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::zeros(rows, cols);
        for &(y, x) in on {
            m.data[y * cols + x] = 1;
        }
        m
    }

    #[test]
    fn diagonal_pixels_join() {
        let m = mask(3, 3, &[(0, 0), (1, 1), (2, 2)]);
        assert_eq!(component_areas(&m), vec![3]);
    }

    #[test]
    fn separate_regions() {
        let m = mask(3, 5, &[(0, 0), (0, 1), (2, 4), (0, 4)]);
        assert_eq!(component_areas(&m), vec![2, 1, 1]);
        assert!(component_areas(&BinaryMask::zeros(4, 4)).is_empty());
    }

    #[test]
    fn one_pixel_diameter() {
        let d = equivalent_diameter(1, (1.0, 1.0));
        assert!((d - 1.128_379_167_095_512_6).abs() < 1e-15);
    }
}
