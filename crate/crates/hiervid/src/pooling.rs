//! Bounding box to feature-grid cell mapping: a box is represented by the
//! grid column under its center pixel.

use crate::error::{HvError, Result};
use crate::hierarchy::BBox;

/// Map a normalized box to the grid cell containing its center.
///
/// With center pixel (i, j) = (cy*H, cx*W), the cell is
/// (floor(i*H'/H), floor(j*W'/W)), clamped into the grid for centers on the
/// trailing boundary.
pub fn box_to_cell(
    bbox: &BBox,
    h: usize,
    w: usize,
    grid_h: usize,
    grid_w: usize,
) -> Result<(usize, usize)> {
    if !bbox.is_valid() {
        return Err(HvError::Other(format!(
            "box_to_cell: degenerate bbox {:?}",
            bbox
        )));
    }
    let (cx, cy) = bbox.center();
    let i = cy * h as f64;
    let j = cx * w as f64;
    let row = ((i * grid_h as f64 / h as f64).floor() as usize).min(grid_h - 1);
    let col = ((j * grid_w as f64 / w as f64).floor() as usize).min(grid_w - 1);
    Ok((row, col))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bbox_centered(cx: f64, cy: f64) -> BBox {
        BBox {
            x_min: (cx - 0.01).max(0.0),
            y_min: (cy - 0.01).max(0.0),
            x_max: (cx + 0.01).min(1.0),
            y_max: (cy + 0.01).min(1.0),
        }
    }

    #[test]
    fn paper_formula_example() {
        // H=W=224, 7x7 grid, center pixel (i=100, j=200) -> cell (3, 6).
        let b = BBox {
            x_min: 200.0 / 224.0 - 0.01,
            y_min: 100.0 / 224.0 - 0.01,
            x_max: 200.0 / 224.0 + 0.01,
            y_max: 100.0 / 224.0 + 0.01,
        };
        assert_eq!(box_to_cell(&b, 224, 224, 7, 7).unwrap(), (3, 6));
    }

    #[test]
    fn top_left_center() {
        let b = BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 0.02,
            y_max: 0.02,
        };
        assert_eq!(box_to_cell(&b, 64, 64, 8, 8).unwrap(), (0, 0));
    }

    #[test]
    fn boundary_center_clamped() {
        let b = BBox {
            x_min: 0.98,
            y_min: 0.98,
            x_max: 1.0,
            y_max: 1.0,
        };
        // Center at (0.99, 0.99) -> raw cell would be 7 for an 8-wide grid;
        // exact boundary 1.0 clamps to grid_h - 1.
        assert_eq!(box_to_cell(&b, 64, 64, 8, 8).unwrap(), (7, 7));
        let b2 = BBox {
            x_min: 0.96,
            y_min: 0.96,
            x_max: 1.0,
            y_max: 1.0,
        };
        assert_eq!(box_to_cell(&b2, 64, 64, 8, 8).unwrap(), (7, 7));
    }

    #[test]
    fn degenerate_bbox_rejected() {
        let b = BBox {
            x_min: 0.5,
            y_min: 0.5,
            x_max: 0.4,
            y_max: 0.6,
        };
        assert!(box_to_cell(&b, 64, 64, 8, 8).is_err());
    }

    #[test]
    fn monotone_in_center_coordinates() {
        let mut last = 0;
        for i in 0..100 {
            let cx = 0.01 + 0.98 * i as f64 / 99.0;
            let (_, col) = box_to_cell(&bbox_centered(cx, 0.5), 64, 64, 8, 8).unwrap();
            assert!(col >= last);
            last = col;
        }
    }

    #[test]
    fn mirror_symmetry_off_boundary() {
        for i in 0..200 {
            let cx = 0.015 + 0.97 * i as f64 / 199.0;
            // Skip centers falling exactly on a cell boundary.
            if (cx * 8.0).fract() < 1e-9 || ((1.0 - cx) * 8.0).fract() < 1e-9 {
                continue;
            }
            let (_, c) = box_to_cell(&bbox_centered(cx, 0.5), 64, 64, 8, 8).unwrap();
            let (_, m) = box_to_cell(&bbox_centered(1.0 - cx, 0.5), 64, 64, 8, 8).unwrap();
            assert_eq!(m, 7 - c, "cx = {}", cx);
        }
    }
}
