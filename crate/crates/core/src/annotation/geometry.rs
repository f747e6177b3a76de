use super::{AnnotationError, BinaryMask, MaskAnnotation, Rect};

/// Tightest box around the foreground of `mask`, `None` when it is empty.
pub fn mask_to_bbox(mask: &MaskAnnotation) -> Result<Option<Rect>, AnnotationError> {
    Ok(grid_bbox(&mask.to_mask()?))
}

pub fn grid_bbox(mask: &BinaryMask) -> Option<Rect> {
    let mut min_c = u32::MAX;
    let mut min_r = u32::MAX;
    let mut max_c = 0;
    let mut max_r = 0;
    let mut any = false;
    for (c, r) in mask.foreground() {
        any = true;
        min_c = min_c.min(c);
        max_c = max_c.max(c);
        min_r = min_r.min(r);
        max_r = max_r.max(r);
    }
    any.then(|| Rect::new(min_c, min_r, max_c - min_c + 1, max_r - min_r + 1))
}

/// Rasterizes a closed polygon by sampling pixel centers with the even-odd rule.
pub fn polygon_to_mask(
    vertices: &[(f64, f64)],
    width: u32,
    height: u32,
) -> Result<BinaryMask, AnnotationError> {
    if vertices.len() < 3 {
        return Err(AnnotationError::DegeneratePolygon(vertices.len()));
    }
    if width == 0 || height == 0 {
        return Err(AnnotationError::EmptyDimensions { width, height });
    }
    let mut mask = BinaryMask::new(width, height);
    let n = vertices.len();
    // (edge start x, crossing offset from that start) for edges spanning the row
    let mut crossings: Vec<(f64, f64)> = Vec::with_capacity(n);
    for r in 0..height {
        let py = r as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let (xi, yi) = vertices[i];
            let (xj, yj) = vertices[(i + 1) % n];
            if (yi > py) != (yj > py) {
                crossings.push((xi, (xj - xi) * (py - yi) / (yj - yi)));
            }
        }
        if crossings.is_empty() {
            continue;
        }
        for c in 0..width {
            let px = c as f64 + 0.5;
            let inside = crossings
                .iter()
                .filter(|&&(x0, offset)| px - x0 < offset)
                .count()
                % 2
                == 1;
            if inside {
                mask.set(c, r, true);
            }
        }
    }
    Ok(mask)
}
