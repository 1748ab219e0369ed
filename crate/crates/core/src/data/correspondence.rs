use super::ViewGeometry;

/// Pairs of row-major feature-cell indices that see the same ground location
/// in two views sharing one grid shape.
pub fn correspondence(a: &ViewGeometry, b: &ViewGeometry, grid: (usize, usize)) -> Vec<(usize, usize)> {
    correspondence_grids(a, grid, b, grid)
}

/// Each cell center of view `a` is mapped to source coordinates and then into
/// view `b`; it pairs with the `b` cell containing it. Cells whose center falls
/// outside `b` have no partner.
pub fn correspondence_grids(
    a: &ViewGeometry,
    grid_a: (usize, usize),
    b: &ViewGeometry,
    grid_b: (usize, usize),
) -> Vec<(usize, usize)> {
    let (ha, wa) = grid_a;
    let (hb, wb) = grid_b;
    let mut pairs = Vec::new();
    for r in 0..ha {
        for c in 0..wa {
            let u = (c as f64 + 0.5) / wa as f64;
            let v = (r as f64 + 0.5) / ha as f64;
            let (x, y) = a.to_source(u, v);
            let (ub, vb) = b.from_source(x, y);
            if (0.0..1.0).contains(&ub) && (0.0..1.0).contains(&vb) {
                let cb = (ub * wb as f64).floor() as usize;
                let rb = (vb * hb as f64).floor() as usize;
                pairs.push((r * wa + c, rb.min(hb - 1) * wb + cb.min(wb - 1)));
            }
        }
    }
    pairs
}
