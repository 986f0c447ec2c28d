//! Boundary of the largest 4-connected component via marching squares.

use std::collections::{HashMap, VecDeque};

use crate::data::{Grid, Point, Polygon};

/// Keeps only the largest 4-connected component; ties go to the component
/// met first in raster order.
pub fn largest_component(region: &Grid<bool>) -> Grid<bool> {
    let (h, w) = (region.h, region.w);
    let mut label = vec![0u32; h * w];
    let mut best = (0usize, 0u32);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !region.data[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if region.data[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if size > best.0 {
            best = (size, next);
        }
    }
    Grid {
        h,
        w,
        data: label.iter().map(|&l| l != 0 && l == best.1).collect(),
    }
}

/// Signed shoelace area; positive for counter-clockwise in `(x, y)`.
pub fn polygon_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        acc += a.x * b.y - b.x * a.y;
    }
    acc / 2.0
}

/// Closed iso-0.5 contour of the largest component of `region`, or `None`
/// when the region is empty. Vertices lie on midpoints between pixel
/// centres; among several loops (holes) the one enclosing the largest area
/// is returned.
pub fn extract_contour(region: &Grid<bool>) -> Option<Polygon> {
    let comp = largest_component(region);
    if !comp.data.iter().any(|&v| v) {
        return None;
    }
    let (h, w) = (comp.h as i64, comp.w as i64);
    // padded lookup so every loop closes inside the grid
    let at =
        |r: i64, c: i64| r >= 0 && c >= 0 && r < h && c < w && comp.get(r as usize, c as usize);

    // vertex keys are doubled coordinates of edge midpoints
    let mut adj: HashMap<(i64, i64), Vec<(i64, i64)>> = HashMap::new();
    let mut link = |a: (i64, i64), b: (i64, i64)| {
        adj.entry(a).or_default().push(b);
        adj.entry(b).or_default().push(a);
    };
    for r in -1..h {
        for c in -1..w {
            let tl = at(r, c);
            let tr = at(r, c + 1);
            let br = at(r + 1, c + 1);
            let bl = at(r + 1, c);
            let top = (2 * r, 2 * c + 1);
            let right = (2 * r + 1, 2 * c + 2);
            let bottom = (2 * r + 2, 2 * c + 1);
            let left = (2 * r + 1, 2 * c);
            match (tl, tr, br, bl) {
                // saddles keep diagonal foreground corners apart
                (true, false, true, false) => {
                    link(top, left);
                    link(right, bottom);
                }
                (false, true, false, true) => {
                    link(top, right);
                    link(left, bottom);
                }
                _ => {
                    let mut cut = Vec::with_capacity(2);
                    if tl != tr {
                        cut.push(top);
                    }
                    if tr != br {
                        cut.push(right);
                    }
                    if bl != br {
                        cut.push(bottom);
                    }
                    if tl != bl {
                        cut.push(left);
                    }
                    if cut.len() == 2 {
                        link(cut[0], cut[1]);
                    }
                }
            }
        }
    }

    let mut keys: Vec<_> = adj.keys().copied().collect();
    keys.sort_unstable();
    let mut used = std::collections::HashSet::new();
    let mut best: Option<(f64, Polygon)> = None;
    for start in keys {
        if used.contains(&start) {
            continue;
        }
        let mut ring = vec![start];
        used.insert(start);
        let mut prev = start;
        let mut cur = adj[&start][0];
        while cur != start {
            used.insert(cur);
            ring.push(cur);
            let nbrs = &adj[&cur];
            let next = if nbrs[0] == prev { nbrs[1] } else { nbrs[0] };
            prev = cur;
            cur = next;
        }
        let poly: Polygon = ring
            .iter()
            .map(|&(r2, c2)| Point::new(c2 as f64 / 2.0, r2 as f64 / 2.0))
            .collect();
        let area = polygon_area(&poly).abs();
        if best.as_ref().is_none_or(|(a, _)| area > *a) {
            best = Some((area, poly));
        }
    }
    best.map(|(_, p)| p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(h: usize, w: usize, cells: &[(usize, usize)]) -> Grid<bool> {
        let mut g = Grid::filled(h, w, false);
        for &(r, c) in cells {
            g.set(r, c, true);
        }
        g
    }

    #[test]
    fn three_by_three_square() {
        let cells: Vec<_> = (2..5).flat_map(|r| (2..5).map(move |c| (r, c))).collect();
        let poly = extract_contour(&blob(7, 7, &cells)).unwrap();
        assert_eq!(poly.len(), 12);
        // 3x3 square with its four corner triangles (1/8 px^2 each) cut off
        assert!((polygon_area(&poly).abs() - 8.5).abs() < 1e-12);
        assert!((polygon_area(&poly).abs() - 9.0).abs() <= 1.0);
    }

    #[test]
    fn empty_region_is_absent() {
        assert!(extract_contour(&Grid::filled(5, 5, false)).is_none());
    }

    #[test]
    fn picks_largest_component() {
        let mut cells: Vec<_> = (1..6).flat_map(|r| (1..11).map(move |c| (r, c))).collect();
        cells.extend([(10, 10), (10, 11), (10, 12)]);
        let g = blob(14, 14, &cells);
        let comp = largest_component(&g);
        assert_eq!(comp.data.iter().filter(|&&v| v).count(), 50);
        let poly = extract_contour(&g).unwrap();
        assert!(poly.iter().all(|p| p.y <= 6.0));
        assert!((polygon_area(&poly).abs() - (50.0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn ring_returns_outer_boundary() {
        let mut cells = Vec::new();
        for r in 1..10 {
            for c in 1..10 {
                if !(3..7).contains(&r) || !(3..7).contains(&c) {
                    cells.push((r, c));
                }
            }
        }
        let poly = extract_contour(&blob(11, 11, &cells)).unwrap();
        assert!((polygon_area(&poly).abs() - (81.0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn diagonal_touch_inside_one_component() {
        // a U-shape whose arms meet a pixel only diagonally
        let cells = [
            (1, 1),
            (2, 1),
            (3, 1),
            (3, 2),
            (3, 3),
            (2, 3),
            (1, 3),
            (2, 2),
        ];
        let mut g = blob(6, 6, &cells);
        g.set(2, 2, false);
        g.set(1, 2, false);
        let poly = extract_contour(&g).unwrap();
        assert!(polygon_area(&poly).abs() > 3.0);
        let single = extract_contour(&blob(3, 3, &[(1, 1)])).unwrap();
        assert_eq!(single.len(), 4);
        assert!((polygon_area(&single).abs() - 0.5).abs() < 1e-12);
    }
}
