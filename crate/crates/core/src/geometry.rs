//! Planar geometry for map layouts: polylines, polygons, clipping.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.x * s, self.y * s)
    }

    pub fn dot(self, o: Self) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Self) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Axis-aligned rectangle `[x_min, x_max] × [y_min, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Rect {
    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    pub fn contains_with_tolerance(&self, p: Vec2, tol: f64) -> bool {
        p.x >= self.x_min - tol
            && p.x <= self.x_max + tol
            && p.y >= self.y_min - tol
            && p.y <= self.y_max + tol
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline(pub Vec<Vec2>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polygon(pub Vec<Vec2>);

pub fn dist_point_segment(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.sub(a).norm();
    }
    let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
    p.sub(a.add(ab.scale(t))).norm()
}

impl Polyline {
    pub fn distance(&self, p: Vec2) -> f64 {
        match self.0.as_slice() {
            [] => f64::INFINITY,
            [a] => p.sub(*a).norm(),
            pts => pts
                .windows(2)
                .map(|w| dist_point_segment(p, w[0], w[1]))
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn length(&self) -> f64 {
        self.0.windows(2).map(|w| w[1].sub(w[0]).norm()).sum()
    }

    /// Distance to the polyline together with the arc-length position of the
    /// closest point.
    pub fn project(&self, p: Vec2) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        let mut s0 = 0.0;
        for w in self.0.windows(2) {
            let ab = w[1].sub(w[0]);
            let len = ab.norm();
            let t = if len > 0.0 {
                (p.sub(w[0]).dot(ab) / (len * len)).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d = p.sub(w[0].add(ab.scale(t))).norm();
            if d < best.0 {
                best = (d, s0 + t * len);
            }
            s0 += len;
        }
        best
    }

    pub fn bounds(&self) -> Option<Rect> {
        bounds(&self.0)
    }
}

impl Polygon {
    /// Even-odd point-in-polygon test.
    pub fn contains(&self, p: Vec2) -> bool {
        let pts = &self.0;
        let n = pts.len();
        if n < 3 {
            return false;
        }
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (pts[i], pts[j]);
            if (a.y > p.y) != (b.y > p.y) {
                let x = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
                if p.x < x {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    pub fn signed_area(&self) -> f64 {
        let n = self.0.len();
        (0..n)
            .map(|i| self.0[i].cross(self.0[(i + 1) % n]))
            .sum::<f64>()
            * 0.5
    }

    /// No two non-adjacent edges intersect and no edge is degenerate.
    pub fn is_simple(&self) -> bool {
        let pts = &self.0;
        let n = pts.len();
        if n < 3 {
            return false;
        }
        let edge = |i: usize| (pts[i], pts[(i + 1) % n]);
        for i in 0..n {
            let (a, b) = edge(i);
            if a.sub(b).norm() == 0.0 {
                return false;
            }
            for j in i + 1..n {
                let adjacent = j == i + 1 || (i == 0 && j == n - 1);
                if adjacent {
                    continue;
                }
                let (c, d) = edge(j);
                if segments_intersect(a, b, c, d) {
                    return false;
                }
            }
        }
        true
    }

    pub fn bounds(&self) -> Option<Rect> {
        bounds(&self.0)
    }
}

fn bounds(pts: &[Vec2]) -> Option<Rect> {
    let first = pts.first()?;
    let mut r = Rect {
        x_min: first.x,
        x_max: first.x,
        y_min: first.y,
        y_max: first.y,
    };
    for p in pts {
        r.x_min = r.x_min.min(p.x);
        r.x_max = r.x_max.max(p.x);
        r.y_min = r.y_min.min(p.y);
        r.y_max = r.y_max.max(p.y);
    }
    Some(r)
}

fn orient(a: Vec2, b: Vec2, c: Vec2) -> f64 {
    b.sub(a).cross(c.sub(a))
}

fn on_segment(a: Vec2, b: Vec2, p: Vec2) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test (touching counts).
pub fn segments_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Liang–Barsky clip of segment `a→b` to `r`; returns the clipped parameters.
fn clip_segment(a: Vec2, b: Vec2, r: &Rect) -> Option<(f64, f64)> {
    let d = b.sub(a);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [
        (-d.x, a.x - r.x_min),
        (d.x, r.x_max - a.x),
        (-d.y, a.y - r.y_min),
        (d.y, r.y_max - a.y),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let t = q / p;
            if p < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

/// Clips a polyline to a rectangle, returning the inside pieces with at least
/// two distinct vertices each.
pub fn clip_polyline(line: &Polyline, r: &Rect) -> Vec<Polyline> {
    let mut pieces: Vec<Polyline> = Vec::new();
    let mut cur: Vec<Vec2> = Vec::new();
    for w in line.0.windows(2) {
        let (a, b) = (w[0], w[1]);
        match clip_segment(a, b, r) {
            None => {
                if cur.len() >= 2 {
                    pieces.push(Polyline(std::mem::take(&mut cur)));
                }
                cur.clear();
            }
            Some((t0, t1)) => {
                let d = b.sub(a);
                let p0 = a.add(d.scale(t0));
                let p1 = a.add(d.scale(t1));
                if cur.is_empty() || t0 > 0.0 {
                    if cur.len() >= 2 {
                        pieces.push(Polyline(std::mem::take(&mut cur)));
                    }
                    cur = vec![p0];
                }
                if p1 != *cur.last().expect("piece has a start") {
                    cur.push(p1);
                }
                if t1 < 1.0 {
                    if cur.len() >= 2 {
                        pieces.push(Polyline(std::mem::take(&mut cur)));
                    }
                    cur.clear();
                }
            }
        }
    }
    if cur.len() >= 2 {
        pieces.push(Polyline(cur));
    }
    pieces
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect() -> Rect {
        Rect {
            x_min: -1.0,
            x_max: 1.0,
            y_min: -1.0,
            y_max: 1.0,
        }
    }

    #[test]
    fn segment_distance_uses_endpoints_outside_projection() {
        let a = Vec2::new(0.0, 0.0);
        let b = Vec2::new(2.0, 0.0);
        assert_eq!(dist_point_segment(Vec2::new(1.0, 3.0), a, b), 3.0);
        assert_eq!(dist_point_segment(Vec2::new(5.0, 4.0), a, b), 5.0);
    }

    #[test]
    fn clip_keeps_inside_part() {
        let l = Polyline(vec![Vec2::new(-3.0, 0.0), Vec2::new(3.0, 0.0)]);
        let c = clip_polyline(&l, &rect());
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].0, vec![Vec2::new(-1.0, 0.0), Vec2::new(1.0, 0.0)]);
    }

    #[test]
    fn clip_splits_on_exit_and_reentry() {
        let l = Polyline(vec![
            Vec2::new(-0.5, 0.0),
            Vec2::new(-0.5, 3.0),
            Vec2::new(0.5, 3.0),
            Vec2::new(0.5, 0.0),
        ]);
        let c = clip_polyline(&l, &rect());
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|p| p
            .0
            .iter()
            .all(|v| rect().contains_with_tolerance(*v, 1e-12))));
    }

    #[test]
    fn polygon_tests() {
        let sq = Polygon(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(0.0, 1.0),
        ]);
        assert!(sq.contains(Vec2::new(0.5, 0.5)));
        assert!(!sq.contains(Vec2::new(1.5, 0.5)));
        assert!(sq.is_simple());
        assert_eq!(sq.signed_area(), 1.0);
        let bow = Polygon(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(1.0, 0.0),
            Vec2::new(0.0, 1.0),
        ]);
        assert!(!bow.is_simple());
    }

    #[test]
    fn projection_reports_arc_length() {
        let l = Polyline(vec![
            Vec2::new(0.0, 0.0),
            Vec2::new(2.0, 0.0),
            Vec2::new(2.0, 2.0),
        ]);
        let (d, s) = l.project(Vec2::new(3.0, 1.0));
        assert!((d - 1.0).abs() < 1e-12);
        assert!((s - 3.0).abs() < 1e-12);
        assert_eq!(l.length(), 4.0);
    }
}
