//! Convex polygon helpers: clipping, area, and oriented-box overlap.

use nalgebra::Vector2;

pub type Point = Vector2<f64>;

/// Signed shoelace area; positive for counter-clockwise vertex order.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a.x * b.y - b.x * a.y;
    }
    acc / 2.0
}

pub fn area(poly: &[Point]) -> f64 {
    signed_area(poly).abs()
}

fn ensure_ccw(poly: &[Point]) -> Vec<Point> {
    let mut v = poly.to_vec();
    if signed_area(&v) < 0.0 {
        v.reverse();
    }
    v
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Sutherland-Hodgman: clips `subject` against the convex polygon `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let clip = ensure_ccw(clip);
    let mut output = subject.to_vec();
    let m = clip.len();
    for i in 0..m {
        if output.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % m]);
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn segment_line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    let d1 = cross(a, b, p);
    let d2 = cross(a, b, q);
    let t = d1 / (d1 - d2);
    p + (q - p) * t
}

/// Convex hull (CCW, no collinear points) by the monotone chain.
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Point>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Corners (CCW) of a rectangle centred at `center`, `length` along the
/// heading `yaw` (radians from +x), `width` across it.
pub fn oriented_rect(center: Point, length: f64, width: f64, yaw: f64) -> [Point; 4] {
    let (s, c) = yaw.sin_cos();
    let ax = Vector2::new(c, s) * (length / 2.0);
    let ay = Vector2::new(-s, c) * (width / 2.0);
    [
        center + ax + ay,
        center - ax + ay,
        center - ax - ay,
        center + ax - ay,
    ]
}

pub fn intersection_area(a: &[Point], b: &[Point]) -> f64 {
    area(&clip_convex(a, b))
}

/// Upright box: bird's-eye rectangle plus a vertical extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UprightBox {
    pub center: Point,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
    pub bottom: f64,
    pub height: f64,
}

impl UprightBox {
    pub fn footprint(&self) -> [Point; 4] {
        oriented_rect(self.center, self.length, self.width, self.yaw)
    }

    pub fn volume(&self) -> f64 {
        self.length * self.width * self.height
    }
}

/// Volume IoU of two upright boxes: footprint overlap times height overlap.
pub fn box_iou_3d(a: &UprightBox, b: &UprightBox) -> f64 {
    let overlap_h = ((a.bottom + a.height).min(b.bottom + b.height) - a.bottom.max(b.bottom)).max(0.0);
    if overlap_h <= 0.0 {
        return 0.0;
    }
    let inter = intersection_area(&a.footprint(), &b.footprint()) * overlap_h;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}
