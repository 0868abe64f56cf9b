//! Exact point-to-mesh distance with a bounding-volume hierarchy.

use super::{Point, TriMesh};

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &Point, a: &Point, b: &Point, c: &Point) -> Point {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Distance by scanning every triangle.
pub fn brute_force_distance(p: &Point, mesh: &TriMesh) -> f64 {
    (0..mesh.triangles.len())
        .map(|t| {
            let [a, b, c] = mesh.corners(t);
            (closest_point_on_triangle(p, &a, &b, &c) - p).norm_squared()
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

#[derive(Debug, Clone)]
struct Node {
    lo: Point,
    hi: Point,
    /// Leaf: `[start, start + count)` into `order`. Inner: `count == 0`,
    /// children at `start` and `start + 1`.
    start: u32,
    count: u32,
}

/// Bounding-volume hierarchy over a mesh's triangles.
#[derive(Debug, Clone)]
pub struct Bvh<'a> {
    mesh: &'a TriMesh,
    nodes: Vec<Node>,
    order: Vec<u32>,
}

const LEAF: usize = 4;

fn box_dist2(p: &Point, lo: &Point, hi: &Point) -> f64 {
    let mut d = 0.0;
    for k in 0..3 {
        let v = if p[k] < lo[k] {
            lo[k] - p[k]
        } else if p[k] > hi[k] {
            p[k] - hi[k]
        } else {
            0.0
        };
        d += v * v;
    }
    d
}

impl<'a> Bvh<'a> {
    pub fn new(mesh: &'a TriMesh) -> Self {
        let n = mesh.triangles.len();
        let centroids: Vec<Point> = (0..n)
            .map(|t| {
                let [a, b, c] = mesh.corners(t);
                (a + b + c) / 3.0
            })
            .collect();
        let mut bvh = Self {
            mesh,
            nodes: Vec::with_capacity(2 * n / LEAF + 1),
            order: (0..n as u32).collect(),
        };
        if n > 0 {
            bvh.nodes.push(Node {
                lo: Point::zeros(),
                hi: Point::zeros(),
                start: 0,
                count: 0,
            });
            bvh.build(0, 0, n, &centroids);
        }
        bvh
    }

    fn build(&mut self, node: usize, start: usize, end: usize, centroids: &[Point]) {
        let mut lo = Point::repeat(f64::INFINITY);
        let mut hi = Point::repeat(f64::NEG_INFINITY);
        let mut clo = lo;
        let mut chi = hi;
        for &t in &self.order[start..end] {
            for v in self.mesh.corners(t as usize) {
                lo = lo.inf(&v);
                hi = hi.sup(&v);
            }
            clo = clo.inf(&centroids[t as usize]);
            chi = chi.sup(&centroids[t as usize]);
        }
        self.nodes[node].lo = lo;
        self.nodes[node].hi = hi;
        if end - start <= LEAF {
            self.nodes[node].start = start as u32;
            self.nodes[node].count = (end - start) as u32;
            return;
        }
        let axis = (chi - clo).imax();
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&x, &y| {
            centroids[x as usize][axis]
                .total_cmp(&centroids[y as usize][axis])
                .then(x.cmp(&y))
        });
        let left = self.nodes.len();
        for _ in 0..2 {
            self.nodes.push(Node {
                lo: Point::zeros(),
                hi: Point::zeros(),
                start: 0,
                count: 0,
            });
        }
        self.nodes[node].start = left as u32;
        self.nodes[node].count = 0;
        self.build(left, start, mid, centroids);
        self.build(left + 1, mid, end, centroids);
    }

    /// Closest surface point and its distance; `None` for an empty mesh.
    pub fn closest(&self, p: &Point) -> Option<(Point, f64)> {
        if self.nodes.is_empty() {
            return None;
        }
        let mut best = (Point::zeros(), f64::INFINITY);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            if box_dist2(p, &node.lo, &node.hi) >= best.1 {
                continue;
            }
            if node.count > 0 {
                let s = node.start as usize;
                for &t in &self.order[s..s + node.count as usize] {
                    let [a, b, c] = self.mesh.corners(t as usize);
                    let q = closest_point_on_triangle(p, &a, &b, &c);
                    let d = (q - p).norm_squared();
                    if d < best.1 {
                        best = (q, d);
                    }
                }
            } else {
                let (l, r) = (node.start as usize, node.start as usize + 1);
                let dl = box_dist2(p, &self.nodes[l].lo, &self.nodes[l].hi);
                let dr = box_dist2(p, &self.nodes[r].lo, &self.nodes[r].hi);
                // Visit the nearer child first.
                if dl < dr {
                    stack.extend([r, l]);
                } else {
                    stack.extend([l, r]);
                }
            }
        }
        Some((best.0, best.1.sqrt()))
    }

    pub fn distance(&self, p: &Point) -> f64 {
        self.closest(p).map_or(f64::INFINITY, |(_, d)| d)
    }
}

/// Exact distance from `p` to the mesh surface.
pub fn point_mesh_distance(p: &Point, mesh: &TriMesh) -> f64 {
    Bvh::new(mesh).distance(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn tri() -> TriMesh {
        TriMesh::new(
            vec![
                Point::new(-1.0, -1.0, 0.0),
                Point::new(2.0, -1.0, 0.0),
                Point::new(-1.0, 2.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap()
    }

    #[test]
    fn simple_cases() {
        let m = tri();
        assert_eq!(point_mesh_distance(&Point::new(0.0, 0.0, 0.0), &m), 0.0);
        assert_eq!(point_mesh_distance(&Point::new(0.0, 0.0, 2.5), &m), 2.5);
        // Vertex region.
        let d = point_mesh_distance(&Point::new(-2.0, -2.0, 0.0), &m);
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        // Edge region below y = -1.
        assert!((point_mesh_distance(&Point::new(0.5, -3.0, 0.0), &m) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bvh_equals_brute_force() {
        let mut rng = seed::rng(8);
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for t in 0..200u32 {
            let base = Point::new(
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            );
            for _ in 0..3 {
                vertices.push(
                    base + Point::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ),
                );
            }
            triangles.push([3 * t, 3 * t + 1, 3 * t + 2]);
        }
        let mesh = TriMesh::new(vertices, triangles).unwrap();
        let bvh = Bvh::new(&mesh);
        for _ in 0..100 {
            let p = Point::new(
                rng.random_range(-8.0..8.0),
                rng.random_range(-8.0..8.0),
                rng.random_range(-8.0..8.0),
            );
            assert!((bvh.distance(&p) - brute_force_distance(&p, &mesh)).abs() <= 1e-9);
        }
    }
}
