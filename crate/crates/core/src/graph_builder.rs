//! β-skeleton (β = 1, i.e. Gabriel graph) layout graphs over token centers,
//! neighbor capping, and the geometric node and edge feature vectors.

use std::io::Write;

use crate::doc_model::{BoundingBox, Document, Token};
use crate::error::{Error, Result};

pub const MAX_NEIGHBORS: usize = 8;
pub const EDGE_DIM: usize = 11;
pub const NODE_GEOMETRY_DIM: usize = 6;

const ASPECT_MIN_WIDTH: f64 = 1e-6;
const NORMALIZED_EPS: f64 = 1e-9;

pub type Point = (f64, f64);

/// Undirected Gabriel edges `(i, j)` with `i < j`, sorted.
///
/// `(p, q)` is an edge iff no third point lies strictly inside the disk with
/// diameter `pq`; a point on the circle does not block. Candidates are pruned
/// by a sweep over x before the exact test `(p − r)·(q − r) < 0`.
pub fn beta_skeleton_edges(centers: &[Point]) -> Vec<(usize, usize)> {
    let n = centers.len();
    if n < 2 {
        return Vec::new();
    }
    let mut by_x: Vec<usize> = (0..n).collect();
    by_x.sort_by(|&a, &b| centers[a].0.total_cmp(&centers[b].0).then(a.cmp(&b)));
    let xs: Vec<f64> = by_x.iter().map(|&i| centers[i].0).collect();

    let mut edges = Vec::new();
    for i in 0..n {
        let p = centers[i];
        for j in i + 1..n {
            let q = centers[j];
            let mx = 0.5 * (p.0 + q.0);
            let radius = 0.5 * ((p.0 - q.0).hypot(p.1 - q.1));
            let slack = radius * 1e-9 + 1e-12;
            let lo = xs.partition_point(|&x| x < mx - radius - slack);
            let hi = xs.partition_point(|&x| x <= mx + radius + slack);
            let blocked = by_x[lo..hi].iter().any(|&r| {
                if r == i || r == j {
                    return false;
                }
                let c = centers[r];
                (p.0 - c.0) * (q.0 - c.0) + (p.1 - c.1) * (q.1 - c.1) < 0.0
            });
            if !blocked {
                edges.push((i, j));
            }
        }
    }
    edges
}

fn dist2(a: Point, b: Point) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Symmetrizes `edges`, then keeps for each vertex its `k` nearest neighbors
/// (ties by lower index). The result is directed and sorted by `(from, to)`.
pub fn cap_neighbors(edges: &[(usize, usize)], centers: &[Point], k: usize) -> Vec<(usize, usize)> {
    let n = centers.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(a, b) in edges {
        if a == b {
            continue;
        }
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut out = Vec::new();
    for (v, nbrs) in adj.iter_mut().enumerate() {
        nbrs.sort_unstable();
        nbrs.dedup();
        nbrs.sort_by(|&a, &b| {
            dist2(centers[v], centers[a])
                .total_cmp(&dist2(centers[v], centers[b]))
                .then(a.cmp(&b))
        });
        let mut kept: Vec<usize> = nbrs.iter().take(k).copied().collect();
        kept.sort_unstable();
        out.extend(kept.into_iter().map(|u| (v, u)));
    }
    out
}

/// Geometry of a directed edge `k → l`; deltas are `l − k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeFeature {
    pub d_center: (f64, f64),
    pub d_topleft: (f64, f64),
    pub d_bottomright: (f64, f64),
    pub gap_h: f64,
    pub gap_v: f64,
    pub aspect_k: f64,
    pub aspect_l: f64,
    pub aspect_union: f64,
}

impl EdgeFeature {
    /// Frozen checkpoint order.
    pub fn to_array(&self) -> [f64; EDGE_DIM] {
        [
            self.d_center.0,
            self.d_center.1,
            self.d_topleft.0,
            self.d_topleft.1,
            self.d_bottomright.0,
            self.d_bottomright.1,
            self.gap_h,
            self.gap_v,
            self.aspect_k,
            self.aspect_l,
            self.aspect_union,
        ]
    }
}

fn aspect(b: &BoundingBox) -> f64 {
    b.height() / b.width().max(ASPECT_MIN_WIDTH)
}

pub fn edge_feature(k: &BoundingBox, l: &BoundingBox) -> EdgeFeature {
    let (ck, cl) = (k.center(), l.center());
    EdgeFeature {
        d_center: (cl.0 - ck.0, cl.1 - ck.1),
        d_topleft: (l.x0 - k.x0, l.y0 - k.y0),
        d_bottomright: (l.x1 - k.x1, l.y1 - k.y1),
        gap_h: (k.x0.max(l.x0) - k.x1.min(l.x1)).max(0.0),
        gap_v: (k.y0.max(l.y0) - k.y1.min(l.y1)).max(0.0),
        aspect_k: aspect(k),
        aspect_l: aspect(l),
        aspect_union: aspect(&k.union(l)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeFeature {
    /// Row of the word-embedding table; looked up by the graph encoder.
    pub vocab_id: u32,
    /// `[x0, y0, x1, y1, height, width]` in normalized page units.
    pub geometry: [f64; NODE_GEOMETRY_DIM],
}

pub fn node_feature(token: &Token) -> Result<NodeFeature> {
    let b = &token.bbox;
    if [b.x0, b.y0, b.x1, b.y1]
        .iter()
        .any(|&c| c > 1.0 + NORMALIZED_EPS)
    {
        return Err(Error::invalid(format!(
            "node features need normalized coordinates, got {b:?}"
        )));
    }
    Ok(NodeFeature {
        vocab_id: token.vocab_id,
        geometry: [b.x0, b.y0, b.x1, b.y1, b.height(), b.width()],
    })
}

/// Capped β-skeleton over one document with its feature vectors.
#[derive(Debug, Clone)]
pub struct LayoutGraph {
    pub n: usize,
    /// Directed `(k, l)`: vertex `k` receives a message from `l`.
    pub edges: Vec<(usize, usize)>,
    pub edge_features: Vec<[f64; EDGE_DIM]>,
    pub node_features: Vec<NodeFeature>,
}

impl LayoutGraph {
    pub fn build(doc: &Document, max_neighbors: usize) -> Result<Self> {
        let node_features = doc
            .tokens
            .iter()
            .map(node_feature)
            .collect::<Result<Vec<_>>>()?;
        let centers: Vec<Point> = doc.tokens.iter().map(|t| t.bbox.center()).collect();
        let skeleton = beta_skeleton_edges(&centers);
        let edges = cap_neighbors(&skeleton, &centers, max_neighbors);
        let edge_features = edges
            .iter()
            .map(|&(k, l)| edge_feature(&doc.tokens[k].bbox, &doc.tokens[l].bbox).to_array())
            .collect();
        Ok(Self {
            n: doc.tokens.len(),
            edges,
            edge_features,
            node_features,
        })
    }

    pub fn out_degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|e| e.0 == v).count()
    }

    /// Writes `k l` edge lines, a blank line, then a feature CSV.
    pub fn write_debug<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for &(k, l) in &self.edges {
            writeln!(w, "{k} {l}")?;
        }
        writeln!(w)?;
        writeln!(
            w,
            "k,l,dcx,dcy,dtlx,dtly,dbrx,dbry,gap_h,gap_v,aspect_k,aspect_l,aspect_union"
        )?;
        for (&(k, l), f) in self.edges.iter().zip(&self.edge_features) {
            let vals: Vec<String> = f.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{k},{l},{}", vals.join(","))?;
        }
        Ok(())
    }
}

/// Reference constructions used to cross-check the fast paths.
pub mod oracle {
    use super::Point;

    /// O(n³) lune test: `r` blocks `(p, q)` iff `|p−r|² + |q−r|² < |p−q|²`.
    pub fn brute_force_gabriel(points: &[Point]) -> Vec<(usize, usize)> {
        let d2 = |a: Point, b: Point| (a.0 - b.0) * (a.0 - b.0) + (a.1 - b.1) * (a.1 - b.1);
        let n = points.len();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let pq = d2(points[i], points[j]);
                let blocked = (0..n).any(|r| {
                    r != i && r != j && d2(points[i], points[r]) + d2(points[j], points[r]) < pq
                });
                if !blocked {
                    edges.push((i, j));
                }
            }
        }
        edges
    }

    pub fn connected_components(n: usize, edges: &[(usize, usize)]) -> usize {
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut count = n;
        for &(a, b) in edges {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra] = rb;
                count -= 1;
            }
        }
        count
    }
}
