//! Marching-cubes case table built by walking the cube faces.
//!
//! Corner `c` sits at `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`. On every face
//! the sign-change edges are paired into segments; a face with two diagonal
//! inside corners cuts each inside corner off separately, so neighbouring
//! cells always agree on the shared face. Segments are oriented so that the
//! loops they form have normals pointing toward the positive side.

use std::sync::OnceLock;

/// Corner pairs of the 12 cube edges, lower corner first.
pub const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

pub fn corner_offset(c: usize) -> [usize; 3] {
    [c & 1, (c >> 1) & 1, (c >> 2) & 1]
}

fn edge_between(a: usize, b: usize) -> usize {
    let key = (a.min(b), a.max(b));
    EDGES.iter().position(|&e| e == key).expect("adjacent corners")
}

/// Faces as (axis, side, corners in cyclic order).
fn faces() -> Vec<(usize, usize, [usize; 4])> {
    let mut out = Vec::with_capacity(6);
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let corner = |du: usize, dv: usize| (side << axis) | (du << u) | (dv << v);
            out.push((axis, side, [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)]));
        }
    }
    out
}

fn midpoint(e: usize) -> [f64; 3] {
    let (a, b) = EDGES[e];
    let (pa, pb) = (corner_offset(a), corner_offset(b));
    [0, 1, 2].map(|k| 0.5 * (pa[k] + pb[k]) as f64)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Orders segment `{a, b}` on a face with outward normal `n`.
fn orient(a: usize, b: usize, inside: &[bool; 8], n: [f64; 3]) -> (usize, usize) {
    let (c0, c1) = EDGES[a];
    let (neg, pos) = if inside[c0] { (c0, c1) } else { (c1, c0) };
    let (pn, pp) = (corner_offset(neg), corner_offset(pos));
    let d = [0, 1, 2].map(|k| pp[k] as f64 - pn[k] as f64);
    let (ma, mb) = (midpoint(a), midpoint(b));
    let t = [0, 1, 2].map(|k| mb[k] - ma[k]);
    if dot(t, cross(d, n)) > 0.0 {
        (a, b)
    } else {
        (b, a)
    }
}

pub fn build_case(case: usize) -> Vec<Vec<u8>> {
    let inside: [bool; 8] = std::array::from_fn(|c| case >> c & 1 == 1);
    let mut next = [usize::MAX; 12];
    for (axis, side, cs) in faces() {
        let mut n = [0.0; 3];
        n[axis] = if side == 1 { 1.0 } else { -1.0 };
        let crossing: Vec<usize> = (0..4)
            .filter(|&i| inside[cs[i]] != inside[cs[(i + 1) % 4]])
            .map(|i| edge_between(cs[i], cs[(i + 1) % 4]))
            .collect();
        let segments: Vec<(usize, usize)> = match crossing.len() {
            0 => vec![],
            2 => vec![(crossing[0], crossing[1])],
            4 => (0..4)
                .filter(|&i| inside[cs[i]])
                .map(|i| {
                    let prev = cs[(i + 3) % 4];
                    let nxt = cs[(i + 1) % 4];
                    (edge_between(prev, cs[i]), edge_between(cs[i], nxt))
                })
                .collect(),
            _ => unreachable!("a square has an even number of sign changes"),
        };
        for (a, b) in segments {
            let (from, to) = orient(a, b, &inside, n);
            debug_assert_eq!(next[from], usize::MAX);
            next[from] = to;
        }
    }
    let mut loops = Vec::new();
    let mut used = [false; 12];
    for start in 0..12 {
        if next[start] == usize::MAX || used[start] {
            continue;
        }
        let mut lp = Vec::new();
        let mut e = start;
        while !used[e] {
            used[e] = true;
            lp.push(e as u8);
            e = next[e];
        }
        debug_assert_eq!(e, start);
        loops.push(lp);
    }
    loops
}

fn share_face(a: usize, b: usize) -> bool {
    let corners = [EDGES[a].0, EDGES[a].1, EDGES[b].0, EDGES[b].1].map(corner_offset);
    (0..3).any(|k| corners.iter().all(|c| c[k] == corners[0][k]))
}

/// Triangulates loop positions `i..=j` without diagonals between vertices
/// on a common cube face; neighbouring cells could otherwise emit the same
/// diagonal and make the mesh non-manifold.
fn triangulate(lp: &[u8], i: usize, j: usize) -> Option<Vec<[u8; 3]>> {
    if j < i + 2 {
        return Some(vec![]);
    }
    let ok = |a: usize, b: usize| b == a + 1 || !share_face(lp[a] as usize, lp[b] as usize);
    let closing = i == 0 && j == lp.len() - 1;
    if !closing && !ok(i, j) {
        return None;
    }
    (i + 1..j).find_map(|k| {
        if !ok(i, k) || !ok(k, j) {
            return None;
        }
        let mut tris = triangulate(lp, i, k)?;
        tris.extend(triangulate(lp, k, j)?);
        tris.push([lp[i], lp[k], lp[j]]);
        Some(tris)
    })
}

/// Oriented triangles (edge indices) for each of the 256 sign
/// configurations; bit `c` of the case index is set when corner `c` is
/// inside.
pub fn case_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..256)
            .map(|case| {
                build_case(case)
                    .iter()
                    .flat_map(|lp| triangulate(lp, 0, lp.len() - 1).expect("every loop triangulates"))
                    .collect()
            })
            .collect()
    })
}
