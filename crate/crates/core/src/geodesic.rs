//! Shortest-path distance fields on an 8-connected grid, used as the
//! planner's terminal cost.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::SQRT_2;
use std::io::Write;

use crate::env::darkzone::{DarkZoneConfig, Point, Segment};
use crate::error::{Error, Result};

/// Row-major boolean grid; row index is the y cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub nx: usize,
    pub ny: usize,
    pub cells: Vec<bool>,
}

impl Mask {
    pub fn new(nx: usize, ny: usize) -> Self {
        Mask {
            nx,
            ny,
            cells: vec![false; nx * ny],
        }
    }

    pub fn get(&self, ix: usize, iy: usize) -> bool {
        self.cells[iy * self.nx + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: bool) {
        self.cells[iy * self.nx + ix] = v;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }
}

/// Placement of a grid in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub nx: usize,
    pub ny: usize,
    /// Lower-left corner of cell (0, 0).
    pub origin: Point,
    pub cell_size: f64,
}

impl GridGeometry {
    /// `res x res` cells covering `[0, 1]^2`.
    pub fn unit_square(res: usize) -> Self {
        GridGeometry {
            nx: res,
            ny: res,
            origin: [0.0, 0.0],
            cell_size: 1.0 / res as f64,
        }
    }

    pub fn center(&self, ix: usize, iy: usize) -> Point {
        [
            self.origin[0] + (ix as f64 + 0.5) * self.cell_size,
            self.origin[1] + (iy as f64 + 0.5) * self.cell_size,
        ]
    }

    fn cell_box(&self, ix: usize, iy: usize) -> ([f64; 2], [f64; 2]) {
        let x0 = self.origin[0] + ix as f64 * self.cell_size;
        let y0 = self.origin[1] + iy as f64 * self.cell_size;
        ([x0, x0 + self.cell_size], [y0, y0 + self.cell_size])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub geometry: GridGeometry,
    /// Row-major distances in world units; `+inf` for obstacles and
    /// unreachable cells.
    pub values: Vec<f64>,
    pub goal: Mask,
    /// No non-goal cell can reach the goal.
    pub infeasible: bool,
}

/// Path length of `straight` axis moves and `diagonal` moves.
pub fn step_distance(straight: u32, diagonal: u32, cell_size: f64) -> f64 {
    straight as f64 * cell_size + diagonal as f64 * (SQRT_2 * cell_size)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    straight: u32,
    diagonal: u32,
    cell: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

const NEIGHBORS: [(isize, isize, bool); 8] = [
    (1, 0, false),
    (-1, 0, false),
    (0, 1, false),
    (0, -1, false),
    (1, 1, true),
    (1, -1, true),
    (-1, 1, true),
    (-1, -1, true),
];

/// Multi-source Dijkstra from every goal cell. Diagonal moves cost
/// `sqrt(2) * cell_size` and may pass between two blocked orthogonal cells.
pub fn compute_field(obstacles: &Mask, goal: &Mask, geometry: GridGeometry) -> Result<DistanceField> {
    let (nx, ny) = (geometry.nx, geometry.ny);
    if obstacles.nx != nx || obstacles.ny != ny || goal.nx != nx || goal.ny != ny {
        return Err(Error::Shape {
            what: "distance field masks",
            expected: nx * ny,
            actual: obstacles.cells.len().min(goal.cells.len()),
        });
    }
    if goal.count() == 0 {
        return Err(Error::Config("distance field needs at least one goal cell".into()));
    }
    let cs = geometry.cell_size;
    let mut values = vec![f64::INFINITY; nx * ny];
    let mut heap = BinaryHeap::new();
    for (i, is_goal) in goal.cells.iter().enumerate() {
        if *is_goal {
            values[i] = 0.0;
            heap.push(Entry {
                dist: 0.0,
                straight: 0,
                diagonal: 0,
                cell: i,
            });
        }
    }
    while let Some(e) = heap.pop() {
        if e.dist > values[e.cell] {
            continue;
        }
        let (x, y) = ((e.cell % nx) as isize, (e.cell / nx) as isize);
        for (dx, dy, diag) in NEIGHBORS {
            let (qx, qy) = (x + dx, y + dy);
            if qx < 0 || qy < 0 || qx >= nx as isize || qy >= ny as isize {
                continue;
            }
            let q = qy as usize * nx + qx as usize;
            if obstacles.cells[q] && !goal.cells[q] {
                continue;
            }
            let (s, d) = if diag {
                (e.straight, e.diagonal + 1)
            } else {
                (e.straight + 1, e.diagonal)
            };
            let dist = step_distance(s, d, cs);
            if dist < values[q] {
                values[q] = dist;
                heap.push(Entry {
                    dist,
                    straight: s,
                    diagonal: d,
                    cell: q,
                });
            }
        }
    }
    let infeasible = !values
        .iter()
        .zip(&goal.cells)
        .any(|(v, g)| !*g && v.is_finite());
    Ok(DistanceField {
        geometry,
        values,
        goal: goal.clone(),
        infeasible,
    })
}

/// Marks cells whose center has `value(center) > delta` as extra obstacles
/// (goal cells are never blocked) and recomputes the field.
pub fn constrained_field(
    obstacles: &Mask,
    goal: &Mask,
    geometry: GridGeometry,
    value: impl Fn(Point) -> f64,
    delta: f64,
) -> Result<DistanceField> {
    let mut blocked = obstacles.clone();
    for iy in 0..geometry.ny {
        for ix in 0..geometry.nx {
            if !goal.get(ix, iy) && value(geometry.center(ix, iy)) > delta {
                blocked.set(ix, iy, true);
            }
        }
    }
    let field = compute_field(&blocked, goal, geometry)?;
    if field.infeasible {
        log::warn!("constrained distance field: the goal is enclosed by constraint cells");
    }
    Ok(field)
}

impl DistanceField {
    pub fn value(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.geometry.nx + ix]
    }

    /// Bilinear read between cell centers. Infinite corners are replaced by
    /// the largest finite corner plus one cell. Points in a goal cell read 0.
    /// The flag is set when `p` had to be clamped into the domain.
    pub fn query_flagged(&self, p: Point) -> (f64, bool) {
        let g = &self.geometry;
        let cs = g.cell_size;
        let hi = [
            g.origin[0] + g.nx as f64 * cs,
            g.origin[1] + g.ny as f64 * cs,
        ];
        let q = [p[0].clamp(g.origin[0], hi[0]), p[1].clamp(g.origin[1], hi[1])];
        let clamped = q != p;

        let cell = |v: f64, o: f64, n: usize| (((v - o) / cs).floor().max(0.0) as usize).min(n - 1);
        let (cx, cy) = (cell(q[0], g.origin[0], g.nx), cell(q[1], g.origin[1], g.ny));
        if self.goal.get(cx, cy) {
            return (0.0, clamped);
        }

        let axis = |v: f64, o: f64, n: usize| -> (usize, usize, f64) {
            if n == 1 {
                return (0, 0, 0.0);
            }
            let f = (v - o) / cs - 0.5;
            let i0 = (f.floor().max(0.0) as usize).min(n - 2);
            (i0, i0 + 1, (f - i0 as f64).clamp(0.0, 1.0))
        };
        let (x0, x1, tx) = axis(q[0], g.origin[0], g.nx);
        let (y0, y1, ty) = axis(q[1], g.origin[1], g.ny);
        let mut c = [
            self.value(x0, y0),
            self.value(x1, y0),
            self.value(x0, y1),
            self.value(x1, y1),
        ];
        if c.iter().any(|v| v.is_infinite()) {
            let max_finite = c
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .fold(f64::NEG_INFINITY, f64::max);
            if max_finite == f64::NEG_INFINITY {
                return (f64::INFINITY, clamped);
            }
            for v in &mut c {
                if v.is_infinite() {
                    *v = max_finite + cs;
                }
            }
        }
        let bottom = c[0] + tx * (c[1] - c[0]);
        let top = c[2] + tx * (c[3] - c[2]);
        (bottom + ty * (top - bottom), clamped)
    }

    pub fn query(&self, p: Point) -> f64 {
        self.query_flagged(p).0
    }

    /// One row per y cell, comma separated, `inf` for infinite values.
    pub fn write_csv<W: Write>(&self, out: W) -> std::io::Result<()> {
        write_grid_csv(out, &self.values, self.geometry.nx)
    }
}

/// Writes a row-major grid as CSV with `inf` for infinite values.
pub fn write_grid_csv<W: Write>(mut out: W, values: &[f64], nx: usize) -> std::io::Result<()> {
    for row in values.chunks(nx) {
        let line: Vec<String> = row
            .iter()
            .map(|v| {
                if v.is_infinite() {
                    if *v > 0.0 { "inf".into() } else { "-inf".into() }
                } else {
                    format!("{v}")
                }
            })
            .collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Whether the segment passes through the open interior of the box.
fn crosses_open_box(s: &Segment, bx: [f64; 2], by: [f64; 2]) -> bool {
    let d = [s.b[0] - s.a[0], s.b[1] - s.a[1]];
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for (p, q) in [
        (-d[0], s.a[0] - bx[0]),
        (d[0], bx[1] - s.a[0]),
        (-d[1], s.a[1] - by[0]),
        (d[1], by[1] - s.a[1]),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t0 >= t1 {
        return false;
    }
    let tm = 0.5 * (t0 + t1);
    let m = [s.a[0] + tm * d[0], s.a[1] + tm * d[1]];
    m[0] > bx[0] && m[0] < bx[1] && m[1] > by[0] && m[1] < by[1]
}

/// Cells whose open interior is crossed by any wall segment.
pub fn rasterize_walls(walls: &[Segment], geometry: GridGeometry) -> Mask {
    let mut mask = Mask::new(geometry.nx, geometry.ny);
    for iy in 0..geometry.ny {
        for ix in 0..geometry.nx {
            let (bx, by) = geometry.cell_box(ix, iy);
            if walls.iter().any(|w| crosses_open_box(w, bx, by)) {
                mask.set(ix, iy, true);
            }
        }
    }
    mask
}

/// Obstacle and goal masks of the dark-zone task. Goal cells are those whose
/// center lies in the goal rectangle.
pub fn darkzone_masks(config: &DarkZoneConfig, geometry: GridGeometry) -> (Mask, Mask) {
    let obstacles = rasterize_walls(&config.obstacles, geometry);
    let mut goal = Mask::new(geometry.nx, geometry.ny);
    for iy in 0..geometry.ny {
        for ix in 0..geometry.nx {
            if config.goal_region.contains(&geometry.center(ix, iy)) {
                goal.set(ix, iy, true);
            }
        }
    }
    (obstacles, goal)
}
