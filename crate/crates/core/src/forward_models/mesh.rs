//! Linear triangle meshes.
//!
//! Text format: a node file with one `id x y` line per node and an element
//! file with one `id n1 n2 n3` line per triangle. Ids are 1-based; blank
//! lines and lines starting with `#` are skipped.

use std::io::{BufRead, Write};

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circle {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Circle {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        dx * dx + dy * dy < self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    /// Counter-clockwise node triples.
    pub elements: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(nodes: Vec<[f64; 2]>, elements: Vec<[usize; 3]>) -> Result<Self> {
        let mut elements = elements;
        for (e, tri) in elements.iter_mut().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&n| n >= nodes.len()) {
                return Err(Error::InvalidArgument(format!(
                    "element {e} references node {bad}, mesh has {} nodes",
                    nodes.len()
                )));
            }
            let area = signed_area(&nodes, tri);
            if area == 0.0 {
                return Err(Error::InvalidArgument(format!("element {e} is degenerate")));
            }
            if area < 0.0 {
                tri.swap(1, 2);
            }
        }
        Ok(Self { nodes, elements })
    }

    /// Structured triangulation of `[0,1]²` with `nx × ny` cells, each split
    /// along its lower-left to upper-right diagonal.
    pub fn unit_square(nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidArgument("mesh needs at least one cell per side".into()));
        }
        let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            for i in 0..=nx {
                nodes.push([i as f64 / nx as f64, j as f64 / ny as f64]);
            }
        }
        let id = |i: usize, j: usize| j * (nx + 1) + i;
        let mut elements = Vec::with_capacity(2 * nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
                elements.push([a, b, c]);
                elements.push([a, c, d]);
            }
        }
        Self::new(nodes, elements)
    }

    /// Removes elements whose centroid lies inside `hole`, then drops nodes no
    /// longer referenced and renumbers the rest in their original order.
    pub fn with_hole(&self, hole: &Circle) -> Result<Self> {
        let kept: Vec<[usize; 3]> = self
            .elements
            .iter()
            .copied()
            .filter(|tri| !hole.contains(centroid(&self.nodes, tri)))
            .collect();
        if kept.is_empty() {
            return Err(Error::InvalidArgument("hole removes every element".into()));
        }
        let mut new_id = vec![usize::MAX; self.nodes.len()];
        for tri in &kept {
            for &n in tri {
                new_id[n] = 0;
            }
        }
        let mut nodes = Vec::new();
        for (old, slot) in new_id.iter_mut().enumerate() {
            if *slot == 0 {
                *slot = nodes.len();
                nodes.push(self.nodes[old]);
            }
        }
        let elements = kept
            .iter()
            .map(|tri| [new_id[tri[0]], new_id[tri[1]], new_id[tri[2]]])
            .collect();
        Self::new(nodes, elements)
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn centroids(&self) -> Vec<[f64; 2]> {
        self.elements.iter().map(|tri| centroid(&self.nodes, tri)).collect()
    }

    pub fn area(&self, element: usize) -> f64 {
        signed_area(&self.nodes, &self.elements[element])
    }

    /// Unit-modulus P1 stiffness `K_ij = (b_i b_j + c_i c_j) / (4A)` of one element.
    pub fn element_stiffness(&self, element: usize) -> Matrix3<f64> {
        let tri = &self.elements[element];
        let p = tri.map(|n| self.nodes[n]);
        let area = self.area(element);
        let b = [p[1][1] - p[2][1], p[2][1] - p[0][1], p[0][1] - p[1][1]];
        let c = [p[2][0] - p[1][0], p[0][0] - p[2][0], p[1][0] - p[0][0]];
        Matrix3::from_fn(|i, j| (b[i] * b[j] + c[i] * c[j]) / (4.0 * area))
    }

    /// Index of the node closest to `p`; ties go to the lowest index.
    pub fn nearest_node(&self, p: [f64; 2]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, q) in self.nodes.iter().enumerate() {
            let dist = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
            if dist < best.1 {
                best = (i, dist);
            }
        }
        best.0
    }

    pub fn write_nodes<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, p) in self.nodes.iter().enumerate() {
            writeln!(w, "{} {:e} {:e}", i + 1, p[0], p[1])?;
        }
        Ok(())
    }

    pub fn write_elements<W: Write>(&self, mut w: W) -> Result<()> {
        for (i, t) in self.elements.iter().enumerate() {
            writeln!(w, "{} {} {} {}", i + 1, t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }

    pub fn read<R1: BufRead, R2: BufRead>(nodes: R1, elements: R2) -> Result<Self> {
        let nodes = read_rows(nodes, 3, "node")?
            .into_iter()
            .map(|row| [row[1], row[2]])
            .collect::<Vec<_>>();
        let mut elements_out = Vec::new();
        for row in read_rows(elements, 4, "element")? {
            let mut tri = [0usize; 3];
            for (slot, v) in tri.iter_mut().zip(&row[1..]) {
                if *v < 1.0 || v.fract() != 0.0 {
                    return Err(Error::Parse(format!("invalid node id {v} in element list")));
                }
                *slot = *v as usize - 1;
            }
            elements_out.push(tri);
        }
        Self::new(nodes, elements_out)
    }
}

fn read_rows<R: BufRead>(reader: R, width: usize, what: &str) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let row = trimmed
            .split_whitespace()
            .map(|tok| tok.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("{what} line {}: {e}", lineno + 1)))?;
        if row.len() != width {
            return Err(Error::Parse(format!(
                "{what} line {}: expected {width} fields, found {}",
                lineno + 1,
                row.len()
            )));
        }
        if row[0] as usize != rows.len() + 1 {
            return Err(Error::Parse(format!("{what} line {}: ids must be consecutive from 1", lineno + 1)));
        }
        rows.push(row);
    }
    Ok(rows)
}

fn centroid(nodes: &[[f64; 2]], tri: &[usize; 3]) -> [f64; 2] {
    let (mut x, mut y) = (0.0, 0.0);
    for &n in tri {
        x += nodes[n][0];
        y += nodes[n][1];
    }
    [x / 3.0, y / 3.0]
}

fn signed_area(nodes: &[[f64; 2]], tri: &[usize; 3]) -> f64 {
    let [a, b, c] = tri.map(|n| nodes[n]);
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}
