//! Finite symmetry groups acting on images and on the group axis of
//! feature maps.
//!
//! Elements of the rotation-mirror group are written `g = (r, m)` and act on
//! the plane as "mirror first (if `m = 1`), then rotate by `r` steps". With
//! that convention the product is
//!
//! ```text
//! (r1, m1) · (r2, m2) = (r1 + (−1)^m1 · r2 mod r_max, m1 xor m2)
//! ```
//!
//! and group-axis index `m · r_max + r`. The composition table is built once
//! from this rule and every permutation in the crate is read from it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{flip_rows, rotate_square, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupKind {
    Trans,
    Rot,
    RotMirror,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct GroupElement {
    pub r: usize,
    pub m: usize,
}

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement { r: 0, m: 0 };

    pub fn rotation(r: usize) -> Self {
        Self { r, m: 0 }
    }

    pub fn new(r: usize, m: usize) -> Self {
        Self { r, m }
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.m == 0 {
            write!(f, "r{}", self.r)
        } else {
            write!(f, "r{}m", self.r)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupSpec {
    kind: GroupKind,
    r_max: usize,
    table: Vec<usize>,
    inverse: Vec<usize>,
}

impl GroupSpec {
    /// Translations only; the group axis has length one.
    pub fn trans() -> Self {
        Self::build(GroupKind::Trans, 1).expect("trivial group is valid")
    }

    pub fn rot(r_max: usize) -> Result<Self> {
        Self::build(GroupKind::Rot, r_max)
    }

    pub fn rot_mirror(r_max: usize) -> Result<Self> {
        Self::build(GroupKind::RotMirror, r_max)
    }

    /// p4 with exact quarter-turn rotations.
    pub fn p4() -> Self {
        Self::rot(4).expect("p4 is valid")
    }

    /// p4m: quarter turns and mirror reflections.
    pub fn p4m() -> Self {
        Self::rot_mirror(4).expect("p4m is valid")
    }

    fn build(kind: GroupKind, r_max: usize) -> Result<Self> {
        if r_max == 0 {
            return Err(Error::InvalidArgument("r_max must be positive".into()));
        }
        let r_max = if kind == GroupKind::Trans { 1 } else { r_max };
        let mirrors = if kind == GroupKind::RotMirror { 2 } else { 1 };
        let n = r_max * mirrors;
        let mut table = vec![0; n * n];
        for a in 0..n {
            for b in 0..n {
                let (ra, ma) = (a % r_max, a / r_max);
                let (rb, mb) = (b % r_max, b / r_max);
                let r = if ma == 0 { (ra + rb) % r_max } else { (ra + r_max - rb) % r_max };
                table[a * n + b] = (ma ^ mb) * r_max + r;
            }
        }
        let mut spec = Self {
            kind,
            r_max,
            table,
            inverse: vec![0; n],
        };
        spec.inverse = spec.validate()?;
        Ok(spec)
    }

    /// Checks closure, identity and inverses of the composition table and
    /// returns the inverse lookup.
    fn validate(&self) -> Result<Vec<usize>> {
        let n = self.group_size();
        let bad = |what: &str| Err(Error::InvalidArgument(format!("composition table: {what}")));
        if self.table.iter().any(|&v| v >= n) {
            return bad("not closed");
        }
        for a in 0..n {
            if self.mul_index(0, a) != a || self.mul_index(a, 0) != a {
                return bad("index 0 is not the identity");
            }
            let mut row: Vec<_> = (0..n).map(|b| self.mul_index(a, b)).collect();
            row.sort_unstable();
            if row != (0..n).collect::<Vec<_>>() {
                return bad("row is not a permutation");
            }
        }
        (0..n)
            .map(|a| {
                (0..n)
                    .find(|&b| self.mul_index(a, b) == 0 && self.mul_index(b, a) == 0)
                    .ok_or_else(|| Error::InvalidArgument("missing inverse".into()))
            })
            .collect()
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn r_max(&self) -> usize {
        self.r_max
    }

    pub fn group_size(&self) -> usize {
        match self.kind {
            GroupKind::Trans => 1,
            GroupKind::Rot => self.r_max,
            GroupKind::RotMirror => 2 * self.r_max,
        }
    }

    pub fn index(&self, g: GroupElement) -> usize {
        g.m * self.r_max + g.r
    }

    pub fn element(&self, index: usize) -> GroupElement {
        GroupElement {
            r: index % self.r_max,
            m: index / self.r_max,
        }
    }

    pub fn elements(&self) -> Vec<GroupElement> {
        (0..self.group_size()).map(|i| self.element(i)).collect()
    }

    pub fn contains(&self, g: GroupElement) -> bool {
        g.r < self.r_max && g.m < if self.kind == GroupKind::RotMirror { 2 } else { 1 }
    }

    pub fn mul_index(&self, a: usize, b: usize) -> usize {
        self.table[a * self.group_size() + b]
    }

    pub fn inverse_index(&self, a: usize) -> usize {
        self.inverse[a]
    }

    pub fn compose(&self, g: GroupElement, h: GroupElement) -> GroupElement {
        self.element(self.mul_index(self.index(g), self.index(h)))
    }

    pub fn inverse(&self, g: GroupElement) -> GroupElement {
        self.element(self.inverse[self.index(g)])
    }

    fn check_element(&self, g: GroupElement) -> Result<()> {
        if self.contains(g) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("element {g} is not in {self}")))
        }
    }

    /// Number of counter-clockwise quarter turns realising `g.r` on the lattice.
    fn quarter_turns(&self, g: GroupElement) -> Result<i64> {
        if g.r == 0 {
            return Ok(0);
        }
        if 4 % self.r_max != 0 {
            return Err(Error::InvalidArgument(format!(
                "rotation by 2π·{}/{} is not a lattice symmetry",
                g.r, self.r_max
            )));
        }
        Ok((g.r * (4 / self.r_max)) as i64)
    }

    /// Applies the lattice action of `g` to every `[n,n]` plane of `data`.
    pub(crate) fn transform_planes(&self, g: GroupElement, data: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
        let turns = self.quarter_turns(g)?;
        if turns != 0 && h != w {
            return Err(Error::InvalidArgument(format!(
                "rotating a non-square {h}x{w} plane"
            )));
        }
        let plane = h * w;
        let mut out = vec![0.0; data.len()];
        let mut scratch = vec![0.0; plane];
        for (src, dst) in data.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
            let src = if g.m == 1 {
                flip_rows(src, h, w, &mut scratch);
                &scratch[..]
            } else {
                src
            };
            if turns == 0 {
                dst.copy_from_slice(src);
            } else {
                rotate_square(src, h, turns, dst);
            }
        }
        Ok(out)
    }
}

impl fmt::Display for GroupSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            GroupKind::Trans => write!(f, "Trans"),
            GroupKind::Rot => write!(f, "Rot({})", self.r_max),
            GroupKind::RotMirror => write!(f, "RotMirror({})", self.r_max),
        }
    }
}

impl FromStr for GroupSpec {
    type Err = Error;

    /// Accepts `z2`, `p4`, `p4m`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z2" | "trans" => Ok(Self::trans()),
            "p4" => Ok(Self::p4()),
            "p4m" => Ok(Self::p4m()),
            other => Err(Error::InvalidArgument(format!(
                "unknown group '{other}' (expected z2, p4 or p4m)"
            ))),
        }
    }
}

/// `out_j = x_{(j + i) mod n}`.
pub fn cyclic_shift(x: &Tensor, i: i64) -> Result<Tensor> {
    if x.ndim() != 1 {
        return shape_err(format!("cyclic_shift expects a vector, got {:?}", x.shape()));
    }
    cyclic_shift_axis(x, i, 0)
}

/// Cyclic shift by `i` positions along one axis of a tensor.
pub fn cyclic_shift_axis(x: &Tensor, i: i64, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let n = shape[axis];
    if n == 0 {
        return Ok(x.clone());
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let s = i.rem_euclid(n as i64) as usize;
    let src = x.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..n {
            let from = (o * n + (j + s) % n) * inner;
            let to = (o * n + j) * inner;
            out[to..to + inner].copy_from_slice(&src[from..from + inner]);
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Lattice action on a `[C,H,W]` image: horizontal flip when `g.m = 1`,
/// then `g.r` counter-clockwise steps.
pub fn act_on_input(g: GroupElement, image: &Tensor, spec: &GroupSpec) -> Result<Tensor> {
    spec.check_element(g)?;
    let s = image.shape();
    if s.len() < 2 {
        return shape_err(format!("image needs at least two axes, got {s:?}"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let data = spec.transform_planes(g, image.data(), h, w)?;
    Tensor::new(s.to_vec(), data)
}

/// Codomain action on a `[B,G,Λ,H,W]` stack: every plane is moved by the
/// lattice action of `g` and group channel `h` is sent to channel `g·h`.
pub fn act_on_group_stack(g: GroupElement, data: &Tensor, spec: &GroupSpec) -> Result<Tensor> {
    spec.check_element(g)?;
    let s = data.shape();
    let [b, gs, lam, h, w] = *s else {
        return shape_err(format!("feature stack must be [B,G,Λ,H,W], got {s:?}"));
    };
    if gs != spec.group_size() {
        return shape_err(format!(
            "group axis has length {gs}, {spec} needs {}",
            spec.group_size()
        ));
    }
    let moved = spec.transform_planes(g, data.data(), h, w)?;
    let block = lam * h * w;
    let gi = spec.index(g);
    let mut out = vec![0.0; moved.len()];
    for bi in 0..b {
        for src in 0..gs {
            let dst = spec.mul_index(gi, src);
            let from = (bi * gs + src) * block;
            let to = (bi * gs + dst) * block;
            out[to..to + block].copy_from_slice(&moved[from..from + block]);
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Binary matrix with `P[g·h][h] = 1`; `P · v` permutes a group-axis vector
/// exactly as [`act_on_group_stack`] does.
pub fn permutation_matrix(g: GroupElement, spec: &GroupSpec) -> Result<Tensor> {
    spec.check_element(g)?;
    let n = spec.group_size();
    let gi = spec.index(g);
    let mut p = Tensor::zeros(&[n, n]);
    for h in 0..n {
        p.set(&[spec.mul_index(gi, h), h], 1.0);
    }
    Ok(p)
}

/// Group-axis permutation of a single length-`G` vector: `out[g·h] = v[h]`.
pub fn permute_vector(g: GroupElement, v: &[f64], spec: &GroupSpec) -> Vec<f64> {
    let gi = spec.index(g);
    let mut out = vec![0.0; v.len()];
    for (h, &x) in v.iter().enumerate() {
        out[spec.mul_index(gi, h)] = x;
    }
    out
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[n, k], &[k2, m]) = (a.shape(), b.shape()) else {
        return shape_err("matmul needs two matrices");
    };
    if k != k2 {
        return shape_err(format!("matmul inner dims {k} vs {k2}"));
    }
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..n {
        for j in 0..m {
            let v = (0..k).map(|t| a.get(&[i, t]) * b.get(&[t, j])).sum();
            out.set(&[i, j], v);
        }
    }
    Ok(out)
}
