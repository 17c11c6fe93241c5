//! Trainable voxel radiance field.
//!
//! Density and color live on a node-aligned lattice spanning an axis-aligned
//! box. Queries trilinearly interpolate the raw (pre-activation) lattices and
//! then apply `softplus` to density and `sigmoid` to color, so the activated
//! field always satisfies `sigma >= 0` and `c` in `[0, 1]^3`. Points outside
//! the box are empty space.
//!
//! Normals come from central differences of the activated density. Every
//! sampling path has a hand-written adjoint ([`VoxelGrid::field_vjp`]) that
//! accumulates into a [`ParamGradient`].

use std::io::{Read, Write};
use std::ops::{AddAssign, Mul};

use thiserror::Error;

use crate::math::{self, Vec3};

/// Raw color is clamped to this symmetric range before the sigmoid.
pub const RAW_COLOR_CLAMP: f64 = 30.0;

/// Default regularizer for [`normal_from_gradient`].
pub const DEFAULT_NORMAL_EPS: f64 = 1e-6;

const MAGIC: &[u8; 4] = b"VXG1";

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("grid dims must be at least 2 along every axis, got {0:?}")]
    BadDims([usize; 3]),
    #[error("bbox min {min:?} must be strictly below max {max:?}")]
    BadBbox { min: Vec3, max: Vec3 },
    #[error("lattice length {got} does not match dims (expected {expected})")]
    LengthMismatch { expected: usize, got: usize },
    #[error("unsupported grid container: magic {0:?} (expected \"VXG1\")")]
    BadMagic(String),
    #[error("grid io: {0}")]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box in world units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn cube(half: f64) -> Self {
        Self { min: [-half; 3], max: [half; 3] }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn center(&self) -> Vec3 {
        math::scale(math::add(self.min, self.max), 0.5)
    }

    pub fn extent(&self) -> Vec3 {
        math::sub(self.max, self.min)
    }
}

/// Trilinear interpolation footprint of one query point.
#[derive(Debug, Clone, Copy)]
struct Stencil {
    idx: [usize; 8],
    w: [f64; 8],
}

/// Linear interpolation footprint along one axis.
#[derive(Debug, Clone, Copy)]
struct Axis {
    cell: usize,
    w: [f64; 2],
}

/// Voxel radiance field: raw density and raw color lattices plus activations.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    bbox: Aabb,
    /// Cached `spacing()`; a pure function of `dims` and `bbox`.
    spacing: Vec3,
    raw_density: Vec<f64>,
    /// Interleaved RGB per node, same node order as `raw_density`.
    raw_color: Vec<f64>,
}

impl VoxelGrid {
    /// Grid filled with constant raw values.
    pub fn filled(dims: [usize; 3], bbox: Aabb, raw_density: f64, raw_color: Vec3) -> Result<Self, FieldError> {
        let n = node_count(dims)?;
        let color = (0..n).flat_map(|_| raw_color).collect();
        Self::from_raw(dims, bbox, vec![raw_density; n], color)
    }

    pub fn from_raw(
        dims: [usize; 3],
        bbox: Aabb,
        raw_density: Vec<f64>,
        raw_color: Vec<f64>,
    ) -> Result<Self, FieldError> {
        let n = node_count(dims)?;
        if (0..3).any(|k| !(bbox.min[k] < bbox.max[k])) {
            return Err(FieldError::BadBbox { min: bbox.min, max: bbox.max });
        }
        if raw_density.len() != n {
            return Err(FieldError::LengthMismatch { expected: n, got: raw_density.len() });
        }
        if raw_color.len() != 3 * n {
            return Err(FieldError::LengthMismatch { expected: 3 * n, got: raw_color.len() });
        }
        let e = bbox.extent();
        let spacing = [0, 1, 2].map(|k| e[k] / (dims[k] - 1) as f64);
        Ok(Self { dims, bbox, spacing, raw_density, raw_color })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn bbox(&self) -> Aabb {
        self.bbox
    }

    pub fn node_count(&self) -> usize {
        self.raw_density.len()
    }

    pub fn raw_density(&self) -> &[f64] {
        &self.raw_density
    }

    pub fn raw_density_mut(&mut self) -> &mut [f64] {
        &mut self.raw_density
    }

    pub fn raw_color(&self) -> &[f64] {
        &self.raw_color
    }

    pub fn raw_color_mut(&mut self) -> &mut [f64] {
        &mut self.raw_color
    }

    /// Linear node index, x fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// World position of lattice node `(i, j, k)`.
    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = self.spacing();
        [
            self.bbox.min[0] + i as f64 * s[0],
            self.bbox.min[1] + j as f64 * s[1],
            self.bbox.min[2] + k as f64 * s[2],
        ]
    }

    /// Node spacing along each axis.
    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }

    /// One voxel edge: the default central-difference step for normals.
    pub fn voxel_edge(&self) -> f64 {
        let s = self.spacing();
        s[0].min(s[1]).min(s[2])
    }

    /// Cell and linear weights along axis `k`; `None` outside the box.
    #[inline]
    fn axis(&self, k: usize, x: f64) -> Option<Axis> {
        if !(x >= self.bbox.min[k] && x <= self.bbox.max[k]) {
            return None;
        }
        // u >= 0 here, so truncation is floor (and avoids a libm call).
        let u = (x - self.bbox.min[k]) / self.spacing[k];
        let cell = (u as usize).min(self.dims[k] - 2);
        let f = (u - cell as f64).clamp(0.0, 1.0);
        Some(Axis { cell, w: [1.0 - f, f] })
    }

    fn axes(&self, p: Vec3) -> [Option<Axis>; 3] {
        [self.axis(0, p[0]), self.axis(1, p[1]), self.axis(2, p[2])]
    }

    fn stencil_from(&self, a: [Option<Axis>; 3]) -> Option<Stencil> {
        let [Some(x), Some(y), Some(z)] = a else { return None };
        let (sy, sz) = (self.dims[0], self.dims[0] * self.dims[1]);
        let base = self.index(x.cell, y.cell, z.cell);
        let mut st = Stencil { idx: [0; 8], w: [0.0; 8] };
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            st.idx[c] = base + dx + dy * sy + dz * sz;
            st.w[c] = x.w[dx] * y.w[dy] * z.w[dz];
        }
        Some(st)
    }

    fn stencil(&self, p: Vec3) -> Option<Stencil> {
        self.stencil_from(self.axes(p))
    }

    /// Stencils of `p + h e_k` and `p - h e_k`, reusing the other two axes of `center`.
    fn shifted_stencils(&self, p: Vec3, h: f64, k: usize, center: [Option<Axis>; 3]) -> [Option<Stencil>; 2] {
        let mut plus = center;
        let mut minus = center;
        plus[k] = self.axis(k, p[k] + h);
        minus[k] = self.axis(k, p[k] - h);
        [self.stencil_from(plus), self.stencil_from(minus)]
    }

    /// Activated density from per-axis footprints, without building a [`Stencil`].
    fn density_at_axes(&self, a: [Option<Axis>; 3]) -> f64 {
        let [Some(x), Some(y), Some(z)] = a else { return 0.0 };
        let (sy, sz) = (self.dims[0], self.dims[0] * self.dims[1]);
        let base = self.index(x.cell, y.cell, z.cell);
        let v = &self.raw_density[base..=base + 1 + sy + sz];
        let mut terms = [0.0; 8];
        for (c, t) in terms.iter_mut().enumerate() {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            *t = x.w[dx] * y.w[dy] * z.w[dz] * v[dx + dy * sy + dz * sz];
        }
        math::softplus(terms.iter().sum())
    }

    fn gradient_from(&self, p: Vec3, h: f64, center: [Option<Axis>; 3]) -> Vec3 {
        let mut g = [0.0; 3];
        for (k, gk) in g.iter_mut().enumerate() {
            let mut plus = center;
            let mut minus = center;
            plus[k] = self.axis(k, p[k] + h);
            minus[k] = self.axis(k, p[k] - h);
            *gk = (self.density_at_axes(plus) - self.density_at_axes(minus)) / (2.0 * h);
        }
        g
    }

    fn interp_density(&self, st: &Stencil) -> f64 {
        st.idx.iter().zip(&st.w).map(|(&i, &w)| w * self.raw_density[i]).sum()
    }

    fn interp_color(&self, st: &Stencil) -> Vec3 {
        let mut out = [0.0; 3];
        for (&i, &w) in st.idx.iter().zip(&st.w) {
            for ch in 0..3 {
                out[ch] += w * self.raw_color[3 * i + ch];
            }
        }
        out
    }

    /// Activated density at `p`; zero outside the box.
    pub fn sample_density(&self, p: Vec3) -> f64 {
        match self.stencil(p) {
            Some(st) => math::softplus(self.interp_density(&st)),
            None => 0.0,
        }
    }

    /// Activated color at `p`; black outside the box.
    pub fn sample_color(&self, p: Vec3) -> Vec3 {
        match self.stencil(p) {
            Some(st) => activate_color(self.interp_color(&st)),
            None => [0.0; 3],
        }
    }

    /// Density and color from one shared stencil.
    pub fn sample(&self, p: Vec3) -> (f64, Vec3) {
        match self.stencil(p) {
            Some(st) => (
                math::softplus(self.interp_density(&st)),
                activate_color(self.interp_color(&st)),
            ),
            None => (0.0, [0.0; 3]),
        }
    }

    /// Central-difference gradient of the activated density with step `h`.
    pub fn density_gradient(&self, p: Vec3, h: f64) -> Vec3 {
        debug_assert!(h > 0.0);
        self.gradient_from(p, h, self.axes(p))
    }

    /// [`Self::sample`] and [`Self::density_gradient`] sharing the per-axis lookups.
    pub fn sample_with_gradient(&self, p: Vec3, h: f64) -> (f64, Vec3, Vec3) {
        debug_assert!(h > 0.0);
        let center = self.axes(p);
        let (sigma, color) = match self.stencil_from(center) {
            Some(st) => (math::softplus(self.interp_density(&st)), activate_color(self.interp_color(&st))),
            None => (0.0, [0.0; 3]),
        };
        (sigma, color, self.gradient_from(p, h, center))
    }

    /// Surface normal `-g / sqrt(|g|^2 + eps^2)` from the density gradient.
    pub fn normal(&self, p: Vec3, h: f64, eps: f64) -> Vec3 {
        normal_from_gradient(self.density_gradient(p, h), eps)
    }

    /// Accumulate the vector-Jacobian product of `(sigma, c, grad sigma)` at `p`
    /// into `acc`. `up.d_grad` is the upstream gradient with respect to the
    /// central-difference density gradient evaluated with step `h`.
    pub fn field_vjp(&self, p: Vec3, h: f64, up: &FieldUpstream, acc: &mut ParamGradient) {
        if up.d_sigma != 0.0 {
            self.density_vjp(p, up.d_sigma, acc);
        }
        if up.d_color != [0.0; 3] {
            if let Some(st) = self.stencil(p) {
                let raw = self.interp_color(&st);
                let mut d_raw = [0.0; 3];
                for ch in 0..3 {
                    d_raw[ch] = up.d_color[ch] * color_activation_grad(raw[ch]);
                }
                for (&i, &w) in st.idx.iter().zip(&st.w) {
                    for ch in 0..3 {
                        acc.d_raw_color[3 * i + ch] += w * d_raw[ch];
                    }
                }
            }
        }
        if up.d_grad != [0.0; 3] {
            let inv = 1.0 / (2.0 * h);
            let center = self.axes(p);
            for k in 0..3 {
                let dg = up.d_grad[k];
                if dg == 0.0 {
                    continue;
                }
                let [plus, minus] = self.shifted_stencils(p, h, k, center);
                self.density_vjp_at(plus, dg * inv, acc);
                self.density_vjp_at(minus, -dg * inv, acc);
            }
        }
    }

    fn density_vjp(&self, p: Vec3, d_sigma: f64, acc: &mut ParamGradient) {
        self.density_vjp_at(self.stencil(p), d_sigma, acc);
    }

    fn density_vjp_at(&self, st: Option<Stencil>, d_sigma: f64, acc: &mut ParamGradient) {
        if let Some(st) = st {
            // softplus'(x) = sigmoid(x)
            let d_raw = d_sigma * math::sigmoid(self.interp_density(&st));
            for (&i, &w) in st.idx.iter().zip(&st.w) {
                acc.d_raw_density[i] += w * d_raw;
            }
        }
    }

    /// Apply `theta <- theta + step` for every raw parameter.
    pub fn apply_update(&mut self, step: &ParamGradient) {
        debug_assert!(step.matches(self));
        for (r, d) in self.raw_density.iter_mut().zip(&step.d_raw_density) {
            *r += d;
        }
        for (r, d) in self.raw_color.iter_mut().zip(&step.d_raw_color) {
            *r += d;
        }
    }

    /// Number of trainable scalars (density plus three color channels per node).
    pub fn param_count(&self) -> usize {
        self.raw_density.len() + self.raw_color.len()
    }

    /// Flat view of parameter `i` in `[density..., color...]` order.
    pub fn param(&self, i: usize) -> f64 {
        let n = self.raw_density.len();
        if i < n {
            self.raw_density[i]
        } else {
            self.raw_color[i - n]
        }
    }

    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let n = self.raw_density.len();
        if i < n {
            &mut self.raw_density[i]
        } else {
            &mut self.raw_color[i - n]
        }
    }

    /// Serialize into the `VXG1` container.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), FieldError> {
        w.write_all(MAGIC)?;
        for d in self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in self.bbox.min.iter().chain(&self.bbox.max) {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.raw_density.iter().chain(&self.raw_color) {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, FieldError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(FieldError::BadMagic(String::from_utf8_lossy(&magic).into_owned()));
        }
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let n = node_count(dims)?;
        let mut bounds = [0.0; 6];
        read_f64s(&mut r, &mut bounds)?;
        let mut density = vec![0.0; n];
        read_f64s(&mut r, &mut density)?;
        let mut color = vec![0.0; 3 * n];
        read_f64s(&mut r, &mut color)?;
        let bbox = Aabb::new([bounds[0], bounds[1], bounds[2]], [bounds[3], bounds[4], bounds[5]]);
        Self::from_raw(dims, bbox, density, color)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), FieldError> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, FieldError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn read_f64s<R: Read>(r: &mut R, out: &mut [f64]) -> std::io::Result<()> {
    let mut buf = vec![0u8; out.len() * 8];
    r.read_exact(&mut buf)?;
    for (v, chunk) in out.iter_mut().zip(buf.chunks_exact(8)) {
        *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    Ok(())
}

fn node_count(dims: [usize; 3]) -> Result<usize, FieldError> {
    if dims.iter().any(|&d| d < 2) {
        return Err(FieldError::BadDims(dims));
    }
    Ok(dims[0] * dims[1] * dims[2])
}

#[inline]
fn activate_color(raw: Vec3) -> Vec3 {
    raw.map(|r| math::sigmoid(r.clamp(-RAW_COLOR_CLAMP, RAW_COLOR_CLAMP)))
}

#[inline]
fn color_activation_grad(raw: f64) -> f64 {
    if raw.abs() > RAW_COLOR_CLAMP {
        0.0
    } else {
        let s = math::sigmoid(raw);
        s * (1.0 - s)
    }
}

/// `n = -g / sqrt(|g|^2 + eps^2)`.
#[inline]
pub fn normal_from_gradient(g: Vec3, eps: f64) -> Vec3 {
    let s = (math::dot(g, g) + eps * eps).sqrt();
    math::scale(g, -1.0 / s)
}

/// Adjoint of [`normal_from_gradient`]: maps `dL/dn` to `dL/dg`.
#[inline]
pub fn normal_vjp(g: Vec3, eps: f64, dn: Vec3) -> Vec3 {
    // dn/dg = -(I/s - g g^T / s^3)
    let s2 = math::dot(g, g) + eps * eps;
    let s = s2.sqrt();
    let gd = math::dot(g, dn);
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = -(dn[k] / s - g[k] * gd / (s2 * s));
    }
    out
}

/// Upstream gradients for one field query.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FieldUpstream {
    pub d_sigma: f64,
    pub d_color: Vec3,
    pub d_grad: Vec3,
}

/// Gradient with respect to every raw lattice value of a [`VoxelGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub d_raw_density: Vec<f64>,
    pub d_raw_color: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros_like(grid: &VoxelGrid) -> Self {
        Self::zeros(grid.node_count())
    }

    pub fn zeros(nodes: usize) -> Self {
        Self { d_raw_density: vec![0.0; nodes], d_raw_color: vec![0.0; 3 * nodes] }
    }

    pub fn matches(&self, grid: &VoxelGrid) -> bool {
        self.d_raw_density.len() == grid.node_count() && self.d_raw_color.len() == 3 * grid.node_count()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.d_raw_density.iter().chain(&self.d_raw_color)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.d_raw_density.iter_mut().chain(self.d_raw_color.iter_mut())
    }

    pub fn len(&self) -> usize {
        self.d_raw_density.len() + self.d_raw_color.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat component `i` in `[density..., color...]` order.
    pub fn get(&self, i: usize) -> f64 {
        let n = self.d_raw_density.len();
        if i < n {
            self.d_raw_density[i]
        } else {
            self.d_raw_color[i - n]
        }
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|&v| v == 0.0)
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &ParamGradient, s: f64) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += s * b;
        }
    }
}

impl AddAssign<&ParamGradient> for ParamGradient {
    fn add_assign(&mut self, rhs: &ParamGradient) {
        for (a, b) in self.iter_mut().zip(rhs.iter()) {
            *a += b;
        }
    }
}

impl Mul<f64> for ParamGradient {
    type Output = ParamGradient;

    fn mul(mut self, s: f64) -> ParamGradient {
        for v in self.iter_mut() {
            *v *= s;
        }
        self
    }
}
