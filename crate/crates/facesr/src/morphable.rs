//! Morphable face model: mean shape/texture plus PCA-style bases, assembled
//! from a 239-coefficient vector split 80/64/80/9/6 into identity,
//! expression, texture, illumination, and pose blocks.
//!
//! Shading is Lambertian under real spherical harmonics, bands 0..2, with a
//! single monochrome irradiance shared by the RGB channels (nine coefficients
//! cover exactly one scalar field; per-channel lighting would need 27).
//! The Euler convention is intrinsic X-Y-Z: `R = Rx(a) * Ry(b) * Rz(c)`.

use crate::error::{Error, Result};
use crate::tensor::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DIM_IDENTITY: usize = 80;
pub const DIM_EXPRESSION: usize = 64;
pub const DIM_TEXTURE: usize = 80;
pub const DIM_ILLUMINATION: usize = 9;
pub const DIM_POSE: usize = 6;
pub const COEFF_DIM: usize =
    DIM_IDENTITY + DIM_EXPRESSION + DIM_TEXTURE + DIM_ILLUMINATION + DIM_POSE;

/// Depth (along -z, in model units) at which the canonical face sits in
/// front of the camera.
pub const CANONICAL_DEPTH: f64 = 18.0;
/// Band-0 illumination of the canonical face.
pub const CANONICAL_GAMMA0: f64 = 2.2;

/// The coefficient vector `(alpha, beta, delta, gamma, rho)`.
///
/// `rho` is three intrinsic X-Y-Z Euler angles in radians followed by a
/// translation in model units.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceCoefficients<T: Real = f32> {
    pub alpha: Vec<T>,
    pub beta: Vec<T>,
    pub delta: Vec<T>,
    pub gamma: Vec<T>,
    pub rho: Vec<T>,
}

impl<T: Real> FaceCoefficients<T> {
    pub fn zeros() -> Self {
        FaceCoefficients {
            alpha: vec![T::zero(); DIM_IDENTITY],
            beta: vec![T::zero(); DIM_EXPRESSION],
            delta: vec![T::zero(); DIM_TEXTURE],
            gamma: vec![T::zero(); DIM_ILLUMINATION],
            rho: vec![T::zero(); DIM_POSE],
        }
    }

    /// Neutral face, lit by the band-0 term, centered at the canonical depth.
    pub fn canonical() -> Self {
        let mut c = Self::zeros();
        c.gamma[0] = T::from_f64(CANONICAL_GAMMA0);
        c.rho[5] = T::from_f64(-CANONICAL_DEPTH);
        c
    }

    pub fn from_flat(flat: &[T]) -> Result<Self> {
        if flat.len() != COEFF_DIM {
            return Err(Error::dim(
                "coefficients.from_flat",
                format!("need {COEFF_DIM} values, got {}", flat.len()),
            ));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("face coefficients".into()));
        }
        let mut off = 0;
        let mut take = |n: usize| {
            let s = flat[off..off + n].to_vec();
            off += n;
            s
        };
        Ok(FaceCoefficients {
            alpha: take(DIM_IDENTITY),
            beta: take(DIM_EXPRESSION),
            delta: take(DIM_TEXTURE),
            gamma: take(DIM_ILLUMINATION),
            rho: take(DIM_POSE),
        })
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(COEFF_DIM);
        out.extend_from_slice(&self.alpha);
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.delta);
        out.extend_from_slice(&self.gamma);
        out.extend_from_slice(&self.rho);
        out
    }

    pub fn cast<U: Real>(&self) -> FaceCoefficients<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        FaceCoefficients {
            alpha: c(&self.alpha),
            beta: c(&self.beta),
            delta: c(&self.delta),
            gamma: c(&self.gamma),
            rho: c(&self.rho),
        }
    }
}

/// Mean shape/texture and basis matrices, plus triangle topology.
///
/// Vertex data is xyz-interleaved (`3V` floats); basis matrices are row-major
/// `[3V x cols]`.
#[derive(Clone, Debug)]
pub struct FaceBasis<T: Real = f32> {
    pub mean_shape: Vec<T>,
    pub mean_texture: Vec<T>,
    pub b_id: Vec<T>,
    pub b_exp: Vec<T>,
    pub b_t: Vec<T>,
    pub triangles: Vec<[u32; 3]>,
}

impl<T: Real> FaceBasis<T> {
    pub fn vertex_count(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn validate(&self) -> Result<()> {
        let n3 = self.mean_shape.len();
        if n3 == 0 || n3 % 3 != 0 {
            return Err(Error::dim("basis.validate", "mean shape length must be a positive multiple of 3"));
        }
        if self.mean_texture.len() != n3 {
            return Err(Error::dim("basis.validate", "mean texture length differs from mean shape"));
        }
        for (name, m, cols) in [
            ("b_id", &self.b_id, DIM_IDENTITY),
            ("b_exp", &self.b_exp, DIM_EXPRESSION),
            ("b_t", &self.b_t, DIM_TEXTURE),
        ] {
            if m.len() != n3 * cols {
                return Err(Error::dim(
                    "basis.validate",
                    format!("{name} must be {n3}x{cols}, got {} values", m.len()),
                ));
            }
        }
        let v = (n3 / 3) as u32;
        if self.triangles.iter().any(|t| t.iter().any(|&i| i >= v)) {
            return Err(Error::dim("basis.validate", "triangle index out of range"));
        }
        Ok(())
    }

    /// Mean distance of vertices from their centroid.
    pub fn mean_radius(&self) -> T {
        let v = self.vertex_count();
        let mut centroid = [T::zero(); 3];
        for i in 0..v {
            for k in 0..3 {
                centroid[k] += self.mean_shape[3 * i + k];
            }
        }
        let inv = T::one() / T::from_usize(v);
        centroid.iter_mut().for_each(|c| *c *= inv);
        let mut acc = T::zero();
        for i in 0..v {
            let mut d2 = T::zero();
            for k in 0..3 {
                let d = self.mean_shape[3 * i + k] - centroid[k];
                d2 += d * d;
            }
            acc += d2.sqrt();
        }
        acc * inv
    }

    pub fn cast<U: Real>(&self) -> FaceBasis<U> {
        let c = |v: &[T]| v.iter().map(|x| U::from_f64(x.to_f64())).collect();
        FaceBasis {
            mean_shape: c(&self.mean_shape),
            mean_texture: c(&self.mean_texture),
            b_id: c(&self.b_id),
            b_exp: c(&self.b_exp),
            b_t: c(&self.b_t),
            triangles: self.triangles.clone(),
        }
    }
}

/// `S = mean + B_id a + B_exp b` (Eq. of the shape model).
pub fn assemble_shape<T: Real>(basis: &FaceBasis<T>, alpha: &[T], beta: &[T]) -> Result<Vec<T>> {
    if alpha.len() != DIM_IDENTITY || beta.len() != DIM_EXPRESSION {
        return Err(Error::dim(
            "assemble_shape",
            format!("alpha/beta must be {DIM_IDENTITY}/{DIM_EXPRESSION}, got {}/{}", alpha.len(), beta.len()),
        ));
    }
    let n3 = basis.mean_shape.len();
    let mut out = basis.mean_shape.clone();
    for i in 0..n3 {
        let mut acc = T::zero();
        let row = &basis.b_id[i * DIM_IDENTITY..(i + 1) * DIM_IDENTITY];
        for (w, &a) in row.iter().zip(alpha) {
            acc += *w * a;
        }
        let row = &basis.b_exp[i * DIM_EXPRESSION..(i + 1) * DIM_EXPRESSION];
        for (w, &b) in row.iter().zip(beta) {
            acc += *w * b;
        }
        out[i] += acc;
    }
    Ok(out)
}

/// Texture assembly output: `clamped` is the usable albedo in `[0,1]`, `raw`
/// the pre-clamp combination (needed to mask saturated entries out of the
/// gradient).
pub struct TextureOut<T: Real> {
    pub clamped: Vec<T>,
    pub raw: Vec<T>,
}

/// `Tex = mean + B_t d`, clamped to `[0,1]`.
pub fn assemble_texture<T: Real>(basis: &FaceBasis<T>, delta: &[T]) -> Result<TextureOut<T>> {
    if delta.len() != DIM_TEXTURE {
        return Err(Error::dim(
            "assemble_texture",
            format!("delta must be {DIM_TEXTURE}, got {}", delta.len()),
        ));
    }
    let n3 = basis.mean_texture.len();
    let mut raw = basis.mean_texture.clone();
    for i in 0..n3 {
        let row = &basis.b_t[i * DIM_TEXTURE..(i + 1) * DIM_TEXTURE];
        let mut acc = T::zero();
        for (w, &d) in row.iter().zip(delta) {
            acc += *w * d;
        }
        raw[i] += acc;
    }
    let clamped = raw.iter().map(|&v| v.max(T::zero()).min(T::one())).collect();
    Ok(TextureOut { clamped, raw })
}

/// Intrinsic X-Y-Z Euler rotation: `R = Rx(a) * Ry(b) * Rz(c)`.
pub fn rotation_xyz<T: Real>(angles: &[T]) -> [[T; 3]; 3] {
    let (sa, ca) = (angles[0].sin(), angles[0].cos());
    let (sb, cb) = (angles[1].sin(), angles[1].cos());
    let (sc, cc) = (angles[2].sin(), angles[2].cos());
    // Written out from Rx*Ry*Rz.
    [
        [cb * cc, -cb * sc, sb],
        [ca * sc + sa * sb * cc, ca * cc - sa * sb * sc, -sa * cb],
        [sa * sc - ca * sb * cc, sa * cc + ca * sb * sc, ca * cb],
    ]
}

/// Partial derivatives of `rotation_xyz` with respect to each angle.
pub fn rotation_xyz_derivs<T: Real>(angles: &[T]) -> [[[T; 3]; 3]; 3] {
    let (sa, ca) = (angles[0].sin(), angles[0].cos());
    let (sb, cb) = (angles[1].sin(), angles[1].cos());
    let (sc, cc) = (angles[2].sin(), angles[2].cos());
    let z = T::zero();
    let d_a = [
        [z, z, z],
        [-sa * sc + ca * sb * cc, -sa * cc - ca * sb * sc, -ca * cb],
        [ca * sc + sa * sb * cc, ca * cc - sa * sb * sc, -sa * cb],
    ];
    let d_b = [
        [-sb * cc, sb * sc, cb],
        [sa * cb * cc, -sa * cb * sc, sa * sb],
        [-ca * cb * cc, ca * cb * sc, -ca * sb],
    ];
    let d_c = [
        [-cb * sc, -cb * cc, z],
        [ca * cc - sa * sb * sc, -ca * sc - sa * sb * cc, z],
        [sa * cc + ca * sb * sc, -sa * sc + ca * sb * cc, z],
    ];
    [d_a, d_b, d_c]
}

#[inline]
fn mat_vec<T: Real>(m: &[[T; 3]; 3], v: [T; 3]) -> [T; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[inline]
fn mat_tvec<T: Real>(m: &[[T; 3]; 3], v: [T; 3]) -> [T; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

#[inline]
fn cross<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Rigid pose: `v' = R(rho[0..3]) v + rho[3..6]`.
pub fn pose_transform<T: Real>(vertices: &[T], rho: &[T]) -> Result<Vec<T>> {
    if rho.len() != DIM_POSE {
        return Err(Error::dim("pose_transform", format!("rho must be {DIM_POSE}, got {}", rho.len())));
    }
    if rho.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pose coefficients".into()));
    }
    let r = rotation_xyz(&rho[0..3]);
    let t = [rho[3], rho[4], rho[5]];
    let mut out = vec![T::zero(); vertices.len()];
    for i in 0..vertices.len() / 3 {
        let v = [vertices[3 * i], vertices[3 * i + 1], vertices[3 * i + 2]];
        let w = mat_vec(&r, v);
        out[3 * i] = w[0] + t[0];
        out[3 * i + 1] = w[1] + t[1];
        out[3 * i + 2] = w[2] + t[2];
    }
    Ok(out)
}

/// Per-vertex outward unit normals as area-weighted averages of adjacent face
/// normals. Returns `(unit_normals, raw_sums)`; the raw (pre-normalization)
/// sums are needed by the backward pass.
pub fn vertex_normals<T: Real>(positions: &[T], triangles: &[[u32; 3]]) -> (Vec<T>, Vec<T>) {
    let n3 = positions.len();
    let mut raw = vec![T::zero(); n3];
    let half = T::from_f64(0.5);
    for tri in triangles {
        let p = |i: usize| {
            let j = tri[i] as usize * 3;
            [positions[j], positions[j + 1], positions[j + 2]]
        };
        let (p0, p1, p2) = (p(0), p(1), p(2));
        let e1 = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
        let e2 = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
        let fnorm = cross(e1, e2);
        for &vi in tri {
            let j = vi as usize * 3;
            for k in 0..3 {
                raw[j + k] += half * fnorm[k];
            }
        }
    }
    let mut unit = vec![T::zero(); n3];
    let tiny = T::from_f64(1e-20);
    for i in 0..n3 / 3 {
        let m = [raw[3 * i], raw[3 * i + 1], raw[3 * i + 2]];
        let len = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
        if len > tiny {
            for k in 0..3 {
                unit[3 * i + k] = m[k] / len;
            }
        } else {
            unit[3 * i + 2] = T::one();
        }
    }
    (unit, raw)
}

// Real orthonormal SH constants, bands 0..2.
const SH_C0: f64 = 0.28209479177387814;
const SH_C1: f64 = 0.4886025119029199;
const SH_C2: f64 = 1.0925484305920792;
const SH_C3: f64 = 0.31539156525252005;
const SH_C4: f64 = 0.5462742152960396;

/// The nine real SH basis values at a unit direction, ordered
/// `[Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22]`.
pub fn sh_basis<T: Real>(n: [T; 3]) -> [T; 9] {
    let (x, y, z) = (n[0], n[1], n[2]);
    let c0 = T::from_f64(SH_C0);
    let c1 = T::from_f64(SH_C1);
    let c2 = T::from_f64(SH_C2);
    let c3 = T::from_f64(SH_C3);
    let c4 = T::from_f64(SH_C4);
    let three = T::from_f64(3.0);
    [
        c0,
        c1 * y,
        c1 * z,
        c1 * x,
        c2 * x * y,
        c2 * y * z,
        c3 * (three * z * z - T::one()),
        c2 * x * z,
        c4 * (x * x - y * y),
    ]
}

/// Jacobian of `sh_basis` with respect to the direction.
pub fn sh_basis_jacobian<T: Real>(n: [T; 3]) -> [[T; 3]; 9] {
    let (x, y, z) = (n[0], n[1], n[2]);
    let zero = T::zero();
    let c1 = T::from_f64(SH_C1);
    let c2 = T::from_f64(SH_C2);
    let c3 = T::from_f64(SH_C3);
    let c4 = T::from_f64(SH_C4);
    let six = T::from_f64(6.0);
    let two = T::from_f64(2.0);
    [
        [zero, zero, zero],
        [zero, c1, zero],
        [zero, zero, c1],
        [c1, zero, zero],
        [c2 * y, c2 * x, zero],
        [zero, c2 * z, c2 * y],
        [zero, zero, six * c3 * z],
        [c2 * z, zero, c2 * x],
        [two * c4 * x, -two * c4 * y, zero],
    ]
}

/// Monochrome irradiance `sum_b gamma_b Y_b(n)`. Normals off unit length by
/// more than 1e-3 are renormalized and counted in `renorm_warnings`.
pub fn sh_irradiance<T: Real>(normal: [T; 3], gamma: &[T], renorm_warnings: &mut usize) -> T {
    debug_assert_eq!(gamma.len(), DIM_ILLUMINATION);
    let len2 = normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2];
    let tol = T::from_f64(1e-3);
    let mut n = normal;
    if (len2.sqrt() - T::one()).abs() > tol {
        *renorm_warnings += 1;
        let len = len2.sqrt().max(T::from_f64(1e-20));
        n = [normal[0] / len, normal[1] / len, normal[2] / len];
    }
    let basis = sh_basis(n);
    let mut acc = T::zero();
    for (b, &g) in basis.iter().zip(gamma) {
        acc += *b * g;
    }
    acc
}

/// World-space mesh with per-vertex shaded colors and unit normals.
#[derive(Clone, Debug)]
pub struct PosedMesh<T: Real = f32> {
    pub positions: Vec<T>,
    pub colors: Vec<T>,
    pub normals: Vec<T>,
}

/// Intermediates of `shade_mesh` kept for the backward pass.
pub struct ShadeCache<T: Real> {
    pub model_shape: Vec<T>,
    pub rotation: [[T; 3]; 3],
    pub raw_normal_sums: Vec<T>,
    pub irradiance: Vec<T>,
    pub texture_raw: Vec<T>,
    pub texture: Vec<T>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ShadeStats {
    pub renormalized_normals: usize,
}

/// Full vertex pipeline: assemble shape, pose, normals, texture, SH shading.
/// Colors are `albedo * max(irradiance, 0)`, already in `[0,1]`.
pub fn shade_mesh<T: Real>(
    basis: &FaceBasis<T>,
    coeffs: &FaceCoefficients<T>,
) -> Result<(PosedMesh<T>, ShadeCache<T>, ShadeStats)> {
    basis.validate()?;
    let model = assemble_shape(basis, &coeffs.alpha, &coeffs.beta)?;
    let world = pose_transform(&model, &coeffs.rho)?;
    let (normals, raw_sums) = vertex_normals(&world, &basis.triangles);
    let tex = assemble_texture(basis, &coeffs.delta)?;
    let v = basis.vertex_count();
    let mut stats = ShadeStats::default();
    let mut irradiance = vec![T::zero(); v];
    let mut colors = vec![T::zero(); 3 * v];
    for i in 0..v {
        let n = [normals[3 * i], normals[3 * i + 1], normals[3 * i + 2]];
        let irr = sh_irradiance(n, &coeffs.gamma, &mut stats.renormalized_normals);
        irradiance[i] = irr;
        let lit = irr.max(T::zero());
        for k in 0..3 {
            colors[3 * i + k] = tex.clamped[3 * i + k] * lit;
        }
    }
    let mesh = PosedMesh { positions: world, colors, normals };
    let cache = ShadeCache {
        model_shape: model,
        rotation: rotation_xyz(&coeffs.rho[0..3]),
        raw_normal_sums: raw_sums,
        irradiance,
        texture_raw: tex.raw,
        texture: tex.clamped,
    };
    Ok((mesh, cache, stats))
}

/// Backward of `shade_mesh` with respect to the coefficient vector, given
/// upstream gradients on the per-vertex colors.
///
/// Differentiability contract: gradients flow through texture (delta),
/// irradiance (gamma), and the normal field (alpha, beta, rotation angles).
/// Translation never influences vertex colors, so its gradient is zero;
/// geometric visibility is the rasterizer's concern and is held fixed.
pub fn shade_backward<T: Real>(
    basis: &FaceBasis<T>,
    coeffs: &FaceCoefficients<T>,
    cache: &ShadeCache<T>,
    mesh: &PosedMesh<T>,
    d_colors: &[T],
) -> Vec<T> {
    let v = basis.vertex_count();
    debug_assert_eq!(d_colors.len(), 3 * v);
    let zero = T::zero();
    let one = T::one();

    // Through the per-vertex shade: c = tex * relu(irr).
    let mut d_irr = vec![zero; v];
    let mut d_tex_raw = vec![zero; 3 * v];
    for i in 0..v {
        let irr = cache.irradiance[i];
        let lit = irr.max(zero);
        for k in 0..3 {
            let g = d_colors[3 * i + k];
            if g == zero {
                continue;
            }
            let raw = cache.texture_raw[3 * i + k];
            if raw > zero && raw < one {
                d_tex_raw[3 * i + k] += g * lit;
            }
            if irr > zero {
                d_irr[i] += g * cache.texture[3 * i + k];
            }
        }
    }

    // gamma and normals.
    let mut d_gamma = vec![zero; DIM_ILLUMINATION];
    let mut d_normals = vec![zero; 3 * v];
    for i in 0..v {
        if d_irr[i] == zero {
            continue;
        }
        let n = [mesh.normals[3 * i], mesh.normals[3 * i + 1], mesh.normals[3 * i + 2]];
        let basis_vals = sh_basis(n);
        for b in 0..DIM_ILLUMINATION {
            d_gamma[b] += d_irr[i] * basis_vals[b];
        }
        let jac = sh_basis_jacobian(n);
        for b in 0..DIM_ILLUMINATION {
            let gb = coeffs.gamma[b] * d_irr[i];
            for k in 0..3 {
                d_normals[3 * i + k] += gb * jac[b][k];
            }
        }
    }

    // Through normalization: dm = (I - n n^T)/|m| dn.
    let mut d_raw = vec![zero; 3 * v];
    let tiny = T::from_f64(1e-20);
    for i in 0..v {
        let m = [
            cache.raw_normal_sums[3 * i],
            cache.raw_normal_sums[3 * i + 1],
            cache.raw_normal_sums[3 * i + 2],
        ];
        let len = (m[0] * m[0] + m[1] * m[1] + m[2] * m[2]).sqrt();
        if len <= tiny {
            continue; // degenerate fallback normal: no gradient
        }
        let n = [mesh.normals[3 * i], mesh.normals[3 * i + 1], mesh.normals[3 * i + 2]];
        let dn = [d_normals[3 * i], d_normals[3 * i + 1], d_normals[3 * i + 2]];
        let dot = n[0] * dn[0] + n[1] * dn[1] + n[2] * dn[2];
        for k in 0..3 {
            d_raw[3 * i + k] = (dn[k] - n[k] * dot) / len;
        }
    }

    // Through the face-normal accumulation to world positions.
    let mut d_world = vec![zero; 3 * v];
    let half = T::from_f64(0.5);
    for tri in &basis.triangles {
        let idx = [tri[0] as usize, tri[1] as usize, tri[2] as usize];
        let mut u = [zero; 3];
        for &vi in &idx {
            for k in 0..3 {
                u[k] += d_raw[3 * vi + k];
            }
        }
        if u == [zero; 3] {
            continue;
        }
        let p = |i: usize| {
            let j = idx[i] * 3;
            [mesh.positions[j], mesh.positions[j + 1], mesh.positions[j + 2]]
        };
        let (p0, p1, p2) = (p(0), p(1), p(2));
        let e1 = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
        let e2 = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
        let de1 = cross(e2, u);
        let de2 = cross(u, e1);
        for k in 0..3 {
            let g1 = half * de1[k];
            let g2 = half * de2[k];
            d_world[3 * idx[1] + k] += g1;
            d_world[3 * idx[2] + k] += g2;
            d_world[3 * idx[0] + k] -= g1 + g2;
        }
    }

    // Pose: world = R * model + t.
    let derivs = rotation_xyz_derivs(&coeffs.rho[0..3]);
    let mut d_angles = [zero; 3];
    let mut d_model = vec![zero; 3 * v];
    for i in 0..v {
        let dw = [d_world[3 * i], d_world[3 * i + 1], d_world[3 * i + 2]];
        if dw == [zero; 3] {
            continue;
        }
        let s = [cache.model_shape[3 * i], cache.model_shape[3 * i + 1], cache.model_shape[3 * i + 2]];
        let ds = mat_tvec(&cache.rotation, dw);
        for k in 0..3 {
            d_model[3 * i + k] = ds[k];
        }
        for (a, da) in derivs.iter().enumerate() {
            let rv = mat_vec(da, s);
            d_angles[a] += dw[0] * rv[0] + dw[1] * rv[1] + dw[2] * rv[2];
        }
    }

    // Project linear maps back onto the coefficient blocks.
    let mut flat = vec![zero; COEFF_DIM];
    let (a_off, b_off, d_off, g_off, r_off) = (
        0,
        DIM_IDENTITY,
        DIM_IDENTITY + DIM_EXPRESSION,
        DIM_IDENTITY + DIM_EXPRESSION + DIM_TEXTURE,
        DIM_IDENTITY + DIM_EXPRESSION + DIM_TEXTURE + DIM_ILLUMINATION,
    );
    for i in 0..3 * v {
        let g = d_model[i];
        if g != zero {
            let row = &basis.b_id[i * DIM_IDENTITY..(i + 1) * DIM_IDENTITY];
            for (j, w) in row.iter().enumerate() {
                flat[a_off + j] += *w * g;
            }
            let row = &basis.b_exp[i * DIM_EXPRESSION..(i + 1) * DIM_EXPRESSION];
            for (j, w) in row.iter().enumerate() {
                flat[b_off + j] += *w * g;
            }
        }
        let g = d_tex_raw[i];
        if g != zero {
            let row = &basis.b_t[i * DIM_TEXTURE..(i + 1) * DIM_TEXTURE];
            for (j, w) in row.iter().enumerate() {
                flat[d_off + j] += *w * g;
            }
        }
    }
    flat[g_off..g_off + DIM_ILLUMINATION].copy_from_slice(&d_gamma);
    for k in 0..3 {
        flat[r_off + k] = d_angles[k];
    }
    // translation entries r_off+3.. stay zero
    flat
}

/// Configuration for the deterministic synthetic basis generator.
#[derive(Clone, Copy, Debug)]
pub struct BasisConfig {
    pub seed: u64,
    pub rings: usize,
    pub segments: usize,
}

impl Default for BasisConfig {
    fn default() -> Self {
        // 20 * 24 + 2 = 482 vertices
        BasisConfig { seed: 7, rings: 20, segments: 24 }
    }
}

/// Builds a head-shaped closed ellipsoid (flattened at the back) with
/// orthonormalized random basis columns scaled to 5% of the mean-shape
/// radius, preserving the 80/64/80 coefficient contract of a full model.
pub fn synthetic_basis(cfg: &BasisConfig) -> FaceBasis<f32> {
    let (rings, segments) = (cfg.rings.max(2), cfg.segments.max(3));
    let v = rings * segments + 2;
    let (ax, ay, az) = (1.0f64, 1.3, 0.9);

    let mut shape = vec![0.0f64; 3 * v];
    // vertex 0 = top pole, last = bottom pole
    shape[1] = ay;
    shape[3 * (v - 1) + 1] = -ay;
    let vid = |r: usize, s: usize| 1 + r * segments + (s % segments);
    for r in 0..rings {
        let theta = std::f64::consts::PI * (r + 1) as f64 / (rings + 1) as f64;
        for s in 0..segments {
            let phi = 2.0 * std::f64::consts::PI * s as f64 / segments as f64;
            let x = ax * theta.sin() * phi.sin();
            let y = ay * theta.cos();
            let mut z = az * theta.sin() * phi.cos();
            if z < 0.0 {
                z *= 0.45; // flatten the back of the head
            }
            let i = vid(r, s);
            shape[3 * i] = x;
            shape[3 * i + 1] = y;
            shape[3 * i + 2] = z;
        }
    }

    let mut triangles: Vec<[u32; 3]> = Vec::new();
    for s in 0..segments {
        triangles.push([0, vid(0, s) as u32, vid(0, s + 1) as u32]);
        triangles.push([
            (v - 1) as u32,
            vid(rings - 1, s + 1) as u32,
            vid(rings - 1, s) as u32,
        ]);
    }
    for r in 0..rings - 1 {
        for s in 0..segments {
            let (a, b) = (vid(r, s) as u32, vid(r, s + 1) as u32);
            let (c, d) = (vid(r + 1, s + 1) as u32, vid(r + 1, s) as u32);
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }
    // Enforce outward orientation (the mesh is star-shaped around origin).
    for tri in &mut triangles {
        let p = |i: u32| {
            let j = i as usize * 3;
            [shape[j], shape[j + 1], shape[j + 2]]
        };
        let (p0, p1, p2) = (p(tri[0]), p(tri[1]), p(tri[2]));
        let e1 = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
        let e2 = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
        let n = cross(e1, e2);
        let c = [
            (p0[0] + p1[0] + p2[0]) / 3.0,
            (p0[1] + p1[1] + p2[1]) / 3.0,
            (p0[2] + p1[2] + p2[2]) / 3.0,
        ];
        if n[0] * c[0] + n[1] * c[1] + n[2] * c[2] < 0.0 {
            tri.swap(1, 2);
        }
    }

    // Skin-toned mean texture with a smooth vertical modulation, darker
    // toward the back so that shading structure survives flat lighting.
    let mut texture = vec![0.0f64; 3 * v];
    for i in 0..v {
        let y = shape[3 * i + 1] / ay;
        let z = (shape[3 * i + 2] / az).max(-1.0).min(1.0);
        let depth_fade = 0.78 + 0.22 * (z + 1.0) / 2.0;
        let vertical = 1.0 - 0.08 * y * y;
        texture[3 * i] = (0.84 * depth_fade * vertical).clamp(0.0, 1.0);
        texture[3 * i + 1] = (0.64 * depth_fade * vertical).clamp(0.0, 1.0);
        texture[3 * i + 2] = (0.52 * depth_fade * vertical).clamp(0.0, 1.0);
    }

    // Vertex adjacency for smoothing the random basis fields.
    let mut neighbors: Vec<Vec<u32>> = vec![Vec::new(); v];
    for tri in &triangles {
        for k in 0..3 {
            let (a, b) = (tri[k] as usize, tri[(k + 1) % 3]);
            if !neighbors[a].contains(&b) {
                neighbors[a].push(b);
            }
            let (a, b) = (tri[(k + 1) % 3] as usize, tri[k]);
            if !neighbors[a].contains(&b) {
                neighbors[a].push(b);
            }
        }
    }

    let centroid = {
        let mut c = [0.0f64; 3];
        for i in 0..v {
            for k in 0..3 {
                c[k] += shape[3 * i + k];
            }
        }
        c.map(|x| x / v as f64)
    };
    let mean_radius = (0..v)
        .map(|i| {
            let d: f64 = (0..3).map(|k| (shape[3 * i + k] - centroid[k]).powi(2)).sum();
            d.sqrt()
        })
        .sum::<f64>()
        / v as f64;
    let column_norm = 0.05 * mean_radius;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut make_basis = |cols: usize| -> Vec<f64> {
        let n3 = 3 * v;
        let mut basis = vec![0.0f64; n3 * cols]; // row-major [n3 x cols]
        let mut col = vec![0.0f64; n3];
        let mut smoothed = vec![0.0f64; n3];
        for c in 0..cols {
            for x in col.iter_mut() {
                *x = rng.gen_range(-1.0..1.0);
            }
            // Two neighbor-averaging passes for spatial coherence.
            for _ in 0..2 {
                for i in 0..v {
                    for k in 0..3 {
                        let mut acc = col[3 * i + k];
                        for &nb in &neighbors[i] {
                            acc += col[3 * nb as usize + k];
                        }
                        smoothed[3 * i + k] = acc / (neighbors[i].len() + 1) as f64;
                    }
                }
                std::mem::swap(&mut col, &mut smoothed);
            }
            // Modified Gram-Schmidt against previous columns.
            for prev in 0..c {
                let mut dot = 0.0;
                for i in 0..n3 {
                    dot += col[i] * basis[i * cols + prev];
                }
                // previous columns have norm `column_norm`
                let proj = dot / (column_norm * column_norm);
                for i in 0..n3 {
                    col[i] -= proj * basis[i * cols + prev];
                }
            }
            let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            let s = column_norm / norm.max(1e-12);
            for i in 0..n3 {
                basis[i * cols + c] = col[i] * s;
            }
        }
        basis
    };

    let b_id = make_basis(DIM_IDENTITY);
    let b_exp = make_basis(DIM_EXPRESSION);
    let b_t = make_basis(DIM_TEXTURE);

    FaceBasis {
        mean_shape: shape.iter().map(|&x| x as f32).collect(),
        mean_texture: texture.iter().map(|&x| x as f32).collect(),
        b_id: b_id.iter().map(|&x| x as f32).collect(),
        b_exp: b_exp.iter().map(|&x| x as f32).collect(),
        b_t: b_t.iter().map(|&x| x as f32).collect(),
        triangles,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn toy_basis() -> FaceBasis<f64> {
        // 5-vertex toy basis with deterministic pseudo-random entries.
        let v = 5;
        let n3 = 3 * v;
        let f = |i: usize, j: usize| ((i * 31 + j * 17) % 13) as f64 / 13.0 - 0.5;
        FaceBasis {
            mean_shape: (0..n3).map(|i| f(i, 0)).collect(),
            mean_texture: (0..n3).map(|i| 0.5 + 0.3 * f(i, 1)).collect(),
            b_id: (0..n3 * DIM_IDENTITY).map(|i| f(i, 2) * 0.1).collect(),
            b_exp: (0..n3 * DIM_EXPRESSION).map(|i| f(i, 3) * 0.1).collect(),
            b_t: (0..n3 * DIM_TEXTURE).map(|i| f(i, 4) * 0.1).collect(),
            triangles: vec![[0, 1, 2], [1, 3, 4]],
        }
    }

    #[test]
    fn zero_coefficients_reproduce_means() {
        let basis = toy_basis();
        let s = assemble_shape(&basis, &vec![0.0; 80], &vec![0.0; 64]).unwrap();
        assert_eq!(s, basis.mean_shape);
        let t = assemble_texture(&basis, &vec![0.0; 80]).unwrap();
        assert_eq!(t.raw, basis.mean_texture);
    }

    #[test]
    fn basis_column_selection() {
        let basis = toy_basis();
        let mut alpha = vec![0.0; 80];
        alpha[0] = 1.0;
        let s = assemble_shape(&basis, &alpha, &vec![0.0; 64]).unwrap();
        for i in 0..basis.mean_shape.len() {
            assert_relative_eq!(s[i], basis.mean_shape[i] + basis.b_id[i * 80], epsilon = 1e-12);
        }
    }

    #[test]
    fn assembly_matches_dense_matvec_oracle() {
        let basis = toy_basis();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let alpha: Vec<f64> = (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let beta: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = assemble_shape(&basis, &alpha, &beta).unwrap();
        for i in 0..basis.mean_shape.len() {
            let mut want = basis.mean_shape[i];
            for j in 0..80 {
                want += basis.b_id[i * 80 + j] * alpha[j];
            }
            for j in 0..64 {
                want += basis.b_exp[i * 64 + j] * beta[j];
            }
            assert_relative_eq!(got[i], want, epsilon = 1e-10);
        }
    }

    #[test]
    fn texture_clamps_to_unit_interval() {
        let basis = toy_basis();
        let mut delta = vec![0.0; 80];
        delta[2] = 100.0; // drive way out of range
        let t = assemble_texture(&basis, &delta).unwrap();
        assert!(t.raw.iter().any(|&v| v > 1.0 || v < 0.0));
        assert!(t.clamped.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // oracle on the pre-clamp values
        for i in 0..basis.mean_texture.len() {
            let want = basis.mean_texture[i] + basis.b_t[i * 80 + 2] * 100.0;
            assert_relative_eq!(t.raw[i], want, epsilon = 1e-9);
        }
    }

    #[test]
    fn assembly_is_affine_superposition() {
        // f(a*x + b*y) = a*f(x) + b*f(y) - (a+b-1)*mean
        let basis = toy_basis();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let zeros64 = vec![0.0; 64];
        for _ in 0..5 {
            let x: Vec<f64> = (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (a, b) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let mixed: Vec<f64> = x.iter().zip(&y).map(|(&u, &w)| a * u + b * w).collect();
            let fm = assemble_shape(&basis, &mixed, &zeros64).unwrap();
            let fx = assemble_shape(&basis, &x, &zeros64).unwrap();
            let fy = assemble_shape(&basis, &y, &zeros64).unwrap();
            for i in 0..fm.len() {
                let want = a * fx[i] + b * fy[i] - (a + b - 1.0) * basis.mean_shape[i];
                assert_relative_eq!(fm[i], want, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn zero_pose_is_identity() {
        let verts = vec![1.0, 2.0, 3.0, -0.5, 0.25, 4.0];
        let out = pose_transform(&verts, &[0.0; 6]).unwrap();
        for (a, b) in out.iter().zip(&verts) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let rho = [0.0, 0.0, std::f64::consts::FRAC_PI_2, 0.0, 0.0, 0.0];
        let out = pose_transform(&[1.0, 0.0, 0.0], &rho).unwrap();
        assert_relative_eq!(out[0], 0.0, epsilon = 1e-6);
        assert_relative_eq!(out[1], 1.0, epsilon = 1e-6);
        assert_relative_eq!(out[2], 0.0, epsilon = 1e-6);
    }

    #[test]
    fn rotations_are_orthonormal_with_unit_determinant() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let ang: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let r = rotation_xyz(&ang);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert_relative_eq!(dot, want, epsilon = 1e-6);
                }
            }
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert_relative_eq!(det, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn rotation_derivatives_match_finite_differences() {
        let ang = [0.3, -0.7, 1.1];
        let derivs = rotation_xyz_derivs(&ang);
        let h = 1e-6;
        for a in 0..3 {
            let mut plus = ang;
            plus[a] += h;
            let mut minus = ang;
            minus[a] -= h;
            let rp = rotation_xyz(&plus);
            let rm = rotation_xyz(&minus);
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (rp[i][j] - rm[i][j]) / (2.0 * h);
                    assert_relative_eq!(derivs[a][i][j], fd, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn rigid_motion_preserves_pairwise_distances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let verts: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rho: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let out = pose_transform(&verts, &rho).unwrap();
        for i in 0..4 {
            for j in i + 1..4 {
                let d0: f64 = (0..3).map(|k| (verts[3 * i + k] - verts[3 * j + k]).powi(2)).sum::<f64>().sqrt();
                let d1: f64 = (0..3).map(|k| (out[3 * i + k] - out[3 * j + k]).powi(2)).sum::<f64>().sqrt();
                assert!((d0 - d1).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sh_band0_is_the_analytic_constant() {
        // gamma = e0 -> irradiance = 1/(2 sqrt(pi)) for any normal
        let mut gamma = vec![0.0f64; 9];
        gamma[0] = 1.0;
        let mut warns = 0;
        for n in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.577350269, 0.577350269, 0.577350269]] {
            let irr = sh_irradiance(n, &gamma, &mut warns);
            assert_relative_eq!(irr, 1.0 / (2.0 * std::f64::consts::PI.sqrt()), epsilon = 1e-6);
            assert_relative_eq!(irr, 0.28209479, epsilon = 1e-6);
        }
        assert_eq!(warns, 0);
    }

    #[test]
    fn sh_band1_z_term() {
        let mut gamma = vec![0.0f64; 9];
        gamma[2] = 0.8; // the band-1 z slot
        let mut warns = 0;
        let irr = sh_irradiance([0.0, 0.0, 1.0], &gamma, &mut warns);
        assert_relative_eq!(irr, 0.4886025 * 0.8, epsilon = 1e-6);
    }

    #[test]
    fn zero_gamma_shades_black() {
        let basis = synthetic_basis(&BasisConfig::default()).cast::<f64>();
        let mut coeffs = FaceCoefficients::<f64>::canonical();
        coeffs.gamma = vec![0.0; 9];
        let (mesh, _, _) = shade_mesh(&basis, &coeffs).unwrap();
        assert!(mesh.colors.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn non_unit_normal_is_renormalized_and_counted() {
        let gamma = vec![1.0f64, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut warns = 0;
        let irr = sh_irradiance([0.0, 0.0, 3.0], &gamma, &mut warns);
        assert_eq!(warns, 1);
        assert_relative_eq!(irr, 0.28209479, epsilon = 1e-6);
    }

    #[test]
    fn synthetic_basis_meets_contract() {
        let basis = synthetic_basis(&BasisConfig::default());
        assert_eq!(basis.vertex_count(), 482);
        basis.validate().unwrap();
        assert_eq!(basis.b_id.len(), 3 * 482 * 80);
        assert_eq!(basis.b_exp.len(), 3 * 482 * 64);
        assert_eq!(basis.b_t.len(), 3 * 482 * 80);
        // orientation consistency: every face normal points outward
        for tri in &basis.triangles {
            let p = |i: u32| {
                let j = i as usize * 3;
                [basis.mean_shape[j] as f64, basis.mean_shape[j + 1] as f64, basis.mean_shape[j + 2] as f64]
            };
            let (p0, p1, p2) = (p(tri[0]), p(tri[1]), p(tri[2]));
            let e1 = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
            let e2 = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
            let n = cross(e1, e2);
            let c = [(p0[0] + p1[0] + p2[0]) / 3.0, (p0[1] + p1[1] + p2[1]) / 3.0, (p0[2] + p1[2] + p2[2]) / 3.0];
            assert!(n[0] * c[0] + n[1] * c[1] + n[2] * c[2] > 0.0);
        }
        // column norms are 5% of the mean radius
        let r = basis.mean_radius();
        let want = (0.05 * r) as f64;
        let n3 = basis.mean_shape.len();
        let norm0: f64 = (0..n3).map(|i| (basis.b_id[i * 80] as f64).powi(2)).sum::<f64>().sqrt();
        assert_relative_eq!(norm0, want, epsilon = 1e-3);
        // determinism
        let again = synthetic_basis(&BasisConfig::default());
        assert_eq!(basis.b_id, again.b_id);
        assert_eq!(basis.mean_shape, again.mean_shape);
    }

    #[test]
    fn shaded_mesh_normals_are_unit() {
        let basis = synthetic_basis(&BasisConfig::default()).cast::<f64>();
        let coeffs = FaceCoefficients::<f64>::canonical();
        let (mesh, _, stats) = shade_mesh(&basis, &coeffs).unwrap();
        for i in 0..basis.vertex_count() {
            let n = [mesh.normals[3 * i], mesh.normals[3 * i + 1], mesh.normals[3 * i + 2]];
            let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            assert!((len - 1.0).abs() < 1e-6);
        }
        assert_eq!(stats.renormalized_normals, 0);
        assert!(mesh.colors.iter().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn dimension_mismatches_error() {
        let basis = toy_basis();
        assert!(assemble_shape(&basis, &vec![0.0; 79], &vec![0.0; 64]).is_err());
        assert!(assemble_texture(&basis, &vec![0.0; 81]).is_err());
        assert!(pose_transform(&[0.0; 3], &[0.0; 5]).is_err());
        assert!(FaceCoefficients::<f64>::from_flat(&vec![0.0; 238]).is_err());
    }
}
