//! Software rasterizer: perspective pinhole projection, half-plane coverage
//! at pixel centers with a top-left fill rule, nearest-wins z-buffer with a
//! deterministic tie-break (lower triangle index), and screen-space
//! barycentric interpolation of vertex colors.
//!
//! The camera sits at the origin looking down -z, x right, y up; a vertex
//! `(x, y, z)` with `z < 0` projects to `u = cx + f*x/(-z)`,
//! `v = cy - f*y/(-z)`. Depth is `-z`.
//!
//! Differentiability contract: gradients flow through shading and the
//! barycentric blend only; coverage and the z-winner are treated as locally
//! constant, so occlusion boundaries carry no gradient.

use crate::error::{Error, Result};
use crate::graph::{Graph, VarId};
use crate::morphable::{shade_backward, shade_mesh, FaceBasis, FaceCoefficients, PosedMesh, COEFF_DIM};
use crate::tensor::{Real, Tensor};
use std::sync::Arc;

pub const DEFAULT_FOCAL_128: f64 = 1015.0;

/// Perspective pinhole camera. Focal length and principal point in pixels.
#[derive(Clone, Copy, Debug)]
pub struct Camera<T: Real = f32> {
    pub focal: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> Camera<T> {
    /// Subject-centered camera for a square image, focal scaled from the
    /// canonical 1015 px at 128x128.
    pub fn default_for(size: usize) -> Self {
        Camera {
            focal: T::from_f64(DEFAULT_FOCAL_128 * size as f64 / 128.0),
            cx: T::from_f64(size as f64 / 2.0),
            cy: T::from_f64(size as f64 / 2.0),
            width: size,
            height: size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.focal <= T::zero() {
            return Err(Error::dim("camera", "focal length must be positive"));
        }
        let (w, h) = (T::from_usize(self.width), T::from_usize(self.height));
        if self.cx < T::zero() || self.cx > w || self.cy < T::zero() || self.cy > h {
            return Err(Error::dim("camera", "principal point outside image"));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Camera<U> {
        Camera {
            focal: U::from_f64(self.focal.to_f64()),
            cx: U::from_f64(self.cx.to_f64()),
            cy: U::from_f64(self.cy.to_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Rasterization result. `rgb` is channel-major `[3, H, W]` in `[0,1]`;
/// outside the mask it equals the black background and `depth` is infinite.
#[derive(Clone, Debug)]
pub struct RenderOutput<T: Real = f32> {
    pub rgb: Vec<T>,
    pub face_mask: Vec<bool>,
    pub depth: Vec<T>,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> RenderOutput<T> {
    pub fn rgb_tensor(&self) -> Tensor<T> {
        Tensor::new(&[3, self.height, self.width], self.rgb.clone()).expect("consistent")
    }

    pub fn mask_area(&self) -> usize {
        self.face_mask.iter().filter(|&&m| m).count()
    }
}

/// Per-pixel provenance for the backward pass: winning triangle and
/// barycentric weights, parallel to the pixel grid.
pub struct RasterCache<T: Real> {
    pub triangle: Vec<u32>, // u32::MAX where uncovered
    pub bary: Vec<[T; 3]>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RasterStats {
    pub degenerate_triangles: usize,
}

const MIN_DEPTH: f64 = 1e-4;

/// Whether a boundary pixel on an edge with direction `d` belongs to the
/// triangle (top-left rule; vertex order normalized to positive area,
/// screen y pointing down).
#[inline]
fn owns_edge<T: Real>(du: T, dv: T) -> bool {
    (dv == T::zero() && du > T::zero()) || dv < T::zero()
}

/// Renders a coefficient vector through the full pipeline:
/// shape/pose/normals/texture/illumination, then rasterization.
pub fn render<T: Real>(
    basis: &FaceBasis<T>,
    coeffs: &FaceCoefficients<T>,
    camera: &Camera<T>,
) -> Result<(RenderOutput<T>, RasterStats)> {
    let (mesh, _, _) = shade_mesh(basis, coeffs)?;
    let (out, _, stats) = rasterize_mesh(&mesh, &basis.triangles, camera)?;
    Ok((out, stats))
}

/// Projects and scan-converts a shaded mesh. Triangles are processed in
/// index order; at exactly equal depth the earlier (lower-index) one wins.
pub fn rasterize_mesh<T: Real>(
    mesh: &PosedMesh<T>,
    triangles: &[[u32; 3]],
    camera: &Camera<T>,
) -> Result<(RenderOutput<T>, RasterCache<T>, RasterStats)> {
    camera.validate()?;
    let nv = mesh.positions.len() / 3;
    if nv == 0 || triangles.is_empty() {
        return Err(Error::dim("rasterize", "empty mesh"));
    }
    let (w, h) = (camera.width, camera.height);
    let npix = w * h;
    let mut out = RenderOutput {
        rgb: vec![T::zero(); 3 * npix],
        face_mask: vec![false; npix],
        depth: vec![T::infinity(); npix],
        width: w,
        height: h,
    };
    let mut cache = RasterCache { triangle: vec![u32::MAX; npix], bary: vec![[T::zero(); 3]; npix] };
    let mut stats = RasterStats::default();

    let min_depth = T::from_f64(MIN_DEPTH);
    let mut screen = vec![[T::zero(); 2]; nv];
    let mut depth = vec![T::zero(); nv];
    let mut visible = vec![false; nv];
    for i in 0..nv {
        let (x, y, z) = (mesh.positions[3 * i], mesh.positions[3 * i + 1], mesh.positions[3 * i + 2]);
        let d = -z;
        if d > min_depth {
            visible[i] = true;
            screen[i] = [camera.cx + camera.focal * x / d, camera.cy - camera.focal * y / d];
            depth[i] = d;
        }
    }

    let half = T::from_f64(0.5);
    for (ti, tri) in triangles.iter().enumerate() {
        let idx = [tri[0] as usize, tri[1] as usize, tri[2] as usize];
        if idx.iter().any(|&i| i >= nv) {
            return Err(Error::dim("rasterize", format!("triangle {ti} references vertex out of range")));
        }
        if idx.iter().any(|&i| !visible[i]) {
            continue;
        }
        let mut ord = idx;
        let area2_of = |o: &[usize; 3]| {
            let (a, b, c) = (screen[o[0]], screen[o[1]], screen[o[2]]);
            (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        };
        let mut a2 = area2_of(&ord);
        if a2 == T::zero() {
            stats.degenerate_triangles += 1;
            continue;
        }
        if a2 < T::zero() {
            ord.swap(1, 2);
            a2 = -a2;
        }
        let (p0, p1, p2) = (screen[ord[0]], screen[ord[1]], screen[ord[2]]);

        let min_u = p0[0].min(p1[0]).min(p2[0]);
        let max_u = p0[0].max(p1[0]).max(p2[0]);
        let min_v = p0[1].min(p1[1]).min(p2[1]);
        let max_v = p0[1].max(p1[1]).max(p2[1]);
        if max_u.to_f64() < 0.5 || min_u.to_f64() > w as f64 - 0.5 || max_v.to_f64() < 0.5 || min_v.to_f64() > h as f64 - 0.5 {
            continue;
        }
        let px0 = (min_u.to_f64() - 0.5).ceil().max(0.0) as usize;
        let px1 = (max_u.to_f64() - 0.5).floor().min((w - 1) as f64);
        let py0 = (min_v.to_f64() - 0.5).ceil().max(0.0) as usize;
        let py1 = (max_v.to_f64() - 0.5).floor().min((h - 1) as f64);
        if px1 < 0.0 || py1 < 0.0 {
            continue;
        }
        let (px1, py1) = (px1 as usize, py1 as usize);
        if px1 < px0 || py1 < py0 {
            continue;
        }

        let edges = [(p1, p2), (p2, p0), (p0, p1)];
        let owns = [
            owns_edge(edges[0].1[0] - edges[0].0[0], edges[0].1[1] - edges[0].0[1]),
            owns_edge(edges[1].1[0] - edges[1].0[0], edges[1].1[1] - edges[1].0[1]),
            owns_edge(edges[2].1[0] - edges[2].0[0], edges[2].1[1] - edges[2].0[1]),
        ];
        for py in py0..=py1 {
            let pv = T::from_usize(py) + half;
            for px in px0..=px1 {
                let pu = T::from_usize(px) + half;
                let mut wgt = [T::zero(); 3];
                let mut inside = true;
                for k in 0..3 {
                    let (a, b) = edges[k];
                    let e = (b[0] - a[0]) * (pv - a[1]) - (b[1] - a[1]) * (pu - a[0]);
                    if e < T::zero() || (e == T::zero() && !owns[k]) {
                        inside = false;
                        break;
                    }
                    wgt[k] = e;
                }
                if !inside {
                    continue;
                }
                let l = [wgt[0] / a2, wgt[1] / a2, wgt[2] / a2];
                let d = l[0] * depth[ord[0]] + l[1] * depth[ord[1]] + l[2] * depth[ord[2]];
                let pix = py * w + px;
                if d < out.depth[pix] {
                    out.depth[pix] = d;
                    out.face_mask[pix] = true;
                    cache.triangle[pix] = ti as u32;
                    let mut bary = [T::zero(); 3];
                    for k in 0..3 {
                        let orig_slot = idx.iter().position(|&v| v == ord[k]).expect("member");
                        bary[orig_slot] = l[k];
                    }
                    cache.bary[pix] = bary;
                    for ch in 0..3 {
                        let mut c = T::zero();
                        for k in 0..3 {
                            c += bary[k] * mesh.colors[3 * idx[k] + ch];
                        }
                        out.rgb[ch * w * h + pix] = c;
                    }
                }
            }
        }
    }
    Ok((out, cache, stats))
}

/// Output of the differentiable render op for a batch.
pub struct RenderedBatch<T: Real> {
    /// `[N, 3, H, W]` images in the graph.
    pub images: VarId,
    /// `[N, 1, H, W]` face masks (1 inside, 0 outside), as plain data.
    pub masks: Tensor<T>,
    pub outputs: Vec<RenderOutput<T>>,
    pub stats: RasterStats,
}

/// Records rendering as a custom graph op on a `[N, 239]` coefficient node.
///
/// Backward routes pixel gradients through the barycentric blend to vertex
/// colors and on through shading to the coefficients; coverage and z-winners
/// stay fixed.
pub fn render_batch_op<T: Real>(
    g: &mut Graph<T>,
    coeff_var: VarId,
    basis: &Arc<FaceBasis<T>>,
    camera: &Camera<T>,
) -> Result<RenderedBatch<T>> {
    let shape = g.shape(coeff_var).to_vec();
    if shape.len() != 2 || shape[1] != COEFF_DIM {
        return Err(Error::dim("render", format!("expected [N, {COEFF_DIM}] coefficients, got {shape:?}")));
    }
    let n = shape[0];
    let (w, h) = (camera.width, camera.height);
    let npix = w * h;

    let mut images = vec![T::zero(); n * 3 * npix];
    let mut masks = vec![T::zero(); n * npix];
    let mut outputs = Vec::with_capacity(n);
    let mut stats = RasterStats::default();
    let mut saved: Vec<(FaceCoefficients<T>, PosedMesh<T>, crate::morphable::ShadeCache<T>, RasterCache<T>)> =
        Vec::with_capacity(n);
    for ni in 0..n {
        let flat = &g.value(coeff_var)[ni * COEFF_DIM..(ni + 1) * COEFF_DIM];
        let coeffs = FaceCoefficients::from_flat(flat)?;
        let (mesh, shade_cache, _) = shade_mesh(basis, &coeffs)?;
        let (out, rcache, rstats) = rasterize_mesh(&mesh, &basis.triangles, camera)?;
        stats.degenerate_triangles += rstats.degenerate_triangles;
        images[ni * 3 * npix..(ni + 1) * 3 * npix].copy_from_slice(&out.rgb);
        for p in 0..npix {
            if out.face_mask[p] {
                masks[ni * npix + p] = T::one();
            }
        }
        saved.push((coeffs, mesh, shade_cache, rcache));
        outputs.push(out);
    }

    let basis_bw = Arc::clone(basis);
    let triangles: Arc<Vec<[u32; 3]>> = Arc::new(basis.triangles.clone());
    let backward = Box::new(move |upstream: &[T], bufs: &mut [Vec<T>]| {
        let d_coeffs = &mut bufs[0];
        for (ni, (coeffs, mesh, shade_cache, rcache)) in saved.iter().enumerate() {
            let nvert = mesh.positions.len() / 3;
            let mut d_colors = vec![T::zero(); 3 * nvert];
            let up = &upstream[ni * 3 * npix..(ni + 1) * 3 * npix];
            for p in 0..npix {
                let t = rcache.triangle[p];
                if t == u32::MAX {
                    continue;
                }
                let tri = triangles[t as usize];
                let bary = rcache.bary[p];
                for ch in 0..3 {
                    let gv = up[ch * npix + p];
                    if gv == T::zero() {
                        continue;
                    }
                    for k in 0..3 {
                        d_colors[3 * tri[k] as usize + ch] += bary[k] * gv;
                    }
                }
            }
            let flat = shade_backward(&basis_bw, coeffs, shade_cache, mesh, &d_colors);
            for (j, v) in flat.into_iter().enumerate() {
                d_coeffs[ni * COEFF_DIM + j] += v;
            }
        }
    });

    let images_var = g.custom(&[coeff_var], vec![n, 3, h, w], images, backward);
    let masks = Tensor::new(&[n, 1, h, w], masks)?;
    Ok(RenderedBatch { images: images_var, masks, outputs, stats })
}
