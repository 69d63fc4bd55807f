//! Tile-based alpha-blending rasterizer for planar Gaussians with an exact
//! analytic backward pass.
//!
//! Every pixel is evaluated at its centre `(x + 0.5, y + 0.5)`. The pixel ray
//! is intersected with the splat plane through the homogeneous mapping
//! `A (u, v, 1)^T` from the splat's scale-normalised local frame to
//! homogeneous pixel coordinates; the Gaussian argument is `g = u^2 + v^2`.
//! Primitives are composited front to back by the camera depth of their
//! centre, ties broken by index.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{GrayImage, Image, RgbImage};
use crate::math::{normalize_vjp, quat_normalize, quat_to_matrix, quat_to_matrix_vjp, Quat};
use crate::projection::{splat_projection, Space};
use crate::scene::{Camera, Scene, SplatPrimitive};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub tile_size: usize,
    /// Contributions with `alpha` below this are skipped.
    pub alpha_min: f64,
    /// Contributions with `g > sigma_cutoff^2` are skipped.
    pub sigma_cutoff: f64,
    /// Compositing stops once transmittance drops below this.
    pub transmittance_min: f64,
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            tile_size: 16,
            alpha_min: 1.0 / 255.0,
            sigma_cutoff: 3.0,
            transmittance_min: 1e-4,
            background: [0.0; 3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    pub color: bool,
    pub opacity: bool,
    pub depth: bool,
    pub label: bool,
}

impl Channels {
    pub const ALL: Channels = Channels {
        color: true,
        opacity: true,
        depth: true,
        label: true,
    };
    pub const COLOR_OPACITY: Channels = Channels {
        color: true,
        opacity: true,
        depth: false,
        label: false,
    };
    pub const OPACITY: Channels = Channels {
        color: false,
        opacity: true,
        depth: false,
        label: false,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColorOverride {
    Uniform([f64; 3]),
    PerPrimitive(Vec<[f64; 3]>),
}

/// Optional per-render substitutions.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub color: Option<ColorOverride>,
    /// Only primitives flagged `true` are rendered.
    pub subset: Option<Vec<bool>>,
}

impl Overrides {
    pub fn black() -> Self {
        Self {
            color: Some(ColorOverride::Uniform([0.0; 3])),
            subset: None,
        }
    }

    pub fn subset(flags: Vec<bool>) -> Self {
        Self {
            color: None,
            subset: Some(flags),
        }
    }

    fn includes(&self, i: usize) -> bool {
        self.subset.as_ref().is_none_or(|s| s[i])
    }

    fn color_of(&self, i: usize, prim: &SplatPrimitive) -> [f64; 3] {
        match &self.color {
            None => prim.c,
            Some(ColorOverride::Uniform(c)) => *c,
            Some(ColorOverride::PerPrimitive(cs)) => cs[i],
        }
    }

    fn validate(&self, n: usize) -> Result<()> {
        if let Some(s) = &self.subset {
            if s.len() != n {
                return Err(Error::shape(format!("subset of {n}"), s.len()));
            }
        }
        if let Some(ColorOverride::PerPrimitive(cs)) = &self.color {
            if cs.len() != n {
                return Err(Error::shape(format!("{n} override colors"), cs.len()));
            }
        }
        Ok(())
    }
}

/// Rendered channels; disabled channels stay `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderTarget {
    pub width: usize,
    pub height: usize,
    pub color: Option<RgbImage>,
    /// Accumulated alpha, `1 - final transmittance`.
    pub opacity: Option<GrayImage>,
    /// Alpha-blended camera depth of primitive centres.
    pub depth: Option<GrayImage>,
    /// Label of the primitive with the largest single blend weight.
    pub label: Option<Image<u32>>,
}

impl RenderTarget {
    fn empty(width: usize, height: usize, ch: Channels) -> Self {
        Self {
            width,
            height,
            color: ch.color.then(|| Image::filled(width, height, [0.0; 3])),
            opacity: ch.opacity.then(|| Image::filled(width, height, 0.0)),
            depth: ch.depth.then(|| Image::filled(width, height, 0.0)),
            label: ch.label.then(|| Image::filled(width, height, 0)),
        }
    }

    fn write(&mut self, idx: usize, px: &PixelOut, bg: &[f64; 3]) {
        if let Some(c) = &mut self.color {
            c.data[idx] = [
                px.color[0] + px.t * bg[0],
                px.color[1] + px.t * bg[1],
                px.color[2] + px.t * bg[2],
            ];
        }
        if let Some(o) = &mut self.opacity {
            o.data[idx] = 1.0 - px.t;
        }
        if let Some(d) = &mut self.depth {
            d.data[idx] = px.depth;
        }
        if let Some(l) = &mut self.label {
            l.data[idx] = px.label;
        }
    }
}

/// Per-primitive gradients of `sum(upstream_color * color) +
/// sum(upstream_opacity * opacity)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub d_mu: Vec<Vector3<f64>>,
    pub d_q: Vec<Quat>,
    pub d_o: Vec<f64>,
    /// Gradient with respect to the (possibly overridden) primitive color.
    pub d_color: Vec<[f64; 3]>,
    /// Sum over all pixels of the primitive's blend weight.
    pub contribution: Vec<f64>,
}

impl RenderGrads {
    fn zeros(n: usize) -> Self {
        Self {
            d_mu: vec![Vector3::zeros(); n],
            d_q: vec![[0.0; 4]; n],
            d_o: vec![0.0; n],
            d_color: vec![[0.0; 3]; n],
            contribution: vec![0.0; n],
        }
    }

    /// Adds `other` into `self` in place.
    pub fn accumulate(&mut self, other: &RenderGrads) {
        for i in 0..self.d_mu.len() {
            self.d_mu[i] += other.d_mu[i];
            for k in 0..4 {
                self.d_q[i][k] += other.d_q[i][k];
            }
            self.d_o[i] += other.d_o[i];
            for k in 0..3 {
                self.d_color[i][k] += other.d_color[i][k];
            }
            self.contribution[i] += other.contribution[i];
        }
    }
}

/// Upstream gradient images for [`Rasterizer::backward`].
#[derive(Debug, Clone, Default)]
pub struct Upstream<'a> {
    pub color: Option<&'a RgbImage>,
    pub opacity: Option<&'a GrayImage>,
}

/// Precomputed per-primitive state for one camera.
#[derive(Debug, Clone)]
struct Prepared {
    index: usize,
    /// Rows map `(u, v, 1)` to homogeneous pixel x, y and depth.
    a: Matrix3<f64>,
    depth: f64,
    color: [f64; 3],
    opacity: f64,
    label: u32,
    /// `[xmin, ymin, xmax, ymax]` in pixels.
    bbox: [f64; 4],
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    u: f64,
    v: f64,
    g: f64,
    hu: Vector3<f64>,
    hv: Vector3<f64>,
    w: f64,
}

#[inline]
fn intersect(a: &Matrix3<f64>, x: f64, y: f64) -> Option<Hit> {
    let ax = a.row(0).transpose();
    let ay = a.row(1).transpose();
    let aw = a.row(2).transpose();
    let hu = ax - aw * x;
    let hv = ay - aw * y;
    let n = hu.cross(&hv);
    if n.z == 0.0 {
        return None;
    }
    let u = n.x / n.z;
    let v = n.y / n.z;
    let g = u * u + v * v;
    g.is_finite().then_some(Hit {
        u,
        v,
        g,
        hu,
        hv,
        w: n.z,
    })
}

/// Homogeneous splat-to-pixel matrix, built from the normalised quaternion.
fn splat_matrix(prim: &SplatPrimitive, pfw: &nalgebra::Matrix3x4<f64>) -> Matrix3<f64> {
    let q = quat_normalize(&prim.q).unwrap_or(crate::math::QUAT_IDENTITY);
    let r = quat_to_matrix(&q);
    let tu = r.column(0) * prim.s[0];
    let tv = r.column(1) * prim.s[1];
    let mut a = Matrix3::zeros();
    for row in 0..3 {
        let m = pfw.fixed_view::<1, 3>(row, 0);
        a[(row, 0)] = m.dot(&tu.transpose());
        a[(row, 1)] = m.dot(&tv.transpose());
        a[(row, 2)] = m.dot(&prim.mu.transpose()) + pfw[(row, 3)];
    }
    a
}

#[derive(Debug, Clone, Copy)]
struct PixelOut {
    color: [f64; 3],
    t: f64,
    depth: f64,
    label: u32,
    best: f64,
}

impl PixelOut {
    fn new() -> Self {
        Self {
            color: [0.0; 3],
            t: 1.0,
            depth: 0.0,
            label: 0,
            best: 0.0,
        }
    }
}

/// A contributor of one pixel, recorded for the backward pass.
#[derive(Debug, Clone, Copy)]
struct Contrib {
    slot: usize,
    alpha: f64,
    gauss: f64,
    t_before: f64,
    hit: Hit,
}

/// Per-pixel lists of contributing primitive indices, front to back,
/// truncated at termination. Used to evaluate the renderer with frozen
/// cutoff masks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendLists {
    pub width: usize,
    pub height: usize,
    pub lists: Vec<Vec<usize>>,
}

/// State of a forward pass needed by [`Rasterizer::backward`].
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    fingerprint: u64,
    prepared: Vec<Prepared>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
}

fn fingerprint(scene: &Scene, cam: &Camera, overrides: &Overrides, cfg: &RenderConfig) -> u64 {
    let mut h = DefaultHasher::new();
    let mut f = |v: f64| v.to_bits().hash(&mut h);
    for p in &scene.primitives {
        p.mu.iter().for_each(|&v| f(v));
        p.q.iter().for_each(|&v| f(v));
        p.s.iter().for_each(|&v| f(v));
        f(p.o);
        p.c.iter().for_each(|&v| f(v));
        f(p.label as f64);
    }
    for v in [cam.fx, cam.fy, cam.cx, cam.cy, cam.near, cam.far] {
        f(v);
    }
    cam.pose.q.iter().for_each(|&v| f(v));
    cam.pose.t.iter().for_each(|&v| f(v));
    f(cam.width as f64);
    f(cam.height as f64);
    f(cfg.alpha_min);
    f(cfg.sigma_cutoff);
    f(cfg.transmittance_min);
    f(cfg.tile_size as f64);
    let mut h2 = h;
    format!("{overrides:?}").hash(&mut h2);
    h2.finish()
}

#[derive(Debug, Clone, Default)]
pub struct Rasterizer {
    pub config: RenderConfig,
}

impl Rasterizer {
    pub fn new(config: RenderConfig) -> Self {
        Self { config }
    }

    fn prepare(&self, scene: &Scene, cam: &Camera, overrides: &Overrides) -> Vec<Prepared> {
        let pfw = cam.pixel_from_world();
        let cutoff = self.config.sigma_cutoff;
        let mut prepared: Vec<Prepared> = scene
            .primitives
            .par_iter()
            .enumerate()
            .filter_map(|(i, prim)| {
                if !overrides.includes(i) {
                    return None;
                }
                let ps = splat_projection(prim, cam, Space::Pixel, cutoff);
                if !ps.valid {
                    return None;
                }
                // one pixel of slack keeps the box a superset of the
                // per-pixel cutoff test under rounding
                let bbox = [
                    ps.p[0] - ps.h[0] - 1.0,
                    ps.p[1] - ps.h[1] - 1.0,
                    ps.p[0] + ps.h[0] + 1.0,
                    ps.p[1] + ps.h[1] + 1.0,
                ];
                if bbox[2] < 0.0
                    || bbox[3] < 0.0
                    || bbox[0] > cam.width as f64
                    || bbox[1] > cam.height as f64
                {
                    return None;
                }
                Some(Prepared {
                    index: i,
                    a: splat_matrix(prim, &pfw),
                    depth: ps.depth,
                    color: overrides.color_of(i, prim),
                    opacity: prim.o,
                    label: prim.label,
                    bbox,
                })
            })
            .collect();
        prepared.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
        prepared
    }

    /// Blends one contributor into `out`; returns the contribution when it
    /// passes the cutoffs.
    #[inline]
    fn shade(&self, p: &Prepared, slot: usize, x: f64, y: f64, out: &mut PixelOut) -> Option<Contrib> {
        let hit = intersect(&p.a, x, y)?;
        let cut = self.config.sigma_cutoff;
        if hit.g > cut * cut {
            return None;
        }
        let gauss = (-0.5 * hit.g).exp();
        let alpha = p.opacity * gauss;
        if alpha < self.config.alpha_min {
            return None;
        }
        let w = alpha * out.t;
        for k in 0..3 {
            out.color[k] += p.color[k] * w;
        }
        out.depth += p.depth * w;
        if w > out.best {
            out.best = w;
            out.label = p.label;
        }
        let t_before = out.t;
        out.t *= 1.0 - alpha;
        Some(Contrib {
            slot,
            alpha,
            gauss,
            t_before,
            hit,
        })
    }

    fn tile_grid(&self, cam: &Camera) -> (usize, usize) {
        let ts = self.config.tile_size.max(1);
        (cam.width.div_ceil(ts), cam.height.div_ceil(ts))
    }

    fn bin(&self, cam: &Camera, prepared: &[Prepared]) -> (Vec<Vec<u32>>, usize) {
        let ts = self.config.tile_size.max(1) as f64;
        let (tx, ty) = self.tile_grid(cam);
        let mut tiles = vec![Vec::new(); tx * ty];
        for (slot, p) in prepared.iter().enumerate() {
            let x0 = ((p.bbox[0] / ts).floor().max(0.0) as usize).min(tx - 1);
            let y0 = ((p.bbox[1] / ts).floor().max(0.0) as usize).min(ty - 1);
            let x1 = ((p.bbox[2] / ts).floor().max(0.0) as usize).min(tx - 1);
            let y1 = ((p.bbox[3] / ts).floor().max(0.0) as usize).min(ty - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    tiles[y * tx + x].push(slot as u32);
                }
            }
        }
        (tiles, tx)
    }

    fn tile_pixels(&self, cam: &Camera, tile: usize, tiles_x: usize) -> (usize, usize, usize, usize) {
        let ts = self.config.tile_size.max(1);
        let (tx, ty) = (tile % tiles_x, tile / tiles_x);
        let x0 = tx * ts;
        let y0 = ty * ts;
        (x0, y0, (x0 + ts).min(cam.width), (y0 + ts).min(cam.height))
    }

    /// Tiled forward render.
    pub fn render(
        &self,
        scene: &Scene,
        cam: &Camera,
        channels: Channels,
        overrides: &Overrides,
    ) -> Result<RenderTarget> {
        Ok(self.forward(scene, cam, channels, overrides)?.0)
    }

    /// Tiled forward render that also returns the state needed by
    /// [`Rasterizer::backward`].
    pub fn forward(
        &self,
        scene: &Scene,
        cam: &Camera,
        channels: Channels,
        overrides: &Overrides,
    ) -> Result<(RenderTarget, ForwardRecord)> {
        overrides.validate(scene.len())?;
        let prepared = self.prepare(scene, cam, overrides);
        let (tiles, tiles_x) = self.bin(cam, &prepared);
        let t_min = self.config.transmittance_min;

        let shaded: Vec<Vec<(usize, PixelOut)>> = (0..tiles.len())
            .into_par_iter()
            .map(|tile| {
                let (x0, y0, x1, y1) = self.tile_pixels(cam, tile, tiles_x);
                let list = &tiles[tile];
                let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
                for py in y0..y1 {
                    for px in x0..x1 {
                        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                        let mut pix = PixelOut::new();
                        for &slot in list {
                            let p = &prepared[slot as usize];
                            if x < p.bbox[0] || x > p.bbox[2] || y < p.bbox[1] || y > p.bbox[3] {
                                continue;
                            }
                            if self.shade(p, slot as usize, x, y, &mut pix).is_some()
                                && pix.t < t_min
                            {
                                break;
                            }
                        }
                        out.push((py * cam.width + px, pix));
                    }
                }
                out
            })
            .collect();

        let mut target = RenderTarget::empty(cam.width, cam.height, channels);
        for tile in &shaded {
            for (idx, pix) in tile {
                target.write(*idx, pix, &self.config.background);
            }
        }
        let record = ForwardRecord {
            fingerprint: fingerprint(scene, cam, overrides, &self.config),
            prepared,
            tiles,
            tiles_x,
        };
        Ok((target, record))
    }

    /// Reference renderer: no tiling or bounding boxes, every pixel walks the
    /// full depth-sorted primitive list.
    pub fn render_naive(
        &self,
        scene: &Scene,
        cam: &Camera,
        channels: Channels,
        overrides: &Overrides,
    ) -> Result<RenderTarget> {
        overrides.validate(scene.len())?;
        let prepared = self.prepare(scene, cam, overrides);
        let t_min = self.config.transmittance_min;
        let mut target = RenderTarget::empty(cam.width, cam.height, channels);
        let rows: Vec<Vec<PixelOut>> = (0..cam.height)
            .into_par_iter()
            .map(|py| {
                (0..cam.width)
                    .map(|px| {
                        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                        let mut pix = PixelOut::new();
                        let mut done = false;
                        for (slot, p) in prepared.iter().enumerate() {
                            if done {
                                continue;
                            }
                            if self.shade(p, slot, x, y, &mut pix).is_some() && pix.t < t_min {
                                done = true;
                            }
                        }
                        pix
                    })
                    .collect()
            })
            .collect();
        for (py, row) in rows.iter().enumerate() {
            for (px, pix) in row.iter().enumerate() {
                target.write(py * cam.width + px, pix, &self.config.background);
            }
        }
        Ok(target)
    }

    /// Records, per pixel, which primitives contribute (after cutoffs and
    /// termination).
    pub fn blend_lists(&self, scene: &Scene, cam: &Camera, overrides: &Overrides) -> Result<BlendLists> {
        overrides.validate(scene.len())?;
        let prepared = self.prepare(scene, cam, overrides);
        let t_min = self.config.transmittance_min;
        let lists = (0..cam.pixel_count())
            .into_par_iter()
            .map(|idx| {
                let (x, y) = ((idx % cam.width) as f64 + 0.5, (idx / cam.width) as f64 + 0.5);
                let mut pix = PixelOut::new();
                let mut list = Vec::new();
                for (slot, p) in prepared.iter().enumerate() {
                    if self.shade(p, slot, x, y, &mut pix).is_some() {
                        list.push(p.index);
                        if pix.t < t_min {
                            break;
                        }
                    }
                }
                list
            })
            .collect();
        Ok(BlendLists {
            width: cam.width,
            height: cam.height,
            lists,
        })
    }

    /// Evaluates the blend with fixed per-pixel contributor lists: no cutoff
    /// tests and no termination. Differentiable everywhere the ray meets the
    /// splat planes; agrees with [`Rasterizer::render`] when the lists match.
    pub fn render_frozen(
        &self,
        scene: &Scene,
        cam: &Camera,
        channels: Channels,
        overrides: &Overrides,
        lists: &BlendLists,
    ) -> Result<RenderTarget> {
        overrides.validate(scene.len())?;
        if lists.width != cam.width || lists.height != cam.height {
            return Err(Error::shape(
                format!("{}x{}", cam.width, cam.height),
                format!("{}x{}", lists.width, lists.height),
            ));
        }
        let pfw = cam.pixel_from_world();
        let mats: Vec<Matrix3<f64>> = scene.primitives.iter().map(|p| splat_matrix(p, &pfw)).collect();
        let depths: Vec<f64> = scene
            .primitives
            .iter()
            .map(|p| cam.world_to_camera(&p.mu).z)
            .collect();
        let mut target = RenderTarget::empty(cam.width, cam.height, channels);
        for (idx, list) in lists.lists.iter().enumerate() {
            let (x, y) = ((idx % cam.width) as f64 + 0.5, (idx / cam.width) as f64 + 0.5);
            let mut pix = PixelOut::new();
            for &i in list {
                let Some(hit) = intersect(&mats[i], x, y) else { continue };
                let alpha = scene.primitives[i].o * (-0.5 * hit.g).exp();
                let w = alpha * pix.t;
                let c = overrides.color_of(i, &scene.primitives[i]);
                for k in 0..3 {
                    pix.color[k] += c[k] * w;
                }
                pix.depth += depths[i] * w;
                if w > pix.best {
                    pix.best = w;
                    pix.label = scene.primitives[i].label;
                }
                pix.t *= 1.0 - alpha;
            }
            target.write(idx, &pix, &self.config.background);
        }
        Ok(target)
    }

    /// Gradients of `sum(upstream.color * color + upstream.opacity *
    /// opacity)` with respect to each primitive's position, quaternion,
    /// opacity and color. Cutoffs and termination act as constant masks.
    pub fn backward(
        &self,
        scene: &Scene,
        cam: &Camera,
        overrides: &Overrides,
        record: &ForwardRecord,
        upstream: &Upstream<'_>,
    ) -> Result<RenderGrads> {
        if fingerprint(scene, cam, overrides, &self.config) != record.fingerprint {
            return Err(Error::StaleForward);
        }
        let probe = Image::<()>::filled(cam.width, cam.height, ());
        if let Some(c) = upstream.color {
            probe.check_shape(c)?;
        }
        if let Some(o) = upstream.opacity {
            probe.check_shape(o)?;
        }
        let prepared = &record.prepared;
        let t_min = self.config.transmittance_min;
        let bg = self.config.background;

        #[derive(Clone, Copy, Default)]
        struct Acc {
            ga: [f64; 9],
            go: f64,
            gc: [f64; 3],
            contrib: f64,
        }

        let partials: Vec<Vec<Acc>> = (0..record.tiles.len())
            .into_par_iter()
            .map(|tile| {
                let list = &record.tiles[tile];
                let mut acc = vec![Acc::default(); list.len()];
                let (x0, y0, x1, y1) = self.tile_pixels(cam, tile, record.tiles_x);
                let mut contribs: Vec<(usize, Contrib)> = Vec::new();
                for py in y0..y1 {
                    for px in x0..x1 {
                        let idx = py * cam.width + px;
                        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                        contribs.clear();
                        let mut pix = PixelOut::new();
                        for (pos, &slot) in list.iter().enumerate() {
                            let p = &prepared[slot as usize];
                            if x < p.bbox[0] || x > p.bbox[2] || y < p.bbox[1] || y > p.bbox[3] {
                                continue;
                            }
                            if let Some(c) = self.shade(p, slot as usize, x, y, &mut pix) {
                                contribs.push((pos, c));
                                if pix.t < t_min {
                                    break;
                                }
                            }
                        }
                        if contribs.is_empty() {
                            continue;
                        }
                        let up_c = upstream.color.map_or([0.0; 3], |c| c.data[idx]);
                        let up_o = upstream.opacity.map_or(0.0, |o| o.data[idx]);
                        let mut s_c = bg;
                        let mut s_o = 0.0;
                        for &(pos, c) in contribs.iter().rev() {
                            let p = &prepared[c.slot];
                            let w = c.alpha * c.t_before;
                            let mut d_alpha = up_o * c.t_before * (1.0 - s_o);
                            for k in 0..3 {
                                d_alpha += up_c[k] * c.t_before * (p.color[k] - s_c[k]);
                                s_c[k] = p.color[k] * c.alpha + (1.0 - c.alpha) * s_c[k];
                            }
                            s_o = c.alpha + (1.0 - c.alpha) * s_o;

                            let a = &mut acc[pos];
                            a.contrib += w;
                            for k in 0..3 {
                                a.gc[k] += up_c[k] * w;
                            }
                            a.go += d_alpha * c.gauss;
                            let d_g = -0.5 * c.alpha * d_alpha;
                            if d_g == 0.0 {
                                continue;
                            }
                            let h = &c.hit;
                            let g_n = Vector3::new(
                                d_g * 2.0 * h.u / h.w,
                                d_g * 2.0 * h.v / h.w,
                                -d_g * 2.0 * h.g / h.w,
                            );
                            let g_hu = h.hv.cross(&g_n);
                            let g_hv = g_n.cross(&h.hu);
                            for j in 0..3 {
                                a.ga[j] += g_hu[j];
                                a.ga[3 + j] += g_hv[j];
                                a.ga[6 + j] -= x * g_hu[j] + y * g_hv[j];
                            }
                        }
                    }
                }
                acc
            })
            .collect();

        let mut ga = vec![[0.0f64; 9]; prepared.len()];
        let mut grads = RenderGrads::zeros(scene.len());
        for (tile, acc) in partials.iter().enumerate() {
            for (pos, a) in acc.iter().enumerate() {
                let slot = record.tiles[tile][pos] as usize;
                let i = prepared[slot].index;
                for k in 0..9 {
                    ga[slot][k] += a.ga[k];
                }
                grads.d_o[i] += a.go;
                for k in 0..3 {
                    grads.d_color[i][k] += a.gc[k];
                }
                grads.contribution[i] += a.contrib;
            }
        }

        let pfw = cam.pixel_from_world();
        for (slot, p) in prepared.iter().enumerate() {
            let g = &ga[slot];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let prim = &scene.primitives[p.index];
            let mut d_mu = Vector3::zeros();
            let mut d_tu = Vector3::zeros();
            let mut d_tv = Vector3::zeros();
            for row in 0..3 {
                let m = pfw.fixed_view::<1, 3>(row, 0).transpose();
                d_tu += m * (g[row * 3] * prim.s[0]);
                d_tv += m * (g[row * 3 + 1] * prim.s[1]);
                d_mu += m * g[row * 3 + 2];
            }
            let mut d_r = Matrix3::zeros();
            d_r.set_column(0, &d_tu);
            d_r.set_column(1, &d_tv);
            let q_hat = quat_normalize(&prim.q).unwrap_or(crate::math::QUAT_IDENTITY);
            let d_qhat = quat_to_matrix_vjp(&q_hat, &d_r);
            grads.d_mu[p.index] = d_mu;
            grads.d_q[p.index] = normalize_vjp(&prim.q, &d_qhat);
        }
        Ok(grads)
    }
}
