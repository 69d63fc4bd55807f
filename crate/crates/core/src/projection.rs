//! Splat projection bounds, mask containment, NDC transforms and occlusion
//! tests.

use nalgebra::{Matrix3x4, Matrix4, Vector3};

use crate::error::{Error, Result};
use crate::image::Mask;
use crate::scene::{Camera, Scene, SplatPrimitive};

/// Default footprint padding for occlusion tests, in NDC units.
pub const OCCLUSION_PADDING: f64 = 0.02;

/// Coordinate space of [`ProjectedSplat::p`] and [`ProjectedSplat::h`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Pixel,
    Ndc,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSplat {
    /// `T = (P M)^T`; column `i` holds the coefficients of the `i`-th clip
    /// coordinate in terms of the splat-local homogeneous point `(u, v, 1)`.
    pub t: Matrix3x4<f64>,
    pub p: [f64; 2],
    pub h: [f64; 2],
    pub d: f64,
    /// Camera depth of the centre.
    pub depth: f64,
    pub valid: bool,
}

impl ProjectedSplat {
    pub fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        (
            [self.p[0] - self.h[0], self.p[1] - self.h[1]],
            [self.p[0] + self.h[0], self.p[1] + self.h[1]],
        )
    }
}

/// Clip-space matrix whose x/y rows produce pixel coordinates after the
/// perspective divide.
fn pixel_clip(cam: &Camera) -> Matrix4<f64> {
    let (w, h) = (cam.width as f64, cam.height as f64);
    let ndc_to_pix = Matrix4::new(
        w / 2.0,
        0.0,
        0.0,
        w / 2.0,
        0.0,
        h / 2.0,
        0.0,
        h / 2.0,
        0.0,
        0.0,
        1.0,
        0.0,
        0.0,
        0.0,
        0.0,
        1.0,
    );
    ndc_to_pix * cam.projection()
}

/// Projects a splat and computes the screen-space bounding box of its
/// `cutoff_sigma` level set (`u^2 + v^2 = cutoff_sigma^2` in the splat's
/// scale-normalised frame).
pub fn splat_projection(
    prim: &SplatPrimitive,
    cam: &Camera,
    space: Space,
    cutoff_sigma: f64,
) -> ProjectedSplat {
    let p4 = match space {
        Space::Pixel => pixel_clip(cam),
        Space::Ndc => *cam.projection(),
    };
    let (tu, tv) = prim.tangentials();
    let cols = [
        (tu * prim.s[0]).push(0.0),
        (tv * prim.s[1]).push(0.0),
        prim.mu.push(1.0),
    ];
    let mut t = Matrix3x4::zeros();
    for i in 0..4 {
        for (j, col) in cols.iter().enumerate() {
            t[(j, i)] = p4.row(i).dot(&col.transpose());
        }
    }
    let k2 = cutoff_sigma * cutoff_sigma;
    let sign = Vector3::new(1.0, 1.0, -1.0 / k2);
    let col = |i: usize| t.column(i).into_owned();
    let (t1, t2, t4) = (col(0), col(1), col(3));
    let d = t4.component_mul(&t4).dot(&sign);
    let depth = cam.world_to_camera(&prim.mu).z;

    let mut p = [0.0; 2];
    let mut h = [0.0; 2];
    let mut radicand_ok = true;
    if d.abs() >= 1e-12 {
        for (i, ti) in [t1, t2].iter().enumerate() {
            p[i] = ti.component_mul(&t4).dot(&sign) / d;
            let r = p[i] * p[i] - ti.component_mul(ti).dot(&sign) / d;
            if r < 0.0 {
                radicand_ok = false;
            }
            h[i] = r.max(0.0).sqrt();
        }
    }
    // d < 0 iff the whole cutoff disk lies in front of the camera plane;
    // otherwise the image of the disk is not an ellipse.
    let valid = d <= -1e-12
        && radicand_ok
        && depth > cam.near
        && depth < cam.far
        && p.iter().chain(h.iter()).all(|v| v.is_finite());
    ProjectedSplat {
        t,
        p,
        h,
        d,
        depth,
        valid,
    }
}

/// Sampling pattern for [`bounds_in_mask`]. `samples <= 5` uses the four box
/// corners plus the centre; larger values add points spread evenly along
/// the box perimeter.
pub fn bounds_in_mask(ps: &ProjectedSplat, mask: &Mask, samples: usize) -> bool {
    if !ps.valid {
        return false;
    }
    let (lo, hi) = ps.bounds();
    let mut pts = vec![
        (lo[0], lo[1]),
        (hi[0], lo[1]),
        (lo[0], hi[1]),
        (hi[0], hi[1]),
        (ps.p[0], ps.p[1]),
    ];
    if samples > 5 {
        let extra = samples - 5;
        let (w, h) = (hi[0] - lo[0], hi[1] - lo[1]);
        let perimeter = 2.0 * (w + h);
        for k in 0..extra {
            let mut s = perimeter * (k as f64 + 0.5) / extra as f64;
            let pt = if s < w {
                (lo[0] + s, lo[1])
            } else if {
                s -= w;
                s < h
            } {
                (hi[0], lo[1] + s)
            } else if {
                s -= h;
                s < w
            } {
                (hi[0] - s, hi[1])
            } else {
                s -= w;
                (lo[0], hi[1] - s)
            };
            pts.push(pt);
        }
    }
    pts.into_iter()
        .all(|(x, y)| mask.sample(x, y).unwrap_or(false))
}

/// Perspective-divided clip coordinates of a world point.
pub fn to_ndc(cam: &Camera, mu: &Vector3<f64>) -> Result<Vector3<f64>> {
    let clip = cam.clip(mu);
    if clip.w.abs() < 1e-12 {
        return Err(Error::DegenerateProjection(clip.w));
    }
    Ok(clip.xyz() / clip.w)
}

/// Indices of non-object primitives in front of the object in `cam`.
///
/// The object footprint is the NDC `(x, y)` bounding box of the object's
/// primitives padded by `padding`; a primitive occludes when its NDC centre
/// falls inside the footprint with an NDC depth smaller than the nearest
/// object primitive. Primitives behind the camera never take part.
pub fn occluding_primitives(
    scene: &Scene,
    object_label: u32,
    cam: &Camera,
    padding: f64,
) -> Result<Vec<usize>> {
    let ndc: Vec<Option<Vector3<f64>>> = scene
        .primitives
        .iter()
        .map(|p| {
            let clip = cam.clip(&p.mu);
            (clip.w > 1e-12).then(|| clip.xyz() / clip.w)
        })
        .collect();

    let mut any = false;
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut min_depth = f64::INFINITY;
    for (prim, n) in scene.primitives.iter().zip(&ndc) {
        if prim.label != object_label {
            continue;
        }
        any = true;
        if let Some(n) = n {
            lo = [lo[0].min(n.x), lo[1].min(n.y)];
            hi = [hi[0].max(n.x), hi[1].max(n.y)];
            min_depth = min_depth.min(n.z);
        }
    }
    if !any {
        return Err(Error::EmptyObject(object_label));
    }
    if !min_depth.is_finite() {
        return Ok(Vec::new());
    }
    let (lo, hi) = (
        [lo[0] - padding, lo[1] - padding],
        [hi[0] + padding, hi[1] + padding],
    );
    Ok(scene
        .primitives
        .iter()
        .zip(&ndc)
        .enumerate()
        .filter_map(|(i, (prim, n))| {
            let n = n.as_ref()?;
            let inside = prim.label != object_label
                && n.x >= lo[0]
                && n.x <= hi[0]
                && n.y >= lo[1]
                && n.y <= hi[1]
                && n.z < min_depth;
            inside.then_some(i)
        })
        .collect())
}

/// Orders candidate views by ascending occlusion count. Returns
/// `(candidate index, count)` pairs; ties keep the input order.
pub fn select_views(
    scene: &Scene,
    object_label: u32,
    candidates: &[Camera],
    padding: f64,
) -> Result<Vec<(usize, usize)>> {
    if candidates.is_empty() {
        return Err(Error::Domain("select_views needs at least one camera".into()));
    }
    let mut counts = candidates
        .iter()
        .enumerate()
        .map(|(i, cam)| Ok((i, occluding_primitives(scene, object_label, cam, padding)?.len())))
        .collect::<Result<Vec<_>>>()?;
    counts.sort_by_key(|&(_, c)| c);
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Pose;

    fn axis_cam() -> Camera {
        Camera::new("c", 64, 48, 50.0, 50.0, 32.0, 24.0, Pose::identity(), 0.1, 10.0).unwrap()
    }

    fn prim_at(x: f64, y: f64, z: f64, label: u32) -> SplatPrimitive {
        SplatPrimitive::new(
            Vector3::new(x, y, z),
            [1.0, 0.0, 0.0, 0.0],
            [0.05, 0.05],
            0.8,
            [0.5; 3],
            label,
        )
        .unwrap()
    }

    #[test]
    fn on_axis_splat_projects_to_principal_point() {
        let ps = splat_projection(&prim_at(0.0, 0.0, 1.0, 0), &axis_cam(), Space::Pixel, 3.0);
        assert!(ps.valid);
        assert!((ps.p[0] - 32.0).abs() < 1e-9 && (ps.p[1] - 24.0).abs() < 1e-9);
        // fronto-parallel disk of radius 3 * 0.05 at depth 1 -> 7.5 px
        assert!((ps.h[0] - 7.5).abs() < 1e-9 && (ps.h[1] - 7.5).abs() < 1e-9);
        let ndc = splat_projection(&prim_at(0.0, 0.0, 1.0, 0), &axis_cam(), Space::Ndc, 3.0);
        assert!(ndc.p[0].abs() < 1e-12 && ndc.p[1].abs() < 1e-12);
    }

    #[test]
    fn unit_level_set_is_literal_formula() {
        let ps = splat_projection(&prim_at(0.1, 0.0, 1.0, 0), &axis_cam(), Space::Pixel, 1.0);
        let t = ps.t;
        let sign = Vector3::new(1.0, 1.0, -1.0);
        let t4 = t.column(3).into_owned();
        let d = t4.component_mul(&t4).dot(&sign);
        let t1 = t.column(0).into_owned();
        let p1 = t1.component_mul(&t4).dot(&sign) / d;
        let h1 = (p1 * p1 - t1.component_mul(&t1).dot(&sign) / d).sqrt();
        assert_eq!(ps.d, d);
        assert!((ps.p[0] - p1).abs() < 1e-12 && (ps.h[0] - h1).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_invalid() {
        let cam = axis_cam();
        assert!(!splat_projection(&prim_at(0.0, 0.0, -1.0, 0), &cam, Space::Pixel, 3.0).valid);
        assert!(!splat_projection(&prim_at(0.0, 0.0, 0.05, 0), &cam, Space::Pixel, 3.0).valid);
    }

    #[test]
    fn mask_containment_cases() {
        let cam = axis_cam();
        let ps = splat_projection(&prim_at(0.0, 0.0, 1.0, 0), &cam, Space::Pixel, 3.0);
        let mut mask = Mask::filled(64, 48, false);
        for y in 10..40 {
            for x in 15..50 {
                mask.data[y * 64 + x] = true;
            }
        }
        assert!(bounds_in_mask(&ps, &mask, 5));
        assert!(bounds_in_mask(&ps, &mask, 40));
        assert!(!bounds_in_mask(&ps, &Mask::filled(64, 48, false), 5));
        let mut straddle = Mask::filled(64, 48, false);
        for y in 0..48 {
            for x in 0..35 {
                straddle.data[y * 64 + x] = true;
            }
        }
        assert!(!bounds_in_mask(&ps, &straddle, 5));
        // corner outside the image
        let edge = splat_projection(&prim_at(0.6, 0.0, 1.0, 0), &cam, Space::Pixel, 3.0);
        assert!(!bounds_in_mask(&edge, &Mask::filled(64, 48, true), 5));
    }

    #[test]
    fn ndc_examples() {
        let cam = axis_cam();
        let mid = to_ndc(&cam, &Vector3::new(0.0, 0.0, 5.0)).unwrap();
        assert!(mid.x.abs() < 1e-12 && mid.y.abs() < 1e-12);
        let near = to_ndc(&cam, &Vector3::new(0.0, 0.0, 0.1)).unwrap();
        assert!((near.z + 1.0).abs() < 1e-12);
        let far = to_ndc(&cam, &Vector3::new(0.0, 0.0, 10.0)).unwrap();
        assert!((far.z - 1.0).abs() < 1e-12);
        assert!(matches!(
            to_ndc(&cam, &Vector3::new(1.0, 0.0, 0.0)),
            Err(Error::DegenerateProjection(_))
        ));
    }

    #[test]
    fn occlusion_examples() {
        let cam = axis_cam();
        let object = vec![prim_at(0.0, 0.0, 2.0, 1), prim_at(0.1, 0.0, 2.0, 1)];
        let scene = Scene::new(object.clone());
        assert!(occluding_primitives(&scene, 1, &cam, OCCLUSION_PADDING)
            .unwrap()
            .is_empty());

        let mut s = object.clone();
        s.push(prim_at(0.05, 0.0, 1.0, 0));
        s.push(prim_at(0.05, 0.0, 3.0, 0));
        let scene = Scene::new(s);
        assert_eq!(
            occluding_primitives(&scene, 1, &cam, OCCLUSION_PADDING).unwrap(),
            vec![2]
        );
        assert!(matches!(
            occluding_primitives(&scene, 9, &cam, OCCLUSION_PADDING),
            Err(Error::EmptyObject(9))
        ));
    }

    #[test]
    fn view_selection_is_stable() {
        let cam = axis_cam();
        let mut prims = vec![prim_at(0.0, 0.0, 2.0, 1)];
        prims.push(prim_at(0.0, 0.0, 1.0, 0));
        let scene = Scene::new(prims);
        let side = Camera::new(
            "side",
            64,
            48,
            50.0,
            50.0,
            32.0,
            24.0,
            Pose::look_at(
                Vector3::new(2.0, 0.0, 2.0),
                Vector3::new(0.0, 0.0, 2.0),
                Vector3::new(0.0, 1.0, 0.0),
            ),
            0.1,
            10.0,
        )
        .unwrap();
        let order = select_views(&scene, 1, &[cam.clone(), side.clone()], OCCLUSION_PADDING).unwrap();
        assert_eq!(order, vec![(1, 0), (0, 1)]);
        let single = select_views(&scene, 1, std::slice::from_ref(&cam), OCCLUSION_PADDING).unwrap();
        assert_eq!(single[0].0, 0);
        let same = select_views(&scene, 1, &[side.clone(), side], OCCLUSION_PADDING).unwrap();
        assert_eq!(same, vec![(0, 0), (1, 0)]);
    }
}
