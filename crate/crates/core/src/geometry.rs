//! Equirectangular panorama ↔ pinhole perspective view geometry.
//!
//! World frame: `+z` forward (panorama center), `+x` right, `+y` up.
//! A view with yaw `ψ` and pitch `θ` looks along
//! `(sin ψ cos θ, sin θ, cos ψ cos θ)`; yaw 90° therefore faces `+x`.
//!
//! Pixel coordinates are continuous: `(0, 0)` is the top-left corner of the
//! top-left pixel and pixel `(i, j)` has its center at `(i + 0.5, j + 0.5)`.
//! Panorama longitude 0 sits at `x = width / 2` and the seam (±180°) at
//! `x = 0 ≡ width`.

use std::f64::consts::{PI, TAU};

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Axis-aligned box in some pixel space.
///
/// Panorama-space boxes that straddle the longitude seam are stored wrapped,
/// with `x_min > x_max`; see [`BoundingBox::is_seam_crossing`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Builds a non-wrapped box, rejecting degenerate or non-finite extents.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self { x_min, y_min, x_max, y_max };
        b.check()?;
        Ok(b)
    }

    /// COCO `[x, y, w, h]` layout.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn check(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::Geometry(format!("non-finite box {self:?}")));
        }
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(Error::Geometry(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
    }

    pub fn is_seam_crossing(&self) -> bool {
        self.x_min > self.x_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    /// Width along x for a wrapped panorama box on a panorama `pano_width` wide.
    pub fn wrapped_width(&self, pano_width: f64) -> f64 {
        if self.is_seam_crossing() {
            self.x_max + pano_width - self.x_min
        } else {
            self.width()
        }
    }

    /// Unwraps a seam-crossing box so that `x_max` exceeds the panorama width.
    pub fn unwrapped(&self, pano_width: f64) -> Self {
        if self.is_seam_crossing() {
            Self { x_max: self.x_max + pano_width, ..*self }
        } else {
            *self
        }
    }

    pub fn shifted_x(&self, dx: f64) -> Self {
        Self { x_min: self.x_min + dx, x_max: self.x_max + dx, ..*self }
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }
}

/// Dimensions of a full-sphere equirectangular panorama.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanoFrame {
    pub width: u32,
    pub height: u32,
}

impl PanoFrame {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if height == 0 || width != 2 * height {
            return Err(Error::Geometry(format!(
                "equirectangular panorama must be 2:1, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    fn w(&self) -> f64 {
        f64::from(self.width)
    }

    fn h(&self) -> f64 {
        f64::from(self.height)
    }
}

/// Panorama raster plus identity.
#[derive(Debug, Clone)]
pub struct EquirectImage {
    pub image_id: String,
    frame: PanoFrame,
    raster: RgbImage,
}

impl EquirectImage {
    pub fn new(image_id: impl Into<String>, raster: RgbImage) -> Result<Self> {
        let frame = PanoFrame::new(raster.width(), raster.height())?;
        Ok(Self { image_id: image_id.into(), frame, raster })
    }

    pub fn open(image_id: impl Into<String>, path: &std::path::Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Self::new(image_id, img)
    }

    pub fn frame(&self) -> PanoFrame {
        self.frame
    }

    pub fn raster(&self) -> &RgbImage {
        &self.raster
    }

    pub fn width(&self) -> u32 {
        self.frame.width
    }

    pub fn height(&self) -> u32 {
        self.frame.height
    }
}

/// A pinhole sub-view of the panorama sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerspectiveView {
    #[serde(rename = "id")]
    pub view_id: String,
    /// Degrees; positive turns right.
    pub yaw: f64,
    /// Degrees; positive looks up.
    #[serde(default)]
    pub pitch: f64,
    /// Horizontal field of view in degrees.
    pub fov: f64,
    pub width: u32,
    pub height: u32,
}

impl PerspectiveView {
    pub fn new(view_id: impl Into<String>, yaw: f64, pitch: f64, fov: f64, width: u32, height: u32) -> Result<Self> {
        let v = Self { view_id: view_id.into(), yaw, pitch, fov, width, height };
        v.check()?;
        Ok(v)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(Error::Geometry(format!(
                "view {}: fov must lie in (0, 180), got {}",
                self.view_id, self.fov
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Geometry(format!("view {} has zero size", self.view_id)));
        }
        if !(self.yaw.is_finite() && self.pitch.is_finite()) {
            return Err(Error::Geometry(format!("view {} has non-finite angles", self.view_id)));
        }
        if self.pitch.abs() > 90.0 {
            return Err(Error::Geometry(format!("view {} pitch out of [-90, 90]", self.view_id)));
        }
        Ok(())
    }

    /// Four 90° views at yaw 0/90/180/270 with the given square resolution.
    pub fn default_quad(size: u32) -> Vec<Self> {
        [0.0, 90.0, 180.0, 270.0]
            .iter()
            .enumerate()
            .map(|(i, &yaw)| Self {
                view_id: format!("v{i}"),
                yaw,
                pitch: 0.0,
                fov: 90.0,
                width: size,
                height: size,
            })
            .collect()
    }

    fn focal(&self) -> f64 {
        f64::from(self.width) / 2.0 / (self.fov.to_radians() / 2.0).tan()
    }

    pub fn bounds(&self) -> BoundingBox {
        BoundingBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: f64::from(self.width),
            y_max: f64::from(self.height),
        }
    }

    fn rotation(&self) -> Rotation {
        Rotation::new(self.yaw.to_radians(), self.pitch.to_radians())
    }
}

#[derive(Clone, Copy)]
struct Rotation {
    sy: f64,
    cy: f64,
    sp: f64,
    cp: f64,
}

impl Rotation {
    fn new(yaw: f64, pitch: f64) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        Self { sy, cy, sp, cp }
    }

    /// camera → world: pitch about x, then yaw about y.
    fn apply(&self, d: Vec3) -> Vec3 {
        let y = d[1] * self.cp + d[2] * self.sp;
        let z = -d[1] * self.sp + d[2] * self.cp;
        let x = d[0];
        [x * self.cy + z * self.sy, y, -x * self.sy + z * self.cy]
    }

    fn invert(&self, d: Vec3) -> Vec3 {
        let x = d[0] * self.cy - d[2] * self.sy;
        let z = d[0] * self.sy + d[2] * self.cy;
        let y = d[1];
        [x, y * self.cp - z * self.sp, y * self.sp + z * self.cp]
    }
}

fn normalize(d: Vec3) -> Option<Vec3> {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some([d[0] / n, d[1] / n, d[2] / n])
}

fn ray_camera(view: &PerspectiveView, focal: f64, x: f64, y: f64) -> Vec3 {
    let cx = f64::from(view.width) / 2.0;
    let cy = f64::from(view.height) / 2.0;
    [(x - cx) / focal, -(y - cy) / focal, 1.0]
}

/// Unit world direction of the ray through view pixel `(x, y)`.
pub fn view_pixel_to_direction(view: &PerspectiveView, px: (f64, f64)) -> Result<Vec3> {
    view.check()?;
    let (x, y) = px;
    let (w, h) = (f64::from(view.width), f64::from(view.height));
    if !(x >= 0.0 && x <= w && y >= 0.0 && y <= h) {
        return Err(Error::Geometry(format!(
            "pixel ({x}, {y}) outside view {} ({w}x{h})",
            view.view_id
        )));
    }
    let cam = ray_camera(view, view.focal(), x, y);
    let d = view.rotation().apply(cam);
    normalize(d).ok_or_else(|| Error::Geometry("degenerate ray".into()))
}

/// Projects a world direction into view pixel coordinates.
///
/// Returns `None` for directions at or behind the image plane. The result is
/// not bounds-checked.
pub fn direction_to_view_pixel(view: &PerspectiveView, dir: Vec3) -> Option<(f64, f64)> {
    let cam = view.rotation().invert(dir);
    if cam[2] <= 1e-12 {
        return None;
    }
    let f = view.focal();
    let cx = f64::from(view.width) / 2.0;
    let cy = f64::from(view.height) / 2.0;
    Some((cx + f * cam[0] / cam[2], cy - f * cam[1] / cam[2]))
}

fn lon_lat(dir: Vec3) -> (f64, f64) {
    let lon = dir[0].atan2(dir[2]);
    let lat = dir[1].clamp(-1.0, 1.0).asin();
    (lon, lat)
}

fn lon_to_x(lon: f64, frame: PanoFrame) -> f64 {
    (lon / TAU + 0.5) * frame.w()
}

fn lat_to_y(lat: f64, frame: PanoFrame) -> f64 {
    (0.5 - lat / PI) * frame.h()
}

/// Equirectangular pixel of a world direction, in `[0, width) × [0, height)`.
pub fn direction_to_pano_pixel(dir: Vec3, frame: PanoFrame) -> Result<(f64, f64)> {
    let n = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Geometry("direction must be a non-zero finite vector".into()));
    }
    let (lon, lat) = lon_lat([dir[0] / n, dir[1] / n, dir[2] / n]);
    let x = lon_to_x(lon, frame).rem_euclid(frame.w());
    let y = lat_to_y(lat, frame).clamp(0.0, frame.h().next_down());
    // rem_euclid can round up to exactly w for tiny negative inputs
    let x = if x >= frame.w() { 0.0 } else { x };
    Ok((x, y))
}

/// Unit direction of a panorama pixel position.
pub fn pano_pixel_to_direction(frame: PanoFrame, px: (f64, f64)) -> Vec3 {
    let lon = (px.0 / frame.w() - 0.5) * TAU;
    let lat = (0.5 - px.1 / frame.h()) * PI;
    let (sl, cl) = lon.sin_cos();
    let (sp, cp) = lat.sin_cos();
    [cp * sl, sp, cp * cl]
}

/// Projects a view-space box to a panorama-space axis-aligned hull.
///
/// The hull spans the projected corners and edge midpoints. Longitudes are
/// unwrapped around the box center before taking extremes, so a box that
/// straddles the seam comes back with `x_min > x_max`. A box containing a
/// pole spans the full panorama width.
pub fn view_bbox_to_pano(view: &PerspectiveView, bbox: &BoundingBox, frame: PanoFrame) -> Result<BoundingBox> {
    bbox.check()?;
    let b = view.bounds();
    if bbox.x_min < b.x_min || bbox.y_min < b.y_min || bbox.x_max > b.x_max || bbox.y_max > b.y_max {
        return Err(Error::Geometry(format!("box {bbox:?} outside view {}", view.view_id)));
    }
    let (cx, cy) = bbox.center();
    let xs = [bbox.x_min, cx, bbox.x_max];
    let ys = [bbox.y_min, cy, bbox.y_max];
    let (ref_lon, _) = lon_lat(view_pixel_to_direction(view, (cx, cy))?);

    let mut rel_min = f64::INFINITY;
    let mut rel_max = f64::NEG_INFINITY;
    let mut lat_min = f64::INFINITY;
    let mut lat_max = f64::NEG_INFINITY;
    for (i, &x) in xs.iter().enumerate() {
        for (j, &y) in ys.iter().enumerate() {
            if i == 1 && j == 1 {
                continue;
            }
            let (lon, lat) = lon_lat(view_pixel_to_direction(view, (x, y))?);
            let rel = wrap_pi(lon - ref_lon);
            rel_min = rel_min.min(rel);
            rel_max = rel_max.max(rel);
            lat_min = lat_min.min(lat);
            lat_max = lat_max.max(lat);
        }
    }

    let mut full_width = false;
    for pole in [[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]] {
        if let Some((px, py)) = direction_to_view_pixel(view, pole) {
            if px >= bbox.x_min && px <= bbox.x_max && py >= bbox.y_min && py <= bbox.y_max {
                full_width = true;
                if pole[1] > 0.0 {
                    lat_max = PI / 2.0;
                } else {
                    lat_min = -PI / 2.0;
                }
            }
        }
    }

    let y_min = lat_to_y(lat_max, frame).clamp(0.0, frame.h());
    let y_max = lat_to_y(lat_min, frame).clamp(0.0, frame.h());
    let w = frame.w();
    let (x_min, x_max) = if full_width || rel_max - rel_min >= TAU {
        (0.0, w)
    } else {
        let ux_min = lon_to_x(ref_lon + rel_min, frame);
        let ux_max = lon_to_x(ref_lon + rel_max, frame);
        let shift = (ux_min / w).floor() * w;
        let (ux_min, ux_max) = (ux_min - shift, ux_max - shift);
        if ux_max <= w {
            (ux_min, ux_max)
        } else {
            (ux_min, ux_max - w)
        }
    };
    Ok(BoundingBox { x_min, y_min, x_max, y_max })
}

/// Reprojects a panorama-space box into a view by sampling its boundary.
///
/// Returns the clipped hull, or `None` when no boundary sample lands in front
/// of the view.
pub fn pano_bbox_to_view(view: &PerspectiveView, bbox: &BoundingBox, frame: PanoFrame) -> Option<BoundingBox> {
    const SAMPLES: usize = 32;
    let unwrapped = bbox.unwrapped(frame.w());
    let mut hull: Option<BoundingBox> = None;
    for i in 0..=SAMPLES {
        let t = i as f64 / SAMPLES as f64;
        let x = unwrapped.x_min + t * unwrapped.width();
        let y = unwrapped.y_min + t * unwrapped.height();
        let points = [
            (x, unwrapped.y_min),
            (x, unwrapped.y_max),
            (unwrapped.x_min, y),
            (unwrapped.x_max, y),
        ];
        for p in points {
            let dir = pano_pixel_to_direction(frame, p);
            if let Some((vx, vy)) = direction_to_view_pixel(view, dir) {
                let h = hull.get_or_insert(BoundingBox { x_min: vx, y_min: vy, x_max: vx, y_max: vy });
                h.x_min = h.x_min.min(vx);
                h.y_min = h.y_min.min(vy);
                h.x_max = h.x_max.max(vx);
                h.y_max = h.y_max.max(vy);
            }
        }
    }
    let b = view.bounds();
    hull.map(|h| BoundingBox {
        x_min: h.x_min.clamp(0.0, b.x_max),
        y_min: h.y_min.clamp(0.0, b.y_max),
        x_max: h.x_max.clamp(0.0, b.x_max),
        y_max: h.y_max.clamp(0.0, b.y_max),
    })
}

fn wrap_pi(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(TAU) - PI;
    if w <= -PI {
        w + TAU
    } else {
        w
    }
}

fn sample_bilinear(img: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let fx = x - 0.5;
    let fy = y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let xi0 = (x0 as i64).rem_euclid(w);
    let xi1 = (x0 as i64 + 1).rem_euclid(w);
    let yi0 = (y0 as i64).clamp(0, h - 1);
    let yi1 = (y0 as i64 + 1).clamp(0, h - 1);
    let p00 = img.get_pixel(xi0 as u32, yi0 as u32);
    let p10 = img.get_pixel(xi1 as u32, yi0 as u32);
    let p01 = img.get_pixel(xi0 as u32, yi1 as u32);
    let p11 = img.get_pixel(xi1 as u32, yi1 as u32);
    let mut out = [0u8; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let top = f64::from(p00[c]) * (1.0 - tx) + f64::from(p10[c]) * tx;
        let bottom = f64::from(p01[c]) * (1.0 - tx) + f64::from(p11[c]) * tx;
        *o = (top * (1.0 - ty) + bottom * ty).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

/// Renders one perspective view with bilinear sampling.
pub fn render_view(pano: &EquirectImage, view: &PerspectiveView) -> Result<RgbImage> {
    view.check()?;
    let frame = pano.frame();
    let rot = view.rotation();
    let focal = view.focal();
    let (w, h) = (view.width, view.height);
    let mut buf = vec![0u8; w as usize * h as usize * 3];
    buf.par_chunks_mut(w as usize * 3).enumerate().for_each(|(row, out)| {
        let y = row as f64 + 0.5;
        for col in 0..w as usize {
            let x = col as f64 + 0.5;
            let dir = rot.apply(ray_camera(view, focal, x, y));
            let (lon, lat) = lon_lat(normalize(dir).unwrap_or([0.0, 0.0, 1.0]));
            let px = lon_to_x(lon, frame);
            let py = lat_to_y(lat, frame);
            let p = sample_bilinear(pano.raster(), px, py);
            out[col * 3..col * 3 + 3].copy_from_slice(&p.0);
        }
    });
    RgbImage::from_raw(w, h, buf).ok_or_else(|| Error::Image("render buffer size mismatch".into()))
}

/// Splits a panorama into the given perspective views.
pub fn split_panorama(pano: &EquirectImage, views: &[PerspectiveView]) -> Result<Vec<(String, RgbImage)>> {
    if views.is_empty() {
        return Err(Error::Geometry("no views to render".into()));
    }
    views
        .iter()
        .map(|v| Ok((v.view_id.clone(), render_view(pano, v)?)))
        .collect()
}

/// Integer pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }
}

/// The pixel rectangle covered by `bbox` inflated by `pad_fraction` of its
/// size on every side, clipped to an image of `width × height`.
pub fn crop_rect(width: u32, height: u32, bbox: &BoundingBox, pad_fraction: f64) -> Result<PixelRect> {
    bbox.check()?;
    if !(pad_fraction >= 0.0 && pad_fraction.is_finite()) {
        return Err(Error::Geometry(format!("pad fraction must be >= 0, got {pad_fraction}")));
    }
    let px = bbox.width() * pad_fraction;
    let py = bbox.height() * pad_fraction;
    let x0 = (bbox.x_min - px).floor().clamp(0.0, f64::from(width)) as u32;
    let y0 = (bbox.y_min - py).floor().clamp(0.0, f64::from(height)) as u32;
    let x1 = (bbox.x_max + px).ceil().clamp(0.0, f64::from(width)) as u32;
    let y1 = (bbox.y_max + py).ceil().clamp(0.0, f64::from(height)) as u32;
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::Geometry(format!("box {bbox:?} has zero area after clipping")));
    }
    Ok(PixelRect { x0, y0, x1, y1 })
}

/// Cuts the padded box out of `image`.
pub fn crop(image: &RgbImage, bbox: &BoundingBox, pad_fraction: f64) -> Result<RgbImage> {
    let r = crop_rect(image.width(), image.height(), bbox, pad_fraction)?;
    Ok(image::imageops::crop_imm(image, r.x0, r.y0, r.width(), r.height()).to_image())
}

/// Crops a panorama-space box, stitching across the seam when it wraps.
pub fn crop_pano(pano: &EquirectImage, bbox: &BoundingBox, pad_fraction: f64) -> Result<RgbImage> {
    if !bbox.is_seam_crossing() {
        return crop(pano.raster(), bbox, pad_fraction);
    }
    let w = pano.frame().w();
    let unwrapped = bbox.unwrapped(w);
    unwrapped.check()?;
    let px = unwrapped.width() * pad_fraction;
    let py = unwrapped.height() * pad_fraction;
    let x0 = (unwrapped.x_min - px).floor() as i64;
    let x1 = ((unwrapped.x_max + px).ceil() as i64).min(x0 + pano.width() as i64);
    let y0 = (unwrapped.y_min - py).floor().clamp(0.0, f64::from(pano.height())) as u32;
    let y1 = (unwrapped.y_max + py).ceil().clamp(0.0, f64::from(pano.height())) as u32;
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::Geometry(format!("box {bbox:?} has zero area after clipping")));
    }
    let out_w = (x1 - x0) as u32;
    let src = pano.raster();
    let wi = pano.width() as i64;
    Ok(RgbImage::from_fn(out_w, y1 - y0, |i, j| {
        let sx = (x0 + i64::from(i)).rem_euclid(wi) as u32;
        *src.get_pixel(sx, y0 + j)
    }))
}
