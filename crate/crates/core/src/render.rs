//! Photometric renderer for the internal fisheye camera.
//!
//! Every in-mask pixel casts a ray through an equidistant fisheye model from
//! the camera inside the shell. Rays hit the inner side of the coated
//! membrane, which is shaded by the LED ring under the collimator:
//!
//! ```text
//! L_c = sum_leds albedo * color_c * gain * max(0, n.l) * cos^m(beam) / d^2
//!     + 0.2 * spec * (n.h)^32 * color_c * gain * cos^m(beam) / d^2
//! ```
//!
//! Radiance is converted to 8 bits through a fixed exposure and a 1/2.2
//! gamma. Contacts only touch a small part of the frame, so the renderer
//! keeps the undeformed hit of every pixel and re-casts only the pixels whose
//! hit lies near the deformed region; the rest is copied from the reference.

use std::f64::consts::{FRAC_PI_2, TAU};
use std::sync::{Arc, OnceLock};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{contact_frame, ShellGeometry, SurfacePoint, Uv};
use crate::image::{in_circle, quantize, TactileImage};
use crate::mechanics::{Deformation, UvGrid};

pub const IMAGE_SIZE: usize = 480;
pub const RAW_WIDTH: usize = 640;
pub const RAW_HEIGHT: usize = 480;
pub const FIELD_OF_VIEW_DEG: f64 = 160.0;
pub const MASK_RADIUS: f64 = 240.0;
pub const LED_COUNT: usize = 9;

const SPECULAR_WEIGHT: f64 = 0.2;
const SPECULAR_EXPONENT: i32 = 32;
const EXPOSURE: f64 = 90.0;
const GAMMA: f64 = 2.2;
const NOMINAL_ALBEDO: f64 = 0.9;

/// Smallest deformation grid the renderer accepts.
pub const MIN_GRID: UvGrid = UvGrid {
    n_azimuth: 256,
    n_axial: 128,
};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("deformation grid {0}x{1} is coarser than the 256x128 minimum")]
    GridTooCoarse(usize, usize),
    #[error("instance has markers disabled")]
    MarkersDisabled,
    #[error("instance {0} has {1} LED gains, expected {LED_COUNT}")]
    LedCount(String, usize),
}

/// Equidistant fisheye: a ray at angle `theta` from the optical axis lands
/// `f_theta * theta` pixels from the principal point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub position: [f64; 3],
    /// Pixels per radian.
    pub f_theta: f64,
    /// Principal point in the masked frame, pixels.
    pub principal: [f64; 2],
    pub size: usize,
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            position: [0.0, 0.0, -2.0],
            f_theta: nominal_f_theta(),
            principal: [MASK_RADIUS, MASK_RADIUS],
            size: IMAGE_SIZE,
        }
    }
}

/// Focal scale putting the edge of the 160 degree field on the mask circle.
pub fn nominal_f_theta() -> f64 {
    MASK_RADIUS / (FIELD_OF_VIEW_DEG * 0.5).to_radians()
}

impl CameraModel {
    pub fn origin(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    /// Unit ray through the centre of pixel `(x, y)`.
    pub fn pixel_ray(&self, x: f64, y: f64) -> Vector3<f64> {
        let dx = x - self.principal[0];
        let dy = y - self.principal[1];
        let r = dx.hypot(dy);
        let theta = r / self.f_theta;
        if r == 0.0 {
            return Vector3::z();
        }
        let s = theta.sin();
        Vector3::new(s * dx / r, s * dy / r, theta.cos())
    }

    /// Pixel coordinates of a world point, or `None` behind the lens.
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        let v = p - self.origin();
        let n = v.norm();
        if n == 0.0 {
            return None;
        }
        let theta = (v.z / n).clamp(-1.0, 1.0).acos();
        if theta >= FRAC_PI_2 + 0.5 {
            return None;
        }
        let rho = v.x.hypot(v.y);
        let (c, s) = if rho > 0.0 { (v.x / rho, v.y / rho) } else { (1.0, 0.0) };
        let r = self.f_theta * theta;
        Some([self.principal[0] + r * c, self.principal[1] + r * s])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Illumination {
    #[serde(rename = "white")]
    White,
    #[serde(rename = "rrrgggbbb")]
    Rrrgggbbb,
    #[serde(rename = "rgbrgbrgb")]
    Rgbrgbrgb,
}

impl Illumination {
    pub const ALL: [Illumination; 3] = [
        Illumination::White,
        Illumination::Rrrgggbbb,
        Illumination::Rgbrgbrgb,
    ];

    pub fn color(&self, led: usize) -> [f64; 3] {
        const PRIMARIES: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        match self {
            Illumination::White => [1.0, 1.0, 1.0],
            Illumination::Rrrgggbbb => PRIMARIES[(led / 3) % 3],
            Illumination::Rgbrgbrgb => PRIMARIES[led % 3],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Illumination::White => "white",
            Illumination::Rrrgggbbb => "rrrgggbbb",
            Illumination::Rgbrgbrgb => "rgbrgbrgb",
        }
    }
}

/// Annular LED board under the collimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedRing {
    pub pattern: Illumination,
    pub ring_radius: f64,
    pub ring_height: f64,
    /// Relative intensity per LED, counter-clockwise from +x.
    pub intensity: Vec<f64>,
    /// Collimation exponent `m` of the `cos^m` beam profile.
    pub beam_exponent: f64,
    /// Height on the sensor axis the LED beams are aimed at.
    pub aim_height: f64,
}

impl LedRing {
    pub fn new(pattern: Illumination) -> Self {
        Self {
            pattern,
            ring_radius: 13.5,
            ring_height: -1.0,
            intensity: vec![1.0; LED_COUNT],
            beam_exponent: 8.0,
            aim_height: 6.0,
        }
    }

    pub fn position(&self, k: usize) -> Vector3<f64> {
        let a = TAU * k as f64 / LED_COUNT as f64;
        Vector3::new(self.ring_radius * a.cos(), self.ring_radius * a.sin(), self.ring_height)
    }

    pub fn beam_axis(&self, k: usize) -> Vector3<f64> {
        (Vector3::new(0.0, 0.0, self.aim_height) - self.position(k)).normalize()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkerRing {
    pub axial: f64,
    pub count: usize,
    /// Azimuth of the first dot, rad.
    pub phase: f64,
}

/// Sparse dark dots printed on the elastomer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerLayout {
    pub enabled: bool,
    pub rings: Vec<MarkerRing>,
    pub apex_dot: bool,
    pub dot_radius: f64,
    pub albedo: f64,
}

impl MarkerLayout {
    /// Four rings of 6, 8, 10 and 12 dots from the apex down plus one apex
    /// dot: 37 dots.
    pub fn standard() -> Self {
        let counts = [6usize, 8, 10, 12];
        let axials = [0.85, 0.65, 0.45, 0.24];
        let rings = counts
            .iter()
            .zip(axials)
            .enumerate()
            .map(|(i, (&count, axial))| MarkerRing {
                axial,
                count,
                phase: if i % 2 == 0 { 0.0 } else { 0.5 * TAU / count as f64 },
            })
            .collect();
        Self {
            enabled: true,
            rings,
            apex_dot: true,
            dot_radius: 0.5,
            albedo: 0.15,
        }
    }

    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::standard()
        }
    }

    pub fn count(&self) -> usize {
        if !self.enabled {
            return 0;
        }
        self.rings.iter().map(|r| r.count).sum::<usize>() + usize::from(self.apex_dot)
    }

    /// Undisturbed dot centres in surface parameters.
    pub fn nominal_uvs(&self) -> Vec<Uv> {
        if !self.enabled {
            return Vec::new();
        }
        let mut uvs: Vec<Uv> = self
            .rings
            .iter()
            .flat_map(|r| {
                (0..r.count).map(move |k| {
                    Uv::new(
                        crate::geometry::wrap_azimuth(r.phase + TAU * k as f64 / r.count as f64),
                        r.axial,
                    )
                })
            })
            .collect();
        if self.apex_dot {
            uvs.push(Uv::new(0.0, 1.0));
        }
        uvs
    }
}

/// Frozen fabrication variability of one sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbations {
    pub led_gain: Vec<f64>,
    pub rgb_balance: [f64; 3],
    pub coating_albedo: f64,
    /// Per-dot tangential offset in the dot's contact frame, mm.
    pub marker_jitter: Vec<[f64; 2]>,
    /// Principal point offset, px.
    pub camera_offset: [f64; 2],
    /// Multiplier on the nominal focal scale.
    pub f_theta_scale: f64,
}

impl Perturbations {
    pub fn none(marker_count: usize) -> Self {
        Self {
            led_gain: vec![1.0; LED_COUNT],
            rgb_balance: [1.0; 3],
            coating_albedo: NOMINAL_ALBEDO,
            marker_jitter: vec![[0.0, 0.0]; marker_count],
            camera_offset: [0.0, 0.0],
            f_theta_scale: 1.0,
        }
    }

    /// Draws every perturbation once from `seed`.
    pub fn sample(marker_count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let led_gain = (0..LED_COUNT).map(|_| rng.random_range(0.85..1.15)).collect();
        let rgb_balance = [
            rng.random_range(0.9..1.1),
            rng.random_range(0.9..1.1),
            rng.random_range(0.9..1.1),
        ];
        let coating_albedo = rng.random_range(0.8..1.0);
        let jitter = Normal::new(0.0, 0.2).expect("valid sigma");
        let marker_jitter = (0..marker_count)
            .map(|_| [jitter.sample(&mut rng), jitter.sample(&mut rng)])
            .collect();
        // Offset uniform over the disc of radius 3 px.
        let r = 3.0 * rng.random::<f64>().sqrt();
        let a = rng.random::<f64>() * TAU;
        let f_theta_scale = rng.random_range(0.98..1.02);
        Self {
            led_gain,
            rgb_balance,
            coating_albedo,
            marker_jitter,
            camera_offset: [r * a.cos(), r * a.sin()],
            f_theta_scale,
        }
    }
}

/// One simulated, fabricated sensor.
#[derive(Debug, Serialize, Deserialize)]
pub struct SensorInstance {
    pub id: String,
    pub leds: LedRing,
    pub markers: MarkerLayout,
    pub perturbations: Perturbations,
    pub seed: Option<u64>,
    #[serde(skip)]
    cache: OnceLock<Arc<Renderer>>,
}

impl Clone for SensorInstance {
    fn clone(&self) -> Self {
        let cache = OnceLock::new();
        if let Some(r) = self.cache.get() {
            let _ = cache.set(Arc::clone(r));
        }
        Self {
            id: self.id.clone(),
            leds: self.leds.clone(),
            markers: self.markers.clone(),
            perturbations: self.perturbations.clone(),
            seed: self.seed,
            cache,
        }
    }
}

impl PartialEq for SensorInstance {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.leds == other.leds
            && self.markers == other.markers
            && self.perturbations == other.perturbations
            && self.seed == other.seed
    }
}

impl SensorInstance {
    /// Sensor exactly as designed, with no fabrication variability.
    pub fn nominal(id: impl Into<String>, pattern: Illumination, markers: bool) -> Self {
        let markers = if markers { MarkerLayout::standard() } else { MarkerLayout::disabled() };
        let perturbations = Perturbations::none(markers.count());
        Self {
            id: id.into(),
            leds: LedRing::new(pattern),
            markers,
            perturbations,
            seed: None,
            cache: OnceLock::new(),
        }
    }

    /// Sensor with perturbations sampled from `seed`.
    pub fn fabricate(id: impl Into<String>, pattern: Illumination, markers: bool, seed: u64) -> Self {
        let mut s = Self::nominal(id, pattern, markers);
        s.perturbations = Perturbations::sample(s.markers.count(), seed);
        s.seed = Some(seed);
        s
    }

    pub fn camera(&self) -> CameraModel {
        let base = CameraModel::default();
        CameraModel {
            f_theta: base.f_theta * self.perturbations.f_theta_scale,
            principal: [
                base.principal[0] + self.perturbations.camera_offset[0],
                base.principal[1] + self.perturbations.camera_offset[1],
            ],
            ..base
        }
    }

    /// World positions of the (jittered) marker dots.
    pub fn marker_points(&self, geom: &ShellGeometry) -> Vec<SurfacePoint> {
        self.markers
            .nominal_uvs()
            .into_iter()
            .enumerate()
            .map(|(k, uv)| {
                let sp = geom.surface_point_unchecked(uv);
                let j = self.perturbations.marker_jitter.get(k).copied().unwrap_or([0.0, 0.0]);
                if j == [0.0, 0.0] {
                    return sp;
                }
                let f = contact_frame(&sp);
                let moved = sp.position + f.x_axis() * j[0] + f.y_axis() * j[1];
                geom.project_unchecked(&moved)
            })
            .collect()
    }

    /// Renderer for this instance, built once per geometry and cached.
    pub fn renderer(&self, geom: &ShellGeometry) -> Result<Arc<Renderer>, RenderError> {
        if let Some(r) = self.cache.get() {
            if r.geom == *geom {
                return Ok(Arc::clone(r));
            }
            return Renderer::new(geom, self).map(Arc::new);
        }
        let r = Arc::new(Renderer::new(geom, self)?);
        let _ = self.cache.set(Arc::clone(&r));
        Ok(Arc::clone(self.cache.get().unwrap_or(&r)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

#[derive(Debug, Clone, Copy)]
struct PixelRay {
    index: u32,
    dir: Vector3<f64>,
    hit: Option<(f64, SurfacePoint)>,
}

/// Precomputed rays and reference frame of one instance on one geometry.
#[derive(Debug)]
pub struct Renderer {
    pub geom: ShellGeometry,
    pub camera: CameraModel,
    leds: Vec<Led>,
    albedo: f64,
    balance: [f64; 3],
    markers: Vec<SurfacePoint>,
    marker_radius: f64,
    marker_albedo: f64,
    rays: Vec<PixelRay>,
    reference: TactileImage,
}

#[derive(Debug, Clone, Copy)]
struct Led {
    position: Vector3<f64>,
    axis: Vector3<f64>,
    color: [f64; 3],
    exponent: f64,
}

/// First intersection of a ray from inside the shell with the undeformed
/// membrane.
pub fn intersect_membrane(geom: &ShellGeometry, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, SurfacePoint)> {
    let r = geom.radius();
    let h = geom.cyl_height;
    // Cylinder wall; the origin is assumed inside the wall radius.
    let a = dir.x * dir.x + dir.y * dir.y;
    if a > 0.0 {
        let b = origin.x * dir.x + origin.y * dir.y;
        let c = origin.x * origin.x + origin.y * origin.y - r * r;
        let disc = b * b - a * c;
        if disc >= 0.0 {
            let t = (-b + disc.sqrt()) / a;
            let z = origin.z + t * dir.z;
            if t > 0.0 && (0.0..=h).contains(&z) {
                let p = origin + dir * t;
                return Some((t, geom.project_unchecked(&p)));
            }
        }
    }
    let oc = origin - geom.hemisphere_center();
    let b = oc.dot(dir);
    let c = oc.norm_squared() - r * r;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // Far root: the ray leaves the sphere through the cap from inside the shell.
    let t = -b + sq;
    if t <= 0.0 {
        return None;
    }
    let p = origin + dir * t;
    if p.z < h {
        return None;
    }
    Some((t, geom.project_unchecked(&p)))
}

impl Renderer {
    pub fn new(geom: &ShellGeometry, instance: &SensorInstance) -> Result<Self, RenderError> {
        if instance.leds.intensity.len() != LED_COUNT || instance.perturbations.led_gain.len() != LED_COUNT {
            return Err(RenderError::LedCount(
                instance.id.clone(),
                instance.perturbations.led_gain.len(),
            ));
        }
        let camera = instance.camera();
        let leds = (0..LED_COUNT)
            .map(|k| {
                let gain = instance.leds.intensity[k] * instance.perturbations.led_gain[k];
                let c = instance.leds.pattern.color(k);
                Led {
                    position: instance.leds.position(k),
                    axis: instance.leds.beam_axis(k),
                    color: [c[0] * gain, c[1] * gain, c[2] * gain],
                    exponent: instance.leds.beam_exponent,
                }
            })
            .collect();
        let origin = camera.origin();
        let size = camera.size;
        let rays: Vec<PixelRay> = (0..size * size)
            .into_par_iter()
            .filter_map(|idx| {
                let (x, y) = (idx % size, idx / size);
                if !in_circle(size, x, y) {
                    return None;
                }
                let dir = camera.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
                Some(PixelRay {
                    index: idx as u32,
                    dir,
                    hit: intersect_membrane(geom, &origin, &dir),
                })
            })
            .collect();
        let mut r = Self {
            geom: *geom,
            camera,
            leds,
            albedo: instance.perturbations.coating_albedo,
            balance: instance.perturbations.rgb_balance,
            markers: if instance.markers.enabled { instance.marker_points(geom) } else { Vec::new() },
            marker_radius: instance.markers.dot_radius,
            marker_albedo: instance.markers.albedo,
            rays,
            reference: TactileImage::black(size, instance.id.clone()),
        };
        let mut reference = TactileImage::black(size, instance.id.clone());
        let shaded: Vec<(u32, [u8; 3])> = r
            .rays
            .par_iter()
            .filter_map(|ray| {
                let (t, sp) = ray.hit?;
                Some((ray.index, r.shade_undeformed(t, &sp)))
            })
            .collect();
        for (idx, rgb) in shaded {
            let o = idx as usize * 3;
            reference.data[o..o + 3].copy_from_slice(&rgb);
        }
        r.reference = reference;
        Ok(r)
    }

    pub fn reference(&self) -> &TactileImage {
        &self.reference
    }

    pub fn marker_points(&self) -> &[SurfacePoint] {
        &self.markers
    }

    fn shade_undeformed(&self, t: f64, sp: &SurfacePoint) -> [u8; 3] {
        let footprint = t / self.camera.f_theta;
        self.shade(&sp.position, &sp.normal, &sp.position, footprint)
    }

    /// Marker ink coverage of the material point `m` for a pixel covering
    /// `footprint` mm.
    fn marker_coverage(&self, m: &Vector3<f64>, footprint: f64) -> f64 {
        let w = footprint.max(1e-6);
        let reach = self.marker_radius + w;
        let mut cov: f64 = 0.0;
        for dot in &self.markers {
            let d = (dot.position - m).norm();
            if d < reach {
                cov = cov.max(((self.marker_radius - d) / w + 0.5).clamp(0.0, 1.0));
            }
        }
        cov
    }

    /// Shades a surface point at `p` with outward normal `n_out` showing the
    /// material that rests at `material`.
    fn shade(&self, p: &Vector3<f64>, n_out: &Vector3<f64>, material: &Vector3<f64>, footprint: f64) -> [u8; 3] {
        let n = -n_out;
        let view = (self.camera.origin() - p).normalize();
        let ink = self.marker_coverage(material, footprint);
        let albedo = self.albedo * (1.0 - ink) + self.marker_albedo * ink;
        // Ink is matte.
        let spec_weight = SPECULAR_WEIGHT * (1.0 - ink);
        let mut rad = [0.0f64; 3];
        for led in &self.leds {
            let to_led = led.position - p;
            let d2 = to_led.norm_squared();
            let l = to_led / d2.sqrt();
            let lambert = n.dot(&l);
            if lambert <= 0.0 {
                continue;
            }
            let beam = (-l).dot(&led.axis);
            if beam <= 0.0 {
                continue;
            }
            let falloff = beam.powf(led.exponent) / d2;
            let half = (l + view).normalize();
            let spec = n.dot(&half).max(0.0).powi(SPECULAR_EXPONENT);
            let k = (albedo * lambert + spec_weight * spec) * falloff;
            for c in 0..3 {
                rad[c] += k * led.color[c];
            }
        }
        let mut out = [0u8; 3];
        for c in 0..3 {
            let v = (EXPOSURE * self.balance[c] * rad[c]).max(0.0);
            out[c] = quantize(255.0 * v.powf(1.0 / GAMMA).min(1.0));
        }
        out
    }

    /// Renders the membrane under `deformation`.
    pub fn render(&self, deformation: &Deformation) -> Result<TactileImage, RenderError> {
        let g = deformation.grid;
        if g.n_azimuth < MIN_GRID.n_azimuth || g.n_axial < MIN_GRID.n_axial {
            return Err(RenderError::GridTooCoarse(g.n_azimuth, g.n_axial));
        }
        let Some(support) = deformation.support else {
            return Ok(self.reference.clone());
        };
        let max_normal = deformation.max_normal();
        // A dent moves towards the camera and can occlude pixels whose
        // undeformed hit lies a little outside it.
        let normal_reach = support.normal_radius + 2.0 * max_normal;
        let reach = normal_reach.max(support.tangential_radius);
        let h = 0.5 * g.resolution(&self.geom);
        let updates: Vec<(u32, [u8; 3])> = self
            .rays
            .par_iter()
            .filter_map(|ray| {
                let (t0, sp0) = ray.hit?;
                let dist = (sp0.position - support.center).norm();
                if dist > reach {
                    return None;
                }
                let marching = max_normal > 0.0 && dist <= normal_reach;
                let (t, surf) = if marching {
                    self.march(&ray.dir, t0, &sp0, deformation, max_normal)
                } else {
                    (t0, sp0)
                };
                let delta = deformation.normal_at(surf.uv);
                let shift = deformation.tangential_at(surf.uv);
                let (n_def, bent) = self.deformed_normal(&surf, deformation, h);
                if delta == 0.0 && !bent && shift == Vector3::zeros() && t == t0 {
                    return None;
                }
                let p = self.camera.origin() + ray.dir * t;
                let material = surf.position - shift;
                let rgb = self.shade(&p, &n_def, &material, t / self.camera.f_theta);
                Some((ray.index, rgb))
            })
            .collect();
        let mut img = self.reference.clone();
        for (idx, rgb) in updates {
            let o = idx as usize * 3;
            img.data[o..o + 3].copy_from_slice(&rgb);
        }
        Ok(img)
    }

    /// Undeformed surface point whose displaced position is the first hit of
    /// the camera ray `dir`.
    pub fn trace(&self, dir: &Vector3<f64>, deformation: &Deformation) -> Option<SurfacePoint> {
        let (t0, sp0) = intersect_membrane(&self.geom, &self.camera.origin(), dir)?;
        let max_normal = deformation.max_normal();
        if max_normal <= 0.0 {
            return Some(sp0);
        }
        Some(self.march(dir, t0, &sp0, deformation, max_normal).1)
    }

    /// Finds the first crossing of the ray with the deformed membrane.
    /// Returns the ray parameter and the undeformed surface point under it.
    fn march(
        &self,
        dir: &Vector3<f64>,
        t0: f64,
        sp0: &SurfacePoint,
        def: &Deformation,
        max_normal: f64,
    ) -> (f64, SurfacePoint) {
        let origin = self.camera.origin();
        let f = |t: f64| {
            let p = origin + dir * t;
            let q = self.geom.project_unchecked(&p);
            let inward = (q.position - p).dot(&q.normal);
            (inward - def.normal_at(q.uv), q)
        };
        let cos_inc = dir.dot(&sp0.normal).max(0.2);
        let span = (max_normal + 0.05) / cos_inc;
        let step = 0.08 / cos_inc;
        let mut lo = (t0 - span).max(0.5 * t0);
        let (mut f_lo, _) = f(lo);
        if f_lo <= 0.0 {
            return (t0, *sp0);
        }
        let mut hi = lo;
        let mut found = false;
        while hi < t0 {
            hi = (hi + step).min(t0);
            let (v, _) = f(hi);
            if v <= 0.0 {
                found = true;
                break;
            }
            lo = hi;
            f_lo = v;
        }
        if !found {
            return (t0, *sp0);
        }
        let _ = f_lo;
        for _ in 0..24 {
            let mid = 0.5 * (lo + hi);
            if f(mid).0 > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let (_, q) = f(hi);
        (hi, q)
    }

    /// Outward normal of the deformed surface over `surf`, by central
    /// differences of the displaced positions. The flag is false when the
    /// neighbourhood is undisplaced and the undeformed normal is returned.
    fn deformed_normal(&self, surf: &SurfacePoint, def: &Deformation, h: f64) -> (Vector3<f64>, bool) {
        let frame = contact_frame(surf);
        let offsets = [frame.x_axis() * h, frame.y_axis() * h];
        let mut tangents = [Vector3::zeros(); 2];
        let mut bent = false;
        for (k, off) in offsets.iter().enumerate() {
            let a = self.geom.project_unchecked(&(surf.position + off));
            let b = self.geom.project_unchecked(&(surf.position - off));
            let da = def.normal_at(a.uv);
            let db = def.normal_at(b.uv);
            bent |= da != 0.0 || db != 0.0;
            tangents[k] = (a.position - a.normal * da) - (b.position - b.normal * db);
        }
        if !bent {
            return (surf.normal, false);
        }
        let n = tangents[0].cross(&tangents[1]);
        let n = if n.dot(&surf.normal) < 0.0 { -n } else { n };
        (n.normalize(), true)
    }
}

/// Renders `deformation` for `instance` on `geom`.
pub fn render(geom: &ShellGeometry, instance: &SensorInstance, deformation: &Deformation) -> Result<TactileImage, RenderError> {
    instance.renderer(geom)?.render(deformation)
}

/// Reference frame of `instance`: the membrane without contact.
pub fn reference_image(geom: &ShellGeometry, instance: &SensorInstance) -> Result<TactileImage, RenderError> {
    Ok(instance.renderer(geom)?.reference().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Uv;
    use crate::mechanics::{displacement_field, ContactSpec, Indenter, SurfaceGrid};

    fn press(geom: &ShellGeometry, uv: Uv, depth: f64) -> Deformation {
        let sg = SurfaceGrid::new(geom, UvGrid::default());
        displacement_field(&sg, &Indenter::Sphere { radius: 4.0 }, &ContactSpec::press(uv, depth), geom).unwrap()
    }

    #[test]
    fn fov_edge_hits_mask() {
        let cam = CameraModel::default();
        assert!((cam.f_theta - 171.887).abs() < 1e-3);
        let edge = cam.pixel_ray(cam.principal[0] + MASK_RADIUS, cam.principal[1]);
        assert!((edge.z.acos().to_degrees() - 80.0).abs() < 1e-9);
    }

    #[test]
    fn projection_inverts_pixel_ray() {
        let cam = CameraModel::default();
        for (x, y) in [(240.0, 240.0), (100.3, 321.7), (400.5, 60.25)] {
            let p = cam.origin() + cam.pixel_ray(x, y) * 17.0;
            let back = cam.project(&p).unwrap();
            assert!((back[0] - x).abs() < 1e-9 && (back[1] - y).abs() < 1e-9);
        }
    }

    #[test]
    fn patterns_assign_primaries() {
        assert_eq!(Illumination::Rrrgggbbb.color(4), [0.0, 1.0, 0.0]);
        assert_eq!(Illumination::Rgbrgbrgb.color(4), [0.0, 1.0, 0.0]);
        assert_eq!(Illumination::Rgbrgbrgb.color(8), [0.0, 0.0, 1.0]);
        assert_eq!(Illumination::Rrrgggbbb.color(8), [0.0, 0.0, 1.0]);
        assert_eq!(Illumination::White.color(2), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn marker_layout_has_37_separated_dots() {
        let g = ShellGeometry::default();
        let inst = SensorInstance::nominal("n", Illumination::White, true);
        let pts = inst.marker_points(&g);
        assert_eq!(pts.len(), 37);
        for (i, a) in pts.iter().enumerate() {
            for b in &pts[i + 1..] {
                assert!((a.position - b.position).norm() > 2.0 * inst.markers.dot_radius);
            }
        }
    }

    #[test]
    fn zero_deformation_is_reference() {
        let g = ShellGeometry::default();
        let inst = SensorInstance::fabricate("a", Illumination::Rrrgggbbb, true, 3);
        let img = render(&g, &inst, &Deformation::zero(UvGrid::default())).unwrap();
        assert_eq!(&img, &reference_image(&g, &inst).unwrap());
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let g = ShellGeometry::default();
        let inst = SensorInstance::nominal("a", Illumination::White, false);
        let grid = UvGrid { n_azimuth: 128, n_axial: 64 };
        assert!(matches!(render(&g, &inst, &Deformation::zero(grid)), Err(RenderError::GridTooCoarse(128, 64))));
    }

    #[test]
    fn mask_outside_is_black() {
        let g = ShellGeometry::default();
        let inst = SensorInstance::fabricate("a", Illumination::White, true, 8);
        let img = reference_image(&g, &inst).unwrap();
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                if !img.in_mask(x, y) {
                    assert_eq!(img.pixel(x, y), [0, 0, 0]);
                }
            }
        }
    }

    #[test]
    fn deeper_press_changes_more() {
        let g = ShellGeometry::default();
        let inst = SensorInstance::nominal("a", Illumination::Rrrgggbbb, true);
        let r = inst.renderer(&g).unwrap();
        let apex = Uv::new(0.0, 1.0);
        let shallow = r.render(&press(&g, apex, 0.5)).unwrap().mean_abs_diff(r.reference());
        let deep = r.render(&press(&g, apex, 1.0)).unwrap().mean_abs_diff(r.reference());
        assert!(deep > shallow && shallow > 0.0, "{shallow} {deep}");
    }

    #[test]
    fn rendering_is_deterministic_across_thread_counts() {
        let g = ShellGeometry::default();
        let d = press(&g, Uv::new(1.2, 0.6), 1.3);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let inst = SensorInstance::fabricate("a", Illumination::Rgbrgbrgb, true, 11);
                render(&g, &inst, &d).unwrap()
            })
        };
        let a = run(1);
        assert_eq!(a, run(3));
        assert_eq!(a, run(1));
    }

    #[test]
    fn white_channels_balance_out() {
        let g = ShellGeometry::default();
        for seed in [1, 2, 3] {
            let inst = SensorInstance::fabricate("w", Illumination::White, false, seed);
            let img = reference_image(&g, &inst).unwrap();
            let mut mean = [0f64; 3];
            let mut n = 0.0;
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    if img.in_mask(x, y) {
                        let p = img.pixel(x, y);
                        for c in 0..3 {
                            mean[c] += p[c] as f64;
                        }
                        n += 1.0;
                    }
                }
            }
            // The gain acts on radiance, before the display gamma.
            let b = inst.perturbations.rgb_balance;
            let m: Vec<f64> = (0..3).map(|c| mean[c] / n / b[c].powf(1.0 / GAMMA)).collect();
            let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = m.iter().copied().fold(0.0, f64::max);
            assert!(hi / lo - 1.0 < 0.02, "{m:?}");
        }
    }

    #[test]
    fn instance_seeds_control_reference() {
        let g = ShellGeometry::default();
        let a = SensorInstance::fabricate("a", Illumination::Rrrgggbbb, true, 42);
        let b = SensorInstance::fabricate("a", Illumination::Rrrgggbbb, true, 42);
        let c = SensorInstance::fabricate("a", Illumination::Rrrgggbbb, true, 43);
        let ra = reference_image(&g, &a).unwrap();
        assert_eq!(ra, reference_image(&g, &b).unwrap());
        assert_ne!(ra, reference_image(&g, &c).unwrap());
    }

    #[test]
    fn instance_json_round_trip() {
        let a = SensorInstance::fabricate("a", Illumination::Rgbrgbrgb, true, 9);
        let back = SensorInstance::from_json(&a.to_json()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn rotation_by_one_led_spacing_is_covariant() {
        let g = ShellGeometry::default();
        let inst = SensorInstance::nominal("w", Illumination::White, false);
        let r = inst.renderer(&g).unwrap();
        let step = TAU / LED_COUNT as f64;
        for (az, ax) in [(0.4, 0.5), (1.0, 0.8), (2.5, 0.3)] {
            let a = r.render(&press(&g, Uv::new(az, ax), 1.5)).unwrap();
            let b = r.render(&press(&g, Uv::new(az + step, ax), 1.5)).unwrap();
            // Sample `a` at each pixel of `b` rotated back by one step.
            let (s, c) = step.sin_cos();
            let mut err = 0.0;
            let mut n = 0.0;
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    if !b.in_mask(x, y) {
                        continue;
                    }
                    let dx = x as f64 + 0.5 - MASK_RADIUS;
                    let dy = y as f64 + 0.5 - MASK_RADIUS;
                    let sx = c * dx + s * dy + MASK_RADIUS - 0.5;
                    let sy = -s * dx + c * dy + MASK_RADIUS - 0.5;
                    let (ix, iy) = (sx.round(), sy.round());
                    if ix < 0.0 || iy < 0.0 || ix >= IMAGE_SIZE as f64 || iy >= IMAGE_SIZE as f64 {
                        continue;
                    }
                    let (ix, iy) = (ix as usize, iy as usize);
                    if !a.in_mask(ix, iy) {
                        continue;
                    }
                    let pa = a.pixel(ix, iy);
                    let pb = b.pixel(x, y);
                    for k in 0..3 {
                        err += (pa[k] as f64 - pb[k] as f64).abs();
                    }
                    n += 3.0;
                }
            }
            assert!(err / n <= 2.0, "mae {}", err / n);
        }
    }

    #[test]
    fn intensity_change_is_monotone_in_depth() {
        let g = ShellGeometry::default();
        let points = [Uv::new(0.2, 0.95), Uv::new(1.7, 0.62), Uv::new(3.3, 0.41), Uv::new(5.0, 0.15)];
        for pattern in Illumination::ALL {
            let inst = SensorInstance::nominal("m", pattern, true);
            let r = inst.renderer(&g).unwrap();
            for uv in points {
                let mut last = -1.0;
                for d in [0.0, 0.5, 1.0, 1.5, 2.0] {
                    let e = r.render(&press(&g, uv, d)).unwrap().mean_abs_diff(r.reference());
                    assert!(e >= last, "{pattern:?} {uv:?} d={d}: {e} < {last}");
                    last = e;
                }
            }
        }
    }
}
