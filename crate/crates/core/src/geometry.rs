//! Parametric membrane of the sensor: a cylinder wall capped by a hemisphere.
//!
//! Coordinates are in millimetres with the origin at the centre of the
//! membrane base and +z running along the sensor axis towards the apex.
//!
//! Surface points are addressed by `(azimuth, axial)` where `axial` is the
//! arc length from the base rim to the apex normalised to `[0, 1]`. The
//! cylinder occupies `[0, h_c)` and the hemisphere `[h_c, 1]`, with
//! `h_c = cyl_height / (cyl_height + pi/2 * radius)`.

use std::f64::consts::{FRAC_PI_2, TAU};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid shell dimensions: {0}")]
    InvalidDimensions(String),
    #[error("surface parameter out of range: azimuth={azimuth}, axial={axial}")]
    UvOutOfRange { azimuth: f64, axial: f64 },
    #[error("non-finite query point")]
    NonFinite,
    #[error("requested zero surface samples")]
    EmptyRequest,
}

/// Surface parameters: azimuth in radians and normalised axial arc length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uv {
    pub azimuth: f64,
    pub axial: f64,
}

impl Uv {
    pub fn new(azimuth: f64, axial: f64) -> Self {
        Self { azimuth, axial }
    }
}

/// Wraps an angle into `[0, 2pi)`.
pub fn wrap_azimuth(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShellGeometry {
    pub cyl_radius: f64,
    pub cyl_height: f64,
    pub hemisphere_radius: f64,
}

impl Default for ShellGeometry {
    fn default() -> Self {
        Self {
            cyl_radius: 12.0,
            cyl_height: 14.0,
            hemisphere_radius: 12.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub position: Vector3<f64>,
    /// Outward unit normal.
    pub normal: Vector3<f64>,
    pub uv: Uv,
}

/// Local frame at a contact: columns are (x, y, z) with z the outward normal
/// and x the azimuthal tangent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactFrame {
    pub origin: Vector3<f64>,
    pub axes: Matrix3<f64>,
}

impl ContactFrame {
    pub fn x_axis(&self) -> Vector3<f64> {
        self.axes.column(0).into()
    }
    pub fn y_axis(&self) -> Vector3<f64> {
        self.axes.column(1).into()
    }
    pub fn z_axis(&self) -> Vector3<f64> {
        self.axes.column(2).into()
    }

    /// Expresses a world vector in frame coordinates.
    pub fn to_local(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.axes.transpose() * v
    }

    pub fn to_world(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.axes * v
    }
}

impl ShellGeometry {
    pub fn new(cyl_radius: f64, cyl_height: f64) -> Result<Self, GeometryError> {
        let g = Self {
            cyl_radius,
            cyl_height,
            hemisphere_radius: cyl_radius,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let dims = [self.cyl_radius, self.cyl_height, self.hemisphere_radius];
        if dims.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(GeometryError::InvalidDimensions(format!(
                "all lengths must be positive, got {dims:?}"
            )));
        }
        if self.hemisphere_radius != self.cyl_radius {
            return Err(GeometryError::InvalidDimensions(format!(
                "hemisphere radius {} must equal cylinder radius {}",
                self.hemisphere_radius, self.cyl_radius
            )));
        }
        Ok(())
    }

    pub fn radius(&self) -> f64 {
        self.cyl_radius
    }

    pub fn apex_height(&self) -> f64 {
        self.cyl_height + self.hemisphere_radius
    }

    pub fn hemisphere_center(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.cyl_height)
    }

    /// Total arc length of a meridian, base rim to apex.
    pub fn meridian_length(&self) -> f64 {
        self.cyl_height + FRAC_PI_2 * self.hemisphere_radius
    }

    /// Axial parameter of the cylinder/hemisphere seam.
    pub fn seam_axial(&self) -> f64 {
        self.cyl_height / self.meridian_length()
    }

    pub fn cylinder_area(&self) -> f64 {
        TAU * self.cyl_radius * self.cyl_height
    }

    pub fn hemisphere_area(&self) -> f64 {
        TAU * self.hemisphere_radius * self.hemisphere_radius
    }

    pub fn total_area(&self) -> f64 {
        self.cylinder_area() + self.hemisphere_area()
    }

    /// Area-weighted mean height of the membrane.
    pub fn mean_height(&self) -> f64 {
        let (r, h) = (self.cyl_radius, self.cyl_height);
        // Cylinder: centroid at h/2. Hemisphere shell: centroid at h + r/2.
        (self.cylinder_area() * h * 0.5 + self.hemisphere_area() * (h + 0.5 * r))
            / self.total_area()
    }

    pub fn surface_point(&self, uv: Uv) -> Result<SurfacePoint, GeometryError> {
        if !(uv.azimuth >= 0.0 && uv.azimuth < TAU && uv.axial >= 0.0 && uv.axial <= 1.0) {
            return Err(GeometryError::UvOutOfRange {
                azimuth: uv.azimuth,
                axial: uv.axial,
            });
        }
        Ok(self.surface_point_unchecked(uv))
    }

    /// Same as [`surface_point`](Self::surface_point) but without range
    /// checks; callers must pass a valid `uv`.
    pub fn surface_point_unchecked(&self, uv: Uv) -> SurfacePoint {
        let r = self.cyl_radius;
        let (s, c) = uv.azimuth.sin_cos();
        let arc = uv.axial * self.meridian_length();
        if arc < self.cyl_height {
            SurfacePoint {
                position: Vector3::new(r * c, r * s, arc),
                normal: Vector3::new(c, s, 0.0),
                uv,
            }
        } else {
            let beta = ((arc - self.cyl_height) / r).min(FRAC_PI_2);
            let (sb, cb) = beta.sin_cos();
            let normal = Vector3::new(cb * c, cb * s, sb);
            SurfacePoint {
                position: self.hemisphere_center() + normal * r,
                normal,
                uv,
            }
        }
    }

    /// Nearest point on the undeformed membrane.
    ///
    /// Queries on the symmetry axis have no defined azimuth; they resolve to
    /// azimuth 0.
    pub fn project_to_surface(&self, p: &Vector3<f64>) -> Result<SurfacePoint, GeometryError> {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(self.project_unchecked(p))
    }

    pub fn project_unchecked(&self, p: &Vector3<f64>) -> SurfacePoint {
        let r = self.cyl_radius;
        let h = self.cyl_height;
        let rho = p.x.hypot(p.y);
        let (azimuth, c, s) = if rho > 1e-12 {
            (wrap_azimuth(p.y.atan2(p.x)), p.x / rho, p.y / rho)
        } else {
            (0.0, 1.0, 0.0)
        };
        let len = self.meridian_length();
        if p.z <= h {
            let z = p.z.max(0.0);
            SurfacePoint {
                position: Vector3::new(r * c, r * s, z),
                normal: Vector3::new(c, s, 0.0),
                uv: Uv::new(azimuth, z / len),
            }
        } else {
            let dz = p.z - h;
            // beta is the elevation of the query seen from the hemisphere centre.
            let beta = dz.atan2(rho);
            let (sb, cb) = beta.sin_cos();
            let normal = Vector3::new(cb * c, cb * s, sb);
            let axial = ((h + r * beta) / len).min(1.0);
            SurfacePoint {
                position: self.hemisphere_center() + normal * r,
                normal,
                uv: Uv::new(azimuth, axial),
            }
        }
    }

    /// Signed distance-like implicit function, positive outside the membrane.
    /// Its gradient on the surface is the outward normal.
    pub fn implicit(&self, p: &Vector3<f64>) -> f64 {
        if p.z <= self.cyl_height {
            p.x.hypot(p.y) - self.cyl_radius
        } else {
            (p - self.hemisphere_center()).norm() - self.hemisphere_radius
        }
    }

    pub fn implicit_gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        if p.z <= self.cyl_height {
            let rho = p.x.hypot(p.y);
            Vector3::new(p.x / rho, p.y / rho, 0.0)
        } else {
            (p - self.hemisphere_center()).normalize()
        }
    }

    /// Height coordinate that is proportional to enclosed area: equal steps
    /// in this value cut the membrane into equal-area bands.
    pub fn area_height(&self, uv: Uv) -> f64 {
        self.surface_point_unchecked(uv).position.z
    }

    /// Area-uniform random samples over the whole membrane.
    pub fn sample_surface(&self, n: usize, seed: u64) -> Result<Vec<SurfacePoint>, GeometryError> {
        if n == 0 {
            return Err(GeometryError::EmptyRequest);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n).map(|_| self.sample_one(&mut rng)).collect())
    }

    /// One area-uniform sample drawn from `rng`.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> SurfacePoint {
        // Both the cylinder and (by Archimedes) the hemisphere have area
        // 2*pi*r per unit height, so a uniform height is area-uniform.
        let azimuth = wrap_azimuth(rng.random::<f64>() * TAU);
        let z = rng.random::<f64>() * self.apex_height();
        self.surface_point_unchecked(self.uv_at_height(azimuth, z))
    }

    /// Surface parameters of the point at `azimuth` and height `z`.
    pub fn uv_at_height(&self, azimuth: f64, z: f64) -> Uv {
        let len = self.meridian_length();
        let z = z.clamp(0.0, self.apex_height());
        if z < self.cyl_height {
            Uv::new(azimuth, z / len)
        } else {
            let beta = ((z - self.cyl_height) / self.hemisphere_radius).clamp(0.0, 1.0).asin();
            Uv::new(azimuth, ((self.cyl_height + self.hemisphere_radius * beta) / len).min(1.0))
        }
    }

    /// Equal-area bin `(azimuth, axial)` containing `uv`.
    pub fn equal_area_bin(&self, uv: Uv, n_azimuth: usize, n_axial: usize) -> (usize, usize) {
        let i = ((uv.azimuth / TAU) * n_azimuth as f64).floor() as usize;
        let frac = self.area_height(uv) / self.apex_height();
        let j = (frac * n_axial as f64).floor() as usize;
        (i.min(n_azimuth - 1), j.min(n_axial - 1))
    }
}

/// Frame at a surface point: z along the outward normal, x along the
/// direction of increasing azimuth.
pub fn contact_frame(sp: &SurfacePoint) -> ContactFrame {
    let (s, c) = sp.uv.azimuth.sin_cos();
    let z = sp.normal.normalize();
    let tangent = Vector3::new(-s, c, 0.0);
    let x = (tangent - z * tangent.dot(&z)).normalize();
    let y = z.cross(&x);
    ContactFrame {
        origin: sp.position,
        axes: Matrix3::from_columns(&[x, y, z]),
    }
}

/// Chord length between two surface points; used as a geodesic surrogate
/// over the short ranges that deformation fields span.
pub fn chord(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    (a - b).norm()
}

/// Elevation angle of a meridian point seen from the hemisphere centre, or
/// `None` on the cylinder.
pub fn hemisphere_elevation(geom: &ShellGeometry, uv: Uv) -> Option<f64> {
    let arc = uv.axial * geom.meridian_length();
    (arc >= geom.cyl_height).then(|| ((arc - geom.cyl_height) / geom.hemisphere_radius).min(FRAC_PI_2))
}
