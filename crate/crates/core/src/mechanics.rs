//! Contact mechanics: indenter shapes, deformation fields on the membrane,
//! the load law, and press/tilt/twist episodes.

use std::f64::consts::{PI, TAU};
use std::fmt;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{contact_frame, ContactFrame, GeometryError, ShellGeometry, SurfacePoint, Uv};

/// Normal stiffness of the Hertz-style law, N/mm^2. `sqrt(6)` makes a 3 mm
/// sphere at 2 mm depth load exactly 12 N.
pub const K_NORMAL: f64 = 2.449_489_742_783_178;
/// Tangential stick stiffness, N/mm^2.
pub const K_TANGENTIAL: f64 = 1.2;
/// Torsional stiffness, N*m/(rad*mm^2).
pub const K_TORSION: f64 = 0.042;
pub const FRICTION: f64 = 1.0;

/// Width of the normal-displacement skirt around the footprint, mm.
pub const SKIRT_SIGMA: f64 = 1.5;
/// Decay length of tangential material displacement outside the footprint, mm.
pub const TANGENTIAL_SIGMA: f64 = 3.0;
/// Normal skirt support, in units of [`SKIRT_SIGMA`].
pub const SKIRT_SUPPORT: f64 = 5.0;
/// Tangential support, in units of [`TANGENTIAL_SIGMA`].
pub const TANGENTIAL_SUPPORT: f64 = 3.0;
/// Width (mm) over which boundary values are blended into the skirt.
const RIM_SMOOTHING: f64 = 0.5;

pub const MAX_DEPTH: f64 = 3.0;
pub const DEFAULT_MAX_DEPTH: f64 = 2.0;

pub const FZ_RANGE: (f64, f64) = (-12.0, 0.8);
pub const FXY_RANGE: (f64, f64) = (-5.0, 5.0);
pub const TORSION_RANGE: (f64, f64) = (-0.05, 0.05);

#[derive(Debug, Error, PartialEq)]
pub enum MechanicsError {
    #[error("invalid indenter: {0}")]
    InvalidIndenter(String),
    #[error("contact parameter out of domain: {0}")]
    Domain(String),
    #[error("episode magnitude rejected: {0}")]
    MagnitudeRejected(String),
    #[error("episode needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("label out of range: {0}")]
    LabelRange(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Rigid probe presented tip-first along the inward contact normal.
/// Polygon and ellipse heads are flat punches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Indenter {
    Sphere { radius: f64 },
    Square { edge: f64 },
    /// Regular hexagon; `edge` equals the circumradius.
    Hexagon { edge: f64 },
    Ellipse { semi_major: f64, semi_minor: f64 },
}

impl Indenter {
    /// The six heads used for data collection.
    pub fn standard_set() -> Vec<Indenter> {
        vec![
            Indenter::Sphere { radius: 3.0 },
            Indenter::Sphere { radius: 4.0 },
            Indenter::Sphere { radius: 5.0 },
            Indenter::Square { edge: 6.0 },
            Indenter::Hexagon { edge: 3.0 },
            Indenter::Ellipse {
                semi_major: 4.0,
                semi_minor: 2.0,
            },
        ]
    }

    pub fn validate(&self) -> Result<(), MechanicsError> {
        let dims: &[f64] = match self {
            Indenter::Sphere { radius } => &[*radius],
            Indenter::Square { edge } | Indenter::Hexagon { edge } => &[*edge],
            Indenter::Ellipse {
                semi_major,
                semi_minor,
            } => &[*semi_major, *semi_minor],
        };
        if dims.iter().all(|d| d.is_finite() && *d > 0.0) {
            Ok(())
        } else {
            Err(MechanicsError::InvalidIndenter(format!("{self}")))
        }
    }

    /// Projected area of the head, mm^2.
    pub fn area(&self) -> f64 {
        match *self {
            Indenter::Sphere { radius } => PI * radius * radius,
            Indenter::Square { edge } => edge * edge,
            Indenter::Hexagon { edge } => 1.5 * 3f64.sqrt() * edge * edge,
            Indenter::Ellipse {
                semi_major,
                semi_minor,
            } => PI * semi_major * semi_minor,
        }
    }

    /// Radius used by the load law: the sphere radius, or the radius of the
    /// circle with the same area as a flat head.
    pub fn equivalent_radius(&self) -> f64 {
        match *self {
            Indenter::Sphere { radius } => radius,
            _ => (self.area() / PI).sqrt(),
        }
    }

    /// Largest lateral extent of the head from its axis.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Indenter::Sphere { radius } => radius,
            Indenter::Square { edge } => edge * std::f64::consts::FRAC_1_SQRT_2,
            Indenter::Hexagon { edge } => edge,
            Indenter::Ellipse { semi_major, .. } => semi_major,
        }
    }

    /// Height of the head surface above its tip at lateral offset `(a, b)`
    /// in the contact frame, or `None` outside the head.
    pub fn tip_height(&self, a: f64, b: f64) -> Option<f64> {
        match *self {
            Indenter::Sphere { radius } => {
                let rho2 = a * a + b * b;
                (rho2 <= radius * radius).then(|| radius - (radius * radius - rho2).sqrt())
            }
            Indenter::Square { edge } => {
                let h = 0.5 * edge;
                (a.abs() <= h && b.abs() <= h).then_some(0.0)
            }
            Indenter::Hexagon { edge } => {
                // Vertices on the frame x axis.
                let s3 = 3f64.sqrt();
                let inside = b.abs() <= 0.5 * s3 * edge && s3 * a.abs() + b.abs() <= s3 * edge;
                inside.then_some(0.0)
            }
            Indenter::Ellipse {
                semi_major,
                semi_minor,
            } => {
                let q = (a / semi_major).powi(2) + (b / semi_minor).powi(2);
                (q <= 1.0).then_some(0.0)
            }
        }
    }

    /// Contact radius used for the torsion cap, from the sphere-cap chord of
    /// the equivalent radius.
    pub fn footprint_radius(&self, depth: f64) -> f64 {
        let r = self.equivalent_radius();
        let d = depth.min(r);
        (2.0 * r * d - d * d).max(0.0).sqrt()
    }

    /// Deepest press that keeps the normal load inside its range.
    pub fn max_depth(&self) -> f64 {
        let cap = (-FZ_RANGE.0 / (K_NORMAL * self.equivalent_radius().sqrt())).powf(2.0 / 3.0);
        cap.min(DEFAULT_MAX_DEPTH)
    }

    pub fn descriptor(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Indenter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Indenter::Sphere { radius } => write!(f, "sphere_r{radius}"),
            Indenter::Square { edge } => write!(f, "square_e{edge}"),
            Indenter::Hexagon { edge } => write!(f, "hexagon_e{edge}"),
            Indenter::Ellipse {
                semi_major,
                semi_minor,
            } => write!(f, "ellipse_{}x{}", 2.0 * semi_major, 2.0 * semi_minor),
        }
    }
}

/// One frame of indenter pose relative to the membrane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactSpec {
    pub uv: Uv,
    /// Penetration depth, mm.
    pub depth: f64,
    /// Tangential stick displacement in contact-frame (x, y), mm.
    pub slip: [f64; 2],
    /// Twist about the contact normal, rad.
    pub twist: f64,
}

impl ContactSpec {
    pub fn press(uv: Uv, depth: f64) -> Self {
        Self {
            uv,
            depth,
            slip: [0.0, 0.0],
            twist: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), MechanicsError> {
        let finite = self.depth.is_finite()
            && self.slip.iter().all(|v| v.is_finite())
            && self.twist.is_finite();
        if !finite {
            return Err(MechanicsError::Domain("non-finite contact parameter".into()));
        }
        if self.depth < 0.0 {
            return Err(MechanicsError::Domain(format!("negative depth {}", self.depth)));
        }
        if self.depth > MAX_DEPTH {
            return Err(MechanicsError::Domain(format!(
                "depth {} exceeds {MAX_DEPTH} mm",
                self.depth
            )));
        }
        Ok(())
    }
}

/// 7-DoF contact label. Force is expressed in the contact frame; negative
/// `force.z` is compression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactState {
    pub position: Vector3<f64>,
    pub force: Vector3<f64>,
    pub torsion: f64,
}

impl ContactState {
    pub fn check_ranges(&self) -> Result<(), MechanicsError> {
        let f = &self.force;
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        if !within(f.z, FZ_RANGE) {
            return Err(MechanicsError::LabelRange(format!("f_z = {} N", f.z)));
        }
        if !within(f.x, FXY_RANGE) || !within(f.y, FXY_RANGE) {
            return Err(MechanicsError::LabelRange(format!("f_xy = ({}, {}) N", f.x, f.y)));
        }
        if !within(self.torsion, TORSION_RANGE) {
            return Err(MechanicsError::LabelRange(format!("torsion = {} N*m", self.torsion)));
        }
        Ok(())
    }
}

/// Regular `(azimuth, axial)` lattice. Azimuth is periodic; the axial
/// samples include both the base rim and the apex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UvGrid {
    pub n_azimuth: usize,
    pub n_axial: usize,
}

impl Default for UvGrid {
    fn default() -> Self {
        Self {
            n_azimuth: 256,
            n_axial: 128,
        }
    }
}

impl UvGrid {
    pub fn len(&self) -> usize {
        self.n_azimuth * self.n_axial
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.n_azimuth + i
    }

    pub fn uv(&self, i: usize, j: usize) -> Uv {
        Uv::new(
            TAU * i as f64 / self.n_azimuth as f64,
            j as f64 / (self.n_axial - 1) as f64,
        )
    }

    /// Bilinear sample of a node field at `uv`, wrapping in azimuth.
    pub fn sample<T>(&self, field: &[T], uv: Uv) -> T
    where
        T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
    {
        let fu = uv.azimuth / TAU * self.n_azimuth as f64;
        let fv = (uv.axial.clamp(0.0, 1.0)) * (self.n_axial - 1) as f64;
        let i0 = (fu.floor() as isize).rem_euclid(self.n_azimuth as isize) as usize;
        let i1 = (i0 + 1) % self.n_azimuth;
        let j0 = (fv.floor() as usize).min(self.n_axial - 2);
        let j1 = j0 + 1;
        let tu = fu - fu.floor();
        let tv = fv - j0 as f64;
        let a = field[self.index(i0, j0)] * (1.0 - tu) + field[self.index(i1, j0)] * tu;
        let b = field[self.index(i0, j1)] * (1.0 - tu) + field[self.index(i1, j1)] * tu;
        a * (1.0 - tv) + b * tv
    }

    /// Largest spacing between neighbouring nodes, mm.
    pub fn resolution(&self, geom: &ShellGeometry) -> f64 {
        let az = TAU * geom.radius() / self.n_azimuth as f64;
        let ax = geom.meridian_length() / (self.n_axial - 1) as f64;
        az.max(ax)
    }
}

/// Undeformed node positions and normals of a grid, computed once.
#[derive(Debug, Clone)]
pub struct SurfaceGrid {
    pub grid: UvGrid,
    pub points: Vec<SurfacePoint>,
}

impl SurfaceGrid {
    pub fn new(geom: &ShellGeometry, grid: UvGrid) -> Self {
        let mut points = Vec::with_capacity(grid.len());
        for j in 0..grid.n_axial {
            for i in 0..grid.n_azimuth {
                points.push(geom.surface_point_unchecked(grid.uv(i, j)));
            }
        }
        Self { grid, points }
    }
}

/// Deformation of the membrane sampled on a uv grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Deformation {
    pub grid: UvGrid,
    /// Inward normal displacement per node, mm.
    pub normal: Vec<f64>,
    /// Tangential material displacement per node (world frame), mm.
    pub tangential: Vec<Vector3<f64>>,
    /// Nodes in contact with the rigid head.
    pub footprint: Vec<bool>,
    /// Set when the indenter footprint runs off the membrane boundary.
    pub clipped: bool,
    /// Region holding every non-zero node. `None` for an undeformed membrane.
    pub support: Option<Support>,
}

/// Balls (world frame) enclosing the non-zero nodes of a deformation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Support {
    pub center: Vector3<f64>,
    /// Encloses every node with non-zero normal displacement.
    pub normal_radius: f64,
    /// Encloses every node with non-zero tangential displacement.
    pub tangential_radius: f64,
}

impl Deformation {
    pub fn zero(grid: UvGrid) -> Self {
        Self {
            grid,
            normal: vec![0.0; grid.len()],
            tangential: vec![Vector3::zeros(); grid.len()],
            footprint: vec![false; grid.len()],
            clipped: false,
            support: None,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.support.is_none()
    }

    pub fn max_normal(&self) -> f64 {
        self.normal.iter().copied().fold(0.0, f64::max)
    }

    pub fn normal_at(&self, uv: Uv) -> f64 {
        self.grid.sample(&self.normal, uv)
    }

    pub fn tangential_at(&self, uv: Uv) -> Vector3<f64> {
        self.grid.sample(&self.tangential, uv)
    }
}

/// Material displacement of a footprint point at lateral offset `(a, b)`,
/// in the contact frame's tangent plane.
fn footprint_motion(frame: &ContactFrame, spec: &ContactSpec, a: f64, b: f64) -> Vector3<f64> {
    let (s, c) = spec.twist.sin_cos();
    let local = Vector3::new(
        spec.slip[0] + (c - 1.0) * a - s * b,
        spec.slip[1] + (c - 1.0) * b + s * a,
        0.0,
    );
    frame.to_world(&local)
}

fn tangent_part(v: &Vector3<f64>, n: &Vector3<f64>) -> Vector3<f64> {
    v - n * v.dot(n)
}

/// Deformation produced by `indenter` posed as `spec`.
///
/// Inside the footprint the membrane follows the rigid head; outside, the
/// normal displacement decays as `d_b * exp(-(g / SKIRT_SIGMA)^2)` where `g`
/// is the distance to the nearest footprint boundary node and `d_b` the
/// displacement there. Tangential stick motion decays the same way with
/// [`TANGENTIAL_SIGMA`].
pub fn displacement_field(
    surface: &SurfaceGrid,
    indenter: &Indenter,
    spec: &ContactSpec,
    geom: &ShellGeometry,
) -> Result<Deformation, MechanicsError> {
    indenter.validate()?;
    spec.validate()?;
    let grid = surface.grid;
    let center = geom.surface_point(spec.uv)?;
    if spec.depth == 0.0 {
        return Ok(Deformation::zero(grid));
    }
    let frame = contact_frame(&center);
    let n_c = frame.z_axis();
    let reach = indenter.bounding_radius()
        + (SKIRT_SIGMA * SKIRT_SUPPORT).max(TANGENTIAL_SIGMA * TANGENTIAL_SUPPORT)
        + 2.0 * grid.resolution(geom);

    // Footprint: nodes the rigid head has pushed in.
    let mut inside = vec![false; grid.len()];
    let mut normal = vec![0.0; grid.len()];
    let mut tangential = vec![Vector3::zeros(); grid.len()];
    let mut candidates = Vec::new();
    for (k, sp) in surface.points.iter().enumerate() {
        let offset = sp.position - center.position;
        if offset.norm() > reach || sp.normal.dot(&n_c) <= 0.0 {
            continue;
        }
        candidates.push(k);
        let local = frame.to_local(&offset);
        if let Some(tip) = indenter.tip_height(local.x, local.y) {
            let pen = spec.depth + local.z - tip;
            if pen > 0.0 {
                inside[k] = true;
                normal[k] = pen;
                let motion = footprint_motion(&frame, spec, local.x, local.y);
                tangential[k] = tangent_part(&motion, &sp.normal);
            }
        }
    }

    let neighbours = |k: usize| {
        let (i, j) = (k % grid.n_azimuth, k / grid.n_azimuth);
        let left = grid.index((i + grid.n_azimuth - 1) % grid.n_azimuth, j);
        let right = grid.index((i + 1) % grid.n_azimuth, j);
        let down = (j > 0).then(|| grid.index(i, j - 1));
        let up = (j + 1 < grid.n_axial).then(|| grid.index(i, j + 1));
        [Some(left), Some(right), down, up]
    };
    let boundary: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&k| inside[k] && neighbours(k).iter().flatten().any(|&m| !inside[m]))
        .collect();
    if boundary.is_empty() && !candidates.iter().any(|&k| inside[k]) {
        // Head is between nodes: nothing resolvable on this grid.
        return Ok(Deformation::zero(grid));
    }
    let clipped = (0..grid.n_azimuth).any(|i| inside[grid.index(i, 0)])
        && center.position.z - indenter.bounding_radius() < 0.0;

    let normal_cut = SKIRT_SIGMA * SKIRT_SUPPORT;
    let tangential_cut = TANGENTIAL_SIGMA * TANGENTIAL_SUPPORT;
    let mut normal_radius: f64 = 0.0;
    let mut tangential_radius: f64 = 0.0;
    for &k in &candidates {
        let sp = &surface.points[k];
        let dist = (sp.position - center.position).norm();
        if inside[k] {
            normal_radius = normal_radius.max(dist);
            tangential_radius = tangential_radius.max(dist);
            continue;
        }
        // Skirt amplitude: boundary values averaged with weights falling off
        // around the nearest boundary node, so the rim is not streaked by
        // the grid.
        let mut g = f64::INFINITY;
        for &b in &boundary {
            g = g.min((surface.points[b].position - sp.position).norm());
        }
        if !g.is_finite() || g > normal_cut.max(tangential_cut) {
            continue;
        }
        let mut wsum = 0.0;
        let mut pen = 0.0;
        let mut motion = Vector3::zeros();
        for &b in &boundary {
            let gb = (surface.points[b].position - sp.position).norm();
            let w = (-((gb - g) / RIM_SMOOTHING).powi(2)).exp();
            if w < 1e-6 {
                continue;
            }
            wsum += w;
            pen += w * normal[b];
            motion += tangential[b] * w;
        }
        let (pen, motion) = (pen / wsum, motion / wsum);
        if g <= normal_cut {
            let v = pen * (-(g / SKIRT_SIGMA).powi(2)).exp();
            if v > 0.0 {
                normal[k] = v;
                normal_radius = normal_radius.max(dist);
            }
        }
        if g <= tangential_cut {
            let u = motion * (-(g / TANGENTIAL_SIGMA).powi(2)).exp();
            let u = tangent_part(&u, &sp.normal);
            if u.norm_squared() > 0.0 {
                tangential[k] = u;
                tangential_radius = tangential_radius.max(dist);
            }
        }
    }

    Ok(Deformation {
        grid,
        normal,
        tangential,
        footprint: inside,
        clipped,
        support: Some(Support {
            center: center.position,
            normal_radius: normal_radius + grid.resolution(geom),
            tangential_radius: tangential_radius + grid.resolution(geom),
        }),
    })
}

/// Contact-frame force (N) and torsion about the normal (N*m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactLoad {
    pub force: Vector3<f64>,
    pub torsion: f64,
}

pub fn normal_force(indenter: &Indenter, depth: f64) -> f64 {
    -K_NORMAL * indenter.equivalent_radius().sqrt() * depth.powf(1.5)
}

/// Torsion cap `(2/3) * mu * |f_z| * a`, converted to N*m.
pub fn torsion_cap(indenter: &Indenter, depth: f64) -> f64 {
    let fz = normal_force(indenter, depth).abs();
    2.0 / 3.0 * FRICTION * fz * indenter.footprint_radius(depth) / 1000.0
}

pub fn contact_load(indenter: &Indenter, spec: &ContactSpec) -> Result<ContactLoad, MechanicsError> {
    indenter.validate()?;
    spec.validate()?;
    let d = spec.depth;
    let fz = normal_force(indenter, d);
    let mut ft = [K_TANGENTIAL * spec.slip[0] * d, K_TANGENTIAL * spec.slip[1] * d];
    let mag = ft[0].hypot(ft[1]);
    let cap = FRICTION * fz.abs();
    if mag > cap {
        let s = cap / mag;
        ft = [ft[0] * s, ft[1] * s];
    }
    let cap_t = torsion_cap(indenter, d);
    let torsion = (K_TORSION * spec.twist * d * d).clamp(-cap_t, cap_t);
    Ok(ContactLoad {
        force: Vector3::new(ft[0], ft[1], fz),
        torsion,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeMode {
    Press,
    Tilt,
    Twist,
}

impl EpisodeMode {
    pub const ALL: [EpisodeMode; 3] = [EpisodeMode::Press, EpisodeMode::Tilt, EpisodeMode::Twist];
}

/// Peak values for an episode: hold depth (mm) and, for tilt and twist, the
/// slip amplitude (mm) or twist amplitude (rad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMagnitude {
    pub depth: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub uv: Uv,
    pub mode: EpisodeMode,
    pub magnitude: EpisodeMagnitude,
    pub frames: Vec<ContactSpec>,
}

/// Builds the frame schedule of one episode. Frame 0 is always out of
/// contact. Tilt and twist episodes reach their hold depth over the first
/// third of the frames and then oscillate through one full cycle.
pub fn make_episode(
    uv: Uv,
    mode: EpisodeMode,
    magnitude: EpisodeMagnitude,
    frames: usize,
    seed: u64,
) -> Result<Episode, MechanicsError> {
    if frames < 2 {
        return Err(MechanicsError::TooFewFrames(frames));
    }
    let EpisodeMagnitude { depth, amplitude } = magnitude;
    if !(depth.is_finite() && depth > 0.0 && depth <= MAX_DEPTH) {
        return Err(MechanicsError::MagnitudeRejected(format!(
            "depth {depth} mm outside (0, {MAX_DEPTH}]"
        )));
    }
    if !(amplitude.is_finite() && amplitude >= 0.0) {
        return Err(MechanicsError::MagnitudeRejected(format!(
            "amplitude {amplitude} must be finite and non-negative"
        )));
    }
    match mode {
        EpisodeMode::Tilt if K_TANGENTIAL * amplitude * depth > FXY_RANGE.1 => {
            return Err(MechanicsError::MagnitudeRejected(format!(
                "slip {amplitude} mm at depth {depth} mm exceeds the {} N tangential range",
                FXY_RANGE.1
            )));
        }
        EpisodeMode::Twist if K_TORSION * amplitude * depth * depth > TORSION_RANGE.1 => {
            return Err(MechanicsError::MagnitudeRejected(format!(
                "twist {amplitude} rad at depth {depth} mm exceeds the {} N*m torsion range",
                TORSION_RANGE.1
            )));
        }
        _ => {}
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heading: f64 = rng.random::<f64>() * TAU;
    let last = frames - 1;
    let schedule = match mode {
        EpisodeMode::Press => (0..frames)
            .map(|k| ContactSpec::press(uv, depth * k as f64 / last as f64))
            .collect(),
        EpisodeMode::Tilt | EpisodeMode::Twist => {
            let approach = (last / 3).max(1);
            let hold = last - approach.min(last);
            (0..frames)
                .map(|k| {
                    if k <= approach {
                        return ContactSpec::press(uv, depth * k as f64 / approach as f64);
                    }
                    let phase = TAU * (k - approach) as f64 / hold as f64;
                    let value = amplitude * phase.sin();
                    let mut spec = ContactSpec::press(uv, depth);
                    if mode == EpisodeMode::Tilt {
                        spec.slip = [value * heading.cos(), value * heading.sin()];
                    } else {
                        spec.twist = value;
                    }
                    spec
                })
                .collect()
        }
    };
    Ok(Episode {
        uv,
        mode,
        magnitude,
        frames: schedule,
    })
}

/// Per-frame labels of an episode.
pub fn episode_states(
    episode: &Episode,
    indenter: &Indenter,
    geom: &ShellGeometry,
) -> Result<Vec<(ContactSpec, ContactState)>, MechanicsError> {
    let position = geom.surface_point(episode.uv)?.position;
    episode
        .frames
        .iter()
        .map(|spec| {
            let load = contact_load(indenter, spec)?;
            let state = ContactState {
                position,
                force: load.force,
                torsion: load.torsion,
            };
            state.check_ranges()?;
            Ok((*spec, state))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ShellGeometry;
    use proptest::prelude::*;

    fn sphere(r: f64) -> Indenter {
        Indenter::Sphere { radius: r }
    }

    fn apex() -> Uv {
        Uv::new(0.0, 1.0)
    }

    #[test]
    fn zero_depth_gives_zero_field() {
        let g = ShellGeometry::default();
        let sg = SurfaceGrid::new(&g, UvGrid::default());
        let f = displacement_field(&sg, &sphere(3.0), &ContactSpec::press(apex(), 0.0), &g).unwrap();
        assert!(f.normal.iter().all(|&v| v == 0.0));
        assert!(f.is_zero());
    }

    #[test]
    fn apex_press_peak_and_footprint() {
        let g = ShellGeometry::default();
        let sg = SurfaceGrid::new(&g, UvGrid::default());
        let f = displacement_field(&sg, &sphere(3.0), &ContactSpec::press(apex(), 1.0), &g).unwrap();
        assert!((f.max_normal() - 1.0).abs() < 1e-6);
        let apex_node = sg.grid.index(0, sg.grid.n_axial - 1);
        assert!((f.normal[apex_node] - 1.0).abs() < 1e-6);

        // Footprint radius against the sphere-cap chord sqrt(2 r d - d^2).
        let oracle = (2.0 * 3.0 * 1.0 - 1.0_f64).sqrt();
        let apex_pos = Vector3::new(0.0, 0.0, 26.0);
        let footprint = sg
            .points
            .iter()
            .zip(&f.footprint)
            .filter(|(_, &inside)| inside)
            .map(|(sp, _)| (sp.position - apex_pos).norm())
            .fold(0.0, f64::max);
        let res = sg.grid.resolution(&g);
        assert!((footprint - oracle).abs() <= res, "footprint {footprint} vs {oracle}");
    }

    #[test]
    fn field_vanishes_beyond_skirt_support() {
        let g = ShellGeometry::default();
        let sg = SurfaceGrid::new(&g, UvGrid::default());
        let spec = ContactSpec::press(Uv::new(1.0, 0.3), 1.5);
        let ind = Indenter::Square { edge: 6.0 };
        let f = displacement_field(&sg, &ind, &spec, &g).unwrap();
        let c = g.surface_point(spec.uv).unwrap().position;
        // Every node further than the head plus the skirt support is zero.
        let bound = ind.bounding_radius() + SKIRT_SIGMA * SKIRT_SUPPORT + sg.grid.resolution(&g);
        for (sp, &v) in sg.points.iter().zip(&f.normal) {
            if (sp.position - c).norm() > bound {
                assert_eq!(v, 0.0);
            }
        }
        assert!(f.max_normal() > 1.0);
    }

    #[test]
    fn base_contact_is_flagged_clipped() {
        let g = ShellGeometry::default();
        let sg = SurfaceGrid::new(&g, UvGrid::default());
        let spec = ContactSpec::press(Uv::new(2.0, 0.02), 1.0);
        let f = displacement_field(&sg, &sphere(4.0), &spec, &g).unwrap();
        assert!(f.clipped);
        let spec = ContactSpec::press(Uv::new(2.0, 0.5), 1.0);
        assert!(!displacement_field(&sg, &sphere(4.0), &spec, &g).unwrap().clipped);
    }

    #[test]
    fn load_examples() {
        let l = contact_load(&sphere(3.0), &ContactSpec::press(apex(), 0.0)).unwrap();
        assert_eq!(l.force, Vector3::zeros());
        assert_eq!(l.torsion, 0.0);

        let l = contact_load(&sphere(3.0), &ContactSpec::press(apex(), 2.0)).unwrap();
        let oracle = -(6f64.sqrt()) * 3f64.sqrt() * 2f64.powf(1.5);
        assert!((l.force.z - oracle).abs() < 1e-9);
        assert!((l.force.z + 12.0).abs() < 1e-6);

        let spec = ContactSpec {
            uv: apex(),
            depth: 1.0,
            slip: [1.0, 0.0],
            twist: 0.0,
        };
        let l = contact_load(&sphere(3.0), &spec).unwrap();
        assert!((l.force.x - 1.2).abs() < 1e-12);
        assert!(l.force.x < FRICTION * l.force.z.abs());

        let bad = ContactSpec::press(apex(), -0.1);
        assert!(matches!(contact_load(&sphere(3.0), &bad), Err(MechanicsError::Domain(_))));
    }

    #[test]
    fn tangential_force_is_capped_by_friction() {
        let spec = ContactSpec {
            uv: apex(),
            depth: 0.5,
            slip: [30.0, 40.0],
            twist: 0.0,
        };
        let l = contact_load(&sphere(3.0), &spec).unwrap();
        let mag = l.force.x.hypot(l.force.y);
        assert!((mag - l.force.z.abs()).abs() < 1e-9);
        assert!((l.force.y / l.force.x - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn equivalent_radii() {
        let sq = Indenter::Square { edge: 6.0 };
        assert!((sq.equivalent_radius() - (36.0 / PI).sqrt()).abs() < 1e-12);
        let el = Indenter::Ellipse {
            semi_major: 4.0,
            semi_minor: 2.0,
        };
        assert!((el.equivalent_radius() - 8f64.sqrt()).abs() < 1e-12);
        for ind in Indenter::standard_set() {
            assert!(normal_force(&ind, ind.max_depth()) >= FZ_RANGE.0 - 1e-9);
        }
    }

    #[test]
    fn press_episode_ramps() {
        let ep = make_episode(
            Uv::new(0.5, 0.5),
            EpisodeMode::Press,
            EpisodeMagnitude {
                depth: 1.5,
                amplitude: 0.0,
            },
            10,
            1,
        )
        .unwrap();
        let d: Vec<f64> = ep.frames.iter().map(|f| f.depth).collect();
        assert_eq!(d[0], 0.0);
        assert!((d[9] - 1.5).abs() < 1e-12);
        assert!(d.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn twist_episode_holds_depth() {
        let mag = EpisodeMagnitude {
            depth: 1.2,
            amplitude: 0.3,
        };
        let ep = make_episode(Uv::new(0.5, 0.5), EpisodeMode::Twist, mag, 10, 4).unwrap();
        let approach = 3;
        assert!(ep.frames.iter().all(|f| f.uv == ep.uv));
        assert!(ep.frames[approach..].iter().all(|f| f.depth == 1.2));
        assert!(ep.frames.iter().any(|f| f.twist > 0.0));
        assert!(ep.frames.iter().any(|f| f.twist < 0.0));
    }

    #[test]
    fn episode_rejections() {
        let uv = Uv::new(0.0, 0.5);
        let m = |depth, amplitude| EpisodeMagnitude { depth, amplitude };
        assert_eq!(
            make_episode(uv, EpisodeMode::Press, m(1.0, 0.0), 1, 0),
            Err(MechanicsError::TooFewFrames(1))
        );
        assert!(make_episode(uv, EpisodeMode::Press, m(3.5, 0.0), 5, 0).is_err());
        assert!(make_episode(uv, EpisodeMode::Tilt, m(2.0, 3.0), 5, 0).is_err());
        assert!(make_episode(uv, EpisodeMode::Twist, m(2.0, 0.5), 5, 0).is_err());
    }

    #[test]
    fn press_labels() {
        let g = ShellGeometry::default();
        let mag = EpisodeMagnitude {
            depth: 2.0,
            amplitude: 0.0,
        };
        let ep = make_episode(Uv::new(1.0, 0.7), EpisodeMode::Press, mag, 10, 9).unwrap();
        let states = episode_states(&ep, &sphere(3.0), &g).unwrap();
        assert_eq!(states[0].1.force, Vector3::zeros());
        assert_eq!(states[0].1.torsion, 0.0);
        for w in states.windows(2) {
            assert!(w[1].1.force.z.abs() > w[0].1.force.z.abs());
        }
        assert!(states.iter().all(|(_, s)| s.force.x == 0.0 && s.force.y == 0.0 && s.torsion == 0.0));
    }

    proptest! {
        #[test]
        fn load_is_odd_in_slip_and_twist(
            d in 0.0..3.0f64, tx in -4.0..4.0f64, ty in -4.0..4.0f64, phi in -1.0..1.0f64,
        ) {
            let ind = sphere(4.0);
            let spec = ContactSpec { uv: apex(), depth: d, slip: [tx, ty], twist: phi };
            let neg = ContactSpec { slip: [-tx, -ty], twist: -phi, ..spec };
            let a = contact_load(&ind, &spec).unwrap();
            let b = contact_load(&ind, &neg).unwrap();
            prop_assert_eq!(a.force.x, -b.force.x);
            prop_assert_eq!(a.force.y, -b.force.y);
            prop_assert_eq!(a.force.z, b.force.z);
            prop_assert_eq!(a.torsion, -b.torsion);
        }

        #[test]
        fn episodes_are_deterministic(seed in any::<u64>(), mode in 0usize..3) {
            let mode = EpisodeMode::ALL[mode];
            let mag = EpisodeMagnitude { depth: 1.0, amplitude: 0.5 };
            let a = make_episode(Uv::new(0.2, 0.4), mode, mag, 8, seed).unwrap();
            let b = make_episode(Uv::new(0.2, 0.4), mode, mag, 8, seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
