//! Training-free contact estimator.
//!
//! Location comes from the brightest connected region of the difference
//! image, depth from a monotone fit of that region's integrated change, and
//! shear and twist from the motion of the marker dots around the contact.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_pair, EstimatorError, StateEstimate};
use crate::geometry::{contact_frame, ShellGeometry, SurfacePoint};
use crate::image::TactileImage;
use crate::markers::{marker_centroids, marker_flow, Centroid};
use crate::mechanics::{
    displacement_field, normal_force, ContactSpec, Deformation, Indenter, SurfaceGrid, UvGrid, FRICTION,
    K_TANGENTIAL, K_TORSION, TANGENTIAL_SIGMA,
};
use crate::render::{intersect_membrane, Renderer, SensorInstance};

/// Presses rendered to fit the depth curve.
pub const CALIBRATION_PRESSES: usize = 50;
/// Largest marker motion tracked between frames, px.
const MAX_MARKER_SHIFT: f64 = 15.0;
/// Markers whose expected motion is below this fraction of the contact's
/// are ignored.
const MIN_MARKER_WEIGHT: f64 = 0.05;

/// Isotonic (non-decreasing) map from blob signal to depth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthCalibration {
    pub signal: Vec<f64>,
    pub depth: Vec<f64>,
}

impl DepthCalibration {
    /// Pool-adjacent-violators fit of `depth` against `signal`.
    pub fn fit(samples: &[(f64, f64)]) -> Self {
        let mut pts: Vec<(f64, f64)> = samples.to_vec();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        // Blocks of (sum_signal, sum_depth, count).
        let mut blocks: Vec<(f64, f64, f64)> = Vec::new();
        for (s, d) in pts {
            blocks.push((s, d, 1.0));
            while blocks.len() > 1 {
                let n = blocks.len();
                let (a, b) = (blocks[n - 2], blocks[n - 1]);
                if a.1 / a.2 <= b.1 / b.2 {
                    break;
                }
                blocks.truncate(n - 2);
                blocks.push((a.0 + b.0, a.1 + b.1, a.2 + b.2));
            }
        }
        Self {
            signal: blocks.iter().map(|b| b.0 / b.2).collect(),
            depth: blocks.iter().map(|b| b.1 / b.2).collect(),
        }
    }

    /// Piecewise-linear interpolation between block means, flat outside.
    pub fn predict(&self, signal: f64) -> f64 {
        let (s, d) = (&self.signal, &self.depth);
        if s.is_empty() {
            return 0.0;
        }
        if signal <= s[0] {
            return d[0] * (signal / s[0]).clamp(0.0, 1.0);
        }
        if signal >= s[s.len() - 1] {
            return d[d.len() - 1];
        }
        let k = s.partition_point(|&v| v <= signal);
        let t = (signal - s[k - 1]) / (s[k] - s[k - 1]);
        d[k - 1] + t * (d[k] - d[k - 1])
    }
}

/// Pixel statistics of the main contact region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactBlob {
    /// Intensity-weighted centroid, px.
    pub centroid: [f64; 2],
    pub pixels: usize,
    /// Sum of the per-pixel change weighted by the membrane area each pixel
    /// covers (8-bit levels x mm^2).
    pub signal: f64,
}

/// Largest connected region of `|I_t - I_ref|` above mean + 3 sigma.
pub fn contact_blob(reference: &TactileImage, frame: &TactileImage, renderer: &Renderer) -> Option<ContactBlob> {
    let n = frame.size;
    let mut diff = vec![0f64; n * n];
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    let mut count = 0.0;
    for y in 0..n {
        for x in 0..n {
            if !frame.in_mask(x, y) {
                continue;
            }
            let a = reference.pixel(x, y);
            let b = frame.pixel(x, y);
            let v: f64 = (0..3).map(|c| (a[c] as f64 - b[c] as f64).abs()).sum();
            diff[y * n + x] = v;
            sum += v;
            sum2 += v * v;
            count += 1.0;
        }
    }
    let mean = sum / count;
    let sd = (sum2 / count - mean * mean).max(0.0).sqrt();
    // A few grey levels of change are needed even on a noiseless frame.
    let threshold = (mean + 3.0 * sd).max(3.0);
    let mut seen = vec![false; n * n];
    let mut best: Option<Vec<usize>> = None;
    let mut stack = Vec::new();
    for start in 0..n * n {
        if seen[start] || diff[start] <= threshold {
            continue;
        }
        let mut blob = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            blob.push(i);
            let (x, y) = ((i % n) as i64, (i / n) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= n as i64 || ny >= n as i64 {
                        continue;
                    }
                    let j = ny as usize * n + nx as usize;
                    if !seen[j] && diff[j] > threshold {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if best.as_ref().is_none_or(|b| blob.len() > b.len()) {
            best = Some(blob);
        }
    }
    let blob = best?;
    let cam = renderer.camera;
    let origin = cam.origin();
    let (mut wx, mut wy, mut ws, mut signal) = (0.0, 0.0, 0.0, 0.0);
    for &i in &blob {
        let (x, y) = ((i % n) as f64 + 0.5, (i / n) as f64 + 0.5);
        let v = diff[i];
        wx += v * x;
        wy += v * y;
        ws += v;
        let dir = cam.pixel_ray(x, y);
        if let Some((t, sp)) = intersect_membrane(&renderer.geom, &origin, &dir) {
            let theta = dir.z.clamp(-1.0, 1.0).acos();
            let sinc = if theta > 1e-9 { theta.sin() / theta } else { 1.0 };
            let cos_inc = dir.dot(&sp.normal).abs().max(0.1);
            signal += v * (t / cam.f_theta).powi(2) * sinc / cos_inc;
        }
    }
    Some(ContactBlob {
        centroid: [wx / ws, wy / ws],
        pixels: blob.len(),
        signal,
    })
}

/// Tangential slip (contact-frame mm) and twist (rad) fitted to marker motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkerFit {
    pub slip: [f64; 2],
    pub twist: f64,
    pub markers: usize,
}

/// Calibrated baseline for one sensor instance and indenter.
#[derive(Debug, Clone)]
pub struct BaselineEstimator {
    pub indenter: Indenter,
    pub calibration: DepthCalibration,
    geom: ShellGeometry,
    surface: Arc<SurfaceGrid>,
}

impl BaselineEstimator {
    /// Fits the depth curve on [`CALIBRATION_PRESSES`] rendered presses at
    /// random sites with depths spread over the indenter's range.
    pub fn calibrate(
        geom: &ShellGeometry,
        instance: &SensorInstance,
        indenter: Indenter,
        seed: u64,
    ) -> Result<Self, EstimatorError> {
        let renderer = instance.renderer(geom)?;
        let surface = Arc::new(SurfaceGrid::new(geom, UvGrid::default()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max = indenter.max_depth();
        let mut samples = Vec::with_capacity(CALIBRATION_PRESSES);
        for k in 0..CALIBRATION_PRESSES {
            let uv = geom.sample_one(&mut rng).uv;
            // Stratified depths so the whole range is covered.
            let depth = max * (k as f64 + rng.random::<f64>()) / CALIBRATION_PRESSES as f64;
            let field = displacement_field(&surface, &indenter, &ContactSpec::press(uv, depth), geom)?;
            let img = renderer.render(&field)?;
            let signal = contact_blob(renderer.reference(), &img, &renderer).map_or(0.0, |b| b.signal);
            samples.push((signal, depth));
        }
        Ok(Self {
            indenter,
            calibration: DepthCalibration::fit(&samples),
            geom: *geom,
            surface,
        })
    }

    /// Estimates the contact state of `frame`.
    pub fn estimate(
        &self,
        instance: &SensorInstance,
        reference: &TactileImage,
        frame: &TactileImage,
    ) -> Result<StateEstimate, EstimatorError> {
        check_pair(reference, frame)?;
        let renderer = instance.renderer(&self.geom)?;
        let Some(blob) = contact_blob(reference, frame, &renderer) else {
            return Ok(StateEstimate::zero());
        };
        let cam = renderer.camera;
        let dir = cam.pixel_ray(blob.centroid[0], blob.centroid[1]);
        let Some((_, hit)) = intersect_membrane(&self.geom, &cam.origin(), &dir) else {
            return Ok(StateEstimate::zero());
        };
        let d = self.calibration.predict(blob.signal).clamp(0.0, self.indenter.max_depth());
        let fz = normal_force(&self.indenter, d);
        let mut est = StateEstimate {
            x: [hit.position.x, hit.position.y, hit.position.z],
            f: [0.0, 0.0, fz],
            tau: 0.0,
            d,
        };
        if instance.markers.enabled && d > 0.0 {
            let fit = self.fit_markers(instance, &renderer, reference, frame, &hit, d)?;
            let mut ft = [K_TANGENTIAL * fit.slip[0] * d, K_TANGENTIAL * fit.slip[1] * d];
            let mag = ft[0].hypot(ft[1]);
            let cap = FRICTION * fz.abs();
            if mag > cap {
                ft = [ft[0] * cap / mag, ft[1] * cap / mag];
            }
            let cap_t = crate::mechanics::torsion_cap(&self.indenter, d);
            est.f[0] = ft[0];
            est.f[1] = ft[1];
            est.tau = (K_TORSION * fit.twist * d * d).clamp(-cap_t, cap_t);
        }
        Ok(est)
    }

    /// Least-squares fit of `u = w * (t + phi * lever * perp)` to the tracked
    /// marker motion, where `w` is the tangential decay away from the
    /// footprint and `perp` the in-plane direction normal to the marker's
    /// offset from the contact.
    pub fn fit_markers(
        &self,
        instance: &SensorInstance,
        renderer: &Renderer,
        reference: &TactileImage,
        frame: &TactileImage,
        contact: &SurfacePoint,
        depth: f64,
    ) -> Result<MarkerFit, EstimatorError> {
        let before: Vec<Centroid> = marker_centroids(reference, instance)?;
        let after = marker_centroids(frame, instance)?;
        let flow = marker_flow(&before, &after, MAX_MARKER_SHIFT);
        // Expected dent, so that markers pushed towards the camera are not
        // mistaken for sliding ones.
        let predicted: Deformation = displacement_field(
            &self.surface,
            &self.indenter,
            &ContactSpec::press(contact.uv, depth),
            &self.geom,
        )?;
        let zero = Deformation::zero(self.surface.grid);
        let frame_c = contact_frame(contact);
        let a = self.indenter.footprint_radius(depth);
        let cam = renderer.camera;
        let mut ata = Matrix3::<f64>::zeros();
        let mut atb = Vector3::<f64>::zeros();
        let mut used = 0;
        for f in &flow {
            let from = cam.pixel_ray(f.origin[0], f.origin[1]);
            let to = cam.pixel_ray(f.origin[0] + f.shift[0], f.origin[1] + f.shift[1]);
            let (Some(m0), Some(q)) = (renderer.trace(&from, &zero), renderer.trace(&to, &predicted)) else {
                continue;
            };
            let r = frame_c.to_local(&(m0.position - contact.position));
            let rho = r.x.hypot(r.y);
            if rho < 1e-6 {
                continue;
            }
            let w = (-((rho - a).max(0.0) / TANGENTIAL_SIGMA).powi(2)).exp();
            if w < MIN_MARKER_WEIGHT {
                continue;
            }
            let u = frame_c.to_local(&(q.position - m0.position));
            let lever = rho.min(a);
            let perp = [-r.y / rho, r.x / rho];
            // Two observation rows: u_x and u_y.
            let rows = [
                (Vector3::new(w, 0.0, w * lever * perp[0]), u.x),
                (Vector3::new(0.0, w, w * lever * perp[1]), u.y),
            ];
            for (row, obs) in rows {
                ata += row * row.transpose();
                atb += row * obs;
            }
            used += 1;
        }
        if used == 0 {
            return Ok(MarkerFit {
                slip: [0.0, 0.0],
                twist: 0.0,
                markers: 0,
            });
        }
        // A light ridge keeps the system solvable with a single marker.
        let sol = (ata + Matrix3::identity() * 1e-6)
            .lu()
            .solve(&atb)
            .unwrap_or_else(Vector3::zeros);
        Ok(MarkerFit {
            slip: [sol.x, sol.y],
            twist: sol.z,
            markers: used,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Uv;
    use crate::render::Illumination;

    #[test]
    fn isotonic_fit_is_monotone() {
        let cal = DepthCalibration::fit(&[(1.0, 0.2), (2.0, 0.5), (3.0, 0.4), (4.0, 1.0), (5.0, 0.9)]);
        assert!(cal.depth.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(cal.depth, vec![0.2, 0.45, 0.95]);
        assert!((cal.predict(2.5) - 0.45).abs() < 1e-12);
        assert_eq!(cal.predict(100.0), 0.95);
        assert_eq!(cal.predict(0.0), 0.0);
    }

    fn setup() -> (ShellGeometry, SensorInstance, BaselineEstimator) {
        let g = ShellGeometry::default();
        let inst = SensorInstance::nominal("b", Illumination::Rrrgggbbb, true);
        let est = BaselineEstimator::calibrate(&g, &inst, Indenter::Sphere { radius: 4.0 }, 1).unwrap();
        (g, inst, est)
    }

    #[test]
    fn baseline_cases() {
        let (g, inst, est) = setup();
        let r = inst.renderer(&g).unwrap();
        let reference = r.reference().clone();
        assert_eq!(est.estimate(&inst, &reference, &reference).unwrap(), StateEstimate::zero());

        let surface = SurfaceGrid::new(&g, UvGrid::default());
        let apex = Uv::new(0.0, 1.0);
        let field = displacement_field(&surface, &est.indenter, &ContactSpec::press(apex, 1.5), &g).unwrap();
        let e = est.estimate(&inst, &reference, &r.render(&field).unwrap()).unwrap();
        let truth = g.surface_point(apex).unwrap().position;
        let err = (Vector3::from(e.x) - truth).norm();
        assert!(err <= 2.0, "apex error {err}");

        for (uv, phi) in [(Uv::new(0.5, 0.8), 0.25), (Uv::new(2.0, 0.6), -0.2)] {
            let mut spec = ContactSpec::press(uv, 1.2);
            spec.twist = phi;
            let field = displacement_field(&surface, &est.indenter, &spec, &g).unwrap();
            let e = est.estimate(&inst, &reference, &r.render(&field).unwrap()).unwrap();
            assert_eq!(e.tau.signum(), phi.signum(), "{uv:?}: {e:?}");
        }
    }
}
