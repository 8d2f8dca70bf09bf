//! Marker dot detection and image-plane marker flow.

use crate::geometry::ShellGeometry;
use crate::image::TactileImage;
use crate::render::{RenderError, SensorInstance};

/// Half-width of the window used to estimate the local background, px.
const BACKGROUND_HALF: usize = 10;
/// A pixel is ink when darker than this fraction of its local background.
const INK_RATIO: f64 = 0.72;
const MIN_BLOB_AREA: usize = 3;
const MAX_BLOB_AREA: usize = 400;

/// Sub-pixel centre of a dark blob, in pixel coordinates (pixel centres at
/// `i + 0.5`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centroid {
    pub x: f64,
    pub y: f64,
    pub area: usize,
}

/// Finds the marker dots of `image`.
///
/// Each pixel's luminance is compared with the mean luminance of the
/// in-mask pixels around it; connected dark pixels form a blob whose centre
/// is the darkness-weighted mean position.
pub fn marker_centroids(image: &TactileImage, instance: &SensorInstance) -> Result<Vec<Centroid>, RenderError> {
    if !instance.markers.enabled {
        return Err(RenderError::MarkersDisabled);
    }
    let n = image.size;
    let lum: Vec<f64> = image
        .data
        .chunks_exact(3)
        .map(|p| p[0] as f64 + p[1] as f64 + p[2] as f64)
        .collect();
    let mask: Vec<bool> = (0..n * n).map(|i| image.in_mask(i % n, i / n)).collect();

    // Integral images of luminance and mask count.
    let w = n + 1;
    let mut sum = vec![0f64; w * w];
    let mut cnt = vec![0u32; w * w];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let (l, m) = if mask[i] { (lum[i], 1) } else { (0.0, 0) };
            let o = (y + 1) * w + x + 1;
            sum[o] = l + sum[o - 1] + sum[o - w] - sum[o - w - 1];
            cnt[o] = m + cnt[o - 1] + cnt[o - w] - cnt[o - w - 1];
        }
    }
    let window = |x: usize, y: usize| {
        let x0 = x.saturating_sub(BACKGROUND_HALF);
        let y0 = y.saturating_sub(BACKGROUND_HALF);
        let x1 = (x + BACKGROUND_HALF + 1).min(n);
        let y1 = (y + BACKGROUND_HALF + 1).min(n);
        let s = sum[y1 * w + x1] - sum[y0 * w + x1] - sum[y1 * w + x0] + sum[y0 * w + x0];
        let c = cnt[y1 * w + x1] + cnt[y0 * w + x0] - cnt[y0 * w + x1] - cnt[y1 * w + x0];
        s / c.max(1) as f64
    };

    let mut dark = vec![0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            if !mask[i] {
                continue;
            }
            let bg = window(x, y);
            if bg > 0.0 && lum[i] < INK_RATIO * bg {
                dark[i] = bg - lum[i];
            }
        }
    }

    let mut seen = vec![false; n * n];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n * n {
        if dark[start] <= 0.0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut wx, mut wy, mut ws, mut area) = (0.0, 0.0, 0.0, 0usize);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % n, i / n);
            let d = dark[i];
            wx += d * (x as f64 + 0.5);
            wy += d * (y as f64 + 0.5);
            ws += d;
            area += 1;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= n as i64 || ny >= n as i64 {
                        continue;
                    }
                    let j = ny as usize * n + nx as usize;
                    if dark[j] > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        if (MIN_BLOB_AREA..=MAX_BLOB_AREA).contains(&area) {
            out.push(Centroid {
                x: wx / ws,
                y: wy / ws,
                area,
            });
        }
    }
    Ok(out)
}

/// Image positions of the instance's markers on the undeformed membrane.
pub fn projected_layout(geom: &ShellGeometry, instance: &SensorInstance) -> Vec<[f64; 2]> {
    let cam = instance.camera();
    instance
        .marker_points(geom)
        .iter()
        .filter_map(|sp| cam.project(&sp.position))
        .collect()
}

/// One tracked marker: position in the reference frame and its motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowVector {
    pub origin: [f64; 2],
    pub shift: [f64; 2],
}

/// Matches each reference centroid to its nearest current centroid within
/// `max_shift` px. Unmatched markers are dropped.
pub fn marker_flow(reference: &[Centroid], current: &[Centroid], max_shift: f64) -> Vec<FlowVector> {
    reference
        .iter()
        .filter_map(|r| {
            let best = current
                .iter()
                .map(|c| ((c.x - r.x).hypot(c.y - r.y), c))
                .min_by(|a, b| a.0.total_cmp(&b.0))?;
            (best.0 <= max_shift).then(|| FlowVector {
                origin: [r.x, r.y],
                shift: [best.1.x - r.x, best.1.y - r.y],
            })
        })
        .collect()
}

/// Mean tangential flow component about `center` (px). Positive when the
/// markers turn from image +x towards image +y.
pub fn flow_circulation(flow: &[FlowVector], center: [f64; 2]) -> f64 {
    let mut acc = 0.0;
    let mut k = 0usize;
    for f in flow {
        let rx = f.origin[0] - center[0];
        let ry = f.origin[1] - center[1];
        let r = rx.hypot(ry);
        if r < 1e-9 {
            continue;
        }
        acc += (rx * f.shift[1] - ry * f.shift[0]) / r;
        k += 1;
    }
    if k == 0 {
        0.0
    } else {
        acc / k as f64
    }
}

/// Mean marker shift, px.
pub fn mean_flow(flow: &[FlowVector]) -> [f64; 2] {
    if flow.is_empty() {
        return [0.0, 0.0];
    }
    let n = flow.len() as f64;
    let sx: f64 = flow.iter().map(|f| f.shift[0]).sum();
    let sy: f64 = flow.iter().map(|f| f.shift[1]).sum();
    [sx / n, sy / n]
}
