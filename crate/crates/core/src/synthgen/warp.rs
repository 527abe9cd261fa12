//! Geometric distortions applied jointly to pixels and annotations.

use rand::Rng;

use super::{Distortion, DistortionKind};
use crate::datamodel::BBox;

pub(super) enum Warp {
    Perspective { forward: [f64; 9], inverse: [f64; 9] },
    Fold { amplitude: f64, period: f64, phase: f64 },
}

impl Warp {
    pub(super) fn random(d: Distortion, width: f64, height: f64, rng: &mut impl Rng) -> Warp {
        match d.kind {
            DistortionKind::Perspective | DistortionKind::None => {
                let reach = d.magnitude * 0.05 * width.min(height);
                let src = [[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]];
                let mut dst = src;
                for p in dst.iter_mut() {
                    p[0] += rng.random_range(-1.0..=1.0) * reach;
                    p[1] += rng.random_range(-1.0..=1.0) * reach;
                }
                Warp::Perspective {
                    forward: homography(&src, &dst),
                    inverse: homography(&dst, &src),
                }
            }
            DistortionKind::Fold => Warp::Fold {
                amplitude: d.magnitude * 3.0,
                period: rng.random_range(0.8..2.0) * width,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            },
        }
    }

    pub(super) fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Warp::Perspective { forward, .. } => apply(forward, x, y),
            Warp::Fold { amplitude, period, phase } => {
                (x, y + amplitude * (std::f64::consts::TAU * x / period + phase).sin())
            }
        }
    }

    fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Warp::Perspective { inverse, .. } => apply(inverse, x, y),
            Warp::Fold { amplitude, period, phase } => {
                (x, y - amplitude * (std::f64::consts::TAU * x / period + phase).sin())
            }
        }
    }

    /// Corners of `b` after warping, clockwise from top-left.
    pub(super) fn polygon(&self, b: &BBox) -> [[f64; 2]; 4] {
        [(b.x0, b.y0), (b.x1, b.y0), (b.x1, b.y1), (b.x0, b.y1)].map(|(x, y)| {
            let (u, v) = self.forward(x, y);
            [u, v]
        })
    }

    /// Axis-aligned hull of the warped box outline.
    pub(super) fn bounding_box(&self, b: &BBox) -> BBox {
        const STEPS: usize = 16;
        let mut pts = Vec::with_capacity(4 * (STEPS + 1));
        for k in 0..=STEPS {
            let t = k as f64 / STEPS as f64;
            let x = b.x0 + t * b.width();
            let y = b.y0 + t * b.height();
            for (px, py) in [(x, b.y0), (x, b.y1), (b.x0, y), (b.x1, y)] {
                let (u, v) = self.forward(px, py);
                pts.push([u, v]);
            }
        }
        BBox::from_points(&pts)
    }

    /// Inverse-maps every output pixel center and samples bilinearly.
    pub(super) fn resample(&self, src: &[f32], width: usize, height: usize, fill: f32) -> Vec<f32> {
        let at = |x: isize, y: isize| -> f32 {
            if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
                fill
            } else {
                src[y as usize * width + x as usize]
            }
        };
        let mut out = vec![fill; width * height];
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = self.inverse(x as f64 + 0.5, y as f64 + 0.5);
                let (fx, fy) = (sx - 0.5, sy - 0.5);
                let (x0, y0) = (fx.floor(), fy.floor());
                let (ax, ay) = ((fx - x0) as f32, (fy - y0) as f32);
                let (x0, y0) = (x0 as isize, y0 as isize);
                out[y * width + x] = (1.0 - ay) * ((1.0 - ax) * at(x0, y0) + ax * at(x0 + 1, y0))
                    + ay * ((1.0 - ax) * at(x0, y0 + 1) + ax * at(x0 + 1, y0 + 1));
            }
        }
        out
    }
}

fn apply(h: &[f64; 9], x: f64, y: f64) -> (f64, f64) {
    let w = h[6] * x + h[7] * y + h[8];
    ((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w)
}

/// Homography taking the four `src` points onto `dst`.
fn homography(src: &[[f64; 2]; 4], dst: &[[f64; 2]; 4]) -> [f64; 9] {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let [x, y] = src[i];
        let [u, v] = dst[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gaussian elimination with partial pivoting on the augmented 8x9 system.
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap_or(col);
        a.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut h = [1.0; 9];
    for i in 0..8 {
        h[i] = a[i][8] / a[i][i];
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn homography_maps_corners() {
        let src = [[0.0, 0.0], [10.0, 0.0], [10.0, 8.0], [0.0, 8.0]];
        let dst = [[1.0, 0.5], [9.0, -0.5], [10.5, 9.0], [-0.5, 7.5]];
        let h = homography(&src, &dst);
        for (s, d) in src.iter().zip(&dst) {
            let (u, v) = apply(&h, s[0], s[1]);
            assert!((u - d[0]).abs() < 1e-9 && (v - d[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn perspective_round_trips() {
        let mut rng = rand::rng();
        let w = Warp::random(
            Distortion { kind: DistortionKind::Perspective, magnitude: 1.0 },
            100.0,
            80.0,
            &mut rng,
        );
        let (u, v) = w.forward(33.0, 21.0);
        let (x, y) = w.inverse(u, v);
        assert!((x - 33.0).abs() < 1e-9 && (y - 21.0).abs() < 1e-9);
    }
}
