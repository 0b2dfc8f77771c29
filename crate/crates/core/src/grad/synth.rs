use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{DepthMap, DepthSource};
use crate::error::{Error, Result};
use crate::numeric::{Shape, Tensor};

/// An RGB-D image with a binary foreground mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub rgb: Tensor,
    pub depth: DepthMap,
    pub mask: Tensor,
    pub seed: u64,
}

const MIN_AREA: f64 = 0.05;
const MAX_AREA: f64 = 0.60;

enum Shape2 {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        rot: f64,
    },
    Polygon(Vec<(f64, f64)>),
}

impl Shape2 {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Shape2 {
        let cx = rng.gen_range(0.3..0.7) * size;
        let cy = rng.gen_range(0.3..0.7) * size;
        if rng.gen_bool(0.5) {
            Shape2::Ellipse {
                cx,
                cy,
                rx: rng.gen_range(0.12..0.4) * size,
                ry: rng.gen_range(0.12..0.4) * size,
                rot: rng.gen_range(0.0..std::f64::consts::PI),
            }
        } else {
            let n = rng.gen_range(3..=7);
            let mut angles: Vec<f64> = (0..n)
                .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
                .collect();
            angles.sort_by(f64::total_cmp);
            let pts = angles
                .into_iter()
                .map(|a| {
                    let r = rng.gen_range(0.15..0.45) * size;
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect();
            Shape2::Polygon(pts)
        }
    }

    fn contains(&self, px: f64, py: f64) -> bool {
        match self {
            Shape2::Ellipse {
                cx,
                cy,
                rx,
                ry,
                rot,
            } => {
                let (dx, dy) = (px - cx, py - cy);
                let (s, c) = rot.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape2::Polygon(pts) => {
                let mut inside = false;
                let mut j = pts.len() - 1;
                for i in 0..pts.len() {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[j];
                    if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

/// Smooth periodic pattern with a period of `period` pixels along a random direction.
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng, min_period: f64, max_period: f64, amp: f64) -> Wave {
        let period = rng.gen_range(min_period..max_period);
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let k = std::f64::consts::TAU / period;
        Wave {
            fx: k * theta.cos(),
            fy: k * theta.sin(),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.amp * (self.fx * x + self.fy * y + self.phase).sin()
    }
}

fn scene(seed: u64, size: usize) -> Result<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let (shape, mask) = loop {
        let shape = Shape2::random(&mut rng, s);
        let mask = Tensor::from_fn(Shape::new(1, size, size), |_, y, x| {
            shape.contains(x as f64 + 0.5, y as f64 + 0.5) as u8 as f64
        });
        let frac = mask.mean();
        if (MIN_AREA..=MAX_AREA).contains(&frac) {
            break (shape, mask);
        }
    };
    drop(shape);

    // Closer surfaces are lit more strongly, so the foreground is brighter in every channel.
    let bg_color: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..0.25)).collect();
    let fg_color: Vec<f64> = bg_color
        .iter()
        .map(|&c| c + rng.gen_range(0.45..0.6))
        .collect();
    let bg_waves: Vec<Wave> = (0..3)
        .map(|_| Wave::random(&mut rng, s / 2.0, s * 1.5, 0.04))
        .collect();
    let fg_waves: Vec<Wave> = (0..3)
        .map(|_| Wave::random(&mut rng, 4.0, 8.0, 0.04))
        .collect();
    let rgb = Tensor::from_fn(Shape::new(3, size, size), |c, y, x| {
        let (fx, fy) = (x as f64, y as f64);
        let v = if mask.at(0, y, x) > 0.0 {
            fg_color[c] + fg_waves[c].at(fx, fy)
        } else {
            bg_color[c] + bg_waves[c].at(fx, fy)
        };
        v.clamp(0.0, 1.0)
    });

    let tilt = rng.gen_range(-1.0..1.0);
    let bg_wave = Wave::random(&mut rng, s, 2.0 * s, 0.04);
    let fg_base = rng.gen_range(0.62..0.8);
    let fg_wave = Wave::random(&mut rng, s / 2.0, s, 0.05);
    let depth = Tensor::from_fn(Shape::new(1, size, size), |_, y, x| {
        let (fx, fy) = (x as f64, y as f64);
        if mask.at(0, y, x) > 0.0 {
            fg_base + fg_wave.at(fx, fy)
        } else {
            0.25 + 0.12 * tilt * (fy / (s - 1.0) - 0.5) + bg_wave.at(fx, fy)
        }
    });
    Ok(SyntheticScene {
        rgb,
        depth: DepthMap::new(depth, DepthSource::Synthetic)?,
        mask,
        seed,
    })
}

/// `n` scenes of `size × size`; scene `i` is generated from `seed + i`.
pub fn synth_scenes(seed: u64, n: usize, size: usize) -> Result<Vec<SyntheticScene>> {
    if size < 32 {
        return Err(Error::invalid(
            "synth_scenes",
            format!("size {size} must be at least 32"),
        ));
    }
    (0..n as u64)
        .map(|i| scene(seed.wrapping_add(i), size))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(
            synth_scenes(7, 3, 32).unwrap(),
            synth_scenes(7, 3, 32).unwrap()
        );
        assert_ne!(
            synth_scenes(7, 1, 32).unwrap(),
            synth_scenes(8, 1, 32).unwrap()
        );
    }

    #[test]
    fn generator_constraints() {
        for sc in synth_scenes(0, 40, 32).unwrap() {
            let area = sc.mask.mean();
            assert!((MIN_AREA..=MAX_AREA).contains(&area), "area {area}");
            let d = sc.depth.tensor();
            let (mut fg, mut nf, mut bg, mut nb) = (0.0, 0.0, 0.0, 0.0);
            for (&m, &v) in sc.mask.data().iter().zip(d.data()) {
                if m > 0.0 {
                    fg += v;
                    nf += 1.0;
                    assert!(v >= 0.55);
                } else {
                    bg += v;
                    nb += 1.0;
                    assert!(v <= 0.45);
                }
            }
            assert!(fg / nf > bg / nb);
            assert!(sc.rgb.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn small_size_rejected() {
        assert!(synth_scenes(0, 1, 16).is_err());
    }
}
