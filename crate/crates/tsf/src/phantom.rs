//! Procedural multi-contrast phantom.
//!
//! Each subject shares one latent anatomy (a random smooth field plus 2-4
//! nested ellipses) rendered through two latent tissue maps `p` and `q`.
//! Every sequence is a fixed monotone contrast transfer of a fixed mix of
//! `p` and `q`, so sequences are pixel-aligned and mutually predictable:
//! one input leaves a residual ambiguity, two generically pin both latents
//! down. Sequences 0 and 1 share the same mix, which makes sequence 1
//! derivable from sequence 0 up to the lesion. The optional lesion blob is
//! strongly elevated in sequence 1 and mildly in sequence 3 only, mimicking
//! a contrast-enhancement relationship with a partial witness.

use serde::{Deserialize, Serialize};
use tsf_core::rng::{derive_seed, Rng};
use tsf_core::tensor::Tensor;

use crate::error::{Result, TsfError};

pub const DEFAULT_LESION_PROBABILITY: f64 = 0.7;
pub const DEFAULT_SEQUENCES: usize = 4;

/// Canonical contrast names for the four-sequence default.
pub const SEQUENCE_NAMES: [&str; 4] = ["T1", "T1Gd", "T2", "Flair"];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhantomSpec {
    pub n_subjects: usize,
    pub height: usize,
    pub width: usize,
    pub master_seed: u64,
    #[serde(default = "default_lesion_probability")]
    pub lesion_probability: f64,
    #[serde(default = "default_sequences")]
    pub n_sequences: usize,
}

fn default_lesion_probability() -> f64 {
    DEFAULT_LESION_PROBABILITY
}

fn default_sequences() -> usize {
    DEFAULT_SEQUENCES
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(TsfError::InvalidSpec("n_subjects must be positive".into()));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(TsfError::InvalidSpec(format!(
                "dimensions {}x{} must be divisible by 4",
                self.height, self.width
            )));
        }
        if self.n_sequences < 2 {
            return Err(TsfError::InvalidSpec(
                "need at least 2 sequence kinds".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lesion_probability) {
            return Err(TsfError::InvalidSpec(format!(
                "lesion probability {} outside [0,1]",
                self.lesion_probability
            )));
        }
        Ok(())
    }

    pub fn sequence_names(&self) -> Vec<String> {
        (0..self.n_sequences)
            .map(|k| {
                if self.n_sequences == 4 {
                    SEQUENCE_NAMES[k].to_string()
                } else {
                    format!("seq{k}")
                }
            })
            .collect()
    }
}

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    cos_t: f64,
    sin_t: f64,
}

impl Ellipse {
    fn new(rng: &mut Rng, cx: f64, cy: f64, ax: f64, ay: f64) -> Self {
        let theta = rng.range(-0.3, 0.3);
        Ellipse {
            cx,
            cy,
            ax,
            ay,
            cos_t: theta.cos(),
            sin_t: theta.sin(),
        }
    }

    fn inside(&self, u: f64, v: f64) -> bool {
        let du = u - self.cx;
        let dv = v - self.cy;
        let ru = du * self.cos_t + dv * self.sin_t;
        let rv = -du * self.sin_t + dv * self.cos_t;
        (ru / self.ax).powi(2) + (rv / self.ay).powi(2) <= 1.0
    }
}

/// Bilinear upsample of a coarse grid of normals; roughly unit scale.
fn smooth_field(rng: &mut Rng, h: usize, w: usize) -> Vec<f64> {
    const CELLS: usize = 6;
    let grid: Vec<f64> = (0..(CELLS + 1) * (CELLS + 1)).map(|_| rng.normal()).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let gv = y as f64 / h as f64 * CELLS as f64;
        let gy = (gv as usize).min(CELLS - 1);
        let fy = gv - gy as f64;
        for x in 0..w {
            let gu = x as f64 / w as f64 * CELLS as f64;
            let gx = (gu as usize).min(CELLS - 1);
            let fx = gu - gx as f64;
            let g = |yy: usize, xx: usize| grid[yy * (CELLS + 1) + xx];
            let v = g(gy, gx) * (1.0 - fy) * (1.0 - fx)
                + g(gy, gx + 1) * (1.0 - fy) * fx
                + g(gy + 1, gx) * fy * (1.0 - fx)
                + g(gy + 1, gx + 1) * fy * fx;
            out.push(v);
        }
    }
    out
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Mixing coefficients of latent `p` per sequence (the rest is `q`).
/// Sequences 0 and 1 share a mix on purpose.
fn mix_coefficient(k: usize) -> f64 {
    match k % 4 {
        0 => 0.85,
        1 => 0.85,
        2 => 0.25,
        _ => 0.55,
    }
}

/// Monotone contrast transfer for sequence `k`: `[0,1] -> [-1,1]`.
fn transfer(k: usize, m: f64) -> f64 {
    let gamma = match k % 4 {
        0 => 1.0,
        1 => 0.7,
        2 => 1.4,
        _ => 1.9,
    };
    2.0 * m.powf(gamma) - 1.0
}

/// Lesion elevation applied after the transfer, per sequence.
fn lesion_gain(k: usize) -> f64 {
    match k % 4 {
        1 => 0.9,
        3 => 0.35,
        _ => 0.0,
    }
}

/// Render all sequences of one subject. Deterministic in
/// `(spec.master_seed, subject_index)`.
pub fn subject_images(spec: &PhantomSpec, subject_index: usize) -> Vec<Tensor<f32>> {
    let (h, w) = (spec.height, spec.width);
    let mut rng = Rng::new(derive_seed(spec.master_seed, subject_index as u64));

    let bcx = 0.5 + rng.range(-0.03, 0.03);
    let bcy = 0.5 + rng.range(-0.03, 0.03);
    let bax = rng.range(0.34, 0.42);
    let bay = rng.range(0.28, 0.36);
    let brain = Ellipse::new(&mut rng, bcx, bcy, bax, bay);

    // Nested rings: each adds a signed tissue step.
    let n_rings = 2 + rng.below(3);
    let mut rings = Vec::with_capacity(n_rings);
    let mut scale = rng.range(0.55, 0.75);
    for _ in 0..n_rings {
        let cx = brain.cx + rng.range(-0.05, 0.05);
        let cy = brain.cy + rng.range(-0.05, 0.05);
        let (ax, ay) = (brain.ax * scale, brain.ay * scale);
        let e = Ellipse::new(&mut rng, cx, cy, ax, ay);
        let magnitude = rng.range(0.12, 0.3);
        let delta = if rng.chance(0.5) { magnitude } else { -magnitude };
        rings.push((e, delta));
        scale *= rng.range(0.5, 0.75);
    }

    let s_base = smooth_field(&mut rng, h, w);
    let s_a = smooth_field(&mut rng, h, w);
    let s_b = smooth_field(&mut rng, h, w);

    let has_lesion = rng.chance(spec.lesion_probability);
    let (lu, lv, lsigma) = {
        let lu = brain.cx + rng.range(-0.5, 0.5) * brain.ax * 0.7;
        let lv = brain.cy + rng.range(-0.5, 0.5) * brain.ay * 0.7;
        let radius = rng.range(0.04, 0.09);
        (lu, lv, radius / 1.5)
    };

    let mut images: Vec<Vec<f32>> = vec![Vec::with_capacity(h * w); spec.n_sequences];
    for y in 0..h {
        let v = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64;
            let idx = y * w + x;
            if !brain.inside(u, v) {
                for img in images.iter_mut() {
                    img.push(-1.0);
                }
                continue;
            }
            let mut anatomy = 0.45 + 0.25 * s_base[idx];
            for (e, delta) in &rings {
                if e.inside(u, v) {
                    anatomy += delta;
                }
            }
            let anatomy = anatomy.clamp(0.05, 1.0);
            let p = clamp01(anatomy + 0.12 * s_a[idx]);
            let q = clamp01(0.12 + 0.78 * anatomy + 0.12 * s_b[idx]);

            let lesion = if has_lesion {
                let d2 = (u - lu).powi(2) + (v - lv).powi(2);
                (-d2 / (2.0 * lsigma * lsigma)).exp()
            } else {
                0.0
            };

            for (k, img) in images.iter_mut().enumerate() {
                let alpha = mix_coefficient(k);
                let m = alpha * p + (1.0 - alpha) * q;
                let value = (transfer(k, m) + lesion_gain(k) * lesion).clamp(-1.0, 1.0);
                img.push(value as f32);
            }
        }
    }

    images
        .into_iter()
        .map(|data| Tensor::from_vec(&[1, h, w], data).expect("phantom image shape"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> PhantomSpec {
        PhantomSpec {
            n_subjects: 3,
            height: 64,
            width: 64,
            master_seed: seed,
            lesion_probability: 1.0,
            n_sequences: 4,
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = small_spec(7);
        let a = subject_images(&spec, 1);
        let b = subject_images(&spec, 1);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.data(), y.data());
        }
        let c = subject_images(&spec, 2);
        assert_ne!(a[0].data(), c[0].data(), "subjects must differ");
    }

    #[test]
    fn pixels_in_range_and_sequences_distinct() {
        let spec = small_spec(11);
        for subject in 0..3 {
            let imgs = subject_images(&spec, subject);
            for img in &imgs {
                assert!(img.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
            }
            // pairwise mean absolute difference above the degeneracy floor
            for i in 0..imgs.len() {
                for j in (i + 1)..imgs.len() {
                    let mad: f64 = imgs[i]
                        .data()
                        .iter()
                        .zip(imgs[j].data())
                        .map(|(&a, &b)| (a as f64 - b as f64).abs())
                        .sum::<f64>()
                        / imgs[i].numel() as f64;
                    assert!(mad > 0.05, "sequences {i},{j} too similar: {mad}");
                }
            }
        }
    }

    #[test]
    fn lesion_elevates_sequence_one_most() {
        // With lesion probability 1 and the shared mix between sequences 0
        // and 1, the lesion is the dominant difference between the
        // monotone-transfer prediction of sequence 1 from sequence 0.
        let spec = small_spec(13);
        let imgs = subject_images(&spec, 0);
        let predict_from_0 = |v: f32| {
            // invert transfer 0 (identity gamma), re-apply transfer 1
            let m = ((v as f64) + 1.0) / 2.0;
            (2.0 * m.powf(0.7) - 1.0) as f32
        };
        let max_excess = imgs[0]
            .data()
            .iter()
            .zip(imgs[1].data())
            .map(|(&a, &b)| b - predict_from_0(a))
            .fold(f32::MIN, f32::max);
        assert!(
            max_excess > 0.3,
            "expected a strong unexplained elevation, got {max_excess}"
        );
    }

    #[test]
    fn anatomy_edges_align_across_sequences() {
        // gradient-magnitude edge maps (per-sequence 90th percentile
        // threshold) must overlap across sequences of one subject
        let spec = small_spec(17);
        let imgs = subject_images(&spec, 1);
        let (h, w) = (spec.height, spec.width);
        let edge_map = |img: &Tensor<f32>| {
            let d = img.data();
            let mut mags = vec![0.0f64; h * w];
            for y in 0..h - 1 {
                for x in 0..w - 1 {
                    let c = d[y * w + x] as f64;
                    let gx = d[y * w + x + 1] as f64 - c;
                    let gy = d[(y + 1) * w + x] as f64 - c;
                    mags[y * w + x] = (gx * gx + gy * gy).sqrt();
                }
            }
            let mut sorted = mags.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let thr = sorted[(0.9 * (sorted.len() - 1) as f64) as usize];
            mags.iter().map(|&m| m > thr).collect::<Vec<bool>>()
        };
        let edges: Vec<Vec<bool>> = imgs.iter().map(edge_map).collect();
        for i in 0..edges.len() {
            for j in (i + 1)..edges.len() {
                let inter = edges[i]
                    .iter()
                    .zip(&edges[j])
                    .filter(|(a, b)| **a && **b)
                    .count();
                let union = edges[i]
                    .iter()
                    .zip(&edges[j])
                    .filter(|(a, b)| **a || **b)
                    .count();
                let iou = inter as f64 / union as f64;
                assert!(iou > 0.5, "edge IoU between {i} and {j} is {iou}");
            }
        }
    }
}
