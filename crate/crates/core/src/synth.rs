//! Synthetic multimodal volumes with a shared latent anatomy, axial
//! slicing, nearest-neighbour resizing and subject-level splits.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Modality names, in channel order.
pub const MODALITIES: [&str; 4] = ["T1", "T1-Gd", "T2", "FLAIR"];

/// What the label marks.
pub const INSTANCE: &str = "tumor";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeDims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for VolumeDims {
    fn default() -> Self {
        Self { depth: 16, height: 256, width: 256 }
    }
}

/// Knobs of the renderer. Defaults produce clearly separable classes with
/// modality-specific blind spots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Voxel noise standard deviation.
    pub noise: f64,
    /// Amplitude of the multiplicative bias field.
    pub bias_field: f64,
    /// Angular width (radians) of the region where one modality shows no lesion contrast.
    pub blind_sector: f64,
    /// Foreground fraction range the threshold is drawn from.
    pub fg_fraction: (f64, f64),
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            noise: 0.06,
            bias_field: 0.15,
            blind_sector: 1.5,
            fg_fraction: (0.06, 0.25),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticVolume {
    /// `[M, D, H, W]`, values in `[0, 1]`.
    pub voxels: Tensor,
    /// `[D, H, W]` binary.
    pub label: Tensor,
    pub modality_names: Vec<String>,
    pub seed: u64,
}

/// One axial slice across all modalities.
#[derive(Debug, Clone)]
pub struct ModalityStack {
    /// One `[1, S, S]` image per modality.
    pub images: Vec<Tensor>,
    /// `[S_m, S_m]` binary.
    pub label: Tensor,
    pub modality_names: Vec<String>,
    pub subject_id: String,
    pub slice_index: usize,
}

impl ModalityStack {
    /// Keeps only the named modalities, in the given order.
    pub fn select(&self, names: &[String]) -> Result<ModalityStack> {
        let mut images = Vec::with_capacity(names.len());
        for n in names {
            let i = self
                .modality_names
                .iter()
                .position(|m| m == n)
                .ok_or_else(|| Error::Input(format!("unknown modality {n}")))?;
            images.push(self.images[i].clone());
        }
        Ok(ModalityStack {
            images,
            label: self.label.clone(),
            modality_names: names.to_vec(),
            subject_id: self.subject_id.clone(),
            slice_index: self.slice_index,
        })
    }
}

/// Smooth noise in `[-1, 1]`: uniform values on a coarse lattice, trilinearly
/// interpolated onto `[d, h, w]`.
fn smooth_noise(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize, cell: (usize, usize, usize)) -> Vec<f64> {
    let gd = d / cell.0 + 2;
    let gh = h / cell.1 + 2;
    let gw = w / cell.2 + 2;
    let lattice: Vec<f64> = (0..gd * gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
    let at = |z: usize, y: usize, x: usize| lattice[(z * gh + y) * gw + x];
    let mut out = vec![0.0; d * h * w];
    for z in 0..d {
        let fz = z as f64 / cell.0 as f64;
        let (z0, tz) = (fz as usize, fz - libm::floor(fz));
        for y in 0..h {
            let fy = y as f64 / cell.1 as f64;
            let (y0, ty) = (fy as usize, fy - libm::floor(fy));
            for x in 0..w {
                let fx = x as f64 / cell.2 as f64;
                let (x0, tx) = (fx as usize, fx - libm::floor(fx));
                let mut v = 0.0;
                for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
                    for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
                        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                            v += wz * wy * wx * at(z0 + dz, y0 + dy, x0 + dx);
                        }
                    }
                }
                out[(z * h + y) * w + x] = v;
            }
        }
    }
    out
}

struct Blob {
    cy: f64,
    cx: f64,
    cz: f64,
    r: f64,
    rz: f64,
}

/// Generates one subject with `m` co-registered modalities.
pub fn generate_volume(seed: u64, m: usize, dims: VolumeDims) -> Result<SyntheticVolume> {
    generate_volume_with(seed, m, dims, &SynthParams::default())
}

pub fn generate_volume_with(seed: u64, m: usize, dims: VolumeDims, params: &SynthParams) -> Result<SyntheticVolume> {
    if !(1..=MODALITIES.len()).contains(&m) {
        return Err(Error::Config(format!("modality count {m} outside [1, 4]")));
    }
    let VolumeDims { depth: d, height: h, width: w } = dims;
    if d == 0 || h < 16 || w < 16 {
        return Err(Error::Config(format!("volume dims {:?}: need depth >= 1 and slices of at least 16x16", (d, h, w))));
    }
    let (lo, hi) = params.fg_fraction;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::Config("fg_fraction must satisfy 0 < lo <= hi < 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = h.min(w) as f64;

    // Latent anatomy: 1-3 elongated bumps plus low-frequency noise.
    let n_blobs = rng.random_range(1..=3);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            cy: rng.random_range(0.3..0.7) * h as f64,
            cx: rng.random_range(0.3..0.7) * w as f64,
            cz: rng.random_range(0.35..0.65) * d as f64,
            r: rng.random_range(0.10..0.20) * side,
            rz: rng.random_range(1.2..2.0) * d as f64,
        })
        .collect();
    let wobble = smooth_noise(&mut rng, d, h, w, (8, 32, 32));
    let mut field = vec![0.0; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut f = 0.0f64;
                for b in &blobs {
                    let q = ((y as f64 - b.cy) / b.r).powi(2)
                        + ((x as f64 - b.cx) / b.r).powi(2)
                        + ((z as f64 - b.cz) / b.rz).powi(2);
                    f = f.max(libm::exp(-q));
                }
                let i = (z * h + y) * w + x;
                field[i] = f + 0.15 * wobble[i];
            }
        }
    }
    let fraction = rng.random_range(lo..=hi);
    let threshold = quantile(&field, 1.0 - fraction);
    let core_threshold = quantile(&field, 1.0 - 0.4 * fraction);
    let rim_threshold = quantile(&field, 1.0 - 0.7 * fraction);
    let label: Vec<f64> = field.iter().map(|&f| if f > threshold { 1.0 } else { 0.0 }).collect();

    // Shared anatomical texture seen by every sequence.
    let texture = smooth_noise(&mut rng, d, h, w, (4, 16, 16));
    let primary = &blobs[0];
    let theta0 = rng.random_range(0.0..core::f64::consts::TAU);

    let mut voxels = vec![0.0; m * d * h * w];
    for (mi, out) in voxels.chunks_mut(d * h * w).enumerate() {
        let bias = smooth_noise(&mut rng, d, h, w, (16, 64, 64));
        let sector_start = theta0 + mi as f64 * core::f64::consts::TAU / MODALITIES.len() as f64;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let f = field[i];
                    let mut fg = label[i] > 0.5;
                    if fg {
                        let ang = libm::atan2(y as f64 - primary.cy, x as f64 - primary.cx);
                        let rel = (ang - sector_start).rem_euclid(core::f64::consts::TAU);
                        if rel < params.blind_sector {
                            fg = false;
                        }
                    }
                    let tex = 0.08 * texture[i];
                    let base = match (mi, fg) {
                        (0, false) => 0.30 + tex,
                        (0, true) => 0.75 + 0.5 * tex,
                        (1, false) => 0.30 + tex,
                        (1, true) if f > core_threshold => 0.92,
                        (1, true) => 0.62,
                        (2, false) => 0.65 - tex,
                        (2, true) => 0.20 - 0.5 * tex,
                        (_, false) => 0.35 + 0.5 * tex,
                        (_, true) if f <= rim_threshold => 0.95,
                        (_, true) => 0.62,
                    };
                    let n: f64 = StandardNormal.sample(&mut rng);
                    let v = base * (1.0 + params.bias_field * bias[i]) + params.noise * n;
                    out[i] = v.clamp(0.0, 1.0);
                }
            }
        }
    }

    Ok(SyntheticVolume {
        voxels: Tensor::new(&[m, d, h, w], voxels)?,
        label: Tensor::new(&[d, h, w], label)?,
        modality_names: MODALITIES[..m].iter().map(|s| s.to_string()).collect(),
        seed,
    })
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    let k = ((v.len() - 1) as f64 * q) as usize;
    let (_, nth, _) = v.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    *nth
}

/// Splits a volume into one stack per axial index.
pub fn slice_volume(v: &SyntheticVolume, subject_id: &str, drop_empty: bool) -> Vec<ModalityStack> {
    let s = v.voxels.shape();
    let (m, d, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let mut out = Vec::with_capacity(d);
    for z in 0..d {
        let label = Tensor::new(&[h, w], v.label.data()[z * plane..(z + 1) * plane].to_vec()).expect("slice");
        if drop_empty && label.sum() == 0.0 {
            continue;
        }
        let images = (0..m)
            .map(|mi| {
                let off = (mi * d + z) * plane;
                Tensor::new(&[1, h, w], v.voxels.data()[off..off + plane].to_vec()).expect("slice")
            })
            .collect();
        out.push(ModalityStack {
            images,
            label,
            modality_names: v.modality_names.clone(),
            subject_id: subject_id.into(),
            slice_index: z,
        });
    }
    out
}

/// Nearest-neighbour resize of the trailing two axes to `target × target`,
/// sampling source index `floor(i · S / target)`.
pub fn resize_nearest(img: &Tensor, target: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() < 2 || target == 0 {
        return Err(Error::Input(format!("cannot resize {:?} to {}", s, target)));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h == 0 || w == 0 {
        return Err(Error::Input("cannot resize an empty image".into()));
    }
    if h == target && w == target {
        return Ok(img.clone());
    }
    let lead: usize = s[..s.len() - 2].iter().product();
    let src = img.data();
    let mut out = Vec::with_capacity(lead * target * target);
    for l in 0..lead {
        let base = l * h * w;
        for i in 0..target {
            let si = i * h / target;
            for j in 0..target {
                let sj = j * w / target;
                out.push(src[base + si * w + sj]);
            }
        }
    }
    let mut shape = s[..s.len() - 2].to_vec();
    shape.extend([target, target]);
    Tensor::new(&shape, out)
}

/// Subject indices for train / validation / test (70/15/15), a pure
/// function of `seed`.
pub fn split_subjects(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5917));
    // Small cohorts still get one validation and one test subject.
    let min = usize::from(n >= 3);
    let n_val = ((n as f64 * 0.15).round() as usize).max(min);
    let n_test = ((n as f64 * 0.15).round() as usize).max(min);
    let n_train = n.saturating_sub(n_val + n_test);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    (order, val, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VolumeDims {
        VolumeDims { depth: 16, height: 32, width: 32 }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_volume(11, 4, small()).unwrap();
        let b = generate_volume(11, 4, small()).unwrap();
        assert_eq!(a.voxels, b.voxels);
        assert_eq!(a.label, b.label);
        let c = generate_volume(12, 4, small()).unwrap();
        assert_ne!(a.label, c.label);
    }

    #[test]
    fn modalities_differ() {
        let v = generate_volume(3, 4, small()).unwrap();
        let chans: Vec<Tensor> = (0..4).map(|i| v.voxels.index_outer(i)).collect();
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(chans[i], chans[j]);
            }
        }
    }

    #[test]
    fn bad_arguments_are_config_errors() {
        assert!(matches!(generate_volume(0, 0, small()), Err(Error::Config(_))));
        assert!(matches!(generate_volume(0, 5, small()), Err(Error::Config(_))));
        let tiny = VolumeDims { depth: 8, height: 8, width: 32 };
        assert!(matches!(generate_volume(0, 2, tiny), Err(Error::Config(_))));
    }

    #[test]
    fn slicing_counts_and_labels() {
        let v = generate_volume(5, 2, small()).unwrap();
        let stacks = slice_volume(&v, "s0", false);
        assert_eq!(stacks.len(), 16);
        for (z, s) in stacks.iter().enumerate() {
            assert_eq!(s.images.len(), 2);
            assert_eq!(s.label.data(), &v.label.data()[z * 1024..(z + 1) * 1024]);
        }
    }

    #[test]
    fn resize_examples() {
        let img = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = resize_nearest(&img, 4).unwrap();
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert_eq!(resize_nearest(&up, 2).unwrap(), img);
        assert_eq!(resize_nearest(&img, 2).unwrap(), img);
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let (tr, va, te) = split_subjects(60, 9);
        assert_eq!((tr.len(), va.len(), te.len()), (42, 9, 9));
        let mut all: Vec<usize> = tr.iter().chain(&va).chain(&te).copied().collect();
        all.sort();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        assert_eq!(split_subjects(60, 9), (tr, va, te));
    }
}
