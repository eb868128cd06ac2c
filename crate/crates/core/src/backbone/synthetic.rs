//! Desk-scale stand-in for a frozen self-supervised ViT.
//!
//! Each token summarizes its patch: the fraction of silhouette pixels
//! (pixels whose chroma exceeds a threshold), the mean silhouette color and
//! the mean background luminance. Fixed random projections turn these into
//! four levels of features:
//!
//! * f1, f2 are low level: dominated by color and background texture;
//! * f3 mixes in the 3×3 neighbourhood occupancy pattern (local shape);
//! * f4 is "semantic": silhouette tokens sit near a foreground centre whose
//!   direction depends on a global shape descriptor of the silhouette,
//!   background tokens near a fixed background centre.
//!
//! Additive noise is seeded by the frame content, so the map from frame to
//! features is a pure function.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TokenGrid, TokenProvider};
use crate::error::{Error, Result};
use crate::ingest::Frame;

const SHAPE_DIM: usize = 6;
const COLOR_DIM: usize = 4;
const NEIGHBOURS: usize = 9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProviderConfig {
    pub embed_dim: usize,
    pub patch_size: usize,
    pub seed: u64,
    /// Standard deviation of the additive per-entry noise.
    pub noise: f64,
    /// Norm of the f4 foreground / background cluster centres.
    pub cluster_norm: f64,
    /// Pixels with `max(rgb) - min(rgb)` above this are silhouette.
    pub chroma_threshold: f64,
    /// Swap the f4 foreground and background centres.
    pub swap_clusters: bool,
}

impl Default for SyntheticProviderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 384,
            patch_size: 14,
            seed: 0,
            noise: 0.05,
            cluster_norm: 3.0,
            chroma_threshold: 0.15,
            swap_clusters: false,
        }
    }
}

/// Per-token patch statistics.
struct PatchStats {
    occupancy: Array2<f64>,
    /// rows × cols × 4: mean silhouette rgb and a constant 1
    color: Array3<f64>,
    background: Array2<f64>,
}

pub struct SyntheticProvider {
    cfg: SyntheticProviderConfig,
    color_proj: [Array2<f64>; 3],
    bg_proj: [Array1<f64>; 3],
    shape_proj: [Array2<f64>; 2],
    fg_center: Array1<f64>,
    bg_center: Array1<f64>,
    descriptor_proj: Array2<f64>,
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let d = Normal::new(0.0, std).unwrap();
    Array2::from_shape_simple_fn((rows, cols), || d.sample(rng))
}

fn gaussian_vector(len: usize, norm: f64, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let d = Normal::new(0.0, 1.0).unwrap();
    let v = Array1::from_shape_simple_fn(len, || d.sample(rng));
    let n: f64 = v.dot(&v);
    let n = n.sqrt().max(1e-12);
    v * (norm / n)
}

impl SyntheticProvider {
    pub fn new(cfg: SyntheticProviderConfig) -> Self {
        let e = cfg.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let scale = 1.0 / (e as f64).sqrt();
        let color_proj = [
            gaussian_matrix(e, COLOR_DIM, 2.0 * scale, &mut rng),
            gaussian_matrix(e, COLOR_DIM, 1.5 * scale, &mut rng),
            gaussian_matrix(e, COLOR_DIM, 0.6 * scale, &mut rng),
        ];
        let bg_proj = [
            gaussian_vector(e, 1.5, &mut rng),
            gaussian_vector(e, 1.0, &mut rng),
            gaussian_vector(e, 0.3, &mut rng),
        ];
        let shape_proj = [
            gaussian_matrix(e, NEIGHBOURS, 0.5 * scale, &mut rng),
            gaussian_matrix(e, NEIGHBOURS, 1.2 * scale, &mut rng),
        ];
        let fg_center = gaussian_vector(e, cfg.cluster_norm, &mut rng);
        let bg_center = gaussian_vector(e, cfg.cluster_norm, &mut rng);
        let descriptor_proj = gaussian_matrix(e, SHAPE_DIM, 1.5 * scale, &mut rng);
        let (fg_center, bg_center) = if cfg.swap_clusters {
            (bg_center, fg_center)
        } else {
            (fg_center, bg_center)
        };
        Self {
            cfg,
            color_proj,
            bg_proj,
            shape_proj,
            fg_center,
            bg_center,
            descriptor_proj,
        }
    }

    pub fn config(&self) -> &SyntheticProviderConfig {
        &self.cfg
    }

    pub fn fg_center(&self) -> &Array1<f64> {
        &self.fg_center
    }

    pub fn bg_center(&self) -> &Array1<f64> {
        &self.bg_center
    }

    fn patch_stats(&self, frame: &Frame) -> PatchStats {
        let (h, w, _) = frame.dim();
        let ps = self.cfg.patch_size;
        let (gh, gw) = (h / ps, w / ps);
        let mut occupancy = Array2::zeros((gh, gw));
        let mut color = Array3::zeros((gh, gw, COLOR_DIM));
        let mut background = Array2::zeros((gh, gw));
        for r in 0..gh {
            for c in 0..gw {
                let (mut fg, mut rgb, mut lum, mut bg) = (0usize, [0.0; 3], 0.0, 0usize);
                for y in r * ps..(r + 1) * ps {
                    for x in c * ps..(c + 1) * ps {
                        let p = [frame[[y, x, 0]], frame[[y, x, 1]], frame[[y, x, 2]]];
                        let hi = p[0].max(p[1]).max(p[2]);
                        let lo = p[0].min(p[1]).min(p[2]);
                        if hi - lo > self.cfg.chroma_threshold {
                            fg += 1;
                            for k in 0..3 {
                                rgb[k] += p[k];
                            }
                        } else {
                            bg += 1;
                            lum += (p[0] + p[1] + p[2]) / 3.0;
                        }
                    }
                }
                let n = (ps * ps) as f64;
                occupancy[[r, c]] = fg as f64 / n;
                if fg > 0 {
                    for k in 0..3 {
                        color[[r, c, k]] = rgb[k] / fg as f64;
                    }
                    color[[r, c, 3]] = 1.0;
                }
                if bg > 0 {
                    background[[r, c]] = lum / bg as f64;
                }
            }
        }
        PatchStats {
            occupancy,
            color,
            background,
        }
    }

    /// Global silhouette descriptor: occupied width of five horizontal bands
    /// of the silhouette bounding box, plus its aspect ratio.
    fn shape_descriptor(occupancy: &Array2<f64>) -> Array1<f64> {
        let (gh, gw) = occupancy.dim();
        let rows: Vec<usize> = (0..gh)
            .filter(|&r| (0..gw).any(|c| occupancy[[r, c]] > 0.0))
            .collect();
        let mut d = Array1::zeros(SHAPE_DIM);
        let (Some(&top), Some(&bottom)) = (rows.first(), rows.last()) else {
            return d;
        };
        let height = (bottom - top + 1) as f64;
        let bands = SHAPE_DIM - 1;
        for b in 0..bands {
            let r0 = top + (b as f64 * height / bands as f64).floor() as usize;
            let r1 = (top + ((b + 1) as f64 * height / bands as f64).ceil() as usize).min(bottom + 1);
            let mut width = 0.0;
            for r in r0..r1.max(r0 + 1) {
                width += (0..gw).map(|c| occupancy[[r, c]]).sum::<f64>();
            }
            d[b] = width / (r1.max(r0 + 1) - r0) as f64 / gw as f64 * 2.0 - 0.5;
        }
        d[bands] = height / gh as f64 - 0.5;
        d
    }

    fn noise_rng(&self, frame: &Frame) -> ChaCha8Rng {
        // FNV-1a over the 8-bit quantized frame, mixed with the seed
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325 ^ self.cfg.seed;
        for v in frame.iter() {
            let q = (v.clamp(0.0, 1.0) * 255.0).round() as u64;
            hash ^= q;
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
        ChaCha8Rng::seed_from_u64(hash)
    }

    fn levels(&self, frame: &Frame) -> [TokenGrid; 4] {
        let stats = self.patch_stats(frame);
        let (gh, gw) = stats.occupancy.dim();
        let e = self.cfg.embed_dim;
        let descriptor = Self::shape_descriptor(&stats.occupancy);
        let fg_dir = &self.fg_center + &self.descriptor_proj.dot(&descriptor);
        let mut rng = self.noise_rng(frame);
        let noise = Normal::new(0.0, self.cfg.noise.max(0.0)).unwrap();

        let mut out: [TokenGrid; 4] = std::array::from_fn(|_| Array3::zeros((gh, gw, e)));
        let mut nbr = Array1::zeros(NEIGHBOURS);
        for r in 0..gh {
            for c in 0..gw {
                let o = stats.occupancy[[r, c]];
                let color = stats.color.slice(ndarray::s![r, c, ..]).to_owned();
                let lum = stats.background[[r, c]];
                for (i, (dy, dx)) in (-1isize..=1)
                    .flat_map(|dy| (-1isize..=1).map(move |dx| (dy, dx)))
                    .enumerate()
                {
                    let (y, x) = (r as isize + dy, c as isize + dx);
                    nbr[i] = if y >= 0 && x >= 0 && (y as usize) < gh && (x as usize) < gw {
                        stats.occupancy[[y as usize, x as usize]]
                    } else {
                        0.0
                    };
                }
                let col: Vec<Array1<f64>> = (0..3).map(|l| self.color_proj[l].dot(&color) * o).collect();
                let f1 = &col[0] + &(&self.bg_proj[0] * ((1.0 - o) * lum));
                let f2 = &col[1] + &(&self.bg_proj[1] * ((1.0 - o) * lum)) + self.shape_proj[0].dot(&nbr);
                let f3 = &col[2] + &(&self.bg_proj[2] * ((1.0 - o) * lum)) + self.shape_proj[1].dot(&nbr);
                let f4 = &fg_dir * o + &self.bg_center * (1.0 - o);
                for (level, v) in [f1, f2, f3, f4].into_iter().enumerate() {
                    for k in 0..e {
                        out[level][[r, c, k]] = v[k] + noise.sample(&mut rng);
                    }
                }
            }
        }
        out
    }
}

impl TokenProvider for SyntheticProvider {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn tokens(&self, frame: &Frame, tap_layers: &[usize]) -> Result<Vec<TokenGrid>> {
        if tap_layers.len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "synthetic provider computes 4 levels, {} requested",
                tap_layers.len()
            )));
        }
        let (h, w, _) = frame.dim();
        let ps = self.cfg.patch_size;
        if h % ps != 0 || w % ps != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("frame {h}x{w} is not a multiple of patch {ps}")));
        }
        Ok(self.levels(frame).into())
    }

    fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.cfg).unwrap());
        for m in self.color_proj.iter().chain(self.shape_proj.iter()).chain([&self.descriptor_proj]) {
            for v in m.iter() {
                h.update(v.to_le_bytes());
            }
        }
        for v in self.bg_proj.iter().chain([&self.fg_center, &self.bg_center]) {
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}
