//! Procedural walking-silhouette benchmark.
//!
//! Identity lives only in body shape (height level × build) and gait
//! (stride, arm swing). Views foreshorten the body horizontally and come
//! with their own fixed grayscale background clutter. Clothing colour is a
//! per-sequence nuisance drawn from a warm palette for the "NM" condition
//! and a cool, unseen palette for "CL". Every silhouette pixel is strongly
//! chromatic and every background pixel is gray, so colour saturation
//! separates the two.
//!
//! Frames are quantized to 8 bits, so rendering in memory and decoding the
//! written PNGs give identical arrays.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{save_frame, DatasetManifest, Frame, FrameSource, SequenceRecord, Split};

pub const NORMAL: &str = "NM";
pub const CLOTHING: &str = "CL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub views: usize,
    /// Views whose sequences are used for training and gallery.
    pub train_views: Vec<usize>,
    pub frame_h: usize,
    pub frame_w: usize,
    pub frames_per_seq: usize,
    /// NM sequences per (identity, view); all but the last are training,
    /// the last one is gallery (or probe on held-out views).
    pub nm_seqs: usize,
    pub cl_seqs: usize,
    pub seed: u64,
    /// Added to every pixel before quantization (domain shift).
    pub brightness: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            identities: 20,
            views: 4,
            train_views: vec![0, 1, 2],
            frame_h: 64,
            frame_w: 32,
            frames_per_seq: 12,
            nm_seqs: 3,
            cl_seqs: 1,
            seed: 0,
            brightness: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 || self.views == 0 || self.frames_per_seq == 0 || self.nm_seqs < 2 {
            return Err(Error::Config(
                "synthetic benchmark needs ≥ 2 identities, ≥ 1 view and frame, ≥ 2 NM sequences".into(),
            ));
        }
        if self.identities > HEIGHTS.len() * BUILDS.len() * STRIDES.len() {
            return Err(Error::Config(format!("at most {} identities", HEIGHTS.len() * BUILDS.len() * STRIDES.len())));
        }
        if self.train_views.is_empty() || self.train_views.iter().any(|&v| v >= self.views) {
            return Err(Error::Config("train_views must be nonempty and within views".into()));
        }
        if self.frame_h < 16 || self.frame_w < 8 {
            return Err(Error::Config("frames must be at least 16×8".into()));
        }
        Ok(())
    }
}

const HEIGHTS: [f64; 5] = [0.56, 0.65, 0.74, 0.83, 0.92];
/// (shoulder, hip) half-widths as a fraction of the frame width.
const BUILDS: [(f64, f64); 4] = [(0.16, 0.11), (0.29, 0.13), (0.15, 0.25), (0.30, 0.27)];
const STRIDES: [f64; 2] = [0.16, 0.32];
/// Horizontal foreshortening per view; views beyond the table repeat it.
const VIEW_SCALE: [f64; 4] = [1.0, 0.78, 0.6, 0.88];

const WARM: [[f64; 3]; 4] = [[0.85, 0.2, 0.15], [0.9, 0.55, 0.1], [0.8, 0.15, 0.45], [0.75, 0.4, 0.2]];
const COOL: [[f64; 3]; 4] = [[0.15, 0.3, 0.85], [0.1, 0.7, 0.35], [0.2, 0.75, 0.8], [0.45, 0.2, 0.85]];
const SKIN: [f64; 3] = [0.92, 0.72, 0.55];

/// Body parameters of one identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Body {
    pub height: f64,
    pub shoulder: f64,
    pub hip: f64,
    pub stride: f64,
    pub phase: f64,
}

pub fn body(cfg: &SynthConfig, identity: usize) -> Body {
    let h = identity % HEIGHTS.len();
    let b = (identity / HEIGHTS.len()) % BUILDS.len();
    let s = identity / (HEIGHTS.len() * BUILDS.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (identity as u64).wrapping_mul(0x9e37_79b9));
    Body {
        height: HEIGHTS[h],
        shoulder: BUILDS[b].0,
        hip: BUILDS[b].1,
        stride: STRIDES[s % STRIDES.len()],
        phase: rng.random::<f64>() * std::f64::consts::TAU,
    }
}

pub fn view_scale(view: usize) -> f64 {
    VIEW_SCALE[view % VIEW_SCALE.len()]
}

fn subject_name(i: usize) -> String {
    format!("{:03}", i + 1)
}

fn view_name(v: usize) -> String {
    format!("{:03}", v * 30)
}

fn seq_name(s: usize) -> String {
    format!("{:02}", s + 1)
}

/// Records and splits of the benchmark. Training: NM sequences except the
/// last, on training views. Gallery: the last NM sequence on training
/// views. Probe: the last NM sequence on held-out views and every CL
/// sequence on held-out views.
pub fn manifest(cfg: &SynthConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut entries = Vec::new();
    for i in 0..cfg.identities {
        for v in 0..cfg.views {
            let train_view = cfg.train_views.contains(&v);
            let mut push = |cond: &str, s: usize, split: Split| {
                let dir = PathBuf::from(format!("{}/{cond}/{}/{}", subject_name(i), view_name(v), seq_name(s)));
                entries.push(SequenceRecord {
                    subject_id: subject_name(i),
                    condition: cond.into(),
                    view: view_name(v),
                    seq: seq_name(s),
                    split,
                    frame_paths: (0..cfg.frames_per_seq).map(|t| dir.join(format!("{t:03}.png"))).collect(),
                });
            };
            for s in 0..cfg.nm_seqs {
                let last = s + 1 == cfg.nm_seqs;
                match (train_view, last) {
                    (true, false) => push(NORMAL, s, Split::Train),
                    (true, true) => push(NORMAL, s, Split::Gallery),
                    (false, true) => push(NORMAL, s, Split::Probe),
                    (false, false) => {}
                }
            }
            if !train_view {
                for s in 0..cfg.cl_seqs {
                    push(CLOTHING, s, Split::Probe);
                }
            }
        }
    }
    DatasetManifest::new("synthetic-gait", entries)
}

/// Fixed per-view background: gray rectangles of random luminance.
fn background(cfg: &SynthConfig, view: usize) -> Array3<f64> {
    let (h, w) = (cfg.frame_h, cfg.frame_w);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1_000_003 * (view as u64 + 1)));
    let base = 0.25 + 0.3 * rng.random::<f64>();
    let mut bg = Array3::from_elem((h, w, 3), base);
    for _ in 0..10 {
        let (bh, bw) = (rng.random_range(2..h / 3), rng.random_range(2..w / 2));
        let (y0, x0) = (rng.random_range(0..h - bh), rng.random_range(0..w - bw));
        let lum = 0.1 + 0.8 * rng.random::<f64>();
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                for c in 0..3 {
                    bg[[y, x, c]] = lum;
                }
            }
        }
    }
    bg
}

/// Distance from point p to segment ab.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BodyPart {
    Head,
    Upper,
    Lower,
}

/// Which body part (if any) covers pixel centre (x, y) in frame t.
pub fn body_part(cfg: &SynthConfig, b: &Body, view: usize, t: usize, x: f64, y: f64) -> Option<BodyPart> {
    let (h, w) = (cfg.frame_h as f64, cfg.frame_w as f64);
    let s = view_scale(view);
    let phase = b.phase + std::f64::consts::TAU * t as f64 / cfg.frames_per_seq as f64;
    let feet = h - 2.0;
    let height = b.height * h;
    let top = feet - height;
    let cx = w / 2.0;
    let r = 0.085 * height;
    let hip_y = top + 0.55 * height;
    let shoulder_y = top + 2.0 * r + 0.02 * height;
    let limb = (0.06 * w * s).max(1.2);

    if ((x - cx).powi(2) + (y - (top + r)).powi(2)).sqrt() <= r {
        return Some(BodyPart::Head);
    }
    if y >= shoulder_y && y <= hip_y {
        let f = (y - shoulder_y) / (hip_y - shoulder_y);
        let half = (b.shoulder * (1.0 - f) + b.hip * f) * w * s;
        if (x - cx).abs() <= half {
            return Some(BodyPart::Upper);
        }
    }
    let swing = phase.sin() * b.stride * (feet - hip_y) * s;
    for side in [-1.0, 1.0] {
        let hip = (cx + side * 0.4 * b.hip * w * s, hip_y);
        let foot = (hip.0 + side * swing, feet);
        if segment_distance((x, y), hip, foot) <= limb {
            return Some(BodyPart::Lower);
        }
        let shoulder = (cx + side * b.shoulder * w * s, shoulder_y + limb);
        let hand = (shoulder.0 - side * 0.6 * swing, hip_y + 0.05 * height);
        if segment_distance((x, y), shoulder, hand) <= limb * 0.8 {
            return Some(BodyPart::Upper);
        }
    }
    None
}

fn clothing(cfg: &SynthConfig, record_seed: u64, condition: &str) -> ([f64; 3], [f64; 3]) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ record_seed);
    let palette = if condition == CLOTHING { &COOL } else { &WARM };
    let upper = palette[rng.random_range(0..palette.len())];
    let lower = palette[rng.random_range(0..palette.len())];
    (upper, lower)
}

fn parse_index(s: &str, what: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| Error::InvalidArgument(format!("synthetic {what} `{s}` is not numeric")))
}

/// Renders one frame from record metadata.
pub fn render(cfg: &SynthConfig, record: &SequenceRecord, t: usize) -> Result<Frame> {
    let identity = parse_index(&record.subject_id, "subject")?.saturating_sub(1);
    let view = parse_index(&record.view, "view")? / 30;
    let seq = parse_index(&record.seq, "sequence")?;
    let b = body(cfg, identity);
    let record_seed = (identity as u64) << 32 ^ (view as u64) << 16 ^ (seq as u64) << 4 ^ (record.condition == CLOTHING) as u64;
    let (upper, lower) = clothing(cfg, record_seed, &record.condition);
    let mut frame = background(cfg, view);
    for y in 0..cfg.frame_h {
        for x in 0..cfg.frame_w {
            let part = body_part(cfg, &b, view, t, x as f64 + 0.5, y as f64 + 0.5);
            let color = match part {
                Some(BodyPart::Head) => SKIN,
                Some(BodyPart::Upper) => upper,
                Some(BodyPart::Lower) => lower,
                None => continue,
            };
            for c in 0..3 {
                frame[[y, x, c]] = color[c];
            }
        }
    }
    frame.mapv_inplace(|v| ((v + cfg.brightness).clamp(0.0, 1.0) * 255.0).round() / 255.0);
    Ok(frame)
}

/// Binary silhouette of a frame (1 on the body).
pub fn silhouette(cfg: &SynthConfig, record: &SequenceRecord, t: usize) -> Result<ndarray::Array2<f64>> {
    let identity = parse_index(&record.subject_id, "subject")?.saturating_sub(1);
    let view = parse_index(&record.view, "view")? / 30;
    let b = body(cfg, identity);
    Ok(ndarray::Array2::from_shape_fn((cfg.frame_h, cfg.frame_w), |(y, x)| {
        body_part(cfg, &b, view, t, x as f64 + 0.5, y as f64 + 0.5).is_some() as u8 as f64
    }))
}

/// Frame source that renders on demand.
#[derive(Clone, Debug)]
pub struct SynthFrames {
    pub cfg: SynthConfig,
}

impl FrameSource for SynthFrames {
    fn frame(&self, _manifest: &DatasetManifest, record: &SequenceRecord, index: usize) -> Result<Frame> {
        if index >= record.frame_count() {
            return Err(Error::InvalidArgument(format!("{} has no frame {index}", record.key())));
        }
        render(&self.cfg, record, index)
    }
}

/// Writes every frame as PNG under `root` plus `manifest.json`; returns
/// the manifest path.
pub fn write_dataset(cfg: &SynthConfig, root: &Path) -> Result<PathBuf> {
    use rayon::prelude::*;
    let m = manifest(cfg)?;
    m.entries.par_iter().try_for_each(|r| -> Result<()> {
        for (t, rel) in r.frame_paths.iter().enumerate() {
            let path = root.join(rel);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            save_frame(&render(cfg, r, t)?, &path)?;
        }
        Ok(())
    })?;
    let path = root.join("manifest.json");
    m.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{load_manifest, DiskFrames};

    fn small() -> SynthConfig {
        SynthConfig {
            identities: 4,
            frames_per_seq: 3,
            ..Default::default()
        }
    }

    #[test]
    fn split_layout() {
        let cfg = SynthConfig::default();
        let m = manifest(&cfg).unwrap();
        let c = m.counts();
        assert_eq!(c[&Split::Train].identities, 20);
        assert_eq!(c[&Split::Train].sequences, 20 * 3 * 2);
        assert_eq!(c[&Split::Gallery].sequences, 20 * 3);
        assert_eq!(c[&Split::Probe].sequences, 20 * 2);
        assert!(m.split(Split::Probe).all(|r| r.view == "090"));
    }

    #[test]
    fn identities_have_distinct_bodies() {
        let cfg = SynthConfig::default();
        for i in 0..20 {
            for j in 0..i {
                let (a, b) = (body(&cfg, i), body(&cfg, j));
                assert!((a.height, a.shoulder, a.hip, a.stride) != (b.height, b.shoulder, b.hip, b.stride));
            }
        }
    }

    #[test]
    fn silhouette_is_chromatic_and_background_is_gray() {
        let cfg = small();
        let m = manifest(&cfg).unwrap();
        for r in m.entries.iter().take(8) {
            let f = render(&cfg, r, 1).unwrap();
            let sil = silhouette(&cfg, r, 1).unwrap();
            assert!(sil.sum() > 40.0);
            for y in 0..cfg.frame_h {
                for x in 0..cfg.frame_w {
                    let p = [f[[y, x, 0]], f[[y, x, 1]], f[[y, x, 2]]];
                    let chroma = p.iter().cloned().fold(0.0, f64::max) - p.iter().cloned().fold(1.0, f64::min);
                    assert_eq!(chroma > 0.15, sil[[y, x]] == 1.0, "{} ({y},{x})", r.key());
                }
            }
        }
    }

    #[test]
    fn disk_and_memory_frames_agree() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        let path = write_dataset(&cfg, dir.path()).unwrap();
        let m = load_manifest(&path, false).unwrap();
        let mem = SynthFrames { cfg: cfg.clone() };
        for r in m.entries.iter().step_by(5) {
            for t in 0..3 {
                assert_eq!(DiskFrames.frame(&m, r, t).unwrap(), mem.frame(&m, r, t).unwrap());
            }
        }
    }

    #[test]
    fn brightness_shift_moves_pixels() {
        let cfg = small();
        let m = manifest(&cfg).unwrap();
        let r = &m.entries[0];
        let shifted = SynthConfig { brightness: 0.1, ..cfg.clone() };
        let a = render(&cfg, r, 0).unwrap();
        let b = render(&shifted, r, 0).unwrap();
        assert!(b.sum() > a.sum());
    }
}
