//! On-disk frame sequences.
//!
//! ```text
//! manifest.json            widths, resolution, frame count
//! frames/%06d.png          RGB frames
//! masks/{face,mouth,hair,jaw}/%06d.png
//! coeffs.jsonl             one coefficient record per frame
//! cameras.json             array of per-frame cameras
//! audio_feats.bin          frames x audio float32 rows, little-endian
//! ```

use std::path::{Path, PathBuf};

use degs_core::conditioning::{CoefficientLayout, ConditioningFrame, FrameRecord, RegionMasks, Sequence};
use degs_core::synth::SyntheticDataset;
use degs_core::{Camera, Mask, PrimitiveCloud};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DegsError, Result};
use crate::fsutil::{create_dir_all, read_to_string, write_atomic};
use crate::imageio::{read_mask, read_png_rgb, write_f32_rows, write_mask, write_png8};

pub const DATASET_FORMAT: &str = "degs-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const MASK_KINDS: [&str; 4] = ["face", "mouth", "hair", "jaw"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Widths {
    pub audio: usize,
    pub identity: usize,
    pub shape: usize,
    pub expression: usize,
    pub eye: usize,
    pub jaw: usize,
}

impl From<CoefficientLayout> for Widths {
    fn from(l: CoefficientLayout) -> Self {
        Widths { audio: l.audio, identity: l.identity, shape: l.shape, expression: l.expression, eye: l.eye, jaw: l.jaw }
    }
}

impl From<Widths> for CoefficientLayout {
    fn from(w: Widths) -> Self {
        CoefficientLayout { audio: w.audio, identity: w.identity, shape: w.shape, expression: w.expression, eye: w.eye, jaw: w.jaw }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub widths: Widths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoeffRecord {
    pub frame: usize,
    pub psi_id: Vec<f64>,
    pub psi_s: Vec<f64>,
    pub psi_exp: Vec<f64>,
    pub psi_eye: Vec<f64>,
    pub psi_jaw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRecord {
    pub frame: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub near: f64,
    pub far: f64,
}

impl CameraRecord {
    fn new(frame: usize, c: &Camera) -> Self {
        CameraRecord {
            frame,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: c.rotation,
            translation: c.translation,
            near: c.near,
            far: c.far,
        }
    }

    fn camera(&self, width: usize, height: usize) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: self.rotation,
            translation: self.translation,
            width,
            height,
            near: self.near,
            far: self.far,
        }
    }
}

pub fn frame_path(root: &Path, i: usize) -> PathBuf {
    root.join("frames").join(format!("{i:06}.png"))
}

pub fn mask_path(root: &Path, kind: &str, i: usize) -> PathBuf {
    root.join("masks").join(kind).join(format!("{i:06}.png"))
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

/// Writes `sequence` in the dataset layout under `root`.
pub fn write_sequence(root: &Path, sequence: &Sequence) -> Result<()> {
    create_dir_all(&root.join("frames"))?;
    for kind in MASK_KINDS {
        create_dir_all(&root.join("masks").join(kind))?;
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        width: sequence.width,
        height: sequence.height,
        frames: sequence.len(),
        widths: sequence.layout.into(),
    };
    write_atomic(&root.join("manifest.json"), (serde_json::to_string_pretty(&manifest).unwrap() + "\n").as_bytes())?;
    sequence.frames().par_iter().try_for_each(|f| -> Result<()> {
        let i = f.conditioning.frame_index;
        write_png8(&frame_path(root, i), &f.image)?;
        for (kind, mask) in f.masks.iter() {
            write_mask(&mask_path(root, kind, i), mask)?;
        }
        Ok(())
    })?;
    let mut coeffs = String::new();
    let mut cameras = Vec::new();
    let mut audio = Vec::new();
    for f in sequence.frames() {
        let c = &f.conditioning;
        coeffs.push_str(&json(&CoeffRecord {
            frame: c.frame_index,
            psi_id: c.psi_id.clone(),
            psi_s: c.psi_s.clone(),
            psi_exp: c.psi_exp.clone(),
            psi_eye: c.psi_eye.clone(),
            psi_jaw: c.psi_jaw.clone(),
        }));
        coeffs.push('\n');
        cameras.push(CameraRecord::new(c.frame_index, &c.camera));
        audio.push(c.audio.clone());
    }
    write_atomic(&root.join("coeffs.jsonl"), coeffs.as_bytes())?;
    write_atomic(&root.join("cameras.json"), (serde_json::to_string_pretty(&cameras).unwrap() + "\n").as_bytes())?;
    let mut bytes = Vec::new();
    write_f32_rows(&mut bytes, &audio).expect("writing to memory");
    write_atomic(&root.join("audio_feats.bin"), &bytes)
}

#[derive(Serialize)]
struct GroundTruthPrimitive<'a> {
    mu: [f64; 3],
    raw_scale: [f64; 3],
    raw_rotation: [f64; 4],
    raw_opacity: f64,
    color_feature: &'a [f64],
}

#[derive(Serialize)]
struct GroundTruth<'a> {
    jaw_amplitude: f64,
    wobble_amplitude: f64,
    jaw_line: f64,
    face: Vec<GroundTruthPrimitive<'a>>,
    mouth: Vec<GroundTruthPrimitive<'a>>,
}

fn gt_cloud(c: &PrimitiveCloud) -> Vec<GroundTruthPrimitive<'_>> {
    c.primitives
        .iter()
        .map(|p| GroundTruthPrimitive {
            mu: p.mu,
            raw_scale: p.raw_scale,
            raw_rotation: p.raw_rotation,
            raw_opacity: p.raw_opacity,
            color_feature: &p.color_feature,
        })
        .collect()
}

/// Writes the dataset plus `ground_truth.json` (the generating clouds and the
/// analytic motion amplitudes).
pub fn write_synthetic(root: &Path, data: &SyntheticDataset) -> Result<()> {
    write_sequence(root, &data.sequence)?;
    let gt = GroundTruth {
        jaw_amplitude: data.motion.jaw_amplitude,
        wobble_amplitude: data.motion.wobble_amplitude,
        jaw_line: degs_core::synth::JAW_LINE,
        face: gt_cloud(&data.face),
        mouth: gt_cloud(&data.mouth),
    };
    write_atomic(&root.join("ground_truth.json"), (json(&gt) + "\n").as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| DegsError::format(path, e.to_string()))
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let m: Manifest = read_json(&root.join("manifest.json"))?;
    if m.format != DATASET_FORMAT || m.version != DATASET_VERSION {
        return Err(DegsError::format(
            root.join("manifest.json"),
            format!("expected format {DATASET_FORMAT} version {DATASET_VERSION}, found {} version {}", m.format, m.version),
        ));
    }
    Ok(m)
}

struct LoadedFrame {
    image: Option<degs_core::Image>,
    masks: [Option<Mask>; 4],
}

/// Loads and validates a dataset. Every schema violation found is reported
/// together in one error.
pub fn load_sequence(root: &Path) -> Result<Sequence> {
    let manifest = read_manifest(root)?;
    let (w, h, n) = (manifest.width, manifest.height, manifest.frames);
    let layout: CoefficientLayout = manifest.widths.into();
    let mut problems = Vec::new();

    let loaded: Vec<(LoadedFrame, Vec<String>)> = (0..n).into_par_iter().map(|i| load_frame(root, i, w, h)).collect();
    for (_, e) in &loaded {
        problems.extend(e.iter().cloned());
    }

    let coeffs = read_coeffs(root, &layout, n, &mut problems);
    let cameras = read_cameras(root, w, h, n, &mut problems);
    let audio = read_audio(root, layout.audio, n, &mut problems);

    if !problems.is_empty() {
        return Err(DegsError::Dataset { path: root.to_path_buf(), problems });
    }
    let mut records = Vec::with_capacity(n);
    for (i, ((frame, _), ((c, cam), a))) in loaded.into_iter().zip(coeffs.into_iter().zip(cameras).zip(audio)).enumerate() {
        let [face, mouth, hair, jaw] = frame.masks.map(|m| m.expect("checked above"));
        records.push(FrameRecord {
            image: frame.image.expect("checked above"),
            masks: RegionMasks { face, mouth, hair, jaw },
            conditioning: ConditioningFrame {
                frame_index: i,
                audio: a,
                psi_id: c.psi_id,
                psi_s: c.psi_s,
                psi_exp: c.psi_exp,
                psi_eye: c.psi_eye,
                psi_jaw: c.psi_jaw,
                camera: cam,
            },
        });
    }
    Sequence::new(layout, w, h, records).map_err(|e| match e {
        degs_core::Error::InvalidSequence(problems) => DegsError::Dataset { path: root.to_path_buf(), problems },
        other => other.into(),
    })
}

fn load_file<T>(
    i: usize,
    what: &str,
    path: &Path,
    (w, h): (usize, usize),
    read: impl Fn(&Path) -> Result<T>,
    size: impl Fn(&T) -> (usize, usize),
    errs: &mut Vec<String>,
) -> Option<T> {
    if !path.is_file() {
        errs.push(format!("frame {i}: missing {what} ({})", path.display()));
        return None;
    }
    match read(path) {
        Ok(v) if size(&v) == (w, h) => Some(v),
        Ok(v) => {
            let (fw, fh) = size(&v);
            errs.push(format!("frame {i}: {what} is {fw}x{fh}, manifest says {w}x{h}"));
            None
        }
        Err(e) => {
            errs.push(format!("frame {i}: {e}"));
            None
        }
    }
}

fn load_frame(root: &Path, i: usize, w: usize, h: usize) -> (LoadedFrame, Vec<String>) {
    let mut errs = Vec::new();
    let image = load_file(i, "frame image", &frame_path(root, i), (w, h), read_png_rgb, |m| (m.width, m.height), &mut errs);
    let masks = MASK_KINDS.map(|kind| {
        load_file(i, &format!("{kind} mask"), &mask_path(root, kind, i), (w, h), read_mask, |m| (m.width, m.height), &mut errs)
    });
    (LoadedFrame { image, masks }, errs)
}

fn read_coeffs(root: &Path, layout: &CoefficientLayout, n: usize, problems: &mut Vec<String>) -> Vec<CoeffRecord> {
    let path = root.join("coeffs.jsonl");
    let text = match read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            problems.push(e.to_string());
            return Vec::new();
        }
    };
    let mut slots: Vec<Option<CoeffRecord>> = vec![None; n];
    for (line_no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: CoeffRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("coeffs.jsonl line {}: {e}", line_no + 1));
                continue;
            }
        };
        let i = rec.frame;
        let blocks: [(&str, usize, usize); 5] = [
            ("psi_id", rec.psi_id.len(), layout.identity),
            ("psi_s", rec.psi_s.len(), layout.shape),
            ("psi_exp", rec.psi_exp.len(), layout.expression),
            ("psi_eye", rec.psi_eye.len(), layout.eye),
            ("psi_jaw", rec.psi_jaw.len(), layout.jaw),
        ];
        for (name, found, expected) in blocks {
            if found != expected {
                problems.push(format!("frame {i}: {name} has width {found}, manifest says {expected}"));
            }
        }
        match slots.get_mut(i) {
            Some(slot @ None) => *slot = Some(rec),
            Some(Some(_)) => problems.push(format!("frame {i}: duplicate coefficient record")),
            None => problems.push(format!("frame {i}: coefficient record beyond the {n} declared frames")),
        }
    }
    let mut out = Vec::with_capacity(n);
    for (i, s) in slots.into_iter().enumerate() {
        match s {
            Some(r) => out.push(r),
            None => problems.push(format!("frame {i}: missing coefficient record")),
        }
    }
    out
}

fn read_cameras(root: &Path, w: usize, h: usize, n: usize, problems: &mut Vec<String>) -> Vec<Camera> {
    let records: Vec<CameraRecord> = match read_json(&root.join("cameras.json")) {
        Ok(r) => r,
        Err(e) => {
            problems.push(e.to_string());
            return Vec::new();
        }
    };
    if records.len() != n {
        problems.push(format!("cameras.json has {} entries for {n} frames", records.len()));
    }
    let mut out = Vec::with_capacity(n);
    for (i, r) in records.iter().enumerate().take(n) {
        if r.frame != i {
            problems.push(format!("cameras.json entry {i} is labelled frame {}", r.frame));
        }
        let cam = r.camera(w, h);
        if let Err(e) = cam.validate() {
            problems.push(format!("frame {i}: camera {e}"));
        }
        out.push(cam);
    }
    out
}

fn read_audio(root: &Path, width: usize, n: usize, problems: &mut Vec<String>) -> Vec<Vec<f64>> {
    let path = root.join("audio_feats.bin");
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) => {
            problems.push(DegsError::io(&path, e).to_string());
            return Vec::new();
        }
    };
    if bytes.len() != n * width * 4 {
        problems.push(format!("audio_feats.bin has {} bytes, expected {n} rows x {width} float32 = {}", bytes.len(), n * width * 4));
        return Vec::new();
    }
    let values: Vec<f64> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    if width == 0 {
        return vec![Vec::new(); n];
    }
    values.chunks(width).map(<[f64]>::to_vec).collect()
}
