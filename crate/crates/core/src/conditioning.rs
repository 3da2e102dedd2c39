//! Per-frame conditioning (audio features, implicit face-model coefficients,
//! camera) and the in-memory training sequence.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::camera::Camera;
use crate::error::{Error, Result};
use crate::image::{Image, Mask};

/// Widths of every coefficient block. The expression features fed to the
/// deformation field are `[identity, shape, expression, eye]`; the jaw block
/// only drives the jaw loss region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoefficientLayout {
    pub audio: usize,
    pub identity: usize,
    pub shape: usize,
    pub expression: usize,
    pub eye: usize,
    pub jaw: usize,
}

impl Default for CoefficientLayout {
    fn default() -> Self {
        CoefficientLayout { audio: 32, identity: 8, shape: 8, expression: 16, eye: 2, jaw: 1 }
    }
}

impl CoefficientLayout {
    pub fn expression_features(&self) -> usize {
        self.identity + self.shape + self.expression + self.eye
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningFrame {
    pub frame_index: usize,
    pub audio: Vec<f64>,
    pub psi_id: Vec<f64>,
    pub psi_s: Vec<f64>,
    pub psi_exp: Vec<f64>,
    pub psi_eye: Vec<f64>,
    pub psi_jaw: Vec<f64>,
    pub camera: Camera,
}

impl ConditioningFrame {
    pub fn zeros(frame_index: usize, layout: &CoefficientLayout, camera: Camera) -> Self {
        ConditioningFrame {
            frame_index,
            audio: alloc::vec![0.0; layout.audio],
            psi_id: alloc::vec![0.0; layout.identity],
            psi_s: alloc::vec![0.0; layout.shape],
            psi_exp: alloc::vec![0.0; layout.expression],
            psi_eye: alloc::vec![0.0; layout.eye],
            psi_jaw: alloc::vec![0.0; layout.jaw],
            camera,
        }
    }

    /// `f_e = psi_id ⊕ psi_s ⊕ psi_exp ⊕ psi_eye`.
    pub fn expression_features(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.psi_id.len() + self.psi_s.len() + self.psi_exp.len() + self.psi_eye.len());
        v.extend_from_slice(&self.psi_id);
        v.extend_from_slice(&self.psi_s);
        v.extend_from_slice(&self.psi_exp);
        v.extend_from_slice(&self.psi_eye);
        v
    }

    fn violations(&self, layout: &CoefficientLayout, out: &mut Vec<String>) {
        let i = self.frame_index;
        let blocks: [(&str, &[f64], usize); 6] = [
            ("audio", &self.audio, layout.audio),
            ("psi_id", &self.psi_id, layout.identity),
            ("psi_s", &self.psi_s, layout.shape),
            ("psi_exp", &self.psi_exp, layout.expression),
            ("psi_eye", &self.psi_eye, layout.eye),
            ("psi_jaw", &self.psi_jaw, layout.jaw),
        ];
        for (name, v, want) in blocks {
            if v.len() != want {
                out.push(format!("frame {i}: {name} has width {} but the manifest declares {want}", v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                out.push(format!("frame {i}: {name} contains non-finite values"));
            }
        }
        if let Err(e) = self.camera.validate() {
            out.push(format!("frame {i}: camera invalid ({e})"));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMasks {
    pub face: Mask,
    pub mouth: Mask,
    pub hair: Mask,
    pub jaw: Mask,
}

impl RegionMasks {
    pub fn empty(width: usize, height: usize) -> Self {
        RegionMasks {
            face: Mask::new(width, height),
            mouth: Mask::new(width, height),
            hair: Mask::new(width, height),
            jaw: Mask::new(width, height),
        }
    }

    pub fn iter(&self) -> [(&'static str, &Mask); 4] {
        [("face", &self.face), ("mouth", &self.mouth), ("hair", &self.hair), ("jaw", &self.jaw)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub image: Image,
    pub masks: RegionMasks,
    pub conditioning: ConditioningFrame,
}

/// Validated, index-ordered frames. Frame `i` lives at position `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub layout: CoefficientLayout,
    pub width: usize,
    pub height: usize,
    frames: Vec<FrameRecord>,
}

impl Sequence {
    /// Sorts by frame index and checks every record, reporting all problems
    /// at once.
    pub fn new(layout: CoefficientLayout, width: usize, height: usize, mut frames: Vec<FrameRecord>) -> Result<Self> {
        frames.sort_by_key(|f| f.conditioning.frame_index);
        let mut problems = Vec::new();
        if frames.is_empty() {
            problems.push(String::from("sequence has no frames"));
        }
        for (pos, f) in frames.iter().enumerate() {
            let i = f.conditioning.frame_index;
            if i != pos {
                problems.push(format!("frame indices are not contiguous from 0: expected {pos}, found {i}"));
            }
            if f.image.width != width || f.image.height != height || f.image.channels != 3 {
                problems.push(format!(
                    "frame {i}: image is {}x{}x{}, expected {width}x{height}x3",
                    f.image.width, f.image.height, f.image.channels
                ));
            }
            if f.image.data.iter().any(|v| !v.is_finite()) {
                problems.push(format!("frame {i}: image contains non-finite values"));
            }
            for (name, m) in f.masks.iter() {
                if m.width != width || m.height != height {
                    problems.push(format!("frame {i}: {name} mask is {}x{}, expected {width}x{height}", m.width, m.height));
                }
            }
            let cam = &f.conditioning.camera;
            if cam.width != width || cam.height != height {
                problems.push(format!("frame {i}: camera resolution {}x{} differs from {width}x{height}", cam.width, cam.height));
            }
            f.conditioning.violations(&layout, &mut problems);
        }
        if problems.is_empty() {
            Ok(Sequence { layout, width, height, frames })
        } else {
            Err(Error::InvalidSequence(problems))
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[FrameRecord] {
        &self.frames
    }

    pub fn frame(&self, index: usize) -> Option<&FrameRecord> {
        self.frames.get(index)
    }

    pub fn into_frames(self) -> Vec<FrameRecord> {
        self.frames
    }
}
