//! Sources of per-frame priors (depth, confidence, motion probability) and of
//! patch correspondences, plus static-region patch sampling.
//!
//! A provider answers two kinds of requests: a prior batch for an ordered set
//! of frames, whose depths share one unknown scale, and a tracking request that
//! follows patch centers into a target frame. [`FileProvider`] replays both from
//! a sequence directory; the synthetic provider lives in [`crate::sim`].

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pixel};
use crate::raster::{Raster, RasterError, RasterKind};

pub type FrameId = u32;
pub type PatchId = u64;
pub type BatchId = u64;

/// Pixels closer than this to the image border are never sampled.
pub const DEFAULT_BORDER_PX: u32 = 8;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("unknown frame {0}")]
    UnknownFrame(FrameId),
    #[error("no correspondences stored for frame pair {0} -> {1}")]
    UnknownPair(FrameId, FrameId),
    #[error("no scale recorded for batch {0}")]
    UnknownBatch(BatchId),
    #[error("patch {patch} center ({u}, {v}) is not on the pixel grid of frame {frame}")]
    OffGridPatch {
        patch: PatchId,
        frame: FrameId,
        u: f64,
        v: f64,
    },
    #[error("empty prior request")]
    EmptyRequest,
    #[error("static region has only {0} usable pixels")]
    NoStaticRegion(usize),
    #[error("{path}: {source}")]
    Raster {
        path: PathBuf,
        #[source]
        source: RasterError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("inconsistent prior data: {0}")]
    Invalid(String),
}

/// Dense prior outputs for one frame of one inference batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFrameData {
    pub frame_id: FrameId,
    /// Scale-ambiguous depth; entries `<= 0` are invalid.
    pub depth: Raster,
    pub confidence: Raster,
    pub motion_prob: Raster,
    pub batch_id: BatchId,
    /// Scale that has been applied to `depth` since it left the provider.
    pub applied_scale: f64,
}

impl PriorFrameData {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if !self.depth.same_shape(&self.confidence) || !self.depth.same_shape(&self.motion_prob) {
            return Err(ProviderError::Invalid(format!(
                "frame {}: raster shapes differ",
                self.frame_id
            )));
        }
        if self
            .motion_prob
            .data()
            .iter()
            .any(|m| !(0.0..=1.0).contains(m))
        {
            return Err(ProviderError::Invalid(format!(
                "frame {}: motion probability outside [0, 1]",
                self.frame_id
            )));
        }
        Ok(())
    }

    pub fn depth_valid(&self, u: u32, v: u32) -> bool {
        let d = self.depth.get(u, v);
        d > 0.0 && d.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorBatchResponse {
    pub batch_id: BatchId,
    /// One entry per requested frame, in request order.
    pub frames: Vec<PriorFrameData>,
}

/// Image-anchored landmark with a single inverse depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Patch {
    pub patch_id: PatchId,
    pub owner_frame: FrameId,
    pub center: Pixel,
    pub inv_depth: f64,
    /// Prior inverse depth after scale alignment.
    pub prior_inv_depth: f64,
    pub prior_confidence: f64,
    /// Relative depth standard deviation from the last covariance report,
    /// NaN until one has been computed.
    pub rel_depth_std: f64,
}

/// Location of patch `patch_id` (owned by `source_frame`) observed in `target_frame`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowObservation {
    pub patch_id: PatchId,
    pub source_frame: FrameId,
    pub target_frame: FrameId,
    pub observed: Pixel,
    pub valid: bool,
}

/// Candidate patch drawn from a prior frame, before it gets an identifier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchSample {
    pub owner_frame: FrameId,
    pub center: Pixel,
    pub prior_inv_depth: f64,
    pub prior_confidence: f64,
}

impl PatchSample {
    pub fn into_patch(self, patch_id: PatchId) -> Patch {
        Patch {
            patch_id,
            owner_frame: self.owner_frame,
            center: self.center,
            inv_depth: self.prior_inv_depth,
            prior_inv_depth: self.prior_inv_depth,
            prior_confidence: self.prior_confidence,
            rel_depth_std: f64::NAN,
        }
    }
}

pub trait SequenceProvider {
    fn intrinsics(&self) -> CameraIntrinsics;

    /// Frames are numbered `0..frame_count()`.
    fn frame_count(&self) -> usize;

    fn timestamp(&self, frame: FrameId) -> Result<f64, ProviderError>;

    /// Priors for `frames` from one inference batch: depths share a single
    /// unknown scale that may differ from every other batch.
    fn request_priors(&mut self, frames: &[FrameId]) -> Result<PriorBatchResponse, ProviderError>;

    fn track_patches(
        &mut self,
        patches: &[Patch],
        target: FrameId,
    ) -> Result<Vec<FlowObservation>, ProviderError>;
}

/// Row-major index of an integer patch center; the key used by flow files.
pub fn pixel_key(
    intr: &CameraIntrinsics,
    patch: &Patch,
) -> Result<u64, ProviderError> {
    let (u, v) = (patch.center.u, patch.center.v);
    let off_grid = u.fract() != 0.0
        || v.fract() != 0.0
        || u < 0.0
        || v < 0.0
        || u >= intr.width as f64
        || v >= intr.height as f64;
    if off_grid {
        return Err(ProviderError::OffGridPatch {
            patch: patch.patch_id,
            frame: patch.owner_frame,
            u,
            v,
        });
    }
    Ok(v as u64 * intr.width as u64 + u as u64)
}

/// Draws `k` distinct pixels uniformly from the static region
/// `{motion_prob < s_d, depth valid}` at least `border_px` from every edge.
pub fn sample_static_patches<R: Rng + ?Sized>(
    prior: &PriorFrameData,
    s_d: f64,
    k: usize,
    border_px: u32,
    rng: &mut R,
) -> Result<Vec<PatchSample>, ProviderError> {
    let candidates = static_candidates(prior, s_d, border_px);
    if candidates.len() < k || k == 0 {
        return Err(ProviderError::NoStaticRegion(candidates.len()));
    }
    let picked = rand::seq::index::sample(rng, candidates.len(), k);
    Ok(picked
        .into_iter()
        .map(|i| {
            let (u, v) = candidates[i];
            PatchSample {
                owner_frame: prior.frame_id,
                center: Pixel::new(u as f64, v as f64),
                prior_inv_depth: 1.0 / prior.depth.get(u, v),
                prior_confidence: prior.confidence.get(u, v),
            }
        })
        .collect())
}

/// Row-major list of usable static pixels.
pub fn static_candidates(prior: &PriorFrameData, s_d: f64, border_px: u32) -> Vec<(u32, u32)> {
    let (w, h) = (prior.depth.width(), prior.depth.height());
    if w <= 2 * border_px || h <= 2 * border_px {
        return Vec::new();
    }
    let mut out = Vec::new();
    for v in border_px..h - border_px {
        for u in border_px..w - border_px {
            if prior.depth_valid(u, v) && prior.motion_prob.get(u, v) < s_d {
                out.push((u, v));
            }
        }
    }
    out
}

/// Writes one `flows/<i>_<j>.txt` body: `patch_id u v valid` per line, where
/// `patch_id` is the row-major pixel index of the patch center in frame `i`.
pub fn write_flow_lines(
    mut w: impl Write,
    rows: impl IntoIterator<Item = (u64, Pixel, bool)>,
) -> io::Result<()> {
    for (key, px, valid) in rows {
        writeln!(w, "{} {} {} {}", key, px.u, px.v, u8::from(valid))?;
    }
    Ok(())
}

pub fn flow_file_name(source: FrameId, target: FrameId) -> String {
    format!("{source}_{target}.txt")
}

/// Replays priors and correspondences from a sequence directory:
///
/// ```text
/// camera.txt                 fx fy cx cy width height
/// timestamps.txt             frame_id timestamp
/// scales.txt                 batch_id scale   (optional)
/// frames/<id>/depth.dpr      confidence.prb   motion.prb
/// flows/<i>_<j>.txt          patch_id u v valid
/// ```
///
/// Depth rasters are stored at unit batch scale; the response for the n-th
/// request is multiplied by the scale listed for batch n in `scales.txt`.
pub struct FileProvider {
    root: PathBuf,
    intrinsics: CameraIntrinsics,
    timestamps: Vec<f64>,
    batch_scales: Option<Vec<f64>>,
    next_batch: BatchId,
    frames: HashMap<FrameId, PriorFrameData>,
    flows: HashMap<(FrameId, FrameId), HashMap<u64, (Pixel, bool)>>,
}

impl FileProvider {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let root = root.as_ref().to_path_buf();
        let camera_path = root.join("camera.txt");
        let camera = read_text(&camera_path)?;
        let fields: Vec<&str> = camera.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(ProviderError::Parse {
                path: camera_path,
                line: 1,
                msg: "expected `fx fy cx cy width height`".into(),
            });
        }
        let num = |i: usize| -> Result<f64, ProviderError> {
            fields[i].parse::<f64>().map_err(|e| ProviderError::Parse {
                path: root.join("camera.txt"),
                line: 1,
                msg: e.to_string(),
            })
        };
        let intrinsics = CameraIntrinsics::new(
            num(0)?,
            num(1)?,
            num(2)?,
            num(3)?,
            num(4)? as u32,
            num(5)? as u32,
        )
        .map_err(|e| ProviderError::Parse {
            path: root.join("camera.txt"),
            line: 1,
            msg: e.to_string(),
        })?;

        let ts_path = root.join("timestamps.txt");
        let mut timestamps = Vec::new();
        for (line_no, fields) in data_lines(&read_text(&ts_path)?) {
            let parsed = parse_fields::<2>(&fields, &ts_path, line_no)?;
            if parsed[0] as usize != timestamps.len() {
                return Err(ProviderError::Parse {
                    path: ts_path,
                    line: line_no,
                    msg: "frame ids must be consecutive from 0".into(),
                });
            }
            timestamps.push(parsed[1]);
        }

        let scales_path = root.join("scales.txt");
        let batch_scales = if scales_path.exists() {
            let mut scales = Vec::new();
            for (line_no, fields) in data_lines(&read_text(&scales_path)?) {
                let parsed = parse_fields::<2>(&fields, &scales_path, line_no)?;
                if parsed[0] as usize != scales.len() || !(parsed[1] > 0.0) {
                    return Err(ProviderError::Parse {
                        path: scales_path,
                        line: line_no,
                        msg: "expected consecutive batch ids with positive scales".into(),
                    });
                }
                scales.push(parsed[1]);
            }
            Some(scales)
        } else {
            None
        };

        Ok(Self {
            root,
            intrinsics,
            timestamps,
            batch_scales,
            next_batch: 0,
            frames: HashMap::new(),
            flows: HashMap::new(),
        })
    }

    fn load_frame(&mut self, frame: FrameId) -> Result<&PriorFrameData, ProviderError> {
        if frame as usize >= self.timestamps.len() {
            return Err(ProviderError::UnknownFrame(frame));
        }
        if !self.frames.contains_key(&frame) {
            let dir = self.root.join("frames").join(frame.to_string());
            let load = |name: &str, kind| {
                let path = dir.join(name);
                Raster::load(&path, kind).map_err(|source| match source {
                    RasterError::Io(e) if e.kind() == io::ErrorKind::NotFound => {
                        ProviderError::UnknownFrame(frame)
                    }
                    source => ProviderError::Raster { path, source },
                })
            };
            let data = PriorFrameData {
                frame_id: frame,
                depth: load("depth.dpr", RasterKind::Depth)?,
                confidence: load("confidence.prb", RasterKind::Probability)?,
                motion_prob: load("motion.prb", RasterKind::Probability)?,
                batch_id: 0,
                applied_scale: 1.0,
            };
            data.validate()?;
            self.frames.insert(frame, data);
        }
        Ok(&self.frames[&frame])
    }

    fn load_pair(
        &mut self,
        source: FrameId,
        target: FrameId,
    ) -> Result<&HashMap<u64, (Pixel, bool)>, ProviderError> {
        if !self.flows.contains_key(&(source, target)) {
            let path = self
                .root
                .join("flows")
                .join(flow_file_name(source, target));
            let text = match fs::read_to_string(&path) {
                Ok(t) => t,
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    return Err(ProviderError::UnknownPair(source, target))
                }
                Err(source) => return Err(ProviderError::Io { path, source }),
            };
            let mut rows = HashMap::new();
            for (line_no, fields) in data_lines(&text) {
                let parsed = parse_fields::<4>(&fields, &path, line_no)?;
                rows.insert(
                    parsed[0] as u64,
                    (Pixel::new(parsed[1], parsed[2]), parsed[3] != 0.0),
                );
            }
            self.flows.insert((source, target), rows);
        }
        Ok(&self.flows[&(source, target)])
    }
}

impl SequenceProvider for FileProvider {
    fn intrinsics(&self) -> CameraIntrinsics {
        self.intrinsics
    }

    fn frame_count(&self) -> usize {
        self.timestamps.len()
    }

    fn timestamp(&self, frame: FrameId) -> Result<f64, ProviderError> {
        self.timestamps
            .get(frame as usize)
            .copied()
            .ok_or(ProviderError::UnknownFrame(frame))
    }

    fn request_priors(&mut self, frames: &[FrameId]) -> Result<PriorBatchResponse, ProviderError> {
        if frames.is_empty() {
            return Err(ProviderError::EmptyRequest);
        }
        let batch_id = self.next_batch;
        let scale = match &self.batch_scales {
            Some(s) => *s
                .get(batch_id as usize)
                .ok_or(ProviderError::UnknownBatch(batch_id))?,
            None => 1.0,
        };
        let mut out = Vec::with_capacity(frames.len());
        for &f in frames {
            let mut data = self.load_frame(f)?.clone();
            data.depth = data.depth.map(|d| if d > 0.0 { d * scale } else { d });
            data.batch_id = batch_id;
            out.push(data);
        }
        self.next_batch += 1;
        Ok(PriorBatchResponse {
            batch_id,
            frames: out,
        })
    }

    fn track_patches(
        &mut self,
        patches: &[Patch],
        target: FrameId,
    ) -> Result<Vec<FlowObservation>, ProviderError> {
        if target as usize >= self.timestamps.len() {
            return Err(ProviderError::UnknownFrame(target));
        }
        let intr = self.intrinsics;
        let mut out = Vec::with_capacity(patches.len());
        for patch in patches {
            let key = pixel_key(&intr, patch)?;
            let rows = self.load_pair(patch.owner_frame, target)?;
            let (observed, valid) = rows
                .get(&key)
                .copied()
                .unwrap_or((Pixel::new(f64::NAN, f64::NAN), false));
            out.push(FlowObservation {
                patch_id: patch.patch_id,
                source_frame: patch.owner_frame,
                target_frame: target,
                observed,
                valid,
            });
        }
        Ok(out)
    }
}

fn read_text(path: &Path) -> Result<String, ProviderError> {
    fs::read_to_string(path).map_err(|source| ProviderError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-empty, non-comment lines with 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

fn parse_fields<const N: usize>(
    fields: &[&str],
    path: &Path,
    line: usize,
) -> Result<[f64; N], ProviderError> {
    if fields.len() != N {
        return Err(ProviderError::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("expected {N} fields, found {}", fields.len()),
        });
    }
    let mut out = [0.0; N];
    for (o, f) in out.iter_mut().zip(fields) {
        *o = f.parse().map_err(|e: std::num::ParseFloatError| ProviderError::Parse {
            path: path.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
    }
    Ok(out)
}

/// Writes `camera.txt` and `timestamps.txt` for a sequence directory.
pub fn write_sequence_header(
    root: &Path,
    intr: &CameraIntrinsics,
    timestamps: &[f64],
) -> io::Result<()> {
    fs::create_dir_all(root)?;
    fs::write(
        root.join("camera.txt"),
        format!(
            "{} {} {} {} {} {}\n",
            intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height
        ),
    )?;
    let mut w = BufWriter::new(fs::File::create(root.join("timestamps.txt"))?);
    for (i, t) in timestamps.iter().enumerate() {
        writeln!(w, "{i} {t}")?;
    }
    w.flush()
}
