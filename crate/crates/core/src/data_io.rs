//! Track files, dataset splitting and model files.
//!
//! # Track file
//!
//! UTF-8 text, one frame per line:
//!
//! ```text
//! # micromotion-tracks v1
//! # fps=30
//! <track_id>,<frame_index>,<label>,<x0>,<y0>,<c0>,...,<x17>,<y17>,<c17>
//! ```
//!
//! Lines starting with `#` are comments; `# fps=<value>` sets the frame rate for all
//! tracks (default 30). Blank lines are ignored. `track_id` is any text without commas,
//! `frame_index` a non-negative integer, `label` one of `walking`, `standing` or
//! anything else (read as unknown). Exactly 18 `(x, y, confidence)` triples follow,
//! all finite. Lines of one track may be interleaved with other tracks; each track is
//! sorted by frame index on load.
//!
//! # Model file
//!
//! A text header, a binary body, and a SHA-256 trailer:
//!
//! ```text
//! MMSTATE
//! format_version 1
//! feature_version 1
//! selection all
//! embed_dim 16
//! hidden_dim 64
//! group position 16            (one line per enabled group, input order)
//! config <key> <value>         (zero or more, training configuration echo)
//! array <name> <dim> [<dim>]   (one line per tensor, in storage order)
//! end
//! ```
//!
//! Every header line ends with `\n`. The body holds the values of each declared array
//! in order, row-major, as 8-byte little-endian IEEE-754 doubles. The last 32 bytes
//! are the SHA-256 digest of everything before them.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{FeatureGroup, FeatureSelection, FEATURE_VERSION};
use crate::network::{Arch, ModelParams};
use crate::skeleton::{impute_track_with_report, Keypoint, MotionState, Pose, Track, NUM_KEYPOINTS};
use crate::training::TrainConfig;

pub const TRACK_FORMAT_HEADER: &str = "# micromotion-tracks v1";
pub const DEFAULT_FPS: f64 = 30.0;
pub const MODEL_MAGIC: &str = "MMSTATE";
pub const MODEL_FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// One parsed line of a track file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackRecord {
    pub track_id: String,
    pub label: Option<MotionState>,
    pub pose: Pose,
}

pub fn parse_label(s: &str) -> Option<MotionState> {
    match s {
        "walking" => Some(MotionState::Walking),
        "standing" => Some(MotionState::Standing),
        _ => None,
    }
}

pub fn label_str(label: Option<MotionState>) -> &'static str {
    label.map_or("unknown", MotionState::as_str)
}

/// Parses a data line. `line_no` is 1-based and only used in errors.
pub fn parse_record(line: &str, line_no: usize) -> Result<TrackRecord> {
    let err = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    let fields: Vec<&str> = line.trim_end().split(',').map(str::trim).collect();
    let expected = 3 + 3 * NUM_KEYPOINTS;
    if fields.len() != expected {
        let triples = fields.len().saturating_sub(3) as f64 / 3.0;
        return Err(err(format!(
            "expected {expected} fields (18 keypoint triples), found {} ({triples:.1} triples)",
            fields.len()
        )));
    }
    if fields[0].is_empty() {
        return Err(err("empty track id".into()));
    }
    let frame_index: u64 = fields[1]
        .parse()
        .map_err(|_| err(format!("bad frame index {:?}", fields[1])))?;
    let mut keypoints = [Keypoint::default(); NUM_KEYPOINTS];
    for (j, k) in keypoints.iter_mut().enumerate() {
        let mut v = [0.0; 3];
        for (c, slot) in v.iter_mut().enumerate() {
            let text = fields[3 + 3 * j + c];
            *slot = text
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| err(format!("keypoint {j}: bad number {text:?}")))?;
        }
        *k = Keypoint::new(v[0], v[1], v[2]);
    }
    Ok(TrackRecord {
        track_id: fields[0].to_string(),
        label: parse_label(fields[2]),
        pose: Pose::new(keypoints, frame_index),
    })
}

/// Value of a `# fps=` comment, if this line is one.
pub fn parse_fps_comment(line: &str) -> Option<f64> {
    let rest = line.strip_prefix('#')?.trim();
    rest.strip_prefix("fps=")?.trim().parse().ok()
}

pub fn format_record(track_id: &str, label: Option<MotionState>, pose: &Pose) -> String {
    let mut line = format!("{track_id},{},{}", pose.frame_index, label_str(label));
    for k in &pose.keypoints {
        let _ = write!(line, ",{},{},{}", k.x, k.y, k.confidence);
    }
    line
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackStats {
    pub track_id: String,
    pub frames: usize,
    pub walking: usize,
    pub standing: usize,
    pub unknown: usize,
    pub imputed_keypoints: usize,
    pub unrecoverable_keypoints: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tracks: Vec<Track>,
    pub stats: Vec<TrackStats>,
}

/// Groups records into tracks (first-appearance order), sorts frames, rejects
/// duplicates, and applies carry-forward imputation.
pub fn assemble_tracks(records: Vec<TrackRecord>, fps: f64, conf_threshold: f64) -> Result<Dataset> {
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<(Pose, Option<MotionState>)>> = HashMap::new();
    let mut seen: HashSet<(String, u64)> = HashSet::new();
    for r in records {
        if !seen.insert((r.track_id.clone(), r.pose.frame_index)) {
            return Err(Error::DuplicateFrame {
                track_id: r.track_id,
                frame_index: r.pose.frame_index,
            });
        }
        grouped
            .entry(r.track_id.clone())
            .or_insert_with(|| {
                order.push(r.track_id.clone());
                Vec::new()
            })
            .push((r.pose, r.label));
    }
    let mut tracks = Vec::with_capacity(order.len());
    let mut stats = Vec::with_capacity(order.len());
    for id in order {
        let mut frames = grouped.remove(&id).unwrap_or_default();
        frames.sort_by_key(|(p, _)| p.frame_index);
        let (poses, labels): (Vec<Pose>, Vec<Option<MotionState>>) = frames.into_iter().unzip();
        let raw = Track::new(id.clone(), poses, labels, fps)?;
        let (track, report) = impute_track_with_report(&raw, conf_threshold);
        let count = |s: Option<MotionState>| track.labels.iter().filter(|&&l| l == s).count();
        stats.push(TrackStats {
            track_id: id,
            frames: track.len(),
            walking: count(Some(MotionState::Walking)),
            standing: count(Some(MotionState::Standing)),
            unknown: count(None),
            imputed_keypoints: report.imputed,
            unrecoverable_keypoints: report.unrecoverable,
        });
        tracks.push(track);
    }
    Ok(Dataset { tracks, stats })
}

pub fn parse_tracks<R: BufRead>(reader: R, conf_threshold: f64) -> Result<Dataset> {
    let mut fps = DEFAULT_FPS;
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            if let Some(v) = parse_fps_comment(trimmed) {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("fps must be positive, got {v}"),
                    });
                }
                fps = v;
            }
            continue;
        }
        records.push(parse_record(trimmed, i + 1)?);
    }
    assemble_tracks(records, fps, conf_threshold)
}

pub fn load_tracks(path: impl AsRef<Path>, conf_threshold: f64) -> Result<Dataset> {
    let file = fs::File::open(path)?;
    parse_tracks(BufReader::new(file), conf_threshold)
}

/// Serializes tracks in the format read by [`parse_tracks`]. `comments` are written
/// after the format header as `# ` lines.
pub fn format_tracks(tracks: &[Track], comments: &[String]) -> String {
    let fps = tracks.first().map_or(DEFAULT_FPS, |t| t.fps);
    let mut out = String::new();
    out.push_str(TRACK_FORMAT_HEADER);
    out.push('\n');
    for c in comments {
        let _ = writeln!(out, "# {c}");
    }
    let _ = writeln!(out, "# fps={fps}");
    for track in tracks {
        for (pose, &label) in track.poses.iter().zip(&track.labels) {
            out.push_str(&format_record(&track.track_id, label, pose));
            out.push('\n');
        }
    }
    out
}

pub fn write_tracks(path: impl AsRef<Path>, tracks: &[Track], comments: &[String]) -> Result<()> {
    fs::write(path, format_tracks(tracks, comments))?;
    Ok(())
}

/// Splits by whole tracks: `round(n * val_fraction)` tracks, clamped to `[1, n - 1]`,
/// go to validation after a seeded shuffle. Both parts keep the input order.
pub fn split_dataset(tracks: &[Track], val_fraction: f64, seed: u64) -> Result<(Vec<Track>, Vec<Track>)> {
    let n = tracks.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 tracks to split, got {n}")));
    }
    if !(0.0..=1.0).contains(&val_fraction) {
        return Err(Error::InvalidConfig(format!("val_fraction {val_fraction} outside [0, 1]")));
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &idx[..n_val] {
        is_val[i] = true;
    }
    let (val, train): (Vec<_>, Vec<_>) = tracks.iter().cloned().zip(is_val).partition(|(_, v)| *v);
    Ok((
        train.into_iter().map(|(t, _)| t).collect(),
        val.into_iter().map(|(t, _)| t).collect(),
    ))
}

/// Contents of a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub params: ModelParams,
    /// Configuration echo as stored, in file order.
    pub config: Vec<(String, String)>,
}

pub fn encode_model(params: &ModelParams, config: Option<&TrainConfig>) -> Vec<u8> {
    let arch = &params.arch;
    let mut header = String::new();
    let _ = writeln!(header, "{MODEL_MAGIC}");
    let _ = writeln!(header, "format_version {MODEL_FORMAT_VERSION}");
    let _ = writeln!(header, "feature_version {FEATURE_VERSION}");
    let _ = writeln!(header, "selection {}", arch.selection.name());
    let _ = writeln!(header, "embed_dim {}", arch.embed_dim);
    let _ = writeln!(header, "hidden_dim {}", arch.hidden_dim);
    for (g, w) in &arch.groups {
        let _ = writeln!(header, "group {} {w}", g.name());
    }
    if let Some(cfg) = config {
        for (k, v) in cfg.entries() {
            let _ = writeln!(header, "config {k} {v}");
        }
    }
    let tensors = params.tensors();
    for t in &tensors {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(header, "array {} {}", t.name, dims.join(" "));
    }
    header.push_str("end\n");

    let mut bytes = header.into_bytes();
    for t in &tensors {
        for v in t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    bytes
}

pub fn save_model(params: &ModelParams, config: Option<&TrainConfig>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_model(params, config))?;
    Ok(())
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedModel(msg.into())
}

fn parse_usize(s: Option<&str>, what: &str) -> Result<usize> {
    s.and_then(|v| v.parse().ok())
        .ok_or_else(|| malformed(format!("bad {what}")))
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    let magic = format!("{MODEL_MAGIC}\n");
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(malformed("missing MMSTATE magic"));
    }
    // version gate first, so files from other versions are reported as such
    let first_lines: Vec<&[u8]> = bytes.splitn(3, |&b| b == b'\n').take(2).collect();
    if let Some(line) = first_lines.get(1) {
        let line = String::from_utf8_lossy(line);
        if let Some(v) = line.strip_prefix("format_version ") {
            if v.trim() != MODEL_FORMAT_VERSION.to_string() {
                return Err(Error::VersionUnsupported(format!(
                    "model format version {} (supported: {MODEL_FORMAT_VERSION})",
                    v.trim()
                )));
            }
        }
    }
    if bytes.len() < magic.len() + DIGEST_LEN {
        return Err(Error::ChecksumMismatch);
    }
    let (content, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(content).as_slice() != digest {
        return Err(Error::ChecksumMismatch);
    }

    let end = content
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| malformed("header has no end line"))?;
    let header = std::str::from_utf8(&content[..end + 1]).map_err(|_| malformed("header is not UTF-8"))?;
    let body = &content[end + 5..];

    let mut selection = None;
    let mut embed_dim = None;
    let mut hidden_dim = None;
    let mut groups = Vec::new();
    let mut config = Vec::new();
    let mut arrays: Vec<(String, Vec<usize>)> = Vec::new();
    let mut format_seen = false;
    for line in header.lines().skip(1) {
        let mut parts = line.split(' ');
        let key = parts.next().unwrap_or("");
        match key {
            "format_version" => format_seen = true,
            "feature_version" => {
                let v = parts.next().unwrap_or("");
                if v != FEATURE_VERSION.to_string() {
                    return Err(Error::VersionUnsupported(format!(
                        "feature version {v} (supported: {FEATURE_VERSION})"
                    )));
                }
            }
            "selection" => {
                let v = parts.next().unwrap_or("");
                selection = Some(FeatureSelection::parse(v).ok_or_else(|| malformed(format!("unknown selection {v:?}")))?);
            }
            "embed_dim" => embed_dim = Some(parse_usize(parts.next(), "embed_dim")?),
            "hidden_dim" => hidden_dim = Some(parse_usize(parts.next(), "hidden_dim")?),
            "group" => {
                let name = parts.next().unwrap_or("");
                let g = FeatureGroup::parse(name).ok_or_else(|| malformed(format!("unknown group {name:?}")))?;
                groups.push((g, parse_usize(parts.next(), "group width")?));
            }
            "config" => {
                let k = parts.next().ok_or_else(|| malformed("config line without key"))?;
                let v: Vec<&str> = parts.collect();
                config.push((k.to_string(), v.join(" ")));
            }
            "array" => {
                let name = parts.next().ok_or_else(|| malformed("array line without name"))?;
                let dims = parts
                    .map(|d| d.parse::<usize>().map_err(|_| malformed(format!("bad shape for {name}"))))
                    .collect::<Result<Vec<_>>>()?;
                arrays.push((name.to_string(), dims));
            }
            other => return Err(malformed(format!("unknown header line {other:?}"))),
        }
    }
    if !format_seen {
        return Err(malformed("missing format_version"));
    }
    let arch = Arch {
        selection: selection.ok_or_else(|| malformed("missing selection"))?,
        groups,
        embed_dim: embed_dim.ok_or_else(|| malformed("missing embed_dim"))?,
        hidden_dim: hidden_dim.ok_or_else(|| malformed("missing hidden_dim"))?,
    };
    if arch.groups.is_empty() || arch.embed_dim == 0 || arch.hidden_dim == 0 {
        return Err(malformed("empty architecture"));
    }
    let mut params = ModelParams::zeros(&arch);
    {
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        if expected != arrays {
            return Err(malformed("declared arrays do not match the architecture"));
        }
    }
    let total: usize = arrays.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if body.len() != 8 * total {
        return Err(malformed(format!("body has {} bytes, expected {}", body.len(), 8 * total)));
    }
    let mut chunks = body.chunks_exact(8);
    for tensor in params.all_tensors_mut() {
        for v in tensor.iter_mut() {
            let chunk = chunks.next().ok_or_else(|| malformed("truncated body"))?;
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(ModelFile { params, config })
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<ModelFile> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    Ok(load_model_file(path)?.params)
}
