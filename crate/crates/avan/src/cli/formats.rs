//! Bit-exact on-disk formats: binary PPM frames, the `AVFM` recording
//! matrix, gaze CSV, and the key-value manifest describing a dataset.
//!
//! Every format is deterministic byte-for-byte given the same data, which
//! is what makes "same seed → byte-identical dataset" testable.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::alignment::GazeSample;
use crate::error::{Error, Result};
use crate::tensorcore::{Scalar, Tensor};

pub const FMRI_MAGIC: &[u8; 4] = b"AVFM";
pub const FMRI_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Key-value text files
// ---------------------------------------------------------------------------

/// Parse a `key = value` text file: one pair per line, `#` comments and
/// blank lines ignored, duplicate keys rejected. Order is preserved so
/// writers can round-trip deterministically.
pub fn parse_kv(path: &Path, text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::format(
                path,
                format!("line {}: expected `key = value`, got `{raw}`", lineno + 1),
            ));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::format(path, format!("line {}: empty key", lineno + 1)));
        }
        if pairs.iter().any(|(k, _)| k == &key) {
            return Err(Error::format(path, format!("duplicate key `{key}`")));
        }
        pairs.push((key, value));
    }
    Ok(pairs)
}

/// Typed access over parsed key-value pairs that records which keys were
/// consumed, so loaders can fail fast on unknown keys.
pub struct KvReader<'a> {
    path: &'a Path,
    pairs: Vec<(String, String)>,
    used: Vec<bool>,
}

impl<'a> KvReader<'a> {
    pub fn new(path: &'a Path, text: &str) -> Result<Self> {
        let pairs = parse_kv(path, text)?;
        let used = vec![false; pairs.len()];
        Ok(KvReader { path, pairs, used })
    }

    pub fn opt(&mut self, key: &str) -> Option<&str> {
        for (i, (k, v)) in self.pairs.iter().enumerate() {
            if k == key {
                self.used[i] = true;
                return Some(v);
            }
        }
        None
    }

    pub fn require(&mut self, key: &str) -> Result<&str> {
        let path = self.path;
        self.opt(key)
            .ok_or_else(|| Error::format(path, format!("missing key `{key}`")))
    }

    pub fn parse<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let path = self.path.to_path_buf();
        let raw = self.require(key)?;
        raw.parse().map_err(|_| {
            Error::format(&path, format!("key `{key}`: cannot parse `{raw}`"))
        })
    }

    pub fn parse_opt<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let path = self.path.to_path_buf();
        match self.opt(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| Error::format(&path, format!("key `{key}`: cannot parse `{raw}`"))),
        }
    }

    /// Error if any key was never consumed (fail-fast on typos).
    pub fn finish(self) -> Result<()> {
        for (i, (k, _)) in self.pairs.iter().enumerate() {
            if !self.used[i] {
                return Err(Error::format(self.path, format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// PPM frames
// ---------------------------------------------------------------------------

/// Write an image `[3, h, w]` with values in `[0, 1]` as binary PPM (P6).
pub fn write_ppm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::usage(format!("PPM image must be [3, h, w], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    write!(out, "P6\n{w} {h}\n255\n").map_err(io_err)?;
    let data = image.data();
    let plane = h * w;
    let mut row = Vec::with_capacity(3 * w);
    for y in 0..h {
        row.clear();
        for x in 0..w {
            for c in 0..3 {
                let v = data[c * plane + y * w + x].as_f64();
                row.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out.write_all(&row).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Read a binary PPM (P6) into `[3, h, w]` with values in `[0, 1]`.
pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::format(path, msg.to_string());
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // Skip whitespace and `#` comments between header tokens.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header".to_string()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(bad("not a binary PPM (P6) file"));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    if token(&bytes)? != "255" {
        return Err(bad("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(bad("pixel data truncated"));
    }
    let mut data = vec![T::from_f64(0.0); need];
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let b = bytes[pos + (y * w + x) * 3 + c];
                data[c * plane + y * w + x] = T::from_f64(b as f64 / 255.0);
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

// ---------------------------------------------------------------------------
// AVFM recording matrices
// ---------------------------------------------------------------------------

/// Write a `[t, v]` matrix as `AVFM`: magic, u32 version, u32 t, u32 v,
/// then t×v little-endian f32 values row-major.
pub fn write_fmri_matrix<T: Scalar>(path: &Path, matrix: &Tensor<T>) -> Result<()> {
    let shape = matrix.shape();
    if shape.len() != 2 {
        return Err(Error::usage(format!("recording matrix must be [t, v], got {shape:?}")));
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    out.write_all(FMRI_MAGIC).map_err(io_err)?;
    out.write_all(&FMRI_VERSION.to_le_bytes()).map_err(io_err)?;
    out.write_all(&(shape[0] as u32).to_le_bytes()).map_err(io_err)?;
    out.write_all(&(shape[1] as u32).to_le_bytes()).map_err(io_err)?;
    for v in matrix.data() {
        out.write_all(&(v.as_f64() as f32).to_le_bytes()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Read only the `(t, v)` header of an `AVFM` file.
pub fn read_fmri_header(path: &Path) -> Result<(usize, usize)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    read_fmri_header_from(path, &mut reader)
}

fn read_fmri_header_from(path: &Path, reader: &mut impl Read) -> Result<(usize, usize)> {
    let mut head = [0u8; 16];
    reader
        .read_exact(&mut head)
        .map_err(|e| Error::io(path, e))?;
    if &head[0..4] != FMRI_MAGIC {
        return Err(Error::format(path, "bad magic, not an AVFM file".to_string()));
    }
    let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
    if version != FMRI_VERSION {
        return Err(Error::format(path, format!("unsupported AVFM version {version}")));
    }
    let t = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
    let v = u32::from_le_bytes(head[12..16].try_into().unwrap()) as usize;
    Ok((t, v))
}

/// Read an `AVFM` file into a `[t, v]` tensor.
pub fn read_fmri_matrix<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let (t, v) = read_fmri_header_from(path, &mut reader)?;
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() != t * v * 4 {
        return Err(Error::format(
            path,
            format!("expected {} payload bytes for {t}×{v}, got {}", t * v * 4, bytes.len()),
        ));
    }
    let data: Vec<T> = bytes
        .chunks_exact(4)
        .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Tensor::new(&[t, v], data)
}

// ---------------------------------------------------------------------------
// Gaze CSV
// ---------------------------------------------------------------------------

pub const GAZE_CSV_HEADER: &str = "t_ms,x_px,y_px,valid";

pub fn write_gaze_csv(path: &Path, samples: &[GazeSample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(out, "{GAZE_CSV_HEADER}").map_err(io_err)?;
    for s in samples {
        writeln!(out, "{},{},{},{}", s.t_ms, s.x_px, s.y_px, u8::from(s.valid)).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

pub fn read_gaze_csv(path: &Path) -> Result<Vec<GazeSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::format(path, "empty gaze file".to_string())),
    };
    if header.trim() != GAZE_CSV_HEADER {
        return Err(Error::format(
            path,
            format!("expected header `{GAZE_CSV_HEADER}`, got `{header}`"),
        ));
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::format(path, format!("line {}: expected 4 fields", lineno + 1)));
        }
        let bad = |what: &str| Error::format(path, format!("line {}: bad {what}", lineno + 1));
        samples.push(GazeSample {
            t_ms: fields[0].trim().parse().map_err(|_| bad("t_ms"))?,
            x_px: fields[1].trim().parse().map_err(|_| bad("x_px"))?,
            y_px: fields[2].trim().parse().map_err(|_| bad("y_px"))?,
            valid: match fields[3].trim() {
                "0" => false,
                "1" => true,
                _ => return Err(bad("valid flag")),
            },
        });
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

/// Per-subject input files, relative to the dataset root.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectFiles {
    pub gaze: String,
    pub fmri: String,
}

/// Describes a dataset directory: frames, per-subject gaze and recording
/// files, and an optional ground-truth sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    pub frame_dir: String,
    pub frame_count: usize,
    pub fps: f64,
    pub frame_width: usize,
    pub frame_height: usize,
    pub screen_width: f64,
    pub screen_height: f64,
    pub fmri_rate_hz: f64,
    pub voxels: usize,
    pub subjects: Vec<SubjectFiles>,
    pub truth: Option<String>,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

impl DatasetManifest {
    pub fn frame_file(i: usize) -> String {
        format!("frame_{i:06}.ppm")
    }

    pub fn frame_path(&self, root: &Path, i: usize) -> PathBuf {
        root.join(&self.frame_dir).join(Self::frame_file(i))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        text.push_str(&format!("version = {}\n", self.version));
        text.push_str(&format!("frame.dir = {}\n", self.frame_dir));
        text.push_str(&format!("frame.count = {}\n", self.frame_count));
        text.push_str(&format!("frame.fps = {}\n", self.fps));
        text.push_str(&format!("frame.width = {}\n", self.frame_width));
        text.push_str(&format!("frame.height = {}\n", self.frame_height));
        text.push_str(&format!("screen.width = {}\n", self.screen_width));
        text.push_str(&format!("screen.height = {}\n", self.screen_height));
        text.push_str(&format!("fmri.rate_hz = {}\n", self.fmri_rate_hz));
        text.push_str(&format!("fmri.voxels = {}\n", self.voxels));
        text.push_str(&format!("subjects = {}\n", self.subjects.len()));
        for (i, s) in self.subjects.iter().enumerate() {
            text.push_str(&format!("subject.{i}.gaze = {}\n", s.gaze));
            text.push_str(&format!("subject.{i}.fmri = {}\n", s.fmri));
        }
        if let Some(truth) = &self.truth {
            text.push_str(&format!("truth = {truth}\n"));
        }
        write_text(path, &text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let mut kv = KvReader::new(path, &text)?;
        let version: u32 = kv.parse("version")?;
        if version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("unsupported manifest version {version}")));
        }
        let manifest = DatasetManifest {
            version,
            frame_dir: kv.require("frame.dir")?.to_string(),
            frame_count: kv.parse("frame.count")?,
            fps: kv.parse("frame.fps")?,
            frame_width: kv.parse("frame.width")?,
            frame_height: kv.parse("frame.height")?,
            screen_width: kv.parse("screen.width")?,
            screen_height: kv.parse("screen.height")?,
            fmri_rate_hz: kv.parse("fmri.rate_hz")?,
            voxels: kv.parse("fmri.voxels")?,
            subjects: {
                let n: usize = kv.parse("subjects")?;
                let mut subjects = Vec::with_capacity(n);
                for i in 0..n {
                    subjects.push(SubjectFiles {
                        gaze: kv.require(&format!("subject.{i}.gaze"))?.to_string(),
                        fmri: kv.require(&format!("subject.{i}.fmri"))?.to_string(),
                    });
                }
                subjects
            },
            truth: kv.opt("truth").map(|s| s.to_string()),
        };
        kv.finish()?;
        Ok(manifest)
    }

    /// Check that every referenced file exists and declared counts match,
    /// before any compute starts.
    pub fn validate(&self, root: &Path) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::format(root.join(MANIFEST_NAME), "no subjects declared"));
        }
        for i in 0..self.frame_count {
            let p = self.frame_path(root, i);
            if !p.is_file() {
                return Err(Error::format(&p, "frame listed in manifest is missing"));
            }
        }
        for (i, s) in self.subjects.iter().enumerate() {
            let gaze = root.join(&s.gaze);
            if !gaze.is_file() {
                return Err(Error::format(&gaze, format!("gaze file for subject {i} is missing")));
            }
            let fmri = root.join(&s.fmri);
            let (t, v) = read_fmri_header(&fmri)?;
            if v != self.voxels {
                return Err(Error::format(
                    &fmri,
                    format!("declares {v} voxels but manifest says {}", self.voxels),
                ));
            }
            if t == 0 {
                return Err(Error::format(&fmri, "recording has zero volumes"));
            }
        }
        if let Some(truth) = &self.truth {
            let p = root.join(truth);
            if !p.is_file() {
                return Err(Error::format(&p, "ground-truth sidecar is missing"));
            }
        }
        Ok(())
    }
}
