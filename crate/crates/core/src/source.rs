//! Frame sources. A capture card would plug in here as another
//! [`FrameSource`].
//!
//! Descriptors:
//! - `synth:<params>` synthetic stream (see [`SynthSpec`])
//! - a directory of PNG files, read in file-name order at 30 fps
//! - a raw `HVID` video file
//!
//! Prefixing any descriptor with `live:` paces delivery at the source frame
//! rate, as a camera would.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::domain::Frame;
use crate::imageio::read_png;
use crate::synth::{SynthGenerator, SynthSpec};

/// Raw video header: magic, then width, height and fps as little-endian u16.
pub const RAW_VIDEO_MAGIC: &[u8; 4] = b"HVID";
pub const PNG_DIR_FPS: u32 = 30;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("source {descriptor:?} unavailable: {reason}")]
    Unavailable { descriptor: String, reason: String },
    #[error("source read failed: {0}")]
    Io(#[from] io::Error),
}

pub trait FrameSource: Send {
    /// Human-readable descriptor, stored in the session log.
    fn describe(&self) -> String;

    fn fps(&self) -> u32;

    /// Next frame, `Ok(None)` once exhausted.
    fn next_frame(&mut self) -> Result<Option<Frame>, SourceError>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum SourceKind {
    Synthetic(SynthSpec),
    PngDir(PathBuf),
    RawVideo(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub kind: SourceKind,
    /// Deliver at the source frame rate instead of as fast as consumed.
    pub live: bool,
}

impl SourceSpec {
    pub fn parse(descriptor: &str) -> Result<Self, SourceError> {
        let unavailable = |reason: String| SourceError::Unavailable {
            descriptor: descriptor.to_string(),
            reason,
        };
        let (live, rest) = match descriptor.strip_prefix("live:") {
            Some(r) => (true, r),
            None => (false, descriptor),
        };
        let kind = if let Some(params) = rest
            .strip_prefix("synth:")
            .or((rest == "synth").then_some(""))
        {
            SourceKind::Synthetic(params.parse().map_err(|e| unavailable(format!("{e}")))?)
        } else {
            let path = PathBuf::from(rest);
            if path.is_dir() {
                SourceKind::PngDir(path)
            } else if path.is_file() {
                SourceKind::RawVideo(path)
            } else {
                return Err(unavailable("no such file or directory".into()));
            }
        };
        Ok(Self { kind, live })
    }

    pub fn open(&self) -> Result<Box<dyn FrameSource>, SourceError> {
        Ok(match &self.kind {
            SourceKind::Synthetic(spec) => Box::new(SynthSource::new(spec.clone())?),
            SourceKind::PngDir(dir) => Box::new(PngDirSource::open(dir)?),
            SourceKind::RawVideo(path) => Box::new(RawVideoSource::open(path)?),
        })
    }
}

pub fn open_source(descriptor: &str) -> Result<(Box<dyn FrameSource>, bool), SourceError> {
    let spec = SourceSpec::parse(descriptor)?;
    Ok((spec.open()?, spec.live))
}

pub struct SynthSource {
    generator: SynthGenerator,
    next: u64,
}

impl SynthSource {
    pub fn new(spec: SynthSpec) -> Result<Self, SourceError> {
        let descriptor = format!("synth:{spec}");
        let generator = SynthGenerator::new(spec).map_err(|e| SourceError::Unavailable {
            descriptor,
            reason: e.to_string(),
        })?;
        Ok(Self { generator, next: 0 })
    }
}

impl FrameSource for SynthSource {
    fn describe(&self) -> String {
        format!("synth:{}", self.generator.spec())
    }

    fn fps(&self) -> u32 {
        self.generator.spec().fps
    }

    fn next_frame(&mut self) -> Result<Option<Frame>, SourceError> {
        let out = self.generator.render(self.next).map(|(f, _)| f);
        self.next += 1;
        Ok(out)
    }
}

pub struct PngDirSource {
    dir: PathBuf,
    files: Vec<PathBuf>,
    next: usize,
}

impl PngDirSource {
    pub fn open(dir: &Path) -> Result<Self, SourceError> {
        let unavailable = |reason: String| SourceError::Unavailable {
            descriptor: dir.display().to_string(),
            reason,
        };
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| unavailable(e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        if files.is_empty() {
            return Err(unavailable("directory holds no PNG files".into()));
        }
        files.sort();
        Ok(Self {
            dir: dir.to_path_buf(),
            files,
            next: 0,
        })
    }
}

impl FrameSource for PngDirSource {
    fn describe(&self) -> String {
        self.dir.display().to_string()
    }

    fn fps(&self) -> u32 {
        PNG_DIR_FPS
    }

    fn next_frame(&mut self) -> Result<Option<Frame>, SourceError> {
        let Some(path) = self.files.get(self.next) else {
            return Ok(None);
        };
        let index = self.next as u64;
        self.next += 1;
        Ok(Some(read_png(
            path,
            index,
            index * 1000 / PNG_DIR_FPS as u64,
        )?))
    }
}

/// Uncompressed RGB8 frames after a fixed 10-byte header.
pub struct RawVideoSource {
    path: PathBuf,
    reader: BufReader<File>,
    width: u32,
    height: u32,
    fps: u32,
    next: u64,
}

impl RawVideoSource {
    pub fn open(path: &Path) -> Result<Self, SourceError> {
        let unavailable = |reason: String| SourceError::Unavailable {
            descriptor: path.display().to_string(),
            reason,
        };
        let file = File::open(path).map_err(|e| unavailable(e.to_string()))?;
        let mut reader = BufReader::new(file);
        let mut header = [0u8; 10];
        reader
            .read_exact(&mut header)
            .map_err(|_| unavailable("truncated header".into()))?;
        if &header[..4] != RAW_VIDEO_MAGIC {
            return Err(unavailable("not an HVID file".into()));
        }
        let field = |i: usize| u16::from_le_bytes([header[i], header[i + 1]]) as u32;
        let (width, height, fps) = (field(4), field(6), field(8));
        if width == 0 || height == 0 || fps == 0 {
            return Err(unavailable("zero width, height or fps".into()));
        }
        Ok(Self {
            path: path.to_path_buf(),
            reader,
            width,
            height,
            fps,
            next: 0,
        })
    }
}

impl FrameSource for RawVideoSource {
    fn describe(&self) -> String {
        self.path.display().to_string()
    }

    fn fps(&self) -> u32 {
        self.fps
    }

    fn next_frame(&mut self) -> Result<Option<Frame>, SourceError> {
        let len = (self.width * self.height * 3) as usize;
        let mut buf = vec![0u8; len];
        let mut filled = 0;
        while filled < len {
            match self.reader.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        if filled < len {
            if filled > 0 {
                log::warn!(
                    "{}: ignoring truncated final frame ({filled} of {len} bytes)",
                    self.path.display()
                );
            }
            return Ok(None);
        }
        let index = self.next;
        self.next += 1;
        let frame = Frame::new(
            index,
            index * 1000 / self.fps as u64,
            self.width,
            self.height,
            buf,
        )
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        Ok(Some(frame))
    }
}

/// Writes frames (which must share one size) as an `HVID` file.
pub fn write_raw_video<'a>(
    path: &Path,
    fps: u32,
    frames: impl IntoIterator<Item = &'a Frame>,
) -> io::Result<u64> {
    let mut frames = frames.into_iter().peekable();
    let (w, h) = frames.peek().map_or((1, 1), |f| (f.width(), f.height()));
    let invalid = |m: &str| io::Error::new(io::ErrorKind::InvalidInput, m.to_string());
    let field = |v: u32| u16::try_from(v).map_err(|_| invalid("dimension exceeds 65535"));
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(RAW_VIDEO_MAGIC)?;
    for v in [w, h, fps] {
        out.write_all(&field(v)?.to_le_bytes())?;
    }
    let mut n = 0;
    for f in frames {
        if (f.width(), f.height()) != (w, h) {
            return Err(invalid("frames differ in size"));
        }
        out.write_all(f.pixels())?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageio::write_png;

    fn frames(n: u64) -> Vec<Frame> {
        (0..n)
            .map(|i| Frame::solid(i, 4, 3, [i as u8, 2, 3]).unwrap())
            .collect()
    }

    fn drain(src: &mut dyn FrameSource) -> Vec<Frame> {
        let mut out = Vec::new();
        while let Some(f) = src.next_frame().unwrap() {
            out.push(f);
        }
        out
    }

    #[test]
    fn raw_video_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.hvid");
        let src = frames(5);
        assert_eq!(write_raw_video(&path, 25, &src).unwrap(), 5);
        let (mut s, live) = open_source(path.to_str().unwrap()).unwrap();
        assert!(!live);
        assert_eq!(s.fps(), 25);
        let got = drain(s.as_mut());
        assert_eq!(got.len(), 5);
        for (g, w) in got.iter().zip(&src) {
            assert_eq!(g.pixels(), w.pixels());
            assert_eq!(g.index(), w.index());
        }
        assert_eq!(got[2].timestamp_ms(), 80);
    }

    #[test]
    fn truncated_raw_video_ends_early() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.hvid");
        write_raw_video(&path, 30, &frames(3)).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        let f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 5).unwrap();
        let mut s = RawVideoSource::open(&path).unwrap();
        assert_eq!(drain(&mut s).len(), 2);
    }

    #[test]
    fn png_dir_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        for (name, v) in [("b.png", 2u8), ("a.png", 1), ("c.png", 3)] {
            write_png(
                &dir.path().join(name),
                &Frame::solid(0, 2, 2, [v, 0, 0]).unwrap(),
            )
            .unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let (mut s, _) = open_source(dir.path().to_str().unwrap()).unwrap();
        let got = drain(s.as_mut());
        let reds: Vec<u8> = got.iter().map(|f| f.rgb(0, 0)[0]).collect();
        assert_eq!(reds, vec![1, 2, 3]);
        assert_eq!(
            got.iter().map(|f| f.index()).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn descriptors() {
        let (s, live) = open_source("live:synth:seed=3,plan=u1:2").unwrap();
        assert!(live);
        assert!(s.describe().starts_with("synth:seed=3,"));
        let (mut s, _) = open_source("synth:plan=u1:2/blur:1,size=64x64").unwrap();
        assert_eq!(drain(s.as_mut()).len(), 3);
        for bad in ["/definitely/not/here.hvid", "synth:seed=oops"] {
            assert!(
                matches!(open_source(bad), Err(SourceError::Unavailable { .. })),
                "{bad}"
            );
        }
        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.bin");
        std::fs::write(&junk, b"NOPE0000000000").unwrap();
        assert!(matches!(
            open_source(junk.to_str().unwrap()),
            Err(SourceError::Unavailable { .. })
        ));
    }
}
