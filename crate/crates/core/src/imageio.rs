//! PNG read/write for retained frames and PNG-directory sources.

use std::fs::File;
use std::io::{self, BufReader, BufWriter};
use std::path::Path;

use crate::domain::Frame;

fn other(e: impl std::error::Error + Send + Sync + 'static) -> io::Error {
    io::Error::other(e)
}

pub fn write_png(path: &Path, frame: &Frame) -> io::Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, frame.width(), frame.height());
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(other)?;
    writer.write_image_data(frame.pixels()).map_err(other)?;
    writer.finish().map_err(other)
}

/// Decodes an 8-bit PNG into RGB8, dropping alpha and expanding gray.
pub fn read_png(path: &Path, index: u64, timestamp_ms: u64) -> io::Result<Frame> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(other)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| io::Error::other("png too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(other)?;
    buf.truncate(info.buffer_size());
    let rgb: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0]])
            .collect(),
        png::ColorType::Indexed => {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "unexpanded palette",
            ))
        }
    };
    Frame::new(index, timestamp_ms, info.width, info.height, rgb)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let frame = Frame::new(
            3,
            120,
            4,
            3,
            (0..36).map(|v| v as u8 * 7).collect::<Vec<_>>(),
        )
        .unwrap();
        write_png(&path, &frame).unwrap();
        let back = read_png(&path, 3, 120).unwrap();
        assert_eq!(back, frame);
    }
}
