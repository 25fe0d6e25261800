//! Minimal netpbm I/O: 8-bit graymaps (P2/P5) and pixmaps (P3/P6). Pixel
//! values are scaled to [0, 1] on read; writers take pre-quantized bytes so
//! callers stay in charge of normalization and clamping.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::Image;

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    /// Byte offset of the first sample after the single whitespace byte that
    /// terminates the header.
    data_start: usize,
}

/// Scan one header token, skipping whitespace and `#` comments.
fn next_token(bytes: &[u8], mut at: usize) -> Option<(usize, usize)> {
    loop {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if at < bytes.len() && bytes[at] == b'#' {
            while at < bytes.len() && bytes[at] != b'\n' {
                at += 1;
            }
            continue;
        }
        break;
    }
    if at >= bytes.len() {
        return None;
    }
    let start = at;
    while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
        at += 1;
    }
    Some((start, at))
}

fn parse_header(bytes: &[u8], display: &str) -> Result<Header> {
    let bad = |reason: &str| Error::format(display.to_string(), reason.to_string());
    if bytes.len() < 2 {
        return Err(bad("file too short for a netpbm magic"));
    }
    let magic = [bytes[0], bytes[1]];
    if !matches!(&magic, b"P2" | b"P3" | b"P5" | b"P6") {
        return Err(bad("unsupported magic (expected P2, P3, P5, or P6)"));
    }
    let mut fields = [0usize; 3];
    let mut at = 2;
    for field in &mut fields {
        let (start, end) = next_token(bytes, at).ok_or_else(|| bad("truncated header"))?;
        let text = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| bad("non-ascii header field"))?;
        *field = text.parse().map_err(|_| bad("malformed header number"))?;
        at = end;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit samples are supported (maxval in 1..=255)"));
    }
    // Exactly one whitespace byte separates the header from binary samples.
    if at >= bytes.len() {
        return Err(bad("missing sample data"));
    }
    Ok(Header { magic, width, height, maxval, data_start: at + 1 })
}

/// Read a PGM or PPM file into a planar image with samples in [0, 1].
/// Graymaps come back with one channel, pixmaps with three.
pub fn read_image(path: &Path) -> Result<Image> {
    let display = path.display().to_string();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::format(display.clone(), format!("unreadable: {e}")))?;
    let header = parse_header(&bytes, &display)?;
    let channels = match &header.magic {
        b"P2" | b"P5" => 1,
        _ => 3,
    };
    let count = header.width * header.height * channels;
    let scale = 1.0 / header.maxval as f64;
    let bad = |reason: String| Error::format(display.clone(), reason);

    // Interleaved samples, row-major, channel-last on disk.
    let interleaved: Vec<f64> = match &header.magic {
        b"P5" | b"P6" => {
            let data = &bytes[header.data_start..];
            if data.len() < count {
                return Err(bad(format!("expected {count} samples, found {}", data.len())));
            }
            data[..count].iter().map(|&b| b as f64 * scale).collect()
        }
        _ => {
            let mut values = Vec::with_capacity(count);
            // ASCII samples may begin at the whitespace right after maxval.
            let mut at = header.data_start - 1;
            while let Some((start, end)) = next_token(&bytes, at) {
                let text = std::str::from_utf8(&bytes[start..end])
                    .map_err(|_| bad("non-ascii sample".to_string()))?;
                let v: usize =
                    text.parse().map_err(|_| bad(format!("malformed sample {text:?}")))?;
                if v > header.maxval {
                    return Err(bad(format!("sample {v} exceeds maxval {}", header.maxval)));
                }
                values.push(v as f64 * scale);
                at = end;
                if values.len() == count {
                    break;
                }
            }
            if values.len() < count {
                return Err(bad(format!("expected {count} samples, found {}", values.len())));
            }
            values
        }
    };

    let mut image = Image::zeros(channels, header.height, header.width);
    for c in 0..channels {
        let plane = image.plane_mut(c);
        for i in 0..header.width * header.height {
            plane[i] = interleaved[i * channels + c];
        }
    }
    Ok(image)
}

/// Write an 8-bit binary graymap.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape(format!(
            "graymap payload holds {} bytes, expected {width}x{height}",
            pixels.len()
        )));
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P5\n{width} {height}\n255\n")?;
    file.write_all(pixels)?;
    file.flush()?;
    Ok(())
}

/// Write an 8-bit binary pixmap from interleaved RGB bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::shape(format!(
            "pixmap payload holds {} bytes, expected {width}x{height}x3",
            rgb.len()
        )));
    }
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(file, "P6\n{width} {height}\n255\n")?;
    file.write_all(rgb)?;
    file.flush()?;
    Ok(())
}

/// Quantize one channel plane to bytes over an explicit value range.
/// Values outside the range clamp; the return reports how many did.
pub fn quantize_plane(plane: &[f64], lo: f64, hi: f64) -> (Vec<u8>, usize) {
    assert!(hi > lo, "quantization range must be nonempty");
    let mut clipped = 0;
    let bytes = plane
        .iter()
        .map(|&v| {
            let scaled = (v - lo) / (hi - lo) * 255.0;
            if !(0.0..=255.0).contains(&scaled) {
                clipped += 1;
            }
            scaled.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    (bytes, clipped)
}
