//! Binary PPM (P6, 8-bit) and PGM (P5, 8- or 16-bit) images.
//!
//! Header comments are kept so the depth scale written as
//! `# depth_scale=<units per step>` survives a read/write cycle.

use std::io;

#[derive(Clone, Debug, PartialEq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    /// Comment lines without the leading `#`, trimmed.
    pub comments: Vec<String>,
    /// Row-major, channel-interleaved samples.
    pub samples: Vec<u16>,
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

impl Pnm {
    pub fn comment_value(&self, key: &str) -> Option<&str> {
        self.comments.iter().find_map(|c| c.strip_prefix(key).and_then(|r| r.strip_prefix('=')).map(str::trim))
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n");
        for c in &self.comments {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str(&format!("{} {}\n{}\n", self.width, self.height, self.maxval));
        let mut bytes = out.into_bytes();
        if self.maxval > 255 {
            for s in &self.samples {
                bytes.extend_from_slice(&s.to_be_bytes());
            }
        } else {
            bytes.extend(self.samples.iter().map(|&s| s as u8));
        }
        bytes
    }

    pub fn decode(bytes: &[u8]) -> io::Result<Pnm> {
        let mut pos = 0;
        let mut comments = Vec::new();
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            match bytes.get(pos) {
                None => return Err(bad("truncated header")),
                Some(b'#') => {
                    let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
                    comments.push(String::from_utf8_lossy(&bytes[pos + 1..end]).trim().to_string());
                    pos = end + 1;
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => {
                    let start = pos;
                    while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                        pos += 1;
                    }
                    tokens.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
                }
            }
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match tokens[0].as_str() {
            "P6" => 3,
            "P5" => 1,
            m => return Err(bad(format!("unsupported format {m} (expected P5 or P6)"))),
        };
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad header number '{s}'")));
        let (width, height, maxval) = (num(&tokens[1])?, num(&tokens[2])?, num(&tokens[3])?);
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(bad("bad image dimensions or maxval"));
        }
        let n = width * height * channels;
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        let raster = bytes.get(pos..).filter(|r| r.len() >= need).ok_or_else(|| bad("truncated raster"))?;
        let samples = if wide {
            raster[..need].chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            raster[..need].iter().map(|&b| b as u16).collect()
        };
        Ok(Pnm { width, height, channels, maxval: maxval as u16, comments, samples })
    }
}
