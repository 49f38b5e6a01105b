//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM; interleaved row-major.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, channels: 1, data }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), 3 * width * height);
        Self { width, height, channels: 3, data }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("netpbm: {m}"));
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(bad(&format!("unsupported magic `{m}`"))),
        };
        let mut num = || -> Result<usize> { token()?.parse().map_err(|_| bad("non-numeric header field")) };
        let (width, height, maxval) = (num()?, num()?, num()?);
        if maxval != 255 {
            return Err(bad(&format!("maxval {maxval}; only 8-bit files are supported")));
        }
        // exactly one whitespace byte separates header from raster
        let start = pos + 1;
        let len = width * height * channels;
        if bytes.len() < start + len {
            return Err(bad("truncated raster"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data: bytes[start..start + len].to_vec(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::decode(&fs::read(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let g = Image8::gray(3, 2, vec![0, 10, 20, 30, 40, 255]);
        assert_eq!(Image8::decode(&g.encode()).unwrap(), g);
        let c = Image8::rgb(2, 1, vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(Image8::decode(&c.encode()).unwrap(), c);
    }

    #[test]
    fn header_comments_and_errors() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x07\x08";
        assert_eq!(Image8::decode(bytes).unwrap().data, vec![7, 8]);
        assert!(Image8::decode(b"P5\n2 2\n255\n\x01").is_err());
        assert!(Image8::decode(b"P3\n1 1\n255\n1").is_err());
        assert!(Image8::decode(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }
}
