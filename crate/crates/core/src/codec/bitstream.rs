//! Container layout:
//!
//! ```text
//! "AEIC" | version u8 | config_id u8 | lambda_id u8 | width u16 | height u16
//! | z_len u32 | z bytes | 4 × (len u32 | bytes)
//! ```
//!
//! All integers little-endian.

use crate::entropy::STEPS;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AEIC";
pub const VERSION: u8 = 1;
/// Fixed bytes before the hyper segment.
pub const HEADER_LEN: usize = 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Header {
    pub version: u8,
    pub config_id: u8,
    pub lambda_id: u8,
    pub width: u16,
    pub height: u16,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub z: Vec<u8>,
    pub steps: [Vec<u8>; STEPS],
}

impl Header {
    pub fn new(config_id: u8, lambda_id: u8, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || width > u16::MAX as usize || height > u16::MAX as usize {
            return Err(Error::ImageTooLarge { width, height });
        }
        Ok(Header {
            version: VERSION,
            config_id,
            lambda_id,
            width: width as u16,
            height: height as u16,
        })
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&[self.version, self.config_id, self.lambda_id]);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Bitstream(format!(
                "truncated {what} at byte {}: need {n}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn segment(&mut self, what: &str) -> Result<Vec<u8>> {
        let len = self.u32(what)? as usize;
        Ok(self.take(len, what)?.to_vec())
    }
}

impl Bitstream {
    pub fn len(&self) -> usize {
        HEADER_LEN + self.z.len() + self.steps.iter().map(|s| 4 + s.len()).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn bits(&self) -> usize {
        8 * self.len()
    }

    /// Bits per pixel of the original image.
    pub fn bpp(&self) -> f64 {
        self.bits() as f64 / (self.header.width as f64 * self.header.height as f64)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.len());
        self.header.write(&mut out);
        for seg in std::iter::once(&self.z).chain(&self.steps) {
            let len = u32::try_from(seg.len()).map_err(|_| Error::Bitstream("segment longer than 4 GiB".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(seg);
        }
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor { bytes, pos: 0 };
        if c.take(4, "magic")? != MAGIC {
            return Err(Error::Bitstream("bad magic".into()));
        }
        let fixed = c.take(7, "header")?;
        let header = Header {
            version: fixed[0],
            config_id: fixed[1],
            lambda_id: fixed[2],
            width: u16::from_le_bytes([fixed[3], fixed[4]]),
            height: u16::from_le_bytes([fixed[5], fixed[6]]),
        };
        if header.version != VERSION {
            return Err(Error::Bitstream(format!(
                "unsupported version {} (expected {VERSION})",
                header.version
            )));
        }
        let z = c.segment("hyper segment")?;
        let mut steps: [Vec<u8>; STEPS] = Default::default();
        for (k, s) in steps.iter_mut().enumerate() {
            *s = c.segment(&format!("step {} segment", k + 1))?;
        }
        if c.pos != bytes.len() {
            return Err(Error::Bitstream(format!(
                "{} trailing bytes after last segment",
                bytes.len() - c.pos
            )));
        }
        Ok(Bitstream { header, z, steps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: Header) -> Bitstream {
        Bitstream {
            header: h,
            z: vec![1, 2, 3],
            steps: [vec![], vec![9], vec![8, 7], vec![6, 5, 4, 3]],
        }
    }

    #[test]
    fn layout_and_length() {
        let bs = sample(Header::new(7, 2, 64, 48).unwrap());
        let bytes = bs.to_bytes().unwrap();
        assert_eq!(bytes.len(), 15 + 3 + 4 * 4 + 7);
        assert_eq!(bytes.len(), bs.len());
        assert_eq!(&bytes[..4], b"AEIC");
        assert_eq!(&bytes[4..15], &[1, 7, 2, 64, 0, 48, 0, 3, 0, 0, 0]);
        assert_eq!(Bitstream::parse(&bytes).unwrap(), bs);
    }

    #[test]
    fn header_extremes_round_trip() {
        for v in [0u8, 255] {
            for d in [0u16, u16::MAX] {
                let h = Header {
                    version: VERSION,
                    config_id: v,
                    lambda_id: v,
                    width: d,
                    height: d,
                };
                let bs = sample(h);
                assert_eq!(Bitstream::parse(&bs.to_bytes().unwrap()).unwrap().header, h);
            }
        }
    }

    #[test]
    fn bpp_arithmetic() {
        let bs = Bitstream {
            header: Header::new(0, 0, 64, 64).unwrap(),
            z: vec![0; 128 - 31],
            steps: Default::default(),
        };
        assert_eq!(bs.bits(), 1024);
        assert_eq!(bs.bpp(), 0.25);
    }

    #[test]
    fn corrupt_streams_are_rejected() {
        let bytes = sample(Header::new(1, 1, 8, 8).unwrap()).to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(Bitstream::parse(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Bitstream::parse(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(Bitstream::parse(&bad).is_err());
        let mut bad = bytes;
        bad.push(0);
        assert!(Bitstream::parse(&bad).is_err());
        assert!(Header::new(0, 0, 70_000, 8).is_err());
    }
}
