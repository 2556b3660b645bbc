//! Little-endian byte cursor shared by the PSET, SPTV and MASK readers.

use crate::error::{Error, Result};

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.buf.len())
            .ok_or_else(|| {
                Error::format(
                    self.pos,
                    format!("truncated: need {n} bytes for {what}, {} left", self.buf.len() - self.pos),
                )
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != expected {
            return Err(Error::format(
                0,
                format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), std::str::from_utf8(expected).unwrap_or("?")),
            ));
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u32) -> Result<()> {
        let at = self.pos;
        let v = self.u32("version")?;
        if v != expected {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(())
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub fn name(&mut self) -> Result<String> {
        let len = self.u16("name length")? as usize;
        let at = self.pos;
        let raw = self.take(len, "name")?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(at, "tensor name is not UTF-8"))
    }

    /// Reads `n` finite float32 values, reporting the offset of the first non-finite one.
    pub fn finite_f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let start = self.pos;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(start, "length overflow"))?, what)?;
        let mut out = Vec::with_capacity(n);
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::format(start + 4 * i, format!("non-finite value in {what}")));
            }
            out.push(v);
        }
        Ok(out)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub(crate) fn put_name(out: &mut Vec<u8>, name: &str) {
    let len = u16::try_from(name.len()).expect("tensor names are shorter than 64 KiB");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}
