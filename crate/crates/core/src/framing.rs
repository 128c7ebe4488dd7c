//! Little-endian container shared by checkpoints and window caches.
//!
//! ```text
//! magic[4] | u32 version | u32 count
//! count x ( u16 name_len | name | u8 ndim | ndim x u32 dim | f64 payload )
//! u32 trailer_len | trailer (UTF-8)
//! ```

pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FramingError {
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: Vec<u8>, expected: [u8; 4] },
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("invalid content at byte {offset}: {reason}")]
    Invalid { offset: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode(magic: &[u8; 4], records: &[Record], trailer: &str) -> Vec<u8> {
    let payload: usize = records.iter().map(|r| 7 + r.name.len() + 4 * r.dims.len() + 8 * r.data.len()).sum();
    let mut out = Vec::with_capacity(16 + payload + trailer.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        assert!(r.name.len() <= u16::MAX as usize, "record name too long");
        assert!(r.dims.len() <= u8::MAX as usize, "too many dimensions");
        debug_assert_eq!(r.dims.iter().product::<usize>(), r.data.len());
        out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.dims.len() as u8);
        for &d in &r.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &r.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(&(trailer.len() as u32).to_le_bytes());
    out.extend_from_slice(trailer.as_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FramingError> {
        if self.bytes.len() - self.pos < n {
            return Err(FramingError::Truncated { offset: self.pos, what });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FramingError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn utf8(&mut self, n: usize, what: &'static str) -> Result<String, FramingError> {
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|e| FramingError::Invalid { offset: at, reason: e.to_string() })
    }
}

pub fn decode(bytes: &[u8], magic: &[u8; 4]) -> Result<(Vec<Record>, String), FramingError> {
    let mut c = Cursor { bytes, pos: 0 };
    let found = c.take(4, "magic").map_err(|_| FramingError::BadMagic { found: bytes.to_vec(), expected: *magic })?;
    if found != magic {
        return Err(FramingError::BadMagic { found: found.to_vec(), expected: *magic });
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(FramingError::Version(version));
    }
    let count = c.u32("record count")? as usize;
    let mut records = Vec::new();
    for _ in 0..count {
        let b = c.take(2, "name length")?;
        let name_len = u16::from_le_bytes([b[0], b[1]]) as usize;
        let name = c.utf8(name_len, "record name")?;
        let ndim = c.take(1, "dimension count")?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u32("dimension")? as usize);
        }
        let at = c.pos;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len() - c.pos))
            .ok_or(FramingError::Truncated { offset: at, what: "payload" })?;
        let raw = c.take(8 * n, "payload")?;
        let data = raw.chunks_exact(8).map(|ch| f64::from_le_bytes(ch.try_into().expect("8-byte chunk"))).collect();
        records.push(Record { name, dims, data });
    }
    let trailer_len = c.u32("trailer length")? as usize;
    let trailer = c.utf8(trailer_len, "trailer")?;
    if c.pos != bytes.len() {
        return Err(FramingError::Invalid { offset: c.pos, reason: "trailing bytes after document".into() });
    }
    Ok((records, trailer))
}
