//! Little-endian helpers shared by the model and container file formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

pub struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        self.inner.write_all(m)?;
        self.u32(VERSION)
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.inner.write_all(&[v])?;
        Ok(())
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn usize(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Input(format!("{v} does not fit in u32")))?;
        self.u32(v)
    }

    pub fn f32(&mut self, v: f32) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.inner.write_all(&v.to_le_bytes())?;
        Ok(())
    }

    pub fn f32s(&mut self, vs: &[f32]) -> Result<()> {
        for &v in vs {
            self.f32(v)?;
        }
        Ok(())
    }

    /// Narrows each value to f32.
    pub fn f64s_as_f32(&mut self, vs: &[f64]) -> Result<()> {
        for &v in vs {
            self.f32(v as f32)?;
        }
        Ok(())
    }

    pub fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        for &v in vs {
            self.f64(v)?;
        }
        Ok(())
    }

    pub fn str(&mut self, s: &str) -> Result<()> {
        self.usize(s.len())?;
        self.inner.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct Reader<R: Read> {
    inner: R,
    what: &'static str,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R, what: &'static str) -> Self {
        Self { inner, what }
    }

    pub fn err<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            what: self.what,
            msg: msg.into(),
        })
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format {
                what: self.what,
                msg: "truncated".into(),
            },
            _ => Error::Io(e),
        })
    }

    pub fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        let mut got = [0u8; 4];
        self.fill(&mut got)?;
        if &got != m {
            return self.err(format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(&got)
            ));
        }
        let v = self.u32()?;
        if v != VERSION {
            return self.err(format!("unsupported version {v}"));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b)?;
        Ok(b[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    pub fn f32(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.fill(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.fill(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    /// Reads `n` f32 values. `n` is checked against `limit` first so a
    /// corrupt header cannot trigger a huge allocation.
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        self.check_len(n)?;
        (0..n).map(|_| self.f32()).collect()
    }

    pub fn f32s_as_f64(&mut self, n: usize) -> Result<Vec<f64>> {
        self.check_len(n)?;
        (0..n).map(|_| self.f32().map(f64::from)).collect()
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        self.check_len(n)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        self.check_len(n)?;
        let mut buf = vec![0u8; n];
        self.fill(&mut buf)?;
        String::from_utf8(buf).or_else(|_| self.err("string is not utf-8"))
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n > (1 << 31) {
            return self.err(format!("implausible length {n}"));
        }
        Ok(())
    }

    /// Fails unless the stream is exhausted.
    pub fn end(mut self) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => self.err("trailing bytes"),
        }
    }
}
