//! `GTCK` checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "GTCK" | version u16 | echo_len u32 | config echo UTF-8
//! step u64 | epoch u64 | cursor u64 | order_len u64 | order u64 * order_len
//! adam_t u64 | param_count u32
//! per parameter:
//!   name_len u16 | name UTF-8 | ndim u8 | dims u32 * ndim
//!   value f64 * n | first moment f64 * n | second moment f64 * n
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GTCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub step: u64,
    pub epoch: u64,
    pub cursor: u64,
    pub order: Vec<u64>,
    pub adam_t: u64,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn param(&self, name: &str) -> Option<&ParamRecord> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.config_echo.len() as u32).to_le_bytes())?;
        w.write_all(self.config_echo.as_bytes())?;
        for v in [self.step, self.epoch, self.cursor, self.order.len() as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        for &i in &self.order {
            w.write_all(&i.to_le_bytes())?;
        }
        w.write_all(&self.adam_t.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name_len = u16::try_from(p.name.len())
                .map_err(|_| Error::Config(format!("parameter name too long: {}", p.name)))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&[p.shape.len() as u8])?;
            for &d in &p.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for buf in [&p.value, &p.first_moment, &p.second_moment] {
                for &x in buf.iter() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = Cursor { inner: r, offset: 0 };
        let magic: [u8; 4] = r.array("magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad checkpoint magic {magic:?}"),
            });
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let echo_len = u32::from_le_bytes(r.array("config length")?) as usize;
        let config_echo = r.utf8(echo_len, "config echo")?;
        let step = r.u64("step")?;
        let epoch = r.u64("epoch")?;
        let cursor = r.u64("cursor")?;
        let order_len = r.u64("order length")?;
        let order = (0..order_len).map(|_| r.u64("order")).collect::<Result<Vec<_>>>()?;
        let adam_t = r.u64("adam step")?;
        let count = u32::from_le_bytes(r.array("parameter count")?);
        let mut params = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.array("name length")?) as usize;
            let name = r.utf8(name_len, "parameter name")?;
            let [ndim] = r.array("ndim")?;
            let shape = (0..ndim)
                .map(|_| Ok(u32::from_le_bytes(r.array("dims")?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut buf = || (0..n).map(|_| r.f64(&name)).collect::<Result<Vec<_>>>();
            let value = buf()?;
            let first_moment = buf()?;
            let second_moment = buf()?;
            params.push(ParamRecord {
                name,
                shape,
                value,
                first_moment,
                second_moment,
            });
        }
        let mut probe = [0u8; 1];
        if r.inner.read(&mut probe)? != 0 {
            return Err(Error::Format {
                offset: r.offset,
                msg: "trailing bytes after checkpoint".into(),
            });
        }
        Ok(Self {
            config_echo,
            step,
            epoch,
            cursor,
            order,
            adam_t,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let mut got = 0;
        while got < buf.len() {
            let n = self.inner.read(&mut buf[got..])?;
            if n == 0 {
                return Err(Error::Format {
                    offset: self.offset + got as u64,
                    msg: format!("truncated checkpoint while reading {what}"),
                });
            }
            got += n;
        }
        self.offset += got as u64;
        Ok(())
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b, what)?;
        Ok(b)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array(what)?))
    }

    fn utf8(&mut self, len: usize, what: &str) -> Result<String> {
        let at = self.offset;
        let mut b = vec![0u8; len];
        self.fill(&mut b, what)?;
        String::from_utf8(b).map_err(|_| Error::Format {
            offset: at,
            msg: format!("{what} is not UTF-8"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            config_echo: "[train]\nseed = 1\n".into(),
            step: 7,
            epoch: 2,
            cursor: 3,
            order: vec![2, 0, 1],
            adam_t: 7,
            params: vec![ParamRecord {
                name: "w".into(),
                shape: vec![2, 1],
                value: vec![1.5, -0.25],
                first_moment: vec![0.1, 0.2],
                second_moment: vec![0.01, 0.04],
            }],
        }
    }

    #[test]
    fn round_trip() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert_eq!(Checkpoint::read_from(&buf[..]).unwrap(), sample());
    }

    #[test]
    fn version_and_truncation_errors() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut wrong = buf.clone();
        wrong[4] = 9;
        assert!(matches!(
            Checkpoint::read_from(&wrong[..]),
            Err(Error::Version { found: 9, expected: 1 })
        ));
        assert!(matches!(
            Checkpoint::read_from(&buf[..buf.len() - 3]),
            Err(Error::Format { .. })
        ));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(Checkpoint::read_from(&extra[..]).is_err());
        assert!(Checkpoint::read_from(&b"NOPE"[..]).is_err());
    }
}
