//! Tensor dump formats.
//!
//! Text: a header line `TENSOR <rank> <d0> ... <precision>` followed by
//! whitespace-separated decimal values in row-major order.
//!
//! Binary: magic `ATF1`, `u32` rank, `u32` per dimension, then the
//! little-endian IEEE-754 payload (`f32` or `f64`, told apart by length).

use std::fmt::Write as _;
use std::path::Path;

use super::{numel_of, Precision, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ATF1";

impl Tensor {
    pub fn to_text(&self) -> String {
        let mut s = format!("TENSOR {}", self.rank());
        for d in self.shape() {
            write!(s, " {d}").unwrap();
        }
        writeln!(s, " {}", self.precision()).unwrap();
        let row = self.shape().last().copied().unwrap_or(1);
        for chunk in self.data().chunks(row) {
            let mut first = true;
            for v in chunk {
                if !first {
                    s.push(' ');
                }
                first = false;
                match self.precision() {
                    Precision::Single => write!(s, "{}", *v as f32).unwrap(),
                    Precision::Double => write!(s, "{v}").unwrap(),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Tensor> {
        let mut lines = text.splitn(2, '\n');
        let header = lines.next().unwrap_or("");
        let mut tokens = header.split_whitespace();
        if tokens.next() != Some("TENSOR") {
            return Err(Error::Format("missing TENSOR header".into()));
        }
        let rank: usize = parse_token(tokens.next(), "rank")?;
        let shape = (0..rank)
            .map(|_| parse_token::<usize>(tokens.next(), "dimension"))
            .collect::<Result<Vec<_>>>()?;
        let precision = tokens
            .next()
            .and_then(Precision::parse)
            .ok_or_else(|| Error::Format("missing or unknown precision".into()))?;
        if tokens.next().is_some() {
            return Err(Error::Format("trailing tokens in header".into()));
        }
        let data = lines
            .next()
            .unwrap_or("")
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad value {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if data.len() != numel_of(&shape) {
            return Err(Error::Format(format!(
                "shape {shape:?} needs {} values, found {}",
                numel_of(&shape),
                data.len()
            )));
        }
        Tensor::new(&shape, data, precision)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let width = match self.precision() {
            Precision::Single => 4,
            Precision::Double => 8,
        };
        let mut out = Vec::with_capacity(8 + 4 * self.rank() + width * self.numel());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for &d in self.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in self.data() {
            match self.precision() {
                Precision::Single => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::Double => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out
    }

    pub fn from_binary(bytes: &[u8]) -> Result<Tensor> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing ATF1 magic".into()));
        }
        let word = |i: usize| -> Result<usize> {
            bytes
                .get(i..i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .ok_or_else(|| Error::Format("truncated header".into()))
        };
        let rank = word(4)?;
        let shape = (0..rank).map(|i| word(8 + 4 * i)).collect::<Result<Vec<_>>>()?;
        let payload = &bytes[8 + 4 * rank..];
        let n = numel_of(&shape);
        let (precision, data) = if payload.len() == 4 * n {
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            (Precision::Single, data)
        } else if payload.len() == 8 * n {
            let data = payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            (Precision::Double, data)
        } else {
            return Err(Error::Format(format!(
                "payload of {} bytes does not hold {n} f32 or f64 values",
                payload.len()
            )));
        };
        Tensor::new(&shape, data, precision)
    }

    pub fn save_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load_text(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_text(&text)
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_binary()).map_err(|e| Error::io(path, e))
    }

    pub fn load_binary(path: impl AsRef<Path>) -> Result<Tensor> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Tensor::from_binary(&bytes)
    }
}

fn parse_token<T: std::str::FromStr>(token: Option<&str>, what: &str) -> Result<T> {
    token
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad or missing {what}")))
}
