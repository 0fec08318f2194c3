//! Little-endian binary helpers shared by checkpoint and dataset files.

use ndarray::{Array1, Array2};

use super::{Activation, DenseNet, Linear};
use crate::{Error, Result};

#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s<'a>(&mut self, values: impl IntoIterator<Item = &'a f64>) {
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Cursor over a byte slice; running off the end yields
/// [`Error::Truncated`] carrying the slice length.
#[derive(Debug)]
pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                offset: self.data.len() as u64,
            });
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.bytes(
            n.checked_mul(8)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let v = self.f64s(rows * cols)?;
        Ok(Array2::from_shape_vec((rows, cols), v).expect("length checked"))
    }
}

/// Layer widths, activation, then per layer the row-major weight followed by
/// the bias.
pub fn write_net(w: &mut ByteWriter, net: &DenseNet) {
    let dims = net.dims();
    w.u32(dims.len() as u32);
    for d in &dims {
        w.u32(*d as u32);
    }
    w.u8(net.activation().code());
    for layer in net.layers() {
        w.f64s(layer.weight.iter());
        w.f64s(layer.bias.iter());
    }
}

pub fn read_net(r: &mut ByteReader<'_>) -> Result<DenseNet> {
    let n = r.u32()? as usize;
    if !(2..=64).contains(&n) {
        return Err(Error::Format(format!("implausible layer count {n}")));
    }
    let dims = (0..n)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let code = r.u8()?;
    let activation = Activation::from_code(code)
        .ok_or_else(|| Error::Format(format!("unknown activation {code}")))?;
    let mut layers = Vec::with_capacity(n - 1);
    for pair in dims.windows(2) {
        let weight = r.matrix(pair[1], pair[0])?;
        let bias = Array1::from(r.f64s(pair[1])?);
        layers.push(Linear { weight, bias });
    }
    let net = DenseNet::from_layers(layers, activation)?;
    if !net.is_finite() {
        return Err(Error::Format("non-finite parameter".into()));
    }
    Ok(net)
}
