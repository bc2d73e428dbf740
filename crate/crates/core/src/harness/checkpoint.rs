//! Bit-exact binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LRCK"            magic, 4 bytes
//! 0x01              version
//! u8                activation (0 identity, 1 relu, 2 tanh)
//! u8                loss (0 softmax cross-entropy, 1 gaussian squared error)
//! u64               layer count
//! per layer:
//!   u8              kind (0 dense, 1 factorized)
//!   u64 ...         dense: n_out, n_in; factorized: n_out, rank, n_in
//!   u8              flags (bit 0 U frozen, bit 1 Vᵀ frozen, bit 2 bottleneck)
//!   f64 ...         dense: W, bias; factorized: U, S, Vᵀ, bias (row-major)
//! u32               CRC-32 (IEEE) of every byte after the version byte
//! ```
//!
//! A 2×2 dense layer `[1, 2; 3, 4]` with zero bias, identity activation and
//! a softmax head is 85 bytes:
//!
//! ```text
//! 4c 52 43 4b 01 00 00 01 00 00 00 00 00 00 00 00 02 00 00 00 00 00 00 00
//! 02 00 00 00 00 00 00 00 00 00 00 00 00 00 00 f0 3f 00 00 00 00 00 00 00
//! 40 00 00 00 00 00 00 08 40 00 00 00 00 00 00 10 40 00 00 00 00 00 00 00
//! 00 00 00 00 00 00 00 00 00 9e b2 06 77
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{Activation, DenseLayer, FactorizedLayer, Layer, LossFamily, Network};

pub const MAGIC: &[u8; 4] = b"LRCK";
pub const VERSION: u8 = 0x01;

const FLAG_U_FROZEN: u8 = 1;
const FLAG_VT_FROZEN: u8 = 2;
const FLAG_BOTTLENECK: u8 = 4;

fn corrupt(field: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        field: field.into(),
    }
}

pub fn encode_checkpoint(net: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(match net.activation {
        Activation::Identity => 0,
        Activation::Relu => 1,
        Activation::Tanh => 2,
    });
    out.push(match net.loss {
        LossFamily::SoftmaxCrossEntropy => 0,
        LossFamily::GaussianSquaredError => 1,
    });
    out.extend_from_slice(&(net.layers.len() as u64).to_le_bytes());
    let floats = |out: &mut Vec<u8>, xs: &[f64]| {
        xs.iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes()))
    };
    for layer in &net.layers {
        match layer {
            Layer::Dense(d) => {
                out.push(0);
                for n in [d.weight.rows(), d.weight.cols()] {
                    out.extend_from_slice(&(n as u64).to_le_bytes());
                }
                out.push(if d.bottleneck { FLAG_BOTTLENECK } else { 0 });
                floats(&mut out, d.weight.as_slice());
                floats(&mut out, &d.bias);
            }
            Layer::Factorized(f) => {
                out.push(1);
                for n in [f.u.rows(), f.rank(), f.vt.cols()] {
                    out.extend_from_slice(&(n as u64).to_le_bytes());
                }
                let flags = (if f.u_frozen { FLAG_U_FROZEN } else { 0 })
                    | (if f.vt_frozen { FLAG_VT_FROZEN } else { 0 });
                out.push(flags);
                floats(&mut out, f.u.as_slice());
                floats(&mut out, f.s.as_slice());
                floats(&mut out, f.vt.as_slice());
                floats(&mut out, &f.bias);
            }
        }
    }
    let crc = crc32fast::hash(&out[MAGIC.len() + 1..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| corrupt(field))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u64(&mut self, field: &str) -> Result<usize> {
        let b = self.take(8, field)?;
        let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| corrupt(field))
    }

    fn matrix(&mut self, rows: usize, cols: usize, field: &str) -> Result<Matrix> {
        let n = rows.checked_mul(cols).ok_or_else(|| corrupt(field))?;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| corrupt(field))?, field)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data).map_err(|_| corrupt(field))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Network> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("magic"));
    }
    if bytes.get(MAGIC.len()) != Some(&VERSION) {
        return Err(corrupt("version"));
    }
    if bytes.len() < MAGIC.len() + 1 + 4 {
        return Err(corrupt("crc"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(&body[MAGIC.len() + 1..]) != stored {
        return Err(corrupt("crc"));
    }
    let mut r = Reader {
        bytes: body,
        pos: MAGIC.len() + 1,
    };
    let activation = match r.u8("activation")? {
        0 => Activation::Identity,
        1 => Activation::Relu,
        2 => Activation::Tanh,
        _ => return Err(corrupt("activation")),
    };
    let loss = match r.u8("loss")? {
        0 => LossFamily::SoftmaxCrossEntropy,
        1 => LossFamily::GaussianSquaredError,
        _ => return Err(corrupt("loss")),
    };
    let count = r.u64("layer count")?;
    let mut layers = Vec::new();
    for i in 0..count {
        let field = |what: &str| format!("layer {i} {what}");
        let layer = match r.u8(&field("kind"))? {
            0 => {
                let (rows, cols) = (r.u64(&field("shape"))?, r.u64(&field("shape"))?);
                let flags = r.u8(&field("flags"))?;
                if flags & !FLAG_BOTTLENECK != 0 {
                    return Err(corrupt(field("flags")));
                }
                let weight = r.matrix(rows, cols, &field("weight"))?;
                let bias = r.matrix(1, rows, &field("bias"))?.into_vec();
                Layer::Dense(DenseLayer {
                    weight,
                    bias,
                    bottleneck: flags & FLAG_BOTTLENECK != 0,
                })
            }
            1 => {
                let (rows, rank, cols) = (
                    r.u64(&field("shape"))?,
                    r.u64(&field("shape"))?,
                    r.u64(&field("shape"))?,
                );
                let flags = r.u8(&field("flags"))?;
                if flags & !(FLAG_U_FROZEN | FLAG_VT_FROZEN) != 0 {
                    return Err(corrupt(field("flags")));
                }
                Layer::Factorized(FactorizedLayer {
                    u: r.matrix(rows, rank, &field("u"))?,
                    s: r.matrix(rank, rank, &field("s"))?,
                    vt: r.matrix(rank, cols, &field("vt"))?,
                    bias: r.matrix(1, rows, &field("bias"))?.into_vec(),
                    u_frozen: flags & FLAG_U_FROZEN != 0,
                    vt_frozen: flags & FLAG_VT_FROZEN != 0,
                })
            }
            _ => return Err(corrupt(field("kind"))),
        };
        layers.push(layer);
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    Network::new(layers, activation, loss).map_err(|e| corrupt(format!("structure ({e})")))
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    decode_checkpoint(&std::fs::read(path)?)
}
