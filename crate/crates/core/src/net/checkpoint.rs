//! Binary weight files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HDRW" | u32 version | u8 variant | u32 k | u32 patch
//! u32 base_channels | u32 max_channels | u32 kernel | u32 residual_blocks
//! u32 residual_kernel | f64 init_std
//! u32 entry count, then per entry:
//!     u16 name length | name | u8 trainable | u8 ndim | u32 dims[ndim]
//!     u32 value count | f32 values
//! u8 has optimizer state; if 1:
//!     u64 step | u32 moment count | per trainable entry: u32 n | f32 m[n] | f32 v[n]
//! ```
//!
//! Running batch-norm statistics are stored as non-trainable entries.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::net::network::Model;
use crate::net::spec::{NetOptions, NetworkSpec, Variant};
use crate::net::Network;

const MAGIC: &[u8; 4] = b"HDRW";
const VERSION: u32 = 1;

/// Adam moments and step counter, aligned with the trainable parameters in
/// visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Vec<f32>>,
    pub second_moment: Vec<Vec<f32>>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub optimizer: Option<OptimizerState>,
}

/// Counts bytes consumed so format errors can name an offset.
struct Counting<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Read for Counting<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.pos += n as u64;
        Ok(n)
    }
}

fn format_err(offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        offset,
        reason: reason.into(),
    }
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    network: &mut Network<f32>,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let spec = network.spec().clone();
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u8(spec.variant.tag())?;
    w.write_u32::<LE>(spec.k_inputs as u32)?;
    w.write_u32::<LE>(spec.patch as u32)?;
    let o = spec.options;
    for v in [
        o.base_channels,
        o.max_channels,
        o.kernel,
        o.residual_blocks,
        o.residual_kernel,
    ] {
        w.write_u32::<LE>(v as u32)?;
    }
    w.write_f64::<LE>(o.init_std)?;

    let mut entries = Vec::new();
    network.visit_params(&mut |name, p| {
        entries.push((
            name.to_string(),
            p.trainable,
            p.shape.clone(),
            p.value.clone(),
        ));
    });
    w.write_u32::<LE>(entries.len() as u32)?;
    for (name, trainable, shape, values) in &entries {
        w.write_u16::<LE>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(*trainable as u8)?;
        w.write_u8(shape.len() as u8)?;
        for &d in shape {
            w.write_u32::<LE>(d as u32)?;
        }
        w.write_u32::<LE>(values.len() as u32)?;
        for &v in values {
            w.write_f32::<LE>(v)?;
        }
    }
    match optimizer {
        None => w.write_u8(0)?,
        Some(state) => {
            w.write_u8(1)?;
            w.write_u64::<LE>(state.step)?;
            w.write_u32::<LE>(state.first_moment.len() as u32)?;
            for (m, v) in state.first_moment.iter().zip(&state.second_moment) {
                w.write_u32::<LE>(m.len() as u32)?;
                for &x in m {
                    w.write_f32::<LE>(x)?;
                }
                for &x in v {
                    w.write_f32::<LE>(x)?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut r = Counting { inner: r, pos: 0 };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = r.read_u32::<LE>()?;
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let tag = r.read_u8()?;
    let variant = Variant::from_tag(tag)
        .ok_or_else(|| format_err(8, format!("unknown variant tag {tag}")))?;
    let k = r.read_u32::<LE>()? as usize;
    let patch = r.read_u32::<LE>()? as usize;
    let mut u = [0usize; 5];
    for v in &mut u {
        *v = r.read_u32::<LE>()? as usize;
    }
    let options = NetOptions {
        base_channels: u[0],
        max_channels: u[1],
        kernel: u[2],
        residual_blocks: u[3],
        residual_kernel: u[4],
        init_std: r.read_f64::<LE>()?,
    };
    let spec = NetworkSpec::build(variant, k, patch, options)
        .map_err(|e| format_err(r.pos, e.to_string()))?;
    let mut network = Network::<f32>::new(spec, 0);

    let count = r.read_u32::<LE>()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let len = r.read_u16::<LE>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| format_err(at, "parameter name is not UTF-8"))?;
        let _trainable = r.read_u8()?;
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LE>()? as usize);
        }
        let n = r.read_u32::<LE>()? as usize;
        if n != shape.iter().product::<usize>() {
            return Err(format_err(
                at,
                format!("{name}: {n} values for shape {shape:?}"),
            ));
        }
        let mut values = vec![0f32; n];
        r.read_f32_into::<LE>(&mut values)?;
        entries.push((at, name, shape, values));
    }

    let mut it = entries.into_iter();
    let mut mismatch: Option<Error> = None;
    let mut trainable_lens = Vec::new();
    network.visit_params(&mut |name, p| {
        if mismatch.is_some() {
            return;
        }
        match it.next() {
            Some((_, n, shape, values)) if n == name && shape == p.shape => {
                p.value = values;
                if p.trainable {
                    trainable_lens.push(p.len());
                }
            }
            Some((at, n, shape, _)) => {
                mismatch = Some(format_err(
                    at,
                    format!("expected {name} {:?}, found {n} {shape:?}", p.shape),
                ))
            }
            None => mismatch = Some(format_err(0, format!("missing parameter {name}"))),
        }
    });
    if let Some(e) = mismatch {
        return Err(e);
    }
    if it.next().is_some() {
        return Err(format_err(r.pos, "more parameters than the network has"));
    }

    let optimizer = match r.read_u8()? {
        0 => None,
        1 => {
            let step = r.read_u64::<LE>()?;
            let at = r.pos;
            let n = r.read_u32::<LE>()? as usize;
            // a fresh optimizer has not allocated its moments yet
            if n != trainable_lens.len() && !(n == 0 && step == 0) {
                return Err(format_err(
                    at,
                    format!("{n} moment entries for {} parameters", trainable_lens.len()),
                ));
            }
            let mut first_moment = Vec::with_capacity(n);
            let mut second_moment = Vec::with_capacity(n);
            for &expected in &trainable_lens[..n] {
                let at = r.pos;
                let len = r.read_u32::<LE>()? as usize;
                if len != expected {
                    return Err(format_err(
                        at,
                        format!("moment length {len}, expected {expected}"),
                    ));
                }
                let mut m = vec![0f32; len];
                let mut v = vec![0f32; len];
                r.read_f32_into::<LE>(&mut m)?;
                r.read_f32_into::<LE>(&mut v)?;
                first_moment.push(m);
                second_moment.push(v);
            }
            Some(OptimizerState {
                step,
                first_moment,
                second_moment,
            })
        }
        other => return Err(format_err(r.pos - 1, format!("bad optimizer flag {other}"))),
    };
    Ok(Checkpoint { network, optimizer })
}

pub fn save_checkpoint(
    path: &Path,
    network: &mut Network<f32>,
    optimizer: Option<&OptimizerState>,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let w = BufWriter::new(File::create(&tmp)?);
        write_checkpoint(w, network, optimizer)?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let r = BufReader::new(File::open(path)?);
    read_checkpoint(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Mode, Tensor};

    fn small() -> Network<f32> {
        let opts = NetOptions {
            base_channels: 2,
            max_channels: 4,
            residual_blocks: 1,
            ..NetOptions::default()
        };
        Network::new(NetworkSpec::build(Variant::Resnet, 2, 8, opts).unwrap(), 11)
    }

    #[test]
    fn round_trip_preserves_parameters_and_state() {
        let mut net = small();
        let x = Tensor::from_vec(
            vec![1, 2, 8, 8, 6],
            (0..768).map(|i| (i % 17) as f32 / 17.0).collect(),
        )
        .unwrap();
        net.forward(&x, Mode::Train).unwrap();
        let mut lens = Vec::new();
        net.visit_params(&mut |_, p| {
            if p.trainable {
                lens.push(p.len())
            }
        });
        let state = OptimizerState {
            step: 42,
            first_moment: lens.iter().map(|&n| vec![0.5; n]).collect(),
            second_moment: lens.iter().map(|&n| vec![0.25; n]).collect(),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &mut net, Some(&state)).unwrap();
        let mut back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.optimizer.as_ref(), Some(&state));
        let mut a = Vec::new();
        let mut b = Vec::new();
        net.visit_params(&mut |n, p| a.push((n.to_string(), p.value.clone())));
        back.network
            .visit_params(&mut |n, p| b.push((n.to_string(), p.value.clone())));
        assert_eq!(a, b);
        assert_eq!(net.predict(&x).unwrap(), back.network.predict(&x).unwrap());
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let mut net = small();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &mut net, None).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(
            read_checkpoint(bad.as_slice()),
            Err(Error::Format { offset: 0, .. })
        ));
        let truncated = &buf[..buf.len() / 2];
        assert!(read_checkpoint(truncated).is_err());
    }
}
