//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"HFRC"
//! version u32
//! M N K d L            u64 each
//! activation id        u8
//! flags                u8   bit 0: per-layer W_beh, bit 1: optimizer state present
//! count                u32
//! count × array:
//!     name_len u16, name (UTF-8), ndim u8, dims u64 × ndim, data f32 × Π dims
//! [optimizer state, when flagged]
//!     step u64, then two arrays per parameter tensor named "m/<name>" and "v/<name>"
//! ```
//!
//! Parameter array names are exactly `P Q W_view W_add W_purchase W_beh theta W_fus W_int W_pre`.

use std::io::{Read, Write};

use super::{ModelShape, ParameterSet, TENSOR_NAMES};
use crate::behavior::NUM_BEHAVIORS;
use crate::config::Activation;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HFRC";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_PER_LAYER: u8 = 1;
const FLAG_OPTIMIZER: u8 = 2;

/// Parameters plus, optionally, the Adam moments needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParameterSet<T>,
    pub activation: Activation,
    /// `(step, first moments, second moments)`
    pub optimizer: Option<(u64, ParameterSet<T>, ParameterSet<T>)>,
}

struct NamedArray {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn to_f32<T: Scalar>(s: &[T]) -> Vec<f32> {
    s.iter().map(|x| x.to_f64_lossy() as f32).collect()
}

fn arrays_of<T: Scalar>(p: &ParameterSet<T>, prefix: &str) -> Vec<NamedArray> {
    let s = p.shape;
    let d = s.dim;
    let mut out = vec![
        NamedArray { name: "P".into(), dims: vec![s.users, d], data: to_f32(p.user.as_slice()) },
        NamedArray { name: "Q".into(), dims: vec![s.items, d], data: to_f32(p.item.as_slice()) },
    ];
    for (k, name) in ["W_view", "W_add", "W_purchase"].into_iter().enumerate() {
        out.push(NamedArray { name: name.into(), dims: vec![d], data: to_f32(p.edge.row(k)) });
    }
    let mut wbeh_dims = vec![NUM_BEHAVIORS, d, d];
    if s.per_layer_wbeh {
        wbeh_dims.insert(0, s.wbeh_slots());
    }
    let wbeh: Vec<f32> = p.w_beh.iter().flat_map(|m| to_f32(m.as_slice())).collect();
    out.push(NamedArray { name: "W_beh".into(), dims: wbeh_dims, data: wbeh });
    out.push(NamedArray { name: "theta".into(), dims: vec![p.theta.len()], data: to_f32(&p.theta) });
    out.push(NamedArray { name: "W_fus".into(), dims: vec![d, d], data: to_f32(p.w_fus.as_slice()) });
    out.push(NamedArray { name: "W_int".into(), dims: vec![d], data: to_f32(&p.w_int) });
    out.push(NamedArray { name: "W_pre".into(), dims: vec![NUM_BEHAVIORS, d], data: to_f32(p.w_pre.as_slice()) });
    for a in &mut out {
        a.name = format!("{prefix}{}", a.name);
    }
    out
}

fn io_err(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

fn write_array<W: Write>(w: &mut W, a: &NamedArray) -> std::io::Result<()> {
    w.write_all(&(a.name.len() as u16).to_le_bytes())?;
    w.write_all(a.name.as_bytes())?;
    w.write_all(&[a.dims.len() as u8])?;
    for &dim in &a.dims {
        w.write_all(&(dim as u64).to_le_bytes())?;
    }
    for x in &a.data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<T: Scalar, W: Write>(mut w: W, ckpt: &Checkpoint<T>) -> Result<()> {
    let s = ckpt.params.shape;
    let mut header = Vec::with_capacity(64);
    header.extend_from_slice(&CHECKPOINT_MAGIC);
    header.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [s.users, s.items, NUM_BEHAVIORS, s.dim, s.layers] {
        header.extend_from_slice(&(v as u64).to_le_bytes());
    }
    header.push(ckpt.activation.id());
    let mut flags = 0;
    if s.per_layer_wbeh {
        flags |= FLAG_PER_LAYER;
    }
    if ckpt.optimizer.is_some() {
        flags |= FLAG_OPTIMIZER;
    }
    header.push(flags);
    w.write_all(&header).map_err(io_err)?;

    let params = arrays_of(&ckpt.params, "");
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io_err)?;
    for a in &params {
        write_array(&mut w, a).map_err(io_err)?;
    }
    if let Some((step, m, v)) = &ckpt.optimizer {
        w.write_all(&step.to_le_bytes()).map_err(io_err)?;
        for a in arrays_of(m, "m/").iter().chain(arrays_of(v, "v/").iter()) {
            write_array(&mut w, a).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(buf)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r)?))
}

fn read_array<R: Read>(r: &mut R) -> Result<NamedArray> {
    let len = u16::from_le_bytes(read_exact(r)?) as usize;
    let mut name = vec![0u8; len];
    r.read_exact(&mut name).map_err(io_err)?;
    let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
    let ndim = read_exact::<R, 1>(r)?[0] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u64(r)? as usize);
    }
    let count: usize = dims.iter().product();
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(io_err)?;
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(NamedArray { name, dims, data })
}

fn fill<T: Scalar>(shape: ModelShape, arrays: &[NamedArray], prefix: &str) -> Result<ParameterSet<T>> {
    let mut p = ParameterSet::<T>::zeros(shape);
    let expected = arrays_of(&p, prefix);
    if arrays.len() != expected.len() {
        return Err(Error::Checkpoint(format!("expected {} arrays, found {}", expected.len(), arrays.len())));
    }
    for (got, want) in arrays.iter().zip(&expected) {
        if got.name != want.name || got.dims != want.dims {
            return Err(Error::Checkpoint(format!(
                "array {:?} {:?} where {:?} {:?} was expected",
                got.name, got.dims, want.name, want.dims
            )));
        }
    }
    let cast = |src: &[f32], dst: &mut [T]| {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = T::of(s as f64);
        }
    };
    let by = |name: &str| &arrays.iter().find(|a| a.name == format!("{prefix}{name}")).expect("validated").data;
    cast(by("P"), p.user.as_mut_slice());
    cast(by("Q"), p.item.as_mut_slice());
    for (k, name) in ["W_view", "W_add", "W_purchase"].into_iter().enumerate() {
        cast(by(name), p.edge.row_mut(k));
    }
    let d2 = shape.dim * shape.dim;
    for (m, chunk) in p.w_beh.iter_mut().zip(by("W_beh").chunks(d2.max(1))) {
        cast(chunk, m.as_mut_slice());
    }
    cast(by("theta"), &mut p.theta);
    cast(by("W_fus"), p.w_fus.as_mut_slice());
    cast(by("W_int"), &mut p.w_int);
    cast(by("W_pre"), p.w_pre.as_mut_slice());
    Ok(p)
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Checkpoint<T>> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = read_u64(&mut r)? as usize;
    }
    let [users, items, k, dim, layers] = dims;
    if k != NUM_BEHAVIORS {
        return Err(Error::Checkpoint(format!("checkpoint has {k} behaviors")));
    }
    let [act, flags] = read_exact::<_, 2>(&mut r)?;
    let activation = Activation::from_id(act).ok_or_else(|| Error::Checkpoint(format!("unknown activation id {act}")))?;
    let shape = ModelShape { users, items, dim, layers, per_layer_wbeh: flags & FLAG_PER_LAYER != 0 };

    let count = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    if count != TENSOR_NAMES.len() {
        return Err(Error::Checkpoint(format!("expected {} arrays, found {count}", TENSOR_NAMES.len())));
    }
    let arrays = (0..count).map(|_| read_array(&mut r)).collect::<Result<Vec<_>>>()?;
    let params = fill(shape, &arrays, "")?;

    let optimizer = if flags & FLAG_OPTIMIZER != 0 {
        let step = read_u64(&mut r)?;
        let moments = (0..2 * count).map(|_| read_array(&mut r)).collect::<Result<Vec<_>>>()?;
        let m = fill(shape, &moments[..count], "m/")?;
        let v = fill(shape, &moments[count..], "v/")?;
        Some((step, m, v))
    } else {
        None
    };
    Ok(Checkpoint { params, activation, optimizer })
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, self).expect("writing to memory cannot fail");
        buf
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_checkpoint(std::io::BufWriter::new(f), self)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        read_checkpoint(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use proptest::prelude::*;

    fn sample(per_layer: bool, seed: u64) -> ParameterSet<f32> {
        init_params(ModelShape { users: 3, items: 4, dim: 5, layers: 2, per_layer_wbeh: per_layer }, seed).unwrap()
    }

    #[test]
    fn header_is_bit_exact() {
        let ck = Checkpoint { params: sample(false, 0), activation: Activation::LeakyRelu, optimizer: None };
        let b = ck.to_bytes();
        assert_eq!(&b[..4], b"HFRC");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        let dims: Vec<u64> = (0..5).map(|i| u64::from_le_bytes(b[8 + 8 * i..16 + 8 * i].try_into().unwrap())).collect();
        assert_eq!(dims, vec![3, 4, 3, 5, 2]);
        assert_eq!(b[48], 2);
        assert_eq!(b[49], 0);
        assert_eq!(u32::from_le_bytes(b[50..54].try_into().unwrap()), 10);
        // first array: "P", 2 dims (3, 5), then P[0][0] as f32
        assert_eq!(u16::from_le_bytes(b[54..56].try_into().unwrap()), 1);
        assert_eq!(b[56], b'P');
        assert_eq!(b[57], 2);
        let first = f32::from_le_bytes(b[74..78].try_into().unwrap());
        assert_eq!(first, ck.params.user[(0, 0)]);
        // per array: 2 + name + 1 + 8 * ndim + 4 * count
        let arrays = [("P", 2, 15), ("Q", 2, 20), ("W_view", 1, 5), ("W_add", 1, 5), ("W_purchase", 1, 5),
            ("W_beh", 3, 75), ("theta", 1, 3), ("W_fus", 2, 25), ("W_int", 1, 5), ("W_pre", 2, 15)];
        let body: usize = arrays.iter().map(|(n, nd, c)| 3 + n.len() + 8 * nd + 4 * c).sum();
        assert_eq!(b.len(), 54 + body);
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let ck = Checkpoint { params: sample(false, 0), activation: Activation::Tanh, optimizer: None };
        let mut b = ck.to_bytes();
        b[0] = b'X';
        assert!(read_checkpoint::<f32, _>(b.as_slice()).is_err());
        let mut b = ck.to_bytes();
        b[4] = 9;
        assert!(read_checkpoint::<f32, _>(b.as_slice()).is_err());
        let b = ck.to_bytes();
        assert!(read_checkpoint::<f32, _>(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_exact_for_f32(seed in 0u64..1000, per_layer in any::<bool>(), with_opt in any::<bool>()) {
            let params = sample(per_layer, seed);
            let optimizer = with_opt.then(|| (seed + 1, sample(per_layer, seed + 1), sample(per_layer, seed + 2)));
            let ck = Checkpoint { params, activation: Activation::Relu, optimizer };
            let back: Checkpoint<f32> = read_checkpoint(ck.to_bytes().as_slice()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}
