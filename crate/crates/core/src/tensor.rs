//! Dense tensor containers and shape algebra shared by all other modules.
//!
//! Two tensor kinds travel between layers: real-valued [`PotentialTensor`]s
//! (membrane potentials, logits, reconstructions) and small-integer
//! [`SpikeTensor`]s (binary LIF spikes or IntIF spikes in `{0..Z-1}`).
//! All data is row-major with time as the leading axis, so flattening a
//! `[T, H, W, C]` tensor to `[(T*H*W), C]` tokens is a pure reshape and the
//! token order is t-major, then h, then w.

use crate::error::{EngineError, Result};
use std::io::{Read, Write};

/// Frame-count / height / width / channel shape of a video-shaped tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape4 {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape4 {
    pub fn new(t: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(EngineError::InvalidDim(format!(
                "all dims must be >= 1, got ({t},{h},{w},{c})"
            )));
        }
        Ok(Shape4 { t, h, w, c })
    }

    /// Encoder inputs additionally require h and w divisible by 16.
    pub fn new_encoder_input(t: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        let s = Self::new(t, h, w, c)?;
        if h % 16 != 0 || w % 16 != 0 {
            return Err(EngineError::InvalidDim(format!(
                "encoder input h,w must be divisible by 16, got {h}x{w}"
            )));
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.t * self.h * self.w * self.c
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![self.t, self.h, self.w, self.c]
    }
}

/// Real-valued tensor, row-major. The workhorse container for potentials,
/// weights, logits and reconstructions.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl PotentialTensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        PotentialTensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(EngineError::ShapeMismatch {
                expected: format!("{n} elements for dims {dims:?}"),
                got: format!("{}", data.len()),
            });
        }
        Ok(PotentialTensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(EngineError::NonFinite(i)),
            None => Ok(()),
        }
    }

    pub fn shape4(&self) -> Result<Shape4> {
        if self.dims.len() != 4 {
            return Err(EngineError::ShapeMismatch {
                expected: "rank-4 tensor".into(),
                got: format!("rank-{}", self.dims.len()),
            });
        }
        Shape4::new(self.dims[0], self.dims[1], self.dims[2], self.dims[3])
    }

    /// Reshape without moving data; element count must match.
    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::from_vec(dims, self.data.clone())
    }
}

/// Small-integer activation tensor; the sole inter-layer currency of the
/// spiking path. `levels` is the alphabet size: 2 for binary LIF spikes,
/// Z for IntIF spikes in `{0..Z-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
    pub levels: u8,
}

impl SpikeTensor {
    pub fn zeros(dims: &[usize], levels: u8) -> Self {
        let n = dims.iter().product();
        SpikeTensor {
            dims: dims.to_vec(),
            data: vec![0; n],
            levels,
        }
    }

    /// Rejects any value outside the declared alphabet `{0..levels-1}`.
    pub fn from_vec(dims: &[usize], data: Vec<u8>, levels: u8) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(EngineError::ShapeMismatch {
                expected: format!("{n} elements for dims {dims:?}"),
                got: format!("{}", data.len()),
            });
        }
        if let Some(&v) = data.iter().find(|&&v| v >= levels) {
            return Err(EngineError::SpikeAlphabet {
                value: v as u32,
                max: levels as u32,
            });
        }
        Ok(SpikeTensor {
            dims: dims.to_vec(),
            data,
            levels,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_potential(&self) -> PotentialTensor {
        PotentialTensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// Flatten a rank-4 tensor `[T,H,W,C]` into `[(T*H*W), C]` tokens.
/// Row k corresponds to (t,h,w) in lexicographic t-major order; with the
/// canonical row-major layout this is a pure reshape.
pub fn flatten_spacetime(x: &PotentialTensor) -> Result<PotentialTensor> {
    let s = x.shape4()?;
    x.reshape(&[s.t * s.h * s.w, s.c])
}

/// Inverse of [`flatten_spacetime`].
pub fn unflatten_spacetime(tokens: &PotentialTensor, shape: Shape4) -> Result<PotentialTensor> {
    if tokens.dims.len() != 2
        || tokens.dims[0] != shape.t * shape.h * shape.w
        || tokens.dims[1] != shape.c
    {
        return Err(EngineError::ShapeMismatch {
            expected: format!("[{}, {}]", shape.t * shape.h * shape.w, shape.c),
            got: format!("{:?}", tokens.dims),
        });
    }
    tokens.reshape(&shape.dims())
}

/// Fraction of nonzero entries. Errors on an empty tensor.
pub fn spike_rate(s: &SpikeTensor) -> Result<f64> {
    if s.is_empty() {
        return Err(EngineError::EmptyTensor("spike_rate".into()));
    }
    let nz = s.data.iter().filter(|&&v| v != 0).count();
    Ok(nz as f64 / s.len() as f64)
}

// --- binary dump format ----------------------------------------------------
//
// Little-endian container used by test fixtures, masks, teacher features and
// checkpoints: magic "SPKT", u8 dtype tag (0 = f64, 1 = u8), u8 rank,
// rank x u32 dims, then the row-major payload.

const MAGIC: &[u8; 4] = b"SPKT";

pub fn write_potential<W: Write>(w: &mut W, t: &PotentialTensor) -> Result<()> {
    write_header(w, 0, &t.dims)?;
    for v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_spikes<W: Write>(w: &mut W, t: &SpikeTensor) -> Result<()> {
    write_header(w, 1, &t.dims)?;
    w.write_all(&[t.levels])?;
    w.write_all(&t.data)?;
    Ok(())
}

fn write_header<W: Write>(w: &mut W, dtype: u8, dims: &[usize]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[dtype, dims.len() as u8])?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<(u8, Vec<usize>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(EngineError::Other("bad SPKT magic".into()));
    }
    let mut hdr = [0u8; 2];
    r.read_exact(&mut hdr)?;
    let rank = hdr[1] as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        dims.push(u32::from_le_bytes(b) as usize);
    }
    Ok((hdr[0], dims))
}

pub fn read_potential<R: Read>(r: &mut R) -> Result<PotentialTensor> {
    let (dtype, dims) = read_header(r)?;
    if dtype != 0 {
        return Err(EngineError::Other(format!(
            "expected f64 dump, dtype {dtype}"
        )));
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        data.push(f64::from_le_bytes(b));
    }
    PotentialTensor::from_vec(&dims, data)
}

pub fn read_spikes<R: Read>(r: &mut R) -> Result<SpikeTensor> {
    let (dtype, dims) = read_header(r)?;
    if dtype != 1 {
        return Err(EngineError::Other(format!(
            "expected u8 dump, dtype {dtype}"
        )));
    }
    let mut lv = [0u8; 1];
    r.read_exact(&mut lv)?;
    let n: usize = dims.iter().product();
    let mut data = vec![0u8; n];
    r.read_exact(&mut data)?;
    SpikeTensor::from_vec(&dims, data, lv[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flatten_identity_case() {
        let x = PotentialTensor::from_vec(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let f = flatten_spacetime(&x).unwrap();
        assert_eq!(f.dims, vec![1, 3]);
        assert_eq!(f.data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn flatten_product_arithmetic() {
        let x = PotentialTensor::zeros(&[4, 2, 2, 8]);
        let f = flatten_spacetime(&x).unwrap();
        assert_eq!(f.dims, vec![16, 8]);
    }

    #[test]
    fn flatten_unflatten_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = Shape4::new(3, 5, 4, 6).unwrap();
        let data: Vec<f64> = (0..s.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = PotentialTensor::from_vec(&s.dims(), data).unwrap();
        let back = unflatten_spacetime(&flatten_spacetime(&x).unwrap(), s).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn flatten_token_order_is_t_major() {
        // token index k = ((t*H)+h)*W + w must hold for every site
        let (t, h, w, c) = (2, 3, 2, 2);
        let mut data = vec![0.0; t * h * w * c];
        for ti in 0..t {
            for hi in 0..h {
                for wi in 0..w {
                    for ci in 0..c {
                        let idx = ((ti * h + hi) * w + wi) * c + ci;
                        data[idx] = (ti * 100 + hi * 10 + wi) as f64 + ci as f64 / 10.0;
                    }
                }
            }
        }
        let x = PotentialTensor::from_vec(&[t, h, w, c], data).unwrap();
        let f = flatten_spacetime(&x).unwrap();
        for ti in 0..t {
            for hi in 0..h {
                for wi in 0..w {
                    let k = (ti * h + hi) * w + wi;
                    assert_eq!(f.data[k * c], (ti * 100 + hi * 10 + wi) as f64);
                }
            }
        }
    }

    #[test]
    fn flatten_unflatten_exhaustive_small_shapes() {
        // mutually inverse for every shape with t,h,w,c <= 8 (coarse sweep)
        for &t in &[1usize, 2, 8] {
            for &h in &[1usize, 3, 8] {
                for &w in &[1usize, 2, 8] {
                    for &c in &[1usize, 5, 8] {
                        let s = Shape4::new(t, h, w, c).unwrap();
                        let data: Vec<f64> = (0..s.len()).map(|i| i as f64).collect();
                        let x = PotentialTensor::from_vec(&s.dims(), data).unwrap();
                        let rt = unflatten_spacetime(&flatten_spacetime(&x).unwrap(), s).unwrap();
                        assert_eq!(rt, x);
                    }
                }
            }
        }
    }

    #[test]
    fn spike_rate_examples() {
        let z = SpikeTensor::zeros(&[4, 4], 2);
        assert_eq!(spike_rate(&z).unwrap(), 0.0);
        let ones = SpikeTensor::from_vec(&[4, 4], vec![1; 16], 2).unwrap();
        assert_eq!(spike_rate(&ones).unwrap(), 1.0);
        let mut v = vec![0u8; 16];
        v[1] = 1;
        v[7] = 1;
        v[12] = 1;
        let s = SpikeTensor::from_vec(&[4, 4], v, 2).unwrap();
        assert_eq!(spike_rate(&s).unwrap(), 0.1875);
    }

    #[test]
    fn spike_rate_empty_errors() {
        let s = SpikeTensor::zeros(&[0], 2);
        assert!(spike_rate(&s).is_err());
    }

    #[test]
    fn spike_alphabet_rejected() {
        assert!(SpikeTensor::from_vec(&[2], vec![0, 2], 2).is_err());
        assert!(SpikeTensor::from_vec(&[2], vec![3, 1], 4).is_ok());
        assert!(SpikeTensor::from_vec(&[2], vec![4, 1], 4).is_err());
    }

    #[test]
    fn encoder_input_divisibility() {
        assert!(Shape4::new_encoder_input(4, 64, 64, 3).is_ok());
        assert!(Shape4::new_encoder_input(4, 60, 64, 3).is_err());
        assert!(Shape4::new(0, 1, 1, 1).is_err());
    }

    #[test]
    fn dump_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..24).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let x = PotentialTensor::from_vec(&[2, 3, 4], data).unwrap();
        let mut buf = Vec::new();
        write_potential(&mut buf, &x).unwrap();
        let back = read_potential(&mut buf.as_slice()).unwrap();
        assert_eq!(back, x);

        let s = SpikeTensor::from_vec(&[3, 2], vec![0, 1, 2, 3, 1, 0], 4).unwrap();
        let mut buf = Vec::new();
        write_spikes(&mut buf, &s).unwrap();
        let back = read_spikes(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }
}
