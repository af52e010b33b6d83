//! Layer-wise tube mask hierarchy.
//!
//! A single 2D keep/drop map on the H/16 x W/16 grid is block-expanded to
//! every encoder resolution and repeated over all frames, so masked regions
//! form space-time tubes and re-zeroing at every layer stops convolution and
//! attention halos from leaking content out of masked areas. Semantics:
//! 1 = keep, 0 = masked.

use crate::error::{EngineError, Result};
use crate::tensor::SpikeTensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The mask hierarchy M_0..M_4; level l is shaped [T, H/2^l, W/2^l].
#[derive(Debug, Clone)]
pub struct TubeMaskSet {
    pub base: SpikeTensor,
    pub levels: Vec<SpikeTensor>,
    pub alpha: f64,
    pub seed: u64,
}

/// Exactly round(alpha * h16 * w16) cells are dropped, chosen by a seeded
/// uniform shuffle; degenerate ratios (nothing masked or nothing kept) are
/// rejected.
pub fn sample_base_mask(h16: usize, w16: usize, alpha: f64, seed: u64) -> Result<SpikeTensor> {
    if h16 == 0 || w16 == 0 {
        return Err(EngineError::DegenerateMask("empty grid".into()));
    }
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(EngineError::DegenerateMask(format!(
            "alpha {alpha} outside (0,1)"
        )));
    }
    let cells = h16 * w16;
    let drop = (alpha * cells as f64).round() as usize;
    if drop == 0 || drop == cells {
        return Err(EngineError::DegenerateMask(format!(
            "alpha {alpha} masks {drop} of {cells} cells"
        )));
    }
    let mut idx: Vec<usize> = (0..cells).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let mut data = vec![1u8; cells];
    for &i in &idx[..drop] {
        data[i] = 0;
    }
    SpikeTensor::from_vec(&[h16, w16], data, 2)
}

/// Expand the base map to level `l`: each base cell becomes a
/// 2^(4-l) x 2^(4-l) block, replicated across all T frames.
pub fn expand_mask(base: &SpikeTensor, l: usize, t: usize) -> SpikeTensor {
    assert!(l <= 4, "levels are 0..=4");
    let (h16, w16) = (base.dims[0], base.dims[1]);
    let block = 1usize << (4 - l);
    let (h, w) = (h16 * block, w16 * block);
    let mut frame = vec![0u8; h * w];
    for hi in 0..h {
        for wi in 0..w {
            frame[hi * w + wi] = base.data[(hi / block) * w16 + wi / block];
        }
    }
    let mut data = Vec::with_capacity(t * h * w);
    for _ in 0..t {
        data.extend_from_slice(&frame);
    }
    SpikeTensor {
        dims: vec![t, h, w],
        data,
        levels: 2,
    }
}

impl TubeMaskSet {
    pub fn sample(h16: usize, w16: usize, t: usize, alpha: f64, seed: u64) -> Result<Self> {
        let base = sample_base_mask(h16, w16, alpha, seed)?;
        let levels = (0..=4).map(|l| expand_mask(&base, l, t)).collect();
        Ok(TubeMaskSet {
            base,
            levels,
            alpha,
            seed,
        })
    }

    /// Mask set that keeps everything (used to check the all-ones identity).
    pub fn all_keep(h16: usize, w16: usize, t: usize) -> Self {
        let base = SpikeTensor::from_vec(&[h16, w16], vec![1; h16 * w16], 2).unwrap();
        let levels = (0..=4).map(|l| expand_mask(&base, l, t)).collect();
        TubeMaskSet {
            base,
            levels,
            alpha: 0.0,
            seed: 0,
        }
    }

    /// The level whose spatial size matches (h, w), if any.
    pub fn level_for(&self, h: usize, w: usize) -> Option<&SpikeTensor> {
        self.levels
            .iter()
            .find(|m| m.dims[1] == h && m.dims[2] == w)
    }

    pub fn masked_cells(&self) -> usize {
        self.base.data.iter().filter(|&&v| v == 0).count()
    }
}

/// Elementwise product of a [T,H,W,C] tensor with a [T,H,W] mask, broadcast
/// over channels; applied before each temporal spiking so masked sites never
/// charge.
pub fn apply_mask(
    x: &crate::tensor::PotentialTensor,
    m: &SpikeTensor,
) -> Result<crate::tensor::PotentialTensor> {
    let sites: usize = m.dims.iter().product();
    if x.len() % sites != 0 || x.dims[..3] != m.dims[..] {
        return Err(EngineError::ShapeMismatch {
            expected: format!("{:?} x C", m.dims),
            got: format!("{:?}", x.dims),
        });
    }
    let c = x.len() / sites;
    let mut data = x.data.clone();
    for (s, chunk) in data.chunks_mut(c).enumerate() {
        if m.data[s] == 0 {
            chunk.iter_mut().for_each(|v| *v = 0.0);
        }
    }
    Ok(crate::tensor::PotentialTensor {
        dims: x.dims.clone(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::PotentialTensor;

    #[test]
    fn exact_drop_count() {
        let m = sample_base_mask(4, 4, 0.5, 1).unwrap();
        assert_eq!(m.data.iter().filter(|&&v| v == 0).count(), 8);
        for (h16, w16, alpha) in [(8, 10, 0.3), (4, 4, 0.7), (16, 16, 0.5)] {
            let m = sample_base_mask(h16, w16, alpha, 9).unwrap();
            let drop = (alpha * (h16 * w16) as f64).round() as usize;
            assert_eq!(m.data.iter().filter(|&&v| v == 0).count(), drop);
        }
    }

    #[test]
    fn degenerate_alpha_rejected() {
        // round(alpha * cells) == 0
        assert!(sample_base_mask(2, 2, 0.1, 0).is_err());
        // round(alpha * cells) == cells
        assert!(sample_base_mask(2, 2, 0.9, 0).is_err());
        assert!(sample_base_mask(4, 4, 1.5, 0).is_err());
    }

    #[test]
    fn same_seed_identical_maps() {
        let a = sample_base_mask(6, 6, 0.5, 42).unwrap();
        let b = sample_base_mask(6, 6, 0.5, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_base_mask(6, 6, 0.5, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn level4_equals_base_repeated() {
        let base = sample_base_mask(3, 5, 0.4, 7).unwrap();
        let m4 = expand_mask(&base, 4, 3);
        assert_eq!(m4.dims, vec![3, 3, 5]);
        for t in 0..3 {
            assert_eq!(&m4.data[t * 15..(t + 1) * 15], &base.data[..]);
        }
    }

    #[test]
    fn level0_block_arithmetic() {
        let base = sample_base_mask(2, 2, 0.5, 3).unwrap();
        let m0 = expand_mask(&base, 0, 1);
        assert_eq!(m0.dims, vec![1, 32, 32]);
        for hi in 0..32 {
            for wi in 0..32 {
                assert_eq!(m0.data[hi * 32 + wi], base.data[(hi / 16) * 2 + wi / 16]);
            }
        }
    }

    #[test]
    fn tube_property_identical_frames() {
        let set = TubeMaskSet::sample(4, 4, 4, 0.5, 11).unwrap();
        for m in &set.levels {
            let per = m.dims[1] * m.dims[2];
            for t in 1..m.dims[0] {
                assert_eq!(&m.data[t * per..(t + 1) * per], &m.data[..per]);
            }
        }
    }

    #[test]
    fn levels_align_under_block_min() {
        // downsampling M_l by 2 (block-min) equals M_{l+1}
        let set = TubeMaskSet::sample(4, 6, 2, 0.5, 13).unwrap();
        for l in 0..4 {
            let fine = &set.levels[l];
            let coarse = &set.levels[l + 1];
            let (t, h, w) = (fine.dims[0], fine.dims[1], fine.dims[2]);
            for ti in 0..t {
                for hi in (0..h).step_by(2) {
                    for wi in (0..w).step_by(2) {
                        let mn = [(0, 0), (0, 1), (1, 0), (1, 1)]
                            .iter()
                            .map(|(dh, dw)| fine.data[(ti * h + hi + dh) * w + wi + dw])
                            .min()
                            .unwrap();
                        assert_eq!(
                            mn,
                            coarse.data[(ti * h / 2 + hi / 2) * (w / 2) + wi / 2],
                            "level {l}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn apply_mask_identity_and_zero() {
        let x = PotentialTensor::from_vec(&[1, 2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let ones = SpikeTensor::from_vec(&[1, 2, 2], vec![1; 4], 2).unwrap();
        assert_eq!(apply_mask(&x, &ones).unwrap(), x);
        let zeros = SpikeTensor::zeros(&[1, 2, 2], 2);
        assert!(apply_mask(&x, &zeros)
            .unwrap()
            .data
            .iter()
            .all(|&v| v == 0.0));
        let bad = SpikeTensor::zeros(&[1, 3, 3], 2);
        assert!(apply_mask(&x, &bad).is_err());
    }
}
