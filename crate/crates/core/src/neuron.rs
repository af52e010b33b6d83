//! LIF and IntIF neuron dynamics: Heaviside spiking, soft reset, integer
//! spike unfolding, and the ATan surrogate gradient.
//!
//! The dynamics per step are
//!   H[t] = beta * U[t-1] + X[t]
//!   S[t] = Theta(H[t] - u_th)            (boundary fires: H == u_th spikes)
//!   U[t] = H[t] - u_th * S[t]            (soft reset, potential retained)
//! The temporal spiking process `SN_s` runs the same recurrence with the
//! threshold scaled to `s * u_th`, starting from zero state.
//!
//! IntIF neurons quantize the charge as clamp(floor(H / u_th), 0, Z-1); the
//! integer spike is equivalent to a sum of Z-1 Heaviside gates at thresholds
//! u_th, 2*u_th, ..., (Z-1)*u_th, which is also how the surrogate gradient
//! treats it.

use crate::error::{EngineError, Result};
use crate::tensor::{PotentialTensor, SpikeTensor};

/// Neuron constants. `s` scales the firing threshold (for SN_s), `z_levels`
/// is the IntIF alphabet size (1 accumulator level means binary LIF).
#[derive(Debug, Clone, Copy)]
pub struct NeuronParams {
    pub beta: f64,
    pub u_th: f64,
    pub s: f64,
    pub z_levels: u32,
    pub surrogate_width: f64,
}

impl Default for NeuronParams {
    fn default() -> Self {
        NeuronParams {
            beta: 0.5,
            u_th: 1.0,
            s: 1.0,
            z_levels: 2,
            surrogate_width: 2.0,
        }
    }
}

impl NeuronParams {
    pub fn validate(&self) -> Result<()> {
        if self.u_th <= 0.0 {
            return Err(EngineError::InvalidConfig("u_th must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(EngineError::InvalidConfig("beta must be in [0,1]".into()));
        }
        if self.z_levels < 1 {
            return Err(EngineError::InvalidConfig("z_levels must be >= 1".into()));
        }
        if self.s < 1.0 {
            return Err(EngineError::InvalidConfig(
                "threshold scale s must be >= 1".into(),
            ));
        }
        if self.surrogate_width <= 0.0 {
            return Err(EngineError::InvalidConfig(
                "surrogate width must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Post-reset membrane potential carried between steps.
#[derive(Debug, Clone)]
pub struct NeuronState {
    pub u: PotentialTensor,
}

impl NeuronState {
    pub fn zeros(dims: &[usize]) -> Self {
        NeuronState {
            u: PotentialTensor::zeros(dims),
        }
    }
}

/// Element-wise Heaviside: 1 where h >= threshold, else 0.
pub fn heaviside(h: &PotentialTensor, threshold: f64) -> SpikeTensor {
    let data = h.data.iter().map(|&v| u8::from(v >= threshold)).collect();
    SpikeTensor {
        dims: h.dims.clone(),
        data,
        levels: 2,
    }
}

/// One LIF step with soft reset. Returns the binary spikes and the new state.
pub fn lif_step(
    state: &NeuronState,
    x: &PotentialTensor,
    p: &NeuronParams,
) -> Result<(SpikeTensor, NeuronState)> {
    if state.u.dims != x.dims {
        return Err(EngineError::ShapeMismatch {
            expected: format!("{:?}", state.u.dims),
            got: format!("{:?}", x.dims),
        });
    }
    let th = p.s * p.u_th;
    let mut spikes = vec![0u8; x.len()];
    let mut u_new = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = p.beta * state.u.data[i] + x.data[i];
        let s = u8::from(h >= th);
        spikes[i] = s;
        u_new[i] = h - th * s as f64;
    }
    Ok((
        SpikeTensor {
            dims: x.dims.clone(),
            data: spikes,
            levels: 2,
        },
        NeuronState {
            u: PotentialTensor {
                dims: x.dims.clone(),
                data: u_new,
            },
        },
    ))
}

/// One IntIF step: S = clamp(floor(H / u_th), 0, Z-1), soft reset by u_th*S.
pub fn intif_step(
    state: &NeuronState,
    x: &PotentialTensor,
    p: &NeuronParams,
) -> Result<(SpikeTensor, NeuronState)> {
    if state.u.dims != x.dims {
        return Err(EngineError::ShapeMismatch {
            expected: format!("{:?}", state.u.dims),
            got: format!("{:?}", x.dims),
        });
    }
    let th = p.s * p.u_th;
    let zmax = (p.z_levels - 1) as f64;
    let mut spikes = vec![0u8; x.len()];
    let mut u_new = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = p.beta * state.u.data[i] + x.data[i];
        let s = (h / th).floor().clamp(0.0, zmax);
        spikes[i] = s as u8;
        u_new[i] = h - th * s;
    }
    Ok((
        SpikeTensor {
            dims: x.dims.clone(),
            data: spikes,
            levels: p.z_levels as u8,
        },
        NeuronState {
            u: PotentialTensor {
                dims: x.dims.clone(),
                data: u_new,
            },
        },
    ))
}

/// Temporal spiking process `SN_s`: folds [`lif_step`] (or [`intif_step`] when
/// `p.z_levels > 2`... the caller picks via `integer`) over the leading time
/// axis starting from zero state. Input `[T, ...]`, output per-step spikes.
pub fn temporal_spike(
    u_seq: &PotentialTensor,
    p: &NeuronParams,
    integer: bool,
) -> Result<SpikeTensor> {
    p.validate()?;
    if u_seq.dims.is_empty() {
        return Err(EngineError::InvalidDim(
            "temporal_spike needs a time axis".into(),
        ));
    }
    let t_steps = u_seq.dims[0];
    let site_dims: Vec<usize> = u_seq.dims[1..].to_vec();
    let sites: usize = site_dims.iter().product();
    let mut state = NeuronState::zeros(&site_dims);
    let levels = if integer { p.z_levels as u8 } else { 2 };
    let mut out = vec![0u8; u_seq.len()];
    for t in 0..t_steps {
        let x = PotentialTensor {
            dims: site_dims.clone(),
            data: u_seq.data[t * sites..(t + 1) * sites].to_vec(),
        };
        let (s, ns) = if integer {
            intif_step(&state, &x, p)?
        } else {
            lif_step(&state, &x, p)?
        };
        out[t * sites..(t + 1) * sites].copy_from_slice(&s.data);
        state = ns;
    }
    SpikeTensor::from_vec(&u_seq.dims, out, levels)
}

/// Unfold an integer-valued spike tensor into Z binary sub-steps
/// (unary-prefix encoding: value v puts 1s in the first v sub-steps).
pub fn unfold_intif(s: &SpikeTensor, z: u32) -> Result<Vec<SpikeTensor>> {
    if let Some(&v) = s.data.iter().find(|&&v| (v as u32) >= z) {
        return Err(EngineError::SpikeAlphabet {
            value: v as u32,
            max: z,
        });
    }
    let mut subs = Vec::with_capacity(z as usize);
    for step in 0..z {
        let data = s
            .data
            .iter()
            .map(|&v| u8::from((v as u32) > step))
            .collect();
        subs.push(SpikeTensor {
            dims: s.dims.clone(),
            data,
            levels: 2,
        });
    }
    Ok(subs)
}

/// ATan surrogate gradient: d/dx [ (1/pi) atan(pi*width*x/2) + 1/2 ]
/// = width / (2 * (1 + (pi*width*x/2)^2)), evaluated at x = H - threshold.
pub fn atan_surrogate(h_minus_th: f64, width: f64) -> f64 {
    let a = std::f64::consts::PI * width * h_minus_th / 2.0;
    width / (2.0 * (1.0 + a * a))
}

/// Smooth primitive whose derivative is [`atan_surrogate`]; the relaxation-mode
/// stand-in for the Heaviside forward.
pub fn atan_primitive(h_minus_th: f64, width: f64) -> f64 {
    (std::f64::consts::PI * width * h_minus_th / 2.0).atan() / std::f64::consts::PI + 0.5
}
