//! Flow-matching math: the linear interpolation path, velocity targets, the
//! block flow matching loss, and the per-block sampling process.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// ODE integration method for the block sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerMethod {
    #[default]
    Euler,
    Midpoint,
}

/// Sampler settings: step count on a uniform grid over `[0, 1]`, optional
/// classifier-free guidance, and the noise seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    /// `1.0` means guidance off (pure conditional velocity).
    pub guidance_scale: f64,
    pub method: SamplerMethod,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 32,
            guidance_scale: 1.0,
            method: SamplerMethod::Euler,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("sampler steps must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_same_shape(context: &'static str, a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch {
            context,
            expected: format!("{:?}", a.dim()),
            got: format!("{:?}", b.dim()),
        });
    }
    Ok(())
}

/// Blockwise linear interpolation `Zt = (1 - t) * Z0 + t * Z`.
pub fn interpolate(
    clean: &Array2<f64>,
    noise: &Array2<f64>,
    block_t: &[f64],
    block_size: usize,
) -> Result<Array2<f64>> {
    check_same_shape("interpolate", clean, noise)?;
    let frames = clean.nrows();
    if block_t.len() * block_size != frames {
        return Err(Error::ShapeMismatch {
            context: "interpolate blocks",
            expected: format!("{} frames", block_t.len() * block_size),
            got: format!("{frames} frames"),
        });
    }
    for &t in block_t {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidTimestep { t });
        }
    }
    let mut out = Array2::zeros(clean.raw_dim());
    for (i, &t) in block_t.iter().enumerate() {
        let r = i * block_size..(i + 1) * block_size;
        let z = clean.slice(s![r.clone(), ..]);
        let z0 = noise.slice(s![r.clone(), ..]);
        out.slice_mut(s![r, ..]).assign(&(&z0 * (1.0 - t) + &z * t));
    }
    Ok(out)
}

/// Ground-truth velocity `v = Z - Z0`; independent of `t`.
pub fn velocity_target(clean: &Array2<f64>, noise: &Array2<f64>) -> Result<Array2<f64>> {
    check_same_shape("velocity_target", clean, noise)?;
    Ok(clean - noise)
}

/// Block flow matching loss: mean over blocks of the per-block mean squared
/// error. With uniform block sizes this equals the global MSE over all noisy
/// positions.
pub fn bfm_loss(vhat: &Array2<f64>, v: &Array2<f64>, n_blocks: usize) -> Result<f64> {
    check_same_shape("bfm_loss", vhat, v)?;
    if n_blocks == 0 || vhat.nrows() % n_blocks != 0 {
        return Err(Error::Layout(format!(
            "{} frames do not split into {n_blocks} blocks",
            vhat.nrows()
        )));
    }
    if vhat.iter().any(|x| !x.is_finite()) || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "bfm_loss input",
            step: None,
        });
    }
    let b = vhat.nrows() / n_blocks;
    let d = vhat.ncols();
    let mut total = 0.0;
    for i in 0..n_blocks {
        let mut block_sse = 0.0;
        for j in i * b..(i + 1) * b {
            for c in 0..d {
                let diff = vhat[[j, c]] - v[[j, c]];
                block_sse += diff * diff;
            }
        }
        total += block_sse / (b * d) as f64;
    }
    Ok(total / n_blocks as f64)
}

/// Gradient of [`bfm_loss`] with respect to `vhat`, scaled by `upstream`.
pub fn bfm_loss_grad(
    vhat: &Array2<f64>,
    v: &Array2<f64>,
    n_blocks: usize,
    upstream: f64,
) -> Result<Array2<f64>> {
    check_same_shape("bfm_loss_grad", vhat, v)?;
    let b = vhat.nrows() / n_blocks;
    let d = vhat.ncols();
    let scale = upstream * 2.0 / (n_blocks * b * d) as f64;
    Ok((vhat - v) * scale)
}

/// A velocity field the sampler can query: `eval(x, t) -> v_hat`.
pub trait VelocityField {
    fn eval(&mut self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>>;
}

impl<F> VelocityField for F
where
    F: FnMut(&Array2<f64>, f64) -> Result<Array2<f64>>,
{
    fn eval(&mut self, x: &Array2<f64>, t: f64) -> Result<Array2<f64>> {
        self(x, t)
    }
}

/// Integrates one block from noise at `t = 0` to a clean block at `t = 1` on
/// a uniform grid. When an unconditional field is supplied and
/// `guidance_scale > 1`, velocities are blended as
/// `v_u + s * (v_c - v_u)` (classifier-free guidance).
pub fn sample_block<C: VelocityField, U: VelocityField>(
    cond: &mut C,
    mut uncond: Option<&mut U>,
    z0: &Array2<f64>,
    cfg: &SamplerConfig,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let steps = cfg.steps;
    let grid: Vec<f64> = (0..=steps).map(|s| s as f64 / steps as f64).collect();
    let mut x = z0.clone();

    let velocity = |x: &Array2<f64>, t: f64, cond: &mut C, uncond: &mut Option<&mut U>| -> Result<Array2<f64>> {
        let vc = cond.eval(x, t)?;
        match uncond {
            Some(u) if cfg.guidance_scale > 1.0 => {
                let vu = u.eval(x, t)?;
                Ok(&vu + &((&vc - &vu) * cfg.guidance_scale))
            }
            _ => Ok(vc),
        }
    };

    for s in 0..steps {
        let (t0, t1) = (grid[s], grid[s + 1]);
        let dt = t1 - t0;
        let x_next = match cfg.method {
            SamplerMethod::Euler => {
                let v = velocity(&x, t0, cond, &mut uncond)?;
                &x + &(v * dt)
            }
            SamplerMethod::Midpoint => {
                let v0 = velocity(&x, t0, cond, &mut uncond)?;
                let x_mid = &x + &(v0 * (dt / 2.0));
                let vm = velocity(&x_mid, t0 + dt / 2.0, cond, &mut uncond)?;
                &x + &(vm * dt)
            }
        };
        if x_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::SamplingFailure { step: s });
        }
        x = x_next;
    }
    Ok(x)
}
