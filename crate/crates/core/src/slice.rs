use crate::error::{BdtError, Result};
use rand::Rng;
use rand_distr::{Distribution, Exp1};

pub const MAX_SHRINK: usize = 1000;

/// One univariate slice-sampling update with stepping out and shrinkage.
/// Returns the new point and its log target.
pub fn slice_sample<R, F>(
    param: &'static str,
    x0: f64,
    f0: f64,
    width: f64,
    max_steps: usize,
    mut log_f: F,
    rng: &mut R,
) -> Result<(f64, f64)>
where
    R: Rng + ?Sized,
    F: FnMut(f64) -> Result<f64>,
{
    let e: f64 = Exp1.sample(rng);
    let level = f0 - e;
    let mut lo = x0 - width * rng.random::<f64>();
    let mut hi = lo + width;
    let mut j = (max_steps as f64 * rng.random::<f64>()).floor() as usize;
    let mut k = max_steps.saturating_sub(1).saturating_sub(j);
    while j > 0 && log_f(lo)? > level {
        lo -= width;
        j -= 1;
    }
    while k > 0 && log_f(hi)? > level {
        hi += width;
        k -= 1;
    }
    for _ in 0..MAX_SHRINK {
        let x1 = lo + (hi - lo) * rng.random::<f64>();
        if x1 <= lo || x1 >= hi || hi - lo <= 64.0 * f64::EPSILON * x0.abs().max(1.0) {
            // interval has collapsed onto x0; staying put is a valid draw
            // (>= because f0 - e can round back to f0 when |f0| is huge)
            let fx = log_f(x0)?;
            if fx >= level {
                return Ok((x0, fx));
            }
            break;
        }
        let f1 = log_f(x1)?;
        if f1 > level {
            return Ok((x1, f1));
        }
        if x1 < x0 {
            lo = x1;
        } else {
            hi = x1;
        }
    }
    Err(BdtError::SliceShrinkage {
        param,
        steps: MAX_SHRINK,
        x0,
        lo,
        hi,
    })
}
