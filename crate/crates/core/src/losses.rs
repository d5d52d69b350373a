//! Training losses on the tape.

use crate::autograd::{lit, Real, Tape, TensorError, Var};

pub const ENTROPY_EPS: f64 = 1e-5;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Squared error summed over channels, averaged over rows.
pub fn color_mse<T: Real>(tape: &mut Tape<'_, T>, pred: Var, gt: Var) -> Result<Var, TensorError> {
    let rows = tape.shape(pred).0.max(1);
    let d = tape.sub(pred, gt)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, lit(1.0 / rows as f64)))
}

/// Mean binary entropy of `α` clamped to `[ε, 1 − ε]`.
pub fn entropy<T: Real>(tape: &mut Tape<'_, T>, alpha: Var) -> Result<Var, TensorError> {
    let a = tape.clamp(alpha, lit(ENTROPY_EPS), lit(1.0 - ENTROPY_EPS));
    let la = tape.log(a);
    let t1 = tape.mul(a, la)?;
    let neg = tape.scale(a, lit(-1.0));
    let b = tape.add_scalar(neg, T::one());
    let lb = tape.log(b);
    let t2 = tape.mul(b, lb)?;
    let s = tape.add(t1, t2)?;
    let m = tape.mean(s);
    Ok(tape.scale(m, lit(-1.0)))
}

/// Mean over the listed rays of `‖x_a − 0.5‖₁`; zero for an empty list.
pub fn dynamic<T: Real>(tape: &mut Tape<'_, T>, audio_coord: Var, rays: &[u32]) -> Result<Var, TensorError> {
    if rays.is_empty() {
        return tape.constant(vec![T::zero()], 1, 1);
    }
    let d = tape.shape(audio_coord).1;
    let index = rays.iter().flat_map(|&r| (0..d as u32).map(move |k| r * d as u32 + k)).collect();
    let x = tape.gather(audio_coord, index, rays.len(), d)?;
    let c = tape.add_scalar(x, lit(-0.5));
    let a = tape.abs(c);
    let s = tape.sum(a);
    Ok(tape.scale(s, lit(1.0 / rays.len() as f64)))
}

/// Valid-mode box filter as a `[(n − w + 1), n]` matrix.
fn box_matrix<T: Real>(n: usize, w: usize) -> (Vec<T>, usize) {
    let m = n + 1 - w;
    let mut a = vec![T::zero(); m * n];
    let v: T = lit(1.0 / w as f64);
    for i in 0..m {
        for j in i..i + w {
            a[i * n + j] = v;
        }
    }
    (a, m)
}

fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

/// Mean SSIM over 7×7 box windows and channels for `[h·w, 3]` patches.
pub fn ssim<T: Real>(tape: &mut Tape<'_, T>, pred: Var, gt: Var, h: usize, w: usize) -> Result<Var, TensorError> {
    let win = SSIM_WINDOW.min(h).min(w);
    let (ah, mh) = box_matrix::<T>(h, win);
    let (aw, mw) = box_matrix::<T>(w, win);
    let awt = transpose(&aw, mw, w);
    let ah = tape.constant(ah, mh, h)?;
    let awt = tape.constant(awt, w, mw)?;
    let filter = |tape: &mut Tape<'_, T>, x: Var| -> Result<Var, TensorError> {
        let y = tape.matmul(ah, x)?;
        tape.matmul(y, awt)
    };
    let mut total: Option<Var> = None;
    for k in 0..3 {
        let x = tape.slice_cols(pred, k, 1)?;
        let x = tape.reshape(x, h, w)?;
        let y = tape.slice_cols(gt, k, 1)?;
        let y = tape.reshape(y, h, w)?;
        let mx = filter(tape, x)?;
        let my = filter(tape, y)?;
        let xx = tape.mul(x, x)?;
        let yy = tape.mul(y, y)?;
        let xy = tape.mul(x, y)?;
        let exx = filter(tape, xx)?;
        let eyy = filter(tape, yy)?;
        let exy = filter(tape, xy)?;
        let mx2 = tape.mul(mx, mx)?;
        let my2 = tape.mul(my, my)?;
        let mxy = tape.mul(mx, my)?;
        let vx = tape.sub(exx, mx2)?;
        let vy = tape.sub(eyy, my2)?;
        let cxy = tape.sub(exy, mxy)?;
        let n1 = tape.scale(mxy, lit(2.0));
        let n1 = tape.add_scalar(n1, lit(SSIM_C1));
        let n2 = tape.scale(cxy, lit(2.0));
        let n2 = tape.add_scalar(n2, lit(SSIM_C2));
        let d1 = tape.add(mx2, my2)?;
        let d1 = tape.add_scalar(d1, lit(SSIM_C1));
        let d2 = tape.add(vx, vy)?;
        let d2 = tape.add_scalar(d2, lit(SSIM_C2));
        let num = tape.mul(n1, n2)?;
        let den = tape.mul(d1, d2)?;
        let map = tape.div(num, den)?;
        let m = tape.mean(map);
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    let t = total.expect("three channels");
    Ok(tape.scale(t, lit(1.0 / 3.0)))
}

/// `MSE + λ·(1 − SSIM)` over a `[h·w, 3]` patch; returns `(total, mse, struct)`.
pub fn lips<T: Real>(
    tape: &mut Tape<'_, T>,
    pred: Var,
    gt: Var,
    h: usize,
    w: usize,
    lambda: f64,
) -> Result<(Var, Var, Var), TensorError> {
    let mse = color_mse(tape, pred, gt)?;
    let s = ssim(tape, pred, gt, h, w)?;
    let neg = tape.scale(s, lit(-1.0));
    let st = tape.add_scalar(neg, T::one());
    let ws = tape.scale(st, lit(lambda));
    Ok((tape.add(mse, ws)?, mse, st))
}
