//! Manifold mixup: interpolate hidden rows and their soft labels.

use rand::seq::SliceRandom;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One mixing draw: `row i` is blended with `row perm[i]` using weight `lambda` on itself.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    pub lambda: f64,
    pub perm: Vec<usize>,
}

pub fn sample_lambda(alpha: f64, rng: &mut Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

/// A plan over `n` rows, or `None` when there is nothing to mix with.
pub fn sample_plan(n: usize, alpha: f64, rng: &mut Rng) -> Result<Option<MixPlan>> {
    if n < 2 {
        log::debug!("mixup skipped: {n} row(s) in batch");
        return Ok(None);
    }
    let lambda = sample_lambda(alpha, rng)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok(Some(MixPlan { lambda, perm }))
}

/// `λ·a + (1 − λ)·b` for rows `a = x[i]`, `b = x[perm[i]]`.
pub fn mix_rows<T: Scalar>(x: &Tensor<T>, plan: &MixPlan) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    if plan.perm.len() != n {
        return Err(Error::dim("mix_rows", &[n, d], &[plan.perm.len()]));
    }
    let lam = T::of(plan.lambda);
    let rest = T::of(1.0 - plan.lambda);
    let mut out = Vec::with_capacity(n * d);
    for (i, &j) in plan.perm.iter().enumerate() {
        if j >= n {
            return Err(Error::Index {
                op: "mix_rows",
                index: j,
                limit: n,
            });
        }
        let (a, b) = (x.row(i), x.row(j));
        out.extend(a.iter().zip(b).map(|(&u, &v)| lam * u + rest * v));
    }
    Tensor::new(vec![n, d], out)
}

/// Mixes the rows of `h` (B×F) and soft labels `y` (B×K) among the rows not
/// flagged in `ignore`; ignored rows pass through unchanged.
///
/// Returns the mixed pair and the plan, expressed over the unignored rows in
/// order. With fewer than two usable rows nothing is mixed.
pub fn manifold_mixup<T: Scalar>(
    h: &Tensor<T>,
    y: &Tensor<T>,
    ignore: &[bool],
    alpha: f64,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Tensor<T>, Option<MixPlan>)> {
    let (n, f) = h.dims2()?;
    let (ny, k) = y.dims2()?;
    if ny != n || ignore.len() != n {
        return Err(Error::dim("manifold_mixup", &[n, f], &[ny, k, ignore.len()]));
    }
    let rows: Vec<usize> = (0..n).filter(|&i| !ignore[i]).collect();
    for &r in &rows {
        let s: f64 = y.row(r).iter().map(|v| v.to_f64_lossy()).sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidTarget { row: r, sum: s });
        }
    }
    let Some(plan) = sample_plan(rows.len(), alpha, rng)? else {
        return Ok((h.clone(), y.clone(), None));
    };
    let (mut hm, mut ym) = (h.clone(), y.clone());
    let (lam, rest) = (T::of(plan.lambda), T::of(1.0 - plan.lambda));
    for (slot, &r) in rows.iter().enumerate() {
        let p = rows[plan.perm[slot]];
        for c in 0..f {
            hm.data_mut()[r * f + c] = lam * h.at(r, c) + rest * h.at(p, c);
        }
        for c in 0..k {
            ym.data_mut()[r * k + c] = lam * y.at(r, c) + rest * y.at(p, c);
        }
    }
    Ok((hm, ym, Some(plan)))
}
