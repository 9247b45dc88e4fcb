use super::{dot, CombinerError, CombinerParams, ForwardCache, Mlp};

/// One training example: reference image, condition text, target image.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x_r: &'a [f64],
    pub e: &'a [f64],
    pub x_t: &'a [f64],
}

/// Parameter gradients, one MLP-shaped buffer per head.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub h1: Mlp,
    pub h2: Mlp,
    pub h3: Mlp,
    pub h4: Mlp,
}

impl Gradients {
    pub fn zeros_like(p: &CombinerParams) -> Self {
        Self {
            h1: p.h1.zeros_like(),
            h2: p.h2.zeros_like(),
            h3: p.h3.zeros_like(),
            h4: p.h4.zeros_like(),
        }
    }

    /// Same order as [`CombinerParams::tensors`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        [&self.h1, &self.h2, &self.h3, &self.h4]
            .into_iter()
            .flat_map(|m| m.tensors())
            .collect()
    }
}

fn check_batch(n_g: usize, n_t: usize, tau: f64) -> Result<(), CombinerError> {
    if n_g != n_t {
        return Err(CombinerError::DimensionMismatch { expected: n_g, got: n_t });
    }
    if n_g < 2 {
        return Err(CombinerError::InvalidConfig(format!("batch of {n_g}; need at least 2")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(CombinerError::InvalidConfig(format!("temperature {tau}")));
    }
    Ok(())
}

/// Batch-softmax contrastive loss over s_ij = g_i·t_j/τ, with row i's
/// positive at column i. Returns the loss and the logits matrix.
pub fn info_nce_loss(g: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> Result<(f64, Vec<Vec<f64>>), CombinerError> {
    check_batch(g.len(), t.len(), tau)?;
    let logits: Vec<Vec<f64>> = g.iter().map(|gi| t.iter().map(|tj| dot(gi, tj) / tau).collect()).collect();
    let mut total = 0.0;
    for (i, row) in logits.iter().enumerate() {
        total += log_sum_exp(row) - row[i];
    }
    let loss = total / g.len() as f64;
    if !loss.is_finite() {
        let worst = logits.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        return Err(CombinerError::NonFinite(format!("loss {loss} (max |logit| {worst})")));
    }
    Ok((loss, logits))
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// dL/ds for the loss above: (softmax(s) − I) / B.
pub fn logit_gradient(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let b = logits.len() as f64;
    logits
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let lse = log_sum_exp(row);
            row.iter()
                .enumerate()
                .map(|(j, s)| ((s - lse).exp() - f64::from(i == j)) / b)
                .collect()
        })
        .collect()
}

fn forward_batch(params: &CombinerParams, batch: &[Sample]) -> Result<Vec<ForwardCache>, CombinerError> {
    batch.iter().map(|s| params.forward_cached(s.x_r, s.e)).collect()
}

/// Loss and exact parameter gradients for one batch.
pub fn loss_and_gradients(
    params: &CombinerParams,
    batch: &[Sample],
    tau: f64,
) -> Result<(f64, Gradients), CombinerError> {
    let caches = forward_batch(params, batch)?;
    let g: Vec<Vec<f64>> = caches.iter().map(|c| c.g.clone()).collect();
    let t: Vec<Vec<f64>> = batch.iter().map(|s| s.x_t.to_vec()).collect();
    let (loss, logits) = info_nce_loss(&g, &t, tau)?;
    let ds = logit_gradient(&logits);
    let mut grads = Gradients::zeros_like(params);
    let d = params.dim;
    for (i, (s, c)) in batch.iter().zip(&caches).enumerate() {
        let mut dg = vec![0.0; d];
        for (j, tj) in t.iter().enumerate() {
            let w = ds[i][j] / tau;
            dg.iter_mut().zip(tj).for_each(|(a, x)| *a += w * x);
        }
        // Through g = u/‖u‖.
        let proj = dot(&c.g, &dg);
        let du: Vec<f64> = dg.iter().zip(&c.g).map(|(a, gk)| (a - gk * proj) / c.norm).collect();
        let (a1, a2) = (c.c1.output(), c.c2.output());
        let lam = c.lambda;
        let mut d_lambda = 0.0;
        for k in 0..d {
            d_lambda += du[k] * (a1[k] - a2[k]);
        }
        let d_raw = if params.squash_lambda { d_lambda * lam * (1.0 - lam) } else { d_lambda };
        let da1: Vec<f64> = du.iter().map(|v| lam * v).collect();
        let da2: Vec<f64> = du.iter().map(|v| (1.0 - lam) * v).collect();
        params.h1.backward(&c.c1, &da1, &mut grads.h1);
        params.h2.backward(&c.c2, &da2, &mut grads.h2);
        params.h3.backward(&c.c3, &du, &mut grads.h3);
        params.h4.backward(&c.c4, &[d_raw], &mut grads.h4);
        debug_assert_eq!(s.x_r.len(), d);
    }
    if grads.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
        return Err(CombinerError::NonFinite("gradient".into()));
    }
    Ok((loss, grads))
}

pub fn backward(batch: &[Sample], params: &CombinerParams, tau: f64) -> Result<Gradients, CombinerError> {
    loss_and_gradients(params, batch, tau).map(|(_, g)| g)
}

/// Loss only, for finite-difference checks.
pub fn batch_loss(params: &CombinerParams, batch: &[Sample], tau: f64) -> Result<f64, CombinerError> {
    let g: Vec<Vec<f64>> = forward_batch(params, batch)?.into_iter().map(|c| c.g).collect();
    let t: Vec<Vec<f64>> = batch.iter().map(|s| s.x_t.to_vec()).collect();
    info_nce_loss(&g, &t, tau).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combiner::normalize;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut v);
        v
    }

    fn naive_loss(g: &[Vec<f64>], t: &[Vec<f64>], tau: f64) -> f64 {
        let b = g.len();
        let mut sum = 0.0;
        for i in 0..b {
            let mut denom = 0.0;
            for j in 0..b {
                let mut s = 0.0;
                for k in 0..g[i].len() {
                    s += g[i][k] * t[j][k];
                }
                denom += (s / tau).exp();
            }
            let mut num = 0.0;
            for k in 0..g[i].len() {
                num += g[i][k] * t[i][k];
            }
            sum += ((num / tau).exp() / denom).ln();
        }
        -sum / b as f64
    }

    #[test]
    fn uniform_logits_give_ln_b() {
        let v = vec![vec![1.0, 0.0]; 4];
        let (l, _) = info_nce_loss(&v, &v, 0.01).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn identity_batch_approaches_zero() {
        let e: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| f64::from(i == j)).collect()).collect();
        let (l, _) = info_nce_loss(&e, &e, 0.01).unwrap();
        assert!((0.0..1e-12).contains(&l));
    }

    #[test]
    fn matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g: Vec<_> = (0..8).map(|_| unit(&mut rng, 16)).collect();
        let t: Vec<_> = (0..8).map(|_| unit(&mut rng, 16)).collect();
        // τ = 0.1 keeps the naive exponentials in range.
        let (l, _) = info_nce_loss(&g, &t, 0.1).unwrap();
        assert!((l - naive_loss(&g, &t, 0.1)).abs() < 1e-8);
        let (l, _) = info_nce_loss(&g, &t, 0.01).unwrap();
        assert!((l - naive_loss(&g, &t, 0.01)).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_batches() {
        let v = vec![vec![1.0]];
        assert!(info_nce_loss(&v, &v, 0.01).is_err());
        let v2 = vec![vec![1.0], vec![1.0]];
        assert!(info_nce_loss(&v2, &v2, 0.0).is_err());
        assert!(info_nce_loss(&v2, &v, 0.1).is_err());
        let nan = vec![vec![f64::NAN], vec![1.0]];
        assert!(matches!(info_nce_loss(&nan, &v2, 0.1), Err(CombinerError::NonFinite(_))));
    }

    #[test]
    fn saddle_logit_gradient_rows_sum_to_zero() {
        let v = vec![vec![0.0, 1.0]; 5];
        let (_, logits) = info_nce_loss(&v, &v, 0.01).unwrap();
        for row in logit_gradient(&logits) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_shapes_match_parameters() {
        let p = CombinerParams::init(4, 4, 0, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vs: Vec<[Vec<f64>; 3]> = (0..3).map(|_| [unit(&mut rng, 4), unit(&mut rng, 4), unit(&mut rng, 4)]).collect();
        let batch: Vec<Sample> = vs.iter().map(|v| Sample { x_r: &v[0], e: &v[1], x_t: &v[2] }).collect();
        let g = backward(&batch, &p, 0.01).unwrap();
        let a: Vec<usize> = g.tensors().iter().map(|t| t.len()).collect();
        let b: Vec<usize> = p.tensors().iter().map(|t| t.len()).collect();
        assert_eq!(a, b);
    }

    /// Smallest |pre-activation| of any hidden unit over the batch. Central
    /// differences are meaningless when a perturbation crosses a ReLU kink.
    fn kink_margin(p: &CombinerParams, vs: &[[Vec<f64>; 3]]) -> f64 {
        let mut m = f64::INFINITY;
        for v in vs {
            let z: Vec<f64> = v[0].iter().chain(&v[1]).copied().collect();
            for (mlp, x) in [(&p.h1, &v[0]), (&p.h2, &v[1]), (&p.h3, &z), (&p.h4, &z)] {
                let l = &mlp.layers[0];
                for o in 0..l.n_out {
                    let pre: f64 = l.w[o * l.n_in..(o + 1) * l.n_in].iter().zip(x.iter()).map(|(w, x)| w * x).sum::<f64>() + l.b[o];
                    m = m.min(pre.abs());
                }
            }
        }
        m
    }

    fn fd_max_rel_error(tau: f64, h: f64, seed: u64, squash: bool) -> f64 {
        let d = 8;
        let (p, vs) = (seed..)
            .map(|s| {
                let p = CombinerParams::init(d, 4, s, squash);
                let mut rng = ChaCha8Rng::seed_from_u64(s + 100);
                let vs: Vec<[Vec<f64>; 3]> = (0..4).map(|_| [unit(&mut rng, d), unit(&mut rng, d), unit(&mut rng, d)]).collect();
                (p, vs)
            })
            .find(|(p, vs)| kink_margin(p, vs) > 1e-3)
            .unwrap();
        let batch: Vec<Sample> = vs.iter().map(|v| Sample { x_r: &v[0], e: &v[1], x_t: &v[2] }).collect();
        let analytic: Vec<Vec<f64>> = backward(&batch, &p, tau).unwrap().tensors().iter().map(|t| t.to_vec()).collect();
        let mut worst = 0.0f64;
        for (ti, a) in analytic.iter().enumerate() {
            for k in 0..a.len() {
                let mut q = p.clone();
                q.tensors_mut()[ti][k] += h;
                let up = batch_loss(&q, &batch, tau).unwrap();
                q.tensors_mut()[ti][k] -= 2.0 * h;
                let down = batch_loss(&q, &batch, tau).unwrap();
                let num = (up - down) / (2.0 * h);
                let rel = (a[k] - num).abs() / a[k].abs().max(num.abs()).max(1e-8);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        // At τ = 0.01 the loss is sharp enough that the O(h²) truncation
        // term of a 1e-4 step is itself around 1e-4, so use a finer step there.
        for (tau, h, squash) in [(1.0, 1e-4, true), (0.1, 1e-4, true), (0.1, 1e-4, false), (0.01, 1e-5, true)] {
            let err = fd_max_rel_error(tau, h, 2, squash);
            assert!(err <= 1e-4, "tau {tau} step {h} squash {squash}: {err}");
        }
    }

    proptest! {
        #[test]
        fn permutation_invariant(seed in 0u64..1000, b in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<_> = (0..b).map(|_| unit(&mut rng, 6)).collect();
            let t: Vec<_> = (0..b).map(|_| unit(&mut rng, 6)).collect();
            let mut perm: Vec<usize> = (0..b).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let gp: Vec<_> = perm.iter().map(|&i| g[i].clone()).collect();
            let tp: Vec<_> = perm.iter().map(|&i| t[i].clone()).collect();
            let (l1, _) = info_nce_loss(&g, &t, 0.05).unwrap();
            let (l2, _) = info_nce_loss(&gp, &tp, 0.05).unwrap();
            prop_assert!((l1 - l2).abs() < 1e-12);
        }

        #[test]
        fn raising_one_diagonal_lowers_loss(seed in 0u64..1000, b in 2usize..7, bump in 0.01f64..2.0) {
            // Work in logit space with τ = 1: rows are logits against one-hot targets.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t: Vec<Vec<f64>> = (0..b).map(|i| (0..b).map(|j| f64::from(i == j)).collect()).collect();
            let mut g: Vec<Vec<f64>> = (0..b).map(|_| (0..b).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let (l1, _) = info_nce_loss(&g, &t, 1.0).unwrap();
            let i = rng.random_range(0..b);
            g[i][i] += bump;
            let (l2, _) = info_nce_loss(&g, &t, 1.0).unwrap();
            prop_assert!(l2 < l1);
        }
    }
}
