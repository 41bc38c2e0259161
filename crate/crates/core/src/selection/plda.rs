//! Probabilistic linear discriminant analysis on latent features, as the
//! user model behind the Bayesian-teaching selection baseline.
//!
//! Fitting whitens the within-class scatter to the identity and diagonalizes
//! the between-class scatter into a nonnegative diagonal `psi`. Scoring uses
//! the same-class predictive density `N(u | psi/(2 psi + I) u_y,
//! psi/(2 psi + I) + I)` in the whitened domain.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const SCATTER_EPS: f64 = 1e-4;
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone)]
pub struct PldaModel {
    /// Global mean of the training latents.
    pub mean: Vec<f64>,
    /// Invertible transform A; inference maps x to u = A^-1 (x - mean).
    pub transform: Tensor,
    /// Cached A^-1.
    pub transform_inv: Tensor,
    /// Diagonal between-class variances in the whitened domain, >= 0.
    pub psi: Vec<f64>,
    /// Whitened class means u^y, keyed by label.
    pub class_means: BTreeMap<usize, Vec<f64>>,
}

impl PldaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Whiten a latent vector: u = A^-1 (x - mean).
    pub fn whiten(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::InvalidInput(format!(
                "latent has {} entries, model expects {d}",
                x.len()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        Ok(mat_vec(&self.transform_inv, &centered))
    }
}

fn mat_vec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    let rows = m.shape()[0];
    let cols = m.shape()[1];
    debug_assert_eq!(cols, v.len());
    let data = m.data();
    (0..rows)
        .map(|r| {
            let row = &data[r * cols..(r + 1) * cols];
            row.iter().zip(v).map(|(a, b)| a * b).sum()
        })
        .collect()
}

fn mat_mul(a: &Tensor, b: &Tensor) -> Tensor {
    let (ra, ca) = (a.shape()[0], a.shape()[1]);
    let (rb, cb) = (b.shape()[0], b.shape()[1]);
    debug_assert_eq!(ca, rb);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f64; ra * cb];
    for i in 0..ra {
        for k in 0..ca {
            let aik = ad[i * ca + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..cb {
                out[i * cb + j] += aik * bd[k * cb + j];
            }
        }
    }
    Tensor::from_vec(&[ra, cb], out).expect("matmul shape")
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let data = m.data();
    let mut out = vec![0.0f64; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], out).expect("transpose shape")
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues in descending order with the matching eigenvectors as
/// matrix columns. Deterministic sweep order, so refits are bit-stable.
pub fn jacobi_eigen(sym: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if sym.rank() != 2 || sym.shape()[0] != sym.shape()[1] {
        return Err(Error::InvalidInput(format!(
            "eigendecomposition expects a square matrix, got {:?}",
            sym.shape()
        )));
    }
    let d = sym.shape()[0];
    let mut a = sym.data().to_vec();
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }

    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..d {
            for q in (p + 1)..d {
                s += a[p * d + q] * a[p * d + q];
            }
        }
        s.sqrt()
    };
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if off(&a) <= JACOBI_TOL * scale {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() <= JACOBI_TOL * scale / (d * d) as f64 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q.
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        a[j * d + j]
            .partial_cmp(&a[i * d + i])
            .expect("finite eigenvalues")
            .then(i.cmp(&j))
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * d + i]).collect();
    let mut vectors = vec![0.0f64; d * d];
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..d {
            vectors[r * d + new_col] = v[r * d + old_col];
        }
    }
    Ok((eigenvalues, Tensor::from_vec(&[d, d], vectors)?))
}

fn scatter(diffs: &[(usize, Vec<f64>)], weights: &[f64], d: usize) -> Vec<f64> {
    let mut s = vec![0.0f64; d * d];
    for (idx, diff) in diffs {
        let w = weights[*idx];
        for i in 0..d {
            let di = diff[i] * w;
            for j in 0..d {
                s[i * d + j] += di * diff[j];
            }
        }
    }
    s
}

/// Fit a PLDA model on labeled latent vectors.
///
/// Regularized within- and between-class scatters are simultaneously
/// diagonalized; negative between-class eigenvalues clamp to zero.
pub fn plda_fit(latents: &[Vec<f64>], labels: &[usize]) -> Result<PldaModel> {
    if latents.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} latents but {} labels",
            latents.len(),
            labels.len()
        )));
    }
    if latents.is_empty() {
        return Err(Error::Fit("no data to fit".into()));
    }
    let d = latents[0].len();
    if latents.iter().any(|x| x.len() != d) {
        return Err(Error::InvalidInput("latents of mixed dimension".into()));
    }
    let n = latents.len();
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Fit(format!(
            "need at least 2 distinct labels, got {}",
            by_class.len()
        )));
    }
    if let Some((y, members)) = by_class.iter().find(|(_, v)| v.len() < 2) {
        return Err(Error::Fit(format!(
            "class {y} has only {} sample(s), need at least 2",
            members.len()
        )));
    }

    let mut mean = vec![0.0f64; d];
    for x in latents {
        for (m, &v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut class_means_raw: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&y, members) in &by_class {
        let mut mu = vec![0.0f64; d];
        for &i in members {
            for (m, &v) in mu.iter_mut().zip(&latents[i]) {
                *m += v;
            }
        }
        for m in &mut mu {
            *m /= members.len() as f64;
        }
        class_means_raw.insert(y, mu);
    }

    // Within-class scatter, normalized by N.
    let w_inv = 1.0 / n as f64;
    let mut s_w = vec![0.0f64; d * d];
    for (&y, members) in &by_class {
        let mu = &class_means_raw[&y];
        for &i in members {
            let diff: Vec<f64> = latents[i].iter().zip(mu).map(|(a, b)| a - b).collect();
            for r in 0..d {
                let dr = diff[r] * w_inv;
                for c in 0..d {
                    s_w[r * d + c] += dr * diff[c];
                }
            }
        }
    }
    // Between-class scatter, class-size weighted.
    let diffs: Vec<(usize, Vec<f64>)> = class_means_raw
        .values()
        .enumerate()
        .map(|(i, mu)| (i, mu.iter().zip(&mean).map(|(a, b)| a - b).collect()))
        .collect();
    let weights: Vec<f64> = by_class
        .values()
        .map(|members| members.len() as f64 / n as f64)
        .collect();
    let mut s_b = scatter(&diffs, &weights, d);

    for i in 0..d {
        s_w[i * d + i] += SCATTER_EPS;
        s_b[i * d + i] += SCATTER_EPS;
    }

    let s_w = Tensor::from_vec(&[d, d], s_w)?;
    let s_b = Tensor::from_vec(&[d, d], s_b)?;

    let (w_eigs, u) = jacobi_eigen(&s_w)?;
    if w_eigs.iter().any(|&e| e <= 0.0 || !e.is_finite()) {
        return Err(Error::Fit(
            "within-class scatter is singular after regularization".into(),
        ));
    }
    // Whitener W = D^{-1/2} U^T, so W S_w W^T = I.
    let ut = transpose(&u);
    let mut whitener = ut.clone();
    {
        let wdata = whitener.data_mut();
        for (r, &e) in w_eigs.iter().enumerate() {
            let inv_sqrt = 1.0 / e.sqrt();
            for c in 0..d {
                wdata[r * d + c] *= inv_sqrt;
            }
        }
    }

    let mid = mat_mul(&mat_mul(&whitener, &s_b), &transpose(&whitener));
    let (b_eigs, v) = jacobi_eigen(&mid)?;
    let psi: Vec<f64> = b_eigs.iter().map(|&e| e.max(0.0)).collect();

    // A^{-1} = V^T W; A = U D^{1/2} V.
    let transform_inv = mat_mul(&transpose(&v), &whitener);
    let mut u_scaled = u.clone();
    {
        let data = u_scaled.data_mut();
        for r in 0..d {
            for (c, &e) in w_eigs.iter().enumerate() {
                data[r * d + c] *= e.sqrt();
            }
        }
    }
    let transform = mat_mul(&u_scaled, &v);

    let mut class_means = BTreeMap::new();
    for (&y, mu) in &class_means_raw {
        let centered: Vec<f64> = mu.iter().zip(&mean).map(|(a, b)| a - b).collect();
        class_means.insert(y, mat_vec(&transform_inv, &centered));
    }

    Ok(PldaModel {
        mean,
        transform,
        transform_inv,
        psi,
        class_means,
    })
}

/// Log of the same-class predictive density of `latent` under class `y`.
pub fn bt_score(model: &PldaModel, latent: &[f64], y: usize) -> Result<f64> {
    let u_y = model
        .class_means
        .get(&y)
        .ok_or_else(|| Error::InvalidInput(format!("class {y} not in the PLDA model")))?;
    let u = model.whiten(latent)?;
    let mut logp = 0.0;
    for j in 0..model.dim() {
        let shrink = model.psi[j] / (2.0 * model.psi[j] + 1.0);
        let mean_j = shrink * u_y[j];
        let var_j = shrink + 1.0;
        let resid = u[j] - mean_j;
        logp += -0.5 * (std::f64::consts::TAU * var_j).ln() - resid * resid / (2.0 * var_j);
    }
    Ok(logp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // Symmetric 2x2 with eigenvalues 3 and 1.
        let a = Tensor::from_vec(&[2, 2], vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        let (eigs, v) = jacobi_eigen(&a).unwrap();
        assert!((eigs[0] - 3.0).abs() < 1e-12);
        assert!((eigs[1] - 1.0).abs() < 1e-12);
        // Reconstruct A = V diag(e) V^T.
        let vd = v.data();
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += vd[i * 2 + k] * eigs[k] * vd[j * 2 + k];
                }
                assert!((acc - a.data()[i * 2 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn jacobi_on_random_symmetric_reconstructs() {
        let mut rng = RngStream::new(3);
        let d = 10;
        let mut m = vec![0.0f64; d * d];
        for i in 0..d {
            for j in i..d {
                let v = rng.range_f64(-1.0, 1.0);
                m[i * d + j] = v;
                m[j * d + i] = v;
            }
        }
        let a = Tensor::from_vec(&[d, d], m).unwrap();
        let (eigs, v) = jacobi_eigen(&a).unwrap();
        let vd = v.data();
        for i in 0..d {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += vd[i * d + k] * eigs[k] * vd[j * d + k];
                }
                assert!((acc - a.data()[i * d + j]).abs() < 1e-9);
            }
        }
        // Descending order.
        for w in eigs.windows(2) {
            assert!(w[0] >= w[1]);
        }
    }

    fn two_class_1d(n_per_class: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        // Class centers at -2 and +2 give a true between-class variance of 4;
        // within-class noise is standard normal.
        let mut rng = RngStream::new(seed);
        let mut latents = Vec::new();
        let mut labels = Vec::new();
        for (y, center) in [(0usize, -2.0), (1usize, 2.0)] {
            for _ in 0..n_per_class {
                latents.push(vec![center + rng.normal()]);
                labels.push(y);
            }
        }
        (latents, labels)
    }

    #[test]
    fn recovers_between_class_variance_in_1d() {
        let (latents, labels) = two_class_1d(5000, 17);
        let model = plda_fit(&latents, &labels).unwrap();
        assert_eq!(model.psi.len(), 1);
        assert!(
            (model.psi[0] - 4.0).abs() < 0.2,
            "psi = {}, want 4 within 5%",
            model.psi[0]
        );
    }

    #[test]
    fn whitened_within_class_covariance_is_identity_1d() {
        let (latents, labels) = two_class_1d(2000, 23);
        let model = plda_fit(&latents, &labels).unwrap();
        // Transform the training data and measure within-class variance.
        let mut per_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (x, &y) in latents.iter().zip(&labels) {
            per_class.entry(y).or_default().push(model.whiten(x).unwrap()[0]);
        }
        let mut var = 0.0;
        let mut count = 0usize;
        for vs in per_class.values() {
            let mu: f64 = vs.iter().sum::<f64>() / vs.len() as f64;
            var += vs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            count += vs.len();
        }
        var /= count as f64;
        assert!((var - 1.0).abs() < 0.05, "whitened within var {var}");
    }

    #[test]
    fn single_class_is_a_fit_error() {
        let latents = vec![vec![0.0], vec![1.0], vec![2.0]];
        let labels = vec![3, 3, 3];
        match plda_fit(&latents, &labels) {
            Err(Error::Fit(_)) => {}
            other => panic!("expected fit error, got {:?}", other.map(|_| ())),
        }
        // A class with a single sample is also rejected.
        let labels2 = vec![0, 0, 1];
        assert!(matches!(plda_fit(&latents, &labels2), Err(Error::Fit(_))));
    }

    #[test]
    fn zero_psi_reduces_to_standard_normal() {
        let model = PldaModel {
            mean: vec![0.0],
            transform: Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
            transform_inv: Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
            psi: vec![0.0],
            class_means: BTreeMap::from([(0, vec![3.0])]),
        };
        let u = 0.8;
        let got = bt_score(&model, &[u], 0).unwrap();
        let want = -0.5 * (std::f64::consts::TAU).ln() - u * u / 2.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn predictive_density_matches_quadrature_1d() {
        // Quadrature of the generative integral: the class-center belief
        // N(shrink * u_y, shrink) convolved with unit observation noise.
        let psi = 2.5;
        let u_y = 1.3;
        let model = PldaModel {
            mean: vec![0.0],
            transform: Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
            transform_inv: Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
            psi: vec![psi],
            class_means: BTreeMap::from([(0, vec![u_y])]),
        };
        let shrink = psi / (2.0 * psi + 1.0);
        let gauss = |x: f64, mu: f64, var: f64| {
            (-(x - mu) * (x - mu) / (2.0 * var)).exp() / (std::f64::consts::TAU * var).sqrt()
        };
        for &u in &[-1.0, 0.0, 0.7, 2.2] {
            // Simpson's rule over the class-center variable.
            let lo = shrink * u_y - 12.0;
            let hi = shrink * u_y + 12.0;
            let steps = 20_000usize;
            let h = (hi - lo) / steps as f64;
            let f = |v: f64| gauss(v, shrink * u_y, shrink) * gauss(u, v, 1.0);
            let mut acc = f(lo) + f(hi);
            for i in 1..steps {
                let x = lo + i as f64 * h;
                acc += f(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            let integral = acc * h / 3.0;
            let density = bt_score(&model, &[u], 0).unwrap().exp();
            assert!(
                (density - integral).abs() < 1e-6,
                "u={u}: density {density} vs quadrature {integral}"
            );
        }
    }

    #[test]
    fn closest_class_mean_scores_highest() {
        // Among candidates with equal norm, the one nearest the class mean
        // under the induced diagonal metric wins.
        let mut rng = RngStream::new(7);
        let (latents, labels) = {
            let mut l = Vec::new();
            let mut y = Vec::new();
            for (cls, center) in [(0usize, [-2.0, 0.0]), (1usize, [2.0, 0.0])] {
                for _ in 0..500 {
                    l.push(vec![center[0] + rng.normal(), center[1] + rng.normal()]);
                    y.push(cls);
                }
            }
            (l, y)
        };
        let model = plda_fit(&latents, &labels).unwrap();
        let norm = 1.5f64;
        let mut scored: Vec<(f64, f64)> = Vec::new(); // (score, distance to u^1)
        for k in 0..32 {
            let theta = k as f64 * std::f64::consts::TAU / 32.0;
            let x = [norm * theta.cos(), norm * theta.sin()];
            let score = bt_score(&model, &x, 1).unwrap();
            let u = model.whiten(&x).unwrap();
            let u1 = &model.class_means[&1];
            let dist: f64 = u
                .iter()
                .zip(u1)
                .enumerate()
                .map(|(j, (a, b))| {
                    let shrink = model.psi[j] / (2.0 * model.psi[j] + 1.0);
                    let var = shrink + 1.0;
                    (a - shrink * b) * (a - shrink * b) / var
                })
                .sum();
            scored.push((score, dist));
        }
        // The log density differs from -dist/2 by a candidate-independent
        // constant, so the score order must invert the distance order.
        for i in 0..scored.len() {
            for j in 0..scored.len() {
                if scored[i].0 > scored[j].0 {
                    assert!(scored[i].1 < scored[j].1 + 1e-9);
                }
            }
        }
        assert!(bt_score(&model, &[0.0, 0.0], 9).is_err());
    }
}
