//! Small dense matrix helpers for the invertible 1x1 convolution.

use rand::Rng;
use rand_distr::StandardNormal;

/// LU factorization with partial pivoting of a row-major `n x n` matrix.
pub(crate) struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
    sign: f64,
}

impl Lu {
    pub fn new(a: &[f64], n: usize) -> Self {
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut sign = 1.0;
        for k in 0..n {
            let mut p = k;
            for r in k + 1..n {
                if lu[r * n + k].abs() > lu[p * n + k].abs() {
                    p = r;
                }
            }
            if p != k {
                for c in 0..n {
                    lu.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
                sign = -sign;
            }
            let pivot = lu[k * n + k];
            if pivot == 0.0 {
                continue;
            }
            for r in k + 1..n {
                let f = lu[r * n + k] / pivot;
                lu[r * n + k] = f;
                for c in k + 1..n {
                    lu[r * n + c] -= f * lu[k * n + c];
                }
            }
        }
        Lu { n, lu, perm, sign }
    }

    pub fn det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[i * self.n + i]).product::<f64>() * self.sign
    }

    pub fn log_abs_det(&self) -> f64 {
        (0..self.n).map(|i| self.lu[i * self.n + i].abs().ln()).sum()
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.lu[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu[i * n + j] * x[j];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }

    /// Row-major inverse.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            let col = self.solve(&e);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        inv
    }
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
pub(crate) fn random_orthogonal(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let d: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = rows.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= d * b;
                }
            }
            let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            rows[i].iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            return rows.concat();
        }
    }
}
