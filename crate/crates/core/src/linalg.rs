//! Small dense symmetric positive-definite algebra and the Gaussian KL
//! between a diagonal and a full-covariance Gaussian.

use std::sync::OnceLock;

use crate::autodiff::{CustomOp, Tensor, Var};
use crate::error::{Error, Result};

/// Absolute tolerance for the symmetry check in [`SpdMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Row-major lower-triangular factor `L` with `L Lᵀ = C`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerTriangular {
    k: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    pub fn order(&self) -> usize {
        self.k
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.k + j]
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> Vec<f64> {
        let k = self.k;
        let mut out = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|p| self.at(i, p) * self.at(j, p)).sum();
                out[i * k + j] = s;
                out[j * k + i] = s;
            }
        }
        out
    }

    /// Solve `L y = b` in place.
    pub fn forward_substitute(&self, b: &mut [f64]) {
        for i in 0..self.k {
            let mut s = b[i];
            for p in 0..i {
                s -= self.at(i, p) * b[p];
            }
            b[i] = s / self.at(i, i);
        }
    }

    /// Solve `Lᵀ x = y` in place.
    pub fn back_substitute(&self, y: &mut [f64]) {
        for i in (0..self.k).rev() {
            let mut s = y[i];
            for p in i + 1..self.k {
                s -= self.at(p, i) * y[p];
            }
            y[i] = s / self.at(i, i);
        }
    }

    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.k).map(|i| self.at(i, i).ln()).sum::<f64>()
    }
}

/// Symmetric matrix expected to be positive definite; the Cholesky factor
/// is computed on first use and cached.
#[derive(Debug)]
pub struct SpdMatrix {
    k: usize,
    entries: Vec<f64>,
    chol: OnceLock<std::result::Result<LowerTriangular, (usize, f64)>>,
}

impl Clone for SpdMatrix {
    fn clone(&self) -> Self {
        SpdMatrix {
            k: self.k,
            entries: self.entries.clone(),
            chol: OnceLock::new(),
        }
    }
}

impl PartialEq for SpdMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k && self.entries == other.entries
    }
}

impl SpdMatrix {
    pub fn new(k: usize, entries: Vec<f64>) -> Result<Self> {
        if k == 0 || entries.len() != k * k {
            return Err(Error::shape("SpdMatrix::new", &[k, k], &[entries.len()]));
        }
        for i in 0..k {
            for j in 0..i {
                let (a, b) = (entries[i * k + j], entries[j * k + i]);
                if (a - b).abs() > SYMMETRY_TOL {
                    return Err(Error::Domain(format!(
                        "matrix not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(SpdMatrix {
            k,
            entries,
            chol: OnceLock::new(),
        })
    }

    pub fn identity(k: usize) -> Self {
        Self::diagonal(&vec![1.0; k])
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let k = diag.len();
        let mut entries = vec![0.0; k * k];
        for (i, &d) in diag.iter().enumerate() {
            entries[i * k + i] = d;
        }
        SpdMatrix {
            k,
            entries,
            chol: OnceLock::new(),
        }
    }

    pub fn order(&self) -> usize {
        self.k
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    pub fn cholesky(&self) -> Result<&LowerTriangular> {
        self.chol
            .get_or_init(|| factor(self.k, &self.entries))
            .as_ref()
            .map_err(|&(pivot, value)| Error::NotPositiveDefinite { pivot, value })
    }

    /// `log |C|` from the Cholesky diagonal.
    pub fn logdet(&self) -> Result<f64> {
        Ok(self.cholesky()?.logdet())
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.k {
            return Err(Error::shape("solve", &[self.k, self.k], &[b.len()]));
        }
        let l = self.cholesky()?;
        let mut x = b.to_vec();
        l.forward_substitute(&mut x);
        l.back_substitute(&mut x);
        Ok(x)
    }

    /// Explicit inverse, built column by column from Cholesky solves.
    pub fn inverse(&self) -> Result<Vec<f64>> {
        let k = self.k;
        let l = self.cholesky()?;
        let mut inv = vec![0.0; k * k];
        let mut col = vec![0.0; k];
        for j in 0..k {
            col.iter_mut().for_each(|c| *c = 0.0);
            col[j] = 1.0;
            l.forward_substitute(&mut col);
            l.back_substitute(&mut col);
            for i in 0..k {
                inv[i * k + j] = col[i];
            }
        }
        // symmetrize away rounding
        for i in 0..k {
            for j in 0..i {
                let avg = 0.5 * (inv[i * k + j] + inv[j * k + i]);
                inv[i * k + j] = avg;
                inv[j * k + i] = avg;
            }
        }
        Ok(inv)
    }
}

/// Cholesky–Banachiewicz; reads only the lower triangle.
fn factor(k: usize, a: &[f64]) -> std::result::Result<LowerTriangular, (usize, f64)> {
    let mut l = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = a[i * k + j];
            for p in 0..j {
                s -= l[i * k + p] * l[j * k + p];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err((i, s));
                }
                l[i * k + i] = s.sqrt();
            } else {
                l[i * k + j] = s / l[j * k + j];
            }
        }
    }
    Ok(LowerTriangular { k, data: l })
}

/// Factor `c`, returning the lower-triangular `L` with `L Lᵀ = c`.
pub fn cholesky(c: &SpdMatrix) -> Result<LowerTriangular> {
    c.cholesky().cloned()
}

/// `KL(N(m, diag(s)) || N(a, C))`, including the `-K` constant so that the
/// divergence of a distribution from itself is zero.
pub fn kl_diag_full(m: &[f64], s: &[f64], a: &[f64], c: &SpdMatrix) -> Result<f64> {
    let k = c.order();
    if m.len() != k || s.len() != k || a.len() != k {
        return Err(Error::shape("kl_diag_full", &[m.len(), s.len(), a.len()], &[k]));
    }
    if let Some(bad) = s.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain(format!("posterior variance must be positive, got {bad}")));
    }
    let l = c.cholesky()?;
    // Tr(C⁻¹ S) = Σ_i s_i ‖L⁻¹ e_i‖²
    let mut trace = 0.0;
    let mut col = vec![0.0; k];
    for i in 0..k {
        col.iter_mut().for_each(|x| *x = 0.0);
        col[i] = 1.0;
        l.forward_substitute(&mut col);
        trace += s[i] * col.iter().map(|x| x * x).sum::<f64>();
    }
    let mut diff: Vec<f64> = a.iter().zip(m).map(|(a, m)| a - m).collect();
    l.forward_substitute(&mut diff);
    let quad: f64 = diff.iter().map(|x| x * x).sum();
    let logdet_s: f64 = s.iter().map(|v| v.ln()).sum();
    Ok(0.5 * (trace + quad - k as f64 + l.logdet() - logdet_s))
}

/// Row-batched [`kl_diag_full`] recorded on the tape.
///
/// `m`, `s`, `a` are `[d, K]`, `c` is `[d, K, K]`; returns the scalar sum
/// over the `d` rows. Gradients flow to all four inputs.
pub fn kl_diag_full_batched<'t>(
    m: Var<'t>,
    s: Var<'t>,
    a: Var<'t>,
    c: Var<'t>,
) -> Result<Var<'t>> {
    let total = {
        let (mv, sv, av, cv) = (m.value(), s.value(), a.value(), c.value());
        let (d, k) = mv.dims2()?;
        for other in [&*sv, &*av] {
            if other.shape() != mv.shape() {
                return Err(Error::shape("kl_diag_full_batched", mv.shape(), other.shape()));
            }
        }
        if cv.shape() != [d, k, k] {
            return Err(Error::shape("kl_diag_full_batched", cv.shape(), &[d, k, k]));
        }
        let mut total = 0.0;
        for l in 0..d {
            let cl = SpdMatrix::new(k, cv.data()[l * k * k..(l + 1) * k * k].to_vec())?;
            total += kl_diag_full(mv.row(l), sv.row(l), av.row(l), &cl)?;
        }
        total
    };
    m.tape()
        .custom(&[m, s, a, c], Tensor::scalar(total), Box::new(KlDiagFullOp))
}

struct KlDiagFullOp;

impl CustomOp for KlDiagFullOp {
    fn name(&self) -> &'static str {
        "kl_diag_full"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let (m, s, a, c) = (inputs[0], inputs[1], inputs[2], inputs[3]);
        let (d, k) = m.dims2().expect("validated in forward");
        let g = grad.item();
        let mut gm = vec![0.0; d * k];
        let mut gs = vec![0.0; d * k];
        let mut ga = vec![0.0; d * k];
        let mut gc = vec![0.0; d * k * k];
        for l in 0..d {
            let cl = SpdMatrix::new(k, c.data()[l * k * k..(l + 1) * k * k].to_vec())
                .expect("validated in forward");
            let inv = cl.inverse().expect("validated in forward");
            let (ml, sl, al) = (m.row(l), s.row(l), a.row(l));
            let delta: Vec<f64> = al.iter().zip(ml).map(|(a, m)| a - m).collect();
            let w: Vec<f64> = (0..k)
                .map(|i| (0..k).map(|j| inv[i * k + j] * delta[j]).sum())
                .collect();
            for i in 0..k {
                gm[l * k + i] = -g * w[i];
                ga[l * k + i] = g * w[i];
                gs[l * k + i] = 0.5 * g * (inv[i * k + i] - 1.0 / sl[i]);
            }
            // ½ (C⁻¹ - C⁻¹ S C⁻¹ - w wᵀ)
            let gcl = &mut gc[l * k * k..(l + 1) * k * k];
            for i in 0..k {
                for j in 0..k {
                    let csc: f64 = (0..k).map(|p| inv[i * k + p] * sl[p] * inv[p * k + j]).sum();
                    gcl[i * k + j] = 0.5 * g * (inv[i * k + j] - csc - w[i] * w[j]);
                }
            }
        }
        vec![
            Tensor::new(m.shape().to_vec(), gm).expect("shape"),
            Tensor::new(s.shape().to_vec(), gs).expect("shape"),
            Tensor::new(a.shape().to_vec(), ga).expect("shape"),
            Tensor::new(c.shape().to_vec(), gc).expect("shape"),
        ]
    }
}
