//! Compact self-attention along the group axis and its equivariant
//! (circulant and block-circulant) parameterisations.
//!
//! For a response vector `x ∈ ℝⁿ` and attention matrix `Ã`:
//!
//! ```text
//! a = x · Ã              (row vector times matrix)
//! ã = softmax(a / n)
//! x̂ = (ã / max ã) ⊙ x
//! ```
//!
//! The structured kinds tie the entries of `Ã` to a short parameter vector
//! `c` indexed by group elements: `Ã[h][k] = c[k⁻¹·h]`. For the cyclic
//! group that is the classic circulant `Ã[i][j] = c[(i − j) mod n]`; for the
//! rotation-mirror group it is a 2×2 block matrix of circulant blocks. Such
//! matrices are exactly the ones commuting with every group-axis
//! permutation, which is what makes the attention equivariant.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::gconv::FeatureMap;
use crate::group::GroupSpec;
use crate::tensor::{softmax_slice, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionKind {
    /// Unconstrained `n × n` matrix. Not equivariant.
    Full,
    /// Circulant matrix from one length-`n` vector.
    Circulant,
    /// Rotation-mirror block structure from two length-`n/2` vectors.
    BlockCirculant,
}

/// One attention instance (per layer and output channel).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    kind: AttentionKind,
    n: usize,
    values: Tensor,
}

impl AttentionParams {
    pub fn full(a_tilde: Tensor) -> Result<Self> {
        let &[n, n2] = a_tilde.shape() else {
            return shape_err(format!("full attention needs an [n,n] matrix, got {:?}", a_tilde.shape()));
        };
        if n != n2 || n == 0 {
            return shape_err(format!("full attention matrix must be square and non-empty, got {n}x{n2}"));
        }
        let values = a_tilde.reshape(&[n * n])?;
        Ok(Self { kind: AttentionKind::Full, n, values })
    }

    pub fn circulant(a_c: Tensor) -> Result<Self> {
        if a_c.ndim() != 1 || a_c.is_empty() {
            return shape_err(format!("circulant attention needs a non-empty vector, got {:?}", a_c.shape()));
        }
        Ok(Self { kind: AttentionKind::Circulant, n: a_c.len(), values: a_c })
    }

    pub fn block_circulant(a_c1: Tensor, a_c2: Tensor) -> Result<Self> {
        if a_c1.ndim() != 1 || a_c1.is_empty() || a_c1.shape() != a_c2.shape() {
            return shape_err(format!(
                "block-circulant attention needs two equal-length vectors, got {:?} and {:?}",
                a_c1.shape(),
                a_c2.shape()
            ));
        }
        let r = a_c1.len();
        let mut values = a_c1.into_data();
        values.extend_from_slice(a_c2.data());
        Ok(Self {
            kind: AttentionKind::BlockCirculant,
            n: 2 * r,
            values: Tensor::from_vec(values),
        })
    }

    fn zeros(kind: AttentionKind, n: usize) -> Result<Self> {
        match kind {
            AttentionKind::Full => Self::full(Tensor::zeros(&[n, n])),
            AttentionKind::Circulant => Self::circulant(Tensor::zeros(&[n])),
            AttentionKind::BlockCirculant => {
                if n % 2 != 0 {
                    return Err(Error::InvalidArgument(format!("block-circulant size {n} is odd")));
                }
                Self::block_circulant(Tensor::zeros(&[n / 2]), Tensor::zeros(&[n / 2]))
            }
        }
    }

    fn set_unit_diagonal(&mut self) {
        let tie = self.tying();
        for i in 0..self.n {
            self.values.data_mut()[tie[i * self.n + i]] = 1.0;
        }
    }

    /// Random initialisation with `diag(Ã) = 1`: parameters are drawn from
    /// `N(0, std²)` and the entry that feeds the diagonal is then set to one.
    pub fn init<R: Rng + ?Sized>(kind: AttentionKind, n: usize, std: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(kind, n)?;
        let len = p.values.len();
        p.values = Tensor::randn(&[len], std, rng);
        p.set_unit_diagonal();
        Ok(p)
    }

    /// `Ã = I` in the requested parameterisation.
    pub fn identity(kind: AttentionKind, n: usize) -> Result<Self> {
        let mut p = Self::zeros(kind, n)?;
        p.set_unit_diagonal();
        Ok(p)
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// The learnable vector(s): `Ã` flattened, `a_c`, or `a_c1 ++ a_c2`.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Tensor {
        &mut self.values
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    /// For every entry of `Ã` (row-major), the index of the parameter it reads.
    pub fn tying(&self) -> Vec<usize> {
        let n = self.n;
        match self.kind {
            AttentionKind::Full => (0..n * n).collect(),
            AttentionKind::Circulant => regular_tying(&GroupSpec::rot(n).expect("n > 0")),
            AttentionKind::BlockCirculant => regular_tying(&GroupSpec::rot_mirror(n / 2).expect("n > 0")),
        }
    }

    pub fn materialize(&self) -> Tensor {
        let tie = self.tying();
        let data = tie.iter().map(|&t| self.values.data()[t]).collect();
        Tensor::new(vec![self.n, self.n], data).expect("n*n entries")
    }

    /// Sums a gradient with respect to the materialised matrix onto the
    /// parameters it was built from.
    pub fn fold_grad(&self, grad_matrix: &Tensor) -> Tensor {
        let mut g = Tensor::zeros(self.values.shape());
        for (e, &t) in self.tying().iter().enumerate() {
            g.data_mut()[t] += grad_matrix.data()[e];
        }
        g
    }
}

/// `tie[h·n + k] = index(k⁻¹·h)`.
fn regular_tying(spec: &GroupSpec) -> Vec<usize> {
    let n = spec.group_size();
    let mut tie = vec![0; n * n];
    for h in 0..n {
        for k in 0..n {
            tie[h * n + k] = spec.mul_index(spec.inverse_index(k), h);
        }
    }
    tie
}

/// Circulant matrix whose first column is `c`; column `j` is `c` rolled
/// down by `j` places, so `C[i][j] = c[(i − j) mod n]`.
pub fn build_circulant(c: &Tensor) -> Result<Tensor> {
    Ok(AttentionParams::circulant(c.clone())?.materialize())
}

/// `[[C(c1), C(c2)ᵀ], [C(c2), C(c1)ᵀ]]`: circulant blocks arranged so the
/// matrix commutes with every rotation-mirror permutation of the group axis.
pub fn build_block_circulant(c1: &Tensor, c2: &Tensor) -> Result<Tensor> {
    Ok(AttentionParams::block_circulant(c1.clone(), c2.clone())?.materialize())
}

/// Intermediate quantities of one attention evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWorkspace {
    /// `x · Ã`
    pub a: Vec<f64>,
    /// `softmax(a / n)`
    pub a_tilde: Vec<f64>,
    pub scale: f64,
    /// First index attaining `max ã`.
    pub argmax: usize,
    /// `ã / max ã`
    pub weights: Vec<f64>,
}

impl AttentionWorkspace {
    pub fn compute(x: &[f64], a_tilde_matrix: &[f64]) -> Self {
        let n = x.len();
        let mut a = vec![0.0; n];
        for (i, &xi) in x.iter().enumerate() {
            let row = &a_tilde_matrix[i * n..(i + 1) * n];
            for (aj, r) in a.iter_mut().zip(row) {
                *aj += xi * r;
            }
        }
        let scale = 1.0 / n as f64;
        let scaled: Vec<f64> = a.iter().map(|v| v * scale).collect();
        let a_tilde = softmax_slice(&scaled);
        let mut argmax = 0;
        for (j, &v) in a_tilde.iter().enumerate() {
            if v > a_tilde[argmax] {
                argmax = j;
            }
        }
        let mx = a_tilde[argmax];
        let weights = a_tilde.iter().map(|v| v / mx).collect();
        Self { a, a_tilde, scale, argmax, weights }
    }

    pub fn output(&self, x: &[f64]) -> Vec<f64> {
        self.weights.iter().zip(x).map(|(w, v)| w * v).collect()
    }

    /// Returns `∂L/∂a` and accumulates the direct `∂L/∂x` term into `grad_x`.
    fn backward(&self, x: &[f64], upstream: &[f64], grad_x: &mut [f64]) -> Vec<f64> {
        let mut gwsum = 0.0;
        let mut ga: Vec<f64> = Vec::with_capacity(x.len());
        for j in 0..x.len() {
            grad_x[j] += upstream[j] * self.weights[j];
            let t = upstream[j] * x[j] * self.weights[j];
            gwsum += t;
            ga.push(t * self.scale);
        }
        ga[self.argmax] -= gwsum * self.scale;
        ga
    }
}

fn check_attend(x: &Tensor, a_tilde: &Tensor) -> Result<usize> {
    let n = x.len();
    if x.ndim() != 1 || n == 0 {
        return shape_err(format!("attention input must be a non-empty vector, got {:?}", x.shape()));
    }
    if a_tilde.shape() != [n, n] {
        return shape_err(format!(
            "attention matrix has shape {:?}, input needs [{n},{n}]",
            a_tilde.shape()
        ));
    }
    Ok(n)
}

/// Compact self-attention of a single group-axis vector.
pub fn compact_attend(x: &Tensor, a_tilde: &Tensor) -> Result<Tensor> {
    check_attend(x, a_tilde)?;
    let ws = AttentionWorkspace::compute(x.data(), a_tilde.data());
    Ok(Tensor::from_vec(ws.output(x.data())))
}

/// Vector-Jacobian product of [`compact_attend`] with respect to `x` and the
/// materialised matrix. The max normalisation is differentiated through the
/// first argmax entry.
pub fn attend_backward_matrix(x: &Tensor, a_tilde: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let n = check_attend(x, a_tilde)?;
    if upstream.shape() != x.shape() {
        return shape_err("attention upstream gradient shape differs from input");
    }
    let mut gx = vec![0.0; n];
    let mut gm = vec![0.0; n * n];
    let ws = AttentionWorkspace::compute(x.data(), a_tilde.data());
    accumulate_backward(&ws, x.data(), a_tilde.data(), upstream.data(), &mut gx, &mut gm);
    Ok((Tensor::from_vec(gx), Tensor::new(vec![n, n], gm)?))
}

/// As [`attend_backward_matrix`], with the matrix gradient folded onto the
/// tied parameters of `params`.
pub fn attend_backward(x: &Tensor, params: &AttentionParams, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    let (gx, gm) = attend_backward_matrix(x, &params.materialize(), upstream)?;
    Ok((gx, params.fold_grad(&gm)))
}

fn accumulate_backward(
    ws: &AttentionWorkspace,
    x: &[f64],
    a_tilde: &[f64],
    upstream: &[f64],
    grad_x: &mut [f64],
    grad_matrix: &mut [f64],
) {
    let n = x.len();
    let ga = ws.backward(x, upstream, grad_x);
    for i in 0..n {
        let row = &a_tilde[i * n..(i + 1) * n];
        grad_x[i] += row.iter().zip(&ga).map(|(r, g)| r * g).sum::<f64>();
        let grow = &mut grad_matrix[i * n..(i + 1) * n];
        for (gm, g) in grow.iter_mut().zip(&ga) {
            *gm += x[i] * g;
        }
    }
}

fn check_co_attentive(fmap: &FeatureMap, params: &[AttentionParams]) -> Result<()> {
    if params.len() != fmap.channels() {
        return shape_err(format!(
            "{} attention instances for {} channels",
            params.len(),
            fmap.channels()
        ));
    }
    if let Some(p) = params.iter().find(|p| p.n() != fmap.group_size()) {
        return shape_err(format!(
            "attention instance of size {} on a group axis of length {}",
            p.n(),
            fmap.group_size()
        ));
    }
    Ok(())
}

/// Applies channel `λ`'s attention instance to the group-axis vector at
/// every batch element and spatial position.
pub fn co_attentive_map(fmap: &FeatureMap, params: &[AttentionParams]) -> Result<FeatureMap> {
    check_co_attentive(fmap, params)?;
    let (b, g, lam, plane) = (fmap.batch(), fmap.group_size(), fmap.channels(), fmap.height() * fmap.width());
    let src = fmap.data().data();
    let mut out = vec![0.0; src.len()];
    let mut x = vec![0.0; g];
    for (l, p) in params.iter().enumerate() {
        let m = p.materialize();
        for bi in 0..b {
            for u in 0..plane {
                let idx = |gi: usize| ((bi * g + gi) * lam + l) * plane + u;
                for (gi, xv) in x.iter_mut().enumerate() {
                    *xv = src[idx(gi)];
                }
                let ws = AttentionWorkspace::compute(&x, m.data());
                for gi in 0..g {
                    out[idx(gi)] = ws.weights[gi] * x[gi];
                }
            }
        }
    }
    FeatureMap::new(Tensor::new(fmap.data().shape().to_vec(), out)?, fmap.spec().clone())
}

/// Gradients of [`co_attentive_map`]: `(∂L/∂input, ∂L/∂params per channel)`.
pub fn co_attentive_backward(
    fmap: &FeatureMap,
    params: &[AttentionParams],
    upstream: &Tensor,
) -> Result<(Tensor, Vec<Tensor>)> {
    check_co_attentive(fmap, params)?;
    if upstream.shape() != fmap.data().shape() {
        return shape_err("co-attentive upstream gradient shape differs from input");
    }
    let (b, g, lam, plane) = (fmap.batch(), fmap.group_size(), fmap.channels(), fmap.height() * fmap.width());
    let src = fmap.data().data();
    let up = upstream.data();
    let mut gin = vec![0.0; src.len()];
    let mut grads = Vec::with_capacity(lam);
    let (mut x, mut u_vec, mut gx) = (vec![0.0; g], vec![0.0; g], vec![0.0; g]);
    for (l, p) in params.iter().enumerate() {
        let m = p.materialize();
        let mut gm = vec![0.0; g * g];
        for bi in 0..b {
            for u in 0..plane {
                let idx = |gi: usize| ((bi * g + gi) * lam + l) * plane + u;
                for gi in 0..g {
                    x[gi] = src[idx(gi)];
                    u_vec[gi] = up[idx(gi)];
                }
                gx.iter_mut().for_each(|v| *v = 0.0);
                let ws = AttentionWorkspace::compute(&x, m.data());
                accumulate_backward(&ws, &x, m.data(), &u_vec, &mut gx, &mut gm);
                for gi in 0..g {
                    gin[idx(gi)] += gx[gi];
                }
            }
        }
        grads.push(p.fold_grad(&Tensor::new(vec![g, g], gm)?));
    }
    Ok((Tensor::new(fmap.data().shape().to_vec(), gin)?, grads))
}

/// Extra learnable reals one attention instance adds.
pub fn attention_param_count(kind: AttentionKind, n: usize) -> usize {
    match kind {
        AttentionKind::Full => n * n,
        AttentionKind::Circulant => n,
        AttentionKind::BlockCirculant => n,
    }
}
