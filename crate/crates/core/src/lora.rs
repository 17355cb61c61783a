//! Low-rank adapters over a frozen dense weight.
//!
//! A layer's effective weight is `W0 + scale · B·A` with `W0: m×n` frozen,
//! `B: m×r` and `A: r×n` trainable. Rank slice `i` is the pair (column `i` of
//! `B`, row `i` of `A`); no operation here reorders slices, so slice `i` of a
//! truncated or embedded adapter is always slice `i` of the original.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, SeededRng};

/// Frozen full-shape weight shared by the server and every client.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBase {
    weight: Matrix,
}

impl FrozenBase {
    pub fn new(weight: Matrix) -> Self {
        Self { weight }
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weight.shape()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    b: Matrix,
    a: Matrix,
}

impl LoraAdapter {
    pub fn new(b: Matrix, a: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(Error::shape("LoraAdapter::new", b.shape(), a.shape()));
        }
        let rank = b.cols();
        let max = b.rows().min(a.cols());
        if rank > max {
            return Err(Error::InvalidRank {
                op: "LoraAdapter::new",
                rank,
                max,
            });
        }
        Ok(Self { b, a })
    }

    /// `B: m×r`.
    pub fn b(&self) -> &Matrix {
        &self.b
    }

    /// `A: r×n`.
    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// `(m, n)` of the adapted weight.
    pub fn layer_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    /// `B·A`.
    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a).expect("adapter factors chain by construction")
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.b, &mut self.a)
    }

    pub fn into_parts(self) -> (Matrix, Matrix) {
        (self.b, self.a)
    }
}

/// `A ~ N(0, 1/r)`, `B = 0`, so the adapter starts as an exact no-op.
pub fn init_adapter(rng: &mut SeededRng, m: usize, n: usize, r: usize) -> Result<LoraAdapter> {
    check_rank("init_adapter", r, m.min(n))?;
    let a = rng.normal_matrix(r, n, 0.0, (1.0 / r as f64).sqrt());
    LoraAdapter::new(Matrix::zeros(m, r), a)
}

fn check_rank(op: &'static str, rank: usize, max: usize) -> Result<()> {
    if rank == 0 || rank > max {
        return Err(Error::InvalidRank { op, rank, max });
    }
    Ok(())
}

/// `W0 + B·A`.
pub fn effective_weight(base: &FrozenBase, ad: &LoraAdapter) -> Result<Matrix> {
    effective_weight_scaled(base, ad, 1.0)
}

pub fn effective_weight_scaled(base: &FrozenBase, ad: &LoraAdapter, scale: f64) -> Result<Matrix> {
    if base.shape() != ad.layer_shape() {
        return Err(Error::shape("effective_weight", base.shape(), ad.layer_shape()));
    }
    let mut w = base.weight().clone();
    w.add_scaled(scale, &ad.delta())?;
    Ok(w)
}

/// Keeps slices `0..r_new`.
pub fn truncate(ad: &LoraAdapter, r_new: usize) -> Result<LoraAdapter> {
    check_rank("truncate", r_new, ad.rank())?;
    if r_new == ad.rank() {
        return Ok(ad.clone());
    }
    LoraAdapter::new(ad.b.col_block(0, r_new)?, ad.a.row_block(0, r_new)?)
}

/// Appends zero slices up to `r_target`; `B·A` is unchanged.
pub fn embed(ad: &LoraAdapter, r_target: usize) -> Result<LoraAdapter> {
    let (m, n) = ad.layer_shape();
    if r_target < ad.rank() {
        return Err(Error::InvalidRank {
            op: "embed",
            rank: r_target,
            max: m.min(n),
        });
    }
    check_rank("embed", r_target, m.min(n))?;
    let rank = ad.rank();
    let b = Matrix::from_fn(m, r_target, |i, j| if j < rank { ad.b.get(i, j) } else { 0.0 });
    let a = Matrix::from_fn(r_target, n, |i, j| if i < rank { ad.a.get(i, j) } else { 0.0 });
    LoraAdapter::new(b, a)
}

/// Chain rule through `W_eff = W0 + B·A`: returns `(dB, dA)` given `dW_eff`.
/// The base receives no gradient.
pub fn lora_backward(base: &FrozenBase, ad: &LoraAdapter, d_weight: &Matrix) -> Result<(Matrix, Matrix)> {
    if d_weight.shape() != base.shape() || base.shape() != ad.layer_shape() {
        return Err(Error::shape("lora_backward", base.shape(), d_weight.shape()));
    }
    let d_b = d_weight.matmul_t(&ad.a)?;
    let d_a = ad.b.t_matmul(d_weight)?;
    Ok((d_b, d_a))
}

/// A dense layer's weight expressed as frozen base plus adapter.
///
/// `forward` and `backward` never form `W_eff` or `dW_eff`: the input is
/// projected through `B` first, so a batch costs `O(batch·r·(m+n))` on top
/// of the base product.
#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub base: Arc<FrozenBase>,
    pub adapter: LoraAdapter,
    /// Multiplier on `B·A`; 1 unless configured otherwise.
    pub scale: f64,
}

/// Gradients of one adapted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrad {
    pub d_b: Matrix,
    pub d_a: Matrix,
}

impl LoraLinear {
    pub fn new(base: Arc<FrozenBase>, adapter: LoraAdapter, scale: f64) -> Result<Self> {
        if base.shape() != adapter.layer_shape() {
            return Err(Error::shape("LoraLinear::new", base.shape(), adapter.layer_shape()));
        }
        Ok(Self {
            base,
            adapter,
            scale,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.base.shape()
    }

    pub fn effective_weight(&self) -> Matrix {
        effective_weight_scaled(&self.base, &self.adapter, self.scale)
            .expect("shapes checked at construction")
    }

    /// Returns `(x·W_eff, x·B)`; the projection is kept for `backward`.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut out = x.matmul(self.base.weight())?;
        let projected = x.matmul(&self.adapter.b)?;
        out.add_scaled(self.scale, &projected.matmul(&self.adapter.a)?)?;
        Ok((out, projected))
    }

    /// Given the layer input `x`, its projection `x·B` and the output delta,
    /// returns the adapter gradients and, if requested, the input delta.
    pub fn backward(
        &self,
        x: &Matrix,
        projected: &Matrix,
        delta: &Matrix,
        want_input_grad: bool,
    ) -> Result<(AdapterGrad, Option<Matrix>)> {
        // dW_eff = xᵀ·delta, so dB = s·xᵀ·(delta·Aᵀ) and dA = s·(x·B)ᵀ·delta
        let delta_a = delta.matmul_t(&self.adapter.a)?;
        let d_b = x.t_matmul(&delta_a)?.scale(self.scale);
        let d_a = projected.t_matmul(delta)?.scale(self.scale);
        let d_x = if want_input_grad {
            let mut d_x = delta.matmul_t(self.base.weight())?;
            d_x.add_scaled(self.scale, &delta_a.matmul_t(&self.adapter.b)?)?;
            Some(d_x)
        } else {
            None
        };
        Ok((AdapterGrad { d_b, d_a }, d_x))
    }

    pub fn step(&mut self, grad: &AdapterGrad, eta: f64) -> Result<()> {
        let (b, a) = self.adapter.parts_mut();
        b.add_scaled(-eta, &grad.d_b)?;
        a.add_scaled(-eta, &grad.d_a)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_adapter(seed: u64, m: usize, n: usize, r: usize) -> LoraAdapter {
        let mut rng = SeededRng::new(seed, 0);
        LoraAdapter::new(
            rng.normal_matrix(m, r, 0.0, 1.0),
            rng.normal_matrix(r, n, 0.0, 1.0),
        )
        .unwrap()
    }

    fn random_base(seed: u64, m: usize, n: usize) -> FrozenBase {
        FrozenBase::new(SeededRng::new(seed, 1).normal_matrix(m, n, 0.0, 1.0))
    }

    #[test]
    fn init_is_noop() {
        for &(m, n, r) in &[(4, 3, 1), (4, 3, 3), (7, 9, 5), (784, 200, 200)] {
            let base = random_base(1, m, n);
            let ad = init_adapter(&mut SeededRng::new(42, 2), m, n, r).unwrap();
            assert_eq!(ad.rank(), r);
            assert_eq!(effective_weight(&base, &ad).unwrap(), *base.weight());
        }
    }

    #[test]
    fn init_rejects_bad_rank() {
        let mut rng = SeededRng::new(42, 2);
        assert!(matches!(
            init_adapter(&mut rng, 4, 3, 0),
            Err(Error::InvalidRank { .. })
        ));
        assert!(init_adapter(&mut rng, 4, 3, 4).is_err());
    }

    #[test]
    fn rank_one_update_at_origin() {
        let base = random_base(3, 3, 4);
        let mut b = Matrix::zeros(3, 1);
        let mut a = Matrix::zeros(1, 4);
        b.add_scaled(1.0, &Matrix::from_fn(3, 1, |i, _| if i == 0 { 1.0 } else { 0.0 }))
            .unwrap();
        a.add_scaled(1.0, &Matrix::from_fn(1, 4, |_, j| if j == 0 { 1.0 } else { 0.0 }))
            .unwrap();
        let w = effective_weight(&base, &LoraAdapter::new(b, a).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let bump = if (i, j) == (0, 0) { 1.0 } else { 0.0 };
                assert_eq!(w.get(i, j), base.weight().get(i, j) + bump);
            }
        }
    }

    #[test]
    fn effective_weight_matches_direct_computation() {
        let base = random_base(5, 6, 5);
        let ad = random_adapter(6, 6, 5, 3);
        let oracle = Matrix::from_fn(6, 5, |i, j| {
            base.weight().get(i, j) + (0..3).map(|k| ad.b().get(i, k) * ad.a().get(k, j)).sum::<f64>()
        });
        let diff = effective_weight(&base, &ad).unwrap().max_abs_diff(&oracle).unwrap();
        assert!(diff < 1e-12);
        assert!(effective_weight(&random_base(5, 5, 5), &ad).is_err());
    }

    #[test]
    fn truncate_cases() {
        let ad = random_adapter(8, 7, 6, 6);
        assert_eq!(truncate(&ad, 6).unwrap(), ad);
        let one = truncate(&ad, 1).unwrap();
        assert_eq!(one.b().column(0), ad.b().column(0));
        assert_eq!(one.a().row(0), ad.a().row(0));
        assert_eq!(
            truncate(&truncate(&ad, 5).unwrap(), 3).unwrap(),
            truncate(&ad, 3).unwrap()
        );
        assert!(truncate(&ad, 7).is_err());
        assert!(truncate(&ad, 0).is_err());
    }

    #[test]
    fn embed_cases() {
        let base = random_base(9, 6, 5);
        let ad = random_adapter(10, 6, 5, 2);
        let big = embed(&ad, 5).unwrap();
        assert_eq!(big.rank(), 5);
        assert_eq!(
            effective_weight(&base, &big).unwrap(),
            effective_weight(&base, &ad).unwrap()
        );
        for s in 2..5 {
            assert!(big.b().column(s).iter().all(|&v| v == 0.0));
            assert!(big.a().row(s).iter().all(|&v| v == 0.0));
        }
        assert_eq!(truncate(&big, 2).unwrap(), ad);
        assert!(embed(&big, 3).is_err());
        assert!(embed(&ad, 6).is_err());
    }

    #[test]
    fn lora_backward_cases() {
        let base = random_base(11, 5, 4);
        let ad = random_adapter(12, 5, 4, 3);
        let (d_b, d_a) = lora_backward(&base, &ad, &Matrix::zeros(5, 4)).unwrap();
        assert!(d_b.data().iter().all(|&v| v == 0.0));
        assert!(d_a.data().iter().all(|&v| v == 0.0));

        let zero_b = LoraAdapter::new(Matrix::zeros(5, 3), ad.a().clone()).unwrap();
        let dw = SeededRng::new(13, 0).normal_matrix(5, 4, 0.0, 1.0);
        let (d_b, d_a) = lora_backward(&base, &zero_b, &dw).unwrap();
        assert!(d_a.data().iter().all(|&v| v == 0.0));
        assert!(d_b.data().iter().any(|&v| v != 0.0));
        assert!(lora_backward(&base, &ad, &Matrix::zeros(4, 5)).is_err());
    }

    #[test]
    fn factored_backward_matches_dense_chain_rule() {
        let mut rng = SeededRng::new(14, 0);
        let base = Arc::new(random_base(15, 6, 4));
        let ad = random_adapter(16, 6, 4, 3);
        for &scale in &[1.0, 0.5] {
            let layer = LoraLinear::new(base.clone(), ad.clone(), scale).unwrap();
            let x = rng.normal_matrix(5, 6, 0.0, 1.0);
            let delta = rng.normal_matrix(5, 4, 0.0, 1.0);
            let (y, projected) = layer.forward(&x).unwrap();
            let dense_y = x.matmul(&layer.effective_weight()).unwrap();
            assert!(y.max_abs_diff(&dense_y).unwrap() < 1e-12);

            let (grad, d_x) = layer.backward(&x, &projected, &delta, true).unwrap();
            let d_w = x.t_matmul(&delta).unwrap().scale(scale);
            let (d_b, d_a) = lora_backward(&base, &ad, &d_w).unwrap();
            assert!(grad.d_b.max_abs_diff(&d_b).unwrap() < 1e-12);
            assert!(grad.d_a.max_abs_diff(&d_a).unwrap() < 1e-12);
            let dense_dx = delta.matmul_t(&layer.effective_weight()).unwrap();
            assert!(d_x.unwrap().max_abs_diff(&dense_dx).unwrap() < 1e-12);
        }
    }
}
