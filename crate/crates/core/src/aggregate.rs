//! Server-side aggregation: rank-based slice averaging (RBLA), zero-padded
//! averaging (ZP) and FedAvg over same-shape parameters.
//!
//! All entry points sort updates by `client_id` before reducing, so the
//! floating-point summation order never depends on the order in which client
//! results arrived.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lora::{embed, LoraAdapter};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rbla,
    Zp,
    Fft,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Rbla, Method::Zp, Method::Fft];

    pub fn name(self) -> &'static str {
        match self {
            Method::Rbla => "rbla",
            Method::Zp => "zp",
            Method::Fft => "fft",
        }
    }

    pub fn uses_adapters(self) -> bool {
        !matches!(self, Method::Fft)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method `{s}` (valid: rbla, zp, fft)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateWeight {
    Adapter(LoraAdapter),
    Full(Matrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerUpdate {
    pub weight: UpdateWeight,
    pub bias: Matrix,
}

/// What a client sends back after local training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub layers: Vec<LayerUpdate>,
    /// Aggregation weight; the client's training-sample count.
    pub weight: f64,
}

/// Whether a client of rank `rank` owns rank slice `slice`.
#[inline]
pub fn owns_slice(rank: usize, slice: usize) -> bool {
    slice < rank
}

/// `Σ wᵢ·Pᵢ / Σ wᵢ`. A single input is returned unchanged.
pub fn fedavg(params: &[&Matrix], weights: &[f64]) -> Result<Matrix> {
    if params.is_empty() {
        return Err(Error::Empty("fedavg"));
    }
    if params.len() != weights.len() {
        return Err(Error::shape("fedavg weights", (params.len(), 1), (weights.len(), 1)));
    }
    check_weights(weights)?;
    let shape = params[0].shape();
    if let Some(p) = params.iter().find(|p| p.shape() != shape) {
        return Err(Error::shape("fedavg", shape, p.shape()));
    }
    if params.len() == 1 {
        return Ok(params[0].clone());
    }
    let mut acc = vec![0.0; shape.0 * shape.1];
    for (p, &w) in params.iter().zip(weights) {
        for (a, &v) in acc.iter_mut().zip(p.data()) {
            *a += w * v;
        }
    }
    let total: f64 = weights.iter().sum();
    for a in &mut acc {
        *a /= total;
    }
    Matrix::new(shape.0, shape.1, acc)
}

fn check_weights(weights: &[f64]) -> Result<()> {
    match weights.iter().find(|&&w| !(w > 0.0 && w.is_finite())) {
        Some(&w) => Err(Error::NonPositiveWeight(w)),
        None => Ok(()),
    }
}

/// Places `mat` in the top-left corner of a zero `target_rows × target_cols`
/// matrix.
pub fn zero_pad(mat: &Matrix, target_rows: usize, target_cols: usize) -> Result<Matrix> {
    if target_rows < mat.rows() || target_cols < mat.cols() {
        return Err(Error::shape("zero_pad", mat.shape(), (target_rows, target_cols)));
    }
    Ok(Matrix::from_fn(target_rows, target_cols, |i, j| {
        if i < mat.rows() && j < mat.cols() {
            mat.get(i, j)
        } else {
            0.0
        }
    }))
}

fn sorted(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    if updates.is_empty() {
        return Err(Error::Empty("aggregate"));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    if let Some(w) = sorted.windows(2).find(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Defect(format!("duplicate update from client {}", w[0].client_id)));
    }
    check_weights(&sorted.iter().map(|u| u.weight).collect::<Vec<_>>())?;
    Ok(sorted)
}

fn layer_of(u: &ClientUpdate, layer: usize) -> Result<&LayerUpdate> {
    u.layers.get(layer).ok_or_else(|| {
        Error::Defect(format!("client {} has no layer {layer}", u.client_id))
    })
}

/// `(weight, adapter)` pairs for one layer, sorted by client id.
fn adapters(updates: &[ClientUpdate], layer: usize) -> Result<Vec<(f64, &LoraAdapter)>> {
    let sorted = sorted(updates)?;
    let mut out = Vec::with_capacity(sorted.len());
    for u in sorted {
        match &layer_of(u, layer)?.weight {
            UpdateWeight::Adapter(ad) => out.push((u.weight, ad)),
            UpdateWeight::Full(_) => {
                return Err(Error::Defect(format!(
                    "client {} sent a full weight where an adapter was expected",
                    u.client_id
                )))
            }
        }
    }
    let shape = out[0].1.layer_shape();
    if let Some((_, ad)) = out.iter().find(|(_, ad)| ad.layer_shape() != shape) {
        return Err(Error::shape("adapter layer", shape, ad.layer_shape()));
    }
    Ok(out)
}

/// Zero-padded weighted average: every adapter is embedded to the largest
/// rank present, then all factors are averaged with the denominator taken
/// over every client, so slices held by few clients are scaled down.
pub fn zp_aggregate(updates: &[ClientUpdate], layer: usize) -> Result<LoraAdapter> {
    let parts = adapters(updates, layer)?;
    let max_rank = parts.iter().map(|(_, ad)| ad.rank()).max().unwrap_or(0);
    let padded = parts
        .iter()
        .map(|(_, ad)| embed(ad, max_rank))
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = parts.iter().map(|(w, _)| *w).collect();
    let b = fedavg(&padded.iter().map(|ad| ad.b()).collect::<Vec<_>>(), &weights)?;
    let a = fedavg(&padded.iter().map(|ad| ad.a()).collect::<Vec<_>>(), &weights)?;
    LoraAdapter::new(b, a)
}

/// Rank-based aggregation: slice `r` (column `r` of B, row `r` of A) is the
/// weighted mean over only the clients that own it. A slice owned by one
/// client is copied through untouched.
pub fn rbla_aggregate(updates: &[ClientUpdate], layer: usize) -> Result<LoraAdapter> {
    let parts = adapters(updates, layer)?;
    let (m, n) = parts[0].1.layer_shape();
    let max_rank = parts.iter().map(|(_, ad)| ad.rank()).max().unwrap_or(0);

    let mut b = vec![0.0; m * max_rank];
    let mut a = vec![0.0; max_rank * n];
    for r in 0..max_rank {
        let owners: Vec<(f64, &LoraAdapter)> = parts
            .iter()
            .filter(|(_, ad)| owns_slice(ad.rank(), r))
            .copied()
            .collect();
        match owners.as_slice() {
            [] => {
                return Err(Error::Defect(format!(
                    "layer {layer}: rank slice {r} has no contributing client"
                )))
            }
            [(_, ad)] => {
                for i in 0..m {
                    b[i * max_rank + r] = ad.b().get(i, r);
                }
                a[r * n..(r + 1) * n].copy_from_slice(ad.a().row(r));
            }
            _ => {
                let total: f64 = owners.iter().map(|(w, _)| w).sum();
                for i in 0..m {
                    let s: f64 = owners.iter().map(|(w, ad)| w * ad.b().get(i, r)).sum();
                    b[i * max_rank + r] = s / total;
                }
                for j in 0..n {
                    let s: f64 = owners.iter().map(|(w, ad)| w * ad.a().get(r, j)).sum();
                    a[r * n + j] = s / total;
                }
            }
        }
    }
    LoraAdapter::new(Matrix::new(m, max_rank, b)?, Matrix::new(max_rank, n, a)?)
}

/// Writes the slices of `fresh` over the leading slices of `previous`.
/// Slices beyond `fresh.rank()` had no contributor this round and keep their
/// previous value.
pub fn overlay_slices(previous: &LoraAdapter, fresh: &LoraAdapter) -> Result<LoraAdapter> {
    if previous.layer_shape() != fresh.layer_shape() {
        return Err(Error::shape("overlay_slices", previous.layer_shape(), fresh.layer_shape()));
    }
    let (rank, keep) = (fresh.rank(), previous.rank());
    if rank > keep {
        return Err(Error::InvalidRank {
            op: "overlay_slices",
            rank,
            max: keep,
        });
    }
    if rank == keep {
        return Ok(fresh.clone());
    }
    let (m, n) = previous.layer_shape();
    let b = Matrix::from_fn(m, keep, |i, j| {
        if j < rank {
            fresh.b().get(i, j)
        } else {
            previous.b().get(i, j)
        }
    });
    let a = Matrix::from_fn(keep, n, |i, j| {
        if i < rank {
            fresh.a().get(i, j)
        } else {
            previous.a().get(i, j)
        }
    });
    LoraAdapter::new(b, a)
}

/// Weighted average of the layer's biases (present in full on every client).
pub fn aggregate_biases(updates: &[ClientUpdate], layer: usize) -> Result<Matrix> {
    let sorted = sorted(updates)?;
    let biases = sorted
        .iter()
        .map(|u| layer_of(u, layer).map(|l| &l.bias))
        .collect::<Result<Vec<_>>>()?;
    let weights: Vec<f64> = sorted.iter().map(|u| u.weight).collect();
    fedavg(&biases, &weights)
}

/// FedAvg over full weight matrices (full fine-tune baseline).
pub fn aggregate_full(updates: &[ClientUpdate], layer: usize) -> Result<Matrix> {
    let sorted = sorted(updates)?;
    let mut params = Vec::with_capacity(sorted.len());
    for u in &sorted {
        match &layer_of(u, layer)?.weight {
            UpdateWeight::Full(w) => params.push(w),
            UpdateWeight::Adapter(_) => {
                return Err(Error::Defect(format!(
                    "client {} sent an adapter where a full weight was expected",
                    u.client_id
                )))
            }
        }
    }
    let weights: Vec<f64> = sorted.iter().map(|u| u.weight).collect();
    fedavg(&params, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SeededRng;
    use proptest::prelude::*;

    fn update(client_id: usize, weight: f64, ad: LoraAdapter) -> ClientUpdate {
        let n = ad.layer_shape().1;
        ClientUpdate {
            client_id,
            weight,
            layers: vec![LayerUpdate {
                weight: UpdateWeight::Adapter(ad),
                bias: Matrix::zeros(1, n),
            }],
        }
    }

    fn constant_adapter(m: usize, n: usize, r: usize, v: f64) -> LoraAdapter {
        LoraAdapter::new(Matrix::filled(m, r, v), Matrix::filled(r, n, v)).unwrap()
    }

    fn random_adapter(rng: &mut SeededRng, m: usize, n: usize, r: usize) -> LoraAdapter {
        LoraAdapter::new(
            rng.normal_matrix(m, r, 0.0, 1.0),
            rng.normal_matrix(r, n, 0.0, 1.0),
        )
        .unwrap()
    }

    fn slice_b(ad: &LoraAdapter, r: usize) -> Vec<f64> {
        ad.b().column(r)
    }

    fn slice_a(ad: &LoraAdapter, r: usize) -> Vec<f64> {
        ad.a().row(r).to_vec()
    }

    #[test]
    fn fedavg_cases() {
        let m = Matrix::from_rows(&[[0.3, -1.7]]).unwrap();
        assert_eq!(fedavg(&[&m], &[7.0]).unwrap(), m);

        let zeros = Matrix::zeros(2, 2);
        let ones = Matrix::filled(2, 2, 1.0);
        assert_eq!(
            fedavg(&[&zeros, &ones], &[1.0, 1.0]).unwrap(),
            Matrix::filled(2, 2, 0.5)
        );

        let p: Vec<Matrix> = (0..3)
            .map(|k| Matrix::from_fn(2, 3, |i, j| (k * 10 + i * 3 + j) as f64 * 0.7 - 4.0))
            .collect();
        let refs: Vec<&Matrix> = p.iter().collect();
        let got = fedavg(&refs, &[1.0, 2.0, 3.0]).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let expected =
                    (p[0].get(i, j) + 2.0 * p[1].get(i, j) + 3.0 * p[2].get(i, j)) / 6.0;
                assert!((got.get(i, j) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fedavg_errors() {
        let m = Matrix::zeros(2, 2);
        assert!(matches!(fedavg(&[], &[]), Err(Error::Empty(_))));
        assert!(matches!(
            fedavg(&[&m, &Matrix::zeros(2, 3)], &[1.0, 1.0]),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            fedavg(&[&m, &m], &[1.0, 0.0]),
            Err(Error::NonPositiveWeight(_))
        ));
        assert!(fedavg(&[&m], &[-2.0]).is_err());
    }

    #[test]
    fn zero_pad_cases() {
        let p = zero_pad(&Matrix::filled(2, 3, 1.0), 3, 3).unwrap();
        assert_eq!(p.row(0), &[1.0, 1.0, 1.0]);
        assert_eq!(p.row(1), &[1.0, 1.0, 1.0]);
        assert_eq!(p.row(2), &[0.0, 0.0, 0.0]);

        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(zero_pad(&m, 2, 2).unwrap(), m);

        let five = Matrix::from_rows(&[[5.0]]).unwrap();
        assert_eq!(
            zero_pad(&five, 2, 2).unwrap(),
            Matrix::from_rows(&[[5.0, 0.0], [0.0, 0.0]]).unwrap()
        );
        assert!(zero_pad(&m, 1, 2).is_err());
    }

    #[test]
    fn dilution_two_clients() {
        let updates = vec![
            update(1, 1.0, constant_adapter(4, 4, 2, 1.0)),
            update(2, 1.0, constant_adapter(4, 4, 3, 1.0)),
        ];
        let zp = zp_aggregate(&updates, 0).unwrap();
        let rbla = rbla_aggregate(&updates, 0).unwrap();
        for r in 0..2 {
            assert!(slice_b(&zp, r).iter().all(|&v| v == 1.0));
            assert!(slice_b(&rbla, r).iter().all(|&v| v == 1.0));
        }
        assert!(slice_b(&zp, 2).iter().all(|&v| v == 0.5));
        assert!(slice_a(&zp, 2).iter().all(|&v| v == 0.5));
        assert!(slice_b(&rbla, 2).iter().all(|&v| v == 1.0));
        assert!(slice_a(&rbla, 2).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zp_one_low_rank_among_three() {
        let updates = vec![
            update(1, 1.0, constant_adapter(3, 3, 1, 1.0)),
            update(2, 1.0, constant_adapter(3, 3, 3, 1.0)),
            update(3, 1.0, constant_adapter(3, 3, 3, 1.0)),
            update(4, 1.0, constant_adapter(3, 3, 3, 1.0)),
        ];
        // three rank-3 clients and one rank-1 client: slices 1,2 get 3/4
        let zp = zp_aggregate(&updates, 0).unwrap();
        for r in 1..3 {
            assert!(slice_b(&zp, r).iter().all(|&v| (v - 0.75).abs() < 1e-15));
        }
        // one rank-1 among two rank-3 (three clients total): 2/3
        let zp = zp_aggregate(&updates[..3], 0).unwrap();
        for r in 1..3 {
            assert!(slice_b(&zp, r).iter().all(|&v| (v - 2.0 / 3.0).abs() < 1e-15));
            assert!(slice_a(&zp, r).iter().all(|&v| (v - 2.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn rbla_three_clients_mixed_ranks() {
        let mut rng = SeededRng::new(1, 0);
        let ads: Vec<LoraAdapter> = (1..=3).map(|r| random_adapter(&mut rng, 4, 5, r)).collect();
        let updates: Vec<ClientUpdate> = ads
            .iter()
            .enumerate()
            .map(|(i, ad)| update(i + 1, (i + 1) as f64, ad.clone()))
            .collect();
        let agg = rbla_aggregate(&updates, 0).unwrap();
        assert_eq!(agg.rank(), 3);
        for i in 0..4 {
            let s0 = (ads[0].b().get(i, 0) + 2.0 * ads[1].b().get(i, 0) + 3.0 * ads[2].b().get(i, 0)) / 6.0;
            assert!((agg.b().get(i, 0) - s0).abs() < 1e-12);
            let s1 = (2.0 * ads[1].b().get(i, 1) + 3.0 * ads[2].b().get(i, 1)) / 5.0;
            assert!((agg.b().get(i, 1) - s1).abs() < 1e-12);
        }
        for j in 0..5 {
            let s1 = (2.0 * ads[1].a().get(1, j) + 3.0 * ads[2].a().get(1, j)) / 5.0;
            assert!((agg.a().get(1, j) - s1).abs() < 1e-12);
        }
        assert_eq!(slice_b(&agg, 2), slice_b(&ads[2], 2));
        assert_eq!(slice_a(&agg, 2), slice_a(&ads[2], 2));
    }

    #[test]
    fn same_rank_methods_collapse() {
        let mut rng = SeededRng::new(2, 0);
        let updates: Vec<ClientUpdate> = (0..3)
            .map(|i| update(i, 1.0 + i as f64, random_adapter(&mut rng, 5, 4, 3)))
            .collect();
        let rbla = rbla_aggregate(&updates, 0).unwrap();
        let zp = zp_aggregate(&updates, 0).unwrap();
        assert!(rbla.b().max_abs_diff(zp.b()).unwrap() < 1e-12);
        assert!(rbla.a().max_abs_diff(zp.a()).unwrap() < 1e-12);
    }

    #[test]
    fn biases_average() {
        let with_bias = |id: usize, w: f64, b: f64| ClientUpdate {
            client_id: id,
            weight: w,
            layers: vec![LayerUpdate {
                weight: UpdateWeight::Full(Matrix::zeros(2, 2)),
                bias: Matrix::filled(1, 2, b),
            }],
        };
        let single = [with_bias(1, 3.0, 1.25)];
        assert_eq!(aggregate_biases(&single, 0).unwrap(), Matrix::filled(1, 2, 1.25));
        let pair = [with_bias(1, 1.0, 0.0), with_bias(2, 1.0, 2.0)];
        assert_eq!(aggregate_biases(&pair, 0).unwrap(), Matrix::filled(1, 2, 1.0));
        let skewed = [with_bias(1, 1.0, 0.0), with_bias(2, 3.0, 4.0)];
        assert_eq!(aggregate_biases(&skewed, 0).unwrap(), Matrix::filled(1, 2, 3.0));
        assert!(rbla_aggregate(&pair, 0).is_err());
        assert!(aggregate_full(&pair, 0).is_ok());
    }

    #[test]
    fn aggregation_errors() {
        assert!(matches!(rbla_aggregate(&[], 0), Err(Error::Empty(_))));
        let mixed = vec![
            update(1, 1.0, constant_adapter(3, 3, 1, 1.0)),
            update(2, 1.0, constant_adapter(3, 4, 1, 1.0)),
        ];
        assert!(matches!(rbla_aggregate(&mixed, 0), Err(Error::Shape { .. })));
        assert!(zp_aggregate(&mixed, 0).is_err());
        let dup = vec![
            update(1, 1.0, constant_adapter(3, 3, 1, 1.0)),
            update(1, 1.0, constant_adapter(3, 3, 1, 1.0)),
        ];
        assert!(rbla_aggregate(&dup, 0).is_err());
        let zero_w = vec![update(1, 0.0, constant_adapter(3, 3, 1, 1.0))];
        assert!(matches!(
            rbla_aggregate(&zero_w, 0),
            Err(Error::NonPositiveWeight(_))
        ));
        assert!(rbla_aggregate(&mixed, 1).is_err());
    }

    #[test]
    fn overlay_keeps_uncovered_slices() {
        let mut rng = SeededRng::new(3, 0);
        let prev = random_adapter(&mut rng, 4, 5, 4);
        let fresh = random_adapter(&mut rng, 4, 5, 2);
        let out = overlay_slices(&prev, &fresh).unwrap();
        assert_eq!(out.rank(), 4);
        for r in 0..2 {
            assert_eq!(slice_b(&out, r), slice_b(&fresh, r));
            assert_eq!(slice_a(&out, r), slice_a(&fresh, r));
        }
        for r in 2..4 {
            assert_eq!(slice_b(&out, r), slice_b(&prev, r));
            assert_eq!(slice_a(&out, r), slice_a(&prev, r));
        }
        assert!(overlay_slices(&fresh, &prev).is_err());
        assert_eq!(overlay_slices(&prev, &prev).unwrap(), prev);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("rbla".parse::<Method>().unwrap(), Method::Rbla);
        let err = "adam".parse::<Method>().unwrap_err();
        assert!(err.contains("rbla") && err.contains("zp") && err.contains("fft"));
    }

    fn random_updates(seed: u64, n_clients: usize, m: usize, n: usize) -> Vec<ClientUpdate> {
        let mut rng = SeededRng::new(seed, 0);
        let max = m.min(n);
        (0..n_clients)
            .map(|i| {
                let r = 1 + (rng.next_u64() as usize) % max;
                let w = 1.0 + (rng.next_u64() % 100) as f64;
                update(i * 3 + 1, w, random_adapter(&mut rng, m, n, r))
            })
            .collect()
    }

    proptest! {
        #[test]
        fn rbla_is_convex_per_slice(seed in any::<u64>(), k in 1usize..5, m in 1usize..7, n in 1usize..7) {
            let updates = random_updates(seed, k, m, n);
            let agg = rbla_aggregate(&updates, 0).unwrap();
            let ads: Vec<&LoraAdapter> = updates.iter().map(|u| match &u.layers[0].weight {
                UpdateWeight::Adapter(ad) => ad,
                UpdateWeight::Full(_) => unreachable!(),
            }).collect();
            for r in 0..agg.rank() {
                let owners: Vec<&&LoraAdapter> = ads.iter().filter(|ad| ad.rank() > r).collect();
                for i in 0..m {
                    let vals: Vec<f64> = owners.iter().map(|ad| ad.b().get(i, r)).collect();
                    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let v = agg.b().get(i, r);
                    let tol = 1e-12 * lo.abs().max(hi.abs()).max(1.0);
                    prop_assert!(v >= lo - tol && v <= hi + tol);
                    if owners.len() == 1 {
                        prop_assert_eq!(v.to_bits(), owners[0].b().get(i, r).to_bits());
                    }
                }
            }
        }

        #[test]
        fn aggregation_is_order_and_scale_invariant(seed in any::<u64>(), k in 1usize..5, c in 0.01f64..100.0) {
            let updates = random_updates(seed, k, 5, 4);
            let mut shuffled = updates.clone();
            shuffled.reverse();
            let scaled: Vec<ClientUpdate> = updates
                .iter()
                .map(|u| ClientUpdate { weight: u.weight * c, ..u.clone() })
                .collect();
            for agg in [rbla_aggregate, zp_aggregate] {
                let base = agg(&updates, 0).unwrap();
                prop_assert_eq!(&base, &agg(&shuffled, 0).unwrap());
                let s = agg(&scaled, 0).unwrap();
                prop_assert!(base.b().max_abs_diff(s.b()).unwrap() < 1e-12);
                prop_assert!(base.a().max_abs_diff(s.a()).unwrap() < 1e-12);
            }
        }

        #[test]
        fn zp_dilution_law(p in 1usize..5, extra in 1usize..4, w1 in 1.0f64..50.0, w2 in 1.0f64..50.0) {
            let m = p + extra;
            let updates = vec![
                update(1, w1, constant_adapter(m, m, p, 2.5)),
                update(2, w2, constant_adapter(m, m, m, 2.5)),
            ];
            let zp = zp_aggregate(&updates, 0).unwrap();
            let rbla = rbla_aggregate(&updates, 0).unwrap();
            for r in p..m {
                let factor = w2 / (w1 + w2);
                for (z, b) in slice_b(&zp, r).iter().zip(slice_b(&rbla, r)) {
                    prop_assert!((z - factor * b).abs() < 1e-12);
                }
            }
        }
    }
}
