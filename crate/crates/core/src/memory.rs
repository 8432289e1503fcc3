//! Source-key / target-value memory pair.
//!
//! The source-key memory is addressed by source features and the target-value
//! memory is addressed by target features. Reading the value memory with the
//! *source* addressing recalls target features without any target input.
//!
//! The eager functions here operate on plain tensors. The [`tape`] submodule
//! has the same operations recorded on a [`Graph`](crate::graph::Graph) for
//! training.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::numeric::validate_distribution;
use crate::tensor::{norm, Tensor};

/// Default scale applied to cosine similarities before the softmax.
pub const DEFAULT_SCALE: f64 = 16.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryPair {
    /// `N×C`, addressed by source features.
    pub key: Tensor,
    /// `N×D`, addressed by target features and read for recall.
    pub value: Tensor,
    pub scale: f64,
}

impl MemoryPair {
    pub fn new(key: Tensor, value: Tensor, scale: f64) -> Result<Self> {
        if key.rows() != value.rows() || key.rows() == 0 {
            return Err(Error::dim("MemoryPair", key.rows().max(1), value.rows()));
        }
        if !(scale > 0.0) {
            return Err(Error::domain("MemoryPair", format!("scale must be positive, got {scale}")));
        }
        Ok(Self { key, value, scale })
    }

    /// Rows drawn from a spherical Gaussian and normalized to unit length.
    pub fn init<R: Rng + ?Sized>(
        slots: usize,
        key_dim: usize,
        value_dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(
            unit_rows(slots, key_dim, rng),
            unit_rows(slots, value_dim, rng),
            scale,
        )
    }

    pub fn slot_count(&self) -> usize {
        self.key.rows()
    }
}

pub(crate) fn unit_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::randn(rows, cols, 1.0, rng);
    for i in 0..rows {
        let row = t.row_mut(i);
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    t
}

/// Addressing weights over the memory slots for one temporal step.
#[derive(Clone, Debug, PartialEq)]
pub struct AddressingVector(Vec<f64>);

impl AddressingVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        validate_distribution("AddressingVector", &weights)?;
        Ok(Self(weights))
    }

    pub fn one_hot(slots: usize, index: usize) -> Self {
        let mut w = vec![0.0; slots];
        w[index] = 1.0;
        Self(w)
    }

    pub fn uniform(slots: usize) -> Self {
        Self(vec![1.0 / slots as f64; slots])
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn rows_of(t: &Tensor) -> Vec<AddressingVector> {
        (0..t.rows()).map(|i| AddressingVector(t.row(i).to_vec())).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BridgeOutput {
    pub a_src: Vec<AddressingVector>,
    pub a_tgt: Option<Vec<AddressingVector>>,
    /// `T×D`: value memory read with the source addressing.
    pub recalled: Tensor,
    /// `T×D`: value memory read with the target addressing.
    pub reconstructed: Option<Tensor>,
}

/// `softmax(r · cos(M_i, query))` over the rows of `memory`.
pub fn address(memory: &Tensor, query: &[f64], r: f64) -> Result<AddressingVector> {
    if query.len() != memory.cols() {
        return Err(Error::dim("address", memory.cols(), query.len()));
    }
    let mut g = Graph::new();
    let m = g.constant(memory.clone());
    let q = g.constant(Tensor::row_vector(query.to_vec()));
    let a = tape::address(&mut g, m, q, r)?;
    Ok(AddressingVector(g.value(a).data().to_vec()))
}

fn read(op: &'static str, a: &AddressingVector, value_memory: &Tensor) -> Result<Vec<f64>> {
    if a.len() != value_memory.rows() {
        return Err(Error::dim(op, value_memory.rows(), a.len()));
    }
    validate_distribution(op, a.weights())?;
    let w = Tensor::row_vector(a.weights().to_vec());
    Ok(w.matmul(value_memory)?.into_data())
}

/// Target-addressed read of the value memory.
pub fn reconstruct(a_tgt: &AddressingVector, value_memory: &Tensor) -> Result<Vec<f64>> {
    read("reconstruct", a_tgt, value_memory)
}

/// Source-addressed read of the value memory.
pub fn recall(a_src: &AddressingVector, value_memory: &Tensor) -> Result<Vec<f64>> {
    read("recall", a_src, value_memory)
}

/// `Σ_j ||f_tgt^j − f̂_tgt^j||²`, not yet divided by `T`.
pub fn saving_loss(f_tgt: &Tensor, reconstructed: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(f_tgt.clone());
    let r = g.constant(reconstructed.clone());
    let l = tape::saving_loss(&mut g, f, r)?;
    Ok(g.value(l).item())
}

/// `Σ_j D_KL(A_tgt^j || A_src^j)`, not yet divided by `T`.
pub fn bridging_loss(a_tgt: &[AddressingVector], a_src: &[AddressingVector]) -> Result<f64> {
    if a_tgt.len() != a_src.len() {
        return Err(Error::dim("bridging_loss", a_tgt.len(), a_src.len()));
    }
    a_tgt
        .iter()
        .zip(a_src)
        .map(|(t, s)| crate::numeric::kl_divergence(t.weights(), s.weights()))
        .sum()
}

/// Addressing, recall and (when target features are given) reconstruction
/// for one sequence.
pub fn bridge_forward(f_src: &Tensor, f_tgt: Option<&Tensor>, mem: &MemoryPair) -> Result<BridgeOutput> {
    let mut g = Graph::new();
    let key = g.constant(mem.key.clone());
    let value = g.constant(mem.value.clone());
    let fs = g.constant(f_src.clone());
    let ft = f_tgt.map(|t| g.constant(t.clone()));
    let out = tape::bridge(&mut g, fs, ft, key, value, mem.scale)?;
    Ok(BridgeOutput {
        a_src: AddressingVector::rows_of(g.value(out.a_src)),
        a_tgt: out.a_tgt.map(|v| AddressingVector::rows_of(g.value(v))),
        recalled: g.value(out.recalled).clone(),
        reconstructed: out.reconstructed.map(|v| g.value(v).clone()),
    })
}

/// Graph-recorded memory operations. Rows are temporal steps; a batch is a
/// stack of sequences.
pub mod tape {
    use crate::error::{Error, Result};
    use crate::graph::{Graph, Var};

    /// Row-wise addressing of `queries` (`T×d`) against `memory` (`N×d`).
    pub fn address(g: &mut Graph, memory: Var, queries: Var, r: f64) -> Result<Var> {
        if !(r > 0.0) {
            return Err(Error::domain("address", format!("scale must be positive, got {r}")));
        }
        let s = g.cosine_rows(queries, memory)?;
        let s = g.scale(s, r);
        Ok(g.softmax_rows(s))
    }

    /// `A · M_tgt`; used for both reconstruction and recall.
    pub fn read(g: &mut Graph, addressing: Var, value_memory: Var) -> Result<Var> {
        g.matmul(addressing, value_memory)
    }

    pub fn saving_loss(g: &mut Graph, f_tgt: Var, reconstructed: Var) -> Result<Var> {
        g.squared_error(f_tgt, reconstructed)
    }

    /// With `detach_target`, the target addressing acts as a fixed label.
    pub fn bridging_loss(g: &mut Graph, a_tgt: Var, a_src: Var, detach_target: bool) -> Result<Var> {
        let p = if detach_target { g.detach(a_tgt) } else { a_tgt };
        g.kl_rows(p, a_src)
    }

    #[derive(Clone, Copy, Debug)]
    pub struct BridgeVars {
        pub a_src: Var,
        pub a_tgt: Option<Var>,
        pub recalled: Var,
        pub reconstructed: Option<Var>,
    }

    pub fn bridge(
        g: &mut Graph,
        f_src: Var,
        f_tgt: Option<Var>,
        key: Var,
        value: Var,
        r: f64,
    ) -> Result<BridgeVars> {
        let t = g.value(f_src).rows();
        if t == 0 {
            return Err(Error::dim("bridge_forward", "T >= 1", 0));
        }
        if let Some(ft) = f_tgt {
            let tt = g.value(ft).rows();
            if tt != t {
                return Err(Error::Alignment {
                    source_len: t,
                    target_len: tt,
                });
            }
        }
        let a_src = address(g, key, f_src, r)?;
        let recalled = read(g, a_src, value)?;
        let (a_tgt, reconstructed) = match f_tgt {
            Some(ft) => {
                let a = address(g, value, ft, r)?;
                (Some(a), Some(read(g, a, value)?))
            }
            None => (None, None),
        };
        Ok(BridgeVars {
            a_src,
            a_tgt,
            recalled,
            reconstructed,
        })
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Dense `w · M` written out by hand.
    fn matvec_oracle(w: &[f64], m: &Tensor) -> Vec<f64> {
        let mut out = vec![0.0; m.cols()];
        for (i, wi) in w.iter().enumerate() {
            for (j, o) in out.iter_mut().enumerate() {
                *o += wi * m.get(i, j);
            }
        }
        out
    }

    #[test]
    fn address_examples() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = address(&eye, &[1.0, 0.0], 100.0).unwrap();
        assert_abs_diff_eq!(a.weights()[0], 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(a.weights()[1], 0.0, epsilon = 1e-9);

        let same = Tensor::matrix(3, 2, vec![0.4, -1.0, 0.4, -1.0, 0.4, -1.0]).unwrap();
        for r in [0.5, 16.0, 80.0] {
            let a = address(&same, &[0.3, 2.0], r).unwrap();
            for w in a.weights() {
                assert_abs_diff_eq!(*w, 1.0 / 3.0, epsilon = 1e-12);
            }
        }

        let s = 1.0 / 2f64.sqrt();
        let a = address(&eye, &[s, s], 1.0).unwrap();
        assert_abs_diff_eq!(a.weights()[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(a.weights()[1], 0.5, epsilon = 1e-12);

        assert!(matches!(address(&eye, &[1.0, 0.0, 0.0], 1.0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn reconstruct_examples() {
        let m = Tensor::matrix(3, 2, vec![1.0, 2.0, -3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(reconstruct(&AddressingVector::one_hot(3, 1), &m).unwrap(), vec![-3.0, 4.0]);

        let uv = Tensor::matrix(2, 2, vec![1.0, 3.0, 5.0, -1.0]).unwrap();
        assert_eq!(reconstruct(&AddressingVector::uniform(2), &uv).unwrap(), vec![3.0, 1.0]);

        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = AddressingVector::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(reconstruct(&w, &eye).unwrap(), matvec_oracle(&[0.3, 0.7], &eye));

        assert!(matches!(
            reconstruct(&AddressingVector::uniform(2), &m),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn recall_examples() {
        let mut r = rng(5);
        let m = Tensor::randn(3, 2, 1.0, &mut r);
        for i in 0..3 {
            assert_eq!(recall(&AddressingVector::one_hot(3, i), &m).unwrap(), m.row(i));
        }
        let w = AddressingVector::new(crate::numeric::scaled_softmax(&[0.2, -1.3, 0.9], 1.0).unwrap())
            .unwrap();
        assert_eq!(recall(&w, &m).unwrap(), reconstruct(&w, &m).unwrap());
        let got = recall(&w, &m).unwrap();
        let want = matvec_oracle(w.weights(), &m);
        for (a, b) in got.iter().zip(&want) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn saving_loss_examples() {
        let f = Tensor::matrix(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(saving_loss(&f, &f).unwrap(), 0.0);
        let one = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        assert_eq!(saving_loss(&one, &Tensor::zeros(1, 2)).unwrap(), 2.0);

        let mut r = rng(8);
        let a = Tensor::randn(2, 3, 1.0, &mut r);
        let b = Tensor::randn(2, 3, 1.0, &mut r);
        let mut oracle = 0.0;
        for i in 0..2 {
            for j in 0..3 {
                oracle += (a.get(i, j) - b.get(i, j)).powi(2);
            }
        }
        assert_abs_diff_eq!(saving_loss(&a, &b).unwrap(), oracle, epsilon = 1e-12);
        assert!(saving_loss(&a, &one).is_err());
    }

    #[test]
    fn bridging_loss_examples() {
        let p = AddressingVector::new(vec![0.2, 0.8]).unwrap();
        assert_eq!(bridging_loss(&[p.clone(), p.clone()], &[p.clone(), p.clone()]).unwrap(), 0.0);
        let l = bridging_loss(&[AddressingVector::one_hot(2, 0)], &[AddressingVector::uniform(2)]).unwrap();
        assert_abs_diff_eq!(l, std::f64::consts::LN_2, epsilon = 1e-15);
        assert!(bridging_loss(&[p.clone()], &[p.clone(), p]).is_err());
    }

    #[test]
    fn bridging_gradient_skips_detached_target() {
        let mut r = rng(2);
        let mut g = Graph::new();
        let ft = g.param(Tensor::randn(3, 4, 1.0, &mut r));
        let fs = g.param(Tensor::randn(3, 5, 1.0, &mut r));
        let key = g.param(Tensor::randn(6, 5, 1.0, &mut r));
        let value = g.param(Tensor::randn(6, 4, 1.0, &mut r));
        let out = tape::bridge(&mut g, fs, Some(ft), key, value, 4.0).unwrap();
        let l = tape::bridging_loss(&mut g, out.a_tgt.unwrap(), out.a_src, true).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(ft).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(fs).unwrap().data().iter().any(|&v| v != 0.0));
        // the value memory only feeds the target addressing here
        assert!(grads.get(value).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bridge_forward_source_only() {
        let mut r = rng(11);
        let mem = MemoryPair::init(5, 3, 2, DEFAULT_SCALE, &mut r).unwrap();
        let fs = Tensor::randn(4, 3, 1.0, &mut r);
        let out = bridge_forward(&fs, None, &mem).unwrap();
        assert!(out.a_tgt.is_none() && out.reconstructed.is_none());
        assert_eq!(out.recalled.shape(), &[4, 2]);
    }

    #[test]
    fn single_slot_memory_is_degenerate() {
        let mut r = rng(12);
        let mem = MemoryPair::init(1, 3, 2, DEFAULT_SCALE, &mut r).unwrap();
        let fs = Tensor::randn(4, 3, 1.0, &mut r);
        let out = bridge_forward(&fs, None, &mem).unwrap();
        for a in &out.a_src {
            assert_eq!(a.weights(), &[1.0]);
        }
        for j in 0..4 {
            assert_eq!(out.recalled.row(j), mem.value.row(0));
        }
    }

    #[test]
    fn bridge_forward_matches_per_step_composition() {
        let mut r = rng(13);
        let mem = MemoryPair::init(6, 3, 2, DEFAULT_SCALE, &mut r).unwrap();
        let fs = Tensor::randn(4, 3, 1.0, &mut r);
        let ft = Tensor::randn(4, 2, 1.0, &mut r);
        let out = bridge_forward(&fs, Some(&ft), &mem).unwrap();
        for j in 0..4 {
            let a = address(&mem.key, fs.row(j), mem.scale).unwrap();
            let v = recall(&a, &mem.value).unwrap();
            for (x, y) in out.recalled.row(j).iter().zip(&v) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
            let at = address(&mem.value, ft.row(j), mem.scale).unwrap();
            let fh = reconstruct(&at, &mem.value).unwrap();
            for (x, y) in out.reconstructed.as_ref().unwrap().row(j).iter().zip(&fh) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
        let bad = Tensor::randn(3, 2, 1.0, &mut r);
        assert!(matches!(
            bridge_forward(&fs, Some(&bad), &mem),
            Err(Error::Alignment { .. })
        ));
    }

    #[test]
    fn memory_pair_validation() {
        assert!(MemoryPair::new(Tensor::zeros(2, 3), Tensor::zeros(3, 3), 1.0).is_err());
        assert!(MemoryPair::new(Tensor::zeros(2, 3), Tensor::zeros(2, 1), 0.0).is_err());
        let m = MemoryPair::init(4, 3, 2, 1.0, &mut rng(0)).unwrap();
        for i in 0..4 {
            assert_abs_diff_eq!(norm(m.key.row(i)), 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(norm(m.value.row(i)), 1.0, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn addressing_is_a_distribution_and_query_scale_free(
            seed in any::<u64>(),
            slots in 1usize..12,
            dim in 1usize..8,
            lambda in 1e-2f64..1e2,
            r in 0.5f64..32.0,
        ) {
            let mut g = rng(seed);
            let m = Tensor::randn(slots, dim, 1.0, &mut g);
            let q = Tensor::randn(1, dim, 1.0, &mut g);
            prop_assume!(norm(q.data()) > 1e-3);
            let a = address(&m, q.data(), r).unwrap();
            prop_assert!(a.weights().iter().all(|&w| w >= 0.0));
            prop_assert!((a.weights().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            let scaled: Vec<f64> = q.data().iter().map(|v| v * lambda).collect();
            let b = address(&m, &scaled, r).unwrap();
            for (x, y) in a.weights().iter().zip(b.weights()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
        }

        #[test]
        fn zero_bridge_means_recall_equals_reconstruct(seed in any::<u64>(), t in 1usize..6) {
            let mut g = rng(seed);
            let mem = MemoryPair::init(5, 3, 3, 8.0, &mut g).unwrap();
            // identical memories and features force A_tgt == A_src
            let mem = MemoryPair::new(mem.key.clone(), mem.key.clone(), mem.scale).unwrap();
            let f = Tensor::randn(t, 3, 1.0, &mut g);
            let out = bridge_forward(&f, Some(&f), &mem).unwrap();
            let l = bridging_loss(out.a_tgt.as_ref().unwrap(), &out.a_src).unwrap();
            prop_assert!(l.abs() <= 1e-12);
            let rec = out.reconstructed.unwrap();
            for (x, y) in out.recalled.data().iter().zip(rec.data()) {
                prop_assert!((x - y).abs() <= 1e-9);
            }
            prop_assert!(saving_loss(&f, &rec).unwrap() >= 0.0);
        }
    }
}
