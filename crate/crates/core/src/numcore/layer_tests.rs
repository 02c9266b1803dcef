use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    uniform(&[rows, cols], 1.0, rng)
}

/// Scalar objective `sum(out ⊙ weights)` with fixed weights, so every output
/// entry receives a distinct upstream gradient.
fn project(g: &mut Graph, out: NodeId, weights: &Tensor) -> Result<NodeId> {
    let r = g.input(weights.clone());
    let flat = g.matmul_nt(out, r)?;
    Ok(g.sum(flat))
}

fn check<F>(store: &mut ParamStore, mut build: F) -> GradCheckReport
where
    F: FnMut(&mut Graph) -> Result<NodeId>,
{
    grad_check(store, &GradCheckConfig::default(), |s, want| {
        let mut g = Graph::new(s, true);
        let loss = build(&mut g)?;
        let grads = if want { Some(g.backward(loss)?) } else { None };
        Ok((g.scalar(loss), grads))
    })
    .unwrap()
}

#[test]
fn embedding_lookup_examples() {
    let mut store = ParamStore::new();
    let table = store.add("t", Tensor::identity(4)).unwrap();
    let mut g = Graph::new(&store, false);
    let e = g.embed(table, &[2]).unwrap();
    assert_eq!(g.value(e).data(), &[0.0, 0.0, 1.0, 0.0]);
    assert!(g.embed(table, &[4]).is_err());

    let e = g.embed(table, &[0, 0]).unwrap();
    let loss = g.sum(e);
    let grads = g.backward(loss).unwrap();
    let gt = grads.get(table).unwrap();
    assert_eq!(gt.row_slice(0), &[2.0, 2.0, 2.0, 2.0]);
    assert_eq!(gt.row_slice(1), &[0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn embedding_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let table = store.add("t", random_tensor(5, 3, &mut rng)).unwrap();
    let report = check(&mut store, |g| {
        let e = g.embed(table, &[4, 1, 1, 0])?;
        let sq = g.matmul_nt(e, e)?;
        Ok(g.sum(sq))
    });
    assert_eq!(report.checked, 15);
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn single_token_identity_attention_doubles_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "a", 3, 1, false, &mut rng).unwrap();
    for id in [attn.wq, attn.wk, attn.wv, attn.wz] {
        *store.value_mut(id) = Tensor::identity(3);
    }
    let mut g = Graph::new(&store, false);
    let x = g.input(Tensor::row(vec![0.5, -1.0, 2.0]));
    let y = attn.forward_self(&mut g, x, Mask::full(1, 1)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -2.0, 4.0]);
}

#[test]
fn attention_rows_are_normalised() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let store = ParamStore::new();
    for trial in 0..20 {
        let n = 1 + trial % 7;
        let mut g = Graph::new(&store, false);
        let q = g.input(random_tensor(n, 6, &mut rng));
        let k = g.input(random_tensor(n, 6, &mut rng));
        let v = g.input(random_tensor(n, 6, &mut rng));
        let mask = if trial % 3 == 0 { Mask::full(n, n) } else { Mask::causal(n) };
        let a = g.attention(q, k, v, 3, 1.0, mask.clone()).unwrap();
        for head in g.attention_weights(a).unwrap() {
            for (i, row) in head.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row {i} sums to {sum}");
                for (j, &w) in row.iter().enumerate() {
                    if !mask.allows(i, j) {
                        assert_eq!(w, 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn self_attention_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "a", 4, 2, false, &mut rng).unwrap();
    let x = store.add("x", random_tensor(3, 4, &mut rng)).unwrap();
    let w = random_tensor(1, 4, &mut rng);
    let report = check(&mut store, |g| {
        let xn = g.param(x);
        let y = attn.forward_self(g, xn, Mask::causal(3))?;
        project(g, y, &w)
    });
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn all_masked_row_passes_residual_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "a", 4, 2, false, &mut rng).unwrap();
    let mut g = Graph::new(&store, false);
    let xv = random_tensor(2, 4, &mut rng);
    let x = g.input(xv.clone());
    let mask = Mask::from_bool(2, 2, vec![false, false, true, true]).unwrap();
    let y = attn.forward_self(&mut g, x, mask).unwrap();
    assert_eq!(g.value(y).row_slice(0), xv.row_slice(0));
}

#[test]
fn feed_forward_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::new();
    let ffn = FeedForward::new(&mut store, "f", 3, 3, &mut rng).unwrap();
    *store.value_mut(ffn.w1) = Tensor::identity(3);
    *store.value_mut(ffn.w2) = Tensor::identity(3);
    let mut g = Graph::new(&store, false);
    let x = g.input(Tensor::matrix(2, 3, vec![0.0, 1.5, 2.0, 3.0, 0.25, 0.0]).unwrap());
    let y = ffn.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    *store.value_mut(ffn.b2) = Tensor::row(vec![0.1, -0.2, 0.3]);
    let mut g = Graph::new(&store, false);
    let x = g.input(Tensor::matrix(2, 3, vec![-1.0, -2.0, -0.5, -3.0, -0.1, -9.0]).unwrap());
    let y = ffn.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y).data(), &[0.1, -0.2, 0.3, 0.1, -0.2, 0.3]);
}

#[test]
fn feed_forward_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let ffn = FeedForward::new(&mut store, "f", 4, 16, &mut rng).unwrap();
    let x = store.add("x", random_tensor(3, 4, &mut rng)).unwrap();
    // Keep every pre-activation away from the ReLU kink.
    {
        let mut g = Graph::new(&store, false);
        let xn = g.param(x);
        let w1 = g.param(ffn.w1);
        let h = g.matmul(xn, w1).unwrap();
        assert!(g.value(h).data().iter().all(|v| v.abs() > 1e-3));
    }
    let w = random_tensor(1, 4, &mut rng);
    let report = check(&mut store, |g| {
        let xn = g.param(x);
        let y = ffn.forward(g, xn)?;
        project(g, y, &w)
    });
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn cross_attention_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "c", 4, 2, false, &mut rng).unwrap();

    // One memory slot: output = memory · Wv · Wz + query.
    let mut g = Graph::new(&store, false);
    let qv = random_tensor(1, 4, &mut rng);
    let mv = random_tensor(1, 4, &mut rng);
    let q = g.input(qv.clone());
    let m = g.input(mv.clone());
    let y = attn.forward(&mut g, q, m, Mask::full(1, 1)).unwrap();
    let expected = mv
        .matmul(store.value(attn.wv))
        .unwrap()
        .matmul(store.value(attn.wz))
        .unwrap();
    for ((a, b), r) in g.value(y).data().iter().zip(expected.data()).zip(qv.data()) {
        assert!((a - (b + r)).abs() < 1e-12);
    }

    // Only slot 2 visible: perturbing other rows leaves the output unchanged.
    let mask = Mask::from_bool(1, 4, vec![false, false, true, false]).unwrap();
    let memory = random_tensor(4, 4, &mut rng);
    let run = |mem: Tensor| {
        let mut g = Graph::new(&store, false);
        let q = g.input(qv.clone());
        let m = g.input(mem);
        let y = attn.forward(&mut g, q, m, mask.clone()).unwrap();
        g.value(y).clone()
    };
    let base = run(memory.clone());
    let mut perturbed = memory.clone();
    for r in [0, 1, 3] {
        perturbed.row_slice_mut(r).iter_mut().for_each(|v| *v += 3.0);
    }
    assert_eq!(run(perturbed), base);
    let mut moved = memory;
    moved.row_slice_mut(2)[0] += 1.0;
    assert_ne!(run(moved), base);
}

#[test]
fn cross_attention_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "c", 4, 2, false, &mut rng).unwrap();
    let q = store.add("q", random_tensor(1, 4, &mut rng)).unwrap();
    let m = store.add("m", random_tensor(4, 4, &mut rng)).unwrap();
    let w = random_tensor(1, 4, &mut rng);
    let report = check(&mut store, |g| {
        let (qn, mn) = (g.param(q), g.param(m));
        let y = attn.forward(g, qn, mn, Mask::full(1, 4))?;
        project(g, y, &w)
    });
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn layer_norm_dropout_softmax_examples() {
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
    let mut g = Graph::new(&store, true);
    let x = g.input(Tensor::row(vec![3.0; 4]));
    let y = ln.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = g.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(g.value(d), g.value(x));
    assert!(g.dropout(x, 1.0, &mut rng).is_err());
    assert!(g.dropout(x, -0.1, &mut rng).is_err());

    let mut eval = Graph::new(&store, false);
    let x = eval.input(Tensor::row(vec![1.0, 2.0]));
    let d = eval.dropout(x, 0.5, &mut rng).unwrap();
    assert_eq!(eval.value(d), eval.value(x));

    let s = softmax_rows(&Tensor::row(vec![0.0, 0.0]));
    assert_eq!(s.data(), &[0.5, 0.5]);
}

#[test]
fn dropout_scaling_is_inverted() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, true);
    let x = g.input(Tensor::filled(&[100, 100], 1.0));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = g.dropout(x, 0.5, &mut rng).unwrap();
    let v = g.value(d).data();
    assert!(v.iter().all(|&a| a == 0.0 || a == 2.0));
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
}

#[test]
fn composite_ops_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::new();
    let ln = LayerNorm::new(&mut store, "ln", 5).unwrap();
    store.value_mut(ln.gain).data_mut().copy_from_slice(&[0.5, 1.5, -1.0, 2.0, 0.7]);
    store.value_mut(ln.bias).data_mut().copy_from_slice(&[0.1, 0.0, -0.3, 0.2, 0.05]);
    let a = store.add("a", random_tensor(4, 3, &mut rng)).unwrap();
    let b = store.add("b", random_tensor(4, 2, &mut rng)).unwrap();
    let cand = store.add("cand", random_tensor(6, 5, &mut rng)).unwrap();
    let w = random_tensor(1, 5, &mut rng);
    let report = check(&mut store, |g| {
        let (an, bn) = (g.param(a), g.param(b));
        let cat = g.concat_cols(&[an, bn])?;
        let gathered = g.gather_rows(cat, &[3, 0, 0, 2, 1])?;
        let mut drng = ChaCha8Rng::seed_from_u64(99);
        let dropped = g.dropout(gathered, 0.3, &mut drng)?;
        let normed = ln.forward(g, dropped)?;
        let pooled = g.segment_mean(normed, vec![0..2, 2..5])?;
        let pooled = g.weighted_rows(pooled, vec![vec![(1, 0.25), (0, 0.75)], vec![(1, 1.0)]])?;
        let c = g.param(cand);
        let logits = g.matmul_nt(pooled, c)?;
        let nll = g.sampled_nll(logits, vec![vec![1, 0, 2, 2], vec![5, 3, 4]])?;
        let extra = project(g, pooled, &w)?;
        let extra = g.scale(extra, 0.1);
        g.add(nll, extra)
    });
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn sampled_nll_uniform_logits() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store, false);
    let logits = g.input(Tensor::zeros(&[1, 101]));
    let loss = g.sampled_nll(logits, vec![(0..101).collect()]).unwrap();
    assert!((g.scalar(loss) - 101f64.ln()).abs() < 1e-12);
    let bad = g.sampled_nll(logits, vec![vec![0]]);
    assert!(bad.is_err());
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "a", 6, 2, false, &mut rng).unwrap();
    let xv = random_tensor(5, 6, &mut rng);
    let seed: u64 = rng.gen();
    let run = || {
        let mut g = Graph::new(&store, true);
        let x = g.input(xv.clone());
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let x = g.dropout(x, 0.5, &mut r).unwrap();
        let y = attn.forward_self(&mut g, x, Mask::causal(5)).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}
