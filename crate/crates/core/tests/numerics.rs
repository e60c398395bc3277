use mmchat_core::numerics::layers::{Block, BlockShape, Linear};
use mmchat_core::numerics::{finite_diff_check, Graph, Mask, ParamId, ParamStore, Tensor, IGNORE_INDEX};
use mmchat_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Store of named random leaves, promoted to f64 for checking.
fn leaves(seed: u64, shapes: &[(&str, &[usize])]) -> (ParamStore<f64>, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::<f32>::new();
    let ids = shapes
        .iter()
        .map(|(n, s)| ps.add(*n, random(&mut rng, s), false))
        .collect();
    (ps.cast(), ids)
}

/// Fixed random projection to a scalar, so every output entry matters.
fn project(g: &mut Graph<f64>, x: mmchat_core::numerics::Var, seed: u64) -> mmchat_core::numerics::Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(x).to_vec();
    let w = g.constant(random(&mut rng, &shape).cast());
    let y = g.mul(x, w).unwrap();
    g.sum(y).unwrap()
}

const TOL: f64 = 1e-3;

fn check(
    seed: u64,
    shapes: &[(&str, &[usize])],
    f: impl Fn(&mut Graph<f64>, &[mmchat_core::numerics::Var]) -> mmchat_core::Result<mmchat_core::numerics::Var>,
) -> f64 {
    let (mut ps, ids) = leaves(seed, shapes);
    let ids2 = ids.clone();
    let report = finite_diff_check(&mut ps, &ids, 1e-3, 64, |g, ps| {
        let vars: Vec<_> = ids2.iter().map(|&id| g.param(ps, id)).collect();
        let y = f(g, &vars)?;
        Ok(if g.value(y).numel() == 1 {
            y
        } else {
            project(g, y, seed + 99)
        })
    })
    .unwrap();
    assert!(report.entries_checked > 0);
    report.max_rel_error
}

#[test]
fn gradients_of_elementwise_and_shape_ops() {
    let e = check(1, &[("a", &[3, 4]), ("b", &[4, 5])], |g, v| g.matmul(v[0], v[1], false));
    assert!(e < TOL, "matmul {e}");
    let e = check(2, &[("a", &[2, 3, 4]), ("b", &[5, 4])], |g, v| {
        g.matmul(v[0], v[1], true)
    });
    assert!(e < TOL, "matmul_t {e}");
    let e = check(3, &[("a", &[2, 3]), ("b", &[2, 3])], |g, v| {
        let s = g.add(v[0], v[1])?;
        g.mul(s, v[1])
    });
    assert!(e < TOL, "add/mul {e}");
    let e = check(4, &[("a", &[2, 3, 4]), ("b", &[3, 4])], |g, v| {
        g.add_broadcast(v[0], v[1])
    });
    assert!(e < TOL, "add_broadcast {e}");
    let e = check(5, &[("a", &[3, 5])], |g, v| g.gelu(v[0]));
    assert!(e < TOL, "gelu {e}");
    let e = check(6, &[("a", &[3, 5])], |g, v| g.exp(v[0]));
    assert!(e < TOL, "exp {e}");
    let e = check(7, &[("a", &[3, 5])], |g, v| g.softmax(v[0]));
    assert!(e < TOL, "softmax {e}");
    let e = check(8, &[("a", &[3, 5]), ("s", &[1])], |g, v| g.mul_scalar(v[0], v[1]));
    assert!(e < TOL, "mul_scalar {e}");
    let e = check(9, &[("a", &[2, 2, 3]), ("b", &[2, 1, 3])], |g, v| {
        g.concat(&[v[1], v[0]], 1)
    });
    assert!(e < TOL, "concat {e}");
    let e = check(10, &[("a", &[2, 4, 3])], |g, v| g.narrow(v[0], 1, 1, 2));
    assert!(e < TOL, "narrow {e}");
    let e = check(11, &[("a", &[2, 4, 3])], |g, v| {
        g.mean_pool(v[0], Some(&[true, true, false, true, true, false, false, false]))
    });
    assert!(e < TOL, "mean_pool {e}");
    let e = check(12, &[("a", &[3, 4])], |g, v| g.transpose(v[0]));
    assert!(e < TOL, "transpose {e}");
    let e = check(13, &[("a", &[3, 4])], |g, v| g.l2_normalize(v[0]));
    assert!(e < TOL, "l2_normalize {e}");
    let e = check(14, &[("a", &[1, 4])], |g, v| g.repeat_batch(v[0], 3));
    assert!(e < TOL, "repeat_batch {e}");
    let e = check(15, &[("a", &[2, 6])], |g, v| g.reshape(v[0], &[3, 4]));
    assert!(e < TOL, "reshape {e}");
}

#[test]
fn gradients_of_layer_norm_embedding_cross_entropy() {
    let e = check(20, &[("x", &[3, 6]), ("g", &[6]), ("b", &[6])], |g, v| {
        g.layer_norm(v[0], v[1], v[2])
    });
    assert!(e < TOL, "layer_norm {e}");
    let e = check(21, &[("t", &[5, 3])], |g, v| g.embedding(v[0], &[4, 0, 4, 2], &[2, 2]));
    assert!(e < TOL, "embedding {e}");
    let e = check(22, &[("l", &[4, 5])], |g, v| {
        g.cross_entropy(v[0], &[1, IGNORE_INDEX, 4, 0])
    });
    assert!(e < TOL, "cross_entropy {e}");
}

#[test]
fn gradients_of_attention_variants() {
    let shapes: &[(&str, &[usize])] = &[("q", &[2, 3, 8]), ("k", &[2, 3, 8]), ("v", &[2, 3, 8])];
    let e = check(30, shapes, |g, v| g.attention(v[0], v[1], v[2], 2, None));
    assert!(e < TOL, "self {e}");
    let mask = Mask::causal(2, 3, Some(&[true, true, false, true, true, true]));
    let e = check(31, shapes, |g, v| g.attention(v[0], v[1], v[2], 2, Some(&mask)));
    assert!(e < TOL, "causal {e}");
    let cross: &[(&str, &[usize])] = &[("q", &[2, 3, 8]), ("k", &[2, 5, 8]), ("v", &[2, 5, 8])];
    let e = check(32, cross, |g, v| g.attention(v[0], v[1], v[2], 4, None));
    assert!(e < TOL, "cross {e}");
}

#[test]
fn two_layer_attention_block_passes_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut ps = ParamStore::new();
    let shape = BlockShape {
        d_model: 8,
        heads: 2,
        d_ff: 16,
        d_memory: Some(8),
    };
    let blocks: Vec<_> = (0..2)
        .map(|i| Block::new(&mut ps, &mut rng, &format!("b{i}"), shape))
        .collect();
    let x = ps.add("x", random(&mut rng, &[2, 4, 8]), false);
    let mem = ps.add("mem", random(&mut rng, &[2, 3, 8]), false);
    let mut ps = ps.cast::<f64>();
    let ids: Vec<_> = ps.ids().collect();
    let mask = Mask::causal(2, 4, None);
    let report = finite_diff_check(&mut ps, &ids, 1e-3, 16, |g, ps| {
        let mut h = g.param(ps, x);
        let m = g.param(ps, mem);
        for b in &blocks {
            h = b.forward(g, ps, h, Some(&mask), Some(m))?;
        }
        Ok(project(g, h, 41))
    })
    .unwrap();
    assert!(report.max_rel_error < TOL, "{report:?}");
}

#[test]
fn linear_model_gradient_is_exact_and_frozen_params_are_skipped() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut ps = ParamStore::new();
    let lin = Linear::new(&mut ps, &mut rng, "lin", 3, 2, true);
    let x = ps.add("x", random(&mut rng, &[4, 3]), false);
    ps.set_trainable(x, false);
    let mut ps = ps.cast::<f64>();
    let ids: Vec<_> = ps.ids().collect();
    let report = finite_diff_check(&mut ps, &ids, 1e-3, 100, |g, ps| {
        let xv = g.param(ps, x);
        let y = lin.forward(g, ps, xv)?;
        Ok(project(g, y, 51))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
    // weight (6) + bias (2); the frozen input is not probed
    assert_eq!(report.entries_checked, 8);
}

#[test]
fn softmax_of_uniform_logits_is_uniform() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full([2, 5], 0.3));
    let y = g.softmax(x).unwrap();
    assert!(g.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-7));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let mut g = Graph::<f32>::new();
    let x = g.constant(random(&mut rng, &[7, 13]).map(|v| v * 20.0));
    let y = g.softmax(x).unwrap();
    for r in 0..7 {
        let s: f32 = g.value(y).row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_of_constant_vector_is_zero() {
    for (c, tol) in [(1.5f32, 0.0f32), (4.2, 1e-3)] {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full([1, 6], c));
        let gain = g.constant(Tensor::full([6], 1.0));
        let bias = g.constant(Tensor::zeros([6]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v.abs() <= tol), "{c}");
    }
}

#[test]
fn attention_single_position_returns_value_row() {
    let mut g = Graph::<f32>::new();
    let q = g.constant(Tensor::new([1, 1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap());
    let k = g.constant(Tensor::new([1, 1, 4], vec![1.0, 1.0, -1.0, 0.0]).unwrap());
    let v = g.constant(Tensor::new([1, 1, 4], vec![9.0, 8.0, 7.0, 6.0]).unwrap());
    let o = g.attention(q, k, v, 2, None).unwrap();
    assert_eq!(g.value(o).data(), &[9.0, 8.0, 7.0, 6.0]);
}

#[test]
fn attention_masked_to_self_returns_own_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut g = Graph::<f32>::new();
    let q = g.constant(random(&mut rng, &[1, 3, 4]));
    let k = g.constant(random(&mut rng, &[1, 3, 4]));
    let vt = random(&mut rng, &[1, 3, 4]);
    let v = g.constant(vt.clone());
    let mut allow = vec![false; 9];
    for i in 0..3 {
        allow[i * 3 + i] = true;
    }
    let mask = Mask::new([1, 3, 3], allow).unwrap();
    let o = g.attention(q, k, v, 1, Some(&mask)).unwrap();
    for (a, b) in g.value(o).data().iter().zip(vt.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn attention_output_is_convex_combination_of_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let mut g = Graph::<f32>::new();
    let q = g.constant(random(&mut rng, &[1, 4, 2]));
    let k = g.constant(random(&mut rng, &[1, 5, 2]));
    let vt = random(&mut rng, &[1, 5, 2]);
    let v = g.constant(vt.clone());
    let o = g.attention(q, k, v, 1, None).unwrap();
    for r in 0..4 {
        for c in 0..2 {
            let col: Vec<f32> = (0..5).map(|j| vt.data()[j * 2 + c]).collect();
            let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let x = g.value(o).data()[r * 2 + c];
            assert!(x >= lo - 1e-6 && x <= hi + 1e-6);
        }
    }
}

#[test]
fn causal_mask_blocks_gradient_from_later_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let mut ps = ParamStore::new();
    let x = ps.add("x", random(&mut rng, &[1, 3, 4]), false);
    let mut g = Graph::<f32>::new();
    let xv = g.param(&ps, x);
    let mask = Mask::causal(1, 3, None);
    let o = g.attention(xv, xv, xv, 2, Some(&mask)).unwrap();
    let first = g.narrow(o, 1, 0, 1).unwrap();
    let loss = g.sum(first).unwrap();
    let grads = g.backward(loss).unwrap();
    let gx = grads.get(x).unwrap();
    assert!(gx.data()[..4].iter().any(|&v| v != 0.0));
    assert!(gx.data()[4..].iter().all(|&v| v == 0.0));
}

#[test]
fn attention_rejects_mask_shape_mismatch() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros([1, 3, 4]));
    let mask = Mask::causal(1, 2, None);
    assert!(matches!(
        g.attention(x, x, x, 2, Some(&mask)),
        Err(Error::Shape { op: "attention", .. })
    ));
    assert!(matches!(g.attention(x, x, x, 3, None), Err(Error::Shape { .. })));
}

#[test]
fn cross_entropy_cases() {
    let mut g = Graph::<f64>::new();
    let uniform = g.constant(Tensor::zeros([1, 7]));
    let l = g.cross_entropy(uniform, &[3]).unwrap();
    assert!((g.value(l).item() - 7f64.ln()).abs() < 1e-12);

    let sharp = g.constant(Tensor::new([1, 3], vec![0.0, 60.0, 0.0]).unwrap());
    let l = g.cross_entropy(sharp, &[1]).unwrap();
    assert!(g.value(l).item() < 1e-12);

    let two = g.constant(Tensor::new([2, 3], vec![0.1, 0.5, -0.2, 3.0, 1.0, 0.0]).unwrap());
    let one = g.constant(Tensor::new([1, 3], vec![0.1, 0.5, -0.2]).unwrap());
    let a = g.cross_entropy(two, &[2, IGNORE_INDEX]).unwrap();
    let b = g.cross_entropy(one, &[2]).unwrap();
    assert_eq!(g.value(a).item(), g.value(b).item());

    assert!(matches!(
        g.cross_entropy(one, &[IGNORE_INDEX]),
        Err(Error::AllTargetsIgnored)
    ));
    assert!(matches!(
        g.cross_entropy(one, &[3]),
        Err(Error::TargetOutOfRange { target: 3, vocab: 3 })
    ));
}

#[test]
fn backward_requires_scalar_loss() {
    let mut ps = ParamStore::new();
    let x = ps.add("x", Tensor::zeros([2]), false);
    let mut g = Graph::<f32>::new();
    let v = g.param(&ps, x);
    assert!(matches!(g.backward(v), Err(Error::NonScalarLoss(_))));
}

#[test]
fn non_finite_values_are_errors() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full([2], 100.0));
    assert!(matches!(g.exp(x), Err(Error::NonFinite { op: "exp" })));
}

#[test]
fn identical_inputs_give_bit_identical_losses() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let mut ps = ParamStore::new();
        let shape = BlockShape {
            d_model: 16,
            heads: 4,
            d_ff: 32,
            d_memory: None,
        };
        let block = Block::new(&mut ps, &mut rng, "b", shape);
        let x = random(&mut rng, &[2, 5, 16]);
        let mut g = Graph::<f32>::new();
        let xv = g.constant(x);
        let h = block
            .forward(&mut g, &ps, xv, Some(&Mask::causal(2, 5, None)), None)
            .unwrap();
        let s = g.sum(h).unwrap();
        g.value(s).item().to_bits()
    };
    assert_eq!(run(), run());
}
