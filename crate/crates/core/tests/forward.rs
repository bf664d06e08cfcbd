use satool_core::blocksparse::{block_scores, top_p_select, BlockGrid, BlockMask};
use satool_core::trace::{attention, generate_trace, DenoiseTrace, ForwardEngine, SurrogateModel, TraceConfig};
use satool_core::Bitset;

fn small_config(seed: u64) -> TraceConfig {
    TraceConfig {
        layers: 2,
        heads: 2,
        tokens: 16,
        head_dim: 4,
        steps: 3,
        block_size: 4,
        velocity_shape: [2, 2, 2],
        seed,
        ..TraceConfig::default()
    }
}

fn tiny_config() -> TraceConfig {
    TraceConfig {
        layers: 1,
        heads: 1,
        tokens: 2,
        head_dim: 1,
        steps: 1,
        block_size: 1,
        velocity_shape: [1, 1, 2],
        ..TraceConfig::default()
    }
}

#[test]
fn zero_values_give_the_bias() {
    let c = small_config(3);
    let t = generate_trace(&c).unwrap();
    let mut data = t.data().to_vec();
    let nd = c.tokens * c.head_dim;
    for step in 0..c.steps {
        for h in 0..c.num_heads() {
            let start = ((step * c.num_heads() + h) * 3 + 2) * nd;
            data[start..start + nd].fill(0.0);
        }
    }
    let t = DenoiseTrace::from_parts(c.clone(), data).unwrap();
    let model = SurrogateModel::for_trace(&c).unwrap();
    let e = ForwardEngine::new(&t, &model).unwrap();
    assert_eq!(e.dense_forward(1).unwrap().velocity().data, model.bias());
}

#[test]
fn dense_cache_reports_hits() {
    let c = small_config(4);
    let t = generate_trace(&c).unwrap();
    let model = SurrogateModel::for_trace(&c).unwrap();
    let e = ForwardEngine::new(&t, &model).unwrap();
    assert!(e.cached_dense(0).is_none());
    let first = e.dense_forward(0).unwrap();
    let second = e.dense_forward(0).unwrap();
    assert!(first.recomputed);
    assert!(!second.recomputed);
    assert_eq!(first.velocity(), second.velocity());
    assert!(e.cached_dense(0).is_some());
    assert!(e.dense_forward(3).is_err());
}

#[test]
fn two_token_hand_instance() {
    // q = (1, 0), k = (0, 2), v = (1, 3), D = 1.
    let c = tiny_config();
    let t = DenoiseTrace::from_parts(c.clone(), vec![1.0, 0.0, 0.0, 2.0, 1.0, 3.0]).unwrap();
    let model = SurrogateModel::new(&c, 5).unwrap();
    let e = ForwardEngine::new(&t, &model).unwrap();

    // Row 0 logits (0, 2); row 1 logits (0, 0).
    let p = 1.0 / (1.0 + 2f64.exp());
    let o = [p * 1.0 + (1.0 - p) * 3.0, 2.0];
    let w = model.out_weights()[0];
    let z = [o[0] * w, o[1] * w];
    let proj = model.projection();
    let expect: Vec<f64> =
        (0..2).map(|v| model.bias()[v] + (proj[2 * v] * z[0] + proj[2 * v + 1] * z[1]).tanh()).collect();
    let got = e.dense_forward(0).unwrap();
    for (a, b) in got.velocity().data.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert!((got.step.head_outputs[0][0] - o[0]).abs() < 1e-12);

    // Keeping only the diagonal blocks makes every token attend to itself.
    let diag = BlockMask::from_blocks(Bitset::from_indices(4, [0, 3]));
    let sparse = e.head_attention(0, 0, Some(&diag)).unwrap();
    assert_eq!(sparse, vec![1.0, 3.0]);
}

#[test]
fn full_mask_is_bitwise_dense() {
    let c = small_config(9);
    let t = generate_trace(&c).unwrap();
    let model = SurrogateModel::for_trace(&c).unwrap();
    let e = ForwardEngine::new(&t, &model).unwrap();
    let m = e.grid().num_blocks();
    let full: Vec<Option<BlockMask>> = vec![Some(BlockMask::full(m)); c.num_heads()];
    for step in 0..c.steps {
        let dense = e.dense_forward(step).unwrap();
        assert_eq!(&e.sparse_forward(step, &full).unwrap(), dense.velocity());
    }

    let mut diag = Bitset::empty(m);
    for b in 0..e.grid().blocks_per_side() {
        diag.insert(e.grid().index(b, b));
    }
    let mut masks: Vec<Option<BlockMask>> = vec![None; c.num_heads()];
    masks[0] = Some(BlockMask::from_blocks(diag));
    assert_ne!(&e.sparse_forward(0, &masks).unwrap(), e.dense_forward(0).unwrap().velocity());
}

#[test]
fn tau_one_matches_dense() {
    let c = small_config(11);
    let t = generate_trace(&c).unwrap();
    let model = SurrogateModel::for_trace(&c).unwrap();
    let e = ForwardEngine::new(&t, &model).unwrap();
    for step in 0..c.steps {
        let masks: Vec<Option<BlockMask>> = (0..c.num_heads())
            .map(|h| {
                let s = block_scores(t.q(step, h), t.k(step, h), c.head_dim, e.grid()).unwrap();
                Some(top_p_select(&s, 1.0).unwrap())
            })
            .collect();
        assert_eq!(&e.sparse_forward(step, &masks).unwrap(), e.dense_forward(step).unwrap().velocity());
    }
}

#[test]
fn fully_masked_rows_are_zero() {
    let grid = BlockGrid::new(4, 2).unwrap();
    let q = [1.0f32, 2.0, 3.0, 4.0];
    let only_top = BlockMask::from_blocks(Bitset::from_indices(4, [0]));
    let out = attention(&q, &q, &q, 1, Some((&only_top, &grid))).unwrap();
    assert_eq!(&out[2..], &[0.0, 0.0]);
    assert!(out[0] > 0.0);
}

#[test]
fn lipschitz_bound_holds() {
    let c = small_config(21);
    let t = generate_trace(&c).unwrap();
    let model = SurrogateModel::for_trace(&c).unwrap();
    let e = ForwardEngine::new(&t, &model).unwrap();
    let bound = model.lipschitz_bound();
    assert!(bound.is_finite() && bound > 0.0);
    let dense = e.dense_forward(1).unwrap();
    for h in 0..c.num_heads() {
        for scale in [1e-3, 0.1, 1.0, 10.0] {
            let pert: Vec<f64> = dense.step.head_outputs[h]
                .iter()
                .enumerate()
                .map(|(i, o)| o + scale * ((i * 7 + h) % 5) as f64 - 2.0 * scale)
                .collect();
            let delta =
                pert.iter().zip(&dense.step.head_outputs[h]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let y = e.forward_with_outputs(1, &[(h, pert)]).unwrap();
            let dy = y.sub(dense.velocity()).unwrap().norm();
            assert!(dy <= bound * delta * (1.0 + 1e-12), "{dy} > {bound} * {delta}");
        }
    }
}
