//! Multi-layer aggregation network: two transformer blocks that fuse
//! middle-layer encoder features into the last-layer feature. Each block is
//! self-attention, cross-attention, FFN in sequence, wrapped with residual
//! pre-norm sublayers; queries come from the self-attention branch, keys and
//! values from the injected layer.

use crate::encoder::LayerFeatureBundle;
use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{Bound, ParamStore, Tape, Var};
use rand::Rng;

pub fn init_aggregator<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    dim: usize,
    ffn_mult: usize,
) -> Result<()> {
    for b in 1..=2 {
        let p = format!("aggregator.b{b}");
        nn::init_layer_norm(store, &format!("{p}.ln_self"), dim)?;
        nn::init_attention(store, rng, &format!("{p}.self"), dim)?;
        nn::init_layer_norm(store, &format!("{p}.ln_cross"), dim)?;
        nn::init_attention(store, rng, &format!("{p}.cross"), dim)?;
        nn::init_layer_norm(store, &format!("{p}.ln_ffn"), dim)?;
        nn::init_ffn(store, rng, &format!("{p}.ffn"), dim, dim * ffn_mult)?;
    }
    Ok(())
}

/// One aggregation block:
/// out = x + FFN'(x + CrossAttn'(x + SelfAttn'(x), y)).
pub fn block(
    tape: &mut Tape,
    bound: &Bound,
    prefix: &str,
    x: Var,
    y: Var,
    heads: usize,
) -> Result<Var> {
    let (dx, dy) = (tape.value(x).cols, tape.value(y).cols);
    if dx != dy {
        return Err(Error::shape(format!("block dims differ: {dx} vs {dy}")));
    }
    let normed = nn::layer_norm(tape, bound, &format!("{prefix}.ln_self"), x)?;
    let sa = nn::attention(tape, bound, &format!("{prefix}.self"), normed, normed, heads, None, None)?;
    let x = tape.add(x, sa)?;

    let normed = nn::layer_norm(tape, bound, &format!("{prefix}.ln_cross"), x)?;
    let ca = nn::attention(tape, bound, &format!("{prefix}.cross"), normed, y, heads, None, None)?;
    let x = tape.add(x, ca)?;

    let normed = nn::layer_norm(tape, bound, &format!("{prefix}.ln_ffn"), x)?;
    let f = nn::ffn(tape, bound, &format!("{prefix}.ffn"), normed)?;
    tape.add(x, f)
}

/// Fuse A_j then A_k into the last-layer feature:
/// block2(block1(A_last, A_j), A_k).
pub fn aggregate(
    tape: &mut Tape,
    bound: &Bound,
    bundle: &LayerFeatureBundle,
    heads: usize,
) -> Result<Var> {
    let (j, k) = bundle
        .middle
        .ok_or_else(|| Error::validation("bundle has no middle layer indices"))?;
    let a_last = bundle.last();
    let a_j = bundle.layer(j)?;
    let a_k = bundle.layer(k)?;
    let x = block(tape, bound, "aggregator.b1", a_last, a_j, heads)?;
    block(tape, bound, "aggregator.b2", x, a_k, heads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const DIM: usize = 8;
    const HEADS: usize = 2;

    fn store_with_params(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_aggregator(&mut store, &mut rng, DIM, 2).unwrap();
        store
    }

    fn zero_block_outputs(store: &mut ParamStore) {
        for b in 1..=2 {
            for name in [
                format!("aggregator.b{b}.self.wo.w"),
                format!("aggregator.b{b}.self.wo.b"),
                format!("aggregator.b{b}.cross.wo.w"),
                format!("aggregator.b{b}.cross.wo.b"),
                format!("aggregator.b{b}.ffn.fc2.w"),
                format!("aggregator.b{b}.ffn.fc2.b"),
            ] {
                store.get_mut(&name).unwrap().value.data.fill(0.0);
            }
        }
    }

    #[test]
    fn identity_configured_block_returns_x() {
        let mut store = store_with_params(0);
        zero_block_outputs(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x_val = Matrix::uniform(3, DIM, 1.0, &mut rng);
        let y_val = Matrix::uniform(5, DIM, 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.leaf(x_val.clone());
        let y = tape.leaf(y_val);
        let out = block(&mut tape, &bound, "aggregator.b1", x, y, HEADS).unwrap();
        assert_eq!(tape.value(out), &x_val);
    }

    #[test]
    fn block_shape_law() {
        let store = store_with_params(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t2 in [1, 4, 9] {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let x = tape.leaf(Matrix::uniform(3, DIM, 1.0, &mut rng));
            let y = tape.leaf(Matrix::uniform(t2, DIM, 1.0, &mut rng));
            let out = block(&mut tape, &bound, "aggregator.b1", x, y, HEADS).unwrap();
            let v = tape.value(out);
            assert_eq!((v.rows, v.cols), (3, DIM));
        }
    }

    #[test]
    fn identical_kv_tokens_give_score_independent_context() {
        // with two identical rows in y, the softmax mixes identical value
        // projections, so the cross-attention context equals that value row
        let store = store_with_params(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let token = Matrix::uniform(1, DIM, 1.0, &mut rng);
        let mut y2 = Matrix::zeros(2, DIM);
        y2.data[..DIM].copy_from_slice(&token.data);
        y2.data[DIM..].copy_from_slice(&token.data);

        let run = |x_val: &Matrix| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let x = tape.leaf(x_val.clone());
            let y = tape.leaf(y2.clone());
            let normed = nn::layer_norm(&mut tape, &bound, "aggregator.b1.ln_cross", x).unwrap();
            let ca = nn::attention(
                &mut tape,
                &bound,
                "aggregator.b1.cross",
                normed,
                y,
                HEADS,
                None,
                None,
            )
            .unwrap();
            tape.value(ca).clone()
        };
        // two different queries produce different scores but the same context
        let a = run(&Matrix::uniform(1, DIM, 1.0, &mut rng));
        let b = run(&Matrix::uniform(1, DIM, 1.0, &mut rng));
        assert!(a.max_abs_diff(&b) < 1e-10);
    }

    fn toy_bundle(tape: &mut Tape, seed: u64, same_jk: bool) -> LayerFeatureBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_j = tape.leaf(Matrix::uniform(4, DIM, 1.0, &mut rng));
        let a_k = if same_jk {
            a_j
        } else {
            tape.leaf(Matrix::uniform(6, DIM, 1.0, &mut rng))
        };
        let a_last = tape.leaf(Matrix::uniform(3, DIM, 1.0, &mut rng));
        LayerFeatureBundle {
            per_layer: vec![a_j, a_k, a_last],
            middle: Some((1, 2)),
        }
    }

    #[test]
    fn identity_blocks_compose_to_identity() {
        let mut store = store_with_params(6);
        zero_block_outputs(&mut store);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let bundle = toy_bundle(&mut tape, 7, false);
        let out = aggregate(&mut tape, &bound, &bundle, HEADS).unwrap();
        assert_eq!(tape.value(out), tape.value(bundle.last()));
    }

    #[test]
    fn aggregate_preserves_last_layer_shape() {
        let store = store_with_params(8);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let bundle = toy_bundle(&mut tape, 9, false);
        let out = aggregate(&mut tape, &bound, &bundle, HEADS).unwrap();
        let (v, last) = (tape.value(out), tape.value(bundle.last()));
        assert_eq!((v.rows, v.cols), (last.rows, last.cols));
    }

    #[test]
    fn shared_params_with_equal_jk_match_stepwise_oracle() {
        // copy block1 params into block2, use A_j == A_k, and verify that
        // aggregate equals applying block1 twice by direct re-evaluation
        let mut store = store_with_params(10);
        let b1: Vec<(String, Matrix)> = store
            .iter()
            .filter(|(n, _)| n.starts_with("aggregator.b1."))
            .map(|(n, p)| (n.replace("aggregator.b1.", "aggregator.b2."), p.value.clone()))
            .collect();
        for (name, value) in b1 {
            store.get_mut(&name).unwrap().value = value;
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let bundle = toy_bundle(&mut tape, 11, true);
        let out = aggregate(&mut tape, &bound, &bundle, HEADS).unwrap();

        let y = bundle.layer(1).unwrap();
        let step1 = block(&mut tape, &bound, "aggregator.b1", bundle.last(), y, HEADS).unwrap();
        let step2 = block(&mut tape, &bound, "aggregator.b1", step1, y, HEADS).unwrap();
        assert!(tape.value(out).max_abs_diff(tape.value(step2)) < 1e-12);
    }

    #[test]
    fn missing_middle_indices_rejected() {
        let store = store_with_params(12);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let mut bundle = toy_bundle(&mut tape, 13, false);
        bundle.middle = None;
        assert!(aggregate(&mut tape, &bound, &bundle, HEADS).is_err());
    }

    #[test]
    fn gradient_reaches_middle_layers() {
        let store = store_with_params(14);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let bundle = toy_bundle(&mut tape, 15, false);
        let out = aggregate(&mut tape, &bound, &bundle, HEADS).unwrap();
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        let a_j = bundle.layer(1).unwrap();
        let a_k = bundle.layer(2).unwrap();
        assert!(tape.grad(a_j).max_abs() > 0.0);
        assert!(tape.grad(a_k).max_abs() > 0.0);
    }

    #[test]
    fn zero_value_projections_sever_middle_layers() {
        let mut store = store_with_params(16);
        for b in 1..=2 {
            store
                .get_mut(&format!("aggregator.b{b}.cross.wv.w"))
                .unwrap()
                .value
                .data
                .fill(0.0);
            store
                .get_mut(&format!("aggregator.b{b}.cross.wv.b"))
                .unwrap()
                .value
                .data
                .fill(0.0);
        }
        let run = |seed_y: u64| {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let mut rng = ChaCha8Rng::seed_from_u64(100);
            let a_last = tape.leaf(Matrix::uniform(3, DIM, 1.0, &mut rng));
            let mut rng_y = ChaCha8Rng::seed_from_u64(seed_y);
            let a_j = tape.leaf(Matrix::uniform(4, DIM, 1.0, &mut rng_y));
            let a_k = tape.leaf(Matrix::uniform(6, DIM, 1.0, &mut rng_y));
            let bundle = LayerFeatureBundle {
                per_layer: vec![a_j, a_k, a_last],
                middle: Some((1, 2)),
            };
            let out = aggregate(&mut tape, &bound, &bundle, HEADS).unwrap();
            tape.value(out).clone()
        };
        assert_eq!(run(1), run(2));
    }
}
