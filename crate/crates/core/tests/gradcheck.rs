use std::cell::Cell;

use mfl_core::math::{finite_diff_grad, relative_error, ParamStore, Tape, Tensor, Var};
use mfl_core::model::{BlockConfig, ModelConfig, ToyLm};
use mfl_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: u64 = 50;
const TOL: f64 = 1e-4;
const STEP: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Random values bounded away from zero, for ops with a kink or a pole there.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    random(shape, rng).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

/// Checks `d/dx sum(w * f(x))` for random `w` against central differences.
fn check_op<F>(name: &str, x: Tensor, rng: &mut ChaCha8Rng, f: F)
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let out_shape = {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = f(&mut tape, v).unwrap();
        tape.value(y).shape().to_vec()
    };
    let w = random(&out_shape, rng);
    let loss_of = |tape: &mut Tape, v: Var| -> Var {
        let y = f(tape, v).unwrap();
        let wv = tape.constant(w.clone());
        let p = tape.mul(y, wv).unwrap();
        tape.sum(p)
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = loss_of(&mut tape, xv);
    let mut store = ParamStore::new();
    let grads = tape.backward(loss, &mut store).unwrap();
    let analytic = grads.get(xv).expect("leaf gradient").clone();

    let numeric = finite_diff_grad(
        |probe| {
            let mut tape = Tape::new();
            let v = tape.constant(probe.clone());
            let l = loss_of(&mut tape, v);
            tape.value(l).item()
        },
        &x,
        STEP,
    )
    .unwrap();
    let err = relative_error(analytic.data(), numeric.data());
    assert!(err < TOL, "{name}: relative error {err:e}");
}

fn seeded(op: u64, i: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(op * 1000 + i)
}

#[test]
fn matmul_both_operands() {
    for i in 0..INSTANCES {
        let mut rng = seeded(1, i);
        let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
        let b = random(&[k, n], &mut rng);
        let a = random(&[m, k], &mut rng);
        check_op("matmul lhs", a.clone(), &mut rng, |t, x| {
            let bv = t.constant(b.clone());
            t.matmul(x, bv)
        });
        check_op("matmul rhs", b, &mut rng, |t, x| {
            let av = t.constant(a.clone());
            t.matmul(av, x)
        });
    }
}

#[test]
fn elementwise_and_bias_ops() {
    for i in 0..INSTANCES {
        let mut rng = seeded(2, i);
        let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..6));
        let other = random(&[m, n], &mut rng);
        let bias = random(&[n], &mut rng);
        let s = rng.gen_range(-3.0..3.0);
        check_op("add", random(&[m, n], &mut rng), &mut rng, |t, x| {
            let o = t.constant(other.clone());
            t.add(x, o)
        });
        check_op("mul", random(&[m, n], &mut rng), &mut rng, |t, x| {
            let o = t.constant(other.clone());
            t.mul(x, o)
        });
        check_op("self mul", random(&[m, n], &mut rng), &mut rng, |t, x| t.mul(x, x));
        check_op("add_bias input", random(&[m, n], &mut rng), &mut rng, |t, x| {
            let b = t.constant(bias.clone());
            t.add_bias(x, b)
        });
        let x = random(&[m, n], &mut rng);
        check_op("add_bias bias", bias.clone(), &mut rng, |t, b| {
            let xv = t.constant(x.clone());
            t.add_bias(xv, b)
        });
        check_op("scale", random(&[m, n], &mut rng), &mut rng, |t, x| Ok(t.scale(x, s)));
        check_op("transpose", random(&[m, n], &mut rng), &mut rng, |t, x| t.transpose(x));
    }
}

#[test]
fn nonlinearities() {
    for i in 0..INSTANCES {
        let mut rng = seeded(3, i);
        let (m, n) = (rng.gen_range(1..5), rng.gen_range(2..6));
        check_op("relu", away_from_zero(&[m, n], &mut rng), &mut rng, |t, x| Ok(t.relu(x)));
        check_op("gelu", random(&[m, n], &mut rng).scale(3.0), &mut rng, |t, x| Ok(t.gelu(x)));
        check_op("softmax", random(&[m, n], &mut rng).scale(4.0), &mut rng, |t, x| t.softmax(x));
        check_op("log", away_from_zero(&[m, n], &mut rng).map(f64::abs), &mut rng, |t, x| t.log(x));
    }
}

#[test]
fn structural_ops() {
    for i in 0..INSTANCES {
        let mut rng = seeded(4, i);
        let (m, n) = (rng.gen_range(2..6), rng.gen_range(2..6));
        let c0 = rng.gen_range(0..n - 1);
        let r0 = rng.gen_range(0..m - 1);
        let idx: Vec<usize> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..m)).collect();
        let side = random(&[m, 3], &mut rng);
        let below = random(&[2, n], &mut rng);
        check_op("slice_cols", random(&[m, n], &mut rng), &mut rng, |t, x| t.slice_cols(x, c0, n - c0));
        check_op("slice_rows", random(&[m, n], &mut rng), &mut rng, |t, x| t.slice_rows(x, r0, m - r0));
        check_op("gather_rows", random(&[m, n], &mut rng), &mut rng, |t, x| t.gather_rows(x, &idx));
        check_op("reshape", random(&[m, n], &mut rng), &mut rng, |t, x| t.reshape(x, &[n * m, 1]));
        check_op("concat_cols", random(&[m, n], &mut rng), &mut rng, |t, x| {
            let s = t.constant(side.clone());
            t.concat_cols(&[s, x, x])
        });
        check_op("concat_rows", random(&[m, n], &mut rng), &mut rng, |t, x| {
            let b = t.constant(below.clone());
            t.concat_rows(&[x, b, x])
        });
        check_op("sum", random(&[m, n], &mut rng), &mut rng, |t, x| Ok(t.sum(x)));
        check_op("mean", random(&[m, n], &mut rng), &mut rng, |t, x| Ok(t.mean(x)));
    }
}

#[test]
fn cross_entropy_losses() {
    for i in 0..INSTANCES {
        let mut rng = seeded(5, i);
        let (b, v) = (rng.gen_range(1..6), rng.gen_range(2..7));
        let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..v)).collect();
        check_op("cross_entropy_rows", random(&[b, v], &mut rng).scale(3.0), &mut rng, |t, x| {
            t.cross_entropy_rows(x, &targets)
        });
        check_op("cross_entropy", random(&[b, v], &mut rng).scale(3.0), &mut rng, |t, x| t.cross_entropy(x, &targets));
    }
}

#[test]
fn embedding_scatters_into_the_table() {
    for i in 0..INSTANCES {
        let mut rng = seeded(6, i);
        let (v, d) = (rng.gen_range(2..7), rng.gen_range(1..5));
        let ids: Vec<usize> = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(0..v)).collect();
        let table = random(&[v, d], &mut rng);
        let w = random(&[ids.len(), d], &mut rng);
        let loss = |store: &ParamStore, tape: &mut Tape| {
            let id = store.id("table").unwrap();
            let e = tape.embedding(store, id, &ids).unwrap();
            let wv = tape.constant(w.clone());
            let p = tape.mul(e, wv).unwrap();
            tape.sum(p)
        };
        let mut store = ParamStore::new();
        let id = store.add("table", table.clone());
        let mut tape = Tape::new();
        let l = loss(&store, &mut tape);
        tape.backward(l, &mut store).unwrap();
        let analytic = store.get(id).grad.clone().unwrap();
        let numeric = finite_diff_grad(
            |probe| {
                let mut s = ParamStore::new();
                s.add("table", probe.clone());
                let mut tape = Tape::new();
                let l = loss(&s, &mut tape);
                tape.value(l).item()
            },
            &table,
            STEP,
        )
        .unwrap();
        assert!(relative_error(analytic.data(), numeric.data()) < TOL);
    }
}

fn tiny_config(block: BlockConfig) -> ModelConfig {
    ModelConfig { vocab: 11, d_model: 8, max_len: 4, attn_heads: 2, block }
}

/// Full-model check over every trainable parameter. Returns false when a
/// perturbation changed a top-k selection, which makes the loss
/// non-differentiable at that point.
fn model_gradcheck(block: BlockConfig, seed: u64, frozen: bool) -> bool {
    let mut model = ToyLm::new(tiny_config(block), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let tokens: Vec<usize> = (0..4).map(|_| rng.gen_range(0..11)).collect();
    model.set_freeze_backbone(frozen);
    model.store.zero_grad();
    let mut tape = Tape::new();
    let (loss, _, base_routes) = model.lm_loss(&mut tape, &tokens).unwrap();
    tape.backward(loss, &mut model.store).unwrap();
    let base_tuples: Vec<_> = base_routes.iter().map(|r| r.tuple()).collect();

    let ids: Vec<_> = model.store.ids().collect();
    let flipped = Cell::new(false);
    for id in ids {
        let p = model.store.get(id).clone();
        if !p.trainable {
            assert!(p.grad.as_ref().map_or(true, |g| g.data().iter().all(|&v| v == 0.0)), "{} frozen but has gradient", p.name);
            continue;
        }
        let analytic = p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let mut probe_model = model.clone();
        let numeric = finite_diff_grad(
            |v| {
                probe_model.store.get_mut(id).value = v.clone();
                let mut tape = Tape::new();
                let (l, _, routes) = probe_model.lm_loss(&mut tape, &tokens).unwrap();
                if routes.iter().map(|r| r.tuple()).collect::<Vec<_>>() != base_tuples {
                    flipped.set(true);
                }
                tape.value(l).item()
            },
            &p.value,
            STEP,
        )
        .unwrap();
        if flipped.get() {
            return false;
        }
        let err = relative_error(analytic.data(), numeric.data());
        assert!(err < TOL, "{} (seed {seed}, frozen {frozen}): relative error {err:e}", p.name);
    }
    true
}

fn sweep(block: BlockConfig, frozen: bool) {
    let mut checked = 0;
    let mut seed = 0;
    while checked < INSTANCES {
        if model_gradcheck(block.clone(), seed, frozen) {
            checked += 1;
        }
        seed += 1;
        assert!(seed < 2 * INSTANCES, "too many selection flips under perturbation");
    }
}

#[test]
fn toy_lm_standard_moe_full_gradient() {
    sweep(BlockConfig::Standard { experts: 4, top_k: 2, hidden: 6 }, false);
    sweep(BlockConfig::Standard { experts: 4, top_k: 2, hidden: 6 }, true);
}

#[test]
fn toy_lm_multi_head_full_gradient() {
    sweep(BlockConfig::MultiHead { heads: 2, experts: 3, top_k: 2, hidden: 5 }, false);
    sweep(BlockConfig::MultiHead { heads: 4, experts: 3, top_k: 1, hidden: 5 }, true);
}

#[test]
fn toy_lm_dense_full_gradient() {
    sweep(BlockConfig::Dense { hidden: 6 }, false);
}
