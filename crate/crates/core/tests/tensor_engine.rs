//! Reverse-mode gradients of every primitive against central finite
//! differences in 64-bit mode, plus forward-value oracles.

use phonolm::rng::{normal, rng_from_seed};
use phonolm::tensor::{adam_step, gradient_check, AdamConfig, AdamState, NodeId, ParamSet, Reduction, Tape, Tensor};
use proptest::prelude::*;

const GRAD_TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn random(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = rng_from_seed(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| scale * normal(&mut rng)).collect()).unwrap()
}

fn params(entries: &[(&str, &[usize])]) -> ParamSet<f64> {
    let mut ps = ParamSet::new();
    for (i, (name, shape)) in entries.iter().enumerate() {
        ps.insert(*name, random(shape, 100 + i as u64, 1.0));
    }
    ps
}

/// Contracts an arbitrary-shaped node to a scalar with fixed random weights so
/// that every output coordinate carries a distinct upstream gradient.
fn project(tape: &mut Tape<'_, f64>, x: NodeId, seed: u64) -> phonolm::Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(random(&shape, seed, 1.0));
    let y = tape.mul(x, w)?;
    Ok(tape.sum_all(y))
}

fn check<F>(mut ps: ParamSet<f64>, f: F) -> f64
where
    F: FnMut(&mut Tape<'_, f64>) -> phonolm::Result<NodeId>,
{
    let report = gradient_check(&mut ps, &[], f, H, 7).unwrap();
    assert!(report.coords_checked > 0);
    assert!(
        report.max_relative_error < GRAD_TOL,
        "max relative error {} at {:?}",
        report.max_relative_error,
        report.worst
    );
    report.max_relative_error
}

#[test]
fn linear_function_is_exact() {
    let ps = params(&[("x", &[4, 5])]);
    let err = check(ps, |t| {
        let x = t.param_by_name("x")?;
        let y = t.scale(x, 3.0);
        Ok(t.sum_all(y))
    });
    assert!(err < 1e-9, "{err}");
}

#[test]
fn matmul_gradients() {
    check(params(&[("a", &[3, 4]), ("b", &[4, 5])]), |t| {
        let (a, b) = (t.param_by_name("a")?, t.param_by_name("b")?);
        let y = t.matmul(a, b)?;
        project(t, y, 1)
    });
}

#[test]
fn matmul_nt_gradients() {
    check(params(&[("a", &[3, 4]), ("b", &[6, 4])]), |t| {
        let (a, b) = (t.param_by_name("a")?, t.param_by_name("b")?);
        let y = t.matmul_nt(a, b)?;
        project(t, y, 2)
    });
}

#[test]
fn elementwise_gradients() {
    check(params(&[("a", &[3, 4]), ("b", &[3, 4]), ("r", &[4])]), |t| {
        let (a, b, r) = (t.param_by_name("a")?, t.param_by_name("b")?, t.param_by_name("r")?);
        let s = t.add(a, b)?;
        let m = t.mul(s, b)?;
        let m = t.add_row(m, r)?;
        let m = t.scale(m, -0.7);
        project(t, m, 3)
    });
}

#[test]
fn gelu_gradients() {
    check(params(&[("a", &[5, 6])]), |t| {
        let a = t.param_by_name("a")?;
        let y = t.gelu(a);
        project(t, y, 4)
    });
}

#[test]
fn softmax_gradients() {
    check(params(&[("a", &[4, 7])]), |t| {
        let a = t.param_by_name("a")?;
        let y = t.softmax(a);
        project(t, y, 5)
    });
}

#[test]
fn layer_norm_gradients() {
    check(params(&[("x", &[4, 8]), ("g", &[8]), ("b", &[8])]), |t| {
        let (x, g, b) = (t.param_by_name("x")?, t.param_by_name("g")?, t.param_by_name("b")?);
        let y = t.layer_norm(x, g, b, 1e-5)?;
        project(t, y, 6)
    });
}

#[test]
fn gather_and_select_gradients() {
    check(params(&[("table", &[6, 3])]), |t| {
        let table = t.param_by_name("table")?;
        let g = t.gather(table, &[0, 2, 2, 5, 1])?;
        let s = t.select_rows(g, &[4, 1, 1, 0])?;
        project(t, s, 7)
    });
}

#[test]
fn dropout_gradients() {
    check(params(&[("a", &[3, 3])]), |t| {
        let a = t.param_by_name("a")?;
        let y = t.dropout(a, vec![0.0, 2.0, 2.0, 2.0, 0.0, 2.0, 2.0, 2.0, 0.0])?;
        project(t, y, 8)
    });
}

#[test]
fn cross_entropy_gradients() {
    for reduction in [Reduction::Sum, Reduction::Mean] {
        check(params(&[("logits", &[5, 9])]), |t| {
            let l = t.param_by_name("logits")?;
            t.cross_entropy(l, &[0, 8, 3, 3, 1], reduction)
        });
    }
}

#[test]
fn attention_gradients_with_padding() {
    // batch 2, seq 5, hidden 6, 2 heads; the second row has 3 real keys
    check(params(&[("qkv", &[10, 18])]), |t| {
        let qkv = t.param_by_name("qkv")?;
        let a = t.attention(qkv, 2, 5, 2, &[5, 3])?;
        project(t, a, 9)
    });
}

#[test]
fn single_attention_layer_loss() {
    check(
        params(&[("x", &[8, 8]), ("wqkv", &[8, 24]), ("wo", &[8, 8]), ("g", &[8]), ("b", &[8])]),
        |t| {
            let (x, wqkv, wo) = (t.param_by_name("x")?, t.param_by_name("wqkv")?, t.param_by_name("wo")?);
            let (g, b) = (t.param_by_name("g")?, t.param_by_name("b")?);
            let qkv = t.matmul(x, wqkv)?;
            let a = t.attention(qkv, 2, 4, 2, &[4, 2])?;
            let o = t.matmul(a, wo)?;
            let r = t.add(x, o)?;
            let y = t.layer_norm(r, g, b, 1e-5)?;
            t.cross_entropy(y, &[0, 1, 2, 3, 4, 5, 6, 7], Reduction::Sum)
        },
    );
}

#[test]
fn shift_invariance_of_layer_norm() {
    let mut ps = ParamSet::new();
    let x = ps.insert("x", random(&[3, 6], 1, 2.0));
    let mut shifted = ps.get(x).clone();
    shifted.data_mut().iter_mut().for_each(|v| *v += 17.25);
    ps.insert("xs", shifted);
    ps.insert("g", Tensor::filled(&[6], 1.0));
    ps.insert("b", Tensor::zeros(&[6]));
    let mut t = Tape::new(&ps);
    let (x, xs) = (t.param_by_name("x").unwrap(), t.param_by_name("xs").unwrap());
    let (g, b) = (t.param_by_name("g").unwrap(), t.param_by_name("b").unwrap());
    let y1 = t.layer_norm(x, g, b, 1e-5).unwrap();
    let y2 = t.layer_norm(xs, g, b, 1e-5).unwrap();
    for (a, b) in t.value(y1).data().iter().zip(t.value(y2).data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn adam_two_step_scalar_trajectory() {
    // Independent recurrence: m_t = b1 m + (1-b1) g, v_t = b2 v + (1-b2) g^2,
    // x -= lr * (m_t / (1-b1^t)) / (sqrt(v_t / (1-b2^t)) + eps), with g = 1.
    let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
    let mut expected = vec![];
    let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
    for t in 1..=2 {
        m = b1 * m + (1.0 - b1);
        v = b2 * v + (1.0 - b2);
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        x -= lr * mhat / (vhat.sqrt() + eps);
        expected.push(x);
    }
    // Both steps move by lr·1/(1+eps) since mhat = vhat = 1 for a constant unit gradient.
    assert!((expected[0] + 0.1).abs() < 1e-8 && (expected[1] + 0.2).abs() < 1e-8);

    let mut ps = ParamSet::new();
    ps.insert("x", Tensor::scalar(0.0f64));
    let mut st = AdamState::new(&ps, AdamConfig { lr, beta1: b1, beta2: b2, eps });
    for want in expected {
        let grads = {
            let mut t = Tape::new(&ps);
            let x = t.param_by_name("x").unwrap();
            let s = t.sum_all(x);
            t.backward(s).unwrap()
        };
        adam_step(&mut ps, &grads, &mut st, lr).unwrap();
        let got = ps.by_name("x").unwrap().item();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
    assert_eq!(st.step, 2);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let ps = params(&[("qkv", &[12, 24]), ("w", &[8, 5])]);
    let run = || {
        let mut t = Tape::new(&ps);
        let qkv = t.param_by_name("qkv").unwrap();
        let a = t.attention(qkv, 3, 4, 4, &[4, 1, 3]).unwrap();
        let w = t.param_by_name("w").unwrap();
        let l = t.matmul(a, w).unwrap();
        let loss = t.cross_entropy(l, &[0; 12], Reduction::Mean).unwrap();
        let g = t.backward(loss).unwrap();
        let mut bits: Vec<u64> = vec![t.value(loss).item().to_bits()];
        for id in ps.ids() {
            bits.extend(g.get(id).unwrap().data().iter().map(|v| v.to_bits()));
        }
        bits
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-1e4f64..1e4, 1..40)) {
        let n = values.len();
        let x = Tensor::<f32>::from_f64(&[1, n], &values).unwrap();
        let y = phonolm::tensor::softmax_rows(&x);
        prop_assert!(y.all_finite());
        let s: f32 = y.data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-6 * n as f32 + 1e-6);
    }

    #[test]
    fn cross_entropy_is_non_negative(values in prop::collection::vec(-50f64..50.0, 2..20), t in 0usize..20) {
        let n = values.len();
        let target = t % n;
        let ps = ParamSet::<f64>::new();
        let mut tape = Tape::new(&ps);
        let l = tape.constant(Tensor::from_vec(&[1, n], values).unwrap());
        let loss = tape.cross_entropy(l, &[target], Reduction::Mean).unwrap();
        prop_assert!(tape.value(loss).item() >= 0.0);
    }
}
