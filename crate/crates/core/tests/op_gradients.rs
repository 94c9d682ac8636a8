//! Every differentiable tape op against central finite differences on
//! random inputs, across many seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zsad_core::numcore::{relative_error, Axis, NumError, Tape, Tensor, Var};

const SEEDS: u64 = 100;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

type OpFn = dyn Fn(&mut Tape<'_>, &[Var]) -> Result<Var, NumError>;

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data = (0..r * c)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(r, c, data).unwrap()
}

/// `⟨f(inputs), w⟩` for a fixed random `w`: a random vector-Jacobian product.
fn projected(f: &OpFn, inputs: &[Tensor], w: &Tensor) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    let y = f(&mut t, &vars).unwrap();
    t.value(y).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn check(name: &str, f: &OpFn, inputs: &[Tensor], rng: &mut ChaCha8Rng) {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let y = f(&mut t, &vars).unwrap();
    let [r, c] = t.shape(y);
    let w = uniform(rng, r, c, -1.0, 1.0);
    let wv = t.constant(w.clone());
    let prod = t.mul(y, wv).unwrap();
    let loss = t.sum(prod, Axis::All).unwrap();
    t.backward(loss).unwrap();

    for (k, &v) in vars.iter().enumerate() {
        let analytic = t.grad(v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut numeric = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            numeric[i] = (projected(f, &plus, &w) - projected(f, &minus, &w)) / (2.0 * H);
        }
        let err = relative_error(&analytic, &numeric);
        assert!(err < TOL, "{name}: input {k} relative error {err:.3e}");
    }
}

fn sweep(name: &str, f: &OpFn, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        check(&format!("{name} (seed {seed})"), f, &inputs, &mut rng);
    }
}

fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    uniform(rng, r, c, -1.5, 1.5)
}

#[test]
fn products() {
    sweep("matmul", &|t, v| t.matmul(v[0], v[1]), |r| vec![mat(r, 3, 4), mat(r, 4, 2)]);
    sweep("matmul_nt", &|t, v| t.matmul_nt(v[0], v[1]), |r| vec![mat(r, 3, 4), mat(r, 5, 4)]);
    sweep("transpose", &|t, v| t.transpose(v[0]), |r| vec![mat(r, 3, 4)]);
    sweep("linear", &|t, v| t.linear(v[0], v[1], v[2]), |r| vec![mat(r, 3, 4), mat(r, 4, 2), mat(r, 1, 2)]);
}

#[test]
fn elementwise_binary() {
    sweep("add", &|t, v| t.add(v[0], v[1]), |r| vec![mat(r, 2, 3), mat(r, 2, 3)]);
    sweep("sub", &|t, v| t.sub(v[0], v[1]), |r| vec![mat(r, 2, 3), mat(r, 2, 3)]);
    sweep("mul", &|t, v| t.mul(v[0], v[1]), |r| vec![mat(r, 2, 3), mat(r, 2, 3)]);
    sweep("add_row", &|t, v| t.add_row(v[0], v[1]), |r| vec![mat(r, 3, 4), mat(r, 1, 4)]);
    sweep("scale_by", &|t, v| t.scale_by(v[0], v[1]), |r| vec![mat(r, 3, 2), mat(r, 1, 1)]);
}

#[test]
fn elementwise_unary() {
    sweep("scale", &|t, v| t.scale(v[0], -1.7), |r| vec![mat(r, 2, 3)]);
    sweep("offset", &|t, v| t.offset(v[0], 0.3), |r| vec![mat(r, 2, 3)]);
    sweep("gelu", &|t, v| t.gelu(v[0]), |r| vec![uniform(r, 3, 3, -3.0, 3.0)]);
    sweep("sigmoid", &|t, v| t.sigmoid(v[0]), |r| vec![uniform(r, 3, 3, -4.0, 4.0)]);
    sweep("exp", &|t, v| t.exp(v[0]), |r| vec![mat(r, 2, 3)]);
    sweep("log", &|t, v| t.log(v[0]), |r| vec![uniform(r, 2, 3, 0.2, 3.0)]);
    sweep("softplus", &|t, v| t.softplus(v[0]), |r| vec![uniform(r, 2, 3, -5.0, 5.0)]);
    sweep("relu", &|t, v| t.relu(v[0]), |r| vec![away_from_zero(r, 2, 4)]);
    sweep("square", &|t, v| t.square(v[0]), |r| vec![mat(r, 2, 3)]);
    sweep("powf", &|t, v| t.powf(v[0], 2.0), |r| vec![uniform(r, 2, 3, 0.05, 1.0)]);
    sweep("powf_frac", &|t, v| t.powf(v[0], 1.5), |r| vec![uniform(r, 2, 3, 0.05, 1.0)]);
    // inside (|x| < 0.04) or outside (|x| > 0.06) the clamp range, never on its edge
    sweep("clamp", &|t, v| t.clamp(v[0], -0.05, 0.05), |r| {
        vec![away_from_zero(r, 3, 3).map(|x| if x.abs() < 0.8 { x * 0.05 } else { x * 0.1 })]
    });
}

#[test]
fn normalizations() {
    sweep("softmax_cols", &|t, v| t.softmax(v[0], Axis::Cols), |r| vec![uniform(r, 3, 4, -3.0, 3.0)]);
    sweep("softmax_rows", &|t, v| t.softmax(v[0], Axis::Rows), |r| vec![uniform(r, 3, 4, -3.0, 3.0)]);
    sweep(
        "layer_norm",
        &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        |r| vec![mat(r, 3, 5), uniform(r, 1, 5, 0.5, 1.5), mat(r, 1, 5)],
    );
    sweep("normalize_rows", &|t, v| t.normalize_rows(v[0], 1e-12), |r| vec![mat(r, 3, 4)]);
    sweep("cosine_matrix", &|t, v| t.cosine_matrix(v[0], v[1], 1e-12), |r| vec![mat(r, 4, 3), mat(r, 2, 3)]);
    sweep("cosine_rows", &|t, v| t.cosine_rows(v[0], v[1], 1e-12), |r| vec![mat(r, 4, 3), mat(r, 4, 3)]);
}

#[test]
fn structural() {
    sweep("concat_cols", &|t, v| t.concat_cols(&[v[0], v[1]]), |r| vec![mat(r, 2, 3), mat(r, 2, 1)]);
    sweep("concat_rows", &|t, v| t.concat_rows(&[v[0], v[1], v[0]]), |r| vec![mat(r, 2, 3), mat(r, 1, 3)]);
    sweep("slice_cols", &|t, v| t.slice_cols(v[0], 1, 2), |r| vec![mat(r, 3, 4)]);
    sweep("slice_rows", &|t, v| t.slice_rows(v[0], 1, 2), |r| vec![mat(r, 4, 3)]);
    sweep("reshape", &|t, v| t.reshape(v[0], 2, 6), |r| vec![mat(r, 3, 4)]);
    sweep("repeat_rows", &|t, v| t.repeat_rows(v[0], 3), |r| vec![mat(r, 1, 4)]);
}

#[test]
fn reductions() {
    for axis in [Axis::All, Axis::Rows, Axis::Cols] {
        sweep("sum", &move |t, v| t.sum(v[0], axis), |r| vec![mat(r, 3, 4)]);
        sweep("mean", &move |t, v| t.mean(v[0], axis), |r| vec![mat(r, 3, 4)]);
        sweep("max", &move |t, v| t.max(v[0], axis), |r| vec![mat(r, 3, 4)]);
    }
    sweep("top_k_mean", &|t, v| t.top_k_mean(v[0], 3), |r| vec![mat(r, 6, 1)]);
}

#[test]
fn composed_chain() {
    // attention-like chain mixing several ops
    sweep(
        "attention",
        &|t, v| {
            let logits = t.matmul_nt(v[0], v[1])?;
            let logits = t.scale(logits, 0.5)?;
            let w = t.softmax(logits, Axis::Cols)?;
            let out = t.matmul(w, v[1])?;
            let g = t.gelu(out)?;
            t.normalize_rows(g, 1e-12)
        },
        |r| vec![mat(r, 3, 4), mat(r, 5, 4)],
    );
}
