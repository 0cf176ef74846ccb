mod common;

use common::{check_input_grads, check_param_grads, readout};
use qstitch_core::cvae::{CvaeArch, CvaeBatch, CvaeModel};
use qstitch_core::envs::{LayoutId, MazeEnv};
use qstitch_core::nn::{Graph, Mlp, ParamStore, TransformerBlock};
use qstitch_core::rng::{standard_normal, SeedStream};

const DRAWS: usize = 100;
const TOL: f64 = 1e-4;

fn assert_op(name: &str, worst: f64) {
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn elementwise_ops() {
    let s = vec![vec![3, 4]];
    assert_op(
        "relu",
        check_input_grads(&s, DRAWS, 1, |g, v| {
            let y = g.relu(v[0]);
            readout(g, y)
        }),
    );
    assert_op(
        "tanh",
        check_input_grads(&s, DRAWS, 2, |g, v| {
            let y = g.tanh(v[0]);
            readout(g, y)
        }),
    );
    assert_op(
        "exp",
        check_input_grads(&s, DRAWS, 3, |g, v| {
            let y = g.exp(v[0]);
            readout(g, y)
        }),
    );
    assert_op(
        "square",
        check_input_grads(&s, DRAWS, 4, |g, v| {
            let y = g.square(v[0]);
            readout(g, y)
        }),
    );
    assert_op(
        "scale",
        check_input_grads(&s, DRAWS, 5, |g, v| {
            let y = g.scale(v[0], -1.7);
            readout(g, y)
        }),
    );
    assert_op(
        "add_scalar",
        check_input_grads(&s, DRAWS, 6, |g, v| {
            let y = g.add_scalar(v[0], 0.3);
            let y = g.square(y);
            readout(g, y)
        }),
    );
    assert_op(
        "sum",
        check_input_grads(&s, DRAWS, 7, |g, v| {
            let y = g.square(v[0]);
            Ok(g.sum(y))
        }),
    );
    assert_op(
        "mean",
        check_input_grads(&s, DRAWS, 8, |g, v| {
            let y = g.square(v[0]);
            Ok(g.mean(y))
        }),
    );
    assert_op(
        "row_sum",
        check_input_grads(&s, DRAWS, 9, |g, v| {
            let y = g.row_sum(v[0]);
            let y = g.square(y);
            readout(g, y)
        }),
    );
}

#[test]
fn binary_ops() {
    let s = vec![vec![3, 4], vec![3, 4]];
    assert_op(
        "add",
        check_input_grads(&s, DRAWS, 11, |g, v| {
            let y = g.add(v[0], v[1])?;
            let y = g.square(y);
            readout(g, y)
        }),
    );
    assert_op(
        "sub",
        check_input_grads(&s, DRAWS, 12, |g, v| {
            let y = g.sub(v[0], v[1])?;
            let y = g.square(y);
            readout(g, y)
        }),
    );
    assert_op(
        "mul",
        check_input_grads(&s, DRAWS, 13, |g, v| {
            let y = g.mul(v[0], v[1])?;
            readout(g, y)
        }),
    );
    assert_op(
        "matmul",
        check_input_grads(&[vec![3, 4], vec![4, 2]], DRAWS, 14, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            readout(g, y)
        }),
    );
    assert_op(
        "add_row",
        check_input_grads(&[vec![3, 4], vec![4]], DRAWS, 15, |g, v| {
            let y = g.add_row(v[0], v[1])?;
            let y = g.square(y);
            readout(g, y)
        }),
    );
}

#[test]
fn structural_ops() {
    assert_op(
        "concat_cols",
        check_input_grads(&[vec![3, 2], vec![3, 3]], DRAWS, 21, |g, v| {
            let y = g.concat_cols(&[v[0], v[1]])?;
            let y = g.square(y);
            readout(g, y)
        }),
    );
    assert_op(
        "slice_cols",
        check_input_grads(&[vec![3, 5]], DRAWS, 22, |g, v| {
            let y = g.slice_cols(v[0], 1, 4)?;
            let y = g.square(y);
            readout(g, y)
        }),
    );
    assert_op(
        "reshape",
        check_input_grads(&[vec![3, 4]], DRAWS, 23, |g, v| {
            let y = g.reshape(v[0], vec![2, 6])?;
            let y = g.square(y);
            readout(g, y)
        }),
    );
    assert_op(
        "gather_rows",
        check_input_grads(&[vec![4, 3]], DRAWS, 24, |g, v| {
            let y = g.gather_rows(v[0], &[2, 0, 2, 3])?;
            let y = g.square(y);
            readout(g, y)
        }),
    );
}

#[test]
fn normalization_and_attention() {
    assert_op(
        "layer_norm",
        check_input_grads(&[vec![3, 5], vec![5], vec![5]], DRAWS, 31, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            readout(g, y)
        }),
    );
    assert_op(
        "causal_attention",
        check_input_grads(&[vec![6, 4], vec![6, 4], vec![6, 4]], DRAWS, 32, |g, v| {
            let y = g.causal_attention(v[0], v[1], v[2], 2, 3, 2)?;
            readout(g, y)
        }),
    );
}

#[test]
fn losses() {
    let target = [0.3, -0.8, 1.1, 0.0, 0.5, -0.2];
    let weights = [1.0, 0.0, 2.0, 0.5, 1.0, 0.25];
    for m in [0.5, 0.7, 0.99] {
        assert_op(
            "expectile_loss",
            check_input_grads(&[vec![6]], DRAWS, 41, |g, v| {
                g.expectile_loss(v[0], &target, Some(&weights), m)
            }),
        );
    }
    assert_op(
        "squared_error",
        check_input_grads(&[vec![3, 2]], DRAWS, 42, |g, v| {
            g.squared_error(v[0], &target, Some(&[1.0, 0.5, 2.0]))
        }),
    );
    assert_op(
        "squared_error unweighted",
        check_input_grads(&[vec![3, 2]], DRAWS, 43, |g, v| g.squared_error(v[0], &target, None)),
    );
}

#[test]
fn mlp_and_transformer_parameters() {
    let mut rng = SeedStream::new(50).rng();
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[3, 8, 8, 2], &mut rng);
    let x: Vec<f64> = (0..15).map(|_| standard_normal(&mut rng)).collect();
    let worst = check_param_grads(&store, DRAWS, 51, |g, s| {
        let xv = g.constant(vec![5, 3], x.clone())?;
        let y = mlp.forward(g, s, xv)?;
        readout(g, y)
    });
    assert_op("mlp params", worst);

    let mut store = ParamStore::new();
    let block = TransformerBlock::new(&mut store, "block", 4, 2, 3, &mut rng);
    let x: Vec<f64> = (0..24).map(|_| standard_normal(&mut rng)).collect();
    let worst = check_param_grads(&store, DRAWS, 52, |g, s| {
        let xv = g.constant(vec![6, 4], x.clone())?;
        let y = block.forward(g, s, xv, 2, 3)?;
        readout(g, y)
    });
    assert_op("transformer params", worst);
}

#[test]
fn cvae_loss_parameters() {
    let env = MazeEnv::builtin(LayoutId::Gridworld5).unwrap();
    let mut arch = CvaeArch::for_env(&env);
    arch.hidden = vec![8, 8];
    arch.latent_dim = 3;
    let model = CvaeModel::new(arch, 60).unwrap();
    let mut b = CvaeBatch::default();
    b.push(&[1.1, 2.9], 0, &[3.0, 3.0]);
    b.push(&[3.9, 0.2], 2, &[1.0, 4.0]);
    b.push(&[2.0, 2.1], 3, &[2.0, 0.0]);
    let mut rng = SeedStream::new(61).rng();
    let eps: Vec<f64> = (0..9).map(|_| standard_normal(&mut rng)).collect();
    let worst = check_param_grads(&model.store, 2 * DRAWS, 62, |g, s| {
        let mut m = model.clone();
        m.store = s.clone();
        m.loss(g, &b, &eps)
    });
    assert_op("cvae loss params", worst);
}

#[test]
fn unused_inputs_get_zero_gradient() {
    let worst = check_input_grads(&[vec![2, 2], vec![2, 2]], 10, 70, |g: &mut Graph, v| {
        let y = g.square(v[0]);
        readout(g, y)
    });
    assert_op("partial graph", worst);
}
