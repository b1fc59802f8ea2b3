#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use recursor::gradcheck::{self, rel_err, GradReport};
use recursor::graph::{Graph, Heads, Var};
use recursor::model::Model;
use recursor::tensor::Tensor;
use recursor::Result;

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn rnd(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn unit(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.1, 0.9, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Reduces `x` to a scalar through fixed random weights so that no
/// symmetry hides a wrong gradient.
fn project(g: &mut Graph, x: Var) -> Result<Var> {
    let w = rnd(g.value(x).shape(), 999);
    let w = g.constant(w);
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

fn elementwise(name: &'static str, f: fn(&mut Graph, Var) -> Var) -> Case {
    (name, vec![rnd(&[3, 4], 1)], Box::new(move |g, v| {
        let y = f(g, v[0]);
        project(g, y)
    }))
}

pub fn op_cases() -> Vec<Case> {
    vec![
        ("matmul", vec![rnd(&[3, 4], 1), rnd(&[4, 2], 2)], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y)
        })),
        ("matmul_nt", vec![rnd(&[3, 4], 1), rnd(&[2, 4], 2)], Box::new(|g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            project(g, y)
        })),
        ("transpose", vec![rnd(&[3, 4], 1)], Box::new(|g, v| {
            let y = g.transpose(v[0])?;
            project(g, y)
        })),
        ("add", vec![rnd(&[3, 4], 1), rnd(&[3, 4], 2)], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y)
        })),
        ("sub", vec![rnd(&[3, 4], 1), rnd(&[3, 4], 2)], Box::new(|g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y)
        })),
        ("mul", vec![rnd(&[3, 4], 1), rnd(&[3, 4], 2)], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y)
        })),
        ("scale", vec![rnd(&[3, 4], 1)], Box::new(|g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y)
        })),
        ("scale_rows", vec![rnd(&[3, 4], 1), rnd(&[3], 2)], Box::new(|g, v| {
            let y = g.scale_rows(v[0], v[1])?;
            project(g, y)
        })),
        elementwise("silu", Graph::silu),
        elementwise("sigmoid", Graph::sigmoid),
        elementwise("tanh", Graph::tanh),
        elementwise("gelu", Graph::gelu),
        elementwise("softmax", Graph::softmax),
        elementwise("log_softmax", Graph::log_softmax),
        elementwise("logsumexp_rows", Graph::logsumexp_rows),
        ("rmsnorm", vec![rnd(&[3, 4], 1), rnd(&[4], 2)], Box::new(|g, v| {
            let y = g.rmsnorm(v[0], v[1])?;
            project(g, y)
        })),
        ("rope", vec![rnd(&[3, 8], 1)], Box::new(|g, v| {
            let y = g.rope(v[0], &[0, 2, 5], 4)?;
            project(g, y)
        })),
        ("attention", vec![rnd(&[3, 8], 1), rnd(&[4, 4], 2), rnd(&[4, 4], 3)], Box::new(|g, v| {
            let heads = Heads { n_heads: 2, n_kv_heads: 1, d_head: 4 };
            let y = g.attention(v[0], v[1], v[2], &[1, 2, 3], &[0, 1, 2, 3], heads)?;
            project(g, y)
        })),
        ("embedding", vec![rnd(&[6, 3], 1)], Box::new(|g, v| {
            let y = g.embedding(v[0], &[1, 4, 1])?;
            project(g, y)
        })),
        ("gather_rows", vec![rnd(&[4, 3], 1)], Box::new(|g, v| {
            let y = g.gather_rows(v[0], &[3, 0])?;
            project(g, y)
        })),
        ("scatter_add_rows", vec![rnd(&[4, 3], 1), rnd(&[2, 3], 2)], Box::new(|g, v| {
            let y = g.scatter_add_rows(v[0], v[1], &[1, 3])?;
            project(g, y)
        })),
        ("concat_rows", vec![rnd(&[2, 3], 1), rnd(&[1, 3], 2)], Box::new(|g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            project(g, y)
        })),
        ("pick", vec![rnd(&[3, 4], 1)], Box::new(|g, v| {
            let y = g.pick(v[0], &[2, 0, 3])?;
            project(g, y)
        })),
        ("reshape", vec![rnd(&[3, 4], 1)], Box::new(|g, v| {
            let y = g.reshape(v[0], vec![2, 6])?;
            project(g, y)
        })),
        ("sum", vec![rnd(&[3, 4], 1)], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })),
        ("mean", vec![rnd(&[3, 4], 1)], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.mean(y))
        })),
        ("cross_entropy", vec![rnd(&[3, 5], 1)], Box::new(|g, v| g.cross_entropy(v[0], &[4, 0, 2]))),
        ("bce", vec![unit(&[5], 1)], Box::new(|g, v| g.bce(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0]))),
        ("forward_kl", vec![rnd(&[3, 5], 1)], Box::new(|g, v| g.forward_kl(&rnd(&[3, 5], 7), v[0]))),
        ("mse", vec![rnd(&[3, 4], 1), rnd(&[3, 4], 2)], Box::new(|g, v| g.mse(v[0], v[1]))),
    ]
}

pub fn run_op_cases() -> Vec<(&'static str, GradReport)> {
    op_cases().into_iter().map(|(name, inputs, f)| (name, gradcheck::check(&inputs, f).unwrap())).collect()
}

/// Worst relative error between the model's loss gradient and central
/// differences over every trainable value.
pub fn model_fd_error(model: &Model, seq: &[usize], schedule: &recursor::train::LossSchedule) -> f64 {
    use recursor::train::loss_and_gradients;
    let analytic = loss_and_gradients(model, seq, schedule).unwrap().grads;
    let names: Vec<String> = model.weights.params.names().filter(|n| !n.starts_with("state.")).cloned().collect();
    let h = gradcheck::STEP;
    let mut worst: f64 = 0.0;
    let mut m = model.clone();
    for name in names {
        let len = model.weights.params.get(&name).unwrap().len();
        for i in 0..len {
            let x0 = model.weights.params.get(&name).unwrap().data()[i];
            let mut eval = |x: f64| {
                m.weights.params.get_mut(&name).unwrap().data_mut()[i] = x;
                loss_and_gradients(&m, seq, schedule).unwrap().parts.total
            };
            let numeric = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
            eval(x0);
            let a = analytic.get(&name).map_or(0.0, |g| g[i]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}
