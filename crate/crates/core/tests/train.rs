use recursor::gradcheck::rel_err;
use recursor::kvcache::KvMode;
use recursor::model::{Model, ModelSpec, ShareStrategy};
use recursor::routing::RouterConfig;
use recursor::train::{data, loss_and_gradients, Corpus, ExitMode, KdMode, LossSchedule, LrSchedule, TrainConfig, Trainer};
use recursor::Error;

fn micro(router: Option<RouterConfig>, seed: u64) -> Model {
    let spec = ModelSpec::toy(2, 2, ShareStrategy::Cycle);
    assert_eq!(spec.d_model, 8);
    Model::init(&spec, router, KvMode::RecursionWise, seed).unwrap()
}

fn byte_model(router: Option<RouterConfig>, seed: u64) -> Model {
    let spec = ModelSpec { vocab: data::VOCAB, d_model: 16, d_head: 8, d_inter: 32, ..ModelSpec::toy(4, 2, ShareStrategy::Cycle) };
    Model::init(&spec, router, KvMode::RecursionWise, seed).unwrap()
}

/// Central differences of the total loss over every trainable value.
fn max_fd_error(model: &Model, seq: &[usize], schedule: &LossSchedule) -> f64 {
    let analytic = loss_and_gradients(model, seq, schedule).unwrap().grads;
    let names: Vec<String> = model.weights.params.names().filter(|n| !n.starts_with("state.")).cloned().collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for name in names {
        let len = model.weights.params.get(&name).unwrap().len();
        for i in 0..len {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.weights.params.get_mut(&name).unwrap().data_mut()[i] += delta;
                loss_and_gradients(&m, seq, schedule).unwrap().parts.total
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.get(&name).map_or(0.0, |g| g[i]);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

#[test]
fn total_loss_gradient_matches_finite_differences() {
    let seq = [3, 17, 9, 30, 4, 11, 25];
    let plain = micro(None, 1);
    let weighted = LossSchedule { mode: ExitMode::WeightedAvg, ..LossSchedule::single() };
    assert!(max_fd_error(&plain, &seq, &weighted) <= 1e-3);
    let mut ec = RouterConfig::expert_choice();
    ec.aux_coeff = 0.1;
    assert!(max_fd_error(&micro(Some(ec), 2), &seq, &LossSchedule::single()) <= 1e-3);
    assert!(max_fd_error(&micro(Some(RouterConfig::token_choice()), 3), &seq, &LossSchedule::single()) <= 1e-3);
}

#[test]
fn zero_coefficients_reproduce_plain_losses() {
    let seq = vec![1, 5, 9, 2, 7, 3];
    let plain = micro(None, 4);
    let base = loss_and_gradients(&plain, &seq, &LossSchedule::single()).unwrap();
    let off = LossSchedule { kd: KdMode::ForwardKl, kd_coeff: 0.0, ..LossSchedule::single() };
    let r = loss_and_gradients(&plain, &seq, &off).unwrap();
    assert_eq!(r.parts, base.parts);
    assert_eq!(r.grads, base.grads);

    let mut ec = RouterConfig::expert_choice();
    ec.aux_coeff = 0.0;
    let mut tc = RouterConfig::token_choice();
    tc.balance_coeff = 0.0;
    tc.z_coeff = 0.0;
    for cfg in [ec, tc] {
        let m = micro(Some(cfg), 5);
        let r = loss_and_gradients(&m, &seq, &LossSchedule::single()).unwrap();
        assert_eq!(r.parts.total, r.parts.ce);
        assert_eq!((r.parts.aux, r.parts.balance, r.parts.z), (0.0, 0.0, 0.0));
    }
}

#[test]
fn loss_components_are_non_negative() {
    let seq = vec![1, 5, 9, 2, 7, 3, 8, 8];
    let schedules = [
        LossSchedule { mode: ExitMode::Aggressive(0.1), kd: KdMode::ForwardKl, kd_coeff: 1.0 },
        LossSchedule { mode: ExitMode::UnweightedAvg, kd: KdMode::LayerwiseDyna, kd_coeff: 1.0 },
    ];
    for s in schedules {
        let p = loss_and_gradients(&micro(None, 6), &seq, &s).unwrap().parts;
        assert!(p.ce >= 0.0 && p.kd >= 0.0);
    }
    for cfg in [RouterConfig::expert_choice(), RouterConfig::token_choice()] {
        let p = loss_and_gradients(&micro(Some(cfg), 7), &seq, &LossSchedule::single()).unwrap().parts;
        assert!(p.aux >= 0.0 && p.balance >= 0.0 && p.z >= 0.0);
    }
}

fn smoke_config(steps: usize) -> TrainConfig {
    TrainConfig { steps, batch_size: 4, seq_len: 24, lr: 1e-2, lr_schedule: LrSchedule::Constant, seed: 11, ..Default::default() }
}

#[test]
fn copy_task_loss_decreases() {
    let mut t = Trainer::new(byte_model(None, 8), smoke_config(200)).unwrap();
    let mut losses = Vec::new();
    t.fit(&Corpus::copy_default(), |_, m| {
        losses.push(m.loss.total);
        Ok(())
    })
    .unwrap();
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.6 * head, "{head} -> {tail}");
}

#[test]
fn seeded_runs_are_identical() {
    let run = || {
        let mut t = Trainer::new(byte_model(Some(RouterConfig::expert_choice()), 9), smoke_config(5)).unwrap();
        let mut lines = Vec::new();
        t.fit(&Corpus::ModAdd { modulus: 13 }, |_, m| {
            lines.push(serde_json::to_string(m).unwrap());
            Ok(())
        })
        .unwrap();
        lines
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_aborts() {
    let mut m = byte_model(None, 10);
    m.weights.params.get_mut("embed").unwrap().data_mut()[usize::from(b'a') * 16] = f64::NAN;
    let mut t = Trainer::new(m, smoke_config(3)).unwrap();
    let err = t.fit(&Corpus::Copy { min_len: 2, max_len: 2, alphabet: 1 }, |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn loss_free_balancing_moves_the_bias() {
    let mut cfg = RouterConfig::token_choice();
    cfg.balance_mode = recursor::routing::BalanceMode::LossFree;
    cfg.balance_coeff = 0.0;
    cfg.bias_update_rate = 0.01;
    let mut t = Trainer::new(byte_model(Some(cfg), 12), smoke_config(3)).unwrap();
    t.fit(&Corpus::Text, |_, _| Ok(())).unwrap();
    let bias = t.model.weights.params.get(recursor::routing::BIAS_STATE).unwrap();
    assert!(bias.data().iter().any(|&b| b != 0.0));
}
