use qprune::nn::{backward_with, LayerSpec, LossKind, Network, Target};
use qprune::pipeline::{train, Dataset, Model, Targets, TrainPlan, Trainer, WrapSpec};
use qprune::prune::{prune_backward, PruneConfig};
use qprune::quantize::{ste_backward, QuantizeConfig};
use qprune::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn regression_data(seed: u64, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x
        .chunks(3)
        .flat_map(|r| [0.5 * r[0] - r[1] + 0.25 * r[2], (r[0] * r[1]).tanh()])
        .collect();
    Dataset::new(
        Tensor::new(vec![n, 3], x).unwrap(),
        Targets::Values(Tensor::new(vec![n, 2], y).unwrap()),
    )
    .unwrap()
}

fn layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec::dense(3, 8),
        LayerSpec::Relu,
        LayerSpec::dense(8, 8),
        LayerSpec::Relu,
        LayerSpec::dense(8, 2),
    ]
}

fn plan(steps: u64) -> TrainPlan {
    let mut plan = TrainPlan::new(layers(), LossKind::Mse);
    plan.steps = steps;
    plan.batch_size = 8;
    plan.lr = 0.05;
    plan.seed = 21;
    plan
}

#[test]
fn empty_wraps_train_like_the_bare_network() {
    let data = regression_data(1, 64);
    let p = plan(40);
    let (model, _) = train(&p, &data).unwrap();

    let mut trainer = Trainer::new(p.clone()).unwrap();
    let mut net = {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        Network::new(p.layers.clone(), &mut rng).unwrap()
    };
    let mut sampler = trainer.sampler().clone();
    for _ in 0..p.steps {
        let idx = sampler.next_batch(data.len(), p.batch_size);
        let (x, t) = data.batch(&idx);
        let Targets::Values(v) = &t else { unreachable!() };
        net.train_step(&x, Target::Values(v), p.loss, p.lr).unwrap();
    }
    for (a, b) in model.network().params().iter().zip(net.params()) {
        assert_eq!(a, b);
    }
    trainer.run(&data, |_, _| Ok(())).unwrap();
    assert_eq!(trainer.model().network(), model.network());
}

#[test]
fn identical_plans_give_identical_streams() {
    let data = regression_data(2, 48);
    let mut p = plan(30);
    p.wraps[2] = WrapSpec {
        weight_prune: Some(PruneConfig::new(0.5, 0, 2, 4)),
        weight_quantize: Some(QuantizeConfig::new(8, 12)),
        feature_prune: None,
        feature_quantize: Some(QuantizeConfig::new(8, 14)),
    };
    let (m1, r1) = train(&p, &data).unwrap();
    let (m2, r2) = train(&p, &data).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(m1, m2);
}

#[test]
fn prune_then_quantize_regression_hits_target_sparsity() {
    let data = regression_data(3, 64);
    let mut p = plan(60);
    p.wraps[2] = WrapSpec {
        weight_prune: Some(PruneConfig::new(0.5, 0, 5, 4)),
        weight_quantize: Some(QuantizeConfig::new(8, 30)),
        feature_prune: None,
        feature_quantize: None,
    };
    let (model, records) = train(&p, &data).unwrap();
    let w = model.effective_weight(2).unwrap().unwrap();
    let mask = model.operators()[2].weight_prune.as_ref().unwrap().mask().unwrap();
    assert_eq!(mask.count_zeros(), 32);
    assert!(w.count_zeros() >= 32);
    for (m, v) in mask.data().iter().zip(w.data()) {
        if *m == 0.0 {
            assert_eq!(*v, 0.0);
        }
    }
    let last = records.last().unwrap();
    let rec = last.tensors.iter().find(|t| t.layer == 2 && t.role.tag() == "w").unwrap();
    assert_eq!(rec.sparsity, 0.5);
    assert!(rec.decimal_bits.is_some());
    assert!((last.performance_density * last.footprint_mb - last.metric).abs() <= 1e-12 * last.metric.abs());
}

#[test]
fn raw_weight_gradient_follows_the_structural_chain() {
    let data = regression_data(4, 16);
    let mut p = plan(0);
    p.wraps[2] = WrapSpec {
        weight_prune: Some(PruneConfig::new(0.4, 0, 1, 1)),
        weight_quantize: Some(QuantizeConfig::new(4, 0)),
        feature_prune: None,
        feature_quantize: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = Network::new(p.layers.clone(), &mut rng).unwrap();
    let mut model = Model::new(net, &p.wraps).unwrap();
    let (x, t) = data.batch(&(0..16).collect::<Vec<_>>());
    let Targets::Values(v) = &t else { unreachable!() };
    model.forward(&x, true).unwrap();
    let pass = model.forward(&x, true).unwrap();
    let (_, grad) = qprune::nn::loss_and_grad(LossKind::Mse, pass.output(), Target::Values(v)).unwrap();
    model.backward(&pass, &grad).unwrap();

    // dL/dw_eff from the cached layer input, then pushed through STE and mask
    let mut g = grad.clone();
    for i in (3..5).rev() {
        let spec = &p.layers[i];
        let w_eff = model.effective_weight(i).unwrap();
        g = backward_with(spec, w_eff.as_ref(), &pass.activations()[i], &g).unwrap().0;
    }
    let w_eff = model.effective_weight(2).unwrap().unwrap();
    let (_, grads) = backward_with(&p.layers[2], Some(&w_eff), &pass.activations()[2], &g).unwrap();
    let ops = &model.operators()[2];
    let q = ops.weight_quantize.as_ref().unwrap();
    let expected = prune_backward(
        &ste_backward(&grads.unwrap().weight, q.decimal_bits().unwrap(), 4, true),
        ops.weight_prune.as_ref().unwrap().mask().unwrap(),
    )
    .unwrap();
    assert_eq!(model.network().params()[2].as_ref().unwrap().grad_weight, expected);
}
