use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nets::ModelSpec;

/// Logits `x W + b` over a `dim`-pixel input.
fn linear_model(dim: usize, w: &[f64], b: &[f64]) -> Model<f64> {
    let classes = b.len();
    let mut m = Model::<f64>::build(ModelSpec::mlp([1, 1, dim], classes, vec![], 0.0, 0)).unwrap();
    m.params_mut()[0].data_mut().copy_from_slice(w);
    m.params_mut()[1].data_mut().copy_from_slice(b);
    m
}

fn random_inputs<E: Element>(rng: &mut ChaCha8Rng, n: usize, shape: [usize; 3]) -> Tensor<E> {
    let len = n * shape.iter().product::<usize>();
    let mut dims = vec![n];
    dims.extend(shape);
    // Include exact 0/1 pixels so the box constraint is exercised.
    let data = (0..len)
        .map(|_| match rng.random_range(0..10) {
            0 => E::zero(),
            1 => E::one(),
            _ => E::of(rng.random::<f64>()),
        })
        .collect();
    Tensor::new(dims, data).unwrap()
}

fn assert_contained<E: Element>(x: &Tensor<E>, adv: &Tensor<E>, eps: f64) {
    assert_eq!(x.shape(), adv.shape());
    for (a, b) in x.data().iter().zip(adv.data()) {
        let (a, b) = (a.f64(), b.f64());
        assert!((b - a).abs() <= eps + 1e-9, "|{b} - {a}| > {eps}");
        assert!((0.0..=1.0).contains(&b));
    }
}

#[test]
fn presets_carry_table_values() {
    let t = AttackConfig::preset("mnist-train").unwrap();
    assert_eq!((t.family, t.epsilon, t.alpha, t.iters), (AttackFamily::Pgd, 0.3, 0.01, 40));
    let e = AttackConfig::preset("mnist-eval").unwrap();
    assert_eq!((e.epsilon, e.alpha, e.iters), (0.3, 0.01, 50));
    let r = AttackConfig::preset("rgb-eval").unwrap();
    assert_eq!((r.epsilon, r.alpha, r.iters), (8.0 / 255.0, 2.0 / 255.0, 50));
    for name in ATTACK_PRESETS {
        AttackConfig::preset(name).unwrap().validate().unwrap();
    }
    assert!(AttackConfig::preset("cifar").is_none());
}

#[test]
fn config_validation() {
    let mut c = AttackConfig::pgd(0.3, 0.01, 5);
    c.norm = Norm::L2;
    assert!(c.validate().is_err());
    assert!(AttackConfig::pgd(0.3, 0.0, 5).validate().is_err());
    assert!(AttackConfig::pgd(-0.1, 0.01, 5).validate().is_err());
    assert_eq!(AttackConfig::pgd(0.1, 0.2, 5).warnings().len(), 1);
    assert!(AttackConfig::pgd(0.3, 0.01, 5).warnings().is_empty());
}

#[test]
fn zero_radius_returns_input_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Model::<f32>::build(ModelSpec::mlp([1, 3, 3], 3, vec![5], 0.0, 1)).unwrap();
    let x = random_inputs::<f32>(&mut rng, 7, [1, 3, 3]);
    let y = vec![0, 1, 2, 0, 1, 2, 0];
    assert_eq!(pgd_attack(&m, &x, &y, &AttackConfig::pgd(0.0, 0.01, 10)).unwrap(), x);
    assert_eq!(square_attack(&m, &x, &y, &AttackConfig::square(0.0, 10)).unwrap(), x);
}

#[test]
fn single_pgd_step_matches_closed_form() {
    let w = [0.7, -1.2, 0.4, 0.9];
    let b = [0.1, -0.3];
    let m = linear_model(2, &w, &b);
    let x0 = [0.35, 0.98];
    let y = 0;
    let z = [x0[0] * w[0] + x0[1] * w[2] + b[0], x0[0] * w[1] + x0[1] * w[3] + b[1]];
    let e = [z[0].exp(), z[1].exp()];
    let p = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
    let dz = [p[0] - 1.0, p[1]];
    let dx = [w[0] * dz[0] + w[1] * dz[1], w[2] * dz[0] + w[3] * dz[1]];
    let (eps, alpha) = (0.3, 0.05);
    let expected: Vec<f64> = (0..2).map(|i| (x0[i] + alpha * dx[i].signum()).clamp(0.0, 1.0)).collect();
    let mut cfg = AttackConfig::pgd(eps, alpha, 1);
    cfg.random_start = false;
    let x = Tensor::new([1, 1, 1, 2], x0.to_vec()).unwrap();
    let adv = pgd_attack(&m, &x, &[y], &cfg).unwrap();
    for i in 0..2 {
        assert!((adv.data()[i] - expected[i]).abs() < 1e-15);
    }
    assert_eq!(adv.data()[1], 1.0);
}

#[test]
fn attacks_stay_in_the_ball() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let m = Model::<f32>::build(ModelSpec::lenet([1, 16, 16], 4, 0.0, 5)).unwrap();
    for trial in 0..6 {
        let eps = [0.3, 0.01, 8.0 / 255.0, 0.5, 1e-3, 0.77][trial];
        let x = random_inputs::<f32>(&mut rng, 5, [1, 16, 16]);
        let y: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
        let pgd = pgd_attack(&m, &x, &y, &AttackConfig::pgd(eps, eps / 4.0, 3).with_seed(trial as u64)).unwrap();
        assert_contained(&x, &pgd, eps);
        let sq = square_attack(&m, &x, &y, &AttackConfig::square(eps, 20).with_seed(trial as u64)).unwrap();
        assert_contained(&x, &sq, eps);
    }
}

#[test]
fn attacks_are_deterministic_per_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = Model::<f32>::build(ModelSpec::mlp([1, 4, 4], 3, vec![8], 0.0, 2)).unwrap();
    let x = random_inputs::<f32>(&mut rng, 150, [1, 4, 4]);
    let y: Vec<usize> = (0..150).map(|i| i % 3).collect();
    let cfg = AttackConfig::pgd(0.2, 0.05, 4).with_seed(11);
    assert_eq!(pgd_attack(&m, &x, &y, &cfg).unwrap(), pgd_attack(&m, &x, &y, &cfg).unwrap());
    assert_ne!(pgd_attack(&m, &x, &y, &cfg).unwrap(), pgd_attack(&m, &x, &y, &cfg.clone().with_seed(12)).unwrap());
    let sq = AttackConfig::square(0.2, 15).with_seed(4);
    assert_eq!(square_attack(&m, &x, &y, &sq).unwrap(), square_attack(&m, &x, &y, &sq).unwrap());
}

#[test]
fn square_stripe_init_and_monotone_margins() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = Model::<f32>::build(ModelSpec::mlp([1, 6, 6], 3, vec![16], 0.0, 3)).unwrap();
    let x = random_inputs::<f32>(&mut rng, 4, [1, 6, 6]);
    let y = vec![0, 1, 2, 0];
    let init = square_attack(&m, &x, &y, &AttackConfig::square(0.1, 0)).unwrap();
    assert_contained(&x, &init, 0.1);
    // Interior pixels of one column all moved the same way.
    let col: Vec<f64> = (0..6).map(|r| init.data()[r * 6 + 2] as f64 - x.data()[r * 6 + 2] as f64).collect();
    let inner: Vec<f64> = col.iter().zip(0..6).filter(|(_, r)| (0.1..=0.9).contains(&(x.data()[r * 6 + 2] as f64))).map(|(d, _)| d.signum()).collect();
    assert!(inner.windows(2).all(|w| w[0] == w[1]));

    let (_, trace) = square_attack_with_trace(&m, &x, &y, &AttackConfig::square(0.1, 100).with_seed(9)).unwrap();
    for t in &trace {
        assert_eq!(t.len(), 101);
        assert!(t.windows(2).all(|w| w[1] <= w[0]));
    }
}

/// Exposes probabilities only and counts queries.
struct Blackbox<'a> {
    model: &'a Model<f32>,
    queries: std::sync::atomic::AtomicUsize,
}

impl ProbabilityOracle<f32> for Blackbox<'_> {
    fn input_shape(&self) -> [usize; 3] {
        self.model.spec().input_shape
    }

    fn predict_proba(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.queries.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.model.predict_proba(x)
    }
}

#[test]
fn square_needs_only_probability_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = Model::<f32>::build(ModelSpec::mlp([1, 4, 4], 2, vec![8], 0.0, 6)).unwrap();
    let bb = Blackbox { model: &m, queries: Default::default() };
    let x = random_inputs::<f32>(&mut rng, 3, [1, 4, 4]);
    let adv = square_attack(&bb, &x, &[0, 1, 0], &AttackConfig::square(0.2, 10)).unwrap();
    assert_contained(&x, &adv, 0.2);
    assert!(bb.queries.into_inner() >= 1);
}

#[test]
fn deepfool_hits_the_hyperplane() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let dim = rng.random_range(2..6);
        let w: Vec<f64> = (0..2 * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let b = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
        let m = linear_model(dim, &w, &b);
        let x: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
        let diff: Vec<f64> = (0..dim).map(|i| w[i * 2 + 1] - w[i * 2]).collect();
        let margin = x.iter().zip(&diff).map(|(a, d)| a * d).sum::<f64>() + b[1] - b[0];
        let dist = margin.abs() / diff.iter().map(|d| d * d).sum::<f64>().sqrt();
        let r = deepfool(&m, &x, &DeepFoolConfig::default(), None).unwrap();
        assert!(r.success);
        assert!((r.norm - dist * 1.02).abs() < 1e-4, "{} vs {}", r.norm, dist * 1.02);
    }
}

#[test]
fn deepfool_edge_cases() {
    let m = linear_model(2, &[1.0, -1.0, 0.5, 0.2], &[0.0, 0.0]);
    let x = [0.8, 0.1];
    let own = m.predict(&Tensor::new([1, 2], x.to_vec()).unwrap()).unwrap()[0];
    let r = deepfool(&m, &x, &DeepFoolConfig::default(), Some(1 - own)).unwrap();
    assert_eq!((r.norm, r.iterations), (0.0, 0));
    let r = deepfool(&m, &x, &DeepFoolConfig { overshoot: 0.02, max_iter: 0 }, None).unwrap();
    assert!(!r.success);
    assert_eq!(r.norm, 0.0);
}

#[test]
fn accuracy_tie_rule_on_uniform_model() {
    let mut m = Model::<f32>::build(ModelSpec::mlp([1, 1, 3], 2, vec![4], 0.0, 0)).unwrap();
    for p in &mut m.params_mut()[2..] {
        p.data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_inputs::<f32>(&mut rng, 10, [1, 1, 3]).reshape([10, 1, 1, 3]).unwrap();
    let d = Dataset::new("t", x, vec![0, 1, 1, 0, 1, 0, 0, 1, 1, 0], 2).unwrap();
    assert_eq!(evaluate_accuracy(&m, &d).unwrap(), 0.5);
    let report = evaluate_robustness(&m, &d, &[AttackConfig::pgd(0.0, 0.01, 5), AttackConfig::square(0.0, 5)]).unwrap();
    assert_eq!(report.attacks.len(), 2);
    assert!(report.attacks.iter().all(|a| a.robustness == report.clean_accuracy));
    assert!(matches!(Dataset::<f32>::new("e", Tensor::zeros([0, 1, 1, 3]), vec![], 2), Err(Error::EmptyDataset)));
}
