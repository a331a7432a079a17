use irss_core::diffcore::{Architecture, InputShape, LayerSpec, ParamSet, Tape, Tensor};
use irss_core::objectives::{birm_penalty, env_slices, BirmInner, LossWeights, PenaltyKind};
use irss_core::synthdata::{sample_scm, Dataset, ScmConfig};
use irss_core::trainer::{train, EnvSource, Method, TrainConfig};
use irss_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scm_set(n: usize) -> (Dataset, Architecture) {
    let cfg = ScmConfig::default_instance(0);
    let parts = (0..3).map(|e| sample_scm(&cfg, e, n, 40 + e as u64).unwrap()).collect();
    let arch = Architecture {
        input: InputShape::Vector(10),
        extractor: vec![LayerSpec::Affine { out: 8 }, LayerSpec::Relu, LayerSpec::Affine { out: 4 }],
        classes: 2,
    };
    (Dataset::concat(parts), arch)
}

fn irss_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(seed);
    cfg.weights = LossWeights {
        lambda_adv: 0.5,
        lambda_ent: 0.1,
        lambda_irm: 2.0,
        penalty: PenaltyKind::Irmv1,
    };
    cfg.k_env = 3;
    cfg.bigsteps = 2;
    cfg.steps = 15;
    cfg.batch_size = 32;
    cfg.log_every = 5;
    cfg
}

fn random_birm_instance(seed: u64) -> (Tensor, ParamSet, Vec<usize>, Vec<Option<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (12, 3);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let mut head = ParamSet::default();
    head.push("w", Tensor::new(vec![d, 2], (0..2 * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
    head.push("b", Tensor::new(vec![2], vec![rng.random_range(-0.5..0.5), 0.0]).unwrap());
    let y = (0..n).map(|_| rng.random_range(0..2)).collect();
    let envs = (0..n).map(|i| Some(i % 2)).collect();
    (Tensor::from_rows(&rows).unwrap(), head, y, envs)
}

fn birm_value(features: &Tensor, head: &ParamSet, y: &[usize], envs: &[Option<usize>], inner: &BirmInner) -> f64 {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let h = head.bind(&mut tape);
    let slices = env_slices(envs).unwrap();
    let p = birm_penalty(&mut tape, f, &h, head, y, &slices, inner).unwrap();
    tape.value(p).item()
}

#[test]
fn one_small_inner_step_never_hurts_an_environment() {
    let inner = BirmInner {
        steps: 1,
        lr: 0.05,
        envelope: true,
    };
    for seed in 0..30 {
        let (f, head, y, envs) = random_birm_instance(seed);
        for env in 0..2 {
            let only: Vec<Option<usize>> = envs.iter().map(|e| e.filter(|&v| v == env)).collect();
            let rows: Vec<usize> = (0..y.len()).filter(|&i| only[i].is_some()).collect();
            let sub = Tensor::from_rows(&rows.iter().map(|&i| f.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let ys: Vec<usize> = rows.iter().map(|&i| y[i]).collect();
            let term = birm_value(&sub, &head, &ys, &vec![Some(0); rows.len()], &inner);
            assert!(term >= -1e-6, "seed {seed} env {env}: {term}");
        }
    }
}

#[test]
fn birm_is_invariant_to_row_order() {
    let inner = BirmInner::default();
    for seed in 0..10 {
        let (f, head, y, envs) = random_birm_instance(seed);
        let n = y.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let pf = Tensor::from_rows(&perm.iter().map(|&i| f.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let py: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let pe: Vec<Option<usize>> = perm.iter().map(|&i| envs[i]).collect();
        let a = birm_value(&f, &head, &y, &envs, &inner);
        let b = birm_value(&pf, &head, &py, &pe, &inner);
        assert!((a - b).abs() < 1e-10 * a.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn identical_environments_contribute_equally() {
    let inner = BirmInner::default();
    let (f, head, y, _) = random_birm_instance(3);
    let n = y.len();
    let doubled = Tensor::from_rows(&(0..2 * n).map(|i| f.row(i % n).to_vec()).collect::<Vec<_>>()).unwrap();
    let dy: Vec<usize> = (0..2 * n).map(|i| y[i % n]).collect();
    let de: Vec<Option<usize>> = (0..2 * n).map(|i| Some(i / n)).collect();
    let single = birm_value(&f, &head, &y, &vec![Some(0); n], &inner);
    let both = birm_value(&doubled, &head, &dy, &de, &inner);
    assert!((both - 2.0 * single).abs() < 1e-10);
}

#[test]
fn erm_loss_decreases() {
    let (data, arch) = scm_set(200);
    let mut cfg = Method::Erm.apply(&TrainConfig::new(3));
    cfg.bigsteps = 3;
    cfg.steps = 40;
    let s = train(&data, &arch, &cfg).unwrap();
    let first = s.steps[0].losses.erm;
    let tail: f64 = s.steps[s.steps.len() - 10..].iter().map(|r| r.losses.erm).sum::<f64>() / 10.0;
    assert!(tail < first, "{tail} !< {first}");
    assert!(s.history.last().unwrap().train_acc > 0.8);
}

#[test]
fn training_is_deterministic() {
    let (data, arch) = scm_set(60);
    let cfg = irss_config(11);
    let a = train(&data, &arch, &cfg).unwrap();
    let b = train(&data, &arch, &cfg).unwrap();
    assert_eq!(a, b);
    let c = train(&data, &arch, &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn zero_weight_irss_reproduces_erm_bitwise() {
    let (data, arch) = scm_set(60);
    let mut base = irss_config(5);
    base.weights = LossWeights {
        lambda_adv: 0.0,
        lambda_ent: 0.0,
        lambda_irm: 0.0,
        penalty: PenaltyKind::Birm,
    };
    base.k_env = 1;
    for method in [Method::IrssIrmv1, Method::IrssBirm] {
        let irss = train(&data, &arch, &method.apply(&base)).unwrap();
        let erm = train(&data, &arch, &Method::Erm.apply(&base)).unwrap();
        assert_eq!(irss.params, erm.params);
        assert_eq!(irss.steps, erm.steps);
        assert_eq!(irss.history, erm.history);
    }
}

#[test]
fn baselines_only_touch_their_own_terms() {
    let (data, arch) = scm_set(60);
    let cfg = irss_config(2);
    let irm = train(&data, &arch, &Method::Irm.apply(&cfg)).unwrap();
    assert_eq!(irm.counters.discriminator_calls, 0);
    assert_eq!(irm.counters.style_clusterings, 0);
    assert_eq!(irm.counters.irm_penalty_calls, cfg.total_steps());
    assert_eq!(irm.counters.env_clusterings, 0);

    let adv = train(&data, &arch, &Method::AdvOnly.apply(&cfg)).unwrap();
    assert_eq!(adv.counters.irm_penalty_calls, 0);
    assert_eq!(adv.counters.discriminator_calls, cfg.total_steps());
    assert_eq!(adv.counters.style_clusterings, cfg.bigsteps as u64);

    let full = train(&data, &arch, &Method::IrssBirm.apply(&cfg)).unwrap();
    assert_eq!(full.counters.irm_penalty_calls, cfg.total_steps());
    assert_eq!(full.counters.env_clusterings, cfg.total_steps());
    assert!(full.steps.iter().all(|r| r.losses.penalty_raw.is_finite()));
}

#[test]
fn full_set_environment_clustering_runs_once_per_bigstep() {
    let (data, arch) = scm_set(60);
    let mut cfg = Method::IrssIrmv1.apply(&irss_config(4));
    cfg.env_source = EnvSource::ClusteredPerBigstep;
    let s = train(&data, &arch, &cfg).unwrap();
    assert_eq!(s.counters.env_clusterings, cfg.bigsteps as u64);
    assert!(s.steps.iter().all(|r| r.env_count <= cfg.k_env && r.env_count >= 1));
}

#[test]
fn runtime_failures_carry_the_iteration() {
    let (mut data, arch) = scm_set(20);
    for s in &mut data.samples {
        s.x[0] = f64::NAN;
    }
    let err = train(&data, &arch, &Method::Erm.apply(&TrainConfig::new(0))).unwrap_err();
    assert_eq!(err.iter(), Some(0));
    assert!(matches!(err, Error::AtIter { .. }));
}
