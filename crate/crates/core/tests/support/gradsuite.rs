//! Random tiny instances for every differentiable piece of the objective,
//! each checked against central differences.

#![allow(dead_code)]

use irss_core::diffcore::gradcheck::{check_gradients, check_gradients_against, GradReport};
use irss_core::diffcore::{head_logits, run_extractor, Architecture, InputShape, LayerSpec, ParamSet, Tape, Tensor, Var};
use irss_core::objectives::{
    adv_loss, birm_penalty, cross_entropy, ent_loss, env_slices, erm_loss, irmv1_penalty, refine_head, total_loss,
    BatchLabels, BirmInner, EntropySign, Heads, LossWeights, ObjectiveConfig, PenaltyKind, PROB_FLOOR,
};
use irss_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type Case = fn(u64) -> Result<GradReport>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn labels(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Environment labels with every environment present.
fn env_labels(rng: &mut impl Rng, n: usize, k: usize) -> Vec<Option<usize>> {
    let mut e: Vec<Option<usize>> = (0..n).map(|i| Some(i % k)).collect();
    for i in (1..n).rev() {
        e.swap(i, rng.random_range(0..=i));
    }
    e
}

fn head(params: &[Tensor]) -> ParamSet {
    let mut set = ParamSet::default();
    set.push("w", params[0].clone());
    set.push("b", params[1].clone());
    set
}

pub fn affine_relu(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let inputs = [
        rand_tensor(&mut r, vec![4, 3], 1.0),
        rand_tensor(&mut r, vec![3, 5], 1.0),
        rand_tensor(&mut r, vec![5], 0.5),
    ];
    check_gradients(&inputs, EPS, |t: &mut Tape, v: &[Var]| {
        let z = t.matmul(v[0], v[1])?;
        let z = t.add_bias(z, v[2])?;
        let a = t.relu(z);
        let s = t.square(a);
        Ok(t.sum(s))
    })
}

pub fn conv_pool(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let inputs = [
        rand_tensor(&mut r, vec![2, 2, 6, 6], 1.0),
        rand_tensor(&mut r, vec![3, 2, 3, 3], 0.5),
        rand_tensor(&mut r, vec![3], 0.2),
        rand_tensor(&mut r, vec![2, 3, 2, 2], 1.0),
    ];
    check_gradients(&inputs, EPS, |t: &mut Tape, v: &[Var]| {
        let c = t.conv2d(v[0], v[1], v[2])?;
        let p = t.mean_pool2(c)?;
        let m = t.mul(p, v[3])?;
        let flat = t.reshape(m, vec![2, 12])?;
        let s = t.sum_rows(flat)?;
        let q = t.square(s);
        Ok(t.mean(q))
    })
}

pub fn softmax_log(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let y = labels(&mut r, 5, 3);
    let inputs = [rand_tensor(&mut r, vec![5, 3], 2.0)];
    check_gradients(&inputs, EPS, move |t: &mut Tape, v: &[Var]| {
        let p = t.softmax(v[0])?;
        let picked = t.pick(p, &y)?;
        let l = t.ln_clamped(picked, PROB_FLOOR);
        let rows = t.select_rows(v[0], &[4, 0, 0])?;
        let extra = t.square(rows);
        let extra = t.sum(extra);
        let l = t.sum(l);
        let l = t.scale(l, -0.5);
        t.add(l, extra)
    })
}

pub fn softmax_nll(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let y = labels(&mut r, 6, 4);
    let inputs = [rand_tensor(&mut r, vec![6, 4], 3.0)];
    check_gradients(&inputs, EPS, move |t: &mut Tape, v: &[Var]| {
        let nll = t.softmax_nll(v[0], &y, PROB_FLOOR)?;
        let s = t.square(nll);
        Ok(t.sum(s))
    })
}

pub fn erm(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let y = labels(&mut r, 6, 3);
    let inputs = [rand_tensor(&mut r, vec![6, 3], 2.0)];
    check_gradients(&inputs, EPS, move |t: &mut Tape, v: &[Var]| {
        let p = t.softmax(v[0])?;
        erm_loss(t, p, &y)
    })
}

pub fn cross_entropy_logits(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let y = labels(&mut r, 7, 2);
    let inputs = [rand_tensor(&mut r, vec![7, 2], 2.0)];
    check_gradients(&inputs, EPS, move |t: &mut Tape, v: &[Var]| cross_entropy(t, v[0], &y))
}

pub fn entropy(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let inputs = [rand_tensor(&mut r, vec![5, 4], 2.0)];
    check_gradients(&inputs, EPS, |t: &mut Tape, v: &[Var]| {
        let p = t.softmax(v[0])?;
        ent_loss(t, p)
    })
}

pub fn adversarial(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let s: Vec<Option<usize>> = labels(&mut r, 6, 3).into_iter().map(Some).collect();
    let inputs = [rand_tensor(&mut r, vec![6, 4], 1.0), rand_tensor(&mut r, vec![4, 3], 1.0)];
    check_gradients(&inputs, EPS, move |t: &mut Tape, v: &[Var]| {
        let z = t.matmul(v[0], v[1])?;
        let p = t.softmax(z)?;
        adv_loss(t, p, &s)
    })
}

pub fn irmv1(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let n = 9;
    let y = labels(&mut r, n, 3);
    let slices = env_slices(&env_labels(&mut r, n, 3))?;
    let inputs = [rand_tensor(&mut r, vec![n, 3], 2.0)];
    check_gradients(&inputs, EPS, move |t: &mut Tape, v: &[Var]| irmv1_penalty(t, v[0], &y, &slices))
}

/// BIRM with the environment heads held at their refined values; inputs are
/// features, the shared head weight and the shared head bias.
fn birm_case(seed: u64, envelope: bool) -> Result<GradReport> {
    let mut r = rng(seed);
    let (n, d, k) = (10, 3, 2);
    let y = labels(&mut r, n, k);
    let slices = env_slices(&env_labels(&mut r, n, 2))?;
    let inputs = [
        rand_tensor(&mut r, vec![n, d], 1.5),
        rand_tensor(&mut r, vec![d, k], 1.0),
        rand_tensor(&mut r, vec![k], 0.3),
    ];
    let inner = BirmInner {
        steps: 3,
        lr: 0.5,
        envelope,
    };
    let theta_y = head(&inputs[1..]);
    let refined: Vec<ParamSet> = slices
        .iter()
        .map(|s| {
            let rows: Vec<Vec<f64>> = s.members.iter().map(|&i| inputs[0].row(i).to_vec()).collect();
            let ys: Vec<usize> = s.members.iter().map(|&i| y[i]).collect();
            refine_head(&Tensor::from_rows(&rows).unwrap(), &ys, &theta_y, &inner)
        })
        .collect::<Result<_>>()?;

    let graph = |t: &mut Tape, v: &[Var]| birm_penalty(t, v[0], &v[1..], &theta_y, &y, &slices, &inner);
    let value = |xs: &[Tensor], _k: usize| -> Result<f64> {
        let mut t = Tape::new();
        let f = t.constant(xs[0].clone());
        let f_env = t.constant(if envelope { xs[0].clone() } else { inputs[0].clone() });
        let shared = [t.constant(xs[1].clone()), t.constant(xs[2].clone())];
        let mut total = 0.0;
        for (s, env_head) in slices.iter().zip(&refined) {
            let ys: Vec<usize> = s.members.iter().map(|&i| y[i]).collect();
            let rows = t.select_rows(f, &s.members)?;
            let z = head_logits(&mut t, &shared, rows)?;
            let a = t.softmax_nll(z, &ys, PROB_FLOOR)?;
            let env_rows = t.select_rows(f_env, &s.members)?;
            let eh = env_head.bind_frozen(&mut t);
            let ze = head_logits(&mut t, &eh, env_rows)?;
            let b = t.softmax_nll(ze, &ys, PROB_FLOOR)?;
            total += t.value(a).data().iter().sum::<f64>() - t.value(b).data().iter().sum::<f64>();
        }
        Ok(total)
    };
    check_gradients_against(&inputs, EPS, graph, value)
}

pub fn birm_envelope(seed: u64) -> Result<GradReport> {
    birm_case(seed, true)
}

pub fn birm_literal(seed: u64) -> Result<GradReport> {
    birm_case(seed, false)
}

/// The full objective behind a small extractor. Gradient reversal means the
/// extractor descends `main - lambda_adv * adv`, the label head descends
/// `main` and the discriminator descends `adv`.
pub fn total_with_reversal(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let (n, d_in, h, d, k, s) = (8, 4, 5, 3, 2, 2);
    let y = labels(&mut r, n, k);
    let styles: Vec<Option<usize>> = labels(&mut r, n, s).into_iter().map(Some).collect();
    let envs = env_labels(&mut r, n, 2);
    let x = rand_tensor(&mut r, vec![n, d_in], 1.0);
    let arch = Architecture {
        input: InputShape::Vector(d_in),
        extractor: vec![LayerSpec::Affine { out: h }, LayerSpec::Relu, LayerSpec::Affine { out: d }],
        classes: k,
    };
    let inputs = [
        rand_tensor(&mut r, vec![d_in, h], 1.0),
        rand_tensor(&mut r, vec![h], 0.3),
        rand_tensor(&mut r, vec![h, d], 1.0),
        rand_tensor(&mut r, vec![d], 0.3),
        rand_tensor(&mut r, vec![d, k], 1.0),
        rand_tensor(&mut r, vec![k], 0.3),
        rand_tensor(&mut r, vec![d, s], 1.0),
        rand_tensor(&mut r, vec![s], 0.3),
    ];
    let weights = LossWeights {
        lambda_adv: 0.7,
        lambda_ent: 0.3,
        lambda_irm: 1.5,
        penalty: PenaltyKind::Irmv1,
    };
    let cfg = ObjectiveConfig {
        weights,
        entropy_sign: EntropySign::MinimizeEntropy,
        birm: BirmInner::default(),
    };
    let build = |t: &mut Tape, v: &[Var]| -> Result<(Var, f64, f64)> {
        let input = t.constant(x.clone());
        let trace = run_extractor(t, &arch, &v[0..4], input)?;
        let theta_y = ParamSet::default();
        let out = total_loss(
            t,
            trace.features,
            Heads {
                head_y: &v[4..6],
                head_s: &v[6..8],
                theta_y: &theta_y,
            },
            BatchLabels {
                labels: &y,
                pseudo_styles: &styles,
                env_labels: &envs,
            },
            &cfg,
        )?;
        Ok((out.total, out.breakdown.total, out.breakdown.adv))
    };
    let value = |xs: &[Tensor], k: usize| -> Result<f64> {
        let mut t = Tape::new();
        let v: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let (_, total, adv) = build(&mut t, &v)?;
        let main = total - adv;
        Ok(match k {
            0..=3 => main - weights.lambda_adv * adv,
            4 | 5 => main,
            _ => adv,
        })
    };
    check_gradients_against(&inputs, EPS, |t: &mut Tape, v: &[Var]| Ok(build(t, v)?.0), value)
}

/// Conv extractor, flatten and a linear head under cross-entropy.
pub fn conv_model(seed: u64) -> Result<GradReport> {
    let mut r = rng(seed);
    let arch = Architecture {
        input: InputShape::Image {
            channels: 2,
            height: 6,
            width: 6,
        },
        extractor: vec![
            LayerSpec::Conv2d {
                out_channels: 2,
                kernel: 3,
            },
            LayerSpec::Relu,
            LayerSpec::MeanPool2,
            LayerSpec::Flatten,
            LayerSpec::Affine { out: 3 },
        ],
        classes: 2,
    };
    let y = labels(&mut r, 3, 2);
    let x = rand_tensor(&mut r, vec![3, 2, 6, 6], 1.0);
    let inputs = [
        rand_tensor(&mut r, vec![2, 2, 3, 3], 0.6),
        rand_tensor(&mut r, vec![2], 0.2),
        rand_tensor(&mut r, vec![8, 3], 0.8),
        rand_tensor(&mut r, vec![3], 0.2),
        rand_tensor(&mut r, vec![3, 2], 1.0),
        rand_tensor(&mut r, vec![2], 0.2),
    ];
    check_gradients(&inputs, EPS, move |t: &mut Tape, v: &[Var]| {
        let input = t.constant(x.clone());
        let trace = run_extractor(t, &arch, &v[0..4], input)?;
        let z = head_logits(t, &v[4..6], trace.features)?;
        cross_entropy(t, z, &y)
    })
}

pub const CASES: &[(&str, Case)] = &[
    ("affine+relu", affine_relu),
    ("conv2d+pool", conv_pool),
    ("softmax+log", softmax_log),
    ("softmax_nll", softmax_nll),
    ("erm", erm),
    ("cross_entropy", cross_entropy_logits),
    ("entropy", entropy),
    ("adversarial", adversarial),
    ("irmv1", irmv1),
    ("birm_envelope", birm_envelope),
    ("birm_literal", birm_literal),
    ("total_with_reversal", total_with_reversal),
    ("conv_model", conv_model),
];

/// Worst error per case over `instances` seeds.
pub fn run_suite(instances: u64) -> Vec<(&'static str, GradReport)> {
    CASES
        .iter()
        .map(|(name, case)| {
            let worst = (0..instances)
                .map(|seed| case(1000 + seed).unwrap_or_else(|e| panic!("{name} seed {seed}: {e}")))
                .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
                .expect("at least one instance");
            (*name, worst)
        })
        .collect()
}
