//! Alternating schedule: every bigstep refreshes pseudo-style labels from
//! style statistics of the whole training set, every step clusters the
//! minibatch into environments and applies one update of all three
//! parameter groups.

mod eval;

pub use eval::{accuracy_report, evaluate, probe_accuracy, EvalReport, ProbeConfig};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clusterer::{assign_env_labels, assign_style_labels, KMeansParams};
use crate::diffcore::{
    extract_features, head_logits, input_var, run_extractor, Architecture, ModelParams, Optimizer, OptimizerConfig, ParamSet, Tape, Tensor,
};
use crate::error::{Error, Result};
use crate::objectives::{
    cross_entropy, total_loss, BatchLabels, BirmInner, EntropySign, Heads, LossBreakdown, LossWeights, ObjectiveConfig, PenaltyKind,
};
use crate::rng::{rng_for, stream, sub_seed};
use crate::synthdata::Dataset;

/// Where per-sample environment labels come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvSource {
    /// k-means on the current minibatch features.
    #[default]
    Clustered,
    /// k-means on features of the whole training set, once per bigstep.
    ClusteredPerBigstep,
    /// The generator's environment index.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub weights: LossWeights,
    #[serde(default)]
    pub entropy_sign: EntropySign,
    /// Number of pseudo-style clusters.
    #[serde(rename = "S")]
    pub styles: usize,
    pub k_env: usize,
    #[serde(default)]
    pub env_source: EnvSource,
    pub bigsteps: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Optimizer for `theta_s`; the main optimizer's settings when absent.
    #[serde(default)]
    pub discriminator_optimizer: Option<OptimizerConfig>,
    /// Discriminator updates per step. The first uses the shared backward
    /// pass; the rest refit `theta_s` on the same minibatch with features
    /// held fixed.
    #[serde(default = "one")]
    pub discriminator_steps: usize,
    #[serde(default)]
    pub birm: BirmInner,
    /// Extractor layers feeding the style statistics; the architecture's default when absent.
    #[serde(default)]
    pub style_taps: Option<Vec<usize>>,
    pub seed: u64,
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    #[serde(default)]
    pub kmeans: KMeansParams,
}

fn default_log_every() -> usize {
    10
}

fn one() -> usize {
    1
}

impl TrainConfig {
    /// ERM-shaped defaults: zero weights, one environment, Adam at 1e-3.
    pub fn new(seed: u64) -> Self {
        Self {
            weights: LossWeights::zero(),
            entropy_sign: EntropySign::default(),
            styles: 2,
            k_env: 1,
            env_source: EnvSource::Clustered,
            bigsteps: 2,
            steps: 50,
            batch_size: 64,
            optimizer: OptimizerConfig::adam(1e-3),
            discriminator_optimizer: None,
            discriminator_steps: 1,
            birm: BirmInner::default(),
            style_taps: None,
            seed,
            log_every: default_log_every(),
            kmeans: KMeansParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.optimizer.validate()?;
        if let Some(d) = &self.discriminator_optimizer {
            d.validate()?;
        }
        let counts = [
            ("S", self.styles),
            ("k_env", self.k_env),
            ("bigsteps", self.bigsteps),
            ("steps", self.steps),
            ("batch_size", self.batch_size),
            ("log_every", self.log_every),
            ("discriminator_steps", self.discriminator_steps),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.weights.lambda_irm > 0.0 && self.weights.penalty == PenaltyKind::Birm && self.birm.steps == 0 {
            return Err(Error::Config("birm.steps must be at least 1".into()));
        }
        Ok(())
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            weights: self.weights,
            entropy_sign: self.entropy_sign,
            birm: self.birm,
        }
    }

    pub fn total_steps(&self) -> u64 {
        (self.bigsteps * self.steps) as u64
    }
}

/// One optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    pub bigstep: usize,
    pub losses: LossBreakdown,
    pub env_count: usize,
    pub env_inertia: f64,
    pub batch_accuracy: f64,
}

/// Logged snapshot; written as one CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: u64,
    pub bigstep: usize,
    pub losses: LossBreakdown,
    pub train_acc: f64,
    pub ood_acc: Option<f64>,
    pub style_probe_acc: Option<f64>,
    pub env_inertia: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounters {
    pub discriminator_calls: u64,
    pub irm_penalty_calls: u64,
    pub style_clusterings: u64,
    pub env_clusterings: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunState {
    pub params: ModelParams,
    pub iter: u64,
    pub steps: Vec<StepRecord>,
    pub history: Vec<MetricsRow>,
    pub counters: CallCounters,
}

/// Trains on `data` with `cfg`; see [`train_observed`].
pub fn train(data: &Dataset, arch: &Architecture, cfg: &TrainConfig) -> Result<RunState> {
    train_observed(data, arch, cfg, None)
}

/// Trains and, on logged steps, also scores accuracy on `ood` when given.
///
/// Logged steps are the first, every `log_every`-th and the last. The style
/// probe runs on the last logged row only.
pub fn train_observed(data: &Dataset, arch: &Architecture, cfg: &TrainConfig, ood: Option<&Dataset>) -> Result<RunState> {
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    cfg.validate()?;
    arch.validate()?;
    if data.classes != arch.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the architecture predicts {}",
            data.classes, arch.classes
        )));
    }
    let taps = match &cfg.style_taps {
        Some(t) => t.clone(),
        None => arch.default_style_taps(),
    };
    let objective = cfg.objective();
    let adv_active = cfg.weights.lambda_adv > 0.0;

    let mut work = data.clone();
    let mut params = ModelParams::init(arch, cfg.styles, &mut rng_for(cfg.seed, stream::INIT))?;
    let mut opt_f = Optimizer::new(cfg.optimizer, &params.theta_f);
    let mut opt_y = Optimizer::new(cfg.optimizer, &params.theta_y);
    let mut opt_s = Optimizer::new(cfg.discriminator_optimizer.unwrap_or(cfg.optimizer), &params.theta_s);
    let mut shuffle_rng = rng_for(cfg.seed, stream::SHUFFLE);
    let mut order: Vec<usize> = (0..work.len()).collect();
    let batch_size = cfg.batch_size.min(work.len());
    let total = cfg.total_steps();

    let mut state = RunState {
        params: params.clone(),
        iter: 0,
        steps: Vec::with_capacity(total as usize),
        history: Vec::new(),
        counters: CallCounters::default(),
    };

    for bigstep in 0..cfg.bigsteps {
        if adv_active {
            assign_style_labels(
                &mut work,
                &params,
                arch,
                &taps,
                cfg.styles,
                sub_seed(cfg.seed, stream::STYLE_CLUSTER, bigstep as u64),
                &cfg.kmeans,
            )
            .map_err(|e| e.at_iter(state.iter))?;
            state.counters.style_clusterings += 1;
        }
        let mut bigstep_inertia = 0.0;
        if cfg.env_source == EnvSource::ClusteredPerBigstep {
            let features = extract_features(&params, arch, &work.all_x()?).map_err(|e| e.at_iter(state.iter))?;
            let all: Vec<usize> = (0..work.len()).collect();
            let res = assign_env_labels(
                &mut work,
                &all,
                &features,
                cfg.k_env,
                sub_seed(cfg.seed, stream::ENV_CLUSTER, bigstep as u64),
                &cfg.kmeans,
            )
            .map_err(|e| e.at_iter(state.iter))?;
            state.counters.env_clusterings += 1;
            bigstep_inertia = res.inertia;
        }
        order.shuffle(&mut shuffle_rng);
        let mut cursor = 0;

        for _ in 0..cfg.steps {
            if cursor + batch_size > order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let batch = order[cursor..cursor + batch_size].to_vec();
            cursor += batch_size;
            let iter = state.iter;
            let record = train_step(
                &mut work,
                &mut params,
                arch,
                cfg,
                &objective,
                &batch,
                iter,
                bigstep,
                bigstep_inertia,
                (&mut opt_f, &mut opt_y, &mut opt_s),
                &mut state.counters,
            )
            .map_err(|e| e.at_iter(iter))?;
            state.iter += 1;
            state.steps.push(record);

            let due = state.iter == 1 || state.iter.is_multiple_of(cfg.log_every as u64) || state.iter == total;
            if due {
                let last = state.iter == total;
                let row = metrics_row(&params, arch, data, ood, &record, last).map_err(|e| e.at_iter(iter))?;
                state.history.push(row);
            }
        }
    }
    state.params = params;
    Ok(state)
}

type Optimizers<'a> = (&'a mut Optimizer, &'a mut Optimizer, &'a mut Optimizer);

#[allow(clippy::too_many_arguments)]
fn train_step(
    work: &mut Dataset,
    params: &mut ModelParams,
    arch: &Architecture,
    cfg: &TrainConfig,
    objective: &ObjectiveConfig,
    batch: &[usize],
    iter: u64,
    bigstep: usize,
    bigstep_inertia: f64,
    (opt_f, opt_y, opt_s): Optimizers<'_>,
    counters: &mut CallCounters,
) -> Result<StepRecord> {
    let x = work.batch(batch)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let input = input_var(&mut tape, arch, &x)?;
    let trace = run_extractor(&mut tape, arch, &bound.f, input)?;

    let env_inertia = match cfg.env_source {
        EnvSource::Clustered => {
            let res = assign_env_labels(
                work,
                batch,
                tape.value(trace.features),
                cfg.k_env,
                sub_seed(cfg.seed, stream::ENV_CLUSTER, iter),
                &cfg.kmeans,
            )?;
            counters.env_clusterings += 1;
            res.inertia
        }
        EnvSource::ClusteredPerBigstep => bigstep_inertia,
        EnvSource::GroundTruth => {
            for &i in batch {
                work.samples[i].env_label = Some(work.samples[i].true_env);
            }
            0.0
        }
    };

    let labels: Vec<usize> = batch.iter().map(|&i| work.samples[i].y).collect();
    let pseudo: Vec<Option<usize>> = batch.iter().map(|&i| work.samples[i].pseudo_style).collect();
    let envs: Vec<Option<usize>> = batch.iter().map(|&i| work.samples[i].env_label).collect();
    let out = total_loss(
        &mut tape,
        trace.features,
        Heads {
            head_y: &bound.y,
            head_s: &bound.s,
            theta_y: &params.theta_y,
        },
        BatchLabels {
            labels: &labels,
            pseudo_styles: &pseudo,
            env_labels: &envs,
        },
        objective,
    )?;
    if !out.breakdown.total.is_finite() {
        return Err(Error::Contract(format!("non-finite loss {:?}", out.breakdown)));
    }
    counters.irm_penalty_calls += u64::from(out.penalty_computed);
    counters.discriminator_calls += u64::from(out.style_probs.is_some());

    let hits = tape
        .value(out.class_probs)
        .argmax_rows()
        .iter()
        .zip(&labels)
        .filter(|(p, y)| p == y)
        .count();

    let grads = tape.backward(out.total)?;
    let gf = params.theta_f.grads(&bound.f, &grads);
    let gy = params.theta_y.grads(&bound.y, &grads);
    opt_f.step(&mut params.theta_f, &gf)?;
    opt_y.step(&mut params.theta_y, &gy)?;
    if out.style_probs.is_some() {
        let gs = params.theta_s.grads(&bound.s, &grads);
        opt_s.step(&mut params.theta_s, &gs)?;
        if cfg.discriminator_steps > 1 {
            let features = tape.value(trace.features).clone();
            let styles: Vec<usize> = pseudo.iter().map(|s| s.expect("checked by total_loss")).collect();
            for _ in 1..cfg.discriminator_steps {
                refit_discriminator(&mut params.theta_s, opt_s, &features, &styles)?;
            }
        }
    }

    Ok(StepRecord {
        iter: iter + 1,
        bigstep,
        losses: out.breakdown,
        env_count: out.env_count,
        env_inertia,
        batch_accuracy: hits as f64 / batch.len() as f64,
    })
}

fn refit_discriminator(theta_s: &mut ParamSet, opt: &mut Optimizer, features: &Tensor, styles: &[usize]) -> Result<()> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let vars = theta_s.bind(&mut tape);
    let logits = head_logits(&mut tape, &vars, f)?;
    let loss = cross_entropy(&mut tape, logits, styles)?;
    let grads = tape.backward(loss)?;
    let g = theta_s.grads(&vars, &grads);
    opt.step(theta_s, &g)
}

fn metrics_row(
    params: &ModelParams,
    arch: &Architecture,
    train_set: &Dataset,
    ood: Option<&Dataset>,
    record: &StepRecord,
    with_probe: bool,
) -> Result<MetricsRow> {
    let train_report = if with_probe {
        evaluate(params, arch, train_set)?
    } else {
        accuracy_report(params, arch, train_set)?.0
    };
    let ood_acc = match ood {
        Some(d) => Some(accuracy_report(params, arch, d)?.0.accuracy),
        None => None,
    };
    Ok(MetricsRow {
        iter: record.iter,
        bigstep: record.bigstep,
        losses: record.losses,
        train_acc: train_report.accuracy,
        ood_acc,
        style_probe_acc: train_report.style_probe_accuracy,
        env_inertia: record.env_inertia,
    })
}

/// Named weight presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Erm,
    Irm,
    AdvOnly,
    IrssIrmv1,
    IrssBirm,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Erm,
        Method::Irm,
        Method::AdvOnly,
        Method::IrssIrmv1,
        Method::IrssBirm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::Irm => "irm",
            Method::AdvOnly => "adv-only",
            Method::IrssIrmv1 => "irss-irmv1",
            Method::IrssBirm => "irss-birm",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Rewrites `cfg` for this method. Unused weights are zeroed and used
    /// weights keep their configured values.
    ///
    /// * `erm`: no extra terms, one environment.
    /// * `irm`: IRMv1 on the generator's environments.
    /// * `adv-only`: adversarial and entropy terms, one environment.
    /// * `irss-*`: all terms with the named penalty and clustered environments.
    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        let w = &mut c.weights;
        match self {
            Method::Erm => {
                *w = LossWeights::zero();
                c.k_env = 1;
                c.env_source = EnvSource::Clustered;
            }
            Method::Irm => {
                w.lambda_adv = 0.0;
                w.lambda_ent = 0.0;
                w.penalty = PenaltyKind::Irmv1;
                c.env_source = EnvSource::GroundTruth;
            }
            Method::AdvOnly => {
                w.lambda_irm = 0.0;
                c.k_env = 1;
                c.env_source = EnvSource::Clustered;
            }
            Method::IrssIrmv1 => {
                w.penalty = PenaltyKind::Irmv1;
                c.env_source = EnvSource::Clustered;
            }
            Method::IrssBirm => {
                w.penalty = PenaltyKind::Birm;
                c.env_source = EnvSource::Clustered;
            }
        }
        c
    }
}

/// Baseline methods expressed as weight presets on [`train`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Erm,
    IrmV1,
    AdvOnly,
}

pub fn run_baseline(kind: Baseline, data: &Dataset, arch: &Architecture, cfg: &TrainConfig) -> Result<RunState> {
    let method = match kind {
        Baseline::Erm => Method::Erm,
        Baseline::IrmV1 => Method::Irm,
        Baseline::AdvOnly => Method::AdvOnly,
    };
    train(data, arch, &method.apply(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{InputShape, LayerSpec};
    use crate::synthdata::{sample_scm, ScmConfig};

    fn scm_data() -> (Dataset, Architecture) {
        let cfg = ScmConfig::default_instance(7);
        let parts = (0..3).map(|e| sample_scm(&cfg, e, 100, 11 + e as u64).unwrap()).collect();
        let arch = Architecture {
            input: InputShape::Vector(10),
            extractor: vec![LayerSpec::Affine { out: 8 }, LayerSpec::Relu],
            classes: 2,
        };
        (Dataset::concat(parts), arch)
    }

    #[test]
    fn step_accounting_and_logging() {
        let (data, arch) = scm_data();
        let mut cfg = TrainConfig::new(1);
        cfg.bigsteps = 2;
        cfg.steps = 7;
        cfg.log_every = 5;
        let s = train(&data, &arch, &cfg).unwrap();
        assert_eq!(s.iter, 14);
        assert_eq!(s.steps.len(), 14);
        let logged: Vec<u64> = s.history.iter().map(|r| r.iter).collect();
        assert_eq!(logged, vec![1, 5, 10, 14]);
        assert!(s.steps.iter().enumerate().all(|(i, r)| r.iter == i as u64 + 1));
    }

    #[test]
    fn zero_counts_rejected() {
        let (data, arch) = scm_data();
        let mut cfg = TrainConfig::new(1);
        cfg.steps = 0;
        assert!(matches!(train(&data, &arch, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn presets() {
        let mut cfg = TrainConfig::new(0);
        cfg.weights = LossWeights {
            lambda_adv: 0.3,
            lambda_ent: 0.1,
            lambda_irm: 2.0,
            penalty: PenaltyKind::Irmv1,
        };
        cfg.k_env = 4;
        let erm = Method::Erm.apply(&cfg);
        assert_eq!(erm.weights, LossWeights::zero());
        assert_eq!(erm.k_env, 1);
        let irm = Method::Irm.apply(&cfg);
        assert_eq!((irm.weights.lambda_adv, irm.weights.lambda_ent, irm.weights.lambda_irm), (0.0, 0.0, 2.0));
        let adv = Method::AdvOnly.apply(&cfg);
        assert_eq!((adv.weights.lambda_adv, adv.weights.lambda_irm), (0.3, 0.0));
        assert_eq!(Method::IrssBirm.apply(&cfg).weights.penalty, PenaltyKind::Birm);
        assert_eq!(Method::parse("adv-only"), Some(Method::AdvOnly));
    }
}
