//! Loss terms and the relaxed training objective
//!
//! ```text
//! sum_e l_erm(D_e) + lambda_irm * sum_e D(e) + lambda_ent * entropy term - lambda_adv * l_adv
//! ```
//!
//! The adversarial coupling is realized with gradient reversal: the
//! discriminator sees `grad_reverse(features, lambda_adv)`, so a single
//! backward pass yields the descent direction of `l_adv` for `theta_s` and of
//! `-lambda_adv * l_adv` for `theta_f`.

use serde::{Deserialize, Serialize};

use crate::diffcore::{head_logits, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to this floor before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Irmv1,
    Birm,
}

/// How the mean prediction entropy enters the objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropySign {
    /// `+lambda_ent * (-H)`: rewards high entropy.
    RewardEntropy,
    /// `+lambda_ent * H`: rewards confident predictions.
    #[default]
    MinimizeEntropy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_adv: f64,
    pub lambda_ent: f64,
    pub lambda_irm: f64,
    pub penalty: PenaltyKind,
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_adv: 0.0,
            lambda_ent: 0.0,
            lambda_irm: 0.0,
            penalty: PenaltyKind::Irmv1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.lambda_adv, self.lambda_ent, self.lambda_irm].iter().all(|v| v.is_finite());
        if !all_finite || self.lambda_adv < 0.0 || self.lambda_irm < 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be finite with lambda_adv, lambda_irm >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Inner refinement used to approximate each environment's best classifier.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BirmInner {
    pub steps: usize,
    pub lr: f64,
    /// Let `theta_f` also receive gradient through the refined-head term.
    #[serde(default = "yes")]
    pub envelope: bool,
}

fn yes() -> bool {
    true
}

impl Default for BirmInner {
    fn default() -> Self {
        Self {
            steps: 5,
            lr: 0.1,
            envelope: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    #[serde(default)]
    pub entropy_sign: EntropySign,
    #[serde(default)]
    pub birm: BirmInner,
}

/// Minibatch rows belonging to one environment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvSlice {
    pub env: usize,
    pub members: Vec<usize>,
}

/// Groups batch positions by environment label, in label order.
pub fn env_slices(labels: &[Option<usize>]) -> Result<Vec<EnvSlice>> {
    let mut slices: Vec<EnvSlice> = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        let env = l.ok_or_else(|| Error::Contract(format!("batch row {i} has no environment label")))?;
        match slices.iter_mut().find(|s| s.env == env) {
            Some(s) => s.members.push(i),
            None => slices.push(EnvSlice { env, members: vec![i] }),
        }
    }
    slices.sort_by_key(|s| s.env);
    Ok(slices)
}

fn check_labels(labels: &[usize], n: usize, classes: usize, what: &str) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(what, &[n], &[labels.len()]));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Range(format!("{what} {bad} out of range for {classes} classes")));
    }
    Ok(())
}

/// `-(1/N) sum_i ln p_i[y_i]` over rows of a probability matrix.
pub fn erm_loss(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.value(probs).shape().to_vec();
    check_labels(labels, shape[0], shape[1], "label")?;
    let picked = tape.pick(probs, labels)?;
    let logp = tape.ln_clamped(picked, PROB_FLOOR);
    let mean = tape.mean(logp);
    Ok(tape.scale(mean, -1.0))
}

/// Same value as [`erm_loss`] on `softmax(logits)`, computed from logits so
/// the gradient does not vanish on rows below the probability floor.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let nll = tape.softmax_nll(logits, labels, PROB_FLOOR)?;
    Ok(tape.mean(nll))
}

fn required_styles(pseudo_styles: &[Option<usize>]) -> Result<Vec<usize>> {
    pseudo_styles
        .iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::Contract(format!("batch row {i} has no pseudo-style label"))))
        .collect()
}

/// Cross-entropy of the discriminator against pseudo-style labels.
pub fn adv_loss(tape: &mut Tape, style_probs: Var, pseudo_styles: &[Option<usize>]) -> Result<Var> {
    let labels = required_styles(pseudo_styles)?;
    let shape = tape.value(style_probs).shape().to_vec();
    check_labels(&labels, shape[0], shape[1], "pseudo-style")?;
    erm_loss(tape, style_probs, &labels)
}

/// Mean Shannon entropy `(1/N) sum_i H(p_i)`.
pub fn ent_loss(tape: &mut Tape, probs: Var) -> Result<Var> {
    let logp = tape.ln_clamped(probs, PROB_FLOOR);
    let plogp = tape.mul(probs, logp)?;
    let rows = tape.sum_rows(plogp)?;
    let mean = tape.mean(rows);
    Ok(tape.scale(mean, -1.0))
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        data[i * classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("one-hot shape")
}

/// `sum_e g_e^2` where `g_e = d/dw l_e(w z)` at `w = 1`.
///
/// For softmax cross-entropy the derivative has the closed form
/// `g_e = (1/|D_e|) sum_i <softmax(z_i) - onehot(y_i), z_i>`, so the
/// penalty is differentiable with first-order tape operations only.
pub fn irmv1_penalty(tape: &mut Tape, logits: Var, labels: &[usize], slices: &[EnvSlice]) -> Result<Var> {
    if slices.is_empty() {
        return Err(Error::Contract("IRMv1 penalty needs at least one environment".into()));
    }
    let shape = tape.value(logits).shape().to_vec();
    check_labels(labels, shape[0], shape[1], "label")?;
    let mut terms = Vec::with_capacity(slices.len());
    for slice in slices {
        let z = tape.select_rows(logits, &slice.members)?;
        let p = tape.softmax(z)?;
        let ys: Vec<usize> = slice.members.iter().map(|&i| labels[i]).collect();
        let target = tape.constant(one_hot(&ys, shape[1]));
        let resid = tape.sub(p, target)?;
        let inner = tape.mul(resid, z)?;
        let per_row = tape.sum_rows(inner)?;
        let g = tape.mean(per_row);
        terms.push(tape.square(g));
    }
    tape.add_all(&terms)
}

/// Closed-form `g_e` for plain logits, for diagnostics and tests.
pub fn irmv1_env_gradient(logits: &Tensor, labels: &[usize]) -> f64 {
    let m = logits.shape()[1];
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = logits.row(i);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
        for (j, &zj) in z.iter().enumerate().take(m) {
            let p = (zj - max).exp() / total;
            acc += (p - if j == y { 1.0 } else { 0.0 }) * zj;
        }
    }
    acc / labels.len() as f64
}

fn mean_ce_grad(features: &Tensor, labels: &[usize], head: &ParamSet) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let vars = head.bind(&mut tape);
    let logits = head_logits(&mut tape, &vars, f)?;
    let loss = cross_entropy(&mut tape, logits, labels)?;
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(head.tensors())
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect())
}

/// Environment-refined copy of a linear head: `steps` gradient-descent steps
/// on the environment's mean cross-entropy with features held fixed.
pub fn refine_head(features: &Tensor, labels: &[usize], head: &ParamSet, inner: &BirmInner) -> Result<ParamSet> {
    let mut refined = head.clone();
    for _ in 0..inner.steps {
        let grads = mean_ce_grad(features, labels, &refined)?;
        for (t, g) in refined.tensors_mut().iter_mut().zip(&grads) {
            for (v, d) in t.data_mut().iter_mut().zip(g.data()) {
                *v -= inner.lr * d;
            }
        }
    }
    Ok(refined)
}

/// `sum_e sum_{i in D_e} [ln p(y_i | theta_f, theta_y^e) - ln p(y_i | theta_f, theta_y)]`.
///
/// `theta_y^e` comes from [`refine_head`] and is a constant on the tape.
/// `theta_y` gets gradient through the second term only; `theta_f` through
/// both when `inner.envelope` is set, else through the second only.
pub fn birm_penalty(
    tape: &mut Tape,
    features: Var,
    head_y: &[Var],
    theta_y: &ParamSet,
    labels: &[usize],
    slices: &[EnvSlice],
    inner: &BirmInner,
) -> Result<Var> {
    if inner.steps < 1 {
        return Err(Error::Config("BIRM inner loop needs at least one step".into()));
    }
    if slices.is_empty() {
        return Err(Error::Contract("BIRM penalty needs at least one environment".into()));
    }
    let n = tape.value(features).rows();
    let classes = theta_y.tensors()[1].len();
    check_labels(labels, n, classes, "label")?;
    let mut terms = Vec::with_capacity(slices.len());
    for slice in slices {
        let ys: Vec<usize> = slice.members.iter().map(|&i| labels[i]).collect();
        let rows = tape.select_rows(features, &slice.members)?;
        let frozen = tape.value(rows).clone();
        let refined = refine_head(&frozen, &ys, theta_y, inner)?;

        let env_head = refined.bind_frozen(tape);
        let env_rows = if inner.envelope { rows } else { tape.detach(rows) };
        let z_env = head_logits(tape, &env_head, env_rows)?;
        let nll_env = tape.softmax_nll(z_env, &ys, PROB_FLOOR)?;
        let sum_env = tape.sum(nll_env);

        let z = head_logits(tape, head_y, rows)?;
        let nll = tape.softmax_nll(z, &ys, PROB_FLOOR)?;
        let sum_shared = tape.sum(nll);

        // ln p_env - ln p_shared = nll_shared - nll_env
        terms.push(tape.sub(sum_shared, sum_env)?);
    }
    tape.add_all(&terms)
}

/// Labels attached to the minibatch rows.
#[derive(Clone, Copy, Debug)]
pub struct BatchLabels<'a> {
    pub labels: &'a [usize],
    pub pseudo_styles: &'a [Option<usize>],
    pub env_labels: &'a [Option<usize>],
}

/// Parameter handles the objective needs.
#[derive(Clone, Copy, Debug)]
pub struct Heads<'a> {
    pub head_y: &'a [Var],
    pub head_s: &'a [Var],
    pub theta_y: &'a ParamSet,
}

/// Weighted contribution of each term; `adv` is the discriminator
/// cross-entropy exactly as it enters the tape (through gradient reversal).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub erm: f64,
    pub irm: f64,
    pub ent: f64,
    pub adv: f64,
    pub total: f64,
    /// Unweighted `sum_e D(e)`.
    pub penalty_raw: f64,
    /// Unweighted mean entropy.
    pub entropy_raw: f64,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub class_logits: Var,
    pub class_probs: Var,
    pub style_probs: Option<Var>,
    pub env_count: usize,
    pub penalty_computed: bool,
}

/// Builds the full objective on `tape` from already-extracted `features`.
pub fn total_loss(
    tape: &mut Tape,
    features: Var,
    heads: Heads<'_>,
    batch: BatchLabels<'_>,
    cfg: &ObjectiveConfig,
) -> Result<LossOutput> {
    cfg.weights.validate()?;
    let w = &cfg.weights;
    let class_logits = head_logits(tape, heads.head_y, features)?;
    let class_probs = tape.softmax(class_logits)?;
    let slices = env_slices(batch.env_labels)?;
    if slices.is_empty() {
        return Err(Error::Contract("empty minibatch".into()));
    }

    let mut erm_terms = Vec::with_capacity(slices.len());
    check_labels(batch.labels, tape.value(class_logits).rows(), tape.value(class_logits).row_len(), "label")?;
    for s in &slices {
        let rows = tape.select_rows(class_logits, &s.members)?;
        let ys: Vec<usize> = s.members.iter().map(|&i| batch.labels[i]).collect();
        erm_terms.push(cross_entropy(tape, rows, &ys)?);
    }
    let erm = tape.add_all(&erm_terms)?;
    let mut parts = vec![erm];
    let mut breakdown = LossBreakdown {
        erm: tape.value(erm).item(),
        ..Default::default()
    };

    let mut penalty_computed = false;
    if w.lambda_irm > 0.0 {
        let penalty = match w.penalty {
            PenaltyKind::Irmv1 => irmv1_penalty(tape, class_logits, batch.labels, &slices)?,
            PenaltyKind::Birm => birm_penalty(
                tape,
                features,
                heads.head_y,
                heads.theta_y,
                batch.labels,
                &slices,
                &cfg.birm,
            )?,
        };
        penalty_computed = true;
        breakdown.penalty_raw = tape.value(penalty).item();
        let weighted = tape.scale(penalty, w.lambda_irm);
        breakdown.irm = tape.value(weighted).item();
        parts.push(weighted);
    }

    if w.lambda_ent != 0.0 {
        let h = ent_loss(tape, class_probs)?;
        breakdown.entropy_raw = tape.value(h).item();
        let sign = match cfg.entropy_sign {
            EntropySign::RewardEntropy => -1.0,
            EntropySign::MinimizeEntropy => 1.0,
        };
        let weighted = tape.scale(h, sign * w.lambda_ent);
        breakdown.ent = tape.value(weighted).item();
        parts.push(weighted);
    }

    let mut style_probs = None;
    if w.lambda_adv > 0.0 {
        let reversed = tape.grad_reverse(features, w.lambda_adv)?;
        let z = head_logits(tape, heads.head_s, reversed)?;
        let p = tape.softmax(z)?;
        let styles = required_styles(batch.pseudo_styles)?;
        check_labels(&styles, tape.value(z).rows(), tape.value(z).row_len(), "pseudo-style")?;
        let adv = cross_entropy(tape, z, &styles)?;
        breakdown.adv = tape.value(adv).item();
        style_probs = Some(p);
        parts.push(adv);
    }

    let total = tape.add_all(&parts)?;
    breakdown.total = tape.value(total).item();
    Ok(LossOutput {
        total,
        breakdown,
        class_logits,
        class_probs,
        style_probs,
        env_count: slices.len(),
        penalty_computed,
    })
}
