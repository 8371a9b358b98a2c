//! Losses, closed-form gradients and the SGD training procedures.
//!
//! Gradients are computed per sample from a cached [`Evaluation`] and
//! reduced in ascending sample order, so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::data::{class_of, Dataset, Sample};
use crate::diagnostics::{self, RouterAudit};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot};
use crate::model::{evaluate, init_params, relu, Arch, Evaluation, Mode, ModelParams, OpCounts};
use crate::rng::Rng;

/// `log(1 + exp(-y * score))`, stable for large `|score|`.
pub fn logistic_loss(score: f64, y: i32) -> f64 {
    let z = -(y as f64) * score;
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `log(sum_i exp(f_i)) - f_y` with max subtraction.
pub fn softmax_loss(scores: &[f64], y: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = scores.iter().map(|f| (f - max).exp()).sum();
    max + total.ln() - scores[y]
}

/// `1 / (1 + exp(y * score))`, the magnitude of the logistic loss slope.
pub fn logistic_value(score: f64, y: i32) -> f64 {
    let z = y as f64 * score;
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|f| (f - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_router_batch(batch: &[&Sample]) -> Result<usize> {
    let first = batch.first().ok_or_else(|| Error::Empty("router batch".into()))?;
    for s in batch {
        if s.label != 1 && s.label != -1 {
            return Err(Error::invalid(format!("router loss needs +1/-1 labels, got {}", s.label)));
        }
    }
    Ok(first.dim)
}

/// `sum_batch y * sum_j x_j`, the only data statistic the linear router
/// surrogate depends on.
fn signed_patch_sum(batch: &[&Sample], dim: usize) -> Vec<f64> {
    let mut acc = vec![0.0; dim];
    for s in batch {
        for q in s.patches() {
            axpy(s.label as f64, q, &mut acc);
        }
    }
    acc
}

/// Linear router surrogate `-(1/B) sum y <w1 - w2, sum_j x_j>`.
pub fn router_loss_separate(w1: &[f64], w2: &[f64], batch: &[&Sample]) -> Result<f64> {
    let dim = check_router_batch(batch)?;
    if w1.len() != dim || w2.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: w1.len().min(w2.len()),
            context: "router kernel",
        });
    }
    let acc = signed_patch_sum(batch, dim);
    Ok(-(dot(w1, &acc) - dot(w2, &acc)) / batch.len() as f64)
}

/// Gradients of [`router_loss_separate`] with respect to `w1` and `w2`. The
/// loss is linear, so they do not depend on the kernels.
pub fn grad_router_separate(batch: &[&Sample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let dim = check_router_batch(batch)?;
    let mut acc = signed_patch_sum(batch, dim);
    let scale = 1.0 / batch.len() as f64;
    acc.iter_mut().for_each(|v| *v *= scale);
    let g1 = acc.iter().map(|v| -v).collect();
    Ok((g1, acc))
}

/// Gradient storage shaped like the trainable parameters. `router` is empty
/// when the router is not being trained.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBuffer {
    pub experts: Vec<f64>,
    pub router: Vec<f64>,
}

impl GradientBuffer {
    pub fn zeros(params: &ModelParams, with_router: bool) -> GradientBuffer {
        GradientBuffer {
            experts: vec![0.0; params.expert_weights.len()],
            router: if with_router {
                vec![0.0; params.gating_kernels.len()]
            } else {
                Vec::new()
            },
        }
    }

    pub fn is_finite(&self) -> bool {
        self.experts.iter().chain(&self.router).all(|v| v.is_finite())
    }

    fn scale(&mut self, s: f64) {
        self.experts.iter_mut().chain(self.router.iter_mut()).for_each(|v| *v *= s);
    }
}

/// Loss of one evaluated sample and `dL/df_h` for every head.
fn loss_and_slope(params: &ModelParams, ev: &Evaluation, x: &Sample) -> (f64, Vec<f64>) {
    if params.multi_head {
        let y = class_of(x.label, params.c);
        let mut p = softmax(&ev.scores);
        let loss = softmax_loss(&ev.scores, y);
        p[y] -= 1.0;
        (loss, p)
    } else {
        let f = ev.scores[0];
        let y = x.label;
        (logistic_loss(f, y), vec![-(y as f64) * logistic_value(f, y)])
    }
}

/// Adds one sample's gradient into `buf`.
///
/// Expert neuron `(r, s)`: `k_rs (1/l) sum_{j in J} G_j x_j 1[<w, x_j> > 0]`
/// with `k_rs = sum_h dL/df_h a_{r,s,h}`. Router kernel `s` (when
/// `buf.router` is non-empty and gates are softmax): the double sum
/// `sum_r k_rs (1/l) sum_j ReLU_j G_j sum_{i != j} (x_j - x_i) G_i`.
fn accumulate(
    params: &ModelParams,
    x: &Sample,
    ev: &Evaluation,
    slope: &[f64],
    buf: &mut GradientBuffer,
    ops: &mut OpCounts,
) {
    let d = params.d;
    let mpe = params.neurons_per_expert();
    let l = params.l;
    let inv_l = 1.0 / l as f64;
    let train_router = !buf.router.is_empty() && params.softmax_gates();
    for (s, route) in ev.routing.experts.iter().enumerate() {
        let pre = &ev.pre[s];
        let mut patch_coef = vec![0.0; l];
        for r in 0..mpe {
            let kappa: f64 = slope
                .iter()
                .enumerate()
                .map(|(h, g)| g * params.output_weight(h, s, r))
                .sum();
            let base = (s * mpe + r) * d;
            let grad = &mut buf.experts[base..base + d];
            for (t, (&j, &gate)) in route.indices.iter().zip(&route.gates).enumerate() {
                let z = pre[r * l + t];
                let active = if z > 0.0 { 1.0 } else { 0.0 };
                axpy(kappa * inv_l * gate * active, x.patch(j), grad);
                if train_router {
                    patch_coef[t] += kappa * inv_l * relu(z) * gate;
                }
            }
        }
        ops.expert_backward += 2 * (d * mpe * l) as u64;
        if train_router {
            let grad = &mut buf.router[s * d..(s + 1) * d];
            for (t, &j) in route.indices.iter().enumerate() {
                let xj = x.patch(j);
                for (i, &ji) in route.indices.iter().enumerate() {
                    if i == t {
                        continue;
                    }
                    let c = patch_coef[t] * route.gates[i];
                    let xi = x.patch(ji);
                    for e in 0..d {
                        grad[e] += c * (xj[e] - xi[e]);
                    }
                }
            }
            ops.router_backward += 2 * (d * l * l.saturating_sub(1)) as u64;
        }
    }
}

/// Mean loss and mean gradient over `batch`.
pub(crate) fn batch_gradient(
    params: &ModelParams,
    batch: &[&Sample],
    with_router: bool,
    ops: &mut OpCounts,
) -> Result<(f64, GradientBuffer)> {
    if batch.is_empty() {
        return Err(Error::Empty("gradient batch".into()));
    }
    let mut buf = GradientBuffer::zeros(params, with_router);
    let mut loss = 0.0;
    for x in batch {
        params.check_sample(x)?;
        let ev = evaluate(params, x, ops);
        let (li, slope) = loss_and_slope(params, &ev, x);
        loss += li;
        accumulate(params, x, &ev, &slope, &mut buf, ops);
    }
    let inv = 1.0 / batch.len() as f64;
    buf.scale(inv);
    Ok((loss * inv, buf))
}

/// Mean training loss of `params` over `batch`.
pub fn batch_loss(params: &ModelParams, batch: &[&Sample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("loss batch".into()));
    }
    let mut ops = OpCounts::default();
    let mut total = 0.0;
    for x in batch {
        params.check_sample(x)?;
        let ev = evaluate(params, x, &mut ops);
        total += loss_and_slope(params, &ev, x).0;
    }
    Ok(total / batch.len() as f64)
}

fn require_mode(params: &ModelParams, mode: Mode, op: &str) -> Result<()> {
    if params.mode != mode {
        return Err(Error::invalid(format!(
            "{op} needs a {} model, got {}",
            mode.as_str(),
            params.mode.as_str()
        )));
    }
    Ok(())
}

/// Expert gradient with unit gates and a frozen router.
pub fn grad_experts_separate(params: &ModelParams, batch: &[&Sample]) -> Result<GradientBuffer> {
    require_mode(params, Mode::Separate, "grad_experts_separate")?;
    Ok(batch_gradient(params, batch, false, &mut OpCounts::default())?.1)
}

/// Expert gradient with every patch term weighted by its softmax gate.
pub fn grad_experts_joint(params: &ModelParams, batch: &[&Sample]) -> Result<GradientBuffer> {
    require_mode(params, Mode::Joint, "grad_experts_joint")?;
    Ok(batch_gradient(params, batch, false, &mut OpCounts::default())?.1)
}

/// Expert and gating-kernel gradients of a jointly trained model, with top-l
/// membership treated as locally constant.
pub fn grad_router_joint(params: &ModelParams, batch: &[&Sample]) -> Result<GradientBuffer> {
    require_mode(params, Mode::Joint, "grad_router_joint")?;
    Ok(batch_gradient(params, batch, true, &mut OpCounts::default())?.1)
}

pub fn grad_cnn(params: &ModelParams, batch: &[&Sample]) -> Result<GradientBuffer> {
    require_mode(params, Mode::Cnn, "grad_cnn")?;
    Ok(batch_gradient(params, batch, false, &mut OpCounts::default())?.1)
}

fn apply(params: &mut ModelParams, grads: &GradientBuffer, eta: f64, eta_router: f64) -> Result<()> {
    if grads.experts.len() != params.expert_weights.len() {
        return Err(Error::DimensionMismatch {
            expected: params.expert_weights.len(),
            got: grads.experts.len(),
            context: "expert gradient",
        });
    }
    if !grads.router.is_empty() && grads.router.len() != params.gating_kernels.len() {
        return Err(Error::DimensionMismatch {
            expected: params.gating_kernels.len(),
            got: grads.router.len(),
            context: "router gradient",
        });
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    axpy(-eta, &grads.experts, &mut params.expert_weights);
    if !grads.router.is_empty() {
        axpy(-eta_router, &grads.router, &mut params.gating_kernels);
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(())
}

/// `w <- w - rate * grad` for experts and, when present, gating kernels.
/// Output weights are never touched. Non-finite gradients abort.
pub fn sgd_step(params: &mut ModelParams, grads: &GradientBuffer, rate: f64) -> Result<()> {
    apply(params, grads, rate, rate)
}

/// Hyper-parameters of a training run. Architecture fields other than the
/// expert layout (`n`, `d`, `c`) come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub experts: usize,
    pub neurons_per_expert: usize,
    pub l: usize,
    /// Joint mode only: pin every gate to 1 (no router gradient).
    pub unit_gates: bool,
    pub eta: f64,
    pub batch_size: usize,
    /// Epoch mode with per-epoch reshuffle; `None` runs a single pass of
    /// `N / B` steps.
    pub epochs: Option<usize>,
    /// Router learning rate. Separate mode defaults to `1/n`; joint mode
    /// defaults to `eta`.
    pub eta_r: Option<f64>,
    pub router_batch: Option<usize>,
    pub router_iters: Option<usize>,
    /// Samples available to the router phase (defaults to all of them).
    pub router_samples: Option<usize>,
    /// Keep router samples out of the expert phase.
    pub hold_out_router: bool,
    /// Discriminative inner product used for the router recipe defaults;
    /// read from dataset provenance when absent.
    pub delta_d: Option<f64>,
    /// Evaluate and log every this many epochs; 0 logs only start and end.
    pub log_every: usize,
    pub stop_at_zero_error: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Separate,
            experts: 2,
            neurons_per_expert: 20,
            l: 2,
            unit_gates: false,
            eta: 0.2,
            batch_size: 16,
            epochs: Some(50),
            eta_r: None,
            router_batch: None,
            router_iters: None,
            router_samples: None,
            hold_out_router: false,
            delta_d: None,
            log_every: 1,
            stop_at_zero_error: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn arch(&self, data: &Dataset) -> Arch {
        let (k, l) = if self.mode == Mode::Cnn {
            (1, data.n)
        } else {
            (self.experts, self.l)
        };
        Arch {
            mode: self.mode,
            k,
            m: k * self.neurons_per_expert,
            d: data.d,
            n: data.n,
            l,
            c: data.c,
            multi_head: data.c > 2,
            unit_gates: self.unit_gates && self.mode == Mode::Joint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid("eta must be positive"));
        }
        if matches!(self.eta_r, Some(r) if !(r > 0.0 && r.is_finite())) {
            return Err(Error::invalid("eta_r must be positive"));
        }
        if self.batch_size == 0 || self.router_batch == Some(0) {
            return Err(Error::invalid("batch sizes must be >= 1"));
        }
        if self.neurons_per_expert == 0 {
            return Err(Error::invalid("neurons_per_expert must be >= 1"));
        }
        Ok(())
    }
}

/// Router-phase settings actually used by separate training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RouterRecipe {
    pub batch: usize,
    pub eta: f64,
    pub iterations: usize,
    pub samples: usize,
}

/// Default router recipe: `B_r = ceil(4 n^2 / (1 - delta_d)^2)`,
/// `eta_r = 1 / n`, `T_r = ceil(10 / (1 - delta_d))`.
pub fn default_router_recipe(n: usize, delta_d: f64) -> (usize, f64, usize) {
    let gap = 1.0 - delta_d;
    let batch = (4.0 * (n * n) as f64 / (gap * gap)).ceil() as usize;
    let iters = (10.0 / gap).ceil() as usize;
    (batch, 1.0 / n as f64, iters)
}

/// One evaluation checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iter: usize,
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub router_rate: Option<f64>,
    pub assumption1_rate: Option<f64>,
    pub v1: Option<f64>,
    pub v2: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub rows: Vec<LogRow>,
    pub iterations: usize,
    pub epochs_run: usize,
    /// First epoch after which training error was zero.
    pub zero_error_epoch: Option<usize>,
    /// Counted flops of the expert phase (and joint router updates).
    pub ops: OpCounts,
    pub router: Option<RouterRecipe>,
    /// Audit on the evaluation set (test if given, else train) at the end.
    pub final_audit: Option<RouterAudit>,
}

pub const REPORT_CSV_HEADER: &str = "iter,loss,train_acc,test_acc,router_rate,assumption1_rate,v1,v2";

impl RunReport {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.iter,
                r.loss,
                r.train_acc,
                opt(r.test_acc),
                opt(r.router_rate),
                opt(r.assumption1_rate),
                opt(r.v1),
                opt(r.v2)
            ));
        }
        out
    }

    pub fn last(&self) -> &LogRow {
        self.rows.last().expect("reports always hold the initial row")
    }
}

fn log_row(params: &ModelParams, train: &Dataset, test: Option<&Dataset>, iter: usize, epoch: usize) -> Result<LogRow> {
    let refs: Vec<&Sample> = train.samples.iter().collect();
    let loss = batch_loss(params, &refs)?;
    let train_acc = diagnostics::test_accuracy(params, train)?;
    let test_acc = test.map(|t| diagnostics::test_accuracy(params, t)).transpose()?;
    let eval = test.unwrap_or(train);
    let (router_rate, assumption1_rate) = if params.has_router() {
        let audit = diagnostics::router_audit(params, eval)?;
        let a1 = (params.mode == Mode::Joint).then(|| audit.min_rate_top_gate());
        (Some(audit.min_rate_in_topl()), a1)
    } else {
        (None, None)
    };
    let (v1, v2) = if params.multi_head {
        (None, None)
    } else {
        match diagnostics::class_values(params, train) {
            Ok((a, b)) => (Some(a), Some(b)),
            Err(Error::Empty(_)) => (None, None),
            Err(e) => return Err(e),
        }
    };
    Ok(LogRow {
        iter,
        epoch,
        loss,
        train_acc,
        test_acc,
        router_rate,
        assumption1_rate,
        v1,
        v2,
    })
}

/// Mini-batch SGD over `pool` (indices into `train`).
#[allow(clippy::too_many_arguments)]
fn fit(
    params: &mut ModelParams,
    train: &Dataset,
    test: Option<&Dataset>,
    pool: &[usize],
    cfg: &TrainConfig,
    train_router: bool,
    rng: &Rng,
    report: &mut RunReport,
) -> Result<()> {
    if cfg.batch_size > pool.len() {
        return Err(Error::invalid(format!(
            "batch size {} exceeds {} training samples",
            cfg.batch_size,
            pool.len()
        )));
    }
    let eta_router = cfg.eta_r.unwrap_or(cfg.eta);
    let train_router = train_router && params.softmax_gates();
    let epochs = cfg.epochs.unwrap_or(1);
    report.rows.push(log_row(params, train, test, 0, 0)?);
    let mut iter = 0;
    for epoch in 1..=epochs {
        let mut order = pool.to_vec();
        if cfg.epochs.is_some() {
            rng.fork_index("epoch", epoch as u64).shuffle(&mut order);
        } else {
            rng.fork("single-pass").shuffle(&mut order);
        }
        for chunk in order.chunks_exact(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let (_, grads) = batch_gradient(params, &batch, train_router, &mut report.ops)?;
            apply(params, &grads, cfg.eta, eta_router)?;
            iter += 1;
        }
        report.epochs_run = epoch;
        report.iterations = iter;
        let last = epoch == epochs;
        let logged = cfg.log_every > 0 && epoch % cfg.log_every == 0;
        let mut stop = false;
        if logged || last {
            let row = log_row(params, train, test, iter, epoch)?;
            if row.train_acc == 1.0 && report.zero_error_epoch.is_none() {
                report.zero_error_epoch = Some(epoch);
                stop = cfg.stop_at_zero_error;
            }
            report.rows.push(row);
        } else if cfg.stop_at_zero_error && diagnostics::test_accuracy(params, train)? == 1.0 {
            report.zero_error_epoch = Some(epoch);
            report.rows.push(log_row(params, train, test, iter, epoch)?);
            stop = true;
        }
        if stop {
            break;
        }
    }
    Ok(())
}

fn finish(params: &ModelParams, train: &Dataset, test: Option<&Dataset>, report: &mut RunReport) -> Result<()> {
    if params.has_router() {
        report.final_audit = Some(diagnostics::router_audit(params, test.unwrap_or(train))?);
    }
    Ok(())
}

fn new_report(mode: Mode) -> RunReport {
    RunReport {
        mode,
        rows: Vec::new(),
        iterations: 0,
        epochs_run: 0,
        zero_error_epoch: None,
        ops: OpCounts::default(),
        router: None,
        final_audit: None,
    }
}

fn check_data(train: &Dataset, test: Option<&Dataset>) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if let Some(t) = test {
        if (t.n, t.d, t.c) != (train.n, train.d, train.c) {
            return Err(Error::invalid("test set shape differs from training set"));
        }
    }
    Ok(())
}

/// Dispatches on `cfg.mode`.
pub fn train(train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<(ModelParams, RunReport)> {
    match cfg.mode {
        Mode::Separate => train_separate(train, test, cfg),
        Mode::Joint => train_joint(train, test, cfg),
        Mode::Cnn => train_cnn(train, test, cfg),
    }
}

fn resolve_delta_d(train: &Dataset, cfg: &TrainConfig) -> Option<f64> {
    cfg.delta_d
        .or_else(|| train.provenance.params.get("delta_d").and_then(|v| v.as_f64()))
}

/// Router phase followed by expert training with the router frozen.
///
/// Binary data trains kernels 0 (class +1) and 1 (class -1) on the linear
/// surrogate. With `c > 2` classes and `c` experts, kernels are trained in
/// pairs `(0,1), (2,3), ...` on the samples of those two classes.
pub fn train_separate(train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<(ModelParams, RunReport)> {
    if cfg.mode != Mode::Separate {
        return Err(Error::invalid("train_separate needs mode = separate"));
    }
    cfg.validate()?;
    check_data(train, test)?;
    let arch = cfg.arch(train);
    if train.c == 2 && arch.k != 2 {
        return Err(Error::invalid("separate training of a binary task needs exactly 2 experts"));
    }
    if train.c > 2 {
        if !train.c.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "pairwise router training needs an even class count, got {}",
                train.c
            )));
        }
        if arch.k != train.c {
            return Err(Error::invalid("multi-class separate training needs one expert per class"));
        }
    }
    let root = Rng::new(cfg.seed);
    let mut params = init_params(&arch, &root)?;

    let n_total = train.len();
    let n_r = cfg.router_samples.unwrap_or(n_total);
    if n_r == 0 || n_r > n_total {
        return Err(Error::invalid(format!(
            "router samples {n_r} must be in [1, {n_total}]"
        )));
    }
    let (def_batch, def_eta, def_iters) = match resolve_delta_d(train, cfg) {
        Some(dd) => default_router_recipe(train.n, dd),
        None if cfg.router_batch.is_some() && cfg.router_iters.is_some() => (0, 1.0 / train.n as f64, 0),
        None => {
            return Err(Error::MissingMetadata(
                "delta_d (needed for default router batch and iteration counts)".into(),
            ))
        }
    };
    let recipe = RouterRecipe {
        batch: cfg.router_batch.unwrap_or(def_batch),
        eta: cfg.eta_r.unwrap_or(def_eta),
        iterations: cfg.router_iters.unwrap_or(def_iters),
        samples: n_r,
    };
    let mut order: Vec<usize> = (0..n_total).collect();
    root.fork("router-samples").shuffle(&mut order);
    let (router_idx, rest) = order.split_at(n_r);

    let mut router_rng = root.fork("router-batches");
    for pair in 0..params.k / 2 {
        let (pos, neg) = (2 * pair, 2 * pair + 1);
        // relabel the pair as +1 / -1
        let pool: Vec<Sample> = router_idx
            .iter()
            .map(|&i| &train.samples[i])
            .filter_map(|s| {
                let class = class_of(s.label, train.c);
                let label = if class == pos {
                    1
                } else if class == neg {
                    -1
                } else {
                    return None;
                };
                Some(Sample {
                    label,
                    ..s.clone()
                })
            })
            .collect();
        if recipe.batch > pool.len() {
            return Err(Error::invalid(format!(
                "router batch {} exceeds the {} router samples of classes ({pos},{neg})",
                recipe.batch,
                pool.len()
            )));
        }
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        for _ in 0..recipe.iterations {
            router_rng.shuffle(&mut idx);
            let batch: Vec<&Sample> = idx[..recipe.batch].iter().map(|&i| &pool[i]).collect();
            let (g1, g2) = grad_router_separate(&batch)?;
            axpy(-recipe.eta, &g1, params.gating_kernel_mut(pos));
            axpy(-recipe.eta, &g2, params.gating_kernel_mut(neg));
        }
    }
    if !params.all_finite() {
        return Err(Error::NonFinite("router kernels".into()));
    }

    let pool: Vec<usize> = if cfg.hold_out_router {
        let mut p = rest.to_vec();
        p.sort_unstable();
        p
    } else {
        (0..n_total).collect()
    };
    if pool.is_empty() {
        return Err(Error::Empty("expert-phase samples after holding out router samples".into()));
    }
    let mut report = new_report(Mode::Separate);
    report.router = Some(recipe);
    fit(&mut params, train, test, &pool, cfg, false, &root.fork("batches"), &mut report)?;
    finish(&params, train, test, &mut report)?;
    Ok((params, report))
}

/// Simultaneous SGD on gating kernels and expert neurons.
pub fn train_joint(train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<(ModelParams, RunReport)> {
    if cfg.mode != Mode::Joint {
        return Err(Error::invalid("train_joint needs mode = joint"));
    }
    cfg.validate()?;
    check_data(train, test)?;
    let root = Rng::new(cfg.seed);
    let mut params = init_params(&cfg.arch(train), &root)?;
    let mut report = new_report(Mode::Joint);
    let pool: Vec<usize> = (0..train.len()).collect();
    fit(&mut params, train, test, &pool, cfg, true, &root.fork("batches"), &mut report)?;
    finish(&params, train, test, &mut report)?;
    Ok((params, report))
}

pub fn train_cnn(train: &Dataset, test: Option<&Dataset>, cfg: &TrainConfig) -> Result<(ModelParams, RunReport)> {
    if cfg.mode != Mode::Cnn {
        return Err(Error::invalid("train_cnn needs mode = cnn"));
    }
    cfg.validate()?;
    check_data(train, test)?;
    let root = Rng::new(cfg.seed);
    let mut params = init_params(&cfg.arch(train), &root)?;
    let mut report = new_report(Mode::Cnn);
    let pool: Vec<usize> = (0..train.len()).collect();
    fit(&mut params, train, test, &pool, cfg, false, &root.fork("batches"), &mut report)?;
    Ok((params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Placement, Provenance, SyntheticConfig};
    use crate::model::forward_cnn;

    fn sample(patches: Vec<f64>, dim: usize, label: i32) -> Sample {
        Sample {
            patches,
            dim,
            label,
            disc_index: 0,
        }
    }

    fn random_sample(n: usize, d: usize, label: i32, rng: &mut Rng) -> Sample {
        let mut patches = Vec::new();
        for _ in 0..n {
            patches.extend(rng.unit_vector(d));
        }
        sample(patches, d, label)
    }

    fn easy_config(d: usize, l_star: usize) -> SyntheticConfig {
        SyntheticConfig {
            d,
            n: 8,
            c: 2,
            p: 3,
            delta_d: -0.5,
            delta_r: 0.2,
            l_star,
            placement: Placement::Uniform,
        }
    }

    fn easy_data(count: usize, seed: u64) -> (Dataset, Dataset) {
        let cfg = easy_config(12, 2);
        let lib = cfg.library(&Rng::new(seed)).unwrap();
        let mut rng = Rng::new(seed + 1);
        (cfg.dataset(&lib, count, &mut rng).unwrap(), cfg.dataset(&lib, 200, &mut rng).unwrap())
    }

    #[test]
    fn loss_scalars() {
        assert!((logistic_loss(0.0, 1) - 2f64.ln()).abs() < 1e-15);
        assert!(logistic_loss(1e3, 1) < 1e-300);
        assert!((logistic_loss(-1e3, 1) - 1e3).abs() < 1e-9);
        assert!((logistic_loss(-3.0, 1) - (1.0 + 3f64.exp()).ln()).abs() < 1e-14);
        assert!((logistic_loss(-3.0, 1) - 3.0486).abs() < 1e-4);
        assert!((softmax_loss(&[0.3; 5], 2) - 5f64.ln()).abs() < 1e-14);
        assert!(softmax_loss(&[800.0, 0.0], 0) < 1e-300);
        let expected = (1.0 + (-1f64).exp()).ln();
        assert!((softmax_loss(&[1.0, 0.0], 0) - expected).abs() < 1e-15);
        assert!((softmax_loss(&[1.0, 0.0], 0) - 0.3133).abs() < 1e-4);
        assert_eq!(logistic_value(0.0, -1), 0.5);
        assert!((logistic_value(2.0, 1) - 1.0 / (1.0 + 2f64.exp())).abs() < 1e-15);
    }

    #[test]
    fn router_loss_cases() {
        let mut rng = Rng::new(1);
        let x = random_sample(3, 4, 1, &mut rng);
        let w = rng.normal_vec(4, 1.0);
        assert_eq!(router_loss_separate(&w, &w, &[&x]).unwrap(), 0.0);
        let w2 = rng.normal_vec(4, 1.0);
        let mut direct = 0.0;
        for j in 0..3 {
            for e in 0..4 {
                direct -= (w[e] - w2[e]) * x.patches[j * 4 + e];
            }
        }
        assert!((router_loss_separate(&w, &w2, &[&x]).unwrap() - direct).abs() < 1e-14);
        let neg = Sample { label: -1, ..x.clone() };
        assert!((router_loss_separate(&w, &w2, &[&neg]).unwrap() + direct).abs() < 1e-14);
        assert!(router_loss_separate(&w, &w2, &[]).is_err());
        let bad = Sample { label: 2, ..x };
        assert!(grad_router_separate(&[&bad]).is_err());
    }

    #[test]
    fn router_gradient_cancellation() {
        // irrelevant patches shared by a +1 and a -1 sample cancel exactly
        let d = 6;
        let mut rng = Rng::new(2);
        let o1 = rng.unit_vector(d);
        let o2 = rng.unit_vector(d);
        let shared: Vec<Vec<f64>> = (0..3).map(|_| rng.unit_vector(d)).collect();
        let build = |o: &[f64], label| {
            let mut p = o.to_vec();
            shared.iter().for_each(|s| p.extend(s));
            sample(p, d, label)
        };
        let a = build(&o1, 1);
        let b = build(&o2, -1);
        let (g1, g2) = grad_router_separate(&[&a, &b]).unwrap();
        for e in 0..d {
            assert!((g1[e] + (o1[e] - o2[e]) / 2.0).abs() < 1e-15);
            assert!((g2[e] + (o2[e] - o1[e]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn router_gradient_population_mean() {
        let cfg = SyntheticConfig {
            d: 10,
            n: 6,
            c: 2,
            p: 3,
            delta_d: -0.5,
            delta_r: 0.2,
            l_star: 1,
            placement: Placement::Uniform,
        };
        let lib = cfg.library(&Rng::new(5)).unwrap();
        let ds = cfg.dataset(&lib, 100_000, &mut Rng::new(6)).unwrap();
        let batch: Vec<&Sample> = ds.samples.iter().collect();
        let (g1, _) = grad_router_separate(&batch).unwrap();
        let o1 = &lib.discriminative[0];
        let o2 = &lib.discriminative[1];
        // per-coordinate noise is O(sqrt(n / N)); allow a generous multiple
        let tol = 5.0 * (cfg.n as f64 / 100_000.0).sqrt();
        for e in 0..cfg.d {
            assert!((g1[e] + (o1[e] - o2[e]) / 2.0).abs() < tol, "{e}: {}", g1[e]);
        }
    }

    #[test]
    fn router_gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let batch: Vec<Sample> = (0..5)
            .map(|i| random_sample(4, 5, if i % 2 == 0 { 1 } else { -1 }, &mut rng))
            .collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let w1 = rng.normal_vec(5, 1.0);
        let w2 = rng.normal_vec(5, 1.0);
        let (g1, g2) = grad_router_separate(&refs).unwrap();
        let h = 1e-5;
        for e in 0..5 {
            let mut p = w1.clone();
            let mut m = w1.clone();
            p[e] += h;
            m[e] -= h;
            let fd = (router_loss_separate(&p, &w2, &refs).unwrap() - router_loss_separate(&m, &w2, &refs).unwrap()) / (2.0 * h);
            assert!((fd - g1[e]).abs() < 1e-10);
            let mut p = w2.clone();
            let mut m = w2.clone();
            p[e] += h;
            m[e] -= h;
            let fd = (router_loss_separate(&w1, &p, &refs).unwrap() - router_loss_separate(&w1, &m, &refs).unwrap()) / (2.0 * h);
            assert!((fd - g2[e]).abs() < 1e-10);
        }
    }

    #[test]
    fn single_neuron_hand_chain_rule() {
        // one patch, one neuron: f = a * relu(<w, x>)
        let mut p = ModelParams::zeros(&Arch::cnn(1, 2, 1)).unwrap();
        p.expert_weights = vec![0.5, 0.25];
        p.output_weights = vec![2.0];
        let x = sample(vec![0.6, 0.8], 2, 1);
        let z = 0.5 * 0.6 + 0.25 * 0.8;
        let f = 2.0 * z;
        let v = 1.0 / (1.0 + f64::exp(f));
        let g = grad_cnn(&p, &[&x]).unwrap();
        assert!((g.experts[0] - (-v * 2.0 * 0.6)).abs() < 1e-15);
        assert!((g.experts[1] - (-v * 2.0 * 0.8)).abs() < 1e-15);
        // one SGD step by hand
        let mut q = p.clone();
        sgd_step(&mut q, &g, 0.1).unwrap();
        assert!((q.expert_weights[0] - (0.5 + 0.1 * v * 2.0 * 0.6)).abs() < 1e-15);
        assert_eq!(q.output_weights, p.output_weights);
    }

    #[test]
    fn dead_and_saturated_gradients() {
        let mut p = ModelParams::zeros(&Arch::cnn(2, 3, 2)).unwrap();
        p.expert_weights = vec![-1.0, -1.0, -1.0, -2.0, -2.0, -2.0];
        p.output_weights = vec![1.0, 1.0];
        let x = sample(vec![0.6, 0.0, 0.8, 0.0, 1.0, 0.0], 3, 1);
        assert!(grad_cnn(&p, &[&x]).unwrap().experts.iter().all(|&v| v == 0.0));
        p.expert_weights = vec![1e3; 6];
        let g = grad_cnn(&p, &[&x]).unwrap();
        assert!(g.experts.iter().all(|v| v.abs() < 1e-100));
    }

    #[test]
    fn sgd_trivial_cases_and_nan_guard() {
        let p0 = init_params(&Arch::pmoe(Mode::Joint, 2, 4, 3, 4, 2), &Rng::new(1)).unwrap();
        let mut p = p0.clone();
        let zero = GradientBuffer::zeros(&p, true);
        sgd_step(&mut p, &zero, 0.5).unwrap();
        assert_eq!(p, p0);
        let mut g = zero.clone();
        g.experts[0] = 1.0;
        sgd_step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, p0);
        g.router[1] = f64::NAN;
        assert!(matches!(sgd_step(&mut p, &g, 0.1), Err(Error::NonFinite(_))));
        let short = GradientBuffer {
            experts: vec![0.0; 2],
            router: Vec::new(),
        };
        assert!(matches!(sgd_step(&mut p, &short, 0.1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn cnn_gradient_equals_separate_special_case() {
        let mut rng = Rng::new(4);
        let init = Rng::new(9);
        let moe = init_params(&Arch::pmoe(Mode::Separate, 1, 4, 5, 6, 6), &init).unwrap();
        let cnn = init_params(&Arch::cnn(4, 5, 6), &init).unwrap();
        let batch: Vec<Sample> = (0..4).map(|i| random_sample(6, 5, 1 - 2 * (i % 2), &mut rng)).collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        assert_eq!(grad_experts_separate(&moe, &refs).unwrap(), grad_cnn(&cnn, &refs).unwrap());
    }

    #[test]
    fn joint_router_gradient_trivial_cases() {
        let mut rng = Rng::new(5);
        let mut p = init_params(&Arch::pmoe(Mode::Joint, 2, 4, 5, 6, 1), &rng).unwrap();
        let x = random_sample(6, 5, 1, &mut rng);
        let g = grad_router_joint(&p, &[&x]).unwrap();
        assert!(g.router.iter().all(|&v| v == 0.0));
        // identical patches: x_j - x_i vanishes
        p.l = 3;
        let q = rng.unit_vector(5);
        let same = sample(q.repeat(6), 5, -1);
        let g = grad_router_joint(&p, &[&same]).unwrap();
        assert!(g.router.iter().all(|&v| v == 0.0));
        // zero output weights: nothing flows
        p.output_weights.iter_mut().for_each(|a| *a = 0.0);
        let g = grad_router_joint(&p, &[&x]).unwrap();
        assert!(g.experts.iter().chain(&g.router).all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_mode_rejected() {
        let p = init_params(&Arch::cnn(2, 3, 4), &Rng::new(0)).unwrap();
        let x = random_sample(4, 3, 1, &mut Rng::new(1));
        assert!(grad_experts_separate(&p, &[&x]).is_err());
        assert!(grad_router_joint(&p, &[&x]).is_err());
        assert!(grad_cnn(&p, &[]).is_err());
    }

    #[test]
    fn report_csv_layout() {
        let (tr, te) = easy_data(64, 1);
        let cfg = TrainConfig {
            mode: Mode::Cnn,
            neurons_per_expert: 4,
            batch_size: 8,
            epochs: Some(2),
            ..TrainConfig::default()
        };
        let (_, report) = train_cnn(&tr, Some(&te), &cfg).unwrap();
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,"));
        assert!(lines[3].starts_with("16,"));
        // no router columns for cnn
        assert_eq!(lines[3].split(',').nth(4), Some(""));
    }

    #[test]
    fn cnn_training_is_deterministic_and_freezes_output() {
        let (tr, te) = easy_data(80, 2);
        let cfg = TrainConfig {
            mode: Mode::Cnn,
            neurons_per_expert: 6,
            batch_size: 8,
            epochs: Some(3),
            seed: 11,
            ..TrainConfig::default()
        };
        let (p1, r1) = train_cnn(&tr, Some(&te), &cfg).unwrap();
        let (p2, r2) = train_cnn(&tr, Some(&te), &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1, r2);
        let init = init_params(&cfg.arch(&tr), &Rng::new(11)).unwrap();
        assert_eq!(p1.output_weights, init.output_weights);
        assert_ne!(p1.expert_weights, init.expert_weights);
    }

    #[test]
    fn joint_unit_gates_reproduce_cnn() {
        let (tr, _) = easy_data(64, 3);
        let base = TrainConfig {
            neurons_per_expert: 4,
            experts: 1,
            l: tr.n,
            batch_size: 8,
            epochs: Some(2),
            seed: 5,
            ..TrainConfig::default()
        };
        let cnn_cfg = TrainConfig {
            mode: Mode::Cnn,
            ..base.clone()
        };
        let joint_cfg = TrainConfig {
            mode: Mode::Joint,
            unit_gates: true,
            ..base
        };
        let (pc, rc) = train_cnn(&tr, None, &cnn_cfg).unwrap();
        let (pj, rj) = train_joint(&tr, None, &joint_cfg).unwrap();
        assert_eq!(pc.expert_weights, pj.expert_weights);
        for (a, b) in rc.rows.iter().zip(&rj.rows) {
            assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        }
        for x in &tr.samples[..5] {
            let f = forward_cnn(&pc, x).unwrap();
            assert_eq!(f.to_bits(), crate::model::scores(&pj, x).unwrap()[0].to_bits());
        }
    }

    #[test]
    fn untrained_separate_model_is_near_chance() {
        let (tr, te) = easy_data(400, 4);
        let cfg = TrainConfig {
            mode: Mode::Separate,
            neurons_per_expert: 8,
            l: 2,
            batch_size: 400,
            epochs: Some(0),
            router_batch: Some(50),
            ..TrainConfig::default()
        };
        let mut accs = Vec::new();
        for seed in 0..10 {
            let (_, r) = train_separate(&tr, Some(&te), &TrainConfig { seed, ..cfg.clone() }).unwrap();
            accs.push(r.last().test_acc.unwrap());
        }
        let mean = crate::util::mean(&accs);
        assert!((mean - 0.5).abs() < 0.15, "{accs:?}");
    }

    #[test]
    fn separate_training_learns_easy_task() {
        let (tr, te) = easy_data(400, 5);
        let cfg = TrainConfig {
            mode: Mode::Separate,
            neurons_per_expert: 8,
            l: 2,
            batch_size: 16,
            epochs: Some(15),
            router_batch: Some(100),
            seed: 3,
            ..TrainConfig::default()
        };
        let (_, r) = train_separate(&tr, Some(&te), &cfg).unwrap();
        assert!(r.last().test_acc.unwrap() > 0.9, "{:?}", r.last());
        assert_eq!(r.last().router_rate, Some(1.0));
        assert!(r.last().loss < r.rows[0].loss);
    }

    #[test]
    fn separate_training_errors() {
        let (tr, _) = easy_data(40, 6);
        let cfg = TrainConfig {
            mode: Mode::Separate,
            neurons_per_expert: 2,
            router_samples: Some(41),
            ..TrainConfig::default()
        };
        assert!(train_separate(&tr, None, &cfg).is_err());
        // default router batch for n = 8, delta_d = -0.5 is 114 > 40
        let cfg = TrainConfig {
            router_samples: None,
            ..cfg
        };
        assert!(train_separate(&tr, None, &cfg).is_err());
        let cfg = TrainConfig {
            experts: 3,
            router_batch: Some(10),
            ..cfg
        };
        assert!(train_separate(&tr, None, &cfg).is_err());
        let mut bare = tr.clone();
        bare.provenance = Provenance::default();
        let cfg = TrainConfig {
            experts: 2,
            router_batch: None,
            ..cfg
        };
        assert!(matches!(train_separate(&bare, None, &cfg), Err(Error::MissingMetadata(_))));
    }

    #[test]
    fn odd_class_count_rejected() {
        let cfg = SyntheticConfig {
            c: 3,
            ..easy_config(12, 1)
        };
        let lib = cfg.library(&Rng::new(1)).unwrap();
        let ds = cfg.dataset(&lib, 60, &mut Rng::new(2)).unwrap();
        let tc = TrainConfig {
            mode: Mode::Separate,
            experts: 3,
            neurons_per_expert: 2,
            router_batch: Some(5),
            ..TrainConfig::default()
        };
        let err = train_separate(&ds, None, &tc).unwrap_err();
        assert!(err.to_string().contains("even"), "{err}");
    }

    #[test]
    fn default_recipe_values() {
        assert_eq!(default_router_recipe(16, -0.5), (456, 1.0 / 16.0, 7));
        assert_eq!(default_router_recipe(8, 0.0), (256, 0.125, 10));
    }
}
