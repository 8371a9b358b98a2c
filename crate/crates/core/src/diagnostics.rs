//! Theory-facing measurements on trained models: discriminative routing
//! rates, value functions, activation-pattern drift and accuracy.

use serde::Serialize;

use crate::data::{class_of, Dataset, Sample};
use crate::error::{Error, Result};
use crate::linalg::axpy;
use crate::model::{argmax, evaluate, Evaluation, Mode, ModelParams, OpCounts};
use crate::training::logistic_value;

/// Routing audit for one class.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAudit {
    pub class: usize,
    /// Expert held responsible for this class.
    pub expert: usize,
    /// Fraction of samples whose discriminative patch is in that expert's top-l.
    pub rate_in_topl: f64,
    /// Fraction where the patch also carries the largest gate.
    pub rate_top_gate: f64,
    /// Fraction where at least one expert top-gates the patch.
    pub rate_any_top_gate: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RouterAudit {
    pub classes: Vec<ClassAudit>,
    /// `[class][expert]` counts of samples with the discriminative patch selected.
    pub in_topl_counts: Vec<Vec<usize>>,
    /// `[class][expert]` counts of samples with the discriminative patch top-gated.
    pub top_gate_counts: Vec<Vec<usize>>,
    pub samples: usize,
}

pub const AUDIT_CSV_HEADER: &str = "class,expert,rate_in_topl,rate_top_gate,count";

impl RouterAudit {
    /// Worst per-class selection rate (classes without samples are skipped).
    pub fn min_rate_in_topl(&self) -> f64 {
        self.classes
            .iter()
            .filter(|c| c.count > 0)
            .map(|c| c.rate_in_topl)
            .fold(1.0, f64::min)
    }

    pub fn min_rate_top_gate(&self) -> f64 {
        self.classes
            .iter()
            .filter(|c| c.count > 0)
            .map(|c| c.rate_top_gate)
            .fold(1.0, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(AUDIT_CSV_HEADER);
        out.push('\n');
        for c in &self.classes {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.class, c.expert, c.rate_in_topl, c.rate_top_gate, c.count
            ));
        }
        out
    }
}

fn check_nonempty(dataset: &Dataset) -> Result<()> {
    if dataset.is_empty() {
        Err(Error::Empty("dataset".into()))
    } else {
        Ok(())
    }
}

/// `(selected, top_gated)` for the discriminative patch in expert `s`.
fn disc_status(ev: &Evaluation, s: usize, disc: usize) -> (bool, bool) {
    let route = &ev.routing.experts[s];
    match route.indices.iter().position(|&j| j == disc) {
        None => (false, false),
        Some(t) => {
            let g = route.gates[t];
            (true, route.gates.iter().all(|&other| g >= other))
        }
    }
}

fn dataset_has_metadata(dataset: &Dataset) -> Result<()> {
    let ok = dataset.samples.iter().all(|s| s.disc_index < dataset.n);
    if ok {
        Ok(())
    } else {
        Err(Error::MissingMetadata("disc_index".into()))
    }
}

/// How often each class's discriminative patch reaches the expert
/// responsible for it.
///
/// Separate binary models: expert 0 serves `y = +1`, expert 1 serves
/// `y = -1`. Separate multi-class models: expert `i` serves class `i`. Joint
/// models: the expert that top-gates the class most often. CNN: the single
/// expert, which sees every patch.
pub fn router_audit(params: &ModelParams, dataset: &Dataset) -> Result<RouterAudit> {
    check_nonempty(dataset)?;
    dataset_has_metadata(dataset)?;
    let c = dataset.c;
    let k = params.k;
    let mut in_topl = vec![vec![0usize; k]; c];
    let mut top_gate = vec![vec![0usize; k]; c];
    let mut any_top = vec![0usize; c];
    let mut counts = vec![0usize; c];
    let mut ops = OpCounts::default();
    for x in &dataset.samples {
        params.check_sample(x)?;
        let class = class_of(x.label, c);
        counts[class] += 1;
        let ev = evaluate(params, x, &mut ops);
        let mut any = false;
        for s in 0..k {
            let (sel, top) = disc_status(&ev, s, x.disc_index);
            in_topl[class][s] += sel as usize;
            top_gate[class][s] += top as usize;
            any |= top;
        }
        any_top[class] += any as usize;
    }
    let classes = (0..c)
        .map(|class| {
            let expert = match params.mode {
                Mode::Cnn => 0,
                Mode::Separate => class.min(k - 1),
                Mode::Joint => (0..k)
                    .max_by(|&a, &b| {
                        top_gate[class][a]
                            .cmp(&top_gate[class][b])
                            .then(in_topl[class][a].cmp(&in_topl[class][b]))
                            .then(b.cmp(&a))
                    })
                    .unwrap_or(0),
            };
            let rate = |v: usize| {
                if counts[class] == 0 {
                    0.0
                } else {
                    v as f64 / counts[class] as f64
                }
            };
            ClassAudit {
                class,
                expert,
                rate_in_topl: rate(in_topl[class][expert]),
                rate_top_gate: rate(top_gate[class][expert]),
                rate_any_top_gate: rate(any_top[class]),
                count: counts[class],
            }
        })
        .collect();
    Ok(RouterAudit {
        classes,
        in_topl_counts: in_topl,
        top_gate_counts: top_gate,
        samples: dataset.len(),
    })
}

fn binary_score(params: &ModelParams, x: &Sample) -> Result<f64> {
    if params.multi_head {
        return Err(Error::invalid("value functions are defined for binary models"));
    }
    params.check_sample(x)?;
    Ok(evaluate(params, x, &mut OpCounts::default()).scores[0])
}

/// `v = 1 / (1 + exp(y f(x)))`.
pub fn value_function(params: &ModelParams, x: &Sample, y: i32) -> Result<f64> {
    Ok(logistic_value(binary_score(params, x)?, y))
}

/// Class-conditional means of the value function, `(y = +1, y = -1)`.
pub fn class_values(params: &ModelParams, dataset: &Dataset) -> Result<(f64, f64)> {
    let mut sums = [0.0; 2];
    let mut counts = [0usize; 2];
    for x in &dataset.samples {
        let i = if x.label > 0 { 0 } else { 1 };
        sums[i] += value_function(params, x, x.label)?;
        counts[i] += 1;
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err(Error::Empty("a class has no samples".into()));
    }
    Ok((sums[0] / counts[0] as f64, sums[1] / counts[1] as f64))
}

/// Per-expert value terms of a joint model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpertValueTerms {
    pub expert: usize,
    /// Probability that the `y = +1` (resp. `-1`) discriminative patch is selected.
    pub p1: f64,
    pub p2: f64,
    /// `p_i` times the mean of `G_disc * v` over samples of class `i` where
    /// the patch is selected.
    pub v1: f64,
    pub v2: f64,
    /// The selection event had no samples; the matching `v` is reported as 0.
    pub empty1: bool,
    pub empty2: bool,
}

pub fn joint_value_terms(params: &ModelParams, dataset: &Dataset) -> Result<Vec<ExpertValueTerms>> {
    if params.mode != Mode::Joint {
        return Err(Error::invalid("joint_value_terms needs a joint model"));
    }
    if params.multi_head {
        return Err(Error::invalid("value functions are defined for binary models"));
    }
    check_nonempty(dataset)?;
    dataset_has_metadata(dataset)?;
    let k = params.k;
    let mut hits = vec![[0usize; 2]; k];
    let mut weighted = vec![[0.0f64; 2]; k];
    let mut totals = [0usize; 2];
    let mut ops = OpCounts::default();
    for x in &dataset.samples {
        params.check_sample(x)?;
        let i = if x.label > 0 { 0 } else { 1 };
        totals[i] += 1;
        let ev = evaluate(params, x, &mut ops);
        let v = logistic_value(ev.scores[0], x.label);
        for (s, route) in ev.routing.experts.iter().enumerate() {
            if let Some(t) = route.indices.iter().position(|&j| j == x.disc_index) {
                hits[s][i] += 1;
                weighted[s][i] += route.gates[t] * v;
            }
        }
    }
    Ok((0..k)
        .map(|s| {
            let p = |i: usize| {
                if totals[i] == 0 {
                    0.0
                } else {
                    hits[s][i] as f64 / totals[i] as f64
                }
            };
            let v = |i: usize| {
                if hits[s][i] == 0 {
                    0.0
                } else {
                    p(i) * weighted[s][i] / hits[s][i] as f64
                }
            };
            ExpertValueTerms {
                expert: s,
                p1: p(0),
                p2: p(1),
                v1: v(0),
                v2: v(1),
                empty1: hits[s][0] == 0,
                empty2: hits[s][1] == 0,
            }
        })
        .collect())
}

fn check_same_arch(a: &ModelParams, b: &ModelParams) -> Result<()> {
    if a.arch() != b.arch() {
        return Err(Error::invalid("parameter sets have different architectures"));
    }
    Ok(())
}

/// Per expert: fraction of (sample, neuron, selected patch) triples whose
/// activation indicator `<w, x_j> >= 0` differs from the one at `init`.
/// Selection uses the current router.
pub fn activation_change_fraction(now: &ModelParams, init: &ModelParams, dataset: &Dataset) -> Result<Vec<f64>> {
    check_same_arch(now, init)?;
    check_nonempty(dataset)?;
    let mpe = now.neurons_per_expert();
    let mut flips = vec![0usize; now.k];
    let mut total = vec![0usize; now.k];
    let mut ops = OpCounts::default();
    for x in &dataset.samples {
        now.check_sample(x)?;
        let ev = evaluate(now, x, &mut ops);
        for (s, route) in ev.routing.experts.iter().enumerate() {
            for r in 0..mpe {
                let w0 = init.neuron(s, r);
                for (t, &j) in route.indices.iter().enumerate() {
                    let before = crate::linalg::dot(w0, x.patch(j)) >= 0.0;
                    let after = ev.pre[s][r * now.l + t] >= 0.0;
                    flips[s] += (before != after) as usize;
                    total[s] += 1;
                }
            }
        }
    }
    Ok(flips
        .iter()
        .zip(&total)
        .map(|(&f, &t)| f as f64 / t as f64)
        .collect())
}

/// Largest per-neuron distance between the expert gradient and its
/// pseudo-gradient, which freezes activation indicators at `init`.
pub fn pseudo_gradient_gap(now: &ModelParams, init: &ModelParams, batch: &[&Sample]) -> Result<f64> {
    check_same_arch(now, init)?;
    if now.mode == Mode::Joint || now.multi_head {
        return Err(Error::invalid("pseudo_gradient_gap needs a binary separate or cnn model"));
    }
    if batch.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    let d = now.d;
    let mpe = now.neurons_per_expert();
    let inv_l = 1.0 / now.l as f64;
    let mut diff = vec![0.0; now.expert_weights.len()];
    let mut ops = OpCounts::default();
    for x in batch {
        now.check_sample(x)?;
        let ev = evaluate(now, x, &mut ops);
        let slope = -(x.label as f64) * logistic_value(ev.scores[0], x.label);
        for (s, route) in ev.routing.experts.iter().enumerate() {
            for r in 0..mpe {
                let kappa = slope * now.output_weight(0, s, r) * inv_l;
                let w0 = init.neuron(s, r);
                let base = (s * mpe + r) * d;
                for (t, &j) in route.indices.iter().enumerate() {
                    let q = x.patch(j);
                    let true_on = ev.pre[s][r * now.l + t] > 0.0;
                    let pseudo_on = crate::linalg::dot(w0, q) > 0.0;
                    if true_on != pseudo_on {
                        let sign = if true_on { 1.0 } else { -1.0 };
                        axpy(sign * kappa, q, &mut diff[base..base + d]);
                    }
                }
            }
        }
    }
    let inv_b = 1.0 / batch.len() as f64;
    Ok(diff
        .chunks_exact(d)
        .map(|g| crate::linalg::norm(g) * inv_b)
        .fold(0.0, f64::max))
}

/// Whether the model classifies `x` correctly; a zero binary score counts
/// as an error.
pub fn is_correct(params: &ModelParams, scores: &[f64], x: &Sample) -> bool {
    if params.multi_head {
        argmax(scores) == class_of(x.label, params.c)
    } else {
        x.label as f64 * scores[0] > 0.0
    }
}

pub fn test_accuracy(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    check_nonempty(dataset)?;
    let mut ops = OpCounts::default();
    let mut correct = 0usize;
    for x in &dataset.samples {
        params.check_sample(x)?;
        let ev = evaluate(params, x, &mut ops);
        correct += is_correct(params, &ev.scores, x) as usize;
    }
    Ok(correct as f64 / dataset.len() as f64)
}
