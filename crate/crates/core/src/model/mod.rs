//! Forward computation for the patch-level mixture of experts and its CNN
//! counterpart.
//!
//! Each expert `s` owns a gating kernel `w_s`. The kernel scores every patch
//! (`g_j = <w_s, x_j>`), the expert keeps the `l` best-scoring patches, and
//! its `m/k` ReLU neurons see only those patches, weighted by gating values.

mod io;

pub use io::{load_params, save_params, PARAMS_MAGIC, PARAMS_VERSION};

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::linalg::dot;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Router trained first on a linear surrogate, then frozen; unit gates.
    Separate,
    /// Router and experts trained together; softmax gates over the top-l.
    Joint,
    /// Single expert over all patches, no router.
    Cnn,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Separate => "separate",
            Mode::Joint => "joint",
            Mode::Cnn => "cnn",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separate" => Ok(Mode::Separate),
            "joint" => Ok(Mode::Joint),
            "cnn" => Ok(Mode::Cnn),
            _ => Err(Error::invalid(format!("unknown mode {s:?}"))),
        }
    }
}

/// Architecture description used to initialize parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub mode: Mode,
    /// Number of experts (forced to 1 for CNN).
    pub k: usize,
    /// Total hidden neurons across experts.
    pub m: usize,
    pub d: usize,
    pub n: usize,
    /// Patches per expert (forced to n for CNN).
    pub l: usize,
    pub c: usize,
    /// One output head per class (softmax loss) instead of one logistic head.
    #[serde(default)]
    pub multi_head: bool,
    /// Joint mode with every gate pinned to 1.
    #[serde(default)]
    pub unit_gates: bool,
}

impl Arch {
    pub fn cnn(m: usize, d: usize, n: usize) -> Arch {
        Arch {
            mode: Mode::Cnn,
            k: 1,
            m,
            d,
            n,
            l: n,
            c: 2,
            multi_head: false,
            unit_gates: false,
        }
    }

    pub fn pmoe(mode: Mode, k: usize, m: usize, d: usize, n: usize, l: usize) -> Arch {
        Arch {
            mode,
            k,
            m,
            d,
            n,
            l,
            c: 2,
            multi_head: false,
            unit_gates: false,
        }
    }

    pub fn with_classes(mut self, c: usize) -> Arch {
        self.c = c;
        self.multi_head = c > 2;
        self
    }

    fn normalized(&self) -> Arch {
        let mut a = self.clone();
        if a.mode == Mode::Cnn {
            a.k = 1;
            a.l = a.n;
            a.unit_gates = false;
        }
        a
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.normalized();
        if a.k == 0 || a.m == 0 || !a.m.is_multiple_of(a.k) {
            return Err(Error::invalid(format!("k must divide m (k={}, m={})", a.k, a.m)));
        }
        if a.l == 0 || a.l > a.n {
            return Err(Error::invalid(format!("need 1 <= l <= n (l={}, n={})", a.l, a.n)));
        }
        if a.d == 0 {
            return Err(Error::invalid("d must be positive"));
        }
        if a.c < 2 {
            return Err(Error::invalid("class count must be >= 2"));
        }
        if a.c > 2 && !a.multi_head {
            return Err(Error::invalid("more than two classes need per-class output heads"));
        }
        Ok(())
    }
}

/// Trainable and frozen weights.
///
/// Layouts: `gating_kernels[s*d..]`; `expert_weights[(s*(m/k) + r)*d..]`;
/// `output_weights[h*m + s*(m/k) + r]` where `h` is the head (one head for
/// binary logistic models, `c` heads otherwise). Output weights are frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub mode: Mode,
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub n: usize,
    pub l: usize,
    pub c: usize,
    pub multi_head: bool,
    pub unit_gates: bool,
    pub gating_kernels: Vec<f64>,
    pub expert_weights: Vec<f64>,
    pub output_weights: Vec<f64>,
}

impl ModelParams {
    /// All-zero parameters of the given shape.
    pub fn zeros(arch: &Arch) -> Result<ModelParams> {
        arch.validate()?;
        let a = arch.normalized();
        let heads = if a.multi_head { a.c } else { 1 };
        Ok(ModelParams {
            mode: a.mode,
            k: a.k,
            m: a.m,
            d: a.d,
            n: a.n,
            l: a.l,
            c: a.c,
            multi_head: a.multi_head,
            unit_gates: a.unit_gates,
            gating_kernels: if a.mode == Mode::Cnn { Vec::new() } else { vec![0.0; a.k * a.d] },
            expert_weights: vec![0.0; a.m * a.d],
            output_weights: vec![0.0; heads * a.m],
        })
    }

    pub fn arch(&self) -> Arch {
        Arch {
            mode: self.mode,
            k: self.k,
            m: self.m,
            d: self.d,
            n: self.n,
            l: self.l,
            c: self.c,
            multi_head: self.multi_head,
            unit_gates: self.unit_gates,
        }
    }

    pub fn neurons_per_expert(&self) -> usize {
        self.m / self.k
    }

    pub fn num_heads(&self) -> usize {
        if self.multi_head {
            self.c
        } else {
            1
        }
    }

    pub fn has_router(&self) -> bool {
        self.mode != Mode::Cnn
    }

    pub fn softmax_gates(&self) -> bool {
        self.mode == Mode::Joint && !self.unit_gates
    }

    pub fn gating_kernel(&self, s: usize) -> &[f64] {
        &self.gating_kernels[s * self.d..(s + 1) * self.d]
    }

    pub fn gating_kernel_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.gating_kernels[s * self.d..(s + 1) * self.d]
    }

    #[inline]
    pub fn neuron(&self, s: usize, r: usize) -> &[f64] {
        let i = s * self.neurons_per_expert() + r;
        &self.expert_weights[i * self.d..(i + 1) * self.d]
    }

    pub fn neuron_mut(&mut self, s: usize, r: usize) -> &mut [f64] {
        let i = s * self.neurons_per_expert() + r;
        &mut self.expert_weights[i * self.d..(i + 1) * self.d]
    }

    #[inline]
    pub fn output_weight(&self, head: usize, s: usize, r: usize) -> f64 {
        self.output_weights[head * self.m + s * self.neurons_per_expert() + r]
    }

    pub(crate) fn check_sample(&self, x: &Sample) -> Result<()> {
        if x.dim != self.d {
            return Err(Error::DimensionMismatch {
                expected: self.d,
                got: x.dim,
                context: "patch dimension",
            });
        }
        if x.num_patches() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: x.num_patches(),
                context: "patch count",
            });
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.gating_kernels
            .iter()
            .chain(&self.expert_weights)
            .chain(&self.output_weights)
            .all(|v| v.is_finite())
    }
}

/// Routing outcome for one expert on one input.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertRoute {
    /// Selected patch indices, ascending.
    pub indices: Vec<usize>,
    /// Gating value per selected patch (aligned with `indices`).
    pub gates: Vec<f64>,
    /// Routing values of all `n` patches (empty without a router).
    pub values: Vec<f64>,
}

/// Per-expert routing for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingDecision {
    pub experts: Vec<ExpertRoute>,
}

/// Multiply-add counters, in flops (one multiply-add = 2).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct OpCounts {
    pub router_forward: u64,
    pub expert_forward: u64,
    pub router_backward: u64,
    pub expert_backward: u64,
}

impl OpCounts {
    pub fn total(&self) -> u64 {
        self.router_forward + self.expert_forward + self.router_backward + self.expert_backward
    }

    pub fn add(&mut self, other: &OpCounts) {
        self.router_forward += other.router_forward;
        self.expert_forward += other.expert_forward;
        self.router_backward += other.router_backward;
        self.expert_backward += other.expert_backward;
    }
}

/// Full forward state, kept for gradient and diagnostic passes.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// One score per head.
    pub scores: Vec<f64>,
    pub routing: RoutingDecision,
    /// Pre-activations `<w_{r,s}, x_j>`, per expert laid out `[r * l + t]`
    /// for the `t`-th selected patch.
    pub pre: Vec<Vec<f64>>,
}

/// `g_j = <w_s, x_j>` for every patch.
pub fn routing_values(kernel: &[f64], x: &Sample) -> Result<Vec<f64>> {
    if kernel.len() != x.dim {
        return Err(Error::DimensionMismatch {
            expected: x.dim,
            got: kernel.len(),
            context: "gating kernel",
        });
    }
    Ok(x.patches().map(|q| dot(kernel, q)).collect())
}

/// Indices of the `l` largest values, ties toward the smaller index, returned
/// in ascending order.
pub fn top_l_select(values: &[f64], l: usize) -> Result<Vec<usize>> {
    if l == 0 || l > values.len() {
        return Err(Error::invalid(format!("l={l} outside [1, {}]", values.len())));
    }
    Ok(top_l_unchecked(values, l))
}

fn top_l_unchecked(values: &[f64], l: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    if l < values.len() {
        order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
        order.truncate(l);
        order.sort_unstable();
    }
    order
}

/// Gating values over the selected patches: all ones for unit gating, else a
/// softmax of the routing values restricted to the selection.
pub fn gating_values(softmax: bool, values: &[f64], selected: &[usize]) -> Vec<f64> {
    if !softmax {
        return vec![1.0; selected.len()];
    }
    let max = selected.iter().map(|&j| values[j]).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = selected.iter().map(|&j| (values[j] - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[inline]
pub(crate) fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

/// Shared forward kernel for every mode. CNN is the single-expert,
/// all-patches, unit-gate instance of the same arithmetic.
pub(crate) fn evaluate(params: &ModelParams, x: &Sample, ops: &mut OpCounts) -> Evaluation {
    let d = params.d as u64;
    let n = params.n;
    let l = params.l;
    let mpe = params.neurons_per_expert();
    let heads = params.num_heads();
    let mut scores = vec![0.0; heads];
    let mut experts = Vec::with_capacity(params.k);
    let mut pre_all = Vec::with_capacity(params.k);
    let inv_l = 1.0 / l as f64;
    for s in 0..params.k {
        let (indices, gates, values) = if params.has_router() {
            let kernel = params.gating_kernel(s);
            let values: Vec<f64> = x.patches().map(|q| dot(kernel, q)).collect();
            ops.router_forward += 2 * d * n as u64;
            let indices = top_l_unchecked(&values, l);
            let gates = gating_values(params.softmax_gates(), &values, &indices);
            (indices, gates, values)
        } else {
            ((0..n).collect(), vec![1.0; n], Vec::new())
        };
        let mut pre = Vec::with_capacity(mpe * l);
        for r in 0..mpe {
            let w = params.neuron(s, r);
            let mut inner = 0.0;
            for (&j, &g) in indices.iter().zip(&gates) {
                let z = dot(w, x.patch(j));
                pre.push(z);
                inner += relu(z) * g;
            }
            for (h, score) in scores.iter_mut().enumerate() {
                *score += params.output_weight(h, s, r) * inner * inv_l;
            }
        }
        ops.expert_forward += 2 * d * (mpe * l) as u64;
        experts.push(ExpertRoute {
            indices,
            gates,
            values,
        });
        pre_all.push(pre);
    }
    Evaluation {
        scores,
        routing: RoutingDecision { experts },
        pre: pre_all,
    }
}

/// Binary pMoE score and its routing decision.
pub fn forward_pmoe(params: &ModelParams, x: &Sample) -> Result<(f64, RoutingDecision)> {
    if params.mode == Mode::Cnn {
        return Err(Error::invalid("forward_pmoe needs a separate or joint model"));
    }
    if params.multi_head {
        return Err(Error::invalid("forward_pmoe needs a single-head model; use forward_multiclass"));
    }
    params.check_sample(x)?;
    let ev = evaluate(params, x, &mut OpCounts::default());
    Ok((ev.scores[0], ev.routing))
}

/// CNN score `sum_r a_r (1/n) sum_j ReLU(<w_r, x_j>)`.
pub fn forward_cnn(params: &ModelParams, x: &Sample) -> Result<f64> {
    if params.mode != Mode::Cnn {
        return Err(Error::invalid("forward_cnn needs a cnn model"));
    }
    if params.multi_head {
        return Err(Error::invalid("forward_cnn needs a single-head model; use forward_multiclass"));
    }
    params.check_sample(x)?;
    Ok(evaluate(params, x, &mut OpCounts::default()).scores[0])
}

/// Per-class scores of a multi-head model.
pub fn forward_multiclass(params: &ModelParams, x: &Sample) -> Result<Vec<f64>> {
    if !params.multi_head {
        return Err(Error::invalid("forward_multiclass needs per-class output heads"));
    }
    params.check_sample(x)?;
    Ok(evaluate(params, x, &mut OpCounts::default()).scores)
}

/// Any-mode score vector (one entry for binary models).
pub fn scores(params: &ModelParams, x: &Sample) -> Result<Vec<f64>> {
    params.check_sample(x)?;
    Ok(evaluate(params, x, &mut OpCounts::default()).scores)
}

/// Index of the largest score, ties toward the lower class.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Standard deviation of the gating-kernel initialization,
/// `1 / (n^2 ln(n) sqrt(d))`.
pub fn router_init_std(n: usize, d: usize) -> f64 {
    let nf = n as f64;
    1.0 / (nf * nf * nf.ln() * (d as f64).sqrt())
}

/// Random initialization: gating kernels `N(0, sigma_r^2 I)`, expert neurons
/// `N(0, I/m)`, output weights `N(0, 1)`. Each group draws from its own
/// stream so models that differ only in routing share expert weights.
pub fn init_params(arch: &Arch, rng: &Rng) -> Result<ModelParams> {
    let mut params = ModelParams::zeros(arch)?;
    if params.has_router() {
        if params.n < 3 {
            return Err(Error::invalid("router initialization needs n >= 3"));
        }
        let sigma_r = router_init_std(params.n, params.d);
        let mut stream = rng.fork("init-router");
        params.gating_kernels.iter_mut().for_each(|w| *w = sigma_r * stream.normal());
    }
    let sigma = 1.0 / (params.m as f64).sqrt();
    let mut stream = rng.fork("init-expert");
    params.expert_weights.iter_mut().for_each(|w| *w = sigma * stream.normal());
    let mut stream = rng.fork("init-output");
    params.output_weights.iter_mut().for_each(|w| *w = stream.normal());
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;

    fn random_sample(n: usize, d: usize, rng: &mut Rng) -> Sample {
        let mut patches = Vec::with_capacity(n * d);
        for _ in 0..n {
            patches.extend(rng.unit_vector(d));
        }
        Sample {
            patches,
            dim: d,
            label: 1,
            disc_index: 0,
        }
    }

    /// Straight-line evaluation of the pMoE score without the shared kernel.
    fn brute_force(p: &ModelParams, x: &Sample, head: usize) -> f64 {
        let mut f = 0.0;
        for s in 0..p.k {
            let (sel, gates): (Vec<usize>, Vec<f64>) = if p.mode == Mode::Cnn {
                ((0..p.n).collect(), vec![1.0; p.n])
            } else {
                let g: Vec<f64> = (0..p.n)
                    .map(|j| (0..p.d).map(|i| p.gating_kernels[s * p.d + i] * x.patches[j * p.d + i]).sum())
                    .collect();
                let mut idx: Vec<usize> = (0..p.n).collect();
                idx.sort_by(|&a, &b| g[b].partial_cmp(&g[a]).unwrap().then(a.cmp(&b)));
                let mut sel: Vec<usize> = idx[..p.l].to_vec();
                sel.sort();
                let gates = if p.softmax_gates() {
                    let z: f64 = sel.iter().map(|&j| g[j].exp()).sum();
                    sel.iter().map(|&j| g[j].exp() / z).collect()
                } else {
                    vec![1.0; p.l]
                };
                (sel, gates)
            };
            for r in 0..p.m / p.k {
                let a = p.output_weights[head * p.m + s * (p.m / p.k) + r];
                let w = &p.expert_weights[(s * (p.m / p.k) + r) * p.d..][..p.d];
                for (t, &j) in sel.iter().enumerate() {
                    let z: f64 = (0..p.d).map(|i| w[i] * x.patches[j * p.d + i]).sum();
                    f += a / p.l as f64 * z.max(0.0) * gates[t];
                }
            }
        }
        f
    }

    #[test]
    fn routing_value_cases() {
        let mut rng = Rng::new(1);
        let x = random_sample(5, 4, &mut rng);
        assert_eq!(routing_values(&[0.0; 4], &x).unwrap(), vec![0.0; 5]);
        let mut y = x.clone();
        let o = rng.unit_vector(4);
        y.patches[8..12].copy_from_slice(&o);
        assert!((routing_values(&o, &y).unwrap()[2] - 1.0).abs() < 1e-15);
        let w = rng.normal_vec(4, 1.0);
        let g = routing_values(&w, &x).unwrap();
        for (j, gj) in g.iter().enumerate() {
            let naive: f64 = (0..4).map(|i| w[i] * x.patches[j * 4 + i]).sum();
            assert!((gj - naive).abs() < 1e-14);
        }
        assert!(routing_values(&[0.0; 3], &x).is_err());
    }

    #[test]
    fn top_l_cases() {
        assert_eq!(top_l_select(&[3.0, 1.0, 2.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(top_l_select(&[3.0, 1.0, 2.0], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(top_l_select(&[1.0; 4], 2).unwrap(), vec![0, 1]);
        assert!(top_l_select(&[1.0; 4], 0).is_err());
        assert!(top_l_select(&[1.0; 4], 5).is_err());
    }

    #[test]
    fn gating_cases() {
        assert_eq!(gating_values(false, &[5.0, 1.0, 3.0], &[0, 2]), vec![1.0, 1.0]);
        let g = gating_values(true, &[0.7; 6], &[0, 1, 4, 5]);
        assert!(g.iter().all(|v| (v - 0.25).abs() < 1e-15));
        let g = gating_values(true, &[2.0, 9.0, 0.0], &[0, 2]);
        let e2 = 2.0f64.exp();
        assert!((g[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((g[1] - 1.0 / (e2 + 1.0)).abs() < 1e-15);
        assert!((g[0] - 0.8808).abs() < 1e-4 && (g[1] - 0.1192).abs() < 1e-4);
        // overflow safety
        let g = gating_values(true, &[1000.0, 999.0], &[0, 1]);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_score_zero() {
        let mut rng = Rng::new(2);
        let x = random_sample(4, 3, &mut rng);
        let p = ModelParams::zeros(&Arch::pmoe(Mode::Separate, 2, 4, 3, 4, 2)).unwrap();
        assert_eq!(forward_pmoe(&p, &x).unwrap().0, 0.0);
        let p = ModelParams::zeros(&Arch::cnn(3, 3, 4)).unwrap();
        assert_eq!(forward_cnn(&p, &x).unwrap(), 0.0);
        let p = ModelParams::zeros(&Arch::pmoe(Mode::Joint, 2, 4, 3, 4, 2).with_classes(3)).unwrap();
        let s = forward_multiclass(&p, &x).unwrap();
        assert_eq!(s, vec![0.0; 3]);
        assert_eq!(argmax(&s), 0);
    }

    #[test]
    fn brute_force_agreement() {
        let mut rng = Rng::new(3);
        for mode in [Mode::Separate, Mode::Joint] {
            let mut p = init_params(&Arch::pmoe(mode, 2, 4, 5, 3, 2), &rng.fork("p")).unwrap();
            p.gating_kernels = rng.normal_vec(10, 1.0);
            let x = random_sample(3, 5, &mut rng);
            let (f, routing) = forward_pmoe(&p, &x).unwrap();
            assert!((f - brute_force(&p, &x, 0)).abs() < 1e-12);
            assert_eq!(routing.experts.len(), 2);
        }
        let p = init_params(&Arch::cnn(6, 5, 4), &rng).unwrap();
        let x = random_sample(4, 5, &mut rng);
        assert!((forward_cnn(&p, &x).unwrap() - brute_force(&p, &x, 0)).abs() < 1e-12);
    }

    #[test]
    fn single_neuron_cnn_analytic() {
        let d = 4;
        let n = 5;
        let mut p = ModelParams::zeros(&Arch::cnn(1, d, n)).unwrap();
        p.expert_weights = vec![1.0, 0.0, 0.0, 0.0];
        p.output_weights = vec![1.0];
        let mut patches = vec![0.0; n * d];
        patches[2 * d] = 1.0;
        for j in [0, 1, 3, 4] {
            patches[j * d + 1 + j % 3] = 1.0;
        }
        let x = Sample {
            patches,
            dim: d,
            label: 1,
            disc_index: 2,
        };
        assert!((forward_cnn(&p, &x).unwrap() - 1.0 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn cnn_special_case_is_bit_identical() {
        let mut rng = Rng::new(5);
        let init = Rng::new(77);
        let moe = init_params(&Arch::pmoe(Mode::Separate, 1, 6, 7, 5, 5), &init).unwrap();
        let cnn = init_params(&Arch::cnn(6, 7, 5), &init).unwrap();
        assert_eq!(moe.expert_weights, cnn.expert_weights);
        for _ in 0..50 {
            let x = random_sample(5, 7, &mut rng);
            assert_eq!(forward_pmoe(&moe, &x).unwrap().0.to_bits(), forward_cnn(&cnn, &x).unwrap().to_bits());
        }
    }

    #[test]
    fn antisymmetric_heads() {
        let mut rng = Rng::new(6);
        let bin = init_params(&Arch::pmoe(Mode::Joint, 2, 4, 5, 6, 3), &rng).unwrap();
        let mut multi = ModelParams::zeros(&Arch::pmoe(Mode::Joint, 2, 4, 5, 6, 3).with_classes(2)).unwrap();
        multi.multi_head = true;
        multi.output_weights = vec![0.0; 8];
        multi.gating_kernels = bin.gating_kernels.clone();
        multi.expert_weights = bin.expert_weights.clone();
        for i in 0..4 {
            multi.output_weights[i] = bin.output_weights[i];
            multi.output_weights[4 + i] = -bin.output_weights[i];
        }
        let x = random_sample(6, 5, &mut rng);
        let f = forward_pmoe(&bin, &x).unwrap().0;
        let s = forward_multiclass(&multi, &x).unwrap();
        assert!((s[0] - s[1] - 2.0 * f).abs() < 1e-12);
    }

    #[test]
    fn multiclass_figure_shape_accepted() {
        let arch = Arch::pmoe(Mode::Joint, 4, 8, 10, 6, 2).with_classes(4);
        let p = init_params(&arch, &Rng::new(1)).unwrap();
        assert_eq!(p.output_weights.len(), 4 * 8);
        let x = random_sample(6, 10, &mut Rng::new(2));
        assert_eq!(forward_multiclass(&p, &x).unwrap().len(), 4);
    }

    #[test]
    fn invalid_arch_rejected() {
        assert!(ModelParams::zeros(&Arch::pmoe(Mode::Joint, 3, 4, 5, 6, 3)).is_err());
        assert!(ModelParams::zeros(&Arch::pmoe(Mode::Joint, 2, 4, 5, 6, 7)).is_err());
        assert!(ModelParams::zeros(&Arch::pmoe(Mode::Joint, 2, 4, 5, 6, 0)).is_err());
        let x = random_sample(5, 5, &mut Rng::new(1));
        let p = ModelParams::zeros(&Arch::pmoe(Mode::Joint, 2, 4, 5, 6, 3)).unwrap();
        assert!(matches!(forward_pmoe(&p, &x), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn expert_init_std() {
        let arch = Arch::cnn(400, 250, 4);
        let p = init_params(&arch, &Rng::new(9)).unwrap();
        let w = &p.expert_weights;
        assert_eq!(w.len(), 100_000);
        let std = (w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std - 1.0 / 20.0).abs() < 0.02 / 20.0, "{std}");
    }

    #[test]
    fn router_init_is_small() {
        let (n, d) = (16, 784);
        let arch = Arch::pmoe(Mode::Joint, 2, 2, d, n, 4);
        let mut ok = 0;
        for seed in 0..200 {
            let p = init_params(&arch, &Rng::new(seed)).unwrap();
            if (0..2).all(|s| norm(p.gating_kernel(s)) <= 1.0 / (n * n) as f64) {
                ok += 1;
            }
        }
        assert!(ok as f64 / 200.0 >= 0.99, "{ok}");
    }

    #[test]
    fn joint_gates_normalized() {
        let mut rng = Rng::new(4);
        let mut p = init_params(&Arch::pmoe(Mode::Joint, 3, 6, 5, 8, 4), &rng).unwrap();
        p.gating_kernels = rng.normal_vec(15, 2.0);
        let x = random_sample(8, 5, &mut rng);
        let (_, routing) = forward_pmoe(&p, &x).unwrap();
        for e in &routing.experts {
            assert_eq!(e.indices.len(), 4);
            assert!((e.gates.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(e.gates.iter().all(|&g| g > 0.0 && g <= 1.0));
        }
    }
}
