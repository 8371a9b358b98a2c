//! Per-iteration cost model and instrumented operation counts.
//!
//! One multiply-add counts as 2 flops everywhere, so ratios between models
//! are free of the constant.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{Mode, ModelParams, OpCounts};
use crate::training::batch_gradient;

pub const FLOPS_PER_MULADD: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopModel {
    /// Batch size.
    pub b: u64,
    /// Total hidden neurons.
    pub m: u64,
    pub n: u64,
    pub l: u64,
    pub k: u64,
    pub d: u64,
}

impl FlopModel {
    pub fn validate(&self) -> Result<()> {
        if [self.b, self.m, self.n, self.l, self.k, self.d].contains(&0) {
            return Err(Error::invalid("flop model fields must be positive"));
        }
        if self.l > self.n {
            return Err(Error::invalid("l must not exceed n"));
        }
        Ok(())
    }
}

/// Leading-order flops of one SGD iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopRecord {
    pub router_forward: u64,
    pub router_backward: u64,
    pub expert_forward: u64,
    pub expert_backward: u64,
}

impl FlopRecord {
    pub fn total(&self) -> u64 {
        self.router_forward + self.router_backward + self.expert_forward + self.expert_backward
    }

    pub fn expert(&self) -> u64 {
        self.expert_forward + self.expert_backward
    }
}

/// CNN: `Bmnd` each way. pMoE experts: `Bmld` each way. Routers: `Bknd`
/// forward; joint training adds `Bkl^2d` backward, separate training has no
/// router backward pass during expert training.
pub fn flops_per_iteration(fm: &FlopModel, mode: Mode) -> Result<FlopRecord> {
    fm.validate()?;
    let c = FLOPS_PER_MULADD;
    let FlopModel { b, m, n, l, k, d } = *fm;
    Ok(match mode {
        Mode::Cnn => FlopRecord {
            expert_forward: c * b * m * n * d,
            expert_backward: c * b * m * n * d,
            ..Default::default()
        },
        Mode::Separate => FlopRecord {
            router_forward: c * b * k * n * d,
            router_backward: 0,
            expert_forward: c * b * m * l * d,
            expert_backward: c * b * m * l * d,
        },
        Mode::Joint => FlopRecord {
            router_forward: c * b * k * n * d,
            router_backward: c * b * k * l * l * d,
            expert_forward: c * b * m * l * d,
            expert_backward: c * b * m * l * d,
        },
    })
}

/// Iterations to reach error `eps`, up to constants: `l^4`, `k^2 l^2` and
/// `n^4` over `eps^8` for separate, joint and CNN training.
pub fn iterations_to_epsilon(fm: &FlopModel, mode: Mode, eps: f64) -> Result<f64> {
    fm.validate()?;
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid("eps must be positive"));
    }
    let (n, l, k) = (fm.n as f64, fm.l as f64, fm.k as f64);
    let core = match mode {
        Mode::Separate => l.powi(4),
        Mode::Joint => k * k * l * l,
        Mode::Cnn => n.powi(4),
    };
    Ok(core / eps.powi(8))
}

/// Expert cost per iteration times the iteration count, the quantity used
/// to compare models at equal error.
pub fn cost_to_epsilon(fm: &FlopModel, mode: Mode, eps: f64) -> Result<f64> {
    let per_iter = flops_per_iteration(fm, mode)?.expert() as f64;
    Ok(per_iter * iterations_to_epsilon(fm, mode, eps)?)
}

/// Operations actually executed by one forward and backward pass over
/// `batch`. The router backward pass runs only for joint models when
/// `train_router` is set.
pub fn empirical_op_count(params: &ModelParams, batch: &[&Sample], train_router: bool) -> Result<OpCounts> {
    let mut ops = OpCounts::default();
    batch_gradient(params, batch, train_router && params.mode == Mode::Joint, &mut ops)?;
    Ok(ops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Arch};
    use crate::rng::Rng;

    fn fm() -> FlopModel {
        FlopModel {
            b: 128,
            m: 40,
            n: 16,
            l: 2,
            k: 8,
            d: 784,
        }
    }

    #[test]
    fn hand_evaluated_record() {
        let r = flops_per_iteration(&fm(), Mode::Joint).unwrap();
        assert_eq!(r.router_forward, 2 * 128 * 8 * 16 * 784);
        assert_eq!(r.router_forward, 25_690_112);
        assert_eq!(r.router_backward, 2 * 128 * 8 * 4 * 784);
        assert_eq!(r.router_backward, 6_422_528);
        assert_eq!(r.expert_forward, 16_056_320);
        assert_eq!(r.expert_backward, 16_056_320);
        let c = flops_per_iteration(&fm(), Mode::Cnn).unwrap();
        assert_eq!(c.expert_forward, 128_450_560);
        assert_eq!(c.total(), 256_901_120);
        assert_eq!(flops_per_iteration(&fm(), Mode::Separate).unwrap().router_backward, 0);
    }

    #[test]
    fn expert_ratio_is_l_over_n() {
        let moe = flops_per_iteration(&fm(), Mode::Separate).unwrap().expert();
        let cnn = flops_per_iteration(&fm(), Mode::Cnn).unwrap().expert();
        assert_eq!(moe * 16, cnn * 2);
    }

    #[test]
    fn multiplicative_in_batch_and_dim() {
        for mode in [Mode::Cnn, Mode::Separate, Mode::Joint] {
            let base = flops_per_iteration(&fm(), mode).unwrap();
            let mut f = fm();
            f.b *= 3;
            f.d *= 5;
            let scaled = flops_per_iteration(&f, mode).unwrap();
            assert_eq!(scaled.total(), 15 * base.total());
        }
    }

    #[test]
    fn epsilon_cost_ratio() {
        let f = fm();
        let ratio = cost_to_epsilon(&f, Mode::Cnn, 0.1).unwrap() / cost_to_epsilon(&f, Mode::Joint, 0.1).unwrap();
        let expected = 16f64.powi(5) / (64.0 * 8.0);
        assert!((ratio / expected - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_models() {
        let mut f = fm();
        f.l = 17;
        assert!(flops_per_iteration(&f, Mode::Joint).is_err());
        f.l = 2;
        f.b = 0;
        assert!(flops_per_iteration(&f, Mode::Cnn).is_err());
    }

    #[test]
    fn cnn_count_is_exact() {
        let (m, n, d, b) = (3, 5, 4, 6);
        let p = init_params(&Arch::cnn(m, d, n), &Rng::new(1)).unwrap();
        let mut rng = Rng::new(2);
        let samples: Vec<Sample> = (0..b)
            .map(|i| Sample {
                patches: (0..n).flat_map(|_| rng.unit_vector(d)).collect(),
                dim: d,
                label: if i % 2 == 0 { 1 } else { -1 },
                disc_index: 0,
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let ops = empirical_op_count(&p, &refs, false).unwrap();
        let model = flops_per_iteration(
            &FlopModel {
                b: b as u64,
                m: m as u64,
                n: n as u64,
                l: n as u64,
                k: 1,
                d: d as u64,
            },
            Mode::Cnn,
        )
        .unwrap();
        assert_eq!(ops.expert_forward, model.expert_forward);
        assert_eq!(ops.expert_backward, model.expert_backward);
        assert_eq!(ops.router_forward + ops.router_backward, 0);
    }
}
