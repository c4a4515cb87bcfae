//! Whole-model gradient checking against central finite differences.
//!
//! One backward pass supplies the analytic gradients; every parameter group
//! is then probed by re-running the forward pass with individual scalars
//! nudged by ±1e-5. The loss is a fixed random weighting of the head output
//! so no gradient direction is structurally invisible.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::layers::ForwardCtx;
use crate::model::{param_group, ModelParams};
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Relative error denominator floor; below this magnitude the comparison is
/// effectively absolute, keeping finite-difference noise out of the verdict.
pub const DENOM_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub groups: Vec<GroupResult>,
    pub probes: usize,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    /// Groups at or above the threshold, worst first.
    pub fn failures(&self, threshold: f64) -> Vec<&GroupResult> {
        let mut bad: Vec<&GroupResult> =
            self.groups.iter().filter(|g| g.max_rel_err >= threshold).collect();
        bad.sort_by(|a, b| b.max_rel_err.partial_cmp(&a.max_rel_err).unwrap());
        bad
    }
}

/// Deterministic probe indices: all scalars when the tensor is small,
/// an evenly strided subsample otherwise.
fn probe_indices(numel: usize, cap: usize) -> Vec<usize> {
    if numel <= cap {
        (0..numel).collect()
    } else {
        (0..cap).map(|i| i * numel / cap).collect()
    }
}

/// Check analytic gradients of every parameter group of the model built
/// from `config` on a random input of the given size.
pub fn run(
    config: &ModelConfig,
    input_hw: (usize, usize),
    seed: u64,
    probes_per_tensor: usize,
) -> Result<GradcheckReport> {
    let mut params = ModelParams::init(config)?;
    // Finite differences are undefined at ReLU kinks, and fresh inits sit
    // exactly on some (zero biases behind dead channels). Move to a generic
    // point in parameter space first.
    let mut jitter = Rng::new(seed ^ 0x4a4954);
    params.visit_mut(&mut |_, t| {
        for v in t.data.iter_mut() {
            *v += jitter.uniform_in(-0.02, 0.02);
        }
    });
    let mut data_rng = Rng::new(seed ^ 0x6772616463686b);
    let image = Tensor::from_normal(&[1, 3, input_hw.0, input_hw.1], 1.0, &mut data_rng);

    // fixed loss weights over the head output
    let out_len = {
        let mut tape = Tape::inference();
        let mut ctx = ForwardCtx::new();
        let img = tape.leaf(image.clone());
        let out = params.forward(&mut tape, &mut ctx, img, None)?;
        tape.data(out.head).len()
    };
    let weights: Vec<f64> = {
        let mut r = data_rng.fork(0x77);
        (0..out_len).map(|_| r.normal()).collect()
    };

    // analytic pass
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new();
    params.visit_mut(&mut |_, t| t.requires_grad = true);
    let img = tape.leaf(image.clone());
    let out = params.forward(&mut tape, &mut ctx, img, None)?;
    let w = tape.constant(Tensor::new(tape.shape(out.head), weights.clone())?);
    let prod = tape.mul(out.head, w)?;
    let loss = tape.sum_all(prod);
    tape.backward(loss)?;
    params.visit_mut(&mut |_, t| t.requires_grad = false);

    let analytic: BTreeMap<String, Vec<f64>> = ctx
        .binding
        .iter()
        .filter_map(|(path, id)| tape.grad(*id).map(|g| (path.clone(), g.to_vec())))
        .collect();

    let eval = |p: &ModelParams| -> Result<f64> {
        let mut tape = Tape::inference();
        let mut ctx = ForwardCtx::new();
        let img = tape.leaf(image.clone());
        let out = p.forward(&mut tape, &mut ctx, img, None)?;
        Ok(tape.data(out.head).iter().zip(&weights).map(|(a, b)| a * b).sum())
    };

    // collect tensor paths + sizes in visit order
    let mut tensors: Vec<(String, usize)> = Vec::new();
    params.visit(&mut |path, t| tensors.push((path.into(), t.numel())));

    let mut groups: BTreeMap<&'static str, GroupResult> = BTreeMap::new();
    let mut probes = 0usize;
    for (path, numel) in &tensors {
        let grads = analytic
            .get(path)
            .unwrap_or_else(|| panic!("no analytic gradient recorded for {path}"));
        for &vi in probe_indices(*numel, probes_per_tensor).iter() {
            let nudge = |p: &mut ModelParams, delta: f64| {
                p.visit_mut(&mut |q, t| {
                    if q == path {
                        t.data[vi] += delta;
                    }
                });
            };
            let mut central = |h: f64| -> Result<f64> {
                nudge(&mut params, h);
                let plus = eval(&params)?;
                nudge(&mut params, -2.0 * h);
                let minus = eval(&params)?;
                nudge(&mut params, h);
                Ok((plus - minus) / (2.0 * h))
            };
            let a = grads[vi];
            let rel_of = |numeric: f64| (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            let mut rel = rel_of(central(FD_STEP)?);
            // A probe window that straddles a ReLU kink corrupts the
            // difference quotient. Kink artifacts shrink with the step;
            // genuine gradient defects do not, so take the best of three.
            if rel >= 1e-6 {
                for shrink in [8.0, 64.0] {
                    rel = rel.min(rel_of(central(FD_STEP / shrink)?));
                }
            }
            probes += 1;

            let entry = groups.entry(param_group(path)).or_insert_with(|| GroupResult {
                group: param_group(path).into(),
                checked: 0,
                max_rel_err: 0.0,
                worst_param: String::new(),
            });
            entry.checked += 1;
            if rel > entry.max_rel_err {
                entry.max_rel_err = rel;
                entry.worst_param = format!("{path}[{vi}]");
            }
        }
    }

    Ok(GradcheckReport { groups: groups.into_values().collect(), probes })
}
