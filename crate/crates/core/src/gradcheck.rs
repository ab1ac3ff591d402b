//! Central finite-difference checks of tape gradients in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::LossWeights;
use crate::error::Result;
use crate::lpr::FineTuneBlock;
use crate::nn::{CoordinateAttention, DualAttention, InvertedResidual};
use crate::objectives::{total_loss_on_tape, FeatureExtractor};
use crate::params::{Initializer, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const FD_STEP: f64 = 1e-3;
pub const FD_TOLERANCE: f64 = 1e-4;

/// Worst relative error over the inputs and parameters of one check.
/// Each tensor is scored as `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`
/// over its coordinates whose `±step` probes stay on one linear piece of
/// every piecewise op; the others are counted in `skipped`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
    pub worst: String,
    pub tensors: usize,
    pub coordinates: usize,
    pub skipped: usize,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err <= tolerance
    }
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares reverse-mode gradients of `f` against central differences with
/// respect to every input tensor and every parameter in `store`.
pub fn check<F>(name: &str, store: &ParamStore<f64>, inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<(f64, Vec<u8>)> {
        let tape = Tape::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let v = tape.value(loss).data()[0];
        Ok((v, tape.piece_pattern()))
    };
    let difference = |up: (f64, Vec<u8>), down: (f64, Vec<u8>)| (up.1 == down.1).then(|| (up.0 - down.0) / (2.0 * step));
    let tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss);

    let mut report = GradReport {
        name: name.to_owned(),
        max_rel_err: 0.0,
        worst: String::new(),
        tensors: 0,
        coordinates: 0,
        skipped: 0,
    };
    let mut record = |label: String, analytic: &[f64], numeric: &[Option<f64>]| {
        let (a, n): (Vec<f64>, Vec<f64>) =
            analytic.iter().zip(numeric).filter_map(|(&a, n)| n.map(|n| (a, n))).unzip();
        let e = rel_err(&a, &n);
        report.tensors += 1;
        report.coordinates += numeric.len();
        report.skipped += numeric.len() - n.len();
        if e > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = report.max_rel_err.max(e);
            report.worst = label;
        }
    };

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut numeric = Vec::with_capacity(input.numel());
        let mut probe = inputs.to_vec();
        for i in 0..input.numel() {
            let x = input.data()[i];
            probe[k].data_mut()[i] = x + step;
            let up = eval(store, &probe)?;
            probe[k].data_mut()[i] = x - step;
            let down = eval(store, &probe)?;
            probe[k].data_mut()[i] = x;
            numeric.push(difference(up, down));
        }
        record(format!("input{k}"), &analytic, &numeric);
    }

    let mut probe = store.clone();
    for id in store.ids() {
        let value = store.get(id);
        let analytic = grads.param(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; value.numel()]);
        let mut numeric = Vec::with_capacity(value.numel());
        for i in 0..value.numel() {
            let x = value.data()[i];
            probe.get_mut(id).data_mut()[i] = x + step;
            let up = eval(&probe, inputs)?;
            probe.get_mut(id).data_mut()[i] = x - step;
            let down = eval(&probe, inputs)?;
            probe.get_mut(id).data_mut()[i] = x;
            numeric.push(difference(up, down));
        }
        record(store.name(id).to_owned(), &analytic, &numeric);
    }
    Ok(report)
}

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

fn randomize_biases(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).ends_with(".bias")).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    }
}

/// Inverted-residual block with and without its shortcut.
pub fn inverted_residual(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer::new(seed);
    let mut store = ParamStore::new();
    let with_shortcut = InvertedResidual::new(&mut store, &mut init, "ir_a", 4, 4, 1, 2);
    let strided = InvertedResidual::new(&mut store, &mut init, "ir_b", 4, 6, 2, 2);
    randomize_biases(&mut store, &mut rng);
    let x = uniform([2, 4, 6, 6], -1.0, 1.0, &mut rng);
    let r = uniform([2, 6, 3, 3], -1.0, 1.0, &mut rng);
    check("inverted_residual", &store, &[x], FD_STEP, |tape, v| {
        let h = with_shortcut.forward(tape, v[0]);
        let out = strided.forward(tape, h);
        Ok(tape.sum_all(tape.mul(out, tape.constant(r.clone()))))
    })
}

pub fn coordinate_attention(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer::new(seed);
    let mut store = ParamStore::new();
    let ca = CoordinateAttention::new(&mut store, &mut init, "ca", 8);
    randomize_biases(&mut store, &mut rng);
    let x = uniform([2, 8, 5, 7], -1.0, 1.0, &mut rng);
    let r = uniform([2, 8, 5, 7], -1.0, 1.0, &mut rng);
    check("coordinate_attention", &store, &[x], FD_STEP, |tape, v| {
        let out = ca.forward(tape, v[0]);
        Ok(tape.sum_all(tape.mul(out, tape.constant(r.clone()))))
    })
}

pub fn dual_attention(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer::new(seed);
    let mut store = ParamStore::new();
    let da = DualAttention::new(&mut store, &mut init, "da", 8);
    randomize_biases(&mut store, &mut rng);
    let a = uniform([1, 8, 6, 4], -1.0, 1.0, &mut rng);
    let b = uniform([1, 8, 6, 4], -1.0, 1.0, &mut rng);
    let r = uniform([1, 8, 6, 4], -1.0, 1.0, &mut rng);
    check("dual_attention", &store, &[a, b], FD_STEP, |tape, v| {
        let out = da.forward(tape, v[0], v[1])?;
        Ok(tape.sum_all(tape.mul(out, tape.constant(r.clone()))))
    })
}

pub fn finetune_block(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer::new(seed);
    let mut store = ParamStore::new();
    let ft = FineTuneBlock::new(&mut store, &mut init, "ft", 3);
    randomize_biases(&mut store, &mut rng);
    let x = uniform([1, 3, 6, 5], -1.0, 1.0, &mut rng);
    let r = uniform([1, 3, 6, 5], -1.0, 1.0, &mut rng);
    check("finetune_block", &store, &[x], FD_STEP, |tape, v| {
        let out = ft.forward(tape, v[0]);
        Ok(tape.sum_all(tape.mul(out, tape.constant(r.clone()))))
    })
}

/// Total loss with respect to the rendered image.
pub fn total_loss(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extractor = FeatureExtractor::random(seed);
    let b0 = uniform([1, 3, 16, 16], 0.05, 0.95, &mut rng);
    let target = uniform([1, 3, 16, 16], 0.0, 1.0, &mut rng);
    let store = ParamStore::new();
    check("total_loss", &store, &[b0], FD_STEP, |tape, v| {
        let t = tape.constant(target.clone());
        Ok(total_loss_on_tape(tape, v[0], t, &LossWeights::default(), &extractor)?.total)
    })
}

/// Every block check for one seed.
pub fn all_blocks(seed: u64) -> Result<Vec<GradReport>> {
    Ok(vec![
        inverted_residual(seed)?,
        coordinate_attention(seed)?,
        dual_attention(seed)?,
        finetune_block(seed)?,
        total_loss(seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checker_catches_a_wrong_gradient() {
        // abs has gradient sign(x); a loss built from it through a detached
        // constant must disagree with differences
        let x = Tensor::from_vec([1, 1, 1, 3], vec![0.5, -1.0, 2.0]);
        let store = ParamStore::new();
        let ok = check("square", &store, &[x.clone()], FD_STEP, |t, v| Ok(t.sum_all(t.square(v[0])))).unwrap();
        assert!(ok.max_rel_err < 1e-8);
        let bad = check("detached", &store, &[x], FD_STEP, |t, v| {
            let c = t.constant(t.to_tensor(v[0]));
            Ok(t.sum_all(t.mul(v[0], c)))
        })
        .unwrap();
        assert!(bad.max_rel_err > 0.1);
    }

    #[test]
    fn blocks_pass_for_one_seed() {
        for r in all_blocks(0).unwrap() {
            assert!(r.passes(FD_TOLERANCE), "{r:?}");
            assert!(r.skipped * 4 < r.coordinates, "{r:?}");
        }
    }

    #[test]
    fn probes_across_a_kink_are_skipped() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![0.0004, -1.0, 2.0]);
        let r = check("relu", &ParamStore::new(), &[x], FD_STEP, |t, v| Ok(t.sum_all(t.relu(v[0])))).unwrap();
        assert_eq!((r.coordinates, r.skipped), (3, 1));
        assert!(r.max_rel_err < 1e-12);
    }
}
