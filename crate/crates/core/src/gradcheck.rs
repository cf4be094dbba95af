//! Central finite-difference checks of the tape's analytic gradients, run at
//! 64-bit precision.
//!
//! The error of one check is the infinity-norm relative error
//! `max|g_analytic - g_numeric| / max(max|g_analytic|, max|g_numeric|)`
//! over every checked tensor.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::head::{HeadConfig, LiftingHead};
use crate::nn::{
    attention, feed_forward, multi_head_attention, FfnParams, ForwardCtx, Initializer, MhaParams,
};
use crate::params::ParamStore;
use crate::synthetic::SyntheticGen;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::loss::{pose_loss, LossWeights};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const BLOCK_TOL: f64 = 1e-5;
pub const COMPOSED_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance && self.checked > 0
    }

    fn from_stats(name: &str, stats: CheckStats, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            max_rel_err: stats.max_rel_err,
            tolerance,
            checked: stats.checked,
            skipped: stats.skipped,
        }
    }
}

/// Accumulates the numerator and denominator of the norm-wise error.
#[derive(Debug, Default, Clone, Copy)]
pub struct ErrorAccumulator {
    max_diff: f64,
    max_mag: f64,
}

impl ErrorAccumulator {
    pub fn add(&mut self, analytic: &[f64], numeric: &[f64]) {
        for (&a, &n) in analytic.iter().zip(numeric) {
            self.max_diff = self.max_diff.max((a - n).abs());
            self.max_mag = self.max_mag.max(a.abs()).max(n.abs());
        }
    }

    pub fn rel_err(&self) -> f64 {
        if self.max_mag == 0.0 {
            self.max_diff
        } else {
            self.max_diff / self.max_mag
        }
    }
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CheckStats {
    pub max_rel_err: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose ±step evaluations crossed a ReLU or |·| kink and
    /// therefore have no valid central difference.
    pub skipped: usize,
}

/// Loss value and kink pattern of one evaluation.
fn evaluate(tape: &Tape<'_, f64>, out: Var) -> (f64, Vec<bool>) {
    (tape.value(out).data()[0], tape.kink_pattern())
}

struct Central {
    acc: ErrorAccumulator,
    checked: usize,
    skipped: usize,
}

impl Central {
    fn new() -> Self {
        Self {
            acc: ErrorAccumulator::default(),
            checked: 0,
            skipped: 0,
        }
    }

    fn push(
        &mut self,
        analytic: f64,
        base: &[bool],
        plus: (f64, Vec<bool>),
        minus: (f64, Vec<bool>),
        step: f64,
    ) {
        if plus.1 != base || minus.1 != base {
            self.skipped += 1;
            return;
        }
        self.checked += 1;
        self.acc.add(&[analytic], &[(plus.0 - minus.0) / (2.0 * step)]);
    }

    fn finish(self) -> CheckStats {
        CheckStats {
            max_rel_err: self.acc.rel_err(),
            checked: self.checked,
            skipped: self.skipped,
        }
    }
}

/// Checks gradients with respect to leaf inputs. `f` must build a scalar.
/// `fault` scales the analytic gradient (1.0 for a genuine check).
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F, step: f64, fault: f64) -> Result<CheckStats>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(evaluate(&tape, out))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let base = tape.kink_pattern();

    let mut central = Central::new();
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        for j in 0..inputs[i].numel() {
            let analytic = grads.wrt(*v).map_or(0.0, |g| g[j] * fault);
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            central.push(analytic, &base, plus, minus, step);
        }
    }
    Ok(central.finish())
}

/// Checks gradients with respect to every tensor of `store`.
pub fn check_params<F>(store: &ParamStore<f64>, f: F, step: f64, fault: f64) -> Result<CheckStats>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        Ok(evaluate(&tape, out))
    };

    let mut grad_store = store.snapshot();
    let base = {
        let mut tape = Tape::with_params(store);
        let out = f(&mut tape)?;
        let grads = tape.backward(out)?;
        grads.accumulate_into(&mut grad_store);
        tape.kink_pattern()
    };

    let mut central = Central::new();
    let mut work = store.snapshot();
    for id in store.ids() {
        for j in 0..store.get(id).numel() {
            let analytic = grad_store.get(id).grad().map_or(0.0, |g| g[j] * fault);
            let orig = work.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            central.push(analytic, &base, plus, minus, step);
        }
    }
    Ok(central.finish())
}

/// Uniform `[-1, 1]` tensor.
pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..=1.0))
}

/// Reduces `y` to a scalar through fixed random weights, `Σ w ⊙ y`.
pub fn probe(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(&mut rng, tape.shape(y));
    let w = tape.leaf(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Configuration of the composed-head check.
pub fn gradcheck_head_config() -> HeadConfig {
    HeadConfig {
        layers: 2,
        heads: 2,
        width: 8,
        n_patches: 4,
        c_in: 32,
        ..HeadConfig::paper()
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub step: f64,
    pub seed: u64,
    /// Name of a check whose analytic gradient is deliberately scaled, to
    /// exercise failure reporting.
    pub fault: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            seed: 7,
            fault: None,
        }
    }
}

type InputCheck = Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>>;

fn primitive_checks(seed: u64) -> Vec<(&'static str, Vec<Vec<usize>>, InputCheck)> {
    vec![
        ("matmul", vec![vec![4, 4], vec![4, 4]], Box::new(move |t, v| {
            let y = t.matmul(v[0], v[1])?;
            probe(t, y, seed)
        })),
        ("transpose", vec![vec![3, 5]], Box::new(move |t, v| {
            let y = t.transpose(v[0])?;
            probe(t, y, seed)
        })),
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(move |t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y, seed)
        })),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(move |t, v| {
            let y = t.sub(v[0], v[1])?;
            probe(t, y, seed)
        })),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(move |t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y, seed)
        })),
        ("add_row", vec![vec![3, 4], vec![4]], Box::new(move |t, v| {
            let y = t.add_row(v[0], v[1])?;
            probe(t, y, seed)
        })),
        ("scale", vec![vec![3, 4]], Box::new(move |t, v| {
            let y = t.scale(v[0], -1.7);
            probe(t, y, seed)
        })),
        ("relu", vec![vec![4, 5]], Box::new(move |t, v| {
            let y = t.relu(v[0]);
            probe(t, y, seed)
        })),
        ("softmax_rows", vec![vec![3, 5]], Box::new(move |t, v| {
            let y = t.softmax_rows(v[0])?;
            probe(t, y, seed)
        })),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], Box::new(move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(t, y, seed)
        })),
        ("dropout", vec![vec![4, 5]], Box::new(move |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd0);
            let y = t.dropout(v[0], 0.3, Some(&mut rng))?;
            probe(t, y, seed)
        })),
        ("concat_last_dim", vec![vec![3, 2], vec![3, 4]], Box::new(move |t, v| {
            let y = t.concat_last_dim(v)?;
            probe(t, y, seed)
        })),
        ("slice_rows", vec![vec![5, 3]], Box::new(move |t, v| {
            let y = t.slice_rows(v[0], 1, 4)?;
            probe(t, y, seed)
        })),
        ("gather_rows", vec![vec![5, 3]], Box::new(move |t, v| {
            let y = t.gather_rows(v[0], &[4, 0, 4, 2])?;
            probe(t, y, seed)
        })),
        ("normalize_rows", vec![vec![4, 2]], Box::new(move |t, v| {
            let y = t.normalize_rows(v[0], 1e-8)?;
            probe(t, y, seed)
        })),
        ("abs", vec![vec![3, 4]], Box::new(move |t, v| {
            let y = t.abs(v[0]);
            probe(t, y, seed)
        })),
        ("square", vec![vec![3, 4]], Box::new(move |t, v| {
            let y = t.square(v[0]);
            probe(t, y, seed)
        })),
        ("mean", vec![vec![3, 4]], Box::new(move |t, v| {
            let y = t.square(v[0]);
            Ok(t.mean(y))
        })),
        ("attention", vec![vec![2, 4], vec![3, 4], vec![3, 4]], Box::new(move |t, v| {
            let y = attention(t, v[0], v[1], v[2], 4)?;
            probe(t, y, seed)
        })),
    ]
}

/// Runs every check and returns one result per primitive or block.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let fault_for = |name: &str| {
        if opts.fault.as_deref() == Some(name) {
            1.5
        } else {
            1.0
        }
    };
    let mut results = Vec::new();

    for (name, shapes, f) in primitive_checks(opts.seed) {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let stats = check_inputs(&inputs, f, opts.step, fault_for(name))?;
        results.push(CheckResult::from_stats(name, stats, PRIMITIVE_TOL));
    }

    // blocks, differentiated with respect to their parameters and inputs
    let d = 8;
    let mut store = ParamStore::<f64>::new();
    let (mha, ffn) = {
        let mut sink = Initializer { store: &mut store, rng: &mut rng };
        (
            MhaParams::declare(&mut sink, "mha", d, 2, d)?,
            FfnParams::declare(&mut sink, "ffn", d)?,
        )
    };
    // block inputs live in the store too so they are checked alongside the weights
    let q_in = store.insert("q_in", random_tensor(&mut rng, &[3, d]))?;
    let kv_in = store.insert("kv_in", random_tensor(&mut rng, &[5, d]))?;
    let x_in = store.insert("x_in", random_tensor(&mut rng, &[4, d]))?;
    let seed = opts.seed;

    let err = check_params(
        &store,
        |t| {
            let q = t.param(q_in);
            let kv = t.param(kv_in);
            let y = multi_head_attention(t, &mha, q, kv, kv)?;
            probe(t, y, seed)
        },
        opts.step,
        fault_for("multi_head_attention"),
    )?;
    results.push(CheckResult::from_stats("multi_head_attention", err, BLOCK_TOL));

    let err = check_params(
        &store,
        |t| {
            let x = t.param(x_in);
            let y = feed_forward(t, &ffn, x, &mut ForwardCtx::eval())?;
            probe(t, y, seed)
        },
        opts.step,
        fault_for("feed_forward"),
    )?;
    results.push(CheckResult::from_stats("feed_forward", err, BLOCK_TOL));

    results.push(check_composed_head(opts, &mut rng, fault_for("lifting_head"))?);
    Ok(results)
}

fn check_composed_head(opts: &SuiteOptions, rng: &mut ChaCha8Rng, fault: f64) -> Result<CheckResult> {
    let cfg = gradcheck_head_config();
    let (head, mut store) = LiftingHead::init::<f64, _>(&cfg, rng)?;
    perturb_offsets(&mut store, rng);
    let gen = SyntheticGen::new(&cfg, opts.seed, 0.05)?;
    let sample = gen.generate::<f64>(1).remove(0);
    let weights = LossWeights::default();
    let err = check_params(
        &store,
        |t| {
            let x = t.leaf(sample.features.clone());
            let trace = head.forward(t, x, None, &mut ForwardCtx::eval())?;
            pose_loss(t, &trace.pose, &sample.target, &weights)
        },
        opts.step,
        fault,
    )?;
    Ok(CheckResult::from_stats("lifting_head", err, COMPOSED_TOL))
}

/// Zero biases and unit gains make a poor test point: whole rows can vanish
/// behind a ReLU and the twist normalisation degenerates. Moves every bias,
/// gain and embedding to a generic value.
fn perturb_offsets(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (name, t) in store.iter_mut() {
        let (centre, half) = if name.ends_with(".gamma") {
            (1.0, 0.25)
        } else if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with("_emb") || name == "pos_enc" {
            (0.0, 0.5)
        } else {
            continue;
        };
        t.data_mut().iter_mut().for_each(|v| *v = centre + rng.gen_range(-half..half));
    }
}

/// Runs the suite and reports elapsed wall time in seconds.
pub fn run_timed(opts: &SuiteOptions) -> Result<(Vec<CheckResult>, f64)> {
    let start = Instant::now();
    let r = run_suite(opts)?;
    Ok((r, start.elapsed().as_secs_f64()))
}
