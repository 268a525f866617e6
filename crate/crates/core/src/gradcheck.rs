//! Central finite-difference checks of analytic gradients (f64).
//!
//! A case is a set of input tensors plus a graph builder. The checked
//! scalar is `Σ out ⊙ R` for a fixed random `R`, so every output element
//! contributes. The relative error of one coordinate is
//! `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
//!
//! Probes whose ±h step changes a ReLU sign or a max-pool winner are not
//! differentiable there and are excluded (counted in `skipped`).

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::loss::dice_bce_loss;
use crate::nn::{
    attention_gate, avg_pool, batch_norm_eval, batch_norm_train, conv2d, maxpool2, upsample2, Aspp, ConvConfig,
    Ctx, GateVars, Mode, ParamKind, ParamStore, Spp, UpsampleMode,
};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-3;

pub type Builder = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Builder,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        GradCase {
            name: name.into(),
            inputs,
            build: Box::new(build),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Pcg32::seed_from_u64(seed ^ 0x5eed);
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut rng)
}

/// Evaluates `Σ build(inputs) ⊙ r` and its branch fingerprint.
fn probe(case: &GradCase, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> Result<(f64, u64)> {
    let tape = Tape::branch_tracking();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (case.build)(&tape, &vars)?;
    let v = tape
        .value(out)
        .data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| a * b)
        .sum();
    Ok((v, tape.branch_fingerprint().unwrap_or(0)))
}

pub fn check_case(case: &GradCase, seed: u64) -> Result<GradCheckResult> {
    let tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = (case.build)(&tape, &vars)?;
    let r = projection(&tape.shape(out), seed);
    let rv = tape.constant(r.clone());
    let weighted = tape.mul(out, rv)?;
    let total = tape.sum(weighted);
    tape.backward(total)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad(v)).collect();

    let (_, base_fp) = probe(case, &case.inputs, &r)?;
    let mut inputs = case.inputs.clone();
    let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
    let (mut checked, mut skipped) = (0, 0);
    for (k, grad) in analytic.iter().enumerate() {
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            inputs[k].data_mut()[i] = orig + STEP;
            let (plus, fp_plus) = probe(case, &inputs, &r)?;
            inputs[k].data_mut()[i] = orig - STEP;
            let (minus, fp_minus) = probe(case, &inputs, &r)?;
            inputs[k].data_mut()[i] = orig;
            if fp_plus != base_fp || fp_minus != base_fp {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = grad.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(GradCheckResult {
        name: case.name.clone(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        checked,
        skipped,
        passed: max_rel < TOLERANCE && checked > 0 && skipped * 10 <= checked + skipped,
    })
}

fn rand_t(rng: &mut Pcg32, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// Registry of trainable params bound to the case's trailing inputs.
fn bind_store<'a>(tape: &'a Tape<f64>, store: &'a ParamStore<f64>, vars: &[Var], mode: Mode) -> Ctx<'a, f64> {
    let mut it = vars.iter();
    let slots = store
        .iter()
        .map(|(_, _, kind, _)| (kind == ParamKind::Trainable).then(|| *it.next().expect("var per param")))
        .collect();
    Ctx::with_vars(tape, store, slots, mode)
}

fn trainable_tensors(store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    store
        .iter()
        .filter(|(_, _, kind, _)| *kind == ParamKind::Trainable)
        .map(|(.., t)| t.clone())
        .collect()
}

/// Randomizes every trainable tensor so no gradient path is trivially zero.
fn randomize(store: &mut ParamStore<f64>, rng: &mut Pcg32, scale: f64) {
    for id in store.trainable_ids() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::uniform(shape, -scale, scale, rng);
    }
}

/// The layer suite run by the `gradcheck` command and the acceptance tests.
pub fn standard_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = Pcg32::seed_from_u64(seed);
    let n = rng.random_range(1..=2);
    let c = rng.random_range(2..=4);
    let h = [4, 6][rng.random_range(0..2)];
    let w = [4, 6][rng.random_range(0..2)];
    let x_shape = [n, c, h, w];
    let mut cases = Vec::new();

    cases.push(GradCase::new("add", vec![rand_t(&mut rng, &x_shape), rand_t(&mut rng, &x_shape)], |t, v| {
        t.add(v[0], v[1])
    }));
    cases.push(GradCase::new(
        "mul_broadcast",
        vec![rand_t(&mut rng, &[n, 1, h, w]), rand_t(&mut rng, &x_shape)],
        |t, v| t.mul(v[0], v[1]),
    ));
    cases.push(GradCase::new("relu", vec![rand_t(&mut rng, &x_shape)], |t, v| Ok(t.relu(v[0]))));
    cases.push(GradCase::new("sigmoid", vec![rand_t(&mut rng, &x_shape).map(|v| 3.0 * v)], |t, v| {
        Ok(t.sigmoid(v[0]))
    }));

    let c_out = rng.random_range(1..=4);
    cases.push(GradCase::new(
        "matmul_1x1",
        vec![rand_t(&mut rng, &x_shape), rand_t(&mut rng, &[c, c_out]), rand_t(&mut rng, &[c_out])],
        |t, v| t.matmul_1x1(v[0], v[1], Some(v[2])),
    ));

    for (r, k, s, p) in [(1, 3, 1, 1), (2, 3, 1, 2), (2, 3, 2, 1), (3, 1, 1, 0), (1, 5, 1, 2)] {
        let cfg = ConvConfig { stride: s, padding: p, dilation: r };
        cases.push(GradCase::new(
            format!("conv2d(r={r},k={k},s={s},p={p})"),
            vec![rand_t(&mut rng, &x_shape), rand_t(&mut rng, &[c_out, c, k, k]), rand_t(&mut rng, &[c_out])],
            move |t, v| conv2d(t, v[0], v[1], Some(v[2]), cfg),
        ));
    }

    cases.push(GradCase::new("maxpool2", vec![rand_t(&mut rng, &x_shape)], |t, v| maxpool2(t, v[0])));
    cases.push(GradCase::new("upsample2_bilinear", vec![rand_t(&mut rng, &x_shape)], |t, v| {
        upsample2(t, v[0], UpsampleMode::Bilinear)
    }));
    cases.push(GradCase::new("upsample2_nearest", vec![rand_t(&mut rng, &x_shape)], |t, v| {
        upsample2(t, v[0], UpsampleMode::Nearest)
    }));
    cases.push(GradCase::new("avg_pool", vec![rand_t(&mut rng, &x_shape)], |t, v| avg_pool(t, v[0], 2, 2)));
    cases.push(GradCase::new(
        "concat_channels",
        vec![rand_t(&mut rng, &x_shape), rand_t(&mut rng, &[n, 1, h, w])],
        |t, v| t.concat_channels(&[v[0], v[1]]),
    ));

    let bn_in = rand_t(&mut rng, &x_shape).map(|v| 2.0 * v + 0.5);
    cases.push(GradCase::new(
        "batchnorm_train",
        vec![bn_in.clone(), rand_t(&mut rng, &[c]), rand_t(&mut rng, &[c])],
        |t, v| Ok(batch_norm_train(t, v[0], v[1], v[2], 1e-5)?.0),
    ));
    let rm = rand_t(&mut rng, &[c]);
    let rvar = rand_t(&mut rng, &[c]).map(|v| v.abs() + 0.5);
    cases.push(GradCase::new(
        "batchnorm_eval",
        vec![bn_in, rand_t(&mut rng, &[c]), rand_t(&mut rng, &[c])],
        move |t, v| batch_norm_eval(t, v[0], v[1], v[2], &rm, &rvar, 1e-5),
    ));

    let (f_g, f_int) = (rng.random_range(1..=4), rng.random_range(1..=3));
    cases.push(GradCase::new(
        "attention_gate",
        vec![
            rand_t(&mut rng, &x_shape),
            rand_t(&mut rng, &[n, f_g, h, w]),
            rand_t(&mut rng, &[c, f_int]),
            rand_t(&mut rng, &[f_g, f_int]),
            rand_t(&mut rng, &[f_int]),
            rand_t(&mut rng, &[f_int, 1]),
            rand_t(&mut rng, &[1]),
        ],
        |t, v| {
            let p = GateVars {
                w_x: v[2],
                w_g: v[3],
                b_g: v[4],
                psi: v[5],
                b_psi: v[6],
            };
            Ok(attention_gate(t, v[0], v[1], &p)?.0)
        },
    ));

    let mut store = ParamStore::new();
    let aspp = Aspp::new(&mut store, "aspp", c, &[1, 2], &mut rng).expect("valid ASPP config");
    randomize(&mut store, &mut rng, 1.0);
    let mut inputs = vec![rand_t(&mut rng, &x_shape)];
    inputs.extend(trainable_tensors(&store));
    cases.push(GradCase::new("aspp_block", inputs, move |t, v| {
        let ctx = bind_store(t, &store, &v[1..], Mode::Train);
        aspp.forward(&ctx, v[0])
    }));

    let mut store = ParamStore::new();
    let scales: Vec<usize> = [1, 2].into_iter().filter(|s| h % s == 0 && w % s == 0).collect();
    let spp = Spp::new(&mut store, "spp", c, &scales, &mut rng).expect("valid SPP config");
    randomize(&mut store, &mut rng, 1.0);
    let mut inputs = vec![rand_t(&mut rng, &x_shape)];
    inputs.extend(trainable_tensors(&store));
    cases.push(GradCase::new("spp_block", inputs, move |t, v| {
        let ctx = bind_store(t, &store, &v[1..], Mode::Train);
        spp.forward(&ctx, v[0])
    }));

    let target = Tensor::from_fn(vec![n, 1, h, w], |_| if rng.random_bool(0.4) { 1.0 } else { 0.0 });
    let pred = Tensor::uniform(vec![n, 1, h, w], 0.05, 0.95, &mut rng);
    cases.push(GradCase::new("dice_bce_loss", vec![pred], move |t, v| {
        let tv = t.constant(target.clone());
        dice_bce_loss(t, v[0], tv)
    }));

    cases
}

/// Runs every case of [`standard_cases`] for each seed.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for case in standard_cases(seed) {
            let mut res = check_case(&case, seed)?;
            res.name = format!("{} [seed {seed}]", res.name);
            out.push(res);
        }
    }
    Ok(out)
}

pub fn format_table(results: &[GradCheckResult]) -> String {
    let mut s = format!(
        "{:<40} {:>12} {:>12} {:>8} {:>8}  {}\n",
        "layer", "max_rel_err", "max_abs_err", "checked", "skipped", "status"
    );
    for r in results {
        s.push_str(&format!(
            "{:<40} {:>12.3e} {:>12.3e} {:>8} {:>8}  {}\n",
            r.name,
            r.max_rel_err,
            r.max_abs_err,
            r.checked,
            r.skipped,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    s
}
