//! Mechanical checks of the algebra the architecture rests on: the
//! Khatri-Rao product factorization, the unfolded two-branch form of a
//! block, degree-2^L homogeneity of norm-free stacks, polynomial structure
//! along rays, explicit coefficient recovery, and the dense tensor-network
//! reading of a tiny stack. Each check reports its size, trial count, and
//! worst observed error.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aim::{Aim, NormMode};
use crate::error::{DttnError, Result};
use crate::model::{Dttn, ModelConfig};
use crate::tensor::{contract, khatri_rao, matvec, Dtype, Tensor};

/// Outcome of one named check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub size: String,
    pub trials: usize,
    pub worst_err: f64,
    pub pass: bool,
    pub seconds: f64,
}

impl CheckReport {
    fn timed(
        name: &str,
        size: String,
        trials: usize,
        worst_err: f64,
        pass: bool,
        started: Instant,
    ) -> Self {
        CheckReport {
            name: name.to_string(),
            size,
            trials,
            worst_err,
            pass,
            seconds: started.elapsed().as_secs_f64(),
        }
    }
}

/// Relative error with a floor so near-zero pairs are judged on an
/// absolute scale instead of blowing up.
fn rel(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Every check name `run_checks` knows, in execution order.
pub const CHECK_NAMES: [&str; 8] = [
    "kr_identity",
    "kr_norm_break",
    "block_unfolding",
    "homogeneity",
    "ray_polynomial",
    "coefficient_extraction",
    "tn_equivalence",
    "gradient_consistency",
];

/// Runs the named checks (all of them when `names` is empty). Unknown
/// names are a configuration error.
pub fn run_checks(names: &[String], seed: u64) -> Result<Vec<CheckReport>> {
    for n in names {
        if !CHECK_NAMES.contains(&n.as_str()) {
            return Err(DttnError::Config(format!(
                "unknown check '{n}'; available: {}",
                CHECK_NAMES.join(", ")
            )));
        }
    }
    let wanted = |name: &str| names.is_empty() || names.iter().any(|n| n == name);
    let mut out = Vec::new();
    if wanted("kr_identity") {
        out.push(check_kr_identity(seed)?);
    }
    if wanted("kr_norm_break") {
        out.push(check_kr_norm_break(seed)?);
    }
    if wanted("block_unfolding") {
        out.push(check_block_unfolding(seed)?);
    }
    if wanted("homogeneity") {
        out.push(check_homogeneity(seed)?);
    }
    if wanted("ray_polynomial") {
        out.push(check_ray_polynomial(seed)?);
    }
    if wanted("coefficient_extraction") {
        out.push(check_coefficient_extraction(seed)?);
    }
    if wanted("tn_equivalence") {
        out.push(check_tn_equivalence(seed)?);
    }
    if wanted("gradient_consistency") {
        out.push(check_gradient_consistency(seed)?);
    }
    Ok(out)
}

/// Row-wise Khatri-Rao product of two o-by-n matrices: row i is the
/// Kronecker product of row i of each factor.
fn row_khatri_rao(a1: &Tensor<f64>, a2: &Tensor<f64>) -> Result<Tensor<f64>> {
    khatri_rao(&a1.permute(&[1, 0])?, &a2.permute(&[1, 0])?)?.permute(&[1, 0])
}

/// (A1 x) * (A2 x) elementwise equals the row-wise Khatri-Rao matrix
/// applied to x kron x. Pure multilinear algebra; tolerance 1e-10.
fn check_kr_identity(seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b72);
    let mut worst = 0.0f64;
    let mut trials = 0;
    for (n, o) in [(3usize, 5usize), (8, 8), (16, 12)] {
        let a1 = uniform(&mut rng, &[o, n]);
        let a2 = uniform(&mut rng, &[o, n]);
        let k = row_khatri_rao(&a1, &a2)?;
        for _ in 0..25 {
            let x = uniform(&mut rng, &[n]);
            let lhs = matvec(&a1, &x)?.hadamard(&matvec(&a2, &x)?)?;
            let xkron = x.outer(&x).reshape(&[n * n])?;
            let rhs = matvec(&k, &xkron)?;
            for (a, b) in lhs.data().iter().zip(rhs.data()) {
                worst = worst.max(rel(*a, *b, 1e-3));
            }
            trials += 1;
        }
    }
    Ok(CheckReport::timed(
        "kr_identity",
        "n,o in (3,5) (8,8) (16,12)".into(),
        trials,
        worst,
        worst <= 1e-10,
        started,
    ))
}

/// Normalizing one branch before the product breaks the factorization:
/// the deviation must exceed 1e-3, so the identity genuinely depends on
/// both branches staying linear.
fn check_kr_norm_break(seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6e);
    let (n, o) = (8usize, 8usize);
    let a1 = uniform(&mut rng, &[o, n]);
    let a2 = uniform(&mut rng, &[o, n]);
    let k = row_khatri_rao(&a1, &a2)?;
    let mut deviation = 0.0f64;
    let trials = 25;
    for _ in 0..trials {
        let x = uniform(&mut rng, &[n]);
        let v = matvec(&a1, &x)?;
        let mean = v.data().iter().sum::<f64>() / o as f64;
        let var = v.data().iter().map(|a| (a - mean).powi(2)).sum::<f64>() / o as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        let normed = v.map(|a| (a - mean) * inv);
        let lhs = normed.hadamard(&matvec(&a2, &x)?)?;
        let xkron = x.outer(&x).reshape(&[n * n])?;
        let rhs = matvec(&k, &xkron)?;
        for (a, b) in lhs.data().iter().zip(rhs.data()) {
            deviation = deviation.max(rel(*a, *b, 1e-3));
        }
    }
    Ok(CheckReport::timed(
        "kr_norm_break",
        format!("n={n} o={o}"),
        trials,
        deviation,
        deviation > 1e-3,
        started,
    ))
}

/// A norm-free, bias-free block minus its shortcut equals
/// B (A1 vec(x) * A2 vec(x)) with the probed branch matrices, including
/// configurations where the 3x3 convolutions act across a real grid.
fn check_block_unfolding(seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x756e);
    let configs = [(2usize, 2usize, 1usize, 1usize), (1, 1, 2, 2), (2, 3, 4, 4), (4, 2, 2, 2), (3, 2, 8, 8)];
    let mut worst = 0.0f64;
    let mut trials = 0;
    for (c, r, h, w) in configs {
        let mut aim = Aim::<f64>::zeros(c, r, NormMode::None)?;
        aim.init(&mut rng);
        aim.zero_biases();
        aim.shortcut = true;
        aim.scale.data_mut()[0] = 1.3;
        let (a1, a2, b) = aim.branch_matrices(h, w)?;
        for _ in 0..100 {
            let x = uniform(&mut rng, &[1, c, h, w]);
            let y = aim.forward_eval(&x)?;
            let v = x.clone().reshape(&[c * h * w])?;
            let prod = matvec(&a1, &v)?.hadamard(&matvec(&a2, &v)?)?;
            let unfolded = matvec(&b, &prod)?;
            for (i, u) in unfolded.data().iter().enumerate() {
                let residual = y.data()[i] - x.data()[i];
                worst = worst.max(rel(residual, *u, 1e-3));
            }
            trials += 1;
        }
    }
    Ok(CheckReport::timed(
        "block_unfolding",
        "5 configs, branch dim up to 384".into(),
        trials,
        worst,
        worst <= 1e-10,
        started,
    ))
}

fn stack_config(depth: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        stage_blocks: [depth, 0, 0, 0],
        stage_hidden: [4; 4],
        r_exp: 2,
        use_ln: false,
        img_channels: 1,
        img_size: (32, 32),
        classes: 3,
        seed,
        dtype: Dtype::F64,
    }
}

/// With norms off, biases zeroed, and shortcuts removed, an L-block model
/// scales as f(a*x) = a^(2^L) f(x): the whole network is a homogeneous
/// polynomial whose degree doubles per block.
fn check_homogeneity(seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x686f);
    let mut worst = 0.0f64;
    let mut trials = 0;
    for depth in 1..=3usize {
        let cfg = stack_config(depth, seed.wrapping_add(depth as u64));
        let mut model = Dttn::<f64>::build_with(&cfg, NormMode::None, false)?;
        model.zero_biases();
        let degree = 1u32 << depth;
        for alpha in [0.5f64, 2.0] {
            for _ in 0..5 {
                let x = uniform(&mut rng, &[1, 1, 32, 32]);
                let fx = model.forward_eval(&x)?;
                let fax = model.forward_eval(&x.scale(alpha))?;
                let gain = alpha.powi(degree as i32);
                for (a, b) in fax.data().iter().zip(fx.data()) {
                    worst = worst.max(rel(*a, gain * *b, 1e-6));
                }
                trials += 1;
            }
        }
    }
    Ok(CheckReport::timed(
        "homogeneity",
        "depth 1..3, degree 2..8, 32x32 inputs".into(),
        trials,
        worst,
        worst <= 1e-8,
        started,
    ))
}

/// With shortcuts and biases restored the model is no longer homogeneous,
/// but along any ray t -> f(t*x0) it is still a polynomial in t of degree
/// at most 2^L: a fit through 2^L + 1 nodes reproduces held-out points.
fn check_ray_polynomial(seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261);
    let mut worst = 0.0f64;
    let mut trials = 0;
    for depth in 1..=3usize {
        let cfg = stack_config(depth, seed.wrapping_add(17 + depth as u64));
        let model = Dttn::<f64>::build_with(&cfg, NormMode::None, true)?;
        let degree = 1usize << depth;
        let x0 = uniform(&mut rng, &[1, 1, 32, 32]);
        let coeffs = extract_coefficients(
            |t| Ok(model.forward_eval(&x0.scale(t[0]))?.into_data()),
            1,
            degree,
            cfg.classes,
        )?;
        for _ in 0..16 {
            let t = rng.gen_range(-1.0..1.0);
            let want = model.forward_eval(&x0.scale(t))?;
            let got = coeffs.eval(&[t]);
            for (a, b) in got.iter().zip(want.data()) {
                worst = worst.max(rel(*a, *b, 1e-6));
            }
            trials += 1;
        }
    }
    Ok(CheckReport::timed(
        "ray_polynomial",
        "depth 1..3, fit degree 2..8, 16 held-out points each".into(),
        trials,
        worst,
        worst <= 1e-8,
        started,
    ))
}

/// Blocks-only map with few enough inputs that the full multivariate
/// polynomial is recoverable: `n_vars` channels on a 1x1 grid.
fn tiny_stack(n_vars: usize, depth: usize, seed: u64) -> Result<Vec<Aim<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::new();
    for _ in 0..depth {
        let mut aim = Aim::<f64>::zeros(n_vars, 2, NormMode::None)?;
        aim.init(&mut rng);
        aim.shortcut = true;
        blocks.push(aim);
    }
    Ok(blocks)
}

fn stack_eval(blocks: &[Aim<f64>], x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    let mut act = Tensor::new(vec![1, n, 1, 1], x.to_vec())?;
    for b in blocks {
        act = b.forward_eval(&act)?;
    }
    Ok(act.into_data())
}

/// Recovers the full coefficient table of a two-block three-variable
/// stack from grid evaluations, then confirms the total degree stays
/// within 2^L and the polynomial reproduces held-out points.
fn check_coefficient_extraction(seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6366);
    let (n_vars, depth) = (3usize, 2usize);
    let degree = 1usize << depth;
    let blocks = tiny_stack(n_vars, depth, seed.wrapping_add(31))?;
    let coeffs = extract_coefficients(|x| stack_eval(&blocks, x), n_vars, degree, n_vars)?;
    let mut worst = 0.0f64;
    let degree_ok = coeffs.max_total_degree() <= degree;
    let trials = 20;
    for _ in 0..trials {
        let x: Vec<f64> = (0..n_vars).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let want = stack_eval(&blocks, &x)?;
        let got = coeffs.eval(&x);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max(rel(*a, *b, 1e-6));
        }
    }
    Ok(CheckReport::timed(
        "coefficient_extraction",
        format!(
            "3 vars, depth 2, grid 5^3, {} terms, max total degree {}",
            coeffs.terms.len(),
            coeffs.max_total_degree()
        ),
        trials,
        worst,
        degree_ok && worst <= 1e-8,
        started,
    ))
}

/// The same stack written as one dense weight tensor contracted against
/// per-variable power features [1, x, x^2, ...]: the tensor-network form
/// of the model evaluates identically.
fn check_tn_equivalence(seed: u64) -> Result<CheckReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746e);
    let (n_vars, depth) = (3usize, 2usize);
    let degree = 1usize << depth;
    let blocks = tiny_stack(n_vars, depth, seed.wrapping_add(47))?;
    let coeffs = extract_coefficients(|x| stack_eval(&blocks, x), n_vars, degree, n_vars)?;
    let w = tn_weight_tensor(&coeffs)?;
    let mut worst = 0.0f64;
    let trials = 50;
    let axes: Vec<usize> = (1..=n_vars).collect();
    let phi_axes: Vec<usize> = (0..n_vars).collect();
    for _ in 0..trials {
        let x: Vec<f64> = (0..n_vars).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let phi = local_map(&x, degree);
        let got = contract(&w, &phi, &axes, &phi_axes)?;
        let want = stack_eval(&blocks, &x)?;
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max(rel(*a, *b, 1e-6));
        }
    }
    Ok(CheckReport::timed(
        "tn_equivalence",
        format!("weight tensor 3x{}^3 ({} entries)", degree + 1, w.len()),
        trials,
        worst,
        worst <= 1e-8,
        started,
    ))
}

/// Analytic block gradients against central finite differences in f64.
fn check_gradient_consistency(seed: u64) -> Result<CheckReport> {
    use crate::gradcheck::check_gradient;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6764);
    let mut base = Aim::<f64>::zeros(3, 2, NormMode::Batch)?;
    base.init(&mut rng);
    let x = uniform(&mut rng, &[2, 3, 4, 4]);
    let wts = uniform(&mut rng, &[2, 3, 4, 4]);

    fn trainable_values(aim: &Aim<f64>) -> Vec<f64> {
        let mut refs = Vec::new();
        aim.visit("b", &mut refs);
        let mut out = Vec::new();
        for (_, class, t) in refs {
            if class.trainable() {
                out.extend(t.data().iter().copied());
            }
        }
        out
    }

    let theta = trainable_values(&base);
    let mut work = base.clone();
    let (_, ctx) = work.forward_train(&x)?;
    let mut grad = base.clone();
    {
        let mut refs = Vec::new();
        grad.visit_mut("b", &mut refs);
        for (_, _, t) in refs {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
    }
    work.backward(&x, &ctx, &wts, &mut grad)?;
    let analytic = trainable_values(&grad);
    let res = check_gradient(
        &theta,
        &analytic,
        |t| {
            let mut m = base.clone();
            let mut refs = Vec::new();
            m.visit_mut("b", &mut refs);
            let mut pos = 0;
            for (_, class, tens) in refs {
                if class.trainable() {
                    let n = tens.len();
                    tens.data_mut().copy_from_slice(&t[pos..pos + n]);
                    pos += n;
                }
            }
            let (y, _) = m.forward_train(&x).unwrap();
            y.data().iter().zip(wts.data()).map(|(a, b)| a * b).sum()
        },
        1e-5,
        1,
    );
    Ok(CheckReport::timed(
        "gradient_consistency",
        format!("block c=3 r=2 on 2x3x4x4, {} trainable values", res.checked),
        res.checked,
        res.max_rel_err,
        res.passes(1e-6),
        started,
    ))
}

/// Multivariate polynomial as an exponent-vector table, one coefficient
/// row per model output.
#[derive(Debug, Clone, Serialize)]
pub struct PolyCoeffs {
    pub n_vars: usize,
    pub outputs: usize,
    /// per-variable degree of the evaluation grid
    pub grid_degree: usize,
    /// sorted by exponent vector; each entry carries all output coefficients
    pub terms: Vec<(Vec<usize>, Vec<f64>)>,
}

impl PolyCoeffs {
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.outputs];
        for (exps, cs) in &self.terms {
            let mono: f64 = exps
                .iter()
                .zip(x)
                .map(|(&k, &v)| v.powi(k as i32))
                .product();
            for (o, c) in cs.iter().enumerate() {
                out[o] += c * mono;
            }
        }
        out
    }

    pub fn max_total_degree(&self) -> usize {
        self.terms
            .iter()
            .map(|(e, _)| e.iter().sum())
            .max()
            .unwrap_or(0)
    }
}

/// Chebyshev extrema on [-1, 1]; well conditioned Vandermonde nodes.
fn chebyshev_nodes(degree: usize) -> Vec<f64> {
    if degree == 0 {
        return vec![1.0];
    }
    (0..=degree)
        .map(|j| (std::f64::consts::PI * j as f64 / degree as f64).cos())
        .collect()
}

/// Recovers polynomial coefficients of `f` (assumed polynomial of
/// per-variable degree at most `degree`) by evaluating on a Chebyshev
/// tensor grid and inverting the one-dimensional Vandermonde system along
/// each axis in turn. Near-zero coefficients are pruned.
pub fn extract_coefficients<F>(
    f: F,
    n_vars: usize,
    degree: usize,
    outputs: usize,
) -> Result<PolyCoeffs>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    extract_coefficients_at(f, &chebyshev_nodes(degree), n_vars, outputs)
}

/// Grid-node variant; nodes must be distinct or the Vandermonde solve
/// degenerates.
pub fn extract_coefficients_at<F>(
    mut f: F,
    nodes: &[f64],
    n_vars: usize,
    outputs: usize,
) -> Result<PolyCoeffs>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if n_vars == 0 || nodes.is_empty() || outputs == 0 {
        return Err(DttnError::Dim(
            "coefficient extraction needs variables, nodes, and outputs".into(),
        ));
    }
    let s = nodes.len();
    let total = s
        .checked_pow(n_vars as u32)
        .filter(|&t| t <= 100_000)
        .ok_or_else(|| {
            DttnError::Capacity(format!(
                "evaluation grid {s}^{n_vars} exceeds the 100000-point guard"
            ))
        })?;

    // evaluate on the full grid; axis 0 is the slowest index
    let mut values: Vec<Vec<f64>> = vec![vec![0.0; total]; outputs];
    let mut x = vec![0.0; n_vars];
    for lin in 0..total {
        let mut rem = lin;
        for a in (0..n_vars).rev() {
            x[a] = nodes[rem % s];
            rem /= s;
        }
        let y = f(&x)?;
        if y.len() != outputs {
            return Err(DttnError::Dim(format!(
                "function returned {} outputs, expected {outputs}",
                y.len()
            )));
        }
        for (o, v) in y.iter().enumerate() {
            values[o][lin] = *v;
        }
    }

    // one shared Vandermonde factorization: v[j][k] = nodes[j]^k
    let mut v = vec![0.0; s * s];
    for j in 0..s {
        let mut p = 1.0;
        for k in 0..s {
            v[j * s + k] = p;
            p *= nodes[j];
        }
    }
    let lu = Lu::factor(v, s)?;

    // sweep every axis: interpolate values -> coefficients along that axis
    let mut g = vec![0.0; s];
    for a in 0..n_vars {
        let stride = s.pow((n_vars - 1 - a) as u32);
        let block = stride * s;
        for vals in values.iter_mut() {
            for major in 0..total / block {
                for minor in 0..stride {
                    let base = major * block + minor;
                    for j in 0..s {
                        g[j] = vals[base + j * stride];
                    }
                    let c = lu.solve(&g);
                    for (j, cj) in c.iter().enumerate() {
                        vals[base + j * stride] = *cj;
                    }
                }
            }
        }
    }

    let scale = values
        .iter()
        .flat_map(|v| v.iter())
        .fold(0.0f64, |m, c| m.max(c.abs()));
    let threshold = 1e-9 * (1.0 + scale);
    let mut terms = Vec::new();
    for lin in 0..total {
        let keep = values.iter().any(|v| v[lin].abs() > threshold);
        if !keep {
            continue;
        }
        let mut exps = vec![0usize; n_vars];
        let mut rem = lin;
        for a in (0..n_vars).rev() {
            exps[a] = rem % s;
            rem /= s;
        }
        let cs: Vec<f64> = values.iter().map(|v| v[lin]).collect();
        terms.push((exps, cs));
    }
    Ok(PolyCoeffs {
        n_vars,
        outputs,
        grid_degree: s - 1,
        terms,
    })
}

/// Dense coefficient tensor of shape [outputs, d+1, ..., d+1] with one
/// power axis per variable; index (o, k1..kn) holds the coefficient of
/// x1^k1 ... xn^kn in output o.
pub fn tn_weight_tensor(coeffs: &PolyCoeffs) -> Result<Tensor<f64>> {
    let s = coeffs.grid_degree + 1;
    let entries = (coeffs.outputs as u64)
        .checked_mul((s as u64).checked_pow(coeffs.n_vars as u32).unwrap_or(u64::MAX))
        .unwrap_or(u64::MAX);
    if entries > 100_000 {
        return Err(DttnError::Capacity(format!(
            "dense weight tensor would hold {entries} entries, above the \
             100000 cap; reduce depth or the variable count"
        )));
    }
    let mut shape = vec![coeffs.outputs];
    shape.extend(std::iter::repeat(s).take(coeffs.n_vars));
    let mut w = Tensor::zeros(&shape);
    let strides = w.strides();
    for (exps, cs) in &coeffs.terms {
        for (o, c) in cs.iter().enumerate() {
            let mut pos = o * strides[0];
            for (a, &k) in exps.iter().enumerate() {
                pos += k * strides[a + 1];
            }
            w.data_mut()[pos] = *c;
        }
    }
    Ok(w)
}

/// Rank-one feature tensor: the outer product of [1, x_i, ..., x_i^d]
/// across variables.
pub fn local_map(x: &[f64], degree: usize) -> Tensor<f64> {
    let powers: Vec<Tensor<f64>> = x
        .iter()
        .map(|&v| {
            let mut p = Vec::with_capacity(degree + 1);
            let mut acc = 1.0;
            for _ in 0..=degree {
                p.push(acc);
                acc *= v;
            }
            Tensor::new(vec![degree + 1], p).expect("power vector")
        })
        .collect();
    let mut phi = powers[0].clone();
    for p in &powers[1..] {
        phi = phi.outer(p);
    }
    phi
}

/// Dense LU with partial pivoting for the small interpolation systems.
#[derive(Debug)]
struct Lu {
    n: usize,
    a: Vec<f64>,
    piv: Vec<usize>,
}

impl Lu {
    fn factor(mut a: Vec<f64>, n: usize) -> Result<Lu> {
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut piv = Vec::with_capacity(n);
        for k in 0..n {
            let (mut best, mut best_abs) = (k, a[k * n + k].abs());
            for i in k + 1..n {
                let v = a[i * n + k].abs();
                if v > best_abs {
                    best = i;
                    best_abs = v;
                }
            }
            if best_abs <= 1e-12 * scale.max(1.0) {
                return Err(DttnError::Numeric(
                    "interpolation grid is numerically degenerate (nearly \
                     coincident nodes); respace the grid with distinct f64 \
                     nodes such as Chebyshev points"
                        .into(),
                ));
            }
            if best != k {
                for j in 0..n {
                    a.swap(k * n + j, best * n + j);
                }
            }
            piv.push(best);
            let pivot = a[k * n + k];
            for i in k + 1..n {
                let m = a[i * n + k] / pivot;
                a[i * n + k] = m;
                for j in k + 1..n {
                    a[i * n + j] -= m * a[k * n + j];
                }
            }
        }
        Ok(Lu { n, a, piv })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        // pivots satisfy piv[i] >= i, so positions below i are already
        // final when row i is swapped in and eliminated
        for i in 0..n {
            x.swap(i, self.piv[i]);
            for j in 0..i {
                x[i] -= self.a[i * n + j] * x[j];
            }
        }
        for i in (0..n).rev() {
            let mut v = x[i];
            for j in i + 1..n {
                v -= self.a[i * n + j] * x[j];
            }
            x[i] = v / self.a[i * n + i];
        }
        x
    }
}
