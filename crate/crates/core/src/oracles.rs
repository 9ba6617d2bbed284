//! Runtime verification suites: central-finite-difference gradient
//! checks for every objective, the closed-form fixed-point algebra, and
//! brute-force k-NN equivalence. The CLI `oracles` subcommand and the
//! acceptance tests both run these.
//!
//! Each oracle is an independent route to the quantity it checks: finite
//! differences against backprop, an O(N k) repeated-max scan against the
//! bank's sorted retrieval, and direct residual evaluation against the
//! closed-form stationary point.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::Result;
use crate::math::{softmax, FeatureVector, ProbVector, ScoreVector};
use crate::memory_bank::MemoryBank;
use crate::model::{Activation, Layer, ModelParams};
use crate::objectives::{
    aad_loss, cross_entropy, diversity_loss, im_loss, procal_loss, to_logit_grads, ProcalOptions,
};
use crate::theory::{fixed_point, stationarity_residual};

/// Outcome of one verification suite.
#[derive(Debug, Clone)]
pub struct OracleOutcome {
    pub name: String,
    pub passed: bool,
    pub trials: usize,
    /// Largest error observed, in the suite's own units.
    pub worst: f64,
    pub detail: String,
}

impl OracleOutcome {
    fn new(name: &str, passed: bool, trials: usize, worst: f64, detail: String) -> Self {
        OracleOutcome {
            name: name.to_string(),
            passed,
            trials,
            worst,
            detail,
        }
    }
}

/// Objectives covered by the gradient oracle.
pub const GRADIENT_ORACLE_OBJECTIVES: [&str; 6] = [
    "procal",
    "soft_only",
    "div_only",
    "im",
    "aad",
    "cross_entropy",
];

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;

/// A random small instance: a model under 200 parameters, a batch, and a
/// bank built from a disjoint pool of cached samples.
struct Instance {
    model: ModelParams,
    inputs: Vec<Vec<f64>>,
    batch_indices: Vec<usize>,
    labels: Vec<usize>,
    bank: MemoryBank,
    backgrounds: Vec<Vec<usize>>,
    gamma: f64,
    beta: f64,
    lambda2: f64,
}

fn random_instance(rng: &mut ChaCha12Rng) -> Instance {
    let classes = rng.gen_range(2..=5);
    let input_dim = rng.gen_range(2..=4);
    let hidden = rng.gen_range(2..=6);
    let feature_dim = rng.gen_range(2..=4);
    let batch = rng.gen_range(1..=8);

    let mut mk_layer = |out: usize, inp: usize, act| Layer {
        w: (0..out)
            .map(|_| (0..inp).map(|_| rng.gen_range(-0.9..0.9)).collect())
            .collect(),
        b: (0..out).map(|_| rng.gen_range(-0.3..0.3)).collect(),
        act,
    };
    let layers = vec![
        mk_layer(hidden, input_dim, Activation::Tanh),
        mk_layer(feature_dim, hidden, Activation::Identity),
        mk_layer(classes, feature_dim, Activation::Identity),
    ];
    let model = ModelParams::from_layers(layers, 2).expect("shapes chain by construction");
    assert!(model.param_count() <= 200);

    // Bank over a pool that includes the batch samples plus extras, so
    // neighborhoods and backgrounds stay disjoint.
    let pool = batch + rng.gen_range(4..=8);
    let inputs: Vec<Vec<f64>> = (0..pool)
        .map(|_| (0..input_dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let mut features = Vec::with_capacity(pool);
    let mut probs = Vec::with_capacity(pool);
    for x in &inputs {
        let (z, _, p) = model.forward(x).expect("finite params");
        features.push(z);
        probs.push(p);
    }
    let k = rng.gen_range(1..=2usize.min(pool - 1));
    let bank = MemoryBank::initialize(&probs, &features, k).expect("pool is large enough");

    let batch_indices: Vec<usize> = (0..batch).collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..classes)).collect();
    let backgrounds: Vec<Vec<usize>> = batch_indices
        .iter()
        .map(|&i| {
            let neighbors = bank.neighbor_list(i);
            (0..pool)
                .filter(|&j| j != i && !neighbors.contains(&j))
                .take(2)
                .collect()
        })
        .collect();

    Instance {
        model,
        inputs,
        batch_indices,
        labels,
        bank,
        backgrounds,
        gamma: rng.gen_range(0.1..2.0),
        beta: rng.gen_range(0.1..2.0),
        lambda2: rng.gen_range(0.1..2.0),
    }
}

fn batch_predictions(model: &ModelParams, inst: &Instance) -> Result<Vec<ProbVector>> {
    inst.batch_indices
        .iter()
        .map(|&i| model.forward(&inst.inputs[i]).map(|(_, _, p)| p))
        .collect()
}

/// Scalar loss and analytic logit gradients of one named objective on an
/// instance, evaluated at `model`.
fn objective_eval(
    objective: &str,
    model: &ModelParams,
    inst: &Instance,
) -> Result<(f64, Vec<ScoreVector>)> {
    let preds = batch_predictions(model, inst)?;
    match objective {
        "procal" => {
            let (loss, grads) = procal_loss(
                &inst.batch_indices,
                &preds,
                &inst.bank,
                inst.gamma,
                inst.beta,
                &ProcalOptions::default(),
            )?;
            Ok((loss.total, grads))
        }
        "soft_only" => {
            let (loss, grads) = procal_loss(
                &inst.batch_indices,
                &preds,
                &inst.bank,
                inst.gamma,
                0.0,
                &ProcalOptions::default(),
            )?;
            Ok((loss.total, grads))
        }
        "div_only" => {
            let n = preds.len() as f64;
            let (div_sum, prob_grads) = diversity_loss(&preds)?;
            let scaled: Vec<ScoreVector> = prob_grads
                .iter()
                .map(|g| ScoreVector::new(g.as_slice().iter().map(|x| x / n).collect()))
                .collect::<Result<_>>()?;
            Ok((div_sum / n, to_logit_grads(&preds, &scaled)?))
        }
        "im" => {
            let (loss, grads) = im_loss(&preds)?;
            Ok((loss.total, grads))
        }
        "aad" => {
            let neighbor_sets: Vec<Vec<usize>> = inst
                .batch_indices
                .iter()
                .map(|&i| inst.bank.neighbor_list(i).to_vec())
                .collect();
            let (loss, prob_grads) = aad_loss(
                &inst.batch_indices,
                &preds,
                &neighbor_sets,
                &inst.backgrounds,
                &inst.bank,
                inst.lambda2,
            )?;
            Ok((loss.total, to_logit_grads(&preds, &prob_grads)?))
        }
        "cross_entropy" => {
            let n = preds.len() as f64;
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(preds.len());
            for (p, &label) in preds.iter().zip(&inst.labels) {
                let (li, gi) = cross_entropy(p, label, 0.1)?;
                loss += li / n;
                grads.push(ScoreVector::new(
                    gi.as_slice().iter().map(|g| g / n).collect(),
                )?);
            }
            Ok((loss, grads))
        }
        other => unreachable!("unknown objective {other}"),
    }
}

/// Central finite differences against analytic backprop for one
/// objective. Relative error uses `max(1, |analytic|, |numeric|)` in the
/// denominator, so near-zero gradients are compared absolutely.
pub fn gradient_check(objective: &str, trials: usize, seed: u64) -> OracleOutcome {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let inst = random_instance(&mut rng);
        let eval = |m: &ModelParams| -> f64 {
            objective_eval(objective, m, &inst).expect("instances are valid").0
        };
        let (_, logit_grads) =
            objective_eval(objective, &inst.model, &inst).expect("instances are valid");
        let batch_inputs: Vec<&[f64]> = inst
            .batch_indices
            .iter()
            .map(|&i| inst.inputs[i].as_slice())
            .collect();
        let analytic = inst
            .model
            .backward(&batch_inputs, &logit_grads)
            .expect("shapes agree");
        for idx in 0..inst.model.param_count() {
            let theta = inst.model.get_param(idx);
            let mut plus = inst.model.clone();
            plus.set_param(idx, theta + FD_STEP);
            let mut minus = inst.model.clone();
            minus.set_param(idx, theta - FD_STEP);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic.get(idx);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(err);
            if err > FD_REL_TOL {
                return OracleOutcome::new(
                    &format!("gradient[{objective}]"),
                    false,
                    trial + 1,
                    err,
                    format!(
                        "trial {trial}, parameter {idx}: analytic {a}, finite-difference {numeric}"
                    ),
                );
            }
        }
    }
    OracleOutcome::new(
        &format!("gradient[{objective}]"),
        true,
        trials,
        worst,
        format!("max relative error {worst:.3e} (tol {FD_REL_TOL:.0e})"),
    )
}

/// Runs [`gradient_check`] for every objective.
pub fn gradient_suite(trials_per_objective: usize, seed: u64) -> Vec<OracleOutcome> {
    GRADIENT_ORACLE_OBJECTIVES
        .iter()
        .enumerate()
        .map(|(i, obj)| gradient_check(obj, trials_per_objective, seed.wrapping_add(i as u64)))
        .collect()
}

/// Soft-loss gradient equivalence: the composed route through the
/// calibrated target against the direct `-(q + 2 gamma p) / n` form.
pub fn soft_gradient_equivalence(trials: usize, seed: u64) -> OracleOutcome {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let c = rng.gen_range(2..=6);
        let n = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=8);
        let gamma = rng.gen_range(0.01..4.0);

        let mut targets = Vec::with_capacity(n);
        let mut preds = Vec::with_capacity(n);
        let mut signals = Vec::with_capacity(n);
        for _ in 0..n {
            let random_prob = |rng: &mut ChaCha12Rng| {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(-3.0..3.0)).collect();
                softmax(&ScoreVector::new(raw).unwrap()).unwrap()
            };
            // Neighbor aggregate of k cached probability vectors.
            let mut p_n = vec![0.0; c];
            for _ in 0..k {
                for (a, &x) in p_n.iter_mut().zip(random_prob(&mut rng).as_slice()) {
                    *a += x;
                }
            }
            let p_n = ScoreVector::new(p_n).unwrap();
            let p_s = random_prob(&mut rng);
            let p = random_prob(&mut rng);
            let target = crate::objectives::calibrate(&p_n, &p, &p_s, gamma).unwrap();
            signals.push(target.external_signal());
            targets.push(target);
            preds.push(p);
        }
        let (_, composed) = crate::objectives::soft_loss(&targets, &preds, false)
            .expect("targets and predictions agree");
        for i in 0..n {
            let direct = crate::theory::soft_gradient(&signals[i], gamma, preds[i].as_slice())
                .expect("lengths agree");
            for (got, want) in composed[i].as_slice().iter().zip(&direct) {
                let err = (got - want / n as f64).abs();
                worst = worst.max(err);
                if err > 1e-12 {
                    return OracleOutcome::new(
                        "soft_gradient_equivalence",
                        false,
                        trial + 1,
                        err,
                        format!("trial {trial}, sample {i}: composed {got}, direct {want}"),
                    );
                }
            }
        }
    }
    OracleOutcome::new(
        "soft_gradient_equivalence",
        true,
        trials,
        worst,
        format!("max absolute deviation {worst:.3e} (tol 1e-12)"),
    )
}

/// Fixed-point algebra on random draws: simplex membership to 1e-12,
/// stationarity residual to 1e-10, and the multiplier against
/// `(2 gamma + sum q) / C` to 1e-12.
pub fn fixed_point_suite(trials: usize, seed: u64) -> OracleOutcome {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let c = rng.gen_range(2..=10);
        let gamma = rng.gen_range(0.05..5.0);
        let q = ScoreVector::new((0..c).map(|_| rng.gen_range(0.0..10.0)).collect())
            .expect("finite draws");
        let fp = fixed_point(&q, gamma, c).expect("gamma > 0");
        let simplex_residual = (fp.p_star.iter().sum::<f64>() - 1.0).abs();
        let (_, stationarity) = stationarity_residual(&fp.p_star, &q, gamma).expect("lengths agree");
        let lambda_expected = (2.0 * gamma + q.as_slice().iter().sum::<f64>()) / c as f64;
        let lambda_err = (fp.lambda - lambda_expected).abs();
        worst = worst.max(simplex_residual).max(stationarity).max(lambda_err);
        if simplex_residual > 1e-12 || stationarity > 1e-10 || lambda_err > 1e-12 {
            return OracleOutcome::new(
                "fixed_point",
                false,
                trial + 1,
                worst,
                format!(
                    "trial {trial}: simplex {simplex_residual:.3e}, \
                     stationarity {stationarity:.3e}, lambda {lambda_err:.3e}"
                ),
            );
        }
    }
    OracleOutcome::new(
        "fixed_point",
        true,
        trials,
        worst,
        format!("max residual {worst:.3e} (tols 1e-12 / 1e-10 / 1e-12)"),
    )
}

/// Exhaustive repeated-max selection, written independently of the
/// bank's sorted retrieval: at each step scan all remaining candidates
/// for the highest similarity, breaking ties by lowest index.
fn brute_force_top_k(bank: &MemoryBank, i: usize, k: usize) -> Vec<usize> {
    let n = bank.len();
    let query = bank.feature(i);
    let mut remaining: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best_pos = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (pos, &j) in remaining.iter().enumerate() {
            let sim = crate::math::dot(bank.feature(j).as_slice(), query.as_slice());
            if sim > best_sim {
                best_sim = sim;
                best_pos = pos;
            }
        }
        out.push(remaining.remove(best_pos));
    }
    out
}

/// Exact equivalence of bank retrieval against the brute-force scan on
/// random banks, including duplicated features to exercise tie-breaks.
pub fn knn_equivalence_suite(banks: usize, seed: u64) -> OracleOutcome {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for trial in 0..banks {
        let n = rng.gen_range(2..=200);
        let h = rng.gen_range(2..=16);
        let c = rng.gen_range(2..=5);
        let mut features: Vec<FeatureVector> = (0..n)
            .map(|_| {
                FeatureVector::new((0..h).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        // Duplicate a run of features so ties actually occur.
        if n >= 4 && rng.gen_bool(0.5) {
            let src = rng.gen_range(0..n);
            for offset in 1..=2 {
                let dst = (src + offset) % n;
                features[dst] = features[src].clone();
            }
        }
        let probs: Vec<ProbVector> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
                softmax(&ScoreVector::new(raw).unwrap()).unwrap()
            })
            .collect();
        let k = rng.gen_range(1..n.min(9));
        let bank = match MemoryBank::initialize(&probs, &features, k) {
            Ok(b) => b,
            Err(_) => continue, // degenerate all-zero feature draw
        };
        for i in 0..n {
            let got = bank.top_k_neighbors(i, k).expect("k in range");
            let want = brute_force_top_k(&bank, i, k);
            if got != want {
                return OracleOutcome::new(
                    "knn_equivalence",
                    false,
                    trial + 1,
                    1.0,
                    format!("bank {trial}, sample {i}: retrieval {got:?} vs scan {want:?}"),
                );
            }
            debug_assert_eq!(bank.neighbor_list(i), brute_force_top_k(&bank, i, bank.k()));
        }
    }
    OracleOutcome::new(
        "knn_equivalence",
        true,
        banks,
        0.0,
        "exact index-list equality".into(),
    )
}

/// Runs every suite with the sample counts used by the acceptance gate.
pub fn run_all(gradient_trials: usize, seed: u64) -> Vec<OracleOutcome> {
    let mut outcomes = gradient_suite(gradient_trials, seed);
    outcomes.push(soft_gradient_equivalence(1000, seed.wrapping_add(101)));
    outcomes.push(fixed_point_suite(10_000, seed.wrapping_add(202)));
    outcomes.push(knn_equivalence_suite(100, seed.wrapping_add(303)));
    outcomes
}
