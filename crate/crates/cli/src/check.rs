//! Self-verification run by `picrl check`.

use rand::Rng;

use picrl_core::grpo::{compute_advantages, group_loss_and_grad, kl_estimate, ScoredSample};
use picrl_core::policy::{grad_logprob_steps, logprob_steps, ContextFeatures};
use picrl_core::seed;
use picrl_core::taskgen::GoldAnswer;
use picrl_core::{
    BBox, PolicyParams, RewardConfig, RewardEngine, TaskRecord, TokenId, TokenSequence, Universe,
    Vocabulary, WorldConfig,
};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    pub gradient_instances: usize,
    pub reward_cases: usize,
    pub advantage_groups: usize,
    pub kl_pairs: usize,
    /// Scales every analytic gradient by 1.01 so the gradient checks must fail.
    pub inject_gradient_bug: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            gradient_instances: 100,
            reward_cases: 2000,
            advantage_groups: 10_000,
            kl_pairs: 100_000,
            inject_gradient_bug: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckReport {
    pub checks: Vec<CheckResult>,
    pub max_grad_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            let tag = if c.passed { "ok  " } else { "FAIL" };
            s.push_str(&format!("{tag} {:<24} {}\n", c.name, c.detail));
        }
        s.push_str(&format!(
            "max gradient relative error: {:.3e}\n",
            self.max_grad_rel_err
        ));
        s
    }
}

const GRAD_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;

pub fn run_checks(
    world: &WorldConfig,
    rewards: &RewardConfig,
    opts: &CheckOptions,
) -> Result<CheckReport, CliError> {
    let mut report = CheckReport::default();
    let bug = if opts.inject_gradient_bug { 1.01 } else { 1.0 };

    let e = check_logprob_gradient(opts, bug);
    report.max_grad_rel_err = report.max_grad_rel_err.max(e);
    report.checks.push(CheckResult {
        name: "grad_logprob",
        passed: e < GRAD_TOL,
        detail: format!("{} instances, max rel err {e:.3e}", opts.gradient_instances),
    });
    let e = check_loss_gradient(opts, bug)?;
    report.max_grad_rel_err = report.max_grad_rel_err.max(e);
    report.checks.push(CheckResult {
        name: "grpo_loss_and_grad",
        passed: e < GRAD_TOL,
        detail: format!("{} instances, max rel err {e:.3e}", opts.gradient_instances),
    });

    let universe = Universe::generate(world, opts.seed)?;
    let engine = RewardEngine::new(&universe.vocab, rewards);
    for kind in ["oct", "vlt", "ict"] {
        let mismatches = check_rewards(&universe, &engine, kind, opts)?;
        report.checks.push(CheckResult {
            name: match kind {
                "oct" => "reward_oct oracle",
                "vlt" => "reward_vlt oracle",
                _ => "reward_ict oracle",
            },
            passed: mismatches == 0,
            detail: format!("{mismatches} mismatches in {} cases", opts.reward_cases),
        });
    }
    let (worst_mean, worst_var, constant_ok) = check_advantages(opts);
    report.checks.push(CheckResult {
        name: "advantage normalization",
        passed: worst_mean < 1e-9 && worst_var < 0.01 && constant_ok,
        detail: format!(
            "{} groups, max |mean| {worst_mean:.2e}, max |var-1| {worst_var:.2e}, constant groups zero: {constant_ok}",
            opts.advantage_groups
        ),
    });
    let (negatives, at_two) = check_kl(opts)?;
    report.checks.push(CheckResult {
        name: "kl estimator",
        passed: negatives == 0 && (at_two - 0.306853).abs() < 1e-6,
        detail: format!(
            "{negatives} negative of {}, value at u=2 {at_two:.7}",
            opts.kl_pairs
        ),
    });
    Ok(report)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn random_features(rng: &mut seed::Rng, dim: usize) -> ContextFeatures {
    let mut idx: Vec<u32> = (0..dim as u32).filter(|_| rng.random_bool(0.4)).collect();
    if idx.is_empty() {
        idx.push(rng.random_range(0..dim as u32));
    }
    ContextFeatures(
        idx.into_iter()
            .map(|i| (i, rng.random_range(-1.5..1.5)))
            .collect(),
    )
}

fn random_params(rng: &mut seed::Rng, rows: usize, cols: usize) -> PolicyParams {
    let mut p = PolicyParams::zeros(rows, cols);
    for x in &mut p.theta {
        *x = rng.random_range(-0.8..0.8);
    }
    p
}

fn jitter(p: &PolicyParams, rng: &mut seed::Rng) -> PolicyParams {
    let mut q = p.clone();
    for x in &mut q.theta {
        *x += rng.random_range(-0.3..0.3);
    }
    q
}

/// Central differences on every coordinate of `f`.
fn fd_max_err(params: &PolicyParams, analytic: &[f64], f: impl Fn(&PolicyParams) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut p = params.clone();
    for k in 0..p.theta.len() {
        let x = p.theta[k];
        p.theta[k] = x + FD_STEP;
        let up = f(&p);
        p.theta[k] = x - FD_STEP;
        let down = f(&p);
        p.theta[k] = x;
        worst = worst.max(rel_err((up - down) / (2.0 * FD_STEP), analytic[k]));
    }
    worst
}

const V: usize = 12;
const F: usize = 20;

fn check_logprob_gradient(opts: &CheckOptions, bug: f64) -> f64 {
    let mut rng = seed::rng_at(opts.seed, &[0x4752_4144]);
    let mut worst: f64 = 0.0;
    for _ in 0..opts.gradient_instances {
        let params = random_params(&mut rng, V, F);
        let temp = rng.random_range(0.5..2.0);
        let len = rng.random_range(1..=8);
        let steps: Vec<ContextFeatures> = (0..len).map(|_| random_features(&mut rng, F)).collect();
        let tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..V as u32)).collect();
        let g: Vec<f64> = grad_logprob_steps(&params, &steps, &tokens, temp)
            .into_iter()
            .map(|x| x * bug)
            .collect();
        worst = worst.max(fd_max_err(&params, &g, |p| {
            logprob_steps(p, &steps, &tokens, temp).iter().sum()
        }));
    }
    worst
}

struct LossInstance {
    steps: Vec<Vec<ContextFeatures>>,
    tokens: Vec<Vec<TokenId>>,
    old: Vec<Vec<f64>>,
    reference: Vec<Vec<f64>>,
    adv: Vec<f64>,
}

fn check_loss_gradient(opts: &CheckOptions, bug: f64) -> Result<f64, CliError> {
    let mut rng = seed::rng_at(opts.seed, &[0x4c4f_5353]);
    let mut worst: f64 = 0.0;
    let (eps, beta) = (0.2, 0.04);
    for _ in 0..opts.gradient_instances {
        let params = random_params(&mut rng, V, F);
        let old_p = jitter(&params, &mut rng);
        let ref_p = jitter(&params, &mut rng);
        let g = 4;
        let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut inst = LossInstance {
            steps: vec![],
            tokens: vec![],
            old: vec![],
            reference: vec![],
            adv: compute_advantages(&rewards, 1e-8),
        };
        for _ in 0..g {
            let len = rng.random_range(1..=8);
            let steps: Vec<ContextFeatures> =
                (0..len).map(|_| random_features(&mut rng, F)).collect();
            let tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..V as u32)).collect();
            inst.old.push(logprob_steps(&old_p, &steps, &tokens, 1.0));
            inst.reference
                .push(logprob_steps(&ref_p, &steps, &tokens, 1.0));
            inst.steps.push(steps);
            inst.tokens.push(tokens);
        }
        let samples: Vec<ScoredSample<'_>> = (0..g)
            .map(|i| ScoredSample {
                steps: &inst.steps[i],
                tokens: &inst.tokens[i],
                logprobs_old: &inst.old[i],
                logprobs_ref: &inst.reference[i],
                advantage: inst.adv[i],
            })
            .collect();
        let (_, grad, _) = group_loss_and_grad(&params, &samples, eps, beta, 1.0)?;
        let grad: Vec<f64> = grad.into_iter().map(|x| x * bug).collect();
        worst = worst.max(fd_max_err(&params, &grad, |p| {
            group_loss_and_grad(p, &samples, eps, beta, 1.0).map_or(f64::NAN, |r| r.0)
        }));
    }
    Ok(worst)
}

/// Random output biased towards the tokens a reward looks at.
fn random_output(rng: &mut seed::Rng, vocab: &Vocabulary, task: &TaskRecord) -> TokenSequence {
    let mut hot: Vec<TokenId> = vec![
        picrl_core::vocab::YES,
        picrl_core::vocab::NO,
        picrl_core::vocab::COMMA,
    ];
    match &task.gold {
        GoldAnswer::Box(b) => {
            for c in [b.x1, b.y1, b.x2, b.y2] {
                for d in [c.saturating_sub(1), c, c + 1] {
                    hot.extend(vocab.coord_token(d));
                }
            }
        }
        GoldAnswer::Names(ns) => hot.extend(ns.iter().filter_map(|n| vocab.name_token(n))),
        GoldAnswer::Binary(_) => {}
    }
    let len = rng.random_range(0..=14);
    let content: Vec<TokenId> = (0..len)
        .map(|_| {
            if rng.random_bool(0.5) {
                hot[rng.random_range(0..hot.len())]
            } else {
                rng.random_range(1..vocab.len() as u32)
            }
        })
        .collect();
    if rng.random_bool(0.5) {
        TokenSequence::terminated(content)
    } else {
        TokenSequence::new(content)
    }
}

fn words(vocab: &Vocabulary, out: &TokenSequence) -> Vec<String> {
    out.content()
        .iter()
        .map(|&t| vocab.word(t).unwrap_or("").to_string())
        .collect()
}

fn oracle_oct(ws: &[String], gold: &str) -> f64 {
    match ws.iter().find(|w| *w == "yes" || *w == "no") {
        Some(w) if w == gold => 1.0,
        _ => 0.0,
    }
}

fn oracle_vlt(ws: &[String], gold: &BBox, threshold: f64) -> f64 {
    // Runs of numbers, commas dropped, split by anything else.
    let mut runs: Vec<Vec<u32>> = vec![vec![]];
    for w in ws {
        if w == "," {
            continue;
        }
        match w.parse::<u32>() {
            Ok(n) => runs.last_mut().expect("non-empty").push(n),
            Err(_) => runs.push(vec![]),
        }
    }
    let pred = runs.iter().find_map(|r| {
        (0..r.len().saturating_sub(3))
            .map(|i| (r[i], r[i + 1], r[i + 2], r[i + 3]))
            .find(|&(x1, y1, x2, y2)| x1 <= x2 && y1 <= y2)
    });
    let Some((x1, y1, x2, y2)) = pred else {
        return 0.0;
    };
    let inside =
        |b: (u32, u32, u32, u32), x: u32, y: u32| x >= b.0 && x < b.2 && y >= b.1 && y < b.3;
    let g = (gold.x1, gold.y1, gold.x2, gold.y2);
    let p = (x1, y1, x2, y2);
    let (mut inter, mut union) = (0u64, 0u64);
    let hi = x2.max(gold.x2).max(y2).max(gold.y2);
    for x in 0..hi {
        for y in 0..hi {
            let (a, b) = (inside(p, x, y), inside(g, x, y));
            inter += u64::from(a && b);
            union += u64::from(a || b);
        }
    }
    if union > 0 && inter as f64 / union as f64 >= threshold {
        1.0
    } else {
        0.0
    }
}

fn oracle_ict(ws: &[String], gold: &[String], case_insensitive: bool) -> f64 {
    let norm = |s: &str| {
        if case_insensitive {
            s.to_lowercase()
        } else {
            s.to_string()
        }
    };
    let text = format!(
        " {} ",
        ws.iter().map(|w| norm(w)).collect::<Vec<_>>().join(" ")
    );
    let hits = gold
        .iter()
        .filter(|n| text.contains(&format!(" {} ", norm(n))))
        .count();
    hits as f64 / gold.len() as f64
}

fn check_rewards(
    u: &Universe,
    engine: &RewardEngine<'_>,
    kind: &str,
    opts: &CheckOptions,
) -> Result<usize, CliError> {
    let ctx = u.ctx();
    let mut rng = seed::rng_at(
        opts.seed,
        &[0x5257_4152_44, kind.len() as u64, kind.as_bytes()[0] as u64],
    );
    let mut mismatches = 0;
    let max_m = 3.min(u.world.entities.len());
    for i in 0..opts.reward_cases {
        let s = seed::derive(opts.seed, &[0x5441_534b, i as u64]);
        let task = match kind {
            "oct" => ctx.make_oct_task(rng.random_bool(0.5), s)?,
            "vlt" => ctx.sample_vlt_task(s)?,
            _ => ctx.make_ict_task(rng.random_range(1..=max_m), false, s)?,
        };
        let out = random_output(&mut rng, &u.vocab, &task);
        let ws = words(&u.vocab, &out);
        let (got, want) = match &task.gold {
            GoldAnswer::Binary(y) => (
                engine.reward_oct(&task, &out)?,
                oracle_oct(
                    &ws,
                    if *y == picrl_core::taskgen::YesNo::Yes {
                        "yes"
                    } else {
                        "no"
                    },
                ),
            ),
            GoldAnswer::Box(b) => (
                engine.reward_vlt(&task, &out)?,
                oracle_vlt(&ws, b, engine.cfg.iou_threshold),
            ),
            GoldAnswer::Names(ns) => (
                engine.reward_ict(&task, &out)?,
                oracle_ict(&ws, ns, engine.cfg.case_insensitive_names),
            ),
        };
        if got != want {
            mismatches += 1;
        }
    }
    Ok(mismatches)
}

fn check_advantages(opts: &CheckOptions) -> (f64, f64, bool) {
    let mut rng = seed::rng_at(opts.seed, &[0x4144_56]);
    let (mut worst_mean, mut worst_var): (f64, f64) = (0.0, 0.0);
    for _ in 0..opts.advantage_groups {
        let r: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..2.0)).collect();
        let mu = r.iter().sum::<f64>() / 8.0;
        let sigma = (r.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 8.0).sqrt();
        let a = compute_advantages(&r, 1e-8);
        let m = a.iter().sum::<f64>() / 8.0;
        worst_mean = worst_mean.max(m.abs());
        if sigma > 1e-6 {
            let v = a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 8.0;
            worst_var = worst_var.max((v - 1.0).abs());
        }
    }
    let constant_ok = [0.0, 0.5, 1.0, 2.0]
        .iter()
        .all(|&c| compute_advantages(&[c; 8], 1e-8).iter().all(|&x| x == 0.0));
    (worst_mean, worst_var, constant_ok)
}

fn check_kl(opts: &CheckOptions) -> Result<(usize, f64), CliError> {
    let mut rng = seed::rng_at(opts.seed, &[0x4b4c]);
    let cur: Vec<f64> = (0..opts.kl_pairs)
        .map(|_| rng.random_range(-20.0..0.0))
        .collect();
    let reference: Vec<f64> = (0..opts.kl_pairs)
        .map(|_| rng.random_range(-20.0..0.0))
        .collect();
    let negatives = kl_estimate(&cur, &reference)?
        .iter()
        .filter(|&&k| !(k >= 0.0))
        .count();
    let at_two = kl_estimate(&[0.0], &[2f64.ln()])?[0];
    Ok((negatives, at_two))
}
