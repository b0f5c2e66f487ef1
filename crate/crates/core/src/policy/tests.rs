use super::*;
use crate::synthworld::WorldConfig;
use crate::taskgen::Universe;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn universe() -> Universe {
    Universe::generate(
        &WorldConfig {
            entities: 6,
            ..Default::default()
        },
        2,
    )
    .unwrap()
}

fn policy(u: &Universe) -> Policy {
    Policy::new(
        FeatureEncoder::new(&u.vocab, u.world.config.identity_len(), 16),
        1.0,
    )
}

fn random_params(rows: usize, cols: usize, scale: f64, seed: u64) -> PolicyParams {
    let mut rng = crate::seed::rng(seed);
    PolicyParams {
        rows,
        cols,
        theta: (0..rows * cols)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect(),
    }
}

#[test]
fn encoding_is_deterministic() {
    let u = universe();
    let p = policy(&u);
    let t = u.ctx().make_ict_task(2, false, 0).unwrap();
    assert_eq!(
        p.encoder.encode_context(&t, &[]),
        p.encoder.encode_context(&t, &[])
    );
    let tok = u.vocab.token("the").unwrap();
    assert_eq!(
        p.encoder.encode_context(&t, &[tok]),
        p.encoder.encode_context(&t, &[tok])
    );
    assert!(p.encoder.encode_context(&t, &[tok]).norm() < 10.0);
}

#[test]
fn name_indicators_follow_demonstrations() {
    let u = universe();
    let p = policy(&u);
    let a = u.ctx().make_ict_task(1, false, 0).unwrap();
    let mut b = a.clone();
    let other = u
        .names
        .values()
        .find(|n| **n != a.demonstrations[0].name)
        .unwrap()
        .clone();
    b.demonstrations[0].name = other.clone();
    b.gold = crate::taskgen::GoldAnswer::Names(vec![other]);
    let l = p.encoder.layout;
    let block = |t: &TaskRecord| -> Vec<u32> {
        p.encoder
            .encode_context(t, &[])
            .0
            .iter()
            .map(|&(i, _)| i)
            .filter(|&i| (l.pending_name..l.pending_name + l.name_count).contains(&i))
            .collect()
    };
    assert_eq!(block(&a).len(), 1);
    assert_ne!(block(&a), block(&b));
}

#[test]
fn empty_instruction_has_no_instruction_block() {
    let u = universe();
    let p = policy(&u);
    let mut t = u.ctx().make_ict_task(1, false, 0).unwrap();
    t.instruction = TokenSequence::default();
    let l = p.encoder.layout;
    let phi = p.encoder.encode_context(&t, &[]);
    assert!(phi
        .0
        .iter()
        .all(|&(i, _)| !(l.instruction..l.instruction + l.vocab_size).contains(&i)));
    assert!(phi
        .0
        .iter()
        .any(|&(i, _)| (l.query_attr..l.query_attr + l.attr_count).contains(&i)));
    assert!(phi.0.iter().any(|&(i, _)| i == l.prev_token + l.vocab_size));
}

#[test]
fn distribution_properties() {
    let u = universe();
    let p = policy(&u);
    let t = u.ctx().make_oct_task(true, 0).unwrap();
    let phi = p.encoder.encode_context(&t, &[]);
    let v = p.encoder.vocab_size();
    let zero = PolicyParams::zeros(v, p.encoder.dim());
    for x in token_distribution(&zero, &phi, 1.0) {
        assert!((x - 1.0 / v as f64).abs() < 1e-15);
    }

    let params = random_params(v, p.encoder.dim(), 0.5, 1);
    let hot = token_distribution(&params, &phi, 1e4);
    assert!(hot.iter().all(|x| (x - 1.0 / v as f64).abs() < 1e-3));

    let base = token_distribution(&params, &phi, 1.0);
    assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let mut bumped = params.clone();
    let (feat, _) = phi.0[0];
    *bumped.at_mut(7, feat) += 0.3;
    assert!(token_distribution(&bumped, &phi, 1.0)[7] > base[7]);
}

#[test]
fn sampling_is_deterministic_and_consistent() {
    let u = universe();
    let p = policy(&u);
    let t = u.ctx().make_ict_task(2, true, 1).unwrap();
    let params = random_params(p.encoder.vocab_size(), p.encoder.dim(), 0.3, 2);
    let a = p.sample_sequence(&params, &t, 16, 99);
    assert_eq!(a, p.sample_sequence(&params, &t, 16, 99));
    assert_eq!(a.sequence.len(), a.logprobs_old.len());
    assert!(a.logprobs_old.iter().all(|&l| l <= 0.0));
    let again = p.logprob_sequence(&params, &t, &a.sequence).unwrap();
    for (x, y) in again.iter().zip(&a.logprobs_old) {
        assert!((x - y).abs() <= 1e-12);
    }

    let one = p.sample_sequence(&params, &t, 1, 5);
    assert_eq!(one.sequence.len(), 1);
    assert_eq!(one.logprobs_old.len(), 1);
}

#[test]
fn zero_params_logprobs_are_uniform() {
    let u = universe();
    let p = policy(&u);
    let t = u.ctx().make_ict_task(1, false, 1).unwrap();
    let v = p.encoder.vocab_size();
    let zero = PolicyParams::zeros(v, p.encoder.dim());
    let s = TokenSequence::terminated(vec![9, 12, 30]);
    for l in p.logprob_sequence(&zero, &t, &s).unwrap() {
        assert!((l + (v as f64).ln()).abs() < 1e-12);
    }
    let params = random_params(v, p.encoder.dim(), 1.0, 4);
    let total: f64 = (0..v as TokenId)
        .map(|tok| {
            p.logprob_sequence(&params, &t, &TokenSequence::new(vec![tok]))
                .unwrap()[0]
                .exp()
        })
        .sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(p
        .logprob_sequence(&params, &t, &TokenSequence::new(vec![v as TokenId]))
        .is_err());
}

/// Chi-square upper quantile via the Wilson-Hilferty approximation.
fn chi2_critical(df: f64, z: f64) -> f64 {
    let a = 2.0 / (9.0 * df);
    df * (1.0 - a + z * a.sqrt()).powi(3)
}

fn chi2(counts: &[usize], probs: &[f64], n: usize) -> f64 {
    counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum()
}

#[test]
fn categorical_sampler_chi_square_small_vocab() {
    let mut rng = crate::seed::rng(3);
    let raw: Vec<f64> = (0..16).map(|_| rng.random::<f64>() + 0.05).collect();
    let s: f64 = raw.iter().sum();
    let p: Vec<f64> = raw.iter().map(|x| x / s).collect();
    let n = 100_000;
    let mut counts = vec![0; 16];
    for _ in 0..n {
        counts[sample_categorical(&p, rng.random())] += 1;
    }
    // z = 3.09 is the upper 0.001 normal quantile.
    assert!(chi2(&counts, &p, n) < chi2_critical(15.0, 3.09));
}

#[test]
fn first_token_frequencies_match_distribution() {
    let u = universe();
    let p = policy(&u);
    let t = u.ctx().make_ict_task(1, false, 2).unwrap();
    let v = p.encoder.vocab_size();
    let n = 100_000;

    let zero = PolicyParams::zeros(v, p.encoder.dim());
    let mut counts = vec![0usize; v];
    for s in 0..n as u64 {
        counts[p.sample_sequence(&zero, &t, 1, s).sequence.0[0] as usize] += 1;
    }
    let mean = n as f64 / v as f64;
    let sd = (n as f64 * (1.0 / v as f64) * (1.0 - 1.0 / v as f64)).sqrt();
    // Each token falls outside its 3-sigma band with probability 0.0027.
    let outside = counts
        .iter()
        .filter(|&&c| (c as f64 - mean).abs() > 3.0 * sd)
        .count();
    assert!(outside <= 2, "{outside} tokens outside the 3-sigma band");
    let uniform = vec![1.0 / v as f64; v];
    assert!(chi2(&counts, &uniform, n) < chi2_critical((v - 1) as f64, 3.09));

    let params = random_params(v, p.encoder.dim(), 0.4, 8);
    let probs = token_distribution(&params, &p.encoder.encode_context(&t, &[]), 1.0);
    let mut counts = vec![0usize; v];
    for s in 0..n as u64 {
        counts[p.sample_sequence(&params, &t, 1, s).sequence.0[0] as usize] += 1;
    }
    assert!(chi2(&counts, &probs, n) < chi2_critical((v - 1) as f64, 3.09));
}

/// Dense log-probability used as the finite-difference target.
fn naive_logprob(
    theta: &[f64],
    rows: usize,
    cols: usize,
    steps: &[Vec<f64>],
    tokens: &[TokenId],
    temp: f64,
) -> f64 {
    let mut total = 0.0;
    for (phi, &tok) in steps.iter().zip(tokens) {
        let logits: Vec<f64> = (0..rows)
            .map(|v| (0..cols).map(|j| theta[v * cols + j] * phi[j]).sum::<f64>() / temp)
            .collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += logits[tok as usize] - lse;
    }
    total
}

fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

#[test]
fn gradient_matches_finite_differences() {
    let (rows, cols) = (12, 20);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let mut rng = crate::seed::rng(1000 + case);
        let params = random_params(rows, cols, 0.5, case);
        let len = rng.random_range(1..=8);
        let dense: Vec<Vec<f64>> = (0..len)
            .map(|_| (0..cols).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let steps: Vec<ContextFeatures> = dense
            .iter()
            .map(|d| ContextFeatures(d.iter().enumerate().map(|(j, &x)| (j as u32, x)).collect()))
            .collect();
        let tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..rows as u32)).collect();
        let temp = if case % 2 == 0 { 1.0 } else { 0.7 };
        let g = grad_logprob_steps(&params, &steps, &tokens, temp);
        let mut num = vec![0.0; g.len()];
        for k in 0..g.len() {
            let mut plus = params.theta.clone();
            plus[k] += h;
            let mut minus = params.theta.clone();
            minus[k] -= h;
            num[k] = (naive_logprob(&plus, rows, cols, &dense, &tokens, temp)
                - naive_logprob(&minus, rows, cols, &dense, &tokens, temp))
                / (2.0 * h);
        }
        worst = worst.max(max_rel_err(&g, &num));
    }
    assert!(worst < 1e-5, "max relative error {worst}");
}

#[test]
fn task_gradient_matches_finite_differences() {
    let u = universe();
    let p = policy(&u);
    let t = u.ctx().make_ict_task(2, false, 3).unwrap();
    let params = random_params(p.encoder.vocab_size(), p.encoder.dim(), 0.2, 6);
    let r = p.sample_sequence(&params, &t, 6, 1);
    let g = p.grad_logprob(&params, &t, &r.sequence).unwrap();
    let f = |th: &PolicyParams| {
        p.logprob_sequence(th, &t, &r.sequence)
            .unwrap()
            .iter()
            .sum::<f64>()
    };
    let h = 1e-6;
    // Only entries touched by active features can be nonzero; probe those.
    let steps = p.encoder.step_features(&t, r.sequence.tokens());
    let mut active: Vec<u32> = steps
        .iter()
        .flat_map(|s| s.0.iter().map(|&(j, _)| j))
        .collect();
    active.sort_unstable();
    active.dedup();
    for &j in &active {
        for v in [0u32, 5, r.sequence.0[0]] {
            let k = v as usize * params.cols + j as usize;
            let mut plus = params.clone();
            plus.theta[k] += h;
            let mut minus = params.clone();
            minus.theta[k] -= h;
            let num = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!(max_rel_err(&[g[k]], &[num]) < 1e-5);
        }
    }
}

#[test]
fn gradient_identities() {
    let (rows, cols) = (12, 20);
    let zero = PolicyParams::zeros(rows, cols);
    let phi = ContextFeatures((0..cols as u32).map(|j| (j, 1.0 + j as f64)).collect());
    let g = grad_logprob_steps(&zero, std::slice::from_ref(&phi), &[3], 1.0);
    for j in 0..cols {
        let col: f64 = (0..rows).map(|v| g[v * cols + j]).sum();
        assert!(col.abs() < 1e-12);
    }
    let params = random_params(rows, cols, 0.5, 1);
    let once = grad_logprob_steps(&params, std::slice::from_ref(&phi), &[3], 1.0);
    let twice = grad_logprob_steps(&params, &[phi.clone(), phi], &[3, 3], 1.0);
    for (a, b) in once.iter().zip(&twice) {
        assert!((2.0 * a - b).abs() < 1e-12);
    }
}

#[test]
fn copying_oracle_emits_all_names() {
    let u = universe();
    let p = policy(&u);
    let oracle = PolicyParams::copying_oracle(&p.encoder);
    for s in 0..20 {
        let t = u
            .ctx()
            .make_ict_task(1 + (s as usize % 3), false, s)
            .unwrap();
        let out = p.greedy(&oracle, &t, 16);
        assert!(out.is_terminated());
        assert_eq!(out.content_len(), t.gold_names().len());
        for n in t.gold_names() {
            assert!(out.content().contains(&u.vocab.name_token(n).unwrap()));
        }
    }
}

#[test]
fn checkpoint_roundtrip() {
    let params = random_params(5, 7, 1.0, 3);
    let header = CheckpointHeader::new(&params, "abc".into(), 4, 10, "cfg".into());
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, &header, &params).unwrap();
    let (h, back) = read_checkpoint(std::io::Cursor::new(&buf)).unwrap();
    assert_eq!(h, header);
    assert_eq!(back, params);
    buf.pop();
    assert!(read_checkpoint(std::io::Cursor::new(&buf)).is_err());
}
