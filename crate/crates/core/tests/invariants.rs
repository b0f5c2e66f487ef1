use picrl_core::grpo::{compute_advantages, group_loss_and_grad, ScoredSample};
use picrl_core::policy::{logprob_steps, token_distribution, ContextFeatures};
use picrl_core::synthworld::{gen_world, render_view, EmbeddingProvider};
use picrl_core::taskgen::{GoldAnswer, MAX_REFERENCES};
use picrl_core::vocab::{COMMA, EOS, LBRACKET, RBRACKET};
use picrl_core::{
    seed, BBox, PolicyParams, RewardConfig, RewardEngine, TokenId, TokenSequence, Universe,
    WorldConfig,
};
use proptest::prelude::*;
use rand::Rng;

fn universe() -> Universe {
    Universe::generate(&WorldConfig::default(), 0).unwrap()
}

fn features(rng: &mut seed::Rng, dim: usize) -> ContextFeatures {
    let mut idx: Vec<u32> = (0..dim as u32).filter(|_| rng.random_bool(0.5)).collect();
    if idx.is_empty() {
        idx.push(0);
    }
    ContextFeatures(
        idx.into_iter()
            .map(|i| (i, rng.random_range(-2.0..2.0)))
            .collect(),
    )
}

fn params(rng: &mut seed::Rng, rows: usize, cols: usize, scale: f64) -> PolicyParams {
    PolicyParams {
        rows,
        cols,
        theta: (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn adding_a_gold_name_never_lowers_ict_reward(
        task_seed in any::<u64>(),
        m in 1usize..=MAX_REFERENCES,
        noise in prop::collection::vec(0usize..1000, 0..14),
        pick in any::<prop::sample::Index>(),
        at in any::<prop::sample::Index>(),
    ) {
        let u = universe();
        let cfg = RewardConfig::default();
        let engine = RewardEngine::new(&u.vocab, &cfg);
        let task = u.ctx().make_ict_task(m, false, task_seed).unwrap();
        let words = u.vocab.len();
        let mut content: Vec<TokenId> = noise
            .iter()
            .map(|&i| (1 + i % (words - 1)) as TokenId)
            .collect();
        let before = engine.reward_ict(&task, &TokenSequence::terminated(content.clone())).unwrap();
        let name = pick.get(task.gold_names());
        let tok = u.vocab.name_token(name).unwrap();
        content.insert(at.index(content.len() + 1), tok);
        let after = engine.reward_ict(&task, &TokenSequence::terminated(content)).unwrap();
        prop_assert!(after >= before, "{before} -> {after}");
        prop_assert!(after > 0.0);
    }

    #[test]
    fn token_distribution_is_a_distribution(
        s in any::<u64>(),
        scale in 0.0f64..200.0,
        temperature in 0.05f64..50.0,
    ) {
        let mut rng = seed::rng(s);
        let p = params(&mut rng, 9, 7, scale);
        let phi = features(&mut rng, 7);
        let d = token_distribution(&p, &phi, temperature);
        prop_assert_eq!(d.len(), 9);
        prop_assert!(d.iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

/// IoU decided in exact integer arithmetic: `inter / union >= 1/2`.
fn direct_hit(a: [u32; 4], b: [u32; 4]) -> bool {
    let area = |r: [u32; 4]| u64::from(r[2] - r[0]) * u64::from(r[3] - r[1]);
    let w = a[2].min(b[2]).saturating_sub(a[0].max(b[0]));
    let h = a[3].min(b[3]).saturating_sub(a[1].max(b[1]));
    let inter = u64::from(w) * u64::from(h);
    let union = area(a) + area(b) - inter;
    2 * inter >= union
}

fn random_box(rng: &mut seed::Rng, side: u32) -> [u32; 4] {
    let x1 = rng.random_range(0..side);
    let y1 = rng.random_range(0..side);
    [
        x1,
        y1,
        rng.random_range(x1 + 1..=side),
        rng.random_range(y1 + 1..=side),
    ]
}

#[test]
fn vlt_reward_matches_direct_iou() {
    let u = universe();
    let cfg = RewardConfig::default();
    assert_eq!(cfg.iou_threshold, 0.5);
    let engine = RewardEngine::new(&u.vocab, &cfg);
    let side = WorldConfig::default().width;
    let mut task = u.ctx().sample_vlt_task(3).unwrap();
    let mut rng = seed::rng(0x10);
    let mut hits = 0;
    for _ in 0..10_000 {
        let gold = random_box(&mut rng, side);
        let pred = random_box(&mut rng, side);
        task.gold = GoldAnswer::Box(BBox::new(gold[0], gold[1], gold[2], gold[3]).unwrap());
        let mut out = vec![LBRACKET];
        for (i, &c) in pred.iter().enumerate() {
            if i > 0 {
                out.push(COMMA);
            }
            out.push(u.vocab.coord_token(c).unwrap());
        }
        out.extend([RBRACKET, EOS]);
        let r = engine.reward_vlt(&task, &TokenSequence::new(out)).unwrap();
        let want = direct_hit(pred, gold);
        assert_eq!(
            r,
            if want { 1.0 } else { 0.0 },
            "pred {pred:?} gold {gold:?}"
        );
        hits += usize::from(want);
    }
    assert!(hits > 100, "only {hits} hits");
}

#[test]
fn canonical_embeddings_are_separable() {
    let cfg = WorldConfig {
        entities: 1000,
        ..Default::default()
    };
    let world = gen_world(&cfg, 5).unwrap();
    let provider = EmbeddingProvider::new(&cfg);
    let embs: Vec<_> = world
        .entities
        .iter()
        .map(|e| {
            let v = render_view(&cfg, e, (cfg.width, cfg.height), 0.0, 0).unwrap();
            provider.embed(&v, 0.0, 0)
        })
        .collect();
    let mut min = f64::INFINITY;
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            min = min.min(embs[i].distance(&embs[j]));
        }
    }
    assert!(min > 1e-3, "closest pair at {min}");
}

struct Group {
    steps: Vec<Vec<ContextFeatures>>,
    tokens: Vec<Vec<TokenId>>,
    old: Vec<Vec<f64>>,
    reference: Vec<Vec<f64>>,
    adv: Vec<f64>,
}

impl Group {
    fn new(rng: &mut seed::Rng, p: &PolicyParams, rewards: &[f64]) -> Self {
        let perturbed = |rng: &mut seed::Rng| {
            let mut q = p.clone();
            for x in &mut q.theta {
                *x += rng.random_range(-0.3..0.3);
            }
            q
        };
        let old_p = perturbed(rng);
        let ref_p = perturbed(rng);
        let mut g = Group {
            steps: vec![],
            tokens: vec![],
            old: vec![],
            reference: vec![],
            adv: compute_advantages(rewards, 1e-6),
        };
        for _ in rewards {
            let len = rng.random_range(1..6);
            let steps: Vec<_> = (0..len).map(|_| features(rng, p.cols)).collect();
            let tokens: Vec<TokenId> = (0..len)
                .map(|_| rng.random_range(0..p.rows as TokenId))
                .collect();
            g.old.push(logprob_steps(&old_p, &steps, &tokens, 1.0));
            g.reference
                .push(logprob_steps(&ref_p, &steps, &tokens, 1.0));
            g.steps.push(steps);
            g.tokens.push(tokens);
        }
        g
    }

    fn samples(&self) -> Vec<ScoredSample<'_>> {
        (0..self.adv.len())
            .map(|i| ScoredSample {
                steps: &self.steps[i],
                tokens: &self.tokens[i],
                logprobs_old: &self.old[i],
                logprobs_ref: &self.reference[i],
                advantage: self.adv[i],
            })
            .collect()
    }
}

#[test]
fn kl_weight_enters_loss_linearly() {
    let mut rng = seed::rng(0xB7);
    for _ in 0..200 {
        let p = params(&mut rng, 8, 6, 0.8);
        let rewards: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..2.0)).collect();
        let g = Group::new(&mut rng, &p, &rewards);
        let (l0, _, _) = group_loss_and_grad(&p, &g.samples(), 0.2, 0.0, 1.0).unwrap();
        let (l1, _, stats) = group_loss_and_grad(&p, &g.samples(), 0.2, 0.04, 1.0).unwrap();
        // mean_kl averages per sequence first, the same weighting the loss uses.
        assert!(
            (l1 - l0 - 0.04 * stats.mean_kl).abs() < 1e-9,
            "{l1} {l0} {}",
            stats.mean_kl
        );
    }
}

#[test]
fn identical_rewards_move_parameters_only_through_kl() {
    let mut rng = seed::rng(0xE0);
    for _ in 0..100 {
        let p = params(&mut rng, 8, 6, 0.8);
        let r = rng.random_range(0.0..2.0);
        let g = Group::new(&mut rng, &p, &[r; 5]);
        assert!(g.adv.iter().all(|&a| a == 0.0));
        let (loss, grad, _) = group_loss_and_grad(&p, &g.samples(), 0.2, 0.0, 1.0).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&x| x == 0.0));

        let (_, g1, _) = group_loss_and_grad(&p, &g.samples(), 0.2, 0.04, 1.0).unwrap();
        let (_, g2, _) = group_loss_and_grad(&p, &g.samples(), 0.2, 0.08, 1.0).unwrap();
        assert!(g1.iter().any(|&x| x != 0.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
