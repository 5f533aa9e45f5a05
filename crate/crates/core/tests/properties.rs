use lwf_core::fisher::{
    estimate_fisher, forgetting_confidence, rank_order, score_candidates, select_unlearning_set, ConfidenceEntry,
    Direction, FcConfig, FisherDiagonal,
};
use lwf_core::gradcheck::check_gradient;
use lwf_core::metrics::{cosine, ttr};
use lwf_core::model::argmax;
use lwf_core::tasks::Dataset;
use lwf_core::trainer::{build_schedule, periodic_loss_grad, train, Step, Strategy as Plan, StrategyConfig};
use lwf_core::{Differentiable, Example, ParamVector, Result, TinyLm, TinyLmConfig, Token};
use proptest::prelude::*;

/// A model whose loss carries a constant offset; gradients are unchanged.
#[derive(Clone)]
struct Offset {
    inner: TinyLm,
    c: f64,
}

impl Differentiable for Offset {
    type Sample = Example;

    fn params(&self) -> &ParamVector {
        self.inner.params()
    }

    fn params_mut(&mut self) -> &mut ParamVector {
        self.inner.params_mut()
    }

    fn loss(&self, x: &Example) -> Result<f64> {
        Ok(Differentiable::loss(&self.inner, x)? + self.c)
    }

    fn accumulate_grad(&self, x: &Example, scale: f64, grad: &mut [f64]) -> Result<f64> {
        Ok(Differentiable::accumulate_grad(&self.inner, x, scale, grad)? + self.c)
    }
}

fn config_strategy() -> impl Strategy<Value = TinyLmConfig> {
    (3usize..10, 1usize..4, 1usize..5, 1usize..6).prop_map(|(v, k, e, h)| TinyLmConfig {
        vocab_size: v,
        context: k,
        embed_dim: e,
        hidden_dim: h,
        pad_token: (v - 1) as Token,
    })
}

fn tokens(v: usize, min: usize, max: usize) -> impl Strategy<Value = Vec<Token>> {
    prop::collection::vec(0..v as Token, min..max)
}

/// A config, a seeded model scaled to a random magnitude, and one example.
fn model_and_example() -> impl Strategy<Value = (TinyLm, Example)> {
    (config_strategy(), any::<u64>(), 1.0f64..12.0).prop_flat_map(|(cfg, seed, scale)| {
        let v = cfg.vocab_size;
        (tokens(v, 1, 6), tokens(v, 1, 4)).prop_map(move |(p, a)| {
            let mut m = TinyLm::init(cfg, seed).unwrap();
            m.params_mut().as_mut_slice().iter_mut().for_each(|w| *w *= scale);
            (m, Example::new(p, a, "d"))
        })
    })
}

fn examples(v: usize, n: usize) -> impl Strategy<Value = Vec<Example>> {
    prop::collection::vec((tokens(v, 1, 5), tokens(v, 1, 3)), 1..n)
        .prop_map(|xs| xs.into_iter().map(|(p, a)| Example::new(p, a, "d")).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn analytic_gradient_matches_finite_differences((m, x) in model_and_example()) {
        let c = check_gradient(&m, &x, 1e-4).unwrap();
        prop_assert!(c.max_rel_error < 1e-4, "{c:?}");
    }

    #[test]
    fn loss_scores_answer_positions_only((m, x) in model_and_example()) {
        // direct evaluation from forward() over the answer positions
        let mut seq = x.prompt.clone();
        let mut expect = 0.0;
        for &t in &x.answer {
            expect -= m.forward(&m.window(&seq)).unwrap()[t as usize].ln();
            seq.push(t);
        }
        expect /= x.answer.len() as f64;
        let got = m.loss(&x).unwrap();
        prop_assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }

    #[test]
    fn prompt_tokens_outside_every_window_do_not_matter(
        (m, x) in model_and_example(),
        filler in prop::collection::vec(0u32..3, 1..6),
    ) {
        let k = m.config().context;
        let mut longer = filler.clone();
        longer.extend(std::iter::repeat_n(0, k));
        longer.extend(&x.prompt);
        let mut other = vec![1; filler.len()];
        other.extend(std::iter::repeat_n(0, k));
        other.extend(&x.prompt);
        let a = m.loss(&Example::new(longer, x.answer.clone(), "d")).unwrap();
        let b = m.loss(&Example::new(other, x.answer.clone(), "d")).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact((m, _x) in model_and_example()) {
        let back = TinyLm::from_bytes(&m.to_bytes()).unwrap();
        prop_assert_eq!(back.config(), m.config());
        for (a, b) in back.params().as_slice().iter().zip(m.params().as_slice()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn initialization_is_deterministic(cfg in config_strategy(), seed in any::<u64>()) {
        prop_assert_eq!(TinyLm::init(cfg, seed).unwrap(), TinyLm::init(cfg, seed).unwrap());
    }

    #[test]
    fn greedy_decode_is_pure((m, x) in model_and_example(), max in 1usize..6) {
        let stop = 0;
        let a = m.greedy_decode(&x.prompt, max, stop).unwrap();
        prop_assert_eq!(&a, &m.greedy_decode(&x.prompt, max, stop).unwrap());
        prop_assert!(a.len() <= max);
    }

    #[test]
    fn fc_ignores_constant_loss_offsets(
        (m, x) in model_and_example(),
        c in -50.0f64..50.0,
        star_seed in any::<u64>(),
    ) {
        let star = TinyLm::init(*m.config(), star_seed).unwrap();
        let fisher = estimate_fisher(&star, std::slice::from_ref(&x)).unwrap();
        let cfg = FcConfig::default();
        let a = forgetting_confidence(&x, &m, star.params(), &fisher, &cfg).unwrap();
        let shifted = Offset { inner: m.clone(), c };
        let b = forgetting_confidence(&x, &shifted, star.params(), &fisher, &cfg).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn fisher_scaling_scales_fc_and_keeps_selection(
        (m, _x) in model_and_example(),
        c in 0.01f64..100.0,
        steps in 1usize..4,
    ) {
        let v = m.vocab_size() as Token;
        let cands: Vec<Example> = (0..12)
            .map(|i| Example::new(vec![i % v, (i * 7 + 1) % v], vec![(i * 3) % v], "d"))
            .collect();
        let star = TinyLm::init(*m.config(), 99).unwrap();
        let fisher = estimate_fisher(&star, &cands).unwrap();
        let cfg = FcConfig { steps, ..Default::default() };
        let a = score_candidates(&cands, &m, star.params(), &fisher, &cfg).unwrap();
        let b = score_candidates(&cands, &m, star.params(), &fisher.scaled(c).unwrap(), &cfg).unwrap();
        for (ea, eb) in a.iter().zip(&b) {
            prop_assert!(ea.score >= 0.0);
            prop_assert!((eb.score - c * ea.score).abs() <= 1e-12 * (c * ea.score).abs().max(1e-300));
        }
        let ds = Dataset::new("d", cands).unwrap();
        let sa = select_unlearning_set(&ds, &a, 40, 7, Direction::Highest).unwrap();
        let sb = select_unlearning_set(&ds, &b, 40, 7, Direction::Highest).unwrap();
        prop_assert_eq!(sa.indices, sb.indices);
    }

    #[test]
    fn fc_is_nonnegative(
        weights in prop::collection::vec(0.0f64..1e3, 1..30),
        theta in prop::collection::vec(-5.0f64..5.0, 30),
        star in prop::collection::vec(-5.0f64..5.0, 30),
    ) {
        let d = weights.len();
        let f = FisherDiagonal::new(weights).unwrap();
        let v = lwf_core::fisher::fisher_distance(
            &ParamVector::new(theta[..d].to_vec()),
            &ParamVector::new(star[..d].to_vec()),
            &f,
        ).unwrap();
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn fisher_is_order_invariant(
        (m, _x) in model_and_example(),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let v = m.vocab_size() as Token;
        let data: Vec<Example> = (0..150)
            .map(|i| Example::new(vec![i % v, (i / 3) % v], vec![(i * 5 + 2) % v], "d"))
            .collect();
        let mut shuffled = data.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = estimate_fisher(&m, &data).unwrap();
        let b = estimate_fisher(&m, &shuffled).unwrap();
        for (x, y) in a.weights().iter().zip(b.weights()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300), "{x} vs {y}");
        }
    }

    #[test]
    fn selection_is_deterministic_and_respects_the_rule(
        scores in prop::collection::vec(-3i32..3, 1..40),
        d_l in 0usize..200,
    ) {
        let entries: Vec<ConfidenceEntry> = scores
            .iter()
            .enumerate()
            .map(|(i, s)| ConfidenceEntry { example_index: i, score: *s as f64 })
            .collect();
        let ds = Dataset::new(
            "d",
            (0..scores.len()).map(|_| Example::new(vec![0], vec![0], "d")).collect(),
        ).unwrap();
        let a = select_unlearning_set(&ds, &entries, d_l, 7, Direction::Highest).unwrap();
        let b = select_unlearning_set(&ds, &entries, d_l, 7, Direction::Highest).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len() + a.shortfall, d_l / 7);
        // every selected score dominates every unselected score
        let chosen: std::collections::HashSet<usize> = a.indices.iter().copied().collect();
        let min_chosen = a.scores.iter().copied().fold(f64::INFINITY, f64::min);
        for e in &entries {
            if !chosen.contains(&e.example_index) {
                prop_assert!(e.score <= min_chosen);
            }
        }
        prop_assert_eq!(&rank_order(&entries, Direction::Highest)[..a.len()], a.indices.as_slice());
    }

    #[test]
    fn periodic_windows_hold_one_unlearn(
        d_l in 1usize..120,
        d_u in 0usize..30,
        n_u in 1usize..10,
        epochs in 1usize..4,
        seed in any::<u64>(),
    ) {
        let cfg = StrategyConfig { n_u, epochs, seed, ..Default::default() };
        let s = build_schedule(&cfg, d_l, d_u).unwrap();
        let quota = epochs * (d_l / n_u).min(d_u);
        prop_assert_eq!(s.unlearn_count(), quota);
        let last_u = s.steps.iter().rposition(Step::is_unlearn);
        if let Some(end) = last_u {
            for w in s.steps[..=end].windows(n_u + 1) {
                prop_assert_eq!(w.iter().filter(|st| st.is_unlearn()).count(), 1);
            }
        }
    }

    #[test]
    fn periodic_loss_gradient_is_linear(
        (m, _x) in model_and_example(),
        batch in examples(3, 6),
        u in examples(3, 2),
        beta in 0.0f64..1.0,
    ) {
        let (_, g) = periodic_loss_grad(&batch, u.first(), &m, beta).unwrap();
        let mut expect = vec![0.0; g.dim()];
        for x in &batch {
            let gx = m.grad(x).unwrap();
            for (e, v) in expect.iter_mut().zip(gx.as_slice()) { *e += v; }
        }
        let gu = m.grad(&u[0]).unwrap();
        for (e, v) in expect.iter_mut().zip(gu.as_slice()) { *e -= beta * v; }
        for (a, b) in g.as_slice().iter().zip(&expect) {
            prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn degenerate_runs_match_vanilla_bit_for_bit(
        (m, _x) in model_and_example(),
        d_l in examples(3, 30),
        d_u in examples(3, 6),
        seed in any::<u64>(),
        strategy in prop::sample::select(vec![Plan::Periodic, Plan::Ahead, Plan::Random]),
    ) {
        let cfg = StrategyConfig { strategy, n_u: 2, seed, ..Default::default() };
        let (vanilla, _) = train(&m, &d_l, &[], &cfg.vanilla()).unwrap();
        let (zero_beta, _) = train(&m, &d_l, &d_u, &StrategyConfig { beta: 0.0, ..cfg }).unwrap();
        let (no_u, _) = train(&m, &d_l, &[], &cfg).unwrap();
        let (no_epochs, log) = train(&m, &d_l, &d_u, &StrategyConfig { epochs: 0, ..cfg }).unwrap();
        let bits = |p: &TinyLm| p.params().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&zero_beta), bits(&vanilla));
        prop_assert_eq!(bits(&no_u), bits(&vanilla));
        prop_assert_eq!(bits(&no_epochs), bits(&m));
        prop_assert!(log.entries.is_empty());
    }

    #[test]
    fn metric_ranges(
        a in prop::collection::vec(-10.0f64..10.0, 1..8),
        b in prop::collection::vec(-10.0f64..10.0, 8),
        responses in prop::collection::vec(prop::collection::vec(0u32..20, 0..6), 1..6),
        values in prop::collection::vec(-5.0f64..5.0, 1..10),
    ) {
        let c = cosine(&a, &b[..a.len()]);
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c));
        prop_assert_eq!(c.to_bits(), cosine(&a, &b[..a.len()]).to_bits());
        if responses.iter().any(|r| !r.is_empty()) {
            let t = ttr(&responses).unwrap();
            prop_assert!(t > 0.0 && t <= 1.0);
        }
        let i = argmax(&values);
        prop_assert!(values.iter().all(|v| *v <= values[i]));
    }
}
