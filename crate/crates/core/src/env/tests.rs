use super::*;

fn world() -> GridWorld {
    let split = generate_split(5, 0.25, 0).unwrap();
    GridWorld::new(EpisodeConfig::new(split, SplitSide::Train)).unwrap()
}

/// Episode with a hand-placed layout. Entities are re-ordered as
/// `[goal, avoid, neutral]`.
fn layout(
    seed: u64,
    agent: Pos,
    goal: (Pos, Movement),
    avoid: (Pos, Movement),
    neutral: (Pos, Movement),
) -> Episode {
    let w = world();
    let (mut ep, _) = w.reset(seed).unwrap();
    ep.entities.sort_by_key(|e| match e.role {
        Role::Goal => 0,
        Role::Avoid => 1,
        Role::Neutral => 2,
    });
    ep.agent = agent;
    for (e, (p, m)) in ep.entities.iter_mut().zip([goal, avoid, neutral]) {
        e.pos = p;
        e.movement = m;
    }
    ep
}

#[test]
fn reset_is_deterministic() {
    let w = world();
    for seed in 0..20 {
        let (_, a) = w.reset(seed).unwrap();
        let (_, b) = w.reset(seed).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn reset_places_four_symbols_and_three_lines() {
    let w = world();
    for seed in 0..200 {
        let (ep, obs) = w.reset(seed).unwrap();
        assert_eq!(obs.grid.len(), 64);
        assert_eq!(obs.grid.iter().filter(|&&s| s != SYM_BACKGROUND).count(), 4);
        assert_eq!(obs.grid.iter().filter(|&&s| s == SYM_AGENT).count(), 1);
        assert!(obs.grid.iter().all(|&s| (s as usize) < w.vocab().n_symbols()));
        assert_eq!(obs.manual.lines.len(), 3);
        assert!(obs.message.is_empty());
        // every entity described by exactly one line
        for e in ep.entities() {
            assert_eq!(obs.manual.lines.iter().filter(|l| l.contains(&e.synonym)).count(), 1);
        }
    }
}

#[test]
fn message_off_keeps_message_empty() {
    let split = generate_split(5, 0.25, 0).unwrap();
    let mut cfg = EpisodeConfig::new(split, SplitSide::Train);
    cfg.language.message = false;
    let w = GridWorld::new(cfg).unwrap();
    for seed in 0..30 {
        let (mut ep, obs) = w.reset(seed).unwrap();
        assert!(obs.message.is_empty());
        while !ep.is_done() {
            let a = expert_action(&ep);
            let r = ep.step(a).unwrap();
            assert!(r.observation.message.is_empty());
        }
    }
}

#[test]
fn ablating_language_leaves_dynamics_untouched() {
    let split = generate_split(5, 0.25, 0).unwrap();
    let on = GridWorld::new(EpisodeConfig::new(split.clone(), SplitSide::Train)).unwrap();
    let mut cfg = EpisodeConfig::new(split, SplitSide::Train);
    cfg.language = LanguageChannels { manual: false, message: false };
    let off = GridWorld::new(cfg).unwrap();
    for seed in 0..50 {
        let (mut a, oa) = on.reset(seed).unwrap();
        let (mut b, ob) = off.reset(seed).unwrap();
        assert_eq!(oa.grid, ob.grid);
        assert!(ob.manual.lines.is_empty());
        let mut k = 0usize;
        while !a.is_done() {
            let act = Action::ALL[(seed as usize + k * 7) % 5];
            k += 1;
            let ra = a.step(act).unwrap();
            let rb = b.step(act).unwrap();
            assert_eq!(ra.observation.grid, rb.observation.grid);
            assert_eq!((ra.reward, ra.done, ra.win), (rb.reward, rb.done, rb.win));
        }
    }
}

#[test]
fn agent_moves_up_with_step_penalty() {
    let mut ep = layout(
        1,
        (2, 2),
        ((7, 7), Movement::Static),
        ((7, 0), Movement::Static),
        ((0, 7), Movement::Static),
    );
    let r = ep.step(Action::Up).unwrap();
    assert_eq!(ep.agent(), (1, 2));
    assert_eq!(r.reward, -0.01);
    assert!(!r.done);
    assert_eq!(r.observation.cell(1, 2), SYM_AGENT);
}

#[test]
fn walls_clamp() {
    let mut ep = layout(
        1,
        (0, 0),
        ((7, 7), Movement::Static),
        ((7, 0), Movement::Static),
        ((0, 7), Movement::Static),
    );
    ep.step(Action::Up).unwrap();
    ep.step(Action::Left).unwrap();
    assert_eq!(ep.agent(), (0, 0));
}

#[test]
fn reaching_static_goal_wins() {
    let mut ep = layout(
        2,
        (3, 3),
        ((2, 3), Movement::Static),
        ((7, 7), Movement::Static),
        ((0, 7), Movement::Static),
    );
    let r = ep.step(Action::Up).unwrap();
    assert_eq!(r.reward, 1.0);
    assert!(r.done && r.win);
    assert_eq!(r.outcome, Some(Outcome::Win));
    assert!(matches!(ep.step(Action::Stay), Err(EnvError::EpisodeDone)));
    // message names the goal with its manual synonym
    let goal_syn = ep.entities()[0].synonym;
    assert_eq!(r.observation.message, vec![
        w_tok("you"), w_tok("reach"), w_tok("the"), goal_syn
    ]);
}

fn w_tok(word: &str) -> u16 {
    Vocab::new(5).unwrap().token_id(word).unwrap()
}

#[test]
fn touching_avoid_loses() {
    let mut ep = layout(
        3,
        (3, 3),
        ((7, 7), Movement::Static),
        ((3, 4), Movement::Static),
        ((0, 7), Movement::Static),
    );
    let r = ep.step(Action::Right).unwrap();
    assert_eq!(r.reward, -1.0);
    assert!(r.done && !r.win);
    assert_eq!(r.outcome, Some(Outcome::Loss));
}

#[test]
fn chaser_prefers_row_axis_and_flee_moves_away() {
    let mut ep = layout(
        4,
        (4, 4),
        ((0, 0), Movement::Chase),
        ((7, 7), Movement::Flee),
        ((0, 7), Movement::Static),
    );
    ep.step(Action::Stay).unwrap();
    // odd step: entities hold still
    assert_eq!(ep.entities()[0].pos, (0, 0));
    ep.step(Action::Stay).unwrap();
    // chaser at (0,0) toward (4,4): row axis first
    assert_eq!(ep.entities()[0].pos, (1, 0));
    // flee from (7,7): dr=-3 -> row +1 is out of bounds, col +1 out of bounds -> stays
    assert_eq!(ep.entities()[1].pos, (7, 7));
    assert_eq!(ep.entities()[2].pos, (0, 7));
}

#[test]
fn neutral_blocks_agent() {
    let mut ep = layout(
        5,
        (3, 3),
        ((7, 7), Movement::Static),
        ((7, 0), Movement::Static),
        ((3, 2), Movement::Static),
    );
    let r = ep.step(Action::Left).unwrap();
    assert_eq!(ep.agent(), (3, 3));
    assert!(!r.done);
    assert_eq!(r.observation.message[..3], [w_tok("you"), w_tok("bump"), w_tok("into")]);
}

#[test]
fn beside_message_for_newly_adjacent_entity() {
    let mut ep = layout(
        6,
        (3, 3),
        ((7, 7), Movement::Static),
        ((3, 5), Movement::Static),
        ((0, 7), Movement::Static),
    );
    let r = ep.step(Action::Stay).unwrap();
    assert!(r.observation.message.is_empty(), "nothing happened");
    let r = ep.step(Action::Right).unwrap();
    let syn = ep.entities()[1].synonym;
    assert_eq!(r.observation.message, vec![w_tok("the"), syn, w_tok("is"), w_tok("beside"), w_tok("you")]);
    let msg = render_message(&ep, None);
    assert!(msg.is_empty());
}

#[test]
fn timeout_ends_episode() {
    let mut ep = layout(
        7,
        (0, 0),
        ((7, 7), Movement::Static),
        ((7, 0), Movement::Static),
        ((0, 7), Movement::Static),
    );
    let mut last = None;
    for _ in 0..64 {
        last = Some(ep.step(Action::Stay).unwrap());
    }
    let r = last.unwrap();
    assert!(r.done && !r.win);
    assert_eq!(r.outcome, Some(Outcome::Timeout));
    assert_eq!(r.reward, -0.01);
}

#[test]
fn replay_is_deterministic() {
    let w = world();
    let run = |seed| {
        let (mut ep, _) = w.reset(seed).unwrap();
        let mut out = Vec::new();
        let mut k = 0;
        while !ep.is_done() {
            k += 1;
            out.push(ep.step(Action::ALL[(k * 3 + seed as usize) % 5]).unwrap());
        }
        out
    };
    for seed in 0..20 {
        assert_eq!(run(seed), run(seed));
    }
}

#[test]
fn expert_steps_straight_up_to_goal() {
    let ep = layout(
        8,
        (4, 4),
        ((3, 4), Movement::Static),
        ((7, 7), Movement::Static),
        ((0, 0), Movement::Static),
    );
    assert_eq!(expert_action(&ep), Action::Up);
}

/// Shortest winning action sequences by exhaustive search over the true
/// simulator, returning the set of first actions that start one.
fn brute_force_first_actions(ep: &Episode, max_depth: usize) -> Vec<Action> {
    fn wins_within(ep: &Episode, depth: usize) -> bool {
        if depth == 0 {
            return false;
        }
        Action::ALL.iter().any(|&a| {
            let mut n = ep.clone();
            match n.step(a).unwrap().outcome {
                Some(Outcome::Win) => true,
                Some(_) => false,
                None => wins_within(&n, depth - 1),
            }
        })
    }
    for depth in 1..=max_depth {
        let firsts: Vec<Action> = Action::ALL
            .iter()
            .copied()
            .filter(|&a| {
                let mut n = ep.clone();
                match n.step(a).unwrap().outcome {
                    Some(Outcome::Win) => true,
                    Some(_) => false,
                    None => wins_within(&n, depth - 1),
                }
            })
            .collect();
        if !firsts.is_empty() {
            return firsts;
        }
    }
    Vec::new()
}

#[test]
fn expert_detours_around_threat() {
    // goal two rows up with the avoid entity parked on the straight path
    let mut ep = layout(
        9,
        (4, 4),
        ((2, 4), Movement::Static),
        ((3, 4), Movement::Static),
        ((0, 0), Movement::Static),
    );
    ep.step = 1;
    let mut up = ep.clone();
    assert_eq!(up.step(Action::Up).unwrap().outcome, Some(Outcome::Loss));
    let expert = expert_action(&ep);
    let oracle = brute_force_first_actions(&ep, 6);
    eprintln!("expert {expert:?}, shortest-safe first actions {oracle:?}");
    assert!(matches!(expert, Action::Left | Action::Right), "got {expert:?}");
    assert!(oracle.contains(&expert), "expert {expert:?} not in {oracle:?}");
    assert!(!oracle.contains(&Action::Up));
}

#[test]
fn expert_wins_nearly_every_episode() {
    let w = world();
    let mut wins = 0;
    let mut steps = 0u32;
    for seed in 0..1000 {
        let (mut ep, _) = w.reset(seed).unwrap();
        while !ep.is_done() {
            ep.step(expert_action(&ep)).unwrap();
        }
        steps += ep.step_index();
        wins += (ep.outcome() == Some(Outcome::Win)) as u32;
    }
    eprintln!("expert wins {wins}/1000, mean length {:.2}", steps as f64 / 1000.0);
    assert!(wins >= 990, "expert won {wins}/1000");
}

#[test]
fn eval_pairs_never_appear_in_train_episodes() {
    let w = world();
    let eval_pairs = w.config().split.eval.clone();
    for seed in 0..500 {
        let (ep, _) = w.reset(seed).unwrap();
        assert!(!eval_pairs.contains(&ep.assignment().pair()));
    }
    let e = w.with_side(SplitSide::Eval).unwrap();
    for seed in 0..100 {
        let (ep, _) = e.reset(seed).unwrap();
        assert!(eval_pairs.contains(&ep.assignment().pair()));
    }
}

#[test]
fn every_reset_is_solvable() {
    let w = world();
    for seed in 0..300 {
        let (ep, _) = w.reset(seed).unwrap();
        let goal = ep.entities().iter().find(|e| e.role == Role::Goal).unwrap().pos;
        let blocked: Vec<Pos> = ep.entities().iter().filter(|e| e.role != Role::Goal).map(|e| e.pos).collect();
        assert!(world::bfs_distance(ep.agent(), goal, 8, 8, |p| blocked.contains(&p)).is_some());
    }
}

#[test]
fn config_validation() {
    let split = generate_split(5, 0.25, 0).unwrap();
    let mut cfg = EpisodeConfig::new(split.clone(), SplitSide::Train);
    cfg.gamma = 1.0;
    assert!(cfg.validate().is_err());
    let mut cfg = EpisodeConfig::new(split, SplitSide::Train);
    cfg.max_steps = 31;
    assert!(cfg.validate().is_err());
    cfg.max_steps = 32;
    assert!(cfg.validate().is_ok());
}
