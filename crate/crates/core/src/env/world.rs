use std::collections::VecDeque;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Action, EnvError, EpisodeConfig, Manual, Movement, Observation, Outcome, Role,
    RoleAssignment, StepResult, Vocab, SYM_AGENT, SYM_BACKGROUND, SYM_ENTITY_BASE,
};
use crate::env::registry;

const MAX_PLACEMENT_DRAWS: usize = 100;
const MIN_START_DIST_AVOID: i32 = 3;
const MIN_START_DIST_GOAL: i32 = 2;

pub type Pos = (i32, i32);

fn manhattan(a: Pos, b: Pos) -> i32 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entity {
    pub class: u8,
    pub role: Role,
    pub movement: Movement,
    pub pos: Pos,
    /// Token id of the synonym this episode uses for the entity.
    pub synonym: u16,
}

impl Entity {
    pub fn symbol(&self) -> u8 {
        SYM_ENTITY_BASE + self.class
    }
}

/// Something worth a message. Indices refer to `Episode::entities`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Reached(usize),
    Caught(usize),
    Bumped(usize),
    Beside(usize),
    Moved(usize, Action),
}

#[derive(Debug)]
pub(crate) struct Tokens {
    the: u16,
    is: u16,
    you: u16,
    beside: u16,
    moves: u16,
    caught: u16,
    bump: u16,
    into: u16,
    reach: u16,
    directions: [u16; 4],
    roles: [[Vec<u16>; 3]; 3],
    movements: [[u16; 2]; 3],
}

impl Tokens {
    fn new(v: &Vocab) -> Self {
        let seq = |words: &str| words.split(' ').map(|w| v.tok(w)).collect::<Vec<_>>();
        Self {
            the: v.tok("the"),
            is: v.tok("is"),
            you: v.tok("you"),
            beside: v.tok("beside"),
            moves: v.tok("moves"),
            caught: v.tok("caught"),
            bump: v.tok("bump"),
            into: v.tok("into"),
            reach: v.tok("reach"),
            directions: [v.tok("north"), v.tok("south"), v.tok("west"), v.tok("east")],
            roles: [
                [seq("is the goal"), seq("is the target"), seq("must be reached")],
                [seq("is deadly"), seq("is the enemy"), seq("must be avoided")],
                [seq("is harmless"), seq("is irrelevant"), seq("can be ignored")],
            ],
            movements: [
                [v.tok("stationary"), v.tok("immobile")],
                [v.tok("chasing"), v.tok("pursuing")],
                [v.tok("fleeing"), v.tok("escaping")],
            ],
        }
    }
}

#[derive(Debug)]
pub(crate) struct Shared {
    pub(crate) config: EpisodeConfig,
    pub(crate) vocab: Vocab,
    tokens: Tokens,
}

impl Shared {
    pub(crate) fn new(config: EpisodeConfig, vocab: Vocab) -> Self {
        let tokens = Tokens::new(&vocab);
        Self {
            config,
            vocab,
            tokens,
        }
    }
}

/// Full simulator state of one episode.
#[derive(Debug, Clone)]
pub struct Episode {
    shared: Arc<Shared>,
    seed: u64,
    pub(crate) agent: Pos,
    pub(crate) entities: Vec<Entity>,
    assignment: RoleAssignment,
    manual: Arc<Manual>,
    pub(crate) step: u32,
    outcome: Option<Outcome>,
    last_message: Vec<u16>,
}

fn role_index(r: Role) -> usize {
    match r {
        Role::Goal => 0,
        Role::Avoid => 1,
        Role::Neutral => 2,
    }
}

fn movement_index(m: Movement) -> usize {
    match m {
        Movement::Static => 0,
        Movement::Chase => 1,
        Movement::Flee => 2,
    }
}

const ALL_MOVEMENTS: [Movement; 3] = [Movement::Static, Movement::Chase, Movement::Flee];

pub(crate) fn reset(shared: &Arc<Shared>, seed: u64) -> Result<(Episode, Observation), EnvError> {
    let cfg = &shared.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = cfg.split.pairs(cfg.side);
    let &(goal, avoid) = pairs
        .choose(&mut rng)
        .ok_or_else(|| EnvError::Config("split side empty".into()))?;
    let others: Vec<u8> = (0..cfg.split.n_classes as u8)
        .filter(|&c| c != goal && c != avoid)
        .collect();
    let neutral = *others
        .choose(&mut rng)
        .ok_or_else(|| EnvError::Config("need a third class for the neutral entity".into()))?;
    let assignment = RoleAssignment {
        goal,
        avoid,
        neutral,
        goal_movement: *ALL_MOVEMENTS.choose(&mut rng).unwrap(),
        avoid_movement: *ALL_MOVEMENTS.choose(&mut rng).unwrap(),
        neutral_movement: *ALL_MOVEMENTS.choose(&mut rng).unwrap(),
    };

    let reg = registry();
    let mut entities: Vec<Entity> = [
        (goal, Role::Goal, assignment.goal_movement),
        (avoid, Role::Avoid, assignment.avoid_movement),
        (neutral, Role::Neutral, assignment.neutral_movement),
    ]
    .into_iter()
    .map(|(class, role, movement)| {
        let syn = reg[class as usize].synonyms.choose(&mut rng).unwrap();
        Entity {
            class,
            role,
            movement,
            pos: (0, 0),
            synonym: shared.vocab.tok(syn),
        }
    })
    .collect();
    entities.shuffle(&mut rng);

    // manual lines: "the <movement> <synonym> <role phrase>"
    // drawn even when the channel is off so the layout stays identical
    let t = &shared.tokens;
    let mut lines: Vec<Vec<u16>> = Vec::new();
    for e in &entities {
        let mut line = vec![t.the];
        line.push(t.movements[movement_index(e.movement)][rng.gen_range(0..2)]);
        line.push(e.synonym);
        line.extend_from_slice(&t.roles[role_index(e.role)][rng.gen_range(0..3)]);
        lines.push(line);
    }
    lines.shuffle(&mut rng);
    if !cfg.language.manual {
        lines.clear();
    }

    let (h, w) = (cfg.height as i32, cfg.width as i32);
    let cells: Vec<Pos> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    let mut placed = None;
    for _ in 0..MAX_PLACEMENT_DRAWS {
        let picks: Vec<Pos> = cells.choose_multiple(&mut rng, 4).copied().collect();
        let agent = picks[0];
        for (e, &p) in entities.iter_mut().zip(&picks[1..]) {
            e.pos = p;
        }
        if placement_ok(agent, &entities, h, w) {
            placed = Some(agent);
            break;
        }
    }
    let agent = placed.ok_or(EnvError::Unsolvable(MAX_PLACEMENT_DRAWS))?;

    let episode = Episode {
        shared: shared.clone(),
        seed,
        agent,
        entities,
        assignment,
        manual: Arc::new(Manual { lines }),
        step: 0,
        outcome: None,
        last_message: Vec::new(),
    };
    let obs = episode.observe();
    Ok((episode, obs))
}

fn placement_ok(agent: Pos, entities: &[Entity], h: i32, w: i32) -> bool {
    let goal = entities.iter().find(|e| e.role == Role::Goal).unwrap();
    let avoid = entities.iter().find(|e| e.role == Role::Avoid).unwrap();
    if manhattan(agent, avoid.pos) < MIN_START_DIST_AVOID || manhattan(agent, goal.pos) < MIN_START_DIST_GOAL {
        return false;
    }
    let blocked: Vec<Pos> = entities
        .iter()
        .filter(|e| e.role != Role::Goal)
        .map(|e| e.pos)
        .collect();
    bfs_distance(agent, goal.pos, h, w, |p| blocked.contains(&p)).is_some()
}

/// Shortest 4-connected path length from `from` to `to` that avoids
/// `blocked` cells (the target itself is always enterable).
pub(crate) fn bfs_distance(from: Pos, to: Pos, h: i32, w: i32, blocked: impl Fn(Pos) -> bool) -> Option<u32> {
    if from == to {
        return Some(0);
    }
    let idx = |p: Pos| (p.0 * w + p.1) as usize;
    let mut dist = vec![u32::MAX; (h * w) as usize];
    let mut queue = VecDeque::new();
    dist[idx(from)] = 0;
    queue.push_back(from);
    while let Some(p) = queue.pop_front() {
        for a in &Action::ALL[..4] {
            let (dr, dc) = a.delta();
            let q = (p.0 + dr, p.1 + dc);
            if q.0 < 0 || q.0 >= h || q.1 < 0 || q.1 >= w || dist[idx(q)] != u32::MAX {
                continue;
            }
            if q == to {
                return Some(dist[idx(p)] + 1);
            }
            if blocked(q) {
                continue;
            }
            dist[idx(q)] = dist[idx(p)] + 1;
            queue.push_back(q);
        }
    }
    None
}

fn direction_of(delta: Pos) -> Action {
    match delta {
        (-1, 0) => Action::Up,
        (1, 0) => Action::Down,
        (0, -1) => Action::Left,
        (0, 1) => Action::Right,
        _ => Action::Stay,
    }
}

impl Episode {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.shared.config
    }

    pub fn assignment(&self) -> &RoleAssignment {
        &self.assignment
    }

    pub fn agent(&self) -> Pos {
        self.agent
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn step_index(&self) -> u32 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn observe(&self) -> Observation {
        let cfg = &self.shared.config;
        let mut grid = vec![SYM_BACKGROUND; cfg.height * cfg.width];
        for e in &self.entities {
            grid[e.pos.0 as usize * cfg.width + e.pos.1 as usize] = e.symbol();
        }
        // the agent is drawn last, covering a goal or avoid entity it entered
        grid[self.agent.0 as usize * cfg.width + self.agent.1 as usize] = SYM_AGENT;
        Observation {
            height: cfg.height,
            width: cfg.width,
            grid,
            manual: self.manual.clone(),
            message: self.last_message.clone(),
            step_index: self.step,
        }
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        if self.outcome.is_some() {
            return Err(EnvError::EpisodeDone);
        }
        let was_beside: Vec<bool> = self
            .entities
            .iter()
            .map(|e| manhattan(e.pos, self.agent) == 1)
            .collect();
        self.step += 1;
        let cfg = &self.shared.config;
        let (mut outcome, mut event, first_move) = transition(
            (cfg.height as i32, cfg.width as i32),
            &mut self.agent,
            &mut self.entities,
            self.step,
            action,
        );

        if event.is_none() {
            event = self
                .entities
                .iter()
                .enumerate()
                .find(|(i, e)| !was_beside[*i] && manhattan(e.pos, self.agent) == 1)
                .map(|(i, _)| Event::Beside(i))
                .or(first_move);
        }

        if outcome.is_none() && self.step >= self.shared.config.max_steps {
            outcome = Some(Outcome::Timeout);
        }
        self.outcome = outcome;
        self.last_message = render_message(self, event.as_ref());
        let reward = match outcome {
            Some(Outcome::Win) => 1.0,
            Some(Outcome::Loss) => -1.0,
            _ => -self.shared.config.step_penalty,
        };
        Ok(StepResult {
            observation: self.observe(),
            reward,
            done: outcome.is_some(),
            win: outcome == Some(Outcome::Win),
            outcome,
        })
    }
}

/// Candidate entity moves in preference order; the row axis comes first.
fn candidate_moves(agent: Pos, e: &Entity) -> Moves {
    let dr = agent.0 - e.pos.0;
    let dc = agent.1 - e.pos.1;
    let mut out = Moves::default();
    match e.movement {
        Movement::Static => {}
        Movement::Chase => {
            if dr != 0 {
                out.push((dr.signum(), 0));
            }
            if dc != 0 {
                out.push((0, dc.signum()));
            }
        }
        Movement::Flee => {
            if dr != 0 {
                out.push((-dr.signum(), 0));
            } else {
                out.push((-1, 0));
                out.push((1, 0));
            }
            if dc != 0 {
                out.push((0, -dc.signum()));
            } else {
                out.push((0, -1));
                out.push((0, 1));
            }
        }
    }
    for m in out.as_mut_slice() {
        *m = (e.pos.0 + m.0, e.pos.1 + m.1);
    }
    out
}

#[derive(Default)]
struct Moves {
    buf: [Pos; 4],
    len: usize,
}

impl Moves {
    fn push(&mut self, p: Pos) {
        self.buf[self.len] = p;
        self.len += 1;
    }

    fn as_mut_slice(&mut self) -> &mut [Pos] {
        &mut self.buf[..self.len]
    }

    fn as_slice(&self) -> &[Pos] {
        &self.buf[..self.len]
    }
}

/// One step of board dynamics: the agent moves first, then (on even steps)
/// each entity in order. Returns the outcome, the collision event if any,
/// and the first entity movement.
pub(crate) fn transition(
    (h, w): (i32, i32),
    agent: &mut Pos,
    entities: &mut [Entity],
    step_after: u32,
    action: Action,
) -> (Option<Outcome>, Option<Event>, Option<Event>) {
    let in_bounds = |p: Pos| p.0 >= 0 && p.1 >= 0 && p.0 < h && p.1 < w;
    let mut outcome = None;
    let mut event = None;
    let (dr, dc) = action.delta();
    let target = (agent.0 + dr, agent.1 + dc);
    if target != *agent && in_bounds(target) {
        match entities.iter().position(|e| e.pos == target) {
            Some(i) => match entities[i].role {
                Role::Goal => {
                    *agent = target;
                    outcome = Some(Outcome::Win);
                    event = Some(Event::Reached(i));
                }
                Role::Avoid => {
                    *agent = target;
                    outcome = Some(Outcome::Loss);
                    event = Some(Event::Caught(i));
                }
                Role::Neutral => event = Some(Event::Bumped(i)),
            },
            None => *agent = target,
        }
    }

    // entities act on every second step
    let mut first_move = None;
    if outcome.is_none() && step_after % 2 == 0 {
        for i in 0..entities.len() {
            let from = entities[i].pos;
            let role = entities[i].role;
            let moves = candidate_moves(*agent, &entities[i]);
            for &cand in moves.as_slice() {
                if !in_bounds(cand) || entities.iter().any(|e| e.pos == cand) {
                    continue;
                }
                if cand == *agent {
                    match role {
                        Role::Neutral => continue,
                        Role::Goal => {
                            outcome = Some(Outcome::Win);
                            event = Some(Event::Reached(i));
                        }
                        Role::Avoid => {
                            outcome = Some(Outcome::Loss);
                            event = Some(Event::Caught(i));
                        }
                    }
                }
                entities[i].pos = cand;
                break;
            }
            if first_move.is_none() && entities[i].pos != from {
                let p = entities[i].pos;
                first_move = Some(Event::Moved(i, direction_of((p.0 - from.0, p.1 - from.1))));
            }
            if outcome.is_some() {
                break;
            }
        }
    }
    (outcome, event, first_move)
}

pub(crate) fn render_message(ep: &Episode, event: Option<&Event>) -> Vec<u16> {
    let Some(event) = event else {
        return Vec::new();
    };
    if !ep.shared.config.language.message {
        return Vec::new();
    }
    let t = &ep.shared.tokens;
    let syn = |i: usize| ep.entities[i].synonym;
    match *event {
        Event::Reached(i) => vec![t.you, t.reach, t.the, syn(i)],
        Event::Caught(i) => vec![t.the, syn(i), t.caught, t.you],
        Event::Bumped(i) => vec![t.you, t.bump, t.into, t.the, syn(i)],
        Event::Beside(i) => vec![t.the, syn(i), t.is, t.beside, t.you],
        Event::Moved(i, dir) => {
            let d = match dir {
                Action::Up => t.directions[0],
                Action::Down => t.directions[1],
                Action::Left => t.directions[2],
                Action::Right => t.directions[3],
                Action::Stay => return Vec::new(),
            };
            vec![t.the, syn(i), t.moves, d]
        }
    }
}
