//! Full-information planner used to produce expert demonstrations.

use std::collections::{HashSet, VecDeque};

use super::world::{transition, Entity, Episode, Pos};
use super::{Action, Outcome, Role};

/// Upper bound on planner expansions per call.
const MAX_EXPANSIONS: usize = 200_000;

fn manhattan(a: Pos, b: Pos) -> i32 {
    (a.0 - b.0).abs() + (a.1 - b.1).abs()
}

#[derive(Clone, Copy)]
struct Node {
    agent: Pos,
    entities: [Entity; 3],
    step: u32,
    first: Action,
}

fn key(n: &Node) -> u64 {
    let mut k = (n.step % 2) as u64;
    for p in std::iter::once(n.agent).chain(n.entities.iter().map(|e| e.pos)) {
        k = (k << 16) | ((p.0 as u64) << 8) | p.1 as u64;
    }
    k
}

/// First action of a shortest winning action sequence, found by
/// breadth-first search over the deterministic simulator. Paths through a
/// loss are pruned and ties resolve in `Action::ALL` order. When no win is
/// reachable before the step limit, the non-losing action that maximizes
/// distance to the avoid entity is returned.
pub fn expert_action(ep: &Episode) -> Action {
    let cfg = ep.config();
    let dims = (cfg.height as i32, cfg.width as i32);
    let remaining = cfg.max_steps.saturating_sub(ep.step_index());
    let start = Node {
        agent: ep.agent(),
        entities: [ep.entities()[0], ep.entities()[1], ep.entities()[2]],
        step: ep.step_index(),
        first: Action::Stay,
    };
    let mut seen = HashSet::new();
    seen.insert(key(&start));
    let mut queue = VecDeque::new();
    let mut fallback: Option<(i32, Action)> = None;

    for &action in &Action::ALL {
        let mut n = start;
        n.first = action;
        n.step += 1;
        let (outcome, _, _) = transition(dims, &mut n.agent, &mut n.entities, n.step, action);
        match outcome {
            Some(Outcome::Win) => return action,
            Some(Outcome::Loss) => continue,
            _ => {}
        }
        let avoid = n.entities.iter().find(|e| e.role == Role::Avoid).unwrap().pos;
        let spread = manhattan(n.agent, avoid);
        if fallback.is_none_or(|(d, _)| spread > d) {
            fallback = Some((spread, action));
        }
        if remaining > 1 && seen.insert(key(&n)) {
            queue.push_back(n);
        }
    }

    let mut expansions = 0;
    while let Some(node) = queue.pop_front() {
        expansions += 1;
        if expansions > MAX_EXPANSIONS {
            break;
        }
        for &action in &Action::ALL {
            let mut n = node;
            n.step += 1;
            let (outcome, _, _) = transition(dims, &mut n.agent, &mut n.entities, n.step, action);
            match outcome {
                Some(Outcome::Win) => return node.first,
                Some(Outcome::Loss) => continue,
                _ => {}
            }
            if n.step - start.step < remaining && seen.insert(key(&n)) {
                queue.push_back(n);
            }
        }
    }
    fallback.map(|(_, a)| a).unwrap_or(Action::Stay)
}
