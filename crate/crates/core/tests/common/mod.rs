#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use feedloop::policy::ScriptedPolicy;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Ok,
    Fail,
    Answer,
}

/// A generated script plus the tree it encodes, kept for the oracle.
#[derive(Debug, Clone)]
pub struct ScriptTree {
    pub actions: BTreeMap<String, (Kind, String)>,
    pub states: BTreeMap<String, Vec<String>>,
}

impl ScriptTree {
    pub fn to_json(&self) -> String {
        let actions: serde_json::Map<String, Value> =
            self.actions.iter().map(|(k, (_, text))| (k.clone(), json!(text))).collect();
        json!({ "actions": actions, "states": self.states }).to_string()
    }

    pub fn policy(&self) -> ScriptedPolicy {
        ScriptedPolicy::from_json(&self.to_json()).expect("generated scripts are valid")
    }
}

fn action_text(kind: Kind, id: usize) -> String {
    match kind {
        Kind::Ok => format!("Try {id}.\n<|execute|>\nv{id} = {id}\nprint(v{id})\n<|execute_end|>"),
        Kind::Fail => format!("Try {id}.\n<|execute|>\nv{id} = {id} / 0\n<|execute_end|>"),
        Kind::Answer => format!("Done.\n<|im_start|>answer\n{id}"),
    }
}

fn child_key(path: &str, label: &str) -> String {
    if path.is_empty() {
        label.to_string()
    } else {
        format!("{path}/{label}")
    }
}

/// Random tree-shaped script: up to `max_actions` candidates per state and at
/// most `max_depth` actions along any path. With `replans`, some states also
/// get a continuation after an abandoned attempt.
pub fn random_tree(rng: &mut ChaCha8Rng, max_actions: usize, max_depth: usize, replans: bool) -> ScriptTree {
    let mut tree = ScriptTree { actions: BTreeMap::new(), states: BTreeMap::new() };
    let mut queue = VecDeque::from([(String::new(), 0usize)]);
    while let Some((path, depth)) = queue.pop_front() {
        if depth >= max_depth {
            continue;
        }
        let k = rng.gen_range(0..=max_actions);
        if k == 0 && !path.is_empty() {
            continue;
        }
        let mut labels = Vec::new();
        for _ in 0..k.max(1) {
            let id = tree.actions.len();
            let kind = match rng.gen_range(0..10) {
                0..=4 => Kind::Ok,
                5..=7 => Kind::Fail,
                _ => Kind::Answer,
            };
            let label = format!("a{id}");
            tree.actions.insert(label.clone(), (kind, action_text(kind, id)));
            if kind != Kind::Answer {
                queue.push_back((child_key(&path, &label), depth + 1));
            }
            labels.push(label);
        }
        if replans && rng.gen_bool(0.5) {
            queue.push_back((child_key(&path, "replan"), depth + 1));
        }
        tree.states.insert(path, labels);
    }
    tree
}

/// Shortest number of actions to an answer, searching the script itself.
pub fn bfs_answer_depth(tree: &ScriptTree) -> Option<usize> {
    let mut queue = VecDeque::from([(String::new(), 0usize)]);
    while let Some((path, depth)) = queue.pop_front() {
        let Some(labels) = tree.states.get(&path) else { continue };
        for label in labels {
            match tree.actions[label].0 {
                Kind::Answer => return Some(depth + 1),
                _ => queue.push_back((child_key(&path, label), depth + 1)),
            }
        }
    }
    None
}
