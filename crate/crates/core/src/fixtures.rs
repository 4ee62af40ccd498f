//! Small hand-built table models used by tests.

use crate::model::TableModel;

/// Four-leaf tree with edge weights 0.9/0.1 at the root, 0.7/0.3 and
/// 0.8/0.2 along the greedy path, and a 0.95/0.05 split under the second
/// root child.
///
/// The root's 0.1 edge sits exactly on an ε = 0.1 threshold; it survives
/// only under [`TruncationRule::EpsilonInclusive`](crate::TruncationRule).
/// Leaves: `A A A` (0.504), `A A D` (0.126), `A C` (0.27), `B A` (0.1).
pub fn branching_example() -> TableModel {
    TableModel::new(&["A", "B", "C", "D", "E", "<eos>"], "<eos>")
        .and_then(|m| m.with_transition("", &[("A", 0.9), ("B", 0.1)]))
        .and_then(|m| m.with_transition("A", &[("A", 0.7), ("C", 0.3)]))
        .and_then(|m| m.with_transition("A A", &[("A", 0.8), ("D", 0.2)]))
        .and_then(|m| m.with_transition("B", &[("A", 0.95), ("E", 0.05)]))
        .and_then(|m| m.with_default(&[("<eos>", 1.0)]))
        .expect("fixture is valid")
}

/// Both root children continue with the same greedy suffix `x y z`.
pub fn merge_example() -> TableModel {
    TableModel::new(&["a", "b", "x", "y", "z", "<eos>"], "<eos>")
        .and_then(|m| m.with_transition("", &[("a", 0.6), ("b", 0.4)]))
        .and_then(|m| m.with_transition("a", &[("x", 1.0)]))
        .and_then(|m| m.with_transition("b", &[("x", 1.0)]))
        .and_then(|m| m.with_transition("a x", &[("y", 1.0)]))
        .and_then(|m| m.with_transition("b x", &[("y", 1.0)]))
        .and_then(|m| m.with_transition("a x y", &[("z", 1.0)]))
        .and_then(|m| m.with_transition("b x y", &[("z", 1.0)]))
        .and_then(|m| m.with_default(&[("<eos>", 1.0)]))
        .expect("fixture is valid")
}

/// A deterministic prefix of `prefix_len` tokens `p`, then `branch_depth`
/// binary splits (`l`/`r`, 0.5 each), then eos. Every leaf has length
/// `prefix_len + branch_depth + 1`.
pub fn shared_prefix_example(prefix_len: usize, branch_depth: usize) -> TableModel {
    let mut m = TableModel::new(&["p", "l", "r", "<eos>"], "<eos>").expect("fixture is valid");
    let mut prefix: Vec<&str> = Vec::new();
    for _ in 0..prefix_len {
        m = m.with_transition(&prefix.join(" "), &[("p", 1.0)]).expect("fixture is valid");
        prefix.push("p");
    }
    let mut frontier = vec![prefix];
    for _ in 0..branch_depth {
        let mut next = Vec::new();
        for pre in frontier {
            m = m
                .with_transition(&pre.join(" "), &[("l", 0.5), ("r", 0.5)])
                .expect("fixture is valid");
            for t in ["l", "r"] {
                let mut p = pre.clone();
                p.push(t);
                next.push(p);
            }
        }
        frontier = next;
    }
    m.with_default(&[("<eos>", 1.0)]).expect("fixture is valid")
}
