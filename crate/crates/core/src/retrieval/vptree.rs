//! Vantage-point tree over L1. Pruning keeps a small slack so that results
//! equal a linear scan bit for bit, ties included.

use super::{l1_distance, rank_cmp, DbEntry};

const LEAF: usize = 8;

#[derive(Debug)]
enum Node {
    Leaf(Vec<usize>),
    Split { vp: usize, mu: f64, inside: Box<Node>, outside: Box<Node> },
}

#[derive(Debug)]
pub(super) struct VpTree {
    root: Option<Node>,
}

impl VpTree {
    pub(super) fn build(entries: &[DbEntry]) -> Self {
        let idx: Vec<usize> = (0..entries.len()).collect();
        Self { root: (!idx.is_empty()).then(|| build(entries, idx)) }
    }

    pub(super) fn knn(&self, entries: &[DbEntry], q: &[f32], k: usize) -> Vec<(f64, usize)> {
        let mut best = Vec::with_capacity(k + 1);
        if let (Some(root), true) = (&self.root, k > 0) {
            search(root, entries, q, k, &mut best);
        }
        best
    }
}

fn build(entries: &[DbEntry], mut idx: Vec<usize>) -> Node {
    if idx.len() <= LEAF {
        return Node::Leaf(idx);
    }
    // middle element as vantage point keeps the build deterministic
    let vp = idx.swap_remove(idx.len() / 2);
    let mut d: Vec<(f64, usize)> = idx.iter().map(|&i| (l1_distance(&entries[vp].signature, &entries[i].signature), i)).collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let half = d.len() / 2;
    let mu = d[half].0;
    let inside = d[..half].iter().map(|p| p.1).collect();
    let outside = d[half..].iter().map(|p| p.1).collect();
    Node::Split { vp, mu, inside: Box::new(build(entries, inside)), outside: Box::new(build(entries, outside)) }
}

fn offer(entries: &[DbEntry], k: usize, best: &mut Vec<(f64, usize)>, cand: (f64, usize)) {
    if best.len() == k && rank_cmp(entries, &cand, best.last().expect("k > 0")).is_ge() {
        return;
    }
    let at = best.partition_point(|b| rank_cmp(entries, b, &cand).is_lt());
    best.insert(at, cand);
    best.truncate(k);
}

fn tau(best: &[(f64, usize)], k: usize) -> f64 {
    if best.len() < k { f64::INFINITY } else { best[k - 1].0 }
}

fn search(node: &Node, entries: &[DbEntry], q: &[f32], k: usize, best: &mut Vec<(f64, usize)>) {
    match node {
        Node::Leaf(items) => {
            for &i in items {
                offer(entries, k, best, (l1_distance(&entries[i].signature, q), i));
            }
        }
        Node::Split { vp, mu, inside, outside } => {
            let d = l1_distance(&entries[*vp].signature, q);
            offer(entries, k, best, (d, *vp));
            let slack = |t: f64| 1e-9 * (d + mu + if t.is_finite() { t } else { 0.0 }) + 1e-12;
            let (first, second, near_inside) = if d <= *mu { (inside, outside, true) } else { (outside, inside, false) };
            let bound = |inside_child: bool| if inside_child { d - mu } else { mu - d };
            let t = tau(best, k);
            if bound(near_inside) <= t + slack(t) {
                search(first, entries, q, k, best);
            }
            let t = tau(best, k);
            if bound(!near_inside) <= t + slack(t) {
                search(second, entries, q, k, best);
            }
        }
    }
}
