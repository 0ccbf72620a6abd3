//! Brute-force reference checker for tiny single-key histories: tries every
//! subset of unacknowledged writes and every ordering of the chosen ops.

use crate::{OpKind, Record};

/// Panics above 12 candidate operations; callers keep histories tiny.
pub fn check_key_exhaustive(records: &[Record]) -> bool {
    let mut required = Vec::new();
    let mut optional = Vec::new();
    for r in records {
        let done = r.outcome == crate::Outcome::Ok && r.response.is_some();
        match (r.op, done) {
            (OpKind::Get, false) => {}
            (_, true) => required.push(r),
            (OpKind::Put, false) => optional.push(r),
        }
    }
    assert!(required.len() + optional.len() <= 12, "history too large for exhaustive check");
    for mask in 0u32..(1 << optional.len()) {
        let mut chosen = required.clone();
        for (i, r) in optional.iter().enumerate() {
            if mask & (1 << i) != 0 {
                chosen.push(r);
            }
        }
        let mut order: Vec<usize> = (0..chosen.len()).collect();
        if permute(&chosen, &mut order, 0) {
            return true;
        }
    }
    false
}

fn permute(ops: &[&Record], order: &mut Vec<usize>, k: usize) -> bool {
    if k == order.len() {
        return legal(ops, order);
    }
    for i in k..order.len() {
        order.swap(k, i);
        if permute(ops, order, k + 1) {
            return true;
        }
        order.swap(k, i);
    }
    false
}

fn legal(ops: &[&Record], order: &[usize]) -> bool {
    let end = |r: &Record| r.response.filter(|_| r.outcome == crate::Outcome::Ok).unwrap_or(u64::MAX);
    // Real-time: nothing placed later may have finished before an earlier one began.
    for (a, &i) in order.iter().enumerate() {
        for &j in &order[a + 1..] {
            if end(ops[j]) < ops[i].invoke {
                return false;
            }
        }
    }
    let mut reg: Option<&String> = None;
    for &i in order {
        let r = ops[i];
        match r.op {
            OpKind::Put => reg = r.value.as_ref(),
            OpKind::Get => {
                if r.value.as_ref() != reg {
                    return false;
                }
            }
        }
    }
    true
}
