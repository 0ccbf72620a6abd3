//! Linearizability checking for single-key register histories.
//!
//! Each key is checked on its own. The search linearizes one operation at a
//! time, choosing only operations that no remaining operation strictly
//! precedes in real time, and memoizes (linearized set, register value)
//! states it has already explored. Operations that never got a response may
//! take effect at any point after their invocation, or never.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

pub mod exhaustive;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Put,
    Get,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ok,
    Redirected,
    Timeout,
}

/// One logical client operation. For a completed Get, `value` is what it
/// returned; for a Put, the value written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub client: u64,
    pub request_id: u64,
    pub op: OpKind,
    pub key: String,
    #[serde(default)]
    pub value: Option<String>,
    pub invoke: u64,
    #[serde(default)]
    pub response: Option<u64>,
    pub outcome: Outcome,
}

impl Record {
    fn completed(&self) -> bool {
        self.outcome == Outcome::Ok && self.response.is_some()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum HistoryError {
    #[error("record {index}: response {response} before invoke {invoke}")]
    ResponseBeforeInvoke { index: usize, invoke: u64, response: u64 },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct History {
    pub records: Vec<Record>,
}

impl History {
    /// Builds a history, collapsing duplicate sends of one request into a
    /// single record with the earliest invoke and earliest successful
    /// response.
    pub fn new(records: Vec<Record>) -> Result<Self, HistoryError> {
        for (index, r) in records.iter().enumerate() {
            if let Some(resp) = r.response {
                if resp < r.invoke {
                    return Err(HistoryError::ResponseBeforeInvoke { index, invoke: r.invoke, response: resp });
                }
            }
        }
        let mut merged: Vec<Record> = Vec::new();
        let mut at: HashMap<(u64, u64), usize> = HashMap::new();
        for r in records {
            match at.get(&(r.client, r.request_id)) {
                None => {
                    at.insert((r.client, r.request_id), merged.len());
                    merged.push(r);
                }
                Some(&i) => {
                    let cur = &mut merged[i];
                    cur.invoke = cur.invoke.min(r.invoke);
                    if r.completed() && cur.completed() {
                        if r.response < cur.response {
                            cur.response = r.response;
                            cur.value = r.value;
                        }
                    } else if r.completed() {
                        cur.response = r.response;
                        cur.value = r.value;
                        cur.outcome = Outcome::Ok;
                    }
                }
            }
        }
        Ok(History { records: merged })
    }

    pub fn from_jsonl(reader: impl BufRead) -> Result<Self, HistoryError> {
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| HistoryError::Parse { line: i + 1, msg: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record =
                serde_json::from_str(&line).map_err(|e| HistoryError::Parse { line: i + 1, msg: e.to_string() })?;
            records.push(r);
        }
        History::new(records)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn by_key(&self) -> BTreeMap<&str, Vec<&Record>> {
        let mut m: BTreeMap<&str, Vec<&Record>> = BTreeMap::new();
        for r in &self.records {
            m.entry(r.key.as_str()).or_default().push(r);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Linearizable,
    Violation { key: String, witness: Vec<Record> },
}

impl Verdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, Verdict::Linearizable)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Linearizable => write!(f, "linearizable"),
            Verdict::Violation { key, witness } => {
                writeln!(f, "violation on key {key:?}; minimal witness:")?;
                for r in witness {
                    let resp = r.response.map(|t| t.to_string()).unwrap_or_else(|| "-".into());
                    writeln!(
                        f,
                        "  client {} req {} {:?} {:?} [{}, {}] {:?}",
                        r.client, r.request_id, r.op, r.value, r.invoke, resp, r.outcome
                    )?;
                }
                Ok(())
            }
        }
    }
}

/// Checks every key; reports the first (in key order) that has no legal
/// linearization.
pub fn check(history: &History) -> Verdict {
    for (key, ops) in history.by_key() {
        let owned: Vec<Record> = ops.into_iter().cloned().collect();
        if !check_key(&owned) {
            return Verdict::Violation { key: key.to_string(), witness: minimize(owned) };
        }
    }
    Verdict::Linearizable
}

/// An operation as the search sees it.
#[derive(Debug, Clone, Copy)]
struct Op {
    write: bool,
    /// Index into the value table; `None` is the initial empty register.
    value: Option<u32>,
    invoke: u64,
    response: u64,
    required: bool,
}

/// Whether a single key's records admit a linearization. Records for other
/// keys are not allowed.
pub fn check_key(records: &[Record]) -> bool {
    let ops = prepare(records);
    Search::new(ops).run()
}

fn prepare(records: &[Record]) -> Vec<Op> {
    let mut values: HashMap<String, u32> = HashMap::new();
    let mut intern = |v: &Option<String>| -> Option<u32> {
        v.as_ref().map(|s| {
            let next = values.len() as u32;
            *values.entry(s.clone()).or_insert(next)
        })
    };
    let mut ops = Vec::new();
    for r in records {
        let completed = r.completed();
        match r.op {
            OpKind::Get if !completed => continue,
            OpKind::Get => ops.push(Op {
                write: false,
                value: intern(&r.value),
                invoke: r.invoke,
                response: r.response.unwrap(),
                required: true,
            }),
            OpKind::Put => ops.push(Op {
                write: true,
                value: intern(&r.value),
                invoke: r.invoke,
                response: if completed { r.response.unwrap() } else { u64::MAX },
                required: completed,
            }),
        }
    }
    // An unacknowledged write whose value no read returned can be left out.
    let observed: HashSet<Option<u32>> = ops.iter().filter(|o| !o.write).map(|o| o.value).collect();
    ops.retain(|o| o.required || observed.contains(&o.value));
    ops.sort_by_key(|o| (o.invoke, o.response));
    ops
}

struct Search {
    ops: Vec<Op>,
    words: usize,
    seen: HashSet<(Vec<u64>, Option<u32>)>,
}

impl Search {
    fn new(ops: Vec<Op>) -> Self {
        let words = ops.len().div_ceil(64).max(1);
        Search { ops, words, seen: HashSet::new() }
    }

    fn run(&mut self) -> bool {
        let done = vec![0u64; self.words];
        let remaining_required = self.ops.iter().filter(|o| o.required).count();
        let mut stack = vec![(done, None::<u32>, remaining_required)];
        while let Some((done, value, left)) = stack.pop() {
            if left == 0 {
                return true;
            }
            if !self.seen.insert((done.clone(), value)) {
                continue;
            }
            // Earliest and second earliest responses among pending ops.
            let (mut r1, mut r1_at, mut r2) = (u64::MAX, usize::MAX, u64::MAX);
            for (i, o) in self.ops.iter().enumerate() {
                if is_set(&done, i) {
                    continue;
                }
                if o.response < r1 {
                    r2 = r1;
                    r1 = o.response;
                    r1_at = i;
                } else if o.response < r2 {
                    r2 = o.response;
                }
            }
            for (i, o) in self.ops.iter().enumerate() {
                if is_set(&done, i) {
                    continue;
                }
                let bound = if i == r1_at { r2 } else { r1 };
                if o.invoke > bound {
                    // Ops are sorted by invoke, nothing later is eligible.
                    break;
                }
                let next_value = if o.write {
                    o.value
                } else if o.value == value {
                    value
                } else {
                    continue;
                };
                let mut nd = done.clone();
                nd[i / 64] |= 1 << (i % 64);
                let nl = if o.required { left - 1 } else { left };
                stack.push((nd, next_value, nl));
            }
        }
        false
    }
}

fn is_set(bits: &[u64], i: usize) -> bool {
    bits[i / 64] & (1 << (i % 64)) != 0
}

/// Shrinks a violating single-key history to a 1-minimal violating subset.
pub fn minimize(mut ops: Vec<Record>) -> Vec<Record> {
    ops.sort_by_key(|r| (r.invoke, r.client, r.request_id));
    // Cut the history at the earliest response after which it already fails.
    let mut ends: Vec<u64> = ops.iter().filter_map(|r| r.response).collect();
    ends.sort_unstable();
    ends.dedup();
    let (mut lo, mut hi) = (0usize, ends.len());
    let upto = |t: u64| -> Vec<Record> { ops.iter().filter(|r| r.invoke <= t).cloned().collect() };
    while lo < hi {
        let mid = (lo + hi) / 2;
        if !check_key(&upto(ends[mid])) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    if lo < ends.len() {
        ops = upto(ends[lo]);
    }
    // A write stays while a remaining read returns its value; dropping it
    // would only manufacture a read of a value nobody wrote.
    let mut i = 0;
    while i < ops.len() {
        let r = &ops[i];
        let observed = r.op == OpKind::Put
            && ops.iter().any(|o| o.op == OpKind::Get && o.completed() && o.value == r.value);
        if observed {
            i += 1;
            continue;
        }
        let mut trial = ops.clone();
        trial.remove(i);
        if !check_key(&trial) {
            ops = trial;
        } else {
            i += 1;
        }
    }
    ops
}

#[cfg(test)]
mod tests {
    use super::*;

    fn put(c: u64, v: &str, a: u64, b: Option<u64>) -> Record {
        Record {
            client: c,
            request_id: a,
            op: OpKind::Put,
            key: "x".into(),
            value: Some(v.into()),
            invoke: a,
            response: b,
            outcome: if b.is_some() { Outcome::Ok } else { Outcome::Timeout },
        }
    }

    fn get(c: u64, v: Option<&str>, a: u64, b: u64) -> Record {
        Record {
            client: c,
            request_id: a,
            op: OpKind::Get,
            key: "x".into(),
            value: v.map(Into::into),
            invoke: a,
            response: Some(b),
            outcome: Outcome::Ok,
        }
    }

    #[test]
    fn read_after_write_sees_it() {
        assert!(check_key(&[put(1, "1", 0, Some(5)), get(2, Some("1"), 6, 8)]));
    }

    #[test]
    fn stale_read_after_ack_is_rejected() {
        assert!(!check_key(&[put(1, "1", 0, Some(5)), get(2, None, 6, 8)]));
    }

    #[test]
    fn concurrent_writes_either_order() {
        let a = put(1, "a", 0, Some(10));
        let b = put(2, "b", 1, Some(9));
        assert!(check_key(&[a.clone(), b.clone(), get(3, Some("a"), 20, 21)]));
        assert!(check_key(&[a.clone(), b.clone(), get(3, Some("b"), 20, 21)]));
        assert!(!check_key(&[a, b, get(3, Some("b"), 20, 21), get(3, Some("a"), 22, 23), get(4, Some("b"), 24, 25)]));
    }

    #[test]
    fn incomplete_write_may_land_late_or_never() {
        let w = put(1, "1", 0, None);
        assert!(check_key(&[w.clone(), get(2, None, 100, 101)]));
        assert!(check_key(&[w.clone(), get(2, None, 100, 101), get(2, Some("1"), 200, 201)]));
        // Once observed it cannot be undone.
        assert!(!check_key(&[w, get(2, Some("1"), 100, 101), get(2, None, 200, 201)]));
    }

    #[test]
    fn duplicates_collapse() {
        let mut a = get(1, None, 5, 9);
        a.outcome = Outcome::Redirected;
        a.response = Some(6);
        a.value = None;
        let mut b = get(1, Some("v"), 7, 12);
        b.request_id = a.request_id;
        let h = History::new(vec![a, b]).unwrap();
        assert_eq!(h.records.len(), 1);
        assert_eq!(h.records[0].invoke, 5);
        assert_eq!(h.records[0].response, Some(12));
        assert_eq!(h.records[0].outcome, Outcome::Ok);
    }

    #[test]
    fn response_before_invoke_is_an_input_error() {
        let r = get(1, None, 10, 10);
        let mut bad = r.clone();
        bad.response = Some(3);
        assert!(History::new(vec![r]).is_ok());
        assert!(matches!(History::new(vec![bad]), Err(HistoryError::ResponseBeforeInvoke { .. })));
    }

    #[test]
    fn witness_is_small() {
        let mut recs = vec![put(1, "1", 0, Some(5))];
        for i in 0..20 {
            recs.push(get(2, Some("1"), 10 + i * 10, 15 + i * 10));
        }
        recs.push(get(3, None, 400, 401));
        let h = History::new(recs).unwrap();
        match check(&h) {
            Verdict::Violation { witness, .. } => assert_eq!(witness.len(), 2),
            v => panic!("{v:?}"),
        }
    }
}
