//! Logic regression: boolean expression trees over binarized attributes,
//! fitted by simulated annealing.

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogicTree {
    Leaf { attr: usize, negated: bool },
    Not(Box<LogicTree>),
    And(Box<LogicTree>, Box<LogicTree>),
    Or(Box<LogicTree>, Box<LogicTree>),
}

impl LogicTree {
    pub fn leaf(attr: usize) -> Self {
        LogicTree::Leaf { attr, negated: false }
    }

    pub fn not_leaf(attr: usize) -> Self {
        LogicTree::Leaf { attr, negated: true }
    }

    pub fn and(a: LogicTree, b: LogicTree) -> Self {
        LogicTree::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: LogicTree, b: LogicTree) -> Self {
        LogicTree::Or(Box::new(a), Box::new(b))
    }

    pub fn eval(&self, bits: &[bool]) -> bool {
        match self {
            LogicTree::Leaf { attr, negated } => bits[*attr] != *negated,
            LogicTree::Not(a) => !a.eval(bits),
            LogicTree::And(a, b) => a.eval(bits) && b.eval(bits),
            LogicTree::Or(a, b) => a.eval(bits) || b.eval(bits),
        }
    }

    pub fn leaves(&self) -> usize {
        match self {
            LogicTree::Leaf { .. } => 1,
            LogicTree::Not(a) => a.leaves(),
            LogicTree::And(a, b) | LogicTree::Or(a, b) => a.leaves() + b.leaves(),
        }
    }

    fn nodes(&self) -> usize {
        match self {
            LogicTree::Leaf { .. } => 1,
            LogicTree::Not(a) => 1 + a.nodes(),
            LogicTree::And(a, b) | LogicTree::Or(a, b) => 1 + a.nodes() + b.nodes(),
        }
    }

    /// Every leaf references an attribute below `m`.
    pub fn validate(&self, m: usize) -> Result<()> {
        match self {
            LogicTree::Leaf { attr, .. } if *attr >= m => {
                Err(Error::Invalid(format!("leaf references attribute {attr} of {m}")))
            }
            LogicTree::Leaf { .. } => Ok(()),
            LogicTree::Not(a) => a.validate(m),
            LogicTree::And(a, b) | LogicTree::Or(a, b) => a.validate(m).and(b.validate(m)),
        }
    }

    /// Evaluates on bit-packed columns: bit `i` of word `i / 64` is sample `i`.
    fn eval_packed(&self, cols: &[Vec<u64>]) -> Vec<u64> {
        match self {
            LogicTree::Leaf { attr, negated } => {
                if *negated {
                    cols[*attr].iter().map(|w| !w).collect()
                } else {
                    cols[*attr].clone()
                }
            }
            LogicTree::Not(a) => a.eval_packed(cols).into_iter().map(|w| !w).collect(),
            LogicTree::And(a, b) => zip_words(a.eval_packed(cols), b.eval_packed(cols), |x, y| x & y),
            LogicTree::Or(a, b) => zip_words(a.eval_packed(cols), b.eval_packed(cols), |x, y| x | y),
        }
    }

    /// Preorder node `i`.
    fn node_mut(&mut self, i: usize) -> &mut LogicTree {
        if i == 0 {
            return self;
        }
        match self {
            LogicTree::Leaf { .. } => unreachable!("index past a leaf"),
            LogicTree::Not(a) => a.node_mut(i - 1),
            LogicTree::And(a, b) | LogicTree::Or(a, b) => {
                let left = a.nodes();
                if i <= left {
                    a.node_mut(i - 1)
                } else {
                    b.node_mut(i - 1 - left)
                }
            }
        }
    }

    fn indices(&self, pred: fn(&LogicTree) -> bool) -> Vec<usize> {
        fn walk(t: &LogicTree, next: &mut usize, pred: fn(&LogicTree) -> bool, out: &mut Vec<usize>) {
            if pred(t) {
                out.push(*next);
            }
            *next += 1;
            match t {
                LogicTree::Leaf { .. } => {}
                LogicTree::Not(a) => walk(a, next, pred, out),
                LogicTree::And(a, b) | LogicTree::Or(a, b) => {
                    walk(a, next, pred, out);
                    walk(b, next, pred, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(self, &mut 0, pred, &mut out);
        out
    }
}

fn zip_words(a: Vec<u64>, b: Vec<u64>, f: impl Fn(u64, u64) -> u64) -> Vec<u64> {
    a.into_iter().zip(b).map(|(x, y)| f(x, y)).collect()
}

impl fmt::Display for LogicTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogicTree::Leaf { attr, negated: false } => write!(f, "a{attr}"),
            LogicTree::Leaf { attr, negated: true } => write!(f, "!a{attr}"),
            LogicTree::Not(a) => write!(f, "!({a})"),
            LogicTree::And(a, b) => write!(f, "({a} & {b})"),
            LogicTree::Or(a, b) => write!(f, "({a} | {b})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealConfig {
    pub initial_temperature: f64,
    pub cooling: f64,
    pub proposals: usize,
    /// Proposals between successive cooling steps.
    pub cooling_interval: usize,
    pub max_leaves: usize,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            initial_temperature: 1.0,
            cooling: 0.97,
            proposals: 20_000,
            cooling_interval: 100,
            max_leaves: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogicFit {
    pub tree: LogicTree,
    pub accuracy: f64,
}

/// Binarized samples in a bit-packed column layout.
pub struct BitTable {
    n: usize,
    cols: Vec<Vec<u64>>,
}

impl BitTable {
    /// `rows[i][j]` is attribute `j` of sample `i`.
    pub fn new(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if n == 0 || m == 0 {
            return Err(Error::Invalid("logic regression needs samples and attributes".into()));
        }
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Invalid("ragged attribute rows".into()));
        }
        let words = n.div_ceil(64);
        let mut cols = vec![vec![0u64; words]; m];
        for (i, r) in rows.iter().enumerate() {
            for (j, &b) in r.iter().enumerate() {
                if b {
                    cols[j][i / 64] |= 1 << (i % 64);
                }
            }
        }
        Ok(BitTable { n, cols })
    }

    pub fn attributes(&self) -> usize {
        self.cols.len()
    }

    fn pack(&self, bits: &[bool]) -> Vec<u64> {
        let mut w = vec![0u64; self.n.div_ceil(64)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                w[i / 64] |= 1 << (i % 64);
            }
        }
        w
    }

    fn errors(&self, tree: &LogicTree, target: &[u64]) -> usize {
        let pred = tree.eval_packed(&self.cols);
        let full = self.n / 64;
        let mut e: usize = (0..full).map(|i| (pred[i] ^ target[i]).count_ones() as usize).sum();
        if !self.n.is_multiple_of(64) {
            let mask = (1u64 << (self.n % 64)) - 1;
            e += ((pred[full] ^ target[full]) & mask).count_ones() as usize;
        }
        e
    }

    /// Fraction of samples where `tree` reproduces `target`.
    pub fn accuracy(&self, tree: &LogicTree, target: &[bool]) -> f64 {
        1.0 - self.errors(tree, &self.pack(target)) as f64 / self.n as f64
    }
}

/// `value > threshold` per entry.
pub fn binarize(values: &[f64], threshold: f64) -> Vec<bool> {
    values.iter().map(|&v| v > threshold).collect()
}

fn random_leaf(m: usize, r: &mut rng::Rng) -> LogicTree {
    LogicTree::Leaf {
        attr: r.gen_range(0..m),
        negated: r.gen(),
    }
}

fn propose(tree: &LogicTree, m: usize, max_leaves: usize, r: &mut rng::Rng) -> LogicTree {
    let mut t = tree.clone();
    let leaves = t.indices(|n| matches!(n, LogicTree::Leaf { .. }));
    let ops = t.indices(|n| matches!(n, LogicTree::And(..) | LogicTree::Or(..)));
    loop {
        match r.gen_range(0..5) {
            0 => {
                let i = leaves[r.gen_range(0..leaves.len())];
                if let LogicTree::Leaf { attr, .. } = t.node_mut(i) {
                    *attr = r.gen_range(0..m);
                }
            }
            1 => {
                let i = leaves[r.gen_range(0..leaves.len())];
                if let LogicTree::Leaf { negated, .. } = t.node_mut(i) {
                    *negated = !*negated;
                }
            }
            2 if !ops.is_empty() => {
                let node = t.node_mut(ops[r.gen_range(0..ops.len())]);
                let old = std::mem::replace(node, LogicTree::leaf(0));
                *node = match old {
                    LogicTree::And(a, b) => LogicTree::Or(a, b),
                    LogicTree::Or(a, b) => LogicTree::And(a, b),
                    other => other,
                };
            }
            3 if leaves.len() < max_leaves => {
                let node = t.node_mut(leaves[r.gen_range(0..leaves.len())]);
                let old = std::mem::replace(node, LogicTree::leaf(0));
                let new = random_leaf(m, r);
                *node = if r.gen() {
                    LogicTree::and(old, new)
                } else {
                    LogicTree::or(old, new)
                };
            }
            4 if !ops.is_empty() => {
                let node = t.node_mut(ops[r.gen_range(0..ops.len())]);
                let keep_left = r.gen::<bool>();
                let old = std::mem::replace(node, LogicTree::leaf(0));
                *node = match old {
                    LogicTree::And(a, b) | LogicTree::Or(a, b) => *(if keep_left { a } else { b }),
                    other => other,
                };
            }
            _ => continue,
        }
        return t;
    }
}

/// Fits a tree predicting `target` from the columns of `table` by simulated
/// annealing on the misclassification rate. Returns the best tree visited.
pub fn fit_logic_tree(table: &BitTable, target: &[bool], cfg: &AnnealConfig, seed: u64) -> Result<LogicFit> {
    if target.len() != table.n {
        return Err(Error::shape("fit_logic_tree", &[table.n], &[target.len()]));
    }
    let pos = target.iter().filter(|&&b| b).count();
    if pos < 2 || table.n - pos < 2 {
        return Err(Error::Invalid(format!(
            "trait needs >= 2 samples of each value, has {pos} true of {}",
            table.n
        )));
    }
    if cfg.max_leaves == 0 || cfg.cooling_interval == 0 || !(cfg.cooling > 0.0 && cfg.cooling < 1.0) {
        return Err(Error::Config("invalid annealing configuration".into()));
    }
    let m = table.attributes();
    let packed = table.pack(target);
    let mut r = rng::named_rng(seed, "logic");
    let mut current = random_leaf(m, &mut r);
    let mut cur_err = table.errors(&current, &packed);
    let (mut best, mut best_err) = (current.clone(), cur_err);
    let mut temp = cfg.initial_temperature;
    let n = table.n as f64;
    for step in 0..cfg.proposals {
        let cand = propose(&current, m, cfg.max_leaves, &mut r);
        let err = table.errors(&cand, &packed);
        let delta = (err as f64 - cur_err as f64) / n;
        let u: f64 = r.gen();
        if delta <= 0.0 || u < (-delta / temp).exp() {
            current = cand;
            cur_err = err;
            if cur_err < best_err || (cur_err == best_err && current.leaves() < best.leaves()) {
                best = current.clone();
                best_err = cur_err;
            }
        }
        if (step + 1) % cfg.cooling_interval == 0 {
            temp *= cfg.cooling;
        }
    }
    Ok(LogicFit {
        accuracy: 1.0 - best_err as f64 / n,
        tree: best,
    })
}
