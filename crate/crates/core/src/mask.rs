//! Decoding orders and the attention masks they induce.
//!
//! A mask is a (T+1)x(T+1) bit matrix. Rows are the decoder's outputs
//! y1..yT plus the end-of-sequence slot; columns are its inputs: the start
//! token followed by y1..yT. Bit 1 means "may attend". The start column is
//! always open, the end-of-sequence row sees everything, and interior bit
//! [i][j] is set exactly when position j is decoded before position i.
//! The query variant keeps the diagonal shut (a position may not see
//! itself); the content variant opens it.

use crate::real::Real;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("order {order:?} is not a bijection over 1..={t}")]
    BadPermutation { order: Vec<usize>, t: usize },
    #[error("position {position} out of range 1..={t}")]
    OutOfRange { position: usize, t: usize },
    #[error("mask grid {rows}x{cols} is not a 0/1 square of side >= 2")]
    BadShape { rows: usize, cols: usize },
}

/// A decoding order over positions 1..=T: `order[k]` is the position
/// decoded at step k+1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self, MaskError> {
        let t = order.len();
        let mut seen = vec![false; t + 1];
        for &p in &order {
            if p == 0 || p > t || seen[p] {
                return Err(MaskError::BadPermutation { order, t });
            }
            seen[p] = true;
        }
        Ok(Permutation { order })
    }

    /// Left-to-right order 1, 2, .., t.
    pub fn canonical(t: usize) -> Self {
        Permutation { order: (1..=t).collect() }
    }

    pub fn t(&self) -> usize {
        self.order.len()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Step index (0-based) at which each position is decoded;
    /// `steps()[p-1]` for position p.
    pub fn steps(&self) -> Vec<usize> {
        let mut idx = vec![0; self.t()];
        for (k, &p) in self.order.iter().enumerate() {
            idx[p - 1] = k;
        }
        idx
    }

    /// The same positions visited in the opposite order.
    pub fn reversed(&self) -> Self {
        Permutation { order: self.order.iter().rev().copied().collect() }
    }

    /// Strict precedence matrix: entry [i][j] (0-based) is 1 when position
    /// j+1 is decoded before position i+1. Equals the interior block of the
    /// query mask.
    pub fn precedence<R: Real>(&self) -> Array2<R> {
        let t = self.t();
        let steps = self.steps();
        let mut m = Array2::zeros((t, t));
        for i in 0..t {
            for j in 0..t {
                if steps[j] < steps[i] {
                    m[[i, j]] = R::one();
                }
            }
        }
        m
    }
}

/// Uniform random order drawn from a fixed seed; two draws with the same
/// seed are identical.
pub fn random_permutation(t: usize, seed: u64) -> Permutation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_permutation_with(t, &mut rng)
}

/// Uniform random order from a caller-owned stream.
pub fn random_permutation_with(t: usize, rng: &mut ChaCha8Rng) -> Permutation {
    let mut order: Vec<usize> = (1..=t).collect();
    order.shuffle(rng);
    Permutation { order }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    /// Position queries: a position never sees its own token.
    Query,
    /// Content refinement: a position sees its own token too.
    Content,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    bits: Array2<u8>,
    kind: MaskKind,
}

impl AttentionMask {
    /// Wrap an arbitrary bit grid so it can be analyzed by [`validate`].
    /// The grid must be square with at least one output row; the bits may
    /// encode any dependency structure, including cyclic ones.
    pub fn from_bits(bits: Array2<u8>, kind: MaskKind) -> Result<Self, MaskError> {
        if bits.nrows() != bits.ncols() || bits.nrows() < 2 {
            return Err(MaskError::BadShape { rows: bits.nrows(), cols: bits.ncols() });
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(MaskError::BadShape { rows: bits.nrows(), cols: bits.ncols() });
        }
        Ok(AttentionMask { bits, kind })
    }

    pub fn t(&self) -> usize {
        self.bits.nrows() - 1
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    /// Raw bits; row r < T is output position r+1, row T is the
    /// end-of-sequence slot; column 0 is the start token, column c >= 1 is
    /// input position c.
    pub fn bits(&self) -> &Array2<u8> {
        &self.bits
    }

    /// Gate matrix for the query stream: rows are position queries, columns
    /// the context slots, in the same layout as the bits.
    pub fn query_gate<R: Real>(&self) -> Array2<R> {
        assert_eq!(self.kind, MaskKind::Query, "query gate from a content mask");
        self.bits.mapv(|b| if b == 1 { R::one() } else { R::zero() })
    }

    /// Gate matrix for content self-attention: row 0 is the start token
    /// (sees only itself), row r >= 1 is context token r with this mask's
    /// visibility row for position r.
    pub fn content_self_gate<R: Real>(&self) -> Array2<R> {
        assert_eq!(self.kind, MaskKind::Content, "content gate from a query mask");
        let t = self.t();
        let mut gate = Array2::zeros((t + 1, t + 1));
        gate[[0, 0]] = R::one();
        for r in 1..=t {
            for c in 0..=t {
                if self.bits[[r - 1, c]] == 1 {
                    gate[[r, c]] = R::one();
                }
            }
        }
        gate
    }
}

impl fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.t();
        let width = format!("y{t}").len().max(3);
        write!(f, "{:>w$}", "", w = width + 1)?;
        write!(f, "{:>w$}", "[B]", w = width + 1)?;
        for c in 1..=t {
            write!(f, "{:>w$}", format!("y{c}"), w = width + 1)?;
        }
        writeln!(f)?;
        for r in 0..=t {
            let label = if r < t { format!("y{}", r + 1) } else { "[E]".to_string() };
            write!(f, "{label:>w$}", w = width + 1)?;
            for c in 0..=t {
                write!(f, "{:>w$}", self.bits[[r, c]], w = width + 1)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Build the (T+1)x(T+1) mask induced by a decoding order.
pub fn mask_from_permutation(perm: &Permutation, kind: MaskKind) -> AttentionMask {
    let t = perm.t();
    let steps = perm.steps();
    let mut bits = Array2::zeros((t + 1, t + 1));
    for r in 0..=t {
        bits[[r, 0]] = 1;
    }
    for c in 0..=t {
        bits[[t, c]] = 1;
    }
    for i in 1..=t {
        for j in 1..=t {
            let open = match kind {
                MaskKind::Query => steps[j - 1] < steps[i - 1],
                MaskKind::Content => steps[j - 1] <= steps[i - 1],
            };
            if open {
                bits[[i - 1, j]] = 1;
            }
        }
    }
    AttentionMask { bits, kind }
}

/// Per-position re-prediction mask: every row sees all other positions plus
/// the start token, never itself. `position` names the row of interest and
/// is validated against 1..=t; the full matrix applies the same rule to
/// every row so it can be used batched.
pub fn cloze_mask(t: usize, position: usize) -> Result<AttentionMask, MaskError> {
    if position == 0 || position > t {
        return Err(MaskError::OutOfRange { position, t });
    }
    let mut bits = Array2::ones((t + 1, t + 1));
    for i in 1..=t {
        bits[[i - 1, i]] = 0;
    }
    Ok(AttentionMask { bits, kind: MaskKind::Query })
}

/// Content-side companion of [`cloze_mask`]: every context token sees
/// everything, including itself.
pub fn cloze_content_mask(t: usize) -> AttentionMask {
    AttentionMask { bits: Array2::ones((t + 1, t + 1)), kind: MaskKind::Content }
}

/// Structural analysis of a mask: frame checks, interior-order recovery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskReport {
    /// Start column all ones.
    pub start_column_ok: bool,
    /// End-of-sequence row all ones.
    pub end_row_ok: bool,
    /// Diagonal is uniform and names a kind.
    pub kind: Option<MaskKind>,
    /// The interior dependency relation has no cycles.
    pub acyclic: bool,
    /// Recovered order, present only when the mask equals
    /// `mask_from_permutation` of it exactly.
    pub permutation: Option<Permutation>,
    /// A dependency cycle (1-based positions), when one exists.
    pub cycle: Option<Vec<usize>>,
}

impl MaskReport {
    pub fn is_permutational(&self) -> bool {
        self.start_column_ok && self.end_row_ok && self.acyclic && self.permutation.is_some()
    }
}

/// Check a mask's frame and try to recover the decoding order behind it.
pub fn validate(mask: &AttentionMask) -> MaskReport {
    let t = mask.t();
    let bits = &mask.bits;
    let start_column_ok = (0..=t).all(|r| bits[[r, 0]] == 1);
    let end_row_ok = (0..=t).all(|c| bits[[t, c]] == 1);

    let diag: Vec<u8> = (1..=t).map(|i| bits[[i - 1, i]]).collect();
    let kind = if diag.iter().all(|&b| b == 0) {
        Some(MaskKind::Query)
    } else if diag.iter().all(|&b| b == 1) {
        Some(MaskKind::Content)
    } else {
        None
    };

    // Interior strict dependencies: i depends on j when row y_i opens
    // column y_j (diagonal excluded).
    let depends = |i: usize, j: usize| i != j && bits[[i - 1, j]] == 1;
    let cycle = find_cycle(t, &depends);
    let acyclic = cycle.is_none();

    let permutation = if acyclic {
        // A total order gives pairwise-distinct dependency counts 0..T-1.
        let mut by_count: Vec<Option<usize>> = vec![None; t];
        let mut ok = true;
        for i in 1..=t {
            let count = (1..=t).filter(|&j| depends(i, j)).count();
            if by_count[count].is_some() {
                ok = false;
                break;
            }
            by_count[count] = Some(i);
        }
        if ok {
            let order: Vec<usize> = by_count.into_iter().map(Option::unwrap).collect();
            let perm = Permutation { order };
            (mask_from_permutation(&perm, mask.kind) == *mask).then_some(perm)
        } else {
            None
        }
    } else {
        None
    };

    MaskReport { start_column_ok, end_row_ok, kind, acyclic, permutation, cycle }
}

/// Smallest-index-first DFS for a dependency cycle; returns the positions
/// along one cycle if any exists.
fn find_cycle(t: usize, depends: &dyn Fn(usize, usize) -> bool) -> Option<Vec<usize>> {
    // 0 = unvisited, 1 = on stack, 2 = done.
    let mut state = vec![0u8; t + 1];
    let mut stack: Vec<usize> = Vec::new();

    fn dfs(
        node: usize,
        t: usize,
        depends: &dyn Fn(usize, usize) -> bool,
        state: &mut [u8],
        stack: &mut Vec<usize>,
    ) -> Option<Vec<usize>> {
        state[node] = 1;
        stack.push(node);
        for next in 1..=t {
            if !depends(node, next) {
                continue;
            }
            if state[next] == 1 {
                let start = stack.iter().position(|&n| n == next).unwrap();
                return Some(stack[start..].to_vec());
            }
            if state[next] == 0 {
                if let Some(c) = dfs(next, t, depends, state, stack) {
                    return Some(c);
                }
            }
        }
        stack.pop();
        state[node] = 2;
        None
    }

    for start in 1..=t {
        if state[start] == 0 {
            if let Some(c) = dfs(start, t, depends, &mut state, &mut stack) {
                return Some(c);
            }
        }
    }
    None
}
