//! Example- and token-level attention masks for the four ICL schemes, plus
//! brute-force checks of the mask symmetry and acyclicity conditions.
//!
//! Masks are boolean: `true` means the row (target) may attend to the column
//! (source), i.e. an additive mask value of `0`; `false` means `-inf`.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::{SequenceLayout, SlotRole};

/// Largest slot subset checked against every permutation.
pub const EXHAUSTIVE_LIMIT: usize = 8;
const SAMPLED_PERMUTATIONS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeId {
    Ar,
    Prefix,
    Boe,
    #[serde(rename = "invicl")]
    InvIcl,
}

impl SchemeId {
    pub const ALL: [SchemeId; 4] = [SchemeId::Ar, SchemeId::Prefix, SchemeId::Boe, SchemeId::InvIcl];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeId::Ar => "ar",
            SchemeId::Prefix => "prefix",
            SchemeId::Boe => "boe",
            SchemeId::InvIcl => "invicl",
        }
    }

    pub fn duplicated(self) -> bool {
        self == SchemeId::InvIcl
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ar" => Ok(SchemeId::Ar),
            "prefix" => Ok(SchemeId::Prefix),
            "boe" => Ok(SchemeId::Boe),
            "invicl" => Ok(SchemeId::InvIcl),
            other => Err(Error::Config(format!("unknown scheme `{other}`"))),
        }
    }
}

/// Square boolean matrix over example slots.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ExampleMask {
    n: usize,
    allow: Vec<bool>,
}

impl ExampleMask {
    pub fn blocked(n: usize) -> Self {
        Self {
            n,
            allow: vec![false; n * n],
        }
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allow = (0..n * n).map(|idx| f(idx / n, idx % n)).collect();
        Self { n, allow }
    }

    /// Decodes the `n*n` low bits of `bits`, row-major, bit set = allowed.
    pub fn from_bits(n: usize, bits: u64) -> Self {
        Self::from_fn(n, |i, j| bits >> (i * n + j) & 1 == 1)
    }

    /// `M1`: every slot sees only itself.
    pub fn diagonal(n: usize) -> Self {
        Self::from_fn(n, |i, j| i == j)
    }

    /// `M2`: every slot sees all others but not itself.
    pub fn off_diagonal(n: usize) -> Self {
        Self::from_fn(n, |i, j| i != j)
    }

    pub fn full(n: usize) -> Self {
        Self::from_fn(n, |_, _| true)
    }

    pub fn lower_triangular(n: usize) -> Self {
        Self::from_fn(n, |i, j| j <= i)
    }

    pub fn n_slots(&self) -> usize {
        self.n
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allow[row * self.n + col]
    }

    pub fn set(&mut self, row: usize, col: usize, allowed: bool) {
        self.allow[row * self.n + col] = allowed;
    }

    /// Every row allows at least one slot, so softmax over it is defined.
    pub fn rows_nonempty(&self) -> bool {
        (0..self.n).all(|i| (0..self.n).any(|j| self.allows(i, j)))
    }

    /// Sub-mask on the given slots, in the given order.
    pub fn restrict(&self, slots: &[usize]) -> ExampleMask {
        ExampleMask::from_fn(slots.len(), |i, j| self.allows(slots[i], slots[j]))
    }

    /// Conjugation `T M T^-1` where `perm[i]` is the new index of slot `i`.
    pub fn permuted(&self, perm: &[usize]) -> ExampleMask {
        let mut out = ExampleMask::blocked(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out.set(perm[i], perm[j], self.allows(i, j));
            }
        }
        out
    }

    /// Plain-text grid, one row per line, `1` = allowed and `0` = blocked.
    pub fn to_grid(&self) -> String {
        grid_string(self.n, &self.allow)
    }

    pub fn from_grid(text: &str) -> Result<Self> {
        let (n, allow) = parse_grid(text)?;
        Ok(Self { n, allow })
    }
}

impl fmt::Display for ExampleMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_grid())
    }
}

/// Square boolean matrix over tokens. Every row allows at least one token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenMask {
    len: usize,
    allow: Vec<bool>,
}

impl TokenMask {
    pub fn new(len: usize, allow: Vec<bool>) -> Result<Self> {
        if allow.len() != len * len {
            return Err(Error::Shape(format!(
                "token mask of {len} tokens needs {} entries, got {}",
                len * len,
                allow.len()
            )));
        }
        let mask = Self { len, allow };
        if let Some(row) = (0..len).find(|&i| !mask.row(i).iter().any(|&a| a)) {
            return Err(Error::DegenerateRow(row));
        }
        Ok(mask)
    }

    pub fn causal(len: usize) -> Self {
        Self {
            len,
            allow: (0..len * len).map(|idx| idx % len <= idx / len).collect(),
        }
    }

    pub fn full(len: usize) -> Self {
        Self {
            len,
            allow: vec![true; len * len],
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        self.allow[row * self.len + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.allow[row * self.len..(row + 1) * self.len]
    }

    /// Conjugation by a token permutation; `perm[i]` is the new index of token `i`.
    pub fn permuted(&self, perm: &[usize]) -> TokenMask {
        let mut allow = vec![false; self.len * self.len];
        for i in 0..self.len {
            for j in 0..self.len {
                allow[perm[i] * self.len + perm[j]] = self.allows(i, j);
            }
        }
        TokenMask {
            len: self.len,
            allow,
        }
    }

    /// Tokens reachable from `from` by following allowed edges any number of times.
    pub fn reachable_from(&self, from: usize) -> Vec<bool> {
        let mut seen = vec![false; self.len];
        let mut queue = VecDeque::from([from]);
        seen[from] = true;
        while let Some(t) = queue.pop_front() {
            for s in 0..self.len {
                if self.allows(t, s) && !seen[s] {
                    seen[s] = true;
                    queue.push_back(s);
                }
            }
        }
        seen
    }

    pub fn to_grid(&self) -> String {
        grid_string(self.len, &self.allow)
    }

    pub fn from_grid(text: &str) -> Result<Self> {
        let (len, allow) = parse_grid(text)?;
        Self::new(len, allow)
    }
}

fn grid_string(n: usize, allow: &[bool]) -> String {
    let mut out = String::with_capacity(n * (n + 1));
    for row in allow.chunks(n.max(1)) {
        out.extend(row.iter().map(|&a| if a { '1' } else { '0' }));
        out.push('\n');
    }
    out
}

fn parse_grid(text: &str) -> Result<(usize, Vec<bool>)> {
    let rows: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    let n = rows.len();
    let mut allow = Vec::with_capacity(n * n);
    for (i, row) in rows.iter().enumerate() {
        if row.chars().count() != n {
            return Err(Error::Shape(format!("grid row {i} has {} cells, expected {n}", row.len())));
        }
        for c in row.chars() {
            match c {
                '1' => allow.push(true),
                '0' => allow.push(false),
                other => return Err(Error::Config(format!("bad grid character `{other}`"))),
            }
        }
    }
    Ok((n, allow))
}

/// Example-slot mask for `scheme` with `n` context examples.
///
/// Non-duplicated schemes have `n + 1` slots (contexts then the query).
/// InvICL has `2n + 1`: first copies, second copies, query.
pub fn build_example_mask(scheme: SchemeId, n: usize) -> Result<ExampleMask> {
    if n == 0 {
        return Err(Error::EmptyContext);
    }
    let mask = match scheme {
        SchemeId::Ar => ExampleMask::lower_triangular(n + 1),
        SchemeId::Prefix => ExampleMask::from_fn(n + 1, |i, j| i == n || j < n),
        SchemeId::Boe => ExampleMask::from_fn(n + 1, |i, j| i == n || i == j),
        SchemeId::InvIcl => ExampleMask::from_fn(2 * n + 1, |i, j| {
            if i < n {
                // independent encoding
                i == j
            } else if i < 2 * n {
                // leave-one-out: other first copies plus own running state
                (j < n && j != i - n) || j == i
            } else {
                j >= n
            }
        }),
    };
    Ok(mask)
}

/// Token-level realization of an example mask.
///
/// Tokens within the same slot attend causally (x before y); tokens in
/// different slots see each other fully or not at all.
pub fn expand_to_tokens(emask: &ExampleMask, layout: &SequenceLayout) -> Result<TokenMask> {
    if emask.n_slots() != layout.slots.len() {
        return Err(Error::LayoutMismatch {
            mask: emask.n_slots(),
            layout: layout.slots.len(),
        });
    }
    let len = layout.total_tokens;
    let mut allow = vec![false; len * len];
    for (a, target) in layout.slots.iter().enumerate() {
        for (b, source) in layout.slots.iter().enumerate() {
            for (ti, &t) in target.tokens.iter().enumerate() {
                for (si, &s) in source.tokens.iter().enumerate() {
                    allow[t * len + s] = if a == b { si <= ti } else { emask.allows(a, b) };
                }
            }
        }
    }
    TokenMask::new(len, allow)
}

/// Token mask the model uses for `scheme` on `layout`. A query-only layout
/// (no context) reduces to the query attending to itself.
pub fn scheme_token_mask(scheme: SchemeId, layout: &SequenceLayout) -> Result<TokenMask> {
    if layout.n == 0 {
        return Ok(TokenMask::full(layout.total_tokens));
    }
    expand_to_tokens(&build_example_mask(scheme, layout.n)?, layout)
}

/// Whether conjugating the sub-mask on `context_slots` by every permutation
/// of those slots leaves it unchanged.
///
/// Exhaustive up to [`EXHAUSTIVE_LIMIT`] slots; beyond that, all
/// transpositions plus a fixed sample of random permutations.
pub fn is_permutation_symmetric(emask: &ExampleMask, context_slots: &[usize]) -> bool {
    let restricted = emask.restrict(context_slots);
    let all: Vec<usize> = (0..context_slots.len()).collect();
    is_symmetric_under(&restricted, &[all.as_slice()])
}

/// Whether the whole mask is invariant when the same permutation of
/// `0..k` is applied simultaneously to each orbit (each a list of `k` slots).
/// Slots outside every orbit stay fixed.
pub fn is_symmetric_under(emask: &ExampleMask, orbits: &[&[usize]]) -> bool {
    let k = orbits.first().map_or(0, |o| o.len());
    assert!(orbits.iter().all(|o| o.len() == k), "orbits must have equal length");
    let check = |sigma: &[usize]| {
        let mut perm: Vec<usize> = (0..emask.n_slots()).collect();
        for orbit in orbits {
            for (i, &slot) in orbit.iter().enumerate() {
                perm[slot] = orbit[sigma[i]];
            }
        }
        emask.permuted(&perm) == *emask
    };
    if k <= EXHAUSTIVE_LIMIT {
        return (0..k).permutations(k).all(|sigma| check(&sigma));
    }
    let transpositions = (0..k).tuple_combinations().all(|(a, b)| {
        let mut sigma: Vec<usize> = (0..k).collect();
        sigma.swap(a, b);
        check(&sigma)
    });
    if !transpositions {
        return false;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut sigma: Vec<usize> = (0..k).collect();
    (0..SAMPLED_PERMUTATIONS).all(|_| {
        sigma.shuffle(&mut rng);
        check(&sigma)
    })
}

/// Whether the allow-graph, self-loops removed, is acyclic: equivalently some
/// slot ordering makes the mask lower-triangular.
pub fn is_non_leaking(emask: &ExampleMask) -> bool {
    topological_order(emask).is_some()
}

/// A slot ordering under which the mask is lower-triangular, if one exists.
pub fn topological_order(emask: &ExampleMask) -> Option<Vec<usize>> {
    let n = emask.n_slots();
    // slot i depends on every j != i it attends to
    let mut pending: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && emask.allows(i, j)).count())
        .collect();
    let mut ready: VecDeque<usize> = (0..n).filter(|&i| pending[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(j) = ready.pop_front() {
        order.push(j);
        for i in 0..n {
            if i != j && emask.allows(i, j) {
                pending[i] -= 1;
                if pending[i] == 0 {
                    ready.push_back(i);
                }
            }
        }
    }
    (order.len() == n).then_some(order)
}

fn check_enumeration_range(n: usize) -> Result<()> {
    if (2..=4).contains(&n) {
        Ok(())
    } else {
        Err(Error::Config(format!("mask enumeration supports 2 <= n <= 4, got {n}")))
    }
}

/// Result of scanning all `2^(n*n)` binary masks.
#[derive(Clone, Debug)]
pub struct MaskScan {
    pub scanned: usize,
    /// Masks with a fully blocked row; softmax is undefined on them.
    pub degenerate: usize,
    pub invariant: Vec<ExampleMask>,
}

pub fn scan_invariant_masks(n: usize) -> Result<MaskScan> {
    check_enumeration_range(n)?;
    let total = 1u64 << (n * n);
    let all: Vec<usize> = (0..n).collect();
    let mut degenerate = 0;
    let mut invariant = Vec::new();
    for bits in 0..total {
        let mask = ExampleMask::from_bits(n, bits);
        if !mask.rows_nonempty() {
            degenerate += 1;
            continue;
        }
        if is_permutation_symmetric(&mask, &all) {
            invariant.push(mask);
        }
    }
    Ok(MaskScan {
        scanned: total as usize,
        degenerate,
        invariant,
    })
}

/// All valid `n x n` masks that are invariant under context permutation.
pub fn enumerate_invariant_masks(n: usize) -> Result<Vec<ExampleMask>> {
    Ok(scan_invariant_masks(n)?.invariant)
}

/// Invariant masks that are also non-leaking.
pub fn invariant_and_non_leaking(n: usize) -> Result<Vec<ExampleMask>> {
    Ok(enumerate_invariant_masks(n)?
        .into_iter()
        .filter(is_non_leaking)
        .collect())
}

/// Slots of `layout` holding context examples (both copies for InvICL).
pub fn context_slots(layout: &SequenceLayout, copy: u8) -> Vec<usize> {
    layout
        .slots
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s.role, SlotRole::Context { copy: c, .. } if c == copy))
        .map(|(i, _)| i)
        .collect()
}
