//! Token order for each scheme and the positional indices fed to the
//! position table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::SchemeId;

/// Tokens per context example in the synthetic setting: `x` then `y`.
pub const EXAMPLE_TOKENS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeScheme {
    Absolute,
    Symmetric,
    None,
}

impl PeScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            PeScheme::Absolute => "absolute",
            PeScheme::Symmetric => "symmetric",
            PeScheme::None => "none",
        }
    }
}

impl fmt::Display for PeScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PeScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "absolute" | "abs" => Ok(PeScheme::Absolute),
            "symmetric" | "sym" => Ok(PeScheme::Symmetric),
            "none" | "nope" => Ok(PeScheme::None),
            other => Err(Error::Config(format!("unknown positional encoding `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotRole {
    /// `copy` is 0 for the only/first copy and 1 for the InvICL second copy.
    Context { example: usize, copy: u8 },
    Query,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub tokens: Vec<usize>,
    pub role: SlotRole,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub slots: Vec<Slot>,
    pub duplicated: bool,
    pub n: usize,
    pub total_tokens: usize,
}

impl SequenceLayout {
    pub fn query_token(&self) -> usize {
        self.total_tokens - 1
    }

    /// `(x token, y token)` of `example` in the given copy.
    pub fn pair(&self, example: usize, copy: u8) -> (usize, usize) {
        let slot = copy as usize * self.n + example;
        let tokens = &self.slots[slot].tokens;
        (tokens[0], tokens[1])
    }

    /// Token permutation induced by reordering the context examples: the
    /// example at position `i` moves to position `sigma[i]`, in every copy.
    pub fn token_permutation(&self, sigma: &[usize]) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.total_tokens).collect();
        let copies = if self.duplicated { 2 } else { 1 };
        for copy in 0..copies {
            for (i, &target) in sigma.iter().enumerate() {
                let (x, y) = self.pair(i, copy);
                let (tx, ty) = self.pair(target, copy);
                perm[x] = tx;
                perm[y] = ty;
            }
        }
        perm
    }
}

/// Tokens needed for `n` context examples under `scheme`.
pub fn sequence_len(scheme: SchemeId, n: usize) -> usize {
    let copies = if scheme.duplicated() { 2 } else { 1 };
    copies * EXAMPLE_TOKENS * n + 1
}

/// `(x1, y1, ..., xn, yn, xt)`, or with the context repeated twice for InvICL.
/// `n = 0` yields a query-only layout.
pub fn build_layout(scheme: SchemeId, n: usize) -> SequenceLayout {
    let copies: u8 = if scheme.duplicated() { 2 } else { 1 };
    let mut slots = Vec::with_capacity(copies as usize * n + 1);
    let mut next = 0;
    for copy in 0..copies {
        for example in 0..n {
            slots.push(Slot {
                tokens: (next..next + EXAMPLE_TOKENS).collect(),
                role: SlotRole::Context { example, copy },
            });
            next += EXAMPLE_TOKENS;
        }
    }
    slots.push(Slot {
        tokens: vec![next],
        role: SlotRole::Query,
    });
    SequenceLayout {
        slots,
        duplicated: scheme.duplicated(),
        n,
        total_tokens: next + 1,
    }
}

/// Per-token position index, absent when no positional encoding is used.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionAssignment(pub Option<Vec<usize>>);

impl PositionAssignment {
    pub fn indices(&self) -> Option<&[usize]> {
        self.0.as_deref()
    }
}

/// Rows needed in the position table.
pub fn position_table_size(pe: PeScheme, scheme: SchemeId, max_examples: usize) -> usize {
    match pe {
        PeScheme::Absolute => sequence_len(scheme, max_examples),
        PeScheme::Symmetric => EXAMPLE_TOKENS + 1,
        PeScheme::None => 0,
    }
}

pub fn assign_positions(pe: PeScheme, layout: &SequenceLayout) -> PositionAssignment {
    match pe {
        PeScheme::None => PositionAssignment(None),
        PeScheme::Absolute => PositionAssignment(Some((0..layout.total_tokens).collect())),
        PeScheme::Symmetric => {
            let mut pos = vec![0; layout.total_tokens];
            for slot in &layout.slots {
                match slot.role {
                    SlotRole::Context { .. } => {
                        for (offset, &t) in slot.tokens.iter().enumerate() {
                            pos[t] = offset;
                        }
                    }
                    SlotRole::Query => pos[slot.tokens[0]] = EXAMPLE_TOKENS,
                }
            }
            PositionAssignment(Some(pos))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ar_layout_n2() {
        let l = build_layout(SchemeId::Ar, 2);
        assert_eq!(l.total_tokens, 5);
        let tokens: Vec<Vec<usize>> = l.slots.iter().map(|s| s.tokens.clone()).collect();
        assert_eq!(tokens, vec![vec![0, 1], vec![2, 3], vec![4]]);
    }

    #[test]
    fn invicl_layout_duplicates_context() {
        let l = build_layout(SchemeId::InvIcl, 2);
        assert_eq!(l.total_tokens, 9);
        assert_eq!(l.slots.len(), 5);
        assert_eq!(l.slots[2].tokens, vec![4, 5]);
        assert_eq!(l.slots[3].tokens, vec![6, 7]);
        assert_eq!(l.slots[2].role, SlotRole::Context { example: 0, copy: 1 });
        assert_eq!(build_layout(SchemeId::InvIcl, 1).total_tokens, 5);
    }

    #[test]
    fn symmetric_positions() {
        let l = build_layout(SchemeId::Prefix, 2);
        let p = assign_positions(PeScheme::Symmetric, &l);
        assert_eq!(p.indices().unwrap(), &[0, 1, 0, 1, 2]);
        let l = build_layout(SchemeId::InvIcl, 2);
        let p = assign_positions(PeScheme::Symmetric, &l);
        assert_eq!(p.indices().unwrap(), &[0, 1, 0, 1, 0, 1, 0, 1, 2]);
    }

    #[test]
    fn absolute_and_none() {
        let l = build_layout(SchemeId::Ar, 1);
        assert_eq!(assign_positions(PeScheme::Absolute, &l).indices().unwrap(), &[0, 1, 2]);
        assert_eq!(assign_positions(PeScheme::None, &l), PositionAssignment(None));
    }

    #[test]
    fn symmetric_positions_are_equivariant() {
        let l = build_layout(SchemeId::InvIcl, 4);
        let sigma = [2, 0, 3, 1];
        let perm = l.token_permutation(&sigma);
        let sym = assign_positions(PeScheme::Symmetric, &l).0.unwrap();
        let mut moved = vec![0; sym.len()];
        for (t, &p) in sym.iter().enumerate() {
            moved[perm[t]] = p;
        }
        assert_eq!(moved, sym);

        let abs = assign_positions(PeScheme::Absolute, &l).0.unwrap();
        let mut moved = vec![0; abs.len()];
        for (t, &p) in abs.iter().enumerate() {
            moved[perm[t]] = p;
        }
        assert_ne!(moved, abs);
    }
}
