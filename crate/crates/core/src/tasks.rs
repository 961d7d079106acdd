//! Seeded generators for the three benchmark families: group word problems
//! (state tracking), copying, and bracketed modular arithmetic.
//!
//! Every generator is a pure function of (config, seed): replaying with the
//! same arguments is bit-identical.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{FpError, Result};

/// One batch of token sequences with per-position supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    pub tokens: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    pub loss_mask: Vec<Vec<bool>>,
    pub vocab_size: usize,
    pub lengths: Vec<usize>,
}

impl SequenceBatch {
    pub fn batch(&self) -> usize {
        self.tokens.len()
    }
    pub fn seq_len(&self) -> usize {
        self.tokens.first().map(|t| t.len()).unwrap_or(0)
    }
    pub fn supervised_positions(&self) -> usize {
        self.loss_mask
            .iter()
            .map(|m| m.iter().filter(|&&b| b).count())
            .sum()
    }
}

// ---------------------------------------------------------------------------
// Permutations and finite groups.
// ---------------------------------------------------------------------------

/// A bijection on [0, n), stored in one-line notation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    pub mapping: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation {
            mapping: (0..n).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_valid(&self) -> bool {
        let n = self.n();
        let mut seen = vec![false; n];
        for &v in &self.mapping {
            if v >= n || seen[v] {
                return false;
            }
            seen[v] = true;
        }
        true
    }

    /// Parity via inversion count; true when even.
    pub fn is_even(&self) -> bool {
        let m = &self.mapping;
        let mut inv = 0usize;
        for i in 0..m.len() {
            for j in i + 1..m.len() {
                if m[i] > m[j] {
                    inv += 1;
                }
            }
        }
        inv % 2 == 0
    }
}

/// (p ∘ q)(i) = p(q(i)).
pub fn compose(p: &Permutation, q: &Permutation) -> Result<Permutation> {
    if p.n() != q.n() {
        return Err(FpError::shape(
            "compose",
            format!("degree {}", p.n()),
            format!("{}", q.n()),
        ));
    }
    Ok(Permutation {
        mapping: q.mapping.iter().map(|&i| p.mapping[i]).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKind {
    /// Full symmetric group S_n.
    Symmetric,
    /// Alternating group A_n (even permutations).
    Alternating,
    /// Cyclic group Z_n (rotations i ↦ i + k mod n).
    Cyclic,
}

/// A finite group with a canonical element enumeration (lexicographic
/// one-line notation; rotation amount for the cyclic case).
pub struct Group {
    pub kind: GroupKind,
    pub n: usize,
    pub elements: Vec<Permutation>,
    index: HashMap<Permutation, usize>,
}

fn permutations_lex(n: usize) -> Vec<Permutation> {
    let mut out = Vec::new();
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn rec(n: usize, current: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Permutation>) {
        if current.len() == n {
            out.push(Permutation {
                mapping: current.clone(),
            });
            return;
        }
        for v in 0..n {
            if !used[v] {
                used[v] = true;
                current.push(v);
                rec(n, current, used, out);
                current.pop();
                used[v] = false;
            }
        }
    }
    rec(n, &mut current, &mut used, &mut out);
    out
}

impl Group {
    pub fn new(kind: GroupKind, n: usize) -> Result<Self> {
        if n == 0 || (kind != GroupKind::Cyclic && n > 8) {
            return Err(FpError::InvalidConfig(format!(
                "unsupported group degree {n}"
            )));
        }
        let elements: Vec<Permutation> = match kind {
            GroupKind::Symmetric => permutations_lex(n),
            GroupKind::Alternating => permutations_lex(n)
                .into_iter()
                .filter(|p| p.is_even())
                .collect(),
            GroupKind::Cyclic => (0..n)
                .map(|k| Permutation {
                    mapping: (0..n).map(|i| (i + k) % n).collect(),
                })
                .collect(),
        };
        let index = elements
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, p)| (p, i))
            .collect();
        Ok(Group {
            kind,
            n,
            elements,
            index,
        })
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn id_of(&self, p: &Permutation) -> usize {
        self.index[p]
    }
}

/// Uniformly sampled group elements; the target at position t is the id of
/// the running product g_t ∘ … ∘ g_1. Every position is supervised.
pub fn gen_word_problem(
    kind: GroupKind,
    n: usize,
    t_len: usize,
    batch: usize,
    seed: u64,
) -> Result<SequenceBatch> {
    let group = Group::new(kind, n)?;
    let order = group.order();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut toks = Vec::with_capacity(t_len);
        let mut tgts = Vec::with_capacity(t_len);
        let mut prefix = Permutation::identity(n);
        for _ in 0..t_len {
            let g = rng.random_range(0..order);
            toks.push(g as u32);
            prefix = compose(&group.elements[g], &prefix)?;
            tgts.push(group.id_of(&prefix) as u32);
        }
        tokens.push(toks);
        targets.push(tgts);
    }
    Ok(SequenceBatch {
        tokens,
        targets,
        loss_mask: vec![vec![true; t_len]; batch],
        vocab_size: order,
        lengths: vec![t_len; batch],
    })
}

// ---------------------------------------------------------------------------
// Copying.
// ---------------------------------------------------------------------------

/// Token layout: [content (len ∈ range), COPY delimiter, target region,
/// padding]. Supervision sits only on the target region, with the content
/// as targets; the region's input tokens carry the previous ground-truth
/// character (the delimiter anchors the first slot), matching the
/// autoregressive convention of the copying benchmark. Ids: content <
/// `vocab`, delimiter = vocab, pad = vocab + 1.
pub fn gen_copy(
    vocab: usize,
    len_range: (usize, usize),
    context_len: usize,
    batch: usize,
    seed: u64,
) -> Result<SequenceBatch> {
    let (lo, hi) = len_range;
    if lo == 0 || hi < lo {
        return Err(FpError::InvalidConfig("bad copy length range".into()));
    }
    if hi + hi + 2 > context_len {
        return Err(FpError::InvalidConfig(format!(
            "copy needs 2*hi + 2 <= context_len, got hi={hi}, context={context_len}"
        )));
    }
    let delim = vocab as u32;
    let pad = vocab as u32 + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    let mut mask = Vec::with_capacity(batch);
    let mut lengths = Vec::with_capacity(batch);
    for _ in 0..batch {
        let len = rng.random_range(lo..=hi);
        let content: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab) as u32).collect();
        let mut toks = vec![pad; context_len];
        let mut tgts = vec![0u32; context_len];
        let mut msk = vec![false; context_len];
        toks[..len].copy_from_slice(&content);
        toks[len] = delim;
        toks[len + 1] = delim;
        for i in 1..len {
            toks[len + 1 + i] = content[i - 1];
        }
        for i in 0..len {
            tgts[len + 1 + i] = content[i];
            msk[len + 1 + i] = true;
        }
        tokens.push(toks);
        targets.push(tgts);
        mask.push(msk);
        lengths.push(2 * len + 1);
    }
    Ok(SequenceBatch {
        tokens,
        targets,
        loss_mask: mask,
        vocab_size: vocab + 2,
        lengths,
    })
}

// ---------------------------------------------------------------------------
// Bracketed modular arithmetic.
// ---------------------------------------------------------------------------

/// Structural token ids, offset by the modulus.
pub mod arith_tokens {
    pub const LPAREN: usize = 0;
    pub const RPAREN: usize = 1;
    pub const PLUS: usize = 2;
    pub const MINUS: usize = 3;
    pub const TIMES: usize = 4;
    pub const EQUALS: usize = 5;
    pub const PAD: usize = 6;
    pub const STRUCTURAL: usize = 7;
}

const ARITH_RETRY_CAP: usize = 2000;

struct ArithGen<'r> {
    rng: &'r mut ChaCha8Rng,
    modulus: i64,
}

impl ArithGen<'_> {
    /// expr → digit | "(" body ")", body → digit | expr op expr.
    /// The top level is always bracketed ("(4)", "(2+3)").
    fn body(&mut self, depth: usize, out: &mut Vec<u32>) -> i64 {
        let m = self.modulus;
        if depth == 0 || self.rng.random::<f64>() < 0.3 {
            let d = self.rng.random_range(0..m);
            out.push(d as u32);
            return d;
        }
        let left = self.expr(depth - 1, out);
        let op = self.rng.random_range(0..3u32);
        out.push(m as u32 + arith_tokens::PLUS as u32 + op);
        let right = self.expr(depth - 1, out);
        let v = match op {
            0 => left + right,
            1 => left - right,
            _ => left * right,
        };
        v.rem_euclid(m)
    }

    fn expr(&mut self, depth: usize, out: &mut Vec<u32>) -> i64 {
        let m = self.modulus;
        if depth == 0 || self.rng.random::<f64>() < 0.4 {
            let d = self.rng.random_range(0..m);
            out.push(d as u32);
            return d;
        }
        out.push(m as u32 + arith_tokens::LPAREN as u32);
        let v = self.body(depth, out);
        out.push(m as u32 + arith_tokens::RPAREN as u32);
        v
    }

    fn top(&mut self, depth: usize) -> (Vec<u32>, i64) {
        let m = self.modulus;
        let mut out = vec![m as u32 + arith_tokens::LPAREN as u32];
        let v = self.body(depth, &mut out);
        out.push(m as u32 + arith_tokens::RPAREN as u32);
        (out, v)
    }
}

/// Well-bracketed expressions over digits and {+, -, ·}; the single
/// supervised position follows the '=' token and its target is the value
/// modulo `modulus` (as a digit id). Vocab: modulus digits + 7 structural.
pub fn gen_mod_arith(
    modulus: usize,
    len_range: (usize, usize),
    context_len: usize,
    batch: usize,
    seed: u64,
) -> Result<SequenceBatch> {
    if modulus > 10 || modulus < 2 {
        return Err(FpError::InvalidConfig(
            "modulus must lie in [2, 10] (digit tokens)".into(),
        ));
    }
    let (lo, hi) = len_range;
    if lo < 3 || hi < lo || hi + 2 > context_len {
        return Err(FpError::InvalidConfig(format!(
            "mod-arith needs 3 <= lo <= hi and hi + 2 <= context_len, got ({lo},{hi}) ctx {context_len}"
        )));
    }
    let m = modulus as u32;
    let pad = m + arith_tokens::PAD as u32;
    let equals = m + arith_tokens::EQUALS as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth_cap = (usize::BITS - hi.leading_zeros()) as usize + 1;
    let mut tokens = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    let mut mask = Vec::with_capacity(batch);
    let mut lengths = Vec::with_capacity(batch);
    for _ in 0..batch {
        let mut found = None;
        for _ in 0..ARITH_RETRY_CAP {
            let mut g = ArithGen {
                rng: &mut rng,
                modulus: modulus as i64,
            };
            let (expr, value) = g.top(depth_cap);
            if expr.len() >= lo && expr.len() <= hi {
                found = Some((expr, value));
                break;
            }
        }
        let (expr, value) = found.ok_or(FpError::LengthUnreachable {
            retries: ARITH_RETRY_CAP,
        })?;
        let mut toks = vec![pad; context_len];
        let mut tgts = vec![0u32; context_len];
        let mut msk = vec![false; context_len];
        toks[..expr.len()].copy_from_slice(&expr);
        toks[expr.len()] = equals;
        tgts[expr.len() + 1] = value as u32;
        msk[expr.len() + 1] = true;
        lengths.push(expr.len() + 2);
        tokens.push(toks);
        targets.push(tgts);
        mask.push(msk);
    }
    Ok(SequenceBatch {
        tokens,
        targets,
        loss_mask: mask,
        vocab_size: modulus + arith_tokens::STRUCTURAL,
        lengths,
    })
}

// ---------------------------------------------------------------------------
// Flat binary batch format.
// ---------------------------------------------------------------------------

const BATCH_MAGIC: &[u8; 5] = b"FPDS1";

/// Header (magic, version, B, T, vocab), then little-endian i32 arrays:
/// tokens, targets, mask as 0/1.
pub fn write_batch(w: &mut impl Write, batch: &SequenceBatch) -> Result<()> {
    let b = batch.batch() as u32;
    let t = batch.seq_len() as u32;
    w.write_all(BATCH_MAGIC)?;
    w.write_all(&[1u8])?;
    w.write_all(&b.to_le_bytes())?;
    w.write_all(&t.to_le_bytes())?;
    w.write_all(&(batch.vocab_size as u32).to_le_bytes())?;
    let mut dump = |rows: &dyn Fn(usize, usize) -> i32| -> Result<()> {
        for i in 0..b as usize {
            for j in 0..t as usize {
                w.write_all(&rows(i, j).to_le_bytes())?;
            }
        }
        Ok(())
    };
    dump(&|i, j| batch.tokens[i][j] as i32)?;
    dump(&|i, j| batch.targets[i][j] as i32)?;
    dump(&|i, j| batch.loss_mask[i][j] as i32)?;
    Ok(())
}

/// Inverse of [`write_batch`]. Per-sequence lengths are not part of the
/// format; they are restored as the full context length.
pub fn read_batch(r: &mut impl Read) -> Result<SequenceBatch> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != BATCH_MAGIC {
        return Err(FpError::Format("bad batch magic".into()));
    }
    let mut ver = [0u8; 1];
    r.read_exact(&mut ver)?;
    if ver[0] != 1 {
        return Err(FpError::Format(format!("unsupported batch version {}", ver[0])));
    }
    let mut quad = [0u8; 4];
    let mut read_u32 = |r: &mut dyn Read| -> Result<u32> {
        r.read_exact(&mut quad)?;
        Ok(u32::from_le_bytes(quad))
    };
    let b = read_u32(r)? as usize;
    let t = read_u32(r)? as usize;
    let vocab = read_u32(r)? as usize;
    let read_grid = |r: &mut dyn Read| -> Result<Vec<Vec<i32>>> {
        let mut grid = Vec::with_capacity(b);
        let mut buf = [0u8; 4];
        for _ in 0..b {
            let mut row = Vec::with_capacity(t);
            for _ in 0..t {
                r.read_exact(&mut buf)?;
                row.push(i32::from_le_bytes(buf));
            }
            grid.push(row);
        }
        Ok(grid)
    };
    let tokens = read_grid(r)?;
    let targets = read_grid(r)?;
    let mask = read_grid(r)?;
    Ok(SequenceBatch {
        tokens: tokens
            .into_iter()
            .map(|row| row.into_iter().map(|v| v as u32).collect())
            .collect(),
        targets: targets
            .into_iter()
            .map(|row| row.into_iter().map(|v| v as u32).collect())
            .collect(),
        loss_mask: mask
            .into_iter()
            .map(|row| row.into_iter().map(|v| v != 0).collect())
            .collect(),
        vocab_size: vocab,
        lengths: vec![t; b],
    })
}
