//! Synthetic miner-like and benign-like modules for desk-scale experiments.
//!
//! Miner-like modules are dominated by unrolled hash rounds over large
//! constants and a random lookup table. Benign-like modules are dominated
//! by branchy, call-heavy helpers over small constants and text data.
//! Each module mixes both function styles in class-dependent proportions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Sample, SourceLabel};
use crate::wasm::builder::{Code, ModuleBuilder};
use crate::wasm::opcode::*;

const I32: u8 = valtype::I32;
const I64: u8 = valtype::I64;

const WORDS: &[&str] = &[
    "the", "click", "button", "render", "value", "layout", "widget", "event", "handler", "frame",
    "scroll", "text", "image", "load", "style", "node", "parent", "child", "index", "update",
];

/// Generates `n` modules of class `class`, each roughly `size_range` bytes.
///
/// Sample `i` is seeded from `(seed, i)` alone, so corpora with the same
/// seed share prefixes.
pub fn synth_corpus(seed: u64, n: usize, size_range: (usize, usize), class: SourceLabel) -> Vec<Sample> {
    let (lo, hi) = (size_range.0.min(size_range.1), size_range.0.max(size_range.1));
    (0..n)
        .map(|i| {
            let sample_seed = seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(i as u64)
                .wrapping_add(u64::from(class == SourceLabel::Malicious) << 63);
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
            let target = rng.gen_range(lo..=hi);
            let bytes = synth_module(&mut rng, target, class);
            Sample {
                id: format!("synth-{}-{seed}-{i:05}", class.as_str()),
                bytes,
                path: None,
                source_label: Some(class),
                model_label: None,
                assigned_class: None,
                provenance: format!("synthetic seed={seed} index={i}"),
            }
        })
        .collect()
}

fn synth_module(rng: &mut ChaCha8Rng, target_size: usize, class: SourceLabel) -> Vec<u8> {
    let miner_share = match class {
        SourceLabel::Malicious => rng.gen_range(0.6..0.95),
        SourceLabel::Benign => rng.gen_range(0.0..0.25),
    };
    let mut m = ModuleBuilder::new();
    let unary = m.func_type(&[I32], &[I32]);
    let hash_ty = m.func_type(&[I32, I32], &[I32]);
    let env_log = m.import_func("env", "log", unary);
    m.memory(1, None);

    let data: Vec<u8> = match class {
        SourceLabel::Malicious => {
            let len = (target_size / rng.gen_range(16..32)).max(16);
            (0..len).map(|_| rng.gen()).collect()
        }
        SourceLabel::Benign => {
            let len = (target_size / rng.gen_range(12..24)).max(16);
            text_bytes(rng, len)
        }
    };
    let data_len = data.len();
    m.data(0, data);

    let mut helpers: Vec<u32> = vec![env_log];
    let mut approx = 64 + data_len;
    let mut first = None;
    while approx < target_size {
        let (body, ty, locals) = if rng.gen_bool(miner_share) {
            (hash_function(rng), hash_ty, vec![(3, I32), (1, I64)])
        } else {
            (benign_function(rng, &helpers), unary, vec![(2, I32)])
        };
        approx += body.len() + 8;
        let idx = m.function(ty, &locals, body);
        if ty == unary {
            helpers.push(idx);
        }
        first.get_or_insert(idx);
    }
    if let Some(f) = first {
        m.export_func("main", f);
    }
    m.export_memory("memory");
    m.finish()
}

fn text_bytes(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        out.extend_from_slice(WORDS[rng.gen_range(0..WORDS.len())].as_bytes());
        out.push(if rng.gen_bool(0.1) { 0 } else { b' ' });
    }
    out.truncate(len);
    out
}

/// `(param i32 i32) (result i32)`: unrolled mixing rounds in a counted loop.
fn hash_function(rng: &mut ChaCha8Rng) -> Code {
    let mut c = Code::new();
    // locals: 0 seed, 1 count, 2 h, 3 i, 4 t, 5 wide
    c.local_get(0).i32_const(rng.gen()).op(I32_XOR).local_set(2);
    c.block(BLOCKTYPE_EMPTY).loop_(BLOCKTYPE_EMPTY);
    c.local_get(3).local_get(1).op(I32_GE_U).br_if(1);
    for _ in 0..rng.gen_range(3..9) {
        match rng.gen_range(0..6) {
            0 => {
                c.local_get(2).i32_const(rng.gen()).op(I32_MUL).local_set(2);
            }
            1 => {
                c.local_get(2).local_get(2).i32_const(rng.gen_range(1..31)).op(I32_ROTL).op(I32_XOR).local_set(2);
            }
            2 => {
                c.local_get(2)
                    .local_get(3)
                    .i32_const(0xfff)
                    .op(I32_AND)
                    .mem(I32_LOAD8_U, 0, rng.gen_range(0..4096))
                    .op(I32_XOR)
                    .i32_const(rng.gen())
                    .op(I32_MUL)
                    .local_set(2);
            }
            3 => {
                c.local_get(5)
                    .local_get(2)
                    .op(I64_EXTEND_I32_U)
                    .i64_const(rng.gen())
                    .op(I64_MUL)
                    .op(I64_XOR)
                    .i64_const(rng.gen_range(1..63))
                    .op(I64_ROTL)
                    .local_tee(5)
                    .i64_const(32)
                    .op(I64_SHR_U)
                    .op(I32_WRAP_I64)
                    .local_get(2)
                    .op(I32_ADD)
                    .local_set(2);
            }
            4 => {
                c.local_get(2).i32_const(rng.gen_range(1..31)).op(I32_SHR_U).local_get(2).op(I32_XOR).local_set(4);
                c.local_get(4).i32_const(rng.gen()).op(I32_ADD).local_set(2);
            }
            _ => {
                c.local_get(3)
                    .i32_const(2)
                    .op(I32_SHL)
                    .local_get(2)
                    .i32_const(rng.gen())
                    .op(I32_XOR)
                    .mem(I32_STORE, 2, rng.gen_range(0..1024) * 4);
            }
        }
    }
    c.local_get(3).i32_const(1).op(I32_ADD).local_set(3).br(0);
    c.end().end();
    c.local_get(2);
    c
}

/// `(param i32) (result i32)`: nested conditionals, calls and small constants.
fn benign_function(rng: &mut ChaCha8Rng, helpers: &[u32]) -> Code {
    let mut c = Code::new();
    let stmts = rng.gen_range(4..12);
    for _ in 0..stmts {
        benign_statement(rng, helpers, &mut c, 0);
    }
    c.local_get(1).local_get(0).op(I32_ADD);
    c
}

fn benign_statement(rng: &mut ChaCha8Rng, helpers: &[u32], c: &mut Code, depth: usize) {
    let small = |rng: &mut ChaCha8Rng| rng.gen_range(0..64);
    let choice = if depth >= 2 { rng.gen_range(0..4) } else { rng.gen_range(0..7) };
    match choice {
        0 => {
            c.local_get(rng.gen_range(0..3)).i32_const(small(rng)).op(I32_ADD).local_set(rng.gen_range(1..3));
        }
        1 => {
            let f = helpers[rng.gen_range(0..helpers.len())];
            c.local_get(rng.gen_range(0..3)).call(f).local_set(rng.gen_range(1..3));
        }
        2 => {
            c.i32_const(small(rng) * 4).local_get(rng.gen_range(0..3)).mem(I32_STORE, 2, small(rng) as u32);
        }
        3 => {
            c.i32_const(small(rng)).mem(I32_LOAD8_U, 0, small(rng) as u32).local_set(rng.gen_range(1..3));
        }
        4 => {
            c.local_get(0).i32_const(small(rng)).op(I32_GT_S).if_(BLOCKTYPE_EMPTY);
            for _ in 0..rng.gen_range(1..4) {
                benign_statement(rng, helpers, c, depth + 1);
            }
            if rng.gen_bool(0.5) {
                c.else_();
                benign_statement(rng, helpers, c, depth + 1);
            }
            c.end();
        }
        5 => {
            c.block(BLOCKTYPE_EMPTY);
            c.local_get(rng.gen_range(0..3)).op(I32_EQZ).br_if(0);
            for _ in 0..rng.gen_range(1..3) {
                benign_statement(rng, helpers, c, depth + 1);
            }
            c.end();
        }
        _ => {
            let arms = rng.gen_range(2..5u32);
            for _ in 0..=arms {
                c.block(BLOCKTYPE_EMPTY);
            }
            let targets: Vec<u32> = (0..arms).collect();
            c.local_get(0).i32_const(arms as i32).op(I32_REM_U).br_table(&targets, arms);
            for a in 0..arms {
                c.end();
                c.local_get(1).i32_const(small(rng)).op(I32_OR).local_set(1).br(arms - 1 - a);
            }
            c.end();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wasm::parse_module;

    #[test]
    fn seeded_and_sized() {
        let a = synth_corpus(3, 4, (3000, 6000), SourceLabel::Malicious);
        let b = synth_corpus(3, 4, (3000, 6000), SourceLabel::Malicious);
        assert_eq!(a.iter().map(|s| &s.bytes).collect::<Vec<_>>(), b.iter().map(|s| &s.bytes).collect::<Vec<_>>());
        for s in a.iter().chain(&synth_corpus(3, 4, (3000, 6000), SourceLabel::Benign)) {
            assert!(s.bytes.len() >= 2500 && s.bytes.len() < 9000, "{}", s.bytes.len());
            let m = parse_module(&s.bytes).unwrap();
            assert_eq!(m.encode(), s.bytes);
        }
    }

    #[test]
    fn classes_have_distinct_ids() {
        let a = synth_corpus(1, 2, (1000, 1000), SourceLabel::Malicious);
        let b = synth_corpus(1, 2, (1000, 1000), SourceLabel::Benign);
        assert_ne!(a[0].id, b[0].id);
        assert_ne!(a[0].bytes, b[0].bytes);
    }
}
