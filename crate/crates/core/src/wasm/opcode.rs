//! Opcode table: which immediates follow each supported opcode.
//!
//! Covers WebAssembly 1.0 plus the sign-extension, non-trapping
//! float-to-int, bulk-memory and reference-type instructions that current
//! toolchains emit by default. SIMD and atomics are rejected.

use super::leb128::{decode_sleb128, decode_u32, decode_uleb128};
use crate::error::{Error, Result};

pub const UNREACHABLE: u8 = 0x00;
pub const NOP: u8 = 0x01;
pub const BLOCK: u8 = 0x02;
pub const LOOP: u8 = 0x03;
pub const IF: u8 = 0x04;
pub const ELSE: u8 = 0x05;
pub const END: u8 = 0x0b;
pub const BR: u8 = 0x0c;
pub const BR_IF: u8 = 0x0d;
pub const BR_TABLE: u8 = 0x0e;
pub const RETURN: u8 = 0x0f;
pub const CALL: u8 = 0x10;
pub const CALL_INDIRECT: u8 = 0x11;
pub const DROP: u8 = 0x1a;
pub const SELECT: u8 = 0x1b;
pub const SELECT_TYPED: u8 = 0x1c;
pub const LOCAL_GET: u8 = 0x20;
pub const LOCAL_SET: u8 = 0x21;
pub const LOCAL_TEE: u8 = 0x22;
pub const GLOBAL_GET: u8 = 0x23;
pub const GLOBAL_SET: u8 = 0x24;
pub const I32_CONST: u8 = 0x41;
pub const I64_CONST: u8 = 0x42;
pub const F32_CONST: u8 = 0x43;
pub const F64_CONST: u8 = 0x44;
pub const F64_GT: u8 = 0x64;
pub const F64_ADD: u8 = 0xa0;
pub const F64_DIV: u8 = 0xa3;
pub const PREFIX_FC: u8 = 0xfc;

pub const I32_LOAD: u8 = 0x28;
pub const I32_LOAD8_U: u8 = 0x2d;
pub const I32_STORE: u8 = 0x36;
pub const I64_STORE: u8 = 0x37;
pub const I32_STORE8: u8 = 0x3a;
pub const I32_EQZ: u8 = 0x45;
pub const I32_LT_S: u8 = 0x48;
pub const I32_GT_S: u8 = 0x4a;
pub const I32_GE_S: u8 = 0x4e;
pub const I32_GE_U: u8 = 0x4f;
pub const I32_ADD: u8 = 0x6a;
pub const I32_SUB: u8 = 0x6b;
pub const I32_MUL: u8 = 0x6c;
pub const I32_REM_U: u8 = 0x70;
pub const I32_AND: u8 = 0x71;
pub const I32_OR: u8 = 0x72;
pub const I32_XOR: u8 = 0x73;
pub const I32_SHL: u8 = 0x74;
pub const I32_SHR_U: u8 = 0x76;
pub const I32_ROTL: u8 = 0x77;
pub const I32_ROTR: u8 = 0x78;
pub const I64_ADD: u8 = 0x7c;
pub const I64_MUL: u8 = 0x7e;
pub const I64_XOR: u8 = 0x85;
pub const I64_SHR_U: u8 = 0x88;
pub const I64_ROTL: u8 = 0x89;
pub const F64_MUL: u8 = 0xa2;
pub const I32_WRAP_I64: u8 = 0xa7;
pub const I64_EXTEND_I32_U: u8 = 0xad;
pub const F64_CONVERT_I32_S: u8 = 0xb7;

/// Block type byte for a block with no params and no results.
pub const BLOCKTYPE_EMPTY: u8 = 0x40;

/// Value type encodings.
pub mod valtype {
    pub const I32: u8 = 0x7f;
    pub const I64: u8 = 0x7e;
    pub const F32: u8 = 0x7d;
    pub const F64: u8 = 0x7c;
    pub const V128: u8 = 0x7b;
    pub const FUNCREF: u8 = 0x70;
    pub const EXTERNREF: u8 = 0x6f;

    pub fn is_valtype(b: u8) -> bool {
        matches!(b, I32 | I64 | F32 | F64 | V128 | FUNCREF | EXTERNREF)
    }
}

/// Opcode of an instruction; prefixed opcodes carry their LEB128 sub-opcode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Plain(u8),
    Prefixed(u8, u32),
}

impl std::fmt::Display for Opcode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Opcode::Plain(b) => write!(f, "0x{b:02x}"),
            Opcode::Prefixed(p, s) => write!(f, "0x{p:02x} {s}"),
        }
    }
}

/// Decodes the instruction starting at `offset` and returns its opcode and
/// total byte length (opcode plus immediates).
pub fn decode_instruction(bytes: &[u8], offset: usize) -> Result<(Opcode, usize)> {
    let op = *bytes
        .get(offset)
        .ok_or_else(|| Error::malformed(offset, "expected instruction, found end of body"))?;
    let mut cur = offset + 1;
    let u32_imm = |cur: &mut usize| -> Result<u32> {
        let (v, n) = decode_u32(bytes, *cur)?;
        *cur += n;
        Ok(v)
    };
    let unsupported = |opcode: String| Error::UnsupportedOpcode { offset, opcode };

    let opcode = match op {
        UNREACHABLE | NOP | ELSE | END | RETURN | DROP | SELECT => Opcode::Plain(op),
        BLOCK | LOOP | IF => {
            let bt = *bytes
                .get(cur)
                .ok_or_else(|| Error::malformed(cur, "missing block type"))?;
            if bt == BLOCKTYPE_EMPTY || valtype::is_valtype(bt) {
                cur += 1;
            } else {
                // type index, encoded as a non-negative s33
                let (idx, n) = decode_sleb128(bytes, cur, 5)?;
                if idx < 0 {
                    return Err(Error::malformed(cur, "negative block type index"));
                }
                cur += n;
            }
            Opcode::Plain(op)
        }
        BR | BR_IF | CALL | LOCAL_GET | LOCAL_SET | LOCAL_TEE | GLOBAL_GET | GLOBAL_SET
        | 0x25 | 0x26 | 0xd2 => {
            u32_imm(&mut cur)?;
            Opcode::Plain(op)
        }
        BR_TABLE => {
            let n = u32_imm(&mut cur)?;
            for _ in 0..=n {
                u32_imm(&mut cur)?;
            }
            Opcode::Plain(op)
        }
        CALL_INDIRECT => {
            u32_imm(&mut cur)?;
            u32_imm(&mut cur)?;
            Opcode::Plain(op)
        }
        SELECT_TYPED => {
            let n = u32_imm(&mut cur)?;
            for _ in 0..n {
                let t = *bytes
                    .get(cur)
                    .ok_or_else(|| Error::malformed(cur, "truncated select type"))?;
                if !valtype::is_valtype(t) {
                    return Err(Error::malformed(cur, "bad value type in select"));
                }
                cur += 1;
            }
            Opcode::Plain(op)
        }
        // loads and stores: memarg = align, offset
        0x28..=0x3e => {
            u32_imm(&mut cur)?;
            let (_, n) = decode_uleb128(bytes, cur)?;
            cur += n;
            Opcode::Plain(op)
        }
        // memory.size / memory.grow: memory index
        0x3f | 0x40 => {
            u32_imm(&mut cur)?;
            Opcode::Plain(op)
        }
        I32_CONST => {
            cur += decode_sleb128(bytes, cur, 5)?.1;
            Opcode::Plain(op)
        }
        I64_CONST => {
            cur += decode_sleb128(bytes, cur, 10)?.1;
            Opcode::Plain(op)
        }
        F32_CONST => {
            cur += 4;
            Opcode::Plain(op)
        }
        F64_CONST => {
            cur += 8;
            Opcode::Plain(op)
        }
        // numeric instructions without immediates, including sign extension
        0x45..=0xc4 => Opcode::Plain(op),
        // ref.null t
        0xd0 => {
            let t = *bytes
                .get(cur)
                .ok_or_else(|| Error::malformed(cur, "truncated ref.null"))?;
            if t != valtype::FUNCREF && t != valtype::EXTERNREF {
                return Err(Error::malformed(cur, "bad reference type"));
            }
            cur += 1;
            Opcode::Plain(op)
        }
        0xd1 => Opcode::Plain(op),
        PREFIX_FC => {
            let sub = u32_imm(&mut cur)?;
            match sub {
                0..=7 => {}
                // memory.init data, mem / table.init elem, table / table.copy dst, src
                8 | 12 | 14 => {
                    u32_imm(&mut cur)?;
                    u32_imm(&mut cur)?;
                }
                // memory.copy dst, src
                10 => {
                    u32_imm(&mut cur)?;
                    u32_imm(&mut cur)?;
                }
                // data.drop, memory.fill, elem.drop, table.grow/size/fill
                9 | 11 | 13 | 15 | 16 | 17 => {
                    u32_imm(&mut cur)?;
                }
                _ => return Err(unsupported(format!("0xfc {sub}"))),
            }
            Opcode::Prefixed(op, sub)
        }
        other => return Err(unsupported(format!("0x{other:02x}"))),
    };

    if cur > bytes.len() {
        return Err(Error::malformed(offset, "instruction immediates run past the body"));
    }
    Ok((opcode, cur - offset))
}

/// Stack height effect `(pops, pushes)` of an instruction, for the
/// opcodes whose effect does not depend on module context. Control
/// instructions are handled by the caller.
pub fn simple_stack_effect(op: Opcode) -> Option<(usize, usize)> {
    let Opcode::Plain(b) = op else {
        return match op {
            Opcode::Prefixed(PREFIX_FC, 0..=7) => Some((1, 1)),
            _ => None,
        };
    };
    Some(match b {
        NOP => (0, 0),
        DROP => (1, 0),
        SELECT => (3, 1),
        LOCAL_GET | GLOBAL_GET => (0, 1),
        LOCAL_SET | GLOBAL_SET => (1, 0),
        LOCAL_TEE => (1, 1),
        0x28..=0x35 => (1, 1),
        0x36..=0x3e => (2, 0),
        0x3f => (0, 1),
        0x40 => (1, 1),
        I32_CONST | I64_CONST | F32_CONST | F64_CONST => (0, 1),
        // eqz
        0x45 | 0x50 => (1, 1),
        // i32/i64 comparisons
        0x46..=0x4f | 0x51..=0x5a => (2, 1),
        // float comparisons
        0x5b..=0x66 => (2, 1),
        // i32 unary clz/ctz/popcnt, binary ops
        0x67..=0x69 => (1, 1),
        0x6a..=0x78 => (2, 1),
        0x79..=0x7b => (1, 1),
        0x7c..=0x8a => (2, 1),
        // f32 unary then binary
        0x8b..=0x91 => (1, 1),
        0x92..=0x98 => (2, 1),
        // f64 unary then binary
        0x99..=0x9f => (1, 1),
        0xa0..=0xa6 => (2, 1),
        // conversions, reinterpretations, sign extension
        0xa7..=0xc4 => (1, 1),
        _ => return None,
    })
}
