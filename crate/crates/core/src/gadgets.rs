//! Stack-neutral instruction gadgets that carry an editable 8-byte payload.
//!
//! The size-efficient gadget is `f64.const c; drop` (10 bytes). The
//! optimizer-resistant gadget threads the constant through a loop that
//! always runs exactly once:
//!
//! ```text
//! loop
//!   local.get $s  f64.const c  f64.add  local.tee $s
//!   local.get $s  f64.div  f64.const 42  f64.gt  br_if 0
//! end
//! ```
//!
//! `s/s` is `1.0` for any finite non-zero `s` and NaN otherwise, so the
//! comparison against 42 is always false and the back edge is never taken.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wasm::leb128::{decode_u32, write_uleb128};
use crate::wasm::opcode::{self, decode_instruction, simple_stack_effect, valtype, Opcode};
use crate::wasm::{count_instructions, Instruction, WasmModule};

/// Editable bytes per gadget.
pub const PAYLOAD_LEN: usize = 8;

/// Initial payload: every byte at the midpoint so the attack can move
/// each pixel both up and down.
pub const INITIAL_PAYLOAD: [u8; PAYLOAD_LEN] = [0x80; PAYLOAD_LEN];

/// `42.0` as the little-endian bytes of an f64.
const FORTY_TWO: [u8; 8] = [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x45, 0x40];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GadgetKind {
    /// Size-efficient: `f64.const; drop`.
    Se,
    /// Optimizer-resistant single-pass loop.
    Or,
}

impl GadgetKind {
    pub const ALL: [GadgetKind; 2] = [GadgetKind::Se, GadgetKind::Or];

    /// Index of the `f64.const` carrying the payload within the gadget.
    fn payload_instruction(self) -> usize {
        match self {
            GadgetKind::Se => 0,
            GadgetKind::Or => 2,
        }
    }

    fn instruction_count(self) -> usize {
        match self {
            GadgetKind::Se => 2,
            GadgetKind::Or => 11,
        }
    }
}

impl fmt::Display for GadgetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GadgetKind::Se => "se",
            GadgetKind::Or => "or",
        })
    }
}

impl FromStr for GadgetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "se" => Ok(GadgetKind::Se),
            "or" => Ok(GadgetKind::Or),
            other => Err(Error::InvalidConfig(format!("unknown gadget kind {other:?}"))),
        }
    }
}

fn ins(bytes: &[u8]) -> Instruction {
    Instruction::from_bytes(bytes).expect("gadget instructions are well formed")
}

fn f64_const(payload: [u8; PAYLOAD_LEN]) -> Instruction {
    let mut b = [0u8; 9];
    b[0] = opcode::F64_CONST;
    b[1..].copy_from_slice(&payload);
    ins(&b)
}

fn with_local(op: u8, local: u32) -> Instruction {
    let mut b = vec![op];
    write_uleb128(&mut b, u64::from(local));
    ins(&b)
}

/// `f64.const payload; drop`.
pub fn make_se_gadget(payload: [u8; PAYLOAD_LEN]) -> Vec<Instruction> {
    vec![f64_const(payload), ins(&[opcode::DROP])]
}

/// Single-pass loop using the f64 local `scratch_local` as accumulator.
pub fn make_or_gadget(payload: [u8; PAYLOAD_LEN], scratch_local: u32) -> Vec<Instruction> {
    vec![
        ins(&[opcode::LOOP, opcode::BLOCKTYPE_EMPTY]),
        with_local(opcode::LOCAL_GET, scratch_local),
        f64_const(payload),
        ins(&[opcode::F64_ADD]),
        with_local(opcode::LOCAL_TEE, scratch_local),
        with_local(opcode::LOCAL_GET, scratch_local),
        ins(&[opcode::F64_DIV]),
        f64_const(FORTY_TWO),
        ins(&[opcode::F64_GT]),
        ins(&[opcode::BR_IF, 0x00]),
        ins(&[opcode::END]),
    ]
}

pub fn gadget_bytes(gadget: &[Instruction]) -> Vec<u8> {
    gadget.iter().flat_map(|i| i.bytes().iter().copied()).collect()
}

/// Offset of the first payload byte within an encoded gadget.
pub fn payload_offset_in_gadget(kind: GadgetKind, scratch_local: u32) -> usize {
    match kind {
        GadgetKind::Se => 1,
        // loop(2) + local.get(1 + leb) + f64.const opcode(1)
        GadgetKind::Or => 2 + 1 + crate::wasm::leb128::uleb128_len(u64::from(scratch_local)) + 1,
    }
}

/// Absolute offsets of every editable payload byte in an instrumented binary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadMap {
    pub offsets: Vec<usize>,
    pub gadget_count: usize,
    pub kind: GadgetKind,
    pub rng_seed: u64,
    pub density: f64,
    /// Length of the instrumented binary the offsets refer to.
    pub binary_len: usize,
}

impl PayloadMap {
    /// Overwrites every payload byte of `binary` with `payload`.
    pub fn fill(&self, binary: &mut [u8], payload: [u8; PAYLOAD_LEN]) {
        for chunk in self.offsets.chunks(PAYLOAD_LEN) {
            for (&off, &b) in chunk.iter().zip(payload.iter()) {
                binary[off] = b;
            }
        }
    }

    /// Writes a distinct seeded marker into each gadget's payload and
    /// returns the markers in gadget order. Markers are finite, non-zero
    /// f64 values so the written binary stays well formed.
    pub fn fill_markers(&self, binary: &mut [u8], seed: u64) -> Vec<[u8; PAYLOAD_LEN]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.offsets
            .chunks(PAYLOAD_LEN)
            .map(|chunk| {
                let v = 1.0 + f64::from(rng.gen::<u32>()) / f64::from(u32::MAX);
                let marker = (v * if rng.gen() { 1.0 } else { -1.0 }).to_le_bytes();
                for (&off, &b) in chunk.iter().zip(marker.iter()) {
                    binary[off] = b;
                }
                marker
            })
            .collect()
    }
}

/// How many of `markers` still occur verbatim in `binary`.
pub fn surviving_payloads(binary: &[u8], markers: &[[u8; PAYLOAD_LEN]]) -> usize {
    let present: HashSet<&[u8]> = binary.windows(PAYLOAD_LEN).collect();
    markers.iter().filter(|m| present.contains(&m[..])).count()
}

/// `max(1, floor(density * instructions))`.
pub fn gadget_count_for(density: f64, instructions: usize) -> usize {
    ((density * instructions as f64).floor() as usize).max(1)
}

/// Inserts gadgets at uniformly drawn instruction boundaries.
///
/// Candidate points are "before instruction i" for every instruction of
/// every defined body, so gadgets may precede the terminal `end` but never
/// follow it. For [`GadgetKind::Or`] each instrumented function gets one
/// fresh f64 scratch local shared by its gadgets.
pub fn insert_gadgets(
    module: &WasmModule,
    kind: GadgetKind,
    density: f64,
    seed: u64,
) -> Result<(WasmModule, PayloadMap)> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::InvalidDensity(density));
    }
    let total = count_instructions(module);
    if module.code.is_none() || total == 0 {
        return Err(Error::NotInstrumentable(
            "module has no defined function bodies".into(),
        ));
    }
    let n = gadget_count_for(density, total);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, total, n).into_vec();
    picks.sort_unstable();

    let param_counts = match kind {
        GadgetKind::Or => module.defined_function_param_counts()?,
        GadgetKind::Se => Vec::new(),
    };

    let mut out = module.clone();
    let functions = &mut out.code.as_mut().expect("checked above").functions;
    // (function, instruction index of the payload constant) in final layout
    let mut payload_sites: Vec<(usize, usize)> = Vec::with_capacity(n);
    let mut picks = picks.into_iter().peekable();
    let mut base = 0usize;
    for (fi, func) in functions.iter_mut().enumerate() {
        let len = func.instructions().len();
        let mut local_points = Vec::new();
        while let Some(&p) = picks.peek() {
            if p >= base + len {
                break;
            }
            local_points.push(p - base);
            picks.next();
        }
        base += len;
        if local_points.is_empty() {
            continue;
        }
        let gadget = match kind {
            GadgetKind::Se => make_se_gadget(INITIAL_PAYLOAD),
            GadgetKind::Or => {
                let idx = param_counts[fi] + func.push_local(valtype::F64);
                let idx = u32::try_from(idx).map_err(|_| {
                    Error::NotInstrumentable(format!("function {fi} has too many locals"))
                })?;
                make_or_gadget(INITIAL_PAYLOAD, idx)
            }
        };
        let width = kind.instruction_count();
        for (j, &p) in local_points.iter().enumerate() {
            payload_sites.push((fi, p + j * width + kind.payload_instruction()));
        }
        for &p in local_points.iter().rev() {
            func.insert(p, gadget.iter().cloned());
        }
    }

    let encoded = out.encode_traced();
    let mut offsets = Vec::with_capacity(n * PAYLOAD_LEN);
    let mut cursor: Option<(usize, usize, usize)> = None; // (function, instr index, byte offset)
    for &(fi, ii) in &payload_sites {
        let instrs = out.functions()[fi].instructions();
        let (mut at_i, mut at_b) = match cursor {
            Some((f, i, b)) if f == fi => (i, b),
            _ => (0, encoded.function_starts[fi]),
        };
        while at_i < ii {
            at_b += instrs[at_i].byte_length();
            at_i += 1;
        }
        debug_assert_eq!(encoded.bytes[at_b], opcode::F64_CONST);
        offsets.extend((at_b + 1)..(at_b + 1 + PAYLOAD_LEN));
        cursor = Some((fi, at_i, at_b));
    }

    let map = PayloadMap {
        offsets,
        gadget_count: n,
        kind,
        rng_seed: seed,
        density,
        binary_len: encoded.bytes.len(),
    };
    Ok((out, map))
}

/// Symbolic stack walk over a gadget: true iff it never pops below its
/// entry height and leaves the stack height unchanged.
///
/// Instructions whose effect needs module context (calls, branches that
/// leave the gadget, typed blocks) make the check fail.
pub fn verify_stack_neutrality(bytes: &[u8]) -> bool {
    struct Frame {
        height: usize,
        results: usize,
    }
    let mut height = 0usize;
    let mut frames: Vec<Frame> = Vec::new();
    let mut cur = 0;
    while cur < bytes.len() {
        let Ok((op, len)) = decode_instruction(bytes, cur) else {
            return false;
        };
        let floor = frames.last().map_or(0, |f| f.height);
        let pop = |height: &mut usize, n: usize| -> bool {
            if *height < floor + n {
                return false;
            }
            *height -= n;
            true
        };
        match op {
            Opcode::Plain(b @ (opcode::BLOCK | opcode::LOOP | opcode::IF)) => {
                if b == opcode::IF && !pop(&mut height, 1) {
                    return false;
                }
                let results = match bytes[cur + 1] {
                    opcode::BLOCKTYPE_EMPTY => 0,
                    t if valtype::is_valtype(t) => 1,
                    _ => return false,
                };
                frames.push(Frame { height, results });
            }
            Opcode::Plain(opcode::END) => {
                let Some(frame) = frames.pop() else {
                    return false;
                };
                if height != frame.height + frame.results {
                    return false;
                }
            }
            Opcode::Plain(opcode::BR_IF) => {
                if !pop(&mut height, 1) {
                    return false;
                }
                let Ok((depth, _)) = decode_u32(bytes, cur + 1) else {
                    return false;
                };
                let Some(target) = frames
                    .len()
                    .checked_sub(depth as usize + 1)
                    .map(|i| &frames[i])
                else {
                    return false;
                };
                // a loop label takes no values; void blocks neither
                if target.results != 0 {
                    return false;
                }
            }
            other => {
                let Some((pops, pushes)) = simple_stack_effect(other) else {
                    return false;
                };
                if !pop(&mut height, pops) {
                    return false;
                }
                height += pushes;
            }
        }
        cur += len;
    }
    frames.is_empty() && height == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wasm::parse_module;

    const FIG_SE_ZERO: [u8; 10] = [0x44, 0, 0, 0, 0, 0, 0, 0, 0, 0x1a];
    const FIG_OR_ZERO: [u8; 32] = [
        0x03, 0x40, // loop
        0x20, 0x02, // local.get 2
        0x44, 0, 0, 0, 0, 0, 0, 0, 0, // f64.const 0
        0xa0, // f64.add
        0x22, 0x02, // local.tee 2
        0x20, 0x02, // local.get 2
        0xa3, // f64.div
        0x44, 0, 0, 0, 0, 0, 0, 0x45, 0x40, // f64.const 42
        0x64, // f64.gt
        0x0d, 0x00, // br_if 0
        0x0b, // end
    ];

    #[test]
    fn se_layouts() {
        assert_eq!(gadget_bytes(&make_se_gadget([0; 8])), FIG_SE_ZERO);
        let g = gadget_bytes(&make_se_gadget(INITIAL_PAYLOAD));
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], 0x44);
        assert!(g[1..9].iter().all(|&b| b == 0x80));
        assert_eq!(g[9], 0x1a);
    }

    #[test]
    fn or_layout() {
        let g = gadget_bytes(&make_or_gadget([0; 8], 2));
        assert_eq!(g, FIG_OR_ZERO);
        assert_eq!(payload_offset_in_gadget(GadgetKind::Or, 2), 5);
        assert_eq!(&g[5..13], &[0; 8]);
        // a two-byte local index stretches the gadget by three bytes
        let wide = gadget_bytes(&make_or_gadget([0; 8], 300));
        assert_eq!(wide.len(), 35);
        assert_eq!(payload_offset_in_gadget(GadgetKind::Or, 300), 6);
    }

    #[test]
    fn or_branch_never_taken() {
        // mirrors the gadget's arithmetic on the host
        let payloads = [0.0, -0.0, 1.0, -3.5, f64::MAX, f64::MIN_POSITIVE, 5e-324, f64::NAN, f64::INFINITY];
        for c in payloads {
            for start in [0.0, 1.0, -c, f64::MAX] {
                let s = start + c;
                assert!(!((s / s) > 42.0), "payload {c} start {start}");
            }
        }
    }

    #[test]
    fn stack_neutrality() {
        assert!(verify_stack_neutrality(&FIG_SE_ZERO));
        assert!(verify_stack_neutrality(&FIG_OR_ZERO));
        assert!(!verify_stack_neutrality(&FIG_SE_ZERO[..9]));
        assert!(!verify_stack_neutrality(&[0x1a])); // drop underflows
        assert!(!verify_stack_neutrality(&FIG_OR_ZERO[..31])); // unclosed loop
        assert!(!verify_stack_neutrality(&[0x0c, 0x00])); // br leaves the gadget
    }

    fn nop_module() -> WasmModule {
        let bytes = [
            0x00, 0x61, 0x73, 0x6d, 0x01, 0x00, 0x00, 0x00, //
            0x01, 0x04, 0x01, 0x60, 0x00, 0x00, //
            0x03, 0x02, 0x01, 0x00, //
            0x0a, 0x05, 0x01, 0x03, 0x00, 0x01, 0x0b,
        ];
        parse_module(&bytes).unwrap()
    }

    #[test]
    fn single_se_gadget_in_nop_function() {
        let m = nop_module();
        let before = m.encode();
        let (out, map) = insert_gadgets(&m, GadgetKind::Se, 0.1, 7).unwrap();
        assert_eq!(map.gadget_count, 1);
        assert_eq!(count_instructions(&out), 4);
        let after = out.encode();
        // sizes 3 -> 13 and 5 -> 15 still fit one LEB128 byte
        assert_eq!(after.len(), before.len() + 10);
        assert_eq!(map.offsets.len(), 8);
        for &o in &map.offsets {
            assert_eq!(after[o], 0x80);
        }
        assert_eq!(after[map.offsets[0] - 1], 0x44);
        assert_eq!(after[map.offsets[7] + 1], 0x1a);
        assert_eq!(map.binary_len, after.len());
    }

    #[test]
    fn or_gadget_adds_scratch_local() {
        let m = nop_module();
        let (out, map) = insert_gadgets(&m, GadgetKind::Or, 1.0, 3).unwrap();
        assert_eq!(map.gadget_count, 2);
        let f = &out.functions()[0];
        assert_eq!(f.locals().len(), 1);
        assert_eq!(f.locals()[0].ty, valtype::F64);
        let bytes = out.encode();
        // both gadgets use local 0 (no params, one declared local)
        for chunk in map.offsets.chunks(8) {
            assert_eq!(&bytes[chunk[0] - 3..chunk[0] - 1], &[0x20, 0x00]);
        }
        assert!(map.offsets.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn density_errors() {
        let m = nop_module();
        for d in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                insert_gadgets(&m, GadgetKind::Se, d, 0),
                Err(Error::InvalidDensity(_))
            ));
        }
        let empty = parse_module(&[0x00, 0x61, 0x73, 0x6d, 1, 0, 0, 0]).unwrap();
        assert!(matches!(
            insert_gadgets(&empty, GadgetKind::Se, 0.5, 0),
            Err(Error::NotInstrumentable(_))
        ));
    }

    #[test]
    fn gadget_count_rule() {
        assert_eq!(gadget_count_for(0.02, 1000), 20);
        assert_eq!(gadget_count_for(0.001, 10), 1);
        assert_eq!(gadget_count_for(0.1, 25), 2);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("SE".parse::<GadgetKind>().unwrap(), GadgetKind::Se);
        assert_eq!(GadgetKind::Or.to_string(), "or");
        assert!("xx".parse::<GadgetKind>().is_err());
    }

    #[test]
    fn markers_are_found_until_removed() {
        let m = crate::wasm::parse_module(&crate::dataset::programs::arithmetic_loop().bytes).unwrap();
        let (inst, map) = insert_gadgets(&m, GadgetKind::Se, 0.2, 3).unwrap();
        let mut bytes = inst.encode();
        let markers = map.fill_markers(&mut bytes, 5);
        assert_eq!(markers.len(), map.gadget_count);
        assert_eq!(surviving_payloads(&bytes, &markers), markers.len());
        bytes[map.offsets[0]] ^= 0xff;
        assert_eq!(surviving_payloads(&bytes, &markers), markers.len() - 1);
    }
}
