//! Byte-preserving Wasm module model.
//!
//! Every section other than code stays an opaque payload. The code section
//! is tokenised down to instructions so that gadgets can be spliced in at
//! instruction boundaries. Untouched sections and function bodies keep
//! their original bytes and are emitted verbatim.

use super::leb128::{decode_u32, uleb128_len, write_uleb128};
use super::opcode::{self, decode_instruction, Opcode};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = [0x00, 0x61, 0x73, 0x6d];
pub const VERSION: u32 = 1;

pub const SECTION_TYPE: u8 = 1;
pub const SECTION_FUNCTION: u8 = 3;
pub const SECTION_CODE: u8 = 10;

/// A section kept as raw payload bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSection {
    pub id: u8,
    payload: Vec<u8>,
    /// Verbatim `id | size | payload` slice of the source, while unmodified.
    original_bytes: Option<Vec<u8>>,
}

impl RawSection {
    pub fn new(id: u8, payload: Vec<u8>) -> Self {
        Self {
            id,
            payload,
            original_bytes: None,
        }
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn set_payload(&mut self, payload: Vec<u8>) {
        self.payload = payload;
        self.original_bytes = None;
    }

    pub fn original_bytes(&self) -> Option<&[u8]> {
        self.original_bytes.as_deref()
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        match &self.original_bytes {
            Some(raw) => out.extend_from_slice(raw),
            None => {
                out.push(self.id);
                write_uleb128(out, self.payload.len() as u64);
                out.extend_from_slice(&self.payload);
            }
        }
    }
}

/// One instruction: opcode plus its immediates, as raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    opcode: Opcode,
    bytes: Vec<u8>,
}

impl Instruction {
    /// Decodes exactly one instruction from `bytes`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (opcode, len) = decode_instruction(bytes, 0)?;
        if len != bytes.len() {
            return Err(Error::malformed(len, "trailing bytes after instruction"));
        }
        Ok(Self {
            opcode,
            bytes: bytes.to_vec(),
        })
    }

    pub fn opcode(&self) -> Opcode {
        self.opcode
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn immediates(&self) -> &[u8] {
        let head = match self.opcode {
            Opcode::Plain(_) => 1,
            Opcode::Prefixed(_, sub) => 1 + uleb128_len(u64::from(sub)),
        };
        &self.bytes[head..]
    }

    pub fn byte_length(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_end(&self) -> bool {
        self.opcode == Opcode::Plain(opcode::END)
    }
}

/// A run of `count` locals of one value type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalDecl {
    pub count: u32,
    pub ty: u8,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionBody {
    locals: Vec<LocalDecl>,
    instructions: Vec<Instruction>,
    modified: bool,
    /// Verbatim `size | locals | expr` bytes from the source.
    original_bytes: Option<Vec<u8>>,
}

impl FunctionBody {
    /// A fresh body. The instruction list must end with `end`.
    pub fn new(locals: Vec<LocalDecl>, instructions: Vec<Instruction>) -> Result<Self> {
        if !instructions.last().is_some_and(Instruction::is_end) {
            return Err(Error::InvalidModule(
                "function body must end with the end opcode".into(),
            ));
        }
        Ok(Self {
            locals,
            instructions,
            modified: true,
            original_bytes: None,
        })
    }

    pub fn locals(&self) -> &[LocalDecl] {
        &self.locals
    }

    pub fn instructions(&self) -> &[Instruction] {
        &self.instructions
    }

    pub fn is_modified(&self) -> bool {
        self.modified
    }

    /// Number of declared locals, not counting parameters.
    pub fn declared_local_count(&self) -> u64 {
        self.locals.iter().map(|l| u64::from(l.count)).sum()
    }

    /// Appends one local of type `ty` and returns its position among the
    /// declared locals (add the parameter count for the local index).
    pub fn push_local(&mut self, ty: u8) -> u64 {
        let idx = self.declared_local_count();
        self.locals.push(LocalDecl { count: 1, ty });
        self.modified = true;
        idx
    }

    /// Inserts `instrs` before the instruction at `index`.
    ///
    /// `index` may not exceed the position of the terminal `end`.
    pub fn insert(&mut self, index: usize, instrs: impl IntoIterator<Item = Instruction>) {
        assert!(
            index < self.instructions.len(),
            "insertion point {index} lies after the terminal end"
        );
        self.instructions.splice(index..index, instrs);
        self.modified = true;
    }

    /// Mutable view of the instruction list. Marks the body modified; the
    /// list must still end with `end` when the module is encoded.
    pub fn instructions_mut(&mut self) -> &mut Vec<Instruction> {
        self.modified = true;
        &mut self.instructions
    }

    fn expr_len(&self) -> usize {
        self.instructions.iter().map(Instruction::byte_length).sum()
    }

    fn encode_inner(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.expr_len() + 8);
        write_uleb128(&mut out, self.locals.len() as u64);
        for l in &self.locals {
            write_uleb128(&mut out, u64::from(l.count));
            out.push(l.ty);
        }
        for ins in &self.instructions {
            out.extend_from_slice(&ins.bytes);
        }
        out
    }

    /// Appends the body entry and returns the absolute offset of its first
    /// instruction.
    fn encode_into(&self, out: &mut Vec<u8>) -> usize {
        match (&self.original_bytes, self.modified) {
            (Some(raw), false) => {
                out.extend_from_slice(raw);
                out.len() - self.expr_len()
            }
            _ => {
                debug_assert!(self.instructions.last().is_some_and(Instruction::is_end));
                let inner = self.encode_inner();
                write_uleb128(out, inner.len() as u64);
                out.extend_from_slice(&inner);
                out.len() - self.expr_len()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSection {
    pub functions: Vec<FunctionBody>,
    /// Position of the code section in [`WasmModule::sections`].
    section_index: usize,
}

impl CodeSection {
    pub fn is_modified(&self) -> bool {
        self.functions.iter().any(FunctionBody::is_modified)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WasmModule {
    pub version: u32,
    pub sections: Vec<RawSection>,
    pub code: Option<CodeSection>,
}

/// Result of encoding with offsets of every function's first instruction.
#[derive(Debug, Clone)]
pub struct EncodedModule {
    pub bytes: Vec<u8>,
    /// Absolute offset of the first instruction of each defined function.
    pub function_starts: Vec<usize>,
}

impl WasmModule {
    /// A module with no sections.
    pub fn empty() -> Self {
        Self {
            version: VERSION,
            sections: Vec::new(),
            code: None,
        }
    }

    /// Builds a module from opaque sections plus an optional code section
    /// inserted at `code_position` among them.
    pub fn from_parts(
        mut sections: Vec<RawSection>,
        code: Option<(usize, Vec<FunctionBody>)>,
    ) -> Self {
        let code = code.map(|(pos, functions)| {
            sections.insert(pos, RawSection::new(SECTION_CODE, Vec::new()));
            CodeSection {
                functions,
                section_index: pos,
            }
        });
        Self {
            version: VERSION,
            sections,
            code,
        }
    }

    pub fn functions(&self) -> &[FunctionBody] {
        self.code.as_ref().map_or(&[], |c| &c.functions)
    }

    pub fn section(&self, id: u8) -> Option<&RawSection> {
        self.sections.iter().find(|s| s.id == id)
    }

    /// Parameter count of every defined function, in code-section order.
    pub fn defined_function_param_counts(&self) -> Result<Vec<u64>> {
        let mut type_params = Vec::new();
        if let Some(ts) = self.section(SECTION_TYPE) {
            let p = ts.payload();
            let (count, mut cur) = decode_u32(p, 0)?;
            for _ in 0..count {
                if p.get(cur) != Some(&0x60) {
                    return Err(Error::malformed(cur, "expected function type"));
                }
                cur += 1;
                let (np, n) = decode_u32(p, cur)?;
                cur += n + np as usize;
                let (nr, n) = decode_u32(p, cur)?;
                cur += n + nr as usize;
                if cur > p.len() {
                    return Err(Error::malformed(cur, "truncated type section"));
                }
                type_params.push(u64::from(np));
            }
        }
        let mut out = Vec::new();
        if let Some(fs) = self.section(SECTION_FUNCTION) {
            let p = fs.payload();
            let (count, mut cur) = decode_u32(p, 0)?;
            for _ in 0..count {
                let (ty, n) = decode_u32(p, cur)?;
                cur += n;
                let params = type_params
                    .get(ty as usize)
                    .ok_or_else(|| Error::malformed(cur, format!("type index {ty} out of range")))?;
                out.push(*params);
            }
        }
        if out.len() != self.functions().len() {
            return Err(Error::InvalidModule(format!(
                "function section declares {} functions, code section has {}",
                out.len(),
                self.functions().len()
            )));
        }
        Ok(out)
    }

    pub fn encode(&self) -> Vec<u8> {
        self.encode_traced().bytes
    }

    pub fn encode_traced(&self) -> EncodedModule {
        let mut out = Vec::with_capacity(
            8 + self.sections.iter().map(|s| s.payload.len() + 6).sum::<usize>(),
        );
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let mut function_starts = Vec::new();
        for (i, section) in self.sections.iter().enumerate() {
            match &self.code {
                Some(code) if code.section_index == i => {
                    encode_code_section(section, code, &mut out, &mut function_starts)
                }
                _ => section.encode_into(&mut out),
            }
        }
        EncodedModule {
            bytes: out,
            function_starts,
        }
    }
}

fn encode_code_section(
    raw: &RawSection,
    code: &CodeSection,
    out: &mut Vec<u8>,
    starts: &mut Vec<usize>,
) {
    if let (Some(orig), false) = (&raw.original_bytes, code.is_modified()) {
        let base = out.len();
        out.extend_from_slice(orig);
        // recover instruction offsets by walking the verbatim layout
        let (_, n) = decode_u32(orig, 1).expect("parsed section size");
        let mut cur = 1 + n;
        let (_, n) = decode_u32(orig, cur).expect("parsed function count");
        cur += n;
        for f in &code.functions {
            let entry = f.original_bytes.as_ref().expect("parsed body");
            starts.push(base + cur + entry.len() - f.expr_len());
            cur += entry.len();
        }
        return;
    }
    let mut payload = Vec::new();
    write_uleb128(&mut payload, code.functions.len() as u64);
    let mut rel = Vec::with_capacity(code.functions.len());
    for f in &code.functions {
        rel.push(f.encode_into(&mut payload));
    }
    out.push(SECTION_CODE);
    write_uleb128(out, payload.len() as u64);
    let base = out.len();
    out.extend_from_slice(&payload);
    starts.extend(rel.into_iter().map(|r| base + r));
}

/// Parses a Wasm binary. Only the code section is tokenised.
pub fn parse_module(bytes: &[u8]) -> Result<WasmModule> {
    if bytes.len() < 8 {
        return Err(Error::InvalidModule(format!(
            "{} bytes is shorter than the 8-byte header",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::InvalidModule("bad magic number".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::InvalidModule(format!("unsupported version {version}")));
    }

    let mut sections = Vec::new();
    let mut code = None;
    let mut cur = 8;
    while cur < bytes.len() {
        let start = cur;
        let id = bytes[cur];
        cur += 1;
        let (size, n) = decode_u32(bytes, cur).map_err(|_| Error::malformed(cur, "bad section size"))?;
        cur += n;
        let end = cur
            .checked_add(size as usize)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::malformed(start, format!("section {id} is truncated")))?;
        let payload = &bytes[cur..end];
        if id == SECTION_CODE {
            if code.is_some() {
                return Err(Error::malformed(start, "duplicate code section"));
            }
            code = Some(CodeSection {
                functions: parse_code_payload(payload, cur)?,
                section_index: sections.len(),
            });
        }
        sections.push(RawSection {
            id,
            payload: payload.to_vec(),
            original_bytes: Some(bytes[start..end].to_vec()),
        });
        cur = end;
    }
    Ok(WasmModule {
        version,
        sections,
        code,
    })
}

/// `base` is the absolute offset of `payload`, used for error reports.
fn parse_code_payload(payload: &[u8], base: usize) -> Result<Vec<FunctionBody>> {
    let at = |rel: usize| base + rel;
    let (count, mut cur) = decode_u32(payload, 0).map_err(|_| Error::malformed(base, "bad function count"))?;
    let mut functions = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let entry_start = cur;
        let (size, n) = decode_u32(payload, cur).map_err(|_| Error::malformed(at(cur), "bad body size"))?;
        cur += n;
        let body_end = cur
            .checked_add(size as usize)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::malformed(at(entry_start), "function body is truncated"))?;
        let body = &payload[..body_end];

        let (ndecl, n) = decode_u32(body, cur).map_err(|_| Error::malformed(at(cur), "bad locals count"))?;
        cur += n;
        let mut locals = Vec::with_capacity(ndecl.min(1024) as usize);
        for _ in 0..ndecl {
            let (count, n) = decode_u32(body, cur).map_err(|_| Error::malformed(at(cur), "bad local count"))?;
            cur += n;
            let ty = *body
                .get(cur)
                .ok_or_else(|| Error::malformed(at(cur), "truncated local declaration"))?;
            if !opcode::valtype::is_valtype(ty) {
                return Err(Error::malformed(at(cur), format!("bad local type 0x{ty:02x}")));
            }
            cur += 1;
            locals.push(LocalDecl { count, ty });
        }

        let mut instructions = Vec::new();
        while cur < body_end {
            let (opcode, len) = decode_instruction(body, cur).map_err(|e| rebase(e, base))?;
            instructions.push(Instruction {
                opcode,
                bytes: body[cur..cur + len].to_vec(),
            });
            cur += len;
        }
        if !instructions.last().is_some_and(Instruction::is_end) {
            return Err(Error::malformed(at(body_end), "function body does not end with end"));
        }
        functions.push(FunctionBody {
            locals,
            instructions,
            modified: false,
            original_bytes: Some(payload[entry_start..body_end].to_vec()),
        });
    }
    if cur != payload.len() {
        return Err(Error::malformed(at(cur), "trailing bytes in code section"));
    }
    Ok(functions)
}

fn rebase(err: Error, base: usize) -> Error {
    match err {
        Error::UnsupportedOpcode { offset, opcode } => Error::UnsupportedOpcode {
            offset: offset + base,
            opcode,
        },
        Error::MalformedModule { offset, reason } => Error::MalformedModule {
            offset: offset + base,
            reason,
        },
        Error::MalformedEncoding { offset } => Error::MalformedEncoding {
            offset: offset + base,
        },
        other => other,
    }
}

/// Total instruction count over all defined function bodies, `end`s included.
pub fn count_instructions(module: &WasmModule) -> usize {
    module
        .functions()
        .iter()
        .map(|f| f.instructions.len())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wasm::opcode::{END, NOP};

    const HEADER: [u8; 8] = [0x00, 0x61, 0x73, 0x6d, 0x01, 0x00, 0x00, 0x00];

    /// (func) with body [nop, end], hand assembled.
    fn nop_module() -> Vec<u8> {
        let mut b = HEADER.to_vec();
        b.extend_from_slice(&[0x01, 0x04, 0x01, 0x60, 0x00, 0x00]); // type: () -> ()
        b.extend_from_slice(&[0x03, 0x02, 0x01, 0x00]); // function: type 0
        b.extend_from_slice(&[0x0a, 0x05, 0x01, 0x03, 0x00, NOP, END]); // code
        b
    }

    #[test]
    fn header_only_module() {
        let m = parse_module(&HEADER).unwrap();
        assert!(m.sections.is_empty());
        assert!(m.code.is_none());
        assert_eq!(count_instructions(&m), 0);
        assert_eq!(m.encode(), HEADER);
    }

    #[test]
    fn nop_function() {
        let bytes = nop_module();
        let m = parse_module(&bytes).unwrap();
        let f = &m.functions()[0];
        assert_eq!(m.functions().len(), 1);
        let ops: Vec<_> = f.instructions().iter().map(|i| i.bytes().to_vec()).collect();
        assert_eq!(ops, vec![vec![NOP], vec![END]]);
        assert_eq!(count_instructions(&m), 2);
        assert_eq!(m.encode(), bytes);
        assert_eq!(m.defined_function_param_counts().unwrap(), vec![0]);
    }

    #[test]
    fn corrupted_magic_and_version() {
        let mut b = nop_module();
        b[0] = 0x01;
        assert!(matches!(parse_module(&b), Err(Error::InvalidModule(_))));
        let mut b = nop_module();
        b[4] = 0x02;
        assert!(matches!(parse_module(&b), Err(Error::InvalidModule(_))));
        assert!(matches!(parse_module(&HEADER[..7]), Err(Error::InvalidModule(_))));
    }

    #[test]
    fn truncated_section() {
        let b = nop_module();
        assert!(matches!(
            parse_module(&b[..b.len() - 1]),
            Err(Error::MalformedModule { .. })
        ));
    }

    #[test]
    fn unknown_opcode_has_absolute_offset() {
        let mut b = nop_module();
        let nop_at = b.len() - 2;
        b[nop_at] = 0xfd;
        match parse_module(&b) {
            Err(Error::UnsupportedOpcode { offset, .. }) => assert_eq!(offset, nop_at),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_canonical_sizes_survive_roundtrip() {
        // same module, but the code section size uses a padded LEB128
        let mut b = HEADER.to_vec();
        b.extend_from_slice(&[0x01, 0x04, 0x01, 0x60, 0x00, 0x00]);
        b.extend_from_slice(&[0x03, 0x02, 0x01, 0x00]);
        b.extend_from_slice(&[0x0a, 0x85, 0x00, 0x01, 0x03, 0x00, NOP, END]);
        let m = parse_module(&b).unwrap();
        assert_eq!(m.encode(), b);
    }

    #[test]
    fn grown_function_recomputes_prefixes() {
        let m0 = parse_module(&nop_module()).unwrap();
        let mut m = m0.clone();
        let f = &mut m.code.as_mut().unwrap().functions[0];
        f.insert(0, (0..10).map(|_| Instruction::from_bytes(&[NOP]).unwrap()));
        let out = m.encode();
        assert_eq!(out.len(), nop_module().len() + 10);
        // code section: id, size 15, count 1, body size 13, no locals, 11 nops, end
        let code = &out[out.len() - 17..];
        assert_eq!(&code[..5], &[0x0a, 0x0f, 0x01, 0x0d, 0x00]);
        let reparsed = parse_module(&out).unwrap();
        assert_eq!(count_instructions(&reparsed), 12);
    }

    #[test]
    fn prefix_growth_past_127_bytes() {
        let mut m = parse_module(&nop_module()).unwrap();
        let f = &mut m.code.as_mut().unwrap().functions[0];
        f.insert(0, (0..200).map(|_| Instruction::from_bytes(&[NOP]).unwrap()));
        let out = m.encode();
        // body and section size each grow to two-byte LEB128s
        assert_eq!(out.len(), nop_module().len() + 200 + 2);
        assert_eq!(count_instructions(&parse_module(&out).unwrap()), 202);
    }

    #[test]
    fn empty_code_vector() {
        let mut b = HEADER.to_vec();
        b.extend_from_slice(&[0x0a, 0x01, 0x00]);
        let m = parse_module(&b).unwrap();
        assert_eq!(m.functions().len(), 0);
        assert_eq!(m.encode(), b);

        let built = WasmModule::from_parts(Vec::new(), Some((0, Vec::new())));
        assert_eq!(built.encode(), b);
    }

    #[test]
    fn traced_offsets_point_at_first_instruction() {
        let bytes = nop_module();
        let m = parse_module(&bytes).unwrap();
        let enc = m.encode_traced();
        assert_eq!(enc.function_starts, vec![bytes.len() - 2]);
        let mut m2 = m.clone();
        m2.code.as_mut().unwrap().functions[0].push_local(opcode::valtype::F64);
        let enc2 = m2.encode_traced();
        assert_eq!(enc2.bytes[enc2.function_starts[0]], NOP);
    }
}
