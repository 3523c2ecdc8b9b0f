//! Minimal assembler for emitting valid modules from code.

use super::leb128::{write_sleb128, write_uleb128};
use super::opcode::*;

/// Instruction byte emitter. Methods mirror the text-format mnemonics.
#[derive(Debug, Default, Clone)]
pub struct Code {
    bytes: Vec<u8>,
}

impl Code {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn op(&mut self, op: u8) -> &mut Self {
        self.bytes.push(op);
        self
    }

    fn op_u32(&mut self, op: u8, v: u32) -> &mut Self {
        self.bytes.push(op);
        write_uleb128(&mut self.bytes, u64::from(v));
        self
    }

    pub fn block(&mut self, ty: u8) -> &mut Self {
        self.bytes.extend_from_slice(&[BLOCK, ty]);
        self
    }

    pub fn loop_(&mut self, ty: u8) -> &mut Self {
        self.bytes.extend_from_slice(&[LOOP, ty]);
        self
    }

    pub fn if_(&mut self, ty: u8) -> &mut Self {
        self.bytes.extend_from_slice(&[IF, ty]);
        self
    }

    pub fn else_(&mut self) -> &mut Self {
        self.op(ELSE)
    }

    pub fn end(&mut self) -> &mut Self {
        self.op(END)
    }

    pub fn br(&mut self, depth: u32) -> &mut Self {
        self.op_u32(BR, depth)
    }

    pub fn br_if(&mut self, depth: u32) -> &mut Self {
        self.op_u32(BR_IF, depth)
    }

    pub fn br_table(&mut self, targets: &[u32], default: u32) -> &mut Self {
        self.op_u32(BR_TABLE, targets.len() as u32);
        for &t in targets {
            write_uleb128(&mut self.bytes, u64::from(t));
        }
        write_uleb128(&mut self.bytes, u64::from(default));
        self
    }

    pub fn call(&mut self, func: u32) -> &mut Self {
        self.op_u32(CALL, func)
    }

    pub fn local_get(&mut self, idx: u32) -> &mut Self {
        self.op_u32(LOCAL_GET, idx)
    }

    pub fn local_set(&mut self, idx: u32) -> &mut Self {
        self.op_u32(LOCAL_SET, idx)
    }

    pub fn local_tee(&mut self, idx: u32) -> &mut Self {
        self.op_u32(LOCAL_TEE, idx)
    }

    pub fn global_get(&mut self, idx: u32) -> &mut Self {
        self.op_u32(GLOBAL_GET, idx)
    }

    pub fn global_set(&mut self, idx: u32) -> &mut Self {
        self.op_u32(GLOBAL_SET, idx)
    }

    pub fn i32_const(&mut self, v: i32) -> &mut Self {
        self.bytes.push(I32_CONST);
        write_sleb128(&mut self.bytes, i64::from(v));
        self
    }

    pub fn i64_const(&mut self, v: i64) -> &mut Self {
        self.bytes.push(I64_CONST);
        write_sleb128(&mut self.bytes, v);
        self
    }

    pub fn f64_const(&mut self, v: f64) -> &mut Self {
        self.bytes.push(F64_CONST);
        self.bytes.extend_from_slice(&v.to_le_bytes());
        self
    }

    /// A load or store opcode with `align` (log2) and `offset`.
    pub fn mem(&mut self, op: u8, align: u32, offset: u32) -> &mut Self {
        self.op_u32(op, align);
        write_uleb128(&mut self.bytes, u64::from(offset));
        self
    }
}

struct FuncDef {
    ty: u32,
    locals: Vec<(u32, u8)>,
    body: Vec<u8>,
}

/// Assembles a complete module in canonical section order.
#[derive(Default)]
pub struct ModuleBuilder {
    types: Vec<(Vec<u8>, Vec<u8>)>,
    imports: Vec<(String, String, u32)>,
    functions: Vec<FuncDef>,
    memory: Option<(u32, Option<u32>)>,
    globals: Vec<(u8, bool, Vec<u8>)>,
    exports: Vec<(String, u8, u32)>,
    data: Vec<(u32, Vec<u8>)>,
}

impl ModuleBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index of the function type, reusing an identical one.
    pub fn func_type(&mut self, params: &[u8], results: &[u8]) -> u32 {
        let key = (params.to_vec(), results.to_vec());
        if let Some(i) = self.types.iter().position(|t| *t == key) {
            return i as u32;
        }
        self.types.push(key);
        (self.types.len() - 1) as u32
    }

    /// Imports a function. All imports must precede defined functions.
    pub fn import_func(&mut self, module: &str, name: &str, ty: u32) -> u32 {
        assert!(self.functions.is_empty(), "imports must be declared first");
        self.imports.push((module.into(), name.into(), ty));
        (self.imports.len() - 1) as u32
    }

    /// Index the next defined function will receive.
    pub fn next_func_index(&self) -> u32 {
        (self.imports.len() + self.functions.len()) as u32
    }

    /// Defines a function; `body` excludes the terminal `end`.
    pub fn function(&mut self, ty: u32, locals: &[(u32, u8)], body: Code) -> u32 {
        let idx = self.next_func_index();
        self.functions.push(FuncDef {
            ty,
            locals: locals.to_vec(),
            body: body.into_bytes(),
        });
        idx
    }

    pub fn memory(&mut self, min_pages: u32, max_pages: Option<u32>) {
        self.memory = Some((min_pages, max_pages));
    }

    pub fn global_i32(&mut self, mutable: bool, init: i32) -> u32 {
        let mut c = Code::new();
        c.i32_const(init);
        self.globals.push((valtype::I32, mutable, c.into_bytes()));
        (self.globals.len() - 1) as u32
    }

    pub fn global_i64(&mut self, mutable: bool, init: i64) -> u32 {
        let mut c = Code::new();
        c.i64_const(init);
        self.globals.push((valtype::I64, mutable, c.into_bytes()));
        (self.globals.len() - 1) as u32
    }

    pub fn export_func(&mut self, name: &str, idx: u32) {
        self.exports.push((name.into(), 0x00, idx));
    }

    pub fn export_memory(&mut self, name: &str) {
        self.exports.push((name.into(), 0x02, 0));
    }

    pub fn export_global(&mut self, name: &str, idx: u32) {
        self.exports.push((name.into(), 0x03, idx));
    }

    /// Active data segment for memory 0 at a constant offset.
    pub fn data(&mut self, offset: u32, bytes: Vec<u8>) {
        self.data.push((offset, bytes));
    }

    pub fn finish(&self) -> Vec<u8> {
        let mut out = super::module::MAGIC.to_vec();
        out.extend_from_slice(&super::module::VERSION.to_le_bytes());

        if !self.types.is_empty() {
            section(&mut out, 1, self.types.len(), |p| {
                for (params, results) in &self.types {
                    p.push(0x60);
                    vec_bytes(p, params);
                    vec_bytes(p, results);
                }
            });
        }
        if !self.imports.is_empty() {
            section(&mut out, 2, self.imports.len(), |p| {
                for (m, n, ty) in &self.imports {
                    name(p, m);
                    name(p, n);
                    p.push(0x00);
                    write_uleb128(p, u64::from(*ty));
                }
            });
        }
        if !self.functions.is_empty() {
            section(&mut out, 3, self.functions.len(), |p| {
                for f in &self.functions {
                    write_uleb128(p, u64::from(f.ty));
                }
            });
        }
        if let Some((min, max)) = self.memory {
            section(&mut out, 5, 1, |p| match max {
                Some(max) => {
                    p.push(0x01);
                    write_uleb128(p, u64::from(min));
                    write_uleb128(p, u64::from(max));
                }
                None => {
                    p.push(0x00);
                    write_uleb128(p, u64::from(min));
                }
            });
        }
        if !self.globals.is_empty() {
            section(&mut out, 6, self.globals.len(), |p| {
                for (ty, mutable, init) in &self.globals {
                    p.push(*ty);
                    p.push(u8::from(*mutable));
                    p.extend_from_slice(init);
                    p.push(END);
                }
            });
        }
        if !self.exports.is_empty() {
            section(&mut out, 7, self.exports.len(), |p| {
                for (n, kind, idx) in &self.exports {
                    name(p, n);
                    p.push(*kind);
                    write_uleb128(p, u64::from(*idx));
                }
            });
        }
        if !self.functions.is_empty() {
            section(&mut out, 10, self.functions.len(), |p| {
                for f in &self.functions {
                    let mut body = Vec::with_capacity(f.body.len() + 8);
                    write_uleb128(&mut body, f.locals.len() as u64);
                    for (count, ty) in &f.locals {
                        write_uleb128(&mut body, u64::from(*count));
                        body.push(*ty);
                    }
                    body.extend_from_slice(&f.body);
                    body.push(END);
                    write_uleb128(p, body.len() as u64);
                    p.extend_from_slice(&body);
                }
            });
        }
        if !self.data.is_empty() {
            section(&mut out, 11, self.data.len(), |p| {
                for (offset, bytes) in &self.data {
                    p.push(0x00);
                    p.push(I32_CONST);
                    write_sleb128(p, i64::from(*offset as i32));
                    p.push(END);
                    vec_bytes(p, bytes);
                }
            });
        }
        out
    }
}

fn section(out: &mut Vec<u8>, id: u8, count: usize, fill: impl FnOnce(&mut Vec<u8>)) {
    let mut payload = Vec::new();
    write_uleb128(&mut payload, count as u64);
    fill(&mut payload);
    out.push(id);
    write_uleb128(out, payload.len() as u64);
    out.extend_from_slice(&payload);
}

fn vec_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    write_uleb128(out, bytes.len() as u64);
    out.extend_from_slice(bytes);
}

fn name(out: &mut Vec<u8>, s: &str) {
    vec_bytes(out, s.as_bytes());
}
