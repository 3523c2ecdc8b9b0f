//! Small deterministic programs with an exported `run(i32)` entry point,
//! used to check that instrumentation preserves behaviour.

use crate::wasm::builder::{Code, ModuleBuilder};
use crate::wasm::opcode::*;

/// A program plus the inputs it should be exercised with.
#[derive(Debug, Clone)]
pub struct TestProgram {
    pub name: &'static str,
    pub bytes: Vec<u8>,
    pub inputs: Vec<i32>,
    /// Whether the module exports its linear memory as `mem`.
    pub exports_memory: bool,
    /// Whether the module exports a mutable i32 global as `counter`.
    pub exports_global: bool,
}

const I32: u8 = valtype::I32;
const I64: u8 = valtype::I64;
const F64: u8 = valtype::F64;

/// `sum(i*i ^ (i << 3))` over `0..n`, as i64.
pub fn arithmetic_loop() -> TestProgram {
    let mut m = ModuleBuilder::new();
    let ty = m.func_type(&[I32], &[I64]);
    let mut c = Code::new();
    c.block(BLOCKTYPE_EMPTY).loop_(BLOCKTYPE_EMPTY);
    c.local_get(1).local_get(0).op(I32_GE_S).br_if(1);
    c.local_get(2)
        .local_get(1)
        .local_get(1)
        .op(I32_MUL)
        .local_get(1)
        .i32_const(3)
        .op(I32_SHL)
        .op(I32_XOR)
        .op(I64_EXTEND_I32_U)
        .op(I64_ADD)
        .local_set(2);
    c.local_get(1).i32_const(1).op(I32_ADD).local_set(1).br(0);
    c.end().end();
    c.local_get(2);
    let f = m.function(ty, &[(1, I32), (1, I64)], c);
    m.export_func("run", f);
    TestProgram {
        name: "arithmetic_loop",
        bytes: m.finish(),
        inputs: vec![0, 1, 7, 100, 2500],
        exports_memory: false,
        exports_global: false,
    }
}

/// FNV-style hash over a table in memory, result also stored at 1024.
pub fn hash_kernel() -> TestProgram {
    let mut m = ModuleBuilder::new();
    let ty = m.func_type(&[I32], &[I32]);
    m.memory(1, Some(1));
    let table: Vec<u8> = (0..256u32).map(|i| (i.wrapping_mul(167).wrapping_add(13) % 256) as u8).collect();
    m.data(0, table);
    let mut c = Code::new();
    c.i32_const(0x811c_9dc5_u32 as i32).local_set(2);
    c.block(BLOCKTYPE_EMPTY).loop_(BLOCKTYPE_EMPTY);
    c.local_get(1).local_get(0).op(I32_GE_U).br_if(1);
    c.local_get(2)
        .local_get(1)
        .i32_const(255)
        .op(I32_AND)
        .mem(I32_LOAD8_U, 0, 0)
        .op(I32_XOR)
        .i32_const(16_777_619)
        .op(I32_MUL)
        .i32_const(5)
        .op(I32_ROTL)
        .local_set(2);
    c.local_get(1).i32_const(1).op(I32_ADD).local_set(1).br(0);
    c.end().end();
    c.i32_const(1024).local_get(2).mem(I32_STORE, 2, 0);
    c.local_get(2);
    let f = m.function(ty, &[(2, I32)], c);
    m.export_func("run", f);
    m.export_memory("mem");
    TestProgram {
        name: "hash_kernel",
        bytes: m.finish(),
        inputs: vec![0, 3, 256, 999],
        exports_memory: true,
        exports_global: false,
    }
}

/// Naive recursive Fibonacci.
pub fn recursion() -> TestProgram {
    let mut m = ModuleBuilder::new();
    let ty = m.func_type(&[I32], &[I64]);
    let me = m.next_func_index();
    let mut c = Code::new();
    c.local_get(0).i32_const(2).op(I32_LT_S).if_(I64);
    c.local_get(0).op(I64_EXTEND_I32_U);
    c.else_();
    c.local_get(0).i32_const(1).op(I32_SUB).call(me);
    c.local_get(0).i32_const(2).op(I32_SUB).call(me);
    c.op(I64_ADD);
    c.end();
    let f = m.function(ty, &[], c);
    m.export_func("run", f);
    TestProgram {
        name: "recursion",
        bytes: m.finish(),
        inputs: vec![0, 1, 2, 10, 20],
        exports_memory: false,
        exports_global: false,
    }
}

/// Twenty Newton steps towards `sqrt(n + 0.5)`.
pub fn newton_sqrt() -> TestProgram {
    let mut m = ModuleBuilder::new();
    let ty = m.func_type(&[I32], &[F64]);
    let mut c = Code::new();
    c.local_get(0).op(F64_CONVERT_I32_S).f64_const(0.5).op(F64_ADD).local_tee(1).local_set(2);
    c.loop_(BLOCKTYPE_EMPTY);
    c.f64_const(0.5)
        .local_get(2)
        .local_get(1)
        .local_get(2)
        .op(F64_DIV)
        .op(F64_ADD)
        .op(F64_MUL)
        .local_set(2);
    c.local_get(3).i32_const(1).op(I32_ADD).local_tee(3).i32_const(20).op(I32_LT_S).br_if(0);
    c.end();
    c.local_get(2);
    let f = m.function(ty, &[(2, F64), (1, I32)], c);
    m.export_func("run", f);
    TestProgram {
        name: "newton_sqrt",
        bytes: m.finish(),
        inputs: vec![0, 2, 17, 1_000_000],
        exports_memory: false,
        exports_global: false,
    }
}

/// Four-state machine dispatched through `br_table`; counts steps in a global.
pub fn state_machine() -> TestProgram {
    let mut m = ModuleBuilder::new();
    let ty = m.func_type(&[I32], &[I32]);
    let counter = m.global_i32(true, 0);
    let mut c = Code::new();
    c.block(BLOCKTYPE_EMPTY).loop_(BLOCKTYPE_EMPTY);
    c.local_get(1).local_get(0).op(I32_GE_S).br_if(1);
    for _ in 0..5 {
        c.block(BLOCKTYPE_EMPTY);
    }
    c.local_get(2).i32_const(3).op(I32_AND).br_table(&[0, 1, 2], 3);
    c.end();
    c.local_get(3).local_get(1).op(I32_ADD).local_set(3).i32_const(1).local_set(2).br(3);
    c.end();
    c.local_get(3).local_get(3).i32_const(1).op(I32_SHL).op(I32_XOR).local_set(3).i32_const(2).local_set(2).br(2);
    c.end();
    c.local_get(3).i32_const(3).op(I32_SUB).local_set(3).i32_const(3).local_set(2).br(1);
    c.end();
    c.local_get(3).i32_const(7).op(I32_MUL).local_set(3).i32_const(0).local_set(2);
    c.end();
    c.global_get(counter).i32_const(1).op(I32_ADD).global_set(counter);
    c.local_get(1).i32_const(1).op(I32_ADD).local_set(1).br(0);
    c.end().end();
    c.local_get(3);
    let f = m.function(ty, &[(3, I32)], c);
    m.export_func("run", f);
    m.export_global("counter", counter);
    TestProgram {
        name: "state_machine",
        bytes: m.finish(),
        inputs: vec![0, 1, 4, 33, 500],
        exports_memory: false,
        exports_global: true,
    }
}

/// Fills memory with a multiplicative sequence and folds it back.
pub fn memory_checksum() -> TestProgram {
    let mut m = ModuleBuilder::new();
    let ty = m.func_type(&[I32], &[I32]);
    m.memory(1, Some(1));
    let mut c = Code::new();
    c.block(BLOCKTYPE_EMPTY).loop_(BLOCKTYPE_EMPTY);
    c.local_get(1).local_get(0).op(I32_GE_S).br_if(1);
    c.local_get(1)
        .i32_const(2)
        .op(I32_SHL)
        .local_get(1)
        .i32_const(0x9e37_79b1_u32 as i32)
        .op(I32_MUL)
        .mem(I32_STORE, 2, 0);
    c.local_get(1).i32_const(1).op(I32_ADD).local_set(1).br(0);
    c.end().end();
    c.i32_const(0).local_set(1);
    c.block(BLOCKTYPE_EMPTY).loop_(BLOCKTYPE_EMPTY);
    c.local_get(1).local_get(0).op(I32_GE_S).br_if(1);
    c.local_get(2)
        .i32_const(1)
        .op(I32_ROTL)
        .local_get(1)
        .i32_const(2)
        .op(I32_SHL)
        .mem(I32_LOAD, 2, 0)
        .op(I32_XOR)
        .local_set(2);
    c.local_get(1).i32_const(1).op(I32_ADD).local_set(1).br(0);
    c.end().end();
    c.local_get(2);
    let f = m.function(ty, &[(2, I32)], c);
    m.export_func("run", f);
    m.export_memory("mem");
    TestProgram {
        name: "memory_checksum",
        bytes: m.finish(),
        inputs: vec![0, 1, 64, 1000],
        exports_memory: true,
        exports_global: false,
    }
}

/// Helpers calling each other; the entry mixes their results.
pub fn call_graph() -> TestProgram {
    let mut m = ModuleBuilder::new();
    let ty = m.func_type(&[I32], &[I32]);
    let mut sq = Code::new();
    sq.local_get(0).local_get(0).op(I32_MUL);
    let f_sq = m.function(ty, &[], sq);
    let mut mix = Code::new();
    mix.local_get(0).call(f_sq).local_get(0).i32_const(13).op(I32_ROTR).op(I32_XOR);
    let f_mix = m.function(ty, &[], mix);
    let mut run = Code::new();
    run.block(BLOCKTYPE_EMPTY).loop_(BLOCKTYPE_EMPTY);
    run.local_get(1).local_get(0).op(I32_GE_S).br_if(1);
    run.local_get(2).local_get(1).call(f_mix).op(I32_ADD).local_set(2);
    run.local_get(1).i32_const(1).op(I32_ADD).local_set(1).br(0);
    run.end().end();
    run.local_get(2).i32_const(1000).op(I32_REM_U);
    let f_run = m.function(ty, &[(2, I32)], run);
    m.export_func("run", f_run);
    TestProgram {
        name: "call_graph",
        bytes: m.finish(),
        inputs: vec![0, 5, 300],
        exports_memory: false,
        exports_global: false,
    }
}

pub fn all() -> Vec<TestProgram> {
    vec![
        arithmetic_loop(),
        hash_kernel(),
        recursion(),
        newton_sqrt(),
        state_machine(),
        memory_checksum(),
        call_graph(),
    ]
}
