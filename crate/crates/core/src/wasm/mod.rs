//! WebAssembly binary reading, editing and re-encoding.

pub mod builder;
pub mod leb128;
mod module;
pub mod opcode;

pub use leb128::{decode_uleb128, encode_uleb128};
pub use module::{
    count_instructions, parse_module, CodeSection, EncodedModule, FunctionBody, Instruction,
    LocalDecl, RawSection, WasmModule, MAGIC, SECTION_CODE, SECTION_FUNCTION, SECTION_TYPE,
    VERSION,
};
pub use opcode::Opcode;
