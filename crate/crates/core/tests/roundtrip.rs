//! Byte-exact round trips and the SE size law over a seeded corpus.

use advwasm::dataset::programs;
use advwasm::dataset::{synth_corpus, SourceLabel};
use advwasm::gadgets::{gadget_count_for, insert_gadgets, GadgetKind};
use advwasm::imaging::{crafting_transform, upsample_apply, IMAGE_DIM};
use advwasm::wasm::leb128::decode_uleb128;
use advwasm::wasm::{count_instructions, parse_module, SECTION_CODE};

fn corpus() -> Vec<Vec<u8>> {
    let mut out: Vec<Vec<u8>> = programs::all().into_iter().map(|p| p.bytes).collect();
    for (seed, range) in [(1, (500, 3_000)), (2, (8_000, 20_000)), (3, (40_000, 90_000))] {
        for class in [SourceLabel::Benign, SourceLabel::Malicious] {
            out.extend(synth_corpus(seed, 4, range, class).into_iter().map(|s| s.bytes));
        }
    }
    out
}

/// Bytes spent on the code section's size prefix plus every body's size prefix.
fn code_prefix_bytes(bytes: &[u8]) -> usize {
    let mut at = 8;
    while at < bytes.len() {
        let id = bytes[at];
        let (size, n) = decode_uleb128(bytes, at + 1).unwrap();
        let payload = at + 1 + n;
        if id == SECTION_CODE {
            let mut prefix = n;
            let (count, m) = decode_uleb128(bytes, payload).unwrap();
            let mut cur = payload + m;
            for _ in 0..count {
                let (body, k) = decode_uleb128(bytes, cur).unwrap();
                prefix += k;
                cur += k + body as usize;
            }
            return prefix;
        }
        at = payload + size as usize;
    }
    panic!("no code section");
}

#[test]
fn encode_parse_is_identity_on_the_corpus() {
    for (i, bytes) in corpus().iter().enumerate() {
        let m = parse_module(bytes).unwrap();
        assert_eq!(&m.encode(), bytes, "binary {i}");
    }
}

#[test]
fn se_size_law_holds_by_byte_count() {
    for (i, bytes) in corpus().iter().enumerate() {
        let m = parse_module(bytes).unwrap();
        let total = count_instructions(&m);
        for density in [0.005, 0.02, 0.1] {
            let (inst, map) = insert_gadgets(&m, GadgetKind::Se, density, 17).unwrap();
            let out = inst.encode();
            let n = gadget_count_for(density, total);
            assert_eq!(map.gadget_count, n);
            assert_eq!(map.offsets.len(), 8 * n);
            let growth = code_prefix_bytes(&out) - code_prefix_bytes(bytes);
            assert_eq!(out.len() - bytes.len(), 10 * n + growth, "binary {i} d={density}");
        }
    }
}

#[test]
fn or_grows_faster_than_se() {
    for bytes in corpus() {
        let m = parse_module(&bytes).unwrap();
        for density in [0.01, 0.05] {
            let se = insert_gadgets(&m, GadgetKind::Se, density, 4).unwrap().0.encode().len();
            let or = insert_gadgets(&m, GadgetKind::Or, density, 4).unwrap().0.encode().len();
            assert!(or > se, "{or} vs {se}");
        }
    }
}

#[test]
fn noop_image_reconstructs_the_input() {
    for bytes in corpus() {
        let m = parse_module(&bytes).unwrap();
        let (inst, map) = insert_gadgets(&m, GadgetKind::Se, 0.05, 9).unwrap();
        let inst = inst.encode();
        let (image, record) = crafting_transform::<f64>(&inst, &map.offsets).unwrap();
        assert_eq!((image.width(), image.height()), (IMAGE_DIM, IMAGE_DIM));
        let rebuilt = upsample_apply(&record, &image, &inst).unwrap();
        assert_eq!(rebuilt.bytes, inst);
        assert_eq!(rebuilt.groups_updated, 0);
    }
}
