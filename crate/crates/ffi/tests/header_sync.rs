//! Keeps `include/ldd_audit.h` aligned with the exported surface.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

fn manifest_path(rel: &str) -> String {
    format!("{}/{rel}", env!("CARGO_MANIFEST_DIR"))
}

fn exported_symbols() -> BTreeSet<String> {
    let source = fs::read_to_string(manifest_path("src/lib.rs")).unwrap();
    let mut names = BTreeSet::new();
    let mut lines = source.lines().peekable();
    while let Some(line) = lines.next() {
        if line.trim() != "#[no_mangle]" {
            continue;
        }
        // The fn item follows the attribute, possibly after more attributes.
        for decl in lines.by_ref() {
            let decl = decl.trim();
            if decl.starts_with('#') {
                continue;
            }
            let after_fn = decl
                .split_once("fn ")
                .unwrap_or_else(|| panic!("no fn after #[no_mangle]: {decl}"))
                .1;
            let name: String = after_fn
                .chars()
                .take_while(|c| c.is_alphanumeric() || *c == '_')
                .collect();
            names.insert(name);
            break;
        }
    }
    names
}

#[test]
fn every_export_is_declared_in_the_header() {
    let header = fs::read_to_string(manifest_path("include/ldd_audit.h")).unwrap();
    let symbols = exported_symbols();
    assert!(symbols.len() >= 15, "parser found only {symbols:?}");
    for symbol in &symbols {
        assert!(
            header.contains(&format!("{symbol}(")),
            "{symbol} missing from include/ldd_audit.h"
        );
    }
}

#[test]
fn every_header_declaration_is_exported() {
    let header = fs::read_to_string(manifest_path("include/ldd_audit.h")).unwrap();
    let symbols = exported_symbols();
    for line in header.lines() {
        let Some(idx) = line.find("ldd_") else { continue };
        if line.trim_start().starts_with("*") || line.trim_start().starts_with("/*") {
            continue;
        }
        let name: String = line[idx..]
            .chars()
            .take_while(|c| c.is_alphanumeric() || *c == '_')
            .collect();
        assert!(symbols.contains(&name), "{name} declared but not exported");
    }
}

#[test]
fn error_codes_match() {
    let header = fs::read_to_string(manifest_path("include/ldd_audit.h")).unwrap();
    let expect = [
        ("LDD_OK", ldd_audit_ffi::LDD_OK),
        ("LDD_ERR_INVALID_ARGUMENT", ldd_audit_ffi::LDD_ERR_INVALID_ARGUMENT),
        ("LDD_ERR_NULL_POINTER", ldd_audit_ffi::LDD_ERR_NULL_POINTER),
        ("LDD_ERR_COMPUTATION", ldd_audit_ffi::LDD_ERR_COMPUTATION),
        ("LDD_ERR_UTF8", ldd_audit_ffi::LDD_ERR_UTF8),
        ("LDD_ERR_JSON", ldd_audit_ffi::LDD_ERR_JSON),
        ("LDD_ERR_UNAVAILABLE", ldd_audit_ffi::LDD_ERR_UNAVAILABLE),
    ];
    for (name, value) in expect {
        assert!(
            header.contains(&format!("#define {name} {value}")),
            "{name} must be defined as {value}"
        );
    }
}

#[test]
fn shared_library_artifacts_are_configured() {
    let manifest = fs::read_to_string(manifest_path("Cargo.toml")).unwrap();
    assert!(manifest.contains("cdylib"));
    assert!(manifest.contains("staticlib"));
    assert!(Path::new(&manifest_path("include/ldd_audit.h")).exists());
}
