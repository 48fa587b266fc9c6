//! Generate the C header from the exported items. The header is written
//! both to OUT_DIR (for build consumers) and to include/corvit.h so the
//! checked-in copy always matches the source.

use std::env;
use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(env::var("CARGO_MANIFEST_DIR").expect("CARGO_MANIFEST_DIR"));
    let out_dir = PathBuf::from(env::var("OUT_DIR").expect("OUT_DIR"));

    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("CORVIT_H".to_string()),
        documentation: true,
        cpp_compat: true,
        enumeration: cbindgen::EnumConfig {
            prefix_with_name: true,
            rename_variants: cbindgen::RenameRule::ScreamingSnakeCase,
            ..Default::default()
        },
        ..Default::default()
    };

    let header = out_dir.join("corvit.h");
    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("cbindgen header generation")
        .write_to_file(&header);

    let include_dir = crate_dir.join("include");
    std::fs::create_dir_all(&include_dir).expect("create include dir");
    std::fs::copy(&header, include_dir.join("corvit.h")).expect("copy header");

    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=build.rs");
}
