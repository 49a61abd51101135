fn main() {
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    match cbindgen::generate(&crate_dir) {
        Ok(bindings) => {
            bindings.write_to_file(format!("{crate_dir}/include/probseq.h"));
        }
        Err(e) => {
            // keep the build alive; the committed header still ships
            println!("cargo:warning=skipping header generation: {e}");
        }
    }
}
