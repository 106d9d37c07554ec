#![allow(dead_code)]

pub mod broker;

use std::path::PathBuf;
use std::sync::OnceLock;

use fedkit::data::{load_mnist, Mnist, DATA_DIR_ENV};

/// MNIST from `FEDKIT_DATA_DIR`, or the workspace `data/mnist` directory.
pub fn mnist() -> &'static Mnist {
    static MNIST: OnceLock<Mnist> = OnceLock::new();
    MNIST.get_or_init(|| {
        let dir = std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
        load_mnist(&dir).unwrap_or_else(|e| {
            panic!(
                "MNIST not available in {} ({e}); run `fedkit fetch-data` first",
                dir.display()
            )
        })
    })
}
