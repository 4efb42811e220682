#![allow(dead_code)]

use std::fs;
use std::path::Path;

pub mod oracle;

use cgsnet::mnist::{encode_images, encode_labels, Dataset};
use cgsnet::rng::DetRng;

/// Learnable stand-in for MNIST: class `c` lights a 4×4 patch whose position
/// depends on `c`, plus sparse noise.
pub fn synthetic(n: usize, seed: u64) -> Dataset {
    let mut rng = DetRng::new(seed);
    let mut px = vec![0u8; n * 784];
    let mut labels = Vec::with_capacity(n);
    for (k, img) in px.chunks_mut(784).enumerate() {
        let c = (k % 10) as usize;
        labels.push(c as u8);
        let (r0, c0) = (4 + (c / 5) * 10, 2 + (c % 5) * 5);
        for r in r0..r0 + 4 {
            for col in c0..c0 + 4 {
                img[r * 28 + col] = 128 + rng.below(128) as u8;
            }
        }
        for _ in 0..30 {
            img[rng.below(784) as usize] = rng.below(256) as u8;
        }
    }
    Dataset::new(px, labels, 28, 28).unwrap()
}

fn write_split(dir: &Path, split: &str, d: &Dataset) {
    let px: Vec<u8> = (0..d.len()).flat_map(|i| d.image(i).to_vec()).collect();
    fs::write(dir.join(format!("{split}-images-idx3-ubyte")), encode_images(&px, d.len(), 28, 28)).unwrap();
    fs::write(dir.join(format!("{split}-labels-idx1-ubyte")), encode_labels(d.labels())).unwrap();
}

/// Writes the four IDX files of a small synthetic MNIST into `dir`.
pub fn write_mnist(dir: &Path, train: usize, test: usize) {
    fs::create_dir_all(dir).unwrap();
    write_split(dir, "train", &synthetic(train, 1));
    write_split(dir, "t10k", &synthetic(test, 2));
}
