#![allow(dead_code)]

use proptest::prelude::*;

use bmtree::binning::{BinConfig, BinSpec, Binning, BinnedMatrix};

/// Feature sizes, then per row one bin index per feature plus a label.
pub fn matrix() -> impl Strategy<Value = (Vec<usize>, Vec<(Vec<usize>, bool)>)> {
    prop::collection::vec(2usize..=3, 1..=4).prop_flat_map(|sizes| {
        let row = sizes.iter().map(|&k| 0..k).collect::<Vec<_>>();
        let rows = prop::collection::vec((row, any::<bool>()), 2..80);
        (Just(sizes), rows)
    })
}

pub fn build(sizes: &[usize], rows: &[(Vec<usize>, bool)]) -> BinnedMatrix {
    let features = sizes
        .iter()
        .enumerate()
        .map(|(i, &k)| (format!("f{i}"), BinSpec::Edges((0..=k).map(|e| e as f64).collect())))
        .collect();
    let binning = Binning::unresolved(&BinConfig { features }).unwrap();
    let offsets: Vec<usize> = sizes.iter().scan(0, |acc, &k| {
        let o = *acc;
        *acc += k;
        Some(o)
    }).collect();
    let ids = rows.iter().map(|(r, _)| r.iter().zip(&offsets).map(|(b, o)| b + o).collect()).collect();
    BinnedMatrix::new(binning, ids, rows.iter().map(|r| r.1).collect()).unwrap()
}
