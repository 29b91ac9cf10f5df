//! Scene descriptor from anchor scores pooled over a spatial grid.

use crate::anchors::AnchorBank;
use crate::dataset::DescriptorStore;
use crate::linalg::normalized;

/// Number of pooling cells: the whole image plus a 2x2 split.
pub const GRID_CELLS: usize = 5;

/// Cell of the 2x2 split containing a point, numbered row-major from the
/// top-left. Points on a dividing line go to the lower/right cell.
fn quadrant(cx: f64, cy: f64, width: f64, height: f64) -> usize {
    let col = usize::from(cx >= width / 2.0);
    let row = usize::from(cy >= height / 2.0);
    row * 2 + col
}

/// Max anchor score per cell before normalization. Layout: `K` entries for
/// the whole image, then `K` per quadrant (top-left, top-right,
/// bottom-left, bottom-right). Empty cells hold 0.
pub fn grid_pool(bank: &AnchorBank, store: &DescriptorStore, image: usize) -> Vec<f64> {
    let k = bank.len();
    let entry = store.image(image);
    let mut best = vec![f64::NEG_INFINITY; k * GRID_CELLS];
    for (p, region) in entry.proposals.iter().enumerate() {
        let (cx, cy) = region.center();
        let cell = 1 + quadrant(cx, cy, entry.width, entry.height);
        for (a, w) in bank.weights.iter().enumerate() {
            let s = crate::linalg::dot_f32(entry.descriptors.row(p), w);
            for c in [0, cell] {
                let slot = &mut best[c * k + a];
                *slot = slot.max(s);
            }
        }
    }
    best.into_iter()
        .map(|v| if v == f64::NEG_INFINITY { 0.0 } else { v })
        .collect()
}

/// L2-normalized [`grid_pool`], length `K * 5`.
pub fn grid_encode(bank: &AnchorBank, store: &DescriptorStore, image: usize) -> Vec<f64> {
    normalized(&grid_pool(bank, store, image))
}
