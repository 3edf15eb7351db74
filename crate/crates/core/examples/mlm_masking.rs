//! Corruption statistics of the MLM masking routine.

use adauda::data::{mask_for_mlm, Corruption};
use adauda::model::TokenBatch;

fn main() -> adauda::Result<()> {
    let rows = 1000;
    let seq = 101;
    let ids: Vec<usize> = (0..rows)
        .flat_map(|r| std::iter::once(3).chain((0..seq - 1).map(move |i| 4 + (r * 7 + i) % 500)))
        .collect();
    let batch = TokenBatch::new(ids, rows, seq)?;
    let masked = mask_for_mlm(&batch, 0.15, 504, 42)?;
    let candidates = rows * (seq - 1);
    let selected = masked.selected();
    let count = |k: Corruption| masked.corruption.iter().filter(|c| **c == Some(k)).count();
    println!(
        "selected {:.4} of {candidates} tokens",
        selected as f64 / candidates as f64
    );
    for (name, kind) in [
        ("mask", Corruption::Mask),
        ("random", Corruption::Random),
        ("keep", Corruption::Keep),
    ] {
        println!("  {name:<6} {:.4}", count(kind) as f64 / selected as f64);
    }
    Ok(())
}
