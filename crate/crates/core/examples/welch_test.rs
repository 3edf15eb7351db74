//! Welch's t-test on two sets of per-seed accuracies.

use adauda::analysis::welch_t_test;

fn main() -> adauda::Result<()> {
    let ada_tsa = [0.944, 0.951, 0.938, 0.947, 0.942];
    let full_ft = [0.881, 0.902, 0.874, 0.890, 0.866];
    let w = welch_t_test(&full_ft, &ada_tsa)?;
    println!("t = {:.4}, df = {:.3}, p = {:.3e}", w.t, w.df, w.p);
    let flag = if w.p < 0.01 {
        "\u{2021}"
    } else if w.p < 0.05 {
        "\u{2020}"
    } else {
        ""
    };
    println!(
        "Full-FT {:.2}{flag} vs Ada-TSA {:.2}",
        100.0 * w.mean_a,
        100.0 * w.mean_b
    );
    Ok(())
}
