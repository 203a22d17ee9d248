//! Audit every differentiable component against central finite
//! differences: attention, the MLP block, each fusion strategy, the
//! reconstruction loss, both distillation losses, cross entropy, and a
//! full encoder block.
//!
//! Run with `cargo run --release --example gradient_check`.

use uniemo::train::gradient_check_all;

fn main() -> uniemo::Result<()> {
    let checks = gradient_check_all(11)?;
    let mut all_ok = true;
    for check in &checks {
        let status = if check.passed() { "pass" } else { "FAIL" };
        println!(
            "{:<24} max rel err {:.3e} over {:>5} comparisons {}",
            check.component, check.max_rel_err, check.compared, status
        );
        all_ok &= check.passed();
    }
    if all_ok {
        println!("all {} components agree with finite differences", checks.len());
    }
    Ok(())
}
