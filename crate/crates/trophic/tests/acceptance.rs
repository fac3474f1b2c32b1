//! Runs every acceptance check on its bundled preset and prints one line
//! per check. Exits non-zero when any check fails.

use trophic::suite::{self, CRITERIA};

fn main() {
    let filter: Vec<usize> = std::env::var("TROPHIC_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|c| c.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failed = Vec::new();
    let mut ran = 0;
    for &(id, name, _) in &CRITERIA {
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        ran += 1;
        match suite::criterion(id) {
            Ok((r, _)) => {
                println!("{}", r.line());
                if !r.passed {
                    failed.push(id);
                }
            }
            Err(e) => {
                println!("[FAIL] {id:>2} {name:<20} error: {e}");
                failed.push(id);
            }
        }
    }
    println!("acceptance: {}/{ran} passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
