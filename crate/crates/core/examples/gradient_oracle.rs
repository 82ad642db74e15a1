//! Gradient check of every differentiable op and of the whole twin pipeline.

use coverdet::oracle::{gradcheck_suite, FD_EPS, FD_TOL};

fn main() -> anyhow::Result<()> {
    let instances = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(5);
    println!("eps {FD_EPS}, tolerance {FD_TOL}, {instances} instances per op");
    for r in gradcheck_suite(instances, 1)? {
        println!(
            "{:<12} {:>6} coords {:>4} skipped  max rel err {:.2e}  {}",
            r.op,
            r.check.checked,
            r.check.skipped,
            r.check.max_rel_err,
            if r.check.passed() { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
