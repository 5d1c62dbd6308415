//! The invariant and oracle suites behind `bss check`, as a library call.

fn main() -> bss::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(7);
    let mut ok = true;
    for r in bss::suites::run_suite("all", seed, &[], 1e-4)? {
        println!("{r}\n");
        ok &= r.passed;
    }
    std::process::exit(if ok { 0 } else { 1 });
}
