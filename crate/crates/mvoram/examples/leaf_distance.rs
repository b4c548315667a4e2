//! Access-pattern distance: how far the distinct-leaf distribution of
//! colliding accesses sits from a uniform random pattern, and how dummy
//! rounds drive that distance to zero.

use mvoram::analysis::leaves::{dist_x, dist_y, mu, statistical_distance};

fn main() {
    let height = 17u32;
    let n = (1u64 << (height + 1)) - 1;

    println!("distance vs clients at height {height} (N = {n}):");
    print!("{:>6}", "c");
    let alphas = [0.90436, 1.0945, 1.2353, 1.537];
    for a in alphas {
        print!("{a:>12}");
    }
    println!();
    for c in [1u32, 5, 10, 20, 30, 40, 50] {
        print!("{c:>6}");
        let x = dist_x(height, c);
        for alpha in alphas {
            let y = dist_y(height, c, alpha, n);
            let d = statistical_distance(&x, &y).unwrap();
            print!("{d:>12.6}");
        }
        println!();
    }

    println!("\nstrong-mode bound at c = 30, near-uniform workload:");
    for sigma in [0u32, 10, 20, 29, 30, 50] {
        let v = mu(n, 30, 1e-7, sigma, height);
        println!("  sigma = {sigma:>2}: mu = {v:.6}");
    }
    println!("(zero once sigma + 1 covers the concurrency)");
}
