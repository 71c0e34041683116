use ndarray::Array2;
use std::time::Instant;

fn main() {
    for (m, k, n) in [(64, 576, 256), (32, 288, 1024), (16, 27, 4096), (64, 64, 256)] {
        let a = Array2::<f64>::from_elem((m, k), 0.5);
        let b = Array2::<f64>::from_elem((k, n), 0.25);
        let reps = 200;
        let t = Instant::now();
        let mut acc = 0.0;
        for _ in 0..reps {
            let c = a.dot(&b);
            acc += c[(0, 0)];
        }
        let secs = t.elapsed().as_secs_f64();
        let flops = 2.0 * (m * k * n) as f64 * reps as f64;
        println!("({m},{k},{n}): {:.2} GFLOP/s (acc {acc:.1})", flops / secs / 1e9);
    }
}
