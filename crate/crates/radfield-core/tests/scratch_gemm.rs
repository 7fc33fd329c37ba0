use radfield_core::backend::{gemm_nn, gemm_nt, gemm_tn};
use radfield_core::rng::{seeded, RngExt};
use std::time::Instant;

fn bench(label: &str, m: usize, k: usize, n: usize) {
    let mut rng = seeded(1);
    let a: Vec<f64> = (0..m * k).map(|_| rng.uniform()).collect();
    let b: Vec<f64> = (0..k * n).map(|_| rng.uniform()).collect();
    let mut c = vec![0.0; m * n];
    let flops = 2.0 * m as f64 * k as f64 * n as f64;
    for _ in 0..2 {
        gemm_nn(m, k, n, &a, &b, &mut c, false);
    }
    let reps = 5;
    let t = Instant::now();
    for _ in 0..reps {
        gemm_nn(m, k, n, &a, &b, &mut c, false);
    }
    let el = t.elapsed().as_secs_f64() / reps as f64;
    let t2 = Instant::now();
    let bt: Vec<f64> = (0..n * k).map(|_| rng.uniform()).collect();
    for _ in 0..reps {
        gemm_nt(m, k, n, &a, &bt, &mut c, false);
    }
    let el_nt = t2.elapsed().as_secs_f64() / reps as f64 - 0.0;
    let at: Vec<f64> = (0..k * m).map(|_| rng.uniform()).collect();
    let t3 = Instant::now();
    for _ in 0..reps {
        gemm_tn(m, k, n, &at, &b, &mut c, false);
    }
    let el_tn = t3.elapsed().as_secs_f64() / reps as f64;
    println!(
        "{label}: nn {:.1}ms ({:.1} GF/s)  nt {:.1}ms ({:.1} GF/s)  tn {:.1}ms ({:.1} GF/s)",
        el * 1e3,
        flops / el / 1e9,
        el_nt * 1e3,
        flops / el_nt / 1e9,
        el_tn * 1e3,
        flops / el_tn / 1e9
    );
}

#[test]
fn scratch_gemm_speed() {
    bench("32768x32x64 (density h1)", 32768, 32, 64);
    bench("32768x64x32 (density out)", 32768, 64, 32);
    bench("32768x95x64 (color h1)", 32768, 95, 64);
    bench("32768x64x64 (square)", 32768, 64, 64);
    bench("32768x64x3 (rgb head)", 32768, 64, 3);
    bench("64x32768x64 (weight grad)", 64, 32768, 64);
    bench("95x32768x64 (wgrad L0)", 95, 32768, 64);
    bench("95x32768x8 (wgrad attn q)", 95, 32768, 8);
    bench("32768x8x95 (d_tokens)", 32768, 8, 95);
    bench("32768x95x8 (attn proj)", 32768, 95, 8);
    bench("1024x1024x64", 1024, 1024, 64);
}
