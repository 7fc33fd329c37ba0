use radfield_core::encoding::{hash_encode, sh_encode, HashGridConfig};
use radfield_core::field::{FieldConfig, FieldModel};
use radfield_core::render::{volume_render, SampledPoints};
use radfield_core::rng::{seeded, RngExt};
use radfield_core::tensor::Tensor;
use std::time::Instant;

#[test]
fn scratch_training_iteration_cost() {
    let n_rays = 512;
    let n_samples = 64;
    let n = n_rays * n_samples;
    let mut rng = seeded(7);
    let cfg = FieldConfig::default();
    let grid = HashGridConfig::default();
    let model = FieldModel::new(cfg.clone(), &mut rng).unwrap();
    let tables = Tensor::param(
        grid.table_rows(),
        grid.features_per_level,
        (0..grid.table_rows() * grid.features_per_level)
            .map(|_| rng.uniform_in(-1e-4, 1e-4))
            .collect(),
    );
    let pos = Tensor::from_vec(n, 3, (0..n * 3).map(|_| rng.uniform()).collect());
    let mut dirs = Vec::with_capacity(n * 3);
    for _ in 0..n {
        let d = [
            rng.uniform_in(-1.0, 1.0),
            rng.uniform_in(-1.0, 1.0),
            rng.uniform_in(-1.0, 1.0),
        ];
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt().max(1e-3);
        dirs.extend([d[0] / norm, d[1] / norm, d[2] / norm]);
    }
    let dirs = Tensor::from_vec(n, 3, dirs);
    let points = SampledPoints {
        positions: pos.clone(),
        deltas: Tensor::from_vec(n_rays, n_samples, vec![0.03; n_rays * n_samples]),
        midpoints: Tensor::from_vec(
            n_rays,
            n_samples,
            (0..n_rays)
                .flat_map(|_| (0..n_samples).map(|s| (s as f64 + 0.5) / n_samples as f64))
                .collect::<Vec<f64>>(),
        ),
    };

    // warm up once
    let mut best = f64::INFINITY;
    let mut best_parts = (0.0, 0.0, 0.0, 0.0, 0.0);
    for pass in 0..12 {
        let t0 = Instant::now();
        let gx = hash_encode(&pos, &grid, &tables).unwrap();
        let t_hash = t0.elapsed().as_secs_f64() * 1e3;
        let t1 = Instant::now();
        let gd = sh_encode(&dirs).unwrap();
        let t_sh = t1.elapsed().as_secs_f64() * 1e3;
        let t2 = Instant::now();
        let (sigma, c) = model.forward(&gx, &gd).unwrap();
        let t_fwd = t2.elapsed().as_secs_f64() * 1e3;
        let t3 = Instant::now();
        let out = volume_render(&sigma.reshape(n_rays, n_samples), &c, &points).unwrap();
        let t_vr = t3.elapsed().as_secs_f64() * 1e3;
        let loss = out.color.square().mean_all();
        let t4 = Instant::now();
        loss.backward();
        let t_bwd = t4.elapsed().as_secs_f64() * 1e3;
        let total = t0.elapsed().as_secs_f64() * 1e3;
        let _ = pass;
        if total < best {
            best = total;
            best_parts = (t_hash, t_sh, t_fwd, t_vr, t_bwd);
        }
        for p in model.params() {
            p.zero_grad();
        }
        tables.zero_grad();
    }
    let (h, s, f, v, b) = best_parts;
    println!("BEST: hash {h:.1}ms sh {s:.1}ms fwd {f:.1}ms vr {v:.1}ms bwd {b:.1}ms TOTAL {best:.1}ms");

    // Variant B: stream the batch through in ray chunks, backward per chunk.
    for chunk_rays in [32usize, 64, 128] {
        let cn = chunk_rays * n_samples;
        let mut best_b = f64::INFINITY;
        for _ in 0..12 {
            let t0 = Instant::now();
            let mut total_loss = 0.0;
            for ci in 0..(n_rays / chunk_rays) {
                let p0 = ci * cn;
                let cpos =
                    Tensor::from_vec(cn, 3, pos.data()[p0 * 3..(p0 + cn) * 3].to_vec());
                let cdirs =
                    Tensor::from_vec(cn, 3, dirs.data()[p0 * 3..(p0 + cn) * 3].to_vec());
                let cpoints = SampledPoints {
                    positions: cpos.clone(),
                    deltas: Tensor::from_vec(chunk_rays, n_samples, vec![0.03; cn]),
                    midpoints: Tensor::from_vec(
                        chunk_rays,
                        n_samples,
                        points.midpoints.data()[p0..p0 + cn].to_vec(),
                    ),
                };
                let gx = hash_encode(&cpos, &grid, &tables).unwrap();
                let gd = sh_encode(&cdirs).unwrap();
                let (sigma, c) = model.forward(&gx, &gd).unwrap();
                let out =
                    volume_render(&sigma.reshape(chunk_rays, n_samples), &c, &cpoints).unwrap();
                let loss = out.color.square().mean_all();
                total_loss += loss.data()[0];
                loss.backward();
            }
            let total = t0.elapsed().as_secs_f64() * 1e3;
            best_b = best_b.min(total);
            std::hint::black_box(total_loss);
            for p in model.params() {
                p.zero_grad();
            }
            tables.zero_grad();
        }
        println!("CHUNKED({chunk_rays} rays): TOTAL {best_b:.1}ms");
    }
}
