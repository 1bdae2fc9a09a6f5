use ct_vlm::nn::{conv3d, conv3d_backward};
use ndarray::Array5;
use std::time::Instant;

fn main() {
    // TinyResNet stage-1-like load: batch 16, 32ch, (16,8,8) spatial, 3^3 kernel
    let x = Array5::<f32>::from_elem((16, 32, 16, 8, 8), 0.5);
    let w = Array5::<f32>::from_elem((32, 32, 3, 3, 3), 0.01);
    let b = vec![0.0f32; 32];
    let t = Instant::now();
    let mut y = None;
    for _ in 0..10 {
        y = Some(conv3d(&x, &w, &b, [1,1,1], [1,1,1]));
    }
    let fwd = t.elapsed().as_secs_f64() / 10.0;
    let macs = 16.0*32.0*16.0*8.0*8.0*32.0*27.0;
    println!("stage conv fwd: {:.1} ms, {:.2} GFLOP/s", fwd*1e3, 2.0*macs/fwd/1e9);
    let dy = y.unwrap();
    let t = Instant::now();
    for _ in 0..5 {
        let _ = conv3d_backward(&x, &w, &dy, [1,1,1], [1,1,1]);
    }
    let bwd = t.elapsed().as_secs_f64() / 5.0;
    println!("stage conv bwd: {:.1} ms, {:.2} GFLOP/s", bwd*1e3, 2.0*2.0*macs/bwd/1e9);

    // Stem-like load: batch 16, 1->32ch, in (32,32,32), k (3,7,7), stride (1,2,2), pad (1,3,3)
    let x = Array5::<f32>::from_elem((16, 1, 32, 32, 32), 0.5);
    let w = Array5::<f32>::from_elem((32, 1, 3, 7, 7), 0.01);
    let t = Instant::now();
    for _ in 0..5 { let _ = conv3d(&x, &w, &b, [1,2,2], [1,3,3]); }
    let fwd = t.elapsed().as_secs_f64() / 5.0;
    let macs = 16.0*32.0*32.0*16.0*16.0*147.0;
    println!("stem conv fwd: {:.1} ms, {:.2} GFLOP/s", fwd*1e3, 2.0*macs/fwd/1e9);

    // f32 depth-sum exactness experiment for naive 1/d replication
    use rand::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for d in [3usize, 5, 6, 7] {
        let mut fails = 0u64;
        for _ in 0..3_000_000 {
            let k: f32 = rng.random_range(-10.0..10.0f32);
            let m = k / d as f32;
            let mut s = 0.0f32;
            for _ in 0..d { s += m; }
            if s != k { fails += 1; }
        }
        println!("naive depth-sum d={d}: {fails} failures / 3M");
    }
}
