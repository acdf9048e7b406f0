#![allow(dead_code)]

use std::sync::atomic::{AtomicU16, Ordering};
use std::time::{Duration, Instant};

use aerovis::client::{Drone, DroneEndpoint};
use aerovis::sim::{SimConfig, SimError, SimPorts, SimScene, SimServer};

static NEXT_BASE: AtomicU16 = AtomicU16::new(0);

/// Port base unused by any other sim in this process, starting from a
/// pid-dependent offset so concurrent test binaries rarely collide.
pub fn next_base() -> u16 {
    let _ = NEXT_BASE.compare_exchange(
        0,
        20_000 + (std::process::id() % 2_000) as u16 * 10,
        Ordering::SeqCst,
        Ordering::SeqCst,
    );
    let base = NEXT_BASE.fetch_add(10, Ordering::SeqCst);
    if base > 60_000 {
        NEXT_BASE.store(20_000, Ordering::SeqCst);
    }
    base
}

pub fn start_sim_with(config: SimConfig, scene: SimScene) -> (SimServer, u16) {
    for _ in 0..50 {
        let base = next_base();
        match SimServer::start(config.clone(), scene.clone(), SimPorts::local(base)) {
            Ok(sim) => return (sim, base),
            Err(SimError::Bind { .. }) => continue,
            Err(e) => panic!("sim start: {e}"),
        }
    }
    panic!("no free port block for the simulator");
}

pub fn start_sim() -> (SimServer, u16) {
    start_sim_with(SimConfig::default(), SimScene::default())
}

pub fn drone_for(base: u16) -> Drone {
    Drone::new(DroneEndpoint::with_base("127.0.0.1", base))
}

pub fn wait_until(timeout: Duration, mut pred: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if pred() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    pred()
}

use aerovis::vision::{mlp_loss_and_grad, HandKeypoints, MlpParams, GESTURE_CLASSES, KEYPOINT_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Below this magnitude a gradient component is compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

/// Largest relative error between backprop and central differences over
/// `draws` random (params, batch) pairs, checking every parameter.
pub fn fd_max_rel_error(draws: usize, eps: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let params = MlpParams::glorot(&mut rng);
        let batch: Vec<(HandKeypoints, usize)> = (0..4)
            .map(|_| {
                let mut k = [0.0; KEYPOINT_DIM];
                k.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                (HandKeypoints(k), rng.random_range(0..GESTURE_CLASSES))
            })
            .collect();
        let (_, grad) = mlp_loss_and_grad(&params, &batch).unwrap();
        let analytic: Vec<f64> = grad.iter().copied().collect();
        for (i, g) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            *component(&mut plus, i) += eps;
            *component(&mut minus, i) -= eps;
            let lp = mlp_loss_and_grad(&plus, &batch).unwrap().0;
            let lm = mlp_loss_and_grad(&minus, &batch).unwrap().0;
            let fd = (lp - lm) / (2.0 * eps);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(FD_FLOOR);
            worst = worst.max(rel);
        }
    }
    worst
}

fn component(p: &mut MlpParams, mut i: usize) -> &mut f64 {
    for part in [&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2] {
        if i < part.len() {
            return &mut part[i];
        }
        i -= part.len();
    }
    panic!("parameter index out of range");
}
