use microfp::supervised::{svm_train, Kernel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Soft-margin primal objective `½‖w‖² + C Σ max(0, 1 − y(w·x + b))`.
fn primal(w: [f64; 2], b: f64, x: &[[f64; 2]], y: &[i8], c: f64) -> f64 {
    let hinge: f64 = x
        .iter()
        .zip(y)
        .map(|(p, &t)| (1.0 - t as f64 * (w[0] * p[0] + w[1] * p[1] + b)).max(0.0))
        .sum();
    0.5 * (w[0] * w[0] + w[1] * w[1]) + c * hinge
}

/// Exhaustive search over a (w1, w2, b) grid, refined around the best
/// cell; the objective is convex so the refinement cannot leave the basin.
fn grid_search(x: &[[f64; 2]], y: &[i8], c: f64) -> ([f64; 2], f64, f64) {
    let (mut centre, mut half, mut step): ([f64; 3], f64, f64) = ([0.0; 3], 4.0, 0.1);
    let mut best = (f64::INFINITY, [0.0; 3]);
    for _ in 0..5 {
        let n = (2.0 * half / step).round() as i64;
        for i in 0..=n {
            for j in 0..=n {
                for k in 0..=n {
                    let p = [
                        centre[0] - half + i as f64 * step,
                        centre[1] - half + j as f64 * step,
                        centre[2] - half + k as f64 * step,
                    ];
                    let v = primal([p[0], p[1]], p[2], x, y, c);
                    if v < best.0 {
                        best = (v, p);
                    }
                }
            }
        }
        centre = best.1;
        half = 2.0 * step;
        step /= 10.0;
    }
    ([best.1[0], best.1[1]], best.1[2], best.0)
}

#[test]
fn linear_svm_matches_primal_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..20 {
        let t: i8 = if i % 2 == 0 { 1 } else { -1 };
        let centre = if t == 1 { [1.0, 0.6] } else { [-0.4, -0.8] };
        x.push([centre[0] + rng.random_range(-1.2..1.2), centre[1] + rng.random_range(-1.2..1.2)]);
        y.push(t);
    }
    let c = 1.0;
    let rows: Vec<f64> = x.iter().flatten().copied().collect();
    let model = svm_train(&rows, 2, &y, Kernel::Linear, c).unwrap();
    let b = model.decision(&[0.0, 0.0]).unwrap();
    let w = [model.decision(&[1.0, 0.0]).unwrap() - b, model.decision(&[0.0, 1.0]).unwrap() - b];
    let smo_obj = primal(w, b, &x, &y, c);

    let (gw, gb, grid_obj) = grid_search(&x, &y, c);
    eprintln!("smo w={w:?} b={b} obj={smo_obj}; grid w={gw:?} b={gb} obj={grid_obj}");
    assert!((smo_obj - grid_obj).abs() <= 1e-2 * grid_obj, "objectives {smo_obj} vs {grid_obj}");
    for p in &x {
        let f_smo = model.decision(p).unwrap();
        let f_grid = gw[0] * p[0] + gw[1] * p[1] + gb;
        assert!((f_smo - f_grid).abs() < 0.05, "decision {f_smo} vs {f_grid} at {p:?}");
    }
}
