//! Finite-difference and permutation checks for the graph network and the
//! full TD loss.

use coordprior::gnn::{gnn_backward, gnn_forward, GnnConfig, GnnParams};
use coordprior::learn::{loss_and_grads, Algorithm, Architecture, Episode, LearnerDims, LearnerParams, TrainConfig};
use coordprior::numeric::{Matrix, Parameters};
use coordprior::prior::postprocess_stages;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random_matrix(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn random_prior(n: usize, rng: &mut ChaCha8Rng) -> Matrix {
    postprocess_stages(&random_matrix(n, n, 0.0, 1.0, rng)).prior
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error between `analytic` and central differences of `f`
/// over every scalar in `params`.
fn worst_fd_error<P: Parameters + Clone>(params: &P, analytic: &P, f: impl Fn(&P) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let grads = analytic.tensors();
    for k in 0..params.tensors().len() {
        for e in 0..params.tensors()[k].data().len() {
            let mut plus = params.clone();
            plus.tensors_mut()[k].data_mut()[e] += STEP;
            let mut minus = params.clone();
            minus.tensors_mut()[k].data_mut()[e] -= STEP;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * STEP);
            worst = worst.max(relative(grads[k].data()[e], numeric));
        }
    }
    worst
}

#[test]
fn gnn_gradients_match_finite_differences_on_many_seeds() {
    let (n, d) = (3, 8);
    for seed in 0..25 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = GnnParams::new(d, GnnConfig { hidden: d, layers: 2 }, &mut rng).unwrap();
        let obs = random_matrix(n, d, -1.0, 1.0, &mut rng);
        let adj = random_prior(n, &mut rng);
        let coeff = random_matrix(n, d, -1.0, 1.0, &mut rng);
        let loss = |p: &GnnParams| {
            let (h, _) = gnn_forward(&obs, &adj, p).unwrap();
            h.data().iter().zip(coeff.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, trace) = gnn_forward(&obs, &adj, &params).unwrap();
        let grads = gnn_backward(&trace, &params, &coeff).unwrap();
        let worst = worst_fd_error(&params, &grads.params, loss);
        assert!(worst < 1e-4, "seed {seed}: relative error {worst}");

        // gradient with respect to the observations as well
        for i in 0..n {
            for j in 0..d {
                let mut plus = obs.clone();
                plus.set(i, j, obs.get(i, j) + STEP);
                let mut minus = obs.clone();
                minus.set(i, j, obs.get(i, j) - STEP);
                let f = |o: &Matrix| {
                    let (h, _) = gnn_forward(o, &adj, &params).unwrap();
                    h.data().iter().zip(coeff.data()).map(|(a, b)| a * b).sum::<f64>()
                };
                let numeric = (f(&plus) - f(&minus)) / (2.0 * STEP);
                assert!(relative(grads.obs.get(i, j), numeric) < 1e-4, "seed {seed} obs[{i}][{j}]");
            }
        }
    }
}

/// Straight-line loops over the documented layer equations.
fn oracle_forward(obs: &Matrix, adj: &Matrix, p: &GnnParams) -> Vec<Vec<f64>> {
    let relu = |x: f64| x.max(0.0);
    let dense = |x: &[f64], w: &Matrix, b: &Matrix| -> Vec<f64> {
        (0..w.rows()).map(|o| relu(b.get(0, o) + (0..w.cols()).map(|i| w.get(o, i) * x[i]).sum::<f64>())).collect()
    };
    let mut h: Vec<Vec<f64>> = (0..obs.rows())
        .map(|r| {
            let a = dense(obs.row(r), &p.encoder1.weight, &p.encoder1.bias);
            dense(&a, &p.encoder2.weight, &p.encoder2.bias)
        })
        .collect();
    for w in &p.conv {
        let n = h.len();
        let d = h[0].len();
        let mixed: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|k| (0..n).map(|j| adj.get(i, j) * h[j][k]).sum()).collect())
            .collect();
        h = mixed
            .iter()
            .map(|m| (0..w.rows()).map(|o| relu((0..d).map(|k| w.get(o, k) * m[k]).sum())).collect())
            .collect();
    }
    h
}

#[test]
fn forward_matches_loop_oracle() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let n = rng.random_range(2..=6);
        let obs_dim = rng.random_range(1..=10);
        let layers = rng.random_range(1..=3);
        let p = GnnParams::new(obs_dim, GnnConfig { hidden: 7, layers }, &mut rng).unwrap();
        let obs = random_matrix(n, obs_dim, -2.0, 2.0, &mut rng);
        let adj = random_prior(n, &mut rng);
        let (h, _) = gnn_forward(&obs, &adj, &p).unwrap();
        let expected = oracle_forward(&obs, &adj, &p);
        for (got, want) in h.to_rows().iter().zip(&expected) {
            for (a, b) in got.iter().zip(want) {
                assert!((a - b).abs() <= 1e-12, "seed {seed}: {a} vs {b}");
            }
        }
    }
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    perm
}

#[test]
fn forward_is_permutation_equivariant() {
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = rng.random_range(2..=8);
        let p = GnnParams::new(6, GnnConfig { hidden: 8, layers: 2 }, &mut rng).unwrap();
        let obs = random_matrix(n, 6, -1.0, 1.0, &mut rng);
        let adj = random_prior(n, &mut rng);
        let perm = shuffled(n, &mut rng);
        let obs_p = Matrix::from_rows(&perm.iter().map(|&i| obs.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let mut adj_p = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                adj_p.set(i, j, adj.get(perm[i], perm[j]));
            }
        }
        let (h, _) = gnn_forward(&obs, &adj, &p).unwrap();
        let (h_p, _) = gnn_forward(&obs_p, &adj_p, &p).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            for (a, b) in h_p.row(i).iter().zip(h.row(src)) {
                assert!((a - b).abs() < 1e-9, "seed {seed}");
            }
        }
    }
}

fn random_episode(id: u64, dims: &LearnerDims, len: usize, terminated: bool, rng: &mut ChaCha8Rng) -> Episode {
    let mut ep = Episode::new(id, dims, random_prior(dims.n_agents, rng), false);
    for t in 0..=len {
        let obs = random_matrix(dims.n_agents, dims.obs_dim, -1.0, 1.0, rng);
        let state: Vec<f64> = (0..dims.state_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        ep.push_point(&obs, &state).unwrap();
        if t < len {
            let actions: Vec<usize> = dims.action_counts.iter().map(|&a| rng.random_range(0..a)).collect();
            ep.push_step(&actions, rng.random_range(-1.0..1.0));
        }
    }
    ep.terminated = terminated;
    ep
}

#[test]
fn td_loss_gradients_match_finite_differences() {
    let dims = LearnerDims {
        n_agents: 2,
        obs_dim: 8,
        state_dim: 5,
        action_counts: vec![3, 4],
    };
    let cfg = TrainConfig {
        gnn: GnnConfig { hidden: 8, layers: 2 },
        agent_hidden: 8,
        mixer_hidden: 4,
        ..TrainConfig::default()
    };
    for algorithm in [Algorithm::Iql, Algorithm::Vdn, Algorithm::Qmix, Algorithm::Ours] {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + algorithm as u64);
            let arch = Architecture::new(algorithm, dims.clone(), &cfg);
            let params = LearnerParams::new(&arch, &mut rng).unwrap();
            let target = LearnerParams::new(&arch, &mut rng).unwrap();
            let episodes = [
                random_episode(0, &dims, 3, true, &mut rng),
                random_episode(1, &dims, 2, false, &mut rng),
            ];
            let batch: Vec<&Episode> = episodes.iter().collect();
            let (_, grads) = loss_and_grads(&params, &target, &batch, &dims, algorithm, 0.9).unwrap();
            let worst = worst_fd_error(&params, &grads, |p| {
                loss_and_grads(p, &target, &batch, &dims, algorithm, 0.9).unwrap().0
            });
            assert!(worst < 1e-3, "{algorithm:?} seed {seed}: relative error {worst}");
        }
    }
}
