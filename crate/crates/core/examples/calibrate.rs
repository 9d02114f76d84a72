//! Task-parameter grid: find the regime where the directional ordering holds.

use fedskd_core::config::{ExperimentConfig, Method};
use fedskd_core::metrics::{global_test, local_test};
use fedskd_core::protocol::run_experiment;

fn base_cfg(method: Method, seed: u64, amp: f64, shift: f64, taps: &[usize]) -> ExperimentConfig {
    let mut cfg: ExperimentConfig =
        toml::from_str(&format!("method = \"{}\"", method.name())).unwrap();
    cfg.n_clients = 3;
    cfg.rounds = 30;
    cfg.gamma = 1.0;
    cfg.model.base_width = 16;
    cfg.model.width_step = 2;
    cfg.model.tap_layers = taps.to_vec();
    cfg.dataset.classes = 2;
    cfg.dataset.samples_per_client = 192;
    cfg.dataset.shape = vec![1, 12, 12];
    cfg.dataset.per_client_shift = shift;
    cfg.dataset.class_amp = amp;
    cfg.partitioner.alpha = 0.5;
    cfg.partitioner.min_per_class = 4;
    cfg.lr = 1e-4;
    cfg.batch_size = 8;
    cfg.seed = seed;
    cfg.workers = 3;
    cfg
}

fn run3(method: Method, amp: f64, shift: f64, taps: &[usize]) -> (f64, f64) {
    let mut lm = 0.0;
    let mut gm = 0.0;
    for seed in [1u64, 2, 3] {
        let out = run_experiment(base_cfg(method, seed, amp, shift, taps)).unwrap();
        let models = out.experiment.deployed_models();
        let refs: Vec<_> = models.iter().collect();
        let shards = out.experiment.test_shards();
        lm += local_test(&refs, &shards).unwrap().mean / 3.0;
        gm += global_test(&refs, &shards).unwrap().mean / 3.0;
    }
    (lm, gm)
}

fn main() {
    let taps: Vec<usize> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|t| t.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![1, 2, 3]);
    for &amp in &[1.2, 1.6] {
        for &shift in &[1.0, 1.6] {
            let (l_local, g_local) = run3(Method::Local, amp, shift, &taps);
            let (l_skd, g_skd) = run3(Method::Fedskd, amp, shift, &taps);
            let (l_cross, g_cross) = run3(Method::FedcrossDagger, amp, shift, &taps);
            let ok6a = g_skd >= g_local + 0.02;
            let ok6b = g_skd >= g_cross - 0.005;
            println!(
                "amp={amp:.1} shift={shift:.1}: G local={g_local:.4} fedskd={g_skd:.4} cross+={g_cross:.4} | L local={l_local:.4} fedskd={l_skd:.4} cross+={l_cross:.4} | d_local={:+.4}{} d_cross={:+.4}{}",
                g_skd - g_local,
                if ok6a { " OK" } else { " FAIL" },
                g_skd - g_cross,
                if ok6b { " OK" } else { " FAIL" },
            );
        }
    }
}
