// scratch tuning harness: terminal metrics per mode/lr/mini_batch/seed
use dyjr::config::TrainConfig;
use dyjr::trainer::Trainer;

fn cfg(mode: &str, lr: f64, mb: usize, seed: u64, steps: u64) -> TrainConfig {
    TrainConfig::from_json(&format!(r#"{{
        "task": {{"vocab_size": 10, "seq_len": 6, "modulus_range": [5, 9]}},
        "learning_rate": {lr},
        "mini_batch": {mb},
        "total_steps": {steps},
        "replay_mode": "{mode}",
        "eval_every": 1000,
        "seed": {seed}
    }}"#)).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args[1].parse().unwrap();
    let mb: usize = args[2].parse().unwrap();
    let steps: u64 = args[3].parse().unwrap();
    let seeds: u64 = args[4].parse().unwrap();
    let modes: Vec<&str> = args[5].split(',').collect();
    for mode in modes {
        for seed in 1..=seeds {
            let mut tr = Trainer::new(cfg(mode, lr, mb, seed, steps)).unwrap();
            let mut last = None;
            let mut mid = None;
            while !tr.is_finished() {
                let r = tr.step().unwrap();
                if r.step == steps / 2 { mid = Some(r.clone()); }
                last = Some(r);
            }
            let r = last.unwrap();
            let m = mid.unwrap();
            println!(
                "{mode:>12} lr={lr} mb={mb} seed={seed}: mid(rw={:.3} r1={:.3} H={:.3}) end: rw={:.3} r1={:.4} H={:.4} p1={:.3} p16={:.3} dc={:.2} clamp={}",
                m.mean_reward, m.rank1_prob, m.approx_entropy_mean,
                r.mean_reward, r.rank1_prob, r.approx_entropy_mean,
                r.eval_pass1.unwrap(), r.eval_pass16.unwrap(),
                r.distinct_correct_mean.unwrap(), r.clamp_hits
            );
        }
    }
}
