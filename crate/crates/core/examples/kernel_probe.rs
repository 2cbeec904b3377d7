use stabilitylab::data::CorpusSpec;
use stabilitylab::model::{ModelConfig, QkLayerNorm};
use stabilitylab::optim::OptimizerConfig;
use stabilitylab::train::{train, TrainSetup};

fn setup(d: usize, l: usize, dh: usize, v: usize, t: usize, b: usize, qkln: QkLayerNorm, lr: f64, steps: u64, zloss: f64, decay: f64) -> TrainSetup {
    TrainSetup {
        model: ModelConfig {
            model_dim: d, num_layers: l, num_heads: d / dh, head_dim: dh,
            vocab_size: v, context_length: t, qk_layernorm: qkln,
            ..ModelConfig::default()
        },
        optimizer: OptimizerConfig {
            max_lr: lr, warmup_steps: steps / 20, total_steps: steps,
            zloss_coeff: zloss, weight_decay: decay,
            ..OptimizerConfig::default()
        },
        corpus: CorpusSpec { vocab_size: v, ..CorpusSpec::default() },
        batch_size: b,
        seed: 0,
        log_interval: 10,
        eval_interval: steps,
        eval_sequences: 64,
    }
}

fn run(s: &TrainSetup, label: &str) {
    let t0 = std::time::Instant::now();
    let out = train::<f32>(s).unwrap();
    let maxlogit = out.records.iter()
        .flat_map(|r| r.attention.iter().filter(|p| p.layer == 0))
        .map(|p| p.max_logit).fold(f64::NEG_INFINITY, f64::max);
    let last = out.records.last().unwrap();
    println!(
        "{label}: div={:?} final={:.4} maxlogL0={:.3e} logz={:+.3} ({:.0}s)",
        out.diverged_at, out.final_eval_loss, maxlogit, last.log_z_mean, t0.elapsed().as_secs_f64()
    );
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    match which.as_str() {
        "calib" => {
            // criterion 4 candidates: tiny model, small vocab, long run
            run(&setup(64, 2, 32, 8, 32, 2, QkLayerNorm::PerHead, 1e-1, 12000, 0.0, 0.0), "c4 V8 nz lr1e-1");
            run(&setup(64, 2, 32, 8, 32, 2, QkLayerNorm::PerHead, 1e-1, 12000, 1e-4, 0.0), "c4 V8 z  lr1e-1");
            run(&setup(64, 2, 32, 8, 32, 2, QkLayerNorm::PerHead, 3e-1, 12000, 0.0, 0.0), "c4 V8 nz lr3e-1");
            run(&setup(64, 2, 32, 8, 32, 2, QkLayerNorm::PerHead, 3e-1, 12000, 1e-4, 0.0), "c4 V8 z  lr3e-1");
        }
        "c6" => {
            // criterion 6: transplant at 0.59M lr 1e-2
            let base = |kappa: Option<f64>, l: usize| {
                let mut s = setup(128, l, 64, 256, 48, 1, QkLayerNorm::PerHead, 1e-2, 4000, 1e-4, 1e-4);
                s.model.transplant_kappa = kappa;
                s
            };
            run(&base(None, 0), "c6 bigram L0");
            run(&base(None, 3), "c6 untransplanted");
            run(&base(Some(1.0), 3), "c6 kappa 1");
            run(&base(Some(1e4), 3), "c6 kappa 1e4");
        }
        _ => {}
    }
}
