//! Quick training-throughput comparison between the two architectures.
//!
//!     cargo run --release -p ampforge-core --example throughput

use ampforge_core::knob::KnobVector;
use ampforge_core::mel::MelConfig;
use ampforge_core::models::{LstmSpec, ModelSpec, WaveNetSpec};
use ampforge_core::train::{train_ensemble, TrainConfig, TrainItem, TrainSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let sr = 16_000u32;
    let t = 65_536usize;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let input: Vec<f64> = (0..t).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let items: Vec<TrainItem> = (0..8)
        .map(|i| {
            let kv = KnobVector::labeled(vec![(i as f64 + 1.0) / 9.0; 6]).unwrap();
            let drive = 1.0 + 5.0 * kv.get(0);
            let target = input.iter().map(|x| 0.7 * (drive * x).tanh()).collect();
            TrainItem { knobs: kv, target }
        })
        .collect();
    let data = TrainSet { input, sample_rate: sr, items };

    let mel_scales = vec![
        MelConfig { n_fft: 64, hop: 16, n_mels: 10, f_min: 0.0, f_max: 8000.0, log_floor: 1e-5 },
        MelConfig { n_fft: 256, hop: 64, n_mels: 40, f_min: 0.0, f_max: 8000.0, log_floor: 1e-5 },
    ];
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        adam_beta1: 0.9,
        adam_beta2: 0.999,
        adam_eps: 1e-8,
        epochs: 6,
        segment_length: 4096,
        batch_size: 4,
        w_mse: 1.0,
        w_mel_loss: 0.1,
        mel_scales,
        seed: 7,
    };

    for (name, spec) in [
        (
            "lstm-h32",
            ModelSpec::Lstm(LstmSpec { hidden_size: 32, num_layers: 1, knobs: 6 }),
        ),
        (
            "lstm-h16",
            ModelSpec::Lstm(LstmSpec { hidden_size: 16, num_layers: 1, knobs: 6 }),
        ),
        (
            "wavenet-c8-d256",
            ModelSpec::WaveNet(WaveNetSpec {
                channels: 8,
                kernel_size: 3,
                dilations: vec![1, 2, 4, 8, 16, 32, 64, 128, 256],
                skip_channels: 8,
                knobs: 6,
            }),
        ),
        (
            "wavenet-c4-d128",
            ModelSpec::WaveNet(WaveNetSpec {
                channels: 4,
                kernel_size: 3,
                dilations: vec![1, 2, 4, 8, 16, 32, 64, 128],
                skip_channels: 4,
                knobs: 6,
            }),
        ),
    ] {
        let (_, report) = train_ensemble(&spec, 2, &data, &cfg).expect("train");
        println!(
            "{name:18} ensemble(2) throughput {:>12.0} samples/s  wall {:.2}s",
            report.throughput, report.wall_secs
        );
    }
}
