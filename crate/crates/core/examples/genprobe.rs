//! Scratch probe: single-sample overfit capacity check.

use gridflow_core::grid::Regime;
use gridflow_core::model::{Model, ModelConfig, PreparedSample};
use gridflow_core::synth::{generate_dataset, Split, SynthConfig};
use gridflow_core::train::{evaluate, train, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(300);
    let unroll: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(10);
    let lambda: f64 = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(1e-4);

    let cfg = SynthConfig { n_samples: 3, seed: 77, ..SynthConfig::new(Regime::Hv) };
    let ds = generate_dataset(&cfg).unwrap();
    let one: Vec<PreparedSample> =
        vec![PreparedSample::new(&ds.samples[0]).unwrap()];
    println!("sample has {} buses", ds.samples[0].grid.n());

    let mut model = Model::init(&ModelConfig { unroll, ..ModelConfig::desk() }, 0);
    let mut tc = TrainConfig { lr, epochs, batch_size: 1, ..TrainConfig::default() };
    tc.loss.lambda_pf = lambda;
    let hist = train(&mut model, &one, &one, &tc).unwrap();
    for (i, e) in hist.epochs.iter().enumerate() {
        if i % 25 == 0 || i + 1 == hist.epochs.len() {
            println!(
                "epoch {:4}  data {:.3e}  pf {:.3e}  rmse {:.3e}",
                e.epoch, e.loss_data, e.loss_pf, e.val_rmse
            );
        }
    }
    let ev = evaluate(&model, &one, tc.loss.gamma).unwrap();
    println!("final rmse {:.3e}  l_pf {:.3e}", ev.rmse_all, ev.l_pf);
}
