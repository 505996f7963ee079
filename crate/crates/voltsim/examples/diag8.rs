use voltsim::autodiff::Tensor;
use voltsim::compression::{log_nodes, Autoencoder, Pca};
use voltsim::nn::{split_shuffle, EarlyStop, TrainConfig};
use voltsim::synth::{generate, SynthConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(350);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.005);
    let patience: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0);

    let market =
        generate(&SynthConfig { n_days: 2000, seed: 42, ..SynthConfig::default() }).unwrap();
    let surfaces: Vec<_> = market.surfaces.iter().step_by(4).cloned().collect();
    let n = surfaces.len();
    let log = log_nodes(&surfaces).unwrap();

    for dim in 1..=5usize {
        let mut ae_all = Vec::new();
        let mut pca_all = Vec::new();
        for seed in 0..10u64 {
            let (tr, te) = split_shuffle(n, 0.8, seed).unwrap();
            let mut config = TrainConfig::full_batch(lr, 0.0, iters, seed + 100);
            if patience > 0 {
                config.early_stop = EarlyStop::Patience(patience);
            }
            let (ae, _) = Autoencoder::train(&surfaces, dim, &tr, &te, &config).unwrap();
            ae_all.push(ae.reconstruction_mse(&surfaces, &te).unwrap());
            let scaled = ae.scaler().transform(&log).unwrap();
            let train_rows: Vec<Vec<f64>> =
                tr.iter().map(|&i| scaled.row(i).to_vec()).collect();
            let pca = Pca::fit(&Tensor::from_rows(&train_rows), dim).unwrap();
            pca_all.push(pca.mse(&scaled, &te).unwrap());
        }
        let ae_mean: f64 = ae_all.iter().sum::<f64>() / 10.0;
        let pca_mean: f64 = pca_all.iter().sum::<f64>() / 10.0;
        let strs: Vec<String> = ae_all.iter().map(|v| format!("{v:.2e}")).collect();
        println!(
            "dim {dim}: ae {ae_mean:.3e} pca {pca_mean:.3e} ratio {:.3} | per-seed ae [{}]",
            ae_mean / pca_mean,
            strs.join(",")
        );
    }
}
