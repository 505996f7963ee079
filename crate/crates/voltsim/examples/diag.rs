use std::time::Instant;

use voltsim::compression::Autoencoder;
use voltsim::evaluation::{acf, ks_test};
use voltsim::flow::FlowConfig;
use voltsim::nn::{split_shuffle, EarlyStop, TrainConfig};
use voltsim::simulator::{build_states, Simulator, TrainingInputs};
use voltsim::synth::{generate, SynthConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let flow_iters: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(1500);
    let flow_lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.003);
    let batch: Option<usize> = args.get(3).and_then(|s| s.parse().ok());

    let t0 = Instant::now();
    let market = generate(&SynthConfig { n_days: 2000, seed: 42, ..SynthConfig::default() }).unwrap();
    println!("synth {:.1}s", t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let (day_train, day_test) = split_shuffle(market.surfaces.len(), 0.8, 1).unwrap();
    let curriculum = std::env::var("DIAG_AE_CURRICULUM").is_ok();
    let (ae, last_mse) = if curriculum {
        let mut cold = TrainConfig::full_batch(0.003, 0.0, 1500, 2);
        cold.early_stop = EarlyStop::Patience(200);
        let (mut ae, _) =
            Autoencoder::train(&market.surfaces, 1, &day_train, &day_test, &cold).unwrap();
        let mut wrng =
            <rand_chacha::ChaCha12Rng as rand::SeedableRng>::seed_from_u64(900);
        let mut warm = TrainConfig::full_batch(0.003, 0.0, 800, 2);
        warm.early_stop = EarlyStop::Patience(200);
        for _ in 0..2 {
            let wide = ae.widen(&mut wrng);
            ae = Autoencoder::train_from(&wide, &market.surfaces, &day_train, &day_test, &warm)
                .unwrap()
                .0;
        }
        let mse = ae.reconstruction_mse(&market.surfaces, &day_test).unwrap();
        (ae, mse)
    } else {
        let ae_config = TrainConfig::full_batch(0.003, 0.0, 1500, 2);
        let (ae, ae_res) =
            Autoencoder::train(&market.surfaces, 3, &day_train, &day_test, &ae_config).unwrap();
        let mse = *ae_res.test_curve.last().unwrap();
        (ae, mse)
    };
    println!("ae {:.1}s test mse {:.6} (curriculum {curriculum})", t0.elapsed().as_secs_f64(), last_mse);

    let states = build_states(&market.spots, &market.surfaces, &ae).unwrap();
    let lag = 2;
    let n_samples = states.len() - lag;
    let (train_idx, test_idx) = split_shuffle(n_samples, 0.8, 3).unwrap();

    let inputs = TrainingInputs::prepare(&states, lag, &train_idx, &test_idx).unwrap();
    // code stats
    for c in 0..inputs.codes.cols() {
        let col: Vec<f64> =
            (0..inputs.codes.rows()).map(|r| inputs.codes.get(r, c)).collect();
        let mn = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let sd = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64)
            .sqrt();
        // day-to-day delta std
        let mut dsd = 0.0;
        for r in 1..col.len() {
            dsd += (col[r] - col[r - 1]).powi(2);
        }
        dsd = (dsd / (col.len() - 1) as f64).sqrt();
        println!(
            "code{c}: range [{mn:.3},{mx:.3}] sd {sd:.4} delta-sd {dsd:.5} ratio {:.4}",
            dsd / (mx - mn)
        );
    }

    let t0 = Instant::now();
    let vol_config = TrainConfig::full_batch(0.003, 0.0, 1200, 4);
    let n_knots: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(32);
    let dropout: f64 = args.get(7).map(|s| s.parse().unwrap()).unwrap_or(0.0);
    let flow_config = FlowConfig { n_knots, ..FlowConfig::default() };
    let mut flow_train = TrainConfig::full_batch(flow_lr, dropout, flow_iters, 5);
    flow_train.batch_size = batch;
    flow_train.grad_clip = Some(args.get(4).map(|s| s.parse().unwrap()).unwrap_or(100.0));
    flow_train.early_stop =
        EarlyStop::Patience(args.get(5).map(|s| s.parse().unwrap()).unwrap_or(600));
    let (sim, vol_res, flow_res) = Simulator::train(
        &states,
        ae.clone(),
        lag,
        &train_idx,
        &test_idx,
        &vol_config,
        &flow_config,
        &flow_train,
    )
    .unwrap();
    println!(
        "train {:.1}s vol test {:.4} flow test {:.4}",
        t0.elapsed().as_secs_f64(),
        vol_res.test_curve.last().unwrap(),
        flow_res.test_curve.last().unwrap()
    );
    for (i, v) in flow_res.test_curve.iter().enumerate() {
        if i % (flow_iters / 15).max(1) == 0 {
            println!("  flow it {i}: test {v:.4} train {:.4}", flow_res.train_curve[i]);
        }
    }

    let latents = sim.invert_latents(&states).unwrap();
    for c in 0..latents.cols() {
        let held: Vec<f64> = test_idx.iter().map(|&i| latents.get(i, c)).collect();
        let ks = ks_test(&held).unwrap();
        let full: Vec<f64> = (0..latents.rows()).map(|r| latents.get(r, c)).collect();
        let rho = acf(&full, 1).unwrap()[1];
        let tr: Vec<f64> = train_idx.iter().map(|&i| latents.get(i, c)).collect();
        let ks_tr = ks_test(&tr).unwrap();
        let mean = full.iter().sum::<f64>() / full.len() as f64;
        let var = full.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / full.len() as f64;
        let kurt = full.iter().map(|v| ((v - mean) / var.sqrt()).powi(4)).sum::<f64>()
            / full.len() as f64;
        println!(
            "z{c}: KS test p {:.4} (D {:.4}), KS train p {:.4}, acf1 {:+.4}, mean {mean:+.3} sd {:.3} kurt {kurt:.2}",
            ks.p_value, ks.statistic, ks_tr.p_value, rho, var.sqrt()
        );
    }

    // dump training samples and extracted latents for offline analysis
    let mut f = std::fs::File::create("/tmp/deltas.csv").unwrap();
    use std::io::Write;
    for r in 0..inputs.codes.rows() {
        let mut row: Vec<String> =
            inputs.codes.row(r).iter().map(|v| format!("{v}")).collect();
        row.extend(inputs.cond.row(r).iter().map(|v| format!("{v}")));
        row.extend(latents.row(r).iter().map(|v| format!("{v}")));
        row.push(format!("{}", if test_idx.contains(&r) { 1 } else { 0 }));
        writeln!(f, "{}", row.join(",")).unwrap();
    }

    let t0 = Instant::now();
    let paths = sim.sample_paths(&states, 50, 256, 1010).unwrap();
    let rejected = paths.iter().filter(|p| p.exploded).count();
    println!(
        "paths {:.1}s rejection {}/{}",
        t0.elapsed().as_secs_f64(),
        rejected,
        paths.len()
    );
    // dissect the first exploded path
    if let Some(p) = paths.iter().find(|p| p.exploded) {
        println!("explosion at day {}", p.states.len());
        let n = p.states.len();
        for (d, st) in p.states.iter().enumerate() {
            if d + 6 >= n || d < 3 {
                let mut v = vec![st.log_return];
                v.extend(inputs.code_map.transform_row(&st.code).unwrap());
                let scaled = inputs.scaler.transform_row(&v).unwrap();
                let strs: Vec<String> = scaled.iter().map(|v| format!("{v:+.2}")).collect();
                println!("  day {d}: r {:+.4} scaled [{}]", st.log_return, strs.join(","));
            }
        }
    }
}
