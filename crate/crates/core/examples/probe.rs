// scratch probe, not part of the repo
use mesr_core::noise::*;
use mesr_core::pipeline::*;
use mesr_core::register::*;
use mesr_core::rng::*;

fn main() {
    let mut sna_m = 0.0; let mut bd_m = 0.0; let mut naive_m = 0.0;
    let n = 8;
    for i in 0..n {
        let mut rng = substream(300, i);
        let hr = synthesize_hr(128, 128, &mut rng);
        let cfg = SimConfig { frames: 15, exposure_error_pct: 0.0, ..Default::default() };
        let sim = simulate_sequence(&hr, &cfg, &NoiseModel::default(), &mut rng).unwrap();
        let truth: Vec<FlowField> = sim.flows_lr.iter().map(|&(x, y)| FlowField::translation(x, y).unwrap()).collect();
        sna_m += psnr_aligned(&me_shift_and_add(&sim.sequence, &truth, 2, SplatKind::Bilinear).unwrap(), &hr, 4, 3400.0);
        bd_m += psnr_aligned(&bd_fuse(&sim.sequence, &truth, 2).unwrap(), &hr, 4, 3400.0);
        naive_m += psnr_aligned(&naive_shift_and_add(&sim.sequence, &truth, 2).unwrap(), &hr, 4, 3400.0);
    }
    println!("oracle flows: sna {:.2} | naive {:.2} | bd {:.2}", sna_m / n as f64, naive_m / n as f64, bd_m / n as f64);

    for (label, model) in [("noiseless", NoiseModel::noiseless()), ("noisy e=1", NoiseModel::default())] {
        let mut total = 0.0;
        let nreg = 50;
        for i in 0..nreg {
            let mut rng = substream(500 + i, 0);
            let hr = synthesize_hr(128, 128, &mut rng);
            let cfg = SimConfig { frames: 2, c_range: (0, 0), exposure_error_pct: 0.0, ..Default::default() };
            let sim = simulate_sequence(&hr, &cfg, &model, &mut rng).unwrap();
            let frames = sim.sequence.normalized();
            let f = estimate_translation(&frames[0], &frames[1]).unwrap();
            let (tx, ty) = sim.flows_lr[1];
            total += ((f.dx() - tx).powi(2) + (f.dy() - ty).powi(2)).sqrt();
        }
        println!("registration {label}: mean err {:.4} px", total / nreg as f64);
    }
}
