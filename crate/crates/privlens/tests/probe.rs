use std::time::Instant;

use privlens::synthdata::make_dataset;
use privlens::trainer::{run, TrainConfig};

#[test]
fn probe_full_run() {
    let dataset = make_dataset(512, 128, 7).unwrap();
    let cfg = TrainConfig::desk_default(7);
    let t1 = Instant::now();
    let outcome = run(&cfg, &dataset).unwrap();
    eprintln!("full run: {:?}", t1.elapsed());
    eprintln!(
        "bounds: A_C {:.4} A_A {:.4}",
        outcome.state.bounds.a_c, outcome.state.bounds.a_a
    );
    for t in outcome.state.telemetry.iter().step_by(5) {
        eprintln!(
            "epoch {:2}: L_O {:.4} L_C {:.4} L_A {:.4} ssim {:.4} A_C {:.4} A_A {:.4}",
            t.epoch, t.l_o, t.l_c, t.l_a, t.ssim, t.a_c, t.a_a
        );
    }
    let last = outcome.state.telemetry.last().unwrap();
    eprintln!(
        "final telemetry: ssim {:.4} A_C {:.4} A_A {:.4}",
        last.ssim, last.a_c, last.a_a
    );
    eprintln!(
        "report: ssim {:.4} A_C {:.4} attack best C-MAP {:.4} (chance {:.4}) per-adv {:?}",
        outcome.report.ssim_mean,
        outcome.report.a_c,
        outcome.attack.best_cmap,
        outcome.attack.chance_level(),
        outcome.attack.per_adversary_cmap
    );
    eprintln!("per-attr of best: {:?}", outcome.attack.best_per_attribute);
    eprintln!("|alpha| = {:.4}, alpha = {:?}", outcome.state.alpha.norm(), outcome.state.alpha.alpha());
}
