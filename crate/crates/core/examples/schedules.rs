//! Print the per-step annealing and warmup schedules for a run length.
//!
//! cargo run --example schedules -- [total_steps] [peak_lr] [rows]

use adavae::config::{ParamGroup, Stack};
use adavae::pe::apply_freeze;
use adavae::schedule::{beta_at_step, lr_at_step, stage_mask_at_step, TrainSchedule};
use adavae::{AdaVae, ModelConfig, TrainMode};

fn main() -> adavae::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let total: usize = args.first().map_or(1000, |s| s.parse().unwrap());
    let lr: f64 = args.get(1).map_or(1e-3, |s| s.parse().unwrap());
    let rows: usize = args.get(2).map_or(40, |s| s.parse().unwrap());

    let sched = TrainSchedule::new(total, lr, 0.0);
    let model = AdaVae::new(ModelConfig::tiny(12), 0)?;
    let mask = apply_freeze(&model.store, TrainMode::Pe);
    let dec_pe = ParamGroup::Pe(Stack::Decoder);

    println!("stage switch at step {}", sched.stage_switch_step());
    println!("{:>6} {:>6} {:>10} {:>8}  beta", "step", "beta", "lr", "dec_pe");
    for i in 0..rows {
        let t = i * total / rows;
        let beta = beta_at_step(t, &sched);
        let stage = stage_mask_at_step(t, &sched, &mask);
        let dec_on = stage
            .groups()
            .iter()
            .zip(stage.flags())
            .any(|(g, &f)| *g == dec_pe && f);
        let bar = "#".repeat((beta * 30.0).round() as usize);
        println!(
            "{t:>6} {beta:>6.3} {:>10.2e} {:>8}  {bar}",
            lr_at_step(t, &sched),
            if dec_on { "on" } else { "off" }
        );
    }
    Ok(())
}
