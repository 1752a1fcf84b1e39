//! Trainable-parameter accounting for the desk and paper-shaped configs.
//!
//! cargo run --example params_report -- [desk|paper] [fb|pe|ft]

use adavae::pe::ParamsReport;
use adavae::{ModelConfig, TrainMode};

fn main() -> adavae::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let config = match args.first().map(String::as_str) {
        Some("paper") => ModelConfig::paper_shaped(),
        _ => ModelConfig::desk(1024),
    };
    let mode: TrainMode = args.get(1).map_or(Ok(TrainMode::Pe), |m| m.parse())?;
    println!("{}", ParamsReport::for_config(&config, mode));
    Ok(())
}
