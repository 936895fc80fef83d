use dspsd::dataio::{generate_dataset, DatasetRecipe};
use dspsd::evalviz::cross_validate_dataset;
use dspsd::pipeline::{Ablation, TrainConfig};

#[test]
fn exp_cv_round4() {
    let dataset = generate_dataset(&DatasetRecipe::default_recipe(), 7).unwrap();
    println!("events={} accounts={}", dataset.events.len(), dataset.accounts.len());
    let base = TrainConfig { d_s: 8, d_o: 24, dropout: 0.25, epochs_stage2: 300, ..TrainConfig::synthetic() };
    for (name, config) in [
        ("full", base.clone()),
        ("struct", TrainConfig { ablation: Ablation::StructureOnly, ..base.clone() }),
        ("opcode", TrainConfig { ablation: Ablation::OpcodeOnly, ..base.clone() }),
        ("init", TrainConfig { epochs_stage1: 0, ..base.clone() }),
    ] {
        let t = std::time::Instant::now();
        let r = cross_validate_dataset(&dataset, &config, 10, 4).unwrap();
        let folds: Vec<String> = r.folds.iter().map(|f| match &f.outcome {
            Ok(p) => format!("{:.2}", p.f_score), Err(_) => "ERR".into() }).collect();
        println!("{name}: mean F={:.3} folds=[{}] [{:?}]", r.mean.f_score, folds.join(" "), t.elapsed());
    }
}
