//! Compare replay methods across seeds on one synthetic benchmark and print
//! a mean +/- CI table, mirroring the experiment runner's aggregate output.

use hpcr::config::{ModelConfig, StreamConfig};
use hpcr::experiment::mean_ci95;
use hpcr::losses::TemperatureSchedule;
use hpcr::stream::make_task_stream;
use hpcr::trainer::{run, Method, MethodSpec, RunOptions};
use hpcr::HyperParams;

fn main() -> hpcr::Result<()> {
    let stream_cfg = StreamConfig {
        num_tasks: 5,
        classes_per_task: 2,
        samples_per_class: 500,
        feature_dim: 32,
        mean_scale: 1.0,
        noise_sigma: 1.0,
        batch_size: 10,
        seed: 0,
    };
    let model_cfg = ModelConfig::default();
    let methods = [
        Method::Finetune,
        Method::Er,
        Method::Scr,
        Method::Pcr,
        Method::Hpcr,
    ];
    let seeds: Vec<u64> = (1..=10).collect();

    println!("{:<12} {:>16} {:>16} {:>16}", "method", "A_T", "AAA", "F_T");
    for method in methods {
        let mut a_t = Vec::new();
        let mut aaa = Vec::new();
        let mut f_t = Vec::new();
        for &seed in &seeds {
            let mut stream = make_task_stream(&StreamConfig {
                seed,
                ..stream_cfg.clone()
            })?;
            let hyper = HyperParams {
                buffer_capacity: 200,
                alpha: 0.001,
                beta: 0.05,
                ..HyperParams::default()
            };
            let schedule = TemperatureSchedule::new(0.16, 0.05, 500, model_cfg.tau)?;
            let spec = MethodSpec::new(method, hyper, schedule);
            let out = run(&mut stream, &model_cfg, &spec, seed, RunOptions::default())?;
            a_t.push(out.result.final_accuracy);
            aaa.push(out.result.anytime_accuracy);
            if let Some(f) = out.result.forgetting {
                f_t.push(f);
            }
        }
        let (am, ac) = mean_ci95(&a_t);
        let (gm, gc) = mean_ci95(&aaa);
        let (fm, fc) = mean_ci95(&f_t);
        println!(
            "{:<12} {:>7.3} +/-{:>5.3} {:>7.3} +/-{:>5.3} {:>7.3} +/-{:>5.3}",
            method.name(),
            am,
            ac,
            gm,
            gc,
            fm,
            fc
        );
    }
    Ok(())
}
