use lccm::config::{build_layout, ColumnUniverse, InitStrategy, LayoutKind, seed_parameters};
use lccm::data::index_dataset;
use lccm::estimation::{em_fit, EmControls, SubModel};
use std::time::Instant;

fn main() {
    // Inline copy of the two-class fixture at reduced size.
    let text = std::fs::read_to_string("/tmp/bench_truth.toml").unwrap();
    let truth = lccm::synth::parse_truth_spec(&text).unwrap();
    let t0 = Instant::now();
    let (ds, _) = lccm::synth::simulate_population(&truth).unwrap();
    println!("simulate: {:?} ({} persons, {} tours)", t0.elapsed(), ds.n_persons(), ds.n_tours());
    let idx = index_dataset(&ds).unwrap();
    let universe = ColumnUniverse::from_dataset(&ds);
    let layout = build_layout(&truth.model, &universe, LayoutKind::ModeSubModel).unwrap();
    let controls = EmControls { starts: 1, seed: 11, ..Default::default() };
    let init = seed_parameters(&layout, InitStrategy::Random { scale: 0.5 }, 42);
    let t1 = Instant::now();
    let fit = em_fit(SubModel::ModeLccm, &idx, &truth.model, &init, &controls).unwrap();
    println!(
        "em_fit: {:?}, iterations {}, ll {:.3}, converged {}",
        t1.elapsed(),
        fit.trace.len() - 1,
        fit.loglik,
        fit.converged
    );
}
