use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use qosearch_bench::{preset_world, skewed_kb, FLOW};
use qosearch_core::actions::ActionKind;
use qosearch_core::harness::{preset, run, Mode, RunOptions};
use qosearch_core::knowledge::ScenarioCase;
use qosearch_core::metrics::estimate_mos;

fn simulation(c: &mut Criterion) {
    c.bench_function("advance table1-s1 60 s", |b| {
        b.iter(|| {
            let mut w = preset_world("table1-s1", 1);
            w.advance(60_000.0);
            black_box(w.measure(FLOW).unwrap())
        })
    });
}

fn runs(c: &mut Criterion) {
    let mut g = c.benchmark_group("run");
    g.sample_size(10);
    for name in ["table7-singlecall", "multicall"] {
        let s = preset(name).unwrap();
        g.bench_function(name, |b| b.iter(|| black_box(run(&s, RunOptions::new(1, Mode::Control)).unwrap())));
    }
    g.finish();
}

fn knowledge(c: &mut Criterion) {
    let kb = skewed_kb();
    c.bench_function("refine 4 actions", |b| {
        b.iter(|| {
            let mut k = kb.clone();
            black_box(k.refine(ScenarioCase::Case2, ActionKind::ControlledLoad).unwrap())
        })
    });
    c.bench_function("selection order", |b| b.iter(|| black_box(kb.selection_order(ScenarioCase::Case2))));
    c.bench_function("estimate_mos", |b| b.iter(|| estimate_mos(black_box(150.0), black_box(0.02)).unwrap()));
}

criterion_group!(benches, simulation, runs, knowledge);
criterion_main!(benches);
