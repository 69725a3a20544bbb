use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rotary_core::cost::{CostParameters, MemoryModel};
use rotary_core::workload::{gen_phased, gen_zipf, parse_phases};
use rotary_core::{
    belady_misses, lru_reference, run, ModelLayout, PolicyKind, RotaryParams, ScenarioConfig,
    SlotGroup, SubModule, SubModuleId, Trace,
};

fn config(experts: u32, slots: usize, policy: PolicyKind) -> ScenarioConfig {
    let mut sms: Vec<_> = (0..experts)
        .map(|i| SubModule::expert(i, 50_000_000, i / 8, i % 8))
        .collect();
    sms.push(SubModule::shared(experts, 200_000_000, 0));
    ScenarioConfig {
        layout: ModelLayout::new(sms, [SubModuleId(experts)]).unwrap(),
        context_length: 2048,
        host_pinned_layers: 0,
        policy,
        slot_count: slots,
        per_slot_limit: 50_000_000,
        cost: CostParameters {
            h2d_bandwidth: 25e9,
            per_transfer_latency: 1e-5,
            compute_per_token: 0.02,
            overlap_factor: 0.5,
        },
        memory: MemoryModel {
            device_budget: 64_000_000_000,
            host_budget: 64_000_000_000,
            fixed_overhead: 500_000_000,
            kv_bytes_per_token: 65_536,
            host_transient_factor: 1.0,
        },
        seed: 1,
    }
}

fn policies() -> [PolicyKind; 5] {
    [
        PolicyKind::Lru,
        PolicyKind::Fifo,
        PolicyKind::Random { seed: 1 },
        PolicyKind::Belady,
        PolicyKind::Rotary(RotaryParams::default()),
    ]
}

fn bench_engine(c: &mut Criterion) {
    let zipf = gen_zipf(2_000, 128, 8, 1.1, 7).unwrap();
    let phased = gen_phased(&parse_phases("0-15;16-31;32-47").unwrap(), 64, 8, 0).unwrap();
    for (name, trace) in [("zipf", &zipf), ("phased", &phased)] {
        let mut group = c.benchmark_group(format!("engine/{name}"));
        group.throughput(Throughput::Elements(trace.len() as u64));
        for p in policies() {
            let cfg = config(128, 32, p);
            group.bench_with_input(BenchmarkId::from_parameter(p.name()), trace, |b, t| {
                b.iter(|| run(black_box(&cfg), black_box(t)).unwrap())
            });
        }
        group.finish();
    }
}

fn bench_references(c: &mut Criterion) {
    let trace: Trace = gen_zipf(5_000, 64, 1, 1.0, 3).unwrap();
    let mut group = c.benchmark_group("reference");
    for cap in [8usize, 32] {
        group.bench_with_input(BenchmarkId::new("lru", cap), &cap, |b, &cap| {
            b.iter(|| lru_reference(black_box(&trace), cap).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("belady", cap), &cap, |b, &cap| {
            b.iter(|| belady_misses(black_box(&trace), cap).unwrap())
        });
    }
    group.finish();
}

fn bench_rotation(c: &mut Criterion) {
    c.bench_function("slot_group/rotate_forward_reverse", |b| {
        let mut g = SlotGroup::new(64, 1).unwrap();
        b.iter(|| {
            for k in 1..32 {
                g.rotate_forward(black_box(k));
                g.rotate_reverse(black_box(k));
            }
        })
    });
}

criterion_group!(benches, bench_engine, bench_references, bench_rotation);
criterion_main!(benches);
