use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use squeeze::autodiff::kernels::{conv2d, matmul, ConvGeometry};
use squeeze::graph::{run_graph, Mode};
use squeeze::parallel::{set_execution_mode, ExecutionMode};
use squeeze::quantization::layer_average_traces;
use squeeze::train::{bar_patterns, Preset};
use squeeze::Tensor;

const MODES: [(&str, ExecutionMode); 2] = [
    ("sequential", ExecutionMode::Sequential),
    ("parallel", ExecutionMode::Parallel),
];

fn filled(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect()
}

fn bench_conv(c: &mut Criterion) {
    let g = ConvGeometry {
        batch: 32,
        in_channels: 16,
        in_h: 16,
        in_w: 16,
        out_channels: 32,
        kernel_h: 3,
        kernel_w: 3,
        stride: 1,
        padding: 1,
    };
    let x = filled(g.batch * g.in_channels * g.in_h * g.in_w);
    let w = filled(g.out_channels * g.in_channels * 9);
    let mut group = c.benchmark_group("conv2d_32x16x16x16_to_32");
    for (name, mode) in MODES {
        set_execution_mode(mode);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| conv2d(black_box(&x), black_box(&w), &g))
        });
    }
    group.finish();
}

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 256] {
        let (a, b_) = (filled(n * n), filled(n * n));
        for (name, mode) in MODES {
            set_execution_mode(mode);
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, &n| {
                b.iter(|| matmul(black_box(&a), black_box(&b_), n, n, n))
            });
        }
    }
    group.finish();
}

fn bench_hutchinson(c: &mut Criterion) {
    let data = bar_patterns(64, 0).unwrap();
    let graph = Preset::CnnSmall.build(data.sample_shape(), data.classes, 1).unwrap();
    let layers: Vec<String> = ["conv1", "conv2", "conv3", "fc"].map(String::from).to_vec();
    let mut group = c.benchmark_group("hutchinson_cnn_small_4_layers_8_probes");
    group.sample_size(10);
    for (name, mode) in MODES {
        set_execution_mode(mode);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| layer_average_traces(&graph, &data.inputs, &data.labels, &layers, 8, 0).unwrap())
        });
    }
    group.finish();
}

fn bench_eval(c: &mut Criterion) {
    let data = bar_patterns(256, 0).unwrap();
    let graph = Preset::CnnResidual.build(data.sample_shape(), data.classes, 1).unwrap();
    let x: Tensor = data.inputs.clone();
    let mut group = c.benchmark_group("eval_cnn_residual_batch_256");
    group.sample_size(20);
    for (name, mode) in MODES {
        set_execution_mode(mode);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_graph(&graph, black_box(&x), Mode::Eval).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_matmul, bench_hutchinson, bench_eval);
criterion_main!(benches);
