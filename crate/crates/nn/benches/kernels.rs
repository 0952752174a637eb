//! Convolution, U-Net and loss kernels on the rayon pool versus a single
//! worker. With `--no-default-features` the same benches run the sequential
//! build, so the two can also be compared through criterion baselines:
//!
//! ```text
//! cargo bench -p cascade-nn --bench kernels -- --save-baseline par
//! cargo bench -p cascade-nn --bench kernels --no-default-features -- --baseline par
//! ```

use std::hint::black_box;

use cascade_nn::loss::{self, ClassWeights};
use cascade_nn::ops::conv;
use cascade_nn::{Tensor, UNet, UNetConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, batch: usize, c: usize, dims: [usize; 3]) -> Tensor<f32> {
    let n = batch * c * dims.iter().product::<usize>();
    Tensor::from_vec(batch, c, dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Runs `f` under every schedule available in this build.
fn schedules(mut f: impl FnMut(&str, &dyn Fn(&mut (dyn FnMut() + Send)))) {
    #[cfg(feature = "parallel")]
    {
        f("parallel", &|body| body());
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        f("one-thread", &|body| single.install(body));
    }
    #[cfg(not(feature = "parallel"))]
    f("sequential", &|body| body());
}

fn conv_kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = [32, 32, 16];
    let x = random(&mut rng, 2, 16, dims);
    let w: Vec<f32> = (0..16 * 16 * 27).map(|_| rng.random_range(-0.1..0.1)).collect();
    let g = random(&mut rng, 2, 16, dims);
    let mut group = c.benchmark_group("conv3d 16->16 on 2x32x32x16");
    group.sample_size(10);
    schedules(|name, run| {
        group.bench_function(BenchmarkId::new("forward", name), |b| {
            b.iter(|| run(&mut || drop(black_box(conv::forward(&x, &w, None, 16).unwrap()))))
        });
        group.bench_function(BenchmarkId::new("backward", name), |b| {
            b.iter(|| {
                run(&mut || {
                    black_box(conv::backward_data(&g, &w, 16).unwrap());
                    black_box(conv::backward_params(&x, &g).unwrap());
                })
            })
        });
    });
    group.finish();
}

fn unet_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = UNet::new(UNetConfig {
        levels: 3,
        ..UNetConfig::refine()
    })
    .unwrap();
    let params = net.init_params::<f32, _>(&mut rng);
    let dims = [32, 32, 16];
    let x = random(&mut rng, 2, 2, dims);
    let labels: Vec<f32> = (0..2 * 32 * 32 * 16).map(|i| ((i / 97) % 2) as f32).collect();
    let target = Tensor::from_vec(2, 1, dims, labels).unwrap();
    let mut group = c.benchmark_group("refine U-Net, batch 2 of 32x32x16");
    group.sample_size(10);
    schedules(|name, run| {
        group.bench_function(BenchmarkId::new("train step", name), |b| {
            b.iter(|| {
                run(&mut || {
                    let mut p = params.clone();
                    let (y, trace) = net.forward_train(&mut p, &x).unwrap();
                    let (_, gl) =
                        loss::binary_dice_grad(&loss::softmax_channels(&y), &target, loss::DEFAULT_EPS).unwrap();
                    black_box(net.backward(&p, &trace, &gl).unwrap());
                })
            })
        });
        group.bench_function(BenchmarkId::new("eval forward", name), |b| {
            b.iter(|| run(&mut || drop(black_box(net.forward_eval(&params, &x).unwrap()))))
        });
    });
    group.finish();
}

fn msdl(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = [48, 48, 24];
    let z = random(&mut rng, 1, 14, dims);
    let labels: Vec<u8> = (0..48 * 48 * 24).map(|_| rng.random_range(0..14)).collect();
    let t = loss::onehot::<f32>(&labels, dims, 14).unwrap();
    let w = ClassWeights::uniform(14);
    let mut group = c.benchmark_group("msdl 14 classes on 48x48x24");
    schedules(|name, run| {
        group.bench_function(BenchmarkId::new("softmax+loss+grad", name), |b| {
            b.iter(|| {
                run(&mut || {
                    drop(black_box(
                        loss::msdl_grad(&loss::softmax_channels(&z), &t, &w, loss::DEFAULT_EPS).unwrap(),
                    ))
                })
            })
        });
    });
    group.finish();
}

criterion_group!(benches, conv_kernels, unet_step, msdl);
criterion_main!(benches);
