use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rastermend_core::autodiff::{Graph, Tensor};
use rastermend_core::losses::{loss_value, LossKind};
use rastermend_core::metrics::{ms_ssim, ssim, SsimParams};
use rastermend_core::pipeline::{extract_patches, resize_raster, synthetic_clean_raster};
use rastermend_core::unet::{build_unet, UNetConfig};

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

fn bench_conv(c: &mut Criterion) {
    let input = random_tensor(&[1, 8, 64, 64], 1);
    let weights = random_tensor(&[8, 8, 3, 3], 2);
    let bias = random_tensor(&[8], 3);
    c.bench_function("conv2d_forward_8x64x64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.leaf(input.clone(), false);
            let w = g.leaf(weights.clone(), false);
            let bv = g.leaf(bias.clone(), false);
            g.conv2d(x, w, bv).unwrap()
        })
    });
    c.bench_function("conv2d_train_step_8x64x64", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.leaf(input.clone(), false);
            let w = g.leaf(weights.clone(), true);
            let bv = g.leaf(bias.clone(), true);
            let y = g.conv2d(x, w, bv).unwrap();
            let loss = g.mean(y).unwrap();
            g.backward(loss).unwrap();
            g.grad(w).unwrap()
        })
    });
}

fn bench_unet(c: &mut Criterion) {
    let model = build_unet(&UNetConfig::tiny()).unwrap();
    let batch = random_tensor(&[1, 5, 128, 128], 4);
    c.bench_function("unet_tiny_infer_128", |b| {
        b.iter(|| model.infer(&batch).unwrap())
    });
    let target = random_tensor(&[1, 5, 128, 128], 5);
    c.bench_function("unet_tiny_train_step_128", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let iv = g.leaf(batch.clone(), false);
            let tv = g.leaf(target.clone(), false);
            let (pred, pvars) = model.forward(&mut g, iv, true).unwrap();
            let loss = loss_value(&mut g, LossKind::Bce, pred, tv).unwrap();
            g.backward(loss).unwrap();
            g.grad(pvars[0]).unwrap()
        })
    });
}

fn bench_metrics(c: &mut Criterion) {
    let params = SsimParams::default();
    let a = random_tensor(&[5, 128, 128], 6);
    let b2 = random_tensor(&[5, 128, 128], 7);
    c.bench_function("ssim_5x128x128", |b| {
        b.iter(|| ssim(&a, &b2, &params).unwrap())
    });
    c.bench_function("ms_ssim_5x128x128", |b| {
        b.iter(|| ms_ssim(&a, &b2, &params).unwrap())
    });
}

fn bench_patches(c: &mut Criterion) {
    let raster = synthetic_clean_raster(800, 800, 5, 8).unwrap();
    c.bench_function("extract_patches_800_stride100", |b| {
        b.iter(|| extract_patches(&raster, 200, 100).unwrap())
    });
    let patch = raster.window(0, 0, 200, 200).unwrap();
    c.bench_function("resize_200_to_128", |b| {
        b.iter(|| resize_raster(&patch, 128, 128).unwrap())
    });
}

criterion_group!(benches, bench_conv, bench_unet, bench_metrics, bench_patches);
criterion_main!(benches);
