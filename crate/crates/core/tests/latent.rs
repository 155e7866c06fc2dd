use difpath::data::{extract_patches, generate_slide_with, Preset, DEFAULT_MPP};
use difpath::denoiser::{ConvDenoiser, ConvDenoiserConfig, TrainConfig, TrainableDenoiser};
use difpath::latent::*;
use difpath::nn::{AdamConfig, AdamState};
use difpath::numerics::{RngStream, Tensor};
use difpath::samplers::{sample, SamplerConfig};
use difpath::schedule::NoiseSchedule;
use difpath::Error;

// Reconstruction quality floor after the short training run below.
const MIN_PSNR_DB: f64 = 20.0;
const CONSTANT_LOSS: f64 = 1e-3;

fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    // peak-to-peak range of [-1, 1] images is 2
    let mse = a.sub(b).norm_sq() / a.len() as f64;
    10.0 * (4.0 / mse).log10()
}

fn toy_patches(n_slides: usize) -> Vec<Tensor> {
    let spec = Preset::Toy224.spec();
    let mut out = Vec::new();
    for j in 0..n_slides {
        let slide = generate_slide_with(j % 5, 40 + j as u64, 768, DEFAULT_MPP).unwrap();
        out.extend(extract_patches::<f64>(&slide, &spec, 128, spec.patch_size_px()).unwrap().patches);
    }
    out
}

#[test]
fn shapes_follow_the_downsample_factor() {
    let ae = Autoencoder::<f64>::new(AutoencoderConfig::new(3), &mut RngStream::new(1)).unwrap();
    for (h, w) in [(16, 16), (32, 24), (8, 40)] {
        let x: Tensor = RngStream::new(2).gaussian(&[2, 3, h, w]);
        let z = ae.encode(&x).unwrap();
        assert_eq!(z.shape(), &[2, 4, h / 4, w / 4]);
        let y = ae.decode(&z).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
    let odd: Tensor = Tensor::zeros(&[1, 3, 18, 16]);
    assert!(matches!(ae.encode(&odd), Err(Error::Size(_))));
    assert!(matches!(ae.decode(&Tensor::zeros(&[1, 3, 4, 4])), Err(Error::Contract(_))));
    assert_eq!(latent_extents(&[128, 128]).unwrap(), vec![32, 32]);
}

#[test]
fn two_entry_codebook_quantises_to_its_entries() {
    let mut cfg = AutoencoderConfig::new(3);
    cfg.codebook_size = Some(2);
    let mut ae = Autoencoder::<f64>::new(cfg, &mut RngStream::new(3)).unwrap();
    let cb = ae.params().index_of("vq.codebook").unwrap();
    let lat = cfg.latent_channels;
    let mut book = vec![1.0; lat];
    book.extend(vec![-1.0; lat]);
    *ae.params_mut().get_mut(cb) = Tensor::new(vec![2, lat], book).unwrap();
    let x: Tensor = RngStream::new(4).gaussian(&[3, 3, 16, 16]);
    let z = ae.encode(&x).unwrap();
    let scale = ae.latent_scale();
    let plane = 16;
    for i in 0..3 {
        let item = z.item(i);
        for p in 0..plane {
            let first = item[p] / scale;
            assert!(first == 1.0 || first == -1.0);
            for c in 0..lat {
                assert_eq!(item[c * plane + p] / scale, first);
            }
        }
    }
    // the oracle: nearest of ±1 is the sign of the channel sum
    let raw = ae.encode_continuous(&x).unwrap();
    for i in 0..3 {
        for p in 0..plane {
            let s: f64 = (0..lat).map(|c| raw.item(i)[c * plane + p]).sum();
            assert_eq!(z.item(i)[p] / scale, if s >= 0.0 { 1.0 } else { -1.0 });
        }
    }
}

#[test]
fn zero_learning_rate_leaves_weights() {
    let mut ae = Autoencoder::<f64>::new(AutoencoderConfig::new(3), &mut RngStream::new(5)).unwrap();
    let before = ae.params().clone();
    let data = toy_patches(1);
    let mut opt = AdamState::new(ae.params(), AdamConfig { lr: 0.0, ..AdamConfig::default() });
    let cfg = AeTrainConfig {
        epochs: 1,
        batch_size: 4,
        max_steps: Some(5),
    };
    train_ae(&mut ae, &data, &mut opt, &cfg, &mut RngStream::new(6)).unwrap();
    assert_eq!(ae.params(), &before);
}

#[test]
fn usage_counts_sum_to_quantised_vectors() {
    let mut cfg = AutoencoderConfig::new(3);
    cfg.codebook_size = Some(8);
    let mut ae = Autoencoder::<f64>::new(cfg, &mut RngStream::new(7)).unwrap();
    let data: Vec<Tensor> = (0..10).map(|i| RngStream::new(i).gaussian::<f64>(&[3, 16, 16]).map(|v| v.tanh())).collect();
    let mut opt = AdamState::new(ae.params(), AdamConfig::default());
    let tc = AeTrainConfig {
        epochs: 2,
        batch_size: 3,
        max_steps: None,
    };
    train_ae(&mut ae, &data, &mut opt, &tc, &mut RngStream::new(8)).unwrap();
    // 2 epochs × 10 images × (4 × 4) latent vectors
    assert_eq!(ae.usage.total(), 2 * 10 * 16);
    assert_eq!(ae.usage.counts.len(), 8);
}

#[test]
fn constant_images_are_reconstructed() {
    let mut cfg = AutoencoderConfig::new(1);
    cfg.width = 8;
    let mut ae = Autoencoder::<f64>::new(cfg, &mut RngStream::new(9)).unwrap();
    let data: Vec<Tensor> = (0..16)
        .map(|i| Tensor::full(&[1, 8, 8], -0.8 + 0.1 * i as f64))
        .collect();
    let mut opt = AdamState::new(ae.params(), AdamConfig { lr: 3e-3, ..AdamConfig::default() });
    let tc = AeTrainConfig {
        epochs: 400,
        batch_size: 16,
        max_steps: None,
    };
    let rep = train_ae(&mut ae, &data, &mut opt, &tc, &mut RngStream::new(10)).unwrap();
    let last = *rep.epoch_losses.last().unwrap();
    assert!(last < CONSTANT_LOSS, "final loss {last}");
}

#[test]
fn trained_autoencoder_psnr() {
    let data = toy_patches(5);
    assert!(data.len() >= 100, "{} patches", data.len());
    let mut ae = Autoencoder::<f64>::new(AutoencoderConfig::new(3), &mut RngStream::new(11)).unwrap();
    let mut opt = AdamState::new(ae.params(), AdamConfig { lr: 2e-3, ..AdamConfig::default() });
    let tc = AeTrainConfig {
        epochs: 100,
        batch_size: 16,
        max_steps: Some(300),
    };
    let rep = train_ae(&mut ae, &data, &mut opt, &tc, &mut RngStream::new(12)).unwrap();
    assert!(rep.epoch_losses.last() < rep.epoch_losses.first());
    let x = Tensor::stack(&data).unwrap();
    let y = ae.reconstruct(&x).unwrap();
    let db = psnr(&y, &x);
    assert!(db > MIN_PSNR_DB, "PSNR {db:.2} dB");
}

#[test]
fn pixel_and_latent_paths_share_step_traces() {
    let s = NoiseSchedule::<f64>::linear(200, 1e-4, 0.02).unwrap();
    let ae = Autoencoder::<f64>::new(AutoencoderConfig::new(3), &mut RngStream::new(13)).unwrap();
    let mut pix_cfg = ConvDenoiserConfig::new(3, 2);
    pix_cfg.width = 4;
    let mut lat_cfg = ConvDenoiserConfig::new(4, 2);
    lat_cfg.width = 4;
    let pixel = ConvDenoiser::<f64>::new(pix_cfg, &mut RngStream::new(14)).unwrap();
    let latent = ConvDenoiser::<f64>::new(lat_cfg, &mut RngStream::new(15)).unwrap();
    for cfg in [
        SamplerConfig::ddim(20, 0.0),
        SamplerConfig::ddim(13, 1.0).with_guidance(2.0),
        SamplerConfig::ddpm(),
        SamplerConfig::eps_scale(1.01),
    ] {
        let cfg = cfg.with_size(&[32, 32]);
        let p = sample(&pixel, &s, &cfg, Some(1), 1, &mut RngStream::new(1)).unwrap();
        let l = ldm_sample(&ae, &latent, &s, &cfg, Some(1), 1, &mut RngStream::new(1)).unwrap();
        assert_eq!(p.stats.trace, l.stats.trace);
        assert_eq!(p.stats.denoiser_calls, l.stats.denoiser_calls);
        assert_eq!(l.samples.shape(), &[1, 3, 32, 32]);
    }
    let ddim = SamplerConfig::ddim(20, 0.0).with_size(&[32, 32]);
    let l = ldm_sample(&ae, &latent, &s, &ddim, Some(0), 2, &mut RngStream::new(2)).unwrap();
    assert_eq!(l.stats.denoiser_calls, 20);
    let g = ldm_sample(&ae, &latent, &s, &ddim.with_guidance(1.0), Some(0), 2, &mut RngStream::new(2)).unwrap();
    assert_eq!(g.stats.denoiser_calls, 40);
}

#[test]
fn latent_denoiser_trains_on_encoded_data() {
    let s = NoiseSchedule::<f64>::linear(100, 1e-4, 0.05).unwrap();
    let mut ae = Autoencoder::<f64>::new(AutoencoderConfig::new(3), &mut RngStream::new(16)).unwrap();
    let data: Vec<(Tensor, usize)> = toy_patches(2).into_iter().map(|p| (p, 0)).take(32).collect();
    let imgs: Vec<Tensor> = data.iter().map(|(x, _)| x.clone()).collect();
    let scale = ae.calibrate_scale(&imgs).unwrap();
    assert!(scale > 0.0);
    let z = encode_dataset(&ae, &data).unwrap();
    let all: Vec<f64> = z.iter().flat_map(|(t, _)| t.data().to_vec()).collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
    assert!((var.sqrt() - 1.0).abs() < 1e-6, "latent std {}", var.sqrt());

    let mut cfg = ConvDenoiserConfig::new(4, 1);
    cfg.width = 8;
    let mut net = ConvDenoiser::<f64>::new(cfg, &mut RngStream::new(17)).unwrap();
    let mut opt = AdamState::new(net.params(), AdamConfig::default());
    let tc = TrainConfig {
        epochs: 30,
        batch_size: 8,
        p_uncond: 0.1,
        max_steps: None,
    };
    let rep = train_latent_denoiser(&ae, &mut net, &data, &s, &mut opt, &tc, &mut RngStream::new(18)).unwrap();
    assert!(rep.epoch_losses.last() < rep.epoch_losses.first());
    assert!(net.params().is_finite());
}
