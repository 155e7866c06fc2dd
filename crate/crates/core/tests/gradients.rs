//! Analytic gradients against central finite differences in f64.

use difpath::denoiser::{ConvDenoiser, ConvDenoiserConfig, TrainableDenoiser};
use difpath::latent::{Autoencoder, AutoencoderConfig, COMMITMENT_WEIGHT, CODEBOOK_WEIGHT};
use difpath::nn::ParamSet;
use difpath::numerics::{RngStream, Tensor};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
// denominator floor: the quotient at H carries ~1e-10 of rounding, so tiny
// entries are held to an absolute 1e-9 instead
const FLOOR: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn jitter(p: &mut ParamSet, std: f64, seed: u64) {
    let mut rng = RngStream::new(seed);
    for k in 0..p.count() {
        let v = p.flat_get(k) + std * rng.normal();
        p.flat_set(k, v);
    }
}

/// Central differences of `loss` over the flat indices `which`, compared
/// with `grad`. Returns the worst relative error and its parameter name.
fn check(
    params: &ParamSet,
    grad: &ParamSet,
    which: impl Iterator<Item = usize>,
    mut loss: impl FnMut(&ParamSet) -> f64,
) -> (f64, usize) {
    let mut worst = (0.0, 0);
    let mut p = params.clone();
    for k in which {
        let v = p.flat_get(k);
        p.flat_set(k, v + H);
        let up = loss(&p);
        p.flat_set(k, v - H);
        let down = loss(&p);
        p.flat_set(k, v);
        let numeric = (up - down) / (2.0 * H);
        let e = rel_err(grad.flat_get(k), numeric);
        if e > worst.0 {
            worst = (e, k);
        }
    }
    worst
}

fn param_name(p: &ParamSet, mut k: usize) -> String {
    for (name, t) in p.iter() {
        if k < t.len() {
            return format!("{name}[{k}]");
        }
        k -= t.len();
    }
    unreachable!()
}

fn small_denoiser() -> ConvDenoiser<f64> {
    let cfg = ConvDenoiserConfig {
        channels: 3,
        num_classes: 2,
        width: 4,
        depth: 4,
        time_dim: 8,
        emb_dim: 4,
    };
    let mut net = ConvDenoiser::new(cfg, &mut RngStream::new(1)).unwrap();
    // the last stage starts at zero, which would hide every upstream gradient
    jitter(net.params_mut(), 0.2, 2);
    net
}

#[test]
fn conv_denoiser_every_weight() {
    let net = small_denoiser();
    assert!(net.params().count() <= 5000, "{} params", net.params().count());
    let mut rng = RngStream::new(3);
    let x: Tensor = rng.gaussian(&[3, 8, 8]);
    let target: Tensor = rng.gaussian(&[3, 8, 8]);
    for (t, class) in [(7usize, Some(1usize)), (640, None)] {
        let (_, grad) = net.item_mse_grad(&x, t, class, &target).unwrap();
        let (worst, k) = check(net.params(), &grad, 0..net.params().count(), |p| {
            let probe = ConvDenoiser::from_params(*net.config(), p.clone()).unwrap();
            probe.item_mse_grad(&x, t, class, &target).unwrap().0
        });
        assert!(
            worst < REL_TOL,
            "t={t} class={class:?}: {} rel err {worst:e}",
            param_name(net.params(), k)
        );
    }
}

#[test]
fn embedding_rows_only_move_for_their_class() {
    let net = small_denoiser();
    let mut rng = RngStream::new(4);
    let x: Tensor = rng.gaussian(&[3, 8, 8]);
    let target: Tensor = rng.gaussian(&[3, 8, 8]);
    let (_, grad) = net.item_mse_grad(&x, 100, Some(0), &target).unwrap();
    let emb = grad.get(grad.index_of("class.emb").unwrap());
    assert!(emb.row(0).iter().any(|&g| g != 0.0));
    assert!(emb.row(1).iter().all(|&g| g == 0.0));
    assert!(emb.row(2).iter().all(|&g| g == 0.0), "NULL row untouched by a labelled item");
}

fn small_ae(codebook: Option<usize>) -> Autoencoder<f64> {
    let cfg = AutoencoderConfig {
        channels: 3,
        latent_channels: 2,
        width: 4,
        codebook_size: codebook,
    };
    let mut ae = Autoencoder::new(cfg, &mut RngStream::new(5)).unwrap();
    jitter(ae.params_mut(), 0.05, 6);
    ae
}

fn image(seed: u64) -> Tensor {
    RngStream::new(seed).gaussian::<f64>(&[3, 8, 8]).map(|v| (0.5 * v).tanh())
}

#[test]
fn autoencoder_every_weight() {
    let ae = small_ae(None);
    assert!(ae.params().count() <= 5000, "{} params", ae.params().count());
    let x = image(7);
    let (_, grad, _) = ae.item_loss_grad(&x).unwrap();
    let (worst, k) = check(ae.params(), &grad, 0..ae.params().count(), |p| {
        let probe = Autoencoder::from_params(*ae.config(), p, 1.0).unwrap();
        probe.item_loss_grad(&x).unwrap().0
    });
    assert!(worst < REL_TOL, "{} rel err {worst:e}", param_name(ae.params(), k));
}

fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

#[test]
fn vq_straight_through() {
    let ae = small_ae(Some(6));
    let x = image(8);
    let batch = Tensor::stack(std::slice::from_ref(&x)).unwrap();
    let (_, grad, indices) = ae.item_loss_grad(&x).unwrap();
    let ze0 = ae.encode_continuous(&batch).unwrap();
    let plane = indices.len();
    let (zq0, _) = ae.quantize_item(ze0.data(), plane);
    let shift: Vec<f64> = zq0.iter().zip(ze0.data()).map(|(q, z)| q - z).collect();
    let cb_index = ae.params().index_of("vq.codebook").unwrap();
    let first_dec = ae.params().index_of("dec0.w").unwrap();
    let offsets: Vec<usize> = {
        let mut acc = 0;
        ae.params()
            .iter()
            .map(|(_, t)| {
                let o = acc;
                acc += t.len();
                o
            })
            .collect()
    };
    let enc_end = offsets[first_dec];
    let (cb_start, cb_end) = (offsets[cb_index], offsets[cb_index] + ae.params().get(cb_index).len());

    // decoder: quantisation does not depend on it, so the true loss is smooth
    let (worst, k) = check(ae.params(), &grad, enc_end..cb_start, |p| {
        Autoencoder::from_params(*ae.config(), p, 1.0).unwrap().item_loss_grad(&x).unwrap().0
    });
    assert!(worst < REL_TOL, "{} rel err {worst:e}", param_name(ae.params(), k));

    // encoder: the decoder sees z_e plus a frozen offset to the chosen codes,
    // so d/dz_e of the reconstruction equals d/dz_q
    let (worst, k) = check(ae.params(), &grad, 0..enc_end, |p| {
        let probe = Autoencoder::from_params(*ae.config(), p, 1.0).unwrap();
        let ze = probe.encode_continuous(&batch).unwrap();
        let fed: Vec<f64> = ze.data().iter().zip(&shift).map(|(z, s)| z + s).collect();
        let fed = Tensor::new(ze.shape().to_vec(), fed).unwrap();
        let out = probe.decode(&fed).unwrap();
        mean_sq(out.data(), x.data()) + COMMITMENT_WEIGHT * mean_sq(ze.data(), &zq0)
    });
    assert!(worst < REL_TOL, "{} rel err {worst:e}", param_name(ae.params(), k));

    // codebook: only the codebook term, with the encoder output frozen
    let (worst, k) = check(ae.params(), &grad, cb_start..cb_end, |p| {
        let cb = p.get(cb_index);
        let lat = cb.cols();
        let e: Vec<f64> = (0..lat * plane)
            .map(|j| cb.at(indices[j % plane], j / plane))
            .collect();
        CODEBOOK_WEIGHT * mean_sq(ze0.data(), &e)
    });
    assert!(worst < REL_TOL, "{} rel err {worst:e}", param_name(ae.params(), k));
}
