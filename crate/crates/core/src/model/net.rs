use super::ops::{
    conv3x3_s2, conv3x3_s2_backward, pointwise, pointwise_backward, relu_backward_inplace, relu_inplace, sigmoid,
    Upsampler,
};
use super::params::{Head, Params};
use super::{AUX_CHANNELS, RGB_CHANNELS};
use crate::dataio::{FrameBundle, Modality, ModalitySet};
use crate::raster::{LabelMap, IGNORE};
use crate::tensor::Feature;
use crate::{Error, Result};

/// Logits of one forward pass, each `[K, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    /// Joint head on fused features.
    pub joint: Feature,
    /// RGB-only head; absent for single-head models.
    pub rgb: Option<Feature>,
    /// Auxiliary-only head; absent for single-head models.
    pub aux: Option<Feature>,
}

/// Activations retained for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    pub mask: ModalitySet,
    rgb_in: Feature,
    aux_in: Feature,
    rgb_act: Vec<Feature>,
    aux_act: Vec<Feature>,
    gates: Vec<Feature>,
    fused: Vec<Feature>,
}

/// Upstream loss gradients with respect to each head's logits.
#[derive(Debug, Clone)]
pub struct HeadGradients {
    pub joint: Feature,
    pub rgb: Option<Feature>,
    pub aux: Option<Feature>,
}

impl HeadGradients {
    pub fn zeros(k: usize, h: usize, w: usize) -> Self {
        HeadGradients {
            joint: Feature::zeros(k, h, w),
            rgb: None,
            aux: None,
        }
    }
}

impl ForwardCache {
    /// Which rectifier units were active, over both branches and all stages.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.rgb_act
            .iter()
            .chain(&self.aux_act)
            .flat_map(|a| a.data.iter().map(|&v| v > 0.0))
            .collect()
    }
}

/// Copy of `bundle` with one modality replaced by zeros.
pub fn mask_modality(bundle: &FrameBundle, modality: Modality) -> FrameBundle {
    let mut out = bundle.clone();
    out.modality_mut(modality).data.iter_mut().for_each(|v| *v = 0.0);
    out
}

fn check_inputs(params: &Params, bundle: &FrameBundle) -> Result<()> {
    let cfg = &params.config;
    let dims_ok = |img: &Feature, c: usize| img.channels == c && img.height == cfg.height && img.width == cfg.width;
    if !dims_ok(&bundle.rgb, RGB_CHANNELS)
        || !dims_ok(&bundle.thermal, 1)
        || !dims_ok(&bundle.lidar, 1)
        || bundle.labels.width != cfg.width
        || bundle.labels.height != cfg.height
    {
        return Err(Error::Shape(format!(
            "bundle {}x{} does not match model input {}x{}",
            bundle.rgb.height, bundle.rgb.width, cfg.height, cfg.width
        )));
    }
    Ok(())
}

fn decode(head: &Head, feats: &[Feature], out_h: usize, out_w: usize) -> Feature {
    let k = head.bias.len();
    let mut z = Feature::zeros(k, out_h, out_w);
    for (s, (feat, proj)) in feats.iter().zip(&head.proj).enumerate() {
        let low = pointwise(proj, &[feat], None);
        let up = Upsampler::new(feat.height, feat.width, 1 << (s + 1));
        z.add_assign(&up.forward(&low));
    }
    for c in 0..k {
        let b = head.bias.data()[c];
        z.plane_mut(c).iter_mut().for_each(|v| *v += b);
    }
    z
}

fn decode_backward(head: &Head, feats: &[Feature], dz: &Feature, grad: &mut Head) -> Vec<Feature> {
    for c in 0..dz.channels {
        grad.bias.data_mut()[c] += dz.plane(c).iter().sum::<f64>();
    }
    feats
        .iter()
        .zip(&head.proj)
        .zip(grad.proj.iter_mut())
        .enumerate()
        .map(|(s, ((feat, proj), gproj))| {
            let up = Upsampler::new(feat.height, feat.width, 1 << (s + 1));
            let dlow = up.backward(dz);
            let mut dfeat = Feature::zeros(feat.channels, feat.height, feat.width);
            pointwise_backward(proj, &[feat], &dlow, gproj, None, &mut [&mut dfeat]);
            dfeat
        })
        .collect()
}

fn forward_impl(
    params: &Params,
    bundle: &FrameBundle,
    mask: ModalitySet,
    side_heads: bool,
) -> Result<(PredictionSet, ForwardCache)> {
    check_inputs(params, bundle)?;
    let cfg = &params.config;
    let (h, w) = (cfg.height, cfg.width);

    let mut rgb_in = bundle.rgb.clone();
    if mask.contains(Modality::Rgb) {
        rgb_in.data.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut aux_in = Feature::zeros(AUX_CHANNELS, h, w);
    if !mask.contains(Modality::Thermal) {
        aux_in.plane_mut(0).copy_from_slice(bundle.thermal.plane(0));
    }
    if !mask.contains(Modality::Lidar) {
        aux_in.plane_mut(1).copy_from_slice(bundle.lidar.plane(0));
    }

    let mut rgb_act: Vec<Feature> = Vec::with_capacity(cfg.stages);
    let mut aux_act: Vec<Feature> = Vec::with_capacity(cfg.stages);
    let mut gates = Vec::with_capacity(cfg.stages);
    let mut fused = Vec::with_capacity(cfg.stages);
    for s in 0..cfg.stages {
        let mut a_r = conv3x3_s2(rgb_act.last().unwrap_or(&rgb_in), &params.rgb.weights[s], &params.rgb.biases[s]);
        relu_inplace(&mut a_r);
        let mut a_a = conv3x3_s2(aux_act.last().unwrap_or(&aux_in), &params.aux.weights[s], &params.aux.biases[s]);
        relu_inplace(&mut a_a);

        let mut g = pointwise(&params.fusion.weights[s], &[&a_r, &a_a], Some(&params.fusion.biases[s]));
        g.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut f = a_r.clone();
        for ((fv, gv), av) in f.data.iter_mut().zip(&g.data).zip(&a_a.data) {
            *fv += gv * av;
        }
        rgb_act.push(a_r);
        aux_act.push(a_a);
        gates.push(g);
        fused.push(f);
    }

    let joint = decode(&params.joint, &fused, h, w);
    let (rgb, aux) = if side_heads {
        (
            params.rgb_head.as_ref().map(|hd| decode(hd, &rgb_act, h, w)),
            params.aux_head.as_ref().map(|hd| decode(hd, &aux_act, h, w)),
        )
    } else {
        (None, None)
    };
    let cache = ForwardCache {
        version: params.version(),
        mask,
        rgb_in,
        aux_in,
        rgb_act,
        aux_act,
        gates,
        fused,
    };
    Ok((PredictionSet { joint, rgb, aux }, cache))
}

/// Run the network with the modalities in `mask` zeroed.
pub fn forward(params: &Params, bundle: &FrameBundle, mask: ModalitySet) -> Result<(PredictionSet, ForwardCache)> {
    forward_impl(params, bundle, mask, true)
}

/// Gradients of a scalar loss with respect to every parameter, given the
/// loss gradients with respect to the head logits of the cached pass.
pub fn backward(params: &Params, cache: &ForwardCache, upstream: &HeadGradients) -> Result<Params> {
    if cache.version != params.version() {
        return Err(Error::StaleCache {
            cache: cache.version,
            params: params.version(),
        });
    }
    let cfg = &params.config;
    let stages = cfg.stages;
    let mut grads = params.zeros_like();

    let mut d_fused = decode_backward(&params.joint, &cache.fused, &upstream.joint, &mut grads.joint);
    let mut d_rgb: Vec<Feature> = cache
        .rgb_act
        .iter()
        .map(|a| Feature::zeros(a.channels, a.height, a.width))
        .collect();
    let mut d_aux = d_rgb.clone();

    let side = [
        (&upstream.rgb, &params.rgb_head, grads.rgb_head.as_mut(), &cache.rgb_act, &mut d_rgb),
        (&upstream.aux, &params.aux_head, grads.aux_head.as_mut(), &cache.aux_act, &mut d_aux),
    ];
    for (dz, head, ghead, acts, dst) in side {
        let Some(dz) = dz else { continue };
        let (Some(head), Some(ghead)) = (head, ghead) else {
            return Err(Error::Invalid("gradient supplied for a decoder head the model does not have".into()));
        };
        for (d, add) in dst.iter_mut().zip(decode_backward(head, acts, dz, ghead)) {
            d.add_assign(&add);
        }
    }

    for s in (0..stages).rev() {
        let a_r = &cache.rgb_act[s];
        let a_a = &cache.aux_act[s];
        let g = &cache.gates[s];
        let df = &mut d_fused[s];

        // f = a_r + g ⊙ a_a
        d_rgb[s].add_assign(df);
        let mut dz_gate = Feature::zeros(g.channels, g.height, g.width);
        for i in 0..df.data.len() {
            let (dfv, gv) = (df.data[i], g.data[i]);
            d_aux[s].data[i] += gv * dfv;
            dz_gate.data[i] = dfv * a_a.data[i] * gv * (1.0 - gv);
        }
        pointwise_backward(
            &params.fusion.weights[s],
            &[a_r, a_a],
            &dz_gate,
            &mut grads.fusion.weights[s],
            Some(&mut grads.fusion.biases[s]),
            &mut [&mut d_rgb[s], &mut d_aux[s]],
        );

        for (branch, gbranch, acts, input, d) in [
            (&params.rgb, &mut grads.rgb, &cache.rgb_act, &cache.rgb_in, &mut d_rgb),
            (&params.aux, &mut grads.aux, &cache.aux_act, &cache.aux_in, &mut d_aux),
        ] {
            let (before, rest) = d.split_at_mut(s);
            let dcur = &mut rest[0];
            relu_backward_inplace(&acts[s], dcur);
            let stage_in = if s == 0 { input } else { &acts[s - 1] };
            conv3x3_s2_backward(
                stage_in,
                &branch.weights[s],
                dcur,
                &mut gbranch.weights[s],
                &mut gbranch.biases[s],
                before.last_mut(),
            );
        }
    }
    Ok(grads)
}

/// Per-pixel argmax over classes; ties go to the smaller class id.
pub fn predict_logits(z: &Feature) -> LabelMap {
    let n = z.height * z.width;
    let mut ids = vec![0u8; n];
    let mut best = z.plane(0).to_vec();
    for k in 1..z.channels {
        for (i, &v) in z.plane(k).iter().enumerate() {
            if v > best[i] {
                best[i] = v;
                ids[i] = k as u8;
            }
        }
    }
    LabelMap {
        width: z.width,
        height: z.height,
        ids,
    }
}

/// Joint-head segmentation with the modalities in `mask` zeroed. Side heads
/// are not evaluated.
pub fn predict(params: &Params, bundle: &FrameBundle, mask: ModalitySet) -> Result<LabelMap> {
    let (preds, _) = forward_impl(params, bundle, mask, false)?;
    Ok(predict_logits(&preds.joint))
}

fn check_loss_dims(logits: &Feature, labels: &LabelMap) -> Result<()> {
    if logits.width != labels.width || logits.height != labels.height {
        return Err(Error::Shape(format!(
            "logits {}x{} vs labels {}x{}",
            logits.height, logits.width, labels.height, labels.width
        )));
    }
    Ok(())
}

fn pixel_nll(logits: &Feature, i: usize, label: usize, probs: &mut [f64]) -> f64 {
    let n = logits.height * logits.width;
    let max = (0..logits.channels).map(|k| logits.data[k * n + i]).fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (k, p) in probs.iter_mut().enumerate() {
        *p = (logits.data[k * n + i] - max).exp();
        sum += *p;
    }
    probs.iter_mut().for_each(|p| *p /= sum);
    sum.ln() + max - logits.data[label * n + i]
}

/// Per-pixel negative log-likelihood, zero at ignored pixels.
pub fn softmax_nll_map(logits: &Feature, labels: &LabelMap) -> Result<Vec<f64>> {
    check_loss_dims(logits, labels)?;
    let mut probs = vec![0.0; logits.channels];
    Ok(labels
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| if id == IGNORE { 0.0 } else { pixel_nll(logits, i, id as usize, &mut probs) })
        .collect())
}

/// Mean negative log-likelihood over non-ignored pixels; zero when every
/// pixel is ignored.
pub fn softmax_ce(logits: &Feature, labels: &LabelMap) -> Result<f64> {
    let nll = softmax_nll_map(logits, labels)?;
    let count = labels.ids.iter().filter(|&&id| id != IGNORE).count();
    Ok(if count == 0 { 0.0 } else { nll.iter().sum::<f64>() / count as f64 })
}

/// [`softmax_ce`] together with its gradient with respect to the logits.
pub fn softmax_ce_with_grad(logits: &Feature, labels: &LabelMap) -> Result<(f64, Feature)> {
    check_loss_dims(logits, labels)?;
    let n = logits.height * logits.width;
    let count = labels.ids.iter().filter(|&&id| id != IGNORE).count();
    let mut grad = Feature::zeros(logits.channels, logits.height, logits.width);
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut probs = vec![0.0; logits.channels];
    let mut total = 0.0;
    for (i, &id) in labels.ids.iter().enumerate() {
        if id == IGNORE {
            continue;
        }
        total += pixel_nll(logits, i, id as usize, &mut probs);
        for (k, p) in probs.iter().enumerate() {
            let target = if k == id as usize { 1.0 } else { 0.0 };
            grad.data[k * n + i] = (p - target) * inv;
        }
    }
    Ok((total / count as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use crate::raster::Image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_bundle(rng: &mut ChaCha8Rng, h: usize, w: usize) -> FrameBundle {
        let mut img = |c| {
            let mut f = Image::zeros(c, h, w);
            f.data.iter_mut().for_each(|v| *v = rng.random_range(0.0..1.0));
            f
        };
        let rgb = img(3);
        let thermal = img(1);
        let lidar = img(1);
        let ids = (0..h * w).map(|_| rng.random_range(0..4u8)).collect();
        FrameBundle {
            rgb,
            thermal,
            lidar,
            labels: LabelMap { width: w, height: h, ids },
            available: ModalitySet::ALL,
            timestamp: 0,
        }
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            stages: 2,
            channels: vec![3, 4],
            classes: 4,
            height: 8,
            width: 8,
            multihead: true,
        }
    }

    #[test]
    fn output_shapes() {
        let cfg = ModelConfig::default();
        let p = init_params(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = random_bundle(&mut rng, 64, 64);
        let (preds, cache) = forward(&p, &b, ModalitySet::EMPTY).unwrap();
        assert_eq!((cache.fused[2].height, cache.fused[2].width), (8, 8));
        for z in [Some(&preds.joint), preds.rgb.as_ref(), preds.aux.as_ref()] {
            let z = z.unwrap();
            assert_eq!((z.channels, z.height, z.width), (4, 64, 64));
            assert!(z.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let p = init_params(&small_config(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = random_bundle(&mut rng, 16, 8);
        assert!(forward(&p, &b, ModalitySet::EMPTY).is_err());
    }

    #[test]
    fn mask_modality_zeroes_one_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut b = random_bundle(&mut rng, 8, 8);
        b.rgb.data.iter_mut().for_each(|v| *v = 7.0);
        let m = mask_modality(&b, Modality::Rgb);
        assert!(m.rgb.data.iter().all(|&v| v == 0.0));
        assert_eq!(m.thermal, b.thermal);
        assert_eq!(m.lidar, b.lidar);
        assert_eq!(mask_modality(&m, Modality::Rgb), m);
    }

    #[test]
    fn aux_head_never_sees_rgb() {
        let p = init_params(&small_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random_bundle(&mut rng, 8, 8);
        let (full, _) = forward(&p, &b, ModalitySet::EMPTY).unwrap();
        let (masked, _) = forward(&p, &b, ModalitySet::only(Modality::Rgb)).unwrap();
        assert_eq!(full.aux, masked.aux);
        assert_ne!(full.rgb, masked.rgb);
    }

    #[test]
    fn fully_masked_output_is_input_independent() {
        let p = init_params(&small_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_bundle(&mut rng, 8, 8);
        let b = random_bundle(&mut rng, 8, 8);
        let (pa, _) = forward(&p, &a, ModalitySet::ALL).unwrap();
        let (pb, _) = forward(&p, &b, ModalitySet::ALL).unwrap();
        assert_eq!(pa, pb);
    }

    #[test]
    fn ce_examples() {
        let labels = LabelMap::filled(3, 2, 1);
        let uniform = Feature::zeros(4, 2, 3);
        assert!((softmax_ce(&uniform, &labels).unwrap() - 4f64.ln()).abs() < 1e-15);

        let mut sat = Feature::zeros(4, 2, 3);
        sat.plane_mut(1).iter_mut().for_each(|v| *v = 1000.0);
        assert!(softmax_ce(&sat, &labels).unwrap() < 1e-6);

        let ignored = LabelMap::filled(3, 2, IGNORE);
        assert_eq!(softmax_ce(&uniform, &ignored).unwrap(), 0.0);
        assert!(softmax_ce(&uniform, &LabelMap::filled(2, 2, 0)).is_err());
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut z = Feature::zeros(4, 3, 3);
        z.data.iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        let ids = (0..9).map(|i| if i == 4 { IGNORE } else { rng.random_range(0..4u8) }).collect();
        let labels = LabelMap { width: 3, height: 3, ids };
        let (_, g) = softmax_ce_with_grad(&z, &labels).unwrap();
        for i in 0..z.data.len() {
            let mut zp = z.clone();
            zp.data[i] += 1e-6;
            let mut zm = z.clone();
            zm.data[i] -= 1e-6;
            let fd = (softmax_ce(&zp, &labels).unwrap() - softmax_ce(&zm, &labels).unwrap()) / 2e-6;
            assert!((fd - g.data[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn predict_ties_and_scaling() {
        let mut z = Feature::zeros(4, 1, 2);
        z.plane_mut(2).iter_mut().for_each(|v| *v = 5.0);
        assert_eq!(predict_logits(&z).ids, vec![2, 2]);
        z.plane_mut(1)[0] = 5.0;
        assert_eq!(predict_logits(&z).ids, vec![1, 2]);
        let mut scaled = z.clone();
        scaled.scale(3.5);
        assert_eq!(predict_logits(&scaled), predict_logits(&z));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let p = init_params(&small_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = random_bundle(&mut rng, 8, 8);
        let (_, cache) = forward(&p, &b, ModalitySet::EMPTY).unwrap();
        let mut up = HeadGradients::zeros(4, 8, 8);
        up.rgb = Some(Feature::zeros(4, 8, 8));
        up.aux = Some(Feature::zeros(4, 8, 8));
        let g = backward(&p, &cache, &up).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        for ((_, a), (_, b)) in g.named_tensors().iter().zip(p.named_tensors()) {
            assert_eq!(a.shape(), b.shape());
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = init_params(&small_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = random_bundle(&mut rng, 8, 8);
        let (_, cache) = forward(&p, &b, ModalitySet::EMPTY).unwrap();
        p.tensors_mut()[0].data_mut()[0] += 1.0;
        let up = HeadGradients::zeros(4, 8, 8);
        assert!(matches!(backward(&p, &cache, &up), Err(Error::StaleCache { .. })));
    }

    #[test]
    fn side_head_gradient_without_head_is_error() {
        let cfg = ModelConfig {
            multihead: false,
            ..small_config()
        };
        let p = init_params(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let b = random_bundle(&mut rng, 8, 8);
        let (preds, cache) = forward(&p, &b, ModalitySet::EMPTY).unwrap();
        assert!(preds.rgb.is_none() && preds.aux.is_none());
        let mut up = HeadGradients::zeros(4, 8, 8);
        up.rgb = Some(Feature::zeros(4, 8, 8));
        assert!(backward(&p, &cache, &up).is_err());
    }
}
