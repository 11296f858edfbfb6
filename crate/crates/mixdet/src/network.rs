//! Toy feature pyramid backbone plus the detection head: raw per-level
//! outputs o1..o4 decoded into parameter maps and flattened into a single
//! mixture model over all levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::mixture::{BoxSpace, MixtureModel};
use crate::real::Real;

/// Floor applied to decoded gamma values, in pixels.
pub const GAMMA_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct HeadConfig {
    pub use_ltrb: bool,
    pub use_center_limit: bool,
    pub use_level_scale: bool,
    /// Number of foreground classes C; the head emits C+1 channels with
    /// background last.
    pub num_classes: usize,
    /// Channel width of backbone features and head trunk.
    pub feature_width: usize,
    /// Pyramid level indices; level l has stride 2^l. The level-scale
    /// factor 2^(l-5) applies unchanged.
    pub levels: Vec<u32>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            use_ltrb: true,
            use_center_limit: true,
            use_level_scale: true,
            num_classes: 3,
            feature_width: 32,
            levels: vec![3, 4, 5],
        }
    }
}

impl HeadConfig {
    pub fn level_scale(&self, level: u32) -> f64 {
        if self.use_level_scale {
            2f64.powi(level as i32 - 5)
        } else {
            1.0
        }
    }

    pub fn box_space(&self) -> BoxSpace {
        if self.use_ltrb {
            BoxSpace::Ltrb
        } else {
            BoxSpace::Xywh
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<R: Real> {
    pub kernel: Tensor<R>,
    pub bias: Tensor<R>,
}

impl<R: Real> Conv<R> {
    /// He-style init: centered uniform scaled by fan-in, zero bias.
    fn init(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize) -> Self {
        let fan_in = (k * k * cin) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let data = (0..k * k * cin * cout)
            .map(|_| R::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        Self {
            kernel: Tensor::from_vec(vec![k, k, cin, cout], data),
            bias: Tensor::zeros(vec![cout]),
        }
    }
}

/// All trainable parameters of the backbone and head.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector<R: Real = f64> {
    pub config: HeadConfig,
    pub stem1: Conv<R>,
    pub stem2: Conv<R>,
    pub stem3: Conv<R>,
    pub down4: Conv<R>,
    pub down5: Conv<R>,
    pub lat3: Conv<R>,
    pub lat4: Conv<R>,
    pub lat5: Conv<R>,
    pub trunk3: Conv<R>,
    pub trunk1: Conv<R>,
    pub out_mu: Conv<R>,
    pub out_gamma: Conv<R>,
    pub out_p: Conv<R>,
    pub out_pi: Conv<R>,
}

const PARAM_NAMES: [&str; 14] = [
    "backbone.stem1", "backbone.stem2", "backbone.stem3", "backbone.down4", "backbone.down5",
    "backbone.lat3", "backbone.lat4", "backbone.lat5", "head.trunk3", "head.trunk1",
    "head.out_mu", "head.out_gamma", "head.out_p", "head.out_pi",
];

impl<R: Real> Detector<R> {
    pub fn new(config: HeadConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = config.feature_width;
        let c = config.num_classes;
        let mut out_gamma = Conv::init(&mut rng, 1, f, 4);
        // softplus^-1(1) so initial gamma is about one level-scale unit.
        let b = R::from_f64_lossy((1f64.exp() - 1.0).ln());
        for v in out_gamma.bias.data_mut() {
            *v = b;
        }
        Self {
            stem1: Conv::init(&mut rng, 3, 3, f),
            stem2: Conv::init(&mut rng, 3, f, f),
            stem3: Conv::init(&mut rng, 3, f, f),
            down4: Conv::init(&mut rng, 3, f, f),
            down5: Conv::init(&mut rng, 3, f, f),
            lat3: Conv::init(&mut rng, 1, f, f),
            lat4: Conv::init(&mut rng, 1, f, f),
            lat5: Conv::init(&mut rng, 1, f, f),
            trunk3: Conv::init(&mut rng, 3, f, f),
            trunk1: Conv::init(&mut rng, 1, f, f),
            out_mu: Conv::init(&mut rng, 1, f, 4),
            out_gamma,
            out_p: Conv::init(&mut rng, 1, f, c + 1),
            out_pi: Conv::init(&mut rng, 1, f, 1),
            config,
        }
    }

    fn convs(&self) -> Vec<&Conv<R>> {
        vec![
            &self.stem1, &self.stem2, &self.stem3, &self.down4, &self.down5, &self.lat3,
            &self.lat4, &self.lat5, &self.trunk3, &self.trunk1, &self.out_mu, &self.out_gamma,
            &self.out_p, &self.out_pi,
        ]
    }

    fn convs_mut(&mut self) -> Vec<&mut Conv<R>> {
        vec![
            &mut self.stem1, &mut self.stem2, &mut self.stem3, &mut self.down4, &mut self.down5,
            &mut self.lat3, &mut self.lat4, &mut self.lat5, &mut self.trunk3, &mut self.trunk1,
            &mut self.out_mu, &mut self.out_gamma, &mut self.out_p, &mut self.out_pi,
        ]
    }

    /// Named parameter tensors in a stable order (checkpoint layout).
    pub fn named_params(&self) -> Vec<(String, Tensor<R>)> {
        let mut out = Vec::new();
        for (name, conv) in PARAM_NAMES.iter().zip(self.convs()) {
            out.push((format!("{name}.kernel"), conv.kernel.clone()));
            out.push((format!("{name}.bias"), conv.bias.clone()));
        }
        out
    }

    pub fn load_named_params(&mut self, params: &[(String, Tensor<R>)]) -> crate::Result<()> {
        let lookup: std::collections::HashMap<&str, &Tensor<R>> =
            params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (name, conv) in PARAM_NAMES.iter().zip(self.convs_mut()) {
            for (suffix, slot) in
                [("kernel", &mut conv.kernel), ("bias", &mut conv.bias)]
            {
                let key = format!("{name}.{suffix}");
                let t = lookup.get(key.as_str()).ok_or_else(|| {
                    crate::Error::Checkpoint {
                        path: String::new(),
                        msg: format!("missing parameter {key}"),
                    }
                })?;
                if t.shape() != slot.shape() {
                    return Err(crate::Error::Checkpoint {
                        path: String::new(),
                        msg: format!("shape mismatch for {key}"),
                    });
                }
                *slot = (*t).clone();
            }
        }
        Ok(())
    }

    /// Apply an SGD update; `grads` is aligned with the vars of a
    /// [`TapedForward`] (kernel, bias per conv, in `named_params` order).
    pub fn sgd_step(&mut self, grads: &[Vec<R>], lr: R) {
        let mut it = grads.iter();
        for conv in self.convs_mut() {
            for slot in [&mut conv.kernel, &mut conv.bias] {
                let g = it.next().expect("gradient count mismatch");
                for (w, &gv) in slot.data_mut().iter_mut().zip(g) {
                    *w = *w - lr * gv;
                }
            }
        }
    }
}

/// One pyramid level recorded on a tape.
pub struct TapedLevel {
    pub level: u32,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub feature: Var,
    pub o1: Var,
    pub o2: Var,
    pub o3: Var,
    pub o4: Var,
    pub mu_map: Var,
    pub gamma_map: Var,
    pub p_map: Var,
}

/// Full forward pass of one image recorded on a tape.
pub struct TapedForward {
    /// Parameter leaf vars, aligned with `Detector::named_params` order.
    pub param_vars: Vec<Var>,
    pub levels: Vec<TapedLevel>,
    /// Flattened mixture parameters: mu and gamma are `[K, 4]`, p is
    /// `[K, C+1]`, pi is `[K]`, components ordered level-major then
    /// row-major.
    pub mu: Var,
    pub gamma: Var,
    pub p: Var,
    pub pi: Var,
}

impl TapedForward {
    pub fn num_components(&self) -> usize {
        self.levels.iter().map(|l| l.height * l.width).sum()
    }

    /// Snapshot the decoded mixture parameters into a value-level model.
    pub fn to_mixture<R: Real>(&self, tape: &Tape<R>, space: BoxSpace) -> MixtureModel<R> {
        let k = self.num_components();
        let mu_d = tape.value(self.mu).data();
        let ga_d = tape.value(self.gamma).data();
        let p_d = tape.value(self.p).data();
        let pi_d = tape.value(self.pi).data();
        let classes = p_d.len() / k;
        MixtureModel {
            mu: (0..k).map(|i| std::array::from_fn(|c| mu_d[i * 4 + c])).collect(),
            gamma: (0..k).map(|i| std::array::from_fn(|c| ga_d[i * 4 + c])).collect(),
            p: p_d.chunks(classes).map(|r| r.to_vec()).collect(),
            pi: pi_d.to_vec(),
            space,
        }
    }
}

/// Cell-center offsets of a level in input pixels: channel 0 is x, channel
/// 1 is y, `offset(i, j) = ((j + 0.5) s, (i + 0.5) s)`.
pub fn center_offsets<R: Real>(stride: usize, h: usize, w: usize) -> Tensor<R> {
    let s = R::from_f64_lossy(stride as f64);
    let mut data = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            data.push((R::from_f64_lossy(j as f64) + R::half()) * s);
            data.push((R::from_f64_lossy(i as f64) + R::half()) * s);
        }
    }
    Tensor::from_vec(vec![h, w, 2], data)
}

pub fn forward<R: Real>(
    detector: &Detector<R>,
    tape: &mut Tape<R>,
    image: &Tensor<R>,
    trainable: bool,
) -> TapedForward {
    let cfg = &detector.config;
    assert_eq!(image.shape().len(), 3, "image must be h x w x 3");
    let max_stride = 1usize << *cfg.levels.iter().max().unwrap();
    assert!(
        image.shape()[0] % max_stride == 0 && image.shape()[1] % max_stride == 0,
        "image extent must be divisible by the largest stride"
    );

    // Parameter leaves, in named_params order.
    let mut param_vars = Vec::new();
    let mut conv_vars = Vec::new();
    for conv in detector.convs() {
        let k = tape.leaf(conv.kernel.clone(), trainable);
        let b = tape.leaf(conv.bias.clone(), trainable);
        param_vars.push(k);
        param_vars.push(b);
        conv_vars.push((k, b));
    }
    let (stem1, stem2, stem3, down4, down5, lat3, lat4, lat5, trunk3, trunk1, out_mu, out_gamma, out_p, out_pi) = (
        conv_vars[0], conv_vars[1], conv_vars[2], conv_vars[3], conv_vars[4], conv_vars[5],
        conv_vars[6], conv_vars[7], conv_vars[8], conv_vars[9], conv_vars[10], conv_vars[11],
        conv_vars[12], conv_vars[13],
    );

    // Bottom-up: strided 3x3 convs with swish.
    let img = tape.constant(image.clone());
    let mut x = img;
    for conv in [stem1, stem2, stem3] {
        let c = tape.conv2d(x, conv.0, conv.1, 2);
        x = tape.swish(c);
    }
    let c3 = x;
    let c = tape.conv2d(c3, down4.0, down4.1, 2);
    let c4 = tape.swish(c);
    let c = tape.conv2d(c4, down5.0, down5.1, 2);
    let c5 = tape.swish(c);

    // Top-down 1x1 lateral merges.
    let p5 = tape.conv2d(c5, lat5.0, lat5.1, 1);
    let l4 = tape.conv2d(c4, lat4.0, lat4.1, 1);
    let u5 = tape.upsample2x(p5);
    let p4 = tape.add(l4, u5);
    let l3 = tape.conv2d(c3, lat3.0, lat3.1, 1);
    let u4 = tape.upsample2x(p4);
    let p3 = tape.add(l3, u4);
    let features = [p3, p4, p5];

    let mut levels = Vec::new();
    let mut o4_flat = Vec::new();
    for (idx, &level) in cfg.levels.iter().enumerate() {
        let feature = features[idx];
        let stride = 1usize << level;
        let (h, w) = (tape.value(feature).shape()[0], tape.value(feature).shape()[1]);

        // Shared-weight head: 3x3 + swish, 1x1 + swish, four 1x1 outputs.
        let t = tape.conv2d(feature, trunk3.0, trunk3.1, 1);
        let t = tape.swish(t);
        let t2 = tape.conv2d(t, trunk1.0, trunk1.1, 1);
        let t2 = tape.swish(t2);
        let o1 = tape.conv2d(t2, out_mu.0, out_mu.1, 1);
        let o2 = tape.conv2d(t2, out_gamma.0, out_gamma.1, 1);
        let o3 = tape.conv2d(t2, out_p.0, out_p.1, 1);
        let o4 = tape.conv2d(t2, out_pi.0, out_pi.1, 1);

        let mu_map = decode_mu(tape, o1, level, stride, h, w, cfg);
        let gamma_map = decode_gamma(tape, o2, level, stride, cfg);
        let p_map = tape.softmax_last(o3);

        o4_flat.push(o4);
        levels.push(TapedLevel {
            level, stride, height: h, width: w, feature, o1, o2, o3, o4, mu_map, gamma_map, p_map,
        });
    }

    // One softmax over every spatial cell of every level jointly.
    let pi_logits = tape.concat_flat(&o4_flat);
    let pi = tape.softmax_flat(pi_logits);

    let k: usize = levels.iter().map(|l| l.height * l.width).sum();
    let mu_cat = tape.concat_flat(&levels.iter().map(|l| l.mu_map).collect::<Vec<_>>());
    let mu = tape.reshape(mu_cat, vec![k, 4]);
    let ga_cat = tape.concat_flat(&levels.iter().map(|l| l.gamma_map).collect::<Vec<_>>());
    let gamma = tape.reshape(ga_cat, vec![k, 4]);
    let p_cat = tape.concat_flat(&levels.iter().map(|l| l.p_map).collect::<Vec<_>>());
    let p = tape.reshape(p_cat, vec![k, cfg.num_classes + 1]);

    TapedForward { param_vars, levels, mu, gamma, p, pi }
}

/// Decode raw o1 into the location map: level-scale, center-limit around
/// the cell centers, softplus-activated width/height, and (optionally) the
/// xywh -> ltrb corner transform.
fn decode_mu<R: Real>(
    tape: &mut Tape<R>,
    o1: Var,
    level: u32,
    stride: usize,
    h: usize,
    w: usize,
    cfg: &HeadConfig,
) -> Var {
    let s = R::from_f64_lossy(cfg.level_scale(level));
    let o1s = tape.scale(o1, s);
    let dxy = tape.slice_last(o1s, 0, 2);
    let whr = tape.slice_last(o1s, 2, 4);

    let offsets = center_offsets::<R>(stride, h, w);
    let center = if cfg.use_center_limit {
        let t = tape.tanh(dxy);
        let lim = tape.scale(t, R::from_f64_lossy(stride as f64));
        tape.add_const(lim, &offsets)
    } else {
        tape.add_const(dxy, &offsets)
    };

    let sp = tape.softplus(whr);
    let wh = tape.scale(sp, R::from_f64_lossy(stride as f64));

    if cfg.use_ltrb {
        let half = tape.scale(wh, R::half());
        let lt = tape.sub(center, half);
        let rb = tape.add(center, half);
        tape.concat_last(&[lt, rb])
    } else {
        tape.concat_last(&[center, wh])
    }
}

/// gamma = max(softplus(s * o2) * stride, floor), strictly positive.
fn decode_gamma<R: Real>(
    tape: &mut Tape<R>,
    o2: Var,
    level: u32,
    stride: usize,
    cfg: &HeadConfig,
) -> Var {
    let s = R::from_f64_lossy(cfg.level_scale(level));
    let o2s = tape.scale(o2, s);
    let sp = tape.softplus(o2s);
    let g = tape.scale(sp, R::from_f64_lossy(stride as f64));
    tape.max_scalar(g, R::from_f64_lossy(GAMMA_FLOOR))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::DensityKind;
    use rand::prelude::*;

    fn test_image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(vec![64, 64, 3], (0..64 * 64 * 3).map(|_| rng.random_range(0.0..1.0)).collect())
    }

    #[test]
    fn pyramid_extents_and_component_count() {
        let det = Detector::<f64>::new(HeadConfig::default(), 1);
        let mut tape = Tape::new();
        let fwd = forward(&det, &mut tape, &test_image(1), false);
        let extents: Vec<(usize, usize, usize)> =
            fwd.levels.iter().map(|l| (l.stride, l.height, l.width)).collect();
        assert_eq!(extents, vec![(8, 8, 8), (16, 4, 4), (32, 2, 2)]);
        assert_eq!(fwd.num_components(), 84);
        assert_eq!(tape.value(fwd.pi).numel(), 84);
        assert_eq!(tape.value(fwd.mu).shape(), &[84, 4]);
        assert_eq!(tape.value(fwd.p).shape(), &[84, 4]);
    }

    #[test]
    fn forward_is_deterministic() {
        let det = Detector::<f64>::new(HeadConfig::default(), 2);
        let img = test_image(3);
        let run = || {
            let mut tape = Tape::new();
            let fwd = forward(&det, &mut tape, &img, false);
            tape.value(fwd.mu).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn head_output_channel_counts() {
        let cfg = HeadConfig { num_classes: 3, ..Default::default() };
        let det = Detector::<f64>::new(cfg, 1);
        let mut tape = Tape::new();
        let fwd = forward(&det, &mut tape, &test_image(1), false);
        for l in &fwd.levels {
            assert_eq!(tape.value(l.o1).shape(), &[l.height, l.width, 4]);
            assert_eq!(tape.value(l.o2).shape(), &[l.height, l.width, 4]);
            assert_eq!(tape.value(l.o3).shape(), &[l.height, l.width, 4]); // C+1 = 4
            assert_eq!(tape.value(l.o4).shape(), &[l.height, l.width, 1]);
        }
    }

    #[test]
    fn center_offsets_grid() {
        let off = center_offsets::<f64>(8, 8, 8);
        assert_eq!(off.at3(0, 0, 0), 4.0);
        assert_eq!(off.at3(0, 0, 1), 4.0);
        // Adjacent cells differ by exactly the stride.
        assert_eq!(off.at3(0, 1, 0) - off.at3(0, 0, 0), 8.0);
        assert_eq!(off.at3(1, 0, 1) - off.at3(0, 0, 1), 8.0);
        // Offsets stay inside the image.
        assert!(off.at3(7, 7, 0) < 64.0 && off.at3(7, 7, 1) < 64.0);
    }

    #[test]
    fn decode_mu_center_behavior() {
        // Zero raw output puts the center at the cell center; saturated
        // output deviates by exactly one stride.
        let cfg = HeadConfig::default();
        for (raw, expect_shift) in [(0.0f64, 0.0f64), (200.0, 8.0)] {
            let mut tape: Tape<f64> = Tape::new();
            let o1 = tape.constant(Tensor::from_vec(vec![1, 1, 4], vec![raw, 0.0, 0.0, 0.0]));
            // level 5 so the level scale is 2^0 = 1.
            let mu = decode_mu(&mut tape, o1, 5, 8, 1, 1, &cfg);
            let d = tape.value(mu).data();
            let (l, r) = (d[0], d[2]);
            let cx = 0.5 * (l + r);
            assert!((cx - (4.0 + expect_shift)).abs() < 1e-9);
        }
    }

    #[test]
    fn decode_mu_level_scale() {
        let cfg = HeadConfig::default();
        assert_eq!(cfg.level_scale(5), 1.0);
        assert_eq!(cfg.level_scale(4), 0.5);
        assert_eq!(cfg.level_scale(3), 0.25);
        let off = HeadConfig { use_level_scale: false, ..Default::default() };
        assert_eq!(off.level_scale(3), 1.0);
    }

    #[test]
    fn decode_mu_boxes_are_valid_ltrb() {
        let det = Detector::<f64>::new(HeadConfig::default(), 4);
        let mut tape = Tape::new();
        let fwd = forward(&det, &mut tape, &test_image(9), false);
        let mu = tape.value(fwd.mu).data();
        for row in mu.chunks(4) {
            assert!(row[0] <= row[2] && row[1] <= row[3]);
        }
    }

    #[test]
    fn decode_centers_stay_within_one_stride_of_cell() {
        let det = Detector::<f64>::new(HeadConfig::default(), 5);
        let mut tape = Tape::new();
        let fwd = forward(&det, &mut tape, &test_image(11), false);
        let mut k = 0;
        let mu = tape.value(fwd.mu).data();
        for l in &fwd.levels {
            let off = center_offsets::<f64>(l.stride, l.height, l.width);
            for i in 0..l.height {
                for j in 0..l.width {
                    let cx = 0.5 * (mu[k * 4] + mu[k * 4 + 2]);
                    let cy = 0.5 * (mu[k * 4 + 1] + mu[k * 4 + 3]);
                    assert!((cx - off.at3(i, j, 0)).abs() <= l.stride as f64 + 1e-9);
                    assert!((cy - off.at3(i, j, 1)).abs() <= l.stride as f64 + 1e-9);
                    k += 1;
                }
            }
        }
        assert_eq!(k, 84);
    }

    #[test]
    fn decode_gamma_values() {
        let cfg = HeadConfig::default();
        let mut tape = Tape::new();
        let o2 = tape.constant(Tensor::from_vec(vec![1, 1, 4], vec![0.0, -200.0, 1.0, 2.0]));
        let g = decode_gamma(&mut tape, o2, 5, 8, &cfg);
        let d = tape.value(g).data();
        assert!((d[0] - 8.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(d[1], GAMMA_FLOOR);
        // Monotone in the raw output.
        assert!(d[3] > d[2] && d[2] > d[0]);
    }

    #[test]
    fn pi_is_a_distribution_over_all_levels() {
        let det = Detector::<f64>::new(HeadConfig::default(), 6);
        let mut tape = Tape::new();
        let fwd = forward(&det, &mut tape, &test_image(13), false);
        let pi = tape.value(fwd.pi).data();
        assert_eq!(pi.len(), 84);
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_pi_logits_give_uniform_pi() {
        // Zero weights in the pi output conv produce equal logits.
        let mut det = Detector::<f64>::new(HeadConfig::default(), 7);
        for v in det.out_pi.kernel.data_mut() {
            *v = 0.0;
        }
        let mut tape = Tape::new();
        let fwd = forward(&det, &mut tape, &test_image(17), false);
        for &v in tape.value(fwd.pi).data() {
            assert!((v - 1.0 / 84.0).abs() < 1e-12);
        }
    }

    #[test]
    fn flattened_model_matches_map_cells() {
        let det = Detector::<f64>::new(HeadConfig::default(), 8);
        let mut tape = Tape::new();
        let fwd = forward(&det, &mut tape, &test_image(19), false);
        let model = fwd.to_mixture(&tape, det.config.box_space());
        model.validate();
        // Component k's mu equals the map value at its (level, i, j).
        let mut k = 0;
        for l in &fwd.levels {
            let map = tape.value(l.mu_map);
            for i in 0..l.height {
                for j in 0..l.width {
                    for c in 0..4 {
                        assert_eq!(model.mu[k][c], map.at3(i, j, c));
                    }
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn two_path_mixture_evaluation_agrees() {
        // Evaluating the flattened model equals mixing per-level
        // evaluations with the same global pi.
        let det = Detector::<f64>::new(HeadConfig::default(), 9);
        let mut tape = Tape::new();
        let fwd = forward(&det, &mut tape, &test_image(23), false);
        let model = fwd.to_mixture(&tape, det.config.box_space());
        let coords = [10.0, 12.0, 30.0, 31.0];
        let flat = crate::mixture::mixture_box_loglik(DensityKind::Cauchy, coords, &model);

        let mut terms = Vec::new();
        let mut k0 = 0;
        for l in &fwd.levels {
            let cells = l.height * l.width;
            for k in k0..k0 + cells {
                terms.push(
                    model.pi[k].ln()
                        + crate::mixture::box_logpdf(
                            DensityKind::Cauchy,
                            coords,
                            &model.mu[k],
                            &model.gamma[k],
                        ),
                );
            }
            k0 += cells;
        }
        let per_level = crate::mixture::log_sum_exp(&terms);
        assert!((flat - per_level).abs() < 1e-12);
    }

    #[test]
    fn gradient_flows_to_image_and_matches_finite_differences() {
        // Small single-level probe so finite differences stay cheap: check
        // d sum(features) / d image on a tiny detector.
        let cfg = HeadConfig { feature_width: 4, ..Default::default() };
        let det = Detector::<f64>::new(cfg, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let img = Tensor::from_vec(vec![32, 32, 3], (0..32 * 32 * 3).map(|_| rng.random_range(0.0..1.0)).collect());

        let mut tape = Tape::new();
        let x = tape.leaf(img.clone(), true);
        let k = tape.leaf(det.stem1.kernel.clone(), false);
        let b = tape.leaf(det.stem1.bias.clone(), false);
        let c = tape.conv2d(x, k, b, 2);
        let f = tape.swish(c);
        let loss = tape.sum(f);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).to_vec();
        assert!(analytic.iter().any(|&v| v != 0.0));

        // Spot-check 50 random coordinates against central differences.
        let mut idxs: Vec<usize> = (0..img.numel()).collect();
        idxs.shuffle(&mut rng);
        let mut vals = img.data().to_vec();
        for &i in idxs.iter().take(50) {
            let h = 1e-5;
            let orig = vals[i];
            let eval = |vals: &Vec<f64>| {
                let mut t = Tape::new();
                let x = t.leaf(Tensor::from_vec(vec![32, 32, 3], vals.clone()), false);
                let k = t.leaf(det.stem1.kernel.clone(), false);
                let b = t.leaf(det.stem1.bias.clone(), false);
                let c = t.conv2d(x, k, b, 2);
                let f = t.swish(c);
                let s = t.sum(f);
                t.value(s).item()
            };
            vals[i] = orig + h;
            let fp = eval(&vals);
            vals[i] = orig - h;
            let fm = eval(&vals);
            vals[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!((analytic[i] - numeric).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn end_to_end_head_weight_gradient_check() {
        // d(mixture loglik)/d(head weights) via the full decode path,
        // using a small detector to keep finite differences tractable.
        let cfg = HeadConfig { feature_width: 3, ..Default::default() };
        let det = Detector::<f64>::new(cfg.clone(), 12);
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let img = Tensor::from_vec(
            vec![32, 32, 3],
            (0..32 * 32 * 3).map(|_| rng.random_range(0.0..1.0)).collect(),
        );
        let gts = vec![[5.0, 6.0, 18.0, 20.0], [14.0, 3.0, 29.0, 16.0]];

        let loss_of = |d: &Detector<f64>| {
            let mut tape = Tape::new();
            let fwd = forward(d, &mut tape, &img, true);
            let loss = tape.mixture_coord_nll(fwd.mu, fwd.gamma, fwd.pi, &gts, DensityKind::Cauchy);
            (tape, fwd, loss)
        };

        let (tape, fwd, loss) = loss_of(&det);
        let grads = tape.backward(loss);
        // Check a sample of weights in every parameter tensor.
        let names: Vec<String> = det.named_params().iter().map(|(n, _)| n.clone()).collect();
        for (pi_idx, (name, tensor)) in det.named_params().into_iter().enumerate() {
            let analytic = grads.get(fwd.param_vars[pi_idx]).to_vec();
            let n_probe = analytic.len().min(3);
            for probe in 0..n_probe {
                let i = (probe * 97) % analytic.len();
                let h = 1e-5;
                let mut perturbed = det.clone();
                let eval = |delta: f64, det0: &mut Detector<f64>| {
                    let mut params = det0.named_params();
                    let slot = params.iter_mut().find(|(n, _)| *n == names[pi_idx]).unwrap();
                    slot.1.data_mut()[i] += delta;
                    det0.load_named_params(&params).unwrap();
                    let (t, _, l) = loss_of(det0);
                    t.value(l).item()
                };
                let fp = eval(h, &mut perturbed);
                let mut perturbed = det.clone();
                let fm = eval(-h, &mut perturbed);
                let numeric = (fp - fm) / (2.0 * h);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic[i] - numeric).abs() / denom < 1e-4,
                    "grad mismatch in {} [{}]: {} vs {}",
                    name, i, analytic[i], numeric
                );
            }
            let _ = tensor;
        }
    }
}
