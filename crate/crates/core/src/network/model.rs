use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{LabConfig, LanConfig, Resample, SPATIAL_MULTIPLE};
use crate::attention::{apply_attention, init_attention, AttentionSettings};
use crate::engine::init::conv_params;
use crate::engine::{Element, Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Convolutions per block.
pub const CONVS_PER_LAB: usize = 4;

/// A built network: its layout plus every learnable tensor by dotted name.
#[derive(Clone, Debug, PartialEq)]
pub struct LanModel<T> {
    pub config: LanConfig,
    pub params: ParamStore<T>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct LanTrace {
    /// Shallow features.
    pub shallow: Var,
    /// Encoder block outputs, finest first.
    pub encoder: [Var; 3],
    pub bottleneck: Var,
    /// Decoder block outputs after any skip addition, coarsest first.
    pub decoder: [Var; 3],
    /// Restore-conv input (after the global residual, if enabled).
    pub deep: Var,
    pub out: Var,
}

pub fn lab_prefix(i: usize) -> String {
    format!("labs.{i}")
}

/// Builds and initializes a network from `cfg.seed`.
pub fn build_lan<T: Element>(cfg: &LanConfig) -> Result<LanModel<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParamStore::new();
    let conv = |params: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cout, cin, k| -> Result<()> {
        let (w, b) = conv_params(cout, cin, k, rng);
        params.insert(format!("{name}.weight"), w)?;
        params.insert(format!("{name}.bias"), b)
    };

    conv(&mut params, &mut rng, "shallow", cfg.base_width, cfg.in_channels, 3)?;
    for (i, lab) in cfg.labs.iter().enumerate() {
        let p = lab_prefix(i);
        for j in 0..CONVS_PER_LAB {
            let cin = if j == 0 { lab.in_channels } else { lab.out_channels };
            conv(
                &mut params,
                &mut rng,
                &format!("{p}.conv{j}"),
                lab.out_channels,
                cin,
                lab.kernel,
            )?;
        }
        init_attention(
            lab.attention,
            lab.out_channels,
            &cfg.attention,
            &mut params,
            &format!("{p}.attn"),
            &mut rng,
        )?;
        if lab.needs_projection() {
            conv(
                &mut params,
                &mut rng,
                &format!("{p}.proj"),
                lab.out_channels,
                lab.in_channels,
                1,
            )?;
        }
    }
    let restore_out = cfg.out_channels * cfg.upscale * cfg.upscale;
    conv(&mut params, &mut rng, "restore", restore_out, cfg.base_width, 3)?;
    Ok(LanModel {
        config: cfg.clone(),
        params,
    })
}

fn conv_layer<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w_name = format!("{name}.weight");
    let b_name = format!("{name}.bias");
    let w = g.param(&w_name, store.get(&w_name)?);
    let b = g.param(&b_name, store.get(&b_name)?);
    let k = g.shape(w)[2];
    g.conv2d(x, w, Some(b), stride, k / 2)
}

/// One block: four conv + leaky-ReLU layers, attention, local residual.
pub fn lab_forward<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    lab: &LabConfig,
    settings: &AttentionSettings,
    x: Var,
) -> Result<Var> {
    let cin = g.shape(x).get(1).copied().unwrap_or(0);
    if g.shape(x).len() != 4 || cin != lab.in_channels {
        return Err(Error::invalid(
            "lab_forward",
            format!("{prefix} expects [N, {}, H, W], got {:?}", lab.in_channels, g.shape(x)),
        ));
    }
    let entry = match lab.resample {
        Resample::Up2 => g.upsample_nearest(x, 2)?,
        _ => x,
    };
    let first_stride = if lab.resample == Resample::Down2 { 2 } else { 1 };
    let mut h = entry;
    for j in 0..CONVS_PER_LAB {
        let stride = if j == 0 { first_stride } else { 1 };
        h = conv_layer(g, store, &format!("{prefix}.conv{j}"), h, stride)?;
        h = g.leaky_relu(h, lab.slope)?;
    }
    h = apply_attention(g, lab.attention, settings, store, &format!("{prefix}.attn"), h)?;
    if lab.use_lrl {
        let residual = if lab.needs_projection() {
            conv_layer(g, store, &format!("{prefix}.proj"), entry, first_stride)?
        } else {
            x
        };
        h = g.add(h, residual)?;
    }
    Ok(h)
}

impl<T: Element> LanModel<T> {
    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Element>(&self) -> LanModel<U> {
        LanModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn check_input_shape(&self, shape: &[usize]) -> Result<()> {
        let cfg = &self.config;
        if shape.len() != 4 || shape[1] != cfg.in_channels {
            return Err(Error::invalid(
                "lan_forward",
                format!("expected [N, {}, H, W], got {shape:?}", cfg.in_channels),
            ));
        }
        let (h, w) = (shape[2], shape[3]);
        if h == 0 || w == 0 || h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
            return Err(Error::invalid(
                "lan_forward",
                format!("spatial extents must be positive multiples of {SPATIAL_MULTIPLE}, got {h}x{w}"),
            ));
        }
        Ok(())
    }

    /// Records the forward pass of `x: [N, Cin, H, W]` on `g`.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var) -> Result<LanTrace> {
        self.check_input_shape(g.shape(x))?;
        let cfg = &self.config;
        let store = &self.params;
        let settings = &cfg.attention;
        let block =
            |g: &mut Graph<T>, i: usize, v: Var| lab_forward(g, store, &lab_prefix(i), &cfg.labs[i], settings, v);

        let x0 = conv_layer(g, store, "shallow", x, 1)?;
        let e1 = block(g, 0, x0)?;
        let e2 = block(g, 1, e1)?;
        let e3 = block(g, 2, e2)?;
        let b = block(g, 3, e3)?;
        let mut d1 = block(g, 4, b)?;
        if cfg.skip_connections {
            d1 = g.add(d1, e2)?;
        }
        let mut d2 = block(g, 5, d1)?;
        if cfg.skip_connections {
            d2 = g.add(d2, e1)?;
        }
        let d3 = block(g, 6, d2)?;
        let deep = if cfg.global_residual { g.add(d3, x0)? } else { d3 };
        let restored = conv_layer(g, store, "restore", deep, 1)?;
        let out = g.pixel_shuffle(restored, cfg.upscale)?;
        Ok(LanTrace {
            shallow: x0,
            encoder: [e1, e2, e3],
            bottleneck: b,
            decoder: [d1, d2, d3],
            deep,
            out,
        })
    }

    /// Forward pass without gradient bookkeeping for the caller.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let trace = self.forward_graph(&mut g, input)?;
        Ok(g.value(trace.out).clone())
    }
}

pub fn lan_forward<T: Element>(model: &LanModel<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    model.forward(x)
}

pub fn param_count<T: Element>(model: &LanModel<T>) -> usize {
    model.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::network::config::{ATTENTION_ARMS, DESIGN_ARMS};

    fn probe(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(shape.to_vec(), 0.0, 1.0, &mut rng)
    }

    #[test]
    fn paper_presets_match_published_size() {
        let rgb = build_lan::<f32>(&LanConfig::preset("paper-rgb").unwrap()).unwrap();
        let bayer = build_lan::<f32>(&LanConfig::preset("paper-bayer").unwrap()).unwrap();
        assert_eq!(rgb.param_count(), 1_483_163);
        assert_eq!(bayer.param_count(), 1_484_522);
        for (m, target) in [(&rgb, 1.49e6), (&bayer, 1.48e6)] {
            let rel = (m.param_count() as f64 - target).abs() / target;
            assert!(rel < 0.15, "{rel}");
        }
    }

    #[test]
    fn single_conv_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (w, b) = conv_params::<f64, _>(8, 3, 3, &mut rng);
        assert_eq!(w.numel() + b.numel(), 224);
    }

    #[test]
    fn equal_seeds_give_identical_registries() {
        let cfg = LanConfig::preset("tiny").unwrap().with_seed(9);
        let a = build_lan::<f32>(&cfg).unwrap();
        let b = build_lan::<f32>(&cfg).unwrap();
        assert_eq!(a, b);
        let c = build_lan::<f32>(&cfg.clone().with_seed(10)).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn rgb_and_bayer_output_shapes() {
        let rgb = build_lan::<f32>(&LanConfig::preset("tiny").unwrap()).unwrap();
        let x = probe([1, 3, 64, 64], 1).cast();
        assert_eq!(rgb.forward(&x).unwrap().shape(), &[1, 3, 64, 64]);

        let mut cfg = LanConfig::preset("tiny").unwrap();
        cfg.in_channels = 4;
        cfg.upscale = 2;
        let bayer = build_lan::<f32>(&cfg).unwrap();
        let x = probe([1, 4, 64, 64], 1).cast();
        assert_eq!(bayer.forward(&x).unwrap().shape(), &[1, 3, 128, 128]);
    }

    #[test]
    fn indivisible_extent_is_rejected() {
        let m = build_lan::<f64>(&LanConfig::preset("tiny").unwrap()).unwrap();
        let err = m.forward(&probe([1, 3, 20, 16], 0)).unwrap_err().to_string();
        assert!(err.contains("multiples of 8"), "{err}");
    }

    #[test]
    fn down2_halves_extent() {
        let m = build_lan::<f64>(&LanConfig::preset("tiny").unwrap()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(probe([1, 3, 16, 24], 2));
        let t = m.forward_graph(&mut g, x).unwrap();
        assert_eq!(g.shape(t.encoder[0]), &[1, 8, 8, 12]);
        assert_eq!(g.shape(t.encoder[2]), &[1, 32, 2, 3]);
        // skip additions are shape-valid at every level
        assert_eq!(g.shape(t.decoder[0]), g.shape(t.encoder[1]));
        assert_eq!(g.shape(t.decoder[1]), g.shape(t.encoder[0]));
        assert_eq!(g.shape(t.decoder[2]), g.shape(t.shallow));
    }

    #[test]
    fn zero_body_block_is_pure_residual() {
        let cfg = LanConfig::preset("tiny").unwrap();
        let mut m = build_lan::<f64>(&cfg).unwrap();
        for (name, t) in m.params.iter_mut() {
            if name.contains(".conv") {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        }
        let settings = cfg.attention;
        let x = probe([1, 32, 4, 4], 3);
        // bottleneck: identity residual
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = lab_forward(&mut g, &m.params, "labs.3", &cfg.labs[3], &settings, xv).unwrap();
        assert!(g.value(y).max_abs_diff(&x) == 0.0);
        // decoder: upsample + projection
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = lab_forward(&mut g, &m.params, "labs.4", &cfg.labs[4], &settings, xv).unwrap();
        let up = crate::engine::kernels::upsample_nearest(&x, 2).unwrap();
        let proj = crate::engine::kernels::conv2d(
            &up,
            m.params.get("labs.4.proj.weight").unwrap(),
            Some(m.params.get("labs.4.proj.bias").unwrap()),
            1,
            0,
        )
        .unwrap();
        assert!(g.value(y).max_abs_diff(&proj) < 1e-14);
    }

    #[test]
    fn global_residual_path_is_live() {
        let cfg = LanConfig::preset("tiny").unwrap();
        let mut m = build_lan::<f64>(&cfg).unwrap();
        for (name, t) in m.params.iter_mut() {
            if name.starts_with("labs.") {
                *t = Tensor::zeros(t.shape().to_vec());
            }
        }
        let x = probe([1, 3, 16, 16], 4);
        let y = m.forward(&x).unwrap();
        let p = |n: &str| m.params.get(n).unwrap();
        let shallow = crate::engine::kernels::conv2d(&x, p("shallow.weight"), Some(p("shallow.bias")), 1, 1).unwrap();
        let expect =
            crate::engine::kernels::conv2d(&shallow, p("restore.weight"), Some(p("restore.bias")), 1, 1).unwrap();
        assert!(y.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn ablation_arms_build_and_differentiate() {
        let base = LanConfig::preset("tiny").unwrap();
        for arm in DESIGN_ARMS.iter().chain(ATTENTION_ARMS.iter()) {
            let m = build_lan::<f64>(&arm.apply(&base)).unwrap();
            let has_lasa = m.params.names().any(|n| n.contains(".attn.qkv"));
            assert_eq!(has_lasa, arm.attention == AttentionKind::Lasa, "{}", arm.name);
            let mut g = Graph::new();
            let x = g.constant(probe([1, 3, 16, 16], 5));
            let out = m.forward_graph(&mut g, x).unwrap().out;
            let loss = g.mean(out).unwrap();
            let grads = g.backward(loss).unwrap();
            assert_eq!(grads.params().count(), m.params.len(), "{}", arm.name);
        }
    }

    #[test]
    fn default_init_is_finite_on_unit_inputs() {
        let m = build_lan::<f32>(&LanConfig::preset("desk").unwrap()).unwrap();
        let y = m.forward(&probe([1, 3, 32, 32], 6).cast()).unwrap();
        assert!(y.all_finite());
    }
}
