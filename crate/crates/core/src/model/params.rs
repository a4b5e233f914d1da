use rand::Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed;

const INIT_STD: f64 = 0.02;
/// Initial retrieval temperature.
pub const INIT_TAU: f64 = 0.07;
/// Lower clamp on the temperature; the upper clamp is 1.
pub const MIN_TAU: f64 = 1e-3;

/// Feed-forward expert owned by one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Expert {
    Vision,
    Language,
    VisionLanguage,
}

impl Expert {
    pub const ALL: [Expert; 3] = [Expert::Vision, Expert::Language, Expert::VisionLanguage];

    pub fn name(self) -> &'static str {
        match self {
            Expert::Vision => "vision",
            Expert::Language => "language",
            Expert::VisionLanguage => "vl",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ExpertIds {
    pub norm_gain: usize,
    pub norm_bias: usize,
    pub fc1_w: usize,
    pub fc1_b: usize,
    pub fc2_w: usize,
    pub fc2_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIds {
    pub norm_gain: usize,
    pub norm_bias: usize,
    pub q_w: usize,
    pub q_b: usize,
    pub k_w: usize,
    pub k_b: usize,
    pub v_w: usize,
    pub v_b: usize,
    pub o_w: usize,
    pub o_b: usize,
    experts: [Option<ExpertIds>; 3],
}

impl LayerIds {
    pub fn expert(&self, e: Expert) -> Option<&ExpertIds> {
        self.experts[e.index()].as_ref()
    }
}

/// Index of every parameter tensor in [`Model::params`].
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub text_embed: usize,
    pub text_pos: usize,
    pub patch_w: usize,
    pub patch_b: usize,
    pub pos_row: usize,
    pub pos_col: usize,
    pub layers: Vec<LayerIds>,
    pub final_gain: usize,
    pub final_bias: usize,
    pub proj_image: usize,
    pub proj_text: usize,
    pub log_tau: usize,
}

enum Init {
    Normal,
    Ones,
    Zeros,
    Value(f64),
}

struct Builder {
    specs: Vec<(String, Vec<usize>, Init)>,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push((name.into(), shape, init));
        self.specs.len() - 1
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Builder) {
    let (d, f, g) = (cfg.hidden, cfg.ffn_hidden, cfg.grid());
    let mut b = Builder { specs: Vec::new() };
    let text_embed = b.add("text.embed", vec![cfg.vocab_size, d], Init::Normal);
    let text_pos = b.add("text.pos", vec![cfg.max_text_len, d], Init::Normal);
    let patch_w = b.add("image.patch.weight", vec![cfg.patch_dim(), d], Init::Normal);
    let patch_b = b.add("image.patch.bias", vec![d], Init::Zeros);
    let pos_row = b.add("image.pos_row", vec![g, d], Init::Normal);
    let pos_col = b.add("image.pos_col", vec![g, d], Init::Normal);
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = format!("layers.{l}");
        let lin = |b: &mut Builder, n: &str| {
            (
                b.add(format!("{p}.attn.{n}.weight"), vec![d, d], Init::Normal),
                b.add(format!("{p}.attn.{n}.bias"), vec![d], Init::Zeros),
            )
        };
        let norm_gain = b.add(format!("{p}.attn.norm.gain"), vec![d], Init::Ones);
        let norm_bias = b.add(format!("{p}.attn.norm.bias"), vec![d], Init::Zeros);
        let (q_w, q_b) = lin(&mut b, "q");
        let (k_w, k_b) = lin(&mut b, "k");
        let (v_w, v_b) = lin(&mut b, "v");
        let (o_w, o_b) = lin(&mut b, "o");
        let mut experts = [None; 3];
        for e in Expert::ALL {
            if e == Expert::VisionLanguage && !cfg.has_vl_expert(l) {
                continue;
            }
            let q = format!("{p}.ffn.{}", e.name());
            experts[e.index()] = Some(ExpertIds {
                norm_gain: b.add(format!("{q}.norm.gain"), vec![d], Init::Ones),
                norm_bias: b.add(format!("{q}.norm.bias"), vec![d], Init::Zeros),
                fc1_w: b.add(format!("{q}.fc1.weight"), vec![d, f], Init::Normal),
                fc1_b: b.add(format!("{q}.fc1.bias"), vec![f], Init::Zeros),
                fc2_w: b.add(format!("{q}.fc2.weight"), vec![f, d], Init::Normal),
                fc2_b: b.add(format!("{q}.fc2.bias"), vec![d], Init::Zeros),
            });
        }
        layers.push(LayerIds {
            norm_gain,
            norm_bias,
            q_w,
            q_b,
            k_w,
            k_b,
            v_w,
            v_b,
            o_w,
            o_b,
            experts,
        });
    }
    let final_gain = b.add("final_norm.gain", vec![d], Init::Ones);
    let final_bias = b.add("final_norm.bias", vec![d], Init::Zeros);
    let proj_image = b.add("proj.image.weight", vec![d, cfg.proj_dim], Init::Normal);
    let proj_text = b.add("proj.text.weight", vec![d, cfg.proj_dim], Init::Normal);
    let log_tau = b.add("retrieval.log_tau", vec![1], Init::Value(INIT_TAU.ln()));
    let layout = Layout {
        text_embed,
        text_pos,
        patch_w,
        patch_b,
        pos_row,
        pos_col,
        layers,
        final_gain,
        final_bias,
        proj_image,
        proj_text,
        log_tau,
    };
    (layout, b)
}

/// Encoder weights plus the configuration they were built for.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    pub(crate) layout: Layout,
}

impl Model {
    /// Fresh weights drawn from the "init" sub-stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(&config);
        let mut rng = seed::substream(seed, "init");
        let mut names = Vec::with_capacity(builder.specs.len());
        let mut params = Vec::with_capacity(builder.specs.len());
        for (name, shape, init) in builder.specs {
            let t = match init {
                Init::Normal => Tensor::randn(shape, INIT_STD, &mut rng),
                Init::Ones => Tensor::filled(shape, 1.0),
                Init::Zeros => Tensor::zeros(shape),
                Init::Value(v) => Tensor::filled(shape, v),
            };
            names.push(name);
            params.push(t);
        }
        Ok(Model {
            config,
            names,
            params,
            layout,
        })
    }

    /// Assembles a model from named tensors, which must match the layout of
    /// `config` exactly (same names, same order, same shapes).
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, builder) = build_layout(&config);
        let expected: Vec<&str> = builder.specs.iter().map(|s| s.0.as_str()).collect();
        let found: Vec<&str> = named.iter().map(|s| s.0.as_str()).collect();
        if expected != found {
            let mut diff: Vec<String> = expected
                .iter()
                .filter(|n| !found.contains(n))
                .chain(found.iter().filter(|n| !expected.contains(n)))
                .map(|s| s.to_string())
                .collect();
            if diff.is_empty() {
                diff.push("(entry order)".into());
            }
            return Err(Error::NameMismatch(diff));
        }
        for ((name, shape, _), (_, t)) in builder.specs.iter().zip(&named) {
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        let (names, params) = named.into_iter().unzip();
        Ok(Model {
            config,
            names,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Current retrieval temperature.
    pub fn tau(&self) -> f64 {
        self.params[self.layout.log_tau].item().exp()
    }

    /// Projects the temperature back into `[MIN_TAU, 1]`.
    pub fn clamp_tau(&mut self) {
        let v = &mut self.params[self.layout.log_tau].data_mut()[0];
        *v = v.clamp(MIN_TAU.ln(), 0.0);
    }

    /// Parameter indices belonging to one expert across all layers.
    pub fn expert_param_indices(&self, expert: Expert) -> Vec<usize> {
        self.layout
            .layers
            .iter()
            .filter_map(|l| l.expert(expert))
            .flat_map(|e| [e.norm_gain, e.norm_bias, e.fc1_w, e.fc1_b, e.fc2_w, e.fc2_b])
            .collect()
    }

    /// Named tensors in layout order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    /// Adds `N(0, std)` noise to one parameter; used by tests.
    #[doc(hidden)]
    pub fn jitter(&mut self, name: &str, std: f64, rng: &mut impl Rng) {
        if let Some(i) = self.index_of(name) {
            let shape = self.params[i].shape().to_vec();
            let noise = Tensor::randn(shape, std, rng);
            for (p, n) in self.params[i].data_mut().iter_mut().zip(noise.data()) {
                *p += n;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_matches_closed_form() {
        for cfg in [ModelConfig::desk(287), ModelConfig::micro(40)] {
            let m = Model::new(cfg, 1).unwrap();
            assert_eq!(m.num_params(), cfg.param_count());
        }
    }

    #[test]
    fn names_are_unique() {
        let m = Model::new(ModelConfig::desk(50), 0).unwrap();
        let mut n = m.names().to_vec();
        n.sort();
        n.dedup();
        assert_eq!(n.len(), m.names().len());
        assert!(m.param("layers.3.ffn.vl.fc1.weight").is_some());
        assert!(m.param("layers.0.ffn.vl.fc1.weight").is_none());
    }

    #[test]
    fn init_is_seeded() {
        let a = Model::new(ModelConfig::micro(30), 5).unwrap();
        let b = Model::new(ModelConfig::micro(30), 5).unwrap();
        let c = Model::new(ModelConfig::micro(30), 6).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        assert!((a.tau() - INIT_TAU).abs() < 1e-12);
    }

    #[test]
    fn from_named_rejects_mismatches() {
        let m = Model::new(ModelConfig::micro(30), 0).unwrap();
        let named: Vec<_> = m.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        assert!(Model::from_named(*m.config(), named.clone()).is_ok());
        let mut bad = named.clone();
        bad[1].1 = Tensor::zeros(vec![3, 3]);
        assert!(matches!(
            Model::from_named(*m.config(), bad),
            Err(Error::ShapeMismatch { name, .. }) if name == "text.pos"
        ));
        let mut bad = named;
        bad[0].0 = "text.embedding".into();
        match Model::from_named(*m.config(), bad) {
            Err(Error::NameMismatch(d)) => {
                assert_eq!(d, vec!["text.embed".to_string(), "text.embedding".to_string()])
            }
            other => panic!("{other:?}"),
        }
    }
}
