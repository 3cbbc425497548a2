//! The deformable-attention forecaster.
//!
//! An input window `Z in R^{L x (C+1)}` passes through a neighbourhood-aware
//! embedding into `R^{L x d}`, then through a stack of encoder layers whose
//! two branches deform attention across variables and across time, and
//! finally through a recurrent decoder that projects the sequence onto an
//! `H`-step forecast.

mod checkpoint;
mod decoder;
mod embed;
mod encoder;
mod opcount;
mod tdab;
mod vdab;

pub use checkpoint::{load_checkpoint, read_checkpoint_bytes, save_checkpoint, write_checkpoint_bytes};
pub use embed::sinusoidal_pe;
pub use opcount::{measured_op_count, predicted_op_count};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, TensorId};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Architecture hyperparameters. Field names follow the window notation:
/// `l` steps of look-back, `c` exogenous variables, horizon `h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Look-back length L.
    pub l: usize,
    /// Forecast horizon H.
    pub h: usize,
    /// Delay of the endogenous input column.
    pub delta: usize,
    /// Number of exogenous variables (the input width is c+1).
    pub c: usize,
    /// Embedding width.
    pub d: usize,
    /// Variable groups in the embedding, and attention heads across time.
    pub g: usize,
    /// Deformation range: offsets live in [-alpha, alpha].
    pub alpha: f64,
    /// Offset-head convolution kernel size (odd).
    pub k: usize,
    /// Patch length along the look-back axis.
    pub ell: usize,
    /// Patch stride; the tail is zero-padded when it does not divide evenly.
    pub s: usize,
    /// Temporal dilation per encoder layer; the list length sets the depth.
    pub r_per_layer: Vec<usize>,
    /// Probability of skipping a residual branch during training.
    #[serde(default)]
    pub drop_rate: f64,
    /// Negative slope of the decoder perceptron activation.
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
    /// Treat alpha as a trainable scalar instead of a fixed constant.
    #[serde(default)]
    pub learn_alpha: bool,
}

fn default_leaky_slope() -> f64 {
    0.01
}

impl ModelConfig {
    pub fn n_layers(&self) -> usize {
        self.r_per_layer.len()
    }

    /// Look-back length after zero-padding to a whole number of patches.
    pub fn padded_len(&self) -> usize {
        let l = self.l.max(self.ell);
        let rem = (l - self.ell) % self.s;
        if rem == 0 {
            l
        } else {
            l + self.s - rem
        }
    }

    /// Patches per variable branch.
    pub fn n_patches(&self) -> usize {
        (self.padded_len() - self.ell) / self.s + 1
    }

    /// Rows per temporal patch in layer `j`.
    pub fn kappa(&self, layer: usize) -> usize {
        let r = self.r_per_layer[layer];
        self.l.div_ceil(r)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.l == 0 || self.h == 0 || self.c == 0 || self.d == 0 {
            return fail("l, h, c and d must all be positive".into());
        }
        if self.g == 0 || self.d % self.g != 0 {
            return fail(format!("d={} must divide into g={} groups", self.d, self.g));
        }
        if self.ell == 0 || self.ell > self.l {
            return fail(format!("patch length ell={} must lie in 1..={}", self.ell, self.l));
        }
        if self.s == 0 || self.s > self.ell {
            return fail(format!("stride s={} must lie in 1..=ell={}", self.s, self.ell));
        }
        if self.k % 2 == 0 || self.k == 0 {
            return fail(format!("kernel k={} must be odd", self.k));
        }
        if self.alpha <= 0.0 {
            return fail("alpha must be positive".into());
        }
        if self.r_per_layer.is_empty() {
            return fail("r_per_layer must name at least one layer".into());
        }
        if self.r_per_layer.iter().any(|&r| r == 0 || r > self.l) {
            return fail(format!(
                "every r in {:?} must lie in 1..={}",
                self.r_per_layer, self.l
            ));
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return fail(format!("drop_rate {} must lie in [0, 1)", self.drop_rate));
        }
        if self.leaky_slope <= 0.0 || self.leaky_slope >= 1.0 {
            return fail("leaky_slope must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// Structural variants used by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    #[default]
    Full,
    /// Drop the variable-deformation branch; the temporal branch output
    /// feeds the decoder directly.
    NoVdab,
    /// Drop the temporal-deformation branch.
    NoTdab,
    /// Remove the learned value biases from both attention branches.
    NoPvt,
    /// Replace the grouped embedding with one full-width projection.
    NoNae,
    /// Remove the positional embedding term.
    NoPn,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Full,
        AblationVariant::NoVdab,
        AblationVariant::NoTdab,
        AblationVariant::NoPvt,
        AblationVariant::NoNae,
        AblationVariant::NoPn,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoVdab => "no_vdab",
            AblationVariant::NoTdab => "no_tdab",
            AblationVariant::NoPvt => "no_pvt",
            AblationVariant::NoNae => "no_nae",
            AblationVariant::NoPn => "no_pn",
        }
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {:?}; expected one of {:?}",
                    s,
                    AblationVariant::ALL.map(|v| v.name())
                ))
            })
    }
}

/// Named parameter tensors in a stable (sorted) order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    map: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t.with_grad());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }
}

/// Whether a forward pass may drop residual branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call forward settings.
#[derive(Debug, Clone)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub drop_rate: f64,
    /// Seed of the branch-drop stream for this pass.
    pub drop_seed: u64,
    /// Capture intermediate values for inspection.
    pub trace: bool,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            drop_rate: 0.0,
            drop_seed: 0,
            trace: false,
        }
    }

    pub fn train(drop_rate: f64, drop_seed: u64) -> Self {
        ForwardOptions {
            mode: Mode::Train,
            drop_rate,
            drop_seed,
            trace: false,
        }
    }

    pub fn traced() -> Self {
        ForwardOptions {
            trace: true,
            ..ForwardOptions::eval()
        }
    }
}

/// Offsets and intermediates captured from one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub z_e: Option<Tensor>,
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    /// Per patch, the `ell x d` row-offset field of the variable branch.
    pub vdab_row_offsets: Vec<Tensor>,
    pub vdab_col_offsets: Vec<Tensor>,
    /// Per patch and group, the `kappa` temporal offsets.
    pub tdab_offsets: Vec<Vec<Tensor>>,
    pub output: Option<Tensor>,
}

/// Result of building one forward graph.
pub struct ForwardPass {
    /// The `[h]` forecast in normalised units.
    pub output: TensorId,
    /// Tape leaf of every parameter, for reading gradients after backward.
    pub bound: BTreeMap<String, TensorId>,
    pub trace: Option<ForwardTrace>,
}

pub(crate) struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub bound: &'a BTreeMap<String, TensorId>,
    pub cfg: &'a ModelConfig,
    pub variant: AblationVariant,
    drops: Vec<bool>,
    drop_cursor: usize,
    pub trace: Option<ForwardTrace>,
}

impl<'a> Fwd<'a> {
    pub fn p(&self, name: &str) -> Result<TensorId> {
        self.bound
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {:?}", name)))
    }

    pub fn take_drop(&mut self) -> bool {
        let v = self.drops.get(self.drop_cursor).copied().unwrap_or(false);
        self.drop_cursor += 1;
        v
    }

    /// Attention scale plus offset magnitude for this model.
    pub fn alpha(&self) -> Result<AlphaSource> {
        if self.cfg.learn_alpha {
            Ok(AlphaSource::Learned(self.p("alpha")?))
        } else {
            Ok(AlphaSource::Fixed(self.cfg.alpha))
        }
    }
}

pub(crate) enum AlphaSource {
    Fixed(f64),
    Learned(TensorId),
}

impl AlphaSource {
    pub fn scale(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        match self {
            AlphaSource::Fixed(a) => tape.scalar_mul(x, *a),
            AlphaSource::Learned(id) => tape.mul_scalar_t(x, *id),
        }
    }
}

/// The model: a config, a structural variant and the parameter store.
#[derive(Debug, Clone)]
pub struct DeformTime {
    pub config: ModelConfig,
    pub variant: AblationVariant,
    pub params: ParameterStore,
}

impl DeformTime {
    /// Initialise parameters from `seed`. Weight matrices draw uniformly
    /// from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`; offset-head output layers,
    /// bias tables and shifts start at zero so the first pass deforms
    /// nothing; layer-norm gains start at one.
    pub fn init(config: ModelConfig, variant: AblationVariant, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::default();
        build_params(&config, variant, &mut params, &mut rng)?;
        Ok(DeformTime {
            config,
            variant,
            params,
        })
    }

    /// Put every parameter on the tape, keyed by name.
    pub fn bind(&self, tape: &mut Tape) -> BTreeMap<String, TensorId> {
        self.params
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect()
    }

    /// Build the forward graph for one window (`l x (c+1)`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        window: &Tensor,
        opts: &ForwardOptions,
    ) -> Result<ForwardPass> {
        let cfg = &self.config;
        if window.shape() != [cfg.l, cfg.c + 1] {
            return Err(Error::shape(
                "forward",
                format!(
                    "window {:?} does not match configured {}x{}",
                    window.shape(),
                    cfg.l,
                    cfg.c + 1
                ),
            ));
        }
        let bound = self.bind(tape);
        let drops = draw_drops(cfg, self.variant, opts);
        let mut fwd = Fwd {
            tape,
            bound: &bound,
            cfg,
            variant: self.variant,
            drops,
            drop_cursor: 0,
            trace: opts.trace.then(ForwardTrace::default),
        };

        let input = fwd.tape.constant(window.clone());
        let z_e = embed::nae(&mut fwd, input)?;
        if let Some(trace) = fwd.trace.as_mut() {
            trace.z_e = Some(fwd.tape.value(z_e).clone());
        }
        let mut z = z_e;
        for layer in 0..cfg.n_layers() {
            z = encoder::encoder_layer(&mut fwd, layer, z)?;
        }
        let output = decoder::decode(&mut fwd, z)?;
        let trace = fwd.trace.take();
        Ok(ForwardPass {
            output,
            bound,
            trace,
        })
    }

    /// Forward in eval mode, returning the forecast values.
    pub fn predict(&self, window: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pass = self.forward(&mut tape, window, &ForwardOptions::eval())?;
        Ok(tape.value(pass.output).data().to_vec())
    }

    /// Run one layer's variable-deformation branch alone on an `l x d`
    /// state, no residual and no dropping. Lets tests and diagnostics pin
    /// the attention path against reference implementations.
    pub fn vdab_forward(&self, layer: usize, state: &Tensor) -> Result<Tensor> {
        self.branch_forward(layer, state, vdab::vdab)
    }

    /// Same as [`vdab_forward`](Self::vdab_forward) for the temporal branch.
    pub fn tdab_forward(&self, layer: usize, state: &Tensor) -> Result<Tensor> {
        self.branch_forward(layer, state, tdab::tdab)
    }

    fn branch_forward(
        &self,
        layer: usize,
        state: &Tensor,
        branch: fn(&mut Fwd, usize, TensorId) -> Result<TensorId>,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        if layer >= cfg.n_layers() {
            return Err(Error::Config(format!(
                "layer {} out of range, model has {}",
                layer,
                cfg.n_layers()
            )));
        }
        if state.shape() != [cfg.l, cfg.d] {
            return Err(Error::shape(
                "branch_forward",
                format!("state {:?} does not match {}x{}", state.shape(), cfg.l, cfg.d),
            ));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = {
            let mut fwd = Fwd {
                tape: &mut tape,
                bound: &bound,
                cfg,
                variant: self.variant,
                drops: Vec::new(),
                drop_cursor: 0,
                trace: None,
            };
            let s = fwd.tape.constant(state.clone());
            branch(&mut fwd, layer, s)?
        };
        Ok(tape.value(out).clone())
    }

    /// The embedding output `z_e` for one window, eval mode.
    pub fn embed_forward(&self, window: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        if window.shape() != [cfg.l, cfg.c + 1] {
            return Err(Error::shape(
                "embed_forward",
                format!(
                    "window {:?} does not match {}x{}",
                    window.shape(),
                    cfg.l,
                    cfg.c + 1
                ),
            ));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = {
            let mut fwd = Fwd {
                tape: &mut tape,
                bound: &bound,
                cfg,
                variant: self.variant,
                drops: Vec::new(),
                drop_cursor: 0,
                trace: None,
            };
            let w = fwd.tape.constant(window.clone());
            embed::nae(&mut fwd, w)?
        };
        Ok(tape.value(out).clone())
    }
}

impl crate::evaluation::Forecaster for DeformTime {
    fn forecast(&self, sample: &crate::dataprep::WindowSample) -> Result<Vec<f64>> {
        self.predict(&sample.z)
    }

    fn name(&self) -> &str {
        self.variant.name()
    }
}

fn draw_drops(cfg: &ModelConfig, variant: AblationVariant, opts: &ForwardOptions) -> Vec<bool> {
    let branches = match variant {
        AblationVariant::NoVdab | AblationVariant::NoTdab => 1,
        _ => 2,
    };
    let sites = cfg.n_layers() * branches * 2;
    match opts.mode {
        Mode::Eval => vec![false; sites],
        Mode::Train => {
            if opts.drop_rate == 0.0 {
                return vec![false; sites];
            }
            let mut rng = ChaCha8Rng::seed_from_u64(opts.drop_seed);
            (0..sites).map(|_| rng.gen::<f64>() < opts.drop_rate).collect()
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("finite init")
}

fn build_params(
    cfg: &ModelConfig,
    variant: AblationVariant,
    params: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let (l, c, d, g) = (cfg.l, cfg.c, cfg.d, cfg.g);
    let dg = d / g;

    // Embedding.
    if variant == AblationVariant::NoNae {
        params.insert("nae.w", uniform(rng, vec![c + 1, d], c + 1));
        params.insert("nae.b", Tensor::zeros(vec![d]));
    } else {
        let padded = g * (c + 1).div_ceil(g);
        let per_group = padded / g;
        for gi in 0..g {
            params.insert(
                format!("nae.g{}.w", gi),
                uniform(rng, vec![per_group, dg], per_group),
            );
            params.insert(format!("nae.g{}.b", gi), Tensor::zeros(vec![dg]));
        }
    }
    params.insert("nae.ln.gamma", {
        let mut t = Tensor::zeros(vec![d]);
        t.data_mut().fill(1.0);
        t
    });
    params.insert("nae.ln.beta", Tensor::zeros(vec![d]));

    if cfg.learn_alpha {
        params.insert("alpha", Tensor::scalar(cfg.alpha)?);
    }

    let with_vdab = variant != AblationVariant::NoVdab;
    let with_tdab = variant != AblationVariant::NoTdab;
    let with_bias_tables = variant != AblationVariant::NoPvt;

    for j in 0..cfg.n_layers() {
        if with_vdab {
            let p = |s: &str| format!("enc{}.vdab.{}", j, s);
            params.insert(p("w_q"), uniform(rng, vec![d, d], d));
            params.insert(p("w_k"), uniform(rng, vec![d, d], d));
            params.insert(p("w_val"), uniform(rng, vec![d, d], d));
            params.insert(p("w_i"), uniform(rng, vec![d, d], d));
            let n_ell = cfg.n_patches() * cfg.ell;
            params.insert(p("w_out"), uniform(rng, vec![n_ell, l], n_ell));
            if with_bias_tables {
                params.insert(p("p_v"), Tensor::zeros(vec![cfg.ell, d]));
            }
            params.insert(p("off.kernel"), uniform(rng, vec![cfg.k, cfg.k], cfg.k * cfg.k));
            params.insert(p("off.bias"), Tensor::zeros(vec![1]));
            for chan in ["row", "col"] {
                params.insert(p(&format!("off.w_{}", chan)), Tensor::zeros(vec![1]));
                params.insert(p(&format!("off.b_{}", chan)), Tensor::zeros(vec![1]));
            }
            branch_params(params, rng, &format!("enc{}.v", j), l, d);
        }
        if with_tdab {
            let p = |s: &str| format!("enc{}.tdab.{}", j, s);
            let kappa = cfg.kappa(j);
            params.insert(p("u_q"), uniform(rng, vec![d, d], d));
            params.insert(p("u_k"), uniform(rng, vec![d, d], d));
            params.insert(p("u_v"), uniform(rng, vec![d, d], d));
            params.insert(p("w_i"), uniform(rng, vec![d, d], d));
            if with_bias_tables {
                params.insert(p("p_t"), Tensor::zeros(vec![kappa, d]));
            }
            params.insert(
                p("off.kernel"),
                uniform(rng, vec![dg, dg, cfg.k], dg * cfg.k),
            );
            params.insert(p("off.bias"), Tensor::zeros(vec![dg]));
            params.insert(p("off.w1"), Tensor::zeros(vec![dg, 1]));
            params.insert(p("off.b1"), Tensor::zeros(vec![1]));
            branch_params(params, rng, &format!("enc{}.t", j), l, d);
        }
        if with_vdab && with_tdab {
            params.insert(
                format!("enc{}.merge.w", j),
                uniform(rng, vec![2 * d, d], 2 * d),
            );
            params.insert(format!("enc{}.merge.b", j), Tensor::zeros(vec![d]));
        }
    }

    // Decoder: two recurrent layers then the projection head.
    for layer in 0..2 {
        let p = |s: &str| format!("dec.gru{}.{}", layer, s);
        for gate in ["z", "r", "h"] {
            params.insert(p(&format!("w_{}", gate)), uniform(rng, vec![d, d], d));
            params.insert(p(&format!("u_{}", gate)), uniform(rng, vec![d, d], d));
            params.insert(p(&format!("b_{}", gate)), Tensor::zeros(vec![d]));
        }
    }
    params.insert("head.w1", uniform(rng, vec![l, d], l));
    params.insert("head.b1", Tensor::zeros(vec![d]));
    params.insert("head.w2", uniform(rng, vec![d, cfg.h], d));
    params.insert("head.b2", Tensor::zeros(vec![cfg.h]));
    params.insert("head.out.w", uniform(rng, vec![d, 1], d));
    params.insert("head.out.b", Tensor::zeros(vec![1]));
    Ok(())
}

fn branch_params(params: &mut ParameterStore, rng: &mut ChaCha8Rng, prefix: &str, _l: usize, d: usize) {
    params.insert(format!("{}.ln.gamma", prefix), {
        let mut t = Tensor::zeros(vec![d]);
        t.data_mut().fill(1.0);
        t
    });
    params.insert(format!("{}.ln.beta", prefix), Tensor::zeros(vec![d]));
    params.insert(format!("{}.mlp.w1", prefix), uniform(rng, vec![d, d], d));
    params.insert(format!("{}.mlp.b1", prefix), Tensor::zeros(vec![d]));
    params.insert(format!("{}.mlp.w2", prefix), uniform(rng, vec![d, d], d));
    params.insert(format!("{}.mlp.b2", prefix), Tensor::zeros(vec![d]));
}
