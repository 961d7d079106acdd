//! End-to-end sequence models: embedding → fixed-point block stack → head.
//!
//! Three model kinds share the pipeline: the matrix-state layer, the
//! vector-state layer, and the diagonal baseline (identity mixer, one
//! iteration). Forward solving runs untaped; training re-records only the
//! trailing iterations of each layer on a per-sequence tape.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::autodiff::{Arr, Engine, Eval, Tape, Var};
use crate::fixed_point::{self, BatchStep, FixedPointConfig, SeqState};
use crate::fp_mamba::{
    self, BoundFpMamba, FpMambaDims, FpMambaParams, MambaBatchStep,
};
use crate::mixers::{
    BoundMixerWeights, MixerSpec, MixerVariant, MixerWeights,
};
use crate::numerics::{Mat, VecD};
use crate::scan::{fp_iteration_step, BoundGatedDiagonal, GatedDiagonalParams, ScanMode};
use crate::tasks::SequenceBatch;
use crate::train::{cross_entropy_masked, TrainConfig};
use crate::{FpError, Result};

pub fn normal_sample(rng: &mut (impl Rng + ?Sized)) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

fn gauss_mat(rng: &mut (impl Rng + ?Sized), rows: usize, cols: usize, scale: f64) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.data.iter_mut() {
        *v = normal_sample(rng) * scale;
    }
    m
}

// ---------------------------------------------------------------------------
// Parameter traversal.
// ---------------------------------------------------------------------------

pub enum ArrView<'a> {
    M(&'a Mat),
    V(&'a VecD),
    S(&'a f64),
}

pub enum ArrViewMut<'a> {
    M(&'a mut Mat),
    V(&'a mut VecD),
    S(&'a mut f64),
}

impl ArrView<'_> {
    pub fn data(&self) -> &[f64] {
        match self {
            ArrView::M(m) => &m.data,
            ArrView::V(v) => &v.data,
            ArrView::S(s) => std::slice::from_ref(s),
        }
    }
    pub fn dims(&self) -> Vec<usize> {
        match self {
            ArrView::M(m) => vec![m.rows, m.cols],
            ArrView::V(v) => vec![v.dim()],
            ArrView::S(_) => vec![1],
        }
    }
    pub fn to_arr(&self) -> Arr {
        match self {
            ArrView::M(m) => Arr::M((*m).clone()),
            ArrView::V(v) => Arr::V((*v).clone()),
            ArrView::S(s) => Arr::scalar(**s),
        }
    }
}

impl ArrViewMut<'_> {
    pub fn data_mut(&mut self) -> &mut [f64] {
        match self {
            ArrViewMut::M(m) => &mut m.data,
            ArrViewMut::V(v) => &mut v.data,
            ArrViewMut::S(s) => std::slice::from_mut(s),
        }
    }
}

/// Canonical array traversal; the order must match the engine bind order
/// (checked by a unit test).
pub trait VisitArrays {
    fn for_each(&self, f: &mut dyn FnMut(String, ArrView<'_>));
    fn for_each_mut(&mut self, f: &mut dyn FnMut(String, ArrViewMut<'_>));
}

impl VisitArrays for MixerWeights {
    fn for_each(&self, f: &mut dyn FnMut(String, ArrView<'_>)) {
        match self {
            MixerWeights::Reflections(refls) => {
                for (i, r) in refls.iter().enumerate() {
                    f(format!("refl{i}.w_u_x"), ArrView::M(&r.w_u_x));
                    f(format!("refl{i}.w_u_y"), ArrView::M(&r.w_u_y));
                    f(format!("refl{i}.w_alpha_x"), ArrView::V(&r.w_alpha_x));
                    f(format!("refl{i}.w_alpha_y"), ArrView::V(&r.w_alpha_y));
                    f(format!("refl{i}.b_alpha"), ArrView::S(&r.b_alpha));
                }
            }
            MixerWeights::Kronecker(factors) => {
                for (n, k) in factors.iter().enumerate() {
                    f(format!("k{n}.w_k_x"), ArrView::M(&k.w_k_x));
                    f(format!("k{n}.w_k_y"), ArrView::M(&k.w_k_y));
                    f(format!("k{n}.b_k"), ArrView::V(&k.b_k));
                }
            }
        }
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(String, ArrViewMut<'_>)) {
        match self {
            MixerWeights::Reflections(refls) => {
                for (i, r) in refls.iter_mut().enumerate() {
                    f(format!("refl{i}.w_u_x"), ArrViewMut::M(&mut r.w_u_x));
                    f(format!("refl{i}.w_u_y"), ArrViewMut::M(&mut r.w_u_y));
                    f(format!("refl{i}.w_alpha_x"), ArrViewMut::V(&mut r.w_alpha_x));
                    f(format!("refl{i}.w_alpha_y"), ArrViewMut::V(&mut r.w_alpha_y));
                    f(format!("refl{i}.b_alpha"), ArrViewMut::S(&mut r.b_alpha));
                }
            }
            MixerWeights::Kronecker(factors) => {
                for (n, k) in factors.iter_mut().enumerate() {
                    f(format!("k{n}.w_k_x"), ArrViewMut::M(&mut k.w_k_x));
                    f(format!("k{n}.w_k_y"), ArrViewMut::M(&mut k.w_k_y));
                    f(format!("k{n}.b_k"), ArrViewMut::V(&mut k.b_k));
                }
            }
        }
    }
}

fn mixer_leaf_vars(b: &BoundMixerWeights<Var>, out: &mut Vec<Var>) {
    match b {
        BoundMixerWeights::Reflections(refls) => {
            for r in refls {
                out.extend([r.w_u_x, r.w_u_y, r.w_alpha_x, r.w_alpha_y, r.b_alpha]);
            }
        }
        BoundMixerWeights::Kronecker(factors) => {
            for k in factors {
                out.extend([k.w_k_x, k.w_k_y, k.b_k]);
            }
        }
    }
}

impl VisitArrays for FpMambaParams {
    fn for_each(&self, f: &mut dyn FnMut(String, ArrView<'_>)) {
        f("omega".into(), ArrView::M(&self.omega));
        f("w_delta".into(), ArrView::M(&self.w_delta));
        f("b_delta".into(), ArrView::V(&self.b_delta));
        f("w_b_x".into(), ArrView::M(&self.w_b_x));
        f("w_b_y".into(), ArrView::M(&self.w_b_y));
        f("w_c_x".into(), ArrView::M(&self.w_c_x));
        f("w_c_y".into(), ArrView::M(&self.w_c_y));
        f("w_g".into(), ArrView::M(&self.w_g));
        f("d_skip".into(), ArrView::V(&self.d_skip));
        f("in_proj".into(), ArrView::M(&self.in_proj));
        f("out_proj".into(), ArrView::M(&self.out_proj));
        self.mixer
            .for_each(&mut |name, view| f(format!("mixer.{name}"), view));
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(String, ArrViewMut<'_>)) {
        f("omega".into(), ArrViewMut::M(&mut self.omega));
        f("w_delta".into(), ArrViewMut::M(&mut self.w_delta));
        f("b_delta".into(), ArrViewMut::V(&mut self.b_delta));
        f("w_b_x".into(), ArrViewMut::M(&mut self.w_b_x));
        f("w_b_y".into(), ArrViewMut::M(&mut self.w_b_y));
        f("w_c_x".into(), ArrViewMut::M(&mut self.w_c_x));
        f("w_c_y".into(), ArrViewMut::M(&mut self.w_c_y));
        f("w_g".into(), ArrViewMut::M(&mut self.w_g));
        f("d_skip".into(), ArrViewMut::V(&mut self.d_skip));
        f("in_proj".into(), ArrViewMut::M(&mut self.in_proj));
        f("out_proj".into(), ArrViewMut::M(&mut self.out_proj));
        self.mixer
            .for_each_mut(&mut |name, view| f(format!("mixer.{name}"), view));
    }
}

fn mamba_leaf_vars(b: &BoundFpMamba<Var>) -> Vec<Var> {
    let mut out = vec![
        b.omega, b.w_delta, b.b_delta, b.w_b_x, b.w_b_y, b.w_c_x, b.w_c_y, b.w_g, b.d_skip,
        b.in_proj, b.out_proj,
    ];
    mixer_leaf_vars(&b.mixer, &mut out);
    out
}

impl VisitArrays for GatedDiagonalParams {
    fn for_each(&self, f: &mut dyn FnMut(String, ArrView<'_>)) {
        f("w_lambda".into(), ArrView::M(&self.w_lambda));
        f("b_lambda".into(), ArrView::V(&self.b_lambda));
        f("b_input".into(), ArrView::M(&self.b_input));
        self.mixer
            .for_each(&mut |name, view| f(format!("mixer.{name}"), view));
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(String, ArrViewMut<'_>)) {
        f("w_lambda".into(), ArrViewMut::M(&mut self.w_lambda));
        f("b_lambda".into(), ArrViewMut::V(&mut self.b_lambda));
        f("b_input".into(), ArrViewMut::M(&mut self.b_input));
        self.mixer
            .for_each_mut(&mut |name, view| f(format!("mixer.{name}"), view));
    }
}

fn vector_leaf_vars(b: &BoundGatedDiagonal<Var>) -> Vec<Var> {
    let mut out = vec![b.w_lambda, b.b_lambda, b.b_input];
    mixer_leaf_vars(&b.mixer, &mut out);
    out
}

// ---------------------------------------------------------------------------
// Model configuration and construction.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    FpMamba,
    FpRnnVector,
    DiagonalBaseline,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub vocab: usize,
    pub d_model: usize,
    pub expansion: usize,
    pub d_state: usize,
    pub n_layers: usize,
    pub mixer_variant: MixerVariant,
    pub rank_r: usize,
    /// Shifted-output dependence of the mixer coefficient maps.
    pub mixer_hidden_dependence: bool,
    /// Shifted-output dependence of the key/query maps b, c.
    pub y_dep_bc: bool,
    pub contraction_eps: f64,
    pub alpha_rescale: bool,
    pub scan_mode: ScanMode,
}

impl ModelConfig {
    pub fn d_inner(&self) -> usize {
        match self.kind {
            ModelKind::FpRnnVector => self.d_model,
            _ => self.d_model * self.expansion,
        }
    }

    pub fn mixer_spec(&self) -> MixerSpec {
        MixerSpec {
            variant: self.mixer_variant,
            rank_r: self.rank_r,
            d_inner: self.d_inner(),
            hidden_dependence: self.mixer_hidden_dependence,
            contraction_eps: self.contraction_eps,
            exact_eigen_normalization: false,
            alpha_rescale: self.alpha_rescale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.d_model == 0 || self.n_layers == 0 {
            return Err(FpError::InvalidConfig("bad model dimensions".into()));
        }
        if self.kind != ModelKind::DiagonalBaseline {
            self.mixer_spec().validate()?;
        }
        Ok(())
    }
}

pub fn init_fp_mamba_params(
    dims: &FpMambaDims,
    mixer_spec: &MixerSpec,
    y_dep_bc: bool,
    identity_mixer: bool,
    rng: &mut (impl Rng + ?Sized),
) -> FpMambaParams {
    let di = dims.d_inner();
    let ds = dims.d_state;
    let dm = dims.d_model;
    let si = 1.0 / (di as f64).sqrt();
    let sm = 1.0 / (dm as f64).sqrt();

    // exp(ω) log-uniform over [1e-3, 1e-1]; softplus(b_Δ) log-uniform over
    // [0.01, 0.1].
    let mut omega = Mat::zeros(ds, di);
    for v in omega.data.iter_mut() {
        let u = rng.random::<f64>() * 2.0 - 3.0; // exponent in [-3, -1]
        *v = (10.0f64.powf(u)).ln();
    }
    let mut b_delta = VecD::zeros(di);
    for v in b_delta.data.iter_mut() {
        let u = rng.random::<f64>() * 1.0 - 2.0; // exponent in [-2, -1]
        let s = 10.0f64.powf(u);
        *v = (s.exp() - 1.0).ln();
    }

    let mut mixer = if identity_mixer {
        MixerWeights::Reflections(Vec::new())
    } else {
        crate::mixers::init_mixer_weights(mixer_spec, rng)
    };
    if !mixer_spec.hidden_dependence {
        zero_mixer_y_paths(&mut mixer);
    }

    let mut p = FpMambaParams {
        dims: *dims,
        omega,
        w_delta: gauss_mat(rng, di, di, si),
        b_delta,
        w_b_x: gauss_mat(rng, ds, di, si),
        w_b_y: gauss_mat(rng, ds, di, si),
        w_c_x: gauss_mat(rng, ds, di, si),
        w_c_y: gauss_mat(rng, ds, di, si),
        w_g: gauss_mat(rng, di, di, si),
        d_skip: VecD::from(vec![1.0; di]),
        in_proj: gauss_mat(rng, di, dm, sm),
        out_proj: gauss_mat(rng, dm, di, si),
        mixer_spec: mixer_spec.clone(),
        mixer,
        y_dep_bc,
        identity_mixer,
        skip_on_adjusted_input: true,
        scan_mode: ScanMode::Parallel,
    };
    if !y_dep_bc {
        p.w_b_y = Mat::zeros(ds, di);
        p.w_c_y = Mat::zeros(ds, di);
    }
    p
}

fn zero_mixer_y_paths(mixer: &mut MixerWeights) {
    match mixer {
        MixerWeights::Reflections(refls) => {
            for r in refls.iter_mut() {
                r.w_u_y = Mat::zeros(r.w_u_y.rows, r.w_u_y.cols);
                r.w_alpha_y = VecD::zeros(r.w_alpha_y.dim());
            }
        }
        MixerWeights::Kronecker(factors) => {
            for k in factors.iter_mut() {
                k.w_k_y = Mat::zeros(k.w_k_y.rows, k.w_k_y.cols);
            }
        }
    }
}

pub fn init_vector_params(
    d: usize,
    mixer_spec: &MixerSpec,
    hidden_dependence: bool,
    rng: &mut (impl Rng + ?Sized),
) -> GatedDiagonalParams {
    let s = 1.0 / (d as f64).sqrt();
    let mut spec = mixer_spec.clone();
    // The vector model feeds x + h through the x-path weights; the separate
    // y-path stays off.
    spec.hidden_dependence = false;
    GatedDiagonalParams {
        d,
        w_lambda: gauss_mat(rng, d, d, s),
        b_lambda: VecD::from(vec![2.0; d]),
        b_input: gauss_mat(rng, d, d, s),
        mixer: crate::mixers::init_mixer_weights(&spec, rng),
        mixer_spec: spec,
        input_gate: true,
        hidden_dependence,
        coefficient_override: None,
        scan_mode: ScanMode::Parallel,
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Mamba(FpMambaParams),
    Vector(GatedDiagonalParams),
}

enum LayerBound<T> {
    Mamba(BoundFpMamba<T>),
    Vector(BoundGatedDiagonal<T>),
}

#[derive(Clone)]
pub struct SequenceModel {
    pub cfg: ModelConfig,
    pub embedding: Mat, // vocab × d_model
    pub layers: Vec<Layer>,
    pub head_w: Mat, // vocab × d_model
    pub head_b: VecD,
}

impl SequenceModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dm = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|_| match cfg.kind {
                ModelKind::FpMamba => Layer::Mamba(init_fp_mamba_params(
                    &FpMambaDims {
                        d_model: dm,
                        expansion: cfg.expansion,
                        d_state: cfg.d_state,
                    },
                    &cfg.mixer_spec(),
                    cfg.y_dep_bc,
                    false,
                    &mut rng,
                )),
                ModelKind::DiagonalBaseline => {
                    let mut spec = cfg.mixer_spec();
                    spec.hidden_dependence = false;
                    Layer::Mamba(init_fp_mamba_params(
                        &FpMambaDims {
                            d_model: dm,
                            expansion: cfg.expansion,
                            d_state: cfg.d_state,
                        },
                        &spec,
                        false,
                        true,
                        &mut rng,
                    ))
                }
                ModelKind::FpRnnVector => Layer::Vector(init_vector_params(
                    dm,
                    &cfg.mixer_spec(),
                    cfg.mixer_hidden_dependence,
                    &mut rng,
                )),
            })
            .collect();
        Ok(SequenceModel {
            cfg: cfg.clone(),
            embedding: gauss_mat(&mut rng, cfg.vocab, dm, 1.0),
            layers,
            head_w: gauss_mat(&mut rng, cfg.vocab, dm, 1.0 / (dm as f64).sqrt()),
            head_b: VecD::zeros(cfg.vocab),
        })
    }

    /// The baseline runs a single iteration by definition.
    pub fn ell_max_cap(&self) -> Option<usize> {
        match self.cfg.kind {
            ModelKind::DiagonalBaseline => Some(1),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, v| n += v.data().len());
        n
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::new();
        self.for_each(&mut |_, v| sizes.push(v.data().len()));
        sizes
    }
}

impl VisitArrays for SequenceModel {
    fn for_each(&self, f: &mut dyn FnMut(String, ArrView<'_>)) {
        f("embedding".into(), ArrView::M(&self.embedding));
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Mamba(p) => {
                    p.for_each(&mut |name, v| f(format!("layers.{i}.{name}"), v))
                }
                Layer::Vector(p) => {
                    p.for_each(&mut |name, v| f(format!("layers.{i}.{name}"), v))
                }
            }
        }
        f("head.w".into(), ArrView::M(&self.head_w));
        f("head.b".into(), ArrView::V(&self.head_b));
    }
    fn for_each_mut(&mut self, f: &mut dyn FnMut(String, ArrViewMut<'_>)) {
        f("embedding".into(), ArrViewMut::M(&mut self.embedding));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Mamba(p) => {
                    p.for_each_mut(&mut |name, v| f(format!("layers.{i}.{name}"), v))
                }
                Layer::Vector(p) => {
                    p.for_each_mut(&mut |name, v| f(format!("layers.{i}.{name}"), v))
                }
            }
        }
        f("head.w".into(), ArrViewMut::M(&mut self.head_w));
        f("head.b".into(), ArrViewMut::V(&mut self.head_b));
    }
}

// ---------------------------------------------------------------------------
// Forward solving.
// ---------------------------------------------------------------------------

pub struct LayerSolve {
    pub y_star: Vec<SeqState>,
    pub h_base: Vec<SeqState>,
    pub deltas_tail: Vec<f64>,
    pub ell_star: Vec<usize>,
    pub converged: Vec<bool>,
    pub iters_run: usize,
    pub residual_trace: Vec<f64>,
    pub increment_trace: Vec<f64>,
}

pub struct ForwardOut {
    pub layer_solves: Vec<LayerSolve>,
    /// Block-stack output per sequence per token (d_model).
    pub final_out: Vec<Vec<VecD>>,
    pub ell_max_used: usize,
}

impl ForwardOut {
    /// Per-sequence iteration count: max over layers.
    pub fn seq_ell_star(&self) -> Vec<usize> {
        let batch = self.layer_solves[0].ell_star.len();
        (0..batch)
            .map(|b| {
                self.layer_solves
                    .iter()
                    .map(|l| l.ell_star[b])
                    .max()
                    .unwrap_or(0)
            })
            .collect()
    }
}

struct VectorBatchStep<'p> {
    p: &'p GatedDiagonalParams,
    bp: BoundGatedDiagonal<Arc<Arr>>,
    xs: Vec<Vec<Arc<Arr>>>,
}

impl<'p> VectorBatchStep<'p> {
    fn new(p: &'p GatedDiagonalParams, xs_plain: &[Vec<VecD>]) -> Self {
        let mut e = Eval;
        let bp = p.bind(&mut e);
        let xs = xs_plain
            .iter()
            .map(|seq| seq.iter().map(|v| e.lift(Arr::V(v.clone()))).collect())
            .collect();
        VectorBatchStep { p, bp, xs }
    }
}

impl BatchStep for VectorBatchStep<'_> {
    fn batch(&self) -> usize {
        self.xs.len()
    }
    fn zero_state(&self, seq: usize) -> SeqState {
        (0..self.xs[seq].len())
            .map(|_| Arc::new(Arr::zeros_vec(self.p.d)))
            .collect()
    }
    fn apply(&self, seq: usize, h_prev: &SeqState) -> Result<SeqState> {
        let mut e = Eval;
        Ok(fp_iteration_step(&mut e, self.p, &self.bp, &self.xs[seq], h_prev))
    }
}

impl SequenceModel {
    pub fn embed(&self, tokens: &[u32]) -> Vec<VecD> {
        tokens
            .iter()
            .map(|&t| VecD::from(self.embedding.row(t as usize).to_vec()))
            .collect()
    }

    /// Solve the fixed point of every layer over a batch of token
    /// sequences, untaped.
    pub fn forward_solve(
        &self,
        tokens: &[Vec<u32>],
        fp: &FixedPointConfig,
        keep_last: usize,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<ForwardOut> {
        let mut cfg = *fp;
        if let Some(cap) = self.ell_max_cap() {
            cfg.ell_max = cfg.ell_max.min(cap);
            cfg.sample_ell_max = false;
        }
        let resolved = cfg.resolve_ell_max(rng);
        cfg.ell_max = resolved;
        cfg.sample_ell_max = false;

        let mut block_in: Vec<Vec<VecD>> = tokens.iter().map(|t| self.embed(t)).collect();
        let mut layer_solves = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Mamba(p) => {
                    let xs: Vec<Vec<VecD>> = block_in
                        .iter()
                        .map(|seq| seq.iter().map(|u| p.in_proj.matvec(u)).collect())
                        .collect();
                    let step = MambaBatchStep::new(p, &xs);
                    let res = fixed_point::solve(&step, &cfg, keep_last, None)?;
                    for (b, seq) in block_in.iter_mut().enumerate() {
                        for (t, u) in seq.iter_mut().enumerate() {
                            let y = res.h_star[b][t].as_vec();
                            *u = p.out_proj.matvec(y).add(u);
                        }
                    }
                    layer_solves.push(LayerSolve {
                        y_star: res.h_star,
                        h_base: res.h_base,
                        deltas_tail: res.deltas_tail,
                        ell_star: res.ell_star,
                        converged: res.converged,
                        iters_run: res.iters_run,
                        residual_trace: res.residual_trace,
                        increment_trace: res.increment_trace,
                    });
                }
                Layer::Vector(p) => {
                    let step = VectorBatchStep::new(p, &block_in);
                    let res = fixed_point::solve(&step, &cfg, keep_last, None)?;
                    for (b, seq) in block_in.iter_mut().enumerate() {
                        for (t, u) in seq.iter_mut().enumerate() {
                            *u = res.h_star[b][t].as_vec().clone();
                        }
                    }
                    layer_solves.push(LayerSolve {
                        y_star: res.h_star,
                        h_base: res.h_base,
                        deltas_tail: res.deltas_tail,
                        ell_star: res.ell_star,
                        converged: res.converged,
                        iters_run: res.iters_run,
                        residual_trace: res.residual_trace,
                        increment_trace: res.increment_trace,
                    });
                }
            }
        }
        Ok(ForwardOut {
            layer_solves,
            final_out: block_in,
            ell_max_used: resolved,
        })
    }

    /// Plain logits per sequence per token.
    pub fn logits(&self, fw: &ForwardOut) -> Vec<Vec<VecD>> {
        fw.final_out
            .iter()
            .map(|seq| {
                seq.iter()
                    .map(|o| self.head_w.matvec(o).add(&self.head_b))
                    .collect()
            })
            .collect()
    }

    /// Accuracy, loss and iteration statistics on a batch (untaped).
    pub fn evaluate_batch(
        &self,
        batch: &SequenceBatch,
        fp: &FixedPointConfig,
    ) -> Result<EvalOutcome> {
        let fw = self.forward_solve(&batch.tokens, fp, 0, None)?;
        let logits = self.logits(&fw);
        let mut correct = 0usize;
        let mut total = 0usize;
        let mut loss_sum = 0.0;
        for b in 0..batch.batch() {
            let (loss, _) = cross_entropy_masked(
                &logits[b],
                &batch.targets[b],
                &batch.loss_mask[b],
            )?;
            let n_b = batch.loss_mask[b].iter().filter(|&&m| m).count();
            loss_sum += loss * n_b as f64;
            for t in 0..batch.seq_len() {
                if batch.loss_mask[b][t] {
                    total += 1;
                    let lg = &logits[b][t];
                    let argmax = lg
                        .data
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap();
                    if argmax == batch.targets[b][t] as usize {
                        correct += 1;
                    }
                }
            }
        }
        Ok(EvalOutcome {
            accuracy: correct as f64 / total.max(1) as f64,
            loss: loss_sum / total.max(1) as f64,
            ell_stars: fw.seq_ell_star(),
        })
    }

    /// Batch loss and parameter gradients via per-sequence tapes recording
    /// only the trailing solver iterations of each layer.
    pub fn loss_and_grads(
        &self,
        batch: &SequenceBatch,
        fp: &FixedPointConfig,
        train: &TrainConfig,
        rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<(f64, Vec<Arr>, ForwardOut)> {
        let fw = self.forward_solve(&batch.tokens, fp, train.recorded_steps(), rng)?;
        let (loss, grads) = self.loss_and_grads_with_forward(batch, &fw, true)?;
        Ok((loss, grads, fw))
    }

    /// As [`Self::loss_and_grads`] but recording against an externally
    /// provided solve (the truncated map's gradient check perturbs
    /// parameters while holding the detach points fixed).
    pub fn loss_and_grads_with_forward(
        &self,
        batch: &SequenceBatch,
        fw: &ForwardOut,
        replay_check: bool,
    ) -> Result<(f64, Vec<Arr>)> {
        let total_masked = batch.supervised_positions();
        if total_masked == 0 {
            return Err(FpError::EmptyMask);
        }
        let ce_scale = 1.0 / total_masked as f64;

        let per_seq: Vec<Result<(f64, Vec<Arr>)>> = (0..batch.batch())
            .into_par_iter()
            .map(|b| self.record_sequence(batch, fw, b, ce_scale, replay_check))
            .collect();

        let mut loss = 0.0;
        let mut grads: Option<Vec<Arr>> = None;
        for r in per_seq {
            let (l, g) = r?;
            loss += l;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(g.iter()) {
                        a.add_in_place(b);
                    }
                }
            }
        }
        Ok((loss, grads.expect("nonempty batch")))
    }

    fn record_sequence(
        &self,
        batch: &SequenceBatch,
        fw: &ForwardOut,
        seq: usize,
        ce_scale: f64,
        replay_check: bool,
    ) -> Result<(f64, Vec<Arr>)> {
        let mut tape = Tape::new();
        let emb = tape.lift(Arr::M(self.embedding.clone()));
        let layer_bounds: Vec<LayerBound<Var>> = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Mamba(p) => LayerBound::Mamba(p.bind(&mut tape)),
                Layer::Vector(p) => LayerBound::Vector(p.bind(&mut tape)),
            })
            .collect();
        let head_w = tape.lift(Arr::M(self.head_w.clone()));
        let head_b = tape.lift(Arr::V(self.head_b.clone()));

        let mut leaves = vec![emb];
        for lb in &layer_bounds {
            match lb {
                LayerBound::Mamba(b) => leaves.extend(mamba_leaf_vars(b)),
                LayerBound::Vector(b) => leaves.extend(vector_leaf_vars(b)),
            }
        }
        leaves.push(head_w);
        leaves.push(head_b);

        let tokens = &batch.tokens[seq];
        let mut block_in: Vec<Var> = tokens
            .iter()
            .map(|&t| tape.row(&emb, t as usize))
            .collect();

        for (li, layer) in self.layers.iter().enumerate() {
            let solve = &fw.layer_solves[li];
            match (layer, &layer_bounds[li]) {
                (Layer::Mamba(p), LayerBound::Mamba(bp)) => {
                    let xs: Vec<Var> = block_in
                        .iter()
                        .map(|u| tape.matvec(&bp.in_proj, u))
                        .collect();
                    let cache = fp_mamba::build_x_cache(&mut tape, p, bp, &xs);
                    let mut y: Vec<Var> = solve.h_base[seq]
                        .iter()
                        .map(|a| tape.lift(a.as_ref().clone()))
                        .collect();
                    for &delta in &solve.deltas_tail {
                        let out = fp_mamba::fp_mamba_step(&mut tape, p, bp, &xs, &y, &cache);
                        y = damp_on_tape(&mut tape, out.y, &y, delta);
                    }
                    if replay_check {
                        check_replay(&tape, &y, &solve.y_star[seq])?;
                    }
                    block_in = y
                        .iter()
                        .zip(block_in.iter())
                        .map(|(yv, u)| {
                            let o = tape.matvec(&bp.out_proj, yv);
                            tape.add(&o, u)
                        })
                        .collect();
                }
                (Layer::Vector(p), LayerBound::Vector(bp)) => {
                    let xs = block_in.clone();
                    let mut h: Vec<Var> = solve.h_base[seq]
                        .iter()
                        .map(|a| tape.lift(a.as_ref().clone()))
                        .collect();
                    for &delta in &solve.deltas_tail {
                        let out = fp_iteration_step(&mut tape, p, bp, &xs, &h);
                        h = damp_on_tape(&mut tape, out, &h, delta);
                    }
                    if replay_check {
                        check_replay(&tape, &h, &solve.y_star[seq])?;
                    }
                    block_in = h;
                }
                _ => unreachable!("layer/bound kinds always match"),
            }
        }

        let mut positions = Vec::new();
        for t in 0..tokens.len() {
            if batch.loss_mask[seq][t] {
                let pre = tape.matvec(&head_w, &block_in[t]);
                let logit = tape.add(&pre, &head_b);
                positions.push((logit, batch.targets[seq][t] as usize));
            }
        }
        if positions.is_empty() {
            let zeros = leaves
                .iter()
                .map(|v| tape.value(*v).zeros_like())
                .collect();
            return Ok((0.0, zeros));
        }
        let loss = tape.cross_entropy_sum(&positions, ce_scale);
        let grads = tape.backward_scalar(loss);
        let grad_vec = leaves
            .iter()
            .map(|v| {
                grads[v.0]
                    .clone()
                    .unwrap_or_else(|| tape.value(*v).zeros_like())
            })
            .collect();
        Ok((tape.value(loss).as_scalar(), grad_vec))
    }
}

fn damp_on_tape(tape: &mut Tape, f_vals: Vec<Var>, h_prev: &[Var], delta: f64) -> Vec<Var> {
    if delta == 1.0 {
        return f_vals;
    }
    f_vals
        .iter()
        .zip(h_prev.iter())
        .map(|(f, h)| {
            let a = tape.scale(f, delta);
            let b = tape.scale(h, 1.0 - delta);
            tape.add(&a, &b)
        })
        .collect()
}

fn check_replay(tape: &Tape, recorded: &[Var], expected: &SeqState) -> Result<()> {
    let mut dev = 0.0f64;
    let mut scale = 0.0f64;
    for (v, ex) in recorded.iter().zip(expected.iter()) {
        let got = tape.value(*v);
        for (a, b) in got.data().iter().zip(ex.data().iter()) {
            dev = dev.max((a - b).abs());
            scale = scale.max(b.abs());
        }
    }
    if dev > 1e-8 * scale.max(1.0) {
        return Err(FpError::TapeReplayMismatch { deviation: dev });
    }
    Ok(())
}

pub struct EvalOutcome {
    pub accuracy: f64,
    pub loss: f64,
    pub ell_stars: Vec<usize>,
}

pub fn percentile(values: &[usize], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted: Vec<usize> = values.to_vec();
    sorted.sort_unstable();
    let idx = ((sorted.len() as f64 - 1.0) * q).round() as usize;
    sorted[idx] as f64
}

// ---------------------------------------------------------------------------
// Sequential (token-by-token) inference.
// ---------------------------------------------------------------------------

pub struct SequentialOut {
    /// Per layer: per token fixed-point output.
    pub layer_y: Vec<Vec<VecD>>,
    pub final_out: Vec<VecD>,
}

impl SequenceModel {
    /// Autoregressive evaluation path: per token, the fixed point is solved
    /// with all previous tokens' converged states frozen.
    pub fn sequential_forward(
        &self,
        tokens: &[u32],
        fp: &FixedPointConfig,
    ) -> Result<SequentialOut> {
        let mut cfg = *fp;
        if let Some(cap) = self.ell_max_cap() {
            cfg.ell_max = cfg.ell_max.min(cap);
        }
        let mut block_in = self.embed(tokens);
        let mut layer_y = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Mamba(p) => {
                    let xs: Vec<VecD> = block_in.iter().map(|u| p.in_proj.matvec(u)).collect();
                    let ys = mamba_sequential(p, &xs, &cfg)?;
                    for (u, y) in block_in.iter_mut().zip(ys.iter()) {
                        *u = p.out_proj.matvec(y).add(u);
                    }
                    layer_y.push(ys);
                }
                Layer::Vector(p) => {
                    let hs = vector_sequential(p, &block_in, &cfg)?;
                    block_in = hs.clone();
                    layer_y.push(hs);
                }
            }
        }
        Ok(SequentialOut {
            layer_y,
            final_out: block_in,
        })
    }
}

fn mamba_sequential(
    p: &FpMambaParams,
    xs: &[VecD],
    cfg: &FixedPointConfig,
) -> Result<Vec<VecD>> {
    let mut e = Eval;
    let bp = p.bind(&mut e);
    let ds = p.dims.d_state;
    let di = p.dims.d_inner();
    let mut h_prev = e.lift(Arr::M(Mat::zeros(ds, di)));
    let mut y_prev_tok = e.lift(Arr::zeros_vec(di));
    let mut out = Vec::with_capacity(xs.len());
    for x_plain in xs {
        let x = e.lift(Arr::V(x_plain.clone()));
        let sp = fp_mamba::selective_params(&mut e, p, &bp, &x, &y_prev_tok);
        let gate = {
            let pre = e.matvec(&bp.w_g, &x);
            e.map(crate::autodiff::MapKind::Silu, &pre)
        };
        let coef = if p.identity_mixer {
            crate::mixers::MixerCoef::Identity
        } else if p.mixer_spec.hidden_dependence {
            crate::mixers::coefficients(&mut e, &p.mixer_spec, &bp.mixer, &x, Some(&y_prev_tok))
        } else {
            crate::mixers::coefficients(&mut e, &p.mixer_spec, &bp.mixer, &x, None)
        };
        // One full layer-map evaluation at the current iterate.
        let eval_step = |e: &mut Eval, y_cur: &Arc<Arr>| {
            let xt = fp_mamba::adjusted_input(e, &coef, &x, y_cur);
            let dx = e.hadamard(&sp.delta, &xt);
            let carried = e.hadamard(&sp.lambda, &h_prev);
            let inject = e.outer(&sp.b_bar, &dx);
            let h = e.add(&carried, &inject);
            let contracted = e.matvec_t(&h, &sp.c_bar);
            let skip_src = if p.skip_on_adjusted_input { &xt } else { &x };
            let skip = e.hadamard(&bp.d_skip, skip_src);
            let raw = e.add(&contracted, &skip);
            let gated = e.hadamard(&gate, &raw);
            (e.l2_normalize(&gated, fp_mamba::OUTPUT_NORM_EPS), h)
        };
        // Per-token damped Picard iteration with the same plateau schedule
        // as the batched solver.
        let mut y_cur = e.lift(Arr::zeros_vec(di));
        let mut h_cur = h_prev.clone();
        let mut delta = cfg.damping.delta0;
        let mut best = f64::INFINITY;
        let mut stall = 0usize;
        for _ in 0..cfg.ell_max {
            let (f_val, h) = eval_step(&mut e, &y_cur);
            let y_new = if delta == 1.0 {
                f_val
            } else {
                let a = e.scale(&f_val, delta);
                let b = e.scale(&y_cur, 1.0 - delta);
                e.add(&a, &b)
            };
            let inc = y_new
                .data()
                .iter()
                .zip(y_cur.data().iter())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let scale = y_new.norm_inf().max(fixed_point::RESIDUAL_TINY);
            let residual = inc / scale;
            h_cur = h;
            y_cur = y_new;
            if residual < cfg.tol {
                break;
            }
            if residual < best {
                best = residual;
                stall = 0;
            } else {
                stall += 1;
                if stall >= cfg.damping.patience {
                    delta *= cfg.damping.factor;
                    stall = 0;
                }
            }
        }
        if !y_cur.is_finite() {
            return Err(FpError::NonFinite {
                context: "sequential inference".into(),
            });
        }
        // Matrix state consistent with the settled iterate.
        let (_, h_final) = eval_step(&mut e, &y_cur);
        h_cur = h_final;
        h_prev = h_cur;
        y_prev_tok = y_cur.clone();
        out.push(y_cur.as_vec().clone());
    }
    Ok(out)
}

fn vector_sequential(
    p: &GatedDiagonalParams,
    xs: &[VecD],
    cfg: &FixedPointConfig,
) -> Result<Vec<VecD>> {
    let mut e = Eval;
    let bp = p.bind(&mut e);
    let d = p.d;
    let mut h_prev_tok = e.lift(Arr::zeros_vec(d));
    let mut out = Vec::with_capacity(xs.len());
    for x_plain in xs {
        let x = e.lift(Arr::V(x_plain.clone()));
        let lambda = {
            let pre = e.matvec(&bp.w_lambda, &x);
            let pre = e.add(&pre, &bp.b_lambda);
            e.map(crate::autodiff::MapKind::Sigmoid, &pre)
        };
        let coef = match &p.coefficient_override {
            Some(fixed) => fixed.bind(&mut e),
            None => {
                let coef_in = if p.hidden_dependence {
                    e.add(&x, &h_prev_tok)
                } else {
                    x.clone()
                };
                crate::mixers::coefficients(&mut e, &p.mixer_spec, &bp.mixer, &coef_in, None)
            }
        };
        let bx = e.matvec(&bp.b_input, &x);
        let qbx = crate::mixers::apply_q(&mut e, &coef, &bx);
        let mut h_cur = e.lift(Arr::zeros_vec(d));
        let mut delta = cfg.damping.delta0;
        let mut best = f64::INFINITY;
        let mut stall = 0usize;
        for _ in 0..cfg.ell_max {
            let carried_depth = crate::mixers::apply_i_minus_q(&mut e, &coef, &h_cur);
            let inner = e.add(&qbx, &carried_depth);
            let drive = if p.input_gate {
                let om = e.map(crate::autodiff::MapKind::OneMinus, &lambda);
                e.hadamard(&om, &inner)
            } else {
                inner
            };
            let carried_time = e.hadamard(&lambda, &h_prev_tok);
            let f_val = e.add(&carried_time, &drive);
            let h_new = if delta == 1.0 {
                f_val
            } else {
                let a = e.scale(&f_val, delta);
                let b = e.scale(&h_cur, 1.0 - delta);
                e.add(&a, &b)
            };
            let inc = h_new
                .data()
                .iter()
                .zip(h_cur.data().iter())
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            let scale = h_new.norm_inf().max(fixed_point::RESIDUAL_TINY);
            let residual = inc / scale;
            h_cur = h_new;
            if residual < cfg.tol {
                break;
            }
            if residual < best {
                best = residual;
                stall = 0;
            } else {
                stall += 1;
                if stall >= cfg.damping.patience {
                    delta *= cfg.damping.factor;
                    stall = 0;
                }
            }
        }
        h_prev_tok = h_cur.clone();
        out.push(h_cur.as_vec().clone());
    }
    Ok(out)
}
