//! Parameter layout, initialization and the forward/backward passes.
//!
//! Every sample is processed independently; batch gradients are the sum of
//! per-sample gradients taken in batch order, so results do not depend on
//! the number of worker threads.

use std::collections::HashMap;

use ndarray::{
    Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayViewMut1, ArrayViewMut2, Axis,
};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::attention::{multi_head, multi_head_backward, MultiHeadCache};
use super::config::{LossConfig, TrunkConfig, TrunkVariant};
use super::layers::*;
use super::loss::head_loss_grad;
use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub bias: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Named segments of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    pub segments: Vec<Segment>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: usize, bias: bool) {
        let offset = self.total();
        self.index.insert(name.clone(), self.segments.len());
        self.segments.push(Segment {
            name,
            offset,
            shape,
            fan_in,
            bias,
        });
    }

    fn weight(&mut self, name: String, shape: Vec<usize>, fan_in: usize) {
        self.push(name, shape, fan_in, false);
    }

    fn bias(&mut self, name: String, len: usize) {
        self.push(name, vec![len], 0, true);
    }

    pub fn total(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn get(&self, name: &str) -> Option<&Segment> {
        self.index.get(name).map(|&i| &self.segments[i])
    }

    fn seg(&self, name: &str) -> &Segment {
        self.get(name)
            .unwrap_or_else(|| panic!("no parameter segment `{name}`"))
    }

    /// Build the segment list for a trunk and two heads, in initialization
    /// order: trunk, main head, aux head.
    pub fn build(cfg: &TrunkConfig, k_main: usize, k_aux: usize) -> Layout {
        let mut l = Layout::default();
        let (d, w, r) = (cfg.depth, cfg.width, cfg.resolution);
        match cfg.variant {
            TrunkVariant::Mlp => {
                let mut fan = 3 * r * r;
                for i in 0..d {
                    l.weight(format!("mlp.{i}.weight"), vec![w, fan], fan);
                    l.bias(format!("mlp.{i}.bias"), w);
                    fan = w;
                }
            }
            TrunkVariant::Conv => {
                let mut cin = 3;
                if cfg.residual {
                    l.weight("conv.stem.weight".into(), vec![w, 3], 3);
                    l.bias("conv.stem.bias".into(), w);
                    cin = w;
                }
                for i in 0..d {
                    l.weight(format!("conv.{i}.weight"), vec![w, cin, 3, 3], cin * 9);
                    l.bias(format!("conv.{i}.bias"), w);
                    cin = w;
                }
            }
            TrunkVariant::VitMicro => {
                let v = &cfg.vit;
                let pdim = 3 * v.patch_size * v.patch_size;
                let dm = v.embed_dim;
                l.weight("vit.embed.weight".into(), vec![dm, pdim], pdim);
                l.bias("vit.embed.bias".into(), dm);
                l.weight("vit.pos".into(), vec![cfg.tokens(), dm], dm);
                for i in 0..d {
                    for p in ["wq", "wk", "wv", "wo"] {
                        l.weight(format!("vit.{i}.{p}"), vec![dm, dm], dm);
                    }
                    l.weight(format!("vit.{i}.mlp1.weight"), vec![w, dm], dm);
                    l.bias(format!("vit.{i}.mlp1.bias"), w);
                    l.weight(format!("vit.{i}.mlp2.weight"), vec![dm, w], w);
                    l.bias(format!("vit.{i}.mlp2.bias"), dm);
                }
            }
        }
        let f = cfg.feature_dim();
        l.weight("main.weight".into(), vec![k_main, f], f);
        l.bias("main.bias".into(), k_main);
        if k_aux > 0 {
            l.weight("aux.weight".into(), vec![k_aux, f], f);
            l.bias("aux.bias".into(), k_aux);
        }
        l
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .segments
            .iter()
            .enumerate()
            .map(|(i, s)| (s.name.clone(), i))
            .collect();
    }

    fn mat<'a>(&self, p: &'a [f64], name: &str) -> ArrayView2<'a, f64> {
        let s = self.seg(name);
        let rows = s.shape[0];
        ArrayView2::from_shape((rows, s.len() / rows.max(1)), &p[s.range()]).expect("segment shape")
    }

    fn vec<'a>(&self, p: &'a [f64], name: &str) -> ArrayView1<'a, f64> {
        ArrayView1::from(&p[self.seg(name).range()])
    }

    fn mat_mut<'a>(&self, p: &'a mut [f64], name: &str) -> ArrayViewMut2<'a, f64> {
        let s = self.seg(name);
        let rows = s.shape[0];
        let cols = s.len() / rows.max(1);
        ArrayViewMut2::from_shape((rows, cols), &mut p[s.range()]).expect("segment shape")
    }

    fn vec_mut<'a>(&self, p: &'a mut [f64], name: &str) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut p[self.seg(name).range()])
    }
}

/// Parameters plus everything needed to interpret them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub params: Vec<f64>,
    pub layout: Layout,
    pub config: TrunkConfig,
    pub k_main: usize,
    pub k_aux: usize,
    pub seed: u64,
    /// Bumped on every parameter update; caches remember the version they
    /// were computed against.
    pub version: u64,
}

impl ModelState {
    pub fn from_parts(
        params: Vec<f64>,
        config: TrunkConfig,
        k_main: usize,
        k_aux: usize,
        seed: u64,
    ) -> Result<ModelState> {
        config.validate()?;
        let mut layout = Layout::build(&config, k_main, k_aux);
        layout.rebuild_index();
        if layout.total() != params.len() {
            return Err(Error::Config(format!(
                "parameter vector has {} entries, layout expects {}",
                params.len(),
                layout.total()
            )));
        }
        Ok(ModelState {
            params,
            layout,
            config,
            k_main,
            k_aux,
            seed,
            version: 0,
        })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|s| &self.params[s.range()])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.layout.get(name)?.range();
        self.version += 1;
        Some(&mut self.params[r])
    }
}

/// Weights uniform in `±√(6/fan_in)`, biases zero, drawn in layout order.
pub fn init_params(
    cfg: &TrunkConfig,
    k_main: usize,
    k_aux: usize,
    seed: u64,
) -> Result<ModelState> {
    cfg.validate()?;
    let layout = Layout::build(cfg, k_main, k_aux);
    let mut rng = rng::named(seed, stream::INIT);
    let mut params = Vec::with_capacity(layout.total());
    for s in &layout.segments {
        if s.bias {
            params.extend(std::iter::repeat_n(0.0, s.len()));
        } else {
            let a = (6.0 / s.fan_in as f64).sqrt();
            params.extend((0..s.len()).map(|_| rng.random_range(-a..a)));
        }
    }
    Ok(ModelState {
        params,
        layout,
        config: *cfg,
        k_main,
        k_aux,
        seed,
        version: 0,
    })
}

#[derive(Debug, Clone)]
enum TrunkCache {
    Mlp {
        acts: Vec<Array1<f64>>,
    },
    Conv {
        input: Array2<f64>,
        blocks: Vec<ConvBlockCache>,
        final_positions: usize,
    },
    Vit {
        tokens: Array2<f64>,
        blocks: Vec<VitBlockCache>,
    },
}

#[derive(Debug, Clone)]
struct ConvBlockCache {
    side: usize,
    cin: usize,
    cols: Array2<f64>,
    act: Array2<f64>,
}

#[derive(Debug, Clone)]
struct VitBlockCache {
    x: Array2<f64>,
    attn: MultiHeadCache,
    x1: Array2<f64>,
    m: Array2<f64>,
}

#[derive(Debug, Clone)]
struct SampleCache {
    trunk: TrunkCache,
    feature: Array1<f64>,
}

/// Activations from one [`forward`] call.
#[derive(Debug, Clone)]
pub struct Cache {
    version: u64,
    n_params: usize,
    samples: Vec<SampleCache>,
    pub main: Array2<f64>,
    pub aux: Array2<f64>,
}

impl Cache {
    pub fn features(&self) -> Array2<f64> {
        let f = self.samples.first().map_or(0, |s| s.feature.len());
        let mut out = Array2::zeros((self.samples.len(), f));
        for (mut row, s) in out.rows_mut().into_iter().zip(&self.samples) {
            row.assign(&s.feature);
        }
        out
    }

    /// Which ReLU units are active, sample by sample. Two caches with equal
    /// signatures lie in the same linear region of the network.
    pub fn relu_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for s in &self.samples {
            match &s.trunk {
                TrunkCache::Mlp { acts } => {
                    for a in &acts[1..] {
                        sig.extend(a.iter().map(|&v| v > 0.0));
                    }
                }
                TrunkCache::Conv { blocks, .. } => {
                    for b in blocks {
                        sig.extend(active_mask(&b.act));
                    }
                }
                TrunkCache::Vit { blocks, .. } => {
                    for b in blocks {
                        sig.extend(active_mask(&b.m));
                    }
                }
            }
        }
        sig
    }
}

/// Bring a `3 × H × W` tensor to the trunk resolution by mean pooling.
pub fn prepare_input(x: ArrayView3<f64>, cfg: &TrunkConfig) -> Result<Array3<f64>> {
    let (c, h, w) = x.dim();
    let r = cfg.resolution;
    if c != 3 || h != w || h < r || h % r != 0 {
        return Err(Error::Config(format!(
            "input of shape {c}×{h}×{w} cannot be mean-pooled to 3×{r}×{r}"
        )));
    }
    Ok(downsample(x, h / r))
}

fn trunk_forward(state: &ModelState, x: ArrayView3<f64>) -> (TrunkCache, Array1<f64>) {
    let cfg = &state.config;
    let (p, l) = (&state.params[..], &state.layout);
    match cfg.variant {
        TrunkVariant::Mlp => {
            let mut a = Array1::from_iter(x.iter().copied());
            let mut acts = vec![a.clone()];
            for i in 0..cfg.depth {
                let w = l.mat(p, &format!("mlp.{i}.weight"));
                let b = l.vec(p, &format!("mlp.{i}.bias"));
                a = (w.dot(&a) + b).mapv(|v| v.max(0.0));
                acts.push(a.clone());
            }
            (TrunkCache::Mlp { acts }, a)
        }
        TrunkVariant::Conv => {
            let input = to_positions(x);
            let mut cur = input.clone();
            if cfg.residual {
                let w = l.mat(p, "conv.stem.weight");
                cur = input.dot(&w.t()) + l.vec(p, "conv.stem.bias");
            }
            let mut side = cfg.resolution;
            let mut blocks = Vec::with_capacity(cfg.depth);
            for i in 0..cfg.depth {
                let w = l.mat(p, &format!("conv.{i}.weight"));
                let b = l.vec(p, &format!("conv.{i}.bias"));
                let cols = im2col(cur.view(), side);
                let mut act = cols.dot(&w.t()) + b;
                relu_inplace(&mut act);
                let out = if cfg.residual {
                    &act + &cur
                } else {
                    act.clone()
                };
                blocks.push(ConvBlockCache {
                    side,
                    cin: cur.ncols(),
                    cols,
                    act,
                });
                cur = pool2(out.view(), side);
                side /= 2;
            }
            let feature = cur.mean_axis(Axis(0)).expect("non-empty map");
            (
                TrunkCache::Conv {
                    input,
                    blocks,
                    final_positions: cur.nrows(),
                },
                feature,
            )
        }
        TrunkVariant::VitMicro => {
            let v = &cfg.vit;
            let tokens = patchify(x, v.patch_size);
            let mut h = tokens.dot(&l.mat(p, "vit.embed.weight").t()) + l.vec(p, "vit.embed.bias");
            h += &l.mat(p, "vit.pos");
            let mut blocks = Vec::with_capacity(cfg.depth);
            for i in 0..cfg.depth {
                let (o, attn) = multi_head(
                    h.view(),
                    l.mat(p, &format!("vit.{i}.wq")),
                    l.mat(p, &format!("vit.{i}.wk")),
                    l.mat(p, &format!("vit.{i}.wv")),
                    l.mat(p, &format!("vit.{i}.wo")),
                    v.heads,
                );
                let x1 = &h + &o;
                let mut m = x1.dot(&l.mat(p, &format!("vit.{i}.mlp1.weight")).t())
                    + l.vec(p, &format!("vit.{i}.mlp1.bias"));
                relu_inplace(&mut m);
                let z2 = m.dot(&l.mat(p, &format!("vit.{i}.mlp2.weight")).t())
                    + l.vec(p, &format!("vit.{i}.mlp2.bias"));
                let x2 = &x1 + &z2;
                blocks.push(VitBlockCache { x: h, attn, x1, m });
                h = x2;
            }
            let feature = h.mean_axis(Axis(0)).expect("at least one token");
            (TrunkCache::Vit { tokens, blocks }, feature)
        }
    }
}

/// Non-overlapping `P × P` patches, one row per token in raster order; each
/// row is laid out channel, then patch row, then patch column.
fn patchify(x: ArrayView3<f64>, ps: usize) -> Array2<f64> {
    let g = x.dim().1 / ps;
    Array2::from_shape_fn((g * g, 3 * ps * ps), |(t, j)| {
        let (ty, tx) = (t / g, t % g);
        let (c, rem) = (j / (ps * ps), j % (ps * ps));
        x[[c, ty * ps + rem / ps, tx * ps + rem % ps]]
    })
}

fn trunk_backward(state: &ModelState, cache: &TrunkCache, df: ArrayView1<f64>, g: &mut [f64]) {
    let cfg = &state.config;
    let (p, l) = (&state.params[..], &state.layout);
    match cache {
        TrunkCache::Mlp { acts } => {
            let mut d = df.to_owned();
            for i in (0..cfg.depth).rev() {
                d.zip_mut_with(&acts[i + 1], |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0
                    }
                });
                let wname = format!("mlp.{i}.weight");
                let mut gw = l.mat_mut(g, &wname);
                for (mut row, &di) in gw.rows_mut().into_iter().zip(d.iter()) {
                    if di != 0.0 {
                        row.scaled_add(di, &acts[i]);
                    }
                }
                l.vec_mut(g, &format!("mlp.{i}.bias")).scaled_add(1.0, &d);
                if i > 0 {
                    d = l.mat(p, &wname).t().dot(&d);
                }
            }
        }
        TrunkCache::Conv {
            input,
            blocks,
            final_positions,
        } => {
            let n = *final_positions;
            let mut dcur = Array2::from_shape_fn((n, df.len()), |(_, c)| df[c] / n as f64);
            for (i, b) in blocks.iter().enumerate().rev() {
                let dout = pool2_backward(dcur.view(), b.side);
                let mut dz = dout.clone();
                relu_backward(&mut dz, &b.act);
                let wname = format!("conv.{i}.weight");
                l.mat_mut(g, &wname).scaled_add(1.0, &dz.t().dot(&b.cols));
                l.vec_mut(g, &format!("conv.{i}.bias"))
                    .scaled_add(1.0, &dz.sum_axis(Axis(0)));
                if i > 0 || cfg.residual {
                    let dcols = dz.dot(&l.mat(p, &wname));
                    let mut dx = col2im(dcols.view(), b.side, b.cin);
                    if cfg.residual {
                        dx += &dout;
                    }
                    dcur = dx;
                }
            }
            if cfg.residual {
                l.mat_mut(g, "conv.stem.weight")
                    .scaled_add(1.0, &dcur.t().dot(input));
                l.vec_mut(g, "conv.stem.bias")
                    .scaled_add(1.0, &dcur.sum_axis(Axis(0)));
            }
        }
        TrunkCache::Vit { tokens, blocks } => {
            let n = tokens.nrows();
            let mut dx = Array2::from_shape_fn((n, df.len()), |(_, c)| df[c] / n as f64);
            for (i, b) in blocks.iter().enumerate().rev() {
                let m2 = format!("vit.{i}.mlp2.weight");
                let m1 = format!("vit.{i}.mlp1.weight");
                l.mat_mut(g, &m2).scaled_add(1.0, &dx.t().dot(&b.m));
                l.vec_mut(g, &format!("vit.{i}.mlp2.bias"))
                    .scaled_add(1.0, &dx.sum_axis(Axis(0)));
                let mut dm = dx.dot(&l.mat(p, &m2));
                relu_backward(&mut dm, &b.m);
                l.mat_mut(g, &m1).scaled_add(1.0, &dm.t().dot(&b.x1));
                l.vec_mut(g, &format!("vit.{i}.mlp1.bias"))
                    .scaled_add(1.0, &dm.sum_axis(Axis(0)));
                let dx1 = &dx + &dm.dot(&l.mat(p, &m1));
                let names = ["wq", "wk", "wv", "wo"].map(|s| format!("vit.{i}.{s}"));
                let [dxa, dwq, dwk, dwv, dwo] = multi_head_backward(
                    b.x.view(),
                    l.mat(p, &names[0]),
                    l.mat(p, &names[1]),
                    l.mat(p, &names[2]),
                    l.mat(p, &names[3]),
                    &b.attn,
                    dx1.view(),
                );
                for (name, d) in names.iter().zip([dwq, dwk, dwv, dwo]) {
                    l.mat_mut(g, name).scaled_add(1.0, &d);
                }
                dx = dx1 + dxa;
            }
            l.mat_mut(g, "vit.pos").scaled_add(1.0, &dx);
            l.vec_mut(g, "vit.embed.bias")
                .scaled_add(1.0, &dx.sum_axis(Axis(0)));
            l.mat_mut(g, "vit.embed.weight")
                .scaled_add(1.0, &dx.t().dot(tokens));
        }
    }
}

fn heads_forward(state: &ModelState, f: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
    let (p, l) = (&state.params[..], &state.layout);
    let main = l.mat(p, "main.weight").dot(f) + l.vec(p, "main.bias");
    let aux = if state.k_aux > 0 {
        l.mat(p, "aux.weight").dot(f) + l.vec(p, "aux.bias")
    } else {
        Array1::zeros(0)
    };
    (main, aux)
}

/// Predictions for a batch of tensors already at the trunk resolution (or
/// an integer multiple of it).
pub fn forward<'a, I>(state: &ModelState, batch: I) -> Result<Cache>
where
    I: IntoIterator<Item = ArrayView3<'a, f64>>,
{
    let inputs: Vec<ArrayView3<f64>> = batch.into_iter().collect();
    let samples: Vec<(SampleCache, Array1<f64>, Array1<f64>)> = inputs
        .par_iter()
        .map(|x| {
            let x = prepare_input(*x, &state.config)?;
            let (trunk, feature) = trunk_forward(state, x.view());
            let (m, a) = heads_forward(state, &feature);
            Ok((SampleCache { trunk, feature }, m, a))
        })
        .collect::<Result<_>>()?;
    let b = samples.len();
    let mut main = Array2::zeros((b, state.k_main));
    let mut aux = Array2::zeros((b, state.k_aux));
    let mut caches = Vec::with_capacity(b);
    for (i, (c, m, a)) in samples.into_iter().enumerate() {
        main.row_mut(i).assign(&m);
        aux.row_mut(i).assign(&a);
        caches.push(c);
    }
    Ok(Cache {
        version: state.version,
        n_params: state.params.len(),
        samples: caches,
        main,
        aux,
    })
}

/// Whether the aux head takes part in the gradient at all.
pub fn aux_active(state: &ModelState, lc: &LossConfig) -> bool {
    state.k_aux > 0 && lc.lambda != 0.0
}

/// Exact gradient of [`super::loss::loss`] at the cached forward pass.
pub fn backward(
    state: &ModelState,
    cache: &Cache,
    main_target: ArrayView2<f64>,
    aux_target: ArrayView2<f64>,
    lc: &LossConfig,
) -> Result<Vec<f64>> {
    if cache.version != state.version || cache.n_params != state.params.len() {
        return Err(Error::Contract(format!(
            "cache was computed for parameter version {}, state is at version {}",
            cache.version, state.version
        )));
    }
    if main_target.dim() != cache.main.dim() || aux_target.dim() != cache.aux.dim() {
        return Err(Error::Config(format!(
            "targets {:?}/{:?} do not match predictions {:?}/{:?}",
            main_target.dim(),
            aux_target.dim(),
            cache.main.dim(),
            cache.aux.dim()
        )));
    }
    let dmain = head_loss_grad(cache.main.view(), main_target, lc.head_loss);
    let use_aux = aux_active(state, lc);
    let daux = if use_aux {
        Some(head_loss_grad(cache.aux.view(), aux_target, lc.head_loss) * lc.lambda)
    } else {
        None
    };
    let n = state.params.len();
    let l = &state.layout;
    let p = &state.params[..];
    let per_sample: Vec<Vec<f64>> = cache
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut g = vec![0.0; n];
            let dm = dmain.row(i);
            let f = &s.feature;
            {
                let mut gw = l.mat_mut(&mut g, "main.weight");
                for (mut row, &d) in gw.rows_mut().into_iter().zip(dm.iter()) {
                    row.scaled_add(d, f);
                }
            }
            l.vec_mut(&mut g, "main.bias").assign(&dm);
            let mut df = l.mat(p, "main.weight").t().dot(&dm);
            if let Some(da) = &daux {
                let da = da.row(i);
                {
                    let mut gw = l.mat_mut(&mut g, "aux.weight");
                    for (mut row, &d) in gw.rows_mut().into_iter().zip(da.iter()) {
                        row.scaled_add(d, f);
                    }
                }
                l.vec_mut(&mut g, "aux.bias").assign(&da);
                df += &l.mat(p, "aux.weight").t().dot(&da);
            }
            trunk_backward(state, &s.trunk, df.view(), &mut g);
            g
        })
        .collect();
    let mut total = vec![0.0; n];
    for g in per_sample {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    Ok(total)
}

/// `params ← params − lr·grads`.
pub fn sgd_step(state: &mut ModelState, grads: &[f64], lr: f64) -> Result<()> {
    if grads.len() != state.params.len() {
        return Err(Error::Contract(format!(
            "gradient has {} entries, model has {}",
            grads.len(),
            state.params.len()
        )));
    }
    for (p, g) in state.params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    state.version += 1;
    Ok(())
}

/// SGD with optional momentum and L2 weight decay. With both at zero this
/// is exactly [`sgd_step`].
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Sgd {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, state: &mut ModelState, grads: &[f64]) -> Result<()> {
        if self.momentum == 0.0 && self.weight_decay == 0.0 {
            return sgd_step(state, grads, self.lr);
        }
        if grads.len() != state.params.len() {
            return Err(Error::Contract(
                "gradient length does not match the model".into(),
            ));
        }
        if self.velocity.len() != grads.len() {
            self.velocity = vec![0.0; grads.len()];
        }
        for ((p, g), v) in state.params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let g = g + self.weight_decay * *p;
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
        state.version += 1;
        Ok(())
    }
}
