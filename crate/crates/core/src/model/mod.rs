//! Segmentation network: a projection-based feature extractor, prompt
//! normalization, ambient injection and an inverted-bottleneck head.
//!
//! Parameter names (used by freeze patterns and checkpoints):
//!
//! | name | shape |
//! |------|-------|
//! | `extractor.point_in.{weight,bias}` | 4×P, P |
//! | `extractor.cell{r}.{weight,bias}` | P×P, P |
//! | `extractor.fuse.{weight,bias}` | 2P×D, D |
//! | `<layer>_pn.norm.{gamma,beta}` | width |
//! | `<layer>_pn.scale_gen.{weight,bias}`, `<layer>_pn.shift_gen.{weight,bias}` | C×width, width |
//! | `ctx_table` | datasets×C |
//! | `head.ambient.{weight,bias}` | 1×A, A |
//! | `head.in_proj`, `head.expand`, `head.contract`, `head.classifier` | linear layers |
//!
//! The generator and context tensors exist only when prompt normalization is on.

mod checkpoint;
mod mixup;
mod params;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Mode, NormState, Var};
use crate::projection::{project, ImageBlock, SensorSpec};
use crate::rng::{derive_rng, stream_id};
use crate::scalar::Scalar;
use crate::scan::{PointScan, IGNORE, NUM_CLASSES};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use mixup::{manifold_mixup, mix_rows, sample_lambda, sample_plan, MixPlan};
pub use params::{glob_match, Param, ParamStore};

/// Per-point input channels: x, y, z, intensity.
pub const POINT_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    /// Width P of the per-point and per-cell features.
    pub point_dim: usize,
    /// Width D of the output embedding.
    pub embed_dim: usize,
    pub window: usize,
    pub rounds: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            point_dim: 32,
            embed_dim: 64,
            window: 3,
            rounds: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixupSite {
    /// The head input, after the ambient block is appended.
    HeadInput,
    /// After the head's input projection.
    Hidden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixupConfig {
    pub enabled: bool,
    pub alpha: f64,
    pub site: MixupSite,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            alpha: 2.0,
            site: MixupSite::HeadInput,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Residual width D′.
    pub width: usize,
    pub expansion: usize,
    pub ambient_dim: usize,
    pub num_classes: usize,
    pub mixup: MixupConfig,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            width: 64,
            expansion: 4,
            ambient_dim: 8,
            num_classes: NUM_CLASSES,
            mixup: MixupConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_datasets: usize,
    /// Prompt normalization on/off.
    pub ppt: bool,
    pub ctx_dim: usize,
    /// Normalization layers whose γ is frozen use running statistics even in
    /// training mode, so their statistics stay frozen too.
    pub frozen_norms_use_running_stats: bool,
    pub seed: u64,
    pub extractor: ExtractorConfig,
    pub head: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_datasets: 1,
            ppt: true,
            ctx_dim: 64,
            frozen_norms_use_running_stats: true,
            seed: 0,
            extractor: ExtractorConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.extractor;
        let h = &self.head;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_datasets == 0 {
            return bad("model needs at least one dataset");
        }
        if self.ppt && self.ctx_dim == 0 {
            return bad("ctx_dim must be positive");
        }
        if e.point_dim == 0 || e.embed_dim == 0 || h.width == 0 {
            return bad("layer widths must be positive");
        }
        if e.window % 2 == 0 {
            return bad("extractor window must be odd");
        }
        if h.expansion < 1 {
            return bad("head expansion must be at least 1");
        }
        if h.num_classes != NUM_CLASSES {
            return Err(Error::Config(format!("num_classes must be {NUM_CLASSES}")));
        }
        if h.mixup.enabled && !(h.mixup.alpha > 0.0) {
            return bad("mixup alpha must be positive");
        }
        Ok(())
    }
}

/// Points of one or more scans, stacked for a single forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// N×4 row-major features.
    pub features: Vec<f64>,
    pub ambient: Vec<f64>,
    pub dataset_ids: Vec<usize>,
    /// Cell of each point in the stacked cell tensor.
    pub cell_ids: Vec<usize>,
    pub blocks: Vec<ImageBlock>,
    pub labels: Vec<u8>,
    /// Start of each scan's rows, plus the total at the end.
    pub scan_offsets: Vec<usize>,
}

impl ModelInput {
    /// Projects each scan with its sensor and stacks everything.
    pub fn new(scans: &[(&PointScan, &SensorSpec)]) -> Result<Self> {
        let mut inp = ModelInput {
            features: Vec::new(),
            ambient: Vec::new(),
            dataset_ids: Vec::new(),
            cell_ids: Vec::new(),
            blocks: Vec::new(),
            labels: Vec::new(),
            scan_offsets: vec![0],
        };
        let mut cell_offset = 0;
        for (scan, sensor) in scans {
            scan.validate()?;
            let image = project(scan, sensor)?;
            for (p, &i) in scan.xyz.iter().zip(&scan.intensity) {
                inp.features.extend_from_slice(&[p[0], p[1], p[2], i]);
            }
            inp.ambient.extend(scan.ambient_or_zeros());
            inp.dataset_ids.extend(std::iter::repeat(scan.dataset_id).take(scan.len()));
            inp.cell_ids.extend(image.cell_id.iter().map(|c| c + cell_offset));
            if scan.is_labeled() {
                inp.labels.extend_from_slice(&scan.labels);
            } else {
                inp.labels.extend(std::iter::repeat(IGNORE).take(scan.len()));
            }
            inp.blocks.push(ImageBlock {
                offset: cell_offset,
                height: image.height,
                width: image.width,
            });
            cell_offset += image.num_cells();
            inp.scan_offsets.push(inp.dataset_ids.len());
        }
        Ok(inp)
    }

    pub fn len(&self) -> usize {
        self.dataset_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset_ids.is_empty()
    }

    pub fn num_cells(&self) -> usize {
        self.blocks.iter().map(|b| b.height * b.width).sum()
    }

    pub fn labeled_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] != IGNORE).collect()
    }
}

/// Result of a forward pass recorded on a graph.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Input rows that reached the head, in logit-row order.
    pub rows: Vec<usize>,
    /// Graph handle of every parameter, in registry order.
    pub params: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    cfg: ModelConfig,
    store: ParamStore<T>,
}

fn name_stream(name: &str) -> u64 {
    let words: Vec<u64> = name.bytes().map(u64::from).collect();
    stream_id(&words)
}

impl<T: Scalar> Model<T> {
    /// Fresh model. Each tensor draws from its own random stream keyed by
    /// name, so toggling optional parts leaves all other weights unchanged.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut m = Self {
            store: ParamStore::new(),
            cfg,
        };
        let (p, d) = (m.cfg.extractor.point_dim, m.cfg.extractor.embed_dim);
        let (w, a) = (m.cfg.head.width, m.cfg.head.ambient_dim);
        let e = w * m.cfg.head.expansion;
        if m.cfg.ppt {
            let rows = m.cfg.num_datasets;
            let ctx = m.cfg.ctx_dim;
            let mut rng = derive_rng(m.cfg.seed, name_stream("ctx_table"));
            m.store.insert("ctx_table", params::normal(rows, ctx, 1.0, &mut rng))?;
        }
        m.add_linear("extractor.point_in", POINT_FEATURES, p)?;
        m.add_norm("extractor.point_in_pn", p)?;
        for r in 0..m.cfg.extractor.rounds {
            m.add_linear(&format!("extractor.cell{r}"), p, p)?;
            m.add_norm(&format!("extractor.cell{r}_pn"), p)?;
        }
        m.add_linear("extractor.fuse", 2 * p, d)?;
        m.add_norm("extractor.fuse_pn", d)?;
        if a > 0 {
            m.add_linear("head.ambient", 1, a)?;
        }
        m.add_linear("head.in_proj", d + a, w)?;
        m.add_linear("head.expand", w, e)?;
        m.add_norm("head.expand_pn", e)?;
        m.add_linear("head.contract", e, w)?;
        m.add_linear("head.classifier", w, NUM_CLASSES)?;
        Ok(m)
    }

    fn add_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let wname = format!("{name}.weight");
        let mut rng = derive_rng(self.cfg.seed, name_stream(&wname));
        self.store.insert(&wname, params::he_normal(fan_in, fan_out, &mut rng))?;
        self.store.insert(&format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(())
    }

    fn add_norm(&mut self, name: &str, width: usize) -> Result<()> {
        self.store
            .insert(&format!("{name}.norm.gamma"), Tensor::full(&[width], T::one()))?;
        self.store.insert(&format!("{name}.norm.beta"), Tensor::zeros(&[width]))?;
        self.store.insert_buffer(&format!("{name}.norm"), NormState::new(width))?;
        if self.cfg.ppt {
            let c = self.cfg.ctx_dim;
            for gen in ["scale_gen", "shift_gen"] {
                self.store
                    .insert(&format!("{name}.{gen}.weight"), Tensor::zeros(&[c, width]))?;
                self.store.insert(&format!("{name}.{gen}.bias"), Tensor::zeros(&[width]))?;
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub(crate) fn from_parts(cfg: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(cfg.clone())?;
        if fresh.store.len() != store.len() || fresh.store.buffers().len() != store.buffers().len() {
            return Err(Error::Precondition(format!(
                "parameter set does not match the configuration ({} vs {} tensors)",
                store.len(),
                fresh.store.len()
            )));
        }
        for (a, b) in fresh.store.params().iter().zip(store.params()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Precondition(format!(
                    "parameter '{}' {:?} does not match expected '{}' {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        for ((na, sa), (nb, sb)) in fresh.store.buffers().iter().zip(store.buffers()) {
            if na != nb || sa.width() != sb.width() {
                return Err(Error::Precondition(format!("buffer '{nb}' does not match '{na}'")));
            }
        }
        Ok(Self { cfg, store })
    }

    /// Switches mixup on or off (e.g. between stages); weights are unaffected.
    pub fn set_mixup(&mut self, mixup: MixupConfig) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.head.mixup = mixup;
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    /// Records a full forward pass on `g`.
    ///
    /// `rows` selects which points go through the head (all when `None`);
    /// `mix` interpolates those rows at the configured mixup site. Train mode
    /// updates the running statistics of every normalization layer that is
    /// not frozen.
    pub fn forward(
        &mut self,
        g: &mut Graph<T>,
        input: &ModelInput,
        mode: Mode,
        rows: Option<&[usize]>,
        mix: Option<&MixPlan>,
    ) -> Result<ForwardOutput> {
        let mut f = Fwd::new(self, g, mode, mode == Mode::Train)?;
        let out = f.run(input, rows, mix)?;
        let updates = f.updates;
        for (name, state) in updates {
            *self.store.buffer_mut(&name)? = state;
        }
        Ok(out)
    }

    /// Per-point embeddings of the extractor (N×D).
    pub fn extract(&self, input: &ModelInput, mode: Mode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut f = Fwd::new(self, &mut g, mode, false)?;
        let v = f.extractor(input)?;
        Ok(g.value(v).clone())
    }

    /// Head input: embeddings with the ambient block appended.
    pub fn inject_ambient(&self, embed: &Tensor<T>, ambient: &[f64]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut f = Fwd::new(self, &mut g, Mode::Eval, false)?;
        let e = f.g.constant(embed.clone());
        let v = f.ambient(e, ambient)?;
        Ok(g.value(v).clone())
    }

    /// Logits for precomputed head inputs (N×(D+A)), all rows from `dataset_id`.
    pub fn head_logits(&self, feats: &Tensor<T>, dataset_id: usize, mode: Mode) -> Result<Tensor<T>> {
        let (n, _) = feats.dims2()?;
        let ids = vec![dataset_id; n];
        let mut g = Graph::new();
        let mut f = Fwd::new(self, &mut g, mode, false)?;
        let x = f.g.constant(feats.clone());
        let v = f.head(x, &ids, None)?;
        Ok(g.value(v).clone())
    }

    /// Eval-mode class ids and N×8 probabilities.
    pub fn predict(&self, input: &ModelInput) -> Result<(Vec<u8>, Tensor<T>)> {
        let logits = self.logits(input)?;
        let probs = softmax_rows(&logits)?;
        let classes = argmax_rows(&probs);
        Ok((classes, probs))
    }

    /// Eval-mode logits for every point.
    pub fn logits(&self, input: &ModelInput) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let mut f = Fwd::new(self, &mut g, Mode::Eval, false)?;
        let out = f.run(input, None, None)?;
        Ok(g.value(out.logits).clone())
    }

    /// Mean cross-entropy over the labeled points of `input`, with mixup
    /// applied when enabled and `mix_rng` is given.
    pub fn loss(
        &mut self,
        g: &mut Graph<T>,
        input: &ModelInput,
        mode: Mode,
        mix_rng: Option<&mut crate::rng::Rng>,
    ) -> Result<(Var, ForwardOutput)> {
        let rows = input.labeled_rows();
        if rows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let k = NUM_CLASSES;
        let mut targets = Tensor::zeros(&[rows.len(), k]);
        for (i, &r) in rows.iter().enumerate() {
            let c = input.labels[r] as usize;
            if c >= k {
                return Err(Error::Precondition(format!("label {c} out of range at point {r}")));
            }
            targets.data_mut()[i * k + c] = T::one();
        }
        let plan = match (self.cfg.head.mixup.enabled && mode == Mode::Train, mix_rng) {
            (true, Some(rng)) => sample_plan(rows.len(), self.cfg.head.mixup.alpha, rng)?,
            _ => None,
        };
        let out = self.forward(g, input, mode, Some(&rows), plan.as_ref())?;
        if let Some(p) = &plan {
            targets = mix_rows(&targets, p)?;
        }
        let ignore = vec![false; rows.len()];
        let loss = g.softmax_cross_entropy(out.logits, targets.data(), &ignore)?;
        Ok((loss, out))
    }
}

pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = logits.dims2()?;
    let mut out = Vec::with_capacity(n * k);
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let s: T = e.iter().copied().sum();
        out.extend(e.into_iter().map(|v| v / s));
    }
    Tensor::new(vec![n, k], out)
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(x: &Tensor<T>) -> Vec<u8> {
    let k = x.shape().last().copied().unwrap_or(0);
    if k == 0 {
        return Vec::new();
    }
    x.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// One forward pass in progress.
struct Fwd<'a, T> {
    model: &'a Model<T>,
    g: &'a mut Graph<T>,
    vars: Vec<Var>,
    mode: Mode,
    collect_stats: bool,
    updates: Vec<(String, NormState<T>)>,
}

impl<'a, T: Scalar> Fwd<'a, T> {
    fn new(model: &'a Model<T>, g: &'a mut Graph<T>, mode: Mode, collect_stats: bool) -> Result<Self> {
        let vars = model.store.bind(g, mode == Mode::Train);
        Ok(Self {
            model,
            g,
            vars,
            mode,
            collect_stats,
            updates: Vec::new(),
        })
    }

    fn p(&self, name: &str) -> Result<Var> {
        Ok(self.vars[self.model.store.id(name)?])
    }

    fn linear(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{name}.weight"))?;
        let b = self.p(&format!("{name}.bias"))?;
        let y = self.g.matmul(x, w)?;
        self.g.add(y, b)
    }

    /// Batch normalization followed by the dataset-conditioned scale and shift.
    fn prompt_norm(&mut self, name: &str, x: Var, dataset_ids: &[usize]) -> Result<Var> {
        let store = &self.model.store;
        let gamma_name = format!("{name}.norm.gamma");
        let gamma = self.p(&gamma_name)?;
        let beta = self.p(&format!("{name}.norm.beta"))?;
        let buf = format!("{name}.norm");
        let frozen_stats = self.model.cfg.frozen_norms_use_running_stats && store.get(&gamma_name)?.frozen;
        let mode = if frozen_stats { Mode::Eval } else { self.mode };
        let mut state = store.buffer(&buf)?.clone();
        let y = self.g.batch_norm(x, gamma, beta, &mut state, mode)?;
        if mode == Mode::Train && self.collect_stats {
            self.updates.push((buf, state));
        }
        if !self.model.cfg.ppt {
            return Ok(y);
        }
        let count = self.model.cfg.num_datasets;
        if let Some(&bad) = dataset_ids.iter().find(|&&d| d >= count) {
            return Err(Error::UnknownDataset { id: bad, count });
        }
        let ctx = self.p("ctx_table")?;
        let table = |g: &mut Graph<T>, gen: &str| -> Result<Var> {
            let w = self.vars[store.id(&format!("{name}.{gen}.weight"))?];
            let b = self.vars[store.id(&format!("{name}.{gen}.bias"))?];
            let t = g.matmul(ctx, w)?;
            g.add(t, b)
        };
        let s_delta = table(self.g, "scale_gen")?;
        let shift = table(self.g, "shift_gen")?;
        let scale = self.g.shift(s_delta, T::one());
        // a batch from a single dataset broadcasts one row instead of N
        let uniform = dataset_ids.windows(2).all(|w| w[0] == w[1]);
        let ids: Vec<usize> = if uniform && !dataset_ids.is_empty() {
            vec![dataset_ids[0]]
        } else {
            dataset_ids.to_vec()
        };
        let s = self.g.gather_rows(scale, &ids)?;
        let t = self.g.gather_rows(shift, &ids)?;
        let ys = self.g.mul(y, s)?;
        self.g.add(ys, t)
    }

    fn extractor(&mut self, input: &ModelInput) -> Result<Var> {
        let n = input.len();
        if input.features.len() != n * POINT_FEATURES || input.cell_ids.len() != n {
            return Err(Error::dim("extractor", &[n, POINT_FEATURES], &[input.features.len()]));
        }
        let feats = Tensor::new(
            vec![n, POINT_FEATURES],
            input.features.iter().map(|&v| T::of(v)).collect(),
        )?;
        let x = self.g.constant(feats);
        let ids = &input.dataset_ids;
        let h = self.linear("extractor.point_in", x)?;
        let h = self.prompt_norm("extractor.point_in_pn", h, ids)?;
        let point = self.g.relu(h);

        let cells_n = input.num_cells();
        let cell_ds = cell_dataset_ids(input);
        let mut cells = self.g.scatter_max(point, &input.cell_ids, cells_n)?;
        for r in 0..self.model.cfg.extractor.rounds {
            let c = self.g.window_mean(cells, &input.blocks, self.model.cfg.extractor.window)?;
            let c = self.linear(&format!("extractor.cell{r}"), c)?;
            let c = self.prompt_norm(&format!("extractor.cell{r}_pn"), c, &cell_ds)?;
            cells = self.g.relu(c);
        }
        let back = self.g.gather_rows(cells, &input.cell_ids)?;
        let both = self.g.concat_cols(point, back)?;
        let h = self.linear("extractor.fuse", both)?;
        let h = self.prompt_norm("extractor.fuse_pn", h, ids)?;
        Ok(self.g.relu(h))
    }

    fn ambient(&mut self, embed: Var, ambient: &[f64]) -> Result<Var> {
        if self.model.cfg.head.ambient_dim == 0 {
            return Ok(embed);
        }
        let n = self.g.shape(embed)[0];
        if ambient.len() != n {
            return Err(Error::dim("ambient_inject", &[n], &[ambient.len()]));
        }
        let a = Tensor::new(vec![n, 1], ambient.iter().map(|&v| T::of(v)).collect())?;
        let a = self.g.constant(a);
        let block = self.linear("head.ambient", a)?;
        self.g.concat_cols(embed, block)
    }

    fn head(&mut self, x: Var, dataset_ids: &[usize], mix: Option<&MixPlan>) -> Result<Var> {
        let site = self.model.cfg.head.mixup.site;
        let mut x = x;
        if site == MixupSite::HeadInput {
            if let Some(p) = mix {
                x = self.mix(x, p)?;
            }
        }
        let mut h = self.linear("head.in_proj", x)?;
        if site == MixupSite::Hidden {
            if let Some(p) = mix {
                h = self.mix(h, p)?;
            }
        }
        let e = self.linear("head.expand", h)?;
        let e = self.g.relu(e);
        let e = self.prompt_norm("head.expand_pn", e, dataset_ids)?;
        let c = self.linear("head.contract", e)?;
        let r = self.g.add(h, c)?;
        self.linear("head.classifier", r)
    }

    fn mix(&mut self, x: Var, plan: &MixPlan) -> Result<Var> {
        let n = self.g.shape(x)[0];
        if plan.perm.len() != n {
            return Err(Error::dim("mixup", &[n], &[plan.perm.len()]));
        }
        let partner = self.g.gather_rows(x, &plan.perm)?;
        let a = self.g.scale(x, T::of(plan.lambda));
        let b = self.g.scale(partner, T::of(1.0 - plan.lambda));
        self.g.add(a, b)
    }

    fn run(&mut self, input: &ModelInput, rows: Option<&[usize]>, mix: Option<&MixPlan>) -> Result<ForwardOutput> {
        if input.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(&bad) = input.dataset_ids.iter().find(|&&d| d >= self.model.cfg.num_datasets) {
            return Err(Error::UnknownDataset {
                id: bad,
                count: self.model.cfg.num_datasets,
            });
        }
        let embed = self.extractor(input)?;
        let feats = self.ambient(embed, &input.ambient)?;
        let rows: Vec<usize> = match rows {
            Some(r) => r.to_vec(),
            None => (0..input.len()).collect(),
        };
        let all = rows.len() == input.len() && rows.iter().enumerate().all(|(i, &r)| i == r);
        let feats = if all { feats } else { self.g.gather_rows(feats, &rows)? };
        let ids: Vec<usize> = rows.iter().map(|&r| input.dataset_ids[r]).collect();
        let logits = self.head(feats, &ids, mix)?;
        Ok(ForwardOutput {
            logits,
            rows,
            params: self.vars.clone(),
        })
    }
}

/// Dataset of each stacked cell (the dataset of the scan owning the block).
fn cell_dataset_ids(input: &ModelInput) -> Vec<usize> {
    let mut out = Vec::with_capacity(input.num_cells());
    for (b, block) in input.blocks.iter().enumerate() {
        let start = input.scan_offsets[b];
        let ds = if start < input.len() { input.dataset_ids[start] } else { 0 };
        out.extend(std::iter::repeat(ds).take(block.height * block.width));
    }
    out
}

#[cfg(test)]
pub(crate) mod tests;
