//! The two-stream network.
//!
//! Parameter names (all stored in a [`ParamStore`]):
//!
//! | prefix | tensors |
//! |---|---|
//! | `pose.lift` | `w [C_in, C_f]`, `b [C_f]` |
//! | `pose.token` | `[J, C_f]` |
//! | `pose.pos_t`, `pose.pos_j` | `[T_max + 1, C_f]`, `[J, C_f]` |
//! | `pose.block{i}` | `ln1`, `s_attn.{q,k,v,o}`, `ln2`, `t_attn.{q,k,v,o}`, `ln3`, `ffn.fc1`, `ffn.fc2` |
//! | `pose.final_ln` | `gamma`, `beta` |
//! | `head` | `w [C_f, 3]`, `b [3]` |
//! | `pose_pool` | `fc1`, `ln1`, `fc2`, `ln2`, `joint_w [J]`, `out` |
//! | `text.tok_emb`, `text.pos_emb` | `[V, C_f]`, `[N_max, C_f]` |
//! | `text.emb_ln`, `text.block{i}`, `text.final_ln` | `ln1`, `attn.{q,k,v,o}`, `ln2`, `ffn.fc1`, `ffn.fc2` |
//! | `text_pool` | `fc1`, `ln1`, `fc2`, `out` |
//!
//! Linear layers hold `.w [in, out]` and `.b [out]`; layer norms hold
//! `.gamma` and `.beta`.

pub mod checkpoint;
pub mod tokenizer;

use std::fmt::Write as _;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::nn::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::rng::{rng_from, Rng};
use crate::skeleton::{C_IN, NUM_JOINTS};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub c_in: usize,
    pub c_f: usize,
    pub joints: usize,
    pub t_max: usize,
    pub l1: usize,
    pub l2: usize,
    pub l3: usize,
    pub heads: usize,
    /// Hidden width of feed-forward sublayers as a multiple of `c_f`.
    pub ffn_mult: usize,
    pub vocab_size: usize,
    /// Longest token sequence, specials included.
    pub text_max_len: usize,
    pub dropout: f64,
    pub align_dim: usize,
    /// Adds learned temporal position embeddings; disabling them makes the
    /// pose encoder equivariant to frame permutations.
    pub temporal_pos: bool,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            c_in: C_IN,
            c_f: 64,
            joints: NUM_JOINTS,
            t_max: 27,
            l1: 2,
            l2: 1,
            l3: 2,
            heads: 4,
            ffn_mult: 2,
            vocab_size: Tokenizer::action_vocab().vocab_size(),
            text_max_len: 16,
            dropout: 0.1,
            align_dim: 64,
            temporal_pos: true,
        }
    }

    pub fn paper() -> Self {
        ModelConfig { c_f: 256, t_max: 243, l1: 3, l2: 2, l3: 3, heads: 8, ffn_mult: 4, align_dim: 256, ..Self::tiny() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| Err(Error::Config { key: format!("model.{key}"), reason: reason.into() });
        if self.c_in != C_IN {
            return bad("c_in", "must be 3 (x, y, confidence)");
        }
        if self.l1 < 1 || self.l2 < 1 {
            return bad(if self.l1 < 1 { "l1" } else { "l2" }, "must be at least 1");
        }
        if self.l3 < 1 {
            return bad("l3", "must be at least 1");
        }
        if self.heads == 0 || self.c_f % self.heads != 0 {
            return bad("heads", "must divide c_f");
        }
        if self.align_dim == 0 {
            return bad("align_dim", "must be positive");
        }
        if self.ffn_mult == 0 {
            return bad("ffn_mult", "must be positive");
        }
        if self.joints == 0 || self.t_max == 0 {
            return bad(if self.joints == 0 { "joints" } else { "t_max" }, "must be positive");
        }
        if self.text_max_len < 3 {
            return bad("text_max_len", "must fit <CLS>, one word and <SEP>");
        }
        if self.vocab_size < 5 {
            return bad("vocab_size", "must hold the special tokens and at least one word");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        Ok(())
    }

    /// `key=value` lines in field order.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("c_in", self.c_in.to_string()),
            ("c_f", self.c_f.to_string()),
            ("joints", self.joints.to_string()),
            ("t_max", self.t_max.to_string()),
            ("l1", self.l1.to_string()),
            ("l2", self.l2.to_string()),
            ("l3", self.l3.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_mult", self.ffn_mult.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("text_max_len", self.text_max_len.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("align_dim", self.align_dim.to_string()),
            ("temporal_pos", self.temporal_pos.to_string()),
        ]
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config { key: format!("model.{key}"), reason: format!("cannot parse `{value}`") };
        let uint = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "c_in" => self.c_in = uint()?,
            "c_f" => self.c_f = uint()?,
            "joints" => self.joints = uint()?,
            "t_max" => self.t_max = uint()?,
            "l1" => self.l1 = uint()?,
            "l2" => self.l2 = uint()?,
            "l3" => self.l3 = uint()?,
            "heads" => self.heads = uint()?,
            "ffn_mult" => self.ffn_mult = uint()?,
            "vocab_size" => self.vocab_size = uint()?,
            "text_max_len" => self.text_max_len = uint()?,
            "dropout" => self.dropout = value.parse().map_err(|_| bad())?,
            "align_dim" => self.align_dim = uint()?,
            "temporal_pos" => self.temporal_pos = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config { key: format!("model.{key}"), reason: "unknown key".into() }),
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::tiny();
        let mut seen = 0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format { what: "model config", reason: format!("line `{line}` has no `=`") })?;
            c.set(k.trim(), v.trim())?;
            seen += 1;
        }
        if seen != c.entries().len() {
            return Err(Error::Format { what: "model config", reason: format!("expected {} keys, found {seen}", c.entries().len()) });
        }
        c.validate()?;
        Ok(c)
    }
}

/// Graph handles for the two pose-encoder taps, both `B x (T+1) x J x C_f`.
#[derive(Debug, Clone, Copy)]
pub struct PoseTaps {
    pub mid: Var,
    pub last: Var,
}

/// Network parameters together with their configuration.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

struct Init<'a, F: Scalar> {
    ps: &'a mut ParamStore<F>,
    rng: Rng,
}

impl<F: Scalar> Init<'_, F> {
    fn linear(&mut self, name: &str, din: usize, dout: usize) {
        let a = (6.0 / (din + dout) as f64).sqrt();
        let w: Vec<f64> = (0..din * dout).map(|_| self.rng.random_range(-a..a)).collect();
        self.ps.add(&format!("{name}.w"), Tensor::from_f64(&[din, dout], &w));
        self.ps.add(&format!("{name}.b"), Tensor::zeros(&[dout]));
    }

    fn ln(&mut self, name: &str, c: usize) {
        self.ps.add(&format!("{name}.gamma"), Tensor::full(&[c], F::one()));
        self.ps.add(&format!("{name}.beta"), Tensor::zeros(&[c]));
    }

    fn normal(&mut self, name: &str, shape: &[usize]) {
        let n = Normal::new(0.0, 0.02).expect("valid normal");
        let v: Vec<f64> = (0..shape.iter().product()).map(|_| n.sample(&mut self.rng)).collect();
        self.ps.add(name, Tensor::from_f64(shape, &v));
    }

    fn attn(&mut self, name: &str, c: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), c, c);
        }
    }

    fn ffn(&mut self, name: &str, c: usize, mult: usize) {
        self.linear(&format!("{name}.fc1"), c, c * mult);
        self.linear(&format!("{name}.fc2"), c * mult, c);
    }
}

/// Parameter groups updated during fine-tuning.
pub fn is_pose_stream(name: &str) -> bool {
    name.starts_with("pose.") || name.starts_with("head.")
}

impl<F: Scalar> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let c = config.c_f;
        let mut init = Init { ps: &mut ps, rng: rng_from(seed) };
        init.linear("pose.lift", config.c_in, c);
        init.normal("pose.token", &[config.joints, c]);
        init.normal("pose.pos_t", &[config.t_max + 1, c]);
        init.normal("pose.pos_j", &[config.joints, c]);
        for i in 0..config.l1 + config.l2 {
            let b = format!("pose.block{i}");
            init.ln(&format!("{b}.ln1"), c);
            init.attn(&format!("{b}.s_attn"), c);
            init.ln(&format!("{b}.ln2"), c);
            init.attn(&format!("{b}.t_attn"), c);
            init.ln(&format!("{b}.ln3"), c);
            init.ffn(&format!("{b}.ffn"), c, config.ffn_mult);
        }
        init.ln("pose.final_ln", c);
        init.linear("head", c, 3);
        init.linear("pose_pool.fc1", c, c);
        init.ln("pose_pool.ln1", c);
        init.linear("pose_pool.fc2", c, c);
        init.ln("pose_pool.ln2", c);
        init.ps.add("pose_pool.joint_w", Tensor::zeros(&[config.joints]));
        init.linear("pose_pool.out", c, config.align_dim);
        init.normal("text.tok_emb", &[config.vocab_size, c]);
        init.normal("text.pos_emb", &[config.text_max_len, c]);
        init.ln("text.emb_ln", c);
        for i in 0..config.l3 {
            let b = format!("text.block{i}");
            init.ln(&format!("{b}.ln1"), c);
            init.attn(&format!("{b}.attn"), c);
            init.ln(&format!("{b}.ln2"), c);
            init.ffn(&format!("{b}.ffn"), c, config.ffn_mult);
        }
        init.ln("text.final_ln", c);
        init.linear("text_pool.fc1", c, c);
        init.ln("text_pool.ln1", c);
        init.linear("text_pool.fc2", c, c);
        init.linear("text_pool.out", c, config.align_dim);
        Ok(Model { config, params: ps })
    }

    pub fn param_id(&self, name: &str) -> usize {
        self.params.id(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }

    fn p(&self, g: &mut Graph<F>, name: &str) -> Var {
        g.param(&self.params, self.param_id(name))
    }

    fn lin(&self, g: &mut Graph<F>, x: Var, name: &str) -> Var {
        let w = self.p(g, &format!("{name}.w"));
        let b = self.p(g, &format!("{name}.b"));
        g.linear(x, w, Some(b))
    }

    fn ln(&self, g: &mut Graph<F>, x: Var, name: &str) -> Var {
        let gamma = self.p(g, &format!("{name}.gamma"));
        let beta = self.p(g, &format!("{name}.beta"));
        g.layer_norm(x, gamma, beta)
    }

    fn self_attn(&self, g: &mut Graph<F>, x: Var, name: &str, key_lens: Option<Vec<usize>>) -> Var {
        let q = self.lin(g, x, &format!("{name}.q"));
        let k = self.lin(g, x, &format!("{name}.k"));
        let v = self.lin(g, x, &format!("{name}.v"));
        let a = g.attention(q, k, v, self.config.heads, key_lens);
        self.lin(g, a, &format!("{name}.o"))
    }

    fn ffn(&self, g: &mut Graph<F>, x: Var, name: &str) -> Var {
        let h = self.lin(g, x, &format!("{name}.fc1"));
        let h = g.gelu(h);
        self.lin(g, h, &format!("{name}.fc2"))
    }

    fn st_block(&self, g: &mut Graph<F>, x: Var, i: usize) -> Var {
        let name = format!("pose.block{i}");
        let s = g.shape(x).to_vec();
        let (b, t1, j, c) = (s[0], s[1], s[2], s[3]);

        let h = self.ln(g, x, &format!("{name}.ln1"));
        let h = g.reshape(h, &[b * t1, j, c]);
        let h = self.self_attn(g, h, &format!("{name}.s_attn"), None);
        let h = g.reshape(h, &s);
        let x = g.add(x, h);

        let h = self.ln(g, x, &format!("{name}.ln2"));
        let h = g.transpose12(h);
        let h = g.reshape(h, &[b * j, t1, c]);
        let h = self.self_attn(g, h, &format!("{name}.t_attn"), None);
        let h = g.reshape(h, &[b, j, t1, c]);
        let h = g.transpose12(h);
        let x = g.add(x, h);

        let h = self.ln(g, x, &format!("{name}.ln3"));
        let h = self.ffn(g, h, &format!("{name}.ffn"));
        g.add(x, h)
    }

    /// Encodes a `B x T x J x C_in` batch of normalized 2D sequences.
    pub fn pose_encode(&self, g: &mut Graph<F>, input: Tensor<F>) -> Result<PoseTaps> {
        let cfg = &self.config;
        let s = input.shape.clone();
        if s.len() != 4 || s[2] != cfg.joints || s[3] != cfg.c_in || s[1] == 0 || s[1] > cfg.t_max || s[0] == 0 {
            return Err(Error::Shape {
                expected: format!("B x T x {} x {} with 1 <= T <= {}", cfg.joints, cfg.c_in, cfg.t_max),
                got: format!("{s:?}"),
            });
        }
        let (t, c) = (s[1], cfg.c_f);
        let x = g.input(input);
        let x = self.lin(g, x, "pose.lift");
        let token = self.p(g, "pose.token");
        let mut x = g.prepend(x, token);
        if cfg.temporal_pos {
            let table = self.p(g, "pose.pos_t");
            let rows: Vec<usize> = (0..=t).collect();
            let pos = g.gather(table, &rows);
            let pos = g.reshape(pos, &[1, t + 1, 1, c]);
            x = g.add_broadcast(x, pos);
        }
        let pj = self.p(g, "pose.pos_j");
        let pj = g.reshape(pj, &[1, 1, cfg.joints, c]);
        x = g.add_broadcast(x, pj);
        let mut mid = x;
        for i in 0..cfg.l1 + cfg.l2 {
            x = self.st_block(g, x, i);
            if i + 1 == cfg.l1 {
                mid = x;
            }
        }
        let last = self.ln(g, x, "pose.final_ln");
        Ok(PoseTaps { mid, last })
    }

    /// Per-token features `N x L x C_f` of a batch of token sequences,
    /// right-padded to the longest one.
    pub fn text_encode(&self, g: &mut Graph<F>, seqs: &[Vec<usize>]) -> Result<Var> {
        let cfg = &self.config;
        if seqs.is_empty() {
            return Err(Error::invalid("seqs", "no text to encode"));
        }
        let l = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if l > cfg.text_max_len || seqs.iter().any(Vec::is_empty) {
            return Err(Error::invalid("seqs", format!("token sequences must have 1..={} tokens", cfg.text_max_len)));
        }
        if let Some(&bad) = seqs.iter().flatten().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::invalid("seqs", format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let n = seqs.len();
        let c = cfg.c_f;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied().chain(std::iter::repeat_n(tokenizer::PAD, l - s.len()))).collect();
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let table = self.p(g, "text.tok_emb");
        let x = g.gather(table, &ids);
        let x = g.reshape(x, &[n, l, c]);
        let pos_table = self.p(g, "text.pos_emb");
        let rows: Vec<usize> = (0..l).collect();
        let pos = g.gather(pos_table, &rows);
        let pos = g.reshape(pos, &[1, l, c]);
        let x = g.add_broadcast(x, pos);
        let mut x = self.ln(g, x, "text.emb_ln");
        for i in 0..cfg.l3 {
            let name = format!("text.block{i}");
            let h = self.ln(g, x, &format!("{name}.ln1"));
            let h = self.self_attn(g, h, &format!("{name}.attn"), Some(lens.clone()));
            x = g.add(x, h);
            let h = self.ln(g, x, &format!("{name}.ln2"));
            let h = self.ffn(g, h, &format!("{name}.ffn"));
            x = g.add(x, h);
        }
        Ok(self.ln(g, x, "text.final_ln"))
    }

    /// Unit-norm `B x align_dim` pose embeddings from the middle tap.
    pub fn pool_pose(&self, g: &mut Graph<F>, mid: Var) -> Var {
        let s = g.shape(mid).to_vec();
        let (b, j, c) = (s[0], s[2], s[3]);
        let x = g.slice_axis1(mid, 0, 1);
        let x = g.reshape(x, &[b, j, c]);
        let x = self.lin(g, x, "pose_pool.fc1");
        let x = g.gelu(x);
        let x = self.ln(g, x, "pose_pool.ln1");
        let x = self.lin(g, x, "pose_pool.fc2");
        let x = g.gelu(x);
        let x = self.ln(g, x, "pose_pool.ln2");
        let w = self.p(g, "pose_pool.joint_w");
        let w = g.softmax(w);
        let x = g.weighted_sum_axis1(x, w);
        let x = self.lin(g, x, "pose_pool.out");
        g.normalize_rows(x)
    }

    /// Unit-norm `N x align_dim` text embeddings from the `<CLS>` feature.
    pub fn pool_text(&self, g: &mut Graph<F>, feats: Var) -> Var {
        let s = g.shape(feats).to_vec();
        let x = g.slice_axis1(feats, 0, 1);
        let x = g.reshape(x, &[s[0], s[2]]);
        let x = self.lin(g, x, "text_pool.fc1");
        let x = g.gelu(x);
        let x = self.ln(g, x, "text_pool.ln1");
        let x = self.lin(g, x, "text_pool.fc2");
        let x = g.gelu(x);
        let x = g.dropout(x, self.config.dropout);
        let x = self.lin(g, x, "text_pool.out");
        g.normalize_rows(x)
    }

    /// `B x T x J x 3` prediction from the last tap, `<POSE>` token dropped.
    pub fn regress_3d(&self, g: &mut Graph<F>, last: Var) -> Var {
        let t = g.shape(last)[1] - 1;
        let x = g.slice_axis1(last, 1, t);
        self.lin(g, x, "head")
    }

    /// Inference-mode 3D prediction.
    pub fn predict(&self, input: Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let taps = self.pose_encode(&mut g, input)?;
        let y = self.regress_3d(&mut g, taps.last);
        Ok(g.value(y).clone())
    }

    /// Inference-mode pose embeddings.
    pub fn embed_pose(&self, input: Tensor<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let taps = self.pose_encode(&mut g, input)?;
        let h = self.pool_pose(&mut g, taps.mid);
        Ok(g.value(h).clone())
    }

    /// Inference-mode text embeddings.
    pub fn embed_text(&self, tokenizer: &Tokenizer, texts: &[&str]) -> Result<Tensor<F>> {
        let seqs = texts.iter().map(|t| tokenizer.tokenize(t)).collect::<Result<Vec<_>>>()?;
        let mut g = Graph::new();
        let f = self.text_encode(&mut g, &seqs)?;
        let h = self.pool_text(&mut g, f);
        Ok(g.value(h).clone())
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        let mut params = ParamStore::new();
        for (i, name) in self.params.names().iter().enumerate() {
            params.add(name, self.params.value(i).cast());
        }
        Model { config: self.config.clone(), params }
    }
}
