use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{EncoderConfig, PromptVars};
use crate::cdfp::{self, CdfpOptions};
use crate::error::{Error, Result};
use crate::numerics::{matmul, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Grayscale image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

/// What the encoder consumes for one sample.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleInput {
    Image(Image),
    /// Precomputed feature vector of width `d`; enters the sequence as a
    /// single patch token, bypassing the patch embedding.
    Features(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Block {
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    w_qkv: Tensor,
    b_qkv: Tensor,
    w_out: Tensor,
    b_out: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
    w_up: Tensor,
    b_up: Tensor,
    w_down: Tensor,
    b_down: Tensor,
}

impl Block {
    fn init(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        Self {
            ln1_gain: Tensor::filled(1, d, 1.0),
            ln1_bias: Tensor::zeros(1, d),
            w_qkv: Tensor::randn(d, 3 * d, inv(d), rng),
            b_qkv: Tensor::zeros(1, 3 * d),
            w_out: Tensor::randn(d, d, inv(d), rng),
            b_out: Tensor::zeros(1, d),
            ln2_gain: Tensor::filled(1, d, 1.0),
            ln2_bias: Tensor::zeros(1, d),
            w_up: Tensor::randn(d, hidden, inv(d), rng),
            b_up: Tensor::zeros(1, hidden),
            w_down: Tensor::randn(hidden, d, inv(hidden), rng),
            b_down: Tensor::zeros(1, d),
        }
    }

    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_qkv,
            &self.b_qkv,
            &self.w_out,
            &self.b_out,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_up,
            &self.b_up,
            &self.w_down,
            &self.b_down,
        ]
    }

    fn forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        let c = |g: &mut Graph<'a>, t: &'a Tensor| g.constant_ref(t);
        let (g1, b1) = (c(g, &self.ln1_gain), c(g, &self.ln1_bias));
        let h = g.layernorm(x, g1, b1, LN_EPS)?;
        let w = c(g, &self.w_qkv);
        let qkv = g.matmul(h, w)?;
        let b = c(g, &self.b_qkv);
        let qkv = g.add_row(qkv, b)?;
        let a = g.attention(qkv, batch, seq, heads)?;
        let w = c(g, &self.w_out);
        let a = g.matmul(a, w)?;
        let b = c(g, &self.b_out);
        let a = g.add_row(a, b)?;
        let x = g.add(x, a)?;

        let (g2, b2) = (c(g, &self.ln2_gain), c(g, &self.ln2_bias));
        let h = g.layernorm(x, g2, b2, LN_EPS)?;
        let w = c(g, &self.w_up);
        let m = g.matmul(h, w)?;
        let b = c(g, &self.b_up);
        let m = g.add_row(m, b)?;
        let m = g.gelu(m)?;
        let w = c(g, &self.w_down);
        let m = g.matmul(m, w)?;
        let b = c(g, &self.b_down);
        let m = g.add_row(m, b)?;
        g.add(x, m)
    }
}

/// Seeded, immutable image tower.
#[derive(Clone, Debug)]
pub struct FrozenBackbone {
    cfg: EncoderConfig,
    patch_weight: Tensor,
    patch_bias: Tensor,
    /// `[CLS]` row with its positional embedding already added.
    cls: Tensor,
    /// Positional rows for the `J` patch slots.
    positions: Tensor,
    blocks: Vec<Block>,
    final_gain: Tensor,
    final_bias: Tensor,
    projection: Tensor,
}

/// Result of [`FrozenBackbone::encode`].
pub struct EncodeOutput {
    /// `B × d`, unit rows.
    pub z: Var,
    /// Prompt state per layer `0..L-1`, each `(B·K) × d`. Empty when `K = 0`.
    pub prompt_states: Vec<Var>,
}

impl FrozenBackbone {
    pub fn new(cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.dim;
        let pp = cfg.patch_pixels();
        let j = cfg.patches();
        let patch_weight = Tensor::randn(pp, d, 1.0 / (pp as f64).sqrt(), &mut rng);
        let patch_bias = Tensor::randn(1, d, 0.1, &mut rng);
        let cls = Tensor::randn(1, d, 1.0, &mut rng);
        let positions = Tensor::randn(j, d, 0.5, &mut rng);
        let blocks = (0..cfg.layers)
            .map(|_| Block::init(d, d * cfg.mlp_ratio, &mut rng))
            .collect();
        let projection = Tensor::randn(d, d, 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self {
            patch_weight,
            patch_bias,
            cls,
            positions,
            blocks,
            final_gain: Tensor::filled(1, d, 1.0),
            final_bias: Tensor::zeros(1, d),
            projection,
            cfg,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// SHA-256 over every frozen weight, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |t: &Tensor| {
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        };
        for t in [
            &self.patch_weight,
            &self.patch_bias,
            &self.cls,
            &self.positions,
        ] {
            feed(t);
        }
        for b in &self.blocks {
            b.tensors().into_iter().for_each(&mut feed);
        }
        for t in [&self.final_gain, &self.final_bias, &self.projection] {
            feed(t);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Patch embedding `E₀` (`J × d`): one affine map per `h × w` patch,
    /// patches taken in row-major order.
    pub fn embed_patches(&self, image: &Image) -> Result<Tensor> {
        let (ph, pw) = (self.cfg.patch_height, self.cfg.patch_width);
        if image.height % ph != 0 || image.width % pw != 0 {
            return Err(Error::shape(
                "embed_patches",
                format!(
                    "{}x{} image is not divisible into {ph}x{pw} patches",
                    image.height, image.width
                ),
            ));
        }
        if image.pixels.len() != image.height * image.width {
            return Err(Error::shape(
                "embed_patches",
                format!(
                    "{} pixels for a {}x{} image",
                    image.pixels.len(),
                    image.height,
                    image.width
                ),
            ));
        }
        let (gr, gc) = (image.height / ph, image.width / pw);
        let mut patches = Tensor::zeros(gr * gc, ph * pw);
        for pr in 0..gr {
            for pc in 0..gc {
                let row = patches.row_slice_mut(pr * gc + pc);
                for y in 0..ph {
                    let src = (pr * ph + y) * image.width + pc * pw;
                    row[y * pw..(y + 1) * pw].copy_from_slice(&image.pixels[src..src + pw]);
                }
            }
        }
        let mut e = matmul(&patches, &self.patch_weight)?;
        for r in 0..e.rows() {
            for (v, b) in e.row_slice_mut(r).iter_mut().zip(self.patch_bias.data()) {
                *v += b;
            }
        }
        Ok(e)
    }

    /// Token rows that follow the prompt slice for one sample: patch
    /// embeddings plus positional rows (or the feature vector as one token).
    pub fn input_tokens(&self, input: &SampleInput) -> Result<Tensor> {
        let mut e = match input {
            SampleInput::Image(img) => {
                if img.height != self.cfg.image_height || img.width != self.cfg.image_width {
                    return Err(Error::shape(
                        "input_tokens",
                        format!(
                            "image {}x{} but encoder expects {}x{}",
                            img.height, img.width, self.cfg.image_height, self.cfg.image_width
                        ),
                    ));
                }
                self.embed_patches(img)?
            }
            SampleInput::Features(v) => {
                if v.len() != self.cfg.dim {
                    return Err(Error::shape(
                        "input_tokens",
                        format!("feature width {} but d = {}", v.len(), self.cfg.dim),
                    ));
                }
                Tensor::row(v.clone())
            }
        };
        for r in 0..e.rows() {
            for (v, p) in e.row_slice_mut(r).iter_mut().zip(self.positions.row_slice(r)) {
                *v += p;
            }
        }
        Ok(e)
    }

    /// Forward pass of a batch. `tokens[b]` comes from [`Self::input_tokens`];
    /// all samples in a batch must have the same token count.
    pub fn encode<'a>(
        &'a self,
        g: &mut Graph<'a>,
        tokens: &[&'a Tensor],
        prompts: &PromptVars,
        cdfp: CdfpOptions,
    ) -> Result<EncodeOutput> {
        let batch = tokens.len();
        if batch == 0 {
            return Err(Error::invalid("encode called with an empty batch"));
        }
        let d = self.cfg.dim;
        let k = prompts.prompt_tokens(g);
        let j = tokens[0].rows();
        if tokens.iter().any(|t| t.rows() != j || t.cols() != d) {
            return Err(Error::shape("encode", "batch has mismatched token shapes"));
        }
        if prompts.tokens.len() != self.cfg.layers
            || prompts.queries.len() != self.cfg.layers - 1
        {
            return Err(Error::shape(
                "encode",
                format!(
                    "prompt set has {} token layers / {} queries for {} layers",
                    prompts.tokens.len(),
                    prompts.queries.len(),
                    self.cfg.layers
                ),
            ));
        }
        for &t in &prompts.tokens {
            if g.value(t).shape() != [k, d] {
                return Err(Error::shape("encode", "prompt tokens must be K x d"));
            }
        }
        let seq = 1 + k + j;

        let cls = g.constant_ref(&self.cls);
        let mut parts = Vec::with_capacity(3 * batch);
        for &t in tokens {
            parts.push(cls);
            if k > 0 {
                parts.push(prompts.tokens[0]);
            }
            parts.push(g.constant_ref(t));
        }
        let mut x = g.concat_rows(&parts)?;

        let prompt_rows: Vec<usize> = (0..batch)
            .flat_map(|b| (0..k).map(move |i| b * seq + 1 + i))
            .collect();
        // (B·K) × K tiling matrix: replicates a K × d prompt across the batch.
        let tile = (k > 0).then(|| {
            let mut t = Tensor::zeros(batch * k, k);
            for b in 0..batch {
                for i in 0..k {
                    t.set(b * k + i, i, 1.0);
                }
            }
            g.constant(t)
        });

        let mut history = Vec::new();
        if let Some(tile) = tile {
            history.push(g.matmul(tile, prompts.tokens[0])?);
        }
        let mut states = history.clone();

        for (l, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, x, batch, seq, self.cfg.heads)?;
            let layer = l + 1;
            if layer == self.cfg.layers {
                break;
            }
            let Some(tile) = tile else { continue };
            let out = g.gather_rows(x, &prompt_rows)?;
            let deep = g.matmul(tile, prompts.tokens[layer])?;
            let state = g.add(out, deep)?;
            let updated = if cdfp.enabled {
                cdfp::apply_cross_layer(g, state, &history, prompts.queries[layer - 1], batch, k)?
            } else {
                state
            };
            let delta = g.sub(updated, out)?;
            x = g.add_at_rows(x, &prompt_rows, delta)?;
            history.push(if cdfp.compounding { updated } else { state });
            states.push(updated);
        }

        let cls_rows: Vec<usize> = (0..batch).map(|b| b * seq).collect();
        let c = g.gather_rows(x, &cls_rows)?;
        let (fg, fb) = (g.constant_ref(&self.final_gain), g.constant_ref(&self.final_bias));
        let c = g.layernorm(c, fg, fb, LN_EPS)?;
        let p = g.constant_ref(&self.projection);
        let z = g.matmul(c, p)?;
        let z = g.normalize_rows(z)?;
        Ok(EncodeOutput {
            z,
            prompt_states: states,
        })
    }

    /// Forward-only convenience: unit embeddings (`B × d`) for a batch.
    pub fn embed(
        &self,
        tokens: &[&Tensor],
        prompts: &super::PromptSet,
        cdfp: CdfpOptions,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = prompts.constants(&mut g);
        let out = self.encode(&mut g, tokens, &vars, cdfp)?;
        Ok(g.value(out.z).clone())
    }
}

#[cfg(test)]
impl FrozenBackbone {
    /// Zeroes every attention output projection (test-only).
    pub(crate) fn silence_attention(&mut self) {
        for b in &mut self.blocks {
            b.w_out = Tensor::zeros(b.w_out.rows(), b.w_out.cols());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PromptSet;
    use rand::Rng;

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image {
            height: 32,
            width: 32,
            pixels: (0..1024).map(|_| rng.random::<f64>()).collect(),
        }
    }

    fn on() -> CdfpOptions {
        CdfpOptions::default()
    }

    #[test]
    fn zero_image_rows_equal_bias() {
        let bb = FrozenBackbone::new(EncoderConfig::default()).unwrap();
        let img = Image {
            height: 32,
            width: 32,
            pixels: vec![0.0; 1024],
        };
        let e = bb.embed_patches(&img).unwrap();
        assert_eq!(e.shape(), [16, 32]);
        for r in 0..16 {
            assert_eq!(e.row_slice(r), bb.patch_bias.data());
        }
    }

    #[test]
    fn rejects_indivisible_image() {
        let bb = FrozenBackbone::new(EncoderConfig::default()).unwrap();
        let img = Image {
            height: 30,
            width: 32,
            pixels: vec![0.0; 960],
        };
        assert!(matches!(bb.embed_patches(&img), Err(Error::Shape { .. })));
    }

    #[test]
    fn embedding_is_deterministic_and_unit() {
        let cfg = EncoderConfig::default();
        let bb = FrozenBackbone::new(cfg.clone()).unwrap();
        let img = random_image(3);
        let e1 = bb.embed_patches(&img).unwrap();
        let e2 = bb.embed_patches(&img).unwrap();
        assert_eq!(e1, e2);

        let prompts = PromptSet::init(&cfg, &[], &mut ChaCha8Rng::seed_from_u64(1));
        let tok = bb.input_tokens(&SampleInput::Image(img)).unwrap();
        let z1 = bb.embed(&[&tok], &prompts, on()).unwrap();
        let bb2 = FrozenBackbone::new(cfg).unwrap();
        let z2 = bb2.embed(&[&tok], &prompts, on()).unwrap();
        assert_eq!(z1, z2);
        assert!((z1.norm() - 1.0).abs() <= 1e-12);
        assert_eq!(bb.content_hash(), bb2.content_hash());
    }

    #[test]
    fn batching_does_not_change_rows() {
        let cfg = EncoderConfig::default();
        let bb = FrozenBackbone::new(cfg.clone()).unwrap();
        let prompts = PromptSet::init(&cfg, &[], &mut ChaCha8Rng::seed_from_u64(2));
        let toks: Vec<Tensor> = (0..3)
            .map(|s| bb.input_tokens(&SampleInput::Image(random_image(s))).unwrap())
            .collect();
        let refs: Vec<&Tensor> = toks.iter().collect();
        let all = bb.embed(&refs, &prompts, on()).unwrap();
        for (i, t) in toks.iter().enumerate() {
            let one = bb.embed(&[t], &prompts, on()).unwrap();
            assert!(one.max_abs_diff(&all.slice_rows(i, 1).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn empty_prompt_set_equals_promptless_pass() {
        let cfg = EncoderConfig {
            prompt_tokens: 0,
            ..Default::default()
        };
        let bb = FrozenBackbone::new(cfg.clone()).unwrap();
        let prompts = PromptSet::init(&cfg, &[], &mut ChaCha8Rng::seed_from_u64(0));
        let tok = bb.input_tokens(&SampleInput::Image(random_image(9))).unwrap();
        let z = bb.embed(&[&tok], &prompts, on()).unwrap();
        let z_off = bb.embed(&[&tok], &prompts, CdfpOptions::disabled()).unwrap();
        assert_eq!(z, z_off);

        // Reference: the same blocks applied to [cls; E] directly.
        let mut g = Graph::new();
        let cls = g.constant_ref(&bb.cls);
        let t = g.constant_ref(&tok);
        let mut x = g.concat_rows(&[cls, t]).unwrap();
        for b in &bb.blocks {
            x = b.forward(&mut g, x, 1, 17, cfg.heads).unwrap();
        }
        let c = g.slice_rows(x, 0, 1).unwrap();
        let (fg, fb) = (g.constant_ref(&bb.final_gain), g.constant_ref(&bb.final_bias));
        let c = g.layernorm(c, fg, fb, LN_EPS).unwrap();
        let p = g.constant_ref(&bb.projection);
        let c = g.matmul(c, p).unwrap();
        let c = g.normalize_rows(c).unwrap();
        assert!(g.value(c).max_abs_diff(&z) <= 1e-12);
    }

    #[test]
    fn zero_prompts_only_act_through_attention() {
        let cfg = EncoderConfig {
            layers: 1,
            ..Default::default()
        };
        let mut bb = FrozenBackbone::new(cfg.clone()).unwrap();
        bb.silence_attention();
        let mut zero = PromptSet::init(&cfg, &[], &mut ChaCha8Rng::seed_from_u64(0));
        zero.tokens.iter_mut().for_each(|t| *t = Tensor::zeros(t.rows(), t.cols()));
        let none_cfg = EncoderConfig {
            prompt_tokens: 0,
            ..cfg.clone()
        };
        let none = PromptSet::init(&none_cfg, &[], &mut ChaCha8Rng::seed_from_u64(0));
        let tok = bb.input_tokens(&SampleInput::Image(random_image(4))).unwrap();
        let a = bb.embed(&[&tok], &zero, CdfpOptions::disabled()).unwrap();
        let b = bb.embed(&[&tok], &none, CdfpOptions::disabled()).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn gradients_reach_only_prompts() {
        let cfg = EncoderConfig::default();
        let bb = FrozenBackbone::new(cfg.clone()).unwrap();
        let before = bb.content_hash();
        let prompts = PromptSet::init(&cfg, &[], &mut ChaCha8Rng::seed_from_u64(5));
        let tok = bb.input_tokens(&SampleInput::Image(random_image(1))).unwrap();
        let mut g = Graph::new();
        let vars = prompts.register(&mut g);
        let out = bb.encode(&mut g, &[&tok], &vars, on()).unwrap();
        assert_eq!(out.prompt_states.len(), cfg.layers);
        let w = g.constant(Tensor::randn(1, cfg.dim, 1.0, &mut ChaCha8Rng::seed_from_u64(8)));
        let p = g.mul(out.z, w).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        let flat = vars.gradients(&grads, &prompts);
        assert_eq!(flat.len(), prompts.to_params().len());
        let norms: Vec<f64> = flat.iter().map(Tensor::norm).collect();
        // The layer-1 query sees a single predecessor, so its weight is
        // pinned at 1 and its gradient vanishes.
        let first_query = cfg.layers;
        for (i, n) in norms.iter().enumerate() {
            assert_eq!(*n == 0.0, i == first_query, "{norms:?}");
        }
        assert_eq!(bb.content_hash(), before);
    }

    #[test]
    fn sequence_length() {
        let cfg = EncoderConfig::default();
        assert_eq!(cfg.patches(), 16);
        assert_eq!(cfg.sequence_len(), 1 + 2 + 16);
    }
}
