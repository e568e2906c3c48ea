use rand::rngs::StdRng;
use rand::SeedableRng;

use super::{BlockConfig, ConvLayer, GraphBuilder, ModelGraph, Op, INPUT};
use crate::error::{Error, Result};
use crate::reparam::{self, random_conv};
use crate::tensor::Activation;

/// A SPAN-style network:
///
/// ```text
/// input ─ head ─ spab1 ─ … ─ spabN ─ tail ─┐
///           │      │           │           ├ concat ─ fuse(1×1) ─ up(3×3) ─ pixel_shuffle
///           └──────┴── taps ───┴───────────┘
/// ```
///
/// Every 3×3 convolution is built in its multi-branch training form;
/// [`super::fuse_graph`] collapses them.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanConfig {
    pub channels: usize,
    pub depth: usize,
    pub scale: usize,
    /// Channel-expansion gains of each multi-branch conv.
    pub gains: Vec<usize>,
    /// 1-based SPAB indices whose outputs feed the aggregation concat.
    pub taps: Vec<usize>,
    pub attn_bias: f64,
    pub in_channels: usize,
    pub seed: u64,
}

impl SpanConfig {
    pub fn new(channels: usize, depth: usize, scale: usize) -> Self {
        SpanConfig {
            channels,
            depth,
            scale,
            gains: vec![2],
            taps: vec![1, depth.saturating_sub(1).max(1)],
            attn_bias: Activation::DEFAULT_SHIFT,
            in_channels: 3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels < 8 {
            return Err(Error::invalid("span", format!("channels must be at least 8, got {}", self.channels)));
        }
        if self.depth == 0 {
            return Err(Error::invalid("span", "depth must be at least 1"));
        }
        if !(2..=4).contains(&self.scale) {
            return Err(Error::invalid("span", format!("scale must be 2, 3 or 4, got {}", self.scale)));
        }
        if self.gains.is_empty() || self.gains.contains(&0) {
            return Err(Error::invalid("span", "gains must be non-empty and positive"));
        }
        if let Some(t) = self.taps.iter().find(|&&t| t == 0 || t > self.depth) {
            return Err(Error::invalid("span", format!("tap {t} outside 1..={}", self.depth)));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<ModelGraph> {
        self.validate()?;
        let mut rng = StdRng::seed_from_u64(self.seed);
        let c = self.channels;
        let out_c = self.in_channels * self.scale * self.scale;
        let rep = |rng: &mut StdRng, ci, co| -> Result<Op> {
            Ok(Op::Conv(ConvLayer::Rep(reparam::gain_block(rng, ci, co, &self.gains, true)?)))
        };

        let mut g = GraphBuilder::new(self.in_channels, self.scale, c);
        let head = g.add("head", rep(&mut rng, self.in_channels, c)?, &[INPUT]);
        let spab = BlockConfig::Spab {
            channels: c,
            attn_bias: self.attn_bias,
            gains: self.gains.clone(),
        };
        let mut prev = head.clone();
        let mut outs = Vec::with_capacity(self.depth);
        for i in 1..=self.depth {
            prev = g.add(&format!("spab{i}"), spab.instantiate(&mut rng)?, &[&prev]);
            outs.push(prev.clone());
        }
        let tail = g.add("tail", rep(&mut rng, c, c)?, &[&prev]);
        let mut cat_in: Vec<&str> = vec![&head, &tail];
        cat_in.extend(self.taps.iter().map(|&t| outs[t - 1].as_str()));
        let n_cat = cat_in.len();
        g.add("concat", Op::Concat, &cat_in);
        let fuse = random_conv(&mut rng, c, n_cat * c, 1, true);
        g.add("fuse", Op::Conv(ConvLayer::Plain(fuse)), &["concat"]);
        g.add("up", rep(&mut rng, c, out_c)?, &["fuse"]);
        g.add("shuffle", Op::PixelShuffle(self.scale), &["up"]);
        g.build()
    }
}

/// Reference SPAN-style model with default gains, taps and seed.
pub fn build_reference_span(channels: usize, depth: usize, scale: usize) -> Result<ModelGraph> {
    SpanConfig::new(channels, depth, scale).build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::fuse_graph;
    use crate::tensor::{Shape, Tensor};
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn output_is_upscaled_rgb() {
        let g = build_reference_span(8, 1, 4).unwrap();
        let shapes = g.infer_shapes(Shape::new(1, 3, 64, 64)).unwrap();
        assert_eq!(shapes.last().unwrap().1, Shape::new(1, 3, 256, 256));
        for scale in [2, 3] {
            let g = build_reference_span(8, 2, scale).unwrap();
            let out = g.infer_shapes(Shape::new(1, 3, 10, 7)).unwrap().last().unwrap().1;
            assert_eq!((out.h, out.w), (10 * scale, 7 * scale));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(build_reference_span(4, 2, 4).is_err());
        assert!(build_reference_span(16, 0, 4).is_err());
        assert!(build_reference_span(16, 2, 5).is_err());
    }

    #[test]
    fn fused_graph_matches() {
        let g = build_reference_span(8, 2, 2).unwrap();
        let f = fuse_graph(&g).unwrap();
        assert!(g.has_rep() && !f.has_rep());
        let mut rng = StdRng::seed_from_u64(44);
        let x = Tensor::random_uniform(Shape::new(1, 3, 12, 12), &mut rng, 0.0, 1.0);
        let d = g.forward(&x).unwrap().max_abs_diff(&f.forward(&x).unwrap()).unwrap();
        assert!(d <= 1e-4, "{d}");
    }

    /// Deployed size summed by hand: head, 3 convs per SPAB, tail, the
    /// 4-way concat 1×1 and the 48-channel upsampler conv.
    fn deployed_params(c: usize, depth: usize) -> usize {
        let conv = |ci: usize, co: usize, k: usize| ci * co * k * k + co;
        conv(3, c, 3) + 3 * depth * conv(c, c, 3) + conv(c, c, 3) + conv(4 * c, c, 1) + conv(c, 48, 3)
    }

    #[test]
    fn deployed_size_near_table_rows() {
        use crate::profiler::count_params;
        for (c, depth) in [(32, 6), (32, 5), (28, 6)] {
            let f = fuse_graph(&build_reference_span(c, depth, 4).unwrap()).unwrap();
            assert_eq!(count_params(&f, true), deployed_params(c, depth), "({c},{depth})");
        }
        // 32 channels with one SPAB dropped from the usual six is within 20%
        // of the 0.148 M row; so is 28 channels at full depth.
        for (c, depth) in [(32, 5), (28, 6)] {
            let m = deployed_params(c, depth) as f64 / 1e6;
            assert!((m - 0.148).abs() / 0.148 <= 0.2, "({c},{depth}) {m}");
        }
        assert_eq!(deployed_params(32, 6), 194_608);
    }
}
