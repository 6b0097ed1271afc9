use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfe_tensor::{Bound, Graph, ParamStore, Scalar, Tensor, Var};

use super::GeneratorConfig;
use crate::error::{CoreError, Result};
use crate::nn::{lrelu_gain, Conv, Linear, LRELU_SLOPE};

/// Residual downsampling discriminator mirroring the generator's channel
/// schedule.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Scalar> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
}

struct Block {
    a: Conv,
    b: Conv,
    skip: Conv,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed ^ 0xD15C);
        let mut params = ParamStore::new();
        let d = Self { config, params: ParamStore::new() };
        d.from_rgb().init(&mut params, &mut rng, lrelu_gain());
        for blk in d.blocks() {
            blk.a.init(&mut params, &mut rng, lrelu_gain());
            blk.b.init(&mut params, &mut rng, lrelu_gain());
            blk.skip.init(&mut params, &mut rng, 1.0);
        }
        d.final_conv().init(&mut params, &mut rng, lrelu_gain());
        d.fc().init(&mut params, &mut rng, lrelu_gain(), 0.0);
        d.out().init(&mut params, &mut rng, 1.0, 0.0);
        Ok(Self { params, ..d })
    }

    fn from_rgb(&self) -> Conv {
        Conv::new("from_rgb", 3, self.config.channels_at(self.config.image_resolution), 1, 1)
    }

    fn blocks(&self) -> Vec<Block> {
        let mut out = Vec::new();
        let mut res = self.config.image_resolution;
        while res > 4 {
            let (c, c2) = (self.config.channels_at(res), self.config.channels_at(res / 2));
            out.push(Block {
                a: Conv::new(format!("b{res}.a"), c, c, 3, 1),
                b: Conv::new(format!("b{res}.b"), c, c2, 3, 1),
                skip: Conv::new(format!("b{res}.skip"), c, c2, 1, 1),
            });
            res /= 2;
        }
        out
    }

    fn c4(&self) -> usize {
        self.config.channels_at(4)
    }

    fn final_conv(&self) -> Conv {
        Conv::new("final", self.c4(), self.c4(), 3, 1)
    }

    fn fc(&self) -> Linear {
        Linear::new("fc", self.c4() * 16, self.c4())
    }

    fn out(&self) -> Linear {
        Linear::new("out", self.c4(), 1)
    }

    /// `[B, 3, R, R] -> [B]` logits.
    pub fn forward<'g>(&self, p: &Bound<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let b = x.dim(0);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let mut h = self.from_rgb().forward(p, x).leaky_relu(LRELU_SLOPE);
        for blk in self.blocks() {
            let skip = blk.skip.forward(p, h.avg_pool2x2());
            let main = blk.a.forward(p, h).leaky_relu(LRELU_SLOPE);
            let main = blk.b.forward(p, main).leaky_relu(LRELU_SLOPE).avg_pool2x2();
            h = (skip + main).scale(inv_sqrt2);
        }
        let h = self.final_conv().forward(p, h).leaky_relu(LRELU_SLOPE);
        let h = h.reshape(&[b, self.c4() * 16]);
        let h = self.fc().forward(p, h).leaky_relu(LRELU_SLOPE);
        self.out().forward(p, h).reshape(&[b])
    }

    pub fn discriminate(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let r = self.config.image_resolution;
        if images.ndim() != 4 || images.shape()[1..] != [3, r, r] {
            return Err(CoreError::Shape(format!("expected [B, 3, {r}, {r}] images, got {:?}", images.shape())));
        }
        let g = Graph::new();
        let p = Bound::new(&g, &self.params, false);
        Ok(self.forward(&p, g.constant(images.clone())).tensor())
    }
}
